"""Adam, parameter EMA, checkpoints, the training loop and evaluation."""

from __future__ import annotations

import logging
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from flowsr.autodiff.tensor import Tensor, no_grad
from flowsr.data import FlowSample, bicubic_upsample, load_split, read_manifest
from flowsr.errors import CheckpointError, ConfigError, DatasetError, DivergenceError
from flowsr.fld import atomic_write_bytes, encode, fld_read
from flowsr.metrics import MetricReport, measure
from flowsr.model import NetworkConfig, Params, check_params, forward, init_params, l1_loss, parameter_shapes

logger = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch: int = 4
    iterations: int = 2000
    ema_decay: float = 0.999
    ema_warmup: bool = True
    lr_crop: int = 32
    seed: int = 0
    eval_every: int = 500
    eval_limit: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str = "runs/default"
    augment: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1 or self.iterations < 0 or self.lr_crop < 1:
            raise ConfigError("batch, lr_crop must be >= 1 and iterations >= 0")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        base = dict(batch=12, iterations=80000, lr_crop=64, eval_every=5000)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        from flowsr.model import _coerce

        defaults = cls()
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown train config key {key!r}")
            kwargs[key] = _coerce(value, type(getattr(defaults, key)))
        return cls(**kwargs)


# -- optimizer and EMA -----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def create(cls, params: Params, **kwargs) -> "AdamState":
        return cls(
            {k: np.zeros_like(p.data) for k, p in params.items()},
            {k: np.zeros_like(p.data) for k, p in params.items()},
            **kwargs,
        )


def adam_step(params: Params, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every parameter in place."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise ConfigError(f"missing gradient for {len(missing)} parameter(s), e.g. {missing[0]}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def ema_update(shadow: Dict[str, np.ndarray], params: Params, decay: float) -> Dict[str, np.ndarray]:
    """shadow <- decay * shadow + (1 - decay) * params, in place."""
    if set(shadow) != set(params):
        raise ConfigError("EMA shadow and parameters have different names")
    for name, p in params.items():
        s = shadow[name]
        if s.shape != p.shape:
            raise ConfigError(f"EMA shadow {name} has shape {s.shape}, parameter has {p.shape}")
        s *= decay
        s += (1.0 - decay) * p.data
    return shadow


def ema_decay_at(step: int, decay: float, warmup: bool) -> float:
    """Constant decay, or min(decay, (1 + step) / (10 + step)) during warmup."""
    return min(decay, (1.0 + step) / (10.0 + step)) if warmup else decay


# -- checkpoints -------------------------------------------------------------------------------------------

DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def _write_kv(path: Path, values: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()))


def read_kv(path) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class Checkpoint:
    net: NetworkConfig
    params: Dict[str, np.ndarray]
    ema: Dict[str, np.ndarray]
    step: int = 0
    adam: Optional[AdamState] = None
    train: Optional[TrainConfig] = None

    def tensors(self, use_ema: bool = False) -> Params:
        src = self.ema if use_ema else self.params
        return {k: Tensor(v.copy(), requires_grad=True) for k, v in src.items()}


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    """Write manifest + one FLD1 file per tensor + config, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        entries = [(k, v) for k, v in ckpt.params.items()]
        entries += [(f"ema/{k}", v) for k, v in ckpt.ema.items()]
        if ckpt.adam is not None:
            entries += [(f"adam.m/{k}", v) for k, v in ckpt.adam.m.items()]
            entries += [(f"adam.v/{k}", v) for k, v in ckpt.adam.v.items()]
        lines = []
        for name, arr in entries:
            target = tmp / f"{name}.fld"
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(encode(arr))
            lines.append(f"{name} {','.join(map(str, arr.shape))} {DTYPE_NAMES[arr.dtype]}")
        (tmp / "manifest.txt").write_text("\n".join(lines) + "\n")
        _write_kv(tmp / "config.txt", ckpt.net.to_dict())
        state = {"step": ckpt.step}
        if ckpt.adam is not None:
            state.update(adam_step=ckpt.adam.step, adam_beta1=ckpt.adam.betas[0],
                         adam_beta2=ckpt.adam.betas[1], adam_eps=ckpt.adam.eps)
        if ckpt.train is not None:
            state.update({f"train.{k}": v for k, v in asdict(ckpt.train).items()})
        _write_kv(tmp / "state.txt", state)
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not (path / "manifest.txt").exists():
        raise CheckpointError(f"no checkpoint manifest in {path}")
    net = NetworkConfig.from_dict(read_kv(path / "config.txt"))
    groups: Dict[str, Dict[str, np.ndarray]] = {"": {}, "ema/": {}, "adam.m/": {}, "adam.v/": {}}
    for line in (path / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, shape, _dtype = line.split()
        arr = fld_read(path / f"{name}.fld")
        if arr.shape != tuple(int(s) for s in shape.split(",") if s):
            raise CheckpointError(f"{name}: stored shape {arr.shape} disagrees with manifest {shape}")
        prefix = next((p for p in ("ema/", "adam.m/", "adam.v/") if name.startswith(p)), "")
        groups[prefix][name[len(prefix):]] = arr
    expected = [n for n, _ in parameter_shapes(net)]
    if list(groups[""]) != expected:
        raise CheckpointError("checkpoint parameters do not match its network config")
    state = read_kv(path / "state.txt") if (path / "state.txt").exists() else {}
    adam = None
    if groups["adam.m/"]:
        adam = AdamState(
            groups["adam.m/"],
            groups["adam.v/"],
            int(state.get("adam_step", 0)),
            (float(state.get("adam_beta1", 0.9)), float(state.get("adam_beta2", 0.999))),
            float(state.get("adam_eps", 1e-8)),
        )
    train_cfg = None
    train_keys = {k[len("train."):]: v for k, v in state.items() if k.startswith("train.")}
    if train_keys:
        train_cfg = TrainConfig.from_dict(train_keys)
    ema = groups["ema/"] or {k: v.copy() for k, v in groups[""].items()}
    return Checkpoint(net, groups[""], ema, int(state.get("step", 0)), adam, train_cfg)


# -- batches ------------------------------------------------------------------------------------------------


def augment_pair(lr: np.ndarray, hr: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Random horizontal/vertical flips and 90-degree rotation, applied to both images."""
    if rng.random() < 0.5:
        lr, hr = lr[:, :, ::-1], hr[:, :, ::-1]
    if rng.random() < 0.5:
        lr, hr = lr[:, ::-1, :], hr[:, ::-1, :]
    k = int(rng.integers(4))
    if k:
        lr, hr = np.rot90(lr, k, axes=(1, 2)), np.rot90(hr, k, axes=(1, 2))
    return lr, hr


def sample_batch(
    samples: List[FlowSample], batch: int, crop: int, rng: np.random.Generator, augment: bool = True
) -> Tuple[np.ndarray, np.ndarray]:
    """Random aligned crops: LR crop x crop and the matching HR (crop*s)^2 window."""
    lrs, hrs = [], []
    for _ in range(batch):
        s = samples[int(rng.integers(len(samples)))]
        h, w = s.lr.shape[1:]
        if crop > h or crop > w:
            raise ConfigError(f"lr_crop {crop} larger than LR image {h}x{w}")
        y = int(rng.integers(h - crop + 1))
        x = int(rng.integers(w - crop + 1))
        sc = s.scale
        lr = s.lr[:, y : y + crop, x : x + crop]
        hr = s.hr[:, y * sc : (y + crop) * sc, x * sc : (x + crop) * sc]
        if augment:
            lr, hr = augment_pair(lr, hr, rng)
        lrs.append(lr)
        hrs.append(hr)
    return np.ascontiguousarray(np.stack(lrs)), np.ascontiguousarray(np.stack(hrs))


# -- evaluation ----------------------------------------------------------------------------------------------


def predict(lr: np.ndarray, params: Params, cfg: NetworkConfig) -> np.ndarray:
    """Whole-image inference: reflect-pad [3, H, W] to the window multiple, crop back."""
    c, h, w = lr.shape
    ph = (-h) % cfg.window
    pw = (-w) % cfg.window
    x = np.pad(lr, ((0, 0), (0, ph), (0, pw)), mode="reflect") if ph or pw else lr
    dtype = next(iter(params.values())).dtype
    with no_grad():
        out = forward(Tensor(x[None].astype(dtype)), params, cfg).data[0]
    return out[:, : h * cfg.scale, : w * cfg.scale]


def evaluate(
    samples: List[FlowSample],
    mode: str = "model",
    params: Optional[Params] = None,
    cfg: Optional[NetworkConfig] = None,
    label: str = "",
    keep_predictions: bool = False,
):
    """Metric report over ``samples``.

    ``mode`` is ``model`` (network prediction), ``bicubic`` (classical
    upsampling of the LR image) or ``oracle`` (the HR image itself).
    Returns (report, predictions) where predictions is empty unless requested.
    """
    report = MetricReport(label or mode)
    preds = {}
    for s in samples:
        if mode == "model":
            if cfg is not None and cfg.scale != s.scale:
                raise ConfigError(f"model scale {cfg.scale} does not match sample scale {s.scale}")
            pred = predict(s.lr, params, cfg)
        elif mode == "bicubic":
            pred = bicubic_upsample(s.lr, s.scale)
        elif mode == "oracle":
            pred = s.hr
        else:
            raise ConfigError(f"unknown evaluation mode {mode!r}")
        pred = np.clip(pred, 0.0, 1.0)
        report.add(measure(s.id, pred, s.hr))
        if keep_predictions:
            preds[s.id] = pred
    return report, preds


def evaluate_checkpoint(path, data_root, split: str = "test", use_ema: bool = True, limit: int = 0):
    ckpt = load_checkpoint(path)
    scales = {r[4] for r in read_manifest(Path(data_root) / split)}
    if ckpt.net.scale not in scales:
        raise ConfigError(f"checkpoint scale x{ckpt.net.scale} not present in dataset scales {sorted(scales)}")
    samples = load_split(data_root, split, ckpt.net.scale)
    if limit:
        samples = samples[:limit]
    params = ckpt.tensors(use_ema)
    label = f"{'ema' if use_ema else 'raw'} x{ckpt.net.scale} {split}"
    return evaluate(samples, "model", params, ckpt.net, label=label)


# -- training --------------------------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Optional[Path]
    losses: List[float]
    evals: List[Tuple[int, float, float]] = field(default_factory=list)  # (step, raw psnr, ema psnr)
    params: Optional[Params] = None
    ema: Optional[Dict[str, np.ndarray]] = None
    adam: Optional[AdamState] = None
    seconds: float = 0.0


def train(
    tcfg: TrainConfig,
    ncfg: NetworkConfig,
    data_root,
    out_dir=None,
    resume=None,
    log: Optional[Callable[[str], None]] = None,
    stop_at: Optional[int] = None,
) -> TrainResult:
    """Run the L1 / Adam / EMA loop.

    Batches for step t come from ``default_rng([seed, t])``, so a run resumed
    from a checkpoint continues exactly as the uninterrupted run would.
    ``stop_at`` ends the loop early (after that many total steps) without
    changing the schedule.
    """
    import time

    t0 = time.perf_counter()
    dtype = DTYPES[tcfg.dtype]
    train_set = load_split(data_root, "train", ncfg.scale)
    test_set = None
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.net.to_dict() != ncfg.to_dict():
            raise ConfigError("resume checkpoint was trained with a different network config")
        params = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in ckpt.params.items()}
        shadow = {k: v.astype(dtype) for k, v in ckpt.ema.items()}
        adam = ckpt.adam or AdamState.create(params)
        start = ckpt.step
    else:
        params = init_params(ncfg, tcfg.seed, dtype=dtype)
        shadow = {k: p.data.copy() for k, p in params.items()}
        adam = AdamState.create(params)
        start = 0
    check_params(params, ncfg)
    if out_dir is not None:
        log_fh = open(out_dir / "train_log.txt", "a" if resume is not None else "w", buffering=1)

    losses: List[float] = []
    evals: List[Tuple[int, float, float]] = []
    end = tcfg.iterations if stop_at is None else min(stop_at, tcfg.iterations)
    try:
        for step in range(start, end):
            rng = np.random.default_rng([tcfg.seed, step])
            lr_b, hr_b = sample_batch(train_set, tcfg.batch, tcfg.lr_crop, rng, tcfg.augment)
            for p in params.values():
                p.grad = None
            pred = forward(Tensor(lr_b.astype(dtype)), params, ncfg)
            loss = l1_loss(pred, Tensor(hr_b.astype(dtype)))
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"loss became non-finite ({value}) at step {step + 1}")
            loss.backward()
            adam_step(params, adam, tcfg.lr)
            ema_update(shadow, params, ema_decay_at(step, tcfg.ema_decay, tcfg.ema_warmup))
            losses.append(value)
            line = f"{step + 1} {value:.9g} {tcfg.lr:g}"
            if log_fh is not None:
                log_fh.write(line + "\n")
            if log is not None:
                log(line)
            if tcfg.eval_every and (step + 1) % tcfg.eval_every == 0:
                if test_set is None:
                    test_set = load_split(data_root, "test", ncfg.scale)
                    if tcfg.eval_limit:
                        test_set = test_set[: tcfg.eval_limit]
                raw, _ = evaluate(test_set, "model", params, ncfg)
                ema_params = {k: Tensor(v) for k, v in shadow.items()}
                ema, _ = evaluate(test_set, "model", ema_params, ncfg)
                evals.append((step + 1, raw.psnr, ema.psnr))
                msg = f"eval step {step + 1} psnr_raw {raw.psnr:.4f} psnr_ema {ema.psnr:.4f}"
                logger.info(msg)
                if log is not None:
                    log(msg)
            if out_dir is not None and tcfg.checkpoint_every and (step + 1) % tcfg.checkpoint_every == 0:
                _save(out_dir / f"step{step + 1:07d}", ncfg, tcfg, params, shadow, adam, step + 1)
    finally:
        if log_fh is not None:
            log_fh.close()
    ckpt_path = None
    if out_dir is not None:
        ckpt_path = _save(out_dir / "checkpoint", ncfg, tcfg, params, shadow, adam, end)
    return TrainResult(ckpt_path, losses, evals, params, shadow, adam, time.perf_counter() - t0)


def _save(path, ncfg, tcfg, params, shadow, adam, step) -> Path:
    ckpt = Checkpoint(ncfg, {k: p.data for k, p in params.items()}, shadow, step, adam, tcfg)
    return save_checkpoint(path, ckpt)
