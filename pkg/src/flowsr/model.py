"""The flow-image super-resolution network.

shallow conv -> FFB x ffb_count (each: FEU x feu_per_ffb, then QSM)
-> QSM + shallow residual -> QSM -> log2(scale) x [conv, pixel shuffle x2, GELU]
-> conv to RGB.

Parameters live in a flat ``dict`` of name -> Tensor; names are stable and
double as checkpoint keys.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from flowsr.autodiff import ops
from flowsr.autodiff.attention import AttentionWeights, window_attention
from flowsr.autodiff.nn import conv2d, layernorm, pixel_shuffle
from flowsr.autodiff.tensor import Tensor
from flowsr.errors import ConfigError, ShapeError
from flowsr.flowconv import VARIANT_PATTERNS, VARIANTS, DeformWeights, DFCBranchWeights, DFCWeights, flow_conv
from flowsr.quaternion import QuaternionConvWeights, init_qconv_weights, qsm

Params = Dict[str, Tensor]


@dataclass
class NetworkConfig:
    channels: int = 24
    feu_per_ffb: int = 2
    ffb_count: int = 2
    window: int = 4
    heads: int = 3
    scale: int = 2
    conv_variant: str = "dfc"
    qsm_enabled: bool = True
    qsm_keep_real: bool = False
    qsm_bias: bool = True
    dfc_k: int = 9
    ndc_k: int = 3
    max_offset: float = 2.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        c = self.channels
        if c < 3 or c % 3:
            raise ConfigError(f"channels must be a positive multiple of 3, got {c}")
        if self.heads < 1 or c % self.heads:
            raise ConfigError(f"channels {c} not divisible by heads {self.heads}")
        if self.scale < 2 or self.scale & (self.scale - 1):
            raise ConfigError(f"scale must be a power of two >= 2, got {self.scale}")
        if self.feu_per_ffb < 1 or self.ffb_count < 1:
            raise ConfigError("feu_per_ffb and ffb_count must be >= 1")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.conv_variant not in VARIANTS:
            raise ConfigError(f"conv_variant must be one of {VARIANTS}, got {self.conv_variant!r}")
        if self.dfc_k < 3 or self.dfc_k % 2 == 0 or self.ndc_k < 1 or self.ndc_k % 2 == 0:
            raise ConfigError("dfc_k and ndc_k must be odd (dfc_k >= 3)")
        if self.max_offset <= 0:
            raise ConfigError("max_offset must be positive")

    @classmethod
    def desk(cls, **overrides) -> "NetworkConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "NetworkConfig":
        base = dict(channels=48, feu_per_ffb=6, ffb_count=6, window=8, heads=6)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "NetworkConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown network config key {key!r}")
            kwargs[key] = _coerce(value, type(getattr(cls(), key)))
        return cls(**kwargs)


def _coerce(value, kind):
    if not isinstance(value, str):
        return kind(value)
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"cannot read {value!r} as a boolean")
    try:
        return kind(value.strip())
    except ValueError:
        raise ConfigError(f"cannot read {value!r} as {kind.__name__}") from None


# -- parameter layout ------------------------------------------------------------------


def _conv_shape(cout, cin, kh, kw=None) -> Tuple[int, ...]:
    return (cout, cin, kh, kh if kw is None else kw)


def parameter_shapes(cfg: NetworkConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Every parameter name and shape, in registration order."""
    c = cfg.channels
    cq = c // 3
    k = cfg.dfc_k
    out: List[Tuple[str, Tuple[int, ...]]] = [("shallow.w", (c, 3, 3, 3)), ("shallow.b", (c,))]

    def add_qsm(prefix: str) -> None:
        for part in ("r", "x", "y", "z"):
            out.append((f"{prefix}.{part}", (cq, cq, 3, 3)))
        if cfg.qsm_bias:
            out.append((f"{prefix}.bias", (4 * cq,)))
        if cfg.qsm_keep_real:
            out.append((f"{prefix}.proj", (c, 4 * cq, 1, 1)))

    for b in range(cfg.ffb_count):
        for u in range(cfg.feu_per_ffb):
            p = f"ffb{b}.feu{u}"
            out += [
                (f"{p}.ln.gamma", (c,)),
                (f"{p}.ln.beta", (c,)),
                (f"{p}.attn.qkv.w", (3 * c, c, 1, 1)),
                (f"{p}.attn.qkv.b", (3 * c,)),
                (f"{p}.attn.proj.w", (c, c, 1, 1)),
                (f"{p}.attn.proj.b", (c,)),
            ]
            if cfg.conv_variant == "ndc":
                kk = cfg.ndc_k * cfg.ndc_k
                out += [
                    (f"{p}.ndc.offset.w", (2 * kk, c, 3, 3)),
                    (f"{p}.ndc.offset.b", (2 * kk,)),
                    (f"{p}.ndc.w", (c, c, cfg.ndc_k, cfg.ndc_k)),
                ]
            elif cfg.conv_variant != "none":
                for pattern in VARIANT_PATTERNS[cfg.conv_variant]:
                    q = f"{p}.dfc.{pattern}"
                    out += [
                        (f"{q}.offset.w", (2 * k, c, 3, 3)),
                        (f"{q}.offset.b", (2 * k,)),
                        (f"{q}.wh", (c, c, 1, k)),
                        (f"{q}.wv", (c, c, k, 1)),
                    ]
                if cfg.conv_variant == "dfc":
                    out.append((f"{p}.dfc.fuse", (c, 2 * c, 1, 1)))
        if cfg.qsm_enabled:
            add_qsm(f"ffb{b}.qsm")
    if cfg.qsm_enabled:
        add_qsm("trunk.qsm")
        add_qsm("recon.qsm")
    for s in range(int(math.log2(cfg.scale))):
        out += [(f"up{s}.w", (4 * c, c, 3, 3)), (f"up{s}.b", (4 * c,))]
    out += [("final.w", (3, c, 3, 3)), ("final.b", (3,))]
    return out


def census(cfg: NetworkConfig) -> List[Tuple[str, Tuple[int, ...], int]]:
    return [(name, shape, int(np.prod(shape))) for name, shape in parameter_shapes(cfg)]


def parameter_count(cfg: NetworkConfig) -> int:
    return sum(n for _, _, n in census(cfg))


def format_census(cfg: NetworkConfig) -> str:
    rows = census(cfg)
    width = max(len(n) for n, _, _ in rows)
    lines = [f"{'name':<{width}}  {'shape':<18}  {'count':>8}"]
    for name, shape, count in rows:
        lines.append(f"{name:<{width}}  {'x'.join(map(str, shape)):<18}  {count:>8}")
    lines.append(f"{'total':<{width}}  {'':<18}  {sum(r[2] for r in rows):>8}")
    return "\n".join(lines)


def init_params(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> Params:
    """Deterministic initialization from ``seed``.

    Real convs draw U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases, offset
    predictors and LayerNorm shifts start at zero, LayerNorm gains at one.
    """
    rng = np.random.default_rng(seed)
    params: Params = {}
    shapes = dict(parameter_shapes(cfg))
    done = set()
    for name, shape in shapes.items():
        if name in done:
            continue
        leaf = name.rsplit(".", 1)[-1]
        if ".qsm." in f".{name}" and leaf in ("r", "x", "y", "z"):
            prefix = name.rsplit(".", 1)[0]
            cq_out, cq_in, k, _ = shape
            qw = init_qconv_weights(cq_out, cq_in, k, rng, bias=False, dtype=dtype)
            for part, t in zip(("r", "x", "y", "z"), qw.parts()):
                params[f"{prefix}.{part}"] = t
                done.add(f"{prefix}.{part}")
            continue
        if leaf == "gamma":
            data = np.ones(shape)
        elif leaf in ("b", "beta", "bias") or ".offset." in name:
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
        done.add(name)
    # restore registration order
    return {name: params[name] for name in shapes}


def zero_params(cfg: NetworkConfig, dtype=np.float64) -> Params:
    return {name: Tensor(np.zeros(shape), requires_grad=True, dtype=dtype) for name, shape in parameter_shapes(cfg)}


# -- forward ----------------------------------------------------------------------------------


def _qsm_weights(params: Params, prefix: str) -> QuaternionConvWeights:
    return QuaternionConvWeights(
        params[f"{prefix}.r"],
        params[f"{prefix}.x"],
        params[f"{prefix}.y"],
        params[f"{prefix}.z"],
        bias=params.get(f"{prefix}.bias"),
    )


def apply_qsm(x: Tensor, params: Params, prefix: str, cfg: NetworkConfig) -> Tensor:
    if not cfg.qsm_enabled:
        return x
    return qsm(x, _qsm_weights(params, prefix), keep_real=cfg.qsm_keep_real, proj_w=params.get(f"{prefix}.proj"))


def _flow_weights(params: Params, prefix: str, cfg: NetworkConfig) -> DFCWeights:
    weights = DFCWeights()
    if cfg.conv_variant == "ndc":
        weights.deform = DeformWeights(
            params[f"{prefix}.ndc.offset.w"], params[f"{prefix}.ndc.offset.b"], params[f"{prefix}.ndc.w"]
        )
    elif cfg.conv_variant != "none":
        for pattern in VARIANT_PATTERNS[cfg.conv_variant]:
            q = f"{prefix}.dfc.{pattern}"
            weights.branches[pattern] = DFCBranchWeights(
                params[f"{q}.offset.w"], params[f"{q}.offset.b"], params[f"{q}.wh"], params[f"{q}.wv"]
            )
        weights.fuse = params.get(f"{prefix}.dfc.fuse")
    return weights


def feu_forward(x: Tensor, params: Params, prefix: str, cfg: NetworkConfig, shift: int = 0) -> Tensor:
    """LN, then windowed attention and the flow convolution in parallel, plus the input."""
    xn = layernorm(x, params[f"{prefix}.ln.gamma"], params[f"{prefix}.ln.beta"], cfg.ln_eps)
    attn = AttentionWeights(
        params[f"{prefix}.attn.qkv.w"],
        params[f"{prefix}.attn.qkv.b"],
        params[f"{prefix}.attn.proj.w"],
        params[f"{prefix}.attn.proj.b"],
    )
    out = ops.add(window_attention(xn, attn, cfg.window, shift, cfg.heads), x)
    local = flow_conv(xn, _flow_weights(params, prefix, cfg), cfg.conv_variant, cfg.max_offset)
    if local is not None:
        out = ops.add(out, local)
    return out


def _shift_for(unit: int, cfg: NetworkConfig, h: int, w: int) -> int:
    if unit % 2 == 0 or min(h, w) <= cfg.window:
        return 0
    return cfg.window // 2


def ffb_forward(z: Tensor, params: Params, block: int, cfg: NetworkConfig) -> Tensor:
    h, w = z.shape[2:]
    for u in range(cfg.feu_per_ffb):
        z = feu_forward(z, params, f"ffb{block}.feu{u}", cfg, _shift_for(u, cfg, h, w))
    return apply_qsm(z, params, f"ffb{block}.qsm", cfg)


def trunk_forward(f0: Tensor, params: Params, cfg: NetworkConfig) -> Tensor:
    f = f0
    for b in range(cfg.ffb_count):
        f = ffb_forward(f, params, b, cfg)
    return ops.add(apply_qsm(f, params, "trunk.qsm", cfg), f0)


def forward(lr: Tensor, params: Params, cfg: NetworkConfig) -> Tensor:
    """[N, 3, H, W] low-resolution images -> [N, 3, H*scale, W*scale]."""
    if lr.ndim != 4 or lr.shape[1] != 3:
        raise ShapeError(f"forward expects [N, 3, H, W], got {lr.shape}")
    h, w = lr.shape[2:]
    if h % cfg.window or w % cfg.window:
        raise ShapeError(f"input {h}x{w} not divisible by window {cfg.window}")
    f0 = conv2d(lr, params["shallow.w"], params["shallow.b"], pad=1)
    r = apply_qsm(trunk_forward(f0, params, cfg), params, "recon.qsm", cfg)
    for s in range(int(math.log2(cfg.scale))):
        r = ops.gelu(pixel_shuffle(conv2d(r, params[f"up{s}.w"], params[f"up{s}.b"], pad=1), 2))
    return conv2d(r, params["final.w"], params["final.b"], pad=1)


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    return ops.mean(ops.abs(ops.sub(pred, target)))


def parameter_names(cfg: NetworkConfig) -> List[str]:
    return [name for name, _ in parameter_shapes(cfg)]


def cast_params(params: Params, dtype) -> Params:
    return {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in params.items()}


def check_params(params: Params, cfg: NetworkConfig) -> None:
    expected = parameter_shapes(cfg)
    if [n for n, _ in expected] != list(params):
        missing = set(n for n, _ in expected) - set(params)
        extra = set(params) - set(n for n, _ in expected)
        raise ConfigError(f"parameter names do not match config (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, shape in expected:
        if params[name].shape != shape:
            raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


def trainable(params: Params) -> Iterable[Tensor]:
    return params.values()
