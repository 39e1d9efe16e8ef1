"""Synthetic velocity-field images, degradation, dataset layout and PNG export.

Dataset layout::

    <root>/<split>/<id>_hr.fld
    <root>/<split>/<id>_lr<s>.fld
    <root>/<split>/manifest.txt      one "id seed H W s" record per line
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from flowsr.errors import DatasetError, RangeError, ShapeError
from flowsr.fld import fld_read, fld_write

KOLMOGOROV_EXPONENT = -5.0 / 3.0


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def spectral_field(rng: np.random.Generator, h: int, w: int, spectrum_exponent: float) -> np.ndarray:
    """One Gaussian random field with isotropic power spectrum |F(k)|^2 ~ k^exponent.

    White noise is shaped in Fourier space, so the result is real by
    construction (Hermitian spectrum). The mean (k = 0) is removed.
    """
    noise = rng.standard_normal((h, w))
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.rfftfreq(w) * w
    k = np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)
    amp = np.zeros_like(k)
    nz = k > 0
    amp[nz] = k[nz] ** (spectrum_exponent / 2.0)
    return np.fft.irfft2(np.fft.rfft2(noise) * amp, s=(h, w))


def rescale_unit(field: np.ndarray) -> np.ndarray:
    lo, hi = field.min(), field.max()
    if hi == lo:
        return np.zeros_like(field)
    out = (field - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def gen_synthetic_field(
    seed: int,
    h: int,
    w: int,
    spectrum_exponent: float = KOLMOGOROV_EXPONENT,
    single_velocity: bool = False,
    rescale: bool = True,
) -> np.ndarray:
    """[3, H, W] velocity image: U, V, W channels mapped to R, G, B.

    With ``single_velocity`` one component is drawn and replicated on all
    three channels. Each channel is affinely mapped to [0, 1] unless
    ``rescale`` is False.
    """
    if not (_is_pow2(h) and _is_pow2(w)):
        raise ShapeError(f"field size must be powers of two, got {h}x{w}")
    rng = np.random.default_rng(seed)
    n = 1 if single_velocity else 3
    chans = [spectral_field(rng, h, w, spectrum_exponent) for _ in range(n)]
    if rescale:
        chans = [rescale_unit(c) for c in chans]
    if single_velocity:
        chans = chans * 3
    return np.stack(chans)


def downsample(hr: np.ndarray, s: int, method: str = "box") -> np.ndarray:
    """Reduce [C, H, W] by ``s``; box averaging by default, bicubic decimation optionally."""
    hr = np.asarray(getattr(hr, "data", hr))
    c, h, w = hr.shape
    if h % s or w % s:
        raise ShapeError(f"image {h}x{w} not divisible by scale {s}")
    if method == "box":
        return hr.reshape(c, h // s, s, w // s, s).mean(axis=(2, 4))
    if method == "bicubic":
        return resize_bicubic(hr, h // s, w // s)
    raise ValueError(f"unknown degradation {method!r}")


def resize_bicubic(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Per-channel bicubic resampling of a [C, H, W] float image."""
    out = []
    for ch in np.asarray(img, dtype=np.float32):
        im = Image.fromarray(ch, mode="F").resize((w, h), Image.BICUBIC)
        out.append(np.asarray(im, dtype=np.float64))
    return np.stack(out)


def bicubic_upsample(lr: np.ndarray, s: int) -> np.ndarray:
    c, h, w = lr.shape
    return resize_bicubic(lr, h * s, w * s)


# -- samples and datasets -------------------------------------------------------------------


@dataclass
class FlowSample:
    id: str
    hr: np.ndarray  # [3, H, W]
    lr: np.ndarray  # [3, H/s, W/s]
    scale: int
    seed: int = -1

    def __post_init__(self):
        if self.hr.shape[1] != self.lr.shape[1] * self.scale or self.hr.shape[2] != self.lr.shape[2] * self.scale:
            raise ShapeError(f"{self.id}: hr {self.hr.shape} and lr {self.lr.shape} disagree with scale {self.scale}")


def make_sample(sample_id: str, seed: int, size: int, scale: int, single_velocity: bool = False,
                method: str = "box") -> FlowSample:
    hr = gen_synthetic_field(seed, size, size, single_velocity=single_velocity)
    return FlowSample(sample_id, hr, downsample(hr, scale, method), scale, seed)


def generate_dataset(
    root,
    seed: int,
    counts: Dict[str, int],
    size: int,
    scales: Sequence[int],
    single_velocity: bool = False,
    method: str = "box",
    dtype=np.float32,
) -> Path:
    """Write every split under ``root``; sample seeds derive from (seed, split, index)."""
    root = Path(root)
    for split_no, (split, count) in enumerate(counts.items()):
        out = root / split
        out.mkdir(parents=True, exist_ok=True)
        lines = []
        for i in range(count):
            sample_seed = int(np.random.SeedSequence([seed, split_no, i]).generate_state(1)[0])
            sid = f"{split}{i:05d}"
            hr = gen_synthetic_field(sample_seed, size, size, single_velocity=single_velocity)
            fld_write(hr.astype(dtype), out / f"{sid}_hr.fld")
            for s in scales:
                fld_write(downsample(hr, s, method).astype(dtype), out / f"{sid}_lr{s}.fld")
                lines.append(f"{sid} {sample_seed} {size} {size} {s}")
        (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def read_manifest(split_dir) -> List[Tuple[str, int, int, int, int]]:
    path = Path(split_dir) / "manifest.txt"
    if not path.exists():
        raise DatasetError(f"missing manifest {path}")
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        sid, seed, h, w, s = line.split()
        records.append((sid, int(seed), int(h), int(w), int(s)))
    return records


def load_split(root, split: str, scale: int) -> List[FlowSample]:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise DatasetError(f"dataset split not found: {split_dir}")
    samples = []
    for sid, seed, h, w, s in read_manifest(split_dir):
        if s != scale:
            continue
        hr = fld_read(split_dir / f"{sid}_hr.fld")
        lr = fld_read(split_dir / f"{sid}_lr{s}.fld")
        samples.append(FlowSample(sid, hr, lr, s, seed))
    if not samples:
        raise DatasetError(f"no samples with scale {scale} in {split_dir}")
    return samples


def png_export(t, path) -> None:
    """Write a [3, H, W] image in [0, 1] as 8-bit RGB (v -> round(255 v))."""
    arr = np.asarray(getattr(t, "data", t), dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"png_export expects [3, H, W], got {arr.shape}")
    if np.isnan(arr).any() or arr.min() < 0.0 or arr.max() > 1.0:
        raise RangeError("png_export needs values in [0, 1]")
    rgb = np.round(arr * 255.0).astype(np.uint8).transpose(1, 2, 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path)


def iter_ids(root, split: str) -> Iterable[str]:
    seen = []
    for sid, *_ in read_manifest(Path(root) / split):
        if sid not in seen:
            seen.append(sid)
    return seen
