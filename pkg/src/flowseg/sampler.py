"""Mask generation by integrating the learned velocity field, plus ensembling.

Every ensemble member is integrated on its own from a seed-derived source
draw, so a member's output depends only on (member seed, image, weights).
Reductions sort member values per pixel first, which makes the mean,
variance and fused mask bitwise independent of member order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, NumericError
from .flow import SPACES, encode_condition, signed_to_unit
from .training import derive_seed, torch_generator

METHODS = ("euler", "midpoint", "rk4")
CONF_MAGIC = b"LFMC"
CONF_HEADER = struct.Struct("<4sIII")  # magic, height, width, reserved (0)
MAX_VARIANCE = 0.25


@dataclass(frozen=True)
class OdeConfig:
    method: str = "euler"
    steps: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")


def integrate(velocity: Callable[[float, torch.Tensor], torch.Tensor], z0: torch.Tensor, config: OdeConfig) -> torch.Tensor:
    """Fixed-step explicit integration of ``dz/dt = velocity(t, z)`` over ``[0, 1]``."""
    n = config.steps
    h = 1.0 / n
    z = z0
    for k in range(n):
        t = k / n
        if config.method == "euler":
            z = z + h * velocity(t, z)
        elif config.method == "midpoint":
            k1 = velocity(t, z)
            z = z + h * velocity((2 * k + 1) / (2 * n), z + (0.5 * h) * k1)
        else:
            t_mid = (2 * k + 1) / (2 * n)
            k1 = velocity(t, z)
            k2 = velocity(t_mid, z + (0.5 * h) * k1)
            k3 = velocity(t_mid, z + (0.5 * h) * k2)
            k4 = velocity((k + 1) / n, z + h * k3)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not bool(torch.isfinite(z).all()):
            raise NumericError(f"non-finite state at step {k}")
    return z


def _state_shape(net, codecs, image: np.ndarray, space: str) -> tuple[int, ...]:
    h, w = image.shape[:2]
    if space == "pixel":
        return (1, 1, h, w)
    _, mask_codec = codecs
    return (1, *mask_codec.latent_shape(h, w))


def _condition(net, codecs, image: np.ndarray, space: str) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)[None], dtype=np.float32))
    with torch.no_grad():
        return encode_condition(x, codecs, space)


def _member(net, codecs, cond: torch.Tensor, shape, seed: int, ode: OdeConfig, space: str) -> np.ndarray:
    z0 = torch.randn(shape, generator=torch_generator(seed), dtype=cond.dtype)
    with torch.no_grad():
        z1 = integrate(lambda t, z: net(t, z, cond), z0, ode)
        if space == "pixel":
            out = signed_to_unit(z1)
        else:
            out = codecs[1].decode(z1)
    return out[0, 0].numpy().astype(np.float32)


def sample_one(net, codecs, image: np.ndarray, seed: int, ode: OdeConfig = OdeConfig(), space: str = "latent") -> np.ndarray:
    """One generated mask in ``[0, 1]`` for an ``(H, W, C)`` image in ``[-1, 1]``."""
    if space not in SPACES:
        raise ConfigError(f"space must be one of {SPACES}, got {space!r}")
    net.eval()
    cond = _condition(net, codecs, image, space)
    return _member(net, codecs, cond, _state_shape(net, codecs, image, space), seed, ode, space)


@dataclass
class EnsembleResult:
    samples: np.ndarray  # (n, H, W) float32 in [0, 1], in member order
    mean: np.ndarray  # (H, W) float64
    confidence: np.ndarray  # (H, W) float64 population variance in [0, 0.25]
    fused: np.ndarray  # (H, W) uint8, mean >= 0.5
    seeds: tuple[int, ...] = ()


def reduce_samples(samples: np.ndarray, seeds: Sequence[int] = ()) -> EnsembleResult:
    """Pixel-wise mean, variance ``E[s^2] - E[s]^2`` and 0.5-threshold fusion.

    Sums run over per-pixel sorted float64 values; float32 inputs make the
    sums exact for small ``n``, so identical members give exactly zero variance.
    """
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 3 or len(samples) < 1:
        raise ConfigError("need at least one (H, W) sample")
    s = np.sort(samples.astype(np.float64), axis=0)
    mean = s.mean(axis=0)
    var = (s * s).mean(axis=0) - mean * mean
    var = np.clip(var, 0.0, MAX_VARIANCE)
    fused = (mean >= 0.5).astype(np.uint8)
    return EnsembleResult(samples=samples, mean=mean, confidence=var, fused=fused, seeds=tuple(seeds))


def member_seeds(base_seed: int, n: int) -> list[int]:
    return [derive_seed(base_seed, i) for i in range(n)]


def ensemble(
    net,
    codecs,
    image: np.ndarray,
    n: int = 5,
    base_seed: int = 0,
    ode: OdeConfig = OdeConfig(),
    space: str = "latent",
    seeds: Sequence[int] | None = None,
) -> EnsembleResult:
    """Generate ``n`` masks and reduce them.

    ``seeds`` overrides the member seeds derived from ``(base_seed, i)``.
    """
    if seeds is None:
        if n < 1:
            raise ConfigError("ensemble size must be >= 1")
        seeds = member_seeds(base_seed, n)
    elif len(seeds) < 1:
        raise ConfigError("ensemble size must be >= 1")
    if space not in SPACES:
        raise ConfigError(f"space must be one of {SPACES}, got {space!r}")
    net.eval()
    cond = _condition(net, codecs, image, space)
    shape = _state_shape(net, codecs, image, space)
    samples = np.stack([_member(net, codecs, cond, shape, s, ode, space) for s in seeds])
    return reduce_samples(samples, seeds)


def _png(values: np.ndarray, path: Path, scale: float = 1.0):
    pixels = np.round(np.clip(values / scale, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def write_confidence_raw(conf: np.ndarray, path: str | Path):
    h, w = conf.shape
    with open(path, "wb") as fh:
        fh.write(CONF_HEADER.pack(CONF_MAGIC, h, w, 0))
        fh.write(np.ascontiguousarray(conf, dtype="<f4").tobytes())


def read_confidence_raw(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, h, w, _ = CONF_HEADER.unpack_from(data)
    if magic != CONF_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = data[CONF_HEADER.size:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {h}x{w} grid, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(h, w)


def write_ensemble(result: EnsembleResult, out_dir: str | Path, item_id: str) -> list[Path]:
    """Write member, mean, confidence (png + raw) and fused files for one image."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(result.samples):
        paths.append(out / f"{item_id}_sample_{i}.png")
        _png(s, paths[-1])
    paths.append(out / f"{item_id}_mean.png")
    _png(result.mean, paths[-1])
    paths.append(out / f"{item_id}_conf.png")
    _png(result.confidence, paths[-1], scale=MAX_VARIANCE)
    paths.append(out / f"{item_id}_conf.raw")
    write_confidence_raw(result.confidence, paths[-1])
    paths.append(out / f"{item_id}_fused.png")
    _png(result.fused.astype(np.float64), paths[-1])
    return paths
