"""Conditional flow matching on straight-line paths, in pixel or latent space.

Source draws ``z0 ~ N(0, I)`` are carried to targets ``z1`` (mask latents, or
masks rescaled to ``[-1, 1]``) along ``z_t = (1 - t) z0 + t z1 + sigma * eps``;
the regression target is the constant velocity ``z1 - z0``.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .data import DatasetPair, stack_images, stack_masks
from .errors import ConfigError, DomainError, NumericError, ShapeError, TrainingDivergedError
from .training import (
    VAL_STREAM,
    OptimConfig,
    TrainState,
    batches,
    epoch_order,
    finite,
    new_state,
    snapshot,
    torch_generator,
)

log = logging.getLogger(__name__)

SPACES = ("pixel", "latent")
LOG_HEADER = ("epoch", "split", "fm_loss")


@dataclass(frozen=True)
class FlowConfig:
    sigma: float = 0.0
    space: str = "latent"

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.space not in SPACES:
            raise ConfigError(f"space must be one of {SPACES}, got {self.space!r}")


@dataclass
class PathSample:
    t: torch.Tensor
    z0: torch.Tensor
    z1: torch.Tensor
    z_t: torch.Tensor
    u_target: torch.Tensor


def _broadcast_t(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype, device=like.device)
    if t.ndim == 0:
        return t
    if t.shape != (like.shape[0],):
        raise ShapeError(f"t must be scalar or ({like.shape[0]},), got {tuple(t.shape)}")
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def sample_path(z0: torch.Tensor, z1: torch.Tensor, t, sigma: float = 0.0, noise: torch.Tensor | None = None) -> PathSample:
    """Point on the straight path from ``z0`` to ``z1`` at time ``t``.

    ``t`` is a scalar or one value per leading batch entry.  With
    ``sigma == 0`` the noise term is dropped, so ``t = 0`` and ``t = 1``
    return the endpoints exactly.
    """
    if z0.shape != z1.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} vs z1 {tuple(z1.shape)}")
    if sigma < 0:
        raise DomainError("sigma must be >= 0")
    t_b = _broadcast_t(t, z0)
    if not bool(((t_b >= 0) & (t_b <= 1)).all()):
        raise DomainError("t must lie in [0, 1]")
    z_t = (1 - t_b) * z0 + t_b * z1
    if sigma > 0:
        if noise is None or noise.shape != z0.shape:
            raise ShapeError("noise of the same shape is required when sigma > 0")
        z_t = z_t + sigma * noise
    t_out = torch.as_tensor(t, dtype=z0.dtype, device=z0.device)
    return PathSample(t=t_out, z0=z0, z1=z1, z_t=z_t, u_target=z1 - z0)


def fm_loss(net: Callable, z_x: torch.Tensor, path: PathSample) -> torch.Tensor:
    """Mean squared error between ``net(t, z_t, z_x)`` and ``z1 - z0``."""
    pred = net(path.t, path.z_t, z_x)
    if pred.shape != path.u_target.shape:
        raise ShapeError(f"velocity {tuple(pred.shape)} vs target {tuple(path.u_target.shape)}")
    if not bool(torch.isfinite(pred).all()):
        raise NumericError("non-finite velocity output")
    return (pred - path.u_target).pow(2).mean()


def mask_to_signed(masks: torch.Tensor) -> torch.Tensor:
    return 2.0 * masks - 1.0


def signed_to_unit(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def _check_codecs(codecs):
    if codecs is None:
        raise ConfigError("latent space requires image and mask codecs")
    image_codec, mask_codec = codecs
    for name, c in (("image-vae", image_codec), ("mask-vae", mask_codec)):
        if c is None or not getattr(c, "trained", False):
            raise ConfigError(f"untrained codec: {name}")
    return image_codec, mask_codec


def _encode_mean(codec, x: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(codec.encode(x[start:start + batch_size]).mean)
    return torch.cat(out)


def encode_condition(images: torch.Tensor, codecs, space: str) -> torch.Tensor:
    if space == "pixel":
        return images
    image_codec, _ = _check_codecs(codecs)
    return _encode_mean(image_codec, images)


def encode_pairs(pairs: Sequence[DatasetPair], codecs, space: str) -> tuple[torch.Tensor, torch.Tensor]:
    """Conditions and regression targets for every pair.

    Latent space uses posterior means of the frozen codecs; pixel space uses
    the image itself and the mask mapped to ``{-1, +1}``.
    """
    if space not in SPACES:
        raise ConfigError(f"space must be one of {SPACES}, got {space!r}")
    images = torch.from_numpy(stack_images(pairs))
    masks = torch.from_numpy(stack_masks(pairs))
    if space == "pixel":
        return images, mask_to_signed(masks)
    image_codec, mask_codec = _check_codecs(codecs)
    return _encode_mean(image_codec, images), _encode_mean(mask_codec, masks)


def draw_paths(z1: torch.Tensor, generator: torch.Generator, sigma: float = 0.0) -> PathSample:
    """Random ``t ~ U(0, 1)`` and ``z0 ~ N(0, I)`` for a batch of targets."""
    t = torch.rand(z1.shape[0], generator=generator, dtype=z1.dtype)
    z0 = torch.randn(z1.shape, generator=generator, dtype=z1.dtype)
    noise = torch.randn(z1.shape, generator=generator, dtype=z1.dtype) if sigma > 0 else None
    return sample_path(z0, z1, t, sigma, noise)


def make_training_batch(pairs: Sequence[DatasetPair], codecs, generator: torch.Generator, config: FlowConfig):
    """Returns ``(z_x, PathSample)`` for ``pairs``; codecs are only read."""
    cond, z1 = encode_pairs(pairs, codecs, config.space)
    return cond, draw_paths(z1, generator, config.sigma)


def evaluate_fm(net, cond: torch.Tensor, z1: torch.Tensor, seed: int, batch_size: int, sigma: float = 0.0) -> float:
    """Dataset-mean fm_loss with a fixed ``(t, z0)`` stream per seed."""
    gen = torch_generator(seed, VAL_STREAM)
    total = 0.0
    was_training = getattr(net, "training", False)
    if hasattr(net, "eval"):
        net.eval()
    with torch.no_grad():
        for idx in batches(np.arange(len(z1)), batch_size):
            path = draw_paths(z1[idx], gen, sigma)
            total += float(fm_loss(net, cond[idx], path)) * len(idx)
    if was_training:
        net.train()
    return total / len(z1)


@dataclass
class FlowResult:
    net: torch.nn.Module
    log: list[dict]
    state: TrainState


def train_flow(
    train: Sequence[DatasetPair],
    net: torch.nn.Module,
    optim: OptimConfig,
    epochs: int,
    seed: int,
    *,
    codecs=None,
    config: FlowConfig = FlowConfig(),
    val: Sequence[DatasetPair] = (),
    resume: TrainState | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> FlowResult:
    """Regress the velocity net onto ``z1 - z0`` with Adam.

    Targets are encoded once up front; the codecs are never updated.  Epoch
    ``e`` draws its shuffle and ``(t, z0)`` from streams seeded by
    ``(seed, e)``.  The best validation epoch is kept (earliest on ties).
    """
    if not train:
        raise ConfigError("cannot train on an empty dataset")
    cond, z1 = encode_pairs(train, codecs, config.space)
    val_data = encode_pairs(val, codecs, config.space) if val else None
    opt = optim.build(net.parameters())

    if resume is not None:
        net.load_state_dict(resume.model)
        opt.load_state_dict(resume.optimizer)
        state = copy.deepcopy(resume)
    else:
        state = new_state(net, opt)

    for epoch in range(state.epoch, epochs):
        net.train()
        gen = torch_generator(seed, epoch)
        total = 0.0
        for idx in batches(epoch_order(len(z1), seed, epoch), optim.batch_size):
            path = draw_paths(z1[idx], gen, config.sigma)
            loss = fm_loss(net, cond[idx], path)
            if not finite(loss.item()):
                raise TrainingDivergedError(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        train_loss = total / len(z1)
        records = [{"epoch": epoch, "split": "train", "fm_loss": train_loss}]
        monitor = train_loss
        if val_data is not None:
            monitor = evaluate_fm(net, *val_data, seed, optim.batch_size, config.sigma)
            records.append({"epoch": epoch, "split": "val", "fm_loss": monitor})
        if not finite(monitor):
            raise TrainingDivergedError(epoch)

        state.epoch = epoch + 1
        state.log.extend(records)
        if monitor < state.best_loss:
            state.best_loss, state.best_epoch = monitor, epoch
            state.best_model = snapshot(net)
        state.model = snapshot(net)
        state.optimizer = copy.deepcopy(opt.state_dict())
        log.info("flow[%s] epoch %d train %.6f monitor %.6f", config.space, epoch, train_loss, monitor)
        if on_epoch is not None:
            on_epoch(state)

    net.load_state_dict(state.best_model)
    net.eval()
    return FlowResult(net=net, log=state.log, state=state)
