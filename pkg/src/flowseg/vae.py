"""ELBO training and reconstruction evaluation for the image and mask codecs."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .data import DatasetPair, stack_images, stack_masks
from .errors import ConfigError, DomainError, ShapeError, TrainingDivergedError
from .nets import Codec, GaussianPosterior, reparameterize
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

LOG_HEADER = ("epoch", "split", "loss", "rec", "kl")


@dataclass
class ElboBreakdown:
    rec: float
    kl: float
    beta: float

    @property
    def loss(self) -> float:
        return self.rec + self.beta * self.kl


def kl_standard_normal(posterior: GaussianPosterior) -> torch.Tensor:
    """Element-mean KL(q || N(0, I)) for a diagonal Gaussian."""
    mu, logvar = posterior.mean, posterior.logvar
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).mean()


def reconstruction_term(target: torch.Tensor, recon: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "image":
        return F.mse_loss(recon, target)
    if mode == "mask":
        if not bool(((target == 0) | (target == 1)).all()):
            raise DomainError("mask targets must be exactly 0 or 1")
        return F.binary_cross_entropy(recon, target)
    raise ConfigError(f"mode must be image or mask, got {mode!r}")


def elbo_loss(target, recon, posterior: GaussianPosterior, beta: float, mode: str):
    """Negated ELBO: reconstruction term plus ``beta`` times the KL term.

    Returns the differentiable scalar loss and its detached breakdown.
    """
    if target.shape != recon.shape:
        raise ShapeError(f"target {tuple(target.shape)} vs reconstruction {tuple(recon.shape)}")
    rec = reconstruction_term(target, recon, mode)
    kl = kl_standard_normal(posterior)
    loss = rec + beta * kl
    return loss, ElboBreakdown(rec=float(rec.detach()), kl=float(kl.detach()), beta=beta)


def codec_inputs(pairs: Sequence[DatasetPair], mode: str) -> torch.Tensor:
    if mode == "image":
        return torch.from_numpy(stack_images(pairs))
    if mode == "mask":
        return torch.from_numpy(stack_masks(pairs))
    raise ConfigError(f"mode must be image or mask, got {mode!r}")


def _elbo_pass(codec, x, beta, mode, noise_gen):
    post = codec.encode(x)
    noise = torch.randn(post.mean.shape, generator=noise_gen, dtype=post.mean.dtype)
    recon = codec.decode(reparameterize(post, noise))
    return elbo_loss(x, recon, post, beta, mode)


def evaluate_elbo(codec: Codec, x: torch.Tensor, beta: float, mode: str, seed: int, batch_size: int):
    """Dataset-mean ELBO terms with a fixed noise stream, so values compare across epochs."""
    gen = torch_generator(seed, VAL_STREAM)
    rec = kl = 0.0
    codec.eval()
    with torch.no_grad():
        for idx in batches(np.arange(len(x)), batch_size):
            _, parts = _elbo_pass(codec, x[idx], beta, mode, gen)
            rec += parts.rec * len(idx)
            kl += parts.kl * len(idx)
    return ElboBreakdown(rec=rec / len(x), kl=kl / len(x), beta=beta)


@dataclass
class VaeResult:
    codec: Codec
    log: list[dict]
    state: TrainState


def train_vae(
    train: Sequence[DatasetPair],
    codec: Codec,
    optim: OptimConfig,
    epochs: int,
    seed: int,
    *,
    mode: str | None = None,
    beta: float = 1e-4,
    val: Sequence[DatasetPair] = (),
    resume: TrainState | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> VaeResult:
    """Minimize the negated ELBO with Adam.

    Shuffling and reparameterization noise for epoch ``e`` come from streams
    seeded by ``(seed, e)``, so resuming from a saved :class:`TrainState`
    continues exactly like an uninterrupted run.  The returned codec holds
    the parameters with the lowest validation loss (training loss without a
    validation split); ties keep the earlier epoch.
    """
    if not train:
        raise ConfigError("cannot train on an empty dataset")
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    mode = mode or codec.config.kind
    x_train = codec_inputs(train, mode)
    x_val = codec_inputs(val, mode) if val else None
    opt = optim.build(codec.parameters())

    if resume is not None:
        codec.load_state_dict(resume.model)
        opt.load_state_dict(resume.optimizer)
        state = copy.deepcopy(resume)
    else:
        state = new_state(codec, opt)

    for epoch in range(state.epoch, epochs):
        codec.train()
        gen = torch_generator(seed, epoch)
        totals = np.zeros(2)
        for idx in batches(epoch_order(len(x_train), seed, epoch), optim.batch_size):
            loss, parts = _elbo_pass(codec, x_train[idx], beta, mode, gen)
            if not finite(loss.item()):
                raise TrainingDivergedError(epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            totals += np.array([parts.rec, parts.kl]) * len(idx)
        tr = ElboBreakdown(rec=float(totals[0] / len(x_train)), kl=float(totals[1] / len(x_train)), beta=beta)
        records = [_record(epoch, "train", tr)]
        monitor = tr
        if x_val is not None:
            monitor = evaluate_elbo(codec, x_val, beta, mode, seed, optim.batch_size)
            records.append(_record(epoch, "val", monitor))
        if not finite(monitor.loss):
            raise TrainingDivergedError(epoch)

        state.epoch = epoch + 1
        state.log.extend(records)
        if monitor.loss < state.best_loss:
            state.best_loss, state.best_epoch = monitor.loss, epoch
            state.best_model = snapshot(codec)
        state.model = snapshot(codec)
        state.optimizer = copy.deepcopy(opt.state_dict())
        log.info("vae[%s] epoch %d train %.6f monitor %.6f", mode, epoch, tr.loss, monitor.loss)
        if on_epoch is not None:
            on_epoch(state)

    codec.load_state_dict(state.best_model)
    codec.trained = True
    codec.eval()
    return VaeResult(codec=codec, log=state.log, state=state)


def _record(epoch: int, split: str, parts: ElboBreakdown) -> dict:
    return {"epoch": epoch, "split": split, "loss": parts.loss, "rec": parts.rec, "kl": parts.kl}


def reconstruct(codec, x: torch.Tensor, batch_size: int = 32) -> np.ndarray:
    """``decode(encode(x).mean)`` batched, as numpy."""
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(codec.decode(codec.encode(x[start:start + batch_size]).mean))
    return torch.cat(out).numpy()


def eval_reconstruction(pairs: Sequence[DatasetPair], codec, mode: str) -> metrics.MetricReport:
    """Posterior-mean reconstructions scored per item and averaged.

    Mask mode reports Dice/IoU (after thresholding at 0.5) plus SSIM/PSNR on
    the soft reconstruction; image mode reports SSIM/PSNR on ``[0, 1]``.
    """
    x = codec_inputs(pairs, mode)
    if hasattr(codec, "eval"):
        codec.eval()
    recon = reconstruct(codec, x)
    items = []
    for pair, r in zip(pairs, recon):
        if mode == "mask":
            soft = r[0].astype(np.float64)
            truth = pair.mask.astype(np.float64)
            pred = soft >= 0.5
            items.append({
                "id": pair.id,
                "dice": metrics.dice(pred, pair.mask),
                "iou": metrics.iou(pred, pair.mask),
                "ssim": metrics.ssim(soft, truth),
                "psnr": metrics.psnr(soft, truth),
            })
        else:
            a = metrics.denormalize(r.transpose(1, 2, 0))
            b = metrics.denormalize(pair.image)
            items.append({"id": pair.id, "ssim": metrics.ssim(a, b), "psnr": metrics.psnr(a, b)})
    return metrics.MetricReport.aggregate(items)
