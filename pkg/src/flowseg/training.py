"""Seed derivation and resumable training state shared by the VAE and flow loops."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch

VAL_STREAM = 1 << 20


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 8
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)

    def build(self, params):
        return torch.optim.Adam(params, lr=self.lr, betas=tuple(self.betas), weight_decay=self.weight_decay)


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from integer keys."""
    return int(np.random.SeedSequence(list(keys)).generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(*keys: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(*keys))
    return g


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


@dataclass
class TrainState:
    """Everything needed to continue a run after ``epoch`` completed epochs."""

    epoch: int
    model: dict
    optimizer: dict
    best_model: dict
    best_loss: float = math.inf
    best_epoch: int = -1
    log: list[dict] = field(default_factory=list)


def snapshot(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def finite(x: float) -> bool:
    return math.isfinite(x)


def new_state(model, optimizer) -> TrainState:
    return TrainState(
        epoch=0,
        model=snapshot(model),
        optimizer=copy.deepcopy(optimizer.state_dict()),
        best_model=snapshot(model),
    )
