"""Pair Learning Module: the losses coupling the two branches.

Four terms: per-branch cross entropy on hard labels, a (2N-1)-way
contrastive objective over paired embeddings, and a KL objective over
temperature-softened logits. ``route`` assembles the total with the
configured gradient routing: in restricted mode the contrastive term can
only update the transformer branch and the KL term only the conv branch,
enforced by detaching the partner's tensor; bidirectional mode detaches
nothing and lets both terms reach both branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import ConfigError
from .optim import StageLosses
from .tensor import Tensor


@dataclass(frozen=True)
class PlmConfig:
    tau: float = 0.1
    rho: float = 1.0
    routing: str = "restricted"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.rho <= 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if self.routing not in ("restricted", "bidirectional"):
            raise ConfigError(f"routing must be restricted or bidirectional, got {self.routing!r}")


@dataclass
class LossReport:
    """Scalar loss tensors for one step; inactive terms are None."""

    ce_cnn: Tensor
    ce_trans: Tensor
    cl: Tensor | None
    kl: Tensor | None
    total: Tensor

    def present(self) -> dict[str, float]:
        out = {"ce_cnn": self.ce_cnn.item(), "ce_trans": self.ce_trans.item()}
        if self.cl is not None:
            out["cl"] = self.cl.item()
        if self.kl is not None:
            out["kl"] = self.kl.item()
        out["total"] = self.total.item()
        return out


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError(f"labels must be a 1-d integer array, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels outside [0, {classes})")
    out = np.zeros((labels.size, classes), dtype=np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _validate_one_hot(y: np.ndarray, n: int, c: int) -> None:
    if y.shape != (n, c):
        raise ValueError(f"one-hot labels must be shaped ({n}, {c}), got {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("one-hot labels must contain only 0 and 1")
    if not np.all(y.sum(axis=1) == 1):
        raise ValueError("each one-hot label row must have exactly one 1")


def cross_entropy(z: Tensor, y: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(z) at the labeled class."""
    n, c = z.shape
    y = np.asarray(y, dtype=np.float32)
    _validate_one_hot(y, n, c)
    picked = T.tsum(T.multiply(T.log_softmax(z, axis=1), Tensor(y)))
    return T.scale(picked, -1.0 / n)


def contrastive_loss(hc: Tensor, ht: Tensor, tau: float) -> Tensor:
    """(2N-1)-way paired-views objective over raw dot-product similarities.

    Each anchor scores its N cross-branch candidates plus the N-1 other
    embeddings of its own branch; the matched cross pair is the target.
    """
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    return T.pair_contrast(hc, ht, tau)


def kl_loss(zt: Tensor, zc: Tensor, rho: float) -> Tensor:
    """Mean KL from the softened transformer distribution to the conv one."""
    if rho <= 0:
        raise ConfigError(f"rho must be positive, got {rho}")
    return T.kl_softened(zt, zc, rho)


def route(hc: Tensor, ht: Tensor, zc: Tensor, zt: Tensor, y: np.ndarray,
          config: PlmConfig, active: StageLosses) -> LossReport:
    """Assemble the stage's total loss with the configured gradient routing.

    ``y`` is the one-hot label matrix shared by both branches' cross
    entropy. Restricted routing detaches the conv embeddings inside the
    contrastive term and the transformer logits inside the KL term, so
    those losses update only the partner branch.
    """
    ce_cnn = cross_entropy(zc, y)
    ce_trans = cross_entropy(zt, y)
    total = T.add(ce_cnn, ce_trans)
    restricted = config.routing == "restricted"

    cl = None
    if active.cl_active:
        cl = contrastive_loss(T.detach(hc) if restricted else hc, ht, config.tau)
        total = T.add(total, cl)

    kl = None
    if active.kl_active:
        kl = kl_loss(T.detach(zt) if restricted else zt, zc, config.rho)
        total = T.add(total, kl)

    return LossReport(ce_cnn=ce_cnn, ce_trans=ce_trans, cl=cl, kl=kl, total=total)
