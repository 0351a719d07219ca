"""Training objectives: CDA alignment, bidirectional InfoNCE, cross-entropy and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from mean_cvgl.config import LossWeights

NORM_EPS = 1e-8


@dataclass
class LossBundle:
    cda: torch.Tensor
    infonce: torch.Tensor
    ce: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k)) for k in ("cda", "infonce", "ce", "total")}


def _check_pair(fd, fs):
    if fd.shape != fs.shape or fd.dim() != 2:
        raise ValueError(f"expected two (M, D) arrays of equal shape, got {tuple(fd.shape)} and {tuple(fs.shape)}")


def cosine_term(fd, fs, eps: float = NORM_EPS):
    """1 - mean row-wise cosine similarity, in [0, 2].

    Row norms are clamped below at ``eps`` so an all-zero row yields cosine 0
    rather than NaN.
    """
    _check_pair(fd, fs)
    num = (fd * fs).sum(dim=1)
    den = fd.norm(dim=1).clamp_min(eps) * fs.norm(dim=1).clamp_min(eps)
    return 1.0 - (num / den).mean()


def mse_term(fd, fs, mode: str = "mse_plain"):
    """Mean over rows of the squared L2 row difference.

    ``one_minus_mse`` returns ``1 - mean ||fd_k - fs_k||^2``, which rewards
    separating the views when minimized; ``mse_plain`` returns the mean
    squared distance itself.
    """
    _check_pair(fd, fs)
    sq = (fd - fs).pow(2).sum(dim=1).mean()
    if mode == "mse_plain":
        return sq
    if mode == "one_minus_mse":
        return 1.0 - sq
    raise ValueError(f"unknown mse mode {mode!r}")


def cda_loss(fd, fs, alpha: float = 1.0, beta: float = 1.0, mode: str = "mse_plain"):
    return alpha * cosine_term(fd, fs) + beta * mse_term(fd, fs, mode)


def smoothed_targets(labels, num_classes: int, smoothing: float, dtype=torch.float64):
    """One-hot targets with ``1 - smoothing`` on the true class and the rest spread evenly over the others."""
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    if num_classes == 1:
        return torch.ones(len(labels), 1, dtype=dtype)
    off = smoothing / (num_classes - 1)
    t = torch.full((len(labels), num_classes), off, dtype=dtype)
    t[torch.arange(len(labels)), labels] = 1.0 - smoothing
    return t


def soft_cross_entropy(logits, targets):
    return -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def ce_loss(logits, labels, smoothing: float = 0.0):
    """Mean cross-entropy of (optionally smoothed) targets under softmax(logits)."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n, c = logits.shape
    if len(labels) != n:
        raise ValueError("one label per logit row is required")
    if len(labels) and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    return soft_cross_entropy(logits, smoothed_targets(labels, c, smoothing, logits.dtype))


def info_nce(ed, es, tau, smoothing: float = 0.1, normalize: bool = True):
    """Symmetric InfoNCE over a class-aligned batch.

    Row ``i`` of ``ed`` (drone) and row ``i`` of ``es`` (satellite) are the
    positive pair; every other row of the opposite view is a negative. The
    drone->satellite and satellite->drone cross-entropies are averaged.
    """
    _check_pair(ed, es)
    b = ed.shape[0]
    if b < 2:
        raise ValueError("InfoNCE needs a batch of at least 2 pairs (no negatives otherwise)")
    if normalize:
        ed = F.normalize(ed, dim=1, eps=NORM_EPS)
        es = F.normalize(es, dim=1, eps=NORM_EPS)
    sim = ed @ es.T / tau
    targets = smoothed_targets(torch.arange(b), b, smoothing, sim.dtype)
    return 0.5 * (soft_cross_entropy(sim, targets) + soft_cross_entropy(sim.T, targets))


def total_loss(cda, infonce, ce, weights: LossWeights) -> LossBundle:
    total = weights.lambda_cda * cda + weights.lambda_infonce * infonce + weights.lambda_ce * ce
    return LossBundle(cda, infonce, ce, total)


class Objective(nn.Module):
    """Holds the learnable InfoNCE temperature and combines branch outputs into a LossBundle."""

    def __init__(self, weights: LossWeights):
        super().__init__()
        weights.validate()
        self.weights = weights
        log_tau = torch.tensor(math.log(weights.tau_init))
        if weights.learnable_tau:
            self.log_tau = nn.Parameter(log_tau)
        else:
            self.register_buffer("log_tau", log_tau)

    @property
    def tau(self):
        return self.log_tau.exp()

    def forward(self, out_d, out_s, labels) -> LossBundle:
        w = self.weights
        tau = self.tau
        nce = sum(info_nce(hd.embedding, hs.embedding, tau, w.smoothing)
                  for hd, hs in zip(out_d.pee, out_s.pee)) / len(out_d.pee)
        ce = 0.5 * (ce_loss(out_d.gee.logits, labels, w.ce_smoothing)
                    + ce_loss(out_s.gee.logits, labels, w.ce_smoothing))
        # alignment features are averaged over positions before comparison
        cda = cda_loss(out_d.cea.mean(dim=2), out_s.cea.mean(dim=2), w.alpha, w.beta, w.mse_mode)
        return total_loss(cda, nce, ce, w)
