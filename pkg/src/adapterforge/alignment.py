"""Cross-task alignment losses over shared down-projection features.

Per-task mini-batches of the rank-r features A x are summarized either as
diagonal-Gaussian proxies compared with a symmetric KL divergence, or
compared directly with a multi-kernel maximum mean discrepancy. Both losses
are differentiable back into A; kernel bandwidths come from the median
heuristic and are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, InsufficientSamplesError, ShapeError

DEFAULT_VAR_FLOOR = 1e-6
DEFAULT_BANDWIDTH_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)
_BANDWIDTH_FLOOR = 1e-6


@dataclass
class TaskFeatures:
    """Rows of down-projection outputs for one task at one adapted layer."""

    task_id: int
    features: Tensor  # [batch x rank]
    layer_id: int = 0

    def __post_init__(self):
        if self.features.data.ndim != 2:
            raise ShapeError(f"task features must be [batch x rank], got shape {self.features.shape}")
        if self.features.shape[0] < 2:
            raise InsufficientSamplesError(
                f"task features need at least 2 samples, got {self.features.shape[0]}")


@dataclass
class GaussianStats:
    """Diagonal-Gaussian proxy of a feature batch: mean, floored variance, count."""

    mu: Tensor
    var: Tensor
    count: int

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class KernelBank:
    """Gaussian-kernel bandwidths, strictly positive and sorted ascending."""

    bandwidths: tuple[float, ...]

    def __post_init__(self):
        if not self.bandwidths:
            raise ConfigError("kernel bank must hold at least one bandwidth")
        if any(b <= 0 for b in self.bandwidths):
            raise ConfigError(f"bandwidths must be strictly positive, got {self.bandwidths}")
        if list(self.bandwidths) != sorted(self.bandwidths):
            raise ConfigError(f"bandwidths must be sorted ascending, got {self.bandwidths}")

    @classmethod
    def from_median(cls, sigma: float,
                    scales: tuple[float, ...] = DEFAULT_BANDWIDTH_SCALES) -> "KernelBank":
        return cls(tuple(sorted(sigma * s for s in scales)))


def extract_features(model, batch, layers: list[int] | None = None,
                     mode: str = "train") -> list[TaskFeatures]:
    """Down-projection features of one task batch at the selected layers.

    Features stay attached to the live tape in train mode so alignment
    gradients reach the shared down-projections. ``layers`` defaults to all
    adapted layers.
    """
    from . import harness

    _, feature_map = harness.forward(model, batch.inputs, mode=mode, collect_features=True)
    if not feature_map:
        raise ConfigError("model has no adapted layers to extract features from")
    if layers is None:
        layers = sorted(feature_map)
    missing = [layer for layer in layers if layer not in feature_map]
    if missing:
        raise ConfigError(f"no adapted layer with id(s) {missing}; available: {sorted(feature_map)}")
    return [TaskFeatures(task_id=batch.task_id, features=feature_map[layer], layer_id=layer)
            for layer in layers]


def batch_gaussian_stats(features: TaskFeatures, var_floor: float = DEFAULT_VAR_FLOOR) -> GaussianStats:
    """Per-dimension mean and floored population variance of a feature batch."""
    if var_floor <= 0:
        raise ConfigError(f"variance floor must be positive, got {var_floor}")
    f = features.features
    mu = ad.reduce_mean(f, axis=0)
    var = ad.clamp_min(ad.reduce_var(f, axis=0), var_floor)
    return GaussianStats(mu=mu, var=var, count=f.shape[0])


def kl_diag_gaussian(p: GaussianStats, q: GaussianStats) -> Tensor:
    """KL(p || q) between diagonal Gaussians, summed over dimensions."""
    if p.dim != q.dim:
        raise ShapeError(f"stat dimensions differ: {p.dim} vs {q.dim}")
    log_ratio = ad.log(ad.div(q.var, p.var))
    gap = ad.square(ad.sub(p.mu, q.mu))
    quad = ad.div(ad.add(p.var, gap), ad.scale(q.var, 2.0))
    per_dim = ad.add(ad.scale(log_ratio, 0.5), quad)
    return ad.add(ad.reduce_sum(per_dim), -0.5 * p.dim)


def kl_align_loss(stats: list[GaussianStats]) -> Tensor:
    """Sum of symmetric pairwise KL divergences over all task pairs."""
    if len(stats) < 2:
        raise InsufficientSamplesError(f"alignment needs at least two tasks, got {len(stats)}")
    total = None
    for i in range(len(stats)):
        for j in range(i + 1, len(stats)):
            pair = ad.scale(ad.add(kl_diag_gaussian(stats[i], stats[j]),
                                   kl_diag_gaussian(stats[j], stats[i])), 0.5)
            total = pair if total is None else ad.add(total, pair)
    return total


def median_bandwidth(pooled) -> float:
    """Median pairwise Euclidean distance over pooled samples, floored at 1e-6.

    Accepts a [samples x dim] array/Tensor or a list of per-task feature
    arrays to pool. Not differentiated: bandwidths act as constants.
    """
    if isinstance(pooled, (list, tuple)):
        rows = [f.features.data if isinstance(f, TaskFeatures) else np.asarray(_raw(f)) for f in pooled]
        pooled = np.vstack(rows)
    pooled = np.asarray(_raw(pooled), dtype=np.float64)
    if pooled.ndim != 2:
        raise ShapeError(f"median_bandwidth needs [samples x dim] data, got shape {pooled.shape}")
    if pooled.shape[0] < 2:
        raise InsufficientSamplesError("median_bandwidth needs at least 2 pooled samples")
    sq = (
        (pooled * pooled).sum(axis=1)[:, None]
        + (pooled * pooled).sum(axis=1)[None, :]
        - 2.0 * pooled @ pooled.T
    )
    np.maximum(sq, 0.0, out=sq)
    upper = np.sqrt(sq[np.triu_indices(pooled.shape[0], k=1)])
    return float(max(np.median(upper), _BANDWIDTH_FLOOR))


def _raw(x):
    return x.data if isinstance(x, Tensor) else x


def mmd2(x: Tensor, y: Tensor, bank: KernelBank) -> Tensor:
    """Biased squared MMD between two row-sample sets, summed over the bank.

    V-statistic: mean k(x, x') + mean k(y, y') - 2 mean k(x, y) with the
    Gaussian kernel exp(-d^2 / (2 sigma^2)) per bandwidth. Nonnegative up to
    rounding.
    """
    x = x.features if isinstance(x, TaskFeatures) else x
    y = y.features if isinstance(y, TaskFeatures) else y
    if x.data.ndim != 2 or y.data.ndim != 2:
        raise ShapeError("mmd2 needs [samples x dim] tensors")
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise InsufficientSamplesError("mmd2 needs at least one sample per set")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"mmd2: feature dims differ, {x.shape[1]} vs {y.shape[1]}")
    d_xx = ad.pairwise_sqdist(x, x)
    d_yy = ad.pairwise_sqdist(y, y)
    d_xy = ad.pairwise_sqdist(x, y)
    total = None
    for sigma in bank.bandwidths:
        coef = -0.5 / (sigma * sigma)
        term = ad.sub(
            ad.add(_mean_all(ad.exp(ad.scale(d_xx, coef))), _mean_all(ad.exp(ad.scale(d_yy, coef)))),
            ad.scale(_mean_all(ad.exp(ad.scale(d_xy, coef))), 2.0),
        )
        total = term if total is None else ad.add(total, term)
    return total


def _mean_all(t: Tensor) -> Tensor:
    return ad.reduce_mean(ad.reduce_mean(t, axis=0))


def mk_mmd_loss(features: list[TaskFeatures], bank: KernelBank) -> Tensor:
    """Sum of mmd2 over all task pairs."""
    if len(features) < 2:
        raise InsufficientSamplesError(f"alignment needs at least two tasks, got {len(features)}")
    total = None
    for i in range(len(features)):
        for j in range(i + 1, len(features)):
            term = mmd2(features[i].features, features[j].features, bank)
            total = term if total is None else ad.add(total, term)
    return total


def total_loss(task_loss: Tensor, align_loss: Tensor, lam: float) -> Tensor:
    """task_loss + lam * align_loss."""
    if lam < 0:
        raise ConfigError(f"alignment weight must be non-negative, got {lam}")
    return ad.add(task_loss, ad.scale(align_loss, lam))
