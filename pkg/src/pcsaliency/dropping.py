"""Point-dropping schemes and the leave-one-out contribution oracle.

Every scheme removes ``n`` points in ``T`` equal batches and records the loss
and predicted class after each batch.  Dropped indices always refer to the
original cloud; ties are broken toward the lower original index.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from pcsaliency.errors import StructuralError
from pcsaliency.model import ModelParams, atomic_write, forward, loss, loss_and_prediction
from pcsaliency.saliency import SaliencyConfig, saliency_scores, spherical_core

SCHEMES = ("high", "low", "random", "critical", "furthest")
BRUTE_FORCE_MAX_N = 4096


@dataclass
class DropConfig:
    scheme: str
    n: int
    T: int = 1
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise StructuralError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.n < 1:
            raise StructuralError("n must be >= 1")
        if not 1 <= self.T <= self.n:
            raise StructuralError(f"T must lie in [1, n], got T={self.T}, n={self.n}")
        if self.n % self.T:
            raise StructuralError(f"n={self.n} is not a multiple of T={self.T}")

    @property
    def per_iteration(self) -> int:
        return self.n // self.T

    def check(self, n_points: int) -> None:
        if self.n >= n_points:
            raise StructuralError(f"cannot drop {self.n} of {n_points} points")


@dataclass
class DropResult:
    remaining: np.ndarray
    dropped: np.ndarray
    batches: list[np.ndarray]
    losses: list[float] = field(default_factory=list)
    predictions: list[int] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.dropped)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["iteration", "dropped_original_indices", "loss", "predicted_class"])
        for t, (batch, value, pred) in enumerate(zip(self.batches, self.losses, self.predictions)):
            writer.writerow([t, ";".join(str(int(i)) for i in batch), repr(float(value)), pred])
        return out.getvalue()

    def write_csv(self, path) -> None:
        atomic_write(path, self.to_csv())


def _points(cloud) -> np.ndarray:
    x = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) == 0:
        raise StructuralError(f"cloud must be N x 3 with N >= 1, got {x.shape}")
    return x


def _check_indices(indices, n_points: int) -> np.ndarray:
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size:
        if idx.min() < 0 or idx.max() >= n_points:
            raise StructuralError(f"index out of range [0, {n_points})")
        if len(np.unique(idx)) != len(idx):
            raise StructuralError("duplicate indices")
    return idx


def drop_points(cloud, indices) -> tuple[np.ndarray, np.ndarray]:
    """Remove ``indices``; returns the smaller cloud and, for each survivor, its old index."""
    x = _points(cloud)
    idx = _check_indices(indices, len(x))
    if len(idx) >= len(x):
        raise StructuralError("cannot drop every point")
    keep = np.ones(len(x), dtype=bool)
    keep[idx] = False
    return x[keep], np.flatnonzero(keep)


def _record(model, label, x):
    if model is None:
        return float("nan"), -1
    if label is None:
        return float("nan"), forward(model, x).predicted
    value, pred = loss_and_prediction(model, x, label)
    return value, pred.predicted


class _Dropper:
    """Bookkeeping shared by the iterative schemes."""

    def __init__(self, cloud, config: DropConfig):
        self.x = _points(cloud)
        config.check(len(self.x))
        self.orig = np.arange(len(self.x))
        self.batches: list[np.ndarray] = []
        self.losses: list[float] = []
        self.predictions: list[int] = []

    def pick(self, key: np.ndarray, m: int) -> None:
        """Drop the ``m`` points with the largest ``key`` (lower original index wins ties)."""
        order = np.lexsort((self.orig, -key))[:m]
        self.batches.append(self.orig[order])
        keep = np.ones(len(self.x), dtype=bool)
        keep[order] = False
        self.x, self.orig = self.x[keep], self.orig[keep]

    def result(self) -> DropResult:
        dropped = np.concatenate(self.batches) if self.batches else np.empty(0, dtype=np.int64)
        return DropResult(self.x, dropped, self.batches, self.losses, self.predictions)


def saliency_drop(model: ModelParams, cloud, label: int | None, config: DropConfig) -> DropResult:
    """Iterative saliency dropping: ``high`` removes top scores, ``low`` bottom scores.

    The map (gradients, core, scores) is rebuilt on the surviving points at
    every iteration.
    """
    if config.scheme not in ("high", "low"):
        raise StructuralError(f"saliency_drop handles high/low, not {config.scheme!r}")
    d = _Dropper(cloud, config)
    if label is None:
        label = forward(model, d.x).predicted
    sconf = SaliencyConfig(alpha=config.alpha)
    sign = 1.0 if config.scheme == "high" else -1.0
    smap = saliency_scores(model, d.x, label, sconf)
    for t in range(config.T):
        d.pick(sign * smap.scores, config.per_iteration)
        # the next map's forward pass doubles as this iteration's record
        if t < config.T - 1:
            smap = saliency_scores(model, d.x, label, sconf)
            d.losses.append(smap.loss)
            d.predictions.append(smap.predicted)
        else:
            value, pred = _record(model, label, d.x)
            d.losses.append(value)
            d.predictions.append(pred)
    return d.result()


def critical_counts(model: ModelParams, cloud) -> np.ndarray:
    """How many pooled features each point wins (sums to F)."""
    x = _points(cloud)
    return np.bincount(forward(model, x).pool_argmax, minlength=len(x))


def critical_drop(model: ModelParams, cloud, config: DropConfig, label: int | None = None) -> DropResult:
    """Iteratively drop the points that win the most pooled features.

    Points winning two or more features go first; when there are not enough
    of them the batch is filled from single-feature winners and then from
    non-critical points by lowest index, which a plain sort on the count
    already yields.
    """
    d = _Dropper(cloud, config)
    for _ in range(config.T):
        d.pick(critical_counts(model, d.x), config.per_iteration)
        value, pred = _record(model, label, d.x)
        d.losses.append(value)
        d.predictions.append(pred)
    return d.result()


def rand_drop(cloud, config: DropConfig, model: ModelParams | None = None, label: int | None = None) -> DropResult:
    """Uniform sample without replacement from ``config.seed``; split into T batches in draw order."""
    x = _points(cloud)
    config.check(len(x))
    chosen = np.random.default_rng(config.seed).choice(len(x), size=config.n, replace=False)
    m = config.per_iteration
    batches = [chosen[i : i + m] for i in range(0, config.n, m)]
    keep = np.ones(len(x), dtype=bool)
    losses, preds = [], []
    for batch in batches:
        keep[batch] = False
        value, pred = _record(model, label, x[keep])
        losses.append(value)
        preds.append(pred)
    return DropResult(x[keep], chosen, batches, losses, preds)


def furthest_drop(cloud, config: DropConfig, model: ModelParams | None = None, label: int | None = None) -> DropResult:
    """Drop points farthest from the spherical core, recomputing the core per batch."""
    d = _Dropper(cloud, config)
    for _ in range(config.T):
        diff = d.x - spherical_core(d.x)
        d.pick((diff * diff).sum(axis=1), config.per_iteration)
        value, pred = _record(model, label, d.x)
        d.losses.append(value)
        d.predictions.append(pred)
    return d.result()


def run_drop(model: ModelParams, cloud, label: int | None, config: DropConfig) -> DropResult:
    if config.scheme in ("high", "low"):
        return saliency_drop(model, cloud, label, config)
    if config.scheme == "critical":
        return critical_drop(model, cloud, config, label)
    if config.scheme == "random":
        return rand_drop(cloud, config, model, label)
    return furthest_drop(cloud, config, model, label)


def brute_force_contribution(model: ModelParams, cloud, label: int) -> np.ndarray:
    """``L(X without x_i) - L(X)`` for every point, by N + 1 forward passes."""
    x = _points(cloud)
    if len(x) > BRUTE_FORCE_MAX_N:
        raise StructuralError(f"brute force limited to N <= {BRUTE_FORCE_MAX_N}, got {len(x)}")
    if len(x) < 2:
        raise StructuralError("leave-one-out needs at least two points")
    base = loss(model, x, label)
    out = np.empty(len(x))
    for i in range(len(x)):
        out[i] = loss(model, np.delete(x, i, axis=0), label) - base
    return out
