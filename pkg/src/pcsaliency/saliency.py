"""Gradient saliency in spherical coordinates around the per-axis median core.

A point's score is ``-dL/dr * r**(1 + alpha)`` where ``r`` is its distance to
the core: moving a point toward the core approximates removing it, so the
radial derivative estimates how much the loss would rise without it.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from pcsaliency.errors import StructuralError
from pcsaliency.model import ModelParams, atomic_write, input_gradient

EPS_R = 1e-10


@dataclass
class SaliencyConfig:
    alpha: float = 1.0
    epsilon_r: float = EPS_R

    def __post_init__(self):
        if not self.alpha > 0:
            raise StructuralError("alpha must be > 0")
        if not self.epsilon_r > 0:
            raise StructuralError("epsilon_r must be > 0")


@dataclass
class SphericalCoords:
    r: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    rho: np.ndarray
    core: np.ndarray

    def to_cartesian(self) -> np.ndarray:
        s = np.sin(self.psi)
        unit = np.column_stack([s * np.cos(self.phi), s * np.sin(self.phi), np.cos(self.psi)])
        return self.core + self.r[:, None] * unit


@dataclass
class SaliencyMap:
    scores: np.ndarray
    alpha: float
    core: np.ndarray
    radial_gradient: np.ndarray
    r: np.ndarray
    loss: float
    label: int
    label_source: str
    predicted: int

    def __len__(self) -> int:
        return len(self.scores)

    def ranks(self) -> np.ndarray:
        """Rank 0 is the highest score; ties go to the lower index."""
        order = np.lexsort((np.arange(len(self.scores)), -self.scores))
        ranks = np.empty(len(order), dtype=np.int64)
        ranks[order] = np.arange(len(order))
        return ranks


def _points(cloud) -> np.ndarray:
    x = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3:
        raise StructuralError(f"cloud must be N x 3, got shape {x.shape}")
    if len(x) == 0:
        raise StructuralError("empty cloud")
    return x


def spherical_core(cloud) -> np.ndarray:
    """Per-axis median; for even N the mean of the two middle values."""
    return np.median(_points(cloud), axis=0)


def spherical_coords(cloud, core: np.ndarray | None = None, alpha: float = 1.0) -> SphericalCoords:
    x = _points(cloud)
    core = spherical_core(x) if core is None else np.asarray(core, dtype=np.float64)
    d = x - core
    r = np.sqrt((d * d).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(r > 0, np.arccos(np.clip(d[:, 2] / r, -1.0, 1.0)), 0.0)
        rho = np.where(r > 0, r ** (-alpha), np.nan)
    phi = np.arctan2(d[:, 1], d[:, 0])
    return SphericalCoords(r, psi, phi, rho, core)


def radial_gradient(cloud, grad: np.ndarray, core: np.ndarray, epsilon_r: float = EPS_R) -> np.ndarray:
    """dL/dr_i from Cartesian gradients; zero for points within ``epsilon_r`` of the core."""
    x = _points(cloud)
    grad = np.asarray(grad, dtype=np.float64)
    core = np.asarray(core, dtype=np.float64)
    if grad.shape != x.shape or core.shape != (3,):
        raise StructuralError(f"shape mismatch: cloud {x.shape}, grad {grad.shape}, core {core.shape}")
    d = x - core
    r = np.sqrt((d * d).sum(axis=1))
    dot = (grad * d).sum(axis=1)
    out = np.zeros(len(x))
    ok = r >= epsilon_r
    out[ok] = dot[ok] / r[ok]
    return out


def scores_from_radial(dl_dr: np.ndarray, r: np.ndarray, alpha: float) -> np.ndarray:
    return -dl_dr * r ** (1.0 + alpha)


def saliency_scores(
    model: ModelParams, cloud, label: int | None = None, config: SaliencyConfig | None = None
) -> SaliencyMap:
    """Score every point from a single forward/backward pass.

    Without ``label`` the model's predicted class stands in for the ground
    truth; ``label_source`` on the result says which was used.
    """
    config = config or SaliencyConfig()
    x = _points(cloud)
    g = input_gradient(model, x, label)
    core = spherical_core(x)
    d = x - core
    r = np.sqrt((d * d).sum(axis=1))
    dl_dr = radial_gradient(x, g.grad, core, config.epsilon_r)
    scores = scores_from_radial(dl_dr, r, config.alpha)
    return SaliencyMap(
        scores=scores,
        alpha=config.alpha,
        core=core,
        radial_gradient=dl_dr,
        r=r,
        loss=g.loss,
        label=g.label,
        label_source=g.label_source,
        predicted=g.prediction.predicted,
    )


def shift_to_center(cloud, indices, core: np.ndarray | None = None) -> np.ndarray:
    """Copy of the cloud with the selected points moved onto ``core``."""
    x = _points(cloud).copy()
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size:
        if idx.min() < 0 or idx.max() >= len(x):
            raise StructuralError(f"shift index out of range [0, {len(x)})")
        if len(np.unique(idx)) != len(idx):
            raise StructuralError("duplicate shift indices")
    core = spherical_core(x) if core is None else np.asarray(core, dtype=np.float64)
    x[idx] = core
    return x


def saliency_csv(cloud, smap: SaliencyMap) -> str:
    x = _points(cloud)
    if len(smap) != len(x):
        raise StructuralError(f"{len(smap)} scores for {len(x)} points")
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["index", "x", "y", "z", "r", "score", "rank"])
    for i, (p, r, s, rank) in enumerate(zip(x, smap.r, smap.scores, smap.ranks())):
        writer.writerow([i, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(r)), repr(float(s)), int(rank)])
    return out.getvalue()


def write_saliency_csv(cloud, smap: SaliencyMap, path) -> None:
    atomic_write(path, saliency_csv(cloud, smap))
