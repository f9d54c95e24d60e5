"""Experiment drivers behind the CLI: drop curves, parameter studies,
model-to-model transfer and the shift/drop consistency check.

Every driver works on a list of labelled clouds and a read-only model, so
independent clouds are evaluated on a thread pool (``PCSM_THREADS``) and
the results collected by cloud index before any reduction.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from pcsaliency.data import LabeledCloud
from pcsaliency.dropping import SCHEMES, DropConfig, run_drop
from pcsaliency.errors import FormatError, StructuralError
from pcsaliency.model import ModelParams, forward, loss_and_prediction
from pcsaliency.saliency import SaliencyConfig, saliency_scores, shift_to_center, spherical_core

ALPHAS = (0.5, 1.0, 2.0, 4.0)
T_VALUES = (1, 2, 5, 10, 20)
N_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
CONSISTENCY_SCHEMES = ("high", "random", "furthest")


def workers() -> int:
    raw = os.environ.get("PCSM_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise StructuralError(f"PCSM_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise StructuralError(f"PCSM_THREADS must be a positive integer, got {raw!r}")
    return value


def map_clouds(fn: Callable, items: Sequence) -> list:
    """``[fn(i, item) for ...]`` in input order, possibly on several threads."""
    n = workers()
    if n == 1 or len(items) < 2:
        return [fn(i, item) for i, item in enumerate(items)]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, range(len(items)), items))


def cloud_seed(seed: int, index: int) -> int:
    """Independent per-cloud seed, stable under any evaluation order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def default_T(scheme: str, n: int) -> int:
    """Five points per iteration for the iterative schemes, one pass otherwise.

    When 5 does not divide n, take the largest divisor of n not above n // 5.
    """
    if n < 1 or scheme not in ("high", "critical"):
        return 1
    target = max(1, n // 5)
    return max(t for t in range(1, target + 1) if n % t == 0)


def _min_points(clouds: Sequence[LabeledCloud]) -> int:
    if not clouds:
        raise StructuralError("no clouds to evaluate")
    return min(len(c) for c in clouds)


def _check_n(n: int, clouds: Sequence[LabeledCloud]) -> None:
    smallest = _min_points(clouds)
    if n < 0 or n >= smallest:
        raise StructuralError(f"n={n} must lie in [0, {smallest}) for this dataset")


# -- per-cloud outcomes -----------------------------------------------------------


@dataclass(frozen=True)
class Outcome:
    loss: float
    predicted: int
    label: int

    @property
    def correct(self) -> bool:
        return self.predicted == self.label


def _clean(model: ModelParams, cloud: LabeledCloud) -> Outcome:
    value, pred = loss_and_prediction(model, cloud.points, cloud.label)
    return Outcome(value, pred.predicted, cloud.label)


def drop_outcomes(
    model: ModelParams,
    clouds: Sequence[LabeledCloud],
    scheme: str,
    n: int,
    T: int | None = None,
    alpha: float = 1.0,
    seed: int = 0,
    judge: ModelParams | None = None,
) -> list[Outcome]:
    """Drop ``n`` points from every cloud and classify what is left.

    Points are chosen against ``model``; the survivors are scored by
    ``judge`` (defaults to the same model).
    """
    _check_n(n, clouds)
    judge = model if judge is None else judge
    if n == 0:
        return map_clouds(lambda i, c: _clean(judge, c), clouds)
    T = default_T(scheme, n) if T is None else T

    def one(i, cloud):
        cfg = DropConfig(scheme, n, T, alpha, cloud_seed(seed, i))
        result = run_drop(model, cloud.points, cloud.label, cfg)
        if judge is model:
            return Outcome(result.losses[-1], result.predictions[-1], cloud.label)
        return _clean(judge, LabeledCloud(result.remaining, cloud.label))

    return map_clouds(one, clouds)


def summarize(outcomes: Sequence[Outcome]) -> tuple[float, float]:
    """(accuracy, mean loss) over a list of per-cloud outcomes."""
    acc = sum(o.correct for o in outcomes) / len(outcomes)
    mean_loss = math.fsum(o.loss for o in outcomes) / len(outcomes)
    return acc, mean_loss


def negative_drop_outcomes(model: ModelParams, clouds: Sequence[LabeledCloud], alpha: float = 1.0) -> list[Outcome]:
    """Single-pass low-drop of every point with a negative saliency score."""

    def one(i, cloud):
        smap = saliency_scores(model, cloud.points, cloud.label, SaliencyConfig(alpha=alpha))
        negative = np.flatnonzero(smap.scores < 0)
        if len(negative) == 0:
            return _clean(model, cloud)
        if len(negative) >= len(cloud):
            raise StructuralError(f"every point of cloud {i} scores negative")
        rest = np.delete(cloud.points, negative, axis=0)
        return _clean(model, LabeledCloud(rest, cloud.label))

    return map_clouds(one, clouds)


# -- CSV helpers ------------------------------------------------------------------


def _csv(header: Sequence[str], rows) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return out.getvalue()


# -- robustness curves ------------------------------------------------------------


@dataclass
class RobustnessCurve:
    scheme: str
    rows: list[tuple[int, int, float, float]] = field(default_factory=list)  # (n, T, accuracy, mean loss)

    HEADER = ("scheme", "n", "T", "accuracy", "mean_loss")

    def accuracy(self, n: int) -> float:
        return next(acc for m, _, acc, _ in self.rows if m == n)


def robustness_curve(
    model: ModelParams,
    clouds: Sequence[LabeledCloud],
    schemes: Sequence[str] = SCHEMES,
    grid: Sequence[int] = (0, 25, 50),
    T: int | None = None,
    alpha: float = 1.0,
    seed: int = 0,
) -> list[RobustnessCurve]:
    grid = [int(n) for n in grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise StructuralError(f"drop grid must be strictly increasing, got {grid}")
    for n in grid:
        _check_n(n, clouds)
    for s in schemes:
        if s not in SCHEMES:
            raise StructuralError(f"unknown scheme {s!r}")
    curves = []
    baseline = None
    for scheme in schemes:
        curve = RobustnessCurve(scheme)
        for n in grid:
            if n == 0:
                # the clean baseline is shared by every scheme
                baseline = baseline or summarize(drop_outcomes(model, clouds, scheme, 0))
                curve.rows.append((0, 0, *baseline))
                continue
            t = default_T(scheme, n) if T is None else T
            acc, mean_loss = summarize(drop_outcomes(model, clouds, scheme, n, t, alpha, seed))
            curve.rows.append((n, t, acc, mean_loss))
        curves.append(curve)
    return curves


def curves_csv(curves: Sequence[RobustnessCurve]) -> str:
    return _csv(RobustnessCurve.HEADER, ((c.scheme, *row) for c in curves for row in c.rows))


# -- shift/drop consistency ---------------------------------------------------------


@dataclass
class ConsistencyReport:
    n: int
    schemes: tuple[str, ...]
    agree: dict[str, int]
    count: int

    HEADER = ("scheme", "n", "agree", "clouds", "agreement")

    def agreement(self, scheme: str) -> float:
        return self.agree[scheme] / self.count

    def to_csv(self) -> str:
        return _csv(self.HEADER, ((s, self.n, self.agree[s], self.count, self.agreement(s)) for s in self.schemes))


def consistency(
    model: ModelParams,
    clouds: Sequence[LabeledCloud],
    n: int,
    schemes: Sequence[str] = CONSISTENCY_SCHEMES,
    alpha: float = 1.0,
    seed: int = 0,
) -> ConsistencyReport:
    """Compare dropping the selected points with moving them onto the core.

    Agreement counts clouds where both variants get the same predicted
    class, whether or not that class is correct.
    """
    _check_n(n, clouds)
    agree = {}
    for scheme in schemes:
        if n == 0:
            agree[scheme] = len(clouds)
            continue

        def one(i, cloud, scheme=scheme):
            cfg = DropConfig(scheme, n, default_T(scheme, n), alpha, cloud_seed(seed, i))
            result = run_drop(model, cloud.points, cloud.label, cfg)
            shifted = shift_to_center(cloud.points, result.dropped, spherical_core(cloud.points))
            return forward(model, result.remaining).predicted == forward(model, shifted).predicted

        agree[scheme] = sum(map_clouds(one, clouds))
    return ConsistencyReport(n, tuple(schemes), agree, len(clouds))


# -- parameter studies --------------------------------------------------------------

STUDY_HEADER = ("study", "value", "scheme", "n", "T", "alpha", "accuracy", "mean_loss")


def _round_to(x: float, step: int) -> int:
    return max(step, step * round(x / step))


def paramstudy(
    model: ModelParams,
    clouds: Sequence[LabeledCloud],
    study: str,
    n: int | None = None,
    seed: int = 0,
) -> list[tuple]:
    """One row per setting; see ``STUDY_HEADER`` for the columns.

    alpha: high-drop at fixed n for each scaling factor.
    n:     high- and random-drop from 10% to 60% of the points (``n`` unused).
    T:     high-drop at fixed n for T in 1, 2, 5, 10, 20; the default n is
           the smallest multiple of 20 at or above 20% of the points.
    """
    size = _min_points(clouds)
    rows = []
    if study == "alpha":
        n = _round_to(0.2 * size, 5) if n is None else n
        T = default_T("high", n)
        for a in ALPHAS:
            acc, ml = summarize(drop_outcomes(model, clouds, "high", n, T, a, seed))
            rows.append(("alpha", a, "high", n, T, a, acc, ml))
    elif study == "n":
        for frac in N_FRACTIONS:
            m = _round_to(frac * size, 5)
            for scheme in ("high", "random"):
                T = default_T(scheme, m)
                acc, ml = summarize(drop_outcomes(model, clouds, scheme, m, T, 1.0, seed))
                rows.append(("n", m, scheme, m, T, 1.0, acc, ml))
    elif study == "T":
        n = 20 * math.ceil(0.2 * size / 20) if n is None else n
        for T in T_VALUES:
            if n % T:
                raise StructuralError(f"T-study needs n divisible by every T in {T_VALUES}, got n={n}")
            acc, ml = summarize(drop_outcomes(model, clouds, "high", n, T, 1.0, seed))
            rows.append(("T", T, "high", n, T, 1.0, acc, ml))
    else:
        raise StructuralError(f"unknown study {study!r}; expected alpha, n or T")
    return rows


def study_csv(rows) -> str:
    return _csv(STUDY_HEADER, rows)


# -- transfer between models --------------------------------------------------------

GENERALIZE_HEADER = ("condition", "n", "T", "accuracy", "mean_loss")


def generalize(
    model_a: ModelParams,
    model_b: ModelParams,
    clouds: Sequence[LabeledCloud],
    n: int,
    seed: int = 0,
) -> list[tuple]:
    """Model B's accuracy on clean clouds, on A's high-drop survivors and on random drops."""
    if model_a.k != model_b.k:
        raise FormatError(f"checkpoints disagree on class count: k={model_a.k} vs k={model_b.k}")
    _check_n(n, clouds)
    T = default_T("high", n)
    clean = summarize(drop_outcomes(model_b, clouds, "high", 0))
    attacked = summarize(drop_outcomes(model_a, clouds, "high", n, T, 1.0, seed, judge=model_b)) if n else clean
    rand = summarize(drop_outcomes(model_b, clouds, "random", n, 1, 1.0, seed)) if n else clean
    return [
        ("clean", 0, 0, *clean),
        ("high_drop_A", n, T if n else 0, *attacked),
        ("random_drop", n, 1 if n else 0, *rand),
    ]


def generalize_csv(rows) -> str:
    return _csv(GENERALIZE_HEADER, rows)
