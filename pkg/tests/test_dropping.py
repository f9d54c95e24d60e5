import csv
import io

import numpy as np
import pytest

from pcsaliency.dropping import (
    DropConfig,
    brute_force_contribution,
    critical_counts,
    critical_drop,
    drop_points,
    furthest_drop,
    rand_drop,
    run_drop,
    saliency_drop,
)
from pcsaliency.data import LabeledCloud, ShapeSpec, generate_shapes
from pcsaliency.errors import StructuralError
from pcsaliency.model import TrainConfig, forward, loss, train
from pcsaliency.saliency import saliency_scores


def furthest_oracle(x, n, T):
    """Re-implementation: recompute every distance before each single pick."""
    alive = list(range(len(x)))
    dropped = []
    for _ in range(T):
        core = np.median(x[alive], axis=0)
        for _ in range(n // T):
            best = max(alive, key=lambda i: (float(((x[i] - core) ** 2).sum()), -i))
            alive.remove(best)
            dropped.append(best)
    return dropped


@pytest.fixture(scope="module")
def tiny_n16():
    """Model trained on 16-point clouds plus 100 held-out 16-point clouds."""
    def subsample(clouds, seed):
        r = np.random.default_rng(seed)
        return [LabeledCloud(c.points[r.choice(len(c.points), 16, replace=False)], c.label) for c in clouds]

    train_set, test_set = generate_shapes(ShapeSpec(points=32, train_per_class=60, test_per_class=13, seed=0))
    model = train(subsample(train_set, 0), TrainConfig(epochs=15, seed=0)).params
    return model, subsample(test_set, 100)[:100]


class TestDropConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"scheme": "bogus", "n": 2},
            {"scheme": "high", "n": 0},
            {"scheme": "high", "n": 5, "T": 6},
            {"scheme": "high", "n": 5, "T": 2},
            {"scheme": "high", "n": 5, "T": 0},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(StructuralError):
            DropConfig(**kwargs)

    def test_n_must_be_below_cloud_size(self, random_model, rng):
        x = rng.normal(size=(5, 3))
        for scheme in ("high", "low", "critical", "random", "furthest"):
            with pytest.raises(StructuralError):
                run_drop(random_model, x, 0, DropConfig(scheme, 5))


class TestDropPoints:
    def test_empty(self, rng):
        x = rng.normal(size=(3, 3))
        rest, kept = drop_points(x, [])
        np.testing.assert_array_equal(rest, x)
        np.testing.assert_array_equal(kept, [0, 1, 2])

    def test_drop_first(self, rng):
        x = rng.normal(size=(3, 3))
        rest, kept = drop_points(x, [0])
        np.testing.assert_array_equal(rest, x[1:])
        np.testing.assert_array_equal(kept, [1, 2])

    def test_reinsert_round_trip(self, rng):
        x = rng.normal(size=(20, 3))
        idx = [3, 17, 0, 9]
        rest, kept = drop_points(x, idx)
        rebuilt = np.empty_like(x)
        rebuilt[kept] = rest
        rebuilt[idx] = x[idx]
        np.testing.assert_array_equal(rebuilt, x)

    @pytest.mark.parametrize("bad", [[3], [-1], [0, 0], [0, 1, 2]])
    def test_errors(self, rng, bad):
        with pytest.raises(StructuralError):
            drop_points(rng.normal(size=(3, 3)), bad)


class TestSaliencyDrop:
    def test_single_step_drops_argmax(self, random_model, rng):
        for _ in range(10):
            x = rng.normal(size=(4, 3))
            smap = saliency_scores(random_model, x, 2)
            result = saliency_drop(random_model, x, 2, DropConfig("high", 1, 1))
            expected = np.lexsort((np.arange(4), -smap.scores))[0]
            assert result.dropped.tolist() == [expected]

    def test_low_drops_argmin(self, random_model, rng):
        x = rng.normal(size=(10, 3))
        smap = saliency_scores(random_model, x, 2)
        result = saliency_drop(random_model, x, 2, DropConfig("low", 3, 1))
        assert result.dropped.tolist() == np.lexsort((np.arange(10), smap.scores))[:3].tolist()

    def test_iterations_recompute_on_remaining(self, random_model, rng):
        x = rng.normal(size=(30, 3))
        result = saliency_drop(random_model, x, 1, DropConfig("high", 6, 3))
        alive = np.arange(30)
        for batch in result.batches:
            smap = saliency_scores(random_model, x[alive], 1)
            order = np.lexsort((alive, -smap.scores))[:2]
            assert alive[order].tolist() == batch.tolist()
            alive = np.setdiff1d(alive, batch)

    def test_result_bookkeeping(self, random_model, rng):
        x = rng.normal(size=(40, 3))
        result = saliency_drop(random_model, x, 3, DropConfig("high", 12, 4))
        assert len(result.dropped) == 12 == len(set(result.dropped.tolist()))
        assert [len(b) for b in result.batches] == [3, 3, 3, 3]
        assert len(result.losses) == 4 == len(result.predictions)
        np.testing.assert_array_equal(result.remaining, np.delete(x, result.dropped, 0))
        assert result.losses[-1] == loss(random_model, result.remaining, 3)
        assert result.predictions[-1] == forward(random_model, result.remaining).predicted

    def test_rejects_other_schemes(self, random_model, rng):
        with pytest.raises(StructuralError):
            saliency_drop(random_model, rng.normal(size=(8, 3)), 0, DropConfig("random", 2))

    def test_agrees_with_brute_force_argmax(self, tiny_n16):
        model, clouds = tiny_n16
        agree = 0
        for cloud in clouds:
            contrib = brute_force_contribution(model, cloud.points, cloud.label)
            dropped = saliency_drop(model, cloud.points, cloud.label, DropConfig("high", 1, 1)).dropped[0]
            agree += dropped == int(np.argmax(contrib))
        # measured 56/100 (chance is ~1/16); seeds 1 and 2 give 51 and 57
        assert agree > 50


class TestCriticalCounts:
    def test_single_point(self, random_model):
        assert critical_counts(random_model, [[0.1, 0.2, 0.3]]).tolist() == [64]

    def test_sums_to_F(self, random_model, rng):
        for n in (2, 10, 100):
            c = critical_counts(random_model, rng.normal(size=(n, 3)))
            assert c.sum() == 64 and (c > 0).sum() <= 64 and len(c) == n

    def test_duplicate_of_winner(self, random_model, rng):
        x = rng.normal(size=(20, 3))
        c = critical_counts(random_model, x)
        winner = int(np.argmax(c))
        c2 = critical_counts(random_model, np.vstack([x, x[winner]]))
        assert c2[:20].tolist() == c.tolist() and c2[20] == 0


class TestCriticalDrop:
    def test_unique_maximum_first(self, random_model, rng):
        x = rng.normal(size=(15, 3))
        c = critical_counts(random_model, x)
        result = critical_drop(random_model, x, DropConfig("critical", 1, 1))
        assert result.dropped[0] == int(np.argmax(c))

    def test_fallback_order(self, random_model, rng):
        x = rng.normal(size=(40, 3))
        c = critical_counts(random_model, x)
        m = int((c >= 2).sum()) + 3
        result = critical_drop(random_model, x, DropConfig("critical", m, 1))
        expected = np.lexsort((np.arange(40), -c))[:m]
        assert result.dropped.tolist() == expected.tolist()
        # the first batch exhausts the >= 2 winners before touching anything else
        assert (c[result.dropped[: m - 3]] >= 2).all()

    def test_counts_recomputed_per_iteration(self, random_model, rng):
        x = rng.normal(size=(30, 3))
        result = critical_drop(random_model, x, DropConfig("critical", 8, 4))
        alive = np.arange(30)
        for batch in result.batches:
            c = critical_counts(random_model, x[alive])
            assert alive[np.lexsort((alive, -c))[:2]].tolist() == batch.tolist()
            alive = np.setdiff1d(alive, batch)

    def test_records_loss_when_labelled(self, random_model, rng):
        x = rng.normal(size=(12, 3))
        result = critical_drop(random_model, x, DropConfig("critical", 4, 2), label=5)
        assert result.losses[-1] == loss(random_model, result.remaining, 5)


class TestRandDrop:
    def test_same_seed(self, rng):
        x = rng.normal(size=(50, 3))
        a = rand_drop(x, DropConfig("random", 10, 2, seed=3))
        b = rand_drop(x, DropConfig("random", 10, 2, seed=3))
        assert a.dropped.tolist() == b.dropped.tolist()

    def test_one_survivor(self, rng):
        x = rng.normal(size=(9, 3))
        assert len(rand_drop(x, DropConfig("random", 8, seed=1)).remaining) == 1

    def test_uniform(self, rng):
        x = rng.normal(size=(10, 3))
        counts = np.zeros(10)
        for seed in range(10_000):
            counts[rand_drop(x, DropConfig("random", 1, seed=seed)).dropped[0]] += 1
        freq = counts / 10_000
        assert np.all(np.abs(freq - 0.1) <= 0.01)

    def test_without_model_records_placeholders(self, rng):
        result = rand_drop(rng.normal(size=(10, 3)), DropConfig("random", 4, 2))
        assert len(result.losses) == 2 and all(np.isnan(result.losses))


class TestFurthestDrop:
    def test_colinear(self):
        x = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [10, 0, 0]])
        assert furthest_drop(x, DropConfig("furthest", 1)).dropped.tolist() == [3]

    def test_tie_goes_to_lower_index(self):
        x = np.array([[0.0, 0, 0], [-1, 0, 0], [1, 0, 0]])
        assert furthest_drop(x, DropConfig("furthest", 1)).dropped.tolist() == [1]

    @pytest.mark.parametrize("n,T", [(8, 1), (8, 4), (12, 12)])
    def test_matches_oracle(self, rng, n, T):
        for _ in range(20):
            x = rng.normal(size=(64, 3))
            assert furthest_drop(x, DropConfig("furthest", n, T)).dropped.tolist() == furthest_oracle(x, n, T)


class TestBruteForce:
    def test_duplicate_contributes_nothing(self, random_model, rng):
        x = rng.normal(size=(10, 3))
        x = np.vstack([x, x[4]])
        contrib = brute_force_contribution(random_model, x, 1)
        assert contrib[4] == 0.0 and contrib[10] == 0.0

    def test_noncritical_points_contribute_nothing(self, random_model, rng):
        x = rng.normal(size=(40, 3))
        c = critical_counts(random_model, x)
        contrib = brute_force_contribution(random_model, x, 6)
        assert (contrib[c == 0] == 0.0).all()

    def test_definition(self, random_model, rng):
        x = rng.normal(size=(6, 3))
        contrib = brute_force_contribution(random_model, x, 0)
        for i in range(6):
            assert contrib[i] == loss(random_model, np.delete(x, i, 0), 0) - loss(random_model, x, 0)

    def test_guard(self, random_model):
        with pytest.raises(StructuralError):
            brute_force_contribution(random_model, np.zeros((4097, 3)), 0)


def test_determinism_all_schemes(random_model, rng):
    x = rng.normal(size=(40, 3))
    for scheme, T in (("high", 5), ("low", 1), ("critical", 5), ("random", 1), ("furthest", 5)):
        cfg = DropConfig(scheme, 10, T, seed=9)
        a, b = run_drop(random_model, x, 2, cfg), run_drop(random_model, x, 2, cfg)
        assert a.to_csv() == b.to_csv()
        assert len(a.dropped) == 10 and len(a.remaining) == 30


def test_csv_export(random_model, rng):
    result = run_drop(random_model, rng.normal(size=(20, 3)), 1, DropConfig("high", 6, 3))
    rows = list(csv.reader(io.StringIO(result.to_csv())))
    assert rows[0] == ["iteration", "dropped_original_indices", "loss", "predicted_class"]
    assert len(rows) == 4
    got = [int(i) for r in rows[1:] for i in r[1].split(";")]
    assert got == result.dropped.tolist()
    assert float(rows[-1][2]) == result.losses[-1]
