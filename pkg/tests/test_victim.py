import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from deepknn.attacks import ClusterModel, make_synthetic_clusters
from deepknn.dataset import FeatureDataset, PoisonLedger, Space
from deepknn.extractor import extract_features, make_extractor
from deepknn.filters import FilterReport, no_filter
from deepknn.harness import World, build_scenario, load_config
from deepknn.victim import (
    LinearHead,
    Outcome,
    TrainConfig,
    TrainingError,
    TrialInputs,
    attack_outcome,
    cross_entropy,
    detection_confusion,
    mcc,
    run_trial,
    train_head,
)

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def fds(points, labels, ids=None, C=None):
    points = np.asarray(points, dtype=float)
    return FeatureDataset(points, labels, np.arange(len(points)) if ids is None else ids, Space.FEATURE, C)


def constant_head(C, d, label):
    b = np.zeros(C)
    b[label] = 1.0
    return LinearHead(np.zeros((C, d)), b)


class TestCrossEntropy:
    @pytest.mark.parametrize("seed", range(100))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        n, d, C = int(rng.integers(1, 20)), int(rng.integers(1, 6)), int(rng.integers(2, 5))
        x = rng.normal(size=(n, d))
        y = rng.integers(0, C, n)
        w = rng.normal(size=(C, d))
        b = rng.normal(size=C)
        _, gw, gb = cross_entropy(w, b, x, y)
        dw, db = rng.normal(size=w.shape), rng.normal(size=b.shape)
        h = 1e-5
        fd = (cross_entropy(w + h * dw, b + h * db, x, y)[0] - cross_entropy(w - h * dw, b - h * db, x, y)[0]) / (2 * h)
        an = float((gw * dw).sum() + gb @ db)
        assert abs(fd - an) <= 1e-4 * max(abs(an), 1e-8) + 1e-10

    def test_stable_for_large_scores(self):
        x = np.array([[1e4, 0.0]])
        loss, gw, gb = cross_entropy(np.eye(2), np.zeros(2), x, np.array([1]))
        assert math.isfinite(loss) and np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))


class TestTrainHead:
    def test_separable(self):
        rng = np.random.default_rng(0)
        pts = np.vstack([rng.normal(size=(30, 2)) - 20, rng.normal(size=(30, 2)) + 20])
        ds = fds(pts, [0] * 30 + [1] * 30)
        head = train_head(ds)
        assert head.accuracy(ds) == 1.0

    def test_ten_clusters_generalize(self):
        train = make_synthetic_clusters(10, 50, 32, 10.0, seed=3)
        rng = np.random.default_rng(4)
        # held-out draws from the same means
        cm = ClusterModel.create(10, 32, 10.0, np.random.default_rng(3))
        test = cm.sample(50, rng, start_id=1000)
        phi = make_extractor(32, 32, 64, seed=5)
        head = train_head(extract_features(phi, train))
        assert head.accuracy(extract_features(phi, test)) >= 0.99

    def test_deterministic(self):
        ds = fds(np.random.default_rng(1).normal(size=(40, 3)), np.arange(40) % 4)
        a, b = train_head(ds, TrainConfig(seed=7)), train_head(ds, TrainConfig(seed=7))
        assert np.array_equal(a.weights, b.weights) and np.array_equal(a.biases, b.biases)

    def test_final_loss_near_running_minimum(self):
        ds = fds(np.random.default_rng(2).normal(size=(60, 4)), np.arange(60) % 3)
        hist = train_head(ds).loss_history
        assert hist[-1] - min(hist) <= 1e-3

    def test_empty_class(self):
        ds = fds([[0.0], [1.0]], [0, 0], C=2)
        with pytest.raises(TrainingError, match=r"\[1\]"):
            train_head(ds)

    def test_non_finite_loss(self):
        ds = fds([[1e300], [1e300]], [0, 1])
        with pytest.raises(TrainingError), np.errstate(over="ignore", invalid="ignore"):
            train_head(ds, TrainConfig(lr=1e10, epochs=5))

    def test_argmax_ties_lowest_index(self):
        head = LinearHead(np.zeros((3, 2)), np.zeros(3))
        assert head.predict([[1.0, 2.0]]).tolist() == [0]


@pytest.fixture(scope="module", params=["feature_collision.cfg", "convex_polytope.cfg"])
def acceptance_inputs(request):
    cfg = load_config(CONFIGS / request.param)
    world = World.create(cfg)
    sc = build_scenario(world, cfg, 0)
    return cfg, sc.trial_inputs(world.extractor)


def test_loss_monotone_on_acceptance_data(acceptance_inputs):
    cfg, inputs = acceptance_inputs
    hist = np.asarray(train_head(inputs.train, cfg.victim).loss_history)
    assert np.all(np.diff(hist) <= 1e-9)


def test_unfiltered_feature_collision_succeeds():
    cfg = load_config(CONFIGS / "feature_collision.cfg")
    world = World.create(cfg)
    inputs = build_scenario(world, cfg, 0).trial_inputs(world.extractor)
    head = train_head(inputs.train, cfg.victim)
    assert attack_outcome(head, inputs.target_feature, 0, 1) is Outcome.ATTACK_SUCCEEDED


class TestOutcome:
    def test_constant_base(self):
        assert attack_outcome(constant_head(3, 2, 1), np.zeros(2), 0, 1) is Outcome.ATTACK_SUCCEEDED

    def test_constant_target(self):
        assert attack_outcome(constant_head(3, 2, 0), np.zeros(2), 0, 1) is Outcome.DEFENSE_SUCCEEDED

    def test_third_class_is_defense_success(self):
        assert attack_outcome(constant_head(3, 2, 2), np.zeros(2), 0, 1) is Outcome.DEFENSE_SUCCEEDED

    def test_same_labels(self):
        with pytest.raises(ValueError):
            attack_outcome(constant_head(2, 1, 0), np.zeros(1), 1, 1)


def report(kept, removed):
    return FilterReport(frozenset(kept), frozenset(removed), "test", {})


class TestConfusion:
    def test_perfect(self):
        c = detection_confusion(report(range(10), range(10, 15)), PoisonLedger(frozenset(range(10, 15)), 99, 1, 0))
        assert (c.tp, c.fp, c.tn, c.fn) == (5, 0, 10, 0)

    def test_large_aggregate(self):
        # 800 poisons, 799 removed; 10000 clean with 60 removed (0.6%)
        poisons = set(range(10_000, 10_800))
        removed = set(range(10_000, 10_799)) | set(range(60))
        kept = (set(range(10_800)) - removed)
        c = detection_confusion(report(kept, removed), PoisonLedger(frozenset(poisons), -1, 1, 0))
        assert (c.tp, c.fn, c.fp) == (799, 1, 60)
        assert 100 * c.fp / (c.fp + c.tn) == pytest.approx(0.6)

    def test_empty_ledger(self):
        c = detection_confusion(report(range(5), [5]), PoisonLedger(frozenset(), 99, 1, 0))
        assert c.tp == c.fn == 0
        assert mcc(c.tp, c.fp, c.tn, c.fn) == 0.0

    def test_unknown_poison_id(self):
        with pytest.raises(ValueError):
            detection_confusion(report([0], []), PoisonLedger(frozenset({7}), 99, 1, 0))

    @pytest.mark.parametrize("seed", range(20))
    def test_partition(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 200))
        removed = set(np.flatnonzero(rng.random(n) < 0.3).tolist())
        poisons = frozenset(np.flatnonzero(rng.random(n) < 0.2).tolist())
        c = detection_confusion(report(set(range(n)) - removed, removed), PoisonLedger(poisons, -1, 1, 0))
        assert c.total == n


class TestMcc:
    def test_perfect(self):
        assert mcc(5, 0, 5, 0) == 1.0

    def test_formula(self):
        assert mcc(3, 1, 5, 1) == pytest.approx(14 / 24)

    def test_all_negative_predictor(self):
        assert mcc(0, 0, 7, 3) == 0.0

    def test_inverted(self):
        assert mcc(0, 5, 0, 5) == -1.0

    @pytest.mark.parametrize("seed", range(50))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        v = mcc(*rng.integers(0, 1000, size=4).tolist())
        assert -1.0 <= v <= 1.0


def toy_inputs(trial=0):
    """Two clusters in feature space; three poisons labelled 1 sit on a target
    placed on the class-0 side of the midpoint."""
    rng = np.random.default_rng(trial)
    target = np.array([3.0, 3.0])
    pts = np.vstack([rng.normal(size=(20, 2)), rng.normal(size=(20, 2)) + 8, target + rng.normal(size=(3, 2)) * 0.05])
    labels = [0] * 20 + [1] * 20 + [1] * 3
    train = fds(pts, labels)
    test = fds(np.vstack([rng.normal(size=(10, 2)), rng.normal(size=(10, 2)) + 8]), [0] * 10 + [1] * 10, np.arange(100, 120))
    ledger = PoisonLedger(frozenset({40, 41, 42}), 200, 1, 0)
    return TrialInputs(train, test, target, ledger, trial, trial)


def remove_all(ds):
    return FilterReport.removing(ds, ds.ids.tolist(), "remove_all")


class TestRunTrial:
    def test_noop_defense_never_succeeds(self):
        victim = TrainConfig(epochs=2000)
        rows = [run_trial(toy_inputs(t), no_filter, victim) for t in range(5)]
        q = [r for r in rows if r.qualifies]
        assert q and not any(r.defense_success for r in q)

    def test_remove_all_errors(self):
        with pytest.raises(TrainingError):
            run_trial(toy_inputs(), remove_all)

    def test_overlapping_test_ids(self):
        inp = toy_inputs()
        inp = replace(inp, test=fds(inp.test.points, inp.test.labels, np.arange(20)))
        with pytest.raises(ValueError, match="overlap"):
            run_trial(inp, no_filter)

    def test_target_in_training(self):
        inp = toy_inputs()
        inp = replace(inp, ledger=PoisonLedger(frozenset({40, 41, 42}), 5, 1, 0))
        with pytest.raises(ValueError, match="target"):
            run_trial(inp, no_filter)

    def test_knn_removes_poisons(self):
        from deepknn.knn import deep_knn_filter

        row = run_trial(toy_inputs(), lambda ds: deep_knn_filter(ds, 9), TrainConfig(epochs=2000))
        assert row.poisons_removed == 3 and row.tp + row.fp + row.tn + row.fn == row.n_train
        assert row.qualifies and row.defense_success
