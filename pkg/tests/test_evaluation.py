import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_array_equal

from attackability.attacks import AttackConfig, attack
from attackability.data import make_synthetic
from attackability.errors import ConfigError, DomainError
from attackability.evaluation import (
    active_adv_train,
    average_ranks,
    entropy,
    fooling_rate,
    pr_sweep,
    prevalence_f1,
    rank_pool,
    spearman,
)
from attackability.nn_core import DenseNetSpec, TrainConfig, forward, train

from conftest import linear_model


def brute_force_pr(scores, truth):
    """Every distinct threshold plus one below the minimum, counted one by one."""
    betas = [min(scores) - 1.0] + sorted(set(scores))
    n_pos = sum(truth)
    rows = []
    for beta in betas:
        tp = sum(1 for s, t in zip(scores, truth) if s > beta and t)
        fp = sum(1 for s, t in zip(scores, truth) if s > beta and not t)
        fn = n_pos - tp
        prec = Fraction(1) if tp + fp == 0 else Fraction(tp, tp + fp)
        rec = Fraction(tp, n_pos)
        f1 = Fraction(0) if prec + rec == 0 else 2 * prec * rec / (prec + rec)
        rows.append((beta, float(prec), float(rec), float(f1)))
        assert tp + fp + fn + sum(1 for s, t in zip(scores, truth) if s <= beta and not t) == len(scores)
    return rows


def d2_spearman(a, b):
    """Textbook rank-difference formula; valid without ties."""
    n = len(a)
    ra = np.argsort(np.argsort(a)) + 1
    rb = np.argsort(np.argsort(b)) + 1
    d2 = int(((ra - rb) ** 2).sum())
    return float(1 - Fraction(6 * d2, n * (n * n - 1)))


def test_perfect_detector():
    truth = np.array([1, 0, 1, 1, 0], bool)
    assert pr_sweep(truth.astype(float), truth).best_f1 == 1.0


def test_constant_scores_give_prevalence_f1():
    truth = np.array([1, 0, 0, 1, 0, 0, 0], bool)
    curve = pr_sweep(np.full(7, 0.3), truth)
    p, n = 2, 7
    assert curve.best_f1 == 2 * p / (n + p) == prevalence_f1(truth)


def test_matches_brute_force_on_200_samples(rng):
    scores = np.round(rng.uniform(size=200), 2)
    truth = rng.uniform(size=200) < 0.3
    curve = pr_sweep(scores, truth)
    rows = brute_force_pr(list(scores), list(truth))
    assert_array_equal(curve.betas, [r[0] for r in rows])
    assert_array_equal(curve.precision, [r[1] for r in rows])
    assert_array_equal(curve.recall, [r[2] for r in rows])
    assert_array_equal(curve.f1, [r[3] for r in rows])
    assert curve.best_f1 == max(r[3] for r in rows)


def test_no_positives_rejected():
    with pytest.raises(DomainError):
        pr_sweep([0.1, 0.2], [False, False])


@given(st.integers(0, 2**32 - 1), st.floats(-0.5, 1.5))
def test_sweep_beats_any_fixed_threshold(seed, beta):
    rng = np.random.default_rng(seed)
    scores = rng.uniform(size=50)
    truth = rng.uniform(size=50) < 0.4
    if not truth.any():
        truth[0] = True
    pred = scores > beta
    tp = int((pred & truth).sum())
    f1 = 2 * tp / (pred.sum() + truth.sum())
    curve = pr_sweep(scores, truth)
    assert curve.best_f1 >= f1
    assert np.all((curve.precision >= 0) & (curve.precision <= 1) & (curve.f1 <= 1))


def test_curve_csv(tmp_path):
    curve = pr_sweep([0.2, 0.8, 0.5], [False, True, True])
    curve.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "beta,precision,recall,f1" and len(lines) == 5


def test_average_ranks_with_ties():
    assert_array_equal(average_ranks([10, 20, 20, 5]), [2.0, 3.5, 3.5, 1.0])


def test_spearman_examples():
    a = np.arange(1, 8)
    assert spearman(a, a) == 1.0
    assert spearman(a, -a) == -1.0
    assert spearman([1, 2, 3, 4, 5], [1, 3, 2, 5, 4]) == 0.8


def test_spearman_constant_rejected():
    with pytest.raises(DomainError):
        spearman([1, 1, 1], [1, 2, 3])


@given(st.integers(0, 2**32 - 1))
def test_spearman_invariant_to_monotone_transforms(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=25)
    b = a + rng.normal(size=25)
    assert spearman(np.exp(a), b ** 3) == pytest.approx(spearman(a, b), abs=1e-12)


def test_spearman_all_small_permutations_exact():
    for n in range(2, 7):
        base = np.arange(n)
        for perm in itertools.permutations(range(n)):
            assert spearman(base, np.array(perm)) == d2_spearman(base, np.array(perm))


def test_spearman_with_ties_matches_rank_pearson(rng):
    a = rng.integers(0, 4, size=30).astype(float)
    b = rng.integers(0, 4, size=30).astype(float)
    ra, rb = average_ranks(a), average_ranks(b)
    assert spearman(a, b) == pytest.approx(np.corrcoef(ra, rb)[0, 1], abs=1e-12)


@pytest.fixture(scope="module")
def setup():
    splits = make_synthetic(n_classes=3, dim=6, n_per_class=120, spread=1.0, seed=11)
    tr = splits["train"]
    cfg = TrainConfig(batch_size=32, epochs=10, learning_rate=0.05, lr_drop_epochs=(), shuffle_seed=3)
    model = train(DenseNetSpec((6, 16, 3), ("relu",), 2), tr.samples, tr.labels, cfg, model_id="t")
    return model, splits


def test_fooling_rate_zero_budget(setup):
    model, splits = setup
    assert fooling_rate(model, splits["test"].samples, AttackConfig("pgd", epsilon=0.0)) == 0.0


def test_fooling_rate_constant_model():
    model = linear_model(np.zeros((3, 4)), np.array([1.0, 0.0, 0.0]))
    X = np.random.default_rng(0).uniform(size=(20, 4))
    assert fooling_rate(model, X, AttackConfig("fgsm", epsilon=0.3)) == 0.0


def test_fooling_rate_is_mean_of_replayed_successes(setup):
    model, splits = setup
    X = splits["test"].samples
    cfg = AttackConfig("bim", epsilon=0.05)
    flags = [attack(model, x, cfg).success for x in X]
    assert fooling_rate(model, X, cfg) == np.mean(flags)


def test_fooling_rate_empty():
    model = linear_model(np.eye(2), np.zeros(2))
    with pytest.raises(DomainError):
        fooling_rate(model, np.zeros((0, 2)), AttackConfig())


def test_pgd_fooling_rate_grows_with_budget(setup):
    model, splits = setup
    X = splits["test"].samples
    rates = [fooling_rate(model, X, AttackConfig("pgd", epsilon=e, init_seed=1)) for e in np.linspace(0, 0.2, 21)]
    assert all(b >= a - 0.01 for a, b in zip(rates, rates[1:]))


def test_uncertainty_ranking_uses_entropy(setup):
    model, splits = setup
    pool = splits["validation"]
    order = rank_pool(model, pool, "uncertainty")
    _, probs, _ = forward(model, pool.samples)
    h = np.array([-sum(p * np.log(p) for p in row if p > 0) for row in probs])
    assert np.all(np.diff(h[order]) <= 1e-12)
    assert_array_equal(entropy(np.array([[0.5, 0.5, 0.0]])), [np.log(2)])


def test_rank_pool_errors(setup):
    model, splits = setup
    with pytest.raises(ConfigError):
        rank_pool(model, splits["validation"], "deep")
    with pytest.raises(ConfigError):
        rank_pool(model, splits["validation"], "loss")


def test_full_budget_makes_rankings_coincide(setup):
    model, splits = setup
    pool, test = splits["validation"], splits["test"]
    deep = np.random.default_rng(5).uniform(size=len(pool))
    a_cfg = AttackConfig("pgd", epsilon=0.03)
    t_cfg = TrainConfig(batch_size=16, epochs=2, learning_rate=0.01, lr_drop_epochs=(), shuffle_seed=4)
    results = [
        active_adv_train(model, pool, r, 1.0, a_cfg, t_cfg, test, deep_scores=deep)
        for r in ("random", "uncertainty", "deep")
    ]
    for tuned, fr in results[1:]:
        assert_array_equal(tuned.params, results[0][0].params)
        assert fr == results[0][1]


def test_budget_must_select_samples(setup):
    model, splits = setup
    with pytest.raises(DomainError):
        active_adv_train(model, splits["validation"], "random", 1e-6, AttackConfig("pgd"),
                         TrainConfig(epochs=1, lr_drop_epochs=()), splits["test"])
    with pytest.raises(ConfigError):
        active_adv_train(model, splits["validation"], "random", 1.5, AttackConfig("pgd"),
                         TrainConfig(epochs=1, lr_drop_epochs=()), splits["test"])
