import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from attackability.detection import (
    DetectorModel,
    EnsembleConfig,
    ScoreVector,
    confidence_score,
    default_alpha,
    detector_score,
    ensemble_confidence,
    ensemble_score,
    train_detector,
    train_detector_embeddings,
)
from attackability.errors import AlignmentError, ConfigError, DegenerateLabelsError, ShapeError
from attackability.nn_core import DenseNetSpec, TrainConfig, VictimModel, encode

from conftest import linear_model

FAST = TrainConfig(batch_size=32, epochs=60, learning_rate=0.5, lr_drop_epochs=(), weight_decay=0.0, shuffle_seed=2)


def sig(z):
    return 1 / (1 + np.exp(-z))


def test_square_hidden_layer_enforced():
    with pytest.raises(ShapeError):
        DetectorModel(np.zeros((3, 4)), np.zeros((1, 3)))
    with pytest.raises(ShapeError):
        DetectorModel(np.zeros((3, 3)), np.zeros((1, 2)))


def test_zero_output_weights_give_one_half(rng):
    det = DetectorModel(rng.normal(size=(5, 5)), np.zeros(5))
    assert_array_equal(det.score_embeddings(rng.normal(size=(9, 5))), np.full(9, 0.5))


def test_hand_set_scalar_detector():
    det = DetectorModel([[2.0]], [[-3.0]])
    h = 0.7
    assert det.score_embeddings([[h]])[0] == pytest.approx(sig(-3.0 * sig(2.0 * h)), rel=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_scores_in_open_unit_interval(seed):
    rng = np.random.default_rng(seed)
    det = DetectorModel(rng.normal(size=(4, 4)) * 3, rng.normal(size=(1, 4)) * 3)
    s = det.score_embeddings(rng.normal(size=(20, 4)) * 10)
    assert np.all((s > 0) & (s < 1))


def test_detector_score_uses_encoder(rng):
    model = VictimModel.build(DenseNetSpec((6, 4, 3), ("relu",), 5), encoder_depth=1)
    det = DetectorModel(rng.normal(size=(4, 4)), rng.normal(size=(1, 4)))
    x = rng.uniform(size=6)
    assert detector_score(det, model, x) == det.score_embeddings(encode(model, x))[0]
    wrong = DetectorModel(np.eye(3), np.ones((1, 3)))
    with pytest.raises(ShapeError):
        detector_score(wrong, model, x)


def test_learns_sign_of_one_coordinate(rng):
    H = rng.normal(size=(400, 6))
    t = H[:, 2] > 0
    det = train_detector_embeddings(H, t, FAST, init_seed=1)
    acc = np.mean((det.score_embeddings(H) > 0.5) == t)
    assert acc >= 0.99


def test_single_class_targets_rejected(rng):
    H = rng.normal(size=(10, 3))
    with pytest.raises(DegenerateLabelsError):
        train_detector_embeddings(H, np.ones(10, bool), FAST)
    with pytest.raises(DegenerateLabelsError):
        train_detector_embeddings(H, np.zeros(10, bool), FAST)


def test_training_leaves_victim_untouched(rng):
    model = VictimModel.build(DenseNetSpec((5, 6, 3), ("relu",), 7), encoder_depth=1)
    before = hashlib.sha256(model.params.tobytes()).hexdigest()
    X = rng.uniform(size=(50, 5))
    cfg = TrainConfig(batch_size=16, epochs=3, learning_rate=0.1, lr_drop_epochs=())
    det = train_detector(model, X, X[:, 0] > 0.5, cfg)
    assert hashlib.sha256(model.params.tobytes()).hexdigest() == before
    assert det.owning_model_id == model.model_id and det.embed_dim == 6


def test_training_is_deterministic(rng):
    H = rng.normal(size=(60, 4))
    t = H[:, 0] > 0
    a = train_detector_embeddings(H, t, FAST, init_seed=3)
    b = train_detector_embeddings(H, t, FAST, init_seed=3)
    assert_array_equal(a.W0, b.W0)
    assert_array_equal(a.W1, b.W1)


def test_scoring_is_pure(rng):
    det = DetectorModel(rng.normal(size=(3, 3)), rng.normal(size=(1, 3)))
    W0 = det.W0.copy()
    H = rng.normal(size=(5, 3))
    assert_array_equal(det.score_embeddings(H), det.score_embeddings(H))
    assert_array_equal(det.W0, W0)


def test_detector_round_trip(tmp_path, rng):
    det = DetectorModel(rng.normal(size=(4, 4)), rng.normal(size=(1, 4)), "vgg", "robust", [0.5, 0.4])
    det.save(tmp_path / "d")
    back = DetectorModel.load(tmp_path / "d")
    assert_array_equal(back.W0, det.W0)
    assert_array_equal(back.W1, det.W1)
    assert (back.owning_model_id, back.polarity, back.history) == ("vgg", "robust", [0.5, 0.4])
    raw = np.fromfile(tmp_path / "d.bin", dtype="<f8")
    assert raw.size == 16 + 4


def sv(values, ids=None):
    return ScoreVector(ids or [f"s{i}" for i in range(len(values))], values)


def test_single_member_alpha_one_is_identity():
    s = sv([0.2, 0.9, 0.5])
    assert_array_equal(ensemble_score([s], EnsembleConfig(1.0)).scores, s.scores)


def test_ensemble_arithmetic():
    out = ensemble_score([sv([0.8]), sv([0.6]), sv([0.4])], EnsembleConfig(4.0))
    assert out.scores[0] == pytest.approx(0.1296, rel=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(1.0, 10.0))
def test_ensemble_bounds(seed, alpha):
    rng = np.random.default_rng(seed)
    members = [sv(rng.uniform(0.01, 1.0, size=12)) for _ in range(3)]
    mean = np.mean([m.scores for m in members], axis=0)
    out = ensemble_score(members, EnsembleConfig(alpha)).scores
    assert np.all(out <= mean)
    assert np.all(np.min([m.scores for m in members], axis=0) <= mean)


@given(st.integers(0, 2**32 - 1), st.floats(1.0, 6.0), st.floats(1.0, 6.0))
def test_alpha_preserves_order(seed, a1, a2):
    rng = np.random.default_rng(seed)
    members = [sv(rng.uniform(0.05, 1.0, size=30)) for _ in range(3)]
    s1 = ensemble_score(members, EnsembleConfig(a1)).scores
    s2 = ensemble_score(members, EnsembleConfig(a2)).scores
    assert_array_equal(np.argsort(s1, kind="stable"), np.argsort(s2, kind="stable"))


def test_alpha_below_one_rejected():
    with pytest.raises(ConfigError):
        EnsembleConfig(0.5)
    assert default_alpha(3) == 4.0


def test_misaligned_members_rejected():
    with pytest.raises(AlignmentError):
        ensemble_score([sv([0.1, 0.2]), sv([0.1, 0.2], ["s0", "x"])], EnsembleConfig())


def test_score_vector_csv(tmp_path):
    s = sv([0.125, 1.0, 0.3])
    s.to_csv(tmp_path / "s.csv")
    back = ScoreVector.from_csv(tmp_path / "s.csv")
    assert back.sample_ids == s.sample_ids
    assert_array_equal(back.scores, s.scores)
    with pytest.raises(ValueError):
        sv([1.5])


def test_confidence_uniform_and_one_hot():
    uniform = linear_model(np.zeros((5, 2)), np.zeros(5))
    assert confidence_score(uniform, np.full((1, 2), 0.5), "attackable")[0] == pytest.approx(0.8)
    sharp = linear_model(np.zeros((3, 2)), np.array([1000.0, 0.0, 0.0]))
    assert confidence_score(sharp, np.full((1, 2), 0.5), "attackable")[0] == 0.0
    assert confidence_score(sharp, np.full((1, 2), 0.5), "robust")[0] == 1.0


def test_conf_u_is_mean_of_seen_models():
    # two-class constant models with max-probs 0.9, 0.5, 0.7
    models = [linear_model(np.zeros((2, 1)), np.array([np.log(p / (1 - p)), 0.0])) for p in (0.9, 0.5, 0.7)]
    x = np.full((1, 1), 0.5)
    assert_allclose(ensemble_confidence(models, x, "robust"), [0.7], rtol=1e-12)
    assert_allclose(ensemble_confidence(models, x, "attackable"), [0.3], rtol=1e-12)
