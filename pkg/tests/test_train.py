import csv

import numpy as np
import pytest

from cxr_severity.data.manifest import Manifest, SampleRecord
from cxr_severity.data.pgm import to_raster, write_pgm
from cxr_severity.errors import ConfigurationError, EvaluationError, TrainingError
from cxr_severity.layers import LayerSpec
from cxr_severity.model import NetworkSpec, PEPEBlockSpec, build_network
from cxr_severity.train import (AdamState, ConfusionMatrix, ImageStore, TrainConfig, adam_step,
                                evaluate, format_confusion, format_metrics, metrics_from_confusion,
                                train, write_history)

from oracles import ReferenceAdam


# -- config --------------------------------------------------------------------


def test_default_training_config():
    c = TrainConfig()
    assert (c.learning_rate, c.epochs, c.batch_size) == (0.0001, 137, 50)
    assert (c.adam_beta1, c.adam_beta2, c.adam_eps) == (0.9, 0.999, 1e-7)


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"epochs": 0}, {"batch_size": 51}])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kwargs)


# -- Adam ----------------------------------------------------------------------


def test_adam_first_step_hand_computed():
    lr, eps, g = 0.001, 1e-7, -0.3
    p, _ = adam_step({"w": np.array([2.0])}, {"w": np.array([g])}, AdamState(), lr, eps=eps)
    # t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    assert p["w"][0] == pytest.approx(2.0 - lr * g / (abs(g) + eps), rel=1e-15)
    assert p["w"][0] == pytest.approx(2.0 + lr, rel=1e-6)


def test_adam_zero_gradient_zero_state():
    w = np.array([1.5, -2.0])
    p, s = adam_step({"w": w}, {"w": np.zeros(2)}, AdamState())
    assert np.array_equal(p["w"], w)
    assert s.t == 1


def test_adam_matches_reference_for_100_steps():
    rng = np.random.default_rng(0)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5)}
    ref = ReferenceAdam(0.01)
    ref_params = {k: v.copy() for k, v in params.items()}
    state = AdamState()
    for _ in range(100):
        grads = {k: rng.normal(size=v.shape) * rng.uniform(0.01, 10) for k, v in params.items()}
        params, state = adam_step(params, grads, state, 0.01)
        ref_params = ref.step(ref_params, grads)
        for k in params:
            rel = np.abs(params[k] - ref_params[k]) / np.maximum(np.abs(ref_params[k]), 1e-300)
            assert rel.max() < 1e-10


def test_adam_lr_zero_is_identity():
    rng = np.random.default_rng(1)
    params = {"w": rng.normal(size=(4, 4))}
    state = AdamState()
    for _ in range(10):
        new, state = adam_step(params, {"w": rng.normal(size=(4, 4))}, state, 0.0)
        assert new["w"].tobytes() == params["w"].tobytes()


def test_adam_non_finite_gradient_names_parameter():
    with pytest.raises(TrainingError, match="head.dense.weight"):
        adam_step({"head.dense.weight": np.zeros(2)}, {"head.dense.weight": np.array([1, np.nan])},
                  AdamState())


def test_adam_preserves_dtype():
    p, _ = adam_step({"w": np.ones(3, np.float32)}, {"w": np.ones(3, np.float32)}, AdamState())
    assert p["w"].dtype == np.float32


# -- metrics -------------------------------------------------------------------


def test_metrics_from_reference_confusion():
    r = metrics_from_confusion(ConfusionMatrix([[48, 4], [7, 91]]))
    assert r.sensitivity[1] == 48 / 52 and r.sensitivity[2] == 91 / 98
    assert r.ppv[1] == 48 / 55 and r.ppv[2] == 91 / 95
    assert r.accuracy == 139 / 150
    for got, reported in [(r.sensitivity[1], 92.3), (r.sensitivity[2], 92.85),
                          (r.ppv[1], 87.27), (r.ppv[2], 95.78), (r.accuracy, 92.66)]:
        assert abs(100 * got - reported) <= 0.05


def test_diagonal_metrics_are_one():
    r = metrics_from_confusion(ConfusionMatrix([[7, 0], [0, 3]]))
    assert r.sensitivity == {1: 1.0, 2: 1.0} and r.ppv == {1: 1.0, 2: 1.0} and r.accuracy == 1.0


def test_undefined_ppv_is_marked():
    r = metrics_from_confusion(ConfusionMatrix([[0, 5], [0, 5]]))
    assert r.sensitivity[1] == 0 and r.ppv[1] is None
    assert "n/a" in format_metrics(r)


def test_empty_confusion_rejected():
    with pytest.raises(EvaluationError):
        metrics_from_confusion(ConfusionMatrix())


def test_accuracy_is_weighted_mean_of_sensitivities():
    rng = np.random.default_rng(2)
    for _ in range(50):
        c = rng.integers(1, 50, (2, 2))
        r = metrics_from_confusion(ConfusionMatrix(c))
        rows = c.sum(axis=1)
        weighted = (r.sensitivity[1] * rows[0] + r.sensitivity[2] * rows[1]) / c.sum()
        assert abs(weighted - r.accuracy) < 1e-15


def test_confusion_merge_is_associative():
    a, b = ConfusionMatrix([[1, 2], [3, 4]]), ConfusionMatrix([[5, 0], [1, 1]])
    assert (a + b).tolist() == (b + a).tolist() == [[6, 2], [4, 5]]
    assert "Level 1    6" in format_confusion(a + b)


# -- evaluate ------------------------------------------------------------------


def _const_manifest(n1, n2, size=8):
    recs = [SampleRecord(f"l1_{i}", f"A{i}", 1, "test") for i in range(n1)]
    recs += [SampleRecord(f"l2_{i}", f"B{i}", 4, "test") for i in range(n2)]
    m = Manifest(recs)
    store = ImageStore(m, size)
    for r in recs:
        store.put(r.image_path, np.full((1, size, size), 0.2 if r.level == 1 else 0.8))
    return m, store


def test_evaluate_perfect_and_constant_classifiers():
    m, store = _const_manifest(10, 10)

    def perfect(batch):
        p2 = (batch.mean(axis=(1, 2, 3)) > 0.5).astype(float)
        return np.stack([1 - p2, p2], axis=1)

    assert evaluate(perfect, m, "test", store).tolist() == [[10, 0], [0, 10]]
    m, store = _const_manifest(5, 5)
    always2 = lambda batch: np.tile([0.1, 0.9], (len(batch), 1))  # noqa: E731
    cm = evaluate(always2, m, "test", store, chunk=3)
    assert cm.tolist() == [[0, 5], [0, 5]] and cm.total == 10
    with pytest.raises(EvaluationError):
        evaluate(always2, m, "train", store)


# -- training ------------------------------------------------------------------


def separable_dataset(root, n, size=16, seed=0):
    """Two features rendered as the brightness of the left and right halves;
    Level 2 iff their sum exceeds 1 (a linear rule on pooled intensity)."""
    rng = np.random.default_rng(seed)
    (root / "img").mkdir(parents=True, exist_ok=True)
    recs = []
    i = 0
    while len(recs) < n:
        f = rng.uniform(0.05, 0.95, 2)
        if abs(f.sum() - 1) < 0.2:
            continue
        img = np.empty((size, size))
        img[:, : size // 2] = f[0]
        img[:, size // 2:] = f[1]
        rel = f"img/{i}.pgm"
        write_pgm(root / rel, to_raster(img), 255)
        recs.append(SampleRecord(rel, f"P{i}", 4 if f.sum() > 1 else 1, "train"))
        i += 1
    return Manifest(recs, root)


def small_spec():
    return NetworkSpec(LayerSpec("conv2d", 1, 4, (3, 3), 2, 1), ((PEPEBlockSpec(4, 4),),), (), 8)


def test_separable_toy_reaches_full_train_accuracy(tmp_path):
    m = separable_dataset(tmp_path, 60)
    cfg = TrainConfig(learning_rate=0.003, epochs=50, batch_size=10, image_size=16, augment=False)
    _, hist = train(cfg, m, build_network(small_spec(), (1, 16, 16)))
    assert all(np.isfinite(h["mean_loss"]) for h in hist)
    assert max(h["train_accuracy"] for h in hist) == 1.0


def test_training_is_bit_deterministic(tmp_path):
    m = separable_dataset(tmp_path, 20)
    cfg = TrainConfig(learning_rate=0.01, epochs=2, batch_size=4, image_size=16)
    g1, h1 = train(cfg, m, build_network(small_spec(), (1, 16, 16)))
    g2, h2 = train(cfg, m, build_network(small_spec(), (1, 16, 16)))
    assert h1 == h2
    assert all(g1.params[k].tobytes() == g2.params[k].tobytes() for k in g1.params)


def test_train_rejects_size_mismatch(tmp_path):
    m = separable_dataset(tmp_path, 4)
    cfg = TrainConfig(epochs=1, batch_size=2, image_size=16)
    with pytest.raises(ConfigurationError):
        train(cfg, m, build_network(small_spec(), (1, 32, 32)))


def test_write_history(tmp_path):
    write_history([{"epoch": 1, "mean_loss": 0.5, "train_accuracy": 0.25}], tmp_path / "h.csv")
    rows = list(csv.reader((tmp_path / "h.csv").open()))
    assert rows == [["epoch", "mean_loss", "train_accuracy"], ["1", "0.5", "0.25"]]
