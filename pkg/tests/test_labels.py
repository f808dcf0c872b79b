import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from gift.labels import (
    LabelError,
    LabelMatrix,
    as_distribution,
    export_csv,
    generate_soft_labels,
    label_accuracy,
    load_labels,
    one_hot,
    refine_labels,
    save_labels,
    smooth_labels,
)
from gift.models import ModelSpec, build_model

probs = arrays(np.float64, (6, 4), elements=st.floats(1e-3, 1.0)).map(lambda a: a / a.sum(axis=1, keepdims=True))


def test_smoothing_examples():
    hard = one_hot(np.array([3]), 10)
    assert_array_equal(smooth_labels(hard, 0.0).values, hard.values)
    assert_allclose(smooth_labels(hard, 1.0).values, np.full((1, 10), 0.1))
    s = smooth_labels(hard, 0.1).values[0]
    assert_allclose(s[3], 0.91)
    assert_allclose(np.delete(s, 3), 0.01)


def test_smoothing_rejects_bad_alpha():
    with pytest.raises(LabelError):
        smooth_labels(one_hot(np.array([0]), 2), 1.5)
    with pytest.raises(LabelError):
        smooth_labels(LabelMatrix(np.array([[0.5, 0.5]]), "soft"), 0.1)


def test_zero_head_teacher_gives_uniform_soft_labels(rng):
    model = build_model(ModelSpec("mlp", (5,), 4, hidden=(8,), seed=0))
    model.params["head.w"][:] = 0.0
    soft = generate_soft_labels(model, rng.standard_normal((7, 5)))
    assert soft.role == "soft"
    assert_allclose(soft.values, 0.25)


def test_two_class_teacher_soft_label_example():
    model = build_model(ModelSpec("mlp", (1,), 2, hidden=(1,), seed=0))
    model.params.update({"fc0.w": np.array([[1.0]]), "fc0.b": np.array([0.0]),
                         "head.w": np.array([[2.0, 0.0]]), "head.b": np.array([0.0, 0.0])})
    soft = generate_soft_labels(model, np.array([[1.0]]))
    assert_allclose(soft.values[0], [0.8808, 0.1192], atol=1e-4)


def test_refine_endpoints_and_worked_example():
    smoothed = np.array([[0.95, 0.05]])
    soft = np.array([[0.6, 0.4]])
    assert_allclose(refine_labels(smoothed, soft, 0.0).values, soft / np.linalg.norm(soft), atol=0)
    assert_allclose(refine_labels(smoothed, soft, 1.0).values, smoothed / np.linalg.norm(smoothed), atol=0)
    assert_allclose(refine_labels(smoothed, soft, 0.1).values[0], [0.8487, 0.5045], atol=1e-4)


def test_refine_zero_row_names_row():
    with pytest.raises(LabelError, match="row 1"):
        refine_labels(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[0.5, 0.5], [0.5, 0.5]]), 0.1)
    with pytest.raises(LabelError):
        refine_labels(np.ones((2, 2)), np.ones((3, 2)), 0.1)
    with pytest.raises(LabelError):
        refine_labels(np.ones((2, 2)), np.ones((2, 2)), -0.1)


def test_label_accuracy_examples():
    hard = one_hot(np.array([0, 1]), 2)
    assert label_accuracy(hard, hard) == 1.0
    assert label_accuracy(1.0 - hard.values, hard) == 0.0
    assert label_accuracy(np.array([[0.6, 0.4], [0.3, 0.7]]), one_hot(np.array([0, 0]), 2)) == 0.5
    with pytest.raises(LabelError):
        label_accuracy(np.zeros((0, 2)), np.zeros((0, 2)))


def test_validate_roles():
    one_hot(np.array([0, 2]), 3).validate()
    with pytest.raises(LabelError):
        LabelMatrix(np.array([[0.5, 0.6]]), "soft").validate()
    with pytest.raises(LabelError):
        LabelMatrix(np.array([[0.5, 0.5]]), "hard").validate()
    with pytest.raises(LabelError):
        LabelMatrix(np.ones(3), "soft")
    with pytest.raises(LabelError):
        LabelMatrix(np.ones((1, 3)), "teacher")


def test_roundtrip_binary(tmp_path, rng):
    labels = refine_labels(smooth_labels(one_hot(rng.integers(0, 5, 9), 5), 0.1), rng.dirichlet(np.ones(5), 9), 0.1)
    path = save_labels(labels, tmp_path / "r.glbl")
    back = load_labels(path)
    assert back.role == "refined"
    assert_array_equal(back.values, labels.values)
    raw = path.read_bytes()
    assert raw[:4] == b"GLBL"


def test_binary_errors(tmp_path):
    path = save_labels(one_hot(np.array([0, 1]), 2), tmp_path / "h.glbl")
    raw = path.read_bytes()
    (tmp_path / "bad.glbl").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(LabelError, match="bad magic"):
        load_labels(tmp_path / "bad.glbl")
    (tmp_path / "short.glbl").write_bytes(raw[:-3])
    with pytest.raises(LabelError, match="expected"):
        load_labels(tmp_path / "short.glbl")
    (tmp_path / "tiny.glbl").write_bytes(raw[:5])
    with pytest.raises(LabelError, match="truncated"):
        load_labels(tmp_path / "tiny.glbl")


def test_export_csv(tmp_path):
    path = export_csv(smooth_labels(one_hot(np.array([1]), 3), 0.3), tmp_path, "train")
    assert path.name == "train_smoothed.csv"
    lines = path.read_text().splitlines()
    assert lines[0] == "index,c0,c1,c2"
    assert_allclose([float(x) for x in lines[1].split(",")[1:]], [0.1, 0.8, 0.1])


# -- properties --------------------------------------------------------------


@given(st.lists(st.integers(0, 4), min_size=1, max_size=20), st.floats(0, 1))
def test_smoothing_rows_are_distributions(classes, alpha):
    s = smooth_labels(one_hot(np.array(classes), 5), alpha)
    s.validate()
    if alpha < 1:
        assert_array_equal(s.classes(), classes)


@given(probs, probs, st.floats(0, 1))
def test_refined_norm_bounded(a, b, gamma):
    r = refine_labels(a, b, gamma)
    norms = np.linalg.norm(r.values, axis=1)
    assert np.all(norms <= 1 + 1e-12)
    assert np.all(norms > 0)
    r.validate()


@given(probs, probs, st.floats(0.01, 100))
def test_refine_invariant_to_row_scaling(a, b, c):
    assert_allclose(refine_labels(a * c, b, 0.3).values, refine_labels(a, b / c, 0.3).values, atol=1e-12)


@given(probs)
def test_as_distribution_rescales(p):
    r = refine_labels(p, p, 0.5)
    assert_allclose(as_distribution(r), p, atol=1e-12)


def test_argmax_flip_criterion_brute_force():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        c = int(rng.integers(2, 12))
        true = int(rng.integers(c))
        soft = rng.dirichlet(np.full(c, 0.5))
        gamma = float(rng.uniform())
        smoothed = smooth_labels(one_hot(np.array([true]), c), 0.1).values[0]
        refined = refine_labels(smoothed[None], soft[None], gamma).values[0]
        y_hat = smoothed / np.linalg.norm(smoothed)
        s_hat = soft / np.linalg.norm(soft)
        top = int(np.argmax(soft))
        lhs = refined[true] > refined[top]
        rhs = gamma * (y_hat[true] - y_hat[top]) > (1 - gamma) * (s_hat[top] - s_hat[true])
        mismatches += lhs != rhs
    assert mismatches == 0


def test_refined_accuracy_monotone_in_gamma():
    rng = np.random.default_rng(3)
    n, c = 200, 10
    true = rng.integers(0, c, n)
    soft = np.full((n, c), 0.05)
    wrong = rng.random(n) < 0.3
    target = np.where(wrong, (true + 1 + rng.integers(0, c - 1, n)) % c, true)
    soft[np.arange(n), target] += 0.3
    soft[np.arange(n), true] += 0.2 * wrong
    soft /= soft.sum(axis=1, keepdims=True)
    hard = one_hot(true, c)
    smoothed = smooth_labels(hard, 0.1)
    accs = [label_accuracy(refine_labels(smoothed, soft, g), hard) for g in np.linspace(0, 1, 11)]
    assert accs[0] == pytest.approx(1 - wrong.mean())
    assert all(b >= a for a, b in zip(accs, accs[1:]))
    assert accs[-1] == 1.0
