import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose

from gift.labels import one_hot
from gift.theory import (
    CSV_COLUMNS,
    BoundError,
    check_bound,
    gradient_norm,
    infonce_loss,
    orthogonality_stats,
    random_bound_trials,
    write_bound_csv,
)

pairs = st.integers(2, 8).flatmap(
    lambda k: st.tuples(
        arrays(np.float64, (k, 4), elements=st.floats(-3, 3)),
        arrays(np.float64, (k, 4), elements=st.floats(-3, 3)),
    )
).filter(lambda zy: np.all(np.linalg.norm(zy[0], axis=1) > 1e-2) and np.all(np.linalg.norm(zy[1], axis=1) > 1e-2))


def test_infonce_examples(rng):
    z = rng.standard_normal((1, 5))
    assert infonce_loss(z, rng.standard_normal((1, 5)), 0.5) == 0.0
    eye = np.eye(3)
    assert infonce_loss(eye, eye, 1.0) == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
    assert infonce_loss(eye, eye, 1.0) == pytest.approx(0.5514, abs=1e-4)


def test_infonce_negative_permutation_invariance(rng):
    z, y = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
    base = infonce_loss(z, y, 0.5)
    # permuting pairs jointly permutes the negatives of every anchor
    perm = rng.permutation(6)
    assert infonce_loss(z[perm], y[perm], 0.5) == pytest.approx(base, abs=1e-12)


def test_errors():
    with pytest.raises(BoundError):
        infonce_loss(np.zeros((2, 3)), np.ones((2, 3)), 1.0)
    with pytest.raises(BoundError):
        infonce_loss(np.ones((2, 3)), np.ones((2, 3)), 0.0)
    with pytest.raises(BoundError):
        check_bound(np.ones((2, 3)), np.ones((3, 3)), 1.0)
    with pytest.raises(BoundError):
        orthogonality_stats(np.ones((1, 3)))


def test_bound_examples(rng):
    k, tau = 5, 0.5
    eye = np.eye(k)
    r = check_bound(eye, eye, tau)
    assert r.approx_bound == pytest.approx(-1 / tau + math.log(k), abs=1e-12)
    one = check_bound(rng.standard_normal((1, 3)), rng.standard_normal((1, 3)), 0.7)
    assert abs(one.infonce) < 1e-12 and abs(one.jensen_bound) < 1e-12


def test_jensen_sweep_and_csv(tmp_path):
    reports = list(random_bound_trials(300, seed=1))
    assert min(r.gap_jensen for r in reports) >= -1e-9
    path = write_bound_csv(reports, tmp_path / "bounds.csv")
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS)
    assert len(lines) == 301


def test_orthogonality_examples(rng):
    assert orthogonality_stats(one_hot(np.arange(4), 4)) == (0.0, 0.0)
    m, x = orthogonality_stats(np.tile(rng.random((1, 5)) + 0.1, (3, 1)))
    assert m == pytest.approx(1.0) and x == pytest.approx(1.0)


def test_gradient_norm_examples(rng):
    assert gradient_norm({"a": np.zeros((2, 2))}) == 0.0
    assert gradient_norm({"a": np.array([3.0, 4.0])}) == 5.0
    a, b = rng.standard_normal((2, 3)), rng.standard_normal(4)
    assert gradient_norm({"a": a, "b": b}) == pytest.approx(np.linalg.norm(np.concatenate([a.ravel(), b])))


@given(pairs, st.sampled_from([0.1, 0.5, 1.0]))
def test_jensen_never_violated(zy, tau):
    r = check_bound(*zy, tau)
    assert r.gap_jensen >= -1e-9
    assert all(math.isfinite(v) for v in r.row().values())


@given(pairs, st.floats(0.01, 100), st.integers(0, 7))
def test_infonce_row_rescaling_invariance(zy, c, row):
    z, y = zy
    row %= z.shape[0]
    z2 = z.copy()
    z2[row] *= c
    y2 = y.copy()
    y2[row] *= c
    assert abs(infonce_loss(z2, y2, 0.5) - infonce_loss(z, y, 0.5)) < 1e-12
