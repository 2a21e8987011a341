import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goatlab.errors import DomainError, NumericError, ShapeError
from goatlab.numkit import (
    Rng,
    finite_diff_grad,
    format_matrix,
    kaiming_uniform,
    matmul,
    parse_matrix,
    read_matrix,
    svd,
    write_matrix,
)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for p in range(a.shape[1]):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_hand_values():
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])
    m = Rng(0).normal((3, 4))
    assert np.allclose(matmul(np.eye(3), m), m)


def test_matmul_matches_triple_loop():
    rng = Rng(1)
    a, b = rng.normal((5, 7)), rng.normal((7, 3))
    assert np.allclose(matmul(a, b), naive_matmul(a, b), atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_svd_identity_and_diagonal():
    f = svd(np.eye(3))
    assert np.allclose(f.sigma, [1, 1, 1])
    f = svd(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(f.sigma, [3, 2, 1])
    assert np.allclose(np.abs(f.u), np.eye(3))
    assert np.allclose(np.abs(f.v), np.eye(3))


@pytest.mark.parametrize("shape", [(8, 8), (12, 5), (5, 12), (1, 6), (6, 1), (30, 20)])
def test_svd_against_gram_eigenvalues(shape):
    w = Rng(sum(shape)).normal(shape)
    f = svd(w)
    h = min(shape)
    gram = w.T @ w if shape[0] >= shape[1] else w @ w.T
    oracle = np.sqrt(np.clip(np.sort(np.linalg.eigvalsh(gram))[::-1][:h], 0, None))
    assert np.allclose(f.sigma, oracle, atol=1e-10)
    assert np.allclose(f.reconstruct(), w, atol=1e-11)
    assert np.allclose(f.u.T @ f.u, np.eye(h), atol=1e-11)
    assert np.allclose(f.v.T @ f.v, np.eye(h), atol=1e-11)
    assert np.all(np.diff(f.sigma) <= 1e-12)


def test_svd_sign_convention():
    f = svd(Rng(4).normal((7, 5)))
    for j in range(5):
        col = f.u[:, j]
        first = col[np.argmax(np.abs(col) > 1e-8 * np.abs(col).max())]
        assert first > 0


def test_svd_rank_deficient_completes_orthonormal_basis():
    rng = Rng(5)
    w = rng.normal((9, 2)) @ rng.normal((2, 6))
    f = svd(w)
    assert np.allclose(f.sigma[2:], 0, atol=1e-10)
    assert np.allclose(f.u.T @ f.u, np.eye(6), atol=1e-10)
    assert np.allclose(f.reconstruct(), w, atol=1e-10)
    assert np.allclose(f.truncate(2), w, atol=1e-10)


def test_svd_zero_matrix():
    f = svd(np.zeros((3, 3)))
    assert np.allclose(f.sigma, 0)
    assert np.allclose(f.u.T @ f.u, np.eye(3))


def test_svd_rejects_non_finite_and_empty():
    with pytest.raises(NumericError):
        svd(np.array([[1.0, np.nan]]))
    with pytest.raises(DomainError):
        svd(np.zeros((0, 3)))


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 10), n=st.integers(1, 10), seed=st.integers(0, 2**32 - 1))
def test_svd_reconstructs_random_matrices(m, n, seed):
    w = Rng(seed).normal((m, n))
    f = svd(w)
    assert np.allclose(f.reconstruct(), w, atol=1e-10)
    assert np.allclose(f.sigma, np.linalg.svd(w, compute_uv=False), atol=1e-10)


def test_rng_determinism_and_children():
    assert np.array_equal(Rng(7).normal(5), Rng(7).normal(5))
    parent = Rng(7)
    parent.normal(100)
    assert np.array_equal(parent.child("router").normal(4), Rng(7).child("router").normal(4))
    assert not np.array_equal(Rng(7).child("a").normal(4), Rng(7).child("b").normal(4))
    with pytest.raises(DomainError):
        Rng(-1)


def test_kaiming_bounds_and_determinism():
    m = kaiming_uniform(Rng(0), 50, 6, fan_in=6)
    assert m.min() >= -1 and m.max() <= 1
    assert np.array_equal(m, kaiming_uniform(Rng(0), 50, 6, fan_in=6))
    with pytest.raises(DomainError):
        kaiming_uniform(Rng(0), 2, 2, fan_in=0)


def test_kaiming_variance():
    n = 64
    x = kaiming_uniform(Rng(3), 100_000 // n + 1, n, fan_in=n).ravel()[:100_000]
    assert abs(x.var() - 1 / (3 * n)) <= 0.03 / (3 * n)


def test_kaiming_relu_slope_bound():
    m = kaiming_uniform(Rng(0), 200, 10, fan_in=10, negative_slope=0.0)
    assert np.abs(m).max() <= np.sqrt(6 / 10)
    assert np.abs(m).max() > 0.9 * np.sqrt(6 / 10)


def test_finite_diff_quadratic_and_linear():
    rng = Rng(2)
    x = rng.normal((3, 4))
    assert np.allclose(finite_diff_grad(lambda z: float(np.sum(z * z)), x), 2 * x, atol=1e-8)
    a = rng.normal((4, 3))
    assert np.allclose(finite_diff_grad(lambda z: float(np.trace(a @ z)), x), a.T, atol=1e-9)


def test_finite_diff_non_finite():
    with pytest.raises(NumericError):
        finite_diff_grad(lambda z: float("inf"), np.zeros((1, 1)))
    with pytest.raises(DomainError):
        finite_diff_grad(lambda z: 0.0, np.zeros((1, 1)), h=0)


def test_matrix_text_roundtrip(tmp_path):
    m = Rng(9).normal((3, 5))
    assert np.array_equal(parse_matrix(format_matrix(m)), m)
    write_matrix(tmp_path / "m.txt", m)
    assert np.array_equal(read_matrix(tmp_path / "m.txt"), m)
    with pytest.raises(ShapeError):
        parse_matrix("2 2\n1 2 3")
