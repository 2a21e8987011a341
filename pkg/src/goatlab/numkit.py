"""Dense linear algebra and seeded randomness used by every other module.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD is a one-sided
(Hestenes) Jacobi iteration with round-robin pair ordering, so that all
disjoint column pairs of a round are rotated in a single vectorised step.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import DomainError, NumericError, ShapeError

Matrix = np.ndarray

SVD_MAX_SWEEPS = 100
SVD_TOL = 1e-12


def as_matrix(x) -> Matrix:
    """Coerce ``x`` to a C-contiguous 2-D float64 array (copying)."""
    m = np.array(x, dtype=np.float64, copy=True, order="C")
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{what} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return check_finite(a @ b, "product")


# --------------------------------------------------------------------------
# randomness


def _stream_key(name: str | int) -> int:
    if isinstance(name, int):
        return name
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """Seeded PCG64 generator with named, independent sub-streams.

    ``Rng(7).child("router")`` always yields the same stream, regardless of
    what was drawn from the parent. PCG64 output is platform independent.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise DomainError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str | int) -> "Rng":
        return Rng(self.seed, self.key + (_stream_key(name),))

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size)

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"


def kaiming_uniform(
    rng: Rng, rows: int, cols: int, fan_in: int, negative_slope: float = np.sqrt(5.0)
) -> Matrix:
    """Kaiming-uniform draw with bound ``sqrt(6 / ((1 + a^2) * fan_in))``.

    The default slope ``a = sqrt(5)`` gives the bound ``1/sqrt(fan_in)`` and
    variance ``1 / (3 * fan_in)``; ``a = 0`` gives ``sqrt(6 / fan_in)``.
    """
    if fan_in < 1:
        raise DomainError(f"fan_in must be >= 1, got {fan_in}")
    bound = np.sqrt(6.0 / ((1.0 + negative_slope**2) * fan_in))
    return rng.uniform(-bound, bound, (rows, cols))


# --------------------------------------------------------------------------
# SVD


@dataclass(frozen=True, eq=False)
class SvdFactors:
    """Thin SVD ``w = u @ diag(sigma) @ v.T`` with ``sigma`` descending."""

    u: Matrix
    sigma: np.ndarray
    v: Matrix

    def reconstruct(self) -> Matrix:
        return (self.u * self.sigma) @ self.v.T

    def truncate(self, r: int) -> Matrix:
        return (self.u[:, :r] * self.sigma[:r]) @ self.v[:, :r].T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings of a round-robin tournament; index ``n`` (odd case) is a bye."""
    players = list(range(n + (n % 2)))
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p < n and q < n:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=int), np.array(qs, dtype=int)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_orthonormal(q: Matrix, good: np.ndarray) -> Matrix:
    """Replace columns not flagged ``good`` with an orthonormal completion."""
    rows = q.shape[0]
    basis = [q[:, j] for j in np.flatnonzero(good)]
    out = q.copy()
    candidate = 0
    for j in np.flatnonzero(~good):
        while True:
            e = np.zeros(rows)
            e[candidate % rows] = 1.0
            candidate += 1
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 0.5:
                break
        e /= nrm
        basis.append(e)
        out[:, j] = e
    return out


def _one_sided_jacobi(a: Matrix) -> tuple[Matrix, np.ndarray, Matrix]:
    rows, cols = a.shape
    g = a.copy()
    v = np.eye(cols)
    rounds = _round_robin(cols) if cols > 1 else []
    converged = cols <= 1
    for _sweep in range(SVD_MAX_SWEEPS):
        if converged:
            break
        rotated = False
        for p, q in rounds:
            gp, gq = g[:, p], g[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            active = np.abs(gamma) > SVD_TOL * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (g, v):
                mp, mq = mat[:, p].copy(), mat[:, q]
                mat[:, p] = c * mp - s * mq
                mat[:, q] = s * mp + c * mq
        converged = not rotated
    if not converged:
        resid = np.linalg.norm(g.T @ g - np.diag(np.einsum("ij,ij->j", g, g)))
        raise NumericError(
            f"Jacobi SVD did not converge in {SVD_MAX_SWEEPS} sweeps; "
            f"off-diagonal Gram residual {resid:.3e}"
        )
    sigma = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma, g, v = sigma[order], g[:, order], v[:, order]
    thresh = max(rows, cols) * np.finfo(float).eps * (sigma[0] if sigma.size else 0.0)
    good = sigma > thresh
    q = np.zeros_like(g)
    q[:, good] = g[:, good] / sigma[good]
    if not good.all():
        q = _complete_orthonormal(q, good)
    return q, sigma, v


def _first_significant_sign(col: np.ndarray) -> float:
    big = np.abs(col) > 1e-8 * np.max(np.abs(col))
    return -1.0 if col[np.argmax(big)] < 0 else 1.0


def svd(w: Matrix) -> SvdFactors:
    """Thin SVD by one-sided Jacobi.

    Singular values are returned in descending order (ties keep the sweep's
    order) and each column of ``u`` is flipped so that its first significant
    entry is non-negative, with the matching ``v`` column flipped alongside.
    """
    w = as_matrix(w)
    if w.size == 0:
        raise DomainError("svd of an empty matrix")
    check_finite(w, "svd input")
    m, n = w.shape
    if m >= n:
        u, sigma, v = _one_sided_jacobi(w)
    else:
        v, sigma, u = _one_sided_jacobi(w.T)
    signs = np.array([_first_significant_sign(u[:, j]) for j in range(u.shape[1])])
    return SvdFactors(u=u * signs, sigma=sigma, v=v * signs)


# --------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f: Callable[[Matrix], float], x: Matrix, h: float = 1e-5) -> Matrix:
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    if h <= 0:
        raise DomainError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value near index {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


# --------------------------------------------------------------------------
# text format


def format_matrix(m: Matrix) -> str:
    m = as_matrix(m)
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines += [" ".join(format(v, ".17g") for v in row) for row in m]
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> Matrix:
    tokens = text.split()
    if len(tokens) < 2:
        raise ShapeError("matrix text is missing its 'rows cols' header")
    rows, cols = int(tokens[0]), int(tokens[1])
    values = tokens[2:]
    if len(values) != rows * cols:
        raise ShapeError(f"header says {rows}x{cols} but found {len(values)} values")
    return check_finite(np.array(values, dtype=np.float64).reshape(rows, cols))


def write_matrix(path: str | Path, m: Matrix) -> None:
    Path(path).write_text(format_matrix(m))


def read_matrix(path: str | Path) -> Matrix:
    return parse_matrix(Path(path).read_text())
