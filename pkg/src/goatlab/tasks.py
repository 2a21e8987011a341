"""Synthetic fine-tuning tasks small enough to train on a laptop.

``regression``: teacher-student linear regression. The "pretrained" weight
``w0`` has i.i.d. N(0, 1/n) entries and the teacher is ``w0`` plus a
low-rank perturbation; targets carry Gaussian noise.

``clusters``: balanced softmax classification of Gaussian clusters with a
random linear "pretrained" head ``w0`` (one row per class).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .moe import softmax
from .numkit import Matrix, Rng, svd


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    kind: str
    w0: Matrix
    teacher: Matrix  # regression: target weight; clusters: class centres (C x n)
    noise: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.w0.shape

    def sample(self, rng: Rng, T: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``T`` tokens; returns inputs (T x n) and targets."""
        n = self.w0.shape[1]
        g = rng.generator
        if self.kind == "regression":
            X = g.standard_normal((T, n))
            Y = X @ self.teacher.T
            if self.noise:
                Y = Y + self.noise * g.standard_normal(Y.shape)
            return X, Y
        labels = g.integers(0, self.teacher.shape[0], T)
        X = self.teacher[labels] + g.standard_normal((T, n))
        return X, labels

    def loss_grad(self, Y_hat: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean per-token loss and its gradient with respect to ``Y_hat``."""
        T = Y_hat.shape[0]
        if self.kind == "regression":
            diff = Y_hat - target
            return 0.5 * float(np.sum(diff * diff)) / T, diff / T
        p = softmax(Y_hat)
        loss = -float(np.mean(np.log(p[np.arange(T), target] + 1e-300)))
        p[np.arange(T), target] -= 1.0
        return loss, p / T


def make_regression_task(
    m: int,
    n: int,
    rng: Rng,
    teacher_rank: int = 8,
    teacher_scale: float = 1.0,
    noise: float = 0.1,
    teacher: str = "random",
) -> SyntheticTask:
    """Teacher ``w0 + delta`` with ``rank(delta) = teacher_rank``.

    ``teacher="random"`` draws ``delta`` from random Gaussian factors with
    Frobenius norm ``teacher_scale``. ``teacher="spectral"`` instead rescales
    ``teacher_rank`` singular directions of ``w0``, spread evenly over the
    spectrum, by factors ``1 + teacher_scale * N(0, 1)``.
    """
    if not 1 <= teacher_rank <= min(m, n):
        raise DomainError(f"teacher rank must lie in [1, {min(m, n)}], got {teacher_rank}")
    w0 = rng.child("w0").normal((m, n), 1.0 / np.sqrt(n))
    trng = rng.child("teacher")
    if teacher == "random":
        delta = trng.normal((m, teacher_rank)) @ trng.normal((teacher_rank, n))
        delta *= teacher_scale / np.linalg.norm(delta)
    elif teacher == "spectral":
        f = svd(w0)
        idx = np.linspace(0, min(m, n) - 1, teacher_rank).round().astype(int)
        factors = teacher_scale * trng.normal(teacher_rank)
        delta = (f.u[:, idx] * (f.sigma[idx] * factors)) @ f.v[:, idx].T
    else:
        raise DomainError(f"unknown teacher kind {teacher!r}")
    return SyntheticTask(kind="regression", w0=w0, teacher=w0 + delta, noise=noise)


def make_cluster_task(n: int, n_classes: int, rng: Rng, separation: float = 1.0) -> SyntheticTask:
    """Balanced classes whose centres have i.i.d. N(0, separation^2) entries."""
    if n_classes < 2:
        raise DomainError("need at least two classes")
    centres = rng.child("centres").normal((n_classes, n), separation)
    w0 = rng.child("w0").normal((n_classes, n), 1.0 / np.sqrt(n))
    return SyntheticTask(kind="clusters", w0=w0, teacher=centres)
