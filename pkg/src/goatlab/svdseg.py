"""Singular-spectrum segments and the expert factors built from them.

A weight ``W0 = U S V^T`` is cut into contiguous bands of singular triples.
Each band seeds one low-rank pair ``(b, a)`` with
``b = U' S'^(1/2) / sqrt(s*rho)`` and ``a = S'^(1/2) V'^T / sqrt(s*rho)``,
so that ``s * b @ a`` is the band divided by ``rho`` whatever ``s`` is.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError
from .numkit import Matrix, Rng, SvdFactors, as_matrix, svd


class Strategy(str, Enum):
    """Where each expert's band sits in the spectrum."""

    OURS = "O"  # evenly spread over the whole spectrum
    PRINCIPAL = "P"  # packed at the top
    MINOR = "M"  # packed at the bottom
    RANDOM = "R"  # random cells of a width-d grid

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        if isinstance(value, Strategy):
            return value
        aliases = {"ours": "O", "principal": "P", "minor": "M", "random": "R"}
        key = aliases.get(str(value).lower(), str(value).upper())
        try:
            return cls(key)
        except ValueError:
            raise DomainError(f"unknown strategy {value!r}; expected one of O, P, M, R") from None


@dataclass(frozen=True)
class SegmentSpec:
    start: int
    width: int
    strategy: Strategy
    expert_index: int  # 1-based

    @property
    def stop(self) -> int:
        return self.start + self.width


@dataclass(frozen=True, eq=False)
class ExpertPair:
    """One expert: ``b`` (m x d), ``a`` (d x n), its scale and where it came from.

    ``source`` is ``None`` for zero-initialised (MoLoRA-style) experts.
    """

    b: Matrix
    a: Matrix
    scale: float
    source: SegmentSpec | None = None

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def product(self) -> Matrix:
        return self.b @ self.a

    def delta(self) -> Matrix:
        """The scaled adapter ``scale * b @ a``."""
        return self.scale * (self.b @ self.a)


@dataclass(frozen=True, eq=False)
class BlockDecomposition:
    factors: SvdFactors
    r: int

    @property
    def bounds(self) -> list[tuple[int, int]]:
        h = self.factors.sigma.size
        return [(i, min(i + self.r, h)) for i in range(0, h, self.r)]

    def block(self, i: int) -> Matrix:
        lo, hi = self.bounds[i]
        f = self.factors
        return (f.u[:, lo:hi] * f.sigma[lo:hi]) @ f.v[:, lo:hi].T

    def block_norm(self, i: int) -> float:
        lo, hi = self.bounds[i]
        return float(np.sqrt(np.sum(self.factors.sigma[lo:hi] ** 2)))

    def __len__(self) -> int:
        return len(self.bounds)

    def reconstruct(self) -> Matrix:
        return sum(self.block(i) for i in range(len(self)))


def _spectrum_size(w: Matrix) -> int:
    return min(w.shape)


def block_decompose(w0: Matrix, r: int) -> BlockDecomposition:
    """Split ``w0`` into rank-``r`` blocks of consecutive singular triples.

    When ``r`` does not divide ``min(m, n)`` the last block is narrower.
    """
    w0 = as_matrix(w0)
    h = _spectrum_size(w0)
    if not 1 <= r <= h:
        raise DomainError(f"block rank must lie in [1, {h}], got {r}")
    return BlockDecomposition(factors=svd(w0), r=r)


def best_rank_r_block(decomp: BlockDecomposition, w0: Matrix | None = None) -> int:
    """Index of the block that best approximates ``W0`` (always 0).

    The claim is checked, not assumed: residuals of every block are compared
    and an ``AssertionError`` is raised if some later block does better.
    """
    if len(decomp) == 0:
        raise DomainError("empty decomposition")
    if w0 is None:
        w0 = decomp.factors.reconstruct()
    residuals = [np.linalg.norm(w0 - decomp.block(i)) for i in range(len(decomp))]
    best = residuals[0]
    for i, res in enumerate(residuals):
        # tolerance covers degenerate spectra where blocks tie exactly
        assert best <= res + 1e-12 * max(1.0, best), f"block {i} beats block 0"
    return 0


def make_segments(m: int, n: int, E: int, r: int, strategy, rng: Rng | None = None) -> list[SegmentSpec]:
    """Place ``E`` disjoint bands of width ``d = r/E`` in a spectrum of size ``min(m, n)``.

    Random placement draws grid cells without replacement, so bands never
    overlap (the formula it follows would otherwise allow collisions).
    """
    strategy = Strategy.parse(strategy)
    h = min(m, n)
    if E < 1:
        raise DomainError(f"need at least one expert, got E={E}")
    if r < 1 or r % E:
        raise DomainError(f"total rank r={r} must be a positive multiple of E={E}")
    d = r // E
    t = h // E
    if d > t:
        raise DomainError(f"expert rank d={d} exceeds the per-expert spectrum share t={t}")
    if strategy is Strategy.OURS:
        starts = [(j - 1) * t for j in range(1, E + 1)]
    elif strategy is Strategy.PRINCIPAL:
        starts = [(j - 1) * d for j in range(1, E + 1)]
    elif strategy is Strategy.MINOR:
        starts = [h - j * d for j in range(1, E + 1)]
    else:
        if rng is None:
            raise DomainError("random strategy needs an rng")
        cells = h // d
        picks = rng.child("segments").permutation(cells)[:E]
        starts = [int(c) * d for c in picks]
    return [SegmentSpec(start=int(k), width=d, strategy=strategy, expert_index=j + 1) for j, k in enumerate(starts)]


def build_expert(factors: SvdFactors, spec: SegmentSpec, s: float, rho: float) -> ExpertPair:
    if s <= 0 or rho <= 0:
        raise DomainError(f"scale and damping must be positive, got s={s}, rho={rho}")
    h = factors.sigma.size
    if spec.start < 0 or spec.stop > h:
        raise DomainError(f"segment [{spec.start}, {spec.stop}) outside spectrum of size {h}")
    sl = slice(spec.start, spec.stop)
    root = np.sqrt(factors.sigma[sl])
    damp = np.sqrt(1.0 / (s * rho))
    b = damp * factors.u[:, sl] * root
    a = damp * root[:, None] * factors.v[:, sl].T
    return ExpertPair(b=b, a=a, scale=float(s), source=spec)


def segment_matrix(factors: SvdFactors, spec: SegmentSpec) -> Matrix:
    sl = slice(spec.start, spec.stop)
    return (factors.u[:, sl] * factors.sigma[sl]) @ factors.v[:, sl].T


class SingleVariant(str, Enum):
    PISSA = "PiSSA"
    MILORA = "MiLoRA"


def build_single_lora_init(w0: Matrix, factors: SvdFactors, variant, r: int, s: float) -> tuple[ExpertPair, Matrix]:
    """Single-adapter baselines: train the top (PiSSA) or bottom (MiLoRA) band.

    Returns the pair and the frozen residual ``W0 - band``.
    """
    variant = SingleVariant(variant)
    h = factors.sigma.size
    if not 1 <= r <= h:
        raise DomainError(f"rank must lie in [1, {h}], got {r}")
    start = 0 if variant is SingleVariant.PISSA else h - r
    spec = SegmentSpec(start=start, width=r, strategy=Strategy.PRINCIPAL if start == 0 else Strategy.MINOR, expert_index=1)
    pair = build_expert(factors, spec, s, 1.0)
    frozen = as_matrix(w0) - segment_matrix(factors, spec)
    return pair, frozen
