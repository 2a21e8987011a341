"""The GOAT layer: SVD-seeded LoRA experts behind a top-k softmax router.

Forward for one token ``x``::

    y = w_base @ x + sum_{i in top-k} w_i(x) * s_i * b_i @ (a_i @ x)

with ``w_base = W0 - W_res`` chosen so the router-averaged equivalent weight
equals ``W0`` at initialisation. Batches are processed densely (every expert
is evaluated, unselected ones get weight zero), which matches the per-token
definition exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DomainError, NumericError, ShapeError
from .numkit import Matrix, Rng, as_matrix, kaiming_uniform, read_matrix, svd, write_matrix
from .svdseg import ExpertPair, SegmentSpec, Strategy, build_expert, make_segments

DEFAULT_E = 8
DEFAULT_K = 2
DEFAULT_RHO = 10.0
DEFAULT_BALANCE_COEFF = 1e-3
ROUTER_INIT_STD = 0.02
CONVENTIONAL_SCALE = 2.0


class Variant(str, Enum):
    GOAT = "GOAT"
    GOAT_S = "GOAT-s"
    ZERO_MOE = "ZeroMoE"


class ScaleRank(str, Enum):
    """Which rank sits under the square root of the theoretical scale."""

    EXPERT = "expert"  # d = r / E
    TOTAL = "total"  # r
    RHO = "rho"  # the damping constant, as in the pseudocode listing


# --------------------------------------------------------------------------
# routing


@dataclass(frozen=True, eq=False)
class Router:
    wz: Matrix  # E x n
    k: int

    def __post_init__(self):
        if not 1 <= self.k <= self.wz.shape[0]:
            raise DomainError(f"k={self.k} must lie in [1, E={self.wz.shape[0]}]")

    @property
    def num_experts(self) -> int:
        return self.wz.shape[0]


@dataclass(frozen=True, eq=False)
class RouteResult:
    indices: tuple[int, ...]
    weights: np.ndarray  # length E, zero off the selected set
    logits: np.ndarray


def topk_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest logits per row; lower index wins ties."""
    logits = np.atleast_2d(logits)
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    mask = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    logits = np.atleast_2d(logits)
    shifted = np.where(mask, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    ex = np.where(mask, np.exp(shifted), 0.0)
    return ex / ex.sum(axis=1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(logits)
    ex = np.exp(z - z.max(axis=1, keepdims=True))
    return ex / ex.sum(axis=1, keepdims=True)


def route_logits(logits: np.ndarray, k: int, mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Weights and selection mask for a batch of logits (T x E)."""
    logits = np.atleast_2d(logits)
    if not np.all(np.isfinite(logits)):
        raise NumericError("router produced non-finite logits")
    if mask is None:
        mask = topk_mask(logits, k)
    return masked_softmax(logits, mask), mask


def route(router: Router, x: np.ndarray) -> RouteResult:
    z = router.wz @ np.asarray(x, dtype=np.float64)
    w, mask = route_logits(z[None, :], router.k)
    return RouteResult(indices=tuple(int(i) for i in np.flatnonzero(mask[0])), weights=w[0], logits=z)


# --------------------------------------------------------------------------
# the layer


@dataclass(frozen=True, eq=False)
class GoatLayer:
    w_base: Matrix
    experts: tuple[ExpertPair, ...]
    router: Router
    rho: float = DEFAULT_RHO
    balance_coeff: float = DEFAULT_BALANCE_COEFF
    variant: str = Variant.GOAT.value
    strategy: str | None = Strategy.OURS.value
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def k(self) -> int:
        return self.router.k

    @property
    def scales(self) -> np.ndarray:
        return np.array([e.scale for e in self.experts])

    @property
    def s(self) -> float:
        return float(self.experts[0].scale)

    @property
    def total_rank(self) -> int:
        return sum(e.rank for e in self.experts)

    def equivalent_weights(self) -> list[Matrix]:
        """Per-expert dense weights ``w_base + s_i b_i a_i``."""
        return [self.w_base + e.delta() for e in self.experts]

    def mean_equivalent_weight(self) -> Matrix:
        """Equivalent weight with every routing weight replaced by ``1/E``."""
        return self.w_base + sum(e.delta() for e in self.experts) / self.num_experts


@dataclass(frozen=True, eq=False)
class BatchForward:
    y: np.ndarray  # T x m
    weights: np.ndarray  # T x E
    mask: np.ndarray  # T x E
    logits: np.ndarray  # T x E
    hidden: tuple[np.ndarray, ...]  # per expert, T x d  (a_i @ x)
    outputs: tuple[np.ndarray, ...]  # per expert, T x m  (b_i @ a_i @ x, unscaled)


@dataclass(frozen=True, eq=False)
class LayerGrads:
    g_b: tuple[np.ndarray, ...]
    g_a: tuple[np.ndarray, ...]
    g_wz: np.ndarray
    balance_loss: float


def forward_batch(layer: GoatLayer, X: np.ndarray, mask: np.ndarray | None = None) -> BatchForward:
    """Forward a T x n batch. Pass ``mask`` to freeze the expert selection."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != layer.w_base.shape[1]:
        raise ShapeError(f"input width {X.shape[1]} does not match layer input {layer.w_base.shape[1]}")
    logits = X @ layer.router.wz.T
    weights, mask = route_logits(logits, layer.k, mask)
    y = X @ layer.w_base.T
    hidden, outputs = [], []
    for i, e in enumerate(layer.experts):
        h = X @ e.a.T
        o = h @ e.b.T
        hidden.append(h)
        outputs.append(o)
        y = y + (weights[:, i] * e.scale)[:, None] * o
    return BatchForward(y=y, weights=weights, mask=mask, logits=logits, hidden=tuple(hidden), outputs=tuple(outputs))


def forward(layer: GoatLayer, x: np.ndarray) -> tuple[np.ndarray, RouteResult]:
    x = np.asarray(x, dtype=np.float64)
    fb = forward_batch(layer, x[None, :])
    rr = RouteResult(
        indices=tuple(int(i) for i in np.flatnonzero(fb.mask[0])),
        weights=fb.weights[0],
        logits=fb.logits[0],
    )
    return fb.y[0], rr


# --------------------------------------------------------------------------
# balance loss


def load_fractions(mask: np.ndarray, k: int) -> np.ndarray:
    """Share of all ``k*T`` assignments received by each expert (sums to 1)."""
    mask = np.atleast_2d(mask)
    return mask.sum(axis=0) / (k * mask.shape[0])


def balance_terms(mask: np.ndarray, logits: np.ndarray, k: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Return ``(L_b, f, P)`` for a batch."""
    mask = np.atleast_2d(mask)
    E = mask.shape[1]
    f = E * load_fractions(mask, k)
    P = softmax(logits).mean(axis=0)
    return float(f @ P), f, P


def balance_loss(route_history: Sequence[RouteResult], logits_history: Sequence[np.ndarray], E: int, k: int) -> float:
    if not route_history:
        raise DomainError("balance loss needs at least one routed token")
    if len(route_history) != len(logits_history):
        raise DomainError("route and logits histories differ in length")
    mask = np.zeros((len(route_history), E), dtype=bool)
    for t, rr in enumerate(route_history):
        mask[t, list(rr.indices)] = True
    return balance_terms(mask, np.asarray(logits_history, dtype=np.float64), k)[0]


def balance_logit_grad(mask: np.ndarray, logits: np.ndarray, k: int) -> np.ndarray:
    """d L_b / d logits with the assignment counts held constant."""
    _, f, _ = balance_terms(mask, logits, k)
    p = softmax(logits)
    T = p.shape[0]
    return p * (f[None, :] - (p @ f)[:, None]) / T


# --------------------------------------------------------------------------
# backward


def backward_batch(layer: GoatLayer, X: np.ndarray, fb: BatchForward, G: np.ndarray) -> LayerGrads:
    """Gradients of ``sum_t G[t] . y[t] + balance_coeff * L_b`` for one batch.

    ``G`` holds the upstream gradient of the task loss for every token. The
    top-k selection and the assignment counts inside ``L_b`` are constants.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    G = np.atleast_2d(np.asarray(G, dtype=np.float64))
    if G.shape != fb.y.shape:
        raise ShapeError(f"upstream gradient {G.shape} does not match output {fb.y.shape}")
    W = fb.weights
    g_b, g_a = [], []
    dw = np.empty_like(W)
    for i, e in enumerate(layer.experts):
        Gi = G * (W[:, i] * e.scale)[:, None]
        g_b.append(Gi.T @ fb.hidden[i])
        g_a.append(e.b.T @ Gi.T @ X)
        dw[:, i] = e.scale * np.einsum("tm,tm->t", G, fb.outputs[i])
    dz = W * (dw - np.sum(W * dw, axis=1, keepdims=True))
    lb = balance_terms(fb.mask, fb.logits, layer.k)[0]
    if layer.balance_coeff:
        dz = dz + layer.balance_coeff * balance_logit_grad(fb.mask, fb.logits, layer.k)
    return LayerGrads(g_b=tuple(g_b), g_a=tuple(g_a), g_wz=dz.T @ X, balance_loss=lb)


def backward(layer: GoatLayer, x: np.ndarray, route_result: RouteResult, g_y: np.ndarray) -> LayerGrads:
    """Single-token backward; the balance term is that of a one-token batch."""
    x = np.asarray(x, dtype=np.float64)
    z = layer.router.wz @ x
    if not np.allclose(z, route_result.logits, rtol=1e-12, atol=1e-12):
        raise ContractError("route was not produced by forward on this input and layer")
    mask = np.zeros((1, layer.num_experts), dtype=bool)
    mask[0, list(route_result.indices)] = True
    fb = forward_batch(layer, x[None, :], mask=mask)
    return backward_batch(layer, x[None, :], fb, np.asarray(g_y, dtype=np.float64)[None, :])


def expert_weight_grads(fb: BatchForward, X: np.ndarray, G: np.ndarray) -> list[np.ndarray]:
    """Gradient with respect to each expert's equivalent dense weight."""
    return [(G * fb.weights[:, i][:, None]).T @ X for i in range(fb.weights.shape[1])]


def sgd_update(layer: GoatLayer, grads: LayerGrads, lr: float) -> GoatLayer:
    """Plain SGD on experts and router; ``w_base`` stays frozen."""
    experts = tuple(
        replace(e, b=e.b - lr * gb, a=e.a - lr * ga) for e, gb, ga in zip(layer.experts, grads.g_b, grads.g_a)
    )
    router = Router(wz=layer.router.wz - lr * grads.g_wz, k=layer.k)
    return replace(layer, experts=experts, router=router)


# --------------------------------------------------------------------------
# scaling and initialisation


def compute_w_res(experts: Sequence[ExpertPair], s: float | Sequence[float] | None = None, E: int | None = None) -> Matrix:
    """Closed-form residual ``(1/E) * sum_i s_i b_i a_i``.

    ``s`` may be a scalar (shared scale) or one value per expert; by default
    each expert's own scale is used.
    """
    if not experts:
        raise DomainError("no experts")
    E = len(experts) if E is None else E
    shape = (experts[0].b.shape[0], experts[0].a.shape[1])
    if s is None:
        scales = [e.scale for e in experts]
    elif np.ndim(s) == 0:
        scales = [float(s)] * len(experts)
    else:
        scales = list(s)
    total = np.zeros(shape)
    for e, si in zip(experts, scales):
        if (e.b.shape[0], e.a.shape[1]) != shape:
            raise ShapeError(f"expert shape {(e.b.shape[0], e.a.shape[1])} differs from {shape}")
        total += si * (e.b @ e.a)
    return total / E


def theoretical_scale(n: int, eta: float, r: float) -> float:
    """Scale that matches zero-init LoRA's expected first gradient to full tuning."""
    if eta <= 0:
        raise DomainError(f"learning-rate ratio must be positive, got {eta}")
    if n < 1 or r <= 0:
        raise DomainError(f"need n >= 1 and r > 0, got n={n}, r={r}")
    return float(np.sqrt(3.0 * n * eta / r))


def goat_s_scales(segment_sigmas: Sequence[float], s1: float) -> list[float]:
    """Per-expert scales ``s_i = s1 * sqrt(sum_0 / sum_i)``."""
    sums = np.asarray(segment_sigmas, dtype=np.float64)
    if s1 <= 0:
        raise DomainError(f"base scale must be positive, got {s1}")
    if np.any(sums <= 0):
        raise DomainError("segment singular-value sums must be positive (degenerate spectrum)")
    scales = s1 * np.sqrt(sums[0] / sums)
    scales[0] = s1
    return [float(x) for x in scales]


def scale_denominator(scale_rank, r: int, E: int, rho: float) -> float:
    scale_rank = ScaleRank(scale_rank)
    if scale_rank is ScaleRank.EXPERT:
        return r / E
    if scale_rank is ScaleRank.TOTAL:
        return float(r)
    return float(rho)


def init_router(rng: Rng, E: int, n: int, k: int, std: float = ROUTER_INIT_STD) -> Router:
    return Router(wz=rng.child("router").normal((E, n), std), k=k)


def build_goat_layer(
    w0: Matrix,
    E: int = DEFAULT_E,
    k: int = DEFAULT_K,
    r: int = 8,
    eta: float = 1.0,
    rho: float = DEFAULT_RHO,
    strategy="O",
    variant="GOAT",
    rng: Rng | None = None,
    balance_coeff: float = DEFAULT_BALANCE_COEFF,
    scale_rank="expert",
    s: float | None = None,
) -> GoatLayer:
    """Build a freshly initialised layer.

    GOAT seeds experts from spectrum bands and subtracts ``W_res``; GOAT-s
    additionally gives each expert its own scale; ZeroMoE zeroes ``b``, draws
    ``a`` Kaiming-uniform and leaves ``W0`` untouched. ``s`` overrides the
    scale (the base scale ``s_1`` for GOAT-s).
    """
    w0 = as_matrix(w0)
    rng = Rng(0) if rng is None else rng
    variant = Variant(variant)
    m, n = w0.shape
    if E < 1 or r % E:
        raise DomainError(f"total rank r={r} must be a positive multiple of E={E}")
    if not 1 <= k <= E:
        raise DomainError(f"k={k} must lie in [1, E={E}]")
    d = r // E
    router = init_router(rng, E, n, k)
    meta = {"eta": eta, "r": r, "scale_rank": ScaleRank(scale_rank).value}

    if variant is Variant.ZERO_MOE:
        scale = CONVENTIONAL_SCALE if s is None else float(s)
        stream = rng.child("experts")
        experts = tuple(
            ExpertPair(b=np.zeros((m, d)), a=kaiming_uniform(stream.child(i), d, n, fan_in=n), scale=scale)
            for i in range(E)
        )
        return GoatLayer(
            w_base=w0.copy(), experts=experts, router=router, rho=rho, balance_coeff=balance_coeff,
            variant=variant.value, strategy=None, meta=meta,
        )

    strategy = Strategy.parse(strategy)
    base = theoretical_scale(n, eta, scale_denominator(scale_rank, r, E, rho)) if s is None else float(s)
    factors = svd(w0)
    specs = make_segments(m, n, E, r, strategy, rng)
    if variant is Variant.GOAT_S:
        sums = [float(np.sum(factors.sigma[sp.start:sp.stop])) for sp in specs]
        scales = goat_s_scales(sums, base)
    else:
        scales = [base] * E
    experts = tuple(build_expert(factors, sp, si, rho) for sp, si in zip(specs, scales))
    w_base = w0 - compute_w_res(experts)
    return GoatLayer(
        w_base=w_base, experts=experts, router=router, rho=rho, balance_coeff=balance_coeff,
        variant=variant.value, strategy=strategy.value, meta=meta,
    )


def single_lora_layer(w_frozen: Matrix, pair: ExpertPair, rng: Rng, variant: str) -> GoatLayer:
    """Wrap a single adapter as a one-expert layer (router is then inert)."""
    router = init_router(rng, 1, w_frozen.shape[1], 1)
    return GoatLayer(w_base=as_matrix(w_frozen), experts=(pair,), router=router, rho=1.0,
                     balance_coeff=0.0, variant=variant, strategy=None)


def alignment_residual(layer: GoatLayer, w0: Matrix) -> float:
    """``||w_base + (1/E) sum_i s_i b_i a_i - W0||_F``."""
    return float(np.linalg.norm(layer.mean_equivalent_weight() - w0))


# --------------------------------------------------------------------------
# snapshots


def save_layer(layer: GoatLayer, directory: str | Path, seed: int | None = None) -> Path:
    """Write matrices as text files plus ``manifest.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "w_base.txt", layer.w_base)
    write_matrix(out / "router.txt", layer.router.wz)
    segments = []
    for i, e in enumerate(layer.experts):
        write_matrix(out / f"expert{i}_b.txt", e.b)
        write_matrix(out / f"expert{i}_a.txt", e.a)
        segments.append(None if e.source is None else {"start": e.source.start, "width": e.source.width})
    scales = [float(x) for x in layer.scales]
    manifest = {
        "variant": layer.variant,
        "E": layer.num_experts,
        "k": layer.k,
        "r": layer.total_rank,
        "s": scales[0] if len(set(scales)) == 1 else None,
        "scales": scales,
        "rho": layer.rho,
        "balance_coeff": layer.balance_coeff,
        "strategy": layer.strategy,
        "segments": segments,
        "seed": seed,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_layer(directory: str | Path) -> GoatLayer:
    src = Path(directory)
    manifest = json.loads((src / "manifest.json").read_text())
    experts = []
    for i in range(manifest["E"]):
        seg = manifest["segments"][i]
        spec = None
        if seg is not None:
            spec = SegmentSpec(start=seg["start"], width=seg["width"],
                               strategy=Strategy.parse(manifest["strategy"] or "O"), expert_index=i + 1)
        experts.append(ExpertPair(b=read_matrix(src / f"expert{i}_b.txt"), a=read_matrix(src / f"expert{i}_a.txt"),
                                  scale=manifest["scales"][i], source=spec))
    return GoatLayer(
        w_base=read_matrix(src / "w_base.txt"),
        experts=tuple(experts),
        router=Router(wz=read_matrix(src / "router.txt"), k=manifest["k"]),
        rho=manifest["rho"],
        balance_coeff=manifest["balance_coeff"],
        variant=manifest["variant"],
        strategy=manifest["strategy"],
    )
