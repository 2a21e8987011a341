"""Checks of the alignment theory against full fine-tuning references.

Everything here is plain SGD. A LoRA model's *equivalent weight* is the dense
matrix it realises (``w_base + s*b@a`` per expert) and its *equivalent
gradient* is the change that one SGD step makes to that matrix, divided by
``-lr`` and stripped of the second-order term.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import DomainError, NumericError, RunError, ShapeError
from .moe import (
    CONVENTIONAL_SCALE,
    BatchForward,
    GoatLayer,
    LayerGrads,
    Router,
    balance_logit_grad,
    balance_terms,
    build_goat_layer,
    expert_weight_grads,
    forward_batch,
    backward_batch,
    init_router,
    load_fractions,
    route_logits,
    sgd_update,
    single_lora_layer,
    theoretical_scale,
)
from .numkit import Matrix, Rng, kaiming_uniform, svd
from .svdseg import ExpertPair, build_single_lora_init
from .tasks import SyntheticTask

LORA_VARIANTS = ("GOAT", "GOAT-s", "ZeroMoE", "PiSSA", "MiLoRA")
DENSE_VARIANTS = ("FullFT", "FullFTMoE")


# --------------------------------------------------------------------------
# equivalent gradient and the LoRA SGD step


def equivalent_gradient(b: Matrix, a: Matrix, g: Matrix, s: float) -> Matrix:
    """``s^2 (b b^T g + g a^T a)``."""
    if b.shape[1] != a.shape[0] or g.shape != (b.shape[0], a.shape[1]):
        raise ShapeError(f"shapes do not compose: b {b.shape}, a {a.shape}, g {g.shape}")
    return s * s * (b @ (b.T @ g) + (g @ a.T) @ a)


def sgd_step_lora(b: Matrix, a: Matrix, g: Matrix, s: float, eta: float) -> tuple[Matrix, Matrix]:
    """One SGD step on ``(b, a)`` when the loss gradient w.r.t. ``W + s*b@a`` is ``g``."""
    if eta <= 0:
        raise DomainError(f"learning rate must be positive, got {eta}")
    if g.shape != (b.shape[0], a.shape[1]):
        raise ShapeError(f"gradient {g.shape} does not match b {b.shape} / a {a.shape}")
    return b - s * eta * (g @ a.T), a - s * eta * (b.T @ g)


# --------------------------------------------------------------------------
# models sharing one duck-typed interface


@dataclass(frozen=True, eq=False)
class LoraModel:
    layer: GoatLayer

    @property
    def router(self) -> Router:
        return self.layer.router

    def forward(self, X, mask=None) -> BatchForward:
        return forward_batch(self.layer, X, mask)

    def backward(self, X, fb, G) -> LayerGrads:
        return backward_batch(self.layer, X, fb, G)

    def updated(self, grads: LayerGrads, lr: float) -> "LoraModel":
        return LoraModel(sgd_update(self.layer, grads, lr))

    def expert_weights(self) -> list[Matrix]:
        return self.layer.equivalent_weights()

    def mean_weight(self) -> Matrix:
        return self.layer.mean_equivalent_weight()

    def effective_grads(self, X, fb, G) -> list[Matrix]:
        gs = expert_weight_grads(fb, X, G)
        return [equivalent_gradient(e.b, e.a, g, e.scale) for e, g in zip(self.layer.experts, gs)]


@dataclass(frozen=True, eq=False)
class DenseMoE:
    """Dense MoE (one expert and ``k=1`` gives plain full fine-tuning)."""

    weights: tuple[Matrix, ...]
    router: Router
    balance_coeff: float = 0.0

    @classmethod
    def upcycled(cls, w0: Matrix, router: Router, balance_coeff: float = 0.0) -> "DenseMoE":
        E = router.num_experts
        return cls(weights=tuple(np.array(w0, dtype=float) for _ in range(E)), router=router, balance_coeff=balance_coeff)

    @classmethod
    def full(cls, w0: Matrix) -> "DenseMoE":
        return cls(weights=(np.array(w0, dtype=float),), router=Router(wz=np.zeros((1, w0.shape[1])), k=1))

    @property
    def k(self) -> int:
        return self.router.k

    def forward(self, X, mask=None) -> BatchForward:
        X = np.atleast_2d(X)
        logits = X @ self.router.wz.T
        w, mask = route_logits(logits, self.k, mask)
        outputs = tuple(X @ W.T for W in self.weights)
        y = sum(w[:, i][:, None] * o for i, o in enumerate(outputs))
        return BatchForward(y=y, weights=w, mask=mask, logits=logits, hidden=(), outputs=outputs)

    def backward(self, X, fb: BatchForward, G) -> LayerGrads:
        W = fb.weights
        g_w = tuple((G * W[:, i][:, None]).T @ X for i in range(len(self.weights)))
        dw = np.stack([np.einsum("tm,tm->t", G, o) for o in fb.outputs], axis=1)
        dz = W * (dw - np.sum(W * dw, axis=1, keepdims=True))
        lb = balance_terms(fb.mask, fb.logits, self.k)[0]
        if self.balance_coeff:
            dz = dz + self.balance_coeff * balance_logit_grad(fb.mask, fb.logits, self.k)
        return LayerGrads(g_b=g_w, g_a=(), g_wz=dz.T @ X, balance_loss=lb)

    def updated(self, grads: LayerGrads, lr: float) -> "DenseMoE":
        weights = tuple(W - lr * g for W, g in zip(self.weights, grads.g_b))
        return replace(self, weights=weights, router=Router(wz=self.router.wz - lr * grads.g_wz, k=self.k))

    def expert_weights(self) -> list[Matrix]:
        return list(self.weights)

    def mean_weight(self) -> Matrix:
        return sum(self.weights) / len(self.weights)

    def effective_grads(self, X, fb, G) -> list[Matrix]:
        return expert_weight_grads(fb, X, G)


# --------------------------------------------------------------------------
# trajectories


@dataclass
class StepRecord:
    step: int
    loss_ref: float | None
    loss_lora: float
    balance_loss: float
    loads: np.ndarray
    weight_gap: float | None
    expert_gap: float | None
    grad_gap: float | None
    routes_agree: bool | None
    wall_ms: float = 0.0


@dataclass
class TrajectoryReport:
    rows: list[StepRecord] = field(default_factory=list)
    eval_losses: dict[int, float] = field(default_factory=dict)
    final_loads: np.ndarray | None = None
    model: object = None
    reference: object = None

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def weight_gaps(self) -> np.ndarray:
        return np.array([r.weight_gap for r in self.rows], dtype=float)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss_lora for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss_ref", "loss_lora", "weight_gap", "grad_gap"])
        for r in self.rows:
            w.writerow([r.step, _fmt(r.loss_ref), _fmt(r.loss_lora), _fmt(r.weight_gap), _fmt(r.grad_gap)])
        return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else format(float(x), ".17g")


def train(
    model,
    task: SyntheticTask,
    rng: Rng,
    steps: int,
    lr: float,
    batch_size: int = 32,
    reference=None,
    eta_ratio: float = 1.0,
    eval_steps: Sequence[int] = (),
    eval_size: int = 1024,
) -> TrajectoryReport:
    """Train ``model`` (and optionally ``reference``) on identical batches.

    Row ``t`` is measured on batch ``t`` before the ``t``-th update, so
    ``steps`` updates produce ``steps + 1`` rows. The reference learns with
    rate ``eta_ratio * lr``. A divergence raises ``RunError`` whose
    ``partial`` attribute holds the rows recorded so far.
    """
    data = rng.child("data")
    X_eval, Y_eval = task.sample(rng.child("eval"), eval_size) if eval_size else (None, None)
    eval_steps = set(int(s) for s in eval_steps)
    report = TrajectoryReport()
    lr_ref = eta_ratio * lr
    try:
        # overflow on the way to divergence is reported below as a RunError
        with np.errstate(over="ignore", invalid="ignore"):
            model, reference = _train_loop(model, task, data, steps, lr, batch_size, reference, lr_ref, X_eval,
                                           Y_eval, eval_steps, report)
    except (RunError, NumericError) as exc:
        err = exc if isinstance(exc, RunError) else RunError(str(exc), step=len(report.rows))
        err.partial = report
        raise err from (None if err is exc else exc)
    if X_eval is not None:
        fe = model.forward(X_eval)
        report.final_loads = load_fractions(fe.mask, model.router.k)
    report.model = model
    report.reference = reference
    return report


def _train_loop(model, task, data, steps, lr, batch_size, reference, lr_ref, X_eval, Y_eval, eval_steps, report):
    for t in range(steps + 1):
        t0 = time.perf_counter()
        if t in eval_steps and X_eval is not None:
            report.eval_losses[t] = task.loss_grad(model.forward(X_eval).y, Y_eval)[0]
        X, Y = task.sample(data, batch_size)
        fb = model.forward(X)
        loss, G = task.loss_grad(fb.y, Y)
        if not np.isfinite(loss):
            raise RunError("training loss became non-finite", step=t)
        grads = model.backward(X, fb, G)
        rec = StepRecord(step=t, loss_ref=None, loss_lora=loss, balance_loss=grads.balance_loss,
                         loads=load_fractions(fb.mask, model.router.k), weight_gap=None, expert_gap=None,
                         grad_gap=None, routes_agree=None)
        if reference is not None:
            fr = reference.forward(X)
            loss_r, Gr = task.loss_grad(fr.y, Y)
            if not np.isfinite(loss_r):
                raise RunError("reference loss became non-finite", step=t)
            grads_r = reference.backward(X, fr, Gr)
            rec.loss_ref = loss_r
            rec.weight_gap = float(np.linalg.norm(model.mean_weight() - reference.mean_weight()))
            rec.expert_gap = max(float(np.linalg.norm(a - b)) for a, b in zip(model.expert_weights(), reference.expert_weights()))
            g_l = model.effective_grads(X, fb, G)
            g_r = reference.effective_grads(X, fr, Gr)
            rec.grad_gap = float(np.sqrt(sum(np.sum((lr * a - lr_ref * b) ** 2) for a, b in zip(g_l, g_r))))
            rec.routes_agree = bool(np.array_equal(fb.mask, fr.mask))
        if t < steps:
            model = model.updated(grads, lr)
            if reference is not None:
                reference = reference.updated(grads_r, lr_ref)
        rec.wall_ms = 1000.0 * (time.perf_counter() - t0)
        report.rows.append(rec)
    return model, reference


@dataclass
class ExperimentConfig:
    variant: str = "GOAT"
    E: int = 8
    k: int = 2
    r: int = 8
    rho: float = 10.0
    eta: float = 1.0  # full-tuning / LoRA learning-rate ratio
    strategy: str = "O"
    balance_coeff: float = 1e-3
    scale_rank: str = "expert"
    s: float | None = None
    lr: float = 0.01
    steps: int = 100
    batch_size: int = 32
    seed: int = 0
    reference: str = "auto"  # auto | none | fullft | fullftmoe
    eval_steps: tuple[int, ...] = ()
    eval_size: int = 1024


def build_model(task: SyntheticTask, cfg: ExperimentConfig, rng: Rng):
    """Instantiate the trained model named by ``cfg.variant``."""
    w0 = task.w0
    m, n = w0.shape
    v = cfg.variant
    if v in ("GOAT", "GOAT-s", "ZeroMoE"):
        layer = build_goat_layer(w0, E=cfg.E, k=cfg.k, r=cfg.r, eta=cfg.eta, rho=cfg.rho, strategy=cfg.strategy,
                                 variant=v, rng=rng, balance_coeff=cfg.balance_coeff, scale_rank=cfg.scale_rank, s=cfg.s)
        return LoraModel(layer)
    if v in ("PiSSA", "MiLoRA"):
        s = CONVENTIONAL_SCALE if cfg.s is None else cfg.s
        pair, frozen = build_single_lora_init(w0, svd(w0), v, cfg.r, s)
        return LoraModel(single_lora_layer(frozen, pair, rng, v))
    if v == "FullFT":
        return DenseMoE.full(w0)
    if v == "FullFTMoE":
        return DenseMoE.upcycled(w0, init_router(rng, cfg.E, n, cfg.k), cfg.balance_coeff)
    raise DomainError(f"unknown variant {v!r}")


def build_reference(task: SyntheticTask, cfg: ExperimentConfig, rng: Rng, model):
    kind = cfg.reference.lower()
    if kind == "auto":
        if cfg.variant in DENSE_VARIANTS:
            return None
        kind = "fullft" if isinstance(model, LoraModel) and model.layer.num_experts == 1 else "fullftmoe"
    if kind == "none":
        return None
    if kind == "fullft":
        return DenseMoE.full(task.w0)
    if kind == "fullftmoe":
        E, k = model.router.num_experts, model.router.k
        # same stream as the LoRA router, so both start identical
        return DenseMoE.upcycled(task.w0, init_router(rng, E, task.w0.shape[1], k), cfg.balance_coeff)
    raise DomainError(f"unknown reference kind {cfg.reference!r}")


def run_alignment_experiment(task: SyntheticTask, cfg: ExperimentConfig) -> TrajectoryReport:
    rng = Rng(cfg.seed)
    model = build_model(task, cfg, rng)
    reference = build_reference(task, cfg, rng, model)
    return train(model, task, rng, cfg.steps, cfg.lr, cfg.batch_size, reference=reference, eta_ratio=cfg.eta,
                 eval_steps=cfg.eval_steps, eval_size=cfg.eval_size)


def exact_alignment_layer(w0: Matrix, s, c, rng: Rng, E: int = 1, k: int = 1) -> GoatLayer:
    """LoRA MoE whose experts start at ``b = c*I`` (m x m) and ``a = 0``.

    At every such point the equivalent gradient is exactly ``s^2 c^2 g``, so
    choosing ``s^2 c^2 = lr_full / lr_lora`` aligns the first step exactly and
    later steps up to second-order drift. ``s`` and ``c`` may be given per
    expert.
    """
    m, n = w0.shape
    if m > n:
        raise DomainError("constructed instance needs m <= n so that b can be square")
    ss = np.broadcast_to(np.asarray(s, dtype=float), (E,))
    cs = np.broadcast_to(np.asarray(c, dtype=float), (E,))
    experts = tuple(ExpertPair(b=ci * np.eye(m), a=np.zeros((m, n)), scale=float(si)) for si, ci in zip(ss, cs))
    return GoatLayer(w_base=np.array(w0, dtype=float), experts=experts, router=init_router(rng, E, n, k),
                     rho=1.0, balance_coeff=0.0, variant="constructed", strategy=None)


def run_constructed_alignment(
    task: SyntheticTask, E: int = 1, k: int = 1, steps: int = 100, lr_lora: float = 0.01,
    lr_full: float = 0.02, s=1e-3, seed: int = 0,
) -> TrajectoryReport:
    """Train the constructed instance next to full tuning (``E=1``) or an upcycled dense MoE.

    With ``s^2 c^2`` held at ``lr_full / lr_lora`` the drift away from exact
    alignment is proportional to ``s^2``, so a small ``s`` (and large ``c``)
    keeps the trajectories together to near machine precision. Per-expert
    scales (as in GOAT-s) are accepted.
    """
    if lr_lora <= 0 or lr_full <= 0:
        raise DomainError("learning rates must be positive")
    c = np.sqrt(lr_full / lr_lora) / np.asarray(s, dtype=float)
    rng = Rng(seed)
    layer = exact_alignment_layer(task.w0, s, c, rng, E, k)
    if E == 1:
        ref = DenseMoE.full(task.w0)
    else:
        ref = DenseMoE.upcycled(task.w0, init_router(rng, E, task.w0.shape[1], k))
    return train(LoraModel(layer), task, rng, steps, lr_lora, reference=ref, eta_ratio=lr_full / lr_lora, eval_size=0)


# --------------------------------------------------------------------------
# Monte-Carlo checks


def sample_logits(rng: Rng, trials: int, E: int, dist: str = "normal") -> np.ndarray:
    if dist == "normal":
        return rng.generator.standard_normal((trials, E))
    if dist == "uniform":
        return rng.generator.uniform(-1.0, 1.0, (trials, E))
    raise DomainError(f"unknown logit distribution {dist!r}")


@dataclass
class RouterStats:
    mean: np.ndarray
    var: np.ndarray
    stderr: np.ndarray  # standard error of each mean
    trials: int


def verify_router_stats(E: int, k: int, trials: int, rng: Rng, dist: str = "normal", chunk: int = 50_000) -> RouterStats:
    """Sample mean and variance of each top-k routing weight under i.i.d. logits."""
    if not 1 <= k <= E:
        raise DomainError(f"k={k} must lie in [1, E={E}]")
    s1 = np.zeros(E)
    s2 = np.zeros(E)
    done = 0
    while done < trials:
        T = min(chunk, trials - done)
        w, _ = route_logits(sample_logits(rng, T, E, dist), k)
        s1 += w.sum(axis=0)
        s2 += (w * w).sum(axis=0)
        done += T
    mean = s1 / trials
    var = (s2 - trials * mean * mean) / max(trials - 1, 1)
    return RouterStats(mean=mean, var=var, stderr=np.sqrt(var / trials), trials=trials)


def closed_form_weight_variance(E: int, k: int) -> float:
    return (E - k) / (k * E * E)


def mean_gram(n: int, r: int, trials: int, rng: Rng, chunk: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and per-entry standard error of ``A^T A`` for Kaiming-uniform ``A`` (r x n)."""
    s1 = np.zeros((n, n))
    s2 = np.zeros((n, n))
    done = 0
    while done < trials:
        T = min(chunk, trials - done)
        A = kaiming_uniform(rng, T * r, n, fan_in=n).reshape(T, r, n)
        M = np.einsum("tki,tkj->tij", A, A)
        s1 += M.sum(axis=0)
        s2 += (M * M).sum(axis=0)
        done += T
    mean = s1 / trials
    var = (s2 - trials * mean * mean) / max(trials - 1, 1)
    return mean, np.sqrt(var / trials)


def verify_expected_gradient_scale(n: int, r: int, eta: float, trials: int, rng: Rng, g: Matrix | None = None) -> dict:
    """Compare the sampled ``E[A^T A]`` (and the implied gradient) with theory.

    Returns the relative deviation of ``mean(A^T A)`` from ``(r/3n) I``, the
    largest off-diagonal mean in units of its standard error and, when ``g`` is
    given, ``||mean(s^2 g A^T A) - eta g|| / ||eta g||`` with ``s`` from the
    closed form.
    """
    mean, se = mean_gram(n, r, trials, rng)
    target = r / (3.0 * n) * np.eye(n)
    out = {"gram_rel_dev": float(np.linalg.norm(mean - target) / np.linalg.norm(target))}
    off = ~np.eye(n, dtype=bool)
    out["max_offdiag_z"] = float(np.max(np.abs(mean[off]) / se[off]))
    if g is not None:
        s = theoretical_scale(n, eta, r)
        approx = s * s * (g @ mean)
        out["grad_rel_dev"] = float(np.linalg.norm(approx - eta * g) / np.linalg.norm(eta * g))
        out["s"] = s
    return out


@dataclass
class WResCheck:
    j_opt: float
    j_perturbed: np.ndarray
    max_gain: float  # max of J(W_res+) - J(perturbed); <= 0 means W_res+ wins
    sample_mean_dev: float  # ||W_res+ - sample mean of s*sum w_i b_i a_i||
    sample_mean_se: float  # Monte-Carlo standard error of that sample mean (Frobenius)


def verify_w_res_optimality(
    experts: Sequence[ExpertPair], s: float | None, E: int, k: int, trials: int, rng: Rng,
    n_perturb: int = 20, rel_norm: float = 0.1, dist: str = "normal",
) -> WResCheck:
    """Monte-Carlo objective ``J(W) = mean ||W - sum_i w_i(x) s_i b_i a_i||^2``.

    Routing weights come from i.i.d. logits. ``J`` is evaluated exactly on the
    sample through the Gram matrix of the flattened expert products.
    """
    if len(experts) != E:
        raise DomainError(f"expected {E} experts, got {len(experts)}")
    scales = [e.scale for e in experts] if s is None else [s] * E
    M = np.stack([si * (e.b @ e.a).ravel() for si, e in zip(scales, experts)])  # E x mn
    K = M @ M.T
    w, _ = route_logits(sample_logits(rng.child("logits"), trials, E, dist), k)
    w_mean = w.mean(axis=0)
    second = float(np.mean(np.einsum("ti,ij,tj->t", w, K, w)))
    w_res = M.mean(axis=0)

    def J(W: np.ndarray) -> float:
        return float(W @ W - 2.0 * W @ (w_mean @ M) + second)

    j_opt = J(w_res)
    prng = rng.child("perturb")
    target = rel_norm * np.linalg.norm(w_res)
    js = []
    for _ in range(n_perturb):
        d = prng.normal(w_res.shape)
        js.append(J(w_res + d * (target / np.linalg.norm(d))))
    js = np.array(js)
    cov_w = np.cov(w, rowvar=False)
    # Var of the sample mean of w @ M, summed over entries: tr(M^T C M) / trials
    se = float(np.sqrt(max(float(np.sum(cov_w * K)), 0.0) / trials))
    return WResCheck(
        j_opt=j_opt, j_perturbed=js, max_gain=float(np.max(j_opt - js)),
        sample_mean_dev=float(np.linalg.norm(w_res - w_mean @ M)), sample_mean_se=se,
    )


def equivalent_weight_variance(layer: GoatLayer, X: np.ndarray) -> float:
    """Mean over inputs of ``||sum_i w_i(x) s_i b_i a_i - W_res||_F^2``."""
    fb = forward_batch(layer, X)
    M = np.stack([e.delta().ravel() for e in layer.experts])
    D = (fb.weights - 1.0 / layer.num_experts) @ M
    return float(np.mean(np.sum(D * D, axis=1)))
