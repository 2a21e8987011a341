"""Property checks behind ``goatlab verify`` and the acceptance suite.

Each ``check_*`` function runs one numbered acceptance criterion and returns
a list of :class:`Check` results, one per sub-claim, with measured and
expected values spelled out.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import costmodel
from .align import (
    ExperimentConfig,
    equivalent_gradient,
    equivalent_weight_variance,
    closed_form_weight_variance,
    run_alignment_experiment,
    run_constructed_alignment,
    sgd_step_lora,
    verify_expected_gradient_scale,
    verify_router_stats,
    verify_w_res_optimality,
)
from .moe import (
    GoatLayer,
    Router,
    alignment_residual,
    backward_batch,
    balance_terms,
    build_goat_layer,
    forward_batch,
    goat_s_scales,
)
from .numkit import Rng, finite_diff_grad, svd
from .svdseg import Strategy, best_rank_r_block, block_decompose, build_single_lora_init, make_segments
from .tasks import make_regression_task

VARIANTS = ("GOAT", "GOAT-s", "ZeroMoE")
STRATEGIES = tuple(s.value for s in Strategy)


@dataclass
class Check:
    criterion: int
    name: str
    passed: bool
    measured: str
    expected: str
    seconds: float = 0.0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} [{self.criterion}] {self.name}: measured {self.measured}; expected {self.expected}"


def _timed(fn: Callable[..., list[Check]]) -> Callable[..., list[Check]]:
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        dt = time.perf_counter() - t0
        return [replace(c, seconds=dt) for c in out]

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _runtime(criterion: int, name: str, t0: float, limit: float) -> Check:
    dt = time.perf_counter() - t0
    return Check(criterion, f"{name} runtime", dt < limit, f"{dt:.2f} s", f"< {limit:g} s")


# --------------------------------------------------------------------------
# 1: cost model


@_timed
def check_cost(mode: str = "truncate") -> list[Check]:
    t0 = time.perf_counter()
    out = []
    for row in costmodel.cost_table(mode):
        if row["reported"] is None:
            continue
        out.append(Check(1, f"{row['backbone']} {row['method']} proportion", row["match"],
                         f"{row['computed']}% (unrounded {row['proportion']:.4f})", f"{row['reported']}%"))
    out.append(_runtime(1, "cost table", t0, 1.0))
    return out


# --------------------------------------------------------------------------
# 2: routing weight moments


@_timed
def check_router_stats(trials: int = 100_000, seed: int = 2, cases=((8, 2), (8, 1), (16, 4))) -> list[Check]:
    t0 = time.perf_counter()
    out = []
    for E, k in cases:
        st = verify_router_stats(E, k, trials, Rng(seed).child(f"router-{E}-{k}"))
        z = np.abs(st.mean - 1.0 / E) / st.stderr
        out.append(Check(2, f"E={E} k={k} mean", bool(np.all(z <= 3.0)),
                         f"max |mean - 1/E| = {np.max(z):.2f} standard errors", "<= 3 standard errors of 1/E"))
        target = closed_form_weight_variance(E, k)
        rel = np.abs(st.var - target) / target
        out.append(Check(2, f"E={E} k={k} variance", bool(np.all(rel <= 0.05)),
                         f"var in [{st.var.min():.6f}, {st.var.max():.6f}], worst rel dev {rel.max():.1%}",
                         f"{target:.6f} within 5%"))
    out.append(_runtime(2, "routing moments", t0, 30.0))
    return out


# --------------------------------------------------------------------------
# 3: residual optimality


@_timed
def check_w_res(trials: int = 100_000, sets: int = 5, seed: int = 3, E: int = 8, k: int = 2) -> list[Check]:
    t0 = time.perf_counter()
    out = []
    for j in range(sets):
        rng = Rng(seed).child(j)
        w0 = rng.child("w0").normal((16, 16))
        layer = build_goat_layer(w0, E=E, k=k, r=E, rng=rng)
        res = verify_w_res_optimality(layer.experts, None, E, k, trials, rng)
        out.append(Check(3, f"expert set {j}: objective at W_res vs 20 perturbations", res.max_gain <= 0.0,
                         f"J(W_res)={res.j_opt:.6f}, min J(perturbed)={res.j_perturbed.min():.6f}",
                         "J(W_res) <= every perturbed J"))
    out.append(_runtime(3, "residual optimality", t0, 120.0))
    return out


# --------------------------------------------------------------------------
# 4: exact one-step expansion


def _step_fixture(rng: Rng):
    m, d, n = (int(v) for v in rng.generator.integers(2, 9, 3))
    return rng.normal((m, d)), rng.normal((d, n)), rng.normal((m, n)), float(rng.uniform(0.5, 3.0, None))


@_timed
def check_step_expansion(fixtures: int = 50, seed: int = 4) -> list[Check]:
    worst_identity = 0.0
    worst_ratio = np.inf
    for j in range(fixtures):
        b, a, g, s = _step_fixture(Rng(seed).child(j))
        rem = []
        for eta in (1e-2, 1e-3, 1e-4):
            b2, a2 = sgd_step_lora(b, a, g, s, eta)
            change = s * (b2 @ a2 - b @ a)
            remainder = s * (b2 - b) @ (a2 - a)
            err = change + eta * equivalent_gradient(b, a, g, s) - remainder
            worst_identity = max(worst_identity, float(np.linalg.norm(err) / max(np.linalg.norm(change), 1e-300)))
            rem.append(float(np.linalg.norm(remainder)) / eta)
        worst_ratio = min(worst_ratio, rem[0] / rem[1], rem[1] / rem[2])
    return [
        Check(4, "change of s*B*A equals -eta*g_tilde + s*dB*dA", worst_identity <= 1e-10,
              f"worst relative residual {worst_identity:.2e}", "<= 1e-10 (rounding only)"),
        Check(4, "remainder/eta shrinks when eta shrinks 10x", worst_ratio >= 8.0,
              f"smallest shrink factor {worst_ratio:.4f}", ">= 8"),
    ]


# --------------------------------------------------------------------------
# 5: scale derivation


@_timed
def check_gradient_scale(trials: int = 10_000, n: int = 64, ranks=(2, 4, 8), seed: int = 5) -> list[Check]:
    out = []
    g = Rng(seed).child("g").normal((16, n))
    for r in ranks:
        res = verify_expected_gradient_scale(n, r, 1.0, trials, Rng(seed).child(f"gram-{r}"), g=g)
        out.append(Check(5, f"n={n} r={r} mean of s^2 g A^T A vs eta g", res["grad_rel_dev"] <= 0.05,
                         f"relative deviation {res['grad_rel_dev']:.2%}", "<= 5%"))
    rng = Rng(seed).child("svd-lora")
    w0 = rng.normal((12, 10))
    f = svd(w0)
    gg = rng.normal((12, 10))
    per_s, weights = [], []
    for s in (1.0, 2.0, 4.0, 8.0):
        pair, frozen = build_single_lora_init(w0, f, "PiSSA", 4, s)
        per_s.append(np.linalg.norm(equivalent_gradient(pair.b, pair.a, gg, s)) / s)
        weights.append(frozen + pair.delta())
    spread = (max(per_s) - min(per_s)) / per_s[0]
    wdev = max(np.linalg.norm(w - weights[0]) for w in weights)
    out.append(Check(5, "||g_tilde_0|| / s constant over s in {1,2,4,8}", spread <= 1e-10,
                     f"relative spread {spread:.2e}", "<= 1e-10"))
    out.append(Check(5, "equivalent weight unchanged over s", wdev <= 1e-10 * max(1.0, np.linalg.norm(w0)),
                     f"max difference {wdev:.2e}", "<= 1e-10"))
    return out


# --------------------------------------------------------------------------
# 6: analytic gradients vs finite differences


def gradient_fixture(variant: str, rng: Rng, balance_coeff: float = 0.5) -> tuple[GoatLayer, np.ndarray, np.ndarray]:
    """Small layer moved off its initial point so every gradient block is non-trivial."""
    m, n, E = 6, 8, 4
    w0 = rng.child("w0").normal((m, n))
    layer = build_goat_layer(w0, E=E, k=2, r=E, rng=rng, variant=variant, balance_coeff=balance_coeff,
                             strategy="O")
    p = rng.child("perturb")
    experts = tuple(replace(e, b=e.b + 0.3 * p.normal(e.b.shape), a=e.a + 0.3 * p.normal(e.a.shape))
                    for e in layer.experts)
    router = Router(wz=p.normal(layer.router.wz.shape, 0.5), k=layer.k)
    layer = replace(layer, experts=experts, router=router)
    X = rng.child("x").normal((5, n))
    Y = rng.child("y").normal((5, m))
    return layer, X, Y


def _layer_loss(layer: GoatLayer, X, Y, mask) -> float:
    fb = forward_batch(layer, X, mask)
    diff = fb.y - Y
    task = 0.5 * float(np.sum(diff * diff)) / X.shape[0]
    return task + layer.balance_coeff * balance_terms(mask, fb.logits, layer.k)[0]


def gradient_errors(layer: GoatLayer, X, Y, task_weight: float = 1.0) -> dict[str, float]:
    """Relative error of each analytic gradient block against central differences."""
    fb = forward_batch(layer, X)
    mask = fb.mask
    G = task_weight * (fb.y - Y) / X.shape[0]
    grads = backward_batch(layer, X, fb, G)

    def loss(lay):
        if task_weight:
            return _layer_loss(lay, X, Y, mask)
        logits = forward_batch(lay, X, mask).logits
        return lay.balance_coeff * balance_terms(mask, logits, lay.k)[0]

    errs = {}

    def rel(analytic, numeric):
        return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12))

    for i, e in enumerate(layer.experts):
        def fb_(bm, i=i):
            ex = list(layer.experts)
            ex[i] = replace(ex[i], b=bm)
            return loss(replace(layer, experts=tuple(ex)))

        def fa_(am, i=i):
            ex = list(layer.experts)
            ex[i] = replace(ex[i], a=am)
            return loss(replace(layer, experts=tuple(ex)))

        if task_weight:
            errs[f"b{i}"] = rel(grads.g_b[i], finite_diff_grad(fb_, e.b))
            errs[f"a{i}"] = rel(grads.g_a[i], finite_diff_grad(fa_, e.a))
    errs["router"] = rel(grads.g_wz, finite_diff_grad(
        lambda wz: loss(replace(layer, router=Router(wz=wz, k=layer.k))), layer.router.wz))
    return errs


@_timed
def check_gradients(fixtures: int = 20, variants=VARIANTS, seed: int = 6, tol: float = 1e-5) -> list[Check]:
    out = []
    for v in variants:
        worst_full, worst_bal = 0.0, 0.0
        for j in range(fixtures):
            layer, X, Y = gradient_fixture(v, Rng(seed).child(v).child(j))
            worst_full = max(worst_full, max(gradient_errors(layer, X, Y).values()))
            worst_bal = max(worst_bal, gradient_errors(layer, X, Y, task_weight=0.0)["router"])
        out.append(Check(6, f"{v}: expert and router gradients vs finite differences", worst_full <= tol,
                         f"worst relative error {worst_full:.2e} over {fixtures} fixtures", f"<= {tol:g}"))
        out.append(Check(6, f"{v}: balance-loss router gradient vs finite differences", worst_bal <= tol,
                         f"worst relative error {worst_bal:.2e}", f"<= {tol:g}"))
    return out


# --------------------------------------------------------------------------
# 7: initialisation alignment and damping


@_timed
def check_init_alignment(fixtures: int = 10, variants=VARIANTS, seed: int = 7) -> list[Check]:
    worst = 0.0
    for j in range(fixtures):
        rng = Rng(seed).child(j)
        w0 = rng.child("w0").normal((24, 32))
        bound = 1e-8 * max(1.0, np.linalg.norm(w0))
        for v in variants:
            for st in (STRATEGIES if v != "ZeroMoE" else ("O",)):
                for E, r in ((8, 8), (4, 16)):
                    layer = build_goat_layer(w0, E=E, k=2, r=r, rng=rng, variant=v, strategy=st)
                    worst = max(worst, alignment_residual(layer, w0) / bound)
    out = [Check(7, f"alignment residual for {', '.join(variants)} x all strategies", worst <= 1.0,
                 f"worst residual {worst:.2e} x 1e-8 max(1, ||W0||)", "<= 1e-8 max(1, ||W0||)")]
    for v in [x for x in variants if x != "ZeroMoE"]:
        lower = 0
        for j in range(fixtures):
            rng = Rng(seed).child("rho").child(j)
            w0 = rng.child("w0").normal((24, 32))
            X = rng.child("x").normal((2000, 32))
            var = {rho: equivalent_weight_variance(build_goat_layer(w0, rng=rng, variant=v, rho=rho), X)
                   for rho in (1.0, 10.0)}
            lower += var[10.0] < var[1.0]
        out.append(Check(7, f"{v}: rho=10 lowers equivalent-weight variance vs rho=1", lower == fixtures,
                         f"lower in {lower}/{fixtures} fixtures", f"{fixtures}/{fixtures}"))
    return out


# --------------------------------------------------------------------------
# 8: constructed alignment trajectories


@_timed
def check_trajectories(seed: int = 8, steps: int = 100, include_goat_s: bool = True) -> list[Check]:
    t0 = time.perf_counter()
    task = make_regression_task(16, 16, Rng(seed).child("task"))
    out = []
    rep = run_constructed_alignment(task, E=1, k=1, steps=steps, seed=seed)
    gap = float(np.max(rep.weight_gaps))
    out.append(Check(8, "single expert vs full tuning: max weight gap", gap <= 1e-6,
                     f"{gap:.2e} over {len(rep) - 1} steps", "<= 1e-6"))
    cases = [("shared scale", 1e-3)]
    if include_goat_s:
        f = svd(task.w0)
        specs = make_segments(16, 16, 2, 2, "O")
        sums = [float(np.sum(f.sigma[sp.start:sp.stop])) for sp in specs]
        cases.append(("GOAT-s scales", goat_s_scales(sums, 1e-3)))
    for label, s in cases:
        rep = run_constructed_alignment(task, E=2, k=1, steps=steps, seed=seed, s=s)
        agree = sum(r.routes_agree for r in rep.rows)
        gap = max(r.expert_gap for r in rep.rows)
        out.append(Check(8, f"2-expert upcycled MoE ({label}): routing identical every step", agree == len(rep),
                         f"{agree}/{len(rep)} steps", f"{len(rep)}/{len(rep)}"))
        out.append(Check(8, f"2-expert upcycled MoE ({label}): max per-expert weight gap", gap <= 1e-6,
                         f"{gap:.2e}", "<= 1e-6"))
    out.append(_runtime(8, "trajectories", t0, 60.0))
    return out


# --------------------------------------------------------------------------
# 9 and 10: desk-scale training trends


def _desk_run(variant: str, seed: int, steps: int, balance_coeff: float = 1e-3, eval_steps=(), eval_size=2048):
    task = make_regression_task(64, 64, Rng(seed).child("task"))
    cfg = ExperimentConfig(variant=variant, E=8, k=2, r=8, lr=0.01, steps=steps, seed=seed,
                           balance_coeff=balance_coeff, reference="none", eval_steps=eval_steps,
                           eval_size=eval_size)
    return run_alignment_experiment(task, cfg)


@_timed
def check_convergence(seeds=range(5), steps: int = 2000, early: int = 200) -> list[Check]:
    final = {v: [] for v in ("GOAT", "ZeroMoE")}
    at_early = {v: [] for v in final}
    for v in final:
        for seed in seeds:
            rep = _desk_run(v, seed, steps, eval_steps=(early, steps))
            final[v].append(rep.eval_losses[steps])
            at_early[v].append(rep.eval_losses[early])
    mg, mz = float(np.median(final["GOAT"])), float(np.median(final["ZeroMoE"]))
    wins = int(np.sum(np.array(at_early["GOAT"]) <= np.array(at_early["ZeroMoE"])))
    n = len(final["GOAT"])
    return [
        Check(9, "median final loss GOAT <= ZeroMoE", mg <= mz, f"GOAT {mg:.4f} vs ZeroMoE {mz:.4f}", "GOAT <= ZeroMoE"),
        Check(9, f"loss at step {early}: GOAT <= ZeroMoE per seed", wins >= 4,
              f"{wins}/{n} seeds", ">= 4/5 seeds"),
    ]


def load_deviation(loads: np.ndarray) -> float:
    """Largest relative deviation of an expert's load share from ``1/E``."""
    E = loads.size
    return float(np.max(np.abs(loads * E - 1.0)))


@_timed
def check_load_balance(seeds=range(5), steps: int = 2000, band: float = 0.15) -> list[Check]:
    devs = {}
    for coeff in (1e-3, 0.0):
        devs[coeff] = [load_deviation(_desk_run("GOAT", s, steps, balance_coeff=coeff, eval_size=8192).final_loads)
                       for s in seeds]
    med = float(np.median(devs[1e-3]))
    worst0 = float(np.max(devs[0.0]))
    return [
        Check(10, "balance_coeff=1e-3: median max load deviation", med <= band,
              f"{med:.1%} (per seed {', '.join(f'{d:.1%}' for d in devs[1e-3])})", f"<= {band:.0%}"),
        Check(10, "balance_coeff=0: some seed outside the band", worst0 > band,
              f"largest {worst0:.1%} (per seed {', '.join(f'{d:.1%}' for d in devs[0.0])})", f"> {band:.0%}"),
    ]


# --------------------------------------------------------------------------
# 11: best rank-r block


@_timed
def check_block_optimality(matrices: int = 20, seed: int = 11) -> list[Check]:
    worst_tail = 0.0
    ok = True
    for j in range(matrices):
        rng = Rng(seed).child(j)
        m, n = (int(v) for v in rng.generator.integers(4, 17, 2))
        w0 = rng.normal((m, n))
        r = int(rng.generator.integers(1, min(m, n) + 1))
        dec = block_decompose(w0, r)
        res = [np.linalg.norm(w0 - dec.block(i)) for i in range(len(dec))]
        ok &= int(np.argmin(res)) == 0 and best_rank_r_block(dec, w0) == 0
        tail = np.sqrt(np.sum(np.linalg.svd(w0, compute_uv=False)[r:] ** 2))
        worst_tail = max(worst_tail, abs(res[0] - tail))
    return [
        Check(11, "block 0 minimises the residual over all blocks", bool(ok), f"{'all' if ok else 'not all'} of {matrices}",
              f"all {matrices}"),
        Check(11, "block-0 residual equals the singular-value tail", worst_tail <= 1e-9, f"worst |diff| {worst_tail:.2e}",
              "<= 1e-9"),
    ]


# --------------------------------------------------------------------------
# 12: GOAT-s scales


@_timed
def check_goat_s(spectra: int = 10, seed: int = 12) -> list[Check]:
    worst = 0.0
    for j in range(spectra):
        rng = Rng(seed).child(j)
        w0 = rng.normal((32, 24))
        layer = build_goat_layer(w0, E=8, k=2, r=8, rng=rng, variant="GOAT-s")
        f = svd(w0)
        sums = np.array([np.sum(f.sigma[e.source.start:e.source.stop]) for e in layer.experts])
        lhs = layer.scales**2 * sums
        worst = max(worst, float(np.max(np.abs(lhs - lhs[0]) / lhs[0])))
    return [Check(12, "s_i^2 * sigma_i equals s_1^2 * sigma_0", worst <= 1e-12, f"worst relative gap {worst:.2e}",
                  "<= 1e-12")]


# --------------------------------------------------------------------------
# suites

SUITES: dict[str, tuple[Callable[[], list[Check]], ...]] = {
    "cost": (check_cost,),
    "lemmas": (check_router_stats, check_w_res, check_gradient_scale, check_block_optimality, check_goat_s),
    "gradients": (check_gradients,),
    "alignment": (check_step_expansion, check_init_alignment, check_trajectories),
    "training": (check_convergence, check_load_balance),
}
SUITES["all"] = tuple(fn for name in ("cost", "lemmas", "gradients", "alignment", "training") for fn in SUITES[name])


def run_suite(name: str, emit: Callable[[str], None] | None = None) -> list[Check]:
    if name not in SUITES:
        raise KeyError(name)
    results = []
    for fn in SUITES[name]:
        for c in fn():
            results.append(c)
            if emit is not None:
                emit(c.line())
    return results
