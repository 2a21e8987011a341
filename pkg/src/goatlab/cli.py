"""``goatlab`` command line: verify, train, compare, inspect-init, cost."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import checks, costmodel
from .align import DENSE_VARIANTS, LORA_VARIANTS, DenseMoE, ExperimentConfig, LoraModel, build_model, build_reference, train
from .errors import ConfigError, DomainError, RunError
from .moe import alignment_residual, save_layer
from .numkit import Rng, svd, write_matrix
from .svdseg import Strategy
from .tasks import make_cluster_task, make_regression_task

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RUN = 0, 1, 2, 3

VARIANTS = LORA_VARIANTS + DENSE_VARIANTS
REFERENCES = ("auto", "none", "fullft", "fullftmoe")
SCALE_RANKS = ("expert", "total", "rho")


@dataclass
class RunConfig:
    seed: int = 0
    task: str = "regression"  # regression | clusters
    m: int = 64
    n: int = 64
    n_classes: int = 16
    teacher: str = "random"
    teacher_rank: int = 8
    teacher_scale: float = 1.0
    noise: float = 0.1
    separation: float = 1.0
    variant: str = "GOAT"
    E: int = 8
    k: int = 2
    r: int = 8
    rho: float = 10.0
    eta: float = 1.0
    balance_coeff: float = 1e-3
    strategy: str = "O"
    scale_rank: str = "expert"
    s: float | None = None
    steps: int = 200
    lr: float = 0.01
    batch_size: int = 32
    eval_size: int = 1024
    reference: str = "auto"
    record_wall_time: bool = False
    output_dir: str = "runs/run"

    def validate(self) -> "RunConfig":
        p = []

        def need(cond, msg):
            if not cond:
                p.append(msg)

        need(isinstance(self.seed, int) and 0 <= self.seed < 2**64, "seed: must be an integer in [0, 2^64)")
        need(self.task in ("regression", "clusters"), "task: must be 'regression' or 'clusters'")
        for f in ("m", "n", "n_classes", "teacher_rank", "E", "k", "r", "batch_size"):
            need(isinstance(getattr(self, f), int) and getattr(self, f) >= 1, f"{f}: must be a positive integer")
        need(isinstance(self.steps, int) and self.steps >= 0, "steps: must be a non-negative integer")
        need(isinstance(self.eval_size, int) and self.eval_size >= 1, "eval_size: must be a positive integer")
        for f in ("rho", "eta", "lr", "separation"):
            need(_num(getattr(self, f)) and getattr(self, f) > 0, f"{f}: must be a positive number")
        for f in ("teacher_scale", "noise", "balance_coeff"):
            need(_num(getattr(self, f)) and getattr(self, f) >= 0, f"{f}: must be a non-negative number")
        need(self.s is None or (_num(self.s) and self.s > 0), "s: must be null or a positive number")
        need(self.variant in VARIANTS, f"variant: must be one of {', '.join(VARIANTS)}")
        need(self.teacher in ("random", "spectral"), "teacher: must be 'random' or 'spectral'")
        need(self.reference in REFERENCES, f"reference: must be one of {', '.join(REFERENCES)}")
        need(self.scale_rank in SCALE_RANKS, f"scale_rank: must be one of {', '.join(SCALE_RANKS)}")
        need(isinstance(self.record_wall_time, bool), "record_wall_time: must be true or false")
        need(isinstance(self.output_dir, str) and self.output_dir != "", "output_dir: must be a non-empty path")
        try:
            Strategy.parse(self.strategy)
        except DomainError:
            p.append("strategy: must be one of O, P, M, R")
        if not p:
            m, n = self.out_shape
            h = min(m, n)
            need(self.k <= self.E, f"k: must not exceed E={self.E}")
            need(self.r % self.E == 0, f"r: must be a multiple of E={self.E}")
            need(self.r <= h, f"r: must not exceed min(m, n)={h}")
            need(self.teacher_rank <= h, f"teacher_rank: must not exceed min(m, n)={h}")
            if self.variant in ("GOAT", "GOAT-s") and self.r % self.E == 0:
                need(self.r // self.E <= h // self.E, f"r: per-expert rank exceeds spectrum share {h // self.E}")
        if p:
            raise ConfigError(p)
        return self

    @property
    def out_shape(self) -> tuple[int, int]:
        return (self.n_classes, self.n) if self.task == "clusters" else (self.m, self.n)

    def experiment(self) -> ExperimentConfig:
        return ExperimentConfig(
            variant=self.variant, E=self.E, k=self.k, r=self.r, rho=self.rho, eta=self.eta,
            strategy=self.strategy, balance_coeff=self.balance_coeff, scale_rank=self.scale_rank, s=self.s,
            lr=self.lr, steps=self.steps, batch_size=self.batch_size, seed=self.seed, reference=self.reference,
            eval_steps=(self.steps,), eval_size=self.eval_size,
        )

    def make_task(self):
        rng = Rng(self.seed).child("task")
        if self.task == "clusters":
            return make_cluster_task(self.n, self.n_classes, rng, separation=self.separation)
        return make_regression_task(self.m, self.n, rng, teacher_rank=self.teacher_rank,
                                    teacher_scale=self.teacher_scale, noise=self.noise, teacher=self.teacher)


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x)


def load_config(path: str | Path, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc.strerror}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"config: invalid JSON ({exc.msg} at line {exc.lineno})"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["config: top level must be a JSON object"])
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError([f"{key}: unknown key" for key in unknown])
    cfg = RunConfig(**raw)
    if env.get("GOATLAB_SEED"):
        try:
            cfg.seed = int(env["GOATLAB_SEED"])
        except ValueError:
            raise ConfigError(["GOATLAB_SEED: must be an integer"]) from None
    return cfg.validate()


# --------------------------------------------------------------------------
# train


def _metrics_rows(report, E: int, record_wall_time: bool):
    header = ["step", "loss", "balance_loss"] + [f"f{i + 1}" for i in range(E)] + ["weight_gap", "wall_ms"]
    rows = [header]
    for r in report.rows:
        rows.append(
            [r.step, format(r.loss_lora, ".17g"), format(r.balance_loss, ".17g")]
            + [format(float(x), ".17g") for x in r.loads]
            + ["" if r.weight_gap is None else format(r.weight_gap, ".17g"),
               format(r.wall_ms if record_wall_time else 0.0, ".3f")]
        )
    return rows


def _write_csv(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _snapshot(model, directory: Path, seed: int) -> None:
    if isinstance(model, LoraModel):
        save_layer(model.layer, directory, seed)
        return
    directory.mkdir(parents=True, exist_ok=True)
    for i, w in enumerate(model.weights):
        write_matrix(directory / f"expert{i}_w.txt", w)
    write_matrix(directory / "router.txt", model.router.wz)
    manifest = {"variant": "dense", "E": len(model.weights), "k": model.k, "seed": seed}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_training(cfg: RunConfig, out: Path | None = None) -> dict:
    """Run one configured experiment and write its output directory."""
    out = Path(cfg.output_dir) if out is None else out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    task = cfg.make_task()
    exp = cfg.experiment()
    rng = Rng(cfg.seed)
    model = build_model(task, exp, rng)
    reference = build_reference(task, exp, rng, model)
    E = model.router.num_experts
    try:
        report = train(model, task, rng, exp.steps, exp.lr, exp.batch_size, reference=reference, eta_ratio=exp.eta,
                       eval_steps=(0, exp.steps), eval_size=exp.eval_size)
    except RunError as exc:
        partial = getattr(exc, "partial", None)
        if partial is not None:
            _write_csv(out / "metrics.csv", _metrics_rows(partial, E, cfg.record_wall_time))
        summary = {"status": "diverged", "error": str(exc), "step": exc.step}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        raise
    _write_csv(out / "metrics.csv", _metrics_rows(report, E, cfg.record_wall_time))
    _snapshot(report.model, out / "snapshot", cfg.seed)
    last = report.rows[-1]
    summary = {
        "status": "ok",
        "variant": cfg.variant,
        "seed": cfg.seed,
        "steps": cfg.steps,
        "initial_eval_loss": report.eval_losses[0],
        "final_eval_loss": report.eval_losses[cfg.steps],
        "final_train_loss": last.loss_lora,
        "final_reference_loss": last.loss_ref,
        "final_weight_gap": last.weight_gap,
        "max_weight_gap": None if last.weight_gap is None else float(np.max(report.weight_gaps)),
        "final_loads": [float(x) for x in report.final_loads],
        "max_load_deviation": checks.load_deviation(report.final_loads),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    summary = run_training(cfg)
    print(f"final eval loss {summary['final_eval_loss']:.6g}; outputs in {cfg.output_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    """Paired runs of several variants over several seeds; reports medians."""
    base = load_config(args.config)
    root = Path(args.output_dir or base.output_dir)
    results = {}
    for v in args.variants:
        finals = []
        for seed in args.seeds:
            cfg = RunConfig(**{**asdict(base), "variant": v, "seed": seed, "output_dir": str(root / f"{v}-seed{seed}")})
            finals.append(run_training(cfg.validate())["final_eval_loss"])
        results[v] = {"final_eval_losses": finals, "median": float(np.median(finals))}
        print(f"{v}: median final eval loss {results[v]['median']:.6g} over seeds {list(args.seeds)}")
    best = min(results, key=lambda v: results[v]["median"])
    summary = {"seeds": list(args.seeds), "variants": results, "lowest_median": best}
    root.mkdir(parents=True, exist_ok=True)
    (root / "compare.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"lowest median: {best}")
    return EXIT_OK


# --------------------------------------------------------------------------
# inspect-init


def inspect_init(cfg: RunConfig) -> dict:
    task = cfg.make_task()
    exp = cfg.experiment()
    model = build_model(task, exp, Rng(cfg.seed))
    if not isinstance(model, LoraModel):
        raise ConfigError([f"variant: inspect-init needs a LoRA variant, got {cfg.variant}"])
    layer = model.layer
    sigma = svd(task.w0).sigma
    experts = []
    for i, e in enumerate(layer.experts):
        src = e.source
        experts.append({
            "expert": i + 1,
            "start": None if src is None else src.start,
            "width": e.rank,
            "sigma_sum": 0.0 if src is None else float(np.sum(sigma[src.start:src.stop])),
            "scale": e.scale,
            "ba_norm": float(np.linalg.norm(e.product())),
            "delta_norm": float(np.linalg.norm(e.delta())),
        })
    return {
        "variant": layer.variant,
        "strategy": layer.strategy,
        "rho": layer.rho,
        "experts": experts,
        "w_res_norm": float(np.linalg.norm(task.w0 - layer.w_base)),
        "residual": alignment_residual(layer, task.w0),
    }


def cmd_inspect_init(args) -> int:
    info = inspect_init(load_config(args.config))
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"variant {info['variant']}  strategy {info['strategy']}  rho {info['rho']:g}")
    print(f"{'expert':>6} {'start':>6} {'width':>5} {'sigma_sum':>12} {'scale':>10} {'|b a|_F':>12}")
    for e in info["experts"]:
        start = "-" if e["start"] is None else e["start"]
        print(f"{e['expert']:>6} {start:>6} {e['width']:>5} {e['sigma_sum']:>12.6g} {e['scale']:>10.4g} {e['ba_norm']:>12.6g}")
    print(f"|W_res|_F {info['w_res_norm']:.6g}  residual |w_base + W_res - W0|_F {info['residual']:.3e}")
    return EXIT_OK


# --------------------------------------------------------------------------
# cost and verify


def cmd_cost(args) -> int:
    if args.table:
        rows = costmodel.cost_table(args.rounding)
        print("backbone,method,trainable_params,proportion,rounded,reported")
        for r in rows:
            print(f"{r['backbone']},{r['method']},{r['trainable']:.0f},{r['proportion']:.6f},{r['computed']},{r['reported'] or ''}")
        return EXIT_OK
    if not args.backbone or not args.method:
        raise DomainError("cost needs <backbone> <method> unless --table is given")
    spec = costmodel.get_backbone(args.backbone)
    rep = costmodel.param_count(spec, args.method)
    print(f"{spec.name} {rep.method}: trainable {rep.trainable_params:.0f} of full {rep.total_params:.0f} "
          f"-> {costmodel.format_percent(rep.proportion, args.rounding)}%")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = checks.run_suite(args.suite, emit=print)
    failed = [c for c in results if not c.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="goatlab", description="SVD-seeded LoRA mixture-of-experts toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("verify", help="run property suites")
    v.add_argument("suite", choices=sorted(checks.SUITES))
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train one configured run")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", help="paired runs of several variants over several seeds")
    c.add_argument("--config", required=True)
    c.add_argument("--variants", nargs="+", default=["GOAT", "ZeroMoE"], choices=VARIANTS)
    c.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2, 3, 4])
    c.add_argument("--output-dir")
    c.set_defaults(func=cmd_compare)

    i = sub.add_parser("inspect-init", help="per-expert report of an initial layer")
    i.add_argument("--config", required=True)
    i.add_argument("--json", action="store_true")
    i.set_defaults(func=cmd_inspect_init)

    k = sub.add_parser("cost", help="parameter counts of the compared methods")
    k.add_argument("backbone", nargs="?")
    k.add_argument("method", nargs="?")
    k.add_argument("--table", action="store_true")
    k.add_argument("--rounding", choices=costmodel.ROUNDING_MODES, default="truncate")
    k.set_defaults(func=cmd_cost)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"goatlab: config error: {problem}", file=sys.stderr)
        return EXIT_USAGE
    except DomainError as exc:
        print(f"goatlab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunError as exc:
        print(f"goatlab: run error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
