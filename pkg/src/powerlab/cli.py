"""Command-line entry point: ``powerlab <command> [options]``.

Exit codes: 0 success, 1 invalid configuration, 2 an acceptance threshold
was violated, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import re
import sys
from datetime import datetime, timezone

import numpy as np

from . import dynamics as dyn
from .bandit import SoftmaxPolicy, sample_dataset
from .config import (
    ConfigError,
    RunConfig,
    TrainSettings,
    DynamicsSettings,
    fmt,
    instance_from_text,
    load_config,
    parse_config,
)
from .hard_instances import (
    PROPOSITION_SETUPS,
    default_methods,
    force_event,
    make_bundle,
    reproduce_proposition,
)
from .objectives import LossContext, MethodSpec, canonical_method, initial_labels
from .oracle import estimate_concentrability, gradcheck
from .trainer import NumericalFailure, TrainConfig, suggest_learning_rate, train

EXIT_OK, EXIT_CONFIG, EXIT_ACCEPTANCE, EXIT_NUMERICAL = 0, 1, 2, 3
GRADCHECK_TOL = 1e-6

DEFAULT_SPECS = {
    "dpo": dict(beta=0.1),
    "dpo+sft": dict(beta=0.1, eta=0.1),
    "cdpo": dict(beta=0.1, c_flip=0.1),
    "r-dpo": dict(beta=0.1, alpha_len=0.1),
    "ipo": dict(tau=0.1),
    "chipo": dict(beta=1 / 3, clip_radius=1.0),
    "sppo": dict(beta=0.1),
    "cpo": dict(beta=0.1, lambda_sft=0.1),
    "rrhf": dict(lambda_sft=0.1),
    "slic-hf": dict(rho_hinge=1.0, lambda_sft=0.1),
    "orpo": dict(lambda_sft=0.1),
    "simpo": dict(beta=2.0, gamma_margin=0.5),
    "ropo": dict(beta=0.1, alpha_ropo=1.0, gamma_ropo=0.1),
    "power": dict(beta=1.0, eta=0.9),
    "power-dl": dict(beta=1.0, eta=0.9, dyn_gamma=0.1),
}


def default_spec(name: str) -> MethodSpec:
    key = canonical_method(name)
    return MethodSpec(key, **DEFAULT_SPECS[key])


# ---------------------------------------------------------------------------
# output


class Writer:
    """Single writer for all run artifacts (UTF-8, LF line endings)."""

    def __init__(self, root: str):
        self.root = root
        try:
            os.makedirs(os.path.join(root, "plot"), exist_ok=True)
            probe = os.path.join(root, ".write-test")
            with open(probe, "w", encoding="utf-8") as fh:
                fh.write("")
            os.remove(probe)
        except OSError as exc:
            raise ConfigError("output directory", f"{root!r} is not writable ({exc.strerror})") from None
        self.written: list[str] = []

    def text(self, name: str, body: str) -> str:
        path = os.path.join(self.root, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(body)
        self.written.append(name)
        return path

    def rows(self, name: str, header, rows) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) if isinstance(v, (float, bool)) else v for v in row])
        return self.text(name, buf.getvalue())

    def series(self, name: str, xlabel: str, ylabel: str, xs, ys) -> str:
        lines = [f"# {xlabel} {ylabel}"]
        lines += [f"{float(x)!r} {float(y)!r}" for x, y in zip(xs, ys)]
        return self.text(os.path.join("plot", name + ".dat"), "\n".join(lines) + "\n")


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._=-]+", "_", text).strip("_")


def write_manifest(writer: Writer, cfg: RunConfig) -> None:
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    writer.text("manifest.ini", f"# written {stamp}\n" + cfg.to_ini())


# ---------------------------------------------------------------------------
# commands


def _train_config(cfg: RunConfig) -> TrainConfig | None:
    t = cfg.train
    if t.learning_rate is None:
        return None
    return TrainConfig(t.learning_rate, t.steps, record_every=t.steps, label_update=t.label_update, seed=cfg.seed)


def _setups(cfg: RunConfig, prop: int):
    if cfg.setup == "both":
        return ("instance1", "instance2")
    if cfg.setup == "file":
        raise ConfigError("[instance] setup", "propositions run on built-in instances only")
    allowed = PROPOSITION_SETUPS[prop]
    if cfg.setup not in allowed:
        if prop == 1 and cfg.setup == "instance2":
            return ("instance2",)
        return allowed
    return (cfg.setup,)


def _methods(cfg: RunConfig, prop: int) -> list[MethodSpec]:
    return list(cfg.methods) if cfg.methods else default_methods(prop)


def cmd_reproduce(cfg: RunConfig, writer: Writer) -> int:
    report = reproduce_proposition(
        cfg.prop, _methods(cfg, cfg.prop), cfg.trials, cfg.n, _train_config(cfg), cfg.seed,
        setups=_setups(cfg, cfg.prop), mode=cfg.mode, event_trials=cfg.event_trials, workers=cfg.workers,
    )
    writer.text("trials.csv", report.to_csv())
    writer.text("summary.csv", report.summary_csv())
    for (setup, method, n, mode), recs in report.groups().items():
        writer.series(f"suboptimality_{setup}_{_slug(method)}", "trial", "suboptimality",
                      [r.trial for r in recs], [r.suboptimality for r in recs])
    failed = [r for r in report.records if not r.passed]
    print(f"{len(report.records)} trials, {len(failed)} below threshold")
    return EXIT_OK if not failed else EXIT_ACCEPTANCE


def cmd_sweep(cfg: RunConfig, writer: Writer) -> int:
    if cfg.sweep_kind == "thm3":
        return _sweep_thm3(cfg, writer)
    records, summaries = [], []
    for n in cfg.n_values:
        report = reproduce_proposition(
            cfg.prop, _methods(cfg, cfg.prop), cfg.trials, n, _train_config(cfg), cfg.seed,
            setups=_setups(cfg, cfg.prop), mode=cfg.mode, event_trials=cfg.event_trials, workers=cfg.workers,
        )
        records.extend(report.records)
        summaries.extend(report.summary())
    writer.rows("trials.csv", ["prop", "setup", "method", "n", "trial", "mode", "theta_free", "optimum",
                               "suboptimality", "steps", "passed"],
                ([r.prop, r.setup, r.method, r.n, r.trial, r.mode, r.theta_free, r.optimum, r.suboptimality,
                  r.steps, int(r.passed)] for r in records))
    header = list(summaries[0])
    writer.rows("summary.csv", header, ([row[k] for k in header] for row in summaries))
    curves: dict = {}
    for row in summaries:
        curves.setdefault((row["setup"], row["method"]), []).append(row)
    for (setup, method), rows in curves.items():
        writer.series(f"subopt_vs_n_{setup}_{_slug(method)}", "n", "mean_suboptimality",
                      [r["n"] for r in rows], [r["subopt_mean"] for r in rows])
        if cfg.event_trials:
            writer.series(f"event_freq_vs_n_{setup}", "n", "event_frequency",
                          [r["n"] for r in rows], [r["event_freq"] for r in rows])
    failed = sum(not r.passed for r in records)
    print(f"{len(records)} trials over n={list(cfg.n_values)}, {failed} below threshold")
    return EXIT_OK if failed == 0 else EXIT_ACCEPTANCE


def _sweep_thm3(cfg: RunConfig, writer: Writer) -> int:
    base = cfg.dynamics.resolve()
    d = cfg.dynamics
    verdicts = dyn.sweep_theorem3(base, d.eps_l, d.mu_l, d.mu_h)
    writer.rows("thm3_sweep.csv",
                ["mu_pair", "d0", "regime", "lhs", "rhs", "slack", "holds", "conserved_residual", "gronwall_slack"],
                ([c.mu_pair, c.d0, v.regime, v.lhs, v.rhs, v.slack, v.holds, v.conserved_residual,
                  v.gronwall_slack] for c, v in verdicts))
    for d0 in sorted({c.d0 for c, _ in verdicts}):
        pts = [(c.mu_pair, v.slack) for c, v in verdicts if c.d0 == d0]
        writer.series(f"bound_slack_d0={d0:g}", "mu_pair", "slack", *zip(*pts))
    bad = [v for _, v in verdicts if v.holds is False]
    print(f"{len(verdicts)} configurations, {len(bad)} bound violations")
    return EXIT_OK if not bad else EXIT_ACCEPTANCE


def cmd_train(cfg: RunConfig, writer: Writer) -> int:
    spec = cfg.methods[0] if cfg.methods else default_spec("dpo")
    if cfg.setup == "file":
        with open(cfg.instance_path, encoding="utf-8") as fh:
            instance = instance_from_text(fh.read())
        dataset = sample_dataset(instance, cfg.n, cfg.seed)
        theta0 = np.array(cfg.train.theta0 if cfg.train.theta0 is not None else np.zeros(instance.arm_count))
        if theta0.size != instance.arm_count:
            raise ConfigError("[train] theta0", f"needs {instance.arm_count} entries")
        ctx_args = (theta0, theta0, instance, None)
    else:
        setup = "instance1" if cfg.setup == "both" else cfg.setup
        bundle = make_bundle(setup, cfg.n)
        dataset = force_event(bundle, cfg.n, np.random.default_rng(cfg.seed))
        ctx_args = (bundle.theta_start, bundle.theta_init, bundle.instance, bundle.oracle_mask)
    if spec.method == "power-dl":
        dataset = dataset.with_dyn_labels(initial_labels(spec, dataset))
    theta, theta0, instance, mask = ctx_args
    ctx = LossContext(theta, theta0, dataset, instance, mask)
    t = cfg.train
    lr = suggest_learning_rate(spec, ctx) if t.learning_rate is None else t.learning_rate
    result = train(spec, ctx, TrainConfig(lr, t.steps, t.record_every, t.label_update, cfg.seed))
    writer.text("train.csv", result.to_csv())
    writer.series("loss", "step", "loss", result.steps, result.loss_trace)
    for i in range(result.theta_trace.shape[1]):
        writer.series(f"theta_{i}", "step", f"theta_{i}", result.steps, result.theta_trace[:, i])
    if result.label_trace is not None:
        for i in range(result.label_trace.shape[1]):
            writer.series(f"label_{i}", "step", f"label_{i}", result.steps, result.label_trace[:, i])
    print(f"{spec.label}: final theta {fmt(tuple(float(v) for v in result.final_theta.params))} "
          f"after {result.steps_run} steps (lr {lr:.6g})")
    return EXIT_OK


def cmd_dynamics(cfg: RunConfig, writer: Writer) -> int:
    dcfg = cfg.dynamics.resolve()
    traj = dyn.integrate_dynamics(dcfg)
    d = cfg.dynamics
    verdict = dyn.check_theorem3(dcfg, d.eps_l, d.mu_l, d.mu_h, traj)
    writer.text("trajectory.csv", traj.to_csv())
    writer.series("d", "t", "d", traj.times, traj.d_values)
    writer.series("l", "t", "l", traj.times, traj.l_values)
    writer.series("gronwall", "t", "label_lower_bound", traj.times, dyn.gronwall_lower_bound(dcfg, traj.times))
    writer.rows("verdict.csv",
                ["regime", "d_final", "l_final", "lhs", "rhs", "slack", "holds", "conserved_residual",
                 "gronwall_slack"],
                [[verdict.regime, verdict.d_final, verdict.l_final, verdict.lhs, verdict.rhs, verdict.slack,
                  verdict.holds, verdict.conserved_residual, verdict.gronwall_slack]])
    print(verdict.message)
    return EXIT_ACCEPTANCE if verdict.holds is False or verdict.gronwall_slack < -1e-6 else EXIT_OK


def cmd_gradcheck(cfg: RunConfig, writer: Writer) -> int:
    results = [gradcheck(m, cfg.gradcheck_samples, cfg.seed, cfg.gradcheck_h) for m in cfg.gradcheck_methods]
    writer.rows("gradcheck.csv", ["method", "cases", "max_rel_error", "worst_case"],
                ([r.method, r.cases, r.max_rel_error, r.worst_case] for r in results))
    worst = max(r.max_rel_error for r in results)
    print(f"max relative error {worst:.3e} over {len(results)} methods x {cfg.gradcheck_samples} cases")
    return EXIT_OK if worst <= GRADCHECK_TOL else EXIT_ACCEPTANCE


def cmd_concentrability(cfg: RunConfig, writer: Writer) -> int:
    if cfg.setup == "file":
        with open(cfg.instance_path, encoding="utf-8") as fh:
            instance = instance_from_text(fh.read())
    else:
        instance = make_bundle("instance1" if cfg.setup == "both" else cfg.setup, cfg.n).instance
    try:
        pi, base = SoftmaxPolicy(cfg.conc_pi), SoftmaxPolicy(cfg.conc_baseline)
    except ValueError as exc:
        raise ConfigError("[concentrability]", str(exc)) from None
    value = estimate_concentrability(instance, pi, base, cfg.conc_grid_step, cfg.conc_cap)
    writer.rows("concentrability.csv", ["grid_step", "cap", "grid_lower_bound"],
                [[cfg.conc_grid_step, cfg.conc_cap, value]])
    print(f"concentrability (grid lower bound of the sup): {value!r}")
    return EXIT_OK


HANDLERS = {
    "reproduce": cmd_reproduce,
    "train": cmd_train,
    "dynamics": cmd_dynamics,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "concentrability": cmd_concentrability,
}


def run(cfg: RunConfig) -> int:
    """Execute ``cfg`` and write its artifacts; returns the exit status."""
    writer = Writer(cfg.resolved_output_dir())
    write_manifest(writer, cfg)
    return HANDLERS[cfg.command](cfg, writer)


# ---------------------------------------------------------------------------
# argument parsing


def _csv_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="powerlab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config (a manifest.ini from an earlier run works too)")
    common.add_argument("--output", help="output directory (default: $POWERLAB_OUTPUT_DIR or ./powerlab-out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value, e.g. --set train.steps=500")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reproduce", parents=[common], help="Monte-Carlo reproduction of a proposition")
    p.add_argument("--prop", type=int, choices=(1, 2, 4))
    p.add_argument("--methods", type=_csv_list, help="comma-separated method names")
    p.add_argument("--n", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--instance", choices=("1", "2", "both", "type2"))
    p.add_argument("--mode", choices=("forced", "filtered"))
    p.add_argument("--event-trials", type=int)

    p = sub.add_parser("sweep", parents=[common], help="proposition over several n, or bound sweep")
    p.add_argument("--kind", choices=("prop", "thm3"))
    p.add_argument("--prop", type=int, choices=(1, 2, 4))
    p.add_argument("--methods", type=_csv_list)
    p.add_argument("--n-values", type=lambda s: tuple(int(v) for v in _csv_list(s)))
    p.add_argument("--trials", type=int)
    p.add_argument("--instance", choices=("1", "2", "both", "type2"))
    p.add_argument("--event-trials", type=int)

    p = sub.add_parser("train", parents=[common], help="train one method on one dataset")
    p.add_argument("--method")
    p.add_argument("--instance", choices=("1", "2", "type2"))
    p.add_argument("--n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", help="learning rate or 'auto'")
    p.add_argument("--label-update", action="store_true", default=None)

    p = sub.add_parser("dynamics", parents=[common], help="integrate the gap/label ODEs and check the bounds")
    p.add_argument("--preset", choices=tuple(dyn.PRESETS))
    for name in ("alpha", "gamma", "mu-pair", "mu-win", "d0", "horizon", "step", "eps-l", "mu-l", "mu-h"):
        p.add_argument(f"--{name}", type=float)

    p = sub.add_parser("gradcheck", parents=[common], help="analytic vs finite-difference gradients")
    p.add_argument("--samples", type=int)
    p.add_argument("--methods", type=_csv_list)
    p.add_argument("--h", type=float)

    p = sub.add_parser("concentrability", parents=[common], help="grid estimate of the concentrability coefficient")
    p.add_argument("--instance", choices=("1", "2", "type2"))
    p.add_argument("--pi", type=lambda s: tuple(float(v) for v in _csv_list(s)))
    p.add_argument("--baseline", type=lambda s: tuple(float(v) for v in _csv_list(s)))
    p.add_argument("--grid-step", type=float)
    p.add_argument("--cap", type=float)
    return parser


_INSTANCE_FLAG = {"1": "instance1", "2": "instance2", "both": "both", "type2": "type2"}


def _apply_sets(cfg: RunConfig, items) -> RunConfig:
    if not items:
        return cfg
    sections: dict = {}
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError("--set", f"expected SECTION.KEY=VALUE, got {item!r}")
        path, value = item.split("=", 1)
        section, key = path.rsplit(".", 1)
        if section.startswith("method"):
            raise ConfigError("--set", "method hyperparameters are set through [method.*] sections of --config")
        sections.setdefault(section, []).append(f"{key} = {value}")
    text = "\n".join(f"[{s}]\n" + "\n".join(lines) for s, lines in sections.items())
    return parse_config(text, cfg)


def config_from_args(args) -> RunConfig:
    cfg = RunConfig(command=args.command)
    if args.config:
        cfg = load_config(args.config, cfg).replace(command=args.command)
    cfg = _apply_sets(cfg, args.set)
    changes: dict = {}
    if args.output:
        changes["output_dir"] = args.output
    for name in ("seed", "workers", "trials", "prop", "n", "mode", "n_values", "event_trials"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    if getattr(args, "kind", None):
        changes["sweep_kind"] = args.kind
    if getattr(args, "instance", None):
        changes["setup"] = _INSTANCE_FLAG[args.instance]
    prop = changes.get("prop", cfg.prop)
    if args.command in ("reproduce", "sweep") and "prop" in changes and "setup" not in changes:
        changes["setup"] = {1: "instance2", 2: "type2", 4: "both"}[prop]
    if args.command in ("reproduce", "sweep") and args.methods:
        pool = {s.method: s for s in default_methods(prop)}
        pool.update({s.method: s for s in cfg.methods})
        try:
            changes["methods"] = tuple(pool.get(canonical_method(m)) or default_spec(m) for m in args.methods)
        except ValueError as exc:
            raise ConfigError("--methods", str(exc)) from None
    if args.command == "train":
        if args.method:
            try:
                chosen = [s for s in cfg.methods if s.method == canonical_method(args.method)]
                changes["methods"] = (chosen[0] if chosen else default_spec(args.method),)
            except ValueError as exc:
                raise ConfigError("--method", str(exc)) from None
        t = cfg.train
        lr = t.learning_rate
        if args.lr is not None:
            try:
                lr = None if args.lr == "auto" else float(args.lr)
            except ValueError:
                raise ConfigError("--lr", f"expected a number or 'auto', got {args.lr!r}") from None
        steps = args.steps if args.steps is not None else t.steps
        changes["train"] = TrainSettings(lr, steps, min(t.record_every, steps),
                                         bool(args.label_update) or t.label_update, t.theta0)
    if args.command == "dynamics":
        d = cfg.dynamics
        values = {f: getattr(d, f) for f in DynamicsSettings.__dataclass_fields__}
        if args.preset:
            values.update({k: None for k in ("alpha", "gamma", "mu_pair", "mu_win", "d0", "horizon", "step")})
            values["preset"] = args.preset
        for name in ("alpha", "gamma", "mu_pair", "mu_win", "d0", "horizon", "step", "eps_l", "mu_l", "mu_h"):
            if getattr(args, name) is not None:
                values[name] = getattr(args, name)
        changes["dynamics"] = DynamicsSettings(**values)
    if args.command == "gradcheck":
        if args.samples is not None:
            changes["gradcheck_samples"] = args.samples
        if args.methods:
            changes["gradcheck_methods"] = tuple(args.methods)
        if args.h is not None:
            changes["gradcheck_h"] = args.h
    if args.command == "concentrability":
        for flag, name in (("pi", "conc_pi"), ("baseline", "conc_baseline"), ("grid_step", "conc_grid_step"),
                           ("cap", "conc_cap")):
            if getattr(args, flag) is not None:
                changes[name] = getattr(args, flag)
    return cfg.replace(**changes)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        return run(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, dyn.NumericalFailure, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
