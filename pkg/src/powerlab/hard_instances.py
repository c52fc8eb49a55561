"""Three-armed reward-hacking constructions and their Monte-Carlo reproductions.

Arms are 0-based: the well-covered pair is ``(0, 1)`` and the poorly covered
pair ``(0, 2)``.  Only ``theta[2]`` is learned; the other two parameters are
fixed at their best-in-class values by an oracle.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .bandit import (
    BanditInstance,
    PreferenceDataset,
    SoftmaxPolicy,
    canonical_pair,
    make_rng,
    performance,
    sample_comparisons,
    trial_rng,
)
from .objectives import LossContext, MethodSpec, initial_labels
from .trainer import TrainConfig, suggest_learning_rate, train

E = math.e
SETUPS = ("instance1", "instance2", "type2")
PROPOSITION_SETUPS = {1: ("instance1", "instance2"), 2: ("type2",), 4: ("instance1", "instance2", "type2")}
PROPOSITION_METHODS = {
    1: ("dpo", "ipo", "simpo", "chipo"),
    2: ("dpo", "dpo+sft", "simpo", "ipo", "chipo"),
    4: ("power",),
}
FREE_ARM = 2
THETA_TOL = 1e-3
DEFAULT_STEPS = 5000


@dataclass(frozen=True)
class EventSpec:
    """Condition: ``pair`` appears exactly ``count`` times and ``winner`` wins each time."""

    pair: tuple[int, int]
    count: int
    winner: int

    def __post_init__(self):
        object.__setattr__(self, "pair", canonical_pair(*self.pair))
        if self.winner not in self.pair:
            raise ValueError(f"winner {self.winner} is not part of pair {self.pair}")
        if self.count < 1:
            raise ValueError("event count must be >= 1")

    def holds(self, dataset: PreferenceDataset) -> bool:
        return bool(event_mask(self, dataset.arm_a, dataset.arm_b, dataset.label))


def event_mask(event: EventSpec, arm_a, arm_b, label) -> np.ndarray:
    """Event indicator per row of ``(trials, n)`` comparison arrays."""
    lo, hi = event.pair
    on_pair = (arm_b == lo) & (arm_a == hi)
    hi_won = label == 1
    winner_ok = hi_won if event.winner == hi else ~hi_won
    return (on_pair.sum(axis=-1) == event.count) & np.all(~on_pair | winner_ok, axis=-1)


@dataclass(frozen=True, eq=False)
class HardInstanceBundle:
    """A hard instance with its reference, best-in-class parameters and oracle mask.

    ``theta_start`` is where training begins: oracle-fixed arms at their
    best-in-class values, free arms at the reference value.
    """

    name: str
    n: int
    instance: BanditInstance
    theta_init: np.ndarray
    theta_star: np.ndarray
    oracle_mask: np.ndarray
    event_spec: EventSpec
    theta_start: np.ndarray = field(init=False)

    def __post_init__(self):
        for attr in ("theta_init", "theta_star"):
            arr = np.array(getattr(self, attr), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)
        mask = np.array(self.oracle_mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "oracle_mask", mask)
        start = np.where(mask, self.theta_star, self.theta_init)
        start.setflags(write=False)
        object.__setattr__(self, "theta_start", start)
        best = best_in_class_value(self.instance)
        if performance(self.theta_star, self.instance) < best - 1e-12:
            raise ValueError(f"theta_star is not best-in-class for {self.name}")

    @property
    def best_value(self) -> float:
        return performance(self.theta_star, self.instance)

    def context(self, dataset: PreferenceDataset) -> LossContext:
        return LossContext(self.theta_start, self.theta_init, dataset, self.instance, self.oracle_mask)


def best_in_class_value(instance: BanditInstance) -> float:
    """Max of ``J`` over the parameter box.

    ``J`` is a ratio of two functions linear in ``exp(theta)``, so its maximum
    over the box sits at a vertex.
    """
    k = instance.arm_count
    vertices = np.array(list(itertools.product((0.0, 1.0), repeat=k)))
    weights = np.exp(vertices)
    values = weights @ instance.true_rewards / weights.sum(axis=1)
    return float(values.max())


def _pair_dist(n: int) -> dict:
    return {(0, 1): 1.0 - 1.0 / n, (0, 2): 1.0 / n}


def make_type1_instance(variant: int, n: int) -> HardInstanceBundle:
    """Instance where the poorly covered arm 2 has low reward and may win by chance."""
    if variant not in (1, 2):
        raise ValueError(f"variant must be 1 or 2, got {variant}")
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if variant == 1:
        rewards, init, star = (1, 0, 0), (1, 1, 1), (1, 0, 0)
    else:
        rewards, init, star = (1, 1, 0), (1, 1, 0), (1, 1, 0)
    instance = BanditInstance(rewards, (1, 1, 1), _pair_dist(n))
    return HardInstanceBundle(
        f"instance{variant}", n, instance, init, star, (True, True, False), EventSpec((0, 2), 1, 2)
    )


def make_type2_instance(n: int) -> HardInstanceBundle:
    """Instance where the poorly covered arm 2 is the best arm and may lose by chance."""
    if n < 3:
        raise ValueError(f"n must be >= 3, got {n}")
    instance = BanditInstance((0, 0, 1), (1, 1, 1), _pair_dist(n))
    return HardInstanceBundle("type2", n, instance, (0, 0, 1), (0, 0, 1), (True, True, False), EventSpec((0, 2), 1, 0))


def make_bundle(setup: str, n: int) -> HardInstanceBundle:
    if setup == "instance1":
        return make_type1_instance(1, n)
    if setup == "instance2":
        return make_type1_instance(2, n)
    if setup == "type2":
        return make_type2_instance(n)
    raise ValueError(f"unknown setup {setup!r}; expected one of {SETUPS}")


def force_event(bundle: HardInstanceBundle, n: int | None = None, seed=0) -> PreferenceDataset:
    """Dataset realizing the bundle's event exactly.

    ``n - count`` comparisons of the other pair with Bradley-Terry labels from
    ``seed``, followed by ``count`` comparisons of the event pair won by the
    event winner.
    """
    n = bundle.n if n is None else n
    ev = bundle.event_spec
    if n <= ev.count:
        raise ValueError(f"n must exceed the event count {ev.count}")
    others = [tuple(p) for p in bundle.instance.pairs.tolist() if tuple(p) != ev.pair]
    if len(others) != 1:
        raise ValueError("forcing needs exactly one pair besides the event pair")
    lo, hi = others[0]
    rng = make_rng(seed)
    r = bundle.instance.true_rewards
    m = n - ev.count
    labels = (rng.random(m) < expit(r[hi] - r[lo])).astype(np.int64)
    ev_label = 1 if ev.winner == ev.pair[1] else 0
    arm_a = np.concatenate([np.full(m, hi), np.full(ev.count, ev.pair[1])])
    arm_b = np.concatenate([np.full(m, lo), np.full(ev.count, ev.pair[0])])
    label = np.concatenate([labels, np.full(ev.count, ev_label)])
    return PreferenceDataset(bundle.instance.arm_count, arm_a, arm_b, label)


class EventNotObserved(RuntimeError):
    pass


def filter_event(bundle: HardInstanceBundle, n: int | None = None, seed=0, max_tries: int = 100_000) -> PreferenceDataset:
    """First sampled dataset (of size ``n``) in which the event holds."""
    n = bundle.n if n is None else n
    rng = make_rng(seed)
    batch = 256
    tried = 0
    while tried < max_tries:
        size = min(batch, max_tries - tried)
        a, b, lab = sample_comparisons(bundle.instance, (size, n), rng)
        hits = np.flatnonzero(event_mask(bundle.event_spec, a, b, lab))
        if hits.size:
            i = hits[0]
            return PreferenceDataset(bundle.instance.arm_count, a[i], b[i], lab[i])
        tried += size
    raise EventNotObserved(f"event not observed in {max_tries} sampled datasets")


@dataclass(frozen=True)
class EventEstimate:
    n: int
    trials: int
    hits: int
    lower_bound: float

    @property
    def frequency(self) -> float:
        return self.hits / self.trials

    @property
    def sigma(self) -> float:
        p = self.frequency
        return math.sqrt(p * (1 - p) / self.trials)

    @property
    def holds(self) -> bool:
        return self.frequency >= self.lower_bound - 3 * self.sigma


def event_lower_bound(n: int) -> float:
    """``(1 - 1/N)^(N-1) / (1 + e)``."""
    return (1 - 1 / n) ** (n - 1) / (1 + E)


def event_frequency(bundle: HardInstanceBundle, n: int | None = None, trials: int = 100_000, seed=0,
                    chunk: int = 20_000) -> EventEstimate:
    """Monte-Carlo frequency of the event under unconditioned sampling."""
    n = bundle.n if n is None else n
    rng = make_rng(seed)
    hits = 0
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        a, b, lab = sample_comparisons(bundle.instance, (size, n), rng)
        hits += int(event_mask(bundle.event_spec, a, b, lab).sum())
        done += size
    return EventEstimate(n, trials, hits, event_lower_bound(n))


def suboptimality(policy, bundle: HardInstanceBundle) -> float:
    """``J(pi_theta_star) - J(pi)``."""
    return bundle.best_value - performance(policy, bundle.instance)


# ---------------------------------------------------------------------------
# propositions


class HyperparameterRangeError(ValueError):
    pass


def check_validity(prop: int, spec: MethodSpec, n: int, setup: str) -> None:
    """Reject configurations outside the range a proposition covers."""
    spec.validate()
    if prop not in PROPOSITION_METHODS:
        raise HyperparameterRangeError(f"unknown proposition {prop}; expected 1, 2 or 4")
    if spec.method not in PROPOSITION_METHODS[prop]:
        raise HyperparameterRangeError(
            f"{spec.display_name} is not covered by proposition {prop} "
            f"(covered: {', '.join(PROPOSITION_METHODS[prop])})"
        )
    if setup not in PROPOSITION_SETUPS[prop]:
        raise HyperparameterRangeError(f"setup {setup} does not belong to proposition {prop}")
    if spec.beta is not None and not spec.beta > 0:
        raise HyperparameterRangeError(f"{spec.display_name} needs beta > 0")
    if spec.method == "chipo":
        limit = 1 / 3 if prop == 1 else 1.0
        if spec.beta > limit:
            raise HyperparameterRangeError(f"ChiPO needs 0 < beta <= {limit:.6g}, got {spec.beta}")
        if spec.clip_radius < 1:
            raise HyperparameterRangeError("ChiPO needs clip_radius >= 1 (clip bound at least 2)")
    if prop == 2 and spec.method == "ipo" and spec.tau > 1:
        raise HyperparameterRangeError(f"IPO needs 0 < tau <= 1, got {spec.tau}")
    if prop == 2 and spec.method == "dpo+sft" and n < 4:
        raise HyperparameterRangeError("DPO+SFT failure is established for n >= 4")
    if prop == 4 and setup != "type2":
        need = (2 + E) / (n - (2 + E)) if n > 2 + E else math.inf
        if not spec.eta > need:
            raise HyperparameterRangeError(f"POWER needs eta > (2+e)/(n-(2+e)) = {need:.6g} at n={n}, got {spec.eta}")


def analytic_optimum(prop: int, spec: MethodSpec, setup: str) -> float:
    """Closed-form optimum of the free parameter ``theta[2]``."""
    if prop == 1:
        return 1.0
    if prop == 2:
        if spec.method == "ipo":
            return max(0.0, 1.0 - 1.0 / (2.0 * spec.tau))
        return 0.0
    return 0.0


def threshold(prop: int, setup: str) -> tuple[str, float]:
    """Per-trial acceptance rule ``(direction, value)`` for the suboptimality."""
    if prop == 1:
        closed = E / (2 + E) - E / (1 + 2 * E) if setup == "instance1" else 2 * E / (1 + 2 * E) - 2 / 3
        return ">=", closed - 1e-3
    if prop == 2:
        return ">=", 0.1
    if setup == "type2":
        return ">=", 0.2
    return "<=", 1e-3


@dataclass(frozen=True)
class TrialRecord:
    prop: int
    setup: str
    method: str
    n: int
    trial: int
    mode: str
    theta_free: float
    optimum: float
    suboptimality: float
    steps: int
    passed: bool

    @property
    def theta_error(self) -> float:
        return abs(self.theta_free - self.optimum)


TRIAL_FIELDS = ("prop", "setup", "method", "n", "trial", "mode", "theta_free", "optimum", "suboptimality", "steps", "passed")


def run_trial(prop: int, setup: str, spec: MethodSpec, n: int, trial: int, seed: int,
              cfg: TrainConfig | None, mode: str = "forced") -> TrialRecord:
    bundle = make_bundle(setup, n)
    rng = trial_rng(seed, trial)
    if mode == "forced":
        dataset = force_event(bundle, n, rng)
    elif mode == "filtered":
        dataset = filter_event(bundle, n, rng)
    else:
        raise ValueError(f"mode must be 'forced' or 'filtered', got {mode!r}")
    if spec.method == "power-dl":
        dataset = dataset.with_dyn_labels(initial_labels(spec, dataset))
    ctx = bundle.context(dataset)
    if cfg is None:
        cfg = TrainConfig(suggest_learning_rate(spec, ctx), DEFAULT_STEPS, record_every=DEFAULT_STEPS)
    result = train(spec, ctx, cfg)
    theta = result.final_theta
    gap = suboptimality(theta, bundle)
    direction, bound = threshold(prop, setup)
    ok = gap >= bound if direction == ">=" else gap <= bound
    return TrialRecord(prop, setup, spec.label, n, trial, mode, float(theta.params[FREE_ARM]),
                       analytic_optimum(prop, spec, setup), gap, result.steps_run, bool(ok))


def _run_trial_args(args):
    return run_trial(*args)


@dataclass(frozen=True, eq=False)
class ExperimentReport:
    """Per-trial records plus event-frequency estimates for one proposition."""

    prop: int
    records: tuple[TrialRecord, ...]
    events: dict

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.records)

    def groups(self) -> dict:
        out: dict = {}
        for r in self.records:
            out.setdefault((r.setup, r.method, r.n, r.mode), []).append(r)
        return out

    def summary(self) -> list[dict]:
        """One row per (setup, method, n, mode); every number is a plain reduction of the trial rows."""
        rows = []
        for (setup, method, n, mode), recs in self.groups().items():
            gaps = np.array([r.suboptimality for r in recs])
            errs = np.array([r.theta_error for r in recs])
            direction, bound = threshold(self.prop, setup)
            ev = self.events.get((setup, n))
            rows.append({
                "setup": setup,
                "method": method,
                "n": n,
                "mode": mode,
                "trials": len(recs),
                "passed": sum(r.passed for r in recs),
                "threshold": f"{direction}{bound:.6f}",
                "subopt_min": float(gaps.min()),
                "subopt_mean": float(gaps.mean()),
                "subopt_max": float(gaps.max()),
                "theta_err_max": float(errs.max()),
                "event_freq": ev.frequency if ev else float("nan"),
                "event_bound": ev.lower_bound if ev else float("nan"),
            })
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRIAL_FIELDS)
        for r in self.records:
            writer.writerow([r.prop, r.setup, r.method, r.n, r.trial, r.mode, repr(r.theta_free), repr(r.optimum),
                             repr(r.suboptimality), r.steps, int(r.passed)])
        return buf.getvalue()

    def summary_csv(self) -> str:
        rows = self.summary()
        buf = io.StringIO()
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


def reproduce_proposition(prop: int, methods, trials: int, n: int, cfg: TrainConfig | None = None, seed: int = 0,
                          setups=None, mode: str = "forced", event_trials: int = 0,
                          workers: int = 1) -> ExperimentReport:
    """Train every method on ``trials`` conditioned datasets of every setup.

    ``cfg=None`` picks a step size per trial from :func:`suggest_learning_rate`
    and stops at convergence.  ``event_trials > 0`` adds an unconditioned
    Monte-Carlo estimate of the event frequency for each setup.
    """
    setups = PROPOSITION_SETUPS.get(prop, ()) if setups is None else tuple(setups)
    methods = list(methods)
    for setup in setups:
        for spec in methods:
            check_validity(prop, spec, n, setup)
    jobs = [(prop, setup, spec, n, t, seed, cfg, mode) for setup in setups for spec in methods for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_trial_args, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        records = [run_trial(*job) for job in jobs]
    events = {}
    if event_trials > 0:
        for i, setup in enumerate(setups):
            events[(setup, n)] = event_frequency(make_bundle(setup, n), n, event_trials, seed=[seed, 10_000 + i])
    return ExperimentReport(prop, tuple(records), events)


def default_methods(prop: int) -> list[MethodSpec]:
    """Hyperparameters used when none are given."""
    if prop == 1:
        return [
            MethodSpec("dpo", beta=0.1),
            MethodSpec("simpo", beta=2.0, gamma_margin=0.5),
            MethodSpec("ipo", tau=0.1),
            MethodSpec("chipo", beta=1 / 3, clip_radius=1.0),
        ]
    if prop == 2:
        return [
            MethodSpec("dpo", beta=0.1),
            MethodSpec("dpo+sft", beta=0.1, eta=0.1),
            MethodSpec("simpo", beta=2.0, gamma_margin=0.5),
            MethodSpec("ipo", tau=0.25),
            MethodSpec("chipo", beta=1.0, clip_radius=1.0),
        ]
    if prop == 4:
        return [MethodSpec("power", beta=1.0, eta=0.9)]
    raise ValueError(f"unknown proposition {prop}")
