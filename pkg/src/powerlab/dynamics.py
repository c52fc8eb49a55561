"""Coupled parameter-gap / dynamic-label ODEs for a single comparison pair.

State is ``(d, l)``: the gap ``theta(y1) - theta(y0)`` and the dynamic label.
Both move along ``B = (2 mu_win - 1) l - (sigmoid(d) - mu_lose)``::

    d' = alpha * mu_pair * B
    l' = -gamma / (2 mu_win - 1) * B
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .objectives import stationary_label, update_labels
from .trainer import learning_dynamics_step

EPS_L_MAX = 0.1


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


@dataclass(frozen=True)
class DynamicsConfig:
    alpha: float
    gamma: float
    mu_pair: float
    mu_win: float
    d0: float
    horizon: float
    step: float | None = None

    def __post_init__(self):
        for name in ("alpha", "gamma", "mu_pair", "mu_win", "d0", "horizon"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.step is None:
            object.__setattr__(self, "step", min(0.01, self.horizon / 1e4))
        object.__setattr__(self, "step", float(self.step))
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.mu_pair <= 1.0:
            raise ValueError(f"mu_pair must lie in [0, 1], got {self.mu_pair}")
        if not 0.5 < self.mu_win < 1.0:
            raise ValueError(f"mu_win must lie in (1/2, 1), got {self.mu_win}")
        if not math.isfinite(self.d0):
            raise ValueError("d0 must be finite")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")
        if not 0 < self.step <= self.horizon:
            raise ValueError(f"step must lie in (0, horizon], got {self.step}")

    @property
    def mu_lose(self) -> float:
        return 1.0 - self.mu_win

    @property
    def kappa(self) -> float:
        return (1.0 - self.mu_win) / (2.0 * self.mu_win - 1.0)

    @property
    def c(self) -> float:
        s = _sigmoid(self.d0)
        return min(s * (1.0 - s), self.mu_win * self.mu_lose)

    def replace(self, **changes) -> "DynamicsConfig":
        data = {k: getattr(self, k) for k in ("alpha", "gamma", "mu_pair", "mu_win", "d0", "horizon", "step")}
        data.update(changes)
        return DynamicsConfig(**data)


PRESETS = {
    "thm3-low": dict(alpha=0.5, gamma=0.05, mu_pair=0.004, mu_win=0.75, d0=-1.0, horizon=40.0),
    "thm3-high": dict(alpha=0.5, gamma=0.05, mu_pair=0.8, mu_win=0.75, d0=-1.0, horizon=40.0),
}
PRESET_BOUNDS = dict(eps_l=0.05, mu_l=0.005, mu_h=0.5)


@dataclass(frozen=True, eq=False)
class DynamicsTrajectory:
    times: np.ndarray
    d_values: np.ndarray
    l_values: np.ndarray

    def __post_init__(self):
        if not (self.times.shape == self.d_values.shape == self.l_values.shape):
            raise ValueError("times, d_values and l_values must be aligned")

    @property
    def final(self) -> tuple[float, float]:
        return float(self.d_values[-1]), float(self.l_values[-1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "d", "l", "sigma_d"])
        for t, d, l in zip(self.times, self.d_values, self.l_values):
            writer.writerow([repr(float(t)), repr(float(d)), repr(float(l)), repr(_sigmoid(float(d)))])
        return buf.getvalue()


class NumericalFailure(ArithmeticError):
    pass


def rk4(f, y0, horizon: float, step: float):
    """Classical fixed-step Runge-Kutta on ``[0, horizon]``.

    The step is shrunk slightly so that a whole number of steps lands on
    ``horizon``.  Returns ``(times, states)``.
    """
    n = max(1, round(horizon / step))
    h = horizon / n
    y = np.array(y0, dtype=float)
    states = np.empty((n + 1, y.size))
    states[0] = y
    for i in range(n):
        t = i * h
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NumericalFailure(f"non-finite state at t={t + h!r}")
        states[i + 1] = y
    return np.arange(n + 1) * h, states


def integrate_dynamics(cfg: DynamicsConfig) -> DynamicsTrajectory:
    """Integrate from ``(d0, 1)`` to ``cfg.horizon`` with RK4 at ``cfg.step``."""
    a = cfg.alpha * cfg.mu_pair
    gap = 2.0 * cfg.mu_win - 1.0
    g = cfg.gamma / gap
    lose = cfg.mu_lose
    n = max(1, round(cfg.horizon / cfg.step))
    h = cfg.horizon / n
    d_vals = np.empty(n + 1)
    l_vals = np.empty(n + 1)
    d, l = cfg.d0, 1.0
    d_vals[0], l_vals[0] = d, l

    def bracket(d, l):
        return gap * l - (_sigmoid(d) - lose)

    # scalar RK4: same scheme as rk4(), unrolled for speed
    for i in range(n):
        b1 = bracket(d, l)
        b2 = bracket(d + h / 2 * a * b1, l - h / 2 * g * b1)
        b3 = bracket(d + h / 2 * a * b2, l - h / 2 * g * b2)
        b4 = bracket(d + h * a * b3, l - h * g * b3)
        b = (b1 + 2 * b2 + 2 * b3 + b4) / 6
        d += h * a * b
        l -= h * g * b
        if not (math.isfinite(d) and math.isfinite(l)):
            raise NumericalFailure(f"non-finite state at t={(i + 1) * h!r}")
        d_vals[i + 1], l_vals[i + 1] = d, l
    return DynamicsTrajectory(np.arange(n + 1) * h, d_vals, l_vals)


def conserved_residual(cfg: DynamicsConfig, traj: DynamicsTrajectory) -> np.ndarray:
    """``gamma / (2 mu_win - 1) * (d - d0) + alpha * mu_pair * (l - 1)`` along the trajectory."""
    return cfg.gamma / (2 * cfg.mu_win - 1) * (traj.d_values - cfg.d0) + cfg.alpha * cfg.mu_pair * (traj.l_values - 1)


def gronwall_lower_bound(cfg: DynamicsConfig, t):
    """``-kappa + (kappa + 1) exp(-gamma t)``, a lower bound on the label at time ``t``."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > cfg.horizon * (1 + 1e-12)):
        raise ValueError(f"t must lie in [0, {cfg.horizon}]")
    k = cfg.kappa
    out = -k + (k + 1) * np.exp(-cfg.gamma * t_arr)
    return float(out) if out.ndim == 0 else out


def iterate_discrete(cfg: DynamicsConfig, h: float | None = None) -> DynamicsTrajectory:
    """Explicit discrete updates with rates ``alpha*h`` and ``gamma*h``.

    Each step applies :func:`learning_dynamics_step` to the gap and
    :func:`update_labels` toward the stationary label of the current gap.
    """
    h = cfg.step if h is None else h
    n = max(1, round(cfg.horizon / h))
    h = cfg.horizon / n
    d, l = cfg.d0, 1.0
    d_vals, l_vals = [d], [l]
    for _ in range(n):
        target = stationary_label(d, cfg.mu_win, cfg.mu_lose)
        d, l = (
            learning_dynamics_step(d, l, cfg.mu_pair, cfg.mu_win, cfg.alpha * h),
            update_labels(l, target, cfg.gamma * h),
        )
        d_vals.append(d)
        l_vals.append(l)
    return DynamicsTrajectory(np.arange(n + 1) * h, np.array(d_vals), np.array(l_vals))


class ConstraintViolation(ValueError):
    def __init__(self, constraint: str, detail: str):
        super().__init__(f"constraint violated: {constraint} ({detail})")
        self.constraint = constraint


def check_constraints(cfg: DynamicsConfig, eps_l: float, mu_l: float, mu_h: float) -> None:
    """Raise :class:`ConstraintViolation` naming the first hyperparameter condition that fails."""
    lower = cfg.alpha * mu_l / eps_l
    upper = 0.5 * math.exp(-0.25) * cfg.alpha * mu_h
    checks = [
        ("0 < eps_l <= 0.1", 0 < eps_l <= EPS_L_MAX, f"eps_l={eps_l}"),
        ("0 <= mu_l < mu_h <= 1", 0 <= mu_l < mu_h <= 1, f"mu_l={mu_l}, mu_h={mu_h}"),
        ("alpha*mu_l/eps_l <= gamma", lower <= cfg.gamma, f"{lower:.6g} > {cfg.gamma:.6g}"),
        ("gamma <= exp(-1/4)/2*alpha*mu_h", cfg.gamma <= upper, f"{cfg.gamma:.6g} > {upper:.6g}"),
        ("exp(-1/4)/2*alpha*mu_h <= 1", upper <= 1, f"{upper:.6g} > 1"),
        ("alpha*mu_win*T >= 1", cfg.alpha * cfg.mu_win * cfg.horizon >= 1,
         f"{cfg.alpha * cfg.mu_win * cfg.horizon:.6g} < 1"),
    ]
    for name, ok, detail in checks:
        if not ok:
            raise ConstraintViolation(name, detail)


@dataclass(frozen=True)
class Theorem3Verdict:
    """Outcome of a bound check.

    ``regime`` is ``"low"`` (``mu_pair <= mu_l``), ``"high"`` (``mu_pair >= mu_h``)
    or ``"none"`` in between, where no bound applies and ``holds`` is None.
    ``slack = rhs - lhs``.
    """

    regime: str
    d_final: float
    l_final: float
    lhs: float
    rhs: float
    slack: float
    holds: bool | None
    conserved_residual: float
    gronwall_slack: float

    @property
    def message(self) -> str:
        if self.holds is None:
            return "coverage between mu_l and mu_h: no bound applies"
        state = "holds" if self.holds else "is violated"
        return f"{self.regime}-coverage bound {state} (slack {self.slack:.3e})"


def check_theorem3(cfg: DynamicsConfig, eps_l: float, mu_l: float, mu_h: float,
                   traj: DynamicsTrajectory | None = None) -> Theorem3Verdict:
    check_constraints(cfg, eps_l, mu_l, mu_h)
    traj = integrate_dynamics(cfg) if traj is None else traj
    d_t, l_t = traj.final
    if cfg.mu_pair <= mu_l:
        regime, lhs, rhs = "low", abs(d_t - cfg.d0), eps_l
    elif cfg.mu_pair >= mu_h:
        regime = "high"
        lhs = (_sigmoid(d_t) - cfg.mu_win) ** 2
        rhs = math.exp(-cfg.alpha * cfg.c * cfg.mu_pair * cfg.horizon)
    else:
        regime, lhs, rhs = "none", float("nan"), float("nan")
    slack = rhs - lhs
    holds = None if regime == "none" else bool(slack >= 0)
    resid = float(np.max(np.abs(conserved_residual(cfg, traj))))
    gron = float(np.min(traj.l_values - gronwall_lower_bound(cfg, np.minimum(traj.times, cfg.horizon))))
    return Theorem3Verdict(regime, d_t, l_t, lhs, rhs, slack, holds, resid, gron)


SWEEP_MU_PAIRS = (0.001, 0.002, 0.003, 0.004, 0.005, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
SWEEP_D0 = (-2.0, -1.0, 0.0, 1.0, 2.0)


def sweep_theorem3(base: DynamicsConfig, eps_l: float, mu_l: float, mu_h: float,
                   mu_pairs=SWEEP_MU_PAIRS, d0s=SWEEP_D0) -> list[tuple[DynamicsConfig, Theorem3Verdict]]:
    """Bound verdicts over a coverage x initial-gap grid, other settings from ``base``."""
    out = []
    for mu in mu_pairs:
        for d0 in d0s:
            cfg = base.replace(mu_pair=mu, d0=d0)
            out.append((cfg, check_theorem3(cfg, eps_l, mu_l, mu_h)))
    return out
