"""Full-batch projected gradient descent on the softmax parameter box."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .bandit import SoftmaxPolicy
from .objectives import LossContext, MethodSpec, grad_batch, loss_and_grad, stationary_targets, update_labels

CONVERGENCE_TOL = 1e-8


class NumericalFailure(ArithmeticError):
    """Non-finite loss or gradient; ``step`` is the offending iteration."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    steps: int
    record_every: int = 1
    label_update: bool = False
    seed: int = 0
    tol: float = CONVERGENCE_TOL

    def __post_init__(self):
        if not self.learning_rate >= 0 or not np.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be a positive integer, got {self.steps}")
        if int(self.record_every) != self.record_every or not 1 <= self.record_every <= self.steps:
            raise ValueError(f"record_every must lie in [1, steps], got {self.record_every}")


@dataclass(frozen=True, eq=False)
class TrainResult:
    """Outcome of :func:`train`.

    Traces hold one row per recorded step; the last row is always the final
    iterate.  ``label_trace`` is ``None`` unless labels were updated.
    """

    final_theta: SoftmaxPolicy
    steps: np.ndarray
    theta_trace: np.ndarray
    loss_trace: np.ndarray
    final_labels: np.ndarray
    label_trace: np.ndarray | None
    steps_run: int
    converged: bool

    def __eq__(self, other):
        if not isinstance(other, TrainResult):
            return NotImplemented
        same_labels = (self.label_trace is None and other.label_trace is None) or (
            self.label_trace is not None
            and other.label_trace is not None
            and np.array_equal(self.label_trace, other.label_trace)
        )
        return (
            self.final_theta == other.final_theta
            and np.array_equal(self.steps, other.steps)
            and np.array_equal(self.theta_trace, other.theta_trace)
            and np.array_equal(self.loss_trace, other.loss_trace)
            and np.array_equal(self.final_labels, other.final_labels)
            and same_labels
            and self.steps_run == other.steps_run
            and self.converged == other.converged
        )

    __hash__ = None

    def to_csv(self) -> str:
        k = self.theta_trace.shape[1]
        header = ["step", "loss"] + [f"theta_{i}" for i in range(k)]
        if self.label_trace is not None:
            header += [f"label_{i}" for i in range(self.label_trace.shape[1])]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in range(self.steps.size):
            values = [int(self.steps[row]), repr(float(self.loss_trace[row]))]
            values += [repr(float(v)) for v in self.theta_trace[row]]
            if self.label_trace is not None:
                values += [repr(float(v)) for v in self.label_trace[row]]
            writer.writerow(values)
        return buf.getvalue()


def projected_gradient(theta: np.ndarray, g: np.ndarray, free: np.ndarray) -> np.ndarray:
    """Gradient with components pointing out of the box (at an active bound) removed."""
    pg = np.where(free, g, 0.0)
    pg[(theta <= 0.0) & (pg > 0)] = 0.0
    pg[(theta >= 1.0) & (pg < 0)] = 0.0
    return pg


def train(spec: MethodSpec, ctx: LossContext, cfg: TrainConfig) -> TrainResult:
    """Projected gradient descent ``theta <- clip(theta - lr * grad, 0, 1)`` on free arms.

    For POWER-DL with ``cfg.label_update`` the dynamic labels move toward their
    stationary targets after every step.  Targets are evaluated at the
    parameters the step started from, so parameters and labels advance
    together.  Labels are otherwise constants (no gradient flows through
    them).  Without label updates the run stops early once the projected
    gradient falls to ``cfg.tol``.
    """
    spec.validate()
    update = cfg.label_update and spec.method == "power-dl"
    gamma = spec.get("dyn_gamma") if update else 0.0
    theta = np.clip(np.array(ctx.theta, dtype=float), 0.0, 1.0)
    free = ctx.free
    labels = np.array(ctx.dataset.dyn_labels, dtype=float)
    current = ctx

    steps, thetas, losses, label_rows = [], [], [], []
    converged = False
    step = 0
    while True:
        current = ctx.with_theta(theta) if not update else ctx.with_theta(theta).with_labels(labels)
        value, g = loss_and_grad(spec, current)
        if not np.isfinite(value) or not np.all(np.isfinite(g)):
            raise NumericalFailure(step, f"non-finite loss {value!r} or gradient {g.tolist()}")
        last = step == cfg.steps
        if not update and np.max(np.abs(projected_gradient(theta, g, free))) <= cfg.tol:
            converged = True
            last = True
        if last or step % cfg.record_every == 0:
            steps.append(step)
            thetas.append(theta.copy())
            losses.append(value)
            if update:
                label_rows.append(labels.copy())
        if last:
            break
        new_theta = theta.copy()
        new_theta[free] = np.clip(theta[free] - cfg.learning_rate * g[free], 0.0, 1.0)
        if update:
            labels = np.asarray(update_labels(labels, stationary_targets(spec, current), gamma), dtype=float)
        theta = new_theta
        step += 1

    return TrainResult(
        final_theta=SoftmaxPolicy(theta),
        steps=np.array(steps, dtype=np.int64),
        theta_trace=np.array(thetas),
        loss_trace=np.array(losses),
        final_labels=labels,
        label_trace=np.array(label_rows) if update else None,
        steps_run=step,
        converged=converged,
    )


def suggest_learning_rate(spec: MethodSpec, ctx: LossContext, points: int = 65, max_rate: float = 1e4) -> float:
    """Step size ``1 / L`` from a finite-difference estimate of the gradient's Lipschitz constant.

    ``L`` is the largest ratio ``|g(a) - g(b)| / |a - b|`` over a fixed set of
    nearby point pairs spread through the free part of the box, so the result
    is deterministic for a given problem.
    """
    free = ctx.free
    if not free.any():
        return max_rate
    rng = np.random.default_rng(0)
    k = free.size
    base = np.tile(np.asarray(ctx.theta, dtype=float), (points, 1))
    if free.sum() == 1:
        base[:, free] = np.linspace(0.0, 1.0, points)[:, None]
    else:
        base[:, free] = rng.random((points, int(free.sum())))
    step = 1e-3
    base[:, free] = np.clip(base[:, free], step, 1.0 - step)
    directions = np.zeros_like(base)
    directions[:, free] = rng.standard_normal((points, int(free.sum())))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    ga = grad_batch(spec, ctx, base)
    gb = grad_batch(spec, ctx, base + step * directions)
    lip = float(np.max(np.linalg.norm(ga - gb, axis=1)) / step)
    return float(min(max_rate, 1.0 / lip)) if lip > 0 else max_rate


def learning_dynamics_step(theta_gap: float, label: float, mu_pair: float, mu_win: float, alpha: float) -> float:
    """One isolated batch update of the parameter gap ``d = theta(y1) - theta(y0)``.

    ``d + alpha * mu_pair * [(mu_win - mu_lose) * l - (sigmoid(d) - mu_lose)]``.
    """
    for name, p in (("mu_pair", mu_pair), ("mu_win", mu_win)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must be a probability, got {p}")
    mu_lose = 1.0 - mu_win
    return theta_gap + alpha * mu_pair * ((mu_win - mu_lose) * label - (expit(theta_gap) - mu_lose))
