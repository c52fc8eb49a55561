"""Brute-force checks: exhaustive grid minimization, finite differences, concentrability."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .bandit import BanditInstance, PreferenceDataset, make_rng, policy_probs
from .objectives import (
    METHODS,
    REQUIRED,
    LossContext,
    MethodSpec,
    canonical_method,
    grad,
    kink_distance,
    loss,
    loss_batch,
)
from .wer import WeightScheme

MAX_FREE_COORDS = 3
MAX_GRID_POINTS = 1_000_000
TIE_RTOL = 1e-12


class TooManyFreeCoordinates(ValueError):
    pass


class BoundaryProximityError(ValueError):
    pass


def _grid_values(resolution: float) -> np.ndarray:
    if not 0 < resolution <= 1:
        raise ValueError(f"resolution must lie in (0, 1], got {resolution}")
    return np.linspace(0.0, 1.0, int(round(1.0 / resolution)) + 1)


def grid_search_optimum(spec: MethodSpec, ctx: LossContext, resolution: float,
                        chunk: int = 20_000) -> tuple[np.ndarray, float]:
    """Minimize the loss over a regular grid of the free coordinates.

    Grid points are visited in lexicographic order and the first point within
    a relative ``1e-12`` of the minimum wins, so ties go to smaller
    coordinates.  Returns ``(theta_hat, loss_value)``.
    """
    free = np.flatnonzero(ctx.free)
    if free.size > MAX_FREE_COORDS:
        raise TooManyFreeCoordinates(f"{free.size} free coordinates; at most {MAX_FREE_COORDS} are supported")
    values = _grid_values(resolution)
    base = np.asarray(ctx.theta, dtype=float)
    if free.size == 0:
        return base.copy(), loss(spec, ctx)
    shape = (values.size,) * free.size
    total = int(np.prod(shape))
    losses = np.empty(total)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk))
        thetas = np.tile(base, (idx.size, 1))
        thetas[:, free] = values[np.stack(np.unravel_index(idx, shape), axis=1)]
        losses[idx] = loss_batch(spec, ctx, thetas)
    best = losses.min()
    pick = int(np.flatnonzero(losses <= best + TIE_RTOL * max(1.0, abs(best)))[0])
    theta = base.copy()
    theta[free] = values[list(np.unravel_index(pick, shape))]
    return theta, float(losses[pick])


def finite_diff_grad(spec: MethodSpec, ctx: LossContext, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(L(theta + h e_i) - L(theta - h e_i)) / 2h``; masked arms get 0."""
    if not h > 0:
        raise ValueError(f"h must be > 0, got {h}")
    theta = np.asarray(ctx.theta, dtype=float)
    free = ctx.free
    near = free & ((theta < h) | (theta > 1 - h))
    if near.any():
        raise BoundaryProximityError(f"free coordinates {np.flatnonzero(near).tolist()} lie within h={h} of the box")
    out = np.zeros(theta.size)
    for i in np.flatnonzero(free):
        step = np.zeros(theta.size)
        step[i] = h
        out[i] = (loss(spec, ctx.with_theta(theta + step)) - loss(spec, ctx.with_theta(theta - step))) / (2 * h)
    return out


def relative_error(analytic, numeric) -> float:
    """``max|a - b| / max(max|a|, max|b|)``, defined as 0 when both vanish."""
    a, b = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / scale)


_HYPER_RANGES = {
    "beta": (0.1, 5.0),
    "eta": (0.0, 2.0),
    "tau": (0.05, 2.0),
    "gamma_margin": (-1.0, 1.0),
    "c_flip": (0.0, 0.45),
    "clip_radius": (0.25, 3.0),
    "alpha_len": (-1.0, 1.0),
    "lambda_sft": (0.0, 2.0),
    "rho_hinge": (0.0, 2.0),
    "alpha_ropo": (0.1, 2.0),
    "gamma_ropo": (0.0, 2.0),
    "dyn_gamma": (0.0, 1.0),
}
KINK_MARGIN = 1e-3


def random_spec(method: str, rng) -> MethodSpec:
    method = canonical_method(method)
    rng = make_rng(rng)
    kwargs = {name: float(rng.uniform(*_HYPER_RANGES[name])) for name in REQUIRED[method]}
    if method in ("power", "power-dl"):
        kwargs["weights"] = WeightScheme(("constant", "inverse_length")[int(rng.integers(2))])
    return MethodSpec(method, **kwargs)


def random_context(rng, max_arms: int = 6, max_n: int = 50) -> LossContext:
    """Random instance, dataset, parameters in (0.05, 0.95) and oracle mask."""
    rng = make_rng(rng)
    k = int(rng.integers(2, max_arms + 1))
    pairs = list(itertools.combinations(range(k), 2))
    probs = rng.dirichlet(np.ones(len(pairs)))
    probs[-1] = 1.0 - probs[:-1].sum()
    instance = BanditInstance(rng.random(k), rng.integers(1, 6, k), dict(zip(pairs, probs)))
    n = int(rng.integers(1, max_n + 1))
    idx = rng.choice(len(pairs), size=n, p=instance.pair_probs)
    arm_b, arm_a = instance.pairs[idx, 0], instance.pairs[idx, 1]
    dataset = PreferenceDataset(k, arm_a, arm_b, rng.integers(0, 2, n), rng.random(n))
    mask = rng.random(k) < 0.2
    if mask.all():
        mask[int(rng.integers(k))] = False
    return LossContext(rng.uniform(0.05, 0.95, k), rng.uniform(0.05, 0.95, k), dataset, instance, mask)


def random_gradcheck_case(method: str, rng) -> tuple[MethodSpec, LossContext]:
    """Random (spec, context) whose non-smooth arguments stay clear of their kinks."""
    rng = make_rng(rng)
    while True:
        spec = random_spec(method, rng)
        ctx = random_context(rng)
        if kink_distance(spec, ctx) > KINK_MARGIN:
            return spec, ctx


@dataclass(frozen=True)
class GradcheckResult:
    method: str
    cases: int
    max_rel_error: float
    worst_case: int


def gradcheck(method: str, cases: int = 100, seed: int = 0, h: float = 1e-5) -> GradcheckResult:
    """Max relative error between analytic and central-difference gradients over random cases."""
    method = canonical_method(method)
    stream = METHODS.index(method)
    worst, worst_i = -1.0, -1
    for i in range(cases):
        spec, ctx = random_gradcheck_case(method, np.random.default_rng([seed, stream, i]))
        err = relative_error(grad(spec, ctx), finite_diff_grad(spec, ctx, h))
        if err > worst:
            worst, worst_i = err, i
    return GradcheckResult(method, cases, worst, worst_i)


# ---------------------------------------------------------------------------
# concentrability


def reward_grid(arm_count: int, step: float, cap: float) -> np.ndarray:
    """All reward vectors with entries in ``{0, step, ..., cap}``."""
    if not (step > 0 and cap >= 0):
        raise ValueError("reward grid needs step > 0 and cap >= 0")
    levels = int(round(cap / step)) + 1
    if levels**arm_count > MAX_GRID_POINTS:
        raise ValueError(f"reward grid has {levels ** arm_count} points; the limit is {MAX_GRID_POINTS}")
    values = np.arange(levels) * step
    return np.stack(np.meshgrid(*([values] * arm_count), indexing="ij"), axis=-1).reshape(-1, arm_count)


def estimate_concentrability(instance: BanditInstance, pi, pi_baseline, reward_grid_step: float = 0.1,
                             reward_cap: float = 1.0, rewards=None, zero_tol: float = 1e-15) -> float:
    """Grid lower bound on the single-policy concentrability coefficient.

    For each candidate reward ``r`` with error ``e = r* - r`` the ratio is
    ``(E_pi[e] - E_pi'[e]) / sqrt(sum_pairs mu * (e_i - e_j)^2)``.  Candidates
    with a zero denominator are skipped unless their numerator is positive, in
    which case the coefficient is unbounded and ``inf`` is returned.  The
    result is ``max(0, sup ratio)``; it is 0 when no candidate qualifies.
    ``rewards`` replaces the regular grid with explicit candidates.
    """
    k = instance.arm_count
    if rewards is None:
        if k > MAX_FREE_COORDS:
            raise ValueError(f"grid enumeration supports at most {MAX_FREE_COORDS} arms, got {k}")
        rewards = reward_grid(k, reward_grid_step, reward_cap)
    rewards = np.atleast_2d(np.asarray(rewards, dtype=float))
    if rewards.shape[1] != k:
        raise ValueError(f"candidate rewards need {k} entries")
    err = instance.true_rewards - rewards
    p, q = policy_probs(pi), policy_probs(pi_baseline)
    num = err @ p - err @ q
    i, j = instance.pairs[:, 0], instance.pairs[:, 1]
    den = ((err[:, i] - err[:, j]) ** 2) @ instance.pair_probs
    zero = den <= zero_tol
    if np.any(zero & (num > zero_tol**0.5)):
        return float("inf")
    if not np.any(~zero):
        return 0.0
    return float(max(0.0, np.max(num[~zero] / np.sqrt(den[~zero]))))
