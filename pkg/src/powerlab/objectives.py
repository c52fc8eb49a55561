"""Preference-optimization losses and their analytic gradients for softmax bandits.

Every loss is a mean over dataset samples.  Each method is written as a
function of the per-sample log-probabilities of the chosen (``y+``) and
rejected (``y-``) arm; gradients are pushed through the softmax with
``d log pi(y) / d theta = e_y - pi``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.special import expit, log_expit

from .bandit import BanditInstance, PreferenceDataset, SoftmaxPolicy, empirical_stats, log_softmax
from .wer import WeightScheme

METHODS = (
    "dpo",
    "dpo+sft",
    "cdpo",
    "r-dpo",
    "ipo",
    "chipo",
    "sppo",
    "cpo",
    "rrhf",
    "slic-hf",
    "orpo",
    "simpo",
    "ropo",
    "power",
    "power-dl",
)

DISPLAY_NAMES = {
    "dpo": "DPO",
    "dpo+sft": "DPO+SFT",
    "cdpo": "cDPO",
    "r-dpo": "R-DPO",
    "ipo": "IPO",
    "chipo": "ChiPO",
    "sppo": "SPPO-offline",
    "cpo": "CPO",
    "rrhf": "RRHF",
    "slic-hf": "SLiC-HF",
    "orpo": "ORPO",
    "simpo": "SimPO",
    "ropo": "ROPO",
    "power": "POWER",
    "power-dl": "POWER-DL",
}

_ALIASES = {name.lower(): key for key, name in DISPLAY_NAMES.items()}
_ALIASES.update({key: key for key in METHODS})
_ALIASES.update({"xpo": "chipo", "χpo": "chipo", "sppo-offline": "sppo", "slic": "slic-hf", "rdpo": "r-dpo",
                 "powerdl": "power-dl", "power_dl": "power-dl", "dpo_sft": "dpo+sft", "dposft": "dpo+sft"})

REQUIRED = {
    "dpo": ("beta",),
    "dpo+sft": ("beta", "eta"),
    "cdpo": ("beta", "c_flip"),
    "r-dpo": ("beta", "alpha_len"),
    "ipo": ("tau",),
    "chipo": ("beta", "clip_radius"),
    "sppo": ("beta",),
    "cpo": ("beta", "lambda_sft"),
    "rrhf": ("lambda_sft",),
    "slic-hf": ("rho_hinge", "lambda_sft"),
    "orpo": ("lambda_sft",),
    "simpo": ("beta", "gamma_margin"),
    "ropo": ("beta", "alpha_ropo", "gamma_ropo"),
    "power": ("beta", "eta"),
    "power-dl": ("beta", "eta", "dyn_gamma"),
}

HYPERPARAMETERS = (
    "beta",
    "eta",
    "tau",
    "gamma_margin",
    "c_flip",
    "clip_radius",
    "alpha_len",
    "lambda_sft",
    "rho_hinge",
    "alpha_ropo",
    "gamma_ropo",
    "dyn_gamma",
)

LABEL_ESTIMATES = ("aggregate", "per_sample")


def canonical_method(name: str) -> str:
    key = _ALIASES.get(str(name).strip().lower())
    if key is None:
        raise ValueError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")
    return key


class MissingHyperparameterError(ValueError):
    pass


@dataclass(frozen=True)
class MethodSpec:
    """A preference-optimization method and its hyperparameters.

    Only the fields listed in ``REQUIRED[method]`` are read; asking for an
    unset one raises :class:`MissingHyperparameterError`.  ``weights`` is read
    by POWER and POWER-DL; ``label_init`` and ``label_estimate`` only by
    POWER-DL.
    """

    method: str
    beta: float | None = None
    eta: float | None = None
    tau: float | None = None
    gamma_margin: float | None = None
    c_flip: float | None = None
    clip_radius: float | None = None
    alpha_len: float | None = None
    lambda_sft: float | None = None
    rho_hinge: float | None = None
    alpha_ropo: float | None = None
    gamma_ropo: float | None = None
    dyn_gamma: float | None = None
    weights: WeightScheme = field(default_factory=WeightScheme)
    label_init: float = 1.0
    label_estimate: str = "aggregate"

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        for name in HYPERPARAMETERS:
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, float(value))
        if isinstance(self.weights, str):
            object.__setattr__(self, "weights", WeightScheme.from_text(self.weights))
        if self.label_estimate not in LABEL_ESTIMATES:
            raise ValueError(f"label_estimate must be one of {LABEL_ESTIMATES}")
        self._check_ranges()

    def _check_ranges(self):
        checks = {
            "beta": lambda v: v >= 0,
            "eta": lambda v: v >= 0,
            "tau": lambda v: v > 0,
            "c_flip": lambda v: 0 <= v < 1,
            "clip_radius": lambda v: v > 0,
            "dyn_gamma": lambda v: 0 <= v <= 1,
        }
        for name, ok in checks.items():
            value = getattr(self, name)
            if value is not None and not ok(value):
                raise ValueError(f"{name}={value} is out of range for {self.display_name}")

    def get(self, name: str) -> float:
        value = getattr(self, name)
        if value is None:
            raise MissingHyperparameterError(f"{self.display_name} needs hyperparameter {name!r}")
        return value

    def validate(self) -> "MethodSpec":
        for name in REQUIRED[self.method]:
            self.get(name)
        return self

    @property
    def display_name(self) -> str:
        return DISPLAY_NAMES[self.method]

    @property
    def label(self) -> str:
        parts = [f"{name}={getattr(self, name):g}" for name in REQUIRED[self.method]]
        return f"{self.display_name}({','.join(parts)})"

    def to_dict(self) -> dict:
        out = {"method": self.method}
        for name in HYPERPARAMETERS:
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        if self.method in ("power", "power-dl"):
            out["weights"] = self.weights.to_text()
        if self.method == "power-dl":
            out["label_init"] = self.label_init
            out["label_estimate"] = self.label_estimate
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "MethodSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown method fields: {', '.join(sorted(unknown))}")
        kwargs = dict(data)
        if "weights" in kwargs and isinstance(kwargs["weights"], str):
            kwargs["weights"] = WeightScheme.from_text(kwargs["weights"])
        if "label_init" in kwargs:
            kwargs["label_init"] = float(kwargs["label_init"])
        return cls(**kwargs)

    def replace(self, **changes) -> "MethodSpec":
        return replace(self, **changes)


@dataclass(frozen=True, eq=False)
class LossContext:
    """Everything a loss needs besides the method: parameters, reference, data.

    ``oracle_mask[k]`` True freezes ``theta[k]`` (its gradient is zero).
    """

    theta: np.ndarray
    theta0: np.ndarray
    dataset: PreferenceDataset
    instance: BanditInstance
    oracle_mask: np.ndarray | None = None

    def __post_init__(self):
        theta = self.theta.params if isinstance(self.theta, SoftmaxPolicy) else self.theta
        theta0 = self.theta0.params if isinstance(self.theta0, SoftmaxPolicy) else self.theta0
        theta = np.array(theta, dtype=float)
        theta0 = np.array(theta0, dtype=float)
        k = self.instance.arm_count
        if theta.shape != (k,) or theta0.shape != (k,):
            raise ValueError(f"theta and theta0 must both have {k} entries")
        if self.dataset.arm_count != k:
            raise ValueError("dataset and instance disagree on the number of arms")
        mask = np.zeros(k, dtype=bool) if self.oracle_mask is None else np.array(self.oracle_mask, dtype=bool)
        if mask.shape != (k,):
            raise ValueError(f"oracle_mask must have {k} entries")
        for arr in (theta, theta0, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "theta0", theta0)
        object.__setattr__(self, "oracle_mask", mask)

    @property
    def free(self) -> np.ndarray:
        return ~self.oracle_mask

    def with_theta(self, theta) -> "LossContext":
        return replace(self, theta=theta)

    def with_labels(self, dyn_labels) -> "LossContext":
        return replace(self, dataset=self.dataset.with_dyn_labels(dyn_labels))


# ---------------------------------------------------------------------------
# per-sample terms


def _log_odds(lp, length):
    s = lp / length
    return s - np.log(-np.expm1(s))


def _sample_terms(spec: MethodSpec, ctx: LossContext, lp):
    """Per-sample loss and its derivatives w.r.t. ``log pi(y+)`` and ``log pi(y-)``.

    ``lp`` has shape ``(..., K)``; outputs have shape ``(..., N)``.
    """
    m = spec.method
    ds = ctx.dataset
    win, lose = ds.winners, ds.losers
    lpp, lpm = lp[..., win], lp[..., lose]
    lengths = ctx.instance.lengths.astype(float)
    lenp, lenm = lengths[win], lengths[lose]

    if m in ("dpo", "dpo+sft", "cdpo", "r-dpo", "ipo", "chipo", "sppo", "ropo"):
        lp0 = log_softmax(ctx.theta0)
        rp = lpp - lp0[win]
        rm = lpm - lp0[lose]
        delta = rp - rm

    if m in ("dpo", "dpo+sft", "cdpo", "r-dpo", "ropo"):
        beta = spec.get("beta")
        x = beta * delta
        if m == "r-dpo":
            x = x - spec.get("alpha_len") * (lenp - lenm)
        if m == "cdpo":
            c = spec.get("c_flip")
            loss = -(1 - c) * log_expit(x) - c * log_expit(-x)
            dx = -(1 - c) * expit(-x) + c * expit(x)
        elif m == "ropo":
            a, g = spec.get("alpha_ropo"), spec.get("gamma_ropo")
            s_neg = expit(-x)
            loss = -a * log_expit(x) + g * s_neg
            dx = -a * s_neg - g * s_neg * expit(x)
        else:
            loss = -log_expit(x)
            dx = -expit(-x)
        dpp, dpm = beta * dx, -beta * dx
        if m == "dpo+sft":
            sft = spec.get("eta") * beta
            loss = loss - sft * lpp
            dpp = dpp - sft
        return loss, dpp, dpm

    if m == "ipo":
        u = delta - 1.0 / (2.0 * spec.get("tau"))
        return u**2, 2 * u, -2 * u

    if m == "chipo":
        beta, bound = spec.get("beta"), 2.0 * spec.get("clip_radius")
        zp, zm = np.exp(rp), np.exp(rm)
        x = beta * ((zp + rp) - (zm + rm))
        xc = np.clip(x, -bound, bound)
        loss = -log_expit(xc)
        dx = np.where(np.abs(x) < bound, -expit(-xc), 0.0)
        return loss, dx * beta * (zp + 1), -dx * beta * (zm + 1)

    if m == "sppo":
        beta = spec.get("beta")
        up = beta * rp - 0.5
        um = beta * rm + 0.5
        return up**2 + um**2, 2 * beta * up, 2 * beta * um

    if m == "cpo":
        beta, lam = spec.get("beta"), spec.get("lambda_sft")
        x = beta * (lpp - lpm)
        dx = -expit(-x)
        return -log_expit(x) - lam * lpp, beta * dx - lam, -beta * dx

    if m in ("rrhf", "slic-hf"):
        lam = spec.get("lambda_sft")
        if m == "rrhf":
            h = -lpp / lenp + lpm / lenm
            active = (h > 0).astype(float)
            dpp, dpm = -active / lenp - lam, active / lenm
        else:
            h = spec.get("rho_hinge") - lpp + lpm
            active = (h > 0).astype(float)
            dpp, dpm = -active - lam, active
        return np.maximum(h, 0.0) - lam * lpp, dpp, dpm

    if m == "orpo":
        lam = spec.get("lambda_sft")
        x = _log_odds(lpp, lenp) - _log_odds(lpm, lenm)
        s_neg = expit(-x)
        d_odds_p = 1.0 / (lenp * -np.expm1(lpp / lenp))
        d_odds_m = 1.0 / (lenm * -np.expm1(lpm / lenm))
        loss = -lpp / lenp - lam * log_expit(x)
        return loss, -1.0 / lenp - lam * s_neg * d_odds_p, lam * s_neg * d_odds_m

    if m == "simpo":
        beta = spec.get("beta")
        x = beta * (lpp / lenp - lpm / lenm) - spec.get("gamma_margin")
        dx = -expit(-x)
        return -log_expit(x), beta * dx / lenp, -beta * dx / lenm

    if m in ("power", "power-dl"):
        beta, eta = spec.get("beta"), spec.get("eta")
        w = spec.weights.resolve(ctx.instance)
        wp, wm = w[win], w[lose]
        g = wp * lpp - wm * lpm + wp - wm
        if m == "power":
            loss = -log_expit(beta * g) - eta * beta * wp * lpp
            dg = -beta * expit(-beta * g)
            return loss, dg * wp - eta * beta * wp, -dg * wm
        spec.get("dyn_gamma")
        lab = ds.dyn_labels
        loss = (
            lab * (-log_expit(beta * g) - eta * beta * wp * lpp)
            + (1 - lab) * (-log_expit(-beta * g) - eta * beta * wm * lpm)
        )
        dg = beta * (-lab * expit(-beta * g) + (1 - lab) * expit(beta * g))
        return loss, dg * wp - lab * eta * beta * wp, -dg * wm - (1 - lab) * eta * beta * wm

    raise AssertionError(f"unhandled method {m}")


def loss(spec: MethodSpec, ctx: LossContext) -> float:
    """Mean loss of ``spec`` over the dataset at ``ctx.theta``."""
    spec.validate()
    per_sample, _, _ = _sample_terms(spec, ctx, log_softmax(ctx.theta))
    return float(per_sample.mean())


def loss_batch(spec: MethodSpec, ctx: LossContext, thetas) -> np.ndarray:
    """Mean loss at every row of ``thetas`` (shape ``(M, K)``)."""
    spec.validate()
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    per_sample, _, _ = _sample_terms(spec, ctx, log_softmax(thetas))
    return per_sample.mean(axis=-1)


def loss_and_grad(spec: MethodSpec, ctx: LossContext, theta=None) -> tuple[float, np.ndarray]:
    spec.validate()
    theta = ctx.theta if theta is None else np.asarray(theta, dtype=float)
    lp = log_softmax(theta)
    per_sample, dpp, dpm = _sample_terms(spec, ctx, lp)
    k, n = ctx.instance.arm_count, ctx.dataset.n
    g_lp = (np.bincount(ctx.dataset.winners, dpp, k) + np.bincount(ctx.dataset.losers, dpm, k)) / n
    grad = g_lp - np.exp(lp) * g_lp.sum()
    grad[ctx.oracle_mask] = 0.0
    return float(per_sample.mean()), grad


def grad_batch(spec: MethodSpec, ctx: LossContext, thetas) -> np.ndarray:
    """Gradients at every row of ``thetas`` (shape ``(M, K)``)."""
    spec.validate()
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    lp = log_softmax(thetas)
    _, dpp, dpm = _sample_terms(spec, ctx, lp)
    k, n = ctx.instance.arm_count, ctx.dataset.n
    eye = np.eye(k)
    g_lp = (dpp @ eye[ctx.dataset.winners] + dpm @ eye[ctx.dataset.losers]) / n
    out = g_lp - np.exp(lp) * g_lp.sum(axis=-1, keepdims=True)
    out[:, ctx.oracle_mask] = 0.0
    return out


def grad(spec: MethodSpec, ctx: LossContext) -> np.ndarray:
    """Gradient of :func:`loss` w.r.t. ``theta``; zero on oracle-masked arms.

    Dynamic labels are constants here (stop-gradient).
    """
    return loss_and_grad(spec, ctx)[1]


def kink_distance(spec: MethodSpec, ctx: LossContext) -> float:
    """Smallest distance of a non-smooth argument to its kink (inf for smooth losses).

    Covers the clip of ChiPO and the hinges of RRHF and SLiC-HF; used to keep
    finite-difference checks away from points where the loss is not
    differentiable.
    """
    m = spec.method
    lp = log_softmax(ctx.theta)
    win, lose = ctx.dataset.winners, ctx.dataset.losers
    lpp, lpm = lp[win], lp[lose]
    if m == "chipo":
        lp0 = log_softmax(ctx.theta0)
        rp, rm = lpp - lp0[win], lpm - lp0[lose]
        x = spec.get("beta") * ((np.exp(rp) + rp) - (np.exp(rm) + rm))
        return float(np.min(np.abs(np.abs(x) - 2 * spec.get("clip_radius"))))
    if m == "rrhf":
        lengths = ctx.instance.lengths
        return float(np.min(np.abs(-lpp / lengths[win] + lpm / lengths[lose])))
    if m == "slic-hf":
        return float(np.min(np.abs(spec.get("rho_hinge") - lpp + lpm)))
    return float("inf")


# ---------------------------------------------------------------------------
# dynamic labels


class TiePreferenceError(ZeroDivisionError):
    """Stationary label requested for a pair with equal empirical preferences."""


def stationary_label(d, mu_win, mu_lose):
    """Label that zeroes the pair's gradient: ``(sigma(d) - mu_lose) / (mu_win - mu_lose)``."""
    mu_win = np.asarray(mu_win, dtype=float)
    mu_lose = np.asarray(mu_lose, dtype=float)
    if np.any(np.abs(mu_win + mu_lose - 1.0) > 1e-12):
        raise ValueError("mu_win and mu_lose must sum to 1")
    if np.any(mu_win == mu_lose):
        raise TiePreferenceError("stationary label undefined for tied preferences (mu_win == mu_lose)")
    out = (expit(d) - mu_lose) / (mu_win - mu_lose)
    return float(out) if np.ndim(out) == 0 else out


def update_labels(labels, stationary, gamma: float):
    """``l <- (1 - gamma) l + gamma * l_bar``, elementwise."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    labels = np.asarray(labels, dtype=float)
    out = (1.0 - gamma) * labels + gamma * np.asarray(stationary, dtype=float)
    return float(out) if np.ndim(out) == 0 else out


def power_margin(spec: MethodSpec, ctx: LossContext, theta=None) -> np.ndarray:
    """Per-sample ``w(y+) log pi(y+) - w(y-) log pi(y-) + w(y+) - w(y-)``."""
    lp = log_softmax(ctx.theta if theta is None else theta)
    w = spec.weights.resolve(ctx.instance)
    win, lose = ctx.dataset.winners, ctx.dataset.losers
    return w[win] * lp[win] - w[lose] * lp[lose] + w[win] - w[lose]


def stationary_targets(spec: MethodSpec, ctx: LossContext, theta=None) -> np.ndarray:
    """Per-sample stationary labels for POWER-DL, in winner orientation.

    With ``label_estimate == "aggregate"`` the empirical preference of each
    pair comes from the whole dataset; pairs with tied preferences keep their
    current label.  ``"per_sample"`` uses the sample's own label as the
    preference estimate, which reduces the target to ``sigma(beta * margin)``.
    """
    beta = spec.get("beta")
    learned = expit(beta * power_margin(spec, ctx, theta))
    current = ctx.dataset.dyn_labels
    if spec.label_estimate == "per_sample":
        return learned.copy()
    stats = empirical_stats(ctx.dataset)
    counts = stats.pair_counts
    win, lose = ctx.dataset.winners, ctx.dataset.losers
    mu_win = stats.wins[win, lose] / counts[win, lose]
    mu_lose = 1.0 - mu_win
    gap = mu_win - mu_lose
    tied = gap == 0
    out = current.copy()
    out[~tied] = (learned[~tied] - mu_lose[~tied]) / gap[~tied]
    return out


def initial_labels(spec: MethodSpec, dataset: PreferenceDataset) -> np.ndarray:
    return np.full(dataset.n, float(spec.label_init))


def spec_fields() -> tuple[str, ...]:
    return tuple(f.name for f in fields(MethodSpec))


__all__ = [
    "METHODS",
    "MethodSpec",
    "LossContext",
    "MissingHyperparameterError",
    "TiePreferenceError",
    "loss",
    "loss_batch",
    "grad",
    "loss_and_grad",
    "grad_batch",
    "kink_distance",
    "stationary_label",
    "update_labels",
    "stationary_targets",
    "power_margin",
    "initial_labels",
    "canonical_method",
    "asdict",
]
