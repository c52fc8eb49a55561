"""Weighted entropy and the weighted-entropy reward maximization policy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .bandit import BanditInstance

MODES = ("constant", "inverse_length", "explicit")
_MODE_ALIASES = {
    "constant": "constant",
    "constant-one": "constant",
    "one": "constant",
    "inverse_length": "inverse_length",
    "inverse-length": "inverse_length",
    "explicit": "explicit",
}

MAX_BISECTION_ITERS = 200
MAX_BRACKET_EXPANSIONS = 64


@dataclass(frozen=True)
class WeightScheme:
    """Per-arm weights ``w(y) > 0``: all ones, ``1/|y|``, or an explicit vector."""

    mode: str = "inverse_length"
    explicit_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        mode = _MODE_ALIASES.get(str(self.mode).lower())
        if mode is None:
            raise ValueError(f"unknown weight mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "mode", mode)
        if mode == "explicit":
            if self.explicit_weights is None:
                raise ValueError("explicit weight mode needs explicit_weights")
            weights = tuple(float(w) for w in self.explicit_weights)
            if any(not w > 0 for w in weights):
                raise ValueError(f"explicit weights must be > 0, got {weights}")
            object.__setattr__(self, "explicit_weights", weights)

    def resolve(self, instance: BanditInstance | None = None, lengths=None) -> np.ndarray:
        """Weight vector for the arms of ``instance`` (or for raw ``lengths``)."""
        if lengths is None:
            if instance is None and self.mode != "explicit":
                raise ValueError("resolving weights needs an instance or lengths")
            lengths = None if instance is None else instance.lengths
        if self.mode == "explicit":
            w = np.array(self.explicit_weights, dtype=float)
            if lengths is not None and w.size != np.size(lengths):
                raise ValueError(f"{w.size} explicit weights for {np.size(lengths)} arms")
            return w
        lengths = np.asarray(lengths, dtype=float)
        if self.mode == "constant":
            return np.ones_like(lengths)
        return 1.0 / lengths

    def to_text(self) -> str:
        if self.mode == "explicit":
            return "explicit:" + ",".join(repr(w) for w in self.explicit_weights)
        return self.mode

    @classmethod
    def from_text(cls, text: str) -> "WeightScheme":
        text = text.strip()
        if text.startswith("explicit:"):
            return cls("explicit", tuple(float(v) for v in text.split(":", 1)[1].split(",")))
        return cls(text)


def _weights(w, instance, size) -> np.ndarray:
    if isinstance(w, WeightScheme):
        if instance is None and w.mode != "explicit":
            if w.mode == "constant":
                return np.ones(size)
            raise ValueError("inverse-length weights need an instance")
        return w.resolve(instance)
    return np.broadcast_to(np.asarray(w, dtype=float), (size,))


def weighted_entropy(p, w, instance: BanditInstance | None = None) -> float:
    """``H_w(p) = -sum_y w(y) p(y) log p(y)`` with ``0 log 0 = 0``.

    ``w`` is a :class:`WeightScheme` or a raw weight vector.
    """
    p = np.asarray(p, dtype=float)
    weights = _weights(w, instance, p.size)
    terms = np.zeros_like(p)
    pos = p > 0
    terms[pos] = p[pos] * np.log(p[pos])
    return float(-(weights * terms).sum())


def weighted_entropy_upper_bound(vocab_size: int, max_length: int) -> float:
    """Upper bound ``log |V| + log L`` for inverse-length weights."""
    return math.log(vocab_size) + math.log(max_length)


def wer_objective(p, rewards, weights, beta: float) -> float:
    """``sum_y p(y) r(y) + beta * H_w(p)``."""
    p = np.asarray(p, dtype=float)
    return float(p @ np.asarray(rewards, dtype=float)) + beta * weighted_entropy(p, weights)


class BracketError(RuntimeError):
    """The Lagrange multiplier could not be bracketed."""

    def __init__(self, message: str, lo: float, hi: float, f_lo: float, f_hi: float):
        super().__init__(f"{message} (bracket [{lo!r}, {hi!r}], log-mass [{f_lo!r}, {f_hi!r}])")
        self.lo, self.hi, self.f_lo, self.f_hi = lo, hi, f_lo, f_hi


def _log_mass(lam: float, rewards, scale) -> float:
    # log sum_y pi_lambda(y) with pi_lambda(y) = exp((r(y) - lambda)/(beta w(y)) - 1)
    return float(logsumexp((rewards - lam) / scale - 1.0))


def solve_wer_policy(rewards, w, beta: float, instance: BanditInstance | None = None) -> np.ndarray:
    """Maximizer of ``sum_y pi(y) [r(y) - beta w(y) log pi(y)]`` over the simplex.

    Stationarity gives ``pi(y) = exp((r(y) - lam) / (beta w(y)) - 1)``; the
    multiplier ``lam`` is the root of the strictly decreasing total mass and
    is located by bisection.
    """
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    rewards = np.asarray(rewards, dtype=float)
    weights = _weights(w, instance, rewards.size)
    if np.any(weights <= 0):
        raise ValueError("weights must be strictly positive")
    scale = beta * weights

    lo = rewards.min() - beta * weights.max() * (1.0 + math.log(rewards.size)) - 1.0
    hi = rewards.max()
    f_lo, f_hi = _log_mass(lo, rewards, scale), _log_mass(hi, rewards, scale)
    width = max(hi - lo, 1.0)
    for _ in range(MAX_BRACKET_EXPANSIONS):
        if f_lo >= 0.0 >= f_hi:
            break
        width *= 2.0
        if f_lo < 0.0:
            lo -= width
            f_lo = _log_mass(lo, rewards, scale)
        if f_hi > 0.0:
            hi += width
            f_hi = _log_mass(hi, rewards, scale)
    else:
        raise BracketError("total mass did not change sign", lo, hi, f_lo, f_hi)
    if not (np.isfinite(f_lo) and np.isfinite(f_hi)):
        raise BracketError("non-finite mass at bracket ends", lo, hi, f_lo, f_hi)

    for _ in range(MAX_BISECTION_ITERS):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _log_mass(mid, rewards, scale) > 0.0:
            lo = mid
        else:
            hi = mid
    lam = 0.5 * (lo + hi)
    return np.exp((rewards - lam) / scale - 1.0)


def reward_gap_residual(pi, rewards, w, beta: float, instance: BanditInstance | None = None) -> float:
    """Largest violation of the reward-gap identity over all arm pairs.

    For the WER maximizer, ``r(y) - r(y') = beta (w(y) log pi(y) - w(y') log pi(y')
    + w(y) - w(y'))``.  Returns the max absolute residual.
    """
    pi = np.asarray(pi, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    weights = _weights(w, instance, rewards.size)
    implied = beta * (weights * np.log(pi) + weights)
    resid = (rewards[:, None] - rewards[None, :]) - (implied[:, None] - implied[None, :])
    return float(np.abs(resid).max())
