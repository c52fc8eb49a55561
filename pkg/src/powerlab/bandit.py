"""Multi-armed bandit instances, softmax policies and preference data.

Arms are indexed from 0.  Every comparison is stored with the pair in
canonical orientation: ``arm_b`` is the lower index (it plays ``y^0``) and
``arm_a`` the higher one (``y^1``).  ``label == 1`` means ``arm_a`` won.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
from scipy.special import expit

PAIR_SUM_TOL = 1e-12


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def make_rng(seed) -> np.random.Generator:
    """Return a generator from an int, a ``SeedSequence`` or a ``Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def trial_rng(master_seed: int, trial: int) -> np.random.Generator:
    """Independent stream for one trial, derived from ``(master_seed, trial)``."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(trial)]))


def canonical_pair(i: int, j: int) -> tuple[int, int]:
    if i == j:
        raise ValueError(f"a comparison needs two distinct arms, got ({i}, {j})")
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True, eq=False)
class BanditInstance:
    """Single-context bandit: true rewards, response lengths and pair distribution.

    Parameters
    ----------
    true_rewards : sequence of float
        ``r*(y)`` for each arm, each in ``[0, 1]``.
    lengths : sequence of int
        Token count ``|y|`` of each arm's response, each ``>= 1``.
    pair_dist : mapping
        Probability of comparing each unordered pair ``(i, j)``.  Keys may be
        given in either orientation; they are stored canonically (``i < j``).
    """

    true_rewards: np.ndarray
    lengths: np.ndarray
    pair_dist: Mapping[tuple[int, int], float]
    pairs: np.ndarray = field(init=False, repr=False)
    pair_probs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rewards = _frozen(self.true_rewards)
        lengths = _frozen(self.lengths, dtype=np.int64)
        if rewards.ndim != 1 or rewards.size < 2:
            raise ValueError("need at least two arms")
        if lengths.shape != rewards.shape:
            raise ValueError("lengths and true_rewards must have one entry per arm")
        if np.any(rewards < 0) or np.any(rewards > 1):
            raise ValueError(f"true rewards must lie in [0, 1], got {rewards.tolist()}")
        if np.any(lengths < 1):
            raise ValueError(f"response lengths must be >= 1, got {lengths.tolist()}")

        merged: dict[tuple[int, int], float] = {}
        for (i, j), p in self.pair_dist.items():
            key = canonical_pair(int(i), int(j))
            if not (0 <= key[0] and key[1] < rewards.size):
                raise ValueError(f"pair {key} references an arm outside 0..{rewards.size - 1}")
            if p < 0:
                raise ValueError(f"pair probability for {key} is negative ({p})")
            merged[key] = merged.get(key, 0.0) + float(p)
        merged = {k: v for k, v in sorted(merged.items()) if v > 0}
        total = sum(merged.values())
        if abs(total - 1.0) > PAIR_SUM_TOL:
            raise ValueError(f"pair_dist must sum to 1 (got {total!r})")

        object.__setattr__(self, "true_rewards", rewards)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "pair_dist", dict(merged))
        object.__setattr__(self, "pairs", _frozen(list(merged), dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "pair_probs", _frozen(list(merged.values())))

    @property
    def arm_count(self) -> int:
        return int(self.true_rewards.size)

    def __eq__(self, other):
        if not isinstance(other, BanditInstance):
            return NotImplemented
        return (
            np.array_equal(self.true_rewards, other.true_rewards)
            and np.array_equal(self.lengths, other.lengths)
            and self.pair_dist == other.pair_dist
        )

    def __hash__(self):
        return hash((self.true_rewards.tobytes(), self.lengths.tobytes(), tuple(self.pair_dist.items())))


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    """Softmax policy ``pi(y) = exp(theta(y)) / Z`` with ``theta`` in the unit box."""

    params: np.ndarray

    def __post_init__(self):
        params = _frozen(self.params)
        if params.ndim != 1 or params.size < 2:
            raise ValueError("params must be a vector with at least two arms")
        if not np.all(np.isfinite(params)):
            raise ValueError("params must be finite")
        if np.any(params < 0) or np.any(params > 1):
            raise ValueError(f"params must lie in the box [0, 1], got {params.tolist()}")
        object.__setattr__(self, "params", params)

    @property
    def arm_count(self) -> int:
        return int(self.params.size)

    @property
    def log_probs(self) -> np.ndarray:
        return log_softmax(self.params)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    def __eq__(self, other):
        if not isinstance(other, SoftmaxPolicy):
            return NotImplemented
        return np.array_equal(self.params, other.params)

    def __hash__(self):
        return hash(self.params.tobytes())


def log_softmax(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    shifted = theta - theta.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _params(policy) -> np.ndarray:
    if isinstance(policy, SoftmaxPolicy):
        return policy.params
    return np.asarray(policy, dtype=float)


def policy_probs(policy) -> np.ndarray:
    """Action probabilities of a softmax policy (or of a raw parameter vector)."""
    return np.exp(log_softmax(_params(policy)))


def performance(policy, instance: BanditInstance) -> float:
    """Expected true reward ``J(pi) = sum_y pi(y) r*(y)``."""
    probs = policy_probs(policy)
    if probs.shape[-1] != instance.arm_count:
        raise ValueError(
            f"policy has {probs.shape[-1]} arms but the instance has {instance.arm_count}"
        )
    return float(probs @ instance.true_rewards)


def bt_prob(instance: BanditInstance, winner: int, loser: int) -> float:
    """Bradley-Terry probability that ``winner`` is preferred to ``loser``."""
    if winner == loser:
        raise ValueError(f"bt_prob needs two distinct arms, got {winner} twice")
    r = instance.true_rewards
    return float(expit(r[winner] - r[loser]))


@dataclass(frozen=True)
class PreferenceSample:
    arm_a: int
    arm_b: int
    label: int
    dyn_label: float = 1.0

    def __post_init__(self):
        if self.arm_a == self.arm_b:
            raise ValueError("a sample must compare two distinct arms")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    @property
    def winner(self) -> int:
        return self.arm_a if self.label == 1 else self.arm_b

    @property
    def loser(self) -> int:
        return self.arm_b if self.label == 1 else self.arm_a


@dataclass(frozen=True, eq=False)
class PreferenceDataset:
    """N pairwise comparisons stored column-wise.

    ``dyn_labels`` are the dynamic labels in winner orientation (the sample's
    preferred arm plays ``y^+``); a value of 1 reproduces the static label.
    """

    arm_count: int
    arm_a: np.ndarray
    arm_b: np.ndarray
    label: np.ndarray
    dyn_labels: np.ndarray | None = None

    def __post_init__(self):
        a = _frozen(self.arm_a, dtype=np.int64)
        b = _frozen(self.arm_b, dtype=np.int64)
        lab = _frozen(self.label, dtype=np.int64)
        if not (a.ndim == b.ndim == lab.ndim == 1 and a.size == b.size == lab.size):
            raise ValueError("arm_a, arm_b and label must be 1-D arrays of equal length")
        if a.size == 0:
            raise ValueError("a preference dataset needs at least one sample")
        if np.any(a == b):
            raise ValueError("every sample must compare two distinct arms")
        if np.any((lab != 0) & (lab != 1)):
            raise ValueError("labels must be 0 or 1")
        if min(a.min(), b.min()) < 0 or max(a.max(), b.max()) >= self.arm_count:
            raise ValueError(f"arm index outside 0..{self.arm_count - 1}")
        dyn = np.ones(a.size) if self.dyn_labels is None else np.array(self.dyn_labels, dtype=float)
        if dyn.shape != a.shape:
            raise ValueError("dyn_labels must have one entry per sample")
        dyn.setflags(write=False)
        object.__setattr__(self, "arm_a", a)
        object.__setattr__(self, "arm_b", b)
        object.__setattr__(self, "label", lab)
        object.__setattr__(self, "dyn_labels", dyn)

    @classmethod
    def from_samples(cls, arm_count: int, samples: Sequence[PreferenceSample]) -> "PreferenceDataset":
        return cls(
            arm_count,
            [s.arm_a for s in samples],
            [s.arm_b for s in samples],
            [s.label for s in samples],
            [s.dyn_label for s in samples],
        )

    @property
    def n(self) -> int:
        return int(self.arm_a.size)

    def __len__(self) -> int:
        return self.n

    @property
    def winners(self) -> np.ndarray:
        return np.where(self.label == 1, self.arm_a, self.arm_b)

    @property
    def losers(self) -> np.ndarray:
        return np.where(self.label == 1, self.arm_b, self.arm_a)

    @property
    def samples(self) -> list[PreferenceSample]:
        return list(iter(self))

    def __iter__(self) -> Iterator[PreferenceSample]:
        for a, b, lab, dyn in zip(self.arm_a, self.arm_b, self.label, self.dyn_labels):
            yield PreferenceSample(int(a), int(b), int(lab), float(dyn))

    def with_dyn_labels(self, dyn_labels) -> "PreferenceDataset":
        return PreferenceDataset(self.arm_count, self.arm_a, self.arm_b, self.label, dyn_labels)

    def __eq__(self, other):
        if not isinstance(other, PreferenceDataset):
            return NotImplemented
        return (
            self.arm_count == other.arm_count
            and np.array_equal(self.arm_a, other.arm_a)
            and np.array_equal(self.arm_b, other.arm_b)
            and np.array_equal(self.label, other.label)
            and np.array_equal(self.dyn_labels, other.dyn_labels)
        )

    __hash__ = None


def sample_comparisons(instance: BanditInstance, size, rng: np.random.Generator):
    """Draw comparisons of any array shape.

    Returns ``(arm_a, arm_b, label)`` arrays of shape ``size`` in canonical
    orientation.  A pair is drawn from ``pair_dist`` first, then the label
    from the Bradley-Terry model of the true rewards.
    """
    idx = rng.choice(instance.pair_probs.size, size=size, p=instance.pair_probs)
    arm_b = instance.pairs[idx, 0]
    arm_a = instance.pairs[idx, 1]
    r = instance.true_rewards
    p_a = expit(r[arm_a] - r[arm_b])
    label = (rng.random(size) < p_a).astype(np.int64)
    return arm_a, arm_b, label


def sample_dataset(instance: BanditInstance, n: int, seed=None) -> PreferenceDataset:
    """Sample ``n`` iid comparisons; identical seeds give identical datasets."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    arm_a, arm_b, label = sample_comparisons(instance, n, make_rng(seed))
    return PreferenceDataset(instance.arm_count, arm_a, arm_b, label)


class UnobservedPairError(KeyError):
    """Raised when a conditional win frequency is requested for a pair with no samples."""


@dataclass(frozen=True, eq=False)
class EmpiricalStats:
    """Counts ``wins[i, j]`` = number of samples in which ``i`` beat ``j``."""

    n: int
    wins: np.ndarray

    @property
    def pair_counts(self) -> np.ndarray:
        return self.wins + self.wins.T

    @property
    def pair_freq_matrix(self) -> np.ndarray:
        """Symmetric matrix of ``mu_hat_{i,j}``; off-diagonal upper triangle sums to 1."""
        return self.pair_counts / self.n

    @property
    def win_freq_matrix(self) -> np.ndarray:
        """``mu_hat_{i > j}``; NaN where the pair was never compared."""
        counts = self.pair_counts
        with np.errstate(invalid="ignore", divide="ignore"):
            out = self.wins / counts
        out[counts == 0] = np.nan
        return out

    def pair_freq(self, i: int, j: int) -> float:
        canonical_pair(i, j)
        return float(self.pair_counts[i, j] / self.n)

    def win_freq(self, winner: int, loser: int) -> float:
        canonical_pair(winner, loser)
        total = self.pair_counts[winner, loser]
        if total == 0:
            raise UnobservedPairError(f"pair ({winner}, {loser}) never appears in the dataset")
        return float(self.wins[winner, loser] / total)


def empirical_stats(dataset: PreferenceDataset) -> EmpiricalStats:
    k = dataset.arm_count
    wins = np.zeros((k, k), dtype=np.int64)
    np.add.at(wins, (dataset.winners, dataset.losers), 1)
    wins.setflags(write=False)
    return EmpiricalStats(dataset.n, wins)
