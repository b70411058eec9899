"""Joint feature maps for sequence scoring.

Emission features are (label, conjunction-of-inputs) pairs evaluated per
position; transition features are all n*n ordered label pairs.  The joint
feature vector of a sequence pair counts emission firings at positions
carrying the feature's label and transition firings over consecutive
label pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def mask_of(members) -> int:
    """Bitmask over input indices for a conjunction's member set."""
    m = 0
    for k in members:
        m |= 1 << int(k)
    return m


def members_of(mask: int) -> tuple[int, ...]:
    out = []
    k = 0
    while mask:
        if mask & 1:
            out.append(k)
        mask >>= 1
        k += 1
    return tuple(out)


def eval_mask(mask: int, x: np.ndarray) -> np.ndarray:
    """Conjunction truth value at every position; empty mask is always on.

    x has shape (length, n_inputs); returns a uint8 vector of length L.
    """
    L, n = x.shape
    out = np.ones(L, dtype=np.uint8)
    for k in members_of(mask):
        if k >= n:
            raise ValueError(f"input index {k} out of range for {n} inputs")
        out &= x[:, k]
    return out


@dataclass(frozen=True)
class FeatureSpec:
    """Index layout for emission and transition features.

    emission is an ordered tuple of (label_id, conjunction_mask).  Emission
    features occupy indices [0, n_emission); transition (c, c') sits at
    n_emission + c*n_labels + c'.
    """

    emission: tuple[tuple[int, int], ...]
    n_labels: int
    n_inputs: int

    def __post_init__(self):
        for c, mask in self.emission:
            if not 0 <= c < self.n_labels:
                raise ValueError(f"emission label {c} out of range")
            if mask >> self.n_inputs:
                raise ValueError("conjunction mask uses unknown inputs")

    @classmethod
    def basic(cls, n_labels: int, n_inputs: int) -> "FeatureSpec":
        """One singleton emission feature per (label, input) pair."""
        em = tuple((c, 1 << k) for c in range(n_labels) for k in range(n_inputs))
        return cls(em, n_labels, n_inputs)

    @property
    def n_emission(self) -> int:
        return len(self.emission)

    @property
    def n_transition(self) -> int:
        return self.n_labels * self.n_labels

    @property
    def size(self) -> int:
        return self.n_emission + self.n_transition

    def transition_index(self, c_prev: int, c_next: int) -> int:
        return self.n_emission + c_prev * self.n_labels + c_next

    def emission_values(self, x: np.ndarray) -> np.ndarray:
        """Per-position truth values of every emission conjunction, shape (L, E).

        Distinct masks are evaluated once and shared across labels.
        """
        cache: dict[int, np.ndarray] = {}
        cols = []
        for _, mask in self.emission:
            if mask not in cache:
                cache[mask] = eval_mask(mask, x)
            cols.append(cache[mask])
        if not cols:
            return np.zeros((x.shape[0], 0), dtype=np.uint8)
        return np.stack(cols, axis=1)


def joint_feature_map(spec: FeatureSpec, x: np.ndarray, y: np.ndarray) -> dict[int, float]:
    """Sparse count vector of feature firings over a full (x, y) pair."""
    if x.shape[0] != y.shape[0]:
        raise ValueError("observation/label lengths differ")
    vals = spec.emission_values(x)
    psi: dict[int, float] = {}
    for j, (c, _) in enumerate(spec.emission):
        cnt = int(vals[y == c, j].sum())
        if cnt:
            psi[j] = float(cnt)
    for p in range(1, len(y)):
        idx = spec.transition_index(int(y[p - 1]), int(y[p]))
        psi[idx] = psi.get(idx, 0.0) + 1.0
    return psi


def psi_delta(spec: FeatureSpec, x: np.ndarray, y_true: np.ndarray,
              y_other: np.ndarray) -> dict[int, float]:
    """psi(x, y_true) - psi(x, y_other) as a sparse map."""
    d = dict(joint_feature_map(spec, x, y_true))
    for j, v in joint_feature_map(spec, x, y_other).items():
        d[j] = d.get(j, 0.0) - v
        if d[j] == 0.0:
            del d[j]
    return d


def sparse_dot(a: dict[int, float], b: dict[int, float]) -> float:
    if len(a) > len(b):
        a, b = b, a
    return sum(v * b[j] for j, v in a.items() if j in b)


@dataclass(frozen=True)
class WeightVector:
    """Weights split into an emission block f_e and a transition matrix f_t."""

    f_e: np.ndarray
    f_t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "f_e", np.asarray(self.f_e, dtype=float))
        object.__setattr__(self, "f_t", np.asarray(self.f_t, dtype=float))

    @classmethod
    def zeros(cls, spec: FeatureSpec) -> "WeightVector":
        return cls(np.zeros(spec.n_emission), np.zeros((spec.n_labels, spec.n_labels)))

    def check(self, spec: FeatureSpec) -> None:
        if self.f_e.shape != (spec.n_emission,) or \
                self.f_t.shape != (spec.n_labels, spec.n_labels):
            raise ValueError("weight dimensions do not match the feature spec")

    def flat(self, j: int, spec: FeatureSpec) -> float:
        if j < spec.n_emission:
            return float(self.f_e[j])
        j -= spec.n_emission
        return float(self.f_t[j // spec.n_labels, j % spec.n_labels])


def score(spec: FeatureSpec, w: WeightVector, psi: dict[int, float]) -> float:
    """Inner product <w, psi> over the spec's index layout."""
    w.check(spec)
    total = 0.0
    for j, v in psi.items():
        if j >= spec.size:
            raise ValueError(f"feature index {j} outside the spec")
        total += w.flat(j, spec) * v
    return total


def emission_score_matrix(spec: FeatureSpec, w: WeightVector, x: np.ndarray) -> np.ndarray:
    """Per-(label, position) emission scores, shape (n_labels, L)."""
    vals = spec.emission_values(x).astype(float)
    out = np.zeros((spec.n_labels, x.shape[0]))
    for j, (c, _) in enumerate(spec.emission):
        if w.f_e[j] != 0.0:
            out[c] += w.f_e[j] * vals[:, j]
    return out
