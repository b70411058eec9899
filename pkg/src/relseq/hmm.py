"""Supervised HMM baseline: smoothed ML estimates and Viterbi decoding.

Emissions are per-input independent Bernoullis given the label; all
decoding runs in log space so length-1000 sequences do not underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .ssvm import viterbi_decode


@dataclass(frozen=True)
class HmmParams:
    initial: np.ndarray      # (n,)
    transition: np.ndarray   # (n, n) row-stochastic
    emission: np.ndarray     # (n, n_inputs) Bernoulli on-probabilities

    def __post_init__(self):
        if abs(self.initial.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution must sum to 1")
        if np.abs(self.transition.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("transition rows must sum to 1")
        for arr in (self.initial, self.transition, self.emission):
            if (arr <= 0.0).any() or (arr >= 1.0).any():
                raise ValueError("smoothed probabilities must lie in (0, 1)")

    @property
    def n_labels(self) -> int:
        return len(self.initial)


def train_hmm(data: Dataset, smoothing: float = 1.0) -> HmmParams:
    """Add-sigma maximum likelihood counts for all three factors."""
    if smoothing <= 0:
        raise ValueError("smoothing must be positive")
    n, d = data.n_labels, data.n_inputs
    init = np.zeros(n)
    trans = np.zeros((n, n))
    emit_on = np.zeros((n, d))
    label_count = np.zeros(n)
    for seq in data.sequences:
        init[seq.y[0]] += 1
        for p in range(1, seq.length):
            trans[seq.y[p - 1], seq.y[p]] += 1
        for c in range(n):
            rows = seq.y == c
            label_count[c] += rows.sum()
            emit_on[c] += seq.x[rows].sum(axis=0)
    initial = (init + smoothing) / (init.sum() + n * smoothing)
    transition = (trans + smoothing) / (trans.sum(axis=1, keepdims=True)
                                        + n * smoothing)
    emission = (emit_on + smoothing) / (label_count[:, None] + 2 * smoothing)
    return HmmParams(initial, transition, emission)


def log_emission_matrix(params: HmmParams, x: np.ndarray) -> np.ndarray:
    """log p(x^t | y^t = c) for every (c, t), shape (n, L)."""
    on = np.log(params.emission)
    off = np.log1p(-params.emission)
    xf = x.astype(float)
    return on @ xf.T + off @ (1.0 - xf).T


def decode_hmm(params: HmmParams, x: np.ndarray) -> np.ndarray:
    """argmax_Y log p(X, Y); ties to the lowest label id."""
    em = log_emission_matrix(params, x)
    em[:, 0] += np.log(params.initial)
    return viterbi_decode(em, np.log(params.transition))


def log_joint(params: HmmParams, x: np.ndarray, y: np.ndarray) -> float:
    """log p(X, Y) under the factorized model."""
    em = log_emission_matrix(params, x)
    total = float(np.log(params.initial[y[0]]) + em[y[0], 0])
    for p in range(1, len(y)):
        total += float(np.log(params.transition[y[p - 1], y[p]]) + em[y[p], p])
    return total
