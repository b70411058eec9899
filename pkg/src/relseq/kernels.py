"""Kernels: conjunction-lattice sums, label-delta kernels, subsequence kernel.

The descendant-sum kernel collapses the sum of all 2**N conjunction
kernels into a product of per-input sums; the weighted variant is the
prior-normalized version used by the active-set sufficiency check.  The
subsequence kernel compares context windows of feature sets, counting
common (possibly gapped) subsequences with a decay per unit of span.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .features import members_of


def descendant_sum_kernel(x_p, x_q) -> int:
    """prod_k (1 + x_p[k] * x_q[k]); equals the sum of all conjunction kernels."""
    a = np.asarray(x_p, dtype=np.int64)
    b = np.asarray(x_q, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    out = 1
    for ak, bk in zip(a.tolist(), b.tolist()):
        out *= 1 + ak * bk
    return out


def weighted_descendant_kernel(u_members: int, x_p, x_q, beta: float) -> float:
    """Prior-weighted descendant sum anchored at conjunction u.

    prod_{k in u} x_p[k] x_q[k] / beta**2 * prod_{k not in u}
    (1 + x_p[k] x_q[k] / (1+beta)**2).  Zero whenever a member bit of u is
    off on either side.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    a = np.asarray(x_p, dtype=np.int64)
    b = np.asarray(x_q, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if u_members >> n:
        raise ValueError("conjunction uses input indices out of range")
    inside = members_of(u_members)
    out = 1.0
    for k in inside:
        out *= a[k] * b[k] / beta ** 2
        if out == 0.0:
            return 0.0
    off = 1.0 / (1.0 + beta) ** 2
    for k in range(n):
        if not (u_members >> k) & 1:
            out *= 1.0 + a[k] * b[k] * off
    return float(out)


def weighted_descendant_gram(u_members: int, X_p: np.ndarray, X_q: np.ndarray,
                             beta: float) -> np.ndarray:
    """weighted_descendant_kernel over all row pairs of two step matrices."""
    A = X_p.astype(np.float64)
    B = X_q.astype(np.float64)
    out = np.ones((A.shape[0], B.shape[0]))
    off = 1.0 / (1.0 + beta) ** 2
    for k in range(A.shape[1]):
        match = np.outer(A[:, k], B[:, k])
        if (u_members >> k) & 1:
            out *= match / beta ** 2
        else:
            out *= 1.0 + match * off
    return out


def bigram_matrix(y, n_labels: int) -> np.ndarray:
    """Counts of consecutive label pairs, shape (n, n)."""
    out = np.zeros((n_labels, n_labels), dtype=np.int64)
    y = np.asarray(y)
    for p in range(1, len(y)):
        out[int(y[p - 1]), int(y[p])] += 1
    return out


def transition_kernel(y_i, y_j) -> int:
    """Number of position pairs with matching consecutive label bigrams."""
    a = np.asarray(y_i)
    b = np.asarray(y_j)
    if len(a) < 2 or len(b) < 2:
        return 0
    m = (a[:-1, None] == b[None, :-1]) & (a[1:, None] == b[None, 1:])
    return int(m.sum())


def delta_transition_kernel(y_i, y, y_j, y_prime) -> int:
    return (transition_kernel(y_i, y_j) + transition_kernel(y, y_prime)
            - transition_kernel(y_i, y_prime) - transition_kernel(y_j, y))


def label_indicator_delta(y_a, y_b, n_labels: int) -> np.ndarray:
    """Rows one-hot(y_a) - one-hot(y_b) per label, shape (n, L)."""
    a = np.asarray(y_a)
    b = np.asarray(y_b)
    out = np.zeros((n_labels, len(a)))
    out[a, np.arange(len(a))] += 1.0
    out[b, np.arange(len(b))] -= 1.0
    return out


def delta_emission_kernel(k_matrix: np.ndarray, y_i, y, y_j, y_prime,
                          n_labels: int) -> float:
    """sum_{p,q} kE(x_i^p, x_j^q) * (bracket of label matches).

    The bracket Lambda(y_i^p,y_j^q) + Lambda(y^p,y'^q) - Lambda(y_i^p,y'^q)
    - Lambda(y^p,y_j^q) factors through per-label indicator differences.
    """
    A = label_indicator_delta(y_i, y, n_labels)
    B = label_indicator_delta(y_j, y_prime, n_labels)
    return float(np.einsum("cp,pq,cq->", A, k_matrix, B))


def delta_joint_kernel(k_matrix: np.ndarray, y_i, y, y_j, y_prime,
                       n_labels: int) -> float:
    """Transition plus emission delta kernel (the working-set Gram entry)."""
    return delta_transition_kernel(y_i, y, y_j, y_prime) + \
        delta_emission_kernel(k_matrix, y_i, y, y_j, y_prime, n_labels)


# --- relational subsequence kernel ----------------------------------------

@dataclass(frozen=True)
class WindowSpec:
    """Context window: k_prev positions before the pivot, l_next after."""

    k_prev: int = 3
    l_next: int = 3

    def __post_init__(self):
        if self.k_prev < 0 or self.l_next < 0:
            raise ValueError("window sides must be nonnegative")

    @property
    def width(self) -> int:
        return self.k_prev + 1 + self.l_next


@dataclass(frozen=True)
class SSKParams:
    lambda_decay: float = 0.5
    max_len: int = 3

    def __post_init__(self):
        if not 0.0 < self.lambda_decay <= 1.0:
            raise ValueError("lambda_decay must lie in (0, 1]")
        if self.max_len < 1:
            raise ValueError("max_len must be at least 1")


def extract_window(x: np.ndarray, p: int, w: WindowSpec) -> list[frozenset[int]]:
    """On-feature index sets for positions around pivot p (0-based).

    Truncated at the sequence boundaries; no padding.
    """
    L = x.shape[0]
    if not 0 <= p < L:
        raise ValueError(f"pivot {p} out of range for length {L}")
    lo = max(0, p - w.k_prev)
    hi = min(L - 1, p + w.l_next)
    return [frozenset(int(k) for k in np.flatnonzero(x[t])) for t in range(lo, hi + 1)]


def _ssk_from_counts(C: np.ndarray, lam: float, max_len: int) -> float:
    """Subsequence kernel given the position-pair common-feature counts C.

    A_m(a,b) accumulates subsequence pairs of length m ending exactly at
    (a,b), weighted by lam ** (span_a + span_b); B_m is its decayed prefix
    sum, so extending by one element costs a single lookup.
    """
    si, sj = C.shape
    if si == 0 or sj == 0:
        return 0.0
    total = 0.0
    A = lam * lam * C
    for m in range(1, max_len + 1):
        if m > 1:
            A = lam * lam * C
            A[1:, 1:] *= B[:-1, :-1]
            A[0, :] = 0.0
            A[:, 0] = 0.0
        total += float(A.sum())
        if m == max_len:
            break
        B = A.copy()
        for a in range(si):
            for b in range(sj):
                if a:
                    B[a, b] += lam * B[a - 1, b]
                if b:
                    B[a, b] += lam * B[a, b - 1]
                if a and b:
                    B[a, b] -= lam * lam * B[a - 1, b - 1]
    return total


def ssk(Q, Q_prime, params: SSKParams) -> float:
    """Relational subsequence kernel between two windows of feature sets."""
    C = np.array([[float(len(qa & qb)) for qb in Q_prime] for qa in Q])
    if C.size == 0:
        return 0.0
    return _ssk_from_counts(C, params.lambda_decay, params.max_len)


def ssk_normalized(Q, Q_prime, params: SSKParams) -> float:
    k = ssk(Q, Q_prime, params)
    if k == 0.0:
        return 0.0
    na = ssk(Q, Q, params)
    nb = ssk(Q_prime, Q_prime, params)
    if na <= 0.0 or nb <= 0.0:
        return 0.0
    return k / float(np.sqrt(na * nb))


def ssk_gram(x_i: np.ndarray, x_j: np.ndarray, window: WindowSpec,
             params: SSKParams, normalize: bool = False) -> np.ndarray:
    """Pointwise SSK between every pivot pair of two sequences, shape (Li, Lj).

    Works on zero-padded fixed-width windows: padded cells have zero
    common-feature count, so they contribute nothing, and spans are
    shift-invariant.  The DP over window cells is vectorized across all
    pivot pairs at once.
    """
    Li, Lj = x_i.shape[0], x_j.shape[0]
    C_full = x_i.astype(np.float64) @ x_j.astype(np.float64).T
    W = window.width
    k = window.k_prev
    CW = np.zeros((Li, Lj, W, W))
    for a in range(W):
        pa = np.arange(Li) - k + a
        ia = (pa >= 0) & (pa < Li)
        if not ia.any():
            continue
        for b in range(W):
            qb = np.arange(Lj) - k + b
            jb = (qb >= 0) & (qb < Lj)
            if not jb.any():
                continue
            block = CW[:, :, a, b]
            block[np.ix_(ia, jb)] = C_full[np.ix_(pa[ia], qb[jb])]
    K = _ssk_batched(CW, params.lambda_decay, params.max_len)
    if normalize:
        di = _ssk_self(x_i, window, params)
        dj = _ssk_self(x_j, window, params)
        denom = np.sqrt(np.outer(di, dj))
        with np.errstate(invalid="ignore", divide="ignore"):
            K = np.where(denom > 0, K / np.where(denom > 0, denom, 1.0), 0.0)
    return K


def _ssk_batched(CW: np.ndarray, lam: float, max_len: int) -> np.ndarray:
    P, Q, W, _ = CW.shape
    total = np.zeros((P, Q))
    A = lam * lam * CW
    for m in range(1, max_len + 1):
        if m > 1:
            A = lam * lam * CW
            A[:, :, 1:, 1:] *= B[:, :, :-1, :-1]
            A[:, :, 0, :] = 0.0
            A[:, :, :, 0] = 0.0
        total += A.sum(axis=(2, 3))
        if m == max_len:
            break
        B = A.copy()
        for a in range(W):
            for b in range(W):
                if a:
                    B[:, :, a, b] += lam * B[:, :, a - 1, b]
                if b:
                    B[:, :, a, b] += lam * B[:, :, a, b - 1]
                if a and b:
                    B[:, :, a, b] -= lam * lam * B[:, :, a - 1, b - 1]
    return total


def _ssk_self(x: np.ndarray, window: WindowSpec, params: SSKParams) -> np.ndarray:
    L = x.shape[0]
    C_full = x.astype(np.float64) @ x.astype(np.float64).T
    W = window.width
    k = window.k_prev
    CW = np.zeros((L, 1, W, W))
    for a in range(W):
        pa = np.arange(L) - k + a
        ia = (pa >= 0) & (pa < L)
        for b in range(W):
            qb = np.arange(L) - k + b
            jb = (qb >= 0) & (qb < L)
            both = ia & jb
            if both.any():
                CW[both, 0, a, b] = C_full[pa[both], qb[both]]
    return _ssk_batched(CW, params.lambda_decay, params.max_len)[:, 0]


class GramCache:
    """LRU cache of pointwise kernel matrices keyed by example-id pairs.

    Budgeted in bytes; recomputation on eviction is semantically
    transparent.  Safe for concurrent readers with a single writer
    (plain dict operations under the GIL).
    """

    def __init__(self, budget_bytes: int = 256 * 1024 * 1024):
        self.budget = int(budget_bytes)
        self._store: OrderedDict[tuple, np.ndarray] = OrderedDict()
        self._bytes = 0
        self.hits = 0
        self.misses = 0

    def get(self, key, compute):
        if key in self._store:
            self._store.move_to_end(key)
            self.hits += 1
            return self._store[key]
        self.misses += 1
        val = compute()
        self._bytes += val.nbytes
        self._store[key] = val
        while self._bytes > self.budget and len(self._store) > 1:
            _, old = self._store.popitem(last=False)
            self._bytes -= old.nbytes
        return val
