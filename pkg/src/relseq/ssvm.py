"""Structured SVM training by cutting planes with a loss-augmented Viterbi oracle.

Supports an explicit-feature (linear) mode and a kernelized mode whose
working-set Gram entries are delta joint kernels over (sequence, candidate
labeling) triples.  Margin rescaling uses an exact per-position oracle;
slack rescaling rescores a top-B Viterbi beam and is approximate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, hamming_loss
from .errors import NotTrainedError, NumericError
from .features import (FeatureSpec, WeightVector, emission_score_matrix,
                       joint_feature_map, psi_delta, score, sparse_dot)
from .kernels import (GramCache, SSKParams, WindowSpec, bigram_matrix,
                      label_indicator_delta, ssk_gram)

logger = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    C: float = 1.0
    epsilon: float = 0.01
    max_cp_iters: int = 200
    rescaling: str = "margin"          # "margin" (exact oracle) or "slack" (beam)
    beam_width: int = 10
    kkt_tol: float = 1e-6
    jitter: float = 1e-10
    max_smo_passes: int = 20000

    def __post_init__(self):
        if self.C <= 0 or self.epsilon <= 0:
            raise ValueError("C and epsilon must be positive")
        if self.rescaling not in ("margin", "slack"):
            raise ValueError(f"unknown rescaling {self.rescaling!r}")


# --- Viterbi ----------------------------------------------------------------

def viterbi_decode(emission: np.ndarray, transition: np.ndarray) -> np.ndarray:
    """argmax_Y sum_p em[y^p, p] + sum_{p>=2} tr[y^{p-1}, y^p].

    Ties break toward the lowest label id at every backpointer decision
    (equivalently: reverse-lexicographic minimum among the optima).
    """
    n, L = emission.shape
    V = emission[:, 0].copy()
    bp = np.zeros((L, n), dtype=np.int64)
    for p in range(1, L):
        cand = V[:, None] + transition
        best_prev = np.argmax(cand, axis=0)
        V = cand[best_prev, np.arange(n)] + emission[:, p]
        bp[p] = best_prev
    last = int(np.argmax(V))
    out = [last]
    for p in range(L - 1, 0, -1):
        last = int(bp[p, last])
        out.append(last)
    return np.array(out[::-1], dtype=np.int64)


def kbest_viterbi(emission: np.ndarray, transition: np.ndarray, k: int):
    """Top-k label sequences by score, each (score, labels), best first."""
    n, L = emission.shape
    lists = [[(float(emission[c, 0]), -1, -1)] for c in range(n)]
    history = [lists]
    for p in range(1, L):
        new_lists = []
        for c in range(n):
            cands = []
            for cp in range(n):
                for r, (s, _, _) in enumerate(history[-1][cp]):
                    cands.append((s + float(transition[cp, c])
                                  + float(emission[c, p]), cp, r))
            cands.sort(key=lambda t: (-t[0], t[1], t[2]))
            new_lists.append(cands[:k])
        history.append(new_lists)
    finals = [(s, c, r) for c in range(n) for r, (s, _, _) in enumerate(history[-1][c])]
    finals.sort(key=lambda t: (-t[0], t[1], t[2]))
    out = []
    for s, c, r in finals[:k]:
        labels = [c]
        cur_c, cur_r = c, r
        for p in range(L - 1, 0, -1):
            _, cur_c, cur_r = history[p][cur_c][cur_r]
            labels.append(cur_c)
        out.append((s, np.array(labels[::-1], dtype=np.int64)))
    return out


# --- restricted dual QP ------------------------------------------------------

def solve_restricted_dual(G: np.ndarray, lin: np.ndarray, box_coef: np.ndarray,
                          groups: np.ndarray, budget: float,
                          alpha0: np.ndarray | None = None,
                          kkt_tol: float = 1e-6, jitter: float = 1e-10,
                          max_passes: int = 20000) -> np.ndarray:
    """maximize lin.alpha - alpha.G.alpha/2  s.t.  alpha >= 0 and, per group,
    sum_k box_coef[k] * alpha[k] <= budget.

    SMO-style coordinate ascent: single-variable moves while a group has
    budget slack, pairwise exchanges along the budget face once it is tight.
    """
    m = len(lin)
    if m == 0:
        return np.zeros(0)
    if np.diag(G).min() < -1e-8:
        raise NumericError("Gram matrix has a negative diagonal entry")
    Gj = G + jitter * np.eye(m)
    alpha = np.zeros(m) if alpha0 is None else alpha0.astype(float).copy()
    grad = lin - Gj @ alpha
    gids = np.unique(groups)
    used = {g: float(box_coef[groups == g] @ alpha[groups == g]) for g in gids}
    members = {g: np.flatnonzero(groups == g) for g in gids}

    def kkt_violation():
        worst = 0.0
        for g in gids:
            idx = members[g]
            slack = budget - used[g]
            tight = slack <= 1e-12 * max(1.0, budget)
            for k in idx:
                if alpha[k] > 0:
                    worst = max(worst, -grad[k])
                if not tight:
                    worst = max(worst, grad[k])
            if tight:
                ratios = grad[idx] / box_coef[idx]
                pos = idx[alpha[idx] > 0]
                if len(pos):
                    worst = max(worst, float(ratios.max()
                                             - (grad[pos] / box_coef[pos]).min()))
        return worst

    for _ in range(max_passes):
        for k in range(m):
            g = groups[k]
            hi = (budget - used[g]) / box_coef[k]
            delta = grad[k] / Gj[k, k]
            delta = min(max(delta, -alpha[k]), hi)
            if abs(delta) > 1e-15:
                alpha[k] += delta
                grad -= Gj[:, k] * delta
                used[g] += box_coef[k] * delta
        for g in gids:
            if budget - used[g] > 1e-12 * max(1.0, budget):
                continue
            idx = members[g]
            ratios = grad[idx] / box_coef[idx]
            k = idx[int(np.argmax(ratios))]
            pos = idx[alpha[idx] > 0]
            if not len(pos):
                continue
            l = pos[int(np.argmin(grad[pos] / box_coef[pos]))]
            if k == l:
                continue
            gain = grad[k] / box_coef[k] - grad[l] / box_coef[l]
            if gain <= kkt_tol / 10:
                continue
            curv = (Gj[k, k] / box_coef[k] ** 2 + Gj[l, l] / box_coef[l] ** 2
                    - 2 * Gj[k, l] / (box_coef[k] * box_coef[l]))
            if curv < -1e-6:
                raise NumericError("indefinite Gram beyond jitter tolerance")
            curv = max(curv, 1e-12)
            t = min(gain / curv, alpha[l] * box_coef[l])
            if t <= 0:
                continue
            alpha[k] += t / box_coef[k]
            alpha[l] -= t / box_coef[l]
            grad -= Gj[:, k] * (t / box_coef[k]) - Gj[:, l] * (t / box_coef[l])
        if kkt_violation() < kkt_tol:
            break
    return alpha


def dual_objective(G, lin, alpha):
    return float(lin @ alpha - 0.5 * alpha @ G @ alpha)


# --- constraint backends -----------------------------------------------------

class LinearBackend:
    """Explicit sparse psi-delta features over a fixed FeatureSpec."""

    def __init__(self, data: Dataset, spec: FeatureSpec):
        self.data = data
        self.spec = spec
        self.rows: list[dict[int, float]] = []

    def append(self, i: int, y_cand: np.ndarray) -> np.ndarray:
        seq = self.data.sequences[i]
        row = psi_delta(self.spec, seq.x, seq.y, y_cand)
        col = np.array([sparse_dot(row, other) for other in self.rows]
                       + [sparse_dot(row, row)])
        self.rows.append(row)
        return col

    def weights(self, alpha: np.ndarray) -> WeightVector:
        spec = self.spec
        f_e = np.zeros(spec.n_emission)
        f_t = np.zeros((spec.n_labels, spec.n_labels))
        for a, row in zip(alpha, self.rows):
            if a == 0.0:
                continue
            for j, v in row.items():
                if j < spec.n_emission:
                    f_e[j] += a * v
                else:
                    jj = j - spec.n_emission
                    f_t[jj // spec.n_labels, jj % spec.n_labels] += a * v
        return WeightVector(f_e, f_t)

    def scores(self, alpha: np.ndarray, x: np.ndarray, x_index: int | None = None):
        w = self.weights(alpha)
        return emission_score_matrix(self.spec, w, x), w.f_t

    def make_model(self, alpha, constraints):
        return SequenceModel(mode="linear", spec=self.spec,
                             weights=self.weights(alpha),
                             n_labels=self.spec.n_labels)


class KernelBackend:
    """Delta joint kernels over (X_i, Y_i, Y) triples with a pluggable
    pointwise emission kernel between sequence positions."""

    def __init__(self, data: Dataset, pointwise, cache_bytes: int = 256 << 20):
        self.data = data
        self.n = data.n_labels
        self.pointwise = pointwise     # pointwise(x_a, x_b) -> (La, Lb) matrix
        self.cache = GramCache(cache_bytes)
        self.entries: list[tuple[int, np.ndarray, np.ndarray, np.ndarray]] = []
        # each entry: (example index, candidate labels, A = indicator delta,
        #              Td = bigram delta matrix)

    def kmat(self, i: int, j: int) -> np.ndarray:
        if i <= j:
            return self.cache.get((i, j), lambda: self.pointwise(
                self.data.sequences[i].x, self.data.sequences[j].x))
        return self.kmat(j, i).T

    def append(self, i: int, y_cand: np.ndarray) -> np.ndarray:
        seq = self.data.sequences[i]
        A = label_indicator_delta(seq.y, y_cand, self.n)
        Td = (bigram_matrix(seq.y, self.n) - bigram_matrix(y_cand, self.n)).astype(float)
        col = []
        for (j, _, Aj, Tdj) in self.entries:
            K = self.kmat(i, j)
            col.append(float(np.einsum("cp,pq,cq->", A, K, Aj) + (Td * Tdj).sum()))
        K = self.kmat(i, i)
        col.append(float(np.einsum("cp,pq,cq->", A, K, A) + (Td * Td).sum()))
        self.entries.append((i, y_cand.copy(), A, Td))
        return np.array(col)

    def _omegas(self, alpha: np.ndarray):
        omega: dict[int, np.ndarray] = {}
        T_eff = np.zeros((self.n, self.n))
        for a, (j, _, Aj, Tdj) in zip(alpha, self.entries):
            if a == 0.0:
                continue
            if j not in omega:
                omega[j] = np.zeros_like(Aj)
            omega[j] += a * Aj
            T_eff += a * Tdj
        return omega, T_eff

    def scores(self, alpha: np.ndarray, x: np.ndarray, x_index: int | None = None):
        omega, T_eff = self._omegas(alpha)
        em = np.zeros((self.n, x.shape[0]))
        for j, om in omega.items():
            if not om.any():
                continue
            K = self.kmat(j, x_index) if x_index is not None \
                else self.pointwise(self.data.sequences[j].x, x)
            em += om @ K
        return em, T_eff

    def make_model(self, alpha, constraints):
        support = []
        for a, (j, y_cand, _, _) in zip(alpha, self.entries):
            if a > 0.0:
                seq = self.data.sequences[j]
                support.append((seq.x, seq.y, y_cand, float(a)))
        return SequenceModel(mode="kernel", support=support, n_labels=self.n,
                             pointwise=self.pointwise)


# --- separation oracle -------------------------------------------------------

def loss_matrix(y_true: np.ndarray, n_labels: int) -> np.ndarray:
    """Per-position Hamming contribution of labeling position p with c."""
    L = len(y_true)
    out = np.full((n_labels, L), 1.0 / L)
    out[y_true, np.arange(L)] = 0.0
    return out


def separation_oracle(em: np.ndarray, tr: np.ndarray, y_true: np.ndarray,
                      rescaling: str, beam_width: int = 10):
    """Most violating candidate labeling and its hinge value H.

    margin: exact loss-augmented Viterbi, H = loss + F(Y) - F(Y_true);
    slack: top-B beam of the same augmented problem rescored by
    loss * (1 - F(Y_true) + F(Y)).
    """
    n, L = em.shape
    lm = loss_matrix(y_true, n)
    f_true = float(em[y_true, np.arange(L)].sum()
                   + tr[y_true[:-1], y_true[1:]].sum())

    def f_of(y):
        return float(em[y, np.arange(L)].sum() + tr[y[:-1], y[1:]].sum())

    if rescaling == "margin":
        y_star = viterbi_decode(em + lm, tr)
        if np.array_equal(y_star, y_true):
            return y_star, 0.0
        h = hamming_loss(y_true, y_star) + f_of(y_star) - f_true
        return y_star, h
    best, best_h = None, 0.0
    for _, y in kbest_viterbi(em + lm, tr, beam_width):
        if np.array_equal(y, y_true):
            continue
        h = hamming_loss(y_true, y) * (1.0 - f_true + f_of(y))
        if best is None or h > best_h:
            best, best_h = y, h
    if best is None:
        return y_true.copy(), 0.0
    return best, best_h


# --- the trained model -------------------------------------------------------

@dataclass
class SequenceModel:
    """Either explicit weights over a feature spec or dual weights over
    support constraints with a pointwise kernel."""

    mode: str
    n_labels: int
    spec: FeatureSpec | None = None
    weights: WeightVector | None = None
    support: list | None = None
    pointwise: object = None
    _t_eff: np.ndarray | None = field(default=None, repr=False)

    def transition_scores(self) -> np.ndarray:
        if self.mode == "linear":
            return self.weights.f_t
        if self._t_eff is None:
            t = np.zeros((self.n_labels, self.n_labels))
            for _, y_t, y_c, a in self.support:
                t += a * (bigram_matrix(y_t, self.n_labels)
                          - bigram_matrix(y_c, self.n_labels))
            self._t_eff = t
        return self._t_eff

    def emission_scores(self, x: np.ndarray) -> np.ndarray:
        if self.mode == "linear":
            return emission_score_matrix(self.spec, self.weights, x)
        em = np.zeros((self.n_labels, x.shape[0]))
        for x_j, y_t, y_c, a in self.support:
            om = a * label_indicator_delta(y_t, y_c, self.n_labels)
            em += om @ self.pointwise(x_j, x)
        return em

    def score_sequence(self, x: np.ndarray, y: np.ndarray) -> float:
        em = self.emission_scores(x)
        tr = self.transition_scores()
        return float(em[y, np.arange(len(y))].sum() + tr[y[:-1], y[1:]].sum())

    def predict(self, x: np.ndarray) -> np.ndarray:
        if self.mode == "linear" and self.weights is None:
            raise NotTrainedError("model has no weights")
        if self.mode == "kernel" and self.support is None:
            raise NotTrainedError("model has no support set")
        return viterbi_decode(self.emission_scores(x), self.transition_scores())


def make_pointwise(kind: str, window: WindowSpec | None = None,
                   params: SSKParams | None = None, normalize: bool = False):
    """Pointwise emission kernels for the kernelized trainer."""
    if kind == "linear":
        return lambda xa, xb: xa.astype(float) @ xb.astype(float).T
    if kind == "descendant":
        return lambda xa, xb: 2.0 ** (xa.astype(float) @ xb.astype(float).T)
    if kind == "ssk":
        w = window or WindowSpec()
        p = params or SSKParams()
        return lambda xa, xb: ssk_gram(xa, xb, w, p, normalize=normalize)
    raise ValueError(f"unknown pointwise kernel {kind!r}")


# --- cutting-plane training --------------------------------------------------

@dataclass
class TrainingInfo:
    converged: bool
    iterations: int
    n_constraints: int
    dual_history: list[float]
    final_gap: float | None = None


def train_cutting_plane(data: Dataset, backend, config: SolverConfig):
    """n-slack constraint generation: per example, add the most violated
    candidate and re-solve the restricted dual; stop on a clean pass."""
    m = len(data.sequences)
    if m == 0:
        raise ValueError("cannot train on an empty dataset")
    n = data.n_labels
    budget = config.C / m
    G = np.zeros((0, 0))
    lin = np.zeros(0)
    box = np.zeros(0)
    groups = np.zeros(0, dtype=np.int64)
    losses = np.zeros(0)
    alpha = np.zeros(0)
    seen: set[tuple[int, bytes]] = set()
    history: list[float] = []
    converged = False
    it = 0

    def slacks():
        if len(alpha) == 0:
            return np.zeros(m)
        margins = G @ alpha
        xs = np.zeros(m)
        for r in range(len(alpha)):
            i = groups[r]
            if config.rescaling == "margin":
                gap = losses[r] - margins[r]
            else:
                gap = losses[r] * (1.0 - margins[r])
            xs[i] = max(xs[i], gap)
        return xs

    while it < config.max_cp_iters:
        it += 1
        added = 0
        for i in range(m):
            seq = data.sequences[i]
            em, tr = backend.scores(alpha, seq.x, x_index=i)
            y_star, h = separation_oracle(em, tr, seq.y, config.rescaling,
                                          config.beam_width)
            xi = slacks()[i]
            if h <= xi + config.epsilon:
                continue
            key = (i, y_star.tobytes())
            if key in seen:
                continue
            seen.add(key)
            col = backend.append(i, y_star)
            r = len(alpha)
            newG = np.zeros((r + 1, r + 1))
            newG[:r, :r] = G
            newG[r, :r] = col[:r]
            newG[:r, r] = col[:r]
            newG[r, r] = col[r]
            G = newG
            loss = hamming_loss(seq.y, y_star)
            losses = np.append(losses, loss)
            groups = np.append(groups, i)
            if config.rescaling == "margin":
                lin = np.append(lin, loss)
                box = np.append(box, 1.0)
            else:
                lin = np.append(lin, 1.0)
                box = np.append(box, 1.0 / loss)
            alpha = np.append(alpha, 0.0)
            alpha = solve_restricted_dual(G, lin, box, groups, budget,
                                          alpha0=alpha, kkt_tol=config.kkt_tol,
                                          jitter=config.jitter,
                                          max_passes=config.max_smo_passes)
            history.append(dual_objective(G + config.jitter * np.eye(len(alpha)),
                                          lin, alpha))
            added += 1
        if added == 0:
            converged = True
            break
    if not converged:
        logger.warning("cutting plane hit the iteration cap (%d constraints)",
                       len(alpha))
    model = backend.make_model(alpha, None)
    info = TrainingInfo(converged, it, len(alpha), history)
    state = {"G": G, "lin": lin, "box": box, "groups": groups, "losses": losses,
             "alpha": alpha, "slacks": slacks()}
    return model, info, state


def train_structsvm(data: Dataset, config: SolverConfig | None = None):
    """StructSVM baseline: basic inputs as per-label emission features."""
    config = config or SolverConfig()
    spec = FeatureSpec.basic(data.n_labels, data.n_inputs)
    backend = LinearBackend(data, spec)
    return train_cutting_plane(data, backend, config)


def train_subseq_svm(data: Dataset, config: SolverConfig | None = None,
                     window: WindowSpec | None = None,
                     params: SSKParams | None = None, normalize: bool = False):
    """Kernelized trainer with the relational subsequence kernel."""
    config = config or SolverConfig()
    pointwise = make_pointwise("ssk", window, params, normalize)
    backend = KernelBackend(data, pointwise)
    return train_cutting_plane(data, backend, config)
