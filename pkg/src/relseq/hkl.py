"""Conjunction-lattice kernel learning for sequence labeling.

Learns a sparse set of per-label conjunctions of basic inputs (with their
weights) jointly with transition weights, inside the structured-SVM
framework.  The emission regularizer is a squared sum of prior-weighted
rho-norms over descendant sub-lattices; its dual couples a simplex
variable eta over active nodes with the usual constraint duals alpha.
Training interleaves three loops: an active set over lattice nodes
(grown through a closed-form sufficiency check on the sources of the
complement), cutting planes over output-space constraints, and simplex
descent on eta with an inner alpha maximization.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, hamming_loss
from .errors import NumericError
from .features import FeatureSpec, WeightVector, emission_score_matrix
from .kernels import bigram_matrix, label_indicator_delta, weighted_descendant_gram
from .lattice import ActiveSet, ConjunctionNode, ancestors, sources_of_complement
from .ssvm import (SequenceModel, dual_objective, separation_oracle,
                   solve_restricted_dual)

logger = logging.getLogger(__name__)


@dataclass
class HKLConfig:
    rho: float = 1.5            # hierarchy norm exponent, in (1, 2]
    beta: float = 2.0           # depth prior base, d_v = beta ** |v|
    C: float = 1.0
    epsilon: float = 0.01
    eta_tol: float = 1e-4
    weight_floor: float = 1e-6
    max_active: int = 5000
    rescaling: str = "margin"
    max_outer: int = 30
    max_cp_iters: int = 50
    max_eta_iters: int = 60
    eta_patience: int = 8
    eta_step: float = 1.0
    eta_floor: float = 1e-12
    eta_freeze_iters: int = 5
    inner_tol: float = 1e-7
    max_inner_iters: int = 60
    kkt_tol: float = 1e-8
    jitter: float = 1e-10
    batch_violators: int = 50
    max_smo_passes: int = 20000

    def __post_init__(self):
        if not 1.0 < self.rho <= 2.0:
            raise ValueError("rho must lie in (1, 2]")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.rescaling not in ("margin", "slack"):
            raise ValueError(f"unknown rescaling {self.rescaling!r}")

    @property
    def rho_bar(self) -> float:
        return self.rho / (2.0 * (self.rho - 1.0))


def node_prior(node: ConjunctionNode, beta: float) -> float:
    return beta ** node.depth


def zeta(node: ConjunctionNode, eta: dict[ConjunctionNode, float],
         config: HKLConfig) -> float:
    """(sum_{v in A(w)} d_v^rho eta_v^(1-rho)) ** (1/(1-rho)).

    Any ancestor at eta = 0 sends the sum to infinity and zeta to 0.
    """
    rho = config.rho
    s = 0.0
    for anc in ancestors(node):
        e = eta.get(anc, 0.0)
        if e <= config.eta_floor:
            return 0.0
        s += node_prior(anc, config.beta) ** rho * e ** (1.0 - rho)
    return s ** (1.0 / (1.0 - rho))


# --- working set of constraints over a node set ------------------------------

class HKLProblem:
    """Constraint bookkeeping shared by all three optimization loops.

    Maintains the per-node emission contractions U[r, w] (the scalar value
    of node w's delta feature on constraint r), the transition Gram, and
    the per-constraint loss/box data; everything grows incrementally as
    constraints and nodes arrive.
    """

    def __init__(self, data: Dataset, config: HKLConfig):
        self.data = data
        self.config = config
        self.n = data.n_labels
        self.nodes: list[ConjunctionNode] = []
        self.node_index: dict[ConjunctionNode, int] = {}
        self.cands: list[tuple[int, np.ndarray]] = []   # (example, labeling)
        self.a_deltas: list[np.ndarray] = []            # (n, L_i) per constraint
        self.t_flat = np.zeros((0, self.n * self.n))
        self.U = np.zeros((0, 0))
        self.kT = np.zeros((0, 0))
        self.losses = np.zeros(0)
        self.groups = np.zeros(0, dtype=np.int64)
        self._mask_evals: dict[tuple[int, int], np.ndarray] = {}

    # -- structure growth --

    def mask_eval(self, i: int, mask: int) -> np.ndarray:
        key = (i, mask)
        if key not in self._mask_evals:
            x = self.data.sequences[i].x
            out = np.ones(x.shape[0], dtype=np.float64)
            m = mask
            k = 0
            while m:
                if m & 1:
                    out *= x[:, k]
                m >>= 1
                k += 1
            self._mask_evals[key] = out
        return self._mask_evals[key]

    def add_nodes(self, new_nodes) -> None:
        fresh = [v for v in new_nodes if v not in self.node_index]
        if not fresh:
            return
        cols = np.zeros((len(self.cands), len(fresh)))
        for j, v in enumerate(fresh):
            self.node_index[v] = len(self.nodes)
            self.nodes.append(v)
            for r, (i, _) in enumerate(self.cands):
                cols[r, j] = self.mask_eval(i, v.members) @ self.a_deltas[r][v.label]
        self.U = np.hstack([self.U, cols]) if self.U.size else \
            cols if len(self.cands) else np.zeros((0, len(self.nodes)))

    def add_constraint(self, i: int, y_cand: np.ndarray) -> None:
        seq = self.data.sequences[i]
        a = label_indicator_delta(seq.y, y_cand, self.n)
        t = (bigram_matrix(seq.y, self.n)
             - bigram_matrix(y_cand, self.n)).astype(float).ravel()
        row = np.array([self.mask_eval(i, v.members) @ a[v.label]
                        for v in self.nodes])
        kt_col = self.t_flat @ t
        self.cands.append((i, y_cand.copy()))
        self.a_deltas.append(a)
        self.t_flat = np.vstack([self.t_flat, t])
        R = len(self.cands)
        new_kT = np.zeros((R, R))
        new_kT[:R - 1, :R - 1] = self.kT
        new_kT[R - 1, :R - 1] = kt_col
        new_kT[:R - 1, R - 1] = kt_col
        new_kT[R - 1, R - 1] = t @ t
        self.kT = new_kT
        self.U = np.vstack([self.U, row]) if self.U.size else row.reshape(1, -1)
        self.losses = np.append(self.losses, hamming_loss(seq.y, y_cand))
        self.groups = np.append(self.groups, i)

    @property
    def n_constraints(self) -> int:
        return len(self.cands)

    def lin_box(self):
        if self.config.rescaling == "margin":
            return self.losses.copy(), np.ones(self.n_constraints)
        return np.ones(self.n_constraints), 1.0 / self.losses

    # -- primal recovery --

    def weights(self, alpha: np.ndarray, mu: np.ndarray):
        f_e = mu * (self.U.T @ alpha) if len(alpha) else np.zeros(len(self.nodes))
        f_t = (self.t_flat.T @ alpha).reshape(self.n, self.n) if len(alpha) \
            else np.zeros((self.n, self.n))
        return f_e, f_t

    def margins(self, f_e: np.ndarray, f_t: np.ndarray) -> np.ndarray:
        if not self.n_constraints:
            return np.zeros(0)
        return self.U @ f_e + self.t_flat @ f_t.ravel()

    def slacks(self, f_e: np.ndarray, f_t: np.ndarray) -> np.ndarray:
        xs = np.zeros(len(self.data.sequences))
        if not self.n_constraints:
            return xs
        marg = self.margins(f_e, f_t)
        for r in range(self.n_constraints):
            i = self.groups[r]
            if self.config.rescaling == "margin":
                gap = self.losses[r] - marg[r]
            else:
                gap = self.losses[r] * (1.0 - marg[r])
            xs[i] = max(xs[i], gap)
        return xs

    def omega_emission(self, f_e: np.ndarray, W: ActiveSet) -> float:
        """sum_v d_v || f_{E, D(v) within W} ||_rho over active nodes."""
        rho = self.config.rho
        total = 0.0
        for v in self.nodes:
            vals = [abs(f_e[self.node_index[w]]) for w in self.nodes
                    if w.label == v.label and (w.members & v.members) == v.members]
            norm = float(np.sum(np.power(vals, rho)) ** (1.0 / rho)) if vals else 0.0
            total += node_prior(v, self.config.beta) * norm
        return total


# --- inner alpha maximization -------------------------------------------------

def emission_quadratics(problem: HKLProblem, alpha: np.ndarray) -> np.ndarray:
    """q_w = (u_w . alpha)^2 for every active node."""
    if not len(alpha):
        return np.zeros(len(problem.nodes))
    return (problem.U.T @ alpha) ** 2


def hkl_dual_value(problem: HKLProblem, alpha: np.ndarray, zetas: np.ndarray,
                   lin: np.ndarray) -> float:
    """lin.alpha - alpha.kT.alpha/2 - ((sum_w zeta_w q_w^rb)^(1/rb))/2."""
    rb = problem.config.rho_bar
    q = emission_quadratics(problem, alpha)
    s = float(np.sum(zetas * q ** rb))
    emis = s ** (1.0 / rb) if s > 0 else 0.0
    return float(lin @ alpha - 0.5 * alpha @ problem.kT @ alpha - 0.5 * emis)


def inner_solve_alpha(problem: HKLProblem, zetas: np.ndarray,
                      alpha0: np.ndarray | None = None):
    """Maximize the eta-restricted dual over the working set.

    Alternates a closed-form kernel reweighting mu_w = zeta_w q_w^(rb-1)
    (sum zeta q^rb)^(1/rb - 1) with the restricted QP under the effective
    kernel kT + U diag(mu) U^T, keeping the best iterate by true objective.
    """
    cfg = problem.config
    R = problem.n_constraints
    rb = cfg.rho_bar
    if R == 0:
        return (np.zeros(0), 0.0, np.zeros(len(problem.nodes)),
                zetas.copy())
    lin, box = problem.lin_box()
    budget = cfg.C / len(problem.data.sequences)
    alpha = alpha0.copy() if alpha0 is not None and len(alpha0) == R \
        else np.zeros(R)
    mu = zetas.copy()
    if alpha.any():
        q = emission_quadratics(problem, alpha)
        s = float(np.sum(zetas * q ** rb))
        if s > 0:
            mu = zetas * q ** (rb - 1.0) * s ** (1.0 / rb - 1.0)
    best = (-np.inf, alpha.copy(), np.zeros(len(problem.nodes)), mu.copy())
    prev = -np.inf
    for it in range(cfg.max_inner_iters):
        k_eff = problem.kT + (problem.U * mu) @ problem.U.T
        alpha = solve_restricted_dual(k_eff, lin, box, problem.groups, budget,
                                      alpha0=alpha, kkt_tol=cfg.kkt_tol,
                                      jitter=cfg.jitter,
                                      max_passes=cfg.max_smo_passes)
        val = hkl_dual_value(problem, alpha, zetas, lin)
        q = emission_quadratics(problem, alpha)
        if val > best[0]:
            best = (val, alpha.copy(), q.copy(), mu.copy())
        if abs(val - prev) < cfg.inner_tol * max(1.0, abs(val)):
            break
        prev = val
        s = float(np.sum(zetas * q ** rb))
        if s <= 0:
            break
        new_mu = zetas * q ** (rb - 1.0) * s ** (1.0 / rb - 1.0)
        floor = 1e-14 * max(float(new_mu.max()), 1.0)
        mu = np.maximum(new_mu, np.where(zetas > 0, floor, 0.0))
    val, alpha, q, mu = best
    if not np.isfinite(val):
        val, q = 0.0, emission_quadratics(problem, alpha)
    return alpha, float(val), q, mu


def subgradient_eta(node: ConjunctionNode, eta: dict, q_by_node: dict,
                    nodes: list[ConjunctionNode], config: HKLConfig) -> float:
    """Partial derivative of the eta objective at the inner optimum.

    -(d_i^rho eta_i^{-rho} / (2 rb)) (sum_w zeta_w q_w^rb)^(1/rb - 1)
    (sum_{w in D(i)} zeta_w^rho q_w^rb); zero when alpha is zero.
    """
    rb = config.rho_bar
    rho = config.rho
    zs = {w: zeta(w, eta, config) for w in nodes}
    total = sum(zs[w] * q_by_node[w] ** rb for w in nodes)
    if total <= 0:
        return 0.0
    desc = sum(zs[w] ** rho * q_by_node[w] ** rb for w in nodes
               if w.label == node.label
               and (w.members & node.members) == node.members)
    e = eta.get(node, 0.0)
    if e <= config.eta_floor:
        return 0.0
    d_i = node_prior(node, config.beta)
    return float(-(d_i ** rho * e ** (-rho) / (2.0 * rb))
                 * total ** (1.0 / rb - 1.0) * desc)


@dataclass
class HKLState:
    W: ActiveSet
    nodes: list[ConjunctionNode]
    eta: dict[ConjunctionNode, float]
    alpha: np.ndarray
    mu: np.ndarray
    q: np.ndarray
    g_value: float
    f_e: np.ndarray
    f_t: np.ndarray
    xi: np.ndarray
    omega_e: float
    omega_t: float
    e_w: float
    gap: float


def solve_eta(problem: HKLProblem, W: ActiveSet,
              eta_warm: dict | None = None,
              alpha_warm: np.ndarray | None = None) -> HKLState:
    """Minimize g(eta) over the simplex on W by mirror descent.

    Every step resolves the inner alpha problem, then takes an
    exponentiated-gradient step; nodes whose eta collapses are frozen for
    a few iterations to dodge the eta^(1-rho) singularity.  Starts from
    the uniform point (or a warm merge if it scores better) and keeps the
    best iterate, so the returned g never exceeds g(uniform).
    """
    cfg = problem.config
    nodes = problem.nodes
    k = len(nodes)
    uniform = {v: 1.0 / k for v in nodes}

    def solve_at(eta):
        zs = np.array([zeta(v, eta, cfg) for v in nodes])
        return inner_solve_alpha(problem, zs, alpha0=alpha_warm)

    eta = {v: float(x) for v, x in uniform.items()}
    alpha, g, q, mu = solve_at(eta)
    best = (g, dict(eta), alpha.copy(), q.copy(), mu.copy())
    if eta_warm:
        merged = {v: max(eta_warm.get(v, 1.0 / k), cfg.eta_floor) for v in nodes}
        z = sum(merged.values())
        merged = {v: x / z for v, x in merged.items()}
        alpha_w, g_w, q_w, mu_w = solve_at(merged)
        if g_w < best[0]:
            best = (g_w, dict(merged), alpha_w.copy(), q_w.copy(), mu_w.copy())
            eta, alpha, g, q, mu = merged, alpha_w, g_w, q_w, mu_w
    frozen: dict[ConjunctionNode, int] = {}
    stall = 0
    for it in range(cfg.max_eta_iters):
        if k == 1:
            break
        q_by = {v: q[problem.node_index[v]] for v in nodes}
        grads = {}
        for v in nodes:
            if frozen.get(v, 0) > 0:
                frozen[v] -= 1
                continue
            grads[v] = subgradient_eta(v, eta, q_by, nodes, cfg)
        gmax = max((abs(x) for x in grads.values()), default=0.0)
        if gmax <= 0:
            break
        step = cfg.eta_step / math.sqrt(1.0 + it) / gmax
        new_eta = dict(eta)
        for v, gr in grads.items():
            new_eta[v] = eta[v] * math.exp(-step * gr)
        z = sum(new_eta.values())
        new_eta = {v: x / z for v, x in new_eta.items()}
        for v in nodes:
            if new_eta[v] < cfg.eta_floor:
                new_eta[v] = cfg.eta_floor
                frozen[v] = cfg.eta_freeze_iters
        alpha, g, q, mu = solve_at(new_eta)
        eta = new_eta
        if g < best[0] - cfg.eta_tol * max(1.0, abs(best[0])):
            stall = 0
        else:
            stall += 1
        if g < best[0]:
            best = (g, dict(eta), alpha.copy(), q.copy(), mu.copy())
        if stall >= cfg.eta_patience:
            break
    g, eta, alpha, q, mu = best
    f_e, f_t = problem.weights(alpha, mu)
    xi = problem.slacks(f_e, f_t)
    omega_e = problem.omega_emission(f_e, W)
    omega_t = float(np.linalg.norm(f_t))
    lin, _ = problem.lin_box()
    m = len(problem.data.sequences)
    primal = 0.5 * omega_e ** 2 + 0.5 * omega_t ** 2 + cfg.C / m * xi.sum()
    if len(alpha):
        e_w = (omega_e ** 2 + omega_t ** 2 + cfg.C / m * xi.sum()
               + 0.5 * float(alpha @ problem.kT @ alpha) - float(lin @ alpha))
    else:
        e_w = 0.0
    return HKLState(W=W, nodes=list(nodes), eta=eta, alpha=alpha, mu=mu, q=q,
                    g_value=g, f_e=f_e, f_t=f_t, xi=xi, omega_e=omega_e,
                    omega_t=omega_t, e_w=e_w, gap=primal - g)


# --- sufficiency condition ----------------------------------------------------

def _pattern_weights(problem: HKLProblem, alpha: np.ndarray):
    """Per-label alpha-weighted indicator mass grouped by distinct input
    patterns; the sufficiency quadratic form only sees patterns."""
    by_label: list[dict[bytes, float]] = [dict() for _ in range(problem.n)]
    per_example: dict[int, np.ndarray] = {}
    for r, (i, _) in enumerate(problem.cands):
        if alpha[r] == 0.0:
            continue
        if i not in per_example:
            per_example[i] = np.zeros_like(problem.a_deltas[r])
        per_example[i] += alpha[r] * problem.a_deltas[r]
    for i, om in per_example.items():
        x = problem.data.sequences[i].x
        for p in range(x.shape[0]):
            row = x[p].tobytes()
            for c in range(problem.n):
                w = om[c, p]
                if w != 0.0:
                    by_label[c][row] = by_label[c].get(row, 0.0) + w
    out = []
    for c in range(problem.n):
        items = sorted(by_label[c].items())
        if items:
            pats = np.stack([np.frombuffer(b, dtype=np.uint8) for b, _ in items])
            wts = np.array([v for _, v in items])
        else:
            pats = np.zeros((0, problem.data.n_inputs), dtype=np.uint8)
            wts = np.zeros(0)
        out.append((pats, wts))
    return out


def sufficiency_check(problem: HKLProblem, state: HKLState):
    """Eq-style certificate that no unexplored node improves the solution.

    For each source u of the complement, the alpha quadratic form of the
    prior-weighted descendant kernel (times 2) must not exceed
    Omega_E^2 + Omega_T^2 + 2 (epsilon - e_W); violators come back sorted
    by excess.
    """
    cfg = problem.config
    rhs = (state.omega_e ** 2 + state.omega_t ** 2
           + 2.0 * (cfg.epsilon - state.e_w))
    cands = sorted(sources_of_complement(state.W),
                   key=lambda v: (v.label, v.depth, v.members))
    if not len(state.alpha) or not state.alpha.any():
        return (len([u for u in cands if 0.0 > rhs]) == 0,
                [(u, -rhs) for u in cands if 0.0 > rhs])
    pw = _pattern_weights(problem, state.alpha)
    violators = []
    for u in cands:
        pats, wts = pw[u.label]
        if not len(wts):
            lhs = 0.0
        else:
            K = weighted_descendant_gram(u.members, pats, pats, cfg.beta)
            lhs = 2.0 * float(wts @ K @ wts)
        if lhs > rhs:
            violators.append((u, lhs - rhs))
    violators.sort(key=lambda t: -t[1])
    return (not violators, violators)


# --- rule extraction -----------------------------------------------------------

@dataclass
class LearnedRule:
    label: int
    members: tuple[int, ...]
    weight: float

    def render(self, label_names, input_names) -> str:
        body = ", ".join(f"{input_names[k]}(T)" for k in self.members) or "true"
        return f"{label_names[self.label]}(T) :- {body}. weight={self.weight:.6g}"


@dataclass
class LearnedRuleSet:
    rules: list[LearnedRule]
    transition: np.ndarray

    def render(self, label_names, input_names) -> list[str]:
        return [r.render(label_names, input_names) for r in self.rules]

    def top_rules(self, label: int, k: int) -> list[LearnedRule]:
        mine = [r for r in self.rules if r.label == label]
        return mine[:k]


def extract_rules(state: HKLState, weight_floor: float = 1e-6) -> LearnedRuleSet:
    rules = []
    for v, w in zip(state.nodes, state.f_e):
        if abs(w) > weight_floor:
            rules.append(LearnedRule(v.label, v.member_tuple(), float(w)))
    rules.sort(key=lambda r: (-abs(r.weight), r.label, r.members))
    return LearnedRuleSet(rules, state.f_t.copy())


# --- the trainer ----------------------------------------------------------------

@dataclass
class HKLTrainingInfo:
    converged: bool
    outer_iterations: int
    n_constraints: int
    n_nodes: int
    gap: float
    log_lines: list[str] = field(default_factory=list)


def initial_active_set(data: Dataset) -> ActiveSet:
    """Per-label root plus all depth-1 nodes (the minimal closed seed that
    carries emission signal)."""
    W = ActiveSet(n_inputs=data.n_inputs, n_labels=data.n_labels)
    for c in range(data.n_labels):
        W.nodes.add(ConjunctionNode(c, 0))
        for k in range(data.n_inputs):
            W.nodes.add(ConjunctionNode(c, 1 << k))
    return W


def _model_from_state(problem: HKLProblem, state: HKLState) -> SequenceModel:
    spec = FeatureSpec(tuple((v.label, v.members) for v in state.nodes),
                       problem.n, problem.data.n_inputs)
    weights = WeightVector(state.f_e.copy(), state.f_t.copy())
    return SequenceModel(mode="linear", spec=spec, weights=weights,
                         n_labels=problem.n)


def train_structhkl(data: Dataset, config: HKLConfig | None = None,
                    state_hook=None):
    """Active-set training over the conjunction lattice.

    Returns (model, rule set, info).  state_hook, when given, is called
    with (problem, state, ok, violators) after every sufficiency check;
    the test suite uses it to audit intermediate states.
    """
    config = config or HKLConfig()
    if data.n_labels < 1 or not data.sequences:
        raise ValueError("need a labeled, nonempty dataset")
    W = initial_active_set(data)
    problem = HKLProblem(data, config)
    problem.add_nodes(W.sorted_nodes())
    seen: set[tuple[int, bytes]] = set()
    eta_warm = None
    alpha_warm = None
    state = None
    log_lines = []
    converged = False
    outer = 0
    while outer < config.max_outer:
        outer += 1
        for _ in range(config.max_cp_iters):
            state = solve_eta(problem, W, eta_warm, alpha_warm)
            eta_warm, alpha_warm = state.eta, state.alpha
            model = _model_from_state(problem, state)
            added = 0
            for i, seq in enumerate(data.sequences):
                em = emission_score_matrix(model.spec, model.weights, seq.x)
                y_star, h = separation_oracle(em, model.weights.f_t, seq.y,
                                              config.rescaling)
                if h <= state.xi[i] + config.epsilon:
                    continue
                key = (i, y_star.tobytes())
                if key in seen:
                    continue
                seen.add(key)
                problem.add_constraint(i, y_star)
                alpha_warm = np.append(alpha_warm, 0.0)
                added += 1
            if added == 0:
                break
        ok, violators = sufficiency_check(problem, state)
        if state_hook is not None:
            state_hook(problem, state, ok, violators)
        log_lines.append(f"{outer}\t{len(W)}\t{problem.n_constraints}\t"
                         f"{state.g_value:.6f}\t{state.gap:.6f}\t{len(violators)}")
        if ok:
            converged = True
            break
        batch = violators[:config.batch_violators]
        for v, _ in batch:
            W.add(v)
        W.check_closed()
        problem.add_nodes([v for v in W.sorted_nodes()
                           if v not in problem.node_index])
        if len(W) > config.max_active:
            logger.warning("active set cap reached (%d nodes)", len(W))
            break
    if not converged:
        logger.warning("active-set loop stopped before sufficiency held")
    model = _model_from_state(problem, state)
    rules = extract_rules(state, config.weight_floor)
    info = HKLTrainingInfo(converged, outer, problem.n_constraints,
                           len(problem.nodes), state.gap, log_lines)
    return model, rules, info
