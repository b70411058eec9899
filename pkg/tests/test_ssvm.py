import itertools

import numpy as np
import pytest

from oracles import exhaustive_argmax
from relseq.data import Dataset, LabeledSequence, hamming_loss
from relseq.errors import NotTrainedError
from relseq.features import FeatureSpec, WeightVector, psi_delta, sparse_dot
from relseq.ssvm import (KernelBackend, LinearBackend, SolverConfig, dual_objective,
                         kbest_viterbi, loss_matrix, make_pointwise,
                         separation_oracle, solve_restricted_dual,
                         train_cutting_plane, train_structsvm, viterbi_decode)


def toy_dataset(rng, m=3, L=4, n_labels=2, n_inputs=2):
    seqs = []
    for i in range(m):
        x = rng.integers(0, 2, size=(L, n_inputs)).astype(np.uint8)
        y = rng.integers(0, n_labels, size=L)
        seqs.append(LabeledSequence(x, y, id=i))
    return Dataset(seqs, [f"s{k+1}" for k in range(n_inputs)],
                   [chr(65 + c) for c in range(n_labels)])


def separable_dataset():
    # inputs are a one-hot encoding of the label, so a perfect linear
    # emission model exists
    seqs = []
    rng = np.random.default_rng(7)
    for i in range(3):
        y = rng.integers(0, 2, size=6)
        x = np.stack([y == 1, y == 0], axis=1).astype(np.uint8)
        seqs.append(LabeledSequence(x, y, id=i))
    return Dataset(seqs, ["s1", "s2"], ["A", "B"])


class TestViterbi:
    def test_all_zero_ties_to_label_zero(self):
        em = np.zeros((3, 5))
        tr = np.zeros((3, 3))
        assert viterbi_decode(em, tr).tolist() == [0] * 5

    def test_dominant_emission(self):
        em = np.zeros((2, 4))
        em[0] = 1.0
        assert viterbi_decode(em, np.zeros((2, 2))).tolist() == [0] * 4

    def test_matches_exhaustive(self, rng):
        for _ in range(120):
            n = int(rng.integers(2, 5))
            L = int(rng.integers(1, 7))
            em = np.round(rng.normal(size=(n, L)), 3)
            tr = np.round(rng.normal(size=(n, n)), 3)
            got = viterbi_decode(em, tr)
            want, _ = exhaustive_argmax(em, tr)
            assert got.tolist() == want.tolist()

    def test_tie_break_matches_exhaustive(self, rng):
        # coarse scores force plenty of exact ties
        for _ in range(60):
            n, L = 3, 4
            em = rng.integers(0, 2, size=(n, L)).astype(float)
            tr = rng.integers(0, 2, size=(n, n)).astype(float)
            got = viterbi_decode(em, tr)
            want, _ = exhaustive_argmax(em, tr)
            assert got.tolist() == want.tolist()


class TestKBestViterbi:
    def test_top1_matches_viterbi(self, rng):
        for _ in range(30):
            em = rng.normal(size=(3, 5))
            tr = rng.normal(size=(3, 3))
            (s, y), = kbest_viterbi(em, tr, 1)
            assert y.tolist() == viterbi_decode(em, tr).tolist()

    def test_matches_enumerated_topk(self, rng):
        for _ in range(20):
            n, L, k = 2, 4, 5
            em = rng.normal(size=(n, L))
            tr = rng.normal(size=(n, n))
            got = kbest_viterbi(em, tr, k)
            scored = []
            for seq in itertools.product(range(n), repeat=L):
                s = sum(em[seq[p], p] for p in range(L))
                s += sum(tr[seq[p - 1], seq[p]] for p in range(1, L))
                scored.append((s, seq))
            scored.sort(key=lambda t: -t[0])
            got_scores = sorted(s for s, _ in got)
            want_scores = sorted(s for s, _ in scored[:k])
            assert np.allclose(got_scores, want_scores)
            assert len({tuple(y) for _, y in got}) == k


class TestRestrictedDual:
    def test_single_constraint(self):
        for g, bound, want in ((2.0, 10.0, 0.5), (0.1, 0.2, 0.2)):
            a = solve_restricted_dual(np.array([[g]]), np.array([1.0]),
                                      np.array([1.0]), np.array([0]), bound)
            assert a[0] == pytest.approx(want, abs=1e-8)

    def test_empty(self):
        a = solve_restricted_dual(np.zeros((0, 0)), np.zeros(0), np.zeros(0),
                                  np.zeros(0, dtype=int), 1.0)
        assert a.size == 0

    def test_duplicates_same_objective(self, rng):
        G1 = np.array([[2.0, 0.5], [0.5, 1.0]])
        lin1 = np.array([0.7, 0.4])
        box1 = np.ones(2)
        grp1 = np.array([0, 1])
        a1 = solve_restricted_dual(G1, lin1, box1, grp1, 0.6)
        # duplicate the first constraint
        G2 = np.array([[2.0, 2.0, 0.5], [2.0, 2.0, 0.5], [0.5, 0.5, 1.0]])
        lin2 = np.array([0.7, 0.7, 0.4])
        box2 = np.ones(3)
        grp2 = np.array([0, 0, 1])
        a2 = solve_restricted_dual(G2, lin2, box2, grp2, 0.6)
        assert dual_objective(G1, lin1, a1) == pytest.approx(
            dual_objective(G2, lin2, a2), abs=1e-6)

    def test_matches_cvxpy(self, rng):
        cp = pytest.importorskip("cvxpy")
        for trial in range(10):
            m = int(rng.integers(2, 8))
            R = rng.normal(size=(m, m + 2))
            G = R @ R.T
            lin = rng.random(m)
            box = rng.uniform(1.0, 3.0, size=m)
            groups = rng.integers(0, 3, size=m)
            budget = 0.5
            a = solve_restricted_dual(G, lin, box, groups, budget, kkt_tol=1e-9)
            v = cp.Variable(m, nonneg=True)
            cons = [box[groups == g] @ v[groups == g] <= budget
                    for g in np.unique(groups)]
            prob = cp.Problem(cp.Maximize(lin @ v - 0.5 * cp.quad_form(v, cp.psd_wrap(G))),
                              cons)
            prob.solve(solver=cp.CLARABEL)
            assert dual_objective(G, lin, a) == pytest.approx(prob.value, abs=1e-6)


class TestSeparationOracle:
    def test_zero_model_maximizes_loss(self):
        y = np.array([0, 1, 0, 2])
        em = np.zeros((3, 4))
        tr = np.zeros((3, 3))
        y_star, h = separation_oracle(em, tr, y, "margin")
        assert hamming_loss(y, y_star) == 1.0
        assert h == pytest.approx(1.0)

    def test_true_label_never_returned_with_violation(self, rng):
        for _ in range(20):
            y = rng.integers(0, 2, size=5)
            em = rng.normal(size=(2, 5))
            tr = rng.normal(size=(2, 2))
            y_star, h = separation_oracle(em, tr, y, "margin")
            if np.array_equal(y_star, y):
                assert h == 0.0

    def test_margin_mode_matches_bruteforce(self, rng):
        for _ in range(60):
            n = int(rng.integers(2, 4))
            L = int(rng.integers(2, 7))
            y = rng.integers(0, n, size=L)
            em = rng.normal(size=(n, L))
            tr = rng.normal(size=(n, n))
            y_star, h = separation_oracle(em, tr, y, "margin")
            want, _ = exhaustive_argmax(em + loss_matrix(y, n), tr)
            assert y_star.tolist() == want.tolist()

    def test_slack_mode_never_returns_truth(self, rng):
        y = np.array([0, 0, 1])
        em = rng.normal(size=(2, 3))
        tr = rng.normal(size=(2, 2))
        y_star, h = separation_oracle(em, tr, y, "slack", beam_width=5)
        assert not np.array_equal(y_star, y) or h == 0.0


class TestCuttingPlane:
    def test_separable_toy_fits(self):
        data = separable_dataset()
        model, info, _ = train_structsvm(data, SolverConfig(C=100.0, epsilon=1e-3))
        assert info.converged
        correct = total = 0
        for seq in data.sequences:
            pred = model.predict(seq.x)
            correct += (pred == seq.y).sum()
            total += seq.length
        assert correct / total == 1.0

    def test_small_c_shrinks_weights(self, rng):
        data = toy_dataset(rng)
        model, _, _ = train_structsvm(data, SolverConfig(C=1e-8, epsilon=1e-4))
        assert np.abs(model.weights.f_e).max() < 1e-6
        assert np.abs(model.weights.f_t).max() < 1e-6

    def test_dual_monotone_and_clean_final_pass(self, rng):
        for trial in range(8):
            data = toy_dataset(rng, m=3, L=4)
            cfg = SolverConfig(C=2.0, epsilon=1e-3, rescaling="margin")
            model, info, state = train_structsvm(data, cfg)
            hist = info.dual_history
            assert all(b >= a - 1e-9 for a, b in zip(hist, hist[1:]))
            # a fresh oracle sweep finds no violation beyond epsilon
            for i, seq in enumerate(data.sequences):
                em = model.emission_scores(seq.x)
                tr = model.transition_scores()
                _, h = separation_oracle(em, tr, seq.y, "margin")
                assert h <= state["slacks"][i] + cfg.epsilon + 1e-9

    def test_slack_mode_trains(self, rng):
        data = toy_dataset(rng, m=2, L=4)
        model, info, _ = train_structsvm(
            data, SolverConfig(C=1.0, epsilon=1e-2, rescaling="slack"))
        assert model.predict(data.sequences[0].x).shape == (4,)

    def test_full_constraint_qp_equivalence(self, rng):
        cp = pytest.importorskip("cvxpy")
        for trial in range(3):
            data = toy_dataset(rng, m=3, L=4, n_labels=2, n_inputs=2)
            spec = FeatureSpec.basic(2, 2)
            cfg = SolverConfig(C=1.0, epsilon=1e-7, kkt_tol=1e-10,
                               max_cp_iters=500)
            model, info, _ = train_structsvm(data, cfg)
            # my model's primal objective over ALL constraints
            mine = full_primal_objective(model, data, spec, cfg.C)
            want = full_constraint_qp(data, spec, cfg.C)
            assert mine == pytest.approx(want, abs=1e-6)

    def test_untrained_model_raises(self):
        from relseq.ssvm import SequenceModel
        m = SequenceModel(mode="linear", n_labels=2, spec=FeatureSpec.basic(2, 2))
        with pytest.raises(NotTrainedError):
            m.predict(np.zeros((3, 2), dtype=np.uint8))


def full_primal_objective(model, data, spec, C):
    w = model.weights
    norm2 = float((w.f_e ** 2).sum() + (w.f_t ** 2).sum())
    total_xi = 0.0
    for seq in data.sequences:
        xi = 0.0
        f_true = model.score_sequence(seq.x, seq.y)
        for y in itertools.product(range(spec.n_labels), repeat=seq.length):
            y = np.array(y)
            if np.array_equal(y, seq.y):
                continue
            loss = hamming_loss(seq.y, y)
            xi = max(xi, loss - (f_true - model.score_sequence(seq.x, y)))
        total_xi += xi
    return 0.5 * norm2 + C / len(data.sequences) * total_xi


def full_constraint_qp(data, spec, C):
    import cvxpy as cp
    m = len(data.sequences)
    w = cp.Variable(spec.size)
    xi = cp.Variable(m, nonneg=True)
    cons = []
    for i, seq in enumerate(data.sequences):
        for y in itertools.product(range(spec.n_labels), repeat=seq.length):
            y = np.array(y)
            if np.array_equal(y, seq.y):
                continue
            d = psi_delta(spec, seq.x, seq.y, y)
            vec = np.zeros(spec.size)
            for j, v in d.items():
                vec[j] = v
            cons.append(vec @ w >= hamming_loss(seq.y, y) - xi[i])
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(w) + C / m * cp.sum(xi)),
                      cons)
    prob.solve(solver=cp.CLARABEL)
    return float(prob.value)


class TestKernelMode:
    def test_gram_matches_linear_psi_deltas(self, rng):
        data = toy_dataset(rng, m=2, L=3, n_labels=2, n_inputs=3)
        spec = FeatureSpec.basic(2, 3)
        kb = KernelBackend(data, make_pointwise("linear"))
        lb = LinearBackend(data, spec)
        cands = []
        for i, seq in enumerate(data.sequences):
            y = rng.integers(0, 2, size=seq.length)
            cands.append((i, y))
        for i, y in cands:
            ck = kb.append(i, y)
            cl = lb.append(i, y)
            assert np.allclose(ck, cl, atol=1e-9)

    def test_kernel_scoring_equals_explicit(self, rng):
        # with the basic-feature inner product as the pointwise kernel the
        # kernelized model must score exactly like the linear one
        data = toy_dataset(rng, m=2, L=4, n_labels=2, n_inputs=2)
        cfg = SolverConfig(C=1.0, epsilon=1e-4)
        lin_model, _, _ = train_structsvm(data, cfg)
        kb = KernelBackend(data, make_pointwise("linear"))
        k_model, _, _ = train_cutting_plane(data, kb, cfg)
        for seq in data.sequences:
            for _ in range(5):
                y = rng.integers(0, 2, size=seq.length)
                a = lin_model.score_sequence(seq.x, y)
                b = k_model.score_sequence(seq.x, y)
                assert a == pytest.approx(b, abs=1e-9)
            assert lin_model.predict(seq.x).tolist() == k_model.predict(seq.x).tolist()

    def test_ssk_family_trains_and_predicts(self, rng):
        from relseq.kernels import SSKParams, WindowSpec
        from relseq.ssvm import train_subseq_svm
        data = toy_dataset(rng, m=2, L=5, n_labels=2, n_inputs=3)
        model, info, _ = train_subseq_svm(
            data, SolverConfig(C=1.0, epsilon=1e-2),
            window=WindowSpec(1, 1), params=SSKParams(0.5, 2))
        pred = model.predict(data.sequences[0].x)
        assert pred.shape == (5,)
        assert set(np.unique(pred)) <= {0, 1}
