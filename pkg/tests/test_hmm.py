import itertools

import numpy as np
import pytest

from oracles import exhaustive_argmax
from relseq.data import Dataset, LabeledSequence
from relseq.hmm import decode_hmm, log_joint, train_hmm


def make_data(seqs, n_inputs, labels):
    out = [LabeledSequence(np.array(x, dtype=np.uint8), np.array(y), id=i)
           for i, (x, y) in enumerate(seqs)]
    return Dataset(out, [f"s{k+1}" for k in range(n_inputs)], labels)


class TestTrainHmm:
    def test_hand_counts(self):
        sigma = 0.5
        data = make_data([([[1], [1]], [0, 0])], 1, ["A", "B"])
        params = train_hmm(data, smoothing=sigma)
        n = 2
        assert params.transition[0, 0] == pytest.approx((1 + sigma) / (1 + n * sigma))
        assert params.emission[0, 0] == pytest.approx((2 + sigma) / (2 + 2 * sigma))

    def test_uniform_labels_give_uniform_transitions(self, rng):
        L, n = 4000, 3
        y = rng.integers(0, n, size=L)
        x = rng.integers(0, 2, size=(L, 2)).astype(np.uint8)
        data = make_data([(x, y)], 2, ["A", "B", "C"])
        params = train_hmm(data, smoothing=1.0)
        assert np.abs(params.transition - 1 / n).max() < 0.05

    def test_huge_smoothing_limits_to_uniform(self):
        data = make_data([([[1], [0]], [0, 1])], 1, ["A", "B"])
        params = train_hmm(data, smoothing=1e9)
        assert np.abs(params.initial - 0.5).max() < 1e-6
        assert np.abs(params.transition - 0.5).max() < 1e-6
        assert np.abs(params.emission - 0.5).max() < 1e-6

    def test_normalization_invariants(self, rng):
        x = rng.integers(0, 2, size=(30, 3)).astype(np.uint8)
        y = rng.integers(0, 4, size=30)
        data = make_data([(x, y)], 3, list("ABCD"))
        params = train_hmm(data, smoothing=0.7)
        assert params.initial.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(params.transition.sum(axis=1), 1.0, atol=1e-12)
        assert ((params.emission > 0) & (params.emission < 1)).all()


class TestDecodeHmm:
    def test_matches_exhaustive(self, rng):
        for _ in range(40):
            n = int(rng.integers(2, 5))
            L = int(rng.integers(1, 7))
            x = rng.integers(0, 2, size=(max(L * 3, 8), 2)).astype(np.uint8)
            y = rng.integers(0, n, size=x.shape[0])
            data = make_data([(x, y)], 2, [str(c) for c in range(n)])
            params = train_hmm(data, smoothing=0.5)
            xt = rng.integers(0, 2, size=(L, 2)).astype(np.uint8)
            got = decode_hmm(params, xt)
            from relseq.hmm import log_emission_matrix
            em = log_emission_matrix(params, xt)
            em[:, 0] += np.log(params.initial)
            want, _ = exhaustive_argmax(em, np.log(params.transition))
            assert got.tolist() == want.tolist()

    def test_deterministic_emissions_read_off(self):
        # near-degenerate emissions: input k on <=> label k
        x = np.eye(3, dtype=np.uint8)
        seqs = [(np.tile(x, (20, 1)), np.tile(np.arange(3), 20))]
        data = make_data(seqs, 3, ["A", "B", "C"])
        params = train_hmm(data, smoothing=1e-3)
        xt = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 1]], dtype=np.uint8)
        assert decode_hmm(params, xt).tolist() == [1, 0, 2]

    def test_uniform_ties_to_zero(self):
        from relseq.hmm import HmmParams
        params = HmmParams(np.full(2, 0.5), np.full((2, 2), 0.5), np.full((2, 1), 0.5))
        assert decode_hmm(params, np.array([[1], [0], [1]], dtype=np.uint8)).tolist() == [0, 0, 0]

    def test_decoded_beats_truth(self, rng):
        for _ in range(10):
            x = rng.integers(0, 2, size=(12, 2)).astype(np.uint8)
            y = rng.integers(0, 3, size=12)
            data = make_data([(x, y)], 2, ["A", "B", "C"])
            params = train_hmm(data, smoothing=1.0)
            decoded = decode_hmm(params, x)
            assert log_joint(params, x, decoded) >= log_joint(params, x, y) - 1e-9
