import itertools

import numpy as np
import pytest

from relseq.data import Dataset, LabeledSequence
from relseq.errors import VocabularyError
from relseq.relfeat import (Atom, DefiniteClause, MalformedClauseError, PatternNode,
                            TemporalVocabulary, classify, clause_to_pattern,
                            ground_eval, load_af_file, mine_af, mined_clauses,
                            parse_clause, pattern_is_af, pattern_support,
                            pattern_to_clause, propositionalize, save_af_file)

# the running example clauses from the activity-recognition illustration
EXAMPLE_CLAUSES = [
    "preparingDinner(T) :- microwave(T).",
    "preparingDinner(T) :- microwave(T), platesCupboard(T).",
    "preparingDinner(T1) :- prevRelPosWindowNear(T1,T2), platesCupboard(T2).",
    "preparingDinner(T1) :- prevRelPosWindowNear(T1,T2).",
    "preparingLunch(T1) :- prevRelPosWindowNear(T1,T2), platesCupboard(T2), microwave(T2).",
    "preparingLunch(T1) :- prevRelPosWindowNear(T1,T2), platesCupboard(T2), "
    "prevRelPosWindowNear(T1,T3), microwave(T3), greater(T2,T3).",
    "preparingDinner(T1) :- microwave(T1), prevRelPosWindowNear(T1,T2), platesCupboard(T2).",
]

EXPECTED_FLAGS = [
    {"SC", "PF", "AF", "CF", "DF"},
    {"SC", "CF", "DF"},
    {"PF", "AF", "CF", "DF"},
    {"DF"},
    {"AF", "CF", "DF"},
    {"AF", "CF", "DF"},
    {"CF", "DF"},
]


def small_vocab(w=3):
    return TemporalVocabulary(("microwave", "platesCupboard"), w_near=w)


class TestParsing:
    def test_round_trip(self):
        for text in EXAMPLE_CLAUSES:
            clause, sup = parse_clause(text)
            again, _ = parse_clause(clause.render())
            assert again == clause
            assert sup is None

    def test_support_suffix(self):
        clause, sup = parse_clause("af0(T1) :- microwave(T1). support=42")
        assert sup == 42
        assert clause.render(support=42).endswith("support=42")

    def test_malformed(self):
        with pytest.raises(MalformedClauseError):
            parse_clause("head(T1,T2) :- microwave(T1).")
        with pytest.raises(MalformedClauseError):
            parse_clause("head(T1) :- microwave(T2).")


class TestClassify:
    @pytest.mark.parametrize("text,flags", list(zip(EXAMPLE_CLAUSES, EXPECTED_FLAGS)))
    def test_running_examples(self, text, flags):
        clause, _ = parse_clause(text)
        assert set(classify(clause).flags) == flags

    def test_unknown_predicate_with_vocab(self):
        clause, _ = parse_clause("head(T1) :- mystery(T1).")
        with pytest.raises(VocabularyError):
            classify(clause, small_vocab())

    def test_chain_transitive_consumption(self):
        clause, _ = parse_clause(
            "h(T1) :- prevRelPosWindowNear(T1,T2), prevRelPosWindowNear(T2,T3), microwave(T3).")
        got = classify(clause)
        assert got.af and got.cf

    def test_dangling_chain_not_af(self):
        clause, _ = parse_clause(
            "h(T1) :- prevRelPosWindowNear(T1,T2), microwave(T2), nextRelPosWindowNear(T2,T3).")
        got = classify(clause)
        assert not got.af and not got.cf

    def test_chain_invariants_on_random_clauses(self, rng):
        # PF => AF => CF => DF and SC => CF over generated well-formed clauses
        preds_e = ["microwave", "platesCupboard"]
        preds_r = ["prevRelPosWindowNear", "nextRelPosWindowNear", "greater"]
        variables = ["T1", "T2", "T3", "T4"]
        n_checked = 0
        for _ in range(10000):
            n_atoms = int(rng.integers(1, 5))
            body = [Atom("microwave" if rng.random() < 0.5 else "platesCupboard",
                         ("T1",))]
            for _ in range(n_atoms - 1):
                if rng.random() < 0.5:
                    body.append(Atom(preds_e[int(rng.integers(0, 2))],
                                     (variables[int(rng.integers(0, 4))],)))
                else:
                    a, b = rng.choice(4, size=2, replace=False)
                    body.append(Atom(preds_r[int(rng.integers(0, 3))],
                                     (variables[int(a)], variables[int(b)])))
            rng.shuffle(body)
            try:
                clause = DefiniteClause(Atom("h", ("T1",)), tuple(body))
            except MalformedClauseError:
                continue
            cat = classify(clause)
            assert cat.df
            if cat.pf:
                assert cat.af
            if cat.af:
                assert cat.cf
            if cat.sc:
                assert cat.cf
            n_checked += 1
        assert n_checked > 9000

    def test_cf_components_decompose_into_afs(self, rng):
        # every CF's variable-disjoint components classify as AFs
        from relseq.relfeat import _components
        texts = [EXAMPLE_CLAUSES[1], EXAMPLE_CLAUSES[6]]
        for text in texts:
            clause, _ = parse_clause(text)
            assert classify(clause).cf
            for comp in _components(clause):
                sub = DefiniteClause(clause.head, tuple(comp))
                assert classify(sub).af


class TestGroundEval:
    def test_evidence_at_pivot(self):
        vocab = small_vocab()
        x = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        clause, _ = parse_clause("h(T) :- microwave(T).")
        assert ground_eval(clause, x, 0, vocab) == 1
        assert ground_eval(clause, x, 1, vocab) == 0

    def test_window_hit(self):
        vocab = small_vocab(w=3)
        x = np.zeros((6, 2), dtype=np.uint8)
        x[2, 1] = 1  # platesCupboard on at t=2
        clause, _ = parse_clause("h(T1) :- prevRelPosWindowNear(T1,T2), platesCupboard(T2).")
        assert ground_eval(clause, x, 4, vocab) == 1   # t-2 inside window

    def test_window_miss(self):
        vocab = small_vocab(w=3)
        x = np.zeros((8, 2), dtype=np.uint8)
        x[2, 1] = 1
        clause, _ = parse_clause("h(T1) :- prevRelPosWindowNear(T1,T2), platesCupboard(T2).")
        assert ground_eval(clause, x, 6, vocab) == 0   # t-4 outside window

    def test_greater_clause(self):
        vocab = small_vocab(w=3)
        clause, _ = parse_clause(EXAMPLE_CLAUSES[5])
        x = np.zeros((6, 2), dtype=np.uint8)
        x[3, 1] = 1   # plates at 3
        x[2, 0] = 1   # microwave at 2, so T2=3 > T3=2
        assert ground_eval(clause, x, 5, vocab) == 1
        x2 = np.zeros((6, 2), dtype=np.uint8)
        x2[2, 1] = 1  # plates at 2
        x2[3, 0] = 1  # microwave at 3: no binding with T2 > T3
        assert ground_eval(clause, x2, 5, vocab) == 0

    def test_unknown_predicate(self):
        clause, _ = parse_clause("h(T) :- mystery(T).")
        with pytest.raises(VocabularyError):
            ground_eval(clause, np.zeros((2, 2), dtype=np.uint8), 0, small_vocab())


# --- mining ------------------------------------------------------------------

def enumerate_tree_patterns(n_inputs, max_atoms):
    """Exhaustive canonical enumeration of the miner's pattern language."""
    def subtrees(budget):
        # all nodes costing exactly `budget` atoms (evidence + child edges)
        for n_ev in range(0, budget + 1):
            for ev in itertools.combinations(range(n_inputs), n_ev):
                rem = budget - n_ev
                for kids in child_sets(rem):
                    yield PatternNode(ev, kids)

    def child_sets(budget):
        if budget == 0:
            yield ()
            return
        # spend >= 1 atom on a first child edge, remainder on more children
        for first_cost in range(1, budget + 1):
            for d in ("prev", "next"):
                for sub in subtrees(first_cost - 1):
                    for rest in child_sets(budget - first_cost):
                        kids = tuple(sorted(((d, sub),) + rest,
                                            key=lambda t: (t[0], t[1].canonical())))
                        yield kids

    seen = {}
    for total in range(1, max_atoms + 1):
        # single root evidence atom
        if total == 1:
            for k in range(n_inputs):
                p = PatternNode((k,), ())
                seen[p.canonical()] = p
        # one subtree hanging off the root
        for d in ("prev", "next"):
            for sub in subtrees(total - 1):
                p = PatternNode((), ((d, sub),))
                seen[p.canonical()] = p
    return list(seen.values())


def brute_force_afs(data, vocab, min_support, max_body):
    out = {}
    for pat in enumerate_tree_patterns(data.n_inputs, max_body):
        if not pattern_is_af(pat):
            continue
        clause = pattern_to_clause(pat, vocab)
        sup = sum(ground_eval(clause, seq.x, t, vocab)
                  for seq in data.sequences for t in range(seq.length))
        if sup >= min_support:
            out[pat.canonical()] = sup
    return out


def toy_data(rng, n_seqs=1, length=6, n_inputs=3):
    seqs = []
    for i in range(n_seqs):
        x = (rng.random((length, n_inputs)) < 0.45).astype(np.uint8)
        y = rng.integers(0, 2, size=length)
        seqs.append(LabeledSequence(x, y, id=i))
    return Dataset(seqs, [f"s{k+1}" for k in range(n_inputs)], ["A", "B"])


class TestMineAf:
    def test_empty_when_support_unreachable(self, rng):
        data = toy_data(rng)
        vocab = TemporalVocabulary.for_dataset(data, w_near=2)
        assert mine_af(data, vocab, min_support=data.n_positions + 1) == []

    def test_always_on_atom_has_full_support(self, rng):
        data = toy_data(rng, length=5)
        x = np.ones((5, 1), dtype=np.uint8)
        data = Dataset([LabeledSequence(x, np.zeros(5, dtype=int))], ["s1"], ["A"])
        vocab = TemporalVocabulary.for_dataset(data, w_near=2)
        mined = mine_af(data, vocab, min_support=1, max_body=1)
        assert any(sup == 5 for _, sup in mined)

    def test_matches_brute_force(self, rng):
        for trial in range(6):
            length = int(rng.integers(4, 9))
            n_inputs = int(rng.integers(2, 4))
            w = int(rng.integers(1, 3))
            data = toy_data(rng, length=length, n_inputs=n_inputs)
            vocab = TemporalVocabulary.for_dataset(data, w_near=w)
            min_sup = int(rng.integers(1, 4))
            mined = {p.canonical(): s for p, s in
                     mine_af(data, vocab, min_sup, max_body=3)}
            want = brute_force_afs(data, vocab, min_sup, max_body=3)
            assert mined == want

    def test_downward_closure(self, rng):
        from relseq.relfeat import _generalizations
        data = toy_data(rng, length=8, n_inputs=3)
        vocab = TemporalVocabulary.for_dataset(data, w_near=2)
        mined = mine_af(data, vocab, min_support=2, max_body=3)
        for pat, sup in mined:
            for gen in _generalizations(pat):
                assert pattern_support(gen, data, vocab.w_near) >= sup

    def test_pattern_clause_round_trip(self, rng):
        data = toy_data(rng, length=6, n_inputs=3)
        vocab = TemporalVocabulary.for_dataset(data, w_near=2)
        for pat in enumerate_tree_patterns(3, 3):
            clause = pattern_to_clause(pat, vocab)
            back = clause_to_pattern(clause, vocab)
            assert back is not None and back.canonical() == pat.canonical()

    def test_mined_afs_classify_as_afs(self, rng):
        data = toy_data(rng, length=8, n_inputs=3)
        vocab = TemporalVocabulary.for_dataset(data, w_near=2)
        for clause, _ in mined_clauses(mine_af(data, vocab, 1, 3), vocab):
            assert classify(clause, vocab).af

    def test_af_file_round_trip(self, rng, tmp_path):
        data = toy_data(rng, length=8, n_inputs=3)
        vocab = TemporalVocabulary.for_dataset(data, w_near=2)
        mined = mine_af(data, vocab, min_support=2, max_body=2)
        path = tmp_path / "afs.txt"
        save_af_file(mined, vocab, path)
        loaded, w_near = load_af_file(path)
        assert w_near == 2
        assert len(loaded) == len(mined)
        want = [c.render(support=s) for c, s in mined_clauses(mined, vocab)]
        got = [c.render(support=s) for c, s in loaded]
        assert got == want


class TestPropositionalize:
    def test_identity_projection(self, rng):
        data = toy_data(rng, length=7, n_inputs=2)
        vocab = TemporalVocabulary.for_dataset(data, w_near=2)
        clause, _ = parse_clause("af0(T1) :- s1(T1).")
        derived = propositionalize([clause], data, vocab)
        assert np.array_equal(derived.sequences[0].x[:, 0], data.sequences[0].x[:, 0])

    def test_never_true_clause(self):
        x = np.zeros((4, 1), dtype=np.uint8)
        data = Dataset([LabeledSequence(x, np.zeros(4, dtype=int))], ["s1"], ["A"])
        vocab = TemporalVocabulary.for_dataset(data, w_near=2)
        clause, _ = parse_clause("af0(T1) :- s1(T1).")
        derived = propositionalize([clause], data, vocab)
        assert not derived.sequences[0].x.any()

    def test_paper_style_temporal_af(self):
        # pansCupboard now with cupsCupboard in the following window
        names = ["pansCupboard", "cupsCupboard"]
        x = np.zeros((6, 2), dtype=np.uint8)
        x[1, 0] = 1
        x[3, 1] = 1
        data = Dataset([LabeledSequence(x, np.zeros(6, dtype=int))], names, ["A"])
        vocab = TemporalVocabulary.for_dataset(data, w_near=3)
        clause, _ = parse_clause(
            "preparingDinner(T1) :- pansCupboard(T1), nextRelPosWindowNear(T1,T2), cupsCupboard(T2).")
        derived = propositionalize([clause], data, vocab)
        col = derived.sequences[0].x[:, 0]
        assert col.tolist() == [0, 1, 0, 0, 0, 0]
        # agree with the slow evaluator everywhere
        for t in range(6):
            assert col[t] == ground_eval(clause, x, t, vocab)

    def test_tree_fast_path_matches_ground_eval(self, rng):
        data = toy_data(rng, length=9, n_inputs=3)
        vocab = TemporalVocabulary.for_dataset(data, w_near=2)
        for pat in enumerate_tree_patterns(3, 3)[:40]:
            clause = pattern_to_clause(pat, vocab)
            derived = propositionalize([clause], data, vocab)
            for seq, dseq in zip(data.sequences, derived.sequences):
                slow = [ground_eval(clause, seq.x, t, vocab)
                        for t in range(seq.length)]
                assert dseq.x[:, 0].tolist() == slow
