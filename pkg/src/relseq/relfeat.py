"""Definite clauses over temporal predicates: taxonomy, evaluation, mining.

Clauses have a label (or placeholder) head over one time variable and a
body of evidence atoms (sensor on at a time point) and relational atoms
linking time variables.  The taxonomy classifies clauses as simple
conjunctions, primary/absolute features, composites, or general definite
features; the miner enumerates frequent absolute features levelwise with
Apriori pruning; propositionalization turns mined clauses into derived
binary input columns.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import count

import numpy as np

from .data import Dataset, LabeledSequence, default_input_names
from .errors import VocabularyError

PREV = "prevRelPosWindowNear"
NEXT = "nextRelPosWindowNear"
GREATER = "greater"
RELATIONAL = (PREV, NEXT, GREATER)


class MalformedClauseError(ValueError):
    """A clause violates well-formedness (arity, head linkage, empty slots)."""


@dataclass(frozen=True)
class Atom:
    pred: str
    args: tuple[str, ...]

    def render(self) -> str:
        return f"{self.pred}({','.join(self.args)})"


@dataclass(frozen=True)
class DefiniteClause:
    head: Atom
    body: tuple[Atom, ...]

    def __post_init__(self):
        if len(self.head.args) != 1 or not self.head.args[0]:
            raise MalformedClauseError("head must carry exactly one time variable")
        for atom in self.body:
            if not atom.args or any(not a for a in atom.args):
                raise MalformedClauseError(f"empty variable slot in {atom.render()}")
        if self.body and not any(self.head.args[0] in a.args for a in self.body):
            raise MalformedClauseError("head variable does not appear in the body")

    @property
    def head_var(self) -> str:
        return self.head.args[0]

    def local_vars(self) -> list[str]:
        seen: list[str] = []
        for atom in self.body:
            for v in atom.args:
                if v != self.head_var and v not in seen:
                    seen.append(v)
        return seen

    def render(self, support: int | None = None) -> str:
        if self.body:
            text = f"{self.head.render()} :- " \
                   + ", ".join(a.render() for a in self.body) + "."
        else:
            text = f"{self.head.render()}."
        if support is not None:
            text += f" support={support}"
        return text


_ATOM_RE = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*\(([^)]*)\)\s*")


def parse_clause(text: str):
    """Parse 'head(T1) :- a(T1), r(T1,T2). support=12' into a clause.

    Returns (clause, support) where support may be None.
    """
    text = text.strip()
    support = None
    m = re.search(r"support=(\d+)\s*$", text)
    if m:
        support = int(m.group(1))
        text = text[:m.start()].strip()
    text = text.rstrip(".")
    if ":-" in text:
        head_text, body_text = text.split(":-", 1)
    else:
        head_text, body_text = text, ""

    def parse_atom(chunk):
        m = _ATOM_RE.fullmatch(chunk)
        if not m:
            raise MalformedClauseError(f"cannot parse atom {chunk!r}")
        args = tuple(a.strip() for a in m.group(2).split(","))
        return Atom(m.group(1), args)

    head = parse_atom(head_text)
    body = []
    if body_text.strip():
        for chunk in re.findall(r"[A-Za-z_][A-Za-z0-9_]*\s*\([^)]*\)", body_text):
            body.append(parse_atom(chunk))
    return DefiniteClause(head, tuple(body)), support


@dataclass(frozen=True)
class TemporalVocabulary:
    """Evidence predicates (one per basic input) plus the fixed relational
    predicates prev/nextRelPosWindowNear (window radius w_near) and greater."""

    evidence: tuple[str, ...]
    w_near: int = 3

    def __post_init__(self):
        if self.w_near < 1:
            raise ValueError("w_near must be at least 1")

    @classmethod
    def for_dataset(cls, data: Dataset, w_near: int = 3) -> "TemporalVocabulary":
        return cls(tuple(data.input_names), w_near)

    def is_relational(self, name: str) -> bool:
        return name in RELATIONAL

    def is_evidence(self, name: str) -> bool:
        return name in self.evidence

    def evidence_index(self, name: str) -> int:
        try:
            return self.evidence.index(name)
        except ValueError:
            raise VocabularyError(name) from None

    def check_atom(self, atom: Atom) -> None:
        if self.is_relational(atom.pred):
            if len(atom.args) != 2:
                raise MalformedClauseError(f"{atom.pred} takes two time variables")
        elif self.is_evidence(atom.pred):
            if len(atom.args) != 1:
                raise MalformedClauseError(f"{atom.pred} takes one time variable")
        else:
            raise VocabularyError(atom.pred)


# --- taxonomy ----------------------------------------------------------------

@dataclass(frozen=True)
class FeatureCategory:
    sc: bool
    pf: bool
    af: bool
    cf: bool
    df: bool = True

    @property
    def flags(self) -> frozenset[str]:
        out = {"DF"}
        for name, val in (("SC", self.sc), ("PF", self.pf),
                          ("AF", self.af), ("CF", self.cf)):
            if val:
                out.add(name)
        return frozenset(out)


def _intro_atom(clause: DefiniteClause, var: str) -> Atom:
    for atom in clause.body:
        if var in atom.args:
            return atom
    raise MalformedClauseError(f"variable {var} never occurs")


def _consumed_vars(clause: DefiniteClause, relational) -> set[str]:
    """Locals reached by evidence, propagated backward along introductions.

    A local is consumed if it occurs in an evidence atom, or if it shares a
    relational atom with a variable that atom introduces and which is
    itself consumed.
    """
    head = clause.head_var
    intro = {v: _intro_atom(clause, v) for v in clause.local_vars()}
    consumed = {v for v in intro
                if any(not relational(a.pred) and v in a.args for a in clause.body)}
    changed = True
    while changed:
        # credit flows back to the anchors of an atom whose introduced
        # variable is consumed
        changed = False
        for atom in clause.body:
            if not relational(atom.pred):
                continue
            introduced_here = [v for v in atom.args if intro.get(v) is atom]
            if any(v in consumed for v in introduced_here):
                for u in atom.args:
                    if u != head and u not in consumed:
                        consumed.add(u)
                        changed = True
    return consumed


def _components(clause: DefiniteClause) -> list[list[Atom]]:
    """Partition body atoms by shared local variables (head var is no link)."""
    head = clause.head_var
    atoms = list(clause.body)
    parent = list(range(len(atoms)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    by_var: dict[str, list[int]] = {}
    for i, atom in enumerate(atoms):
        for v in atom.args:
            if v != head:
                by_var.setdefault(v, []).append(i)
    for idxs in by_var.values():
        for j in idxs[1:]:
            parent[find(j)] = find(idxs[0])
    groups: dict[int, list[Atom]] = {}
    for i, atom in enumerate(atoms):
        groups.setdefault(find(i), []).append(atom)
    return list(groups.values())


def classify(clause: DefiniteClause, vocab: TemporalVocabulary | None = None) -> FeatureCategory:
    """Taxonomy flags for a well-formed clause.

    With no vocabulary, predicates named prev/nextRelPosWindowNear and
    greater count as relational and everything else as evidence.
    """
    if vocab is not None:
        for atom in clause.body:
            vocab.check_atom(atom)
        relational = vocab.is_relational
    else:
        relational = lambda name: name in RELATIONAL
    head = clause.head_var

    def component_is_af(atoms: list[Atom]) -> bool:
        sub = DefiniteClause(clause.head, tuple(atoms)) \
            if any(head in a.args for a in atoms) else None
        if sub is None:
            return False
        locals_ = sub.local_vars()
        for v in locals_:
            if not relational(_intro_atom(sub, v).pred):
                return False
        consumed = _consumed_vars(sub, relational)
        if any(v not in consumed for v in locals_):
            return False
        return len(_components(sub)) <= 1

    comps = _components(clause)
    af = len(comps) == 1 and component_is_af(comps[0]) if clause.body else False
    cf = bool(clause.body) and all(component_is_af(c) for c in comps)
    sc = bool(clause.body) and all(not relational(a.pred) and a.args == (head,)
                                   for a in clause.body)
    pf = False
    if af:
        pf = True
        intro = {v: _intro_atom(clause, v) for v in clause.local_vars()}
        for v, atom in intro.items():
            uses = sum(v in a.args for a in clause.body if a is not atom)
            if uses != 1:
                pf = False
                break
    return FeatureCategory(sc=sc, pf=pf, af=af, cf=cf)


# --- ground evaluation -------------------------------------------------------

def ground_eval(clause: DefiniteClause, x: np.ndarray, t: int,
                vocab: TemporalVocabulary) -> int:
    """1 iff some binding of the local time variables (head var = t,
    0-based) satisfies every body atom within the sequence."""
    L = x.shape[0]
    if not 0 <= t < L:
        raise ValueError(f"position {t} out of range")
    for atom in clause.body:
        vocab.check_atom(atom)
    head = clause.head_var
    locals_ = clause.local_vars()
    w = vocab.w_near

    def atom_ok(atom, binding):
        vals = [binding.get(v) for v in atom.args]
        if any(v is None for v in vals):
            return True   # not fully bound yet
        if atom.pred == PREV:
            return vals[0] - w <= vals[1] <= vals[0] - 1
        if atom.pred == NEXT:
            return vals[0] + 1 <= vals[1] <= vals[0] + w
        if atom.pred == GREATER:
            return vals[0] > vals[1]
        return bool(x[vals[0], vocab.evidence_index(atom.pred)])

    def domain(var, binding):
        for atom in clause.body:
            if atom.pred in (PREV, NEXT) and var in atom.args:
                a, b = atom.args
                if b == var and binding.get(a) is not None:
                    p = binding[a]
                    lo, hi = (p - w, p - 1) if atom.pred == PREV else (p + 1, p + w)
                    return range(max(0, lo), min(L - 1, hi) + 1)
                if a == var and binding.get(b) is not None:
                    p = binding[b]
                    lo, hi = (p + 1, p + w) if atom.pred == PREV else (p - w, p - 1)
                    return range(max(0, lo), min(L - 1, hi) + 1)
        return range(L)

    def search(i, binding):
        if i == len(locals_):
            return all(atom_ok(a, binding) for a in clause.body)
        var = locals_[i]
        for pos in domain(var, binding):
            binding[var] = pos
            if all(atom_ok(a, binding) for a in clause.body):
                if search(i + 1, binding):
                    del binding[var]
                    return True
            del binding[var]
        return False

    return int(search(0, {head: t}))


# --- mining patterns (tree-shaped absolute features) -----------------------

@dataclass(frozen=True)
class PatternNode:
    """A tree over time variables: evidence indices at this node and child
    variables introduced through prev/next window edges."""

    evidence: tuple[int, ...] = ()
    children: tuple[tuple[str, "PatternNode"], ...] = ()

    def canonical(self) -> tuple:
        return (self.evidence,
                tuple(sorted((d, c.canonical()) for d, c in self.children)))

    def n_atoms(self) -> int:
        return len(self.evidence) + sum(1 + c.n_atoms() for _, c in self.children)

    def has_evidence(self) -> bool:
        return bool(self.evidence) or any(c.has_evidence() for _, c in self.children)


def pattern_is_af(root: PatternNode) -> bool:
    """Every introduced variable's subtree must reach an evidence atom."""
    if root.n_atoms() == 0:
        return False

    def ok(node):
        return all(c.has_evidence() and ok(c) for _, c in node.children)

    return ok(root)


def _window_any(sat: np.ndarray, direction: str, w: int) -> np.ndarray:
    """out[t] = any(sat[t']) for t' in the w-window before/after t."""
    L = len(sat)
    cs = np.concatenate([[0], np.cumsum(sat.astype(np.int64))])
    t = np.arange(L)
    if direction == "prev":
        lo = np.maximum(0, t - w)
        hi = t  # exclusive
    else:
        lo = np.minimum(L, t + 1)
        hi = np.minimum(L, t + w + 1)
    return (cs[hi] - cs[lo]) > 0


def pattern_satisfaction(root: PatternNode, x: np.ndarray, w: int) -> np.ndarray:
    """Boolean vector over positions where the pattern body is satisfiable."""

    def node_sat(node):
        sat = np.ones(x.shape[0], dtype=bool)
        for k in node.evidence:
            sat &= x[:, k] == 1
        for direction, child in node.children:
            sat &= _window_any(node_sat(child), direction, w)
        return sat

    return node_sat(root)


def pattern_support(root: PatternNode, data: Dataset, w: int) -> int:
    return sum(int(pattern_satisfaction(root, seq.x, w).sum())
               for seq in data.sequences)


def pattern_to_clause(root: PatternNode, vocab: TemporalVocabulary,
                      head_name: str = "af") -> DefiniteClause:
    names = count(2)
    body: list[Atom] = []

    def emit(node, var):
        for k in node.evidence:
            body.append(Atom(vocab.evidence[k], (var,)))
        for direction, child in node.children:
            child_var = f"T{next(names)}"
            pred = PREV if direction == "prev" else NEXT
            body.append(Atom(pred, (var, child_var)))
            emit(child, child_var)

    emit(root, "T1")
    return DefiniteClause(Atom(head_name, ("T1",)), tuple(body))


def clause_to_pattern(clause: DefiniteClause, vocab: TemporalVocabulary) -> PatternNode | None:
    """Inverse of pattern_to_clause; None when the body is not tree-shaped
    (reused anchors are fine, greater atoms or re-introduced vars are not)."""
    head = clause.head_var
    evidence: dict[str, list[int]] = {head: []}
    edges: dict[str, list[tuple[str, str]]] = {head: []}
    introduced = {head}
    for atom in clause.body:
        if atom.pred == GREATER:
            return None
        if atom.pred in (PREV, NEXT):
            a, b = atom.args
            if a not in introduced or b in introduced:
                return None
            introduced.add(b)
            evidence[b] = []
            edges[b] = []
            edges[a].append(("prev" if atom.pred == PREV else "next", b))
        else:
            if atom.args[0] not in introduced:
                return None
            evidence[atom.args[0]].append(vocab.evidence_index(atom.pred))

    def build(var):
        return PatternNode(tuple(sorted(evidence[var])),
                           tuple(sorted(((d, build(v)) for d, v in edges[var]),
                                        key=lambda t: (t[0], t[1].canonical()))))

    return build(head)


def _normalize(node: PatternNode) -> PatternNode:
    kids = tuple(sorted(((d, _normalize(c)) for d, c in node.children),
                        key=lambda t: (t[0], t[1].canonical())))
    return PatternNode(tuple(sorted(node.evidence)), kids)


def _extensions(root: PatternNode, n_inputs: int):
    """All one-atom refinements keeping the body a single component."""
    out = []

    def rebuild(node, path, repl):
        if not path:
            return repl
        i = path[0]
        kids = list(node.children)
        d, c = kids[i]
        kids[i] = (d, rebuild(c, path[1:], repl))
        return PatternNode(node.evidence, tuple(kids))

    def visit(node, path):
        is_root = not path
        # at the root, evidence or a subtree edge is only allowed on the
        # empty pattern (anything else would split into two components)
        allow_evidence = not is_root or (not node.evidence and not node.children)
        allow_edge = allow_evidence
        if allow_evidence:
            for k in range(n_inputs):
                if k not in node.evidence:
                    new = PatternNode(tuple(sorted(node.evidence + (k,))),
                                      node.children)
                    out.append(_normalize(rebuild(root, path, new)))
        if allow_edge:
            for d in ("prev", "next"):
                new = PatternNode(node.evidence,
                                  node.children + ((d, PatternNode()),))
                out.append(_normalize(rebuild(root, path, new)))
        for i, (_, c) in enumerate(node.children):
            visit(c, path + [i])

    visit(root, [])
    return out


def _generalizations(root: PatternNode):
    """Delete one leaf atom (an evidence index, or a bare leaf edge)."""
    out = []

    def rebuild(node, path, repl):
        if not path:
            return repl
        i = path[0]
        kids = list(node.children)
        d, c = kids[i]
        kids[i] = (d, rebuild(c, path[1:], repl))
        return PatternNode(node.evidence, tuple(kids))

    def visit(node, path):
        for k in node.evidence:
            new = PatternNode(tuple(e for e in node.evidence if e != k),
                              node.children)
            out.append(_normalize(rebuild(root, path, new)))
        for i, (d, c) in enumerate(node.children):
            if not c.evidence and not c.children:
                kids = node.children[:i] + node.children[i + 1:]
                out.append(_normalize(rebuild(root, path,
                                              PatternNode(node.evidence, kids))))
            visit(c, path + [i])

    visit(root, [])
    return [g for g in out if g.n_atoms() >= 1]


def mine_af(data: Dataset, vocab: TemporalVocabulary, min_support: int,
            max_body: int = 3):
    """Levelwise frequent absolute-feature mining with Apriori pruning.

    Candidates grow one atom at a time through single-component patterns
    (evidence on an existing variable, or a fresh window-introduced
    variable); a candidate is counted only when every one-atom
    generalization is frequent.  Output keeps the patterns that are
    grammatical absolute features with support >= min_support; it is
    complete for the evidence/prev/next language within max_body atoms.
    """
    if min_support < 1:
        raise ValueError("min_support must be at least 1")
    n_inputs = data.n_inputs
    w = vocab.w_near
    frequent: dict[tuple, tuple[PatternNode, int]] = {}
    empty = PatternNode()
    level = {p.canonical(): p for p in _extensions(empty, n_inputs)}
    for depth in range(1, max_body + 1):
        survivors = {}
        for key, pat in sorted(level.items()):
            gens = _generalizations(pat)
            if any(g.canonical() not in frequent for g in gens):
                continue
            sup = pattern_support(pat, data, w)
            if sup >= min_support:
                survivors[key] = (pat, sup)
        frequent.update(survivors)
        if depth == max_body:
            break
        level = {}
        for pat, _ in survivors.values():
            for ext in _extensions(pat, n_inputs):
                if ext.n_atoms() == depth + 1:
                    level[ext.canonical()] = ext
    return [(pat, sup) for _, (pat, sup) in sorted(frequent.items())
            if pattern_is_af(pat)]


def mined_clauses(mined, vocab: TemporalVocabulary):
    return [(pattern_to_clause(pat, vocab, head_name=f"af{i}"), sup)
            for i, (pat, sup) in enumerate(mined)]


def save_af_file(mined, vocab: TemporalVocabulary, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# w_near={vocab.w_near}\n")
        for clause, sup in mined_clauses(mined, vocab):
            fh.write(clause.render(support=sup) + "\n")


def load_af_file(path):
    clauses = []
    w_near = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                m = re.search(r"w_near=(\d+)", line)
                if m:
                    w_near = int(m.group(1))
                continue
            if line:
                clauses.append(parse_clause(line))
    return clauses, w_near


def propositionalize(clauses, data: Dataset, vocab: TemporalVocabulary) -> Dataset:
    """Derived dataset whose inputs are the clauses evaluated per position."""
    if not clauses:
        raise ValueError("need at least one clause to propositionalize")
    patterns = [clause_to_pattern(c, vocab) for c in clauses]
    out = []
    for seq in data.sequences:
        cols = []
        for clause, pat in zip(clauses, patterns):
            if pat is not None:
                cols.append(pattern_satisfaction(pat, seq.x, vocab.w_near))
            else:
                cols.append(np.array([ground_eval(clause, seq.x, t, vocab)
                                      for t in range(seq.length)], dtype=bool))
        out.append(LabeledSequence(np.stack(cols, axis=1).astype(np.uint8),
                                   seq.y, id=seq.id))
    names = [f"af{i}" for i in range(len(clauses))]
    return Dataset(out, names, list(data.label_names))
