"""Sequence data model, dataset file formats, chunking, fold splits and Hamming loss.

A labeled sequence pairs a binary observation matrix (one row per step,
one column per basic input) with a label id per step.  Datasets carry a
name table mapping dense input/label ids back to the original strings,
used when printing learned rules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, SchemaError

MAX_INPUTS = 128


def _as_bits(steps) -> np.ndarray:
    x = np.asarray(steps, dtype=np.uint8)
    if x.ndim != 2:
        raise SchemaError("observation steps must form a 2-d array")
    if x.shape[0] < 1:
        raise SchemaError("sequences must have at least one step")
    if not np.isin(x, (0, 1)).all():
        raise SchemaError("observation entries must be 0 or 1")
    return x


@dataclass(frozen=True)
class LabeledSequence:
    """A paired observation/label sequence.

    x has shape (length, n_inputs) with entries in {0,1}; y has shape
    (length,) with label ids.  Both arrays are frozen after construction.
    """

    x: np.ndarray
    y: np.ndarray
    id: int = 0

    def __post_init__(self):
        x = _as_bits(self.x)
        y = np.asarray(self.y, dtype=np.int64)
        if y.ndim != 1 or y.shape[0] != x.shape[0]:
            raise SchemaError("label sequence length must match observations")
        if (y < 0).any():
            raise SchemaError("label ids must be nonnegative")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def length(self) -> int:
        return self.x.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.x.shape[1]


@dataclass
class Dataset:
    """A list of labeled sequences plus the input/label name tables."""

    sequences: list[LabeledSequence] = field(default_factory=list)
    input_names: list[str] = field(default_factory=list)
    label_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.input_names) > MAX_INPUTS:
            raise SchemaError(f"at most {MAX_INPUTS} inputs supported")
        for s in self.sequences:
            if s.n_inputs != self.n_inputs:
                raise SchemaError("all sequences must share the input count")
            if s.length and int(s.y.max(initial=0)) >= max(len(self.label_names), 1):
                raise SchemaError("label id out of range for the name table")

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    @property
    def n_positions(self) -> int:
        return sum(s.length for s in self.sequences)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.sequences[i] for i in indices],
                       list(self.input_names), list(self.label_names))


def hamming_loss(y_true, y_pred) -> float:
    """Fraction of positions whose labels differ."""
    a = np.asarray(y_true)
    b = np.asarray(y_pred)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty sequences have no Hamming loss")
    return float(np.mean(a != b))


def default_input_names(n: int) -> list[str]:
    return [f"s{k + 1}" for k in range(n)]


# --- text format: one position per line, "b1,b2,...,bN;LABEL" ------------
#
# Blank lines separate sequences, '#' starts a comment line.  An optional
# "# inputs: a,b,c" comment names the input columns.

def load_text(path, label_names=None) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.readlines()
    input_names = None
    labels = list(label_names) if label_names is not None else []
    label_ids = {name: i for i, name in enumerate(labels)}
    pinned = label_names is not None
    sequences = []
    cur_bits, cur_labels = [], []

    def flush():
        nonlocal cur_bits, cur_labels
        if cur_bits:
            sequences.append(LabeledSequence(np.array(cur_bits, dtype=np.uint8),
                                             np.array(cur_labels, dtype=np.int64),
                                             id=len(sequences)))
        cur_bits, cur_labels = [], []

    n_bits = None
    for no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if line.startswith("#"):
            body = line[1:].strip()
            if body.lower().startswith("inputs:"):
                input_names = [s.strip() for s in body[len("inputs:"):].split(",") if s.strip()]
            continue
        if not line:
            flush()
            continue
        if ";" not in line:
            raise DataFormatError("expected 'bits;LABEL'", line_no=no)
        bits_part, _, label = line.rpartition(";")
        label = label.strip()
        if not label:
            raise DataFormatError("missing label", line_no=no)
        try:
            bits = [int(tok) for tok in bits_part.split(",")]
        except ValueError:
            raise DataFormatError(f"bad bit vector {bits_part!r}", line_no=no) from None
        if any(b not in (0, 1) for b in bits):
            raise DataFormatError("bits must be 0 or 1", line_no=no)
        if n_bits is None:
            n_bits = len(bits)
        elif len(bits) != n_bits:
            raise SchemaError(f"line {no}: expected {n_bits} bits, found {len(bits)}")
        if label not in label_ids:
            if pinned:
                raise SchemaError(f"line {no}: label {label!r} not in the model's table")
            label_ids[label] = len(labels)
            labels.append(label)
        cur_bits.append(bits)
        cur_labels.append(label_ids[label])
    flush()

    if n_bits is None:
        n_bits = 0
    if input_names is None:
        input_names = default_input_names(n_bits)
    elif len(input_names) != n_bits:
        raise SchemaError(f"{len(input_names)} input names for {n_bits} columns")
    return Dataset(sequences, input_names, labels)


def save_text(data: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# inputs: " + ",".join(data.input_names) + "\n")
        for idx, seq in enumerate(data.sequences):
            if idx:
                fh.write("\n")
            for bits, lab in zip(seq.x, seq.y):
                fh.write(",".join(str(int(b)) for b in bits)
                         + ";" + data.label_names[int(lab)] + "\n")


# --- structured format: one JSON record per line --------------------------

def load_jsonl(path, label_names=None) -> Dataset:
    labels = list(label_names) if label_names is not None else []
    label_ids = {name: i for i, name in enumerate(labels)}
    pinned = label_names is not None
    by_seq: dict[int, tuple[list, list]] = {}
    order: list[int] = []
    n_bits = None
    input_names = None
    with open(path, "r", encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"bad JSON: {exc.msg}", line_no=no) from None
            if rec.get("inputs") is not None and input_names is None:
                input_names = list(rec["inputs"])
            try:
                bits, label, seq_id = rec["bits"], rec["label"], int(rec["seq_id"])
            except (KeyError, TypeError, ValueError):
                raise DataFormatError("record needs bits, label, seq_id", line_no=no) from None
            if any(b not in (0, 1) for b in bits):
                raise DataFormatError("bits must be 0 or 1", line_no=no)
            if n_bits is None:
                n_bits = len(bits)
            elif len(bits) != n_bits:
                raise SchemaError(f"line {no}: expected {n_bits} bits, found {len(bits)}")
            if label not in label_ids:
                if pinned:
                    raise SchemaError(f"line {no}: label {label!r} not in the model's table")
                label_ids[label] = len(labels)
                labels.append(label)
            if seq_id not in by_seq:
                by_seq[seq_id] = ([], [])
                order.append(seq_id)
            by_seq[seq_id][0].append(bits)
            by_seq[seq_id][1].append(label_ids[label])
    sequences = [LabeledSequence(np.array(by_seq[sid][0], dtype=np.uint8),
                                 np.array(by_seq[sid][1], dtype=np.int64), id=i)
                 for i, sid in enumerate(order)]
    if n_bits is None:
        n_bits = 0
    if input_names is None:
        input_names = default_input_names(n_bits)
    elif len(input_names) != n_bits:
        raise SchemaError(f"{len(input_names)} input names for {n_bits} columns")
    return Dataset(sequences, input_names, labels)


def save_jsonl(data: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, seq in enumerate(data.sequences):
            for t, (bits, lab) in enumerate(zip(seq.x, seq.y)):
                rec = {"bits": [int(b) for b in bits],
                       "label": data.label_names[int(lab)],
                       "seq_id": sid}
                if sid == 0 and t == 0:
                    rec["inputs"] = list(data.input_names)
                fh.write(json.dumps(rec) + "\n")


FORMATS = {"text": (load_text, save_text), "jsonl": (load_jsonl, save_jsonl)}


def load_dataset(path, format="text", label_names=None) -> Dataset:
    if format not in FORMATS:
        raise ValueError(f"unknown dataset format {format!r}")
    return FORMATS[format][0](path, label_names=label_names)


def save_dataset(data: Dataset, path, format="text") -> None:
    if format not in FORMATS:
        raise ValueError(f"unknown dataset format {format!r}")
    FORMATS[format][1](data, path)


def chunk_sequences(data: Dataset, chunk_len: int) -> Dataset:
    """Split long sequences into consecutive pieces of at most chunk_len steps."""
    if chunk_len < 1:
        raise ValueError("chunk length must be positive")
    out = []
    for seq in data.sequences:
        for start in range(0, seq.length, chunk_len):
            out.append(LabeledSequence(seq.x[start:start + chunk_len],
                                       seq.y[start:start + chunk_len], id=len(out)))
    return Dataset(out, list(data.input_names), list(data.label_names))


def split_folds(n_sequences: int, k: int, seed: int, invert_ratio: bool = False):
    """Deterministic k-fold partition over whole sequences.

    Returns a list of (train_indices, test_indices).  With invert_ratio the
    single fold becomes the training side and the remaining k-1 folds the
    test side (the 25/75 protocol at k=4).
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    if n_sequences < k:
        raise ValueError(f"cannot split {n_sequences} sequences into {k} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_sequences)
    folds = [sorted(int(i) for i in perm[f::k]) for f in range(k)]
    splits = []
    for f in range(k):
        inside = folds[f]
        outside = sorted(i for g in range(k) if g != f for i in folds[g])
        if invert_ratio:
            splits.append((inside, outside))
        else:
            splits.append((outside, inside))
    return splits
