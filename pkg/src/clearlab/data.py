"""Synthetic and TSV-backed text classification corpora."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, MASK, CLS = "[PAD]", "[UNK]", "[MASK]", "[CLS]"
RESERVED = (PAD, UNK, MASK, CLS)
PAD_ID, UNK_ID, MASK_ID, CLS_ID = range(4)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledExample:
    sample_id: int
    tokens: tuple[int, ...]
    given_label: int
    true_label: int

    @property
    def corrupted(self) -> bool:
        return self.given_label != self.true_label


class Vocab:
    """Token string <-> id map with reserved pad/unk/mask/cls ids."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, text: str) -> tuple[int, ...]:
        return tuple(self.stoi.get(t, UNK_ID) for t in tokenize(text))

    def decode(self, ids: Sequence[int]) -> str:
        return " ".join(self.itos[i] for i in ids)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class Dataset:
    examples: list[LabeledExample]
    vocab: Vocab
    num_classes: int
    split: str = "train"
    label_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and self.examples == other.examples
                and self.vocab == other.vocab and self.num_classes == other.num_classes
                and self.split == other.split)

    @property
    def given(self) -> np.ndarray:
        return np.array([e.given_label for e in self.examples], dtype=np.int64)

    @property
    def true(self) -> np.ndarray:
        return np.array([e.true_label for e in self.examples], dtype=np.int64)

    @property
    def corrupted(self) -> np.ndarray:
        return self.given != self.true

    @property
    def ids(self) -> np.ndarray:
        return np.array([e.sample_id for e in self.examples], dtype=np.int64)

    def with_examples(self, examples: list[LabeledExample], split: str | None = None) -> "Dataset":
        return dataclasses.replace(self, examples=examples, split=split or self.split)

    def encode(self, max_len: int) -> tuple[np.ndarray, np.ndarray]:
        """Token matrix with a leading [CLS], padded/truncated to ``max_len``.

        Returns ``(ids, pad_mask)`` where ``pad_mask`` is 1 on real tokens.
        """
        n = len(self.examples)
        ids = np.full((n, max_len), PAD_ID, dtype=np.int64)
        for i, ex in enumerate(self.examples):
            seq = (CLS_ID, *ex.tokens)[:max_len]
            ids[i, : len(seq)] = seq
        return ids, (ids != PAD_ID).astype(np.float64)


# ---------------------------------------------------------------------------
# synthetic corpus


def synth_generate(num_classes: int, n: int, seq_len: int = 12, difficulty: float = 0.5,
                   seed: int = 0, signal_per_class: int = 6, num_distractors: int = 120) -> Dataset:
    """Class-conditional bag of planted signal tokens among distractors.

    ``difficulty`` in [0, 1]: 0 gives sequences made only of the class's own
    signal tokens; larger values add distractors and make each planted signal
    token come from a different class more often.
    """
    if num_classes < 2 or n < num_classes * 10 or seq_len < 3:
        raise DataError(f"invalid sizes: C={num_classes}, n={n}, seq_len={seq_len}")
    if not 0.0 <= difficulty <= 1.0:
        raise DataError(f"difficulty must lie in [0, 1], got {difficulty}")
    rng = np.random.default_rng(seed)
    sig = [[f"c{c}s{j}" for j in range(signal_per_class)] for c in range(num_classes)]
    distract = [f"w{j}" for j in range(num_distractors)]
    vocab = Vocab([t for row in sig for t in row] + distract)
    sig_ids = np.array([[vocab.stoi[t] for t in row] for row in sig])
    dis_ids = np.array([vocab.stoi[t] for t in distract])

    overlap = 0.15 * difficulty
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    examples = []
    for i, y in enumerate(labels):
        if difficulty == 0.0:
            toks = rng.choice(sig_ids[y], size=seq_len)
        else:
            length = int(rng.integers(seq_len // 2, seq_len + 1))
            k = int(rng.integers(1, 4))
            toks = rng.choice(dis_ids, size=length)
            for pos in rng.choice(length, size=min(k, length), replace=False):
                src = y
                if rng.random() < overlap:
                    src = (y + int(rng.integers(1, num_classes))) % num_classes
                toks[pos] = rng.choice(sig_ids[src])
        examples.append(LabeledExample(i, tuple(int(t) for t in toks), int(y), int(y)))
    return Dataset(examples, vocab, num_classes, "train", [str(c) for c in range(num_classes)])


def split(dataset: Dataset, fractions: Sequence[float], seed: int = 0,
          names: Sequence[str] = ("train", "val", "test")) -> list[Dataset]:
    """Shuffle and cut into disjoint parts tagged with their split name."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must sum to 1, got {sum(fractions)}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n)
    bounds = np.rint(np.cumsum(fractions) * n).astype(int)
    bounds[-1] = n
    parts, start = [], 0
    for name, stop in zip(names, bounds):
        if stop <= start:
            raise DataError(f"split '{name}' would be empty")
        idx = np.sort(order[start:stop])
        parts.append(dataset.with_examples([dataset.examples[i] for i in idx], split=name))
        start = stop
    return parts


def train_test(num_classes: int = 5, n_train: int = 5000, n_test: int = 1000,
               seq_len: int = 12, difficulty: float = 0.5, seed: int = 0) -> tuple[Dataset, Dataset]:
    full = synth_generate(num_classes, n_train + n_test, seq_len, difficulty, seed)
    tr, te = split(full, (n_train / len(full), n_test / len(full)), seed=seed, names=("train", "test"))
    return tr, te


# ---------------------------------------------------------------------------
# TSV I/O


def load_tsv(path: str | Path, vocab: Vocab | None = None,
             label_index: dict[str, int] | None = None, split_name: str = "train") -> Dataset:
    """Read ``text<TAB>label`` lines.

    With ``vocab=None`` a vocabulary is built from this file (use that for the
    training split and pass it on for the others); unknown tokens map to UNK.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    lines = path.read_text(encoding="utf-8").splitlines()
    rows = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1].strip():
            raise DataError(f"{path}:{lineno}: expected 'text<TAB>label'")
        rows.append((parts[0], parts[1].strip()))
    if not rows:
        raise DataError(f"{path}: empty file")
    build = vocab is None
    vocab = Vocab() if build else vocab
    labels = dict(label_index or {})
    examples = []
    for i, (text, lab) in enumerate(rows):
        if build:
            for t in tokenize(text):
                vocab.add(t)
        if lab not in labels:
            if label_index is not None:
                raise DataError(f"{path}: unknown label {lab!r}")
            labels[lab] = len(labels)
        y = labels[lab]
        examples.append(LabeledExample(i, vocab.encode(text), y, y))
    names = sorted(labels, key=labels.get)
    return Dataset(examples, vocab, max(len(labels), 2), split_name, names)


def save_corpus(dataset: Dataset, path: str | Path) -> None:
    """Write sample_id, tokens, given_label, true_label, corrupted as TSV."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"#split={dataset.split}\tnum_classes={dataset.num_classes}\n")
        f.write("#vocab=" + " ".join(dataset.vocab.itos[len(RESERVED):]) + "\n")
        f.write("sample_id\ttokens\tgiven_label\ttrue_label\tcorrupted\n")
        for e in dataset.examples:
            toks = " ".join(dataset.vocab.itos[t] for t in e.tokens)
            f.write(f"{e.sample_id}\t{toks}\t{e.given_label}\t{e.true_label}\t{int(e.corrupted)}\n")


def load_corpus(path: str | Path) -> Dataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if len(lines) < 3 or not lines[0].startswith("#split="):
        raise DataError(f"{path}: not a corpus file")
    meta = dict(kv.split("=", 1) for kv in lines[0][1:].split("\t"))
    vocab = Vocab(lines[1][len("#vocab="):].split())
    examples = []
    for lineno, line in enumerate(lines[3:], 4):
        sid, toks, given, true, flag = line.split("\t")
        ex = LabeledExample(int(sid), tuple(vocab.stoi[t] for t in toks.split()), int(given), int(true))
        if int(flag) != int(ex.corrupted):
            raise DataError(f"{path}:{lineno}: corrupted flag disagrees with labels")
        examples.append(ex)
    c = int(meta["num_classes"])
    return Dataset(examples, vocab, c, meta["split"], [str(i) for i in range(c)])
