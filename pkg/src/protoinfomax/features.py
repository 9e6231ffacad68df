"""Lexical features: tokenization, vocabulary, inverse document frequency,
and TF-IDF keyword extraction.

Tokens are lowercased words with punctuation split off as separate tokens.
Index 0 is PAD and index 1 is UNK; both are reserved and never appear as
keywords.  IDF treats every sentence as one document and is fitted on
meta-train text only.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

PAD = 0
UNK = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
MAX_SENTENCE_LEN = 64
MAX_KEYWORDS = 10

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class EmptySequenceError(ValueError):
    """Text produced no tokens."""


class NoKeywordError(ValueError):
    """A sentence contains only reserved tokens, so no keyword exists."""


def split_text(text: str) -> list[str]:
    """Lowercase and split into word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    """Token-to-index map with PAD=0 and UNK=1 reserved."""

    tokens: list[str]
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            self.tokens = [PAD_TOKEN, UNK_TOKEN] + list(self.tokens)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.tokens[idx]


def tokenize(text: str, vocab: Vocabulary, max_len: int = MAX_SENTENCE_LEN) -> list[int]:
    """Map text to token indices; unknown words become UNK.

    Sequences longer than ``max_len`` are truncated from the right.
    Raises :class:`EmptySequenceError` when no token survives.
    """
    words = split_text(text)
    if not words:
        raise EmptySequenceError(f"no tokens in text: {text!r}")
    return [vocab.index(w) for w in words[:max_len]]


def build_vocab(corpus, min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    """Count tokens over a corpus and keep the most frequent ones.

    Ordering is (count descending, token ascending) so rebuilding from the
    same corpus is deterministic regardless of sentence order.
    """
    counts: dict[str, int] = {}
    for sent in corpus.sentences:
        for w in split_text(sent.text):
            counts[w] = counts.get(w, 0) + 1
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_count),
        key=lambda tok: (-counts[tok], tok),
    )
    if max_size is not None:
        kept = kept[: max(0, max_size - 2)]
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + kept)


def save_vocab(vocab: Vocabulary, path) -> None:
    """One token per line; reserved entries are implicit."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.tokens[2:]:
            fh.write(tok + "\n")


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    return Vocabulary([PAD_TOKEN, UNK_TOKEN] + tokens)


@dataclass
class IdfTable:
    """Smoothed inverse document frequencies per vocabulary index.

    idf(t) = ln((1 + D) / (1 + df(t))) + 1 where a document is one
    sentence and D is the number of sentences seen at fit time.
    """

    values: np.ndarray
    n_documents: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    def __getitem__(self, idx: int) -> float:
        return float(self.values[idx])

    def __len__(self) -> int:
        return len(self.values)


def fit_idf(corpus, vocab: Vocabulary, max_len: int = MAX_SENTENCE_LEN) -> IdfTable:
    """Document frequencies over sentences; every vocab entry gets a value,
    unseen ones via the smoothing alone."""
    df = np.zeros(len(vocab), dtype=np.float64)
    n_docs = 0
    for sent in corpus.sentences:
        n_docs += 1
        for idx in set(tokenize(sent.text, vocab, max_len=max_len)):
            df[idx] += 1.0
    values = np.log((1.0 + n_docs) / (1.0 + df)) + 1.0
    return IdfTable(values=values, n_documents=n_docs)


def save_idf(table: IdfTable, vocab: Vocabulary, path) -> None:
    """token<TAB>idf per line, vocabulary order; header row carries D."""
    if len(table) != len(vocab):
        raise ValueError(f"idf length {len(table)} vs vocab {len(vocab)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#documents\t{table.n_documents}\n")
        for tok, val in zip(vocab.tokens, table.values):
            fh.write(f"{tok}\t{float(val)!r}\n")


def load_idf(path, vocab: Vocabulary) -> IdfTable:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if len(header) != 2 or header[0] != "#documents":
            raise ValueError(f"bad idf header in {path}")
        n_docs = int(header[1])
        values = np.empty(len(vocab), dtype=np.float64)
        filled = 0
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            tok, _, val = line.rpartition("\t")
            idx = vocab.index(tok)
            if vocab.token(idx) != tok:
                raise ValueError(f"{path}:{line_no}: token {tok!r} not in vocabulary")
            values[idx] = float(val)
            filled += 1
    if filled != len(vocab):
        raise ValueError(f"idf file covers {filled} of {len(vocab)} vocabulary entries")
    return IdfTable(values=values, n_documents=n_docs)


@dataclass
class KeywordSet:
    """Top TF-IDF tokens of one sentence: (token index, idf weight) pairs,
    sorted by score descending, score ties broken by lower token index."""

    items: list[tuple[int, float]]

    def __len__(self) -> int:
        return len(self.items)

    @property
    def indices(self) -> list[int]:
        return [i for i, _ in self.items]

    @property
    def weights(self) -> list[float]:
        return [w for _, w in self.items]


def extract_keywords(token_ids, idf: IdfTable, max_k: int = MAX_KEYWORDS) -> KeywordSet:
    """Score each distinct non-reserved token by tf * idf within the sentence
    and keep the top ``max_k``."""
    tf: dict[int, int] = {}
    for idx in token_ids:
        if idx not in (PAD, UNK):
            tf[idx] = tf.get(idx, 0) + 1
    if not tf:
        raise NoKeywordError("sentence has only reserved tokens")
    scored = sorted(tf.items(), key=lambda kv: (-kv[1] * idf[kv[0]], kv[0]))
    return KeywordSet(items=[(idx, idf[idx]) for idx, _ in scored[:max_k]])
