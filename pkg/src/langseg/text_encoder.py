"""Toy language encoder: closed-vocabulary tokenizer plus a mean-pooled
embedding bag followed by an affine map and tanh."""
from __future__ import annotations

import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import DataError, FormatError
from .tensor import ParamStore, Tensor

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<PAD>", "<UNK>"
DEFAULT_MAX_LEN = 32

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("circle", "square", "triangle")
TEMPLATE_WORDS = ("a", "scene", "with", "left", "of", "above")

_SPLIT = re.compile(r"[^\W_]+")


class Vocabulary:
    def __init__(self, words: Iterable[str]):
        tokens = [PAD_TOKEN, UNK_TOKEN]
        for w in words:
            w = w.lower()
            if w in (PAD_TOKEN, UNK_TOKEN) or w in tokens:
                continue
            tokens.append(w)
        self.tokens: list[str] = tokens
        self.index: dict[str, int] = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, word: str) -> int:
        return self.index.get(word, UNK)

    def token_at(self, i: int) -> str:
        return self.tokens[i]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise FormatError(f"cannot read vocabulary {path}: {exc}") from exc
        if len(lines) < 2 or lines[0] != PAD_TOKEN or lines[1] != UNK_TOKEN:
            raise FormatError(f"{path}: first two lines must be {PAD_TOKEN} and {UNK_TOKEN}")
        vocab = cls(lines[2:])
        if vocab.tokens != lines:
            raise FormatError(f"{path}: duplicate or non-lowercase tokens")
        return vocab

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens


def default_vocabulary() -> Vocabulary:
    """The closed word set used by the synthetic prompt templates."""
    return Vocabulary(TEMPLATE_WORDS + COLORS + SHAPES)


def split_words(prompt: str) -> list[str]:
    return _SPLIT.findall(prompt.lower())


def tokenize(prompt: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
    """Lowercase, split on whitespace/punctuation, map to ids, pad/truncate."""
    ids = [vocab.lookup(w) for w in split_words(prompt)][:max_len]
    out = np.full(max_len, PAD, dtype=np.int64)
    out[:len(ids)] = ids
    return out


def tokenize_batch(prompts: Sequence[str], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> np.ndarray:
    return np.stack([tokenize(p, vocab, max_len) for p in prompts]) if prompts else np.zeros((0, max_len), np.int64)


def init_text_params(params: ParamStore, vocab_size: int, dim: int, rng: np.random.Generator,
                     prefix: str = "text_encoder") -> None:
    a = np.sqrt(6.0 / (vocab_size + dim))
    params.add(f"{prefix}.embedding", rng.uniform(-a, a, size=(vocab_size, dim)))
    a = np.sqrt(6.0 / (2 * dim))
    params.add(f"{prefix}.proj.weight", rng.uniform(-a, a, size=(dim, dim)))
    params.add(f"{prefix}.proj.bias", np.zeros(dim))


def encode_text(ids: np.ndarray, params: ParamStore, prefix: str = "text_encoder") -> Tensor:
    """Embed token ids ``[T]`` or ``[N, T]`` into ``[D]`` or ``[N, D]``.

    PAD tokens are excluded from the mean; an all-PAD row pools to zero.
    """
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
    table = params[f"{prefix}.embedding"]
    vocab_size = table.shape[0]
    bad = np.argwhere((ids < 0) | (ids >= vocab_size))
    if bad.size:
        r, c = bad[0]
        raise DataError(f"token id {ids[r, c]} at position {c} outside vocabulary of size {vocab_size}")
    keep = (ids != PAD).astype(np.float64)
    counts = np.maximum(keep.sum(axis=1, keepdims=True), 1.0)
    rows = T.take_rows(table, ids)                      # [N, T, D]
    pooled = (rows * keep[:, :, None]).sum(axis=1) / counts
    out = T.tanh(pooled @ params[f"{prefix}.proj.weight"] + params[f"{prefix}.proj.bias"])
    return T.reshape(out, out.shape[1:]) if single else out
