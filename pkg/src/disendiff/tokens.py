"""Closed vocabulary, prompt templating, tokenization and embedding lookup."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, take_rows

SEQ_LEN = 8

CLASS_NOUNS = ("disc", "square", "triangle", "ring")
COLOR_WORDS = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "white")
FILLERS = ("a", "photo", "of", "and", "on", "the")
LOCATIONS = ("left", "right", "top")
MODIFIERS = ("V1*", "V2*", "V3*")
NULL, PAD = "<null>", "<pad>"

# never appears in pretraining captions, so its row stays at initialization
RARE_WORD = "the"


class Vocabulary:
    def __init__(self, words=None):
        if words is None:
            words = [NULL, PAD, *CLASS_NOUNS, *COLOR_WORDS, *FILLERS, *LOCATIONS, *MODIFIERS]
        words = list(words)
        if words[:2] != [NULL, PAD]:
            raise ValueError("vocabulary must start with the NULL and PAD tokens")
        if len(set(words)) != len(words):
            raise ValueError("duplicate vocabulary entries")
        self.words = words
        self.ids = {w: i for i, w in enumerate(words)}

    def __len__(self):
        return len(self.words)

    def __contains__(self, word):
        return word in self.ids

    def id(self, word: str) -> int:
        try:
            return self.ids[word]
        except KeyError:
            raise KeyError(f"out-of-vocabulary word {word!r}") from None

    @property
    def modifier_ids(self) -> list[int]:
        return [self.ids[m] for m in MODIFIERS if m in self.ids]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocabulary:
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


VOCAB = Vocabulary()


@dataclass(frozen=True)
class Role:
    kind: str  # "modifier", "class", "filler", "null", "pad"
    index: int = 0  # concept number for modifier/class, 1-based

    def __str__(self):
        return f"{self.kind}({self.index})" if self.kind in ("modifier", "class") else self.kind


def modifier(i: int) -> Role:
    return Role("modifier", i)


def klass(i: int) -> Role:
    return Role("class", i)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple
    roles: tuple
    words: tuple

    def position(self, role: Role) -> int:
        try:
            return self.roles.index(role)
        except ValueError:
            raise KeyError(f"role {role} absent from prompt {' '.join(self.words)!r}") from None

    @property
    def num_concepts(self) -> int:
        return sum(1 for r in self.roles if r.kind == "class")


def template_prompt(classes, modifiers=None) -> str:
    """``V1* c1 and V2* c2 ...``; with no modifiers, the caption ``a c1 and a c2``."""
    classes = list(classes)
    if not 1 <= len(classes) <= 3:
        raise ValueError(f"expected 1 to 3 classes, got {len(classes)}")
    for c in classes:
        if c not in CLASS_NOUNS:
            raise ValueError(f"unknown class noun {c!r}")
    if modifiers is None:
        return " and ".join(f"a {c}" for c in classes)
    modifiers = list(modifiers)
    if len(modifiers) != len(classes):
        raise ValueError("need exactly one modifier per class")
    return " and ".join(f"{m} {c}" for m, c in zip(modifiers, classes))


def tokenize(prompt: str, vocab: Vocabulary = VOCAB, seq_len: int = SEQ_LEN) -> TokenSeq:
    words = prompt.split()
    if len(words) > seq_len:
        raise ValueError(f"prompt has {len(words)} words, limit is {seq_len}")
    ids = [vocab.id(w) for w in words]
    roles: list[Role] = []
    n_class = 0
    pending_mod = None
    for w in words:
        if w in MODIFIERS:
            pending_mod = MODIFIERS.index(w) + 1
            roles.append(modifier(pending_mod))
        elif w in CLASS_NOUNS:
            # a noun after V_i* is class(i); otherwise classes count by occurrence
            n_class += 1
            roles.append(klass(pending_mod if pending_mod is not None else n_class))
            pending_mod = None
        elif w == NULL:
            roles.append(Role("null"))
        else:
            roles.append(Role("filler"))
            pending_mod = None
    pad = seq_len - len(words)
    return TokenSeq(
        ids=tuple(ids + [vocab.id(PAD)] * pad),
        roles=tuple(roles + [Role("pad")] * pad),
        words=tuple(words),
    )


def embed(seq: TokenSeq, table: Tensor) -> Tensor:
    """Row lookup: (N, embed_dim)."""
    return take_rows(table, np.array(seq.ids))


def embed_batch(seqs, table: Tensor) -> Tensor:
    return take_rows(table, np.array([s.ids for s in seqs]))


def init_embedding_table(rng: np.random.Generator, vocab: Vocabulary = VOCAB, dim: int = 32) -> np.ndarray:
    return rng.standard_normal((len(vocab), dim)).astype(np.float32)


def init_modifier_rows(table: np.ndarray, rng: np.random.Generator, vocab: Vocabulary = VOCAB,
                       sigma: float = 0.01) -> None:
    """Modifier rows := rare-word row plus small Gaussian noise (in place)."""
    rare = table[vocab.id(RARE_WORD)]
    for mid in vocab.modifier_ids:
        table[mid] = rare + sigma * rng.standard_normal(rare.shape).astype(table.dtype)
