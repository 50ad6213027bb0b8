"""Task definitions: tokenizer, [MASK] templates, verbalizers, splits.

Templates are strings with slots <S1>, <S2> (angle-bracket unicode forms
are accepted too) and exactly one [MASK]. Sequences are framed as
[CLS] ... [SEP] and truncated from the right, never through the mask.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .tensor import UnsupportedInputError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = [PAD, UNK, CLS, SEP, MASK]

_WORD_RE = re.compile(r"[a-z0-9']+|[^\sa-z0-9']")


class Vocab:
    """Fixed word-level vocabulary built during toy pretraining."""

    def __init__(self, tokens: list[str]):
        if tokens[: len(SPECIALS)] != SPECIALS:
            raise ConfigError(f"vocabulary must start with the reserved tokens {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def cls_id(self) -> int:
        return 2

    @property
    def sep_id(self) -> int:
        return 3

    @property
    def mask_id(self) -> int:
        return 4

    @property
    def special_ids(self) -> frozenset:
        return frozenset(range(len(SPECIALS)))

    def word_id(self, word: str) -> int:
        return self._ids.get(word.lower(), self.unk_id)

    def tokenize(self, text: str) -> list[int]:
        """Lowercased whitespace/punctuation split; unknown words map to [UNK]."""
        return [self._ids.get(w, self.unk_id) for w in _WORD_RE.findall(text.lower())]


@dataclass
class TaskSpec:
    name: str
    is_pair: bool
    template: str
    verbalizer: dict[str, str]  # ordered: label -> label word
    metric: str = "acc"         # "acc" | "acc_and_f1"

    def __post_init__(self):
        if self.template.count("[MASK]") != 1:
            raise ConfigError(
                f"task {self.name!r}: template must contain exactly one [MASK]"
            )
        if not self.verbalizer:
            raise ConfigError(f"task {self.name!r}: empty verbalizer")
        if self.metric not in ("acc", "acc_and_f1"):
            raise ConfigError(f"task {self.name!r}: unknown metric {self.metric!r}")

    @property
    def labels(self) -> list[str]:
        return list(self.verbalizer)

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise DataFormatError(
                f"unknown label {label!r}; expected one of {self.labels}"
            ) from None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "is_pair": self.is_pair,
            "template": self.template,
            "verbalizer": dict(self.verbalizer),
            "metric": self.metric,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(**d)


@dataclass
class Example:
    text_a: str
    text_b: str | None = None
    label: str = ""


@dataclass
class Split:
    train: list[Example] = field(default_factory=list)
    dev: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)


def _normalize_slots(template: str) -> str:
    for raw, canon in (("⟨S1⟩", "<S1>"), ("⟨S2⟩", "<S2>"), ("〈S1〉", "<S1>"), ("〈S2〉", "<S2>")):
        template = template.replace(raw, canon)
    return template


def apply_template(spec: TaskSpec, vocab: Vocab, example: Example,
                   max_len: int | None = None) -> tuple[list[int], int]:
    """Fill the template, frame with [CLS]/[SEP], return (ids, mask index).

    With ``max_len`` set, tokens are dropped from the right (keeping the
    trailing [SEP]); truncating through the mask is an error.
    """
    if spec.is_pair and example.text_b is None:
        raise DataFormatError(f"task {spec.name!r} is a pair task but text_b is missing")
    template = _normalize_slots(spec.template)
    left_t, right_t = template.split("[MASK]")

    def fill(segment: str) -> str:
        segment = segment.replace("<S1>", example.text_a)
        segment = segment.replace("<S2>", example.text_b or "")
        return segment

    left = vocab.tokenize(fill(left_t))
    right = vocab.tokenize(fill(right_t))
    ids = [vocab.cls_id] + left + [vocab.mask_id] + right + [vocab.sep_id]
    mask_position = 1 + len(left)
    if max_len is not None and len(ids) > max_len:
        keep = max_len - 1
        if mask_position >= keep:
            raise UnsupportedInputError(
                f"truncation to {max_len} tokens would drop the [MASK] "
                f"(mask at index {mask_position})"
            )
        ids = ids[:keep] + [vocab.sep_id]
    return ids, mask_position


def verbalize(spec: TaskSpec, vocab: Vocab) -> list[int]:
    """Label-word token ids in label order, for the restricted readout."""
    ids = []
    for label, word in spec.verbalizer.items():
        toks = vocab.tokenize(word)
        if len(toks) != 1:
            raise ConfigError(
                f"label word {word!r} for label {label!r} is not a single token"
            )
        if toks[0] == vocab.unk_id:
            raise ConfigError(f"label word {word!r} for label {label!r} is out of vocabulary")
        ids.append(toks[0])
    if len(set(ids)) != len(ids):
        raise ConfigError(f"task {spec.name!r}: duplicate label words across labels")
    return ids


def few_shot_split(full_train: list[Example], n: int, seed: int,
                   dev_size: int = 1000) -> tuple[list[Example], list[Example]]:
    """Sample n train + dev_size dev examples, uniformly, without overlap."""
    if len(full_train) < n + dev_size:
        raise ConfigError(
            f"dataset has {len(full_train)} examples but the protocol needs "
            f"{n}+{dev_size}; pass a smaller dev_size override"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(full_train))
    train = [full_train[i] for i in perm[:n]]
    dev = [full_train[i] for i in perm[n:n + dev_size]]
    return train, dev


def load_tsv(path, spec: TaskSpec) -> list[Example]:
    """Parse a UTF-8 TSV with header text_a[,text_b],label."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        expected = ["text_a", "text_b", "label"] if spec.is_pair else ["text_a", "label"]
        if header != expected:
            raise DataFormatError(f"{path}: header {header} != expected {expected}")
        examples = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DataFormatError(
                    f"{path}: line {lineno}: expected {len(expected)} columns, got {len(row)}"
                )
            label = row[-1]
            if label not in spec.labels:
                raise DataFormatError(
                    f"{path}: line {lineno}: unknown label {label!r}; expected one of {spec.labels}"
                )
            if spec.is_pair:
                examples.append(Example(text_a=row[0], text_b=row[1], label=label))
            else:
                examples.append(Example(text_a=row[0], label=label))
    return examples
