"""Synthetic list-selection and open-ended prompts over named categories.

Every item is a single token. A response is valid only when it is exactly
``<answer> item </answer>`` (optionally followed by EOS) with the item drawn
from the prompt's valid set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, EOS, ANSWER_OPEN, ANSWER_CLOSE = 0, 1, 2, 3
RESERVED = ("<pad>", "<eos>", "<answer>", "</answer>")

MIN_LIST_LEN = 4
MAX_LIST_LEN = 12

BUILTIN_CATEGORIES: dict[str, tuple[str, ...]] = {
    "animals": ("cat", "dog", "horse", "zebra", "otter", "falcon", "lizard", "whale",
                "rabbit", "tiger", "koala", "moose", "heron", "llama", "panda", "viper"),
    "countries": ("france", "peru", "japan", "kenya", "norway", "chile", "egypt", "india",
                  "canada", "ghana", "nepal", "spain", "fiji", "mexico", "poland", "oman"),
    "emotions": ("joy", "anger", "fear", "pride", "shame", "awe", "grief", "envy",
                 "relief", "guilt", "hope", "disgust", "calm", "longing", "boredom", "delight"),
    "numbers": ("1024", "3471", "5820", "7306", "2219", "9943", "4187", "6652",
                "8075", "1390", "2764", "5501", "3338", "7912", "6049", "4480"),
    "vehicles": ("car", "bus", "tram", "ferry", "truck", "glider", "scooter", "van",
                 "yacht", "rickshaw", "jeep", "kayak", "subway", "blimp", "tractor", "sled"),
    "foods": ("bread", "rice", "pasta", "soup", "taco", "curry", "salad", "sushi",
              "pizza", "stew", "dumpling", "falafel", "omelet", "noodle", "waffle", "pie"),
    "letters": ("a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l", "m", "n", "o", "p"),
    "words": ("river", "candle", "meadow", "whisper", "copper", "lantern", "echo", "harbor",
              "velvet", "thistle", "ember", "quarry", "mosaic", "drift", "orbit", "saddle"),
}

# One phrasing per tuple; "{list}" / "{category}" marks where content goes.
TEMPLATES: tuple[tuple[str, ...], ...] = (
    ("please", "select", "one", "of", "the", "following", "items", ":", "{list}"),
    ("choose", "an", "item", "from", "this", "list", ":", "{list}"),
    ("pick", "one", "item", "at", "random", "from", "{list}"),
    ("from", "the", "list", "{list}", "select", "exactly", "one"),
    ("name", "an", "item", "from", "the", "category", "{category}"),
    ("give", "one", "random", "example", "of", "{category}"),
)
FORMAT_SUFFIX = ("format", "your", "response", "as", "follows", ":", "<answer>",
                 "selected_item", "</answer>")


class Mode(str, Enum):
    LIST_SELECTION = "LIST_SELECTION"
    OPEN_ENDED = "OPEN_ENDED"


LIST_TEMPLATE_IDS = tuple(i for i, t in enumerate(TEMPLATES) if "{list}" in t)
OPEN_TEMPLATE_IDS = tuple(i for i, t in enumerate(TEMPLATES) if "{category}" in t)


class TaskError(ValueError):
    pass


class Vocabulary:
    """Dense token ids: reserved tokens, instruction words, category names, items."""

    def __init__(self, categories: dict[str, Sequence[str]] | None = None):
        categories = BUILTIN_CATEGORIES if categories is None else categories
        self.tokens: list[str] = list(RESERVED)
        self._ids: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}

        words = [w for t in TEMPLATES + (FORMAT_SUFFIX,) for w in t
                 if not w.startswith("{") and w not in self._ids]
        for w in dict.fromkeys(words):
            self._add(w)
        self.instruction_ids = frozenset(range(len(RESERVED), len(self.tokens)))

        self.category_token: dict[str, int] = {}
        for name in categories:
            self.category_token[name] = self._add(f"<cat:{name}>")

        self.category_items: dict[str, tuple[int, ...]] = {}
        for name, items in categories.items():
            if len(set(items)) < MAX_LIST_LEN:
                raise TaskError(f"category {name!r} needs at least {MAX_LIST_LEN} distinct items")
            self.category_items[name] = tuple(self._add(f"{name}:{it}") for it in dict.fromkeys(items))
        self.item_ids = frozenset(i for ids in self.category_items.values() for i in ids)

    def _add(self, tok: str) -> int:
        self._ids[tok] = len(self.tokens)
        self.tokens.append(tok)
        return self._ids[tok]

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def categories(self) -> list[str]:
        return list(self.category_items)

    def word(self, w: str) -> int:
        return self._ids[w]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class PromptSpec:
    template_id: int
    category: str
    items: tuple[int, ...]
    mode: Mode = Mode.LIST_SELECTION

    def to_json(self) -> dict:
        return {"template_id": self.template_id, "category": self.category,
                "items": list(self.items), "mode": self.mode.value}

    @classmethod
    def from_json(cls, obj: dict) -> "PromptSpec":
        return cls(int(obj["template_id"]), str(obj["category"]),
                   tuple(int(i) for i in obj["items"]), Mode(obj["mode"]))


@dataclass(frozen=True)
class ValidSet:
    valid_items: frozenset[int]

    @property
    def L(self) -> int:
        return len(self.valid_items)

    def __contains__(self, item: int) -> bool:
        return item in self.valid_items


@dataclass(frozen=True)
class ParsedAnswer:
    item: int | None = None

    @property
    def valid(self) -> bool:
        return self.item is not None

    def __repr__(self) -> str:
        return f"Valid({self.item})" if self.valid else "Invalid"


INVALID = ParsedAnswer(None)


@dataclass
class DatasetConfig:
    categories: list[str] = field(default_factory=lambda: list(BUILTIN_CATEGORIES))
    count: int = 64
    min_len: int = MIN_LIST_LEN
    max_len: int = MAX_LIST_LEN
    open_fraction: float = 0.0


def valid_set(spec: PromptSpec, vocab: Vocabulary) -> ValidSet:
    if spec.mode is Mode.LIST_SELECTION:
        return ValidSet(frozenset(spec.items))
    return ValidSet(frozenset(vocab.category_items[spec.category]))


def validate_prompt(spec: PromptSpec, vocab: Vocabulary) -> None:
    if spec.category not in vocab.category_items:
        raise TaskError(f"unknown category {spec.category!r}")
    if spec.mode is Mode.LIST_SELECTION:
        if spec.template_id not in LIST_TEMPLATE_IDS:
            raise TaskError(f"template {spec.template_id} is not a list template")
        if not MIN_LIST_LEN <= len(spec.items) <= MAX_LIST_LEN:
            raise TaskError(f"list length {len(spec.items)} outside [{MIN_LIST_LEN}, {MAX_LIST_LEN}]")
        if len(set(spec.items)) != len(spec.items):
            raise TaskError("list items must be distinct")
    else:
        if spec.template_id not in OPEN_TEMPLATE_IDS:
            raise TaskError(f"template {spec.template_id} is not an open-ended template")
        if spec.items:
            raise TaskError("open-ended prompts carry no items")


def generate_dataset(config: DatasetConfig, seed: int, vocab: Vocabulary | None = None) -> list[PromptSpec]:
    vocab = vocab or Vocabulary()
    for c in config.categories:
        if c not in vocab.category_items:
            raise TaskError(f"unknown category {c!r}")
    if not (MIN_LIST_LEN <= config.min_len <= config.max_len <= MAX_LIST_LEN):
        raise TaskError(f"length range [{config.min_len}, {config.max_len}] not within "
                        f"[{MIN_LIST_LEN}, {MAX_LIST_LEN}]")
    smallest = min(len(vocab.category_items[c]) for c in config.categories)
    if config.max_len > smallest:
        raise TaskError(f"max_len {config.max_len} exceeds category size {smallest}")

    rng = np.random.default_rng(seed)
    out = []
    for _ in range(config.count):
        category = config.categories[rng.integers(len(config.categories))]
        if rng.random() < config.open_fraction:
            tid = OPEN_TEMPLATE_IDS[rng.integers(len(OPEN_TEMPLATE_IDS))]
            out.append(PromptSpec(int(tid), category, (), Mode.OPEN_ENDED))
            continue
        length = int(rng.integers(config.min_len, config.max_len + 1))
        pool = np.asarray(vocab.category_items[category])
        items = tuple(int(i) for i in rng.choice(pool, size=length, replace=False))
        tid = LIST_TEMPLATE_IDS[rng.integers(len(LIST_TEMPLATE_IDS))]
        out.append(PromptSpec(int(tid), category, items, Mode.LIST_SELECTION))
    return out


def render_prompt(spec: PromptSpec, vocab: Vocabulary) -> list[int]:
    out = []
    for w in TEMPLATES[spec.template_id]:
        if w == "{list}":
            out.extend(spec.items)
        elif w == "{category}":
            out.append(vocab.category_token[spec.category])
        else:
            out.append(vocab.word(w))
    out.extend(vocab.word(w) for w in FORMAT_SUFFIX)
    return out


def parse_answer(response: Sequence[int], valid: ValidSet) -> ParsedAnswer:
    r = list(response)
    if len(r) == 4 and r[3] == EOS:
        r = r[:3]
    if len(r) == 3 and r[0] == ANSWER_OPEN and r[2] == ANSWER_CLOSE and r[1] in valid:
        return ParsedAnswer(int(r[1]))
    return INVALID


def split_held_out(categories: Sequence[str], seed: int, ratio: float = 0.8) -> tuple[list[str], list[str]]:
    if len(categories) < 2:
        raise TaskError("need at least 2 categories to split")
    n_train = min(max(int(round(len(categories) * ratio)), 1), len(categories) - 1)
    order = np.random.default_rng(seed).permutation(len(categories))
    train = [categories[i] for i in sorted(order[:n_train])]
    held = [categories[i] for i in sorted(order[n_train:])]
    return train, held


def save_jsonl(prompts: Iterable[PromptSpec], path: str | Path) -> None:
    with open(path, "w") as f:
        for p in prompts:
            f.write(json.dumps(p.to_json()) + "\n")


def load_jsonl(path: str | Path) -> list[PromptSpec]:
    with open(path) as f:
        return [PromptSpec.from_json(json.loads(line)) for line in f if line.strip()]
