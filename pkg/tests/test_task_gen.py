from collections import Counter

import pytest

from gapolab.task_gen import (ANSWER_CLOSE, ANSWER_OPEN, EOS, INVALID, DatasetConfig, Mode, ParsedAnswer,
                              PromptSpec, TaskError, Vocabulary, generate_dataset, load_jsonl, parse_answer,
                              render_prompt, save_jsonl, split_held_out, valid_set, validate_prompt)


def test_vocabulary_is_dense_and_stable(vocab):
    assert len(set(vocab.tokens)) == len(vocab)
    assert Vocabulary().tokens == vocab.tokens
    for cat, ids in vocab.category_items.items():
        assert len(ids) >= 12
        assert all(vocab.tokens[i].startswith(cat + ":") for i in ids)


def test_vocabulary_rejects_small_category():
    with pytest.raises(TaskError):
        Vocabulary({"tiny": ["a", "b", "c"]})


def test_generate_single_category_shapes(vocab):
    cat = vocab.categories[0]
    out = generate_dataset(DatasetConfig([cat], count=3, min_len=4, max_len=12), seed=7, vocab=vocab)
    assert len(out) == 3
    for p in out:
        assert 4 <= len(p.items) <= 12
        assert len(set(p.items)) == len(p.items)
        validate_prompt(p, vocab)


def test_generate_is_deterministic(vocab):
    cfg = DatasetConfig(["animals", "numbers"], count=20)
    assert generate_dataset(cfg, 7, vocab) == generate_dataset(cfg, 7, vocab)
    assert generate_dataset(cfg, 7, vocab) != generate_dataset(cfg, 8, vocab)


def test_generate_category_counts(vocab):
    out = generate_dataset(DatasetConfig(["animals", "numbers"], count=100), 1, vocab)
    counts = Counter(p.category for p in out)
    assert set(counts) <= {"animals", "numbers"}
    assert sum(counts.values()) == 100


def test_generate_open_fraction(vocab):
    out = generate_dataset(DatasetConfig(["animals"], count=50, open_fraction=1.0), 0, vocab)
    assert all(p.mode is Mode.OPEN_ENDED and p.items == () for p in out)
    assert valid_set(out[0], vocab).L == len(vocab.category_items["animals"])


@pytest.mark.parametrize("kwargs", [
    {"categories": ["nope"]},
    {"categories": ["animals"], "min_len": 3},
    {"categories": ["animals"], "min_len": 9, "max_len": 8},
    {"categories": ["animals"], "max_len": 13},
])
def test_generate_rejects_bad_config(vocab, kwargs):
    with pytest.raises(TaskError):
        generate_dataset(DatasetConfig(**kwargs), 0, vocab)


def test_render_depends_on_template_and_order(vocab):
    a, b = vocab.category_items["animals"][:2]
    items = vocab.category_items["animals"][2:6]
    p0 = PromptSpec(0, "animals", (a, b) + items)
    p1 = PromptSpec(1, "animals", (a, b) + items)
    swapped = PromptSpec(0, "animals", (b, a) + items)
    assert render_prompt(p0, vocab) != render_prompt(p1, vocab)
    assert render_prompt(p0, vocab) != render_prompt(swapped, vocab)
    assert render_prompt(p0, vocab) == render_prompt(p0, vocab)


def test_render_contains_format_instruction(vocab):
    p = PromptSpec(4, "foods", (), Mode.OPEN_ENDED)
    toks = render_prompt(p, vocab)
    assert vocab.category_token["foods"] in toks
    assert ANSWER_OPEN in toks and ANSWER_CLOSE in toks


def test_parse_answer_cases(vocab):
    items = vocab.category_items["animals"][:5]
    vs = valid_set(PromptSpec(0, "animals", items), vocab)
    v3 = items[3]
    outside = vocab.category_items["animals"][7]
    assert parse_answer([ANSWER_OPEN, v3, ANSWER_CLOSE, EOS], vs) == ParsedAnswer(v3)
    assert parse_answer([ANSWER_OPEN, v3, ANSWER_CLOSE], vs).item == v3
    assert parse_answer([ANSWER_OPEN, outside, ANSWER_CLOSE], vs) == INVALID
    assert parse_answer([v3], vs) == INVALID
    assert parse_answer([ANSWER_OPEN, v3, v3, ANSWER_CLOSE], vs) == INVALID
    assert parse_answer([], vs) == INVALID


def test_split_held_out():
    cats = [f"c{i}" for i in range(10)]
    tr, ev = split_held_out(cats, 3, 0.8)
    assert (len(tr), len(ev)) == (8, 2)
    assert not set(tr) & set(ev) and set(tr) | set(ev) == set(cats)
    assert split_held_out(cats, 3, 0.8) == (tr, ev)
    assert tuple(map(len, split_held_out(["a", "b"], 0, 0.8))) == (1, 1)
    with pytest.raises(TaskError):
        split_held_out(["a"], 0)


def test_validate_prompt_errors(vocab):
    items = vocab.category_items["animals"]
    with pytest.raises(TaskError):
        validate_prompt(PromptSpec(0, "animals", items[:3]), vocab)
    with pytest.raises(TaskError):
        validate_prompt(PromptSpec(0, "animals", (items[0],) * 4), vocab)
    with pytest.raises(TaskError):
        validate_prompt(PromptSpec(4, "animals", items[:4]), vocab)
    with pytest.raises(TaskError):
        validate_prompt(PromptSpec(0, "martians", items[:4]), vocab)


def test_jsonl_round_trip(tmp_path, vocab):
    out = generate_dataset(DatasetConfig(["animals", "foods"], count=10, open_fraction=0.3), 2, vocab)
    save_jsonl(out, tmp_path / "d.jsonl")
    assert load_jsonl(tmp_path / "d.jsonl") == out
