import itertools

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from trusttune.errors import DataFormatError, GenerationError
from trusttune.tasks import (CLS_ID, RESERVED_IDS, SUITE_IDS, TaskSpec, bag_of_tokens_accuracy, export_split,
                             generate_corpus, generate_task, import_split, label_for, random_label_task,
                             suite_by_id, task_suite)


def _independent_label(spec, row):
    """Second implementation of the labeling rules, written against raw ids"""
    body = np.asarray(row[1:])
    if spec.family == "KEYWORD":
        return int(np.isin(body, spec.keywords).any())
    if spec.family == "PARITY":
        return int(np.sum(body == spec.token)) % 2
    if spec.family == "ORDER":
        a, b = spec.pair
        return int(np.argmax(body == a) < np.argmax(body == b))
    counts = np.array([np.isin(body, g).sum() for g in spec.groups])
    return int(np.argmax(counts))


def test_generation_is_deterministic(small_suite):
    spec = small_suite["majority_c3"]
    a, b = generate_task(spec), generate_task(spec)
    assert a.train == b.train
    assert a.dev == b.dev


@pytest.mark.parametrize("task_id", SUITE_IDS)
def test_labels_rederivable_from_tokens(small_suite, task_id):
    task = generate_task(small_suite[task_id])
    for split in (task.train, task.dev):
        for row, label in zip(split.tokens, split.labels):
            assert _independent_label(task.spec, row) == label


@pytest.mark.parametrize("task_id", SUITE_IDS)
def test_splits_are_balanced_and_disjoint(small_suite, task_id):
    task = generate_task(small_suite[task_id])
    q = task.num_classes
    for split in (task.train, task.dev):
        freq = np.bincount(split.labels, minlength=q) / len(split)
        assert np.all(np.abs(freq - 1 / q) <= 0.05)
    train_rows = {row.tobytes() for row in task.train.tokens}
    assert not any(row.tobytes() in train_rows for row in task.dev.tokens)


@pytest.mark.parametrize("task_id", SUITE_IDS)
def test_examples_use_content_ids_after_cls(small_suite, task_id):
    task = generate_task(small_suite[task_id])
    tokens = task.train.tokens
    assert np.all(tokens[:, 0] == CLS_ID)
    assert not np.isin(tokens[:, 1:], RESERVED_IDS).any()
    assert tokens.max() < task.spec.vocab_size


def test_suite_shape():
    specs = task_suite(0)
    assert len(specs) == 7
    assert [s.task_id for s in specs] == list(SUITE_IDS)
    assert {s.vocab_size for s in specs} == {64}
    assert {s.seq_len for s in specs} == {16}


def test_suite_rules_are_distinct():
    specs = task_suite(0, n_train=10, n_dev=10)
    rng = np.random.default_rng(0)
    sample = np.concatenate([np.zeros((3000, 1), dtype=np.int64), rng.integers(3, 64, size=(3000, 15))], axis=1)
    labels = {s.task_id: [label_for(s, row.tolist()) for row in sample] for s in specs}
    for a, b in itertools.combinations(labels, 2):
        pairs = [(x, y) for x, y in zip(labels[a], labels[b]) if x is not None and y is not None]
        if len(pairs) < 30:
            continue
        agreement = np.mean([x == y for x, y in pairs])
        assert agreement <= 0.9, (a, b, agreement)


def test_order_needs_room_for_both_tokens():
    with pytest.raises(GenerationError):
        generate_task(TaskSpec("tight", "ORDER", 0, vocab_size=16, seq_len=2, pair=(3, 4)))


@pytest.mark.parametrize("spec", [
    TaskSpec("kw", "KEYWORD", 0, vocab_size=16),
    TaskSpec("res", "KEYWORD", 0, vocab_size=16, keywords=(1,)),
    TaskSpec("maj", "MAJORITY", 0, vocab_size=16, groups=((3, 4),)),
    TaskSpec("par", "PARITY", 0, vocab_size=16, num_classes=3, token=5),
])
def test_infeasible_specs_rejected(spec):
    with pytest.raises(GenerationError):
        generate_task(spec)


def test_random_label_control_keeps_inputs(small_suite):
    task = generate_task(small_suite["keyword_a"])
    control = random_label_task(small_suite["keyword_a"], seed=1)
    assert_array_equal(control.train.tokens, task.train.tokens)
    assert np.bincount(control.train.labels).tolist() == [20, 20]
    assert control.task_id == "keyword_a_random"


def test_export_import_round_trip(small_suite, tmp_path):
    for task_id, spec in small_suite.items():
        task = generate_task(spec)
        for name, split in (("train", task.train), ("dev", task.dev)):
            path = export_split(split, tmp_path / f"{task_id}.{name}.tsv")
            assert import_split(path, vocab_size=32, seq_len=6) == split


def test_export_format_is_exact(tmp_path, keyword_task):
    path = export_split(keyword_task.dev, tmp_path / "dev.tsv")
    raw = path.read_bytes()
    assert b"\r" not in raw
    first = raw.decode("utf-8").split("\n")[0]
    assert first == f"# family=KEYWORD seed={keyword_task.spec.seed} V=32 m=6"


def test_import_hand_written_file(tmp_path):
    path = tmp_path / "hand.tsv"
    path.write_text("# family=PARITY seed=7 V=8 m=3\n1\t0 5 6\n0\t0 5 5\n", encoding="utf-8")
    split = import_split(path)
    assert split.family == "PARITY" and split.seed == 7 and split.vocab_size == 8
    assert split.tokens.tolist() == [[0, 5, 6], [0, 5, 5]]
    assert split.labels.tolist() == [1, 0]


def test_import_rejects_header_mismatch(tmp_path, keyword_task):
    path = export_split(keyword_task.train, tmp_path / "train.tsv")
    with pytest.raises(DataFormatError, match="V=32"):
        import_split(path, vocab_size=64)


@pytest.mark.parametrize("body, line", [
    ("1\t0 5 6\n0 0 5 5\n", 3),
    ("1\t0 5\n", 2),
    ("x\t0 5 6\n", 2),
    ("1\t0 5 9\n", 2),
])
def test_import_reports_line_numbers(tmp_path, body, line):
    path = tmp_path / "bad.tsv"
    path.write_text("# family=PARITY seed=7 V=8 m=3\n" + body, encoding="utf-8")
    with pytest.raises(DataFormatError, match=f"line {line}") as info:
        import_split(path)
    assert info.value.line_number == line


def test_import_rejects_missing_header(tmp_path):
    path = tmp_path / "noheader.tsv"
    path.write_text("1\t0 5 6\n", encoding="utf-8")
    with pytest.raises(DataFormatError, match="line 1"):
        import_split(path)


def test_corpus_shape_and_determinism():
    corpus = generate_corpus(32, 6, 50, seed=4)
    assert corpus.shape == (50, 6)
    assert np.all(corpus[:, 0] == CLS_ID)
    assert not np.isin(corpus[:, 1:], RESERVED_IDS).any()
    assert_array_equal(corpus, generate_corpus(32, 6, 50, seed=4))
    assert not np.array_equal(corpus, generate_corpus(32, 6, 50, seed=5))


def test_bag_of_tokens_separates_keyword_but_not_order():
    specs = suite_by_id(0)
    assert bag_of_tokens_accuracy(generate_task(specs["keyword_a"])) >= 0.95
    assert bag_of_tokens_accuracy(generate_task(specs["order_a"])) <= 0.65
