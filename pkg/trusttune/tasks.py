"""Synthetic classification tasks over one shared vocabulary, plus the pretraining corpus.

Families and their labeling rules (position 0 is always CLS and never counted):

- KEYWORD: 1 if any designated keyword occurs, else 0
- MAJORITY: index of the token group with strictly the most occurrences (ties rejected)
- ORDER: 1 if the first ``a`` precedes the first ``b`` (both forced present), else 0
- PARITY: count of the designated token modulo 2
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.linear_model import LogisticRegression

from .errors import DataFormatError, GenerationError
from .utils import stable_seed

logger = logging.getLogger(__name__)

CLS_ID = 0
MASK_ID = 1
PAD_ID = 2
RESERVED_IDS = (CLS_ID, MASK_ID, PAD_ID)

FAMILIES = ("KEYWORD", "MAJORITY", "ORDER", "PARITY")
MAX_OVERSAMPLING = 100


@dataclass(frozen=True)
class Vocabulary:
    size: int = 64

    def __post_init__(self):
        if self.size < 8:
            raise GenerationError(f"vocabulary size must be >= 8, got {self.size}")

    @property
    def content_ids(self) -> np.ndarray:
        return np.arange(len(RESERVED_IDS), self.size)


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    family: str
    seed: int
    vocab_size: int = 64
    seq_len: int = 16
    n_train: int = 2000
    n_dev: int = 500
    num_classes: int = 2
    keywords: Tuple[int, ...] = ()
    groups: Tuple[Tuple[int, ...], ...] = ()
    pair: Tuple[int, ...] = ()
    token: int = -1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise GenerationError(f"unknown task family {self.family}")

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.vocab_size)


@dataclass(eq=False)
class Split:
    family: str
    seed: int
    vocab_size: int
    tokens: np.ndarray
    labels: np.ndarray

    @property
    def seq_len(self) -> int:
        return int(self.tokens.shape[1])

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Split):
            return NotImplemented
        return (self.family == other.family and self.seed == other.seed and self.vocab_size == other.vocab_size
                and np.array_equal(self.tokens, other.tokens) and np.array_equal(self.labels, other.labels))

    def with_labels(self, labels: np.ndarray) -> "Split":
        return Split(self.family, self.seed, self.vocab_size, self.tokens, np.asarray(labels, dtype=np.int64))


@dataclass
class Task:
    spec: TaskSpec
    train: Split
    dev: Split

    @property
    def task_id(self) -> str:
        return self.spec.task_id

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes


def label_for(spec: TaskSpec, tokens: Sequence[int]) -> Optional[int]:
    """Applies the family rule; None where the rule is undefined (MAJORITY tie, ORDER pair missing)"""
    body = list(tokens[1:])
    if spec.family == "KEYWORD":
        return int(any(t in spec.keywords for t in body))
    if spec.family == "MAJORITY":
        counts = [sum(1 for t in body if t in group) for group in spec.groups]
        top = max(counts)
        if counts.count(top) > 1:
            return None
        return counts.index(top)
    if spec.family == "ORDER":
        a, b = spec.pair
        if a not in body or b not in body:
            return None
        return int(body.index(a) < body.index(b))
    return body.count(spec.token) % 2


def _check_spec(spec: TaskSpec) -> None:
    vocab = spec.vocabulary
    used = set(spec.keywords) | {t for g in spec.groups for t in g} | set(spec.pair)
    if spec.token >= 0:
        used.add(spec.token)
    if any(t in RESERVED_IDS or not 0 <= t < vocab.size for t in used):
        raise GenerationError(f"{spec.task_id}: designated tokens must be content ids below {vocab.size}")
    if spec.seq_len < 2:
        raise GenerationError(f"{spec.task_id}: seq_len must leave room for content after CLS")
    if spec.family == "KEYWORD" and not spec.keywords:
        raise GenerationError(f"{spec.task_id}: KEYWORD needs at least one keyword")
    if spec.family == "MAJORITY" and len(spec.groups) != spec.num_classes:
        raise GenerationError(f"{spec.task_id}: MAJORITY needs one token group per class")
    if spec.family == "ORDER":
        if len(spec.pair) != 2 or spec.pair[0] == spec.pair[1]:
            raise GenerationError(f"{spec.task_id}: ORDER needs two distinct tokens")
        if spec.seq_len < 3:
            raise GenerationError(f"{spec.task_id}: seq_len {spec.seq_len} cannot hold CLS plus both ORDER tokens")
    if spec.family == "PARITY" and spec.token < 0:
        raise GenerationError(f"{spec.task_id}: PARITY needs a counted token")
    if spec.family != "MAJORITY" and spec.num_classes != 2:
        raise GenerationError(f"{spec.task_id}: {spec.family} is a binary family")


def _propose(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    content = spec.vocabulary.content_ids
    body_len = spec.seq_len - 1
    if spec.family == "KEYWORD":
        body = rng.choice(content, size=body_len)
    elif spec.family == "MAJORITY":
        group_tokens = np.array(sorted({t for g in spec.groups for t in g}))
        others = np.setdiff1d(content, group_tokens)
        from_group = rng.random(body_len) < 0.5
        body = np.where(from_group, rng.choice(group_tokens, size=body_len), rng.choice(others, size=body_len))
    elif spec.family == "ORDER":
        others = np.setdiff1d(content, spec.pair)
        body = rng.choice(others, size=body_len)
        slots = rng.choice(body_len, size=2, replace=False)
        body[slots[0]], body[slots[1]] = spec.pair
    else:
        others = np.setdiff1d(content, [spec.token])
        body = rng.choice(others, size=body_len)
        count = int(rng.integers(0, min(4, body_len) + 1))
        body[rng.choice(body_len, size=count, replace=False)] = spec.token
    return np.concatenate([[CLS_ID], body]).astype(np.int64)


def _quotas(n: int, q: int) -> List[int]:
    return [n // q + (1 if c < n % q else 0) for c in range(q)]


def generate_task(spec: TaskSpec) -> Task:
    """Balanced, disjoint train and dev splits; deterministic in spec.seed"""
    _check_spec(spec)
    rng = np.random.default_rng(stable_seed(spec.seed, spec.task_id, "generate"))
    seen = set()
    splits = []
    for n in (spec.n_train, spec.n_dev):
        quotas = _quotas(n, spec.num_classes)
        rows, labels = [], []
        attempts, budget = 0, MAX_OVERSAMPLING * max(n, 1)
        while len(rows) < n:
            attempts += 1
            if attempts > budget:
                raise GenerationError(f"{spec.task_id}: could not fill {n} balanced examples "
                                      f"within {MAX_OVERSAMPLING}x oversampling")
            tokens = _propose(spec, rng)
            label = label_for(spec, tokens)
            key = tokens.tobytes()
            if label is None or quotas[label] == 0 or key in seen:
                continue
            seen.add(key)
            quotas[label] -= 1
            rows.append(tokens)
            labels.append(label)
        token_matrix = np.stack(rows) if rows else np.zeros((0, spec.seq_len), dtype=np.int64)
        splits.append(Split(spec.family, spec.seed, spec.vocab_size, token_matrix, np.array(labels, dtype=np.int64)))
    logger.debug("generated %s: %d train / %d dev", spec.task_id, spec.n_train, spec.n_dev)
    return Task(spec, splits[0], splits[1])


SUITE_IDS = ("keyword_a", "majority_a", "order_a", "parity_a", "keyword_b", "majority_c3", "order_b")


def task_suite(master_seed: int, vocab_size: int = 64, seq_len: int = 16, n_train: int = 2000,
               n_dev: int = 500) -> List[TaskSpec]:
    """The seven suite tasks; keyword_a is the probing source, the other six are probe targets.

    Designated tokens are disjoint across tasks so labeling rules stay distinct.
    """
    rng = np.random.default_rng(stable_seed(master_seed, "task-suite"))
    pool = list(rng.permutation(Vocabulary(vocab_size).content_ids))
    needed = 3 + 6 + 2 + 1 + 3 + 9 + 2
    if len(pool) < needed:
        raise GenerationError(f"task suite needs {needed} content tokens, vocabulary has {len(pool)}")

    def take(k: int) -> Tuple[int, ...]:
        return tuple(sorted(int(pool.pop(0)) for _ in range(k)))

    common = dict(vocab_size=vocab_size, seq_len=seq_len, n_train=n_train, n_dev=n_dev)
    return [
        TaskSpec("keyword_a", "KEYWORD", master_seed, keywords=take(3), **common),
        TaskSpec("majority_a", "MAJORITY", master_seed + 1, groups=(take(3), take(3)), **common),
        TaskSpec("order_a", "ORDER", master_seed + 2, pair=tuple(int(pool.pop(0)) for _ in range(2)), **common),
        TaskSpec("parity_a", "PARITY", master_seed + 3, token=int(pool.pop(0)), **common),
        TaskSpec("keyword_b", "KEYWORD", master_seed + 4, keywords=take(3), **common),
        TaskSpec("majority_c3", "MAJORITY", master_seed + 5, num_classes=3, groups=(take(3), take(3), take(3)),
                 **common),
        TaskSpec("order_b", "ORDER", master_seed + 6, pair=tuple(int(pool.pop(0)) for _ in range(2)), **common),
    ]


def suite_by_id(master_seed: int, **sizes: Any) -> Dict[str, TaskSpec]:
    return {spec.task_id: spec for spec in task_suite(master_seed, **sizes)}


def random_label_task(spec: TaskSpec, seed: int) -> Task:
    """Same inputs as ``spec`` with balanced labels drawn independently of the tokens"""
    task = generate_task(spec)
    rng = np.random.default_rng(stable_seed(seed, spec.task_id, "random-labels"))

    def shuffled(split: Split) -> Split:
        return split.with_labels(rng.permutation(np.arange(len(split)) % spec.num_classes))

    control = replace(spec, task_id=f"{spec.task_id}_random")
    return Task(control, shuffled(task.train), shuffled(task.dev))


def generate_corpus(vocab_size: int, seq_len: int, size: int, seed: int, stickiness: float = 0.7,
                    zipf: float = 1.0) -> np.ndarray:
    """Unlabeled sequences of repeated bursts over a Zipf unigram.

    Content ids are ranked in id order, so every seed shares one unigram. Each
    position repeats its left neighbour with probability ``stickiness``;
    otherwise it draws afresh from the unigram. Position 0 is CLS.
    """
    if size < 1:
        raise GenerationError(f"corpus size must be positive, got {size}")
    if not 0.0 <= stickiness < 1.0 or zipf < 0.0:
        raise GenerationError(f"need stickiness in [0, 1) and zipf >= 0, got {stickiness}, {zipf}")
    content = Vocabulary(vocab_size).content_ids
    weights = 1.0 / np.arange(1, len(content) + 1) ** zipf
    unigram = weights / weights.sum()
    rng = np.random.default_rng(stable_seed(seed, "corpus"))
    corpus = np.empty((size, seq_len), dtype=np.int64)
    corpus[:, 0] = CLS_ID
    corpus[:, 1] = rng.choice(content, size=size, p=unigram)
    for pos in range(2, seq_len):
        repeat = rng.random(size) < stickiness
        corpus[:, pos] = np.where(repeat, corpus[:, pos - 1], rng.choice(content, size=size, p=unigram))
    return corpus


def bag_of_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    return np.stack([np.bincount(row[1:], minlength=vocab_size) for row in tokens]).astype(np.float64)


def bag_of_tokens_accuracy(task: Task) -> float:
    """Dev accuracy of a logistic regression on token counts, an order-blind oracle"""
    clf = LogisticRegression(max_iter=2000)
    clf.fit(bag_of_tokens(task.train.tokens, task.spec.vocab_size), task.train.labels)
    return float(clf.score(bag_of_tokens(task.dev.tokens, task.spec.vocab_size), task.dev.labels))


# ---------------------------------------------------------------------------
# split files: "# family=<F> seed=<s> V=<v> m=<m>" then "label<TAB>id id ..."
# ---------------------------------------------------------------------------

def export_split(split: Split, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# family={split.family} seed={split.seed} V={split.vocab_size} m={split.seq_len}"]
    for row, label in zip(split.tokens, split.labels):
        lines.append(f"{int(label)}\t" + " ".join(str(int(t)) for t in row))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    return path


def _parse_header(line: str) -> Dict[str, str]:
    if not line.startswith("# "):
        raise DataFormatError("missing split header", line_number=1)
    header = {}
    for part in line[2:].split():
        key, sep, value = part.partition("=")
        if not sep:
            raise DataFormatError(f"malformed header field {part!r}", line_number=1)
        header[key] = value
    missing = {"family", "seed", "V", "m"} - set(header)
    if missing:
        raise DataFormatError(f"header lacks {', '.join(sorted(missing))}", line_number=1)
    return header


def import_split(path: Path, vocab_size: int | None = None, seq_len: int | None = None) -> Split:
    """Reads a split file; vocab_size/seq_len, when given, must match the header"""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataFormatError("empty split file", line_number=1)
    header = _parse_header(lines[0])
    try:
        seed, V, m = int(header["seed"]), int(header["V"]), int(header["m"])
    except ValueError as e:
        raise DataFormatError(f"non-integer header value: {e}", line_number=1) from e
    if vocab_size is not None and V != vocab_size:
        raise DataFormatError(f"header V={V} does not match vocabulary size {vocab_size}", line_number=1)
    if seq_len is not None and m != seq_len:
        raise DataFormatError(f"header m={m} does not match sequence length {seq_len}", line_number=1)
    rows, labels = [], []
    for number, line in enumerate(lines[1:], start=2):
        label_text, tab, ids_text = line.partition("\t")
        if not tab:
            raise DataFormatError("expected label<TAB>ids", line_number=number)
        try:
            label = int(label_text)
            ids = [int(t) for t in ids_text.split(" ")]
        except ValueError as e:
            raise DataFormatError(f"non-integer field: {e}", line_number=number) from e
        if len(ids) != m:
            raise DataFormatError(f"expected {m} ids, found {len(ids)}", line_number=number)
        if any(not 0 <= t < V for t in ids) or label < 0:
            raise DataFormatError("id outside vocabulary or negative label", line_number=number)
        rows.append(ids)
        labels.append(label)
    tokens = np.array(rows, dtype=np.int64).reshape(len(rows), m)
    return Split(header["family"], seed, V, tokens, np.array(labels, dtype=np.int64))
