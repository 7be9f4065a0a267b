"""Synthetic recall tasks: multi-query associative recall and selective copying.

Token ids 0 and 1 are reserved in both tasks: 0 is blank/padding and 1 marks
a separator or an answer slot. Every sequence is generated from its own
stream, ``default_rng([seed, stream, index])``, so a batch is a pure function
of its arguments and sequences never share randomness.

Dataset dumps are JSON lines: a header object
``{"task": ..., "config": {...}, "seed": s, "stream": k, "count": B}``
followed by one ``{"index": i, "inputs": [...], "targets": [...], "mask": [...]}``
object per sequence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

BLANK = 0
SLOT = 1
SEPARATOR = 1

TRAIN_STREAM = 0
EVAL_STREAM = 1


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True)
class MqarConfig:
    seq_len: int = 128
    num_pairs: int = 8
    vocab_size: int = 128

    kind = "mqar"

    def __post_init__(self):
        if 4 * self.num_pairs > self.seq_len:
            raise ValueError(f"mqar needs 4k <= T (k={self.num_pairs}, T={self.seq_len})")
        if self.num_pairs < 1:
            raise ValueError("mqar needs at least one key-value pair")
        if self.vocab_size < 8 or self.vocab_size % 2:
            raise ValueError(f"mqar vocab_size must be even and >= 8, got {self.vocab_size}")
        if self.num_pairs > len(self.key_ids):
            raise ValueError(f"{self.num_pairs} distinct keys do not fit in {len(self.key_ids)} key ids")

    @property
    def key_ids(self) -> range:
        return range(2, 2 + self.vocab_size // 2)

    @property
    def value_ids(self) -> range:
        return range(2 + self.vocab_size // 2, self.vocab_size)

    @property
    def num_queries(self) -> int:
        return (self.seq_len - 2 * self.num_pairs) // 2

    @property
    def chance(self) -> float:
        return 1.0 / len(self.value_ids)

    def with_seq_len(self, seq_len: int) -> "MqarConfig":
        return MqarConfig(seq_len, self.num_pairs, self.vocab_size)


@dataclass(frozen=True)
class SelectiveCopyConfig:
    seq_len: int = 256
    num_targets: int = 16
    vocab_size: int = 64

    kind = "selective_copy"

    def __post_init__(self):
        if self.seq_len <= 2 * self.num_targets + 1:
            raise ValueError(
                f"selective copy needs T > 2*num_targets + 1 (T={self.seq_len}, targets={self.num_targets})"
            )
        if self.vocab_size < 3:
            raise ValueError("selective copy needs at least one content token id")

    @property
    def context_len(self) -> int:
        """Position of the separator; everything before it is context."""
        return self.seq_len - self.num_targets - 1

    @property
    def content_region(self) -> int:
        """Content tokens are drawn from positions [0, content_region).

        The position just before the separator is always blank.
        """
        return self.context_len - 1

    @property
    def content_ids(self) -> range:
        return range(2, self.vocab_size)

    @property
    def chance(self) -> float:
        return 1.0 / len(self.content_ids)

    def with_seq_len(self, seq_len: int) -> "SelectiveCopyConfig":
        return SelectiveCopyConfig(seq_len, self.num_targets, self.vocab_size)


TaskConfig = MqarConfig | SelectiveCopyConfig


def task_from_dict(d: dict) -> TaskConfig:
    d = dict(d)
    kind = d.pop("kind", None)
    cls = {"mqar": MqarConfig, "selective_copy": SelectiveCopyConfig}.get(kind)
    if cls is None:
        raise ValueError(f"unknown task kind {kind!r}; expected 'mqar' or 'selective_copy'")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {kind} config keys: {sorted(unknown)}")
    return cls(**d)


def task_to_dict(cfg: TaskConfig) -> dict:
    return {"kind": cfg.kind, **asdict(cfg)}


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(index)])


# ------------------------------------------------------------ MQAR


def mqar_sequence(cfg: MqarConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    T, k = cfg.seq_len, cfg.num_pairs
    keys = rng.choice(np.asarray(cfg.key_ids), size=k, replace=False)
    values = rng.choice(np.asarray(cfg.value_ids), size=k, replace=True)
    inputs = np.full(T, BLANK, dtype=np.int64)
    targets = np.zeros(T, dtype=np.int64)
    mask = np.zeros(T, dtype=bool)
    inputs[0 : 2 * k : 2] = keys
    inputs[1 : 2 * k : 2] = values
    picks = rng.integers(0, k, size=cfg.num_queries)
    q_pos = 2 * k + 2 * np.arange(cfg.num_queries)
    inputs[q_pos] = keys[picks]
    inputs[q_pos + 1] = SLOT
    targets[q_pos + 1] = values[picks]
    mask[q_pos + 1] = True
    return inputs, targets, mask


def gen_mqar(cfg: MqarConfig, seed: int, batch_size: int, start: int = 0, stream: int = TRAIN_STREAM) -> Batch:
    rows = [mqar_sequence(cfg, _rng(seed, stream, start + i)) for i in range(batch_size)]
    return Batch(*(np.stack(col) for col in zip(*rows)))


# ------------------------------------------------------------ selective copying


def selective_copy_sequence(
    cfg: SelectiveCopyConfig, positions: np.ndarray, tokens: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lay out one sequence given sorted context positions and their tokens."""
    T, n = cfg.seq_len, cfg.num_targets
    positions = np.asarray(positions)
    if len(positions) != n or len(tokens) != n:
        raise ValueError(f"need exactly {n} positions and tokens")
    if (np.diff(positions) <= 0).any() or positions[0] < 0 or positions[-1] >= cfg.content_region:
        raise ValueError(f"positions must be strictly increasing inside [0, {cfg.content_region})")
    inputs = np.full(T, BLANK, dtype=np.int64)
    inputs[positions] = tokens
    inputs[cfg.context_len] = SEPARATOR
    inputs[T - n :] = SLOT
    targets = np.zeros(T, dtype=np.int64)
    targets[T - n :] = tokens
    mask = np.zeros(T, dtype=bool)
    mask[T - n :] = True
    return inputs, targets, mask


def gen_selective_copy(
    cfg: SelectiveCopyConfig, seed: int, batch_size: int, start: int = 0, stream: int = TRAIN_STREAM
) -> Batch:
    rows = []
    for i in range(batch_size):
        rng = _rng(seed, stream, start + i)
        positions = np.sort(rng.choice(cfg.content_region, size=cfg.num_targets, replace=False))
        tokens = rng.choice(np.asarray(cfg.content_ids), size=cfg.num_targets, replace=True)
        rows.append(selective_copy_sequence(cfg, positions, tokens))
    return Batch(*(np.stack(col) for col in zip(*rows)))


def generate(cfg: TaskConfig, seed: int, batch_size: int, start: int = 0, stream: int = TRAIN_STREAM) -> Batch:
    if isinstance(cfg, MqarConfig):
        return gen_mqar(cfg, seed, batch_size, start, stream)
    return gen_selective_copy(cfg, seed, batch_size, start, stream)


# ------------------------------------------------------------ scoring and dumps


def accuracy(logits: np.ndarray, batch: Batch) -> float:
    """Fraction of supervised positions whose argmax equals the target.

    Ties go to the lowest token id (``np.argmax`` semantics).
    """
    logits = np.asarray(getattr(logits, "data", logits))
    if logits.shape[:-1] != batch.targets.shape:
        raise ValueError(f"logits {logits.shape} do not match targets {batch.targets.shape}")
    if not batch.mask.any():
        raise ValueError("no supervised positions")
    pred = logits.argmax(axis=-1)
    return float((pred == batch.targets)[batch.mask].mean())


def format_percent(acc: float) -> str:
    return f"{100.0 * acc:.1f}"


def dump_dataset(cfg: TaskConfig, seed: int, batch_size: int, path, stream: int = TRAIN_STREAM) -> None:
    batch = generate(cfg, seed, batch_size, stream=stream)
    with open(path, "w") as fh:
        header = {"task": cfg.kind, "config": asdict(cfg), "seed": seed, "stream": stream, "count": batch_size}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i in range(batch_size):
            rec = {
                "index": i,
                "inputs": batch.inputs[i].tolist(),
                "targets": batch.targets[i].tolist(),
                "mask": batch.mask[i].astype(int).tolist(),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path) -> tuple[dict, Batch]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        recs = [json.loads(line) for line in fh if line.strip()]
    return header, Batch(
        np.array([r["inputs"] for r in recs], dtype=np.int64),
        np.array([r["targets"] for r in recs], dtype=np.int64),
        np.array([r["mask"] for r in recs], dtype=bool),
    )
