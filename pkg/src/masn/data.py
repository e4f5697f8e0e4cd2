"""Synthetic video-QA episodes standing in for extracted object features.

Each stream (appearance, motion) owns a fixed bank of random prototype
vectors. An episode adds prototypes to chosen object slots of the cue
stream(s); the question names which prototype family to ask about, so the
answer is a known function of the planted slots.

Token layout of the question vocabulary::

    0, 1, 2           task words (count, open_ended, multiple_choice)
    3 .. 3+Q-1        query words, one per queryable family
    next n_answers    answer words (used by multiple-choice candidates)
    rest              filler words
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .io import ShapeError, read_container, write_container

TASKS = ("count", "open_ended", "multiple_choice")
CUE_MODES = ("appearance", "motion", "mixed")
STREAMS = ("appearance", "motion")

EPISODE_MAGIC = b"MASNEPI\x00"
EPISODE_VERSION = 1
_TASK_TOKEN = {t: i for i, t in enumerate(TASKS)}
_QUERY_OFFSET = 3


@dataclass(frozen=True)
class GeneratorConfig:
    T: int = 4
    N: int = 4
    d_in: int = 16
    vocab: int = 32
    cue: str = "appearance"
    task: str = "open_ended"
    question_length: int = 4
    # open-ended / multiple-choice: families per stream, variants per family
    n_families: int = 2
    n_answers: int = 4
    n_candidates: int = 4
    # count: occurrences of each family lie in [1, max_count]
    max_count: int = 4
    noise: float = 0.5
    signal: float = 3.0
    prototype_seed: int = 1234

    def __post_init__(self):
        if self.T < 1 or self.N < 1 or self.d_in < 1:
            raise ValueError("T, N and d_in must be >= 1")
        if self.vocab < 4:
            raise ValueError("vocab must be >= 4")
        if self.cue not in CUE_MODES:
            raise ValueError(f"cue must be one of {CUE_MODES}, got {self.cue!r}")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.question_length < 1:
            raise ValueError("question_length must be >= 1")
        if self.n_families < 1 or self.n_answers < 2:
            raise ValueError("need n_families >= 1 and n_answers >= 2")
        if self.task == "multiple_choice" and not 2 <= self.n_candidates <= self.n_answers:
            raise ValueError("multiple_choice needs 2 <= n_candidates <= n_answers")
        if self.max_count < 1:
            raise ValueError("max_count must be >= 1")
        if self.slots_needed > self.K:
            raise ValueError(f"{self.slots_needed} planted slots do not fit in K={self.K}")
        if self.vocab < self.min_vocab:
            raise ValueError(f"vocab {self.vocab} too small; this config needs {self.min_vocab}")

    @property
    def K(self) -> int:
        return self.N * self.T

    @property
    def n_queries(self) -> int:
        return self.n_families * (2 if self.cue == "mixed" else 1)

    @property
    def answer_offset(self) -> int:
        return _QUERY_OFFSET + self.n_queries

    @property
    def filler_offset(self) -> int:
        extra = self.n_answers if self.task == "multiple_choice" else 0
        return self.answer_offset + extra

    @property
    def min_vocab(self) -> int:
        return self.filler_offset

    @property
    def slots_needed(self) -> int:
        if self.task == "count":
            return self.n_families * self.max_count
        return self.n_families

    @property
    def n_classes(self) -> int:
        """Size of the open-ended answer set (count answers are integers)."""
        return self.n_answers

    @property
    def count_range(self) -> tuple[int, int]:
        return (1, self.max_count)

    def bank_size(self) -> int:
        if self.task == "count":
            return self.n_families
        return self.n_families * self.n_answers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ObjectFeatureSet:
    """Per-video object sets for both streams plus per-frame global features."""

    obj_a: np.ndarray       # (K, d_in)
    obj_m: np.ndarray       # (K, d_in)
    boxes: np.ndarray       # (K, 4) normalized x1, y1, x2, y2
    frames: np.ndarray      # (K,) frame index of each object
    glob_a: np.ndarray      # (T, d_in)
    glob_m: np.ndarray      # (T, d_in)

    @property
    def K(self) -> int:
        return self.obj_a.shape[0]

    @property
    def T(self) -> int:
        return self.glob_a.shape[0]

    def permuted(self, perm) -> "ObjectFeatureSet":
        perm = np.asarray(perm)
        return replace(self, obj_a=self.obj_a[perm], obj_m=self.obj_m[perm],
                       boxes=self.boxes[perm], frames=self.frames[perm])


@dataclass
class Question:
    tokens: np.ndarray          # (L,)
    task: str
    answer: int
    candidates: np.ndarray      # (M, Lc); empty unless multiple_choice
    query: int = 0

    @property
    def L(self) -> int:
        return len(self.tokens)


@dataclass
class Episode:
    features: ObjectFeatureSet
    question: Question
    # prototype id planted in each object slot, -1 where nothing was planted
    planted_a: np.ndarray = field(default=None)
    planted_m: np.ndarray = field(default=None)


def prototype_bank(config: GeneratorConfig, stream: str) -> np.ndarray:
    """Fixed prototype vectors for one stream, each of norm ``signal``."""
    rng = np.random.default_rng([config.prototype_seed, STREAMS.index(stream)])
    bank = rng.standard_normal((config.bank_size(), config.d_in))
    bank /= np.linalg.norm(bank, axis=1, keepdims=True)
    return config.signal * bank


def _random_boxes(rng, k):
    x = np.sort(rng.uniform(0.0, 1.0, size=(k, 2)), axis=1)
    y = np.sort(rng.uniform(0.0, 1.0, size=(k, 2)), axis=1)
    # keep boxes non-degenerate
    x[:, 1] = np.maximum(x[:, 1], np.minimum(x[:, 0] + 0.05, 1.0))
    y[:, 1] = np.maximum(y[:, 1], np.minimum(y[:, 0] + 0.05, 1.0))
    x[:, 0] = np.minimum(x[:, 0], x[:, 1] - 1e-3)
    y[:, 0] = np.minimum(y[:, 0], y[:, 1] - 1e-3)
    return np.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], axis=1)


def _plant(rng, config, bank):
    """Choose slots and prototypes for one stream. Returns (planted ids, per-family values)."""
    planted = np.full(config.K, -1, dtype=np.int64)
    slots = rng.permutation(config.K)
    values = np.zeros(config.n_families, dtype=np.int64)
    pos = 0
    for fam in range(config.n_families):
        if config.task == "count":
            n = int(rng.integers(1, config.max_count + 1))
            planted[slots[pos:pos + n]] = fam
            values[fam] = n
            pos += n
        else:
            variant = int(rng.integers(config.n_answers))
            planted[slots[pos]] = fam * config.n_answers + variant
            values[fam] = variant
            pos += 1
    return planted, values


def _stream_features(rng, config, planted, bank):
    obj = config.noise * rng.standard_normal((config.K, config.d_in))
    hit = planted >= 0
    obj[hit] += bank[planted[hit]]
    return obj


def _global_features(rng, config, obj):
    per_frame = obj.reshape(config.T, config.N, config.d_in).mean(axis=1)
    return per_frame + 0.1 * config.noise * rng.standard_normal(per_frame.shape)


def generate_episode(config: GeneratorConfig, seed: int) -> Episode:
    """Pure function of ``(config, seed)``."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    banks = {s: prototype_bank(config, s) for s in STREAMS}
    planted, values = {}, {}
    for s in STREAMS:
        planted[s], values[s] = _plant(rng, config, banks[s])

    query = int(rng.integers(config.n_queries))
    if config.cue == "mixed":
        stream = STREAMS[query // config.n_families]
    else:
        stream = config.cue
    family = query % config.n_families
    answer = int(values[stream][family])

    obj_a = _stream_features(rng, config, planted["appearance"], banks["appearance"])
    obj_m = _stream_features(rng, config, planted["motion"], banks["motion"])
    boxes = _random_boxes(rng, config.K)
    frames = np.repeat(np.arange(config.T, dtype=np.int64), config.N)
    glob_a = _global_features(rng, config, obj_a)
    glob_m = _global_features(rng, config, obj_m)

    tokens = _question_tokens(rng, config, query)
    if config.task == "multiple_choice":
        wrong = rng.permutation([a for a in range(config.n_answers) if a != answer])
        options = np.concatenate([[answer], wrong[: config.n_candidates - 1]])
        order = rng.permutation(config.n_candidates)
        options = options[order]
        candidates = (config.answer_offset + options).reshape(-1, 1).astype(np.int64)
        answer = int(np.flatnonzero(order == 0)[0])
    else:
        candidates = np.zeros((0, 1), dtype=np.int64)

    return Episode(
        features=ObjectFeatureSet(obj_a, obj_m, boxes, frames, glob_a, glob_m),
        question=Question(tokens, config.task, answer, candidates, query),
        planted_a=planted["appearance"],
        planted_m=planted["motion"],
    )


def _question_tokens(rng, config, query):
    qtok = _QUERY_OFFSET + query
    if config.question_length == 1:
        return np.array([qtok], dtype=np.int64)
    n_fill = config.vocab - config.filler_offset
    task_tok = _TASK_TOKEN[config.task]
    if n_fill > 0:
        body = config.filler_offset + rng.integers(n_fill, size=config.question_length - 1)
    else:
        body = np.full(config.question_length - 1, task_tok)
    body[rng.integers(config.question_length - 1)] = qtok
    return np.concatenate([[task_tok], body]).astype(np.int64)


def recount(episode: Episode, config: GeneratorConfig) -> int:
    """Recompute a count answer by scanning the planted-slot record."""
    q = episode.question.query
    stream = STREAMS[q // config.n_families] if config.cue == "mixed" else config.cue
    planted = episode.planted_a if stream == "appearance" else episode.planted_m
    return int(np.sum(planted == q % config.n_families))


# ---------------------------------------------------------------------------
# datasets and the episode file


_ARRAY_NAMES = ("obj_a", "obj_m", "boxes", "frames", "glob_a", "glob_m",
                "tokens", "answer", "candidates", "query", "planted_a", "planted_m")


class EpisodeDataset:
    """A homogeneous stack of episodes sharing one generator config."""

    def __init__(self, config: GeneratorConfig, arrays: dict):
        self.config = config
        self.arrays = arrays
        self._validate()

    def _validate(self):
        c, a = self.config, self.arrays
        n = len(a["answer"])
        expect = {
            "obj_a": (n, c.K, c.d_in), "obj_m": (n, c.K, c.d_in), "boxes": (n, c.K, 4),
            "frames": (n, c.K), "glob_a": (n, c.T, c.d_in), "glob_m": (n, c.T, c.d_in),
            "tokens": (n, c.question_length), "answer": (n,), "query": (n,),
            "planted_a": (n, c.K), "planted_m": (n, c.K),
        }
        for name, shape in expect.items():
            if tuple(a[name].shape) != shape:
                raise ShapeError(f"array {name} has shape {a[name].shape}, expected {shape}")
        m = c.n_candidates if c.task == "multiple_choice" else 0
        if tuple(a["candidates"].shape[:2]) != (n, m):
            raise ShapeError(f"candidates shape {a['candidates'].shape} inconsistent")

    @classmethod
    def from_episodes(cls, config: GeneratorConfig, episodes) -> "EpisodeDataset":
        episodes = list(episodes)
        m = config.n_candidates if config.task == "multiple_choice" else 0

        def stack(get, shape, dtype):
            if not episodes:
                return np.zeros((0,) + shape, dtype=dtype)
            return np.stack([np.asarray(get(e), dtype=dtype) for e in episodes])

        K, T, d = config.K, config.T, config.d_in
        arrays = {
            "obj_a": stack(lambda e: e.features.obj_a, (K, d), np.float64),
            "obj_m": stack(lambda e: e.features.obj_m, (K, d), np.float64),
            "boxes": stack(lambda e: e.features.boxes, (K, 4), np.float64),
            "frames": stack(lambda e: e.features.frames, (K,), np.int64),
            "glob_a": stack(lambda e: e.features.glob_a, (T, d), np.float64),
            "glob_m": stack(lambda e: e.features.glob_m, (T, d), np.float64),
            "tokens": stack(lambda e: e.question.tokens, (config.question_length,), np.int64),
            "answer": stack(lambda e: e.question.answer, (), np.int64),
            "candidates": stack(lambda e: e.question.candidates, (m, 1), np.int64),
            "query": stack(lambda e: e.question.query, (), np.int64),
            "planted_a": stack(lambda e: e.planted_a, (K,), np.int64),
            "planted_m": stack(lambda e: e.planted_m, (K,), np.int64),
        }
        return cls(config, arrays)

    def __len__(self) -> int:
        return len(self.arrays["answer"])

    def __getitem__(self, i: int) -> Episode:
        a = self.arrays
        return Episode(
            features=ObjectFeatureSet(a["obj_a"][i], a["obj_m"][i], a["boxes"][i],
                                      a["frames"][i], a["glob_a"][i], a["glob_m"][i]),
            question=Question(a["tokens"][i], self.config.task, int(a["answer"][i]),
                              a["candidates"][i], int(a["query"][i])),
            planted_a=a["planted_a"][i],
            planted_m=a["planted_m"][i],
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "EpisodeDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return EpisodeDataset(self.config, {k: v[idx] for k, v in self.arrays.items()})

    @property
    def task(self) -> str:
        return self.config.task

    @property
    def targets(self) -> np.ndarray:
        return self.arrays["answer"]


def generate_dataset(config: GeneratorConfig, count: int, seed: int) -> EpisodeDataset:
    """Episode ``i`` is ``generate_episode(config, seed * 1_000_003 + i)``."""
    if count < 0:
        raise ValueError("count must be >= 0")
    eps = (generate_episode(config, seed * 1_000_003 + i) for i in range(count))
    return EpisodeDataset.from_episodes(config, eps)


def write_episodes(path, dataset: EpisodeDataset) -> None:
    c = dataset.config
    header = {
        "kind": "masn-episodes",
        "T": c.T, "N": c.N, "K": c.K, "d_in": c.d_in, "vocab": c.vocab,
        "task": c.task, "cue": c.cue, "count": len(dataset),
        "config": c.to_dict(),
    }
    write_container(path, EPISODE_MAGIC, EPISODE_VERSION, header,
                    {name: dataset.arrays[name] for name in _ARRAY_NAMES})


def load_episodes(path) -> EpisodeDataset:
    header, arrays = read_container(path, EPISODE_MAGIC, EPISODE_VERSION)
    if header.get("K") != header.get("N", 0) * header.get("T", 0):
        raise ShapeError(f"declared K={header.get('K')} != N*T "
                         f"({header.get('N')}*{header.get('T')})")
    try:
        config = GeneratorConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeError(f"header config invalid: {exc}") from exc
    for key in ("T", "N", "d_in", "vocab", "task"):
        if header[key] != getattr(config, key):
            raise ShapeError(f"header {key}={header[key]} disagrees with embedded config")
    missing = set(_ARRAY_NAMES) - set(arrays)
    if missing:
        raise ShapeError(f"missing arrays: {sorted(missing)}")
    ds = EpisodeDataset(config, arrays)
    if len(ds) != header["count"]:
        raise ShapeError(f"header count {header['count']} != {len(ds)} stored episodes")
    return ds
