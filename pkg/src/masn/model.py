"""Whole-model assembly: parameters, batching and fusion variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .encoders import QuestionEncoding, encode_question, encode_stream, init_question_encoder, init_stream_encoder
from .fusion import FusionState, aggregate, fuse, init_fusion, stack_streams
from .graph import GraphState, init_graph, object_graph
from .heads import TaskOutput, count_head, init_heads, multichoice_head, open_ended_head
from .interaction import CrossModalState, init_interaction, vq_interact

ABLATION_VARIANTS = (
    "triple", "single-a", "single-m", "single-all",
    "dual-am", "dual-a-all", "dual-m-all", "no-fusion-concat",
)
VARIANTS = ABLATION_VARIANTS + ("appearance-only", "motion-only")

_BRANCHES = {
    "triple": ("a", "m", "all"),
    "single-a": ("a",), "single-m": ("m",), "single-all": ("all",),
    "dual-am": ("a", "m"), "dual-a-all": ("a", "all"), "dual-m-all": ("m", "all"),
}
_STREAM_KEYS = {"appearance": ("obj_a", "glob_a"), "motion": ("obj_m", "glob_m")}


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    vocab: int
    task: str
    d: int = 32
    embed_dim: int = 300
    g: int = 4
    n_classes: int = 0
    count_range: tuple = (1, 10)
    variant: str = "triple"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d < 2 or self.d % 2:
            raise ValueError("d must be an even number >= 2")
        if self.g < 0:
            raise ValueError("g must be >= 0")
        if self.task == "open_ended" and self.n_classes < 2:
            raise ValueError("open_ended needs n_classes >= 2")
        object.__setattr__(self, "count_range", tuple(self.count_range))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["count_range"] = list(self.count_range)
        return out


def init_params(config: ModelConfig, seed: int = 0) -> ad.ParamStore:
    rng = np.random.default_rng(seed)
    store = ad.ParamStore()
    init_question_encoder(store, "question", rng, config.vocab, config.embed_dim, config.d)
    for stream in ("appearance", "motion"):
        init_stream_encoder(store, f"{stream}/encoder", rng, config.d_in, config.d)
        init_graph(store, f"{stream}/graph", rng, config.d)
        init_interaction(store, f"{stream}/vq", rng, config.d, config.g)
    init_fusion(store, "fusion", rng, config.d)
    init_heads(store, "head", rng, config.d, config.task, config.n_classes)
    return store


@dataclass
class Batch:
    obj_a: np.ndarray
    obj_m: np.ndarray
    boxes: np.ndarray
    frames: np.ndarray
    glob_a: np.ndarray
    glob_m: np.ndarray
    tokens: np.ndarray
    candidates: np.ndarray | None = None     # (B, M, Lc) for multiple choice
    targets: np.ndarray | None = None

    def __len__(self):
        return self.tokens.shape[0]

    @classmethod
    def from_dataset(cls, dataset, idx=None) -> "Batch":
        a = dataset.arrays
        idx = np.arange(len(dataset)) if idx is None else np.asarray(idx, dtype=np.int64)
        cands = a["candidates"][idx] if dataset.task == "multiple_choice" else None
        return cls(a["obj_a"][idx], a["obj_m"][idx], a["boxes"][idx], a["frames"][idx],
                   a["glob_a"][idx], a["glob_m"][idx], a["tokens"][idx], cands,
                   a["answer"][idx])

    def expanded_candidates(self) -> "Batch":
        """One row per (episode, candidate) with the candidate appended to the question."""
        B, M, _ = self.candidates.shape
        rep = lambda x: np.repeat(x, M, axis=0)  # noqa: E731
        tokens = np.concatenate([rep(self.tokens), self.candidates.reshape(B * M, -1)], axis=1)
        return Batch(rep(self.obj_a), rep(self.obj_m), rep(self.boxes), rep(self.frames),
                     rep(self.glob_a), rep(self.glob_m), tokens)


@dataclass
class StreamState:
    graph: GraphState
    cross: CrossModalState


@dataclass
class ModelOutput:
    question: QuestionEncoding
    streams: dict = field(default_factory=dict)     # "appearance"/"motion" -> StreamState
    fusion: FusionState | None = None
    f: ad.Tensor | None = None                      # (B, d) or (B, M, d)
    beta: ad.Tensor | None = None
    head: TaskOutput | None = None

    @property
    def loss(self):
        return self.head.loss


def _run_stream(params, batch, stream):
    obj_key, glob_key = _STREAM_KEYS[stream]
    X = encode_stream(getattr(batch, obj_key), batch.boxes, batch.frames,
                      getattr(batch, glob_key), params.scope(f"{stream}/encoder"))
    graph = object_graph(X, params.scope(f"{stream}/graph"))
    return StreamState(graph, None), graph.F


def _features(params, batch, config) -> ModelOutput:
    qenc = encode_question(batch.tokens, params.scope("question"))
    out = ModelOutput(question=qenc)
    if config.variant == "appearance-only":
        used = ("appearance",)
    elif config.variant == "motion-only":
        used = ("motion",)
    else:
        used = ("appearance", "motion")
    H = {}
    for stream in used:
        state, F = _run_stream(params, batch, stream)
        state.cross = vq_interact(qenc.F_q, F, config.g, params.scope(f"{stream}/vq"))
        out.streams[stream] = state
        H[stream] = state.cross.H

    fp = params.scope("fusion")
    if config.variant in ("appearance-only", "motion-only"):
        out.beta, out.f = aggregate(H[used[0]], fp)
    elif config.variant == "no-fusion-concat":
        out.beta, out.f = aggregate(stack_streams(H["appearance"], H["motion"]), fp)
    else:
        out.fusion = fuse(H["appearance"], H["motion"], qenc.q, fp, _BRANCHES[config.variant])
        out.beta, out.f = out.fusion.beta, out.fusion.f
    return out


def build_model_variant(config: ModelConfig):
    """Return ``forward(params, batch, targets=None) -> ModelOutput`` for ``config.variant``."""
    if config.variant not in VARIANTS:
        raise ValueError(f"unknown variant {config.variant!r}")

    def forward(params, batch: Batch, targets=None) -> ModelOutput:
        hp = params.scope("head")
        if config.task == "multiple_choice":
            B, M = batch.candidates.shape[:2]
            out = _features(params, batch.expanded_candidates(), config)
            out.f = ad.reshape(out.f, (B, M, out.f.shape[-1]))
            out.head = multichoice_head(out.f, targets, hp.scope("mc"))
        else:
            out = _features(params, batch, config)
            if config.task == "count":
                out.head = count_head(out.f, targets, hp.scope("count"), config.count_range)
            else:
                out.head = open_ended_head(out.f, targets, hp.scope("open"))
        return out

    forward.config = config
    return forward


def config_for_dataset(dataset, **overrides) -> ModelConfig:
    gc = dataset.config
    base = dict(d_in=gc.d_in, vocab=gc.vocab, task=gc.task,
                n_classes=gc.n_classes if gc.task == "open_ended" else 0,
                count_range=gc.count_range)
    base.update(overrides)
    return ModelConfig(**base)
