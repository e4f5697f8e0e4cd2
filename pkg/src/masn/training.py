"""Adam, the deterministic training loop, evaluation metrics and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import EpisodeDataset
from .io import ShapeError, read_container, write_container
from .model import Batch, ModelConfig, build_model_variant, config_for_dataset, init_params

CHECKPOINT_MAGIC = b"MASNCKPT"
CHECKPOINT_VERSION = 1
CLIP_NORM = 5.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-4
    batch_size: int | None = None      # None: 32, or 16 for multiple choice
    seed: int = 0
    d: int = 32
    g: int = 4
    embed_dim: int = 300
    variant: str = "triple"
    clip: bool = False
    task: str | None = None            # optional guard against the dataset task

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def effective_batch_size(self, task: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 16 if task == "multiple_choice" else 32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ad.ParamStore) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)

    def copy(self) -> "AdamState":
        return AdamState({k: v.copy() for k, v in self.m.items()},
                         {k: v.copy() for k, v in self.v.items()}, self.t)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def adam_step(params: ad.ParamStore, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              clip_norm: float | None = None) -> None:
    """One bias-corrected Adam update in place. Paths are visited in sorted order."""
    for path in sorted(grads):
        if not np.all(np.isfinite(grads[path])):
            raise ad.NonFiniteError(f"non-finite gradient at {path}; step aborted")
    scale = 1.0
    if clip_norm is not None:
        norm = global_norm(grads)
        if norm > clip_norm:
            scale = clip_norm / norm
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for path in sorted(grads):
        g = grads[path] * scale
        m = state.m.setdefault(path, np.zeros_like(g))
        v = state.v.setdefault(path, np.zeros_like(g))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[path].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# metrics


def task_metrics(task: str, predictions, targets, loss: float) -> dict:
    """Fixed key set: ``task, n, accuracy, mse, loss``; ``mse`` is None unless counting."""
    predictions = np.asarray(predictions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    n = int(len(targets))
    acc = float(np.mean(predictions == targets)) if n else 0.0
    mse = None
    if task == "count":
        mse = float(np.mean((predictions - targets) ** 2.0)) if n else 0.0
    return {"task": task, "n": n, "accuracy": acc, "mse": mse, "loss": float(loss)}


def _batches(n: int, size: int, order=None):
    order = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield order[start:start + size]


def predict_dataset(forward, params, dataset: EpisodeDataset, batch_size: int = 64):
    """Run the model without gradients. Returns ``(predictions, mean loss)``."""
    preds, loss_sum = [], 0.0
    with ad.no_grad():
        for idx in _batches(len(dataset), batch_size):
            batch = Batch.from_dataset(dataset, idx)
            out = forward(params, batch, batch.targets)
            preds.append(out.head.prediction)
            loss_sum += out.loss.item() * len(idx)
    n = len(dataset)
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return preds, (loss_sum / n if n else 0.0)


def evaluate(forward, params, dataset: EpisodeDataset, batch_size: int = 64) -> dict:
    preds, loss = predict_dataset(forward, params, dataset, batch_size)
    return task_metrics(dataset.task, preds, dataset.targets, loss)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: ad.ParamStore
    adam: AdamState
    epoch: int
    rng_state: dict
    history: list = field(default_factory=list)

    def copy(self) -> "Checkpoint":
        return replace(self, params=self.params.copy(), adam=self.adam.copy(),
                       rng_state=json.loads(json.dumps(self.rng_state)),
                       history=[dict(h) for h in self.history])

    def forward(self):
        return build_model_variant(self.model_config)

    def manifest(self) -> dict:
        return {
            "kind": "masn-checkpoint",
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "epoch": self.epoch,
            "adam_t": self.adam.t,
            "rng_state": self.rng_state,
            "history": self.history,
            "param_paths": self.params.paths(),
        }


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = {}
    for k in ckpt.params.paths():
        arrays[f"param:{k}"] = ckpt.params[k].data
        arrays[f"adam_m:{k}"] = ckpt.adam.m.get(k, np.zeros_like(ckpt.params[k].data))
        arrays[f"adam_v:{k}"] = ckpt.adam.v.get(k, np.zeros_like(ckpt.params[k].data))
    write_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, ckpt.manifest(), arrays)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    try:
        mc = dict(header["model_config"])
        model_config = ModelConfig(**mc)
        train_config = TrainConfig.from_dict(header["train_config"])
        paths = header["param_paths"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeError(f"checkpoint manifest invalid: {exc}") from exc
    params = ad.ParamStore()
    adam = AdamState(t=int(header["adam_t"]))
    for k in paths:
        for prefix in ("param", "adam_m", "adam_v"):
            if f"{prefix}:{k}" not in arrays:
                raise ShapeError(f"checkpoint is missing {prefix}:{k}")
        params.add(k, arrays[f"param:{k}"])
        adam.m[k] = arrays[f"adam_m:{k}"].copy()
        adam.v[k] = arrays[f"adam_v:{k}"].copy()
    expected = init_params(model_config, 0)
    for k in expected.paths():
        if k not in params or params[k].shape != expected[k].shape:
            raise ShapeError(f"checkpoint parameter {k} missing or mis-shaped")
    return Checkpoint(model_config, train_config, params, adam, int(header["epoch"]),
                      header["rng_state"], list(header["history"]))


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    """Raised when the loss or a gradient stops being finite.

    ``checkpoint`` holds the state at the end of the last completed epoch.
    """

    def __init__(self, message: str, checkpoint: Checkpoint):
        super().__init__(message)
        self.checkpoint = checkpoint


def model_config_for(config: TrainConfig, dataset: EpisodeDataset) -> ModelConfig:
    return config_for_dataset(dataset, d=config.d, g=config.g, embed_dim=config.embed_dim,
                              variant=config.variant)


def init_checkpoint(config: TrainConfig, dataset: EpisodeDataset) -> Checkpoint:
    mc = model_config_for(config, dataset)
    params = init_params(mc, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    return Checkpoint(mc, config, params, AdamState.zeros_like(params), 0,
                      rng.bit_generator.state, [])


def train(config: TrainConfig, dataset: EpisodeDataset, resume: Checkpoint | None = None,
          callback=None):
    """Train for ``config.epochs`` total epochs. Returns ``(checkpoint, history)``.

    Everything random (init, shuffling) derives from ``config.seed``, so a rerun
    with the same config and dataset reproduces the history bit for bit.
    """
    if config.task is not None and config.task != dataset.task:
        raise ValueError(f"config task {config.task!r} does not match dataset task {dataset.task!r}")
    if len(dataset) == 0 and config.epochs > 0:
        raise ValueError("cannot train on an empty dataset")
    ckpt = init_checkpoint(config, dataset) if resume is None else resume.copy()
    if resume is not None and ckpt.model_config != model_config_for(config, dataset):
        raise ValueError("resume checkpoint was built for a different model config")
    ckpt.train_config = config
    forward = build_model_variant(ckpt.model_config)
    size = config.effective_batch_size(dataset.task)
    clip = CLIP_NORM if config.clip else None
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    last_good = ckpt.copy()

    while ckpt.epoch < config.epochs:
        order = rng.permutation(len(dataset))
        loss_sum = 0.0
        try:
            for idx in _batches(len(dataset), size, order):
                batch = Batch.from_dataset(dataset, idx)
                ckpt.params.zero_grad()
                out = forward(ckpt.params, batch, batch.targets)
                loss = out.loss.item()
                if not math.isfinite(loss):
                    raise ad.NonFiniteError(f"loss became {loss}")
                out.loss.backward()
                adam_step(ckpt.params, ckpt.params.grads(), ckpt.adam, config.lr, clip_norm=clip)
                loss_sum += loss * len(idx)
        except (ad.NonFiniteError, FloatingPointError) as exc:
            raise TrainingDiverged(f"epoch {ckpt.epoch + 1}: {exc}", last_good) from exc
        ckpt.epoch += 1
        ckpt.rng_state = rng.bit_generator.state
        metrics = evaluate(forward, ckpt.params, dataset)
        metrics["epoch"] = ckpt.epoch
        metrics["train_loss"] = loss_sum / len(dataset)
        ckpt.history.append(metrics)
        last_good = ckpt.copy()
        if callback is not None:
            callback(metrics)
    ckpt.params.zero_grad()
    return ckpt, list(ckpt.history)
