"""Command-line harness: gen, train, eval, ablate, dump-attention, gradcheck.

Relative output paths land under ``$MASN_OUTPUT_ROOT`` (default ``./masn_runs``).
Every invocation writes one new manifest file under ``<root>/manifests``.
Settings resolve as flags > ``--config`` JSON > built-in defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import GeneratorConfig, generate_dataset, load_episodes, write_episodes
from .io import ContainerError, atomic_write_text
from .model import ABLATION_VARIANTS, VARIANTS, Batch, ModelConfig, build_model_variant, init_params
from .training import (TrainConfig, TrainingDiverged, evaluate, load_checkpoint,
                       save_checkpoint, train)

OUTPUT_ROOT_ENV = "MASN_OUTPUT_ROOT"
GRADCHECK_TOL = 1e-4

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_MISSING = 3
EXIT_MISMATCH = 4
EXIT_DIVERGED = 5


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "masn_runs"))


def resolve_out(path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else output_root() / path


def resolve_in(path) -> Path:
    """Inputs are looked up as given first, then under the output root."""
    path = Path(path)
    if path.exists() or path.is_absolute():
        return path
    return output_root() / path


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_manifest(command: str, config: dict, seed, outputs: list, metrics, started: float) -> Path:
    """Write a fresh manifest; existing manifests are never touched."""
    mdir = output_root() / "manifests"
    mdir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime(started))
    manifest = {
        "command": command,
        "config": config,
        "config_hash": digest,
        "seed": seed,
        "started": started,
        "finished": time.time(),
        "outputs": [str(p) for p in outputs],
        "metrics": metrics,
    }
    n = 0
    while True:
        path = mdir / f"{stamp}-{command}-{digest}-{n}.json"
        try:
            with open(path, "x") as fh:
                fh.write(dump_json(manifest))
            return path
        except FileExistsError:
            n += 1


# ---------------------------------------------------------------------------
# config resolution


def _load_json(path) -> dict:
    if path is None:
        return {}
    p = resolve_in(path)
    if not p.exists():
        raise CLIError(f"config file not found: {p}", EXIT_MISSING)
    data = json.loads(p.read_text())
    if not isinstance(data, dict):
        raise CLIError(f"config {p} must be a JSON object", EXIT_MISMATCH)
    return data


def _merge(cls, file_cfg: dict, args, section: str | None = None):
    names = {f.name for f in fields(cls)}
    base = file_cfg.get(section, file_cfg) if section else file_cfg
    merged = {k: v for k, v in base.items() if k in names}
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            merged[name] = value
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid {cls.__name__}: {exc}", EXIT_MISMATCH) from exc


def _load_data(path):
    p = resolve_in(path)
    if not p.exists():
        raise CLIError(f"episode file not found: {p}", EXIT_MISSING)
    try:
        return load_episodes(p)
    except ContainerError as exc:
        raise CLIError(f"{p}: {type(exc).__name__}: {exc}", EXIT_MISMATCH) from exc


def _load_ckpt(path):
    p = resolve_in(path)
    if not p.exists():
        raise CLIError(f"checkpoint not found: {p}", EXIT_MISSING)
    try:
        return load_checkpoint(p)
    except ContainerError as exc:
        raise CLIError(f"{p}: {type(exc).__name__}: {exc}", EXIT_MISMATCH) from exc


def _check_match(mc: ModelConfig, ds) -> None:
    gc = ds.config
    if mc.task != gc.task:
        raise CLIError(f"task mismatch: checkpoint is {mc.task!r}, data is {gc.task!r}",
                       EXIT_MISMATCH)
    if mc.d_in != gc.d_in or gc.vocab > mc.vocab:
        raise CLIError(f"shape mismatch: checkpoint d_in={mc.d_in} vocab={mc.vocab}, "
                       f"data d_in={gc.d_in} vocab={gc.vocab}", EXIT_MISMATCH)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    cfg = _merge(GeneratorConfig, _load_json(args.config), args)
    seed = args.seed if args.seed is not None else 0
    ds = generate_dataset(cfg, args.count, seed)
    out = resolve_out(args.out)
    try:
        write_episodes(out, ds)
    except OSError as exc:
        raise CLIError(f"cannot write {out}: {exc}", EXIT_MISSING) from exc
    print(f"wrote {len(ds)} episodes to {out}")
    return {"generator": cfg.to_dict(), "count": args.count}, seed, [out], {"count": len(ds)}


def _train_config(args):
    return _merge(TrainConfig, _load_json(args.config), args)


def cmd_train(args):
    ds = _load_data(args.data)
    tc = _train_config(args)
    try:
        ckpt, history = train(tc, ds)
    except TrainingDiverged as exc:
        out = resolve_out(args.out)
        save_checkpoint(out, exc.checkpoint)
        raise CLIError(f"training diverged ({exc}); last good checkpoint saved to {out}",
                       EXIT_DIVERGED) from exc
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_MISMATCH) from exc
    out = resolve_out(args.out)
    save_checkpoint(out, ckpt)
    final = history[-1] if history else evaluate(ckpt.forward(), ckpt.params, ds)
    metrics_path = Path(str(out) + ".metrics.json")
    atomic_write_text(metrics_path, dump_json({"final": final, "history": history}))
    print(dump_json(final), end="")
    return {"train": tc.to_dict(), "data": str(args.data)}, tc.seed, [out, metrics_path], final


def cmd_eval(args):
    ckpt = _load_ckpt(args.checkpoint)
    ds = _load_data(args.data)
    _check_match(ckpt.model_config, ds)
    metrics = evaluate(ckpt.forward(), ckpt.params, ds)
    outputs = []
    if args.out:
        out = resolve_out(args.out)
        atomic_write_text(out, dump_json(metrics))
        outputs.append(out)
    print(dump_json(metrics), end="")
    return ({"checkpoint": str(args.checkpoint), "data": str(args.data)},
            ckpt.train_config.seed, outputs, metrics)


def ablation_table(rows: list) -> str:
    cols = ("variant", "accuracy", "mse", "loss")
    cells = [cols] + [tuple(_fmt(r[c]) for c in cols) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip()
                     for row in cells) + "\n"


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def run_ablation(tc: TrainConfig, ds, variants, eval_ds=None) -> dict:
    """Train every variant with the same config and seed; one row per variant."""
    eval_ds = ds if eval_ds is None else eval_ds
    rows = []
    for v in variants:
        cfg = TrainConfig(**{**tc.to_dict(), "variant": v})
        ckpt, _ = train(cfg, ds)
        m = evaluate(ckpt.forward(), ckpt.params, eval_ds)
        rows.append({"variant": v, "seed": cfg.seed, **m})
    metric = "mse" if ds.task == "count" else "accuracy"
    report = {"task": ds.task, "metric": metric, "rows": rows, "trend": None}
    by = {r["variant"]: r[metric] for r in rows}
    singles = [v for v in ("single-a", "single-m", "single-all") if v in by]
    if "triple" in by and singles:
        best = (min if metric == "mse" else max)(by[v] for v in singles)
        better = by["triple"] <= best if metric == "mse" else by["triple"] >= best
        report["trend"] = {"triple": by["triple"], "best_single": best,
                           "triple_at_least_best_single": bool(better)}
    return report


def cmd_ablate(args):
    ds = _load_data(args.data)
    eval_ds = _load_data(args.eval_data) if args.eval_data else None
    tc = _train_config(args)
    variants = args.variants.split(",") if args.variants else list(ABLATION_VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise CLIError(f"unknown variants {bad}; choose from {VARIANTS}", EXIT_MISMATCH)
    report = run_ablation(tc, ds, variants, eval_ds)
    table = ablation_table(report["rows"])
    out = resolve_out(args.out)
    atomic_write_text(out, dump_json(report))
    text_path = out.with_suffix(".txt")
    atomic_write_text(text_path, table)
    print(table, end="")
    return ({"train": tc.to_dict(), "variants": variants, "data": str(args.data)},
            tc.seed, [out, text_path], report["trend"])


def attention_dump(ckpt, ds, index: int, log_scale: bool = False) -> dict:
    if not 0 <= index < len(ds):
        raise CLIError(f"episode index {index} outside [0, {len(ds)})", EXIT_MISMATCH)
    _check_match(ckpt.model_config, ds)
    batch = Batch.from_dataset(ds, [index])
    with ad.no_grad():
        out = ckpt.forward()(ckpt.params, batch)

    def arr(t):
        # drop the batch axis of size one; multiple choice keeps its candidate axis
        return np.squeeze(t.data, axis=0) if t.shape[0] == 1 else t.data

    dump = {
        "episode": index,
        "task": ds.task,
        "variant": ckpt.model_config.variant,
        "maps": {s: [arr(m).tolist() for m in st.cross.maps] for s, st in out.streams.items()},
        "fusion_scores": None,
        "branches": None,
        "alpha": None,
        "beta": arr(out.beta).tolist(),
    }
    if out.fusion is not None:
        dump["branches"] = list(out.fusion.branches)
        dump["fusion_scores"] = {b: arr(w).tolist() for b, w in out.fusion.scores.items()}
        dump["alpha"] = arr(out.fusion.alpha).tolist()
    if log_scale:
        dump["log"] = {
            "maps": {s: [np.log(arr(m)).tolist() for m in st.cross.maps]
                     for s, st in out.streams.items()},
            "beta": np.log(arr(out.beta)).tolist(),
        }
    return dump


def cmd_dump_attention(args):
    ckpt = _load_ckpt(args.checkpoint)
    ds = _load_data(args.data)
    dump = attention_dump(ckpt, ds, args.index, args.log)
    out = resolve_out(args.out)
    atomic_write_text(out, json.dumps(dump) + "\n")
    print(f"wrote attention dump to {out}")
    return ({"checkpoint": str(args.checkpoint), "data": str(args.data), "index": args.index},
            ckpt.train_config.seed, [out], None)


def gradcheck_setup(task="open_ended", d=8, T=2, N=2, L=3, g=2, seed=0, variant="triple"):
    """Tiny model and one-episode batch for finite-difference checking."""
    gc = GeneratorConfig(T=T, N=N, d_in=6, vocab=12, task=task, question_length=L,
                         n_families=1, max_count=min(2, T * N), n_answers=3, n_candidates=3)
    ds = generate_dataset(gc, 1, seed)
    mc = ModelConfig(d_in=gc.d_in, vocab=gc.vocab, task=task, d=d, embed_dim=d, g=g,
                     n_classes=gc.n_classes if task == "open_ended" else 0,
                     count_range=gc.count_range, variant=variant)
    params = init_params(mc, seed)
    forward = build_model_variant(mc)
    batch = Batch.from_dataset(ds)
    return params, lambda ps: forward(ps, batch, batch.targets).loss


def cmd_gradcheck(args):
    settings = {"task": "open_ended", "d": 8, "T": 2, "N": 2, "L": 3, "g": 2, "seed": 0,
                "variant": "triple"}
    settings.update({k: v for k, v in _load_json(args.config).items() if k in settings})
    settings.update({k: getattr(args, k) for k in settings if getattr(args, k, None) is not None})
    params, loss_fn = gradcheck_setup(**settings)
    paths = None
    if args.scope:
        paths = [p for p in params.paths() if p.startswith(args.scope.rstrip("/") + "/")]
        if not paths:
            raise CLIError(f"no parameters under {args.scope!r}", EXIT_MISMATCH)
    t0 = time.time()
    report = ad.grad_check(loss_fn, params, eps=args.eps, paths=paths)
    elapsed = time.time() - t0
    print(report.format(GRADCHECK_TOL))
    print(f"max relative error {report.max_error:.3e} over {len(report.errors)} paths "
          f"in {elapsed:.1f}s (tolerance {GRADCHECK_TOL:g})")
    kinks = [k for k, v in report.recheck.items() if v < GRADCHECK_TOL]
    if kinks:
        print("agrees at eps/100 (step crossed a kink): " + ", ".join(kinks))
    metrics = {"max_error": report.max_error, "errors": report.errors,
               "recheck": report.recheck, "seconds": elapsed}
    if args.out:
        out = resolve_out(args.out)
        atomic_write_text(out, dump_json(metrics))
    args._exit = EXIT_OK if report.ok(GRADCHECK_TOL) else EXIT_GRADCHECK
    return settings, settings["seed"], [resolve_out(args.out)] if args.out else [], metrics


# ---------------------------------------------------------------------------
# argument parsing


def _add_train_flags(p):
    p.add_argument("--config", help="JSON file of training settings")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--g", type=int)
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--clip", action="store_const", const=True, default=None,
                   help="clip the global gradient norm at 5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic episode file")
    p.add_argument("--config", help="JSON generator config")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int)
    for f in fields(GeneratorConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = {"int": int, "float": float, "str": str}[f.type if isinstance(f.type, str)
                                                        else f.type.__name__]
        p.add_argument(flag, dest=f.name, type=kind)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on an episode file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate a list of fusion variants")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data")
    p.add_argument("--variants", help=f"comma list (default: {','.join(ABLATION_VARIANTS)})")
    p.add_argument("--out", required=True, help="report JSON path (a .txt table goes alongside)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-attention", help="export attention maps for one episode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log", action="store_true", help="also emit log-scaled copies")
    p.set_defaults(func=cmd_dump_attention)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--config")
    p.add_argument("--task", choices=("count", "open_ended", "multiple_choice"))
    for name in ("d", "T", "N", "L", "g", "seed"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--scope", help="only check parameters under this path prefix")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.time()
    try:
        config, seed, outputs, metrics = args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    write_manifest(args.command, config, seed, outputs, metrics, started)
    return getattr(args, "_exit", EXIT_OK)


if __name__ == "__main__":
    sys.exit(main())
