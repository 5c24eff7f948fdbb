"""Command-line entry point: ``cxr-severity {synth,train,eval,explain,complexity}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as C
from .checkpoint import load_backbone_weights, load_checkpoint, save_checkpoint
from .data.manifest import format_stats, manifest_stats, read_manifest, write_manifest
from .data.pgm import read_pgm
from .data.sampling import split_by_patient
from .data.synthetic import generate_synthetic
from .data.transforms import preprocess
from .errors import ConfigError, CxrError
from .explain import critical_factors, render_overlay
from .model import build_network
from .train import (evaluate, format_confusion, format_metrics, metrics_from_confusion,
                    train, write_history)

log = logging.getLogger("cxr_severity")


def _split_arg(value):
    return None if value == "all" else value


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def cmd_synth(cfg: C.RunConfig) -> None:
    out = Path(cfg["out"])
    manifest, _ = generate_synthetic(cfg["n_images"], cfg["zone_distribution"], cfg["image_size"],
                                     cfg["seed"], out)
    if cfg["test_image_count"] > 0:
        manifest = split_by_patient(manifest, cfg["test_image_count"], cfg["seed"])
        write_manifest(manifest, out / "manifest.csv")
    _write(out / "cohort.txt", format_stats(manifest_stats(manifest)) + "\n")
    _write(out / "run.txt", cfg.dump())
    counts = {s: len(manifest.split(s)) for s in ("train", "test", "unassigned")}
    print(f"wrote {len(manifest)} images to {out} "
          f"(train {counts['train']}, test {counts['test']}, unassigned {counts['unassigned']})")


def cmd_train(cfg: C.RunConfig) -> None:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(cfg["manifest"])
    if not manifest.split("train"):
        manifest = split_by_patient(manifest, cfg["test_image_count"], cfg["seed"])
        write_manifest(manifest, out / "manifest_split.csv")
        manifest.root = Path(cfg["manifest"]).parent
    tc = cfg.train_config
    size = tc.image_size
    graph = build_network(cfg.network(), (1, size, size), tc.seed)
    if cfg["backbone_checkpoint"]:
        graph = load_backbone_weights(graph, cfg["backbone_checkpoint"])
    if tc.freeze_backbone:
        graph.frozen = set(graph.param_names("backbone"))
    graph, history = train(tc, manifest, graph)
    ckpt = Path(cfg["checkpoint"]) if cfg["checkpoint"] else out / "model.cxrs"
    save_checkpoint(graph, ckpt)
    write_history(history, out / "history.csv")
    _write(out / "run.txt", cfg.dump())
    last = history[-1]
    print(f"trained {tc.epochs} epochs: loss {last['mean_loss']:.4f}, "
          f"train accuracy {100 * last['train_accuracy']:.2f}%; checkpoint {ckpt}")


def cmd_eval(cfg: C.RunConfig) -> None:
    out = Path(cfg["out"])
    manifest = read_manifest(cfg["manifest"])
    graph = load_checkpoint(cfg["checkpoint"], cfg.network())
    cm = evaluate(graph, manifest, _split_arg(cfg["eval_split"]))
    text = (format_confusion(cm) + "\n\n" + format_metrics(metrics_from_confusion(cm)) + "\n"
            + f"\nseed = {cfg['seed']}\n")
    _write(out / "metrics.txt", text)
    print(text, end="")


def cmd_explain(cfg: C.RunConfig) -> None:
    out = Path(cfg["out"]) / "explain"
    manifest = read_manifest(cfg["manifest"])
    graph = load_checkpoint(cfg["checkpoint"], cfg.network())
    size = graph.input_dims[-1]
    records = manifest.split(_split_arg(cfg["explain_split"]))[: cfg["explain_limit"]]
    for rec in records:
        raster, maxval = read_pgm(manifest.resolve(rec))
        image = preprocess(raster, size, maxval)
        exp = critical_factors(graph, image, cfg.grid, cfg["delta"], cfg["max_patches"])
        target = out / (Path(rec.image_path).stem + "_overlay.pgm")
        target.parent.mkdir(parents=True, exist_ok=True)
        render_overlay(image, exp, target, seed=cfg["seed"])
        print(f"{rec.image_path}: level {exp.predicted_level}, {int(exp.mask.sum())} patches, "
              f"drop {exp.achieved_drop:.3f}{' (partial)' if exp.partial else ''}")


def complexity_table(graph) -> str:
    rows = graph.layer_table()
    w = max(len(r[0]) for r in rows)
    lines = [f"{'layer':<{w}}  {'kind':<15}  {'output':<16}  {'params':>10}  {'flops':>14}"]
    for name, kind, dims, params, flops in rows:
        lines.append(f"{name:<{w}}  {kind:<15}  {'x'.join(map(str, dims)):<16}  "
                     f"{params:>10}  {flops:>14}")
    total_p, total_f = graph.total_params, graph.total_flops
    lines.append(f"total params {total_p} ({total_p / 1e6:.3f} M)")
    lines.append(f"total flops  {total_f} ({total_f / 1e9:.3f} G)")
    return "\n".join(lines)


def cmd_complexity(cfg: C.RunConfig) -> None:
    size = cfg["image_size"]
    graph = build_network(cfg.network(), (1, size, size), cfg["seed"])
    text = complexity_table(graph)
    _write(Path(cfg["out"]) / "complexity.txt", text + "\n")
    print(text)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "complexity": cmd_complexity,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cxr-severity",
                                description="Airspace severity grading of chest X-rays.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", help="root seed for every random stream")
    p.add_argument("--manifest", help="manifest CSV")
    p.add_argument("--checkpoint", help="checkpoint to read (eval/explain) or write (train)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def overrides_from_args(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for key in ("seed", "manifest", "checkpoint", "out"):
        if getattr(args, key) is not None:
            out[key] = getattr(args, key)
    return out


def _error_line(exc: BaseException, module: str) -> str:
    msg = " ".join(str(exc).split())
    return f"error module={module} type={type(exc).__name__} message={msg}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = C.parse_config(args.command, args.config, overrides_from_args(args))
        C.validate(cfg)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(_error_line(exc, exc.module), file=sys.stderr)
        return 2
    except CxrError as exc:
        print(_error_line(exc, exc.module), file=sys.stderr)
        return 1
    except OSError as exc:
        print(_error_line(exc, "io"), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
