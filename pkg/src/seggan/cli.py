"""Command-line harness: train, evaluate, compare, gradcheck, synth.

Configuration comes from flags plus an optional key=value file (flags win);
unknown file keys are rejected.  Every output artifact embeds the resolved
config and seed, and contains no timestamps, so re-running a command with the
same inputs reproduces identical CSVs byte for byte.

Exit codes: 0 success, 1 usage error, 2 runtime/training failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .checkpoint import gan_info, generator_info, load_checkpoint, save_checkpoint, write_manifest
from .data import (
    generate_synthetic,
    load_dataset,
    load_manifest,
    make_synthetic_dataset,
    save_manifest,
    write_pgm,
)
from .gradcheck import run_checks
from .metrics import evaluate_and_rank, predict_mask
from .models import DISCRIMINATOR_DESIGNS, GENERATOR_TOPOLOGIES, GeneratorSpec, build_combined, build_generator
from .training import TrainConfig, TrainingAbort, train_adversarial, train_supervised, write_loss_csv

__all__ = ["main"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _to_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in _BOOL_TRUE:
        return True
    if low in _BOOL_FALSE:
        return False
    raise UsageError(f"expected a boolean, got {raw!r}")


# (type, default) per key, per command; None default means "must be provided"
_SCHEMAS: dict[str, dict[str, tuple]] = {
    "train": {
        "arch": (str, None),
        "disc": (str, ""),
        "data": (str, None),
        "out": (str, None),
        "size": (int, 64),
        "base_channels": (int, 8),
        "upsample": (str, "tconv"),
        "epochs": (int, 30),
        "batch_size": (int, 2),
        "learning_rate": (float, 1e-4),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "epsilon": (float, 1e-8),
        "dropout": (float, 0.5),
        "lambda_adv": (float, 0.1),
        "d_steps": (int, 1),
        "seed": (int, 0),
        "shuffle": (bool, True),
        "train_count": (int, 24),
        "test_count": (int, 5),
        "figures": (bool, True),
    },
    "evaluate": {
        "data": (str, ""),
        "out": (str, None),
        "size": (int, 0),
        "split": (str, "test"),
        "best_k": (int, 0),
        "baseline": (str, ""),
        "seed": (int, -1),
        "train_count": (int, -1),
        "test_count": (int, -1),
        "dump_predictions": (bool, False),
        "png": (bool, False),
        "figures": (bool, True),
    },
    "compare": {
        "data": (str, ""),
        "out": (str, None),
        "size": (int, 0),
        "split": (str, "test"),
        "best_k": (int, 0),
        "baseline": (str, ""),
        "seed": (int, -1),
        "train_count": (int, -1),
        "test_count": (int, -1),
        "figures": (bool, True),
    },
    "gradcheck": {
        "select": (str, ""),
        "out": (str, ""),
    },
    "synth": {
        "style": (str, "blobs"),
        "size": (int, 64),
        "train_count": (int, 24),
        "test_count": (int, 5),
        "seed": (int, 0),
        "out": (str, None),
    },
}


def _read_config_file(path: str, schema: dict) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, _, raw_value = line.partition("=")
            key = key.strip().replace("-", "_")
            raw_value = raw_value.strip()
            if key not in schema:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            typ = schema[key][0]
            try:
                values[key] = _to_bool(raw_value) if typ is bool else typ(raw_value)
            except (ValueError, UsageError) as err:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {err}") from err
    return values


def _resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicit flags, rejecting unset required keys."""
    schema = _SCHEMAS[command]
    cfg = {key: default for key, (_, default) in schema.items()}
    if getattr(args, "config", None):
        cfg.update(_read_config_file(args.config, schema))
    for key in schema:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    missing = [k for k, v in cfg.items() if v is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")
    return cfg


def _echo_lines(command: str, cfg: dict) -> list[str]:
    lines = [f"seggan {__version__} {command}"]
    lines.extend(f"{k}={cfg[k]}" for k in sorted(cfg))
    return lines


# ---------------------------------------------------------------------------
# Dataset resolution
# ---------------------------------------------------------------------------


def _resolve_dataset(cfg: dict, split: str):
    """Samples for 'synthetic:<style>' presets or a manifest path."""
    data = cfg["data"]
    if data.startswith("synthetic:"):
        style = data.split(":", 1)[1]
        train, test = make_synthetic_dataset(
            style, cfg["train_count"], cfg["test_count"], cfg["size"], cfg["seed"]
        )
        return train if split == "train" else test
    manifest = load_manifest(data)
    return load_dataset(manifest, cfg["size"], split)


def _dataset_fields(cfg: dict) -> dict:
    return {
        "data": cfg["data"],
        "size": cfg["size"],
        "seed": cfg["seed"],
        "train_count": cfg.get("train_count", 0),
        "test_count": cfg.get("test_count", 0),
    }


def _dataset_descriptor(fields: dict) -> str:
    return (
        f"{fields['data']}?size={fields['size']}&seed={fields['seed']}"
        f"&train={fields['train_count']}&test={fields['test_count']}"
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve_config("train", args)
    if cfg["arch"] not in GENERATOR_TOPOLOGIES:
        raise UsageError(f"unknown arch {cfg['arch']!r}; valid: {', '.join(GENERATOR_TOPOLOGIES)}")
    if cfg["disc"] and cfg["disc"] not in DISCRIMINATOR_DESIGNS:
        raise UsageError(f"unknown disc {cfg['disc']!r}; valid: {', '.join(DISCRIMINATOR_DESIGNS)}")
    os.makedirs(cfg["out"], exist_ok=True)

    dataset = _resolve_dataset(cfg, "train")
    train_cfg = TrainConfig(
        learning_rate=cfg["learning_rate"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        epsilon=cfg["epsilon"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        dropout=cfg["dropout"],
        lambda_adv=cfg["lambda_adv"],
        d_steps_per_epoch=cfg["d_steps"],
        seed=cfg["seed"],
        shuffle=cfg["shuffle"],
    )
    spec = GeneratorSpec(
        topology=cfg["arch"], base_channels=cfg["base_channels"], upsample=cfg["upsample"]
    )
    extra = {f"config.{k}": str(v) for k, v in sorted(cfg.items())}
    extra["dataset"] = _dataset_descriptor(_dataset_fields(cfg))
    hw = dataset[0].image.shape[1:]
    if cfg["disc"]:
        model = build_combined(spec, cfg["disc"], hw, cfg["seed"], cfg["dropout"])
        info = gan_info(spec, cfg["disc"], hw, cfg["dropout"], cfg["seed"], extra)
        run = lambda: train_adversarial(model, dataset, train_cfg)
    else:
        model = build_generator(spec, cfg["seed"])
        info = generator_info(spec, cfg["seed"], extra)
        run = lambda: train_supervised(model, dataset, train_cfg)

    echo = _echo_lines("train", cfg)
    try:
        records, model = run()
    except TrainingAbort as abort:
        # emit the last good state so the run is not a total loss
        model.load_param_values(dict(abort.last_good_params))
        save_checkpoint(os.path.join(cfg["out"], "checkpoint.bin"), model, info)
        write_manifest(os.path.join(cfg["out"], "checkpoint.txt"), info, abort.records)
        write_loss_csv(os.path.join(cfg["out"], "loss.csv"), abort.records, echo)
        print(f"error: {abort} (last good checkpoint written to {cfg['out']})", file=sys.stderr)
        return 2
    save_checkpoint(os.path.join(cfg["out"], "checkpoint.bin"), model, info)
    write_manifest(os.path.join(cfg["out"], "checkpoint.txt"), info, records)
    write_loss_csv(os.path.join(cfg["out"], "loss.csv"), records, echo)
    if cfg["figures"]:
        from .figures import loss_curve

        loss_curve(records, os.path.join(cfg["out"], "loss_curve.png"))
    print(f"trained {info['tag']} for {len(records)} epochs; final loss {records[-1].gen_loss:.6f}")
    return 0


def _load_models(paths):
    named = []
    infos = []
    seen = {}
    for path in paths:
        model, info = load_checkpoint(path)
        tag = info.get("tag", os.path.basename(path))
        seen[tag] = seen.get(tag, 0) + 1
        if seen[tag] > 1:
            tag = f"{tag}#{seen[tag]}"
        named.append((tag, model))
        infos.append(info)
    return named, infos


def _eval_cfg_from_checkpoint(cfg: dict, info: dict) -> dict:
    """Fill dataset fields not given on the command line from the checkpoint echo."""
    extra = info.get("extra", {})
    out = dict(cfg)
    if not out["data"]:
        out["data"] = extra.get("dataset", "").split("?", 1)[0]
    if out["size"] <= 0:
        out["size"] = int(extra.get("config.size", 0)) or 64
    if out["seed"] < 0:
        out["seed"] = int(extra.get("config.seed", 0))
    if out["train_count"] < 0:
        out["train_count"] = int(extra.get("config.train_count", 24))
    if out["test_count"] < 0:
        out["test_count"] = int(extra.get("config.test_count", 5))
    if not out["data"]:
        raise UsageError("--data not given and the checkpoint does not record a dataset")
    return out


def _run_evaluation(command: str, args) -> int:
    cfg = _resolve_config(command, args)
    paths = args.checkpoint or []
    if command == "compare" and len(paths) < 2:
        raise UsageError("compare needs at least 2 --checkpoint arguments")
    if not paths:
        raise UsageError("at least one --checkpoint is required")
    named, infos = _load_models(paths)
    if command == "compare":
        descriptors = {i.get("extra", {}).get("dataset", "") for i in infos}
        if len(descriptors) > 1:
            raise RuntimeError(f"checkpoints were trained on different datasets: {sorted(descriptors)}")
    cfg = _eval_cfg_from_checkpoint(cfg, infos[0])
    samples = _resolve_dataset(cfg, cfg["split"])
    best_k = cfg["best_k"] or min(10, len(samples))
    if not (1 <= best_k <= len(samples)):
        raise UsageError(f"--best-k must be in [1, {len(samples)}]")
    tags = [t for t, _ in named]
    baseline = cfg["baseline"] or ("unet" if "unet" in tags else tags[0])
    if baseline not in tags:
        raise UsageError(f"baseline {baseline!r} not among models {tags}")
    os.makedirs(cfg["out"], exist_ok=True)
    echo = _echo_lines(command, cfg) + [f"checkpoints={','.join(paths)}"]

    report = evaluate_and_rank(named, samples, best_k, baseline)
    report.to_csv(os.path.join(cfg["out"], "metrics.csv"), echo)

    if command == "compare":
        lines = [f"# {line}" for line in echo]
        lines.append("model,pa,delta_pa,miou,delta_miou")
        for s in report.summaries:
            lines.append(f"{s.model},{s.mean_pa:.4f},{s.delta_pa:.4f},{s.miou:.4f},{s.delta_miou:.4f}")
        with open(os.path.join(cfg["out"], "comparison.csv"), "w") as fh:
            fh.write("\n".join(lines) + "\n")

    if cfg.get("dump_predictions"):
        pred_dir = os.path.join(cfg["out"], "predictions")
        os.makedirs(pred_dir, exist_ok=True)
        for tag, model in named:
            for s in samples:
                mask = predict_mask(model, s)
                stem = os.path.join(pred_dir, f"{tag}_{s.source_id}")
                write_pgm(stem + ".pgm", mask[0] * 255, comments=echo)
                if cfg.get("png"):
                    _write_png(stem + ".png", mask[0] * 255)
                if cfg["figures"]:
                    from .figures import prediction_panel

                    prediction_panel(s, mask, stem + "_panel.png")
    if cfg["figures"]:
        from .figures import comparison_chart

        comparison_chart(report.summaries, baseline, os.path.join(cfg["out"], "comparison.png"))
    for s in report.summaries:
        print(
            f"{s.model}: PA={s.mean_pa:.4f} (d{s.delta_pa:+.4f})  "
            f"mIoU={s.miou:.4f} (d{s.delta_miou:+.4f})  best-{best_k} mIoU={s.bestk_miou:.4f}"
        )
    return 0


def _write_png(path, gray):
    try:
        from PIL import Image
    except ImportError as err:  # pragma: no cover
        raise RuntimeError("PNG output needs Pillow (install the 'png' extra)") from err
    Image.fromarray(np.asarray(gray, dtype=np.uint8), mode="L").save(path)


def cmd_gradcheck(args) -> int:
    cfg = _resolve_config("gradcheck", args)
    results = run_checks(select=cfg["select"] or None)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    failures = [r for r in results if not r.passed]
    summary = f"{len(results) - len(failures)}/{len(results)} checks passed"
    print(summary)
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            fh.write("\n".join(lines + [summary]) + "\n")
    return 2 if failures else 0


def cmd_synth(args) -> int:
    cfg = _resolve_config("synth", args)
    os.makedirs(cfg["out"], exist_ok=True)
    count = cfg["train_count"] + cfg["test_count"]
    samples = generate_synthetic(count, cfg["size"], cfg["seed"], cfg["style"])
    echo = _echo_lines("synth", cfg)
    entries = []
    for i, s in enumerate(samples):
        split = "train" if i < cfg["train_count"] else "test"
        img_name = f"{s.source_id}.pgm"
        mask_name = f"{s.source_id}_mask.pgm"
        write_pgm(os.path.join(cfg["out"], img_name), np.round(s.image.data[0] * 255), comments=echo)
        write_pgm(os.path.join(cfg["out"], mask_name), s.mask.data[0] * 255, comments=echo)
        entries.append((img_name, mask_name, split))
    save_manifest(os.path.join(cfg["out"], "manifest.txt"), entries, comments=echo)
    print(f"wrote {count} samples ({cfg['train_count']} train / {cfg['test_count']} test) to {cfg['out']}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors must exit 1, not argparse's 2
        raise UsageError(message)


def _add_common(p):
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seggan", description=__doc__)
    parser.add_argument("--version", action="version", version=f"seggan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one generator, optionally adversarially")
    _add_common(p)
    p.add_argument("--arch", choices=GENERATOR_TOPOLOGIES, help="generator topology")
    p.add_argument("--disc", choices=DISCRIMINATOR_DESIGNS, help="discriminator design (enables the adversarial loop)")
    p.add_argument("--data", help="'synthetic:blobs', 'synthetic:cells', or a manifest path")
    p.add_argument("--size", type=int, help="image side length (divisible by 16)")
    p.add_argument("--base-channels", dest="base_channels", type=int)
    p.add_argument("--upsample", choices=("tconv", "nearest"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lambda-adv", dest="lambda_adv", type=float)
    p.add_argument("--d-steps", dest="d_steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--shuffle", action=argparse.BooleanOptionalAction)
    p.add_argument("--train-count", dest="train_count", type=int)
    p.add_argument("--test-count", dest="test_count", type=int)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction)
    p.set_defaults(func=cmd_train)

    for name, helptext in (
        ("evaluate", "metrics for one or more checkpoints"),
        ("compare", "side-by-side table for >= 2 checkpoints"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable)")
        p.add_argument("--data", help="dataset; defaults to the checkpoint's training dataset")
        p.add_argument("--size", type=int)
        p.add_argument("--split", choices=("train", "test"))
        p.add_argument("--best-k", dest="best_k", type=int)
        p.add_argument("--baseline", help="baseline model tag for delta columns")
        p.add_argument("--seed", type=int)
        p.add_argument("--train-count", dest="train_count", type=int)
        p.add_argument("--test-count", dest="test_count", type=int)
        if name == "evaluate":
            p.add_argument("--dump-predictions", dest="dump_predictions", action=argparse.BooleanOptionalAction)
            p.add_argument("--png", action=argparse.BooleanOptionalAction)
        p.add_argument("--figures", action=argparse.BooleanOptionalAction)
        p.set_defaults(func=lambda a, name=name: _run_evaluation(name, a))

    p = sub.add_parser("gradcheck", help="finite-difference oracle over all ops and architectures")
    _add_common(p)
    p.add_argument("--select", help="substring filter on check names")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write a synthetic dataset with manifest")
    _add_common(p)
    p.add_argument("--style", choices=("blobs", "cells"))
    p.add_argument("--size", type=int)
    p.add_argument("--train-count", dest="train_count", type=int)
    p.add_argument("--test-count", dest="test_count", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:  # pragma: no cover
        return 2
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
