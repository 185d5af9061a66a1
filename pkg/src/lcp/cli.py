"""Command-line entry point: ``lcp gen-data | train | prune | eval | report-gradients``.

Settings resolve as built-in defaults, then a flat ``key = value`` config
file (``--config``), then command-line flags.  Every run first prints the
fully resolved settings in that same file format, so the echo can be fed
back through ``--config`` to reproduce the run.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Optional

from . import data as D
from .detector import NumericalError, build_model, load_checkpoint, save_checkpoint, step_schedule, train
from .metrics import evaluate
from .pruning import GradientLedger, PruneConfig, prune_model

log = logging.getLogger("lcp")

COMMON = {"seed": (int, 0), "threads": (int, None), "out": (str, None)}

SCHEMA: dict[str, dict[str, tuple[type, Any]]] = {
    "gen-data": {**COMMON, "count": (int, 500), "split": (str, "train")},
    "train": {
        **COMMON,
        "data": (str, None),
        "eval_data": (str, None),
        "epochs": (int, 20),
        "lr": (float, 0.01),
        "m": (float, 1.0),
        "batch_size": (int, 16),
    },
    "prune": {
        **COMMON,
        "model": (str, None),
        "data": (str, None),
        "eta": (float, 0.5),
        "alpha": (float, 1.0),
        "m": (float, 50.0),
        "gamma": (float, 1e-6),
        "aux_warmup_epochs": (int, 20),
        "aux_lr": (float, 1e-3),
        "epochs_per_layer": (int, 10),
        "finetune_lr": (float, 1e-3),
        "final_epochs": (int, 3),
        "final_lr": (float, 1e-3),
        "detector_m": (float, 1.0),
        "match_threshold": (float, 0.5),
        "scoring_batches": (int, 8),
        "batch_size": (int, 16),
    },
    "eval": {**COMMON, "model": (str, None), "data": (str, None), "metric": (str, "voc07"), "table": (bool, False)},
    "report-gradients": {**COMMON, "ledger": (str, None)},
}

REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "prune": ("model", "data", "out"),
    "eval": ("model", "data"),
    "report-gradients": ("ledger",),
}


class UsageError(Exception):
    pass


def _convert(kind: type, raw: str, key: str):
    if raw.lower() in ("none", ""):
        return None
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def read_config_file(path: str, command: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, dashes in keys are allowed."""
    schema = SCHEMA[command]
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in schema:
            raise UsageError(f"{path}:{n}: unknown key {key!r} for {command}")
        out[key] = _convert(schema[key][0], value, key)
    return out


def resolve(command: str, flags: dict, config_path: Optional[str]) -> dict:
    schema = SCHEMA[command]
    resolved = {k: default for k, (_, default) in schema.items()}
    if config_path:
        resolved.update(read_config_file(config_path, command))
    resolved.update({k: v for k, v in flags.items() if v is not None and k in schema})
    missing = [k for k in REQUIRED[command] if resolved.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required setting(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return resolved


def format_config(command: str, cfg: dict) -> str:
    lines = [f"# lcp {command}"]
    lines += [f"{k} = {'none' if v is None else v}" for k, v in sorted(cfg.items())]
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcp", description="Localization-aware channel pruning for a toy detector.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="cap on BLAS worker threads")
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--out")

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--split")

    p = sub.add_parser("train", help="train the detector from scratch")
    common(p)
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--m", type=float, help="GIoU regression weight")
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("prune", help="prune a trained checkpoint layer by layer")
    common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--eta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--baseline", action="store_true", help="reconstruction-only selection (alias for --alpha 0)")
    p.add_argument("--m", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--aux-warmup-epochs", type=int, help="epochs training the aux head alone before each layer")
    p.add_argument("--aux-lr", type=float)
    p.add_argument("--epochs-per-layer", type=int)
    p.add_argument("--finetune-lr", type=float)
    p.add_argument("--final-epochs", type=int)
    p.add_argument("--final-lr", type=float)
    p.add_argument("--detector-m", type=float)
    p.add_argument("--match-threshold", type=float)
    p.add_argument("--scoring-batches", type=int)
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--metric", choices=("voc07", "continuous"))
    p.add_argument("--table", action="store_true", default=None)

    p = sub.add_parser("report-gradients", help="render a gradient ledger as a percentage table")
    common(p)
    p.add_argument("--ledger", help="ledger.json or a prune output directory")
    return parser


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _dump_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def cmd_gen_data(cfg: dict) -> int:
    manifest = D.DatasetManifest(seed=cfg["seed"], count=cfg["count"], split=cfg["split"])
    if manifest.count < 1:
        raise UsageError("--count must be >= 1")
    out = D.generate(manifest, cfg["out"])
    print(f"wrote {manifest.count} samples to {out}")
    return 0


def cmd_train(cfg: dict) -> int:
    samples = D.load(_require_file(cfg["data"], "dataset"))
    eval_set = D.load(_require_file(cfg["eval_data"], "eval dataset")) if cfg["eval_data"] else None
    model = build_model(cfg["seed"])
    epochs = cfg["epochs"]
    report = train(
        model,
        samples,
        epochs,
        step_schedule(cfg["lr"], epochs, (0.7,)),
        batch_size=cfg["batch_size"],
        m=cfg["m"],
        seed=cfg["seed"],
        eval_set=eval_set,
    )
    save_checkpoint(model, cfg["out"])
    print(_dump_line({"type": "train", "epoch_losses": report.epoch_losses, "final_map": report.final_map}))
    return 0


def cmd_prune(cfg: dict) -> int:
    model = load_checkpoint(_require_file(cfg["model"], "checkpoint"))
    samples = D.load(_require_file(cfg["data"], "dataset"))
    config = PruneConfig(
        eta=cfg["eta"],
        alpha=cfg["alpha"],
        m=cfg["m"],
        gamma=cfg["gamma"],
        aux_warmup_epochs=cfg["aux_warmup_epochs"],
        aux_lr=cfg["aux_lr"],
        finetune_epochs_per_layer=cfg["epochs_per_layer"],
        finetune_lr=cfg["finetune_lr"],
        final_finetune_epochs=cfg["final_epochs"],
        final_lr=cfg["final_lr"],
        detector_m=cfg["detector_m"],
        match_threshold=cfg["match_threshold"],
        scoring_batches=cfg["scoring_batches"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config("prune", cfg))
    original = model.copy()
    result = prune_model(model, original, samples, config, checkpoint_dir=out / "stages")
    save_checkpoint(result.model, out / "pruned.lcpm")
    header = {
        "type": "header",
        "command": "prune",
        "mode": "baseline (reconstruction only)" if config.baseline else "localization-aware",
        "config": cfg,
    }
    lines = [_dump_line(header)] + [_dump_line(r.to_record()) for r in result.reports]
    (out / "report.jsonl").write_text("\n".join(lines) + "\n")
    (out / "ledger.json").write_text(result.ledger.to_json() + "\n")
    for line in lines:
        print(line)
    return 0


def cmd_eval(cfg: dict) -> int:
    model = load_checkpoint(_require_file(cfg["model"], "checkpoint"))
    samples = D.load(_require_file(cfg["data"], "dataset"))
    result = evaluate(model, samples, cfg["metric"])
    print(result.to_json())
    if cfg["table"]:
        print(result.table())
    if cfg["out"]:
        Path(cfg["out"]).write_text(result.to_json() + "\n")
    return 0


def cmd_report_gradients(cfg: dict) -> int:
    path = _require_file(cfg["ledger"], "ledger")
    if path.is_dir():
        path = _require_file(str(path / "ledger.json"), "ledger")
    ledger = GradientLedger.from_json(path.read_text())
    table = ledger.table()
    print(table)
    if cfg["out"]:
        Path(cfg["out"]).write_text(table + "\n")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "report-gradients": cmd_report_gradients,
}


def _thread_limit(n: Optional[int]):
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose", "baseline")}
    if getattr(args, "baseline", False):
        flags["alpha"] = 0.0
    try:
        cfg = resolve(args.command, flags, args.config)
        print(format_config(args.command, cfg), end="")
        with _thread_limit(cfg["threads"]):
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lcp: error: {exc}", file=sys.stderr)
        return 2
    except D.FormatError as exc:
        print(f"lcp: format error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"lcp: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"lcp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
