"""Command-line entry point: preprocess, train, eval, ablate, explain.

Exit codes: 0 success, 1 validation or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import backbone as bb
from . import datapipe, explain, trainer
from .attention import ConfigError

log = logging.getLogger("drattn")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
_TUPLE_FIELDS = ("widths", "downsample")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- configuration -------------------------------------------------------

@dataclass
class RunConfig:
    """Resolved training configuration with the origin of every field."""

    train: trainer.TrainConfig
    provenance: dict = field(default_factory=dict)

    def dumps(self) -> str:
        return json.dumps(self.train.to_dict(), indent=2, sort_keys=True) + "\n"


def _coerce(name: str, value):
    kind = {f.name: f.type for f in fields(trainer.TrainConfig)}[name]
    if name in _TUPLE_FIELDS:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return tuple(int(v) for v in value)
    if kind == "bool":
        if isinstance(value, str):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{name}: expected a boolean, got {value!r}")
            return value.lower() in ("true", "1", "yes")
        return bool(value)
    if kind == "int":
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if kind == "float":
        return float(value)
    return str(value)


def read_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object of TrainConfig fields")
    return data


def resolve_config(flags: dict | None = None, file=None) -> RunConfig:
    """Merge defaults < config file < flags; unknown keys are rejected."""
    known = trainer.TrainConfig.field_names()
    values = trainer.TrainConfig().to_dict()
    provenance = dict.fromkeys(values, "default")
    for source, layer in (("file", read_config_file(file) if file else {}), ("flag", flags or {})):
        unknown = sorted(set(layer) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in layer.items():
            try:
                values[key] = _coerce(key, value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from None
            provenance[key] = source
    return RunConfig(trainer.TrainConfig(**values), provenance)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(trainer.TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in _TUPLE_FIELDS:
            p.add_argument(flag, dest=f.name, default=argparse.SUPPRESS, metavar="A,B,...",
                           help=f"comma-separated {f.name}")
        else:
            p.add_argument(flag, dest=f.name, default=argparse.SUPPRESS, help=f"TrainConfig.{f.name}")


def _flag_overrides(args) -> dict:
    names = trainer.TrainConfig.field_names()
    return {k: v for k, v in vars(args).items() if k in names}


def _require(args, *names) -> None:
    for name in names:
        if getattr(args, name, None) in (None, ""):
            raise UsageError(f"missing required flag --{name.replace('_', '-')}")


# --- subcommands ---------------------------------------------------------

def cmd_preprocess(args) -> int:
    _require(args, "input_dir", "out_manifest")
    try:
        fractions = tuple(float(v) for v in args.split.split(","))
    except ValueError:
        raise UsageError(f"--split expects three comma-separated fractions, got {args.split!r}") from None
    out_manifest = Path(args.out_manifest)
    out_dir = Path(args.out_dir) if args.out_dir else out_manifest.parent
    resize = args.resize if args.resize > 0 else None
    manifest = datapipe.preprocess(args.input_dir, out_dir, resize, args.augment, fractions,
                                   args.seed, args.labels)
    out_manifest.parent.mkdir(parents=True, exist_ok=True)
    datapipe.write_manifest(manifest, out_manifest)
    dist = datapipe.class_distribution(manifest)
    log.info("wrote %d samples to %s; per-grade counts %s", len(manifest), out_manifest, dist.counts)
    return EXIT_OK


def _train_setup(args):
    run = resolve_config(_flag_overrides(args), args.config)
    if args.print_config:
        sys.stdout.write(run.dumps())
        for key, src in sorted(run.provenance.items()):
            log.debug("%s = %r (%s)", key, getattr(run.train, key), src)
        return run, None
    _require(args, "manifest", "out_dir")
    return run, datapipe.read_manifest(args.manifest)


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    run, manifest = _train_setup(args)
    if manifest is None:
        return EXIT_OK
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(run.dumps(), encoding="utf-8")
    assembly = bb.build_assembly(run.train.model_config())
    result = trainer.train(assembly, manifest, run.train, out)
    split = "test" if manifest.split("test").samples else "val"
    best = bb.from_checkpoint_bytes(result.best_checkpoint)
    report = trainer.evaluate(best, manifest, split, run.train.batch_size)
    _write_json(out / "report.json", report.to_dict())
    log.info("best epoch %d (val loss %.4f); %s accuracy %.4f", result.best_epoch,
             result.best_val_loss, split, report.accuracy)
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "ckpt", "manifest")
    assembly = bb.load_assembly(args.ckpt)
    manifest = datapipe.read_manifest(args.manifest)
    report = trainer.evaluate(assembly, manifest, args.split or None)
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    run, manifest = _train_setup(args)
    if manifest is None:
        return EXIT_OK
    modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    bad = [m for m in modes if m not in bb.ABLATION_MODES]
    if bad:
        raise UsageError(f"unknown --modes entries {bad}; expected {','.join(bb.ABLATION_MODES)}")
    split = "test" if manifest.split("test").samples else "val"
    result = trainer.run_ablation(run.train, manifest, modes, eval_split=split)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(result.table(), encoding="utf-8")
    _write_json(out / "ablation.json", {
        "rows": result.rows,
        "manifest_sha256": result.manifest_hash,
        "eval_split": split,
        "reports": {m: r.to_dict() for m, r in result.reports.items()},
    })
    sys.stdout.write(result.table())
    return EXIT_OK


def cmd_explain(args) -> int:
    _require(args, "ckpt", "out_dir")
    if not args.image and not args.manifest:
        raise UsageError("one of --image or --manifest is required")
    assembly = bb.load_assembly(args.ckpt)
    stages = tuple(s.strip() for s in args.stages.split(",") if s.strip())
    unknown = [s for s in stages if s not in explain.PANEL_STAGES]
    if unknown:
        raise UsageError(f"unknown --stages entries {unknown}")
    grade = args.grade
    if grade != "auto":
        try:
            grade = int(grade)
        except ValueError:
            raise UsageError(f"--grade must be auto or 0..{assembly.config.num_classes - 1}") from None
        if not 0 <= grade < assembly.config.num_classes:
            raise UsageError(f"--grade {grade} outside 0..{assembly.config.num_classes - 1}")
    if args.image:
        paths = [Path(args.image)]
    else:
        m = datapipe.read_manifest(args.manifest)
        if args.split:
            m = m.split(args.split)
        paths = [Path(s.path) for s in m.samples]
    written = 0
    for p in paths:
        image = datapipe.load_image(p)
        explain.attention_panel(assembly, image, p.stem, args.out_dir, grade, stages, args.colormap, args.alpha)
        written += 1
    log.info("wrote panels for %d image(s) to %s", written, args.out_dir)
    return EXIT_OK


# --- parser and dispatch -------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                           help="warnings and errors only")
    verbosity.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS,
                           help="debug logging")
    ap = _Parser(prog="drattn", description="Dual-attention DR grading toolkit", parents=[common])
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[common], help="rescale, augment and split an image folder")
    p.add_argument("--input-dir")
    p.add_argument("--out-manifest")
    p.add_argument("--out-dir", help="where processed PNGs go (default: manifest's directory)")
    p.add_argument("--labels", help="CSV of image,grade rows (default: grade subdirectories)")
    p.add_argument("--resize", type=int, default=512, help="square side length; 0 keeps sizes")
    p.add_argument("--augment", choices=datapipe.POLICIES, default="one-random")
    p.add_argument("--split", default="0.5,0.3,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    for name, func, helptext in (("train", cmd_train, "two-phase training"),
                                 ("ablate", cmd_ablate, "train and compare attention variants")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--manifest")
        p.add_argument("--config", help="JSON file of TrainConfig fields")
        p.add_argument("--out-dir")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        _add_train_flags(p)
        if name == "ablate":
            p.add_argument("--modes", default=",".join(bb.ABLATION_MODES))
        p.set_defaults(func=func)

    p = sub.add_parser("eval", parents=[common], help="metrics report for a checkpoint on a manifest split")
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test", help="split to evaluate ('' for all samples)")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", parents=[common], help="Grad-CAM panels per image")
    p.add_argument("--ckpt")
    p.add_argument("--image")
    p.add_argument("--manifest")
    p.add_argument("--split", default=None)
    p.add_argument("--grade", default="auto")
    p.add_argument("--stages", default="noattn,gab,cab")
    p.add_argument("--out-dir")
    p.add_argument("--colormap", default="viridis")
    p.add_argument("--alpha", type=float, default=0.4)
    p.set_defaults(func=cmd_explain)
    return ap


def _configure_logging(args) -> None:
    quiet, verbose = getattr(args, "quiet", False), getattr(args, "verbose", False)
    if quiet and verbose:
        raise UsageError("--quiet and --verbose are mutually exclusive")
    level = logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("drattn")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return EXIT_INVALID
    try:
        _configure_logging(args)
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    raise SystemExit(main())
