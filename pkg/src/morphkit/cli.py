"""``morphkit`` command line: data generation, the SE/operation experiments, classifiers.

Exit codes: 0 success, 1 the experiment ran but failed its check, 2 bad usage.
Every run writes ``manifest.json`` (config echo, input hash, outputs, metrics)
into its output directory; ``--config manifest.json`` replays it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .datasets import (BUILTIN_SES, LabeledSet, builtin_se, default_mnist_dir, export_se_json, gen_scgs,
                       import_se_json, load_image_dir, load_mnist, make_pairs, save_image_dir, write_pgm)
from .experiments import (COMPOUNDS, DEFAULT_BATCH, DEFAULT_LR, GRADCHECK_LIMIT, GRAY_DEFAULT, classifier_data,
                          default_lr, detect_op, gradcheck_suite, learn_compound, learn_se, train_classifier)
from .grid import DomainError
from .layers import PROFILES, load_model, parameter_report, save_model
from .soft import MorphMode, StructuringElement
from .training import accuracy

log = logging.getLogger("morphkit")

# -- manifest -----------------------------------------------------------------

def _blob_hash(data: bytes) -> str:
    """Git-style object id: sha1 over ``blob <len>\\0`` + content."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(config: dict[str, Any], files=()) -> str:
    """Hash of the canonical config plus the bytes of every input file, in order."""
    h = hashlib.sha1()
    h.update(_blob_hash(json.dumps(config, sort_keys=True).encode()).encode())
    for f in files:
        h.update(_blob_hash(Path(f).read_bytes()).encode())
    return h.hexdigest()


def write_json_atomic(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- argument parsing -----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None,
                   help="gradient workers per batch (default: $MORPHKIT_WORKERS or 1)")
    p.add_argument("--config", type=Path, default=None,
                   help="JSON object (or a run manifest) whose keys override the flags")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: runs/<command>)")
    p.add_argument("--mnist-dir", type=Path, default=None,
                   help="directory with the MNIST IDX files (default: $MORPHKIT_MNIST_DIR or data/mnist)")
    p.add_argument("-v", "--verbose", action="store_true")


def _training(p, epochs=20, lr=None, restarts=1):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    p.add_argument("--restarts", type=int, default=restarts)
    p.add_argument("--pairs", type=int, default=2000, help="training pairs drawn from MNIST per restart")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="morphkit", description="Differentiable morphology networks.")
    parser.add_argument("--version", action="version", version=f"morphkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic shapes dataset as PGM files")
    _common(p)
    p.add_argument("--dataset", choices=["scgs"], default="scgs")
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("make-pairs", help="apply hard morphology to images and save input/target PGMs")
    _common(p)
    p.add_argument("--input", type=Path, default=None, help="image directory with labels.csv (default: MNIST)")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--ops", default="dilate:diamond3",
                   help="comma-separated op:SE steps, e.g. erode:diamond3,dilate:diamond3")

    p = sub.add_parser("learn-se", help="learn a structuring element from hard-morphology targets")
    _common(p)
    p.add_argument("--form", choices=["binary", "gray"], default="binary")
    p.add_argument("--se", default=None, help=f"built-in SE ({', '.join(sorted(BUILTIN_SES))}) or SE JSON path")
    p.add_argument("--op", choices=["dilate", "erode"], default="dilate")
    p.add_argument("--erosion-variant", choices=["corrected", "verbatim"], default="corrected")
    p.add_argument("--max-taxicab", type=float, default=0.2, help="success bound for non-flat SEs")
    _training(p, restarts=10)

    p = sub.add_parser("detect-op", help="train an adaptive layer and report which operation it picked")
    _common(p)
    p.add_argument("--smooth", choices=["tanh", "softsign"], default="tanh")
    p.add_argument("--op", choices=["dilate", "erode"], default="dilate")
    p.add_argument("--se", default="diamond3")
    p.add_argument("--form", choices=["product", "additive"], default="product")
    _training(p, lr=DEFAULT_LR["adaptive"])

    p = sub.add_parser("learn-compound", help="train a two-layer net on opened or closed targets")
    _common(p)
    p.add_argument("--kind", choices=sorted(COMPOUNDS), default="opening")
    p.add_argument("--se", default="diamond3")
    p.add_argument("--form", choices=["product", "additive"], default="product")
    p.add_argument("--max-mse", type=float, default=1e-3)
    _training(p, lr=DEFAULT_LR["compound"])

    p = sub.add_parser("train-classifier", help="train a residual morphological classifier")
    _common(p)
    p.add_argument("--arch", choices=["residual-mnn"], default="residual-mnn")
    p.add_argument("--dataset", choices=["scgs", "mnist", "dir"], default="scgs")
    p.add_argument("--data-dir", type=Path, default=None, help="train/ and test/ image dirs for --dataset dir")
    p.add_argument("--profile", choices=sorted(PROFILES), default=None,
                   help="layer widths (default: the dataset's own profile)")
    p.add_argument("--filters", type=int, default=1)
    p.add_argument("--form", choices=["product", "additive"], default="product")
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=DEFAULT_LR["classifier"])
    p.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    p.add_argument("--train-size", type=int, default=10_000)
    p.add_argument("--test-size", type=int, default=None, help="default: 2500 for scgs, 2000 for mnist")
    p.add_argument("--eval-every", type=int, default=0)
    p.add_argument("--target-accuracy", type=float, default=None, help="stop once test accuracy reaches this")

    p = sub.add_parser("eval", help="test accuracy of a saved classifier")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--dataset", choices=["scgs", "mnist", "dir"], default="scgs")
    p.add_argument("--data-dir", type=Path, default=None)
    p.add_argument("--test-size", type=int, default=2500)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer kind")
    _common(p)
    p.add_argument("--size", type=int, default=8)

    p = sub.add_parser("export", help="write a saved model's SEs as JSON and PGM plus a parameter report")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    return parser


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if args.config is None:
        return
    try:
        data = json.loads(args.config.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read --config {args.config}: {exc}")
    if "config" in data and "command" in data:  # a run manifest
        if data["command"] != args.command:
            parser.error(f"manifest is for {data['command']!r}, not {args.command!r}")
        data = data["config"]
    for key, value in data.items():
        attr = key.replace("-", "_")
        if attr in ("command", "config"):
            continue
        if not hasattr(args, attr):
            parser.error(f"--config: unknown option {key!r} for {args.command}")
        if isinstance(getattr(args, attr), Path) or attr in ("out", "mnist_dir", "input", "data_dir", "model"):
            value = None if value is None else Path(value)
        setattr(args, attr, value)


def _echo(args: argparse.Namespace) -> dict[str, Any]:
    skip = {"config", "verbose"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}


# -- helpers ----------------------------------------------------------------------

def _mnist_dir(args) -> Path:
    return args.mnist_dir or default_mnist_dir()


def _mnist_images(args) -> tuple[np.ndarray, list[Path]]:
    root = _mnist_dir(args)
    ds = load_mnist(root, "train")
    return ds.images, sorted(p for p in Path(root).iterdir() if p.name.startswith("train-images"))


def _resolve_se(name: str) -> tuple[StructuringElement, list[Path]]:
    if name in BUILTIN_SES:
        return builtin_se(name), []
    path = Path(name)
    if not path.exists():
        raise DomainError(f"unknown SE {name!r}: not built in and no such file")
    return import_se_json(path), [path]


def _heatmap(weights: np.ndarray) -> np.ndarray:
    lo, hi = float(weights.min()), float(weights.max())
    return np.zeros_like(weights) if hi == lo else (weights - lo) / (hi - lo)


def _save_se(out: Path, stem: str, weights, like: StructuringElement | None = None) -> list[str]:
    w = np.asarray(weights, dtype=np.float64)
    se = StructuringElement(w, like.form if like else "product", like.kind if like else "nonflat")
    export_se_json(se, out / f"{stem}.json")
    write_pgm(_heatmap(w), out / f"{stem}.pgm")
    return [f"{stem}.json", f"{stem}.pgm"]


def _summary_lines(metrics: dict[str, Any]) -> list[str]:
    return [f"{k}: {v}" for k, v in metrics.items() if not isinstance(v, (list, dict))]


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(args, out: Path):
    ds = gen_scgs(args.per_class, args.size, args.seed)
    save_image_dir(ds, out / "images")
    return {"images": len(ds), "classes": ds.class_names}, ["images/labels.csv"], [], None


def cmd_make_pairs(args, out: Path):
    ops, inputs = [], []
    for step in args.ops.split(","):
        mode, _, name = step.partition(":")
        se, files = _resolve_se(name or "diamond3")
        ops.append((MorphMode(mode.strip()), se))
        inputs += files
    if args.input:
        images = load_image_dir(args.input).images
        inputs.append(args.input / "labels.csv")
    else:
        images, files = _mnist_images(args)
        inputs += files
    images = images[:args.count]
    pairs = make_pairs(images, ops)
    for sub, arr in (("inputs", pairs.inputs), ("targets", pairs.targets)):
        save_image_dir(LabeledSet(np.clip(arr, 0, 1), np.zeros(len(arr), dtype=np.int64)), out / sub)
    return {"pairs": len(images), "ops": pairs.provenance}, ["inputs/labels.csv", "targets/labels.csv"], inputs, None


def cmd_learn_se(args, out: Path):
    op = MorphMode(args.op)
    name = args.se or ("diamond3" if args.form == "binary" else GRAY_DEFAULT[op])
    truth, inputs = _resolve_se(name)
    if args.lr is None:
        args.lr = default_lr(args.form, args.op)
    images, files = _mnist_images(args)
    report = learn_se(images, truth, args.op, args.form, epochs=args.epochs, lr=args.lr, batch=args.batch,
                      restarts=args.restarts, n_pairs=args.pairs, seed=args.seed, workers=args.workers,
                      erosion_variant=args.erosion_variant)
    outputs = ["report.json"]
    for run in report["runs"]:
        outputs += _save_se(out, f"learned_se_{run['restart']}", run["learned"], truth)
    write_json_atomic(out / "report.json", report)
    s = report["summary"]
    if "accuracy" in s:
        failed = s["matches"] < args.restarts and f"{s['matches']}/{args.restarts} restarts recovered the SE"
    else:
        failed = (s["mean_taxicab"] is None or s["mean_taxicab"] > args.max_taxicab) and \
            f"mean taxicab {s['mean_taxicab']} above {args.max_taxicab}"
    return s, outputs, inputs + files, failed or None


def cmd_detect_op(args, out: Path):
    se, inputs = _resolve_se(args.se)
    images, files = _mnist_images(args)
    report = detect_op(images, args.op, args.smooth, se, epochs=args.epochs, lr=args.lr, batch=args.batch,
                       restarts=args.restarts, n_pairs=args.pairs, seed=args.seed, workers=args.workers,
                       form=args.form)
    write_json_atomic(out / "report.json", report)
    s = report["summary"]
    s["decisions"] = [r["decision"] for r in report["runs"]]
    failed = s["correct"] < args.restarts and f"{s['correct']}/{args.restarts} correct decisions"
    return s, ["report.json"], inputs + files, failed or None


def cmd_learn_compound(args, out: Path):
    se, inputs = _resolve_se(args.se)
    images, files = _mnist_images(args)
    report = learn_compound(images, args.kind, se, epochs=args.epochs, lr=args.lr, batch=args.batch,
                            restarts=args.restarts, n_pairs=args.pairs, seed=args.seed, workers=args.workers,
                            form=args.form)
    write_json_atomic(out / "report.json", report)
    s = report["summary"]
    failed = (s["max_final_loss"] is None or s["max_final_loss"] > args.max_mse or s["diverged"]) and \
        f"final MSE {s['max_final_loss']} (bound {args.max_mse}), {s['diverged']} diverged"
    return s, ["report.json"], inputs + files, failed or None


def _labeled_split(args, n_train, n_test):
    if args.dataset == "dir":
        if args.data_dir is None:
            raise DomainError("--dataset dir needs --data-dir with train/ and test/ subdirectories")
        tr = load_image_dir(args.data_dir / "train") if n_train else None
        te = load_image_dir(args.data_dir / "test")
        files = [args.data_dir / "train" / "labels.csv", args.data_dir / "test" / "labels.csv"]
        return tr, te.subset(np.arange(min(n_test, len(te)))), files
    tr, te = classifier_data(args.dataset, max(n_train, 1), n_test, args.seed, _mnist_dir(args))
    files = []
    if args.dataset == "mnist":
        files = sorted(p for p in _mnist_dir(args).iterdir() if "idx" in p.name)
    return tr, te, files


def cmd_train_classifier(args, out: Path):
    if args.test_size is None:
        args.test_size = 2000 if args.dataset == "mnist" else 2500
    tr, te, files = _labeled_split(args, args.train_size, args.test_size)
    if args.profile:
        profile = args.profile
    elif args.dataset in PROFILES:
        profile = args.dataset
    else:
        rows, cols = tr.images.shape[1:]
        profile = {"input": (rows, cols), "fc": (1024, 512), "classes": len(tr.class_names)}
    report, spec, states = train_classifier(tr, te, profile, filters=args.filters, epochs=args.epochs, lr=args.lr,
                                            batch=args.batch, seed=args.seed, workers=args.workers,
                                            form=args.form, dropout=args.dropout, eval_every=args.eval_every,
                                            target_accuracy=args.target_accuracy)
    report["parameters"] = parameter_report(spec)
    save_model(out / "model.bin", spec, states)
    write_json_atomic(out / "report.json", report)
    metrics = {k: report[k] for k in ("train_accuracy", "test_accuracy", "epochs_run")}
    return metrics, ["model.bin", "report.json"], files, None


def cmd_eval(args, out: Path):
    spec, states = load_model(args.model)
    _, te, files = _labeled_split(args, 0, args.test_size)
    acc = accuracy(spec, states, te.images[:, None], te.labels)
    return {"test_accuracy": acc, "n_test": len(te)}, [], [args.model] + files, None


def cmd_gradcheck(args, out: Path):
    errors = gradcheck_suite(args.seed, args.size)
    worst = {name: max(v.values(), default=0.0) for name, v in errors.items()}
    write_json_atomic(out / "report.json", errors)
    bad = [n for n, e in worst.items() if not e < GRADCHECK_LIMIT]
    metrics = {"max_relative_error": max(worst.values()), "per_network": worst, "limit": GRADCHECK_LIMIT}
    return metrics, ["report.json"], [], bad and f"relative error >= {GRADCHECK_LIMIT} in {', '.join(bad)}"


def cmd_export(args, out: Path):
    spec, states = load_model(args.model)
    outputs = []
    for i, (layer, st) in enumerate(zip(spec.layers, states)):
        if "weights" in st:
            like = StructuringElement(st["weights"][0], layer.form, "flat" if layer.form == "product" else "nonflat")
            for s, w in enumerate(st["weights"]):
                outputs += _save_se(out, f"layer{i}_{layer.kind}_se{s}", w, like)
    report = parameter_report(spec)
    write_json_atomic(out / "parameters.json", report)
    return {"se_files": len(outputs), "parameters": report["total"]}, outputs + ["parameters.json"], [args.model], None


HANDLERS = {
    "gen-data": cmd_gen_data,
    "make-pairs": cmd_make_pairs,
    "learn-se": cmd_learn_se,
    "detect-op": cmd_detect_op,
    "learn-compound": cmd_learn_compound,
    "train-classifier": cmd_train_classifier,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args, parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is None:
        args.workers = int(os.environ.get("MORPHKIT_WORKERS", "1") or 1)
    if args.workers < 1 or args.seed < 0:
        parser.print_usage(sys.stderr)
        print("morphkit: error: --workers must be >= 1 and --seed >= 0", file=sys.stderr)
        return 2
    out = args.out or Path("runs") / args.command
    out.mkdir(parents=True, exist_ok=True)
    try:
        metrics, outputs, inputs, failure = HANDLERS[args.command](args, out)
    except (DomainError, FileNotFoundError, ValueError) as exc:
        print(f"morphkit {args.command}: {exc}", file=sys.stderr)
        return 2
    config = _echo(args)
    manifest = {
        "command": args.command,
        "config": config,
        "seed": args.seed,
        "input_hash": content_hash(config, inputs),
        "outputs": sorted(str(out / o) for o in outputs),
        "metrics": metrics,
        "status": "failed" if failure else "ok",
    }
    write_json_atomic(out / "manifest.json", manifest)
    (out / "summary.txt").write_text("\n".join([f"{args.command}: {manifest['status']}"] + _summary_lines(metrics))
                                     + "\n", encoding="utf-8")
    print(json.dumps(metrics, sort_keys=True))
    if failure:
        print(f"morphkit {args.command}: {failure}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
