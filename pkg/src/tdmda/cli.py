"""Command-line entry point.

    tdmda gen two-moons --n 1000 --noise 0.1 --seed 7 --out src.csv
    tdmda gen rotate --angle 35 --in src.csv --out tgt.csv
    tdmda config --dump-defaults > run.ini
    tdmda train --config run.ini --source src.csv --target tgt.csv --out runs/a
    tdmda ablate --config run.ini --source src.csv --target tgt.csv --seeds 0 1 2 --out table.csv
    tdmda export --checkpoint runs/a/checkpoint.json --dataset tgt.csv --what uncertainty --out u.csv

Relative output paths are resolved against ``$TDMDA_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

from . import __version__
from . import data as D
from .config import REGIMES, TrainConfig, dump_config, load_config
from .nn import Mode, atomic_write_text, load_checkpoint, save_checkpoint
from .trainer import (
    TrainingDiverged,
    ablation_csv,
    evaluate,
    run_ablation,
    summarize,
    summary_csv,
    train,
)
from .uncertainty import bundle_csv, features_and_bundle

OUTPUT_ROOT_ENV = "TDMDA_OUTPUT_ROOT"


class CliError(Exception):
    pass


def out_path(path: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(";", ",").split(",") if v.strip()]


def _log(args, msg: str) -> None:
    if not args.quiet:
        print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def _write_dataset(args, ds: D.DomainDataset, default: str) -> None:
    path = out_path(args.out or default)
    D.save_csv(ds, path)
    D.write_manifest(ds, path)
    _log(args, f"wrote {len(ds)} rows to {path}")


def cmd_gen(args) -> None:
    if args.kind == "two-moons":
        ds = D.gen_two_moons(args.n, args.noise, args.seed)
        _write_dataset(args, ds, f"two-moons-seed{args.seed}.csv")
    elif args.kind == "rotate":
        ds = D.rotate(D.load_csv(args.input), args.angle)
        stem = os.path.splitext(os.path.basename(args.input))[0]
        _write_dataset(args, ds, f"{stem}-rot{args.angle:g}.csv")
    elif args.kind == "blobs":
        means = np.array([_floats(m) for m in args.means.split(";")])
        ds = D.gen_gaussian_blobs(args.k, args.n_per_class, means, args.cov_scale, args.seed)
        _write_dataset(args, ds, f"blobs-seed{args.seed}.csv")
    elif args.kind == "shift":
        src = D.load_csv(args.input)
        ds = D.shift_blobs(src, _floats(args.translation), args.swap_fraction, args.seed)
        stem = os.path.splitext(os.path.basename(args.input))[0]
        _write_dataset(args, ds, f"{stem}-shift.csv")


# ---------------------------------------------------------------------------
# config / train / eval
# ---------------------------------------------------------------------------


def cmd_config(args) -> None:
    if not args.dump_defaults:
        raise CliError("config: nothing to do (use --dump-defaults)")
    sys.stdout.write(dump_config(TrainConfig()))


def _resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.regime:
        cfg = cfg.with_regime(args.regime)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_train(args) -> None:
    cfg = _resolve_config(args)
    source = D.load_csv(args.source)
    target = D.load_csv(args.target)
    target_eval = D.load_csv(args.target_eval) if args.target_eval else None
    if target.domain != D.TARGET:
        raise CliError(f"{args.target}: expected target-domain rows")
    if (target_eval or target).eval_labels is None:
        raise CliError("train: target labels are needed for evaluation (pass --target-eval)")
    out_dir = out_path(args.out)
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "manifest": os.path.join(out_dir, "manifest.json"),
        "metrics": os.path.join(out_dir, "metrics.jsonl"),
        "checkpoint": os.path.join(out_dir, "checkpoint.json"),
    }
    manifest = {
        "code_version": f"tdmda {__version__}",
        "seed": cfg.seed,
        "regime": cfg.regime,
        "config": cfg.to_dict(),
        "datasets": {
            "source": {"path": args.source, **D.dataset_manifest(source)},
            "target": {"path": args.target, **D.dataset_manifest(target)},
        },
        "outputs": {k: os.path.basename(v) for k, v in paths.items()},
    }
    if target_eval is not None:
        manifest["datasets"]["target_eval"] = {"path": args.target_eval, **D.dataset_manifest(target_eval)}
    atomic_write_text(paths["manifest"], json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def progress(m):
        _log(args, f"step {m.step}: source_acc={m.source_acc:.4f} target_acc={m.target_acc:.4f} "
                   f"target_entropy={m.mean_entropy_target:.4f}")

    result = train(cfg, source, target, target_eval, on_metrics=progress)
    atomic_write_text(paths["metrics"], "".join(m.to_json() + "\n" for m in result.history))
    save_checkpoint(
        paths["checkpoint"], result.models,
        extra={"config": cfg.to_dict(), "standardizer": result.standardizer.to_dict()},
    )
    _log(args, f"wrote {paths['checkpoint']} and {paths['metrics']}")


def _load_run(path: str):
    models, extra = load_checkpoint(path)
    std = D.Standardizer.from_dict(extra["standardizer"]) if "standardizer" in extra else None
    cfg = extra.get("config", {})
    return models, std, cfg


def cmd_eval(args) -> None:
    models, std, cfg = _load_run(args.checkpoint)
    ds = D.load_csv(args.dataset)
    T = args.T or cfg.get("eval_mc_samples", 32)
    acc, ent = evaluate(models, ds, T, args.seed, std)
    print(json.dumps({"dataset": args.dataset, "accuracy": acc, "mean_entropy": ent, "T": T, "seed": args.seed}))


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def _parse_seeds(items: list[str]) -> list[int]:
    seeds = []
    for item in items:
        seeds.extend(int(s) for s in item.split(",") if s.strip())
    return seeds


def cmd_ablate(args) -> None:
    seeds = _parse_seeds(args.seeds)
    if not seeds:
        raise CliError("ablate: seed list is empty")
    cfg = load_config(args.config) if args.config else TrainConfig()
    source = D.load_csv(args.source)
    target = D.load_csv(args.target)
    target_eval = D.load_csv(args.target_eval) if args.target_eval else None
    regimes = args.regimes.split(",") if args.regimes else REGIMES
    rows = run_ablation(cfg, source, target, seeds, regimes, target_eval, jobs=args.jobs)
    path = out_path(args.out)
    atomic_write_text(path, ablation_csv(rows))
    summary = summarize(rows)
    if args.summary:
        atomic_write_text(out_path(args.summary), summary_csv(summary))
    if not args.quiet:
        sys.stdout.write(summary_csv(summary))


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return format(float(v), ".17g")


def export_text(models, std, ds: D.DomainDataset, what: str, T: int, seed) -> str:
    x = ds.inputs if std is None else std(ds.inputs)
    y = ds.known_labels
    labels = ["" if y is None else int(v) for v in (y if y is not None else [None] * len(ds))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if what in ("features", "probs"):
        f = models.extractor(x, Mode.DETERMINISTIC)
        if what == "features":
            values, prefix = f.data, "f"
        else:
            logits = models.classifier(f, Mode.DETERMINISTIC).data
            z = np.exp(logits - logits.max(axis=1, keepdims=True))
            values, prefix = z / z.sum(axis=1, keepdims=True), "p"
        w.writerow([f"{prefix}{j}" for j in range(values.shape[1])] + ["domain", "label"])
        for i, row in enumerate(values):
            w.writerow([_fmt(v) for v in row] + [ds.domain, labels[i]])
        return buf.getvalue()
    _, bundle = features_and_bundle(models, x, T, np.random.default_rng(seed))
    if what == "cmaps":
        return bundle_csv(bundle, [ds.domain] * len(ds))
    w.writerow(["sample_id", "domain", "label", "entropy_u"])
    for i, u in enumerate(bundle.entropy_u):
        w.writerow([i, ds.domain, labels[i], _fmt(u)])
    return buf.getvalue()


def cmd_export(args) -> None:
    models, std, cfg = _load_run(args.checkpoint)
    ds = D.load_csv(args.dataset)
    T = args.T or cfg.get("eval_mc_samples", 32)
    text = export_text(models, std, ds, args.what, T, args.seed)
    path = out_path(args.out)
    atomic_write_text(path, text)
    _log(args, f"wrote {args.what} for {len(ds)} rows to {path}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdmda", description="Triple distribution matching lab")
    p.add_argument("--version", action="version", version=f"tdmda {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--quiet", action="store_true", help="suppress progress messages")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate or transform a dataset")
    g.add_argument("kind", choices=["two-moons", "rotate", "blobs", "shift"])
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--angle", type=float, default=35.0)
    g.add_argument("--in", dest="input")
    g.add_argument("--k", type=int, default=3)
    g.add_argument("--n-per-class", type=int, default=200)
    g.add_argument("--means", default="0,0;3,0;0,3", help="class means, ';'-separated rows")
    g.add_argument("--cov-scale", type=float, default=0.25)
    g.add_argument("--translation", default="1,1")
    g.add_argument("--swap-fraction", type=float, default=0.0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("config", parents=[common], help="print configuration defaults")
    c.add_argument("--dump-defaults", action="store_true")
    c.set_defaults(func=cmd_config)

    t = sub.add_parser("train", parents=[common], help="train one regime")
    t.add_argument("--config")
    t.add_argument("--source", required=True)
    t.add_argument("--target", required=True)
    t.add_argument("--target-eval", help="labeled target CSV used only for evaluation")
    t.add_argument("--regime", choices=REGIMES)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="accuracy and entropy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--T", type=int)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="all regimes x seeds")
    a.add_argument("--config")
    a.add_argument("--source", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--target-eval")
    a.add_argument("--seeds", nargs="*", default=[])
    a.add_argument("--regimes", help="comma-separated subset of regimes")
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--summary", help="also write the median/IQR table here")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export", parents=[common], help="export diagnostics as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--dataset", required=True)
    x.add_argument("--what", required=True, choices=["features", "probs", "cmaps", "uncertainty"])
    x.add_argument("--T", type=int)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "gen" and args.kind in ("rotate", "shift") and not args.input:
        parser.error(f"gen {args.kind} requires --in")
    try:
        args.func(args)
    except (CliError, ValueError, KeyError, OSError, TrainingDiverged) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"tdmda: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
