"""Command-line driver.

Exit status: 0 success, 1 usage error, 2 data or validation error,
3 numerical failure. Diagnostics go to standard error.
"""
import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from redundet.errors import DataError, DatasetError, NumericalError

log = logging.getLogger("redundet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def default_config_path():
    return str(resources.files("redundet") / "configs" / "acceptance.ini")


def _write_json(obj, path):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")


def _load_scenes(data, split):
    from redundet.synthdata import SPLITS, load_split

    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}; choose from {SPLITS}")
    scenes = load_split(data, split)
    if not scenes:
        raise DataError(f"split {split!r} in {data} is empty")
    return scenes


def cmd_generate(args):
    from redundet.synthdata import GeneratorConfig, generate_dataset, write_dataset

    cfg = GeneratorConfig.from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    manifest, scenes = generate_dataset(cfg)
    write_dataset(manifest, scenes, args.out)
    counts = {s: len(ids) for s, ids in manifest.splits.items()}
    print(json.dumps({"root": args.out, "splits": counts, "config_hash": manifest.config_hash}))


def cmd_train(args):
    from redundet.model import ArchConfig
    from redundet.training import TrainConfig, build_model, train

    cfg = TrainConfig.from_file(args.config)
    if args.mode:
        cfg.ensemble_mode = args.mode
    if args.epochs:
        cfg.epochs = args.epochs
    train_scenes = _load_scenes(args.data, "train")
    from redundet.synthdata import load_split

    val_scenes = load_split(args.data, "val")
    model = build_model(ArchConfig(channels=cfg.channels), cfg.seed)
    _, tlog = train(model, train_scenes, val_scenes, cfg, args.out)
    print(json.dumps({"checkpoint": tlog.checkpoint, "best_epoch": tlog.best_epoch,
                      "final_loss": tlog.epochs[-1]["train_loss"]}))


def cmd_evaluate(args):
    from redundet.experiments import run_conditions
    from redundet.metrics import average_precision
    from redundet.model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    scenes = _load_scenes(args.data, args.split)
    dets, _ = run_conditions(model, scenes, (args.condition,))
    dets = dets[args.condition]
    res = average_precision(dets, {s.scene_id: s.instances for s in scenes}, class_agnostic=args.class_agnostic)
    if args.detections:
        _write_json([dets[s.scene_id].to_json() for s in scenes], args.detections)
    out = res.to_json()
    out.update({"split": args.split, "condition": args.condition})
    _write_json(out, args.out)


def cmd_ablate(args):
    from redundet.experiments import modality_ablation
    from redundet.model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    model_id = args.model_id or Path(args.checkpoint).parent.name
    rep = modality_ablation(model, _load_scenes(args.data, args.split), model_id)
    _write_json(rep.to_json(), args.out)


def _read_sets(path):
    from redundet.model import DetectionSet

    path = Path(path)
    if not path.exists():
        raise DatasetError(f"detection file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    items = raw if isinstance(raw, list) else [raw]
    return [DetectionSet.from_json(x) for x in items]


def cmd_mc_score(args):
    from redundet.mcscore import mc_report

    pairs = []
    for spec in args.modality:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--modality expects NAME=FILE, got {spec!r}")
        pairs.append((name, path))
    outputs = _read_sets(args.output)
    modalities = {name: {d.scene_id: d for d in _read_sets(path)} for name, path in pairs}
    rows = []
    for out in outputs:
        row = {"scene_id": out.scene_id, "split": args.split, "output": out}
        for name, sets in modalities.items():
            if out.scene_id not in sets:
                raise DataError(f"scene {out.scene_id} missing from modality {name!r}")
            row[name] = sets[out.scene_id]
        rows.append(row)
    rep = mc_report(rows, tuple(modalities))
    _write_json(rep.to_json(), args.out)
    if args.csv:
        Path(args.csv).write_text(rep.class_table_csv())


def cmd_gate_heatmap(args):
    from redundet.experiments import gate_shift_analysis
    from redundet.model import load_checkpoint
    from redundet.synthdata import load_manifest, read_scene

    model, _ = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.data)
    split = next((s for s, ids in manifest.splits.items() if args.scene in ids), None)
    if split is None:
        raise DataError(f"scene {args.scene!r} not in dataset {args.data}")
    scene = read_scene(Path(args.data) / split / args.scene, manifest.checksums.get(args.scene))
    shift = gate_shift_analysis(model, [scene], export_dir=args.out)
    shift.exported = [str(Path(d).relative_to(args.out)) for d in shift.exported]
    _write_json(shift.to_json(), Path(args.out) / "gate_shift.json")
    print(json.dumps({"exported": shift.exported}))


def cmd_analyze(args):
    from redundet.experiments import collect_artifacts

    out = collect_artifacts(args.data, args.checkpoint, args.out, baseline=args.baseline, split=args.split)
    print(json.dumps({"artifacts": str(out)}))


def cmd_report(args):
    from redundet.experiments import render_report

    path = render_report(args.artifacts, args.out)
    print(json.dumps({"report": str(path)}))


def build_parser():
    p = _Parser(prog="redundet", description="RGB-D redundancy toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate-data", help="generate and write the synthetic dataset")
    g.add_argument("--config", default=default_config_path())
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model; writes model.ckpt and logs")
    t.add_argument("--config", default=default_config_path())
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=["standard", "dynamic_ensemble"])
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="AP of a checkpoint on one split and condition")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--condition", default="both", choices=["both", "rgb_only", "depth_only"])
    e.add_argument("--class-agnostic", action="store_true")
    e.add_argument("--detections", help="also write the DetectionSets (JSON list) for mc-score")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="modality-off ablation report")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--model-id")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("mc-score", help="MC report from detection-set files")
    m.add_argument("--output", required=True, help="fused-output DetectionSet JSON (object or list)")
    m.add_argument("--modality", action="append", required=True, metavar="NAME=FILE")
    m.add_argument("--split", default="")
    m.add_argument("--out")
    m.add_argument("--csv", help="also write the per-class table")
    m.set_defaults(func=cmd_mc_score)

    h = sub.add_parser("gate-heatmap", help="export gate heatmaps for one scene under every condition")
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--scene", required=True)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_gate_heatmap)

    an = sub.add_parser("analyze", help="run ablation, gate and MC experiments into an artifact directory")
    an.add_argument("--checkpoint", required=True, help="dynamic-ensemble checkpoint")
    an.add_argument("--baseline", help="optional standard-mode checkpoint for the ablation table")
    an.add_argument("--data", required=True)
    an.add_argument("--split", default="test")
    an.add_argument("--out", required=True)
    an.set_defaults(func=cmd_analyze)

    r = sub.add_parser("report", help="markdown summary from JSON artifacts (no model access)")
    r.add_argument("--artifacts", required=True, help="directory from `analyze`, or hand-assembled JSON files")
    r.add_argument("--out", help="report path (default: <artifacts>/report.md)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("redundet: a subcommand is required (see --help)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
