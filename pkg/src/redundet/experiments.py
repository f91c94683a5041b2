"""Reliability experiments: modality-off ablation, gate shift, MC vs. confidence."""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from redundet.errors import DataError
from redundet.fusion import export_gate_record, scale_means
from redundet.mcscore import mc_report, pairwise_iou
from redundet.metrics import average_precision
from redundet.model import CONDITIONS, MODALITIES, predict_batch
from redundet.training import scenes_to_tensors

# Table-style names: "RGB off" runs depth only, "Depth off" runs RGB only.
OFF_NAMES = {"depth_only": "rgb_off", "rgb_only": "depth_off"}


def run_conditions(model, scenes, conditions=CONDITIONS, batch_size=16, tau_obj=0.5, min_area=16):
    """Inference under each condition.

    Returns ``(detections, gate_means)``: ``detections[cond][scene_id]`` is a
    DetectionSet and ``gate_means[cond]`` an ``(n_scenes, n_scales, N)``
    array of channel-and-pixel mean gate weights.
    """
    if not scenes:
        raise DataError("no scenes to evaluate")
    dtype = next(model.parameters()).dtype
    detections, gate_means = {}, {}
    for cond in conditions:
        sets, means = {}, []
        for i in range(0, len(scenes), batch_size):
            chunk = scenes[i:i + batch_size]
            rgb, depth, _, _ = scenes_to_tensors(chunk, model.arch.stride, dtype)
            dsets, record = predict_batch(model, rgb, depth, cond, [s.scene_id for s in chunk],
                                          tau_obj, min_area)
            sets.update({d.scene_id: d for d in dsets})
            means.extend(scale_means(record, b) for b in range(len(chunk)))
        detections[cond] = sets
        gate_means[cond] = np.array(means)
    return detections, gate_means


def evaluate(model, scenes, condition="both", class_agnostic=False, **kw):
    dets, _ = run_conditions(model, scenes, (condition,), **kw)
    return average_precision(dets[condition], {s.scene_id: s.instances for s in scenes},
                             class_agnostic=class_agnostic)


def gt_best_iou(dset, instances, kind="mask"):
    """Best IOU of each detection against any ground-truth instance."""
    if not dset.detections:
        return []
    if not instances:
        return [0.0] * len(dset.detections)
    m = pairwise_iou(dset.detections, instances, kind, dset.image_shape)
    return m.max(axis=1).tolist()


def mc_inputs(detections, scenes):
    """Rows for ``mc_report`` from per-condition detections of the same scenes."""
    rows = []
    for s in scenes:
        out = detections["both"][s.scene_id]
        rows.append({
            "scene_id": s.scene_id,
            "split": s.split,
            "output": out,
            "rgb": detections["rgb_only"][s.scene_id],
            "depth": detections["depth_only"][s.scene_id],
            "gt_iou": gt_best_iou(out, s.instances),
        })
    return rows


@dataclass
class AblationReport:
    model_id: str
    split: str
    ap: dict
    mc: dict
    class_agnostic: bool = True
    n_scenes: int = 0

    def to_json(self):
        both = self.ap["both"]
        return {
            "model": self.model_id,
            "split": self.split,
            "n_scenes": self.n_scenes,
            "class_agnostic": self.class_agnostic,
            "protocol": "COCO-style AP@[0.50:0.95], 101-point interpolation",
            "box": {"AP": both["box_map"], "MC": self.mc.get("box")},
            "mask": {"AP": both["mask_map"], "MC": self.mc.get("mask")},
            "rgb_off": {"box_ap": self.ap["depth_only"]["box_map"], "mask_ap": self.ap["depth_only"]["mask_map"]},
            "depth_off": {"box_ap": self.ap["rgb_only"]["box_map"], "mask_ap": self.ap["rgb_only"]["mask_map"]},
            "per_condition": self.ap,
        }


def modality_ablation(model, scenes, model_id="", class_agnostic=True, **kw):
    """AP under both / RGB off / depth off, with MC scores of the fused output."""
    detections, _ = run_conditions(model, scenes, CONDITIONS, **kw)
    gt = {s.scene_id: s.instances for s in scenes}
    ap = {}
    for cond in CONDITIONS:
        res = average_precision(detections[cond], gt, class_agnostic=class_agnostic)
        ap[cond] = {"box_map": res.box_map, "mask_map": res.mask_map,
                    "box_ap50": float(np.mean(list(res.box_ap50.values()))),
                    "mask_ap50": float(np.mean(list(res.mask_ap50.values())))}
    report = mc_report(mc_inputs(detections, scenes))
    mc = {k: report.per_modality[k]["combined"] for k in ("box", "mask")} if report.per_modality else {}
    splits = sorted({s.split for s in scenes})
    return AblationReport(model_id, ",".join(splits), ap, mc, class_agnostic, len(scenes))


@dataclass
class GateShift:
    """Per-scene, per-scale mean gate weight per modality for each condition."""

    per_scene: dict
    scene_ids: list
    modalities: tuple = MODALITIES
    exported: list = field(default_factory=list)

    def summary(self):
        return {
            cond: [{m: float(v) for m, v in zip(self.modalities, row)} for row in arr.mean(axis=0)]
            for cond, arr in self.per_scene.items()
        }

    def shift_fraction(self, condition, reference="both", modality="depth"):
        """Fraction of scenes where ``modality``'s mean weight under ``condition``
        exceeds its value under ``reference`` at every scale."""
        m = self.modalities.index(modality)
        up = self.per_scene[condition][:, :, m] > self.per_scene[reference][:, :, m]
        return float(up.all(axis=1).mean())

    def to_json(self):
        return {
            "modalities": list(self.modalities),
            "scene_ids": self.scene_ids,
            "summary": self.summary(),
            "per_scene": {c: a.tolist() for c, a in self.per_scene.items()},
            "depth_up_fraction": {c: self.shift_fraction(c) for c in self.per_scene if c != "both"},
            "exported": self.exported,
        }


def gate_shift_analysis(model, scenes, export_dir=None, export_scenes=1, **kw):
    """Mean gate weights per scale under every condition; optionally exports heatmaps."""
    _, means = run_conditions(model, scenes, CONDITIONS, **kw)
    shift = GateShift(means, [s.scene_id for s in scenes])
    if export_dir is not None:
        import torch

        from redundet.model import condition_inputs

        dtype = next(model.parameters()).dtype
        for s in scenes[:export_scenes]:
            rgb, depth, _, _ = scenes_to_tensors([s], model.arch.stride, dtype)
            for cond in CONDITIONS:
                with torch.no_grad():
                    _, _, record = model.dense(*condition_inputs(rgb, depth, cond))
                d = Path(export_dir) / s.scene_id / cond
                export_gate_record(record, d, MODALITIES)
                shift.exported.append(str(d))
    return shift


def _report_json(report):
    return report if isinstance(report, dict) else report.to_json()


def mc_vs_confidence(report):
    """Per-split mean MC against mean confidence, plus MC/GT rank correlation.

    Accepts an MCReport or its JSON form.
    """
    report = _report_json(report)
    rows = {}
    for split, agg in report["per_split"].items():
        rows[split] = {
            "n": agg["n"],
            "mc_mask": agg["mask"]["combined"],
            "mc_box": agg["box"]["combined"],
            "confidence": agg["confidence"],
        }
    with_gt = [r for r in report["per_detection"] if "gt_iou" in r]
    corr = {}
    if len(with_gt) >= 3:
        gt = [r["gt_iou"] for r in with_gt]
        for key in ("mc_mask", "mc_box", "confidence"):
            vals = [r[key] for r in with_gt]
            rho = stats.spearmanr(vals, gt).statistic if np.ptp(vals) > 0 and np.ptp(gt) > 0 else float("nan")
            corr[key] = float(rho)
    return {"per_split": rows, "spearman_vs_gt_iou": corr}


def drift(table, splits=("train", "test", "test_novel"), key="mc_mask"):
    """Relative decrease of ``key`` from the first to the last split."""
    first, last = table["per_split"][splits[0]][key], table["per_split"][splits[-1]][key]
    return (first - last) / first if first else float("nan")


def scatter_csv(report):
    lines = ["scene_id,split,label,confidence,mc_mask,mc_box,gt_iou"]
    for r in _report_json(report)["per_detection"]:
        lines.append(f"{r['scene_id']},{r['split']},{r['label']},{r['confidence']:.6f},"
                     f"{r['mc_mask']:.4f},{r['mc_box']:.4f},{r.get('gt_iou', '')}")
    return "\n".join(lines) + "\n"


def _fmt(v, pct=False):
    if v is None:
        return "n/a"
    return f"{v:.1f}" if pct else f"{v:.3f}"


def ablation_table(reports):
    """Markdown table from AblationReport objects or their JSON form."""
    lines = ["| model | box AP | mask AP | box MC | mask MC | RGB off box | RGB off mask | Depth off box | Depth off mask |",
             "|---|---|---|---|---|---|---|---|---|"]
    for r in reports:
        j = r if isinstance(r, dict) else r.to_json()
        lines.append(f"| {j['model']} | {_fmt(j['box']['AP'])} | {_fmt(j['mask']['AP'])} | "
                     f"{_fmt(j['box']['MC'], True)} | {_fmt(j['mask']['MC'], True)} | "
                     f"{_fmt(j['rgb_off']['box_ap'])} | {_fmt(j['rgb_off']['mask_ap'])} | "
                     f"{_fmt(j['depth_off']['box_ap'])} | {_fmt(j['depth_off']['mask_ap'])} |")
    return "\n".join(lines)


def _dump(obj, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def collect_artifacts(data, checkpoint, out_dir, baseline=None, split="test"):
    """Run the reliability experiments and write their JSON artifacts.

    Layout: ``ablation/<model>.json``, ``gate_shift.json`` with heatmaps under
    ``gates/<scene>/<condition>/``, ``mc_report.json`` and ``meta.json``.
    ``render_report`` turns the directory into markdown.
    """
    from redundet.model import load_checkpoint
    from redundet.synthdata import load_manifest, load_split

    out_dir = Path(out_dir)
    manifest = load_manifest(data)
    model, _ = load_checkpoint(checkpoint)
    eval_scenes = load_split(data, split)
    if not eval_scenes:
        raise DataError(f"split {split!r} is empty")

    runs = [(baseline, Path(baseline).parent.name or "baseline")] if baseline else []
    runs.append((checkpoint, Path(checkpoint).parent.name or "model"))
    for i, (path, name) in enumerate(runs):
        m = model if path == checkpoint else load_checkpoint(path)[0]
        rep = modality_ablation(m, eval_scenes, name)
        _dump(rep.to_json(), out_dir / "ablation" / f"{i}_{name}.json")

    shift = gate_shift_analysis(model, eval_scenes, export_dir=out_dir / "gates")
    shift.exported = [str(Path(d).relative_to(out_dir)) for d in shift.exported]
    _dump(shift.to_json(), out_dir / "gate_shift.json")

    rows = []
    for s in ("train", "test", "test_novel"):
        scenes = load_split(data, s)
        if scenes:
            dets, _ = run_conditions(model, scenes)
            rows += mc_inputs(dets, scenes)
    (out_dir / "mc_report.json").write_text(mc_report(rows).dumps() + "\n")
    _dump({"checkpoint": Path(checkpoint).parent.name or str(checkpoint), "split": split,
           "n_scenes": len(eval_scenes), "config_hash": manifest.config_hash,
           "classes": manifest.classes}, out_dir / "meta.json")
    return out_dir


def _load(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def render_report(artifact_dir, out=None):
    """Markdown summary built only from the JSON artifacts in ``artifact_dir``.

    Any of ``ablation/*.json``, ``gate_shift.json`` and ``mc_report.json`` may
    be missing; their sections are then left out. Also writes the MC/confidence
    table and CSV exports next to the report.
    """
    root = Path(artifact_dir)
    if not root.is_dir():
        raise DataError(f"artifact directory not found: {root}")
    out = Path(out) if out else root / "report.md"
    meta = _load(root / "meta.json") if (root / "meta.json").exists() else {}
    names = {c["label"]: c["name"] for c in meta.get("classes", [])}
    ablations = []
    for f in sorted((root / "ablation").glob("*.json")):
        obj = _load(f)
        ablations += obj if isinstance(obj, list) else [obj]
    if not ablations and not (root / "gate_shift.json").exists() and not (root / "mc_report.json").exists():
        raise DataError(f"no artifacts in {root}")

    md = [f"# Reliability report: {meta.get('checkpoint', root.name)}", ""]
    if meta:
        md += [f"Evaluation split `{meta['split']}` ({meta['n_scenes']} scenes), dataset config hash "
               f"`{meta['config_hash'][:12]}`. AP is class-agnostic COCO-style AP@[0.50:0.95].", ""]
    if ablations:
        md += ["## Modality ablation", "", ablation_table(ablations), ""]

    if (root / "gate_shift.json").exists():
        gs = _load(root / "gate_shift.json")
        summary = gs["summary"]
        n_scales = len(summary["both"])
        md += ["## Gate weights", "",
               "Mean depth gate weight (channels and pixels averaged) per scale; scale 0 is the finest.", "",
               "| condition | " + " | ".join(f"scale {j}" for j in range(n_scales)) + " |",
               "|---|" + "---|" * n_scales]
        for cond, per_scale in summary.items():
            md.append(f"| {cond} | " + " | ".join(f"{s['depth']:.3f}" for s in per_scale) + " |")
        md += ["", "Fraction of scenes whose depth weight rises above the `both` value at every scale: "
               + ", ".join(f"{c}: {v:.2f}" for c, v in gs["depth_up_fraction"].items()), ""]
        dirs = [root / d for d in gs.get("exported", []) if (root / d).is_dir()]
        if dirs:
            mods = gs["modalities"]
            md += [f"Heatmaps for `{dirs[0].parent.name}` (brighter = higher weight):", "",
                   "| condition | " + " | ".join(f"{m} s{j}" for j in range(n_scales) for m in mods) + " |",
                   "|---|" + "---|" * (len(mods) * n_scales)]
            for d in dirs:
                cells = [f"![]({(d / f'gate_s{j}_{m}.png').relative_to(out.parent)})"
                         for j in range(n_scales) for m in mods]
                md.append(f"| {d.name} | " + " | ".join(cells) + " |")
            md.append("")

    if (root / "mc_report.json").exists():
        rep = _load(root / "mc_report.json")
        table = mc_vs_confidence(rep)
        _dump(table, out.parent / "mc_vs_confidence.json")
        (out.parent / "mc_scatter.csv").write_text(scatter_csv(rep))
        md += ["## MC score against confidence", "",
               "| split | detections | mask MC | box MC | mean confidence |", "|---|---|---|---|---|"]
        for s, row in table["per_split"].items():
            md.append(f"| {s} | {row['n']} | {row['mc_mask']:.1f} | {row['mc_box']:.1f} | {row['confidence']:.3f} |")
        if table["spearman_vs_gt_iou"]:
            md += ["", "Spearman correlation with each detection's best mask IOU against ground truth: "
                   + ", ".join(f"{k} {v:.3f}" for k, v in table["spearman_vs_gt_iou"].items())]
        md += ["", "## MC per class", "", "| class | n | mask MC | box MC | confidence |", "|---|---|---|---|---|"]
        for label, agg in sorted(rep["per_class"].items(), key=lambda kv: kv[1]["mask"]["combined"]):
            md.append(f"| {names.get(int(label), label)} | {agg['n']} | {agg['mask']['combined']:.1f} | "
                      f"{agg['box']['combined']:.1f} | {agg['confidence']:.3f} |")
        md += ["", "Per-detection values: `mc_scatter.csv`."]
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(md) + "\n")
    return out
