"""Multimodal consistency (MC) score.

Each output detection of the fused model is compared with the detections
the model makes from a single modality. Source detections whose IOU with
the output detection is strictly above 0.3 are its matches; their mean IOU
is the detection's A-value for that modality. A-values average into
per-modality scores and a combined score, reported in percent.

An output detection with no match in a modality scores 0 for that modality.
IOU is exact pixel counting: boxes cover their inclusive integer grid.
"""
import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from redundet.errors import DataError, ShapeMismatchError, UndefinedScoreError
from redundet.kernels import rle_intersection
from redundet.masks import box_area, box_intersection, box_to_rle, rle_area, rle_encode

MATCH_THRESHOLD = 0.3
KINDS = ("box", "mask")


@dataclass(frozen=True)
class PixelSet:
    """A box or a run-length-encoded mask on an ``(H, W)`` grid."""

    kind: str
    data: object
    shape: tuple

    @classmethod
    def from_box(cls, box, shape):
        box = tuple(int(v) for v in box)
        x0, y0, x1, y1 = box
        h, w = shape
        if not (0 <= x0 <= x1 < w and 0 <= y0 <= y1 < h):
            raise DataError(f"box {box} outside a {h}x{w} image")
        return cls("box", box, tuple(shape))

    @classmethod
    def from_mask(cls, mask):
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise DataError("empty mask")
        return cls("mask", rle_encode(mask), mask.shape)

    def area(self):
        return box_area(self.data) if self.kind == "box" else rle_area(self.data)

    def runs(self):
        return box_to_rle(self.data, self.shape) if self.kind == "box" else self.data


def overlap_counts(x0, x1):
    """Exact ``(|x0 & x1|, |x0 | x1|)`` pixel counts."""
    if tuple(x0.shape) != tuple(x1.shape):
        raise ShapeMismatchError(f"pixel sets on different grids {x0.shape} vs {x1.shape}")
    if x0.kind == "box" and x1.kind == "box":
        inter = box_intersection(x0.data, x1.data)
    else:
        inter = rle_intersection(x0.runs(), x1.runs())
    return inter, x0.area() + x1.area() - inter


def iou(x0, x1):
    inter, union = overlap_counts(x0, x1)
    return inter / union if union else 0.0


def _pixel_set(det, kind, shape):
    return PixelSet.from_box(det.box, shape) if kind == "box" else PixelSet.from_mask(det.mask)


def pairwise_iou(sources, targets, kind, shape):
    """IOU matrix ``(len(sources), len(targets))`` with exact integer counts."""
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    if not sources or not targets:
        return np.zeros((len(sources), len(targets)))
    if kind == "box":
        a = np.array([d.box for d in sources], dtype=np.int64)
        b = np.array([d.box for d in targets], dtype=np.int64)
        ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]) + 1
        iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]) + 1
        inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
        area_a = (a[:, 2] - a[:, 0] + 1) * (a[:, 3] - a[:, 1] + 1)
        area_b = (b[:, 2] - b[:, 0] + 1) * (b[:, 3] - b[:, 1] + 1)
    else:
        for d in list(sources) + list(targets):
            if d.mask.shape != tuple(shape):
                raise ShapeMismatchError(f"mask {d.mask.shape} on a {tuple(shape)} image")
        # float64 products of 0/1 entries are exact integer counts here
        a_m = np.stack([d.mask.ravel() for d in sources]).astype(np.float64)
        b_m = np.stack([d.mask.ravel() for d in targets]).astype(np.float64)
        inter = np.rint(a_m @ b_m.T).astype(np.int64)
        area_a = a_m.sum(axis=1).astype(np.int64)
        area_b = b_m.sum(axis=1).astype(np.int64)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _shape_of(*sets):
    shapes = {tuple(s.image_shape) for s in sets}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"detection sets on different image sizes: {sorted(shapes)}")
    return shapes.pop()


def matched_ious(sources, target, kind, shape=None):
    """IOUs of every source detection with ``target`` that exceed 0.3."""
    dets = sources.detections if hasattr(sources, "detections") else list(sources)
    if not dets:
        return []
    shape = shape or (sources.image_shape if hasattr(sources, "image_shape") else target.mask.shape)
    col = pairwise_iou(dets, [target], kind, shape)[:, 0]
    return [float(a) for a in col if a > MATCH_THRESHOLD]


def avg_iou(sources, target, kind, shape=None):
    """Mean matched IOU, or ``None`` when nothing matches."""
    matched = matched_ious(sources, target, kind, shape)
    return float(np.mean(matched)) if matched else None


def a_values(sources, targets, kind):
    """A-value for every target detection (``None`` = no match)."""
    shape = _shape_of(sources, targets)
    if not targets.detections:
        return []
    if not sources.detections:
        return [None] * len(targets.detections)
    m = pairwise_iou(sources.detections, targets.detections, kind, shape)
    out = []
    for k in range(m.shape[1]):
        col = m[:, k]
        hit = col[col > MATCH_THRESHOLD]
        out.append(float(hit.mean()) if hit.size else None)
    return out


def _as_score(a):
    return 0.0 if a is None else a


def miou(sources, targets, kind):
    if not targets.detections:
        raise UndefinedScoreError("mIOU is undefined for an empty target set")
    return float(np.mean([_as_score(a) for a in a_values(sources, targets, kind)]))


def mc_single(modality_output, output, kind):
    """Per-modality MC score in percent."""
    return 100.0 * miou(modality_output, output, kind)


def mc_combined(modality_outputs, output, kind, mode="flat"):
    """Combined MC score in percent.

    ``mode="flat"`` averages all (modality, output detection) A-values;
    ``mode="per_modality"`` averages the per-modality scores instead.
    """
    if not output.detections:
        raise UndefinedScoreError("MC score is undefined when the output has no detections")
    if not modality_outputs:
        raise DataError("need at least one modality output")
    per = [[_as_score(a) for a in a_values(d, output, kind)] for d in modality_outputs]
    if mode == "flat":
        return 100.0 * float(np.mean([a for row in per for a in row]))
    if mode == "per_modality":
        return 100.0 * float(np.mean([np.mean(row) for row in per]))
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# reports


@dataclass
class MCReport:
    per_detection: list
    per_class: dict
    per_split: dict
    per_modality: dict
    modalities: tuple = ("rgb", "depth")
    skipped_scenes: list = field(default_factory=list)

    def to_json(self):
        return {
            "modalities": list(self.modalities),
            "per_detection": self.per_detection,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "per_split": self.per_split,
            "per_modality": self.per_modality,
            "skipped_scenes": self.skipped_scenes,
        }

    def dumps(self):
        return json.dumps(self.to_json(), indent=1)

    def class_table_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf)
        m0, m1 = self.modalities
        writer.writerow(["class", "n", "mask_combined", f"mask_{m0}", f"mask_{m1}",
                         "box_combined", f"box_{m0}", f"box_{m1}", "confidence"])
        rows = sorted(self.per_class.items(), key=lambda kv: kv[1]["mask"]["combined"])
        for label, agg in rows:
            writer.writerow([label, agg["n"]]
                            + [f"{agg['mask'][k]:.2f}" for k in ("combined", m0, m1)]
                            + [f"{agg['box'][k]:.2f}" for k in ("combined", m0, m1)]
                            + [f"{agg['confidence']:.4f}"])
        return buf.getvalue()


def _aggregate(records, modalities):
    out = {"n": len(records)}
    for kind in KINDS:
        per_mod = {}
        flat = []
        for m in modalities:
            vals = [_as_score(r["A"][kind][m]) for r in records]
            per_mod[m] = 100.0 * float(np.mean(vals))
            flat.extend(vals)
        per_mod["combined"] = 100.0 * float(np.mean(flat))
        out[kind] = per_mod
    out["confidence"] = float(np.mean([r["confidence"] for r in records]))
    return out


def mc_report(scene_outputs, modalities=("rgb", "depth")):
    """Per-detection, per-class, per-split and per-modality MC aggregates.

    ``scene_outputs`` is an iterable of dicts with keys ``scene_id``,
    ``split``, ``output`` (fused DetectionSet) and one DetectionSet per
    modality name. An optional ``gt_iou`` key maps to a per-output-detection
    list of best mask IOU against ground truth.
    Scenes without output detections have no score and are listed in
    ``skipped_scenes``.
    """
    records, skipped = [], []
    for item in scene_outputs:
        out = item["output"]
        for m in modalities:
            if item[m].scene_id != out.scene_id:
                raise DataError(f"scene id mismatch: {item[m].scene_id} vs {out.scene_id}")
        if not out.detections:
            skipped.append(out.scene_id)
            continue
        avals = {kind: {m: a_values(item[m], out, kind) for m in modalities} for kind in KINDS}
        gt_iou = item.get("gt_iou")
        for k, det in enumerate(out.detections):
            rec = {
                "scene_id": out.scene_id,
                "split": item.get("split", ""),
                "index": k,
                "label": int(det.label),
                "confidence": float(det.confidence),
                "A": {kind: {m: avals[kind][m][k] for m in modalities} for kind in KINDS},
            }
            for kind in KINDS:
                rec[f"mc_{kind}"] = 100.0 * float(np.mean([_as_score(rec["A"][kind][m]) for m in modalities]))
            if gt_iou is not None:
                rec["gt_iou"] = float(gt_iou[k])
            records.append(rec)

    by_class, by_split = {}, {}
    for r in records:
        by_class.setdefault(r["label"], []).append(r)
        by_split.setdefault(r["split"], []).append(r)
    return MCReport(
        per_detection=records,
        per_class={k: _aggregate(v, modalities) for k, v in sorted(by_class.items())},
        per_split={k: _aggregate(v, modalities) for k, v in by_split.items()},
        per_modality=_aggregate(records, modalities) if records else {},
        modalities=tuple(modalities),
        skipped_scenes=skipped,
    )
