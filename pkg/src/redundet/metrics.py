"""COCO-style average precision for boxes and masks."""
import math
from dataclasses import dataclass, field

import numpy as np

from redundet.errors import DataError
from redundet.kernels import greedy_match
from redundet.mcscore import pairwise_iou

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class APResult:
    box_ap: dict
    mask_ap: dict
    iou_thresholds: tuple
    class_agnostic: bool
    box_ap50: dict = field(default_factory=dict)
    mask_ap50: dict = field(default_factory=dict)

    @property
    def box_map(self):
        return float(np.mean(list(self.box_ap.values())))

    @property
    def mask_map(self):
        return float(np.mean(list(self.mask_ap.values())))

    def to_json(self):
        return {
            "protocol": "COCO-style, 101-point interpolation, greedy matching",
            "iou_thresholds": [float(t) for t in self.iou_thresholds],
            "class_agnostic": self.class_agnostic,
            "box_map": self.box_map,
            "mask_map": self.mask_map,
            "box_ap": {str(k): v for k, v in self.box_ap.items()},
            "mask_ap": {str(k): v for k, v in self.mask_ap.items()},
            "box_ap50": {str(k): v for k, v in self.box_ap50.items()},
            "mask_ap50": {str(k): v for k, v in self.mask_ap50.items()},
        }


def interpolated_ap(tp, n_gt):
    """101-point interpolated AP from TP flags in descending-confidence order."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    # correctly rounded sum: the result does not depend on summation order
    return math.fsum(q) / len(q)


def _class_ap(entries, thresholds, kind):
    """AP per threshold for one class. ``entries``: list of (dets, gts, shape) per scene."""
    n_gt = sum(len(g) for _, g, _ in entries)
    confs, scene_of, rank_in_scene = [], [], []
    for s, (dets, _, _) in enumerate(entries):
        for k, d in enumerate(dets):
            confs.append(-d.confidence)
            scene_of.append(s)
            rank_in_scene.append(k)
    order = np.argsort(np.array(confs, dtype=np.float64), kind="stable")
    # per-scene rows in the global confidence order
    per_scene_rows = {}
    for pos in order:
        per_scene_rows.setdefault(scene_of[pos], []).append(pos)
    ious = {}
    for s, rows in per_scene_rows.items():
        dets, gts, shape = entries[s]
        if gts:
            ious[s] = pairwise_iou([dets[rank_in_scene[p]] for p in rows], gts, kind, shape)
    out = []
    for t in thresholds:
        tp = np.zeros(len(order))
        flags = {}
        for s, rows in per_scene_rows.items():
            if s in ious:
                matched = greedy_match(ious[s], float(t))
                for p, g in zip(rows, matched):
                    flags[p] = g >= 0
        for i, pos in enumerate(order):
            tp[i] = 1.0 if flags.get(pos, False) else 0.0
        out.append(interpolated_ap(tp, n_gt))
    return out


class _GT:
    """Ground-truth instance as a detection-like object for IOU computation."""

    def __init__(self, label, box, mask):
        self.label, self.box, self.mask = label, box, mask


def average_precision(detections, ground_truth, iou_thresholds=COCO_THRESHOLDS, class_agnostic=False):
    """COCO-style AP over scenes.

    ``detections``: ``{scene_id: DetectionSet}``; ``ground_truth``:
    ``{scene_id: [InstanceGT, ...]}``. Scenes missing from ``detections``
    count as having no detections. Detections within one confidence level
    keep their (scene order, list order) position.
    """
    thresholds = tuple(float(t) for t in iou_thresholds)
    per_class = {}
    for sid, gts in ground_truth.items():
        dset = detections.get(sid)
        dets = list(dset.detections) if dset is not None else []
        if gts:
            shape = gts[0].mask.shape
        elif dset is not None:
            shape = tuple(dset.image_shape)
        else:
            continue
        labels = {0} if class_agnostic else {g.label for g in gts} | {d.label for d in dets}
        for c in labels:
            cd = [d for d in dets if class_agnostic or d.label == c]
            cg = [_GT(g.label, g.box, g.mask) for g in gts if class_agnostic or g.label == c]
            per_class.setdefault(c, []).append((cd, cg, shape))
    box_ap, mask_ap, box50, mask50 = {}, {}, {}, {}
    for c, entries in sorted(per_class.items()):
        if sum(len(g) for _, g, _ in entries) == 0:
            continue
        for kind, full, half in (("box", box_ap, box50), ("mask", mask_ap, mask50)):
            aps = _class_ap(entries, thresholds, kind)
            full[c] = float(np.mean(aps))
            half[c] = float(aps[0])
    if not box_ap:
        raise DataError("no ground truth instances in any scene")
    return APResult(box_ap, mask_ap, thresholds, class_agnostic, box50, mask50)
