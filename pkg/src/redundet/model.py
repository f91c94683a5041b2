"""Toy two-stream RGB-D detector.

Per-modality convolutional backbones feed the soft-gate fusion; a dense head
on the finest fused level predicts per-pixel class distributions and
objectness, and connected components of that map become instances.
"""
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from redundet.errors import DatasetError, DataError, ShapeMismatchError
from redundet.fusion import SoftGateFusion
from redundet.kernels import label_components
from redundet.masks import mask_to_box, rle_decode, rle_encode, rle_to_list

CONDITIONS = ("both", "rgb_only", "depth_only")
MODALITIES = ("rgb", "depth")
MODALITY_CHANNELS = {"rgb": 3, "depth": 1}


@dataclass
class ArchConfig:
    channels: int = 32
    scales: int = 3
    num_classes: int = 6
    stem_channels: int = 16
    head_channels: int = 32

    @property
    def stride(self):
        return 4

    @property
    def divisor(self):
        return 2 ** (self.scales + 1)


@dataclass
class Detection:
    label: int
    confidence: float
    box: tuple
    mask: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, Detection)
            and self.label == other.label
            and self.confidence == other.confidence
            and tuple(self.box) == tuple(other.box)
            and np.array_equal(self.mask, other.mask)
        )


@dataclass
class DetectionSet:
    scene_id: str
    detections: list
    condition: str = "both"
    image_shape: tuple = (0, 0)

    def __len__(self):
        return len(self.detections)

    def to_json(self):
        h, w = self.image_shape
        return {
            "scene_id": self.scene_id,
            "condition": self.condition,
            "height": int(h),
            "width": int(w),
            "detections": [
                {
                    "label": int(d.label),
                    "confidence": float(d.confidence),
                    "box": [int(v) for v in d.box],
                    "mask_rle": rle_to_list(rle_encode(d.mask)),
                }
                for d in self.detections
            ],
        }

    @classmethod
    def from_json(cls, raw):
        try:
            shape = (int(raw["height"]), int(raw["width"]))
            dets = [
                Detection(
                    label=int(d["label"]),
                    confidence=float(d["confidence"]),
                    box=tuple(int(v) for v in d["box"]),
                    mask=rle_decode(d["mask_rle"], shape),
                )
                for d in raw["detections"]
            ]
            return cls(raw["scene_id"], dets, raw.get("condition", "both"), shape)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed detection set: {exc}") from exc


def save_detection_set(dset, path):
    Path(path).write_text(json.dumps(dset.to_json()))


def load_detection_set(path):
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"detection file not found: {path}")
    return DetectionSet.from_json(json.loads(path.read_text()))


def _conv_block(cin, cout, stride, groups=4):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.GroupNorm(groups, cout),
        nn.SiLU(),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(groups, cout),
        nn.SiLU(),
    )


class Backbone(nn.Module):
    """``scales + 1`` stride-2 stages; the last ``scales`` stages form the pyramid (strides 4, 8, 16...)."""

    def __init__(self, in_channels, arch):
        super().__init__()
        widths = [arch.stem_channels] + [arch.channels] * arch.scales
        stages, cin = [], in_channels
        for w in widths:
            stages.append(_conv_block(cin, w, 2))
            cin = w
        self.stages = nn.ModuleList(stages)
        self.divisor = arch.divisor

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ShapeMismatchError(f"input {h}x{w} not divisible by {self.divisor}")
        levels = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i > 0:
                levels.append(x)
        return levels


class DenseHead(nn.Module):
    def __init__(self, arch):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(arch.channels, arch.head_channels, 3, padding=1), nn.SiLU())
        self.cls = nn.Conv2d(arch.head_channels, arch.num_classes + 1, 1)
        self.obj = nn.Conv2d(arch.head_channels, 1, 1)

    def zero_init(self):
        for conv in (self.cls, self.obj):
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        h = self.body(x)
        return self.cls(h), self.obj(h)


class Detector(nn.Module):
    def __init__(self, arch=None):
        super().__init__()
        self.arch = arch or ArchConfig()
        self.backbones = nn.ModuleDict(
            {m: Backbone(MODALITY_CHANNELS[m], self.arch) for m in MODALITIES}
        )
        self.fusion = SoftGateFusion(len(MODALITIES), self.arch.channels, self.arch.scales)
        self.head = DenseHead(self.arch)
        self.head.zero_init()

    def dense(self, rgb, depth, gate_override=None):
        """Batched dense forward: ``(class_logits, objectness_logits, GateRecord)``.

        ``rgb`` is ``(B, 3, H, W)`` and ``depth`` ``(B, 1, H, W)``.
        """
        pyramids = [self.backbones["rgb"](rgb), self.backbones["depth"](depth)]
        fused, record = self.fusion(pyramids, gate_override)
        cls_logits, obj_logits = self.head(fused[0])
        return cls_logits, obj_logits, record


def head(fused, model):
    """Class probabilities (softmax over K+1) and objectness (sigmoid) at the finest level."""
    cls_logits, obj_logits = model.head(fused[0])
    return torch.softmax(cls_logits, dim=1), torch.sigmoid(obj_logits)


def backbone(x, modality, model):
    return model.backbones[modality](x)


def condition_inputs(rgb, depth, condition):
    """Zero the absent modality; ``None`` inputs are treated as absent."""
    if condition not in CONDITIONS:
        raise DataError(f"unknown condition {condition!r}")
    if rgb is None and depth is None:
        raise DataError("at least one modality must be supplied")
    ref = rgb if rgb is not None else depth
    b, h, w = ref.shape[0], ref.shape[-2], ref.shape[-1]
    if rgb is None:
        if condition != "depth_only":
            raise DataError(f"condition {condition} needs an RGB input")
        rgb = torch.zeros(b, 3, h, w, dtype=ref.dtype)
    if depth is None:
        if condition != "rgb_only":
            raise DataError(f"condition {condition} needs a depth input")
        depth = torch.zeros(b, 1, h, w, dtype=ref.dtype)
    if condition == "rgb_only":
        depth = torch.zeros_like(depth)
    elif condition == "depth_only":
        rgb = torch.zeros_like(rgb)
    return rgb, depth


def to_tensors(rgb, depth, dtype=torch.float32):
    """HxWx3 / HxW numpy arrays (or None) -> batched tensors of one item."""
    t_rgb = None if rgb is None else torch.as_tensor(np.asarray(rgb).transpose(2, 0, 1)[None], dtype=dtype)
    t_depth = None if depth is None else torch.as_tensor(np.asarray(depth)[None, None], dtype=dtype)
    return t_rgb, t_depth


def decode_instances(class_probs, objectness, image_shape, stride=4, tau_obj=0.5, min_area=16,
                     scene_id="", condition="both", labels=None, grouping="foreground"):
    """Connected-component decoding of one image's dense maps.

    ``class_probs`` is ``(K+1, h, w)`` with channel 0 the background,
    ``objectness`` ``(h, w)``. Pixels with objectness strictly above
    ``tau_obj`` are foreground. With ``grouping="foreground"`` (default) every
    8-connected foreground component is one instance labelled by the arg-max
    of its mean foreground class probabilities; ``grouping="class"`` instead
    splits components wherever the per-pixel arg-max class changes.
    Components are upsampled by ``stride`` (nearest) and dropped below
    ``min_area`` full-resolution pixels. Confidence is mean objectness times
    the winning class probability, both averaged over the component.
    """
    class_probs = np.asarray(class_probs, dtype=np.float64)
    objectness = np.asarray(objectness, dtype=np.float64)
    fg = objectness > tau_obj
    if grouping == "foreground":
        lab_map = np.where(fg, 0, -1)
    elif grouping == "class":
        lab_map = np.where(fg, class_probs[1:].argmax(axis=0) + 1, -1)
    else:
        raise ValueError(f"unknown grouping {grouping!r}")
    comps, n = label_components(lab_map)
    dets = []
    for c in range(1, n + 1):
        small = comps == c
        mask = np.kron(small, np.ones((stride, stride), dtype=bool))[: image_shape[0], : image_shape[1]]
        if mask.sum() < min_area:
            continue
        mean_probs = class_probs[1:, small].mean(axis=1)
        k = int(mean_probs.argmax()) + 1
        conf = float(objectness[small].mean() * mean_probs[k - 1])
        label = k if labels is None else int(labels[k - 1])
        dets.append(Detection(label, conf, mask_to_box(mask), mask))
    return DetectionSet(scene_id, dets, condition, tuple(image_shape))



def forward(model, rgb, depth, condition="both", tau_obj=0.5, min_area=16, scene_id="", grouping="foreground"):
    """Single-scene inference; returns ``(DetectionSet, GateRecord)``.

    ``rgb`` HxWx3 and ``depth`` HxW numpy arrays in [0, 1]; either may be
    ``None`` when the condition drops it.
    """
    dtype = next(model.parameters()).dtype
    t_rgb, t_depth = to_tensors(rgb, depth, dtype)
    t_rgb, t_depth = condition_inputs(t_rgb, t_depth, condition)
    with torch.no_grad():
        cls_logits, obj_logits, record = model.dense(t_rgb, t_depth)
        probs = torch.softmax(cls_logits, dim=1)[0].double().numpy()
        obj = torch.sigmoid(obj_logits)[0, 0].double().numpy()
    dset = decode_instances(probs, obj, t_rgb.shape[-2:], model.arch.stride, tau_obj, min_area,
                            scene_id, condition, grouping=grouping)
    return dset, record.detach()


def predict_batch(model, rgb, depth, condition, scene_ids, tau_obj=0.5, min_area=16, grouping="foreground"):
    """Batched inference over stacked tensors; returns a list of DetectionSets and the GateRecord."""
    rgb, depth = condition_inputs(rgb, depth, condition)
    with torch.no_grad():
        cls_logits, obj_logits, record = model.dense(rgb, depth)
        probs = torch.softmax(cls_logits, dim=1).double().numpy()
        obj = torch.sigmoid(obj_logits)[:, 0].double().numpy()
    shape = tuple(rgb.shape[-2:])
    sets = [
        decode_instances(probs[b], obj[b], shape, model.arch.stride, tau_obj, min_area, sid, condition,
                         grouping=grouping)
        for b, sid in enumerate(scene_ids)
    ]
    return sets, record.detach()


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"RDCKPT\x00\x01"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path, meta=None):
    """Versioned container: magic, version, JSON header length, header, raw tensors."""
    state = model.state_dict()
    entries, payload, offset = [], io.BytesIO(), 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(blob)})
        payload.write(blob)
        offset += len(blob)
    header = json.dumps({"arch": asdict(model.arch), "params": entries, "meta": meta or {}},
                        sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload.getvalue())


def load_checkpoint(path):
    """Return ``(model, meta)``."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != _CKPT_MAGIC:
        raise DatasetError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise DatasetError(f"{path}: checkpoint version {version} unsupported")
    header = json.loads(blob[16:16 + hlen])
    base = 16 + hlen
    model = Detector(ArchConfig(**header["arch"]))
    state = {}
    for e in header["params"]:
        raw = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise DatasetError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    dtype = state[next(iter(state))].dtype
    model.to(dtype)
    model.eval()
    return model, header.get("meta", {})
