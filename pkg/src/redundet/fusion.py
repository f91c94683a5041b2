"""Multi-scale soft-gate fusion of per-modality feature pyramids.

At every scale ``j`` each modality ``m`` gets a 1x1 convolution ``G_m`` over
the channel-concatenated features of *all* modalities; a softmax across the
modality axis turns the resulting logits into per-(channel, pixel) weights,
and each modality's features are scaled by its weights. The gated features
are concatenated and merged top-down by a small feature pyramid network.

Tensors are batched: a pyramid level is ``(B, C, H_j, W_j)`` and
``GateRecord`` stores ``(N, B, C, H_j, W_j)`` per scale.
"""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from redundet.errors import ShapeMismatchError


@dataclass
class GateRecord:
    """Gate weights and pre-softmax logits, one ``(N, B, C, H, W)`` tensor per scale."""

    weights: list
    logits: list

    @property
    def n_scales(self):
        return len(self.weights)

    @property
    def n_modalities(self):
        return self.weights[0].shape[0] if self.weights else 0

    def detach(self):
        return GateRecord([w.detach() for w in self.weights], [g.detach() for g in self.logits])


def _check_same_shape(tensors, what):
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"{what} shapes differ across modalities: {sorted(shapes)}")


def gate_logits(features, convs):
    """Per-modality logits ``g_m = G_m(concat(f_0, ..., f_{N-1}))``."""
    _check_same_shape(features, "gate input")
    if len(convs) != len(features):
        raise ShapeMismatchError(f"{len(convs)} gate convolutions for {len(features)} modalities")
    stacked = torch.cat(list(features), dim=1)
    return [conv(stacked) for conv in convs]


def gate_weights(logits):
    """Softmax across modalities at every (channel, pixel); returns ``(N, B, C, H, W)``."""
    _check_same_shape(logits, "gate logit")
    return torch.softmax(torch.stack(list(logits), dim=0), dim=0)


def apply_gates(features, weights):
    if len(features) != weights.shape[0]:
        raise ShapeMismatchError(f"{len(features)} feature maps for {weights.shape[0]} gate maps")
    for f, w in zip(features, weights):
        if f.shape != w.shape:
            raise ShapeMismatchError(f"feature {tuple(f.shape)} vs gate {tuple(w.shape)}")
    return [f * w for f, w in zip(features, weights)]


class PyramidMerge(nn.Module):
    """Top-down FPN merge: lateral 1x1, nearest upsample-and-add, 3x3 smoothing."""

    def __init__(self, in_channels, out_channels, n_levels):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(in_channels, out_channels, 1) for _ in range(n_levels))
        self.smooth = nn.ModuleList(
            nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in range(n_levels)
        )

    def forward(self, levels):
        lat = [conv(x) for conv, x in zip(self.lateral, levels)]
        out = [None] * len(lat)
        top = lat[-1]
        out[-1] = self.smooth[-1](top)
        for j in range(len(lat) - 2, -1, -1):
            top = lat[j] + F.interpolate(top, size=lat[j].shape[-2:], mode="nearest")
            out[j] = self.smooth[j](top)
        return out


class SoftGateFusion(nn.Module):
    """Gates every scale of ``n_modalities`` pyramids, then merges them into one."""

    def __init__(self, n_modalities, channels, n_scales, out_channels=None):
        super().__init__()
        if n_scales < 2:
            raise ValueError("soft-gate fusion needs at least two scales")
        self.n_modalities = n_modalities
        self.channels = channels
        out_channels = out_channels or channels
        self.gates = nn.ModuleList(
            nn.ModuleList(nn.Conv2d(n_modalities * channels, channels, 1) for _ in range(n_modalities))
            for _ in range(n_scales)
        )
        self.merge = PyramidMerge(n_modalities * channels, out_channels, n_scales)
        self.reset_gates()

    def reset_gates(self):
        # zero logits -> uniform 1/N weights at the start of training
        for scale in self.gates:
            for conv in scale:
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)

    def gate(self, pyramids, gate_override=None):
        """Return gated per-scale feature lists and the ``GateRecord``.

        ``gate_override`` (list of ``(N, B, C, H, W)`` weights per scale) bypasses
        the learned gates; used to test saturated gating.
        """
        if len(pyramids) != self.n_modalities:
            raise ShapeMismatchError(f"expected {self.n_modalities} pyramids, got {len(pyramids)}")
        n_levels = {len(p) for p in pyramids}
        if n_levels != {len(self.gates)}:
            raise ShapeMismatchError(f"pyramid depth {sorted(n_levels)} != {len(self.gates)} scales")
        gated, weights, logits = [], [], []
        for j, convs in enumerate(self.gates):
            feats = [p[j] for p in pyramids]
            g = gate_logits(feats, convs)
            w = gate_weights(g) if gate_override is None else gate_override[j]
            gated.append(apply_gates(feats, w))
            weights.append(w)
            logits.append(torch.stack(g, dim=0))
        return gated, GateRecord(weights, logits)

    def forward(self, pyramids, gate_override=None):
        gated, record = self.gate(pyramids, gate_override)
        fused = self.merge([torch.cat(g, dim=1) for g in gated])
        return fused, record


def fuse(pyramids, fusion, gate_override=None):
    """Functional entry point: ``(fused_levels, GateRecord)``."""
    return fusion(pyramids, gate_override)


def gate_heatmap(record, scale, modality, batch_index=0):
    """Channel-mean gate weight map for one scale and modality, as a numpy array."""
    if not 0 <= scale < record.n_scales:
        raise IndexError(f"scale {scale} out of range (0..{record.n_scales - 1})")
    if not 0 <= modality < record.n_modalities:
        raise IndexError(f"modality {modality} out of range (0..{record.n_modalities - 1})")
    w = record.weights[scale][modality, batch_index]
    return w.detach().double().mean(dim=0).cpu().numpy()


def scale_means(record, batch_index=None):
    """Mean gate weight per scale per modality, averaged over channels and pixels."""
    out = []
    for w in record.weights:
        w = w.detach().double()
        if batch_index is not None:
            w = w[:, batch_index:batch_index + 1]
        out.append(w.flatten(1).mean(dim=1).cpu().numpy())
    return np.array(out)


def export_gate_record(record, directory, modality_names=("rgb", "depth"), batch_index=0):
    """Write one 16-bit heatmap PNG per (scale, modality) plus ``gates.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for j in range(record.n_scales):
        for m in range(record.n_modalities):
            hm = gate_heatmap(record, j, m, batch_index)
            name = f"gate_s{j}_{modality_names[m]}.png"
            Image.fromarray(np.round(np.clip(hm, 0, 1) * 65535).astype(np.uint16)).save(directory / name)
            files.append(name)
    means = scale_means(record, batch_index)
    sidecar = {
        "modalities": list(modality_names[: record.n_modalities]),
        "scale_mean_weight": [
            {modality_names[m]: float(means[j, m]) for m in range(record.n_modalities)}
            for j in range(record.n_scales)
        ],
        "files": files,
    }
    (directory / "gates.json").write_text(json.dumps(sidecar, indent=1))
    return sidecar
