"""Training with optional per-iteration modality dropout ("dynamic ensemble").

In ``dynamic_ensemble`` mode every iteration draws one input condition
(both / rgb_only / depth_only) for the whole batch and zeroes the dropped
modality's input; targets are unchanged. ``standard`` mode always trains on
both inputs.
"""
import configparser
import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from redundet.errors import DataError, DatasetError, NumericalError
from redundet.model import CONDITIONS, ArchConfig, Detector, condition_inputs, predict_batch, save_checkpoint

log = logging.getLogger(__name__)

ENSEMBLE_MODES = ("standard", "dynamic_ensemble")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestones: tuple = (20, 26)
    lr_gamma: float = 0.1
    seed: int = 0
    ensemble_mode: str = "dynamic_ensemble"
    condition_probs: tuple = (1 / 3, 1 / 3, 1 / 3)
    lambda_cls: float = 1.0
    lambda_obj: float = 1.0
    num_threads: int = 1
    select_best: bool = True
    tau_obj: float = 0.5
    min_area: int = 16
    channels: int = 32
    gate_lr_scale: float = 1.0

    def validate(self):
        if self.ensemble_mode not in ENSEMBLE_MODES:
            raise DataError(f"ensemble_mode must be one of {ENSEMBLE_MODES}")
        validate_distribution(self.condition_probs)
        if self.epochs < 1 or self.batch_size < 1:
            raise DataError("epochs and batch_size must be positive")

    @property
    def distribution(self):
        """Effective condition distribution; standard mode forces ``both``."""
        if self.ensemble_mode == "standard":
            return (1.0, 0.0, 0.0)
        return tuple(self.condition_probs)

    @classmethod
    def from_file(cls, path, section="train"):
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise DatasetError(f"config file not found: {path}")
        if section not in parser:
            raise DataError(f"config {path} has no [{section}] section")
        kwargs = {}
        defaults = cls()
        for key, value in parser[section].items():
            if not hasattr(defaults, key):
                raise DataError(f"unknown train option {key!r}")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                kwargs[key] = parser[section].getboolean(key)
            elif isinstance(current, tuple):
                cast = type(current[0])
                kwargs[key] = tuple(cast(v) for v in value.split(","))
            elif isinstance(current, str):
                kwargs[key] = value.strip()
            else:
                kwargs[key] = type(current)(value)
        return cls(**kwargs)


@dataclass
class TrainLog:
    iterations: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    checkpoint: str = ""
    best_epoch: int = -1

    def condition_counts(self):
        counts = {c: 0 for c in CONDITIONS}
        for rec in self.iterations:
            counts[rec["condition"]] += 1
        return counts

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "train_log.jsonl", "w") as fh:
            for rec in self.iterations:
                fh.write(json.dumps(rec) + "\n")
        summary = {"epochs": self.epochs, "checkpoint": self.checkpoint, "best_epoch": self.best_epoch}
        (directory / "train_summary.json").write_text(json.dumps(summary, indent=1))


def validate_distribution(probs):
    p = np.asarray(probs, dtype=float)
    if p.shape != (len(CONDITIONS),) or (p < 0).any() or not np.isclose(p.sum(), 1.0, atol=1e-9):
        raise DataError(f"condition distribution must be 3 non-negative weights summing to 1, got {probs}")
    return p / p.sum()


def sample_condition(rng, distribution=(1 / 3, 1 / 3, 1 / 3)):
    p = validate_distribution(distribution)
    return CONDITIONS[int(rng.choice(len(CONDITIONS), p=p))]


def rasterize_targets(instances, image_shape, stride=4):
    """Head-resolution targets: class id per cell (0 = background) and objectness.

    A cell is an object cell when masks cover at least half of it; its class
    is the label of the instance covering most of it (later instances win ties,
    as they are in front).
    """
    h, w = image_shape
    gh, gw = h // stride, w // stride
    cls = np.zeros((gh, gw), dtype=np.int64)
    best = np.zeros((gh, gw))
    total = np.zeros((gh, gw))
    for inst in instances:
        cover = inst.mask[: gh * stride, : gw * stride].reshape(gh, stride, gw, stride).mean(axis=(1, 3))
        total += cover
        take = (cover >= best) & (cover > 0)
        cls[take] = inst.label
        best = np.maximum(best, cover)
    obj = (total >= 0.5).astype(np.float64)
    cls[obj == 0] = 0
    return cls, obj


def dense_loss(cls_logits, obj_logits, cls_target, obj_target, lambda_cls=1.0, lambda_obj=1.0):
    """Returns ``(total, ce, bce)``: pixel-mean cross-entropy and objectness BCE."""
    ce = F.cross_entropy(cls_logits, cls_target)
    bce = F.binary_cross_entropy_with_logits(obj_logits[:, 0], obj_target)
    return lambda_cls * ce + lambda_obj * bce, ce, bce


def loss(cls_logits, obj_logits, scenes, config, stride=4):
    """Dense loss against ground truth rasterized from ``scenes``; returns ``(total, ce, bce)``."""
    targets = [rasterize_targets(s.instances, s.depth.shape, stride) for s in scenes]
    cls_t = torch.as_tensor(np.stack([t[0] for t in targets]))
    obj_t = torch.as_tensor(np.stack([t[1] for t in targets]), dtype=obj_logits.dtype)
    total, ce, bce = dense_loss(cls_logits, obj_logits, cls_t, obj_t, config.lambda_cls, config.lambda_obj)
    if not torch.isfinite(total):
        raise NumericalError("non-finite loss")
    return total, ce, bce


def scenes_to_tensors(scenes, stride=4, dtype=torch.float32):
    rgb = torch.as_tensor(np.stack([s.rgb.transpose(2, 0, 1) for s in scenes]), dtype=dtype)
    depth = torch.as_tensor(np.stack([s.depth[None] for s in scenes]), dtype=dtype)
    targets = [rasterize_targets(s.instances, s.depth.shape, stride) for s in scenes]
    cls = torch.as_tensor(np.stack([t[0] for t in targets]))
    obj = torch.as_tensor(np.stack([t[1] for t in targets]), dtype=dtype)
    return rgb, depth, cls, obj


def build_model(arch=None, seed=0):
    torch.manual_seed(seed)
    return Detector(arch or ArchConfig())


def _grad_norm(module):
    total = 0.0
    for p in module.parameters():
        if p.grad is not None:
            total += float(p.grad.double().pow(2).sum())
    return math.sqrt(total)


def evaluate_conditions(model, scenes, config, conditions=CONDITIONS, batch_size=16):
    """Class-agnostic box AP (0.50:0.95) per condition; used for model selection."""
    from redundet.metrics import average_precision

    out = {}
    model.eval()
    for cond in conditions:
        sets = {}
        for i in range(0, len(scenes), batch_size):
            chunk = scenes[i:i + batch_size]
            rgb, depth, _, _ = scenes_to_tensors(chunk, dtype=next(model.parameters()).dtype)
            dsets, _ = predict_batch(model, rgb, depth, cond, [s.scene_id for s in chunk],
                                     config.tau_obj, config.min_area)
            sets.update({d.scene_id: d for d in dsets})
        res = average_precision(sets, {s.scene_id: s.instances for s in scenes}, class_agnostic=True)
        out[cond] = res.box_map
    return out


def train(model, train_scenes, val_scenes, config, out_dir=None):
    """Momentum SGD with step decay; returns ``(model, TrainLog)``.

    Deterministic for a fixed config when run serially with a fixed thread
    count. With ``select_best`` the parameters from the best validation epoch
    are restored at the end.
    """
    config.validate()
    if not train_scenes:
        raise DataError("training split is empty")
    torch.set_num_threads(config.num_threads)
    torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)
    dtype = next(model.parameters()).dtype

    rgb, depth, cls_t, obj_t = scenes_to_tensors(train_scenes, model.arch.stride, dtype)
    n = rgb.shape[0]
    cond_rng = np.random.default_rng(config.seed)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dist = config.distribution

    gate_params = list(model.fusion.gates.parameters())
    gate_ids = {id(p) for p in gate_params}
    groups = [{"params": [p for p in model.parameters() if id(p) not in gate_ids]},
              {"params": gate_params, "lr": config.lr * config.gate_lr_scale}]
    opt = torch.optim.SGD(groups, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(config.lr_milestones),
                                                 gamma=config.lr_gamma)
    tlog = TrainLog()
    best_score, best_state = -1.0, None
    it = 0
    for epoch in range(config.epochs):
        model.train()
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = torch.as_tensor(order[start:start + config.batch_size])
            cond = sample_condition(cond_rng, dist) if config.ensemble_mode == "dynamic_ensemble" else "both"
            x_rgb, x_depth = condition_inputs(rgb[idx], depth[idx], cond)
            cls_logits, obj_logits, _ = model.dense(x_rgb, x_depth)
            total, ce, bce = dense_loss(cls_logits, obj_logits, cls_t[idx], obj_t[idx],
                                        config.lambda_cls, config.lambda_obj)
            if not torch.isfinite(total):
                raise NumericalError(f"non-finite loss at epoch {epoch} iteration {it} (condition {cond})")
            opt.zero_grad()
            total.backward()
            rec = {
                "iteration": it,
                "epoch": epoch,
                "condition": cond,
                "loss": total.item(),
                "loss_cls": ce.item(),
                "loss_obj": bce.item(),
                "grad_rgb": _grad_norm(model.backbones["rgb"]),
                "grad_depth": _grad_norm(model.backbones["depth"]),
            }
            opt.step()
            tlog.iterations.append(rec)
            losses.append(rec["loss"])
            it += 1
        sched.step()
        summary = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": opt.param_groups[0]["lr"]}
        if val_scenes:
            conds = CONDITIONS if config.ensemble_mode == "dynamic_ensemble" else ("both",)
            val_ap = evaluate_conditions(model, val_scenes, config, conds)
            summary["val_box_ap"] = val_ap
            score = float(np.mean(list(val_ap.values())))
            if config.select_best and score > best_score:
                best_score, best_state = score, copy.deepcopy(model.state_dict())
                tlog.best_epoch = epoch
        tlog.epochs.append(summary)
        log.info("epoch %d loss %.4f %s", epoch, summary["train_loss"], summary.get("val_box_ap", ""))

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt = out_dir / "model.ckpt"
        save_checkpoint(model, ckpt, {"train_config": asdict(config)})
        tlog.checkpoint = str(ckpt)
        tlog.write(out_dir)
    return model, tlog
