"""Synthetic RGB-D bin scenes and depth preprocessing.

Every object carries a *modality signature* that decides which sensor can
see it:

* ``rgb_dominant``   textured and coloured, but flat in depth
* ``depth_dominant`` background-coloured, but with a clear height profile
* ``balanced``       visible in both
* ``adversarial``    visible in both, with invalid (specular) depth patches

Raw depth is metric-like (background plane at ``background_depth``; larger
is farther) with ``NaN`` marking invalid returns.
"""
import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from redundet.errors import DatasetError, DataError, DegenerateDepthError, PlacementError
from redundet.kernels import diffusion_fill
from redundet.masks import mask_to_box, rle_decode, rle_encode, rle_to_list

INVALID = np.nan
SIGNATURES = ("rgb_dominant", "depth_dominant", "balanced", "adversarial")
SPLITS = ("train", "val", "test", "test_novel")
DATASET_VERSION = 1
BACKGROUND_GRAY = 0.45


@dataclass(frozen=True)
class ClassSpec:
    label: int
    name: str
    shape: str
    color: tuple
    profile: str
    novel: bool = False


DEFAULT_CATALOG = (
    ClassSpec(1, "block", "square", (0.85, 0.20, 0.15), "flat"),
    ClassSpec(2, "can", "disk", (0.15, 0.30, 0.90), "dome"),
    ClassSpec(3, "wedge", "triangle", (0.95, 0.85, 0.10), "pyramid"),
    ClassSpec(4, "tape", "ring", (0.10, 0.75, 0.20), "flat"),
    ClassSpec(5, "bracket", "cross", (0.90, 0.50, 0.05), "flat"),
    ClassSpec(6, "gem", "diamond", (0.60, 0.10, 0.80), "pyramid"),
    ClassSpec(7, "star", "star", (0.05, 0.85, 0.85), "dome", novel=True),
    ClassSpec(8, "moon", "crescent", (0.95, 0.40, 0.70), "dome", novel=True),
)


@dataclass
class GeneratorConfig:
    image_size: int = 128
    objects_min: int = 2
    objects_max: int = 5
    class_mix: dict = field(default_factory=lambda: {
        "rgb_dominant": 0.15,
        "depth_dominant": 0.10,
        "balanced": 0.60,
        "adversarial": 0.15,
    })
    size_min: float = 9.0
    size_max: float = 15.0
    rgb_noise: float = 0.03
    depth_noise: float = 0.0015
    background_depth: float = 1.0
    height_min: float = 0.03
    height_max: float = 0.08
    invalid_edge_rate: float = 0.05
    min_gap: int = 6
    max_attempts: int = 200
    n_scenes: int = 200
    n_novel: int = 20
    split_fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def validate(self):
        if self.image_size < 32:
            raise DataError(f"image_size must be >= 32, got {self.image_size}")
        if not 0 <= self.objects_min <= self.objects_max:
            raise DataError("need 0 <= objects_min <= objects_max")
        unknown = set(self.class_mix) - set(SIGNATURES)
        if unknown:
            raise DataError(f"unknown modality signatures in class_mix: {sorted(unknown)}")
        weights = np.array([self.class_mix.get(s, 0.0) for s in SIGNATURES], dtype=float)
        if (weights < 0).any() or weights.sum() <= 0:
            raise DataError("class_mix weights must be non-negative with a positive sum")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise DataError("split_fractions must sum to 1")
        if not 0 < self.size_min <= self.size_max:
            raise DataError("need 0 < size_min <= size_max")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_file(cls, path, section="generator"):
        """Read ``key = value`` pairs from an INI-style file section.

        ``class_mix`` is written as ``rgb_dominant:0.15, balanced:0.5, ...``
        and ``split_fractions`` as a comma separated list.
        """
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise DatasetError(f"config file not found: {path}")
        if section not in parser:
            raise DataError(f"config {path} has no [{section}] section")
        return cls.from_mapping(parser[section])

    @classmethod
    def from_mapping(cls, raw):
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if key not in types:
                raise DataError(f"unknown generator option {key!r}")
            if key == "class_mix":
                mix = {}
                for item in value.split(","):
                    name, _, weight = item.partition(":")
                    mix[name.strip()] = float(weight)
                kwargs[key] = mix
            elif key == "split_fractions":
                kwargs[key] = tuple(float(v) for v in value.split(","))
            elif types[key] in (int, "int"):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        return cls(**kwargs)


@dataclass
class InstanceGT:
    label: int
    mask: np.ndarray
    box: tuple
    modality_signature: str

    def __eq__(self, other):
        return (
            isinstance(other, InstanceGT)
            and self.label == other.label
            and self.box == other.box
            and self.modality_signature == other.modality_signature
            and np.array_equal(self.mask, other.mask)
        )


@dataclass
class SceneSample:
    scene_id: str
    rgb: np.ndarray
    depth_raw: np.ndarray
    depth: np.ndarray
    instances: list
    split: str = "train"

    @property
    def shape(self):
        return self.depth_raw.shape

    def __eq__(self, other):
        return (
            isinstance(other, SceneSample)
            and self.scene_id == other.scene_id
            and self.split == other.split
            and np.array_equal(self.rgb, other.rgb)
            and np.array_equal(self.depth_raw, other.depth_raw, equal_nan=True)
            and np.array_equal(self.depth, other.depth)
            and self.instances == other.instances
        )


@dataclass
class DatasetManifest:
    splits: dict
    classes: list
    config: dict
    config_hash: str
    seed: int
    root: str = ""
    version: int = DATASET_VERSION
    checksums: dict = field(default_factory=dict)

    @property
    def novel_labels(self):
        return {c["label"] for c in self.classes if c["novel"]}

    @property
    def known_labels(self):
        return sorted(c["label"] for c in self.classes if not c["novel"])

    def to_json(self):
        return {
            "version": self.version,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": self.config,
            "classes": self.classes,
            "splits": self.splits,
            "checksums": self.checksums,
        }


# ---------------------------------------------------------------------------
# depth preprocessing


def inpaint_invalid(depth, tol=1e-6, max_iter=10000):
    """Replace NaN pixels by 4-neighbour diffusion from the valid ones."""
    depth = np.asarray(depth, dtype=np.float64)
    invalid = ~np.isfinite(depth)
    if invalid.all():
        raise DegenerateDepthError("depth map has no valid pixels")
    if not invalid.any():
        return depth.copy()
    filled, _ = diffusion_fill(np.where(invalid, 0.0, depth), invalid, tol, max_iter)
    return filled


def preprocess_depth(depth_raw):
    """Inpaint, min-max normalise and flip so the farthest depth is 0 and the nearest 1."""
    filled = inpaint_invalid(depth_raw)
    lo, hi = filled.min(), filled.max()
    if not hi > lo:
        raise DegenerateDepthError("depth map is constant; cannot min-max normalise")
    return 1.0 - (filled - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# scene generation


def _shape_mask(shape, yy, xx, cy, cx, r, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    rho2 = u * u + v * v
    if shape == "square":
        return (np.abs(u) <= 0.8 * r) & (np.abs(v) <= 0.8 * r)
    if shape == "disk":
        return rho2 <= r * r
    if shape == "triangle":
        inside = v <= 0.5 * r
        for ang in (np.pi / 6, 5 * np.pi / 6):
            inside &= (u * np.cos(ang) - v * np.sin(ang)) <= 0.5 * r
        return inside
    if shape == "ring":
        return (rho2 <= r * r) & (rho2 >= (0.5 * r) ** 2)
    if shape == "cross":
        arm = 0.35 * r
        return ((np.abs(u) <= r) & (np.abs(v) <= arm)) | ((np.abs(v) <= r) & (np.abs(u) <= arm))
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.1 * r
    if shape == "star":
        phi = np.arctan2(v, u)
        return np.sqrt(rho2) <= r * (0.6 + 0.4 * np.cos(5 * phi))
    if shape == "crescent":
        return (rho2 <= r * r) & ((u - 0.45 * r) ** 2 + v * v > (0.75 * r) ** 2)
    raise ValueError(f"unknown shape {shape!r}")


def _height_profile(profile, yy, xx, cy, cx, r, height):
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / r
    if profile == "flat":
        return np.full(yy.shape, height)
    if profile == "dome":
        return height * (0.4 + 0.6 * np.sqrt(np.clip(1.0 - dist ** 2, 0.0, 1.0)))
    if profile == "pyramid":
        cheb = np.maximum(np.abs(yy - cy), np.abs(xx - cx)) / r
        return height * (0.4 + 0.6 * np.clip(1.0 - cheb, 0.0, 1.0))
    raise ValueError(f"unknown height profile {profile!r}")


def _dilate(mask, radius):
    if radius <= 0:
        return mask
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            src = mask[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
            out[max(0, dy):h - max(0, -dy), max(0, dx):w - max(0, -dx)] |= src
    return out


def generate_scene(config=None, seed=0, split="train", scene_id=None, catalog=DEFAULT_CATALOG):
    """Render one scene; a pure function of ``(config, seed, split)``.

    Scenes in the ``test_novel`` split contain at least one novel-class
    object; all other splits draw only from known classes.
    """
    config = config or GeneratorConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    size = config.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    known = [c for c in catalog if not c.novel]
    novel = [c for c in catalog if c.novel]
    sig_weights = np.array([config.class_mix.get(s, 0.0) for s in SIGNATURES], dtype=float)
    sig_weights /= sig_weights.sum()

    rgb = np.full((size, size, 3), BACKGROUND_GRAY)
    height_map = np.zeros((size, size))
    invalid = np.zeros((size, size), dtype=bool)
    occupied = np.zeros((size, size), dtype=bool)
    instances = []

    n_objects = int(rng.integers(config.objects_min, config.objects_max + 1))
    for k in range(n_objects):
        if split == "test_novel" and (k == 0 or rng.random() < 0.5):
            spec = novel[int(rng.integers(len(novel)))]
        else:
            spec = known[int(rng.integers(len(known)))]
        signature = SIGNATURES[int(rng.choice(len(SIGNATURES), p=sig_weights))]

        for _ in range(config.max_attempts):
            r = rng.uniform(config.size_min, config.size_max)
            theta = rng.uniform(0.0, 2 * np.pi)
            margin = r + 2
            if 2 * margin >= size - 1:
                continue
            cy = rng.uniform(margin, size - 1 - margin)
            cx = rng.uniform(margin, size - 1 - margin)
            mask = _shape_mask(spec.shape, yy, xx, cy, cx, r, theta)
            if mask.sum() < 16:
                continue
            if not (_dilate(mask, config.min_gap) & occupied).any():
                break
        else:
            raise PlacementError(
                f"could not place object {k + 1}/{n_objects} without overlap "
                f"after {config.max_attempts} attempts"
            )
        occupied |= mask

        color = np.array(spec.color)
        if signature == "rgb_dominant":
            # class-specific stripe texture, no height
            freq = 0.35 + 0.05 * spec.label
            stripes = (np.sin(freq * (xx * np.cos(theta) + yy * np.sin(theta))) > 0)[..., None]
            tex = np.where(stripes, color, 0.55 * color)
            rgb[mask] = tex[mask]
        elif signature == "depth_dominant":
            rgb[mask] = BACKGROUND_GRAY - 0.02
        else:
            rgb[mask] = 0.75 * color + 0.25 * BACKGROUND_GRAY

        if signature != "rgb_dominant":
            height = rng.uniform(config.height_min, config.height_max)
            prof = _height_profile(spec.profile, yy, xx, cy, cx, r, height)
            height_map[mask] = prof[mask]

        if signature == "adversarial":
            pr = rng.uniform(0.4, 0.7) * r
            py = cy + rng.uniform(-0.4, 0.4) * r
            px = cx + rng.uniform(-0.4, 0.4) * r
            invalid |= mask & ((yy - py) ** 2 + (xx - px) ** 2 <= pr * pr)

        edge = mask & ~_erode(mask)
        invalid |= edge & (rng.random((size, size)) < config.invalid_edge_rate)

        instances.append(InstanceGT(spec.label, mask, mask_to_box(mask), signature))

    rgb = rgb + rng.normal(0.0, config.rgb_noise, rgb.shape)
    rgb = np.round(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0

    depth = config.background_depth - height_map
    depth = depth + rng.normal(0.0, config.depth_noise, depth.shape)
    depth_raw = depth.astype(np.float32)
    depth_raw[invalid] = INVALID

    sid = scene_id if scene_id is not None else f"scene_{seed}"
    return SceneSample(sid, rgb, depth_raw, preprocess_depth(depth_raw), instances, split)


def _erode(mask):
    return ~_dilate(~mask, 1)


def _scene_seed(base, index, novel):
    return int(np.random.SeedSequence([base, index, int(novel)]).generate_state(1)[0])


def generate_dataset(config, catalog=DEFAULT_CATALOG):
    """Build ``n_scenes`` known-class scenes split train/val/test plus ``n_novel`` novel scenes."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(config.n_scenes)
    n_train = int(round(config.split_fractions[0] * config.n_scenes))
    n_val = int(round(config.split_fractions[1] * config.n_scenes))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[int(idx)] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"

    scenes = []
    splits = {s: [] for s in SPLITS}
    for i in range(config.n_scenes):
        sid = f"scene_{i:05d}"
        scene = generate_scene(config, _scene_seed(config.seed, i, False), split_of[i], sid, catalog)
        scenes.append(scene)
        splits[scene.split].append(sid)
    for i in range(config.n_novel):
        sid = f"novel_{i:05d}"
        scene = generate_scene(config, _scene_seed(config.seed, i, True), "test_novel", sid, catalog)
        scenes.append(scene)
        splits["test_novel"].append(sid)

    manifest = DatasetManifest(
        splits=splits,
        classes=[
            {"label": c.label, "name": c.name, "shape": c.shape, "novel": c.novel} for c in catalog
        ],
        config=config.to_dict(),
        config_hash=config.config_hash(),
        seed=config.seed,
    )
    return manifest, scenes


# ---------------------------------------------------------------------------
# persistence

_DEPTH_MAGIC = b"RDEPTH01"


def _write_depth_raw(path, depth_raw):
    h, w = depth_raw.shape
    with open(path, "wb") as fh:
        fh.write(_DEPTH_MAGIC)
        fh.write(np.array([h, w], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(depth_raw, dtype="<f4").tobytes())


def _read_depth_raw(path):
    blob = Path(path).read_bytes()
    if blob[:8] != _DEPTH_MAGIC:
        raise DatasetError(f"{path}: not a raw depth file")
    h, w = np.frombuffer(blob[8:16], dtype="<u4")
    data = np.frombuffer(blob[16:], dtype="<f4")
    if data.size != h * w:
        raise DatasetError(f"{path}: payload size does not match header {h}x{w}")
    return data.reshape(int(h), int(w)).astype(np.float32)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


_SCENE_FILES = ("rgb.png", "depth_raw.bin", "depth.png", "annotations.json")


def write_scene(scene, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(scene.rgb * 255.0).astype(np.uint8), mode="RGB").save(directory / "rgb.png")
    _write_depth_raw(directory / "depth_raw.bin", scene.depth_raw)
    depth16 = np.round(scene.depth * 65535.0).astype(np.uint16)
    Image.fromarray(depth16).save(directory / "depth.png")
    ann = {
        "scene_id": scene.scene_id,
        "split": scene.split,
        "height": int(scene.depth_raw.shape[0]),
        "width": int(scene.depth_raw.shape[1]),
        "instances": [
            {
                "label": int(inst.label),
                "box": [int(v) for v in inst.box],
                "mask": rle_to_list(rle_encode(inst.mask)),
                "modality_signature": inst.modality_signature,
            }
            for inst in scene.instances
        ],
    }
    (directory / "annotations.json").write_text(json.dumps(ann))
    return {name: _sha256(directory / name) for name in _SCENE_FILES}


def read_scene(directory, checksums=None):
    directory = Path(directory)
    for name in _SCENE_FILES:
        if not (directory / name).exists():
            raise DatasetError(f"scene file missing: {directory / name}")
        if checksums is not None and _sha256(directory / name) != checksums.get(name):
            raise DatasetError(f"checksum mismatch for {directory / name}")
    ann = json.loads((directory / "annotations.json").read_text())
    shape = (ann["height"], ann["width"])
    rgb = np.asarray(Image.open(directory / "rgb.png").convert("RGB"), dtype=np.float64) / 255.0
    depth_raw = _read_depth_raw(directory / "depth_raw.bin")
    instances = [
        InstanceGT(
            label=i["label"],
            mask=rle_decode(i["mask"], shape),
            box=tuple(i["box"]),
            modality_signature=i["modality_signature"],
        )
        for i in ann["instances"]
    ]
    return SceneSample(ann["scene_id"], rgb, depth_raw, preprocess_depth(depth_raw), instances, ann["split"])


def write_dataset(manifest, scenes, root):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    novel = manifest.novel_labels
    checksums = {}
    for scene in scenes:
        if scene.split != "test_novel" and any(i.label in novel for i in scene.instances):
            raise DataError(f"{scene.scene_id}: novel class outside the test_novel split")
        checksums[scene.scene_id] = write_scene(scene, root / scene.split / scene.scene_id)
    manifest.checksums = checksums
    manifest.root = str(root)
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest.to_json(), indent=1))
    os.replace(tmp, root / "manifest.json")
    return manifest


def load_manifest(root):
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise DatasetError(f"manifest missing: {path}")
    raw = json.loads(path.read_text())
    if raw.get("version") != DATASET_VERSION:
        raise DatasetError(f"dataset version {raw.get('version')} != supported {DATASET_VERSION}")
    return DatasetManifest(
        splits=raw["splits"],
        classes=raw["classes"],
        config=raw["config"],
        config_hash=raw["config_hash"],
        seed=raw["seed"],
        root=str(root),
        version=raw["version"],
        checksums=raw.get("checksums", {}),
    )


def load_dataset(root, splits=None):
    """Return ``(manifest, scenes)`` where ``scenes`` lazily yields ``SceneSample`` objects."""
    manifest = load_manifest(root)
    wanted = SPLITS if splits is None else tuple(splits)

    def scenes():
        for split in wanted:
            for sid in manifest.splits.get(split, []):
                yield read_scene(Path(root) / split / sid, manifest.checksums.get(sid))

    return manifest, scenes()


def load_split(root, split):
    return list(load_dataset(root, [split])[1])
