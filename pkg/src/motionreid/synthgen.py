"""Procedural articulated-sprite pedestrian dataset.

Each identity is a 2-D skeleton sprite (torso, head, two-segment arms and
legs) with per-identity colors, proportions, and an optional shirt stripe
texture. Poses articulate every joint within configured limits; occluders
are textured rectangles/ellipses drawn on top. Renders carry ground-truth
part masks and occluder masks written from the same geometry as the pixels,
which gives the segmentation branch an objective reference.

Two virtual cameras differ in background texture and lighting gain so the
standard cross-camera retrieval protocol is exercised. Generation is a pure
function of (config, seed): every record derives its own RNG stream from
(seed, stream tag, index), so parallel workers produce identical output.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, SamplingError

PART_NAMES = (
    "torso", "head",
    "left_upper_arm", "left_lower_arm",
    "right_upper_arm", "right_lower_arm",
    "left_upper_leg", "left_lower_leg",
    "right_upper_leg", "right_lower_leg",
)
NUM_PARTS = len(PART_NAMES)

# painter's order: far limbs first, head last
_DRAW_ORDER = (
    "right_upper_leg", "right_lower_leg", "left_upper_leg", "left_lower_leg",
    "torso",
    "right_upper_arm", "right_lower_arm", "left_upper_arm", "left_lower_arm",
    "head",
)

CAMERA_GAINS = (1.0, 1.18)


@dataclass
class GenConfig:
    """Dataset generation settings."""

    num_identities: int = 50
    images_per_identity: int = 16
    image_size: tuple[int, int] = (64, 32)   # (H, W)
    occlusion_prob: float = 0.5
    train_id_fraction: float = 0.6
    # articulation limits (radians unless noted)
    lean_range: float = 0.12
    head_tilt_range: float = 0.25
    shoulder_range: float = 0.55
    elbow_range: float = 1.0
    hip_range: float = 0.45
    knee_range: float = 0.8
    scale_range: tuple[float, float] = (0.85, 1.05)
    root_jitter: float = 0.08                # fraction of image size

    def validate(self) -> None:
        if self.num_identities < 1:
            raise ConfigurationError("num_identities must be >= 1")
        if self.images_per_identity < 1:
            raise ConfigurationError("images_per_identity must be >= 1")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ConfigurationError(
                f"occlusion_prob must lie in [0, 1], got {self.occlusion_prob}")
        if min(self.image_size) < 8:
            raise ConfigurationError("image_size is too small to render a sprite")


@dataclass
class SpriteIdentity:
    id_label: int
    appearance: dict[str, object]        # colors and stripe texture parameters
    body_proportions: dict[str, float]   # limb lengths/widths, image-height units


@dataclass
class PoseParams:
    joint_angles: dict[str, float]
    root_position: tuple[float, float]   # (x, y) in [0, 1] image fractions
    scale: float


@dataclass
class ImageSample:
    image: np.ndarray          # (H, W, 3) float32 in [0, 1]
    id_label: int
    gt_part_masks: np.ndarray  # (NUM_PARTS, H, W) bool, mutually disjoint
    occluder_mask: np.ndarray  # (H, W) bool
    pose: PoseParams


@dataclass
class Record:
    path: str
    id_label: int
    camera: int


@dataclass
class DatasetManifest:
    """All three splits of one generated dataset.

    Train identities are disjoint from query/gallery identities; query and
    gallery share identities but never share an image.
    """

    generation_seed: int
    splits: dict[str, list[Record]] = field(default_factory=dict)

    def records(self, split: str) -> list[Record]:
        return self.splits[split]

    @property
    def all_records(self) -> list[Record]:
        return [r for split in ("train", "query", "gallery")
                for r in self.splits.get(split, [])]


# -- identity / pose sampling -------------------------------------------------


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, float(np.clip(s, 0, 1)),
                                        float(np.clip(v, 0, 1))))


def sample_identity(seed: int, id_label: int) -> SpriteIdentity:
    rng = np.random.default_rng([seed, 0, id_label])
    shirt = _hsv(rng.uniform(), rng.uniform(0.55, 1.0), rng.uniform(0.5, 0.95))
    pants = _hsv(rng.uniform(), rng.uniform(0.45, 1.0), rng.uniform(0.35, 0.9))
    skin = _hsv(rng.uniform(0.05, 0.11), rng.uniform(0.3, 0.6), rng.uniform(0.5, 0.95))
    appearance = {
        "shirt": shirt,
        "arm": shirt * rng.uniform(0.75, 0.95),
        "forearm": skin if rng.uniform() < 0.5 else shirt * 0.85,
        "pants": pants,
        "shin": pants * rng.uniform(0.55, 0.8),
        "skin": skin,
        "stripe": bool(rng.uniform() < 0.5),
        "stripe_period": int(rng.integers(3, 6)),
        "stripe_shade": float(rng.uniform(0.5, 0.75)),
    }
    proportions = {
        "torso_len": rng.uniform(0.26, 0.31),
        "torso_w": rng.uniform(0.085, 0.115),
        "head_r": rng.uniform(0.06, 0.075),
        "uarm_len": rng.uniform(0.125, 0.155),
        "larm_len": rng.uniform(0.11, 0.14),
        "arm_w": rng.uniform(0.028, 0.04),
        "uleg_len": rng.uniform(0.15, 0.18),
        "lleg_len": rng.uniform(0.13, 0.16),
        "leg_w": rng.uniform(0.04, 0.055),
        "shoulder_hw": rng.uniform(0.045, 0.06),
        "hip_hw": rng.uniform(0.028, 0.04),
    }
    return SpriteIdentity(id_label=id_label, appearance=appearance,
                          body_proportions=proportions)


def sample_pose(rng: np.random.Generator, cfg: GenConfig) -> PoseParams:
    u = rng.uniform
    angles = {
        "lean": u(-cfg.lean_range, cfg.lean_range),
        "head_tilt": u(-cfg.head_tilt_range, cfg.head_tilt_range),
        "shoulder_l": u(-cfg.shoulder_range, cfg.shoulder_range),
        "shoulder_r": u(-cfg.shoulder_range, cfg.shoulder_range),
        "elbow_l": u(0.0, cfg.elbow_range),
        "elbow_r": u(0.0, cfg.elbow_range),
        "hip_l": u(-cfg.hip_range, cfg.hip_range),
        "hip_r": u(-cfg.hip_range, cfg.hip_range),
        "knee_l": u(0.0, cfg.knee_range),
        "knee_r": u(0.0, cfg.knee_range),
    }
    root = (0.5 + u(-cfg.root_jitter, cfg.root_jitter),
            0.56 + u(-cfg.root_jitter / 2, cfg.root_jitter / 2))
    return PoseParams(joint_angles=angles, root_position=root,
                      scale=u(*cfg.scale_range))


# -- rasterization ------------------------------------------------------------


def _pixel_grid(h: int, w: int):
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _capsule_mask(xs, ys, p0, p1, radius):
    """Pixels within ``radius`` of segment p0-p1 (all in pixel units)."""
    d = np.array(p1) - np.array(p0)
    den = float(d @ d)
    px = xs - p0[0]
    py = ys - p0[1]
    if den < 1e-12:
        t = np.zeros_like(px)
    else:
        t = np.clip((px * d[0] + py * d[1]) / den, 0.0, 1.0)
    cx = px - t * d[0]
    cy = py - t * d[1]
    return cx * cx + cy * cy <= radius * radius


def _skeleton_segments(identity: SpriteIdentity, pose: PoseParams,
                       h: int, w: int) -> dict[str, tuple]:
    """Joint chain -> per-part (p0, p1, radius) in pixel units.

    Joint angles are measured from straight down; each distal segment adds
    its bend to the parent direction.
    """
    pr = identity.body_proportions
    a = pose.joint_angles
    s = pose.scale * h

    def down(theta):
        return np.array([math.sin(theta), math.cos(theta)])

    pelvis = np.array([pose.root_position[0] * w, pose.root_position[1] * h])
    up = -down(a["lean"])
    neck = pelvis + up * pr["torso_len"] * s
    perp = np.array([up[1], -up[0]])  # points to the sprite's left on screen

    head_c = neck + (-down(a["lean"] + a["head_tilt"])) * (pr["head_r"] * s * 1.35)
    segs: dict[str, tuple] = {
        "torso": (pelvis, neck, pr["torso_w"] * s),
        "head": (head_c, head_c, pr["head_r"] * s),
    }
    for side, sign in (("l", 1.0), ("r", -1.0)):
        shoulder = neck + perp * sign * pr["shoulder_hw"] * s
        d_ua = down(a[f"shoulder_{side}"] * sign)
        elbow = shoulder + d_ua * pr["uarm_len"] * s
        d_la = down(a[f"shoulder_{side}"] * sign + a[f"elbow_{side}"] * sign)
        wrist = elbow + d_la * pr["larm_len"] * s
        hip = pelvis + perp * sign * pr["hip_hw"] * s
        d_ul = down(a[f"hip_{side}"] * sign)
        knee = hip + d_ul * pr["uleg_len"] * s
        d_ll = down(a[f"hip_{side}"] * sign + a[f"knee_{side}"] * sign)
        ankle = knee + d_ll * pr["lleg_len"] * s
        name = "left" if side == "l" else "right"
        segs[f"{name}_upper_arm"] = (shoulder, elbow, pr["arm_w"] * s)
        segs[f"{name}_lower_arm"] = (elbow, wrist, pr["arm_w"] * s * 0.9)
        segs[f"{name}_upper_leg"] = (hip, knee, pr["leg_w"] * s)
        segs[f"{name}_lower_leg"] = (knee, ankle, pr["leg_w"] * s * 0.85)
    return segs


_PART_COLOR_KEY = {
    "torso": "shirt", "head": "skin",
    "left_upper_arm": "arm", "right_upper_arm": "arm",
    "left_lower_arm": "forearm", "right_lower_arm": "forearm",
    "left_upper_leg": "pants", "right_upper_leg": "pants",
    "left_lower_leg": "shin", "right_lower_leg": "shin",
}


def _background(camera: int, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    if camera == 0:
        base = 0.18 + 0.14 * (ys / max(h - 1, 1))
        img = np.stack([base * 0.95, base, base * 1.08], axis=-1)
    else:
        base = 0.24 + 0.13 * (xs / max(w - 1, 1))
        img = np.stack([base * 1.08, base, base * 0.9], axis=-1)
    img = img + rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _occluder(h: int, w: int, rng: np.random.Generator):
    """Random textured rectangle or ellipse; returns (rgb, mask)."""
    ow = rng.uniform(0.35, 0.8) * w
    oh = rng.uniform(0.2, 0.45) * h
    cx = rng.uniform(0.15, 0.85) * w
    cy = rng.uniform(0.35, 0.9) * h
    xs, ys = _pixel_grid(h, w)
    if rng.uniform() < 0.5:
        mask = (np.abs(xs - cx) <= ow / 2) & (np.abs(ys - cy) <= oh / 2)
    else:
        mask = ((xs - cx) / (ow / 2)) ** 2 + ((ys - cy) / (oh / 2)) ** 2 <= 1.0
    color = _hsv(rng.uniform(), rng.uniform(0.2, 0.8), rng.uniform(0.25, 0.8))
    fill = np.broadcast_to(color, (h, w, 3)).copy()
    if rng.uniform() < 0.5:
        stripes = ((xs + ys) // max(2, int(rng.integers(2, 5)))) % 2 == 0
        fill[stripes] *= 0.6
    else:
        fill *= rng.uniform(0.75, 1.1, size=(h, w, 1))
    return np.clip(fill, 0, 1), mask


def render_sample(identity: SpriteIdentity, pose: PoseParams, camera: int,
                  rng: np.random.Generator, cfg: GenConfig,
                  occluded: bool) -> ImageSample:
    """Rasterize one sprite with its part label map and optional occluder."""
    h, w = cfg.image_size
    xs, ys = _pixel_grid(h, w)
    img = _background(camera, h, w, rng)
    labels = np.zeros((h, w), dtype=np.int8)  # 0 = background, 1.. = part index

    segs = _skeleton_segments(identity, pose, h, w)
    app = identity.appearance
    for name in _DRAW_ORDER:
        p0, p1, radius = segs[name]
        mask = _capsule_mask(xs, ys, p0, p1, radius)
        color = np.array(app[_PART_COLOR_KEY[name]], dtype=float)
        img[mask] = color
        if name == "torso" and app["stripe"]:
            stripes = mask & ((ys.astype(int) // app["stripe_period"]) % 2 == 0)
            img[stripes] = color * app["stripe_shade"]
        labels[mask] = PART_NAMES.index(name) + 1

    occ_mask = np.zeros((h, w), dtype=bool)
    if occluded:
        fill, occ_mask = _occluder(h, w, rng)
        img[occ_mask] = fill[occ_mask]
        labels[occ_mask] = 0

    img = img * CAMERA_GAINS[camera] * rng.uniform(0.97, 1.03)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    part_masks = np.stack([labels == i + 1 for i in range(NUM_PARTS)])
    return ImageSample(image=img, id_label=identity.id_label,
                       gt_part_masks=part_masks, occluder_mask=occ_mask, pose=pose)


# -- dataset assembly ---------------------------------------------------------


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def mask_paths(image_path: str) -> tuple[str, str]:
    """Part-label and occluder mask paths conventionally paired to an image."""
    p = Path(image_path)
    rel = p.parent.name
    stem = p.stem
    return (str(Path("masks") / rel / f"{stem}_parts.png"),
            str(Path("masks") / rel / f"{stem}_occ.png"))


def build_dataset(config: GenConfig, out_dir: str | Path, seed: int) -> DatasetManifest:
    """Generate and write the full dataset; deterministic given ``seed``.

    Writes images and masks as PNG plus one JSON manifest per split
    ({split, seed, records:[{path, id, camera}]}). Returns the combined
    manifest object.
    """
    config.validate()
    out = Path(out_dir)
    n = config.num_identities
    m = config.images_per_identity
    n_train = max(1, round(config.train_id_fraction * n))
    if n >= 2:
        n_train = min(n_train, n - 1)
    train_ids = list(range(n_train))
    eval_ids = list(range(n_train, n))

    manifest = DatasetManifest(generation_seed=seed,
                               splits={"train": [], "query": [], "gallery": []})
    for split in ("train", "query", "gallery"):
        (out / "images" / split).mkdir(parents=True, exist_ok=True)
        (out / "masks" / split).mkdir(parents=True, exist_ok=True)

    def emit(id_label: int, img_idx: int, split: str) -> None:
        global_idx = id_label * m + img_idx
        rng = np.random.default_rng([seed, 1, global_idx])
        identity = sample_identity(seed, id_label)
        pose = sample_pose(rng, config)
        camera = img_idx % 2
        occluded = bool(rng.uniform() < config.occlusion_prob)
        sample = render_sample(identity, pose, camera, rng, config, occluded)

        rel = str(Path("images") / split / f"{id_label:04d}_{img_idx:02d}_c{camera}.png")
        parts_rel, occ_rel = mask_paths(rel)
        Image.fromarray(_quantize(sample.image)).save(out / rel)
        label_map = np.zeros(config.image_size, dtype=np.uint8)
        for i in range(NUM_PARTS):
            label_map[sample.gt_part_masks[i]] = i + 1
        Image.fromarray(label_map, mode="L").save(out / parts_rel)
        Image.fromarray((sample.occluder_mask * 255).astype(np.uint8),
                        mode="L").save(out / occ_rel)
        manifest.splits[split].append(Record(path=rel, id_label=id_label,
                                             camera=camera))

    for id_label in train_ids:
        for img_idx in range(m):
            emit(id_label, img_idx, "train")
    for id_label in eval_ids:
        for img_idx in range(m):
            emit(id_label, img_idx, "query" if img_idx < m // 2 else "gallery")

    for split, records in manifest.splits.items():
        payload = {"split": split, "seed": seed,
                   "records": [{"path": r.path, "id": r.id_label,
                                "camera": r.camera} for r in records]}
        (out / f"{split}.json").write_text(json.dumps(payload, indent=1))
    return manifest


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    manifest = DatasetManifest(generation_seed=-1, splits={})
    for split in ("train", "query", "gallery"):
        payload = json.loads((root / f"{split}.json").read_text())
        manifest.generation_seed = payload["seed"]
        manifest.splits[split] = [
            Record(path=r["path"], id_label=r["id"], camera=r["camera"])
            for r in payload["records"]]
    return manifest


def load_image(root: str | Path, record: Record) -> np.ndarray:
    arr = np.asarray(Image.open(Path(root) / record.path), dtype=np.float32)
    return arr / 255.0


def load_occluder_mask(root: str | Path, record: Record) -> np.ndarray:
    _, occ_rel = mask_paths(record.path)
    return np.asarray(Image.open(Path(root) / occ_rel)) > 0


def load_part_masks(root: str | Path, record: Record) -> np.ndarray:
    parts_rel, _ = mask_paths(record.path)
    labels = np.asarray(Image.open(Path(root) / parts_rel))
    return np.stack([labels == i + 1 for i in range(NUM_PARTS)])


# -- batching -----------------------------------------------------------------


@dataclass
class Batch:
    """P identity groups of four images; index 0 of each group is the
    feature-consistency reference."""

    images: np.ndarray   # (4P, H, W, 3) float32
    labels: np.ndarray   # (4P,) original id labels
    records: list[Record]

    @property
    def num_groups(self) -> int:
        return self.labels.shape[0] // 4


def group_by_identity(records: list[Record]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.id_label, []).append(i)
    return groups


def sample_quadruplet_groups(groups: dict[int, list[int]], num_ids: int,
                             rng: np.random.Generator) -> list[list[int]]:
    """Pick ``num_ids`` identities and four distinct record indices each."""
    ids = sorted(groups)
    if num_ids > len(ids):
        raise SamplingError(
            f"requested {num_ids} identities but only {len(ids)} available")
    short = [i for i in ids if len(groups[i]) < 4]
    if short:
        raise SamplingError(
            f"identity {short[0]} has only {len(groups[short[0]])} images; "
            "quadruplet sampling needs at least 4")
    chosen = rng.choice(len(ids), size=num_ids, replace=False)
    return [list(rng.choice(groups[ids[c]], size=4, replace=False))
            for c in chosen]


def sample_quadruplet_batch(manifest: DatasetManifest, root: str | Path,
                            num_ids: int, rng: np.random.Generator) -> Batch:
    """Draw a P x 4 same-identity batch from the train split."""
    records = manifest.records("train")
    picks = sample_quadruplet_groups(group_by_identity(records), num_ids, rng)
    flat = [records[i] for grp in picks for i in grp]
    images = np.stack([load_image(root, r) for r in flat])
    labels = np.array([r.id_label for r in flat])
    return Batch(images=images, labels=labels, records=flat)


# -- augmentation -------------------------------------------------------------


@dataclass
class AugmentConfig:
    flip: bool = True
    pad_crop: bool = True
    erase: bool = True
    flip_prob: float = 0.5
    pad: int = 4
    erase_prob: float = 0.5
    erase_scale: tuple[float, float] = (0.05, 0.25)
    erase_aspect: tuple[float, float] = (0.4, 2.5)

    def disabled(self) -> "AugmentConfig":
        return replace(self, flip=False, pad_crop=False, erase=False)


def augment(image: np.ndarray, rng: np.random.Generator,
            cfg: AugmentConfig) -> np.ndarray:
    """Horizontal flip, pad + random crop, random erasing; same output shape.

    Every augmentation toggles independently; with all flags off the input
    is returned unchanged (as a copy). Degenerate erase rectangles clamp to
    at least one pixel.
    """
    out = image.copy()
    h, w = out.shape[:2]
    if cfg.flip and rng.uniform() < cfg.flip_prob:
        out = out[:, ::-1].copy()
    if cfg.pad_crop and cfg.pad > 0:
        p = cfg.pad
        padded = np.pad(out, ((p, p), (p, p), (0, 0)), mode="edge")
        oy = int(rng.integers(0, 2 * p + 1))
        ox = int(rng.integers(0, 2 * p + 1))
        out = padded[oy:oy + h, ox:ox + w].copy()
    if cfg.erase and rng.uniform() < cfg.erase_prob:
        area = rng.uniform(*cfg.erase_scale) * h * w
        aspect = rng.uniform(*cfg.erase_aspect)
        eh = int(np.clip(round(math.sqrt(area * aspect)), 1, h))
        ew = int(np.clip(round(math.sqrt(area / aspect)), 1, w))
        ey = int(rng.integers(0, h - eh + 1))
        ex = int(rng.integers(0, w - ew + 1))
        out[ey:ey + eh, ex:ex + ew] = rng.uniform(
            0.0, 1.0, size=(eh, ew, out.shape[2])).astype(out.dtype)
    return out
