"""Synthetic scenes, mask corruption, and the crop/augmentation pipeline.

Scenes composite parametric shapes (ellipse, star, rounded rectangle,
capsule; the shape family doubles as the class label) back to front onto a
textured background, optionally slicing a bar occluder across the scene so
instances split into several visible parts.  Ground-truth polygons are
traced from the visible masks, and the ground-truth mask is defined as
their rasterization, which keeps polygons and masks exactly consistent.

Everything is driven by explicit integer seeds; the same (seed, config)
pair reproduces identical scenes, corruptions and crops byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .geometry import Box

CLASSES = ("ellipse", "star", "roundrect", "capsule")


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


# ---------------------------------------------------------------------------
# shape families (analytic boundary polygons, image coordinates)


def _ellipse(rng, cx, cy, size):
    a = size
    b = size * rng.uniform(0.55, 0.95)
    rot = rng.uniform(0, np.pi)
    t = np.linspace(0, 2 * np.pi, 96, endpoint=False)
    x = a * np.cos(t)
    y = b * np.sin(t)
    return _place(x, y, rot, cx, cy)


def _star(rng, cx, cy, size):
    points = int(rng.integers(5, 9))
    inner = size * rng.uniform(0.5, 0.72)
    rot = rng.uniform(0, np.pi)
    ang = np.linspace(0, 2 * np.pi, 2 * points, endpoint=False)
    rad = np.where(np.arange(2 * points) % 2 == 0, size, inner)
    return _place(rad * np.cos(ang), rad * np.sin(ang), rot, cx, cy)


def _roundrect(rng, cx, cy, size):
    w = size
    h = size * rng.uniform(0.5, 0.9)
    r = min(w, h) * rng.uniform(0.25, 0.45)
    rot = rng.uniform(0, np.pi)
    xs, ys = [], []
    corners = [(w - r, h - r, 0), (-(w - r), h - r, np.pi / 2),
               (-(w - r), -(h - r), np.pi), (w - r, -(h - r), 3 * np.pi / 2)]
    for px, py, a0 in corners:
        t = np.linspace(a0, a0 + np.pi / 2, 10)
        xs.append(px + r * np.cos(t))
        ys.append(py + r * np.sin(t))
    return _place(np.concatenate(xs), np.concatenate(ys), rot, cx, cy)


def _capsule(rng, cx, cy, size):
    r = size * rng.uniform(0.35, 0.55)
    half = size
    rot = rng.uniform(0, np.pi)
    t1 = np.linspace(-np.pi / 2, np.pi / 2, 14)
    t2 = np.linspace(np.pi / 2, 3 * np.pi / 2, 14)
    x = np.concatenate([half + r * np.cos(t1), -half + r * np.cos(t2)])
    y = np.concatenate([r * np.sin(t1), r * np.sin(t2)])
    return _place(x, y, rot, cx, cy)


def _place(x, y, rot, cx, cy):
    c, s = np.cos(rot), np.sin(rot)
    return np.stack([cx + c * x - s * y, cy + s * x + c * y], axis=1)


_SHAPES = {"ellipse": _ellipse, "star": _star, "roundrect": _roundrect, "capsule": _capsule}


# ---------------------------------------------------------------------------
# scene generation


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (160, 192)  # (H, W)
    instances: tuple[int, int] = (2, 4)
    shape_size: tuple[float, float] = (22.0, 44.0)
    classes: tuple[str, ...] = CLASSES
    texture_noise: float = 0.035
    occluder_prob: float = 0.3
    occluder_width: tuple[float, float] = (7.0, 13.0)
    gt_spacing: float = 2.0
    min_visible_px: int = 60

    def to_json(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "instances": list(self.instances),
            "shape_size": list(self.shape_size),
            "classes": list(self.classes),
            "texture_noise": self.texture_noise,
            "occluder_prob": self.occluder_prob,
            "occluder_width": list(self.occluder_width),
            "gt_spacing": self.gt_spacing,
            "min_visible_px": self.min_visible_px,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SceneConfig":
        kw = dict(doc)
        for key in ("image_size", "instances", "shape_size", "occluder_width", "classes"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class SceneInstance:
    label: str
    mask: np.ndarray              # rasterization of `polygons`
    polygons: list[np.ndarray]    # ground truth, image coordinates


@dataclass
class SyntheticScene:
    image: np.ndarray             # (H, W, 3) float32 in [0, 1]
    instances: list[SceneInstance]
    seed: int


def _is_single_component(mask: np.ndarray) -> bool:
    _, n = ndimage.label(mask, structure=geo.EIGHT_CONNECTED)
    return n == 1


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> SyntheticScene:
    """Deterministic synthetic scene with per-instance GT polygons and masks."""
    rng = _rng(seed, 0x5ce9e)
    h, w = config.image_size
    yy, xx = np.mgrid[0:h, 0:w]

    bg_a = rng.uniform(0.1, 0.45, size=3)
    bg_b = np.clip(bg_a + rng.uniform(-0.15, 0.15, size=3), 0, 1)
    ramp = (xx / w + yy / h)[..., None] / 2
    image = bg_a * (1 - ramp) + bg_b * ramp
    image += rng.normal(0, config.texture_noise, size=image.shape)
    bg_color = (bg_a + bg_b) / 2

    count = int(rng.integers(config.instances[0], config.instances[1] + 1))
    placed: list[dict] = []
    for _ in range(count):
        for _attempt in range(20):
            label = config.classes[int(rng.integers(0, len(config.classes)))]
            size = rng.uniform(*config.shape_size)
            cx = rng.uniform(size * 0.8, w - size * 0.8)
            cy = rng.uniform(size * 0.8, h - size * 0.8)
            poly = _SHAPES[label](rng, cx, cy, size)
            full = geo.rasterize_mask([poly], h, w)
            if full.sum() < config.min_visible_px:
                continue
            new_visible = [inst["visible"] & ~full for inst in placed]
            if any(v.sum() < config.min_visible_px or not _is_single_component(v)
                   for v in new_visible):
                continue
            # accepted: shade previous instances and paint this one
            for inst, v in zip(placed, new_visible):
                inst["visible"] = v
            color = bg_color
            while np.linalg.norm(color - bg_color) < 0.35:
                color = rng.uniform(0.05, 0.95, size=3)
            noise = rng.normal(0, config.texture_noise, size=(h, w, 3))
            image = np.where(full[..., None], color + noise, image)
            placed.append({"label": label, "visible": full})
            break

    if rng.uniform() < config.occluder_prob and placed:
        anchor_inst = placed[int(rng.integers(0, len(placed)))]
        ys, xs = np.nonzero(anchor_inst["visible"])
        centroid = np.array([xs.mean(), ys.mean()])
        ang = rng.uniform(0, np.pi)
        width = rng.uniform(*config.occluder_width)
        direction = np.array([np.cos(ang), np.sin(ang)])
        normal = np.array([-direction[1], direction[0]])
        span = float(np.hypot(h, w))
        corners = np.array([
            centroid + direction * span + normal * width / 2,
            centroid - direction * span + normal * width / 2,
            centroid - direction * span - normal * width / 2,
            centroid + direction * span - normal * width / 2,
        ])
        bar = geo.rasterize_mask([corners], h, w)
        bar_color = rng.uniform(0.05, 0.95, size=3)
        image = np.where(bar[..., None],
                         bar_color + rng.normal(0, config.texture_noise, size=(h, w, 3)),
                         image)
        for inst in placed:
            inst["visible"] = inst["visible"] & ~bar

    instances = []
    for inst in placed:
        if inst["visible"].sum() < config.min_visible_px:
            continue
        polys = geo.extract_polygons(inst["visible"], config.gt_spacing)
        if not polys:
            continue
        mask = geo.rasterize_mask(polys, h, w)
        instances.append(SceneInstance(label=inst["label"], mask=mask, polygons=polys))

    return SyntheticScene(image=np.clip(image, 0, 1).astype(np.float32),
                          instances=instances, seed=seed)


# ---------------------------------------------------------------------------
# mask corruption


@dataclass(frozen=True)
class NoiseConfig:
    morph_radius: tuple[int, int] = (1, 3)
    jitter_amp: float = 3.0
    jitter_scale: float = 9.0      # smoothing sigma of the boundary noise field
    blob_prob: float = 0.5
    blob_radius: tuple[float, float] = (2.0, 5.0)
    iou_band: tuple[float, float] = (0.6, 0.9)
    max_tries: int = 10

    @property
    def is_identity(self) -> bool:
        return (self.morph_radius[1] == 0 and self.jitter_amp == 0
                and self.blob_prob == 0)

    def to_json(self) -> dict:
        return {"morph_radius": list(self.morph_radius), "jitter_amp": self.jitter_amp,
                "jitter_scale": self.jitter_scale, "blob_prob": self.blob_prob,
                "blob_radius": list(self.blob_radius), "iou_band": list(self.iou_band),
                "max_tries": self.max_tries}

    @classmethod
    def from_json(cls, doc: dict) -> "NoiseConfig":
        kw = dict(doc)
        for key in ("morph_radius", "blob_radius", "iou_band"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Square-structuring-element dilation (Chebyshev ball of `radius`)."""
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((2 * radius + 1,) * 2, bool))


def erode(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=np.ones((2 * radius + 1,) * 2, bool))


def _signed_distance(mask: np.ndarray) -> np.ndarray:
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return outside - inside  # negative inside


def corrupt_mask(gt: np.ndarray, noise_cfg: NoiseConfig = NoiseConfig(),
                 seed: int = 0) -> np.ndarray | None:
    """Degrade a mask into a plausible imperfect segmentation.

    Retries with adapted magnitudes until the IoU against `gt` lands in the
    configured band; returns None when `max_tries` attempts all end empty
    or degenerate (caller skips the instance).
    """
    gt = geo.as_mask(gt)
    if noise_cfg.is_identity:
        return gt.copy()
    rng = _rng(seed, 0xc0882)
    lo, hi = noise_cfg.iou_band
    target = rng.uniform(lo + 0.05, hi - 0.05)
    amp = noise_cfg.jitter_amp
    best = None
    best_gap = np.inf
    for attempt in range(noise_cfg.max_tries):
        out = _corrupt_once(gt, noise_cfg, amp, rng)
        if out is None or out.sum() == 0:
            continue
        iou = _mask_iou(out, gt)
        if lo <= iou <= hi:
            return out
        gap = abs(iou - target)
        if gap < best_gap:
            best, best_gap = out, gap
        # adapt: too much damage -> smaller amplitude, too little -> larger
        amp = amp * (0.7 if iou < lo else 1.45)
    return best


def _mask_iou(a, b) -> float:
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def _corrupt_once(gt, cfg, amp, rng):
    h, w = gt.shape
    sdf = _signed_distance(gt)
    noise = ndimage.gaussian_filter(rng.normal(size=gt.shape), cfg.jitter_scale)
    scale = np.abs(noise).mean() or 1.0
    out = sdf <= (amp * noise / scale)

    r = int(rng.integers(cfg.morph_radius[0], cfg.morph_radius[1] + 1))
    out = dilate(out, r) if rng.uniform() < 0.5 else erode(out, r)

    if rng.uniform() < cfg.blob_prob:
        border = np.argwhere(out ^ erode(out, 1)) if out.any() else np.empty((0, 2))
        if len(border):
            for _ in range(int(rng.integers(1, 3))):
                cy, cx = border[int(rng.integers(0, len(border)))]
                rad = rng.uniform(*cfg.blob_radius)
                yy, xx = np.mgrid[0:h, 0:w]
                blob = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
                if rng.uniform() < 0.5:
                    out = out | blob
                else:
                    out = out & ~blob
    if not out.any():
        return None
    # keep only meaningful components (specks confuse polygon extraction)
    labels, n = ndimage.label(out, structure=geo.EIGHT_CONNECTED)
    if n > 1:
        sizes = ndimage.sum_labels(out, labels, index=range(1, n + 1))
        keep = {i + 1 for i, s in enumerate(sizes) if s >= 9}
        if not keep:
            return None
        out = np.isin(labels, list(keep))
    return out


# ---------------------------------------------------------------------------
# crop pipeline


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = True
    box_jitter_frac: float = 0.03
    test_expand_frac: float = 0.02
    annotation_expand_px: float = 5.0
    square_box: bool = False   # enlarge the box to a square before cropping

    def to_json(self) -> dict:
        return {"hflip": self.hflip, "box_jitter_frac": self.box_jitter_frac,
                "test_expand_frac": self.test_expand_frac,
                "annotation_expand_px": self.annotation_expand_px,
                "square_box": self.square_box}

    @classmethod
    def from_json(cls, doc: dict) -> "AugmentConfig":
        return cls(**doc)


@dataclass(frozen=True)
class CropTransform:
    """Affine (plus optional horizontal flip) between image and crop frames."""

    box: Box
    crop_size: int
    flipped: bool = False

    def image_to_crop(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        sx = self.crop_size / self.box.width
        sy = self.crop_size / self.box.height
        out = np.stack([(pts[:, 0] - self.box.x0) * sx,
                        (pts[:, 1] - self.box.y0) * sy], axis=1)
        if self.flipped:
            out[:, 0] = self.crop_size - out[:, 0]
        return out

    def crop_to_image(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        x = pts[:, 0].copy()
        if self.flipped:
            x = self.crop_size - x
        sx = self.box.width / self.crop_size
        sy = self.box.height / self.crop_size
        return np.stack([self.box.x0 + x * sx,
                         self.box.y0 + pts[:, 1] * sy], axis=1)


def _squarify(box: Box, bounds: Box) -> Box:
    side = max(box.width, box.height)
    cx = (box.x0 + box.x1) / 2
    cy = (box.y0 + box.y1) / 2
    x0, y0 = cx - side / 2, cy - side / 2
    # shift back inside the image where possible, then clip
    x0 = min(max(x0, bounds.x0), max(bounds.x1 - side, bounds.x0))
    y0 = min(max(y0, bounds.y0), max(bounds.y1 - side, bounds.y0))
    return Box(x0, y0, min(x0 + side, bounds.x1), min(y0 + side, bounds.y1))


_grid_cache: dict[int, np.ndarray] = {}


def _crop_grid(c: int) -> np.ndarray:
    grid = _grid_cache.get(c)
    if grid is None:
        grid = np.stack(np.meshgrid(np.arange(c) + 0.5, np.arange(c) + 0.5),
                        axis=-1).reshape(-1, 2)
        _grid_cache[c] = grid
    return grid


def resample_image(image: np.ndarray, transform: CropTransform) -> np.ndarray:
    """Bilinear crop of an (H, W, 3) image into a (3, C, C) tensor layout."""
    h, w = image.shape[:2]
    c = transform.crop_size
    pts = transform.crop_to_image(_crop_grid(c))
    x = np.clip(pts[:, 0] - 0.5, 0, w - 1)
    y = np.clip(pts[:, 1] - 0.5, 0, h - 1)
    j0 = np.minimum(x.astype(np.int64), w - 2 if w > 1 else 0)
    i0 = np.minimum(y.astype(np.int64), h - 2 if h > 1 else 0)
    tx = (x - j0)[:, None]
    ty = (y - i0)[:, None]
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    val = ((1 - ty) * ((1 - tx) * image[i0, j0] + tx * image[i0, j1])
           + ty * ((1 - tx) * image[i1, j0] + tx * image[i1, j1]))
    return val.reshape(c, c, 3).transpose(2, 0, 1).astype(np.float32)


def resample_mask(mask: np.ndarray, transform: CropTransform) -> np.ndarray:
    """Nearest-neighbor crop of a boolean mask into the crop frame."""
    h, w = mask.shape
    c = transform.crop_size
    pts = transform.crop_to_image(_crop_grid(c))
    j = np.clip(np.floor(pts[:, 0]).astype(np.int64), 0, w - 1)
    i = np.clip(np.floor(pts[:, 1]).astype(np.int64), 0, h - 1)
    return mask[i, j].reshape(c, c)


@dataclass
class TrainingSample:
    crop: np.ndarray                  # (3, C, C) float32 in [0, 1]
    init_polygons: list[np.ndarray]   # crop frame
    gt_polygons: list[np.ndarray]     # crop frame
    transform: CropTransform
    label: str
    mode: str                         # "detection" | "annotation"
    provenance: str                   # "proposed-box" | "gt-box"


def make_sample(scene: SyntheticScene, instance_idx: int, init_mask: np.ndarray,
                mode: str, augment: AugmentConfig, crop_size: int, seed: int,
                provenance: str = "proposed-box", train: bool = True,
                vertex_spacing: float = 10.0, iou_filter: float = 0.5) -> TrainingSample | None:
    """Build one crop-frame training/eval sample for an instance.

    Returns None when the initialization fails the IoU-overlap filter against
    the ground truth (training-time selection, not an error) or yields no
    usable polygons.
    """
    if mode not in ("detection", "annotation"):
        raise ValueError(f"unknown mode {mode!r}")
    if provenance not in ("proposed-box", "gt-box"):
        raise ValueError(f"unknown provenance {provenance!r}")
    inst = scene.instances[instance_idx]
    key = seed if isinstance(seed, tuple) else (seed,)
    rng = _rng(*key, 0x5a3b1e)
    h, w = inst.mask.shape
    bounds = Box(0.0, 0.0, float(w), float(h))

    if train and iou_filter > 0 and _mask_iou(init_mask, inst.mask) <= iou_filter:
        return None

    base = geo.fit_box(inst.mask if provenance == "gt-box" else init_mask)
    if mode == "annotation":
        box = geo.expand_box(base, px=augment.annotation_expand_px, bounds=bounds)
    elif train:
        jitter = rng.uniform(-augment.box_jitter_frac, augment.box_jitter_frac, size=4)
        box = Box(
            max(base.x0 - jitter[0] * base.width, 0.0),
            max(base.y0 - jitter[1] * base.height, 0.0),
            min(base.x1 + jitter[2] * base.width, float(w)),
            min(base.y1 + jitter[3] * base.height, float(h)),
        )
    else:
        box = geo.expand_box(base, frac=augment.test_expand_frac, bounds=bounds)
    if augment.square_box:
        box = _squarify(box, bounds)

    flipped = bool(train and augment.hflip and rng.uniform() < 0.5)
    transform = CropTransform(box=box, crop_size=crop_size, flipped=flipped)

    crop = resample_image(scene.image, transform)
    init_crop_mask = resample_mask(init_mask, transform)
    init_polys = geo.extract_polygons(init_crop_mask, vertex_spacing)
    if not init_polys:
        return None
    gt_polys = [transform.image_to_crop(p) for p in inst.polygons]
    return TrainingSample(crop=crop, init_polygons=init_polys, gt_polygons=gt_polys,
                          transform=transform, label=inst.label, mode=mode,
                          provenance=provenance)


# ---------------------------------------------------------------------------
# on-disk dataset


@dataclass(frozen=True)
class DatasetConfig:
    scene: SceneConfig = SceneConfig()
    noise: NoiseConfig = NoiseConfig()

    def to_json(self) -> dict:
        return {"scene": self.scene.to_json(), "noise": self.noise.to_json()}

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetConfig":
        return cls(scene=SceneConfig.from_json(doc.get("scene", {})),
                   noise=NoiseConfig.from_json(doc.get("noise", {})))

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class SceneRecord:
    """One dataset entry: image, GT instances, and per-instance init masks."""

    image: np.ndarray
    instances: list[SceneInstance]
    init_masks: list[np.ndarray]
    scene_id: int


def write_dataset(root, config: DatasetConfig, seed: int, splits: dict) -> dict:
    """Generate scenes to disk: PNG images, polygon JSON, init-mask PNGs.

    `splits` maps split name to either a scene count (int) or
    {"instances": N} to keep generating scenes until N usable instances
    exist.  Returns the manifest and writes it as manifest.json.
    """
    root = Path(root)
    manifest = {"config": config.to_json(), "config_hash": config.hash(),
                "seed": seed, "splits": {}}
    split_offsets = {name: i for i, name in enumerate(sorted(splits))}
    for name, wanted in sorted(splits.items()):
        target_scenes = wanted if isinstance(wanted, int) else None
        target_instances = None if isinstance(wanted, int) else int(wanted["instances"])
        split_dir = root / name
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        (split_dir / "polygons").mkdir(exist_ok=True)
        (split_dir / "inits").mkdir(exist_ok=True)
        n_instances = 0
        k = 0
        while ((target_scenes is not None and k < target_scenes)
               or (target_instances is not None and n_instances < target_instances)):
            scene_seed = (seed * 1_000_003 + split_offsets[name] * 500_009 + k)
            scene = generate_scene(scene_seed, config.scene)
            record_instances = []
            init_masks = []
            for idx, inst in enumerate(scene.instances):
                init = corrupt_mask(inst.mask, config.noise, seed=scene_seed * 31 + idx)
                if init is None:
                    continue
                record_instances.append(inst)
                init_masks.append(init)
            stem = f"{k:05d}"
            geo.save_image_png(split_dir / "images" / f"{stem}.png", scene.image)
            geo.save_instances(
                split_dir / "polygons" / f"{stem}.json",
                [geo.Instance(label=i.label, score=1.0, polygons=i.polygons)
                 for i in record_instances])
            for idx, init in enumerate(init_masks):
                geo.save_mask_png(split_dir / "inits" / f"{stem}_{idx:02d}.png", init)
            n_instances += len(record_instances)
            k += 1
        manifest["splits"][name] = {"scenes": k, "instances": n_instances}
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return manifest


def load_split(root, split: str) -> list[SceneRecord]:
    root = Path(root)
    split_dir = root / split
    records = []
    for img_path in sorted((split_dir / "images").glob("*.png")):
        stem = img_path.stem
        image = geo.load_image_png(img_path)
        h, w = image.shape[:2]
        instances = []
        for inst in geo.load_instances(split_dir / "polygons" / f"{stem}.json"):
            mask = geo.rasterize_mask(inst.polygons, h, w)
            instances.append(SceneInstance(label=inst.label, mask=mask,
                                           polygons=inst.polygons))
        init_masks = [geo.load_mask_png(split_dir / "inits" / f"{stem}_{idx:02d}.png")
                      for idx in range(len(instances))]
        records.append(SceneRecord(image=image, instances=instances,
                                   init_masks=init_masks, scene_id=int(stem)))
    return records


def record_as_scene(record: SceneRecord) -> SyntheticScene:
    return SyntheticScene(image=record.image, instances=record.instances,
                          seed=record.scene_id)
