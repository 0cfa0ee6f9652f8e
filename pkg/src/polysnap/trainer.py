"""End-to-end optimization loop, Adam optimizer, checkpoints and evaluation.

Training iterates instances one at a time (batch size 1): crop, encode,
deform every initialization polygon, average the per-polygon losses,
backprop, and take one decoupled-weight-decay Adam step.  All randomness
(sample order, augmentation draws) is derived from (seed, epoch, position)
so identical configs reproduce bit-identical checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import geometry as geo
from . import metrics as metricsmod
from .autodiff import Tensor
from .data import AugmentConfig, SceneRecord
from .losses import LossConfig, total_loss
from .metrics import Detection, EvalReport
from .model import Model, ModelConfig, desk_config

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class NumericalAbort(RuntimeError):
    """Raised when a loss or gradient goes non-finite during training."""


class CompatibilityError(ValueError):
    """Checkpoint / config hash mismatch."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 1
    epochs: int = 1
    seed: int = 0
    mode: str = "detection"
    loss: LossConfig = LossConfig()
    augment: AugmentConfig = AugmentConfig()
    grad_clip: float = 10.0
    use_gt_boxes: bool = True
    iou_filter: float = 0.5
    eval_every: int = 0          # steps between quick val evals; 0 = never
    eval_instances: int = 40     # instances per quick eval

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError(f"invalid train config: lr={self.lr}, batch={self.batch_size}")

    def to_json(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay,
                "batch_size": self.batch_size, "epochs": self.epochs,
                "seed": self.seed, "mode": self.mode, "loss": self.loss.to_json(),
                "augment": self.augment.to_json(), "grad_clip": self.grad_clip,
                "use_gt_boxes": self.use_gt_boxes, "iou_filter": self.iou_filter,
                "eval_every": self.eval_every, "eval_instances": self.eval_instances}

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        kw = dict(doc)
        if "loss" in kw:
            kw["loss"] = LossConfig.from_json(kw["loss"])
        if "augment" in kw:
            kw["augment"] = AugmentConfig.from_json(kw["augment"])
        return cls(**kw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, weight_decay: float = 0.0) -> AdamState:
    """One Adam update with decoupled weight decay applied before the step."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient in parameter '{name}'")
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if weight_decay > 0:
            p.data -= lr * weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * (g * g)
        mhat = m / (1 - ADAM_BETA1 ** t)
        vhat = v / (1 - ADAM_BETA2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + ADAM_EPS)).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: Model, opt: AdamState, step: int,
                    train_config: TrainConfig | None = None,
                    rng_state: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for k, t in model.params.items():
        arrays[f"param/{k}"] = t.data
    for k, m in opt.m.items():
        arrays[f"adam_m/{k}"] = m
    for k, v in opt.v.items():
        arrays[f"adam_v/{k}"] = v
    manifest = {
        "format": 1,
        "model_config": model.config.to_json(),
        "model_config_hash": model.config.hash(),
        "adam_t": opt.t,
        "step": step,
        "train_config": train_config.to_json() if train_config else None,
        "rng_state": rng_state or {},
    }
    ad.save_tensor_archive(path, arrays, manifest)


def load_checkpoint(path) -> tuple[Model, AdamState, dict]:
    arrays, manifest = ad.load_tensor_archive(path)
    config = ModelConfig.from_json(manifest["model_config"])
    model = Model.init(config, seed=0)
    model.load_state_arrays({k[len("param/"):]: a for k, a in arrays.items()
                             if k.startswith("param/")})
    opt = AdamState(t=int(manifest["adam_t"]))
    for k, a in arrays.items():
        if k.startswith("adam_m/"):
            opt.m[k[len("adam_m/"):]] = a
        elif k.startswith("adam_v/"):
            opt.v[k[len("adam_v/"):]] = a
    return model, opt, manifest


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: Model
    opt: AdamState
    steps: int
    timeline: list[dict]
    checkpoint_path: str | None = None


def _instance_units(records: list[SceneRecord]) -> list[tuple[int, int]]:
    return [(r, i) for r, rec in enumerate(records) for i in range(len(rec.instances))]


def _step_loss(model: Model, sample: datamod.TrainingSample, loss_cfg: LossConfig):
    fmap = model.encode_crop(sample.crop)
    totals = []
    chamfers = []
    stds = []
    for poly in sample.init_polygons:
        _, moved, _ = model.deform_polygon(fmap, Tensor(poly.astype(np.float32)))
        br = total_loss(moved, sample.gt_polygons, loss_cfg)
        totals.append(br.total)
        chamfers.append(br.chamfer_value)
        stds.append(br.std_value)
    combined = totals[0]
    for t in totals[1:]:
        combined = ad.add(combined, t)
    combined = ad.scale(combined, 1.0 / len(totals))
    return combined, float(np.mean(chamfers)), float(np.mean(stds))


def train(train_cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          dataset_root=None, records: list[SceneRecord] | None = None,
          val_records: list[SceneRecord] | None = None,
          out_path=None, log_every: int = 200,
          progress: bool = False) -> TrainResult:
    """Optimize a fresh model on the train split; deterministic in the seed."""
    model_cfg = model_cfg or desk_config()
    if records is None:
        if dataset_root is None:
            raise ValueError("need either records or dataset_root")
        records = datamod.load_split(dataset_root, "train")
    if not records or not any(rec.instances for rec in records):
        raise ValueError("training dataset is empty")

    model = Model.init(model_cfg, seed=train_cfg.seed)
    opt = AdamState()
    params = model.params
    param_list = model.param_list()
    timeline: list[dict] = []
    units = _instance_units(records)
    provenances = ["proposed-box"] + (["gt-box"] if train_cfg.use_gt_boxes else [])

    last_good: dict[str, np.ndarray] | None = None
    step = 0
    for epoch in range(train_cfg.epochs):
        order = np.random.default_rng(
            np.random.SeedSequence([train_cfg.seed, 0x0edea, epoch])).permutation(len(units))
        for pos in order:
            rec_idx, inst_idx = units[pos]
            rec = records[rec_idx]
            scene = datamod.record_as_scene(rec)
            for prov_id, prov in enumerate(provenances):
                sample = datamod.make_sample(
                    scene, inst_idx, rec.init_masks[inst_idx], train_cfg.mode,
                    train_cfg.augment, model_cfg.crop_size,
                    seed=(train_cfg.seed, epoch, int(pos), prov_id),
                    provenance=prov, train=True,
                    vertex_spacing=model_cfg.vertex_spacing,
                    iou_filter=train_cfg.iou_filter)
                if sample is None:
                    continue
                loss, chamfer_v, std_v = _step_loss(model, sample, train_cfg.loss)
                if not np.isfinite(loss.item()):
                    if last_good is not None:
                        model.load_state_arrays(last_good)
                    if out_path:
                        save_checkpoint(out_path, model, opt, step, train_cfg)
                    raise NumericalAbort(f"non-finite loss at step {step}")
                model.zero_grad()
                ad.backward(loss, params=param_list)
                grads = {k: p.grad for k, p in params.items()}
                clip_gradients(grads, train_cfg.grad_clip)
                adam_step(params, grads, opt, train_cfg.lr, train_cfg.weight_decay)
                step += 1
                timeline.append({"step": step, "epoch": epoch, "loss": loss.item(),
                                 "chamfer": chamfer_v, "std": std_v})
                if progress and step % log_every == 0:
                    recent = [t["loss"] for t in timeline[-log_every:]]
                    print(f"step {step}: loss {np.mean(recent):.4f}")
                if (train_cfg.eval_every and val_records
                        and step % train_cfg.eval_every == 0):
                    quick = quick_eval(model, val_records, train_cfg,
                                       limit=train_cfg.eval_instances)
                    timeline.append({"step": step, "epoch": epoch, **quick})
                last_good = model.state_arrays()

    rng_state = {"seed": train_cfg.seed, "epochs_done": train_cfg.epochs, "step": step}
    result = TrainResult(model=model, opt=opt, steps=step, timeline=timeline)
    if out_path:
        save_checkpoint(out_path, model, opt, step, train_cfg, rng_state)
        result.checkpoint_path = str(out_path)
    return result


def quick_eval(model: Model, records: list[SceneRecord], train_cfg: TrainConfig,
               limit: int = 40) -> dict:
    """Cheap mid-training probe: mean refined IoU over a few val instances."""
    ious = []
    for rec in records:
        for idx in range(len(rec.instances)):
            if len(ious) >= limit:
                break
            out = refine_instance(model, rec, idx, train_cfg.mode, train_cfg.augment)
            if out is None:
                continue
            _, refined_mask, _, _ = out
            ious.append(metricsmod.mask_iou(refined_mask, rec.instances[idx].mask))
        if len(ious) >= limit:
            break
    return {"val_mean_iou": float(np.mean(ious)) if ious else 0.0}


# ---------------------------------------------------------------------------
# evaluation


def refine_instance(model: Model, rec: SceneRecord, inst_idx: int, mode: str,
                    augment: AugmentConfig):
    """Run the deformer on one stored instance.

    Returns (init mask, refined mask, init polygons, refined polygons) in the
    image frame, or None when no usable initialization polygons exist.
    """
    scene = datamod.record_as_scene(rec)
    sample = datamod.make_sample(scene, inst_idx, rec.init_masks[inst_idx], mode,
                                 augment, model.config.crop_size,
                                 seed=(rec.scene_id, inst_idx),
                                 provenance="gt-box" if mode == "annotation" else "proposed-box",
                                 train=False,
                                 vertex_spacing=model.config.vertex_spacing,
                                 iou_filter=0.0)
    if sample is None:
        return None
    h, w = rec.instances[inst_idx].mask.shape
    with ad.no_grad():
        fmap = model.encode_crop(sample.crop)
        refined_crop = []
        for poly in sample.init_polygons:
            offsets, moved, _ = model.deform_polygon(fmap, Tensor(poly.astype(np.float32)))
            refined_crop.append(poly if not offsets.data.any()
                                else moved.data.astype(np.float64))
    init_img = [sample.transform.crop_to_image(p) for p in sample.init_polygons]
    refined_img = [sample.transform.crop_to_image(p) for p in refined_crop]
    init_mask = geo.rasterize_mask(init_img, h, w)
    refined_mask = geo.rasterize_mask(refined_img, h, w)
    return init_mask, refined_mask, init_img, refined_img


def _mode_box(base: geo.Box, mode: str, bounds: geo.Box) -> geo.Box:
    if mode == "annotation":
        return geo.expand_box(base, px=5.0, bounds=bounds)
    return geo.expand_box(base, frac=0.02, bounds=bounds)


def refine_mask(model: Model, image: np.ndarray, mask: np.ndarray,
                mode: str = "annotation", label: str = "object",
                score: float = 1.0) -> geo.Instance | None:
    """Full single-instance pipeline: mask -> polygons -> deform, image frame."""
    h, w = mask.shape
    box = _mode_box(geo.fit_box(mask), mode, geo.Box(0.0, 0.0, float(w), float(h)))
    transform = datamod.CropTransform(box=box, crop_size=model.config.crop_size)
    crop = datamod.resample_image(image, transform)
    crop_mask = datamod.resample_mask(mask, transform)
    init_polys = geo.extract_polygons(crop_mask, model.config.vertex_spacing)
    if not init_polys:
        return None
    with ad.no_grad():
        fmap = model.encode_crop(crop)
        refined = []
        for poly in init_polys:
            offsets, moved, _ = model.deform_polygon(fmap, Tensor(poly.astype(np.float32)))
            refined.append(transform.crop_to_image(
                poly if not offsets.data.any() else moved.data))
    return geo.Instance(label=label, score=score, polygons=refined)


def refine_polygons(model: Model, image: np.ndarray, polygons: list[np.ndarray],
                    mode: str = "annotation"):
    """Deform existing image-frame polygons (e.g. after human edits).

    Returns (refined polygons, per-polygon Chamfer distance to the previous
    shape in image pixels).
    """
    from .losses import LossConfig, chamfer_loss

    h, w = image.shape[:2]
    allv = np.vstack(polygons)
    base = geo.Box(float(allv[:, 0].min()), float(allv[:, 1].min()),
                   float(max(allv[:, 0].max(), allv[:, 0].min() + 1.0)),
                   float(max(allv[:, 1].max(), allv[:, 1].min() + 1.0)))
    box = _mode_box(base, mode, geo.Box(0.0, 0.0, float(w), float(h)))
    transform = datamod.CropTransform(box=box, crop_size=model.config.crop_size)
    crop = datamod.resample_image(image, transform)
    refined, diags = [], []
    with ad.no_grad():
        fmap = model.encode_crop(crop)
        for poly in polygons:
            crop_poly = transform.image_to_crop(poly)
            offsets, moved, _ = model.deform_polygon(fmap, Tensor(crop_poly.astype(np.float32)))
            if not offsets.data.any():
                out = np.asarray(poly, dtype=np.float64)  # exact identity
            else:
                out = transform.crop_to_image(moved.data)
            refined.append(out)
            diags.append(float(chamfer_loss(out, poly, LossConfig()).item()))
    return refined, diags


@dataclass
class EvalPair:
    """Metrics for the initializations, the refined polygons, and the gains."""

    init: EvalReport
    refined: EvalReport
    deltas: dict[str, float]
    mode: str
    split: str
    n_instances: int

    def to_json(self) -> dict:
        return {"init": self.init.to_json(), "refined": self.refined.to_json(),
                "deltas": self.deltas, "mode": self.mode, "split": self.split,
                "n_instances": self.n_instances}


def _build_report(per_instance: list[dict], dets, gts) -> EvalReport:
    classes = sorted({r["label"] for r in per_instance})
    per_class_iou = {c: float(np.mean([r["iou"] for r in per_instance if r["label"] == c]))
                     for c in classes}
    table = metricsmod.match_detections(dets, gts)
    ap, ap50, per_class_ap, ap_flags = metricsmod.average_precision(dets, gts, table=table)
    af, _, af_flags = metricsmod.average_f(dets, gts, table=table)
    flags = ap_flags + af_flags
    empty_union = sum(r.get("empty_union", 0) for r in per_instance)
    if empty_union:
        flags.append(f"{empty_union} instance IoUs used the both-empty=1 convention")
    return EvalReport(
        per_class_iou=per_class_iou,
        mean_iou=float(np.mean([r["iou"] for r in per_instance])) if per_instance else 0.0,
        ap=ap, ap50=ap50, per_class_ap=per_class_ap, af=af,
        boundary_f1=float(np.mean([r["f1"] for r in per_instance])) if per_instance else 0.0,
        boundary_f2=float(np.mean([r["f2"] for r in per_instance])) if per_instance else 0.0,
        counts={"instances": len(per_instance), "detections": len(dets),
                "ground_truth": sum(len(v) for v in gts.values())},
        flags=flags)


def evaluate(model: Model, records: list[SceneRecord], mode: str = "detection",
             augment: AugmentConfig | None = None, split: str = "val",
             keep_examples: int = 8):
    """Full evaluation of init vs refined polygons over a split.

    Returns (EvalPair, examples) where examples hold a few instances'
    image-frame polygons for overlay figures.
    """
    augment = augment or AugmentConfig()
    init_rows, refined_rows = [], []
    init_dets, refined_dets = [], []
    gts: dict[int, list] = {}
    examples = []
    for rec in records:
        gts[rec.scene_id] = [(inst.label, inst.mask) for inst in rec.instances]
        for idx, inst in enumerate(rec.instances):
            out = refine_instance(model, rec, idx, mode, augment)
            if out is None:
                continue
            init_mask, refined_mask, init_polys, refined_polys = out
            for rows, dets, mask in ((init_rows, init_dets, init_mask),
                                     (refined_rows, refined_dets, refined_mask)):
                union_empty = int(not (mask.any() or inst.mask.any()))
                rows.append({"label": inst.label,
                             "iou": metricsmod.mask_iou(mask, inst.mask),
                             "f1": metricsmod.boundary_f(mask, inst.mask, 1),
                             "f2": metricsmod.boundary_f(mask, inst.mask, 2),
                             "empty_union": union_empty})
                dets.append((rec.scene_id, Detection(inst.label, 1.0, mask)))
            if len(examples) < keep_examples:
                examples.append({"image": rec.image, "gt": inst.polygons,
                                 "init": init_polys, "refined": refined_polys,
                                 "label": inst.label})
    init_report = _build_report(init_rows, init_dets, gts)
    refined_report = _build_report(refined_rows, refined_dets, gts)
    deltas = {k: getattr(refined_report, k) - getattr(init_report, k)
              for k in ("mean_iou", "ap", "ap50", "af", "boundary_f1", "boundary_f2")}
    pair = EvalPair(init=init_report, refined=refined_report, deltas=deltas,
                    mode=mode, split=split, n_instances=len(refined_rows))
    return pair, examples


def evaluate_checkpoint(checkpoint_path, dataset_root, split: str = "val",
                        mode: str = "detection",
                        expected_config: ModelConfig | None = None,
                        augment: AugmentConfig | None = None):
    model, _, manifest = load_checkpoint(checkpoint_path)
    if expected_config is not None and expected_config.hash() != manifest["model_config_hash"]:
        raise CompatibilityError(
            f"checkpoint was built with config {manifest['model_config_hash']}, "
            f"requested {expected_config.hash()}")
    records = datamod.load_split(dataset_root, split)
    return evaluate(model, records, mode=mode, augment=augment, split=split)
