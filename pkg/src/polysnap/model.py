"""Model assembly: configuration, parameter init, end-to-end forward helpers."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import deformer, features
from .autodiff import Tensor
from .deformer import DeformerConfig
from .features import FeatureConfig
from .geometry import Instance


@dataclass(frozen=True)
class ModelConfig:
    features: FeatureConfig
    deformer: DeformerConfig
    vertex_spacing: float = 10.0

    @property
    def crop_size(self) -> int:
        return self.features.crop_size

    def to_json(self) -> dict:
        return {
            "features": {
                "crop_size": self.features.crop_size,
                "in_channels": self.features.in_channels,
                "stem_width": self.features.stem_width,
                "stage_widths": list(self.features.stage_widths),
                "fpn_width": self.features.fpn_width,
                "lateral_width": self.features.lateral_width,
            },
            "deformer": {
                "layers": self.deformer.layers,
                "d_model": self.deformer.d_model,
                "d_k": self.deformer.d_k,
                "ffn_width": self.deformer.ffn_width,
                "heads": self.deformer.heads,
                "norm_position": self.deformer.norm_position,
                "offset_scale": self.deformer.offset_scale,
            },
            "vertex_spacing": self.vertex_spacing,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        f = doc.get("features", {})
        d = doc.get("deformer", {})
        return cls(
            features=FeatureConfig(
                crop_size=int(f.get("crop_size", 128)),
                in_channels=int(f.get("in_channels", 3)),
                stem_width=int(f.get("stem_width", 16)),
                stage_widths=tuple(f.get("stage_widths", (32, 48, 64))),
                fpn_width=int(f.get("fpn_width", 32)),
                lateral_width=int(f.get("lateral_width", 16)),
            ),
            deformer=DeformerConfig(
                layers=int(d.get("layers", 6)),
                d_model=int(d.get("d_model", 64)),
                d_k=int(d.get("d_k", 64)),
                ffn_width=int(d.get("ffn_width", 128)),
                heads=int(d.get("heads", 1)),
                norm_position=str(d.get("norm_position", "pre")),
                offset_scale=float(d.get("offset_scale", 8.0)),
            ),
            vertex_spacing=float(doc.get("vertex_spacing", 10.0)),
        )

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def desk_config() -> ModelConfig:
    """Default desk-scale configuration (CPU-trainable in minutes)."""
    return ModelConfig(features=FeatureConfig(), deformer=DeformerConfig())


class Model:
    """Feature encoder plus deformer with one flat parameter dict."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32,
             zero_feature_output: bool = False) -> "Model":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6d6f64]))
        params = features.init_feature_params(config.features, rng, dtype=dtype,
                                              zero_output=zero_feature_output)
        params.update(deformer.init_deformer_params(
            config.deformer, config.features.fused_channels, rng, dtype=dtype))
        return cls(config, params)

    def param_list(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"parameter {k}: shape {arrays[k].shape} != {p.data.shape}")
            p.data = arrays[k].astype(p.data.dtype, copy=True)

    def encode_crop(self, crop: np.ndarray | Tensor) -> Tensor:
        """Full pipeline up to the fused feature map for a (3, H, W) crop."""
        t = crop if isinstance(crop, Tensor) else Tensor(np.asarray(crop))
        pyramid = features.encode(self.params, self.config.features, t)
        return features.fuse(self.params, self.config.features, pyramid)

    def deform_polygon(self, fmap: Tensor, vertices: Tensor):
        return deformer.deform(vertices, fmap, self.params, self.config.deformer,
                               self.config.crop_size)

    def deform_instance(self, crop: np.ndarray, instance: Instance) -> Instance:
        with ad.no_grad():
            fmap = self.encode_crop(crop)
        return deformer.deform_instance(instance, fmap, self.params,
                                        self.config.deformer, self.config.crop_size)

    def parameter_signature(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        return h.hexdigest()
