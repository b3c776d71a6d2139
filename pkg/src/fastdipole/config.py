"""Run configuration: a tree of dataclasses serialized as JSON.

Every tunable constant of the pipeline lives here by name. Sampling counts
and batch size default to the full-scale values; ``desk_preset`` scales them
down for a single CPU core and ``full_preset`` adds the large head and
mesh resolution.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from dataclasses import field as dc_field
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class TreeConfig:
    max_leaf_size: int = 8
    max_depth: int = 20
    beta_bh: float = 2.0
    # "radial" skips the foreshortening cosine for appearance channels
    appearance_kernel: str = "radial"


@dataclass
class FieldConfig:
    lambda_init: float = 20.0
    # initial epsilon = epsilon_scale * mean nearest-neighbor spacing
    epsilon_scale: float = 1.5
    # explicit epsilon overrides the spacing rule when > 0
    epsilon: float = 0.0
    learn_lambda: bool = True
    learn_epsilon: bool = True


@dataclass
class SamplingConfig:
    probe_count: int = 1024
    sparse_before: int = 24
    dense_count: int = 48
    sparse_after: int = 8
    uniform_count: int = 80
    # half-width of the dense band around the first crossing, in units of epsilon
    dense_halfwidth_eps: float = 2.0
    shadow_samples: int = 64
    shadow_weight_cutoff: float = 1e-3


@dataclass
class HeadConfig:
    variant: str = "direct-rgb"
    hidden: list = dc_field(default_factory=lambda: [64, 64])
    sh_degree: int = 3
    # appearance channels for tiny-mlp; direct-rgb always uses 3 (6 with shadows)
    k_features: int = 8
    init_scale: float = 0.1


@dataclass
class LossConfig:
    w_render: float = 1.0
    w_entropy: float = 0.01
    w_winding: float = 0.001
    w_normal: float = 0.01


@dataclass
class TrainConfig:
    batch_rays: int = 4096
    lr_points: float = 1e-2
    lr_head: float = 3e-3
    lr_scalars: float = 1e-3
    warmup_iters: int = 200
    total_iters: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grow_every: int = 500
    grow_rays: int = 512
    # threshold = grow_distance_scale * mean nearest-neighbor spacing
    grow_distance_scale: float = 2.0
    grow_cap_fraction: float = 0.1
    rng_seed: int = 0
    checkpoint_every: int = 0
    shadow_rays: bool = False


@dataclass
class MeshConfig:
    resolution: int = 128
    bbox_inflate: float = 0.05


@dataclass
class Config:
    version: int = CONFIG_VERSION
    tree: TreeConfig = dc_field(default_factory=TreeConfig)
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    sampling: SamplingConfig = dc_field(default_factory=SamplingConfig)
    head: HeadConfig = dc_field(default_factory=HeadConfig)
    loss: LossConfig = dc_field(default_factory=LossConfig)
    train: TrainConfig = dc_field(default_factory=TrainConfig)
    mesh: MeshConfig = dc_field(default_factory=MeshConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        return _from_dict(cls, data, "config")

    @classmethod
    def load(cls, path) -> "Config":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def validate(self):
        s = self.sampling
        for name in ("probe_count", "uniform_count", "dense_count", "shadow_samples"):
            if getattr(s, name) < 1:
                raise ConfigError(f"sampling.{name} must be positive")
        if s.sparse_before < 0 or s.sparse_after < 0:
            raise ConfigError("sampling counts must be nonnegative")
        t = self.train
        if t.batch_rays < 1 or t.total_iters < 0 or t.warmup_iters < 0:
            raise ConfigError("train counts must be positive")
        if min(t.lr_points, t.lr_head, t.lr_scalars) < 0:
            raise ConfigError("learning rates must be nonnegative")
        lw = self.loss
        if min(lw.w_render, lw.w_entropy, lw.w_winding, lw.w_normal) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.head.variant not in ("direct-rgb", "tiny-mlp"):
            raise ConfigError(f"head.variant must be direct-rgb or tiny-mlp, got {self.head.variant!r}")
        if self.tree.appearance_kernel not in ("radial", "dipole"):
            raise ConfigError("tree.appearance_kernel must be radial or dipole")
        if self.field.lambda_init <= 0 or self.field.epsilon_scale <= 0 or self.field.epsilon < 0:
            raise ConfigError("field scales must be positive")
        if self.mesh.resolution < 2:
            raise ConfigError("mesh.resolution must be at least 2")
        return self


def _from_dict(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    out = cls(**kwargs)
    if cls is Config and out.version != CONFIG_VERSION:
        raise ConfigError(f"config version {out.version}, expected {CONFIG_VERSION}")
    return out


def desk_preset() -> Config:
    """Reduced sampling and batch sizes for single-core runs."""
    cfg = Config()
    cfg.sampling = SamplingConfig(probe_count=128, sparse_before=8, dense_count=24,
                                  sparse_after=4, uniform_count=32, shadow_samples=16,
                                  shadow_weight_cutoff=0.05)
    cfg.train.batch_rays = 256
    return cfg


def full_preset() -> Config:
    """Full-scale settings: a 4x256 head with 32 features and 512^3 meshes."""
    cfg = Config()
    cfg.head = HeadConfig(variant="tiny-mlp", hidden=[256, 256, 256, 256], k_features=32)
    cfg.mesh.resolution = 512
    return cfg
