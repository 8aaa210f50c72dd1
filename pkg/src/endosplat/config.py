"""Run configuration: every tunable default in one validated record."""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .energy import EnergyWeights
from .optimizer import CONTROL_GROUPS, GAUSSIAN_GROUPS, ModulationParams


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    seed: int = 0
    # scene growth
    stride: int = 2
    opacity_threshold: float = 0.95
    initial_opacity: float = 0.9
    optimize_opacity: bool = True
    # deformation
    k_frac: int = 64
    gamma: Optional[float] = None  # None: derived from control point spacing
    # optimization
    first_iterations: int = 1000
    iterations: int = 100
    lambda_image: float = 1.0
    lambda_depth: float = 0.1
    lambda_rigid_loc: float = 1.0
    lambda_rigid_rot: float = 1.0
    lambda_iso: float = 1.0
    lambda_visible: float = 1.0
    n_neighbors: int = 4
    lr_positions: float = 1.6e-5  # multiplied by the scene extent
    lr_scales: float = 5e-3
    lr_rotations: float = 1e-3
    lr_colors: float = 2.5e-3
    lr_opacities: float = 5e-2
    lr_offsets: float = 1e-5
    lr_rot_offsets: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    c1: float = 0.01
    c2: float = 1.0
    # flow initialization
    use_flow: bool = True
    flow_samples: int = 4096
    flow_ridge: float = 1e-6  # both relative to the mean squared weight per control point
    flow_smoothing: float = 1e-2
    # metrics
    delta_thresholds: list = field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0])
    survival_threshold: float = 50.0  # pixels at 512 px image width
    # output
    export_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(isinstance(self.seed, int), "seed must be an integer")
        need(self.stride >= 1, "stride must be >= 1")
        need(0.0 < self.opacity_threshold <= 1.0, "opacity_threshold must be in (0, 1]")
        need(0.0 < self.initial_opacity <= 1.0, "initial_opacity must be in (0, 1]")
        need(self.k_frac >= 1, "k_frac must be >= 1")
        need(self.gamma is None or self.gamma > 0, "gamma must be positive")
        need(self.first_iterations >= 0 and self.iterations >= 0, "iteration counts must be >= 0")
        need(self.n_neighbors >= 1, "n_neighbors must be >= 1")
        for f in fields(self):
            if f.name.startswith(("lambda_", "lr_")):
                need(getattr(self, f.name) >= 0, f"{f.name} must be non-negative")
        need(0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0, "Adam betas must be in [0, 1)")
        need(self.adam_eps > 0, "adam_eps must be positive")
        need(self.c1 > 0, "c1 must be positive")
        need(self.flow_samples >= 0, "flow_samples must be >= 0")
        need(self.flow_ridge > 0, "flow_ridge must be positive")
        need(self.flow_smoothing >= 0, "flow_smoothing must be >= 0")
        need(len(self.delta_thresholds) > 0 and all(t > 0 for t in self.delta_thresholds), "bad delta_thresholds")
        need(self.survival_threshold > 0, "survival_threshold must be positive")
        need(self.export_every >= 0, "export_every must be >= 0")

    @classmethod
    def from_mapping(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            if path.suffix == ".toml":
                data = tomllib.loads(path.read_text())
            else:
                data = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_mapping(data)

    def replace(self, **changes):
        return Config.from_mapping({**asdict(self), **changes})

    def to_dict(self):
        return asdict(self)

    def energy_weights(self):
        return EnergyWeights(
            image=self.lambda_image,
            depth=self.lambda_depth,
            rigid_loc=self.lambda_rigid_loc,
            rigid_rot=self.lambda_rigid_rot,
            iso=self.lambda_iso,
            visible=self.lambda_visible,
            n_neighbors=self.n_neighbors,
        )

    def modulation(self):
        return ModulationParams(self.c1, self.c2)

    def learning_rates(self, scene_extent):
        lr = {name: getattr(self, f"lr_{name}") for name in GAUSSIAN_GROUPS + CONTROL_GROUPS}
        lr["positions"] *= scene_extent
        return lr
