"""
Flat run configuration. config.json holds one UPPER_SNAKE key per field of
RunConfig; command-line flags (--grasp-offset for GRASP_OFFSET, ...) override
file values.
"""
import argparse
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional

from errors import ConfigError
from file_handler import FileHandler
from grasp_forge import GraspConfig
from hand_model import JointLimits
from loop_harness import LoopConfig
from scene_synthesis import Intrinsics, SynthConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    coupling: float = 2.0 / 3.0

    bend_mcp_min_deg: float = -30.0
    bend_mcp_max_deg: float = 90.0
    bend_other_min_deg: float = -10.0
    bend_other_max_deg: float = 100.0
    splay_min_deg: float = -25.0
    splay_max_deg: float = 25.0
    thumb_splay_min_deg: float = -25.0
    thumb_splay_max_deg: float = 45.0

    grasp_offset: float = 0.08
    grasp_sites: int = 64
    grasp_target: int = 100
    grasp_budget_factor: int = 3
    grasp_max_iters: int = 200
    grasp_grad_tol: float = 1e-6
    grasp_w_rep: float = 10.0
    grasp_eps_contact: float = 0.002
    grasp_tau_pen: float = 0.002
    grasp_residual_cap: float = 2.5e-3
    grasp_reject_unconverged: bool = False

    viewpoint_n_u: int = 12
    viewpoint_n_phi: int = 24
    camera_radius: float = 0.6

    synth_sigma_bend_deg: float = 3.0
    synth_sigma_splay_deg: float = 1.5
    synth_delta_u: float = 0.05
    synth_delta_phi_deg: float = 7.5
    shape_sigma: float = 0.5
    mitigation_step_deg: float = 0.5
    mitigation_max_steps: int = 60
    synth_max_resamples: int = 4
    background_pool: int = 1000
    texture_pool: int = 100
    image_width: int = 224
    image_height: int = 224
    focal_length: float = 245.0

    symmetry_revolution_steps: int = 36
    symmetry_icp_iters: int = 30
    symmetry_tolerance: float = 1e-3
    ordinal_dead_zone: float = 1e-3
    eval_mode: str = "mpcpe"

    loop_epochs: int = 50
    loop_samples: int = 256
    loop_batch_size: int = 64
    loop_ratio: float = 1.0
    loop_online: bool = True
    loop_n_objects: int = 4
    loop_n_poses: int = 10
    loop_n_u: int = 4
    loop_n_phi: int = 8
    learn_rate: float = 0.05
    noise_sigma: Optional[float] = None
    noise_fraction: float = 0.1
    difficulty: str = "lognormal"
    difficulty_median: float = 0.02
    difficulty_sigma: float = 0.75
    real_pool: int = 256
    target_error: Optional[float] = None
    loop_seeds: List[int] = field(default_factory=lambda: list(range(20)))

    def limits(self) -> JointLimits:
        return JointLimits(
            bend_mcp=(math.radians(self.bend_mcp_min_deg), math.radians(self.bend_mcp_max_deg)),
            bend_other=(math.radians(self.bend_other_min_deg), math.radians(self.bend_other_max_deg)),
            splay=(math.radians(self.splay_min_deg), math.radians(self.splay_max_deg)),
            thumb_splay=(math.radians(self.thumb_splay_min_deg), math.radians(self.thumb_splay_max_deg)),
        )

    def grasp_config(self) -> GraspConfig:
        return GraspConfig(
            offset=self.grasp_offset,
            n_sites=self.grasp_sites,
            budget_factor=self.grasp_budget_factor,
            max_iters=self.grasp_max_iters,
            grad_tol=self.grasp_grad_tol,
            w_rep=self.grasp_w_rep,
            eps_contact=self.grasp_eps_contact,
            tau_pen=self.grasp_tau_pen,
            residual_cap=self.grasp_residual_cap,
            reject_unconverged=self.grasp_reject_unconverged,
            coupling=self.coupling,
            limits=self.limits(),
            threads=self.threads,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            sigma_bend=math.radians(self.synth_sigma_bend_deg),
            sigma_splay=math.radians(self.synth_sigma_splay_deg),
            delta_u=self.synth_delta_u,
            delta_phi=math.radians(self.synth_delta_phi_deg),
            shape_sigma=self.shape_sigma,
            mitigation_step=math.radians(self.mitigation_step_deg),
            max_steps=self.mitigation_max_steps,
            tau_pen=self.grasp_tau_pen,
            max_resamples=self.synth_max_resamples,
            camera_radius=self.camera_radius,
            intrinsics=Intrinsics(self.focal_length, self.focal_length, self.image_width / 2.0,
                                  self.image_height / 2.0, self.image_width, self.image_height),
            background_pool=self.background_pool,
            texture_pool=self.texture_pool,
            coupling=self.coupling,
            limits=self.limits(),
        )

    def loop_config(self) -> LoopConfig:
        return LoopConfig(
            epochs=self.loop_epochs,
            samples=self.loop_samples,
            batch_size=self.loop_batch_size,
            ratio=self.loop_ratio,
            online=self.loop_online,
            n_objects=self.loop_n_objects,
            n_poses=self.loop_n_poses,
            viewpoint_grid=(self.loop_n_u, self.loop_n_phi),
            learn_rate=self.learn_rate,
            noise_sigma=self.noise_sigma,
            noise_fraction=self.noise_fraction,
            difficulty=self.difficulty,
            difficulty_mu=math.log(self.difficulty_median),
            difficulty_sigma=self.difficulty_sigma,
            real_pool=self.real_pool,
            target_error=self.target_error,
            threads=self.threads,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {name.upper(): value for name, value in asdict(self).items()}


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_NULLABLE = {"noise_sigma", "target_error"}
_DEFAULTS = RunConfig()


def _coerce(name: str, value: Any) -> Any:
    default = getattr(_DEFAULTS, name)
    key = name.upper()
    if value is None:
        if name in _NULLABLE:
            return None
        raise ConfigError(f"{key} may not be null")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigError(f"{key} must be true or false, got {value!r}")
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list of integers")
        try:
            return [int(v) for v in value]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{key} must be a list of integers: {e}") from e
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("not an integer")
            return int(value)
        if isinstance(default, float) or default is None:
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: invalid value {value!r} ({e})") from e


def config_from_dict(values: Dict[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """
    Apply UPPER_SNAKE key/value pairs on top of `base` (defaults when omitted).

    Raises:
        ConfigError: Unknown key or a value of the wrong type.
    """
    base = base or RunConfig()
    unknown = sorted(k for k in values if k.lower() not in _FIELD_TYPES or k != k.upper())
    if unknown:
        raise ConfigError(f"Unknown configuration key(s): {', '.join(unknown)}")
    return replace(base, **{k.lower(): _coerce(k.lower(), v) for k, v in values.items()})


def load_config(config_path: Optional[str]) -> RunConfig:
    if not config_path:
        return RunConfig()
    try:
        values = FileHandler().read_json(config_path)
    except OSError as e:
        raise ConfigError(f"Could not read config {config_path}: {e}") from e
    except ValueError as e:
        raise ConfigError(f"Config {config_path} is not valid JSON: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"Config {config_path} must hold a flat JSON object")
    for key, value in values.items():
        if isinstance(value, dict):
            raise ConfigError(f"Config key {key} is nested; the config file is flat")
    return config_from_dict(values)


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One --kebab-case flag per RunConfig field, default None so unset flags keep file values."""
    group = parser.add_argument_group("configuration overrides")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.name in ("seed", "threads"):
            continue
        if isinstance(getattr(_DEFAULTS, f.name), list):
            group.add_argument(flag, dest=f"cfg_{f.name}", nargs="+", default=None, metavar=f.name.upper())
        else:
            group.add_argument(flag, dest=f"cfg_{f.name}", default=None, metavar=f.name.upper())


def apply_flag_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            overrides[f.name.upper()] = value
    for name in ("seed", "threads"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name.upper()] = value
    return config_from_dict(overrides, config)
