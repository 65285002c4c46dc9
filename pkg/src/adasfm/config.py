"""Configuration dataclasses for every pipeline stage.

Defaults follow the running parameters the pipeline was tuned with: 5 deg
rotation-consistency gate, 500 ms sensor staleness gate, 4 px epipolar gate,
0.3 overlap target, batch visibility 10, and the adaptive alignment schedule
(tau 1.0, +0.2 / -0.1, ratio band 0.7..0.9).
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields


@dataclass(frozen=True)
class GlobalSfmConfig:
    # rotation averaging
    rotation_max_iters: int = 60
    rotation_step_tol: float = 1e-12
    rotation_cauchy_deg: float = 3.0
    edge_filter_deg: float = 5.0
    # sensor gating
    prior_max_dt_ms: float = 500.0
    # translation averaging
    translation_max_iters: int = 100
    translation_obj_tol: float = 1e-8
    translation_irls_delta: float = 1e-5
    rigidity_check: bool = True
    # strict triangulation for the global model
    min_triangulation_deg: float = 5.0
    # bundle adjustment
    ba_huber_px: float = 4.0
    ba_filter_px: float = 4.0
    ba_max_outer: int = 5
    ba_filter_stop_frac: float = 1e-3
    ba_max_inner: int = 25
    # cameras with fewer surviving observations keep their averaged pose
    ba_min_camera_obs: int = 12


@dataclass(frozen=True)
class MatchRefineConfig:
    epipolar_px: float = 4.0
    min_edge_inliers: int = 15


@dataclass(frozen=True)
class PartitionConfig:
    max_partition_size: int = 500
    overlap_target: float = 0.3


@dataclass(frozen=True)
class LocalSfmConfig:
    batch_min_points: int = 10
    min_init_matches: int = 50
    min_init_angle_deg: float = 4.0
    ransac_iters: int = 256
    register_inlier_px: float = 8.0
    register_min_inlier_frac: float = 0.25
    tri_min_angle_deg: float = 1.5
    tri_max_reproj_px: float = 4.0
    lambda_rot: float = 10.0
    lambda_dir: float = 10.0
    max_deferrals: int = 3
    ba_growth_frac: float = 0.1
    ba_huber_px: float = 4.0
    ba_filter_px: float = 4.0
    ba_max_inner: int = 25
    ba_periodic_inner: int = 10
    seed: int = 42


@dataclass(frozen=True)
class AlignmentConfig:
    tau_init: float = 1.0
    alpha_inc: float = 0.2
    alpha_dec: float = 0.1
    r_min: float = 0.7
    r_max: float = 0.9
    max_iters: int = 10
    ransac_iters: int = 256
    min_common: int = 3
    final_ba: bool = True
    final_ba_inner: int = 20
    seed: int = 42


@dataclass(frozen=True)
class PipelineConfig:
    global_sfm: GlobalSfmConfig = field(default_factory=GlobalSfmConfig)
    refine: MatchRefineConfig = field(default_factory=MatchRefineConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    local_sfm: LocalSfmConfig = field(default_factory=LocalSfmConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    seed: int = 42
    workers: int = 1


_SECTIONS = {
    "global": "global_sfm",
    "refine": "refine",
    "partition": "partition",
    "local": "local_sfm",
    "align": "alignment",
}


def flatten_config(cfg: PipelineConfig) -> list[tuple[str, object]]:
    """Stable (key, value) listing, sections prefixed, field order preserved."""
    out: list[tuple[str, object]] = []
    for prefix, attr in _SECTIONS.items():
        sub = getattr(cfg, attr)
        for f in fields(sub):
            out.append((f"{prefix}.{f.name}", getattr(sub, f.name)))
    out.append(("seed", cfg.seed))
    out.append(("workers", cfg.workers))
    return out


def config_from_items(items: dict[str, str]) -> PipelineConfig:
    """Build a PipelineConfig from flat string key/values (file or CLI overrides).

    Unknown keys raise ValueError so config typos fail loudly.
    """
    section_values: dict[str, dict[str, object]] = {attr: {} for attr in _SECTIONS.values()}
    top: dict[str, object] = {}
    classes = {
        "global_sfm": GlobalSfmConfig,
        "refine": MatchRefineConfig,
        "partition": PartitionConfig,
        "local_sfm": LocalSfmConfig,
        "alignment": AlignmentConfig,
    }
    for key, raw in items.items():
        if key in ("seed", "workers"):
            top[key] = int(raw)
            continue
        if "." not in key:
            raise ValueError(f"unknown config key: {key}")
        prefix, name = key.split(".", 1)
        if prefix not in _SECTIONS:
            raise ValueError(f"unknown config section: {prefix}")
        attr = _SECTIONS[prefix]
        cls = classes[attr]
        matching = [f for f in fields(cls) if f.name == name]
        if not matching:
            raise ValueError(f"unknown config key: {key}")
        f = matching[0]
        if f.type in ("int", int):
            val: object = int(raw)
        elif f.type in ("float", float):
            val = float(raw)
        elif f.type in ("bool", bool):
            val = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            val = raw
        section_values[attr][name] = val
    return PipelineConfig(
        global_sfm=GlobalSfmConfig(**section_values["global_sfm"]),
        refine=MatchRefineConfig(**section_values["refine"]),
        partition=PartitionConfig(**section_values["partition"]),
        local_sfm=LocalSfmConfig(**section_values["local_sfm"]),
        alignment=AlignmentConfig(**section_values["alignment"]),
        **top,
    )
