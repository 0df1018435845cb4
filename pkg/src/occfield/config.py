"""Plain-text configuration: INI-style key/value files with [section] blocks.

Unknown sections or keys are hard errors.  Scene files declare one primitive
per block ([slab:NAME], [box:NAME], [cylinder:NAME]); scan files describe the
sensor trajectory and ray grid; run files tie everything together for the
command-line pipeline.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .errors import ConfigError
from .geometry import ContractionParams, DepthBinning, FourierConfig
from .pointcloud import ClassTable, read_class_table
from .scene import Box, Cylinder, GroundSlab, SceneSpec, ScanSpec

__all__ = [
    "RunConfig",
    "GridConfig",
    "MetricsConfig",
    "TrainSettings",
    "read_scene_file",
    "read_scan_file",
    "read_run_config",
]


def _parser(path: Path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=(";", "#")
    )
    try:
        with open(path) as f:
            cp.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}")
    return cp


def _check_keys(path: Path, section: str, items: dict, known: dict):
    for key in items:
        if key not in known:
            raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")


def _floats(raw: str, n: int | None = None) -> tuple[float, ...]:
    vals = tuple(float(v) for v in raw.split())
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} numbers, got {raw!r}")
    return vals


_SCENE_KEYS = {"bounds": float, "classes": str}
_SLAB_KEYS = {"class": int, "z_min": float, "z_max": float, "velocity": str}
_BOX_KEYS = {"class": int, "center": str, "size": str, "velocity": str}
_CYL_KEYS = {
    "class": int, "center": str, "radius": float,
    "z_min": float, "z_max": float, "velocity": str,
}


def read_scene_file(path) -> SceneSpec:
    path = Path(path)
    cp = _parser(path)
    bounds = 50.0
    classes: ClassTable | None = None
    primitives = []
    for section in cp.sections():
        items = dict(cp.items(section))
        if section == "scene":
            _check_keys(path, section, items, _SCENE_KEYS)
            bounds = float(items.get("bounds", bounds))
            if "classes" in items:
                classes = read_class_table(path.parent / items["classes"])
        elif section.startswith("slab:"):
            _check_keys(path, section, items, _SLAB_KEYS)
            primitives.append(GroundSlab(
                z_min=float(items["z_min"]), z_max=float(items["z_max"]),
                class_id=int(items["class"]),
                velocity=_floats(items.get("velocity", "0 0 0"), 3),
            ))
        elif section.startswith("box:"):
            _check_keys(path, section, items, _BOX_KEYS)
            primitives.append(Box(
                center=_floats(items["center"], 3), size=_floats(items["size"], 3),
                class_id=int(items["class"]),
                velocity=_floats(items.get("velocity", "0 0 0"), 3),
            ))
        elif section.startswith("cylinder:"):
            _check_keys(path, section, items, _CYL_KEYS)
            primitives.append(Cylinder(
                center=_floats(items["center"], 2), radius=float(items["radius"]),
                z_min=float(items["z_min"]), z_max=float(items["z_max"]),
                class_id=int(items["class"]),
                velocity=_floats(items.get("velocity", "0 0 0"), 3),
            ))
        else:
            raise ConfigError(f"{path}: unknown section [{section}]")
    try:
        return SceneSpec(tuple(primitives), bounds, classes)
    except ValueError as e:
        raise ConfigError(f"{path}: {e}")


_SCAN_KEYS = {"timesteps": str, "max_range": float, "noise_sigma": float}
_ORIGIN_KEYS = {"start": str, "velocity": str}
_RAY_KEYS = {
    "azimuth_count": int, "elevation_count": int,
    "elevation_min": float, "elevation_max": float,
    "azimuth_min": float, "azimuth_max": float,
}


def read_scan_file(path) -> ScanSpec:
    path = Path(path)
    cp = _parser(path)
    kw: dict = {}
    for section in cp.sections():
        items = dict(cp.items(section))
        if section == "scan":
            _check_keys(path, section, items, _SCAN_KEYS)
            kw["timesteps"] = _floats(items["timesteps"])
            if "max_range" in items:
                kw["max_range"] = float(items["max_range"])
            if "noise_sigma" in items:
                kw["noise_sigma"] = float(items["noise_sigma"])
        elif section == "origin":
            _check_keys(path, section, items, _ORIGIN_KEYS)
            kw["origin_start"] = _floats(items["start"], 3)
            if "velocity" in items:
                kw["origin_velocity"] = _floats(items["velocity"], 3)
        elif section == "rays":
            _check_keys(path, section, items, _RAY_KEYS)
            for key, conv in _RAY_KEYS.items():
                if key in items:
                    kw[key] = conv(items[key])
        else:
            raise ConfigError(f"{path}: unknown section [{section}]")
    if "timesteps" not in kw or "origin_start" not in kw:
        raise ConfigError(f"{path}: scan needs [scan] timesteps and [origin] start")
    try:
        return ScanSpec(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}")


@dataclasses.dataclass(frozen=True)
class GridConfig:
    mins: tuple[float, float, float]
    maxs: tuple[float, float, float]
    cell_size: float


@dataclasses.dataclass(frozen=True)
class MetricsConfig:
    occ_threshold: float = 0.5
    tolerances: tuple[float, ...] = (1.0, 2.0, 4.0)
    ray_source: str = "scan"  # or "surface"


@dataclasses.dataclass(frozen=True)
class TrainSettings:
    """Typed view of the [train] section (model shape plus optimizer)."""

    mode: str = "query"
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 5000
    batch_size: int = 2048
    lambda_occ: float = 1.0
    lambda_sem: float = 0.5
    lambda_vfm: float = 0.5
    weight_decay: float = 1e-4
    grid_size: int = 128
    grid_channels: int = 16
    hidden_width: int = 160
    hidden_layers: int = 4
    k_hr: float = 40.0
    beta: float = 0.8
    fourier_bands: int = 16
    fourier_min: float = 1.0
    fourier_max: float = 10.0
    feature_dim: int = 0
    render_near: float = 0.5
    render_far: float = 60.0
    render_coarse: int = 48
    render_importance: int = 16

    def contraction(self) -> ContractionParams:
        return ContractionParams(self.k_hr, self.beta)

    def fourier(self) -> FourierConfig:
        return FourierConfig(self.fourier_bands, self.fourier_min, self.fourier_max)


@dataclasses.dataclass
class RunConfig:
    scene_path: Path
    scan_path: Path
    output_dir: Path
    seed: int | None
    sampling: dict
    train: TrainSettings
    grid: GridConfig
    metrics: MetricsConfig
    geometry: DepthBinning


_RUN_KEYS = {"scene": str, "scan": str, "output_dir": str, "seed": int}
_SAMPLING_KEYS = {
    "delta": float, "n_neg_per_point": int, "n_pos_per_point": int,
    "t_min": float, "t_max": float,
}
_TRAIN_KEYS = {
    "mode": str, "learning_rate": float, "warmup_steps": int, "total_steps": int,
    "batch_size": int, "lambda_occ": float, "lambda_sem": float, "lambda_vfm": float,
    "weight_decay": float, "grid_size": int, "grid_channels": int,
    "hidden_width": int, "hidden_layers": int, "k_hr": float, "beta": float,
    "fourier_bands": int, "fourier_min": float, "fourier_max": float,
    "feature_dim": int, "render_near": float, "render_far": float,
    "render_coarse": int, "render_importance": int,
}
_GRID_KEYS = {
    "x_min": float, "x_max": float, "y_min": float, "y_max": float,
    "z_min": float, "z_max": float, "cell_size": float,
}
_METRICS_KEYS = {"occ_threshold": float, "tolerances": str, "ray_source": str}
_GEOMETRY_KEYS = {
    "d_near": float, "d_far": float, "alpha": float, "n_bins": int,
    "infinity_bin": float,
}


def read_run_config(path) -> RunConfig:
    path = Path(path)
    cp = _parser(path)
    known_sections = {"run", "sampling", "train", "grid", "metrics", "geometry"}
    for section in cp.sections():
        if section not in known_sections:
            raise ConfigError(f"{path}: unknown section [{section}]")
    if not cp.has_section("run"):
        raise ConfigError(f"{path}: missing [run] section")

    run = dict(cp.items("run"))
    _check_keys(path, "run", run, _RUN_KEYS)
    for req in ("scene", "scan", "output_dir"):
        if req not in run:
            raise ConfigError(f"{path}: [run] requires {req!r}")
    base = path.parent

    sampling = {}
    if cp.has_section("sampling"):
        items = dict(cp.items("sampling"))
        _check_keys(path, "sampling", items, _SAMPLING_KEYS)
        sampling = {k: _SAMPLING_KEYS[k](v) for k, v in items.items()}

    train_kw = {}
    if cp.has_section("train"):
        items = dict(cp.items("train"))
        _check_keys(path, "train", items, _TRAIN_KEYS)
        train_kw = {k: _TRAIN_KEYS[k](v) for k, v in items.items()}
    train = TrainSettings(**train_kw)
    if train.mode not in ("query", "rendering"):
        raise ConfigError(f"{path}: train mode must be 'query' or 'rendering'")

    if cp.has_section("grid"):
        items = dict(cp.items("grid"))
        _check_keys(path, "grid", items, _GRID_KEYS)
        g = {k: _GRID_KEYS[k](v) for k, v in items.items()}
    else:
        g = {}
    grid = GridConfig(
        (g.get("x_min", -20.0), g.get("y_min", -20.0), g.get("z_min", -2.0)),
        (g.get("x_max", 20.0), g.get("y_max", 20.0), g.get("z_max", 2.0)),
        g.get("cell_size", 0.4),
    )

    metrics = MetricsConfig()
    if cp.has_section("metrics"):
        items = dict(cp.items("metrics"))
        _check_keys(path, "metrics", items, _METRICS_KEYS)
        metrics = MetricsConfig(
            occ_threshold=float(items.get("occ_threshold", 0.5)),
            tolerances=_floats(items.get("tolerances", "1 2 4")),
            ray_source=items.get("ray_source", "scan"),
        )
        if metrics.ray_source not in ("scan", "surface"):
            raise ConfigError(f"{path}: ray_source must be 'scan' or 'surface'")

    geometry = DepthBinning()
    if cp.has_section("geometry"):
        items = dict(cp.items("geometry"))
        _check_keys(path, "geometry", items, _GEOMETRY_KEYS)
        geometry = DepthBinning(
            d_near=float(items.get("d_near", 40.0)),
            d_far=float(items.get("d_far", 100.0)),
            alpha=float(items.get("alpha", 0.3)),
            n_bins=int(items.get("n_bins", 64)),
            infinity_bin_depth=(
                float(items["infinity_bin"]) if "infinity_bin" in items else 180.0
            ),
        )

    return RunConfig(
        scene_path=base / run["scene"],
        scan_path=base / run["scan"],
        output_dir=base / run["output_dir"],
        seed=int(run["seed"]) if "seed" in run else None,
        sampling=sampling,
        train=train,
        grid=grid,
        metrics=metrics,
        geometry=geometry,
    )
