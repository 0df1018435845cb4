"""Voxel prediction and metrics: per-class IoU and first-hit RayIoU.

RayIoU marches each ray to the first occupied voxel in ground truth and
prediction; a ray counts as a class-c true positive at tolerance tau when
both hit with matching class c and entry depths within tau.  Per-class
values are averaged over the tolerance set.  ``brute_force_ray_iou``
replaces the integer grid traversal with dense sampling at cell_size/10 and
serves as the independent oracle.
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .field import FieldModel, forward_batch
from .pointcloud import ClassTable
from .scene import FREE, ScanSpec, VoxelVolume
from ._util import write_bytes

__all__ = [
    "MetricsReport",
    "RayIoUConfig",
    "predict_volume",
    "iou",
    "ray_iou",
    "brute_force_ray_iou",
    "rays_from_scan",
    "rays_to_gt_surface",
    "first_hits",
    "first_hits_dense",
    "write_metrics_csv",
    "summary_line",
]

_CHUNK = 65536


@dataclasses.dataclass
class MetricsReport:
    """IoU and/or RayIoU results; unset blocks are None.

    Means are arithmetic means over the defined (IoU) or supported (RayIoU)
    class subsets; ``zero_support`` marks a vacuous RayIoU (no ray hits
    anything in either volume), reported as 1.0.
    """

    n_classes: int
    occ_threshold: float | None = None
    iou_per_class: np.ndarray | None = None
    iou_defined: np.ndarray | None = None
    mean_iou: float | None = None
    dynamic_mean_iou: float | None = None
    occupancy_iou: float | None = None
    depth_tolerances: tuple[float, ...] | None = None
    rayiou_per_class: np.ndarray | None = None
    rayiou_support: np.ndarray | None = None
    mean_rayiou: float | None = None
    dynamic_mean_rayiou: float | None = None
    occupancy_rayiou: float | None = None
    ray_counts: np.ndarray | None = None  # (n_classes, n_tolerances, [TP, FP, FN])
    occ_ray_counts: np.ndarray | None = None  # (n_tolerances, [TP, FP, FN])
    zero_support: bool = False

    def merged(self, other: "MetricsReport") -> "MetricsReport":
        out = dataclasses.replace(self)
        for f in dataclasses.fields(other):
            v = getattr(other, f.name)
            if getattr(out, f.name) is None and v is not None:
                setattr(out, f.name, v)
        out.zero_support = self.zero_support or other.zero_support
        return out


@dataclasses.dataclass(frozen=True)
class RayIoUConfig:
    """Ray set plus depth tolerances for RayIoU."""

    origins: np.ndarray
    directions: np.ndarray
    depth_tolerances: tuple[float, ...] = (1.0, 2.0, 4.0)

    def __post_init__(self):
        o = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        if len(o) != len(d):
            raise ValueError("origins and directions must pair up")
        n = np.linalg.norm(d, axis=1)
        if np.any(np.abs(n - 1.0) > 1e-9):
            raise ValueError("directions must be unit-norm")
        taus = tuple(float(t) for t in self.depth_tolerances)
        if len(taus) == 0 or any(t <= 0 for t in taus) or np.any(np.diff(taus) <= 0):
            raise ValueError("tolerances must be positive and increasing")
        object.__setattr__(self, "origins", o)
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "depth_tolerances", taus)


def rays_from_scan(scan: ScanSpec, tolerances=(1.0, 2.0, 4.0)) -> RayIoUConfig:
    """One ray per (timestep origin, grid direction) of the scan."""
    dirs = scan.directions()
    origins = scan.origins()
    o = np.repeat(origins, len(dirs), axis=0)
    d = np.tile(dirs, (len(origins), 1))
    return RayIoUConfig(o, d, tolerances)


def rays_to_gt_surface(
    gt: VoxelVolume, origin, tolerances=(1.0, 2.0, 4.0)
) -> RayIoUConfig:
    """Rays from one origin toward every occupied ground-truth cell center."""
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    centers = gt.centers()[gt.occupancy]
    d = centers - origin
    norms = np.linalg.norm(d, axis=1)
    good = norms > 1e-9
    return RayIoUConfig(
        np.broadcast_to(origin, (int(good.sum()), 3)), d[good] / norms[good, None], tolerances
    )


def predict_volume(
    model: FieldModel,
    mins: Sequence[float],
    maxs: Sequence[float],
    cell_size: float,
    time: float = 0.0,
    occ_threshold: float = 0.5,
) -> VoxelVolume:
    """Query the field at voxel centers: occupied iff occ_prob >= threshold.

    The class is the semantic argmax (lowest index wins ties).
    """
    mins = np.asarray(mins, dtype=np.float64)
    maxs = np.asarray(maxs, dtype=np.float64)
    dims = np.round((maxs - mins) / cell_size).astype(int)
    if np.any(dims < 1) or np.any(np.abs(mins + dims * cell_size - maxs) > 1e-6):
        raise ValueError("extents must be a positive whole number of cells")
    vol = VoxelVolume(np.full(dims, FREE, dtype=np.int32), mins, cell_size, time)
    centers = vol.centers().reshape(-1, 3)
    labels = np.full(len(centers), FREE, dtype=np.int32)
    for lo in range(0, len(centers), _CHUNK):
        hi = min(lo + _CHUNK, len(centers))
        q = np.concatenate([centers[lo:hi], np.full((hi - lo, 1), time)], axis=1)
        occ_p, sem_p, _ = forward_batch(model, q)
        occupied = occ_p >= occ_threshold
        cls = np.argmax(sem_p, axis=1).astype(np.int32)
        labels[lo:hi] = np.where(occupied, cls, FREE)
    vol.labels = labels.reshape(vol.dims)
    return vol


def iou(
    pred: VoxelVolume, gt: VoxelVolume, classes: ClassTable | None = None
) -> MetricsReport:
    """Per-class and binary-occupancy intersection-over-union.

    Classes whose union is empty in both volumes are excluded from means.
    """
    if not pred.same_grid(gt):
        raise ValueError("prediction and ground truth grids differ")
    n_classes = int(
        max(pred.labels.max(initial=FREE), gt.labels.max(initial=FREE)) + 1
    )
    if classes is not None:
        n_classes = max(n_classes, classes.n_classes)
    per_class = np.zeros(max(n_classes, 1))
    defined = np.zeros(max(n_classes, 1), dtype=bool)
    for c in range(n_classes):
        inter = int(np.sum((pred.labels == c) & (gt.labels == c)))
        union = int(np.sum((pred.labels == c) | (gt.labels == c)))
        if union > 0:
            per_class[c] = inter / union
            defined[c] = True
    p_occ, g_occ = pred.occupancy, gt.occupancy
    occ_union = int(np.sum(p_occ | g_occ))
    occ_iou = float(np.sum(p_occ & g_occ) / occ_union) if occ_union else 1.0
    mean = float(per_class[defined].mean()) if defined.any() else 1.0
    dyn = None
    if classes is not None:
        dmask = classes.dynamic_mask[: len(defined)] & defined[: classes.n_classes]
        dyn = float(per_class[: classes.n_classes][dmask].mean()) if dmask.any() else None
    return MetricsReport(
        n_classes=n_classes,
        iou_per_class=per_class,
        iou_defined=defined,
        mean_iou=mean,
        dynamic_mean_iou=dyn,
        occupancy_iou=occ_iou,
    )


def _cell_entry_depth(vol: VoxelVolume, origins, dirs, cells) -> np.ndarray:
    """Analytic ray parameter at which each ray enters its given cell."""
    lo = vol.mins + cells * vol.cell_size
    hi = lo + vol.cell_size
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origins) / dirs
        t2 = (hi - origins) / dirs
    near = np.minimum(t1, t2)
    near = np.where(dirs == 0, -np.inf, near)
    return np.maximum(near.max(axis=1), 0.0)


def first_hits(
    vol: VoxelVolume, origins: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """March rays through the voxel grid (integer stepping) to the first
    occupied cell.  Returns (hit, class, entry_depth) per ray."""
    n = len(origins)
    hit = np.zeros(n, dtype=bool)
    cls = np.full(n, FREE, dtype=np.int32)
    depth = np.full(n, np.inf)
    dims = np.array(vol.dims)

    # clip to the grid's bounding box
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (vol.mins - origins) / dirs
        t2 = (vol.maxs - origins) / dirs
    near = np.where(dirs == 0, np.where((origins >= vol.mins) & (origins <= vol.maxs), -np.inf, np.inf), np.minimum(t1, t2))
    far = np.where(dirs == 0, np.where((origins >= vol.mins) & (origins <= vol.maxs), np.inf, -np.inf), np.maximum(t1, t2))
    t_in = np.maximum(near.max(axis=1), 0.0)
    t_out = far.min(axis=1)
    active = t_in <= t_out

    start = origins + np.where(active, t_in, 0.0)[:, None] * dirs
    cur = np.clip(
        np.floor((start - vol.mins) / vol.cell_size).astype(np.int64), 0, dims - 1
    )
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = vol.mins + (cur + (step > 0)) * vol.cell_size
        tmax = np.where(dirs != 0, (boundary - origins) / dirs, np.inf)
        tdelta = np.where(dirs != 0, vol.cell_size / np.abs(dirs), np.inf)
    t_cur = t_in.copy()

    occ = vol.occupancy
    labels = vol.labels
    while active.any():
        ai = np.flatnonzero(active)
        c = cur[ai]
        occupied = occ[c[:, 0], c[:, 1], c[:, 2]]
        newly = ai[occupied]
        hit[newly] = True
        cls[newly] = labels[c[occupied, 0], c[occupied, 1], c[occupied, 2]]
        depth[newly] = t_cur[newly]
        active[newly] = False

        ai = np.flatnonzero(active)
        if len(ai) == 0:
            break
        axis = np.argmin(tmax[ai], axis=1)
        t_next = tmax[ai, axis]
        done = t_next > t_out[ai]
        active[ai[done]] = False
        ai = ai[~done]
        axis = axis[~done]
        cur[ai, axis] += step[ai, axis]
        t_cur[ai] = tmax[ai, axis]
        tmax[ai, axis] += tdelta[ai, axis]
        oob = (cur[ai, axis] < 0) | (cur[ai, axis] >= dims[axis])
        active[ai[oob]] = False
    return hit, cls, depth


def first_hits_dense(
    vol: VoxelVolume, origins: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Oracle variant of :func:`first_hits`: dense sampling at cell_size/10
    finds the first occupied cell; its entry depth is computed analytically."""
    n = len(origins)
    hit = np.zeros(n, dtype=bool)
    cls = np.full(n, FREE, dtype=np.int32)
    depth = np.full(n, np.inf)
    dims = np.array(vol.dims)
    step = vol.cell_size / 10.0

    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (vol.mins - origins) / dirs
        t2 = (vol.maxs - origins) / dirs
    near = np.where(dirs == 0, np.where((origins >= vol.mins) & (origins <= vol.maxs), -np.inf, np.inf), np.minimum(t1, t2))
    far = np.where(dirs == 0, np.where((origins >= vol.mins) & (origins <= vol.maxs), np.inf, -np.inf), np.maximum(t1, t2))
    t_in = np.maximum(near.max(axis=1), 0.0)
    t_out = far.min(axis=1)

    for i in range(n):
        if t_in[i] > t_out[i]:
            continue
        ts = np.arange(t_in[i], t_out[i] + step, step)
        pts = origins[i] + ts[:, None] * dirs[i]
        cells = np.floor((pts - vol.mins) / vol.cell_size).astype(np.int64)
        inb = np.all((cells >= 0) & (cells < dims), axis=1)
        occ = np.zeros(len(ts), dtype=bool)
        occ[inb] = vol.occupancy[cells[inb, 0], cells[inb, 1], cells[inb, 2]]
        if not occ.any():
            continue
        k = int(np.argmax(occ))
        cell = cells[k]
        hit[i] = True
        cls[i] = vol.labels[cell[0], cell[1], cell[2]]
        depth[i] = _cell_entry_depth(vol, origins[i][None], dirs[i][None], cell[None])[0]
    return hit, cls, depth


def _count_and_score(
    gt_hit, gt_cls, gt_depth, pr_hit, pr_cls, pr_depth, cfg: RayIoUConfig,
    n_classes: int, classes: ClassTable | None,
) -> MetricsReport:
    taus = cfg.depth_tolerances
    counts = np.zeros((n_classes, len(taus), 3), dtype=np.int64)
    occ_counts = np.zeros((len(taus), 3), dtype=np.int64)
    both = gt_hit & pr_hit
    close = np.full(len(gt_hit), np.inf)
    close[both] = np.abs(pr_depth[both] - gt_depth[both])
    for ti, tau in enumerate(taus):
        matched = both & (close <= tau)
        occ_counts[ti] = (
            int(matched.sum()),
            int((pr_hit & ~matched).sum()),
            int((gt_hit & ~matched).sum()),
        )
        cls_match = matched & (gt_cls == pr_cls)
        for c in range(n_classes):
            tp = int(np.sum(cls_match & (gt_cls == c)))
            fp = int(np.sum(pr_hit & (pr_cls == c))) - tp
            fn = int(np.sum(gt_hit & (gt_cls == c))) - tp
            counts[c, ti] = (tp, fp, fn)

    support = counts.sum(axis=(1, 2)) > 0
    per_class = np.ones(n_classes)
    for c in range(n_classes):
        if support[c]:
            denom = counts[c].sum(axis=1)
            per_class[c] = float(np.mean(counts[c, :, 0] / np.maximum(denom, 1)))
    occ_denom = occ_counts.sum(axis=1)
    zero_support = not (gt_hit.any() or pr_hit.any())
    occ_val = float(np.mean(occ_counts[:, 0] / np.maximum(occ_denom, 1))) if not zero_support else 1.0
    mean = float(per_class[support].mean()) if support.any() else 1.0
    dyn = None
    if classes is not None:
        dmask = classes.dynamic_mask[: n_classes] & support[: classes.n_classes]
        dyn = float(per_class[: classes.n_classes][dmask].mean()) if dmask.any() else None
    return MetricsReport(
        n_classes=n_classes,
        depth_tolerances=taus,
        rayiou_per_class=per_class,
        rayiou_support=counts.sum(axis=(1, 2)),
        mean_rayiou=mean,
        dynamic_mean_rayiou=dyn,
        occupancy_rayiou=occ_val,
        ray_counts=counts,
        occ_ray_counts=occ_counts,
        zero_support=zero_support,
    )


def _ray_metric(pred, gt, cfg, classes, hit_fn) -> MetricsReport:
    if not pred.same_grid(gt):
        raise ValueError("prediction and ground truth grids differ")
    n_classes = int(max(pred.labels.max(initial=FREE), gt.labels.max(initial=FREE)) + 1)
    if classes is not None:
        n_classes = max(n_classes, classes.n_classes)
    n_classes = max(n_classes, 1)
    gt_hit, gt_cls, gt_depth = hit_fn(gt, cfg.origins, cfg.directions)
    pr_hit, pr_cls, pr_depth = hit_fn(pred, cfg.origins, cfg.directions)
    return _count_and_score(
        gt_hit, gt_cls, gt_depth, pr_hit, pr_cls, pr_depth, cfg, n_classes, classes
    )


def ray_iou(
    pred: VoxelVolume, gt: VoxelVolume, cfg: RayIoUConfig,
    classes: ClassTable | None = None,
) -> MetricsReport:
    """First-hit depth/class agreement averaged over the tolerance set."""
    return _ray_metric(pred, gt, cfg, classes, first_hits)


def brute_force_ray_iou(
    pred: VoxelVolume, gt: VoxelVolume, cfg: RayIoUConfig,
    classes: ClassTable | None = None,
) -> MetricsReport:
    """Reference RayIoU using dense per-ray sampling instead of traversal."""
    return _ray_metric(pred, gt, cfg, classes, first_hits_dense)


def summary_line(report: MetricsReport) -> str:
    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    return ",".join(
        [
            fmt(report.mean_iou),
            fmt(report.dynamic_mean_iou),
            fmt(report.occupancy_iou),
            fmt(report.mean_rayiou),
            fmt(report.dynamic_mean_rayiou),
            fmt(report.occupancy_rayiou),
        ]
    )


def write_metrics_csv(report: MetricsReport, destination, classes: ClassTable | None = None) -> None:
    """Per-class rows `class,iou,rayiou,support` then one summary line."""
    lines = ["class,iou,rayiou,support\n"]
    for c in range(report.n_classes):
        name = classes.names[c] if classes is not None and c < classes.n_classes else str(c)
        iou_v = ""
        if report.iou_per_class is not None and report.iou_defined is not None:
            iou_v = f"{report.iou_per_class[c]:.6f}" if report.iou_defined[c] else ""
        ray_v = ""
        sup = ""
        if report.rayiou_per_class is not None:
            sup_n = int(report.rayiou_support[c])
            sup = str(sup_n)
            ray_v = f"{report.rayiou_per_class[c]:.6f}" if sup_n else ""
        lines.append(f"{name},{iou_v},{ray_v},{sup}\n")
    lines.append("# mean_iou,dyn_iou,occ_iou,mean_rayiou,dyn_rayiou,occ_rayiou\n")
    lines.append(summary_line(report) + "\n")
    write_bytes(destination, "".join(lines).encode())
