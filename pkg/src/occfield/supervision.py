"""4D query generation from point clouds.

Negative (free) queries are drawn along the sensor ray strictly between the
origin and the surface point; positive (occupied) queries sit within a
buffer of depth ``delta`` behind the surface point along the same ray.
Batches are balanced to equal positive/negative counts and shuffled
deterministically.
"""

from __future__ import annotations

import dataclasses
import struct
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    EmptyBatchError,
    FeatureDimMismatchError,
    FormatVersionError,
    TruncatedFileError,
)
from .geometry import Query4
from .pointcloud import UNLABELED, PointCloud, PointRecord
from .scene import SceneSpec, oracle_query_batch
from ._util import read_bytes, write_bytes

__all__ = [
    "SamplingConfig",
    "QuerySample",
    "QueryBatch",
    "gen_negative_queries",
    "gen_positive_queries",
    "build_query_set",
    "validate_against_oracle",
    "SupervisionReport",
    "write_query_batch",
    "read_query_batch",
]

DEGENERATE_RAY_EPS = 1e-6  # meters; rays shorter than this are skipped


@dataclasses.dataclass(frozen=True)
class SamplingConfig:
    delta: float = 0.4
    n_neg_per_point: int = 2
    n_pos_per_point: int = 2
    t_min: float = -1.5
    t_max: float = 1.5
    r_distribution: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.n_neg_per_point < 0 or self.n_pos_per_point < 0:
            raise ValueError("per-point counts must be non-negative")
        if not (self.t_min <= 0.0 <= self.t_max):
            raise ValueError("temporal window must contain the reference time 0")
        if self.r_distribution != "uniform":
            raise ValueError(f"unknown r_distribution {self.r_distribution!r}")


@dataclasses.dataclass
class QuerySample:
    """One supervision sample: a 4D query with its targets."""

    query: Query4
    occupancy_target: int
    semantic_target: int | None = None
    feature_target: np.ndarray | None = None
    source_point_index: int = -1


class QueryBatch:
    """Column store of query samples.

    ``classes`` uses the UNLABELED sentinel where no semantic target exists;
    feature targets exist exactly for positive samples when feature_dim > 0.
    """

    def __init__(
        self,
        queries: np.ndarray,
        occupancy: np.ndarray,
        classes: np.ndarray,
        features: np.ndarray | None = None,
        source_indices: np.ndarray | None = None,
    ):
        n = len(queries)
        self.queries = np.asarray(queries, dtype=np.float64).reshape(n, 4)
        self.occupancy = np.asarray(occupancy, dtype=np.uint8).reshape(n)
        self.classes = np.asarray(classes, dtype=np.uint16).reshape(n)
        if features is None:
            features = np.zeros((n, 0))
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            raise ValueError("features must have shape (n, feature_dim)")
        self.features = feats
        if source_indices is None:
            source_indices = np.full(n, -1, dtype=np.int64)
        self.source_indices = np.asarray(source_indices, dtype=np.int64).reshape(n)
        neg_labeled = (self.occupancy == 0) & (self.classes != UNLABELED)
        if neg_labeled.any():
            raise ValueError("negative samples must not carry semantic targets")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def positive_count(self) -> int:
        return int(np.sum(self.occupancy == 1))

    @property
    def negative_count(self) -> int:
        return int(np.sum(self.occupancy == 0))

    def __len__(self) -> int:
        return len(self.queries)

    def sample(self, i: int) -> QuerySample:
        q = Query4(*self.queries[i])
        occ = int(self.occupancy[i])
        cls = int(self.classes[i])
        return QuerySample(
            q,
            occ,
            None if cls == UNLABELED else cls,
            self.features[i].copy() if occ == 1 and self.feature_dim else None,
            int(self.source_indices[i]),
        )

    def take(self, indices: np.ndarray) -> "QueryBatch":
        idx = np.asarray(indices)
        return QueryBatch(
            self.queries[idx], self.occupancy[idx], self.classes[idx],
            self.features[idx], self.source_indices[idx],
        )


def _open_unit(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform draws in the open interval (0, 1); zeros are redrawn."""
    u = rng.random(shape)
    mask = u == 0.0
    while mask.any():
        u[mask] = rng.random(int(mask.sum()))
        mask = u == 0.0
    return u


def gen_negative_queries(
    point: PointRecord, cfg: SamplingConfig, rng: np.random.Generator | None = None
) -> list[QuerySample]:
    """Free-space samples at o + r (p - o), r ~ U(0, 1) open.

    Degenerate rays (|p - o| below DEGENERATE_RAY_EPS) yield an empty list.
    """
    if cfg.n_neg_per_point <= 0:
        raise ValueError("n_neg_per_point must be positive")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    d = np.asarray(point.position, dtype=np.float64) - np.asarray(point.origin, dtype=np.float64)
    if np.linalg.norm(d) < DEGENERATE_RAY_EPS:
        return []
    r = _open_unit(rng, cfg.n_neg_per_point)
    pts = np.asarray(point.origin, dtype=np.float64) + r[:, None] * d
    return [
        QuerySample(Query4(*p, point.time), 0) for p in pts
    ]


def gen_positive_queries(
    point: PointRecord, cfg: SamplingConfig, rng: np.random.Generator | None = None
) -> list[QuerySample]:
    """Occupied samples at p + r * (p - o)/|p - o|, r ~ U(0, delta) open.

    Semantic and feature targets are copied verbatim from the source point
    (an UNLABELED class yields no semantic target).
    """
    if cfg.n_pos_per_point <= 0:
        raise ValueError("n_pos_per_point must be positive")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    p = np.asarray(point.position, dtype=np.float64)
    d = p - np.asarray(point.origin, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm < DEGENERATE_RAY_EPS:
        return []
    r = _open_unit(rng, cfg.n_pos_per_point) * cfg.delta
    pts = p + r[:, None] * (d / norm)
    cls = None if point.class_id == UNLABELED else int(point.class_id)
    return [
        QuerySample(
            Query4(*q, point.time), 1, cls,
            None if point.feature is None else np.array(point.feature, dtype=np.float64),
        )
        for q in pts
    ]


def _cloud_queries(pc: PointCloud, cfg: SamplingConfig, rng: np.random.Generator):
    """Vectorized per-cloud generation; mirrors the per-point operations.

    The uniform draws depend only on the point count, so generation commutes
    with rigid transforms of the inputs.  r matrices are drawn up front and
    degenerate rays dropped afterwards.
    """
    n = len(pc)
    d = pc.positions - pc.origins
    norms = np.linalg.norm(d, axis=1)
    good = norms >= DEGENERATE_RAY_EPS
    r_neg = _open_unit(rng, (n, cfg.n_neg_per_point))
    r_pos = _open_unit(rng, (n, cfg.n_pos_per_point)) * cfg.delta

    gi = np.flatnonzero(good)
    neg_pts = pc.origins[gi, None, :] + r_neg[gi, :, None] * d[gi, None, :]
    neg_q = np.concatenate(
        [
            neg_pts.reshape(-1, 3),
            np.repeat(pc.times[gi], cfg.n_neg_per_point)[:, None],
        ],
        axis=1,
    )
    neg_src = np.repeat(gi, cfg.n_neg_per_point)

    unit = d[gi] / norms[gi, None]
    pos_pts = pc.positions[gi, None, :] + r_pos[gi, :, None] * unit[:, None, :]
    pos_q = np.concatenate(
        [
            pos_pts.reshape(-1, 3),
            np.repeat(pc.times[gi], cfg.n_pos_per_point)[:, None],
        ],
        axis=1,
    )
    pos_src = np.repeat(gi, cfg.n_pos_per_point)
    pos_cls = np.repeat(pc.class_ids[gi], cfg.n_pos_per_point)
    pos_feat = np.repeat(pc.features[gi], cfg.n_pos_per_point, axis=0)
    skipped = int(n - good.sum())
    return neg_q, neg_src, pos_q, pos_src, pos_cls, pos_feat, skipped


def build_query_set(clouds: Sequence[PointCloud], cfg: SamplingConfig) -> QueryBatch:
    """Balanced, shuffled 4D query batch from multi-frame point clouds.

    Points outside [t_min, t_max] are excluded.  After per-point generation
    (frame order, negatives then positives per frame) the larger side is
    uniformly down-sampled to the smaller one and the batch is shuffled; all
    randomness comes from cfg.seed.
    """
    if not clouds:
        raise EmptyBatchError("no point clouds given")
    fdims = {c.feature_dim for c in clouds}
    if len(fdims) > 1:
        raise FeatureDimMismatchError(f"clouds disagree on feature_dim: {sorted(fdims)}")
    fdim = fdims.pop()
    rng = np.random.default_rng(cfg.seed)

    neg_parts, pos_parts = [], []
    offset = 0
    for pc in clouds:
        in_window = (pc.times >= cfg.t_min) & (pc.times <= cfg.t_max)
        sub = pc.take(np.flatnonzero(in_window))
        if len(sub) == 0:
            offset += len(pc)
            continue
        neg_q, neg_src, pos_q, pos_src, pos_cls, pos_feat, _ = _cloud_queries(sub, cfg, rng)
        src_map = np.flatnonzero(in_window) + offset
        neg_parts.append((neg_q, src_map[neg_src]))
        pos_parts.append((pos_q, src_map[pos_src], pos_cls, pos_feat))
        offset += len(pc)

    if not neg_parts and not pos_parts:
        raise EmptyBatchError("no usable points in the temporal window")
    neg_q = np.concatenate([p[0] for p in neg_parts]) if neg_parts else np.zeros((0, 4))
    neg_src = np.concatenate([p[1] for p in neg_parts]) if neg_parts else np.zeros(0, np.int64)
    pos_q = np.concatenate([p[0] for p in pos_parts]) if pos_parts else np.zeros((0, 4))
    pos_src = np.concatenate([p[1] for p in pos_parts]) if pos_parts else np.zeros(0, np.int64)
    pos_cls = np.concatenate([p[2] for p in pos_parts]) if pos_parts else np.zeros(0, np.uint16)
    pos_feat = (
        np.concatenate([p[3] for p in pos_parts]) if pos_parts else np.zeros((0, fdim))
    )

    m = min(len(neg_q), len(pos_q))
    if m == 0:
        raise EmptyBatchError("balancing produced an empty batch")
    if len(neg_q) > m:
        keep = np.sort(rng.choice(len(neg_q), size=m, replace=False))
        neg_q, neg_src = neg_q[keep], neg_src[keep]
    if len(pos_q) > m:
        keep = np.sort(rng.choice(len(pos_q), size=m, replace=False))
        pos_q, pos_src, pos_cls, pos_feat = (
            pos_q[keep], pos_src[keep], pos_cls[keep], pos_feat[keep]
        )

    queries = np.concatenate([neg_q, pos_q])
    occupancy = np.concatenate([np.zeros(m, np.uint8), np.ones(m, np.uint8)])
    classes = np.concatenate([np.full(m, UNLABELED, np.uint16), pos_cls])
    features = np.concatenate([np.zeros((m, fdim)), pos_feat])
    src = np.concatenate([neg_src, pos_src])
    perm = rng.permutation(2 * m)
    return QueryBatch(queries[perm], occupancy[perm], classes[perm], features[perm], src[perm])


@dataclasses.dataclass(frozen=True)
class SupervisionReport:
    negative_purity: float
    positive_purity: float
    semantic_agreement: float
    negative_count: int
    positive_count: int

    def lines(self) -> str:
        return (
            f"negative_purity={self.negative_purity:.6f}\n"
            f"positive_purity={self.positive_purity:.6f}\n"
            f"semantic_agreement={self.semantic_agreement:.6f}\n"
            f"negative_count={self.negative_count}\n"
            f"positive_count={self.positive_count}\n"
        )


def validate_against_oracle(batch: QueryBatch, scene: SceneSpec) -> SupervisionReport:
    """Check supervision targets against the exact scene oracle.

    negative_purity: fraction of negatives the oracle marks free.
    positive_purity: fraction of positives the oracle marks occupied.
    semantic_agreement: among positives with a semantic target that the
    oracle marks occupied, the fraction whose class matches the oracle
    (1.0 when vacuous).
    """
    occ, cls = oracle_query_batch(scene, batch.queries[:, :3], batch.queries[:, 3])
    neg = batch.occupancy == 0
    pos = batch.occupancy == 1
    n_neg, n_pos = int(neg.sum()), int(pos.sum())
    neg_purity = float(np.mean(~occ[neg])) if n_neg else 1.0
    pos_purity = float(np.mean(occ[pos])) if n_pos else 1.0
    labeled = pos & (batch.classes != UNLABELED) & occ
    if labeled.any():
        agreement = float(np.mean(cls[labeled] == batch.classes[labeled]))
    else:
        agreement = 1.0
    return SupervisionReport(neg_purity, pos_purity, agreement, n_neg, n_pos)


_QS_MAGIC = b"QOQS"
_QS_VERSION = 1
_QS_HEADER = struct.Struct("<IQH")  # version, count, feature_dim


def _sample_dtype(feature_dim: int) -> np.dtype:
    fields = [("query", "<f4", (4,)), ("occ", "u1"), ("class", "<u2")]
    if feature_dim:
        fields.append(("feature", "<f4", (feature_dim,)))
    return np.dtype(fields)


def write_query_batch(batch: QueryBatch, destination) -> None:
    """QOQS format (float32 payload; provenance indices are not stored)."""
    rec = np.zeros(len(batch), dtype=_sample_dtype(batch.feature_dim))
    rec["query"] = batch.queries.astype("<f4")
    rec["occ"] = batch.occupancy
    rec["class"] = batch.classes
    if batch.feature_dim:
        rec["feature"] = batch.features.astype("<f4")
    blob = _QS_MAGIC + _QS_HEADER.pack(_QS_VERSION, len(batch), batch.feature_dim)
    write_bytes(destination, blob + rec.tobytes())


def read_query_batch(source) -> QueryBatch:
    data = read_bytes(source)
    if len(data) < 4 or data[:4] != _QS_MAGIC:
        raise BadMagicError("not a QOQS query batch file")
    if len(data) < 4 + _QS_HEADER.size:
        raise TruncatedFileError("QOQS header truncated")
    version, count, feature_dim = _QS_HEADER.unpack_from(data, 4)
    if version != _QS_VERSION:
        raise FormatVersionError(f"unsupported QOQS version {version}")
    dtype = _sample_dtype(feature_dim)
    payload = data[4 + _QS_HEADER.size:]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedFileError("QOQS payload truncated")
    rec = np.frombuffer(payload, dtype=dtype, count=count)
    feats = rec["feature"].astype(np.float64) if feature_dim else None
    return QueryBatch(
        rec["query"].astype(np.float64), rec["occ"].copy(), rec["class"].copy(), feats
    )
