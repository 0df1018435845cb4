"""Pure deterministic geometry: scene contraction, depth binning, camera
lifting, and Fourier positional encoding.

Conventions used throughout the package:
  * ego frame: right-handed, z up, meters
  * camera depth: z-coordinate in the camera frame (pinhole, no distortion)
  * contraction applies to x and y only; z and t are never contracted
"""

from __future__ import annotations

import dataclasses

import numpy as np

__all__ = [
    "ContractionParams",
    "DepthBinning",
    "CameraModel",
    "Query4",
    "FourierConfig",
    "RigidTransform",
    "contract_axis",
    "uncontract_axis",
    "contract_query",
    "depth_bin_edges",
    "depth_bin_centers",
    "lift_pixel",
    "project_point",
    "fourier_encode",
    "fourier_encode_batch",
]


@dataclasses.dataclass(frozen=True)
class ContractionParams:
    """Axis-aligned contraction of unbounded coordinates into (-1, 1).

    ``k_hr`` is the metric half-range kept at full resolution and ``beta``
    the fraction of the output interval spent on it.  The map is

        c(k) = beta * k/k_hr                        for |k/k_hr| <= 1
        c(k) = sign(k) * (1 - (1-beta) / |k/k_hr|)  otherwise

    which is odd, strictly increasing, and continuous at |k/k_hr| = 1.
    """

    k_hr: float = 40.0
    beta: float = 0.8

    def __post_init__(self):
        if not (np.isfinite(self.k_hr) and self.k_hr > 0):
            raise ValueError(f"k_hr must be positive, got {self.k_hr}")
        if not (0.0 < self.beta < 1.0):
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")


def contract_axis(kappa, p: ContractionParams):
    """Contract a metric coordinate (scalar or array) into (-1, 1)."""
    k = np.asarray(kappa, dtype=np.float64)
    if not np.all(np.isfinite(k)):
        raise ValueError("contract_axis requires finite input")
    kb = k / p.k_hr
    ab = np.abs(kb)
    # second branch is only read where ab > 1; clamp keeps the division safe
    far = np.sign(kb) * (1.0 - (1.0 - p.beta) / np.maximum(ab, 1.0))
    out = np.where(ab <= 1.0, p.beta * kb, far)
    return float(out) if np.isscalar(kappa) else out


def uncontract_axis(c, p: ContractionParams):
    """Exact inverse of :func:`contract_axis`.  Requires |c| < 1."""
    cc = np.asarray(c, dtype=np.float64)
    if not np.all(np.isfinite(cc)) or np.any(np.abs(cc) >= 1.0):
        raise ValueError("uncontract_axis requires |c| < 1")
    ac = np.abs(cc)
    far = np.sign(cc) * (1.0 - p.beta) / (1.0 - ac) * p.k_hr
    out = np.where(ac <= p.beta, cc / p.beta * p.k_hr, far)
    return float(out) if np.isscalar(c) else out


@dataclasses.dataclass(frozen=True)
class Query4:
    """A spatio-temporal query point [x, y, z, t] in the reference ego frame."""

    x: float
    y: float
    z: float
    t: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.x, self.y, self.z, self.t)):
            raise ValueError("Query4 coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.t], dtype=np.float64)


def contract_query(q: Query4, p: ContractionParams) -> Query4:
    """Contract x and y of a query; z and t pass through unchanged."""
    return Query4(contract_axis(q.x, p), contract_axis(q.y, p), q.z, q.t)


@dataclasses.dataclass(frozen=True)
class DepthBinning:
    """Log-linear depth discretization.

    Bin edge at normalized position r in [0, 1]:

        d(r) = (1 - alpha) * d_near * (d_far/d_near)**r
               + alpha * (d_near + r * (d_far - d_near))

    ``alpha`` blends pure exponential spacing (0) with uniform spacing (1).
    ``infinity_bin_depth``, when set, appends one extra far bin whose
    representative depth is that value.
    """

    d_near: float = 40.0
    d_far: float = 100.0
    alpha: float = 0.3
    n_bins: int = 64
    infinity_bin_depth: float | None = 180.0

    def __post_init__(self):
        if not (0.0 < self.d_near < self.d_far):
            raise ValueError("need 0 < d_near < d_far")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")
        if self.n_bins < 1:
            raise ValueError("n_bins must be positive")
        if self.infinity_bin_depth is not None and self.infinity_bin_depth <= self.d_far:
            raise ValueError("infinity_bin_depth must exceed d_far")

    @property
    def total_bins(self) -> int:
        return self.n_bins + (1 if self.infinity_bin_depth is not None else 0)


def depth_bin_edges(b: DepthBinning) -> np.ndarray:
    """Edges of the depth bins, strictly increasing.

    Returns ``n_bins + 1`` values from d_near to d_far; if an infinity bin is
    configured its depth is appended as one extra edge.
    """
    r = np.linspace(0.0, 1.0, b.n_bins + 1)
    edges = (1.0 - b.alpha) * b.d_near * (b.d_far / b.d_near) ** r + b.alpha * (
        b.d_near + r * (b.d_far - b.d_near)
    )
    # endpoints are d_near and d_far analytically; pin them exactly
    edges[0] = b.d_near
    edges[-1] = b.d_far
    if b.infinity_bin_depth is not None:
        edges = np.append(edges, b.infinity_bin_depth)
    if not np.all(np.diff(edges) > 0):
        raise ValueError("depth bin edges are not strictly increasing")
    return edges


def depth_bin_centers(b: DepthBinning) -> np.ndarray:
    """Representative depth per bin: geometric midpoint of its edges.

    The infinity bin is represented by ``infinity_bin_depth`` itself.
    """
    edges = depth_bin_edges(b)
    if b.infinity_bin_depth is not None:
        regular = np.sqrt(edges[:-2] * edges[1:-1])
        return np.append(regular, b.infinity_bin_depth)
    return np.sqrt(edges[:-1] * edges[1:])


@dataclasses.dataclass(frozen=True)
class RigidTransform:
    """Rigid transform p_out = rotation @ p_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self applied after other: (self @ other)(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


@dataclasses.dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: 3x3 intrinsics plus a camera-to-ego rigid transform."""

    intrinsics: np.ndarray
    extrinsics: RigidTransform
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError("intrinsics must be 3x3")
        if abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("intrinsics must be invertible")
        object.__setattr__(self, "intrinsics", K)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")


def lift_pixel(cam: CameraModel, u, v, depth) -> np.ndarray:
    """Lift pixel coordinates at a given camera depth into the ego frame.

    ``depth`` is the z-coordinate in the camera frame.  Accepts scalars or
    equally shaped arrays; returns points of shape (..., 3).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(u < 0) or np.any(u >= cam.width) or np.any(v < 0) or np.any(v >= cam.height):
        raise ValueError("pixel outside image bounds")
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    ones = np.ones_like(u)
    pix = np.stack([u, v, ones], axis=-1)
    rays = pix @ np.linalg.inv(cam.intrinsics).T  # z component is 1
    p_cam = rays * d[..., None]
    return cam.extrinsics.apply(p_cam)


def project_point(cam: CameraModel, point) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project ego-frame points back to (u, v, depth). Inverse of lift_pixel."""
    p_cam = cam.extrinsics.inverse().apply(np.asarray(point, dtype=np.float64))
    z = p_cam[..., 2]
    uvw = p_cam @ cam.intrinsics.T
    return uvw[..., 0] / z, uvw[..., 1] / z, z


@dataclasses.dataclass(frozen=True)
class FourierConfig:
    """Sinusoidal encoding with frequencies laid out log-linearly.

    Band k of n carries frequency min_freq * (max_freq/min_freq)**(k/(n-1)).
    """

    n_bands: int = 16
    min_freq: float = 1.0
    max_freq: float = 10.0

    def __post_init__(self):
        if self.n_bands < 1:
            raise ValueError("n_bands must be positive")
        if not (0.0 < self.min_freq <= self.max_freq):
            raise ValueError("need 0 < min_freq <= max_freq")

    @property
    def frequencies(self) -> np.ndarray:
        if self.n_bands == 1:
            return np.array([self.min_freq], dtype=np.float64)
        r = np.arange(self.n_bands) / (self.n_bands - 1)
        return self.min_freq * (self.max_freq / self.min_freq) ** r

    def output_dim(self, input_dim: int = 1) -> int:
        return 2 * self.n_bands * input_dim


def fourier_encode(value, cfg: FourierConfig) -> np.ndarray:
    """Encode a scalar or small vector: [sin(f_k * v_d)..., cos(f_k * v_d)...].

    Output length is 2 * n_bands * dim, sines first (dim-major within each
    block), then cosines in the same order.
    """
    v = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if v.ndim != 1:
        raise ValueError("fourier_encode expects a scalar or 1-d vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("fourier_encode requires finite input")
    phases = (v[:, None] * cfg.frequencies[None, :]).ravel()
    return np.concatenate([np.sin(phases), np.cos(phases)])


def fourier_encode_batch(values: np.ndarray, cfg: FourierConfig) -> np.ndarray:
    """Vectorized :func:`fourier_encode` over the leading axis.

    ``values`` has shape (N,) or (N, D); the result is (N, 2*n_bands*D) with
    the same layout as the single-sample encoding.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    phases = (v[:, :, None] * cfg.frequencies[None, None, :]).reshape(v.shape[0], -1)
    return np.concatenate([np.sin(phases), np.cos(phases)], axis=1)
