"""Trainable implicit occupancy field.

A learnable feature grid over contracted BEV space feeds a small MLP head
that predicts an occupancy logit, semantic logits, and optionally a feature
vector for any 4D query.  Gradients are computed analytically (closed-form
backprop, including the bilinear scatter back into the grid) and verified
against finite differences in the test suite.  Training uses Adam moments
with decoupled weight decay, linear warmup, and cosine decay.
"""

from __future__ import annotations

import dataclasses
import struct
from typing import Sequence

import numpy as np

from .bev import BevGrid, bilinear_setup
from .errors import (
    BadMagicError,
    EmptyBatchError,
    FormatVersionError,
    TrainingDivergedError,
    TruncatedFileError,
)
from .geometry import ContractionParams, FourierConfig, Query4, fourier_encode_batch
from .pointcloud import UNLABELED, PointCloud
from .supervision import QueryBatch
from ._util import read_bytes, write_bytes

__all__ = [
    "FieldModel",
    "TrainConfig",
    "LossReport",
    "FieldOutput",
    "RenderResult",
    "RaySupervision",
    "init_field_model",
    "log_frequency_weights",
    "forward",
    "forward_batch",
    "loss",
    "backward",
    "Gradients",
    "train",
    "render_ray",
    "rays_from_pointcloud",
    "train_rendering_baseline",
    "write_field_model",
    "read_field_model",
    "write_loss_csv",
]

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8
RENDER_EPS = 1e-3  # opacity-mass guard for fully transparent rays


def _squareplus(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Smooth rectifier x -> (x + sqrt(x^2 + 4))/2 and its derivative."""
    s = np.sqrt(x * x + 4.0)
    return 0.5 * (x + s), 0.5 * (1.0 + x / s)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=1, keepdims=True)


class FieldModel:
    """Learnable contracted-BEV grid plus MLP decoder.

    The decoder input is the bilinearly interpolated grid feature
    concatenated with fourier(z) and fourier(t); heads are one linear layer
    split into [occupancy logit | semantic logits | feature vector].
    """

    def __init__(
        self,
        grid: BevGrid,
        layers: list[tuple[np.ndarray, np.ndarray]],
        fourier: FourierConfig,
        n_classes: int,
        feature_dim: int,
    ):
        self.grid = grid
        self.layers = layers
        self.fourier = fourier
        self.n_classes = int(n_classes)
        self.feature_dim = int(feature_dim)
        in_dim = grid.channels + 2 * fourier.output_dim(1)
        dims = [in_dim] + [w.shape[1] for w, _ in layers]
        for i, (w, b) in enumerate(layers):
            if w.shape[0] != dims[i] or b.shape != (w.shape[1],):
                raise ValueError("layer dimensions do not chain")
        if dims[-1] != 1 + n_classes + feature_dim:
            raise ValueError("head layout does not match final layer width")

    @property
    def contraction(self) -> ContractionParams:
        return self.grid.contraction

    @property
    def layer_sizes(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def parameters(self) -> list[np.ndarray]:
        out = [self.grid.data]
        for w, b in self.layers:
            out.extend([w, b])
        return out


def init_field_model(
    contraction: ContractionParams,
    n_classes: int,
    feature_dim: int = 0,
    grid_size: int = 128,
    grid_channels: int = 16,
    fourier: FourierConfig = FourierConfig(),
    hidden_width: int = 160,
    hidden_layers: int = 4,
    seed: int = 0,
    grid_init: BevGrid | None = None,
) -> FieldModel:
    """He-initialized hidden layers, zero-initialized final head and grid.

    ``grid_init`` (e.g. a deterministic splat output) may seed the grid; its
    geometry must match.
    """
    rng = np.random.default_rng(seed)
    if grid_init is not None:
        grid = grid_init.copy()
        if grid.contraction != contraction:
            raise ValueError("grid_init contraction mismatch")
    else:
        grid = BevGrid(grid_size, grid_size, grid_channels, contraction)
    in_dim = grid.channels + 4 * fourier.n_bands
    out_dim = 1 + n_classes + feature_dim
    sizes = [in_dim] + [hidden_width] * hidden_layers + [out_dim]
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        if i == len(sizes) - 2:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append((w, np.zeros(fan_out)))
    return FieldModel(grid, layers, fourier, n_classes, feature_dim)


def log_frequency_weights(frequencies: np.ndarray) -> np.ndarray:
    """Per-class weights w_c proportional to -log(freq_c), normalized to mean 1."""
    f = np.clip(np.asarray(frequencies, dtype=np.float64), 1e-12, 1.0)
    w = -np.log(f)
    mean = w.mean()
    return np.ones_like(w) if mean <= 0 else w / mean


def _forward_raw(model: FieldModel, queries: np.ndarray):
    """Shared forward pass; returns head outputs plus the backprop cache."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 4)
    iy, ix, bw = bilinear_setup(q[:, 0], q[:, 1], model.grid)
    g = np.einsum("nk,nkc->nc", bw, model.grid.data[iy, ix])
    enc = np.concatenate(
        [g, fourier_encode_batch(q[:, 2], model.fourier), fourier_encode_batch(q[:, 3], model.fourier)],
        axis=1,
    )
    h = enc
    acts = [enc]
    derivs = []
    for w, b in model.layers[:-1]:
        a = h @ w + b
        h, da = _squareplus(a)
        acts.append(h)
        derivs.append(da)
    w, b = model.layers[-1]
    out = h @ w + b
    occ_logit = out[:, 0]
    sem_logits = out[:, 1 : 1 + model.n_classes]
    feat = out[:, 1 + model.n_classes :]
    cache = (iy, ix, bw, acts, derivs)
    return occ_logit, sem_logits, feat, cache


@dataclasses.dataclass
class Gradients:
    """Parameter gradients congruent to FieldModel: grid plus per-layer (dW, db)."""

    grid: np.ndarray
    layers: list[tuple[np.ndarray, np.ndarray]]

    def scaled(self, k: float) -> "Gradients":
        return Gradients(self.grid * k, [(w * k, b * k) for w, b in self.layers])


def _backward_from_output_grads(
    model: FieldModel, cache, d_occ_logit, d_sem_logits, d_feat
) -> Gradients:
    """Backpropagate given gradients w.r.t. the raw head outputs."""
    iy, ix, bw, acts, derivs = cache
    d_out = np.concatenate(
        [np.asarray(d_occ_logit)[:, None], d_sem_logits, d_feat], axis=1
    )
    grads: list[tuple[np.ndarray, np.ndarray]] = []
    d = d_out
    for li in range(len(model.layers) - 1, -1, -1):
        w, _ = model.layers[li]
        grads.append((acts[li].T @ d, d.sum(axis=0)))
        d = d @ w.T
        if li > 0:
            d = d * derivs[li - 1]
    grads.reverse()
    d_g = d[:, : model.grid.channels]
    grid_grad = np.zeros_like(model.grid.data)
    for k in range(4):
        np.add.at(grid_grad, (iy[:, k], ix[:, k]), bw[:, k, None] * d_g)
    return Gradients(grid_grad, grads)


@dataclasses.dataclass(frozen=True)
class FieldOutput:
    occ_prob: float
    semantic_probs: np.ndarray
    feature: np.ndarray


def forward(model: FieldModel, q: Query4) -> FieldOutput:
    """Evaluate the field at one metric-coordinate query."""
    occ_p, sem_p, feat = forward_batch(model, q.as_array()[None, :])
    return FieldOutput(float(occ_p[0]), sem_p[0], feat[0])


def forward_batch(
    model: FieldModel, queries: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized forward: (occ_prob (N,), semantic_probs (N,S), feature (N,F))."""
    occ_logit, sem_logits, feat, _ = _forward_raw(model, queries)
    return _sigmoid(occ_logit), _softmax(sem_logits), feat


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lambda_occ: float = 1.0
    lambda_sem: float = 0.5
    lambda_vfm: float = 0.5
    learning_rate: float = 1e-3
    warmup_steps: int = 200
    total_steps: int = 5000
    batch_size: int = 2048
    class_weights: np.ndarray | None = None
    weight_decay: float = 1e-4
    seed: int = 0
    # rendering-supervision knobs (used by train_rendering_baseline only)
    render_near: float = 0.5
    render_far: float = 60.0
    render_coarse: int = 48
    render_importance: int = 16

    def __post_init__(self):
        if min(self.lambda_occ, self.lambda_sem, self.lambda_vfm) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.total_steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch size must be positive")


@dataclasses.dataclass(frozen=True)
class LossReport:
    total: float
    occ: float
    sem: float
    vfm: float
    n_occ: int = 0
    n_sem: int = 0
    n_vfm: int = 0


def _class_weights(model: FieldModel, cfg: TrainConfig) -> np.ndarray:
    if cfg.class_weights is None:
        return np.ones(model.n_classes)
    w = np.asarray(cfg.class_weights, dtype=np.float64)
    if w.shape != (model.n_classes,):
        raise ValueError("class_weights length must equal n_classes")
    return w


def _loss_terms(model: FieldModel, batch: QueryBatch, cfg: TrainConfig, indices=None):
    if len(batch) == 0:
        raise EmptyBatchError("loss over an empty batch")
    idx = np.arange(len(batch)) if indices is None else indices
    q = batch.queries[idx]
    occ_t = batch.occupancy[idx].astype(np.float64)
    cls_t = batch.classes[idx]
    feat_t = batch.features[idx]
    occ_logit, sem_logits, feat, cache = _forward_raw(model, q)
    n = len(idx)

    # occupancy: binary cross-entropy with logits, averaged over every sample
    occ_vec = np.maximum(occ_logit, 0) - occ_logit * occ_t + np.log1p(np.exp(-np.abs(occ_logit)))
    l_occ = float(occ_vec.mean())
    d_occ = (_sigmoid(occ_logit) - occ_t) * (cfg.lambda_occ / n)

    # semantics: class-weighted categorical cross-entropy over labeled positives
    w_c = _class_weights(model, cfg)
    sem_mask = (batch.occupancy[idx] == 1) & (cls_t != UNLABELED) & (model.n_classes > 0)
    n_sem = int(sem_mask.sum())
    d_sem = np.zeros_like(sem_logits)
    l_sem = 0.0
    if n_sem:
        z = sem_logits[sem_mask]
        c = cls_t[sem_mask].astype(int)
        m = z.max(axis=1, keepdims=True)
        lse = (m[:, 0] + np.log(np.exp(z - m).sum(axis=1)))
        wi = w_c[c]
        l_sem = float(np.mean(wi * (lse - z[np.arange(n_sem), c])))
        sm = _softmax(z)
        sm[np.arange(n_sem), c] -= 1.0
        d_sem[sem_mask] = sm * wi[:, None] * (cfg.lambda_sem / n_sem)

    # feature distillation: per-sample mean absolute error over positives
    vfm_mask = (batch.occupancy[idx] == 1) & (model.feature_dim > 0) & (batch.feature_dim > 0)
    n_vfm = int(vfm_mask.sum())
    d_feat = np.zeros_like(feat)
    l_vfm = 0.0
    if n_vfm and batch.feature_dim != model.feature_dim:
        raise ValueError(
            f"batch feature_dim {batch.feature_dim} != model feature_dim {model.feature_dim}"
        )
    if n_vfm:
        diff = feat[vfm_mask] - feat_t[vfm_mask]
        l_vfm = float(np.mean(np.abs(diff)))
        d_feat[vfm_mask] = np.sign(diff) * (cfg.lambda_vfm / (n_vfm * model.feature_dim))

    total = cfg.lambda_occ * l_occ + cfg.lambda_sem * l_sem + cfg.lambda_vfm * l_vfm
    report = LossReport(total, l_occ, l_sem, l_vfm, n, n_sem, n_vfm)
    return report, cache, d_occ, d_sem, d_feat


def loss(model: FieldModel, batch: QueryBatch, cfg: TrainConfig) -> LossReport:
    """Weighted multi-task loss: total = l_occ*occ + l_sem*sem + l_vfm*vfm."""
    report, *_ = _loss_terms(model, batch, cfg)
    return report


def backward(
    model: FieldModel, batch: QueryBatch, cfg: TrainConfig, indices=None
) -> tuple[Gradients, LossReport]:
    """Analytic gradients of the total loss for every parameter.

    Grid cells not touched by any query's bilinear footprint keep exactly
    zero gradient.
    """
    report, cache, d_occ, d_sem, d_feat = _loss_terms(model, batch, cfg, indices)
    return _backward_from_output_grads(model, cache, d_occ, d_sem, d_feat), report


class _AdamW:
    """Adam moments with decoupled weight decay on weight-like parameters."""

    def __init__(self, params: list[np.ndarray], decay_mask: list[bool], cfg: TrainConfig):
        self.params = params
        self.decay_mask = decay_mask
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def lr_at(self, step: int) -> float:
        cfg = self.cfg
        if step < cfg.warmup_steps:
            return cfg.learning_rate * (step + 1) / max(1, cfg.warmup_steps)
        span = max(1, cfg.total_steps - cfg.warmup_steps)
        progress = (step - cfg.warmup_steps) / span
        return cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * progress))

    def step(self, grads: list[np.ndarray], step_index: int) -> None:
        self.t += 1
        lr = self.lr_at(step_index)
        b1c = 1.0 - _ADAM_BETA1**self.t
        b2c = 1.0 - _ADAM_BETA2**self.t
        for p, g, m, v, decay in zip(self.params, grads, self.m, self.v, self.decay_mask):
            m *= _ADAM_BETA1
            m += (1.0 - _ADAM_BETA1) * g
            v *= _ADAM_BETA2
            v += (1.0 - _ADAM_BETA2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + _ADAM_EPS)
            if decay:
                update = update + self.cfg.weight_decay * p
            p -= lr * update


def _flatten_grads(g: Gradients) -> list[np.ndarray]:
    out = [g.grid]
    for dw, db in g.layers:
        out.extend([dw, db])
    return out


def _decay_mask(model: FieldModel) -> list[bool]:
    mask = [True]  # grid features decay
    for _ in model.layers:
        mask.extend([True, False])  # weights decay, biases do not
    return mask


def train(
    model: FieldModel, queries: QueryBatch, cfg: TrainConfig
) -> tuple[FieldModel, list[LossReport]]:
    """Mini-batch training on a query batch; deterministic given cfg.seed."""
    if len(queries) == 0:
        raise EmptyBatchError("cannot train on an empty batch")
    rng = np.random.default_rng(cfg.seed)
    opt = _AdamW(model.parameters(), _decay_mask(model), cfg)
    history: list[LossReport] = []
    # overflow after a divergence is reported via TrainingDivergedError, not
    # as floating-point warnings
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(cfg.total_steps):
            idx = rng.integers(0, len(queries), cfg.batch_size)
            grads, report = backward(model, queries, cfg, idx)
            if not np.isfinite(report.total):
                raise TrainingDivergedError(step)
            opt.step(_flatten_grads(grads), step)
            history.append(report)
    return model, history


@dataclasses.dataclass(frozen=True)
class RenderResult:
    rendered_depth: float
    rendered_semantics: np.ndarray
    transmittances: np.ndarray  # length n+1; entry i is before sample i
    transparent: bool


def render_ray(
    model: FieldModel,
    origin: np.ndarray,
    direction: np.ndarray,
    sample_depths: np.ndarray,
    t: float = 0.0,
) -> RenderResult:
    """Alpha-composite field predictions along one ray.

    Occupancy probability acts as per-sample opacity; rendered depth is the
    opacity-weighted mean sample depth.  A ray whose total opacity mass
    stays below RENDER_EPS is flagged transparent and reports the last
    sample depth with uniform semantics.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("direction must be unit-norm")
    depths = np.asarray(sample_depths, dtype=np.float64)
    if len(depths) == 0 or np.any(np.diff(depths) <= 0):
        raise ValueError("sample_depths must be non-empty and increasing")
    pts = origin[None, :] + depths[:, None] * direction[None, :]
    q = np.concatenate([pts, np.full((len(depths), 1), t)], axis=1)
    occ, sem, _ = forward_batch(model, q)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - occ)])
    w = trans[:-1] * occ
    mass = w.sum()
    if mass < RENDER_EPS:
        uniform = np.full(model.n_classes, 1.0 / max(model.n_classes, 1))
        return RenderResult(float(depths[-1]), uniform, trans, True)
    depth = float((w * depths).sum() / mass)
    semantics = (w[:, None] * sem).sum(axis=0) / mass
    return RenderResult(depth, semantics, trans, False)


@dataclasses.dataclass
class RaySupervision:
    """Target depth/class per ray, the rendering baseline's supervision."""

    origins: np.ndarray
    directions: np.ndarray
    target_depths: np.ndarray
    target_classes: np.ndarray
    times: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)


def rays_from_pointcloud(pc: PointCloud) -> RaySupervision:
    """Turn scan returns into rendering supervision (one ray per point)."""
    d = pc.positions - pc.origins
    depths = np.linalg.norm(d, axis=1)
    good = depths > 1e-9
    return RaySupervision(
        pc.origins[good],
        d[good] / depths[good, None],
        depths[good],
        pc.class_ids[good].copy(),
        pc.times[good].copy(),
    )


def _composite_backward(
    depths, occ, sem, d_depth, d_sem_probs, w, trans, mass_eff, guarded,
    depth_val, sem_val,
):
    """Gradients of (rendered depth, rendered semantics) w.r.t. per-sample
    opacity and semantic probabilities; vectorized over rays (leading axis).

    The normalizing mass is treated as constant wherever the eps guard is
    active (subgradient of the max).
    """
    live = (~guarded).astype(np.float64)
    # dL/dw_i
    a = d_depth[:, None] * (depths - live[:, None] * depth_val[:, None]) / mass_eff[:, None]
    a = a + np.einsum(
        "rc,rnc->rn", d_sem_probs, sem - live[:, None, None] * sem_val[:, None, :]
    ) / mass_eff[:, None]
    d_sem = (w / mass_eff[:, None])[:, :, None] * d_sem_probs[:, None, :]
    # w_i = T_i o_i with T_i = prod_{j<i}(1 - o_j)
    aw = a * w
    tail = np.cumsum(aw[:, ::-1], axis=1)[:, ::-1]  # inclusive suffix sums
    suffix = np.concatenate([tail[:, 1:], np.zeros((len(depths), 1))], axis=1)
    d_occ = a * trans[:, :-1] - suffix / np.maximum(1.0 - occ, 1e-12)
    return d_occ, d_sem


def train_rendering_baseline(
    model: FieldModel, rays: RaySupervision, cfg: TrainConfig
) -> tuple[FieldModel, list[LossReport]]:
    """Image-space supervision baseline: L1 on rendered depth plus CE on
    rendered semantics, with exponentially spaced coarse samples and one
    round of importance resampling around the predicted depth.

    Reported losses reuse LossReport slots: ``occ`` holds the depth L1 term
    and ``sem`` the semantic term.
    """
    if len(rays) == 0:
        raise EmptyBatchError("no supervision rays")
    rng = np.random.default_rng(cfg.seed)
    opt = _AdamW(model.parameters(), _decay_mask(model), cfg)
    coarse = np.geomspace(cfg.render_near, cfg.render_far, cfg.render_coarse)
    history: list[LossReport] = []
    w_c = _class_weights(model, cfg)
    for step in range(cfg.total_steps):

        idx = rng.integers(0, len(rays), cfg.batch_size)
        org = rays.origins[idx]
        dirs = rays.directions[idx]
        tgt_d = rays.target_depths[idx]
        tgt_c = rays.target_classes[idx]
        times = rays.times[idx]
        b = len(idx)

        # coarse pass (no gradients) to place importance samples
        pts = org[:, None, :] + coarse[None, :, None] * dirs[:, None, :]
        q = np.concatenate(
            [pts.reshape(-1, 3), np.repeat(times, len(coarse))[:, None]], axis=1
        )
        occ_c, _, _ = forward_batch(model, q)
        occ_c = occ_c.reshape(b, -1)
        trans_c = np.cumprod(1.0 - occ_c, axis=1)
        w_coarse = np.concatenate([np.ones((b, 1)), trans_c[:, :-1]], axis=1) * occ_c
        mass_c = np.maximum(w_coarse.sum(axis=1), RENDER_EPS)
        d_pred = (w_coarse * coarse[None, :]).sum(axis=1) / mass_c

        fine = d_pred[:, None] + rng.uniform(-1.0, 1.0, (b, cfg.render_importance))
        fine = np.clip(fine, cfg.render_near, cfg.render_far)
        depths = np.sort(np.concatenate([np.broadcast_to(coarse, (b, len(coarse))), fine], axis=1), axis=1)

        ns = depths.shape[1]
        pts = org[:, None, :] + depths[:, :, None] * dirs[:, None, :]
        q = np.concatenate([pts.reshape(-1, 3), np.repeat(times, ns)[:, None]], axis=1)
        occ_logit, sem_logits, feat, cache = _forward_raw(model, q)
        occ = _sigmoid(occ_logit).reshape(b, ns)
        sem = _softmax(sem_logits).reshape(b, ns, model.n_classes)

        trans = np.concatenate(
            [np.ones((b, 1)), np.cumprod(1.0 - occ, axis=1)], axis=1
        )
        w = trans[:, :-1] * occ
        mass = w.sum(axis=1)
        guarded = mass < RENDER_EPS
        mass_eff = np.maximum(mass, RENDER_EPS)
        depth_r = (w * depths).sum(axis=1) / mass_eff
        sem_r = (w[:, :, None] * sem).sum(axis=1) / mass_eff[:, None]

        labeled = tgt_c != UNLABELED
        depth_err = depth_r - tgt_d
        l_depth = float(np.mean(np.abs(depth_err)))
        tiny = 1e-12
        l_sem = 0.0
        d_sem_r = np.zeros_like(sem_r)
        n_lab = int(labeled.sum())
        if n_lab:
            p_true = sem_r[labeled, tgt_c[labeled].astype(int)]
            wi = w_c[tgt_c[labeled].astype(int)]
            l_sem = float(np.mean(wi * -np.log(p_true + tiny)))
            d_sem_r[labeled, tgt_c[labeled].astype(int)] = (
                wi * (-1.0 / (p_true + tiny)) / n_lab
            )
        total = l_depth + l_sem
        if not np.isfinite(total):
            raise TrainingDivergedError(step)

        d_depth_r = np.sign(depth_err) / b
        d_occ_rows, d_sem_rows = _composite_backward(
            depths, occ, sem, d_depth_r, d_sem_r, w, trans, mass_eff, guarded,
            depth_r, sem_r,
        )
        d_occ_logit = (d_occ_rows * occ * (1.0 - occ)).reshape(-1)
        sm = sem.reshape(-1, model.n_classes)
        ds = d_sem_rows.reshape(-1, model.n_classes)
        d_sem_logits = sm * (ds - (ds * sm).sum(axis=1, keepdims=True))
        grads = _backward_from_output_grads(
            model, cache, d_occ_logit, d_sem_logits, np.zeros_like(feat)
        )
        opt.step(_flatten_grads(grads), step)
        history.append(LossReport(total, l_depth, l_sem, 0.0, b, n_lab, 0))
    return model, history


_FM_MAGIC = b"QOFM"
_FM_VERSION = 1


def write_field_model(model: FieldModel, destination) -> None:
    """QOFM format: architecture header then float32 parameters in order
    (grid C-order, then per layer W and b)."""
    sizes = model.layer_sizes
    head = _FM_MAGIC + struct.pack("<II", _FM_VERSION, len(sizes))
    head += struct.pack(f"<{len(sizes)}I", *sizes)
    head += struct.pack(
        "<IIIff2f3I",
        model.n_classes,
        model.feature_dim,
        model.fourier.n_bands,
        model.fourier.min_freq,
        model.fourier.max_freq,
        model.contraction.k_hr,
        model.contraction.beta,
        model.grid.width,
        model.grid.height,
        model.grid.channels,
    )
    parts = [model.grid.data.astype("<f4").tobytes()]
    for w, b in model.layers:
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    write_bytes(destination, head + b"".join(parts))


def read_field_model(source) -> FieldModel:
    data = read_bytes(source)
    if len(data) < 4 or data[:4] != _FM_MAGIC:
        raise BadMagicError("not a QOFM model file")
    off = 4
    try:
        version, n_sizes = struct.unpack_from("<II", data, off)
        off += 8
        if version != _FM_VERSION:
            raise FormatVersionError(f"unsupported QOFM version {version}")
        sizes = struct.unpack_from(f"<{n_sizes}I", data, off)
        off += 4 * n_sizes
        (n_classes, feature_dim, n_bands, fmin, fmax, k_hr, beta, gw, gh, gc) = (
            struct.unpack_from("<IIIff2f3I", data, off)
        )
        off += struct.calcsize("<IIIff2f3I")
    except struct.error as e:
        raise TruncatedFileError(f"QOFM header truncated: {e}")
    fourier = FourierConfig(n_bands, float(fmin), float(fmax))
    contraction = ContractionParams(float(k_hr), float(beta))

    def take(count, shape):
        nonlocal off
        nbytes = 4 * count
        if len(data) < off + nbytes:
            raise TruncatedFileError("QOFM parameters truncated")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += nbytes
        return arr.reshape(shape)

    grid = BevGrid(gw, gh, gc, contraction, take(gh * gw * gc, (gh, gw, gc)))
    layers = []
    for i in range(n_sizes - 1):
        w = take(sizes[i] * sizes[i + 1], (sizes[i], sizes[i + 1]))
        b = take(sizes[i + 1], (sizes[i + 1],))
        layers.append((w, b))
    return FieldModel(grid, layers, fourier, n_classes, feature_dim)


def write_loss_csv(history: Sequence[LossReport], destination) -> None:
    lines = ["step,total,occ,sem,vfm\n"]
    for i, r in enumerate(history):
        lines.append(f"{i},{r.total:.10g},{r.occ:.10g},{r.sem:.10g},{r.vfm:.10g}\n")
    write_bytes(destination, "".join(lines).encode())
