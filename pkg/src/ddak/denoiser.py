"""Conditional noise-prediction network and its exact-gradient training loop.

The network predicts the noise content of a diffused state given the
diffusion step and the normalized background forecast, which is attached
by channel concatenation. It is a small circular 1-D convolutional
residual net, so it is shift-equivariant along the ring:

    concat(x_j, background) -> conv(w, H) -> + time embedding
    -> B x [residual block: silu, conv(w, H), silu, conv(w, H), skip add]
    -> silu -> conv(w, L)

The diffusion variable is the normalized forecast residual
r = (truth - background) / s, and the background enters as
(background - mean) / std, both per level. The output conv is
zero-initialized so an untrained model predicts zero noise.

Gradients are computed by hand-written reverse-mode differentiation
(verified against finite differences in the test suite), and training
uses AdamW with a linear-warmup cosine-decay learning rate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule
from .dynamics import TrajectoryDataset, compute_norm_stats
from .errors import NumericalError

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1.0e6


@dataclass(frozen=True)
class NormStats:
    """Per-level normalization: state mean/std and residual scale s."""

    state_mean: np.ndarray
    state_std: np.ndarray
    residual_scale: np.ndarray

    def __post_init__(self) -> None:
        for name in ("state_mean", "state_std", "residual_scale"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(self.state_std <= 0):
            raise ValueError("state_std must be strictly positive per level")
        if np.any(self.residual_scale <= 0):
            raise ValueError("residual_scale must be strictly positive per level")

    @property
    def levels(self) -> int:
        return self.state_mean.size


def normalize_background(values: np.ndarray, norm: NormStats) -> np.ndarray:
    """(x - mean) / std per level; conditioning input of the network."""
    return (values - norm.state_mean[:, None]) / norm.state_std[:, None]


def denormalize_background(values: np.ndarray, norm: NormStats) -> np.ndarray:
    return values * norm.state_std[:, None] + norm.state_mean[:, None]


def to_residual(values: np.ndarray, background: np.ndarray, norm: NormStats) -> np.ndarray:
    """(x - background) / s per level; the diffusion variable."""
    return (values - background) / norm.residual_scale[:, None]


def from_residual(residual: np.ndarray, background: np.ndarray, norm: NormStats) -> np.ndarray:
    """Skip connection: background + s * residual."""
    return background + norm.residual_scale[:, None] * residual


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor of the noise-prediction network."""

    levels: int
    hidden: int = 64
    kernel_width: int = 5
    blocks: int = 3
    temb_dim: int = 16

    def __post_init__(self) -> None:
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.kernel_width < 1 or self.kernel_width % 2 == 0:
            raise ValueError("kernel_width must be odd and >= 1")
        if self.blocks < 0:
            raise ValueError("blocks must be >= 0")
        if self.temb_dim < 2 or self.temb_dim % 2 != 0:
            raise ValueError("temb_dim must be even and >= 2")


def param_groups(arch: ArchSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) parameter groups; defines the flat layout."""
    L, H, w, E = arch.levels, arch.hidden, arch.kernel_width, arch.temb_dim
    groups: list[tuple[str, tuple[int, ...]]] = [
        ("conv_in.w", (H, 2 * L, w)),
        ("conv_in.b", (H,)),
        ("temb.w", (H, E)),
        ("temb.b", (H,)),
    ]
    for i in range(arch.blocks):
        groups += [
            (f"block{i}.conv1.w", (H, H, w)),
            (f"block{i}.conv1.b", (H,)),
            (f"block{i}.conv2.w", (H, H, w)),
            (f"block{i}.conv2.b", (H,)),
        ]
    groups += [("conv_out.w", (L, H, w)), ("conv_out.b", (L,))]
    return groups


def param_count(arch: ArchSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_groups(arch))


def _views(arch: ArchSpec, theta: np.ndarray) -> dict[str, np.ndarray]:
    views: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in param_groups(arch):
        size = int(np.prod(shape))
        views[name] = theta[offset : offset + size].reshape(shape)
        offset += size
    return views


def init_params(arch: ArchSpec, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Fan-in-scaled uniform conv kernels, zero biases, zero output layer."""
    theta = np.zeros(param_count(arch), dtype=dtype)
    views = _views(arch, theta)
    for name, arr in views.items():
        if name == "conv_in.w" or ".conv1.w" in name or ".conv2.w" in name:
            fan_in = arr.shape[1] * arr.shape[2]
            bound = 1.0 / math.sqrt(fan_in)
            arr[...] = rng.uniform(-bound, bound, size=arr.shape)
        elif name == "temb.w":
            bound = 1.0 / math.sqrt(arr.shape[1])
            arr[...] = rng.uniform(-bound, bound, size=arr.shape)
        # biases and the whole output conv stay zero
    return theta


@dataclass
class DenoiserParams:
    """Trained weights plus the normalization statistics they were fit with."""

    arch: ArchSpec
    theta: np.ndarray
    norm: NormStats

    def __post_init__(self) -> None:
        expected = param_count(self.arch)
        if self.theta.size != expected:
            raise ValueError(
                f"theta has {self.theta.size} entries, architecture needs {expected}"
            )
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta contains non-finite entries")
        if self.norm.levels != self.arch.levels:
            raise ValueError("normalization levels do not match architecture")


# --- network forward / backward -------------------------------------------


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def _sin_embedding(j: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Sinusoidal features of the diffusion step, shape (batch, dim)."""
    half = dim // 2
    exponents = np.arange(half, dtype=np.float64) / max(half - 1, 1)
    freqs = 10.0 ** (-4.0 * exponents)
    args = np.asarray(j, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


def _gather_index(K: int, w: int) -> np.ndarray:
    pad = (w - 1) // 2
    return (np.arange(K)[:, None] - pad + np.arange(w)[None, :]) % K


def _conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, idx: np.ndarray):
    """Circular 1-D convolution via im2col. x (B,C,K) -> (B,O,K)."""
    B, C, K = x.shape
    O, _, w = W.shape
    cols = x[:, :, idx].transpose(0, 2, 1, 3).reshape(B * K, C * w)
    y = cols @ W.reshape(O, C * w).T + b
    return y.reshape(B, K, O).transpose(0, 2, 1), cols


def _conv_backward(dy: np.ndarray, W: np.ndarray, cols: np.ndarray, x_shape):
    B, C, K = x_shape
    O, _, w = W.shape
    pad = (w - 1) // 2
    dy_mat = dy.transpose(0, 2, 1).reshape(B * K, O)
    dW = (dy_mat.T @ cols).reshape(O, C, w)
    db = dy_mat.sum(axis=0)
    dcols = (dy_mat @ W.reshape(O, C * w)).reshape(B, K, C, w).transpose(0, 2, 1, 3)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for t in range(w):
        dx += np.roll(dcols[:, :, :, t], t - pad, axis=2)
    return dx, dW, db


def _forward(arch: ArchSpec, views: dict, x_j: np.ndarray, cond: np.ndarray,
             j: np.ndarray, keep_cache: bool):
    """Batched network forward. x_j, cond: (B, L, K); j: (B,) step indices."""
    dtype = views["conv_in.w"].dtype
    u = np.concatenate([x_j, cond], axis=1).astype(dtype, copy=False)
    K = u.shape[2]
    idx = _gather_index(K, arch.kernel_width)
    h, cols_in = _conv_forward(u, views["conv_in.w"], views["conv_in.b"], idx)
    emb = _sin_embedding(j, arch.temb_dim, dtype)
    te = emb @ views["temb.w"].T + views["temb.b"]
    h = h + te[:, :, None]
    block_cache = []
    for i in range(arch.blocks):
        h_in = h
        a1 = _silu(h_in)
        c1, cols1 = _conv_forward(a1, views[f"block{i}.conv1.w"],
                                  views[f"block{i}.conv1.b"], idx)
        a2 = _silu(c1)
        c2, cols2 = _conv_forward(a2, views[f"block{i}.conv2.w"],
                                  views[f"block{i}.conv2.b"], idx)
        h = h_in + c2
        if keep_cache:
            block_cache.append((h_in, c1, cols1, cols2, a1.shape, a2.shape))
    a_out = _silu(h)
    out, cols_out = _conv_forward(a_out, views["conv_out.w"], views["conv_out.b"], idx)
    cache = None
    if keep_cache:
        cache = {
            "u": u, "cols_in": cols_in, "emb": emb, "h_last": h,
            "a_out_shape": a_out.shape, "cols_out": cols_out,
            "blocks": block_cache,
        }
    return out, cache


def _backward(arch: ArchSpec, views: dict, cache: dict, dout: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of a scalar loss with upstream dout = dL/dout."""
    grads: dict[str, np.ndarray] = {}
    da_out, grads["conv_out.w"], grads["conv_out.b"] = _conv_backward(
        dout, views["conv_out.w"], cache["cols_out"], cache["a_out_shape"])
    dh = da_out * _silu_grad(cache["h_last"])
    for i in reversed(range(arch.blocks)):
        h_in, c1, cols1, cols2, a1_shape, a2_shape = cache["blocks"][i]
        da2, grads[f"block{i}.conv2.w"], grads[f"block{i}.conv2.b"] = _conv_backward(
            dh, views[f"block{i}.conv2.w"], cols2, a2_shape)
        dc1 = da2 * _silu_grad(c1)
        da1, grads[f"block{i}.conv1.w"], grads[f"block{i}.conv1.b"] = _conv_backward(
            dc1, views[f"block{i}.conv1.w"], cols1, a1_shape)
        dh = dh + da1 * _silu_grad(h_in)
    dte = dh.sum(axis=2)
    grads["temb.w"] = dte.T @ cache["emb"]
    grads["temb.b"] = dte.sum(axis=0)
    _, grads["conv_in.w"], grads["conv_in.b"] = _conv_backward(
        dh, views["conv_in.w"], cache["cols_in"], cache["u"].shape)
    flat = np.empty(param_count(arch), dtype=views["conv_in.w"].dtype)
    offset = 0
    for name, shape in param_groups(arch):
        size = int(np.prod(shape))
        flat[offset : offset + size] = grads[name].ravel()
        offset += size
    return flat


def eps_forward(params: DenoiserParams, x_j: np.ndarray, background_norm: np.ndarray,
                j: int, schedule: NoiseSchedule) -> np.ndarray:
    """Predict the noise in ``x_j`` given the normalized background and step j."""
    x_j = np.asarray(x_j)
    background_norm = np.asarray(background_norm)
    if x_j.ndim != 2 or x_j.shape[0] != params.arch.levels:
        raise ValueError(f"x_j shape {x_j.shape} does not match {params.arch.levels} levels")
    if background_norm.shape != x_j.shape:
        raise ValueError(
            f"background shape {background_norm.shape} != state shape {x_j.shape}")
    schedule._check_step(j)
    views = _views(params.arch, params.theta)
    out, _ = _forward(params.arch, views, x_j[None], background_norm[None],
                      np.array([j]), keep_cache=False)
    return out[0]


def noise_prediction_loss(
    params: DenoiserParams,
    x_j_batch: np.ndarray,
    cond_batch: np.ndarray,
    j_batch: np.ndarray,
    eps_target: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean-squared noise-prediction error and its exact parameter gradient.

    The loss averages over every batch element and component. This is the
    backprop engine behind :func:`loss_and_grad`; tests drive it directly
    with hand-built batches.
    """
    if x_j_batch.shape[0] == 0:
        raise ValueError("empty batch")
    views = _views(params.arch, params.theta)
    out, cache = _forward(params.arch, views, x_j_batch, cond_batch, j_batch,
                          keep_cache=True)
    diff = out - eps_target.astype(out.dtype, copy=False)
    loss = float(np.mean(diff * diff))
    dout = (2.0 / diff.size) * diff
    grad = _backward(params.arch, views, cache, dout)
    return loss, grad


def loss_and_grad(
    params: DenoiserParams,
    truth_batch: np.ndarray,
    background_batch: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[float, np.ndarray]:
    """Diffusion training loss on a batch of (truth, background) pairs.

    Each pair is mapped to the normalized residual, diffused to a
    uniformly drawn step with fresh Gaussian noise via the closed form,
    and the network is scored on recovering that noise.
    """
    truth_batch = np.asarray(truth_batch, dtype=np.float64)
    background_batch = np.asarray(background_batch, dtype=np.float64)
    if truth_batch.shape != background_batch.shape or truth_batch.ndim != 3:
        raise ValueError("batch arrays must both have shape (batch, L, K)")
    n = truth_batch.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    norm = params.norm
    j = rng.integers(1, schedule.n_steps + 1, size=n)
    eps = rng.standard_normal(truth_batch.shape)
    residual = (truth_batch - background_batch) / norm.residual_scale[None, :, None]
    cond = (background_batch - norm.state_mean[None, :, None]) / norm.state_std[None, :, None]
    abar = schedule.alpha_bar[j][:, None, None]
    x_j = np.sqrt(abar) * residual + np.sqrt(1.0 - abar) * eps
    loss, grad = noise_prediction_loss(params, x_j, cond, j, eps)
    if not math.isfinite(loss):
        raise NumericalError(
            f"non-finite training loss (steps drawn: {j.tolist()[:8]}...)"
        )
    return loss, grad


# --- optimizer and schedule -------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Training run settings for one conditioning lead."""

    lead_intervals: int
    total_steps: int = 3000
    batch_size: int = 32
    lr_start: float = 1e-5
    lr_peak: float = 1e-4
    lr_end: float = 3e-6
    warmup_fraction: float = 1.0 / 6.0
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lead_intervals < 1:
            raise ValueError("lead_intervals must be >= 1")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be >= 1")
        if min(self.lr_start, self.lr_peak, self.lr_end) <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to the final value."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    warm = cfg.warmup_fraction * cfg.total_steps
    if step <= warm:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * (step / warm)
    progress = (step - warm) / (cfg.total_steps - warm)
    return cfg.lr_end + (cfg.lr_peak - cfg.lr_end) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """AdamW first/second moment accumulators over the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, theta: np.ndarray) -> "OptimizerState":
        return cls(m=np.zeros_like(theta), v=np.zeros_like(theta), step=0)


def adamw_update(
    theta: np.ndarray,
    grad: np.ndarray,
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[np.ndarray, OptimizerState]:
    """One AdamW step: decoupled multiplicative decay, then bias-corrected Adam."""
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise ValueError("theta/grad/moment shapes do not match")
    t = state.step + 1
    theta = theta * (1.0 - lr * cfg.weight_decay)
    m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grad
    v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grad * grad
    m_hat = m / (1.0 - cfg.adam_beta1**t)
    v_hat = v / (1.0 - cfg.adam_beta2**t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return theta.astype(grad.dtype, copy=False), OptimizerState(m=m, v=v, step=t)


def train(
    dataset: TrajectoryDataset,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    arch: ArchSpec | None = None,
    dtype=np.float32,
    loss_history: list[float] | None = None,
    log_every: int = 200,
) -> DenoiserParams:
    """Train a noise-prediction model on (truth, forecast) pairs.

    Single-threaded and fully reproducible from ``cfg.seed``. Appends the
    per-step loss to ``loss_history`` when given.
    """
    if dataset.forecast_states is None:
        raise ValueError("dataset has no forecast pairs")
    if dataset.lead_intervals != cfg.lead_intervals:
        raise ValueError(
            f"dataset lead {dataset.lead_intervals} != configured lead {cfg.lead_intervals}"
        )
    mean, std, scale = compute_norm_stats(dataset)
    norm = NormStats(state_mean=mean, state_std=std, residual_scale=scale)
    if arch is None:
        arch = ArchSpec(levels=dataset.spec.L)
    truth = np.stack([s.values for s in dataset.truth_states])
    background = np.stack([s.values for s in dataset.forecast_states])

    rng = np.random.default_rng(cfg.seed)
    theta = init_params(arch, rng, dtype=dtype)
    params = DenoiserParams(arch=arch, theta=theta, norm=norm)
    opt = OptimizerState.zeros_like(theta)
    for step in range(cfg.total_steps):
        pick = rng.integers(0, truth.shape[0], size=cfg.batch_size)
        loss, grad = loss_and_grad(params, truth[pick], background[pick], schedule, rng)
        if loss > DIVERGENCE_LIMIT:
            raise NumericalError(f"training diverged at step {step}: loss {loss:.3e}")
        theta, opt = adamw_update(params.theta, grad, opt, lr_at(step, cfg), cfg)
        params = DenoiserParams(arch=arch, theta=theta, norm=norm)
        if loss_history is not None:
            loss_history.append(loss)
        if log_every and step % log_every == 0:
            logger.info("train step %d / %d  loss %.4f", step, cfg.total_steps, loss)
        else:
            logger.debug("train step %d  loss %.6f", step, loss)
    return params
