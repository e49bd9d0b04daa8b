"""Noise schedules, the closed-form forward process and reverse samplers.

Flow fields live in meters; the chain runs in diffusion units (meters divided
by `flow_scale`). Schedule tables are float64 so coefficient identities hold
to 1e-9. Samplers take the denoiser as a callable `model(v_t_meters, pair) ->
v0_hat_meters`, which is also the hook the oracle-substitution tests use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import RngStream
from .pointcloud import FlowField, ScenePair


@dataclass
class NoiseSchedule:
    """beta/alpha tables indexed by time step t in 1..T (alpha_bar also has
    the empty-product entry alpha_bar[0] = 1)."""

    t_steps: int
    beta: np.ndarray        # [T], beta[t-1] is beta_t
    alpha: np.ndarray       # [T], 1 - beta
    alpha_bar: np.ndarray   # [T+1], alpha_bar[t] = prod_{s<=t} alpha_s
    beta_tilde: np.ndarray  # [T], posterior variance coefficients

    def check_t(self, t: int) -> None:
        if not (1 <= t <= self.t_steps):
            raise ValueError(f"time step {t} outside 1..{self.t_steps}")


@dataclass
class DiffusionConfig:
    t_train: int = 20
    t_sample: int = 2
    sampler: str = "ddim"        # ddim | ddpm
    schedule: str = "cosine"     # cosine | linear
    flow_scale: float = 1.0      # meters per diffusion unit
    ddpm_noise: str = "unit"     # unit (identity covariance) | posterior (beta_tilde)

    def __post_init__(self):
        if not (1 <= self.t_sample <= self.t_train):
            raise ValueError("need 1 <= t_sample <= t_train")
        if self.sampler not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler kind: {self.sampler!r}")
        if self.schedule not in ("cosine", "linear"):
            raise ValueError(f"unknown schedule kind: {self.schedule!r}")
        if self.flow_scale <= 0:
            raise ValueError("flow_scale must be positive")
        if self.ddpm_noise not in ("unit", "posterior"):
            raise ValueError(f"unknown ddpm noise mode: {self.ddpm_noise!r}")


def make_schedule(t_steps: int, kind: str = "cosine") -> NoiseSchedule:
    """Build the beta/alpha tables.

    cosine: squared-cosine alpha_bar with offset 0.008, betas clipped to
    <= 0.999. linear: betas linearly spaced between 1e-4 and 0.02 scaled from
    the 1000-step reference grid (clipped likewise); kept for ablations.
    """
    if t_steps < 1:
        raise ValueError("schedule needs at least one step")
    if kind == "cosine":
        s = 0.008
        grid = np.arange(t_steps + 1, dtype=np.float64) / t_steps
        f = np.cos((grid + s) / (1.0 + s) * (np.pi / 2.0)) ** 2
        alpha_bar_raw = f / f[0]
        beta = 1.0 - alpha_bar_raw[1:] / alpha_bar_raw[:-1]
        beta = np.clip(beta, 0.0, 0.999)
    elif kind == "linear":
        scale = 1000.0 / t_steps
        beta = np.linspace(min(scale * 1e-4, 0.999), min(scale * 0.02, 0.999), t_steps)
    else:
        raise ValueError(f"unknown schedule kind: {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.concatenate([[1.0], np.cumprod(alpha)])
    beta_tilde = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta
    return NoiseSchedule(t_steps=t_steps, beta=beta, alpha=alpha,
                         alpha_bar=alpha_bar, beta_tilde=beta_tilde)


def q_sample(v0: np.ndarray, t: int, sched: NoiseSchedule, eps: np.ndarray) -> np.ndarray:
    """Closed-form forward draw: sqrt(abar_t) v0 + sqrt(1 - abar_t) eps.
    `v0` must already be in diffusion units."""
    sched.check_t(t)
    v0 = np.asarray(v0)
    eps = np.asarray(eps)
    if eps.shape != v0.shape:
        raise ValueError(f"noise shape {eps.shape} != flow shape {v0.shape}")
    abar = sched.alpha_bar[t]
    out = math.sqrt(abar) * v0.astype(np.float64) + math.sqrt(1.0 - abar) * eps.astype(np.float64)
    return out.astype(v0.dtype)


def posterior_mean(v_t: np.ndarray, v0_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Mean of q(V_{t-1} | V_t, V_0)."""
    sched.check_t(t)
    c0 = math.sqrt(sched.alpha_bar[t - 1]) * sched.beta[t - 1] / (1.0 - sched.alpha_bar[t])
    ct = math.sqrt(sched.alpha[t - 1]) * (1.0 - sched.alpha_bar[t - 1]) / (1.0 - sched.alpha_bar[t])
    out = c0 * np.asarray(v0_hat, dtype=np.float64) + ct * np.asarray(v_t, dtype=np.float64)
    return out.astype(np.asarray(v_t).dtype)


def ddim_timesteps(t_train: int, n_steps: int) -> list[int]:
    """Evenly spaced subsequence of 1..t_train that always contains t_train,
    rounding toward larger t."""
    if not (1 <= n_steps <= t_train):
        raise ValueError(f"need 1 <= n_steps <= {t_train}, got {n_steps}")
    return [math.ceil(t_train * (i + 1) / n_steps) for i in range(n_steps)]


def sample_ddpm(pair: ScenePair, model, sched: NoiseSchedule, rng: RngStream,
                flow_scale: float = 1.0, noise: str = "unit") -> FlowField:
    """Ancestral sampling: start from standard normal noise and walk the
    posterior means down to t=0 (no noise added on the final step).

    `noise="unit"` adds standard normal increments (identity covariance);
    `noise="posterior"` scales them by sqrt(beta_tilde_t)."""
    flows = _sample_ddpm_batch(pair, model, sched, [rng], flow_scale, noise)
    return FlowField(flows[0])


def sample_ddim(pair: ScenePair, model, sched: NoiseSchedule, rng: RngStream,
                n_steps: int, flow_scale: float = 1.0) -> FlowField:
    """Deterministic (eta = 0) subsequence jumps: only the initial noise draw
    is random."""
    flows = _sample_ddim_batch(pair, model, sched, [rng], n_steps, flow_scale)
    return FlowField(flows[0])


def _stack_noise(rngs: list[RngStream], shape) -> np.ndarray:
    return np.stack([r.gaussian(shape, dtype=np.float64) for r in rngs])


def _sample_ddpm_batch(pair: ScenePair, model, sched: NoiseSchedule, rngs: list[RngStream],
                       flow_scale: float, noise: str) -> np.ndarray:
    """Reverse chains for several independent streams over one pair; returns
    [K, N1, 3] flows in meters. Each chain consumes draws only from its own
    stream, so the batch equals K sequential runs."""
    if noise not in ("unit", "posterior"):
        raise ValueError(f"unknown ddpm noise mode: {noise!r}")
    shape = (pair.n1, 3)
    v = _stack_noise(rngs, shape)
    for t in range(sched.t_steps, 0, -1):
        v0_hat = _model_batch(model, v * flow_scale, pair) / flow_scale
        v = posterior_mean(v, v0_hat, t, sched)
        if t > 1:
            z = _stack_noise(rngs, shape)
            if noise == "posterior":
                z = z * math.sqrt(sched.beta_tilde[t - 1])
            v = v + z
    return (v * flow_scale).astype(np.float32)


def _sample_ddim_batch(pair: ScenePair, model, sched: NoiseSchedule, rngs: list[RngStream],
                       n_steps: int, flow_scale: float) -> np.ndarray:
    steps = ddim_timesteps(sched.t_steps, n_steps)
    shape = (pair.n1, 3)
    v = _stack_noise(rngs, shape)
    for i in range(len(steps) - 1, -1, -1):
        t = steps[i]
        t_prev = steps[i - 1] if i > 0 else 0
        abar_t = sched.alpha_bar[t]
        abar_prev = sched.alpha_bar[t_prev]
        v0_hat = _model_batch(model, v * flow_scale, pair) / flow_scale
        eps_hat = (v - math.sqrt(abar_t) * v0_hat) / math.sqrt(1.0 - abar_t)
        v = math.sqrt(abar_prev) * v0_hat + math.sqrt(1.0 - abar_prev) * eps_hat
    return (v * flow_scale).astype(np.float32)


def _model_batch(model, v_t_meters: np.ndarray, pair: ScenePair) -> np.ndarray:
    """Invoke the denoiser on a [K, N, 3] stack; a model that returns a
    single [N, 3] field (e.g. the oracle substitute) is broadcast."""
    out = np.asarray(model(v_t_meters.astype(np.float32), pair), dtype=np.float64)
    if out.shape == v_t_meters.shape[1:]:
        out = np.broadcast_to(out, v_t_meters.shape)
    elif out.shape != v_t_meters.shape:
        raise ValueError(f"model returned {out.shape}, expected {v_t_meters.shape}")
    return out
