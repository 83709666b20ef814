"""Euler time-stepping of the coupled SDE systems and exact OU statistics.

Two systems are simulated, both driven by a single Brownian motion:

* physical measure:  the factor beta and the log state-price deflator ln H,
  with ln Z1 = ln z + delta*t + ln H recovered exactly from the identity;
* auxiliary measure: the pair (ln Zhat, beta_hat) whose stopped running cost
  defines the free-boundary problem.

Log coordinates are used for every Z-type process so positivity is automatic,
and both components of each system consume the *same* Gaussian increment.
Per-path noise comes from spawned child streams of a master seed, so ensembles
are bit-reproducible regardless of how paths are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from koport.model import ModelParams

__all__ = [
    "PathNoise",
    "PStateSample",
    "QStateSample",
    "StreamBlocks",
    "make_noise",
    "noise_block",
    "step_p",
    "step_q",
    "step_p_arrays",
    "step_q_arrays",
    "simulate_p",
    "simulate_q",
    "ou_exact_moments",
]

DEFAULT_DT = 1.0 / 250.0


@dataclass(frozen=True)
class PathNoise:
    """Gaussian increments (already scaled by sqrt(dt)) for one path."""

    dt: float
    n_steps: int
    seed: int
    stream_id: int
    increments: np.ndarray

    def __post_init__(self):
        if len(self.increments) != self.n_steps:
            raise ValueError("increments length must equal n_steps")


@dataclass(frozen=True)
class PStateSample:
    """Physical-measure state at one time: factor, ln H, and ln Z1."""

    t: float
    beta: float
    log_h: float
    log_z1: float


@dataclass(frozen=True)
class QStateSample:
    """Auxiliary-measure state at one time."""

    t: float
    z_hat: float
    beta_hat: float


def _stream_rng(seed: int, stream_id: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream_id,))
    return np.random.default_rng(ss)


def make_noise(seed: int, stream_id: int, dt: float, n_steps: int) -> PathNoise:
    """Draw the scaled increments for path ``stream_id`` of master ``seed``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = _stream_rng(seed, stream_id)
    dw = rng.standard_normal(n_steps) * math.sqrt(dt)
    return PathNoise(dt=dt, n_steps=n_steps, seed=seed, stream_id=stream_id, increments=dw)


def noise_block(seed: int, stream_ids: np.ndarray, dt: float, n_steps: int) -> np.ndarray:
    """Stack per-path increments into shape (n_paths, n_steps).

    Row k is identical to ``make_noise(seed, stream_ids[k], ...)``, so chunking
    paths across workers cannot change the draws.
    """
    out = np.empty((len(stream_ids), n_steps))
    root = math.sqrt(dt)
    for k, sid in enumerate(stream_ids):
        out[k] = _stream_rng(seed, int(sid)).standard_normal(n_steps) * root
    return out


class StreamBlocks:
    """Per-path Gaussian increments, generated lazily in time blocks.

    Path k always consumes the first draws of stream ``stream_ids[k]`` of the
    master seed, so results are independent of chunking, block size, and of
    other paths' lifetimes.  With ``antithetic=True`` odd paths reuse their
    even partner's stream with flipped signs.
    """

    def __init__(self, seed: int, stream_ids, dt: float, block: int = 512,
                 antithetic: bool = False):
        ids = [int(s) for s in stream_ids]
        if antithetic:
            self.signs = np.array([1.0 if s % 2 == 0 else -1.0 for s in ids])
            ids = [s // 2 for s in ids]
        else:
            self.signs = None
        self.gens = [_stream_rng(seed, s) for s in ids]
        self.root = math.sqrt(dt)
        self.block = block

    def draw(self, alive_idx: np.ndarray) -> np.ndarray:
        """Next ``block`` scaled increments for the paths in ``alive_idx``."""
        out = np.empty((len(alive_idx), self.block))
        for row, k in enumerate(alive_idx):
            out[row] = self.gens[k].standard_normal(self.block)
        out *= self.root
        if self.signs is not None:
            out *= self.signs[alive_idx][:, None]
        return out

    def draw_with_uniforms(self, alive_idx: np.ndarray):
        """Scaled increments plus uniforms (for bridge maxima), per block.

        Each path's stream yields its block of normals followed by its block
        of uniforms, so consumption stays per-path deterministic.
        """
        n = len(alive_idx)
        dw = np.empty((n, self.block))
        u = np.empty((n, self.block))
        for row, k in enumerate(alive_idx):
            dw[row] = self.gens[k].standard_normal(self.block)
            u[row] = self.gens[k].random(self.block)
        dw *= self.root
        if self.signs is not None:
            dw *= self.signs[alive_idx][:, None]
        return dw, u


# -- single-step updates (also used vectorized over paths) --------------------

def step_p_arrays(beta, log_h, p: ModelParams, dw, dt: float):
    """One Euler step of (beta, ln H) under the physical measure.

    Both updates use the same increment ``dw``; the pre-step beta enters both
    drifts and both diffusion loadings.
    """
    new_beta = beta + p.kappa * (p.beta_bar - beta) * dt - p.sigma_beta * dw
    new_log_h = log_h - (p.r + beta * beta / (2.0 * p.sigma ** 2)) * dt \
        - (beta / p.sigma) * dw
    return new_beta, new_log_h


def step_q_arrays(log_z, beta_hat, p: ModelParams, dw, dt: float):
    """One Euler step of (ln Zhat, beta_hat) under the auxiliary measure."""
    new_log_z = log_z + (p.delta - p.r + beta_hat * beta_hat / (2.0 * p.sigma ** 2)) * dt \
        - (beta_hat / p.sigma) * dw
    new_beta = beta_hat + (p.kappa * (p.beta_bar - beta_hat)
                           + beta_hat * p.sigma_beta / p.sigma) * dt - p.sigma_beta * dw
    return new_log_z, new_beta


def step_p(state: PStateSample, p: ModelParams, dw: float, dt: float,
           log_z0: float = 0.0) -> PStateSample:
    """Advance a physical-measure sample by one step.

    ``log_z0`` is ln z at time 0; ln Z1 is recomputed from the exact identity
    ln Z1 = ln z + delta*t + ln H rather than stepped separately.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    beta, log_h = step_p_arrays(state.beta, state.log_h, p, dw, dt)
    t = state.t + dt
    return PStateSample(t=t, beta=float(beta), log_h=float(log_h),
                        log_z1=log_z0 + p.delta * t + float(log_h))


def step_q(state: QStateSample, p: ModelParams, dw: float, dt: float) -> QStateSample:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if state.z_hat <= 0:
        raise ValueError("z_hat must be positive")
    log_z, beta = step_q_arrays(math.log(state.z_hat), state.beta_hat, p, dw, dt)
    return QStateSample(t=state.t + dt, z_hat=float(np.exp(log_z)), beta_hat=float(beta))


# -- whole-path simulation -----------------------------------------------------

def simulate_p(p: ModelParams, z0: float, beta0: float, noise: PathNoise):
    """Simulate one physical-measure path.

    Returns (t, beta, log_h, log_z1) arrays of length n_steps + 1.
    """
    n = noise.n_steps
    dt = noise.dt
    t = np.arange(n + 1) * dt
    beta = np.empty(n + 1)
    log_h = np.empty(n + 1)
    beta[0], log_h[0] = beta0, 0.0
    for k in range(n):
        beta[k + 1], log_h[k + 1] = step_p_arrays(beta[k], log_h[k], p,
                                                  noise.increments[k], dt)
    log_z1 = math.log(z0) + p.delta * t + log_h
    return t, beta, log_h, log_z1


def simulate_q(p: ModelParams, z0: float, beta0: float, noise: PathNoise):
    """Simulate one auxiliary-measure path; returns (t, z_hat, beta_hat)."""
    n = noise.n_steps
    dt = noise.dt
    t = np.arange(n + 1) * dt
    log_z = np.empty(n + 1)
    beta = np.empty(n + 1)
    log_z[0], beta[0] = math.log(z0), beta0
    for k in range(n):
        log_z[k + 1], beta[k + 1] = step_q_arrays(log_z[k], beta[k], p,
                                                  noise.increments[k], dt)
    return t, np.exp(log_z), beta


def ou_exact_moments(p: ModelParams, measure: str, beta0: float, t: float):
    """Exact mean and sd of the OU factor at time t (t = inf for stationary).

    Under the physical measure the factor reverts to beta_bar at rate kappa;
    under the auxiliary measure to b at rate a = kappa - sigma_beta/sigma.
    """
    if measure == "P":
        rate, level = p.kappa, p.beta_bar
    elif measure == "Q":
        rate, level = p.a, p.b if p.a > 0 else None
        if p.a <= 0:
            raise ValueError("auxiliary-measure moments require a > 0")
    else:
        raise ValueError(f"unknown measure {measure!r}")

    if math.isinf(t):
        if rate <= 0:
            raise ValueError("stationary moments require a positive reversion rate")
        return level, p.sigma_beta / math.sqrt(2.0 * rate)
    if t < 0:
        raise ValueError("t must be nonnegative")
    if rate == 0.0:
        return beta0, p.sigma_beta * math.sqrt(t)
    decay = math.exp(-rate * t)
    mean = level + (beta0 - level) * decay
    sd = p.sigma_beta * math.sqrt((1.0 - decay * decay) / (2.0 * rate))
    return mean, sd
