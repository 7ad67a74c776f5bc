"""Reverse-diffusion sampling: unconditional, guided, and bifurcated branches.

Latents are float64 numpy arrays of shape (batch, samples). A denoiser is any
callable ``denoiser(z, sigma) -> eps_hat`` (see ``denoiser.Denoiser``).

Random streams: every run derives independent generators from
``SeedSequence(seed, spawn_key=(k,))``. Stream 0 drives the shared trunk
(initial noise and per-step noise until bifurcation); stream ``n + 1`` drives
branch ``n``. Branch outputs therefore do not depend on how many branches run
or in which order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import schedule
from .denoiser import NumericalError


@dataclass
class SamplerRun:
    steps: int = 150
    tau0: float = 1.0
    tau_p: float | None = None
    revolutions: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        schedule.DiffusionTime(self.tau0)
        if self.tau_p is not None:
            schedule.DiffusionTime(self.tau_p)
            if self.tau_p >= self.tau0:
                raise ValueError(f"tau_p={self.tau_p} must be below tau0={self.tau0}")
        if self.revolutions < 1:
            raise ValueError("revolutions must be >= 1")
        if self.revolutions > 1 and self.tau_p is None:
            raise ValueError("more than one revolution requires a bifurcation step tau_p")

    def grid_index(self, tau: float) -> int:
        """Nearest grid index round(tau * T)."""
        return int(round(tau * self.steps))

    def to_dict(self):
        return asdict(self)


@dataclass
class LatentState:
    z: np.ndarray
    tau: float


def stream(seed: int, k: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(k,))))


def perturb(x, tau, eps) -> LatentState:
    """z = alpha_tau x + sigma_tau eps."""
    x, eps = np.asarray(x, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {x.shape}, eps {eps.shape}")
    tau = float(tau)
    return LatentState(schedule.alpha(tau) * x + schedule.sigma(tau) * eps, tau)


def reverse_step(state: LatentState, eps_hat, s, eps=None) -> LatentState:
    """One ancestral step z_s = f z_tau - g eps_hat + h eps (noise only if s > 0)."""
    s = float(s)
    if not s < state.tau:
        raise ValueError(f"reverse step must move down in time: s={s}, tau={state.tau}")
    c = schedule.reverse_coefficients(state.tau, s)
    z = c.f * state.z - c.g * np.asarray(eps_hat, dtype=np.float64)
    if s > 0:
        if eps is None:
            raise ValueError("noise is required for steps with s > 0")
        z = z + c.h * np.asarray(eps, dtype=np.float64)
    return LatentState(z, s)


def _denoise(denoiser, z, tau, index):
    try:
        eps_hat = denoiser(z, schedule.sigma(tau))
    except NumericalError as e:
        raise NumericalError(f"sampler step {index} (tau={tau:.4f}): {e}") from e
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if not np.all(np.isfinite(eps_hat)):
        raise NumericalError(f"sampler step {index} (tau={tau:.4f}): non-finite eps_hat")
    return eps_hat


def run_chain(denoiser, state: LatentState, steps: int, stop_index: int,
              noise: Callable[[tuple], np.ndarray], trace=None) -> LatentState:
    """Iterate reverse steps on the uniform grid from state.tau down to stop_index/T."""
    start = int(round(state.tau * steps))
    for i in range(start - 1, stop_index - 1, -1):
        tau, s = (i + 1) / steps, i / steps
        state = LatentState(state.z, tau)
        eps_hat = _denoise(denoiser, state.z, tau, i)
        state = reverse_step(state, eps_hat, s, noise(state.z.shape) if s > 0 else None)
        if trace is not None:
            trace("trunk", s, state.z)
    return state


def sample_unconditional(denoiser, run: SamplerRun, sample_count: int, count: int | None = None,
                         trace=None) -> np.ndarray:
    """Ancestral sampling from z_1 ~ N(0, I).

    Returns a (sample_count,) frame, or (count, sample_count) when ``count`` is
    given. With ``run.tau_p`` set, returns the (revolutions, sample_count)
    bifurcated variants instead.
    """
    if run.tau0 != 1.0:
        raise ValueError("unconditional sampling starts at tau0 = 1")
    rng = stream(run.seed, 0)
    shape = (1 if count is None else count, sample_count)
    start = LatentState(rng.standard_normal(shape), 1.0)
    if run.tau_p is not None:
        return sample_variations(denoiser, run, start, trunk_rng=rng, trace=trace)
    out = run_chain(denoiser, start, run.steps, 0, rng.standard_normal, trace).z
    return out[0] if count is None else out


def sample_guided(denoiser, guide, run: SamplerRun, count: int | None = None, trace=None) -> np.ndarray:
    """Refine ``guide`` by reverse diffusion from the truncation step tau0.

    tau0 is snapped to the grid (round(tau0*T)/T). A zero start index returns
    the guide unchanged. With ``run.tau_p`` set, returns the bifurcated variants.
    """
    guide = np.asarray(guide, dtype=np.float64)
    if guide.ndim != 1:
        raise ValueError("guide must be a single frame")
    k0 = run.grid_index(run.tau0)
    if k0 == 0:
        if run.tau_p is not None:
            return np.repeat(guide[None], run.revolutions, axis=0)
        return guide.copy() if count is None else np.repeat(guide[None], count, axis=0)
    tau_eff = k0 / run.steps
    rng = stream(run.seed, 0)
    shape = (1 if count is None else count, len(guide))
    start = perturb(np.broadcast_to(guide, shape), tau_eff, rng.standard_normal(shape))
    if run.tau_p is not None:
        return sample_variations(denoiser, run, start, trunk_rng=rng, trace=trace)
    out = run_chain(denoiser, start, run.steps, 0, rng.standard_normal, trace).z
    return out[0] if count is None else out


def sample_variations(denoiser, run: SamplerRun, start: LatentState,
                      trunk_rng: np.random.Generator | None = None, trace=None) -> np.ndarray:
    """Shared trajectory down to tau_p, then ``run.revolutions`` independent branches.

    At tau_p the deterministic part f z - g eps_hat is computed once and each
    branch adds its own h * eps. Returns an array (revolutions, samples).
    """
    if run.tau_p is None:
        raise ValueError("sample_variations needs run.tau_p")
    z0 = np.asarray(start.z, dtype=np.float64)
    if z0.ndim == 1:
        z0 = z0[None]
    if z0.shape[0] != 1:
        raise ValueError("bifurcation starts from a single trajectory")
    kp = run.grid_index(run.tau_p)
    k_start = run.grid_index(start.tau)
    if kp >= k_start or run.tau_p >= start.tau:
        raise ValueError(f"tau_p={run.tau_p} must lie below the start time {start.tau}")
    if kp < 1:
        raise ValueError(f"tau_p={run.tau_p} rounds to grid index 0; no step left to bifurcate")
    trunk_rng = trunk_rng if trunk_rng is not None else stream(run.seed, 0)
    trunk = run_chain(denoiser, LatentState(z0, k_start / run.steps), run.steps, kp,
                      trunk_rng.standard_normal, trace)

    n_rev = run.revolutions
    rngs = [stream(run.seed, n + 1) for n in range(n_rev)]

    def branch_noise(shape):
        return np.stack([r.standard_normal(shape[1:]) for r in rngs])

    tau_p = kp / run.steps
    s = (kp - 1) / run.steps
    eps_hat = _denoise(denoiser, trunk.z, tau_p, kp - 1)
    shared = reverse_step(LatentState(trunk.z, tau_p), eps_hat, 0.0 if s == 0 else s,
                          np.zeros_like(trunk.z) if s > 0 else None)
    z = np.repeat(shared.z, n_rev, axis=0)
    if s > 0:
        z = z + schedule.reverse_coefficients(tau_p, s).h * branch_noise(z.shape)
    if trace is not None:
        trace("branch", s, z)
    branches = LatentState(z, s)
    if s > 0:
        branches = run_chain(denoiser, branches, run.steps, 0, branch_noise,
                             None if trace is None else lambda _k, t, zz: trace("branch", t, zz))
    return branches.z


def assemble_track(frames, total_duration: float, fs: int, rng: np.random.Generator,
                   overlap: float = 0.0) -> np.ndarray:
    """Concatenate randomly chosen frames (with replacement) into a long track.

    Consecutive frames are joined with an equal-power (sin/cos) crossfade of
    ``overlap`` seconds. Output length is round(fs * total_duration).
    """
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        raise ValueError("need at least one frame")
    n = len(frames[0])
    if any(len(f) != n for f in frames):
        raise ValueError("frames must share one length")
    total = int(round(fs * total_duration))
    n_fade = int(round(overlap * fs))
    if not 0 <= n_fade < n:
        raise ValueError("overlap must be shorter than a frame")
    hop = n - n_fade
    count = max(1, math.ceil(max(total - n_fade, 1) / hop))
    out = np.zeros(hop * count + n_fade)
    t = (np.arange(n_fade) + 0.5) / max(n_fade, 1)
    fade_in, fade_out = np.sin(0.5 * np.pi * t), np.cos(0.5 * np.pi * t)
    for k in range(count):
        f = frames[int(rng.integers(len(frames)))].copy()
        if n_fade:
            if k > 0:
                f[:n_fade] *= fade_in
            if k < count - 1:
                f[n - n_fade:] *= fade_out
        out[k * hop:k * hop + n] += f
    return out[:total]
