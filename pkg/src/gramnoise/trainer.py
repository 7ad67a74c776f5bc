"""Epsilon-prediction training with Adam and EMA weight smoothing."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from . import checkpoint as ckpt
from . import schedule
from .dataset import NormalizationSettings
from .denoiser import NetworkConfig, NumericalError, ParameterSet, UNet, init_params

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    learning_rate: float = 2e-4
    ema_rate: float = 0.999
    batch_size: int = 16
    total_iterations: int = 750_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    checkpoint_interval: int = 5000
    clip_grad_norm: float | None = None

    def __post_init__(self):
        if not 0 < self.ema_rate < 1:
            raise ValueError("ema_rate must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be >= 0")


@dataclass
class LossReport:
    iteration: int
    loss: float
    grad_norm: float
    wall_time: float


def diffusion_loss(eps_true, eps_pred):
    """Mean squared error between true and predicted noise (constant weighting)."""
    if tuple(eps_true.shape) != tuple(eps_pred.shape):
        raise ValueError(f"shape mismatch: {tuple(eps_true.shape)} vs {tuple(eps_pred.shape)}")
    if isinstance(eps_true, torch.Tensor):
        return torch.mean((eps_true - eps_pred) ** 2)
    d = np.asarray(eps_true, dtype=np.float64) - np.asarray(eps_pred, dtype=np.float64)
    return float(np.mean(d * d))


def ema_update(shadow: dict, current: dict, rate: float) -> dict:
    """shadow <- rate * shadow + (1 - rate) * current, in place."""
    if not 0 < rate < 1:
        raise ValueError("EMA rate must lie in (0, 1)")
    if shadow.keys() != current.keys():
        raise ValueError("EMA shadow and weights have different names")
    for name, s in shadow.items():
        c = current[name]
        if tuple(s.shape) != tuple(c.shape):
            raise ValueError(f"EMA shape mismatch for {name}: {tuple(s.shape)} vs {tuple(c.shape)}")
        if isinstance(s, torch.Tensor):
            with torch.no_grad():
                s.mul_(rate).add_(c.detach(), alpha=1.0 - rate)
        else:
            s *= rate
            s += (1.0 - rate) * c
    return shadow


def make_optimizer(network: torch.nn.Module, config: TrainingConfig) -> torch.optim.Adam:
    return torch.optim.Adam(network.parameters(), lr=config.learning_rate,
                            betas=(config.adam_beta1, config.adam_beta2), eps=config.adam_epsilon)


def training_step(network, optimizer, ema: dict, batch, rng: np.random.Generator,
                  config: TrainingConfig, iteration: int = 0, tau: float | None = None) -> LossReport:
    """One Adam step on the mean batch loss, then one EMA update.

    Draws tau ~ U[0, 1] (or uses the fixed ``tau``) and eps ~ N(0, I) per item.
    Non-finite losses or gradients raise before any weight is touched.
    """
    t0 = time.perf_counter()
    x = np.asarray(batch, dtype=np.float64)
    b = x.shape[0]
    taus = rng.uniform(0.0, 1.0, size=b) if tau is None else np.full(b, float(tau))
    eps = rng.standard_normal(x.shape)
    a = schedule.alpha_array(taus)[:, None]
    s = schedule.sigma_array(taus)
    z = a * x + s[:, None] * eps

    dtype = next(network.parameters()).dtype
    pred = network(torch.as_tensor(z, dtype=dtype), torch.as_tensor(s, dtype=dtype))
    loss = diffusion_loss(torch.as_tensor(eps, dtype=dtype), pred)
    if not torch.isfinite(loss):
        raise NumericalError(f"iteration {iteration}: non-finite loss {loss.item()}")
    optimizer.zero_grad(set_to_none=False)
    loss.backward()
    grads = [p.grad for p in network.parameters() if p.grad is not None]
    grad_norm = math.sqrt(sum(float(torch.sum(g.double() ** 2)) for g in grads))
    if not math.isfinite(grad_norm):
        optimizer.zero_grad()
        raise NumericalError(f"iteration {iteration}: non-finite gradient (loss {loss.item():.4g})")
    if config.clip_grad_norm is not None:
        torch.nn.utils.clip_grad_norm_(network.parameters(), config.clip_grad_norm)
    optimizer.step()
    ema_update(ema, dict(network.named_parameters()), config.ema_rate)
    return LossReport(iteration, float(loss.item()), grad_norm, time.perf_counter() - t0)


@dataclass
class TrainState:
    params: ParameterSet
    optimizer: torch.optim.Adam
    config: TrainingConfig
    rng: np.random.Generator
    data_rng: np.random.Generator
    fs: int
    normalization: NormalizationSettings
    iteration: int = 0

    @classmethod
    def fresh(cls, net_config: NetworkConfig, config: TrainingConfig, fs: int,
              normalization: NormalizationSettings | None = None) -> "TrainState":
        params = init_params(net_config, config.seed)
        root = np.random.SeedSequence(config.seed)
        rng, data_rng = (np.random.Generator(np.random.PCG64(c)) for c in root.spawn(2))
        return cls(params, make_optimizer(params.network, config), config, rng, data_rng, fs,
                   normalization or NormalizationSettings())

    def save(self, path):
        names = [n for n, _ in self.params.network.named_parameters()]
        arrays = {f"net/{k}": v for k, v in self.params.named_arrays().items()}
        arrays.update({f"ema/{k}": v.detach().numpy() for k, v in self.params.ema.items()})
        opt_state = self.optimizer.state_dict()
        steps = {}
        for idx, st in opt_state["state"].items():
            name = names[idx]
            arrays[f"adam/{name}/exp_avg"] = st["exp_avg"].numpy()
            arrays[f"adam/{name}/exp_avg_sq"] = st["exp_avg_sq"].numpy()
            steps[name] = float(st["step"])
        meta = {
            "kind": "gramnoise-denoiser",
            "network": self.params.config.to_dict(),
            "training": asdict(self.config),
            "normalization": asdict(self.normalization),
            "fs": self.fs,
            "iteration": self.iteration,
            "adam_steps": steps,
            "rng": self.rng.bit_generator.state,
            "data_rng": self.data_rng.bit_generator.state,
        }
        ckpt.save_arrays(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "TrainState":
        meta, arrays = ckpt.load_arrays(path)
        if meta.get("kind") != "gramnoise-denoiser":
            raise ckpt.CheckpointError(f"{path}: not a denoiser checkpoint")
        net_config = NetworkConfig.from_dict(meta["network"])
        config = TrainingConfig(**meta["training"])
        network = UNet(net_config)
        network.load_state_dict({k[4:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("net/")})
        ema = {k[4:]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("ema/")}
        params = ParameterSet(net_config, network, ema)
        optimizer = make_optimizer(network, config)
        names = [n for n, _ in network.named_parameters()]
        state = {}
        for idx, name in enumerate(names):
            if name in meta["adam_steps"]:
                state[idx] = {
                    "step": torch.tensor(meta["adam_steps"][name]),
                    "exp_avg": torch.from_numpy(arrays[f"adam/{name}/exp_avg"]),
                    "exp_avg_sq": torch.from_numpy(arrays[f"adam/{name}/exp_avg_sq"]),
                }
        opt_dict = optimizer.state_dict()
        opt_dict["state"] = state
        optimizer.load_state_dict(opt_dict)
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = meta["rng"]
        data_rng = np.random.Generator(np.random.PCG64())
        data_rng.bit_generator.state = meta["data_rng"]
        return cls(params, optimizer, config, rng, data_rng, int(meta["fs"]),
                   NormalizationSettings(**meta["normalization"]), int(meta["iteration"]))


def train(state: TrainState, batches: Iterator[np.ndarray],
          sink: Callable[[TrainState], None] | None = None, progress_log=None) -> list[LossReport]:
    """Run steps until ``state.config.total_iterations``.

    ``batches`` must be driven by ``state.data_rng`` for resumes to be exact.
    ``sink(state)`` is called every ``checkpoint_interval`` iterations and at
    the end. ``progress_log`` is a path or text stream receiving one JSON
    record per iteration.
    """
    cfg = state.config
    reports = []
    stream = open(progress_log, "a") if isinstance(progress_log, (str, Path)) else progress_log
    try:
        while state.iteration < cfg.total_iterations:
            batch = next(batches)
            report = training_step(state.params.network, state.optimizer, state.params.ema, batch,
                                   state.rng, cfg, state.iteration)
            state.iteration += 1
            reports.append(report)
            if stream is not None:
                stream.write(json.dumps({**asdict(report), "timestamp": time.time()}) + "\n")
            if sink is not None and cfg.checkpoint_interval and state.iteration % cfg.checkpoint_interval == 0:
                _sink(sink, state)
        if sink is not None:
            _sink(sink, state)
    finally:
        if stream is not None and stream is not progress_log:
            stream.close()
    return reports


def _sink(sink, state):
    try:
        sink(state)
    except OSError as e:
        raise OSError(f"checkpoint write failed at iteration {state.iteration}: {e}") from e
