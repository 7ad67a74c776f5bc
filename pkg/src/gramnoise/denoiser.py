"""Time-domain U-Net noise estimator eps_hat(z, sigma).

The noise level is embedded with fixed random Fourier features and an MLP,
and injected into every conv block through FiLM. All convolutions use
circular padding so a frame is treated as one period of a loop; the network
is therefore equivariant to circular shifts by multiples of its total stride.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values."""


class Denoiser(Protocol):
    """Anything that maps a batch of latents and a noise level to eps_hat."""

    def __call__(self, z: np.ndarray, sigma: float) -> np.ndarray: ...


def plan_downsampling(sample_count: int, depth: int, max_factor: int = 32) -> list[int]:
    """Per-stage downsampling factors whose product divides ``sample_count``.

    Each stage takes the smallest remaining prime factor of the frame length if
    it is at most ``max_factor``; otherwise the stage keeps its resolution.
    Revolution lengths such as 6154 = 2 * 17 * 181 are rarely powers of two.
    """
    primes = []
    n, p = sample_count, 2
    while p * p <= n:
        while n % p == 0:
            primes.append(p)
            n //= p
        p += 1
    if n > 1:
        primes.append(n)
    factors = []
    for _ in range(depth):
        if primes and primes[0] <= max_factor:
            factors.append(primes.pop(0))
        else:
            factors.append(1)
    return factors


@dataclass
class NetworkConfig:
    sample_count: int
    depth: int = 6
    channels: list[int] = field(default_factory=lambda: [32, 64, 64, 128, 128, 256])
    dilation_pattern: list[int] = field(default_factory=lambda: [1, 2, 4])
    attention_stages: list[int] = field(default_factory=lambda: [3, 4, 5])
    attention_heads: int = 4
    rff_dim: int = 32
    rff_scale: float = 16.0
    mlp_dims: list[int] = field(default_factory=lambda: [128, 128])
    downsample_factors: list[int] | None = None
    kernel_size: int = 3

    def __post_init__(self):
        if self.downsample_factors is None:
            self.downsample_factors = plan_downsampling(self.sample_count, self.depth)
        self.channels = [int(c) for c in self.channels]
        self.attention_stages = sorted(int(s) for s in self.attention_stages)
        self.validate()

    def validate(self):
        if self.sample_count < 1 or self.depth < 1:
            raise ValueError("sample_count and depth must be positive")
        if len(self.channels) != self.depth:
            raise ValueError(f"channels must list {self.depth} entries, got {len(self.channels)}")
        if len(self.downsample_factors) != self.depth:
            raise ValueError("downsample_factors must have one entry per stage")
        if any(f < 1 for f in self.downsample_factors):
            raise ValueError("downsample factors must be >= 1")
        stride = self.total_stride
        if self.sample_count % stride:
            raise ValueError(
                f"sample_count {self.sample_count} is not divisible by the total stride {stride}"
            )
        if not set(self.attention_stages) <= set(range(1, self.depth + 1)):
            raise ValueError(f"attention_stages must be within 1..{self.depth}")
        for stage in self.attention_stages:
            if self.channels[stage - 1] % self.attention_heads:
                raise ValueError(
                    f"stage {stage} has {self.channels[stage - 1]} channels, "
                    f"not divisible by {self.attention_heads} heads"
                )
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if not self.dilation_pattern or self.rff_dim < 1 or not self.mlp_dims:
            raise ValueError("dilation_pattern, rff_dim and mlp_dims must be non-empty")

    @property
    def total_stride(self) -> int:
        return math.prod(self.downsample_factors)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def rff_embed(sigma, frequencies):
    """Random Fourier feature encoding [cos(2 pi f sigma), sin(2 pi f sigma)]."""
    if isinstance(sigma, torch.Tensor):
        arg = 2 * math.pi * sigma.reshape(-1, 1) * frequencies.reshape(1, -1)
        return torch.cat([torch.cos(arg), torch.sin(arg)], dim=-1)
    sigma = float(sigma)
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    arg = 2 * np.pi * np.asarray(frequencies, dtype=np.float64) * sigma
    return np.concatenate([np.cos(arg), np.sin(arg)])


def film_modulate(features, scale, shift):
    """out[..., c, t] = scale[..., c] * features[..., c, t] + shift[..., c]."""
    if features.shape[-2] != scale.shape[-1] or scale.shape != shift.shape:
        raise ValueError(
            f"FiLM shape mismatch: features {tuple(features.shape)}, "
            f"scale {tuple(scale.shape)}, shift {tuple(shift.shape)}"
        )
    return scale[..., None] * features + shift[..., None]


def attention_weights(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Softmax(q^T k / sqrt(d)) for (..., d, frames) inputs; rows index queries."""
    d = q.shape[-2]
    scores = torch.einsum("...dq,...dk->...qk", q, k) / math.sqrt(d)
    return torch.softmax(scores, dim=-1)


def self_attention(features, w_qkv, w_out, heads: int):
    """Multi-head scaled dot-product attention over the frame axis.

    ``features`` is (batch, channels, frames); ``w_qkv`` is (3C, C) and
    ``w_out`` is (C, C). No positional encoding is used, so the operation is
    equivariant to any permutation of frames.
    """
    b, c, n = features.shape
    if c % heads:
        raise ValueError(f"{c} channels not divisible by {heads} heads")
    qkv = torch.einsum("oc,bcn->bon", w_qkv, features)
    q, k, v = (t.reshape(b, heads, c // heads, n) for t in qkv.chunk(3, dim=1))
    w = attention_weights(q, k)
    out = torch.einsum("bhqk,bhdk->bhdq", w, v).reshape(b, c, n)
    return torch.einsum("oc,bcn->bon", w_out, out)


class CircularConv(nn.Module):
    def __init__(self, c_in, c_out, kernel_size=3, dilation=1, stride=1):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel_size, stride=stride, dilation=dilation)
        if stride == 1:
            total = dilation * (kernel_size - 1)
            self.pad = (total // 2, total - total // 2)
        else:
            # non-overlapping windows: kernel == stride, no wrap needed
            self.pad = (0, 0)

    def forward(self, x):
        if self.pad != (0, 0):
            x = F.pad(x, self.pad, mode="circular")
        return self.conv(x)


class ConvBlock(nn.Module):
    """Residual stack of dilated circular convolutions, FiLM-modulated."""

    def __init__(self, channels, dilations, emb_dim, kernel_size=3):
        super().__init__()
        self.convs = nn.ModuleList(
            CircularConv(channels, channels, kernel_size, dilation=d) for d in dilations
        )
        self.film = nn.Linear(emb_dim, 2 * channels)

    def forward(self, h, emb):
        y = h
        for conv in self.convs:
            y = conv(F.gelu(y))
        scale, shift = self.film(emb).chunk(2, dim=-1)
        return h + film_modulate(y, 1.0 + scale, shift)


class Attention(nn.Module):
    def __init__(self, channels, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Parameter(torch.empty(3 * channels, channels))
        self.out = nn.Parameter(torch.empty(channels, channels))

    def forward(self, h):
        return h + self_attention(h, self.qkv, self.out, self.heads)


class UNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        emb_dim = config.mlp_dims[-1]
        self.register_buffer("rff_frequencies", torch.zeros(config.rff_dim))
        dims = [2 * config.rff_dim, *config.mlp_dims]
        self.mlp = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

        self.stem = CircularConv(1, ch[0], config.kernel_size)
        self.down = nn.ModuleList()
        self.enc = nn.ModuleList()
        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        self.enc_attn = nn.ModuleDict()
        self.dec_attn = nn.ModuleDict()
        for i, f in enumerate(config.downsample_factors):
            c_prev = ch[max(i - 1, 0)]
            self.down.append(CircularConv(c_prev, ch[i], f, stride=f) if f > 1 else CircularConv(c_prev, ch[i], 1))
            self.enc.append(ConvBlock(ch[i], config.dilation_pattern, emb_dim, config.kernel_size))
            self.dec.append(ConvBlock(ch[i], config.dilation_pattern, emb_dim, config.kernel_size))
            self.up.append(CircularConv(ch[i], c_prev, config.kernel_size))
            if i + 1 in config.attention_stages:
                self.enc_attn[str(i + 1)] = Attention(ch[i], config.attention_heads)
                self.dec_attn[str(i + 1)] = Attention(ch[i], config.attention_heads)
        self.head = CircularConv(ch[0], 1, config.kernel_size)

    def embed(self, sigma: torch.Tensor) -> torch.Tensor:
        e = rff_embed(sigma, self.rff_frequencies)
        for layer in self.mlp:
            e = F.gelu(layer(e))
        return e

    def forward(self, z: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
        """``z`` is (batch, samples), ``sigma`` is (batch,) or scalar."""
        b, n = z.shape
        sigma = torch.as_tensor(sigma, dtype=z.dtype).expand(b) if torch.as_tensor(sigma).dim() == 0 else sigma
        emb = self.embed(sigma.to(z.dtype))
        h = self.stem(z[:, None, :])
        top = h
        skips = []
        for i in range(self.config.depth):
            h = self.enc[i](self.down[i](h), emb)
            if str(i + 1) in self.enc_attn:
                h = self.enc_attn[str(i + 1)](h)
            skips.append(h)
        for i in reversed(range(self.config.depth)):
            if i < self.config.depth - 1:
                h = h + skips[i]
            h = self.dec[i](h, emb)
            if str(i + 1) in self.dec_attn:
                h = self.dec_attn[str(i + 1)](h)
            f = self.config.downsample_factors[i]
            if f > 1:
                h = h.repeat_interleave(f, dim=-1)
            h = self.up[i](h)
        return self.head(F.gelu(h + top))[:, 0, :]


@dataclass
class ParameterSet:
    """Network weights plus their exponential-moving-average shadow."""

    config: NetworkConfig
    network: UNet
    ema: dict[str, torch.Tensor]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.network.state_dict().items()}

    def ema_network(self) -> UNet:
        net = UNet(self.config).to(next(self.network.parameters()).dtype)
        state = self.network.state_dict()
        state.update(self.ema)
        net.load_state_dict(state)
        net.eval()
        return net

    def reset_ema(self):
        self.ema = {k: p.detach().clone() for k, p in self.network.named_parameters()}


def init_params(config: NetworkConfig, seed: int, dtype=torch.float32) -> ParameterSet:
    """Deterministic fan-in scaled initialisation.

    Conv and linear weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases
    start at zero; FiLM projections start at zero so every block begins as
    an identity modulation. RFF frequencies are N(0, rff_scale^2) and frozen.
    """
    config.validate()
    gen = torch.Generator().manual_seed(int(seed))
    net = UNet(config)
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".film." in name:
                p.zero_()
            elif name.endswith(".out"):
                p.copy_(torch.randn(p.shape, generator=gen) * 0.1 / math.sqrt(p.shape[1]))
            else:
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_((torch.rand(p.shape, generator=gen) * 2 - 1) * bound)
        net.rff_frequencies.copy_(torch.randn(config.rff_dim, generator=gen) * config.rff_scale)
    net = net.to(dtype)
    params = ParameterSet(config, net, {})
    params.reset_ema()
    return params


def predict_noise(network: UNet, z, sigma) -> np.ndarray:
    """Evaluate eps_hat for one frame or a (batch, samples) array."""
    z = np.asarray(z)
    single = z.ndim == 1
    batch = z[None] if single else z
    n = network.config.sample_count
    if batch.shape[-1] != n:
        raise ValueError(f"frame length {batch.shape[-1]} != configured sample_count {n}")
    sig = np.array(np.broadcast_to(np.asarray(sigma, dtype=np.float64), (batch.shape[0],)))
    if np.any((sig < 0) | (sig > 1)):
        raise ValueError("sigma must lie in [0, 1]")
    dtype = next(network.parameters()).dtype
    with torch.no_grad():
        out = network(torch.tensor(batch, dtype=dtype), torch.as_tensor(sig, dtype=dtype))
    out = out.numpy()
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite network output at sigma={np.unique(sig)}")
    return out[0] if single else out


class NetworkDenoiser:
    """Adapter from a UNet to the sampler's ``Denoiser`` contract.

    Frames are evaluated one at a time unless ``batched``: CPU kernels are not
    bitwise batch-invariant, and per-frame evaluation keeps every output
    independent of how many other frames are in flight.
    """

    def __init__(self, network: UNet, batched: bool = False):
        self.network = network.eval()
        self.batched = batched

    def __call__(self, z, sigma):
        z = np.asarray(z)
        if self.batched or z.ndim == 1:
            return predict_noise(self.network, z, sigma).astype(np.float64)
        return np.stack([predict_noise(self.network, row, sigma) for row in z]).astype(np.float64)


class GaussianDenoiser:
    """Closed-form optimum eps_hat = E[eps | z] for i.i.d. N(0, variance) data."""

    def __init__(self, variance: float = 1.0):
        self.variance = variance

    def __call__(self, z, sigma):
        a2 = 1.0 - sigma * sigma
        return sigma * np.asarray(z, dtype=np.float64) / (a2 * self.variance + sigma * sigma)


def count_parameters(network: nn.Module) -> int:
    return sum(p.numel() for p in network.parameters())


def shape_summary(config: NetworkConfig) -> Sequence[tuple[int, int]]:
    """(channels, length) at each encoder stage."""
    out, n = [], config.sample_count
    for c, f in zip(config.channels, config.downsample_factors):
        n //= f
        out.append((c, n))
    return out
