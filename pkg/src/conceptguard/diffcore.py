"""Toy pixel-space denoising diffusion core.

A small two-level U-Net with one cross-attention block per level predicts
the added noise; text conditioning enters through the attention K/V
projections, which are the adaptation surface for low-rank deltas.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ArgumentError, ConfigurationError, NumericError, ShapeError

IMAGE_SIDE = 32
IMAGE_SHAPE = (3, IMAGE_SIDE, IMAGE_SIDE)


@dataclass
class NoiseSchedule:
    """Linear-beta schedule with cached cumulative products."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def to_model_space(pixels01: torch.Tensor) -> torch.Tensor:
    """Map [0, 1] image values into the [-1, 1] range the denoiser sees."""
    return pixels01 * 2.0 - 1.0


def to_image_space(z: torch.Tensor) -> torch.Tensor:
    return ((z + 1.0) / 2.0).clamp(0.0, 1.0)


def forward_noise(z0: torch.Tensor, t, eps: torch.Tensor,
                  sched: NoiseSchedule) -> torch.Tensor:
    """Noised sample: sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps."""
    if eps.shape != z0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.shape[0] != z0.shape[0]:
            raise ShapeError("per-sample t must match the batch dimension")
        ts = t.tolist()
        if any(not 1 <= ti <= sched.T for ti in ts):
            raise ArgumentError(f"t out of range 1..{sched.T}")
        abar = z0.new_tensor([sched.alpha_bar[ti - 1] for ti in ts])
        abar = abar.reshape(-1, *([1] * (z0.ndim - 1)))
    else:
        ti = int(t)
        if not 1 <= ti <= sched.T:
            raise ArgumentError(f"t out of range 1..{sched.T}")
        abar = z0.new_tensor(sched.alpha_bar[ti - 1])
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos timestep features, shape (B, dim)."""
    half = dim // 2
    exponent = torch.arange(half, dtype=t.dtype, device=t.device)
    freqs = torch.exp(-math.log(10000.0) * exponent / max(half - 1, 1))
    angles = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


def _groups_for(channels: int) -> int:
    return math.gcd(8, channels)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm1 = nn.GroupNorm(_groups_for(cout), cout)
        self.norm2 = nn.GroupNorm(_groups_for(cout), cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Single-head cross-attention from pixels to conditioning rows.

    `lora_k` / `lora_v` may hold low-rank deltas; when present the
    effective projection is W + delta() with the base weight untouched.
    """

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        self.channels = channels
        self.norm = nn.GroupNorm(_groups_for(channels), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(cond_dim, channels, bias=False)
        self.to_v = nn.Linear(cond_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.lora_k = None
        self.lora_v = None

    def k_weight(self) -> torch.Tensor:
        w = self.to_k.weight
        return w + self.lora_k.delta() if self.lora_k is not None else w

    def v_weight(self) -> torch.Tensor:
        w = self.to_v.weight
        return w + self.lora_v.delta() if self.lora_v is not None else w

    def forward(self, x, cond):
        b, c, h, w = x.shape
        q = self.to_q(self.norm(x).reshape(b, c, h * w).transpose(1, 2))
        k = F.linear(cond, self.k_weight())
        v = F.linear(cond, self.v_weight())
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(c), dim=-1)
        out = self.to_out(attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class DenoiserNet(nn.Module):
    """Two-level U-Net style noise predictor with text cross-attention."""

    def __init__(self, base_channels: int = 32, cond_dim: int = 16,
                 time_dim: int = 32, levels: int = 2, in_channels: int = 3):
        super().__init__()
        if levels not in (1, 2):
            raise ConfigurationError("levels must be 1 or 2")
        self.cond_dim = cond_dim
        self.time_dim = time_dim
        self.levels = levels
        c = base_channels
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU())
        self.conv_in = nn.Conv2d(in_channels, c, 3, padding=1)
        self.res1 = ResBlock(c, c, time_dim)
        self.attn1 = CrossAttention(c, cond_dim)
        if levels == 2:
            self.down = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
            self.res2 = ResBlock(2 * c, 2 * c, time_dim)
            self.attn2 = CrossAttention(2 * c, cond_dim)
            self.up = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
            self.res3 = ResBlock(2 * c, c, time_dim)
        self.conv_out = nn.Conv2d(c, in_channels, 3, padding=1)

    def cross_attention_blocks(self) -> dict[str, CrossAttention]:
        blocks = {"attn1": self.attn1}
        if self.levels == 2:
            blocks["attn2"] = self.attn2
        return blocks

    def forward(self, z, t, cond):
        temb = self.time_mlp(sinusoidal_embedding(t.to(z.dtype), self.time_dim))
        h1 = self.attn1(self.res1(self.conv_in(z), temb), cond)
        if self.levels == 1:
            return self.conv_out(h1)
        h2 = self.attn2(self.res2(self.down(h1), temb), cond)
        u = self.up(h2)
        return self.conv_out(self.res3(torch.cat([u, h1], dim=1), temb))


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def _promote(z_t: torch.Tensor, t, cond: torch.Tensor):
    """Add batch dimensions to unbatched inputs; returns (z, t, cond, squeeze)."""
    squeeze = z_t.ndim == 3
    if squeeze:
        z_t = z_t[None]
    if cond.ndim == 2:
        cond = cond[None].expand(z_t.shape[0], -1, -1)
    if not isinstance(t, torch.Tensor):
        t = torch.full((z_t.shape[0],), int(t), dtype=torch.long, device=z_t.device)
    elif t.ndim == 0:
        t = t[None].expand(z_t.shape[0])
    return z_t, t, cond, squeeze


def predict_noise(net: DenoiserNet, z_t: torch.Tensor, t,
                  cond: torch.Tensor) -> torch.Tensor:
    """Run the denoiser; accepts batched or single-sample inputs."""
    if cond.shape[-2] < 1:
        raise ShapeError("conditioning needs at least one row")
    if not torch.isfinite(z_t).all() or not torch.isfinite(cond).all():
        raise NumericError("non-finite values in denoiser inputs")
    z, tt, cc, squeeze = _promote(z_t, t, cond)
    out = net(z, tt, cc)
    return out[0] if squeeze else out


def ldm_loss_at(net: DenoiserNet, z0: torch.Tensor, cond: torch.Tensor,
                sched: NoiseSchedule, t, eps: torch.Tensor) -> torch.Tensor:
    """Denoising loss at fixed (t, eps): mean squared error over elements."""
    z, tt, cc, _ = _promote(z0, t, cond)
    e = eps[None] if eps.ndim == 3 else eps
    z_t = forward_noise(z, tt, e, sched)
    eps_hat = net(z_t, tt, cc)
    return F.mse_loss(eps_hat, e)


def ldm_loss(net: DenoiserNet, z0: torch.Tensor, cond: torch.Tensor,
             sched: NoiseSchedule, rng: torch.Generator) -> torch.Tensor:
    """Denoising loss with (t, eps) drawn from `rng`."""
    z = z0[None] if z0.ndim == 3 else z0
    t = torch.randint(1, sched.T + 1, (z.shape[0],), generator=rng)
    eps = torch.empty_like(z).normal_(generator=rng)
    return ldm_loss_at(net, z, cond, sched, t, eps)


def sample(net: DenoiserNet, cond: torch.Tensor, sched: NoiseSchedule,
           seed: int, n: int = 1, shape: tuple[int, int, int] = IMAGE_SHAPE) -> torch.Tensor:
    """Ancestral sampling; deterministic given (parameters, cond, seed).

    The per-step noise variance follows (1 - alpha_{t-1}) / (1 - abar_t) * beta_t;
    the final step adds no noise.
    """
    rng = torch.Generator().manual_seed(seed)
    dtype = next(net.parameters()).dtype
    z = torch.empty((n, *shape), dtype=dtype).normal_(generator=rng)
    if cond.ndim == 2:
        cond = cond[None].expand(n, -1, -1)
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            tt = torch.full((n,), t, dtype=torch.long)
            eps_hat = net(z, tt, cond)
            a_t = float(sched.alpha[t - 1])
            abar_t = float(sched.alpha_bar[t - 1])
            b_t = float(sched.beta[t - 1])
            mu = (z - b_t / math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(a_t)
            if t > 1:
                var = (1.0 - float(sched.alpha[t - 2])) / (1.0 - abar_t) * b_t
                noise = torch.empty_like(z).normal_(generator=rng)
                z = mu + math.sqrt(var) * noise
            else:
                z = mu
    return z


# ---------------------------------------------------------------------------
# Checkpoint archive: 8-byte little-endian manifest length, JSON manifest
# (tensor name -> shape/dtype/offset), then the concatenated float32 LE data.
# ---------------------------------------------------------------------------

def save_tensors(path: str, tensors: dict[str, np.ndarray]) -> None:
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4")
        entries[name] = {"shape": list(arr.shape), "dtype": "float32", "offset": offset}
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        data = fh.read()
    out = {}
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        out[name] = arr.reshape(shape).copy()
    return out
