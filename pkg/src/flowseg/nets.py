"""Convolutional codecs and the conditional velocity UNet.

All tensors are NCHW.  A codec with ``k`` channel multipliers downsamples by
``f = 2 ** (k - 1)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DomainError, ShapeError

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


@dataclass(frozen=True)
class ConvStackConfig:
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    blocks_per_stage: int = 1
    use_attention_at: tuple[int, ...] = (2,)

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "use_attention_at", tuple(self.use_attention_at))
        if self.base_channels < 4:
            raise ConfigError("base_channels must be >= 4")
        if not self.channel_multipliers:
            raise ConfigError("channel_multipliers must be non-empty")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        bad = [i for i in self.use_attention_at if not 0 <= i < len(self.channel_multipliers)]
        if bad:
            raise ConfigError(f"attention stage indices out of range: {bad}")

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_multipliers) - 1)

    @property
    def stage_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]


@dataclass(frozen=True)
class CodecConfig:
    in_channels: int = 3
    latent_channels: int = 3
    stack: ConvStackConfig = field(default_factory=ConvStackConfig)
    kind: str = "image"  # image -> tanh output, mask -> sigmoid output

    def __post_init__(self):
        if isinstance(self.stack, dict):
            object.__setattr__(self, "stack", ConvStackConfig(**self.stack))
        if self.kind not in ("image", "mask"):
            raise ConfigError(f"codec kind must be image or mask, got {self.kind!r}")


@dataclass(frozen=True)
class VelocityNetConfig:
    state_channels: int = 3
    cond_channels: int = 3
    stack: ConvStackConfig = field(default_factory=ConvStackConfig)
    time_embedding_dim: int = 64
    conditioning: str = "channel-concat"

    def __post_init__(self):
        if isinstance(self.stack, dict):
            object.__setattr__(self, "stack", ConvStackConfig(**self.stack))
        if self.time_embedding_dim % 2:
            raise ConfigError("time_embedding_dim must be even")
        if self.conditioning != "channel-concat":
            raise ConfigError(f"unsupported conditioning {self.conditioning!r}")


def config_dict(cfg) -> dict:
    d = asdict(cfg)

    def lists(x):
        if isinstance(x, dict):
            return {k: lists(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [lists(v) for v in x]
        return x

    return lists(d)


@dataclass
class GaussianPosterior:
    mean: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError(f"mean {tuple(self.mean.shape)} vs logvar {tuple(self.logvar.shape)}")
        self.logvar = self.logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


def reparameterize(posterior: GaussianPosterior, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != posterior.mean.shape:
        raise ShapeError(f"noise {tuple(noise.shape)} does not match posterior {tuple(posterior.mean.shape)}")
    return posterior.mean + torch.exp(0.5 * posterior.logvar) * noise


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, temb_dim=None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Single-head self-attention over spatial positions."""

    def __init__(self, ch):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c), dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class Encoder(nn.Module):
    def __init__(self, in_channels, out_channels, stack: ConvStackConfig):
        super().__init__()
        chs = stack.stage_channels
        self.conv_in = nn.Conv2d(in_channels, chs[0], 3, padding=1)
        self.stages = nn.ModuleList()
        prev = chs[0]
        for i, ch in enumerate(chs):
            stage = nn.Module()
            stage.blocks = nn.ModuleList(
                [ResBlock(prev if j == 0 else ch, ch) for j in range(stack.blocks_per_stage)]
            )
            stage.attn = AttnBlock(ch) if i in stack.use_attention_at else nn.Identity()
            stage.down = Downsample(ch) if i < len(chs) - 1 else nn.Identity()
            self.stages.append(stage)
            prev = ch
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, out_channels, 3, padding=1)

    def forward(self, x):
        h = self.conv_in(x)
        for stage in self.stages:
            for block in stage.blocks:
                h = block(h)
            h = stage.down(stage.attn(h))
        return self.conv_out(F.silu(self.norm_out(h)))


class Decoder(nn.Module):
    def __init__(self, in_channels, out_channels, stack: ConvStackConfig):
        super().__init__()
        chs = stack.stage_channels
        n = len(chs)
        self.conv_in = nn.Conv2d(in_channels, chs[-1], 3, padding=1)
        self.stages = nn.ModuleList()
        prev = chs[-1]
        for i in reversed(range(n)):
            ch = chs[i]
            stage = nn.Module()
            stage.blocks = nn.ModuleList(
                [ResBlock(prev if j == 0 else ch, ch) for j in range(stack.blocks_per_stage)]
            )
            stage.attn = AttnBlock(ch) if i in stack.use_attention_at else nn.Identity()
            stage.up = Upsample(ch) if i > 0 else nn.Identity()
            self.stages.append(stage)
            prev = ch
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, out_channels, 3, padding=1)

    def forward(self, z):
        h = self.conv_in(z)
        for stage in self.stages:
            for block in stage.blocks:
                h = block(h)
            h = stage.up(stage.attn(h))
        return self.conv_out(F.silu(self.norm_out(h)))


class Codec(nn.Module):
    """Variational autoencoder for images (``kind="image"``) or masks (``kind="mask"``).

    ``decode`` squashes to ``[-1, 1]`` for images and ``[0, 1]`` for masks.
    ``trained`` is flipped by training or by loading a checkpoint.
    """

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config.in_channels, 2 * config.latent_channels, config.stack)
        self.decoder = Decoder(config.latent_channels, config.in_channels, config.stack)
        self.trained = False

    @property
    def factor(self) -> int:
        return self.config.stack.downsample_factor

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        f = self.factor
        if height % f or width % f:
            raise ShapeError(f"spatial size {height}x{width} not divisible by f={f}")
        return self.config.latent_channels, height // f, width // f

    def encode(self, x: torch.Tensor) -> GaussianPosterior:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        self.latent_shape(x.shape[2], x.shape[3])
        mean, logvar = self.encoder(x).chunk(2, dim=1)
        return GaussianPosterior(mean, logvar)

    def decode_logits(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.config.latent_channels:
            raise ShapeError(f"expected (B, {self.config.latent_channels}, h, w), got {tuple(z.shape)}")
        return self.decoder(z)

    def squash(self, logits: torch.Tensor) -> torch.Tensor:
        return torch.tanh(logits) if self.config.kind == "image" else torch.sigmoid(logits)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.squash(self.decode_logits(z))

    def forward(self, x, noise=None):
        post = self.encode(x)
        z = post.mean if noise is None else reparameterize(post, noise)
        return self.decode(z), post


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal features of ``t`` in ``[0, 1]``; time is scaled by 1000 first."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class VelocityNet(nn.Module):
    """UNet velocity field ``u(t, z_t, cond)``.

    The condition is concatenated with the state at the input.  Every residual
    block receives its own projection of the sinusoidal time embedding.  The
    output convolution starts at zero so an untrained net emits zero velocity.
    """

    def __init__(self, config: VelocityNetConfig):
        super().__init__()
        self.config = config
        stack = config.stack
        chs = stack.stage_channels
        n = len(chs)
        tdim = config.time_embedding_dim
        temb_dim = 4 * tdim
        self.time_mlp = nn.Sequential(nn.Linear(tdim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(config.state_channels + config.cond_channels, chs[0], 3, padding=1)

        self.down = nn.ModuleList()
        skip_chs = [chs[0]]
        prev = chs[0]
        for i, ch in enumerate(chs):
            for _ in range(stack.blocks_per_stage):
                layer = nn.Module()
                layer.res = ResBlock(prev, ch, temb_dim)
                layer.attn = AttnBlock(ch) if i in stack.use_attention_at else nn.Identity()
                self.down.append(layer)
                skip_chs.append(ch)
                prev = ch
            if i < n - 1:
                layer = nn.Module()
                layer.downsample = Downsample(ch)
                self.down.append(layer)
                skip_chs.append(ch)

        self.mid_res1 = ResBlock(prev, prev, temb_dim)
        self.mid_attn = AttnBlock(prev)
        self.mid_res2 = ResBlock(prev, prev, temb_dim)

        self.up = nn.ModuleList()
        for i in reversed(range(n)):
            ch = chs[i]
            for _ in range(stack.blocks_per_stage + 1):
                layer = nn.Module()
                layer.res = ResBlock(prev + skip_chs.pop(), ch, temb_dim)
                layer.attn = AttnBlock(ch) if i in stack.use_attention_at else nn.Identity()
                self.up.append(layer)
                prev = ch
            if i > 0:
                layer = nn.Module()
                layer.upsample = Upsample(ch)
                self.up.append(layer)

        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, config.state_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def factor(self) -> int:
        return self.config.stack.downsample_factor

    def forward(self, t, z_t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if z_t.ndim != 4 or z_t.shape[1] != self.config.state_channels:
            raise ShapeError(f"state must be (B, {self.config.state_channels}, h, w), got {tuple(z_t.shape)}")
        if cond.ndim != 4 or cond.shape[1] != self.config.cond_channels:
            raise ShapeError(f"condition must be (B, {self.config.cond_channels}, h, w), got {tuple(cond.shape)}")
        if cond.shape[0] != z_t.shape[0] or cond.shape[2:] != z_t.shape[2:]:
            raise ShapeError(f"state {tuple(z_t.shape)} and condition {tuple(cond.shape)} incompatible")
        f = self.factor
        if z_t.shape[2] % f or z_t.shape[3] % f:
            raise ShapeError(f"spatial size {tuple(z_t.shape[2:])} not divisible by {f}")
        t = torch.as_tensor(t, dtype=z_t.dtype, device=z_t.device)
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        if t.shape != (z_t.shape[0],):
            raise ShapeError(f"t must be scalar or ({z_t.shape[0]},), got {tuple(t.shape)}")
        if not bool(((t >= 0) & (t <= 1)).all()):
            raise DomainError("t must lie in [0, 1]")

        temb = self.time_mlp(timestep_embedding(t, self.config.time_embedding_dim))
        h = self.conv_in(torch.cat([z_t, cond], dim=1))
        skips = [h]
        for layer in self.down:
            if hasattr(layer, "downsample"):
                h = layer.downsample(h)
            else:
                h = layer.attn(layer.res(h, temb))
            skips.append(h)
        h = self.mid_res2(self.mid_attn(self.mid_res1(h, temb)), temb)
        for layer in self.up:
            if hasattr(layer, "upsample"):
                h = layer.upsample(h)
            else:
                h = layer.attn(layer.res(torch.cat([h, skips.pop()], dim=1), temb))
        return self.conv_out(F.silu(self.norm_out(h)))


def velocity_forward(net: VelocityNet, t, z_t: torch.Tensor, z_x: torch.Tensor) -> torch.Tensor:
    return net(t, z_t, z_x)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
