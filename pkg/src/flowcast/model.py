"""Velocity-field network for per-frame volume transport.

The T context frames are stacked on the channel axis of a 3D UNet, which
predicts one velocity volume per frame. The transport position tau enters
only through the configured conditioning path: either joint attention
between voxel tokens and a tau token, or a broadcast concatenation at the
bottleneck. The output projection is zero-initialized, so an untrained
model is exactly the zero field and integration leaves its input
unchanged.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Any, Mapping

import numpy as np
import torch
from torch import nn

from .transport import FlowState, fm_loss

CROSS_ATTENTION = "cross_attention"
BOTTLENECK_CONCAT = "bottleneck_concat"
CONDITIONING_MODES = (CROSS_ATTENTION, BOTTLENECK_CONCAT)

CHECKPOINT_FORMAT = "flowcast.checkpoint.v1"

_EMBED_MAX_FREQ = 1000.0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs for the velocity UNet.

    channel_mults sets the per-level widths base_features * mult; each level
    below the first halves every spatial extent, so inputs must be divisible
    by 2 ** (len(channel_mults) - 1). Attention (cross_attention mode) sits
    at levels whose in-plane extent equals attention_resolution and at the
    bottleneck. bottleneck_concat instead injects tau by concatenating its
    embedding onto the bottleneck features. Downsampling uses stride-2
    convolutions, upsampling nearest-neighbor plus convolution, residual
    blocks are GroupNorm/SiLU/Conv pairs without any tau pathway.
    """

    in_frames: int
    base_features: int = 32
    channel_mults: tuple[int, ...] = (1, 1, 2, 4)
    res_blocks_per_level: int = 1
    attention_resolution: int = 16
    conditioning: str = CROSS_ATTENTION
    num_heads: int = 4

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if self.in_frames < 1:
            raise ValueError("in_frames must be positive")
        if self.base_features < 1:
            raise ValueError("base_features must be positive")
        if not self.channel_mults or any(m < 1 for m in self.channel_mults):
            raise ValueError("channel_mults must be non-empty positive integers")
        if self.res_blocks_per_level < 1:
            raise ValueError("res_blocks_per_level must be positive")
        if self.attention_resolution < 1:
            raise ValueError("attention_resolution must be positive")
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}")
        if self.num_heads < 1:
            raise ValueError("num_heads must be positive")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def embed_dim(self) -> int:
        return 4 * self.base_features

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)


def fm_step_embedding(tau, dim: int) -> np.ndarray:
    """Sinusoidal features of the transport position.

    Layout is [sin(f_0 tau) ... sin(f_{k-1} tau), cos(f_0 tau) ... cos],
    with k = dim / 2 geometric frequencies from 1 to 1000 rad. tau may be a
    scalar (returns [dim]) or a vector (returns [len, dim]).
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    tau_arr = np.asarray(tau, dtype=np.float64)
    scalar = tau_arr.ndim == 0
    tau_arr = np.atleast_1d(tau_arr)
    if not np.isfinite(tau_arr).all():
        raise ValueError("tau contains non-finite values")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = _EMBED_MAX_FREQ ** (np.arange(half) / (half - 1))
    angles = tau_arr[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    return emb[0] if scalar else emb


def _norm_groups(channels: int) -> int:
    groups = min(8, channels)
    while channels % groups:
        groups -= 1
    return groups


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(c_in), c_in)
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_norm_groups(c_out), c_out)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv3d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return self.skip(x) + h


class TauAttention(nn.Module):
    """Self-attention over voxels with the tau embedding as one extra key/value token."""

    def __init__(self, channels: int, embed_dim: int, num_heads: int):
        super().__init__()
        self.heads = num_heads if channels % num_heads == 0 else 1
        self.norm = nn.GroupNorm(_norm_groups(channels), channels)
        self.qkv = nn.Conv3d(channels, 3 * channels, 1)
        self.token = nn.Linear(embed_dim, 2 * channels)
        self.proj = nn.Conv3d(channels, channels, 1)

    def forward(self, x, emb):
        b, c, d, h, w = x.shape
        n = d * h * w
        dk = c // self.heads
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.heads, dk, n)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]
        tok = self.token(emb).reshape(b, 2, self.heads, dk, 1)
        k = torch.cat([k, tok[:, 0]], dim=-1)
        v = torch.cat([v, tok[:, 1]], dim=-1)
        attn = torch.einsum("bhcn,bhcm->bhnm", q, k) / math.sqrt(dk)
        attn = attn.softmax(dim=-1)
        out = torch.einsum("bhnm,bhcm->bhcn", attn, v).reshape(b, c, d, h, w)
        return x + self.proj(out)


class TauConcat(nn.Module):
    """Broadcast the tau embedding onto the bottleneck and mix it in."""

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.project = nn.Linear(embed_dim, channels)
        self.mix = nn.Conv3d(2 * channels, channels, 1)

    def forward(self, x, emb):
        b, c, d, h, w = x.shape
        tok = self.project(emb).reshape(b, c, 1, 1, 1).expand(b, c, d, h, w)
        return self.mix(torch.cat([x, tok], dim=1))


class VelocityUNet(nn.Module):
    """3D UNet over channel-stacked context frames; predicts per-frame velocities.

    spatial is the (D, H, W) the network is built for; attention placement
    depends on it, and forward rejects anything else. Construction is
    deterministic in seed.
    """

    def __init__(self, cfg: ModelConfig, spatial: tuple[int, int, int], *, seed: int = 0):
        super().__init__()
        spatial = tuple(int(v) for v in spatial)
        if len(spatial) != 3 or any(v < 1 for v in spatial):
            raise ValueError(f"spatial must be (D, H, W), got {spatial}")
        if any(v % cfg.divisor for v in spatial):
            raise ValueError(
                f"spatial extents {spatial} must be divisible by {cfg.divisor} "
                f"for {cfg.levels} levels"
            )
        self.cfg = cfg
        self.spatial = spatial

        chans = [cfg.base_features * m for m in cfg.channel_mults]
        with_attention = cfg.conditioning == CROSS_ATTENTION
        attn_levels = {
            lvl
            for lvl in range(cfg.levels)
            if max(spatial[1] >> lvl, spatial[2] >> lvl) == cfg.attention_resolution
        }

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.embed = nn.Sequential(
                nn.Linear(cfg.embed_dim, cfg.embed_dim),
                nn.SiLU(),
                nn.Linear(cfg.embed_dim, cfg.embed_dim),
            )
            self.stem = nn.Conv3d(cfg.in_frames, chans[0], 3, padding=1)

            self.down_blocks = nn.ModuleList()
            for lvl, ch in enumerate(chans):
                parts: dict[str, nn.Module] = {
                    "res": nn.ModuleList(
                        [ResBlock(ch, ch) for _ in range(cfg.res_blocks_per_level)]
                    )
                }
                if with_attention and lvl in attn_levels:
                    parts["attn"] = TauAttention(ch, cfg.embed_dim, cfg.num_heads)
                if lvl < cfg.levels - 1:
                    parts["down"] = nn.Conv3d(ch, chans[lvl + 1], 3, stride=2, padding=1)
                self.down_blocks.append(nn.ModuleDict(parts))

            mid_ch = chans[-1]
            self.mid_res1 = ResBlock(mid_ch, mid_ch)
            if with_attention:
                self.mid_tau = TauAttention(mid_ch, cfg.embed_dim, cfg.num_heads)
            else:
                self.mid_tau = TauConcat(mid_ch, cfg.embed_dim)
            self.mid_res2 = ResBlock(mid_ch, mid_ch)

            self.up_blocks = nn.ModuleList()
            for lvl in reversed(range(cfg.levels - 1)):
                ch = chans[lvl]
                blocks = [ResBlock(2 * ch, ch)]
                blocks += [ResBlock(ch, ch) for _ in range(cfg.res_blocks_per_level - 1)]
                parts = {
                    "up": nn.Sequential(
                        nn.Upsample(scale_factor=2, mode="nearest"),
                        nn.Conv3d(chans[lvl + 1], ch, 3, padding=1),
                    ),
                    "res": nn.ModuleList(blocks),
                }
                if with_attention and lvl in attn_levels:
                    parts["attn"] = TauAttention(ch, cfg.embed_dim, cfg.num_heads)
                self.up_blocks.append(nn.ModuleDict(parts))

            self.out_norm = nn.GroupNorm(_norm_groups(chans[0]), chans[0])
            self.out_conv = nn.Conv3d(chans[0], cfg.in_frames, 3, padding=1)
            # zero output projection: an untrained model is exactly the zero field
            nn.init.zeros_(self.out_conv.weight)
            nn.init.zeros_(self.out_conv.bias)

    def _tau_vector(self, tau, batch: int, dtype, device) -> torch.Tensor:
        if isinstance(tau, torch.Tensor):
            flat = tau.reshape(-1)
            if flat.numel() == 1:
                flat = flat.expand(batch)
        else:
            arr = np.atleast_1d(np.asarray(tau, dtype=np.float64)).reshape(-1)
            if arr.size == 1:
                arr = np.full(batch, float(arr[0]))
            flat = torch.as_tensor(arr)
        if flat.numel() != batch:
            raise ValueError(f"tau has {flat.numel()} entries for batch of {batch}")
        lo, hi = float(flat.min()), float(flat.max())
        if not (0.0 <= lo and hi <= 1.0):
            raise ValueError(f"tau must lie in [0, 1], got range [{lo}, {hi}]")
        return flat.to(device=device, dtype=dtype)

    def forward(self, x, tau):
        squeeze = x.ndim == 4
        if squeeze:
            x = x.unsqueeze(0)
        if x.ndim != 5:
            raise ValueError(f"expected [B, T, D, H, W] input, got shape {tuple(x.shape)}")
        expected = (self.cfg.in_frames, *self.spatial)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match model {expected}")

        param = next(self.parameters())
        tau_vec = self._tau_vector(tau, x.shape[0], param.dtype, param.device)
        emb_np = fm_step_embedding(tau_vec.detach().cpu().numpy(), self.cfg.embed_dim)
        emb = self.embed(torch.as_tensor(emb_np, dtype=param.dtype, device=param.device))

        h = self.stem(x)
        skips = []
        for level in self.down_blocks:
            for block in level["res"]:
                h = block(h)
            if "attn" in level:
                h = level["attn"](h, emb)
            if "down" in level:
                skips.append(h)
                h = level["down"](h)

        h = self.mid_res1(h)
        h = self.mid_tau(h, emb)
        h = self.mid_res2(h)

        for level in self.up_blocks:
            h = level["up"](h)
            h = torch.cat([h, skips.pop()], dim=1)
            for block in level["res"]:
                h = block(h)
            if "attn" in level:
                h = level["attn"](h, emb)

        out = self.out_conv(nn.functional.silu(self.out_norm(h)))
        return out.squeeze(0) if squeeze else out

    def velocity(self, state: FlowState) -> np.ndarray:
        """Numpy-friendly evaluation of the field at one flow state."""
        param = next(self.parameters())
        x = torch.as_tensor(np.asarray(state.x_tau), dtype=param.dtype, device=param.device)
        with torch.no_grad():
            out = self.forward(x, state.tau)
        return out.cpu().numpy()


def velocity_gradients(
    model: VelocityUNet, state: FlowState, truth
) -> tuple["OrderedDict[str, torch.Tensor]", float]:
    """Loss gradients for every named parameter at one flow state.

    Raises if the loss is non-finite, reporting the offending tau.
    """
    param = next(model.parameters())
    x = torch.as_tensor(np.asarray(state.x_tau), dtype=param.dtype, device=param.device)
    target = torch.as_tensor(np.asarray(truth), dtype=param.dtype, device=param.device)
    pred = model(x, state.tau)
    loss = fm_loss(pred, target)
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss {loss.item()} at tau={state.tau}")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad(loss, params)
    return OrderedDict(zip(names, grads)), float(loss.detach())


def save_checkpoint(
    path: str, model: VelocityUNet, *, step: int, extra: Mapping[str, Any] | None = None
) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": asdict(model.cfg),
        "spatial": tuple(model.spatial),
        "step": int(step),
        "extra": dict(extra or {}),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[VelocityUNet, dict[str, Any]]:
    """Rebuild the model a checkpoint was saved from; returns (model, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    cfg_dict = dict(payload["model_config"])
    cfg_dict["channel_mults"] = tuple(cfg_dict["channel_mults"])
    cfg = ModelConfig(**cfg_dict)
    model = VelocityUNet(cfg, tuple(payload["spatial"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
