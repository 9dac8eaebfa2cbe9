"""Spherical UNet predicting the diffusion velocity target.

Public array contracts are (channels, vertices); inside the network
activations run channels-last, (batch, vertices, channels), so the 1-ring
gather picks contiguous channel rows and the 7-tap stack feeds one linear per
conv. The only mesh-aware pieces are that gather convolution, the
prefix-slice pool and the zero-pad unpool; the rest is standard DDPM
machinery (ResBlocks with injected embeddings, full self-attention at coarse
orders, group norm, SiLU).

Parameter initialization draws from a seeded Philox stream in module
construction order, so models are reproducible independent of torch's global
RNG state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import NumericalFault
from .featuremap import FeatureMap
from .icosphere import build_icosphere, conv_indices, prefix_count
from .rng import stream
from .schedule import NoiseSchedule

_CKPT_MAGIC = b"ICKP"
_CKPT_VERSION = 1


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal step embedding: half sines, half cosines.

    Frequencies fall geometrically from 1 to 1/10000, so wavelengths span
    1..10000 steps. Accepts a scalar step or an array of steps.
    """
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    if half > 1:
        freqs = 10000.0 ** (-np.arange(half) / (half - 1))
    else:
        freqs = np.ones(1)
    t_arr = np.asarray(t, dtype=np.float64)
    phase = t_arr[..., None] * freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def _norm_groups(channels: int) -> int:
    for g in range(min(8, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 4
    out_channels: int = 2
    base_order: int = 6
    min_order: int = 2
    widths: tuple[int, ...] = (16, 32, 64, 96, 128)
    blocks_per_level: int = 2
    attention_orders: frozenset[int] = field(default_factory=lambda: frozenset({2, 3}))
    embed_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(
            self, "attention_orders", frozenset(int(o) for o in self.attention_orders)
        )
        if self.min_order < 0:
            raise ValueError("min_order must be >= 0")
        if self.base_order < self.min_order:
            raise ValueError("base_order must be >= min_order")
        n_levels = self.base_order - self.min_order + 1
        if len(self.widths) != n_levels:
            raise ValueError(
                f"widths must list one width per level "
                f"({n_levels} for orders {self.base_order}..{self.min_order})"
            )
        if self.embed_dim % 2 != 0:
            raise ValueError("embed_dim must be even")

    @property
    def n_levels(self) -> int:
        return self.base_order - self.min_order + 1

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "base_order": self.base_order,
            "min_order": self.min_order,
            "widths": list(self.widths),
            "blocks_per_level": self.blocks_per_level,
            "attention_orders": sorted(self.attention_orders),
            "embed_dim": self.embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        d["attention_orders"] = frozenset(d["attention_orders"])
        return cls(**d)


def ring_conv(x: FeatureMap, weights, bias, mesh) -> FeatureMap:
    """1-ring convolution: 7 taps per vertex (self + ordered ring slots 0..5).

    Pentagon vertices see their first neighbor twice, per the ring table.
    """
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.order != mesh.order:
        raise ValueError("feature map order does not match mesh order")
    if weights.ndim != 3 or weights.shape[2] != 7:
        raise ValueError(f"weights must be (out, in, 7), got {weights.shape}")
    if weights.shape[1] != x.channels:
        raise ValueError(
            f"weight in-channels {weights.shape[1]} != map channels {x.channels}"
        )
    if bias.shape != (weights.shape[0],):
        raise ValueError("bias shape must be (out,)")
    gathered = x.data[:, conv_indices(mesh)]  # (in, V, 7)
    out = np.einsum("oik,ivk->ov", weights, gathered) + bias[:, None]
    return FeatureMap(x.order, out)


def pool(x: FeatureMap, from_order: int) -> FeatureMap:
    """Restrict to the order-(from_order-1) prefix; no averaging."""
    if from_order < 1:
        raise ValueError("cannot pool below order 0")
    if x.order != from_order:
        raise ValueError(f"map order {x.order} != from_order {from_order}")
    return FeatureMap(from_order - 1, x.data[:, : prefix_count(from_order - 1)])


def unpool(x: FeatureMap, to_order: int) -> FeatureMap:
    """Zero-pad onto the order-``to_order`` vertex set."""
    if x.order != to_order - 1:
        raise ValueError(f"map order {x.order} != to_order-1 ({to_order - 1})")
    out = np.zeros((x.channels, prefix_count(to_order)), dtype=np.float32)
    out[:, : x.n_vertices] = x.data
    return FeatureMap(to_order, out)


def _param(rng: np.random.Generator, shape, std: float | None) -> nn.Parameter:
    if std is None:
        data = np.zeros(shape, dtype=np.float64)
    else:
        data = rng.standard_normal(shape) * std
    return nn.Parameter(torch.as_tensor(data, dtype=torch.float32))


class RingConv(nn.Module):
    """Learnable 7-tap 1-ring filter (channels-last activations)."""

    def __init__(self, in_ch: int, out_ch: int, rng, zero_init: bool = False):
        super().__init__()
        std = None if zero_init else (1.0 / (in_ch * 7)) ** 0.5
        self.weight = _param(rng, (out_ch, in_ch, 7), std)  # canonical layout
        self.bias = _param(rng, (out_ch,), None)

    def forward(self, x, idx):
        # x: (B, V, C); idx: flat (V*7,) gather table. The gather picks
        # contiguous channel rows and the tap-stacked view is copy-free.
        n_batch, n_verts, in_ch = x.shape
        g = x.index_select(1, idx).view(n_batch, n_verts, 7 * in_ch)
        w = self.weight.permute(0, 2, 1).reshape(-1, 7 * in_ch)
        return torch.nn.functional.linear(g, w, self.bias)


class Pointwise(nn.Module):
    """Per-vertex linear channel mix (the 1x1-conv analogue)."""

    def __init__(self, in_ch: int, out_ch: int, rng):
        super().__init__()
        self.weight = _param(rng, (out_ch, in_ch), (1.0 / in_ch) ** 0.5)
        self.bias = _param(rng, (out_ch,), None)

    def forward(self, x):
        return torch.nn.functional.linear(x, self.weight, self.bias)


class ChannelNorm(nn.Module):
    """Group normalization over channels-last activations.

    Matches nn.GroupNorm semantics: statistics per (batch, group) over all
    vertices and in-group channels, then per-channel affine.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.groups = _norm_groups(channels)
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        n_batch, n_verts, channels = x.shape
        g = x.view(n_batch, n_verts, self.groups, channels // self.groups)
        mu = g.mean(dim=(1, 3), keepdim=True)
        var = (g * g).mean(dim=(1, 3), keepdim=True) - mu * mu
        g = (g - mu) * torch.rsqrt(var + self.eps)
        return g.view(n_batch, n_verts, channels) * self.weight + self.bias


class ConditionEmbedding(nn.Module):
    """Demographic conditioning: gender lookup + age affine-then-SiLU."""

    def __init__(self, embed_dim: int, rng):
        super().__init__()
        self.gender_table = _param(rng, (2, embed_dim), 0.02)
        self.age_weight = _param(rng, (embed_dim,), 0.02)
        self.age_bias = _param(rng, (embed_dim,), None)

    def forward(self, age, gender):
        age_emb = torch.nn.functional.silu(age[:, None] * self.age_weight + self.age_bias)
        return age_emb + self.gender_table[gender]


class ResBlock(nn.Module):
    """norm-SiLU-conv twice, embedding injected between, residual skip."""

    def __init__(self, in_ch: int, out_ch: int, embed_dim: int, rng):
        super().__init__()
        self.norm1 = ChannelNorm(in_ch)
        self.conv1 = RingConv(in_ch, out_ch, rng)
        self.emb_weight = _param(rng, (out_ch, embed_dim), (1.0 / embed_dim) ** 0.5)
        self.emb_bias = _param(rng, (out_ch,), None)
        self.norm2 = ChannelNorm(out_ch)
        self.conv2 = RingConv(out_ch, out_ch, rng)
        self.skip = Pointwise(in_ch, out_ch, rng) if in_ch != out_ch else None

    def forward(self, x, emb, idx):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)), idx)
        shift = torch.nn.functional.linear(
            torch.nn.functional.silu(emb), self.emb_weight, self.emb_bias
        )
        h = h + shift[:, None, :]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)), idx)
        return h + (self.skip(x) if self.skip is not None else x)


class SelfAttention(nn.Module):
    """Single-head full self-attention over all vertices, with residual."""

    def __init__(self, channels: int, rng):
        super().__init__()
        self.norm = ChannelNorm(channels)
        self.q = Pointwise(channels, channels, rng)
        self.k = Pointwise(channels, channels, rng)
        self.v = Pointwise(channels, channels, rng)
        self.out = Pointwise(channels, channels, rng)
        self.scale = channels ** -0.5

    def forward(self, x):
        h = self.norm(x)
        q, k, v = self.q(h) * self.scale, self.k(h), self.v(h)
        attn = torch.softmax(torch.bmm(q, k.transpose(1, 2)), dim=-1)
        return x + self.out(torch.bmm(attn, v))


class _Level(nn.Module):
    def __init__(self, order: int, blocks, attn):
        super().__init__()
        self.order = order
        self.blocks = nn.ModuleList(blocks)
        self.attn = attn

    def forward(self, h, emb, idx):
        for block in self.blocks:
            h = block(h, emb, idx)
        if self.attn is not None:
            h = self.attn(h)
        return h


class SphericalUNet(nn.Module):
    """The full conditional velocity-prediction network.

    Input is the 2-channel noisy feature map concatenated with the 2-channel
    one-hot segmentation mask; output is the 2-channel velocity estimate.
    The summed time+condition embedding is injected into every ResBlock.
    """

    def __init__(self, config: DenoiserConfig, init_seed: int = 0,
                 zero_init_final: bool = True):
        super().__init__()
        self.config = config
        rng = stream(init_seed, 707)
        widths = config.widths
        bpl = config.blocks_per_level
        orders = list(range(config.base_order, config.min_order - 1, -1))

        for order in orders:
            idx = torch.from_numpy(conv_indices(build_icosphere(order)).reshape(-1))
            self.register_buffer(f"_idx_{order}", idx, persistent=False)

        self.cond = ConditionEmbedding(config.embed_dim, rng)
        self.stem = RingConv(config.in_channels, widths[0], rng)

        def attn_for(order, ch):
            return SelfAttention(ch, rng) if order in config.attention_orders else None

        self.encoder = nn.ModuleList()
        for i, order in enumerate(orders[:-1]):
            in_w = widths[i - 1] if i > 0 else widths[0]
            blocks = [ResBlock(in_w if b == 0 else widths[i], widths[i],
                               config.embed_dim, rng) for b in range(bpl)]
            self.encoder.append(_Level(order, blocks, attn_for(order, widths[i])))

        bot_order = config.min_order
        in_w = widths[-2] if len(widths) > 1 else widths[0]
        self.bottleneck = _Level(
            bot_order,
            [ResBlock(in_w if b == 0 else widths[-1], widths[-1],
                      config.embed_dim, rng) for b in range(bpl)],
            attn_for(bot_order, widths[-1]),
        )

        self.decoder = nn.ModuleList()
        for i in reversed(range(len(orders) - 1)):
            order = orders[i]
            below_w = widths[i + 1]
            blocks = [ResBlock(below_w + widths[i] if b == 0 else widths[i],
                               widths[i], config.embed_dim, rng) for b in range(bpl)]
            self.decoder.append(_Level(order, blocks, attn_for(order, widths[i])))

        self.final_norm = ChannelNorm(widths[0])
        self.final_conv = RingConv(widths[0], config.out_channels, rng,
                                   zero_init=zero_init_final)

    def _idx(self, order: int):
        return getattr(self, f"_idx_{order}")

    def embedding(self, t, age, gender):
        emb = torch.as_tensor(
            time_embedding(np.asarray(t, dtype=np.float64), self.config.embed_dim)
        ).to(self.final_norm.weight.dtype)
        return emb + self.cond(age, gender)

    def forward(self, x_t, mask, t, age, gender):
        """(B, 2, V) noisy map + (B, 2, V) mask -> (B, 2, V) velocity."""
        cfg = self.config
        if x_t.shape[1] + mask.shape[1] != cfg.in_channels:
            raise ValueError("x_t and mask channels must concatenate to in_channels")
        emb = self.embedding(t, age, gender)
        h = torch.cat([x_t, mask], dim=1).transpose(1, 2).contiguous()
        h = self.stem(h, self._idx(cfg.base_order))
        skips = []
        for level in self.encoder:
            h = level(h, emb, self._idx(level.order))
            skips.append(h)
            h = h[:, : prefix_count(level.order - 1), :]
        h = self.bottleneck(h, emb, self._idx(self.bottleneck.order))
        for level in self.decoder:
            pad = prefix_count(level.order) - h.shape[1]
            h = torch.nn.functional.pad(h, (0, 0, 0, pad))
            h = torch.cat([h, skips.pop()], dim=2)
            h = level(h, emb, self._idx(level.order))
        h = torch.nn.functional.silu(self.final_norm(h))
        out = self.final_conv(h, self._idx(cfg.base_order))
        return out.transpose(1, 2).contiguous()


def condition_embedding(age_scaled: float, gender: int, model) -> np.ndarray:
    """Embed one (age, gender) pair with the model's conditioning tables."""
    if not 0.0 <= age_scaled <= 1.0:
        raise ValueError(f"scaled age must be in [0, 1], got {age_scaled}")
    if gender not in (0, 1):
        raise ValueError(f"gender must be 0 or 1, got {gender}")
    cond = model.cond if isinstance(model, SphericalUNet) else model
    with torch.no_grad():
        age = torch.tensor([float(age_scaled)], dtype=cond.gender_table.dtype)
        out = cond(age, torch.tensor([gender]))
    return out[0].numpy()


def _validate_mask(mask: np.ndarray) -> None:
    onehot = np.isin(mask, (0.0, 1.0)).all() and np.allclose(mask.sum(axis=-2), 1.0)
    if not onehot:
        raise ValueError("mask channels must be one-hot (0/1 summing to 1 per vertex)")


def predict_v_batch(model: SphericalUNet, x_t, mask, t, age, gender) -> np.ndarray:
    """Batched no-grad forward: (B, 2, V) arrays in, (B, 2, V) velocity out."""
    n_batch = np.asarray(x_t).shape[0]
    x_t = np.ascontiguousarray(x_t, dtype=np.float32)
    mask_arr = np.ascontiguousarray(mask, dtype=np.float32)
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (n_batch,)).copy()
    age_arr = np.broadcast_to(np.asarray(age, dtype=np.float32), (n_batch,)).copy()
    gen_arr = np.broadcast_to(np.asarray(gender, dtype=np.int64), (n_batch,)).copy()
    with torch.no_grad():
        out = model(
            torch.from_numpy(x_t),
            torch.from_numpy(mask_arr),
            torch.from_numpy(t_arr),
            torch.from_numpy(age_arr),
            torch.from_numpy(gen_arr),
        )
    return out.numpy()


def denoiser_forward(
    x_t: FeatureMap,
    mask: FeatureMap,
    t: int,
    age_scaled: float,
    gender: int,
    model: SphericalUNet,
) -> FeatureMap:
    """Validated single-subject forward pass returning the velocity estimate."""
    cfg = model.config
    if x_t.order != cfg.base_order or mask.order != cfg.base_order:
        raise ValueError(
            f"inputs must be at base order {cfg.base_order}, "
            f"got {x_t.order}/{mask.order}"
        )
    if x_t.channels + mask.channels != cfg.in_channels:
        raise ValueError("x_t plus mask channels must equal in_channels")
    _validate_mask(mask.data)
    if not 0.0 <= age_scaled <= 1.0:
        raise ValueError(f"scaled age must be in [0, 1], got {age_scaled}")
    if gender not in (0, 1):
        raise ValueError(f"gender must be 0 or 1, got {gender}")
    out = predict_v_batch(
        model, x_t.data[None], mask.data[None], t, age_scaled, gender
    )
    return FeatureMap(x_t.order, out[0])


def batch_loss(model: SphericalUNet, x0, mask, age, gender, t, eps,
               sched: NoiseSchedule):
    """Velocity-MSE loss tensor for a prepared batch of arrays.

    x0/mask/eps: (B, 2, V) float arrays; t: (B,) ints in [1, T]. Shared by
    ``loss_and_grad`` and the training loop so both optimize the same
    objective.
    """
    dtype = model.final_norm.weight.dtype
    t = np.asarray(t, dtype=np.int64)
    if t.min() < 1 or t.max() > sched.timesteps:
        raise ValueError("t values must lie in [1, T]")
    sab = sched.sqrt_alpha_bar[t][:, None, None]
    somab = sched.sqrt_one_minus_alpha_bar[t][:, None, None]
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    x_t = torch.as_tensor(sab * x0 + somab * eps, dtype=dtype)
    v_tgt = torch.as_tensor(sab * eps - somab * x0, dtype=dtype)
    pred = model(
        x_t,
        torch.as_tensor(np.asarray(mask), dtype=dtype),
        torch.as_tensor(t),
        torch.as_tensor(np.asarray(age), dtype=dtype),
        torch.as_tensor(np.asarray(gender, dtype=np.int64)),
    )
    return torch.mean((pred - v_tgt) ** 2)


def loss_and_grad(batch, t, noise, sched: NoiseSchedule, model: SphericalUNet):
    """Loss and exact parameter gradients for a batch of subjects.

    ``batch`` is a sequence of (x0: FeatureMap, mask: FeatureMap, age, gender);
    ``t`` and ``noise`` give one timestep / noise draw per item. Returns
    (loss, {param_name: gradient array}).
    """
    x0 = np.stack([item[0].data for item in batch])
    mask = np.stack([item[1].data for item in batch])
    age = np.array([item[2] for item in batch], dtype=np.float64)
    gender = np.array([item[3] for item in batch], dtype=np.int64)
    eps = np.stack([n.data for n in noise])
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, x0, mask, age, gender, t, eps, sched)
    if not torch.isfinite(loss):
        raise NumericalFault(
            f"non-finite training loss (t={list(np.asarray(t))}, "
            f"max|x0|={np.abs(x0).max():.3g}, max|eps|={np.abs(eps).max():.3g})"
        )
    loss.backward()
    grads = {
        name: p.grad.detach().numpy().copy()
        for name, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    return loss.item(), grads


def save_checkpoint(model: SphericalUNet, path, metadata: dict | None = None) -> None:
    """Write an ICKP checkpoint: JSON manifest + little-endian f32 blob.

    The manifest records the denoiser config, caller metadata, and one
    (name, dtype, shape) entry per parameter in state-registration order;
    the blob concatenates the arrays in that order. Mesh gather tables are
    rebuilt from the config on load and are not stored.
    """
    names, arrays = [], []
    for name, p in model.named_parameters():
        names.append((name, list(p.shape)))
        arrays.append(p.detach().cpu().numpy().astype("<f4"))
    manifest = {
        "config": model.config.to_dict(),
        "metadata": metadata or {},
        "arrays": [[name, "f32", shape] for name, shape in names],
    }
    manifest_bytes = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<Q", len(manifest_bytes)))
        fh.write(manifest_bytes)
        for arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read an ICKP checkpoint; returns (model, metadata)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not an ICKP checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported ICKP version {version}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        blob = fh.read()
    config = DenoiserConfig.from_dict(manifest["config"])
    model = SphericalUNet(config)
    params = dict(model.named_parameters())
    if [a[0] for a in manifest["arrays"]] != list(params):
        raise ValueError(f"{path}: manifest does not match model parameters")
    offset = 0
    with torch.no_grad():
        for name, dtype, shape in manifest["arrays"]:
            if dtype != "f32":
                raise ValueError(f"{path}: unsupported dtype {dtype}")
            size = int(np.prod(shape)) if shape else 1
            chunk = np.frombuffer(blob, dtype="<f4", count=size, offset=offset)
            offset += 4 * size
            if list(params[name].shape) != shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            params[name].copy_(torch.from_numpy(chunk.reshape(shape).copy()))
    if offset != len(blob):
        raise ValueError(f"{path}: blob size does not match manifest")
    return model, manifest["metadata"]
