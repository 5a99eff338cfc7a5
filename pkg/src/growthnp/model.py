"""Hierarchical multi-scale Neural Process with attention skip connections.

Every context observation (image, one-hot segmentation, time) is encoded
separately into feature grids at a ladder of scales plus a diagonal Gaussian
over a global latent. The Gaussians are summed over the context. The decoder
maps (z, t_target) to segmentation logits and, unless the ablation is
selected, merges context information at each scale through dot-product
attention queried at the target time (and pixel location at the coarse,
spatio-temporal scales).

Tensor layout: observation sets are ``[B, N, ...]`` with N the set size.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import IMAGE_CHANNELS, IMAGE_SIZE, NUM_CLASSES, TimedObservation

MAX_SPATIOTEMPORAL_SCALE = 8


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 128
    attention_heads: int = 8
    attention_key_dim: int = 16
    spatiotemporal_scales: tuple[int, ...] = (4, 8)
    temporal_scales: tuple[int, ...] = (16, 32)
    # Ordered from the finest scale (image_size / 2) to the coarsest.
    encoder_channel_widths: tuple[int, ...] = (32, 64, 128, 256)
    num_classes: int = NUM_CLASSES
    image_channels: int = IMAGE_CHANNELS
    image_size: int = IMAGE_SIZE
    sigma_floor: float = 1e-3
    use_attention_skips: bool = True
    allow_large_spatiotemporal: bool = False
    # Channels of a (z, t) projection broadcast into every decoder level; 0 feeds z only through the seed.
    latent_planes: int = 32

    def __post_init__(self):
        object.__setattr__(self, "spatiotemporal_scales", tuple(sorted(self.spatiotemporal_scales)))
        object.__setattr__(self, "temporal_scales", tuple(sorted(self.temporal_scales)))
        object.__setattr__(self, "encoder_channel_widths", tuple(self.encoder_channel_widths))
        self.validate()

    @property
    def scales(self) -> tuple[int, ...]:
        """Encoder grid scales, finest first."""
        return tuple(self.image_size // 2 ** (k + 1) for k in range(len(self.encoder_channel_widths)))

    def width(self, scale: int) -> int:
        return self.encoder_channel_widths[self.scales.index(scale)]

    def mode_for(self, scale: int) -> str:
        if scale in self.spatiotemporal_scales:
            return "spatiotemporal"
        if scale in self.temporal_scales:
            return "temporal"
        raise ValueError(f"scale {scale} has no attention mode configured")

    def validate(self) -> None:
        st, tm = set(self.spatiotemporal_scales), set(self.temporal_scales)
        if st & tm:
            raise ValueError(f"scales {sorted(st & tm)} configured as both spatio-temporal and temporal")
        if any(s > 32 for s in st | tm):
            raise ValueError("attention skip scales must not exceed 32")
        if not self.allow_large_spatiotemporal and any(s > MAX_SPATIOTEMPORAL_SCALE for s in st):
            raise ValueError(
                f"spatio-temporal attention above scale {MAX_SPATIOTEMPORAL_SCALE} is disabled "
                "(score memory grows with the fourth power of the scale)"
            )
        if self.image_size % 2 ** len(self.encoder_channel_widths):
            raise ValueError("image_size must be divisible by 2 ** number of encoder levels")
        if st | tm != set(self.scales):
            raise ValueError(
                f"attention scales {sorted(st | tm)} must cover the encoder ladder {list(self.scales)}"
            )
        if self.latent_dim < 1 or self.attention_heads < 1 or self.attention_key_dim < 1:
            raise ValueError("latent_dim, attention_heads and attention_key_dim must be positive")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")
        if self.latent_planes < 0:
            raise ValueError(f"latent_planes must be non-negative, got {self.latent_planes}")

    def scaled(self, factor: float) -> "ModelConfig":
        """Shrink channel widths and latent size by one factor."""
        return dataclasses.replace(
            self,
            encoder_channel_widths=tuple(max(1, int(round(w * factor))) for w in self.encoder_channel_widths),
            latent_dim=max(1, int(round(self.latent_dim * factor))),
            latent_planes=max(1, int(round(self.latent_planes * factor))) if self.latent_planes else 0,
        )

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return dataclasses.replace(cls().scaled(0.5), **overrides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("spatiotemporal_scales", "temporal_scales", "encoder_channel_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class GaussianLatent:
    mu: torch.Tensor
    sigma: torch.Tensor

    def rsample(self, eps: Optional[torch.Tensor] = None, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        if eps is None:
            eps = torch.randn(self.mu.shape, generator=generator, dtype=self.mu.dtype, device=self.mu.device)
        return self.mu + self.sigma * eps

    def sample(self, n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """``n`` draws stacked on a new leading axis."""
        eps = torch.randn((n,) + tuple(self.mu.shape), generator=generator, dtype=self.mu.dtype)
        return self.mu + self.sigma * eps


def coordinate_grid(size: int, dtype=torch.float32) -> torch.Tensor:
    """[2, size, size] planes of x and y pixel locations spanning -0.5..0.5."""
    lin = torch.linspace(-0.5, 0.5, size, dtype=dtype)
    yy, xx = torch.meshgrid(lin, lin, indexing="ij")
    return torch.stack([xx, yy])


def _conv_block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.LeakyReLU(0.1),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.LeakyReLU(0.1),
    )


class Encoder(nn.Module):
    """Per-observation encoder returning grids at every ladder scale plus (mu, sigma)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c_in = config.image_channels + config.num_classes + 3
        w = config.encoder_channel_widths
        self.stem = nn.Sequential(
            nn.Conv2d(c_in, w[0], 3, padding=1),
            nn.InstanceNorm2d(w[0], affine=True),
            nn.LeakyReLU(0.1),
        )
        self.down = nn.ModuleList()
        prev = w[0]
        for width in w:
            self.down.append(_conv_block(prev, width, stride=2))
            prev = width
        bottom = config.scales[-1]
        self.global_head = nn.Linear(w[-1] * bottom * bottom, 2 * config.latent_dim)

    def forward(self, images, segs, times):
        cfg = self.config
        b, n = times.shape
        size = images.shape[-1]
        x_img = images.reshape(b * n, *images.shape[2:])
        onehot = F.one_hot(segs.reshape(b * n, size, size).long(), cfg.num_classes)
        onehot = onehot.permute(0, 3, 1, 2).to(images.dtype)
        tplane = times.reshape(b * n, 1, 1, 1).expand(-1, 1, size, size).to(images.dtype)
        coords = coordinate_grid(size, images.dtype).expand(b * n, -1, -1, -1)
        h = self.stem(torch.cat([x_img, onehot, tplane, coords], dim=1))
        grids = {}
        for scale, block in zip(cfg.scales, self.down):
            h = block(h)
            grids[scale] = h.reshape(b, n, *h.shape[1:])
        stats = self.global_head(h.flatten(1)).reshape(b, n, 2, cfg.latent_dim)
        mu = stats[:, :, 0]
        sigma = F.softplus(stats[:, :, 1]) + cfg.sigma_floor
        return grids, mu, sigma


class MultiHeadAttention(nn.Module):
    """softmax(Q K^T / sqrt(d)) V per head, heads concatenated then mixed linearly."""

    def __init__(self, query_dim: int, key_dim: int, value_dim: int, out_dim: int, heads: int, head_dim: int):
        super().__init__()
        self.heads, self.head_dim = heads, head_dim
        inner = heads * head_dim
        self.to_q = nn.Linear(query_dim, inner)
        self.to_k = nn.Linear(key_dim, inner)
        self.to_v = nn.Linear(value_dim, inner)
        self.to_out = nn.Linear(inner, out_dim)

    def attention_weights(self, queries, keys):
        """Softmax weights laid out [B, Q, K, heads]; they sum to 1 over K."""
        b, nq, _ = queries.shape
        nk = keys.shape[1]
        q = self.to_q(queries).reshape(b, nq, self.heads, self.head_dim)
        k = self.to_k(keys).reshape(b, nk, self.heads, self.head_dim)
        scores = torch.einsum("bqhd,bkhd->bqkh", q, k) / math.sqrt(self.head_dim)
        return torch.softmax(scores, dim=2)

    def forward(self, queries, keys, values):
        b, nq, _ = queries.shape
        nk = keys.shape[1]
        w = self.attention_weights(queries, keys)
        v = self.to_v(values).reshape(b, nk, self.heads, self.head_dim)
        out = torch.einsum("bqkh,bkhd->bqhd", w, v).reshape(b, nq, self.heads * self.head_dim)
        return self.to_out(out)


class SkipAttention(nn.Module):
    """Aggregates context grids of one scale at query times.

    Spatio-temporal mode: tokens are (t, x, y, features) over every context
    timestep and pixel; each target pixel attends over all of them.
    Temporal mode: each pixel attends only over the context timesteps at
    its own location, without coordinates. On the query side the pixel's
    features are the context mean at that pixel.
    """

    def __init__(self, scale: int, channels: int, mode: str, heads: int, head_dim: int):
        super().__init__()
        if mode not in ("spatiotemporal", "temporal"):
            raise ValueError(f"unknown attention mode {mode!r}")
        self.scale, self.mode = scale, mode
        extra = 3 if mode == "spatiotemporal" else 1
        self.attn = MultiHeadAttention(channels + extra, channels + extra, channels, channels, heads, head_dim)

    def tokens(self, grids, t_c, t_q):
        """Build (queries, keys, values) for the attention call."""
        b, n, c, s, _ = grids.shape
        if s != self.scale:
            raise ValueError(f"grid scale {s} does not match attention scale {self.scale}")
        m = t_q.shape[1]
        feats = grids.permute(0, 1, 3, 4, 2)  # [B, N, s, s, C]
        query_feats = feats.mean(dim=1)  # [B, s, s, C]
        dt = grids.dtype
        if self.mode == "spatiotemporal":
            xy = coordinate_grid(s, dt).permute(1, 2, 0)  # [s, s, 2]
            tc = t_c.to(dt)[:, :, None, None, None].expand(b, n, s, s, 1)
            keys = torch.cat([tc, xy.expand(b, n, s, s, 2), feats], dim=-1).reshape(b, n * s * s, c + 3)
            values = feats.reshape(b, n * s * s, c)
            tq = t_q.to(dt)[:, :, None, None, None].expand(b, m, s, s, 1)
            queries = torch.cat(
                [tq, xy.expand(b, m, s, s, 2), query_feats[:, None].expand(b, m, s, s, c)], dim=-1
            ).reshape(b, m * s * s, c + 3)
            return queries, keys, values
        # temporal: fold pixels into the batch axis
        p = s * s
        feats_p = feats.permute(0, 2, 3, 1, 4).reshape(b * p, n, c)
        tc = t_c.to(dt)[:, None, :, None].expand(b, p, n, 1).reshape(b * p, n, 1)
        keys = torch.cat([tc, feats_p], dim=-1)
        tq = t_q.to(dt)[:, None, :, None].expand(b, p, m, 1).reshape(b * p, m, 1)
        qf = query_feats.reshape(b * p, 1, c).expand(b * p, m, c)
        queries = torch.cat([tq, qf], dim=-1)
        return queries, keys, feats_p

    def weights(self, grids, t_c, t_q):
        return self.attn.attention_weights(*self.tokens(grids, t_c, t_q)[:2])

    def forward(self, grids, t_c, t_q):
        b, n, c, s, _ = grids.shape
        m = t_q.shape[1]
        out = self.attn(*self.tokens(grids, t_c, t_q))
        if self.mode == "spatiotemporal":
            return out.reshape(b, m, s, s, c).permute(0, 1, 4, 2, 3)
        return out.reshape(b, s, s, m, c).permute(0, 3, 4, 1, 2)


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        scales = config.scales[::-1]  # coarsest first
        widths = config.encoder_channel_widths[::-1]
        self.seed_width = widths[0]
        self.seed = nn.Linear(config.latent_dim + 1, widths[0] * scales[0] * scales[0])
        self.seed_act = nn.LeakyReLU(0.1)
        skip = config.use_attention_skips
        lp = config.latent_planes
        self.latent_proj = nn.ModuleList(
            nn.Linear(config.latent_dim + 1, lp) for _ in range(len(scales) + 1 if lp else 0)
        )
        self.blocks = nn.ModuleList()
        self.ups = nn.ModuleList()
        prev = widths[0]
        for i, (s, w) in enumerate(zip(scales, widths)):
            c_in = prev + (w if skip else 0) + 3 + lp
            self.blocks.append(_conv_block(c_in, w))
            nxt = widths[i + 1] if i + 1 < len(widths) else widths[-1]
            self.ups.append(nn.ConvTranspose2d(w, nxt, 2, stride=2))
            prev = nxt
        self.head = nn.Sequential(
            nn.Conv2d(prev + 3 + lp, prev, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(prev, config.num_classes, 1),
        )

    @staticmethod
    def _planes(t, size, dtype):
        bm = t.shape[0]
        tplane = t.reshape(bm, 1, 1, 1).expand(-1, 1, size, size).to(dtype)
        return torch.cat([tplane, coordinate_grid(size, dtype).expand(bm, -1, -1, -1)], dim=1)

    def forward(self, z, t_q, skips=None):
        """z [B, L], t_q [B, M], skips {scale: [B, M, C, s, s]} -> logits [B, M, K, H, W]."""
        cfg = self.config
        b, m = t_q.shape
        dt = z.dtype
        zt = torch.cat([z[:, None].expand(b, m, z.shape[-1]), t_q.to(dt)[..., None]], dim=-1).reshape(b * m, -1)
        s0 = cfg.scales[-1]
        h = self.seed_act(self.seed(zt)).reshape(b * m, self.seed_width, s0, s0)
        t_flat = t_q.reshape(b * m)

        def latent_planes(level, size):
            if not cfg.latent_planes:
                return []
            v = self.latent_proj[level](zt)
            return [v[:, :, None, None].expand(-1, -1, size, size)]

        for level, (s, block, up) in enumerate(zip(cfg.scales[::-1], self.blocks, self.ups)):
            parts = [h]
            if cfg.use_attention_skips:
                if skips is None or s not in skips:
                    raise ValueError(f"missing attention skip for scale {s}")
                sk = skips[s]
                parts.append(sk.reshape(b * m, *sk.shape[2:]))
            parts.append(self._planes(t_flat, s, dt))
            parts += latent_planes(level, s)
            h = up(block(torch.cat(parts, dim=1)))
        size = h.shape[-1]
        head_in = [h, self._planes(t_flat, size, dt)] + latent_planes(len(self.blocks), size)
        logits = self.head(torch.cat(head_in, dim=1))
        return logits.reshape(b, m, *logits.shape[1:])


def _check_finite(name, *tensors):
    for x in tensors:
        if not torch.isfinite(x).all():
            raise ValueError(f"non-finite values in {name}")


class GrowthNP(nn.Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        cfg = self.config
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.attention = nn.ModuleDict()
        if cfg.use_attention_skips:
            for s in cfg.scales:
                self.attention[str(s)] = SkipAttention(
                    s, cfg.width(s), cfg.mode_for(s), cfg.attention_heads, cfg.attention_key_dim
                )

    # -- building blocks ----------------------------------------------------

    def encode(self, images, segs, times):
        """Encode each observation independently: (grids, mu, sigma)."""
        _check_finite("encoder input", images, times)
        return self.encoder(images, segs, times)

    @staticmethod
    def aggregate_global(mu, sigma) -> GaussianLatent:
        """Sum per-observation Gaussian parameters over the set axis."""
        if mu.shape[1] == 0:
            raise ValueError("cannot aggregate an empty context")
        return GaussianLatent(mu.sum(dim=1), sigma.sum(dim=1))

    def attention_aggregate(self, scale: int, grids, t_c, t_q, mode: Optional[str] = None):
        if not self.config.use_attention_skips:
            raise ValueError("model was built without attention skips")
        expected = self.config.mode_for(scale)
        if mode is not None and mode != expected:
            raise ValueError(f"scale {scale} is configured for {expected} attention, not {mode}")
        return self.attention[str(scale)](grids, t_c, t_q)

    def attend(self, grids: dict, t_c, t_q) -> Optional[dict]:
        if not self.config.use_attention_skips:
            return None
        return {s: self.attention_aggregate(s, grids[s], t_c, t_q) for s in self.config.scales}

    def decode(self, z, t_q, skips=None):
        _check_finite("latent sample", z)
        return self.decoder(z, t_q, skips)

    # -- composite operations -----------------------------------------------

    def predict_prior(self, images, segs, times) -> GaussianLatent:
        _, mu, sigma = self.encode(images, segs, times)
        return self.aggregate_global(mu, sigma)

    predict_posterior = predict_prior

    def context_state(self, images, segs, times):
        """Encode a context once; returns (grids, prior)."""
        grids, mu, sigma = self.encode(images, segs, times)
        return grids, self.aggregate_global(mu, sigma)

    def forward(self, ctx_images, ctx_segs, ctx_times, tgt_images, tgt_segs, tgt_times, eps=None, generator=None):
        """Training pass over the target set (context absorbed into targets).

        Returns logits [B, N+M, K, H, W] decoded at all target-set times with
        z drawn from the posterior, plus (posterior, prior).
        """
        n = ctx_times.shape[1]
        images = torch.cat([ctx_images, tgt_images], dim=1)
        segs = torch.cat([ctx_segs, tgt_segs], dim=1)
        times = torch.cat([ctx_times, tgt_times], dim=1)
        grids, mu, sigma = self.encode(images, segs, times)
        prior = self.aggregate_global(mu[:, :n], sigma[:, :n])
        posterior = self.aggregate_global(mu, sigma)
        ctx_grids = {s: g[:, :n] for s, g in grids.items()}
        skips = self.attend(ctx_grids, ctx_times, times)
        z = posterior.rsample(eps=eps, generator=generator)
        return self.decode(z, times, skips), posterior, prior

    @torch.no_grad()
    def sample_trajectory(self, ctx_images, ctx_segs, ctx_times, query_times, z=None, generator=None):
        """Decode one latent trajectory at every query time.

        A single z (drawn from the prior unless given) is shared by all query
        times, so the returned logits [B, Q, K, H, W] are temporally consistent.
        Each time is decoded on its own, which keeps a time's logits bitwise
        independent of the other times requested alongside it.
        """
        grids, prior = self.context_state(ctx_images, ctx_segs, ctx_times)
        if z is None:
            z = prior.rsample(generator=generator)
        out = []
        for i in range(query_times.shape[1]):
            tq = query_times[:, i : i + 1]
            out.append(self.decode(z, tq, self.attend(grids, ctx_times, tq)))
        return torch.cat(out, dim=1)


# --- single-observation conveniences ------------------------------------------


def observations_to_tensors(observations: Sequence[TimedObservation], dtype=torch.float32):
    """Stack observations into ([1, N, C, H, W], [1, N, H, W], [1, N]) tensors."""
    images = torch.from_numpy(np.stack([o.image for o in observations])).to(dtype)[None]
    segs = torch.from_numpy(np.stack([o.segmentation for o in observations]).astype(np.int64))[None]
    times = torch.tensor([[o.time for o in observations]], dtype=dtype)
    return images, segs, times


def encode_observation(model: GrowthNP, obs: TimedObservation):
    """Encode a single observation: ({scale: [C, s, s]}, mu [L], sigma [L])."""
    grids, mu, sigma = model.encode(*observations_to_tensors([obs], next(model.parameters()).dtype))
    return {s: g[0, 0] for s, g in grids.items()}, mu[0, 0], sigma[0, 0]


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
