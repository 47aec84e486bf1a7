"""SAM-style block: frozen ViT image encoder, prompt encoder and two mask decoders.

Tensors are channels-first: image embeddings are ``(B, c, h, w)`` and point
tokens ``(B, N, c)``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import InvalidArgument, InvalidPrompt, ShapeError
from .prompts import PADDING

HEADS = ("region", "boundary")


@dataclass
class SamConfig:
    input_size: tuple = (256, 256)
    patch_size: int = 16
    embed_dim: int = 64
    encoder_depth: int = 4
    encoder_heads: int = 4
    prompt_dim: int = 64
    decoder_depth: int = 2
    decoder_heads: int = 4
    decoder_mlp_dim: int = 128

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        p = self.patch_size
        if p < 1 or p & (p - 1):
            raise InvalidArgument("patch_size must be a power of two")
        if any(s % p for s in self.input_size):
            raise ShapeError(f"input size {self.input_size} is not divisible by patch size {p}")
        if self.embed_dim % self.encoder_heads:
            raise InvalidArgument("embed_dim must be divisible by encoder_heads")
        if self.prompt_dim % 8 or self.prompt_dim % self.decoder_heads:
            raise InvalidArgument("prompt_dim must be divisible by 8 and by decoder_heads")

    @property
    def embedding_grid(self):
        return self.input_size[0] // self.patch_size, self.input_size[1] // self.patch_size


class LayerNorm2d(nn.Module):
    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(1, keepdim=True)
        var = (x - mean).pow(2).mean(1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MLP(nn.Module):
    def __init__(self, dims, act=nn.ReLU):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.act = act()

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x


# -- image encoder --------------------------------------------------------------

class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP((dim, dim * mlp_ratio, dim), act=nn.GELU)

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    """Patch embedding, transformer blocks and a conv neck down to ``prompt_dim`` channels."""

    def __init__(self, cfg: SamConfig):
        super().__init__()
        self.cfg = cfg
        h, w = cfg.embedding_grid
        self.patch_embed = nn.Conv2d(3, cfg.embed_dim, cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.randn(1, h * w, cfg.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(EncoderBlock(cfg.embed_dim, cfg.encoder_heads) for _ in range(cfg.encoder_depth))
        self.neck = nn.Sequential(
            nn.Conv2d(cfg.embed_dim, cfg.prompt_dim, 1, bias=False),
            LayerNorm2d(cfg.prompt_dim),
            nn.Conv2d(cfg.prompt_dim, cfg.prompt_dim, 3, padding=1, bias=False),
            LayerNorm2d(cfg.prompt_dim),
        )

    def forward(self, x):
        if tuple(x.shape[-2:]) != self.cfg.input_size:
            raise ShapeError(f"expected images of size {self.cfg.input_size}, got {tuple(x.shape[-2:])}")
        x = self.patch_embed(x)
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2) + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        return self.neck(tokens.transpose(1, 2).reshape(b, c, h, w))


# -- prompt encoder -------------------------------------------------------------

class FourierPositions(nn.Module):
    """Random Fourier features of coordinates normalised to [0, 1]."""

    def __init__(self, dim, scale=1.0):
        super().__init__()
        self.register_buffer("gaussian", scale * torch.randn(2, dim // 2))

    def forward(self, coords01):
        proj = (2 * coords01 - 1) @ self.gaussian.to(coords01.dtype) * (2 * math.pi)
        return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


class PromptEncoder(nn.Module):
    def __init__(self, cfg: SamConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.prompt_dim
        self.pe = FourierPositions(c)
        self.label_embed = nn.Embedding(2, c)
        self.not_a_point = nn.Parameter(torch.randn(c) * 0.02)
        self.no_mask = nn.Parameter(torch.randn(c) * 0.02)
        layers, cin = [], 1
        for i in range(int(math.log2(cfg.patch_size))):
            cout = min(4 * 2 ** i, 16)
            layers += [nn.Conv2d(cin, cout, 2, stride=2), LayerNorm2d(cout), nn.GELU()]
            cin = cout
        layers.append(nn.Conv2d(cin, c, 1))
        self.mask_downscaling = nn.Sequential(*layers)

    def dense_pe(self, dtype=torch.float32):
        h, w = self.cfg.embedding_grid
        ys = (torch.arange(h, dtype=dtype) + 0.5) / h
        xs = (torch.arange(w, dtype=dtype) + 0.5) / w
        grid = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=-1)
        return self.pe(grid).permute(2, 0, 1)[None]

    def embed_points(self, coords, labels):
        """``coords`` (B, N, 2) as (row, col) pixels; ``labels`` (B, N) in {1, 0, PADDING}."""
        H, W = self.cfg.input_size
        valid = labels != PADDING
        rows, cols = coords[..., 0], coords[..., 1]
        if bool(((rows < 0) | (rows >= H) | (cols < 0) | (cols >= W))[valid].any()):
            raise InvalidPrompt(f"point prompt outside the {H}x{W} image")
        dtype = self.not_a_point.dtype
        xy = torch.stack([(cols.to(dtype) + 0.5) / W, (rows.to(dtype) + 0.5) / H], dim=-1)
        tokens = self.pe(xy) + self.label_embed(labels.clamp(min=0))
        return torch.where(valid[..., None], tokens, self.not_a_point.expand_as(tokens))

    def embed_mask(self, mp):
        """``mp`` (B, 1, H, W) logits, or an int batch size when the mask prompt is absent."""
        if isinstance(mp, int):
            h, w = self.cfg.embedding_grid
            return self.no_mask[None, :, None, None].expand(mp, -1, h, w)
        if tuple(mp.shape[-2:]) != self.cfg.input_size:
            raise ShapeError(f"mask prompt must be {self.cfg.input_size}, got {tuple(mp.shape[-2:])}")
        return self.mask_downscaling(mp)

    def forward(self, mp=None, points=None, batch_size=1):
        """Return ``(F_mp, F_pp)``; ``points`` is ``(coords, labels)`` or None."""
        if points is not None:
            batch_size = points[1].shape[0]
        elif mp is not None:
            batch_size = mp.shape[0]
        f_mp = self.embed_mask(batch_size if mp is None else mp)
        if points is None:
            f_pp = self.no_mask.new_zeros(batch_size, 0, self.cfg.prompt_dim)
        else:
            f_pp = self.embed_points(*points)
        return f_mp, f_pp


# -- mask decoder ---------------------------------------------------------------

class Attention(nn.Module):
    """Multi-head attention with an optional internal down-projection."""

    def __init__(self, dim, heads, downsample=1):
        super().__init__()
        inner = dim // downsample
        self.heads = heads
        self.q_proj = nn.Linear(dim, inner)
        self.k_proj = nn.Linear(dim, inner)
        self.v_proj = nn.Linear(dim, inner)
        self.out_proj = nn.Linear(inner, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, q, k, v):
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)
        out = (attn @ v).transpose(1, 2)
        return self.out_proj(out.reshape(out.shape[0], out.shape[1], -1))


class TwoWayBlock(nn.Module):
    def __init__(self, dim, heads, mlp_dim, skip_first_pe=False):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_token_to_image = Attention(dim, heads, downsample=2)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP((dim, mlp_dim, dim))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_image_to_token = Attention(dim, heads, downsample=2)
        self.norm4 = nn.LayerNorm(dim)
        self.skip_first_pe = skip_first_pe

    def forward(self, queries, keys, query_pe, key_pe):
        if self.skip_first_pe:
            queries = self.self_attn(queries, queries, queries)
        else:
            q = queries + query_pe
            queries = queries + self.self_attn(q, q, queries)
        queries = self.norm1(queries)
        queries = self.norm2(queries + self.cross_token_to_image(queries + query_pe, keys + key_pe, keys))
        queries = self.norm3(queries + self.mlp(queries))
        keys = self.norm4(keys + self.cross_image_to_token(keys + key_pe, queries + query_pe, queries))
        return queries, keys


class MaskDecoder(nn.Module):
    """Two-way transformer over [output token; point tokens] and the fused image grid.

    Logits are the inner product between each upscaled pixel embedding and
    the MLP-projected output token, resized bilinearly to the input size.
    """

    def __init__(self, cfg: SamConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.prompt_dim
        self.output_token = nn.Parameter(torch.randn(1, c) * 0.02)
        self.layers = nn.ModuleList(
            TwoWayBlock(c, cfg.decoder_heads, cfg.decoder_mlp_dim, skip_first_pe=(i == 0))
            for i in range(cfg.decoder_depth)
        )
        self.final_attn = Attention(c, cfg.decoder_heads, downsample=2)
        self.final_norm = nn.LayerNorm(c)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(c, c // 4, 2, stride=2),
            LayerNorm2d(c // 4),
            nn.GELU(),
            nn.ConvTranspose2d(c // 4, c // 8, 2, stride=2),
            nn.GELU(),
        )
        self.hypernet = MLP((c, c, c, c // 8))

    def forward(self, fused, f_pp, dense_pe):
        b, c, h, w = fused.shape
        tokens = torch.cat([self.output_token.expand(b, -1, -1), f_pp], dim=1)
        keys = fused.flatten(2).transpose(1, 2)
        key_pe = dense_pe.flatten(2).transpose(1, 2).expand(b, -1, -1)
        queries = tokens
        for layer in self.layers:
            queries, keys = layer(queries, keys, tokens, key_pe)
        queries = self.final_norm(queries + self.final_attn(queries + tokens, keys + key_pe, keys))
        pixels = self.upscale(keys.transpose(1, 2).reshape(b, c, h, w))
        weights = self.hypernet(queries[:, 0])
        logits = torch.einsum("bc,bchw->bhw", weights, pixels)[:, None]
        return F.interpolate(logits, size=self.cfg.input_size, mode="bilinear", align_corners=False)


class SamBlock(nn.Module):
    """Image encoder, prompt encoder and the region/boundary decoders.

    Both decoders start from identical weights and diverge only through
    separate fine-tuning.
    """

    def __init__(self, cfg: SamConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or SamConfig()
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.decoder_region = MaskDecoder(cfg)
        self.decoder_boundary = copy.deepcopy(self.decoder_region)
        self.image_encoder.requires_grad_(False)

    def decoder(self, head):
        if head == "region":
            return self.decoder_region
        if head == "boundary":
            return self.decoder_boundary
        raise InvalidArgument(f"unknown decoder head {head!r}; expected one of {HEADS}")

    def encode_image(self, x):
        return self.image_encoder(x)

    def encode_prompts(self, mp=None, points=None, batch_size=1):
        return self.prompt_encoder(mp, points, batch_size)

    def decode(self, f_i, f_mp, f_pp, head):
        decoder = self.decoder(head)
        if f_i.shape != f_mp.shape:
            raise ShapeError(f"image embedding {tuple(f_i.shape)} and mask embedding {tuple(f_mp.shape)} differ")
        return decoder(f_i + f_mp, f_pp, self.prompt_encoder.dense_pe(f_i.dtype))

    def forward(self, x, mp=None, points=None, head="region"):
        f_i = self.encode_image(x)
        f_mp, f_pp = self.encode_prompts(mp, points, batch_size=x.shape[0])
        return self.decode(f_i, f_mp, f_pp, head)


def build_sam(cfg, seed=0):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return SamBlock(cfg)


def points_to_tensors(pts):
    """A single PointPromptSet to batched ``(coords, labels)`` tensors."""
    return torch.from_numpy(np.asarray(pts.coords))[None], torch.from_numpy(np.asarray(pts.labels))[None]


# functional entry points mirroring the module methods

def encode_image(image, sam: SamBlock):
    return sam.encode_image(image)


def encode_prompts(mp, pp, sam: SamBlock):
    points = points_to_tensors(pp) if pp is not None and not isinstance(pp, tuple) else pp
    return sam.encode_prompts(mp, points)


def decode_mask(f_i, f_mp, f_pp, head, sam: SamBlock):
    return sam.decode(f_i, f_mp, f_pp, head)
