"""Toy-scale stand-ins for the frozen/fine-tuned foundation components.

Image encoder, hashed-vocabulary text encoder, implicit-text MLP projector,
text-conditioned UNet feature extractor, query-based mask generator, and the
categorization head.  All modules are ordinary ``nn.Module``s; freezing is a
matter of ``requires_grad`` flags managed by the branch builder.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidArgumentError, InvalidInputError, NumericError

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


def torch_dtype(name: str) -> torch.dtype:
    try:
        return _DTYPES[name]
    except KeyError:
        raise ConfigError(f"unsupported dtype {name!r}; expected one of {sorted(_DTYPES)}") from None


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of every toy component.  Defaults are the desk-scale sizes."""

    d_v: int = 64            # image embedding width
    d_t: int = 32            # text embedding width
    d_f: int = 64            # UNet output feature channels
    k_tokens: int = 4        # implicit text tokens per image
    queries: int = 8         # mask queries
    decoder_layers: int = 3  # transformer decoder depth
    d_q: int = 64            # query width
    enc_channels: tuple = (16, 32)
    unet_channels: tuple = (24, 32, 48)
    projector_hidden: int = 64
    pixel_channels: int = 24
    mask_channels: int = 16
    dn_channels: int = 8
    vocab_size: int = 4096
    normalize_tokens: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("d_v", "d_t", "d_f", "k_tokens", "queries", "decoder_layers", "d_q"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.d_q % 4 != 0:
            raise ConfigError("model.d_q must be divisible by 4 (2D sine positions)")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch_dtype(self.dtype)


# --------------------------------------------------------------------------
# Deterministic initialization.  Parameters are drawn in sorted-name order
# from an explicit generator so both branches can be built bit-identically
# from one seed.
# --------------------------------------------------------------------------


def _uniform_(p: torch.Tensor, bound: float, gen: torch.Generator) -> None:
    p.copy_(torch.empty(p.shape, dtype=p.dtype).uniform_(-bound, bound, generator=gen))


def seeded_init_(module: nn.Module, gen: torch.Generator) -> None:
    """Reinitialize every parameter from the generator, in sorted-name order.

    Conv/linear layers get the usual fan-in uniform init (weights and biases),
    layer norms get ones/zeros, embeddings unit normals.  Loose parameters are
    dispatched by name: query banks like weights, temperature to log(10),
    no-object columns to zero.
    """
    covered = set()
    with torch.no_grad():
        for mod_name, m in sorted(module.named_modules(), key=lambda kv: kv[0]):
            prefix = f"{mod_name}." if mod_name else ""
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                bound = 1.0 / math.sqrt(m.weight.shape[1:].numel())
                _uniform_(m.weight, bound, gen)
                covered.add(f"{prefix}weight")
                if m.bias is not None:
                    _uniform_(m.bias, bound, gen)
                    covered.add(f"{prefix}bias")
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
                covered.update((f"{prefix}weight", f"{prefix}bias"))
            elif isinstance(m, nn.Embedding):
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype))
                covered.add(f"{prefix}weight")
        for name, p in sorted(module.named_parameters()):
            if name in covered:
                continue
            if name.endswith("log_temperature"):
                p.fill_(math.log(10.0))
            elif name.endswith("no_object"):
                p.zero_()
            elif p.ndim >= 2:
                _uniform_(p, 1.0 / math.sqrt(p.shape[-1]), gen)
            else:
                p.zero_()


def sine_position_embedding(h: int, w: int, dim: int, dtype: torch.dtype) -> torch.Tensor:
    """Fixed 2D sine/cosine position codes, (h*w, dim).  dim must be divisible by 4."""
    quarter = dim // 4
    freq = torch.exp(-math.log(100.0) * torch.arange(quarter, dtype=dtype) / max(quarter, 1))
    ys = torch.arange(h, dtype=dtype).unsqueeze(1) * freq  # h x quarter
    xs = torch.arange(w, dtype=dtype).unsqueeze(1) * freq
    ybands = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)  # h x dim/2
    xbands = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)
    pos = torch.cat([
        ybands.unsqueeze(1).expand(h, w, dim // 2),
        xbands.unsqueeze(0).expand(h, w, dim // 2),
    ], dim=2)
    return pos.reshape(h * w, dim)


# --------------------------------------------------------------------------
# Components
# --------------------------------------------------------------------------


class ImageEncoder(nn.Module):
    """Small conv stack producing a global d_v embedding plus a spatial map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2 = cfg.enc_channels
        self.conv1 = nn.Conv2d(1, c1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.proj = nn.Conv2d(c2, cfg.d_v, 1)
        self.to(cfg.torch_dtype)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if images.ndim != 4 or images.shape[1] != 1:
            raise InvalidArgumentError(f"expected B x 1 x H x W images, got {tuple(images.shape)}")
        if not torch.isfinite(images).all():
            raise InvalidInputError("image contains non-finite pixels")
        h = torch.relu(self.conv1(images))
        h = torch.relu(self.conv2(h))
        fmap = self.proj(h)
        return fmap.mean(dim=(2, 3)), fmap

    def check_nondegenerate(self) -> None:
        """Probe that a one-pixel change moves the embedding (cheap init-time check)."""
        dtype = next(self.parameters()).dtype
        ramp = torch.linspace(0.1, 0.9, 64, dtype=dtype).reshape(1, 1, 8, 8)
        with torch.no_grad():
            base, _ = self.forward(ramp)
            for y, x in ((3, 4), (1, 1), (6, 2)):
                probe = ramp.clone()
                probe[0, 0, y, x] += 0.5
                moved, _ = self.forward(probe)
                if not torch.equal(base, moved):
                    return
        raise NumericError("one-pixel probes left the embedding unchanged",
                           component="image encoder")


class TextEncoder(nn.Module):
    """Frozen hashed-vocabulary text encoder: mean-pooled token embeddings, unit norm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.vocab_size = cfg.vocab_size
        self.table = nn.Embedding(cfg.vocab_size, cfg.d_t)
        self.to(cfg.torch_dtype)
        for p in self.parameters():
            p.requires_grad_(False)

    def token_ids(self, text: str) -> list[int]:
        tokens = text.lower().split()
        if not tokens:
            raise InvalidArgumentError(f"prompt {text!r} has no tokens")
        return [zlib.crc32(tok.encode("utf-8")) % self.vocab_size for tok in tokens]

    def encode(self, prompts: list[str]) -> torch.Tensor:
        """Encode prompts to unit-norm rows, (len(prompts), d_t)."""
        rows = []
        with torch.no_grad():
            for prompt in prompts:
                ids = torch.tensor(self.token_ids(prompt), dtype=torch.long)
                rows.append(self.table(ids).mean(dim=0))
        out = torch.stack(rows)
        return out / out.norm(dim=1, keepdim=True).clamp_min(1e-12)


def embed_classes(encoder: TextEncoder, vocabulary: list[str], templates: list[str]) -> torch.Tensor:
    """Per class, average the embeddings of all filled templates, then renormalize.

    Returns a C x d_t matrix with unit-norm rows.
    """
    if not vocabulary:
        raise InvalidArgumentError("class vocabulary is empty")
    if not templates:
        raise ConfigError("template list is empty")
    for tpl in templates:
        if "{}" not in tpl:
            raise ConfigError(f"prompt template {tpl!r} has no {{}} placeholder")
    rows = []
    for name in vocabulary:
        filled = encoder.encode([tpl.format(name) for tpl in templates])
        mean = filled.mean(dim=0)
        rows.append(mean / mean.norm().clamp_min(1e-12))
    return torch.stack(rows)


class ImplicitTextProjector(nn.Module):
    """Two affine layers mapping the image embedding to K implicit text tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.k_tokens = cfg.k_tokens
        self.d_t = cfg.d_t
        self.normalize = cfg.normalize_tokens
        self.fc1 = nn.Linear(cfg.d_v, cfg.projector_hidden)
        self.fc2 = nn.Linear(cfg.projector_hidden, cfg.k_tokens * cfg.d_t)
        self.to(cfg.torch_dtype)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        if embedding.ndim != 2 or embedding.shape[1] != self.fc1.in_features:
            raise InvalidArgumentError(
                f"expected B x {self.fc1.in_features} embeddings, got {tuple(embedding.shape)}")
        if not torch.isfinite(embedding).all():
            raise InvalidInputError("embedding contains non-finite values")
        tokens = self.fc2(torch.relu(self.fc1(embedding)))
        tokens = tokens.reshape(embedding.shape[0], self.k_tokens, self.d_t)
        if self.normalize:
            tokens = tokens / tokens.norm(dim=2, keepdim=True).clamp_min(1e-12)
        return tokens


class TokenCrossAttention(nn.Module):
    """Single-head cross-attention from a spatial map to the K text tokens."""

    def __init__(self, channels: int, d_t: int):
        super().__init__()
        self.q_proj = nn.Conv2d(channels, channels, 1)
        self.k_proj = nn.Linear(d_t, channels)
        self.v_proj = nn.Linear(d_t, channels)
        self.out_proj = nn.Conv2d(channels, channels, 1)
        self.scale = 1.0 / math.sqrt(channels)

    def forward(self, x: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        # contiguous: see MaskGenerator.forward on layout-dependent kernels
        q = self.q_proj(x).reshape(b, c, h * w).transpose(1, 2).contiguous()  # B, hw, c
        k = self.k_proj(tokens)                                  # B, K, c
        v = self.v_proj(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=2)
        out = (attn @ v).transpose(1, 2).reshape(b, c, h, w)
        return x + self.out_proj(out)


class FeatureExtractor(nn.Module):
    """Token-conditioned toy UNet: 2 down / 2 up stages at quarter-resolution latent.

    The stem patchifies the image by 4, so the output map is
    d_f x ceil(H/4) x ceil(W/4).  One cross-attention block per stage.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c0, c1, c2 = cfg.unet_channels
        self.d_t = cfg.d_t
        self.k_tokens = cfg.k_tokens
        self.stem = nn.Conv2d(1, c0, 4, stride=4)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.attn1 = TokenCrossAttention(c1, cfg.d_t)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.attn2 = TokenCrossAttention(c2, cfg.d_t)
        self.up1 = nn.Conv2d(c2 + c1, c1, 3, padding=1)
        self.attn3 = TokenCrossAttention(c1, cfg.d_t)
        self.up2 = nn.Conv2d(c1 + c0, c0, 3, padding=1)
        self.attn4 = TokenCrossAttention(c0, cfg.d_t)
        self.out = nn.Conv2d(c0, cfg.d_f, 1)
        self.to(cfg.torch_dtype)

    def forward(self, images: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        if images.ndim != 4 or images.shape[1] != 1:
            raise InvalidArgumentError(f"expected B x 1 x H x W images, got {tuple(images.shape)}")
        if tokens.ndim != 3 or tokens.shape[1:] != (self.k_tokens, self.d_t):
            raise InvalidArgumentError(
                f"expected B x {self.k_tokens} x {self.d_t} tokens, got {tuple(tokens.shape)}")
        if images.shape[0] != tokens.shape[0]:
            raise InvalidArgumentError("image and token batch sizes differ")
        pad_h = (-images.shape[2]) % 4
        pad_w = (-images.shape[3]) % 4
        if pad_h or pad_w:
            images = F.pad(images, (0, pad_w, 0, pad_h))
        s = torch.relu(self.stem(images))
        d1 = self.attn1(torch.relu(self.down1(s)), tokens)
        d2 = self.attn2(torch.relu(self.down2(d1)), tokens)
        u1 = F.interpolate(d2, size=d1.shape[2:], mode="bilinear", align_corners=False)
        u1 = self.attn3(torch.relu(self.up1(torch.cat([u1, d1], dim=1))), tokens)
        u2 = F.interpolate(u1, size=s.shape[2:], mode="bilinear", align_corners=False)
        u2 = self.attn4(torch.relu(self.up2(torch.cat([u2, s], dim=1))), tokens)
        return self.out(u2)


@dataclass
class MaskSet:
    """Q mask logit maps, Q mask embeddings, and the per-layer decoder outputs."""

    mask_logits: torch.Tensor          # B x Q x H x W
    mask_embeddings: torch.Tensor      # B x Q x d_t
    decoder_trace: list                # L tensors, each B x Q x d_q

    def validate(self, queries: int, layers: int, d_t: int) -> "MaskSet":
        if self.mask_logits.shape[1] != queries or self.mask_embeddings.shape[1] != queries:
            raise InvalidArgumentError("mask set query count mismatch")
        if self.mask_embeddings.shape[2] != d_t:
            raise InvalidArgumentError("mask embedding width mismatch")
        if len(self.decoder_trace) != layers:
            raise InvalidArgumentError("decoder trace length mismatch")
        return self

    def detach(self) -> "MaskSet":
        return MaskSet(self.mask_logits.detach(), self.mask_embeddings.detach(),
                       [d.detach() for d in self.decoder_trace])

    def sample(self, i: int) -> "MaskSet":
        return MaskSet(self.mask_logits[i], self.mask_embeddings[i],
                       [d[i] for d in self.decoder_trace])


class QueryDecoderLayer(nn.Module):
    """Cross-attention to memory, self-attention among queries, and an FFN."""

    def __init__(self, d_q: int):
        super().__init__()
        self.cross_q = nn.Linear(d_q, d_q)
        self.cross_k = nn.Linear(d_q, d_q)
        self.cross_v = nn.Linear(d_q, d_q)
        self.self_q = nn.Linear(d_q, d_q)
        self.self_k = nn.Linear(d_q, d_q)
        self.self_v = nn.Linear(d_q, d_q)
        self.ffn1 = nn.Linear(d_q, 2 * d_q)
        self.ffn2 = nn.Linear(2 * d_q, d_q)
        self.norm1 = nn.LayerNorm(d_q)
        self.norm2 = nn.LayerNorm(d_q)
        self.norm3 = nn.LayerNorm(d_q)
        self.scale = 1.0 / math.sqrt(d_q)

    @staticmethod
    def _attend(q, k, v, scale):
        return torch.softmax(q @ k.transpose(1, 2) * scale, dim=2) @ v

    def forward(self, queries: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        attn = self._attend(self.cross_q(queries), self.cross_k(memory), self.cross_v(memory), self.scale)
        queries = self.norm1(queries + attn)
        attn = self._attend(self.self_q(queries), self.self_k(queries), self.self_v(queries), self.scale)
        queries = self.norm2(queries + attn)
        return self.norm3(queries + self.ffn2(torch.relu(self.ffn1(queries))))


class MaskGenerator(nn.Module):
    """Query-based mask head: pixel decoder, Q queries, L decoder layers."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.queries = nn.Parameter(torch.zeros(cfg.queries, cfg.d_q))
        self.in_proj = nn.Conv2d(cfg.d_f, cfg.d_q, 1)
        self.layers = nn.ModuleList(QueryDecoderLayer(cfg.d_q) for _ in range(cfg.decoder_layers))
        pc = cfg.pixel_channels
        self.pix1 = nn.Conv2d(cfg.d_f, pc, 3, padding=1)
        self.pix2 = nn.Conv2d(pc, pc, 3, padding=1)
        self.pix3 = nn.Conv2d(pc, cfg.mask_channels, 3, padding=1)
        self.emb_head = nn.Linear(cfg.d_q, cfg.d_t)
        self.mask_head = nn.Linear(cfg.d_q, cfg.mask_channels)
        self.to(cfg.torch_dtype)

    def forward(self, features: torch.Tensor, out_size: tuple[int, int] | None = None) -> MaskSet:
        if features.ndim != 4 or features.shape[1] != self.cfg.d_f:
            raise InvalidArgumentError(
                f"expected B x {self.cfg.d_f} x h x w features, got {tuple(features.shape)}")
        b, _, h, w = features.shape
        if out_size is None:
            out_size = (4 * h, 4 * w)

        # Keep every tensor that feeds a Linear contiguous: on non-standard
        # layouts matmul can pick a different kernel path for gradient-tracked
        # tensors, breaking bit-identical teacher/student forwards.
        mem = self.in_proj(features).reshape(b, self.cfg.d_q, h * w).transpose(1, 2).contiguous()
        mem = mem + sine_position_embedding(h, w, self.cfg.d_q, mem.dtype)
        q = self.queries.unsqueeze(0).repeat(b, 1, 1)
        trace = []
        for layer in self.layers:
            q = layer(q, mem)
            trace.append(q)

        pix = torch.relu(self.pix1(features))
        pix = F.interpolate(pix, scale_factor=2, mode="bilinear", align_corners=False)
        pix = torch.relu(self.pix2(pix))
        pix = F.interpolate(pix, size=out_size, mode="bilinear", align_corners=False)
        pix = self.pix3(pix)

        # dot-product scaling keeps the logit range tame as widths grow
        logits = torch.einsum("bqm,bmhw->bqhw", self.mask_head(q), pix) / math.sqrt(
            self.cfg.mask_channels)
        embeddings = self.emb_head(q)
        return MaskSet(logits, embeddings, trace).validate(
            self.cfg.queries, self.cfg.decoder_layers, self.cfg.d_t)


class CategoryHead(nn.Module):
    """Dot-product categorization with a learnable temperature and no-object column.

    The temperature is stored as its logarithm, so it stays positive after any
    gradient update.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.log_temperature = nn.Parameter(torch.tensor(math.log(10.0)))
        self.no_object = nn.Parameter(torch.zeros(cfg.d_t))
        self.to(cfg.torch_dtype)

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def class_logits(self, mask_embeddings: torch.Tensor, class_matrix: torch.Tensor) -> torch.Tensor:
        """Logits over the class vocabulary plus a final no-object column."""
        if mask_embeddings.shape[-1] != class_matrix.shape[-1]:
            raise InvalidArgumentError(
                f"embedding width {mask_embeddings.shape[-1]} != class width {class_matrix.shape[-1]}")
        cols = torch.cat([class_matrix, self.no_object.unsqueeze(0)], dim=0)
        return self.temperature * (mask_embeddings @ cols.transpose(0, 1))


def load_class_names(path) -> list[str]:
    names = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    if not names:
        raise ConfigError(f"class file {path} is empty")
    return names


def load_templates(path) -> list[str]:
    templates = [line.rstrip("\n") for line in Path(path).read_text().splitlines() if line.strip()]
    if not templates:
        raise ConfigError(f"prompt template file {path} is empty")
    for tpl in templates:
        if "{}" not in tpl:
            raise ConfigError(f"prompt template {tpl!r} has no {{}} placeholder")
    return templates


DEFAULT_TEMPLATES = ["a photo of a {}"]
