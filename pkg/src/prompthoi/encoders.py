"""Feature producers: scene embedders, conditioned pyramid, adaptors, fusion and backbone.

The scene embedder stands in for a CLIP-style dual encoder; the conditioned
pyramid stands in for a text-conditioned diffusion UNet read out in one pass.
Both are frozen once built.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .text import tokenize

EMBED_INPUT = 32  # side of the square raster every embedder sees


class ProviderNotReady(RuntimeError):
    pass


def to_float_images(images) -> torch.Tensor:
    """uint8 HWC raster(s) or float (B, 3, H, W) in [0, 1] -> float (B, 3, H, W)."""
    if isinstance(images, torch.Tensor):
        x = images
        if x.dim() == 3:
            x = x.unsqueeze(0)
        return x
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arr = np.stack([np.asarray(im) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).float() / 255.0


def resize_for_embedding(x: torch.Tensor) -> torch.Tensor:
    if x.shape[-2:] == (EMBED_INPUT, EMBED_INPUT):
        return x
    return F.interpolate(x, size=(EMBED_INPUT, EMBED_INPUT), mode="bilinear", align_corners=False)


def _hash_bucket(token: str, n: int) -> int:
    return zlib.crc32(token.encode()) % n


class TextVocabulary:
    """Known words get their own row; anything else falls into one of ``n_hash`` shared buckets."""

    def __init__(self, words, n_hash: int = 64):
        self.words = sorted(set(words))
        self.index = {w: i for i, w in enumerate(self.words)}
        self.n_hash = n_hash

    def __len__(self) -> int:
        return len(self.words) + self.n_hash

    def encode(self, sentence: str) -> list[int]:
        ids = []
        for tok in tokenize(sentence):
            ids.append(self.index[tok] if tok in self.index else len(self.words) + _hash_bucket(tok, self.n_hash))
        return ids or [len(self.words) + _hash_bucket("", self.n_hash)]

    def batch(self, sentences) -> tuple[torch.Tensor, torch.Tensor]:
        flat, offsets = [], []
        for s in sentences:
            offsets.append(len(flat))
            flat.extend(self.encode(s))
        return torch.tensor(flat, dtype=torch.long), torch.tensor(offsets, dtype=torch.long)


class SceneEmbedder(nn.Module):
    """Interface shared by embedding providers: unit vectors for images and sentences."""

    name = "base"
    dim: int

    def encode_image(self, images) -> torch.Tensor:
        raise NotImplementedError

    def encode_text(self, sentences) -> torch.Tensor:
        raise NotImplementedError

    def spec(self) -> dict:
        raise NotImplementedError


class ToyDualEncoder(SceneEmbedder):
    """Bag-of-words text tower and a small CNN image tower, trained contrastively on the toy corpus."""

    name = "toy_dual"

    def __init__(self, vocabulary: TextVocabulary, dim: int = 64, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.vocabulary = vocabulary
        self.dim = dim
        self.seed = seed
        self.token_embed = nn.EmbeddingBag(len(vocabulary), dim, mode="mean")
        self.text_proj = nn.Linear(dim, dim)
        self.image_net = nn.Sequential(
            nn.Conv2d(3, 24, 3, 2, 1), nn.GELU(),
            nn.Conv2d(24, 48, 3, 2, 1), nn.GELU(),
            nn.Conv2d(48, 64, 3, 2, 1), nn.GELU(),
        )
        self.image_proj = nn.Linear(128, dim)
        self.ready = False

    def image_features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.image_net(resize_for_embedding(x) * 2 - 1)
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return F.normalize(self.image_proj(pooled), dim=-1)

    def text_features(self, sentences) -> torch.Tensor:
        dev = self.text_proj.weight.device
        ids, offsets = self.vocabulary.batch(sentences)
        return F.normalize(self.text_proj(self.token_embed(ids.to(dev), offsets.to(dev))), dim=-1)

    def _check(self):
        if not self.ready:
            raise ProviderNotReady("toy_dual embedder has not been pre-trained or loaded")

    def encode_image(self, images) -> torch.Tensor:
        self._check()
        return self.image_features(to_float_images(images).to(self.image_proj.weight.dtype))

    def encode_text(self, sentences) -> torch.Tensor:
        self._check()
        return self.text_features(list(sentences))

    def spec(self) -> dict:
        return {"name": self.name, "dim": self.dim, "seed": self.seed, "vocabulary": self.vocabulary.words,
                "n_hash": self.vocabulary.n_hash}


class RandomProjectionEmbedder(SceneEmbedder):
    """Frozen seeded random features; needs no training."""

    name = "random_projection"

    def __init__(self, dim: int = 64, seed: int = 0, n_hash: int = 4096):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.seed = seed
        self.n_hash = n_hash
        self.register_buffer("conv", torch.randn(32, 3, 5, 5, generator=g) / math.sqrt(75))
        self.register_buffer("proj", torch.randn(32 * 16, dim, generator=g) / math.sqrt(32 * 16))
        self.register_buffer("words", torch.randn(n_hash, dim, generator=g))

    def encode_image(self, images) -> torch.Tensor:
        x = resize_for_embedding(to_float_images(images).to(self.proj.dtype)) * 2 - 1
        h = torch.tanh(F.conv2d(x, self.conv, stride=2, padding=2))
        h = F.adaptive_avg_pool2d(h, 4).flatten(1)
        return F.normalize(h @ self.proj, dim=-1)

    def encode_text(self, sentences) -> torch.Tensor:
        rows = []
        for s in sentences:
            ids = [_hash_bucket(t, self.n_hash) for t in tokenize(s)] or [0]
            rows.append(self.words[ids].mean(0))
        return F.normalize(torch.stack(rows), dim=-1)

    def spec(self) -> dict:
        return {"name": self.name, "dim": self.dim, "seed": self.seed, "n_hash": self.n_hash}


def build_provider(spec: dict, vocabulary_words=None) -> SceneEmbedder:
    """Provider registry keyed by name."""
    name = spec["name"]
    if name == "toy_dual":
        words = spec.get("vocabulary", vocabulary_words)
        if words is None:
            raise ValueError("toy_dual needs a vocabulary")
        return ToyDualEncoder(TextVocabulary(words, spec.get("n_hash", 64)), spec.get("dim", 64), spec.get("seed", 0))
    if name == "random_projection":
        return RandomProjectionEmbedder(spec.get("dim", 64), spec.get("seed", 0), spec.get("n_hash", 4096))
    raise KeyError(f"unknown scene embedder '{name}' (expected toy_dual or random_projection)")


def scene_embed(provider: SceneEmbedder, images) -> torch.Tensor:
    """Global unit-norm scene embedding per image."""
    with torch.no_grad():
        return provider.encode_image(images)


class AdaptorAlpha(nn.Module):
    """Maps an image-side scene embedding into the text space that conditions the pyramid."""

    def __init__(self, dim: int, hidden: int = 128, zero_init: bool = False):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        if zero_init:
            nn.init.zeros_(self.net[2].weight)

    def forward(self, scene: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(scene), dim=-1)


class AdaptorBeta(nn.Module):
    """Scene embedding -> offset added to every interaction query."""

    def __init__(self, dim: int, channels: int, hidden: int = 128):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, channels))
        nn.init.zeros_(self.net[2].weight)
        nn.init.zeros_(self.net[2].bias)

    def forward(self, scene: torch.Tensor) -> torch.Tensor:
        return self.net(scene)


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance schedule; ``alpha_bar(0) = 1`` so t = 0 leaves the input untouched."""

    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.steps)

    def alpha_bar(self, t: int) -> float:
        if not 0 <= t <= self.steps:
            raise ValueError(f"time step {t} outside [0, {self.steps}]")
        return float(np.prod(1.0 - self.betas()[:t]))

    def noise_variance(self, t: int) -> float:
        return 1.0 - self.alpha_bar(t)


class ConditionedExtractor(nn.Module):
    """Frozen seeded conv pyramid, each scale modulated by scale-and-shift from the condition."""

    def __init__(self, cond_dim: int, widths=(32, 64, 64), seed: int = 1234, schedule=NoiseSchedule()):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.seed = seed
        self.widths = tuple(widths)
        self.schedule = schedule
        convs, films = [], []
        c_in = 3
        for w in widths:
            conv = nn.Conv2d(c_in, w, 3, 2, 1)
            film = nn.Linear(cond_dim, 2 * w)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * math.sqrt(2.0 / (c_in * 9)))
                conv.bias.zero_()
                film.weight.copy_(torch.randn(film.weight.shape, generator=g) / math.sqrt(cond_dim))
                film.bias.zero_()
            convs.append(conv)
            films.append(film)
            c_in = w
        self.convs = nn.ModuleList(convs)
        self.films = nn.ModuleList(films)
        for p in self.parameters():
            p.requires_grad_(False)

    def noise_field(self, shape, dtype) -> torch.Tensor:
        g = torch.Generator().manual_seed(self.seed + 1)
        return torch.randn(shape, generator=g, dtype=torch.float64).to(dtype)

    def forward(self, images: torch.Tensor, condition: torch.Tensor, t: int = 0) -> list[torch.Tensor]:
        a_bar = self.schedule.alpha_bar(t)
        x = images * 2 - 1
        if t > 0:
            x = math.sqrt(a_bar) * x + math.sqrt(1 - a_bar) * self.noise_field(x.shape[1:], x.dtype)
        pyramid = []
        for conv, film in zip(self.convs, self.films):
            gamma, shift = film(condition).chunk(2, dim=-1)
            x = F.gelu(conv(x) * (1 + gamma[:, :, None, None]) + shift[:, :, None, None])
            pyramid.append(x)
        return pyramid


def extract_conditioned_features(extractor: ConditionedExtractor, images, condition, t: int = 0):
    return extractor(to_float_images(images), condition, t)


class GatedFusion(nn.Module):
    """F' = F + tanh(gate) * sum_s proj_s(resample(F_sd[s])), gate starts at 0."""

    def __init__(self, channels: int, pyramid_widths):
        super().__init__()
        self.channels = channels
        self.proj = nn.ModuleList(nn.Conv2d(w, channels, 1) for w in pyramid_widths)
        self.gate = nn.Parameter(torch.zeros(channels))

    def forward(self, features: torch.Tensor, pyramid: list[torch.Tensor]) -> torch.Tensor:
        if len(pyramid) != len(self.proj):
            raise ValueError(f"expected {len(self.proj)} pyramid scales, got {len(pyramid)}")
        size = features.shape[-2:]
        total = 0
        for proj, level in zip(self.proj, pyramid):
            if level.shape[1] != proj.in_channels:
                raise ValueError(f"pyramid level has {level.shape[1]} channels, projection expects {proj.in_channels}")
            if level.shape[-2:] != size:
                level = F.interpolate(level, size=size, mode="bilinear", align_corners=False)
            total = total + proj(level)
        return features + torch.tanh(self.gate)[None, :, None, None] * total


def gated_fusion(fusion: GatedFusion, features, pyramid):
    return fusion(features, pyramid)


def sine_position_encoding(channels: int, height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """(channels, H, W) 2-D sinusoidal encoding; half the channels for y, half for x."""
    if channels % 4:
        raise ValueError("channels must be divisible by 4")
    quarter = channels // 4
    freq = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    ys = (torch.arange(height, dtype=torch.float64) + 0.5) / height * 2 * math.pi
    xs = (torch.arange(width, dtype=torch.float64) + 0.5) / width * 2 * math.pi
    py = ys[:, None] * freq[None]  # (H, q)
    px = xs[:, None] * freq[None]
    enc_y = torch.cat([py.sin(), py.cos()], -1)[:, None, :].expand(height, width, 2 * quarter)
    enc_x = torch.cat([px.sin(), px.cos()], -1)[None, :, :].expand(height, width, 2 * quarter)
    return torch.cat([enc_y, enc_x], -1).permute(2, 0, 1).to(dtype)


class Backbone(nn.Module):
    """Stride-4 conv stem producing the vanilla feature map F."""

    def __init__(self, channels: int, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), nn.GELU(),
            nn.Conv2d(width, channels, 3, 2, 1), nn.GELU(),
            nn.Conv2d(channels, channels, 3, 1, 1),
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net(images * 2 - 1)


class FeatureEncoder(nn.Module):
    """Backbone followed by a transformer encoder over the flattened map."""

    def __init__(self, channels: int, layers: int = 1, heads: int = 4, backbone_width: int = 32):
        super().__init__()
        self.backbone = Backbone(channels, backbone_width)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(channels, heads, 2 * channels, dropout=0.0, activation="gelu", batch_first=True)
            for _ in range(layers)
        )

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        f = self.backbone(images)
        b, c, h, w = f.shape
        pos = sine_position_encoding(c, h, w, f.dtype).to(f.device)
        tokens = (f + pos).flatten(2).transpose(1, 2)
        for layer in self.layers:
            tokens = layer(tokens)
        return tokens.transpose(1, 2).reshape(b, c, h, w)


@dataclass(frozen=True)
class Census:
    trainable: int
    frozen: int
    trainable_modules: tuple[str, ...]
    frozen_modules: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"trainable": self.trainable, "frozen": self.frozen,
                "trainable_modules": list(self.trainable_modules), "frozen_modules": list(self.frozen_modules)}


def parameter_census(model: nn.Module) -> Census:
    """Trainable vs frozen scalar counts, grouped by top-level submodule."""
    trainable = frozen = 0
    t_mods, f_mods = set(), set()
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        if p.requires_grad:
            trainable += p.numel()
            t_mods.add(top)
        else:
            frozen += p.numel()
            f_mods.add(top)
    for name, b in model.named_buffers():
        frozen += b.numel()
        f_mods.add(name.split(".")[0])
    return Census(trainable, frozen, tuple(sorted(t_mods)), tuple(sorted(f_mods)))
