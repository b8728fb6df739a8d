"""Frozen spatial / text encoders, a synthetic test-double family and the token cache.

The spatial encoder is split where spatial prompts are injected:
``input_layer`` turns frames into ``L x D_in`` tokens (class token first) and
``attention_stack`` maps any token sequence to ``D_m``-wide outputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DEFAULT_TEMPLATE, TextClassBank, VideoSample, module_digest


class EncoderInputError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """Cache was written by a different encoder profile or is corrupt."""


@dataclass(frozen=True)
class EncoderProfile:
    name: str
    grid: tuple  # patch rows, patch cols
    patch_size: int
    channels: int
    D_in: int
    D_m: int

    @property
    def L(self) -> int:
        return self.grid[0] * self.grid[1] + 1

    @property
    def frame_shape(self) -> tuple:
        return (self.grid[0] * self.patch_size, self.grid[1] * self.patch_size, self.channels)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


VIT_B32 = EncoderProfile("vit-b/32", (7, 7), 32, 3, 768, 512)


def synthetic_profile(L: int, D_in: int, D_m: int, patch_size: int = 4, channels: int = 3):
    """Single-row patch grid with ``L - 1`` patches, so any ``L >= 2`` works."""
    if L < 2:
        raise ValueError("need at least one patch besides the class token")
    patch_size = max(patch_size, math.ceil(math.sqrt(D_in / channels)))
    return EncoderProfile(f"synthetic-L{L}-{D_in}-{D_m}", (1, L - 1), patch_size, channels, D_in, D_m)


class FrozenSpatialEncoder(nn.Module):
    """Base class. Subclasses implement ``input_layer`` and ``attention_stack``."""

    profile: EncoderProfile

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        for b in self.buffers():
            b.requires_grad_(False)
        self.eval()
        return self

    def input_layer(self, frames: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def attention_stack(self, tokens: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def class_feature_from_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.attention_stack(tokens)[..., 0, :]

    def class_feature(self, frames: torch.Tensor) -> torch.Tensor:
        return self.class_feature_from_tokens(self.input_layer(frames))

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.profile.to_dict(), sort_keys=True).encode())
        h.update(module_digest(self).encode())
        return h.hexdigest()

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.state_dict().values())).dtype


def _orthonormal_rows(rows: int, cols: int, gen: torch.Generator, dtype) -> torch.Tensor:
    q, _ = torch.linalg.qr(torch.randn(cols, rows, generator=gen, dtype=torch.float64))
    return q.T.contiguous().to(dtype)


class SyntheticSpatialEncoder(FrozenSpatialEncoder):
    """A one-block attention encoder with analytically known class output.

    The class token is the zero vector, so its query is zero and it attends
    uniformly; its output is ``(L-1)/L`` times the mean patch token, projected
    to ``D_m``. Prompt positions attend through seeded random query/key maps.
    """

    def __init__(self, profile: EncoderProfile, seed: int = 0, attn_scale: float = 1.0):
        super().__init__()
        if profile.patch_dim < profile.D_in:
            raise ValueError("patch pixels must cover the token width")
        if profile.D_in < profile.D_m:
            raise ValueError("synthetic encoder needs D_in >= D_m")
        self.profile = profile
        g = torch.Generator().manual_seed(seed)
        dt = torch.float32
        self.register_buffer("patch_proj", _orthonormal_rows(profile.D_in, profile.patch_dim, g, dt))
        self.register_buffer("class_token", torch.zeros(profile.D_in, dtype=dt))
        std = attn_scale / math.sqrt(profile.D_in)
        self.register_buffer("w_q", torch.randn(profile.D_in, profile.D_in, generator=g) * std)
        self.register_buffer("w_k", torch.randn(profile.D_in, profile.D_in, generator=g) * std)
        # columns span the feature subspace inside token space
        self.register_buffer("lift", _orthonormal_rows(profile.D_m, profile.D_in, g, dt).T.contiguous())
        self.freeze()

    @property
    def gain(self) -> float:
        return (self.profile.L - 1) / self.profile.L

    def _patchify(self, frames: torch.Tensor) -> torch.Tensor:
        p, (gh, gw) = self.profile.patch_size, self.profile.grid
        *lead, H, W, C = frames.shape
        x = frames.reshape(*lead, gh, p, gw, p, C)
        n = len(lead)
        x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
        return x.reshape(*lead, gh * gw, p * p * C)

    def _unpatchify(self, patches: torch.Tensor) -> torch.Tensor:
        p, (gh, gw), C = self.profile.patch_size, self.profile.grid, self.profile.channels
        *lead, _, _ = patches.shape
        n = len(lead)
        x = patches.reshape(*lead, gh, gw, p, p, C)
        x = x.permute(*range(n), n, n + 2, n + 1, n + 3, n + 4)
        return x.reshape(*lead, gh * p, gw * p, C)

    def input_layer(self, frames: torch.Tensor) -> torch.Tensor:
        if tuple(frames.shape[-3:]) != self.profile.frame_shape:
            raise EncoderInputError(
                f"frame shape {tuple(frames.shape[-3:])} does not match profile {self.profile.frame_shape}"
            )
        patches = self._patchify(frames.to(self.patch_proj.dtype)) @ self.patch_proj.T
        cls = self.class_token.expand(*patches.shape[:-2], 1, -1)
        return torch.cat([cls, patches], dim=-2)

    def frames_from_tokens(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        """Inverse of ``input_layer`` on the patch positions (class token excluded)."""
        return self._unpatchify(patch_tokens.to(self.patch_proj.dtype) @ self.patch_proj)

    def attention_stack(self, tokens: torch.Tensor) -> torch.Tensor:
        w_q, w_k, lift = self.w_q.to(tokens.dtype), self.w_k.to(tokens.dtype), self.lift.to(tokens.dtype)
        q = tokens @ w_q.T
        k = tokens @ w_k.T
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(tokens.shape[-1]), dim=-1)
        return (tokens + attn @ tokens) @ lift


class FrozenTextEncoder:
    width: int

    def encode(self, texts: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError

    def digest(self) -> str:
        raise NotImplementedError


class SyntheticTextEncoder(FrozenTextEncoder):
    """Maps ``template.format(label=name)`` to the class anchor; other text to a hashed unit vector."""

    def __init__(self, anchors: torch.Tensor, names: Sequence[str], template: str = DEFAULT_TEMPLATE):
        self.anchors = anchors.detach().clone()
        self.width = anchors.shape[1]
        self.template = template
        self._lookup = {template.format(label=n): i for i, n in enumerate(names)}

    def encode(self, texts: Sequence[str]) -> torch.Tensor:
        rows = []
        for text in texts:
            if text in self._lookup:
                rows.append(self.anchors[self._lookup[text]])
            else:
                seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
                v = torch.randn(self.width, generator=torch.Generator().manual_seed(seed))
                rows.append((v / v.norm()).to(self.anchors.dtype))
        return torch.stack(rows)

    def digest(self) -> str:
        h = hashlib.sha256(self.anchors.numpy().tobytes())
        h.update(json.dumps(sorted(self._lookup.items())).encode())
        return h.hexdigest()


def encode_text(labels: Sequence[str], text_encoder: FrozenTextEncoder,
                template: str = DEFAULT_TEMPLATE,
                class_ids: Optional[Sequence[int]] = None) -> TextClassBank:
    if not labels:
        raise ValueError("no labels to encode")
    if len(set(labels)) != len(labels):
        raise ValueError("duplicate labels")
    ids = list(range(len(labels))) if class_ids is None else list(class_ids)
    emb = text_encoder.encode([template.format(label=l) for l in labels])
    emb = F.normalize(emb.detach().float(), dim=-1)
    return TextClassBank(emb, ids, template)


# --------------------------------------------------------------------------
# sample-level operations


def _as_tensor(x, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x)).to(dtype)


@torch.no_grad()
def encode_patches(sample: VideoSample, encoder: FrozenSpatialEncoder) -> torch.Tensor:
    """``T x L x D_in`` tokens; cached tokens are returned as stored."""
    if sample.is_cached:
        tokens = _as_tensor(sample.cached_tokens, encoder.dtype)
        if tokens.shape[-2:] != (encoder.profile.L, encoder.profile.D_in):
            raise EncoderInputError(f"cached tokens {tuple(tokens.shape)} do not match profile")
        return tokens
    return encoder.input_layer(_as_tensor(sample.frames, encoder.dtype))


@torch.no_grad()
def encode_frame_features(sample: VideoSample, encoder: FrozenSpatialEncoder) -> torch.Tensor:
    """Per-frame pooled class features, ``T x D_m``, not normalized."""
    return encoder.class_feature_from_tokens(encode_patches(sample, encoder))


def to_cached(sample: VideoSample, encoder: FrozenSpatialEncoder) -> VideoSample:
    if sample.is_cached:
        return sample
    tokens = encode_patches(sample, encoder).numpy().astype(np.float32)
    return VideoSample(label=sample.label, cached_tokens=tokens, source_id=sample.source_id)


# --------------------------------------------------------------------------
# synthetic suite


def make_anchors(num_classes: int, width: int, seed: int = 0,
                 theta_min: Optional[float] = None, max_tries: int = 100_000) -> torch.Tensor:
    """Seeded unit anchors: orthonormal via QR when they fit, else rejection sampling."""
    g = torch.Generator().manual_seed(seed)
    if num_classes <= width and theta_min is None:
        return _orthonormal_rows(num_classes, width, g, torch.float32)
    theta_min = math.pi / 4 if theta_min is None else theta_min
    limit = math.cos(theta_min)
    rows: List[torch.Tensor] = []
    tries = 0
    while len(rows) < num_classes:
        tries += 1
        if tries > max_tries:
            raise ValueError(f"could not place {num_classes} anchors {theta_min:.3f} rad apart in {width}-d")
        v = torch.randn(width, generator=g, dtype=torch.float64)
        v = v / v.norm()
        if all(float(v @ r) <= limit for r in rows):
            rows.append(v)
    return torch.stack(rows).float()


def min_pairwise_angle(anchors: torch.Tensor) -> float:
    a = F.normalize(anchors.double(), dim=1)
    cos = a @ a.T
    cos.fill_diagonal_(-1.0)
    return float(torch.arccos(cos.max().clamp(-1, 1)))


class SyntheticEncoderSuite:
    """Seeded class anchors, frozen encoders and a video generator.

    A class-``c`` frame feature is
    ``a_c + sigma * (bias * b_c + nuisance * S z + frame_noise * eps_t)``:
    ``b_c`` is a fixed unit offset towards a confuser class, ``S`` a fixed
    low-rank basis shared by every class with ``z`` drawn once per video,
    and ``eps_t`` per-frame noise. Patch tokens are the lifted feature plus
    small per-patch noise. The class mean stays nearest its own anchor while
    ``sigma < sigma_star``.
    """

    def __init__(self, num_classes: int, L: int = 8, D_in: int = 32, D_m: int = 32, T: int = 8,
                 sigma: Optional[float] = None, seed: int = 0, theta_min: Optional[float] = None,
                 bias: float = 1.0, nuisance: float = 2.0, nuisance_rank: int = 4,
                 frame_noise: float = 1.0, patch_noise: float = 0.25,
                 template: str = DEFAULT_TEMPLATE):
        self.num_classes, self.T, self.seed = num_classes, T, seed
        self.class_names = [f"action_{c:03d}" for c in range(num_classes)]
        self.anchors = make_anchors(num_classes, D_m, seed, theta_min)
        self.theta_min = min_pairwise_angle(self.anchors) if num_classes > 1 else math.pi
        self.bias, self.nuisance, self.frame_noise, self.patch_noise = bias, nuisance, frame_noise, patch_noise
        self.sigma = 0.5 * self.sigma_star if sigma is None else float(sigma)
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

        g = torch.Generator().manual_seed(seed + 7919)
        if num_classes > 1:
            step = torch.randint(1, num_classes, (num_classes,), generator=g)
            confuser = (torch.arange(num_classes) + step) % num_classes
            offsets = self.anchors[confuser] - self.anchors
            self.class_bias = F.normalize(offsets, dim=1)
        else:
            self.class_bias = torch.zeros_like(self.anchors)
        rank = min(nuisance_rank, D_m)
        self.nuisance_basis = _orthonormal_rows(rank, D_m, g, torch.float32).T.contiguous()

        self.profile = synthetic_profile(L, D_in, D_m)
        self.spatial = SyntheticSpatialEncoder(self.profile, seed=seed)
        self.text = SyntheticTextEncoder(self.anchors, self.class_names, template)
        self.template = template

    @property
    def sigma_star(self) -> float:
        """Largest sigma for which every class mean stays nearest its own anchor."""
        if self.bias == 0:
            return math.inf
        return math.sin(self.theta_min / 2) / self.bias

    def bank(self, class_ids: Optional[Sequence[int]] = None) -> TextClassBank:
        ids = list(range(self.num_classes)) if class_ids is None else list(class_ids)
        return encode_text([self.class_names[c] for c in ids], self.text, self.template, ids)

    def frame_features(self, class_id: int, gen: torch.Generator, n_frames: Optional[int] = None):
        T = self.T if n_frames is None else n_frames
        D_m = self.anchors.shape[1]
        z = torch.randn(self.nuisance_basis.shape[1], generator=gen)
        eps = torch.randn(T, D_m, generator=gen) / math.sqrt(D_m)
        shift = self.bias * self.class_bias[class_id] + self.nuisance * (self.nuisance_basis @ z)
        return self.anchors[class_id] + self.sigma * (shift + self.frame_noise * eps)

    def make_sample(self, class_id: int, gen: torch.Generator, n_frames: Optional[int] = None,
                    source_id: str = "", cached: bool = False) -> VideoSample:
        feats = self.frame_features(class_id, gen, n_frames)
        T, n_patch, D_in = feats.shape[0], self.profile.L - 1, self.profile.D_in
        noise = torch.randn(T, n_patch, D_in, generator=gen) / math.sqrt(D_in)
        patch_tokens = (feats @ self.spatial.lift.T)[:, None, :] + self.sigma * self.patch_noise * noise
        if cached:
            cls = self.spatial.class_token.expand(T, 1, D_in)
            tokens = torch.cat([cls, patch_tokens], dim=1)
            return VideoSample(label=class_id, cached_tokens=tokens.numpy(), source_id=source_id)
        frames = self.spatial.frames_from_tokens(patch_tokens)
        return VideoSample(label=class_id, frames=frames.numpy(), source_id=source_id)

    def make_split(self, class_ids: Iterable[int], per_class: int, split: str,
                   cached: bool = True) -> List[VideoSample]:
        """Samples of a class depend only on (seed, split, class, index), never on task layout."""
        out = []
        split_code = {"train": 1, "eval": 2}.get(split, 3)
        for c in class_ids:
            gen = torch.Generator().manual_seed(self.seed * 1_000_003 + split_code * 10_007 + int(c))
            for k in range(per_class):
                out.append(self.make_sample(int(c), gen, source_id=f"{split}/{c}/{k}", cached=cached))
        return out


# --------------------------------------------------------------------------
# CLIP adapter (optional dependency)

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def clip_preprocess(frames: torch.Tensor, size: int = 224) -> torch.Tensor:
    """``... x H x W x C`` frames in [0, 1] -> normalized ``... x C x size x size``."""
    *lead, H, W, C = frames.shape
    x = frames.reshape(-1, H, W, C).permute(0, 3, 1, 2).float()
    scale = size / min(H, W)
    if scale != 1.0:
        x = F.interpolate(x, size=(max(size, round(H * scale)), max(size, round(W * scale))),
                          mode="bicubic", align_corners=False)
    h, w = x.shape[-2:]
    top, left = (h - size) // 2, (w - size) // 2
    x = x[..., top : top + size, left : left + size]
    mean = torch.tensor(CLIP_MEAN).view(1, 3, 1, 1)
    std = torch.tensor(CLIP_STD).view(1, 3, 1, 1)
    return ((x - mean) / std).reshape(*lead, C, size, size)


class ClipSpatialEncoder(FrozenSpatialEncoder):
    """Wraps a Hugging Face ``CLIPVisionModelWithProjection``.

    ``attention_stack`` applies the pre-LN, the transformer layers, the post-LN
    and the visual projection at every position, so prompt outputs are ``D_m`` wide.
    """

    def __init__(self, model):
        super().__init__()
        self.model = model
        cfg = model.config
        grid = cfg.image_size // cfg.patch_size
        self.profile = EncoderProfile(
            f"clip-{cfg.hidden_size}-{cfg.patch_size}", (grid, grid), cfg.patch_size,
            cfg.num_channels, cfg.hidden_size, cfg.projection_dim,
        )
        self.freeze()

    @classmethod
    def from_pretrained(cls, name: str = "openai/clip-vit-base-patch32"):
        from transformers import CLIPVisionModelWithProjection

        return cls(CLIPVisionModelWithProjection.from_pretrained(name))

    @classmethod
    def from_config(cls, **overrides):
        from transformers import CLIPVisionConfig, CLIPVisionModelWithProjection

        torch.manual_seed(0)
        return cls(CLIPVisionModelWithProjection(CLIPVisionConfig(**overrides)))

    def input_layer(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.shape[-1] != self.profile.channels:
            raise EncoderInputError("frames must be channels-last")
        if frames.dtype == torch.uint8:
            frames = frames.float() / 255.0
        *lead, _, _, _ = frames.shape
        pix = clip_preprocess(frames, self.model.config.image_size)
        emb = self.model.vision_model.embeddings(pix.reshape(-1, *pix.shape[-3:]))
        return emb.reshape(*lead, *emb.shape[-2:])

    def attention_stack(self, tokens: torch.Tensor) -> torch.Tensor:
        vm = self.model.vision_model
        *lead, S, D = tokens.shape
        x = vm.pre_layrnorm(tokens.reshape(-1, S, D))
        for layer in vm.encoder.layers:
            out = layer(x, None)
            x = out[0] if isinstance(out, tuple) else out
        x = vm.post_layernorm(x)
        return self.model.visual_projection(x).reshape(*lead, S, -1)


class ClipTextEncoder(FrozenTextEncoder):
    def __init__(self, model, tokenizer):
        self.model, self.tokenizer = model.eval(), tokenizer
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.width = model.config.projection_dim

    @classmethod
    def from_pretrained(cls, name: str = "openai/clip-vit-base-patch32"):
        from transformers import CLIPTextModelWithProjection, CLIPTokenizer

        return cls(CLIPTextModelWithProjection.from_pretrained(name), CLIPTokenizer.from_pretrained(name))

    @torch.no_grad()
    def encode(self, texts: Sequence[str]) -> torch.Tensor:
        batch = self.tokenizer(list(texts), padding=True, return_tensors="pt")
        return F.normalize(self.model(**batch).text_embeds, dim=-1)

    def digest(self) -> str:
        return module_digest(self.model)


# --------------------------------------------------------------------------
# token cache


def build_cache(samples: Iterable[VideoSample], path, encoder: FrozenSpatialEncoder) -> dict:
    """Persist samples as cached tokens: ``manifest.jsonl`` + ``tokens.bin`` (little-endian f32)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records, offset = [], 0
    with open(root / "tokens.bin", "wb") as blob:
        for k, s in enumerate(samples):
            tokens = encode_patches(s, encoder).numpy().astype("<f4")
            raw = tokens.tobytes()
            records.append({
                "id": s.source_id or f"sample_{k}", "label": int(s.label), "offset": offset,
                "length": len(raw), "shape": list(tokens.shape),
                "checksum": hashlib.sha256(raw).hexdigest(),
            })
            blob.write(raw)
            offset += len(raw)
    header = {"format": "pivot-token-cache/1", "profile": encoder.profile.to_dict(),
              "profile_digest": encoder.digest(), "count": len(records)}
    with open(root / "manifest.jsonl", "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return {"header": header, "records": records}


def load_cache(path, encoder: Optional[FrozenSpatialEncoder] = None) -> List[VideoSample]:
    root = Path(path)
    lines = (root / "manifest.jsonl").read_text().splitlines()
    header = json.loads(lines[0])
    if encoder is not None and header["profile_digest"] != encoder.digest():
        raise StaleCacheError("cache was built with a different encoder")
    blob = (root / "tokens.bin").read_bytes()
    out = []
    for line in lines[1:]:
        r = json.loads(line)
        raw = blob[r["offset"] : r["offset"] + r["length"]]
        if len(raw) != r["length"] or hashlib.sha256(raw).hexdigest() != r["checksum"]:
            raise StaleCacheError(f"checksum mismatch for record {r['id']}")
        tokens = np.frombuffer(raw, dtype="<f4").reshape(r["shape"]).astype(np.float32)
        out.append(VideoSample(label=r["label"], cached_tokens=tokens, source_id=r["id"]))
    return out
