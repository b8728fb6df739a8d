"""Trainable temporal transformer that turns per-frame features into one video vector."""

from __future__ import annotations

import math
from typing import Iterator, Tuple

import torch
import torch.nn as nn

from .core import ContractError, load_tensors, save_tensors


class TemporalEncoder(nn.Module):
    """Pre-norm transformer encoder over ``[class | prompts] + frames``.

    Two read-outs: the class-token output (promptless path) and the mean over
    the leading temporal-prompt positions (prompted path).
    """

    def __init__(self, width: int = 512, depth: int = 3, heads: int = 2, ffn_mult: int = 4,
                 positional: bool = True, max_len: int = 64, dropout: float = 0.0, seed: int = 0):
        super().__init__()
        self.width, self.depth, self.heads = width, depth, heads
        self.ffn_mult, self.max_len, self.dropout = ffn_mult, max_len, dropout
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                d_model=width, nhead=heads, dim_feedforward=ffn_mult * width, dropout=dropout,
                activation="gelu", batch_first=True, norm_first=True,
            )
            for _ in range(depth)
        )
        self.class_token = nn.Parameter(torch.zeros(width))
        self.pos_embed = nn.Parameter(torch.zeros(max_len, width)) if positional else None
        self.reset_parameters(seed)

    @property
    def positional(self) -> bool:
        return self.pos_embed is not None

    def config(self) -> dict:
        return {"width": self.width, "depth": self.depth, "heads": self.heads,
                "ffn_mult": self.ffn_mult, "positional": self.positional,
                "max_len": self.max_len, "dropout": self.dropout}

    @torch.no_grad()
    def reset_parameters(self, seed: int = 0) -> None:
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif ".norm" in name:
                p.fill_(1.0)
            else:
                nn.init.trunc_normal_(p, std=0.02, a=-0.04, b=0.04, generator=g)

    @torch.no_grad()
    def zero_residual_branches(self) -> "TemporalEncoder":
        """Make every layer the identity: attention and FFN outputs are zeroed."""
        for layer in self.layers:
            layer.self_attn.out_proj.weight.zero_()
            layer.self_attn.out_proj.bias.zero_()
            layer.linear2.weight.zero_()
            layer.linear2.bias.zero_()
        return self

    def _check_width(self, x: torch.Tensor) -> None:
        if x.shape[-1] != self.width:
            raise ValueError(f"expected width {self.width}, got {x.shape[-1]}")

    def _encode(self, seq: torch.Tensor) -> torch.Tensor:
        self._check_width(seq)
        squeeze = seq.ndim == 2
        x = seq.unsqueeze(0) if squeeze else seq
        if self.pos_embed is not None:
            if x.shape[1] > self.max_len:
                raise ValueError(f"sequence of {x.shape[1]} exceeds max_len {self.max_len}")
            x = x + self.pos_embed[: x.shape[1]]
        for layer in self.layers:
            x = layer(x)
        return x.squeeze(0) if squeeze else x

    def forward_class(self, frames: torch.Tensor) -> torch.Tensor:
        """``[B,] T x D`` frame features -> ``[B,] D`` class-token output."""
        if frames.shape[-2] < 1:
            raise ValueError("need at least one frame")
        self._check_width(frames)
        cls = self.class_token.to(frames.dtype).expand(*frames.shape[:-2], 1, self.width)
        return self._encode(torch.cat([cls, frames], dim=-2))[..., 0, :]

    def forward_prompted(self, prompts: torch.Tensor, frames: torch.Tensor) -> torch.Tensor:
        """Mean output over the leading ``n`` prompt positions of ``[prompts; frames]``."""
        n = prompts.shape[-2]
        if n == 0:
            raise ContractError("empty temporal prompt; use forward_class")
        self._check_width(frames)
        self._check_width(prompts)
        if prompts.ndim < frames.ndim:
            prompts = prompts.expand(*frames.shape[:-2], n, prompts.shape[-1])
        out = self._encode(torch.cat([prompts.to(frames.dtype), frames], dim=-2))
        return out[..., :n, :].mean(dim=-2)

    forward = forward_class

    def save(self, path) -> None:
        save_tensors(path, dict(self.state_dict()), {"config": self.config()})

    @classmethod
    def load(cls, path) -> "TemporalEncoder":
        _, meta = load_tensors(path)
        enc = cls(**meta["config"])
        shapes = {k: tuple(v.shape) for k, v in enc.state_dict().items()}
        tensors, _ = load_tensors(path, expected_shapes=shapes)
        extra = set(tensors) - set(shapes)
        if extra:
            raise ValueError(f"unexpected tensors in checkpoint: {sorted(extra)}")
        enc.load_state_dict(tensors)
        return enc


def count_parameters(enc: nn.Module) -> int:
    return sum(p.numel() for p in enc.parameters())


def shape_walk(width: int, depth: int, ffn: int, class_token: bool = True,
               positional_len: int = 0) -> Iterator[Tuple[str, tuple]]:
    """Parameter shapes of the encoder, listed from the architecture by hand."""
    for i in range(depth):
        yield f"layer{i}.qkv.weight", (3 * width, width)
        yield f"layer{i}.qkv.bias", (3 * width,)
        yield f"layer{i}.out.weight", (width, width)
        yield f"layer{i}.out.bias", (width,)
        yield f"layer{i}.ffn1.weight", (ffn, width)
        yield f"layer{i}.ffn1.bias", (ffn,)
        yield f"layer{i}.ffn2.weight", (width, ffn)
        yield f"layer{i}.ffn2.bias", (width,)
        for norm in ("norm1", "norm2"):
            yield f"layer{i}.{norm}.weight", (width,)
            yield f"layer{i}.{norm}.bias", (width,)
    if class_token:
        yield "class_token", (width,)
    if positional_len:
        yield "pos_embed", (positional_len, width)


def shape_walk_count(*args, **kwargs) -> int:
    return sum(math.prod(shape) for _, shape in shape_walk(*args, **kwargs))
