"""Contrastive text-bank classifier, task prompts, key-based selection and forward passes."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .core import ContractError, Dims, PromptSet, TaskSpec, TextClassBank, VideoSample
from .encoders import FrozenSpatialEncoder, encode_frame_features, encode_patches
from .temporal import TemporalEncoder

DEFAULT_TEMPERATURE = 0.01


class ClassificationError(ValueError):
    pass


class SelectionError(ValueError):
    pass


# --------------------------------------------------------------------------
# multi-modal contrastive classifier


def mcl_logits(V: torch.Tensor, bank: TextClassBank, temperature: float = DEFAULT_TEMPERATURE):
    """Cosine similarity to every bank row divided by the temperature."""
    if len(bank) == 0:
        raise ClassificationError("empty class bank")
    if torch.any(V.detach().norm(dim=-1) == 0):
        raise ClassificationError("zero-norm video embedding")
    emb = bank.embeddings.to(V.dtype)
    return F.normalize(V, dim=-1) @ emb.T / temperature


def argmax_lowest(logits: torch.Tensor, order: torch.Tensor) -> torch.Tensor:
    """Row-wise argmax; among exact ties pick the entry with the smallest ``order`` value."""
    top = logits.max(dim=-1, keepdim=True).values
    ranks = torch.where(logits == top, order.to(logits.device).expand_as(logits),
                        torch.iinfo(torch.long).max)
    return ranks.argmin(dim=-1)


def mcl_predict(V: torch.Tensor, bank: TextClassBank, temperature: float = DEFAULT_TEMPERATURE):
    """Predicted class ids for a batch of embeddings, ties to the lowest class id."""
    with torch.no_grad():
        logits = mcl_logits(V, bank, temperature)
        ids = torch.tensor(bank.class_ids, dtype=torch.long)
        return ids[argmax_lowest(logits, ids)]


def mcl_classify(v: torch.Tensor, bank: TextClassBank,
                 temperature: float = DEFAULT_TEMPERATURE) -> Tuple[int, torch.Tensor]:
    logits = mcl_logits(v.reshape(1, -1), bank, temperature)[0]
    ids = torch.tensor(bank.class_ids, dtype=torch.long)
    return int(ids[argmax_lowest(logits.detach(), ids)]), logits


def mcl_loss(V: torch.Tensor, labels: Sequence[int] | torch.Tensor, bank: TextClassBank,
             temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Mean cross-entropy of the cosine/temperature softmax against the true class rows."""
    labels = labels.tolist() if isinstance(labels, torch.Tensor) else list(labels)
    target = bank.index_of(labels)
    return F.cross_entropy(mcl_logits(V, bank, temperature), target)


class MclHead:
    """Parameter-free classifier over a (growing) text bank."""

    def __init__(self, bank: TextClassBank, temperature: float = DEFAULT_TEMPERATURE):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.bank, self.temperature = bank, temperature

    def logits(self, V):
        return mcl_logits(V, self.bank, self.temperature)

    def predict(self, V):
        return mcl_predict(V, self.bank, self.temperature)

    def loss(self, V, labels):
        return mcl_loss(V, labels, self.bank, self.temperature)


# --------------------------------------------------------------------------
# prompts


def init_prompt_set(task: TaskSpec, dims: Dims, bank_rows: torch.Tensor, seed: int = 0) -> PromptSet:
    """Fresh truncated-normal prompts for ``task``; the key is the task's text rows."""
    if bank_rows.shape[0] != len(task.class_ids):
        raise ContractError(f"{bank_rows.shape[0]} key rows for {len(task.class_ids)} classes")
    if bank_rows.shape[1] != dims.D_m:
        raise ContractError("key width must equal D_m")
    g = torch.Generator().manual_seed(seed)
    P_sp = torch.empty(dims.N_p, dims.L_sp, dims.D_in)
    P_tp = torch.empty(dims.N_p, dims.L_tp, dims.D_m)
    torch.nn.init.trunc_normal_(P_sp, std=0.02, a=-0.04, b=0.04, generator=g)
    torch.nn.init.trunc_normal_(P_tp, std=0.02, a=-0.04, b=0.04, generator=g)
    return PromptSet(
        task.task_index, P_sp.requires_grad_(True), P_tp.requires_grad_(True),
        F.normalize(bank_rows.detach().float(), dim=-1), tuple(task.class_ids), frozen=False,
    )


class PromptPool:
    """Append-only list of per-task prompt sets."""

    def __init__(self, entries: Optional[List[PromptSet]] = None):
        self.entries: List[PromptSet] = []
        for e in entries or []:
            self.append(e)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i) -> PromptSet:
        return self.entries[i]

    def append(self, ps: PromptSet) -> None:
        if self.entries and not self.entries[-1].frozen:
            raise ContractError("freeze the previous prompt set before adding another")
        if self.entries and ps.task_index <= self.entries[-1].task_index:
            raise ContractError("prompt sets must arrive in task order")
        self.entries.append(ps)

    def keys(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """All key rows stacked, plus the pool position owning each row."""
        if not self.entries:
            raise SelectionError("prompt pool is empty")
        keys = torch.cat([e.key for e in self.entries])
        owner = torch.cat([torch.full((e.key.shape[0],), i, dtype=torch.long)
                           for i, e in enumerate(self.entries)])
        return keys, owner

    def stacked(self, dtype=torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
        P_sp = torch.stack([e.P_sp.reshape(-1, e.P_sp.shape[-1]) for e in self.entries]).to(dtype)
        P_tp = torch.stack([e.P_tp.reshape(-1, e.P_tp.shape[-1]) for e in self.entries]).to(dtype)
        return P_sp, P_tp

    def digests(self) -> List[str]:
        return [e.digest() for e in self.entries]


def select_from_pool(queries: torch.Tensor, pool: PromptPool) -> torch.Tensor:
    """Pool position whose key row is closest in cosine distance; ties go to the earliest task."""
    keys, owner = pool.keys()
    with torch.no_grad():
        sim = F.normalize(queries.reshape(-1, queries.shape[-1]), dim=-1) @ keys.to(queries.dtype).T
        best = argmax_lowest(sim, owner)
    return owner[best].reshape(queries.shape[:-1])


# --------------------------------------------------------------------------
# batched embeddings


def unprompted_embedding(frame_features: torch.Tensor, f_tp: TemporalEncoder) -> torch.Tensor:
    return f_tp.forward_class(frame_features)


def spatial_prompted_features(tokens: torch.Tensor, P_sp: torch.Tensor,
                              f_sp: FrozenSpatialEncoder) -> torch.Tensor:
    """``[B,] T x L x D_in`` tokens and ``[B,] n x D_in`` prompts -> ``[B,] T x D_m``.

    The same prompt is prepended to every frame and the outputs at the prompt
    positions are averaged.
    """
    n = P_sp.shape[-2]
    if n == 0:
        raise ContractError("empty spatial prompt")
    if P_sp.shape[-1] != tokens.shape[-1]:
        raise ContractError(f"spatial prompt width {P_sp.shape[-1]} != token width {tokens.shape[-1]}")
    *lead, T, _, D = tokens.shape
    prompts = P_sp.to(tokens.dtype)
    if prompts.ndim == 2:
        prompts = prompts.expand(*lead, T, n, D)
    else:
        prompts = prompts.unsqueeze(-3).expand(*lead, T, n, D)
    out = f_sp.attention_stack(torch.cat([prompts, tokens], dim=-2))
    return out[..., :n, :].mean(dim=-2)


def prompted_embedding(tokens: torch.Tensor, P_sp: torch.Tensor, P_tp: torch.Tensor,
                       f_sp: FrozenSpatialEncoder, f_tp: TemporalEncoder) -> torch.Tensor:
    v_sp = spatial_prompted_features(tokens, P_sp, f_sp)
    if P_tp.shape[-1] != v_sp.shape[-1]:
        raise ContractError("temporal prompt width must equal D_m")
    return f_tp.forward_prompted(P_tp, v_sp)


def pool_embedding(tokens: torch.Tensor, frame_features: torch.Tensor, pool: PromptPool,
                   f_sp: FrozenSpatialEncoder, f_tp: TemporalEncoder):
    """Select prompts with the promptless query, then run the prompted path.

    Returns ``(v_tp, selected pool positions)``.
    """
    with torch.no_grad():
        query = unprompted_embedding(frame_features, f_tp)
    chosen = select_from_pool(query, pool)
    P_sp, P_tp = pool.stacked(tokens.dtype)
    return prompted_embedding(tokens, P_sp[chosen], P_tp[chosen], f_sp, f_tp), chosen


# --------------------------------------------------------------------------
# per-sample forward passes


def forward_unprompted(sample: VideoSample, f_sp: FrozenSpatialEncoder, f_tp: TemporalEncoder,
                       bank: TextClassBank, temperature: float = DEFAULT_TEMPERATURE):
    """Frame features -> class-token temporal output -> nearest text row."""
    feats = encode_frame_features(sample, f_sp)
    v_tp = unprompted_embedding(feats.to(f_tp.class_token.dtype), f_tp)
    class_id, _ = mcl_classify(v_tp, bank, temperature)
    return class_id, v_tp


def select_prompts(sample: VideoSample, pool: PromptPool, f_sp: FrozenSpatialEncoder,
                   f_tp: TemporalEncoder) -> PromptSet:
    feats = encode_frame_features(sample, f_sp)
    with torch.no_grad():
        query = unprompted_embedding(feats.to(f_tp.class_token.dtype), f_tp)
    return pool[int(select_from_pool(query, pool))]


def forward_prompted(sample: VideoSample, P: PromptSet, f_sp: FrozenSpatialEncoder,
                     f_tp: TemporalEncoder, bank: TextClassBank,
                     temperature: float = DEFAULT_TEMPERATURE):
    tokens = encode_patches(sample, f_sp).to(f_tp.class_token.dtype)
    P_sp = P.P_sp.reshape(-1, P.P_sp.shape[-1])
    P_tp = P.P_tp.reshape(-1, P.P_tp.shape[-1])
    v_tp = prompted_embedding(tokens, P_sp, P_tp, f_sp, f_tp)
    class_id, _ = mcl_classify(v_tp, bank, temperature)
    return class_id, v_tp
