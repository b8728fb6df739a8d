"""Per-task training: the three stages, replay memory and the ablation variants."""

from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    ConfigError, ContractError, ExperimentConfig, PromptSet, ReplayMemory, TaskSpec,
    TextClassBank, VideoSample, module_digest,
)
from .encoders import FrozenSpatialEncoder, FrozenTextEncoder, encode_text, to_cached
from .pivot import (
    PromptPool, argmax_lowest, init_prompt_set, mcl_logits, prompted_embedding,
    select_from_pool, spatial_prompted_features,
)
from .temporal import TemporalEncoder

log = logging.getLogger(__name__)

PROMPTED_VARIANTS = ("pivot",)
TEMPORAL_VARIANTS = ("temporal_mcl", "pivot_no_prompts", "pivot")
L2P_VARIANTS = ("spatial_prompting_linear", "memory_linear", "memory_mcl")
MEMORY_VARIANTS = ("memory_linear", "memory_mcl") + TEMPORAL_VARIANTS


class TrainingDivergence(FloatingPointError):
    pass


class Stage(enum.Enum):
    ADAPTATION = "adaptation"
    PROMPT_GENERATION = "prompt_generation"
    PROMPT_SELECTION = "prompt_selection"


@dataclass(frozen=True)
class StagePlan:
    stage: Stage
    trainable: str
    data_source: str
    epochs: int
    lr: float
    momentum: float = 0.0

    @classmethod
    def for_stage(cls, stage: Stage, cfg: ExperimentConfig) -> "StagePlan":
        trainable, source = {
            Stage.ADAPTATION: ("temporal_encoder", "current_task"),
            Stage.PROMPT_GENERATION: ("current_prompt_set", "current_task"),
            Stage.PROMPT_SELECTION: ("temporal_encoder", "replay_memory"),
        }[stage]
        return cls(stage, trainable, source, cfg.epochs, cfg.lr, cfg.momentum)


# --------------------------------------------------------------------------
# data


@dataclass
class TokenData:
    """Samples as stacked tensors; frame features are precomputed once (the encoder is frozen)."""

    tokens: torch.Tensor  # N x T x L x D_in
    features: torch.Tensor  # N x T x D_m
    labels: torch.Tensor  # N

    @classmethod
    def from_samples(cls, samples: Sequence[VideoSample], f_sp: FrozenSpatialEncoder,
                     chunk: int = 256) -> "TokenData":
        if not samples:
            raise ContractError("no samples")
        cached = [to_cached(s, f_sp) for s in samples]
        tokens = torch.from_numpy(np.stack([s.cached_tokens for s in cached])).to(f_sp.dtype)
        with torch.no_grad():
            feats = torch.cat([f_sp.class_feature_from_tokens(tokens[i : i + chunk])
                               for i in range(0, len(tokens), chunk)])
        labels = torch.tensor([s.label for s in samples], dtype=torch.long)
        return cls(tokens, feats, labels)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "TokenData":
        return TokenData(self.tokens[idx], self.features[idx], self.labels[idx])

    def to(self, dtype) -> "TokenData":
        return TokenData(self.tokens.to(dtype), self.features.to(dtype), self.labels)


def batches(n: int, batch_size: int, gen: torch.Generator) -> Iterator[torch.Tensor]:
    order = torch.randperm(n, generator=gen)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


# --------------------------------------------------------------------------
# state


@dataclass
class LearnerState:
    cfg: ExperimentConfig
    f_sp: FrozenSpatialEncoder
    text_encoder: FrozenTextEncoder
    class_names: Dict[int, str]
    f_tp: Optional[TemporalEncoder] = None
    bank: Optional[TextClassBank] = None
    pool: PromptPool = field(default_factory=PromptPool)
    memory: Optional[ReplayMemory] = None
    l2p: Optional["SpatialPromptLearner"] = None
    tasks: List[TaskSpec] = field(default_factory=list)
    train_log: List[dict] = field(default_factory=list)
    ledger: List[dict] = field(default_factory=list)
    updates: int = 0
    gen: torch.Generator = field(default_factory=torch.Generator)

    @property
    def variant(self) -> str:
        return self.cfg.variant

    def digests(self) -> dict:
        return {
            "f_sp": self.f_sp.digest(),
            "text": self.text_encoder.digest(),
            "f_tp": module_digest(self.f_tp) if self.f_tp is not None else None,
            "l2p": module_digest(self.l2p) if self.l2p is not None else None,
            "prompts": self.pool.digests(),
        }

    def checkpoint(self, stage: str) -> None:
        task = self.tasks[-1].task_index if self.tasks else 0
        self.ledger.append({"task": task, "stage": stage, **self.digests()})


def init_state(cfg: ExperimentConfig, f_sp: FrozenSpatialEncoder, text_encoder: FrozenTextEncoder,
               class_names: Sequence[str]) -> LearnerState:
    dims = cfg.dims
    if f_sp.profile.D_in != dims.D_in or f_sp.profile.D_m != dims.D_m or f_sp.profile.L != dims.L:
        raise ConfigError(f"encoder profile {f_sp.profile} does not match dims {dims}")
    state = LearnerState(cfg, f_sp, text_encoder, dict(enumerate(class_names)))
    state.gen.manual_seed(cfg.seed)
    state.bank = TextClassBank.empty(dims.D_m, cfg.template)
    if cfg.variant in TEMPORAL_VARIANTS:
        max_len = 1 + max(dims.n_temporal, 1) + dims.T
        state.f_tp = TemporalEncoder(
            dims.D_m, cfg.temporal_layers, cfg.temporal_heads, positional=cfg.positional,
            max_len=max_len, dropout=cfg.dropout, seed=cfg.seed,
        )
    if cfg.variant in L2P_VARIANTS:
        state.l2p = SpatialPromptLearner(
            cfg.l2p_pool_size, cfg.l2p_prompt_length, cfg.l2p_top_k, dims.D_in, dims.D_m,
            linear=cfg.variant != "memory_mcl", seed=cfg.seed,
        )
    uses_memory = cfg.variant in MEMORY_VARIANTS
    state.memory = ReplayMemory(cfg.memory_budget if uses_memory else 0)
    return state


# --------------------------------------------------------------------------
# optimisation loop


def _check_finite(loss: torch.Tensor, params, lr: float, batch_idx: int, stage: str) -> None:
    if torch.isfinite(loss):
        return
    norms = [float(p.grad.norm()) if p.grad is not None else float("nan") for p in params]
    raise TrainingDivergence(
        f"non-finite loss in {stage}: lr={lr}, batch={batch_idx}, grad norms={norms[:8]}"
    )


def _make_optimizer(params, cfg: ExperimentConfig, lr: Optional[float] = None, kind: Optional[str] = None):
    lr = cfg.lr if lr is None else lr
    kind = cfg.optimizer if kind is None else kind
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum)


def _fit(state: LearnerState, stage: str, data: TokenData, params: List[torch.Tensor],
         step_loss: Callable[[TokenData], tuple], epochs: int, lr: float,
         optimizer: Optional[str] = None) -> List[float]:
    """Shared SGD loop. ``step_loss`` returns ``(loss, predictions)`` for a batch."""
    cfg = state.cfg
    opt = _make_optimizer(params, cfg, lr, optimizer)
    history = []
    task = state.tasks[-1].task_index if state.tasks else 0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        total, correct, seen = 0.0, 0, 0
        for b, idx in enumerate(batches(len(data), cfg.batch_size, state.gen)):
            batch = data.subset(idx)
            opt.zero_grad(set_to_none=True)
            loss, pred = step_loss(batch)
            loss.backward()
            _check_finite(loss, params, lr, b, stage)
            opt.step()
            state.updates += 1
            total += float(loss.detach()) * len(batch)
            correct += int((pred == batch.labels).sum())
            seen += len(batch)
        history.append(total / seen)
        state.train_log.append({
            "task": task, "stage": stage, "epoch": epoch + 1, "mean_loss": total / seen,
            "train_accuracy": correct / seen, "wall_time": time.perf_counter() - t0,
        })
    return history


def _predict_from_logits(logits: torch.Tensor, bank: TextClassBank) -> torch.Tensor:
    ids = torch.tensor(bank.class_ids, dtype=torch.long)
    return ids[argmax_lowest(logits.detach(), ids)]


# --------------------------------------------------------------------------
# stages


def train_stage1(data: TokenData, state: LearnerState) -> List[float]:
    """Adapt the temporal encoder to the current task through the class-token path."""
    f_tp, bank, tau = state.f_tp, state.bank, state.cfg.temperature
    f_tp.requires_grad_(True).train()

    def step(batch):
        logits = mcl_logits(f_tp.forward_class(batch.features), bank, tau)
        target = bank.index_of(batch.labels.tolist())
        return F.cross_entropy(logits, target), _predict_from_logits(logits, bank)

    hist = _fit(state, Stage.ADAPTATION.value, data, list(f_tp.parameters()), step,
                state.cfg.epochs, state.cfg.lr)
    f_tp.eval()
    state.checkpoint(Stage.ADAPTATION.value)
    return hist


def train_stage2(data: TokenData, prompts: PromptSet, state: LearnerState) -> List[float]:
    """Learn the current task's prompts with the temporal encoder held fixed."""
    if prompts.frozen:
        raise ContractError(f"prompt set of task {prompts.task_index} is frozen")
    if any(not e.frozen for e in state.pool):
        raise ContractError("earlier prompt sets must be frozen before stage 2")
    f_tp, f_sp, bank, tau = state.f_tp, state.f_sp, state.bank, state.cfg.temperature
    f_tp.requires_grad_(False).eval()
    for p in prompts.parameters():
        p.requires_grad_(True)

    def step(batch):
        P_sp = prompts.P_sp.reshape(-1, prompts.P_sp.shape[-1])
        P_tp = prompts.P_tp.reshape(-1, prompts.P_tp.shape[-1])
        v = prompted_embedding(batch.tokens, P_sp, P_tp, f_sp, f_tp)
        logits = mcl_logits(v, bank, tau)
        target = bank.index_of(batch.labels.tolist())
        return F.cross_entropy(logits, target), _predict_from_logits(logits, bank)

    try:
        hist = _fit(state, Stage.PROMPT_GENERATION.value, data, prompts.parameters(), step,
                    state.cfg.epochs, state.cfg.lr)
    finally:
        f_tp.requires_grad_(True)
    return hist


def stage3_loss(batch: TokenData, state: LearnerState, prompted: bool = True):
    """Prompted-path loss with selected prompts plus the promptless loss. Returns (loss, parts, preds)."""
    f_tp, f_sp, bank, tau = state.f_tp, state.f_sp, state.bank, state.cfg.temperature
    target = bank.index_of(batch.labels.tolist())
    v_plain = f_tp.forward_class(batch.features)
    plain_logits = mcl_logits(v_plain, bank, tau)
    plain = F.cross_entropy(plain_logits, target)
    if not prompted or len(state.pool) == 0:
        return plain, {"unprompted": plain}, _predict_from_logits(plain_logits, bank)
    chosen = select_from_pool(v_plain.detach(), state.pool)
    P_sp, P_tp = state.pool.stacked(batch.tokens.dtype)
    with torch.no_grad():
        v_sp = spatial_prompted_features(batch.tokens, P_sp[chosen], f_sp)
    v_prompt = f_tp.forward_prompted(P_tp[chosen], v_sp)
    prompt_logits = mcl_logits(v_prompt, bank, tau)
    with_prompts = F.cross_entropy(prompt_logits, target)
    parts = {"prompted": with_prompts, "unprompted": plain}
    return with_prompts + plain, parts, _predict_from_logits(prompt_logits, bank)


def train_stage3(memory: ReplayMemory, state: LearnerState, prompted: bool = True) -> List[float]:
    """Fine-tune the temporal encoder on replay memory; prompts stay frozen."""
    if len(memory) == 0:
        raise ContractError("stage 3 needs a non-empty replay memory")
    if prompted and any(not e.frozen for e in state.pool):
        raise ContractError("all prompt sets must be frozen in stage 3")
    data = TokenData.from_samples(memory.samples(), state.f_sp).to(state.f_tp.class_token.dtype)
    f_tp = state.f_tp
    f_tp.requires_grad_(True).train()

    def step(batch):
        loss, _, pred = stage3_loss(batch, state, prompted)
        return loss, pred

    hist = _fit(state, Stage.PROMPT_SELECTION.value, data, list(f_tp.parameters()), step,
                state.cfg.epochs, state.cfg.lr)
    f_tp.eval()
    state.checkpoint(Stage.PROMPT_SELECTION.value)
    return hist


# --------------------------------------------------------------------------
# replay memory


def class_quotas(class_ids: Sequence[int], budget: int) -> Dict[int, int]:
    """Balanced per-class quotas; the remainder goes to the earliest-seen classes."""
    base, extra = divmod(budget, len(class_ids))
    return {c: base + (1 if k < extra else 0) for k, c in enumerate(class_ids)}


def update_memory(memory: ReplayMemory, task_samples: Sequence[VideoSample], task: TaskSpec,
                  seen_class_ids: Sequence[int], seed: int = 0,
                  f_sp: Optional[FrozenSpatialEncoder] = None,
                  allow_empty: bool = False) -> ReplayMemory:
    """Shrink old classes to the new quota at random and fill the new classes at random."""
    seen = list(seen_class_ids)
    if not set(task.class_ids) <= set(seen):
        raise ContractError("seen classes must include the current task")
    if memory.budget < len(seen) and not allow_empty:
        raise ConfigError(f"budget {memory.budget} cannot hold one exemplar for each of {len(seen)} classes")
    quotas = class_quotas(seen, memory.budget)
    rng = np.random.default_rng([seed, task.task_index])

    for c in list(memory.store):
        items = memory.store[c]
        q = quotas.get(c, 0)
        if len(items) > q:
            keep = np.sort(rng.choice(len(items), size=q, replace=False))
            memory.store[c] = [items[k] for k in keep]
        if not memory.store[c]:
            del memory.store[c]

    by_class: Dict[int, List[VideoSample]] = {}
    for s in task_samples:
        by_class.setdefault(s.label, []).append(s)
    for c in task.class_ids:
        pool = by_class.get(c, [])
        take = min(quotas[c], len(pool))
        if take == 0:
            continue
        picks = np.sort(rng.choice(len(pool), size=take, replace=False))
        memory.store[c] = [to_cached(pool[k], f_sp) if f_sp is not None else pool[k] for k in picks]
    memory.check()
    return memory


# --------------------------------------------------------------------------
# L2P-style spatial prompting baseline


class SpatialPromptLearner(nn.Module):
    """Shared prompt pool with learnable keys, top-k per input, then a linear or text-bank head."""

    def __init__(self, pool_size: int, length: int, top_k: int, D_in: int, D_m: int,
                 linear: bool = True, seed: int = 0, pull_weight: float = 0.1):
        super().__init__()
        if top_k > pool_size:
            raise ConfigError("top_k cannot exceed the prompt pool size")
        g = torch.Generator().manual_seed(seed + 1)
        self.top_k, self.linear, self.pull_weight = top_k, linear, pull_weight
        self.prompts = nn.Parameter(torch.empty(pool_size, length, D_in))
        self.keys = nn.Parameter(torch.empty(pool_size, D_m))
        nn.init.uniform_(self.prompts, -1, 1, generator=g)
        nn.init.uniform_(self.keys, -1, 1, generator=g)
        self.head_weight = nn.ParameterList()
        self.head_bias = nn.ParameterList()
        self.head_ids: List[int] = []
        self._g = g

    def grow(self, class_ids: Sequence[int]) -> None:
        """Append classifier rows for new classes; existing rows are kept as they are."""
        if not self.linear:
            return
        D_m = self.keys.shape[1]
        w = torch.empty(len(class_ids), D_m)
        nn.init.trunc_normal_(w, std=0.02, a=-0.04, b=0.04, generator=self._g)
        self.head_weight.append(nn.Parameter(w))
        self.head_bias.append(nn.Parameter(torch.zeros(len(class_ids))))
        self.head_ids += list(class_ids)

    def select(self, query: torch.Tensor) -> torch.Tensor:
        sim = F.normalize(query, dim=-1) @ F.normalize(self.keys, dim=-1).T
        # stable sort so equal similarities keep the lower prompt index
        return torch.sort(sim.detach(), dim=-1, descending=True, stable=True).indices[:, : self.top_k]

    def embed(self, data: TokenData, f_sp: FrozenSpatialEncoder):
        query = data.features.mean(dim=1)
        idx = self.select(query)
        prompts = self.prompts[idx].reshape(len(data), -1, self.prompts.shape[-1])
        v = spatial_prompted_features(data.tokens, prompts, f_sp).mean(dim=1)
        pull = 1 - (F.normalize(query, dim=-1)[:, None, :] * F.normalize(self.keys[idx], dim=-1)).sum(-1)
        return v, pull.mean()

    def logits(self, v: torch.Tensor, bank: TextClassBank, temperature: float):
        if self.linear:
            W = torch.cat(list(self.head_weight))
            b = torch.cat(list(self.head_bias))
            order = [self.head_ids.index(c) for c in bank.class_ids]
            return (v @ W.T + b)[:, order]
        return mcl_logits(v, bank, temperature)


def train_spatial_prompting(data: TokenData, state: LearnerState, task: TaskSpec) -> List[float]:
    cfg, learner, bank = state.cfg, state.l2p, state.bank
    learner.grow(task.class_ids)
    if len(state.memory):
        data = _concat(data, TokenData.from_samples(state.memory.samples(), state.f_sp))
        train_bank = bank
    else:
        # without replay, train logits are masked to the current task's classes
        train_bank = bank.restrict(task.class_ids)
    learner.train()

    def step(batch):
        v, pull = learner.embed(batch, state.f_sp)
        logits = learner.logits(v, train_bank, cfg.temperature)
        loss = F.cross_entropy(logits, train_bank.index_of(batch.labels.tolist()))
        return loss + learner.pull_weight * pull, _predict_from_logits(logits, train_bank)

    hist = _fit(state, "spatial_prompting", data, list(learner.parameters()), step,
                cfg.epochs, cfg.l2p_lr, optimizer="adam")
    learner.eval()
    state.checkpoint("spatial_prompting")
    return hist


def _concat(a: TokenData, b: TokenData) -> TokenData:
    return TokenData(torch.cat([a.tokens, b.tokens]), torch.cat([a.features, b.features]),
                     torch.cat([a.labels, b.labels]))


# --------------------------------------------------------------------------
# task orchestration


def extend_bank(state: LearnerState, task: TaskSpec) -> None:
    names = [state.class_names[c] for c in task.class_ids]
    state.bank.extend(encode_text(names, state.text_encoder, state.cfg.template, task.class_ids))


def seen_classes(state: LearnerState) -> List[int]:
    return [c for t in state.tasks for c in t.class_ids]


def train_task(task: TaskSpec, train_samples: Sequence[VideoSample], state: LearnerState) -> LearnerState:
    """Run one task of the stream for the configured variant."""
    expected = len(state.tasks) + 1
    if task.task_index != expected:
        raise ContractError(f"expected task {expected}, got task {task.task_index}")
    cfg = state.cfg
    state.tasks.append(task)
    extend_bank(state, task)
    state.checkpoint("bank")
    variant = cfg.variant
    if variant == "zero_shot":
        return state

    data = TokenData.from_samples(train_samples, state.f_sp)
    mem_seed = cfg.seed

    if variant in L2P_VARIANTS:
        train_spatial_prompting(data, state, task)
        if variant in MEMORY_VARIANTS:
            update_memory(state.memory, train_samples, task, seen_classes(state), mem_seed, state.f_sp)
        return state

    data = data.to(state.f_tp.class_token.dtype)
    train_stage1(data, state)
    if variant in PROMPTED_VARIANTS:
        prompts = init_prompt_set(task, cfg.dims, state.bank.rows(task.class_ids),
                                  seed=cfg.seed * 1000 + task.task_index)
        train_stage2(data, prompts, state)
        prompts.freeze()
        state.pool.append(prompts)
        state.checkpoint(Stage.PROMPT_GENERATION.value)
    if state.memory.budget == 0:
        return state
    update_memory(state.memory, train_samples, task, seen_classes(state), mem_seed, state.f_sp)
    prompted = variant in PROMPTED_VARIANTS and cfg.stage3_prompted
    train_stage3(state.memory, state, prompted=prompted)
    return state


# --------------------------------------------------------------------------
# inference


@torch.no_grad()
def embed(state: LearnerState, data: TokenData, chunk: int = 500) -> torch.Tensor:
    """Video embeddings used for classification under the configured variant."""
    outs = []
    for i in range(0, len(data), chunk):
        part = data.subset(slice(i, i + chunk))
        outs.append(_embed(state, part))
    return torch.cat(outs)


def _embed(state: LearnerState, data: TokenData) -> torch.Tensor:
    variant = state.variant
    if variant == "zero_shot":
        return data.features.mean(dim=1)
    if variant in L2P_VARIANTS:
        return state.l2p.embed(data, state.f_sp)[0]
    data = data.to(state.f_tp.class_token.dtype)
    plain = state.f_tp.forward_class(data.features)
    if variant in PROMPTED_VARIANTS and len(state.pool):
        chosen = select_from_pool(plain, state.pool)
        P_sp, P_tp = state.pool.stacked(data.tokens.dtype)
        return prompted_embedding(data.tokens, P_sp[chosen], P_tp[chosen], state.f_sp, state.f_tp)
    return plain


@torch.no_grad()
def predict(state: LearnerState, data: TokenData, bank: Optional[TextClassBank] = None) -> torch.Tensor:
    bank = state.bank if bank is None else bank
    v = embed(state, data)
    if state.l2p is not None:
        logits = state.l2p.logits(v, bank, state.cfg.temperature)
    else:
        logits = mcl_logits(v, bank, state.cfg.temperature)
    return _predict_from_logits(logits, bank)
