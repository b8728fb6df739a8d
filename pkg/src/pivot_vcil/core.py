"""Domain types, configuration and serialization shared across the package."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import torch

DEFAULT_TEMPLATE = "a video of a person {label}."

VARIANTS = (
    "zero_shot",
    "spatial_prompting_linear",
    "memory_linear",
    "memory_mcl",
    "temporal_mcl",
    "pivot",
    "pivot_no_prompts",
)


class ConfigError(ValueError):
    """Invalid experiment or model configuration."""


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


# --------------------------------------------------------------------------
# dimensions


@dataclass(frozen=True)
class Dims:
    """Shape bookkeeping for one model instance.

    ``L`` counts every token the input layer emits per frame, class token
    included (50 for a 224px ViT-B/32).
    """

    T: int = 8
    L: int = 50
    D_in: int = 768
    D_m: int = 512
    N_p: int = 1
    L_sp: int = 3
    L_tp: int = 3

    def __post_init__(self):
        for name in ("T", "L", "D_in", "D_m"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        # prompt sizes may be zero for promptless configurations
        for name in ("N_p", "L_sp", "L_tp"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")

    @classmethod
    def vit_b32(cls, **overrides) -> "Dims":
        return cls(**{"T": 8, "L": 50, "D_in": 768, "D_m": 512, **overrides})

    @property
    def n_spatial(self) -> int:
        return self.N_p * self.L_sp

    @property
    def n_temporal(self) -> int:
        return self.N_p * self.L_tp


def prompt_param_count(dims: Dims) -> int:
    """Trainable scalars in one task's spatial + temporal prompt pair."""
    return dims.N_p * dims.L_sp * dims.D_in + dims.N_p * dims.L_tp * dims.D_m


# --------------------------------------------------------------------------
# samples and tasks


@dataclass
class VideoSample:
    """One video: raw frames ``T x H x W x C`` or cached tokens ``T x L x D_in``."""

    label: int
    frames: Optional[np.ndarray] = None
    cached_tokens: Optional[np.ndarray] = None
    source_id: str = ""

    def __post_init__(self):
        if (self.frames is None) == (self.cached_tokens is None):
            raise ValueError("exactly one of frames / cached_tokens must be set")
        if self.frames is not None and np.asarray(self.frames).ndim != 4:
            raise ValueError(f"frames must be T x H x W x C, got shape {np.shape(self.frames)}")
        if self.cached_tokens is not None and np.asarray(self.cached_tokens).ndim != 3:
            raise ValueError(
                f"cached_tokens must be T x L x D_in, got shape {np.shape(self.cached_tokens)}"
            )

    @property
    def is_cached(self) -> bool:
        return self.cached_tokens is not None

    @property
    def n_frames(self) -> int:
        data = self.cached_tokens if self.is_cached else self.frames
        return int(np.shape(data)[0])


@dataclass(frozen=True)
class TaskSpec:
    task_index: int
    class_ids: tuple
    class_names: tuple

    def __post_init__(self):
        if self.task_index < 1:
            raise ValueError("task_index starts at 1")
        if not self.class_ids:
            raise ValueError("a task needs at least one class")
        if len(self.class_ids) != len(self.class_names):
            raise ValueError("class_ids and class_names must align")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("duplicate class ids within a task")

    def __len__(self):
        return len(self.class_ids)

    def to_dict(self) -> dict:
        return {
            "task_index": self.task_index,
            "class_ids": list(self.class_ids),
            "class_names": list(self.class_names),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        return cls(int(d["task_index"]), tuple(d["class_ids"]), tuple(d["class_names"]))


def split_into_tasks(class_names: Sequence[str], n_tasks: int, seed: int = 0) -> List[TaskSpec]:
    """Shuffle classes with ``seed`` and deal them into ``n_tasks`` disjoint tasks.

    Class ids are positions in ``class_names``. When the count does not divide
    evenly, the leftover classes go one each to the earliest tasks.
    """
    n_classes = len(class_names)
    if n_tasks < 1:
        raise ConfigError("n_tasks must be >= 1")
    if n_tasks > n_classes:
        raise ConfigError(f"cannot split {n_classes} classes into {n_tasks} tasks")
    if len(set(class_names)) != n_classes:
        raise ConfigError("class names must be unique")

    order = np.random.default_rng(seed).permutation(n_classes)
    base, extra = divmod(n_classes, n_tasks)
    tasks, start = [], 0
    for t in range(n_tasks):
        size = base + (1 if t < extra else 0)
        ids = tuple(int(i) for i in order[start : start + size])
        tasks.append(TaskSpec(t + 1, ids, tuple(class_names[i] for i in ids)))
        start += size
    return tasks


# --------------------------------------------------------------------------
# digests


def tensor_digest(tensors: Mapping[str, torch.Tensor] | Iterable[tuple]) -> str:
    """sha256 over names, shapes, dtypes and raw bytes, in the given order."""
    items = tensors.items() if isinstance(tensors, Mapping) else tensors
    h = hashlib.sha256()
    for name, t in items:
        arr = t.detach().cpu().contiguous().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(str(arr.dtype).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def module_digest(module: torch.nn.Module) -> str:
    state = module.state_dict()
    return tensor_digest(sorted(state.items()))


# --------------------------------------------------------------------------
# prompts and class banks


@dataclass
class PromptSet:
    """Spatial and temporal prompts of one task plus the key rows that route to it."""

    task_index: int
    P_sp: torch.Tensor  # N_p x L_sp x D_in
    P_tp: torch.Tensor  # N_p x L_tp x D_m
    key: torch.Tensor  # M_n x D_m, unit rows
    class_ids: tuple = ()
    frozen: bool = False

    def __post_init__(self):
        if self.P_sp.ndim != 3 or self.P_tp.ndim != 3:
            raise ValueError("prompts must be N_p x L x D tensors")
        if self.P_sp.shape[0] != self.P_tp.shape[0]:
            raise ValueError("spatial and temporal prompts disagree on N_p")
        norms = self.key.detach().norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            raise ValueError("key rows must be unit-normalized")
        if self.class_ids and len(self.class_ids) != self.key.shape[0]:
            raise ValueError("one key row per task class")
        if self.frozen:
            self.freeze()

    @property
    def n_params(self) -> int:
        return self.P_sp.numel() + self.P_tp.numel()

    def parameters(self) -> List[torch.Tensor]:
        return [self.P_sp, self.P_tp]

    def freeze(self) -> None:
        self.P_sp = self.P_sp.detach().clone()
        self.P_tp = self.P_tp.detach().clone()
        self.key = self.key.detach().clone()
        self.frozen = True

    def digest(self) -> str:
        return tensor_digest([("P_sp", self.P_sp), ("P_tp", self.P_tp), ("key", self.key)])

    def to(self, dtype: torch.dtype) -> "PromptSet":
        def cast(t):
            out = t.detach().to(dtype)
            return out.requires_grad_(t.requires_grad)

        return PromptSet(
            self.task_index, cast(self.P_sp), cast(self.P_tp), cast(self.key),
            self.class_ids, self.frozen,
        )

    def tensors(self) -> Dict[str, torch.Tensor]:
        return {"P_sp": self.P_sp, "P_tp": self.P_tp, "key": self.key}

    def meta(self) -> dict:
        return {
            "task_index": self.task_index,
            "class_ids": list(self.class_ids),
            "frozen": self.frozen,
        }

    @classmethod
    def from_parts(cls, meta: Mapping, tensors: Mapping[str, torch.Tensor]) -> "PromptSet":
        return cls(
            int(meta["task_index"]), tensors["P_sp"], tensors["P_tp"], tensors["key"],
            tuple(meta["class_ids"]), bool(meta["frozen"]),
        )


@dataclass
class TextClassBank:
    """Unit-norm text embeddings of every class seen so far. Rows are append-only."""

    embeddings: torch.Tensor  # M x D_m
    class_ids: List[int]
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.class_ids):
            raise ValueError("one embedding row per class id")
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ValueError("duplicate class ids in bank")
        if len(self.class_ids):
            norms = self.embeddings.norm(dim=1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
                raise ValueError("bank rows must be unit-normalized")
        self.embeddings = self.embeddings.detach()
        self.class_ids = [int(c) for c in self.class_ids]

    @classmethod
    def empty(cls, width: int, template: str = DEFAULT_TEMPLATE, dtype=torch.float32):
        return cls(torch.zeros(0, width, dtype=dtype), [], template)

    def __len__(self):
        return len(self.class_ids)

    @property
    def width(self) -> int:
        return self.embeddings.shape[1]

    def index_of(self, class_ids: Iterable[int]) -> torch.Tensor:
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        try:
            return torch.tensor([lookup[int(c)] for c in class_ids], dtype=torch.long)
        except KeyError as exc:
            raise ContractError(f"class {exc.args[0]} is not in the bank") from None

    def rows(self, class_ids: Iterable[int]) -> torch.Tensor:
        return self.embeddings[self.index_of(class_ids)]

    def extend(self, other: "TextClassBank") -> None:
        """Append rows for classes not yet present; existing rows are left alone."""
        clash = set(self.class_ids) & set(other.class_ids)
        if clash:
            raise ContractError(f"classes already in bank: {sorted(clash)}")
        self.embeddings = torch.cat([self.embeddings, other.embeddings.to(self.embeddings.dtype)])
        self.class_ids = self.class_ids + list(other.class_ids)

    def restrict(self, class_ids: Iterable[int]) -> "TextClassBank":
        ids = list(class_ids)
        return TextClassBank(self.rows(ids).clone(), ids, self.template)

    def copy(self) -> "TextClassBank":
        return TextClassBank(self.embeddings.clone(), list(self.class_ids), self.template)

    def digest(self) -> str:
        return tensor_digest([("embeddings", self.embeddings)])


# --------------------------------------------------------------------------
# accuracy matrix


class AccuracyMatrix:
    """Lower-triangular matrix; ``A[i, j]`` is accuracy on task j after training task i.

    Indices are 0-based in code. Undefined entries hold NaN.
    """

    def __init__(self, n: int):
        self.n = int(n)
        self.A = np.full((self.n, self.n), np.nan)

    @classmethod
    def from_array(cls, arr) -> "AccuracyMatrix":
        arr = np.asarray(arr, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError("accuracy matrix must be square")
        out = cls(arr.shape[0])
        lower = np.tril(np.ones_like(arr, dtype=bool))
        out.A[lower] = arr[lower]
        return out

    def set_row(self, i: int, values: Sequence[float]) -> None:
        if len(values) != i + 1:
            raise ValueError(f"row {i} takes {i + 1} entries, got {len(values)}")
        vals = np.asarray(values, dtype=float)
        if np.any((vals < 0) | (vals > 1)):
            raise ValueError("accuracies must lie in [0, 1]")
        self.A[i, : i + 1] = vals

    def row(self, i: int) -> np.ndarray:
        return self.A[i, : i + 1].copy()

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and np.array_equal(self.A, other.A, equal_nan=True)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["after_task"] + [f"task_{j + 1}" for j in range(self.n)])
        for i in range(self.n):
            cells = ["" if np.isnan(v) else f"{v:.6f}" for v in self.A[i]]
            writer.writerow([i + 1] + cells)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, path_or_text) -> "AccuracyMatrix":
        text = str(path_or_text)
        if "\n" not in text:
            text = Path(text).read_text()
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[0] != "after_task":
            raise ValueError("not an accuracy-matrix CSV")
        out = cls(len(header) - 1)
        for r in body:
            i = int(r[0]) - 1
            vals = [float(v) for v in r[1:] if v != ""]
            out.A[i, : len(vals)] = vals
        return out


# --------------------------------------------------------------------------
# replay memory


@dataclass
class ReplayMemory:
    budget: int
    store: Dict[int, List[VideoSample]] = field(default_factory=dict)

    def __len__(self):
        return sum(len(v) for v in self.store.values())

    def counts(self) -> Dict[int, int]:
        return {c: len(v) for c, v in self.store.items()}

    def samples(self) -> List[VideoSample]:
        return [s for c in self.store for s in self.store[c]]

    def check(self) -> None:
        if len(self) > self.budget:
            raise ContractError(f"memory holds {len(self)} > budget {self.budget}")


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run. Flat on disk; ``dims`` is nested in memory."""

    variant: str = "pivot"
    dataset: str = "synthetic"
    n_classes: int = 20
    n_tasks: int = 5
    dims: Dims = field(default_factory=lambda: Dims(T=8, L=8, D_in=32, D_m=32))
    memory_budget: int = 200
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.0
    batch_size: int = 50
    epochs: int = 40
    seed: int = 0
    temperature: float = 0.01
    template: str = DEFAULT_TEMPLATE
    temporal_layers: int = 3
    temporal_heads: int = 2
    positional: bool = True
    dropout: float = 0.0
    stage3_prompted: bool = True
    # synthetic benchmark
    sigma: Optional[float] = None  # None -> half the separability threshold
    train_per_class: int = 50
    eval_per_class: int = 10
    # spatial prompting (L2P-style) ablations
    l2p_pool_size: int = 10
    l2p_prompt_length: int = 5
    l2p_top_k: int = 5
    l2p_lr: float = 0.03
    cache_dir: Optional[str] = None
    schema_version: int = 1

    def __post_init__(self):
        if isinstance(self.dims, Mapping):
            self.dims = Dims(**self.dims)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for name in ("n_tasks", "n_classes", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.epochs < 0 or self.memory_budget < 0:
            raise ConfigError("epochs and memory_budget must be non-negative")
        if self.temperature <= 0 or self.lr <= 0:
            raise ConfigError("temperature and lr must be positive")
        if self.n_tasks > self.n_classes:
            raise ConfigError("more tasks than classes")

    # flat key/value form -------------------------------------------------

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name == "dims":
                out.update(dataclasses.asdict(value))
            else:
                out[f.name] = value
        return out

    @classmethod
    def flat_keys(cls) -> set:
        keys = {f.name for f in dataclasses.fields(cls)} - {"dims"}
        return keys | {f.name for f in dataclasses.fields(Dims)}

    @classmethod
    def from_flat(cls, flat: Mapping, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        unknown = set(flat) - cls.flat_keys()
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        current = (base or cls()).to_flat()
        current.update(flat)
        dim_keys = {f.name for f in dataclasses.fields(Dims)}
        dims = Dims(**{k: int(current.pop(k)) for k in dim_keys})
        return cls(dims=dims, **current)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_flat(changes, base=self)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        import yaml

        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, Mapping):
            raise ConfigError("config file must be a flat key/value mapping")
        nested = [k for k, v in data.items() if isinstance(v, (Mapping, list))]
        if nested:
            raise ConfigError(f"config keys must be flat scalars: {nested}")
        return cls.from_flat(data)

    def dump(self, path) -> None:
        import yaml

        Path(path).write_text(yaml.safe_dump(self.to_flat(), sort_keys=True))


# --------------------------------------------------------------------------
# named-tensor archive

_MAGIC = b"PVTA\x01\n"
_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}


def save_tensors(path, tensors: Mapping[str, torch.Tensor], header: Optional[dict] = None) -> None:
    """Write a named-tensor archive: magic, JSON header, little-endian payloads."""
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        entries.append(
            {"name": name, "shape": list(t.shape), "dtype": _DTYPES[t.dtype],
             "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps({"meta": header or {}, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def load_tensors(path, expected_shapes: Optional[Mapping[str, tuple]] = None):
    """Read an archive written by :func:`save_tensors`. Returns ``(tensors, meta)``."""
    blob = Path(path).read_bytes()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path} is not a tensor archive")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    head = json.loads(blob[pos : pos + hlen])
    base = pos + hlen
    tensors = {}
    for e in head["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start : start + e["nbytes"]], dtype=e["dtype"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    if expected_shapes:
        for name, shape in expected_shapes.items():
            if name not in tensors:
                raise ValueError(f"archive is missing tensor {name!r}")
            if tuple(tensors[name].shape) != tuple(shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: archive {tuple(tensors[name].shape)}, expected {tuple(shape)}"
                )
    return tensors, head["meta"]


def save_prompt_set(ps: PromptSet, path) -> None:
    save_tensors(path, ps.tensors(), ps.meta())


def load_prompt_set(path) -> PromptSet:
    tensors, meta = load_tensors(path)
    return PromptSet.from_parts(meta, tensors)


def save_bank(bank: TextClassBank, path) -> None:
    save_tensors(path, {"embeddings": bank.embeddings},
                 {"class_ids": bank.class_ids, "template": bank.template})


def load_bank(path) -> TextClassBank:
    tensors, meta = load_tensors(path)
    return TextClassBank(tensors["embeddings"], list(meta["class_ids"]), meta["template"])


def save_sample(sample: VideoSample, path) -> None:
    key = "cached_tokens" if sample.is_cached else "frames"
    arr = torch.from_numpy(np.ascontiguousarray(getattr(sample, key)))
    save_tensors(path, {key: arr}, {"label": sample.label, "source_id": sample.source_id})


def load_sample(path) -> VideoSample:
    tensors, meta = load_tensors(path)
    (key, arr), = tensors.items()
    return VideoSample(label=int(meta["label"]), source_id=meta["source_id"], **{key: arr.numpy()})


def save_accuracy_matrix(A: AccuracyMatrix, path) -> None:
    save_tensors(path, {"A": torch.from_numpy(A.A.copy())}, {"n": A.n})


def load_accuracy_matrix(path) -> AccuracyMatrix:
    tensors, meta = load_tensors(path)
    out = AccuracyMatrix(meta["n"])
    out.A = tensors["A"].numpy().astype(float)
    return out


def save_memory(memory: ReplayMemory, path) -> None:
    tensors, records = {}, []
    for c, items in memory.store.items():
        for k, s in enumerate(items):
            name = f"{c}/{k}"
            tensors[name] = torch.from_numpy(np.ascontiguousarray(s.cached_tokens))
            records.append({"name": name, "label": s.label, "source_id": s.source_id})
    save_tensors(path, tensors, {"budget": memory.budget, "records": records})


def load_memory(path) -> ReplayMemory:
    tensors, meta = load_tensors(path)
    mem = ReplayMemory(int(meta["budget"]))
    for r in meta["records"]:
        s = VideoSample(label=int(r["label"]), cached_tokens=tensors[r["name"]].numpy(),
                        source_id=r["source_id"])
        mem.store.setdefault(s.label, []).append(s)
    return mem
