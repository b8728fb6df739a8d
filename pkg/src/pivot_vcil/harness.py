"""Experiment driver: task streams, evaluation protocol, Acc/BWF and result files."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .core import (
    AccuracyMatrix, ConfigError, ContractError, ExperimentConfig, TaskSpec, VideoSample,
    split_into_tasks,
)
from .encoders import (
    FrozenSpatialEncoder, FrozenTextEncoder, SyntheticEncoderSuite, build_cache, load_cache,
)
from .training import LearnerState, TokenData, init_state, predict, train_task

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


# --------------------------------------------------------------------------
# metrics


def _matrix(A) -> np.ndarray:
    return A.A if isinstance(A, AccuracyMatrix) else np.asarray(A, dtype=float)


def compute_acc(A) -> float:
    """Mean accuracy over all tasks after the last one."""
    M = _matrix(A)
    n = M.shape[0]
    if n < 1:
        raise ContractError("empty accuracy matrix")
    last = M[n - 1, :n]
    if np.any(np.isnan(last)):
        raise ContractError("final row of the accuracy matrix is incomplete")
    return float(last.mean())


def compute_bwf(A) -> Optional[float]:
    """Mean drop from just-trained to final accuracy; ``None`` for a single task."""
    M = _matrix(A)
    n = M.shape[0]
    if n < 2:
        return None
    diag = np.diag(M)[: n - 1]
    final = M[n - 1, : n - 1]
    if np.any(np.isnan(diag)) or np.any(np.isnan(final)):
        raise ContractError("accuracy matrix is missing entries needed for BWF")
    return float((diag - final).mean())


# --------------------------------------------------------------------------
# data


@dataclass
class Benchmark:
    tasks: List[TaskSpec]
    class_names: List[str]
    train: List[List[VideoSample]]
    eval: List[List[VideoSample]]
    f_sp: FrozenSpatialEncoder
    text_encoder: FrozenTextEncoder
    meta: dict = field(default_factory=dict)


def synthetic_suite(cfg: ExperimentConfig, sigma: Optional[float] = None) -> SyntheticEncoderSuite:
    d = cfg.dims
    return SyntheticEncoderSuite(
        cfg.n_classes, L=d.L, D_in=d.D_in, D_m=d.D_m, T=d.T,
        sigma=cfg.sigma if sigma is None else sigma, seed=cfg.seed, template=cfg.template,
    )


def synthetic_benchmark(cfg: ExperimentConfig, suite: Optional[SyntheticEncoderSuite] = None) -> Benchmark:
    """Seeded desk-scale stream; a class's samples do not depend on how classes are split."""
    suite = suite or synthetic_suite(cfg)
    tasks = split_into_tasks(suite.class_names, cfg.n_tasks, cfg.seed)
    train = [suite.make_split(t.class_ids, cfg.train_per_class, "train") for t in tasks]
    evals = [suite.make_split(t.class_ids, cfg.eval_per_class, "eval") for t in tasks]
    meta = {"dataset": "synthetic", "sigma": suite.sigma, "sigma_star": suite.sigma_star,
            "theta_min": suite.theta_min, "template": cfg.template,
            "profile": suite.profile.to_dict()}
    return Benchmark(tasks, suite.class_names, train, evals, suite.spatial, suite.text, meta)


def tsn_indices(n_frames: int, T: int, train: bool, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """One frame per equal segment: random within the segment for training, the centre otherwise."""
    if n_frames < 1:
        raise ValueError("video has no frames")
    edges = np.linspace(0, n_frames, T + 1)
    if train:
        rng = rng or np.random.default_rng(0)
        lo, hi = edges[:-1], np.maximum(edges[1:], edges[:-1] + 1)
        idx = np.floor(lo + rng.random(T) * (hi - lo))
    else:
        idx = np.floor((edges[:-1] + edges[1:]) / 2)
    return np.clip(idx.astype(int), 0, n_frames - 1)


def read_frame_directory(root, T: int, split: str = "train", seed: int = 0,
                         class_names: Optional[Sequence[str]] = None) -> tuple:
    """Read ``root/<class>/<video>/<frame>.{npy,png,jpg}`` into samples.

    Returns ``(samples, class_names)``. Frames are sampled TSN-style at load time.
    """
    root = Path(root)
    names = list(class_names) if class_names else sorted(p.name for p in root.iterdir() if p.is_dir())
    rng = np.random.default_rng(seed)
    samples = []
    for cid, name in enumerate(names):
        for video in sorted(p for p in (root / name).iterdir() if p.is_dir()):
            files = sorted(f for f in video.iterdir() if f.suffix.lower() in (".npy", ".png", ".jpg", ".jpeg"))
            if not files:
                continue
            picks = tsn_indices(len(files), T, split == "train", rng)
            frames = np.stack([_read_frame(files[i]) for i in picks])
            samples.append(VideoSample(label=cid, frames=frames, source_id=f"{name}/{video.name}"))
    return samples, names


def _read_frame(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".npy":
        return np.load(path).astype(np.float32)
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


# --------------------------------------------------------------------------
# evaluation


def evaluate_after_task(i: int, state: LearnerState, eval_sets: Sequence[TokenData]) -> List[float]:
    """Accuracy on every seen task, classifying over all classes seen so far (0-based ``i``)."""
    if len(state.tasks) != i + 1:
        raise ContractError(f"evaluation after task {i + 1} but {len(state.tasks)} tasks trained")
    if len(eval_sets) < i + 1:
        raise ConfigError(f"missing evaluation set for task {len(eval_sets) + 1}")
    expected = sum(len(t) for t in state.tasks[: i + 1])
    if len(state.bank) != expected:
        raise ContractError(f"bank holds {len(state.bank)} classes, expected {expected}")
    row = []
    for j in range(i + 1):
        pred = predict(state, eval_sets[j])
        row.append(float((pred == eval_sets[j].labels).double().mean()))
    return row


# --------------------------------------------------------------------------
# results


@dataclass
class ResultRecord:
    config: dict
    matrix: AccuracyMatrix
    acc: float
    bwf: Optional[float]
    seed: int
    digests: dict
    tasks: List[dict]
    meta: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    train_log: List[dict] = field(default_factory=list)
    ledger: List[dict] = field(default_factory=list)
    updates: int = 0

    def to_json(self) -> dict:
        """Deterministic fields only; wall-clock data lives in ``timings``."""
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "seed": self.seed,
            "accuracy_matrix": [[None if np.isnan(v) else float(v) for v in row] for row in self.matrix.A],
            "acc": self.acc,
            "bwf": self.bwf,
            "digests": self.digests,
            "tasks": self.tasks,
            "meta": self.meta,
            "updates": self.updates,
        }

    @classmethod
    def from_json(cls, d: dict, timings: Optional[dict] = None) -> "ResultRecord":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {d.get('schema_version')}")
        arr = np.array([[np.nan if v is None else v for v in row] for row in d["accuracy_matrix"]])
        m = AccuracyMatrix(arr.shape[0])
        m.A = arr
        return cls(d["config"], m, d["acc"], d["bwf"], d["seed"], d["digests"], d["tasks"],
                   d.get("meta", {}), timings or {}, updates=d.get("updates", 0))


def run_experiment(cfg: ExperimentConfig, benchmark: Optional[Benchmark] = None) -> ResultRecord:
    """Train the task stream with ``cfg.variant`` and fill the accuracy matrix."""
    torch.manual_seed(cfg.seed)
    bench = benchmark or load_benchmark(cfg)
    if len(bench.tasks) != cfg.n_tasks:
        raise ConfigError(f"benchmark has {len(bench.tasks)} tasks, config says {cfg.n_tasks}")
    state = init_state(cfg, bench.f_sp, bench.text_encoder, bench.class_names)
    eval_sets = [TokenData.from_samples(e, bench.f_sp) for e in bench.eval]
    matrix = AccuracyMatrix(cfg.n_tasks)
    timings = {"tasks": []}
    t_start = time.perf_counter()
    for i, task in enumerate(bench.tasks):
        t0 = time.perf_counter()
        train_task(task, bench.train[i], state)
        t1 = time.perf_counter()
        matrix.set_row(i, evaluate_after_task(i, state, eval_sets))
        timings["tasks"].append({"task": task.task_index, "train_s": t1 - t0,
                                 "eval_s": time.perf_counter() - t1})
        log.info("task %d/%d row %s", i + 1, cfg.n_tasks, np.round(matrix.row(i), 3))
    timings["total_s"] = time.perf_counter() - t_start
    timings["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    return ResultRecord(
        config=cfg.to_flat(), matrix=matrix, acc=compute_acc(matrix), bwf=compute_bwf(matrix),
        seed=cfg.seed, digests=state.digests(), tasks=[t.to_dict() for t in bench.tasks],
        meta=bench.meta, timings=timings, train_log=state.train_log, ledger=state.ledger,
        updates=state.updates,
    )


def load_benchmark(cfg: ExperimentConfig) -> Benchmark:
    bench = synthetic_benchmark(cfg) if cfg.dataset == "synthetic" else frame_directory_benchmark(cfg)
    if cfg.cache_dir:
        bench = cache_benchmark(bench, cfg.cache_dir)
    return bench


def cached_samples(samples: Sequence[VideoSample], encoder: FrozenSpatialEncoder, path) -> List[VideoSample]:
    """Reuse the token cache at ``path`` when present, otherwise build it first."""
    path = Path(path)
    if not (path / "manifest.jsonl").exists():
        build_cache(samples, path, encoder)
    return load_cache(path, encoder)


def cache_benchmark(bench: Benchmark, cache_dir) -> Benchmark:
    """Route every split through an on-disk token cache (one directory per task and split)."""
    root = Path(cache_dir)
    for split, sets in (("train", bench.train), ("eval", bench.eval)):
        for i, samples in enumerate(sets):
            sets[i] = cached_samples(samples, bench.f_sp, root / split / f"task_{i + 1:02d}")
    bench.meta = {**bench.meta, "cache_dir": str(root)}
    return bench


def frame_directory_benchmark(cfg: ExperimentConfig) -> Benchmark:
    """Real-data smoke path: ``<dataset>/{train,eval}/<class>/<video>/frames`` with a CLIP encoder."""
    from .encoders import ClipSpatialEncoder, ClipTextEncoder

    root = Path(cfg.dataset)
    if not (root / "train").is_dir() or not (root / "eval").is_dir():
        raise ConfigError(f"{root} needs train/ and eval/ subdirectories")
    train, names = read_frame_directory(root / "train", cfg.dims.T, "train", cfg.seed)
    evals, _ = read_frame_directory(root / "eval", cfg.dims.T, "eval", cfg.seed, names)
    f_sp, text = ClipSpatialEncoder.from_pretrained(), ClipTextEncoder.from_pretrained()
    tasks = split_into_tasks(names, cfg.n_tasks, cfg.seed)
    by_task = lambda pool, t: [s for s in pool if s.label in set(t.class_ids)]
    meta = {"dataset": str(root), "template": cfg.template, "profile": f_sp.profile.to_dict(),
            "preprocess": "resize shorter side to 224, centre crop, CLIP mean/std"}
    return Benchmark(tasks, names, [by_task(train, t) for t in tasks],
                     [by_task(evals, t) for t in tasks], f_sp, text, meta)


# --------------------------------------------------------------------------
# reports


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _record_dirname(rec: ResultRecord) -> str:
    c = rec.config
    return f"{c['variant']}_seed{rec.seed}_mem{c['memory_budget']}_tasks{c['n_tasks']}"


def write_record(rec: ResultRecord, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(rec.to_json(), out / "results.json")
    _dump_json(rec.timings, out / "timings.json")
    rec.matrix.to_csv(out / "accuracy_matrix.csv")
    with open(out / "accuracy_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["after_task", "mean_seen_accuracy"])
        for i in range(rec.matrix.n):
            row = rec.matrix.row(i)
            if not np.any(np.isnan(row)):
                w.writerow([i + 1, f"{row.mean():.6f}"])
    with open(out / "train_log.jsonl", "w") as fh:
        for entry in rec.train_log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return out


def load_record(path) -> ResultRecord:
    path = Path(path)
    d = json.loads((path / "results.json").read_text())
    timings = json.loads((path / "timings.json").read_text()) if (path / "timings.json").exists() else {}
    return ResultRecord.from_json(d, timings)


def emit_report(records: ResultRecord | Sequence[ResultRecord], out_dir) -> List[Path]:
    """Write result files; several records also get a ladder summary and a memory sweep."""
    if isinstance(records, ResultRecord):
        return [write_record(records, out_dir)]
    records = list(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [write_record(r, out / _record_dirname(r)) for r in records]

    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "n_tasks", "memory_budget", "acc", "bwf"])
        for r in records:
            c = r.config
            w.writerow([c["variant"], r.seed, c["n_tasks"], c["memory_budget"], fmt(r.acc), fmt(r.bwf)])
    budgets = sorted({r.config["memory_budget"] for r in records})
    if len(budgets) > 1:
        with open(out / "memory_sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["memory_budget", "variant", "n_runs", "acc", "bwf"])
            for b in budgets:
                group: Dict[str, List[ResultRecord]] = {}
                for r in records:
                    if r.config["memory_budget"] == b:
                        group.setdefault(r.config["variant"], []).append(r)
                for variant, rs in sorted(group.items()):
                    bwfs = [r.bwf for r in rs if r.bwf is not None]
                    w.writerow([b, variant, len(rs), fmt(float(np.mean([r.acc for r in rs]))),
                                fmt(float(np.mean(bwfs)) if bwfs else None)])
        written.append(out / "memory_sweep.csv")
    return written
