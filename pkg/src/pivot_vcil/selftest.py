"""Fast oracle and invariant checks that run without pytest (``pivot-vcil selftest``)."""

from __future__ import annotations

import math
import tempfile
import time
from pathlib import Path
from typing import Callable, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    AccuracyMatrix, Dims, PromptSet, load_tensors, prompt_param_count, save_tensors,
    split_into_tasks,
)
from .harness import compute_acc, compute_bwf
from .pivot import PromptPool, select_from_pool
from .temporal import TemporalEncoder, count_parameters


def naive_acc(M) -> float:
    n = len(M)
    total = 0.0
    for i in range(n):
        total += M[n - 1][i]
    return total / n


def naive_bwf(M) -> float:
    n = len(M)
    total = 0.0
    for i in range(n - 1):
        total += M[i][i] - M[n - 1][i]
    return total / (n - 1)


def check_param_counts() -> str:
    enc = TemporalEncoder(512, depth=3, heads=2, ffn_mult=4, positional=False)
    got = count_parameters(enc)
    per_task = prompt_param_count(Dims.vit_b32())
    assert got == 9_457_664, got
    assert per_task == 3_840, per_task
    assert got + 10 * per_task == 9_496_064 and got + 20 * per_task == 9_534_464
    return f"temporal encoder {got:,} params, {per_task:,} per task"


def check_metrics(n_matrices: int = 1000) -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(n_matrices):
        n = int(rng.integers(2, 21))
        M = np.tril(rng.random((n, n)))
        worst = max(worst, abs(compute_acc(M) - naive_acc(M)), abs(compute_bwf(M) - naive_bwf(M)))
        flat = np.tril(np.tile(rng.random(n), (n, 1)))
        assert compute_bwf(flat) == 0.0
    assert worst <= 1e-12, worst
    return f"{n_matrices} matrices, worst error {worst:.1e}"


def _pool(n_tasks: int, rows: int, width: int, gen: torch.Generator) -> PromptPool:
    pool = PromptPool()
    for t in range(n_tasks):
        key = F.normalize(torch.randn(rows, width, generator=gen), dim=1)
        ids = tuple(range(t * rows, (t + 1) * rows))
        pool.append(PromptSet(t + 1, torch.zeros(1, 1, width), torch.zeros(1, 1, width), key, ids, frozen=True))
    return pool


def check_selection(n_queries: int = 200) -> str:
    g = torch.Generator().manual_seed(0)
    pool = _pool(4, 3, 16, g)
    keys = [e.key.double() for e in pool]
    queries = torch.randn(n_queries, 16, generator=g)
    # a few queries sit exactly on a key duplicated in a later task
    pool.entries[3].key[0] = pool.entries[1].key[2]
    keys[3][0] = keys[1][2]
    queries[:10] = pool.entries[1].key[2] * 3.0
    got = select_from_pool(queries, pool)
    for q, chosen in zip(queries.double(), got.tolist()):
        best, best_t = math.inf, -1
        for t, K in enumerate(keys):
            for row in K:
                d = 1.0 - float(q @ row) / (float(q.norm()) * float(row.norm()))
                if d < best - 1e-12:
                    best, best_t = d, t
        assert chosen == best_t, (chosen, best_t)
    return f"{n_queries} queries agree with an exhaustive scan"


def check_split() -> str:
    names = [f"c{i}" for i in range(101)]
    for seed in range(20):
        specs = split_into_tasks(names, 10, seed)
        seen = sorted(c for s in specs for c in s.class_ids)
        assert seen == list(range(101))
    return "class partitions are exact"


def check_archive() -> str:
    t = {"a": torch.randn(3, 4, dtype=torch.float64), "b": torch.arange(6)}
    with tempfile.TemporaryDirectory() as d:
        save_tensors(Path(d) / "x", t, {"k": 1})
        back, meta = load_tensors(Path(d) / "x")
    assert meta == {"k": 1} and all(torch.equal(back[k], t[k]) for k in t)
    A = AccuracyMatrix.from_array(np.round(np.random.default_rng(1).random((4, 4)), 6))
    assert AccuracyMatrix.from_csv(A.to_csv()) == A
    return "tensor archive and accuracy CSV round-trip"


def check_zero_shot_ceiling() -> str:
    from .core import ExperimentConfig
    from .harness import run_experiment

    cfg = ExperimentConfig(variant="zero_shot", sigma=0.0, seed=0)
    rec = run_experiment(cfg)
    assert rec.acc == 1.0 and rec.bwf == 0.0 and rec.updates == 0, (rec.acc, rec.bwf)
    return "zero_shot on noiseless anchors: Acc=1.0, BWF=0.0, 0 updates"


CHECKS: List[Tuple[str, Callable[[], str]]] = [
    ("parameter counts", check_param_counts),
    ("metric oracles", check_metrics),
    ("prompt selection oracle", check_selection),
    ("task split partition", check_split),
    ("serialization", check_archive),
    ("zero-shot ceiling", check_zero_shot_ceiling),
]


def main(verbose: bool = True) -> int:
    failed = 0
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            msg, ok = fn(), True
        except Exception as e:  # report and keep going
            msg, ok = f"{type(e).__name__}: {e}", False
        failed += not ok
        if verbose or not ok:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {msg} ({time.perf_counter() - t0:.2f}s)")
    print(f"{len(CHECKS) - failed}/{len(CHECKS)} checks passed")
    return 1 if failed else 0
