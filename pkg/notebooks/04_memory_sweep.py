"""
Replay budget sweep
===================

Several records go to one report directory; differing budgets add
``memory_sweep.csv``.
"""

# %%
import tempfile
from pathlib import Path

from pivot_vcil import ExperimentConfig, emit_report, run_experiment

base = ExperimentConfig(n_classes=12, n_tasks=3, seed=0)
records = [run_experiment(base.replace(variant="temporal_mcl", memory_budget=b)) for b in (12, 36, 72)]

# %%
out = Path(tempfile.mkdtemp())
emit_report(records, out)
print((out / "memory_sweep.csv").read_text())

# %% [markdown]
# Larger budgets keep more exemplars of old classes, so BWF falls as the
# budget grows. Short schedules (few epochs) make this curve noisy.
