import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pivot_vcil.core import AccuracyMatrix, ConfigError, ContractError
from pivot_vcil.harness import (
    compute_acc, compute_bwf, emit_report, evaluate_after_task, load_record, read_frame_directory,
    run_experiment, synthetic_benchmark, tsn_indices,
)
from pivot_vcil.pivot import mcl_predict
from pivot_vcil.training import TokenData, init_state, train_task


class TestMetrics:
    def test_examples(self):
        assert compute_acc([[0.8]]) == pytest.approx(0.8)
        A = np.array([[0.9, np.nan, np.nan], [0.4, 0.8, np.nan], [0.5, 0.7, 0.9]])
        assert compute_acc(A) == pytest.approx(0.7)
        assert compute_bwf([[0.9, np.nan], [0.6, 0.5]]) == pytest.approx(0.3)

    def test_single_task_bwf_absent(self):
        assert compute_bwf([[0.5]]) is None

    def test_incomplete_final_row(self):
        with pytest.raises(ContractError):
            compute_acc(AccuracyMatrix(2))

    def test_negative_bwf_allowed(self):
        assert compute_bwf([[0.5, np.nan], [0.9, 1.0]]) == pytest.approx(-0.4)

    @given(st.integers(2, 12), st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_no_forgetting_gives_zero(self, n, seed):
        diag = np.random.default_rng(seed).random(n)
        A = np.tril(np.tile(diag, (n, 1)))
        assert compute_bwf(A) == 0.0


def test_tsn_indices():
    assert tsn_indices(16, 8, train=False).tolist() == [1, 3, 5, 7, 9, 11, 13, 15]
    rng = np.random.default_rng(0)
    for _ in range(20):
        idx = tsn_indices(17, 8, train=True, rng=rng)
        edges = np.linspace(0, 17, 9)
        assert np.all(idx >= np.floor(edges[:-1])) and np.all(idx < np.ceil(edges[1:]))
    assert tsn_indices(3, 8, train=False).max() <= 2
    with pytest.raises(ValueError):
        tsn_indices(0, 8, train=True)


def test_read_frame_directory(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("jump", "run"):
        for v in range(2):
            d = tmp_path / name / f"v{v}"
            d.mkdir(parents=True)
            for f in range(5):
                np.save(d / f"{f:03d}.npy", rng.random((4, 4, 3)).astype(np.float32))
    samples, names = read_frame_directory(tmp_path, T=3, split="eval")
    assert names == ["jump", "run"] and len(samples) == 4
    assert samples[0].frames.shape == (3, 4, 4, 3) and samples[3].label == 1


@pytest.fixture
def bench(small_cfg):
    return synthetic_benchmark(small_cfg)


class TestEvaluation:
    def test_zero_shot_row_matches_restricted_bank_recomputation(self, small_cfg, bench):
        cfg = small_cfg.replace(variant="zero_shot")
        state = init_state(cfg, bench.f_sp, bench.text_encoder, bench.class_names)
        evals = [TokenData.from_samples(e, bench.f_sp) for e in bench.eval]
        for i, t in enumerate(bench.tasks):
            train_task(t, bench.train[i], state)
            row = evaluate_after_task(i, state, evals)
            seen = [c for task in bench.tasks[: i + 1] for c in task.class_ids]
            hand = bench.text_encoder.encode([cfg.template.format(label=bench.class_names[c]) for c in seen])
            from pivot_vcil.core import TextClassBank

            restricted = TextClassBank(hand / hand.norm(dim=1, keepdim=True), seen)
            for j in range(i + 1):
                pred = mcl_predict(evals[j].features.mean(dim=1), restricted)
                assert row[j] == pytest.approx(float((pred == evals[j].labels).double().mean()))
            assert len(row) == i + 1

    def test_requires_trained_tasks(self, small_cfg, bench):
        state = init_state(small_cfg, bench.f_sp, bench.text_encoder, bench.class_names)
        with pytest.raises(ContractError):
            evaluate_after_task(0, state, [])

    def test_missing_eval_set(self, small_cfg, bench):
        cfg = small_cfg.replace(variant="zero_shot")
        state = init_state(cfg, bench.f_sp, bench.text_encoder, bench.class_names)
        train_task(bench.tasks[0], bench.train[0], state)
        with pytest.raises(ConfigError):
            evaluate_after_task(0, state, [])

    def test_noiseless_zero_shot_is_perfect(self, small_cfg):
        cfg = small_cfg.replace(variant="zero_shot", sigma=0.0)
        rec = run_experiment(cfg)
        assert rec.acc == 1.0 and rec.bwf == 0.0

    def test_task_count_mismatch(self, small_cfg, bench):
        with pytest.raises(ConfigError):
            run_experiment(small_cfg.replace(n_tasks=2), bench)


class TestRecords:
    @pytest.fixture
    def record(self, small_cfg, bench):
        return run_experiment(small_cfg.replace(variant="temporal_mcl", epochs=1), bench)

    def test_metrics_recomputable(self, record):
        assert abs(compute_acc(record.matrix) - record.acc) < 1e-9
        assert abs(compute_bwf(record.matrix) - record.bwf) < 1e-9

    def test_roundtrip(self, tmp_path, record):
        emit_report(record, tmp_path)
        back = load_record(tmp_path)
        assert back.acc == record.acc and back.bwf == record.bwf and back.matrix == record.matrix
        assert back.timings == json.loads(json.dumps(record.timings))

    def test_matrix_csv_reparse(self, tmp_path, record):
        emit_report(record, tmp_path)
        A = AccuracyMatrix.from_csv((tmp_path / "accuracy_matrix.csv").read_text())
        assert compute_acc(A) == pytest.approx(record.acc, abs=1e-6)

    def test_results_json_has_no_wall_clock(self, tmp_path, record):
        emit_report(record, tmp_path)
        text = (tmp_path / "results.json").read_text()
        assert "finished_at" not in text and "train_s" not in text and "wall_time" not in text
        assert json.loads(text)["schema_version"] == 1

    def test_curve_and_log(self, tmp_path, record):
        emit_report(record, tmp_path)
        rows = list(csv.reader(open(tmp_path / "accuracy_curve.csv")))
        assert rows[0] == ["after_task", "mean_seen_accuracy"] and len(rows) == 1 + record.matrix.n
        log = [json.loads(l) for l in open(tmp_path / "train_log.jsonl")]
        assert {"task", "stage", "epoch", "mean_loss", "train_accuracy", "wall_time"} <= set(log[0])

    def test_memory_sweep(self, tmp_path, small_cfg, bench):
        recs = [run_experiment(small_cfg.replace(variant="temporal_mcl", epochs=1, memory_budget=b), bench)
                for b in (12, 30)]
        emit_report(recs, tmp_path)
        rows = list(csv.DictReader(open(tmp_path / "memory_sweep.csv")))
        assert [int(r["memory_budget"]) for r in rows] == [12, 30]
        summary = list(csv.DictReader(open(tmp_path / "summary.csv")))
        assert len(summary) == 2

    def test_results_json_is_deterministic(self, tmp_path, small_cfg):
        cfg = small_cfg.replace(epochs=1)
        for name in ("a", "b"):
            emit_report(run_experiment(cfg), tmp_path / name)
        for f in ("results.json", "accuracy_matrix.csv", "accuracy_curve.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_unsupported_schema(self, tmp_path, record):
        emit_report(record, tmp_path)
        d = json.loads((tmp_path / "results.json").read_text())
        d["schema_version"] = 99
        (tmp_path / "results.json").write_text(json.dumps(d))
        with pytest.raises(ValueError):
            load_record(tmp_path)


def test_token_cache_run_matches_direct_run(tmp_path, small_cfg):
    cfg = small_cfg.replace(variant="temporal_mcl", epochs=1)
    direct = run_experiment(cfg)
    cached = run_experiment(cfg.replace(cache_dir=str(tmp_path / "cache")))
    again = run_experiment(cfg.replace(cache_dir=str(tmp_path / "cache")))
    assert direct.matrix == cached.matrix == again.matrix
    assert (tmp_path / "cache" / "train" / "task_01" / "manifest.jsonl").exists()
