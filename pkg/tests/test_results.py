import csv

import pytest

from adaptive_sense import metrics, results, schema
from adaptive_sense.errors import CheckpointError, SchemaError
from adaptive_sense.trainer import EvalResult, TrainConfig

CONFIG = TrainConfig(strategy="AE-E2E", operator="gaussian", T=3)


def _result(ssims, mses=(0.01, 0.005, 0.002)):
    return EvalResult(
        ssim=[metrics.report(values) for values in ssims],
        mse=[metrics.report([m, m]) for m in mses],
        reward_sum=metrics.report([0.5, 0.7]),
    )


def _test_rows(run_id, strategy, operator, T, final_ssim, worst=0.1, epoch=1):
    config = TrainConfig(strategy=strategy, operator=operator, T=T)
    ssims = [[0.1 * (t + 1), 0.1 * (t + 1)] for t in range(T - 1)] + [[final_ssim, final_ssim]]
    result = _result(ssims, mses=[0.01] * T)
    rows = results.metrics_rows(run_id, config, epoch, "test", result=result, per_step=True)
    rows[-1]["ssim_worst"] = repr(worst)
    return rows


def _validated(tmp_path, name, rows):
    path = tmp_path / f"{name}.csv"
    results.write_metrics(path, rows)
    return schema.validate_metrics(path)


def test_make_run_id():
    config = {"data": {}, "train": {"strategy": "VAE-P", "operator": "radon", "T": 4}}
    run_id = results.make_run_id(config)
    assert run_id.startswith("VAE-P-radon-T4-")
    assert len(run_id.rsplit("-", 1)[1]) == 8
    assert results.make_run_id(config) == run_id
    assert results.make_run_id(config | {"run": {"seed": 1}}) != run_id


def test_metrics_rows_per_step():
    result = _result([[0.2, 0.4], [0.5, 0.7], [0.8, 0.6]])
    rows = results.metrics_rows("run", CONFIG, 2, "test", result=result, per_step=True)
    assert [r["t"] for r in rows] == [1, 2, 3, "final"]
    assert rows[-1]["ssim_mean"] == rows[2]["ssim_mean"]
    assert float(rows[-1]["ssim_mean"]) == pytest.approx(0.7)
    assert rows[-1]["ssim_worst"] == repr(0.6)
    assert float(rows[0]["reward_sum_mean"]) == pytest.approx(0.6)
    assert {r["split"] for r in rows} == {"test"}


def test_metrics_rows_final_only():
    result = _result([[0.2, 0.4], [0.5, 0.7], [0.8, 0.6]])
    rows = results.metrics_rows("run", CONFIG, 2, "val", result=result)
    assert len(rows) == 1
    assert rows[0]["t"] == "final"


def test_metrics_rows_from_training_stats():
    final = (metrics.report([0.3, 0.5]), 0.02, -1.5)
    (row,) = results.metrics_rows("run", CONFIG, 7, "train", final=final)
    assert row["epoch"] == 7
    assert float(row["ssim_mean"]) == pytest.approx(0.4)
    assert row["mse_mean"] == repr(0.02)
    assert row["reward_sum_mean"] == repr(-1.5)


def test_write_metrics_append(tmp_path):
    path = tmp_path / "metrics.csv"
    rows = results.metrics_rows("run", CONFIG, 1, "val", result=_result([[0.5]] * 3))
    results.write_metrics(path, rows)
    results.write_metrics(path, rows, append=True)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        assert reader.fieldnames == results.METRICS_COLUMNS
        assert len(list(reader)) == 2


def test_run_directory(tmp_path):
    run = results.RunDirectory(tmp_path / "run", "run")
    run.create("train: {}\n")
    assert run.metrics_path.read_text() == ",".join(results.METRICS_COLUMNS) + "\n"
    with pytest.raises(CheckpointError):
        run.latest_checkpoint()
    for epoch in (2, 10):
        run.checkpoint_path(epoch).parent.mkdir(exist_ok=True)
        run.checkpoint_path(epoch).write_bytes(b"")
    assert run.latest_checkpoint().name == "epoch-0010.ckpt"


def test_truncate_metrics(tmp_path):
    run = results.RunDirectory(tmp_path, "run")
    run.create("")
    for epoch in (1, 2, 3):
        run.append_metrics(
            results.metrics_rows("run", CONFIG, epoch, "val", result=_result([[0.5]] * 3))
        )
    run.append_metrics(_test_rows("run", "AE-E2E", "gaussian", 3, 0.5, epoch=3))
    run.truncate_metrics(2)
    rows = schema.validate_metrics(run.metrics_path)
    assert [(r["epoch"], r["split"]) for r in rows] == [(1, "val"), (2, "val")]


def test_summarize_run_needs_test_rows(tmp_path):
    rows = results.metrics_rows("run", CONFIG, 1, "val", result=_result([[0.5]] * 3))
    with pytest.raises(SchemaError):
        results.summarize_run(_validated(tmp_path, "val", rows), "val.csv")


def test_summarize_run_uses_last_epoch(tmp_path):
    rows = _test_rows("run", "AE-R", "gaussian", 3, 0.4, epoch=1)
    rows += _test_rows("run", "AE-R", "gaussian", 3, 0.6, epoch=5)
    summary = results.summarize_run(_validated(tmp_path, "run", rows), "run.csv")
    assert summary.final["ssim_mean"] == pytest.approx(0.6)
    assert [r["t"] for r in summary.steps] == [1, 2, 3]


def test_comparison_table_bolds_best():
    runs = [
        ("a", "AE-R", "gaussian", 5, 0.70, 0.2),
        ("b", "AE-E2E", "gaussian", 5, 0.85, 0.1),
        ("c", "AE-R", "radon", 5, 0.90, 0.3),
        ("d", "AE-E2E", "radon", 5, 0.80, 0.4),
    ]
    summaries = [
        results.RunSummary(run_id, label, op, T, {"ssim_mean": s, "ssim_stderr": 0.01, "ssim_worst": w}, [])
        for run_id, label, op, T, s, w in runs
    ]
    table = results.comparison_table(summaries).splitlines()
    assert table[0] == "| Strategy | Gaussian T=5 | Radon T=5 |"
    assert table[2] == "| AE-R | 0.700 ± 0.010 | **0.900 ± 0.010** |"
    assert table[3] == "| AE-E2E | **0.850 ± 0.010** | 0.800 ± 0.010 |"

    worst = results.comparison_table(summaries, key="ssim_worst", spread=None).splitlines()
    assert worst[2] == "| AE-R | **0.200** | 0.300 |"
    assert worst[3] == "| AE-E2E | 0.100 | **0.400** |"


def test_compare_single_run(tmp_path):
    rows = _validated(tmp_path, "run", _test_rows("only", "VAE-E2E", "radon", 4, 0.75))
    summaries = results.compare({"run.csv": rows}, tmp_path / "out")

    assert [s.label for s in summaries] == ["VAE-E2E"]
    markdown = (tmp_path / "out" / "comparison.md").read_text(encoding="utf-8")
    assert "| VAE-E2E | **0.750 ± 0.000** |" in markdown
    with open(tmp_path / "out" / "curves.csv", newline="") as f:
        curve = list(csv.DictReader(f))
    assert [int(r["t"]) for r in curve] == [1, 2, 3, 4]
    svg = tmp_path / "out" / "curves_radon_T4.svg"
    assert svg.read_text().lstrip().startswith("<?xml")


def test_compare_disambiguates_repeated_strategies(tmp_path):
    run_rows = {
        "first.csv": _validated(tmp_path, "first", _test_rows("seed0", "AE-R", "gaussian", 2, 0.5)),
        "second.csv": _validated(tmp_path, "second", _test_rows("seed1", "AE-R", "gaussian", 2, 0.6)),
    }
    summaries = results.compare(run_rows, tmp_path / "out")
    assert [s.label for s in summaries] == ["seed0", "seed1"]
    with open(tmp_path / "out" / "comparison.csv", newline="") as f:
        assert [r["label"] for r in csv.DictReader(f)] == ["seed0", "seed1"]
