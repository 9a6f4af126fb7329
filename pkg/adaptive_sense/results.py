"""Run directories, the metrics CSV, and cross-run comparison tables."""

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import plotting
from .errors import CheckpointError, SchemaError

METRICS_VERSION = 1
METRICS_COLUMNS = [
    "version",
    "run_id",
    "epoch",
    "split",
    "strategy",
    "operator",
    "T",
    "t",
    "ssim_mean",
    "ssim_stderr",
    "ssim_worst",
    "mse_mean",
    "reward_sum_mean",
]
COMPARISON_COLUMNS = [
    "label", "run_id", "operator", "T", "ssim_mean", "ssim_stderr", "ssim_worst", "mse_mean",
]
CURVE_COLUMNS = ["label", "run_id", "operator", "T", "t", "ssim_mean", "ssim_stderr"]


def make_run_id(config):
    digest = hashlib.sha256(
        json.dumps(config, sort_keys=True).encode("utf-8")
    ).hexdigest()[:8]
    train = config["train"]
    return f"{train['strategy']}-{train['operator']}-T{train['T']}-{digest}"


def _fmt(value):
    return repr(float(value))


def _row(run_id, config, epoch, split, t, ssim_report, mse_mean, reward_sum_mean):
    return {
        "version": METRICS_VERSION,
        "run_id": run_id,
        "epoch": epoch,
        "split": split,
        "strategy": config.strategy,
        "operator": config.operator,
        "T": config.T,
        "t": t,
        "ssim_mean": _fmt(ssim_report.mean),
        "ssim_stderr": _fmt(ssim_report.stderr),
        "ssim_worst": _fmt(ssim_report.worst_case),
        "mse_mean": _fmt(mse_mean),
        "reward_sum_mean": _fmt(reward_sum_mean),
    }


def metrics_rows(run_id, config, epoch, split, result=None, final=None, per_step=False):
    """Metric rows for one (epoch, split).

    ``final`` is a (ssim report, mse, reward sum) triple from training
    rollouts; ``result`` is an EvalResult, expanded into one row per step
    when ``per_step`` is set. The row for the last step is always tagged
    ``final``.
    """
    if final is not None:
        ssim_report, mse_mean, reward_sum = final
        return [_row(run_id, config, epoch, split, "final", ssim_report, mse_mean, reward_sum)]
    rows = []
    reward_sum = result.reward_sum.mean
    if per_step:
        for t, (s, m) in enumerate(zip(result.ssim, result.mse), start=1):
            rows.append(_row(run_id, config, epoch, split, t, s, m.mean, reward_sum))
    rows.append(
        _row(run_id, config, epoch, split, "final", result.ssim[-1], result.mse[-1].mean,
             reward_sum)
    )
    return rows


def write_metrics(path, rows, append=False):
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "w" if new else "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerows(rows)


class RunDirectory:
    """Output directory of one training run.

    Holds ``config.yaml``, ``metrics.csv`` and ``checkpoints/epoch-NNNN.ckpt``.
    """

    def __init__(self, path, run_id):
        self.path = Path(path)
        self.run_id = run_id

    @property
    def metrics_path(self):
        return self.path / "metrics.csv"

    @property
    def config_path(self):
        return self.path / "config.yaml"

    def create(self, config_text):
        self.path.mkdir(parents=True, exist_ok=True)
        self.config_path.write_text(config_text, encoding="utf-8")
        write_metrics(self.metrics_path, [])
        logging.info("Writing run %s to %s", self.run_id, self.path)

    def append_metrics(self, rows):
        write_metrics(self.metrics_path, rows, append=True)

    def checkpoint_path(self, epoch):
        return self.path / "checkpoints" / f"epoch-{epoch:04d}.ckpt"

    def latest_checkpoint(self):
        candidates = sorted((self.path / "checkpoints").glob("epoch-*.ckpt"))
        if not candidates:
            raise CheckpointError(f"No checkpoints in {self.path}")
        return candidates[-1]

    def truncate_metrics(self, epoch):
        """Drop rows written after ``epoch`` and any test rows, before resuming."""
        with open(self.metrics_path, newline="") as f:
            rows = [
                r for r in csv.DictReader(f)
                if int(r["epoch"]) <= epoch and r["split"] != "test"
            ]
        write_metrics(self.metrics_path, rows)


@dataclass(frozen=True)
class RunSummary:
    run_id: str
    label: str
    operator: str
    T: int
    final: dict
    steps: list


def summarize_run(rows, source):
    """Test-split rows of one run: the final row plus the per-step curve."""
    test = [r for r in rows if r["split"] == "test"]
    if not test:
        raise SchemaError(f"{source} has no test evaluation")
    last_epoch = max(r["epoch"] for r in test)
    test = [r for r in test if r["epoch"] == last_epoch]
    final = next(r for r in test if r["t"] == "final")
    steps = sorted((r for r in test if r["t"] != "final"), key=lambda r: r["t"])
    return RunSummary(
        run_id=final["run_id"],
        label=final["strategy"],
        operator=final["operator"],
        T=final["T"],
        final=final,
        steps=steps,
    )


def _disambiguate(summaries):
    seen = {}
    for s in summaries:
        seen.setdefault((s.label, s.operator, s.T), []).append(s)
    out = []
    for s in summaries:
        clash = len(seen[(s.label, s.operator, s.T)]) > 1
        out.append(
            RunSummary(s.run_id, s.run_id if clash else s.label, s.operator, s.T, s.final, s.steps)
        )
    return out


def comparison_table(summaries, key="ssim_mean", spread="ssim_stderr"):
    """Markdown table, one row per label and one column per (operator, T).

    The best value of each column is set in bold.
    """
    columns = sorted({(s.operator, s.T) for s in summaries})
    labels = list(dict.fromkeys(s.label for s in summaries))
    cells = {(s.label, (s.operator, s.T)): s.final for s in summaries}
    best = {}
    for col in columns:
        values = [cells[(label, col)][key] for label in labels if (label, col) in cells]
        best[col] = max(values)
    header = ["Strategy"] + [f"{op.capitalize()} T={T}" for op, T in columns]
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join("---" for _ in header) + "|",
    ]
    for label in labels:
        row = [label]
        for col in columns:
            final = cells.get((label, col))
            if final is None:
                row.append("")
                continue
            text = f"{final[key]:.3f}"
            if spread:
                text += f" ± {final[spread]:.3f}"
            row.append(f"**{text}**" if final[key] == best[col] else text)
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def compare(run_rows, out_dir):
    """Merge the test results of several runs into tables and curves.

    ``run_rows`` maps a run's source path to its validated metric rows.
    """
    summaries = _disambiguate([summarize_run(rows, src) for src, rows in run_rows.items()])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    markdown = (
        "## Mean SSIM\n\n"
        + comparison_table(summaries)
        + "\n## Worst-case SSIM\n\n"
        + comparison_table(summaries, key="ssim_worst", spread=None)
    )
    (out_dir / "comparison.md").write_text(markdown, encoding="utf-8")

    with open(out_dir / "comparison.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=COMPARISON_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for s in summaries:
            writer.writerow(
                {"label": s.label, "run_id": s.run_id, "operator": s.operator, "T": s.T}
                | {k: _fmt(s.final[k]) for k in COMPARISON_COLUMNS[4:]}
            )

    with open(out_dir / "curves.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for s in summaries:
            for step in s.steps:
                writer.writerow(
                    {
                        "label": s.label, "run_id": s.run_id, "operator": s.operator,
                        "T": s.T, "t": step["t"], "ssim_mean": _fmt(step["ssim_mean"]),
                        "ssim_stderr": _fmt(step["ssim_stderr"]),
                    }
                )

    for operator, T in sorted({(s.operator, s.T) for s in summaries}):
        group = [s for s in summaries if (s.operator, s.T) == (operator, T) and s.steps]
        if not group:
            continue
        plotting.ssim_curves(
            out_dir / f"curves_{operator}_T{T}.svg",
            {
                s.label: (
                    [r["t"] for r in s.steps],
                    [r["ssim_mean"] for r in s.steps],
                    [r["ssim_stderr"] for r in s.steps],
                )
                for s in group
            },
            title=f"{operator.capitalize()}, T={T}",
        )
    logging.info("Compared %d runs into %s", len(summaries), out_dir)
    return summaries
