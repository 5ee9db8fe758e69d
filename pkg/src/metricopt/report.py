"""Results rows and their summaries: CSV persistence, means, paired wins.

A row is one (method, seed) measurement from a finetuning run. Summaries
group rows by method and metric kind, report mean +/- std in both the raw
and the minimized orientation, and compare methods pairwise over the
seeds they share.
"""

import csv
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from metricopt.metrics import HIGHER_BETTER


class ReportError(ValueError):
    """No usable rows to report on."""


@dataclass
class ResultsRow:
    run_id: str
    seed: int
    method: str
    metric_kind: str
    metric_raw: float
    metric_minimized: float
    final_loss: float
    wall_time: float


_FIELDS = [f.name for f in fields(ResultsRow)]


def append_rows(path, rows):
    """Append rows to a CSV file, writing the header only when new."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=_FIELDS)
        if fresh:
            writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))


def read_rows(path):
    if not os.path.exists(path):
        raise ReportError(f"no results file at {path}")
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            if set(rec) != set(_FIELDS):
                raise ReportError(f"{path}: unexpected columns {sorted(rec)}")
            out.append(ResultsRow(
                run_id=rec["run_id"], seed=int(rec["seed"]),
                method=rec["method"], metric_kind=rec["metric_kind"],
                metric_raw=float(rec["metric_raw"]),
                metric_minimized=float(rec["metric_minimized"]),
                final_loss=float(rec["final_loss"]),
                wall_time=float(rec["wall_time"])))
    if not out:
        raise ReportError(f"{path}: no results rows")
    return out


def summarize(rows):
    """Aggregate rows into per-(method, metric) stats plus paired counts.

    Stds are population stds over seeds (every seed that ran is the whole
    population of interest). Pairing compares two methods on the seeds
    they share, counting wins in the minimized orientation.
    """
    if not rows:
        raise ReportError("no results rows")
    groups = {}
    for row in rows:
        groups.setdefault((row.method, row.metric_kind), []).append(row)

    methods = []
    for (method, kind), members in sorted(groups.items()):
        raw = np.array([r.metric_raw for r in members])
        mini = np.array([r.metric_minimized for r in members])
        loss = np.array([r.final_loss for r in members])
        wall = np.array([r.wall_time for r in members])
        methods.append({
            "method": method, "metric_kind": kind, "n": len(members),
            "raw_mean": float(raw.mean()), "raw_std": float(raw.std()),
            "minimized_mean": float(mini.mean()),
            "minimized_std": float(mini.std()),
            "loss_mean": float(loss.mean()),
            "wall_time_mean": float(wall.mean()),
        })

    paired = []
    keys = sorted(groups)
    for i, key_a in enumerate(keys):
        for key_b in keys[i + 1:]:
            if key_a[1] != key_b[1]:
                continue  # different metrics are not comparable
            by_seed_a = {r.seed: r for r in groups[key_a]}
            by_seed_b = {r.seed: r for r in groups[key_b]}
            common = sorted(set(by_seed_a) & set(by_seed_b))
            if not common:
                continue
            deltas = [by_seed_a[s].metric_minimized
                      - by_seed_b[s].metric_minimized for s in common]
            paired.append({
                "method_a": key_a[0], "method_b": key_b[0],
                "metric_kind": key_a[1], "seeds": len(common),
                "a_wins": sum(d < 0 for d in deltas),
                "b_wins": sum(d > 0 for d in deltas),
                "ties": sum(d == 0 for d in deltas),
                "mean_delta_minimized": float(np.mean(deltas)),
            })
    return {"methods": methods, "paired": paired}


def write_summary_csv(summary, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(summary["methods"][0]))
        writer.writeheader()
        for entry in summary["methods"]:
            writer.writerow(entry)


def format_text(summary):
    """Fixed-width tables: per-method stats, then paired comparisons."""
    lines = []
    head = (f"{'method':<20} {'metric':<10} {'n':>3}  "
            f"{'raw mean±std':<19} {'minimized mean±std':<19} "
            f"{'loss':>8} {'time(s)':>8}")
    lines.append(head)
    lines.append("-" * len(head))
    for e in summary["methods"]:
        arrow = "^" if HIGHER_BETTER[e["metric_kind"]] else "v"
        raw = f"{e['raw_mean']:.4f} ± {e['raw_std']:.4f} {arrow}"
        mini = f"{e['minimized_mean']:.4f} ± {e['minimized_std']:.4f}"
        lines.append(f"{e['method']:<20} {e['metric_kind']:<10} {e['n']:>3}  "
                     f"{raw:<19} {mini:<19} "
                     f"{e['loss_mean']:>8.4f} {e['wall_time_mean']:>8.2f}")
    if summary["paired"]:
        lines.append("")
        lines.append("paired over shared seeds (wins in minimized orientation):")
        for p in summary["paired"]:
            lines.append(
                f"  {p['method_a']} vs {p['method_b']} [{p['metric_kind']}]: "
                f"{p['a_wins']}-{p['ties']}-{p['b_wins']} of {p['seeds']}, "
                f"mean delta {p['mean_delta_minimized']:+.4f}")
    return "\n".join(lines) + "\n"
