"""
Continual-learning metrics and report tables

All arithmetic is double precision; half-up rounding to two decimals only
happens when a table is rendered.
"""

import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from ..errors import ValidationError
from ..engine.incremental_engine import SequenceResult
from ..utils import round_half_up, NumpyEncoder

logger = logging.getLogger(__name__)

DIFF_EPS = 0.001
REPORT_SCHEMA_VERSION = 1
TASK_COLUMNS = ("A_mean", "A_final", "F_mean", "A_single", "A_multi")
LAYOUTS = {
    "table1": (("A_mean", "A_final", "F_mean"), ("A_mean", "F_mean", "A_final"), False),
    "table2": (("A_single", "A_multi"), ("A_single", "A_multi"), True),
    "full": (TASK_COLUMNS, TASK_COLUMNS, True),
}
FORMATS = ("csv", "json")


def _check_results(results):
    if not results:
        raise ValidationError("No sequence results to aggregate")
    lengths = {len(r.order) for r in results}
    if len(lengths) != 1:
        raise ValidationError(f"Metrics need orders of one length, got lengths {sorted(lengths)}")
    return lengths.pop()


def first_task_stats(results, task):
    """(A_mean, A_final, F_mean) over orders that start with `task`"""
    S = _check_results(results)
    firsts = [r for r in results if r.order[0] == task]
    if not firsts:
        raise ValidationError(f"Task '{task}' is never the first task of an order")
    a = np.array([r.task_accuracies(task) for r in firsts], dtype=np.float64)
    a_mean = float(a.mean())
    a_final = float(a[:, -1].mean())
    f_mean = float(((a[:, 0] - a[:, -1]) / (S - 1)).mean()) if S > 1 else 0.0
    return a_mean, a_final, f_mean


def multi_task_acc(results, task):
    """Mean final-stage accuracy over orders that end with `task`"""
    _check_results(results)
    lasts = [r.acc[-1][-1] for r in results if r.order[-1] == task]
    if not lasts:
        raise ValidationError(f"Task '{task}' is never the last task of an order")
    return float(np.mean(lasts))


def single_task_acc(results, task):
    """Mean stage-1 accuracy over orders that start with `task`"""
    _check_results(results)
    firsts = [r.acc[0][0] for r in results if r.order[0] == task]
    if not firsts:
        raise ValidationError(f"Task '{task}' is never the first task of an order")
    return float(np.mean(firsts))


def diff_metric(a_single, a_multi, eps=DIFF_EPS):
    """Headroom-normalized gain with a quadratic penalty on strong baselines, in percent"""
    return (a_multi - a_single) / max(100.0 - a_single, eps) * (1.0 + a_single / 100.0) ** 2 * 100.0


@dataclass
class MetricsTable:
    tasks: List[str]
    per_task: Dict[str, Dict[str, float]]
    aggregates: Dict[str, float]
    label: str = "PHP"

    def row(self, layout="full"):
        task_cols, mean_cols, with_diff = _layout(layout)
        out = {}
        for task in self.tasks:
            for col in task_cols:
                out[f"{task}.{col}"] = self.per_task[task][col]
        for col in mean_cols:
            out[f"mean.{col}"] = self.aggregates[col]
        if with_diff:
            out["Diff"] = self.aggregates["Diff"]
        return out

    def to_frame(self, layout="full"):
        return pd.DataFrame([{"method": self.label, **self.row(layout)}])


def _layout(layout):
    if layout not in LAYOUTS:
        raise ValidationError(f"Unknown report layout '{layout}' (expected one of {list(LAYOUTS)})")
    return LAYOUTS[layout]


def _ordered_tasks(results):
    seen = []
    for r in results:
        for task in r.order:
            if task not in seen:
                seen.append(task)
    return seen


def _or_nan(fn, *args):
    try:
        return fn(*args)
    except ValidationError as e:
        logger.warning(f"⚠️ {e}; reporting NaN")
        return float("nan")


def compute_metrics(results, singles=None, label="PHP"):
    """
    Per-task and aggregate metrics for one method

    `singles` maps task -> A_single from separate baseline runs; without it
    A_single falls back to the stage-1 accuracy of orders starting with the task.
    """
    _check_results(results)
    tasks = _ordered_tasks(results)
    per_task = {}
    for task in tasks:
        if any(r.order[0] == task for r in results):
            a_mean, a_final, f_mean = first_task_stats(results, task)
        else:
            logger.warning(f"⚠️ Task '{task}' is never first; A_mean, A_final and F_mean reported as NaN")
            a_mean = a_final = f_mean = float("nan")
        if singles and task in singles:
            a_single = float(singles[task])
        else:
            a_single = _or_nan(single_task_acc, results, task)
        per_task[task] = {
            "A_mean": a_mean, "A_final": a_final, "F_mean": f_mean,
            "A_single": a_single, "A_multi": _or_nan(multi_task_acc, results, task),
        }

    frame = pd.DataFrame.from_dict(per_task, orient="index")
    aggregates = {col: float(frame[col].mean(skipna=False)) for col in TASK_COLUMNS}
    if math.isnan(aggregates["A_single"]) or math.isnan(aggregates["A_multi"]):
        aggregates["Diff"] = float("nan")
    else:
        aggregates["Diff"] = diff_metric(aggregates["A_single"], aggregates["A_multi"])
    return MetricsTable(tasks=tasks, per_task=per_task, aggregates=aggregates, label=label)


def _rounded(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return round_half_up(value, 2)


def render_report(tables, fmt="csv", layout="full"):
    """Render one or more MetricsTables, one row per method, as CSV or JSON text"""
    if isinstance(tables, MetricsTable):
        tables = [tables]
    if not tables:
        raise ValidationError("Nothing to render: no metrics tables")
    if fmt not in FORMATS:
        raise ValidationError(f"Unknown report format '{fmt}' (expected one of {FORMATS})")

    rows = [{"method": t.label, **{k: _rounded(v) for k, v in t.row(layout).items()}} for t in tables]
    if fmt == "csv":
        frame = pd.DataFrame(rows).astype({k: float for k in rows[0] if k != "method"})
        return frame.to_csv(index=False, float_format="%.2f")
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "layout": layout,
           "columns": list(rows[0]), "rows": rows}
    return json.dumps(doc, indent=2, cls=NumpyEncoder) + "\n"


def parse_report(text, fmt="csv"):
    """Inverse of render_report: {method: {column: value}}"""
    if fmt == "csv":
        frame = pd.read_csv(io.StringIO(text))
        return {str(row["method"]): {k: float(v) for k, v in row.items() if k != "method"}
                for row in frame.to_dict(orient="records")}
    if fmt == "json":
        doc = json.loads(text)
        return {row["method"]: {k: (float("nan") if v is None else float(v)) for k, v in row.items()
                                if k != "method"} for row in doc["rows"]}
    raise ValidationError(f"Unknown report format '{fmt}' (expected one of {FORMATS})")


# ---------------------------------------------------------------------------
# stage tables: one row per (order, stage), one column per task position

def stage_frame(results):
    if not results:
        raise ValidationError("No sequence results to render")
    width = max(len(r.order) for r in results)
    rows = []
    for r in results:
        for s, acc_row in enumerate(r.acc):
            row = {"order": r.label, "stage": s + 1}
            for k in range(width):
                row[f"pos{k + 1}"] = acc_row[k] if k < len(acc_row) else np.nan
            rows.append(row)
    return pd.DataFrame(rows)


def render_stage_tables(results):
    frame = stage_frame(results)
    pos_cols = [c for c in frame.columns if c.startswith("pos")]
    frame[pos_cols] = frame[pos_cols].apply(lambda col: col.map(lambda v: np.nan if pd.isna(v) else round_half_up(v)))
    return frame.to_csv(index=False, float_format="%.2f")


def parse_stage_tables(text):
    frame = pd.read_csv(io.StringIO(text))
    return _results_from_frame(frame)


def load_stage_table(path):
    """Per-order stage table (fixture or rendered) -> list of SequenceResult"""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Stage table not found: {path}")
    return _results_from_frame(pd.read_csv(path))


def _results_from_frame(frame):
    pos_cols = [c for c in frame.columns if c.startswith("pos")]
    results = []
    for label, group in frame.groupby("order", sort=False):
        order = str(label).replace("→", "->").split("->")
        group = group.sort_values("stage")
        acc = [[float(v) for v in row[pos_cols[:s + 1]]] for s, (_, row) in enumerate(group.iterrows())]
        results.append(SequenceResult(order=order, acc=acc).validate())
    return results


def format_stage_tables(results, per_block=3):
    """Markdown rendering: up to `per_block` orders side by side, one block per group"""
    lines = []
    for b in range(0, len(results), per_block):
        block = results[b:b + per_block]
        S = max(len(r.order) for r in block)
        header = ["Stage"] + [r.label.replace("->", "→") + ("" if k == 0 else " ")
                              for r in block for k in range(S)]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for s in range(S):
            cells = [str(s + 1)]
            for r in block:
                row = r.acc[s] if s < len(r.acc) else []
                cells += [f"{round_half_up(row[k]):.2f}" if k < len(row) else "" for k in range(S)]
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    return "\n".join(lines)


def order_comparison(results, singles=None):
    """Per task: single-task accuracy against its final accuracy in each order that ends with it"""
    _check_results(results)
    rows = []
    for task in _ordered_tasks(results):
        a_single = float(singles[task]) if singles and task in singles else _or_nan(single_task_acc, results, task)
        for r in results:
            if r.order[-1] == task:
                rows.append({"task": task, "order": r.label, "A_single": a_single,
                             "A_final_as_last": r.acc[-1][-1], "gain": r.acc[-1][-1] - a_single})
    return pd.DataFrame(rows, columns=["task", "order", "A_single", "A_final_as_last", "gain"])


def ablation_frame(rows):
    """rows: (row number, {component: marker}, MetricsTable) -> ablation table"""
    records = []
    for number, markers, table in rows:
        record = {"row": number, **markers}
        record.update({k: v for k, v in table.row("full").items() if k.startswith("mean.") or k == "Diff"})
        records.append(record)
    columns = ["row", "TMA", "TMDG", "TMI", "mean.A_mean", "mean.A_final", "mean.F_mean",
               "mean.A_single", "mean.A_multi", "Diff"]
    return pd.DataFrame(records)[columns]


def load_printed_table(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Printed table not found: {path}")
    return pd.read_csv(path).set_index("method")


def write_report(results, out_dir, singles=None, label="PHP"):
    """Write every report file for one method; returns the MetricsTable"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = compute_metrics(results, singles=singles, label=label)
    (out_dir / "table1_anti_forgetting.csv").write_text(render_report(table, "csv", "table1"))
    (out_dir / "table2_transfer.csv").write_text(render_report(table, "csv", "table2"))
    (out_dir / "metrics.json").write_text(render_report(table, "json", "full"))
    (out_dir / "stage_tables.csv").write_text(render_stage_tables(results))
    (out_dir / "stage_tables.md").write_text(format_stage_tables(results))
    order_comparison(results, singles).to_csv(out_dir / "order_comparison.csv", index=False, float_format="%.2f")
    logger.info(f"📋 Report written to {out_dir}")
    return table
