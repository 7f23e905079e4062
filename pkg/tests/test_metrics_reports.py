import logging
import math

import numpy as np
import pytest

from php_av.errors import ValidationError
from php_av.engine.incremental_engine import SequenceResult
from php_av.analysis.metrics_reports import (
    compute_metrics, diff_metric, first_task_stats, multi_task_acc, single_task_acc,
    render_report, parse_report, render_stage_tables, parse_stage_tables, load_stage_table,
    format_stage_tables, order_comparison, ablation_frame, load_printed_table, write_report,
)

TOL = 0.02
# cells whose printed value does not follow from the per-order tables
KNOWN_PRINTED_MISMATCHES = {"Fine-tune": {"AVQA.A_mean", "mean.A_mean"}, "EWC": set()}


@pytest.fixture
def printed(fixtures_dir):
    t1 = load_printed_table(fixtures_dir / "printed_table1.csv")
    t2 = load_printed_table(fixtures_dir / "printed_table2.csv")
    return t1.join(t2)


def fine_tune(fixtures_dir):
    return load_stage_table(fixtures_dir / "per_order_fine_tune.csv")


@pytest.mark.parametrize("key,method", [("fine_tune", "Fine-tune"), ("ewc", "EWC")])
def test_metrics_reproduce_printed_tables(fixtures_dir, printed, key, method):
    table = compute_metrics(load_stage_table(fixtures_dir / f"per_order_{key}.csv"), label=method)
    row = table.row("full")
    off = {col for col in printed.columns if abs(row[col] - printed.loc[method, col]) > TOL}
    assert off == KNOWN_PRINTED_MISMATCHES[method]


def test_fine_tune_hand_values(fixtures_dir):
    results = fine_tune(fixtures_dir)
    a_mean, a_final, f_mean = first_task_stats(results, "AVE")
    assert a_mean == pytest.approx(29.61, abs=1e-9)
    assert a_final == pytest.approx(12.74, abs=1e-9)
    assert f_mean == pytest.approx(22.3625, abs=1e-9)
    assert single_task_acc(results, "AVE") == pytest.approx(57.465, abs=1e-9)
    assert multi_task_acc(results, "AVE") == pytest.approx(18.22, abs=1e-9)
    assert compute_metrics(results).aggregates["Diff"] == pytest.approx(-58.16, abs=TOL)


@pytest.mark.parametrize("a_single,a_multi,expected", [
    (45.83, 45.10, -2.87),
    (62.36, 63.47, 7.78),
    (50.0, 50.0, 0.0),
])
def test_diff_metric_values(a_single, a_multi, expected):
    assert diff_metric(a_single, a_multi) == pytest.approx(expected, abs=0.05)


def test_diff_metric_at_perfect_baseline_is_finite():
    assert diff_metric(100.0, 100.0) == 0.0
    assert diff_metric(100.0, 99.0) == pytest.approx(-400000.0)


def test_diff_metric_sign_and_monotonicity():
    values = [diff_metric(60.0, m) for m in (50.0, 55.0, 60.0, 65.0, 70.0)]
    assert values[0] < 0 and values[2] == 0.0 and values[-1] > 0
    assert all(a < b for a, b in zip(values, values[1:]))


def test_aggregates_are_means_of_task_cells(fixtures_dir):
    table = compute_metrics(fine_tune(fixtures_dir))
    for col in ("A_mean", "A_final", "F_mean", "A_single", "A_multi"):
        assert table.aggregates[col] == pytest.approx(np.mean([table.per_task[t][col] for t in table.tasks]))


def test_duplicated_orders_leave_metrics_unchanged(fixtures_dir):
    results = fine_tune(fixtures_dir)
    once = compute_metrics(results).row("full")
    twice = compute_metrics(results + results).row("full")
    for key in once:
        assert twice[key] == pytest.approx(once[key], abs=1e-9)


def test_singles_override_stage_one(fixtures_dir):
    results = fine_tune(fixtures_dir)
    table = compute_metrics(results, singles={"AVE": 60.0})
    assert table.per_task["AVE"]["A_single"] == 60.0
    assert table.per_task["AVVP"]["A_single"] == pytest.approx(single_task_acc(results, "AVVP"))


def test_four_task_orders(fixtures_dir, caplog):
    results = load_stage_table(fixtures_dir / "per_order_four_task.csv")
    assert [r.stages for r in results] == [4, 4]
    with caplog.at_level(logging.WARNING):
        table = compute_metrics(results)
    assert "never first" in caplog.text
    avs = table.per_task["AVS"]
    assert avs["A_mean"] == pytest.approx(55.665)
    assert avs["A_final"] == pytest.approx(55.51)
    assert avs["F_mean"] == pytest.approx((58.62 - 55.51) / 3)
    assert math.isnan(avs["A_multi"])
    assert table.per_task["AVE"]["A_multi"] == pytest.approx(69.88)
    assert math.isnan(table.per_task["AVQA"]["A_mean"])
    assert math.isnan(table.aggregates["A_mean"])
    assert math.isnan(table.aggregates["Diff"])


def test_empty_and_mixed_inputs_are_rejected(fixtures_dir):
    with pytest.raises(ValidationError):
        compute_metrics([])
    mixed = fine_tune(fixtures_dir) + load_stage_table(fixtures_dir / "per_order_four_task.csv")
    with pytest.raises(ValidationError):
        compute_metrics(mixed)


def test_stage_helpers_need_the_task_in_position(fixtures_dir):
    results = load_stage_table(fixtures_dir / "per_order_four_task.csv")
    with pytest.raises(ValidationError):
        first_task_stats(results, "AVQA")
    with pytest.raises(ValidationError):
        multi_task_acc(results, "AVS")


def test_single_stage_order_has_zero_forgetting():
    results = [SequenceResult(order=["AVE"], acc=[[42.0]])]
    assert first_task_stats(results, "AVE") == (42.0, 42.0, 0.0)


def test_render_rejects_bad_input(fixtures_dir):
    table = compute_metrics(fine_tune(fixtures_dir))
    with pytest.raises(ValidationError):
        render_report([])
    with pytest.raises(ValidationError):
        render_report(table, fmt="xml")
    with pytest.raises(ValidationError):
        render_report(table, layout="table9")


def test_rendered_headers_match_printed_tables(fixtures_dir):
    table = compute_metrics(fine_tune(fixtures_dir), label="Fine-tune")
    for layout, name in (("table1", "printed_table1.csv"), ("table2", "printed_table2.csv")):
        rendered = render_report(table, "csv", layout)
        printed_header = (fixtures_dir / name).read_text().splitlines()[0]
        assert rendered.splitlines()[0] == printed_header


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_rendered_report_parses_back(fixtures_dir, fmt):
    tables = [compute_metrics(load_stage_table(fixtures_dir / f"per_order_{key}.csv"), label=label)
              for key, label in (("fine_tune", "Fine-tune"), ("ewc", "EWC"))]
    parsed = parse_report(render_report(tables, fmt, "full"), fmt)
    assert list(parsed) == ["Fine-tune", "EWC"]
    for table in tables:
        for key, value in table.row("full").items():
            assert parsed[table.label][key] == pytest.approx(value, abs=0.005 + 1e-9)


def test_json_report_writes_nan_as_null(fixtures_dir):
    table = compute_metrics(load_stage_table(fixtures_dir / "per_order_four_task.csv"))
    text = render_report(table, "json", "full")
    assert "NaN" not in text and "null" in text
    assert math.isnan(parse_report(text, "json")["PHP"]["mean.A_mean"])


def test_half_up_rounding_in_reports():
    results = [SequenceResult(order=["AVE", "AVQA"], acc=[[10.125], [10.125, 20.0]]),
               SequenceResult(order=["AVQA", "AVE"], acc=[[30.0], [30.0, 40.0]])]
    text = render_report(compute_metrics(results), "csv", "full")
    assert text.splitlines()[1].startswith("PHP,10.13,")


@pytest.mark.parametrize("name", ["per_order_fine_tune.csv", "per_order_four_task.csv"])
def test_stage_tables_render_exactly(fixtures_dir, name):
    text = (fixtures_dir / name).read_text()
    assert render_stage_tables(load_stage_table(fixtures_dir / name)) == text
    assert render_stage_tables(parse_stage_tables(text)) == text


def test_stage_table_accepts_arrow_labels(tmp_path, fixtures_dir):
    text = (fixtures_dir / "per_order_fine_tune.csv").read_text().replace("->", "→")
    (tmp_path / "arrows.csv").write_text(text)
    results = load_stage_table(tmp_path / "arrows.csv")
    assert results[0].order == ["AVE", "AVVP", "AVQA"]


def test_missing_stage_table(tmp_path):
    with pytest.raises(ValidationError):
        load_stage_table(tmp_path / "absent.csv")


def test_markdown_stage_tables(fixtures_dir):
    lines = format_stage_tables(fine_tune(fixtures_dir)).splitlines()
    assert lines[0].startswith("| Stage | AVE→AVVP→AVQA |")
    assert lines[2].startswith("| 1 | 56.77 |  |  | 58.16 |")
    assert lines[4].startswith("| 3 | 17.79 | 63.01 | 54.18 |")
    assert sum(1 for line in lines if line.startswith("| Stage")) == 2


def test_order_comparison(fixtures_dir):
    frame = order_comparison(fine_tune(fixtures_dir))
    assert list(frame.columns) == ["task", "order", "A_single", "A_final_as_last", "gain"]
    assert len(frame) == 6
    ave = frame[frame.task == "AVE"]
    assert set(ave.order) == {"AVVP->AVQA->AVE", "AVQA->AVVP->AVE"}
    np.testing.assert_allclose(ave.gain, ave.A_final_as_last - 57.465)


def test_ablation_frame_columns(fixtures_dir):
    table = compute_metrics(fine_tune(fixtures_dir))
    frame = ablation_frame([("Row 1", {"TMA": 0, "TMDG": 0, "TMI": 0}, table),
                            ("Row 2", {"TMA": 1, "TMDG": 1, "TMI": 1}, table)])
    printed = (fixtures_dir / "printed_ablation_components.csv").read_text().splitlines()[0]
    assert ",".join(frame.columns) == printed
    assert frame["mean.A_mean"].iloc[0] == pytest.approx(table.aggregates["A_mean"])


def test_write_report_files(tmp_path, fixtures_dir):
    write_report(fine_tune(fixtures_dir), tmp_path, label="Fine-tune")
    names = {p.name for p in tmp_path.iterdir()}
    assert names == {"table1_anti_forgetting.csv", "table2_transfer.csv", "metrics.json",
                     "stage_tables.csv", "stage_tables.md", "order_comparison.csv"}
    assert (tmp_path / "stage_tables.csv").read_text() == (fixtures_dir / "per_order_fine_tune.csv").read_text()
