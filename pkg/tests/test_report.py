import math

import pytest

from config import Algorithm, ReportError
from export_manager import write_trace_csv
from report import (
    LabeledTrace, compare_report, group_rows, load_trace_dir, parse_trace_name, trace_filename,
)
from round_trace import RoundTrace


def _trace(accs, window=2):
    rows = []
    for t, acc in enumerate(accs):
        chunk = accs[max(0, t + 1 - window): t + 1]
        rows.append(RoundTrace(round=t, test_acc=acc, rolling_acc=sum(chunk) / len(chunk)))
    return rows


def _run(algo, gamma, seed, accs):
    return LabeledTrace(Algorithm.parse(algo), gamma, seed, _trace(accs))


# ---------------------------------------------------------------------------
# File names
# ---------------------------------------------------------------------------

def test_trace_file_names():
    name = trace_filename(Algorithm.FSL, 1.5, 2)
    assert name == "trace_FSL_gamma1.5_seed2.csv"
    assert parse_trace_name(name) == (Algorithm.FSL, 1.5, 2)
    assert parse_trace_name("trace_FedAvg_gamma0_seed10.csv") == (Algorithm.FEDAVG, 0.0, 10)
    with pytest.raises(ReportError):
        parse_trace_name("summary.json")


# ---------------------------------------------------------------------------
# Rows & deltas
# ---------------------------------------------------------------------------

def test_identical_traces_have_zero_deltas():
    accs = [0.2, 0.5, 0.8, 0.9]
    report = compare_report([_run("FSL", 1.0, 0, accs), _run("FedAvg", 0.0, 0, accs)])
    (delta,) = report.deltas
    assert delta.accuracy_delta == 0.0
    assert delta.rise_time_delta == 0


def test_rows_are_grouped_by_algorithm_and_gamma():
    runs = [
        _run("FedAvg", 0.0, 0, [0.1, 0.2, 0.3]),
        _run("FSL", 1.5, 0, [0.3, 0.6, 0.9]),
        _run("FSL", 0.5, 0, [0.2, 0.5, 0.7]),
        _run("FSL", 0.5, 1, [0.4, 0.5, 0.9]),
    ]
    report = compare_report(runs)
    assert [r.label for r in report.rows] == ["FSL(gamma=0.5)", "FSL(gamma=1.5)", "FedAvg"]
    row = report.row("FSL", 0.5)
    assert row.runs == 2 and row.seeds == [0, 1]
    assert row.final_rolling_acc == pytest.approx((0.6 + 0.7) / 2)
    assert row.final_test_acc == pytest.approx(0.8)
    assert report.best_row().label == "FSL(gamma=1.5)"
    assert len(report.deltas) == 3


def test_rise_time_comes_from_the_seed_mean_curve():
    rows, rounds = group_rows([
        _run("FSL", 1.0, 0, [0.0, 1.0, 1.0, 1.0]),
        _run("FSL", 1.0, 1, [0.0, 0.0, 0.0, 1.0]),
    ])
    assert rounds == 4
    # mean rolling curve: 0, 0.25, 0.5, 0.75 -> first value >= 0.675 at round 3
    assert rows[0].rise_time == 3


def test_deltas_compare_first_minus_second():
    report = compare_report([_run("FSL", 1.0, 0, [0.9, 0.9, 0.9]), _run("FedAvg", 0.0, 0, [0.1, 0.2, 0.6])])
    (delta,) = report.deltas
    assert (delta.first, delta.second) == ("FSL(gamma=1)", "FedAvg")
    assert delta.accuracy_delta == pytest.approx(0.9 - 0.4)
    assert delta.rise_time_delta == 0 - 2


def test_report_needs_two_traces_of_equal_length():
    with pytest.raises(ReportError):
        compare_report([_run("FSL", 1.0, 0, [0.5])])
    with pytest.raises(ReportError, match="mismatched"):
        compare_report([_run("FSL", 1.0, 0, [0.5, 0.6]), _run("FedAvg", 0.0, 0, [0.5])])
    with pytest.raises(ReportError):
        group_rows([])


def test_nan_accuracy_gives_no_rise_time():
    rows, _ = group_rows([LabeledTrace(Algorithm.FSL, 1.0, 0, [RoundTrace(round=0)])])
    assert math.isnan(rows[0].final_rolling_acc)
    assert rows[0].rise_time is None


def test_text_table_lists_every_row():
    report = compare_report([_run("FSL", 1.0, 0, [0.5, 0.9]), _run("DS", 0.0, 0, [0.4, 0.8])])
    text = report.to_text()
    assert "FSL(gamma=1)" in text and "DS" in text
    assert "acc +" in text


# ---------------------------------------------------------------------------
# Directories & exports
# ---------------------------------------------------------------------------

def test_load_trace_dir_reads_only_trace_files(tmp_path):
    write_trace_csv(_trace([0.1, 0.2]), tmp_path / trace_filename(Algorithm.FSL, 1.0, 0))
    write_trace_csv(_trace([0.1, 0.3]), tmp_path / trace_filename(Algorithm.FEDAVG, 0.0, 0))
    (tmp_path / "summary.json").write_text("{}")
    runs = load_trace_dir(tmp_path)
    assert [(r.algorithm, r.seed, r.rounds) for r in runs] == [
        (Algorithm.FSL, 0, 2), (Algorithm.FEDAVG, 0, 2),
    ]
    with pytest.raises(ReportError):
        load_trace_dir(tmp_path / "missing")


def test_excel_export(tmp_path):
    openpyxl = pytest.importorskip("openpyxl")
    import export_manager

    report = compare_report([_run("FSL", 1.0, 0, [0.5, 0.9]), _run("FedAvg", 0.0, 0, [0.4, 0.6])])
    path = tmp_path / "cmp.xlsx"
    export_manager.export_report_excel(report, path)
    wb = openpyxl.load_workbook(path)
    assert wb.sheetnames == ["Comparison", "Deltas"]
    assert wb["Comparison"]["A3"].value == "FSL"
    assert wb["Deltas"]["A2"].value == "FSL(gamma=1)"


def test_pdf_export(tmp_path):
    pytest.importorskip("reportlab")
    import export_manager

    report = compare_report([_run("FSL", 1.0, 0, [0.5, 0.9]), _run("FedAvg", 0.0, 0, [0.4, 0.6])])
    path = tmp_path / "cmp.pdf"
    export_manager.export_report_pdf(report, path)
    assert path.read_bytes().startswith(b"%PDF")
