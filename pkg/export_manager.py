"""
Export Manager
==============
Writes and reads run artifacts:
  • Trace CSV  (.csv)   : one row per round, stable header (see round_trace)
  • Summary    (.json)  : experiment summary, NaN stored as null
  • Excel      (.xlsx)  : formatted comparison table with best-row highlighting
  • PDF        (.pdf)   : reportlab comparison report

openpyxl and reportlab are imported lazily so CSV/JSON work without them.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from datetime import date
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Sequence, Union

from config import ReportError
from round_trace import CSV_COLUMNS, RoundTrace

if TYPE_CHECKING:
    from report import ComparisonReport

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Trace CSV
# ---------------------------------------------------------------------------

def write_trace_csv(traces: Sequence[RoundTrace], path: PathLike) -> Path:
    for tr in traces:
        tr.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for tr in traces:
            writer.writerow(tr.to_row())
    logger.info("wrote %s (%d rows)", path, len(traces))
    return path


def read_trace_csv(path: PathLike) -> List[RoundTrace]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS[:11] if c not in (reader.fieldnames or [])]
        if missing:
            raise ReportError(f"{path}: missing trace columns {missing}")
        return [RoundTrace.from_row(row) for row in reader]


# ---------------------------------------------------------------------------
# Summary JSON
# ---------------------------------------------------------------------------

def _jsonable(value: Any) -> Any:
    if isinstance(value, float):
        return None if math.isnan(value) or math.isinf(value) else value
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


def write_summary_json(summary: Dict[str, Any], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_jsonable(summary), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def read_summary_json(path: PathLike) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Excel export
# ---------------------------------------------------------------------------

def _fmt(value: Any, digits: int = 4) -> Any:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    if isinstance(value, float):
        return round(value, digits)
    return value


def export_report_excel(report: "ComparisonReport", filepath: PathLike, title: str = "FSL comparison") -> None:
    """
    Write the comparison table to an Excel workbook.

    Sheet "Comparison" holds one row per (algorithm, gamma); the row with the
    best final rolling accuracy is highlighted.  Sheet "Deltas" holds the
    pairwise differences.
    """
    try:
        import openpyxl
        from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
        from openpyxl.utils import get_column_letter
    except ImportError:
        raise ImportError("openpyxl is required for Excel export.  Run: pip install openpyxl")

    wb = openpyxl.Workbook()
    ws = wb.active
    ws.title = "Comparison"

    BEST_FILL  = PatternFill("solid", fgColor="D8EFD3")
    GREY_FILL  = PatternFill("solid", fgColor="EEF2F6")
    HDR_FILL   = PatternFill("solid", fgColor="1E2530")
    WHITE_FILL = PatternFill("solid", fgColor="FFFFFF")

    thin = Side(border_style="thin", color="B0B0B0")
    border = Border(left=thin, right=thin, top=thin, bottom=thin)
    white_bold  = Font(name="Calibri", bold=True, color="FFFFFF", size=11)
    dark_bold   = Font(name="Calibri", bold=True, color="1E2530", size=14)
    dark_normal = Font(name="Calibri", color="202020", size=10)
    center = Alignment(horizontal="center", vertical="center")

    ws.merge_cells("A1:G1")
    ws["A1"].value = title
    ws["A1"].font = dark_bold
    ws.row_dimensions[1].height = 26

    headers = ["Algorithm", "gamma", "Runs", "Rounds",
               "Final rolling acc", "Rise time", "Final test acc"]
    for col_idx, hdr in enumerate(headers, start=1):
        cell = ws.cell(row=2, column=col_idx, value=hdr)
        cell.fill, cell.font, cell.alignment, cell.border = HDR_FILL, white_bold, center, border

    best = report.best_row()
    for row_idx, row in enumerate(report.rows, start=3):
        fill = BEST_FILL if row is best else (GREY_FILL if row_idx % 2 == 0 else WHITE_FILL)
        values = [row.algorithm, row.gamma, row.runs, row.rounds,
                  _fmt(row.final_rolling_acc), _fmt(row.rise_time), _fmt(row.final_test_acc)]
        for col_idx, value in enumerate(values, start=1):
            cell = ws.cell(row=row_idx, column=col_idx, value=value)
            cell.fill, cell.font, cell.border, cell.alignment = fill, dark_normal, border, center

    for i, w in enumerate([12, 8, 6, 8, 16, 10, 14], start=1):
        ws.column_dimensions[get_column_letter(i)].width = w

    ws2 = wb.create_sheet("Deltas")
    delta_headers = ["A", "B", "Δ rolling acc (A−B)", "Δ rise time (A−B)"]
    for col_idx, hdr in enumerate(delta_headers, start=1):
        cell = ws2.cell(row=1, column=col_idx, value=hdr)
        cell.fill, cell.font, cell.alignment, cell.border = HDR_FILL, white_bold, center, border
    for row_idx, d in enumerate(report.deltas, start=2):
        for col_idx, value in enumerate(
            [d.first, d.second, _fmt(d.accuracy_delta), _fmt(d.rise_time_delta)], start=1
        ):
            cell = ws2.cell(row=row_idx, column=col_idx, value=value)
            cell.font, cell.border = dark_normal, border
    for i, w in enumerate([18, 18, 20, 18], start=1):
        ws2.column_dimensions[get_column_letter(i)].width = w

    wb.save(str(filepath))
    logger.info("wrote %s", filepath)


# ---------------------------------------------------------------------------
# PDF export
# ---------------------------------------------------------------------------

def export_report_pdf(report: "ComparisonReport", filepath: PathLike, title: str = "FSL comparison") -> None:
    """Write the comparison and delta tables to a landscape A4 PDF."""
    try:
        from reportlab.lib import colors
        from reportlab.lib.pagesizes import A4, landscape
        from reportlab.lib.styles import ParagraphStyle, getSampleStyleSheet
        from reportlab.lib.units import cm
        from reportlab.platypus import (
            HRFlowable, Paragraph, SimpleDocTemplate, Spacer, Table, TableStyle,
        )
    except ImportError:
        raise ImportError("reportlab is required for PDF export.  Run: pip install reportlab")

    doc = SimpleDocTemplate(
        str(filepath), pagesize=landscape(A4),
        leftMargin=1.5 * cm, rightMargin=1.5 * cm, topMargin=1.5 * cm, bottomMargin=1.5 * cm,
    )
    styles = getSampleStyleSheet()
    title_style = ParagraphStyle("ReportTitle", parent=styles["Heading1"], fontSize=18,
                                 textColor=colors.HexColor("#1E2530"), spaceAfter=4)
    sub_style = ParagraphStyle("Sub", parent=styles["Normal"], fontSize=10,
                               textColor=colors.HexColor("#606060"), spaceAfter=10)

    best = report.best_row()
    story = [
        Paragraph(title, title_style),
        Paragraph(
            f"Generated: {date.today().strftime('%d %b %Y')}   |   "
            f"Configurations: {len(report.rows)}   |   Rounds: {report.rounds}   |   "
            f"Best: {best.label if best else 'N/A'}",
            sub_style,
        ),
        HRFlowable(width="100%", thickness=1, color=colors.HexColor("#C0C0C0")),
        Spacer(1, 8),
    ]

    base_style = [
        ("BACKGROUND", (0, 0), (-1, 0), colors.HexColor("#1E2530")),
        ("TEXTCOLOR", (0, 0), (-1, 0), colors.white),
        ("FONTNAME", (0, 0), (-1, 0), "Helvetica-Bold"),
        ("FONTNAME", (0, 1), (-1, -1), "Helvetica"),
        ("FONTSIZE", (0, 0), (-1, -1), 9),
        ("ALIGN", (0, 0), (-1, -1), "CENTER"),
        ("ROWBACKGROUNDS", (0, 1), (-1, -1),
         [colors.HexColor("#FFFFFF"), colors.HexColor("#F0F4F8")]),
        ("GRID", (0, 0), (-1, -1), 0.5, colors.HexColor("#C0C0C0")),
    ]

    data = [["Algorithm", "gamma", "Runs", "Final rolling acc", "Rise time", "Final test acc"]]
    for row in report.rows:
        data.append([row.algorithm, f"{row.gamma:g}", str(row.runs),
                     str(_fmt(row.final_rolling_acc)), str(_fmt(row.rise_time)),
                     str(_fmt(row.final_test_acc))])
    style = list(base_style)
    if best is not None:
        i = report.rows.index(best) + 1
        style.append(("BACKGROUND", (0, i), (-1, i), colors.HexColor("#D8EFD3")))
        style.append(("FONTNAME", (0, i), (-1, i), "Helvetica-Bold"))
    tbl = Table(data, repeatRows=1)
    tbl.setStyle(TableStyle(style))
    story.append(tbl)

    if report.deltas:
        story.append(Spacer(1, 14))
        deltas = [["A", "B", "Δ rolling acc", "Δ rise time"]]
        for d in report.deltas:
            deltas.append([d.first, d.second, str(_fmt(d.accuracy_delta)), str(_fmt(d.rise_time_delta))])
        dtbl = Table(deltas, repeatRows=1)
        dtbl.setStyle(TableStyle(base_style))
        story.append(dtbl)

    doc.build(story)
    logger.info("wrote %s", filepath)
