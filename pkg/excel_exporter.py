"""
Excel export functionality for evaluation tables and comparison grids
"""
import os
import logging
from typing import List, Optional, Sequence

from openpyxl import Workbook
from openpyxl.styles import Font, PatternFill, Alignment, Border, Side
from openpyxl.utils import get_column_letter

from ablation import AblationTable
from evaluation import EvalTable

logger = logging.getLogger(__name__)

HEADER_FONT = Font(bold=True, color="FFFFFF", size=12, name="Calibri")
HEADER_FILL = PatternFill(start_color="2F5597", end_color="2F5597", fill_type="solid")
DATA_FONT = Font(size=11, name="Calibri")
MEAN_FONT = Font(bold=True, size=11, name="Calibri")
LIGHT_FILL = PatternFill(start_color="F8F9FA", end_color="F8F9FA", fill_type="solid")
WHITE_FILL = PatternFill(start_color="FFFFFF", end_color="FFFFFF", fill_type="solid")
FAILED_FILL = PatternFill(start_color="F8D7DA", end_color="F8D7DA", fill_type="solid")
CENTER = Alignment(horizontal="center", vertical="center")

THICK_BORDER = Border(
    left=Side(style='thick', color='000000'),
    right=Side(style='thick', color='000000'),
    top=Side(style='thick', color='000000'),
    bottom=Side(style='thick', color='000000')
)
THIN_BORDER = Border(
    left=Side(style='thin', color='CCCCCC'),
    right=Side(style='thin', color='CCCCCC'),
    top=Side(style='thin', color='CCCCCC'),
    bottom=Side(style='thin', color='CCCCCC')
)


def _percent(value: Optional[float]):
    if value is None or value != value:
        return None
    return round(100.0 * value, 2)


class ExcelExporter:
    """Writes EvalTables and ablation grids as styled .xlsx workbooks"""

    def __init__(self, export_dir: str = "exports"):
        self.export_dir = export_dir

    def _add_title_to_sheet(self, ws, title_text, start_row=1, max_col=8):
        """Add a formatted title to the worksheet"""
        end_col = get_column_letter(max(max_col, 1))
        ws.merge_cells(f'A{start_row}:{end_col}{start_row}')

        title_cell = ws.cell(row=start_row, column=1, value=title_text)
        title_cell.font = Font(bold=True, size=16, name="Calibri", color="FFFFFF")
        title_cell.fill = PatternFill(start_color="1F4E79", end_color="1F4E79", fill_type="solid")
        title_cell.alignment = CENTER
        ws.row_dimensions[start_row].height = 28

        return start_row + 1

    def _write_header(self, ws, row: int, headers: Sequence[str]):
        ws.row_dimensions[row].height = 22
        for col, header in enumerate(headers, 1):
            cell = ws.cell(row=row, column=col, value=header)
            cell.font = HEADER_FONT
            cell.fill = HEADER_FILL
            cell.alignment = CENTER
            cell.border = THICK_BORDER

    def _write_row(self, ws, row: int, values: Sequence, fill=None, font=DATA_FONT):
        fill = fill or (LIGHT_FILL if row % 2 == 0 else WHITE_FILL)
        for col, value in enumerate(values, 1):
            cell = ws.cell(row=row, column=col, value=value)
            cell.font = font
            cell.alignment = CENTER
            cell.border = THIN_BORDER
            cell.fill = fill

    def _set_widths(self, ws, count: int, first: int = 22, rest: int = 12):
        for col in range(1, count + 1):
            ws.column_dimensions[get_column_letter(col)].width = first if col == 1 else rest

    def _save(self, wb: Workbook, filename: str) -> str:
        os.makedirs(self.export_dir, exist_ok=True)
        filepath = os.path.join(self.export_dir, filename)
        wb.save(filepath)
        logger.info(f"Excel file exported: {filepath}")
        return filepath

    def export_eval_table(self, table: EvalTable, filename: str = "anymodal_eval.xlsx",
                          title: str = "Anymodal evaluation (mIoU %)") -> str:
        """One row per modality subset with per-class IoU, then the Mean row"""
        wb = Workbook()
        ws = wb.active
        ws.title = "Anymodal"

        headers = ["Subset"] + [f"IoU {k}" for k in range(table.num_classes)] + ["mIoU"]
        row = self._add_title_to_sheet(ws, title, max_col=len(headers))
        self._write_header(ws, row, headers)

        for name, result in table.rows.items():
            row += 1
            self._write_row(ws, row, [name] + [_percent(v) for v in result.iou] + [_percent(result.miou)])

        row += 1
        self._write_row(ws, row, ["Mean"] + [None] * table.num_classes + [_percent(table.mean)], font=MEAN_FONT)
        self._set_widths(ws, len(headers))
        return self._save(wb, filename)

    def export_comparison(self, table: AblationTable, filename: str = "comparison.xlsx",
                          title: str = "Loss combinations (mIoU %)") -> str:
        """Grid of rows x (subsets, Mean) on one sheet and the deltas against the first row on another"""
        wb = Workbook()
        columns: List[str] = table.columns()

        ws = wb.active
        ws.title = "mIoU"
        row = self._add_title_to_sheet(ws, title, max_col=len(columns) + 1)
        self._write_header(ws, row, ["Row"] + columns)
        for entry in table.rows:
            row += 1
            if entry.failed:
                self._write_row(ws, row, [entry.label] + ["failed"] * len(columns), fill=FAILED_FILL)
            else:
                self._write_row(ws, row, [entry.label] + [_percent(table.value(entry, c)) for c in columns])
        self._set_widths(ws, len(columns) + 1)

        deltas = wb.create_sheet("Delta")
        row = self._add_title_to_sheet(deltas, "Difference to the first row (points)", max_col=len(columns) + 1)
        self._write_header(deltas, row, ["Row"] + columns)
        for entry in table.rows:
            row += 1
            values = [_percent(table.delta(entry, c)) for c in columns]
            self._write_row(deltas, row, [entry.label] + values, fill=FAILED_FILL if entry.failed else None)
        self._set_widths(deltas, len(columns) + 1)

        return self._save(wb, filename)
