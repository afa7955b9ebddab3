"""
UI Helper Functions
Console rendering of evaluation tables, comparison grids and loss reports
"""
from typing import List, Optional, Sequence

from ablation import AblationTable
from distill_losses import LossReport
from evaluation import EvalTable


def _cell(value: Optional[float], signed: bool = False) -> str:
    if value is None or value != value:
        return '-'
    return f"{100 * value:+.2f}" if signed else f"{100 * value:.2f}"


class MessageFormatter:
    """Helper class for formatting console output"""

    @staticmethod
    def format_grid(headers: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
        """
        Align columns of a plain-text table

        Args:
            headers: Column titles
            rows: Cell strings, one list per row

        Returns:
            Table with a dashed rule under the header
        """
        widths = [len(h) for h in headers]
        for row in rows:
            widths = [max(w, len(c)) for w, c in zip(widths, row)]
        lines = ['  '.join(h.rjust(w) for h, w in zip(headers, widths)),
                 '  '.join('-' * w for w in widths)]
        lines += ['  '.join(c.rjust(w) for c, w in zip(row, widths)) for row in rows]
        return '\n'.join(lines)

    @staticmethod
    def format_eval_table(table: EvalTable) -> str:
        """Subsets as columns, mIoU in percent, Mean last"""
        headers = table.names() + ['Mean']
        values = [_cell(table.miou(n)) for n in table.names()] + [_cell(table.mean)]
        return MessageFormatter.format_grid(headers, [values])

    @staticmethod
    def format_comparison(table: AblationTable) -> str:
        columns = table.columns()
        rows: List[List[str]] = []
        for row in table.rows:
            if row.failed:
                rows.append([row.label] + ['failed'] * len(columns) + ['-'])
                continue
            rows.append([row.label] + [_cell(table.value(row, c)) for c in columns]
                        + [_cell(table.delta(row), signed=True)])
        return MessageFormatter.format_grid(['Row'] + columns + ['Delta'], rows)

    @staticmethod
    def format_loss_report(report: LossReport) -> str:
        text = (f"total {report.total:.4f} = sup {report.sup:.4f} + mad {report.mad:.4f} "
                f"+ umd {report.umd:.4f} + cmd {report.cmd:.4f} + fused {report.fused:.4f} (unweighted terms)")
        if report.cmd_pairs:
            pairs = ', '.join(f"{k} {v:.4f}" for k, v in sorted(report.cmd_pairs.items()))
            text += f"\n  cmd pairs: {pairs}"
        return text

