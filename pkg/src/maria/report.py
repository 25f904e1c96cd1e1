"""Result tables: rows are fusion x model x imputer, columns train rate x test rate.

The best value of every column is bolded (``**90.94**``); ties go to the
first row in declared order. Cells without a result render as an em dash.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .masking import OMEGA

MISSING_CELL = "—"
FUSION_LABELS = {"early": "Early", "intermediate": "Intermediate", "late": "Late"}
IMPUTER_LABELS = {"none": "without", "knn": "with"}
SCENARIO_LABELS = {"missing_modalities": "missing modalities", "all_missing": "all missing"}


def rate_label(rate) -> str:
    if rate == OMEGA:
        return "Ω"
    return f"{float(rate) * 100:g}%"


def _row_of(r: dict) -> tuple[str, str, str]:
    imputer = IMPUTER_LABELS.get(r["imputer"], r["imputer"])
    return (r["fusion"], r["model"], imputer)


def _rkey(rate) -> str:
    return OMEGA if rate == OMEGA else f"{float(rate):.4f}"


def _rsort(rate):
    return -1.0 if rate == OMEGA else float(rate)


@dataclass
class ReportTable:
    metric: str
    scenario: str
    rows: list[tuple[str, str, str]]
    train_rates: list
    test_rates: list
    values: list[list[float | None]]

    @property
    def columns(self) -> list[tuple]:
        return [(tr, te) for tr in self.train_rates for te in self.test_rates]

    def bold(self) -> list[list[bool]]:
        """Exactly one bold cell per column that has any value."""
        flags = [[False] * len(self.columns) for _ in self.rows]
        for c in range(len(self.columns)):
            best, best_row = None, None
            for r, row in enumerate(self.values):
                v = row[c]
                if v is not None and (best is None or v > best):
                    best, best_row = v, r
            if best_row is not None:
                flags[best_row][c] = True
        return flags

    def _cell(self, r: int, c: int, bold: list[list[bool]]) -> str:
        v = self.values[r][c]
        if v is None:
            return MISSING_CELL
        s = f"{v * 100:.2f}"
        return f"**{s}**" if bold[r][c] else s

    def header_rows(self) -> list[list[str]]:
        top = [self.metric.upper(), "", ""]
        sub = ["Fusion Strategy", "Model", "Imputer"]
        for tr in self.train_rates:
            for i, te in enumerate(self.test_rates):
                top.append(f"Train {rate_label(tr)}" if i == 0 else "")
                sub.append(f"Test {rate_label(te)}")
        return [top, sub]

    def body_rows(self) -> list[list[str]]:
        bold = self.bold()
        out, last = [], None
        for r, (fusion, model, imputer) in enumerate(self.rows):
            label = FUSION_LABELS.get(fusion, fusion) if fusion != last else ""
            last = fusion
            out.append([label, model, imputer] + [self._cell(r, c, bold) for c in range(len(self.columns))])
        return out

    def to_text(self) -> str:
        grid = self.header_rows() + self.body_rows()
        widths = [max(len(row[i]) for row in grid) for i in range(len(grid[0]))]
        lines = [f"# {self.metric.upper()} | scenario: {SCENARIO_LABELS.get(self.scenario, self.scenario)}"]
        for k, row in enumerate(grid):
            cells = [row[i].ljust(widths[i]) if i < 3 else row[i].rjust(widths[i]) for i in range(len(row))]
            lines.append(" | ".join(cells).rstrip())
            if k == 1:
                lines.append("-+-".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.header_rows() + self.body_rows():
            w.writerow(row)
        return buf.getvalue()


def build_tables(records: list[dict], rows_order: list[tuple] | None = None,
                 metrics=("auc", "mcc")) -> list[ReportTable]:
    """Aggregate cell-fold records into one table per (scenario, metric).

    A cell's value is the mean over its fold records; any skipped fold makes
    the whole cell missing.
    """
    records = [r for r in records if r.get("type", "result") == "result"]
    scenarios = list(dict.fromkeys(r["scenario"] for r in records))
    rows = list(rows_order) if rows_order else list(
        dict.fromkeys(_row_of(r) for r in records))
    rows = [tuple(r) for r in rows]
    tables = []
    for scenario in scenarios:
        recs = [r for r in records if r["scenario"] == scenario]
        trains = sorted({_rkey(r["train_rate"]): r["train_rate"] for r in recs}.values(), key=_rsort)
        tests = sorted({_rkey(r["test_rate"]): r["test_rate"] for r in recs}.values(), key=_rsort)
        cells: dict[tuple, list[dict]] = {}
        for r in recs:
            key = (_row_of(r), _rkey(r["train_rate"]), _rkey(r["test_rate"]))
            cells.setdefault(key, []).append(r)
        for metric in metrics:
            values = []
            for row in rows:
                line = []
                for tr in trains:
                    for te in tests:
                        group = cells.get((row, _rkey(tr), _rkey(te)), [])
                        ok = group and all(g.get("status", "ok") == "ok" and g.get(metric) is not None
                                           for g in group)
                        line.append(float(np.mean([g[metric] for g in group])) if ok else None)
                values.append(line)
            tables.append(ReportTable(metric, scenario, rows, trains, tests, values))
    return tables


def read_records(path) -> tuple[dict, list[dict]]:
    """Read a JSON-lines grid record file; returns ``(meta, results)``."""
    meta, results = {}, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("type") == "meta":
            meta = rec
        else:
            results.append(rec)
    return meta, results


def write_tables(tables: list[ReportTable], out_dir, header: str = "") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in tables:
        stem = f"report_{t.scenario}_{t.metric}"
        txt, csv_path = out / f"{stem}.txt", out / f"{stem}.csv"
        txt.write_text(header + t.to_text(), encoding="utf-8")
        # provenance goes in leading '#' lines; csv readers can skip them with comment="#"
        csv_path.write_text(header + t.to_csv(), encoding="utf-8")
        paths += [txt, csv_path]
    return paths
