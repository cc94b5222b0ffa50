"""Summaries across finished run directories."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import RunConfig, load_config
from .errors import PadlabError


class ReportError(PadlabError):
    pass


@dataclass
class RunRecord:
    path: Path
    cfg: RunConfig
    header: list[str]
    rows: list[list[str]]

    @property
    def name(self) -> str:
        return self.path.name


def read_run(path: str | Path) -> RunRecord:
    p = Path(path)
    cfg_path, metrics_path = p / "config.ini", p / "metrics.csv"
    for f in (cfg_path, metrics_path):
        if not f.is_file():
            raise ReportError(f"incomplete run directory {p}: missing {f.name}")
    cfg = load_config(cfg_path)
    with metrics_path.open(newline="") as fh:
        table = list(csv.reader(fh))
    if not table:
        raise ReportError(f"incomplete run directory {p}: empty metrics.csv")
    return RunRecord(p, cfg, table[0], table[1:])


SUMMARY_KEYS = ("run", "padding", "canvas", "k")
DIFF_HEADER = ("run", "canvas", "k", "baseline", "distance", "accuracy", "baseline_accuracy", "difference")


def summarize(runs: Sequence[RunRecord]) -> dict[str, tuple[list[str], list[list[str]]]]:
    """One table per experiment type: each run's metric rows, prefixed by run identity."""
    tables: dict[str, tuple[list[str], list[list[str]]]] = {}
    for r in runs:
        key = r.cfg.run.experiment
        header = list(SUMMARY_KEYS) + r.header
        if key in tables and tables[key][0] != header:
            raise ReportError(f"runs of {key} have different metric columns")
        ident = [r.name, r.cfg.model.padding, r.cfg.grid.canvas, str(r.cfg.grid.k)]
        tables.setdefault(key, (header, []))[1].extend(ident + row for row in r.rows)
    return tables


def border_differences(runs: Sequence[RunRecord]) -> list[list[str]]:
    """Per-ring accuracy of each unpadded distance-to-border run minus its padded baseline.

    The baseline is the run with padding ``[grid] baseline`` and the same k,
    preferring one on the same canvas.
    """
    dist = [r for r in runs if r.cfg.run.experiment == "dist-to-border"]
    out: list[list[str]] = []
    for r in dist:
        if r.cfg.model.padding != "none":
            continue
        want = r.cfg.grid.baseline
        cands = [b for b in dist if b.cfg.model.padding == want and b.cfg.grid.k == r.cfg.grid.k]
        if not cands:
            raise ReportError(f"{r.name}: no {want}-padded dist-to-border baseline with k={r.cfg.grid.k}")
        same = [b for b in cands if b.cfg.grid.canvas == r.cfg.grid.canvas]
        base = (same or cands)[0]
        base_acc = {row[0]: float(row[2]) for row in base.rows}
        for row in r.rows:
            d, acc = row[0], float(row[2])
            if d not in base_acc:
                raise ReportError(f"baseline {base.name} lacks distance {d}")
            out.append([r.name, r.cfg.grid.canvas, str(r.cfg.grid.k), base.name, d,
                        f"{acc:.6f}", f"{base_acc[d]:.6f}", f"{acc - base_acc[d]:.6f}"])
    return out


def build_report(dirs: Sequence[str | Path]) -> dict[str, tuple[list[str], list[list[str]]]]:
    if not dirs:
        raise ReportError("no run directories given")
    runs = [read_run(d) for d in dirs]
    tables = {f"summary_{k}": v for k, v in summarize(runs).items()}
    if any(r.cfg.run.experiment == "dist-to-border" and r.cfg.model.padding == "none" for r in runs):
        tables["dist_to_border_diff"] = (list(DIFF_HEADER), border_differences(runs))
    return tables


def render(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_report(dirs: Sequence[str | Path], out_dir: str | Path | None = None) -> dict[str, str]:
    """Render every table; write ``<name>.csv`` files when ``out_dir`` is given."""
    rendered = {name: render(*t) for name, t in build_report(dirs).items()}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in rendered.items():
            (out / f"{name}.csv").write_text(text)
    return rendered
