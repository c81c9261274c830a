"""CSV/JSON report writers that refuse to clobber existing files."""

from __future__ import annotations

import csv
import io
import logging
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from pydantic import BaseModel

from highway_lab.errors import ReportExistsError

log = logging.getLogger(__name__)


def report_name(command: str | None, *parts: object, ext: str) -> str:
    """``<command>_<part>_<part>.<ext>``; train reports pass no command."""
    stem = "_".join(str(p) for p in ((command,) if command else ()) + parts)
    return f"{stem}.{ext}"


def ensure_free(paths: Iterable[Path], *, force: bool) -> None:
    """Refuse before any work starts if one of several outputs is already taken."""
    for path in paths:
        if path.exists() and not force:
            raise ReportExistsError(f"{path} already exists; pass --force to overwrite")


def _claim(path: Path, force: bool) -> Path:
    ensure_free([path], force=force)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def csv_text(rows: Iterable[Mapping[str, object]], header: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(header), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def write_csv(path: str | Path, rows: Iterable[Mapping[str, object]], header: Sequence[str],
              *, force: bool = False) -> Path:
    rows = list(rows)
    target = _claim(Path(path), force)
    target.write_text(csv_text(rows, header))
    log.info("Saved %s (%d rows)", target, len(rows))
    return target


def write_json(path: str | Path, report: BaseModel, *, force: bool = False) -> Path:
    target = _claim(Path(path), force)
    target.write_text(report.model_dump_json(indent=2))
    log.info("Saved %s", target)
    return target
