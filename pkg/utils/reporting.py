"""
Result artifacts for simulator runs.
- Time-series CSV with a fixed header, floats written with repr for replay
- summary.json with outcomes, seeds, artifact flags and the CSV SHA-256
- verdicts.json / verdicts.txt, with a colored table on the console
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

try:
    from termcolor import colored
except Exception:
    def colored(text, *args, **kwargs):  # type: ignore
        return text

CSV_COLUMNS = ["t", "mean_H", "se_H", "mean_V", "se_V", "mean_Q", "bound_V"]
SUMMARY_FILE = "summary.json"
TIMESERIES_FILE = "timeseries.csv"
VERDICTS_JSON = "verdicts.json"
VERDICTS_TEXT = "verdicts.txt"
GEOMETRY_FILE = "geometry.json"
IDENTITIES_FILE = "identities.json"

STATUS_COLORS = {"pass": "green", "fail": "red", "inconclusive": "yellow", "not_applicable": "cyan"}


def format_ts(dt: datetime) -> str:
    """ISO-8601 in UTC with millisecond precision."""
    return dt.astimezone(timezone.utc).isoformat(timespec="milliseconds")


def utc_now() -> str:
    return format_ts(datetime.now(timezone.utc))


def sha256_file(path) -> Optional[str]:
    try:
        h = hashlib.sha256()
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(8192), b""):
                h.update(chunk)
        return h.hexdigest()
    except OSError:
        return None


def _cell(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_timeseries_csv(path, rows: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row[k]) for k in CSV_COLUMNS})
    return path


def read_timeseries_csv(path) -> List[Dict[str, float]]:
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _clean(value: Any) -> Any:
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "tolist"):
        return _clean(value.tolist())
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_json(path, payload: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(dict(payload)), indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")
    return path


def read_json(path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def build_summary(metrics: Mapping[str, Any], csv_path, run_id: str, scenario: Mapping[str, Any],
                  seeds: Mapping[str, Any], artifact_flags: Mapping[str, Any],
                  started: datetime, finished: datetime) -> Dict[str, Any]:
    return {
        "run_id": run_id,
        "metrics": dict(metrics),
        "csv_path": str(csv_path),
        "csv_sha256": sha256_file(csv_path),
        "seeds": dict(seeds),
        "artifact_flags": dict(artifact_flags),
        "scenario": dict(scenario),
        "started": format_ts(started),
        "finished": format_ts(finished),
        "tz": "UTC",
    }


def verdict_table(verdicts: Sequence[Mapping[str, Any]], color: bool = True) -> str:
    width = max([len(v["name"]) for v in verdicts] + [7])
    lines = [f"{'verdict'.ljust(width)}  {'status':<15} {'statistic':>10}  narrative", "-" * (width + 60)]
    for v in verdicts:
        stat = v.get("statistic")
        stat_text = "-" if stat is None else f"{stat:10.4g}"
        status = v["status"]
        label = f"{status:<15}"
        if color:
            label = colored(label, STATUS_COLORS.get(status, "white"))
        lines.append(f"{v['name'].ljust(width)}  {label} {stat_text:>10}  {v.get('narrative', '')}")
    return "\n".join(lines)


def write_verdicts(out_dir, verdicts: Sequence[Mapping[str, Any]], overview: Mapping[str, Any],
                   formats: Sequence[str]) -> List[Path]:
    out_dir = Path(out_dir)
    written: List[Path] = []
    if "json" in formats:
        written.append(write_json(out_dir / VERDICTS_JSON, {"overview": overview, "verdicts": list(verdicts)}))
    if "text" in formats:
        path = out_dir / VERDICTS_TEXT
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(verdict_table(verdicts, color=False) + "\n", encoding="utf-8")
        written.append(path)
    return written
