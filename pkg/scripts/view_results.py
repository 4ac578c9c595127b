#!/usr/bin/env python3
"""
Quick results viewer for simulator runs.
Shows the ensemble summary and verdict table of one results directory.
"""
import sys
from datetime import datetime
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from config import config  # noqa: E402
from utils import reporting  # noqa: E402


def _file_line(label, path):
    stat = path.stat()
    modified = datetime.fromtimestamp(stat.st_mtime)
    print(f"{label:<9}{path.name} ({stat.st_size:,} bytes, modified: {modified.strftime('%Y-%m-%d %H:%M:%S')})")


def view_results(results_dir=None):
    results_dir = Path(results_dir or config.RESULTS_DIR)
    summary_file = results_dir / reporting.SUMMARY_FILE
    verdicts_file = results_dir / reporting.VERDICTS_JSON
    csv_file = results_dir / reporting.TIMESERIES_FILE

    print("Kähler Reduction Results Summary")
    print("=" * 50)
    print(f"Results directory: {results_dir}")
    print()

    if not summary_file.exists() and not verdicts_file.exists():
        print("No results found. Run simulate or verify first.")
        return 1

    if summary_file.exists():
        try:
            data = reporting.read_json(summary_file)
            metrics = data.get("metrics", {})
            seeds = data.get("seeds", {})
            print("Ensemble:")
            print("-" * 30)
            print(f"Run id: {data.get('run_id', 'N/A')}")
            print(f"Trajectories: {metrics.get('ensemble_size', 'N/A')} (seed {seeds.get('master_seed', 'N/A')})")
            print(f"H0 = {metrics.get('H0')}, V0 = {metrics.get('V0')}, tau = {metrics.get('tau')}")
            for outcome in metrics.get("outcomes", []):
                print(f"  level {outcome['level']:+.6g}: {outcome['count']:6d}  ({outcome['frequency']:.4f})")
            print(f"Unresolved: {metrics.get('unresolved', 'N/A')}  Blown up: {metrics.get('blown_up', 'N/A')}")
            print(f"CSV sha256: {data.get('csv_sha256', 'N/A')}")
            print()
        except (OSError, ValueError, KeyError) as e:
            print(f"Error reading summary: {e}")

    if verdicts_file.exists():
        try:
            data = reporting.read_json(verdicts_file)
            overview = data.get("overview", {})
            print("Verdicts:")
            print(reporting.verdict_table(data.get("verdicts", [])))
            print()
            print(f"Passed: {overview.get('passed')}  failed: {overview.get('failed', [])}  "
                  f"inconclusive: {overview.get('inconclusive', [])}")
            print()
        except (OSError, ValueError, KeyError) as e:
            print(f"Error reading verdicts: {e}")

    print("Files available:")
    print("-" * 20)
    for label, path in (("Summary:", summary_file), ("Verdicts:", verdicts_file), ("CSV:", csv_file)):
        if path.exists():
            _file_line(label, path)
    print()
    print(f"Full path to results:\n   {results_dir.absolute()}")
    return 0


if __name__ == "__main__":
    sys.exit(view_results(sys.argv[1] if len(sys.argv) > 1 else None))
