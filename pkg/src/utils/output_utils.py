"""
Output utilities for scenario traces, suite summaries and benchmark tables.

Key Functions:
    - save_trace_csv: Per-packet trace of one scenario run
    - save_runs_csv: One row per run of an experiment suite
    - save_summary_json: Aggregate results as JSON
    - save_benchmarks: Benchmark ladder as CSV and JSON
    - create_output_summary: Text block for the console

Usage:
    from src.utils.output_utils import save_trace_csv, save_summary_json

    trace_path = save_trace_csv(result, "outputs/privacy/run_00_padded.csv")
    summary_path = save_summary_json(result.summary(), "outputs/privacy/run_00_padded.json")
"""

import json
from pathlib import Path
from typing import Any, Dict, List

import numpy as np
import pandas as pd

DEFAULT_OUTPUT_DIR = "outputs"


def ensure_output_directory(output_path: str) -> None:
    """
    Ensure the output directory exists, creating parent directories if needed.

    Args:
        output_path: Full path to output file including filename
    """
    Path(output_path).parent.mkdir(parents=True, exist_ok=True)


def _json_default(value: Any):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, (np.ndarray, tuple, set, frozenset)):
        return list(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


def save_trace_csv(result, output_path: str) -> str:
    """
    Save the packet trace of one scenario run.

    CSV Columns:
        - direction: c2s or s2c
        - ts_us: Virtual departure time in microseconds
        - len: Packet wire length in octets
        - types: Frame types carried, semicolon-joined hex
        - kind: INITIAL or ONE_RTT

    Returns:
        str: Absolute path to saved CSV file
    """
    ensure_output_directory(output_path)
    result.trace_frame().to_csv(output_path, index=False)
    return str(Path(output_path).resolve())


def save_runs_csv(rows: List[Dict[str, Any]], output_path: str) -> str:
    """Save one row per suite run; raises ValueError when there is nothing to write."""
    if not rows:
        raise ValueError("No runs to save")
    ensure_output_directory(output_path)
    pd.DataFrame(rows).to_csv(output_path, index=False)
    return str(Path(output_path).resolve())


def save_summary_json(summary: Dict[str, Any], output_path: str) -> str:
    ensure_output_directory(output_path)
    with open(output_path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=_json_default)
    return str(Path(output_path).resolve())


def save_benchmarks(results: Dict[str, Any], output_path: str) -> str:
    """
    Save the benchmark ladder.

    Writes `<output_path>` as JSON and a CSV with the same stem next to it.

    Returns:
        str: Absolute path to the JSON file
    """
    rows = [r.to_dict() for r in results.values()]
    csv_path = str(Path(output_path).with_suffix(".csv"))
    save_runs_csv(rows, csv_path)
    return save_summary_json({"benchmarks": rows}, output_path)


def create_output_summary(title: str, summary: Dict[str, Any]) -> str:
    """
    Create a text summary of a run or suite for the console.

    Nested dicts are flattened one level as `key.sub`.
    """
    lines = ["=" * 60, title.upper(), "=" * 60]
    for key, value in summary.items():
        if isinstance(value, dict):
            for sub, sub_value in value.items():
                lines.append(f"{key}.{sub}: {sub_value}")
        else:
            lines.append(f"{key}: {value}")
    lines.append("=" * 60)
    return "\n".join(lines)


__all__ = [
    "ensure_output_directory",
    "save_trace_csv",
    "save_runs_csv",
    "save_summary_json",
    "save_benchmarks",
    "create_output_summary",
]
