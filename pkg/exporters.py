"""
Export module for writing models, fit reports, scores, segmentations and
benchmark tables (JSON, CSV and a Markdown summary).
"""

import json
import logging
import os
from dataclasses import asdict, is_dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from jinja2 import ChoiceLoader, DictLoader, Environment, FileSystemLoader

from model_core import TimeSeries

logger = logging.getLogger(__name__)

DEFAULT_BENCHMARK_TEMPLATE = """# Benchmark: {{ report.spec_name }}

Seed {{ report.seed }}, {{ report.n_test }} test series of length {{ report.test_length }}.

| T | variant | mean loglik/datum | std | seconds |
|---|---------|-------------------|-----|---------|
{% for cell in report.cells -%}
| {{ cell.train_length }} | {{ cell.variant }} | {{ "%.4f"|format(cell.mean) }} | {{ "%.4f"|format(cell.std) }} | {{ "%.2f"|format(cell.seconds) }} |
{% endfor %}
{% for note in report.notes %}
- {{ note }}
{% endfor %}
"""


def to_plain(value: Any) -> Any:
    """JSON-ready copy of dataclasses, numpy scalars and arrays."""
    if is_dataclass(value) and not isinstance(value, type):
        return to_plain(asdict(value))
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_plain(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def provenance_path(output_path: str) -> str:
    """seg.csv -> seg.csv.provenance.json"""
    return output_path + ".provenance.json"


class ReportExporter:
    """Writes every file the command-line tool produces."""

    def __init__(self, templates_dir: Optional[str] = None):
        self.templates_dir = templates_dir or os.path.join(os.path.dirname(os.path.abspath(__file__)),
                                                           "templates")
        self.setup_jinja_env()

    def setup_jinja_env(self):
        """Templates from templates_dir, falling back to the built-in benchmark report."""
        self.jinja_env = Environment(
            loader=ChoiceLoader([FileSystemLoader(self.templates_dir),
                                 DictLoader({"benchmark_report.md": DEFAULT_BENCHMARK_TEMPLATE})]),
            autoescape=False,
            keep_trailing_newline=True,
        )

    @staticmethod
    def _ensure_parent(path: str) -> None:
        parent = os.path.dirname(os.path.abspath(path))
        os.makedirs(parent, exist_ok=True)

    def export_json(self, payload: Any, output_path: str) -> str:
        """Write payload as indented JSON; key order is kept as given."""
        self._ensure_parent(output_path)
        with open(output_path, "w", encoding="utf-8") as f:
            json.dump(to_plain(payload), f, indent=2, ensure_ascii=False, allow_nan=True)
            f.write("\n")
        logger.debug("Wrote %s", output_path)
        return output_path

    def export_csv(self, frame: pd.DataFrame, output_path: str,
                   provenance: Optional[Dict[str, Any]] = None) -> str:
        """Write frame; with provenance, also write it to <output_path>.provenance.json."""
        self._ensure_parent(output_path)
        frame.to_csv(output_path, index=False, float_format="%.17g", lineterminator="\n")
        logger.debug("Wrote %s", output_path)
        if provenance is not None:
            self.export_json({"data_file": os.path.basename(output_path), "provenance": provenance},
                             provenance_path(output_path))
        return output_path

    def export_fit_report(self, report, output_path: str, provenance: Dict[str, Any]) -> str:
        return self.export_json({"fit_report": to_plain(report), "provenance": provenance}, output_path)

    def export_eval(self, loglik: float, n_scored: int, output_path: str, provenance: Dict[str, Any]) -> str:
        payload = {"loglik": loglik, "n_scored": n_scored, "loglik_per_datum": loglik / n_scored,
                   "provenance": provenance}
        return self.export_json(payload, output_path)

    def export_segmentation(self, path: Sequence[int], p_star: int, output_path: str,
                            provenance: Optional[Dict[str, Any]] = None) -> str:
        """One row per scored instant: t (series row index) and the decoded state."""
        frame = pd.DataFrame({"t": np.arange(p_star, p_star + len(path)), "state": np.asarray(path)})
        return self.export_csv(frame, output_path, provenance)

    def export_states(self, states: Sequence[int], output_path: str,
                      provenance: Optional[Dict[str, Any]] = None) -> str:
        frame = pd.DataFrame({"t": np.arange(len(states)), "state": np.asarray(states)})
        return self.export_csv(frame, output_path, provenance)

    def export_series(self, series: TimeSeries, output_path: str,
                      provenance: Optional[Dict[str, Any]] = None) -> str:
        return self.export_csv(series.to_frame(), output_path, provenance)

    def export_classification(self, predicted: str, logliks: Dict[str, float], output_path: str,
                              provenance: Dict[str, Any], tie: bool = False) -> str:
        payload = {"predicted": predicted, "logliks": logliks, "tie_broken_lexicographically": tie,
                   "random_floor": 1.0 / len(logliks), "provenance": provenance}
        return self.export_json(payload, output_path)

    def export_benchmark(self, report, output_dir: str, provenance: Dict[str, Any],
                         plot_data: bool = False) -> List[str]:
        """
        Benchmark tables. benchmark.csv / .json / _per_series.csv and the
        plot CSVs are deterministic; timings go to benchmark_timings.csv
        and the Markdown summary. Every CSV gets a provenance sidecar.
        """
        os.makedirs(output_dir, exist_ok=True)
        written = []
        table = pd.DataFrame([{"train_length": c.train_length, "variant": c.variant, "mean": c.mean,
                               "std": c.std, "n_test": c.n_test, "iterations": c.iterations,
                               "n_moves": c.n_moves} for c in report.cells])
        written.append(self.export_csv(table, os.path.join(output_dir, "benchmark.csv"), provenance))

        timings = pd.DataFrame([{"train_length": c.train_length, "variant": c.variant,
                                 "seconds": c.seconds} for c in report.cells])
        written.append(self.export_csv(timings, os.path.join(output_dir, "benchmark_timings.csv"),
                                       provenance))

        per_series = pd.DataFrame([{"train_length": c.train_length, "variant": c.variant,
                                    "test_index": k, "loglik_per_datum": v}
                                   for c in report.cells for k, v in enumerate(c.per_series)])
        written.append(self.export_csv(per_series, os.path.join(output_dir, "benchmark_per_series.csv"),
                                       provenance))

        summary = {
            "spec": report.spec_name,
            "seed": report.seed,
            "n_test": report.n_test,
            "test_length": report.test_length,
            "cells": [{"train_length": c.train_length, "variant": c.variant, "mean": c.mean, "std": c.std}
                      for c in report.cells],
            "notes": list(report.notes),
            "provenance": provenance,
        }
        written.append(self.export_json(summary, os.path.join(output_dir, "benchmark.json")))

        template = self.jinja_env.get_template("benchmark_report.md")
        md_path = os.path.join(output_dir, "benchmark_report.md")
        with open(md_path, "w", encoding="utf-8") as f:
            f.write(template.render(report=report))
        written.append(md_path)

        if plot_data:
            for column, name in (("mean", "plot_mean_loglik.csv"), ("std", "plot_std_loglik.csv")):
                pivot = table.pivot(index="train_length", columns="variant", values=column)
                pivot = pivot[[v for v in report.variants if v in pivot.columns]].reset_index()
                written.append(self.export_csv(pivot, os.path.join(output_dir, name), provenance))
        logger.info("Benchmark outputs written to %s", output_dir)
        return written
