"""
Main AsHmmToolkit class that orchestrates training, scoring, segmentation,
classification, data synthesis and benchmarking.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union

from config import RunConfig, Settings
from data_loader import load_series
from em_trainer import TrainConfig
from errors import DataParseError, InvariantError
from exporters import ReportExporter, provenance_path
from gaussian_hmm import MODEL_TYPE as GAUSSIAN_MODEL_TYPE
from gaussian_hmm import GaussianHmmModel
from inference import log_likelihood, viterbi
from model_core import ContextGraph, KdeAsHmmModel, model_from_dict, save_model
from synthetic_bench import (ALL_VARIANTS, GAUSSIAN_HMM, fit_variant, generate, load_synthetic_spec,
                             predict_class, run_benchmark)

logger = logging.getLogger(__name__)

AnyModel = Union[KdeAsHmmModel, GaussianHmmModel]


@dataclass
class TrainRequest:
    """Configuration for one training run."""
    data_file: str
    out: str
    n_states: int = 3
    p_star: int = 1
    variant: str = "kde-as"
    graph_file: Optional[str] = None
    label_column: Optional[str] = None
    sem_rounds: int = 1
    max_iter: int = 100
    rel_tol: float = 1e-6
    seed: int = 0


@dataclass
class BenchmarkRequest:
    spec_file: str
    out_dir: str
    train_lengths: List[int] = field(default_factory=lambda: [350, 1050])
    n_test: int = 20
    test_length: int = 400
    variants: List[str] = field(default_factory=lambda: list(ALL_VARIANTS))
    sem_rounds: int = 1
    max_iter: int = 100
    rel_tol: float = 1e-6
    seed: int = 0
    plot_data: bool = False


def read_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise DataParseError(f"{path}: file not found")
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise DataParseError(f"{path}: not valid JSON ({e})")


def load_any_model(path: str) -> AnyModel:
    """Load a KDE-AsHMM or Gaussian HMM model file by its model_type field."""
    doc = read_json(path)
    if isinstance(doc, dict) and doc.get("model_type") == GAUSSIAN_MODEL_TYPE:
        return GaussianHmmModel.from_dict(doc)
    return model_from_dict(doc)


def load_graph(path: str) -> ContextGraph:
    return ContextGraph.from_dict(read_json(path))


def sibling_path(path: str, suffix: str) -> str:
    """model.json -> model<suffix>"""
    return os.path.splitext(path)[0] + suffix


class AsHmmToolkit:
    """Runs the command-line operations; every output embeds run provenance."""

    def __init__(self, settings: Optional[Settings] = None, threads: int = 1):
        self.settings = settings or Settings()
        self.threads = threads
        self.exporter = ReportExporter()

    def train(self, request: TrainRequest, run: RunConfig) -> Dict[str, Any]:
        """
        Train a model and write it plus its fit report.

        Returns:
            Dictionary with the model, the fit report and written paths
        """
        run.add_input(request.data_file)
        series = load_series(request.data_file, label_column=request.label_column)
        config = TrainConfig(n_states=request.n_states, p_star=request.p_star, max_iter=request.max_iter,
                             rel_tol=request.rel_tol, seed=request.seed, variant=request.variant,
                             sem_rounds=request.sem_rounds, block_size=self.settings.block_size,
                             threads=self.threads)
        if request.graph_file:
            if request.variant == GAUSSIAN_HMM:
                raise InvariantError("A dependency graph cannot be used with the Gaussian HMM")
            run.add_input(request.graph_file)
            config.graph = load_graph(request.graph_file)
        if request.label_column:
            if request.variant == GAUSSIAN_HMM:
                raise InvariantError("A label column cannot be used with the Gaussian HMM")
            config.label_mapping = self._label_mapping(series.state_labels, request.n_states)

        logger.info("Training %s with %d states on %s", request.variant, request.n_states, request.data_file)
        model, report = fit_variant(series, config, request.variant)
        provenance = run.provenance()
        if isinstance(model, GaussianHmmModel):
            self.exporter.export_json(model.to_dict(provenance), request.out)
        else:
            save_model(model, request.out, provenance)
        report_path = self.exporter.export_fit_report(report, sibling_path(request.out, "_fit.json"), provenance)
        return {"model": model, "report": report, "files": [request.out, report_path]}

    @staticmethod
    def _label_mapping(labels, n_states: int) -> Dict[str, int]:
        distinct = sorted(set(str(v) for v in labels))
        if len(distinct) > n_states:
            raise InvariantError(f"{len(distinct)} distinct labels but only {n_states} states")
        return {label: i for i, label in enumerate(distinct)}

    def evaluate(self, model_file: str, data_file: str, run: RunConfig, out: Optional[str] = None,
                 label_column: Optional[str] = None) -> Dict[str, Any]:
        """Score data_file; the JSON result goes to out or <data stem>_eval.json."""
        run.add_input(model_file)
        run.add_input(data_file)
        model = load_any_model(model_file)
        series = load_series(data_file, label_column=label_column)
        loglik = log_likelihood(model, series)
        n_scored = series.n_rows - model.p_star
        out = out or sibling_path(data_file, "_eval.json")
        self.exporter.export_eval(loglik, n_scored, out, run.provenance())
        return {"loglik": loglik, "n_scored": n_scored, "loglik_per_datum": loglik / n_scored, "files": [out]}

    def segment(self, model_file: str, data_file: str, out: str, run: RunConfig,
                label_column: Optional[str] = None) -> Dict[str, Any]:
        run.add_input(model_file)
        run.add_input(data_file)
        model = load_any_model(model_file)
        path = viterbi(model, load_series(data_file, label_column=label_column))
        self.exporter.export_segmentation(path, model.p_star, out, run.provenance())
        return {"path": path, "files": [out, provenance_path(out)]}

    def classify(self, model_dir: str, data_file: str, run: RunConfig,
                 out: Optional[str] = None) -> Dict[str, Any]:
        """Assign data_file to the class (model file stem) with the largest log-likelihood."""
        if not os.path.isdir(model_dir):
            raise DataParseError(f"{model_dir}: not a directory")
        files = sorted(f for f in os.listdir(model_dir) if f.endswith(".json") and not f.endswith("_fit.json"))
        if not files:
            raise DataParseError(f"{model_dir}: no model files found")
        models = {}
        for name in files:
            path = os.path.join(model_dir, name)
            run.add_input(path)
            models[os.path.splitext(name)[0]] = load_any_model(path)
        run.add_input(data_file)
        predicted, logliks = predict_class(models, load_series(data_file))
        tie = sum(1 for v in logliks.values() if v == logliks[predicted]) > 1
        if out:
            self.exporter.export_classification(predicted, logliks, out, run.provenance(), tie)
        return {"predicted": predicted, "logliks": logliks, "tie": tie, "random_floor": 1.0 / len(models)}

    def synthesize(self, spec_file: str, length: int, seed: int, out: str, run: RunConfig) -> Dict[str, Any]:
        """Write a generated series (out) and its hidden states (out stem + _states.csv)."""
        run.add_input(spec_file)
        spec = load_synthetic_spec(spec_file)
        series = generate(spec, length, seed)
        states_path = sibling_path(out, "_states.csv")
        provenance = run.provenance()
        self.exporter.export_series(series, out, provenance)
        self.exporter.export_states([int(s) for s in series.state_labels], states_path, provenance)
        return {"series": series, "files": [out, states_path],
                "provenance_files": [provenance_path(out), provenance_path(states_path)]}

    def benchmark(self, request: BenchmarkRequest, run: RunConfig) -> Dict[str, Any]:
        run.add_input(request.spec_file)
        spec = load_synthetic_spec(request.spec_file)
        report = run_benchmark(spec, request.train_lengths, request.n_test, request.test_length,
                               request.variants, seed=request.seed, max_iter=request.max_iter,
                               rel_tol=request.rel_tol, sem_rounds=request.sem_rounds,
                               threads=self.threads, block_size=self.settings.block_size)
        files = self.exporter.export_benchmark(report, request.out_dir, run.provenance(), request.plot_data)
        return {"report": report, "files": files}
