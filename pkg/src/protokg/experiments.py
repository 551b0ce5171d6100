"""Sweeps over training data size, single-category imbalance, lambda and ablations.

Every setting retrains from scratch with the same seed; validation and test
records are never subsampled.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .encoding import Encoder
from .errors import InvalidInput, UnknownCategory
from .fusion import UnifiedGraph
from .metrics import METRICS, EvalReport
from .model import Hyperparams, derive_seed
from .patient import PatientRecord
from .pipeline import fit

KINDS = ("data_scaling", "single_class_imbalance", "lambda_sweep", "ablation")

DEFAULT_VALUES = {
    "data_scaling": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
    "single_class_imbalance": [0.0, 0.3, 0.5, 0.7, 1.0],
    "lambda_sweep": [0.0, 0.1, 0.5, 1.0, 2.0],
    "ablation": ["full", "wo_sc", "wo_pk"],
}

ABLATIONS = {
    "full": {},
    "wo_sc": {"lam": 0.0},
    "wo_pk": {"prototype_mode": "random"},
}


def subsample(records: Sequence[PatientRecord], fraction: float, seed: int,
              keep: Callable[[PatientRecord], bool] | None = None) -> list[PatientRecord]:
    """Keep round(fraction * n) records of every label, chosen by a seeded permutation.

    Records for which ``keep`` returns True are never dropped. Original order is preserved.
    """
    if not 0.0 <= fraction <= 1.0:
        raise InvalidInput("fraction must lie in [0, 1]")
    rng = np.random.default_rng(derive_seed(seed, "subsample"))
    by_label: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        if keep is not None and keep(r):
            continue
        by_label.setdefault(r.label, []).append(i)
    drop = set()
    for label in sorted(by_label, key=str):
        idx = by_label[label]
        n_keep = int(round(fraction * len(idx)))
        perm = rng.permutation(len(idx))
        drop.update(idx[j] for j in perm[n_keep:])
    return [r for i, r in enumerate(records) if i not in drop]


@dataclass
class SettingResult:
    name: str
    setting: dict
    report: EvalReport
    train_size: int


@dataclass
class ExperimentSeries:
    kind: str
    results: list[SettingResult] = field(default_factory=list)

    def table(self, metrics: Sequence[str] = METRICS) -> str:
        """One row per setting x category, metrics as columns."""
        head = "setting\tcategory\ttrain_size\t" + "\t".join(metrics) + "\n"
        rows = []
        for res in self.results:
            blocks = dict(sorted(res.report.per_category.items()))
            blocks["overall"] = res.report.overall
            for cat, block in blocks.items():
                vals = ["NA" if block.get(m) is None else f"{block[m]:.4f}" for m in metrics]
                rows.append(f"{res.name}\t{cat}\t{res.train_size}\t" + "\t".join(vals) + "\n")
        return head + "".join(rows)

    def dumps(self) -> str:
        payload = {"kind": self.kind,
                   "settings": [{"name": r.name, "setting": r.setting, "train_size": r.train_size,
                                 "report": r.report.to_dict()} for r in self.results]}
        return json.dumps(payload, indent=1, sort_keys=True) + "\n"

    def save(self, directory: str | os.PathLike) -> None:
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, f"{self.kind}.json"), "w", encoding="utf-8") as fh:
            fh.write(self.dumps())
        with open(os.path.join(directory, f"{self.kind}.tsv"), "w", encoding="utf-8") as fh:
            fh.write(self.table())
        for r in self.results:
            r.report.save(os.path.join(directory, f"{self.kind}-{r.name}.json"))


def _settings(kind: str, values, hp: Hyperparams, train: Sequence[PatientRecord], graph: UnifiedGraph,
              target_category: str | None):
    if kind == "data_scaling":
        for frac in values:
            yield f"{int(round(frac * 100))}pct", {"fraction": frac}, hp, subsample(train, frac, hp.seed)
    elif kind == "single_class_imbalance":
        if target_category is None:
            raise InvalidInput("single_class_imbalance needs a target category")
        if target_category not in set(graph.disease_categories.values()):
            raise UnknownCategory(f"no disease in category {target_category!r}")
        outside = lambda r: graph.category_of(r.label) != target_category  # noqa: E731
        for frac in values:
            yield (f"{int(round(frac * 100))}pct", {"category": target_category, "fraction": frac}, hp,
                   subsample(train, frac, hp.seed, keep=outside))
    elif kind == "lambda_sweep":
        for lam in values:
            yield f"lambda={lam:g}", {"lam": lam}, replace(hp, lam=float(lam)), list(train)
    elif kind == "ablation":
        for name in values:
            if name not in ABLATIONS:
                raise InvalidInput(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
            yield name, dict(ABLATIONS[name]), replace(hp, **ABLATIONS[name]), list(train)
    else:
        raise InvalidInput(f"unknown experiment kind {kind!r}; choose from {KINDS}")


def run_experiment(kind: str, graph: UnifiedGraph, encoder: Encoder, hp: Hyperparams,
                   train: Sequence[PatientRecord], valid: Sequence[PatientRecord],
                   test: Sequence[PatientRecord], values=None, target_category: str | None = None,
                   on_setting: Callable[[SettingResult], None] | None = None) -> ExperimentSeries:
    """Train and evaluate once per setting; returns one EvalReport per setting."""
    values = list(DEFAULT_VALUES.get(kind, []) if values is None else values)
    series = ExperimentSeries(kind)
    for name, setting, shp, sub in _settings(kind, values, hp, train, graph, target_category):
        if not sub:
            raise InvalidInput(f"setting {name} leaves no training records")
        fitted = fit(graph, encoder, shp, sub, valid)
        report = fitted.evaluate(test, setting={"kind": kind, **setting})
        res = SettingResult(name, setting, report, len(sub))
        series.results.append(res)
        if on_setting:
            on_setting(res)
    return series
