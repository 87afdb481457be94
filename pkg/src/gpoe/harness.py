"""Benchmark harness: data ingestion, experiment grid execution and results.

A run trains one ensemble per strategy and scores every requested fusion rule
on that same ensemble. All learned quantities are fitted on the training split
in standardized units; RMSE is reported in the original target units.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .experts import (
    BallTree,
    BallTreeNode,
    Ensemble,
    EnsembleConfig,
    FitFailure,
    Provenance,
    Strategy,
    train_ensemble,
)
from .fusion import Rule, ensemble_predictions, fuse
from .gp_core import GPExpert, Hyperparams, OptimizerConfig
from .metrics import MetricReport, rmse, smse, snlp

__all__ = [
    "Standardizer",
    "ExperimentConfig",
    "load_csv",
    "write_csv",
    "load_config",
    "run_experiment",
    "run_on_arrays",
    "emit_results",
    "load_results",
    "render_tables",
    "save_ensemble",
    "load_ensemble",
    "FORMAT_VERSION",
]

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _read_table(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: file not found")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file, header row required")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}"
                )
            values = []
            for col, cell in zip(header, row):
                try:
                    value = float(cell)
                except ValueError:
                    raise InputError(
                        f"{path}: row {lineno}, column {col!r}: non-numeric value {cell!r}"
                    )
                if not math.isfinite(value):
                    raise InputError(
                        f"{path}: row {lineno}, column {col!r}: non-finite value {cell!r}"
                    )
                values.append(value)
            rows.append(values)
    if not rows:
        raise InputError(f"{path}: no data rows")
    return header, np.array(rows, dtype=float)


def load_csv(path, target_column: str | None = None, return_header: bool = False):
    """Read a numeric CSV into ``(inputs, targets)``.

    With ``target_column=None`` every column is an input and targets is None.
    """
    header, table = _read_table(path)
    if target_column is None:
        out = (table, None)
        return (*out, header) if return_header else out
    if target_column not in header:
        raise InputError(f"{path}: target column {target_column!r} not in header {header}")
    t = header.index(target_column)
    keep = [i for i in range(len(header)) if i != t]
    if not keep:
        raise InputError(f"{path}: no input columns besides {target_column!r}")
    X, y = table[:, keep], table[:, t]
    if return_header:
        return X, y, [header[i] for i in keep]
    return X, y


def write_csv(path, columns: dict):
    """Write equal-length columns with round-trip exact float formatting."""
    names = list(columns)
    data = [np.asarray(columns[n]).reshape(-1) for n in names]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in zip(*data):
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                             for v in row])


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardizer:
    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: float
    target_std: float
    constant_columns: tuple = ()

    @classmethod
    def fit(cls, X, y) -> "Standardizer":
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        std = X.std(axis=0)
        constant = tuple(int(i) for i in np.flatnonzero(std <= 0))
        std = np.where(std > 0, std, 1.0)
        target_std = float(y.std())
        if target_std <= 0:
            log.warning("constant training targets; target std set to 1")
            target_std = 1.0
        if constant:
            log.warning("constant input columns %s; std set to 1", constant)
        return cls(X.mean(axis=0), std, float(y.mean()), target_std, constant)

    def transform_inputs(self, X):
        return (np.asarray(X, dtype=float) - self.input_mean) / self.input_std

    def inverse_inputs(self, Z):
        return np.asarray(Z, dtype=float) * self.input_std + self.input_mean

    def transform_targets(self, y):
        return (np.asarray(y, dtype=float) - self.target_mean) / self.target_std

    def inverse_targets(self, z):
        return np.asarray(z, dtype=float) * self.target_std + self.target_mean

    def inverse_variance(self, v):
        return np.asarray(v, dtype=float) * self.target_std**2

    def to_dict(self) -> dict:
        return {
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
            "constant_columns": list(self.constant_columns),
        }

    @classmethod
    def from_dict(cls, d) -> "Standardizer":
        return cls(
            np.asarray(d["input_mean"], dtype=float),
            np.asarray(d["input_std"], dtype=float),
            float(d["target_mean"]),
            float(d["target_std"]),
            tuple(d.get("constant_columns", ())),
        )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    train_path: str | None = None
    test_path: str | None = None
    target_column: str = "y"
    strategies: list = field(default_factory=lambda: ["sod", "local", "tree"])
    rules: list = field(default_factory=lambda: ["bagging", "moe", "poe", "gpoe", "tree_gpoe"])
    points_per_expert: int = 256
    num_experts: int = 512
    seed: int = 0
    parallelism: int = 1
    output: str = "results"
    name: str | None = None
    max_iter: int = 200
    gtol: float = 1e-5
    restarts: int = 2

    # keys that do not change any reported number
    RUNTIME_ONLY = ("parallelism", "output")

    def __post_init__(self):
        self.strategies = [Strategy.parse(s) for s in self.strategies]
        self.rules = [Rule.parse(r) for r in self.rules]

    def validate(self, require_files: bool = True):
        if not self.strategies:
            raise InputError("config needs at least one strategy")
        if not self.rules:
            raise InputError("config needs at least one fusion rule")
        if Rule.TREE_GPOE in self.rules and Strategy.TREE not in self.strategies:
            raise InputError("rule tree_gpoe requires strategy tree")
        if require_files:
            for key in ("train_path", "test_path"):
                value = getattr(self, key)
                if value is None or not Path(value).is_file():
                    raise InputError(f"config {key}={value!r} does not name an existing file")
        if self.parallelism < 1:
            raise InputError("parallelism must be at least 1")
        return self

    def ensemble_config(self, strategy) -> EnsembleConfig:
        return EnsembleConfig(
            strategy=Strategy.parse(strategy),
            points_per_expert=self.points_per_expert,
            num_experts=self.num_experts,
            seed=self.seed,
            optimizer=OptimizerConfig(
                max_iter=self.max_iter, gtol=self.gtol, restarts=self.restarts
            ),
        )

    def echo(self) -> dict:
        """Config as plain JSON types, without runtime-only keys."""
        out = {}
        for f in dataclasses.fields(self):
            if f.name in self.RUNTIME_ONLY:
                continue
            value = getattr(self, f.name)
            if f.name in ("strategies", "rules"):
                value = [v.value for v in value]
            out[f.name] = value
        return out

    def dataset_name(self) -> str:
        if self.name:
            return self.name
        if self.train_path:
            return Path(self.train_path).stem
        return "dataset"


def load_config(path, **overrides) -> ExperimentConfig:
    """Read a flat JSON config; unknown keys are rejected.

    Relative data paths resolve against the config file's directory.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"config file {path} not found")
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})")
    if not isinstance(raw, dict):
        raise InputError(f"{path}: config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise InputError(f"{path}: unknown config keys {unknown}")
    for key in ("train_path", "test_path"):
        if raw.get(key) and not Path(raw[key]).is_absolute():
            raw[key] = str(path.parent / raw[key])
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig(**raw)


# ---------------------------------------------------------------------------
# Experiment execution
# ---------------------------------------------------------------------------


def _score(rule, strategy, fused, z_test, y_test, scaler, train_z):
    mean_z = np.asarray(fused.mean, dtype=float)
    finite = np.isfinite(mean_z)
    if fused.has_density:
        finite &= np.isfinite(np.asarray(fused.variance, dtype=float))
    keep = np.flatnonzero(finite)
    if keep.shape[0] < mean_z.shape[0]:
        fused = dataclasses.replace(
            fused,
            mean=mean_z[keep],
            variance=np.asarray(fused.variance)[keep],
            weights=None if fused.weights is None else fused.weights[:, keep],
            components=None if fused.components is None else fused.components.subset(
                (slice(None), keep)
            ),
        )
    nlp = None
    if fused.has_density:
        nlp = snlp(fused, z_test[keep], float(train_z.mean()), float(train_z.var()))
    return MetricReport(
        strategy=strategy.value,
        rule=rule.value,
        smse=smse(mean_z[keep], z_test[keep]),
        snlp=nlp,
        rmse=rmse(scaler.inverse_targets(mean_z[keep]), y_test[keep]),
        n_evaluated=int(keep.shape[0]),
        n_skipped=int(mean_z.shape[0] - keep.shape[0]),
    )


def _fingerprint(ensemble: Ensemble) -> str:
    h = hashlib.sha256()
    for e, p in zip(ensemble.experts, ensemble.provenance):
        h.update(np.asarray(p.subset, dtype=np.int64).tobytes())
        h.update(e.hyper.to_vector().tobytes())
    return h.hexdigest()


def run_on_arrays(config: ExperimentConfig, X_train, y_train, X_test, y_test,
                  dataset_info: dict | None = None) -> dict:
    """Run the experiment grid on in-memory data and return a results document."""
    config.validate(require_files=False)
    scaler = Standardizer.fit(X_train, y_train)
    Z_train = scaler.transform_inputs(X_train)
    z_train = scaler.transform_targets(y_train)
    Z_test = scaler.transform_inputs(X_test)
    z_test = scaler.transform_targets(y_test)
    y_test = np.asarray(y_test, dtype=float)

    records, failures, timings, warnings, fingerprints = [], [], [], [], []
    for strategy in config.strategies:
        rules = [r for r in config.rules if r is not Rule.TREE_GPOE or strategy is Strategy.TREE]
        t0 = time.perf_counter()
        try:
            ensemble = train_ensemble(
                (Z_train, z_train), config.ensemble_config(strategy), config.parallelism
            )
            if len(ensemble) == 0:
                raise InputError("every expert failed to fit")
            t_train = time.perf_counter() - t0
            preds = ensemble_predictions(ensemble, Z_test)
        except Exception as exc:  # one failed cell must not abort the grid
            log.error("strategy %s failed: %s", strategy.value, exc)
            failures.append({"strategy": strategy.value, "rule": None, "error": str(exc)})
            continue
        for f in ensemble.failures:
            failures.append({"strategy": strategy.value, "rule": None,
                             "error": f"expert {f.index}: {f.reason}"})
        warnings.extend(ensemble.warnings)
        fingerprints.append({
            "strategy": strategy.value,
            "num_experts_fitted": len(ensemble),
            "hyperparams_sha256": _fingerprint(ensemble),
        })
        for rule in rules:
            t1 = time.perf_counter()
            try:
                fused = fuse(ensemble, Z_test, rule, preds=preds)
                report = _score(rule, strategy, fused, z_test, y_test, scaler, z_train)
            except Exception as exc:
                log.error("cell %s/%s failed: %s", strategy.value, rule.value, exc)
                failures.append({"strategy": strategy.value, "rule": rule.value,
                                 "error": str(exc)})
                continue
            rec = report.to_dict()
            rec["num_experts_fitted"] = len(ensemble)
            records.append(rec)
            timings.append({
                "strategy": strategy.value,
                "rule": rule.value,
                "train_seconds": t_train,
                "predict_seconds": time.perf_counter() - t1,
            })

    return {
        "format_version": FORMAT_VERSION,
        "dataset": config.dataset_name(),
        "seed": config.seed,
        "config": config.echo(),
        "data": dataset_info or {},
        "records": records,
        "failures": failures,
        "ensembles": fingerprints,
        "optimizer_warnings": len(warnings),
        "timings": timings,
    }


def run_experiment(config: ExperimentConfig) -> dict:
    config.validate()
    X_train, y_train = load_csv(config.train_path, config.target_column)
    X_test, y_test = load_csv(config.test_path, config.target_column)
    if X_train.shape[1] != X_test.shape[1]:
        raise InputError("train and test files have different input columns")
    info = {
        "train_sha256": _sha256(config.train_path),
        "test_sha256": _sha256(config.test_path),
        "n_train": int(X_train.shape[0]),
        "n_test": int(X_test.shape[0]),
        "dim": int(X_train.shape[1]),
    }
    return run_on_arrays(config, X_train, y_train, X_test, y_test, info)


# ---------------------------------------------------------------------------
# Results emission
# ---------------------------------------------------------------------------

_METRICS = (("smse", "SMSE"), ("snlp", "SNLP"), ("rmse", "RMSE"))


def _fmt(value) -> str:
    return "N/A" if value is None else f"{value:.4g}"


def render_tables(results: dict) -> str:
    """Markdown tables laid out with strategies as column groups and rules as
    columns; the best rule of the row is bolded for each metric."""
    records = results["records"]
    strategies = list(dict.fromkeys(r["strategy"] for r in records))
    columns = [(s, r["rule"]) for s in strategies for r in records if r["strategy"] == s]
    lookup = {(r["strategy"], r["rule"]): r for r in records}
    lines = [f"# Results: {results['dataset']} (seed {results['seed']})", ""]
    for key, title in _METRICS:
        values = [lookup[c][key] for c in columns]
        present = [v for v in values if v is not None]
        best = min(present) if present else None
        best_col = values.index(best) if best is not None else None
        lines.append(f"## {title}")
        lines.append("")
        lines.append("| dataset | " + " | ".join(f"{s} {r}" for s, r in columns) + " |")
        lines.append("|---" * (len(columns) + 1) + "|")
        cells = []
        for i, v in enumerate(values):
            text = _fmt(v)
            cells.append(f"**{text}**" if i == best_col else text)
        lines.append(f"| {results['dataset']} | " + " | ".join(cells) + " |")
        lines.append("")
    if results.get("failures"):
        lines.append("## Failures")
        lines.append("")
        for f in results["failures"]:
            lines.append(f"- {f['strategy']}/{f['rule'] or '*'}: {f['error']}")
        lines.append("")
    return "\n".join(lines)


def emit_results(results: dict, path, figures: bool = True) -> dict:
    """Write ``results.json``, ``timings.json``, ``results.md`` and figures
    into directory ``path``. Returns the written paths.

    ``results.json`` carries only quantities that are deterministic given the
    seed; wall-clock timings go to the sidecar file.
    """
    if not results.get("records") and not results.get("failures"):
        raise InputError("nothing to emit: results are empty")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    body = {k: v for k, v in results.items() if k != "timings"}
    written = {}
    written["results"] = out / "results.json"
    written["results"].write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    written["timings"] = out / "timings.json"
    written["timings"].write_text(json.dumps(results.get("timings", []), indent=2) + "\n")
    written["table"] = out / "results.md"
    written["table"].write_text(render_tables(results))
    if figures and results.get("records"):
        from .plotting import plot_results

        written["figures"] = plot_results(results, out / "figures")
    return written


def load_results(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "results.json"
    doc = json.loads(path.read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported results format {doc.get('format_version')}")
    return doc


# ---------------------------------------------------------------------------
# Ensemble persistence
# ---------------------------------------------------------------------------


def save_ensemble(path, ensemble: Ensemble, scaler: Standardizer | None = None,
                  feature_names=None, target_column=None):
    """Store an ensemble as an ``.npz`` archive with a JSON metadata record."""
    arrays = {}
    meta = {
        "format_version": FORMAT_VERSION,
        "strategy": ensemble.strategy.value,
        "num_experts": len(ensemble),
        "experts": [],
        "failures": [
            {"index": f.index, "reason": f.reason, "subset": f.provenance.subset.tolist()}
            for f in ensemble.failures
        ],
        "scaler": None if scaler is None else scaler.to_dict(),
        "feature_names": list(feature_names) if feature_names is not None else None,
        "target_column": target_column,
        "tree": None,
    }
    for i, (e, p) in enumerate(zip(ensemble.experts, ensemble.provenance)):
        key = f"expert_{i:05d}"
        arrays[f"{key}_inputs"] = e.inputs
        arrays[f"{key}_targets"] = e.targets
        arrays[f"{key}_chol"] = e.chol_factor
        arrays[f"{key}_weights"] = e.weight_vector
        arrays[f"{key}_hyper"] = e.hyper.to_vector()
        arrays[f"{key}_subset"] = np.asarray(p.subset, dtype=np.int64)
        meta["experts"].append({
            "name": e.name, "jitter": e.jitter, "node_id": p.node_id, "index": p.index,
        })
    if ensemble.tree is not None:
        nodes = ensemble.tree.nodes
        arrays["tree_centers"] = np.stack([n.center for n in nodes])
        arrays["tree_radii"] = np.array([n.radius for n in nodes])
        arrays["tree_children"] = np.array(
            [n.children if n.children else (-1, -1) for n in nodes], dtype=np.int64
        )
        arrays["tree_depth"] = np.array([n.depth for n in nodes], dtype=np.int64)
        sizes = [n.point_indices.shape[0] for n in nodes]
        arrays["tree_offsets"] = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        arrays["tree_indices"] = np.concatenate([n.point_indices for n in nodes]).astype(np.int64)
        meta["tree"] = {"n_nodes": len(nodes)}
    arrays["meta"] = np.array(json.dumps(meta))
    with Path(path).open("wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_ensemble(path):
    """Inverse of :func:`save_ensemble`; returns ``(ensemble, scaler, meta)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise InputError(f"{path}: unsupported ensemble format {meta.get('format_version')}")
        strategy = Strategy.parse(meta["strategy"])
        experts, provenance = [], []
        for i, em in enumerate(meta["experts"]):
            key = f"expert_{i:05d}"
            experts.append(GPExpert(
                inputs=z[f"{key}_inputs"],
                targets=z[f"{key}_targets"],
                hyper=Hyperparams.from_vector(z[f"{key}_hyper"]),
                chol_factor=z[f"{key}_chol"],
                weight_vector=z[f"{key}_weights"],
                jitter=float(em["jitter"]),
                name=em["name"],
            ))
            provenance.append(Provenance(strategy, z[f"{key}_subset"], em["node_id"], em["index"]))
        tree = None
        if meta["tree"] is not None:
            offsets = z["tree_offsets"]
            indices = z["tree_indices"]
            nodes = []
            for j in range(meta["tree"]["n_nodes"]):
                ch = tuple(int(c) for c in z["tree_children"][j])
                nodes.append(BallTreeNode(
                    z["tree_centers"][j],
                    float(z["tree_radii"][j]),
                    indices[offsets[j]:offsets[j + 1]],
                    None if ch == (-1, -1) else ch,
                    int(z["tree_depth"][j]),
                ))
            tree = BallTree(tuple(nodes))
    failures = tuple(
        FitFailure(f["index"], Provenance(strategy, np.asarray(f["subset"]), None, f["index"]),
                   f["reason"])
        for f in meta["failures"]
    )
    ensemble = Ensemble(tuple(experts), tuple(provenance), strategy, tree, failures)
    scaler = None if meta["scaler"] is None else Standardizer.from_dict(meta["scaler"])
    return ensemble, scaler, meta
