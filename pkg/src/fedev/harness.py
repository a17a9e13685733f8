"""Experiment specs, multi-seed execution and metrics files.

A spec is a TOML document with one table per concern::

    schema_version = "1"
    name = "ev_reco"

    [dataset]     synthetic generator or a CSV table
    [partition]   how train samples are split among clients
    [federation]  rounds, local epochs, optimizer, mode
    [active]      strategy, initial labeled fraction, annotation behavior
    [loss]        alignment weight and temperature
    [fams]        freeze/awaken/subset settings
    [run]         seeds and output directory

Missing keys take the defaults of the section dataclasses below; unknown
keys are rejected with their full key path.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import platform
import tempfile
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import tomli
import tomli_w

from . import __version__, kernels
from .acquisition import Strategy
from .data import Dataset, PartitionSpec, init_labeled, load_csv, make_synthetic, partition
from .errors import ConfigurationError, FedEVError
from .fams import FamsConfig
from .federation import FederationConfig, RoundRecord, abco_profiles, reco_profiles, run
from .model import LossConfig

SCHEMA_VERSION = "1"
METRICS_HEADER = ("round", "accuracy", "mean_ev", "inference_count", "labeled_total", "wall_ms")


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "synthetic"
    path: str | None = None
    num_classes: int = 6
    per_class: int = 625
    dim: int = 6
    spread: float = 0.15
    clusters_per_class: int = 3
    minor_weight: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class PartitionSection:
    kind: str = "classes"
    num_clients: int = 10
    classes_per_client: int | None = 2
    alpha: float | None = None
    seed: int = 0


@dataclass(frozen=True)
class FederationSection:
    rounds: int = 60
    local_epochs: int = 5
    lr: float = 0.05
    batch_size: int = 10
    mode: str = "fal_per_round"
    interval: int = 1
    reset: str = "continual"
    isolated: bool = False
    hidden_dim: int = 32
    feature_dim: int = 16
    init_scale: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class ActiveSection:
    strategy: str = "ev"
    init_fraction: float = 0.04
    behavior: str = "reco"
    budget: int = 10
    score_on: str = "local"


@dataclass(frozen=True)
class LossSection:
    mu: float = 0.1
    tau: float = 0.5


@dataclass(frozen=True)
class FamsSection:
    enabled: bool = True
    subset_size: int = 500
    awaken_ratio: float = 0.4
    awaken_threshold: int | None = None
    awaken_multiplier: int = 3


@dataclass(frozen=True)
class RunSection:
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    record_wall_time: bool = False
    jobs: int = 1


SECTIONS = {
    "dataset": DatasetSection,
    "partition": PartitionSection,
    "federation": FederationSection,
    "active": ActiveSection,
    "loss": LossSection,
    "fams": FamsSection,
    "run": RunSection,
}


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    schema_version: str = SCHEMA_VERSION
    dataset: DatasetSection = DatasetSection()
    partition: PartitionSection = PartitionSection()
    federation: FederationSection = FederationSection()
    active: ActiveSection = ActiveSection()
    loss: LossSection = LossSection()
    fams: FamsSection = FamsSection()
    run: RunSection = RunSection()

    def to_dict(self) -> dict:
        """Plain nested dict; unset optional keys are omitted (TOML has no null)."""
        out: dict[str, Any] = {"schema_version": self.schema_version, "name": self.name}
        for sec in SECTIONS:
            table = dataclasses.asdict(getattr(self, sec))
            out[sec] = {k: v for k, v in table.items() if v is not None}
        return out

    def with_changes(self, **sections) -> "ExperimentSpec":
        """Copy with per-section overrides, e.g. ``with_changes(loss={"mu": 0.0})``."""
        kw: dict[str, Any] = {}
        for key, val in sections.items():
            if key in SECTIONS:
                kw[key] = dataclasses.replace(getattr(self, key), **val)
            else:
                kw[key] = val
        spec = dataclasses.replace(self, **kw)
        validate(spec)
        return spec


# ---------------------------------------------------------------- parsing

def _check_type(value, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _check_type(value, inner, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigurationError(f"{path}: expected a list, got {type(value).__name__}")
        return [_check_type(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported field type {hint}")


def _build_section(cls, table, path: str):
    if not isinstance(table, dict):
        raise ConfigurationError(f"{path}: expected a table")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigurationError(f"unknown key(s): {', '.join(f'{path}.{k}' for k in unknown)}")
    kw = {k: _check_type(v, hints[k], f"{path}.{k}") for k, v in table.items()}
    return cls(**kw)


def spec_from_dict(doc: dict) -> ExperimentSpec:
    allowed = {"schema_version", "name", *SECTIONS}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s): {', '.join(unknown)}")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"schema_version: expected {SCHEMA_VERSION!r}, got {version!r}")
    name = _check_type(doc.get("name", "experiment"), str, "name")
    sections = {sec: _build_section(cls, doc.get(sec, {}), sec) for sec, cls in SECTIONS.items()}
    spec = ExperimentSpec(name=name, schema_version=version, **sections)
    validate(spec)
    return spec


def load_spec(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read spec {path}: {exc}") from exc
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return spec_from_dict(doc)


def dumps_spec(spec: ExperimentSpec) -> str:
    return tomli_w.dumps(spec.to_dict())


def dump_spec(spec: ExperimentSpec, path: str | Path) -> None:
    Path(path).write_text(dumps_spec(spec))


# ---------------------------------------------------------------- validation

def _wrap(path: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ValueError as exc:  # ConfigurationError and enum lookups
        raise ConfigurationError(f"{path}: {exc}") from exc


def validate(spec: ExperimentSpec) -> None:
    """Raise ConfigurationError unless every section describes a runnable experiment."""
    if not spec.name or any(c in spec.name for c in "/\\") or spec.name.startswith("."):
        raise ConfigurationError(f"name: {spec.name!r} is not usable as a file name")
    d = spec.dataset
    if d.kind not in ("synthetic", "csv"):
        raise ConfigurationError(f"dataset.kind: expected 'synthetic' or 'csv', got {d.kind!r}")
    if d.kind == "csv" and not d.path:
        raise ConfigurationError("dataset.path: required when dataset.kind = 'csv'")
    if d.kind == "synthetic":
        for key in ("num_classes", "per_class", "dim", "clusters_per_class"):
            if getattr(d, key) < 1:
                raise ConfigurationError(f"dataset.{key}: must be >= 1")
        if d.num_classes < 2:
            raise ConfigurationError("dataset.num_classes: must be >= 2")
        if d.spread < 0 or not d.minor_weight > 0:
            raise ConfigurationError("dataset.spread must be >= 0 and dataset.minor_weight > 0")
    if not 0.0 < d.test_fraction < 1.0:
        raise ConfigurationError("dataset.test_fraction: must be in (0, 1)")
    p = spec.partition
    _wrap("partition", PartitionSpec, p.kind, p.num_clients, p.classes_per_client, p.alpha, p.seed)
    if p.kind == "classes" and d.kind == "synthetic":
        if p.classes_per_client > d.num_classes:
            raise ConfigurationError("partition.classes_per_client: exceeds dataset.num_classes")
        if p.num_clients * p.classes_per_client < d.num_classes:
            raise ConfigurationError("partition: clients x classes_per_client must cover every class")
    _federation_config(spec, 0)
    a = spec.active
    _wrap("active.strategy", Strategy, a.strategy)
    if a.behavior not in ("abco", "reco"):
        raise ConfigurationError(f"active.behavior: expected 'abco' or 'reco', got {a.behavior!r}")
    if a.score_on not in ("local", "global"):
        raise ConfigurationError(f"active.score_on: expected 'local' or 'global', got {a.score_on!r}")
    if not 0.0 < a.init_fraction < 1.0:
        raise ConfigurationError("active.init_fraction: must be in (0, 1)")
    if a.budget < 0:
        raise ConfigurationError("active.budget: must be >= 0")
    _wrap("loss", LossConfig, spec.loss.mu, spec.loss.tau)
    f = spec.fams
    _wrap("fams", FamsConfig, f.subset_size, f.awaken_ratio, f.awaken_threshold,
          f.awaken_multiplier, f.enabled)
    r = spec.run
    if not r.seeds:
        raise ConfigurationError("run.seeds: at least one seed is required")
    if len(set(r.seeds)) != len(r.seeds):
        raise ConfigurationError("run.seeds: seeds must be distinct")
    if any(s < 0 for s in r.seeds):
        raise ConfigurationError("run.seeds: seeds must be >= 0")
    if r.jobs < 1:
        raise ConfigurationError("run.jobs: must be >= 1")


def _federation_config(spec: ExperimentSpec, seed: int) -> FederationConfig:
    fs = spec.federation
    return _wrap(
        "federation", FederationConfig,
        num_clients=spec.partition.num_clients, rounds=fs.rounds, local_epochs=fs.local_epochs,
        lr=fs.lr, batch_size=fs.batch_size, mode=fs.mode, interval=fs.interval, reset=fs.reset,
        isolated=fs.isolated, seed=fs.seed + seed, hidden_dim=fs.hidden_dim,
        feature_dim=fs.feature_dim, init_scale=fs.init_scale,
        score_on_global=spec.active.score_on == "global",
        record_wall_time=spec.run.record_wall_time,
    )


# ---------------------------------------------------------------- execution

@dataclass
class Prepared:
    """Everything one seeded run needs."""

    cfg: FederationConfig
    data: Dataset
    pools: list
    behaviors: list
    fams: FamsConfig
    loss: LossConfig
    strategy: Strategy


def build_dataset(spec: ExperimentSpec, seed: int) -> Dataset:
    d = spec.dataset
    if d.kind == "csv":
        return load_csv(d.path, seed=d.seed + seed, test_fraction=d.test_fraction)
    return make_synthetic(d.num_classes, d.per_class, d.dim, d.spread, d.seed + seed,
                          d.test_fraction, d.clusters_per_class, d.minor_weight)


def prepare(spec: ExperimentSpec, seed: int) -> Prepared:
    """Resolve a spec and a run seed into concrete inputs.

    The run seed is added to the dataset, partition and federation seeds, so
    every seed gets its own data draw, client split and training randomness.
    """
    data = build_dataset(spec, seed)
    p = spec.partition
    pseed = p.seed + seed
    pools = partition(data, PartitionSpec(p.kind, p.num_clients, p.classes_per_client, p.alpha, pseed))
    pools = [init_labeled(pk, spec.active.init_fraction,
                          int(np.random.SeedSequence([pseed, k]).generate_state(1)[0]))
             for k, pk in enumerate(pools)]
    cfg = _federation_config(spec, seed)
    if spec.active.behavior == "abco":
        behaviors = abco_profiles(p.num_clients, spec.active.budget)
    else:
        behaviors = reco_profiles(p.num_clients, cfg.seed)
    f = spec.fams
    fams = FamsConfig(f.subset_size, f.awaken_ratio, f.awaken_threshold, f.awaken_multiplier, f.enabled)
    return Prepared(cfg, data, pools, behaviors, fams, LossConfig(spec.loss.mu, spec.loss.tau),
                    Strategy(spec.active.strategy))


def run_seed(spec: ExperimentSpec, seed: int) -> list[RoundRecord]:
    p = prepare(spec, seed)
    return run(p.cfg, p.data, p.pools, p.behaviors, p.fams, p.loss, p.strategy)


def metrics_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow([r.round, repr(float(r.global_test_accuracy)), repr(float(r.mean_ev)),
                    r.inference_count, r.labeled_total, r.wall_time_ms])
    return buf.getvalue()


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != METRICS_HEADER:
        raise ConfigurationError(f"{path}: not a metrics file")
    cols = list(zip(*rows[1:])) if len(rows) > 1 else [()] * len(METRICS_HEADER)
    out = {}
    for name, col in zip(METRICS_HEADER, cols):
        kind = float if name in ("accuracy", "mean_ev") else int
        out[name] = np.array([kind(v) for v in col])
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def resolve_output_dir(spec: ExperimentSpec, override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get("FEDEV_OUTPUT_DIR")
    return Path(env) if env else Path(spec.run.output_dir)


def ensure_writable(directory: Path) -> None:
    """Create ``directory`` and prove it accepts files; raises OSError otherwise."""
    directory.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(dir=directory, prefix=".probe-"):
        pass


def _sample_std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if x.size > 1 else 0.0


def summary_rows(name: str, per_seed: dict[int, dict[str, np.ndarray]]) -> list[list]:
    accs = np.stack([m["accuracy"] for m in per_seed.values()])
    evs = np.stack([m["mean_ev"] for m in per_seed.values()])
    rows = []
    for r in range(accs.shape[1]):
        rows.append([name, r, repr(float(np.mean(accs[:, r]))), repr(_sample_std(accs[:, r])),
                     repr(float(np.mean(evs[:, r]))), accs.shape[0]])
    return rows


SUMMARY_HEADER = ("strategy", "round", "accuracy_mean", "accuracy_std", "mean_ev_mean", "n_seeds")


@dataclass
class RunResult:
    directory: Path
    metrics: dict[int, Path]
    summary: Path
    manifest: Path
    records: dict[int, list[RoundRecord]]


def _run_many(spec: ExperimentSpec, seeds: Sequence[int], jobs: int) -> dict[int, list[RoundRecord]]:
    if jobs <= 1 or len(seeds) == 1:
        return {s: run_seed(spec, s) for s in seeds}
    with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
        futures = {s: pool.submit(run_seed, spec, s) for s in seeds}
        return {s: futures[s].result() for s in seeds}


def run_experiment(spec: ExperimentSpec, output_dir: str | Path | None = None,
                   seeds: Iterable[int] | None = None, jobs: int | None = None) -> RunResult:
    """Run every seed and write metrics, a summary and a manifest under ``<output>/<name>/``."""
    seeds = list(spec.run.seeds if seeds is None else seeds)
    if seeds != list(spec.run.seeds):
        spec = spec.with_changes(run={"seeds": seeds})
    root = resolve_output_dir(spec, output_dir) / spec.name
    ensure_writable(root / "metrics")

    records = _run_many(spec, seeds, jobs or spec.run.jobs)

    metric_paths = {}
    parsed = {}
    for s in seeds:
        path = root / "metrics" / f"{spec.name}_seed{s}.csv"
        path.write_text(metrics_csv(records[s]))
        metric_paths[s] = path
        parsed[s] = read_metrics(path)

    summary = root / "summary.csv"
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        w.writerows(summary_rows(spec.name, parsed))

    manifest = root / "manifest.json"
    files = {str(p.relative_to(root)): _sha256(p) for p in [*metric_paths.values(), summary]}
    doc = {
        "spec": spec.to_dict(),
        "fedev_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seeds": seeds,
        "resolved_seeds": {
            str(s): {"dataset": spec.dataset.seed + s, "partition": spec.partition.seed + s,
                     "federation": spec.federation.seed + s} for s in seeds
        },
        "choices": {
            "awakened_ev_history": "reset",
            "tie_break": "smallest_sample_id",
            "aggregation_weights": "labeled_size_at_training",
            "std": "sample (ddof=1); 0 for a single seed",
        },
        "files": files,
    }
    manifest.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return RunResult(root, metric_paths, summary, manifest, records)


# ---------------------------------------------------------------- comparison

_SHARED = ("dataset", "partition", "federation", "fams")


def _shared_view(spec: ExperimentSpec) -> dict:
    d = spec.to_dict()
    view = {k: d[k] for k in _SHARED}
    view["active"] = {k: v for k, v in d["active"].items() if k != "strategy"}
    return view


@dataclass
class Comparison:
    baseline: str
    names: list[str]
    rounds: int
    accuracy: dict[str, np.ndarray]
    mean_ev: dict[str, np.ndarray]
    delta: dict[str, np.ndarray]
    path: Path | None = None

    def final_deltas(self) -> dict[str, float]:
        return {n: float(self.delta[n][-1]) for n in self.names}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["round"]
        for n in self.names:
            header += [f"{n}_accuracy", f"{n}_mean_ev", f"{n}_delta"]
        w.writerow(header)
        for r in range(self.rounds):
            row: list = [r]
            for n in self.names:
                row += [repr(float(self.accuracy[n][r])), repr(float(self.mean_ev[n][r])),
                        repr(float(self.delta[n][r]))]
            w.writerow(row)
        return buf.getvalue()


def compare(specs: Sequence[ExperimentSpec], seeds: Iterable[int] | None = None,
            output_dir: str | Path | None = None, jobs: int | None = None) -> Comparison:
    """Run each spec on the same seeds and tabulate per-round means and deltas.

    Deltas are accuracy differences against the first RANDOM spec, or the
    first spec when none uses RANDOM.
    """
    if not specs:
        raise ConfigurationError("compare needs at least one spec")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"compared specs need distinct names, got {names}")
    ref = _shared_view(specs[0])
    for s in specs[1:]:
        view = _shared_view(s)
        if view != ref:
            diff = sorted(f"{sec}.{k}" for sec in ref for k in set(ref[sec]) | set(view[sec])
                          if ref[sec].get(k) != view[sec].get(k))
            raise ConfigurationError(
                f"spec {s.name!r} differs from {specs[0].name!r} in shared settings: {', '.join(diff)}")
    seeds = list(specs[0].run.seeds if seeds is None else seeds)
    out_root = resolve_output_dir(specs[0], output_dir)
    ensure_writable(out_root)

    acc, evs = {}, {}
    for s in specs:
        res = run_experiment(s, out_root, seeds, jobs)
        m = [read_metrics(p) for p in res.metrics.values()]
        acc[s.name] = np.mean([x["accuracy"] for x in m], axis=0)
        evs[s.name] = np.mean([x["mean_ev"] for x in m], axis=0)
    base = next((s.name for s in specs if Strategy(s.active.strategy) is Strategy.RANDOM), names[0])
    delta = {n: acc[n] - acc[base] for n in names}
    cmp = Comparison(base, names, len(acc[base]), acc, evs, delta)
    cmp.path = out_root / "compare.csv"
    cmp.path.write_text(cmp.to_csv())
    return cmp


__all__ = [
    "ExperimentSpec", "load_spec", "dump_spec", "dumps_spec", "spec_from_dict", "validate",
    "prepare", "run_seed", "run_experiment", "compare", "read_metrics", "FedEVError",
]
