"""Experiment runner: SNR sweeps, single-run trajectory dumps and latency benchmarks.

All artifacts go under ``<out>/<name>/``. Every figure is written together with
the CSV it was drawn from, and every random stream is derived from the
configured seed, so re-running a config reproduces the numeric CSVs exactly
(timing columns aside).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .bkn import ExecutionMode, bkn_members
from .ekf import run_ekf
from .errors import BayesKalmanError, ConfigError
from .knet import FilterVariant, build_network, knet_cov_indices, run_blackbox, run_knet, run_skn
from .metrics import apec_eec_rows, bench_latency, evaluate
from .plotting import emit_svg_line_plot
from .ssm import (
    SCENARIOS,
    SNR_GRID_DB,
    Dataset,
    MismatchConfig,
    MismatchKind,
    apply_mismatch,
    concat_datasets,
    generate_dataset,
    make_model,
    project_states,
    save_dataset,
)
from .train import TrainConfig, TrainResult, load_trained, predict, resolve_loss, train_model

SWEEP_HEADER = ["snr_db", "filter", "mse_db", "log_anees", "latency_ms"]
ERROR_HEADER = ["snr_db", "filter", "error"]
BENCH_HEADER = ["scenario", "filter", "mode", "latency_ms"]
TIMING_COLUMNS = ("latency_ms", "wallclock_s")
LEARNED = {FilterVariant.KNET_KG, FilterVariant.SKN, FilterVariant.BLACKBOX, FilterVariant.BKN}

# seed-stream labels
_TRAIN_DATA, _VAL_DATA, _TEST_DATA, _TRAIN, _INFER = range(1, 6)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    scenario: str = "canonical"
    mismatch: MismatchConfig = field(default_factory=MismatchConfig)
    snr_db: list = field(default_factory=lambda: list(SNR_GRID_DB))
    filters: list = field(default_factory=lambda: ["ekf", "knet_kg", "bkn"])
    train: TrainConfig = field(default_factory=TrainConfig)
    n_train: Optional[int] = None  # pooled over the SNR grid
    n_val: Optional[int] = None  # None: split off train.val_fraction
    n_test: Optional[int] = None  # per SNR point
    T: int = 100
    J: int = 20
    seed: int = 0
    knet_covariance: Optional[bool] = None  # None: on unless the gain cannot carry it
    bkn_mode: str = "parallel"
    measure_latency: bool = True
    latency_repetitions: int = 10
    bench_scenarios: list = field(default_factory=lambda: ["canonical", "pendulum"])

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; expected one of {sorted(SCENARIOS)}")
        if isinstance(self.mismatch, dict):
            self.mismatch = MismatchConfig(**self.mismatch)
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if not self.name or any(c in self.name for c in "/\\") or self.name in {".", ".."}:
            raise ConfigError("name must be a plain directory name")
        if not self.snr_db or not all(isinstance(v, (int, float)) and math.isfinite(v) for v in self.snr_db):
            raise ConfigError("snr_db must be a non-empty list of finite numbers")
        self.snr_db = [float(v) for v in self.snr_db]
        if not self.filters:
            raise ConfigError("at least one filter is required")
        try:
            variants = [FilterVariant(f) for f in self.filters]
        except ValueError as err:
            raise ConfigError(str(err)) from None
        if len(set(variants)) != len(variants):
            raise ConfigError("filters must not repeat")
        self.filters = [v.value for v in variants]
        self.bkn_mode = ExecutionMode(self.bkn_mode).value
        if self.mismatch.kind is MismatchKind.EVOLUTION_MODEL and self.scenario != "cv":
            raise ConfigError("evolution-model mismatch is only defined for the cv scenario")
        for s in self.bench_scenarios:
            if s not in SCENARIOS:
                raise ConfigError(f"unknown bench scenario {s!r}")

        cv_split = self.scenario == "cv" and self.mismatch.kind is MismatchKind.EVOLUTION_MODEL
        if self.n_train is None:
            self.n_train = 85 if cv_split else 300
        if self.n_val is None and cv_split:
            self.n_val = 5
        if self.n_test is None:
            self.n_test = 10 if cv_split else 100
        for name in ("n_train", "n_test", "T", "J", "latency_repetitions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_val is not None and self.n_val < 1:
            raise ConfigError("n_val must be >= 1 when given")
        if self.n_train < len(self.snr_db):
            raise ConfigError("n_train must give every SNR point at least one trajectory")

        gain_cov_ok = self.scenario != "pendulum"
        if self.knet_covariance is None:
            self.knet_covariance = gain_cov_ok
        if "knet_kg" in self.filters:
            if self.knet_covariance and not gain_cov_ok:
                raise ConfigError("the pendulum observation Jacobian does not allow covariance extraction "
                                  "from the learned gain; set knet_covariance to false")
            if not gain_cov_ok and self.train.loss == "emp":
                raise ConfigError("knet_kg cannot be trained with the emp loss on the pendulum")
        for f in self.filters:
            if FilterVariant(f) in LEARNED:
                resolve_loss(f, self.train)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("mismatch"), dict):
            unknown = set(d["mismatch"]) - {"kind", "factor"}
            if unknown:
                raise ConfigError(f"unknown mismatch keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(str(err)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mismatch"] = {"kind": self.mismatch.kind.value, "factor": self.mismatch.factor}
        return d

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    def stream(self, *key) -> int:
        """Integer seed for a named random stream, derived from ``seed``."""
        return int(np.random.SeedSequence([int(self.seed), *key]).generate_state(1)[0])

    def out_dir(self, root) -> Path:
        return Path(root) / self.name


# ---------------------------------------------------------------------------
# data


@dataclass
class ScenarioData:
    snrs: list
    filter_models: list  # one per SNR point
    train: Dataset  # pooled over the grid, states projected to the filter dimension
    R_train: np.ndarray
    val: Optional[Dataset]
    R_val: Optional[np.ndarray]
    tests: list  # one per SNR point

    @property
    def model(self):
        """Filter model used for training; only ``f``/``h`` matter, ``R`` comes per trajectory."""
        return self.filter_models[0]


def _split_counts(total, parts):
    base, extra = divmod(total, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def build_data(cfg: ExperimentConfig) -> ScenarioData:
    """Generate pooled training data over the SNR grid and a test set per SNR point."""
    kind = cfg.mismatch.kind.value
    fms, trains, vals, tests, R_train, R_val = [], [], [], [], [], []
    val_counts = _split_counts(cfg.n_val, len(cfg.snr_db)) if cfg.n_val else [0] * len(cfg.snr_db)
    for k, (snr, n_tr) in enumerate(zip(cfg.snr_db, _split_counts(cfg.n_train, len(cfg.snr_db)))):
        dm, fm = apply_mismatch(cfg.mismatch, make_model(cfg.scenario, snr))
        fms.append(fm)
        if n_tr:
            trains.append(project_states(generate_dataset(dm, n_tr, cfg.T, cfg.stream(_TRAIN_DATA, k), kind), fm.m))
            R_train += [fm.R] * n_tr
        if val_counts[k]:
            vals.append(project_states(generate_dataset(dm, val_counts[k], cfg.T, cfg.stream(_VAL_DATA, k), kind),
                                       fm.m))
            R_val += [fm.R] * val_counts[k]
        tests.append(project_states(generate_dataset(dm, cfg.n_test, cfg.T, cfg.stream(_TEST_DATA, k), kind), fm.m))
    return ScenarioData(
        snrs=list(cfg.snr_db),
        filter_models=fms,
        train=concat_datasets(trains),
        R_train=np.stack(R_train),
        val=concat_datasets(vals) if vals else None,
        R_val=np.stack(R_val) if R_val else None,
        tests=tests,
    )


def _snr_tag(snr):
    return format(snr, "g")


def write_datasets(cfg: ExperimentConfig, data: ScenarioData, root) -> list:
    out = cfg.out_dir(root) / "data"
    paths = [save_dataset(data.train, out / "train")]
    if data.val is not None:
        paths.append(save_dataset(data.val, out / "val"))
    for snr, ds in zip(data.snrs, data.tests):
        paths.append(save_dataset(ds, out / f"test_snr{_snr_tag(snr)}"))
    return paths


# ---------------------------------------------------------------------------
# training and inference


def _net_kwargs(cfg: ExperimentConfig, variant):
    if FilterVariant(variant) is FilterVariant.BKN:
        return {"per_neuron": cfg.train.per_neuron, "temperature": cfg.train.temperature}
    return {}


def _train_config(cfg: ExperimentConfig, index: int) -> TrainConfig:
    return replace(cfg.train, seed=cfg.stream(_TRAIN, index))


def train_filters(cfg: ExperimentConfig, data: ScenarioData, dest=None, progress=None) -> dict:
    """Train every learned filter once on the pooled data; saves checkpoints and logs under ``dest``."""
    nets = {}
    for i, name in enumerate(cfg.filters):
        if FilterVariant(name) not in LEARNED:
            continue
        log_path = None if dest is None else Path(dest) / "logs" / f"train_{name}.csv"
        result: TrainResult = train_model(
            name, data.model, data.train, _train_config(cfg, i), val_dataset=data.val,
            R_rows=data.R_train, R_val=data.R_val, log_path=log_path,
            progress=None if progress is None else (lambda row, name=name: progress(name, row)),
        )
        if dest is not None:
            result.save_checkpoint(Path(dest) / "checkpoints" / f"{name}.json",
                                   meta={"scenario": cfg.scenario, "experiment": cfg.name})
        nets[name] = result.net
    return nets


def load_filters(cfg: ExperimentConfig, root) -> dict:
    model = make_model(cfg.scenario, cfg.snr_db[0])
    nets = {}
    for name in cfg.filters:
        if FilterVariant(name) not in LEARNED:
            continue
        path = cfg.out_dir(root) / "checkpoints" / f"{name}.json"
        if not path.exists():
            raise ConfigError(f"missing checkpoint {path}; run `train` first")
        nets[name], _ = load_trained(name, model, path, **_net_kwargs(cfg, name))
    return nets


def _cov_indices(cfg, name, fm):
    if FilterVariant(name) is FilterVariant.KNET_KG and cfg.knet_covariance:
        return knet_cov_indices(fm)
    return None


def run_filter(cfg: ExperimentConfig, name, fm, net, Y, x0, rng):
    """``(x, cov, cov_indices)`` for one filter over a batch of trajectories."""
    variant = FilterVariant(name)
    if variant is FilterVariant.EKF:
        out = run_ekf(fm, Y, x0)
        return out.x, out.cov, None
    if variant is FilterVariant.BKN:
        x, cov = predict(name, fm, net, Y, x0, J=cfg.J, rng=rng, mode=cfg.bkn_mode, config=cfg.train)
        return x, cov, None
    if variant is FilterVariant.KNET_KG and not cfg.knet_covariance:
        return np.asarray(run_knet(fm, net, Y, x0).x), None, None
    idx = _cov_indices(cfg, name, fm)
    x, cov = predict(name, fm, net, Y, x0, R=fm.R, config=cfg.train, cov_indices=idx)
    return x, cov, idx


def single_trajectory_fn(cfg: ExperimentConfig, name, fm, net, x0, mode=None):
    """Callable ``y -> estimates`` for one trajectory, used for latency measurements."""
    variant = FilterVariant(name)
    rng = np.random.default_rng(0)
    if variant is FilterVariant.EKF:
        return lambda y: run_ekf(fm, y, x0)
    if variant is FilterVariant.BKN:
        mode = mode or cfg.bkn_mode
        return lambda y: bkn_members(fm, net, y[None], x0, cfg.J, rng, mode)
    if variant is FilterVariant.SKN:
        return lambda y: run_skn(fm, net, y, x0)
    if variant is FilterVariant.BLACKBOX:
        return lambda y: run_blackbox(net, y)
    return lambda y: run_knet(fm, net, y, x0)


# ---------------------------------------------------------------------------
# output helpers


def _num(v):
    if v is None:
        return "nan"
    v = float(v)
    return repr(v) if math.isfinite(v) else str(v)


def write_rows(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) or v is None else v for v in row])
    return path


def write_config(cfg: ExperimentConfig, root, subdir="") -> Path:
    path = cfg.out_dir(root) / subdir / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# studies


@dataclass
class SweepResult:
    rows: list
    errors: list
    reports: dict = field(default_factory=dict)  # (snr, filter) -> EvalReport


def evaluate_filters(cfg: ExperimentConfig, data: ScenarioData, nets: dict) -> SweepResult:
    """Evaluate each filter at each SNR point; failures become error rows and the loop continues."""
    rows, errors, reports = [], [], {}
    for k, (snr, fm, test) in enumerate(zip(data.snrs, data.filter_models, data.tests)):
        for i, name in enumerate(cfg.filters):
            rng = np.random.default_rng(cfg.stream(_INFER, k, i))
            try:
                x, cov, idx = run_filter(cfg, name, fm, nets.get(name), test.observations, test.x0, rng)
                latency = None
                if cfg.measure_latency:
                    fn = single_trajectory_fn(cfg, name, fm, nets.get(name), test.x0[0])
                    latency = bench_latency(fn, test.observations[0], cfg.latency_repetitions)
                report = evaluate(x, test.states, cov, idx, latency)
            except (BayesKalmanError, ArithmeticError, np.linalg.LinAlgError) as err:
                rows.append([snr, name, None, None, None])
                errors.append([snr, name, f"{type(err).__name__}: {err}"])
                continue
            reports[(snr, name)] = report
            rows.append([snr, name, report.mse_db, report.log_anees, latency])
    return SweepResult(rows, errors, reports)


def write_sweep(cfg: ExperimentConfig, result: SweepResult, root, stem="sweep") -> dict:
    out = cfg.out_dir(root)
    paths = {"table": write_rows(out / f"{stem}.csv", SWEEP_HEADER, result.rows),
             "errors": write_rows(out / f"{stem}_errors.csv", ERROR_HEADER, result.errors)}
    for col, label in ((2, "MSE [dB]"), (3, "log10 ANEES")):
        series = {}
        for row in result.rows:
            if row[col] is not None:
                xs, ys = series.setdefault(row[1], ([], []))
                xs.append(row[0])
                ys.append(row[col])
        if series:
            key = "mse" if col == 2 else "anees"
            paths[key] = emit_svg_line_plot(series, "SNR 1/r^2 [dB]", label, out / f"{stem}_{key}.svg",
                                            title=f"{cfg.scenario}, {cfg.mismatch.kind.value}")
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    for (snr, name), rep in result.reports.items():
        (reports / f"{name}_snr{_snr_tag(snr)}.json").write_text(rep.to_json() + "\n")
    return paths


def run_sweep(cfg: ExperimentConfig, root=None, progress=None) -> SweepResult:
    """Train the learned filters once on the SNR range, then evaluate every filter at each SNR."""
    data = build_data(cfg)
    nets = train_filters(cfg, data, None if root is None else cfg.out_dir(root), progress)
    result = evaluate_filters(cfg, data, nets)
    if root is not None:
        write_config(cfg, root)
        write_sweep(cfg, result, root)
    return result


def run_evaluate(cfg: ExperimentConfig, root) -> SweepResult:
    """Evaluate previously trained checkpoints on the configured test sets."""
    data = build_data(cfg)
    result = evaluate_filters(cfg, data, load_filters(cfg, root))
    write_sweep(cfg, result, root, stem="eval")
    return result


def run_single(cfg: ExperimentConfig, root=None, progress=None, trajectory: int = 0) -> dict:
    """x-position tracks of one test trajectory and per-step APEC/EEC traces over the test set.

    Uses the first SNR point of the grid. Everything, including the checkpoints
    trained for this run, goes to ``<out>/<name>/single/``.
    """
    if cfg.scenario != "cv":
        raise ConfigError("the single-run study is defined for the cv scenario")
    cfg1 = replace(cfg, snr_db=cfg.snr_db[:1])
    data = build_data(cfg1)
    dest = None if root is None else cfg.out_dir(root) / "single"
    nets = train_filters(cfg1, data, dest, progress)
    fm, test = data.filter_models[0], data.tests[0]
    if not 0 <= trajectory < len(test):
        raise ConfigError(f"trajectory index {trajectory} outside the test set")
    tracks = {"truth": (list(range(1, cfg.T + 1)), [float(v) for v in test.states[trajectory, :, 0]])}
    traces, errors = {}, []
    for i, name in enumerate(cfg.filters):
        rng = np.random.default_rng(cfg.stream(_INFER, 0, i))
        try:
            x, cov, idx = run_filter(cfg1, name, fm, nets.get(name), test.observations, test.x0, rng)
        except (BayesKalmanError, ArithmeticError, np.linalg.LinAlgError) as err:
            errors.append([cfg1.snr_db[0], name, f"{type(err).__name__}: {err}"])
            continue
        tracks[name] = (list(range(1, cfg.T + 1)), [float(v) for v in x[trajectory, :, 0]])
        if cov is not None:
            err = x - test.states
            if idx is not None:
                err = err[..., list(idx)]
            traces[name] = apec_eec_rows(err, cov)
    out = {"tracks": tracks, "apec_eec": traces, "errors": errors}
    if root is not None:
        d = dest
        write_config(cfg1, root, "single")
        out["paths"] = {"tracks": emit_svg_line_plot(tracks, "t", "x position", d / "tracks.svg",
                                                     title="single run, x position")}
        for name, (header, rows) in traces.items():
            write_rows(d / f"apec_eec_{name}.csv", header, rows)
            series = {"APEC": ([r[0] for r in rows], [r[1] for r in rows]),
                      "EEC": ([r[0] for r in rows], [r[2] for r in rows])}
            out["paths"][name] = emit_svg_line_plot(series, "t", "trace", d / f"apec_eec_{name}_plot.svg",
                                                    title=f"{name}: APEC vs EEC")
        write_rows(d / "errors.csv", ERROR_HEADER, errors)
    return out


def run_bench(cfg: ExperimentConfig, root=None, checkpoints=None) -> list:
    """Per-trajectory latency of each configured filter; BKN in serial and parallel modes.

    Latency does not depend on trained weights, so untrained networks of the right
    architecture stand in unless ``checkpoints`` names a directory of trained ones.
    """
    rows = []
    for s, scenario in enumerate(cfg.bench_scenarios):
        fm = make_model(scenario, cfg.snr_db[0])
        ds = generate_dataset(fm, 1, cfg.T, cfg.stream(_TEST_DATA, 100 + s))
        y, x0 = ds.observations[0], ds.x0[0]
        for i, name in enumerate(cfg.filters):
            net = None
            if FilterVariant(name) in LEARNED:
                path = None if checkpoints is None else Path(checkpoints) / f"{name}.json"
                if path is not None and path.exists():
                    net, _ = load_trained(name, fm, path, **_net_kwargs(cfg, name))
                else:
                    net = build_network(name, fm.m, fm.n, np.random.default_rng(cfg.stream(_TRAIN, i)),
                                        **_net_kwargs(cfg, name))
            modes = [m.value for m in ExecutionMode] if name == "bkn" else ["single"]
            for mode in modes:
                fn = single_trajectory_fn(cfg, name, fm, net, x0, None if mode == "single" else mode)
                rows.append([scenario, name, mode, bench_latency(fn, y, cfg.latency_repetitions)])
    if root is not None:
        write_config(cfg, root)
        write_rows(cfg.out_dir(root) / "bench.csv", BENCH_HEADER, rows)
    return rows


def strip_timing(csv_text: str) -> str:
    """Drop timing columns so CSVs can be compared across runs."""
    lines = csv_text.splitlines()
    if not lines:
        return csv_text
    rows = list(csv.reader(lines))
    keep = [i for i, h in enumerate(rows[0]) if h not in TIMING_COLUMNS]
    return "\n".join(",".join(r[i] for i in keep) for r in rows) + "\n"
