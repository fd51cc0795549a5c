"""Configuration-driven experiment harness.

Runs the benchmark sweeps (error rate vs. pilot count, vs. SNR, vs. number
of training device groups, plus a parameter/timing comparison) from a flat
key=value config file, writes a fixed-schema results.csv and a JSON run
manifest, and seeds everything explicitly so a rerun with the same config
is byte-identical.

Within one sweep point every detector consumes exactly the same channel
and noise realizations (common random numbers); a checksum of the consumed
stream is recorded per detector in the manifest so the pairing can be
audited. Wall-clock measurements live only in the manifest: the results
CSV keeps its wall_ms column empty so reruns stay byte-identical.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .classic import ClassicDetector, sic_detect_batch
from .meta import MetaConfig, MetaState, adapt, meta_train
from .phy import (PilotSet, bpsk, gen_meta_dataset, snr_db_to_sigma2)
from .sicnet import (build_model, count_params, evaluate_decisions,
                     save_checkpoint, sicnet_train)

EXPERIMENT_KINDS = ("ser_vs_pilots", "ser_vs_snr", "ser_vs_tasks",
                    "complexity", "train_meta", "train_sicnet")

CSV_COLUMNS = ["experiment", "sweep_var", "sweep_value", "detector", "device",
               "ser", "stderr", "n_symbols", "pilots", "snr_db", "k_tasks",
               "seed", "wall_ms"]

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_PARSE = 2
EXIT_VALIDATION = 3


class ConfigParseError(Exception):
    """Config file missing or syntactically malformed."""


class ConfigValidationError(Exception):
    """Config parsed but a field value is invalid; names the field."""


@dataclass
class ExperimentConfig:
    """All knobs with the stock link/training setup as defaults."""

    experiment: str = ""
    seed: int = 0
    out_dir: str = "results"
    threads: int = 1
    # link
    power_factors: list[float] = field(default_factory=lambda: [4.0, 1.0])
    train_snr_db: float = 6.0
    snr_db: float = 15.0
    # meta-training
    k_groups: int = 20
    group_pilots: int = 8
    outer_lr: float = 0.02
    outer_lr_final: float = 0.002
    inner_lr: float = 0.001
    adapt_lr: float = 0.001
    loss_reduction: str = "sum"
    support_size: int = 4
    query_size: int = 4
    meta_epochs: int = 300
    adapt_epochs: int = 1000
    second_order: bool = True
    swap_split_roles: bool = False
    outer_optimizer: str = "adam"
    # from-scratch baseline
    sicnet_epochs: int = 300
    sicnet_lr: float = 0.01
    sicnet_optimizer: str = "adam"
    # architecture
    block1_hidden: list[int] = field(default_factory=lambda: [24, 12])
    block2_hidden: list[int] = field(default_factory=lambda: [32, 16])
    # evaluation
    pilots: int = 4
    pilot_grid: list[int] = field(default_factory=lambda: list(range(1, 9)))
    snr_grid_db: list[float] = field(default_factory=lambda: [float(s) for s in range(0, 20, 2)])
    k_grid: list[int] = field(default_factory=lambda: list(range(2, 21, 2)))
    tasks_pilot_grid: list[int] = field(default_factory=lambda: [4, 8])
    eval_symbols: int = 1_000_000
    realizations: int = 20
    pilot_snr_mode: str = "eval"
    timing_repeats: int = 5


_LIST_INT = "list_int"
_LIST_FLOAT = "list_float"


def _schema():
    kinds = {}
    for f in fields(ExperimentConfig):
        if f.type == "list[int]":
            kinds[f.name] = _LIST_INT
        elif f.type == "list[float]":
            kinds[f.name] = _LIST_FLOAT
        elif f.type == "int":
            kinds[f.name] = "int"
        elif f.type == "float":
            kinds[f.name] = "float"
        elif f.type == "bool":
            kinds[f.name] = "bool"
        else:
            kinds[f.name] = "str"
    return kinds


def _parse_value(kind, raw, key):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == _LIST_INT:
            return [int(v) for v in raw.split(",") if v.strip() != ""]
        if kind == _LIST_FLOAT:
            return [float(v) for v in raw.split(",") if v.strip() != ""]
        return raw
    except ValueError as exc:
        raise ConfigValidationError(f"field {key!r}: cannot parse {raw!r} as {kind}") from exc


def parse_config_text(text: str) -> ExperimentConfig:
    """Parse the flat key = value format; unknown keys are errors."""
    schema = _schema()
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigParseError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in schema:
            raise ConfigValidationError(f"unknown config key {key!r} (line {lineno})")
        if key in values:
            raise ConfigValidationError(f"duplicate config key {key!r} (line {lineno})")
        values[key] = _parse_value(schema[key], raw, key)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)


def validate_config(cfg: ExperimentConfig) -> None:
    """Fail fast on anything the runners would choke on, naming the field."""
    def bad(name, why):
        raise ConfigValidationError(f"field {name!r}: {why}")

    if cfg.experiment not in EXPERIMENT_KINDS:
        bad("experiment", f"must be one of {', '.join(EXPERIMENT_KINDS)}")
    if cfg.seed < 0:
        bad("seed", "must be >= 0")
    if cfg.threads < 1:
        bad("threads", "must be >= 1")
    powers = list(cfg.power_factors)
    if len(powers) != 2:
        bad("power_factors", "exactly two devices are supported")
    if any(p <= 0 for p in powers) or powers[0] <= powers[1]:
        bad("power_factors", "must be positive and strictly descending")
    if cfg.k_groups < 2 or cfg.k_groups % 2 != 0:
        bad("k_groups", "must be even and >= 2 (channel split)")
    if cfg.group_pilots < cfg.support_size + cfg.query_size:
        bad("group_pilots", "must cover support_size + query_size")
    for name in ("outer_lr", "inner_lr", "adapt_lr", "sicnet_lr"):
        if getattr(cfg, name) <= 0:
            bad(name, "must be positive")
    if cfg.outer_lr_final < 0:
        bad("outer_lr_final", "must be >= 0")
    if cfg.loss_reduction not in ("mean", "sum"):
        bad("loss_reduction", "must be mean or sum")
    for name in ("support_size", "query_size", "pilots", "eval_symbols",
                 "realizations", "timing_repeats"):
        if getattr(cfg, name) < 1:
            bad(name, "must be >= 1")
    for name in ("meta_epochs", "adapt_epochs", "sicnet_epochs"):
        if getattr(cfg, name) < 0:
            bad(name, "must be >= 0")
    if cfg.outer_optimizer not in ("sgd", "adam"):
        bad("outer_optimizer", "must be sgd or adam")
    if cfg.sicnet_optimizer not in ("sgd", "adam"):
        bad("sicnet_optimizer", "must be sgd or adam")
    if cfg.pilot_snr_mode not in ("eval", "train"):
        bad("pilot_snr_mode", "must be eval or train")
    if not cfg.pilot_grid or any(p < 1 for p in cfg.pilot_grid):
        bad("pilot_grid", "must be a non-empty list of counts >= 1")
    if not cfg.snr_grid_db:
        bad("snr_grid_db", "must be non-empty")
    if not cfg.k_grid or any(k < 2 or k % 2 != 0 for k in cfg.k_grid):
        bad("k_grid", "entries must be even and >= 2")
    if not cfg.tasks_pilot_grid or any(p < 1 for p in cfg.tasks_pilot_grid):
        bad("tasks_pilot_grid", "must be a non-empty list of counts >= 1")
    if not cfg.block1_hidden or not cfg.block2_hidden:
        bad("block1_hidden", "hidden widths must be non-empty")


def _meta_config(cfg: ExperimentConfig) -> MetaConfig:
    return MetaConfig(
        outer_step=cfg.outer_lr, outer_step_final=cfg.outer_lr_final,
        inner_step=cfg.inner_lr, adapt_step=cfg.adapt_lr,
        support_size=cfg.support_size, query_size=cfg.query_size,
        meta_epochs=cfg.meta_epochs, adapt_epochs=cfg.adapt_epochs,
        second_order=cfg.second_order, outer_optimizer=cfg.outer_optimizer,
        swap_split_roles=cfg.swap_split_roles, reduction=cfg.loss_reduction,
    )


def _hidden(cfg: ExperimentConfig):
    return (tuple(cfg.block1_hidden), tuple(cfg.block2_hidden))


@dataclass
class SerReport:
    """Averaged per-device error rates of every detector at one sweep point."""

    sweep_var: str
    sweep_value: float
    sers: dict
    n_symbols: int
    pilots: int
    snr_db: float
    k_tasks: int
    realizations: int
    seed: int


def _seed_seq(master: int, *path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=tuple(path))


def _rng(master: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(_seed_seq(master, *path))


# fixed sub-stream labels under the master seed
_SK_DATASET = 0
_SK_METATRAIN = 1
_SK_REALIZATION = 2


@dataclass
class _Realization:
    """Channel, pilot draws and evaluation stream shared by all detectors.

    The unit-variance noise is stored separately from the symbols so the
    same draws can be rescaled to any SNR of the sweep.
    """

    h: complex
    pilot_symbols: np.ndarray
    pilot_x: np.ndarray
    pilot_unit_noise: np.ndarray
    eval_symbols: np.ndarray
    eval_x: np.ndarray
    eval_unit_noise: np.ndarray

    def pilots(self, n: int, sigma2: float, snr_db: float) -> PilotSet:
        y = self.h * self.pilot_x[:n] + np.sqrt(sigma2 / 2.0) * self.pilot_unit_noise[:n]
        return PilotSet(self.pilot_symbols[:n], y, group_id=-1, h=self.h,
                        snr_db=snr_db)

    def eval_stream(self, sigma2: float):
        y = self.h * self.eval_x + np.sqrt(sigma2 / 2.0) * self.eval_unit_noise
        return self.eval_symbols, y


def _draw_realization(master: int, r: int, n_pilots: int, n_eval: int,
                      constellation, powers) -> _Realization:
    chan_rng = _rng(master, _SK_REALIZATION, r, 0)
    pilot_rng = _rng(master, _SK_REALIZATION, r, 1)
    eval_rng = _rng(master, _SK_REALIZATION, r, 2)
    h = 1.0 + 0.0j if chan_rng.random() < 0.5 else -1.0 + 0.0j
    sqrt_p = np.sqrt(powers)

    p_idx = pilot_rng.integers(0, constellation.order, size=(n_pilots, powers.size))
    p_x = constellation.points[p_idx] @ sqrt_p
    p_noise = pilot_rng.standard_normal(n_pilots) + 1j * pilot_rng.standard_normal(n_pilots)

    e_idx = eval_rng.integers(0, constellation.order, size=(n_eval, powers.size))
    e_x = constellation.points[e_idx] @ sqrt_p
    e_noise = eval_rng.standard_normal(n_eval) + 1j * eval_rng.standard_normal(n_eval)
    return _Realization(h, p_idx, p_x, p_noise, e_idx, e_x, e_noise)


def _stream_digest(symbols: np.ndarray, y: np.ndarray) -> "hashlib._Hash":
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(symbols).tobytes())
    digest.update(np.ascontiguousarray(y).tobytes())
    return digest


def _pilot_sigma2(cfg: ExperimentConfig, eval_snr_db: float, total_power: float):
    snr = eval_snr_db if cfg.pilot_snr_mode == "eval" else cfg.train_snr_db
    return snr_db_to_sigma2(snr, total_power), snr


def _train_meta_state(cfg: ExperimentConfig, k_groups: int | None = None) -> MetaState:
    constellation = bpsk()
    powers = np.asarray(cfg.power_factors, dtype=np.float64)
    k = cfg.k_groups if k_groups is None else k_groups
    dataset = gen_meta_dataset(k, cfg.group_pilots, constellation, powers,
                               cfg.train_snr_db, _seed_seq(cfg.seed, _SK_DATASET))
    return meta_train(dataset, _meta_config(cfg), _seed_seq(cfg.seed, _SK_METATRAIN))


def _map_ordered(fn, items, threads):
    if threads <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _detector_errors(detect_fn, symbols, y, digests, name):
    """Evaluate one detector on the shared stream, recording the checksum
    of exactly what it consumed."""
    digests.setdefault(name, hashlib.sha256()).update(
        _stream_digest(symbols, y).digest()
    )
    decisions = detect_fn(y)
    return (decisions != symbols).mean(axis=0)


def run_ser_vs_pilots(cfg: ExperimentConfig, state: MetaState | None = None):
    """Adapted meta detector vs. from-scratch detector across pilot counts.

    One shared meta-training; per realization the pilot sets are nested
    (count p uses the first p of the largest draw) and both detectors are
    scored on the same evaluation stream.

    Returns (reports, manifest extras).
    """
    constellation = bpsk()
    powers = np.asarray(cfg.power_factors, dtype=np.float64)
    state = state or _train_meta_state(cfg)
    grid = sorted(set(cfg.pilot_grid))
    max_pilots = max(grid)
    sigma2_eval = snr_db_to_sigma2(cfg.snr_db, float(powers.sum()))
    sigma2_pilot, pilot_snr = _pilot_sigma2(cfg, cfg.snr_db, float(powers.sum()))

    reals = [_draw_realization(cfg.seed, r, max_pilots, cfg.eval_symbols,
                               constellation, powers)
             for r in range(cfg.realizations)]

    checksums = {}

    def one_point(n_pilots: int):
        digests: dict = {}
        acc = {("meta", d): 0.0 for d in range(2)}
        acc.update({("sicnet", d): 0.0 for d in range(2)})
        for r, real in enumerate(reals):
            pilots = real.pilots(n_pilots, sigma2_pilot, pilot_snr)
            symbols, y = real.eval_stream(sigma2_eval)
            adapted = adapt(state, pilots)
            scratch = build_model(_hidden(cfg), constellation.order,
                                  _rng(cfg.seed, _SK_REALIZATION, r, 3))
            scratch, _ = sicnet_train(scratch, pilots, cfg.sicnet_epochs,
                                      cfg.sicnet_optimizer, cfg.sicnet_lr)
            for name, model in (("meta", adapted), ("sicnet", scratch)):
                ser = _detector_errors(lambda yy, m=model: evaluate_decisions(m, yy),
                                       symbols, y, digests, name)
                for d in range(2):
                    acc[(name, d)] += ser[d]
        sers = {k: v / cfg.realizations for k, v in acc.items()}
        return SerReport("pilots", float(n_pilots), sers,
                         cfg.eval_symbols * cfg.realizations, n_pilots,
                         cfg.snr_db, cfg.k_groups, cfg.realizations, cfg.seed), {
            name: dig.hexdigest() for name, dig in digests.items()}

    results = _map_ordered(one_point, grid, cfg.threads)
    reports = []
    for (report, point_sums), n_pilots in zip(results, grid):
        reports.append(report)
        checksums[str(n_pilots)] = point_sums
    extras = {"stream_checksums": checksums}
    if state.loss_trace.size:
        extras["meta_loss_trace_first_last"] = [float(state.loss_trace[0]),
                                                float(state.loss_trace[-1])]
    return reports, extras


def run_ser_vs_snr(cfg: ExperimentConfig, state: MetaState | None = None):
    """Meta, from-scratch and classical detectors across the SNR grid.

    The classical canceller gets the true channel and needs no pilots.
    The same symbol/noise draws are rescaled per SNR so the sweep is
    paired across grid points as well as across detectors.
    """
    constellation = bpsk()
    powers = np.asarray(cfg.power_factors, dtype=np.float64)
    state = state or _train_meta_state(cfg)
    grid = sorted(set(float(s) for s in cfg.snr_grid_db))
    total_power = float(powers.sum())

    reals = [_draw_realization(cfg.seed, r, cfg.pilots, cfg.eval_symbols,
                               constellation, powers)
             for r in range(cfg.realizations)]

    checksums = {}

    def one_point(snr_db: float):
        digests: dict = {}
        sigma2_eval = snr_db_to_sigma2(snr_db, total_power)
        sigma2_pilot, pilot_snr = _pilot_sigma2(cfg, snr_db, total_power)
        names = ("meta", "sicnet", "classic")
        acc = {(n, d): 0.0 for n in names for d in range(2)}
        for r, real in enumerate(reals):
            pilots = real.pilots(cfg.pilots, sigma2_pilot, pilot_snr)
            symbols, y = real.eval_stream(sigma2_eval)
            adapted = adapt(state, pilots)
            scratch = build_model(_hidden(cfg), constellation.order,
                                  _rng(cfg.seed, _SK_REALIZATION, r, 3))
            scratch, _ = sicnet_train(scratch, pilots, cfg.sicnet_epochs,
                                      cfg.sicnet_optimizer, cfg.sicnet_lr)
            classic = ClassicDetector(constellation, powers, real.h)
            detectors = (
                ("meta", lambda yy, m=adapted: evaluate_decisions(m, yy)),
                ("sicnet", lambda yy, m=scratch: evaluate_decisions(m, yy)),
                ("classic", lambda yy, det=classic: sic_detect_batch(yy, det)),
            )
            for name, fn in detectors:
                ser = _detector_errors(fn, symbols, y, digests, name)
                for d in range(2):
                    acc[(name, d)] += ser[d]
        sers = {k: v / cfg.realizations for k, v in acc.items()}
        return SerReport("snr_db", snr_db, sers,
                         cfg.eval_symbols * cfg.realizations, cfg.pilots,
                         snr_db, cfg.k_groups, cfg.realizations, cfg.seed), {
            name: dig.hexdigest() for name, dig in digests.items()}

    results = _map_ordered(one_point, grid, cfg.threads)
    reports = []
    for (report, point_sums), snr_db in zip(results, grid):
        reports.append(report)
        checksums[repr(snr_db)] = point_sums
    return reports, {"stream_checksums": checksums}


def run_ser_vs_tasks(cfg: ExperimentConfig):
    """Adapted error rate as a function of the training group count.

    Meta-training is redone per K on the same dataset seed; adaptation
    and evaluation reuse the same per-realization streams for every K and
    pilot count (paired comparison).
    """
    constellation = bpsk()
    powers = np.asarray(cfg.power_factors, dtype=np.float64)
    grid = sorted(set(cfg.k_grid))
    pilot_grid = sorted(set(cfg.tasks_pilot_grid))
    max_pilots = max(pilot_grid)
    sigma2_eval = snr_db_to_sigma2(cfg.snr_db, float(powers.sum()))
    sigma2_pilot, pilot_snr = _pilot_sigma2(cfg, cfg.snr_db, float(powers.sum()))

    reals = [_draw_realization(cfg.seed, r, max_pilots, cfg.eval_symbols,
                               constellation, powers)
             for r in range(cfg.realizations)]

    checksums = {}

    def one_point(k: int):
        state = _train_meta_state(cfg, k_groups=k)
        digests: dict = {}
        point_reports = []
        for n_pilots in pilot_grid:
            acc = np.zeros(2)
            for real in reals:
                pilots = real.pilots(n_pilots, sigma2_pilot, pilot_snr)
                symbols, y = real.eval_stream(sigma2_eval)
                adapted = adapt(state, pilots)
                ser = _detector_errors(
                    lambda yy, m=adapted: evaluate_decisions(m, yy),
                    symbols, y, digests, f"meta_p{n_pilots}")
                acc += ser
            sers = {("meta", d): acc[d] / cfg.realizations for d in range(2)}
            point_reports.append(SerReport(
                "k_tasks", float(k), sers, cfg.eval_symbols * cfg.realizations,
                n_pilots, cfg.snr_db, k, cfg.realizations, cfg.seed))
        return point_reports, {name: dig.hexdigest() for name, dig in digests.items()}

    results = _map_ordered(one_point, grid, cfg.threads)
    reports = []
    for (point_reports, point_sums), k in zip(results, grid):
        reports.extend(point_reports)
        checksums[str(k)] = point_sums
    return reports, {"stream_checksums": checksums}


def _median_wall_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return float(np.median(times))


def run_complexity(cfg: ExperimentConfig):
    """Trainable-parameter counts plus wall-time comparison at 8 pilots.

    Parameter counts go into the CSV (they are asserted elsewhere); the
    wall times are hardware-dependent and only reported in the manifest.
    Median of `timing_repeats` repetitions on a monotonic clock.
    """
    constellation = bpsk()
    powers = np.asarray(cfg.power_factors, dtype=np.float64)
    n_pilots = 8
    sigma2_pilot, pilot_snr = _pilot_sigma2(cfg, cfg.snr_db, float(powers.sum()))
    real = _draw_realization(cfg.seed, 0, n_pilots, 1, constellation, powers)
    pilots = real.pilots(n_pilots, sigma2_pilot, pilot_snr)

    model = build_model(_hidden(cfg), constellation.order, _rng(cfg.seed, 9))
    sicnet_count = count_params(model)
    meta_count = 2 * sicnet_count  # learned vector + adapted working copy

    dataset = gen_meta_dataset(cfg.k_groups, cfg.group_pilots, constellation,
                               powers, cfg.train_snr_db, _seed_seq(cfg.seed, _SK_DATASET))
    timing_meta_cfg = replace(_meta_config(cfg), meta_epochs=1)
    probe_state = meta_train(dataset, replace(timing_meta_cfg, meta_epochs=0),
                             _seed_seq(cfg.seed, _SK_METATRAIN))

    # equal epoch budgets for the adaptation vs. from-scratch comparison
    budget = cfg.adapt_epochs
    timings = {
        "meta_train_epoch_ms": _median_wall_ms(
            lambda: meta_train(dataset, timing_meta_cfg,
                               _seed_seq(cfg.seed, _SK_METATRAIN)),
            cfg.timing_repeats),
        "sicnet_train_epoch_ms": _median_wall_ms(
            lambda: sicnet_train(model, pilots, 1, cfg.sicnet_optimizer,
                                 cfg.sicnet_lr),
            cfg.timing_repeats),
        "adaptation_total_ms": _median_wall_ms(
            lambda: adapt(probe_state, pilots, cfg.adapt_lr, budget),
            cfg.timing_repeats),
        "sicnet_train_total_ms": _median_wall_ms(
            lambda: sicnet_train(model, pilots, budget, cfg.sicnet_optimizer,
                                 cfg.sicnet_lr),
            cfg.timing_repeats),
        "epoch_budget": budget,
        "pilots": n_pilots,
    }
    counts = {"meta": meta_count, "sicnet": sicnet_count}
    return counts, timings


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def reports_to_rows(experiment: str, reports) -> list[list[str]]:
    """Expand sweep-point reports into fixed-schema CSV rows.

    wall_ms stays empty by design: timings are run-dependent and live in
    the manifest, while the CSV must be byte-identical across reruns.
    """
    rows = []
    for rep in reports:
        for (det, device), ser in sorted(rep.sers.items()):
            stderr = float(np.sqrt(ser * (1.0 - ser) / rep.n_symbols))
            rows.append([
                experiment, rep.sweep_var, _format_cell(rep.sweep_value), det,
                str(device + 1), _format_cell(float(ser)), _format_cell(stderr),
                str(rep.n_symbols), str(rep.pilots), _format_cell(float(rep.snr_db)),
                str(rep.k_tasks), str(rep.seed), "",
            ])
    return rows


def write_results_csv(path, rows) -> None:
    lines = [",".join(CSV_COLUMNS)]
    lines += [",".join(row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def write_manifest(path, cfg: ExperimentConfig, extras, timings) -> None:
    manifest = {
        "config": {f.name: getattr(cfg, f.name) for f in fields(ExperimentConfig)},
        "seed": cfg.seed,
        "versions": {
            "metasic": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "timings_ms": timings,
    }
    manifest.update(extras or {})
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _run_train_meta(cfg: ExperimentConfig, out: Path):
    state = _train_meta_state(cfg)
    extras = {
        "m": state.opt_state.m if state.opt_state.m is not None else np.zeros(0),
        "v": state.opt_state.v if state.opt_state.v is not None else np.zeros(0),
        "loss_trace": state.loss_trace,
    }
    save_checkpoint(out / "meta_state.ckpt", state.model, extras, {
        "kind": "meta_state",
        "optimizer": {"kind": state.opt_state.kind, "t": state.opt_state.t,
                      "step_size": state.opt_state.step_size,
                      "beta1": state.opt_state.beta1,
                      "beta2": state.opt_state.beta2,
                      "eps": state.opt_state.eps},
        "reported_params": state.reported_params,
    })
    return [], {"final_meta_loss": float(state.loss_trace[-1])
                if state.loss_trace.size else None}


def _run_train_sicnet(cfg: ExperimentConfig, out: Path):
    constellation = bpsk()
    powers = np.asarray(cfg.power_factors, dtype=np.float64)
    sigma2_pilot, pilot_snr = _pilot_sigma2(cfg, cfg.snr_db, float(powers.sum()))
    real = _draw_realization(cfg.seed, 0, cfg.pilots, 1, constellation, powers)
    pilots = real.pilots(cfg.pilots, sigma2_pilot, pilot_snr)
    model = build_model(_hidden(cfg), constellation.order,
                        _rng(cfg.seed, _SK_REALIZATION, 0, 3))
    model, trace = sicnet_train(model, pilots, cfg.sicnet_epochs,
                                cfg.sicnet_optimizer, cfg.sicnet_lr)
    save_checkpoint(out / "sicnet.ckpt", model, {"loss_trace": trace},
                    {"kind": "sicnet", "pilots": cfg.pilots,
                     "channel": [pilots.h.real, pilots.h.imag]})
    return [], {"final_training_loss": float(trace[-1]) if trace.size else None}


def run_experiment(cfg: ExperimentConfig):
    """Dispatch to the runner; returns (rows, manifest extras, timings)."""
    validate_config(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    start = time.perf_counter()
    if cfg.experiment == "ser_vs_pilots":
        reports, extras = run_ser_vs_pilots(cfg)
        rows = reports_to_rows(cfg.experiment, reports)
    elif cfg.experiment == "ser_vs_snr":
        reports, extras = run_ser_vs_snr(cfg)
        rows = reports_to_rows(cfg.experiment, reports)
    elif cfg.experiment == "ser_vs_tasks":
        reports, extras = run_ser_vs_tasks(cfg)
        rows = reports_to_rows(cfg.experiment, reports)
    elif cfg.experiment == "complexity":
        counts, timing = run_complexity(cfg)
        timings.update(timing)
        extras = {"param_counts": counts}
        rows = [[cfg.experiment, "param_count", str(counts[det]), det, "",
                 "", "", "", "8", _format_cell(float(cfg.snr_db)),
                 str(cfg.k_groups), str(cfg.seed), ""]
                for det in sorted(counts)]
    elif cfg.experiment == "train_meta":
        rows, extras = _run_train_meta(cfg, out)
    else:  # train_sicnet
        rows, extras = _run_train_sicnet(cfg, out)
    timings["total_ms"] = (time.perf_counter() - start) * 1e3
    return rows, extras, timings


def run_config(path, experiment: str | None = None, seed: int | None = None,
               out_dir: str | None = None, threads: int | None = None) -> int:
    """Load a config file, run it, write results.csv and manifest.json.

    Exit codes: 0 success, 1 runtime failure, 2 parse error, 3 validation
    error. The optional arguments override the corresponding fields.
    """
    try:
        cfg = load_config(path)
        if experiment is not None:
            cfg.experiment = experiment
        if seed is not None:
            cfg.seed = seed
        if out_dir is not None:
            cfg.out_dir = out_dir
        if threads is not None:
            cfg.threads = threads
        validate_config(cfg)
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigValidationError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        rows, extras, timings = run_experiment(cfg)
        out = Path(cfg.out_dir)
        write_results_csv(out / "results.csv", rows)
        write_manifest(out / "manifest.json", cfg, extras, timings)
    except Exception as exc:  # runtime failure, not a config problem
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
