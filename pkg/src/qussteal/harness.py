"""Experiment driver for the synthetic two-machine benchmark.

A run builds victim and perpetrator data from the simulator, trains the
victim once, calibrates the pair of machines, and then runs extraction for
every (cell, repeat) of the experiment.  Metrics are patch-wise accuracy
and AUC on a held-out half of the perpetrator frames.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import blackbox, calibration, extraction, model, rfsim
from .errors import ArgumentError, ConfigurationError, FormatError
from .metrics import accuracy, compute_auc
from .patches import GRIDS, PatchSet, extract_many, zscore

log = logging.getLogger(__name__)

EXPERIMENTS = ("ablation_tf", "priors_labeldist", "priors_noiserate", "dataset_size", "transducer_mismatch")
DEFAULT_GRIDS = {
    "ablation_tf": ("tf", "identity"),
    "priors_labeldist": (40, 50, 60),
    "priors_noiserate": (10, 20, 30),
    "dataset_size": (25, 50, 125, 250, 500, 1000),
    "transducer_mismatch": ("tf",),
}
DEFAULT_ITERATIONS = {
    "ablation_tf": (2, 5, 10),
    "transducer_mismatch": (2, 5, 10),
}
CSV_COLUMNS = ("experiment", "cell", "iterations", "mean_acc", "std_acc", "mean_auc", "std_auc",
               "repeats", "oracle_queries")

# seed offsets keep victim, perpetrator and calibration realizations disjoint
_VICTIM_SEEDS = 0
_PERP_SEEDS = 1_000_000
_CAL_SEEDS = 2_000_000


@dataclass
class ExperimentSpec:
    name: str
    victim_machine: str = "victim"
    perp_machine: str = "perpetrator"
    phantoms: tuple = ("phantom1", "phantom2")
    calibration_phantom: str = "calibration"
    calibration_mode: str = "stable"
    calibration_frames: int = 10
    scale: str = "desk"
    victim_frames: int = 100  # per class
    perp_frames: int = 30  # per class, split 1:1 into train and test
    frame_scale: float = 0.05  # dataset_size: desk frames per nominal frame count
    repeats: int = 10
    grid: tuple = ()
    iterations: tuple = (2,)
    base: extraction.ExtractionConfig = field(default_factory=extraction.ExtractionConfig)
    victim_train: model.TrainConfig = field(default_factory=model.TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.name!r}; choose from {', '.join(EXPERIMENTS)}")
        if not self.grid:
            self.grid = DEFAULT_GRIDS[self.name]
        self.grid = tuple(self.grid)
        self.iterations = tuple(sorted({int(i) for i in self.iterations}))
        if self.repeats < 1:
            raise ConfigurationError("repeats must be >= 1")
        if not self.iterations or self.iterations[0] < 1:
            raise ConfigurationError("iteration checkpoints must be >= 1")
        if self.calibration_mode not in ("stable", "freehand"):
            raise ConfigurationError(f"calibration mode must be stable or freehand, got {self.calibration_mode!r}")
        if self.perp_frames < 2 or self.victim_frames < 2:
            raise ConfigurationError("need at least 2 frames per class for the frame-level splits")
        if self.scale not in GRIDS:
            raise ConfigurationError(f"unknown scale {self.scale!r}")

    @classmethod
    def default(cls, name: str, **kw) -> "ExperimentSpec":
        if name == "transducer_mismatch":
            kw = {"perp_machine": "perpetrator_alt", "calibration_mode": "freehand", **kw}
        kw.setdefault("iterations", DEFAULT_ITERATIONS.get(name, (2,)))
        return cls(name=name, **kw)

    def train_frames(self, cell) -> int:
        """Perpetrator training frames per class for one cell."""
        if self.name == "dataset_size":
            return max(1, math.floor(float(cell) * self.frame_scale + 0.5))
        return self.perp_frames // 2


@dataclass
class Row:
    experiment: str
    cell: str
    iterations: int
    mean_acc: float
    std_acc: float
    mean_auc: float
    std_auc: float
    repeats: int
    oracle_queries: int


@dataclass
class MetricReport:
    experiment: str
    rows: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)
    runtime: float = field(default=0.0, compare=False)  # seconds; never serialized

    def row(self, cell, iterations: int) -> Row:
        for r in self.rows:
            if r.cell == str(cell) and r.iterations == iterations:
                return r
        raise KeyError((cell, iterations))

    def cells(self) -> list:
        return list(dict.fromkeys(r.cell for r in self.rows))

    def pivot(self) -> str:
        """Cells as rows, iteration counts as columns of ``acc±std / auc`` entries."""
        its = sorted({r.iterations for r in self.rows})
        lines = ["cell".ljust(12) + "".join(f"iter={i}".ljust(28) for i in its)]
        for cell in self.cells():
            parts = []
            for i in its:
                try:
                    r = self.row(cell, i)
                    parts.append(f"{r.mean_acc:.2f}±{r.std_acc:.2f} / {r.mean_auc:.4f}".ljust(28))
                except KeyError:
                    parts.append("-".ljust(28))
            lines.append(str(cell).ljust(12) + "".join(parts))
        return "\n".join(lines) + "\n"


@dataclass
class RunResult:
    cell: str
    repeat: int
    iterations: int
    accuracy: float
    auc: float
    queries: int


@dataclass
class Benchmark:
    victim: blackbox.VictimModel
    tf: calibration.TransferFunction
    perp_train: PatchSet
    perp_test: PatchSet
    test_labels: np.ndarray
    train_labels: np.ndarray  # ground truth; for audits only, never used for learning
    fs: float


def evaluate(params: model.ClassifierParams, test, labels) -> tuple:
    """Patch-wise (accuracy percent, AUC) with a 0.5 threshold."""
    s = model.predict(params, test)
    s = np.atleast_1d(s)
    return accuracy(s, labels), compute_auc(s, labels)


def summarize(values) -> tuple:
    """Mean and unbiased std; std is 0 for a single value."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0


def _frames(machine, phantom, seeds, fs):
    return [calibration.match_rate(f, fs) for f in rfsim.synthesize_frames(phantom, machine, seeds)]


def check_feasible(spec: ExperimentSpec) -> None:
    """Fail fast, before any simulation or training, on an impossible spec."""
    grid = GRIDS[spec.scale]
    try:
        victim = rfsim.get_machine(spec.victim_machine, spec.scale)
        perp = rfsim.get_machine(spec.perp_machine, spec.scale)
        for name in spec.phantoms + (spec.calibration_phantom,):
            rfsim.get_phantom(name)
    except ArgumentError as exc:
        raise ConfigurationError(str(exc)) from exc
    if len(spec.phantoms) != 2:
        raise ConfigurationError("binary experiments need exactly two phantoms")
    for m in (victim, perp):
        m.validate()
    num, den = calibration.rate_ratio(perp.fs, victim.fs)
    perp_rows = -(-perp.axial_samples * num // den)
    for label, shape in (("victim", (victim.axial_samples, victim.n_lines)),
                         ("perpetrator", (perp_rows, perp.n_lines))):
        try:
            grid.check_fits(shape)
        except ArgumentError as exc:
            raise ConfigurationError(f"{label} frames too small for the {spec.scale} patch grid: {exc}") from exc
    if spec.name == "priors_labeldist" and not all(0 < float(c) < 100 for c in spec.grid):
        raise ConfigurationError("label percentiles must lie in (0, 100)")
    if spec.name == "priors_noiserate" and not all(0 <= float(c) < 100 for c in spec.grid):
        raise ConfigurationError("noise rates must lie in [0, 100)")
    if spec.name == "ablation_tf" and not set(spec.grid) <= {"tf", "identity"}:
        raise ConfigurationError("ablation_tf cells must be 'tf' and/or 'identity'")
    if spec.name == "dataset_size" and any(float(c) <= 0 for c in spec.grid):
        raise ConfigurationError("frame counts must be positive")


_VICTIMS: dict = {}


def clear_victim_cache() -> None:
    _VICTIMS.clear()


def victim_for(spec: ExperimentSpec) -> blackbox.VictimModel:
    """Experiments sharing machine, phantoms, frame count, seed and training config share a victim."""
    grid = GRIDS[spec.scale]
    victim_m = rfsim.get_machine(spec.victim_machine, spec.scale)
    ph0, ph1 = (rfsim.get_phantom(n) for n in spec.phantoms)
    cfg = replace(spec.victim_train, seed=spec.seed)
    key = repr((victim_m, ph0, ph1, grid, spec.victim_frames, spec.seed, cfg))
    if key not in _VICTIMS:
        base = spec.seed * 10_000_000
        vseeds = range(base + _VICTIM_SEEDS, base + _VICTIM_SEEDS + spec.victim_frames)
        _VICTIMS[key] = blackbox.fit_victim(rfsim.synthesize_frames(ph0, victim_m, vseeds),
                                            rfsim.synthesize_frames(ph1, victim_m, vseeds), cfg, grid)
    return _VICTIMS[key]


def build_benchmark(spec: ExperimentSpec, train_frames: int | None = None) -> Benchmark:
    """Simulate both machines, train the victim, calibrate, and split perpetrator frames 1:1."""
    check_feasible(spec)
    grid = GRIDS[spec.scale]
    victim_m = rfsim.get_machine(spec.victim_machine, spec.scale)
    perp_m = rfsim.get_machine(spec.perp_machine, spec.scale)
    ph0, ph1 = (rfsim.get_phantom(n) for n in spec.phantoms)
    fs = victim_m.fs
    base = spec.seed * 10_000_000

    victim = victim_for(spec)

    cal = rfsim.get_phantom(spec.calibration_phantom)
    cseed = base + _CAL_SEEDS
    cal_v = rfsim.acquire_calibration(victim_m, cal, spec.calibration_mode, spec.calibration_frames, cseed)
    # a clamped probe images the same phantom region on both machines; free-hand sweeps are independent
    pseed = cseed if spec.calibration_mode == "stable" else cseed + 1
    cal_p = rfsim.acquire_calibration(perp_m, cal, spec.calibration_mode, spec.calibration_frames, pseed)
    tf = calibration.calibrate(cal_v, cal_p, snr=spec.base.snr)

    n_train = spec.perp_frames // 2 if train_frames is None else train_frames
    n_test = spec.perp_frames - spec.perp_frames // 2
    pseeds = np.arange(base + _PERP_SEEDS, base + _PERP_SEEDS + n_train + n_test)
    test_seeds, train_seeds = pseeds[:n_test], pseeds[n_test:]
    n_lat = grid.count

    def patches(seeds, id0):
        frames = _frames(perp_m, ph0, seeds, fs) + _frames(perp_m, ph1, seeds, fs)
        ids = np.arange(id0, id0 + len(frames))
        y = np.repeat([0] * len(seeds) + [1] * len(seeds), n_lat)
        return extract_many(frames, grid, ids), y

    train_x, train_y = patches(train_seeds, 0)
    test_x, test_y = patches(test_seeds, 1_000_000)
    return Benchmark(victim, tf, train_x, zscore(test_x), test_y, train_y, fs)


def _cell_config(spec: ExperimentSpec, cell, repeat: int) -> tuple:
    cfg = replace(spec.base, seed=spec.seed + repeat, iterations=max(spec.iterations))
    if spec.name == "priors_labeldist":
        cfg = replace(cfg, label_percentile=float(cell))
    elif spec.name == "priors_noiserate":
        cfg = replace(cfg, epsilon=float(cell))
    return cfg, (cell == "identity")


def run_cell(bench: Benchmark, spec: ExperimentSpec, cell, repeat: int, train: PatchSet | None = None) -> list:
    """One extraction run; returns a RunResult per iteration checkpoint."""
    cfg, use_identity = _cell_config(spec, cell, repeat)
    tf = calibration.TransferFunction.identity(bench.fs) if use_identity else bench.tf
    x = bench.perp_train if train is None else train
    oracle = blackbox.Oracle(bench.victim.params)
    out = []
    for it, f_iter in extraction.iterate_steps(oracle, x, tf, cfg):
        if it in spec.iterations:
            queries = oracle.query_count
            final = extraction.finalize(f_iter, x, tf, cfg)
            acc, auc = evaluate(final, bench.perp_test, bench.test_labels)
            log.info("%s cell=%s repeat=%d iter=%d acc=%.2f auc=%.4f", spec.name, cell, repeat, it, acc, auc)
            out.append(RunResult(str(cell), repeat, it, acc, auc, queries))
    return out


def aggregate(spec: ExperimentSpec, results) -> MetricReport:
    report = MetricReport(spec.name)
    for cell in spec.grid:
        for it in spec.iterations:
            rs = [r for r in results if r.cell == str(cell) and r.iterations == it]
            if not rs:
                continue
            acc, acc_sd = summarize([r.accuracy for r in rs])
            auc, auc_sd = summarize([r.auc for r in rs])
            report.rows.append(Row(spec.name, str(cell), it, round(acc, 6), round(acc_sd, 6),
                                   round(auc, 6), round(auc_sd, 6), len(rs), int(rs[0].queries)))
    return report


def trend_flag(report: MetricReport, iterations: int) -> bool:
    """Accuracy is non-decreasing in frame count within one-std error bars."""
    rows = sorted((r for r in report.rows if r.iterations == iterations), key=lambda r: float(r.cell))
    return all(b.mean_acc + b.std_acc >= a.mean_acc - a.std_acc for a, b in zip(rows, rows[1:]))


def run_experiment(spec: ExperimentSpec) -> MetricReport:
    t0 = time.perf_counter()
    check_feasible(spec)
    results = []
    if spec.name == "dataset_size":
        # one benchmark holding the largest training budget; smaller cells use a frame prefix of each class
        sizes = {c: spec.train_frames(c) for c in spec.grid}
        bench = build_benchmark(spec, train_frames=max(sizes.values()))
        per_class = max(sizes.values())
        n_lat = GRIDS[spec.scale].count
        for cell in spec.grid:
            k = sizes[cell]
            ids = np.concatenate([np.arange(k * n_lat), per_class * n_lat + np.arange(k * n_lat)])
            for rep in range(spec.repeats):
                results += run_cell(bench, spec, cell, rep, bench.perp_train[ids])
    else:
        bench = build_benchmark(spec)
        for cell in spec.grid:
            for rep in range(spec.repeats):
                results += run_cell(bench, spec, cell, rep)
    report = aggregate(spec, results)
    report.flags["victim_val_accuracy"] = round(bench.victim.val_accuracy, 6)
    if spec.name == "dataset_size":
        report.flags["non_decreasing"] = {str(i): trend_flag(report, i) for i in spec.iterations}
    if spec.name == "transducer_mismatch" and len(spec.iterations) > 1:
        first, last = spec.iterations[0], spec.iterations[-1]
        report.flags["degrades_with_iterations"] = {
            str(c): report.row(c, last).mean_acc < report.row(c, first).mean_acc for c in report.cells()}
    report.runtime = time.perf_counter() - t0
    return report


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def report_csv(report: MetricReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def report_json(report: MetricReport) -> str:
    doc = {"experiment": report.experiment, "columns": list(CSV_COLUMNS),
           "rows": [asdict(r) for r in report.rows], "flags": report.flags}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_report(report: MetricReport, path, format: str = "csv") -> None:
    if format not in ("csv", "json"):
        raise ArgumentError(f"report format must be csv or json, got {format!r}")
    text = report_csv(report) if format == "csv" else report_json(report)
    path = Path(path)
    try:
        path.write_text(text)
    except OSError as exc:
        raise FormatError(f"cannot write report to {path}: {exc}") from exc


def read_report(path) -> MetricReport:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read report {path}: {exc}") from exc
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            doc = json.loads(text)
            return MetricReport(doc["experiment"], [Row(**r) for r in doc["rows"]], doc.get("flags", {}))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: malformed JSON report") from exc
    rows = list(csv.DictReader(io.StringIO(text)))
    kinds = {"iterations": int, "repeats": int, "oracle_queries": int, "experiment": str, "cell": str}
    try:
        parsed = [Row(**{c: kinds.get(c, float)(r[c]) for c in CSV_COLUMNS}) for r in rows]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: malformed CSV report") from exc
    return MetricReport(parsed[0].experiment if parsed else "", parsed)
