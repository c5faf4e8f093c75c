"""Command-line entry point: ``qussteal <command> ...``.

Failures print ``error[<category>]: <message>`` on stderr and exit with a
category-specific nonzero code.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import blackbox, calibration, config, extraction, harness, model, rfio, rfsim
from .errors import ArgumentError, FormatError, QusStealError
from .patches import GRIDS, extract_many, zscore

EXIT_CODES = {"error": 1, "argument": 2, "configuration": 3, "interface": 4, "format": 5}

log = logging.getLogger("qussteal")


def _grid_for(shape):
    for grid in GRIDS.values():
        if grid.shape == tuple(shape):
            return grid
    raise ArgumentError(f"no patch grid produces {shape[0]}x{shape[1]} patches")


def _read_frames(paths) -> list:
    return [f for path in paths for f in rfio.read_dataset(path).frames()]


def _frames_at(paths, fs):
    frames = [calibration.match_rate(f, fs) for f in _read_frames(paths)]
    return frames, np.array([f.label for f in frames], dtype=int)


def cmd_simulate(a):
    if a.frames < 1:
        raise ArgumentError(f"--frames must be >= 1, got {a.frames}")
    machine = rfsim.get_machine(a.machine, a.scale)
    phantom = rfsim.get_phantom(a.phantom)
    if a.calibration:
        frames = rfsim.acquire_calibration(machine, phantom, a.calibration, a.frames, a.seed)
    else:
        frames = rfsim.synthesize_frames(phantom, machine, range(a.seed, a.seed + a.frames))
    out = config.out_path(a.out)
    rfio.write_dataset(rfio.RFDataset.from_frames(frames), out)
    print(json.dumps({"out": str(out), "frames": len(frames), "shape": list(frames[0].samples.shape),
                      "fs_mhz": machine.fs}))


def cmd_train_victim(a):
    frames = _read_frames(a.data)
    c0 = [f for f in frames if f.label == 0]
    c1 = [f for f in frames if f.label == 1]
    cfg = model.TrainConfig(learning_rate=a.lr, epochs=a.epochs, batch_size=a.batch_size, seed=a.seed,
                            min_steps=a.min_steps)
    victim = blackbox.fit_victim(c0, c1, cfg, GRIDS[a.scale])
    out = config.out_path(a.out)
    model.save_params(victim.params, out)
    print(json.dumps({"out": str(out), "val_accuracy": victim.val_accuracy, "val_auc": victim.val_auc}))


def cmd_calibrate(a):
    v = _read_frames([a.victim])
    p = _read_frames([a.perp])
    tf = calibration.calibrate(v, p, snr=a.snr)
    out = config.out_path(a.out)
    calibration.save_transfer_function(tf, out)
    print(json.dumps({"out": str(out), "bins": len(tf.bins), "band_bins": int(tf.band_mask.any(1).sum()),
                      "snr": tf.snr}))


def _load_tf(spec, fs):
    if spec == "identity":
        return calibration.TransferFunction.identity(fs)
    return calibration.load_transfer_function(spec)


def cmd_extract(a):
    oracle = blackbox.Oracle(model.load_params(a.oracle))
    g = oracle.geometry
    frames, _ = _frames_at(a.unlabeled, g.fs)
    x = extract_many(frames, _grid_for((g.patch_h, g.patch_w)))
    tf = _load_tf(a.tf, g.fs)
    cfg = extraction.ExtractionConfig(epsilon=a.epsilon, iterations=a.iterations, label_percentile=a.percentile,
                                      seed=a.seed, requery_oracle=a.requery_oracle,
                                      inner_train=model.TrainConfig(min_steps=a.min_steps))
    params = extraction.extract(oracle, x, tf, cfg)
    out = config.out_path(a.out)
    model.save_params(params, out)
    print(json.dumps({"out": str(out), "patches": len(x), "oracle_queries": oracle.query_count}))


def cmd_evaluate(a):
    params = model.load_params(a.model)
    frames, labels = _frames_at(a.data, params.fs)
    if np.any(labels < 0):
        raise FormatError(f"{a.data}: evaluation data must be labeled")
    grid = _grid_for(params.input_shape)
    x = extract_many(frames, grid)
    acc, auc = harness.evaluate(params, zscore(x), np.repeat(labels, grid.count))
    print(json.dumps({"accuracy": acc, "auc": auc, "patches": len(x)}))


def cmd_report(a):
    rep = harness.read_report(a.input)
    if a.format == "table":
        text = rep.pivot()
    else:
        text = harness.report_csv(rep) if a.format == "csv" else harness.report_json(rep)
    if a.out:
        out = config.out_path(a.out)
        try:
            out.write_text(text)
        except OSError as exc:
            raise FormatError(f"cannot write {out}: {exc}") from exc
    else:
        sys.stdout.write(text)


def cmd_experiment(a):
    cp = config.load(a.config) if a.config else None
    spec = config.experiment_spec(a.name, cp)
    rep = harness.run_experiment(spec)
    stem = a.out or a.name
    for fmt in ("csv", "json"):
        harness.write_report(rep, config.out_path(f"{stem}.{fmt}"), fmt)
    sys.stdout.write(rep.pivot())
    log.info("runtime %.1f s", rep.runtime)


def cmd_oracle_score(a):
    oracle = blackbox.Oracle(model.load_params(a.model))
    patches = rfio.read_dataset(a.input).patches()
    scores = oracle.score(patches)
    rfio.write_scores(scores, config.out_path(a.out))
    print(json.dumps({"scored": len(scores), "query_count": oracle.query_count}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qussteal", description="Ultrasound model-extraction workbench")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize RF frames")
    s.add_argument("--machine", default="victim", choices=sorted(rfsim.MACHINES))
    s.add_argument("--phantom", default="phantom1", choices=sorted(rfsim.PHANTOMS))
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scale", default="desk", choices=sorted(GRIDS))
    s.add_argument("--calibration", choices=("stable", "freehand"),
                   help="acquire calibration frames instead of independent ones")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-victim", help="train the victim classifier on labeled frames")
    s.add_argument("--data", required=True, nargs="+", help="labeled dataset file(s)")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=256)
    s.add_argument("--min-steps", type=int, default=model.TrainConfig.min_steps)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scale", default="desk", choices=sorted(GRIDS))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_victim)

    s = sub.add_parser("calibrate", help="estimate a transfer function from calibration frames")
    s.add_argument("--victim", required=True)
    s.add_argument("--perp", required=True)
    s.add_argument("--snr", type=float, default=calibration.DEFAULT_SNR)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("extract", help="copy the oracle onto perpetrator data")
    s.add_argument("--oracle", required=True)
    s.add_argument("--unlabeled", required=True, nargs="+")
    s.add_argument("--tf", required=True, help="transfer-function file or 'identity'")
    s.add_argument("--epsilon", type=float, default=20.0)
    s.add_argument("--percentile", type=float, default=50.0)
    s.add_argument("--iterations", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--requery-oracle", action="store_true")
    s.add_argument("--min-steps", type=int, default=model.TrainConfig.min_steps)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("evaluate", help="patch-wise accuracy and AUC on labeled frames")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True, nargs="+")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="convert or tabulate a report file")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--format", default="table", choices=("table", "csv", "json"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("experiment", help="run an experiment family")
    s.add_argument("name", choices=harness.EXPERIMENTS)
    s.add_argument("--config")
    s.add_argument("--out", help="report file stem (default: experiment name)")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("oracle", help="black-box oracle file exchange")
    osub = s.add_subparsers(dest="oracle_command", required=True)
    o = osub.add_parser("score", help="score a patch file")
    o.add_argument("--model", required=True)
    o.add_argument("--in", dest="input", required=True)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except QusStealError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except OSError as exc:
        print(f"error[format]: {exc}", file=sys.stderr)
        return EXIT_CODES["format"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
