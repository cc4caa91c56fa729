"""Command-line entry point: ``cloudlstm {synth,train,forecast,evaluate,bench}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench as benchmod
from .data_io import (DataError, StreamDataset, fingerprint, load_stream, save_stream,
                      synth_diffusion, window_dataset, write_values)
from .evaluation import (copy_last_baseline, evaluate, format_table, per_channel_mae,
                         write_report_csv)
from .forecaster import CheckpointError, CloudForecaster, ForecasterConfig
from .pointcloud import CapacityError
from .tensor import DimensionError
from .training import TrainConfig, TrainingError, fit, split_dataset, write_loss_log

log = logging.getLogger("cloudlstm")

CHECKPOINT = "model.ckpt"
MANIFEST = "manifest.json"
LOSS_CSV = "loss.csv"
LOSS_PNG = "loss.png"
TRAIN_RATIO = 0.8


class UsageError(Exception):
    pass


def _add_data_args(p):
    p.add_argument("--positions", required=True, type=Path)
    p.add_argument("--values", required=True, type=Path)
    p.add_argument("--fill-gaps", action="store_true", help="linearly interpolate missing values")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudlstm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic diffusion stream")
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--channels", type=int, default=2)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("train", help="fit a Seq2seq forecaster")
    _add_data_args(p)
    p.add_argument("--cell", choices=("lstm", "gru", "rnn"), default="lstm")
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--channels", type=int, default=36)
    p.add_argument("--stacks", type=int, default=2)
    p.add_argument("--history", type=int, default=6)
    p.add_argument("--horizon", type=int, default=6)
    p.add_argument("--attention", action="store_true")
    p.add_argument("--emit-coordinates", action="store_true")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--teacher-forcing", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("forecast", help="forecast the horizon after the last frames")
    p.add_argument("--model", required=True, type=Path)
    _add_data_args(p)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("evaluate", help="score a trained model and the copy-last baseline")
    p.add_argument("--model", required=True, type=Path)
    _add_data_args(p)
    p.add_argument("--split", choices=("test", "all"), default="test",
                   help="score the chronological test split (default) or every window")
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("bench", help="time D-Conv weighting or K-NN search over N")
    p.add_argument("--suite", choices=("dconv", "knn"), required=True)
    p.add_argument("--sizes", type=int, nargs="+", default=list(benchmod.DEFAULT_SIZES))
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--repeats", type=int, default=7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-plots", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    return parser


# -- subcommands ------------------------------------------------------------

def cmd_synth(args) -> int:
    ds = synth_diffusion(args.points, args.channels, args.steps, args.seed, noise=args.noise)
    args.out.mkdir(parents=True, exist_ok=True)
    save_stream(ds, args.out / "positions.csv", args.out / "values.csv")
    print(f"wrote {ds.T} steps x {ds.N} points x {ds.U} channels to {args.out}")
    return 0


def _train_settings(args) -> dict:
    return {
        "forecaster": asdict(ForecasterConfig(
            stacks=args.stacks, hidden_channels=args.channels, k_neighbors=args.k,
            history=args.history, horizon=args.horizon, cell=args.cell,
            attention=args.attention, emit_coordinates=args.emit_coordinates)),
        "training": asdict(TrainConfig(
            lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
            teacher_forcing=args.teacher_forcing, seed=args.seed)),
        "data": {"stride": args.stride, "val_fraction": args.val_fraction,
                 "train_ratio": TRAIN_RATIO, "fill_gaps": args.fill_gaps},
    }


def _train_windows(ds: StreamDataset, fcfg: ForecasterConfig, data: dict):
    windows = window_dataset(ds, fcfg.history, fcfg.horizon, data["stride"])
    trainval, _ = split_dataset(windows, data["train_ratio"])
    n_val = int(round(data["val_fraction"] * len(trainval)))
    if n_val and len(trainval) - n_val >= 1:
        return trainval[:len(trainval) - n_val], trainval[len(trainval) - n_val:]
    return trainval, None


def cmd_train(args) -> int:
    settings = _train_settings(args)
    fcfg = ForecasterConfig(**settings["forecaster"])
    tcfg = TrainConfig(**settings["training"])
    ds = load_stream(args.positions, args.values, fill_gaps=args.fill_gaps)
    if fcfg.k_neighbors > ds.N:
        raise CapacityError(f"K={fcfg.k_neighbors} exceeds the {ds.N} stations in the data")
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"checkpoint": str(out / CHECKPOINT), "loss_log": str(out / LOSS_CSV),
                 "manifest": str(out / MANIFEST)}
    if not args.no_plots:
        artifacts["loss_plot"] = str(out / LOSS_PNG)
    manifest = {
        "command": "train",
        "config": settings,
        "seed": tcfg.seed,
        "dataset": {"positions": str(args.positions), "values": str(args.values),
                    "sha256": fingerprint(args.positions, args.values),
                    "steps": ds.T, "stations": ds.N, "channels": ds.channel_names},
        "artifacts": artifacts,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    train, val = _train_windows(ds, fcfg, settings["data"])
    model = CloudForecaster.init(fcfg, ds.U, ds.H, ds.L, seed=tcfg.seed)
    result = fit(model, train, tcfg, val=val)
    model.save(out / CHECKPOINT)
    write_loss_log(out / LOSS_CSV, result.loss_log)
    if not args.no_plots and result.loss_log:
        from .plots import plot_loss
        plot_loss(result.loss_log, out / LOSS_PNG)
    print(f"trained {len(train)} windows for {tcfg.epochs} epochs; "
          f"final train MSE {result.final_train_mse:.6g}; artifacts in {out}")
    return 0


def _load_model(model_dir: Path) -> CloudForecaster:
    path = model_dir / CHECKPOINT if model_dir.is_dir() else model_dir
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return CloudForecaster.load(path)


def _check_compatible(model: CloudForecaster, ds: StreamDataset) -> None:
    if (ds.U, ds.H, ds.L) != (model.channels, model.n_values, model.n_coords):
        raise DimensionError(
            f"data has U={ds.U}, H={ds.H}, L={ds.L}; model expects "
            f"U={model.channels}, H={model.n_values}, L={model.n_coords}")
    if model.config.k_neighbors > ds.N:
        raise CapacityError(f"model K={model.config.k_neighbors} exceeds {ds.N} stations")


def cmd_forecast(args) -> int:
    model = _load_model(args.model)
    ds = load_stream(args.positions, args.values, fill_gaps=args.fill_gaps)
    _check_compatible(model, ds)
    m, j = model.config.history, model.config.horizon
    if ds.T < m:
        raise DataError(f"need at least {m} frames of history, got {ds.T}")
    pred = model.forecast(ds.features()[-m:])  # (J, U, N, F)
    last = int(ds.timestamps[-1])
    stamps = [last + ds.interval * (s + 1) for s in range(j)]
    write_values(args.out, stamps, ds.station_ids, ds.channel_names, pred[..., 0])
    print(f"wrote {j}-step forecast to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    ds = load_stream(args.positions, args.values, fill_gaps=args.fill_gaps)
    _check_compatible(model, ds)
    windows = window_dataset(ds, model.config.history, model.config.horizon, 1)
    if args.split == "test":
        _, windows = split_dataset(windows, TRAIN_RATIO)
    preds = np.concatenate([model.forecast(windows.history[s:s + 16]) for s in range(0, len(windows), 16)])
    base = copy_last_baseline(windows.history, model.config.horizon)
    nv = model.n_values
    # maximum and mean of the ground truth over the whole scored set
    v_max = float(windows.target[..., :nv].max())
    mu_v = float(windows.target[..., :nv].mean())
    name = f"Cloud{model.config.cell.upper()}" + ("+attention" if model.config.attention else "")
    reports = [evaluate(preds, windows.target, nv, name=name, v_max=v_max, mu_v=mu_v),
               evaluate(base, windows.target, nv, name="copy-last", v_max=v_max, mu_v=mu_v)]
    ch = {name: per_channel_mae(preds, windows.target, nv),
          "copy-last": per_channel_mae(base, windows.target, nv)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(out, reports, ch)
    table = format_table(reports)
    out.with_suffix(".txt").write_text(table)
    if not args.no_plots:
        from .plots import plot_metric_steps
        plot_metric_steps(reports, out.with_suffix(".png"))
    sys.stdout.write(table)
    return 0


def cmd_bench(args) -> int:
    if args.suite == "dconv":
        rows = benchmod.bench_dconv(args.sizes, k=args.k, repeats=args.repeats, seed=args.seed)
    else:
        rows = benchmod.bench_knn(args.sizes, k=args.k, repeats=args.repeats, seed=args.seed)
    out = args.out or Path(f"bench_{args.suite}.csv")
    benchmod.write_csv(out, rows)
    if not args.no_plots:
        from .plots import plot_bench
        plot_bench(rows, out.with_suffix(".png"))
    summary = benchmod.summarize(rows)
    print(f"{args.suite}: linear R^2 {summary['r_squared']:.4f}, "
          f"log-log exponent {summary['loglog_exponent']:.3f}; wrote {out}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "forecast": cmd_forecast,
            "evaluate": cmd_evaluate, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DataError, CheckpointError, DimensionError, CapacityError, TrainingError,
            FileNotFoundError, ValueError) as exc:
        print(f"cloudlstm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
