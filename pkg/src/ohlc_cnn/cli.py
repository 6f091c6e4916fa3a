"""Command-line entry point: prepare -> train -> evaluate -> gradcheck.

Every option resolves as CLI flag > config file > built-in default. The config
file is flat ``key = value`` text whose keys mirror the flag names. All
failures print a single ``error: ...`` line on stderr and exit nonzero. Output
files never contain timestamps, so identical inputs and seeds reproduce them
byte for byte.
"""

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_pipeline import (
    apply_minmax, fit_minmax, label_high15, load_ohlc_csv, load_samples,
    make_windows, save_norm_stats, save_samples, select_features, split_train_test,
)
from .nn_core import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .optim import AdamState, HyperParams
from .trainer import (
    TrainConfig, TrainingDivergedError, evaluate, grad_check, train,
    write_history_csv,
)

TRAIN_SAMPLES_FILE = "train_samples.npz"
TEST_SAMPLES_FILE = "test_samples.npz"
NORM_STATS_FILE = "norm_stats.json"
SUMMARY_FILE = "prepare_summary.txt"
CHECKPOINT_FILE = "checkpoint.npz"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.csv"

METRICS_HEADER = "dataset,tp,fp,tn,fn,accuracy,precision,recall,f1"

PREPARE_DEFAULTS = {
    "input": None, "horizon": 15, "window_len": 32, "split": 0.7, "out_dir": "out",
}
TRAIN_DEFAULTS = {
    "out_dir": "out", "data_dir": None, "batch_size": 1000, "max_epochs": 25,
    "patience": 5, "no_early_stopping": False, "dropout": 0.5, "lr": 0.001,
    "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-8, "seed": 0, "threshold": 0.5,
    "val_fraction": 0.1,
}
EVALUATE_DEFAULTS = {
    "checkpoint": None, "threshold": 0.5, "out_dir": None,
}
GRADCHECK_DEFAULTS = {
    "in_channels": 2, "window_len": 8, "filters": "2,2,2", "dense": "4,4",
    "seed": 0, "repeats": 1, "fd_epsilon": 1e-5, "tolerance": 1e-4,
    "max_params": None,
}

# value types for options whose default is None
_EXPLICIT_TYPES = {
    "input": str, "data_dir": str, "checkpoint": str, "out_dir": str,
    "max_params": int,
}


@dataclass
class RunConfig:
    """Resolved options for a training run."""
    out_dir: Path
    data_dir: Path
    model: ModelConfig
    training: TrainConfig


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got '{line}'")
            key, _, value = line.partition("=")
            values[key.strip().lower().replace("-", "_")] = value.strip()
    return values


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"cannot parse boolean value '{text}'")


def _resolve(args, defaults: dict) -> dict:
    file_cfg = {}
    if getattr(args, "config", None):
        file_cfg = read_config_file(args.config)
    out = {}
    for key, default in defaults.items():
        cli_value = getattr(args, key, None)
        if cli_value is not None:
            out[key] = cli_value
        elif key in file_cfg:
            typ = _EXPLICIT_TYPES.get(key, type(default))
            if typ is bool:
                out[key] = _parse_bool(file_cfg[key])
            else:
                out[key] = typ(file_cfg[key])
        else:
            out[key] = default
    return out


def _int_tuple(text: str) -> tuple:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got '{text}'") from None


def _fmt(value: float) -> str:
    return f"{value:.12g}"


def _metrics_row(name: str, cm, report) -> str:
    return ",".join([
        name, str(cm.tp), str(cm.fp), str(cm.tn), str(cm.fn),
        _fmt(report.accuracy), _fmt(report.precision),
        _fmt(report.recall), _fmt(report.f1),
    ])


def _print_metrics_table(rows) -> None:
    # rows: list of (name, ConfusionMatrix, MetricReport)
    print(f"{'dataset':<10}{'tp':>8}{'fp':>8}{'tn':>8}{'fn':>8}"
          f"{'accuracy':>11}{'precision':>11}{'recall':>9}{'f1':>9}")
    for name, cm, rep in rows:
        print(f"{name:<10}{cm.tp:>8}{cm.fp:>8}{cm.tn:>8}{cm.fn:>8}"
              f"{rep.accuracy:>11.4f}{rep.precision:>11.4f}{rep.recall:>9.4f}{rep.f1:>9.4f}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_prepare(args) -> int:
    opts = _resolve(args, PREPARE_DEFAULTS)
    if not opts["input"]:
        raise ValueError("prepare needs --input pointing at an OHLC CSV")
    out_dir = Path(opts["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    raw = load_ohlc_csv(opts["input"])
    labeled = select_features(label_high15(raw, opts["horizon"]))
    train_frame, test_frame = split_train_test(labeled, opts["split"])
    stats = fit_minmax(train_frame)
    train_windows = make_windows(apply_minmax(train_frame, stats), opts["window_len"])
    test_windows = make_windows(apply_minmax(test_frame, stats), opts["window_len"])

    save_samples(out_dir / TRAIN_SAMPLES_FILE, train_windows)
    save_samples(out_dir / TEST_SAMPLES_FILE, test_windows)
    save_norm_stats(out_dir / NORM_STATS_FILE, stats)

    lines = [
        f"rows read: {len(raw) + raw.dropped_rows}",
        f"rows dropped: {raw.dropped_rows}",
        f"rows labeled: {len(labeled)} (horizon {opts['horizon']})",
        f"train/test rows: {len(train_frame)} / {len(test_frame)} (split {opts['split']})",
        f"train windows: {len(train_windows)} "
        f"label-1 fraction {np.mean(train_windows.labels):.4f}",
        f"test windows: {len(test_windows)} "
        f"label-1 fraction {np.mean(test_windows.labels):.4f}",
        f"window length: {opts['window_len']}",
    ]
    summary = "\n".join(lines) + "\n"
    (out_dir / SUMMARY_FILE).write_text(summary)
    print(summary, end="")
    return 0


def cmd_train(args) -> int:
    opts = _resolve(args, TRAIN_DEFAULTS)
    out_dir = Path(opts["out_dir"])
    data_dir = Path(opts["data_dir"]) if opts["data_dir"] else out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    train_set = load_samples(data_dir / TRAIN_SAMPLES_FILE)
    test_path = data_dir / TEST_SAMPLES_FILE
    test_set = load_samples(test_path) if test_path.exists() else None

    run = RunConfig(
        out_dir=out_dir,
        data_dir=data_dir,
        model=ModelConfig(
            in_channels=train_set.windows.shape[1],
            window_len=train_set.window_len,
            dropout_rate=opts["dropout"],
        ),
        training=TrainConfig(
            max_epochs=opts["max_epochs"],
            patience=opts["patience"],
            batch_size=opts["batch_size"],
            early_stopping=not opts["no_early_stopping"],
            seed=opts["seed"],
            validation_fraction=opts["val_fraction"],
            threshold=opts["threshold"],
            hyper=HyperParams(
                learning_rate=opts["lr"], beta1=opts["beta1"],
                beta2=opts["beta2"], epsilon=opts["epsilon"],
            ),
        ),
    )

    model = init_model(run.model, seed=opts["seed"])
    optimizer_state = AdamState(model.parameters())
    model, history = train(model, train_set, run.training,
                           eval_set=test_set, optimizer_state=optimizer_state)

    write_history_csv(out_dir / HISTORY_FILE, history)
    extras = {"adam.t": np.int64(optimizer_state.t)}
    for i, (m, s) in enumerate(zip(optimizer_state.m, optimizer_state.s)):
        extras[f"adam.m.{i}"] = m
        extras[f"adam.s.{i}"] = s
    save_checkpoint(
        out_dir / CHECKPOINT_FILE, model, extras=extras,
        meta={"best_epoch": history.best_epoch, "epochs_run": len(history),
              "seed": opts["seed"], "threshold": opts["threshold"]},
    )

    best = history.records[history.best_epoch - 1]
    print(f"trained {len(history)} epochs; best validation loss "
          f"{best.val_loss:.6f} at epoch {history.best_epoch}")

    rows = []
    cm, report, _ = evaluate(model, train_set, opts["threshold"])
    rows.append(("train", cm, report))
    if test_set is not None:
        cm, report, _ = evaluate(model, test_set, opts["threshold"])
        rows.append(("test", cm, report))
    _print_metrics_table(rows)
    return 0


def cmd_evaluate(args) -> int:
    opts = _resolve(args, EVALUATE_DEFAULTS)
    if not opts["checkpoint"]:
        raise ValueError("evaluate needs --checkpoint")
    data_paths = args.data or []
    if not data_paths:
        raise ValueError("evaluate needs at least one --data sample file")
    model, _, _ = load_checkpoint(opts["checkpoint"])
    out_dir = Path(opts["out_dir"]) if opts["out_dir"] else Path(opts["checkpoint"]).parent
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for path in data_paths:
        data = load_samples(path)
        if data.window_len != model.config.window_len:
            raise ValueError(
                f"window length mismatch: checkpoint expects {model.config.window_len}, "
                f"'{path}' has {data.window_len}"
            )
        name = Path(path).stem.replace("_samples", "")
        cm, report, _ = evaluate(model, data, opts["threshold"])
        rows.append((name, cm, report))

    lines = [METRICS_HEADER] + [_metrics_row(n, cm, rep) for n, cm, rep in rows]
    (out_dir / METRICS_FILE).write_text("\n".join(lines) + "\n")
    _print_metrics_table(rows)
    return 0


def cmd_gradcheck(args) -> int:
    opts = _resolve(args, GRADCHECK_DEFAULTS)
    filters = _int_tuple(opts["filters"]) if isinstance(opts["filters"], str) \
        else opts["filters"]
    dense = _int_tuple(opts["dense"]) if isinstance(opts["dense"], str) else opts["dense"]
    config = ModelConfig(
        in_channels=opts["in_channels"], window_len=opts["window_len"],
        conv_filters=filters, dense_units=dense, dropout_rate=0.0,
    )

    worst = None
    for r in range(opts["repeats"]):
        seed = opts["seed"] + r
        model = init_model(config, seed=seed)
        rng = np.random.default_rng(seed)
        sample = rng.standard_normal((config.in_channels, config.window_len))
        label = int(rng.integers(0, 2))
        result = grad_check(model, sample, label, epsilon=opts["fd_epsilon"],
                            max_params=opts["max_params"], rng=rng)
        print(f"seed {seed}: max relative error {result.max_rel_error:.3e} "
              f"at {result.worst_param} ({result.n_checked} parameters)")
        if worst is None or result.max_rel_error > worst.max_rel_error:
            worst = result

    ok = worst.max_rel_error <= opts["tolerance"]
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: worst relative error "
          f"{worst.max_rel_error:.3e} at {worst.worst_param} "
          f"(tolerance {opts['tolerance']:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ohlc-cnn",
        description="1-D CNN for OHLC price-movement classification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out-dir", dest="out_dir", help="output directory")

    p = sub.add_parser("prepare", help="turn an OHLC CSV into windowed samples")
    add_common(p)
    p.add_argument("--input", help="OHLC CSV path")
    p.add_argument("--horizon", type=int, help="look-ahead steps for labeling (default 15)")
    p.add_argument("--window-len", dest="window_len", type=int,
                   help="rows per training window (default 32)")
    p.add_argument("--split", type=float, help="train fraction (default 0.7)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on prepared samples")
    add_common(p)
    p.add_argument("--data-dir", dest="data_dir",
                   help="directory with prepared samples (default: --out-dir)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="default 1000")
    p.add_argument("--max-epochs", dest="max_epochs", type=int, help="default 25")
    p.add_argument("--patience", type=int, help="early-stopping patience (default 5)")
    p.add_argument("--no-early-stopping", dest="no_early_stopping",
                   action="store_const", const=True, help="run all epochs")
    p.add_argument("--dropout", type=float, help="dropout rate after dense1 (default 0.5)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.001)")
    p.add_argument("--beta1", type=float, help="momentum decay (default 0.9)")
    p.add_argument("--beta2", type=float, help="squared-gradient decay (default 0.999)")
    p.add_argument("--epsilon", type=float, help="optimizer epsilon (default 1e-8)")
    p.add_argument("--seed", type=int, help="init + shuffling + dropout seed (default 0)")
    p.add_argument("--threshold", type=float, help="classification threshold (default 0.5)")
    p.add_argument("--val-fraction", dest="val_fraction", type=float,
                   help="validation share carved from the training samples (default 0.1)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on sample files")
    add_common(p)
    p.add_argument("--checkpoint", help="checkpoint path")
    p.add_argument("--data", action="append", help="sample file (repeatable)")
    p.add_argument("--threshold", type=float, help="classification threshold (default 0.5)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="verify backprop against finite differences")
    add_common(p)
    p.add_argument("--in-channels", dest="in_channels", type=int, help="default 2")
    p.add_argument("--window-len", dest="window_len", type=int, help="default 8")
    p.add_argument("--filters", help="conv filter counts, e.g. 2,2,2")
    p.add_argument("--dense", help="dense widths, e.g. 4,4")
    p.add_argument("--seed", type=int, help="first seed (default 0)")
    p.add_argument("--repeats", type=int, help="number of seeds to try (default 1)")
    p.add_argument("--fd-epsilon", dest="fd_epsilon", type=float,
                   help="finite-difference step (default 1e-5)")
    p.add_argument("--tolerance", type=float, help="pass threshold (default 1e-4)")
    p.add_argument("--max-params", dest="max_params", type=int,
                   help="randomly subsample this many parameters")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, TrainingDivergedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
