"""Command-line entry point.

Commands bind a flat key=value config file (plus flag overrides) to the
training, ablation, noise-robustness, decomposition, probing, and
synthetic-data workflows. Every command is a pure function of its config,
seeds, and input files: metric files rerun bitwise identical.
"""

import argparse
import csv
import os
import sys
import time

import numpy as np

from .data import (ETT_SPLIT_COUNTS, SplitSpec, SynthSpec, load_csv,
                   prepare, save_csv, synth_generate)
from .errors import ConfigError, DataError, DimensionError, NonFiniteError
from .evaluate import (REPORT_COLUMNS, EvalReport, ReportRow,
                       decomposition_table, evaluate, export_decomposition,
                       li_block_map, model_map, no_block_map, probe_affine)
from .model import (ABLATIONS, VARIANTS, Forecaster, LiNoConfig)
from .seeding import stream
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

# keys a config file may set, with their parsers; list-valued keys take
# comma-separated values
_SCHEMA = {
    "dataset": str,
    "lookback": int,
    "horizons": [int],
    "seeds": [int],
    "dim": int,
    "blocks": int,
    "dropout": float,
    "variant": str,
    "ablation": str,
    "lr": float,
    "batch": int,
    "epochs": int,
    "patience": int,
    "alpha": float,
    "alphas": [float],
    "out": str,
    "checkpoint": str,
    "univariate": bool,
    "window": int,
    "val_ratio": float,
    "test_ratio": float,
    "synth_length": int,
    "synth_channels": int,
    "synth_components": int,
    "synth_seed": int,
    "synth_noise": float,
    "synth_linear": float,
    "synth_nonlinear": float,
}

_DEFAULTS = {
    "dataset": "synth",
    "lookback": 96,
    "horizons": [96],
    "seeds": [1],
    "dim": 256,
    "blocks": 2,
    "dropout": 0.0,
    "variant": "lino",
    "ablation": "none",
    "lr": 1e-4,
    "batch": 32,
    "epochs": 100,
    "patience": 6,
    "alpha": 0.0,
    "alphas": [0.0, 0.25, 0.5, 0.75, 1.0],
    "out": "",
    "checkpoint": "",
    "univariate": False,
    "window": 0,
    "val_ratio": 0.1,
    "test_ratio": 0.2,
    "synth_length": 2000,
    "synth_channels": 3,
    "synth_components": 1,
    "synth_seed": 0,
    "synth_noise": 0.1,
    "synth_linear": 1.0,
    "synth_nonlinear": 1.0,
}

# the sweep values the training recipes are known to behave under; other
# combinations need an explicit opt-out
_GRID = {
    "dim": (256, 512),
    "blocks": (1, 2, 3, 4),
    "dropout": (0.0, 0.2, 0.5),
    "lr": (1e-3, 1e-4, 1e-5),
    "batch": (32, 64, 128, 256),
}

_TRAINING_COMMANDS = ("train", "ablate", "noise")


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(key: str, text: str):
    kind = _SCHEMA[key]
    if isinstance(kind, list):
        return [kind[0](part.strip()) for part in text.split(",") if part.strip()]
    if kind is bool:
        return _parse_bool(text)
    return kind(text)


def parse_config_file(path: str) -> dict:
    """Flat key=value settings, one per line, `#` starts a comment."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path} line {lineno}: expected key = value, got {raw.strip()!r}")
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in _SCHEMA:
                raise ConfigError(f"{path} line {lineno}: unknown key {key!r}")
            try:
                out[key] = _parse_value(key, text)
            except ValueError as exc:
                raise ConfigError(f"{path} line {lineno}: bad value for {key}: {exc}") from None
    return out


class RunConfig:
    """Resolved settings for one command, precedence CLI > file > defaults."""

    def __init__(self, command: str, settings: dict, unsafe_grid: bool = False):
        self.command = command
        self.unsafe_grid = unsafe_grid
        for key, value in settings.items():
            setattr(self, key, value)

    def validate(self) -> None:
        if any(h < 1 for h in self.horizons) or not self.horizons:
            raise ConfigError(f"horizons must be positive, got {self.horizons}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for a in list(self.alphas) + [self.alpha]:
            if not 0.0 <= a <= 1.0:
                raise ConfigError(f"noise alpha must lie in [0, 1], got {a}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}, expected one of {ABLATIONS}")
        if self.command in _TRAINING_COMMANDS and not self.unsafe_grid:
            for key, allowed in _GRID.items():
                value = getattr(self, key)
                if value not in allowed:
                    raise ConfigError(
                        f"{key}={value} is outside the supported sweep {allowed}; "
                        "pass --unsafe-grid to run it anyway")
        if self.command in _TRAINING_COMMANDS + ("decompose",):
            if self.dataset != "synth" and not os.path.exists(self.dataset):
                raise DataError(f"dataset not found: {self.dataset}")

    # -- derived pieces ----------------------------------------------------

    def dataset_stem(self) -> str:
        if self.dataset == "synth":
            return "synth"
        return os.path.splitext(os.path.basename(self.dataset))[0]

    def run_dir(self) -> str:
        return self.out or os.path.join("runs", f"{self.command}_{self.dataset_stem()}")

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(length=self.synth_length, channels=self.synth_channels,
                         s_components=self.synth_components, seed=self.synth_seed,
                         noise_sigma=self.synth_noise,
                         linear_amplitude=self.synth_linear,
                         nonlinear_amplitude=self.synth_nonlinear)

    def split_spec(self) -> SplitSpec:
        stem = self.dataset_stem().lower()
        for prefix, counts in ETT_SPLIT_COUNTS.items():
            if stem.startswith(prefix):
                return SplitSpec(counts=counts)
        train_ratio = 1.0 - self.val_ratio - self.test_ratio
        return SplitSpec(ratios=(train_ratio, self.val_ratio, self.test_ratio))

    def load_values(self) -> np.ndarray:
        if self.dataset == "synth":
            return synth_generate(self.synth_spec()).values
        values, _ = load_csv(self.dataset)
        if self.univariate:
            values = values[:, -1:]
        return values

    def model_config(self, channels: int, horizon: int) -> LiNoConfig:
        return LiNoConfig(channels=channels, lookback=self.lookback,
                          horizon=horizon, dim=self.dim, blocks=self.blocks,
                          dropout=self.dropout, variant=self.variant,
                          ablation=self.ablation)

    def train_config(self, seed: int, alpha: float = None) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch,
                           max_epochs=self.epochs, patience=self.patience,
                           noise_alpha=self.alpha if alpha is None else alpha,
                           seed=seed)


# ---------------------------------------------------------------------------
# file helpers
# ---------------------------------------------------------------------------

def _write_table(path: str, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def _write_text(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def _fit_one(rc: RunConfig, values, spec, horizon, seed, alpha=None,
             variant=None, ablation=None):
    """Train one model and score it on the test split. Returns
    (config, result, metrics, history_rows, runtime)."""
    prep = prepare(values, spec, rc.lookback, horizon)
    config = rc.model_config(values.shape[1], horizon)
    if variant is not None:
        config = config.with_(variant=variant, ablation="none")
    if ablation is not None:
        config = config.with_(ablation=ablation)
    started = time.time()
    result = train(*prep.train, *prep.val, config, rc.train_config(seed, alpha))
    metrics = evaluate(Forecaster(result.params, config), *prep.test)
    history = [[str(horizon), str(seed), str(e), repr(tr), repr(va)]
               for e, tr, va in result.history]
    return config, result, metrics, history, time.time() - started


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(rc: RunConfig) -> int:
    values = rc.load_values()
    spec = rc.split_spec()
    outd = rc.run_dir()
    os.makedirs(outd, exist_ok=True)
    report = EvalReport()
    history_rows = []
    combos = [(h, s) for h in rc.horizons for s in rc.seeds]
    for horizon, seed in combos:
        config, result, metrics, history, runtime = _fit_one(
            rc, values, spec, horizon, seed)
        report.add(ReportRow(rc.dataset_stem(), horizon, rc.variant, rc.ablation,
                             seed, metrics.windows, metrics.mse, metrics.mae,
                             runtime))
        history_rows.extend(history)
        name = "checkpoint" if len(combos) == 1 else f"checkpoint_h{horizon}_s{seed}"
        save_checkpoint(os.path.join(outd, name), config, result.params,
                        extra={"seed": seed, "best_epoch": result.best_epoch,
                               "best_val": result.best_val})
    _write_table(os.path.join(outd, "history.csv"),
                 ("horizon", "seed", "epoch", "train_mse", "val_mse"),
                 history_rows)
    _write_table(os.path.join(outd, "report.csv"), REPORT_COLUMNS, report.table())
    _write_text(os.path.join(outd, "summary.txt"), report.summary_text())
    print(report.summary_text(), end="")
    print(f"wrote {outd}")
    return 0


def cmd_ablate(rc: RunConfig) -> int:
    values = rc.load_values()
    spec = rc.split_spec()
    outd = rc.run_dir()
    os.makedirs(outd, exist_ok=True)
    report = EvalReport()
    val_mse = {}
    for ablation in ABLATIONS:
        for horizon in rc.horizons:
            for seed in rc.seeds:
                _, result, metrics, _, runtime = _fit_one(
                    rc, values, spec, horizon, seed, ablation=ablation)
                report.add(ReportRow(rc.dataset_stem(), horizon, rc.variant,
                                     ablation, seed, metrics.windows,
                                     metrics.mse, metrics.mae, runtime))
                val_mse.setdefault((ablation, horizon), []).append(result.best_val)
    rows = []
    agg = report.seed_summary()
    full = {g["horizon"]: g["mse_mean"] for g in agg if g["ablation"] == "none"}
    for g in agg:
        rel = (g["mse_mean"] - full[g["horizon"]]) / full[g["horizon"]]
        vals = val_mse[(g["ablation"], g["horizon"])]
        rows.append([g["ablation"], str(g["horizon"]), str(g["seeds"]),
                     repr(float(np.mean(vals))), repr(g["mse_mean"]),
                     repr(g["mae_mean"]), repr(rel)])
    _write_table(os.path.join(outd, "report.csv"), REPORT_COLUMNS, report.table())
    _write_table(os.path.join(outd, "ablation.csv"),
                 ("ablation", "horizon", "seeds", "val_mse_mean", "mse_mean",
                  "mae_mean", "mse_vs_full"),
                 rows)
    _write_text(os.path.join(outd, "summary.txt"), report.summary_text())
    print(report.summary_text(), end="")
    print(f"wrote {outd}")
    return 0


def cmd_noise(rc: RunConfig) -> int:
    values = rc.load_values()
    spec = rc.split_spec()
    outd = rc.run_dir()
    os.makedirs(outd, exist_ok=True)
    horizon = rc.horizons[0]
    sweep = ("lino", "mu", "raw")
    rows = []
    curves = {v: [] for v in sweep}
    lines = ["training-noise sweep, metrics on the standardized test split", ""]
    for variant in sweep:
        for alpha in rc.alphas:
            seed_mse = []
            for seed in rc.seeds:
                _, _, metrics, _, runtime = _fit_one(
                    rc, values, spec, horizon, seed, alpha=alpha, variant=variant)
                rows.append([variant, repr(float(alpha)), str(horizon), str(seed),
                             str(metrics.windows), repr(metrics.mse),
                             repr(metrics.mae)])
                seed_mse.append(metrics.mse)
                lines.append(f"{variant} alpha={alpha:g} seed={seed}: "
                             f"mse={metrics.mse:.6f} runtime={runtime:.1f}s")
            curves[variant].append((alpha, float(np.mean(seed_mse))))
    _write_table(os.path.join(outd, "noise.csv"),
                 ("variant", "alpha", "horizon", "seed", "windows", "mse", "mae"),
                 rows)
    lines.append("")
    for variant in sweep:
        curve = curves[variant]
        monotone = all(b[1] >= a[1] for a, b in zip(curve, curve[1:]))
        path = ", ".join(f"{a:g}:{m:.4f}" for a, m in curve)
        lines.append(f"{variant}: {path} (monotone degradation: {'yes' if monotone else 'no'})")
    gap = curves["raw"][-1][1] - curves["lino"][-1][1]
    lines.append(f"raw minus lino at alpha={curves['lino'][-1][0]:g}: {gap:+.6f}")
    _write_text(os.path.join(outd, "summary.txt"), "\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {outd}")
    return 0


def cmd_decompose(rc: RunConfig) -> int:
    outd = rc.run_dir()
    ckpt = rc.checkpoint or os.path.join(outd, "checkpoint")
    config, params, _ = load_checkpoint(ckpt)
    values = rc.load_values()
    if values.shape[1] != config.channels:
        raise DataError(f"dataset has {values.shape[1]} channels, "
                        f"checkpoint expects {config.channels}")
    prep = prepare(values, rc.split_spec(), config.lookback, config.horizon)
    x_test, _ = prep.test
    if not 0 <= rc.window < len(x_test):
        raise ConfigError(f"window index {rc.window} outside [0, {len(x_test)})")
    os.makedirs(outd, exist_ok=True)
    dec = export_decomposition(params, config, x_test[rc.window])
    columns, rows = decomposition_table(dec)
    _write_table(os.path.join(outd, "decomposition.csv"), columns, rows)
    print(f"wrote {os.path.join(outd, 'decomposition.csv')} "
          f"({len(dec.components)} components + total)")
    return 0


def cmd_probe(rc: RunConfig) -> int:
    outd = rc.run_dir()
    ckpt = rc.checkpoint or os.path.join(outd, "checkpoint")
    config, params, _ = load_checkpoint(ckpt)
    weights_dir = os.path.join(outd, "weights")
    os.makedirs(weights_dir, exist_ok=True)
    rng = stream(rc.seeds[0], "probe")
    targets = [("model", model_map(params, config),
                config.channels * config.lookback)]
    for level in range(config.blocks):
        targets.append((f"level{level}.li", li_block_map(params, config, level),
                        config.channels * config.dim))
        targets.append((f"level{level}.no", no_block_map(params, config, level),
                        config.channels * config.dim))
    residual_rows = []
    for name, fn, in_dim in targets:
        probed = probe_affine(fn, in_dim, rng=rng)
        save_csv(os.path.join(weights_dir, f"{name}.matrix.csv"), probed.matrix,
                 [f"in{j}" for j in range(probed.matrix.shape[1])])
        save_csv(os.path.join(weights_dir, f"{name}.bias.csv"), probed.bias[None, :],
                 [f"out{j}" for j in range(len(probed.bias))])
        residual_rows.append([name, str(probed.matrix.shape[0]),
                              str(probed.matrix.shape[1]), repr(probed.residual)])
    _write_table(os.path.join(weights_dir, "residuals.csv"),
                 ("map", "rows", "cols", "residual"), residual_rows)
    print(f"wrote {weights_dir} ({len(targets)} probed maps)")
    return 0


def cmd_synth(rc: RunConfig) -> int:
    outd = rc.run_dir()
    os.makedirs(outd, exist_ok=True)
    result = synth_generate(rc.synth_spec())
    save_csv(os.path.join(outd, "synth.csv"), result.values, result.columns)
    for part, series in result.components.items():
        save_csv(os.path.join(outd, f"synth_{part}.csv"), series, result.columns)
    print(f"wrote {os.path.join(outd, 'synth.csv')} "
          f"({result.values.shape[0]} points, {result.values.shape[1]} channels)")
    return 0


_DISPATCH = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "noise": cmd_noise,
    "decompose": cmd_decompose,
    "probe": cmd_probe,
    "synth": cmd_synth,
}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lino",
        description="Forecasting workbench: recursive linear/nonlinear "
                    "pattern decomposition models.")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in _DISPATCH:
        p = sub.add_parser(command)
        p.add_argument("--config", help="flat key=value settings file")
        p.add_argument("--dataset", help="CSV path, or 'synth' for the built-in generator")
        p.add_argument("--horizon", type=int, help="single forecast horizon")
        p.add_argument("--blocks", type=int, help="decomposition levels")
        p.add_argument("--dim", type=int, help="embedding width")
        p.add_argument("--dropout", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)
        p.add_argument("--seed", type=int, help="single training seed")
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--ablate", choices=ABLATIONS, dest="ablation")
        p.add_argument("--alpha", type=float, help="training-noise level")
        p.add_argument("--out", help="run directory")
        p.add_argument("--unsafe-grid", action="store_true",
                       help="allow settings outside the supported sweep")
    return parser


def resolve(argv) -> RunConfig:
    args = build_parser().parse_args(argv)
    settings = dict(_DEFAULTS)
    if args.config:
        settings.update(parse_config_file(args.config))
    overrides = {
        "dataset": args.dataset,
        "dim": args.dim,
        "blocks": args.blocks,
        "dropout": args.dropout,
        "lr": args.lr,
        "batch": args.batch,
        "variant": args.variant,
        "ablation": args.ablation,
        "alpha": args.alpha,
        "out": args.out,
    }
    for key, value in overrides.items():
        if value is not None:
            settings[key] = value
    if args.horizon is not None:
        settings["horizons"] = [args.horizon]
    if args.seed is not None:
        settings["seeds"] = [args.seed]
    if args.alpha is not None:
        settings["alphas"] = [args.alpha]
    rc = RunConfig(args.command, settings, unsafe_grid=args.unsafe_grid)
    rc.validate()
    return rc


def main(argv=None) -> int:
    try:
        rc = resolve(argv)
        return _DISPATCH[rc.command](rc)
    except (ConfigError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
