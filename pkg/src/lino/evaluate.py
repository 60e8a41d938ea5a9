"""Metrics, benchmark report assembly, affine probing of trained blocks,
forecast decomposition export, and parameter counting."""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DataError, DimensionError
from .model import (LiNoConfig, forward, forward_normalized, li_block,
                    no_block, scoped)
from .seeding import stream
from .tensor import Tensor

# ---------------------------------------------------------------------------
# point metrics
# ---------------------------------------------------------------------------

def _paired(yhat, y):
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise DimensionError(f"metric shapes differ: {yhat.shape} vs {y.shape}")
    return yhat, y


def mse(yhat, y) -> float:
    """Mean squared residual over every element."""
    yhat, y = _paired(yhat, y)
    d = yhat - y
    return float((d * d).mean())


def mae(yhat, y) -> float:
    """Mean absolute residual over every element."""
    yhat, y = _paired(yhat, y)
    return float(np.abs(yhat - y).mean())


# ---------------------------------------------------------------------------
# split evaluation
# ---------------------------------------------------------------------------

@dataclass
class WindowMetrics:
    """Per-window errors for one split; aggregates are plain means, which
    works because every window holds the same number of elements."""

    per_window_mse: np.ndarray
    per_window_mae: np.ndarray

    @property
    def windows(self) -> int:
        return len(self.per_window_mse)

    @property
    def mse(self) -> float:
        return float(self.per_window_mse.mean())

    @property
    def mae(self) -> float:
        return float(self.per_window_mae.mean())


def evaluate(predictor, x: np.ndarray, y: np.ndarray,
             batch_size: int = 256) -> WindowMetrics:
    """Full pass over the windows of a split, deterministic and dropout-free.

    `predictor` is either a callable mapping [n, channels, lookback] to
    [n, channels, horizon] or an object with such a `predict` method.
    Metrics stay on whatever scale the targets are on; the preparation
    pipeline hands standardized windows to keep reported numbers on the
    standardized scale.
    """
    predict = getattr(predictor, "predict", predictor)
    x = np.asarray(x)
    y = np.asarray(y)
    n = x.shape[0]
    if n == 0:
        raise DataError("cannot evaluate an empty split")
    if y.shape[0] != n:
        raise DimensionError(f"{n} inputs but {y.shape[0]} targets")
    per_mse = np.empty(n, dtype=np.float64)
    per_mae = np.empty(n, dtype=np.float64)
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        pred = np.asarray(predict(x[lo:hi]), dtype=np.float64)
        if pred.shape != y[lo:hi].shape:
            raise DimensionError(
                f"prediction shape {pred.shape} != target shape {y[lo:hi].shape}")
        diff = pred - np.asarray(y[lo:hi], dtype=np.float64)
        axes = tuple(range(1, diff.ndim))
        per_mse[lo:hi] = (diff * diff).mean(axis=axes)
        per_mae[lo:hi] = np.abs(diff).mean(axis=axes)
    return WindowMetrics(per_mse, per_mae)


# ---------------------------------------------------------------------------
# benchmark report
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("dataset", "horizon", "variant", "ablation", "seed",
                  "windows", "mse", "mae")


@dataclass(frozen=True)
class ReportRow:
    dataset: str
    horizon: int
    variant: str
    ablation: str
    seed: int
    windows: int
    mse: float
    mae: float
    runtime: float = 0.0  # seconds; reported in the summary, never in tables


@dataclass
class EvalReport:
    """Raw benchmark rows plus aggregation views recomputable from them."""

    rows: list = field(default_factory=list)

    def add(self, row: ReportRow) -> None:
        self.rows.append(row)

    def table(self) -> list:
        """Stringified rows under REPORT_COLUMNS, runtime excluded so the
        emitted bytes depend only on the metrics."""
        out = []
        for r in self.rows:
            out.append([r.dataset, str(r.horizon), r.variant, r.ablation,
                        str(r.seed), str(r.windows), repr(r.mse), repr(r.mae)])
        return out

    def seed_summary(self) -> list:
        """Mean and spread over seeds per (dataset, horizon, variant,
        ablation) group, in first-appearance order."""
        groups: dict = {}
        for r in self.rows:
            key = (r.dataset, r.horizon, r.variant, r.ablation)
            groups.setdefault(key, []).append(r)
        out = []
        for key, rs in groups.items():
            ms = np.array([r.mse for r in rs])
            ma = np.array([r.mae for r in rs])
            out.append({"dataset": key[0], "horizon": key[1],
                        "variant": key[2], "ablation": key[3],
                        "seeds": len(rs),
                        "mse_mean": float(ms.mean()), "mse_std": float(ms.std()),
                        "mae_mean": float(ma.mean()), "mae_std": float(ma.std())})
        return out

    def horizon_summary(self) -> list:
        """Mean over horizons per (dataset, variant, ablation, seed) group."""
        groups: dict = {}
        for r in self.rows:
            key = (r.dataset, r.variant, r.ablation, r.seed)
            groups.setdefault(key, []).append(r)
        out = []
        for key, rs in groups.items():
            out.append({"dataset": key[0], "variant": key[1],
                        "ablation": key[2], "seed": key[3],
                        "horizons": len(rs),
                        "mse_mean": float(np.mean([r.mse for r in rs])),
                        "mae_mean": float(np.mean([r.mae for r in rs]))})
        return out

    def summary_text(self) -> str:
        """Human-readable digest; the one place runtimes appear."""
        lines = ["metrics are on the standardized scale", ""]
        for r in self.rows:
            lines.append(
                f"{r.dataset} h={r.horizon} {r.variant}/{r.ablation} seed={r.seed}: "
                f"mse={r.mse:.6f} mae={r.mae:.6f} windows={r.windows} "
                f"runtime={r.runtime:.1f}s")
        agg = self.seed_summary()
        if agg:
            lines.append("")
            for g in agg:
                lines.append(
                    f"{g['dataset']} h={g['horizon']} {g['variant']}/{g['ablation']} "
                    f"({g['seeds']} seeds): mse={g['mse_mean']:.6f}±{g['mse_std']:.6f} "
                    f"mae={g['mae_mean']:.6f}±{g['mae_std']:.6f}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# affine probing
# ---------------------------------------------------------------------------

@dataclass
class ProbedAffineMap:
    """Local affine picture of a vector map: bias from the zero vector,
    columns from unit vectors, plus the worst reconstruction error seen on
    random probes. The residual is part of the result on purpose; for a
    nonlinear map it is the honest size of what the picture leaves out."""

    matrix: np.ndarray   # [out, in]
    bias: np.ndarray     # [out]
    residual: float


def probe_affine(f: Callable, in_dim: int, probes: int = 8,
                 rng: Optional[np.random.Generator] = None) -> ProbedAffineMap:
    if rng is None:
        rng = stream(0, "probe")
    bias = np.asarray(f(np.zeros(in_dim)), dtype=np.float64)
    cols = []
    for i in range(in_dim):
        e = np.zeros(in_dim)
        e[i] = 1.0
        cols.append(np.asarray(f(e), dtype=np.float64) - bias)
    matrix = np.stack(cols, axis=1)
    worst = 0.0
    for _ in range(probes):
        xp = rng.standard_normal(in_dim)
        recon = matrix @ xp + bias
        worst = max(worst, float(np.max(np.abs(np.asarray(f(xp)) - recon))))
    return ProbedAffineMap(matrix, bias, worst)


def li_block_map(params: dict, config: LiNoConfig, level: int) -> Callable:
    """The given level's linear pattern extractor as a map on flattened
    [channels * dim] feature vectors, dropout off."""
    sc = scoped(params, f"level{level}")
    c, d = config.channels, config.dim

    def f(vec):
        h = Tensor(np.asarray(vec, dtype=config.np_dtype()).reshape(c, d))
        return li_block(h, sc["li.phi"], sc["li.beta"], 0.0, "eval").data.reshape(-1)

    return f


def no_block_map(params: dict, config: LiNoConfig, level: int) -> Callable:
    """The given level's nonlinear pattern extractor, flattened the same
    way. Probing it is a linearisation, so expect a nonzero residual."""
    sc = scoped(params, f"level{level}.no")
    c, d = config.channels, config.dim

    def f(vec):
        r = Tensor(np.asarray(vec, dtype=config.np_dtype()).reshape(c, d))
        return no_block(r, sc, config, "eval").data.reshape(-1)

    return f


def model_map(params: dict, config: LiNoConfig) -> Callable:
    """The whole forecaster on normalized inputs, [channels * lookback] ->
    [channels * horizon], for probing around the zero history."""
    c, t = config.channels, config.lookback

    def f(vec):
        xn = Tensor(np.asarray(vec, dtype=config.np_dtype()).reshape(c, t))
        y, _ = forward_normalized(xn, params, config, mode="eval")
        return y.data.reshape(-1)

    return f


# ---------------------------------------------------------------------------
# decomposition export
# ---------------------------------------------------------------------------

@dataclass
class Decomposition:
    """Additive forecast components for one window on the input's own
    scale: each level's head outputs rescaled by the window's spread, with
    the window's mean carried entirely by the first component so the
    components still sum to the forecast."""

    components: list      # (label, [channels, horizon]) pairs
    total: np.ndarray     # [channels, horizon] forecast


def export_decomposition(params: dict, config: LiNoConfig,
                         x: np.ndarray) -> Decomposition:
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"expected one [channels, lookback] window, got shape {x.shape}")
    res = forward(x, params, config, mode="eval")
    mu, sigma = res.stats
    labelled = []
    for i, lv in enumerate(res.trace.levels):
        if lv.li_pred is not None:
            labelled.append((f"level{i}.li", lv.li_pred.data))
        if lv.no_pred is not None:
            labelled.append((f"level{i}.no", lv.no_pred.data))
    if not labelled:
        labelled.append(("head", res.y_norm.data))
    components = []
    for j, (label, vals) in enumerate(labelled):
        scaled = vals * sigma
        if j == 0:
            scaled = scaled + mu
        components.append((label, scaled))
    return Decomposition(components, res.y.data)


def decomposition_table(dec: Decomposition) -> tuple:
    """(columns, rows) ready for csv writing, floats in shortest
    roundtrip form."""
    horizon = dec.total.shape[-1]
    columns = ["component", "channel"] + [f"step{k + 1}" for k in range(horizon)]
    rows = []
    for label, vals in dec.components + [("total", dec.total)]:
        for c in range(vals.shape[0]):
            rows.append([label, str(c)] + [repr(float(v)) for v in vals[c]])
    return columns, rows


# ---------------------------------------------------------------------------
# parameter counting
# ---------------------------------------------------------------------------

def param_count(params: dict) -> tuple:
    """(per-module counts, total). A module is a name's leading scope:
    `embed.w` counts under `embed`, `level0.no.mix.w1` under `level0.no`."""
    per: dict[str, int] = {}
    for name, value in params.items():
        parts = name.split(".")
        module = parts[0] if len(parts) == 2 else ".".join(parts[:2])
        arr = np.asarray(getattr(value, "data", value))
        per[module] = per.get(module, 0) + int(arr.size)
    return per, sum(per.values())
