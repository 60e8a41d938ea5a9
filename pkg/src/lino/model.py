"""Forecasting model: recursive residual decomposition into alternating
learnable linear and nonlinear patterns.

The forward pass normalises each lookback window per channel, embeds the
whole series into a feature vector of width `dim`, then runs `blocks`
levels. Every level extracts a linear pattern (causal depthwise
convolution), subtracts it, extracts a nonlinear pattern from the
remainder (time- and frequency-domain projections fused through a
saturating activation, plus cross-channel mixing and a small feedforward
stack), and subtracts that too, handing the final remainder to the next
level. Each extracted pattern gets its own affine head onto the horizon;
the forecast is the sum of all head outputs, denormalised.

Because every level's input is exactly what the previous level failed to
explain, the embedded input telescopes into the sum of all extracted
patterns plus the final remainder. That identity is load-bearing (tests
assert it to 1e-9) and exact by construction: the residuals are computed
with the same subtractions the identity claims.

Three reduced recursions (`mu`, `raw`, `ln`) are kept for comparison
studies; they share the block implementations and differ only in how
features flow between levels and where heads attach.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError
from .spectral import freq_projection, n_bins
from .tensor import (Tape, Tensor, add, causal_depthwise_conv, concat, dropout,
                     layer_norm, linear, mul, repeat_axis, softmax_axis, sub,
                     sum_axis, tanh)

VARIANTS = ("lino", "mu", "raw", "ln")
ABLATIONS = ("none", "no_li", "no_no", "no_te", "no_fe", "no_cd")


@dataclass(frozen=True)
class LiNoConfig:
    """Static shape and behaviour of one model.

    `fusion` and `integration` are test hooks: swapping the fusion
    activation for identity and stripping the nonlinear block down to the
    fused projection alone turns it into a purely affine map, which the
    structural tests rely on. The CLI never sets them.
    """

    channels: int
    lookback: int
    horizon: int
    dim: int = 256
    blocks: int = 2
    dropout: float = 0.0
    mlp_hidden: int = 0          # 0 means "same as dim"
    revin_eps: float = 1e-5
    variant: str = "lino"
    ablation: str = "none"
    dtype: str = "float64"
    fusion: str = "tanh"
    integration: bool = True

    def __post_init__(self):
        if self.channels < 1 or self.lookback < 1 or self.horizon < 1:
            raise ConfigError(
                f"channels/lookback/horizon must be positive, got "
                f"{self.channels}/{self.lookback}/{self.horizon}")
        if self.dim < 2 or self.dim % 2 != 0:
            raise ConfigError(f"dim must be even and >= 2 for the frequency path, got {self.dim}")
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.mlp_hidden < 0:
            raise ConfigError(f"mlp_hidden must be >= 0, got {self.mlp_hidden}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant {self.variant!r} not in {VARIANTS}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation {self.ablation!r} not in {ABLATIONS}")
        if self.ablation != "none" and self.variant != "lino":
            raise ConfigError("ablations are defined for the primary variant only")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.fusion not in ("tanh", "identity"):
            raise ConfigError(f"fusion must be tanh or identity, got {self.fusion!r}")
        if self.revin_eps <= 0:
            raise ConfigError("revin_eps must be positive")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden if self.mlp_hidden else self.dim

    @property
    def bins(self) -> int:
        return n_bins(self.dim)

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def with_(self, **kw) -> "LiNoConfig":
        return replace(self, **kw)


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-bound, bound, size=(n_in, n_out))


def param_shapes(config: LiNoConfig) -> dict:
    """Name -> shape for every parameter, in canonical order. The single
    source of truth for checkpoint validation and parameter counting."""
    c, t, f = config.channels, config.lookback, config.horizon
    d, h, b = config.dim, config.hidden, config.bins
    shapes: dict[str, tuple] = {"embed.w": (t, d), "embed.b": (d,)}
    for i in range(config.blocks):
        p = f"level{i}"
        shapes.update({
            f"{p}.li.phi": (c, d), f"{p}.li.beta": (c,),
            f"{p}.li_head.w": (d, f), f"{p}.li_head.b": (f,),
            f"{p}.no.time.w": (d, d), f"{p}.no.time.b": (d,),
            f"{p}.no.freq.w_re": (b, b), f"{p}.no.freq.w_im": (b, b),
            f"{p}.no.mix.w1": (2 * d, h), f"{p}.no.mix.b1": (h,),
            f"{p}.no.mix.w2": (h, d), f"{p}.no.mix.b2": (d,),
            f"{p}.no.norm1.gamma": (d,), f"{p}.no.norm1.beta": (d,),
            f"{p}.no.ff.w1": (d, h), f"{p}.no.ff.b1": (h,),
            f"{p}.no.ff.w2": (h, d), f"{p}.no.ff.b2": (d,),
            f"{p}.no.norm2.gamma": (d,), f"{p}.no.norm2.beta": (d,),
            f"{p}.no_head.w": (d, f), f"{p}.no_head.b": (f,),
        })
    return shapes


def init_params(config: LiNoConfig, rng: np.random.Generator) -> dict:
    """Fresh parameter dict, insertion-ordered by name.

    Conventions: convolution kernels start at zero so every level's linear
    pattern begins as nothing rather than noise; the complex frequency
    weights start near identity so the frequency path begins as a
    near-pass-through; all plain biases start at zero; weight matrices are
    Glorot-uniform.
    """
    c, t, f = config.channels, config.lookback, config.horizon
    d, h, b = config.dim, config.hidden, config.bins
    out: dict[str, Tensor] = {}

    def put(name, arr):
        out[name] = Tensor(np.asarray(arr, dtype=config.np_dtype()), requires_grad=True)

    put("embed.w", _glorot(rng, t, d))
    put("embed.b", np.zeros(d))
    for i in range(config.blocks):
        p = f"level{i}"
        put(f"{p}.li.phi", np.zeros((c, d)))
        put(f"{p}.li.beta", np.zeros(c))
        put(f"{p}.li_head.w", _glorot(rng, d, f))
        put(f"{p}.li_head.b", np.zeros(f))
        put(f"{p}.no.time.w", _glorot(rng, d, d))
        put(f"{p}.no.time.b", np.zeros(d))
        put(f"{p}.no.freq.w_re", np.eye(b) + rng.normal(0.0, 0.01, size=(b, b)))
        put(f"{p}.no.freq.w_im", rng.normal(0.0, 0.01, size=(b, b)))
        put(f"{p}.no.mix.w1", _glorot(rng, 2 * d, h))
        put(f"{p}.no.mix.b1", np.zeros(h))
        put(f"{p}.no.mix.w2", _glorot(rng, h, d))
        put(f"{p}.no.mix.b2", np.zeros(d))
        put(f"{p}.no.norm1.gamma", np.ones(d))
        put(f"{p}.no.norm1.beta", np.zeros(d))
        put(f"{p}.no.ff.w1", _glorot(rng, d, h))
        put(f"{p}.no.ff.b1", np.zeros(h))
        put(f"{p}.no.ff.w2", _glorot(rng, h, d))
        put(f"{p}.no.ff.b2", np.zeros(d))
        put(f"{p}.no.norm2.gamma", np.ones(d))
        put(f"{p}.no.norm2.beta", np.zeros(d))
        put(f"{p}.no_head.w", _glorot(rng, d, f))
        put(f"{p}.no_head.b", np.zeros(f))
    expected = param_shapes(config)
    assert list(out) == list(expected) and all(
        out[k].shape == expected[k] for k in out), "init drifted from declared shapes"
    return out


def scoped(params: dict, prefix: str) -> dict:
    """View of a parameter dict with one `prefix.` stripped."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# instance normalisation
# ---------------------------------------------------------------------------

def revin_stats(x: np.ndarray, eps: float):
    """Per-channel mean and eps-guarded scale over the trailing axis.

    The scale is sqrt(population variance + eps); denormalisation uses
    the same quantity, which makes the roundtrip exact regardless of eps.
    """
    mu = x.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    return mu, sigma


def revin_normalize(x: np.ndarray, eps: float):
    mu, sigma = revin_stats(x, eps)
    return (x - mu) / sigma, (mu, sigma)


def revin_denormalize(y_norm: Tensor, stats, horizon: int) -> Tensor:
    """Differentiable inverse map back onto each window's own scale."""
    mu, sigma = stats
    shape = y_norm.shape
    s = Tensor(np.broadcast_to(sigma.astype(y_norm.dtype), shape).copy())
    m = Tensor(np.broadcast_to(mu.astype(y_norm.dtype), shape).copy())
    return add(mul(y_norm, s), m)


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

def li_block(h: Tensor, phi: Tensor, beta: Tensor, p: float, mode: str,
             rng: Optional[np.random.Generator] = None) -> Tensor:
    """Linear pattern extractor: full-receptive-field causal depthwise
    convolution, then dropout."""
    return dropout(causal_depthwise_conv(h, phi, beta), p, mode, rng)


def no_block(r: Tensor, p: dict, config: LiNoConfig, mode: str,
             rng: Optional[np.random.Generator] = None) -> Tensor:
    """Nonlinear pattern extractor.

    `p` holds this block's parameters under local names (see
    `init_params`; strip the level prefix with `scoped`). Steps: project
    the remainder in the time domain and the frequency domain, sum and
    saturate; mix channels through softmax-weighted pooling and an MLP on
    the concatenated [own features, pooled summary]; integrate with two
    residual layer-norm stages around a feedforward MLP.
    """
    c = r.shape[-2]
    parts = []
    if config.ablation != "no_te":
        parts.append(linear(r, p["time.w"], p["time.b"]))
    if config.ablation != "no_fe":
        parts.append(freq_projection(r, p["freq.w_re"], p["freq.w_im"]))
    if not parts:
        pre = Tensor(np.zeros(r.shape, dtype=r.dtype))
    elif len(parts) == 1:
        pre = parts[0]
    else:
        pre = add(parts[0], parts[1])
    ntf = tanh(pre) if config.fusion == "tanh" else pre
    if not config.integration:
        return ntf
    if config.ablation != "no_cd":
        w = softmax_axis(ntf, axis=-2)
        pooled = sum_axis(mul(w, ntf), axis=-2, keepdims=True)
        stacked = concat([ntf, repeat_axis(pooled, -2, c)], axis=-1)
        hidden = tanh(linear(stacked, p["mix.w1"], p["mix.b1"]))
        mixed = linear(hidden, p["mix.w2"], p["mix.b2"])
        fused = add(ntf, mixed)
    else:
        fused = ntf
    stage1 = layer_norm(fused, p["norm1.gamma"], p["norm1.beta"])
    ff = linear(tanh(linear(stage1, p["ff.w1"], p["ff.b1"])), p["ff.w2"], p["ff.b2"])
    return layer_norm(add(stage1, ff), p["norm2.gamma"], p["norm2.beta"])


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

@dataclass
class LevelTrace:
    """Patterns and head outputs of one level, normalised scale."""

    li_pattern: Tensor
    no_pattern: Tensor
    li_pred: Optional[Tensor]
    no_pred: Optional[Tensor]


@dataclass
class ForwardTrace:
    """Everything the decomposition and completeness checks need."""

    embedded: Tensor
    levels: list
    final_remainder: Tensor
    terms: list = field(default_factory=list)  # head outputs, accumulation order


def _zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape, dtype=t.dtype))


def forward_normalized(xn: Tensor, params: dict, config: LiNoConfig,
                       mode: str = "eval",
                       rng: Optional[np.random.Generator] = None):
    """Run the configured recursion on an already-normalised input.

    xn: [..., channels, lookback]. Returns (y_norm, ForwardTrace) with
    y_norm: [..., channels, horizon]. The trace's `terms` list is the
    exact sequence summed into y_norm, so `sum(terms) == y_norm` bitwise.
    """
    if xn.shape[-2] != config.channels or xn.shape[-1] != config.lookback:
        raise ConfigError(
            f"input trailing shape {xn.shape[-2:]} != "
            f"({config.channels}, {config.lookback})")
    h = linear(xn, params["embed.w"], params["embed.b"])
    fn = {"lino": _forward_lino, "mu": _forward_mu,
          "raw": _forward_raw, "ln": _forward_ln}[config.variant]
    return fn(h, params, config, mode, rng)


def _accumulate(terms):
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def _forward_lino(h, params, config, mode, rng):
    embedded = h
    levels, terms = [], []
    for i in range(config.blocks):
        sc = scoped(params, f"level{i}")
        if config.ablation == "no_li":
            li_pat, li_pred = _zeros_like(h), None
            r = h
        else:
            li_pat = li_block(h, sc["li.phi"], sc["li.beta"], config.dropout, mode, rng)
            li_pred = linear(li_pat, sc["li_head.w"], sc["li_head.b"])
            r = sub(h, li_pat)
            terms.append(li_pred)
        if config.ablation == "no_no":
            no_pat, no_pred = _zeros_like(r), None
            h = r
        else:
            no_pat = no_block(r, scoped(sc, "no"), config, mode, rng)
            no_pred = linear(no_pat, sc["no_head.w"], sc["no_head.b"])
            h = sub(r, no_pat)
            terms.append(no_pred)
        levels.append(LevelTrace(li_pat, no_pat, li_pred, no_pred))
    y = _accumulate(terms)
    return y, ForwardTrace(embedded, levels, h, terms)


def _forward_mu(h, params, config, mode, rng):
    """Comparison recursion: one pattern per level; the nonlinear block
    reads the linear block's output and only the combined pattern is
    subtracted from the running features."""
    embedded = h
    levels, terms = [], []
    for i in range(config.blocks):
        sc = scoped(params, f"level{i}")
        li_pat = li_block(h, sc["li.phi"], sc["li.beta"], config.dropout, mode, rng)
        no_pat = no_block(li_pat, scoped(sc, "no"), config, mode, rng)
        pred = linear(no_pat, sc["no_head.w"], sc["no_head.b"])
        h = sub(h, no_pat)
        terms.append(pred)
        levels.append(LevelTrace(li_pat, no_pat, None, pred))
    y = _accumulate(terms)
    return y, ForwardTrace(embedded, levels, h, terms)


def _forward_raw(h, params, config, mode, rng):
    """Comparison recursion: blocks chained feature-to-feature with no
    subtraction anywhere; a single head reads the last level's features."""
    embedded = h
    levels = []
    for i in range(config.blocks):
        sc = scoped(params, f"level{i}")
        li_pat = li_block(h, sc["li.phi"], sc["li.beta"], config.dropout, mode, rng)
        no_pat = no_block(li_pat, scoped(sc, "no"), config, mode, rng)
        h = no_pat
        levels.append(LevelTrace(li_pat, no_pat, None, None))
    last = scoped(params, f"level{config.blocks - 1}")
    y = linear(h, last["no_head.w"], last["no_head.b"])
    return y, ForwardTrace(embedded, levels, h, [y])


def _forward_ln(h, params, config, mode, rng):
    """Comparison recursion: chained like `raw` but every block keeps its
    own head; still no residual subtraction."""
    embedded = h
    levels, terms = [], []
    for i in range(config.blocks):
        sc = scoped(params, f"level{i}")
        li_pat = li_block(h, sc["li.phi"], sc["li.beta"], config.dropout, mode, rng)
        li_pred = linear(li_pat, sc["li_head.w"], sc["li_head.b"])
        no_pat = no_block(li_pat, scoped(sc, "no"), config, mode, rng)
        no_pred = linear(no_pat, sc["no_head.w"], sc["no_head.b"])
        h = no_pat
        terms.extend([li_pred, no_pred])
        levels.append(LevelTrace(li_pat, no_pat, li_pred, no_pred))
    y = _accumulate(terms)
    return y, ForwardTrace(embedded, levels, h, terms)


@dataclass
class ForwardResult:
    y: Tensor                      # forecast on the input's own scale
    y_norm: Tensor                 # forecast before denormalisation
    stats: tuple                   # (mu, sigma) used by the window
    trace: ForwardTrace


def forward(x, params: dict, config: LiNoConfig, mode: str = "eval",
            rng: Optional[np.random.Generator] = None) -> ForwardResult:
    """Full pass on raw windows [..., channels, lookback]."""
    x = np.asarray(x, dtype=config.np_dtype())
    xn, stats = revin_normalize(x, config.revin_eps)
    y_norm, trace = forward_normalized(Tensor(xn), params, config, mode, rng)
    y = revin_denormalize(y_norm, stats, config.horizon)
    return ForwardResult(y, y_norm, stats, trace)


class Forecaster:
    """Bound (params, config) pair with an eval-mode prediction surface."""

    def __init__(self, params: dict, config: LiNoConfig):
        self.params = params
        self.config = config

    def predict(self, x: np.ndarray) -> np.ndarray:
        return forward(x, self.params, self.config, mode="eval").y.data

    def predict_normalized(self, xn: np.ndarray) -> np.ndarray:
        y, _ = forward_normalized(Tensor(np.asarray(xn, dtype=self.config.np_dtype())),
                                  self.params, self.config, mode="eval")
        return y.data
