"""Training: loss, optimiser, early stopping, the epoch loop, checkpoints.

The loop is deliberately boring. Per epoch: shuffle the training windows,
walk minibatches (the last partial one included), optionally add input
noise, run the forward in train mode under a tape, backprop, Adam step.
Validation runs in eval mode after every epoch and feeds an early stopper
with strict-improvement semantics; the best parameters are kept aside and
restored at the end, so the returned model is the best validation model,
not the last one.

Everything that draws randomness pulls from a named per-consumer stream
of the run seed, which is what makes reruns bit-identical.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import add_noise
from .errors import CheckpointError, ConfigError, NonFiniteError
from .model import LiNoConfig, Tensor, forward, init_params, param_shapes
from .seeding import stream
from .tensor import Tape, backward, mean_all, mul, sub


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over every element; gradient is 2*(pred-target)/n."""
    diff = sub(pred, target)
    return mean_all(mul(diff, diff))


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int
    m: dict
    v: dict

    @classmethod
    def fresh(cls, params: dict) -> "AdamState":
        return cls(step=0,
                   m={k: np.zeros_like(t.data) for k, t in params.items()},
                   v={k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update. Functional: returns new params and
    state. A missing gradient counts as zero (that parameter holds still);
    a non-finite gradient aborts with the parameter named."""
    b1, b2 = betas
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + eps),
                                  requires_grad=True)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(t, new_m, new_v)


# ---------------------------------------------------------------------------
# early stopping
# ---------------------------------------------------------------------------

class EarlyStopper:
    """Stop after `patience` consecutive epochs without strict improvement.

    Improvement means the new value undercuts the best seen by more than
    `min_delta`; ties and drift within tolerance burn patience.
    """

    def __init__(self, patience: int = 6, min_delta: float = 1e-7):
        self.patience = patience
        self.min_delta = min_delta
        self.best: Optional[float] = None
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Feed one validation value; returns True when it improved."""
        if self.best is None or value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 6
    min_delta: float = 1e-7
    noise_alpha: float = 0.0   # train-time input noise scale
    seed: int = 1

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("lr must be >= 0, batch_size and max_epochs >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 <= self.noise_alpha <= 1.0:
            raise ConfigError(f"noise_alpha must lie in [0, 1], got {self.noise_alpha}")


@dataclass
class TrainResult:
    params: dict
    history: list            # (epoch, train_mse, val_mse) rows
    best_epoch: int
    best_val: float
    epochs_run: int


def _predict_mse(params: dict, config: LiNoConfig, x: np.ndarray, y: np.ndarray,
                 chunk: int = 1024) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(x), chunk):
        yh = forward(x[lo:lo + chunk], params, config, mode="eval").y.data
        yb = y[lo:lo + chunk]
        total += float(((yh - yb) ** 2).sum())
        count += yb.size
    return total / count


def train(train_x: np.ndarray, train_y: np.ndarray,
          val_x: np.ndarray, val_y: np.ndarray,
          config: LiNoConfig, tcfg: TrainConfig) -> TrainResult:
    """Fit a fresh model on window pairs; arrays are [n, channels, lookback]
    and [n, channels, horizon] on the dataset's standardised scale."""
    dtype = config.np_dtype()
    train_x = np.asarray(train_x, dtype=dtype)
    train_y = np.asarray(train_y, dtype=dtype)
    val_x = np.asarray(val_x, dtype=dtype)
    val_y = np.asarray(val_y, dtype=dtype)
    if len(train_x) == 0 or len(val_x) == 0:
        raise ConfigError("train and validation splits must be non-empty")

    params = init_params(config, stream(tcfg.seed, "init"))
    state = AdamState.fresh(params)
    dropout_rng = stream(tcfg.seed, "dropout")
    noise_rng = stream(tcfg.seed, "noise")
    shuffle_rng = stream(tcfg.seed, "shuffle")
    stopper = EarlyStopper(tcfg.patience, tcfg.min_delta)

    history = []
    best_params = {k: t.data.copy() for k, t in params.items()}
    n = len(train_x)
    epochs_run = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        epochs_run = epoch
        order = shuffle_rng.permutation(n)
        sq_sum = 0.0
        for lo in range(0, n, tcfg.batch_size):
            idx = order[lo:lo + tcfg.batch_size]
            xb, yb = train_x[idx], train_y[idx]
            if tcfg.noise_alpha > 0.0:
                xb = add_noise(xb, tcfg.noise_alpha, noise_rng).astype(dtype)
            with Tape() as tape:
                res = forward(xb, params, config, mode="train", rng=dropout_rng)
                loss = mse_loss(res.y, Tensor(yb))
            backward(tape, loss)
            grads = {name: t.grad for name, t in params.items() if t.grad is not None}
            params, state = adam_step(params, grads, state, tcfg.lr)
            sq_sum += loss.item() * yb.size
        train_mse = sq_sum / train_y.size
        val_mse = _predict_mse(params, config, val_x, val_y)
        if not (np.isfinite(train_mse) and np.isfinite(val_mse)):
            raise NonFiniteError(f"training diverged at epoch {epoch}")
        history.append((epoch, train_mse, val_mse))
        if stopper.update(epoch, val_mse):
            best_params = {k: t.data.copy() for k, t in params.items()}
        if stopper.should_stop:
            break

    final = {k: Tensor(v, requires_grad=True) for k, v in best_params.items()}
    return TrainResult(params=final, history=history,
                       best_epoch=stopper.best_epoch,
                       best_val=float(stopper.best),
                       epochs_run=epochs_run)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic               8 bytes  b"LINOCKP1"
#   header length       u64
#   header              utf-8 json: {"extra": {...}, "model": {...}}
#   entry count         u32
#   per entry:
#     name length u16, name utf-8
#     dtype code  u8   (0 = float64, 1 = float32)
#     ndim        u8, dims u64 each
#     payload     raw row-major little-endian values
#   sha256 of everything above, 32 bytes
# ---------------------------------------------------------------------------

_MAGIC = b"LINOCKP1"
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def save_checkpoint(path: str, config: LiNoConfig, params: dict,
                    extra: Optional[dict] = None) -> None:
    """Serialise (config, params). Writing the same inputs twice yields
    byte-identical files."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    header = json.dumps({"extra": extra or {}, "model": asdict(config)},
                        sort_keys=True).encode()
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params)))
    for name, tensor in params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        code = _DTYPE_CODES[np.dtype(tensor.dtype)]
        buf.write(struct.pack("<BB", code, tensor.data.ndim))
        for dim in tensor.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(tensor.data.astype(_DTYPES[code])).tobytes())
    digest = hashlib.sha256(buf.getvalue()).digest()
    buf.write(digest)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str, expect: Optional[LiNoConfig] = None):
    """Read a checkpoint back as (config, params, extra).

    Verifies the magic, the trailing checksum, and that the stored tensors
    exactly match the stored configuration's declared shapes. With
    `expect` given, every structural field must agree with the stored
    model config; a mismatch is reported by field name.
    """
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(_MAGIC) + 32 or blob[:len(_MAGIC)] != _MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: integrity check failed (truncated or corrupt)")
    off = len(_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, body, off)
        off += size
        return vals if len(vals) > 1 else vals[0]

    header_len = take("<Q")
    header = json.loads(body[off:off + header_len].decode())
    off += header_len
    config = LiNoConfig(**header["model"])
    if expect is not None:
        for field_name in ("channels", "lookback", "horizon", "dim", "blocks",
                           "mlp_hidden", "variant"):
            got = getattr(config, field_name)
            want = getattr(expect, field_name)
            if got != want:
                raise CheckpointError(
                    f"{path}: checkpoint {field_name}={got}, expected {field_name}={want}")
    count = take("<I")
    shapes = param_shapes(config)
    params = {}
    for _ in range(count):
        name_len = take("<H")
        name = body[off:off + name_len].decode()
        off += name_len
        code, ndim = take("<BB")
        dims = tuple(take("<Q") for _ in range(ndim))
        dtype = _DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if dims else dtype.itemsize
        arr = np.frombuffer(body[off:off + nbytes], dtype=dtype).reshape(dims)
        off += nbytes
        if name not in shapes:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
        if dims != shapes[name]:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {dims}, config requires {shapes[name]}")
        params[name] = Tensor(arr.astype(config.np_dtype()), requires_grad=True)
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:3]}...")
    return config, params, header["extra"]
