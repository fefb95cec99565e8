"""Small from-scratch MLP that maps a stereo pixel pair to a 3D point.

Architecture is fixed at 4 -> 128 -> 64 -> 16 -> 3 with Leaky ReLU on the
hidden layers and a linear output. Inputs are pixel coordinates divided by
the image width; outputs are metres. Training minimises mean absolute error
with NAdam and early stopping on validation MAE.

All parameters live in one flat float64 vector; ``MlpNet.layers`` hands out
``(weight, bias)`` views into it, which keeps the optimizer update to a
handful of vector operations.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptWeights, DivergedLoss, ShapeMismatch, ValidationError

log = logging.getLogger(__name__)

LAYER_SIZES = (4, 128, 64, 16, 3)
DEFAULT_ALPHA = 0.01
DEFAULT_INPUT_SCALE = 1.0 / 1024.0

_MAGIC = b"MLP1"
_META = b"META"


def _param_count(sizes) -> int:
    return sum(o * i + o for i, o in zip(sizes[:-1], sizes[1:]))


class MlpNet:
    """Weights of the triangulation network.

    ``input_scale`` multiplies raw pixel inputs before the first layer
    (1 / image width by default).
    """

    def __init__(self, params=None, leak_alpha: float = DEFAULT_ALPHA,
                 input_scale: float = DEFAULT_INPUT_SCALE, sizes=LAYER_SIZES):
        self.sizes = tuple(int(s) for s in sizes)
        n = _param_count(self.sizes)
        if params is None:
            params = np.zeros(n)
        params = np.array(params, dtype=np.float64).ravel()
        if params.size != n:
            raise ShapeMismatch(f"expected {n} parameters, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise ValidationError("network parameters must be finite")
        self.params = params
        self.leak_alpha = float(leak_alpha)
        self.input_scale = float(input_scale)
        self.layers = []
        off = 0
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            w = self.params[off:off + fan_in * fan_out].reshape(fan_out, fan_in)
            off += fan_in * fan_out
            b = self.params[off:off + fan_out]
            off += fan_out
            self.layers.append((w, b))

    @classmethod
    def glorot(cls, seed: int = 0, **kwargs) -> "MlpNet":
        """Glorot-uniform weights, zero biases."""
        net = cls(**kwargs)
        rng = np.random.default_rng(seed)
        for w, b in net.layers:
            fan_out, fan_in = w.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w[...] = rng.uniform(-limit, limit, w.shape)
        return net

    def copy(self) -> "MlpNet":
        return MlpNet(self.params.copy(), self.leak_alpha, self.input_scale, self.sizes)

    def __eq__(self, other):
        if not isinstance(other, MlpNet):
            return NotImplemented
        return (self.sizes == other.sizes and self.leak_alpha == other.leak_alpha
                and self.input_scale == other.input_scale
                and np.array_equal(self.params, other.params))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    patience: int = 10
    max_epochs: int = 150
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    momentum_decay: float = 0.004
    # reduce-on-plateau decay of the step size; lr_factor=1 keeps it constant
    lr_factor: float = 0.5
    lr_patience: int = 3
    min_lr: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be > 0")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValidationError("max_epochs and batch_size must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValidationError("beta1 and beta2 must lie in (0, 1)")
        if not 0 < self.lr_factor <= 1 or self.lr_patience < 1:
            raise ValidationError("lr_factor must lie in (0, 1] and lr_patience be >= 1")


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    mu_product: float = 1.0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "OptimizerState":
        return cls(np.zeros_like(params), np.zeros_like(params))


@dataclass
class TrainReport:
    epochs_run: int
    best_epoch: int
    best_val_mae: float
    train_mae: float
    loss_history: list = field(default_factory=list)


def leaky_relu(x, alpha: float = DEFAULT_ALPHA):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, x, alpha * x)
    return float(out) if out.ndim == 0 else out


def _affine_exact(a: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # einsum keeps per-row summation order independent of batch size
    return np.einsum("nk,mk->nm", a, w) + b


def predict_batch(net: MlpNet, inputs) -> np.ndarray:
    """Run ``n`` pixel quadruples through the net in one pass; returns (n, 3) metres."""
    a = np.asarray(inputs, dtype=np.float64).reshape(-1, net.sizes[0]) * net.input_scale
    last = len(net.layers) - 1
    for k, (w, b) in enumerate(net.layers):
        a = _affine_exact(a, w, b)
        if k < last:
            a = np.where(a >= 0, a, net.leak_alpha * a)
    return a


def forward(net: MlpNet, x) -> np.ndarray:
    return predict_batch(net, np.asarray(x, dtype=np.float64)[None, :])[0]


def _predict_fast(net: MlpNet, inputs: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """BLAS forward pass for metrics during training; not bit-stable across batch sizes."""
    out = []
    last = len(net.layers) - 1
    for s in range(0, len(inputs), chunk):
        a = inputs[s:s + chunk] * net.input_scale
        for k, (w, b) in enumerate(net.layers):
            a = a @ w.T + b
            if k < last:
                a = np.where(a >= 0, a, net.leak_alpha * a)
        out.append(a)
    return np.vstack(out) if out else np.zeros((0, net.sizes[-1]))


def mae_loss(pred, truth) -> float:
    """Mean absolute error over batch and coordinates, metres in, centimetres out."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return float(np.mean(np.abs(pred - truth)) * 100.0)


def backward(net: MlpNet, inputs, targets) -> tuple[float, np.ndarray]:
    """Loss (cm) and its gradient w.r.t. ``net.params`` (flat, same layout).

    Subgradient 0 is used where a residual is exactly zero and where a
    hidden pre-activation is exactly zero.
    """
    x = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if len(x) == 0:
        raise ValidationError("backward needs a non-empty batch")
    acts = [x * net.input_scale]
    pres = []
    last = len(net.layers) - 1
    for k, (w, b) in enumerate(net.layers):
        z = acts[-1] @ w.T + b
        pres.append(z)
        acts.append(np.where(z >= 0, z, net.leak_alpha * z) if k < last else z)
    resid = acts[-1] - y
    loss = float(np.mean(np.abs(resid)) * 100.0)
    grad = np.empty_like(net.params)
    delta = np.sign(resid) * (100.0 / resid.size)
    off = len(grad)
    for k in range(last, -1, -1):
        w, b = net.layers[k]
        if k < last:
            z = pres[k]
            delta = delta * np.where(z > 0, 1.0, np.where(z < 0, net.leak_alpha, 0.0))
        gb = delta.sum(axis=0)
        gw = delta.T @ acts[k]
        off -= gb.size
        grad[off:off + gb.size] = gb
        off -= gw.size
        grad[off:off + gw.size] = gw.ravel()
        if k > 0:
            delta = delta @ w
    return loss, grad


def nadam_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray,
               cfg: TrainConfig, lr: float | None = None) -> None:
    """One NAdam update (Adam with Nesterov momentum and momentum-decay schedule), in place."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeMismatch("params, grads and optimizer state must share a shape")
    lr = cfg.learning_rate if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    state.step += 1
    t = state.step
    mu = b1 * (1.0 - 0.5 * 0.96 ** (t * cfg.momentum_decay))
    mu_next = b1 * (1.0 - 0.5 * 0.96 ** ((t + 1) * cfg.momentum_decay))
    state.mu_product *= mu
    mu_prod_next = state.mu_product * mu_next
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    denom = np.sqrt(state.v / (1.0 - b2 ** t)) + cfg.epsilon
    params -= (lr * (1.0 - mu) / (1.0 - state.mu_product)) * grads / denom
    params -= (lr * mu_next / (1.0 - mu_prod_next)) * state.m / denom


class EarlyStopping:
    """Tracks the best validation score; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.wait = 0

    def update(self, epoch: int, score: float) -> bool:
        if score < self.best:
            self.best = score
            self.best_epoch = epoch
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def train(net: MlpNet, train_set, val_set, cfg: TrainConfig | None = None,
          on_epoch=None) -> tuple[MlpNet, TrainReport]:
    """Fit ``net`` (copied, not mutated) and return the best-validation weights.

    ``train_set``/``val_set`` are ``(inputs, targets)`` pairs or objects with
    ``pixels``/``points`` arrays.
    """
    cfg = cfg or TrainConfig()
    xtr, ytr = _unpack(train_set)
    xva, yva = _unpack(val_set)
    if len(xtr) == 0 or len(xva) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    net = net.copy()
    state = OptimizerState.zeros_like(net.params)
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience)
    best_params = net.params.copy()
    history = []
    n = len(xtr)
    epoch = 0
    lr = cfg.learning_rate
    since_drop = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grad = backward(net, xtr[idx], ytr[idx])
            if not np.isfinite(loss):
                raise DivergedLoss(f"training loss became {loss} in epoch {epoch}")
            total += loss * len(idx)
            nadam_step(state, net.params, grad, cfg, lr)
        train_mae = total / n
        val_mae = mae_loss(_predict_fast(net, xva), yva)
        history.append((epoch, train_mae, val_mae, lr))
        if on_epoch is not None:
            on_epoch(epoch, train_mae, val_mae)
        log.info("epoch %d train %.4f cm val %.4f cm", epoch, train_mae, val_mae)
        improved = val_mae < stopper.best
        stop = stopper.update(epoch, val_mae)
        if improved:
            best_params[...] = net.params
            since_drop = 0
        else:
            since_drop += 1
            if since_drop >= cfg.lr_patience and cfg.lr_factor < 1:
                lr = max(lr * cfg.lr_factor, cfg.min_lr)
                since_drop = 0
        if stop:
            break
    best = MlpNet(best_params, net.leak_alpha, net.input_scale, net.sizes)
    report = TrainReport(
        epochs_run=epoch,
        best_epoch=stopper.best_epoch,
        best_val_mae=float(stopper.best),
        train_mae=mae_loss(_predict_fast(best, xtr), ytr),
        loss_history=history,
    )
    return best, report


def _unpack(data) -> tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "pixels"):
        return data.pixels, data.points
    x, y = data
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


def write_history(report: TrainReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_mae_cm,val_mae_cm,learning_rate\n")
        for epoch, tr, va, lr in report.loss_history:
            fh.write(f"{epoch},{tr!r},{va!r},{lr!r}\n")


# Weight file layout (little-endian):
#   b"MLP1", uint32 layer_count,
#   per layer: uint32 rows, uint32 cols, rows*cols float64 (row-major), rows float64 bias,
#   optional trailer b"META", float64 input_scale, float64 leak_alpha.

def save_weights(net: MlpNet, path) -> None:
    parts = [_MAGIC, struct.pack("<I", len(net.layers))]
    for w, b in net.layers:
        parts.append(struct.pack("<II", *w.shape))
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    parts.append(_META + struct.pack("<dd", net.input_scale, net.leak_alpha))
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> MlpNet:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptWeights(f"{path}: {exc}") from exc
    if blob[:4] != _MAGIC:
        raise CorruptWeights(f"{path}: bad magic {blob[:4]!r}")
    pos = 4

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(blob):
            raise CorruptWeights(f"{path}: truncated at byte {pos}")
        chunk = blob[pos:pos + nbytes]
        pos += nbytes
        return chunk

    (count,) = struct.unpack("<I", take(4))
    if count != len(LAYER_SIZES) - 1:
        raise CorruptWeights(f"{path}: shape: expected {len(LAYER_SIZES) - 1} layers, got {count}")
    chunks = []
    for k in range(count):
        rows, cols = struct.unpack("<II", take(8))
        want = (LAYER_SIZES[k + 1], LAYER_SIZES[k])
        if (rows, cols) != want:
            raise CorruptWeights(f"{path}: shape: layer {k} is {rows}x{cols}, expected {want[0]}x{want[1]}")
        chunks.append(np.frombuffer(take(8 * rows * cols), dtype="<f8"))
        chunks.append(np.frombuffer(take(8 * rows), dtype="<f8"))
    scale, alpha = DEFAULT_INPUT_SCALE, DEFAULT_ALPHA
    rest = blob[pos:]
    if rest:
        if len(rest) != 20 or rest[:4] != _META:
            raise CorruptWeights(f"{path}: {len(rest)} unexpected trailing bytes")
        scale, alpha = struct.unpack("<dd", rest[4:])
    params = np.concatenate(chunks).astype(np.float64)
    if not np.all(np.isfinite(params)):
        raise CorruptWeights(f"{path}: non-finite parameters")
    return MlpNet(params, alpha, scale)
