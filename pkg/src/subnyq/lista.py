"""Unfolded ISTA network with 1-D convolutional layers, trained with a signed log loss.

Each layer computes ``x <- S(conv(We_k, phi) + conv(Wt_k, x), lam_k)`` with the smooth
shrinkage ``S(v, lam) = v * sigmoid(|v| - lam)``; a last convolution maps the code to
the output line.  Convolutions are cross-correlations with zero padding and
"same" output length.  Gradients are derived by hand (reverse mode).
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"SNQLISTA"
MODEL_VERSION = 1
PARAM_NAMES = ("we", "wt", "rho", "g")


class ModelFileError(ValueError):
    """Corrupt, truncated or incompatible model file."""


class ShapeError(ValueError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


@dataclass
class ListaModel:
    """Parameters of the unfolded network.

    ``we``: (K, C, 1, taps), ``wt``: (K, C, C, taps), ``rho``: (K,) with
    ``lam = softplus(rho)``, ``g``: (1, C, g_taps).
    """

    we: np.ndarray
    wt: np.ndarray
    rho: np.ndarray
    g: np.ndarray
    n: int
    fixed_g: bool = False
    gain: float = 1.0  # output scale restoring target units after per-line normalization

    def __post_init__(self):
        for name in PARAM_NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        K = self.rho.shape[0]
        if K < 1:
            raise ShapeError("at least one layer is required")
        if self.we.shape[0] != K or self.wt.shape[0] != K:
            raise ShapeError("layer count mismatch between parameters")
        if self.we.shape[-1] % 2 == 0 or self.g.shape[-1] % 2 == 0:
            raise ShapeError("kernels must have odd length")
        if not all(np.all(np.isfinite(getattr(self, p))) for p in PARAM_NAMES):
            raise ValueError("non-finite model parameters")

    @property
    def layers(self) -> int:
        return self.rho.shape[0]

    @property
    def channels(self) -> int:
        return self.we.shape[1]

    @property
    def taps(self) -> int:
        return self.we.shape[-1]

    @property
    def lambdas(self) -> np.ndarray:
        return softplus(self.rho)

    def trainable(self) -> tuple[str, ...]:
        return PARAM_NAMES[:3] if self.fixed_g else PARAM_NAMES

    def parameter_count(self) -> int:
        return sum(getattr(self, p).size for p in self.trainable())

    def copy(self) -> "ListaModel":
        return ListaModel(self.we.copy(), self.wt.copy(), self.rho.copy(), self.g.copy(), self.n, self.fixed_g,
                          self.gain)

    def params(self) -> dict:
        return {p: getattr(self, p) for p in PARAM_NAMES}


def init_model(layers: int = 30, n: int = 1920, channels: int = 1, taps: int = 5, seed: int = 0,
               lam0: float = 0.1, g_kernel: np.ndarray | None = None) -> ListaModel:
    """Glorot-uniform filters, thresholds at ``lam0``; ``g_kernel`` fixes the output layer."""
    rng = np.random.default_rng(seed)

    def glorot(shape):
        out_ch, in_ch, k = shape[-3:]
        limit = math.sqrt(6.0 / (k * in_ch + k * out_ch))
        return rng.uniform(-limit, limit, size=shape)

    we = glorot((layers, channels, 1, taps))
    wt = glorot((layers, channels, channels, taps))
    rho = np.full(layers, inv_softplus(lam0))
    if g_kernel is None:
        g = glorot((1, channels, taps))
        fixed = False
    else:
        g = np.zeros((1, channels, len(g_kernel)))
        g[0, 0] = np.asarray(g_kernel, dtype=float)
        fixed = True
    return ListaModel(we, wt, rho, g, n, fixed)


# --- convolution primitives --------------------------------------------------

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p)))


def conv(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``y[b, o, i] = sum_{c, j} w[o, c, j] * x[b, c, i + j - p]`` with zero padding."""
    k = w.shape[-1]
    p = k // 2
    n = x.shape[-1]
    xp = _pad(x, p)
    if w.shape[0] == 1 and w.shape[1] == 1:
        y = w[0, 0, 0] * xp[:, :, 0:n]
        for j in range(1, k):
            y = y + w[0, 0, j] * xp[:, :, j:j + n]
        return y
    y = np.zeros((x.shape[0], w.shape[0], n))
    for j in range(k):
        y += np.einsum("oc,bcn->bon", w[:, :, j], xp[:, :, j:j + n])
    return y


def conv_backward(w: np.ndarray, x: np.ndarray, dy: np.ndarray, need_dx: bool = True):
    """Gradients of :func:`conv` w.r.t. ``w`` and ``x`` given the upstream ``dy``."""
    k = w.shape[-1]
    p = k // 2
    n = x.shape[-1]
    xp = _pad(x, p)
    dw = np.empty_like(w)
    for j in range(k):
        dw[:, :, j] = np.einsum("bon,bcn->oc", dy, xp[:, :, j:j + n])
    if not need_dx:
        return dw, None
    dyp = _pad(dy, p)
    if w.shape[0] == 1 and w.shape[1] == 1:
        dx = w[0, 0, 0] * dyp[:, :, 2 * p:2 * p + n]
        for j in range(1, k):
            dx = dx + w[0, 0, j] * dyp[:, :, 2 * p - j:2 * p - j + n]
        return dw, dx
    dx = np.zeros_like(x)
    for j in range(k):
        dx += np.einsum("oc,bon->bcn", w[:, :, j], dyp[:, :, 2 * p - j:2 * p - j + n])
    return dw, dx


def sigmoid_shrink(x, lam: float) -> np.ndarray:
    """``x / (1 + exp(-(|x| - lam)))``."""
    if np.any(np.asarray(lam) < 0):
        raise ValueError("threshold must be non-negative")
    x = np.asarray(x, dtype=float)
    return x * expit(np.abs(x) - lam)


# --- forward / loss / backward -------------------------------------------------

def _as_batch(phi, n: int) -> tuple[np.ndarray, bool]:
    phi = np.asarray(phi, dtype=float)
    single = phi.ndim == 1
    batch = phi[None, :] if single else phi
    if batch.shape[-1] != n:
        raise ShapeError(f"model expects lines of {n} samples, got {batch.shape[-1]}")
    return batch, single


def forward(model: ListaModel, phi, return_cache: bool = False):
    """Run the network; returns ``(phi_hat, code)`` (and the tape when ``return_cache``)."""
    batch, single = _as_batch(phi, model.n)
    y = batch[:, None, :]
    lams = model.lambdas
    x = np.zeros((batch.shape[0], model.channels, model.n))
    xs, pres, gates = [x], [], []
    for k in range(model.layers):
        pre = conv(model.we[k], y) + conv(model.wt[k], x)
        s = expit(np.abs(pre) - lams[k])
        x = pre * s
        if return_cache:
            pres.append(pre)
            gates.append(s)
            xs.append(x)
    out = conv(model.g, x)[:, 0, :]
    code = x[:, 0, :] if model.channels == 1 else x
    result = (out[0], code[0]) if single else (out, code)
    if return_cache:
        return result + ({"y": y, "xs": xs, "pres": pres, "gates": gates},)
    return result


def smsle_loss(phi_hat, phi_das, epsilon: float = 1e-6):
    """Signed mean squared log error; per line when given stacks.

    ``0.5 * mean((log10(p+ + eps) - log10(d+ + eps))^2) + 0.5 * mean(... negative parts ...)``
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    a = np.asarray(phi_hat, dtype=float)
    b = np.asarray(phi_das, dtype=float)
    ep = np.log10(np.maximum(a, 0) + epsilon) - np.log10(np.maximum(b, 0) + epsilon)
    en = np.log10(np.maximum(-a, 0) + epsilon) - np.log10(np.maximum(-b, 0) + epsilon)
    return 0.5 * np.mean(ep**2, axis=-1) + 0.5 * np.mean(en**2, axis=-1)


def _smsle_grad(a: np.ndarray, b: np.ndarray, epsilon: float) -> np.ndarray:
    ap = np.maximum(a, 0) + epsilon
    an = np.maximum(-a, 0) + epsilon
    ep = np.log10(ap) - np.log10(np.maximum(b, 0) + epsilon)
    en = np.log10(an) - np.log10(np.maximum(-b, 0) + epsilon)
    n = a.shape[-1]
    ln10 = math.log(10.0)
    return (ep * (a > 0) / ap - en * (a < 0) / an) / (n * ln10)


def loss_and_gradients(model: ListaModel, phi, phi_das, epsilon: float = 1e-6) -> tuple[float, dict]:
    """Summed SMSLE over the batch and its exact gradient for every parameter."""
    batch, _ = _as_batch(phi, model.n)
    target, _ = _as_batch(phi_das, model.n)
    out, _, tape = forward(model, batch, return_cache=True)
    loss = float(np.sum(smsle_loss(out, target, epsilon)))
    grads = {name: np.zeros_like(getattr(model, name)) for name in PARAM_NAMES}
    dout = _smsle_grad(out, target, epsilon)[:, None, :]
    xs, pres, gates, y = tape["xs"], tape["pres"], tape["gates"], tape["y"]
    dg, dx = conv_backward(model.g, xs[-1], dout)
    grads["g"] = dg
    sig_rho = expit(model.rho)
    for k in range(model.layers - 1, -1, -1):
        pre, s = pres[k], gates[k]
        ds = s * (1.0 - s)
        dpre = dx * (s + pre * ds * np.sign(pre))
        grads["rho"][k] = -np.sum(dx * pre * ds) * sig_rho[k]
        grads["we"][k], _ = conv_backward(model.we[k], y, dpre, need_dx=False)
        grads["wt"][k], dx = conv_backward(model.wt[k], xs[k], dpre, need_dx=k > 0)
    if model.fixed_g:
        grads["g"] = np.zeros_like(model.g)
    return loss, grads


def gradients(model: ListaModel, phi, phi_das, epsilon: float = 1e-6) -> dict:
    return loss_and_gradients(model, phi, phi_das, epsilon)[1]


# --- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs_max: int = 120
    lr_init: float = 1e-3
    patience: int = 5
    factor: float = 0.5
    lr_floor: float = 1e-6
    batch_size: int = 16
    seed: int = 0
    epsilon: float = 1e-6
    min_delta: float = 1e-4

    def __post_init__(self):
        if not self.lr_init > 0:
            raise ValueError("lr_init must be positive")
        if self.epochs_max < 1:
            raise ValueError("epochs_max must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


class Adam:
    def __init__(self, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class TrainResult:
    model: ListaModel
    history: list[float] = field(default_factory=list)
    lr_history: list[float] = field(default_factory=list)


def train(inputs, targets, model: ListaModel, config: TrainConfig | None = None, callback=None) -> TrainResult:
    """Adam on mini-batches with a reduce-on-plateau learning rate; deterministic under the seed.

    ``inputs``/``targets`` are (lines, N) arrays.  The epoch loss is the mean per-line
    loss over the epoch's mini-batches.
    """
    config = TrainConfig() if config is None else config
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if inputs.ndim != 2 or len(inputs) == 0:
        raise ValueError("training set must be a non-empty (lines, N) array")
    if inputs.shape != targets.shape:
        raise ShapeError("inputs and targets differ in shape")
    if inputs.shape[1] != model.n:
        raise ShapeError(f"model expects lines of {model.n} samples")
    model = model.copy()
    params = {name: getattr(model, name) for name in model.trainable()}
    opt = Adam(params, config.lr_init)
    rng = np.random.default_rng(config.seed)
    best, wait = np.inf, 0
    result = TrainResult(model)
    n = len(inputs)
    for epoch in range(config.epochs_max):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = loss_and_gradients(model, inputs[idx], targets[idx], config.epsilon)
            scale = 1.0 / len(idx)
            opt.step(params, {k: grads[k] * scale for k in params})
            total += loss
        epoch_loss = total / n
        result.history.append(epoch_loss)
        result.lr_history.append(opt.lr)
        if epoch_loss < best * (1.0 - config.min_delta):
            best, wait = epoch_loss, 0
        else:
            wait += 1
            if wait >= config.patience:
                opt.lr = max(opt.lr * config.factor, min(config.lr_floor, opt.lr))
                wait = 0
        if callback is not None:
            callback(epoch, epoch_loss, opt.lr)
        logger.debug("epoch %d loss %.6f lr %.2e", epoch, epoch_loss, opt.lr)
    return result


# --- persistence ---------------------------------------------------------------

def _flat(model: ListaModel) -> np.ndarray:
    return np.concatenate([getattr(model, p).ravel() for p in PARAM_NAMES]).astype("<f8")


def save_model(model: ListaModel, path, train_config: TrainConfig | None = None) -> None:
    body = _flat(model).tobytes()
    header = {
        "version": MODEL_VERSION,
        "K": model.layers,
        "kernel_size": model.taps,
        "N": model.n,
        "C": model.channels,
        "g_taps": int(model.g.shape[-1]),
        "fixed_g": bool(model.fixed_g),
        "gain": float(model.gain),
        "training_config_hash": train_config.digest() if train_config else None,
        "payload_sha256": hashlib.sha256(body).hexdigest(),
        "payload_bytes": len(body),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    buf.write(body)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> ListaModel:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MODEL_MAGIC:
        raise ModelFileError(f"{path}: not a model file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFileError(f"{path}: corrupt header") from exc
    if header.get("version") != MODEL_VERSION:
        raise ModelFileError(f"{path}: model version {header.get('version')} is not {MODEL_VERSION}")
    body = raw[12 + hlen:]
    if len(body) != header["payload_bytes"] or hashlib.sha256(body).hexdigest() != header["payload_sha256"]:
        raise ModelFileError(f"{path}: truncated or corrupt parameter block")
    K, C, k, gk = header["K"], header["C"], header["kernel_size"], header["g_taps"]
    flat = np.frombuffer(body, dtype="<f8")
    shapes = [(K, C, 1, k), (K, C, C, k), (K,), (1, C, gk)]
    parts, off = [], 0
    for shp in shapes:
        size = int(np.prod(shp))
        parts.append(flat[off:off + size].reshape(shp).copy())
        off += size
    if off != flat.size:
        raise ModelFileError(f"{path}: parameter block does not match header shapes")
    return ListaModel(*parts, n=header["N"], fixed_g=header["fixed_g"], gain=header.get("gain", 1.0))
