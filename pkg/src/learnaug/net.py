"""Minimal reverse-mode classifier and optimizer rules.

Layers: dense, 3x3 same-padding conv, relu, 2x2 max-pool, flatten, with a
softmax cross-entropy head. All trainable weights live in one flat
float64 vector; the init-time snapshot w0 doubles as the prior mean of
the weight-norm term in the generalization bound. Forward/backward can
run in float32 for speed; gradients are always returned in float64.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np


def _fan_in_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _layer_param_count(layer: dict) -> int:
    t = layer["type"]
    if t == "dense":
        return layer["din"] * layer["dout"] + layer["dout"]
    if t == "conv3x3":
        return layer["cout"] * layer["cin"] * 9 + layer["cout"]
    if t in ("relu", "maxpool2", "flatten"):
        return 0
    raise ValueError(f"unknown layer type {t!r}")


def param_count(layer_spec) -> int:
    return sum(_layer_param_count(l) for l in layer_spec)


@dataclass
class ModelParams:
    """Flat weight vector, its init snapshot, and the architecture graph."""

    layer_spec: list
    input_shape: tuple
    w: np.ndarray
    w0: np.ndarray

    @property
    def p(self) -> int:
        return self.w.size

    def slices(self):
        out, start = [], 0
        for layer in self.layer_spec:
            n = _layer_param_count(layer)
            out.append(slice(start, start + n))
            start += n
        return out


def build_model(layer_spec, input_shape, rng) -> ModelParams:
    """Initialize weights with uniform fan-in scaling; snapshot them as w0."""
    chunks = []
    for layer in layer_spec:
        t = layer["type"]
        if t == "dense":
            din, dout = layer["din"], layer["dout"]
            chunks.append(_fan_in_init(rng, (din * dout,), din))
            chunks.append(_fan_in_init(rng, (dout,), din))
        elif t == "conv3x3":
            cin, cout = layer["cin"], layer["cout"]
            chunks.append(_fan_in_init(rng, (cout * cin * 9,), cin * 9))
            chunks.append(_fan_in_init(rng, (cout,), cin * 9))
    w = np.concatenate(chunks) if chunks else np.zeros(0)
    params = ModelParams(list(layer_spec), tuple(input_shape), w, w.copy())
    if params.p != param_count(layer_spec):
        raise AssertionError("parameter layout mismatch")
    return params


def mlp_spec(input_shape=(1, 28, 28), hidden=256, classes=10):
    din = int(np.prod(input_shape))
    return [
        {"type": "flatten"},
        {"type": "dense", "din": din, "dout": hidden},
        {"type": "relu"},
        {"type": "dense", "din": hidden, "dout": classes},
    ]


def cnn5_spec(input_shape=(1, 28, 28), classes=10, widths=(16, 32, 32, 64, 64)):
    """Five 3x3 convolutions (two 2x2 pools) and one fully connected layer.

    Pooling sits right after the first and third convs so most of the
    depth runs at quarter resolution.
    """
    c, h, w = input_shape
    w1, w2, w3, w4, w5 = widths
    return [
        {"type": "conv3x3", "cin": c, "cout": w1},
        {"type": "relu"},
        {"type": "maxpool2"},
        {"type": "conv3x3", "cin": w1, "cout": w2},
        {"type": "relu"},
        {"type": "conv3x3", "cin": w2, "cout": w3},
        {"type": "relu"},
        {"type": "maxpool2"},
        {"type": "conv3x3", "cin": w3, "cout": w4},
        {"type": "relu"},
        {"type": "conv3x3", "cin": w4, "cout": w5},
        {"type": "relu"},
        {"type": "flatten"},
        {"type": "dense", "din": w5 * (h // 4) * (w // 4), "dout": classes},
    ]


def feature_mlp_spec(in_dim=2, hidden=64, classes=2):
    return [
        {"type": "dense", "din": in_dim, "dout": hidden},
        {"type": "relu"},
        {"type": "dense", "din": hidden, "dout": classes},
    ]


# --- layer forward/backward ------------------------------------------------
# Each forward returns (output, cache); each backward consumes the cotangent
# and returns (grad_input, grad_w_flat or None).


def _dense_fwd(x, wflat, layer):
    din, dout = layer["din"], layer["dout"]
    W = wflat[: din * dout].reshape(din, dout)
    b = wflat[din * dout :]
    return x @ W + b, (x, W)


def _dense_bwd(g, cache, layer):
    x, W = cache
    gw = np.concatenate([(x.T @ g).ravel(), g.sum(axis=0)])
    return g @ W.T, gw


def _im2col(x):
    # (n, cin, h, w) -> column matrix (n*h*w, cin*9) for a same-padded 3x3 conv
    n, cin, h, w = x.shape
    xp = np.zeros((n, cin, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1 : 1 + h, 1 : 1 + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # (n, cin, h, w, 3, 3) -> (n, h, w, cin, 3, 3), one contiguous copy
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * h * w, cin * 9)


def _conv3x3_fwd(x, wflat, layer):
    n, cin, h, w = x.shape
    cout = layer["cout"]
    W = wflat[: cout * cin * 9].reshape(cout, cin * 9)
    b = wflat[cout * cin * 9 :]
    cols = _im2col(x)
    out = cols @ W.T + b
    out = np.ascontiguousarray(out.reshape(n, h, w, cout).transpose(0, 3, 1, 2))
    return out, (cols, W, x.shape)


def _conv3x3_bwd(g, cache, layer):
    cols, W, (n, cin, h, w) = cache
    cout = g.shape[1]
    g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * h * w, cout)
    gW = g2d.T @ cols  # (cout, cin*9)
    gb = g2d.sum(axis=0)
    gcols = (g2d @ W).reshape(n, h, w, cin, 3, 3)
    gxp = np.zeros((n, cin, h + 2, w + 2), dtype=g.dtype)
    for ki in range(3):
        for kj in range(3):
            gxp[:, :, ki : ki + h, kj : kj + w] += gcols[:, :, :, :, ki, kj].transpose(
                0, 3, 1, 2
            )
    gw = np.concatenate([gW.ravel(), gb])
    return gxp[:, :, 1 : 1 + h, 1 : 1 + w], gw


def _relu_fwd(x, wflat, layer):
    mask = x > 0
    return x * mask, mask


def _relu_bwd(g, cache, layer):
    return g * cache, None


def _maxpool2_fwd(x, wflat, layer):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=4)
    out = np.take_along_axis(win, arg[..., None], axis=4)[..., 0]
    return out, (arg, (n, c, h, w))


def _maxpool2_bwd(g, cache, layer):
    arg, (n, c, h, w) = cache
    gwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
    np.put_along_axis(gwin, arg[..., None], g[..., None], axis=4)
    gx = (
        gwin.reshape(n, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )
    return gx, None


def _flatten_fwd(x, wflat, layer):
    return x.reshape(x.shape[0], -1), x.shape


def _flatten_bwd(g, cache, layer):
    return g.reshape(cache), None


_FWD = {
    "dense": _dense_fwd,
    "conv3x3": _conv3x3_fwd,
    "relu": _relu_fwd,
    "maxpool2": _maxpool2_fwd,
    "flatten": _flatten_fwd,
}
_BWD = {
    "dense": _dense_bwd,
    "conv3x3": _conv3x3_bwd,
    "relu": _relu_bwd,
    "maxpool2": _maxpool2_bwd,
    "flatten": _flatten_bwd,
}


def _check_input(params: ModelParams, batch) -> np.ndarray:
    x = np.asarray(batch)
    if x.shape[1:] != params.input_shape:
        raise ValueError(
            f"input shape {x.shape[1:]} does not match model {params.input_shape}"
        )
    return x


def _logits(params: ModelParams, x, dtype):
    w = params.w.astype(dtype, copy=False)
    caches = []
    for layer, sl in zip(params.layer_spec, params.slices()):
        x, cache = _FWD[layer["type"]](x, w[sl], layer)
        caches.append(cache)
    return x, caches


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(params: ModelParams, batch, dtype=np.float64) -> np.ndarray:
    """Class probabilities, one softmax-normalized row per input."""
    x = _check_input(params, batch).astype(dtype, copy=False)
    logits, _ = _logits(params, x, dtype)
    return _softmax(logits)


@dataclass
class LossGrad:
    loss: float
    grad_w: np.ndarray
    grad_input: np.ndarray
    sample_losses: np.ndarray
    probs: np.ndarray


def loss_and_grad(params: ModelParams, batch, labels, dtype=np.float64) -> LossGrad:
    """Mean cross-entropy with its weight gradient and per-sample input
    gradients (the latter unscaled by 1/n, ready for per-sample chains)."""
    x = _check_input(params, batch).astype(dtype, copy=False)
    labels = np.asarray(labels)
    n = x.shape[0]
    if labels.shape != (n,):
        raise ValueError("labels must be one integer per sample")
    logits, caches = _logits(params, x, dtype)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    probs = _softmax(logits)
    eps = np.finfo(dtype).tiny
    sample_losses = -np.log(np.maximum(probs[np.arange(n), labels], eps))
    # Per-sample cotangent; summing grad_w over samples and dividing by n
    # afterwards gives the mean-loss gradient.
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    grad_w = np.zeros(params.p)
    slices = params.slices()
    for layer, sl, cache in zip(
        reversed(params.layer_spec), reversed(slices), reversed(caches)
    ):
        g, gw = _BWD[layer["type"]](g, cache, layer)
        if gw is not None:
            grad_w[sl] = gw.astype(np.float64)
    return LossGrad(
        loss=float(sample_losses.mean()),
        grad_w=grad_w / n,
        grad_input=g.astype(np.float64),
        sample_losses=sample_losses.astype(np.float64),
        probs=probs.astype(np.float64),
    )


# --- optimizers --------------------------------------------------------------


@dataclass
class OptimState:
    """Update rule, cosine-annealing horizon and moment buffers."""

    kind: str
    lr: float
    horizon: int
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)


def make_optimizer(kind, lr, horizon, p, momentum=0.9, weight_decay=0.0) -> OptimState:
    if kind not in ("sgd-nesterov", "adam"):
        raise ValueError(f"unknown optimizer {kind!r}")
    return OptimState(
        kind=kind,
        lr=lr,
        horizon=int(horizon),
        momentum=momentum,
        weight_decay=weight_decay,
        m=np.zeros(p),
        v=np.zeros(p),
    )


def cosine_lr(state: OptimState) -> float:
    frac = min(state.t, state.horizon) / max(state.horizon, 1)
    return state.lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def optimizer_step(state: OptimState, params: ModelParams, grad) -> None:
    """Apply one update in place; weight decay is decoupled from the loss."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient; aborting run")
    lr = cosine_lr(state)
    if state.weight_decay:
        params.w *= 1.0 - lr * state.weight_decay
    if state.kind == "sgd-nesterov":
        state.m = state.momentum * state.m + grad
        params.w -= lr * (grad + state.momentum * state.m)
    else:  # adam
        t = state.t + 1
        state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
        state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad**2
        mhat = state.m / (1.0 - state.beta1**t)
        vhat = state.v / (1.0 - state.beta2**t)
        params.w -= lr * mhat / (np.sqrt(vhat) + state.eps)
    state.t += 1


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams, opt: OptimState | None, extra: dict | None = None):
    """Versioned npz dump of the architecture, weights and optimizer state."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "layer_spec": params.layer_spec,
        "input_shape": list(params.input_shape),
        "extra": extra or {},
    }
    arrays = {"w": params.w, "w0": params.w0, "meta": np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8)}
    if opt is not None:
        arrays.update(
            opt_m=opt.m,
            opt_v=opt.v,
            opt_scalar=np.array(
                [opt.t, opt.lr, opt.horizon, opt.momentum, opt.beta1, opt.beta2,
                 opt.eps, opt.weight_decay]
            ),
            opt_kind=np.frombuffer(opt.kind.encode(), dtype=np.uint8),
        )
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path):
    """Returns (params, opt_state or None, extra dict)."""
    try:
        data = np.load(path)
    except Exception as exc:
        raise ValueError(f"unreadable checkpoint {path}: {exc}") from exc
    if "meta" not in data or "w" not in data:
        raise ValueError(f"checkpoint {path} is missing required fields")
    meta = json.loads(bytes(data["meta"]).decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    params = ModelParams(
        meta["layer_spec"], tuple(meta["input_shape"]), data["w"].copy(), data["w0"].copy()
    )
    opt = None
    if "opt_kind" in data:
        t, lr, horizon, momentum, b1, b2, eps, wd = data["opt_scalar"]
        opt = OptimState(
            kind=bytes(data["opt_kind"]).decode(),
            lr=float(lr),
            horizon=int(horizon),
            momentum=float(momentum),
            beta1=float(b1),
            beta2=float(b2),
            eps=float(eps),
            weight_decay=float(wd),
            t=int(t),
            m=data["opt_m"].copy(),
            v=data["opt_v"].copy(),
        )
    return params, opt, meta["extra"]
