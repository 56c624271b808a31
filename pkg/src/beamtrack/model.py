"""Stacked LSTM with a dense head, trained by backpropagation through time.

Pure numpy. Parameters live in a flat ``dict`` keyed ``lstm{l}.Wx``,
``lstm{l}.Wh``, ``lstm{l}.b`` and ``head.W``, ``head.b``; gate columns are
ordered input, forget, candidate, output. Optimizer steps replace the arrays
rather than mutating them, which is what lets :func:`backward` detect a
forward cache computed against older parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, InvalidStateError, NumericError, ShapeError, TrainingFailure

logger = logging.getLogger(__name__)

HEADS = ("classification", "regression")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    output_dim: int
    hidden_dims: tuple = (128, 128)
    dropout_rate: float = 0.2
    head: str = "classification"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1:
            raise InvalidInputError("input_dim and output_dim must be >= 1")
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise InvalidInputError("need at least one LSTM layer of positive width")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidInputError("dropout_rate must lie in [0, 1)")
        if self.head not in HEADS:
            raise InvalidInputError(f"head must be one of {HEADS}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip_norm: float | None = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidInputError("learning_rate >= 0, batch_size >= 1, epochs >= 0 required")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")


def num_parameters(spec: ModelSpec) -> int:
    n, d = 0, spec.input_dim
    for h in spec.hidden_dims:
        n += 4 * h * (d + h + 1)
        d = h
    return n + d * spec.output_dim + spec.output_dim


def init_params(spec: ModelSpec, rng=None) -> dict:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases except forget gate = 1."""
    rng = np.random.default_rng(rng)
    params = {}
    d = spec.input_dim
    for l, h in enumerate(spec.hidden_dims):
        bound = 1.0 / np.sqrt(d + h)
        params[f"lstm{l}.Wx"] = rng.uniform(-bound, bound, (d, 4 * h))
        params[f"lstm{l}.Wh"] = rng.uniform(-bound, bound, (h, 4 * h))
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        params[f"lstm{l}.b"] = b
        d = h
    bound = 1.0 / np.sqrt(d)
    params["head.W"] = rng.uniform(-bound, bound, (d, spec.output_dim))
    params["head.b"] = np.zeros(spec.output_dim)
    return params


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softmax(logits, axis=-1):
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _check_inputs(spec, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != spec.input_dim or X.shape[1] < 1:
        raise ShapeError(f"inputs must be (batch, window>=1, {spec.input_dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite input")
    return X


def forward(params, spec: ModelSpec, X, training: bool = False, rng=None):
    """Run the network on ``X`` of shape (batch, window, input_dim).

    Returns ``(outputs, cache)``; classification outputs are logits.
    Inverted dropout is applied to every LSTM layer's output sequence when
    ``training`` and ``dropout_rate > 0``.
    """
    X = _check_inputs(spec, X)
    B, T, _ = X.shape
    drop = training and spec.dropout_rate > 0
    if drop:
        rng = np.random.default_rng(rng)
    layers = []
    inp = X
    for l, H in enumerate(spec.hidden_dims):
        Wx, Wh, b = params[f"lstm{l}.Wx"], params[f"lstm{l}.Wh"], params[f"lstm{l}.b"]
        if Wx.shape != (inp.shape[2], 4 * H):
            raise ShapeError(f"lstm{l}.Wx has shape {Wx.shape}")
        hs = np.zeros((B, T + 1, H))
        cs = np.zeros((B, T + 1, H))
        gates = np.zeros((B, T, 4 * H))
        xw = inp @ Wx + b
        for t in range(T):
            z = xw[:, t] + hs[:, t] @ Wh
            a = np.empty_like(z)
            a[:, :2 * H] = _sigmoid(z[:, :2 * H])
            a[:, 2 * H:3 * H] = np.tanh(z[:, 2 * H:3 * H])
            a[:, 3 * H:] = _sigmoid(z[:, 3 * H:])
            gates[:, t] = a
            cs[:, t + 1] = a[:, H:2 * H] * cs[:, t] + a[:, :H] * a[:, 2 * H:3 * H]
            hs[:, t + 1] = a[:, 3 * H:] * np.tanh(cs[:, t + 1])
        out = hs[:, 1:]
        mask = None
        if drop:
            mask = (rng.random(out.shape) >= spec.dropout_rate) / (1.0 - spec.dropout_rate)
            out = out * mask
        layers.append({"input": inp, "hs": hs, "cs": cs, "gates": gates, "mask": mask})
        inp = out
    feat = inp[:, -1]
    outputs = feat @ params["head.W"] + params["head.b"]
    if not np.all(np.isfinite(outputs)):
        raise NumericError("non-finite activation in forward pass")
    cache = {"X": X, "layers": layers, "feat": feat, "outputs": outputs,
             "params": {k: v for k, v in params.items()}}
    return outputs, cache


def _loss_grad(outputs, targets, head):
    """Mean loss and its gradient w.r.t. ``outputs``."""
    outputs = np.asarray(outputs, dtype=float)
    if head == "classification":
        y = np.asarray(targets, dtype=int).reshape(-1)
        B, M = outputs.shape
        if y.shape[0] != B:
            raise ShapeError("one class index per example required")
        if np.any((y < 0) | (y >= M)):
            raise InvalidInputError(f"class index outside [0, {M})")
        z = outputs - outputs.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(B), y].mean()
        grad = np.exp(logp)
        grad[np.arange(B), y] -= 1.0
        return float(loss), grad / B
    if head == "regression":
        t = np.asarray(targets, dtype=float)
        if t.shape != outputs.shape:
            raise ShapeError(f"targets {t.shape} vs outputs {outputs.shape}")
        diff = outputs - t
        # overflow surfaces as a non-finite loss, which train() reports
        with np.errstate(over="ignore", invalid="ignore"):
            return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
    raise InvalidInputError(f"unknown head {head!r}")


def loss(outputs, targets, head: str) -> float:
    """Mean softmax cross-entropy (classification) or mean squared error (regression)."""
    return _loss_grad(outputs, targets, head)[0]


def backward(params, spec: ModelSpec, X, targets, cache) -> dict:
    """Gradients of the mean loss w.r.t. every parameter, via BPTT."""
    if any(cache["params"].get(k) is not v for k, v in params.items()):
        raise InvalidStateError("forward cache was computed with different parameters")
    Xc = cache["X"]
    if not (np.shape(X) == Xc.shape or np.shape(X) == Xc.shape[1:]) or not np.array_equal(
            np.asarray(X, dtype=float).reshape(Xc.shape), Xc):
        raise InvalidStateError("forward cache belongs to a different batch")
    _, dout = _loss_grad(cache["outputs"], targets, spec.head)
    grads = {"head.W": cache["feat"].T @ dout, "head.b": dout.sum(axis=0)}
    B, T, _ = Xc.shape
    H_last = spec.hidden_dims[-1]
    d_seq = np.zeros((B, T, H_last))
    d_seq[:, -1] = dout @ params["head.W"].T
    for l in reversed(range(len(spec.hidden_dims))):
        H = spec.hidden_dims[l]
        lay = cache["layers"][l]
        if lay["mask"] is not None:
            d_seq = d_seq * lay["mask"]
        Wx, Wh = params[f"lstm{l}.Wx"], params[f"lstm{l}.Wh"]
        hs, cs, gates, inp = lay["hs"], lay["cs"], lay["gates"], lay["input"]
        dz_all = np.zeros((B, T, 4 * H))
        dWh = np.zeros_like(Wh)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in reversed(range(T)):
            a = gates[:, t]
            i, f, g, o = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tc = np.tanh(cs[:, t + 1])
            dh = d_seq[:, t] + dh_next
            dc = dh * o * (1.0 - tc ** 2) + dc_next
            dz = np.empty((B, 4 * H))
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * cs[:, t] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g ** 2)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dz_all[:, t] = dz
            dWh += hs[:, t].T @ dz
            dh_next = dz @ Wh.T
            dc_next = dc * f
        flat_in = inp.reshape(B * T, -1)
        flat_dz = dz_all.reshape(B * T, -1)
        grads[f"lstm{l}.Wx"] = flat_in.T @ flat_dz
        grads[f"lstm{l}.Wh"] = dWh
        grads[f"lstm{l}.b"] = flat_dz.sum(axis=0)
        d_seq = dz_all @ Wx.T
    return grads


def _global_norm(grads) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def train(params, spec: ModelSpec, cfg: TrainConfig, X, y):
    """Minibatch training. Returns ``(params, loss_curve)``.

    The curve holds the mean training loss of each epoch. All randomness
    (shuffling, dropout) comes from ``cfg.seed``.
    """
    X = _check_inputs(spec, X)
    y = np.asarray(y)
    if X.shape[0] == 0:
        raise InvalidInputError("empty training set")
    if y.shape[0] != X.shape[0]:
        raise ShapeError("inputs and targets disagree on the number of examples")
    rng = np.random.default_rng(cfg.seed)
    params = dict(params)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    curve = []
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        last_good = dict(params)
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            try:
                out, cache = forward(params, spec, xb, training=True, rng=rng)
            except NumericError as exc:
                raise TrainingFailure(str(exc), checkpoint=last_good, epoch=epoch) from exc
            batch_loss = loss(out, yb, spec.head)
            if not np.isfinite(batch_loss):
                raise TrainingFailure(f"non-finite loss at epoch {epoch}", checkpoint=last_good, epoch=epoch)
            grads = backward(params, spec, xb, yb, cache)
            if cfg.grad_clip_norm:
                norm = _global_norm(grads)
                if norm > cfg.grad_clip_norm:
                    grads = {k: g * (cfg.grad_clip_norm / norm) for k, g in grads.items()}
            step += 1
            new = {}
            for k, p in params.items():
                g = grads[k]
                if cfg.optimizer == "sgd":
                    new[k] = p - cfg.learning_rate * g
                    continue
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v2[k] = cfg.beta2 * v2[k] + (1 - cfg.beta2) * g * g
                mhat = m[k] / (1 - cfg.beta1 ** step)
                vhat = v2[k] / (1 - cfg.beta2 ** step)
                new[k] = p - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.epsilon)
            params = new
            total += batch_loss * len(idx)
            count += len(idx)
        curve.append(total / count)
        logger.debug("epoch %d loss %.5f", epoch, curve[-1])
    return params, curve


def predict(params, spec: ModelSpec, window) -> np.ndarray:
    """Beam probabilities (classification) or per-beam outputs (regression).

    Accepts one window (W, F) or a batch (B, W, F); dropout is off.
    """
    single = np.ndim(window) == 2
    out, _ = forward(params, spec, window, training=False)
    if spec.head == "classification":
        out = softmax(out)
    return out[0] if single else out


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params, spec: ModelSpec, seed: int = 0, epochs: int = 0) -> None:
    meta = {"spec": asdict(spec), "seed": int(seed), "epochs": int(epochs)}
    arrays = {f"param:{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path):
    """Returns ``(params, spec, meta)`` where meta holds ``seed`` and ``epochs``."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        params = {k[len("param:"):]: data[k] for k in data.files if k.startswith("param:")}
    spec = ModelSpec(**meta.pop("spec"))
    return params, spec, meta
