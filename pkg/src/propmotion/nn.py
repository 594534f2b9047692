"""Small numpy networks: tanh MLP, stacked LSTM, Adam, and a finite-difference check.

Everything runs in float64.  Parameters are plain lists of arrays so the
optimizer, the gradient checker and the serializer can treat both
architectures the same way.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

FORMAT_TAG = "propmotion-nn/1"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # scalar or per-feature standard deviation of Gaussian input perturbation
    input_noise: float | tuple = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass
class MlpParams:
    """Affine layers with tanh between them and an identity output.

    ``skip`` optionally adds selected input entries straight onto selected
    outputs: ``y[out_idx] += x[in_idx]``.
    """

    weights: list
    biases: list
    skip: tuple | None = None

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), self.skip)

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays])


def init_mlp(layer_sizes, seed=0, skip=None) -> MlpParams:
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ValueError(f"bad layer sizes {sizes}")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for a, b in zip(sizes[:-1], sizes[1:]):
        ws.append(_uniform_init(rng, a, (a, b)))
        bs.append(_uniform_init(rng, a, (b,)))
    if skip is not None:
        skip = (np.asarray(skip[0], dtype=int), np.asarray(skip[1], dtype=int))
    return MlpParams(ws, bs, skip)


def mlp_forward(params: MlpParams, x, return_cache=False):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != params.weights[0].shape[0]:
        raise ValueError(f"input length {h.shape[-1]} != {params.weights[0].shape[0]}")
    acts = [h]
    n = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = np.tanh(z) if i < n - 1 else z
        acts.append(h)
    y = h
    if params.skip is not None:
        y = y.copy()
        y[..., params.skip[1]] += acts[0][..., params.skip[0]]
    if single:
        y = y[0]
    return (y, acts) if return_cache else y


def mlp_backward(params: MlpParams, acts, dy):
    """Gradients of ``sum(dy * y)`` w.r.t. parameters and input."""
    dy = np.atleast_2d(np.asarray(dy, dtype=np.float64))
    n = len(params.weights)
    grads = [None] * (2 * n)
    delta = dy
    for i in range(n - 1, -1, -1):
        a_in = acts[i]
        grads[2 * i] = a_in.T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
    dx = delta
    if params.skip is not None:
        dx = dx.copy()
        np.add.at(dx, (slice(None), params.skip[0]), dy[:, params.skip[1]])
    return grads, dx


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class LstmParams:
    """Stacked LSTM cells (gate order i, f, g, o) with a linear output head.

    Layer ``l`` has ``W[l]`` of shape ``(in_l + H, 4H)`` acting on ``[x, h]``.
    """

    W: list
    b: list
    Wy: np.ndarray
    by: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.Wy.shape[0]

    @property
    def num_layers(self) -> int:
        return len(self.W)

    @property
    def input_size(self) -> int:
        return self.W[0].shape[0] - self.hidden_size

    @property
    def output_size(self) -> int:
        return self.Wy.shape[1]

    @property
    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.W, self.b):
            out += [w, b]
        return out + [self.Wy, self.by]

    def with_arrays(self, arrays) -> "LstmParams":
        body = arrays[:-2]
        return LstmParams(list(body[0::2]), list(body[1::2]), arrays[-2], arrays[-1])

    def copy(self) -> "LstmParams":
        return self.with_arrays([a.copy() for a in self.arrays])


@dataclass
class LstmState:
    h: list
    c: list

    @classmethod
    def zeros(cls, params: LstmParams, batch: int | None = None) -> "LstmState":
        shape = (params.hidden_size,) if batch is None else (batch, params.hidden_size)
        return cls([np.zeros(shape) for _ in range(params.num_layers)],
                   [np.zeros(shape) for _ in range(params.num_layers)])


def init_lstm(input_size, hidden_size, num_layers, output_size, seed=0) -> LstmParams:
    rng = np.random.default_rng(seed)
    W, b = [], []
    for layer in range(num_layers):
        fan = (input_size if layer == 0 else hidden_size) + hidden_size
        W.append(_uniform_init(rng, hidden_size, (fan, 4 * hidden_size)))
        b.append(_uniform_init(rng, hidden_size, (4 * hidden_size,)))
    Wy = _uniform_init(rng, hidden_size, (hidden_size, output_size))
    by = _uniform_init(rng, hidden_size, (output_size,))
    return LstmParams(W, b, Wy, by)


def _cell(W, b, x, h, c):
    H = h.shape[-1]
    z = np.concatenate([x, h], axis=-1) @ W + b
    i = _sigmoid(z[..., :H])
    f = _sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = _sigmoid(z[..., 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, g, o, tc)


def lstm_step(params: LstmParams, state: LstmState, x):
    """One time step; works for a single vector or a batch ``(B, in)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_size:
        raise ValueError(f"input length {x.shape[-1]} != {params.input_size}")
    hs, cs = [], []
    inp = x
    for layer in range(params.num_layers):
        h, c, _ = _cell(params.W[layer], params.b[layer], inp, state.h[layer], state.c[layer])
        hs.append(h)
        cs.append(c)
        inp = h
    y = inp @ params.Wy + params.by
    return y, LstmState(hs, cs)


def lstm_forward(params: LstmParams, xs, state: LstmState | None = None):
    """Run a batch of sequences ``xs`` of shape ``(T, B, in)``."""
    xs = np.asarray(xs, dtype=np.float64)
    T, B, _ = xs.shape
    if xs.shape[-1] != params.input_size:
        raise ValueError(f"input length {xs.shape[-1]} != {params.input_size}")
    L, H = params.num_layers, params.hidden_size
    if state is None:
        state = LstmState.zeros(params, B)
    h = [x.copy() for x in state.h]
    c = [x.copy() for x in state.c]
    cache = {"x": xs, "h0": [x.copy() for x in h], "c0": [x.copy() for x in c],
             "h": np.zeros((L, T, B, H)), "c": np.zeros((L, T, B, H)), "gates": []}
    ys = np.zeros((T, B, params.output_size))
    for t in range(T):
        inp = xs[t]
        step_gates = []
        for layer in range(L):
            h[layer], c[layer], gates = _cell(params.W[layer], params.b[layer], inp, h[layer], c[layer])
            cache["h"][layer, t] = h[layer]
            cache["c"][layer, t] = c[layer]
            step_gates.append(gates)
            inp = h[layer]
        cache["gates"].append(step_gates)
        ys[t] = inp @ params.Wy + params.by
    return ys, LstmState(h, c), cache


def lstm_backward(params: LstmParams, cache, dys):
    """BPTT for the loss ``sum(dys * ys)``; returns (grads, dxs)."""
    xs = cache["x"]
    T, B, _ = xs.shape
    L, H = params.num_layers, params.hidden_size
    dW = [np.zeros_like(w) for w in params.W]
    db = [np.zeros_like(b) for b in params.b]
    top = cache["h"][L - 1]
    dWy = np.einsum("tbh,tbo->ho", top, dys)
    dby = dys.sum(axis=(0, 1))
    dh_above = dys @ params.Wy.T  # (T, B, H) gradient entering the top layer
    dxs = np.zeros_like(xs)
    for layer in range(L - 1, -1, -1):
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        d_in = np.zeros((T, B, params.W[layer].shape[0] - H))
        for t in range(T - 1, -1, -1):
            i, f, g, o, tc = cache["gates"][t][layer]
            c_prev = cache["c"][layer, t - 1] if t > 0 else cache["c0"][layer]
            h_prev = cache["h"][layer, t - 1] if t > 0 else cache["h0"][layer]
            inp = (cache["h"][layer - 1, t] if layer > 0 else xs[t])
            dh = dh_above[t] + dh_next
            do = dh * tc
            dc = dh * o * (1 - tc ** 2) + dc_next
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_next = dc * f
            dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), dg * (1 - g ** 2),
                                 do * o * (1 - o)], axis=-1)
            xh = np.concatenate([inp, h_prev], axis=-1)
            dW[layer] += xh.T @ dz
            db[layer] += dz.sum(axis=0)
            dxh = dz @ params.W[layer].T
            d_in[t] = dxh[:, :-H]
            dh_next = dxh[:, -H:]
        if layer > 0:
            dh_above = d_in
        else:
            dxs = d_in
    grads = []
    for w, b in zip(dW, db):
        grads += [w, b]
    return grads + [dWy, dby], dxs


# ---------------------------------------------------------------------------
# optimizer / training
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, arrays, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.arrays = arrays
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def mse_grad(pred, target, mask=None):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    diff = pred - target
    if mask is None:
        n = diff.size
    else:
        diff = diff * mask
        n = mask.sum() * (diff.shape[-1] if mask.shape[-1] == 1 else 1)
    loss = float((diff ** 2).sum() / n)
    return loss, 2.0 * diff / n


def _pad_sequences(seqs, width):
    T = max(len(s) for s in seqs)
    out = np.zeros((T, len(seqs), width))
    mask = np.zeros((T, len(seqs), 1))
    for j, s in enumerate(seqs):
        out[: len(s), j] = s
        mask[: len(s), j] = 1.0
    return out, mask


def train(model, dataset, cfg: TrainConfig):
    """Minibatch Adam on MSE.

    ``model`` is an :class:`MlpParams` (dataset = ``(X, Y)`` arrays) or an
    :class:`LstmParams` (dataset = ``(list of X seqs, list of Y seqs)``).
    A copy is trained; returns ``(trained, per-epoch mean loss)``.
    """
    X, Y = dataset
    if len(X) == 0:
        raise ValueError("empty dataset")
    if len(X) != len(Y):
        raise ValueError("input/target count mismatch")
    model = model.copy()
    arrays = model.arrays
    opt = Adam(arrays, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    n = len(X)
    is_lstm = isinstance(model, LstmParams)
    if not is_lstm:
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.float64)
    noise = np.asarray(cfg.input_noise, dtype=np.float64)
    noisy = bool(np.any(noise))
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if is_lstm:
                xs, mask = _pad_sequences([X[i] for i in idx], model.input_size)
                ys, _ = _pad_sequences([Y[i] for i in idx], model.output_size)
                if noisy:
                    xs = xs + noise * rng.standard_normal(xs.shape)
                pred, _, cache = lstm_forward(model, xs)
                loss, dpred = mse_grad(pred, ys, mask)
                grads, _ = lstm_backward(model, cache, dpred)
            else:
                xb = X[idx]
                if noisy:
                    xb = xb + noise * rng.standard_normal(xb.shape)
                pred, acts = mlp_forward(model, xb, return_cache=True)
                loss, dpred = mse_grad(pred, Y[idx])
                grads, _ = mlp_backward(model, acts, dpred)
            if not np.isfinite(loss):
                raise TrainingDiverged("training diverged")
            opt.step(grads)
            total += loss * len(idx)
        history.append(total / n)
    return model, history


def gradient_check(arrays, loss_and_grads, n_probe=50, step=1e-5, seed=0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grads()`` evaluates the loss at the current contents of
    ``arrays`` (perturbed in place) and returns ``(loss, grads)``.
    """
    _, grads = loss_and_grads()
    grads = [g.copy() for g in grads]
    sizes = [a.size for a in arrays]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    flat_idx = rng.choice(total, size=min(n_probe, total), replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for fi in flat_idx:
        k = int(np.searchsorted(offsets, fi, side="right") - 1)
        j = np.unravel_index(fi - offsets[k], arrays[k].shape)
        orig = arrays[k][j]
        arrays[k][j] = orig + step
        lp, _ = loss_and_grads()
        arrays[k][j] = orig - step
        lm, _ = loss_and_grads()
        arrays[k][j] = orig
        numeric = (lp - lm) / (2 * step)
        analytic = grads[k][j]
        worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(numeric)))
    return worst


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def model_to_dict(model) -> dict:
    if isinstance(model, MlpParams):
        d = {"format": FORMAT_TAG, "kind": "mlp", "layer_sizes": model.layer_sizes,
             "skip": None if model.skip is None else [model.skip[0].tolist(), model.skip[1].tolist()]}
    elif isinstance(model, LstmParams):
        d = {"format": FORMAT_TAG, "kind": "lstm",
             "layer_sizes": [model.input_size, model.hidden_size, model.num_layers, model.output_size]}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    d["arrays"] = [{"shape": list(a.shape), "values": a.ravel().tolist()} for a in model.arrays]
    return d


def model_from_dict(d):
    if d.get("format") != FORMAT_TAG:
        raise ValueError(f"unknown model format {d.get('format')!r}")
    arrays = [np.array(a["values"], dtype=np.float64).reshape(a["shape"]) for a in d["arrays"]]
    if d["kind"] == "mlp":
        skip = None
        if d.get("skip") is not None:
            skip = (np.array(d["skip"][0], dtype=int), np.array(d["skip"][1], dtype=int))
        return MlpParams(list(arrays[0::2]), list(arrays[1::2]), skip)
    if d["kind"] == "lstm":
        body = arrays[:-2]
        return LstmParams(list(body[0::2]), list(body[1::2]), arrays[-2], arrays[-1])
    raise ValueError(f"unknown model kind {d['kind']!r}")


def save_model(model, path, extra: dict | None = None) -> None:
    d = model_to_dict(model)
    if extra:
        d["meta"] = extra
    Path(path).write_text(json.dumps(d))


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def _config_from(est) -> TrainConfig:
    return TrainConfig(learning_rate=est.learning_rate, batch_size=est.batch_size,
                       epochs=est.epochs, seed=est.seed, input_noise=est.input_noise)


class TanhMLPRegressor(RegressorMixin, BaseEstimator):
    """tanh MLP regressor trained with minibatch Adam on MSE."""

    def __init__(self, hidden_layer_sizes=(64, 64), learning_rate=5e-4, batch_size=16,
                 epochs=200, seed=0, input_noise=0.0, skip=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.input_noise = input_noise
        self.skip = skip

    def fit(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
        y2 = y.reshape(len(y), -1)
        sizes = [X.shape[1], *self.hidden_layer_sizes, y2.shape[1]]
        init = init_mlp(sizes, seed=self.seed, skip=self.skip)
        self.params_, self.loss_curve_ = train(init, (X, y2), _config_from(self))
        self.n_features_in_ = X.shape[1]
        self._y_1d = y.ndim == 1
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        out = mlp_forward(self.params_, X)
        return out[:, 0] if getattr(self, "_y_1d", False) else out


class LSTMSequenceRegressor(RegressorMixin, BaseEstimator):
    """Sequence-to-sequence LSTM regressor.

    ``fit`` takes lists of ``(T_i, n_in)`` input and ``(T_i, n_out)`` target
    sequences; ``predict`` maps each input sequence to its output sequence.
    """

    def __init__(self, hidden_size=32, num_layers=2, learning_rate=5e-4, batch_size=16,
                 epochs=200, seed=0, input_noise=0.0):
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.input_noise = input_noise

    def fit(self, X, y):
        X = [check_array(x, dtype=np.float64) for x in X]
        y = [check_array(t, dtype=np.float64) for t in y]
        init = init_lstm(X[0].shape[1], self.hidden_size, self.num_layers, y[0].shape[1], self.seed)
        self.params_, self.loss_curve_ = train(init, (X, y), _config_from(self))
        self.n_features_in_ = X[0].shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        outs = []
        for x in X:
            x = check_array(x, dtype=np.float64)
            ys, _, _ = lstm_forward(self.params_, x[:, None, :])
            outs.append(ys[:, 0])
        return outs

    def score(self, X, y, sample_weight=None):
        from sklearn.metrics import r2_score
        return r2_score(np.concatenate(y), np.concatenate(self.predict(X)))
