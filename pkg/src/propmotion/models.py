"""Proportion-based controllers built from a bank of primitive networks.

All networks work on states normalized with one shared :class:`NormStats`.
Four controllers are provided:

* :class:`BaselineController` - one upper LSTM and one lower MLP, both
  trained on the target task.
* :class:`LearningProportionController` - the upper LSTM also emits
  softmax proportions over a frozen primitive bank.
* :class:`SamplingProportionController` - the upper LSTM emits a follower
  reference window; noisy primitive rollouts are costed through the
  leader-to-follower map and blended with cross-entropy weights.
* :class:`PlaybackProportionController` - as above, with the reference
  window read from a recorded follower trajectory.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import (Demonstration, NormStats, RobotState, StateScaler, Trajectory,
                   channel_slices, flatten, unflatten)
from .nn import (Adam, LstmParams, LstmState, MlpParams, TrainConfig, TrainingDiverged,
                 init_lstm, init_mlp, lstm_backward, lstm_forward, lstm_step,
                 mlp_forward, model_from_dict, model_to_dict, mse_grad, train)
from .segmentation import PrimitiveDataset, reference_index


# ---------------------------------------------------------------------------
# configuration / value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1

    def __post_init__(self):
        ws = (self.alpha, self.beta, self.gamma)
        if min(ws) < 0 or max(ws) <= 0:
            raise ValueError("cost weights must be nonnegative with at least one > 0")


@dataclass(frozen=True)
class CEConfig:
    rho: float = 0.05
    top_m: int = 50
    samples_per_primitive: int = 10
    noise_sigma: tuple = (0.02, 0.02, 0.02)  # theta rad, omega rad/s, tau N m
    seed: int = 0
    cost_window: str = "first"  # or "full"

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.top_m < 1 or self.samples_per_primitive < 1:
            raise ValueError("top_m and samples_per_primitive must be >= 1")
        if self.cost_window not in ("first", "full"):
            raise ValueError("cost_window must be 'first' or 'full'")


@dataclass
class CandidateBatch:
    sequences: np.ndarray  # (M, n, 3D) physical leader states
    costs: np.ndarray  # (M,)

    def __post_init__(self):
        if len(self.sequences) != len(self.costs):
            raise ValueError("sequence/cost count mismatch")


@dataclass(frozen=True)
class ProportionVector:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("proportions must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", w)

    def __len__(self):
        return self.weights.size

    def __array__(self, dtype=None, copy=None):
        return self.weights if dtype is None else self.weights.astype(dtype)

    @property
    def entropy(self) -> float:
        w = self.weights[self.weights > 0]
        return float(-(w * np.log(w)).sum())

    @property
    def effective_sample_size(self) -> float:
        return float(1.0 / (self.weights ** 2).sum())


# ---------------------------------------------------------------------------
# fusion primitives
# ---------------------------------------------------------------------------

def _softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits) -> ProportionVector:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    return ProportionVector(_softmax_rows(logits))


def compute_cost(candidate_F, reference_F, w: CostWeights, window: str = "first") -> np.ndarray | float:
    """Weighted per-channel MSE between candidate and reference follower states.

    ``candidate_F`` is ``(n, 3D)`` or a batch ``(M, n, 3D)``; ``reference_F``
    is ``(n, 3D)``.  ``window='first'`` scores only the first step.
    """
    cand = np.asarray(candidate_F, dtype=np.float64)
    ref = np.asarray(reference_F, dtype=np.float64)
    single = cand.ndim == 2
    if single:
        cand = cand[None]
    if cand.shape[1:] != ref.shape:
        raise ValueError(f"length mismatch: {cand.shape[1:]} vs {ref.shape}")
    if window == "first":
        cand, ref = cand[:, :1], ref[:1]
    sq = (cand - ref) ** 2
    D = ref.shape[-1] // 3
    sl = channel_slices(D)
    total = (w.alpha * sq[..., sl["theta"]].mean(axis=(1, 2))
             + w.beta * sq[..., sl["omega"]].mean(axis=(1, 2))
             + w.gamma * sq[..., sl["tau"]].mean(axis=(1, 2)))
    return float(total[0]) if single else total


def ce_weights(costs, cfg: CEConfig) -> ProportionVector:
    """Cross-entropy weights exp(-L/rho) over the ``top_m`` lowest costs.

    Ties in the selection go to the lower sample index.  Non-finite costs
    never receive weight.
    """
    costs = np.asarray(costs, dtype=np.float64)
    finite = np.isfinite(costs)
    if not finite.any():
        raise ValueError("no viable samples")
    masked = np.where(finite, costs, np.inf)
    order = np.argsort(masked, kind="stable")
    m = min(cfg.top_m, int(finite.sum()))
    sel = order[:m]
    shifted = -(masked[sel] - masked[sel].min()) / cfg.rho
    e = np.exp(shifted)
    w = np.zeros_like(costs)
    w[sel] = e / e.sum()
    return ProportionVector(w / w.sum())


def weighted_average(sequences, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    return np.tensordot(w, np.asarray(sequences, dtype=np.float64), axes=(0, 0))


# ---------------------------------------------------------------------------
# lower bank
# ---------------------------------------------------------------------------

def _residual_skip(dim: int):
    """Identity from the follower theta/omega inputs onto the leader theta/omega outputs."""
    idx = np.arange(2 * dim)
    return (idx, idx)


def _state_only_noise(noise, width: int):
    """Scalar input noise applied to the current-state half of ``[F_k, F_ref]`` only."""
    if np.ndim(noise) == 0:
        return (float(noise),) * width + (0.0,) * width
    return noise


def _shift_augment(F, R, L, copies: int, sigma: float, rng):
    """Stack ``copies`` replicas of ``(F, R, L)``, each under one common arm-joint offset."""
    if not copies:
        return F, R, L
    D = F.shape[1] // 3
    offsets = np.zeros((copies, F.shape[1]))
    offsets[:, :D - 1] = rng.normal(0.0, sigma, (copies, D - 1))
    return tuple(np.vstack([A] + [A + o for o in offsets]) for A in (F, R, L))


def _train_one(args):
    sizes, skip, X, Y, cfg = args
    init = init_mlp(sizes, seed=cfg.seed, skip=skip)
    model, hist = train(init, (X, Y), cfg)
    return model, hist


class LowerBank(BaseEstimator):
    """One MLP per primitive dataset, mapping normalized ``[F_k, F_ref]`` to ``L_{k+1}``.

    Fitting is embarrassingly parallel; model ``p`` always uses seed
    ``train_config.seed + p`` so results do not depend on ``n_jobs``.
    A scalar ``train_config.input_noise`` perturbs only the current-state half
    of the input, so each primitive learns to steer back toward a clean
    reference instead of blurring its dependence on it.  ``shift_copies``
    extra copies of every dataset have one random arm-joint offset (std
    ``shift_sigma`` rad, gripper untouched) added to state, reference and
    target alike, which makes each primitive depend on relative rather than
    absolute joint positions and lets it serve references away from its
    demonstration.
    """

    def __init__(self, scaler: StateScaler | None = None, hidden_layer_sizes=(64, 64),
                 train_config: TrainConfig | None = None, residual=True, n_jobs=1,
                 shift_copies=0, shift_sigma=0.0):
        self.scaler = scaler
        self.hidden_layer_sizes = hidden_layer_sizes
        self.train_config = train_config
        self.residual = residual
        self.n_jobs = n_jobs
        self.shift_copies = shift_copies
        self.shift_sigma = shift_sigma

    def _xy(self, ds: PrimitiveDataset, stats, rng=None):
        F, R, L = ds.inputs, ds.references, ds.targets
        if rng is not None:
            F, R, L = _shift_augment(F, R, L, self.shift_copies, self.shift_sigma, rng)
        X = np.hstack([(F - stats.mean) / stats.std, (R - stats.mean) / stats.std])
        Y = (L - stats.mean) / stats.std
        return X, Y

    def fit(self, datasets, y=None):
        datasets = list(datasets)
        if not datasets:
            raise ValueError("no primitive datasets")
        stats = self.scaler.stats_
        cfg = self.train_config or TrainConfig()
        width = datasets[0].inputs.shape[1]
        sizes = [2 * width, *self.hidden_layer_sizes, width]
        skip = _residual_skip(width // 3) if self.residual else None
        noise = _state_only_noise(cfg.input_noise, width)
        jobs = []
        for p, ds in enumerate(datasets):
            X, Y = self._xy(ds, stats, np.random.default_rng([cfg.seed, p]))
            c = TrainConfig(**{**asdict(cfg), "seed": cfg.seed + p, "input_noise": noise})
            jobs.append((sizes, skip, X, Y, c))
        if self.n_jobs and self.n_jobs > 1:
            with ProcessPoolExecutor(self.n_jobs) as ex:
                results = list(ex.map(_train_one, jobs))
        else:
            results = [_train_one(j) for j in jobs]
        self.set_primitives([r[0] for r in results], stats)
        self.loss_curves_ = [r[1] for r in results]
        self.tags_ = [ds.tag for ds in datasets]
        return self

    def set_primitives(self, primitives, stats: NormStats):
        self.primitives_ = list(primitives)
        self.stats_ = stats
        self._stack()
        return self

    def _stack(self):
        prims = self.primitives_
        sizes = prims[0].layer_sizes
        for p in prims:
            if p.layer_sizes != sizes:
                raise ValueError("all primitives must share layer sizes")
        self._W = [np.stack([p.weights[i] for p in prims]) for i in range(len(sizes) - 1)]
        self._b = [np.stack([p.biases[i] for p in prims])[:, None, :] for i in range(len(sizes) - 1)]
        self._skip = prims[0].skip

    def subset(self, indices) -> "LowerBank":
        sub = LowerBank(self.scaler, self.hidden_layer_sizes, self.train_config, self.residual,
                        self.n_jobs, self.shift_copies, self.shift_sigma)
        sub.set_primitives([self.primitives_[i] for i in indices], self.stats_)
        if hasattr(self, "tags_"):
            sub.tags_ = [self.tags_[i] for i in indices]
        return sub

    def __len__(self):
        return len(self.primitives_)

    @property
    def width(self) -> int:
        return self._W[-1].shape[-1]

    def forward_all(self, X, return_cache=False):
        """Evaluate every primitive on normalized inputs ``X`` (N, 2W) -> (P, N, W)."""
        check_is_fitted(self, "primitives_")
        X = np.asarray(X, dtype=np.float64)
        h = X
        acts = [X]
        n = len(self._W)
        for i, (w, b) in enumerate(zip(self._W, self._b)):
            z = np.matmul(h, w) + b
            h = np.tanh(z) if i < n - 1 else z
            acts.append(h)
        y = h
        if self._skip is not None:
            y = y.copy()
            y[..., self._skip[1]] += X[..., self._skip[0]]
        return (y, acts) if return_cache else y

    def input_gradient(self, acts, dy):
        """Gradient w.r.t. the shared input given ``dy`` of shape (P, N, W)."""
        delta = dy
        for i in range(len(self._W) - 1, -1, -1):
            delta = np.matmul(delta, np.swapaxes(self._W[i], 1, 2))
            if i > 0:
                delta = delta * (1.0 - acts[i] ** 2)
        dx = delta.sum(axis=0)
        if self._skip is not None:
            dx[:, self._skip[0]] += dy[..., self._skip[1]].sum(axis=0)
        return dx

    def predict(self, X):
        """Physical next-leader predictions for physical ``[F_k, F_ref]`` rows."""
        s = self.stats_
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        W = s.mean.shape[0]
        Xn = np.hstack([(X[:, :W] - s.mean) / s.std, (X[:, W:] - s.mean) / s.std])
        return self.forward_all(Xn) * s.std + s.mean


# ---------------------------------------------------------------------------
# leader -> follower map
# ---------------------------------------------------------------------------

class LToFModel(BaseEstimator):
    """MLP from a flattened leader state to the simultaneous follower state."""

    def __init__(self, scaler: StateScaler | None = None, hidden_layer_sizes=(64, 64),
                 train_config: TrainConfig | None = None, residual=True):
        self.scaler = scaler
        self.hidden_layer_sizes = hidden_layer_sizes
        self.train_config = train_config
        self.residual = residual

    def fit(self, demos, y=None):
        demos = list(demos)
        if not demos:
            raise ValueError("no demonstrations")
        stats = self.scaler.stats_
        L = np.concatenate([d.leader.data for d in demos])
        F = np.concatenate([d.follower.data for d in demos])
        X = (L - stats.mean) / stats.std
        Y = (F - stats.mean) / stats.std
        width = X.shape[1]
        skip = _residual_skip(width // 3) if self.residual else None
        cfg = self.train_config or TrainConfig()
        init = init_mlp([width, *self.hidden_layer_sizes, width], seed=cfg.seed, skip=skip)
        self.mlp_, self.loss_curve_ = train(init, (X, Y), cfg)
        self.stats_ = stats
        return self

    def set_mlp(self, mlp: MlpParams, stats: NormStats):
        self.mlp_, self.stats_ = mlp, stats
        return self

    def forward(self, Xn):
        return mlp_forward(self.mlp_, Xn)

    def predict(self, L):
        check_is_fitted(self, "mlp_")
        s = self.stats_
        return mlp_forward(self.mlp_, (np.asarray(L) - s.mean) / s.std) * s.std + s.mean


def train_ltof(demos, cfg: TrainConfig, scaler: StateScaler, hidden_layer_sizes=(64, 64)) -> LToFModel:
    return LToFModel(scaler, hidden_layer_sizes, cfg).fit(demos)


# ---------------------------------------------------------------------------
# upper layer
# ---------------------------------------------------------------------------

UPPER_KINDS = ("target", "window", "proportion")


class UpperModel:
    """Stride-``horizon`` LSTM over follower states with a persistent rollout state.

    ``kind`` selects the output head: ``target`` emits F_{k+n}; ``window``
    emits F_{k+1..k+n}; ``proportion`` emits F_{k+n} followed by one logit
    per primitive.  With ``residual`` the state predictions are offsets
    added to the input state.
    """

    def __init__(self, lstm: LstmParams, horizon: int, kind: str, width: int, n_primitives: int = 0,
                 residual: bool = False):
        if horizon < 1:
            raise ValueError("horizon must be >= 1")
        if kind not in UPPER_KINDS:
            raise ValueError(f"unknown upper kind {kind!r}")
        self.lstm, self.horizon, self.kind = lstm, horizon, kind
        self.width, self.n_primitives, self.residual = width, n_primitives, residual
        expected = {"target": width, "window": horizon * width, "proportion": width + n_primitives}[kind]
        if lstm.output_size != expected:
            raise ValueError(f"upper head size {lstm.output_size} != {expected}")
        self.reset()

    @property
    def n_state_outputs(self) -> int:
        return self.horizon * self.width if self.kind == "window" else self.width

    def reset(self):
        self.state = LstmState.zeros(self.lstm)
        self.output = None
        self.refreshed_at = None

    def update(self, F_norm, k: int):
        out, self.state = lstm_step(self.lstm, self.state, F_norm)
        if self.residual:
            out = out.copy()
            out[: self.n_state_outputs] += np.tile(F_norm, self.n_state_outputs // self.width)
        self.output = out
        self.refreshed_at = k
        return out

    def due(self, k: int) -> bool:
        return self.output is None or k % self.horizon == 0

    def window(self) -> np.ndarray:
        if self.kind == "window":
            return self.output.reshape(self.horizon, self.width)
        return np.tile(self.output[: self.width], (self.horizon, 1))

    def to_dict(self) -> dict:
        return {"upper": {"kind": self.kind, "horizon": self.horizon, "width": self.width,
                          "n_primitives": self.n_primitives, "residual": self.residual},
                **model_to_dict(self.lstm)}

    @classmethod
    def from_dict(cls, d) -> "UpperModel":
        u = d["upper"]
        return cls(model_from_dict(d), u["horizon"], u["kind"], u["width"], u["n_primitives"],
                   u.get("residual", False))


def _phases(horizon: int, n_phases: int):
    n_phases = max(1, min(n_phases, horizon))
    return sorted(set(int(round(x)) for x in np.linspace(0, horizon, n_phases, endpoint=False)))


def upper_sequences(demo: Demonstration, stats: NormStats, horizon: int, kind: str, n_phases: int,
                    residual: bool = False, noisy_copies: int = 0, noise: float = 0.0, rng=None,
                    visited=None):
    """Strided (input, target) sequences, one per phase offset of the stride.

    ``noisy_copies`` extra copies of each sequence get Gaussian input noise
    (normalized units) while their targets stay on the demonstration.  With
    ``visited`` (a physical ``(T', 3D)`` follower array from a closed-loop
    run) the inputs are the visited states and the targets the
    demonstration's future at the same ticks.
    """
    F = (demo.follower.data - stats.mean) / stats.std
    T = len(demo)
    src = F if visited is None else (np.asarray(visited, dtype=np.float64) - stats.mean) / stats.std
    rng = np.random.default_rng(0) if rng is None else rng
    xs, ys = [], []
    for ph in _phases(horizon, n_phases):
        ks = np.arange(ph, min(T, len(src)), horizon)
        if ks.size == 0:
            continue
        if kind == "window":
            idx = np.minimum(ks[:, None] + np.arange(1, horizon + 1)[None, :], T - 1)
            y = F[idx].reshape(len(ks), -1)
        else:
            y = F[np.minimum(ks + horizon, T - 1)]
        for c in range(1 + noisy_copies):
            x = src[ks] if c == 0 else src[ks] + noise * rng.standard_normal(src[ks].shape)
            xs.append(x)
            ys.append(y - np.tile(x, y.shape[1] // x.shape[1]) if residual else y)
    return xs, ys


def train_upper(demos, stats: NormStats, horizon: int, kind: str, hidden_size: int = 32,
                num_layers: int = 2, cfg: TrainConfig | None = None, n_phases: int = 20,
                residual: bool = False, noisy_copies: int = 0, noise: float = 0.0) -> UpperModel:
    if kind == "proportion":
        raise ValueError("use train_learning_proportion_upper for the proportion head")
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng([cfg.seed, 7])
    xs, ys = [], []
    for d in demos:
        a, b = upper_sequences(d, stats, horizon, kind, n_phases, residual, noisy_copies, noise, rng)
        xs += a
        ys += b
    width = xs[0].shape[1]
    init = init_lstm(width, hidden_size, num_layers, ys[0].shape[1], seed=cfg.seed)
    lstm, hist = train(init, (xs, ys), cfg)
    up = UpperModel(lstm, horizon, kind, width, residual=residual)
    up.loss_curve = hist
    return up


def refine_upper(upper: UpperModel, demos, visited, stats: NormStats, cfg: TrainConfig,
                 n_phases: int = 20) -> UpperModel:
    """Continue training ``upper`` on the demonstrations plus closed-loop visits.

    ``visited`` is a list of ``(demo_index, follower_array)`` pairs; each
    visited state is labelled with the demonstration's future at the same
    tick, teaching the upper layer to steer back onto the demonstrated path.
    """
    if upper.kind == "proportion":
        raise ValueError("closed-loop refinement applies to target/window heads")
    demos = list(demos)
    xs, ys = [], []
    for d in demos:
        a, b = upper_sequences(d, stats, upper.horizon, upper.kind, n_phases)
        xs += a
        ys += b
    for i, run in visited:
        a, b = upper_sequences(demos[i], stats, upper.horizon, upper.kind, n_phases, visited=run)
        xs += a
        ys += b
    lstm, hist = train(upper.lstm, (xs, ys), cfg)
    out = UpperModel(lstm, upper.horizon, upper.kind, upper.width, upper.n_primitives, upper.residual)
    out.loss_curve = list(getattr(upper, "loss_curve", [])) + list(hist)
    return out


def _proportion_batch(demos, stats, horizon, n_phases):
    """Per-sequence tensors for proportion-upper training.

    Returns a list of dicts with strided inputs, upper targets and, for each
    upper step, the ``horizon`` ticks it governs (F_t, L_{t+1}, mask).
    """
    out = []
    for d in demos:
        F = (d.follower.data - stats.mean) / stats.std
        L = (d.leader.data - stats.mean) / stats.std
        T = len(d)
        for ph in _phases(horizon, n_phases):
            ks = np.arange(ph, T - 1, horizon)
            ticks = ks[:, None] + np.arange(horizon)[None, :]
            mask = (ticks <= T - 2).astype(np.float64)
            ticks = np.minimum(ticks, T - 2)
            out.append({"x": F[ks], "target": F[np.minimum(ks + horizon, T - 1)],
                        "F": F[ticks], "L": L[ticks + 1], "mask": mask})
    return out


def _pad_stack(items, key, T):
    first = items[0][key]
    arr = np.zeros((T, len(items)) + first.shape[1:])
    for j, it in enumerate(items):
        arr[: len(it[key]), j] = it[key]
    return arr


def train_learning_proportion_upper(bank: LowerBank, demos, cfg: TrainConfig | None = None,
                                    horizon: int = 20, hidden_size: int = 32, num_layers: int = 2,
                                    n_phases: int = 5, prediction_weight: float = 1.0,
                                    upper: UpperModel | None = None, residual: bool = False):
    """Train the proportion-emitting upper through the frozen weighted-average pipeline.

    Loss = MSE(sum_p w_p * lower_p([F_t, F_hat]), L_{t+1}) over the ticks each
    upper step governs, plus ``prediction_weight`` * MSE(F_hat, F_{k+n}).
    Gradients reach the LSTM through both the proportions and F_hat; the
    bank itself is never updated.
    """
    cfg = cfg or TrainConfig()
    stats = bank.stats_
    W = bank.width
    P = len(bank)
    if upper is None:
        lstm = init_lstm(W, hidden_size, num_layers, W + P, seed=cfg.seed)
        upper = UpperModel(lstm, horizon, "proportion", W, P, residual)
    if upper.n_primitives != P:
        raise ValueError(f"upper head has {upper.n_primitives} proportions, bank has {P}")
    lstm = upper.lstm.copy()
    items = _proportion_batch(demos, stats, horizon, n_phases)
    opt = Adam(lstm.arrays, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(items))
        total, count = 0.0, 0
        for s in range(0, len(items), cfg.batch_size):
            batch = [items[i] for i in order[s:s + cfg.batch_size]]
            Tu = max(len(b["x"]) for b in batch)
            xs = _pad_stack(batch, "x", Tu)
            seq_mask = np.zeros((Tu, len(batch), 1))
            for j, b in enumerate(batch):
                seq_mask[: len(b["x"]), j] = 1.0
            tgt = _pad_stack(batch, "target", Tu)
            Fw = _pad_stack(batch, "F", Tu)  # (Tu, B, n, W)
            Lw = _pad_stack(batch, "L", Tu)
            mw = _pad_stack(batch, "mask", Tu)[..., None] * seq_mask[..., None]  # (Tu, B, n, 1)
            if cfg.input_noise:
                xs = xs + cfg.input_noise * rng.standard_normal(xs.shape)
            out, _, cache = lstm_forward(lstm, xs)
            fhat, logits = out[..., :W], out[..., W:]
            if upper.residual:
                fhat = fhat + xs
            w = _softmax_rows(logits)  # (Tu, B, P)
            n = Fw.shape[2]
            X = np.concatenate([Fw, np.broadcast_to(fhat[:, :, None, :], Fw.shape)], axis=-1)
            Xf = X.reshape(-1, 2 * W)
            cand, acts = bank.forward_all(Xf, return_cache=True)  # (P, N, W)
            cand_r = cand.reshape(P, Tu, len(batch), n, W)
            combined = np.einsum("tbp,ptbnw->tbnw", w, cand_r)
            loss1, dcomb = mse_grad(combined, Lw, mw)
            loss2, dfhat = mse_grad(fhat, tgt, seq_mask)
            loss = loss1 + prediction_weight * loss2
            if not np.isfinite(loss):
                raise TrainingDiverged("training diverged")
            dfhat = prediction_weight * dfhat
            # proportions
            dw = np.einsum("tbnw,ptbnw->tbp", dcomb, cand_r)
            dlogits = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
            # F_hat through the bank inputs
            dcand = np.einsum("tbp,tbnw->ptbnw", w, dcomb).reshape(P, -1, W)
            dX = bank.input_gradient(acts, dcand).reshape(Tu, len(batch), n, 2 * W)
            dfhat = dfhat + dX[..., W:].sum(axis=2)
            grads, _ = lstm_backward(lstm, cache, np.concatenate([dfhat, dlogits], axis=-1))
            opt.step(grads)
            total += loss * len(batch)
            count += len(batch)
        history.append(total / count)
    trained = UpperModel(lstm, horizon, "proportion", W, P, upper.residual)
    trained.loss_curve = history
    return trained, history


# ---------------------------------------------------------------------------
# step functions
# ---------------------------------------------------------------------------

def _norm(stats, v):
    return (v - stats.mean) / stats.std


def baseline_step(upper: UpperModel, lower: MlpParams, F_k: RobotState, k: int,
                  stats: NormStats) -> RobotState:
    f = _norm(stats, flatten(F_k))
    if upper.due(k):
        upper.update(f, k)
    ref = upper.output[: upper.width]
    y = mlp_forward(lower, np.concatenate([f, ref]))
    return unflatten(y * stats.std + stats.mean, F_k.dim)


def learning_proportion_step(upper: UpperModel, bank: LowerBank, F_k: RobotState, k: int,
                             return_weights=False):
    if upper.kind != "proportion" or upper.n_primitives != len(bank):
        raise ValueError("upper proportion head does not match the bank size")
    stats = bank.stats_
    f = _norm(stats, flatten(F_k))
    if upper.due(k):
        upper.update(f, k)
    W = upper.width
    ref, logits = upper.output[:W], upper.output[W:]
    w = softmax(logits)
    cands = bank.forward_all(np.concatenate([f, ref])[None])[:, 0]
    y = weighted_average(cands, w.weights) * stats.std + stats.mean
    state = unflatten(y, F_k.dim)
    return (state, w, cands * stats.std + stats.mean) if return_weights else state


@dataclass
class FusionResult:
    command: RobotState
    weights: ProportionVector
    batch: CandidateBatch
    fused: np.ndarray


def _noise_sigma_vector(ce: CEConfig, D: int) -> np.ndarray:
    return np.repeat(np.asarray(ce.noise_sigma, dtype=np.float64), D)


def fuse_reference_window(F_k: RobotState, window_norm, bank: LowerBank, ltof: LToFModel,
                          cw: CostWeights, ce: CEConfig, k: int) -> FusionResult:
    """Shared core of the sampling and playback controllers.

    ``window_norm`` holds normalized follower references F_{k+1..k+n}; its
    last row is also the lower layers' long-horizon target.
    """
    stats = bank.stats_
    window = np.asarray(window_norm, dtype=np.float64)
    n, W = window.shape
    D = W // 3
    f = _norm(stats, flatten(F_k))
    ctx = np.vstack([f[None], window[:-1]])
    X = np.hstack([ctx, np.broadcast_to(window[-1], (n, W))])
    base = bank.forward_all(X) * stats.std + stats.mean  # (P, n, W)
    P, S = base.shape[0], ce.samples_per_primitive
    rng = np.random.default_rng([ce.seed, k])
    noise = rng.standard_normal((P, S, n, W)) * _noise_sigma_vector(ce, D)
    noise[:, 0] = 0.0
    cands = (base[:, None] + noise).reshape(P * S, n, W)
    span = 1 if ce.cost_window == "first" else n
    pred_F = ltof.forward((cands[:, :span] - stats.mean) / stats.std)
    costs = compute_cost(pred_F, window[:span], cw, window="full")
    weights = ce_weights(costs, ce)
    fused = weighted_average(cands, weights.weights)
    return FusionResult(unflatten(fused[0], D), weights, CandidateBatch(cands, costs), fused)


def _shifted_window(upper_window: np.ndarray, j: int) -> np.ndarray:
    n = upper_window.shape[0]
    idx = np.minimum(np.arange(j, j + n), n - 1)
    return upper_window[idx]


def sampling_proportion_step(upper: UpperModel, bank: LowerBank, ltof: LToFModel, F_k: RobotState,
                             k: int, cw: CostWeights, ce: CEConfig, return_result=False):
    f = _norm(bank.stats_, flatten(F_k))
    if upper.due(k):
        upper.update(f, k)
    window = _shifted_window(upper.window(), k - upper.refreshed_at)
    res = fuse_reference_window(F_k, window, bank, ltof, cw, ce, k)
    return res if return_result else res.command


def playback_window(playback: Trajectory, k0: int, horizon: int, stats: NormStats) -> np.ndarray:
    T = len(playback)
    idx = np.minimum(np.arange(k0 + 1, k0 + horizon + 1), T - 1)
    return (playback.data[idx] - stats.mean) / stats.std


def playback_proportion_step(playback: Trajectory, bank: LowerBank, ltof: LToFModel, k: int,
                             cw: CostWeights, ce: CEConfig, F_k: RobotState, horizon: int = 20,
                             return_result=False):
    k0 = (k // horizon) * horizon
    window = _shifted_window(playback_window(playback, k0, horizon, bank.stats_), k - k0)
    res = fuse_reference_window(F_k, window, bank, ltof, cw, ce, k)
    return res if return_result else res.command


# ---------------------------------------------------------------------------
# controllers (estimator API)
# ---------------------------------------------------------------------------

class _Controller(BaseEstimator):
    """fit on target-task demonstrations; ``step`` drives a closed-loop rollout.

    ``predict`` runs the controller teacher-forced along a follower
    trajectory array ``(T, 3D)`` and returns the ``(T, 3D)`` leader
    predictions.
    """

    def reset(self, seed: int | None = None):
        self.trial_seed_ = seed
        self.diagnostics_ = []
        return self

    def step(self, F_k: RobotState, k: int) -> RobotState:  # pragma: no cover - abstract
        raise NotImplementedError

    def predict(self, X):
        X = np.asarray(X.data if isinstance(X, Trajectory) else X, dtype=np.float64)
        D = X.shape[1] // 3
        self.reset(getattr(self, "trial_seed_", None))
        return np.array([flatten(self.step(unflatten(x, D), k)) for k, x in enumerate(X)])


def _default_cfg(cfg, epochs):
    return cfg if cfg is not None else TrainConfig(epochs=epochs)


class BaselineController(_Controller):
    def __init__(self, scaler: StateScaler | None = None, horizon=20, upper_hidden=32, upper_layers=2,
                 upper_phases=20, lower_hidden=(64, 64), upper_train: TrainConfig | None = None,
                 lower_train: TrainConfig | None = None, residual=True, augment_copies=0,
                 augment_noise=0.0, shift_copies=0, shift_sigma=0.0):
        self.scaler = scaler
        self.horizon = horizon
        self.upper_hidden = upper_hidden
        self.upper_layers = upper_layers
        self.upper_phases = upper_phases
        self.lower_hidden = lower_hidden
        self.upper_train = upper_train
        self.lower_train = lower_train
        self.residual = residual
        self.augment_copies = augment_copies
        self.augment_noise = augment_noise
        self.shift_copies = shift_copies
        self.shift_sigma = shift_sigma

    def fit(self, demos, y=None):
        """Upper on the demos' strided targets; lower trained like one bank primitive."""
        demos = list(demos)
        stats = self.scaler.stats_
        self.upper_ = train_upper(demos, stats, self.horizon, "target", self.upper_hidden,
                                  self.upper_layers, _default_cfg(self.upper_train, 1000),
                                  self.upper_phases, False, self.augment_copies,
                                  self.augment_noise)
        cfg = _default_cfg(self.lower_train, 300)
        rng = np.random.default_rng([cfg.seed, 11])
        X, Y = [], []
        for d in demos:
            ks = np.arange(len(d) - 1)
            ref = d.follower.data[reference_index(ks, self.horizon, len(d))]
            F, R, L = _shift_augment(d.follower.data[ks], ref, d.leader.data[ks + 1],
                                     self.shift_copies, self.shift_sigma, rng)
            X.append(np.hstack([(F - stats.mean) / stats.std, (R - stats.mean) / stats.std]))
            Y.append((L - stats.mean) / stats.std)
        X, Y = np.concatenate(X), np.concatenate(Y)
        W = Y.shape[1]
        cfg = replace(cfg, input_noise=_state_only_noise(cfg.input_noise, W))
        skip = _residual_skip(W // 3) if self.residual else None
        self.lower_, self.lower_loss_ = train(init_mlp([2 * W, *self.lower_hidden, W], cfg.seed, skip),
                                              (X, Y), cfg)
        self.stats_ = stats
        return self.reset()

    def set_models(self, upper: UpperModel, lower: MlpParams, stats: NormStats):
        self.upper_, self.lower_, self.stats_ = upper, lower, stats
        return self.reset()

    def reset(self, seed=None):
        if hasattr(self, "upper_"):
            self.upper_.reset()
        return super().reset(seed)

    def step(self, F_k, k):
        return baseline_step(self.upper_, self.lower_, F_k, k, self.stats_)


def select_primitives(n_total: int, max_primitives: int) -> list[int]:
    """Evenly spaced subset of primitive indices (all if already small enough)."""
    if n_total <= max_primitives:
        return list(range(n_total))
    return sorted(set(int(round(x)) for x in np.linspace(0, n_total - 1, max_primitives)))


class LearningProportionController(_Controller):
    def __init__(self, bank: LowerBank | None = None, horizon=20, upper_hidden=32, upper_layers=2,
                 upper_phases=5, max_primitives=30, upper_train: TrainConfig | None = None,
                 prediction_weight=1.0):
        self.bank = bank
        self.horizon = horizon
        self.upper_hidden = upper_hidden
        self.upper_layers = upper_layers
        self.upper_phases = upper_phases
        self.max_primitives = max_primitives
        self.upper_train = upper_train
        self.prediction_weight = prediction_weight

    def fit(self, demos, y=None):
        self.primitive_indices_ = select_primitives(len(self.bank), self.max_primitives)
        self.bank_ = self.bank.subset(self.primitive_indices_)
        self.upper_, self.loss_curve_ = train_learning_proportion_upper(
            self.bank_, list(demos), _default_cfg(self.upper_train, 300), self.horizon,
            self.upper_hidden, self.upper_layers, self.upper_phases, self.prediction_weight)
        return self.reset()

    def set_models(self, upper: UpperModel, indices):
        self.primitive_indices_ = list(indices)
        self.bank_ = self.bank.subset(self.primitive_indices_)
        self.upper_ = upper
        return self.reset()

    def reset(self, seed=None):
        if hasattr(self, "upper_"):
            self.upper_.reset()
        return super().reset(seed)

    def step(self, F_k, k):
        state, w, _ = learning_proportion_step(self.upper_, self.bank_, F_k, k, return_weights=True)
        self.diagnostics_.append((k, w.entropy, float("nan"), w.effective_sample_size))
        return state


class _FusionController(_Controller):
    def _ce(self) -> CEConfig:
        ce = self.ce or CEConfig()
        seed = getattr(self, "trial_seed_", None)
        if seed is not None:
            ce = CEConfig(**{**asdict(ce), "seed": seed})
        return ce

    def reset(self, seed=None):
        super().reset(seed)
        self.ce_ = self._ce()
        return self

    def _log(self, k, res: FusionResult):
        self.diagnostics_.append((k, res.weights.entropy, float(res.batch.costs.min()),
                                  res.weights.effective_sample_size))


class SamplingProportionController(_FusionController):
    def __init__(self, bank: LowerBank | None = None, ltof: LToFModel | None = None, horizon=20,
                 upper_hidden=32, upper_layers=2, upper_phases=20,
                 upper_train: TrainConfig | None = None, cost_weights: CostWeights | None = None,
                 ce: CEConfig | None = None, augment_copies=0, augment_noise=0.0):
        self.bank = bank
        self.ltof = ltof
        self.horizon = horizon
        self.upper_hidden = upper_hidden
        self.upper_layers = upper_layers
        self.upper_phases = upper_phases
        self.upper_train = upper_train
        self.cost_weights = cost_weights
        self.ce = ce
        self.augment_copies = augment_copies
        self.augment_noise = augment_noise

    def fit(self, demos, y=None):
        self.upper_ = train_upper(list(demos), self.bank.stats_, self.horizon, "window",
                                  self.upper_hidden, self.upper_layers,
                                  _default_cfg(self.upper_train, 1000), self.upper_phases,
                                  False, self.augment_copies, self.augment_noise)
        return self.reset()

    def set_models(self, upper: UpperModel):
        self.upper_ = upper
        return self.reset()

    def reset(self, seed=None):
        if hasattr(self, "upper_"):
            self.upper_.reset()
        return super().reset(seed)

    def step(self, F_k, k):
        res = sampling_proportion_step(self.upper_, self.bank, self.ltof, F_k, k,
                                       self.cost_weights or CostWeights(), self.ce_, return_result=True)
        self._log(k, res)
        return res.command


class PlaybackProportionController(_FusionController):
    def __init__(self, bank: LowerBank | None = None, ltof: LToFModel | None = None, horizon=20,
                 cost_weights: CostWeights | None = None, ce: CEConfig | None = None):
        self.bank = bank
        self.ltof = ltof
        self.horizon = horizon
        self.cost_weights = cost_weights
        self.ce = ce

    def fit(self, demos, y=None):
        """No training: registers the first demonstration's follower trajectory."""
        demos = list(demos)
        self.playback_ = demos[0].follower if isinstance(demos[0], Demonstration) else demos[0]
        return self.reset()

    def step(self, F_k, k):
        res = playback_proportion_step(self.playback_, self.bank, self.ltof, k,
                                       self.cost_weights or CostWeights(), self.ce_, F_k,
                                       self.horizon, return_result=True)
        self._log(k, res)
        return res.command


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_bank(bank: LowerBank, path, meta: dict | None = None) -> None:
    d = {"stats": bank.stats_.to_dict(), "tags": [list(t) for t in getattr(bank, "tags_", [])],
         "primitives": [model_to_dict(p) for p in bank.primitives_], "meta": meta or {}}
    Path(path).write_text(json.dumps(d))


def load_bank(path) -> LowerBank:
    d = json.loads(Path(path).read_text())
    stats = NormStats.from_dict(d["stats"])
    bank = LowerBank(StateScaler.from_stats(stats))
    bank.set_primitives([model_from_dict(p) for p in d["primitives"]], stats)
    bank.tags_ = [tuple(t) for t in d.get("tags", [])]
    return bank


def save_ltof(ltof: LToFModel, path, meta: dict | None = None) -> None:
    d = {"stats": ltof.stats_.to_dict(), "model": model_to_dict(ltof.mlp_), "meta": meta or {}}
    Path(path).write_text(json.dumps(d))


def load_ltof(path) -> LToFModel:
    d = json.loads(Path(path).read_text())
    stats = NormStats.from_dict(d["stats"])
    return LToFModel(StateScaler.from_stats(stats)).set_mlp(model_from_dict(d["model"]), stats)


def save_upper(upper: UpperModel, path, meta: dict | None = None, extra: dict | None = None) -> None:
    d = upper.to_dict()
    d["meta"] = meta or {}
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d))


def load_upper(path):
    d = json.loads(Path(path).read_text())
    return UpperModel.from_dict(d), d
