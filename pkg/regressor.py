"""
Per-frame PSPI regressors: a bidirectional LSTM over 15-frame windows and a
one-hidden-layer feedforward baseline, both with exact gradients
"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from optim import OptimizationError, rmsprop_step
from utils import setup_logging, save_data, load_data, encode_array, decode_array

logger = setup_logging(__name__)

PREDICT_CHUNK = 512


@dataclass
class RegressorConfig:
    hidden_size: int = 128
    head_units: int = 64
    window_radius: int = 7
    ffn_hidden: int = 200
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    decay: float = 0.9
    eps: float = 1e-8
    show_progress: bool = False

    @property
    def window_length(self) -> int:
        return 2 * self.window_radius + 1


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True, eq=False)
class LSTMCellParams:
    """Gate-stacked weights; rows are ordered input, forget, cell-candidate, output."""
    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    @property
    def hidden_size(self) -> int:
        return int(self.U.shape[1])

    @property
    def input_size(self) -> int:
        return int(self.W.shape[1])

    def gate(self, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        H = self.hidden_size
        rows = slice(index * H, (index + 1) * H)
        return self.W[rows], self.U[rows], self.b[rows]

    @classmethod
    def initialize(cls, input_size: int, hidden_size: int, rng: np.random.Generator) -> 'LSTMCellParams':
        r_in, r_rec = 1.0 / np.sqrt(input_size), 1.0 / np.sqrt(hidden_size)
        b = np.zeros(4 * hidden_size)
        b[hidden_size:2 * hidden_size] = 1.0
        return cls(W=rng.uniform(-r_in, r_in, size=(4 * hidden_size, input_size)),
                   U=rng.uniform(-r_rec, r_rec, size=(4 * hidden_size, hidden_size)),
                   b=b)


@dataclass(frozen=True, eq=False)
class BiLSTMRegressor:
    forward_cell: LSTMCellParams
    backward_cell: LSTMCellParams
    head_W: np.ndarray
    head_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray
    window_radius: int = 7

    @property
    def window_length(self) -> int:
        return 2 * self.window_radius + 1

    @property
    def input_size(self) -> int:
        return self.forward_cell.input_size

    def arrays(self) -> List[np.ndarray]:
        f, b = self.forward_cell, self.backward_cell
        return [f.W, f.U, f.b, b.W, b.U, b.b, self.head_W, self.head_b, self.out_w, np.asarray(self.out_b, float)]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> 'BiLSTMRegressor':
        a = list(arrays)
        return BiLSTMRegressor(LSTMCellParams(*a[0:3]), LSTMCellParams(*a[3:6]),
                               a[6], a[7], a[8], np.asarray(a[9], float), self.window_radius)

    @classmethod
    def initialize(cls, input_size: int, cfg: RegressorConfig, seed: int) -> 'BiLSTMRegressor':
        rng = np.random.default_rng(seed)
        H, U = cfg.hidden_size, cfg.head_units
        fw = LSTMCellParams.initialize(input_size, H, rng)
        bw = LSTMCellParams.initialize(input_size, H, rng)
        r_head, r_out = 1.0 / np.sqrt(2 * H), 1.0 / np.sqrt(U)
        return cls(fw, bw,
                   head_W=rng.uniform(-r_head, r_head, size=(U, 2 * H)), head_b=np.zeros(U),
                   out_w=rng.uniform(-r_out, r_out, size=U), out_b=np.array(0.0),
                   window_radius=cfg.window_radius)


@dataclass(frozen=True, eq=False)
class FeedforwardBaseline:
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @property
    def input_size(self) -> int:
        return int(self.W1.shape[1])

    def arrays(self) -> List[np.ndarray]:
        return [self.W1, self.b1, self.w2, np.asarray(self.b2, float)]

    def with_arrays(self, arrays: Sequence[np.ndarray]) -> 'FeedforwardBaseline':
        a = list(arrays)
        return FeedforwardBaseline(a[0], a[1], a[2], np.asarray(a[3], float))

    @classmethod
    def initialize(cls, input_size: int, cfg: RegressorConfig, seed: int) -> 'FeedforwardBaseline':
        rng = np.random.default_rng(seed)
        r_in, r_out = 1.0 / np.sqrt(input_size), 1.0 / np.sqrt(cfg.ffn_hidden)
        return cls(W1=rng.uniform(-r_in, r_in, size=(cfg.ffn_hidden, input_size)), b1=np.zeros(cfg.ffn_hidden),
                   w2=rng.uniform(-r_out, r_out, size=cfg.ffn_hidden), b2=np.array(0.0))


def pack(model) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in model.arrays()])


def unpack(model, vector: np.ndarray):
    """A model shaped like `model` holding the values of `vector`."""
    arrays, offset = [], 0
    for a in model.arrays():
        a = np.asarray(a)
        arrays.append(np.asarray(vector[offset:offset + a.size], dtype=float).reshape(a.shape))
        offset += a.size
    if offset != len(vector):
        raise ValueError(f"vector of length {len(vector)} does not match {offset} parameters")
    return model.with_arrays(arrays)


# ---------------------------------------------------------------- LSTM core

def _cell_forward(cell: LSTMCellParams, X: np.ndarray):
    """Run a cell over X (B, L, d) in time order; returns final h and the step cache."""
    B, L, _ = X.shape
    H = cell.hidden_size
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    cache = []
    for t in range(L):
        z = X[:, t] @ cell.W.T + h @ cell.U.T + cell.b
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        c_new = f * c + i * g
        tanh_c = np.tanh(c_new)
        cache.append((X[:, t], h, c, i, f, g, o, tanh_c))
        h, c = o * tanh_c, c_new
    return h, cache


def _cell_backward(cell: LSTMCellParams, cache, dh_final: np.ndarray) -> LSTMCellParams:
    dW, dU, db = np.zeros_like(cell.W), np.zeros_like(cell.U), np.zeros_like(cell.b)
    dh = dh_final
    dc = np.zeros_like(dh_final)
    for x, h_prev, c_prev, i, f, g, o, tanh_c in reversed(cache):
        do = dh * tanh_c
        dc = dc + dh * o * (1.0 - tanh_c ** 2)
        dz = np.hstack([dc * g * i * (1.0 - i),
                        dc * c_prev * f * (1.0 - f),
                        dc * i * (1.0 - g ** 2),
                        do * o * (1.0 - o)])
        dW += dz.T @ x
        dU += dz.T @ h_prev
        db += dz.sum(axis=0)
        dh = dz @ cell.U
        dc = dc * f
    return LSTMCellParams(dW, dU, db)


def _check_windows(model: BiLSTMRegressor, windows: np.ndarray) -> np.ndarray:
    windows = np.asarray(windows, dtype=float)
    if windows.ndim == 2:
        windows = windows[None]
    if windows.ndim != 3 or windows.shape[1:] != (model.window_length, model.input_size):
        raise ValueError(f"windows of shape {windows.shape[1:]}, expected "
                         f"({model.window_length}, {model.input_size})")
    return windows


def _bilstm_forward(model: BiLSTMRegressor, windows: np.ndarray):
    h_fw, cache_fw = _cell_forward(model.forward_cell, windows)
    h_bw, cache_bw = _cell_forward(model.backward_cell, windows[:, ::-1])
    hcat = np.hstack([h_fw, h_bw])
    a = hcat @ model.head_W.T + model.head_b
    r = np.maximum(a, 0.0)
    y = r @ model.out_w + model.out_b
    return y, (cache_fw, cache_bw, hcat, a, r)


def forward_window(model: BiLSTMRegressor, window: np.ndarray) -> float:
    """Unclamped score of a single (window_length x d) window."""
    window = np.asarray(window, dtype=float)
    if window.ndim != 2:
        raise ValueError(f"expected a 2-D window, got shape {window.shape}")
    y, _ = _bilstm_forward(model, _check_windows(model, window))
    return float(y[0])


def forward_windows(model: BiLSTMRegressor, windows: np.ndarray) -> np.ndarray:
    y, _ = _bilstm_forward(model, _check_windows(model, windows))
    return y


def extract_window(frames: np.ndarray, t: int, radius: int) -> np.ndarray:
    """Window centred on t with edge replication beyond the sequence bounds."""
    T = len(frames)
    idx = np.clip(np.arange(t - radius, t + radius + 1), 0, T - 1)
    return np.asarray(frames)[idx]


def sequence_windows(frames: np.ndarray, radius: int, centers: Optional[Sequence[int]] = None) -> np.ndarray:
    frames = np.asarray(frames, dtype=float)
    T = len(frames)
    centers = np.arange(T) if centers is None else np.asarray(centers, dtype=int)
    idx = np.clip(centers[:, None] + np.arange(-radius, radius + 1)[None, :], 0, T - 1)
    return frames[idx]


def predict_sequence(model: BiLSTMRegressor, frames: np.ndarray) -> np.ndarray:
    """Per-frame scores clamped to [0, 1]."""
    frames = np.atleast_2d(np.asarray(frames, dtype=float))
    windows = sequence_windows(frames, model.window_radius)
    scores = np.concatenate([forward_windows(model, windows[k:k + PREDICT_CHUNK])
                             for k in range(0, len(windows), PREDICT_CHUNK)])
    return np.clip(scores, 0.0, 1.0)


def loss_and_gradient(model: BiLSTMRegressor, windows: np.ndarray,
                      targets: np.ndarray) -> Tuple[float, BiLSTMRegressor]:
    """Mean squared error over the batch and its exact gradient by backpropagation through time."""
    windows = _check_windows(model, windows)
    targets = np.asarray(targets, dtype=float).ravel()
    if len(windows) == 0:
        raise ValueError("empty batch")
    if len(targets) != len(windows):
        raise ValueError(f"{len(targets)} targets for {len(windows)} windows")
    B = len(windows)
    y, (cache_fw, cache_bw, hcat, a, r) = _bilstm_forward(model, windows)
    residual = y - targets
    loss = float(np.mean(residual ** 2))

    dy = 2.0 * residual / B
    d_out_w = r.T @ dy
    d_out_b = np.array(dy.sum())
    da = np.outer(dy, model.out_w) * (a > 0)
    d_head_W = da.T @ hcat
    d_head_b = da.sum(axis=0)
    dh = da @ model.head_W
    H = model.forward_cell.hidden_size
    d_fw = _cell_backward(model.forward_cell, cache_fw, dh[:, :H])
    d_bw = _cell_backward(model.backward_cell, cache_bw, dh[:, H:])
    grad = BiLSTMRegressor(d_fw, d_bw, d_head_W, d_head_b, d_out_w, d_out_b, model.window_radius)
    return loss, grad


# ---------------------------------------------------------------- feedforward baseline

def _check_frames(model: FeedforwardBaseline, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.input_size:
        raise ValueError(f"frame dimension {X.shape[1]}, expected {model.input_size}")
    return X


def forward_ffn(model: FeedforwardBaseline, frames: np.ndarray) -> np.ndarray:
    X = _check_frames(model, frames)
    return np.maximum(X @ model.W1.T + model.b1, 0.0) @ model.w2 + model.b2


def predict_sequence_ffn(model: FeedforwardBaseline, frames: np.ndarray) -> np.ndarray:
    return np.clip(forward_ffn(model, frames), 0.0, 1.0)


def loss_and_gradient_ffn(model: FeedforwardBaseline, frames: np.ndarray,
                          targets: np.ndarray) -> Tuple[float, FeedforwardBaseline]:
    X = _check_frames(model, frames)
    targets = np.asarray(targets, dtype=float).ravel()
    if len(X) == 0:
        raise ValueError("empty batch")
    if len(targets) != len(X):
        raise ValueError(f"{len(targets)} targets for {len(X)} frames")
    a = X @ model.W1.T + model.b1
    r = np.maximum(a, 0.0)
    residual = r @ model.w2 + model.b2 - targets
    dy = 2.0 * residual / len(X)
    da = np.outer(dy, model.w2) * (a > 0)
    grad = FeedforwardBaseline(W1=da.T @ X, b1=da.sum(axis=0), w2=r.T @ dy, b2=np.array(dy.sum()))
    return float(np.mean(residual ** 2)), grad


# ---------------------------------------------------------------- training

def _train_rmsprop(model, inputs: np.ndarray, targets: np.ndarray,
                   loss_and_grad: Callable, cfg: RegressorConfig, seed: int, label: str):
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float).ravel()
    n = len(inputs)
    if n < 1:
        raise ValueError("training needs at least one example")
    rng = np.random.default_rng(seed)
    params = pack(model)
    state = np.zeros_like(params)
    history = []

    for epoch in tqdm(range(cfg.epochs), desc=f"train {label}", disable=not cfg.show_progress):
        order = rng.permutation(n)
        total = 0.0
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grad = loss_and_grad(unpack(model, params), inputs[idx], targets[idx])
            if not np.isfinite(loss):
                raise OptimizationError(f"{label}: non-finite loss at epoch {epoch + 1}, batch {batch_no + 1}")
            params, state = rmsprop_step(params, pack(grad), state, cfg.learning_rate, cfg.decay, cfg.eps)
            total += loss * len(idx)
        history.append(total / n)
        logger.info(f"{label} epoch {epoch + 1}/{cfg.epochs}: loss={history[-1]:.6f}")

    return unpack(model, params), history


def train_regressor(model: BiLSTMRegressor, windows: np.ndarray, targets: np.ndarray,
                    cfg: RegressorConfig, seed: int) -> Tuple[BiLSTMRegressor, List[float]]:
    """Mini-batch RMSProp on the mean squared error; returns the model and per-epoch losses."""
    windows = _check_windows(model, windows)
    return _train_rmsprop(model, windows, targets, loss_and_gradient, cfg, seed, 'bilstm')


def train_ffn(model: FeedforwardBaseline, frames: np.ndarray, targets: np.ndarray,
              cfg: RegressorConfig, seed: int) -> Tuple[FeedforwardBaseline, List[float]]:
    frames = _check_frames(model, frames)
    return _train_rmsprop(model, frames, targets, loss_and_gradient_ffn, cfg, seed, 'ffn')


def build_training_windows(sequences: Sequence[np.ndarray], targets: Sequence[np.ndarray],
                           centers: Sequence[np.ndarray], radius: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stack the windows around the retained centres of every sequence with their targets."""
    windows, ys = [], []
    for frames, target, idx in zip(sequences, targets, centers):
        if len(idx) == 0:
            continue
        windows.append(sequence_windows(frames, radius, idx))
        ys.append(np.asarray(target, dtype=float)[idx])
    if not windows:
        return np.zeros((0, 2 * radius + 1, 0)), np.zeros(0)
    return np.concatenate(windows), np.concatenate(ys)


# ---------------------------------------------------------------- persistence

_BILSTM_NAMES = ['forward_W', 'forward_U', 'forward_b', 'backward_W', 'backward_U', 'backward_b',
                 'head_W', 'head_b', 'out_w', 'out_b']
_FFN_NAMES = ['W1', 'b1', 'w2', 'b2']


def save_regressor(model, filename: str):
    if isinstance(model, BiLSTMRegressor):
        payload = {'type': 'bilstm', 'window_radius': model.window_radius,
                   'params': dict(zip(_BILSTM_NAMES, map(encode_array, model.arrays())))}
    else:
        payload = {'type': 'ffn', 'params': dict(zip(_FFN_NAMES, map(encode_array, model.arrays())))}
    save_data(payload, filename)


def load_regressor(filename: str):
    payload = load_data(filename)
    params = payload['params']
    if payload['type'] == 'bilstm':
        a = [decode_array(params[name]) for name in _BILSTM_NAMES]
        return BiLSTMRegressor(LSTMCellParams(*a[0:3]), LSTMCellParams(*a[3:6]), a[6], a[7], a[8], a[9],
                               int(payload['window_radius']))
    return FeedforwardBaseline(*(decode_array(params[name]) for name in _FFN_NAMES))


def zero_like(model):
    return model.with_arrays([np.zeros_like(np.asarray(a, dtype=float)) for a in model.arrays()])
