"""
Latent-state hidden conditional random field for sequence-level VAS classification.

Each class k owns a linear-chain CRF over C hidden states with unary weights
u_k (C x d) and a stationary transition matrix m_k (C x C). The class posterior
integrates the hidden path out: P(k | S) is proportional to Z_k(S). Everything is
computed in log space.
"""
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from optim import LBFGSConfig, LBFGSResult, lbfgs_minimize
from utils import setup_logging, save_data, load_data

logger = setup_logging(__name__)

BRUTE_FORCE_LIMIT = 10 ** 6
BATCH_SEQUENCES = 32
_TINY = np.finfo(float).tiny


class HCRFError(ValueError):
    """Raised for index, label and dimension violations"""


@dataclass(frozen=True, eq=False)
class HCRFModel:
    u: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        u, m = np.asarray(self.u, dtype=float), np.asarray(self.m, dtype=float)
        if u.ndim != 3 or m.ndim != 3 or m.shape != (u.shape[0], u.shape[1], u.shape[1]):
            raise HCRFError(f"inconsistent parameter shapes u={u.shape}, m={m.shape}")
        if u.shape[0] < 1 or u.shape[1] < 1:
            raise HCRFError("need at least one class and one hidden state")
        object.__setattr__(self, 'u', u)
        object.__setattr__(self, 'm', m)

    @property
    def n_classes(self) -> int:
        return self.u.shape[0]

    @property
    def n_states(self) -> int:
        return self.u.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.u.shape[2]

    @classmethod
    def zeros(cls, n_classes: int, n_states: int, feature_dim: int) -> 'HCRFModel':
        return cls(np.zeros((n_classes, n_states, feature_dim)), np.zeros((n_classes, n_states, n_states)))

    @classmethod
    def random(cls, n_classes: int, n_states: int, feature_dim: int, scale: float,
               rng: np.random.Generator) -> 'HCRFModel':
        return cls(rng.uniform(-scale, scale, size=(n_classes, n_states, feature_dim)),
                   rng.uniform(-scale, scale, size=(n_classes, n_states, n_states)))


@dataclass
class HCRFTrainConfig:
    n_classes: int = 11
    n_states: int = 11
    lam: float = 1.0
    init_scale: float = 0.1
    seed: int = 0
    lbfgs: LBFGSConfig = field(default_factory=lambda: LBFGSConfig(function_tolerance=1e-9))
    n_workers: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise HCRFError(f"lambda must be non-negative, got {self.lam}")
        if self.n_classes < 1 or self.n_states < 1:
            raise HCRFError("need at least one class and one hidden state")


def add_bias(features: np.ndarray) -> np.ndarray:
    """Append the constant 1 coordinate used as the unary bias."""
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    return np.hstack([features, np.ones((features.shape[0], 1))])


def pack(model: HCRFModel) -> np.ndarray:
    return np.concatenate([model.u.ravel(), model.m.ravel()])


def unpack(vector: np.ndarray, n_classes: int, n_states: int, feature_dim: int) -> HCRFModel:
    n_u = n_classes * n_states * feature_dim
    return HCRFModel(vector[:n_u].reshape(n_classes, n_states, feature_dim),
                     vector[n_u:].reshape(n_classes, n_states, n_states))


# ---------------------------------------------------------------- potentials

def _check_class(model: HCRFModel, k: int):
    if not 0 <= k < model.n_classes:
        raise HCRFError(f"class {k} outside [0, {model.n_classes - 1}]")


def _check_state(model: HCRFModel, c: int):
    if not 0 <= c < model.n_states:
        raise HCRFError(f"state {c} outside [0, {model.n_states - 1}]")


def _check_sequence(model: HCRFModel, S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] < 1 or S.shape[1] != model.feature_dim:
        raise HCRFError(f"feature sequence of shape {S.shape}, expected (T >= 1, {model.feature_dim})")
    return S


def unary_potential(model: HCRFModel, k: int, c: int, frame: np.ndarray) -> float:
    _check_class(model, k)
    _check_state(model, c)
    frame = np.asarray(frame, dtype=float)
    if frame.shape != (model.feature_dim,):
        raise HCRFError(f"frame dimension {frame.shape}, expected ({model.feature_dim},)")
    return float(model.u[k, c] @ frame)


def edge_potential(model: HCRFModel, k: int, c: int, l: int) -> float:
    _check_class(model, k)
    _check_state(model, c)
    _check_state(model, l)
    return float(model.m[k, c, l])


def sequence_score(model: HCRFModel, k: int, S: np.ndarray, H: Sequence[int]) -> float:
    """Sum of unary scores along the path plus the transitions between consecutive states."""
    _check_class(model, k)
    S = _check_sequence(model, S)
    if len(H) != len(S):
        raise HCRFError(f"path of length {len(H)} for a sequence of length {len(S)}")
    score = sum(unary_potential(model, k, h, s) for h, s in zip(H, S))
    score += sum(edge_potential(model, k, a, b) for a, b in zip(H[:-1], H[1:]))
    return float(score)


# ---------------------------------------------------------------- inference

def _unary_scores(model: HCRFModel, S: np.ndarray) -> np.ndarray:
    """(K, T, C) unary scores."""
    return np.einsum('td,kcd->ktc', S, model.u)


def _forward(model: HCRFModel, S: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    phi = _unary_scores(model, S)
    T = phi.shape[1]
    log_alpha = np.empty_like(phi)
    log_alpha[:, 0] = phi[:, 0]
    for t in range(1, T):
        log_alpha[:, t] = phi[:, t] + logsumexp(log_alpha[:, t - 1, :, None] + model.m, axis=1)
    return phi, log_alpha


def _forward_backward(model: HCRFModel, S: np.ndarray):
    """Log partition per class, unary marginals (K, T, C) and pairwise marginals (K, T-1, C, C)."""
    phi, log_alpha = _forward(model, S)
    K, T, C = phi.shape
    log_z = logsumexp(log_alpha[:, -1], axis=1)
    log_beta = np.zeros_like(phi)
    for t in range(T - 2, -1, -1):
        log_beta[:, t] = logsumexp(model.m + (phi[:, t + 1] + log_beta[:, t + 1])[:, None, :], axis=2)
    unary = np.exp(log_alpha + log_beta - log_z[:, None, None])
    pairwise = np.exp(log_alpha[:, :-1, :, None] + model.m[:, None]
                      + (phi[:, 1:] + log_beta[:, 1:])[:, :, None, :] - log_z[:, None, None, None])
    return log_z, unary, pairwise


def log_partitions(model: HCRFModel, S: np.ndarray) -> np.ndarray:
    """log Z_k(S) for every class."""
    S = _check_sequence(model, S)
    _, log_alpha = _forward(model, S)
    return logsumexp(log_alpha[:, -1], axis=1)


def log_partition(model: HCRFModel, k: int, S: np.ndarray) -> float:
    _check_class(model, k)
    return float(log_partitions(model, S)[k])


def class_posterior(model: HCRFModel, S: np.ndarray) -> np.ndarray:
    log_z = log_partitions(model, S)
    return np.exp(log_z - logsumexp(log_z))


def state_marginals(model: HCRFModel, k: int, S: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """P(h_t = c | S, k) as (T, C) and P(h_{t-1} = c, h_t = l | S, k) as (T-1, C, C)."""
    _check_class(model, k)
    S = _check_sequence(model, S)
    _, unary, pairwise = _forward_backward(model, S)
    return unary[k], pairwise[k]


def predict_vas(model: HCRFModel, S: np.ndarray) -> int:
    """Most probable class; ties go to the lower VAS value."""
    return int(np.argmax(class_posterior(model, S)))


# ---------------------------------------------------------------- learning

def _pad(sequences: Sequence[np.ndarray], feature_dim: int) -> Tuple[np.ndarray, np.ndarray]:
    """Zero-padded (N, T_max, d) batch and its (N, T_max) validity mask."""
    lengths = np.array([len(S) for S in sequences])
    X = np.zeros((len(sequences), lengths.max(), feature_dim))
    for n, S in enumerate(sequences):
        X[n, :len(S)] = S
    return X, np.arange(X.shape[1])[None, :] < lengths[:, None]


def _batch_terms(model: HCRFModel, sequences: Sequence[np.ndarray], labels: Sequence[int]):
    """
    Negative log-likelihood and gradient summed over a padded batch of sequences.

    Past the end of a sequence alpha is carried forward unchanged and beta is 0, so
    log Z is read at the last padded step. Each recursion step is a max-shifted
    matrix product against exp(m). The pairwise expectation is accumulated per class
    the same way instead of materialising (T-1, C, C) marginals.
    """
    X, valid = _pad(sequences, model.feature_dim)
    N, T_max = valid.shape
    phi = np.einsum('ntd,kcd->nktc', X, model.u)

    col_max = model.m.max(axis=1)
    row_max = model.m.max(axis=2)
    exp_col = np.exp(model.m - col_max[:, None, :])
    exp_row = np.exp(model.m - row_max[:, :, None])

    log_alpha = np.empty_like(phi)
    log_alpha[:, :, 0] = phi[:, :, 0]
    for t in range(1, T_max):
        prev = log_alpha[:, :, t - 1]
        shift = prev.max(axis=2, keepdims=True)
        mixed = (np.exp(prev - shift)[:, :, None, :] @ exp_col)[:, :, 0]
        step = phi[:, :, t] + shift + col_max + np.log(np.maximum(mixed, _TINY))
        log_alpha[:, :, t] = np.where(valid[:, t, None, None], step, prev)
    log_z = logsumexp(log_alpha[:, :, -1], axis=2)

    log_beta = np.zeros_like(phi)
    for t in range(T_max - 2, -1, -1):
        nxt = phi[:, :, t + 1] + log_beta[:, :, t + 1]
        shift = nxt.max(axis=2, keepdims=True)
        mixed = (exp_row @ np.exp(nxt - shift)[..., None])[..., 0]
        step = shift + row_max + np.log(np.maximum(mixed, _TINY))
        log_beta[:, :, t] = np.where(valid[:, t + 1, None, None], step, 0.0)

    rows = np.arange(N)
    labels = np.asarray(labels, dtype=int)
    log_norm = logsumexp(log_z, axis=1)
    weights = np.exp(log_z - log_norm[:, None])
    weights[rows, labels] -= 1.0

    unary = np.exp(log_alpha + log_beta - log_z[:, :, None, None]) * valid[:, None, :, None]
    grad_u = np.einsum('nk,nktc,ntd->kcd', weights, unary, X, optimize=True)

    left = log_alpha[:, :, :-1]
    right = (phi + log_beta)[:, :, 1:]
    left_max = left.max(axis=3, keepdims=True)
    right_max = right.max(axis=3, keepdims=True)
    scale = (np.exp(left_max[..., 0] + right_max[..., 0] - log_z[:, :, None])
             * weights[:, :, None] * valid[:, None, 1:])
    grad_m = np.exp(model.m) * np.einsum('nkt,nktc,nktl->kcl', scale, np.exp(left - left_max),
                                         np.exp(right - right_max), optimize=True)
    return float(np.sum(log_norm - log_z[rows, labels])), grad_u, grad_m


def rll_and_gradient(model: HCRFModel, sequences: Sequence[np.ndarray], labels: Sequence[int],
                     lam: float, n_workers: int = 1) -> Tuple[float, HCRFModel]:
    """
    Regularised negative log-likelihood and its exact gradient.

    Sequences are sorted by length and cut into fixed batches, so the summation order
    and the result do not depend on n_workers.
    """
    if len(sequences) != len(labels):
        raise HCRFError(f"{len(labels)} labels for {len(sequences)} sequences")
    for label in labels:
        if not 0 <= label < model.n_classes:
            raise HCRFError(f"label {label} outside [0, {model.n_classes - 1}]")
    checked = [_check_sequence(model, S) for S in sequences]

    order = sorted(range(len(checked)), key=lambda i: len(checked[i]))
    jobs = [([checked[i] for i in chunk], [labels[i] for i in chunk])
            for chunk in (order[j:j + BATCH_SEQUENCES] for j in range(0, len(order), BATCH_SEQUENCES))]
    if n_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            terms = list(pool.map(lambda job: _batch_terms(model, *job), jobs))
    else:
        terms = [_batch_terms(model, *job) for job in jobs]

    value = lam * (np.sum(model.u ** 2) + np.sum(model.m ** 2))
    grad_u = 2.0 * lam * model.u
    grad_m = 2.0 * lam * model.m
    for nll, g_u, g_m in terms:
        value += nll
        grad_u = grad_u + g_u
        grad_m = grad_m + g_m
    return float(value), HCRFModel(grad_u, grad_m)


def train_hcrf(sequences: Sequence[np.ndarray], labels: Sequence[int],
               cfg: HCRFTrainConfig) -> Tuple[HCRFModel, LBFGSResult]:
    """Fit the HCRF by L-BFGS on the regularised negative log-likelihood."""
    if not sequences:
        raise HCRFError("training needs at least one labelled sequence")
    feature_dim = np.asarray(sequences[0]).shape[1]
    K, C = cfg.n_classes, cfg.n_states
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=K)
    empty = np.flatnonzero(counts == 0).tolist()
    if empty:
        logger.warning(f"HCRF classes without training sequences: {empty}")

    rng = np.random.default_rng(cfg.seed)
    initial = HCRFModel.random(K, C, feature_dim, cfg.init_scale, rng)

    def objective(x: np.ndarray):
        value, grad = rll_and_gradient(unpack(x, K, C, feature_dim), sequences, labels, cfg.lam, cfg.n_workers)
        return value, pack(grad)

    logger.info(f"Training HCRF: {len(sequences)} sequences, K={K}, C={C}, d={feature_dim}, lambda={cfg.lam}")
    result = lbfgs_minimize(objective, pack(initial), cfg.lbfgs)
    return unpack(result.x, K, C, feature_dim), result


def training_accuracy(model: HCRFModel, sequences: Sequence[np.ndarray], labels: Sequence[int]) -> float:
    return float(np.mean([predict_vas(model, S) == label for S, label in zip(sequences, labels)]))


def select_lambda(sequences: Sequence[np.ndarray], labels: Sequence[int], groups: Sequence[str],
                  grid: Sequence[float], cfg: HCRFTrainConfig, seed: int) -> float:
    """
    Pick lambda by validation MAE on a subject-independent split of the training data.

    About a third of the groups (persons) are held out. The first grid value with the
    lowest MAE wins; with fewer than two groups the configured lambda is kept.
    """
    unique = sorted(set(groups))
    if not grid or len(unique) < 2:
        return cfg.lam
    order = np.random.default_rng(seed).permutation(len(unique))
    n_val = max(1, len(unique) // 3)
    val_groups = {unique[i] for i in order[:n_val]}
    train_idx = [i for i, g in enumerate(groups) if g not in val_groups]
    val_idx = [i for i, g in enumerate(groups) if g in val_groups]

    best_lam, best_mae = cfg.lam, np.inf
    for lam in grid:
        trial = replace(cfg, lam=lam)
        model, _ = train_hcrf([sequences[i] for i in train_idx], [labels[i] for i in train_idx], trial)
        mae = float(np.mean([abs(predict_vas(model, sequences[i]) - labels[i]) for i in val_idx]))
        logger.info(f"lambda={lam}: validation MAE={mae:.4f}")
        if mae < best_mae:
            best_lam, best_mae = lam, mae
    logger.info(f"Selected lambda={best_lam}")
    return best_lam


# ---------------------------------------------------------------- oracles

def _paths(model: HCRFModel, T: int):
    if model.n_states ** T > BRUTE_FORCE_LIMIT:
        raise HCRFError(f"{model.n_states}^{T} paths exceed the brute-force limit")
    return itertools.product(range(model.n_states), repeat=T)


def brute_force_log_partition(model: HCRFModel, k: int, S: np.ndarray) -> float:
    """Log partition by explicit enumeration of every hidden path."""
    S = _check_sequence(model, S)
    _check_class(model, k)
    scores = [sequence_score(model, k, S, H) for H in _paths(model, len(S))]
    return float(logsumexp(scores))


def brute_force_class_posterior(model: HCRFModel, S: np.ndarray) -> np.ndarray:
    """Class posterior by enumerating the joint (class, path) space."""
    S = _check_sequence(model, S)
    paths = list(_paths(model, len(S)))
    joint = np.array([[sequence_score(model, k, S, H) for H in paths] for k in range(model.n_classes)])
    log_z = logsumexp(joint, axis=1)
    return np.exp(log_z - logsumexp(joint))


def brute_force_state_marginals(model: HCRFModel, k: int, S: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    S = _check_sequence(model, S)
    _check_class(model, k)
    T, C = len(S), model.n_states
    paths = list(_paths(model, T))
    scores = np.array([sequence_score(model, k, S, H) for H in paths])
    probs = np.exp(scores - logsumexp(scores))
    unary = np.zeros((T, C))
    pairwise = np.zeros((max(T - 1, 0), C, C))
    for H, p in zip(paths, probs):
        for t, h in enumerate(H):
            unary[t, h] += p
        for t in range(1, T):
            pairwise[t - 1, H[t - 1], H[t]] += p
    return unary, pairwise


# ---------------------------------------------------------------- persistence

def save_hcrf(model: HCRFModel, filename: str, extra: Optional[dict] = None):
    payload = {
        'K': model.n_classes, 'C': model.n_states, 'd': model.feature_dim,
        'u': [model.u[k].ravel().tolist() for k in range(model.n_classes)],
        'm': [model.m[k].ravel().tolist() for k in range(model.n_classes)],
    }
    if extra:
        payload.update(extra)
    save_data(payload, filename)


def load_hcrf(filename: str) -> HCRFModel:
    payload = load_data(filename)
    K, C, d = payload['K'], payload['C'], payload['d']
    return HCRFModel(np.asarray(payload['u'], dtype=float).reshape(K, C, d),
                     np.asarray(payload['m'], dtype=float).reshape(K, C, C))

