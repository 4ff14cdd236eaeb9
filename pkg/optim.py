"""
Numerical optimizers shared by the regressors and the HCRF.

Every optimizer works on one flat parameter vector; models supply pack/unpack.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from utils import setup_logging

logger = setup_logging(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class OptimizationError(RuntimeError):
    """Raised when an optimizer meets non-finite values"""


def rmsprop_step(params: np.ndarray, grads: np.ndarray, state: np.ndarray,
                 lr: float = 1e-3, decay: float = 0.9, eps: float = 1e-8) -> Tuple[np.ndarray, np.ndarray]:
    """One RMSProp update; returns (new params, new running mean of squared gradients)."""
    params, grads, state = (np.asarray(a, dtype=float) for a in (params, grads, state))
    if not (params.shape == grads.shape == state.shape):
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.shape}")
    if not (np.all(np.isfinite(params)) and np.all(np.isfinite(grads)) and np.all(np.isfinite(state))):
        raise OptimizationError("non-finite input to rmsprop_step")
    new_state = decay * state + (1.0 - decay) * grads ** 2
    if lr == 0:
        return params.copy(), new_state
    denom = np.sqrt(new_state) + eps
    step = np.divide(grads, denom, out=np.zeros_like(grads), where=denom > 0)
    return params - lr * step, new_state


@dataclass
class LBFGSConfig:
    history_size: int = 10
    max_iterations: int = 200
    gradient_tolerance: float = 1e-6
    function_tolerance: float = 0.0
    armijo_c: float = 1e-4
    shrink: float = 0.5
    max_line_search: int = 50

    def __post_init__(self):
        if self.history_size < 1:
            raise ValueError("history_size must be >= 1")
        if self.gradient_tolerance <= 0 or self.function_tolerance < 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")


@dataclass
class LBFGSResult:
    x: np.ndarray
    value: float
    iterations: int
    reason: str
    trace: List[Dict[str, float]] = field(default_factory=list)

    @property
    def accepted_values(self) -> List[float]:
        return [row['value'] for row in self.trace]


def two_loop_direction(grad: np.ndarray, s_list: Sequence[np.ndarray], y_list: Sequence[np.ndarray]) -> np.ndarray:
    """Inverse-Hessian approximation applied to grad (the search direction is its negative)."""
    q = np.array(grad, dtype=float)
    rhos = [1.0 / float(y @ s) for s, y in zip(s_list, y_list)]
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rhos)):
        a = rho * float(s @ q)
        alphas.append(a)
        q -= a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q *= float(s @ y) / float(y @ y)
    for (s, y, rho), a in zip(zip(s_list, y_list, rhos), reversed(alphas)):
        b = rho * float(y @ q)
        q += s * (a - b)
    return q


def lbfgs_minimize(objective: Objective, x0: np.ndarray, cfg: LBFGSConfig = None) -> LBFGSResult:
    """Limited-memory BFGS with Armijo backtracking."""
    cfg = cfg or LBFGSConfig()
    x = np.array(x0, dtype=float)
    value, grad = objective(x)
    value = float(value)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise OptimizationError("objective is not finite at the starting point")

    trace = [{'iteration': 0, 'value': value, 'grad_inf_norm': float(np.max(np.abs(grad), initial=0.0)),
              'step_size': 0.0}]
    s_list: List[np.ndarray] = []
    y_list: List[np.ndarray] = []
    reason = 'max_iterations'
    iteration = 0

    if trace[0]['grad_inf_norm'] <= cfg.gradient_tolerance:
        return LBFGSResult(x, value, 0, 'converged', trace)

    while iteration < cfg.max_iterations:
        direction = -two_loop_direction(grad, s_list, y_list)
        slope = float(grad @ direction)
        if slope >= 0:
            s_list, y_list = [], []
            direction = -grad
            slope = -float(grad @ grad)

        step = 1.0
        accepted = False
        for _ in range(cfg.max_line_search):
            x_new = x + step * direction
            new_value, new_grad = objective(x_new)
            new_value = float(new_value)
            if np.isfinite(new_value) and new_value <= value + cfg.armijo_c * step * slope:
                accepted = True
                break
            step *= cfg.shrink
        if not accepted:
            reason = 'line_search_failed'
            logger.warning(f"L-BFGS line search failed at iteration {iteration + 1}")
            break

        iteration += 1
        s, y = x_new - x, new_grad - grad
        if float(s @ y) > 1e-10:
            s_list.append(s)
            y_list.append(y)
            if len(s_list) > cfg.history_size:
                s_list.pop(0)
                y_list.pop(0)

        decrease = value - new_value
        x, value, grad = x_new, new_value, np.asarray(new_grad, dtype=float)
        grad_norm = float(np.max(np.abs(grad), initial=0.0))
        trace.append({'iteration': iteration, 'value': value, 'grad_inf_norm': grad_norm, 'step_size': step})

        if grad_norm <= cfg.gradient_tolerance:
            reason = 'converged'
            break
        if cfg.function_tolerance > 0 and decrease <= cfg.function_tolerance * max(1.0, abs(value)):
            reason = 'function_tolerance'
            break

    logger.info(f"L-BFGS stopped after {iteration} iterations ({reason}), value={value:.6g}")
    return LBFGSResult(x, value, iteration, reason, trace)


def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient, one coordinate at a time."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat_x.size):
        original = flat_x[i]
        flat_x[i] = original + h
        f_plus = f(x)
        flat_x[i] = original - h
        f_minus = f(x)
        flat_x[i] = original
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """Coordinate-wise |a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def trace_to_frame(trace: List[Dict[str, float]]) -> pd.DataFrame:
    return pd.DataFrame(trace, columns=['iteration', 'value', 'grad_inf_norm', 'step_size'])


def save_trace_csv(trace: List[Dict[str, float]], filename: str):
    trace_to_frame(trace).to_csv(filename, index=False, float_format='%.9g')
