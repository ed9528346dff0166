import functools
import math

import numpy as np


def flexible_decorator(func):
    """
    This is a decorator decorator to make all of these work:
    @decorator
    @decorator()
    @decorator(some_arg)
    @decorator(some_kw_arg=value)
    @decorator(some_arg, some_kw_arg=value)
    but it will only work for decorators that wrap functions.
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and len(kwargs) == 0:
            return func(args[0])
        else:
            return lambda f: func(f, *args, **kwargs)
    return wrapper


def compensated_sum(values) -> float:
    return math.fsum(np.asarray(values, dtype=float).ravel().tolist())


def weighted_least_squares(design: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None):
    """
    Solves min sum w (y - X b)^2.
    :return: (coefficients, standard errors, weighted residual norm). Standard errors use the weights as inverse
        variances when they are given, otherwise the residual variance of the fit.
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = design.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)
    xw = design * sw[:, None]
    yw = y * sw
    if np.linalg.matrix_rank(xw) < k:
        raise np.linalg.LinAlgError('singular design matrix')
    coef, *_ = np.linalg.lstsq(xw, yw, rcond=None)
    resid = yw - xw @ coef
    cov = np.linalg.inv(xw.T @ xw)
    if weights is None:
        dof = max(n - k, 1)
        cov = cov * float(resid @ resid) / dof
    return coef, np.sqrt(np.clip(np.diag(cov), 0.0, None)), float(np.linalg.norm(resid))


def log_log_slope(x, y) -> tuple[float, float]:
    """Unweighted slope and intercept of log y against log x."""
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return float(slope), float(intercept)
