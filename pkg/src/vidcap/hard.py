"""Multi-sample bound and leave-one-out gradient estimator for hard attention.

With ``K`` independent layer-selection paths ``m^1..m^K`` and their caption
likelihoods ``p_k = p(Y | m^k, A)`` the bound is

    L = log((1/K) * sum_k p_k)

and its gradient is estimated by the surrogate

    sum_k  Lhat_k * log p(m^k | A)  +  w_k * log p(Y | m^k, A)

with ``w_k = p_k / sum_j p_j`` and the learning signal
``Lhat_k = L - log((1/K) * (sum_{j != k} p_j + f_k))``, where ``f_k`` is the
geometric mean of the other samples' likelihoods. Both weights are treated as
constants under differentiation.

The ``enumerate_*`` and ``expected_*`` helpers compute exact expectations on
instances small enough to list every path; they are oracles, not training code.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from . import tensor as T
from .decoder import caption_forward
from .errors import ContractError

ENUMERATION_CAP = 4096


def sample_paths(features, caption, params, cfg, k, rng, selections=None, dropout_rng=None):
    """``k`` hard-attention paths in one batched forward pass."""
    return caption_forward(features, caption, params, cfg, mode="hard", n_paths=k,
                           selections=selections, rng=rng, dropout_rng=dropout_rng)


def log_mean_exp(x):
    x = np.asarray(x, dtype=np.float64)
    return float(logsumexp(x) - math.log(x.size))


def multi_sample_bound(features, caption, params, cfg, k, rng):
    """One draw of ``log((1/K) sum_k p(Y|m^k, A))``."""
    if k < 1:
        raise ContractError(f"the bound needs K >= 1 samples, got {k}")
    with T.no_grad():
        fwd = sample_paths(features, caption, params, cfg, k, rng)
    return log_mean_exp(fwd.log_py.data)


@dataclass
class VimcoTerms:
    bound: float
    signal: np.ndarray      # Lhat_k, or the bound itself without the baseline
    omega: np.ndarray
    baseline: np.ndarray    # log((1/K)(sum_{j!=k} p_j + f_k)); zeros without the baseline


def vimco_terms(log_py, use_baseline=True):
    """Learning signals and importance weights from ``K`` log-likelihoods."""
    log_py = np.asarray(log_py, dtype=np.float64)
    k = log_py.size
    if k < 2:
        raise ContractError(f"the leave-one-out estimator needs K >= 2 samples, got {k}")
    bound = log_mean_exp(log_py)
    omega = np.exp(log_py - logsumexp(log_py))
    if not use_baseline:
        return VimcoTerms(bound, np.full(k, bound), omega, np.zeros(k))
    total = log_py.sum()
    baseline = np.empty(k)
    for j in range(k):
        others = np.delete(log_py, j)
        log_f = (total - log_py[j]) / (k - 1)
        baseline[j] = logsumexp(np.append(others, log_f)) - math.log(k)
    return VimcoTerms(bound, bound - baseline, omega, baseline)


def vimco_surrogate(fwd, use_baseline=True):
    """Scalar whose gradient is the estimator, plus the terms used to build it."""
    terms = vimco_terms(fwd.log_py.data, use_baseline)
    score = T.sum_(fwd.log_pm * T.Tensor(terms.signal))
    pathwise = T.sum_(fwd.log_py * T.Tensor(terms.omega))
    return score + pathwise, score, pathwise, terms


@dataclass
class EstimatorOutput:
    bound: float
    grads: dict
    score_grads: dict
    pathwise_grads: dict
    omega: np.ndarray
    signal: np.ndarray
    baseline: np.ndarray
    selections: np.ndarray = None


def _grads_of(scalar, params, names):
    params.zero_grad()
    scalar.backward()
    return {n: params.grad(n).copy() for n in names}


def vimco_gradient(features, caption, params, cfg, k, rng=None, selections=None, use_baseline=True,
                   split=True, names=None):
    """Gradient estimate of the multi-sample bound from ``k`` fresh or given paths.

    With ``split`` the score-function and pathwise parts are also returned
    separately (two extra backward passes).
    """
    if k < 2:
        raise ContractError(f"the leave-one-out estimator needs K >= 2 samples, got {k}")
    names = list(params.names()) if names is None else list(names)
    fwd = sample_paths(features, caption, params, cfg, k, rng, selections)
    total, score, pathwise, terms = vimco_surrogate(fwd, use_baseline)
    grads = _grads_of(total, params, names)
    score_g = pathwise_g = {}
    if split:
        fwd2 = sample_paths(features, caption, params, cfg, k, None, fwd.selections)
        _, score2, path2, _ = vimco_surrogate(fwd2, use_baseline)
        score_g = _grads_of(score2, params, names)
        fwd3 = sample_paths(features, caption, params, cfg, k, None, fwd.selections)
        _, _, path3, _ = vimco_surrogate(fwd3, use_baseline)
        pathwise_g = _grads_of(path3, params, names)
    params.zero_grad()
    return EstimatorOutput(terms.bound, grads, score_g, pathwise_g, terms.omega, terms.signal,
                           terms.baseline, fwd.selections)


# -- exact enumeration oracles -------------------------------------------------
def enumerate_paths(n_layers, n_steps, cap=ENUMERATION_CAP):
    n = n_layers ** n_steps
    if n > cap:
        raise ContractError(f"{n_layers}^{n_steps} = {n} selection paths exceeds the enumeration cap {cap}")
    return np.array(list(itertools.product(range(n_layers), repeat=n_steps)), dtype=np.intp).reshape(n, n_steps)


def path_log_probs(features, caption, params, cfg, cap=ENUMERATION_CAP):
    """Forward pass over every selection path: ``(paths, log p(m|A), log p(Y|m,A))`` tensors."""
    paths = enumerate_paths(features.n_layers, len(caption) - 1, cap)
    fwd = caption_forward(features, caption, params, cfg, mode="hard", n_paths=len(paths), selections=paths)
    return paths, fwd.log_pm, fwd.log_py


@dataclass
class ExactResult:
    log_marginal: float
    grads: dict
    paths: np.ndarray
    log_q: np.ndarray
    log_py: np.ndarray = field(repr=False, default=None)


def enumerate_exact(features, caption, params, cfg, cap=ENUMERATION_CAP, names=None):
    """Exact ``log p(Y|A) = log sum_m p(m|A) p(Y|m,A)`` and its gradient."""
    names = list(params.names()) if names is None else list(names)
    paths, log_q, log_py = path_log_probs(features, caption, params, cfg, cap)
    joint = log_q + log_py
    log_marg = T.logsumexp(joint, axis=0)
    grads = _grads_of(log_marg, params, names)
    params.zero_grad()
    return ExactResult(float(log_marg.data), grads, paths, log_q.data.copy(), log_py.data.copy())


def _compositions(n, k):
    """All count vectors of length ``n`` summing to ``k``."""
    for bars in itertools.combinations(range(n + k - 1), n - 1):
        prev, counts = -1, []
        for b in bars + (n + k - 1,):
            counts.append(b - prev - 1)
            prev = b
        yield counts


def expected_bound_exact(log_q, log_py, k):
    """``E[L^K]`` over ``K`` i.i.d. paths drawn from ``q``, by summing over count vectors."""
    log_q = np.asarray(log_q, dtype=np.float64)
    log_py = np.asarray(log_py, dtype=np.float64)
    n = log_q.size
    total = 0.0
    log_kfact = gammaln(k + 1)
    for counts in _compositions(n, k):
        c = np.asarray(counts, dtype=np.float64)
        nz = c > 0
        log_w = log_kfact - gammaln(c[nz] + 1).sum() + (c[nz] * log_q[nz]).sum()
        value = logsumexp(np.log(c[nz]) + log_py[nz]) - math.log(k)
        total += math.exp(log_w) * value
    return total


def expected_bound_of_params(features, caption, params, cfg, k, cap=ENUMERATION_CAP):
    with T.no_grad():
        _, log_q, log_py = path_log_probs(features, caption, params, cfg, cap)
    return expected_bound_exact(log_q.data, log_py.data, k)


@dataclass
class EstimatorMoments:
    mean: dict
    score_mean: dict
    score_variance: float     # trace of the covariance of the score-function part
    n_tuples: int


def expected_estimator_exact(features, caption, params, cfg, k, use_baseline=True, names=None,
                             cap=ENUMERATION_CAP):
    """Exact mean (and score-term variance) of the estimator over every ``K``-tuple of paths.

    Each tuple is pushed through :func:`vimco_gradient` with forced selections
    and weighted by its probability under the sampling distribution.
    """
    names = list(params.names()) if names is None else list(names)
    with T.no_grad():
        paths, log_q, _ = path_log_probs(features, caption, params, cfg, cap)
    log_q = log_q.data
    n = len(paths)
    if n ** k > cap:
        raise ContractError(f"{n}^{k} = {n ** k} path tuples exceeds the enumeration cap {cap}")
    mean = {nm: 0.0 for nm in names}
    score_mean = {nm: 0.0 for nm in names}
    score_sq = 0.0
    for tup in itertools.product(range(n), repeat=k):
        w = math.exp(sum(log_q[i] for i in tup))
        out = vimco_gradient(features, caption, params, cfg, k, selections=paths[list(tup)],
                             use_baseline=use_baseline, names=names)
        for nm in names:
            mean[nm] = mean[nm] + w * out.grads[nm]
            score_mean[nm] = score_mean[nm] + w * out.score_grads[nm]
        score_sq += w * sum(float(np.sum(out.score_grads[nm] ** 2)) for nm in names)
    var = score_sq - sum(float(np.sum(score_mean[nm] ** 2)) for nm in names)
    return EstimatorMoments(mean, score_mean, var, n ** k)


def finite_difference_gradient(fn, params, names=None, h=1e-5):
    """Central differences of the scalar ``fn()`` with respect to every named scalar."""
    names = list(params.names()) if names is None else list(names)
    grads = {}
    with T.no_grad():
        for nm in names:
            data = params[nm].data
            g = np.zeros_like(data)
            flat, gflat = data.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = fn()
                flat[i] = orig - h
                down = fn()
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            grads[nm] = g
    return grads


def norm_relative_error(a, b, names=None):
    """``||a - b|| / max(||a||, ||b||)`` over the concatenation of every named array."""
    names = list(a) if names is None else names
    diff = math.sqrt(sum(float(np.sum((a[n] - b[n]) ** 2)) for n in names))
    scale = max(math.sqrt(sum(float(np.sum(a[n] ** 2)) for n in names)),
                math.sqrt(sum(float(np.sum(b[n] ** 2)) for n in names)))
    return diff / scale if scale > 0 else diff
