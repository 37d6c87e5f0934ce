"""Gradient and estimator verification suites shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .decoder import caption_forward
from .gradcheck import grad_check
from .hard import (enumerate_exact, expected_bound_exact, expected_bound_of_params, expected_estimator_exact,
                   finite_difference_gradient, norm_relative_error)
from .tiny import tiny_instance

SOFT_TOL = 1e-4
UNBIASED_TOL = 1e-6
BOUND_GAP_TOL = 1e-10
BOUND_KS = (1, 2, 5, 10)


def soft_caption_loss(features, caption, cfg):
    def f(params):
        return -T.reshape(caption_forward(features, caption, params, cfg).log_py, ())
    return f


def soft_gradcheck(seeds=range(20), h=1e-5, tol=SOFT_TOL, **dims):
    """Finite-difference check of the soft caption loss on tiny random instances.

    The default instance has hidden size 8, 12 words, 3 layers and a 2x2x2
    aligned grid.
    """
    reports = []
    for seed in seeds:
        params, cfg, feats, caption = tiny_instance(seed, **dims)
        reports.append((seed, grad_check(soft_caption_loss(feats, caption, cfg), params, h=h, tol=tol)))
    return reports


@dataclass
class HardCase:
    seed: int
    n_steps: int
    k: int
    rel_error: float
    score_var_baseline: float
    score_var_plain: float
    n_tuples: int

    @property
    def unbiased(self):
        return self.rel_error < UNBIASED_TOL

    @property
    def variance_reduced(self):
        return self.score_var_baseline < self.score_var_plain


@dataclass
class BoundCase:
    seed: int
    n_steps: int
    values: dict
    log_marginal: float

    @property
    def gaps(self):
        seq = [self.values[k] for k in BOUND_KS] + [self.log_marginal]
        return [b - a for a, b in zip(seq, seq[1:])]

    @property
    def ordered(self):
        return min(self.gaps) >= -BOUND_GAP_TOL


@dataclass
class HardSuite:
    cases: list = field(default_factory=list)
    bounds: list = field(default_factory=list)

    @property
    def max_rel_error(self):
        return max(c.rel_error for c in self.cases)

    @property
    def passed(self):
        return (all(c.unbiased and c.variance_reduced for c in self.cases)
                and all(b.ordered for b in self.bounds))

    def lines(self):
        out = []
        for c in self.cases:
            out.append(f"seed={c.seed} T={c.n_steps} K={c.k} tuples={c.n_tuples} "
                       f"estimator_mean_rel_err={c.rel_error:.3e} "
                       f"score_var baseline={c.score_var_baseline:.4e} plain={c.score_var_plain:.4e}")
        for b in self.bounds:
            vals = " ".join(f"E[L^{k}]={b.values[k]:.10f}" for k in BOUND_KS)
            out.append(f"seed={b.seed} T={b.n_steps} {vals} logp={b.log_marginal:.10f} min_gap={min(b.gaps):.3e}")
        out.append(f"max estimator-mean rel. error: {self.max_rel_error:.3e} (tol {UNBIASED_TOL:g})")
        return out


def hard_instance(seed, n_steps, **dims):
    dims.setdefault("n_layers", 2)
    return tiny_instance(seed, caption_len=n_steps + 1, **dims)


def unbiasedness_case(seed, n_steps, k, h=1e-5, **dims):
    """Exact estimator mean against central differences of the exact objective."""
    params, cfg, feats, caption = hard_instance(seed, n_steps, **dims)
    names = params.trainable()
    moments = expected_estimator_exact(feats, caption, params, cfg, k, use_baseline=True, names=names)
    plain = expected_estimator_exact(feats, caption, params, cfg, k, use_baseline=False, names=names)
    fd = finite_difference_gradient(lambda: expected_bound_of_params(feats, caption, params, cfg, k),
                                    params, names, h=h)
    return HardCase(seed, n_steps, k, norm_relative_error(moments.mean, fd, names), moments.score_variance,
                    plain.score_variance, moments.n_tuples)


def bound_case(seed, n_steps, **dims):
    params, cfg, feats, caption = hard_instance(seed, n_steps, **dims)
    exact = enumerate_exact(feats, caption, params, cfg)
    values = {k: expected_bound_exact(exact.log_q, exact.log_py, k) for k in BOUND_KS}
    return BoundCase(seed, n_steps, values, exact.log_marginal)


def hard_suite(tiny=False, seeds=(0, 1)):
    """Unbiasedness, variance reduction and bound ordering on enumerable instances.

    ``tiny`` restricts to the smallest instance (two layers, one step, K=2).
    """
    suite = HardSuite()
    if tiny:
        plan = [(seeds[0], 1, 2)]
        bound_plan = [(seeds[0], 1)]
    else:
        plan = [(s, t, 2) for s in seeds for t in (1, 2, 3)] + [(seeds[0], 1, 3), (seeds[0], 2, 3)]
        bound_plan = [(s, t) for s in seeds for t in (1, 2, 3)]
    for seed, t, k in plan:
        suite.cases.append(unbiasedness_case(seed, t, k))
    for seed, t in bound_plan:
        suite.bounds.append(bound_case(seed, t))
    return suite
