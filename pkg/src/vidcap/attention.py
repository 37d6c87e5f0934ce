"""Two-stage attention over aligned features.

Stage one scores every location ``i`` of the stacked features ``A[i]`` (all
layers concatenated) against the previous hidden state and forms the
location-weighted vector ``s``. Stage two splits ``s`` into its per-layer
blocks, scores each block, and combines them into the context ``z``: a
weighted sum (soft) or a single sampled block (hard).

All functions work on ``P`` parallel decoding paths; ``h_prev`` is ``(P, H)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError

ST_FIRST = "st-first"
LAYER_FIRST = "layer-first"


def init_attention(params, n_layers, n_filters, hidden_size, attention_size, rng, scale=0.01):
    u = lambda *shape: rng.uniform(-scale, scale, shape)
    params.add("attn.w_alpha", u(attention_size))
    params.add("attn.W_a_alpha", u(attention_size, n_layers * n_filters))
    params.add("attn.W_h_alpha", u(attention_size, hidden_size))
    params.add("attn.w_beta", u(attention_size))
    params.add("attn.W_s_beta", u(attention_size, n_filters))
    params.add("attn.W_h_beta", u(attention_size, hidden_size))


@dataclass
class AttentionStep:
    e: T.Tensor
    alpha: T.Tensor
    s: T.Tensor
    b: T.Tensor
    beta: T.Tensor
    z: T.Tensor
    mode: str
    m: np.ndarray = None
    selected: np.ndarray = None
    log_beta_selected: T.Tensor = None


class FeatureCache:
    """Per-example constants reused at every decoding step."""

    def __init__(self, stacked, n_layers, params):
        self.stacked = stacked
        self.n_layers = n_layers
        n_loc, width = stacked.shape
        if width % n_layers:
            raise ShapeError(f"stacked width {width} is not a multiple of {n_layers} layers")
        self.n_filters = width // n_layers
        self.n_locations = n_loc
        self._proj = None
        self._layer_means = None
        self.params = params

    @property
    def location_projection(self):
        if self._proj is None:
            self._proj = T.linear(self.stacked, self.params["attn.W_a_alpha"])
        return self._proj

    @property
    def layer_means(self):
        if self._layer_means is None:
            means = T.mean(self.stacked, axis=0)
            self._layer_means = T.reshape(means, (self.n_layers, self.n_filters))
        return self._layer_means


def _location_scores(proj, h_prev, params):
    # proj: (n_loc, d) or (P, n_loc, d)
    hp = T.linear(h_prev, params["attn.W_h_alpha"])
    pre = proj + T.reshape(hp, (hp.shape[0], 1, hp.shape[1]))
    return T.matmul(T.tanh(pre), params["attn.w_alpha"])


def _layer_scores(blocks, h_prev, params):
    # blocks: (P, L, F) or (L, F)
    hb = T.linear(h_prev, params["attn.W_h_beta"])
    pre = T.linear(blocks, params["attn.W_s_beta"]) + T.reshape(hb, (hb.shape[0], 1, hb.shape[1]))
    return T.matmul(T.tanh(pre), params["attn.w_beta"])


def spatiotemporal_attend(cache, h_prev, params):
    """Location weights ``alpha`` (P, n_loc) and stacked context ``s`` (P, L*F)."""
    e = _location_scores(cache.location_projection, h_prev, params)
    alpha = T.softmax(e, axis=1)
    s = T.matmul(alpha, cache.stacked)
    return e, alpha, s


def sample_layers(beta, rng):
    """One draw per row from the categorical rows of ``beta``."""
    cdf = np.cumsum(beta, axis=1)
    u = rng.random(beta.shape[0]) * cdf[:, -1]
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, beta.shape[1] - 1)


def _layer_weights(b, mode, rng, selection, sample):
    """``beta`` plus, in hard mode, the one-hot choice and its log-probability."""
    P, L = b.shape
    beta = T.softmax(b, axis=1)
    if mode == "soft":
        return beta, None, None, None
    if mode != "hard":
        raise ContractError(f"unknown attention mode {mode!r}")
    if selection is not None:
        sel = np.asarray(selection, dtype=np.intp).reshape(P)
    elif sample:
        if rng is None:
            raise ContractError("hard attention needs an rng or an explicit selection")
        sel = sample_layers(beta.data, rng)
    else:
        sel = np.argmax(b.data, axis=1)
    m = np.zeros((P, L), dtype=beta.dtype)
    m[np.arange(P), sel] = 1.0
    log_sel = T.getitem(T.log_softmax(b, axis=1), (np.arange(P), sel))
    return beta, m, sel, log_sel


def abstraction_attend(s, h_prev, params, n_layers, mode="soft", rng=None, selection=None, sample=True):
    """Layer weights ``beta`` and context ``z`` from the stacked vector ``s``.

    Hard mode draws one layer per path from ``beta`` using ``rng`` unless an
    explicit ``selection`` is given; with ``sample=False`` it takes the argmax.
    """
    P = s.shape[0]
    blocks = T.reshape(s, (P, n_layers, -1))
    b = _layer_scores(blocks, h_prev, params)
    beta, m, sel, log_sel = _layer_weights(b, mode, rng, selection, sample)
    weights = beta if m is None else T.Tensor(m)
    z = T.sum_(blocks * T.reshape(weights, (P, n_layers, 1)), axis=1)
    return b, beta, z, m, sel, log_sel


def attend(cache, h_prev, params, mode="soft", order=ST_FIRST, rng=None, selection=None, sample=True):
    """Full two-stage attention for one decoding step."""
    L = cache.n_layers
    if order == ST_FIRST:
        e, alpha, s = spatiotemporal_attend(cache, h_prev, params)
        b, beta, z, m, sel, log_sel = abstraction_attend(s, h_prev, params, L, mode, rng, selection, sample)
    elif order == LAYER_FIRST:
        P = h_prev.shape[0]
        means = T.reshape(cache.layer_means, (1, L, cache.n_filters))
        b = _layer_scores(means, h_prev, params)
        beta, m, sel, log_sel = _layer_weights(b, mode, rng, selection, sample)
        weights = beta if m is None else T.Tensor(m)
        # re-weight each layer's block of every location, then attend over locations
        stacked = T.reshape(cache.stacked, (1, cache.n_locations, L, cache.n_filters))
        scaled = stacked * T.reshape(weights, (P, 1, L, 1))
        scaled = T.reshape(scaled, (P, cache.n_locations, L * cache.n_filters))
        proj = T.linear(scaled, params["attn.W_a_alpha"])
        e = _location_scores(proj, h_prev, params)
        alpha = T.softmax(e, axis=1)
        weighted = T.matmul(T.reshape(alpha, (P, 1, cache.n_locations)), scaled)
        weighted = T.reshape(weighted, (P, L, cache.n_filters))
        z = T.sum_(weighted, axis=1)
        s = T.matmul(alpha, cache.stacked)
    else:
        raise ContractError(f"unknown attention order {order!r}")
    return AttentionStep(e=e, alpha=alpha, s=s, b=b, beta=beta, z=z, mode=mode, m=m,
                         selected=sel, log_beta_selected=log_sel)
