"""Small random model instances for gradient checks and enumeration oracles."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import ST_FIRST, init_attention
from .decoder import ExampleFeatures, ModelConfig, init_decoder
from .params import ParameterStore


def tiny_instance(seed, hidden=8, vocab=12, n_layers=3, grid=(2, 2, 2), n_filters=4, fc_size=6,
                  embed=5, attention_size=6, caption_len=4, order=ST_FIRST, scale=0.5):
    """Random features, caption and parameters.

    Weights are drawn at ``scale`` (much larger than the training init) so that
    every gradient entry is far from zero and attention weights are far from
    uniform.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(vocab_size=vocab, eos_id=1, embed_size=embed, hidden_size=hidden,
                      attention_size=attention_size, n_filters=n_filters, n_layers=n_layers,
                      fc_size=fc_size, attention_order=order, dropout=0.0)
    params = ParameterStore()
    init_attention(params, n_layers, n_filters, hidden, attention_size, rng, scale=scale)
    init_decoder(params, cfg, rng, scale=scale)
    for name, t in params.items():
        if name.startswith("dec.b_") or name == "dec.b_V":
            t.data = rng.uniform(-scale, scale, t.shape)
    n_loc = int(np.prod(grid))
    features = ExampleFeatures(
        stacked=T.Tensor(rng.standard_normal((n_loc, n_layers * n_filters))),
        top=T.Tensor(rng.standard_normal(fc_size)),
        n_layers=n_layers, grid=tuple(grid))
    caption = rng.integers(0, vocab, size=caption_len)
    return params, cfg, features, caption
