"""LSTM caption decoder.

The first word is predicted from ``h_1 = tanh(C a_top + b_C)`` alone; every
later word ``y_t`` comes from ``softmax(V h_t + b_V)`` where ``h_t`` is one LSTM
step on the previous word's embedding, ``h_{t-1}`` and the attention context
``z_t`` computed from ``h_{t-1}``. The top-level video vector enters only
through ``h_1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import ST_FIRST, FeatureCache, attend
from .errors import ConfigError, ShapeError

GATES = ("i", "f", "o", "c")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    eos_id: int
    embed_size: int = 32
    hidden_size: int = 64
    attention_size: int = 32
    n_filters: int = 64
    n_layers: int = 4
    fc_size: int = 64
    use_attention: bool = True
    attention_order: str = ST_FIRST
    dropout: float = 0.5

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def init_decoder(params, cfg, rng, scale=0.01):
    """Uniform non-recurrent weights, orthogonal recurrent weights, zero biases."""
    u = lambda *shape: rng.uniform(-scale, scale, shape)
    H, M = cfg.hidden_size, cfg.embed_size
    params.add("dec.W_e", u(M, cfg.vocab_size))
    for g in GATES:
        params.add(f"dec.W_{g}w", u(H, M))
        params.add(f"dec.W_{g}h", orthogonal(H, rng))
        if cfg.use_attention:
            params.add(f"dec.W_{g}z", u(H, cfg.n_filters))
        params.add(f"dec.b_{g}", np.zeros(H))
    params.add("dec.V", u(cfg.vocab_size, H))
    params.add("dec.b_V", np.zeros(cfg.vocab_size))
    params.add("dec.C", u(H, cfg.fc_size))
    params.add("dec.b_C", np.zeros(H))


def orthogonal(n, rng):
    """Square orthogonal matrix from the QR factors of a Gaussian draw, sign-fixed."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def lstm_step(w_prev, h_prev, c_prev, z, params):
    """One LSTM update; all inputs are ``(P, dim)`` row batches, ``z`` may be None."""
    pre = {}
    for g in GATES:
        a = T.linear(w_prev, params[f"dec.W_{g}w"]) + T.linear(h_prev, params[f"dec.W_{g}h"])
        if z is not None:
            a = a + T.linear(z, params[f"dec.W_{g}z"])
        pre[g] = a + params[f"dec.b_{g}"]
    i, f, o = T.sigmoid(pre["i"]), T.sigmoid(pre["f"]), T.sigmoid(pre["o"])
    c_tilde = T.tanh(pre["c"])
    c = f * c_prev + i * c_tilde
    h = o * T.tanh(c)
    return h, c


def initial_state(top, params, n_paths=1):
    h1 = T.tanh(T.linear(top, params["dec.C"], params["dec.b_C"]))
    h1 = T.reshape(h1, (1, -1))
    if n_paths > 1:
        h1 = T.take(h1, np.zeros(n_paths, dtype=np.intp), axis=0)
    c1 = T.Tensor(np.zeros(h1.shape, dtype=h1.dtype))
    return h1, c1


def word_log_probs(h, params, dropout=0.0, rng=None):
    if dropout > 0.0 and rng is not None:
        h = T.dropout(h, dropout, rng)
    return T.log_softmax(T.linear(h, params["dec.V"], params["dec.b_V"]), axis=1)


def embed(tokens, params):
    """Rows of the embedding for ``tokens`` (columns of ``W_e``)."""
    return T.transpose(T.take(params["dec.W_e"], tokens, axis=1))


@dataclass
class ExampleFeatures:
    """Per-video decoder inputs: stacked aligned features and the top vector."""

    stacked: T.Tensor
    top: T.Tensor
    n_layers: int
    grid: tuple = ()


@dataclass
class CaptionForward:
    log_py: T.Tensor
    log_pm: T.Tensor = None
    selections: np.ndarray = None
    token_log_probs: list = field(default_factory=list)
    steps: list = field(default_factory=list)


def caption_forward(features, caption, params, cfg, mode="soft", n_paths=1, selections=None,
                    rng=None, dropout_rng=None, keep_steps=False):
    """Teacher-forced log-likelihoods of ``caption`` for ``n_paths`` parallel paths.

    Hard mode draws layer selections from ``rng`` unless ``selections`` (an
    ``(n_paths, len(caption) - 1)`` integer array) is supplied; ``log_pm`` is
    then the log-probability of each path's selections.
    """
    caption = np.asarray(caption, dtype=np.intp)
    if caption.ndim != 1 or caption.size == 0:
        raise ShapeError("caption must be a non-empty 1-D sequence of token ids")
    if caption.min() < 0 or caption.max() >= cfg.vocab_size:
        raise ConfigError(f"caption has token ids outside the vocabulary of size {cfg.vocab_size}")
    if selections is not None:
        selections = np.asarray(selections, dtype=np.intp).reshape(n_paths, -1)
        if selections.shape[1] != caption.size - 1:
            raise ShapeError(f"selections cover {selections.shape[1]} steps, caption needs {caption.size - 1}")
    drop = cfg.dropout if dropout_rng is not None else 0.0
    P = n_paths
    rows = np.arange(P)
    h, c = initial_state(features.top, params, P)
    lp = word_log_probs(h, params, drop, dropout_rng)
    token_lps = [T.getitem(lp, (rows, np.full(P, caption[0])))]
    cache = FeatureCache(features.stacked, features.n_layers, params) if cfg.use_attention else None
    log_pm_terms, sels, steps = [], [], []
    for t in range(1, caption.size):
        z = None
        if cache is not None:
            sel = None if selections is None else selections[:, t - 1]
            step = attend(cache, h, params, mode=mode, order=cfg.attention_order, rng=rng, selection=sel)
            z = step.z
            if mode == "hard":
                log_pm_terms.append(step.log_beta_selected)
                sels.append(step.selected)
            if keep_steps:
                steps.append(step)
        w_prev = embed(np.full(P, caption[t - 1]), params)
        h, c = lstm_step(w_prev, h, c, z, params)
        lp = word_log_probs(h, params, drop, dropout_rng)
        token_lps.append(T.getitem(lp, (rows, np.full(P, caption[t]))))
    log_py = token_lps[0]
    for term in token_lps[1:]:
        log_py = log_py + term
    out = CaptionForward(log_py=log_py, token_log_probs=token_lps, steps=steps)
    if mode == "hard" and cache is not None:
        if log_pm_terms:
            log_pm = log_pm_terms[0]
            for term in log_pm_terms[1:]:
                log_pm = log_pm + term
            out.selections = np.stack(sels, axis=1)
        else:
            log_pm = T.Tensor(np.zeros(P))
            out.selections = np.zeros((P, 0), dtype=np.intp)
        out.log_pm = log_pm
    return out


def caption_log_prob(features, caption, params, cfg, mode="soft", selections=None, rng=None):
    """``log p(Y|A)`` (soft) or ``log p(Y|m, A)`` for one hard selection path."""
    if mode == "hard" and selections is None and rng is None:
        raise ConfigError("hard-mode log-likelihood needs a selection path or an rng")
    fwd = caption_forward(features, caption, params, cfg, mode=mode, n_paths=1,
                          selections=selections, rng=rng)
    return T.reshape(fwd.log_py, ())


# -- inference -----------------------------------------------------------------
@dataclass
class StepTrace:
    token: int
    alpha: list = None
    beta: list = None
    m: list = None


@dataclass
class DecodeResult:
    tokens: list
    score: float
    truncated: bool
    trace: list
    grid: tuple = ()


def _trace_from(step, row=0):
    if step is None:
        return None, None, None
    m = None if step.m is None else step.m[row].tolist()
    return step.alpha.data[row].tolist(), step.beta.data[row].tolist(), m


def _advance(cache, token, h, c, params, cfg, mode):
    step = None
    z = None
    if cache is not None:
        step = attend(cache, h, params, mode=mode, order=cfg.attention_order, sample=False)
        z = step.z
    h, c = lstm_step(embed(np.asarray(token, dtype=np.intp).reshape(-1), params), h, c, z, params)
    return h, c, step


def greedy_decode(features, params, cfg, mode="soft", max_len=20):
    with T.no_grad():
        h, c = initial_state(features.top, params)
        cache = FeatureCache(features.stacked, features.n_layers, params) if cfg.use_attention else None
        tokens, trace, score, step = [], [], 0.0, None
        while True:
            lp = word_log_probs(h, params).data[0]
            tok = int(np.argmax(lp))
            score += float(lp[tok])
            alpha, beta, m = _trace_from(step)
            tokens.append(tok)
            trace.append(StepTrace(tok, alpha, beta, m))
            if tok == cfg.eos_id:
                return DecodeResult(tokens, score, False, trace, features.grid)
            if len(tokens) >= max_len:
                return DecodeResult(tokens, score, True, trace, features.grid)
            h, c, step = _advance(cache, tok, h, c, params, cfg, mode)


def beam_decode(features, params, cfg, width=3, mode="soft", max_len=20):
    """Beam search on summed log-probability; finished hypotheses are ranked by
    their length-normalised score. Ties go to the lower token id."""
    if width == 1:
        return greedy_decode(features, params, cfg, mode, max_len)
    with T.no_grad():
        h, c = initial_state(features.top, params)
        cache = FeatureCache(features.stacked, features.n_layers, params) if cfg.use_attention else None
        # hypothesis: (score, tokens, trace, h, c, pending attention step)
        live = [(0.0, [], [], h, c, None)]
        finished = []
        while live:
            candidates = []
            for hi, (score, toks, trace, h, c, step) in enumerate(live):
                lp = word_log_probs(h, params).data[0]
                for tok in range(lp.size):
                    candidates.append((-(score + lp[tok]), hi, tok))
            candidates.sort()
            new_live = []
            for neg, hi, tok in candidates[:width]:
                score, toks, trace, h, c, step = live[hi]
                alpha, beta, m = _trace_from(step)
                toks2 = toks + [tok]
                trace2 = trace + [StepTrace(tok, alpha, beta, m)]
                if tok == cfg.eos_id:
                    finished.append((-neg, toks2, trace2, False))
                elif len(toks2) >= max_len:
                    finished.append((-neg, toks2, trace2, True))
                else:
                    new_live.append((-neg, toks2, trace2, h, c, tok))
            if len(finished) >= width:
                break
            live = []
            for score, toks, trace, h, c, tok in new_live:
                h2, c2, step = _advance(cache, tok, h, c, params, cfg, mode)
                live.append((score, toks, trace, h2, c2, step))
        best = max(finished, key=lambda f: (f[0] / len(f[1]), [-t for t in f[1]]))
        return DecodeResult(best[1], best[0], best[3], best[2], features.grid)


def decode(features, params, cfg, strategy="greedy", beam_width=3, mode="soft", max_len=20):
    if strategy == "greedy":
        return greedy_decode(features, params, cfg, mode, max_len)
    if strategy == "beam":
        return beam_decode(features, params, cfg, beam_width, mode, max_len)
    raise ConfigError(f"unknown decoding strategy {strategy!r}")
