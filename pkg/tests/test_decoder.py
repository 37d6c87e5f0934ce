import itertools
import math

import numpy as np
import pytest
from dataclasses import replace

from vidcap import tensor as T
from vidcap.attention import LAYER_FIRST
from vidcap.decoder import (ModelConfig, beam_decode, caption_forward, caption_log_prob, decode, greedy_decode,
                            init_decoder, lstm_step, orthogonal)
from vidcap.errors import ConfigError, ShapeError
from vidcap.params import ParameterStore
from vidcap.tiny import tiny_instance


def sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def np_log_softmax(x):
    x = x - x.max()
    return x - np.log(np.exp(x).sum())


def reference_log_prob(features, caption, params, cfg, selections=None):
    """Straight-line numpy teacher-forced log-likelihood (one path)."""
    p = {n: params[n].data for n in params.names()}
    A, L = features.stacked.data, features.n_layers
    h = np.tanh(p["dec.C"] @ features.top.data + p["dec.b_C"])
    c = np.zeros_like(h)
    total = np_log_softmax(p["dec.V"] @ h + p["dec.b_V"])[caption[0]]
    for t in range(1, len(caption)):
        e = np.tanh(A @ p["attn.W_a_alpha"].T + p["attn.W_h_alpha"] @ h) @ p["attn.w_alpha"]
        alpha = np.exp(np_log_softmax(e))
        blocks = (alpha @ A).reshape(L, -1)
        b = np.tanh(blocks @ p["attn.W_s_beta"].T + p["attn.W_h_beta"] @ h) @ p["attn.w_beta"]
        beta = np.exp(np_log_softmax(b))
        z = blocks[selections[t - 1]] if selections is not None else beta @ blocks
        w = p["dec.W_e"][:, caption[t - 1]]
        pre = {g: p[f"dec.W_{g}w"] @ w + p[f"dec.W_{g}h"] @ h + p[f"dec.W_{g}z"] @ z + p[f"dec.b_{g}"]
               for g in "ifoc"}
        c = sig(pre["f"]) * c + sig(pre["i"]) * np.tanh(pre["c"])
        h = sig(pre["o"]) * np.tanh(c)
        total += np_log_softmax(p["dec.V"] @ h + p["dec.b_V"])[caption[t]]
    return total


def test_scalar_lstm_step():
    ps = ParameterStore()
    vals = {"i": (0.3, -0.2, 0.5, 0.1), "f": (-0.4, 0.6, 0.2, 0.0), "o": (0.7, 0.1, -0.3, -0.2),
            "c": (0.2, 0.9, -0.6, 0.05)}
    for g, (ww, wh, wz, b) in vals.items():
        ps.add(f"dec.W_{g}w", np.array([[ww]]))
        ps.add(f"dec.W_{g}h", np.array([[wh]]))
        ps.add(f"dec.W_{g}z", np.array([[wz]]))
        ps.add(f"dec.b_{g}", np.array([b]))
    w, hp, cp, z = 1.5, -0.5, 0.25, 2.0
    h, c = lstm_step(T.Tensor([[w]]), T.Tensor([[hp]]), T.Tensor([[cp]]), T.Tensor([[z]]), ps)
    a = {g: ww * w + wh * hp + wz * z + b for g, (ww, wh, wz, b) in vals.items()}
    s = lambda x: 1 / (1 + math.exp(-x))
    c_ref = s(a["f"]) * cp + s(a["i"]) * math.tanh(a["c"])
    h_ref = s(a["o"]) * math.tanh(c_ref)
    assert abs(c.item() - c_ref) < 1e-12 and abs(h.item() - h_ref) < 1e-12


def test_init_orthogonal_recurrent_and_zero_biases():
    cfg = ModelConfig(vocab_size=10, eos_id=1, hidden_size=16, n_filters=4, fc_size=6)
    ps = ParameterStore()
    init_decoder(ps, cfg, np.random.default_rng(0))
    for g in "ifoc":
        W = ps[f"dec.W_{g}h"].data
        np.testing.assert_allclose(W @ W.T, np.eye(16), rtol=0, atol=1e-12)
        assert np.all(ps[f"dec.b_{g}"].data == 0)
    assert np.all(ps["dec.b_V"].data == 0) and np.all(ps["dec.b_C"].data == 0)
    q = orthogonal(5, np.random.default_rng(1))
    np.testing.assert_allclose(q.T @ q, np.eye(5), atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_matches_numpy_reference_soft(seed):
    params, cfg, feats, caption = tiny_instance(seed)
    got = caption_log_prob(feats, caption, params, cfg).item()
    assert abs(got - reference_log_prob(feats, caption, params, cfg)) < 1e-10


def test_matches_numpy_reference_hard():
    params, cfg, feats, caption = tiny_instance(4)
    sel = np.array([2, 0, 1])
    fwd = caption_forward(feats, caption, params, cfg, mode="hard", selections=sel[None])
    assert abs(fwd.log_py.item() - reference_log_prob(feats, caption, params, cfg, sel)) < 1e-10
    betas = [s.beta.data[0] for s in caption_forward(feats, caption, params, cfg, mode="hard",
                                                     selections=sel[None], keep_steps=True).steps]
    assert abs(fwd.log_pm.item() - sum(np.log(b[k]) for b, k in zip(betas, sel))) < 1e-12


def zero_params(params):
    for name, t in params.items():
        t.data = np.zeros_like(t.data)


def test_zero_weights_give_uniform_words():
    params, cfg, feats, caption = tiny_instance(0, caption_len=5)
    zero_params(params)
    assert abs(caption_log_prob(feats, caption, params, cfg).item() - 5 * math.log(1 / 12)) < 1e-12


def test_two_word_symmetric_logits():
    params, cfg, feats, _ = tiny_instance(0, vocab=2)
    params.set("dec.V", np.zeros_like(params["dec.V"].data))
    params.set("dec.b_V", np.zeros(2))
    assert abs(caption_log_prob(feats, [0, 1, 1, 0, 1], params, cfg).item() - 5 * math.log(0.5)) < 1e-12


def test_single_word_vocabulary_has_probability_one():
    params, cfg, feats, _ = tiny_instance(0, vocab=1)
    cfg = replace(cfg, eos_id=0)
    assert caption_log_prob(feats, [0, 0, 0], params, cfg).item() == 0.0


def test_parallel_paths_match_single_paths():
    params, cfg, feats, caption = tiny_instance(2)
    sels = np.array([[0, 1, 2], [2, 2, 0]])
    joint = caption_forward(feats, caption, params, cfg, mode="hard", n_paths=2, selections=sels)
    for k in range(2):
        single = caption_forward(feats, caption, params, cfg, mode="hard", selections=sels[k:k + 1])
        assert abs(joint.log_py.data[k] - single.log_py.item()) < 1e-13


def test_fc_only_model_ignores_the_aligned_features():
    params, cfg, feats, caption = tiny_instance(0)
    cfg = replace(cfg, use_attention=False)
    a = caption_log_prob(feats, caption, params, cfg).item()
    feats.stacked = T.Tensor(feats.stacked.data * 7.0)
    assert caption_log_prob(feats, caption, params, cfg).item() == a


def test_dropout_only_with_rng():
    params, cfg, feats, caption = tiny_instance(0)
    cfg = replace(cfg, dropout=0.5)
    a = caption_forward(feats, caption, params, cfg).log_py.item()
    b = caption_forward(feats, caption, params, cfg).log_py.item()
    c = caption_forward(feats, caption, params, cfg, dropout_rng=np.random.default_rng(0)).log_py.item()
    assert a == b and c != a


def test_input_errors():
    params, cfg, feats, _ = tiny_instance(0)
    with pytest.raises(ConfigError, match="outside the vocabulary"):
        caption_forward(feats, [0, 12], params, cfg)
    with pytest.raises(ShapeError):
        caption_forward(feats, [], params, cfg)
    with pytest.raises(ShapeError, match="selections"):
        caption_forward(feats, [0, 2, 3], params, cfg, mode="hard", selections=[[0]])
    with pytest.raises(ConfigError, match="selection path"):
        caption_log_prob(feats, [0, 2], params, cfg, mode="hard")
    with pytest.raises(ConfigError, match="strategy"):
        decode(feats, params, cfg, strategy="sample")


def sequence_log_prob(feats, tokens, params, cfg):
    return caption_log_prob(feats, tokens, params, cfg).item()


def test_greedy_scores_are_teacher_forced_scores():
    params, cfg, feats, _ = tiny_instance(5)
    res = greedy_decode(feats, params, cfg, max_len=6)
    assert abs(res.score - sequence_log_prob(feats, res.tokens, params, cfg)) < 1e-12
    assert res.truncated == (res.tokens[-1] != cfg.eos_id)
    assert len(res.trace) == len(res.tokens) and res.trace[0].alpha is None
    for st in res.trace[1:]:
        assert abs(sum(st.alpha) - 1) < 1e-12 and abs(sum(st.beta) - 1) < 1e-12


def test_greedy_truncates_at_max_len():
    params, cfg, feats, _ = tiny_instance(0)
    params.set("dec.b_V", np.where(np.arange(12) == 3, 50.0, 0.0))
    params.set("dec.V", np.zeros_like(params["dec.V"].data))
    res = greedy_decode(feats, params, cfg, max_len=4)
    assert res.tokens == [3, 3, 3, 3] and res.truncated


def test_uniform_ties_go_to_lowest_token():
    params, cfg, feats, _ = tiny_instance(0)
    zero_params(params)
    res = greedy_decode(feats, params, cfg, max_len=3)
    assert res.tokens == [0, 0, 0]


@pytest.mark.parametrize("order", ["st-first", LAYER_FIRST])
def test_beam_width_one_is_greedy(order):
    params, cfg, feats, _ = tiny_instance(3, order=order)
    g = greedy_decode(feats, params, cfg)
    b = beam_decode(feats, params, cfg, width=1)
    assert g.tokens == b.tokens and g.score == b.score


def test_wide_beam_finds_the_best_normalised_sequence():
    params, cfg, feats, _ = tiny_instance(6, vocab=3)
    max_len = 3
    best = None
    for n in range(1, max_len + 1):
        for body in itertools.product([0, 2], repeat=n - 1):
            for last in ([1, 0, 2] if n == max_len else [1]):
                toks = list(body) + [last]
                score = sequence_log_prob(feats, toks, params, cfg) / n
                best = score if best is None else max(best, score)
    res = beam_decode(feats, params, cfg, width=50, max_len=max_len)
    assert abs(res.score / len(res.tokens) - best) < 1e-12
    assert abs(res.score - sequence_log_prob(feats, res.tokens, params, cfg)) < 1e-12


def test_decoding_is_deterministic():
    params, cfg, feats, _ = tiny_instance(7)
    for strategy in ("greedy", "beam"):
        a = decode(feats, params, cfg, strategy=strategy, mode="hard")
        b = decode(feats, params, cfg, strategy=strategy, mode="hard")
        assert a.tokens == b.tokens and a.score == b.score
    hard = greedy_decode(feats, params, cfg, mode="hard")
    for st in hard.trace[1:]:
        assert st.m.index(1.0) == int(np.argmax(st.beta))
