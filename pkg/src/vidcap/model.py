"""Complete captioning model: encoder, alignment, attention and decoder.

The extractor is frozen by default, so its outputs are constants of each
video. Each tapped map and the top vector are then multiplied by a scale fitted
on the training videos (reciprocal root-mean-square), which puts the inputs of
the trainable layers in a unit range regardless of the extractor's weight scale.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import checkpoint
from . import tensor as T
from .alignment import AlignmentSpec, align, default_spec, init_alignment
from .attention import ST_FIRST, init_attention
from .data import Vocabulary, to_float
from .decoder import ExampleFeatures, ModelConfig, decode, init_decoder
from .encoder import EncoderConfig, encode, init_encoder, pyramid_shapes
from .errors import ConfigError
from .params import ParameterStore

FORMAT = "vidcap-model"

VARIANTS = {
    # name: (taps, use_attention)
    "full": (("pool2", "pool3", "pool4", "pool5"), True),
    "single-layer": (("pool5",), True),
    "fc-only": (("pool5",), False),
}


def init_params(encoder_cfg, spec, model_cfg, seed, freeze_encoder=True, n_frames=16):
    """Fresh parameters; each module draws from its own stream of ``seed``."""
    enc_ss, align_ss, attn_ss, dec_ss = np.random.SeedSequence(seed).spawn(4)
    params = ParameterStore()
    init_encoder(params, encoder_cfg, np.random.default_rng(enc_ss), frozen=freeze_encoder)
    shapes = pyramid_shapes(encoder_cfg, n_frames)
    init_alignment(params, spec, shapes, np.random.default_rng(align_ss))
    if model_cfg.use_attention:
        init_attention(params, model_cfg.n_layers, model_cfg.n_filters, model_cfg.hidden_size,
                       model_cfg.attention_size, np.random.default_rng(attn_ss))
    init_decoder(params, model_cfg, np.random.default_rng(dec_ss))
    return params


class CaptionModel:
    def __init__(self, encoder_cfg, spec, model_cfg, vocab, params, scales=None, n_frames=16):
        self.encoder_cfg = encoder_cfg
        self.spec = spec
        self.model_cfg = model_cfg
        self.vocab = vocab
        self.params = params
        self.scales = scales
        self.n_frames = n_frames

    @property
    def scales(self):
        return self._scales

    @scales.setter
    def scales(self, value):
        self._scales = value
        self._norm = None

    @classmethod
    def create(cls, vocab, encoder_cfg=None, variant="full", n_frames=16, seed=0, freeze_encoder=True,
               attention_order=ST_FIRST, dropout=0.5, embed_size=32, hidden_size=64, attention_size=32,
               kernels=None):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {variant!r}; choose from {sorted(VARIANTS)}")
        taps, use_attention = VARIANTS[variant]
        encoder_cfg = EncoderConfig() if encoder_cfg is None else encoder_cfg
        encoder_cfg = replace(encoder_cfg, taps=taps)
        shapes = pyramid_shapes(encoder_cfg, n_frames)
        spec = default_spec(shapes, kernels)
        model_cfg = ModelConfig(
            vocab_size=len(vocab), eos_id=vocab.eos_id, embed_size=embed_size, hidden_size=hidden_size,
            attention_size=attention_size, n_filters=spec.target_shape[3], n_layers=len(spec.layers),
            fc_size=encoder_cfg.fc_size, use_attention=use_attention, attention_order=attention_order,
            dropout=dropout)
        params = init_params(encoder_cfg, spec, model_cfg, seed, freeze_encoder, n_frames)
        return cls(encoder_cfg, spec, model_cfg, vocab, params, n_frames=n_frames)

    @property
    def encoder_frozen(self):
        return all(self.params.is_frozen(n) for n in self.params.names() if n.startswith("encoder."))

    # -- features ----------------------------------------------------------------
    def encode(self, video):
        """Raw feature pyramid of one video (uint8 or float frames)."""
        video = to_float(video)
        if self.encoder_frozen:
            with T.no_grad():
                return encode(video, self.encoder_cfg, self.params)
        return encode(video, self.encoder_cfg, self.params)

    def fit_scales(self, pyramids):
        """Per-channel mean and reciprocal std of every tapped map and of the top vector.

        Stored as ``{name: {"shift": [...], "scale": [...]}}``; channels that are
        constant over ``pyramids`` keep scale 1.
        """
        sums, sqs, counts = {}, {}, dict.fromkeys(list(self.spec.layers) + ["top"], 0)
        for pyr in pyramids:
            items = [(n, pyr.taps[n].data) for n in self.spec.layers] + [("top", pyr.top.data)]
            for name, d in items:
                flat = d.reshape(-1, d.shape[-1])
                sums[name] = sums.get(name, 0.0) + flat.sum(axis=0)
                sqs[name] = sqs.get(name, 0.0) + (flat * flat).sum(axis=0)
                counts[name] += flat.shape[0]
        scales = {}
        for name in counts:
            n = max(counts[name], 1)
            mean = sums[name] / n
            std = np.sqrt(np.maximum(sqs[name] / n - mean * mean, 0.0))
            inv = np.where(std > 1e-12, 1.0 / np.where(std > 1e-12, std, 1.0), 1.0)
            scales[name] = {"shift": [float(v) for v in mean], "scale": [float(v) for v in inv]}
        self.scales = scales
        return scales

    def _normalizers(self):
        if self.scales is None:
            return None
        if self._norm is None:
            self._norm = {n: (np.asarray(v["shift"]), np.asarray(v["scale"])) for n, v in self.scales.items()}
        return self._norm

    def features(self, pyramid):
        """Decoder inputs for one encoded video."""
        norm = self._normalizers()
        taps = {n: pyramid.taps[n] for n in self.spec.layers}
        aligned = align(taps, self.spec, self.params, scales=norm)
        top = pyramid.top
        if norm is not None:
            shift, scale = norm["top"]
            top = (top - shift) * scale
        return ExampleFeatures(stacked=aligned.stacked, top=top, n_layers=aligned.n_layers, grid=aligned.grid)

    def video_features(self, video):
        return self.features(self.encode(video))

    # -- inference -----------------------------------------------------------------
    def caption(self, video=None, pyramid=None, strategy="greedy", beam_width=3, mode="soft", max_len=20):
        if pyramid is None:
            pyramid = self.encode(video)
        with T.no_grad():
            feats = self.features(pyramid)
            return decode(feats, self.params, self.model_cfg, strategy, beam_width, mode, max_len)

    def caption_text(self, result):
        return self.vocab.decode(result.tokens)

    # -- persistence ----------------------------------------------------------------
    def manifest(self, **extra):
        out = {
            "format": FORMAT,
            "encoder": self.encoder_cfg.to_dict(),
            "alignment": self.spec.to_dict(),
            "model": self.model_cfg.to_dict(),
            "vocab": self.vocab.to_list(),
            "scales": self.scales,
            "n_frames": self.n_frames,
        }
        out.update(extra)
        return out

    def save(self, path, **extra):
        return checkpoint.save(path, self.params, self.manifest(**extra))

    @classmethod
    def from_manifest(cls, manifest, params):
        if manifest.get("format") != FORMAT:
            raise ConfigError(f"checkpoint manifest has format {manifest.get('format')!r}, expected {FORMAT!r}")
        return cls(EncoderConfig.from_dict(manifest["encoder"]), AlignmentSpec.from_dict(manifest["alignment"]),
                   ModelConfig.from_dict(manifest["model"]), Vocabulary.from_list(manifest["vocab"]), params,
                   manifest.get("scales"), manifest.get("n_frames", 16))

    @classmethod
    def load(cls, path):
        params, manifest = checkpoint.load(path)
        return cls.from_manifest(manifest, params), manifest

    def copy(self):
        return CaptionModel(self.encoder_cfg, self.spec, self.model_cfg, self.vocab, self.params.copy(),
                            None if self.scales is None else dict(self.scales), self.n_frames)
