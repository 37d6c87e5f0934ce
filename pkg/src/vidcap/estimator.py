"""scikit-learn style wrappers around the captioning model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .attention import ST_FIRST
from .data import Vocabulary, to_float
from .encoder import EncoderConfig, encode, init_encoder
from .metrics import corpus_bleu
from .model import CaptionModel
from .params import ParameterStore
from .training import Split, TrainConfig, train
from .validation import check_references, check_videos


class VideoCaptioner(BaseEstimator):
    """Attention-based video captioner.

    ``fit(X, y)`` takes videos ``(frame, height, width, channel)`` and their
    captions (a string or a list of reference strings per video); ``predict``
    returns one caption string per video and ``score`` the corpus BLEU-4.

    Parameters
    ----------
    variant : {"full", "single-layer", "fc-only"}
        All four tapped layers with both attention stages, only the top tapped
        layer, or no attention at all.
    validation_fraction : float
        Share of the training pairs held out for early stopping when no
        explicit validation set is passed to ``fit``.
    """

    def __init__(self, variant="full", mode="soft", attention_order=ST_FIRST, lr=3e-3, batch_size=1,
                 max_epochs=30, patience=10, dropout=0.5, k=10, clip_norm=5.0, embed_size=32, hidden_size=64,
                 attention_size=32, divisor=8, fc_size=64, beam=1, max_len=20, validation_fraction=0.2,
                 seed=0):
        self.variant = variant
        self.mode = mode
        self.attention_order = attention_order
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.dropout = dropout
        self.k = k
        self.clip_norm = clip_norm
        self.embed_size = embed_size
        self.hidden_size = hidden_size
        self.attention_size = attention_size
        self.divisor = divisor
        self.fc_size = fc_size
        self.beam = beam
        self.max_len = max_len
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _train_config(self):
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, clip_norm=self.clip_norm, dropout=self.dropout,
                           k=self.k, max_epochs=self.max_epochs, patience=self.patience, seed=self.seed,
                           mode=self.mode, attention_order=self.attention_order, max_len=self.max_len)

    def fit(self, X, y, X_val=None, y_val=None):
        videos = check_videos(X)
        refs = check_references(y, len(videos))
        if X_val is None:
            order = np.random.default_rng(self.seed).permutation(len(videos))
            n_val = max(1, int(round(self.validation_fraction * len(videos)))) if len(videos) > 1 else 0
            val_idx, tr_idx = order[:n_val], order[n_val:]
            if n_val == 0:
                val_idx = tr_idx
            val = Split([videos[i] for i in val_idx], [refs[i] for i in val_idx])
            tr = Split([videos[i] for i in tr_idx], [refs[i] for i in tr_idx])
        else:
            val_videos = check_videos(X_val)
            val = Split(val_videos, check_references(y_val, len(val_videos)))
            tr = Split(videos, refs)
        n_frames, height, width, channels = videos[0].shape
        self.vocab_ = Vocabulary.from_captions(c for group in refs for c in group)
        enc = EncoderConfig(divisor=self.divisor, input_size=(height, width), in_channels=channels,
                            fc_size=self.fc_size)
        model = CaptionModel.create(self.vocab_, enc, self.variant, n_frames, self.seed,
                                    attention_order=self.attention_order, dropout=self.dropout,
                                    embed_size=self.embed_size, hidden_size=self.hidden_size,
                                    attention_size=self.attention_size)
        self.result_ = train(model, tr, val, self._train_config())
        self.model_ = model
        self.history_ = self.result_.history
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        m = self.model_
        videos = check_videos(X, m.n_frames, m.encoder_cfg.input_size, m.encoder_cfg.in_channels)
        mode = self.mode if m.model_cfg.use_attention else "soft"
        strategy = "greedy" if self.beam <= 1 else "beam"
        return [m.caption_text(m.caption(v, strategy=strategy, beam_width=self.beam, mode=mode, max_len=self.max_len))
                for v in videos]

    def score(self, X, y):
        """Corpus BLEU-4 of the predicted captions."""
        refs = check_references(y, len(X))
        cands = [c.split() for c in self.predict(X)]
        return corpus_bleu(cands, [[r.split() for r in group] for group in refs]).bleu4


class C3DEncoder(TransformerMixin, BaseEstimator):
    """Frozen random-weight extractor mapping videos to their top-level vectors.

    ``fit`` only records the per-feature mean and reciprocal standard
    deviation over the fitted videos; ``transform`` returns the standardised
    ``(n_videos, fc_size)`` array.
    """

    def __init__(self, divisor=8, fc_size=64, seed=0):
        self.divisor = divisor
        self.fc_size = fc_size
        self.seed = seed

    def _encode(self, v):
        with T.no_grad():
            return encode(to_float(v), self.config_, self.params_).top.data

    def fit(self, X, y=None):
        videos = check_videos(X)
        n_frames, height, width, channels = videos[0].shape
        self.config_ = EncoderConfig(divisor=self.divisor, input_size=(height, width), in_channels=channels,
                                     fc_size=self.fc_size)
        self.params_ = ParameterStore()
        init_encoder(self.params_, self.config_, np.random.default_rng(self.seed))
        tops = np.stack([self._encode(v) for v in videos])
        self.mean_ = tops.mean(axis=0)
        std = tops.std(axis=0)
        self.scale_ = np.where(std > 1e-12, 1.0 / np.where(std > 1e-12, std, 1.0), 1.0)
        self.n_features_out_ = self.fc_size
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        videos = check_videos(X, input_size=self.config_.input_size, channels=self.config_.in_channels)
        return (np.stack([self._encode(v) for v in videos]) - self.mean_) * self.scale_
