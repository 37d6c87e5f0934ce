"""Minibatch training of a :class:`CaptionModel` with Adam and global-norm clipping.

Soft mode minimises the summed negative caption log-likelihood. Hard mode
follows the leave-one-out multi-sample estimator, and its reported loss is the
negative multi-sample bound. Reported losses are nats per token.

Every source of randomness is a function of ``(seed, epoch, example index)``,
so equal configs and seeds give bit-identical runs.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import ST_FIRST
from .decoder import caption_forward, decode
from .errors import ConfigError, NumericError
from .fileio import atomic_write_text
from .hard import log_mean_exp, sample_paths, vimco_surrogate
from .metrics import corpus_bleu

CSV_HEADER = ("epoch", "split", "loss", "bleu4")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    batch_size: int = 1
    clip_norm: float = 5.0
    dropout: float = 0.5
    k: int = 10
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    mode: str = "soft"
    attention_order: str = ST_FIRST
    freeze_encoder: bool = True
    scale_align_lr: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_len: int = 20
    bleu_every: int = 1

    def __post_init__(self):
        if self.mode not in ("soft", "hard"):
            raise ConfigError(f"mode must be 'soft' or 'hard', got {self.mode!r}")
        if self.mode == "hard" and self.k < 2:
            raise ConfigError(f"hard mode needs k >= 2 samples, got {self.k}")
        if self.lr < 0 or self.batch_size < 1 or self.clip_norm <= 0:
            raise ConfigError("lr must be >= 0, batch_size >= 1 and clip_norm > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Adam:
    """Adam; ``lr_scales`` optionally multiplies the step of named tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, lr_scales=None):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.lr_scales = dict(lr_scales or {})
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in params.trainable()}
        self.v = {n: np.zeros_like(params[n].data) for n in params.trainable()}

    def step(self, grads):
        if self.lr == 0.0:
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for n, g in grads.items():
            self.m[n] = b1 * self.m[n] + (1.0 - b1) * g
            self.v[n] = b2 * self.v[n] + (1.0 - b2) * g * g
            update = self.lr * self.lr_scales.get(n, 1.0) * (self.m[n] / c1) / (np.sqrt(self.v[n] / c2) + self.eps)
            self.params[n].data = self.params[n].data - update


def align_lr_scales(params):
    """``1/sqrt(fan-in)`` for every alignment kernel.

    Adam moves each weight by about ``lr`` per step regardless of its gradient,
    so a kernel with fan-in ``n`` can shift its outputs by ``lr * n`` per step;
    for the large alignment kernels that saturates the decoder within a few
    steps. The scale brings their per-step change in line with the decoder's
    small-fan-in layers.
    """
    out = {}
    for name in params.trainable():
        if name.startswith("align.") and name.endswith(".U"):
            kx, ky, kz, c_in, _ = params[name].shape
            out[name] = 1.0 / math.sqrt(kx * ky * kz * c_in)
    return out


def clip_global_norm(grads, threshold, hook=None):
    """Rescale ``grads`` in place so their joint L2 norm is at most ``threshold``."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = threshold / norm if norm > threshold else 1.0
    if scale != 1.0:
        for n in grads:
            grads[n] = grads[n] * scale
    if hook is not None:
        hook(norm, scale)
    return norm, scale


@dataclass
class Split:
    """Videos and their reference captions (raw strings)."""

    videos: list
    references: list


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    epochs_run: int = 0
    stopped_early: bool = False
    steps: int = 0

    def csv_text(self):
        return history_csv(self.history)


class TrainingAborted(NumericError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for row in history:
        w.writerow([row["epoch"], row["split"], repr(float(row["loss"])),
                    "" if row["bleu4"] is None else repr(float(row["bleu4"]))])
    return buf.getvalue()


def example_rng(seed, epoch, index, stream):
    return np.random.default_rng([seed, epoch, index, stream])


def example_loss(model, feats, caption, tcfg, epoch, index, train=True):
    """``(objective to minimise, per-token loss value)`` for one pair."""
    cfg = model.model_cfg
    n_tok = len(caption)
    drop_rng = example_rng(tcfg.seed, epoch, index, 0) if train and tcfg.dropout > 0 else None
    mode = tcfg.mode if cfg.use_attention else "soft"
    if mode == "soft":
        fwd = caption_forward(feats, caption, model.params, cfg, dropout_rng=drop_rng)
        nll = -T.reshape(fwd.log_py, ())
        return nll, float(nll.data) / n_tok
    rng = example_rng(tcfg.seed, epoch, index, 1)
    fwd = sample_paths(feats, caption, model.params, cfg, tcfg.k, rng, dropout_rng=drop_rng)
    if not train:
        return None, -log_mean_exp(fwd.log_py.data) / n_tok
    surrogate, _, _, terms = vimco_surrogate(fwd)
    return -surrogate, -terms.bound / n_tok


class Trainer:
    """Holds the cached encoder outputs and runs epochs."""

    EVAL_EPOCH = 2 ** 31 - 1  # epoch slot of the fixed evaluation randomness

    def __init__(self, model, train, val, tcfg, clip_hook=None, log=None):
        model.model_cfg = replace(model.model_cfg, dropout=tcfg.dropout, attention_order=tcfg.attention_order)
        if tcfg.freeze_encoder:
            model.params.freeze("encoder.")
        else:
            model.params.unfreeze("encoder.")
        self.model, self.tcfg = model, tcfg
        self.clip_hook, self.log = clip_hook, log
        vocab = model.vocab
        self.train_split, self.val_split = train, val
        self.pairs = [(i, vocab.encode(ref)[0]) for i, refs in enumerate(train.references) for ref in refs]
        self.val_pairs = [(i, vocab.encode(ref)[0]) for i, refs in enumerate(val.references) for ref in refs]
        if model.encoder_frozen:
            self.train_pyr = [model.encode(v) for v in train.videos]
            self.val_pyr = [model.encode(v) for v in val.videos]
        else:
            self.train_pyr = self.val_pyr = None
        if model.scales is None:
            pyrs = self.train_pyr if self.train_pyr is not None else [model.encode(v) for v in train.videos]
            model.fit_scales(pyrs)
        scales = align_lr_scales(model.params) if tcfg.scale_align_lr else None
        self.optimizer = Adam(model.params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps, scales)
        self.steps = 0

    def _pyramid(self, split, i):
        cached = self.train_pyr if split == "train" else self.val_pyr
        if cached is not None:
            return cached[i]
        videos = self.train_split.videos if split == "train" else self.val_split.videos
        return self.model.encode(videos[i])

    def run_epoch(self, epoch):
        tcfg, params = self.tcfg, self.model.params
        order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(self.pairs))
        trainable = params.trainable()
        losses = []
        for start in range(0, len(order), tcfg.batch_size):
            batch = order[start:start + tcfg.batch_size]
            params.zero_grad()
            for j in batch:
                vid, caption = self.pairs[j]
                feats = self.model.features(self._pyramid("train", vid))
                objective, value = example_loss(self.model, feats, caption, tcfg, epoch, int(j))
                if not np.isfinite(value):
                    raise NumericError(f"non-finite training loss at epoch {epoch}, example {j}")
                objective.backward()
                losses.append(value)
            grads = {n: params.grad(n) / len(batch) for n in trainable}
            clip_global_norm(grads, tcfg.clip_norm, self.clip_hook)
            self.optimizer.step(grads)
            self.steps += 1
        params.zero_grad()
        return float(np.mean(losses))

    def evaluate(self, split, with_bleu=True):
        """``(loss per token, BLEU-4 or None)`` in evaluation mode."""
        tcfg = self.tcfg
        pairs = self.pairs if split == "train" else self.val_pairs
        refs = self.train_split.references if split == "train" else self.val_split.references
        n_videos = len(refs)
        feats = {}
        losses = []
        with T.no_grad():
            for i in range(n_videos):
                feats[i] = self.model.features(self._pyramid(split, i))
            if split != "train":
                for j, (vid, caption) in enumerate(pairs):
                    _, value = example_loss(self.model, feats[vid], caption, tcfg, self.EVAL_EPOCH, j, train=False)
                    losses.append(value)
            bleu = None
            if with_bleu:
                mode = tcfg.mode if self.model.model_cfg.use_attention else "soft"
                cands = [self.model.vocab.decode(decode(feats[i], self.model.params, self.model.model_cfg,
                                                        mode=mode, max_len=tcfg.max_len).tokens).split()
                         for i in range(n_videos)]
                bleu = corpus_bleu(cands, [[r.split() for r in rs] for rs in refs]).bleu4
        return (float(np.mean(losses)) if losses else None), bleu


def train(model, train_split, val_split, tcfg, out_dir=None, clip_hook=None, log=None):
    """Train ``model`` in place and return the best-validation-loss parameters.

    With ``out_dir`` the best checkpoint (``checkpoint.vckp``) and the metrics
    log (``metrics.csv``) are written there after every epoch.
    """
    trainer = Trainer(model, train_split, val_split, tcfg, clip_hook, log)
    result = TrainResult(model=model)
    best_state = model.params.state()
    best_epoch, best_loss, since_best = 0, math.inf, 0
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(1, tcfg.max_epochs + 1):
        try:
            train_loss = trainer.run_epoch(epoch)
        except NumericError as exc:
            model.params.load_state(best_state)
            result.best_epoch, result.best_val_loss, result.steps = best_epoch, best_loss, trainer.steps
            if out_dir is not None:
                _write(out_dir, model, result, tcfg)
            raise TrainingAborted(f"{exc}; restored the checkpoint of epoch {best_epoch}", result) from exc
        with_bleu = tcfg.bleu_every > 0 and (epoch % tcfg.bleu_every == 0 or epoch == tcfg.max_epochs)
        _, train_bleu = trainer.evaluate("train", with_bleu)
        val_loss, val_bleu = trainer.evaluate("val", with_bleu)
        result.history.append({"epoch": epoch, "split": "train", "loss": train_loss, "bleu4": train_bleu})
        result.history.append({"epoch": epoch, "split": "val", "loss": val_loss, "bleu4": val_bleu})
        result.epochs_run = epoch
        if log is not None:
            log(f"epoch {epoch:3d} train_loss={train_loss:.4f} val_loss={val_loss:.4f} "
                f"train_bleu4={_fmt(train_bleu)} val_bleu4={_fmt(val_bleu)}")
        if val_loss < best_loss:
            best_loss, best_epoch, since_best = val_loss, epoch, 0
            best_state = model.params.state()
        else:
            since_best += 1
        result.best_epoch, result.best_val_loss, result.steps = best_epoch, best_loss, trainer.steps
        if out_dir is not None:
            _write(out_dir, model, result, tcfg, best_state)
        if since_best >= tcfg.patience:
            result.stopped_early = True
            break
    model.params.load_state(best_state)
    return result


def _fmt(v):
    return "-" if v is None else f"{v:.4f}"


def _write(out_dir, model, result, tcfg, state=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "metrics.csv", result.csv_text())
    saved = model.copy()
    if state is not None:
        saved.params.load_state(state)
    saved.save(out_dir / "checkpoint.vckp", train=tcfg.to_dict(), step=result.steps, best_epoch=result.best_epoch,
               metrics={"best_val_loss": result.best_val_loss})
