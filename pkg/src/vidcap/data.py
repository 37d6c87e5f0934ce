"""Synthetic captioned videos, vocabulary handling and the on-disk corpus.

Each scene is one object (square, circle or triangle) of one colour drawn on a
dark noisy background and either translating in one direction or standing
still. Its caption is a fixed template of the scene fields. Colour is rendered
as an intensity band in the default single-channel mode and as an RGB triple in
the three-channel mode.

Video files (``.vid``) are little-endian: 4-byte magic ``VCVD``, ``uint16``
version, ``uint8`` dtype tag, one pad byte, four ``uint32`` extents
``(frame, height, width, channel)`` and the row-major payload.
"""

from __future__ import annotations

import re
import struct
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .fileio import atomic_write_bytes, atomic_write_json, atomic_write_text, read_json

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "white")
MOTIONS = ("left", "right", "up", "down", "still")
FUNCTION_WORDS = ("a", "moves", "is")
INTENSITY = {"red": 0.35, "green": 0.55, "blue": 0.75, "white": 0.95}
RGB = {"red": (0.9, 0.1, 0.1), "green": (0.1, 0.9, 0.1), "blue": (0.1, 0.1, 0.9), "white": (0.95, 0.95, 0.95)}
BACKGROUND = 0.1
# (row, column) displacement per frame
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0), "still": (0, 0)}

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
SPLITS = ("train", "val", "test")

VID_MAGIC = b"VCVD"
VID_VERSION = 1
_HEADER = struct.Struct("<4sHBx4I")
_DTYPE_TAGS = {1: np.dtype("u1"), 2: np.dtype("<f4"), 3: np.dtype("<f8")}
_TAG_OF = {v: k for k, v in _DTYPE_TAGS.items()}


# -- scenes --------------------------------------------------------------------
@dataclass(frozen=True)
class SyntheticScene:
    shape: str
    color: str
    motion: str
    speed: float
    noise: float
    seed: int
    row: int
    col: int
    size: int = 20

    def __post_init__(self):
        for value, choices in ((self.shape, SHAPES), (self.color, COLORS), (self.motion, MOTIONS)):
            if value not in choices:
                raise ConfigError(f"{value!r} is not one of {choices}")

    @property
    def caption(self):
        if self.motion == "still":
            return f"a {self.color} {self.shape} is still"
        return f"a {self.color} {self.shape} moves {self.motion}"


def shape_mask(shape, size):
    """Boolean ``size x size`` silhouette."""
    r, c = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        m = np.ones((size, size), dtype=bool)
        m[:2], m[-2:], m[:, :2], m[:, -2:] = False, False, False, False
        return m
    if shape == "circle":
        half = size / 2
        return (r - half) ** 2 + (c - half) ** 2 <= (half - 1) ** 2
    if shape == "triangle":
        # apex at the top centre, base along the bottom
        return (r >= 1) & (r <= size - 1) & (np.abs(c - size / 2) <= r / 2)
    raise ConfigError(f"unknown shape {shape!r}")


def render(scene, n_frames=16, height=64, width=64, channels=1):
    """Float video in ``[0, 1]``, shape ``(frame, height, width, channel)``."""
    if channels not in (1, 3):
        raise ConfigError(f"channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng(scene.seed)
    mask = shape_mask(scene.shape, scene.size)
    colour = (INTENSITY[scene.color],) if channels == 1 else RGB[scene.color]
    dr, dc = DIRECTIONS[scene.motion]
    video = np.full((n_frames, height, width, channels), BACKGROUND)
    for t in range(n_frames):
        r0 = int(round(scene.row + dr * scene.speed * t))
        c0 = int(round(scene.col + dc * scene.speed * t))
        window = video[t, r0:r0 + scene.size, c0:c0 + scene.size]
        if window.shape[:2] != mask.shape:
            raise ConfigError(f"scene leaves the frame at t={t}: {scene}")
        window[mask] = colour
    video += rng.normal(0.0, scene.noise, video.shape)
    return np.clip(video, 0.0, 1.0)


def quantize(video):
    return np.round(np.clip(video, 0.0, 1.0) * 255.0).astype(np.uint8)


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 64
    n_val: int = 16
    n_test: int = 16
    n_frames: int = 16
    height: int = 64
    width: int = 64
    channels: int = 1
    noise: float = 0.03
    object_size: int = 20
    min_speed: float = 1.0
    max_speed: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_frames % 16 or self.height % 16 or self.width % 16:
            raise ConfigError("frames, height and width must be multiples of 16 for the encoder")
        travel = self.max_speed * (self.n_frames - 1)
        if self.object_size + travel > min(self.height, self.width):
            raise ConfigError(f"an object of size {self.object_size} moving {travel:.0f} px does not fit the frame")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")

    @property
    def video_shape(self):
        return (self.n_frames, self.height, self.width, self.channels)

    def split_sizes(self):
        return dict(zip(SPLITS, (self.n_train, self.n_val, self.n_test)))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def draw_scene(rng, cfg):
    """Random scene whose object stays inside the frame for every frame."""
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = COLORS[rng.integers(len(COLORS))]
    motion = MOTIONS[rng.integers(len(MOTIONS))]
    speed = float(rng.uniform(cfg.min_speed, cfg.max_speed))
    dr, dc = DIRECTIONS[motion]
    travel = int(np.ceil(speed * (cfg.n_frames - 1)))
    size = cfg.object_size

    def start(delta, extent):
        lo = travel if delta < 0 else 0
        hi = extent - size - (travel if delta > 0 else 0)
        return int(rng.integers(lo, hi + 1))

    return SyntheticScene(shape, color, motion, speed, cfg.noise, int(rng.integers(2 ** 31)),
                          start(dr, cfg.height), start(dc, cfg.width), size)


def split_scenes(cfg):
    """Scene lists per split, each split from its own independent stream."""
    streams = np.random.SeedSequence(cfg.seed).spawn(len(SPLITS))
    out = {}
    for split, ss in zip(SPLITS, streams):
        rng = np.random.default_rng(ss)
        out[split] = [draw_scene(rng, cfg) for _ in range(cfg.split_sizes()[split])]
    return out


# -- vocabulary ----------------------------------------------------------------
_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text):
    """Lowercase and strip punctuation, then split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Vocabulary:
    """Sorted word list behind the reserved ``<bos>``, ``<eos>``, ``<unk>`` ids 0, 1, 2."""

    specials = (BOS, EOS, UNK)

    def __init__(self, words):
        words = sorted(set(words) - set(self.specials))
        self.tokens = list(self.specials) + words
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def from_captions(cls, captions):
        return cls(w for c in captions for w in tokenize(c))

    @classmethod
    def template(cls):
        """Every word the scene grammar can produce."""
        return cls(SHAPES + COLORS + MOTIONS + FUNCTION_WORDS)

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @property
    def bos_id(self):
        return self.index[BOS]

    @property
    def eos_id(self):
        return self.index[EOS]

    @property
    def unk_id(self):
        return self.index[UNK]

    @property
    def n_words(self):
        return len(self.tokens) - len(self.specials)

    def encode(self, text, add_eos=True):
        """Token ids and the number of out-of-vocabulary words mapped to ``<unk>``."""
        ids, n_unk = [], 0
        for w in tokenize(text):
            i = self.index.get(w)
            if i is None:
                i, n_unk = self.unk_id, n_unk + 1
            ids.append(i)
        if add_eos:
            ids.append(self.eos_id)
        return ids, n_unk

    def decode(self, ids):
        """Words up to (excluding) the first ``<eos>``."""
        words = []
        for i in ids:
            i = int(i)
            if i == self.eos_id:
                break
            words.append(self.tokens[i])
        return " ".join(words)

    def to_list(self):
        return list(self.tokens)

    @classmethod
    def from_list(cls, tokens):
        if tuple(tokens[: len(cls.specials)]) != cls.specials:
            raise FormatError(f"vocabulary must start with {cls.specials}")
        vocab = cls(tokens[len(cls.specials):])
        if vocab.tokens != list(tokens):
            raise FormatError("vocabulary words must be unique and sorted")
        return vocab


# -- file formats ----------------------------------------------------------------
def encode_video(video):
    video = np.asarray(video)
    if video.ndim != 4:
        raise ConfigError(f"video must have 4 axes (frame, height, width, channel), got {video.shape}")
    dtype = video.dtype.newbyteorder("<") if video.dtype.kind == "f" else video.dtype
    tag = _TAG_OF.get(np.dtype(dtype))
    if tag is None:
        raise ConfigError(f"unsupported video dtype {video.dtype}; use uint8, float32 or float64")
    header = _HEADER.pack(VID_MAGIC, VID_VERSION, tag, *video.shape)
    return header + np.ascontiguousarray(video, dtype=_DTYPE_TAGS[tag]).tobytes()


def decode_video(buf, path=None):
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", path, len(buf))
    magic, version, tag, *shape = _HEADER.unpack_from(buf)
    if magic != VID_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {VID_MAGIC!r}", path, 0)
    if version != VID_VERSION:
        raise FormatError(f"unsupported version {version}", path, 4)
    if tag not in _DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag}", path, 6)
    dtype = _DTYPE_TAGS[tag]
    need = _HEADER.size + int(np.prod(shape)) * dtype.itemsize
    if len(buf) < need:
        raise FormatError(f"truncated payload: {len(buf)} of {need} bytes", path, len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after the payload", path, need)
    return np.frombuffer(buf, dtype=dtype, offset=_HEADER.size).reshape(shape).astype(dtype.newbyteorder("="))


def save_video(path, video):
    return atomic_write_bytes(path, encode_video(video))


def load_video(path):
    with open(path, "rb") as fh:
        return decode_video(fh.read(), path)


def save_captions(path, captions):
    return atomic_write_text(path, "".join(c + "\n" for c in captions))


def load_captions(path, vocab=None):
    """Reference captions, one per line.

    Without ``vocab`` the raw strings are returned. With it each caption is
    encoded (with ``<eos>``) and unknown words become ``<unk>`` with a warning;
    the result is ``(id lists, number of substitutions)``.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if vocab is None:
        return lines
    encoded, n_unk = [], 0
    for line in lines:
        ids, k = vocab.encode(line)
        encoded.append(ids)
        n_unk += k
    if n_unk:
        warnings.warn(f"{path}: {n_unk} unknown word(s) mapped to {UNK}", stacklevel=2)
    return encoded, n_unk


# -- corpus ------------------------------------------------------------------------
def gen_corpus(root, cfg=None):
    """Render every split under ``root`` and write ``manifest.json``."""
    cfg = CorpusConfig() if cfg is None else cfg
    root = Path(root)
    scenes = split_scenes(cfg)
    vocab = Vocabulary.template()
    entries = {}
    for split, items in scenes.items():
        entries[split] = []
        for i, scene in enumerate(items):
            stem = root / split / f"{i:04d}"
            try:
                save_video(stem.with_suffix(".vid"), quantize(render(scene, *cfg.video_shape)))
                save_captions(stem.with_suffix(".txt"), [scene.caption])
            except OSError as exc:
                raise OSError(f"could not write {stem}: {exc}") from exc
            entries[split].append({"id": f"{i:04d}", "scene": asdict(scene)})
    manifest = {"format": "vidcap-corpus", "version": 1, "config": cfg.to_dict(), "seed": cfg.seed,
                "vocab": vocab.to_list(), "splits": entries}
    atomic_write_json(root / "manifest.json", manifest)
    return manifest


class Corpus:
    """Reader for a generated corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FormatError("no manifest.json in corpus directory", self.root)
        self.manifest = read_json(path)
        self.vocab = Vocabulary.from_list(self.manifest["vocab"])
        self.config = CorpusConfig.from_dict(self.manifest["config"])

    def ids(self, split):
        return [e["id"] for e in self.manifest["splits"][split]]

    def video(self, split, item_id):
        return load_video(self.root / split / f"{item_id}.vid")

    def references(self, split, item_id):
        return load_captions(self.root / split / f"{item_id}.txt")

    def load_split(self, split):
        """``(videos, reference lists)`` for one split, in manifest order."""
        ids = self.ids(split)
        return [self.video(split, i) for i in ids], [self.references(split, i) for i in ids]


def to_float(video):
    """uint8 frames to float64 in ``[0, 1]``."""
    video = np.asarray(video)
    return video.astype(np.float64) / 255.0 if video.dtype == np.uint8 else video.astype(np.float64)
