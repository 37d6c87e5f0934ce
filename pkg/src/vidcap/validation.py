"""Input checks for the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError


def check_videos(X, n_frames=None, input_size=None, channels=None):
    """List of ``(frame, height, width, channel)`` arrays, all of one shape."""
    if isinstance(X, np.ndarray) and X.ndim == 5:
        videos = list(X)
    elif isinstance(X, (list, tuple)):
        videos = [np.asarray(v) for v in X]
    else:
        raise ShapeError(f"expected a sequence of videos or a 5-D array, got {type(X).__name__}")
    if not videos:
        raise ShapeError("no videos given")
    first = videos[0].shape
    for i, v in enumerate(videos):
        if v.ndim != 4:
            raise ShapeError(f"video {i} has shape {v.shape}; expected (frame, height, width, channel)")
        if v.shape != first:
            raise ShapeError(f"video {i} has shape {v.shape}, video 0 has {first}")
        if v.dtype.kind not in "uf":
            raise ShapeError(f"video {i} has dtype {v.dtype}; expected uint8 or float")
        if v.dtype.kind == "f" and not np.isfinite(v).all():
            raise ShapeError(f"video {i} contains non-finite values")
    if n_frames is not None and first[0] != n_frames:
        raise ShapeError(f"videos have {first[0]} frames, the model expects {n_frames}")
    if input_size is not None and tuple(first[1:3]) != tuple(input_size):
        raise ShapeError(f"videos are {first[1]}x{first[2]}, the model expects {tuple(input_size)}")
    if channels is not None and first[3] != channels:
        raise ShapeError(f"videos have {first[3]} channels, the model expects {channels}")
    return videos


def check_references(y, n):
    """Reference sets: each entry a caption string or a non-empty list of them."""
    if len(y) != n:
        raise ShapeError(f"{n} videos but {len(y)} caption entries")
    refs = []
    for i, item in enumerate(y):
        group = [item] if isinstance(item, str) else list(item)
        if not group or not all(isinstance(c, str) and c.strip() for c in group):
            raise ConfigError(f"caption entry {i} must be a non-empty string or list of strings")
        refs.append(group)
    return refs
