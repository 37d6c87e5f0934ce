"""Named collection of learnable arrays."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """Ordered mapping ``name -> Tensor`` with a frozen subset.

    Names are dotted, e.g. ``"dec.W_iw"``; the first component is the module
    (``encoder``, ``align``, ``attn``, ``dec``).
    """

    def __init__(self):
        self._params = OrderedDict()
        self._frozen = set()

    def add(self, name, value, frozen=False):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, copy=True), requires_grad=not frozen, name=name)
        self._params[name] = t
        if frozen:
            self._frozen.add(name)
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable(self):
        return [n for n in self._params if n not in self._frozen]

    def is_frozen(self, name):
        return name in self._frozen

    def freeze(self, prefix):
        for name, t in self._params.items():
            if name.startswith(prefix):
                self._frozen.add(name)
                t.requires_grad = False

    def unfreeze(self, prefix):
        for name, t in self._params.items():
            if name.startswith(prefix):
                self._frozen.discard(name)
                t.requires_grad = True

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grad(self, name):
        """Gradient slot; zeros when nothing has flowed into it."""
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def set(self, name, value):
        t = self._params[name]
        value = np.asarray(value, dtype=t.data.dtype)
        if value.shape != t.shape:
            raise ValueError(f"{name}: expected shape {t.shape}, got {value.shape}")
        t.data = value.copy()

    def state(self):
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def load_state(self, state):
        for name, value in state.items():
            self.set(name, value)

    def astype(self, dtype):
        for t in self._params.values():
            t.data = t.data.astype(dtype)
        return self

    def copy(self):
        other = ParameterStore()
        for name, t in self._params.items():
            other.add(name, t.data, frozen=name in self._frozen)
        return other

    def num_scalars(self, trainable_only=False):
        names = self.trainable() if trainable_only else self.names()
        return int(sum(self._params[n].size for n in names))
