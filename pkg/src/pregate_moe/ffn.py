"""Feed-forward building blocks shared by the refactoring and MoE code.

A dense model is a stack of residual-free two-layer FFNs ``y = W2 act(W1 x)``.
An expert keeps a subset of each layer's hidden channels; the subset is an
:class:`ExpertMask`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "silu")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def activation_fn(name: str):
    if name == "relu":
        return relu
    if name == "silu":
        return silu
    raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


@dataclass(frozen=True)
class ExpertMask:
    """The ``d`` hidden channels (out of ``D``) an expert keeps in one layer."""

    layer: int
    width: int
    selected: tuple[int, ...]

    def __post_init__(self):
        sel = tuple(int(c) for c in self.selected)
        object.__setattr__(self, "selected", sel)
        if self.layer < 0:
            raise ValueError(f"negative layer index {self.layer}")
        if not sel:
            raise ValueError("mask must select at least one channel")
        if any(b <= a for a, b in zip(sel, sel[1:])):
            raise ValueError(f"mask channels must be strictly increasing: {sel}")
        if sel[0] < 0 or sel[-1] >= self.width:
            raise ValueError(f"mask channel out of range [0, {self.width})")

    @property
    def d(self) -> int:
        return len(self.selected)

    def matrix(self) -> np.ndarray:
        """The d x D selection matrix."""
        m = np.zeros((self.d, self.width))
        m[np.arange(self.d), self.selected] = 1.0
        return m

    @classmethod
    def full(cls, layer: int, width: int) -> "ExpertMask":
        return cls(layer, width, tuple(range(width)))


def mask_overlap(a: ExpertMask, b: ExpertMask) -> int:
    """Number of channels two masks share; equals ``||A B^T||_F^2``."""
    if a.width != b.width:
        raise ValueError(f"mask width mismatch: {a.width} vs {b.width}")
    return len(set(a.selected) & set(b.selected))


@dataclass(frozen=True)
class DenseFFN:
    """Stack of two-layer FFNs without biases.

    ``w1[l]`` has shape (D, D_in) and ``w2[l]`` has shape (D_out, D).
    Stacking requires D_in == D_out.
    """

    w1: tuple[np.ndarray, ...]
    w2: tuple[np.ndarray, ...]
    activation: str = "relu"

    def __post_init__(self):
        w1 = tuple(np.asarray(w, dtype=np.float64) for w in self.w1)
        w2 = tuple(np.asarray(w, dtype=np.float64) for w in self.w2)
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "w2", w2)
        activation_fn(self.activation)
        if not w1 or len(w1) != len(w2):
            raise ValueError("need one (W1, W2) pair per layer")
        shape1, shape2 = w1[0].shape, w2[0].shape
        for a, b in zip(w1, w2):
            if a.ndim != 2 or b.ndim != 2:
                raise ValueError("weights must be matrices")
            if a.shape != shape1 or b.shape != shape2:
                raise ValueError("weight shapes must match across layers")
            if b.shape[1] != a.shape[0]:
                raise ValueError(f"W2 columns {b.shape[1]} != W1 rows {a.shape[0]}")
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
                raise ValueError("weights must be finite")
        if len(w1) > 1 and shape1[1] != shape2[0]:
            raise ValueError("stacked layers need D_in == D_out")

    @property
    def num_layers(self) -> int:
        return len(self.w1)

    @property
    def hidden(self) -> int:
        return self.w1[0].shape[0]

    @property
    def d_in(self) -> int:
        return self.w1[0].shape[1]

    @property
    def d_out(self) -> int:
        return self.w2[0].shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, num_layers: int, hidden: int, width: int,
               activation: str = "relu") -> "DenseFFN":
        w1 = [rng.normal(0.0, 1.0 / np.sqrt(width), (hidden, width)) for _ in range(num_layers)]
        w2 = [rng.normal(0.0, 1.0 / np.sqrt(hidden), (width, hidden)) for _ in range(num_layers)]
        return cls(tuple(w1), tuple(w2), activation)

    def pre_activation(self, layer: int, x: np.ndarray) -> np.ndarray:
        return x @ self.w1[layer].T

    def layer_forward(self, layer: int, x: np.ndarray) -> np.ndarray:
        act = activation_fn(self.activation)
        return act(x @ self.w1[layer].T) @ self.w2[layer].T


@dataclass(frozen=True)
class ExpertWeights:
    """Per-layer slices of a dense model that form one routing path."""

    w1: tuple[np.ndarray, ...]
    w2: tuple[np.ndarray, ...]
    channels: tuple[tuple[int, ...], ...]
    activation: str = "relu"
    masks: tuple[ExpertMask, ...] = field(default=())

    def __post_init__(self):
        if not (len(self.w1) == len(self.w2) == len(self.channels)):
            raise ValueError("expert needs one slice per layer")
        for a, b, ch in zip(self.w1, self.w2, self.channels):
            if a.shape[0] != len(ch) or b.shape[1] != len(ch):
                raise ValueError("expert slice shapes do not match channel count")

    @property
    def num_layers(self) -> int:
        return len(self.w1)

    def layer_forward(self, layer: int, x: np.ndarray) -> np.ndarray:
        act = activation_fn(self.activation)
        return act(x @ self.w1[layer].T) @ self.w2[layer].T

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in range(self.num_layers):
            x = self.layer_forward(layer, x)
        return x


def slice_expert(model: DenseFFN, masks: Sequence[ExpertMask],
                 extra_channels: Sequence[Sequence[int]] | None = None) -> ExpertWeights:
    if len(masks) != model.num_layers:
        raise ValueError(f"got {len(masks)} masks for {model.num_layers} layers")
    w1, w2, chans = [], [], []
    for layer, mask in enumerate(masks):
        if mask.width != model.hidden:
            raise ValueError(f"mask width {mask.width} != hidden width {model.hidden}")
        keep = set(mask.selected)
        if extra_channels is not None:
            keep.update(int(c) for c in extra_channels[layer])
        sel = np.array(sorted(keep), dtype=np.int64)
        w1.append(model.w1[layer][sel, :])
        w2.append(model.w2[layer][:, sel])
        chans.append(tuple(int(c) for c in sel))
    return ExpertWeights(tuple(w1), tuple(w2), tuple(chans), model.activation, tuple(masks))
