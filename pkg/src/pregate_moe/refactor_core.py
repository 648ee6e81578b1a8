"""Carve domain experts out of a dense FFN using activation magnitudes.

Each domain's samples are pushed through the dense stack; a channel's score
is the mean absolute pre-activation it receives. An expert keeps the ``d``
highest-scoring channels per layer. Because the objective is a sum over
channels, picking the top ``d`` scores is the exact maximiser.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np

from .ffn import DenseFFN, ExpertMask, ExpertWeights, activation_fn, slice_expert

__all__ = [
    "ModelConfig",
    "ActivationProfile",
    "PermanentChannelSet",
    "compute_activation_profile",
    "solve_expert_mask",
    "detect_permanent_channels",
    "build_expert",
    "save_masks",
    "load_masks",
    "save_profiles",
    "load_profiles",
]


@dataclass(frozen=True)
class ModelConfig:
    num_experts: int = 4
    top_k: int = 1
    num_layers: int = 2
    hidden: int = 32
    expert_hidden: int | None = None
    d_in: int = 16
    d_out: int = 16
    max_seq_len: int = 64
    # permanent channels are added on top of the d selected channels
    permanent_extra: bool = True

    def __post_init__(self):
        for name in ("num_experts", "top_k", "num_layers", "hidden", "d_in", "d_out", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.top_k > self.num_experts:
            raise ValueError(f"top_k={self.top_k} exceeds num_experts={self.num_experts}")
        d = self.d
        if not isinstance(d, int) or not 1 <= d <= self.hidden:
            raise ValueError(f"expert_hidden={d} must lie in [1, hidden={self.hidden}]")

    @property
    def d(self) -> int:
        return self.hidden // 2 if self.expert_hidden is None else self.expert_hidden


@dataclass(frozen=True)
class ActivationProfile:
    domain_id: Hashable
    scores: np.ndarray  # (L, D)

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2:
            raise ValueError("scores must be (layers, hidden)")
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("scores must be finite and non-negative")
        object.__setattr__(self, "scores", s)

    @property
    def width(self) -> int:
        return self.scores.shape[1]

    @property
    def num_layers(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True)
class PermanentChannelSet:
    channels: tuple[tuple[int, ...], ...]  # one sorted tuple per layer

    def layer(self, layer: int) -> tuple[int, ...]:
        return self.channels[layer]


def compute_activation_profile(model: DenseFFN, samples, domain_id: Hashable = 0,
                               post_activation: bool = False) -> ActivationProfile:
    """Mean |W1 x| per hidden channel and layer over ``samples``.

    Layer ``l`` sees the dense model's output of layer ``l-1``. With
    ``post_activation`` the magnitude is taken after the nonlinearity.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[0] == 0:
        raise ValueError("empty sample batch")
    if x.shape[1] != model.d_in:
        raise ValueError(f"sample width {x.shape[1]} != model input width {model.d_in}")
    act = activation_fn(model.activation)
    n = x.shape[0]
    scores = np.empty((model.num_layers, model.hidden))
    for layer in range(model.num_layers):
        pre = model.pre_activation(layer, x)
        mag = np.abs(act(pre)) if post_activation else np.abs(pre)
        scores[layer] = mag.sum(axis=0) / n
        x = act(pre) @ model.w2[layer].T
    return ActivationProfile(domain_id, scores)


def _top_channels(scores: np.ndarray, count: int) -> np.ndarray:
    # stable sort on -score keeps the lowest index first among ties
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:count])


def solve_expert_mask(profile: ActivationProfile, layer: int, d: int) -> ExpertMask:
    if not 0 <= layer < profile.num_layers:
        raise ValueError(f"layer {layer} out of range [0, {profile.num_layers})")
    width = profile.width
    if not isinstance(d, (int, np.integer)) or not 1 <= d <= width:
        raise ValueError(f"d={d} out of range [1, {width}]")
    chosen = _top_channels(profile.scores[layer], int(d))
    return ExpertMask(layer, width, tuple(int(c) for c in chosen))


def detect_permanent_channels(profiles: Sequence[ActivationProfile],
                              top_fraction: float = 0.5) -> PermanentChannelSet:
    """Channels ranked in the top ``ceil(q*D)`` of every domain's profile."""
    if not profiles:
        raise ValueError("need at least one profile")
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    shape = profiles[0].scores.shape
    if any(p.scores.shape != shape for p in profiles):
        raise ValueError("profiles disagree on layer count or hidden width")
    num_layers, width = shape
    count = math.ceil(top_fraction * width)
    per_layer = []
    for layer in range(num_layers):
        common: set[int] | None = None
        for p in profiles:
            top = {int(c) for c in _top_channels(p.scores[layer], count)}
            common = top if common is None else common & top
        per_layer.append(tuple(sorted(common or ())))
    return PermanentChannelSet(tuple(per_layer))


def build_expert(model: DenseFFN, masks: Sequence[ExpertMask],
                 permanent: PermanentChannelSet | None = None) -> ExpertWeights:
    """Slice rows of W1 and columns of W2 for each layer's mask.

    Permanent channels, when given, are kept in addition to the mask.
    """
    for layer, mask in enumerate(masks):
        if mask.layer != layer:
            raise ValueError(f"mask for layer {mask.layer} given at position {layer}")
    extra = permanent.channels if permanent is not None else None
    return slice_expert(model, masks, extra)


# line-delimited JSON, one record per layer

def save_masks(path: str | Path, experts: Sequence[Sequence[ExpertMask]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for expert_id, masks in enumerate(experts):
            for m in masks:
                rec = {"expert": expert_id, "layer": m.layer, "D": m.width, "d": m.d,
                       "channels": list(m.selected)}
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_masks(path: str | Path) -> list[list[ExpertMask]]:
    experts: dict[int, list[ExpertMask]] = {}
    for lineno, line in _records(path):
        try:
            rec = json.loads(line)
            mask = ExpertMask(int(rec["layer"]), int(rec["D"]), tuple(rec["channels"]))
            if mask.d != int(rec["d"]):
                raise ValueError(f"d={rec['d']} but {mask.d} channels listed")
            experts.setdefault(int(rec.get("expert", 0)), []).append(mask)
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    out = []
    for expert_id in sorted(experts):
        masks = sorted(experts[expert_id], key=lambda m: m.layer)
        if [m.layer for m in masks] != list(range(len(masks))):
            raise ValueError(f"{path}: expert {expert_id} has gaps in its layer indices")
        out.append(masks)
    return out


def save_profiles(path: str | Path, profiles: Iterable[ActivationProfile]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in profiles:
            for layer, row in enumerate(p.scores):
                rec = {"domain": p.domain_id, "layer": layer, "D": p.width,
                       "scores": [float(v) for v in row]}
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_profiles(path: str | Path) -> list[ActivationProfile]:
    rows: dict = {}
    order: list = []
    for lineno, line in _records(path):
        try:
            rec = json.loads(line)
            scores = [float(v) for v in rec["scores"]]
            if len(scores) != int(rec["D"]):
                raise ValueError(f"D={rec['D']} but {len(scores)} scores listed")
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        dom = rec["domain"]
        if dom not in rows:
            rows[dom] = {}
            order.append(dom)
        rows[dom][int(rec["layer"])] = scores
    return [ActivationProfile(dom, np.array([rows[dom][l] for l in sorted(rows[dom])]))
            for dom in order]


def _records(path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield lineno, line
