"""Dense, layer-wise MoE and pre-gated MoE forward passes plus the router.

The pre-gated router is one causal transformer block (RoPE attention,
RMSNorm, SwiGLU MLP) followed by a linear gating head. It sees token ids
only and emits one routing decision per token, shared by every layer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .ffn import DenseFFN, ExpertMask, ExpertWeights, activation_fn, mask_overlap, silu
from .routing_analysis import SelectionTrace

__all__ = [
    "DenseFFN",
    "ExpertWeights",
    "RoutingDecision",
    "LayerwiseRouter",
    "RouterConfig",
    "PreGateRouter",
    "dense_forward",
    "topk_select",
    "layerwise_moe_forward",
    "pregate",
    "pregated_moe_forward",
    "top50_mask_from_dense",
    "mask_overlap",
    "teacher_distribution",
    "kl_divergence",
    "routing_distillation_loss",
    "loss_gradient_wrt_logits",
    "train_gating_head",
    "linear_flops",
    "traditional_router_flops",
    "autoregressive_router_flops",
    "flops_estimate",
]


def _as_seq(x, width: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"expected inputs of width {width}, got shape {np.shape(x)}")
    return arr, single


def dense_forward(model: DenseFFN, x_seq) -> np.ndarray:
    x, single = _as_seq(x_seq, model.d_in)
    for layer in range(model.num_layers):
        x = model.layer_forward(layer, x)
    return x[0] if single else x


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def topk_select(logits, k: int) -> tuple[tuple[int, ...], np.ndarray]:
    """Top-k logits (ties to the lower index) and their renormalised softmax."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logit")
    if not 1 <= k <= z.size:
        raise ValueError(f"k={k} out of range [1, {z.size}]")
    idx = np.argsort(-z, kind="stable")[:k]
    return tuple(int(i) for i in idx), softmax(z[idx])


@dataclass(frozen=True)
class RoutingDecision:
    experts: tuple[int, ...]   # rank order, highest logit first
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.experts) != len(self.weights) or not self.experts:
            raise ValueError("need one weight per selected expert")
        if len(set(self.experts)) != len(self.experts):
            raise ValueError("duplicate expert in decision")
        if any(w <= 0 for w in self.weights) or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to 1")

    @property
    def expert_set(self) -> tuple[int, ...]:
        return tuple(sorted(self.experts))

    @property
    def primary(self) -> int:
        return self.experts[0]

    @classmethod
    def from_logits(cls, logits, k: int) -> "RoutingDecision":
        idx, w = topk_select(logits, k)
        return cls(idx, tuple(float(v) for v in w))


@dataclass(frozen=True)
class LayerwiseRouter:
    """One (N x F) gating matrix per layer."""

    gates: tuple[np.ndarray, ...]

    def __post_init__(self):
        gates = tuple(np.asarray(g, dtype=np.float64) for g in self.gates)
        if not gates or any(g.shape != gates[0].shape for g in gates):
            raise ValueError("need equally shaped gates, one per layer")
        if not all(np.all(np.isfinite(g)) for g in gates):
            raise ValueError("gate weights must be finite")
        object.__setattr__(self, "gates", gates)

    @property
    def num_experts(self) -> int:
        return self.gates[0].shape[0]

    @classmethod
    def random(cls, rng: np.random.Generator, num_layers: int, num_experts: int,
               width: int) -> "LayerwiseRouter":
        return cls(tuple(rng.normal(0.0, 1.0, (num_experts, width)) for _ in range(num_layers)))


def _check_experts(experts: Sequence[ExpertWeights]) -> int:
    if not experts:
        raise ValueError("need at least one expert")
    num_layers = experts[0].num_layers
    if any(e.num_layers != num_layers for e in experts):
        raise ValueError("experts disagree on layer count")
    return num_layers


def layerwise_moe_forward(experts: Sequence[ExpertWeights], router: LayerwiseRouter, k: int,
                          x_seq) -> tuple[np.ndarray, SelectionTrace]:
    num_layers = _check_experts(experts)
    if len(router.gates) != num_layers:
        raise ValueError(f"router has {len(router.gates)} gates for {num_layers} layers")
    if router.num_experts != len(experts):
        raise ValueError(f"router scores {router.num_experts} experts, got {len(experts)}")
    x, single = _as_seq(x_seq, experts[0].w1[0].shape[1])
    if router.gates[0].shape[1] != x.shape[1]:
        raise ValueError("gate width does not match layer input width")
    sets = np.empty((x.shape[0], num_layers, k), dtype=np.int64)
    for layer in range(num_layers):
        logits = x @ router.gates[layer].T
        y = np.zeros((x.shape[0], experts[0].w2[layer].shape[0]))
        for t in range(x.shape[0]):
            idx, w = topk_select(logits[t], k)
            sets[t, layer] = sorted(idx)
            for e, weight in zip(idx, w):
                y[t] += weight * experts[e].layer_forward(layer, x[t])
        x = y
    trace = SelectionTrace(sets, len(experts))
    return (x[0] if single else x), trace


def pregated_moe_forward(experts: Sequence[ExpertWeights], decisions: Sequence[RoutingDecision],
                         x_seq, return_trace: bool = False):
    """Apply each token's single routing decision at every layer."""
    num_layers = _check_experts(experts)
    x, single = _as_seq(x_seq, experts[0].w1[0].shape[1])
    if len(decisions) != x.shape[0]:
        raise ValueError(f"{len(decisions)} decisions for {x.shape[0]} tokens")
    k = len(decisions[0].experts) if decisions else 1
    sets = np.empty((x.shape[0], num_layers, k), dtype=np.int64)
    for layer in range(num_layers):
        y = np.zeros((x.shape[0], experts[0].w2[layer].shape[0]))
        for t, dec in enumerate(decisions):
            if len(dec.experts) != k:
                raise ValueError("all decisions must select the same number of experts")
            for e, weight in zip(dec.experts, dec.weights):
                if not 0 <= e < len(experts):
                    raise ValueError(f"expert {e} out of range")
                y[t] += weight * experts[e].layer_forward(layer, x[t])
            sets[t, layer] = dec.expert_set
        x = y
    out = x[0] if single else x
    if return_trace:
        return out, SelectionTrace(sets, len(experts))
    return out


# --- pre-gating router ------------------------------------------------------

@dataclass(frozen=True)
class RouterConfig:
    vocab_size: int = 256
    embed_dim: int = 32
    feature_dim: int = 32
    num_heads: int = 2
    mlp_dim: int = 32
    num_experts: int = 8
    top_k: int = 1
    rope_base: float = 10000.0
    eps: float = 1e-6

    def __post_init__(self):
        for name in ("vocab_size", "embed_dim", "feature_dim", "num_heads", "mlp_dim",
                     "num_experts", "top_k"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.feature_dim % self.num_heads or (self.feature_dim // self.num_heads) % 2:
            raise ValueError("feature_dim must split into heads of even size")
        if self.top_k > self.num_experts:
            raise ValueError("top_k exceeds num_experts")

    @property
    def head_dim(self) -> int:
        return self.feature_dim // self.num_heads


# a full-size router for comparison: RouterConfig(32000, 512, 512, 4, 512, ...)

PARAM_NAMES = ("embed", "w_in", "norm1", "wq", "wk", "wv", "wo", "norm2",
               "w_gate", "w_up", "w_down", "norm_out", "head")


@dataclass(frozen=True)
class PreGateRouter:
    config: RouterConfig
    params: dict

    @classmethod
    def random(cls, config: RouterConfig, rng: np.random.Generator) -> "PreGateRouter":
        c = config
        E, F, I, N = c.embed_dim, c.feature_dim, c.mlp_dim, c.num_experts

        def lin(n_in, n_out):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))

        p = {
            "embed": rng.normal(0.0, 1.0, (c.vocab_size, E)),
            "w_in": lin(E, F) if E != F else np.zeros((0, 0)),
            "norm1": np.ones(F), "norm2": np.ones(F), "norm_out": np.ones(F),
            "wq": lin(F, F), "wk": lin(F, F), "wv": lin(F, F), "wo": lin(F, F),
            "w_gate": lin(F, I), "w_up": lin(F, I), "w_down": lin(I, F),
            "head": lin(F, N),
        }
        return cls(config, p)

    def with_head(self, head: np.ndarray) -> "PreGateRouter":
        params = dict(self.params)
        params["head"] = np.asarray(head, dtype=np.float64)
        return replace(self, params=params)

    def num_params(self) -> int:
        return sum(int(np.asarray(v).size) for v in self.params.values())

    def _rms(self, x: np.ndarray, gain: np.ndarray) -> np.ndarray:
        return x / np.sqrt(np.mean(x * x) + self.config.eps) * gain

    def _rope(self, v: np.ndarray, pos: int) -> np.ndarray:
        c = self.config
        half = c.head_dim // 2
        freqs = c.rope_base ** (-np.arange(half) / half)
        ang = pos * freqs
        cos, sin = np.cos(ang), np.sin(ang)
        v = v.reshape(c.num_heads, c.head_dim)
        a, b = v[:, :half], v[:, half:]
        return np.concatenate([a * cos - b * sin, a * sin + b * cos], axis=1)

    def features(self, token_ids) -> np.ndarray:
        """Final normalised hidden state per token, shape (T, F).

        Tokens are processed one at a time so that position ``t`` never
        touches anything computed from a later token.
        """
        c, p = self.config, self.params
        ids = [int(t) for t in token_ids]
        for t in ids:
            if not 0 <= t < c.vocab_size:
                raise ValueError(f"token id {t} outside vocabulary of {c.vocab_size}")
        scale = 1.0 / np.sqrt(c.head_dim)
        keys, values, out = [], [], []
        for pos, tok in enumerate(ids):
            h = p["embed"][tok]
            if c.embed_dim != c.feature_dim:
                h = h @ p["w_in"]
            a = self._rms(h, p["norm1"])
            q = self._rope(a @ p["wq"], pos)
            keys.append(self._rope(a @ p["wk"], pos))
            values.append((a @ p["wv"]).reshape(c.num_heads, c.head_dim))
            K = np.stack(keys, axis=1)    # (heads, pos+1, hd)
            V = np.stack(values, axis=1)
            heads = np.empty((c.num_heads, c.head_dim))
            for hd in range(c.num_heads):
                s = K[hd] @ q[hd] * scale
                w = np.exp(s - s.max())
                heads[hd] = (w / w.sum()) @ V[hd]
            h = h + heads.reshape(-1) @ p["wo"]
            m = self._rms(h, p["norm2"])
            h = h + (silu(m @ p["w_gate"]) * (m @ p["w_up"])) @ p["w_down"]
            out.append(self._rms(h, p["norm_out"]))
        return np.array(out).reshape(len(ids), c.feature_dim)

    def logits(self, token_ids) -> np.ndarray:
        # row by row: a batched matmul may round differently as T changes
        head = self.params["head"]
        return np.array([f @ head for f in self.features(token_ids)]).reshape(-1, head.shape[1])


def pregate(router: PreGateRouter, token_ids, k: int | None = None) -> list[RoutingDecision]:
    k = router.config.top_k if k is None else k
    return [RoutingDecision.from_logits(z, k) for z in router.logits(token_ids)]


# --- routing distillation ---------------------------------------------------

def top50_mask_from_dense(model: DenseFFN, x) -> list[ExpertMask]:
    """Per layer, the ceil(D/2) channels with the largest |W1 x| for one input."""
    x, _ = _as_seq(x, model.d_in)
    if x.shape[0] != 1:
        raise ValueError("expected a single input vector")
    act = activation_fn(model.activation)
    keep = -(-model.hidden // 2)
    masks = []
    v = x[0]
    for layer in range(model.num_layers):
        pre = model.pre_activation(layer, v)
        top = np.sort(np.argsort(-np.abs(pre), kind="stable")[:keep])
        masks.append(ExpertMask(layer, model.hidden, tuple(int(c) for c in top)))
        v = act(pre) @ model.w2[layer].T
    return masks


def teacher_distribution(m0: ExpertMask, expert_masks: Sequence[ExpertMask]) -> np.ndarray:
    return softmax(np.array([mask_overlap(m0, m) for m in expert_masks], dtype=np.float64))


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    nz = p > 0
    return float(max(0.0, np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz])))))


def routing_distillation_loss(router_logits, m0: ExpertMask,
                              expert_masks: Sequence[ExpertMask]) -> float:
    """KL(softmax(router logits) || softmax(mask overlaps with the dense top-50% mask))."""
    z = np.asarray(router_logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logit")
    if len(expert_masks) != z.size:
        raise ValueError(f"{len(expert_masks)} expert masks for {z.size} logits")
    return kl_divergence(softmax(z), teacher_distribution(m0, expert_masks))


def loss_gradient_wrt_logits(router_logits, teacher) -> np.ndarray:
    """d KL(softmax(z) || teacher) / dz = p * (log p - log q - KL)."""
    z = np.asarray(router_logits, dtype=np.float64)
    q = np.asarray(teacher, dtype=np.float64)
    if q.shape != z.shape:
        raise ValueError("teacher and logits differ in length")
    if np.any(q <= 0) or abs(q.sum() - 1.0) > 1e-9:
        raise ValueError("teacher must be a strictly positive distribution summing to 1")
    p = softmax(z)
    g = np.log(p) - np.log(q)
    return p * (g - np.dot(p, g))


def train_gating_head(router: PreGateRouter, sequences: Sequence[Sequence[int]],
                      teachers: Sequence[np.ndarray], lr: float = 0.5,
                      steps: int = 50) -> tuple[PreGateRouter, list[float]]:
    """Gradient descent on the gating head only; the transformer block stays frozen.

    ``teachers[i]`` holds one target distribution per token of ``sequences[i]``.
    Returns the tuned router and the mean loss before each step plus the final one.
    """
    feats = np.concatenate([router.features(s) for s in sequences])
    targets = np.concatenate([np.asarray(t, dtype=np.float64) for t in teachers])
    if feats.shape[0] != targets.shape[0]:
        raise ValueError("need one teacher distribution per token")
    head = router.params["head"].copy()
    history = []
    for _ in range(steps + 1):
        logits = feats @ head
        losses, grads = [], np.empty_like(logits)
        for i, (z, q) in enumerate(zip(logits, targets)):
            losses.append(kl_divergence(softmax(z), q))
            grads[i] = loss_gradient_wrt_logits(z, q)
        history.append(float(np.mean(losses)))
        if len(history) > steps:
            break
        head -= lr * feats.T @ grads / feats.shape[0]
    return router.with_head(head), history


# --- FLOPs -----------------------------------------------------------------

def linear_flops(n_in: int, n_out: int) -> int:
    """Multiply-adds of one dense projection, counted as 2 flops each."""
    return 2 * n_in * n_out


def traditional_router_flops(num_layers: int, num_experts: int, width: int) -> int:
    return num_layers * linear_flops(width, num_experts)


def autoregressive_router_flops(config: RouterConfig, context_len: int = 1) -> int:
    """Per-token cost of the router at position ``context_len - 1``.

    Embedding lookup is free; norms and softmaxes are not counted.
    """
    c = config
    if context_len < 1:
        raise ValueError("context_len must be positive")
    F = c.feature_dim
    flops = linear_flops(c.embed_dim, F) if c.embed_dim != F else 0
    flops += 4 * linear_flops(F, F)                  # q, k, v, o projections
    flops += 2 * (2 * context_len * F)               # scores and weighted values
    flops += 2 * linear_flops(F, c.mlp_dim) + linear_flops(c.mlp_dim, F)
    flops += linear_flops(F, c.num_experts)
    return flops


def flops_estimate(config, **kwargs) -> int:
    """Dispatch on a RouterConfig or a (layers, experts, width) traditional router description."""
    if isinstance(config, RouterConfig):
        return autoregressive_router_flops(config, **kwargs)
    num_layers, num_experts, width = config
    return traditional_router_flops(num_layers, num_experts, width)
