"""Shallow GCN / GraphSAGE / GAT models over the autodiff core.

All three produce per-node logits, class probabilities, and penultimate
embeddings (final hidden layer, post-activation, pre-classifier), which the
distillation losses treat as each node's learnt representation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import Graph
from .tensor import ContractError, DimensionError, Tensor

ARCHS = ("gcn", "sage", "gat")
LEAKY_SLOPE = 0.2
ATTN_NEG_INF = -1e30


@dataclass
class GnnConfig:
    arch: str = "gcn"
    layers: int = 2
    hidden: int = 64
    heads: int = 8
    dropout: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ContractError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.layers < 2:
            raise ContractError("at least 2 layers required")
        if self.hidden <= 0 or self.heads < 1:
            raise ContractError("hidden size must be > 0 and heads >= 1")
        if self.arch == "gat" and self.hidden % self.heads:
            raise ContractError("GAT hidden size must be divisible by heads")


@dataclass
class ModelOutput:
    logits: Tensor
    embeddings: Tensor
    probs: Tensor


class GnnModel:
    """Parameter container for one network; stateless forward lives below."""

    def __init__(self, config: GnnConfig, in_dim: int, num_classes: int):
        self.config = config
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xC0F)))
        dims = [in_dim] + [config.hidden] * (config.layers - 1) + [num_classes]
        for l in range(config.layers):
            fan_in, fan_out = dims[l], dims[l + 1]
            if config.arch == "sage":
                self._add(f"w{l}", _glorot(rng, 2 * fan_in, fan_out))
                self._add(f"b{l}", np.zeros((1, fan_out)))
            elif config.arch == "gcn":
                self._add(f"w{l}", _glorot(rng, fan_in, fan_out))
                self._add(f"b{l}", np.zeros((1, fan_out)))
            else:  # gat
                last = l == config.layers - 1
                head_out = fan_out if last else fan_out // config.heads
                for h in range(config.heads):
                    self._add(f"w{l}h{h}", _glorot(rng, fan_in, head_out))
                    self._add(f"al{l}h{h}", _glorot(rng, head_out, 1))
                    self._add(f"ar{l}h{h}", _glorot(rng, head_out, 1))
                self._add(f"b{l}", np.zeros((1, fan_out)))

    def _add(self, name: str, values: np.ndarray):
        self.params[name] = Tensor.param(values)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def forward(model: GnnModel, g: Graph, training: bool = False,
            rng: np.random.Generator | None = None,
            features: Tensor | None = None) -> ModelOutput:
    """Full-graph forward pass. `features` overrides g.x (e.g. learnable rows)."""
    if g.d != model.in_dim:
        raise DimensionError(f"graph has d={g.d}, model expects {model.in_dim}")
    h = features if features is not None else Tensor.const(g.x)
    cfg = model.config
    embeddings = None
    for l in range(cfg.layers):
        last = l == cfg.layers - 1
        h = T.dropout(h, cfg.dropout, training, rng)
        if cfg.arch == "gcn":
            h = T.matmul(Tensor.const(g.normalized_adjacency), h)
            h = T.matmul(h, model.params[f"w{l}"]) + model.params[f"b{l}"]
            if not last:
                h = T.relu(h)
        elif cfg.arch == "sage":
            nbr_mean = T.matmul(Tensor.const(g.mean_adjacency), h)
            h = T.matmul(T.concat_cols(h, nbr_mean), model.params[f"w{l}"])
            h = h + model.params[f"b{l}"]
            if not last:
                h = T.relu(h)
        else:
            h = _gat_layer(model, g, h, l, last, training, rng)
        if not last:
            embeddings = h
    probs = T.row_softmax(h)
    return ModelOutput(logits=h, embeddings=embeddings, probs=probs)


def _gat_layer(model: GnnModel, g: Graph, h: Tensor, l: int, last: bool,
               training: bool, rng) -> Tensor:
    cfg = model.config
    support = g.self_loop_mask.astype(np.float64)
    off = Tensor.const((1.0 - support) * ATTN_NEG_INF)
    support_t = Tensor.const(support)
    head_outs = []
    for k in range(cfg.heads):
        hw = T.matmul(h, model.params[f"w{l}h{k}"])
        s_l = T.matmul(hw, model.params[f"al{l}h{k}"])
        s_r = T.matmul(hw, model.params[f"ar{l}h{k}"])
        e = T.leaky_relu(s_l + T.transpose(s_r), LEAKY_SLOPE)
        alpha = T.row_softmax(T.mul(e, support_t) + off)
        alpha = T.dropout(alpha, cfg.dropout, training, rng)
        head_outs.append(T.matmul(alpha, hw))
    if last:
        out = head_outs[0]
        for extra in head_outs[1:]:
            out = out + extra
        out = T.scale(out, 1.0 / cfg.heads)
    else:
        out = head_outs[0]
        for extra in head_outs[1:]:
            out = T.concat_cols(out, extra)
    out = out + model.params[f"b{l}"]
    return out if last else T.elu(out)


def gat_attention(model: GnnModel, g: Graph, layer: int = 0) -> list[np.ndarray]:
    """Per-head attention matrices of one layer, dropout off (for inspection)."""
    if model.config.arch != "gat":
        raise ContractError("attention only defined for GAT models")
    h = Tensor.const(g.x)
    for l in range(layer):
        h = _gat_layer(model, g, h, l, False, False, None)
    cfg = model.config
    support = g.self_loop_mask.astype(np.float64)
    off = Tensor.const((1.0 - support) * ATTN_NEG_INF)
    mats = []
    for k in range(cfg.heads):
        hw = T.matmul(h, model.params[f"w{layer}h{k}"])
        s_l = T.matmul(hw, model.params[f"al{layer}h{k}"])
        s_r = T.matmul(hw, model.params[f"ar{layer}h{k}"])
        e = T.leaky_relu(s_l + T.transpose(s_r), LEAKY_SLOPE)
        mats.append(T.row_softmax(T.mul(e, Tensor.const(support)) + off).values)
    return mats


# ---------------------------------------------------------------------------
# loss and metric


def cross_entropy(probs: Tensor, labels: np.ndarray, mask: np.ndarray):
    """Mean -log p[i, y_i] over mask, plus the per-node vector (0 if unlabeled).

    Probabilities are clamped at 1e-12 before the log.
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    n, c = probs.shape
    if mask.sum() == 0:
        raise ContractError("cross_entropy over an empty mask")
    if (labels[mask] < 0).any():
        raise ContractError("mask contains unlabeled nodes")
    onehot = np.zeros((n, c))
    labeled = labels >= 0
    onehot[np.flatnonzero(labeled), labels[labeled]] = 1.0
    per_node = -T.row_sum(T.mul(T.clamped_log(probs), Tensor.const(onehot)))
    total = T.scale(T.sum_all(T.mul(per_node, Tensor.const(
        mask.astype(np.float64).reshape(-1, 1)))), 1.0 / mask.sum())
    return total, per_node


def predictions(probs: Tensor | np.ndarray) -> np.ndarray:
    vals = probs.values if isinstance(probs, Tensor) else np.asarray(probs)
    return vals.argmax(axis=1)


def micro_f1(preds: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Micro-F1 for single-label multiclass prediction == accuracy over mask."""
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() == 0:
        raise ContractError("micro_f1 over an empty mask")
    return float((np.asarray(preds)[mask] == np.asarray(labels)[mask]).mean())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: GnnModel, path: str):
    payload = {
        "config": vars(model.config),
        "in_dim": model.in_dim,
        "num_classes": model.num_classes,
        "params": {k: v.values.tolist() for k, v in model.params.items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def load_checkpoint(path: str) -> GnnModel:
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    model = GnnModel(GnnConfig(**payload["config"]), payload["in_dim"],
                     payload["num_classes"])
    for k, vals in payload["params"].items():
        model.params[k].values = np.asarray(vals, dtype=np.float64)
    return model
