"""Reinforced knowledge judge: two policy MLPs trained by REINFORCE.

The node-level policy picks the transfer direction per node, the
structure-level policy gates local-structure transfer. Rewards are delayed
(computed after the networks update) and a per-node previous-epoch baseline
reduces gradient variance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import Graph
from .tensor import ContractError, Optimizer, Tensor

POLICY_HIDDEN = (64, 32)
POLICY_LR = 0.01


class PolicyNet:
    """3-layer tanh MLP producing a 2-way action distribution."""

    def __init__(self, in_dim: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA6E)))
        dims = [in_dim, *POLICY_HIDDEN, 2]
        self.in_dim = in_dim
        self.params: dict[str, Tensor] = {}
        for l in range(3):
            bound = np.sqrt(6.0 / (dims[l] + dims[l + 1]))
            self.params[f"w{l}"] = Tensor.param(
                rng.uniform(-bound, bound, size=(dims[l], dims[l + 1])))
            self.params[f"b{l}"] = Tensor.param(np.zeros((1, dims[l + 1])))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def logits(self, states) -> Tensor:
        h = states if isinstance(states, Tensor) else Tensor.const(states)
        if h.shape[1] != self.in_dim:
            raise ContractError(
                f"policy expects state dim {self.in_dim}, got {h.shape[1]}")
        for l in range(3):
            h = T.matmul(h, self.params[f"w{l}"]) + self.params[f"b{l}"]
            if l < 2:
                h = T.tanh(h)
        return h

    def action_probs(self, states) -> np.ndarray:
        return T.row_softmax(self.logits(states)).values


def sample_actions(policy: PolicyNet, states: np.ndarray,
                   rng: np.random.Generator):
    """Sample one action per state row; log-probs stay on the tape."""
    logits = policy.logits(states)
    logp_full = T.row_log_softmax(logits)
    p0 = np.exp(logp_full.values[:, 0])
    actions = (rng.random(len(p0)) >= p0).astype(np.int64)
    onehot = np.zeros_like(logp_full.values)
    onehot[np.arange(len(actions)), actions] = 1.0
    logp = T.row_sum(T.mul(logp_full, Tensor.const(onehot)))
    return actions, logp


def heuristic_direction(ce_a: np.ndarray, ce_b: np.ndarray) -> np.ndarray:
    """Loss-only direction rule: a teaches wherever its CE is not worse."""
    ce_a = np.asarray(ce_a).reshape(-1)
    ce_b = np.asarray(ce_b).reshape(-1)
    return (ce_a > ce_b).astype(np.int64)


def compute_rewards(ce_a_new: np.ndarray, ce_b_new: np.ndarray,
                    batch: np.ndarray, g: Graph, gamma: float) -> np.ndarray:
    """Delayed reward per batch node from post-update cross entropies.

    The neighbor term averages over training-set neighbors only and is 0
    when a node has none.
    """
    ce = np.asarray(ce_a_new).reshape(-1) + np.asarray(ce_b_new).reshape(-1)
    batch = np.asarray(batch, dtype=np.int64)
    batch_term = -ce[batch].mean()
    rewards = np.full(batch.size, batch_term)
    train = g.train_mask
    for pos, i in enumerate(batch):
        ns = g.neighbors(int(i))
        ns = ns[train[ns]] if ns.size else ns
        if ns.size:
            rewards[pos] -= gamma * ce[ns].mean()
    return rewards


@dataclass
class BatchRecord:
    """States, actions, and tape-linked log-probs for one sampled batch."""
    nodes: np.ndarray
    node_states: np.ndarray
    a1: np.ndarray
    logp1: Tensor
    struct_states: np.ndarray | None = None
    a2: np.ndarray | None = None
    logp2: Tensor | None = None


@dataclass
class HistoryBuffer:
    records: list = field(default_factory=list)

    def store(self, record: BatchRecord):
        self.records.append(record)

    def drain(self) -> list:
        out, self.records = self.records, []
        return out

    def __len__(self):
        return len(self.records)


class BaselineStore:
    """b_i = previous-epoch reward at node i; unseen nodes get the epoch mean."""

    def __init__(self):
        self._values: dict[int, float] = {}
        self._default = 0.0
        self._epoch_rewards: list[float] = []

    def get(self, i: int) -> float:
        return self._values.get(int(i), self._default)

    def record(self, nodes: np.ndarray, rewards: np.ndarray):
        for i, r in zip(nodes, rewards):
            self._values[int(i)] = float(r)
        self._epoch_rewards.extend(float(r) for r in rewards)

    def end_epoch(self):
        if self._epoch_rewards:
            self._default = float(np.mean(self._epoch_rewards))
        self._epoch_rewards = []


class HierarchicalAgent:
    """Owns both policies, their optimizer, the history buffer and baselines."""

    def __init__(self, num_classes: int, seed: int = 0, lr: float = POLICY_LR):
        self.num_classes = num_classes
        self.pi_node = PolicyNet(2 * num_classes + 2, seed=seed)
        self.pi_struct = PolicyNet(2 * num_classes + 4, seed=seed + 1)
        self.optimizer = Optimizer(
            self.pi_node.parameters() + self.pi_struct.parameters(),
            lr=lr, kind="adam", weight_decay=0.0)
        self.rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5A11)))
        self.buffer = HistoryBuffer()
        self.baselines = BaselineStore()

    def sample_node_actions(self, states: np.ndarray):
        return sample_actions(self.pi_node, states, self.rng)

    def sample_struct_actions(self, states: np.ndarray):
        return sample_actions(self.pi_struct, states, self.rng)

    def update_policies(self, batches: list[tuple[BatchRecord, np.ndarray]]):
        """Ascend the REINFORCE surrogate over pooled (record, rewards) pairs.

        Returns the mean reward seen. Baselines roll forward to the rewards
        just received and the buffer entries are consumed by the caller.
        """
        total = 0
        surrogate = Tensor.const([[0.0]])
        all_rewards = []
        for record, rewards in batches:
            if len(rewards) != len(record.nodes):
                raise ContractError("rewards misaligned with history buffer")
            adv = np.array([r - self.baselines.get(i)
                            for i, r in zip(record.nodes, rewards)])
            joint = record.logp1
            if record.logp2 is not None:
                joint = joint + record.logp2
            term = T.sum_all(T.mul(Tensor.const(adv.reshape(-1, 1)), joint))
            surrogate = surrogate + term
            total += len(rewards)
            all_rewards.append(rewards)
            self.baselines.record(record.nodes, rewards)
        if total == 0:
            return 0.0
        loss = T.scale(surrogate, -1.0 / total)
        self.optimizer.zero_grad()
        T.backward(loss)
        self.optimizer.step()
        return float(np.concatenate(all_rewards).mean())

    def end_epoch(self):
        self.baselines.end_epoch()
