"""Batch engine for free-direction exchange among K >= 2 networks.

The two-network procedure is the K=2 case of this engine, so pair training
and cohort training share one code path exactly. Pairs are iterated in fixed
(i, j), i < j order; each model is updated once per batch with its loss
accumulated across all of its pairs, and policy updates pool the rewards of
every pair in the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import distill, tensor as T
from .agent import BatchRecord, HierarchicalAgent, compute_rewards, heuristic_direction
from .gnn import GnnModel, cross_entropy, forward
from .graph import Graph
from .tensor import ContractError, Optimizer, Tensor

JUDGES = ("agent", "none", "loss")
NEIGHBORHOODS = ("agent", "all")
GATES = ("agent", "always")


@dataclass
class TrainHyper:
    mu: float = 1.0
    rho: float = 1.0
    gamma: float = 0.3
    batch_size: int = 512
    judge: str = "agent"
    neighborhoods: str = "agent"
    structure_gate: str = "agent"
    exchange: bool = True
    normalize_kd: bool = True

    def __post_init__(self):
        if self.judge not in JUDGES:
            raise ContractError(f"judge must be one of {JUDGES}")
        if self.neighborhoods not in NEIGHBORHOODS:
            raise ContractError(f"neighborhoods must be one of {NEIGHBORHOODS}")
        if self.structure_gate not in GATES:
            raise ContractError(f"structure_gate must be one of {GATES}")


@dataclass
class Cohort:
    models: list[GnnModel]
    agent: HierarchicalAgent | None = None
    prompts: list | None = None


@dataclass
class RunState:
    """Mutable per-run training state owned by the experiment runner."""
    optimizers: list[Optimizer]
    model_rngs: list[np.random.Generator]
    batch_rng: np.random.Generator


@dataclass
class EpochResult:
    train_ce: list[float]
    kd_node: list[float]
    kd_struct: list[float]
    mean_reward: float = 0.0
    action0_frac: float = 0.0
    pair_exchanges: int = 0
    num_batches: int = 0


@dataclass
class _PairOutcome:
    loss_i: list = field(default_factory=list)
    loss_j: list = field(default_factory=list)
    record: BatchRecord | None = None
    node_i: float = 0.0
    node_j: float = 0.0
    struct_i: float = 0.0
    struct_j: float = 0.0
    a1: np.ndarray | None = None


def train_cohort_epoch(cohort: Cohort, g: Graph, hyper: TrainHyper,
                       state: RunState) -> EpochResult:
    models = cohort.models
    k = len(models)
    if hyper.exchange and k < 2:
        raise ContractError("knowledge exchange needs at least 2 networks")
    if hyper.exchange and hyper.judge == "agent" and cohort.agent is None:
        raise ContractError("judge='agent' needs an agent")

    train_ids = np.flatnonzero(g.train_mask)
    order = state.batch_rng.permutation(train_ids)
    batches = [order[s:s + hyper.batch_size]
               for s in range(0, len(order), hyper.batch_size)]
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]

    sum_ce = np.zeros(k)
    sum_node = np.zeros(k)
    sum_struct = np.zeros(k)
    rewards_seen: list[float] = []
    a1_zero = a1_total = 0

    for batch in batches:
        outs = [forward(m, g, training=True, rng=state.model_rngs[i])
                for i, m in enumerate(models)]
        ces = [cross_entropy(o.probs, g.labels, g.train_mask) for o in outs]
        losses: list[Tensor] = [ces[i][0] for i in range(k)]
        for i in range(k):
            sum_ce[i] += losses[i].item()

        pooled: list[tuple[BatchRecord, np.ndarray]] = []
        if hyper.exchange:
            norm = 1.0 / len(batch) if hyper.normalize_kd else 1.0
            for (i, j) in pairs:
                out = _pair_exchange(models, outs, ces, i, j, batch, g, hyper,
                                     cohort.agent)
                for term in out.loss_i:
                    losses[i] = losses[i] + T.scale(term, norm)
                for term in out.loss_j:
                    losses[j] = losses[j] + T.scale(term, norm)
                sum_node[i] += out.node_i * norm
                sum_node[j] += out.node_j * norm
                sum_struct[i] += out.struct_i * norm
                sum_struct[j] += out.struct_j * norm
                if out.a1 is not None:
                    a1_zero += int((out.a1 == 0).sum())
                    a1_total += out.a1.size
                if out.record is not None:
                    cohort.agent.buffer.store(out.record)

        for i, model in enumerate(models):
            state.optimizers[i].zero_grad()
            T.backward(losses[i])
            state.optimizers[i].step()

        if hyper.exchange and hyper.judge == "agent":
            evals = [forward(m, g, training=False) for m in models]
            eval_ce = [cross_entropy(o.probs, g.labels, g.train_mask)[1].values
                       for o in evals]
            records = cohort.agent.buffer.drain()
            for (i, j), record in zip(pairs, records):
                rw = compute_rewards(eval_ce[i], eval_ce[j], batch, g,
                                     hyper.gamma)
                pooled.append((record, rw))
                rewards_seen.extend(rw.tolist())
            cohort.agent.update_policies(pooled)

    if hyper.exchange and hyper.judge == "agent":
        cohort.agent.end_epoch()

    nb = max(len(batches), 1)
    return EpochResult(
        train_ce=(sum_ce / nb).tolist(),
        kd_node=(sum_node / nb).tolist(),
        kd_struct=(sum_struct / nb).tolist(),
        mean_reward=float(np.mean(rewards_seen)) if rewards_seen else 0.0,
        action0_frac=a1_zero / a1_total if a1_total else 0.0,
        pair_exchanges=len(pairs) if hyper.exchange else 0,
        num_batches=len(batches),
    )


def _pair_exchange(models, outs, ces, i, j, batch, g, hyper, agent) -> _PairOutcome:
    """Exchange between models i and j on one batch; both directions at once."""
    out = _PairOutcome()
    probs_i, probs_j = outs[i].probs, outs[j].probs
    emb_i, emb_j = outs[i].embeddings, outs[j].embeddings
    ce_i, ce_j = ces[i][1].values, ces[j][1].values

    if hyper.judge == "none":
        # every node teaches in both directions; full neighborhoods, no gate
        node_j = distill._node_direction(probs_i, probs_j, batch)
        node_i = distill._node_direction(probs_j, probs_i, batch)
        m_all, _ = distill.full_neighborhoods(g, batch, None, restrict=batch)
        ones = np.ones(len(batch), dtype=np.int64)
        struct_i_t, struct_j_t = distill.struct_kd_losses(
            emb_i, emb_j, m_all, m_all, batch, np.zeros_like(ones), ones)
        struct_i_f, struct_j_f = distill.struct_kd_losses(
            emb_i, emb_j, m_all, m_all, batch, ones, ones)
        struct_i = struct_i_t + struct_i_f
        struct_j = struct_j_t + struct_j_f
        _collect(out, hyper, node_i, node_j, struct_i, struct_j)
        return out

    states1 = distill.build_node_states(probs_i.values, ce_i,
                                        probs_j.values, ce_j, batch)
    if hyper.judge == "loss":
        a1 = heuristic_direction(ce_i.reshape(-1)[batch], ce_j.reshape(-1)[batch])
        logp1 = None
    else:
        a1, logp1 = agent.sample_node_actions(states1)
    out.a1 = a1

    if hyper.neighborhoods == "all":
        m_i, m_j = distill.full_neighborhoods(g, batch, a1)
    else:
        m_i, m_j = distill.agent_selected_neighborhoods(g, batch, a1)

    states2 = a2 = logp2 = None
    if hyper.structure_gate == "always" or hyper.judge == "loss":
        a2 = np.ones(len(batch), dtype=np.int64)
    else:
        states2 = distill.build_struct_states(
            states1, emb_i.values, emb_j.values, m_i, m_j, batch, a1)
        a2, logp2 = agent.sample_struct_actions(states2)

    node_i, node_j = distill.node_kd_losses(probs_i, probs_j, batch, a1)
    struct_i, struct_j = distill.struct_kd_losses(
        emb_i, emb_j, m_i, m_j, batch, a1, a2)
    _collect(out, hyper, node_i, node_j, struct_i, struct_j)

    if hyper.judge == "agent":
        out.record = BatchRecord(nodes=np.asarray(batch, dtype=np.int64),
                                 node_states=states1, a1=a1, logp1=logp1,
                                 struct_states=states2, a2=a2, logp2=logp2)
    return out


def _collect(out: _PairOutcome, hyper: TrainHyper, node_i, node_j,
             struct_i, struct_j):
    out.node_i, out.node_j = node_i.item(), node_j.item()
    out.struct_i, out.struct_j = struct_i.item(), struct_j.item()
    if hyper.mu:
        out.loss_i.append(T.scale(node_i, hyper.mu))
        out.loss_j.append(T.scale(node_j, hyper.mu))
    if hyper.rho:
        out.loss_i.append(T.scale(struct_i, hyper.rho))
        out.loss_j.append(T.scale(struct_j, hyper.rho))
