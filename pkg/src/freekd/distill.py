"""State construction and the four distillation losses exchanged by a pair.

Direction conventions for a pair (a, b): action 0 means network `a` teaches
node i to network `b`; action 1 is the reverse. Teacher-side distributions
are always detached so each network's loss reaches only its own parameters.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .graph import Graph
from .tensor import ContractError, Tensor

PROB_EPS = 1e-12
STATE_CE_CLAMP = 20.0


def kl_to_student(teacher_probs: np.ndarray, student_log_probs: Tensor,
                  weights: np.ndarray) -> Tensor:
    """Sum_i w_i * KL(t_i || s_i) with the teacher rows held constant."""
    t = np.maximum(teacher_probs, PROB_EPS)
    entropy = float((weights.reshape(-1) * (t * np.log(t)).sum(axis=1)).sum())
    w = Tensor.const(weights.reshape(-1, 1))
    cross = T.sum_all(T.mul(w, T.row_sum(T.mul(Tensor.const(t), student_log_probs))))
    return T.scale(cross, -1.0) + Tensor.const([[entropy]])


def build_node_states(probs_a: np.ndarray, ce_a: np.ndarray,
                      probs_b: np.ndarray, ce_b: np.ndarray,
                      batch: np.ndarray) -> np.ndarray:
    """Per-node policy input: concat(p_i^a, ce_a(i), p_i^b, ce_b(i)).

    CE entries are clamped to [0, 20] to keep tanh policies out of saturation.
    """
    batch = np.asarray(batch, dtype=np.int64)
    ca = np.clip(np.asarray(ce_a).reshape(-1)[batch], 0.0, STATE_CE_CLAMP)
    cb = np.clip(np.asarray(ce_b).reshape(-1)[batch], 0.0, STATE_CE_CLAMP)
    return np.hstack([probs_a[batch], ca[:, None], probs_b[batch], cb[:, None]])


def agent_selected_neighborhoods(g: Graph, batch: np.ndarray, a1: np.ndarray):
    """Teacher-side neighbor sets per batch node.

    m_a[i] = {v in N(i): a_i = 0, a_v = 0}, m_b[i] the action-1 mirror.
    Nodes outside the batch carry no action and never enter a set.
    """
    batch = np.asarray(batch, dtype=np.int64)
    action = {int(i): int(a) for i, a in zip(batch, a1)}
    m_a: dict[int, np.ndarray] = {}
    m_b: dict[int, np.ndarray] = {}
    for i in batch:
        i = int(i)
        want = action[i]
        members = [int(v) for v in g.neighbors(i) if action.get(int(v)) == want]
        chosen = np.array(members, dtype=np.int64)
        if want == 0:
            m_a[i], m_b[i] = chosen, np.empty(0, dtype=np.int64)
        else:
            m_a[i], m_b[i] = np.empty(0, dtype=np.int64), chosen
    return m_a, m_b


def full_neighborhoods(g: Graph, batch: np.ndarray, a1: np.ndarray | None,
                       restrict: np.ndarray | None = None):
    """Ablation sets: full N(i), optionally restricted, directed by a1 if given."""
    batch = np.asarray(batch, dtype=np.int64)
    allowed = None if restrict is None else set(int(v) for v in restrict)
    m_a: dict[int, np.ndarray] = {}
    m_b: dict[int, np.ndarray] = {}
    empty = np.empty(0, dtype=np.int64)
    for pos, i in enumerate(batch):
        i = int(i)
        ns = g.neighbors(i)
        if allowed is not None:
            ns = np.array([v for v in ns if int(v) in allowed], dtype=np.int64)
        if a1 is None:
            m_a[i] = m_b[i] = ns
        elif a1[pos] == 0:
            m_a[i], m_b[i] = ns, empty
        else:
            m_a[i], m_b[i] = empty, ns
    return m_a, m_b


def center_similarity(emb_a: np.ndarray, emb_b: np.ndarray,
                      m_a: dict, m_b: dict, a1_i: int, i: int) -> np.ndarray:
    """2-dim (distilled-side, guided-side) mean cosine to the selected set."""
    members = m_a[i] if a1_i == 0 else m_b[i]
    if members.size == 0:
        return np.zeros(2)
    first, second = (emb_a, emb_b) if a1_i == 0 else (emb_b, emb_a)
    u1 = _mean_cos(first[i], first[members])
    u2 = _mean_cos(second[i], second[members])
    return np.array([u1, u2])


def _mean_cos(center: np.ndarray, rows: np.ndarray) -> float:
    nc = np.linalg.norm(center)
    nr = np.linalg.norm(rows, axis=1)
    denom = nc * nr
    out = np.where(denom > 0, rows @ center / np.where(denom > 0, denom, 1.0), 0.0)
    return float(out.mean())


def build_struct_states(node_states: np.ndarray, emb_a: np.ndarray,
                        emb_b: np.ndarray, m_a: dict, m_b: dict,
                        batch: np.ndarray, a1: np.ndarray) -> np.ndarray:
    u = np.stack([
        center_similarity(emb_a, emb_b, m_a, m_b, int(a1[pos]), int(i))
        for pos, i in enumerate(batch)
    ])
    return np.hstack([node_states, u])


def node_kd_losses(probs_a: Tensor, probs_b: Tensor, batch: np.ndarray,
                   a1: np.ndarray):
    """Soft-label exchange: returns (loss for a, loss for b), raw batch sums."""
    batch = np.asarray(batch, dtype=np.int64)
    a1 = np.asarray(a1)
    loss_b = _node_direction(probs_a, probs_b, batch[a1 == 0])
    loss_a = _node_direction(probs_b, probs_a, batch[a1 == 1])
    return loss_a, loss_b


def _node_direction(teacher: Tensor, student: Tensor, rows: np.ndarray) -> Tensor:
    if rows.size == 0:
        return Tensor.const([[0.0]])
    t = teacher.values[rows]
    s_logp = T.clamped_log(T.take_rows(student, rows), PROB_EPS)
    return kl_to_student(t, s_logp, np.ones(rows.size))


def structure_similarities(emb: Tensor, i: int, members: np.ndarray) -> Tensor:
    """Softmax-normalized cosine profile of node i over `members` (sorted ids)."""
    members = np.sort(np.asarray(members, dtype=np.int64))
    if members.size == 0:
        raise ContractError("structure similarities need a non-empty set")
    center = T.take_rows(emb, np.array([i]))
    rows = T.take_rows(emb, members)
    cos = T.transpose(T.rowwise_cosine(center, rows))
    return T.row_softmax(cos)


def _struct_log_profile(emb: Tensor, i: int, members: np.ndarray) -> Tensor:
    center = T.take_rows(emb, np.array([i]))
    rows = T.take_rows(emb, members)
    return T.row_log_softmax(T.transpose(T.rowwise_cosine(center, rows)))


def struct_kd_losses(emb_a: Tensor, emb_b: Tensor, m_a: dict, m_b: dict,
                     batch: np.ndarray, a1: np.ndarray, a2: np.ndarray):
    """Local-structure exchange; per node, teacher and student profiles are
    built over the SAME teacher-selected set. Sets smaller than 2 contribute
    an exact zero and are skipped."""
    loss_a = Tensor.const([[0.0]])
    loss_b = Tensor.const([[0.0]])
    for pos, i in enumerate(np.asarray(batch, dtype=np.int64)):
        i = int(i)
        if a2[pos] != 1:
            continue
        if a1[pos] == 0:
            members = np.sort(m_a[i])
            if members.size < 2:
                continue
            teacher = structure_similarities(emb_a, i, members).detach().values
            student = _struct_log_profile(emb_b, i, members)
            loss_b = loss_b + kl_to_student(teacher, student, np.ones(1))
        else:
            members = np.sort(m_b[i])
            if members.size < 2:
                continue
            teacher = structure_similarities(emb_b, i, members).detach().values
            student = _struct_log_profile(emb_a, i, members)
            loss_a = loss_a + kl_to_student(teacher, student, np.ones(1))
    return loss_a, loss_b


def assemble_losses(ce_a: Tensor, ce_b: Tensor, node_a: Tensor, node_b: Tensor,
                    struct_a: Tensor, struct_b: Tensor, mu: float, rho: float):
    """Overall per-network losses and their sum."""
    if mu < 0 or rho < 0:
        raise ContractError("trade-off weights must be >= 0")
    loss_a = ce_a + T.scale(node_a, mu) + T.scale(struct_a, rho)
    loss_b = ce_b + T.scale(node_b, mu) + T.scale(struct_b, rho)
    return loss_a, loss_b, loss_a + loss_b


def train_pair_epoch(model_a, model_b, g, agent, hyper, state):
    """One epoch of two-network exchange; the K-network engine with K=2."""
    from .multi import Cohort, train_cohort_epoch

    cohort = Cohort(models=[model_a, model_b], agent=agent)
    return train_cohort_epoch(cohort, g, hyper, state)
