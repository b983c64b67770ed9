"""Graph data model, dataset IO, normalization, splits, and corruption."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .tensor import ContractError


class DatasetParseError(ValueError):
    """A dataset file could not be parsed (message carries file:line)."""


class DatasetValidationError(ValueError):
    """Parsed data violates a graph invariant."""


@dataclass(eq=False)
class Graph:
    """Immutable-by-convention undirected graph with node features and masks.

    `edges` is a (E,2) int array with u < v, deduplicated, no self-loops.
    Labels are class ids in [0, num_classes) or -1 for unlabeled nodes.
    """

    x: np.ndarray
    edges: np.ndarray
    labels: np.ndarray
    num_classes: int
    train_mask: np.ndarray = field(default=None)
    val_mask: np.ndarray = field(default=None)
    test_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DatasetValidationError("feature matrix must be 2-D")
        n = self.x.shape[0]
        self.edges = _normalize_edges(self.edges, n)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (n,):
            raise DatasetValidationError("labels must be one per node")
        if self.labels.max(initial=-1) >= self.num_classes:
            raise DatasetValidationError(
                f"label {self.labels.max()} out of range for {self.num_classes} classes")
        if self.labels.min(initial=0) < -1:
            raise DatasetValidationError("labels must be >= -1")
        for name in ("train_mask", "val_mask", "test_mask"):
            m = getattr(self, name)
            m = np.zeros(n, dtype=bool) if m is None else np.asarray(m, dtype=bool)
            if m.shape != (n,):
                raise DatasetValidationError(f"{name} must have one entry per node")
            setattr(self, name, m)
        if ((self.train_mask & self.val_mask).any()
                or (self.train_mask & self.test_mask).any()
                or (self.val_mask & self.test_mask).any()):
            raise DatasetValidationError("train/val/test masks overlap")
        masked = self.train_mask | self.val_mask | self.test_mask
        if (self.labels[masked] < 0).any():
            raise DatasetValidationError("masked nodes must carry a label")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @cached_property
    def neighbor_index(self) -> tuple[np.ndarray, ...]:
        """Per-node sorted neighbor ids; symmetric by construction."""
        lists = [[] for _ in range(self.n)]
        for u, v in self.edges:
            lists[u].append(v)
            lists[v].append(u)
        return tuple(np.array(sorted(ns), dtype=np.int64) for ns in lists)

    def neighbors(self, i: int) -> np.ndarray:
        return self.neighbor_index[int(i)]

    @cached_property
    def normalized_adjacency(self) -> np.ndarray:
        """Symmetric GCN operator D^(-1/2) (A + I) D^(-1/2)."""
        a = np.eye(self.n)
        for u, v in self.edges:
            a[u, v] = a[v, u] = 1.0
        dinv = 1.0 / np.sqrt(a.sum(axis=1))
        return a * dinv[:, None] * dinv[None, :]

    @cached_property
    def mean_adjacency(self) -> np.ndarray:
        """Row-normalized adjacency without self-loops (neighbor mean operator)."""
        a = np.zeros((self.n, self.n))
        for u, v in self.edges:
            a[u, v] = a[v, u] = 1.0
        deg = a.sum(axis=1)
        deg[deg == 0] = 1.0
        return a / deg[:, None]

    @cached_property
    def self_loop_mask(self) -> np.ndarray:
        """Boolean A + I, the attention support used by GAT."""
        m = np.eye(self.n, dtype=bool)
        for u, v in self.edges:
            m[u, v] = m[v, u] = True
        return m


def _normalize_edges(edges, n: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if arr.size:
        if arr.min() < 0 or arr.max() >= n:
            raise DatasetValidationError(
                f"edge endpoint out of range (node count {n})")
        arr = arr[arr[:, 0] != arr[:, 1]]  # self-loops only exist inside normalization
        arr = np.sort(arr, axis=1)
        arr = np.unique(arr, axis=0)
    return arr.reshape(-1, 2)


def neighborhood(g: Graph, i: int) -> np.ndarray:
    return g.neighbors(i)


def normalized_adjacency(g: Graph) -> np.ndarray:
    return g.normalized_adjacency


def with_features(g: Graph, x: np.ndarray) -> Graph:
    """Same topology with different features; adjacency caches carry over."""
    out = replace(g, x=np.asarray(x, dtype=np.float64))
    for key in ("normalized_adjacency", "mean_adjacency", "self_loop_mask",
                "neighbor_index"):
        if key in g.__dict__:
            out.__dict__[key] = g.__dict__[key]
    return out


# ---------------------------------------------------------------------------
# loading / saving


def load_dataset(path: str, fmt: str | None = None) -> Graph:
    """Load an edge-list bundle directory or a single JSON bundle file."""
    if fmt is None:
        fmt = "json" if os.path.isfile(path) else "bundle"
    if fmt == "json":
        return _load_json(path)
    if fmt == "bundle":
        return _load_bundle(path)
    raise DatasetParseError(f"unknown dataset format {fmt!r}")


def save_dataset(g: Graph, path: str, fmt: str = "bundle"):
    if fmt == "json":
        payload = {
            "features": g.x.tolist(),
            "edges": g.edges.tolist(),
            "labels": g.labels.tolist(),
            "num_classes": g.num_classes,
            "train_idx": np.flatnonzero(g.train_mask).tolist(),
            "val_idx": np.flatnonzero(g.val_mask).tolist(),
            "test_idx": np.flatnonzero(g.test_mask).tolist(),
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f)
        return
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "edges.txt"), "w", encoding="utf-8") as f:
        for u, v in g.edges:
            f.write(f"{u} {v}\n")
    with open(os.path.join(path, "features.csv"), "w", encoding="utf-8") as f:
        for row in g.x:
            f.write(",".join(repr(float(x)) for x in row) + "\n")
    with open(os.path.join(path, "labels.txt"), "w", encoding="utf-8") as f:
        for y in g.labels:
            f.write(f"{y}\n")
    for name, mask in (("train", g.train_mask), ("val", g.val_mask),
                       ("test", g.test_mask)):
        if mask.any():
            with open(os.path.join(path, f"{name}.idx"), "w", encoding="utf-8") as f:
                for i in np.flatnonzero(mask):
                    f.write(f"{i}\n")


def _parse_lines(fname, parse):
    out = []
    with open(fname, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                out.append(parse(line))
            except ValueError as exc:
                raise DatasetParseError(f"{fname}:{lineno}: {exc}") from exc
    return out


def _load_bundle(path: str) -> Graph:
    feat_file = os.path.join(path, "features.csv")
    if not os.path.exists(feat_file):
        raise DatasetParseError(f"missing {feat_file}")
    feats = _parse_lines(
        feat_file,
        lambda s: [float(t) for t in s.replace(",", " ").split()])
    widths = {len(r) for r in feats}
    if len(widths) > 1:
        raise DatasetParseError(f"{feat_file}: inconsistent feature widths {sorted(widths)}")
    x = np.array(feats, dtype=np.float64)

    def parse_edge(s):
        parts = s.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"expected 'src dst', got {s!r}")
        return int(parts[0]), int(parts[1])

    edges = _parse_lines(os.path.join(path, "edges.txt"), parse_edge)
    labels = _parse_lines(os.path.join(path, "labels.txt"), int)
    if len(labels) != x.shape[0]:
        raise DatasetValidationError(
            f"{len(labels)} labels for {x.shape[0]} nodes")
    labels = np.array(labels, dtype=np.int64)
    num_classes = _infer_classes(labels)

    masks = {}
    for name in ("train", "val", "test"):
        fname = os.path.join(path, f"{name}.idx")
        if os.path.exists(fname):
            idx = _parse_lines(fname, int)
            m = np.zeros(x.shape[0], dtype=bool)
            m[np.asarray(idx, dtype=np.int64)] = True
            masks[f"{name}_mask"] = m
    return Graph(x=x, edges=np.array(edges, dtype=np.int64).reshape(-1, 2),
                 labels=labels, num_classes=num_classes, **masks)


def _load_json(path: str) -> Graph:
    with open(path, encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    try:
        x = np.asarray(payload["features"], dtype=np.float64)
        edges = np.asarray(payload.get("edges", []), dtype=np.int64)
        labels = np.asarray(payload["labels"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(f"{path}: {exc}") from exc
    num_classes = int(payload.get("num_classes", 0)) or _infer_classes(labels)
    masks = {}
    for name in ("train", "val", "test"):
        if f"{name}_idx" in payload:
            m = np.zeros(x.shape[0], dtype=bool)
            m[np.asarray(payload[f"{name}_idx"], dtype=np.int64)] = True
            masks[f"{name}_mask"] = m
    return Graph(x=x, edges=edges, labels=labels, num_classes=num_classes, **masks)


def _infer_classes(labels: np.ndarray) -> int:
    present = np.unique(labels[labels >= 0])
    if present.size == 0:
        raise DatasetValidationError("dataset has no labeled nodes")
    c = int(present.max()) + 1
    if present.size != c:
        missing = sorted(set(range(c)) - set(present.tolist()))
        raise DatasetValidationError(f"label ids not contiguous; missing {missing}")
    return c


# ---------------------------------------------------------------------------
# splits and corruption


def split_masks(g: Graph, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> Graph:
    """Per-class stratified train/val/test split, deterministic for a seed."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"split ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    parts = sum(1 for r in ratios if r > 0)
    train = np.zeros(g.n, dtype=bool)
    val = np.zeros(g.n, dtype=bool)
    test = np.zeros(g.n, dtype=bool)
    for c in range(g.num_classes):
        ids = np.flatnonzero(g.labels == c)
        if ids.size < parts:
            raise DatasetValidationError(
                f"class {c} has {ids.size} nodes, fewer than {parts} split parts")
        ids = rng.permutation(ids)
        n_tr = int(np.floor(ratios[0] * ids.size))
        n_va = int(np.floor(ratios[1] * ids.size))
        train[ids[:n_tr]] = True
        val[ids[n_tr:n_tr + n_va]] = True
        test[ids[n_tr + n_va:]] = True
    return replace(g, train_mask=train, val_mask=val, test_mask=test)


def corrupt_features(g: Graph, seed, rows: np.ndarray | None = None) -> Graph:
    """Permute feature rows (optionally only `rows`); edges and labels unchanged."""
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.default_rng(np.random.SeedSequence(seed))
    perm = np.arange(g.n)
    target = np.arange(g.n) if rows is None else np.asarray(rows, dtype=np.int64)
    perm[target] = rng.permutation(target)
    return with_features(g, g.x[perm])


def drop_edge(g: Graph, rate: float, seed) -> Graph:
    """Remove floor(rate * |E|) edges uniformly at random."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"drop rate must be in [0,1), got {rate}")
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.default_rng(np.random.SeedSequence(seed))
    k = int(np.floor(rate * len(g.edges)))
    if k == 0:
        return g
    keep = np.ones(len(g.edges), dtype=bool)
    keep[rng.choice(len(g.edges), size=k, replace=False)] = False
    return replace(g, edges=g.edges[keep])


def drop_node(g: Graph, rate: float, seed) -> Graph:
    """Zero floor(rate * N) nodes' features and detach them; ids stay stable."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"drop rate must be in [0,1), got {rate}")
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.default_rng(np.random.SeedSequence(seed))
    k = int(np.floor(rate * g.n))
    if k == 0:
        return g
    dropped = rng.choice(g.n, size=k, replace=False)
    hit = np.zeros(g.n, dtype=bool)
    hit[dropped] = True
    x = g.x.copy()
    x[dropped] = 0.0
    keep = ~(hit[g.edges[:, 0]] | hit[g.edges[:, 1]])
    return replace(g, x=x, edges=g.edges[keep])
