"""Non-padding hypergraph view of one forecasting instance.

Nodes are the lookback observations followed by one placeholder node per
forecast query.  Every node belongs to exactly one temporal hyperedge (its
timestamp) and one variable hyperedge (its variable).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np

from .data import SplitSample
from .tensor import ContractError


@dataclass(frozen=True, eq=False)
class Hypergraph:
    node_time: np.ndarray
    node_var: np.ndarray
    node_value: np.ndarray
    is_target: np.ndarray
    timestamps: np.ndarray
    U: int
    H_T: np.ndarray
    H_U: np.ndarray
    # derived lookups
    node_time_idx: np.ndarray
    variables: np.ndarray
    node_var_idx: np.ndarray
    query_nodes: np.ndarray
    n_lookback: int

    @property
    def M(self) -> int:
        return int(self.node_time.size)

    @property
    def T(self) -> int:
        return int(self.timestamps.size)

    @property
    def n_present(self) -> int:
        return int(self.variables.size)

    def to_dict(self, shared: "SharedIndex | None" = None) -> dict:
        """Debug dump with row-compressed incidence (one column index per node)."""
        out = {
            "M": self.M,
            "T": self.T,
            "U": self.U,
            "timestamps": self.timestamps.tolist(),
            "H_T": self.node_time_idx.tolist(),
            "H_U": self.node_var.tolist(),
            "is_target": self.is_target.astype(int).tolist(),
        }
        if shared is not None:
            out["shared_pairs"] = {
                f"{a},{b}": [list(p) for p in pairs] for (a, b), pairs in sorted(shared.pairs.items())
            }
        return out

    def to_json(self, shared: "SharedIndex | None" = None) -> str:
        return json.dumps(self.to_dict(shared), sort_keys=True)


def build(split: SplitSample) -> Hypergraph:
    if not split.lookback or not split.queries:
        raise ContractError("hypergraph needs at least one lookback observation and one query")
    look = sorted(split.lookback, key=lambda o: (o.t, o.u))
    q_order = sorted(range(len(split.queries)), key=lambda i: split.queries[i])
    queries = [split.queries[i] for i in q_order]

    n_look = len(look)
    M = n_look + len(queries)
    node_time = np.array([o.t for o in look] + [t for t, _ in queries], dtype=np.float64)
    node_var = np.array([o.u for o in look] + [u for _, u in queries], dtype=np.int64)
    node_value = np.array([o.z for o in look] + [0.0] * len(queries), dtype=np.float64)
    is_target = np.zeros(M, dtype=bool)
    is_target[n_look:] = True

    if node_var.min() < 0 or node_var.max() >= split.U:
        raise ContractError(f"variable index outside [0, {split.U})")

    timestamps, node_time_idx = np.unique(node_time, return_inverse=True)
    variables, node_var_idx = np.unique(node_var, return_inverse=True)
    H_T = np.zeros((M, timestamps.size))
    H_T[np.arange(M), node_time_idx] = 1.0
    H_U = np.zeros((M, split.U))
    H_U[np.arange(M), node_var] = 1.0

    # query_nodes[k] = node holding the k-th query in the caller's order
    query_nodes = np.empty(len(queries), dtype=np.int64)
    query_nodes[np.asarray(q_order, dtype=np.int64)] = n_look + np.arange(len(queries))

    return Hypergraph(
        node_time=node_time,
        node_var=node_var,
        node_value=node_value,
        is_target=is_target,
        timestamps=timestamps,
        U=split.U,
        H_T=H_T,
        H_U=H_U,
        node_time_idx=node_time_idx.astype(np.int64),
        variables=variables.astype(np.int64),
        node_var_idx=node_var_idx.astype(np.int64),
        query_nodes=query_nodes,
        n_lookback=n_look,
    )


@dataclass(frozen=True, eq=False)
class SharedIndex:
    """Timestamp-aligned lookback node pairs for every unordered variable pair.

    Keys are ``(a, b)`` with ``a <= b`` over the variables present in the
    hypergraph; the diagonal pairs each lookback node with itself.
    """

    variables: np.ndarray
    pairs: dict[tuple[int, int], list[tuple[int, int]]]
    t_shared: dict[tuple[int, int], int]
    t_total: dict[tuple[int, int], int]
    # flat arrays over all aligned pairs, local variable indices
    pair_a: np.ndarray
    pair_b: np.ndarray
    pair_la: np.ndarray
    pair_lb: np.ndarray

    def shared_matrix(self) -> np.ndarray:
        return self._sym(self.t_shared)

    def total_matrix(self) -> np.ndarray:
        return self._sym(self.t_total)

    def _sym(self, d: dict[tuple[int, int], int]) -> np.ndarray:
        pos = {int(v): i for i, v in enumerate(self.variables)}
        n = len(pos)
        out = np.zeros((n, n))
        for (a, b), c in d.items():
            out[pos[a], pos[b]] = out[pos[b], pos[a]] = c
        return out


def shared_index(graph: Hypergraph) -> SharedIndex:
    n = graph.n_lookback
    times = graph.node_time[:n]
    vars_ = graph.node_var[:n]

    by_time: dict[float, list[int]] = {}
    stamps: dict[int, set[float]] = {int(v): set() for v in graph.variables}
    for j in range(n):
        by_time.setdefault(float(times[j]), []).append(j)
        stamps[int(vars_[j])].add(float(times[j]))

    pairs: dict[tuple[int, int], list[tuple[int, int]]] = {
        (int(a), int(b)): [] for a, b in combinations_with_replacement(graph.variables, 2)
    }
    for t in sorted(by_time):
        members = by_time[t]  # ascending u within a timestamp
        for i_pos, i in enumerate(members):
            for j in members[i_pos:]:
                pairs[(int(vars_[i]), int(vars_[j]))].append((i, j))

    t_shared = {k: len(v) for k, v in pairs.items()}
    t_total = {(a, b): len(stamps[a] | stamps[b]) for a, b in pairs}

    local = {int(v): i for i, v in enumerate(graph.variables)}
    flat = [(i, j, local[a], local[b]) for (a, b), ps in pairs.items() for i, j in ps]
    arr = np.array(flat, dtype=np.int64).reshape(-1, 4)
    return SharedIndex(
        variables=graph.variables,
        pairs=pairs,
        t_shared=t_shared,
        t_total=t_total,
        pair_a=arr[:, 0],
        pair_b=arr[:, 1],
        pair_la=arr[:, 2],
        pair_lb=arr[:, 3],
    )
