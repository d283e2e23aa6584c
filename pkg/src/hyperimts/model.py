"""HyperIMTS forward pass on the hypergraph view of one forecasting instance.

Stages per residual layer:

1. node -> hyperedge: temporal and variable hyperedges attend over their
   member nodes (multi-head, membership masked).
2. hyperedge -> hyperedge (last layer only): variable hyperedges exchange
   messages through an attention map that blends whole-series similarity with
   similarity over timestamp-aligned observations.
3. hyperedge -> node: node self-attention plus the hyperedge context of each
   node, with a residual connection.

Predictions are decoded from the query placeholder nodes.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as tt
from .data import SplitSample
from .hypergraph import Hypergraph, SharedIndex, build, shared_index
from .tensor import Tensor

ABLATIONS = ("complete", "rp_TE", "wo_TE", "rp_IAVD", "wo_IAVD", "wo_VE")

CHECKPOINT_MAGIC = b"HIMTSCKP"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    p_obs: int = 32
    p_time: int = 32
    p_var: int = 32
    heads: int = 2
    layers: int = 2
    delta_init: float = 0.5
    time_scale: float | None = None  # None: max lookback timestamp of each sample
    ablation: str = "complete"
    seed: int = 0
    mask_attention: bool = True
    query_residual: bool = True
    alpha_zero: bool = False

    def __post_init__(self):
        if min(self.p_obs, self.p_time, self.p_var) <= 0:
            raise ConfigError("embedding widths must be positive")
        if self.heads < 1 or self.layers < 1:
            raise ConfigError("heads and layers must be >= 1")
        for name in ("p_obs", "p_time", "p_var"):
            if getattr(self, name) % self.heads:
                raise ConfigError(f"{name}={getattr(self, name)} is not divisible by heads={self.heads}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.time_scale is not None and not self.time_scale > 0:
            raise ConfigError("time_scale must be positive")
        if not math.isfinite(self.delta_init):
            raise ConfigError("delta_init must be finite")

    @property
    def use_var(self) -> bool:
        return self.ablation != "wo_VE"

    @property
    def use_time(self) -> bool:
        return self.ablation != "wo_TE"

    @property
    def use_iavd(self) -> bool:
        return self.use_var and self.ablation != "wo_IAVD"

    @property
    def force_alpha_zero(self) -> bool:
        return self.alpha_zero or self.ablation == "rp_IAVD"

    def replace(self, **kw) -> "ModelConfig":
        d = asdict(self)
        d.update(kw)
        return ModelConfig(**d)


# ---------------------------------------------------------------- parameters


def _param_specs(config: ModelConfig, U: int) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) in the fixed order used for seeded initialization."""
    specs: list[tuple[str, tuple[int, ...], str]] = []

    def lin(name, n_in, n_out):
        specs.append((f"{name}.weight", (n_in, n_out), f"uniform:{n_in}"))
        specs.append((f"{name}.bias", (n_out,), f"uniform:{n_in}"))

    c = config
    lin("obs", 1, c.p_obs)
    if c.use_time:
        lin("time", 1, c.p_time)
    if c.use_var:
        specs.append(("var.weight", (U, c.p_var), "normal"))
    key_t = c.p_obs + (c.p_var if c.use_var else 0)
    key_v = c.p_obs + (c.p_time if c.use_time else 0)
    ctx = c.p_obs + (c.p_time if c.use_time else 0) + (c.p_var if c.use_var else 0)
    for l in range(c.layers):
        p = f"layer{l}"
        if c.use_time:
            lin(f"{p}.time_q", c.p_time, c.p_time)
            lin(f"{p}.time_k", key_t, c.p_time)
            lin(f"{p}.time_v", key_t, c.p_time)
            lin(f"{p}.time_o", c.p_time, c.p_time)
        if c.use_var:
            lin(f"{p}.var_q", c.p_var, c.p_var)
            lin(f"{p}.var_k", key_v, c.p_var)
            lin(f"{p}.var_v", key_v, c.p_var)
            lin(f"{p}.var_o", c.p_var, c.p_var)
        lin(f"{p}.self_q", c.p_obs, c.p_obs)
        lin(f"{p}.self_k", c.p_obs, c.p_obs)
        lin(f"{p}.self_v", c.p_obs, c.p_obs)
        lin(f"{p}.node", ctx, c.p_obs)
        if l == c.layers - 1 and c.use_iavd:
            lin(f"{p}.sim_q", c.p_var, c.p_var)
            lin(f"{p}.sim_k", c.p_var, c.p_var)
            lin(f"{p}.edge_v", c.p_var, c.p_var)
    if c.use_iavd:
        specs.append(("delta", (), "delta"))
    lin("out", ctx, 1)
    return specs


class ModelParams:
    """Named learnable tensors of one model instance."""

    def __init__(self, config: ModelConfig, U: int, tensors: dict[str, Tensor]):
        self.config = config
        self.U = U
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, U: int, seed: int | None = None) -> "ModelParams":
        if U < 1:
            raise ConfigError("U must be >= 1")
        rng = np.random.default_rng(config.seed if seed is None else seed)
        tensors: dict[str, Tensor] = {}
        for name, shape, init in _param_specs(config, U):
            if init == "normal":
                data = rng.normal(size=shape)
            elif init == "delta":
                data = np.array(config.delta_init)
            else:
                bound = 1.0 / math.sqrt(int(init.split(":")[1]))
                data = rng.uniform(-bound, bound, size=shape)
            frozen = config.ablation == "rp_TE" and name.startswith("time.")
            tensors[name] = Tensor(data, requires_grad=not frozen, name=name)
        return cls(config, U, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        tt.zero_grad(self.tensors.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            t.data[...] = state[k]

    def linear(self, x: Tensor, name: str) -> Tensor:
        return tt.linear(x, self.tensors[f"{name}.weight"], self.tensors[f"{name}.bias"])

    # checkpoint file: magic, version, header length, JSON header, raw little-endian float64
    def save(self, path: str | Path) -> None:
        header = {
            "config": asdict(self.config),
            "U": self.U,
            "params": [[k, list(t.shape)] for k, t in self.tensors.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with Path(path).open("wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
            fh.write(blob)
            for t in self.tensors.values():
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path, config: ModelConfig | None = None) -> "ModelParams":
        raw = Path(path).read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        version, n = struct.unpack_from("<IQ", raw, 8)
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        off = 8 + struct.calcsize("<IQ")
        header = json.loads(raw[off : off + n])
        off += n
        stored = ModelConfig(**header["config"])
        if config is not None and _structural(config) != _structural(stored):
            raise ConfigError(f"checkpoint config {asdict(stored)} does not match {asdict(config)}")
        params = cls.init(stored, header["U"])
        for name, shape in header["params"]:
            size = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
            params.tensors[name].data[...] = arr
            off += 8 * size
        return params


def _structural(c: ModelConfig) -> tuple:
    # seed only affects initialization, never the meaning of stored weights
    return tuple(getattr(c, f.name) for f in fields(c) if f.name != "seed")


# ---------------------------------------------------------------- embeddings


@dataclass(frozen=True, eq=False)
class Instance:
    split: SplitSample
    graph: Hypergraph
    shared: SharedIndex
    targets: np.ndarray

    @classmethod
    def from_split(cls, split: SplitSample) -> "Instance":
        g = build(split)
        return cls(split=split, graph=g, shared=shared_index(g), targets=np.asarray(split.targets, dtype=np.float64))


@dataclass
class EmbeddingState:
    V: Tensor
    E_time: Tensor | None
    E_var: Tensor | None
    E_time_1: Tensor | None = None
    E_var_1: Tensor | None = None
    E_var_2: Tensor | None = None
    V_1: Tensor | None = None
    V_2: Tensor | None = None
    alpha: np.ndarray | None = None


def _time_scale(graph: Hypergraph, config: ModelConfig) -> float:
    if config.time_scale is not None:
        return config.time_scale
    top = float(graph.node_time[: graph.n_lookback].max())
    return top if top > 0 else 1.0


def init_embeddings(graph: Hypergraph, params: ModelParams, config: ModelConfig) -> EmbeddingState:
    if int(graph.variables.max()) >= params.U:
        raise ConfigError(f"variable {int(graph.variables.max())} has no embedding (model built for U={params.U})")
    V = tt.relu(params.linear(Tensor(graph.node_value[:, None]), "obs"))
    E_time = None
    if config.use_time:
        t = Tensor(graph.timestamps[:, None] / _time_scale(graph, config))
        E_time = tt.sin(params.linear(t, "time"))
    E_var = None
    if config.use_var:
        E_var = tt.relu(tt.gather_rows(params["var.weight"], graph.variables))
    return EmbeddingState(V=V, E_time=E_time, E_var=E_var)


# ---------------------------------------------------------------- attention


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Concatenate ``heads`` softmax(q_h k_h^T / sqrt(d/heads)) v_h blocks."""
    d = q.shape[1]
    dh = d // heads
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        scores = tt.scale(tt.matmul(tt.take_cols(q, lo, hi), tt.transpose(tt.take_cols(k, lo, hi))), 1.0 / math.sqrt(dh))
        outs.append(tt.matmul(tt.softmax(scores, axis=1, mask=mask), tt.take_cols(v, lo, hi)))
    return tt.concat(outs, axis=1)


def _edge_update(
    params: ModelParams, prefix: str, edges: Tensor, keys_in: Tensor, config: ModelConfig, mask
) -> Tensor:
    q = params.linear(edges, f"{prefix}_q")
    k = params.linear(keys_in, f"{prefix}_k")
    v = params.linear(keys_in, f"{prefix}_v")
    O = multi_head_attention(q, k, v, config.heads, mask)
    # Without the query term a hyperedge whose members are all forecast
    # placeholders forgets its own timestamp (or variable).
    if config.query_residual:
        O = tt.add(q, O)
    return tt.add(O, tt.relu(params.linear(O, f"{prefix}_o")))


def temporal_mask(graph: Hypergraph) -> np.ndarray:
    return graph.H_T.T > 0


def variable_mask(graph: Hypergraph) -> np.ndarray:
    return np.arange(graph.n_present)[:, None] == graph.node_var_idx[None, :]


def node_to_hyperedge(
    state: EmbeddingState, graph: Hypergraph, params: ModelParams, config: ModelConfig, layer: int
) -> tuple[Tensor | None, Tensor | None]:
    """Updated (temporal, variable) hyperedge embeddings; ``None`` for an ablated family."""
    p = f"layer{layer}"
    masked = config.mask_attention
    E_time_1 = E_var_1 = None
    if config.use_time:
        keys = state.V
        if config.use_var:
            keys = tt.concat([state.V, tt.gather_rows(state.E_var, graph.node_var_idx)], axis=1)
        E_time_1 = _edge_update(
            params, f"{p}.time", state.E_time, keys, config, temporal_mask(graph) if masked else None
        )
    if config.use_var:
        keys = state.V
        if config.use_time:
            keys = tt.concat([state.V, tt.gather_rows(state.E_time, graph.node_time_idx)], axis=1)
        E_var_1 = _edge_update(
            params, f"{p}.var", state.E_var, keys, config, variable_mask(graph) if masked else None
        )
    return E_time_1, E_var_1


# ---------------------------------------------------------------- variable similarity


def similarity_overall(E_var_1: Tensor, params: ModelParams, layer: int) -> Tensor:
    p = f"layer{layer}"
    return tt.matmul(params.linear(E_var_1, f"{p}.sim_q"), tt.transpose(params.linear(E_var_1, f"{p}.sim_k")))


def similarity_time_aware(V: Tensor, shared: SharedIndex) -> Tensor:
    """Per variable pair, the sum of dot products of their timestamp-aligned nodes."""
    n = shared.variables.size
    if shared.pair_a.size == 0:
        return Tensor(np.zeros((n, n)))
    dots = tt.rowsum(tt.mul(tt.gather_rows(V, shared.pair_a), tt.gather_rows(V, shared.pair_b)))
    route = np.zeros((n * n, shared.pair_a.size))
    cols = np.arange(shared.pair_a.size)
    route[shared.pair_la * n + shared.pair_lb, cols] = 1.0
    route[shared.pair_lb * n + shared.pair_la, cols] = 1.0
    return tt.reshape(tt.matmul(Tensor(route), dots), (n, n))


def fusion_alpha(S_var: np.ndarray, S_obs: np.ndarray, shared: SharedIndex, delta: float) -> np.ndarray:
    total = shared.total_matrix()
    ratio = np.divide(shared.shared_matrix(), total, out=np.zeros_like(total), where=total > 0)
    return np.where((S_var > delta) & (S_obs != 0), ratio, 0.0)


def similarity_fuse(
    S_var: Tensor, S_obs: Tensor, shared: SharedIndex, delta: Tensor | float, force_zero: bool = False
) -> tuple[Tensor, np.ndarray]:
    """Blend ``alpha * S_obs + (1 - alpha) * S_var``; alpha is a hard gate without gradient."""
    d = float(delta.data) if isinstance(delta, Tensor) else float(delta)
    alpha = fusion_alpha(S_var.data, S_obs.data, shared, d)
    if force_zero:
        alpha = np.zeros_like(alpha)
    fused = tt.add(tt.mul(Tensor(alpha), S_obs), tt.mul(Tensor(1.0 - alpha), S_var))
    return fused, alpha


def hyperedge_to_hyperedge(E_var_1: Tensor, A_var: Tensor, params: ModelParams, layer: int) -> Tensor:
    d = E_var_1.shape[1]
    weights = tt.softmax(tt.scale(A_var, 1.0 / math.sqrt(d)), axis=1)
    return tt.matmul(weights, params.linear(E_var_1, f"layer{layer}.edge_v"))


# ---------------------------------------------------------------- node update and decode


def _node_context(graph: Hypergraph, first: Tensor, E_time: Tensor | None, E_var: Tensor | None) -> Tensor:
    parts = [first]
    if E_time is not None:
        parts.append(tt.gather_rows(E_time, graph.node_time_idx))
    if E_var is not None:
        parts.append(tt.gather_rows(E_var, graph.node_var_idx))
    return tt.concat(parts, axis=1)


def node_update(
    state: EmbeddingState,
    graph: Hypergraph,
    params: ModelParams,
    config: ModelConfig,
    layer: int,
    E_time_1: Tensor | None,
    E_var_ctx: Tensor | None,
) -> tuple[Tensor, Tensor]:
    """Return (V', V'') where V'' = relu(V + FF_node(V' | time ctx | var ctx))."""
    p = f"layer{layer}"
    V = state.V
    V_1 = multi_head_attention(
        params.linear(V, f"{p}.self_q"), params.linear(V, f"{p}.self_k"), params.linear(V, f"{p}.self_v"), config.heads
    )
    ctx = _node_context(graph, V_1, E_time_1, E_var_ctx)
    return V_1, tt.relu(tt.add(V, params.linear(ctx, f"{p}.node")))


def run_layers(instance: Instance, params: ModelParams, config: ModelConfig) -> EmbeddingState:
    graph = instance.graph
    state = init_embeddings(graph, params, config)
    for layer in range(config.layers):
        last = layer == config.layers - 1
        E_time_1, E_var_1 = node_to_hyperedge(state, graph, params, config, layer)
        E_var_ctx = E_var_1
        E_var_2 = alpha = None
        if last and config.use_iavd:
            S_var = similarity_overall(E_var_1, params, layer)
            S_obs = similarity_time_aware(state.V, instance.shared)
            A_var, alpha = similarity_fuse(S_var, S_obs, instance.shared, params["delta"], config.force_alpha_zero)
            E_var_2 = hyperedge_to_hyperedge(E_var_1, A_var, params, layer)
            E_var_ctx = E_var_2
        V_1, V_2 = node_update(state, graph, params, config, layer, E_time_1, E_var_ctx)
        state = EmbeddingState(
            V=V_2,
            E_time=E_time_1,
            E_var=E_var_1,
            E_time_1=E_time_1,
            E_var_1=E_var_1,
            E_var_2=E_var_2,
            V_1=V_1,
            V_2=V_2,
            alpha=alpha,
        )
    return state


def decode(state: EmbeddingState, graph: Hypergraph, params: ModelParams) -> Tensor:
    E_var = state.E_var_2 if state.E_var_2 is not None else state.E_var_1
    out = params.linear(_node_context(graph, state.V_2, state.E_time_1, E_var), "out")
    return tt.reshape(tt.gather_rows(out, graph.query_nodes), (graph.query_nodes.size,))


def forward(sample: SplitSample | Instance, params: ModelParams, config: ModelConfig | None = None) -> Tensor:
    """Predicted values for the sample's queries, in query order."""
    config = params.config if config is None else config
    instance = sample if isinstance(sample, Instance) else Instance.from_split(sample)
    state = run_layers(instance, params, config)
    return decode(state, instance.graph, params)


# ---------------------------------------------------------------- cost accounting


def attention_costs(M: int, T: int, U: int, config: ModelConfig) -> dict[str, dict[str, int]]:
    """Multiply counts per attention site.

    Linear maps cost N_q P^2 + N_k P^2, the score and value products
    2 N_q N_k P.
    """
    def site(nq, nk, p):
        return {"n_q": nq, "n_k": nk, "p": p, "linear": nq * p * p + nk * p * p, "dot": 2 * nq * nk * p}

    out = {}
    L = config.layers
    if config.use_time:
        out["node_to_temporal_edge"] = site(T, M, config.p_time)
    if config.use_var:
        out["node_to_variable_edge"] = site(U, M, config.p_var)
    if config.use_iavd:
        out["edge_to_edge"] = site(U, U, config.p_var)
    out["node_self_attention"] = site(M, M, config.p_obs)
    for name, s in out.items():
        reps = 1 if name == "edge_to_edge" else L
        s["layers"] = reps
        s["total"] = reps * (s["linear"] + s["dot"])
    return out
