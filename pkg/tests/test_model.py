import math

import numpy as np
import pytest
from conftest import random_split

from hyperimts import tensor as tt
from hyperimts.data import Observation, SplitSample
from hyperimts.gradcheck import model_gradcheck, tiny_config, tiny_instance
from hyperimts.hypergraph import build, shared_index
from hyperimts.model import (
    ABLATIONS,
    ConfigError,
    Instance,
    ModelConfig,
    ModelParams,
    attention_costs,
    forward,
    init_embeddings,
    multi_head_attention,
    node_to_hyperedge,
    run_layers,
    similarity_fuse,
    similarity_overall,
    similarity_time_aware,
    temporal_mask,
)
from hyperimts.tensor import Tensor


def small_config(**kw):
    return tiny_config(**kw)


def brute_s_obs(V, graph):
    n = graph.n_lookback
    vars_ = list(graph.variables)
    S = np.zeros((len(vars_), len(vars_)))
    for ia, a in enumerate(vars_):
        for ib, b in enumerate(vars_):
            total = 0.0
            for i in range(n):
                for j in range(n):
                    if graph.node_var[i] == a and graph.node_var[j] == b and graph.node_time[i] == graph.node_time[j]:
                        if a == b and i != j:
                            continue
                        total += sum(V[i, k] * V[j, k] for k in range(V.shape[1]))
            S[ia, ib] = total
    return S


def brute_s_var(E, Wq, bq, Wk, bk):
    n, d = E.shape
    Q = [[sum(E[i, m] * Wq[m, c] for m in range(d)) + bq[c] for c in range(Wq.shape[1])] for i in range(n)]
    K = [[sum(E[i, m] * Wk[m, c] for m in range(d)) + bk[c] for c in range(Wk.shape[1])] for i in range(n)]
    return np.array([[sum(Q[i][c] * K[j][c] for c in range(len(Q[i]))) for j in range(n)] for i in range(n)])


def test_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(p_obs=6, heads=4)
    with pytest.raises(ConfigError, match="ablation"):
        ModelConfig(ablation="nope")


def test_single_key_attention_returns_value():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.normal(size=s)) for s in ((3, 4), (1, 4), (1, 4)))
    out = multi_head_attention(q, k, v, heads=2)
    np.testing.assert_allclose(out.data, np.repeat(v.data, 3, axis=0), rtol=0, atol=1e-15)


def test_attention_matches_per_head_closed_form():
    rng = np.random.default_rng(1)
    q, k, v = (rng.normal(size=s) for s in ((2, 4), (3, 4), (3, 4)))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), heads=2).data
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(2)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        np.testing.assert_allclose(out[:, sl], w @ v[:, sl], rtol=1e-12)


def test_temporal_edge_sees_only_member_nodes():
    inst = tiny_instance(0)
    cfg = small_config()
    params = ModelParams.init(cfg, 3)
    state = init_embeddings(inst.graph, params, cfg)
    E_t, _ = node_to_hyperedge(state, inst.graph, params, cfg, 0)
    # perturb the value of a node at t=2; edges for other timestamps must not move
    changed = inst.graph.node_value.copy()
    j = int(np.flatnonzero(inst.graph.node_time == 2.0)[0])
    changed[j] += 3.0
    g2 = inst.graph.__class__(**{**inst.graph.__dict__, "node_value": changed})
    E_t2, _ = node_to_hyperedge(init_embeddings(g2, params, cfg), g2, params, cfg, 0)
    t_idx = int(inst.graph.node_time_idx[j])
    others = [i for i in range(inst.graph.T) if i != t_idx]
    np.testing.assert_array_equal(E_t.data[others], E_t2.data[others])
    assert not np.array_equal(E_t.data[t_idx], E_t2.data[t_idx])


def test_temporal_mask_is_incidence_transpose():
    g = tiny_instance().graph
    np.testing.assert_array_equal(temporal_mask(g), g.H_T.T.astype(bool))


def test_similarity_oracles_on_random_instances():
    rng = np.random.default_rng(2)
    cfg = small_config()
    for trial in range(20):
        sp = random_split(rng, U=int(rng.integers(2, 5)), n_times=int(rng.integers(2, 6)), p_obs=0.6)
        inst = Instance.from_split(sp)
        params = ModelParams.init(cfg, sp.U, seed=trial)
        V = Tensor(rng.normal(size=(inst.graph.M, 8)))
        np.testing.assert_allclose(similarity_time_aware(V, inst.shared).data, brute_s_obs(V.data, inst.graph), rtol=1e-12, atol=1e-12)
        E = Tensor(rng.normal(size=(inst.graph.n_present, 8)))
        want = brute_s_var(
            E.data,
            params["layer1.sim_q.weight"].data,
            params["layer1.sim_q.bias"].data,
            params["layer1.sim_k.weight"].data,
            params["layer1.sim_k.bias"].data,
        )
        np.testing.assert_allclose(similarity_overall(E, params, 1).data, want, rtol=1e-12, atol=1e-12)


def _two_var_instance(shared_times, only_a, only_b):
    look = [Observation(float(t), 0, 1.0) for t in list(shared_times) + list(only_a)]
    look += [Observation(float(t), 1, 1.0) for t in list(shared_times) + list(only_b)]
    sp = SplitSample(tuple(look), ((99.0, 0),), (0.0,), 98.0, 2)
    return Instance.from_split(sp)


def test_alpha_is_shared_over_total_when_gate_open():
    inst = _two_var_instance([1, 2, 3], [4], [5])
    S_var = Tensor(np.full((2, 2), 2.0))
    S_obs = Tensor(np.array([[1.0, 0.5], [0.5, 1.0]]))
    fused, alpha = similarity_fuse(S_var, S_obs, inst.shared, delta=1.0)
    assert alpha[0, 1] == 0.6 and alpha[1, 0] == 0.6
    assert fused.data[0, 1] == pytest.approx(0.6 * 0.5 + 0.4 * 2.0)


def test_alpha_zero_when_similarity_below_threshold():
    inst = _two_var_instance([1, 2, 3], [4], [5])
    S_var = Tensor(np.full((2, 2), 0.5))
    _, alpha = similarity_fuse(S_var, Tensor(np.ones((2, 2))), inst.shared, delta=1.0)
    assert (alpha == 0).all()


def test_no_shared_timestamps_gives_s_var_exactly():
    inst = _two_var_instance([], [1, 2], [3])
    rng = np.random.default_rng(3)
    S_var = Tensor(rng.normal(size=(2, 2)) + 5)
    S_obs = similarity_time_aware(Tensor(rng.normal(size=(inst.graph.M, 4))), inst.shared)
    fused, alpha = similarity_fuse(S_var, S_obs, inst.shared, delta=-100.0)
    assert fused.data[0, 1] == S_var.data[0, 1] and fused.data[1, 0] == S_var.data[1, 0]
    assert alpha[0, 1] == 0


def test_forward_returns_one_value_per_query():
    inst = tiny_instance()
    params = ModelParams.init(small_config(), 3)
    out = forward(inst, params)
    assert out.shape == (2,)
    assert np.isfinite(out.data).all()


@pytest.mark.parametrize("ablation", ABLATIONS)
def test_every_ablation_runs_and_differs_in_parameters(ablation):
    cfg = small_config(ablation=ablation)
    params = ModelParams.init(cfg, 3)
    out = forward(tiny_instance(), params)
    assert np.isfinite(out.data).all()
    names = set(dict(params.items()))
    assert ("var.weight" in names) == (ablation != "wo_VE")
    assert ("time.weight" in names) == (ablation != "wo_TE")
    assert ("delta" in names) == (ablation not in ("wo_VE", "wo_IAVD"))


def test_rp_te_freezes_time_embedding():
    params = ModelParams.init(small_config(ablation="rp_TE"), 3)
    assert not params["time.weight"].requires_grad
    assert params["layer0.time_q.weight"].requires_grad


def test_rp_iavd_equals_alpha_zero_bitwise():
    inst = tiny_instance(4)
    a = ModelParams.init(small_config(ablation="rp_IAVD", delta_init=-10.0), 3)
    b = ModelParams.init(small_config(alpha_zero=True, delta_init=-10.0), 3)
    assert forward(inst, a).data.tobytes() == forward(inst, b).data.tobytes()
    assert not np.any(run_layers(inst, a, a.config).alpha)


def test_gate_opens_on_tiny_instance_with_low_threshold():
    inst = tiny_instance(0)
    params = ModelParams.init(small_config(delta_init=-1e6), 3)
    alpha = run_layers(inst, params, params.config).alpha
    np.testing.assert_allclose(alpha[0, 1], 2 / 4)
    np.testing.assert_allclose(alpha[0, 2], 2 / 3)


def test_lookback_permutation_invariance_bitwise():
    rng = np.random.default_rng(5)
    params = ModelParams.init(small_config(), 4)
    for _ in range(10):
        sp = random_split(rng, U=4, n_times=5, p_obs=0.6)
        perm = rng.permutation(len(sp.lookback))
        sp2 = SplitSample(tuple(sp.lookback[i] for i in perm), sp.queries, sp.targets, sp.t_split, sp.U)
        assert forward(sp, params).data.tobytes() == forward(sp2, params).data.tobytes()


def test_query_order_permutes_predictions():
    rng = np.random.default_rng(6)
    params = ModelParams.init(small_config(), 4)
    sp = random_split(rng, U=4, n_times=5, n_queries=4)
    rev = SplitSample(sp.lookback, sp.queries[::-1], sp.targets[::-1], sp.t_split, sp.U)
    assert forward(rev, params).data[::-1].tobytes() == forward(sp, params).data.tobytes()


def test_variable_relabeling_equivariance():
    rng = np.random.default_rng(7)
    sp = random_split(rng, U=3, n_times=5, p_obs=0.7)
    params = ModelParams.init(small_config(), 3)
    perm = np.array([2, 0, 1])  # old variable u becomes perm[u]
    relabeled = SplitSample(
        tuple(Observation(o.t, int(perm[o.u]), o.z) for o in sp.lookback),
        tuple((t, int(perm[u])) for t, u in sp.queries),
        sp.targets,
        sp.t_split,
        3,
    )
    p2 = ModelParams.init(small_config(), 3)
    p2.load_state(params.state())
    p2["var.weight"].data[perm] = params["var.weight"].data
    np.testing.assert_allclose(forward(relabeled, p2).data, forward(sp, params).data, rtol=1e-12, atol=1e-12)


def test_unknown_variable_rejected():
    params = ModelParams.init(small_config(), 2)
    with pytest.raises(ConfigError, match="variable 2"):
        forward(tiny_instance(), params)


def test_checkpoint_round_trip(tmp_path):
    params = ModelParams.init(small_config(), 3, seed=11)
    path = tmp_path / "ck.bin"
    params.save(path)
    back = ModelParams.load(path, small_config())
    for (k1, a), (k2, b) in zip(params.items(), back.items()):
        assert k1 == k2 and a.data.tobytes() == b.data.tobytes()
    inst = tiny_instance()
    assert forward(inst, params).data.tobytes() == forward(inst, back).data.tobytes()


def test_checkpoint_rejects_other_config(tmp_path):
    path = tmp_path / "ck.bin"
    ModelParams.init(small_config(), 3).save(path)
    with pytest.raises(ConfigError, match="does not match"):
        ModelParams.load(path, small_config(layers=1))
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ConfigError, match="not a checkpoint"):
        ModelParams.load(tmp_path / "bad.bin")


def test_every_parameter_except_threshold_gets_gradient():
    # two queries on one timestamp, so the last layer's temporal attention has more than one key
    base = tiny_instance().split
    inst = Instance.from_split(SplitSample(base.lookback, ((5.0, 0), (5.0, 2)), (0.3, -0.2), base.t_split, 3))
    params = ModelParams.init(small_config(), 3)
    out = forward(inst, params)
    tt.sum_all(tt.square(out)).backward()
    for name, p in params.items():
        if name == "delta":
            assert not np.any(p.grad)  # hard gate
        else:
            assert np.any(p.grad != 0), name


@pytest.mark.parametrize("ablation", ["rp_TE", "wo_TE", "rp_IAVD", "wo_IAVD", "wo_VE"])
def test_ablation_gradcheck(ablation):
    cfg = small_config(ablation=ablation)
    report = model_gradcheck(tiny_instance(), ModelParams.init(cfg, 3), cfg)
    assert report.passed, report.summary()


def test_gradcheck_with_open_gate():
    cfg = small_config(delta_init=-5.0)
    inst = tiny_instance()
    params = ModelParams.init(cfg, 3)
    assert run_layers(inst, params, cfg).alpha.any()
    assert model_gradcheck(inst, params, cfg).passed


def test_attention_cost_self_attention_is_quadratic():
    cfg = ModelConfig()
    a = attention_costs(50, 10, 4, cfg)["node_self_attention"]["dot"]
    b = attention_costs(100, 10, 4, cfg)["node_self_attention"]["dot"]
    assert b == 4 * a


def test_node_count_never_padded():
    sp = random_split(np.random.default_rng(8), U=5, n_times=6, p_obs=0.3)
    g = build(sp)
    assert g.M == len(sp.lookback) + len(sp.queries)
    assert shared_index(g).variables.size == g.n_present
