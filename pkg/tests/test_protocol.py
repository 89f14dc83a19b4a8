import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import sparse

from spectral_swarm import protocol as proto
from spectral_swarm.geometry import ShapeKind
from spectral_swarm.protocol import (
    AgentState, CentroidTable, FitStatus, Message, PayloadTooLarge, ProtocolParams, Stage, UNCLASSIFIED,
)
from spectral_swarm.spectral import complete_graph, cycle_graph, path_graph
from oracles import averaging_map, matrix_power_diffusion, ols_slope, reference_quantized_diffusion

CTAU = 1.0 / 15.0
TAU = 1.0 / 15.0


def _agent(i, neighbors, s):
    a = AgentState(i, (0.0, 0.0), P=len(s))
    a.stable_neighbors = set(neighbors)
    a.start_session(s)
    return a


def _recv(adj):
    return sparse.csr_matrix(np.asarray(adj, dtype=np.float64))


# --- messages -------------------------------------------------------------------

def test_diffusion_payload_is_half_precision():
    m = Message.diffusion(7, [0.1, -0.2, 1e-3])
    assert m.payload_bits == 16 + 3 * 16
    assert m.payload == tuple(float(np.float16(v)) for v in [0.1, -0.2, 1e-3])


def test_payload_limits():
    assert Message.handshake(1, [2, 3, 4]).payload_bits == 64
    with pytest.raises(PayloadTooLarge):
        Message.handshake(1, [2, 3, 4, 5])
    assert Message.consensus(1, 1.0).payload_bits == 48
    with pytest.raises(PayloadTooLarge):
        Message.diffusion(1, np.zeros(4))
    with pytest.raises(ValueError):
        Message.consensus(70000, 1.0)
    with pytest.raises(PayloadTooLarge):
        ProtocolParams(P=4)


def test_consensus_payload_single_precision():
    m = Message.consensus(0, 1.0 / 3.0)
    assert m.payload[0] == float(np.float32(1.0 / 3.0))


def test_params_validation():
    with pytest.raises(ValueError):
        ProtocolParams(T=10, B=10)
    with pytest.raises(ValueError):
        ProtocolParams(c=0.0)
    with pytest.raises(ValueError):
        ProtocolParams(C=0)
    assert ProtocolParams().ctau == pytest.approx(1 / 15)


def test_stability_warning():
    p = ProtocolParams()
    assert p.stability_warning(20) is None
    with pytest.warns(RuntimeWarning):
        assert p.stability_warning(30) is not None


# --- stage machine ---------------------------------------------------------------

def test_stage_order():
    a = AgentState(0, (0.0, 0.0))
    for stage in (Stage.SHORT_WALK, Stage.HANDSHAKE, Stage.PRE_DIFFUSION, Stage.DIFFUSION, Stage.CONSENSUS,
                  Stage.DONE):
        a.advance(stage)
    assert a.stage is Stage.DONE


def test_stage_skip_rejected():
    a = AgentState(0, (0.0, 0.0))
    a.advance(Stage.HANDSHAKE)
    with pytest.raises(ValueError):
        a.advance(Stage.CONSENSUS)
    # a new iteration may restart from consensus
    b = AgentState(0, (0.0, 0.0), stage=Stage.CONSENSUS)
    b.advance(Stage.HANDSHAKE)


# --- handshake -------------------------------------------------------------------

def _deliver_fixed(m):
    m = np.asarray(m, dtype=bool)
    return lambda r, k: m


def test_handshake_two_agents_in_range():
    stable = proto.handshake(2, 1, 3, _deliver_fixed([[0, 1], [1, 0]]), np.random.default_rng(0))
    assert stable.tolist() == [[False, True], [True, False]]


def test_handshake_out_of_range():
    stable = proto.handshake(2, 1, 3, _deliver_fixed(np.zeros((2, 2))), np.random.default_rng(0))
    assert not stable.any()


def test_handshake_asymmetric_link():
    # recv[0, 1]: agent 0 hears agent 1; agent 1 never hears agent 0
    stable = proto.handshake(2, 2, 5, _deliver_fixed([[0, 1], [0, 0]]), np.random.default_rng(0))
    assert not stable.any()


def test_handshake_requires_every_round():
    full = np.array([[0, 1], [1, 0]], dtype=bool)
    stable = proto.handshake(2, 3, 3, lambda r, k: full if r != 1 else np.zeros((2, 2), bool),
                             np.random.default_rng(0))
    assert not stable.any()


def test_handshake_complete_graph_rounds_robin():
    # each message lists 3 ids, so in K6 every id is announced after two slots
    adj = complete_graph(6).adjacency
    stable = proto.handshake(6, 1, 3, _deliver_fixed(adj), np.random.default_rng(1))
    assert np.array_equal(stable, adj)


# --- diffusion ------------------------------------------------------------------

def test_two_agent_step():
    a = _agent(0, {1}, [1.0])
    b = _agent(1, {0}, [-1.0])
    ma, mb = Message.diffusion(0, a.s), Message.diffusion(1, b.s)
    proto.diffusion_step(a, [(1, mb.payload)], CTAU)
    proto.diffusion_step(b, [(0, ma.payload)], CTAU)
    assert a.s[0] == pytest.approx(13 / 15, abs=1e-15)
    assert b.s[0] == pytest.approx(-13 / 15, abs=1e-15)


def test_no_messages_leaves_state():
    a = _agent(0, {1}, [0.25, -0.5])
    proto.diffusion_step(a, [], CTAU)
    np.testing.assert_array_equal(a.s, [0.25, -0.5])


def test_non_neighbor_and_repeat_messages():
    a = _agent(0, {1}, [0.0])
    proto.diffusion_step(a, [(2, (5.0,)), (1, (3.0,)), (1, (1.0,))], 0.1)
    assert a.s[0] == pytest.approx(0.1)


def test_non_finite_raises_flag():
    a = _agent(0, {1}, [0.0])
    proto.diffusion_step(a, [(1, (math.inf,))], 0.1)
    assert a.diverged


@pytest.mark.parametrize("steps", [1, 5, 40])
def test_p2_closed_form(steps):
    adj = path_graph(2).adjacency
    s = np.array([[1.0], [-1.0]])
    for _ in range(steps):
        s = proto.swarm_diffusion_step(s, _recv(adj), CTAU)
    exact = (1 - 2 * CTAU) ** steps * np.array([1.0, -1.0])
    np.testing.assert_allclose(matrix_power_diffusion(adj, [1, -1], CTAU, steps), exact, rtol=1e-12)
    np.testing.assert_array_equal(s[:, 0], reference_quantized_diffusion(adj, [1, -1], CTAU, steps))
    # float16 wire values: error bounded by the accumulated half-precision rounding
    np.testing.assert_allclose(s[:, 0], exact, atol=steps * CTAU * 2 * 2 ** -11)


def test_swarm_step_matches_per_agent_step():
    rng = np.random.default_rng(3)
    adj = cycle_graph(7).adjacency
    s0 = rng.standard_normal((7, 2))
    agents = [_agent(i, set(np.flatnonzero(adj[i])), s0[i]) for i in range(7)]
    inbox = [[(j, Message.diffusion(j, agents[j].s).payload) for j in np.flatnonzero(adj[i])] for i in range(7)]
    for i, a in enumerate(agents):
        proto.diffusion_step(a, inbox[i], CTAU)
    swarm = proto.swarm_diffusion_step(s0, _recv(adj), CTAU)
    np.testing.assert_array_equal(swarm, np.array([a.s for a in agents]))


def test_fixed_graph_session_bit_identical():
    rng = np.random.default_rng(11)
    pts = rng.uniform(0, 300, (30, 2))
    d = np.hypot(*(pts[:, None] - pts[None]).transpose(2, 0, 1))
    adj = (d < 90) & ~np.eye(30, dtype=bool)
    recv = _recv(adj)
    s0 = rng.choice([-1.0, 1.0], (30, 3)) * rng.uniform(0.001, 70, (30, 3))
    s = s0.copy()
    log = [s0]
    for _ in range(60):
        s = proto.swarm_diffusion_step(s, recv, CTAU)
        log.append(s)
    fs, flog, drift = proto.fixed_graph_session(s0, recv, 60, CTAU)
    np.testing.assert_array_equal(fs, s)
    np.testing.assert_array_equal(flog, np.array(log))
    assert drift < 1e-10


def test_half_round_matches_numpy():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.standard_normal(20000) * 10.0 ** rng.integers(-9, 5, 20000),
                        [0.0, -0.0, 65504.0, 65520.0, 1e6, -1e6, 2 ** -24, 2 ** -25, 3 * 2 ** -26, 1e-9]])
    got = np.array([proto._half_round(v) for v in x])
    np.testing.assert_array_equal(got, proto.quantize_half(x))


def test_recenter_examples():
    np.testing.assert_array_equal(proto.pre_diffusion_recenter([1.0, -1.0], [0.0, 0.0]), [1.0, -1.0])
    np.testing.assert_array_equal(proto.pre_diffusion_recenter([1.0, 1.0, 1.0], [1.0, 1.0, 1.0]), [0, 0, 0])


def test_recenter_complete_graph_zero_sum():
    rng = np.random.default_rng(5)
    adj = complete_graph(12).adjacency
    pre = rng.choice([-1.0, 1.0], (12, 1))
    s = pre.copy()
    for _ in range(100):
        s = proto.swarm_diffusion_step(s, _recv(adj), CTAU)
    start = proto.pre_diffusion_recenter(pre, s)
    assert abs(start.sum()) < 1e-6


def test_degenerate_start_flagged():
    fit = proto.estimate_indiv_lambda2([(n * TAU, 0.0) for n in range(50)], 10, TAU)
    assert fit.status is FitStatus.DEGENERATE and math.isnan(fit.lambda2)


# --- fitting -------------------------------------------------------------------

@pytest.mark.parametrize("B", [0, 7, 30])
def test_exact_exponential_decay(B):
    log = [(n * TAU, math.exp(-0.5 * n * TAU)) for n in range(61)]
    fit = proto.estimate_indiv_lambda2(log, B, TAU)
    assert fit.ok
    assert fit.lambda2 == pytest.approx(0.5, abs=1e-9)


def test_p2_trace_slope():
    steps = 120
    s = np.array([[1.0], [-1.0]])
    log = [abs(s[0, 0])]
    for _ in range(steps):
        s = proto.swarm_diffusion_step(s, _recv(path_graph(2).adjacency), CTAU)
        log.append(abs(s[0, 0]))
    fit = proto.estimate_indiv_lambda2([(n * TAU, v) for n, v in enumerate(log)], 20, TAU)
    expect = -math.log(1 - 2 * CTAU) / TAU
    assert expect == pytest.approx(2.1465126546, abs=1e-9)
    assert fit.lambda2 == pytest.approx(expect, rel=2e-3)
    # the same slope from an independent least-squares fit on the unquantized recurrence
    t = np.arange(20, steps + 1) * TAU
    y = np.log((1 - 2 * CTAU) ** np.arange(20, steps + 1))
    assert -ols_slope(t, y) == pytest.approx(expect, rel=1e-12)


def test_discrete_rate_tends_to_two():
    rates = [-math.log(1 - 2 * x) / x for x in (1 / 15, 1 / 150, 1 / 1500)]
    assert rates[0] > rates[1] > rates[2] > 2
    assert rates[2] == pytest.approx(2.0, rel=2e-3)


def test_constant_zero_trace_fails():
    fit = proto.estimate_indiv_lambda2([(n * TAU, 0.0) for n in range(30)], 5, TAU)
    assert not fit.ok and math.isnan(fit.lambda2)


def test_growth_and_non_finite():
    grow = [(n * TAU, math.exp(0.5 * n)) for n in range(30)]
    assert proto.estimate_indiv_lambda2(grow, 5, TAU).status is FitStatus.GROWTH
    bad = [(n * TAU, 1.0 if n < 10 else math.nan) for n in range(30)]
    assert proto.estimate_indiv_lambda2(bad, 5, TAU).status is FitStatus.NON_FINITE


def test_no_decay_keeps_value():
    flat = [(n * TAU, 1.0 + 0.01 * (n % 2)) for n in range(30)]
    fit = proto.estimate_indiv_lambda2(flat, 5, TAU)
    assert fit.status is FitStatus.NO_DECAY and math.isfinite(fit.lambda2)
    assert FitStatus.NO_DECAY not in proto.DIVERGENT_STATUSES


def test_guard_trims_noisy_tail():
    n = np.arange(101)
    clean = np.exp(-0.8 * n * TAU)
    noisy = clean.copy()
    noisy[90:] = 2e-3  # floor hit at the end of the session
    lam_guard = proto.fit_decay(noisy, TAU, 10)[0][0]
    lam_raw = proto.fit_decay(noisy, TAU, 10, guard=False)[0][0]
    assert abs(lam_guard - 0.8) < abs(lam_raw - 0.8)
    assert lam_guard == pytest.approx(0.8, rel=1e-6)


def test_vectorized_fit_matches_columns():
    rng = np.random.default_rng(2)
    cols = np.exp(-np.outer(np.arange(80) * TAU, [0.3, 1.1, 2.0])) * (1 + 0.01 * rng.standard_normal((80, 3)))
    lam, _, _, status = proto.fit_decay(cols, TAU, 12)
    for k in range(3):
        single = proto.estimate_indiv_lambda2([(i * TAU, v) for i, v in enumerate(cols[:, k])], 12, TAU)
        assert single.lambda2 == lam[k] and single.status == status[k]


# --- averaging and consensus --------------------------------------------------------

def test_session_average_examples():
    assert proto.session_average([1.0, 2.0, 3.0]) == 2.0
    assert proto.session_average([1.5, math.nan, 2.5]) == 2.0
    assert math.isnan(proto.session_average([math.nan] * 3))


def test_final_lambda2_examples():
    assert proto.final_lambda2([2.0]) == 2.0
    assert proto.final_lambda2([1.0, 3.0]) == 2.0


def test_consensus_examples():
    adj = complete_graph(2).adjacency
    out = proto.swarm_consensus_round(np.array([0.0, 2.0]), _recv(adj))
    np.testing.assert_array_equal(out, [1.0, 1.0])
    assert proto.consensus_round(5.0, []) == 5.0
    v = np.array([5.0])
    for _ in range(20):
        v = proto.swarm_consensus_round(v, _recv(np.zeros((1, 1))))
    assert v[0] == 5.0


def test_consensus_p3():
    adj = path_graph(3).adjacency
    v = np.array([0.0, 0.0, 3.0])
    for _ in range(20):
        v = proto.swarm_consensus_round(v, _recv(adj))
    np.testing.assert_allclose(v, averaging_map(adj, [0, 0, 3], 20), rtol=1e-6)
    assert v.max() <= 1.1 * v.min()


def test_consensus_agent_without_value_adopts_mean():
    adj = complete_graph(3).adjacency
    out = proto.swarm_consensus_round(np.array([1.0, 3.0, math.nan]), _recv(adj))
    assert out[2] == 2.0
    assert proto.consensus_round(math.nan, [1.0, 3.0]) == 2.0


def test_swarm_consensus_matches_per_agent():
    rng = np.random.default_rng(9)
    adj = cycle_graph(6).adjacency
    v = rng.uniform(0, 3, 6)
    wire = [Message.consensus(j, v[j]).payload[0] for j in range(6)]
    expect = [proto.consensus_round(v[i], [wire[j] for j in np.flatnonzero(adj[i])]) for i in range(6)]
    np.testing.assert_allclose(proto.swarm_consensus_round(v, _recv(adj)), expect, rtol=1e-15)


# --- classification ---------------------------------------------------------------

TWO = CentroidTable({"Disk": 1.0, "Annulus": 0.1})


def test_classify_examples():
    assert proto.classify(1.0, TWO) is ShapeKind.DISK
    assert proto.classify(0.55, TWO) is ShapeKind.ANNULUS
    assert proto.classify(math.nan, TWO) == UNCLASSIFIED


def test_single_shape_table():
    t = CentroidTable({"Star": 0.4})
    assert all(proto.classify(x, t) is ShapeKind.STAR for x in (-3.0, 0.0, 0.4, 100.0))


def test_centroid_table_json():
    t = CentroidTable({"disk": 0.5, "ANNULUS": 0.05})
    back = CentroidTable.from_json(t.to_json())
    assert back.entries == {ShapeKind.DISK: 0.5, ShapeKind.ANNULUS: 0.05}
    with pytest.raises(ValueError):
        CentroidTable({"Disk": math.inf})
    with pytest.raises(ValueError):
        proto.classify(1.0, CentroidTable({}))


# --- properties ---------------------------------------------------------------------

@st.composite
def connected_graphs(draw, max_n=12):
    n = draw(st.integers(2, max_n))
    adj = path_graph(n).adjacency.copy()
    extra = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=3 * n))
    for i, j in extra:
        if i != j:
            adj[i, j] = adj[j, i] = True
    perm = draw(st.permutations(range(n)))
    return adj[np.ix_(perm, perm)]


@settings(max_examples=50, deadline=None)
@given(adj=connected_graphs(), seed=st.integers(0, 2 ** 32 - 1), steps=st.integers(1, 80))
def test_diffusion_conserves_sum(adj, seed, steps):
    n = len(adj)
    s0 = np.random.default_rng(seed).uniform(-50, 50, (n, 3))
    s = s0.copy()
    for _ in range(steps):
        s = proto.swarm_diffusion_step(s, _recv(adj), CTAU)
    np.testing.assert_allclose(s.sum(axis=0), s0.sum(axis=0), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(adj=connected_graphs(), seed=st.integers(0, 2 ** 32 - 1))
def test_quantized_diffusion_matches_reference(adj, seed):
    n = len(adj)
    s0 = np.random.default_rng(seed).uniform(-2, 2, n)
    s = s0[:, None].copy()
    for _ in range(15):
        s = proto.swarm_diffusion_step(s, _recv(adj), CTAU)
    np.testing.assert_allclose(s[:, 0], reference_quantized_diffusion(adj, s0, CTAU, 15), rtol=0, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(adj=connected_graphs(), seed=st.integers(0, 2 ** 32 - 1))
def test_consensus_contracts_range(adj, seed):
    v = np.random.default_rng(seed).uniform(0, 5, len(adj))
    out = proto.swarm_consensus_round(v, _recv(adj))
    assert out.min() >= v.min() - 1e-6 and out.max() <= v.max() + 1e-6


@settings(max_examples=60, deadline=None)
@given(a=st.floats(0.01, 10), b=st.floats(0.01, 10), x=st.floats(0.0, 20.0), scale=st.floats(0.1, 10.0))
def test_classify_scale_consistent(a, b, x, scale):
    if abs(a - b) < 1e-6:
        return
    t1 = CentroidTable({"Disk": a, "Annulus": b})
    t2 = CentroidTable({"Disk": a * scale, "Annulus": b * scale})
    da, db = abs(x - a), abs(x - b)
    if math.isclose(da, db, rel_tol=1e-6):
        return
    assert proto.classify(x, t1) is proto.classify(x * scale, t2)
