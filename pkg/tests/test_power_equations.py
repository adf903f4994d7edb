import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridshed.grid_model import (
    Branch,
    Bus,
    DemandSpec,
    Generator,
    GridCase,
    build_admittance,
)
from gridshed.power_equations import (
    InputVector,
    State,
    SwitchVector,
    constraints_C,
    flat_state,
    grad_phi,
    hessian_Q,
    jacobians,
    line_flow,
    network,
    node_outflow,
    objective_E,
    phi,
    supply,
)

# operating point solved to balance independently (residual < 2e-14); bus-1
# generator absorbs the mismatch, so its value exceeds pg_max on purpose
BAL_V = np.array([1.0, 0.970703892883282, 0.9745373572373851, 0.9836268041913465, 0.9994199874391664])
BAL_TH = np.array([0.0, -0.062429659795857295, -0.05391066664904875, -0.034368817053614095, -0.00038241489785819125])
BAL_PG = np.array([3.4678907595164197, 1.2, 0.9, 1.1])
BAL_QG = np.array([1.411411595164289, 0.4, 0.3, 0.35])
BAL_Y = np.array([1.0, 0.6, 0.8])


def two_bus_case(g=1.0, b=-5.0):
    return GridCase(
        buses=(Bus(id=1, v_min=0.9, v_max=1.1, is_slack=True), Bus(id=2, v_min=0.9, v_max=1.1)),
        branches=(Branch(from_bus=1, to_bus=2, g=g, b=b),),
        generators=(Generator(bus=1, pg_min=0.0, pg_max=2.0, qg_min=-1.0, qg_max=1.0),),
        demands=(DemandSpec(bus=2, pd=0.5, qd=0.1),),
    )


def random_point(case, rng):
    net = network(case)
    state = State(
        v=rng.uniform(0.96, 1.04, net.n_bus),
        theta=np.where(np.arange(net.n_bus) == net.slack, 0.0, rng.uniform(-0.25, 0.25, net.n_bus)),
    )
    span_l, span_u = net.u_lower, net.u_upper
    u = InputVector.from_vector(span_l + rng.uniform(0.1, 0.9, 2 * net.n_gen) * (span_u - span_l))
    y = SwitchVector(rng.uniform(0.05, 0.95, net.n_dem))
    return state, u, y


def test_line_flow_zero_at_flat_start(case5):
    state = flat_state(case5)
    for br in case5.branches:
        p, q = line_flow(case5, state, br.from_bus, br.to_bus)
        assert p == pytest.approx(0.0, abs=1e-14)
        assert q == pytest.approx(0.0, abs=1e-14)


def test_line_flow_matches_scalar_evaluation():
    case = two_bus_case()
    state = State(v=np.array([1.05, 1.00]), theta=np.array([0.1, 0.0]))
    p, q = line_flow(case, state, 1, 2)
    assert p == pytest.approx(0.5818710638539207, abs=1e-12)
    assert q == pytest.approx(0.1839030448111938, abs=1e-12)


def test_line_flow_lossless_branch():
    case = two_bus_case(g=0.0, b=-4.0)
    state = State(v=np.array([1.03, 0.98]), theta=np.zeros(2))
    p, q = line_flow(case, state, 1, 2)
    assert p == 0.0
    assert q == pytest.approx(4.0 * 1.03 * (1.03 - 0.98))


def test_line_flow_rejects_non_branch(case5):
    with pytest.raises(ValueError, match="no branch"):
        line_flow(case5, flat_state(case5), 2, 5)


def test_node_outflow_zero_at_flat_start(case30):
    P = node_outflow(case30, build_admittance(case30), flat_state(case30))
    np.testing.assert_allclose(P, 0.0, atol=1e-12)


def test_node_outflow_equals_neighbor_sums(case5):
    rng = np.random.default_rng(3)
    Y = build_admittance(case5)
    neighbors = {b.id: [] for b in case5.buses}
    for br in case5.branches:
        neighbors[br.from_bus].append(br.to_bus)
        neighbors[br.to_bus].append(br.from_bus)
    for _ in range(10):
        state = State(v=rng.uniform(0.9, 1.1, 5), theta=rng.uniform(-0.4, 0.4, 5))
        P = node_outflow(case5, Y, state)
        for i, bus in enumerate(case5.bus_ids):
            p_sum = sum(line_flow(case5, state, bus, l)[0] for l in neighbors[bus])
            q_sum = sum(line_flow(case5, state, bus, l)[1] for l in neighbors[bus])
            assert P[2 * i] == pytest.approx(p_sum, abs=1e-12)
            assert P[2 * i + 1] == pytest.approx(q_sum, abs=1e-12)


def test_lossless_network_conserves_active_power():
    case = GridCase(
        buses=tuple(Bus(id=i, v_min=0.9, v_max=1.1, is_slack=(i == 1)) for i in range(1, 5)),
        branches=(
            Branch(from_bus=1, to_bus=2, g=0.0, b=-8.0),
            Branch(from_bus=2, to_bus=3, g=0.0, b=-6.0),
            Branch(from_bus=3, to_bus=4, g=0.0, b=-7.0),
            Branch(from_bus=4, to_bus=1, g=0.0, b=-9.0),
        ),
        generators=(Generator(bus=1, pg_min=0.0, pg_max=2.0, qg_min=-1.0, qg_max=1.0),),
        demands=(DemandSpec(bus=3, pd=0.4, qd=0.1),),
    )
    Y = build_admittance(case)
    rng = np.random.default_rng(11)
    for _ in range(25):
        state = State(v=rng.uniform(0.9, 1.1, 4), theta=rng.uniform(-0.6, 0.6, 4))
        P = node_outflow(case, Y, state)
        assert abs(P[0::2].sum()) <= 1e-10


def test_supply_pure_generation_when_y_zero(case5):
    u = InputVector(pg=np.array([1.0, 0.5, 0.25, 0.75]), qg=np.array([0.1, 0.2, 0.3, 0.4]))
    S = supply(case5, u, SwitchVector(np.zeros(3)))
    # gens sit at buses 1, 3, 4, 5
    np.testing.assert_allclose(S[0::2], [1.0, 0.0, 0.5, 0.25, 0.75])
    np.testing.assert_allclose(S[1::2], [0.1, 0.0, 0.2, 0.3, 0.4])


def test_supply_pure_demand_bus(case5):
    u = InputVector(pg=np.zeros(4), qg=np.zeros(4))
    S = supply(case5, u, SwitchVector(np.array([1.0, 0.0, 0.0])))
    # bus 2 carries demand but no generator
    assert S[2] == pytest.approx(-3.0)
    assert S[3] == pytest.approx(-0.9861)


def test_supply_scales_demand_by_y_squared(case5):
    u = InputVector(pg=np.zeros(4), qg=np.zeros(4))
    S_half = supply(case5, u, SwitchVector(np.array([0.5, 0.0, 0.0])))
    S_full = supply(case5, u, SwitchVector(np.array([1.0, 0.0, 0.0])))
    assert S_half[2] == pytest.approx(0.25 * S_full[2])
    assert S_half[3] == pytest.approx(0.25 * S_full[3])


def test_switch_vector_rejects_out_of_box():
    with pytest.raises(ValueError):
        SwitchVector(np.array([0.5, 1.2]))
    with pytest.raises(ValueError):
        SwitchVector(np.array([-0.1]))
    SwitchVector(np.array([0.0, 1.0, 1.0 + 1e-12]))  # solver-level roundoff passes


def test_vector_round_trips():
    s = State(v=np.array([1.0, 1.02]), theta=np.array([0.0, -0.1]))
    assert np.array_equal(State.from_vector(s.as_vector()).v, s.v)
    u = InputVector(pg=np.array([0.4]), qg=np.array([-0.2]))
    np.testing.assert_array_equal(InputVector.from_vector(u.as_vector()).qg, u.qg)


def test_objective_zero_when_y_zero(case5):
    state = flat_state(case5)
    u = InputVector(pg=np.ones(4), qg=np.zeros(4))
    assert objective_E(case5, state, u, SwitchVector(np.zeros(3))) == 0.0


def test_objective_at_balanced_point(case5):
    state = State(v=BAL_V, theta=BAL_TH)
    u = InputVector(pg=BAL_PG, qg=BAL_QG)
    y = SwitchVector(BAL_Y)
    E = objective_E(case5, state, u, y)
    expected = float(np.sum(BAL_Y**3 * np.array([3.0, 3.0, 4.0])))
    assert E == pytest.approx(expected, abs=1e-12)
    # balance rows of C vanish at this point
    C = constraints_C(case5, state, u, y)
    np.testing.assert_allclose(C[:20], 0.0, atol=1e-12)


def test_constraint_stack_dimension_and_order(case5):
    net = network(case5)
    state = flat_state(case5)
    u = InputVector(pg=np.full(4, 0.5), qg=np.zeros(4))
    y = SwitchVector(np.ones(3))
    C = constraints_C(case5, state, u, y)
    assert C.shape == (8 * 5 + 4 * 4,)
    # flat start carries no flow, so the active balance rows equal the supply
    S = supply(case5, u, y)
    np.testing.assert_allclose(C[:10], -S, atol=1e-14)
    np.testing.assert_allclose(C[10:20], S, atol=1e-14)
    assert C[:10].max() > 0  # demand exceeds zero flow: infeasible point


def test_constraint_active_at_bound(case5):
    state = flat_state(case5)
    state.v[2] = case5.buses[2].v_min
    u = InputVector(pg=np.zeros(4), qg=np.zeros(4))
    C = constraints_C(case5, state, u, SwitchVector(np.zeros(3)))
    # row 20 starts the x lower-bound block; bus 3 voltage sits at position 2*2
    assert C[20 + 4] == 0.0
    u2 = InputVector(pg=np.array([2.1, 0.0, 0.0, 0.0]), qg=np.zeros(4))
    C2 = constraints_C(case5, state, u2, SwitchVector(np.zeros(3)))
    # row 48 starts u - u_hi; generator 1 pg sits first and 2.1 is its cap
    assert C2[48] == 0.0


def central_diff(f, z, h=1e-6):
    cols = []
    for i in range(z.size):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        cols.append((np.asarray(f(zp)) - np.asarray(f(zm))) / (2 * h))
    return np.stack(cols, axis=-1)


def split_z(net, z):
    nx, nu = 2 * net.n_bus, 2 * net.n_gen
    return (
        State.from_vector(z[:nx]),
        InputVector.from_vector(z[nx:nx + nu]),
        SwitchVector(z[nx + nu:]),
    )


@pytest.mark.parametrize("fixture", ["case5", "case30"])
def test_derivatives_match_finite_differences(fixture, request):
    case = request.getfixturevalue(fixture)
    net = network(case)
    Y = build_admittance(case)
    rng = np.random.default_rng(42)
    for _ in range(5):
        state, u, y = random_point(case, rng)
        z = np.concatenate([state.as_vector(), u.as_vector(), y.y])
        dP_dx, dE, dC = jacobians(case, state, u, y)

        fd_P = central_diff(lambda x: node_outflow(case, Y, State.from_vector(x)), state.as_vector())
        scale = np.maximum(1.0, np.abs(fd_P))
        assert np.max(np.abs(dP_dx - fd_P) / scale) <= 1e-6

        fd_E = central_diff(lambda zz: objective_E(case, *split_z(net, zz)), z)
        scale = np.maximum(1.0, np.abs(fd_E))
        assert np.max(np.abs(dE - fd_E) / scale) <= 1e-6

        fd_C = central_diff(lambda zz: constraints_C(case, *split_z(net, zz)), z)
        scale = np.maximum(1.0, np.abs(fd_C))
        assert np.max(np.abs(dC - fd_C) / scale) <= 1e-6


def test_bound_rows_have_zero_y_columns(case5):
    rng = np.random.default_rng(1)
    state, u, y = random_point(case5, rng)
    _, _, dC = jacobians(case5, state, u, y)
    net = network(case5)
    y_cols = dC[:, 2 * net.n_bus + 2 * net.n_gen:]
    assert np.all(y_cols[4 * net.n_bus:] == 0.0)


def test_flat_lossless_voltage_block_is_zero():
    case = GridCase(
        buses=tuple(Bus(id=i, v_min=0.9, v_max=1.1, is_slack=(i == 1)) for i in range(1, 4)),
        branches=(
            Branch(from_bus=1, to_bus=2, g=0.0, b=-5.0),
            Branch(from_bus=2, to_bus=3, g=0.0, b=-4.0),
        ),
        generators=(Generator(bus=1, pg_min=0.0, pg_max=2.0, qg_min=-1.0, qg_max=1.0),),
        demands=(DemandSpec(bus=3, pd=0.4, qd=0.1),),
    )
    state = flat_state(case)
    u = InputVector(pg=np.array([0.0]), qg=np.array([0.0]))
    dP_dx, _, _ = jacobians(case, state, u, SwitchVector(np.ones(1)))
    np.testing.assert_array_equal(dP_dx[0::2, 0::2], 0.0)


def test_hessian_zero_for_zero_duals(case5):
    rng = np.random.default_rng(2)
    state, u, y = random_point(case5, rng)
    net = network(case5)
    Q = hessian_Q(case5, state, u, y, np.zeros(net.n_c_rows))
    np.testing.assert_array_equal(Q, 0.0)


def test_hessian_single_dual(case5):
    rng = np.random.default_rng(4)
    state, u, y = random_point(case5, rng)
    net = network(case5)
    duals = np.zeros(net.n_c_rows)
    # demand index 0 lives at bus 2 (bus position 1): its active balance row is 2
    duals[2] = 1.7
    Q = hessian_Q(case5, state, u, y, duals)
    assert Q[0, 0] == pytest.approx(-2.0 * 1.7 * 3.0)
    assert np.count_nonzero(Q) == 1


def test_hessian_matches_finite_difference(case5):
    rng = np.random.default_rng(5)
    state, u, y = random_point(case5, rng)
    net = network(case5)
    duals = rng.uniform(-1.0, 1.0, net.n_c_rows)

    def grad_L0_y(yy):
        _, dE, dC = jacobians(case5, state, u, SwitchVector(yy))
        g = dE - duals @ dC
        return g[2 * net.n_bus + 2 * net.n_gen:]

    Q = hessian_Q(case5, state, u, y, duals)
    fd = central_diff(grad_L0_y, y.y.copy())
    np.testing.assert_allclose(Q, fd, atol=1e-7)
    assert np.count_nonzero(Q - np.diag(np.diag(Q))) == 0


def test_phi_values():
    assert phi(np.array([0.0, 1.0, 1.0])) == 0.0
    assert phi(np.full(6, 0.5)) == pytest.approx(6 / 4)
    np.testing.assert_allclose(grad_phi(np.array([0.0, 0.5, 1.0])), [1.0, 0.0, -1.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=8))
def test_phi_box_properties(ys):
    y = np.array(ys)
    val = phi(y)
    assert -1e-15 <= val <= len(ys) / 4 + 1e-12
    if val <= 1e-12:
        # tiny penalty forces every coordinate near an endpoint
        assert np.max(np.minimum(y, 1.0 - y)) <= 2e-12
    if np.max(np.minimum(y, 1.0 - y)) <= 1e-13:
        assert val <= 1e-12
