"""Characteristic flows, x+ shifts, explicit gauge maps and the H0 solver.

Independent oracles: the characteristic ODE itself (finite differences of
the integrated map in x~-), finite-difference Jacobians, the direct
congruence J^T g J of the old metric, closed-form Riccati solutions and
the exact constant-H0 solution phi = eps t / 2.
"""

import numpy as np
import pytest

from walkerlab import catalog as cat
from walkerlab import transform as tr
from walkerlab import walker as wk
from walkerlab.walker import Box, WalkerFormError, WalkerMetric

SQUARE = Box(**cat.SQUARE_BOX)


@pytest.fixture(scope="module")
def kg1():
    b = cat.named_example("kg_ex1")
    res = tr.kill_A(b.metric, flow_box=b.flow_box, points=b.metric.sample(30, 0))
    return b, res


# ---------------------------------------------------------------------------
# Flow maps
# ---------------------------------------------------------------------------


class TestFlowMap:
    def test_satisfies_characteristic_ode(self, kg1):
        b, res = kg1
        m = res.map
        p = b.metric.sample(6, 1)
        p[:, -1] = np.clip(p[:, -1], 0.1, 0.9)
        e = 1e-5
        hi, lo = p.copy(), p.copy()
        hi[:, -1] += e
        lo[:, -1] -= e
        dxdt = (m.inverse(hi) - m.inverse(lo)) / (2 * e)
        W = m.field(m.inverse(p))
        np.testing.assert_allclose(dxdt[:, 1:3], W, atol=1e-8)

    def test_matches_closed_form(self, kg1):
        b, res = kg1
        p = b.metric.sample(20, 2)
        u, v, t = p[:, 1], p[:, 2], p[:, 3]
        x = res.map.inverse(p)
        # u~ = u exp(v xm), so the old coordinate is u = u~ exp(-v xm)
        np.testing.assert_allclose(x[:, 1], u * np.exp(-v * t), atol=1e-9)
        np.testing.assert_allclose(x[:, 2], v, atol=1e-12)

    def test_identity_at_base_slice(self, kg1):
        b, res = kg1
        p = b.metric.sample(5, 0)
        p[:, -1] = 0.0
        np.testing.assert_allclose(res.map.inverse(p), p, atol=1e-15)
        J = res.map.jacobian(p)
        np.testing.assert_allclose(J[:, 1:3, 1:3], np.broadcast_to(np.eye(2), (5, 2, 2)), atol=1e-14)

    def test_jacobian_matches_fd(self, kg1):
        b, res = kg1
        p = b.metric.sample(4, 3)
        J = res.map.jacobian(p)
        e = 1e-6
        for k in range(4):
            d = np.zeros(4)
            d[k] = e
            fd = (res.map.inverse(p + d) - res.map.inverse(p - d)) / (2 * e)
            np.testing.assert_allclose(J[:, :, k], fd, atol=1e-7)

    def test_forward_inverse_round_trip(self, kg1):
        b, res = kg1
        p = b.metric.sample(10, 4)
        np.testing.assert_allclose(res.map.forward(res.map.inverse(p)), p, atol=1e-12)

    def test_calibration_recorded(self, kg1):
        _, res = kg1
        st = res.map.settings
        assert st.calibrated and st.agreement <= st.agree_tol

    def test_tight_tolerance_halves_step(self):
        b = cat.named_example("kg_ex1")
        m = tr.kill_A_flow(b.metric, flow_box=b.flow_box, step=0.2, agree_tol=1e-10)
        st = m.calibrate()
        assert st.step < 0.2 and st.agreement <= 1e-10

    def test_escape_detected(self):
        b = cat.named_example("kg_ex1")
        tiny = b.flow_box.with_bounds(u=(-0.51, 0.51))
        m = tr.kill_A_flow(b.metric, flow_box=tiny)
        p = np.array([[0.0, 0.5, 1.0, 1.0]])
        with pytest.raises(tr.FlowEscapeError):
            m.inverse(p)

    def test_trivial_field_is_identity(self):
        w = cat.theorem2_sample()
        res = tr.kill_A(w, points=w.sample(10, 0))
        assert res.diagnostics["identity"]
        p = w.sample(10, 0)
        np.testing.assert_array_equal(res.map.inverse(p), p)


# ---------------------------------------------------------------------------
# Transformed metrics
# ---------------------------------------------------------------------------


class TestTransformedMetric:
    def test_congruence_oracle(self, kg1):
        """The pulled-back metric equals J^T g(x) J with a finite-difference J."""
        b, res = kg1
        p = b.metric.sample(5, 5)
        g_new = res.raw.full_jet(p, 0).value
        x = res.map.inverse(p)
        g_old = wk.full_metric_jet(b.metric, x, 0).value
        e = 1e-6
        J = np.empty((5, 4, 4))
        for k in range(4):
            d = np.zeros(4)
            d[k] = e
            J[:, :, k] = (res.map.inverse(p + d) - res.map.inverse(p - d)) / (2 * e)
        np.testing.assert_allclose(g_new, np.einsum("pca,pcd,pdb->pab", J, g_old, J), atol=1e-7)

    def test_kill_a_postconditions(self, kg1):
        _, res = kg1
        assert res.diagnostics["sup_A"] <= 1e-10
        assert res.diagnostics["walker_defect"] <= 1e-12

    def test_projection_flags(self, kg1):
        _, res = kg1
        assert res.metric.A_is_zero

    def test_einstein_preserved(self, kg1):
        b, res = kg1
        p = b.metric.sample(8, 0)
        assert wk.einstein_residual(res.metric, 0.0, p).sup_residual <= 1e-9

    def test_flow_result_unpacks(self, kg1):
        _, res = kg1
        cmap, metric = res
        assert cmap is res.map and metric is res.metric

    def test_main_requires_nonzero_lambda(self):
        with pytest.raises(tr.LambdaZeroError):
            tr.main_theorem_flow(cat.pp_wave(), 0.0)

    def test_main_with_constant_h1(self):
        w = cat.theorem2_sample()
        res = tr.main_theorem_flow(w, w.lam, points=w.sample(20, 0))
        assert res.diagnostics["sup_H1"] <= 1e-12
        assert wk.einstein_residual(res.metric, w.lam, w.sample(10, 0)).sup_residual <= 1e-9


# ---------------------------------------------------------------------------
# x+ shift and explicit gauge maps
# ---------------------------------------------------------------------------


PLAIN = WalkerMetric(["u", "v"], [["1", "0"], [None, "1"]], ["0", "0"], "xp^2+2*u*xp+v", lam=1.0, box=SQUARE)


class TestPlusShift:
    def test_killing_choice(self):
        s = tr.plus_shift(PLAIN)
        assert s.H1_is_zero
        assert s.A[0] != PLAIN.A[0]

    def test_matches_gauge_map(self):
        s = tr.plus_shift(PLAIN, "-u")
        g = tr.gauge_transform(PLAIN, "u", ["u", "v"], 0.0)
        p = SQUARE.sample(20, 0)
        np.testing.assert_allclose(wk.full_metric_jet(s, p, 0).value, wk.full_metric_jet(g, p, 0).value, atol=1e-13)

    def test_einstein_preserved(self):
        w = cat.theorem2_sample()
        s = tr.plus_shift(w)
        assert s.H1_is_zero
        assert wk.einstein_residual(s, w.lam, w.sample(20, 0)).sup_residual <= 1e-10

    def test_lambda_zero(self):
        with pytest.raises(tr.LambdaZeroError):
            tr.plus_shift(cat.pp_wave())

    def test_f_must_not_depend_on_xp(self):
        with pytest.raises(WalkerFormError):
            tr.plus_shift(PLAIN, "xp*u")


class TestGauge:
    def test_against_pullback_oracle(self):
        w = cat.named_example("kg_ex1").metric
        g = tr.gauge_transform(w, "0.3*u*v+sin(xm)*u", ["u+0.1*v^2*xm", "v+0.2*sin(u)"], 0.25)
        p = w.sample(30, 1)
        np.testing.assert_allclose(wk.full_metric_jet(g, p, 0).value, tr.pullback_oracle(w, g, p), atol=1e-12)

    def test_gauge_preserves_einstein(self):
        w = cat.named_example("kg_ex1").metric
        g = tr.gauge_transform(w, "0.3*u*v", ["u+0.1*v^2*xm", "v"], 0.0)
        assert wk.einstein_residual(g, 0.0, w.sample(10, 0)).sup_residual <= 1e-9

    def test_identity_gauge(self):
        w = cat.named_example("kg_ex1").metric
        g = tr.gauge_transform(w, "0", ["u", "v"], 0.0)
        p = w.sample(10, 0)
        np.testing.assert_allclose(wk.full_metric_jet(g, p, 0).value, wk.full_metric_jet(w, p, 0).value, atol=1e-14)

    def test_singular_jacobian(self):
        g = tr.GaugeMetric(PLAIN, "0", ["u^2", "v"])
        with pytest.raises(tr.JacobianError):
            g.check_jacobian(np.array([[0.0, 0.0, 0.3, 0.5]]))

    def test_psi_arity(self):
        with pytest.raises(WalkerFormError):
            tr.GaugeMetric(PLAIN, "0", ["u"])


# ---------------------------------------------------------------------------
# Removing H0 on a grid
# ---------------------------------------------------------------------------


def _flat(H):
    return WalkerMetric(["u", "v"], [["1", "0"], [None, "1"]], ["0", "0"], H, lam=0.0)


class TestTheorem2:
    def test_constant_case_exact(self):
        r = tr.theorem2_phi(_flat("0.3"), 0.0, tr.Grid([(-1, 1), (-1, 1)], 17), 16)
        np.testing.assert_allclose(r.phi[-1], 0.15, atol=1e-12)
        assert r.residual_sup <= 1e-12

    def test_riccati_closed_form(self):
        """Spatially constant data: 2 phi' = eps + Lambda phi^2 gives phi = sqrt(eps/L) tan(sqrt(eps L) t / 2)."""
        eps, L = 0.4, 0.9
        w = WalkerMetric(["u", "v"], [["1", "0"], [None, "1"]], ["0", "0"], f"{L!r}*xp^2+{eps!r}", lam=L)
        r = tr.theorem2_phi(w, L, tr.Grid([(-1, 1), (-1, 1)], 9), 200, richardson=False, build_map=False)
        expect = np.sqrt(eps / L) * np.tan(np.sqrt(eps * L) * 1.0 / 2)
        np.testing.assert_allclose(r.phi[-1], expect, rtol=1e-6)

    def test_blow_up_reported(self):
        w = WalkerMetric(["u", "v"], [["1", "0"], [None, "1"]], ["0", "0"], "50*xp^2+50", lam=50.0)
        with pytest.raises(tr.BlowUpError):
            tr.theorem2_phi(w, 50.0, tr.Grid([(-1, 1), (-1, 1)], 9), 400, build_map=False)

    def test_grid_too_coarse(self):
        w = _flat("0.2*sin(3*u+xm)*cos(2*v)")
        with pytest.raises(tr.GridTooCoarseError):
            tr.theorem2_phi(w, 0.0, tr.Grid([(-1, 1), (-1, 1)], 9), 8, tol=1e-9, build_map=False)

    def test_requires_a_zero(self):
        w = cat.named_example("kg_ex1").metric
        with pytest.raises(WalkerFormError):
            tr.theorem2_phi(w, 0.0, tr.Grid([(-1, 1), (-1, 1)], 9), 8)

    def test_psi_map_round_trip(self):
        w = _flat("xp*0.2*u+0.2*sin(u+xm)*cos(v)")
        r = tr.theorem2_phi(w, 0.0, tr.Grid([(-1, 1), (-1, 1)], 17), 16)
        p = np.array([[0.0, 0.1, 0.2, 0.9], [0.0, -0.3, 0.4, 0.5]])
        x = r.psi_map.inverse(p)
        np.testing.assert_allclose(r.psi_map.forward(x), p, atol=1e-10)
        assert r.to_json()["grid_nodes"] == 17

    def test_grid_helpers(self):
        g = tr.Grid([(-1, 1), (0, 2)], 9)
        assert g.refined().nodes == 17 and g.coarsened().nodes == 5
        assert g.spacing() == [0.25, 0.25]
        with pytest.raises(ValueError):
            tr.Grid([(0, 1)], 8).coarsened()
