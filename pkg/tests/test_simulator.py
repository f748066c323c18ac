"""Simulation loop: fixed-step integration, masking, traces, determinism."""

import numpy as np
import pytest

from cbc_adapt.controller import ControllerParams
from cbc_adapt.plant import Excitation, make_cross_beam, make_duffing, \
    make_polynomial_plant
from cbc_adapt.reference import FourierSignal, ReferenceTrajectory, \
    builtin_reference
from cbc_adapt.simulator import (Scenario, SimulationDiverged,
                                 apply_regressor_mask, simulate, trace_to_csv)


def _duffing_params():
    return ControllerParams.from_s_diag(1.0, 1.0, 1.0, 0.1, 2.0, 3, [1.0])


def _zero_reference(p=1, n=2, omega=1.0):
    sig = FourierSignal(omega=omega, a0=np.zeros(p), cos_c=np.zeros((p, 1)),
                        sin_c=np.zeros((p, 1)))
    return ReferenceTrajectory(sig, n)


class TestEquilibriumFixedPoint:
    def test_zero_everything_stays_zero(self):
        plant = make_duffing()
        sc = Scenario(plant=plant,
                      excitation=Excitation(np.zeros(1), omega=1.0),
                      params=_duffing_params(),
                      reference=_zero_reference(),
                      xi0=np.zeros(2), t_end=10.0, dt=0.01)
        tr = simulate(sc)
        assert np.all(tr.xi == 0.0)
        assert np.all(tr.u_prime == 0.0)
        assert np.all(tr.theta_hat == 0.0)
        assert np.all(tr.phi == 0.0)


class TestOpenLoop:
    def test_unstable_orbit_not_revealed_without_control(self, duffing_setup):
        # start on the printed initial states: the uncontrolled trajectory
        # leaves the unstable orbit within a few dozen periods
        plant = duffing_setup["plant"]
        exc = duffing_setup["excitation"]
        ref = duffing_setup["reference"]
        printed = builtin_reference("duffing")
        T = exc.period
        sc = Scenario(plant=plant, excitation=exc, params=None,
                      reference=None, xi0=printed.evaluate_state(0.0),
                      t_end=40 * T, dt=T / 2000, mode="open_loop",
                      store_every=4)
        tr = simulate(sc)
        dep = np.abs(tr.xi[:, 1] - ref.evaluate_state(tr.t)[:, 1])
        n_per = 2000 // 4
        assert dep[:n_per].max() < 2e-2      # starts on the orbit
        assert dep.max() > 0.1               # and departs from it

    def test_controller_channels_are_zero(self):
        plant = make_duffing()
        exc = Excitation(np.array([0.15]), omega=2.515)
        sc = Scenario(plant=plant, excitation=exc, params=None,
                      reference=None, xi0=np.array([0.0, -1.0]),
                      t_end=5.0, dt=0.01, mode="open_loop")
        tr = simulate(sc)
        assert np.all(tr.u_prime == 0.0)
        assert np.all(tr.theta_hat == 0.0)


class TestRegressorMask:
    def test_all_true_is_identity(self):
        plant = make_cross_beam()
        masked = apply_regressor_mask(plant, np.ones(18, dtype=bool))
        rng = np.random.default_rng(0)
        for _ in range(10):
            xi = rng.uniform(-1, 1, 4) * 1e-2
            assert np.array_equal(masked.regressor(xi), plant.regressor(xi))

    def test_cross_terms_zeroed(self):
        plant = make_cross_beam()
        mask = np.ones(18, dtype=bool)
        dropped = [3, 6, 7, 12, 15, 16]
        mask[dropped] = False
        masked = apply_regressor_mask(plant, mask)
        xi = np.array([0.1, -0.2, 3e-3, 2e-3])
        F = masked.regressor(xi)
        assert np.all(F[:, dropped] == 0.0)
        keep = np.setdiff1d(np.arange(18), dropped)
        assert np.array_equal(F[:, keep], plant.regressor(xi)[:, keep])

    def test_all_false_freezes_adaptation(self):
        plant = make_duffing()
        exc = Excitation(np.array([0.15]), omega=2.515)
        sc = Scenario(plant=plant, excitation=exc, params=_duffing_params(),
                      reference=builtin_reference("duffing"),
                      xi0=np.array([0.0, -1.0]), t_end=5.0, dt=0.005,
                      regressor_mask=np.zeros(3, dtype=bool))
        tr = simulate(sc)
        assert np.all(tr.theta_hat == 0.0)

    def test_mask_length_checked(self):
        with pytest.raises(ValueError):
            apply_regressor_mask(make_duffing(), np.ones(4, dtype=bool))


class TestDeterminism:
    def test_identical_scenarios_identical_traces(self):
        plant = make_duffing()
        exc = Excitation(np.array([0.15]), omega=2.515)
        ref = builtin_reference("duffing")

        def run():
            sc = Scenario(plant=plant, excitation=exc,
                          params=_duffing_params(), reference=ref,
                          xi0=np.array([0.0, -1.0]), t_end=25.0, dt=0.005,
                          store_every=2)
            return simulate(sc)

        a, b = run(), run()
        for field in ("t", "xi", "u_prime", "eta", "y", "z_tilde",
                      "theta_hat", "phi", "sigma"):
            assert np.array_equal(getattr(a, field), getattr(b, field))
        assert a.meta["hash"] == b.meta["hash"]


class TestIntegratorQuality:
    def test_rk4_order_on_linear_plant(self):
        # cubic column removed from the true model; closed form available
        lin = make_polynomial_plant(
            2, 1, [dict(row=0, exponents=[1, 0]),
                   dict(row=0, exponents=[0, 1])], [-0.1, 4.0],
            name="linear_duffing")
        om, A = 2.515, 0.15
        exc = Excitation(np.array([A]), omega=om)
        xi0 = np.array([0.3, 0.2])
        r = np.roots([1.0, 0.1, -4.0])
        Xp = A / (-om ** 2 - (-0.1) * 1j * om - 4.0)

        def analytic(t):
            c = np.linalg.solve(
                np.array([[1.0, 1.0], r]),
                [xi0[1] - Xp.real, xi0[0] - (1j * om * Xp).real])
            xh = c[0] * np.exp(r[0] * t) + c[1] * np.exp(r[1] * t)
            xdh = c[0] * r[0] * np.exp(r[0] * t) + c[1] * r[1] * np.exp(r[1] * t)
            return np.array([(xdh + 1j * om * Xp * np.exp(1j * om * t)).real,
                             (xh + Xp * np.exp(1j * om * t)).real])

        dts = [1e-2, 5e-3, 2.5e-3]
        errs = []
        for dt in dts:
            sc = Scenario(plant=lin, excitation=exc, params=None,
                          reference=None, xi0=xi0, t_end=2.0, dt=dt,
                          mode="open_loop", store_every=10 ** 9)
            tr = simulate(sc)
            errs.append(np.abs(tr.xi[-1] - analytic(tr.t[-1])).max())
        order = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert order >= 3.7

    @pytest.mark.slow
    def test_step_halving_convergence(self, duffing_setup, c6_run, c8_run):
        # default-dt runs differ from half-dt runs by far less than 1e-6
        for scenario, _, _ in (c6_run, c8_run):
            fine = Scenario(
                plant=scenario.plant, excitation=scenario.excitation,
                params=scenario.params, reference=scenario.reference,
                xi0=scenario.xi0, t_end=scenario.t_end, dt=scenario.dt / 2,
                store_every=10 ** 9, label=scenario.label + "+fine")
            coarse_final = simulate(Scenario(
                plant=scenario.plant, excitation=scenario.excitation,
                params=scenario.params, reference=scenario.reference,
                xi0=scenario.xi0, t_end=scenario.t_end, dt=scenario.dt,
                store_every=10 ** 9, label=scenario.label)).xi[-1]
            assert np.abs(simulate(fine).xi[-1] - coarse_final).max() <= 1e-6

    def test_step_halving_duffing(self, duffing_setup):
        plant = duffing_setup["plant"]
        exc = duffing_setup["excitation"]
        T = exc.period
        finals = []
        for div in (2000, 4000):
            sc = Scenario(plant=plant, excitation=exc,
                          params=duffing_setup["params"],
                          reference=duffing_setup["reference"],
                          xi0=np.array([0.0, -1.0]), t_end=100 * T,
                          dt=T / div, store_every=10 ** 9)
            finals.append(simulate(sc).xi[-1])
        assert np.abs(finals[0] - finals[1]).max() <= 1e-6


class TestDivergence:
    def test_unstable_plant_aborts_with_partial_trace(self):
        # saddle without the stabilizing cubic: x grows like exp(2t)
        lin = make_polynomial_plant(
            2, 1, [dict(row=0, exponents=[1, 0]),
                   dict(row=0, exponents=[0, 1])], [-0.1, 4.0])
        sc = Scenario(plant=lin, excitation=Excitation(np.zeros(1), 0.0),
                      params=None, reference=None, xi0=np.array([0.1, 0.1]),
                      t_end=30.0, dt=1e-3, mode="open_loop", store_every=100)
        with pytest.raises(SimulationDiverged) as err:
            simulate(sc)
        assert err.value.t_fail > 0.0
        assert len(err.value.trace) > 10
        assert err.value.t_fail < 30.0


class TestValidation:
    def test_bad_grid(self):
        plant = make_duffing()
        exc = Excitation(np.array([0.15]), 2.515)
        ref = builtin_reference("duffing")
        with pytest.raises(ValueError):
            Scenario(plant=plant, excitation=exc, params=_duffing_params(),
                     reference=ref, xi0=np.zeros(2), t_end=1.0, dt=0.0)
        with pytest.raises(ValueError):
            Scenario(plant=plant, excitation=exc, params=_duffing_params(),
                     reference=ref, xi0=np.zeros(2), t_end=0.001, dt=0.01)

    def test_closed_loop_needs_reference_and_params(self):
        plant = make_duffing()
        exc = Excitation(np.array([0.15]), 2.515)
        with pytest.raises(ValueError):
            Scenario(plant=plant, excitation=exc, params=None,
                     reference=None, xi0=np.zeros(2), t_end=1.0, dt=0.01)

    def test_xi0_length(self):
        plant = make_duffing()
        exc = Excitation(np.array([0.15]), 2.515)
        with pytest.raises(ValueError):
            Scenario(plant=plant, excitation=exc, params=_duffing_params(),
                     reference=builtin_reference("duffing"),
                     xi0=np.zeros(3), t_end=1.0, dt=0.01)

    def test_fingerprint_distinguishes_params(self):
        plant = make_duffing()
        exc = Excitation(np.array([0.15]), 2.515)
        ref = builtin_reference("duffing")
        a = Scenario(plant=plant, excitation=exc, params=_duffing_params(),
                     reference=ref, xi0=np.zeros(2), t_end=1.0, dt=0.01)
        params2 = ControllerParams.from_s_diag(2.0, 1.0, 1.0, 0.1, 2.0, 3,
                                               [1.0])
        b = Scenario(plant=plant, excitation=exc, params=params2,
                     reference=ref, xi0=np.zeros(2), t_end=1.0, dt=0.01)
        assert a.fingerprint() != b.fingerprint()
        assert a.fingerprint() == a.fingerprint()


class TestTraceOutput:
    def test_grid_is_uniform_and_complete(self):
        plant = make_duffing()
        exc = Excitation(np.array([0.15]), 2.515)
        sc = Scenario(plant=plant, excitation=exc, params=_duffing_params(),
                      reference=builtin_reference("duffing"),
                      xi0=np.zeros(2), t_end=1.0, dt=0.001, store_every=7)
        tr = simulate(sc)
        # decimated grid plus the final step
        steps = np.diff(tr.t)
        assert np.allclose(steps[:-1], 0.007, atol=1e-12)
        assert tr.t[-1] == pytest.approx(1.0, abs=1e-12)
        lengths = {len(tr.t), len(tr.xi), len(tr.u_prime), len(tr.eta),
                   len(tr.y), len(tr.z_tilde), len(tr.theta_hat),
                   len(tr.phi), len(tr.sigma)}
        assert lengths == {len(tr)}

    def test_csv_round_trip(self, tmp_path):
        plant = make_duffing()
        exc = Excitation(np.array([0.15]), 2.515)
        sc = Scenario(plant=plant, excitation=exc, params=_duffing_params(),
                      reference=builtin_reference("duffing"),
                      xi0=np.array([0.0, -1.0]), t_end=1.0, dt=0.01)
        tr = simulate(sc)
        path = tmp_path / "trace.csv"
        trace_to_csv(tr, path)
        rows = path.read_text().splitlines()
        header = rows[0].split(",")
        assert header[0] == "t"
        assert "phi" in header
        data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
        assert data.shape == (len(tr), len(header))
        # shortest-repr formatting round-trips exactly
        assert np.array_equal(data[:, 0], tr.t)
        assert np.array_equal(data[:, 1:3], tr.xi)
