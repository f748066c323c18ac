"""Orbit solvers: harmonic balance, Floquet, arclength branches, CBC."""

import numpy as np
import pytest

from cbc_adapt.controller import ControllerParams
from cbc_adapt.plant import Excitation, make_cantilever, make_cross_beam, \
    make_duffing, make_polynomial_plant, cantilever_modal_excitation
from cbc_adapt.continuation import (ConvergenceError, branch_to_csv,
                                    cbc_solve, coeffs_to_signal,
                                    continue_branch, floquet_multipliers,
                                    hb_residual, hb_solve,
                                    linear_response_guess, project_trajectory,
                                    shooting_orbit, signal_to_coeffs)
from cbc_adapt.reference import builtin_reference
from cbc_adapt.simulator import Scenario, simulate


def _duffing_exc(omega=2.515, A=0.15):
    return Excitation(amplitude=np.array([A]), omega=omega)


class TestCoefficientLayout:
    def test_round_trip(self):
        sig = builtin_reference("cross_beam").signal
        c = signal_to_coeffs(sig)
        back = coeffs_to_signal(c, sig.omega, sig.channels, sig.harmonics)
        assert np.array_equal(back.a0, sig.a0)
        assert np.array_equal(back.cos_c, sig.cos_c)
        assert np.array_equal(back.sin_c, sig.sin_c)


class TestResidual:
    def test_equilibrium_is_exact(self):
        # 4x - 2x^3 = 0 at x = sqrt(2), unforced
        plant = make_duffing()
        exc = Excitation(amplitude=np.zeros(1), omega=2.515)
        H = 3
        c = np.zeros(2 * H + 1)
        c[0] = np.sqrt(2.0)
        r = hb_residual(plant, exc, c, 2.515, H)
        assert np.abs(r).max() <= 1e-12

    def test_forced_linear_solution_is_exact(self):
        # without the cubic the analytic forced response solves the system
        lin = make_polynomial_plant(
            2, 1, [dict(row=0, exponents=[1, 0]),
                   dict(row=0, exponents=[0, 1])], [-0.1, 4.0])
        om, A = 2.515, 0.15
        exc = Excitation(np.array([A]), omega=om)
        X = A / (-om ** 2 + 0.1j * om - 4.0)
        H = 3
        c = np.zeros(2 * H + 1)
        c[1] = X.real
        c[1 + H] = -X.imag
        r = hb_residual(lin, exc, c, om, H)
        assert np.linalg.norm(r) <= 1e-10

    def test_printed_coefficients_have_small_nonzero_residual(self):
        plant = make_duffing()
        sig = builtin_reference("duffing").signal.with_harmonics(7)
        r = hb_residual(plant, _duffing_exc(), signal_to_coeffs(sig),
                        2.515, 7)
        norm = np.linalg.norm(r)
        assert 1e-6 < norm < 0.1   # rounded digits, close but not exact


class TestHbSolve:
    def test_linear_plant_converges_immediately(self):
        lin = make_polynomial_plant(
            2, 1, [dict(row=0, exponents=[1, 0]),
                   dict(row=0, exponents=[0, 1])], [-0.1, 4.0])
        om = 2.515
        exc = _duffing_exc(om)
        guess = linear_response_guess(lin, exc, om, H=3)
        # residual is linear in the coefficients: two Newton steps suffice
        orbit = hb_solve(lin, exc, guess, om, H=3, tol=1e-12, max_iter=2)
        assert orbit.residual_norm <= 1e-12

    def test_duffing_refinement(self, duffing_setup):
        orbit = duffing_setup["orbit"]
        assert orbit.residual_norm <= 1e-10
        sig = orbit.signal
        printed = builtin_reference("duffing").signal
        assert abs(sig.a0[0] - printed.a0[0]) <= 5e-3
        for k in range(3):
            assert abs(sig.cos_c[0, k] - printed.cos_c[0, k]) <= 5e-3
            assert abs(sig.sin_c[0, k] - printed.sin_c[0, k]) <= 5e-3
        assert not orbit.stable

    def test_equilibrium_multipliers_match_linearization(self):
        # unforced solve from the constant guess: multipliers are
        # exp(eigenvalues of the Jacobian times the period)
        plant = make_duffing()
        om = 2.515
        exc = Excitation(amplitude=np.zeros(1), omega=om)
        H = 2
        c0 = np.zeros(2 * H + 1)
        c0[0] = 1.5   # near sqrt(2)
        orbit = hb_solve(plant, exc, c0, om, H=H, tol=1e-12)
        assert orbit.signal.a0[0] == pytest.approx(np.sqrt(2.0), abs=1e-10)
        xi_eq = np.array([0.0, np.sqrt(2.0)])
        eig = np.linalg.eigvals(plant.rhs_jacobian(xi_eq))
        expected = np.exp(eig * 2 * np.pi / om)
        got = np.sort_complex(orbit.floquet_multipliers)
        assert got == pytest.approx(np.sort_complex(expected), rel=1e-6)

    def test_failure_raises_with_residual(self):
        plant = make_duffing()
        c0 = np.full(2 * 3 + 1, 50.0)
        with pytest.raises(ConvergenceError) as err:
            hb_solve(plant, _duffing_exc(), c0, 2.515, H=3, max_iter=3)
        assert np.isfinite(err.value.residual_norm) or \
            err.value.residual_norm != err.value.residual_norm


class TestFloquet:
    @pytest.mark.parametrize("name", ["duffing", "cross_beam", "cantilever"])
    def test_liouville_invariant(self, name, duffing_setup):
        if name == "duffing":
            plant = duffing_setup["plant"]
            exc = duffing_setup["excitation"]
            orbit = duffing_setup["orbit"]
        elif name == "cross_beam":
            plant = make_cross_beam()
            exc = Excitation(np.array([1.261, 0.318]), omega=118.814)
            orbit = hb_solve(plant, exc, builtin_reference(name).signal,
                             118.814, H=9, tol=1e-9)
        else:
            plant = make_cantilever()
            exc = cantilever_modal_excitation(2.0, 83.085)
            orbit = hb_solve(plant, exc, builtin_reference(name).signal,
                             83.085, H=9, tol=1e-10)
        xi0 = orbit.to_reference(2).evaluate_state(0.0)
        mult, _, _, tr_int = floquet_multipliers(plant, exc, xi0, orbit.omega)
        prod = np.prod(mult)
        assert abs(prod.imag) <= 1e-9 * abs(prod)
        assert prod.real == pytest.approx(np.exp(tr_int), rel=1e-6)


class TestShootingOracle:
    @pytest.mark.parametrize("name,H,tol", [
        ("duffing", 7, 1e-12), ("cross_beam", 9, 1e-9),
        ("cantilever", 9, 1e-10)])
    def test_agrees_with_harmonic_balance(self, name, H, tol, duffing_setup):
        if name == "duffing":
            plant = duffing_setup["plant"]
            exc = duffing_setup["excitation"]
            orbit = duffing_setup["orbit"]
        elif name == "cross_beam":
            plant = make_cross_beam()
            exc = Excitation(np.array([1.261, 0.318]), omega=118.814)
            orbit = hb_solve(plant, exc, builtin_reference(name).signal,
                             118.814, H=H, tol=tol)
        else:
            plant = make_cantilever()
            exc = cantilever_modal_excitation(2.0, 83.085)
            orbit = hb_solve(plant, exc, builtin_reference(name).signal,
                             83.085, H=H, tol=tol)
        xi0 = orbit.to_reference(2).evaluate_state(0.0)
        _, mult, sig = shooting_orbit(plant, exc, xi0, orbit.omega)
        a = signal_to_coeffs(orbit.signal, H)
        b = signal_to_coeffs(sig.with_harmonics(H), H)
        assert np.abs(a - b).max() <= 1e-6
        # stability classification agrees as well
        assert (np.abs(mult).max() < 1.0) == orbit.stable


@pytest.fixture(scope="module")
def duffing_branch(duffing_setup):
    plant = duffing_setup["plant"]
    exc = Excitation(np.array([0.15]), omega=1.5)
    guess = linear_response_guess(plant, exc, 1.5, x_eq=[np.sqrt(2.0)], H=7)
    seed = hb_solve(plant, exc, guess, 1.5, H=7, tol=1e-12)
    return continue_branch(plant, exc, (1.5, 3.5), seed, ds0=0.05,
                           ds_max=0.15, tol=1e-10)


class TestBranch:
    def test_two_limit_points_bracketing_the_orbit(self, duffing_branch):
        lps = duffing_branch.limit_points()
        assert len(lps) == 2
        lo, hi = sorted(e["omega"] for e in lps)
        assert lo < 2.515 < hi
        for e in lps:
            assert e["bracket"][1] - e["bracket"][0] <= 1e-3

    def test_middle_segment_is_unstable(self, duffing_branch, duffing_setup):
        lps = sorted(e["omega"] for e in duffing_branch.limit_points())
        oms = duffing_branch.omegas()
        # walk the branch between the two folds (arclength order)
        turn = [i for i in range(1, len(oms) - 1)
                if (oms[i] - oms[i - 1]) * (oms[i + 1] - oms[i]) < 0]
        assert len(turn) == 2
        middle = duffing_branch.orbits[turn[0] + 1:turn[1]]
        assert middle and all(not o.stable for o in middle)
        # the middle segment carries the tracked orbit
        mid_oms = [o.omega for o in middle]
        assert min(min(mid_oms), lps[0]) <= 2.515 <= max(max(mid_oms), lps[1])

    def test_consecutive_steps_bounded(self, duffing_branch):
        s_c = max(1e-9, np.abs(duffing_branch.orbits[0].coefficients()).max())
        prev = None
        for orbit in duffing_branch.orbits:
            v = np.concatenate([orbit.coefficients() / s_c, [orbit.omega]])
            if prev is not None:
                assert np.linalg.norm(v - prev) <= 0.15 * 1.5
            prev = v

    def test_small_amplitude_collapses_to_linear_peak(self, duffing_setup):
        # with vanishing forcing the response peaks at the linearized
        # resonance of the positive equilibrium, sqrt(8)
        plant = duffing_setup["plant"]
        A = 1e-5
        exc = Excitation(np.array([A]), omega=2.0)
        guess = linear_response_guess(plant, exc, 2.0, x_eq=[np.sqrt(2.0)],
                                      H=3)
        seed = hb_solve(plant, exc, guess, 2.0, H=3, tol=1e-14)
        br = continue_branch(plant, exc, (2.0, 3.5), seed, ds0=0.05,
                             ds_max=0.1, tol=1e-13)
        oms = br.omegas()
        amps = np.array([o.max_displacement()[0] - np.sqrt(2.0)
                         for o in br.orbits])
        peak_om = oms[np.argmax(np.abs(amps))]
        assert peak_om == pytest.approx(np.sqrt(8.0), abs=0.05)
        # and the amplitude matches the analytic linear response there
        X = A / (-peak_om ** 2 + 0.1j * peak_om - (-8.0))
        assert np.abs(amps).max() == pytest.approx(abs(X), rel=0.05)

    def test_orbit_json_round_trips_reference_format(self, duffing_setup):
        from cbc_adapt.reference import reference_from_json, reference_to_json
        orbit = duffing_setup["orbit"]
        text = reference_to_json(orbit.to_reference(2))
        back = reference_from_json(text)
        assert np.array_equal(back.signal.cos_c, orbit.signal.cos_c)

    def test_branch_csv(self, duffing_branch, tmp_path):
        path = tmp_path / "branch.csv"
        branch_to_csv(duffing_branch, path)
        rows = path.read_text().splitlines()
        header = rows[0].split(",")
        assert header[:3] == ["omega", "stable", "event"]
        assert len(rows) == len(duffing_branch.orbits) + 1
        markers = [r.split(",")[2] for r in rows[1:]]
        assert sum(1 for mk in markers if "LP" in mk) == 2


class TestStabilityConsistency:
    def test_stable_orbit_holds_a_perturbed_start(self, duffing_setup):
        plant = duffing_setup["plant"]
        exc = Excitation(np.array([0.15]), omega=1.5)
        guess = linear_response_guess(plant, exc, 1.5, x_eq=[np.sqrt(2.0)],
                                      H=7)
        orbit = hb_solve(plant, exc, guess, 1.5, H=7, tol=1e-12)
        assert orbit.stable
        ref = orbit.to_reference(2)
        T = exc.period
        sc = Scenario(plant=plant, excitation=exc, params=None,
                      reference=None, xi0=ref.evaluate_state(0.0) + 1e-4,
                      t_end=20 * T, dt=T / 2000, mode="open_loop",
                      store_every=4)
        tr = simulate(sc)
        dev = np.abs(tr.xi - ref.evaluate_state(tr.t)).max()
        assert dev <= 1e-3   # stays in a tube around the orbit

    def test_unstable_orbit_departs(self, duffing_setup):
        plant = duffing_setup["plant"]
        exc = duffing_setup["excitation"]
        ref = duffing_setup["reference"]
        T = exc.period
        sc = Scenario(plant=plant, excitation=exc, params=None,
                      reference=None, xi0=ref.evaluate_state(0.0) + 1e-4,
                      t_end=40 * T, dt=T / 2000, mode="open_loop",
                      store_every=4)
        tr = simulate(sc)
        dev = np.abs(tr.xi - ref.evaluate_state(tr.t)).max()
        assert dev > 0.05


class TestCbc:
    def test_exact_orbit_needs_no_iterations(self, duffing_setup):
        result = cbc_solve(duffing_setup["plant"],
                           duffing_setup["excitation"],
                           duffing_setup["params"],
                           duffing_setup["reference"],
                           tol=1e-4, max_iter=3, H=7, periods=100)
        assert result.converged
        assert result.iterations == 0

    def test_unreachable_tolerance_raises(self, duffing_setup):
        from cbc_adapt.reference import perturb_coefficients
        start = perturb_coefficients(duffing_setup["reference"], 0.05, 3)
        with pytest.raises(ConvergenceError):
            cbc_solve(duffing_setup["plant"], duffing_setup["excitation"],
                      duffing_setup["params"], start,
                      tol=1e-15, max_iter=1, H=7, periods=12)

    def test_frequency_mismatch_rejected(self, duffing_setup):
        bad = Excitation(np.array([0.15]), omega=2.6)
        with pytest.raises(ValueError):
            cbc_solve(duffing_setup["plant"], bad, duffing_setup["params"],
                      duffing_setup["reference"], H=7)


class TestProjection:
    def test_projection_recovers_series(self):
        sig = builtin_reference("duffing").signal
        T = sig.period
        t = np.arange(128) * (T / 128)
        x = sig.evaluate(t)
        back = project_trajectory(t, x, sig.omega, H=3)
        assert np.allclose(back.a0, sig.a0, atol=1e-12)
        assert np.allclose(back.cos_c, sig.cos_c, atol=1e-12)
        assert np.allclose(back.sin_c, sig.sin_c, atol=1e-12)

    def test_phase_is_taken_from_the_time_values(self):
        sig = builtin_reference("duffing").signal
        T = sig.period
        t = 3.25 * T + np.arange(128) * (T / 128)
        back = project_trajectory(t, sig.evaluate(t), sig.omega, H=3)
        assert np.allclose(back.cos_c, sig.cos_c, atol=1e-12)
        assert np.allclose(back.sin_c, sig.sin_c, atol=1e-12)
