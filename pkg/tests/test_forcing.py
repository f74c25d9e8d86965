import numpy as np
import pytest

import ssmkit as sk
from ssmkit.errors import (
    CalibrationRangeError,
    InvalidArgumentError,
)
from ssmkit.forcing import (
    corotating_jacobian,
    corotating_residual,
    corotation_exponents,
    refine_frc_peak,
)
from ssmkit.mechsys import MechSystem
from ssmkit.normalform import NormalFormForcing, normal_trajectory_to_complex
from conftest import synthetic_polar_model

LINEAR_LAM = -0.05 + 1.0j
HARDENING_GAMMA = -0.002 + 0.15j


class TestClosedForm2d:
    def test_linear_model_matches_lorentzian(self):
        _, pm = synthetic_polar_model(LINEAR_LAM, 0.0j)
        f = 0.02
        branch = sk.frc_closed_form_2d(pm, f, np.linspace(1e-3, 0.39, 500))
        for p in branch.points:
            rho = p.rho[0]
            expected = f / np.sqrt((p.omega - 1.0) ** 2 + 0.05 ** 2)
            assert rho == pytest.approx(expected, rel=1e-10)

    def test_linear_phase_sign_convention(self):
        # below resonance the response is nearly in phase, above it
        # approaches -pi; at resonance the lag is exactly -pi/2
        _, pm = synthetic_polar_model(LINEAR_LAM, 0.0j)
        branch = sk.frc_closed_form_2d(pm, 0.02, np.linspace(1e-3, 0.39, 400))
        omegas = branch.omegas
        psis = np.array([p.psi[0] for p in branch.points])
        assert psis[np.argmin(omegas)] > -0.2
        assert psis[np.argmax(omegas)] < -2.9
        assert np.all((-np.pi <= psis) & (psis <= 0))

    def test_peak_conditions(self):
        _, pm = synthetic_polar_model(LINEAR_LAM, HARDENING_GAMMA)
        f = 0.03
        branch = sk.frc_closed_form_2d(pm, f, np.linspace(1e-3, 0.8, 800))
        peak = branch.peak_point()
        rho = peak.rho[0]
        # f = alpha(rho) rho, Omega = omega(rho), psi = -pi/2 at the peak
        assert pm.alpha(1, peak.rho) * rho == pytest.approx(f, rel=1e-9)
        assert peak.omega == pytest.approx(pm.omega(1, peak.rho), rel=1e-12)
        assert peak.psi[0] == pytest.approx(-np.pi / 2, abs=1e-12)

    def test_hardening_has_two_folds_with_unstable_middle(self):
        _, pm = synthetic_polar_model(LINEAR_LAM, HARDENING_GAMMA)
        branch = sk.frc_closed_form_2d(pm, 0.06,
                                       np.linspace(1e-3, 1.2, 3000))
        assert len(branch.fold_indices) == 2
        lo, hi = branch.fold_indices
        segment = branch.stability[lo:hi]
        assert not segment.any()                  # between folds: unstable
        outside = np.concatenate([branch.stability[:lo - 1],
                                  branch.stability[hi + 2:]])
        assert outside.all()

    def test_zero_forcing_rejected(self):
        _, pm = synthetic_polar_model(LINEAR_LAM, 0.0j)
        with pytest.raises(InvalidArgumentError, match="backbone"):
            sk.frc_closed_form_2d(pm, 0.0, np.linspace(0.01, 1.0, 10))

    def test_validity_warning_for_large_forcing(self):
        _, pm = synthetic_polar_model(LINEAR_LAM, 0.0j)
        with pytest.warns(UserWarning, match="accuracy"):
            sk.frc_closed_form_2d(pm, 1.0, np.linspace(0.01, 1.0, 50))

    def test_branch_satisfies_defining_equation(self):
        _, pm = synthetic_polar_model(LINEAR_LAM, HARDENING_GAMMA)
        f = 0.03
        branch = sk.frc_closed_form_2d(pm, f, np.linspace(1e-3, 0.8, 200))
        for p in branch.points[::7]:
            rho = p.rho[0]
            res = ((pm.alpha(1, p.rho) * rho) ** 2
                   + (pm.omega(1, p.rho) - p.omega) ** 2 * rho ** 2 - f ** 2)
            assert abs(res) < 1e-9


class TestContinuation:
    def test_agrees_with_closed_form(self):
        nf, pm = synthetic_polar_model(LINEAR_LAM, HARDENING_GAMMA)
        f = 0.03
        cfg = sk.ForcingConfig(omega_range=(0.8, 1.35), f_modal=[f])
        branch = sk.frc_continuation(pm, cfg)[0]
        assert len(branch.points) > 50
        # each continuation point must satisfy the closed-form relation:
        # Newton-polish rho at fixed Omega and compare
        for p in branch.points[::11]:
            rho = p.rho[0]

            def g(r):
                return ((pm.alpha(1, [r]) * r) ** 2
                        + (pm.omega(1, [r]) - p.omega) ** 2 * r ** 2 - f ** 2)

            eps = 1e-7 * max(rho, 1e-3)
            for _ in range(60):
                slope = (g(rho + eps) - g(rho - eps)) / (2 * eps)
                step = g(rho) / slope
                rho -= step
                if abs(step) < 1e-14:
                    break
            assert abs(rho - p.rho[0]) < 1e-8

    def test_jacobian_matches_finite_differences(self):
        nf, _ = synthetic_polar_model(LINEAR_LAM, HARDENING_GAMMA)
        rng = np.random.default_rng(4)
        w = rng.standard_normal(1) + 1j * rng.standard_normal(1)
        omega = 1.07
        c = np.array([1])
        f = np.array([0.03])
        jac = corotating_jacobian(nf, w, omega, c)
        eps = 1e-7
        for col, du in enumerate(([eps, 0.0], [0.0, eps])):
            dw = np.array([du[0] + 1j * du[1]])
            rp = corotating_residual(nf, w + dw, omega, f, c)
            rm = corotating_residual(nf, w - dw, omega, f, c)
            fd = (rp - rm) / (2 * eps)
            col_fd = np.array([fd[0].real, fd[0].imag])
            np.testing.assert_allclose(jac[:, col], col_fd, rtol=1e-6,
                                       atol=1e-8)

    def test_stability_consistency_with_integration(self):
        nf, pm = synthetic_polar_model(LINEAR_LAM, HARDENING_GAMMA)
        f = 0.06
        cfg = sk.ForcingConfig(omega_range=(0.9, 1.3), f_modal=[f])
        branch = sk.frc_continuation(pm, cfg)[0]
        stable_pts = [p for p in branch.points if p.stable]
        unstable_pts = [p for p in branch.points if not p.stable]
        assert stable_pts and unstable_pts
        # a stable fixed point stays put for 100 forcing periods
        p = stable_pts[len(stable_pts) // 2]
        z0 = p.rho * np.exp(1j * p.psi)
        periods = 100 * 2 * np.pi / p.omega
        traj = sk.evolve_normal_form(
            nf, z0, (0.0, periods), periods / 400,
            forcing=NormalFormForcing(amplitudes=[f], omega=p.omega))
        z = normal_trajectory_to_complex(traj)[:, 0]
        w = z * np.exp(-1j * p.omega * traj.times)
        assert np.abs(w - z0).max() < 0.01 * np.abs(z0)
        # an unstable point departs under a small nudge
        p = unstable_pts[len(unstable_pts) // 2]
        z0 = p.rho * np.exp(1j * p.psi) * (1 + 1e-4)
        traj = sk.evolve_normal_form(
            nf, z0, (0.0, periods), periods / 400,
            forcing=NormalFormForcing(amplitudes=[f], omega=p.omega))
        z = normal_trajectory_to_complex(traj)[:, 0]
        w = z * np.exp(-1j * p.omega * traj.times)
        assert np.abs(w - p.rho * np.exp(1j * p.psi)).max() \
            > 0.05 * np.abs(z0)

    def test_peak_refinement_quadrature(self):
        nf, pm = synthetic_polar_model(LINEAR_LAM, HARDENING_GAMMA)
        f = 0.03
        cfg = sk.ForcingConfig(omega_range=(0.9, 1.3), f_modal=[f])
        branch = sk.frc_continuation(pm, cfg)[0]
        peak = refine_frc_peak(pm, branch, [f])
        assert peak.psi[0] == pytest.approx(-np.pi / 2, abs=1e-9)
        assert peak.omega == pytest.approx(pm.omega(1, peak.rho), rel=1e-9)
        assert pm.alpha(1, peak.rho) * peak.rho[0] == pytest.approx(
            f, rel=1e-9)

    def test_backbone_coincidence_across_forcing_levels(self):
        nf, pm = synthetic_polar_model(LINEAR_LAM, HARDENING_GAMMA)
        f0 = 0.03
        for f in (0.5 * f0, f0, 2 * f0):
            cfg = sk.ForcingConfig(omega_range=(0.9, 1.4), f_modal=[f])
            branch = sk.frc_continuation(pm, cfg)[0]
            peak = refine_frc_peak(pm, branch, [f])
            # the peak lies on the decaying-oscillation backbone
            assert abs(peak.omega - pm.omega(1, peak.rho)) < 1e-9

    def test_corotation_exponents(self):
        nf, _ = synthetic_polar_model(LINEAR_LAM, 0.0j)
        np.testing.assert_array_equal(corotation_exponents(nf), [1])
        from test_normalform import resonant_tester_model
        nf12 = resonant_tester_model()
        np.testing.assert_array_equal(corotation_exponents(nf12), [1, 2])
        pm12 = sk.to_polar(nf12)
        cfg = sk.ForcingConfig(omega_range=(700.0, 800.0),
                               f_modal=[0.0, 1.0])
        with pytest.raises(InvalidArgumentError, match="co-rotation"):
            sk.frc_continuation(pm12, cfg)


class TestCalibration:
    def test_linear_peak_calibration(self):
        _, pm = synthetic_polar_model(LINEAR_LAM, 0.0j)
        gain = 2.3   # amp map amp = gain * rho
        amp_fn = lambda r: gain * r
        measured_peak = 0.46             # rho* = 0.2
        f = sk.calibrate_forcing(pm, measured_peak, rho_max=1.0,
                                 amplitude_fn=amp_fn)
        assert f == pytest.approx(0.05 * 0.2, rel=1e-9)

    def test_off_peak_calibration(self):
        _, pm = synthetic_polar_model(LINEAR_LAM, 0.0j)
        f_true = 0.02
        omega_star = 1.03
        rho_star = f_true / np.sqrt(0.03 ** 2 + 0.05 ** 2)
        f = sk.calibrate_forcing(pm, (omega_star, rho_star), rho_max=1.0)
        assert f == pytest.approx(f_true, rel=1e-9)

    def test_out_of_range(self):
        _, pm = synthetic_polar_model(LINEAR_LAM, 0.0j)
        with pytest.raises(CalibrationRangeError):
            sk.calibrate_forcing(pm, 5.0, rho_max=1.0)


class TestSweepOracle:
    def test_linear_single_dof_matches_transfer_function(self):
        sysm = MechSystem(mass=[[1.0]], stiffness=[[1.0]],
                          damping=[[0.04]])
        shape = np.array([1.0])
        amp_f = 0.01
        omegas = np.array([0.85, 0.95, 1.0, 1.05, 1.15])
        result = sk.forced_sweep_oracle(sysm, shape, amp_f, omegas,
                                        observable=0, settle_rel_tol=1e-8,
                                        samples_per_period=128,
                                        rtol=1e-9, atol=1e-12)
        expected = amp_f / np.sqrt((1 - omegas**2) ** 2 + (0.04 * omegas) ** 2)
        np.testing.assert_allclose(result.amp_up, expected, atol=1e-6)
        np.testing.assert_allclose(result.amp_down, expected, atol=1e-6)
        assert result.settled_up.all() and result.settled_down.all()
        assert result.hysteresis_interval() is None

    def test_csv_export(self, tmp_path):
        result = sk.SweepOracleResult(
            omegas=np.array([1.0, 2.0]), amp_up=np.array([0.1, 0.2]),
            amp_down=np.array([0.1, 0.2]),
            settled_up=np.array([True, True]),
            settled_down=np.array([True, True]),
            periods_up=np.array([5, 5]), periods_down=np.array([4, 4]))
        path = tmp_path / "sweep.csv"
        result.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "omega,amp_up,amp_down"
        assert len(lines) == 3


class TestForcingConfig:
    def test_validation(self):
        with pytest.raises(InvalidArgumentError):
            sk.ForcingConfig(omega_range=(1.0, 1.0), f_modal=[0.1])
        with pytest.raises(InvalidArgumentError):
            sk.ForcingConfig(omega_range=(0.5, 1.0), f_modal=[-0.1])

    def test_branch_csv(self, tmp_path):
        _, pm = synthetic_polar_model(LINEAR_LAM, 0.0j)
        branch = sk.frc_closed_form_2d(pm, 0.02,
                                       np.linspace(1e-3, 0.39, 50))
        path = tmp_path / "frc.csv"
        branch.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "omega,rho1,psi1,amp,stable,fold"
        assert len(lines) == len(branch.points) + 1
