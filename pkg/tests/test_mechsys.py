import numpy as np
import pytest
import scipy.linalg

import ssmkit as sk
from ssmkit.errors import InvalidArgumentError
from ssmkit.mechsys import (
    MechSystem,
    NonlinearTerm,
    Trajectory,
    first_order_matrix,
    mechanical_energy,
)

# Oracle values frozen from an independent eigendecomposition of the chain
# (block assembly + scipy.linalg.eig below); the slow pair matches the
# published zero-amplitude limits (0.001201, 0.2827) and (0.7850).
CHAIN_LAMBDA1 = -0.0011995726 + 0.2825377791j
CHAIN_LAMBDA2 = -0.0025405735 + 0.7849987024j


def oracle_chain_eigenvalues():
    """Independent assembly + scipy eigensolver, positive-Im sorted."""
    m = np.diag([1.5, 1.0, 1.0, 1.0, 1.0])
    k = np.array([
        [2.0, -1.0, 0.0, 0.0, 0.0],
        [-1.0, 2.0, -1.0, 0.0, 0.0],
        [0.0, -1.0, 2.0, -1.0, 0.0],
        [0.0, 0.0, -1.0, 2.0, -1.0],
        [0.0, 0.0, 0.0, -1.0, 1.0],
    ])
    c = 0.002 * m + 0.005 * k
    minv = scipy.linalg.inv(m)
    a = np.block([[np.zeros((5, 5)), np.eye(5)],
                  [-minv @ k, -minv @ c]])
    vals = scipy.linalg.eigvals(a)
    vals = vals[vals.imag > 0]
    return a, vals[np.argsort(vals.imag)]


class TestChainAssembly:
    def test_benchmark_chain_matrices(self, chain):
        np.testing.assert_allclose(np.diag(chain.mass), [1.5, 1, 1, 1, 1])
        assert chain.stiffness[0, 0] == 2.0
        assert chain.stiffness[4, 4] == 1.0          # free far end
        assert chain.stiffness[1, 2] == -1.0
        np.testing.assert_allclose(
            chain.damping, 0.002 * chain.mass + 0.005 * chain.stiffness)

    def test_benchmark_nonlinear_force(self, chain):
        # 0.33 v1^2 + 3 q1^3 + 0.7 q1^2 v1 + 0.5 v1^3 on the first mass
        q = np.array([0.4, 0, 0, 0, 0])
        v = np.array([-0.3, 0, 0, 0, 0])
        f = chain.nonlinear_force(q, v)
        expected = (0.33 * 0.09 + 3 * 0.064 + 0.7 * 0.16 * (-0.3)
                    + 0.5 * (-0.027))
        assert f[0] == pytest.approx(expected, rel=1e-14)
        np.testing.assert_allclose(f[1:], 0.0)

    def test_two_mass_undamped_chain_symmetric(self):
        sysm = sk.build_oscillator_chain(2, 1.0, 1.0, 0.0, 0.0)
        np.testing.assert_allclose(sysm.stiffness, sysm.stiffness.T)
        np.testing.assert_allclose(sysm.damping, 0.0)

    def test_invalid_arguments(self):
        with pytest.raises(InvalidArgumentError):
            sk.build_oscillator_chain(1, 1.0, 1.0, 0.0, 0.0)
        with pytest.raises(InvalidArgumentError):
            sk.build_oscillator_chain(3, -1.0, 1.0, 0.0, 0.0)

    def test_mass_matrix_validation(self):
        with pytest.raises(InvalidArgumentError):
            MechSystem(mass=np.array([[1.0, 0.5], [0.0, 1.0]]),
                       stiffness=np.eye(2), damping=np.zeros((2, 2)))
        with pytest.raises(InvalidArgumentError):
            MechSystem(mass=np.diag([1.0, 0.0]), stiffness=np.eye(2),
                       damping=np.zeros((2, 2)))

    def test_nonlinear_force_must_vanish_at_origin(self):
        with pytest.raises(InvalidArgumentError):
            MechSystem(mass=np.eye(1), stiffness=np.eye(1),
                       damping=np.zeros((1, 1)),
                       nonlinear_terms=(NonlinearTerm(0, (0,), (0,), 2.0),))

    def test_json_round_trip(self, chain, tmp_path):
        path = tmp_path / "sys.json"
        chain.save(path)
        loaded = MechSystem.load(path)
        np.testing.assert_array_equal(loaded.mass, chain.mass)
        np.testing.assert_array_equal(loaded.stiffness, chain.stiffness)
        assert loaded.nonlinear_terms == chain.nonlinear_terms


class TestLinearize:
    def test_single_dof_undamped(self):
        sysm = MechSystem(mass=np.eye(1), stiffness=np.eye(1),
                          damping=np.zeros((1, 1)))
        _, spec = sk.linearize(sysm)
        np.testing.assert_allclose(spec.eigenvalues, [1j, -1j], atol=1e-12)

    def test_chain_matches_independent_oracle(self, chain, chain_spectrum):
        a_oracle, vals_oracle = oracle_chain_eigenvalues()
        spec = chain_spectrum["spectrum"]
        np.testing.assert_allclose(chain_spectrum["a"], a_oracle, atol=1e-14)
        ours = np.array([spec.mode_eigenvalue(j) for j in range(1, 6)])
        np.testing.assert_allclose(ours, vals_oracle, rtol=1e-9)
        assert ours[0] == pytest.approx(CHAIN_LAMBDA1, abs=1e-9)
        assert ours[1] == pytest.approx(CHAIN_LAMBDA2, abs=1e-9)

    def test_all_chain_modes_decay(self, chain_spectrum):
        spec = chain_spectrum["spectrum"]
        assert spec.stable
        assert np.all(spec.eigenvalues.real < 0)

    def test_conjugate_pairing(self, chain_spectrum):
        vals = chain_spectrum["spectrum"].eigenvalues
        np.testing.assert_allclose(vals[0::2], np.conj(vals[1::2]),
                                   rtol=0, atol=1e-12)

    def test_ordering_by_decreasing_real_part(self, chain_spectrum):
        re = chain_spectrum["spectrum"].eigenvalues[0::2].real
        assert np.all(np.diff(re) < 0)

    def test_eigenpair_residuals(self, chain, chain_spectrum):
        a = chain_spectrum["a"]
        spec = chain_spectrum["spectrum"]
        for j in range(a.shape[0]):
            v = spec.eigenvectors[:, j]
            res = np.linalg.norm(a @ v - spec.eigenvalues[j] * v)
            assert res < 1e-8

    def test_linear_terms_in_nonlinear_list_enter_linearization(self):
        # a degree-1 "nonlinear" entry must shift the spectrum
        sysm = MechSystem(mass=np.eye(1), stiffness=np.eye(1),
                          damping=np.zeros((1, 1)),
                          nonlinear_terms=(NonlinearTerm(0, (0,), (1,), 0.2),))
        a = first_order_matrix(sysm)
        assert a[1, 1] == pytest.approx(-0.2)


class TestIntegrate:
    def test_damped_oscillator_matches_analytic(self):
        m, k, c = 1.0, 1.0, 0.1
        sysm = MechSystem(mass=[[m]], stiffness=[[k]], damping=[[c]])
        zeta = c / (2 * np.sqrt(k * m))
        wd = np.sqrt(1 - zeta**2)
        traj = sk.integrate(sysm, [1.0, 0.0], (0.0, 20 * np.pi), 0.05)
        t = traj.times
        analytic = np.exp(-zeta * t) * (np.cos(wd * t)
                                        + zeta / wd * np.sin(wd * t))
        assert np.abs(traj.channel("q1") - analytic).max() < 1e-7

    def test_decay_rate_matches_slow_eigenvalue(self, chain, chain_spectrum):
        # log-decrement oracle on a small-amplitude slow-mode trajectory
        spec = chain_spectrum["spectrum"]
        x0 = sk.slow_eigenspace_ic(spec, [1], [0.01])
        traj = sk.integrate(chain, x0, (0.0, 400.0), 0.05)
        q5 = np.abs(traj.channel("q5"))
        period = int(round(2 * np.pi / 0.2825 / 0.05))
        n_per = len(q5) // period
        peaks = q5[:n_per * period].reshape(n_per, period).max(axis=1)
        slope = np.polyfit((np.arange(n_per) + 0.5) * period * 0.05,
                           np.log(peaks), 1)[0]
        assert slope == pytest.approx(CHAIN_LAMBDA1.real, rel=0.01)

    def test_invalid_spans(self, chain):
        with pytest.raises(InvalidArgumentError):
            sk.integrate(chain, np.zeros(10), (0.0, 1.0), -0.1)
        with pytest.raises(InvalidArgumentError):
            sk.integrate(chain, np.zeros(10), (1.0, 1.0), 0.1)

    def test_finite_time_blowup_reports_last_time(self):
        # softening cubic with an escape orbit: the step size underflows
        # and the error carries the last valid time
        from ssmkit.errors import IntegrationError
        sysm = MechSystem(
            mass=np.eye(1), stiffness=np.eye(1), damping=np.zeros((1, 1)),
            nonlinear_terms=(NonlinearTerm(0, (3,), (0,), -5.0),))
        with pytest.raises(IntegrationError) as err:
            sk.integrate(sysm, [2.0, 0.0], (0.0, 50.0), 0.1)
        assert err.value.last_time is not None
        assert 0.0 <= err.value.last_time < 50.0

    def test_forced_linear_response(self):
        # steady state of a forced linear oscillator vs transfer function
        sysm = MechSystem(mass=[[1.0]], stiffness=[[1.0]], damping=[[0.1]])
        omega = 0.8
        forcing = sk.ForcingSignal(shape=np.array([1.0]), omega=omega,
                                   amplitude=0.05)
        traj = sk.integrate(sysm, [0.0, 0.0], (0.0, 700.0), 0.02,
                            forcing=forcing)
        steady = traj.states[-2000:, 0]
        expected = 0.05 / np.sqrt((1 - omega**2)**2 + (0.1 * omega)**2)
        assert np.abs(steady).max() == pytest.approx(expected, rel=1e-4)

    def test_energy_decay_linear_chain(self, linear_chain):
        _, spec = sk.linearize(linear_chain)
        x0 = sk.slow_eigenspace_ic(spec, [1, 2], [1.0, 0.5])
        traj = sk.integrate(linear_chain, x0, (0.0, 300.0), 0.25)
        energy = mechanical_energy(linear_chain, traj)
        rel_increase = np.diff(energy) / energy[0]
        assert np.all(rel_increase < 1e-8)

    def test_linear_regime_consistency(self, chain, linear_chain,
                                       chain_spectrum):
        # halving the amplitude must at least halve the normalized deviation
        spec = chain_spectrum["spectrum"]
        deviations = []
        for eps in (0.02, 0.01):
            x0 = sk.slow_eigenspace_ic(spec, [1], [eps])
            nl = sk.integrate(chain, x0, (0.0, 200.0), 0.5)
            lin = sk.integrate(linear_chain, x0, (0.0, 200.0), 0.5)
            dev = np.linalg.norm(nl.states - lin.states, axis=1).max()
            deviations.append(dev / eps)
        assert deviations[1] <= 0.55 * deviations[0]

    def test_integrator_order_against_fixed_step_rk4(self, chain,
                                                     chain_spectrum):
        spec = chain_spectrum["spectrum"]
        x0 = sk.slow_eigenspace_ic(spec, [1], [1.0])
        from ssmkit.mechsys import make_rhs
        rhs = make_rhs(chain)
        reference = sk.integrate(chain, x0, (0.0, 20.0), 20.0,
                                 rtol=1e-12, atol=1e-14).states[-1]

        def rk4(dt):
            n = int(round(20.0 / dt))
            x = x0.copy()
            t = 0.0
            for _ in range(n):
                k1 = rhs(t, x)
                k2 = rhs(t + dt / 2, x + dt / 2 * k1)
                k3 = rhs(t + dt / 2, x + dt / 2 * k2)
                k4 = rhs(t + dt, x + dt * k3)
                x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                t += dt
            return x

        err_coarse = np.linalg.norm(rk4(0.1) - reference)
        err_fine = np.linalg.norm(rk4(0.05) - reference)
        assert err_coarse / err_fine >= 8.0


class TestSlowEigenspaceIc:
    def test_zero_amplitude(self, chain_spectrum):
        x0 = sk.slow_eigenspace_ic(chain_spectrum["spectrum"], [1], [0.0])
        np.testing.assert_allclose(x0, 0.0)

    def test_membership_in_modal_plane(self, chain_spectrum):
        spec = chain_spectrum["spectrum"]
        x0 = sk.slow_eigenspace_ic(spec, [1], [1.7])
        v = spec.mode_eigenvector(1)
        basis = np.column_stack([v.real, v.imag])
        q, _ = np.linalg.qr(basis)
        residual = x0 - q @ (q.T @ x0)
        assert np.linalg.norm(residual) < 1e-10 * np.linalg.norm(x0)

    def test_empty_mode_set_rejected(self, chain_spectrum):
        with pytest.raises(InvalidArgumentError):
            sk.slow_eigenspace_ic(chain_spectrum["spectrum"], [], [])

    def test_two_mode_ic_shows_two_frequencies(self, chain, chain_spectrum):
        spec = chain_spectrum["spectrum"]
        x0 = sk.slow_eigenspace_ic(spec, [1, 2], [1.0, 1.0])
        traj = sk.integrate(chain, x0, (0.0, 1200.0), 0.445)
        assert sk.count_dominant_frequencies(traj, channel="q5") == 2


class TestMode2CrossDampingOracle:
    def test_mode1_amplitude_increases_mode2_decay(self, chain,
                                                   chain_spectrum):
        """Full-order oracle pinning the sign of the rho1^2 rho2 term.

        The mode-2 modal amplitude must decay faster when mode 1 is
        excited, i.e. the cross coefficient in the mode-2 amplitude
        equation is negative.
        """
        spec = chain_spectrum["spectrum"]
        left = np.linalg.inv(spec.eigenvectors)[2]  # mode-2 left eigenvector
        rates = []
        for a1 in (0.0, 3.0):
            x0 = sk.slow_eigenspace_ic(spec, [1, 2], [a1, 1.2])
            traj = sk.integrate(chain, x0, (0.0, 400.0), 0.05)
            amp = np.abs(traj.states @ left)
            per = int(round(8.0 / 0.05))
            n_per = len(amp) // per
            peaks = amp[:n_per * per].reshape(n_per, per).max(axis=1)
            t_mid = (np.arange(n_per) + 0.5) * 8.0
            sel = (t_mid > 100) & (t_mid < 300)
            rates.append(np.polyfit(t_mid[sel], np.log(peaks[sel]), 1)[0])
        assert rates[1] < rates[0] < 0


class TestTrajectory:
    def test_csv_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        traj = Trajectory(times=0.25 * np.arange(50),
                          states=rng.standard_normal((50, 3)),
                          channel_labels=("a", "b", "c"))
        path = tmp_path / "t.csv"
        traj.to_csv(path)
        loaded = Trajectory.from_csv(path)
        np.testing.assert_array_equal(loaded.times, traj.times)
        np.testing.assert_array_equal(loaded.states, traj.states)
        assert loaded.channel_labels == traj.channel_labels

    def test_nonuniform_times_rejected(self):
        with pytest.raises(InvalidArgumentError):
            Trajectory(times=np.array([0.0, 0.1, 0.3]),
                       states=np.zeros((3, 1)))

    def test_label_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            Trajectory(times=np.arange(3.0), states=np.zeros((3, 2)),
                       channel_labels=("only_one",))
