"""Physical predictions from fitted models: backbones, amplitudes, NMTE."""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import interp1d

from .errors import InvalidArgumentError, ValidityRangeError
from .mechsys import Trajectory
from .normalform import evolve_normal_form, normal_trajectory_to_complex

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class BackboneCurve:
    """Amplitude-parametrized instantaneous damping and frequency curves."""

    mode: int
    rho_grid: np.ndarray
    alpha_vals: np.ndarray           # [1/s]
    omega_vals: np.ndarray           # [rad/s]
    amp_vals: np.ndarray             # physical amplitude of the observable
    damping_ratio_vals: np.ndarray   # alpha/omega in percent

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("rho,alpha,omega,damping_ratio_pct,amp\n")
            for row in zip(self.rho_grid, self.alpha_vals, self.omega_vals,
                           self.damping_ratio_vals, self.amp_vals):
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def resolve_observable(g, dim):
    """Normalize an observable selector to a callable on sample batches.

    ``g`` may be None (first coordinate), an integer channel index, or a
    callable mapping (n, p) arrays to (n,) values.
    """
    if g is None:
        g = 0
    if isinstance(g, (int, np.integer)):
        idx = int(g)
        if not 0 <= idx < dim:
            raise InvalidArgumentError(f"observable index {idx} out of range")
        return lambda y: np.atleast_2d(y)[:, idx]
    if callable(g):
        return lambda y: np.asarray(g(np.atleast_2d(y)))
    raise InvalidArgumentError("observable must be None, an index or callable")


def make_amplitude_map(mani, nf, g=None, mode=1, n_theta=256,
                       phase_tol=1e-10):
    """Physical amplitude of single-mode oscillation as a function of rho.

    Returns a callable amp(rho) evaluating
    max over theta of |g(lift(Re(T h(z))))| with z the mode's circle of
    radius rho. The discrete 256-point maximum is refined by golden-section
    search around the argmax.
    """
    g_fn = resolve_observable(g, mani.observable_dim)
    m = nf.mode_count
    if not 1 <= mode <= m:
        raise InvalidArgumentError(f"mode {mode} out of range")

    def signal(rho, thetas):
        thetas = np.atleast_1d(thetas)
        z = np.zeros((len(thetas), 2 * m), dtype=complex)
        z[:, 2 * (mode - 1)] = rho * np.exp(1j * thetas)
        z[:, 2 * (mode - 1) + 1] = np.conj(z[:, 2 * (mode - 1)])
        xi = nf.normal_to_reduced(z)
        return np.abs(g_fn(mani.lift(xi)))

    def amp(rho):
        if rho < 0:
            raise InvalidArgumentError("rho must be >= 0")
        if rho == 0.0:
            return 0.0
        thetas = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
        vals = signal(rho, thetas)
        k = int(np.argmax(vals))
        span = 2.0 * np.pi / n_theta
        a, b = thetas[k] - span, thetas[k] + span
        # golden-section refinement of the phase of the maximum
        c = b - _GOLDEN * (b - a)
        d = a + _GOLDEN * (b - a)
        fc = signal(rho, c)[0]
        fd = signal(rho, d)[0]
        while (b - a) > phase_tol:
            if fc > fd:
                b, d, fd = d, c, fc
                c = b - _GOLDEN * (b - a)
                fc = signal(rho, c)[0]
            else:
                a, c, fc = c, d, fd
                d = a + _GOLDEN * (b - a)
                fd = signal(rho, d)[0]
        return float(max(fc, fd, vals[k]))

    return amp


def amplitude_map(mani, nf, g, rho, mode=1):
    """Physical oscillation amplitude at normal-form amplitude rho."""
    return make_amplitude_map(mani, nf, g, mode=mode)(rho)


def backbone(pm, mode, rho_max, observable=None, mani=None, nf=None,
             n_points=200):
    """Backbone curves of one mode: alpha, omega, damping ratio, amplitude.

    Other modes' amplitudes are held at zero. When a manifold and
    normal-form model are supplied, physical amplitudes come from the
    amplitude map of the given observable; otherwise the normal-form
    amplitude itself is reported.

    Raises
    ------
    ValidityRangeError if omega_j drops to zero on the grid; the error
    carries the largest admissible rho.
    """
    if rho_max <= 0:
        raise InvalidArgumentError("rho_max must be positive")
    m = pm.mode_count
    grid = np.linspace(0.0, rho_max, n_points)
    alphas = np.empty(n_points)
    omegas = np.empty(n_points)
    for i, r in enumerate(grid):
        rho_vec = np.zeros(m)
        rho_vec[mode - 1] = r
        alphas[i] = pm.alpha(mode, rho_vec)
        omegas[i] = pm.omega(mode, rho_vec)
    if np.any(omegas <= 0):
        bad = int(np.argmax(omegas <= 0))
        rho_valid = grid[bad - 1] if bad > 0 else 0.0
        raise ValidityRangeError(
            f"omega_{mode} becomes non-positive at rho = {grid[bad]:.6g}; "
            f"largest admissible rho is {rho_valid:.6g}",
            rho_valid=float(rho_valid))
    if mani is not None and nf is not None:
        amp_fn = make_amplitude_map(mani, nf, observable, mode=mode)
        amps = np.array([amp_fn(r) for r in grid])
    else:
        amps = grid.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(omegas > 0, 100.0 * alphas / omegas, np.nan)
    return BackboneCurve(mode=mode, rho_grid=grid, alpha_vals=alphas,
                         omega_vals=omegas, amp_vals=amps,
                         damping_ratio_vals=ratio)


def predict_trajectory(mani, nf, y0, t_span, dt_out, forcing=None,
                       projection_warn_fraction=0.10, rtol=1e-10):
    """Reduced-order prediction from an observable-space initial condition.

    Chain: project -> modal change -> h^{-1} -> integrate normal form ->
    h -> modal change back -> lift. Emits a warning when y0 is far from
    the manifold.
    """
    y0 = np.asarray(y0, dtype=float)
    norm0 = np.linalg.norm(y0)
    if norm0 == 0.0:
        n_out = int(np.floor((t_span[1] - t_span[0]) / dt_out + 1e-9)) + 1
        times = t_span[0] + dt_out * np.arange(n_out)
        return Trajectory(times=times,
                          states=np.zeros((n_out, mani.observable_dim)))
    xi0 = mani.project(y0)
    resid = np.linalg.norm(y0 - mani.lift(xi0))
    if resid > projection_warn_fraction * norm0:
        warnings.warn(
            f"initial condition is {100 * resid / norm0:.1f}% off the "
            "manifold; prediction accuracy may degrade")
    z0 = nf.reduced_to_normal(xi0)[0, 0::2]
    ztraj = evolve_normal_form(nf, z0, t_span, dt_out, forcing=forcing,
                               rtol=rtol)
    zc = normal_trajectory_to_complex(ztraj)
    full = np.empty((zc.shape[0], 2 * nf.mode_count), dtype=complex)
    full[:, 0::2] = zc
    full[:, 1::2] = np.conj(zc)
    xi = nf.normal_to_reduced(full)
    y = mani.lift(xi)
    labels = tuple(f"y{i+1}" for i in range(y.shape[1]))
    return Trajectory(times=ztraj.times, states=y, channel_labels=labels)


def nmte(reference, predicted, normalization=None):
    """Normalized mean trajectory error between two trajectories.

    Mean Euclidean reconstruction error per sample divided by the norm of
    the largest data point (or a caller-supplied normalization: a scalar
    scale or a vector whose norm is used). The predicted trajectory is
    resampled by cubic interpolation when its time grid differs.
    """
    ref_t = reference.times
    ref_x = reference.states
    pred = predicted
    same_grid = (pred.n_samples == reference.n_samples
                 and np.allclose(pred.times, ref_t, rtol=0.0,
                                 atol=1e-9 * reference.dt))
    if not same_grid:
        warnings.warn("resampling predicted trajectory onto reference grid")
        if ref_t[0] < pred.times[0] - 1e-12 or ref_t[-1] > pred.times[-1] + 1e-12:
            raise InvalidArgumentError(
                "predicted trajectory does not cover the reference window")
        f = interp1d(pred.times, pred.states, axis=0, kind="cubic")
        pred_x = f(ref_t)
    else:
        pred_x = pred.states
    if pred_x.shape != ref_x.shape:
        raise InvalidArgumentError("trajectories disagree in channel count")
    if normalization is None:
        scale = np.linalg.norm(ref_x, axis=1).max()
    elif np.isscalar(normalization):
        scale = float(normalization)
    else:
        scale = np.linalg.norm(np.asarray(normalization, dtype=float))
    if scale == 0.0:
        raise InvalidArgumentError("zero normalization")
    return float(np.mean(np.linalg.norm(ref_x - pred_x, axis=1)) / scale)
