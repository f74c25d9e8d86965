"""Forced response prediction and its full-order validation oracle.

Periodic forcing enters the identified normal form as
``z_j' = n_j(z) - i f_j e^(i Omega t)``; in polar coordinates this is the
classic pair rho' = -alpha rho - f sin(psi), psi' = omega - Omega -
(f/rho) cos(psi) with psi the response phase relative to the forcing, so
the resonance peak sits at phase-lag quadrature psi = -pi/2.

Steady states are computed in closed form for a single mode and by
pseudo-arclength continuation of fixed points in co-rotating Cartesian
coordinates for any mode count.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    CalibrationRangeError,
    InvalidArgumentError,
    SeedFailureError,
)
from .mechsys import ForcingSignal, make_rhs
from .normalform import PolarModel

_NEWTON_TOL = 1e-11
_NEWTON_MAX_ITER = 50


@dataclass(frozen=True)
class ForcingConfig:
    """Forcing setup for FRC computation in normal-form units."""

    omega_range: tuple              # (rad/s, rad/s)
    f_modal: np.ndarray             # (m,) nonnegative amplitudes
    calibration: tuple = None       # optional (Omega*, amp*) record

    def __post_init__(self):
        lo, hi = self.omega_range
        if not hi > lo:
            raise InvalidArgumentError("omega_range must be nondegenerate")
        f = np.atleast_1d(np.asarray(self.f_modal, dtype=float))
        if np.any(f < 0):
            raise InvalidArgumentError("forcing amplitudes must be >= 0")
        object.__setattr__(self, "f_modal", f)
        object.__setattr__(self, "omega_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class FrcPoint:
    omega: float
    rho: np.ndarray                 # (m,)
    psi: np.ndarray                 # (m,) phase shifts theta_j - c_j Omega t
    amp: float
    stable: bool
    jacobian_eigenvalues: np.ndarray


@dataclass(frozen=True)
class FrcBranch:
    """One connected branch of forced steady states."""

    points: tuple
    fold_indices: tuple = ()
    metadata: dict = field(default_factory=dict)

    @property
    def omegas(self):
        return np.array([p.omega for p in self.points])

    @property
    def amps(self):
        return np.array([p.amp for p in self.points])

    @property
    def rhos(self):
        return np.array([p.rho for p in self.points])

    @property
    def stability(self):
        return np.array([p.stable for p in self.points])

    def peak_point(self):
        return self.points[int(np.argmax(self.amps))]

    def to_csv(self, path):
        m = len(self.points[0].rho)
        folds = set(self.fold_indices)
        cols = (["omega"] + [f"rho{j+1}" for j in range(m)]
                + [f"psi{j+1}" for j in range(m)] + ["amp", "stable", "fold"])
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(cols) + "\n")
            for i, p in enumerate(self.points):
                row = ([p.omega] + list(p.rho) + list(p.psi)
                       + [p.amp, int(p.stable), int(i in folds)])
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


# ---------------------------------------------------------------------------
# single-mode derivatives of the polar functions (other amplitudes zero)
# ---------------------------------------------------------------------------

def _alpha_rho_and_derivative(pm, mode, rho):
    """(alpha(rho) * rho, d(alpha rho)/drho) along a single-mode axis."""
    val = 0.0
    der = 0.0
    j = mode - 1
    for t in pm.terms[j]:
        if any(v != 0 for v in t.phase):
            continue
        if any(a and l != j for l, a in enumerate(t.rho_exponents)):
            continue
        a = t.rho_exponents[j]
        c = -t.coefficient.real
        val += c * rho ** a
        der += c * a * rho ** (a - 1) if a >= 1 else 0.0
    return val, der


def _omega_and_derivative(pm, mode, rho):
    """(omega(rho), d omega/drho) along a single-mode axis."""
    val = 0.0
    der = 0.0
    j = mode - 1
    for t in pm.terms[j]:
        if any(v != 0 for v in t.phase):
            continue
        if any(a and l != j for l, a in enumerate(t.rho_exponents)):
            continue
        a = t.rho_exponents[j] - 1   # divide out the rho_j factor
        c = t.coefficient.imag
        val += c * rho ** a
        der += c * a * rho ** (a - 1) if a >= 1 else 0.0
    return val, der


def _polar_fixed_point_jacobian(pm, mode, rho, psi, f):
    """2x2 Jacobian of (rho', psi') at a forced fixed point.

    rho' = -alpha(rho) rho - f sin(psi),
    psi' = omega(rho) - Omega - (f / rho) cos(psi).
    """
    _, dalr = _alpha_rho_and_derivative(pm, mode, rho)
    _, dom = _omega_and_derivative(pm, mode, rho)
    return np.array([
        [-dalr, -f * np.cos(psi)],
        [dom + f * np.cos(psi) / rho**2, f * np.sin(psi) / rho],
    ])


def check_forcing_validity(pm, mode, f, rho_grid, fraction=0.2):
    """Warn when f leaves the leading-order forcing accuracy regime."""
    vals = np.array([_alpha_rho_and_derivative(pm, mode, r)[0]
                     for r in np.atleast_1d(rho_grid)])
    limit = fraction * np.abs(vals).max()
    if f > limit:
        warnings.warn(
            f"forcing amplitude {f:.3g} exceeds {100 * fraction:.0f}% of "
            f"max(alpha*rho) = {np.abs(vals).max():.3g}; leading-order "
            "forcing accuracy degrades")


def frc_closed_form_2d(pm, f, rho_grid, amplitude_fn=None):
    """Closed-form frequency response of a single-mode polar model.

    For each admissible amplitude (f^2/rho^2 >= alpha^2) the two branches
    Omega = omega(rho) +/- sqrt(f^2/rho^2 - alpha^2(rho)) are assembled
    into one polyline running up the low-frequency side and down the
    high-frequency side; stability comes from the 2x2 polar Jacobian.
    """
    if pm.mode_count != 1:
        raise InvalidArgumentError(
            "closed-form FRC applies to single-mode models; "
            "use frc_continuation")
    if f == 0:
        raise InvalidArgumentError(
            "f = 0 is the unforced limit; use the backbone operation")
    rho_grid = np.asarray(rho_grid, dtype=float)
    rho_grid = rho_grid[rho_grid > 0]
    check_forcing_validity(pm, 1, f, rho_grid)

    lower, upper = [], []
    for rho in rho_grid:
        al_rho, _ = _alpha_rho_and_derivative(pm, 1, rho)
        om, _ = _omega_and_derivative(pm, 1, rho)
        disc = (f / rho) ** 2 - (al_rho / rho) ** 2
        if disc < 0:
            continue
        root = np.sqrt(disc)
        for sign, store in ((-1.0, lower), (+1.0, upper)):
            omega_drive = om + sign * root
            sin_psi = -al_rho / f
            cos_psi = (om - omega_drive) * rho / f
            psi = np.arctan2(sin_psi, cos_psi)
            jac = _polar_fixed_point_jacobian(pm, 1, rho, psi, f)
            eig = np.linalg.eigvals(jac)
            amp = amplitude_fn(rho) if amplitude_fn is not None else rho
            store.append(FrcPoint(
                omega=float(omega_drive), rho=np.array([rho]),
                psi=np.array([psi]), amp=float(amp),
                stable=bool(np.all(eig.real < 0)),
                jacobian_eigenvalues=eig))
    turning = _closed_form_turning_point(pm, f, rho_grid.max(), amplitude_fn)
    if turning is not None:
        lower.append(turning)
    points = lower + upper[::-1]
    if not points:
        raise InvalidArgumentError(
            "no admissible response on the given amplitude grid")
    omegas = np.array([p.omega for p in points])
    folds = tuple(int(i) for i in
                  np.where(np.diff(np.sign(np.diff(omegas))) != 0)[0] + 1)
    return FrcBranch(points=tuple(points), fold_indices=folds,
                     metadata={"f": float(f), "method": "closed-form"})


def _closed_form_turning_point(pm, f, rho_cap, amplitude_fn):
    """The maximum-amplitude point, where alpha(rho) rho = f exactly.

    There the two closed-form branches merge: Omega = omega(rho*) and the
    response is at phase-lag quadrature psi = -pi/2.
    """
    lo, hi = 0.0, rho_cap
    if _alpha_rho_and_derivative(pm, 1, hi)[0] < f:
        return None
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _alpha_rho_and_derivative(pm, 1, mid)[0] < f:
            lo = mid
        else:
            hi = mid
    rho = 0.5 * (lo + hi)
    om, _ = _omega_and_derivative(pm, 1, rho)
    psi = -0.5 * np.pi
    jac = _polar_fixed_point_jacobian(pm, 1, rho, psi, f)
    eig = np.linalg.eigvals(jac)
    amp = amplitude_fn(rho) if amplitude_fn is not None else rho
    return FrcPoint(omega=float(om), rho=np.array([rho]),
                    psi=np.array([psi]), amp=float(amp),
                    stable=bool(np.all(eig.real < 0)),
                    jacobian_eigenvalues=eig)


# ---------------------------------------------------------------------------
# co-rotating fixed points (any mode count)
# ---------------------------------------------------------------------------

def corotation_exponents(nf):
    """Integer phase multipliers c_j making the forced dynamics autonomous.

    All ones in the non-resonant case. With phase-coupled monomials the
    multipliers follow the linearized frequency ratios and are verified
    against every kept monomial.
    """
    m = nf.mode_count
    omegas = nf.eigenvalues.imag
    has_coupling = False
    for j in range(m):
        for exp in nf.resonance_set[j]:
            nu = [exp[2 * l] - exp[2 * l + 1] - (1 if l == j else 0)
                  for l in range(m)]
            if any(nu):
                has_coupling = True
    if not has_coupling:
        return np.ones(m, dtype=int)
    base = omegas / omegas[0]
    for denom in range(1, 7):
        cand = base * denom
        if np.all(np.abs(cand - np.round(cand)) < 0.1):
            c = np.round(cand).astype(int)
            break
    else:
        raise InvalidArgumentError(
            "no small-integer co-rotation exponents fit the spectrum")
    for j in range(m):
        for exp in nf.resonance_set[j]:
            balance = sum(c[l] * (exp[2 * l] - exp[2 * l + 1])
                          for l in range(m))
            if balance != c[j]:
                raise InvalidArgumentError(
                    f"monomial {exp} in equation {j + 1} is not phase "
                    f"balanced for co-rotation exponents {c.tolist()}")
    return c


def corotating_residual(nf, w, omega_drive, f_modal, c):
    """F_j(w) = n_j(w) - i c_j Omega w_j - i f_j  (f constrained to c_j = 1)."""
    m = nf.mode_count
    w = np.asarray(w, dtype=complex)
    full = np.empty((1, 2 * m), dtype=complex)
    full[0, 0::2] = w
    full[0, 1::2] = np.conj(w)
    n_val = nf.field(full)[0, 0::2]
    res = n_val - 1j * c * omega_drive * w
    res = res - 1j * np.where(c == 1, f_modal, 0.0)
    return res


def corotating_jacobian(nf, w, omega_drive, c):
    """Real 2m x 2m Jacobian of the co-rotating field wrt (Re w, Im w)."""
    from . import polynomials as poly

    m = nf.mode_count
    w = np.asarray(w, dtype=complex)
    full = np.empty((1, 2 * m), dtype=complex)
    full[0, 0::2] = w
    full[0, 1::2] = np.conj(w)
    d_w = np.zeros((m, m), dtype=complex)      # dF_j / dw_l
    d_wc = np.zeros((m, m), dtype=complex)     # dF_j / d conj(w_l)
    for j in range(m):
        d_w[j, j] += nf.eigenvalues[j] - 1j * c[j] * omega_drive
        if len(nf.resonance_set[j]):
            grad = poly.monomial_gradient_design(
                full, nf.resonance_set[j])[0]     # (R, 2m)
            dn = grad.T @ nf.n_coeffs[j]          # (2m,)
            for l in range(m):
                d_w[j, l] += dn[2 * l]
                d_wc[j, l] += dn[2 * l + 1]
    jac = np.zeros((2 * m, 2 * m))
    for j in range(m):
        for l in range(m):
            dfx = d_w[j, l] + d_wc[j, l]
            dfy = 1j * (d_w[j, l] - d_wc[j, l])
            jac[2 * j, 2 * l] = dfx.real
            jac[2 * j, 2 * l + 1] = dfy.real
            jac[2 * j + 1, 2 * l] = dfx.imag
            jac[2 * j + 1, 2 * l + 1] = dfy.imag
    return jac


def _corotating_domega(nf, w, c):
    """dF/dOmega stacked as real vector."""
    d = -1j * c * np.asarray(w, dtype=complex)
    out = np.empty(2 * len(w))
    out[0::2] = d.real
    out[1::2] = d.imag
    return out


def _real_to_complex(u):
    return u[0::2] + 1j * u[1::2]


def _complex_to_real(w):
    out = np.empty(2 * len(w))
    out[0::2] = np.asarray(w).real
    out[1::2] = np.asarray(w).imag
    return out


def _newton_fixed_point(nf, w0, omega_drive, f_modal, c,
                        tol=_NEWTON_TOL, max_iter=_NEWTON_MAX_ITER):
    w = np.asarray(w0, dtype=complex)
    for _ in range(max_iter):
        res = corotating_residual(nf, w, omega_drive, f_modal, c)
        if np.abs(res).max() < tol:
            return w, True
        jac = corotating_jacobian(nf, w, omega_drive, c)
        rhs = _complex_to_real(-res)
        try:
            du = np.linalg.solve(jac, rhs)
        except np.linalg.LinAlgError:
            return w, False
        w = w + _real_to_complex(du)
    return w, np.abs(corotating_residual(nf, w, omega_drive, f_modal,
                                         c)).max() < tol


def _branch_point(nf, w, omega_drive, c, amplitude_fn, orbit_amp):
    rho = np.abs(w)
    psi = np.where(rho > 0, np.angle(w), 0.0)
    jac = corotating_jacobian(nf, w, omega_drive, c)
    eig = np.linalg.eigvals(jac)
    if orbit_amp is not None:
        amp = orbit_amp(w, omega_drive)
    elif amplitude_fn is not None:
        swept = int(np.argmax(rho))
        amp = amplitude_fn(rho[swept])
    else:
        amp = float(np.linalg.norm(rho))
    return FrcPoint(omega=float(omega_drive), rho=rho, psi=psi,
                    amp=float(amp), stable=bool(np.all(eig.real < 0)),
                    jacobian_eigenvalues=eig)


def frc_continuation(pm, cfg, amplitude_fn=None, orbit_amp=None,
                     rho_limit=None, ds_init=None, max_points=100000):
    """FRC by pseudo-arclength continuation of co-rotating fixed points.

    Starts from a Newton-corrected linear-response seed at the low end of
    ``cfg.omega_range`` and traces the branch until the frequency leaves the
    range (or the amplitude leaves the validity region). Step size doubles
    after fast corrector convergence and halves on failure; the maximum step
    is 1% of the frequency range. Folds are detected from sign changes of
    the tangent's frequency component.

    Returns a list with one FrcBranch.
    """
    nf = pm.field_source if isinstance(pm, PolarModel) else pm
    if nf is None:
        raise InvalidArgumentError("polar model lacks its source field")
    m = nf.mode_count
    f_modal = np.zeros(m)
    f_modal[:len(cfg.f_modal)] = cfg.f_modal
    c = corotation_exponents(nf)
    if np.any((c != 1) & (f_modal > 0)):
        raise InvalidArgumentError(
            "forcing is only supported on modes with co-rotation exponent 1")
    lo, hi = cfg.omega_range
    span = hi - lo
    ds_max = 0.01 * span
    ds = ds_init if ds_init is not None else 0.1 * ds_max
    ds_min = 1e-12 * span

    omega0 = lo
    w_seed = 1j * f_modal / (nf.eigenvalues - 1j * c * omega0)
    w, ok = _newton_fixed_point(nf, w_seed, omega0, f_modal, c)
    if not ok:
        raise SeedFailureError(
            f"Newton failed at the continuation seed Omega = {omega0:.6g} "
            f"from |w| = {np.abs(w_seed).max():.3g}")

    points = [_branch_point(nf, w, omega0, c, amplitude_fn, orbit_amp)]
    truncated_reason = None

    u = _complex_to_real(w)
    omega = omega0
    # initial tangent: d(fixed point)/dOmega, oriented toward increasing Omega
    jac = corotating_jacobian(nf, w, omega, c)
    du = np.linalg.solve(jac, -_corotating_domega(nf, w, c))
    tangent = np.concatenate([du, [1.0]])
    tangent /= np.linalg.norm(tangent)
    tangent_omegas = [tangent[-1]]

    while len(points) < max_points:
        pred = np.concatenate([u, [omega]]) + ds * tangent
        # corrector: Newton on the bordered system
        v = pred.copy()
        converged = False
        for it in range(1, 13):
            w_it = _real_to_complex(v[:-1])
            res = corotating_residual(nf, w_it, v[-1], f_modal, c)
            arc = tangent @ (v - pred)
            big_res = np.concatenate([_complex_to_real(res), [arc]])
            if np.abs(big_res).max() < _NEWTON_TOL:
                converged = True
                break
            jac_u = corotating_jacobian(nf, w_it, v[-1], c)
            jac_o = _corotating_domega(nf, w_it, c)
            big_jac = np.zeros((2 * m + 1, 2 * m + 1))
            big_jac[:2 * m, :2 * m] = jac_u
            big_jac[:2 * m, -1] = jac_o
            big_jac[-1, :] = tangent
            try:
                v = v - np.linalg.solve(big_jac, big_res)
            except np.linalg.LinAlgError:
                converged = False
                break
        if not converged:
            ds *= 0.5
            if ds < ds_min:
                truncated_reason = "step size underflow"
                break
            continue

        u, omega = v[:-1], v[-1]
        w = _real_to_complex(u)
        rho = np.abs(w)
        if rho_limit is not None and np.any(rho > rho_limit):
            truncated_reason = (
                f"amplitude left the validity range (rho > {rho_limit:g})")
            break
        omega_ok = _modal_frequencies_positive(pm, rho)
        if not omega_ok:
            truncated_reason = "omega_j(rho) became non-positive"
            break
        points.append(_branch_point(nf, w, omega, c, amplitude_fn, orbit_amp))

        # new tangent from the bordered system, keeping orientation
        jac_u = corotating_jacobian(nf, w, omega, c)
        big_jac = np.zeros((2 * m + 1, 2 * m + 1))
        big_jac[:2 * m, :2 * m] = jac_u
        big_jac[:2 * m, -1] = _corotating_domega(nf, w, c)
        big_jac[-1, :] = tangent
        rhs = np.zeros(2 * m + 1)
        rhs[-1] = 1.0
        try:
            new_tangent = np.linalg.solve(big_jac, rhs)
            new_tangent /= np.linalg.norm(new_tangent)
        except np.linalg.LinAlgError:
            new_tangent = tangent
        if new_tangent @ tangent < 0:
            new_tangent = -new_tangent
        tangent = new_tangent
        tangent_omegas.append(tangent[-1])

        if it <= 3:
            ds = min(2.0 * ds, ds_max)
        elif it > 8:
            ds = max(0.5 * ds, ds_min)

        if not lo <= omega <= hi:
            truncated_reason = "frequency left omega_range"
            break

    signs = np.sign(tangent_omegas)
    folds = tuple(int(i) for i in np.where(np.diff(signs) != 0)[0])
    branch = FrcBranch(
        points=tuple(points), fold_indices=folds,
        metadata={
            "f_modal": f_modal.tolist(),
            "corotation": c.tolist(),
            "method": "pseudo-arclength",
            "truncated": truncated_reason,
        })
    return [branch]


def refine_frc_peak(pm, branch, f_modal, swept_mode=None, amplitude_fn=None,
                    orbit_amp=None, tol=_NEWTON_TOL):
    """Polish the maximum-amplitude point of a continuation branch.

    The peak is the quadrature point Re(w_swept) = 0 (with Im < 0, i.e.
    psi = -pi/2); Newton solves the fixed-point equations augmented with
    that condition, seeded from the branch's amplitude maximum.
    """
    nf = pm.field_source if isinstance(pm, PolarModel) else pm
    m = nf.mode_count
    f_full = np.zeros(m)
    f_full[:len(f_modal)] = f_modal
    c = corotation_exponents(nf)
    seed = branch.peak_point()
    if swept_mode is None:
        swept_mode = int(np.argmax(seed.rho)) + 1
    j = swept_mode - 1
    w = seed.rho * np.exp(1j * seed.psi)
    v = np.concatenate([_complex_to_real(w), [seed.omega]])
    for _ in range(60):
        w_it = _real_to_complex(v[:-1])
        res = corotating_residual(nf, w_it, v[-1], f_full, c)
        quad = w_it[j].real
        full_res = np.concatenate([_complex_to_real(res), [quad]])
        if np.abs(full_res).max() < tol:
            break
        big = np.zeros((2 * m + 1, 2 * m + 1))
        big[:2 * m, :2 * m] = corotating_jacobian(nf, w_it, v[-1], c)
        big[:2 * m, -1] = _corotating_domega(nf, w_it, c)
        big[-1, 2 * j] = 1.0
        v = v - np.linalg.solve(big, full_res)
    else:
        raise SeedFailureError("peak refinement did not converge")
    w = _real_to_complex(v[:-1])
    if w[j].imag > 0:
        raise SeedFailureError(
            "peak refinement landed on the psi = +pi/2 branch")
    return _branch_point(nf, w, v[-1], c, amplitude_fn, orbit_amp)


def _modal_frequencies_positive(pm, rho):
    for j in range(1, pm.mode_count + 1):
        try:
            if pm.omega(j, rho) <= 0:
                return False
        except InvalidArgumentError:
            # phase-coupled contribution present; skip the scalar check
            continue
    return True


# ---------------------------------------------------------------------------
# forcing calibration
# ---------------------------------------------------------------------------

def invert_amplitude(amp_fn, target, rho_max, tol=1e-10):
    """Bisection inverse of a monotone amplitude map on [0, rho_max]."""
    if target < 0:
        raise InvalidArgumentError("amplitude must be >= 0")
    if target == 0:
        return 0.0
    hi = rho_max
    if amp_fn(hi) < target:
        raise CalibrationRangeError(
            f"measured amplitude {target:.6g} exceeds the amplitude map "
            f"range (amp({rho_max:g}) = {amp_fn(hi):.6g})")
    lo = 0.0
    while hi - lo > tol * max(rho_max, 1.0):
        mid = 0.5 * (lo + hi)
        if amp_fn(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate_forcing(pm, measured, rho_max, amplitude_fn=None, mode=1):
    """Normal-form forcing amplitude from one measured steady state.

    ``measured`` is either a peak amplitude (scalar) or a pair
    (Omega*, amp*). At the peak the quadrature condition gives
    f = alpha(rho*) rho*; off peak the closed-form response is solved
    for f.
    """
    amp_fn = amplitude_fn if amplitude_fn is not None else (lambda r: r)
    if np.isscalar(measured):
        rho_star = invert_amplitude(amp_fn, float(measured), rho_max)
        al_rho, _ = _alpha_rho_and_derivative(pm, mode, rho_star)
        return float(al_rho)
    omega_star, amp_star = measured
    rho_star = invert_amplitude(amp_fn, float(amp_star), rho_max)
    al_rho, _ = _alpha_rho_and_derivative(pm, mode, rho_star)
    om, _ = _omega_and_derivative(pm, mode, rho_star)
    return float(np.hypot(al_rho, (om - omega_star) * rho_star))


# ---------------------------------------------------------------------------
# full-order steady-state sweep oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepOracleResult:
    """Steady-state amplitudes from direct integration, both sweep senses."""

    omegas: np.ndarray
    amp_up: np.ndarray
    amp_down: np.ndarray
    settled_up: np.ndarray
    settled_down: np.ndarray
    periods_up: np.ndarray
    periods_down: np.ndarray

    def hysteresis_interval(self, rel_tol=0.02):
        """Frequency interval where up and down sweeps disagree."""
        scale = max(self.amp_up.max(), self.amp_down.max())
        differ = np.abs(self.amp_up - self.amp_down) > rel_tol * scale
        if not np.any(differ):
            return None
        idx = np.where(differ)[0]
        return float(self.omegas[idx[0]]), float(self.omegas[idx[-1]])

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("omega,amp_up,amp_down\n")
            for row in zip(self.omegas, self.amp_up, self.amp_down):
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _periodic_peak(values):
    """Max of a smooth periodic signal from samples, parabola-refined."""
    v = np.abs(values)
    k = int(np.argmax(v))
    n = len(v)
    y0, y1, y2 = v[(k - 1) % n], v[k], v[(k + 1) % n]
    denom = y0 - 2.0 * y1 + y2
    if denom >= 0:
        return float(y1)
    delta = 0.5 * (y0 - y2) / denom
    return float(y1 - 0.25 * (y0 - y2) * delta)


def _linear_steady_state(sys, shape, amplitude, omega_drive):
    n = sys.dof_count
    dyn = (sys.stiffness + 1j * omega_drive * sys.damping
           - omega_drive**2 * sys.mass)
    q = np.linalg.solve(dyn, amplitude * shape)
    x = np.empty(2 * n)
    x[:n] = q.real
    x[n:] = (1j * omega_drive * q).real
    return x


def forced_sweep_oracle(sys, shape, amplitude, omega_grid, observable=None,
                        settle_rel_tol=1e-6, max_periods=2000,
                        samples_per_period=64, rtol=1e-7, atol=1e-10,
                        consecutive=2):
    """Steady-state amplitude table from direct full-model integration.

    For each drive frequency the system is integrated period by period until
    the per-period amplitude change falls below ``settle_rel_tol``
    (relative, required ``consecutive`` times in a row), starting from the
    previous frequency's final state so coexisting branches are captured by
    the upward and downward sweeps. Non-settling points are flagged.

    ``observable`` maps (n, 2N) state rows to scalars; default is the last
    mass displacement.
    """
    omega_grid = np.asarray(omega_grid, dtype=float)
    n = sys.dof_count
    if observable is None:
        observable = n - 1
    if isinstance(observable, (int, np.integer)):
        idx = int(observable)
        g = lambda rows: rows[:, idx]
    else:
        g = observable

    def sweep(omegas):
        amps = np.empty(len(omegas))
        settled = np.zeros(len(omegas), dtype=bool)
        periods_used = np.zeros(len(omegas), dtype=int)
        state = _linear_steady_state(sys, shape, amplitude, omegas[0])
        for i, om in enumerate(omegas):
            period = 2.0 * np.pi / om
            rhs = make_rhs(sys, ForcingSignal(shape=shape, omega=om,
                                              amplitude=amplitude))
            t_eval = np.linspace(0.0, period, samples_per_period,
                                 endpoint=False)
            t_eval = np.append(t_eval, period)
            prev_amp = None
            hits = 0
            amp = np.nan
            for k in range(max_periods):
                sol = solve_ivp(rhs, (0.0, period), state, method="RK45",
                                t_eval=t_eval, rtol=rtol, atol=atol)
                state = sol.y[:, -1]
                amp = _periodic_peak(g(sol.y[:, :-1].T))
                if prev_amp is not None:
                    if abs(amp - prev_amp) <= settle_rel_tol * max(amp, 1e-300):
                        hits += 1
                        if hits >= consecutive:
                            settled[i] = True
                            periods_used[i] = k + 1
                            break
                    else:
                        hits = 0
                prev_amp = amp
            else:
                periods_used[i] = max_periods
                warnings.warn(
                    f"steady state not reached at Omega = {om:.6g} "
                    f"after {max_periods} periods (possible "
                    "quasi-periodicity)")
            amps[i] = amp
        return amps, settled, periods_used

    amp_up, settled_up, per_up = sweep(omega_grid)
    amp_down_r, settled_down_r, per_down_r = sweep(omega_grid[::-1])
    return SweepOracleResult(
        omegas=omega_grid,
        amp_up=amp_up,
        amp_down=amp_down_r[::-1],
        settled_up=settled_up,
        settled_down=settled_down_r[::-1],
        periods_up=per_up,
        periods_down=per_down_r[::-1],
    )
