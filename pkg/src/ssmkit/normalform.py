"""Extended normal forms of data-driven reduced dynamics.

Pipeline: estimate the reduced vector field from trajectories, diagonalize
its linear part, keep near-resonant monomials, then identify the coordinate
change h (and its inverse) together with the sparse normal-form field n by
minimizing the conjugacy error over the data. Polar views expose
amplitude-dependent damping and frequency.

Conventions: modal/normal-form vectors are complex with conjugate entries
interleaved, (z1, z1*, ..., zm, zm*); only the m primary equations are
stored, conjugate rows are implied. Mode numbering is 1-based; mode j has
eigenvalue with positive imaginary part Im(lambda_j), sorted increasing.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import polynomials as poly
from .errors import (
    DivergenceError,
    IllConditionedFitError,
    InvalidArgumentError,
    NonConvergenceError,
)
from .mechsys import Trajectory

_COND_LIMIT = 1e12


# ---------------------------------------------------------------------------
# derivative estimation
# ---------------------------------------------------------------------------

def finite_difference_derivative(states, dt):
    """4th-order finite-difference time derivative of uniformly sampled rows.

    Central differences in the interior, one-sided 4th-order stencils at the
    two samples nearest each end. Requires at least 5 samples.
    """
    x = np.atleast_2d(np.asarray(states, dtype=float))
    n = x.shape[0]
    if n < 5:
        raise InvalidArgumentError("need at least 5 samples for derivatives")
    d = np.empty_like(x)
    d[2:-2] = (-x[4:] + 8.0 * x[3:-1] - 8.0 * x[1:-3] + x[:-4]) / (12.0 * dt)
    d[0] = (-25.0 * x[0] + 48.0 * x[1] - 36.0 * x[2]
            + 16.0 * x[3] - 3.0 * x[4]) / (12.0 * dt)
    d[1] = (-3.0 * x[0] - 10.0 * x[1] + 18.0 * x[2]
            - 6.0 * x[3] + x[4]) / (12.0 * dt)
    d[-1] = (25.0 * x[-1] - 48.0 * x[-2] + 36.0 * x[-3]
             - 16.0 * x[-4] + 3.0 * x[-5]) / (12.0 * dt)
    d[-2] = (3.0 * x[-1] + 10.0 * x[-2] - 18.0 * x[-3]
             + 6.0 * x[-4] - x[-5]) / (12.0 * dt)
    return d


# ---------------------------------------------------------------------------
# reduced vector field
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReducedVectorField:
    """Polynomial vector field xi' = W xi + nonlinear(xi) in R^{2m}."""

    linear: np.ndarray            # (2m, 2m)
    nonlinear_exponents: tuple    # K multi-indices
    nonlinear_coeffs: np.ndarray  # (K, 2m)
    order: int

    def __post_init__(self):
        w = np.asarray(self.linear, dtype=float)
        c = np.asarray(self.nonlinear_coeffs, dtype=float)
        if c.size == 0:
            c = c.reshape(0, w.shape[0])
        object.__setattr__(self, "linear", w)
        object.__setattr__(self, "nonlinear_coeffs", c)
        object.__setattr__(self, "nonlinear_exponents", tuple(
            tuple(e) for e in self.nonlinear_exponents))

    @property
    def dim(self):
        return self.linear.shape[0]

    def __call__(self, xi):
        xi = np.asarray(xi, dtype=float)
        single = xi.ndim == 1
        xi2 = np.atleast_2d(xi)
        out = xi2 @ self.linear.T
        if self.nonlinear_coeffs.shape[0]:
            out = out + poly.monomial_design(
                xi2, self.nonlinear_exponents) @ self.nonlinear_coeffs
        return out[0] if single else out


def fit_reduced_field(reduced_trajs, order):
    """Least-squares polynomial vector field from reduced trajectories.

    Time derivatives come from 4th-order finite differences. Emits an
    unstable-linearization warning when the fitted linear part has
    eigenvalues with positive real part.
    """
    trajs = list(reduced_trajs)
    if not trajs:
        raise InvalidArgumentError("no trajectories given")
    dim = trajs[0].n_channels
    xs, dxs = [], []
    for tr in trajs:
        xs.append(tr.states)
        dxs.append(finite_difference_derivative(tr.states, tr.dt))
    x = np.vstack(xs)
    dx = np.vstack(dxs)
    exponents = tuple(poly.monomial_exponents(dim, range(2, order + 1)))
    design = np.hstack([x, poly.monomial_design(x, exponents)]) \
        if exponents else x
    n_coeff = design.shape[1]
    if x.shape[0] < 10 * n_coeff:
        raise InvalidArgumentError(
            f"need >= {10 * n_coeff} samples per equation, have {x.shape[0]}")
    cond = np.linalg.cond(design)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise IllConditionedFitError(
            f"reduced-dynamics design matrix ill conditioned "
            f"(condition number {cond:.3e})", condition_number=cond)
    sol, *_ = np.linalg.lstsq(design, dx, rcond=None)
    w = sol[:dim].T
    nl = sol[dim:].reshape(len(exponents), dim) if exponents \
        else np.zeros((0, dim))
    if np.any(np.linalg.eigvals(w).real > 0):
        warnings.warn("fitted linear part has unstable eigenvalues")
    return ReducedVectorField(linear=w, nonlinear_exponents=exponents,
                              nonlinear_coeffs=nl, order=order)


# ---------------------------------------------------------------------------
# resonance analysis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OuterResonanceReport:
    """Existence check of the invariant manifold over selected modes."""

    mode_set: tuple
    spectral_quotient: int
    tolerance: float
    near_violations: tuple   # entries (outer_mode, k multi-index, |residual|)

    @property
    def ok(self):
        return not self.near_violations

    def describe(self):
        lines = [f"spectral quotient: {self.spectral_quotient}"]
        if not self.near_violations:
            lines.append("no near-resonances with outer modes detected")
        for mode, k, res in self.near_violations:
            lines.append(
                f"outer mode {mode} nearly resonates with k={k} "
                f"(|residual| = {res:.3e}); consider enlarging the mode set "
                f"with mode {mode}")
        return "\n".join(lines)


def check_outer_resonance(spectrum, mode_set, tolerance=None):
    """Scan for near-resonances between outer modes and the selected set.

    For every outer eigenvalue lambda_j and every multi-index k up to the
    spectral quotient, flags |lambda_j - <k, (lambda, conj lambda))>| below
    tolerance (default 1e-3 * max |Im lambda|).
    """
    modes = sorted(set(mode_set))
    if not modes or any(not 1 <= j <= spectrum.n_modes for j in modes):
        raise InvalidArgumentError("invalid mode_set")
    inner = np.array([spectrum.mode_eigenvalue(j) for j in modes])
    outer_modes = [j for j in range(1, spectrum.n_modes + 1)
                   if j not in modes]
    if tolerance is None:
        tolerance = 1e-3 * np.abs(spectrum.eigenvalues.imag).max()
    if not outer_modes:
        return OuterResonanceReport(tuple(modes), 0, tolerance, ())
    outer = np.array([spectrum.mode_eigenvalue(j) for j in outer_modes])
    if inner.real.max() >= 0:
        raise InvalidArgumentError(
            "spectral quotient undefined for undamped inner modes")
    quotient = int(outer.real.min() / inner.real.max())
    if quotient > 30:
        warnings.warn(f"spectral quotient {quotient} capped at 30 "
                      "for the resonance scan")
        quotient = 30
    # interleave (lambda_l, conj lambda_l) to match multi-index layout
    lam_full = np.empty(2 * len(inner), dtype=complex)
    lam_full[0::2] = inner
    lam_full[1::2] = np.conj(inner)
    violations = []
    for k in poly.monomial_exponents(2 * len(inner), range(1, quotient + 1)):
        combo = np.dot(k, lam_full)
        for j, lam_out in zip(outer_modes, outer):
            res = abs(lam_out - combo)
            if res < tolerance:
                violations.append((j, tuple(k), float(res)))
    return OuterResonanceReport(tuple(modes), quotient, float(tolerance),
                                tuple(violations))


def select_resonant_monomials(eigenvalues, order, tol_rel=0.05):
    """Near-resonant multi-index sets kept in the normal form.

    Multi-index k (degree >= 2) is kept in equation j when
    |Im(lambda_j - <k, lambda>)| <= tol_rel * max Im lambda. Damping is
    deliberately ignored so the selection is insensitive to weak dissipation.

    Returns
    -------
    tuple of tuple of multi-indices, one inner tuple per mode equation.
    """
    lam = np.atleast_1d(np.asarray(eigenvalues, dtype=complex))
    if lam.size == 0:
        raise InvalidArgumentError("empty eigenvalue list")
    if np.any(lam.imag <= 0):
        raise InvalidArgumentError("modes must be oscillatory (Im lambda > 0)")
    m = lam.size
    lam_full = np.empty(2 * m, dtype=complex)
    lam_full[0::2] = lam
    lam_full[1::2] = np.conj(lam)
    scale = lam.imag.max()
    kept = []
    for j in range(m):
        keep_j = []
        for k in poly.monomial_exponents(2 * m, range(2, order + 1)):
            mism = abs((lam[j] - np.dot(k, lam_full)).imag)
            if mism <= tol_rel * scale:
                keep_j.append(tuple(k))
        kept.append(tuple(keep_j))
    return tuple(kept)


# ---------------------------------------------------------------------------
# normal-form model
# ---------------------------------------------------------------------------

def _modal_decomposition(w):
    """Eigen-decomposition of the reduced linear part with fixed conventions.

    Returns (lambda (m,), T (2m, 2m)) with columns of T interleaving
    (v_j, conj v_j), modes sorted by increasing Im lambda_j, unit-norm
    eigenvectors with the largest-magnitude entry real positive.
    """
    vals, vecs = np.linalg.eig(np.asarray(w, dtype=float))
    pos = np.where(vals.imag > 0)[0]
    if 2 * len(pos) != len(vals):
        raise IllConditionedFitError(
            "reduced linear part does not have purely oscillatory mode pairs")
    pos = pos[np.argsort(vals.imag[pos])]
    m = len(pos)
    lam = vals[pos]
    t = np.empty((2 * m, 2 * m), dtype=complex)
    for j, idx in enumerate(pos):
        v = vecs[:, idx]
        kmax = np.argmax(np.abs(v))
        v = v / (v[kmax] / abs(v[kmax]))
        v = v / np.linalg.norm(v)
        t[:, 2 * j] = v
        t[:, 2 * j + 1] = np.conj(v)
    if np.linalg.cond(t) > 1e10:
        raise IllConditionedFitError("modal change of coordinates is "
                                     "near singular")
    return lam, t


def _conjugate_structured(z_primary):
    """(n, m) primary components -> (n, 2m) interleaved with conjugates."""
    n, m = z_primary.shape
    out = np.empty((n, 2 * m), dtype=complex)
    out[:, 0::2] = z_primary
    out[:, 1::2] = np.conj(z_primary)
    return out


@dataclass(frozen=True)
class NormalFormModel:
    """Identified extended normal form on the reduced dynamics.

    ``h_inv`` maps modal coordinates to normal-form coordinates,
    ``h`` is its series inverse; both are near-identity with coefficients
    for the m primary equations only. ``n`` is the sparse normal-form field
    z' = diag(lambda) z + N(z) restricted to the resonance set.
    """

    eigenvalues: np.ndarray       # (m,) complex, Im > 0, increasing
    modal_change: np.ndarray      # (2m, 2m) complex, xi = T zeta
    h_inv_exponents: tuple
    h_inv_coeffs: np.ndarray      # (K, m) complex
    h_exponents: tuple
    h_coeffs: np.ndarray          # (K2, m) complex
    resonance_set: tuple          # per-mode tuples of multi-indices
    n_coeffs: tuple               # per-mode complex arrays, aligned with sets
    order: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "eigenvalues",
                           np.asarray(self.eigenvalues, dtype=complex))
        object.__setattr__(self, "modal_change",
                           np.asarray(self.modal_change, dtype=complex))
        hic = np.asarray(self.h_inv_coeffs, dtype=complex)
        hc = np.asarray(self.h_coeffs, dtype=complex)
        if hic.size == 0:
            hic = hic.reshape(0, self.mode_count)
        if hc.size == 0:
            hc = hc.reshape(0, self.mode_count)
        object.__setattr__(self, "h_inv_coeffs", hic)
        object.__setattr__(self, "h_coeffs", hc)
        object.__setattr__(self, "n_coeffs", tuple(
            np.asarray(c, dtype=complex) for c in self.n_coeffs))

    @property
    def mode_count(self):
        return len(self.eigenvalues)

    # -- coordinate chain -------------------------------------------------

    def reduced_to_modal(self, xi):
        xi2 = np.atleast_2d(np.asarray(xi, dtype=float))
        return np.linalg.solve(self.modal_change, xi2.T).T

    def modal_to_reduced(self, zeta, imag_tol=None):
        zeta2 = np.atleast_2d(np.asarray(zeta, dtype=complex))
        xi = zeta2 @ self.modal_change.T
        if imag_tol is not None:
            resid = np.abs(xi.imag).max()
            if resid > imag_tol:
                raise InvalidArgumentError(
                    f"imaginary residue {resid:.2e} exceeds {imag_tol:.2e}")
        return xi.real

    def _apply_near_identity(self, points, exponents, coeffs):
        pts = np.atleast_2d(np.asarray(points, dtype=complex))
        out = pts.copy()
        if len(exponents):
            phi = poly.monomial_design(pts, exponents)
            out[:, 0::2] += phi @ coeffs
            out[:, 1::2] = np.conj(out[:, 0::2])
        return out

    def apply_h_inv(self, zeta):
        """Modal -> normal-form coordinates, z = h^{-1}(zeta)."""
        return self._apply_near_identity(
            zeta, self.h_inv_exponents, self.h_inv_coeffs)

    def apply_h(self, z):
        """Normal-form -> modal coordinates, zeta = h(z)."""
        return self._apply_near_identity(z, self.h_exponents, self.h_coeffs)

    def reduced_to_normal(self, xi):
        return self.apply_h_inv(self.reduced_to_modal(xi))

    def normal_to_reduced(self, z, imag_tol=None):
        return self.modal_to_reduced(self.apply_h(z), imag_tol=imag_tol)

    # -- the normal-form vector field --------------------------------------

    def field(self, z):
        """Evaluate z' = diag(lambda) z + N(z) on conjugate-structured rows."""
        z2 = np.atleast_2d(np.asarray(z, dtype=complex))
        out = np.empty_like(z2)
        for j in range(self.mode_count):
            val = self.eigenvalues[j] * z2[:, 2 * j]
            if len(self.resonance_set[j]):
                phi = poly.monomial_design(z2, self.resonance_set[j])
                val = val + phi @ self.n_coeffs[j]
            out[:, 2 * j] = val
            out[:, 2 * j + 1] = np.conj(val)
        return out

    # -- diagnostics --------------------------------------------------------

    def composition_residual(self):
        """Max coefficient of (h o h_inv - id) truncated at the model order."""
        two_m = 2 * self.mode_count
        h_map = _full_dict_map(self.h_exponents, self.h_coeffs, two_m)
        hinv_map = _full_dict_map(self.h_inv_exponents, self.h_inv_coeffs,
                                  two_m)
        ident = poly.identity_map(two_m)
        h_full = [poly.poly_add(i, p) for i, p in zip(ident, h_map)]
        hinv_full = [poly.poly_add(i, p) for i, p in zip(ident, hinv_map)]
        comp = poly.map_compose(h_full, hinv_full, self.order, two_m)
        worst = 0.0
        for l, p in enumerate(comp):
            diff = poly.poly_add(p, poly.poly_scale(ident[l], -1.0))
            for c in diff.values():
                worst = max(worst, abs(c))
        return worst

    # -- serialization ------------------------------------------------------

    def to_json(self):
        def table(exponents, coeffs):
            rows = []
            for k, exp in enumerate(exponents):
                for j in range(self.mode_count):
                    c = coeffs[k, j]
                    rows.append({"equation": 2 * j, "exponents": list(exp),
                                 "re": c.real, "im": c.imag})
                    cexp = poly.conjugate_exponent(exp)
                    rows.append({"equation": 2 * j + 1,
                                 "exponents": list(cexp),
                                 "re": c.real, "im": -c.imag})
            return rows

        n_rows = []
        for j in range(self.mode_count):
            for exp, c in zip(self.resonance_set[j], self.n_coeffs[j]):
                n_rows.append({"equation": 2 * j, "exponents": list(exp),
                               "re": c.real, "im": c.imag})
                n_rows.append({"equation": 2 * j + 1,
                               "exponents": list(poly.conjugate_exponent(exp)),
                               "re": c.real, "im": -c.imag})
        return {
            "order": self.order,
            "eigenvalues": [[l.real, l.imag] for l in self.eigenvalues],
            "modal_change_re": self.modal_change.real.flatten().tolist(),
            "modal_change_im": self.modal_change.imag.flatten().tolist(),
            "h": table(self.h_exponents, self.h_coeffs),
            "h_inv": table(self.h_inv_exponents, self.h_inv_coeffs),
            "n": n_rows,
            "resonance_set": [[list(e) for e in s] for s in self.resonance_set],
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, data):
        lam = np.array([re + 1j * im for re, im in data["eigenvalues"]])
        m = len(lam)
        two_m = 2 * m
        t = (np.array(data["modal_change_re"]).reshape(two_m, two_m)
             + 1j * np.array(data["modal_change_im"]).reshape(two_m, two_m))

        def untable(rows):
            exps, index = [], {}
            for row in rows:
                if row["equation"] % 2:
                    continue
                e = tuple(row["exponents"])
                if e not in index:
                    index[e] = len(exps)
                    exps.append(e)
            coeffs = np.zeros((len(exps), m), dtype=complex)
            for row in rows:
                if row["equation"] % 2:
                    continue
                coeffs[index[tuple(row["exponents"])], row["equation"] // 2] \
                    = row["re"] + 1j * row["im"]
            return tuple(exps), coeffs

        h_exps, h_coeffs = untable(data["h"])
        hi_exps, hi_coeffs = untable(data["h_inv"])
        res_set = tuple(tuple(tuple(e) for e in s)
                        for s in data["resonance_set"])
        n_coeffs = []
        for j in range(m):
            arr = np.zeros(len(res_set[j]), dtype=complex)
            for row in data["n"]:
                if row["equation"] == 2 * j:
                    arr[res_set[j].index(tuple(row["exponents"]))] \
                        = row["re"] + 1j * row["im"]
            n_coeffs.append(arr)
        return cls(eigenvalues=lam, modal_change=t,
                   h_inv_exponents=hi_exps, h_inv_coeffs=hi_coeffs,
                   h_exponents=h_exps, h_coeffs=h_coeffs,
                   resonance_set=res_set, n_coeffs=tuple(n_coeffs),
                   order=data["order"], metadata=data.get("metadata", {}))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def _full_dict_map(exponents, coeffs, two_m):
    """Expand primary-equation coefficients into a full 2m-component map."""
    out = []
    for j in range(two_m // 2):
        p = {}
        q = {}
        for k, exp in enumerate(exponents):
            c = coeffs[k, j]
            if c != 0:
                p[tuple(exp)] = p.get(tuple(exp), 0.0) + c
                cexp = poly.conjugate_exponent(exp)
                q[cexp] = q.get(cexp, 0.0) + np.conj(c)
        out.extend((p, q))
    return out


# ---------------------------------------------------------------------------
# conjugacy-error minimization
# ---------------------------------------------------------------------------

def conjugacy_gauss_newton_system(r0, z, zdot, phi, dphi, lam, resonance_set,
                                  c_coeffs, free):
    """Real-split Gauss-Newton system for the h^{-1} coefficient step.

    The conjugacy residual is complex-linear in the coefficients through
    the transport and eigenvalue terms and depends on their conjugates
    through the normal-form field, so the least-squares step is assembled
    in (Re a, Im a). Returns (matrix, right-hand side) with the solution
    ordered [Re a[free]; Im a[free]].
    """
    n_samp, k_h = phi.shape
    m = len(lam)
    jac_a = np.zeros((n_samp, m, k_h, m), dtype=complex)   # d r / d a
    jac_ac = np.zeros((n_samp, m, k_h, m), dtype=complex)  # d r / d conj(a)
    for j in range(m):
        jac_a[:, j, :, j] += dphi
        jac_a[:, j, :, j] -= lam[j] * phi
        if len(resonance_set[j]):
            grad = poly.monomial_gradient_design(
                z, resonance_set[j])                       # (n, R, 2m)
            dn_dz = np.einsum("nrv,r->nv", grad, c_coeffs[j])  # (n, 2m)
            for l in range(m):
                jac_a[:, j, :, l] -= dn_dz[:, 2 * l, None] * phi
                jac_ac[:, j, :, l] -= dn_dz[:, 2 * l + 1, None] \
                    * np.conj(phi)
    mask = free.reshape(-1)
    ja = jac_a.reshape(n_samp * m, k_h * m)[:, mask]
    jc = jac_ac.reshape(n_samp * m, k_h * m)[:, mask]
    j_re = np.concatenate([(ja + jc).real, (ja + jc).imag])
    j_im = np.concatenate([(1j * (ja - jc)).real, (1j * (ja - jc)).imag])
    rhs = -np.concatenate([r0.reshape(-1).real, r0.reshape(-1).imag])
    return np.hstack([j_re, j_im]), rhs


def conjugacy_residual(zeta, zdot, lam, exponents, a, resonance_set, c_coeffs):
    """Conjugacy residual of the primary equations at given coefficients.

    Standalone version of the quantity minimized by fit_normal_form; used
    for testing the analytic Gauss-Newton system against finite differences.
    """
    m = len(lam)
    phi = poly.monomial_design(zeta, exponents)
    dphi = poly.directional_derivative_design(zeta, zdot, exponents)
    z = _conjugate_structured(zeta[:, 0::2] + phi @ a)
    r = np.empty((zeta.shape[0], m), dtype=complex)
    for j in range(m):
        val = zdot[:, 2 * j] + dphi @ a[:, j] - lam[j] * z[:, 2 * j]
        if len(resonance_set[j]):
            val = val - poly.monomial_design(z, resonance_set[j]) @ c_coeffs[j]
        r[:, j] = val
    return r, z, phi, dphi


def fit_normal_form(rvf, reduced_trajs, order, resonance_set,
                    max_iterations=500, tol=1e-10, max_samples=20000):
    """Identify h^{-1} and n by alternating conjugacy-error minimization.

    The conjugacy cost

        J = sum_i || D h^{-1}(zeta_i) zeta_i' - n(h^{-1}(zeta_i)) ||^2

    is minimized over the h^{-1} coefficients (degrees 2..order, excluding
    the near-resonant monomials, which are absorbed by n) and the n
    coefficients on the resonance set. The n-step is an exact linear
    least-squares solve; the h-step is one Gauss-Newton step with
    backtracking, so the cost never increases. h follows from h^{-1} by
    order-by-order series inversion.

    Parameters
    ----------
    rvf : ReducedVectorField
        Supplies the linear part (modal change and eigenvalues).
    reduced_trajs : list of Trajectory
        Trajectories in the reduced coordinates, uniform dt.
    order : int
        Polynomial order of h^{-1}, h and n.
    resonance_set : per-mode tuples of multi-indices
        Output of select_resonant_monomials (or a hand-chosen set).

    Raises
    ------
    NonConvergenceError
        If the alternation does not reach the relative tolerance.
    """
    lam, t = _modal_decomposition(rvf.linear)
    m = len(lam)
    two_m = 2 * m

    zetas, zdots = [], []
    for tr in reduced_trajs:
        xi = tr.states
        xidot = finite_difference_derivative(xi, tr.dt)
        zetas.append(np.linalg.solve(t, xi.T).T)
        zdots.append(np.linalg.solve(t, xidot.T).T)
    zeta = np.vstack(zetas)
    zdot = np.vstack(zdots)
    if zeta.shape[0] > max_samples:
        stride = int(np.ceil(zeta.shape[0] / max_samples))
        zeta = zeta[::stride]
        zdot = zdot[::stride]
    n_samp = zeta.shape[0]

    h_exponents = tuple(poly.monomial_exponents(two_m, range(2, order + 1)))
    k_h = len(h_exponents)
    resonance_set = tuple(tuple(tuple(e) for e in s) for s in resonance_set)
    # resonant monomials are excluded from h^{-1} (absorbed into n)
    free = np.ones((k_h, m), dtype=bool)
    for j in range(m):
        for e in resonance_set[j]:
            if e in h_exponents:
                free[h_exponents.index(e), j] = False

    phi = poly.monomial_design(zeta, h_exponents)            # (n, K)
    dphi = poly.directional_derivative_design(zeta, zdot, h_exponents)

    a = np.zeros((k_h, m), dtype=complex)

    def z_of(a_):
        return _conjugate_structured(zeta[:, 0::2] + phi @ a_)

    def residual(a_):
        z = z_of(a_)
        r = np.empty((n_samp, m), dtype=complex)
        for j in range(m):
            val = zdot[:, 2 * j] + dphi @ a_[:, j] \
                - lam[j] * z[:, 2 * j]
            if len(resonance_set[j]):
                val = val - poly.monomial_design(
                    z, resonance_set[j]) @ c_coeffs[j]
            r[:, j] = val
        return r, z

    def cost(a_):
        r, _ = residual(a_)
        return float(np.sum(np.abs(r) ** 2))

    # --- initial n-step with a = 0 ---
    c_coeffs = [np.zeros(len(s), dtype=complex) for s in resonance_set]

    def n_step(a_):
        z = z_of(a_)
        for j in range(m):
            if not len(resonance_set[j]):
                continue
            target = zdot[:, 2 * j] + dphi @ a_[:, j] - lam[j] * z[:, 2 * j]
            design = poly.monomial_design(z, resonance_set[j])
            sol, *_ = np.linalg.lstsq(design, target, rcond=None)
            c_coeffs[j] = sol

    n_step(a)
    costs = [cost(a)]

    for iteration in range(max_iterations):
        # --- h-step: one Gauss-Newton step on the h^{-1} coefficients ---
        r0, z = residual(a)
        big, rhs = conjugacy_gauss_newton_system(
            r0, z, zdot, phi, dphi, lam, resonance_set, c_coeffs, free)
        step, *_ = np.linalg.lstsq(big, rhs, rcond=None)
        mask = free.reshape(-1)
        nf_free = mask.sum()
        da = np.zeros(k_h * m, dtype=complex)
        da[mask] = step[:nf_free] + 1j * step[nf_free:]
        da = da.reshape(k_h, m)

        current = costs[-1]
        alpha = 1.0
        accepted = False
        for _ in range(40):
            a_try = a + alpha * da
            if cost(a_try) <= current:
                accepted = True
                break
            alpha *= 0.5
        if accepted:
            a = a_try

        # --- n-step: exact minimization over the n coefficients ---
        n_step(a)
        costs.append(cost(a))
        rel = (costs[-2] - costs[-1]) / max(costs[-2], 1e-300)
        if rel < tol:
            break
    else:
        raise NonConvergenceError(
            "conjugacy minimization did not converge",
            cost=costs[-1], iterations=max_iterations)

    # zero out masked entries explicitly (numerical hygiene)
    a[~free] = 0.0

    # series inversion: h from h^{-1}
    hinv_map = _full_dict_map(h_exponents, a, two_m)
    h_map_full = poly.invert_near_identity(hinv_map, order, two_m)
    h_exps_out, h_coeffs_out = _collect_primary(h_map_full, two_m, order)

    model = NormalFormModel(
        eigenvalues=lam, modal_change=t,
        h_inv_exponents=h_exponents, h_inv_coeffs=a,
        h_exponents=h_exps_out, h_coeffs=h_coeffs_out,
        resonance_set=resonance_set,
        n_coeffs=tuple(np.array(c) for c in c_coeffs),
        order=order,
        metadata={
            "iterations": len(costs) - 1,
            "conjugacy_cost": costs[-1],
            "conjugacy_cost_history": [float(c) for c in costs],
            "samples": int(n_samp),
        },
    )
    return model


def _collect_primary(full_map, two_m, order):
    """Primary-equation exponents/coefficients from a full dict map."""
    exps = poly.monomial_exponents(two_m, range(2, order + 1))
    keep = [e for e in exps
            if any(e in full_map[2 * j] for j in range(two_m // 2))]
    coeffs = np.zeros((len(keep), two_m // 2), dtype=complex)
    for k, e in enumerate(keep):
        for j in range(two_m // 2):
            coeffs[k, j] = full_map[2 * j].get(e, 0.0)
    return tuple(keep), coeffs


# ---------------------------------------------------------------------------
# polar view
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolarTerm:
    """One term of rho_j' + i rho_j theta_j' = sum_t c_t rho^a e^(i nu.theta).

    The real part feeds the amplitude equation, the imaginary part the phase
    equation. ``phase`` is zero for amplitude-only terms.
    """

    rho_exponents: tuple     # (m,) amplitude powers
    phase: tuple             # (m,) integer phase combination nu
    coefficient: complex


@dataclass(frozen=True)
class PolarModel:
    """Polar normal form rho_j' = -alpha_j rho_j, theta_j' = omega_j."""

    eigenvalues: np.ndarray
    terms: tuple                     # per mode: tuple of PolarTerm
    field_source: NormalFormModel = None

    def __post_init__(self):
        object.__setattr__(self, "eigenvalues",
                           np.asarray(self.eigenvalues, dtype=complex))

    @property
    def mode_count(self):
        return len(self.eigenvalues)

    def has_phase_coupling(self, mode=None):
        modes = range(self.mode_count) if mode is None else [mode - 1]
        return any(any(np.any(np.asarray(t.phase) != 0)
                       for t in self.terms[j]) for j in modes)

    def _complex_rate(self, j, rho, theta):
        """rho_j' + i rho_j theta_j' at amplitudes rho, phases theta."""
        rho = np.asarray(rho, dtype=float)
        total = 0.0 + 0.0j
        for term in self.terms[j - 1]:
            mag = term.coefficient
            for l, a_l in enumerate(term.rho_exponents):
                if a_l:
                    mag = mag * rho[l] ** a_l
            nu = np.asarray(term.phase)
            if np.any(nu != 0):
                if theta is None:
                    if mag != 0:
                        raise InvalidArgumentError(
                            "phase-coupled term requires phases")
                    continue
                mag = mag * np.exp(1j * np.dot(nu, theta))
            total += mag
        return total

    def alpha(self, mode, rho, theta=None):
        """Instantaneous damping alpha_j = -rho_j'/rho_j at given amplitudes.

        ``rho`` is the (m,) amplitude vector (scalar accepted when m == 1).
        Terms carrying a rho_j factor are divided symbolically, so the
        zero-amplitude limit -Re lambda_j is exact.
        """
        j = mode
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        total = 0.0
        for term in self.terms[j - 1]:
            exps = list(term.rho_exponents)
            if exps[j - 1] >= 1:
                exps[j - 1] -= 1
                div = 1.0
            else:
                div = rho[j - 1]
            mag = term.coefficient
            for l, a_l in enumerate(exps):
                if a_l:
                    mag = mag * rho[l] ** a_l
            nu = np.asarray(term.phase)
            if np.any(nu != 0):
                if theta is None:
                    if mag != 0:
                        raise InvalidArgumentError(
                            "phase-coupled term requires phases")
                    continue
                mag = mag * np.exp(1j * np.dot(nu, theta))
            if div != 1.0:
                if mag == 0:
                    continue
                if div == 0.0:
                    raise InvalidArgumentError(
                        "alpha is singular at rho_j = 0 for this term")
                mag = mag / div
            total += mag.real
        return -total

    def omega(self, mode, rho, theta=None):
        """Instantaneous frequency omega_j; exact Im lambda_j at rho = 0."""
        j = mode
        rho = np.atleast_1d(np.asarray(rho, dtype=float))
        total = 0.0
        for term in self.terms[j - 1]:
            exps = list(term.rho_exponents)
            if exps[j - 1] >= 1:
                exps[j - 1] -= 1
                div = 1.0
            else:
                div = rho[j - 1]
            mag = term.coefficient
            for l, a_l in enumerate(exps):
                if a_l:
                    mag = mag * rho[l] ** a_l
            nu = np.asarray(term.phase)
            if np.any(nu != 0):
                if theta is None:
                    if mag != 0:
                        raise InvalidArgumentError(
                            "phase-coupled term requires phases")
                    continue
                mag = mag * np.exp(1j * np.dot(nu, theta))
            if div != 1.0:
                if mag == 0:
                    continue
                if div == 0.0:
                    raise InvalidArgumentError(
                        "omega is singular at rho_j = 0 for this term")
                mag = mag / div
            total += mag.imag
        return total

    def describe(self, digits=4):
        """Human-readable polar equations, one line per amplitude/phase."""
        lines = []
        for j in range(1, self.mode_count + 1):
            lines.append(_format_polar_equation(self, j, "rho", digits))
            lines.append(_format_polar_equation(self, j, "theta", digits))
        note = _phase_generator_note(self.terms)
        if note:
            lines.append(note)
        return "\n".join(lines)


def _rho_monomial_str(exps):
    parts = []
    for l, a in enumerate(exps):
        if a == 0:
            continue
        name = f"rho{l+1}"
        parts.append(name if a == 1 else f"{name}^{a}")
    return "*".join(parts) if parts else "1"


def _canonical_phase(nu):
    """Flip the sign of a phase combination so its last nonzero is positive.

    Keeps the printed psi consistent with the highest mode's phase entering
    positively (psi = theta2 - 2 theta1 for the 1:2 resonance).
    """
    nz = [v for v in nu if v != 0]
    if nz and nz[-1] < 0:
        return tuple(-v for v in nu)
    return tuple(nu)


def _phase_generator_note(terms):
    gens = set()
    for tl in terms:
        for t in tl:
            nu = tuple(t.phase)
            if any(v != 0 for v in nu):
                gens.add(_canonical_phase(nu))
    if not gens:
        return ""
    notes = []
    for nu in sorted(gens):
        pos = [(l, v) for l, v in enumerate(nu) if v > 0]
        neg = [(l, v) for l, v in enumerate(nu) if v < 0]
        parts = []
        for l, v in pos + neg:
            mag = "" if abs(v) == 1 else f"{abs(v)}*"
            parts.append(("- " if v < 0 else "+ ") + f"{mag}theta{l+1}")
        expr = " ".join(parts)
        expr = expr[2:] if expr.startswith("+ ") else "-" + expr[2:]
        notes.append(f"psi = {expr}")
    return "with " + "; ".join(notes)


def _format_term(coefficient, exps, digits):
    mono = _rho_monomial_str(exps)
    return f"{coefficient:+.{digits}g}" + ("" if mono == "1" else f"*{mono}")


def _format_phase_term(term, exps, func, digits):
    canon = _canonical_phase(term.phase)
    sign = "+" if canon == tuple(term.phase) else "-"
    c = term.coefficient
    mono = _rho_monomial_str(exps)
    mono = "" if mono == "1" else f"{mono}*"
    return (f"+ {func}(({c.real:+.{digits}g}{c.imag:+.{digits}g}i)*"
            f"{mono}e^({sign}i*psi))")


def _format_polar_equation(pm, mode, which, digits):
    """One displayed equation line.

    When every term carries a rho_j factor the phase line is printed as
    theta_j' = omega_j (factor divided out); otherwise both lines keep the
    rho_j' + i rho_j theta_j' normalization.
    """
    j = mode
    plain = all(t.rho_exponents[j - 1] >= 1 for t in pm.terms[j - 1])
    parts = []
    for t in pm.terms[j - 1]:
        exps = list(t.rho_exponents)
        if which == "theta" and plain:
            exps[j - 1] -= 1
        if any(v != 0 for v in t.phase):
            parts.append(_format_phase_term(
                t, exps, "Re" if which == "rho" else "Im", digits))
            continue
        c = t.coefficient.real if which == "rho" else t.coefficient.imag
        if c == 0:
            continue
        parts.append(_format_term(c, exps, digits))
    body = " ".join(parts) or "0"
    if which == "rho":
        return f"rho{j}' = {body}"
    if plain:
        return f"theta{j}' = {body}"
    return f"rho{j}*theta{j}' = {body}"


def to_polar(nf):
    """Rewrite the normal-form field in polar coordinates.

    Every monomial c z^k of equation j contributes
    c rho^a e^(i nu.theta) to rho_j' + i rho_j theta_j', with amplitude
    powers a_l = k_{2l-1} + k_{2l} and phase combination
    nu = (k_odd - k_even) - e_j. The zero-amplitude limit reproduces the
    linear damping and frequency exactly.
    """
    m = nf.mode_count
    terms = []
    for j in range(1, m + 1):
        tl = [PolarTerm(rho_exponents=tuple(1 if l == j - 1 else 0
                                            for l in range(m)),
                        phase=(0,) * m,
                        coefficient=complex(nf.eigenvalues[j - 1]))]
        for exp, c in zip(nf.resonance_set[j - 1], nf.n_coeffs[j - 1]):
            a = tuple(exp[2 * l] + exp[2 * l + 1] for l in range(m))
            nu = tuple(exp[2 * l] - exp[2 * l + 1] - (1 if l == j - 1 else 0)
                       for l in range(m))
            tl.append(PolarTerm(rho_exponents=a, phase=nu,
                                coefficient=complex(c)))
        terms.append(tuple(tl))
    return PolarModel(eigenvalues=nf.eigenvalues.copy(), terms=tuple(terms),
                      field_source=nf)


# ---------------------------------------------------------------------------
# integration of the normal form
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalFormForcing:
    """Periodic forcing of the normal form: z_j' += -i f_j e^(i Omega t)."""

    amplitudes: np.ndarray    # (m,) nonnegative
    omega: float

    def __post_init__(self):
        f = np.asarray(self.amplitudes, dtype=float)
        if np.any(f < 0):
            raise InvalidArgumentError("forcing amplitudes must be >= 0")
        object.__setattr__(self, "amplitudes", f)


def evolve_normal_form(pm, z0, t_span, dt_out, forcing=None,
                       rtol=1e-10, atol=1e-13, blowup_factor=1e6):
    """Integrate the normal-form dynamics from a complex initial condition.

    Integration runs on the Cartesian z-form of the field (no 1/rho
    singularity at the origin); output is a Trajectory with channels
    (Re z_1, Im z_1, ...).

    Raises
    ------
    DivergenceError when |z| exceeds blowup_factor times its initial size.
    """
    from scipy.integrate import solve_ivp

    nf = pm.field_source if isinstance(pm, PolarModel) else pm
    if nf is None:
        raise InvalidArgumentError("polar model lacks its source field")
    m = nf.mode_count
    z0 = np.atleast_1d(np.asarray(z0, dtype=complex))
    if z0.shape != (m,):
        raise InvalidArgumentError(f"z0 must have {m} complex entries")
    scale = np.linalg.norm(z0)

    f_amp = None
    if forcing is not None:
        f_amp = forcing.amplitudes
        omega_f = forcing.omega
        # forced runs may legitimately grow from rest: include the linear
        # steady-state response scale in the blow-up reference
        damping = np.abs(nf.eigenvalues.real)
        damping = np.where(damping > 0, damping, 1.0)
        scale = max(scale, float(np.max(f_amp / damping, initial=0.0)))
    limit = blowup_factor * max(scale, 1e-12)

    def rhs(t, u):
        z = u[:m] + 1j * u[m:]
        full = _conjugate_structured(z[None, :])
        dz = nf.field(full)[0, 0::2]
        if f_amp is not None:
            dz = dz - 1j * f_amp * np.exp(1j * omega_f * t)
        return np.concatenate([dz.real, dz.imag])

    def blowup(t, u):
        return np.linalg.norm(u) - limit
    blowup.terminal = True

    t0, t1 = float(t_span[0]), float(t_span[1])
    n_out = int(np.floor((t1 - t0) / dt_out + 1e-9)) + 1
    t_eval = t0 + dt_out * np.arange(n_out)
    u0 = np.concatenate([z0.real, z0.imag])
    sol = solve_ivp(rhs, (t0, t_eval[-1]), u0, method="RK45", t_eval=t_eval,
                    rtol=rtol, atol=atol, events=blowup)
    if sol.status == 1:
        raise DivergenceError(
            f"normal-form amplitude exceeded {blowup_factor:.0e} x initial "
            f"at t = {sol.t_events[0][0]:.6g}")
    if not sol.success:
        raise DivergenceError(f"normal-form integration failed: {sol.message}")
    labels = tuple(x for j in range(m) for x in (f"re_z{j+1}", f"im_z{j+1}"))
    states = np.empty((len(sol.t), 2 * m))
    states[:, 0::2] = sol.y[:m].T
    states[:, 1::2] = sol.y[m:].T
    return Trajectory(times=sol.t, states=states, channel_labels=labels)


def normal_trajectory_to_complex(traj):
    """(n, m) complex primary coordinates from an evolve_normal_form output."""
    states = traj.states
    return states[:, 0::2] + 1j * states[:, 1::2]
