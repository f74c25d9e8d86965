"""Full-order mechanical systems: assembly, spectra, time integration.

Systems are second-order models

    M q'' + C q' + K q + f_nl(q, q') = f_ext(t)

with a constant mass matrix and polynomial nonlinear forces. They serve as
data generators and as the ground-truth oracle for everything downstream.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .errors import (
    DecompositionError,
    IntegrationError,
    InvalidArgumentError,
)

_MASS_SYMMETRY_RTOL = 1e-12
_EIG_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class NonlinearTerm:
    """One polynomial force term acting on a single degree of freedom.

    The force contribution on dof ``dof`` is
    ``coefficient * prod_i q_i^q_exponents[i] * prod_i qdot_i^qdot_exponents[i]``
    and enters the equation of motion on the left-hand side (restoring
    convention).
    """

    dof: int
    q_exponents: tuple
    qdot_exponents: tuple
    coefficient: float

    def total_degree(self):
        return sum(self.q_exponents) + sum(self.qdot_exponents)


@dataclass(frozen=True)
class MechSystem:
    """N-dof mechanical system with polynomial nonlinear forces.

    Parameters
    ----------
    mass, stiffness, damping : (N, N) arrays
        Constant system matrices. The mass matrix must be symmetric
        positive definite.
    nonlinear_terms : tuple of NonlinearTerm
        Polynomial restoring-force terms; each must vanish at the origin
        (total degree >= 1).
    """

    mass: np.ndarray
    stiffness: np.ndarray
    damping: np.ndarray
    nonlinear_terms: tuple = ()

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=float)
        k = np.asarray(self.stiffness, dtype=float)
        c = np.asarray(self.damping, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidArgumentError("mass matrix must be square")
        n = m.shape[0]
        if k.shape != (n, n) or c.shape != (n, n):
            raise InvalidArgumentError("matrix shapes are inconsistent")
        scale = max(np.abs(m).max(), 1.0)
        if np.abs(m - m.T).max() > _MASS_SYMMETRY_RTOL * scale:
            raise InvalidArgumentError("mass matrix is not symmetric")
        try:
            np.linalg.cholesky(m)
        except np.linalg.LinAlgError as exc:
            raise InvalidArgumentError(
                "mass matrix is not positive definite") from exc
        for term in self.nonlinear_terms:
            if len(term.q_exponents) != n or len(term.qdot_exponents) != n:
                raise InvalidArgumentError(
                    "nonlinear term exponent length != dof count")
            if term.total_degree() < 1:
                raise InvalidArgumentError(
                    "nonlinear force must vanish at the origin")
            if not 0 <= term.dof < n:
                raise InvalidArgumentError(f"dof index {term.dof} out of range")
        object.__setattr__(self, "mass", m)
        object.__setattr__(self, "stiffness", k)
        object.__setattr__(self, "damping", c)
        object.__setattr__(self, "nonlinear_terms", tuple(self.nonlinear_terms))

    @property
    def dof_count(self):
        return self.mass.shape[0]

    def nonlinear_force(self, q, qdot):
        """Nonlinear restoring force vector at (q, q')."""
        f = np.zeros(self.dof_count)
        for term in self.nonlinear_terms:
            val = term.coefficient
            for i, e in enumerate(term.q_exponents):
                if e:
                    val *= q[i] ** e
            for i, e in enumerate(term.qdot_exponents):
                if e:
                    val *= qdot[i] ** e
            f[term.dof] += val
        return f

    def nonlinear_jacobians_at_origin(self):
        """(df/dq, df/dq') of the nonlinear force at the origin.

        Nonzero only if degree-1 terms were placed in the nonlinear list.
        """
        n = self.dof_count
        dq = np.zeros((n, n))
        dqd = np.zeros((n, n))
        for term in self.nonlinear_terms:
            if term.total_degree() != 1:
                continue
            if sum(term.q_exponents) == 1:
                j = term.q_exponents.index(1)
                dq[term.dof, j] += term.coefficient
            else:
                j = term.qdot_exponents.index(1)
                dqd[term.dof, j] += term.coefficient
        return dq, dqd

    def to_json(self):
        return {
            "dof_count": self.dof_count,
            "mass": self.mass.flatten().tolist(),
            "stiffness": self.stiffness.flatten().tolist(),
            "damping": self.damping.flatten().tolist(),
            "nonlinear_terms": [
                {
                    "dof": t.dof,
                    "q_exponents": list(t.q_exponents),
                    "qdot_exponents": list(t.qdot_exponents),
                    "coefficient": t.coefficient,
                }
                for t in self.nonlinear_terms
            ],
        }

    @classmethod
    def from_json(cls, data):
        n = data["dof_count"]
        terms = tuple(
            NonlinearTerm(
                dof=t["dof"],
                q_exponents=tuple(t["q_exponents"]),
                qdot_exponents=tuple(t["qdot_exponents"]),
                coefficient=t["coefficient"],
            )
            for t in data["nonlinear_terms"]
        )
        return cls(
            mass=np.array(data["mass"]).reshape(n, n),
            stiffness=np.array(data["stiffness"]).reshape(n, n),
            damping=np.array(data["damping"]).reshape(n, n),
            nonlinear_terms=terms,
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class Spectrum:
    """Eigenstructure of the first-order system matrix.

    Eigenvalues are stored with conjugate pairs adjacent, pairs ordered by
    decreasing real part (slowest/least-damped first); within a pair the
    positive-imaginary member comes first. Mode numbers are 1-based.
    """

    eigenvalues: np.ndarray        # (2N,) complex
    eigenvectors: np.ndarray       # (2N, 2N) complex, columns match order
    defective_warning: bool = False

    @property
    def n_modes(self):
        return len(self.eigenvalues) // 2

    def mode_pair(self, mode):
        """(lambda_j, conj) for 1-based mode number j."""
        if not 1 <= mode <= self.n_modes:
            raise InvalidArgumentError(f"mode {mode} out of range")
        j = 2 * (mode - 1)
        return self.eigenvalues[j], self.eigenvalues[j + 1]

    def mode_eigenvalue(self, mode):
        return self.mode_pair(mode)[0]

    def mode_eigenvector(self, mode):
        if not 1 <= mode <= self.n_modes:
            raise InvalidArgumentError(f"mode {mode} out of range")
        return self.eigenvectors[:, 2 * (mode - 1)]

    @property
    def stable(self):
        return bool(np.all(self.eigenvalues.real < 0))


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled multichannel time series."""

    times: np.ndarray
    states: np.ndarray
    channel_labels: tuple = ()

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.atleast_2d(np.asarray(self.states, dtype=float))
        if x.shape[0] != t.shape[0]:
            raise InvalidArgumentError(
                f"states rows ({x.shape[0]}) != number of times ({t.shape[0]})")
        if len(t) >= 2:
            steps = np.diff(t)
            dt = steps[0]
            if dt <= 0 or np.abs(steps - dt).max() > 1e-9 * dt:
                raise InvalidArgumentError("times must increase with uniform step")
        labels = tuple(self.channel_labels)
        if labels and len(labels) != x.shape[1]:
            raise InvalidArgumentError("channel label count != channel count")
        if not labels:
            labels = tuple(f"x{i}" for i in range(x.shape[1]))
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "channel_labels", labels)

    @property
    def dt(self):
        if len(self.times) < 2:
            raise InvalidArgumentError("trajectory has fewer than two samples")
        return self.times[1] - self.times[0]

    @property
    def n_samples(self):
        return len(self.times)

    @property
    def n_channels(self):
        return self.states.shape[1]

    def channel(self, label_or_index):
        if isinstance(label_or_index, str):
            idx = self.channel_labels.index(label_or_index)
        else:
            idx = label_or_index
        return self.states[:, idx]

    def select_channels(self, indices):
        idx = [self.channel_labels.index(c) if isinstance(c, str) else c
               for c in indices]
        return Trajectory(
            times=self.times,
            states=self.states[:, idx],
            channel_labels=tuple(self.channel_labels[i] for i in idx),
        )

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("t," + ",".join(self.channel_labels) + "\n")
            for t, row in zip(self.times, self.states):
                vals = ",".join(f"{v:.17g}" for v in row)
                fh.write(f"{t:.17g},{vals}\n")

    @classmethod
    def from_csv(cls, path):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            if not header or header[0] != "t":
                raise InvalidArgumentError(f"{path}: malformed trajectory header")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        return cls(times=data[:, 0], states=data[:, 1:],
                   channel_labels=tuple(header[1:]))


@dataclass(frozen=True)
class ForcingSignal:
    """Spatially shaped harmonic force  amplitude * shape * cos(omega t)."""

    shape: np.ndarray
    omega: float
    amplitude: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "shape", np.asarray(self.shape, dtype=float))

    def __call__(self, t):
        return self.amplitude * np.cos(self.omega * t) * self.shape


def build_oscillator_chain(n_masses, first_mass, other_mass, mass_prop,
                           stiff_prop, nl_terms=()):
    """Assemble the benchmark oscillator chain.

    Masses are coupled by unit-stiffness springs; the first mass is also
    grounded through a spring (which may carry the nonlinear force terms),
    the far end is free. Damping is proportional:
    ``C = mass_prop * M + stiff_prop * K``.

    Parameters
    ----------
    n_masses : int
        Number of masses (>= 2).
    first_mass, other_mass : float
        Mass of the first / remaining masses [kg].
    mass_prop, stiff_prop : float
        Proportional damping constants.
    nl_terms : iterable of NonlinearTerm
        Nonlinear restoring-force terms (typically acting on dof 0).
    """
    if n_masses < 2:
        raise InvalidArgumentError("chain needs at least 2 masses")
    if first_mass <= 0 or other_mass <= 0:
        raise InvalidArgumentError("masses must be positive")
    n = n_masses
    m = np.diag([first_mass] + [other_mass] * (n - 1))
    k = np.zeros((n, n))
    for i in range(n):
        k[i, i] += 1.0                    # spring to the left of mass i
        if i + 1 < n:
            k[i, i] += 1.0
            k[i, i + 1] -= 1.0
            k[i + 1, i] -= 1.0
    c = mass_prop * m + stiff_prop * k
    return MechSystem(mass=m, stiffness=k, damping=c,
                      nonlinear_terms=tuple(nl_terms))


def chain_nonlinear_terms(n_masses):
    """The benchmark chain's nonlinear force on the first mass:

    0.33 q1'^2 + 3 q1^3 + 0.7 q1^2 q1' + 0.5 q1'^3
    """
    z = (0,) * n_masses

    def e(idx, power):
        out = [0] * n_masses
        out[idx] = power
        return tuple(out)

    return (
        NonlinearTerm(0, z, e(0, 2), 0.33),
        NonlinearTerm(0, e(0, 3), z, 3.0),
        NonlinearTerm(0, e(0, 2), e(0, 1), 0.7),
        NonlinearTerm(0, z, e(0, 3), 0.5),
    )


def first_order_matrix(sys):
    """First-order system matrix A of x' = A x + nonlinear terms."""
    n = sys.dof_count
    try:
        minv = np.linalg.inv(sys.mass)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError("mass matrix is singular") from exc
    dq, dqd = sys.nonlinear_jacobians_at_origin()
    a = np.zeros((2 * n, 2 * n))
    a[:n, n:] = np.eye(n)
    a[n:, :n] = -minv @ (sys.stiffness + dq)
    a[n:, n:] = -minv @ (sys.damping + dqd)
    return a


def linearize(sys):
    """Linearization and spectrum of a mechanical system.

    Returns
    -------
    (A, Spectrum)
        The 2N x 2N first-order matrix and its eigenstructure with
        conjugate pairs adjacent, slowest modes first.
    """
    a = first_order_matrix(sys)
    vals, vecs = np.linalg.eig(a)

    order = _conjugate_pair_order(vals)
    vals = vals[order]
    vecs = vecs[:, order]

    # fix eigenvector phase: largest-magnitude entry real positive
    for j in range(0, len(vals), 2):
        v = vecs[:, j]
        kmax = np.argmax(np.abs(v))
        phase = v[kmax] / abs(v[kmax])
        vecs[:, j] = v / phase / np.linalg.norm(v / phase)
        vecs[:, j + 1] = np.conj(vecs[:, j])

    defective = False
    for j in range(len(vals)):
        v = vecs[:, j]
        res = np.linalg.norm(a @ v - vals[j] * v) / np.linalg.norm(v)
        if res > _EIG_RESIDUAL_TOL:
            defective = True
    if np.linalg.cond(vecs) > 1e8:
        defective = True
    if defective:
        warnings.warn("system matrix appears defective within tolerance")
    return a, Spectrum(eigenvalues=vals, eigenvectors=vecs,
                       defective_warning=defective)


def _conjugate_pair_order(vals):
    """Indices arranging eigenvalues as adjacent conjugate pairs.

    Pairs sorted by decreasing real part (tie-break: increasing |Im|);
    positive-imaginary member first within each pair.
    """
    n = len(vals)
    used = np.zeros(n, dtype=bool)
    pairs = []
    idx_by_im = np.argsort(-vals.imag)
    for i in idx_by_im:
        if used[i] or vals[i].imag <= 0:
            continue
        # closest conjugate among unused negative-imag eigenvalues
        candidates = [j for j in range(n)
                      if not used[j] and j != i and vals[j].imag < 0]
        if not candidates:
            continue
        j = min(candidates, key=lambda j: abs(vals[j] - np.conj(vals[i])))
        if abs(vals[j] - np.conj(vals[i])) > 1e-9 * max(1.0, abs(vals[i])):
            continue
        used[i] = used[j] = True
        pairs.append((i, j))
    if 2 * len(pairs) != n:
        raise DecompositionError(
            "spectrum is not composed of complex conjugate pairs "
            "(overdamped or degenerate system)")
    pairs.sort(key=lambda p: (-vals[p[0]].real, abs(vals[p[0]].imag)))
    order = []
    for i, j in pairs:
        order.extend((i, j))
    return np.array(order)


def integrate(sys, x0, t_span, dt_out, forcing=None, rtol=1e-9, atol=1e-12):
    """Integrate the full-order model and resample to a uniform grid.

    Parameters
    ----------
    sys : MechSystem
    x0 : (2N,) array
        Initial state (q, q').
    t_span : (t0, t1)
    dt_out : float
        Output sampling step.
    forcing : ForcingSignal or None
    rtol, atol : float
        Adaptive RK tolerances.

    Returns
    -------
    Trajectory with channels q1..qN, v1..vN.
    """
    if dt_out <= 0:
        raise InvalidArgumentError("dt_out must be positive")
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise InvalidArgumentError("t_span must be nondegenerate")
    n = sys.dof_count
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (2 * n,):
        raise InvalidArgumentError(f"x0 must have length {2 * n}")

    rhs = make_rhs(sys, forcing)
    n_out = int(np.floor((t1 - t0) / dt_out + 1e-9)) + 1
    t_eval = t0 + dt_out * np.arange(n_out)
    sol = solve_ivp(rhs, (t0, t_eval[-1]), x0, method="RK45",
                    t_eval=t_eval, rtol=rtol, atol=atol)
    if not sol.success:
        last = sol.t[-1] if len(sol.t) else t0
        raise IntegrationError(f"integration failed: {sol.message}", last_time=last)
    labels = tuple(f"q{i+1}" for i in range(n)) + tuple(f"v{i+1}" for i in range(n))
    return Trajectory(times=sol.t, states=sol.y.T, channel_labels=labels)


def make_rhs(sys, forcing=None):
    """Right-hand side closure for the first-order form of the system."""
    n = sys.dof_count
    minv = np.linalg.inv(sys.mass)
    mk = minv @ sys.stiffness
    mc = minv @ sys.damping
    terms = sys.nonlinear_terms
    has_nl = len(terms) > 0

    def rhs(t, x):
        q = x[:n]
        v = x[n:]
        acc = -mk @ q - mc @ v
        if has_nl:
            acc = acc - minv @ sys.nonlinear_force(q, v)
        if forcing is not None:
            acc = acc + minv @ forcing(t)
        return np.concatenate((v, acc))

    return rhs


def slow_eigenspace_ic(spectrum, mode_set, modal_amplitudes):
    """Real initial condition in the span of selected modal subspaces.

    Parameters
    ----------
    spectrum : Spectrum
    mode_set : sequence of int
        1-based mode numbers.
    modal_amplitudes : sequence of complex
        One complex amplitude per selected mode; the initial condition is
        sum_j Re(a_j v_j).
    """
    modes = list(mode_set)
    if not modes:
        raise InvalidArgumentError("mode_set must not be empty")
    amps = list(modal_amplitudes)
    if len(amps) != len(modes):
        raise InvalidArgumentError("one amplitude per mode required")
    x = np.zeros(spectrum.eigenvectors.shape[0])
    for mode, a in zip(modes, amps):
        x = x + np.real(a * spectrum.mode_eigenvector(mode))
    return x


def mechanical_energy(sys, trajectory):
    """Total mechanical energy 0.5 v'Mv + 0.5 q'Kq along a trajectory.

    Uses the quadratic part of the potential only; adequate for energy-decay
    checks of the linear chain.
    """
    n = sys.dof_count
    q = trajectory.states[:, :n]
    v = trajectory.states[:, n:]
    return 0.5 * (np.einsum("ij,jk,ik->i", v, sys.mass, v)
                  + np.einsum("ij,jk,ik->i", q, sys.stiffness, q))
