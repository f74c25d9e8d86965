"""Invariant-manifold geometry: orthonormal tangent plus polynomial graph.

A fitted manifold maps reduced coordinates xi in R^{2m} to observables
y in R^p via

    y = V1 xi + v_nl(xi),    V1' V1 = I,    V1' v_nl = 0,

with v_nl a polynomial of degrees 2..M. Projection is xi = V1' y.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import polynomials as poly
from .errors import (
    FoldSuspectedError,
    IllConditionedFitError,
    InvalidArgumentError,
)

_CONSTRAINT_TOL = 1e-10
_COND_LIMIT = 1e12
_FOLD_RESIDUAL_FRACTION = 0.30


@dataclass(frozen=True)
class ManifoldModel:
    """Graph-style manifold parametrization over an orthonormal tangent."""

    tangent: np.ndarray          # (p, 2m), orthonormal columns
    graph_exponents: tuple       # K multi-indices over 2m variables
    graph_coeffs: np.ndarray     # (K, p); rows orthogonal to tangent columns
    order: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        v1 = np.asarray(self.tangent, dtype=float)
        c = np.asarray(self.graph_coeffs, dtype=float)
        if c.size == 0:
            c = c.reshape(0, v1.shape[0])
        object.__setattr__(self, "tangent", v1)
        object.__setattr__(self, "graph_coeffs", c)
        object.__setattr__(self, "graph_exponents", tuple(
            tuple(e) for e in self.graph_exponents))
        if self.order < 1:
            raise InvalidArgumentError("order must be >= 1")
        gram = v1.T @ v1
        if np.abs(gram - np.eye(v1.shape[1])).max() > _CONSTRAINT_TOL:
            raise InvalidArgumentError("tangent columns are not orthonormal")
        if c.shape[0] and np.abs(c @ v1).max() > 1e-8:
            raise InvalidArgumentError(
                "graph coefficients are not orthogonal to the tangent")
        for e in self.graph_exponents:
            if sum(e) < 2:
                raise InvalidArgumentError(
                    "graph polynomial must not contain constant/linear terms")

    @property
    def observable_dim(self):
        return self.tangent.shape[0]

    @property
    def reduced_dim(self):
        return self.tangent.shape[1]

    def project(self, y):
        """Reduced coordinates V1' y; accepts a single vector or batch."""
        y = np.asarray(y, dtype=float)
        return y @ self.tangent

    def lift(self, xi):
        """Observable-space point V1 xi + v_nl(xi); vector or batch."""
        xi = np.asarray(xi, dtype=float)
        single = xi.ndim == 1
        xi2 = np.atleast_2d(xi)
        y = xi2 @ self.tangent.T
        if self.graph_coeffs.shape[0]:
            phi = poly.monomial_design(xi2, self.graph_exponents)
            y = y + phi @ self.graph_coeffs
        return y[0] if single else y

    def graph_residual_ratio(self, states):
        """RMS reconstruction residual / max point norm over given samples."""
        xi = self.project(states)
        rec = self.lift(xi)
        res = np.linalg.norm(states - rec, axis=1)
        radius = np.linalg.norm(states, axis=1).max()
        return float(np.sqrt(np.mean(res**2)) / radius)

    def to_json(self):
        return {
            "p": self.observable_dim,
            "m": self.reduced_dim // 2,
            "order": self.order,
            "tangent": self.tangent.flatten().tolist(),
            "monomials": [
                {"exponents": list(e),
                 "coefficients": self.graph_coeffs[k].tolist()}
                for k, e in enumerate(self.graph_exponents)
            ],
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, data):
        p = data["p"]
        two_m = 2 * data["m"]
        exps = tuple(tuple(mono["exponents"]) for mono in data["monomials"])
        coeffs = np.array([mono["coefficients"] for mono in data["monomials"]])
        if coeffs.size == 0:
            coeffs = np.zeros((0, p))
        return cls(
            tangent=np.array(data["tangent"]).reshape(p, two_m),
            graph_exponents=exps,
            graph_coeffs=coeffs,
            order=data["order"],
            metadata=data.get("metadata", {}),
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def project(model, y):
    return model.project(y)


def lift(model, xi):
    return model.lift(xi)


def _orthonormalize_deterministic(v1):
    """QR-orthonormalize and fix column signs (largest entry positive)."""
    q, r = np.linalg.qr(v1)
    # absorb the sign of R's diagonal so Q is continuous in the input
    q = q * np.sign(np.diag(r))
    for j in range(q.shape[1]):
        k = np.argmax(np.abs(q[:, j]))
        if q[k, j] < 0:
            q[:, j] = -q[:, j]
    return q


def _solve_graph_coeffs(states, v1, exponents):
    """Least-squares graph coefficients on the tangent complement."""
    xi = states @ v1
    resid = states - xi @ v1.T
    if not exponents:
        return np.zeros((0, states.shape[1])), 0.0
    phi = poly.monomial_design(xi, exponents)
    cond = np.linalg.cond(phi)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise IllConditionedFitError(
            f"monomial design matrix is rank deficient "
            f"(condition number {cond:.3e})", condition_number=cond)
    coeffs, *_ = np.linalg.lstsq(phi, resid, rcond=None)
    # exact constraint cleanup: remove any tangent component from the graph
    coeffs = coeffs - (coeffs @ v1) @ v1.T
    return coeffs, cond


def _fit_cost(states, v1, exponents, coeffs):
    xi = states @ v1
    rec = xi @ v1.T
    if coeffs.shape[0]:
        rec = rec + poly.monomial_design(xi, exponents) @ coeffs
    return float(np.sum((states - rec) ** 2))


def fit_manifold(data, ssm_dim, order, refine=False, max_refine_iterations=200,
                 refine_tol=1e-9):
    """Fit the manifold parametrization to an embedded dataset.

    The tangent is initialized from the leading left singular vectors of the
    pooled snapshot matrix; graph coefficients solve a linear least-squares
    problem on the tangent-complement residual. With ``refine=True`` a
    Gauss-Newton pass adjusts tangent and coefficients jointly (orthonormality
    restored each step, cost never allowed to increase).

    Parameters
    ----------
    data : EmbeddedDataset
        Centered observable data (equilibrium already subtracted).
    ssm_dim : int
        Manifold dimension 2m (even).
    order : int
        Graph polynomial order M; 1 means a flat manifold.

    Raises
    ------
    InvalidArgumentError, IllConditionedFitError, FoldSuspectedError
    """
    states = data.pooled_states()
    n, p = states.shape
    if ssm_dim % 2 != 0 or ssm_dim < 2:
        raise InvalidArgumentError("ssm_dim must be a positive even integer")
    if ssm_dim > p:
        raise InvalidArgumentError(
            f"ssm_dim {ssm_dim} exceeds observable dimension {p}")
    exponents = tuple(poly.monomial_exponents(ssm_dim, range(2, order + 1)))
    n_params = p * ssm_dim + len(exponents) * p
    if n < 10 * n_params:
        raise InvalidArgumentError(
            f"need >= {10 * n_params} pooled samples for {n_params} "
            f"parameters, have {n}")

    u, _, _ = np.linalg.svd(states.T, full_matrices=False)
    v1 = _orthonormalize_deterministic(u[:, :ssm_dim])
    coeffs, cond = _solve_graph_coeffs(states, v1, exponents)
    cost = _fit_cost(states, v1, exponents, coeffs)

    refine_steps = 0
    if refine and exponents:
        v1, coeffs, cost, refine_steps = _gauss_newton_refine(
            states, v1, exponents, coeffs, cost,
            max_refine_iterations, refine_tol)

    model = ManifoldModel(
        tangent=v1, graph_exponents=exponents, graph_coeffs=coeffs,
        order=order,
        metadata={
            "samples": int(n),
            "design_condition": float(cond),
            "refine_steps": int(refine_steps),
            "training_rms_residual": float(np.sqrt(cost / n)),
        },
    )
    ratio = model.graph_residual_ratio(states)
    if ratio > _FOLD_RESIDUAL_FRACTION:
        raise FoldSuspectedError(
            f"graph residual is {100 * ratio:.1f}% of the data radius; "
            "the manifold may fold over its tangent space")
    return model


def _gauss_newton_refine(states, v1, exponents, coeffs, cost, max_iter, tol):
    """Joint refinement of (V1, coeffs); monotone via step backtracking."""
    n, p = states.shape
    two_m = v1.shape[1]
    steps = 0
    for _ in range(max_iter):
        xi = states @ v1
        phi = poly.monomial_design(xi, exponents)
        grad = poly.monomial_gradient_design(xi, exponents)  # (n, K, 2m)
        rec = xi @ v1.T + phi @ coeffs
        resid = states - rec                                  # (n, p)

        # residual derivative wrt dV (p*2m) then wrt dC (K*p)
        n_v = p * two_m
        n_c = len(exponents) * p
        jac = np.zeros((n * p, n_v + n_c))
        # dxi = dV' y ; d rec = dV xi + V1 dxi + (grad dxi) C
        dvnl_dxi = np.einsum("nkl,kp->npl", grad, coeffs)     # (n, p, 2m)
        for a in range(p):
            for b in range(two_m):
                col = np.zeros((n, p))
                col[:, a] += xi[:, b]                          # dV xi
                dxi = np.zeros((n, two_m))
                dxi[:, b] = states[:, a]                       # dV' y
                col += dxi @ v1.T
                col += np.einsum("npl,nl->np", dvnl_dxi, dxi)
                jac[:, a * two_m + b] = col.ravel()
        for k in range(len(exponents)):
            for a in range(p):
                col = np.zeros((n, p))
                col[:, a] = phi[:, k]
                jac[:, n_v + k * p + a] = col.ravel()

        step, *_ = np.linalg.lstsq(jac, resid.ravel(), rcond=None)
        dv = step[:n_v].reshape(p, two_m)
        dc = step[n_v:].reshape(len(exponents), p)

        improved = False
        alpha = 1.0
        for _ in range(30):
            v1_new = _orthonormalize_deterministic(v1 + alpha * dv)
            c_new = coeffs + alpha * dc
            c_new = c_new - (c_new @ v1_new) @ v1_new.T
            cost_new = _fit_cost(states, v1_new, exponents, c_new)
            if cost_new <= cost:
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        steps += 1
        rel_change = (cost - cost_new) / max(cost, 1e-300)
        v1, coeffs, cost = v1_new, c_new, cost_new
        if rel_change < tol:
            break
    else:
        warnings.warn("manifold refinement hit the iteration cap")
    # final least-squares polish of the coefficients for the refined tangent
    coeffs, _ = _solve_graph_coeffs(states, v1, exponents)
    cost = _fit_cost(states, v1, exponents, coeffs)
    return v1, coeffs, cost, steps


def estimate_equilibrium(trajectories, tail_fraction=0.05):
    """Mean of trajectory tails; fallback when no equilibrium is declared."""
    tails = []
    for tr in trajectories:
        k = max(1, int(np.ceil(tail_fraction * tr.n_samples)))
        tails.append(tr.states[-k:])
    return np.vstack(tails).mean(axis=0)
