"""Multivariate monomial bases and truncated polynomial algebra.

Real monomial bases are used for manifold graphs and reduced vector fields;
the dict-based truncated algebra is used for the complex normal-form maps
(composition, powers, series inversion). Multi-indices are exponent tuples
ordered graded-lexicographically.
"""

from itertools import combinations_with_replacement

import numpy as np


def monomial_exponents(n_vars, degrees):
    """Multi-indices of the given total degrees, graded-lex ordered.

    Parameters
    ----------
    n_vars : int
        Number of variables.
    degrees : iterable of int
        Total degrees to include, e.g. ``range(2, order + 1)``.

    Returns
    -------
    list of tuple of int
        Exponent tuples, ordered by total degree, then lexicographically
        (x1^2 before x1*x2 before x2^2).
    """
    out = []
    for deg in degrees:
        if deg < 0:
            raise ValueError(f"negative degree {deg}")
        for combo in combinations_with_replacement(range(n_vars), deg):
            exp = [0] * n_vars
            for idx in combo:
                exp[idx] += 1
            out.append(tuple(exp))
    return out


def monomial_design(points, exponents):
    """Evaluate monomials at sample points.

    Parameters
    ----------
    points : (n, v) array
        Sample points (real or complex).
    exponents : sequence of exponent tuples

    Returns
    -------
    (n, K) array with entry [i, k] = prod_l points[i, l] ** exponents[k][l].
    """
    points = np.atleast_2d(np.asarray(points))
    if not exponents:
        return np.zeros((points.shape[0], 0), dtype=points.dtype)
    exps = np.asarray(exponents)  # (K, v)
    # n * K * v intermediate; fine at the sizes used here
    return np.prod(points[:, None, :] ** exps[None, :, :], axis=2)


def directional_derivative_design(points, velocities, exponents):
    """Evaluate d/dt of each monomial along given velocities.

    Entry [i, k] = sum_l e_l * points[i]^(e - unit_l) * velocities[i, l],
    i.e. the chain-rule time derivative of monomial k at sample i.
    """
    points = np.atleast_2d(np.asarray(points))
    velocities = np.atleast_2d(np.asarray(velocities))
    n, v = points.shape
    dtype = np.result_type(points.dtype, velocities.dtype)
    out = np.zeros((n, len(exponents)), dtype=dtype)
    for k, exp in enumerate(exponents):
        acc = np.zeros(n, dtype=dtype)
        for l, e_l in enumerate(exp):
            if e_l == 0:
                continue
            reduced = list(exp)
            reduced[l] -= 1
            term = np.full(n, float(e_l), dtype=dtype)
            for j, e_j in enumerate(reduced):
                if e_j:
                    term = term * points[:, j] ** e_j
            acc += term * velocities[:, l]
        out[:, k] = acc
    return out


def monomial_gradient_design(points, exponents):
    """Gradients of every monomial at every point.

    Returns
    -------
    (n, K, v) array with [i, k, l] = d(monomial_k)/dx_l at points[i].
    """
    points = np.atleast_2d(np.asarray(points))
    n, v = points.shape
    out = np.zeros((n, len(exponents), v), dtype=points.dtype)
    for k, exp in enumerate(exponents):
        for l, e_l in enumerate(exp):
            if e_l == 0:
                continue
            reduced = list(exp)
            reduced[l] -= 1
            term = np.full(n, float(e_l), dtype=points.dtype)
            for j, e_j in enumerate(reduced):
                if e_j:
                    term = term * points[:, j] ** e_j
            out[:, k, l] = term
    return out


# ---------------------------------------------------------------------------
# Truncated polynomial algebra on dict representations.
#
# A polynomial in v variables is a dict {exponent tuple: coefficient}; the
# zero polynomial is the empty dict. All operations truncate above max_deg.
# ---------------------------------------------------------------------------

def poly_add(p, q):
    out = dict(p)
    for exp, c in q.items():
        out[exp] = out.get(exp, 0.0) + c
    return {e: c for e, c in out.items() if c != 0.0}


def poly_scale(p, factor):
    return {e: factor * c for e, c in p.items()}


def poly_mul(p, q, max_deg):
    out = {}
    for e1, c1 in p.items():
        d1 = sum(e1)
        for e2, c2 in q.items():
            if d1 + sum(e2) > max_deg:
                continue
            exp = tuple(a + b for a, b in zip(e1, e2))
            out[exp] = out.get(exp, 0.0) + c1 * c2
    return out


def poly_pow(p, power, max_deg, n_vars):
    out = {(0,) * n_vars: 1.0}
    for _ in range(power):
        out = poly_mul(out, p, max_deg)
    return out


def poly_compose(p, substitutions, max_deg, n_vars_out):
    """Substitute each variable of p by a polynomial.

    Parameters
    ----------
    p : dict
        Polynomial in len(substitutions) variables.
    substitutions : list of dict
        Polynomial (in n_vars_out variables) substituted for each variable.
    max_deg : int
        Truncation order of the result.
    n_vars_out : int
        Number of variables of the substituted polynomials.
    """
    # memoize powers of each substituted variable
    power_cache = [{} for _ in substitutions]

    def get_power(l, k):
        if k == 0:
            return {(0,) * n_vars_out: 1.0}
        cache = power_cache[l]
        if k not in cache:
            cache[k] = poly_mul(get_power(l, k - 1), substitutions[l], max_deg)
        return cache[k]

    out = {}
    for exp, c in p.items():
        term = {(0,) * n_vars_out: c}
        for l, e_l in enumerate(exp):
            if e_l:
                term = poly_mul(term, get_power(l, e_l), max_deg)
        out = poly_add(out, term)
    return out


def map_compose(outer, inner, max_deg, n_vars):
    """Compose two polynomial maps given as lists of dicts (one per output)."""
    return [poly_compose(p, inner, max_deg, n_vars) for p in outer]


def identity_map(n_vars):
    out = []
    for l in range(n_vars):
        exp = [0] * n_vars
        exp[l] = 1
        out.append({tuple(exp): 1.0})
    return out


def invert_near_identity(nonlinear_map, max_deg, n_vars):
    """Series inverse of x + A(x) where A has only terms of degree >= 2.

    Parameters
    ----------
    nonlinear_map : list of dict
        The higher-order part A, one dict per component.
    max_deg : int
        Truncation order.
    n_vars : int

    Returns
    -------
    list of dict
        Higher-order part B of the inverse, so that
        (id + A) o (id + B) = id through order max_deg.
    """
    ident = identity_map(n_vars)
    b = [poly_scale(p, -1.0) for p in nonlinear_map]
    # fixed-point iteration B <- -A o (id + B); degree-d terms settle after
    # d - 1 sweeps, so max_deg - 1 sweeps suffice
    for _ in range(max(max_deg - 1, 1)):
        id_plus_b = [poly_add(i, p) for i, p in zip(ident, b)]
        b = [poly_scale(poly_compose(p, id_plus_b, max_deg, n_vars), -1.0)
             for p in nonlinear_map]
    return [{e: c for e, c in p.items() if sum(e) >= 2} for p in b]


def conjugate_exponent(exp):
    """Exponent of the conjugated monomial in (z1, z1*, z2, z2*, ...) vars."""
    out = list(exp)
    for l in range(0, len(exp) - 1, 2):
        out[l], out[l + 1] = out[l + 1], out[l]
    return tuple(out)
