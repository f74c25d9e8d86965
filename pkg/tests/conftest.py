"""Shared fixtures: the benchmark chain and fitted reduced-order models.

The expensive pipeline fits are session-scoped; each records its wall-clock
build time so the acceptance tests can report criterion runtimes.
"""

import time

import numpy as np
import pytest

import ssmkit as sk
from ssmkit.embedding import EmbeddedDataset, EmbeddingConfig, delay_embed
from ssmkit.mechsys import Trajectory


@pytest.fixture(scope="session")
def chain():
    return sk.build_oscillator_chain(5, 1.5, 1.0, 0.002, 0.005,
                                     sk.chain_nonlinear_terms(5))


@pytest.fixture(scope="session")
def linear_chain():
    return sk.build_oscillator_chain(5, 1.5, 1.0, 0.002, 0.005)


@pytest.fixture(scope="session")
def chain_spectrum(chain):
    t0 = time.perf_counter()
    a, spec = sk.linearize(chain)
    return {"a": a, "spectrum": spec, "seconds": time.perf_counter() - t0}


def _fit_pipeline(chain, spectrum, ics, t_final, dt, ecfg, ssm_dim, order):
    """simulate -> embed -> fit manifold -> fit dynamics, in memory."""
    trajs = [sk.integrate(chain, sk.slow_eigenspace_ic(spectrum, modes, amps),
                          (0.0, t_final), dt)
             for modes, amps in ics]
    embedded = [delay_embed(t, ecfg) for t in trajs]
    train, test = embedded[:-1], embedded[-1]
    data = EmbeddedDataset(trajectories=tuple(train))
    mani = sk.fit_manifold(data, ssm_dim, order)
    reduced = [Trajectory(times=e.times, states=mani.project(e.states))
               for e in train]
    rvf = sk.fit_reduced_field(reduced, order)
    lam = np.linalg.eigvals(rvf.linear)
    lam = np.sort_complex(lam[lam.imag > 0])
    res_set = sk.select_resonant_monomials(lam, order)
    nf = sk.fit_normal_form(rvf, reduced, order, res_set)
    return {
        "trajectories": trajs,
        "train": train,
        "test": test,
        "manifold": mani,
        "reduced": reduced,
        "rvf": rvf,
        "normal_form": nf,
        "polar": sk.to_polar(nf),
    }


@pytest.fixture(scope="session")
def models2d(chain, chain_spectrum):
    """Single-mode pipeline on full phase-space observables."""
    t0 = time.perf_counter()
    out = _fit_pipeline(
        chain, chain_spectrum["spectrum"],
        ics=[([1], [3.0]), ([1], [2.0])],
        t_final=3000.0, dt=0.445,
        ecfg=EmbeddingConfig(delay_dimension=1, delay_step=1, channels=(),
                             trim_time=900.0),
        ssm_dim=2, order=3)
    out["seconds"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def models2d_delay(chain, chain_spectrum):
    """Single-mode pipeline on the 5-dimensional delay embedding of q5."""
    t0 = time.perf_counter()
    out = _fit_pipeline(
        chain, chain_spectrum["spectrum"],
        ics=[([1], [3.0]), ([1], [2.0])],
        t_final=3000.0, dt=0.445,
        ecfg=EmbeddingConfig(delay_dimension=5, delay_step=1,
                             channels=("q5",), trim_time=900.0),
        ssm_dim=2, order=3)
    out["seconds"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def models4d(chain, chain_spectrum):
    """Two-mode pipeline: five training trajectories plus one test."""
    t0 = time.perf_counter()
    combos = [(3.0, 0.5), (0.3, 2.2), (2.0, 1.6), (1.2, 2.4), (2.6, 1.0),
              (1.8, 1.2)]
    out = _fit_pipeline(
        chain, chain_spectrum["spectrum"],
        ics=[([1, 2], list(c)) for c in combos],
        t_final=2000.0, dt=0.445,
        ecfg=EmbeddingConfig(delay_dimension=1, delay_step=1, channels=(),
                             trim_time=500.0),
        ssm_dim=4, order=3)
    out["seconds"] = time.perf_counter() - t0
    return out


def synthetic_polar_model(lam, gamma):
    """Hand-built single-mode normal form z' = lam z + gamma z^2 z*."""
    t = np.array([[1.0, 1.0], [1.0j, -1.0j]])
    nf = sk.NormalFormModel(
        eigenvalues=np.array([lam]),
        modal_change=t,
        h_inv_exponents=(), h_inv_coeffs=np.zeros((0, 1), dtype=complex),
        h_exponents=(), h_coeffs=np.zeros((0, 1), dtype=complex),
        resonance_set=(((2, 1),),),
        n_coeffs=(np.array([gamma], dtype=complex),),
        order=3)
    return nf, sk.to_polar(nf)
