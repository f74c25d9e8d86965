"""Data-driven reduced-order models on spectral submanifolds.

Learns low-dimensional invariant-manifold models of nonlinear mechanical
systems from decaying trajectory data, identifies extended polar normal
forms on them, and predicts backbone curves and forced frequency-response
curves, validated against a built-in full-order oscillator-chain simulator.
"""

from .analysis import (
    BackboneCurve,
    amplitude_map,
    backbone,
    make_amplitude_map,
    nmte,
    predict_trajectory,
)
from .embedding import (
    EmbeddedDataset,
    EmbeddingConfig,
    check_embedding_dimension,
    count_dominant_frequencies,
    delay_embed,
    trim_transient,
)
from .forcing import (
    ForcingConfig,
    FrcBranch,
    FrcPoint,
    SweepOracleResult,
    calibrate_forcing,
    forced_sweep_oracle,
    frc_closed_form_2d,
    frc_continuation,
)
from .manifold import ManifoldModel, fit_manifold, lift, project
from .mechsys import (
    ForcingSignal,
    MechSystem,
    NonlinearTerm,
    Spectrum,
    Trajectory,
    build_oscillator_chain,
    chain_nonlinear_terms,
    integrate,
    linearize,
    slow_eigenspace_ic,
)
from .normalform import (
    NormalFormForcing,
    NormalFormModel,
    PolarModel,
    PolarTerm,
    ReducedVectorField,
    check_outer_resonance,
    evolve_normal_form,
    fit_normal_form,
    fit_reduced_field,
    select_resonant_monomials,
    to_polar,
)
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "BackboneCurve", "EmbeddedDataset", "EmbeddingConfig", "ForcingConfig",
    "ForcingSignal", "FrcBranch", "FrcPoint", "ManifoldModel", "MechSystem",
    "NonlinearTerm", "NormalFormForcing", "NormalFormModel", "PipelineConfig",
    "PolarModel", "PolarTerm", "ReducedVectorField", "Spectrum",
    "SweepOracleResult", "Trajectory", "amplitude_map", "backbone",
    "build_oscillator_chain", "calibrate_forcing", "chain_nonlinear_terms",
    "check_embedding_dimension", "check_outer_resonance",
    "count_dominant_frequencies", "delay_embed", "evolve_normal_form",
    "fit_manifold", "fit_normal_form", "fit_reduced_field",
    "forced_sweep_oracle", "frc_closed_form_2d", "frc_continuation",
    "integrate", "lift", "linearize", "make_amplitude_map", "nmte",
    "predict_trajectory", "project", "run_pipeline", "select_resonant_monomials",
    "slow_eigenspace_ic", "to_polar", "trim_transient",
]
