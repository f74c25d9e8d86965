"""File-based pipeline: simulate -> embed -> fit -> analyze -> predict.

Every stage reads and writes artifacts in one output directory, so running
stages individually is byte-identical to running the full pipeline. All
outputs are deterministic given the configuration and seed.
"""

import hashlib
import json
import warnings
from pathlib import Path

import numpy as np

from . import embedding as emb
from . import mechsys as ms
from .analysis import backbone, make_amplitude_map, nmte, predict_trajectory
from .errors import ConfigError, SsmError, ValidationThresholdError
from .forcing import ForcingConfig, frc_closed_form_2d, frc_continuation
from .manifold import ManifoldModel, fit_manifold
from .normalform import (
    NormalFormModel,
    check_outer_resonance,
    fit_normal_form,
    fit_reduced_field,
    select_resonant_monomials,
    to_polar,
)

SCHEMA_VERSION = 1

_TOP_KEYS = {
    "schema_version", "seed", "system", "simulate", "embedding", "ssm_dim",
    "manifold_order", "dynamics_order", "resonance_tol", "train_indices",
    "test_indices", "backbone", "forcing", "validation",
}
_SYSTEM_KEYS = {"kind", "n_masses", "first_mass", "other_mass", "mass_prop",
                "stiff_prop", "nonlinear", "path"}
_SIMULATE_KEYS = {"t_final", "dt_out", "rtol", "atol", "initial_conditions"}
_IC_KEYS = {"modes", "amplitudes", "perturbation"}
_EMBED_KEYS = {"kind", "channels", "delay_dimension", "delay_step",
               "trim_time", "equilibrium"}
_BACKBONE_KEYS = {"modes", "rho_max", "observable", "n_points"}
_FORCING_KEYS = {"sweeps"}
_SWEEP_KEYS = {"mode", "f", "omega_range", "rho_max"}
_VALIDATION_KEYS = {"max_nmte"}


def _check_keys(section, allowed, context):
    if not isinstance(section, dict):
        raise ConfigError(f"{context}: expected an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(
            f"{context}: unknown field(s) {sorted(unknown)}; "
            f"allowed: {sorted(allowed)}")


class PipelineConfig:
    """Validated pipeline configuration (strict schema, version 1)."""

    def __init__(self, data):
        _check_keys(data, _TOP_KEYS, "config")
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {data.get('schema_version')!r}; "
                f"this tool reads version {SCHEMA_VERSION}")
        self.raw = data
        self.seed = int(data.get("seed", 0))
        self.system = data["system"]
        _check_keys(self.system, _SYSTEM_KEYS, "config.system")
        self.simulate = data["simulate"]
        _check_keys(self.simulate, _SIMULATE_KEYS, "config.simulate")
        for i, ic in enumerate(self.simulate["initial_conditions"]):
            _check_keys(ic, _IC_KEYS, f"config.simulate.initial_conditions[{i}]")
        self.embedding = data["embedding"]
        _check_keys(self.embedding, _EMBED_KEYS, "config.embedding")
        self.ssm_dim = int(data["ssm_dim"])
        if self.ssm_dim < 2 or self.ssm_dim % 2:
            raise ConfigError("ssm_dim must be a positive even integer")
        self.manifold_order = int(data["manifold_order"])
        self.dynamics_order = int(data["dynamics_order"])
        if self.manifold_order < 1 or self.dynamics_order < 1:
            raise ConfigError("polynomial orders must be >= 1")
        self.resonance_tol = float(data.get("resonance_tol", 0.05))
        self.train_indices = list(data["train_indices"])
        self.test_indices = list(data["test_indices"])
        n_traj = len(self.simulate["initial_conditions"])
        both = set(self.train_indices) & set(self.test_indices)
        if both:
            raise ConfigError(
                f"train and test indices overlap: {sorted(both)}")
        for idx in self.train_indices + self.test_indices:
            if not 0 <= idx < n_traj:
                raise ConfigError(f"trajectory index {idx} out of range "
                                  f"(0..{n_traj - 1})")
        if not self.train_indices:
            raise ConfigError("train_indices must not be empty")
        self.backbone = data.get("backbone")
        if self.backbone is not None:
            _check_keys(self.backbone, _BACKBONE_KEYS, "config.backbone")
        self.forcing = data.get("forcing")
        if self.forcing is not None:
            _check_keys(self.forcing, _FORCING_KEYS, "config.forcing")
            for i, sweep in enumerate(self.forcing.get("sweeps", [])):
                _check_keys(sweep, _SWEEP_KEYS, f"config.forcing.sweeps[{i}]")
        self.validation = data.get("validation")
        if self.validation is not None:
            _check_keys(self.validation, _VALIDATION_KEYS, "config.validation")

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls(data)

    def n_trajectories(self):
        return len(self.simulate["initial_conditions"])


def _write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _build_system(cfg):
    sysdef = cfg.system
    kind = sysdef.get("kind", "oscillator_chain")
    if kind == "file":
        return ms.MechSystem.load(sysdef["path"])
    if kind != "oscillator_chain":
        raise ConfigError(f"unknown system kind {kind!r}")
    nl = sysdef.get("nonlinear", "benchmark")
    n = int(sysdef["n_masses"])
    if nl == "benchmark":
        terms = ms.chain_nonlinear_terms(n)
    elif nl in (None, "none"):
        terms = ()
    elif isinstance(nl, list):
        terms = tuple(ms.NonlinearTerm(
            dof=t["dof"], q_exponents=tuple(t["q_exponents"]),
            qdot_exponents=tuple(t["qdot_exponents"]),
            coefficient=t["coefficient"]) for t in nl)
    else:
        raise ConfigError(f"unknown nonlinear term list {nl!r}")
    return ms.build_oscillator_chain(
        n, sysdef["first_mass"], sysdef["other_mass"],
        sysdef["mass_prop"], sysdef["stiff_prop"], terms)


def _traj_path(outdir, index):
    return Path(outdir) / f"traj_{index:03d}.csv"


def _embedded_path(outdir, index):
    return Path(outdir) / f"embedded_{index:03d}.csv"


def stage_simulate(cfg, outdir):
    """Generate and store ground-truth decay trajectories."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    sys_model = _build_system(cfg)
    sys_model.save(outdir / "system.json")
    _, spectrum = ms.linearize(sys_model)
    rng = np.random.default_rng(cfg.seed)
    sim = cfg.simulate
    rtol = float(sim.get("rtol", 1e-9))
    atol = float(sim.get("atol", 1e-12))
    names = []
    for i, ic in enumerate(sim["initial_conditions"]):
        amps = [complex(a[0], a[1]) for a in ic["amplitudes"]]
        x0 = ms.slow_eigenspace_ic(spectrum, ic["modes"], amps)
        pert = float(ic.get("perturbation", 0.0))
        if pert > 0.0:
            noise = rng.standard_normal(len(x0))
            x0 = x0 + pert * np.linalg.norm(x0) * noise / np.linalg.norm(noise)
        traj = ms.integrate(sys_model, x0, (0.0, sim["t_final"]),
                            sim["dt_out"], rtol=rtol, atol=atol)
        path = _traj_path(outdir, i)
        traj.to_csv(path)
        names.append(path.name)
    return {"system": "system.json", "trajectories": names,
            "eigenvalues": [[l.real, l.imag]
                            for l in spectrum.eigenvalues.tolist()]}


def _spectrum_of(cfg, outdir):
    sys_model = ms.MechSystem.load(Path(outdir) / "system.json")
    _, spectrum = ms.linearize(sys_model)
    return sys_model, spectrum


def _embedding_config(cfg, spectrum):
    e = cfg.embedding
    kind = e.get("kind", "state")
    trim = e.get("trim_time")
    if trim is None:
        trim = emb.default_trim_time(spectrum, cfg.ssm_dim // 2)
    if kind == "state":
        return emb.EmbeddingConfig(
            delay_dimension=1, delay_step=1,
            channels=tuple(e.get("channels", ())), trim_time=float(trim))
    if kind == "delay":
        return emb.EmbeddingConfig(
            delay_dimension=int(e["delay_dimension"]),
            delay_step=int(e.get("delay_step", 1)),
            channels=tuple(e["channels"]), trim_time=float(trim))
    raise ConfigError(f"unknown embedding kind {kind!r}")


def stage_embed(cfg, outdir):
    """Trim and embed every stored trajectory."""
    outdir = Path(outdir)
    _, spectrum = _spectrum_of(cfg, outdir)
    ecfg = _embedding_config(cfg, spectrum)
    if ecfg.delay_dimension > 1:
        traj0 = ms.Trajectory.from_csv(_traj_path(outdir, 0))
        freqs = [spectrum.mode_eigenvalue(j).imag
                 for j in range(1, spectrum.n_modes + 1)]
        bad = emb.sampling_time_warning(ecfg.delay_step * traj0.dt, freqs)
        if bad:
            warnings.warn(
                "embedding delay is within 1% of a half-period of linear "
                f"frequencies {bad}; the delay map may be near degenerate")
    embedded = [emb.delay_embed(ms.Trajectory.from_csv(_traj_path(outdir, i)),
                                ecfg)
                for i in range(cfg.n_trajectories())]
    eq_mode = cfg.embedding.get("equilibrium", "origin")
    if eq_mode == "estimate":
        # tails of the training trajectories only, to avoid test leakage
        from .manifold import estimate_equilibrium
        eq = estimate_equilibrium([embedded[i] for i in cfg.train_indices])
    elif eq_mode == "origin":
        eq = np.zeros(embedded[0].n_channels)
    else:
        raise ConfigError(f"unknown equilibrium mode {eq_mode!r}")
    names = []
    for i, tr in enumerate(embedded):
        centered = ms.Trajectory(times=tr.times, states=tr.states - eq,
                                 channel_labels=tr.channel_labels)
        path = _embedded_path(outdir, i)
        centered.to_csv(path)
        names.append(path.name)
    sufficiency = emb.check_embedding_dimension(cfg.ssm_dim // 2,
                                                _embedded_dim(outdir))
    return {"embedded": names, "trim_time": ecfg.trim_time,
            "equilibrium": {"mode": eq_mode, "value": eq.tolist()},
            "embedding_sufficiency": sufficiency}


def _embedded_dim(outdir):
    tr = ms.Trajectory.from_csv(_embedded_path(outdir, 0))
    return tr.n_channels


def _load_embedded(cfg, outdir, indices):
    return [ms.Trajectory.from_csv(_embedded_path(outdir, i))
            for i in indices]


def stage_fit_manifold(cfg, outdir):
    """Fit the manifold geometry on the training trajectories."""
    outdir = Path(outdir)
    trajs = _load_embedded(cfg, outdir, cfg.train_indices)
    data = emb.EmbeddedDataset(trajectories=tuple(trajs))
    sufficiency = emb.check_embedding_dimension(cfg.ssm_dim // 2,
                                                data.dimension)
    model = fit_manifold(data, cfg.ssm_dim, cfg.manifold_order)
    model.metadata["embedding_sufficiency"] = sufficiency
    model.metadata["equilibrium"] = cfg.embedding.get("equilibrium", "origin")
    model.save(outdir / "manifold.json")
    return {"manifold": "manifold.json",
            "graph_residual_ratio": model.graph_residual_ratio(
                data.pooled_states()),
            "embedding_sufficiency": sufficiency}


def stage_fit_dynamics(cfg, outdir):
    """Fit the reduced vector field and its extended normal form."""
    outdir = Path(outdir)
    mani = ManifoldModel.load(outdir / "manifold.json")
    trajs = _load_embedded(cfg, outdir, cfg.train_indices)
    reduced = [ms.Trajectory(times=t.times, states=mani.project(t.states))
               for t in trajs]
    rvf = fit_reduced_field(reduced, cfg.dynamics_order)
    lam = np.linalg.eigvals(rvf.linear)
    lam = np.sort_complex(lam[lam.imag > 0])
    res_set = select_resonant_monomials(lam, cfg.dynamics_order,
                                        cfg.resonance_tol)
    nf = fit_normal_form(rvf, reduced, cfg.dynamics_order, res_set)
    nf.save(outdir / "normalform.json")

    _, spectrum = _spectrum_of(cfg, outdir)
    report = check_outer_resonance(spectrum,
                                   list(range(1, cfg.ssm_dim // 2 + 1)))
    return {
        "normalform": "normalform.json",
        "eigenvalues": [[l.real, l.imag] for l in nf.eigenvalues.tolist()],
        "resonance_set": [[list(e) for e in s] for s in nf.resonance_set],
        "conjugacy_cost": nf.metadata["conjugacy_cost"],
        "outer_resonance": {
            "spectral_quotient": report.spectral_quotient,
            "near_violations": [
                {"mode": m_, "k": list(k), "residual": r}
                for m_, k, r in report.near_violations],
        },
    }


def _default_rho_max(cfg, outdir, nf, mani):
    trajs = _load_embedded(cfg, outdir, cfg.train_indices)
    rho_max = 0.0
    for tr in trajs:
        z = nf.reduced_to_normal(mani.project(tr.states))
        rho_max = max(rho_max, np.abs(z[:, 0::2]).max())
    return 1.1 * rho_max


def _resolve_observable_index(cfg, outdir):
    choice = None if cfg.backbone is None else cfg.backbone.get("observable")
    tr = ms.Trajectory.from_csv(_embedded_path(outdir, cfg.train_indices[0]))
    if choice is None:
        return 0
    if isinstance(choice, str):
        return tr.channel_labels.index(choice)
    return int(choice)


def stage_backbone(cfg, outdir):
    """Backbone curves (CSV per mode) from the fitted models."""
    outdir = Path(outdir)
    mani = ManifoldModel.load(outdir / "manifold.json")
    nf = NormalFormModel.load(outdir / "normalform.json")
    pm = to_polar(nf)
    bcfg = cfg.backbone or {}
    modes = bcfg.get("modes", list(range(1, nf.mode_count + 1)))
    rho_max = bcfg.get("rho_max") or _default_rho_max(cfg, outdir, nf, mani)
    g_index = _resolve_observable_index(cfg, outdir)
    n_points = int(bcfg.get("n_points", 200))
    names = []
    for mode in modes:
        curve = backbone(pm, mode, rho_max, observable=g_index,
                         mani=mani, nf=nf, n_points=n_points)
        path = outdir / f"backbone_mode{mode}.csv"
        curve.to_csv(path)
        names.append(path.name)
    return {"backbones": names, "rho_max": float(rho_max)}


def stage_frc(cfg, outdir):
    """Forced-response branches (CSV per sweep) from the fitted models."""
    outdir = Path(outdir)
    if cfg.forcing is None:
        return {"frc": []}
    mani = ManifoldModel.load(outdir / "manifold.json")
    nf = NormalFormModel.load(outdir / "normalform.json")
    pm = to_polar(nf)
    g_index = _resolve_observable_index(cfg, outdir)
    names = []
    for sweep in cfg.forcing["sweeps"]:
        mode = int(sweep["mode"])
        f = float(sweep["f"])
        rho_max = sweep.get("rho_max") or _default_rho_max(
            cfg, outdir, nf, mani)
        omega0 = pm.omega(mode, np.zeros(nf.mode_count))
        omega_range = sweep.get("omega_range") or [0.95 * omega0,
                                                   1.08 * omega0]
        amp_fn = make_amplitude_map(mani, nf, g_index, mode=mode)
        if nf.mode_count == 1:
            rho_grid = np.linspace(rho_max / 800.0, rho_max, 800)
            branch = frc_closed_form_2d(pm, f, rho_grid, amplitude_fn=amp_fn)
        else:
            f_modal = np.zeros(nf.mode_count)
            f_modal[mode - 1] = f
            fcfg = ForcingConfig(omega_range=tuple(omega_range),
                                 f_modal=f_modal)
            branch = frc_continuation(pm, fcfg, amplitude_fn=amp_fn,
                                      rho_limit=rho_max)[0]
        path = outdir / f"frc_mode{mode}.csv"
        branch.to_csv(path)
        names.append(path.name)
    return {"frc": names}


def stage_predict(cfg, outdir):
    """Reduced-order predictions for every trajectory plus NMTE values."""
    outdir = Path(outdir)
    mani = ManifoldModel.load(outdir / "manifold.json")
    nf = NormalFormModel.load(outdir / "normalform.json")
    result = {"nmte_train": {}, "nmte_test": {}}
    names = []
    for group, indices in (("nmte_train", cfg.train_indices),
                           ("nmte_test", cfg.test_indices)):
        for i in indices:
            ref = ms.Trajectory.from_csv(_embedded_path(outdir, i))
            pred = predict_trajectory(
                mani, nf, ref.states[0],
                (ref.times[0], ref.times[-1]), ref.dt)
            pred = ms.Trajectory(times=pred.times, states=pred.states,
                                 channel_labels=ref.channel_labels)
            path = Path(outdir) / f"predicted_{i:03d}.csv"
            pred.to_csv(path)
            names.append(path.name)
            result[group][str(i)] = nmte(ref, pred)
    result["predicted"] = names
    train_vals = list(result["nmte_train"].values())
    test_vals = list(result["nmte_test"].values())
    if train_vals and test_vals:
        if max(test_vals) > 2.0 * max(max(train_vals), 1e-12):
            result["overfit_warning"] = True
            warnings.warn(
                "held-out NMTE exceeds twice the training NMTE; the "
                "dynamics order may overfit")
    return result


def _file_hash(path):
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def run_pipeline(cfg, outdir):
    """Run all configured stages and write report.json.

    Returns the report dict. Raises ValidationThresholdError after writing
    the report when a configured NMTE bound is exceeded.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    report = {"schema_version": SCHEMA_VERSION, "seed": cfg.seed,
              "stages": {}, "warnings": []}
    stages = [
        ("simulate", stage_simulate),
        ("embed", stage_embed),
        ("fit-manifold", stage_fit_manifold),
        ("fit-dynamics", stage_fit_dynamics),
        ("backbone", stage_backbone),
        ("frc", stage_frc),
        ("predict", stage_predict),
    ]
    for name, fn in stages:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                report["stages"][name] = fn(cfg, outdir)
            except SsmError as exc:
                report["stages"][name] = {"error": str(exc)}
                report["failed_stage"] = name
                _write_json(outdir / "report.json", report)
                raise
            for w in caught:
                report["warnings"].append(f"{name}: {w.message}")

    artifacts = sorted(p.name for p in outdir.iterdir()
                       if p.suffix in (".csv", ".json")
                       and p.name != "report.json")
    report["artifact_hashes"] = {a: _file_hash(outdir / a) for a in artifacts}
    _write_json(outdir / "report.json", report)

    if cfg.validation and "max_nmte" in cfg.validation:
        limit = float(cfg.validation["max_nmte"])
        worst = max(report["stages"]["predict"]["nmte_test"].values())
        if worst > limit:
            raise ValidationThresholdError(
                f"test NMTE {worst:.4f} exceeds the configured bound "
                f"{limit:.4f}")
    return report
