"""Command-line interface: composable pipeline stages over file artifacts.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 validation-threshold failure.
"""

import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .errors import ConfigError, SsmError, ValidationThresholdError
from .manifold import ManifoldModel
from .normalform import NormalFormModel, to_polar

_STAGES = {
    "simulate": pl.stage_simulate,
    "embed": pl.stage_embed,
    "fit-manifold": pl.stage_fit_manifold,
    "fit-dynamics": pl.stage_fit_dynamics,
    "backbone": pl.stage_backbone,
    "frc": pl.stage_frc,
    "predict": pl.stage_predict,
}


def _resolve_config(path):
    """Direct path, or the name of a bundled configuration."""
    p = Path(path)
    if p.exists():
        return p
    candidate = resources.files("ssmkit") / "configs" / path
    if candidate.is_file():
        return candidate
    raise ConfigError(f"config file not found: {path}")


def _load(path, seed_override):
    cfg = pl.PipelineConfig.from_file(_resolve_config(path))
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def inspect_model(path):
    """Human-readable dump of a stored model file."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from exc
    lines = []
    if "modal_change_re" in data:
        nf = NormalFormModel.from_json(data)
        pm = to_polar(nf)
        lines.append("normal-form model")
        lines.append(f"  order: {nf.order}")
        for j, lam in enumerate(nf.eigenvalues, start=1):
            lines.append(f"  lambda_{j} = {lam.real:+.6g} {lam.imag:+.6g}i")
        lines.append("polar normal form:")
        for row in pm.describe().splitlines():
            lines.append("  " + row)
        lines.append(_validity_note(pm))
    elif "tangent" in data:
        mani = ManifoldModel.from_json(data)
        lines.append("manifold model")
        lines.append(f"  observable dimension p = {mani.observable_dim}")
        lines.append(f"  manifold dimension 2m = {mani.reduced_dim}")
        lines.append(f"  graph order M = {mani.order}")
        lines.append(f"  graph monomials: {len(mani.graph_exponents)}")
        norm = float(np.linalg.norm(mani.graph_coeffs)) \
            if mani.graph_coeffs.size else 0.0
        lines.append(f"  graph coefficient norm: {norm:.6g}")
    else:
        raise ConfigError(
            f"{path}: unrecognized model schema "
            "(expected a manifold or normal-form file)")
    return "\n".join(lines)


def _validity_note(pm, rho_scan=10.0, n=2000):
    grid = np.linspace(0.0, rho_scan, n)
    for j in range(1, pm.mode_count + 1):
        rho_vec = np.zeros(pm.mode_count)
        for r in grid[1:]:
            rho_vec[j - 1] = r
            try:
                if pm.omega(j, rho_vec) <= 0:
                    return (f"validity: omega_{j} crosses zero near "
                            f"rho = {r:.4g}")
            except SsmError:
                break
        rho_vec[j - 1] = 0.0
    return f"validity: omega_j > 0 for rho up to {rho_scan:g} (scanned)"


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ssmkit",
        description="Data-driven spectral-submanifold reduced-order models")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(_STAGES) + ["pipeline"]:
        p = sub.add_parser(name, help=f"run the {name} stage"
                           if name != "pipeline" else "run all stages")
        p.add_argument("--config", required=True,
                       help="pipeline config JSON (path or bundled name)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--verbose", action="store_true")
    p = sub.add_parser("inspect", help="print a stored model")
    p.add_argument("model", help="model JSON file")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "inspect":
            print(inspect_model(args.model))
            return 0
        cfg = _load(args.config, args.seed)
        outdir = Path(args.out)
        if args.command == "pipeline":
            report = pl.run_pipeline(cfg, outdir)
            if args.verbose:
                print(json.dumps(report, indent=1, sort_keys=True))
            else:
                tests = report["stages"]["predict"]["nmte_test"]
                for idx, val in sorted(tests.items()):
                    print(f"test trajectory {idx}: NMTE = {100 * val:.3f}%")
            return 0
        outdir.mkdir(parents=True, exist_ok=True)
        result = _STAGES[args.command](cfg, outdir)
        if args.verbose:
            print(json.dumps(result, indent=1, sort_keys=True))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValidationThresholdError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return 4
    except SsmError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
