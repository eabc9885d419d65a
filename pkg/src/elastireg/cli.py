"""Command-line entry points.

Commands: register, register-landmarks, match-part, morph, estimate-rho,
register-2nd, demo-1d, verify, decompose-shears.  Every command validates its
configuration fully before writing anything, emits machine-readable artifacts
(CSV/JSON) plus rendered PNG figures into the output directory, and exits 0
on success, 2 when an iteration cap stopped a minimization early, and 1 on
any input or runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import report
from .energy import (EnergyError, EnergySpec, HFunction, SecondOrderSpec,
                     StoredEnergySpec, verify_suite)
from .geometry import (Domain2, GeometryError, deformation_to_csv,
                       shear_decompose)
from .imagery import GridImage, ImageError, Signal1D, read_pgm
from .solve import (AffineSearchSet, LandmarkSet, OptimizerParams, SolveError,
                    demo_1d, estimate_rho, match_part, morph_sequence,
                    register, register_landmarks, register_second_order,
                    two_slope_oracle)

log = logging.getLogger("elastireg")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ITERATION_CAP = 2


class ConfigError(ValueError):
    pass


def _check_keys(obj: dict, allowed: set, where: str):
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    return obj


def _energy_spec(cfg: dict) -> EnergySpec:
    block = cfg.get("energy")
    if block is None:
        return EnergySpec.default()
    _check_keys(block, {"stored", "fidelity", "n"}, "energy")
    try:
        return EnergySpec.from_json(block)
    except (KeyError, EnergyError) as exc:
        raise ConfigError(f"bad energy block: {exc}") from exc


def _optimizer(cfg: dict, seed: int | None) -> OptimizerParams:
    block = dict(cfg.get("optimizer", {}))
    allowed = set(OptimizerParams.__dataclass_fields__)
    _check_keys(block, allowed, "optimizer")
    if seed is not None:
        block["seed"] = seed
    try:
        return OptimizerParams(**block)
    except (TypeError, SolveError) as exc:
        raise ConfigError(f"bad optimizer block: {exc}") from exc


def _domain(obj, where: str) -> Domain2:
    if not isinstance(obj, dict) or "vertices" not in obj:
        raise ConfigError(f"{where} must be an object with a 'vertices' list")
    try:
        return Domain2.from_json(obj)
    except GeometryError as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def _image(cfg: dict, key: str) -> GridImage:
    block = cfg.get(key)
    if block is None:
        raise ConfigError(f"missing required image block {key!r}")
    _check_keys(block, {"path", "constant", "domain", "interpolation"}, key)
    interp = block.get("interpolation", "bilinear")
    if "path" in block:
        path = Path(block["path"])
        if not path.exists():
            raise ConfigError(f"{key}.path does not exist: {path}")
        try:
            if path.suffix.lower() == ".pgm":
                img = read_pgm(path)
            else:
                img = GridImage.from_csv(path.read_text(), interpolation=interp)
        except (ImageError, ValueError) as exc:
            raise ConfigError(f"cannot read {key}.path: {exc}") from exc
        if "domain" in block:
            dom = _domain(block["domain"], f"{key}.domain")
            img = GridImage(dom, img.samples, interp)
        elif path.suffix.lower() == ".pgm":
            img = GridImage(img.domain, img.samples, interp)
        return img
    if "constant" in block:
        dom = _domain(block.get("domain"), f"{key}.domain")
        return GridImage.constant(float(block["constant"]), dom)
    raise ConfigError(f"{key} needs either 'path' or 'constant'")


def _write_register_artifacts(out: Path, res, name: str = "registration"):
    (out / "deformation.csv").write_text(deformation_to_csv(res.deformation))
    report.write_json(out / "breakdown.json", res.breakdown.to_json())
    lines = ["iteration,energy"]
    lines += [f"{i},{e!r}" for i, e in enumerate(res.trajectory)]
    (out / "log.csv").write_text("\n".join(lines) + "\n")
    report.save_deformation_figure(out / "deformation.png", res.deformation, name)
    report.save_convergence_figure(out / "convergence.png", res.trajectory)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_register(args, cfg: dict, out: Path) -> int:
    _check_keys(cfg, {"energy", "optimizer", "image1", "image2",
                      "source", "target"}, "config")
    spec = _energy_spec(cfg)
    params = _optimizer(cfg, args.seed)
    P1 = _image(cfg, "image1")
    P2 = _image(cfg, "image2")
    source = _domain(cfg["source"], "source") if "source" in cfg else None
    target = _domain(cfg["target"], "target") if "target" in cfg else None
    res = register(spec, P1, P2, params, source=source, target=target)
    _write_register_artifacts(out, res)
    return EXIT_OK if res.converged else EXIT_ITERATION_CAP


def cmd_register_landmarks(args, cfg: dict, out: Path) -> int:
    _check_keys(cfg, {"energy", "optimizer", "image1", "image2",
                      "source", "target", "landmarks"}, "config")
    block = cfg.get("landmarks")
    if not block:
        raise ConfigError("missing required block 'landmarks'")
    _check_keys(block, {"p", "q", "boundary"}, "landmarks")
    try:
        lm = LandmarkSet(np.asarray(block["p"], dtype=float),
                         np.asarray(block["q"], dtype=float),
                         np.asarray(block.get(
                             "boundary", [False] * len(block["p"]))))
    except (KeyError, SolveError, ValueError) as exc:
        raise ConfigError(f"bad landmarks block: {exc}") from exc
    spec = _energy_spec(cfg)
    params = _optimizer(cfg, args.seed)
    P1 = _image(cfg, "image1")
    P2 = _image(cfg, "image2")
    source = _domain(cfg["source"], "source") if "source" in cfg else None
    target = _domain(cfg["target"], "target") if "target" in cfg else None
    res = register_landmarks(spec, P1, P2, lm, params,
                             source=source, target=target)
    _write_register_artifacts(out, res, "landmark registration")
    return EXIT_OK if res.converged else EXIT_ITERATION_CAP


def cmd_match_part(args, cfg: dict, out: Path) -> int:
    _check_keys(cfg, {"energy", "optimizer", "image1", "image2",
                      "source", "search"}, "config")
    sblock = dict(cfg.get("search", {"variant": "scaling"}))
    _check_keys(sblock, {"variant", "lam_min", "lam_max", "entry_box",
                         "det_min", "grid"}, "search")
    grid = int(sblock.pop("grid", 9))
    try:
        S = AffineSearchSet(**sblock)
    except (TypeError, SolveError) as exc:
        raise ConfigError(f"bad search block: {exc}") from exc
    spec = _energy_spec(cfg)
    params = _optimizer(cfg, args.seed)
    P1 = _image(cfg, "image1")
    P2 = _image(cfg, "image2")
    source = _domain(cfg["source"], "source") if "source" in cfg else None
    A, defo, bd = match_part(spec, P1, P2, S, params, source=source, grid=grid)
    report.write_json(out / "affine.json",
                      {"A": A.A.tolist(), "a": A.a.tolist(), "det": A.det})
    (out / "deformation.csv").write_text(deformation_to_csv(defo))
    report.write_json(out / "breakdown.json", bd.to_json())
    report.save_deformation_figure(out / "deformation.png", defo, "matched part")
    return EXIT_OK


def cmd_morph(args, cfg: dict, out: Path) -> int:
    _check_keys(cfg, {"energy", "optimizer", "image1", "image2",
                      "N", "rescale", "rounds"}, "config")
    N = int(cfg.get("N", args.N or 4))
    spec = _energy_spec(cfg)
    params = _optimizer(cfg, args.seed)
    c = _image(cfg, "image1")
    d = _image(cfg, "image2")
    seq = morph_sequence(spec, c, d, N, params, P=cfg.get("rescale", "id"),
                         rounds=int(cfg.get("rounds", 3)))
    report.write_json(out / "sequence.json", {
        "N": seq.N,
        "step_energies": seq.step_energies,
        "F_N_upper_bound": seq.F_N,
        "note": "F_N is an upper bound: inner minimizations are local",
    })
    for i, frame in enumerate(seq.frames):
        (out / f"frame_{i:03d}.csv").write_text(frame.to_csv())
    report.save_morph_figures(out, seq.frames)
    return EXIT_OK


def cmd_estimate_rho(args, cfg: dict, out: Path) -> int:
    _check_keys(cfg, {"energy", "optimizer", "image1", "image2",
                      "N_max", "rescale", "rounds"}, "config")
    N_max = int(cfg.get("N_max", 8))
    spec = _energy_spec(cfg)
    params = _optimizer(cfg, args.seed)
    c = _image(cfg, "image1")
    d = _image(cfg, "image2")
    values, _ = estimate_rho(spec, c, d, N_max, params,
                             P=cfg.get("rescale", "id"),
                             rounds=int(cfg.get("rounds", 3)))
    lines = ["N,F_N_upper_bound"]
    lines += [f"{n + 1},{v!r}" for n, v in enumerate(values)]
    (out / "rho.csv").write_text("\n".join(lines) + "\n")
    report.write_json(out / "rho.json", {
        "F_N_upper_bounds": values,
        "rho_upper_bound": values[-1],
        "note": "all values are upper bounds: inner minimizations are local",
    })
    report.save_convergence_figure(out / "rho.png", values, "F_N upper bounds")
    return EXIT_OK


def cmd_register_2nd(args, cfg: dict, out: Path) -> int:
    _check_keys(cfg, {"second_order", "optimizer", "image1", "image2",
                      "source", "target", "grid"}, "config")
    sblock = cfg.get("second_order", {})
    _check_keys(sblock, {"h", "m", "n"}, "second_order")
    try:
        sos = SecondOrderSpec.from_json(sblock)
    except (EnergyError, KeyError) as exc:
        raise ConfigError(f"bad second_order block: {exc}") from exc
    params = _optimizer(cfg, args.seed)
    P1 = _image(cfg, "image1")
    P2 = _image(cfg, "image2")
    source = _domain(cfg["source"], "source") if "source" in cfg else None
    target = _domain(cfg["target"], "target") if "target" in cfg else None
    shape = tuple(cfg.get("grid", (24, 24)))
    gd, bd, info = register_second_order(sos, P1, P2, params, source=source,
                                         target=target, grid_shape=shape)
    (out / "deformation.csv").write_text(
        deformation_to_csv(gd.to_mesh_deformation()))
    report.write_json(out / "breakdown.json", bd.to_json())
    report.save_grid_deformation_figure(out / "deformation.png", gd)
    report.save_convergence_figure(out / "convergence.png", info["trajectory"])
    return EXIT_OK if info["converged"] else EXIT_ITERATION_CAP


def cmd_demo_1d(args, cfg: dict, out: Path) -> int:
    _check_keys(cfg, {"eps", "J"}, "config")
    eps = float(args.eps if args.eps is not None else cfg.get("eps", 1e-3))
    J = int(args.J if args.J is not None else cfg.get("J", 512))
    y, energy, info = demo_1d(eps=eps, J=J)
    _, oracle_energy, oracle_slopes = two_slope_oracle(eps=eps, J=J)
    s1, s2, kink, n_changes = info["slopes"]
    # closed-form candidate: slopes 3/2 then 1/2 with the kink at 1/2
    psi = lambda p: p + 1.0 / p - 2.0
    candidate = 0.5 * eps * (psi(1.5) + psi(0.5))
    summary = {
        "eps": eps,
        "J": J,
        "energy": energy,
        "detected_slopes": [s1, s2],
        "kink": kink,
        "slope_changes": n_changes,
        "two_slope_candidate_energy": candidate,
        "identity_energy": 0.5,
        "oracle_energy": oracle_energy,
        "oracle_slopes": list(oracle_slopes),
    }
    report.write_json(out / "summary.json", summary)
    lines = ["x,y"] + [f"{x!r},{v!r}" for x, v in zip(y.grid, y.values)]
    (out / "map.csv").write_text("\n".join(lines) + "\n")
    c1 = Signal1D.indicator(0.0, 0.5, J)
    c2 = Signal1D.indicator(0.0, 0.75, J)
    report.save_map1d_figure(out / "map.png", y, c1, c2)
    print(f"detected slopes {s1:.4f}, {s2:.4f} (kink at {kink:.4f}); "
          f"energy {energy:.6g} vs two-slope candidate {candidate:.6g}")
    return EXIT_OK


_VERIFY_THRESHOLDS = {
    "isotropy": 1e-9, "interchange": 1e-9, "fidelity_reflection": 1e-9,
    "psi_reflection": 1e-9, "zero_set_on": 1e-12,
}


def cmd_verify(args, cfg: dict, out: Path) -> int:
    _check_keys(cfg, {"energy", "trials"}, "config")
    spec = _energy_spec(cfg) if "energy" in cfg else EnergySpec.default_mass()
    rep = verify_suite(spec, trials=int(cfg.get("trials", 1000)),
                       seed=args.seed or 0)
    report.write_json(out / "verify.json", rep)
    if not rep["passed"]:
        failed = [k for k, thr in _VERIFY_THRESHOLDS.items() if rep[k] > thr]
        if rep["zero_set_off_min"] < 1e-6:
            failed.append("zero_set_off_min")
        hc = rep["h_conditions"]
        if not hc["convex"]:
            failed.append("h_convexity")
        if hc["reflection"] > 1e-10:
            failed.append("h_reflection")
        if hc.get("h_prime_1_error", 0.0) > 1e-6:
            failed.append("h_derivative_at_1")
        print("verification FAILED:", ", ".join(failed), file=sys.stderr)
        return EXIT_ERROR
    print("all identity checks passed")
    return EXIT_OK


def cmd_decompose_shears(args, cfg: dict, out: Path) -> int:
    _check_keys(cfg, {"matrix"}, "config")
    raw = args.matrix if args.matrix is not None else cfg.get("matrix")
    if raw is None:
        raise ConfigError("missing matrix (use --matrix or config key 'matrix')")
    if isinstance(raw, str):
        entries = [float(v) for v in raw.replace(",", " ").split()]
    else:
        entries = [float(v) for v in np.asarray(raw, dtype=float).ravel()]
    n = int(round(len(entries) ** 0.5))
    if n * n != len(entries) or n < 2:
        raise ConfigError(f"matrix needs n*n entries with n >= 2, got {len(entries)}")
    M = np.array(entries).reshape(n, n)
    try:
        factors = shear_decompose(M)
    except GeometryError as exc:
        raise ConfigError(f"cannot decompose matrix: {exc}") from exc
    rec = np.eye(n)
    for fct in factors:
        rec = fct.matrix() @ rec
    err = float(np.abs(rec - M).max())
    report.write_json(out / "factors.json", {
        "matrix": M.tolist(),
        "factors": [{"p": f.p.tolist(), "nu": f.nu.tolist()} for f in factors],
        "reconstruction_error": err,
    })
    print(f"{len(factors)} shear factor(s); reconstruction error {err:.3g}")
    return EXIT_OK if err <= 1e-8 else EXIT_ERROR


_COMMANDS = {
    "register": cmd_register,
    "register-landmarks": cmd_register_landmarks,
    "match-part": cmd_match_part,
    "morph": cmd_morph,
    "estimate-rho": cmd_estimate_rho,
    "register-2nd": cmd_register_2nd,
    "demo-1d": cmd_demo_1d,
    "verify": cmd_verify,
    "decompose-shears": cmd_decompose_shears,
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="elastireg",
        description="Nonlinear-elasticity image comparison toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None, help="random seed")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="thread budget for array backends")
        if name == "demo-1d":
            p.add_argument("--eps", type=float, default=None)
            p.add_argument("--J", type=int, default=None)
        if name == "decompose-shears":
            p.add_argument("--matrix", default=None,
                           help="row-major entries, e.g. \"2 0 0 0.5\"")
        if name == "morph":
            p.add_argument("--N", type=int, default=None,
                           help="number of morphing steps")
    return ap


def main(argv=None) -> int:
    level = os.environ.get("ELASTIREG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    if args.threads is not None:
        if args.threads <= 0:
            print("error: --threads must be positive", file=sys.stderr)
            return EXIT_ERROR
        os.environ["OMP_NUM_THREADS"] = str(args.threads)
    try:
        cfg = _load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        code = _COMMANDS[args.command](args, cfg, out)
    except (ConfigError, SolveError, EnergyError, GeometryError,
            ImageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return code


if __name__ == "__main__":
    sys.exit(main())
