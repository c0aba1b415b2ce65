"""Command-line front end.

Subcommands: ``phantom``, ``degrade``, ``restore``, ``select`` and
``validate``.  Exit codes: 0 success/converged, 2 usage or configuration
error, 3 stopped at the iteration cap, 4 numerical failure.
"""

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import imageio, synth
from .core import ModelSpec, Priors, is_monotone, read_trace_csv, run, select_model, write_trace_csv
from .errors import ConfigError, ConvergenceError, SingularSystemError, VBRestoreError
from .operators import ConvKernel

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("vbrestore")

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_NUMERIC = 0, 2, 3, 4

MODEL_KEYS = {
    "name": "model", "regime": "regime", "classes": "n_classes", "gamma": "gamma",
    "diff_order": "diff_order", "residual_moment": "residual_moment",
    "em_mstep": "em_mstep", "mean_field": "mean_field",
}
KERNEL_KEYS = {"taps", "kind", "sigma", "size", "basis", "estimate", "noise",
               "per_sample_shape", "fix_scale"}
SOLVER_KEYS = {"max_iterations": "max_iterations", "tolerance": "tolerance",
               "pcg_rtol": "pcg_rtol", "pcg_maxiter": "pcg_maxiter"}
PRIOR_KEYS = set(Priors.__dataclass_fields__)
SECTIONS = {"data": {"path", "sidecar", "truth", "labels"}, "model": set(MODEL_KEYS),
            "kernel": KERNEL_KEYS, "prior": PRIOR_KEYS, "solver": set(SOLVER_KEYS),
            "output": {"dir", "pgm_bits"}, "candidate": None}


def _fail(message, field=None):
    raise ConfigError(message, field=field)


def load_config(path):
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except OSError as exc:
        _fail(f"cannot read config {path}: {exc}", "config")
    except tomllib.TOMLDecodeError as exc:
        _fail(f"malformed config {path}: {exc}", "config")
    for section, body in cfg.items():
        if section not in SECTIONS:
            _fail(f"unknown section '{section}'", section)
        if not isinstance(body, dict):
            _fail(f"'{section}' must be a table", section)
        allowed = SECTIONS[section]
        if allowed is not None:
            for key in body:
                if key not in allowed:
                    _fail(f"unknown key '{section}.{key}'", f"{section}.{key}")
    return cfg


def _resolve(base, value):
    p = Path(value)
    return p if p.is_absolute() else Path(base) / p


def parse_kernel(text):
    """Kernel from ``identity``, ``box:N``, ``gaussian:SIGMA[:SIZE]`` or a
    JSON list of tap rows."""
    text = str(text).strip()
    if text.startswith("["):
        return ConvKernel(json.loads(text))
    kind, _, rest = text.partition(":")
    args = [a for a in rest.split(":") if a]
    try:
        if kind == "identity":
            return ConvKernel.identity()
        if kind == "box":
            return ConvKernel.box(int(args[0]))
        if kind == "gaussian":
            return ConvKernel.gaussian(float(args[0]), int(args[1]) if len(args) > 1 else None)
    except (IndexError, ValueError) as exc:
        raise ConfigError(f"bad kernel description '{text}': {exc}", field="kernel") from exc
    raise ConfigError(f"unknown kernel description '{text}'", field="kernel")


def _kernel_from_table(table, sidecar):
    if "taps" in table:
        try:
            return ConvKernel(table["taps"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"kernel.taps: {exc}", field="kernel.taps") from exc
    if "kind" in table:
        kind = table["kind"]
        if kind == "gaussian":
            return ConvKernel.gaussian(float(table.get("sigma", 1.0)), table.get("size"))
        if kind == "box":
            return ConvKernel.box(int(table.get("size", 3)))
        if kind == "identity":
            return ConvKernel.identity()
        _fail(f"unknown kernel kind '{kind}'", "kernel.kind")
    if sidecar and "kernel" in sidecar:
        return ConvKernel(sidecar["kernel"])
    return ConvKernel.identity()


def _basis_from_table(table):
    basis = table.get("basis")
    if basis is None:
        return None
    from .myopic import KernelBasis
    if basis == "default":
        return tuple(KernelBasis.default().atoms)
    try:
        return tuple(ConvKernel(atom) for atom in basis)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"kernel.basis: {exc}", field="kernel.basis") from exc


def spec_from_tables(model, kernel_table, prior, solver, sidecar):
    kwargs = {}
    for key, value in model.items():
        kwargs[MODEL_KEYS[key]] = value
    for key, value in solver.items():
        kwargs[SOLVER_KEYS[key]] = value
    try:
        kwargs["priors"] = Priors(**prior)
    except TypeError as exc:
        raise ConfigError(str(exc), field="prior") from exc
    kwargs["kernel"] = _kernel_from_table(kernel_table, sidecar)
    kwargs["basis"] = _basis_from_table(kernel_table)
    for key in ("estimate", "noise", "per_sample_shape", "fix_scale"):
        if key in kernel_table:
            kwargs["estimate_kernel" if key == "estimate" else key] = kernel_table[key]
    if "n_classes" not in kwargs and str(kwargs.get("model", "GAUSS")).upper() != "GAUSS":
        kwargs["n_classes"] = 2
    try:
        return ModelSpec(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field="model") from exc


def _load_data(cfg, base):
    data_cfg = cfg.get("data", {})
    if "path" not in data_cfg:
        _fail("missing required key 'data.path'", "data.path")
    path = _resolve(base, data_cfg["path"])
    try:
        data = imageio.read_image(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read data image {path}: {exc}", field="data.path") from exc
    sidecar = None
    side_path = data_cfg.get("sidecar")
    if side_path is not None:
        side_path = _resolve(base, side_path)
    elif path.with_suffix(".json").exists():
        side_path = path.with_suffix(".json")
    if side_path is not None:
        try:
            sidecar = json.loads(Path(side_path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read sidecar {side_path}: {exc}",
                              field="data.sidecar") from exc
        sidecar["_dir"] = str(Path(side_path).parent)
    return data, sidecar


def _truth(cfg, base, sidecar, key):
    data_cfg = cfg.get("data", {})
    if key in data_cfg:
        return imageio.read_image(_resolve(base, data_cfg[key]))
    if sidecar and sidecar.get(key):
        return imageio.read_image(_resolve(sidecar["_dir"], sidecar[key]))
    return None


def _out_dir(args, cfg, base):
    out = args.out or cfg.get("output", {}).get("dir") or "."
    out = _resolve(base, out) if not args.out else Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _image_of(state):
    img = state.image
    return np.asarray(img.value if hasattr(img, "value") else img.mean)


def _write_outputs(out, prefix, spec, data, result, cfg, truth, truth_labels, elapsed):
    restored = _image_of(result.state)
    bits = int(cfg.get("output", {}).get("pgm_bits", 8))
    imageio.write_raw(out / f"{prefix}restored.raw", restored)
    hi = max(float(np.max(data)), 255.0 if bits == 8 else 65535.0)
    imageio.write_pgm(out / f"{prefix}restored.pgm", restored, bits=bits,
                      value_range=None if hi <= 2**bits - 1 else (0.0, hi))
    write_trace_csv(result.trace, out / f"{prefix}trace.csv")
    summary = {
        "model": spec.model, "regime": spec.regime, "classes": spec.n_classes,
        "gamma": spec.gamma, "free_energy": result.free_energy,
        "iterations": result.iterations, "converged": result.converged,
        "wall_time_s": elapsed,
    }
    if spec.is_mixture:
        labels = result.state.labels.hard_labels()
        imageio.write_labels_pgm(out / f"{prefix}labels.pgm", labels, spec.n_classes)
        if truth_labels is not None:
            summary["label_accuracy"] = synth.label_accuracy(truth_labels.astype(int), labels,
                                                             max(spec.n_classes, 2))
    if truth is not None:
        summary["isnr_db"] = synth.isnr_db(truth, data, restored)
    (out / f"{prefix}summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_restore(args):
    cfg = load_config(args.config)
    base = Path(args.config).parent
    data, sidecar = _load_data(cfg, base)
    spec = spec_from_tables(cfg.get("model", {}), cfg.get("kernel", {}), cfg.get("prior", {}),
                            cfg.get("solver", {}), sidecar)
    out = _out_dir(args, cfg, base)
    truth = _truth(cfg, base, sidecar, "truth")
    truth_labels = _truth(cfg, base, sidecar, "labels")
    start = time.perf_counter()
    result = run(spec, data)
    elapsed = time.perf_counter() - start
    summary = _write_outputs(out, "", spec, data, result, cfg, truth, truth_labels, elapsed)
    log.info("free energy %.10g after %d iterations", result.free_energy, result.iterations)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_select(args):
    cfg = load_config(args.config)
    base = Path(args.config).parent
    data, sidecar = _load_data(cfg, base)
    candidates = cfg.get("candidate", {})
    if not candidates:
        _fail("at least one [candidate.NAME] table is required", "candidate")
    specs = []
    for name, table in candidates.items():
        if not isinstance(table, dict):
            _fail(f"candidate.{name} must be a table", f"candidate.{name}")
        model = dict(cfg.get("model", {}))
        kernel = dict(cfg.get("kernel", {}))
        prior = dict(cfg.get("prior", {}))
        for key, value in table.items():
            if key in MODEL_KEYS:
                model[key] = value
            elif key in KERNEL_KEYS:
                kernel[key] = value
            elif key in PRIOR_KEYS:
                prior[key] = value
            else:
                _fail(f"unknown key 'candidate.{name}.{key}'", f"candidate.{name}.{key}")
        specs.append((name, spec_from_tables(model, kernel, prior, cfg.get("solver", {}),
                                             sidecar)))
    gammas = {s.gamma for _, s in specs if s.has_potts}
    if len(gammas) > 1:
        _fail("candidates with Potts priors must share the same gamma "
              "(the dropped partition function depends on it)", "candidate.gamma")
    out = _out_dir(args, cfg, base)
    truth = _truth(cfg, base, sidecar, "truth")
    truth_labels = _truth(cfg, base, sidecar, "labels")
    results, rows, all_converged = [], [], True
    for name, spec in specs:
        start = time.perf_counter()
        result = run(spec, data)
        elapsed = time.perf_counter() - start
        _write_outputs(out, f"{name}_", spec, data, result, cfg, truth, truth_labels, elapsed)
        results.append((spec, result.free_energy))
        rows.append((name, spec, result))
        all_converged &= result.converged
    winner = select_model(results)
    winner_name = next(name for name, spec, _ in rows if spec is winner)
    ranked = sorted(rows, key=lambda r: -r[2].free_energy)
    lines = ["name,model,regime,classes,gamma,free_energy,iterations,converged"]
    for name, spec, res in ranked:
        lines.append(f"{name},{spec.model},{spec.regime},{spec.n_classes},{spec.gamma!r},"
                     f"{res.free_energy!r},{res.iterations},{str(res.converged).lower()}")
    (out / "selection.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"winner: {winner_name}")
    return EXIT_OK if all_converged else EXIT_NOT_CONVERGED


def cmd_phantom(args):
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    levels = tuple(float(v) for v in args.levels.split(","))
    image, labels = synth.phantom((args.size, args.size), levels, seed=args.seed)
    imageio.write_raw(out / "phantom.raw", image)
    imageio.write_pgm(out / "phantom.pgm", image)
    imageio.write_raw(out / "phantom_labels.raw", labels.astype(float))
    imageio.write_labels_pgm(out / "phantom_labels.pgm", labels, len(levels))
    return EXIT_OK


def cmd_degrade(args):
    try:
        image = imageio.read_image(args.input)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read input image {args.input}: {exc}", field="input") from exc
    kernel = parse_kernel(args.kernel)
    blurred = synth.degrade(image, kernel, None)
    if args.noiseless:
        theta_e = math.inf
    elif args.theta_e is not None:
        theta_e = args.theta_e
    elif args.snr_db is not None:
        theta_e = synth.theta_for_snr(blurred, args.snr_db)
    else:
        _fail("one of --theta-e, --snr-db or --noiseless is required", "noise")
    if not theta_e > 0:
        _fail("noise precision must be positive", "theta_e")
    degraded = synth.degrade(image, kernel, theta_e, seed=args.seed)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    imageio.write_raw(out / "degraded.raw", degraded)
    imageio.write_pgm(out / "degraded.pgm", degraded)
    truth_name = "truth.raw"
    imageio.write_raw(out / truth_name, image)
    sidecar = {
        "kernel": kernel.taps.tolist(),
        "theta_e": None if math.isinf(theta_e) else theta_e,
        "noiseless": math.isinf(theta_e),
        "seed": args.seed,
        "truth": truth_name,
    }
    labels_src = Path(args.input).with_name(Path(args.input).stem + "_labels.raw")
    if args.labels:
        labels_src = Path(args.labels)
    if labels_src.exists():
        imageio.write_raw(out / "labels.raw", imageio.read_image(labels_src))
        sidecar["labels"] = "labels.raw"
    if sidecar["theta_e"] is not None:
        resid = degraded - blurred
        sidecar["empirical_noise_variance"] = float(np.mean(resid**2))
    (out / "degraded.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_validate(args):
    try:
        rows = read_trace_csv(args.trace)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read trace {args.trace}: {exc}", field="trace") from exc
    values = [r["free_energy"] for r in rows]
    ok = is_monotone(values, args.slack)
    print(f"{'monotone' if ok else 'NOT monotone'}: {len(values)} rows")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="64-bit seed (default 0)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vbrestore", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common], help="write a piecewise-constant phantom")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--levels", default="50,200", help="comma-separated gray levels")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("degrade", parents=[common], help="blur and add noise")
    p.add_argument("--input", required=True)
    p.add_argument("--kernel", default="box:3",
                   help="identity | box:N | gaussian:SIGMA[:SIZE] | JSON tap rows")
    noise = p.add_mutually_exclusive_group()
    noise.add_argument("--theta-e", type=float)
    noise.add_argument("--snr-db", type=float)
    noise.add_argument("--noiseless", action="store_true")
    p.add_argument("--labels", help="ground-truth label image to copy next to the output")
    p.set_defaults(func=cmd_degrade)

    for name, func, text in (("restore", cmd_restore, "run one model"),
                             ("select", cmd_select, "compare models by free energy")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--config", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("validate", parents=[common], help="check a trace is non-decreasing")
    p.add_argument("--trace", required=True)
    p.add_argument("--slack", type=float, default=1e-8)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f" [{exc.field}]" if exc.field else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SingularSystemError, ConvergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VBRestoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
