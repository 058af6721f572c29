"""Command-line interface: ``cbma analyze | null | simulate | power | convert``.

Settings are layered: built-in defaults, then a preset, then a key=value
config file, then explicit flags. Errors are reported as one JSON line on
standard error with a nonzero exit code.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import BrainMask, ellipsoid_mask, load_foci_csv, save_foci_csv
from .inference import EmpiricalMaxNull, MonteCarloNulls, fingerprint_hash, mc_nulls, null_fingerprint
from .io import atomic_write_bytes, atomic_write_text, nifti_space, read_volume, write_volume
from .kernels import KernelSpec
from .pipeline import InferenceSpec, analyze, resolve_weights
from .power import (
    DESK_B,
    DESK_I_GRID,
    DESK_P_GRID,
    PAPER_B,
    PAPER_I_GRID,
    PAPER_P_GRID,
    emit_report,
    stderr_progress,
    sweep,
)
from .simulation import SimConfig, gen_dataset, truth_record

LGR = logging.getLogger("cbma")

EXIT_ERROR = 1
CACHE_ENV = "CBMA_CACHE_DIR"

DEFAULTS = {
    "kernel": "ale",
    "radius": 10.0,
    "sigma": "sample-size",
    "weight_exponent": 1.0,
    "inference": "fdr",
    "alpha": 0.05,
    "n_iter": 1000,
    "p_cut": 0.001,
    "forming_p": 0.001,
    "voxel_null": "exact",
    "mc_draws": 1_000_000,
    "connectivity": 26,
    "assume_positive": False,
    "format": "nii",
    "mask": "default",
    # simulate / power
    "n_studies": 20,
    "valid_fraction": 0.5,
    "scatter_sd": 4.0,
    "n_participants": 12,
    "i_grid": ",".join(map(str, DESK_I_GRID)),
    "p_grid": ",".join(map(str, DESK_P_GRID)),
    "B": DESK_B,
}

# power sweeps default to the desk-scale mask
COMMAND_DEFAULTS = {
    "power": {"mask": "default-4mm", "sigma": "4"},
}

PRESETS = {
    "paper-mkda": {"kernel": "mkda", "radius": 10.0, "weight_exponent": 1.0, "inference": "fwe",
                   "alpha": 0.05, "n_iter": 10_000},
    "paper-ale": {"kernel": "ale", "sigma": "sample-size", "inference": "fdr", "alpha": 0.05,
                  "voxel_null": "exact"},
    "paper-sdm": {"kernel": "sdm", "sigma": "20", "inference": "fixed", "p_cut": 0.001,
                  "voxel_null": "mc", "mc_draws": 1_000_000},
    "paper-sim": {"kernel": "ale", "sigma": "4", "inference": "fdr", "alpha": 0.05, "voxel_null": "exact",
                  "scatter_sd": 4.0, "mask": "default",
                  "i_grid": ",".join(map(str, PAPER_I_GRID)), "p_grid": ",".join(map(str, PAPER_P_GRID)),
                  "B": PAPER_B},
    "appendix-a-mkda": {"kernel": "mkda", "radius": 10.0, "inference": "fdr", "alpha": 0.05,
                        "voxel_null": "exact"},
    "appendix-a-sdm": {"kernel": "sdm", "sigma": "4", "inference": "fdr", "alpha": 0.05,
                       "voxel_null": "exact"},
}

INT_KEYS = {"n_iter", "mc_draws", "connectivity", "n_studies", "n_participants", "B", "seed", "jobs"}
FLOAT_KEYS = {"radius", "weight_exponent", "alpha", "p_cut", "forming_p", "valid_fraction", "scatter_sd"}
BOOL_KEYS = {"assume_positive"}


class CLIError(Exception):
    pass


# --------------------------------------------------------------------------
# Configuration


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, quotes are optional."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        out[key.replace("-", "_")] = value
    return out


def _coerce(key: str, value):
    if value is None:
        return None
    try:
        if key in INT_KEYS:
            return int(value)
        if key in FLOAT_KEYS:
            return float(value)
        if key in BOOL_KEYS:
            if isinstance(value, bool):
                return value
            return str(value).strip().lower() in ("1", "true", "yes", "on")
    except ValueError as exc:
        raise CLIError(f"bad value for {key}: {value!r}") from exc
    return value


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, preset, config file and flags (later wins)."""
    cfg = dict(DEFAULTS)
    cfg.update(COMMAND_DEFAULTS.get(args.command, {}))
    if getattr(args, "preset", None):
        cfg.update(PRESETS[args.preset])
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "func", "config"):
            cfg[key] = value
    return {k: _coerce(k, v) for k, v in cfg.items()}


def pick_seed(cfg: dict) -> int:
    if cfg.get("seed") is not None:
        return int(cfg["seed"])
    seed = int(np.random.SeedSequence().entropy % (2**63))
    LGR.info("no seed given; using %d", seed)
    return seed


def make_kernel(cfg: dict) -> KernelSpec:
    method = str(cfg["kernel"]).upper()
    if method == "MKDA":
        return KernelSpec.mkda(cfg["radius"])
    sigma = str(cfg["sigma"])
    if method == "ALE":
        return KernelSpec.ale(None if sigma in ("sample-size", "auto", "none") else float(sigma))
    if method == "SDM":
        if sigma in ("sample-size", "auto", "none"):
            raise CLIError("SDM needs an explicit --sigma in mm")
        return KernelSpec.sdm(float(sigma))
    raise CLIError(f"unknown kernel {cfg['kernel']!r}")


def make_inference(cfg: dict) -> InferenceSpec:
    try:
        return InferenceSpec(
            procedure=cfg["inference"],
            alpha=cfg["alpha"],
            n_iter=cfg["n_iter"],
            p_cut=cfg["p_cut"],
            forming_p=cfg["forming_p"],
            voxel_null=cfg["voxel_null"],
            mc_draws=cfg["mc_draws"],
            connectivity=cfg["connectivity"],
        )
    except ValueError as exc:
        raise CLIError(str(exc)) from exc


def load_mask_arg(name) -> BrainMask:
    if name in (None, "default"):
        return ellipsoid_mask(2.0)
    if name == "default-4mm":
        return ellipsoid_mask(4.0)
    return BrainMask(read_volume(name))


def check_mask_atlas(name, dataset) -> None:
    """Warn when a NIfTI mask declares a different standard space than the dataset."""
    if name in (None, "default", "default-4mm") or not str(name).endswith((".nii", ".nii.gz")):
        return
    space = nifti_space(name)
    if "Unspecified" not in (space, dataset.atlas_tag) and space != dataset.atlas_tag:
        LGR.warning("mask is in %s space but the dataset is tagged %s; coordinates are used as given",
                    space, dataset.atlas_tag)


def _grid(text, cast):
    if isinstance(text, (list, tuple)):
        return [cast(v) for v in text]
    return [cast(v) for v in str(text).replace(" ", "").split(",") if v]


def provenance(command: str, cfg: dict, seed, extra: dict | None = None) -> dict:
    import scipy

    config = {k: v for k, v in sorted(cfg.items()) if k != "jobs"}
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "rerun": rerun_line(command, config, seed),
        "versions": {
            "cbma": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        **(extra or {}),
    }


def rerun_line(command: str, config: dict, seed) -> list[str]:
    """argv that reproduces the run (every resolved setting spelled out)."""
    argv = ["cbma", command]
    positional = {"analyze": ["dataset"], "null": ["dataset"], "convert": ["input", "output"]}.get(command, [])
    for key in positional:
        argv.append(str(config[key]))
    skip = set(positional) | {"seed", "preset", "out"}
    for key, value in config.items():
        if key in skip or value is None or key not in KNOWN_FLAGS.get(command, ()):
            continue
        if key in BOOL_KEYS:
            if value:
                argv.append("--" + key.replace("_", "-"))
            continue
        argv += ["--" + key.replace("_", "-"), str(value)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    if config.get("out") is not None:
        argv += ["--out", str(config["out"])]
    return argv


def _write_json(path, payload) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


# --------------------------------------------------------------------------
# Null cache


def cache_dir(cfg: dict) -> Path | None:
    d = cfg.get("cache_dir") or os.environ.get(CACHE_ENV)
    return Path(d) if d else None


def save_null(path, nulls: MonteCarloNulls, fp: dict) -> None:
    """Binary cache: the sample vectors plus the fingerprint they were built for."""
    import io as _io

    meta = {
        "fingerprint": fp,
        "hash": fingerprint_hash(fp),
        "method": nulls.max_stat.method,
        "config_key": nulls.max_stat.config_key,
        "seed": nulls.max_stat.seed,
    }
    arrays = {"meta": np.array(json.dumps(meta, sort_keys=True)), "max_stat": nulls.max_stat.samples}
    if nulls.max_cluster is not None:
        arrays["max_cluster"] = nulls.max_cluster.samples
    buf = _io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_null(path, fp: dict | None = None) -> MonteCarloNulls:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        max_stat = z["max_stat"]
        max_cluster = z["max_cluster"] if "max_cluster" in z.files else None
    if fp is not None and meta.get("hash") != fingerprint_hash(fp):
        raise CLIError(f"cache mismatch: {path} was built for a different configuration")
    common = dict(config_key=meta["config_key"], seed=meta["seed"], method=meta["method"])
    out = MonteCarloNulls(EmpiricalMaxNull(max_stat, "max", **common))
    if max_cluster is not None:
        out.max_cluster = EmpiricalMaxNull(max_cluster, "cluster_size", **common)
    return out


def _null_fingerprint(dataset, kernel, weights, mask, spec: InferenceSpec, seed, assume_positive):
    extra = {"assume_positive": bool(assume_positive)}
    if spec.procedure == "cluster":
        extra.update(forming_p=spec.forming_p, connectivity=spec.connectivity, voxel_null=spec.voxel_null)
    return null_fingerprint(dataset, kernel, weights, mask, spec.n_iter, seed, extra)


def _cached_nulls(cfg, dataset, kernel, mask, spec, seed):
    """Return (nulls or None, cache path or None)."""
    directory = cache_dir(cfg)
    if directory is None or spec.procedure not in ("fwe", "cluster"):
        return None, None
    weights = resolve_weights(dataset, kernel, None, cfg["weight_exponent"])
    fp = _null_fingerprint(dataset, kernel, weights, mask, spec, seed, cfg["assume_positive"])
    path = directory / f"mcnull-{fingerprint_hash(fp)}.npz"
    if path.exists():
        return load_null(path, fp), path
    return None, path


# --------------------------------------------------------------------------
# Commands


def _image_paths(out: Path, stem: str, fmt: str) -> list[Path]:
    exts = {"nii": [".nii"], "nii.gz": [".nii.gz"], "vgrid": [".vgrid"], "both": [".nii", ".vgrid"]}
    if fmt not in exts:
        raise CLIError(f"unknown image format {fmt!r}")
    return [out / f"{stem}{e}" for e in exts[fmt]]


def cmd_analyze(cfg: dict) -> list[Path]:
    out = Path(cfg["out"])
    dataset = load_foci_csv(cfg["dataset"])
    mask = load_mask_arg(cfg["mask"])
    check_mask_atlas(cfg["mask"], dataset)
    kernel = make_kernel(cfg)
    spec = make_inference(cfg)
    seed = pick_seed(cfg)
    weights = resolve_weights(dataset, kernel, None, cfg["weight_exponent"])
    cached, cache_path = _cached_nulls(cfg, dataset, kernel, mask, spec, seed)
    res = analyze(dataset, kernel, mask, spec, seed=seed, weights=weights,
                  assume_positive=cfg["assume_positive"], n_jobs=cfg["jobs"], mc=cached)
    if cache_path is not None and cached is None and res.mc is not None:
        save_null(cache_path, res.mc,
                  _null_fingerprint(dataset, kernel, weights, mask, spec, seed, cfg["assume_positive"]))

    written = []
    images = {
        "stat": (res.stat.grid, "f64"),
        "p_uncorrected": (res.result.p_uncorrected_grid, "f64"),
        "p_corrected": (res.result.p_corrected_grid, "f64"),
        "significant": (res.result.sig_grid.with_data(res.result.sig_grid.data.astype(np.uint8)), "u8"),
    }
    for stem, (grid, dtype) in images.items():
        for path in _image_paths(out, stem, cfg["format"]):
            write_volume(path, grid, dtype)
            written.append(path)

    lines = ["cluster,size,peak_value,peak_x,peak_y,peak_z,p_corrected"]
    for i, c in enumerate(res.result.clusters, start=1):
        d = c.to_dict()
        pc = "" if d["p_corrected"] is None else repr(d["p_corrected"])
        lines.append(f"{i},{d['size']},{d['peak_value']!r},{d['peak_x']!r},{d['peak_y']!r},{d['peak_z']!r},{pc}")
    atomic_write_text(out / "clusters.csv", "\n".join(lines) + "\n")
    written.append(out / "clusters.csv")

    summary = {
        "statistic": res.stat.summary(),
        "procedure": res.result.procedure,
        "n_significant": res.result.n_sig,
        "n_clusters": len(res.result.clusters),
        "n_studies": len(dataset),
        "n_foci": dataset.n_foci,
    }
    _write_json(out / "summary.json", summary)
    written.append(out / "summary.json")
    prov = provenance("analyze", cfg, seed, {
        "dataset_sha256": dataset.sha256(),
        "mask_sha256": mask.sha256,
        "kernel": kernel.to_dict(),
        "inference": spec.to_dict(),
        "weights": None if weights is None else list(weights.values),
        "outputs": sorted(p.name for p in written),
    })
    _write_json(out / "provenance.json", prov)
    return written + [out / "provenance.json"]


def cmd_null(cfg: dict) -> list[Path]:
    out = Path(cfg["out"])
    dataset = load_foci_csv(cfg["dataset"])
    mask = load_mask_arg(cfg["mask"])
    check_mask_atlas(cfg["mask"], dataset)
    kernel = make_kernel(cfg)
    spec = make_inference({**cfg, "inference": cfg["inference"] if cfg["inference"] in ("fwe", "cluster") else "fwe"})
    seed = pick_seed(cfg)
    weights = resolve_weights(dataset, kernel, None, cfg["weight_exponent"])
    fp = _null_fingerprint(dataset, kernel, weights, mask, spec, seed, cfg["assume_positive"])
    forming = None
    if spec.procedure == "cluster":
        from .kernels import study_maps
        from .inference import exact_null, mc_voxel_null

        maps = list(study_maps(dataset, kernel, mask, cfg["assume_positive"]))
        if spec.voxel_null == "exact":
            voxel = exact_null(maps, kernel.method, mask, weights)
        else:
            voxel = mc_voxel_null(maps, kernel.method, mask, spec.mc_draws, seed, weights)
        forming = (voxel, spec.forming_p)
    nulls = mc_nulls(dataset, kernel, mask, spec.n_iter, seed, weights, cfg["assume_positive"],
                     cluster_forming=forming, connectivity=spec.connectivity, n_jobs=cfg["jobs"])
    written = [out / "null.npz"]
    save_null(out / "null.npz", nulls, fp)
    directory = cache_dir(cfg)
    if directory is not None:
        save_null(directory / f"mcnull-{fingerprint_hash(fp)}.npz", nulls, fp)
    _write_json(out / "provenance.json", provenance("null", cfg, seed, {
        "fingerprint": fp, "fingerprint_hash": fingerprint_hash(fp), "outputs": ["null.npz"],
    }))
    return written + [out / "provenance.json"]


def _sim_settings(cfg: dict) -> dict:
    return {"scatter_sd_mm": cfg["scatter_sd"], "n_participants": cfg["n_participants"]}


def cmd_simulate(cfg: dict) -> list[Path]:
    from .inference import stream
    from .power import SIM_STREAM

    out = Path(cfg["out"])
    mask = load_mask_arg(cfg["mask"])
    seed = pick_seed(cfg)
    sim = SimConfig(mask, cfg["n_studies"], cfg["valid_fraction"], seed=seed, **_sim_settings(cfg))
    dataset = gen_dataset(sim, stream(seed, SIM_STREAM))
    save_foci_csv(dataset, out / "foci.csv")
    _write_json(out / "truth.json", truth_record(sim, dataset))
    _write_json(out / "provenance.json", provenance("simulate", cfg, seed, {
        "dataset_sha256": dataset.sha256(), "mask_sha256": mask.sha256,
        "outputs": ["foci.csv", "foci.csv.json", "truth.json"],
    }))
    return [out / "foci.csv", out / "truth.json", out / "provenance.json"]


def cmd_power(cfg: dict) -> list[Path]:
    out = Path(cfg["out"])
    mask = load_mask_arg(cfg["mask"])
    kernel = make_kernel(cfg)
    spec = make_inference(cfg)
    seed = pick_seed(cfg)
    timings = {}
    report = sweep(_grid(cfg["i_grid"], int), _grid(cfg["p_grid"], float), cfg["B"], kernel, spec, mask, seed,
                   sim=_sim_settings(cfg), n_jobs=cfg["jobs"], progress=stderr_progress, timings=timings)
    written = emit_report(report, out, timings)
    _write_json(out / "provenance.json", provenance("power", cfg, seed, {
        "mask_sha256": mask.sha256, "fingerprint": report.fingerprint,
        "outputs": sorted(p.name for p in written),
    }))
    return written + [out / "provenance.json"]


def cmd_convert(cfg: dict) -> list[Path]:
    grid = read_volume(cfg["input"])
    dtype = cfg.get("dtype")
    if dtype is None:
        dtype = "u8" if grid.data.dtype in (np.bool_, np.uint8) else "f64"
    write_volume(cfg["output"], grid, dtype)
    return [Path(cfg["output"])]


COMMANDS = {
    "analyze": cmd_analyze,
    "null": cmd_null,
    "simulate": cmd_simulate,
    "power": cmd_power,
    "convert": cmd_convert,
}


# --------------------------------------------------------------------------
# Parser


def _add_common(p, out_required=True):
    p.add_argument("--config", help="key = value settings file (flags override it)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named parameter set")
    p.add_argument("--seed", type=int, help="master seed (generated and recorded when omitted)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--mask", help="mask volume (.nii/.vgrid), 'default' (2 mm) or 'default-4mm'")


def _add_kernel(p):
    p.add_argument("--kernel", choices=["mkda", "ale", "sdm"])
    p.add_argument("--radius", type=float, help="MKDA sphere radius in mm")
    p.add_argument("--sigma", help="ALE/SDM Gaussian sd in mm, or 'sample-size' for ALE")
    p.add_argument("--weight-exponent", type=float, help="MKDA/SDM weights are n_i ** exponent")
    p.add_argument("--assume-positive", action="store_const", const=True,
                   help="treat foci without t values as positive (SDM)")


def _add_inference(p):
    p.add_argument("--inference", choices=["fdr", "fwe", "fixed", "cluster"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--n-iter", type=int, help="Monte Carlo iterations for FWE nulls")
    p.add_argument("--p-cut", type=float, help="threshold for --inference fixed")
    p.add_argument("--forming-p", type=float, help="cluster-forming threshold")
    p.add_argument("--voxel-null", choices=["exact", "mc"])
    p.add_argument("--mc-draws", type=int)
    p.add_argument("--connectivity", type=int, choices=[6, 18, 26])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cbma", description="Coordinate-based meta-analysis toolkit")
    parser.add_argument("--version", action="version", version=f"cbma {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="statistic image, p-values, thresholded map and cluster table")
    p.add_argument("dataset", help="foci CSV")
    _add_common(p)
    _add_kernel(p)
    _add_inference(p)
    p.add_argument("--format", choices=["nii", "nii.gz", "vgrid", "both"])
    p.add_argument("--cache-dir", help=f"Monte Carlo null cache (default ${CACHE_ENV})")

    p = sub.add_parser("null", help="Monte Carlo null of the maximum (and cluster size)")
    p.add_argument("dataset", help="foci CSV")
    _add_common(p)
    _add_kernel(p)
    _add_inference(p)
    p.add_argument("--cache-dir", help=f"also store the null here (default ${CACHE_ENV})")

    p = sub.add_parser("simulate", help="synthetic dataset plus ground truth")
    _add_common(p)
    p.add_argument("--n-studies", type=int)
    p.add_argument("--valid-fraction", type=float)
    p.add_argument("--scatter-sd", type=float)
    p.add_argument("--n-participants", type=int)

    p = sub.add_parser("power", help="power sweep over an (I, p) grid")
    _add_common(p)
    _add_kernel(p)
    _add_inference(p)
    p.add_argument("--i-grid", help="comma-separated study counts")
    p.add_argument("--p-grid", help="comma-separated valid fractions")
    p.add_argument("--B", type=int, help="replicates per cell")
    p.add_argument("--scatter-sd", type=float)
    p.add_argument("--n-participants", type=int)

    p = sub.add_parser("convert", help="convert between VGRID1 and NIfTI-1")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--dtype", choices=["u8", "f64"])
    return parser


def _known_flags() -> dict:
    parser = build_parser()
    out = {}
    for action in parser._subparsers._group_actions:
        for name, sp in action.choices.items():
            out[name] = {a.dest for a in sp._actions if a.option_strings}
    return out


KNOWN_FLAGS = _known_flags()


def error_record(exc: BaseException, command: str | None) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc).replace("\n", " "), "command": command})


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    verbose = args.verbose
    del args.verbose
    try:
        if args.command == "convert":
            cfg = {"input": args.input, "output": args.output, "dtype": args.dtype}
        else:
            cfg = resolve(args)
        COMMANDS[args.command](cfg)
    except KeyboardInterrupt:
        print(error_record(KeyboardInterrupt("interrupted"), args.command), file=sys.stderr)
        return 130
    except Exception as exc:  # every failure becomes one machine-readable line
        if verbose:
            LGR.exception("command failed")
        print(error_record(exc, args.command), file=sys.stderr)
        return EXIT_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
