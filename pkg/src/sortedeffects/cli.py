"""Command-line front end.

Usage::

    sortedeffects {spe,classify,sets,simulate} --config run.yaml --out results/

The config is one YAML file (JSON manifests written by earlier runs are
accepted too). Defaults::

    grid: {start: 0.01, stop: 0.98, step: 0.01}
    B: 500
    alpha: 0.10
    scheme: exponential
    seed: 0

Every run writes ``manifest.json`` holding the resolved config, so
``--config results/manifest.json`` reproduces the outputs byte for byte.
The worker count is an execution detail and is not recorded: results do not
depend on it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .classification import GroupSpec, LambdaTarget, affected_sets, joint_inference, projection_table
from .data import DesignSpec, Schema, load_csv, parse_term
from .effects import DERIVATIVE, EffectPipeline, EffectSpec
from .errors import ConfigError, SortedEffectsError
from .resampling import SCHEMES, derive_seed
from .simulation import design1, design1_run, design2_run, design3_run, interactive_design
from .sorted_inference import QuantileGrid, bias_correct, bootstrap_bands

log = logging.getLogger(__name__)

DEFAULTS = {
    "grid": {"start": 0.01, "stop": 0.98, "step": 0.01},
    "B": 500,
    "alpha": 0.10,
    "scheme": "exponential",
    "seed": 0,
}
FAMILIES = ("mean", "binary-logit", "binary-probit", "quantile")


# -- config -------------------------------------------------------------------


def read_config(path) -> dict:
    """Parse a config file; a run manifest yields the config it recorded."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if "manifest" in raw and "config" in raw:
        raw = raw["config"]
    return resolve_config(raw, base=path.parent)


def _grid_values(value, what: str) -> list[float]:
    if isinstance(value, dict):
        unknown = set(value) - {"start", "stop", "step"}
        if unknown or len(value) != 3:
            raise ConfigError(f"{what} needs exactly start, stop and step")
        return list(QuantileGrid.regular(float(value["start"]), float(value["stop"]), float(value["step"])).u)
    if isinstance(value, (list, tuple)):
        return list(QuantileGrid(tuple(float(v) for v in value)).u)
    raise ConfigError(f"{what} must be a list or a start/stop/step mapping")


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"{where}.{key} is required")
    return mapping[key]


def resolve_config(raw: dict, base: Path | None = None) -> dict:
    """Check a raw config against every precondition and fill in defaults.

    The result is plain data (lists, dicts, numbers, strings) in a fixed key
    order and is what the manifest records.
    """
    known = {"data", "model", "grid", "B", "alpha", "scheme", "seed", "classify", "sets", "simulate", "plot"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    cfg: dict = {}

    data = raw.get("data")
    if data is not None:
        if not isinstance(data, dict):
            raise ConfigError("data must be a mapping")
        if "synthetic" in data:
            name = data["synthetic"]
            if name not in ("design1", "design3"):
                raise ConfigError(f"data.synthetic must be design1 or design3, got {name!r}")
            cfg["data"] = {"synthetic": name}
        else:
            path = Path(str(_require(data, "path", "data")))
            if base is not None and not path.is_absolute():
                path = base / path
            covs = _require(data, "covariates", "data")
            if not isinstance(covs, list) or not all(isinstance(c, str) for c in covs):
                raise ConfigError("data.covariates must be a list of column names")
            cfg["data"] = {
                "path": str(path.resolve()),
                "outcome": str(_require(data, "outcome", "data")),
                "covariates": list(covs),
                "weight": data.get("weight"),
                "subpopulation": data.get("subpopulation"),
            }

    model = raw.get("model")
    if model is not None:
        if cfg.get("data", {}).get("synthetic"):
            raise ConfigError("synthetic data fixes its own model; drop the model section")
        family = model.get("family", "mean")
        if family not in FAMILIES:
            raise ConfigError(f"model.family must be one of {FAMILIES}")
        terms = _require(model, "terms", "model")
        if not isinstance(terms, list) or not terms:
            raise ConfigError("model.terms must be a nonempty list")
        contrast = model.get("contrast", [0, 1])
        if contrast != DERIVATIVE:
            if not isinstance(contrast, list) or len(contrast) != 2:
                raise ConfigError("model.contrast must be [t0, t1] or 'derivative'")
            contrast = [float(v) for v in contrast]
        rank = model.get("rank_grid")
        cfg["model"] = {
            "family": family,
            "terms": [str(t) for t in terms],
            "treatment": str(_require(model, "treatment", "model")),
            "contrast": contrast,
            "rank_grid": None if rank is None else _grid_values(rank, "model.rank_grid"),
        }

    cfg["grid"] = _grid_values(raw.get("grid", DEFAULTS["grid"]), "grid")
    B = raw.get("B", DEFAULTS["B"])
    if not isinstance(B, int) or B < 2:
        raise ConfigError("B must be an integer >= 2")
    alpha = float(raw.get("alpha", DEFAULTS["alpha"]))
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    scheme = raw.get("scheme", DEFAULTS["scheme"])
    if scheme not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}")
    seed = raw.get("seed", DEFAULTS["seed"])
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    cfg.update(B=B, alpha=alpha, scheme=scheme, seed=seed, plot=bool(raw.get("plot", True)))

    if "classify" in raw:
        c = raw["classify"] or {}
        targets = [_target_dict(t) for t in _require(c, "targets", "classify")]
        cfg["classify"] = {
            "u": float(c.get("u", 0.1)),
            "direction": c.get("direction", "standard"),
            "targets": targets,
            "combos": [[float(a), float(b)] for a, b in c.get("combos", [[-1, 1]])],
            "blocks": {str(k): [str(v) for v in vals] for k, vals in (c.get("blocks") or {}).items()},
        }
        GroupSpec(cfg["classify"]["u"], cfg["classify"]["direction"])
    if "sets" in raw:
        s = raw["sets"] or {}
        tol = s.get("tolerance")
        cfg["sets"] = {
            "u": float(s.get("u", 0.1)),
            "direction": s.get("direction", "standard"),
            "tolerance": None if tol is None else float(tol),
            "projections": [[str(a), str(b)] for a, b in s.get("projections", [])],
        }
        GroupSpec(cfg["sets"]["u"], cfg["sets"]["direction"])
    if "simulate" in raw:
        m = raw["simulate"] or {}
        design = m.get("design", 1)
        if design not in (1, 2, 3):
            raise ConfigError("simulate.design must be 1, 2 or 3")
        cfg["simulate"] = {
            "design": design,
            "n_sims": int(m.get("n_sims", 1000 if design != 3 else 300)),
            "n_boot": int(m.get("n_boot", 500 if design != 3 else 200)),
        }
    return cfg


def _target_dict(t) -> dict:
    if isinstance(t, str):
        return {"kind": "moment", "columns": [t], "t": [1.0], "label": t}
    if not isinstance(t, dict):
        raise ConfigError("each classify target must be a column name or a mapping")
    cols = t.get("columns", t.get("column"))
    cols = [cols] if isinstance(cols, str) else list(cols or [])
    idx = t.get("t", [1] * len(cols))
    idx = [idx] if not isinstance(idx, list) else idx
    target = LambdaTarget(t.get("kind", "moment"), tuple(idx), tuple(cols), t.get("label", ""))
    return {"kind": target.kind, "columns": list(target.columns), "t": list(target.t), "label": target.label}


# -- inputs -------------------------------------------------------------------


def build_inputs(cfg: dict):
    """Sample (or None for the fixed-grid design), pipeline and point effects."""
    data = cfg.get("data")
    if data is None:
        raise ConfigError("data section is required")
    if data.get("synthetic") == "design1":
        eff, pipe = design1().replicate(derive_seed(cfg["seed"], 0, 0))
        return None, pipe, eff
    if data.get("synthetic") == "design3":
        design = interactive_design()
        sample = design.sample(derive_seed(cfg["seed"], 0, 0))
        pipe = EffectPipeline(sample, design.spec)
        return sample, pipe, pipe()
    model = cfg.get("model")
    if model is None:
        raise ConfigError("model section is required for CSV data")
    schema = Schema(data["outcome"], tuple(data["covariates"]), data["weight"], data["subpopulation"])
    sample = load_csv(data["path"], schema)
    if model["treatment"] not in sample.columns:
        raise ConfigError(f"treatment {model['treatment']!r} is not a covariate")
    terms = tuple(parse_term(t, sample.columns) for t in model["terms"])
    rank = model["rank_grid"]
    design = DesignSpec(terms, sample.columns.index(model["treatment"]), tuple(rank) if rank else None)
    contrast = model["contrast"] if model["contrast"] == DERIVATIVE else tuple(model["contrast"])
    spec = EffectSpec(model["family"], design, contrast)
    pipe = EffectPipeline(sample, spec)
    return sample, pipe, pipe()


# -- outputs ------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    manifest = {
        "manifest": 1,
        "command": command,
        "seed": cfg["seed"],
        "versions": {
            "sortedeffects": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "config": cfg,
    }
    if extra:
        manifest["results"] = extra
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def band_svg(u, spe, lower, upper, title: str = "", width: int = 640, height: int = 400) -> str:
    """Self-contained SVG of a curve with a shaded band."""
    u, spe, lower, upper = (np.asarray(a, dtype=float) for a in (u, spe, lower, upper))
    pad = 48
    y_lo, y_hi = float(lower.min()), float(upper.max())
    if y_hi <= y_lo:
        y_lo, y_hi = y_lo - 1, y_hi + 1
    x_lo, x_hi = float(u.min()), float(u.max())
    if x_hi <= x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5

    def px(a):
        return pad + (a - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def py(a):
        return height - pad - (a - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    def pts(xs, ys):
        return " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, ys))

    band = pts(np.r_[u, u[::-1]], np.r_[lower, upper[::-1]])
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<polygon points="{band}" fill="#9ecae1" fill-opacity="0.6" stroke="none"/>',
        f'<polyline points="{pts(u, spe)}" fill="none" stroke="#08519c" stroke-width="2"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad}" y="{height - pad + 20}" font-size="12">{x_lo:.3g}</text>',
        f'<text x="{width - pad}" y="{height - pad + 20}" font-size="12" text-anchor="end">{x_hi:.3g}</text>',
        f'<text x="{pad - 6}" y="{height - pad}" font-size="12" text-anchor="end">{y_lo:.3g}</text>',
        f'<text x="{pad - 6}" y="{pad + 4}" font-size="12" text-anchor="end">{y_hi:.3g}</text>',
        f'<text x="{width / 2:.0f}" y="{height - 10}" font-size="13" text-anchor="middle">u</text>',
        f'<text x="{width / 2:.0f}" y="24" font-size="14" text-anchor="middle">{title}</text>',
        "</svg>",
    ]
    return "\n".join(lines) + "\n"


# -- subcommands --------------------------------------------------------------


def cmd_spe(cfg: dict, out: Path, threads: int = 1) -> list[Path]:
    """Sorted effects with uniform and bias-corrected bands."""
    _, pipe, eff = build_inputs(cfg)
    grid = QuantileGrid(tuple(cfg["grid"]))
    res = bias_correct(bootstrap_bands(pipe, eff, grid, cfg["B"], cfg["alpha"], cfg["scheme"], cfg["seed"], threads=threads))
    header = ("u", "spe", "corrected", "lower", "upper", "sigma_half")
    rows = zip(res.u, res.spe, res.spe_corrected, res.band_lower, res.band_upper, res.sigma_half)
    write_csv(out / "spe.csv", header, rows)
    files = [out / "spe.csv"]
    if cfg["plot"]:
        write_csv(
            out / "spe_plot.csv",
            ("u", "spe", "lower", "upper", "corrected", "corrected_lower", "corrected_upper"),
            zip(res.u, res.spe, res.band_lower, res.band_upper, res.spe_corrected, res.corrected_lower, res.corrected_upper),
        )
        title = f"sorted effects, {100 * (1 - cfg['alpha']):g}% uniform band"
        (out / "spe.svg").write_text(band_svg(res.u, res.spe, res.band_lower, res.band_upper, title))
        files += [out / "spe_plot.csv", out / "spe.svg"]
    write_manifest(out, "spe", cfg, {"t_crit": float(res.t_crit), "n": res.n})
    return files


def _targets(cfg) -> list[LambdaTarget]:
    return [LambdaTarget(t["kind"], tuple(t["t"]), tuple(t["columns"]), t["label"]) for t in cfg["classify"]["targets"]]


def cmd_classify(cfg: dict, out: Path, threads: int = 1) -> list[Path]:
    """Least/most affected group means, differences and joint p-values."""
    if "classify" not in cfg:
        raise ConfigError("classify section is required")
    sample, pipe, eff = build_inputs(cfg)
    if sample is None:
        raise ConfigError("classification needs a data set with characteristics")
    c = cfg["classify"]
    targets = _targets(cfg)
    labels = [t.label for t in targets]
    blocks = {f"target:{lab}": [k] for k, lab in enumerate(labels)}
    for name, members in c["blocks"].items():
        missing = [m for m in members if m not in labels]
        if missing:
            raise ConfigError(f"classify.blocks.{name} names unknown targets {missing}")
        blocks[name] = [labels.index(m) for m in members]
    rep = joint_inference(
        pipe, eff, sample, targets, c["combos"], GroupSpec(c["u"], c["direction"]),
        B=cfg["B"], alpha=cfg["alpha"], seed=cfg["seed"], scheme=cfg["scheme"], blocks=blocks, threads=threads,
    )
    rows = []
    for k, lab in enumerate(labels):
        rows.append((
            lab, rep.least[k], rep.se_least[k], rep.most[k], rep.se_most[k],
            rep.diff[k], rep.se_diff[k], rep.block_pvalues[f"target:{lab}"], rep.p_value,
        ))
    write_csv(out / "classification.csv", ("target", "least", "se_least", "most", "se_most", "diff", "se_diff", "P-val", "JP-val"), rows)
    combo_rows = []
    for l, (a, b) in enumerate(rep.combos):
        for k, lab in enumerate(labels):
            combo_rows.append((l, a, b, lab, rep.estimate[l, k], rep.scale[l, k], rep.lower[l, k], rep.upper[l, k]))
    write_csv(out / "combinations.csv", ("combo", "c_least", "c_most", "target", "estimate", "scale", "lower", "upper"), combo_rows)
    block_rows = [(name, rep.block_pvalues[name]) for name in c["blocks"]] + [("joint", rep.p_value)]
    write_csv(out / "blocks.csv", ("block", "p_value"), block_rows)
    results = {
        "t_crit": rep.t_crit, "statistic": rep.statistic, "p_value": rep.p_value,
        "skipped_draws": rep.skipped, "cutoffs": list(rep.cutoffs), "n": rep.n,
    }
    write_manifest(out, "classify", cfg, results)
    return [out / "classification.csv", out / "combinations.csv", out / "blocks.csv"]


def cmd_sets(cfg: dict, out: Path, threads: int = 1) -> list[Path]:
    """Confidence sets for the least and most affected cells, with 2-D projections."""
    if "sets" not in cfg:
        raise ConfigError("sets section is required")
    sample, pipe, eff = build_inputs(cfg)
    s = cfg["sets"]
    group = GroupSpec(s["u"], s["direction"])
    sets = affected_sets(pipe, eff, group, cfg["B"], cfg["alpha"], cfg["seed"], cfg["scheme"], s["tolerance"], threads=threads)
    least, most = sets.least(), sets.most()
    rows = [
        (k, int(eff.obs[k]), eff.tau[k], eff.values[k], sets.lower.statistic[k], sets.upper.statistic[k], least[k], most[k])
        for k in range(len(eff))
    ]
    write_csv(out / "sets.csv", ("cell", "obs", "tau", "effect", "stat_lower", "stat_upper", "cm_least", "cm_most"), rows)
    files = [out / "sets.csv"]
    for a, b in s["projections"]:
        if sample is None:
            raise ConfigError("projections need a data set with named columns")
        table = projection_table(sample, eff, sets, [a, b])
        header = ("cell", "obs", a, b, "effect", "group", "set")
        path = out / f"projection_{a}_{b}.csv"
        write_csv(path, header, [tuple(r[h] for h in header) for r in table])
        files.append(path)
    c_least, c_most = sets.critical_values
    results = {
        "critical_least": c_least, "critical_most": c_most,
        "cutoff_lower": sets.lower.cutoff, "cutoff_upper": sets.upper.cutoff,
        "size_least": int(least.sum()), "size_most": int(most.sum()),
    }
    write_manifest(out, "sets", cfg, results)
    return files


def cmd_simulate(cfg: dict, out: Path, threads: int = 1) -> list[Path]:
    """Monte Carlo tables for the three designs."""
    m = cfg.get("simulate") or {"design": 1, "n_sims": 1000, "n_boot": 500}
    runner = {1: design1_run, 2: design2_run, 3: design3_run}[m["design"]]
    report = runner(m["n_sims"], m["n_boot"], cfg["seed"], threads=threads)
    path = out / f"design{m['design']}.csv"
    report.to_csv(path)
    write_manifest(out, "simulate", cfg, report.extra or None)
    return [path]


COMMANDS = {"spe": cmd_spe, "classify": cmd_classify, "sets": cmd_sets, "simulate": cmd_simulate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sortedeffects", description="Sorted partial effects and classification analysis.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=False, help="YAML config or a run manifest")
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=1, help="bootstrap worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    where = args.config or "<defaults>"
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.config:
            cfg = read_config(args.config)
        else:
            cfg = resolve_config({})
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg["seed"] = args.seed
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](cfg, out, threads=args.threads)
    except SortedEffectsError as exc:
        print(f"error: {where}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {where}: I/O error: {exc}", file=sys.stderr)
        return 1
    for f in files:
        log.info("wrote %s", f)
    return 0


if __name__ == "__main__":
    sys.exit(main())
