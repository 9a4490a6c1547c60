"""Command-line interface: ``sosroa {certify,estimate,reference,plot}``.

Systems are JSON files::

    {"name": "...", "nvars": 2, "field": ["-x2", "x1 + x2*(x1^2 - 1)"],
     "rescale": "1/3", "notes": "..."}

With ``rescale = s`` the certificate search runs in ``z = s x``; radii on the
command line and in experiment configs refer to ``z``, while point sets and
plots are written in the original ``x`` coordinates. A bundled system can be
named instead of a path (``van_der_pol``).

Exit codes: 0 success, 1 infeasible, 2 unknown (numerical trouble), 64 usage
or input errors. ``ROA_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from . import sos
from .odesim import Grid, IntegratorOptions, reference_roa
from .poly import DimensionError, PolynomialParseError, VectorField
from .roa import EstimateConfig, NoFeasibleRadius, Outcome, estimate_roa, h_oracle
from .setgeom import read_point_set, write_point_set

log = logging.getLogger("sosroa")

EXIT_OK = 0
EXIT_INFEASIBLE = 1
EXIT_UNKNOWN = 2
EXIT_USAGE = 64

BUNDLED_SYSTEMS = {"van_der_pol": "van_der_pol.json"}


class UsageError(Exception):
    """Bad arguments or unreadable input; maps to exit code 64."""


# -- inputs ---------------------------------------------------------------------


def _number(value, what: str) -> float:
    try:
        if isinstance(value, str):
            return float(Fraction(value.strip()))
        return float(value)
    except (ValueError, ZeroDivisionError, TypeError) as exc:
        raise UsageError(f"{what}: not a number: {value!r}") from exc


@dataclass
class SystemSpec:
    name: str
    nvars: int
    field: list[str]
    rescale: float = 1.0
    notes: str = ""

    def __post_init__(self):
        if not self.rescale > 0:
            raise UsageError("rescale must be positive")
        if len(self.field) != self.nvars:
            raise UsageError(f"system {self.name!r}: {len(self.field)} field components for nvars={self.nvars}")

    @classmethod
    def from_json(cls, data: dict) -> SystemSpec:
        if not isinstance(data, dict):
            raise UsageError("system file must hold a JSON object")
        missing = [k for k in ("nvars", "field") if k not in data]
        if missing:
            raise UsageError(f"system file lacks {', '.join(missing)}")
        unknown = set(data) - {"name", "nvars", "field", "rescale", "notes"}
        if unknown:
            raise UsageError(f"unknown system keys: {sorted(unknown)}")
        fieldv = data["field"]
        if not isinstance(fieldv, list) or not all(isinstance(c, str) for c in fieldv):
            raise UsageError("'field' must be a list of polynomial strings")
        nvars = data["nvars"]
        if not isinstance(nvars, int) or nvars < 1:
            raise UsageError("'nvars' must be a positive integer")
        return cls(
            name=str(data.get("name", "system")),
            nvars=nvars,
            field=list(fieldv),
            rescale=_number(data.get("rescale", 1.0), "rescale"),
            notes=str(data.get("notes", "")),
        )

    def vector_field(self) -> VectorField:
        """The field in original coordinates."""
        try:
            return VectorField.parse(self.field, self.nvars)
        except (PolynomialParseError, DimensionError, ValueError) as exc:
            raise UsageError(f"system {self.name!r}: {exc}") from exc

    def working_field(self) -> VectorField:
        f = self.vector_field()
        return f if self.rescale == 1.0 else f.rescaled(self.rescale)


def _read_json(path: str | Path, what: str):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {what} {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from exc


def load_system(name_or_path: str) -> SystemSpec:
    if name_or_path in BUNDLED_SYSTEMS and not Path(name_or_path).exists():
        text = resources.files("sosroa").joinpath("data", BUNDLED_SYSTEMS[name_or_path]).read_text()
        return SystemSpec.from_json(json.loads(text))
    return SystemSpec.from_json(_read_json(name_or_path, "system file"))


@dataclass
class ExperimentConfig:
    degrees: list[int] = field(default_factory=lambda: [4, 6, 8])
    r_min: float = 0.0
    r_max: float = 1.0
    r_tol: float = 1e-3
    a_tol: float = 1e-3
    beta: float = 1e-3
    gamma: float = 1e3
    delta: float = 1e-3
    # grid for the certified components (spans the certificate's ball)
    grid_resolution: int = 301
    # reference ROA box, in original coordinates; None skips the reference
    reference_half_width: float | None = 3.0
    reference_resolution: int = 301
    t_max: float = 100.0
    converge_eps: float = 1e-3
    escape_radius: float = 10.0
    certificate_selection: str = "shaped"
    level_containment: str = "sphere"
    out: str = "roa_out"
    seed: int = 0

    def __post_init__(self):
        for name in ("r_tol", "a_tol", "beta", "gamma", "delta", "t_max", "converge_eps", "escape_radius"):
            if not getattr(self, name) > 0:
                raise UsageError(f"config: {name} must be positive")
        if not 0 <= self.r_min < self.r_max:
            raise UsageError("config: need 0 <= r_min < r_max")
        if any(not isinstance(d, int) or d < 2 for d in self.degrees):
            raise UsageError("config: degrees must be integers >= 2")
        if self.grid_resolution < 1 or self.reference_resolution < 1:
            raise UsageError("config: resolutions must be at least 1")

    @classmethod
    def from_json(cls, data: dict) -> ExperimentConfig:
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise UsageError(f"config: {exc}") from exc

    def estimate_config(self) -> EstimateConfig:
        try:
            return EstimateConfig(
                r_min=self.r_min, r_max=self.r_max, r_tol=self.r_tol, a_tol=self.a_tol,
                beta=self.beta, gamma=self.gamma, delta=self.delta,
                grid_resolution=self.grid_resolution,
                certificate_selection=self.certificate_selection,
                level_containment=self.level_containment,
            )
        except ValueError as exc:
            raise UsageError(f"config: {exc}") from exc

    def integrator(self) -> IntegratorOptions:
        return IntegratorOptions(converge_eps=self.converge_eps, escape_radius=self.escape_radius)


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_json(_read_json(path, "config file"))


# -- outputs --------------------------------------------------------------------


def _plain(obj):
    """JSON-ready copy: numpy scalars/arrays to Python, tuples to lists."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if hasattr(obj, "value") and not isinstance(obj, (int, float, str)):
        return obj.value
    return obj


def dump_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def certificate_json(cert: sos.SosCertificate) -> dict:
    return {
        "P": cert.P.to_json(),
        "P_text": str(cert.P),
        "degree": cert.d,
        "r": cert.r,
        "beta": cert.beta,
        "gamma": cert.gamma,
        "delta": cert.delta,
        "multipliers": [m.to_json() for m in cert.multipliers],
        "residuals": cert.residuals,
        "min_gram_eigenvalue": cert.min_gram_eigenvalue,
        "vector_field": [str(c) for c in cert.vector_field.components],
    }


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


# -- commands -------------------------------------------------------------------


def cmd_certify(args) -> int:
    system = load_system(args.system)
    if args.d is None or args.r is None:
        raise UsageError("certify needs --d and --r")
    d, r = args.d[0], args.r
    if d < 2:
        raise UsageError("--d must be at least 2")
    if not r > 0:
        raise UsageError("--r must be positive")
    f = system.working_field()
    res = h_oracle(f, d, r)
    doc = {
        "system": system.name,
        "rescale": system.rescale,
        "d": d,
        "r": r,
        "r_original": r / system.rescale,
        "outcome": res.outcome.value,
        "detail": res.detail,
    }
    if res.certificate is not None:
        doc["certificate"] = certificate_json(res.certificate)
    _emit(dump_json(doc), args.out)
    return {Outcome.FEASIBLE: EXIT_OK, Outcome.INFEASIBLE: EXIT_INFEASIBLE}.get(res.outcome, EXIT_UNKNOWN)


def _reference(system: SystemSpec, cfg: ExperimentConfig, resolution: int | None = None):
    res = resolution or cfg.reference_resolution
    if res == 1:
        log.warning("reference resolution 1: the grid is a single cell around the origin")
    half = cfg.reference_half_width if cfg.reference_half_width is not None else 3.0
    grid = Grid.centered(half, system.nvars, res)
    return reference_roa(system.vector_field(), grid, cfg.t_max, cfg.integrator())


def _write_reference(ref, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    ref.write_csv(out / "reference_grid.csv", out / "reference_boundary.csv")
    doc = {
        "grid": ref.grid.to_json(),
        "t_max": ref.t_max,
        "counts": ref.counts(),
        "grid_diagonal": ref.grid.diagonal,
        "files": {"grid": "reference_grid.csv", "boundary": "reference_boundary.csv"},
    }
    (out / "reference.json").write_text(dump_json(doc))
    return doc


def cmd_reference(args) -> int:
    system = load_system(args.system)
    cfg = load_config(args.config)
    out = Path(args.out or cfg.out)
    ref = _reference(system, cfg, args.resolution)
    doc = _write_reference(ref, out)
    print(f"reference for {system.name}: " + ", ".join(f"{k} {v}" for k, v in sorted(doc["counts"].items())))
    return EXIT_OK


def _summary_row(d, doc) -> list[str]:
    if "error" in doc:
        return [str(d), "-", "-", "0", "-", doc["error"]]
    h = doc.get("hausdorff_to_reference")
    return [str(d), f"{doc['r_best']:.6g}", f"{doc['a']:.6g}", str(doc["component_size"]),
            "-" if h is None else f"{h:.6g}", ""]


def cmd_estimate(args) -> int:
    system = load_system(args.system)
    cfg = load_config(args.config)
    if args.d:
        cfg.degrees = list(args.d)
    if args.resolution is not None:
        cfg.grid_resolution = cfg.reference_resolution = args.resolution
    if args.seed is not None:
        cfg.seed = args.seed
    if args.r is not None:
        cfg.r_max = args.r
    cfg.__post_init__()
    out = Path(args.out or cfg.out)
    if not cfg.degrees:
        log.warning("no degrees requested; nothing to do")
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    s = system.rescale
    f = system.working_field()

    reference = None
    if cfg.reference_half_width is not None:
        ref = _reference(system, cfg)
        _write_reference(ref, out)
        reference = ref.inside_points()
        if not len(reference):
            reference = None

    econf = cfg.estimate_config()
    summary, status = [], EXIT_OK
    for d in cfg.degrees:
        stem = f"d{d}"
        try:
            est = estimate_roa(f, d, econf, reference=None if reference is None else reference * s)
        except NoFeasibleRadius as exc:
            log.warning("d=%d: %s", d, exc)
            steps = exc.trace.steps if exc.trace is not None else []
            doc = {"d": d, "error": "no feasible radius",
                   "trace": [{"r": st.r, "outcome": st.outcome.value} for st in steps]}
            (out / f"estimate_{stem}.json").write_text(dump_json(doc))
            summary.append((d, doc))
            status = EXIT_INFEASIBLE
            continue
        D = est.component / s
        write_point_set(out / f"component_{stem}.csv", D)
        write_point_set(out / f"boundary_{stem}.csv", est.boundary() / s)
        h = est.hausdorff_to_reference
        doc = {
            "system": system.name,
            "rescale": s,
            "seed": cfg.seed,
            "d": est.d,
            "requested_degree": d,
            "r_best": est.metadata["r_best"],
            "r_best_original": est.metadata["r_best"] / s,
            "r": est.r,
            "r_original": est.r / s,
            "r_star_estimate": est.r_star_estimate,
            "a": est.level,
            "component_size": est.size,
            "hausdorff_to_reference": None if h is None else h / s,
            "certificate": certificate_json(est.certificate),
            "metadata": est.metadata,
            "coordinates": "certificate in z = rescale * x; point files in x",
            "files": {"component": f"component_{stem}.csv", "boundary": f"boundary_{stem}.csv"},
        }
        (out / f"estimate_{stem}.json").write_text(dump_json(doc))
        summary.append((d, doc))

    header = ["d", "r_best", "a", "size", "hausdorff", "note"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for d, doc in summary:
            w.writerow(_summary_row(d, doc))
    print(f"{'d':>3} {'r_best':>10} {'a':>10} {'|D|':>8} {'H':>10}")
    for d, doc in summary:
        row = _summary_row(d, doc)
        print(f"{row[0]:>3} {row[1]:>10} {row[2]:>10} {row[3]:>8} {row[4]:>10} {row[5]}".rstrip())
    return status


_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _svg(reference_boundary, estimates, size=600) -> str:
    clouds = [p for p in [reference_boundary] + [e["boundary"] for e in estimates] if p is not None and len(p)]
    radii = [e["r_best"] for e in estimates]
    extent = max([float(np.max(np.abs(c))) for c in clouds] + radii + [1e-9]) * 1.1
    scale = size / (2 * extent)

    def xy(p):
        return (p[0] + extent) * scale, (extent - p[1]) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if reference_boundary is not None and len(reference_boundary):
        parts.append('<g fill="black">')
        parts += [f'<circle cx="{x:.2f}" cy="{y:.2f}" r="0.8"/>' for x, y in map(xy, reference_boundary)]
        parts.append("</g>")
    for k, e in enumerate(estimates):
        col = _COLORS[k % len(_COLORS)]
        parts.append(f'<g fill="{col}">')
        parts += [f'<circle cx="{x:.2f}" cy="{y:.2f}" r="0.8"/>' for x, y in map(xy, e["boundary"])]
        parts.append("</g>")
        cx, cy = xy((0.0, 0.0))
        parts.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{e["r_best"] * scale:.2f}" fill="none" '
                     f'stroke="{col}" stroke-dasharray="6,4"/>')
        parts.append(f'<text x="10" y="{20 + 16 * k}" fill="{col}" font-size="13">d = {e["d"]}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    if not args.estimates:
        raise UsageError("plot needs at least one estimate JSON file")
    estimates = []
    for path in args.estimates:
        doc = _read_json(path, "estimate file")
        if not isinstance(doc, dict) or "error" in doc:
            log.warning("%s holds no estimate; skipped", path)
            continue
        try:
            bpath = Path(path).parent / doc["files"]["boundary"]
            estimates.append({"d": doc["d"], "r_best": doc["r_best_original"],
                              "boundary": read_point_set(bpath)})
        except (KeyError, OSError, ValueError) as exc:
            raise UsageError(f"{path}: incomplete estimate file ({exc})") from exc
    ref = None
    if args.reference:
        try:
            ref = read_point_set(args.reference)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read reference boundary {args.reference}: {exc}") from exc
    dims = {e["boundary"].shape[1] for e in estimates if e["boundary"].size}
    if ref is not None and ref.size:
        dims.add(ref.shape[1])
    if len(dims) > 1:
        raise UsageError(f"inconsistent dimensions across inputs: {sorted(dims)}")
    n = dims.pop() if dims else 2
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "overlay.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "d"] + [f"x{i + 1}" for i in range(n)])
        if ref is not None:
            for p in ref.tolist():
                w.writerow(["reference", ""] + [repr(v) for v in p])
        for e in estimates:
            for p in e["boundary"].tolist():
                w.writerow(["estimate", e["d"]] + [repr(v) for v in p])
        for e in estimates:
            w.writerow(["circle", e["d"], repr(e["r_best"])] + [""] * (n - 1))
    if n != 2:
        log.warning("SVG output needs a 2-D system (got n=%d); wrote CSV only", n)
        return EXIT_OK
    (out / "figure.svg").write_text(_svg(ref, estimates))
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sosroa", description="Certified region-of-attraction estimates via SOS programs.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("certify", help="solve the certificate program H(d, r) once")
    c.add_argument("system", help="system JSON file or bundled name")
    c.add_argument("--d", type=int, nargs=1, required=True, help="certificate degree")
    c.add_argument("--r", type=float, required=True, help="ball radius (working coordinates)")
    c.add_argument("--out", help="write JSON here instead of stdout")
    c.set_defaults(func=cmd_certify)

    e = sub.add_parser("estimate", help="bisection, level and component for each degree")
    e.add_argument("system")
    e.add_argument("--config", help="experiment config JSON")
    e.add_argument("--d", type=int, action="append", help="degree (repeatable; overrides the config)")
    e.add_argument("--r", type=float, help="override r_max")
    e.add_argument("--resolution", type=int, help="grid resolution for components and reference")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="output directory")
    e.set_defaults(func=cmd_estimate)

    r = sub.add_parser("reference", help="trajectory-classification reference ROA")
    r.add_argument("system")
    r.add_argument("--config")
    r.add_argument("--resolution", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_reference)

    pl = sub.add_parser("plot", help="overlay estimates and the reference boundary")
    pl.add_argument("estimates", nargs="*", help="estimate_d*.json files")
    pl.add_argument("--reference", help="reference boundary CSV")
    pl.add_argument("--out", help="output directory")
    pl.set_defaults(func=cmd_plot)
    return p


def _configure_logging() -> None:
    level = os.environ.get("ROA_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sosroa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
