"""Run configuration: INI-style parsing, expression fields, emission, builders.

A run file is plain sectioned text::

    [domain]
    dim = 1
    bounds = 0, 1
    elements = 100
    nu = 0.1

    [time]
    T = 0.5
    steps = 50

    [coupling]
    n = 2
    q12 = 4*x - 2
    q21 = -4*x + 2

    [source]
    f1 = sin(2*pi*x)
    f2 = -sin(2*pi*x)

    [observation]
    boxes = (0.5, 0.9)
    observed_components = 1, 2

Values that describe spatial fields are arithmetic expressions over ``x``
(and ``y`` on 2-D domains) with ``+ - * / ^``, ``sin``, ``cos``, ``exp``
and the constant ``pi``.  A field may also be piecewise, written as
semicolon-separated clauses::

    f1 = 8*(x - 0.1) on (0.1, 0.35); 8*(0.6 - x) on (0.35, 0.6); 0 else

Each ``on (a, b)`` clause applies on the half-open interval (a, b] (first
matching clause wins), and the optional ``else`` clause — last if present
— covers everything unclaimed (default 0).  Half-open intervals make
adjacent clauses partition cleanly: a node sitting on a shared endpoint
belongs to the clause that ends there.

``parse_config`` reports every problem with the offending line number;
``emit_config`` writes the canonical text form, and the two are inverse
to each other: ``parse_config(emit_config(cfg)) == cfg``.

The ``build_*`` helpers turn a parsed config into the package's working
objects (mesh, time grid, sigma profile, coupling matrix, nodal sources,
observation mask, inverse-problem setup).
"""

from __future__ import annotations

import ast
import math
import re
from dataclasses import dataclass

import numpy as np

from parasource.forward import CouplingMatrix, SigmaProfile, TimeGrid
from parasource.meshing import (
    Mesh,
    SubdomainMask,
    build_interval_mesh,
    build_rect_mesh,
    mask_from_boxes,
)
from parasource.optimize import InverseProblemConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "parse_config",
    "emit_config",
    "evaluate_field",
    "build_mesh",
    "build_grid",
    "build_sigma",
    "build_coupling",
    "build_source",
    "build_mask",
    "build_inverse_config",
]


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# ===================================================================
# Expression evaluator
# ===================================================================
#
# Whitelisted-AST arithmetic over nodal coordinates: enough to write the
# coupling and source fields of the benchmark problems, nothing more.

_FUNCTIONS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_ALLOWED_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}

_CLAUSE_RE = re.compile(r"^(?P<body>.+?)\s+on\s*\(\s*(?P<a>[^,()]+)\s*,\s*(?P<b>[^,()]+)\s*\)$")
_ELSE_RE = re.compile(r"^(?P<body>.+?)\s+else$")


def _normalize(text: str) -> str:
    """Canonical source form: ASCII minus, stripped ends."""
    return text.replace("−", "-").strip()


def _eval_node(node: ast.AST, env: dict, where: str, line: int | None):
    if isinstance(node, ast.Expression):
        return _eval_node(node.body, env, where, line)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return float(node.value)
        raise ConfigError(f"{where}: literal {node.value!r} is not a number", line)
    if isinstance(node, ast.Name):
        if node.id in env:
            return env[node.id]
        if node.id == "y":
            raise ConfigError(f"{where}: 'y' used on a 1-D domain", line)
        raise ConfigError(f"{where}: unknown name '{node.id}'", line)
    if isinstance(node, ast.BinOp) and type(node.op) in _ALLOWED_BINOPS:
        lhs = _eval_node(node.left, env, where, line)
        rhs = _eval_node(node.right, env, where, line)
        return _ALLOWED_BINOPS[type(node.op)](lhs, rhs)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        val = _eval_node(node.operand, env, where, line)
        return -val if isinstance(node.op, ast.USub) else val
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS:
            raise ConfigError(f"{where}: only sin, cos, exp may be called", line)
        if len(node.args) != 1 or node.keywords:
            raise ConfigError(f"{where}: {node.func.id} takes exactly one argument", line)
        return _FUNCTIONS[node.func.id](_eval_node(node.args[0], env, where, line))
    raise ConfigError(f"{where}: unsupported syntax {type(node).__name__}", line)


def _eval_simple(expr: str, coords: np.ndarray, dim: int, where: str, line: int | None) -> np.ndarray:
    src = _normalize(expr).replace("^", "**")
    if not src:
        raise ConfigError(f"{where}: empty expression", line)
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"{where}: malformed expression {expr!r} ({exc.msg})", line) from None
    env = {"x": coords[:, 0], "pi": math.pi}
    if dim == 2:
        env["y"] = coords[:, 1]
    out = _eval_node(tree, env, where, line)
    return np.broadcast_to(np.asarray(out, dtype=float), (coords.shape[0],)).copy()


def _parse_edge(text: str, where: str, line: int | None) -> float:
    try:
        return float(_normalize(text))
    except ValueError:
        raise ConfigError(f"{where}: interval endpoint {text!r} is not a number", line) from None


def evaluate_field(expr: str, coords: np.ndarray, dim: int,
                   where: str = "expression", line: int | None = None) -> np.ndarray:
    """Evaluate a (possibly piecewise) field expression at nodal coordinates.

    ``coords`` is ``(n_nodes, dim)``; the result is one value per node.
    """
    coords = np.asarray(coords, dtype=float)
    text = _normalize(expr)
    clauses = [c.strip() for c in text.split(";")]
    piecewise = len(clauses) > 1 or _CLAUSE_RE.match(clauses[0]) or _ELSE_RE.match(clauses[0])
    if not piecewise:
        return _eval_simple(text, coords, dim, where, line)

    if dim != 1:
        raise ConfigError(f"{where}: piecewise clauses are one-dimensional (intervals in x)", line)
    x = coords[:, 0]
    out = np.zeros(coords.shape[0])
    claimed = np.zeros(coords.shape[0], dtype=bool)
    default_seen = False
    for pos, clause in enumerate(clauses):
        if not clause:
            raise ConfigError(f"{where}: empty piecewise clause", line)
        m = _CLAUSE_RE.match(clause)
        if m:
            if default_seen:
                raise ConfigError(f"{where}: 'else' clause must come last", line)
            a = _parse_edge(m.group("a"), where, line)
            b = _parse_edge(m.group("b"), where, line)
            if not a < b:
                raise ConfigError(f"{where}: empty interval ({a}, {b})", line)
            sel = (x > a) & (x <= b) & ~claimed
            out[sel] = _eval_simple(m.group("body"), coords, dim, where, line)[sel]
            claimed |= sel
            continue
        m = _ELSE_RE.match(clause)
        if m is None:
            raise ConfigError(
                f"{where}: piecewise clause {clause!r} is neither 'EXPR on (a, b)' nor 'EXPR else'",
                line,
            )
        if default_seen:
            raise ConfigError(f"{where}: multiple 'else' clauses", line)
        default_seen = True
        out[~claimed] = _eval_simple(m.group("body"), coords, dim, where, line)[~claimed]
    return out


def _probe_field(expr: str, dim: int, where: str, line: int | None) -> None:
    """Compile-check an expression by evaluating it at a token coordinate."""
    probe = np.full((1, dim), 0.5)
    evaluate_field(expr, probe, dim, where, line)


# ===================================================================
# RunConfig
# ===================================================================

@dataclass(frozen=True)
class RunConfig:
    """Declarative description of one run, section by section.

    Spatial fields (coupling entries, source components) are stored as the
    expression strings the file contained; ``build_coupling`` /
    ``build_source`` evaluate them on the actual mesh.  Component and
    coupling indices are 1-based, as in the file format.
    """

    # [domain]
    dim: int
    bounds: tuple[float, ...]
    elements: tuple[int, ...]
    nu: float = 0.1
    # [time]
    T: float = 0.5
    steps: int = 50
    sigma_kind: str = "cosine_plateau"
    t0: float | None = None
    # [coupling]
    n: int = 2
    coupling: tuple[tuple[str, str], ...] = ()
    # [source]
    source: tuple[str, ...] = ()
    # [observation]
    boxes: tuple[tuple[float, ...], ...] = ()
    observed_components: tuple[int, ...] = ()
    # [optimizer]
    k: float = 1.0e5
    step: float = 1.0e-4
    iters: int = 2000
    # [spectral]
    K_max: int = 8
    horizons: tuple[float, ...] = ()
    epsilon: float = 1.0e-6
    # [run]
    seed: int | None = None

    def validate(self) -> "RunConfig":
        """Cross-field consistency; raises :class:`ConfigError`."""
        _validate(self, lines={})
        return self


# ===================================================================
# Parsing
# ===================================================================

_SECTIONS = {
    "domain": {"dim", "bounds", "elements", "nu"},
    "time": {"T", "steps", "sigma_kind", "t0"},
    "coupling": None,  # n plus free-form qIJ keys
    "source": None,  # fI keys
    "observation": {"boxes", "observed_components"},
    "optimizer": {"k", "step", "iters"},
    "spectral": {"K_max", "horizons", "epsilon"},
    "run": {"seed"},
}

_Q_KEY_RE = re.compile(r"^q([1-9][0-9]*)([1-9][0-9]*)$")
_F_KEY_RE = re.compile(r"^f([1-9][0-9]*)$")


def _parse_scalar(value: str, kind, where: str, line: int):
    try:
        if kind is int:
            return int(_normalize(value))
        return float(_normalize(value))
    except ValueError:
        label = "an integer" if kind is int else "a number"
        raise ConfigError(f"{where} must be {label}, got {value!r}", line) from None


def _parse_number_list(value: str, kind, where: str, line: int) -> tuple:
    parts = [p for p in (s.strip() for s in value.split(",")) if p]
    if not parts:
        raise ConfigError(f"{where} must list at least one value", line)
    return tuple(_parse_scalar(p, kind, where, line) for p in parts)


def _parse_boxes(value: str, dim: int, where: str, line: int) -> tuple[tuple[float, ...], ...]:
    boxes = []
    for chunk in value.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        m = re.fullmatch(r"\(([^()]*)\)", chunk)
        if m is None:
            raise ConfigError(f"{where}: box {chunk!r} must be parenthesized", line)
        coords = _parse_number_list(m.group(1), float, where, line)
        if len(coords) != 2 * dim:
            raise ConfigError(
                f"{where}: box {chunk!r} needs {2 * dim} numbers on a {dim}-D domain", line
            )
        boxes.append(coords)
    if not boxes:
        raise ConfigError(f"{where} must list at least one box", line)
    return tuple(boxes)


def parse_config(text: str) -> RunConfig:
    """Parse and validate run-file text; errors carry the offending line."""
    raw: dict[str, dict[str, tuple[str, int]]] = {}
    section = None
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        stripped = rawline.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip().lower()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]", lineno)
            raw.setdefault(section, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno)
        if section is None:
            raise ConfigError("key outside any [section]", lineno)
        key, _, value = stripped.partition("=")
        key = key.strip()
        value = value.strip()
        allowed = _SECTIONS[section]
        if allowed is not None and key not in allowed:
            raise ConfigError(f"unknown key '{key}' in [{section}]", lineno)
        if section == "coupling" and key != "n" and not _Q_KEY_RE.match(key):
            raise ConfigError(f"unknown key '{key}' in [coupling] (expected n or qIJ)", lineno)
        if section == "source" and not _F_KEY_RE.match(key):
            raise ConfigError(f"unknown key '{key}' in [source] (expected f1, f2, ...)", lineno)
        if key in raw[section]:
            raise ConfigError(f"duplicate key '{key}' in [{section}]", lineno)
        if not value:
            raise ConfigError(f"key '{key}' has no value", lineno)
        raw[section][key] = (value, lineno)
    return _config_from_raw(raw)


def _get(raw, section, key):
    return raw.get(section, {}).get(key)


def _require(raw, section, key):
    item = _get(raw, section, key)
    if item is None:
        raise ConfigError(f"missing required key '{key}' in [{section}]")
    return item


def _config_from_raw(raw) -> RunConfig:
    lines: dict[str, int] = {}

    if "domain" not in raw:
        raise ConfigError("missing required section [domain]")
    if "time" not in raw:
        raise ConfigError("missing required section [time]")

    value, ln = _require(raw, "domain", "dim")
    dim = _parse_scalar(value, int, "dim", ln)
    lines["dim"] = ln
    value, ln = _require(raw, "domain", "bounds")
    bounds = _parse_number_list(value, float, "bounds", ln)
    lines["bounds"] = ln
    value, ln = _require(raw, "domain", "elements")
    elements = _parse_number_list(value, int, "elements", ln)
    lines["elements"] = ln
    kwargs: dict = {"dim": dim, "bounds": bounds, "elements": elements}

    item = _get(raw, "domain", "nu")
    if item:
        kwargs["nu"] = _parse_scalar(item[0], float, "nu", item[1])
        lines["nu"] = item[1]

    value, ln = _require(raw, "time", "T")
    kwargs["T"] = _parse_scalar(value, float, "T", ln)
    lines["T"] = ln
    value, ln = _require(raw, "time", "steps")
    kwargs["steps"] = _parse_scalar(value, int, "steps", ln)
    lines["steps"] = ln
    item = _get(raw, "time", "sigma_kind")
    if item:
        kwargs["sigma_kind"] = item[0]
        lines["sigma_kind"] = item[1]
    item = _get(raw, "time", "t0")
    if item:
        kwargs["t0"] = _parse_scalar(item[0], float, "t0", item[1])
        lines["t0"] = item[1]

    coupling_raw = raw.get("coupling", {})
    item = coupling_raw.get("n")
    entries = sorted((k, v) for k, v in coupling_raw.items() if k != "n")
    if item:
        kwargs["n"] = _parse_scalar(item[0], int, "n", item[1])
        lines["n"] = item[1]
    elif "source" in raw:
        kwargs["n"] = len(raw["source"])
    kwargs["coupling"] = tuple(
        (key, _normalize(value)) for key, (value, _) in entries
    )
    for key, (_, ln) in entries:
        lines[key] = ln

    if "source" in raw:
        src = raw["source"]
        n = kwargs.get("n", 2)
        wanted = [f"f{i}" for i in range(1, n + 1)]
        extra = sorted(set(src) - set(wanted))
        if extra:
            _, ln = src[extra[0]]
            raise ConfigError(
                f"source component '{extra[0]}' outside f1..f{n}", ln
            )
        missing = [w for w in wanted if w not in src]
        if missing:
            raise ConfigError(f"[source] is missing component '{missing[0]}'")
        kwargs["source"] = tuple(_normalize(src[w][0]) for w in wanted)
        for w in wanted:
            lines[w] = src[w][1]

    if "observation" in raw:
        value, ln = _require(raw, "observation", "boxes")
        kwargs["boxes"] = _parse_boxes(value, dim, "boxes", ln)
        lines["boxes"] = ln
        item = _get(raw, "observation", "observed_components")
        if item:
            comps = _parse_number_list(item[0], int, "observed_components", item[1])
            kwargs["observed_components"] = tuple(sorted(set(comps)))
            lines["observed_components"] = item[1]

    for section, key, attr, kind in [
        ("optimizer", "k", "k", float),
        ("optimizer", "step", "step", float),
        ("optimizer", "iters", "iters", int),
        ("spectral", "K_max", "K_max", int),
        ("spectral", "epsilon", "epsilon", float),
        ("run", "seed", "seed", int),
    ]:
        item = _get(raw, section, key)
        if item:
            kwargs[attr] = _parse_scalar(item[0], kind, key, item[1])
            lines[attr] = item[1]
    item = _get(raw, "spectral", "horizons")
    if item:
        kwargs["horizons"] = _parse_number_list(item[0], float, "horizons", item[1])
        lines["horizons"] = item[1]

    cfg = RunConfig(**kwargs)
    _validate(cfg, lines)
    return cfg


def _validate(cfg: RunConfig, lines: dict[str, int]) -> None:
    ln = lines.get

    if cfg.dim not in (1, 2):
        raise ConfigError(f"dim must be 1 or 2, got {cfg.dim}", ln("dim"))
    if len(cfg.bounds) != 2 * cfg.dim:
        raise ConfigError(
            f"bounds needs {2 * cfg.dim} numbers on a {cfg.dim}-D domain, got {len(cfg.bounds)}",
            ln("bounds"),
        )
    if cfg.bounds[0] >= cfg.bounds[1] or (cfg.dim == 2 and cfg.bounds[2] >= cfg.bounds[3]):
        raise ConfigError("bounds must be increasing per axis", ln("bounds"))
    if cfg.dim == 2 and (cfg.bounds[0] != 0.0 or cfg.bounds[2] != 0.0):
        raise ConfigError("2-D domains are rectangles anchored at the origin", ln("bounds"))
    if len(cfg.elements) != cfg.dim:
        raise ConfigError(
            f"elements needs {cfg.dim} count(s) on a {cfg.dim}-D domain", ln("elements")
        )
    if any(e < 1 for e in cfg.elements):
        raise ConfigError("element counts must be positive", ln("elements"))
    if cfg.nu <= 0.0:
        raise ConfigError("nu must be positive", ln("nu"))
    if cfg.T <= 0.0:
        raise ConfigError("T must be positive", ln("T"))
    if cfg.steps < 1:
        raise ConfigError("steps must be at least 1", ln("steps"))
    if cfg.sigma_kind not in ("cosine_plateau", "constant"):
        raise ConfigError(
            f"sigma_kind must be cosine_plateau or constant, got {cfg.sigma_kind!r}",
            ln("sigma_kind"),
        )
    if cfg.t0 is not None and not 0.0 < cfg.t0 < cfg.T / 2.0:
        raise ConfigError("t0 must lie in (0, T/2)", ln("t0"))
    if cfg.n < 1:
        raise ConfigError("n must be at least 1", ln("n"))

    for key, expr in cfg.coupling:
        m = _Q_KEY_RE.match(key)
        if m is None:
            raise ConfigError(f"coupling key {key!r} is not of the form qIJ", ln(key))
        i, j = int(m.group(1)), int(m.group(2))
        if i > cfg.n or j > cfg.n:
            raise ConfigError(f"coupling entry {key} outside the {cfg.n}x{cfg.n} matrix", ln(key))
        _probe_field(expr, cfg.dim, key, ln(key))

    if cfg.source and len(cfg.source) != cfg.n:
        raise ConfigError(
            f"[source] must define all of f1..f{cfg.n}, got {len(cfg.source)} entries"
        )
    for i, expr in enumerate(cfg.source, start=1):
        _probe_field(expr, cfg.dim, f"f{i}", ln(f"f{i}"))

    for box in cfg.boxes:
        if len(box) != 2 * cfg.dim:
            raise ConfigError(
                f"box {box} needs {2 * cfg.dim} numbers on a {cfg.dim}-D domain", ln("boxes")
            )
        if box[0] >= box[1] or (cfg.dim == 2 and box[2] >= box[3]):
            raise ConfigError(f"box {box} must be increasing per axis", ln("boxes"))
    for c in cfg.observed_components:
        if not 1 <= c <= cfg.n:
            raise ConfigError(
                f"observed component {c} outside 1..{cfg.n}", ln("observed_components")
            )

    if cfg.k <= 0.0:
        raise ConfigError("k must be positive", ln("k"))
    if cfg.step <= 0.0:
        raise ConfigError("step must be positive", ln("step"))
    if cfg.iters < 1:
        raise ConfigError("iters must be at least 1", ln("iters"))
    if cfg.K_max < 1:
        raise ConfigError("K_max must be at least 1", ln("K_max"))
    for tau in cfg.horizons:
        if not 0.0 < tau <= cfg.T:
            raise ConfigError(f"horizon {tau} outside (0, T]", ln("horizons"))
    if cfg.epsilon <= 0.0:
        raise ConfigError("epsilon must be positive", ln("epsilon"))


# ===================================================================
# Emission
# ===================================================================

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fmt_list(vals) -> str:
    return ", ".join(_fmt(v) for v in vals)


def emit_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config`` maps it back to ``cfg``."""
    out = []
    out.append("[domain]")
    out.append(f"dim = {cfg.dim}")
    out.append(f"bounds = {_fmt_list(cfg.bounds)}")
    out.append(f"elements = {_fmt_list(cfg.elements)}")
    out.append(f"nu = {_fmt(cfg.nu)}")
    out.append("")
    out.append("[time]")
    out.append(f"T = {_fmt(cfg.T)}")
    out.append(f"steps = {cfg.steps}")
    out.append(f"sigma_kind = {cfg.sigma_kind}")
    if cfg.t0 is not None:
        out.append(f"t0 = {_fmt(cfg.t0)}")
    out.append("")
    out.append("[coupling]")
    out.append(f"n = {cfg.n}")
    for key, expr in cfg.coupling:
        out.append(f"{key} = {expr}")
    if cfg.source:
        out.append("")
        out.append("[source]")
        for i, expr in enumerate(cfg.source, start=1):
            out.append(f"f{i} = {expr}")
    if cfg.boxes:
        out.append("")
        out.append("[observation]")
        out.append("boxes = " + "; ".join(f"({_fmt_list(b)})" for b in cfg.boxes))
        if cfg.observed_components:
            out.append(f"observed_components = {_fmt_list(cfg.observed_components)}")
    out.append("")
    out.append("[optimizer]")
    out.append(f"k = {_fmt(cfg.k)}")
    out.append(f"step = {_fmt(cfg.step)}")
    out.append(f"iters = {cfg.iters}")
    out.append("")
    out.append("[spectral]")
    out.append(f"K_max = {cfg.K_max}")
    if cfg.horizons:
        out.append(f"horizons = {_fmt_list(cfg.horizons)}")
    out.append(f"epsilon = {_fmt(cfg.epsilon)}")
    if cfg.seed is not None:
        out.append("")
        out.append("[run]")
        out.append(f"seed = {cfg.seed}")
    out.append("")
    return "\n".join(out)


# ===================================================================
# Builders
# ===================================================================

def build_mesh(cfg: RunConfig) -> Mesh:
    if cfg.dim == 1:
        return build_interval_mesh(cfg.bounds[0], cfg.bounds[1], cfg.elements[0])
    return build_rect_mesh(cfg.elements[0], cfg.elements[1], (cfg.bounds[1], cfg.bounds[3]))


def build_grid(cfg: RunConfig) -> TimeGrid:
    return TimeGrid(cfg.T, cfg.steps)


def build_sigma(cfg: RunConfig, grid: TimeGrid | None = None) -> SigmaProfile:
    grid = grid or build_grid(cfg)
    if cfg.sigma_kind == "constant":
        return SigmaProfile.constant(1.0, grid)
    return SigmaProfile.cosine_plateau(grid, t0=cfg.t0)


def build_coupling(cfg: RunConfig, mesh: Mesh | None = None) -> CouplingMatrix:
    """Coupling matrix with expression entries evaluated on the mesh.

    Entries that evaluate to a constant stay scalars, so hypothesis
    checks downstream (constant vs variable coupling) see the intent.
    """
    mesh = mesh or build_mesh(cfg)
    entries: list[list] = [[0.0] * cfg.n for _ in range(cfg.n)]
    coords = mesh.coords()
    for key, expr in cfg.coupling:
        m = _Q_KEY_RE.match(key)
        i, j = int(m.group(1)) - 1, int(m.group(2)) - 1
        vals = evaluate_field(expr, coords, cfg.dim, where=key)
        if np.all(vals == vals[0]):
            entries[i][j] = float(vals[0])
        else:
            entries[i][j] = vals
    return CouplingMatrix(entries)


def build_source(cfg: RunConfig, mesh: Mesh | None = None) -> np.ndarray:
    """Stacked nodal source ``(n, node_count)`` from the [source] section."""
    if not cfg.source:
        raise ConfigError("this command needs a [source] section (f1..fn)")
    mesh = mesh or build_mesh(cfg)
    coords = mesh.coords()
    return np.stack([
        evaluate_field(expr, coords, cfg.dim, where=f"f{i}")
        for i, expr in enumerate(cfg.source, start=1)
    ])


def build_mask(cfg: RunConfig, mesh: Mesh | None = None) -> SubdomainMask:
    if not cfg.boxes:
        raise ConfigError("this command needs an [observation] section with boxes")
    return mask_from_boxes(mesh or build_mesh(cfg), list(cfg.boxes))


def build_inverse_config(cfg: RunConfig) -> InverseProblemConfig:
    """Assemble the full source-recovery problem the config describes."""
    mesh = build_mesh(cfg)
    grid = build_grid(cfg)
    observed = cfg.observed_components or tuple(range(1, cfg.n + 1))
    return InverseProblemConfig(
        mesh=mesh,
        grid=grid,
        Q=build_coupling(cfg, mesh),
        nu=cfg.nu,
        sigma=build_sigma(cfg, grid),
        mask=build_mask(cfg, mesh),
        observed_components=tuple(c - 1 for c in observed),
        penalty_k=cfg.k,
        step_size=cfg.step,
        max_iters=cfg.iters,
    )
