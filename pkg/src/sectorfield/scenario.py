"""Model input: 1-D sector grid, return landscape, structural parameters.

The scenario file is a flat `key = value` text format with sections
[grid], [params], [expectations], [landscape]; `#` starts a comment and
arrays are comma-separated reals.  All keys are mandatory except the
optional analytic landscape descriptor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ParseError, ValidationError

BOUNDARIES = ("periodic", "reflecting")
ANALYTIC_KINDS = ("gaussian-bump", "cosine", "piecewise-linear")


@dataclass(frozen=True)
class SectorGrid:
    """Uniform 1-D grid of sectors; nodes are cell centres."""

    n_sectors: int
    x_min: float
    x_max: float
    boundary: str = "periodic"

    def __post_init__(self):
        if int(self.n_sectors) != self.n_sectors or self.n_sectors < 3:
            raise ValidationError("n_sectors must be an integer >= 3", field="n_sectors")
        if not self.x_max > self.x_min:
            raise ValidationError("x_max must exceed x_min", field="x_max")
        if self.boundary not in BOUNDARIES:
            raise ValidationError(f"boundary must be one of {BOUNDARIES}", field="boundary")

    @property
    def spacing(self) -> float:
        return (self.x_max - self.x_min) / self.n_sectors

    @property
    def volume(self) -> float:
        return self.n_sectors * self.spacing

    def nodes(self) -> np.ndarray:
        h = self.spacing
        return self.x_min + h * (np.arange(self.n_sectors) + 0.5)


def grid_gradient(grid: SectorGrid, values: np.ndarray) -> np.ndarray:
    """Second-order central difference with the grid's boundary rule."""
    v = np.asarray(values, dtype=float)
    h = grid.spacing
    if grid.boundary == "periodic":
        return (np.roll(v, -1) - np.roll(v, 1)) / (2.0 * h)
    padded = np.pad(v, 1, mode="reflect")
    return (padded[2:] - padded[:-2]) / (2.0 * h)


def grid_laplacian(grid: SectorGrid, values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    h = grid.spacing
    if grid.boundary == "periodic":
        return (np.roll(v, -1) - 2.0 * v + np.roll(v, 1)) / (h * h)
    padded = np.pad(v, 1, mode="reflect")
    return (padded[2:] - 2.0 * padded[1:-1] + padded[:-2]) / (h * h)


@dataclass(frozen=True)
class ReturnLandscape:
    """Long-run returns R at the grid nodes, optionally with a closed form."""

    r_values: np.ndarray
    analytic: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "r_values", np.asarray(self.r_values, dtype=float))
        if self.r_values.ndim != 1:
            raise ValidationError("r_values must be one-dimensional", field="r_values")
        if np.any(~np.isfinite(self.r_values)) or np.any(self.r_values <= 0.0):
            raise ValidationError("all R values must be strictly positive", field="r_values")


def _wrap_distance(x, center, grid: SectorGrid):
    dx = x - center
    if grid.boundary == "periodic":
        length = grid.volume
        dx = (dx + 0.5 * length) % length - 0.5 * length
    return dx


def evaluate_analytic(kind: str, params: dict, grid: SectorGrid, x: np.ndarray,
                      order: int = 0) -> np.ndarray:
    """Closed-form landscape value (order 0) or derivative (order 1, 2)."""
    x = np.asarray(x, dtype=float)
    if kind == "gaussian-bump":
        c = params["center"]
        h = params["height"]
        w = params["width"]
        base = params.get("baseline", 1.0)
        dx = _wrap_distance(x, c, grid)
        g = h * np.exp(-0.5 * (dx / w) ** 2)
        if order == 0:
            return base + g
        if order == 1:
            return -dx / w ** 2 * g
        return (dx ** 2 / w ** 4 - 1.0 / w ** 2) * g
    if kind == "cosine":
        amp = params["amplitude"]
        mean = params.get("mean", 1.0 + amp)
        period = params.get("period", grid.volume)
        phase = params.get("phase", 0.0)
        k = 2.0 * math.pi / period
        if order == 0:
            return mean + amp * np.cos(k * (x - phase))
        if order == 1:
            return -amp * k * np.sin(k * (x - phase))
        return -amp * k * k * np.cos(k * (x - phase))
    if kind == "piecewise-linear":
        xs = np.asarray(params["xs"], dtype=float)
        ys = np.asarray(params["ys"], dtype=float)
        if order == 0:
            return np.interp(x, xs, ys)
        if order == 1:
            slopes = np.diff(ys) / np.diff(xs)
            idx = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(slopes) - 1)
            return slopes[idx]
        return np.zeros_like(x)
    raise ValidationError(f"unknown analytic kind {kind!r}", field="analytic")


@dataclass(frozen=True)
class StructuralParams:
    """Structural constants of the economy (all in model units)."""

    alpha: float          # Cobb-Douglas exponent, 0 < alpha < 1
    b: float              # price-sensitivity weight of the arctan price term
    gamma: float          # competition cost coefficient
    epsilon: float        # capital accumulation time scale, 0 < eps << 1
    tau: float            # repulsion strength between firms
    nu: float             # price-dividend preference weight (agent simulation)
    a_f0: float           # scale of the long-run-return drift F0
    varsigma: float       # slope proxy of the price response F1
    eta: float            # exponent of the mobility weight H(K) = K^eta
    sigma_x2: float       # firm position variance
    sigma_k2: float       # firm capital variance (within-sector spread)
    sigma_xhat2: float    # investor position variance
    sigma_khat2: float    # investor capital variance
    n_firms: int
    n_investors: int
    f2_exponent: float = 1.0       # allocation preference F2(R) = R^zeta
    include_F_correction: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError("alpha must lie in (0, 1)", field="alpha")
        for name in ("sigma_x2", "sigma_k2", "sigma_xhat2", "sigma_khat2"):
            if not getattr(self, name) > 0.0:
                raise ValidationError(f"{name} must be positive", field=name)
        for name in ("epsilon", "tau", "gamma"):
            if not getattr(self, name) > 0.0:
                raise ValidationError(f"{name} must be positive", field=name)
        for name in ("n_firms", "n_investors"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValidationError(f"{name} must be a positive integer", field=name)


@dataclass(frozen=True)
class ExpectationParams:
    """Diffusion-style response of expected returns to capital variations."""

    a0: float      # level response to d_theta K
    b_x2: float    # response to sector-Laplacian of d_theta K
    c_t: float     # response to d_theta(d_theta K); sign picks the regime
    d_t2: float    # response to d_theta^2 (d_theta K)
    f_x2: float    # self-diffusion of d_theta R in the sector direction
    h_t2: float    # self-diffusion of d_theta R in time
    u_xt: float    # cross response, sector-time, on capital
    v_xt: float    # cross response, sector-time, on returns

    def __post_init__(self):
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValidationError(f"{f.name} must be finite", field=f.name)


@dataclass(frozen=True)
class Scenario:
    grid: SectorGrid
    landscape: ReturnLandscape
    params: StructuralParams
    expectations: ExpectationParams

    def __post_init__(self):
        if len(self.landscape.r_values) != self.grid.n_sectors:
            raise ValidationError(
                "r_values length must equal n_sectors", field="r_values")

    @property
    def r(self) -> np.ndarray:
        return self.landscape.r_values

    def with_params(self, **updates) -> "Scenario":
        return replace(self, params=replace(self.params, **updates))


def landscape_derivatives(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """(grad R, laplacian R) per sector; analytic when a descriptor exists.

    Cached on the (immutable) scenario, since solvers evaluate this in
    tight loops.
    """
    cached = getattr(scenario, "_deriv_cache", None)
    if cached is not None:
        return cached
    grid = scenario.grid
    analytic = scenario.landscape.analytic
    if analytic:
        kind = analytic["kind"]
        x = grid.nodes()
        result = (evaluate_analytic(kind, analytic, grid, x, order=1),
                  evaluate_analytic(kind, analytic, grid, x, order=2))
    else:
        result = (grid_gradient(grid, scenario.r),
                  grid_laplacian(grid, scenario.r))
    object.__setattr__(scenario, "_deriv_cache", result)
    return result


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

_GRID_KEYS = ("n_sectors", "x_min", "x_max", "boundary")
_PARAM_KEYS = ("alpha", "b", "gamma", "epsilon", "tau", "nu", "a_f0", "varsigma",
               "eta", "sigma_x2", "sigma_k2", "sigma_xhat2", "sigma_khat2",
               "n_firms", "n_investors", "f2_exponent", "include_F_correction")
_EXPECT_KEYS = ("a0", "b_x2", "c_t", "d_t2", "f_x2", "h_t2", "u_xt", "v_xt")


def _parse_value(raw: str, lineno: int):
    raw = raw.strip()
    if "," in raw:
        try:
            return np.array([float(tok) for tok in raw.split(",") if tok.strip()])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: bad array {raw!r}", line=lineno) from exc
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        if raw.isdigit() or (raw.startswith("-") and raw[1:].isdigit()):
            return int(raw)
        return float(raw)
    except ValueError:
        return raw


def parse_scenario_text(text: str, name: str = "<scenario>") -> Scenario:
    sections: dict[str, dict] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            sections[current] = {}
            continue
        if "=" not in line:
            raise ParseError(f"{name} line {lineno}: expected key = value", line=lineno)
        if current is None:
            raise ParseError(f"{name} line {lineno}: key outside any section", line=lineno)
        key, _, raw_value = line.partition("=")
        sections[current][key.strip()] = _parse_value(raw_value, lineno)

    for sec in ("grid", "params", "expectations", "landscape"):
        if sec not in sections:
            raise ParseError(f"{name}: missing section [{sec}]")

    def take(section: str, keys) -> dict:
        out = {}
        for key in keys:
            if key not in sections[section]:
                raise ParseError(f"{name}: [{section}] missing key {key!r}")
            out[key] = sections[section][key]
        return out

    grid = SectorGrid(**take("grid", _GRID_KEYS))
    params = StructuralParams(**take("params", _PARAM_KEYS))
    expectations = ExpectationParams(**take("expectations", _EXPECT_KEYS))

    land = sections["landscape"]
    if "analytic" in land:
        kind = land["analytic"]
        if kind not in ANALYTIC_KINDS:
            raise ValidationError(f"unknown analytic kind {kind!r}", field="analytic")
        desc = {"kind": kind}
        desc.update({k: v for k, v in land.items() if k != "analytic"})
        r_values = evaluate_analytic(kind, desc, grid, grid.nodes(), order=0)
        landscape = ReturnLandscape(r_values=r_values, analytic=desc)
    else:
        if "r_values" not in land:
            raise ParseError(f"{name}: [landscape] needs r_values or analytic")
        r = land["r_values"]
        r = np.atleast_1d(np.asarray(r, dtype=float))
        if r.size == 1:
            r = np.full(grid.n_sectors, float(r[0]))
        landscape = ReturnLandscape(r_values=r)

    return Scenario(grid=grid, landscape=landscape, params=params,
                    expectations=expectations)


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read scenario file {path}: {exc}") from exc
    return parse_scenario_text(text, name=str(path))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, np.ndarray):
        return ", ".join(format(float(v), ".17g") for v in value)
    return str(value)


def scenario_text(scenario: Scenario) -> str:
    """Serialize back to the file format (17 significant digits)."""
    lines = ["[grid]"]
    for key in _GRID_KEYS:
        lines.append(f"{key} = {_format_value(getattr(scenario.grid, key))}")
    lines.append("")
    lines.append("[params]")
    for key in _PARAM_KEYS:
        lines.append(f"{key} = {_format_value(getattr(scenario.params, key))}")
    lines.append("")
    lines.append("[expectations]")
    for key in _EXPECT_KEYS:
        lines.append(f"{key} = {_format_value(getattr(scenario.expectations, key))}")
    lines.append("")
    lines.append("[landscape]")
    analytic = scenario.landscape.analytic
    if analytic:
        lines.append(f"analytic = {analytic['kind']}")
        for key, value in analytic.items():
            if key != "kind":
                lines.append(f"{key} = {_format_value(value)}")
    else:
        lines.append(f"r_values = {_format_value(scenario.landscape.r_values)}")
    lines.append("")
    return "\n".join(lines)


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(scenario_text(scenario))
