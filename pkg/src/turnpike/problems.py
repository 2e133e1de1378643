"""Problem files (JSON) and the registry of built-in examples."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema
import numpy as np

from . import expr as ex
from .expr import VectorField
from .lq_core import LqProblem
from .ocp_model import ControlProblem, FixedConstrained, FixedFixed, FixedFree, Periodic

CUBIC_ALPHA = -1.0225539756
CIRCLE_RADIUS = 3.0


class ProblemFileError(ValueError):
    """Invalid problem input; ``location`` is a (line, column) pair or a JSON path."""

    def __init__(self, message: str, location: str = ""):
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location


@lru_cache(maxsize=1)
def schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("problem.schema.json").read_text())


def _bounds_out(values: np.ndarray) -> list:
    return [None if not np.isfinite(v) else float(v) for v in values]


def _bounds_in(values, default: float) -> np.ndarray:
    return np.array([default if v is None else float(v) for v in values], dtype=float)


def problem_to_dict(p: ControlProblem) -> dict:
    """Serializable form; expressions are printed in canonical syntax."""
    b = p.boundary
    boundary: dict = {"type": b.kind}
    if hasattr(b, "x0"):
        boundary["x0"] = b.x0.tolist()
    if isinstance(b, FixedFixed):
        boundary["x1"] = b.x1.tolist()
    if isinstance(b, FixedConstrained):
        boundary["g"] = [ex.to_string(e) for e in b.g]
    d: dict = {
        "name": p.name,
        "n": p.n,
        "m": p.m,
        "f": [ex.to_string(e) for e in p.f],
        "f0": ex.to_string(p.f0),
        "boundary": boundary,
    }
    if np.any(np.isfinite(p.lo)) or np.any(np.isfinite(p.hi)):
        d["omega"] = {"lo": _bounds_out(p.lo), "hi": _bounds_out(p.hi)}
    if p.lq is not None:
        q = p.lq
        d["lq"] = {k: np.asarray(getattr(q, k)).tolist() for k in ("A", "B", "Q", "U")}
        d["lq"]["xd"] = np.asarray(q.xd).tolist()
        d["lq"]["ud"] = np.asarray(q.ud).tolist()
    if p.options:
        d["options"] = dict(p.options)
    return d


def _boundary_from_dict(d: dict, n: int, m: int):
    kind = d["type"]
    if kind == "fixed_fixed":
        return FixedFixed(d["x0"], d["x1"])
    if kind == "fixed_free":
        return FixedFree(d["x0"])
    if kind == "fixed_constrained":
        return FixedConstrained(d["x0"], VectorField.parse(d["g"], n, m))
    return Periodic()


def problem_from_dict(d: dict) -> ControlProblem:
    """Validate against the schema and build the problem."""
    try:
        jsonschema.validate(d, schema())
    except jsonschema.ValidationError as exc:
        path = "$" + "".join(f"[{p!r}]" if isinstance(p, int) else f".{p}" for p in exc.absolute_path)
        raise ProblemFileError(exc.message, path) from None
    n, m = d["n"], d["m"]
    if len(d["f"]) != n:
        raise ProblemFileError(f"expected {n} dynamics components, got {len(d['f'])}", "$.f")
    try:
        boundary = _boundary_from_dict(d["boundary"], n, m)
        lo = hi = None
        if "omega" in d:
            lo = _bounds_in(d["omega"]["lo"], -np.inf)
            hi = _bounds_in(d["omega"]["hi"], np.inf)
        lq = None
        if "lq" in d:
            q = d["lq"]
            lq = LqProblem(q["A"], q["B"], q["Q"], q["U"], q["xd"], q["ud"])
        return ControlProblem.from_text(
            d["f"], d["f0"], n, m, boundary, lo=lo, hi=hi, name=d.get("name", ""), lq=lq, options=dict(d.get("options", {}))
        )
    except ex.ExpressionError as exc:
        raise ProblemFileError(str(exc), "expression") from None
    except ValueError as exc:
        raise ProblemFileError(str(exc)) from None


def loads(text: str) -> ControlProblem:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFileError(exc.msg, f"line {exc.lineno}, column {exc.colno}") from None
    return problem_from_dict(d)


def dumps(p: ControlProblem) -> str:
    return json.dumps(problem_to_dict(p), indent=2, sort_keys=True) + "\n"


def load(path) -> ControlProblem:
    with open(path) as fh:
        return loads(fh.read())


# ---------------------------------------------------------------------------
# registry


def lq_scalar() -> ControlProblem:
    lq = LqProblem([[-1.0]], [[1.0]], [[1.0]], [[1.0]], [1.0], [0.0])
    p = ControlProblem.from_lq(lq, FixedFixed([0.0], [1.0]), name="lq-scalar")
    return ControlProblem(p.n, p.m, p.f, p.f0, p.boundary, name=p.name, lq=lq, options={"T": 10.0, "static_box": [[-3.0], [3.0]]})


def exa() -> ControlProblem:
    return ControlProblem.from_text(
        ["x1 - x2", "-4*x1 + x2^3 + u1"],
        "(x1 - 1)^2 + (x2 - 2)^2 + u1^2",
        2,
        1,
        FixedFixed([1.0, 2.5], [3.0, 1.5]),
        name="exa",
        options={"T": 20.0, "static_box": [[-3.0, -3.0], [3.0, 3.0]]},
    )


def circle(radius: float = CIRCLE_RADIUS) -> ControlProblem:
    s = "(x1^2 + x2^2)"
    phi = f"smoothstep{s}"
    f0 = f"{phi}*((x1 - 1)^2 + x2^2) + (1 - {phi})*({s} - {radius * radius!r})^2 + u1^2"
    return ControlProblem.from_text(
        ["x2", "-x1 + u1"],
        f0,
        2,
        1,
        FixedFixed([-0.5, 0.0], [1.0, 0.0]),
        name="circle",
        options={"T": 100.0, "static_box": [[-4.0, -4.0], [4.0, 4.0]], "orbit_radius": radius},
    )


def cubic1d(boundary=None, name: str = "cubic1d", T: float = 2.0) -> ControlProblem:
    return ControlProblem.from_text(
        [f"4*x1 + {CUBIC_ALPHA!r}*x1^3 + u1"],
        "(x1 - 1)^2 + u1^2",
        1,
        1,
        boundary if boundary is not None else FixedFixed([1.1], [1.0]),
        name=name,
        options={"T": T, "static_box": [[-3.0], [3.0]]},
    )


REGISTRY = {
    "lq-scalar": lq_scalar,
    "exa": exa,
    "circle": circle,
    "cubic1d": cubic1d,
    # free terminal state, started at x0 = -2 and at x0 = 2
    "cubic1d-free-neg": lambda: cubic1d(FixedFree([-2.0]), "cubic1d-free-neg", 2.3),
    "cubic1d-free-pos": lambda: cubic1d(FixedFree([2.0]), "cubic1d-free-pos", 2.3),
}


def get(name: str) -> ControlProblem:
    """Registry entry by name, or a problem file path."""
    if name in REGISTRY:
        return REGISTRY[name]()
    try:
        return load(name)
    except FileNotFoundError:
        raise ProblemFileError(f"unknown problem {name!r} (not a registry name or a file)") from None
