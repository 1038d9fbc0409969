"""Control vector fields g_1..g_m on R^d and a library of test systems."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import tomli

from .errors import ConfigError, EvaluationError
from .expr import Expression

Evaluator = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class VectorFieldSet:
    """Immutable collection of ``m`` vector fields on ``R^d``.

    Each evaluator maps points of shape ``(..., d)`` to values of shape
    ``(..., d)``. Jacobian evaluators, when present, return ``(..., d, d)``
    with ``J[..., j, k] = d g^j / d x_k``.
    """

    dimension: int
    evaluators: tuple
    jacobians: Optional[tuple] = None
    name: str = "custom"
    # Per-field component expressions, used to serialize the set as text.
    expressions: Optional[tuple] = field(default=None, compare=False)
    # (m, d) array when every field is constant in x; enables fast paths.
    constant: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.dimension < 1:
            raise ConfigError("dimension must be a positive integer")
        if self.count < 1:
            raise ConfigError("at least one vector field is required (m >= 1)")
        if self.count > self.dimension:
            raise ConfigError(f"m = {self.count} exceeds dimension d = {self.dimension}")
        if self.jacobians is not None and len(self.jacobians) != self.count:
            raise ConfigError("one Jacobian evaluator per field is required")

    @property
    def count(self) -> int:
        return len(self.evaluators)

    def field_values(self, i: int, x) -> np.ndarray:
        """Values of ``g_i`` (0-based ``i``) at points ``x``; shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.evaluators[i](x), dtype=float)
        return np.broadcast_to(out, x.shape).copy()

    def jacobian(self, i: int, x) -> np.ndarray:
        if self.jacobians is None:
            raise ConfigError(f"field set {self.name!r} has no analytic Jacobian")
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.jacobians[i](x), dtype=float)
        return np.broadcast_to(out, x.shape + (self.dimension,)).copy()


def eval_fields(F: VectorFieldSet, x) -> np.ndarray:
    """Return the ``d x m`` table whose column ``i`` is ``g_i(x)``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (F.dimension,):
        raise ConfigError(f"expected a point of dimension {F.dimension}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ConfigError(f"point {x.tolist()} is not finite")
    table = np.empty((F.dimension, F.count))
    for i in range(F.count):
        col = F.field_values(i, x)
        if not np.all(np.isfinite(col)):
            raise EvaluationError(
                f"field g_{i + 1} is not finite at x = {x.tolist()}", point=x, field=i
            )
        table[:, i] = col
    return table


def fields_at(F: VectorFieldSet, points) -> np.ndarray:
    """Vectorized evaluation: ``(P, d)`` points to ``(P, m, d)`` values."""
    points = np.asarray(points, dtype=float)
    out = np.stack([F.field_values(i, points) for i in range(F.count)], axis=-2)
    bad = ~np.isfinite(out)
    if bad.any():
        p, i, _ = np.argwhere(bad)[0]
        raise EvaluationError(
            f"field g_{i + 1} is not finite at x = {points[p].tolist()}",
            point=points[p], field=int(i),
        )
    return out


def fd_jacobian(F: VectorFieldSet, i: int, x, step: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of ``g_i`` at the points ``x``."""
    x = np.asarray(x, dtype=float)
    d = F.dimension
    J = np.empty(x.shape + (d,))
    for k in range(d):
        e = np.zeros(d)
        e[k] = step
        J[..., :, k] = (F.field_values(i, x + e) - F.field_values(i, x - e)) / (2 * step)
    return J


# Builtin systems -----------------------------------------------------------


def _const(vec):
    vec = np.asarray(vec, dtype=float)

    def g(x):
        return np.broadcast_to(vec, np.shape(x)).copy()

    def jac(x):
        return np.zeros(np.shape(x) + (len(vec),))

    return g, jac


def _heisenberg():
    def g1(x):
        out = np.zeros_like(x)
        out[..., 0] = 1.0
        out[..., 2] = -x[..., 1] / 2
        return out

    def g2(x):
        out = np.zeros_like(x)
        out[..., 1] = 1.0
        out[..., 2] = x[..., 0] / 2
        return out

    def j1(x):
        J = np.zeros(np.shape(x) + (3,))
        J[..., 2, 1] = -0.5
        return J

    def j2(x):
        J = np.zeros(np.shape(x) + (3,))
        J[..., 2, 0] = 0.5
        return J

    return (g1, g2), (j1, j2)


def _grushin():
    g1, j1 = _const([1.0, 0.0])

    def g2(x):
        out = np.zeros_like(x)
        out[..., 1] = x[..., 0]
        return out

    def j2(x):
        J = np.zeros(np.shape(x) + (2,))
        J[..., 1, 0] = 1.0
        return J

    return (g1, g2), (j1, j2)


def _unicycle():
    def g1(x):
        out = np.zeros_like(x)
        out[..., 0] = np.cos(x[..., 2])
        out[..., 1] = np.sin(x[..., 2])
        return out

    def j1(x):
        J = np.zeros(np.shape(x) + (3,))
        J[..., 0, 2] = -np.sin(x[..., 2])
        J[..., 1, 2] = np.cos(x[..., 2])
        return J

    g2, j2 = _const([0.0, 0.0, 1.0])
    return (g1, g2), (j1, j2)


def _axis(d, m):
    pairs = [_const(np.eye(d)[i]) for i in range(m)]
    return tuple(p[0] for p in pairs), tuple(p[1] for p in pairs)


# name -> (dimension, factory, component expressions)
_BUILTINS = {
    "axis2d": (2, lambda: _axis(2, 2), (("1", "0"), ("0", "1"))),
    "axis3d-degenerate": (3, lambda: _axis(3, 2), (("1", "0", "0"), ("0", "1", "0"))),
    "heisenberg": (3, _heisenberg, (("1", "0", "-x2/2"), ("0", "1", "x1/2"))),
    "grushin": (2, _grushin, (("1", "0"), ("0", "x1"))),
    "unicycle": (3, _unicycle, (("cos(x3)", "sin(x3)", "0"), ("0", "0", "1"))),
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin_fields(name: str) -> VectorFieldSet:
    """Return one of the canonical test systems by name.

    ``unicycle`` uses coordinates ``(x, y, theta)``.
    """
    try:
        d, factory, exprs = _BUILTINS[name]
    except KeyError:
        raise ConfigError(
            f"unknown builtin field set {name!r}; valid options: {', '.join(BUILTIN_NAMES)}"
        ) from None
    evaluators, jacobians = factory()
    constant = None
    if name.startswith("axis"):
        constant = np.array([[float(c) for c in comps] for comps in exprs])
    return VectorFieldSet(d, tuple(evaluators), tuple(jacobians), name=name,
                          expressions=exprs, constant=constant)


def zero_fields(dimension: int, count: int = 1) -> VectorFieldSet:
    """Identically vanishing fields; every set is invariant under their flow."""
    pairs = [_const(np.zeros(dimension)) for _ in range(count)]
    exprs = tuple(("0",) * dimension for _ in range(count))
    return VectorFieldSet(
        dimension,
        tuple(p[0] for p in pairs),
        tuple(p[1] for p in pairs),
        name="zero",
        expressions=exprs,
        constant=np.zeros((count, dimension)),
    )


# Text configuration --------------------------------------------------------


def fields_from_expressions(
    components: Sequence[Sequence[str]], dimension: int, name: str = "custom"
) -> VectorFieldSet:
    """Build a field set from per-field lists of component expressions."""
    if not isinstance(dimension, int) or isinstance(dimension, bool) or dimension < 1:
        raise ConfigError(f"dimension must be a positive integer, got {dimension!r}")
    if len(components) == 0:
        raise ConfigError("fields list is empty (m = 0)")
    evaluators, jacobians = [], []
    for i, comps in enumerate(components):
        if isinstance(comps, str) or len(comps) != dimension:
            raise ConfigError(
                f"field {i + 1} must list exactly {dimension} component expressions"
            )
        parsed = [Expression(str(c), dimension) for c in comps]

        def g(x, parsed=parsed):
            x = np.asarray(x, dtype=float)
            return np.stack([p(x) for p in parsed], axis=-1)

        grads = [p.gradient(dimension) for p in parsed]

        def jac(x, grads=grads):
            x = np.asarray(x, dtype=float)
            return np.stack(
                [np.stack([gk(x) for gk in row], axis=-1) for row in grads], axis=-2
            )

        evaluators.append(g)
        jacobians.append(jac)
    exprs = tuple(tuple(str(c) for c in comps) for comps in components)
    return VectorFieldSet(dimension, tuple(evaluators), tuple(jacobians), name=name,
                          expressions=exprs)


def parse_field_config(text: str) -> VectorFieldSet:
    """Parse a TOML field document.

    Required keys are ``dimension`` and ``fields`` (a list of lists of
    component expressions in ``x1..xd``). An optional ``count`` is checked
    against the number of fields.
    """
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"field configuration is not valid TOML: {exc}") from None
    if "dimension" not in doc or "fields" not in doc:
        raise ConfigError("field configuration needs 'dimension' and 'fields' keys")
    fields = doc["fields"]
    if "count" in doc:
        if doc["count"] == 0:
            raise ConfigError("field count m = 0 is not allowed")
        if doc["count"] != len(fields):
            raise ConfigError(
                f"declared count {doc['count']} but {len(fields)} fields were given"
            )
    return fields_from_expressions(fields, doc["dimension"], name=doc.get("name", "custom"))


def serialize_fields(F: VectorFieldSet) -> str:
    """Write ``F`` as a TOML field document accepted by parse_field_config."""
    if F.expressions is None:
        raise ConfigError(f"field set {F.name!r} has no expression form")
    lines = [
        f"name = {_toml_str(F.name)}",
        f"dimension = {F.dimension}",
        f"count = {F.count}",
        "fields = [",
    ]
    for comps in F.expressions:
        lines.append("  [" + ", ".join(_toml_str(c) for c in comps) + "],")
    lines.append("]")
    return "\n".join(lines) + "\n"


def _toml_str(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'
