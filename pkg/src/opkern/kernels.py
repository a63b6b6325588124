"""Operator-valued kernels: the builtin zoo, the spec mini-grammar, and
pointwise operations (evaluation, induced scalar kernel, continuity
increments, and the two-space diagnostic form).

Sites are 1-D float arrays of domain coordinates; vectors in the ambient
space H are 1-D float arrays of length ``d``; operator values are dense
``d_out x d_in`` float matrices.  All scalars are real.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Union

import numpy as np

__all__ = [
    "KernelSpecError",
    "SpecSyntaxError",
    "SpecDomainError",
    "GaussianSpec",
    "DiagExp3Spec",
    "Rational2Spec",
    "SeparableSpec",
    "NormalizedSpec",
    "TwoSpaceSpec",
    "KernelSpec",
    "OperatorKernel",
    "parse_kernel_spec",
    "render_spec",
    "make_kernel",
    "as_site",
    "as_hvec",
    "evaluate",
    "induced_scalar",
    "continuity_increment",
    "two_space_form",
]

SYM_TOL = 1e-12


class KernelSpecError(ValueError):
    """Base class for kernel-spec parsing and validation failures."""


class SpecSyntaxError(KernelSpecError):
    """Malformed spec text; carries the character position of the fault."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


class SpecDomainError(KernelSpecError):
    """Spec parsed but a parameter violates its domain bound."""


def as_site(s) -> np.ndarray:
    """Coerce to a 1-D float coordinate array and check finiteness."""
    arr = np.atleast_1d(np.asarray(s, dtype=float))
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError("site must be a nonempty 1-D coordinate sequence")
    if not np.all(np.isfinite(arr)):
        raise ValueError("site coordinates must be finite")
    return arr


def as_hvec(a, dim: int | None = None) -> np.ndarray:
    """Coerce to a 1-D float vector in H; optionally enforce its length."""
    arr = np.atleast_1d(np.asarray(a, dtype=float))
    if arr.ndim != 1:
        raise ValueError("H-vector must be 1-D")
    if not np.all(np.isfinite(arr)):
        raise ValueError("H-vector entries must be finite")
    if dim is not None and arr.size != dim:
        raise ValueError(f"H-vector has length {arr.size}, expected {dim}")
    return arr


def _site_distance(s: np.ndarray, t: np.ndarray) -> float:
    if s.shape != t.shape:
        raise ValueError(
            f"site dimension mismatch: {s.shape[0]} vs {t.shape[0]}"
        )
    return float(np.linalg.norm(s - t))


# ---------------------------------------------------------------------------
# Spec variants


@dataclass(frozen=True)
class GaussianSpec:
    """sigma^2 * exp(-|s-t|^2 / (2 ell^2)) times the d x d identity."""

    sigma: float
    ell: float
    dim: int = 1

    name = "gauss"

    def __post_init__(self):
        if not (self.sigma > 0):
            raise SpecDomainError("sigma must be > 0")
        if not (self.ell > 0):
            raise SpecDomainError("ell must be > 0")
        if self.dim < 1:
            raise SpecDomainError("dim must be >= 1")

    @property
    def dim_h(self) -> int:
        return self.dim

    def render(self) -> str:
        return (
            f"gauss(dim={self.dim},ell={_fmt(self.ell)},"
            f"sigma={_fmt(self.sigma)})"
        )


@dataclass(frozen=True)
class DiagExp3Spec:
    """Diagonal 3x3 kernel diag(1, exp(-r), exp(-r^2)), r = |s-t|."""

    name = "diagexp3"

    @property
    def dim_h(self) -> int:
        return 3

    def render(self) -> str:
        return "diagexp3"


@dataclass(frozen=True)
class Rational2Spec:
    """2x2 kernel [[1/(1+r), 1/(1+r^2)], [1/(1+r^2), 1/(1+r)]]."""

    name = "rational2"

    @property
    def dim_h(self) -> int:
        return 2

    def render(self) -> str:
        return "rational2"


@dataclass(frozen=True)
class SeparableSpec:
    """base(s,t) * B for a scalar base spec and a fixed symmetric PSD B."""

    B: tuple  # row-major tuple-of-tuples, kept hashable
    base: "KernelSpec"

    name = "separable"

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise SpecDomainError("separable B must be square")
        if not np.all(np.isfinite(B)):
            raise SpecDomainError("separable B must be finite")
        scale = 1.0 + float(np.abs(B).max(initial=0.0))
        if float(np.abs(B - B.T).max()) > SYM_TOL * scale:
            raise SpecDomainError("separable B must be symmetric")
        eigs = np.linalg.eigvalsh(0.5 * (B + B.T))
        if eigs.min() < -1e-10 * max(eigs.max(), 1.0):
            raise SpecDomainError("separable B must be positive semi-definite")
        if self.base.dim_h != 1:
            raise SpecDomainError("separable base must have dim 1")

    @property
    def dim_h(self) -> int:
        return len(self.B)

    def render(self) -> str:
        return f"separable(B={_fmt_matrix(self.B)},base={self.base.render()})"


@dataclass(frozen=True)
class NormalizedSpec:
    """C(s)^(-1/2) K(s,t) C(t)^(-1/2) with C(s) = K(s,s) of the inner kernel."""

    inner: "KernelSpec"

    name = "normalized"

    def __post_init__(self):
        if isinstance(self.inner, TwoSpaceSpec):
            raise SpecDomainError("normalized requires a square inner kernel")

    @property
    def dim_h(self) -> int:
        return self.inner.dim_h

    def render(self) -> str:
        return f"normalized(inner={self.inner.render()})"


@dataclass(frozen=True)
class TwoSpaceSpec:
    """base(s,t) * M with M mapping H1 (dim d1) into H2 (dim d2).

    Diagnostic only: the value is rectangular and no positive definiteness
    is claimed or checked.
    """

    d1: int
    d2: int
    M: tuple  # row-major d2 x d1
    base: "KernelSpec"

    name = "twospace"

    def __post_init__(self):
        if self.d1 < 1 or self.d2 < 1:
            raise SpecDomainError("twospace dims must be >= 1")
        M = np.asarray(self.M, dtype=float)
        if M.shape != (self.d2, self.d1):
            raise SpecDomainError(
                f"twospace M must be {self.d2}x{self.d1}, got {M.shape}"
            )
        if not np.all(np.isfinite(M)):
            raise SpecDomainError("twospace M must be finite")
        if self.base.dim_h != 1:
            raise SpecDomainError("twospace base must have dim 1")

    @property
    def dim_h(self) -> int:
        # rectangular kernels report the output-space dimension
        return self.d2

    def render(self) -> str:
        return (
            f"twospace(M={_fmt_matrix(self.M)},base={self.base.render()},"
            f"d1={self.d1},d2={self.d2})"
        )


KernelSpec = Union[
    GaussianSpec,
    DiagExp3Spec,
    Rational2Spec,
    SeparableSpec,
    NormalizedSpec,
    TwoSpaceSpec,
]


def _fmt(x: float) -> str:
    if float(x) == int(x):
        return str(int(x))
    return repr(float(x))


def _fmt_matrix(rows) -> str:
    return (
        "["
        + ",".join(
            "[" + ",".join(_fmt(v) for v in row) + "]" for row in rows
        )
        + "]"
    )


# ---------------------------------------------------------------------------
# Mini-grammar parser: name(key=value,...) with nesting and [[...]] matrices


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, msg: str) -> SpecSyntaxError:
        return SpecSyntaxError(msg, self.pos)

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            raise self.error(f"expected '{ch}'")
        self.pos += 1

    def ident(self) -> str:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and (
            self.text[self.pos].isalnum() or self.text[self.pos] == "_"
        ):
            self.pos += 1
        if self.pos == start:
            raise self.error("expected identifier")
        return self.text[start : self.pos]

    def number(self) -> float:
        self.skip_ws()
        start = self.pos
        if self.peek() in "+-":
            self.pos += 1
        while self.pos < len(self.text) and (
            self.text[self.pos].isdigit() or self.text[self.pos] in ".eE+-"
        ):
            # stop '+-' unless part of an exponent
            c = self.text[self.pos]
            if c in "+-" and self.text[self.pos - 1] not in "eE":
                break
            self.pos += 1
        try:
            return float(self.text[start : self.pos])
        except ValueError:
            self.pos = start
            raise self.error("expected number") from None

    def matrix(self) -> tuple:
        self.expect("[")
        rows = []
        while True:
            self.expect("[")
            row = [self.number()]
            while self.peek() == ",":
                self.pos += 1
                row.append(self.number())
            self.expect("]")
            rows.append(tuple(row))
            if self.peek() == ",":
                self.pos += 1
                continue
            break
        self.expect("]")
        if len({len(r) for r in rows}) != 1:
            raise self.error("matrix rows have unequal lengths")
        return tuple(rows)

    def value(self):
        c = self.peek()
        if c == "[":
            return self.matrix()
        save = self.pos
        try:
            return self.number()
        except SpecSyntaxError:
            self.pos = save
        return self.spec()

    def kwargs(self) -> dict:
        out: dict = {}
        if self.peek() != "(":
            return out
        self.pos += 1
        if self.peek() == ")":
            self.pos += 1
            return out
        while True:
            key = self.ident()
            self.expect("=")
            if key in out:
                raise self.error(f"duplicate key '{key}'")
            out[key] = self.value()
            if self.peek() == ",":
                self.pos += 1
                continue
            break
        self.expect(")")
        return out

    def spec(self) -> KernelSpec:
        name = self.ident().lower()
        kw = self.kwargs()
        return _build_spec(name, kw, self)


def _take(kw: dict, parser: _Parser, key: str, required=True, default=None):
    if key not in kw:
        if required:
            raise SpecDomainError(f"missing parameter '{key}'")
        return default
    return kw.pop(key)


def _as_int(v, key: str) -> int:
    if isinstance(v, float) and v == int(v):
        return int(v)
    raise SpecDomainError(f"parameter '{key}' must be an integer")


def _build_spec(name: str, kw: dict, parser: _Parser) -> KernelSpec:
    if name in ("gauss", "gaussian"):
        sigma = _take(kw, parser, "sigma")
        ell = _take(kw, parser, "ell")
        dim = _take(kw, parser, "dim", required=False, default=1.0)
        spec = GaussianSpec(float(sigma), float(ell), _as_int(dim, "dim"))
    elif name == "diagexp3":
        spec = DiagExp3Spec()
    elif name == "rational2":
        spec = Rational2Spec()
    elif name == "separable":
        B = _take(kw, parser, "B")
        base = _take(kw, parser, "base")
        if not isinstance(B, tuple):
            raise SpecDomainError("separable B must be a matrix literal")
        spec = SeparableSpec(B, base)
    elif name == "normalized":
        inner = _take(kw, parser, "inner")
        spec = NormalizedSpec(inner)
    elif name == "twospace":
        M = _take(kw, parser, "M")
        base = _take(kw, parser, "base")
        if not isinstance(M, tuple):
            raise SpecDomainError("twospace M must be a matrix literal")
        d2 = len(M)
        d1 = len(M[0])
        d1 = _as_int(_take(kw, parser, "d1", required=False, default=float(d1)), "d1")
        d2 = _as_int(_take(kw, parser, "d2", required=False, default=float(d2)), "d2")
        spec = TwoSpaceSpec(d1, d2, M, base)
    else:
        raise parser.error(f"unknown kernel '{name}'")
    if kw:
        raise SpecDomainError(
            f"unexpected parameter(s) for '{name}': {sorted(kw)}"
        )
    return spec


def parse_kernel_spec(text: str) -> KernelSpec:
    """Parse spec text like ``gauss(sigma=1,ell=0.5,dim=3)`` into a KernelSpec.

    Whitespace insensitive; nesting allowed for ``separable``/``normalized``/
    ``twospace``; matrices are row-major ``[[a,b],[c,d]]``.  Raises
    SpecSyntaxError (with position) on malformed text and SpecDomainError
    on out-of-range parameters.
    """
    parser = _Parser(text)
    spec = parser.spec()
    parser.skip_ws()
    if parser.pos != len(text):
        raise parser.error("trailing characters after spec")
    return spec


def render_spec(spec: KernelSpec) -> str:
    """Canonical rendering: keys alphabetical, no whitespace."""
    return spec.render()


# ---------------------------------------------------------------------------
# Evaluable kernels


class OperatorKernel:
    """Evaluable form of a KernelSpec.

    Evaluation is pure and symmetric (eval(s,t) == eval(t,s)^T) for every
    square builtin variant.  The only interior mutation is the normalized
    variant's per-site memo of C(s)^(-1/2), guarded by a lock.
    """

    def __init__(self, spec: KernelSpec):
        self.spec = spec
        self.dim_h = spec.dim_h
        if isinstance(spec, TwoSpaceSpec):
            self.dim_out, self.dim_in = spec.d2, spec.d1
        else:
            self.dim_out = self.dim_in = spec.dim_h
        self._inner: OperatorKernel | None = None
        self._base: OperatorKernel | None = None
        if isinstance(spec, NormalizedSpec):
            self._inner = OperatorKernel(spec.inner)
            self._memo: dict[bytes, np.ndarray] = {}
            self._lock = threading.Lock()
        if isinstance(spec, (SeparableSpec, TwoSpaceSpec)):
            self._base = OperatorKernel(spec.base)

    @property
    def is_square(self) -> bool:
        return self.dim_out == self.dim_in

    def __call__(self, s, t) -> np.ndarray:
        return self.eval(as_site(s), as_site(t))

    def eval(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        spec = self.spec
        if isinstance(spec, GaussianSpec):
            r2 = float(np.sum((s - t) ** 2))
            val = spec.sigma**2 * math.exp(-r2 / (2.0 * spec.ell**2))
            return val * np.eye(spec.dim)
        if isinstance(spec, DiagExp3Spec):
            r = _site_distance(s, t)
            return np.diag([1.0, math.exp(-r), math.exp(-r * r)])
        if isinstance(spec, Rational2Spec):
            r = _site_distance(s, t)
            f = 1.0 / (1.0 + r)
            g = 1.0 / (1.0 + r * r)
            return np.array([[f, g], [g, f]])
        if isinstance(spec, SeparableSpec):
            scalar = float(self._base.eval(s, t)[0, 0])
            return scalar * np.asarray(spec.B, dtype=float)
        if isinstance(spec, NormalizedSpec):
            ws = self._inv_sqrt_at(s)
            wt = self._inv_sqrt_at(t)
            return ws @ self._inner.eval(s, t) @ wt
        if isinstance(spec, TwoSpaceSpec):
            scalar = float(self._base.eval(s, t)[0, 0])
            return scalar * np.asarray(spec.M, dtype=float)
        raise TypeError(f"unknown spec type {type(spec)!r}")

    def _inv_sqrt_at(self, s: np.ndarray) -> np.ndarray:
        key = s.tobytes()
        with self._lock:
            cached = self._memo.get(key)
        if cached is not None:
            return cached
        C = self._inner.eval(s, s)
        C = 0.5 * (C + C.T)
        eigval, eigvec = np.linalg.eigh(C)
        if eigval.min() < 1e-12 * max(eigval.max(), 0.0) or eigval.max() <= 0:
            raise ValueError(
                f"normalized kernel: K(s,s) not invertible at site {s.tolist()}"
            )
        W = (eigvec / np.sqrt(eigval)) @ eigvec.T
        with self._lock:
            self._memo[key] = W
        return W


def make_kernel(spec_or_text) -> OperatorKernel:
    """Build an OperatorKernel from a KernelSpec or spec text."""
    if isinstance(spec_or_text, str):
        return OperatorKernel(parse_kernel_spec(spec_or_text))
    return OperatorKernel(spec_or_text)


# ---------------------------------------------------------------------------
# Pointwise operations


def evaluate(kernel: OperatorKernel, s, t) -> np.ndarray:
    """Return K(s,t) as a dense matrix."""
    return kernel(s, t)


def induced_scalar(kernel: OperatorKernel, s, a, t, b) -> float:
    """The induced scalar kernel value a^T K(s,t) b (square kernels only)."""
    if not kernel.is_square:
        raise ValueError("induced scalar kernel requires a square kernel")
    a = as_hvec(a, kernel.dim_h)
    b = as_hvec(b, kernel.dim_h)
    return float(a @ kernel(s, t) @ b)


def continuity_increment(kernel: OperatorKernel, s, t, a) -> float:
    """Squared increment |V_s a - V_t a|^2 in the induced RKHS.

    Computed exactly as a^T (K(s,s) - K(s,t) - K(t,s) + K(t,t)) a, with
    roundoff in [-1e-12, 0) clamped to zero.
    """
    if not kernel.is_square:
        raise ValueError("continuity increment requires a square kernel")
    a = as_hvec(a, kernel.dim_h)
    s = as_site(s)
    t = as_site(t)
    M = kernel.eval(s, s) - kernel.eval(s, t) - kernel.eval(t, s) + kernel.eval(t, t)
    val = float(a @ M @ a)
    if -1e-12 <= val < 0.0:
        return 0.0
    return val


def two_space_form(kernel: OperatorKernel, s, a, b, t, c, dvec):
    """Diagnostic bilinear form for the rectangular twospace variant.

    Returns ``(value, hermitian_defect)`` where value = b^T K(s,t) a and the
    defect is |b^T K(s,t) a - d^T K(t,s) c|, i.e. the same form evaluated
    with the two (site, H1-vector, H2-vector) triples swapped.  The (c, d)
    arguments enter only through the swapped evaluation; no positive
    definiteness is claimed.
    """
    if not isinstance(kernel.spec, TwoSpaceSpec):
        raise ValueError("two_space_form requires the twospace variant")
    d1, d2 = kernel.dim_in, kernel.dim_out
    a = as_hvec(a, d1)
    b = as_hvec(b, d2)
    c = as_hvec(c, d1)
    dvec = as_hvec(dvec, d2)
    s = as_site(s)
    t = as_site(t)
    value = float(b @ kernel.eval(s, t) @ a)
    swapped = float(dvec @ kernel.eval(t, s) @ c)
    return value, abs(value - swapped)
