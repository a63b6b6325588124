"""Finite-span realization of the RKHS induced by an operator-valued kernel.

A context freezes a (kernel, site list) pair; elements are coefficient
vectors over the kernel sections at those sites, with the Gram matrix
supplying the inner product.  On top of that live the feature operators,
their adjoints, frame projections, transformed families, chain
compositions, the orthonormal (Mercer-style) expansion, and a seeded
identity-verification suite.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .gram import BlockGram, assemble_gram, psd_check
from .kernels import OperatorKernel, as_hvec, as_site, continuity_increment, render_spec

__all__ = [
    "RkhsContext",
    "RkhsElement",
    "TransformFamily",
    "IdentityReport",
    "make_context",
    "section",
    "inner_product",
    "evaluate_element",
    "feature_embed",
    "feature_adjoint",
    "covariance",
    "frame_projection",
    "transformed_embed",
    "transformed_adjoint",
    "chain_apply",
    "onb_expansion",
    "verify_identities",
    "element_to_json_dict",
]

DEFAULT_NULL_TOL = 1e-10
DEFAULT_SEED = 0x5EED


@dataclass
class RkhsContext:
    """A frozen (kernel, sites) pair with its PSD-certified Gram."""

    kernel: OperatorKernel
    sites: list[np.ndarray]
    gram: BlockGram
    null_tol: float = DEFAULT_NULL_TOL

    @property
    def n(self) -> int:
        return self.gram.n

    @property
    def d(self) -> int:
        return self.gram.d

    @property
    def size(self) -> int:
        return self.gram.size

    def context_hash(self) -> str:
        h = hashlib.sha256()
        h.update(render_spec(self.kernel.spec).encode())
        for s in self.sites:
            h.update(s.tobytes())
        h.update(self.gram.data.tobytes())
        return h.hexdigest()[:16]


@dataclass
class RkhsElement:
    """A coefficient vector over the kernel sections of one context.

    Equality is modulo the null space of G: two elements agree when their
    G-distance is below null_tol scaled by their G-norms.
    """

    context: RkhsContext
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float).reshape(-1)
        if self.coeffs.size != self.context.size:
            raise ValueError(
                f"coefficient length {self.coeffs.size} != n*d = {self.context.size}"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("coefficients must be finite")

    def g_norm(self) -> float:
        return float(np.sqrt(max(inner_product(self, self), 0.0)))

    def g_distance(self, other: "RkhsElement") -> float:
        diff = RkhsElement(self.context, self.coeffs - other.coeffs)
        return diff.g_norm()

    def is_equal(self, other: "RkhsElement") -> bool:
        tol = self.context.null_tol * (1.0 + self.g_norm() + other.g_norm())
        return self.g_distance(other) <= tol

    def block(self, i: int) -> np.ndarray:
        d = self.context.d
        return self.coeffs[i * d : (i + 1) * d]


@dataclass
class TransformFamily:
    """One bounded d x d transform per context site."""

    context: RkhsContext
    mats: list[np.ndarray]

    def __post_init__(self):
        d = self.context.d
        if len(self.mats) != self.context.n:
            raise ValueError("need one transform per site")
        self.mats = [np.asarray(m, dtype=float) for m in self.mats]
        for m in self.mats:
            if m.shape != (d, d) or not np.all(np.isfinite(m)):
                raise ValueError(f"transforms must be finite {d}x{d} matrices")

    def is_unitary(self, tol: float = 1e-10) -> bool:
        eye = np.eye(self.context.d)
        return all(
            float(np.abs(m.T @ m - eye).max()) <= tol for m in self.mats
        )


def make_context(
    kernel: OperatorKernel,
    sites,
    null_tol: float = DEFAULT_NULL_TOL,
    raw_data: np.ndarray | None = None,
) -> RkhsContext:
    """Assemble and PSD-certify the Gram, then freeze the context.

    ``raw_data`` substitutes an externally supplied Gram matrix (for fault
    injection and raw-matrix workflows); it still must pass the PSD check.
    """
    gram = assemble_gram(kernel, sites)
    if raw_data is not None:
        raw = np.asarray(raw_data, dtype=float)
        if raw.shape != gram.data.shape:
            raise ValueError(
                f"raw Gram shape {raw.shape} != expected {gram.data.shape}"
            )
        gram.data = 0.5 * (raw + raw.T)
    report = psd_check(gram)
    if not report.psd:
        raise ValueError(
            f"Gram is not PSD (min_eig = {report.min_eig:.3e}); cannot build context"
        )
    return RkhsContext(kernel=kernel, sites=gram.sites, gram=gram, null_tol=null_tol)


def _check_index(ctx: RkhsContext, i: int) -> None:
    if not 0 <= i < ctx.n:
        raise IndexError(f"site index {i} out of range [0, {ctx.n})")


def _same_context(x: RkhsElement, y) -> None:
    ctx = y.context if isinstance(y, RkhsElement) else y
    if x.context is not ctx:
        raise ValueError("elements belong to different contexts")


def zero_element(ctx: RkhsContext) -> RkhsElement:
    return RkhsElement(ctx, np.zeros(ctx.size))


def section(ctx: RkhsContext, i: int, a) -> RkhsElement:
    """The kernel section at site i in direction a: coefficients e_i (x) a."""
    _check_index(ctx, i)
    a = as_hvec(a, ctx.d)
    coeffs = np.zeros(ctx.size)
    coeffs[i * ctx.d : (i + 1) * ctx.d] = a
    return RkhsElement(ctx, coeffs)


def inner_product(x: RkhsElement, y: RkhsElement) -> float:
    """G-inner product x^T G y; tiny negative self-products clamp to 0."""
    _same_context(x, y)
    val = float(x.coeffs @ x.context.gram.data @ y.coeffs)
    if x is y or np.array_equal(x.coeffs, y.coeffs):
        if -1e-12 <= val < 0.0:
            return 0.0
    return val


def evaluate_element(x: RkhsElement, t, a) -> float:
    """Pointwise evaluation sum_j a^T K(t, s_j) c_j; t may be off-grid."""
    ctx = x.context
    a = as_hvec(a, ctx.d)
    t = as_site(t)
    total = 0.0
    for j, sj in enumerate(ctx.sites):
        total += float(a @ ctx.kernel.eval(t, sj) @ x.block(j))
    return total


def feature_embed(ctx: RkhsContext, i: int, a) -> RkhsElement:
    """V_i a: the section at site i in direction a."""
    return section(ctx, i, a)


def feature_adjoint(ctx: RkhsContext, i: int, x: RkhsElement) -> np.ndarray:
    """V_i^* x: block i of G c, an H-vector; on a section (j,b) this is
    K(s_i, s_j) b."""
    _same_context(x, ctx)
    _check_index(ctx, i)
    d = ctx.d
    return (ctx.gram.data @ x.coeffs)[i * d : (i + 1) * d]


def covariance(ctx: RkhsContext, i: int) -> np.ndarray:
    """The covariance operator K(s_i, s_i) on H."""
    _check_index(ctx, i)
    return ctx.gram.block(i, i).copy()


def frame_projection(ctx: RkhsContext, i: int, x: RkhsElement) -> RkhsElement:
    """V_i V_i^* x: the section at i in direction block i of G c."""
    vec = feature_adjoint(ctx, i, x)
    return section(ctx, i, vec)


def transformed_embed(fam: TransformFamily, i: int, a) -> RkhsElement:
    """W_i a = section(i, B_i a)."""
    ctx = fam.context
    _check_index(ctx, i)
    a = as_hvec(a, ctx.d)
    return section(ctx, i, fam.mats[i] @ a)


def transformed_adjoint(fam: TransformFamily, i: int, x: RkhsElement) -> np.ndarray:
    """W_i^* x = B_i^T (G c)_i."""
    ctx = fam.context
    _same_context(x, ctx)
    _check_index(ctx, i)
    return fam.mats[i].T @ feature_adjoint(ctx, i, x)


def chain_apply(fam: TransformFamily, indices, x: RkhsElement) -> RkhsElement:
    """Apply the operator product (W_{i1} W_{i1}^*) ... (W_{ik} W_{ik}^*).

    The factors are composed literally, rightmost first, each one being
    c -> e_i (x) (B_i B_i^T (G c)_i).
    """
    ctx = fam.context
    _same_context(x, ctx)
    idx = list(indices)
    if not idx:
        raise ValueError("index sequence must be nonempty")
    for i in idx:
        _check_index(ctx, i)
    out = x
    for i in reversed(idx):
        vec = fam.mats[i] @ transformed_adjoint(fam, i, out)
        out = section(ctx, i, vec)
    return out


def onb_expansion(ctx: RkhsContext, trunc_tol: float) -> list[RkhsElement]:
    """G-orthonormal basis elements from the Gram eigenpairs.

    Eigenpairs (lam, u) with lam > trunc_tol * lam_max yield elements with
    coefficients u / sqrt(lam); the pointwise products of the returned
    family reproduce the induced scalar kernel on grid pairs up to the
    truncated tail.
    """
    report = ctx.gram.spectrum or psd_check(ctx.gram)
    lam_max = report.lambda_max
    eigval, eigvec = np.linalg.eigh(ctx.gram.data)
    order = np.argsort(eigval)[::-1]
    basis = []
    for k in order:
        lam = eigval[k]
        if lam > trunc_tol * lam_max:
            basis.append(RkhsElement(ctx, eigvec[:, k] / np.sqrt(lam)))
    if not basis:
        raise ValueError("expansion is empty: all eigenvalues truncated")
    return basis


# ---------------------------------------------------------------------------
# Identity verification


@dataclass
class IdentityReport:
    """Per-identity max residuals against their tolerances."""

    results: dict[str, dict]

    @property
    def all_pass(self) -> bool:
        return all(r["pass"] for r in self.results.values())

    def to_json_dict(self) -> dict:
        return {
            name: {
                "max_residual": r["max_residual"],
                "tolerance": r["tolerance"],
                "pass": bool(r["pass"]),
            }
            for name, r in self.results.items()
        }

    def table(self) -> str:
        width = max(len(n) for n in self.results)
        lines = [
            f"{'identity':<{width}}  {'max residual':>13}  {'tolerance':>10}  status"
        ]
        for name, r in self.results.items():
            status = "pass" if r["pass"] else "FAIL"
            lines.append(
                f"{name:<{width}}  {r['max_residual']:>13.3e}  "
                f"{r['tolerance']:>10.1e}  {status}"
            )
        return "\n".join(lines)


def _dense_w_projection(fam: TransformFamily, i: int) -> np.ndarray:
    """The nd x nd coefficient-space matrix of W_i W_i^*."""
    ctx = fam.context
    n, d = ctx.n, ctx.d
    S = np.zeros((d, n * d))
    S[:, i * d : (i + 1) * d] = np.eye(d)
    B = fam.mats[i]
    return S.T @ (B @ B.T) @ S @ ctx.gram.data


def _is_normalized(ctx: RkhsContext, tol: float = 1e-10) -> bool:
    eye = np.eye(ctx.d)
    return all(
        float(np.abs(ctx.gram.block(i, i) - eye).max()) <= tol
        for i in range(ctx.n)
    )


def verify_identities(
    ctx: RkhsContext,
    fam: TransformFamily | None = None,
    trials: int = 100,
    seed: int = DEFAULT_SEED,
) -> IdentityReport:
    """Run the identity suite on seeded random inputs.

    Residuals are scale-normalized; failures are reported, never raised.
    Normalization-dependent identities (isometry, projection laws) run only
    when K(s,s) = I on the context sites; the W-block runs only when a
    transform family is supplied.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    G = ctx.gram.data
    n, d = ctx.n, ctx.d
    kernel = ctx.kernel
    scale = 1.0 + float(np.abs(G).max())

    res: dict[str, float] = {}

    def record(name: str, value: float):
        res[name] = max(res.get(name, 0.0), value)

    # Structural check against fresh kernel evaluations: catches injected
    # Gram corruption that every G-internal identity would miss.
    worst = 0.0
    for i in range(n):
        for j in range(n):
            worst = max(
                worst,
                float(
                    np.abs(
                        ctx.gram.block(i, j) - kernel.eval(ctx.sites[i], ctx.sites[j])
                    ).max()
                ),
            )
    record("factorization_consistency", worst / scale)

    normalized = _is_normalized(ctx)
    for i in range(n):
        Sigma = covariance(ctx, i)
        lam = np.linalg.eigvalsh(0.5 * (Sigma + Sigma.T))
        sym_defect = float(np.abs(Sigma - Sigma.T).max()) / scale
        neg = max(0.0, -float(lam.min())) / max(float(lam.max()), 1.0)
        record("covariance_selfadjoint_psd", max(sym_defect, neg))
        # factorization: G block (i,j) = V_i^* V_j on the basis
        for j in range(n):
            basis_img = np.column_stack(
                [
                    feature_adjoint(ctx, i, feature_embed(ctx, j, e))
                    for e in np.eye(d)
                ]
            )
            record(
                "factorization",
                float(np.abs(basis_img - ctx.gram.block(i, j)).max()) / scale,
            )

    op_norms = [
        float(np.linalg.eigvalsh(covariance(ctx, i)).max()) for i in range(n)
    ]

    for _ in range(trials):
        i = int(rng.integers(n))
        a = rng.standard_normal(d)
        x = RkhsElement(ctx, rng.standard_normal(n * d))
        y = RkhsElement(ctx, rng.standard_normal(n * d))
        xnorm = x.g_norm()

        # reproducing property
        for axis in range(d):
            e = np.eye(d)[axis]
            lhs = evaluate_element(x, ctx.sites[i], e)
            rhs = inner_product(section(ctx, i, e), x)
            record("reproducing", abs(lhs - rhs) / (1.0 + abs(lhs) + abs(rhs)))

        # feature norm vs covariance quadratic form
        emb = feature_embed(ctx, i, a)
        nrm2 = inner_product(emb, emb)
        quad = float(a @ covariance(ctx, i) @ a)
        record("feature_norm", abs(nrm2 - quad) / (1.0 + abs(quad)))

        # adjoint relation
        lhs = inner_product(emb, x)
        rhs = float(a @ feature_adjoint(ctx, i, x))
        record("adjoint_relation", abs(lhs - rhs) / (1.0 + abs(lhs) + abs(rhs)))

        # repaired operator-norm bound on the frame projection
        px = frame_projection(ctx, i, x)
        record(
            "norm_bound",
            max(0.0, inner_product(x, px) - op_norms[i] * xnorm**2)
            / (1.0 + xnorm**2),
        )

        if normalized:
            unit = a / np.linalg.norm(a) if np.linalg.norm(a) > 0 else a
            emb_u = feature_embed(ctx, i, unit)
            record("isometry", abs(emb_u.g_norm() - float(np.linalg.norm(unit))))
            ppx = frame_projection(ctx, i, px)
            record(
                "projection_idempotent",
                ppx.g_distance(px) / max(xnorm, 1e-300),
            )
            py = frame_projection(ctx, i, y)
            lhs = inner_product(px, y)
            rhs = inner_product(x, py)
            record(
                "projection_selfadjoint",
                abs(lhs - rhs) / (1.0 + abs(lhs) + abs(rhs)),
            )

        if fam is not None:
            j = int(rng.integers(n))
            b = rng.standard_normal(d)
            Bi, Bj = fam.mats[i], fam.mats[j]
            wemb = transformed_embed(fam, i, a)
            target = float((Bi @ a) @ ctx.gram.block(i, i) @ (Bi @ a))
            record(
                "w_norm",
                abs(inner_product(wemb, wemb) - target) / (1.0 + abs(target)),
            )
            lhs_v = transformed_adjoint(fam, i, transformed_embed(fam, j, b))
            rhs_v = Bi.T @ ctx.gram.block(i, j) @ Bj @ b
            record(
                "w_adjoint",
                float(np.abs(lhs_v - rhs_v).max()) / scale,
            )
            k = min(int(rng.integers(1, 5)), n * 2)
            idx = [int(rng.integers(n)) for _ in range(k)]
            chained = chain_apply(fam, idx, x)
            # left-to-right product applied to coeffs: P_{i1} ... P_{ik} c
            M = np.eye(n * d)
            for p in idx:
                M = M @ _dense_w_projection(fam, p)
            record(
                "w_chain",
                float(np.abs(chained.coeffs - M @ x.coeffs).max())
                / (1.0 + float(np.abs(M @ x.coeffs).max())),
            )
            if normalized and fam.is_unitary():
                unit = a / np.linalg.norm(a) if np.linalg.norm(a) > 0 else a
                wu = transformed_embed(fam, i, unit)
                record(
                    "w_isometry",
                    abs(wu.g_norm() - float(np.linalg.norm(unit))),
                )
                once = chain_apply(fam, [i], x)
                twice = chain_apply(fam, [i, i], x)
                record(
                    "w_projection_idempotent",
                    twice.g_distance(once) / max(xnorm, 1e-300),
                )

    # continuity: the G-internal increment agrees with the kernel-side one
    if n >= 1:
        for _ in range(min(trials, 20)):
            i = int(rng.integers(n))
            j = int(rng.integers(n))
            a = rng.standard_normal(d)
            diff = RkhsElement(
                ctx, section(ctx, i, a).coeffs - section(ctx, j, a).coeffs
            )
            lhs = inner_product(diff, diff)
            rhs = continuity_increment(kernel, ctx.sites[i], ctx.sites[j], a)
            record(
                "continuity_consistency",
                abs(lhs - rhs) / (1.0 + abs(lhs) + abs(rhs)),
            )

    tolerances = {
        "factorization_consistency": 1e-8,
        "covariance_selfadjoint_psd": 1e-10,
        "factorization": 1e-12,
        "reproducing": 1e-12,
        "feature_norm": 1e-12,
        "adjoint_relation": 1e-10,
        "norm_bound": 1e-10,
        "isometry": 1e-10,
        "projection_idempotent": 1e-8,
        "projection_selfadjoint": 1e-10,
        "w_norm": 1e-10,
        "w_adjoint": 1e-10,
        "w_chain": 1e-10,
        "w_isometry": 1e-10,
        "w_projection_idempotent": 1e-8,
        "continuity_consistency": 1e-12,
    }
    results = {
        name: {
            "max_residual": value,
            "tolerance": tolerances[name],
            "pass": value <= tolerances[name],
        }
        for name, value in res.items()
    }
    return IdentityReport(results)


def element_to_json_dict(x: RkhsElement) -> dict:
    return {
        "context_hash": x.context.context_hash(),
        "coeffs": [float(v) for v in x.coeffs],
    }
