"""Block Gram matrices: assembly, PSD certification, Cholesky with a jitter
ladder, and spectral-decay diagnostics, plus CSV/JSON export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .kernels import OperatorKernel, as_site

__all__ = [
    "GramError",
    "IndefiniteMatrixError",
    "SpectrumReport",
    "BlockGram",
    "assemble_gram",
    "psd_check",
    "factorize",
    "spectral_decay_profile",
    "gram_to_csv",
    "spectrum_to_json_dict",
]

DEFAULT_SIZE_CAP = 5000
RECON_TOL = 1e-8
PSD_EIG_TOL = 1e-10
EFFECTIVE_RANK_TOLS = (1e-2, 1e-4, 1e-6, 1e-8)


class GramError(ValueError):
    pass


class IndefiniteMatrixError(GramError):
    """Cholesky failed within the jitter ladder; the matrix is indefinite."""


@dataclass
class SpectrumReport:
    """Full symmetric spectrum of a Gram matrix plus decay diagnostics."""

    eigenvalues: np.ndarray  # sorted nonincreasing
    lambda_max: float
    min_eig: float
    psd: bool
    effective_rank: dict[float, int]
    trace: float

    @classmethod
    def from_matrix(cls, data: np.ndarray) -> "SpectrumReport":
        if not np.all(np.isfinite(data)):
            raise GramError("matrix has non-finite entries")
        eig = np.linalg.eigvalsh(0.5 * (data + data.T))
        eig = np.sort(eig)[::-1]
        lam_max = float(eig[0])
        min_eig = float(eig[-1])
        psd = min_eig >= -PSD_EIG_TOL * max(lam_max, 1.0)
        trace = float(eig.sum())
        eff = {
            tol: effective_rank(eig, tol, trace) for tol in EFFECTIVE_RANK_TOLS
        }
        return cls(eig, lam_max, min_eig, psd, eff, trace)


def effective_rank(eigenvalues: np.ndarray, tol: float, trace=None) -> int:
    """Smallest k with spectral tail-sum beyond k at most tol * trace."""
    eig = np.asarray(eigenvalues, dtype=float)
    if trace is None:
        trace = float(eig.sum())
    tails = trace - np.cumsum(eig)
    budget = tol * trace
    for k, tail in enumerate(tails, start=1):
        if tail <= budget:
            return k
    return len(eig)


@dataclass
class BlockGram:
    """The n*d x n*d matrix with block (i,j) = K(s_i, s_j).

    ``factor`` (when present) is lower triangular with
    L L^T = data + jitter_used * I up to the reconstruction tolerance.
    """

    n: int
    d: int
    sites: list[np.ndarray]
    data: np.ndarray
    factor: np.ndarray | None = None
    jitter_used: float = 0.0
    spectrum: SpectrumReport | None = None

    def block(self, i: int, j: int) -> np.ndarray:
        d = self.d
        return self.data[i * d : (i + 1) * d, j * d : (j + 1) * d]

    @property
    def size(self) -> int:
        return self.n * self.d


def assemble_gram(
    kernel: OperatorKernel, sites, size_cap: int = DEFAULT_SIZE_CAP
) -> BlockGram:
    """Assemble the block Gram matrix of a square kernel on the given sites.

    The result is symmetrized by averaging to kill roundoff asymmetry.
    """
    if not kernel.is_square:
        raise GramError("block Gram requires a square kernel")
    site_list = [as_site(s) for s in sites]
    if not site_list:
        raise GramError("site list must be nonempty")
    n, d = len(site_list), kernel.dim_h
    if n * d > size_cap:
        raise GramError(f"Gram size {n * d} exceeds cap {size_cap}")
    G = np.empty((n * d, n * d))
    for i, si in enumerate(site_list):
        for j in range(i, n):
            blk = kernel.eval(si, site_list[j])
            G[i * d : (i + 1) * d, j * d : (j + 1) * d] = blk
            if j != i:
                G[j * d : (j + 1) * d, i * d : (i + 1) * d] = blk.T
    G = 0.5 * (G + G.T)
    return BlockGram(n=n, d=d, sites=site_list, data=G)


def psd_check(gram: BlockGram) -> SpectrumReport:
    """Full eigendecomposition with a relative PSD certificate; cached."""
    report = SpectrumReport.from_matrix(gram.data)
    gram.spectrum = report
    return report


def _jitter_ladder(gram: BlockGram):
    unit = float(np.trace(gram.data)) / gram.size
    if unit <= 0.0:
        unit = 1.0
    yield 0.0
    eps = 1e-12 * unit
    top = 1e-6 * unit
    while eps <= top * (1 + 1e-15):
        yield eps
        eps *= 10.0


def factorize(gram: BlockGram) -> BlockGram:
    """Cholesky with a jitter ladder from 0 up to 1e-6 * tr(G)/(nd).

    On success stores the lower factor and the jitter actually used; raises
    IndefiniteMatrixError when the whole ladder fails.
    """
    G = gram.data
    scale = 1.0 + float(np.abs(G).max())
    eye = np.eye(gram.size)
    for eps in _jitter_ladder(gram):
        target = G + eps * eye
        try:
            L = np.linalg.cholesky(target)
        except np.linalg.LinAlgError:
            continue
        if float(np.abs(L @ L.T - target).max()) <= RECON_TOL * scale:
            gram.factor = L
            gram.jitter_used = eps
            return gram
    raise IndefiniteMatrixError(
        "matrix not factorizable within the jitter ladder (indefinite)"
    )


def spectral_decay_profile(
    kernel: OperatorKernel, site_counts, domain=(0.0, 1.0)
) -> list[SpectrumReport]:
    """Spectra of Grams on nested equispaced grids of increasing size.

    Grids include both endpoints; decay of the spectra as the grid grows is
    the finite-size signature of a compact induced operator.
    """
    counts = [int(c) for c in site_counts]
    if not counts:
        raise GramError("site_counts must be nonempty")
    if any(c < 1 for c in counts):
        raise GramError("site counts must be positive")
    if sorted(counts) != counts:
        raise GramError("site_counts must be increasing")
    a, b = float(domain[0]), float(domain[1])
    reports = []
    for c in counts:
        grid = np.linspace(a, b, c)
        g = assemble_gram(kernel, [np.array([x]) for x in grid])
        reports.append(psd_check(g))
    return reports


# ---------------------------------------------------------------------------
# Export


def gram_to_csv(gram: BlockGram, path) -> None:
    """Row-major CSV with a header row carrying n, d and the site list."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        sites_repr = ";".join(
            ",".join(repr(float(v)) for v in s) for s in gram.sites
        )
        writer.writerow(["# n", gram.n, "d", gram.d, "sites", sites_repr])
        for row in gram.data:
            writer.writerow([repr(float(v)) for v in row])


def spectrum_to_json_dict(gram: BlockGram) -> dict:
    """JSON-ready spectrum report for a Gram (runs psd_check if needed)."""
    report = gram.spectrum or psd_check(gram)
    return {
        "n": gram.n,
        "d": gram.d,
        "sites": [list(map(float, s)) for s in gram.sites],
        "jitter_used": gram.jitter_used,
        "eigenvalues": [float(v) for v in report.eigenvalues],
        "min_eig": report.min_eig,
        "psd": report.psd,
        "effective_rank": {
            repr(tol): k for tol, k in report.effective_rank.items()
        },
    }
