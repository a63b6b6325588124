"""Seeded sampling of Hilbert-space-valued Gaussian processes whose
cross-covariances are given by the operator-valued kernel, plus empirical
covariance recovery checks and batch export."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .gram import factorize
from .rkhs import RkhsContext

__all__ = [
    "SampleBatch",
    "CovErrorReport",
    "sample_paths",
    "empirical_covariance",
    "covariance_error_report",
    "batch_to_csv",
    "batch_to_binary",
    "batch_from_binary",
]

BINARY_MAGIC = b"OPKGP1"
MC_SIGMA_FACTOR = 4.0


@dataclass
class SampleBatch:
    """N seeded zero-mean Gaussian paths over the context sites.

    ``paths`` has shape (N, n, d); regeneration with the same
    (context, seed, count) is bitwise identical.
    """

    context: RkhsContext
    seed: int
    count: int
    paths: np.ndarray

    @property
    def target_covariance(self) -> np.ndarray:
        """G + eps*I with the jitter actually used by the factorization."""
        g = self.context.gram
        return g.data + g.jitter_used * np.eye(g.size)


@dataclass
class CovErrorReport:
    max_abs_err: float
    per_block_err: np.ndarray  # n x n, max abs error within each block
    mc_tolerance: float
    pass_: bool


def _path_normals(seed: int, path_index: int, size: int) -> np.ndarray:
    """Counter-based stream: one Philox generator per (seed, path) pair."""
    bits = np.random.Philox(key=np.array([seed, path_index], dtype=np.uint64))
    return np.random.Generator(bits).standard_normal(size)


def sample_paths(ctx: RkhsContext, count: int, seed: int = 0) -> SampleBatch:
    """Draw ``count`` paths as L z with L L^T = G + eps*I.

    Factorizes the context Gram on first use (raising on indefinite
    matrices).  Each path has its own derived RNG stream, so the batch is
    reproducible regardless of execution order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    gram = ctx.gram
    if gram.factor is None:
        factorize(gram)
    L = gram.factor
    nd = gram.size
    paths = np.empty((count, nd))
    for p in range(count):
        paths[p] = L @ _path_normals(seed, p, nd)
    return SampleBatch(
        context=ctx,
        seed=int(seed),
        count=int(count),
        paths=paths.reshape(count, gram.n, gram.d),
    )


def empirical_covariance(batch: SampleBatch) -> np.ndarray:
    """Second-moment blocks C[i][j] = mean over paths of f_i f_j^T.

    No mean subtraction: the process is centered by construction.  Returns
    shape (n, n, d, d); summation order is the fixed matmul reduction, so
    results are reproducible.
    """
    n, d = batch.context.n, batch.context.d
    flat = batch.paths.reshape(batch.count, n * d)
    emp = flat.T @ flat / batch.count
    return emp.reshape(n, d, n, d).transpose(0, 2, 1, 3)


def covariance_error_report(batch: SampleBatch) -> CovErrorReport:
    """Compare the empirical covariance against G + eps*I.

    The tolerance is four standard errors of the worst entry:
    4 * max_ij sqrt((T_ii T_jj + T_ij^2) / N) for the target matrix T.
    """
    n, d = batch.context.n, batch.context.d
    target = batch.target_covariance
    emp = empirical_covariance(batch).transpose(0, 2, 1, 3).reshape(n * d, n * d)
    err = np.abs(emp - target)
    diag = np.diag(target)
    var = np.outer(diag, diag) + target**2
    mc_tol = MC_SIGMA_FACTOR * float(np.sqrt(var.max() / batch.count))
    per_block = err.reshape(n, d, n, d).max(axis=(1, 3))
    max_err = float(err.max())
    return CovErrorReport(
        max_abs_err=max_err,
        per_block_err=per_block,
        mc_tolerance=mc_tol,
        pass_=max_err <= mc_tol,
    )


# ---------------------------------------------------------------------------
# Export


def batch_to_csv(batch: SampleBatch, path) -> None:
    """One row per path, n*d columns; header embeds seed and context hash."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "# seed",
                batch.seed,
                "count",
                batch.count,
                "context",
                batch.context.context_hash(),
            ]
        )
        for row in batch.paths.reshape(batch.count, -1):
            writer.writerow([repr(float(v)) for v in row])


def batch_to_binary(batch: SampleBatch, path) -> None:
    """Compact layout: magic OPKGP1, little-endian u64 seed, u32 N/n/d,
    then N*n*d float64 values."""
    n, d = batch.context.n, batch.context.d
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<QIII", batch.seed, batch.count, n, d))
        fh.write(batch.paths.astype("<f8").tobytes())


def batch_from_binary(path):
    """Read back (seed, paths) from the binary layout; shape (N, n, d)."""
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != BINARY_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        seed, count, n, d = struct.unpack("<QIII", fh.read(20))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != count * n * d:
        raise ValueError("truncated batch file")
    return seed, data.reshape(count, n, d)
