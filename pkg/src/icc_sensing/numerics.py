"""
Seeded random streams and the complex linear algebra the other modules share.

Every Monte Carlo quantity in the toolkit is drawn through an ``RngStream``:
a stream is identified by ``(master_seed, stream_id, lane)`` and its sequence
depends on nothing else, so trials can be generated in any order or on any
number of threads and still reproduce bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .errors import ConvergenceError, NotHermitianError, NotPositiveSemidefiniteError

logger = logging.getLogger(__name__)

HERMITIAN_RTOL = 1e-12
PSD_PIVOT_TOL = 1e-10
JACOBI_TOL = 1e-13
JACOBI_SKIP = 1e-18
JACOBI_MAX_SWEEPS = 64


@dataclass
class RngStream:
    """Deterministic random stream keyed by seed, stream id and lane.

    ``lane`` separates independent uses of the same stream id (for example the
    calibration and evaluation draws of one trial index). ``counter`` counts the
    variates consumed so far.
    """

    master_seed: int
    stream_id: int = 0
    lane: tuple[int, ...] = ()
    counter: int = 0
    _generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        sequence = np.random.SeedSequence(
            entropy=self.master_seed, spawn_key=(self.stream_id, *self.lane)
        )
        self._generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, *keys: int) -> RngStream:
        """Return an independent stream nested under this one."""
        return RngStream(self.master_seed, self.stream_id, (*self.lane, *keys))

    def complex_normal(self, shape: int | tuple[int, ...] = ()) -> np.ndarray:
        """Standard CSCG variates: real and imaginary parts each of variance 1/2."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        pair = self._generator.standard_normal((2, *shape))
        self.counter += pair.size
        return (pair[0] + 1j * pair[1]) / np.sqrt(2.0)

    def normal(self, shape: int | tuple[int, ...] = ()) -> np.ndarray:
        values = self._generator.standard_normal(shape)
        self.counter += np.size(values)
        return values

    def uniform(self, low: float = 0.0, high: float = 1.0, shape: int | tuple[int, ...] = ()):
        values = self._generator.uniform(low, high, shape)
        self.counter += np.size(values)
        return values

    def permutation(self, n: int) -> np.ndarray:
        self.counter += n
        return self._generator.permutation(n)


def is_hermitian(a: np.ndarray, rtol: float = HERMITIAN_RTOL) -> bool:
    """Check max|A - A^H| <= rtol * max|A|."""
    a = np.asarray(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        return False
    scale = np.max(np.abs(a)) if a.size else 0.0
    return bool(np.max(np.abs(a - np.conj(np.swapaxes(a, -1, -2))), initial=0.0) <= rtol * scale)


def _require_hermitian(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise NotHermitianError(f"expected a non-empty square matrix, got shape {a.shape}")
    if not is_hermitian(a):
        raise NotHermitianError("matrix is not Hermitian")
    return a


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower-triangular factor L with L @ L^H = a for Hermitian PSD input.

    Pivots in ``[-PSD_PIVOT_TOL * max(1, max|a|), 0]`` are clamped to zero so
    numerically semi-definite covariances factor cleanly.

    Raises:
        NotPositiveSemidefiniteError: at the first pivot below the tolerance.
    """
    a = _require_hermitian(a)
    m = a.shape[0]
    tolerance = PSD_PIVOT_TOL * max(1.0, float(np.max(np.abs(a))))
    lower = np.zeros_like(a)
    for j in range(m):
        pivot = float((a[j, j] - np.vdot(lower[j, :j], lower[j, :j])).real)
        if pivot < -tolerance:
            raise NotPositiveSemidefiniteError(j, pivot)
        if pivot <= 0.0:
            continue
        diagonal = np.sqrt(pivot)
        lower[j, j] = diagonal
        lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j].conj()) / diagonal
    return lower


def sample_cscg(
    stream: RngStream,
    mean: np.ndarray,
    cov: np.ndarray,
    size: int | tuple[int, ...] = (),
) -> np.ndarray:
    """Draw ``mean + L w`` with L the Cholesky factor of ``cov`` and w ~ CN(0, I).

    Args:
        stream: Random stream advanced by the draw.
        mean: Complex mean vector of length M.
        cov: Hermitian PSD M x M covariance.
        size: Leading batch shape; the result has shape ``(*size, M)``.
    """
    mean = np.asarray(mean, dtype=np.complex128)
    factor = cholesky(cov)
    batch = (size,) if isinstance(size, int) else tuple(size)
    w = stream.complex_normal((*batch, factor.shape[0]))
    return mean + w @ factor.T


def hermitian_eig(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a Hermitian matrix by cyclic complex Jacobi rotations.

    Returns:
        Eigenvalues sorted descending and the unitary matrix of eigenvectors
        (columns), so that ``a = V diag(w) V^H``.

    Raises:
        NotHermitianError: input is not Hermitian.
        ConvergenceError: off-diagonal mass remains after ``JACOBI_MAX_SWEEPS``.
    """
    work = _require_hermitian(a).copy()
    m = work.shape[0]
    vectors = np.eye(m, dtype=np.complex128)
    total = float(np.linalg.norm(work))
    negligible = JACOBI_SKIP * total

    def off_norm() -> float:
        return float(np.linalg.norm(work - np.diag(np.diag(work))))

    for _ in range(JACOBI_MAX_SWEEPS):
        if off_norm() <= JACOBI_TOL * total:
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = work[p, q]
                magnitude = abs(apq)
                if magnitude <= negligible:
                    continue
                phase = apq / magnitude
                theta = (work[q, q].real - work[p, p].real) / (2.0 * magnitude)
                t = 1.0 / (abs(theta) + np.hypot(1.0, theta))
                if theta < 0:
                    t = -t
                c = 1.0 / np.hypot(1.0, t)
                s = t * c
                # U = D P with D_qq = conj(phase); columns first, then rows.
                col_p = work[:, p].copy()
                col_q = work[:, q].copy()
                work[:, p] = c * col_p - s * np.conj(phase) * col_q
                work[:, q] = s * col_p + c * np.conj(phase) * col_q
                row_p = work[p, :].copy()
                row_q = work[q, :].copy()
                work[p, :] = c * row_p - s * phase * row_q
                work[q, :] = s * row_p + c * phase * row_q
                work[p, q] = work[q, p] = 0.0
                work[p, p] = work[p, p].real
                work[q, q] = work[q, q].real
                vec_p = vectors[:, p].copy()
                vec_q = vectors[:, q].copy()
                vectors[:, p] = c * vec_p - s * np.conj(phase) * vec_q
                vectors[:, q] = s * vec_p + c * np.conj(phase) * vec_q
    else:
        residual = off_norm()
        if residual > JACOBI_TOL * total:
            raise ConvergenceError(JACOBI_MAX_SWEEPS, residual)

    eigenvalues = np.diag(work).real
    order = np.argsort(eigenvalues, kind="stable")[::-1]
    return eigenvalues[order], vectors[:, order]


def hermitian_eigvalsh(rs: np.ndarray) -> np.ndarray:
    """Batched eigenvalues (descending) of a stack of Hermitian matrices via LAPACK."""
    return np.linalg.eigvalsh(np.asarray(rs, dtype=np.complex128))[..., ::-1]


def q_function(x):
    """Gaussian tail probability Q(x) = 0.5 * erfc(x / sqrt(2))."""
    return 0.5 * special.erfc(np.asarray(x, dtype=float) / np.sqrt(2.0))


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Spearman rank correlation of two equal-length samples."""
    return float(stats.spearmanr(a, b).statistic)


def ranks_identical(a: np.ndarray, b: np.ndarray) -> bool:
    """True when both samples induce exactly the same ranking."""
    return bool(np.array_equal(stats.rankdata(a), stats.rankdata(b)))
