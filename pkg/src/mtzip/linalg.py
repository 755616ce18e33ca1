"""Dense kernels shared by the Hessian and merging code.

Everything here works in float64. Symmetric positive-definite systems are
solved through a Cholesky factorization; inverses are never formed.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

# damping ladder, as multiples of trace/dim
_DAMPING_LADDER = (1e-6, 1e-5, 1e-4, 1e-3, 1e-2)


class DegenerateMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix cannot be factorized even after damping."""


class SpdMatrix:
    """Symmetric positive semi-definite matrix with an optional diagonal damping.

    The effective operator is ``entries + damping * I``. Instances are treated
    as immutable; the Cholesky factor is computed lazily and cached.
    """

    __slots__ = ("entries", "damping", "_cho")

    def __init__(self, entries, damping: float = 0.0, *, check: bool = True):
        a = np.array(entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {a.shape}")
        if check:
            if not np.all(np.isfinite(a)):
                raise ValueError("matrix has non-finite entries")
            scale = max(np.abs(a).max(initial=0.0), 1.0)
            if np.abs(a - a.T).max(initial=0.0) > 1e-12 * scale:
                raise ValueError("matrix is not symmetric")
        if damping < 0:
            raise ValueError("damping must be nonnegative")
        self.entries = a
        self.damping = float(damping)
        self._cho = None

    @classmethod
    def zeros(cls, dim: int) -> "SpdMatrix":
        return cls(np.zeros((dim, dim)), check=False)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def damped_entries(self) -> np.ndarray:
        if self.damping == 0.0:
            return self.entries
        return self.entries + self.damping * np.eye(self.dim)

    def scaled(self, factor: float) -> "SpdMatrix":
        return SpdMatrix(self.entries * factor, self.damping * factor, check=False)

    def __add__(self, other: "SpdMatrix") -> "SpdMatrix":
        if other.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")
        return SpdMatrix(self.entries + other.entries, self.damping + other.damping, check=False)

    def submatrix(self, index) -> "SpdMatrix":
        index = np.asarray(index)
        return SpdMatrix(self.entries[np.ix_(index, index)], self.damping, check=False)

    def cholesky(self):
        """Return the cached ``cho_factor`` of the damped matrix (no escalation)."""
        if self._cho is None:
            self._cho = scipy.linalg.cho_factor(self.damped_entries(), lower=True, check_finite=False)
        return self._cho

    def __repr__(self) -> str:
        return f"SpdMatrix(dim={self.dim}, damping={self.damping:.3g})"


def _factorizes(a: np.ndarray) -> bool:
    try:
        c, _ = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return False
    return bool(np.all(np.isfinite(c)))


def ensure_factorizable(a: SpdMatrix) -> SpdMatrix:
    """Return ``a`` itself if it factorizes, else a copy with escalated damping.

    Damping starts at 1e-6 * trace/dim and grows tenfold up to 1e-2 * trace/dim.
    """
    if not np.all(np.isfinite(a.entries)):
        raise ValueError("matrix has non-finite entries")
    if _factorizes(a.damped_entries()):
        return a
    unit = np.trace(a.entries) / a.dim
    if unit > 0:
        eye = np.eye(a.dim)
        for k in _DAMPING_LADDER:
            damping = a.damping + k * unit
            if _factorizes(a.entries + damping * eye):
                return SpdMatrix(a.entries, damping, check=False)
    raise DegenerateMatrixError(
        f"matrix of dim {a.dim} is not positive definite even with damping "
        f"{_DAMPING_LADDER[-1]:g} * trace/dim (degenerate calibration data?)"
    )


def spd_solve(a: SpdMatrix, b) -> np.ndarray:
    """Solve ``(a + damping I) x = b``, escalating the damping if needed."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != a.dim:
        raise ValueError(f"dimension mismatch: matrix dim {a.dim}, rhs rows {b.shape[0]}")
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side has non-finite entries")
    a = ensure_factorizable(a)
    return scipy.linalg.cho_solve(a.cholesky(), b, check_finite=False)


def accumulate_outer(total: SpdMatrix, x) -> SpdMatrix:
    """Return ``total + x x^T``.

    ``x`` may also be a 2-D batch (one sample per row), in which case the sum of
    all outer products is added. The result is symmetrized exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    batch = x[None, :] if x.ndim == 1 else x
    if batch.shape[1] != total.dim:
        raise ValueError(f"dimension mismatch: matrix dim {total.dim}, vector length {batch.shape[1]}")
    update = batch.T @ batch
    update = 0.5 * (update + update.T)
    return SpdMatrix(total.entries + update, total.damping, check=False)


def quadratic_form(a: SpdMatrix, v) -> float:
    """``v^T a v`` (the damping term is ignored)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (a.dim,):
        raise ValueError(f"dimension mismatch: matrix dim {a.dim}, vector shape {v.shape}")
    return float(v @ a.entries @ v)


class Permutation:
    """Bijection on ``range(n)``.

    ``mapping[k]`` is the source index placed at position ``k``, so applying the
    permutation to an array ``x`` yields ``x[mapping]``.
    """

    __slots__ = ("mapping",)

    def __init__(self, mapping):
        m = np.asarray(mapping, dtype=np.int64)
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ValueError("mapping is not a bijection on 0..n-1")
        self.mapping = m

    @classmethod
    def identity(cls, n: int) -> "Permutation":
        return cls(np.arange(n))

    @classmethod
    def random(cls, n: int, rng: np.random.Generator) -> "Permutation":
        return cls(rng.permutation(n))

    def __len__(self) -> int:
        return self.mapping.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Permutation) and np.array_equal(self.mapping, other.mapping)

    def __repr__(self) -> str:
        return f"Permutation({self.mapping.tolist()})"

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.mapping.size)
        return Permutation(inv)

    def compose(self, other: "Permutation") -> "Permutation":
        """Permutation equivalent to applying ``self`` first, then ``other``."""
        return Permutation(self.mapping[other.mapping])

    def apply(self, x, axis: int = 0) -> np.ndarray:
        return np.take(np.asarray(x), self.mapping, axis=axis)
