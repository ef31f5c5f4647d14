"""Dense complex-matrix algebra for small spin systems.

Conventions used throughout the package:

* Spin 0 is the most significant qubit; basis index ``b`` has the bit of
  spin ``i`` at position ``n - 1 - i``.  For the default three-spin
  system the order is (H, F, C) with C least significant.
* ``|0>`` is the ground (spin-up) state, with Iz eigenvalue +1/2.
* Matrix equality is always judged with an explicit absolute tolerance,
  and unitaries are compared modulo a single global phase factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Sequence, Union

import numpy as np

HERMITICITY_TOL = 1e-12
TRACE_TOL = 1e-12
EIGENVALUE_TOL = 1e-10
UNITARITY_TOL = 1e-10
IMAG_READOUT_TOL = 1e-10

SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
IDENTITY_2 = np.eye(2, dtype=complex)

# Spin-1/2 angular momentum operators.
IX = SIGMA_X / 2.0
IY = SIGMA_Y / 2.0
IZ = SIGMA_Z / 2.0


def kron_all(mats: Iterable[np.ndarray]) -> np.ndarray:
    return reduce(np.kron, mats)


def embed_single_spin(op: np.ndarray, spin_index: int, n: int) -> np.ndarray:
    """Embed a 2x2 operator at ``spin_index`` in an n-spin space.

    Returns I (x) ... (x) op (x) ... (x) I with ``op`` at the given
    position (spin 0 = leftmost factor = most significant qubit).
    """
    op = np.asarray(op, dtype=complex)
    if op.shape != (2, 2):
        raise ValueError(f"expected a 2x2 operator, got shape {op.shape}")
    if not 0 <= spin_index < n:
        raise IndexError(f"spin index {spin_index} out of range for n={n}")
    factors = [IDENTITY_2] * n
    factors[spin_index] = op
    return kron_all(factors)


@dataclass(frozen=True)
class BasisLabel:
    """Computational-basis label, most significant spin first."""

    bits: tuple[int, ...]

    def __post_init__(self):
        if not self.bits or any(b not in (0, 1) for b in self.bits):
            raise ValueError(f"bits must be 0/1 and nonempty, got {self.bits}")

    @classmethod
    def from_string(cls, text: str) -> "BasisLabel":
        text = text.strip()
        if not text or set(text) - {"0", "1"}:
            raise ValueError(f"not a bit string: {text!r}")
        return cls(tuple(int(ch) for ch in text))

    @classmethod
    def from_index(cls, index: int, n: int) -> "BasisLabel":
        if not 0 <= index < 2**n:
            raise ValueError(f"index {index} out of range for n={n}")
        return cls(tuple((index >> (n - 1 - i)) & 1 for i in range(n)))

    @property
    def n(self) -> int:
        return len(self.bits)

    @property
    def index(self) -> int:
        value = 0
        for b in self.bits:
            value = (value << 1) | b
        return value

    def __str__(self) -> str:
        return "".join(str(b) for b in self.bits)


LabelLike = Union[BasisLabel, str, int]


def as_label(label: LabelLike, n: int) -> BasisLabel:
    if isinstance(label, BasisLabel):
        if label.n != n:
            raise ValueError(f"label {label} has {label.n} bits, expected {n}")
        return label
    if isinstance(label, str):
        parsed = BasisLabel.from_string(label)
        if parsed.n != n:
            raise ValueError(f"label {label!r} has {parsed.n} bits, expected {n}")
        return parsed
    return BasisLabel.from_index(int(label), n)


def _require_square_pow2(matrix: np.ndarray) -> int:
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"matrix must be square, got shape {matrix.shape}")
    dim = matrix.shape[0]
    if dim & (dim - 1) or dim == 0:
        raise ValueError(f"dimension {dim} is not a power of two")
    return dim


class DensityMatrix:
    """Unit-trace positive-semidefinite Hermitian state of n spins."""

    __slots__ = ("matrix", "n")

    def __init__(self, matrix: np.ndarray, validate: bool = True):
        matrix = np.asarray(matrix, dtype=complex)
        dim = _require_square_pow2(matrix)
        self.matrix = matrix
        self.n = dim.bit_length() - 1
        if validate:
            herm = np.max(np.abs(matrix - matrix.conj().T))
            if herm > HERMITICITY_TOL:
                raise ValueError(f"not Hermitian: max deviation {herm:.3e}")
            tr = matrix.trace()
            if abs(tr - 1.0) > TRACE_TOL:
                raise ValueError(f"trace {tr} is not 1")
            lo = np.linalg.eigvalsh(matrix).min()
            if lo < -EIGENVALUE_TOL:
                raise ValueError(f"negative eigenvalue {lo:.3e}")

    @classmethod
    def from_basis_state(cls, label: LabelLike, n: int) -> "DensityMatrix":
        idx = as_label(label, n).index
        m = np.zeros((2**n, 2**n), dtype=complex)
        m[idx, idx] = 1.0
        return cls(m, validate=False)

    @classmethod
    def maximally_mixed(cls, n: int) -> "DensityMatrix":
        return cls(np.eye(2**n, dtype=complex) / 2**n, validate=False)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def populations(self) -> np.ndarray:
        return self.matrix.diagonal().real.copy()


class DeviationDensityMatrix:
    """Traceless Hermitian deviation from the uniform background."""

    __slots__ = ("matrix", "n")

    def __init__(self, matrix: np.ndarray, validate: bool = True):
        matrix = np.asarray(matrix, dtype=complex)
        dim = _require_square_pow2(matrix)
        self.matrix = matrix
        self.n = dim.bit_length() - 1
        if validate:
            herm = np.max(np.abs(matrix - matrix.conj().T))
            if herm > HERMITICITY_TOL:
                raise ValueError(f"not Hermitian: max deviation {herm:.3e}")
            tr = matrix.trace()
            if abs(tr) > TRACE_TOL:
                raise ValueError(f"trace {tr} is not 0")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


StateLike = Union[DensityMatrix, DeviationDensityMatrix, np.ndarray]


def state_matrix(state: StateLike) -> np.ndarray:
    if isinstance(state, (DensityMatrix, DeviationDensityMatrix)):
        return state.matrix
    return np.asarray(state, dtype=complex)


def frobenius_norm(matrix: np.ndarray) -> float:
    return float(np.linalg.norm(matrix))


def is_unitary(u: np.ndarray, tol: float = UNITARITY_TOL) -> bool:
    u = np.asarray(u, dtype=complex)
    if u.ndim != 2 or u.shape[0] != u.shape[1]:
        return False
    return bool(np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0]))) <= tol)


def apply_unitary(rho: DensityMatrix, u: np.ndarray) -> DensityMatrix:
    """Conjugate a state: rho -> U rho U†.  U must be unitary to 1e-10."""
    u = np.asarray(u, dtype=complex)
    if u.shape != rho.matrix.shape:
        raise ValueError(f"shape mismatch {u.shape} vs {rho.matrix.shape}")
    if not is_unitary(u):
        raise ValueError("operator is not unitary within tolerance")
    return DensityMatrix(u @ rho.matrix @ u.conj().T, validate=False)


def deviation(rho: StateLike) -> DeviationDensityMatrix:
    """Remove the uniform background: rho - (Tr rho / dim) * I."""
    m = state_matrix(rho)
    dim = _require_square_pow2(m)
    return DeviationDensityMatrix(
        m - (m.trace() / dim) * np.eye(dim), validate=False
    )


def relative_error(dev_exp: StateLike, dev_th: StateLike, c: float = 1.0) -> float:
    """Scaled Frobenius-norm distance ||c*exp - th|| / ||th||.

    The denominator state must have nonzero norm.
    """
    a = state_matrix(dev_exp)
    b = state_matrix(dev_th)
    denom = frobenius_norm(b)
    if denom == 0.0:
        raise ValueError("reference deviation matrix has zero norm")
    return frobenius_norm(c * a - b) / denom


def diagonal_entry(state: StateLike, label: LabelLike) -> float:
    """Real diagonal entry at a basis label; rejects corrupted states."""
    m = state_matrix(state)
    dim = _require_square_pow2(m)
    n = dim.bit_length() - 1
    entry = m[as_label(label, n).index, as_label(label, n).index]
    if abs(entry.imag) >= IMAG_READOUT_TOL:
        raise ValueError(f"diagonal entry has imaginary residue {entry.imag:.3e}")
    return float(entry.real)


def global_phase_alignment(a: np.ndarray, b: np.ndarray) -> complex:
    """Unit phase factor alpha minimising ||alpha*a - b|| (Frobenius)."""
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    overlap = np.vdot(a, b)  # tr(a† b)
    if abs(overlap) < 1e-14:
        # Near-orthogonal under the trace inner product; fall back to the
        # largest entry of a so the result is still deterministic.
        idx = np.unravel_index(np.argmax(np.abs(a)), a.shape)
        if abs(a[idx]) < 1e-14:
            return 1.0 + 0.0j
        overlap = np.conj(a[idx]) * b[idx]
        if abs(overlap) < 1e-14:
            return 1.0 + 0.0j
    return overlap / abs(overlap)


def phase_aligned_deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Max entrywise deviation between a and b after global-phase alignment."""
    alpha = global_phase_alignment(a, b)
    return float(np.max(np.abs(alpha * np.asarray(a) - np.asarray(b))))


def matrices_equal(a: np.ndarray, b: np.ndarray, tol: float) -> bool:
    return bool(np.max(np.abs(np.asarray(a) - np.asarray(b))) <= tol)


def random_deviation_matrix(
    rng: np.random.Generator, n: int, scale: float = 1.0
) -> DeviationDensityMatrix:
    """Random traceless Hermitian matrix, for round-trip tests."""
    dim = 2**n
    raw = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    herm = (raw + raw.conj().T) / 2.0
    herm -= np.eye(dim) * herm.trace() / dim
    return DeviationDensityMatrix(scale * herm, validate=False)
