"""Dense complex operator algebra and the two superoperators used everywhere.

Conventions
-----------
* Qubit basis order is ``(|e>, |g>)`` so ``sigma_minus = |g><e|`` is the
  lowering operator and the excited-state population sits at entry (0, 0).
* Bosonic operators act on a caller-chosen truncated Fock space with
  ``a[n-1, n] = sqrt(n)``; the quadratures ``q = (a + a^dag)/sqrt(2)`` and
  ``p = -i(a - a^dag)/sqrt(2)`` satisfy ``[q, p] = i`` away from the
  truncation edge.
* Everything is dense complex128.  State arguments broadcast over leading
  batch axes, i.e. a density matrix may have shape ``(..., d, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tolerances",
    "DEFAULT_TOLERANCES",
    "DimensionMismatchError",
    "InvalidStateError",
    "StateDiagnostics",
    "dagger",
    "trace",
    "expectation",
    "dissipator",
    "measurement_superop",
    "commutator",
    "anticommutator",
    "build_standard_ops",
    "validate_state",
    "ensure_density_matrix",
    "is_hermitian",
    "hermitize",
    "min_eigenvalue",
]


@dataclass(frozen=True)
class Tolerances:
    """Numerical tolerances shared by state validation and the integrators."""

    hermiticity: float = 1e-10
    trace: float = 1e-9
    positivity: float = 1e-10
    top_population: float = 1e-6


DEFAULT_TOLERANCES = Tolerances()


class DimensionMismatchError(ValueError):
    """Raised when operator/state shapes are incompatible."""


class InvalidStateError(ValueError):
    """Raised when a state violates its invariants beyond tolerance."""


def dagger(op: np.ndarray) -> np.ndarray:
    """Conjugate transpose, acting on the last two axes."""
    return np.conjugate(np.swapaxes(op, -1, -2))


def trace(mat: np.ndarray) -> np.ndarray:
    """Trace over the last two axes (complex)."""
    return np.einsum("...ii", mat)


def hermitize(mat: np.ndarray) -> np.ndarray:
    """Hermitian part (mat + mat^dag)/2."""
    return 0.5 * (mat + dagger(mat))


def _check_square(op: np.ndarray, name: str = "operator") -> np.ndarray:
    op = np.asarray(op, dtype=complex)
    if op.ndim < 2 or op.shape[-1] != op.shape[-2]:
        raise DimensionMismatchError(f"{name} must be square, got shape {op.shape}")
    if not np.all(np.isfinite(op)):
        raise InvalidStateError(f"{name} contains non-finite entries")
    return op


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatchError(
            f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}"
        )


def expectation(rho: np.ndarray, op: np.ndarray):
    """Expectation value Tr[rho op].

    Returns a complex scalar (real within 1e-12 when ``op`` is Hermitian and
    ``rho`` is a valid state), or an array of them for batched ``rho``.
    """
    rho = _check_square(rho, "state")
    op = _check_square(op)
    _check_same_dim(rho, op)
    out = np.einsum("...ij,ji->...", rho, op)
    return complex(out) if out.ndim == 0 else out


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def anticommutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b + b @ a


def dissipator(op: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Dissipation superoperator  A rho A^dag - {A^dag A, rho}/2.

    The output is traceless and Hermiticity-preserving, and invariant under
    ``op -> op * exp(i theta)``.
    """
    op = _check_square(op)
    rho = _check_square(rho, "state")
    _check_same_dim(op, rho)
    ad = dagger(op)
    ada = ad @ op
    return op @ rho @ ad - 0.5 * (ada @ rho + rho @ ada)


def measurement_superop(
    op: np.ndarray,
    rho: np.ndarray,
    *,
    check_trace: bool = True,
    trace_tol: float = DEFAULT_TOLERANCES.trace,
) -> np.ndarray:
    """Measurement superoperator  A rho + rho A^dag - <A + A^dag> rho.

    The expectation value makes this nonlinear in ``rho``; it is only the
    correct conditional-update ingredient for unit-trace states, which is
    enforced unless ``check_trace`` is disabled (useful for formal algebra).
    """
    op = _check_square(op)
    rho = _check_square(rho, "state")
    _check_same_dim(op, rho)
    tr = trace(rho)
    if check_trace and np.max(np.abs(tr - 1.0)) > trace_tol:
        raise InvalidStateError(
            f"measurement superoperator needs a normalized state; max |tr-1| = "
            f"{np.max(np.abs(tr - 1.0)):.3e}"
        )
    herm = op + dagger(op)
    ex = np.einsum("...ij,ji->...", rho, herm)
    return op @ rho + rho @ dagger(op) - np.asarray(ex)[..., None, None] * rho


def build_standard_ops(kind: str, dim: int | None = None) -> dict[str, np.ndarray]:
    """Canonical operator set for a qubit or a truncated bosonic mode.

    ``kind="qubit"`` returns sigma_minus/plus, the Paulis and the level
    projectors in the (|e>, |g>) ordering.  ``kind="boson"`` needs ``dim >= 2``
    and returns the ladder operators, the number operator and the quadratures.
    """
    if kind == "qubit":
        sm = np.array([[0, 0], [1, 0]], dtype=complex)
        sp = sm.conj().T
        ops = {
            "identity": np.eye(2, dtype=complex),
            "sigma_minus": sm,
            "sigma_plus": sp,
            "sigma_x": np.array([[0, 1], [1, 0]], dtype=complex),
            "sigma_y": np.array([[0, -1j], [1j, 0]], dtype=complex),
            "sigma_z": np.array([[1, 0], [0, -1]], dtype=complex),
            "projector_e": np.diag([1.0, 0.0]).astype(complex),
            "projector_g": np.diag([0.0, 1.0]).astype(complex),
        }
        return ops
    if kind == "boson":
        if dim is None or dim < 2:
            raise ValueError("bosonic operator set needs dim >= 2")
        a = np.zeros((dim, dim), dtype=complex)
        ns = np.arange(1, dim)
        a[ns - 1, ns] = np.sqrt(ns)
        ad = a.conj().T
        q = (a + ad) / np.sqrt(2.0)
        p = -1j * (a - ad) / np.sqrt(2.0)
        return {
            "identity": np.eye(dim, dtype=complex),
            "a": a,
            "a_dag": ad,
            "n": np.diag(np.arange(dim, dtype=float)).astype(complex),
            "q": q,
            "p": p,
        }
    raise ValueError(f"unknown operator set kind: {kind!r}")


def min_eigenvalue(rho: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of the Hermitian part, batched.

    Uses the closed form for 2x2 matrices (cheap enough to run every step)
    and ``eigvalsh`` otherwise.
    """
    rho = np.asarray(rho)
    d = rho.shape[-1]
    h = hermitize(rho)
    if d == 2:
        half_tr = 0.5 * (h[..., 0, 0].real + h[..., 1, 1].real)
        half_diff = 0.5 * (h[..., 0, 0].real - h[..., 1, 1].real)
        rad = np.sqrt(half_diff**2 + np.abs(h[..., 0, 1]) ** 2)
        return half_tr - rad
    return np.linalg.eigvalsh(h)[..., 0]


@dataclass(frozen=True)
class StateDiagnostics:
    """Defect report from :func:`validate_state` (diagnostic, never raises)."""

    hermiticity_defect: float
    trace_defect: float
    min_eigenvalue: float
    top_population: float

    def is_physical(self, tol: Tolerances = DEFAULT_TOLERANCES) -> bool:
        return (
            self.hermiticity_defect <= tol.hermiticity
            and self.trace_defect <= tol.trace
            and self.min_eigenvalue >= -tol.positivity
        )

    def truncation_leak(self, tol: Tolerances = DEFAULT_TOLERANCES) -> bool:
        """True when the top Fock level holds suspicious population."""
        return self.top_population > tol.top_population


def validate_state(
    rho: np.ndarray, tolerances: Tolerances = DEFAULT_TOLERANCES
) -> StateDiagnostics:
    """Report Hermiticity/trace defects, minimum eigenvalue and top-level leak."""
    rho = _check_square(rho, "state")
    del tolerances  # thresholds are applied by the caller via the report
    herm_defect = float(np.max(np.abs(rho - dagger(rho))))
    tr_defect = float(np.max(np.abs(trace(rho) - 1.0)))
    w_min = float(np.min(min_eigenvalue(rho)))
    top = float(np.max(rho[..., -1, -1].real))
    return StateDiagnostics(herm_defect, tr_defect, w_min, top)


def ensure_density_matrix(
    rho: np.ndarray,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
    *,
    name: str = "state",
) -> np.ndarray:
    """Validate a density matrix, raising :class:`InvalidStateError` on defects."""
    rho = _check_square(rho, name)
    diag = validate_state(rho)
    problems = []
    if diag.hermiticity_defect > tolerances.hermiticity:
        problems.append(f"hermiticity defect {diag.hermiticity_defect:.3e}")
    if diag.trace_defect > tolerances.trace:
        problems.append(f"trace defect {diag.trace_defect:.3e}")
    if diag.min_eigenvalue < -tolerances.positivity:
        problems.append(f"min eigenvalue {diag.min_eigenvalue:.3e}")
    if problems:
        raise InvalidStateError(f"{name} is not a valid density matrix: " + "; ".join(problems))
    return rho


def is_hermitian(op: np.ndarray, tol: float = DEFAULT_TOLERANCES.hermiticity) -> bool:
    op = np.asarray(op, dtype=complex)
    return bool(np.max(np.abs(op - dagger(op))) <= tol)
