"""Independent numeric oracles for the tests.

These deliberately avoid the code paths under test: eigenvalues come from
the characteristic polynomial (Faddeev-LeVerrier) solved by Durand-Kerner
iteration rather than any library eigensolver used by the package (the
package uses none), and matrix measures come from the defining limit
quotient (||I + hA|| - 1)/h rather than the closed-form column/row
expressions implemented in monocert.measures.
"""

import numpy as np


def char_poly(A: np.ndarray) -> np.ndarray:
    """Coefficients of det(lambda*I - A), descending, by Faddeev-LeVerrier."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    coeffs = [1.0]
    M = np.zeros_like(A)
    c = 1.0
    for k in range(1, n + 1):
        M = A @ M + c * np.eye(n)
        c = -np.trace(A @ M) / k
        coeffs.append(c)
    return np.array(coeffs)


def poly_roots(coeffs, tol: float = 1e-13, max_iter: int = 1000) -> np.ndarray:
    """All complex roots of a polynomial by Durand-Kerner iteration."""
    coeffs = np.asarray(coeffs, dtype=complex)
    coeffs = coeffs / coeffs[0]
    n = len(coeffs) - 1
    if n == 0:
        return np.array([], dtype=complex)
    bound = 1.0 + float(np.max(np.abs(coeffs[1:])))
    z = bound * (0.4 + 0.9j) ** np.arange(1, n + 1)
    for _ in range(max_iter):
        p = np.polyval(coeffs, z)
        denom = np.empty_like(z)
        for i in range(n):
            denom[i] = np.prod(z[i] - np.delete(z, i))
        step = p / denom
        z = z - step
        if np.max(np.abs(step)) < tol:
            break
    return z


def eigvals_oracle(A: np.ndarray) -> np.ndarray:
    return poly_roots(char_poly(A))


def spectral_abscissa(A: np.ndarray) -> float:
    return float(np.max(eigvals_oracle(A).real))


def is_hurwitz(A: np.ndarray) -> bool:
    return spectral_abscissa(A) < 0.0


def mu_limit(A: np.ndarray, ord, h: float = 1e-8) -> float:
    """Matrix measure from the defining one-sided limit quotient."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    return float((np.linalg.norm(np.eye(n) + h * A, ord) - 1.0) / h)
