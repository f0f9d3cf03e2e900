"""Fourier-Legendre directional basis with complex coefficients.

The directional response of a primitive is a finite expansion

    psi(alpha, beta) = sum_{l=0..L} sum_{m=-l..l} c_ml * e^{i m alpha} * P_l^m(cos beta)

where alpha is the azimuth in [0, 2*pi), beta the elevation in [-pi/2, pi/2],
and P_l^m the associated Legendre functions with the Condon-Shortley phase.
Coefficients are unconstrained complex numbers; the expansion is linear in
them, so the derivative of psi with respect to a coefficient is the basis
value itself.

Coefficient vectors are flat arrays in (l, m) row order: index(l, m) =
l*l + l + m, giving (L+1)^2 entries.

Note: the elevation enters through cos(beta), which is even in beta, so the
basis spans only equator-symmetric responses. This is deliberate (it matches
the projection conventions used by the splatting pipeline) and it means the
polar factors are *not* mutually orthogonal over the sphere.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError

__all__ = [
    "num_coeffs",
    "coeff_index",
    "assoc_legendre",
    "fle_basis",
    "fle_basis_many",
    "fle_eval",
    "fle_basis_with_derivs",
]


def num_coeffs(degree: int) -> int:
    """Number of basis functions for a maximum degree L."""
    return (degree + 1) ** 2


def coeff_index(l: int, m: int) -> int:
    """Flat index of the (l, m) entry in a coefficient vector."""
    if not (0 <= l and -l <= m <= l):
        raise ValueError(f"invalid basis indices l={l}, m={m}")
    return l * l + l + m


def _double_factorial(n: int) -> float:
    out = 1.0
    while n > 1:
        out *= n
        n -= 2
    return out


def _legendre_nonneg(degree: int, x: np.ndarray) -> np.ndarray:
    """P_l^m(x) for all 0 <= m <= l <= degree, shape (degree+1, degree+1, *x.shape).

    Upward recurrence in l at fixed m; stable for the small degrees used here
    and free of factorial overflow if the degree is raised by configuration.
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.sqrt(np.maximum(0.0, 1.0 - x * x))
    table = np.zeros((degree + 1, degree + 1) + x.shape, dtype=np.float64)
    for m in range(degree + 1):
        # P_m^m = (-1)^m (2m-1)!! (1-x^2)^{m/2}  (Condon-Shortley phase)
        pmm = ((-1.0) ** m) * _double_factorial(2 * m - 1) * s**m
        table[m, m] = pmm
        if m + 1 <= degree:
            table[m + 1, m] = x * (2 * m + 1) * pmm
        for l in range(m + 2, degree + 1):
            table[l, m] = (
                x * (2 * l - 1) * table[l - 1, m] - (l + m - 1) * table[l - 2, m]
            ) / (l - m)
    return table


def assoc_legendre(l: int, m: int, x) -> float | np.ndarray:
    """Associated Legendre function P_l^m(x) on [-1, 1].

    Negative orders use P_l^{-m} = (-1)^m (l-m)!/(l+m)! P_l^m.

    Raises:
        ValueError: if the index pair is invalid or |x| > 1.
    """
    if not (0 <= l and abs(m) <= l):
        raise ValueError(f"invalid Legendre indices l={l}, m={m}")
    arr = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(arr) > 1.0 + 1e-15):
        raise ValueError("Legendre argument must lie in [-1, 1]")
    arr = np.clip(arr, -1.0, 1.0)
    ma = abs(m)
    val = _legendre_nonneg(l, arr)[l, ma]
    if m < 0:
        val = ((-1.0) ** ma) * (math.factorial(l - ma) / math.factorial(l + ma)) * val
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(val)
    return val


def fle_basis_many(alphas, betas, degree: int) -> np.ndarray:
    """Basis values for many directions at once, shape (n, (degree+1)^2)."""
    alphas = np.atleast_1d(np.asarray(alphas, dtype=np.float64))
    betas = np.atleast_1d(np.asarray(betas, dtype=np.float64))
    if alphas.shape != betas.shape:
        raise ShapeError("alpha and beta arrays must have the same shape")
    x = np.cos(betas)
    table = _legendre_nonneg(degree, x)
    k = num_coeffs(degree)
    out = np.empty((alphas.size,) + (k,), dtype=np.complex128)
    flat_a = alphas.reshape(-1)
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            ma = abs(m)
            p = table[l, ma].reshape(-1)
            if m < 0:
                p = ((-1.0) ** ma) * (
                    math.factorial(l - ma) / math.factorial(l + ma)
                ) * p
            out[:, coeff_index(l, m)] = np.exp(1j * m * flat_a) * p
    return out


def fle_basis(alpha: float, beta: float, degree: int) -> np.ndarray:
    """Complex basis vector at a single direction, length (degree+1)^2.

    Entry (0, 0) is always 1.
    """
    return fle_basis_many([alpha], [beta], degree)[0]


def fle_eval(coeffs, alpha, beta) -> complex:
    """Evaluate the expansion: dot product of coefficients with the basis.

    The coefficient vector length determines the degree; a non-square length
    is rejected.
    """
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    degree = int(round(math.sqrt(coeffs.shape[-1]))) - 1
    if num_coeffs(degree) != coeffs.shape[-1]:
        raise ShapeError(
            f"coefficient vector length {coeffs.shape[-1]} is not a perfect square"
        )
    basis = fle_basis(float(alpha), float(beta), degree)
    return complex(np.dot(coeffs, basis))


def fle_basis_with_derivs(alphas, betas, degree: int):
    """Basis values plus their alpha- and beta-derivatives for many directions.

    Returns (basis, d_alpha, d_beta), each of shape (n, (degree+1)^2).
    The beta derivative is propagated through the Legendre recurrences with
    x = cos(beta); terms in sqrt(1-x^2) = |sin(beta)| carry the sign of
    sin(beta), so odd-m entries have a subgradient of 0 exactly at beta = 0.
    """
    alphas = np.atleast_1d(np.asarray(alphas, dtype=np.float64))
    betas = np.atleast_1d(np.asarray(betas, dtype=np.float64))
    if alphas.shape != betas.shape:
        raise ShapeError("alpha and beta arrays must have the same shape")
    x = np.cos(betas)
    sigma = np.sin(betas)
    s = np.abs(sigma)
    sgn = np.sign(sigma)
    dx = -sigma  # d cos(beta) / d beta
    ds = sgn * x  # d |sin(beta)| / d beta

    n1 = degree + 1
    p = np.zeros((n1, n1) + x.shape)
    dp = np.zeros_like(p)
    for m in range(n1):
        c = ((-1.0) ** m) * _double_factorial(2 * m - 1)
        p[m, m] = c * s**m
        if m > 0:
            dp[m, m] = c * m * s ** (m - 1) * ds
        if m + 1 <= degree:
            p[m + 1, m] = x * (2 * m + 1) * p[m, m]
            dp[m + 1, m] = (2 * m + 1) * (dx * p[m, m] + x * dp[m, m])
        for l in range(m + 2, n1):
            a = 2 * l - 1
            b = l + m - 1
            p[l, m] = (x * a * p[l - 1, m] - b * p[l - 2, m]) / (l - m)
            dp[l, m] = (
                dx * a * p[l - 1, m] + x * a * dp[l - 1, m] - b * dp[l - 2, m]
            ) / (l - m)

    k = num_coeffs(degree)
    basis = np.empty((alphas.size, k), dtype=np.complex128)
    d_alpha = np.empty_like(basis)
    d_beta = np.empty_like(basis)
    flat_a = alphas.reshape(-1)
    for l in range(n1):
        for m in range(-l, l + 1):
            ma = abs(m)
            pv = p[l, ma].reshape(-1)
            dv = dp[l, ma].reshape(-1)
            if m < 0:
                ratio = ((-1.0) ** ma) * (
                    math.factorial(l - ma) / math.factorial(l + ma)
                )
                pv = ratio * pv
                dv = ratio * dv
            az = np.exp(1j * m * flat_a)
            idx = coeff_index(l, m)
            basis[:, idx] = az * pv
            d_alpha[:, idx] = (1j * m) * az * pv
            d_beta[:, idx] = az * dv
    return basis, d_alpha, d_beta
