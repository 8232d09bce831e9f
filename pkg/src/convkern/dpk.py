"""Dot-product kernels on the sphere and their spherical-harmonic coefficients."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy import special

KINDS = ("exponential", "arccos1", "polynomial", "linear", "custom")

# cosines further than this outside [-1, 1] are treated as bugs, not roundoff
DOMAIN_TOL = 1e-6


class KernelDomainError(ValueError):
    pass


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class DotProductKernel:
    """kappa(u) = sum_j b_j u^j with b_j >= 0.

    ``kind`` selects a closed form; ``sigma`` parameterizes the exponential
    kernel ``exp((u - 1) / sigma^2)``; ``degree`` the monomial ``u^degree``;
    ``coeffs`` the series of a custom kernel.
    """

    kind: str
    sigma: float = 0.6
    degree: int = 1
    coeffs: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "exponential" and not self.sigma > 0:
            raise ValueError("exponential kernel needs sigma > 0")
        if self.kind == "polynomial" and self.degree < 0:
            raise ValueError("polynomial degree must be >= 0")
        if self.kind == "custom":
            c = tuple(float(b) for b in self.coeffs)
            if not c or any(b < 0 for b in c):
                raise ValueError("custom kernel needs non-negative series coefficients")
            object.__setattr__(self, "coeffs", c)

    @property
    def alpha(self) -> float:
        return 1.0 / self.sigma ** 2

    @property
    def bounded_domain(self) -> bool:
        """True when kappa is only defined on [-1, 1]."""
        return self.kind == "arccos1"

    @property
    def is_polynomial(self) -> bool:
        return self.kind in ("polynomial", "linear", "custom")

    @property
    def normalized(self) -> bool:
        return abs(float(self(np.array(1.0))) - 1.0) <= 1e-12

    def series(self, jmax: int) -> np.ndarray:
        """Coefficients b_0..b_jmax of the power series of kappa."""
        j = np.arange(jmax + 1)
        if self.kind == "exponential":
            a = self.alpha
            return np.exp(-a + j * math.log(a) - special.gammaln(j + 1))
        if self.kind == "arccos1":
            # 1/pi + u/2 + sum over even j >= 2 of (j-3)!! / (pi j!! (j-1))
            b = np.zeros(jmax + 1)
            b[0] = 1 / math.pi
            if jmax >= 1:
                b[1] = 0.5
            # r_j = (j-3)!! / j!! via r_{j+2} = r_j (j-1) / (j+2); exact factorials overflow
            r = 0.5
            for jj in range(2, jmax + 1, 2):
                b[jj] = r / (math.pi * (jj - 1))
                r *= (jj - 1) / (jj + 2)
            return b
        b = np.zeros(jmax + 1)
        for jj, c in self.poly_terms():
            if jj <= jmax:
                b[jj] = c
        return b

    def poly_terms(self) -> list[tuple[int, float]]:
        """(power, coefficient) pairs of a finite polynomial kernel."""
        if self.kind == "linear":
            return [(1, 1.0)]
        if self.kind == "polynomial":
            return [(self.degree, 1.0)]
        if self.kind == "custom":
            return [(j, c) for j, c in enumerate(self.coeffs) if c != 0.0]
        raise ValueError(f"{self.kind} kernel is not a finite polynomial")

    def __call__(self, u):
        """Evaluate kappa without domain checks (used for non-homogeneous maps)."""
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "exponential":
            return np.exp(self.alpha * (u - 1.0))
        if self.kind == "arccos1":
            uc = np.clip(u, -1.0, 1.0)
            return (uc * (math.pi - np.arccos(uc)) + np.sqrt(1.0 - uc * uc)) / math.pi
        if self.kind == "linear":
            return u.copy()
        if self.kind == "polynomial":
            return u ** self.degree
        out = np.zeros_like(u)
        for c in reversed(self.coeffs):
            out = out * u + c
        return out

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "exponential":
            d["sigma"] = self.sigma
        elif self.kind == "polynomial":
            d["degree"] = self.degree
        elif self.kind == "custom":
            d["coeffs"] = list(self.coeffs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DotProductKernel":
        return cls(kind=d["kind"], sigma=float(d.get("sigma", 0.6)),
                   degree=int(d.get("degree", 1)), coeffs=tuple(d.get("coeffs", ())))


def exponential(sigma: float = 0.6) -> DotProductKernel:
    return DotProductKernel("exponential", sigma=sigma)


def arccos1() -> DotProductKernel:
    return DotProductKernel("arccos1")


def polynomial(degree: int) -> DotProductKernel:
    return DotProductKernel("polynomial", degree=degree)


def linear() -> DotProductKernel:
    return DotProductKernel("linear")


def custom(coeffs: Sequence[float]) -> DotProductKernel:
    return DotProductKernel("custom", coeffs=tuple(coeffs))


def check_cosine(u: np.ndarray) -> np.ndarray:
    """Clamp cosines to [-1, 1]; larger violations raise."""
    u = np.asarray(u, dtype=np.float64)
    if u.size and np.max(np.abs(u)) > 1.0 + DOMAIN_TOL:
        raise KernelDomainError(
            f"cosine {np.max(np.abs(u)):.6g} outside [-1, 1] beyond tolerance")
    return np.clip(u, -1.0, 1.0)


def kappa_eval(k: DotProductKernel, u):
    return k(check_cosine(u))


def homogeneous_eval(k: DotProductKernel, dot, nz, nz2):
    """||z|| ||z'|| kappa(<z, z'> / (||z|| ||z'||)), extended by 0 at the origin."""
    dot = np.asarray(dot, dtype=np.float64)
    nz = np.asarray(nz, dtype=np.float64)
    nz2 = np.asarray(nz2, dtype=np.float64)
    if np.any(nz < 0) or np.any(nz2 < 0):
        raise ValueError("norms must be non-negative")
    denom = nz * nz2
    pos = denom > 0
    cos = np.divide(dot, denom, out=np.zeros(np.broadcast(dot, denom).shape), where=pos)
    out = denom * k(check_cosine(cos))
    return np.where(pos, out, 0.0)


def multiplicity(d: int, k: int) -> int:
    """Number N(d, k) of linearly independent degree-k spherical harmonics on S^{d-1}."""
    if d < 2:
        raise ValueError("d must be >= 2")
    if k == 0:
        return 1
    return (2 * k + d - 2) * math.comb(k + d - 3, k - 1) // k


def gegenbauer(kmax: int, d: int, t) -> np.ndarray:
    """P_{0..kmax, d}(t), normalized so that P_k(1) = 1; shape (kmax+1,) + t.shape."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty((kmax + 1,) + t.shape)
    out[0] = 1.0
    if kmax >= 1:
        out[1] = t
    for k in range(1, kmax):
        out[k + 1] = ((2 * k + d - 2) * t * out[k] - k * out[k - 1]) / (k + d - 2)
    return out


def sphere_density_const(d: int) -> float:
    """omega_{d-2} / omega_{d-1}: normalizes (1 - t^2)^((d-3)/2) on [-1, 1]."""
    return math.exp(special.gammaln(d / 2) - special.gammaln((d - 1) / 2)) / math.sqrt(math.pi)


@lru_cache(maxsize=64)
def _jacobi_rule(n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    a = (d - 3) / 2
    t, w = special.roots_jacobi(n, a, a)
    w = w * sphere_density_const(d)
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w


def sphere_average(f: Callable[[np.ndarray], np.ndarray], d: int, n0: int = 256,
                   tol: float = 1e-10, nmax: int = 16384) -> np.ndarray:
    """E[f(<z, z'>)] for z, z' independent uniform on S^{d-1}.

    Gauss-Jacobi quadrature against the weight (1 - t^2)^((d-3)/2), doubling
    the node count until successive estimates differ by less than ``tol``.
    ``f`` may return extra trailing axes (evaluated columnwise).
    """
    if d < 2:
        raise ValueError("d must be >= 2")
    n = n0
    t, w = _jacobi_rule(n, d)
    prev = np.tensordot(w, f(t), axes=(0, 0))
    while n < nmax:
        n *= 2
        t, w = _jacobi_rule(n, d)
        cur = np.tensordot(w, f(t), axes=(0, 0))
        if np.max(np.abs(cur - prev)) < tol:
            return cur
        prev = cur
    raise QuadratureError(f"sphere quadrature did not converge to {tol} with {nmax} nodes")


@dataclass(frozen=True, eq=False)
class LegendreCoeffs:
    """Mercer coefficients mu_k with multiplicities N(d, k)."""

    d: int
    mu: np.ndarray
    multiplicities: np.ndarray
    residual: float

    @property
    def kmax(self) -> int:
        return len(self.mu) - 1

    def reconstruct(self, t) -> np.ndarray:
        p = gegenbauer(self.kmax, self.d, t)
        return np.tensordot(self.mu * self.multiplicities, p, axes=(0, 0))


def legendre_coeffs(k: DotProductKernel, d: int, kmax: int,
                    check_points: int = 401) -> LegendreCoeffs:
    """mu_j = E_t[kappa(t) P_{j,d}(t)] for j = 0..kmax.

    ``residual`` is max |kappa(t) - sum_j mu_j N(d, j) P_j(t)| on a uniform grid;
    it is reported, not enforced, since truncation alone makes it non-zero.
    """
    mu = sphere_average(lambda t: (k(t) * gegenbauer(kmax, d, t)).T, d)
    mult = np.array([multiplicity(d, j) for j in range(kmax + 1)], dtype=np.float64)
    grid = np.linspace(-1.0, 1.0, check_points)
    lc = LegendreCoeffs(d, mu, mult, 0.0)
    residual = float(np.max(np.abs(k(grid) - lc.reconstruct(grid))))
    return LegendreCoeffs(d, mu, mult, residual)


def sigma_sq_offdiag(k: DotProductKernel, d: int) -> float:
    """E[kappa(<z, z'>)] for independent uniform z, z' on S^{d-1}."""
    return float(sphere_average(k, d))


def sigma_sq_bessel(sigma: float, d: int) -> float:
    """Closed form of sigma_sq_offdiag for the exponential kernel.

    exp(-1/s^2) (2 s^2)^((d-2)/2) I_{d/2-1}(1/s^2) Gamma(d/2), evaluated in log space.
    """
    a = 1.0 / sigma ** 2
    nu = d / 2 - 1
    # ive(nu, a) = I_nu(a) exp(-a)
    log_val = (nu * math.log(2 * sigma ** 2) + math.log(special.ive(nu, a))
               + special.gammaln(d / 2))
    return math.exp(log_val)


def tilde_epsilon(k: DotProductKernel, d: int) -> float:
    """E[kappa(<z, z'>)^2] for independent uniform z, z' on S^{d-1}."""
    return float(sphere_average(lambda t: k(t) ** 2, d))
