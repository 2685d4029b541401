"""Kernel family, bias-corrected kernel and rule-of-thumb bandwidths.

Only the triweight family ships. All kernel evaluators accept scalars or
arrays and return the same shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

FAMILIES = ("triweight",)

_C = 35.0 / 32.0


def k(u):
    """Triweight kernel ``(35/32)(1 - u^2)^3`` on [-1, 1]."""
    u = np.asarray(u, dtype=float)
    w = 1.0 - u * u
    return np.where(np.abs(u) <= 1.0, _C * w * w * w, 0.0)


def k_prime(u):
    u = np.asarray(u, dtype=float)
    w = 1.0 - u * u
    return np.where(np.abs(u) <= 1.0, -6.0 * _C * u * w * w, 0.0)


def k_second(u):
    u = np.asarray(u, dtype=float)
    w = 1.0 - u * u
    return np.where(np.abs(u) <= 1.0, -6.0 * _C * w * (1.0 - 5.0 * u * u), 0.0)


def k_third(u):
    # jumps at |u| = 1; the value there is taken from inside the support
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 1.0, 6.0 * _C * u * (12.0 - 20.0 * u * u), 0.0)


@dataclass(frozen=True)
class KernelSpec:
    family: str = "triweight"
    order: int = 2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; available: {FAMILIES}")
        if self.order < 2:
            raise ValueError("kernel order must be >= 2")


TRIWEIGHT = KernelSpec()


def mu_k2(spec: KernelSpec = TRIWEIGHT) -> float:
    """Second moment constant ``(int u^2 K(u) du) / 2``."""
    if spec.family == "triweight":
        return 1.0 / 18.0
    val, _ = integrate.quad(lambda u: u * u * float(k(u)), -1.0, 1.0)
    return val / 2.0


def int_k_squared(spec: KernelSpec = TRIWEIGHT) -> float:
    if spec.family == "triweight":
        return 350.0 / 429.0
    val, _ = integrate.quad(lambda u: float(k(u)) ** 2, -1.0, 1.0)
    return val


@dataclass(frozen=True)
class BandwidthSet:
    """Density bandwidth ``h``, bias-correction bandwidth ``h_b`` and the
    bandwidth ``h_g`` used for the complier outcome densities."""

    h: float
    h_b: float
    h_g: float
    varsigma: float = field(init=False)

    def __post_init__(self):
        for name in ("h", "h_b", "h_g"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0:
                raise ValueError(f"bandwidth {name} must be positive and finite, got {val}")
        object.__setattr__(self, "varsigma", self.h / self.h_b)

    def as_dict(self) -> dict:
        return {"h": self.h, "h_b": self.h_b, "h_g": self.h_g, "varsigma": self.varsigma}


def silverman_bandwidths(n: int, std_delta: float, std_y: float) -> BandwidthSet:
    """Rule-of-thumb bandwidths used in the Monte Carlo design.

    ``h = 3.15 sd(delta) n^(-1/5)``, ``h_b = 2.7 sd(delta) n^(-1/9)`` and
    ``h_g = 3.15 sd(y) n^(-1/5)``.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    if not (std_delta > 0 and std_y > 0):
        raise ValueError(f"standard deviations must be positive (got {std_delta}, {std_y})")
    return BandwidthSet(
        h=3.15 * std_delta * n ** (-1.0 / 5.0),
        h_b=2.7 * std_delta * n ** (-1.0 / 9.0),
        h_g=3.15 * std_y * n ** (-1.0 / 5.0),
    )


def m(u, bw: BandwidthSet, spec: KernelSpec = TRIWEIGHT):
    """Bias-corrected kernel ``M(u) = K(u) - s^3 mu_K2 K_b''(s u)``, ``s = h/h_b``."""
    s = bw.varsigma
    u = np.asarray(u, dtype=float)
    return k(u) - s**3 * mu_k2(spec) * k_second(s * u)


def m_prime(u, bw: BandwidthSet, spec: KernelSpec = TRIWEIGHT):
    s = bw.varsigma
    u = np.asarray(u, dtype=float)
    return k_prime(u) - s**4 * mu_k2(spec) * k_third(s * u)


def m_support(bw: BandwidthSet) -> float:
    """Half-width of the support of ``M`` in units of ``h``."""
    return max(1.0, 1.0 / bw.varsigma)
