"""Constitutive laws, plastic return mappings, and parameter conversions.

All stress functions return the volume-scaled (Kirchhoff-type) stress J*T,
which is what the grid-force assembly consumes directly; results are
symmetrized exactly.  Return mappings operate in principal logarithmic
(Hencky) strain space and are projections: applying one twice is a no-op.

These are the readable single-matrix reference implementations; the batched
simulator kernels repeat the same formulas and are tested against them.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidPoisson, InvertedElement, UnsupportedFamily
from .tensor3 import Svd3, hencky, svd3


class MaterialFamily(enum.Enum):
    """Supported constitutive families.

    Snow shares the plasticine law (same parameter schema, no dedicated
    equations available).  The non-Newtonian family is declared for
    completeness but has no constitutive law; constructing parameters for
    it raises UnsupportedFamily.
    """

    ELASTIC = "elastic"
    PLASTICINE = "plasticine"
    SNOW = "snow"
    NEWTONIAN_FLUID = "newtonian_fluid"
    SAND = "sand"
    NON_NEWTONIAN_FLUID = "non_newtonian_fluid"

    @property
    def code(self):
        return _FAMILY_CODES[self]

    @property
    def uses_hencky(self):
        return self in (MaterialFamily.PLASTICINE, MaterialFamily.SNOW, MaterialFamily.SAND)


_FAMILY_CODES = {
    MaterialFamily.ELASTIC: 0,
    MaterialFamily.PLASTICINE: 1,
    MaterialFamily.SNOW: 2,
    MaterialFamily.NEWTONIAN_FLUID: 3,
    MaterialFamily.SAND: 4,
}


@dataclass(frozen=True)
class LameParams:
    mu: float
    lam: float


@dataclass(frozen=True)
class MaterialParams:
    """Per-object continuous constitutive parameters.

    Fields irrelevant to a family are carried but ignored by its laws
    (e.g. tau_y for a pure elastic object).  Units: E, tau_y, kappa in Pa;
    mu_visc in Pa*s; theta_fric in radians; rho in kg/m^3; mu_contact
    dimensionless.
    """

    family: MaterialFamily
    E: float = 5e4
    nu: float = 0.25
    tau_y: float = 1e3
    mu_visc: float = 1.0
    kappa: float = 1e5
    theta_fric: float = math.radians(30.0)
    rho: float = 1000.0
    mu_contact: float = 0.4

    def __post_init__(self):
        if self.family is MaterialFamily.NON_NEWTONIAN_FLUID:
            raise UnsupportedFamily(
                "non-Newtonian fluid is declared but has no constitutive law"
            )
        if self.E <= 0:
            raise ValueError("E must be positive")
        if not 0.0 < self.nu < 0.5:
            raise InvalidPoisson(f"nu must lie in (0, 0.5), got {self.nu}")
        if self.tau_y < 0:
            raise ValueError("tau_y must be non-negative")
        if self.mu_visc < 0:
            raise ValueError("mu_visc must be non-negative")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not 0.0 < self.theta_fric < math.pi / 2:
            raise ValueError("theta_fric must lie in (0, pi/2)")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.mu_contact < 0:
            raise ValueError("mu_contact must be non-negative")

    def with_(self, **kw):
        return replace(self, **kw)


def lame_from(E, nu):
    """Lame parameters mu = E / (2 (1 + nu)), lam = nu E / ((1 + nu)(1 - 2 nu))."""
    if not 0.0 < nu < 0.5:
        raise InvalidPoisson(f"nu must lie in (0, 0.5), got {nu}")
    if E <= 0:
        raise ValueError("E must be positive")
    return LameParams(mu=E / (2.0 * (1.0 + nu)), lam=nu * E / ((1.0 + nu) * (1.0 - 2.0 * nu)))


def dp_alpha(theta_fric):
    """Cone slope of the pressure-dependent yield criterion."""
    s = math.sin(theta_fric)
    return math.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)


def _symmetrize(t):
    return 0.5 * (t + t.T)


def kirchhoff_neohookean(F, lame):
    """Neo-Hookean J*T = mu F F^T + (lam log J - mu) I."""
    F = np.asarray(F, dtype=np.float64)
    J = np.linalg.det(F)
    if J <= 0.0:
        raise InvertedElement(f"det(F) = {J} <= 0")
    t = lame.mu * (F @ F.T) + (lame.lam * np.log(J) - lame.mu) * np.eye(3)
    return _symmetrize(t)


def kirchhoff_newtonian(grad_v, J, params):
    """Viscous + volumetric fluid stress J*T = mu/2 (grad v + grad v^T) + kappa (J - J^-6) I."""
    if J <= 0.0:
        raise InvertedElement(f"volume ratio J = {J} <= 0")
    grad_v = np.asarray(grad_v, dtype=np.float64)
    t = 0.5 * params.mu_visc * (grad_v + grad_v.T) + params.kappa * (J - J ** (-6.0)) * np.eye(3)
    return _symmetrize(t)


def kirchhoff_stvk_hencky(F, lame):
    """Hencky-strain elasticity J*T = U (2 mu diag(eps) + lam tr(eps) I) U^T."""
    F = np.asarray(F, dtype=np.float64)
    if np.linalg.det(F) <= 0.0:
        raise InvertedElement("det(F) <= 0")
    u, sig, v = svd3(F)
    eps = hencky(Svd3(u, sig, v))
    coeff = 2.0 * lame.mu * eps + lame.lam * eps.sum()
    return _symmetrize((u * coeff) @ u.T)


def return_map_von_mises(F_trial, lame, tau_y):
    """Deviatoric-yield projection in Hencky space.

    Plastic flow once the deviatoric strain norm exceeds tau_y / (2 mu);
    the projection preserves the volumetric part and lands exactly on the
    yield surface.
    """
    F_trial = np.asarray(F_trial, dtype=np.float64)
    if np.linalg.det(F_trial) <= 0.0:
        raise InvertedElement("det(F_trial) <= 0")
    u, sig, v = svd3(F_trial)
    eps = hencky(Svd3(u, sig, v))
    dev = eps - eps.mean()
    enorm = float(np.linalg.norm(dev))
    dgamma = enorm - tau_y / (2.0 * lame.mu)
    if dgamma <= 0.0 or enorm == 0.0:
        return F_trial.copy()
    eps_proj = eps - dgamma * dev / enorm
    return (u * np.exp(eps_proj)) @ v.T


def return_map_drucker_prager(F_trial, lame, theta_fric):
    """Cone-yield projection for granular media.

    Expansion (tr eps > 0) projects to the nearest rotation; compressive
    states inside the cone pass through; outside, the strain is pulled back
    along the deviator onto the cone.
    """
    F_trial = np.asarray(F_trial, dtype=np.float64)
    if np.linalg.det(F_trial) <= 0.0:
        raise InvertedElement("det(F_trial) <= 0")
    u, sig, v = svd3(F_trial)
    eps = hencky(Svd3(u, sig, v))
    tr = float(eps.sum())
    if tr > 0.0:
        return u @ v.T
    dev = eps - tr / 3.0
    enorm = float(np.linalg.norm(dev))
    alpha = dp_alpha(theta_fric)
    dgamma = enorm + alpha * (3.0 * lame.lam + 2.0 * lame.mu) * tr / (2.0 * lame.mu)
    if dgamma <= 0.0 or enorm == 0.0:
        return F_trial.copy()
    eps_proj = eps - dgamma * dev / enorm
    return (u * np.exp(eps_proj)) @ v.T


def friction_pair(mu_a, mu_b):
    """Symmetric interface Coulomb coefficient: the arithmetic mean."""
    if mu_a < 0 or mu_b < 0:
        raise ValueError("friction coefficients must be non-negative")
    return 0.5 * (mu_a + mu_b)
