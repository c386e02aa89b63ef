"""Dimensionless compressible neo-Hookean solid and kinematic transforms.

With forces scaled by ``f_c`` and lengths by ``L`` the Young modulus drops
out and the Lamé pair depends on the Poisson ratio alone::

    mu  = 1 / (2 (1 + nu))
    lam = nu / ((1 + nu) (1 - 2 nu))
    psi = mu/2 (I1 - 3) - mu ln J + lam/2 (ln J)^2

All functions broadcast over leading axes: ``F`` has shape ``(..., 3, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import KinematicError

I3 = np.eye(3)


@dataclass(frozen=True)
class MaterialParams:
    poisson_ratio: float = 0.25

    def __post_init__(self):
        nu = float(self.poisson_ratio)
        if not -1.0 < nu < 0.5:
            raise ValueError(f"Poisson ratio must lie in (-1, 0.5), got {nu}")

    @property
    def mu(self):
        return 1.0 / (2.0 * (1.0 + self.poisson_ratio))

    @property
    def lam(self):
        nu = self.poisson_ratio
        return nu / ((1.0 + nu) * (1.0 - 2.0 * nu))


def _det(F):
    J = np.linalg.det(F)
    if np.any(~(J > 0.0)):
        raise KinematicError("deformation gradient with det F <= 0")
    return J


def strain_energy(F, params):
    F = np.asarray(F, dtype=float)
    J = _det(F)
    lnJ = np.log(J)
    I1 = np.einsum("...ij,...ij->...", F, F)
    return 0.5 * params.mu * (I1 - 3.0) - params.mu * lnJ + 0.5 * params.lam * lnJ**2


def pk1(F, params):
    """First Piola-Kirchhoff stress ``mu (F - F^-T) + lam ln J F^-T``."""
    F = np.asarray(F, dtype=float)
    J = _det(F)
    FinvT = np.swapaxes(np.linalg.inv(F), -1, -2)
    return params.mu * (F - FinvT) + params.lam * np.log(J)[..., None, None] * FinvT


def material_tangent(F, params):
    """Fourth-order tangent ``A[i,j,k,l] = dP[i,j] / dF[k,l]``."""
    F = np.asarray(F, dtype=float)
    J = _det(F)
    Finv = np.linalg.inv(F)
    FinvT = np.swapaxes(Finv, -1, -2)
    lnJ = np.log(J)[..., None, None, None, None]
    mu, lam = params.mu, params.lam
    eye = np.einsum("ik,jl->ijkl", I3, I3)
    A = mu * eye + (mu - lam * lnJ) * np.einsum("...jk,...li->...ijkl", Finv, Finv)
    A = A + lam * np.einsum("...ij,...kl->...ijkl", FinvT, FinvT)
    return A


def pk1_and_tangent(F, params):
    F = np.asarray(F, dtype=float)
    J = _det(F)
    Finv = np.linalg.inv(F)
    FinvT = np.swapaxes(Finv, -1, -2)
    lnJ = np.log(J)
    mu, lam = params.mu, params.lam
    P = mu * (F - FinvT) + lam * lnJ[..., None, None] * FinvT
    c = (mu - lam * lnJ)[..., None, None, None, None]
    A = c * np.einsum("...jk,...li->...ijkl", Finv, Finv)
    A += lam * np.einsum("...ij,...kl->...ijkl", FinvT, FinvT)
    A += mu * np.einsum("ik,jl->ijkl", I3, I3)
    return P, A


def linear_elastic_stiffness(params):
    """Isotropic small-strain stiffness with the same Lamé pair."""
    d = I3
    return (params.lam * np.einsum("ij,kl->ijkl", d, d)
            + params.mu * (np.einsum("ik,jl->ijkl", d, d) + np.einsum("il,jk->ijkl", d, d)))


def piola_transform(F):
    """``G = det(F) F^-1``."""
    F = np.asarray(F, dtype=float)
    J = _det(F)
    return J[..., None, None] * np.linalg.inv(F)


def cofactor_derivative(F):
    """``d(G^T)[i,j] / dF[k,l]`` where ``G^T = J F^-T`` (the cofactor)."""
    F = np.asarray(F, dtype=float)
    J = _det(F)
    FinvT = np.swapaxes(np.linalg.inv(F), -1, -2)
    return J[..., None, None, None, None] * (
        np.einsum("...ij,...kl->...ijkl", FinvT, FinvT)
        - np.einsum("...il,...kj->...ijkl", FinvT, FinvT))


def nanson_area(F, normal, area=1.0):
    """Map a reference area element ``N dA`` to the current one.

    Returns ``(vector, area, direction)`` with ``vector = G^T N dA``.
    """
    N = np.asarray(normal, dtype=float)
    G = piola_transform(F)
    v = np.einsum("...ji,...j->...i", G, N) * area
    a = np.linalg.norm(v, axis=-1)
    return v, a, v / np.asarray(a)[..., None]
