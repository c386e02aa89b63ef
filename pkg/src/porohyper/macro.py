"""Macroscale finite-strain consolidation and its linear Biot counterpart.

Unknowns are the nodal displacement ``u`` and pore pressure ``p`` on a
trilinear hexahedral mesh (equal order).  At every quadrature point the
micro response ``U = avg grad_Y u1`` enters through::

    Fbar = I + grad_X u + U
    P_E  = V_s dPsi/dFbar - p V_f cof(Fbar)
    q    = -V_f J Fbar^-1 K_i Fbar^-T grad_X p          (transformed flux)

and backward Euler gives the discrete mass balance (multiplied by dt)::

    int dt q . grad dp + int (V_s cof : dU - V_f cof : dH) dp = 0

Within a step the micro response is linearised about the start of the step,
``U = U_t + M_t : (H - H_t) + Q_t (p - p_t)``, and re-evaluated once the
step has converged.

Every quadrature point carries a 13-component kinematic vector
``g = [H (9), p, grad p (3)]`` and a conjugate "stress" vector so that the
element residual is ``B^T s`` and the element matrix ``B^T (ds/dg) B``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem
from .exceptions import ConvergenceError, DegenerateParameterError, SolverError
from .material import (MaterialParams, cofactor_derivative, material_tangent,
                       pk1_and_tangent, _det)
from .mesh import generate_column_mesh

log = logging.getLogger(__name__)

I3 = np.eye(3)
II = np.einsum("ik,jl->ijkl", I3, I3)


# -- constitutive transforms ---------------------------------------------------

def _inv_and_det(F):
    F = np.asarray(F, dtype=float)
    J = _det(F)
    return np.linalg.inv(F), J


def transformed_conductivity(F, K_i):
    """``(1/J) G K_i F^-T`` with ``G = J F^-1``, i.e. ``F^-1 K_i F^-T``."""
    B, _ = _inv_and_det(F)
    return B @ np.asarray(K_i) @ np.swapaxes(B, -1, -2)


def transformed_darcy(F, K_i, grad_p, untransformed=False):
    """Transformed flux ``-G K_i F^-T grad p``; optionally also ``w = -K_i F^-T grad p``."""
    B, J = _inv_and_det(F)
    g = np.asarray(grad_p, dtype=float)
    w = -np.einsum("...ij,...kj,...k->...i", np.asarray(K_i) * np.ones_like(B), B, g)
    Gw = J[..., None] * np.einsum("...ij,...j->...i", B, w)
    return (Gw, w) if untransformed else Gw


def _flux_operator(F, K_i):
    """``T = J F^-1 K_i F^-T`` and ``dT[i,j]/dF[k,l]``."""
    B, J = _inv_and_det(F)
    K = np.asarray(K_i, dtype=float)
    X = B @ K @ np.swapaxes(B, -1, -2)
    T = J[..., None, None] * X
    dT = (np.einsum("...ij,...lk->...ijkl", T, B)
          - J[..., None, None, None, None] * (np.einsum("...ik,...lj->...ijkl", B, X)
                                              + np.einsum("...il,...jk->...ijkl", X, B)))
    return T, dT


def _cofactor(F):
    B, J = _inv_and_det(F)
    return J[..., None, None] * np.swapaxes(B, -1, -2)


def _chain(D, M):
    """``D : (II + M)`` for fourth-order ``D`` (..., 3, 3, 3, 3)."""
    return D + np.einsum("...ijkl,...klmn->...ijmn", D, M)


def effective_stress(F, p, V_s, V_f, params, M=None, Q=None, with_tangent=False):
    """``P_E = V_s P(F) - p V_f cof(F)``.

    With ``with_tangent`` also returns ``dP_E/d grad_X u`` and ``dP_E/dp``
    where ``F = I + grad_X u + U(grad_X u, p)`` and ``U`` has tangents
    ``M`` (fourth order) and ``Q`` (second order); both default to zero.
    """
    if abs(V_s + V_f - 1.0) > 1e-12:
        raise ValueError("volume fractions must sum to one")
    F = np.asarray(F, dtype=float)
    p = np.asarray(p, dtype=float)
    P, A = pk1_and_tangent(F, params)
    cof = _cofactor(F)
    PE = V_s * P - V_f * p[..., None, None] * cof
    if not with_tangent:
        return PE
    DF = V_s * A - V_f * p[..., None, None, None, None] * cofactor_derivative(F)
    DH = DF if M is None else _chain(DF, M)
    Dp = -V_f * cof
    if Q is not None:
        Dp = Dp + np.einsum("...ijkl,...kl->...ij", DF, Q)
    return PE, DH, Dp


# -- micro response providers --------------------------------------------------

class LinearMicroProvider:
    """``U = M : H + Q p`` with constant tangents (``M = Q = 0``: rigid micro)."""

    def __init__(self, M=None, Q=None):
        self.M = np.zeros((3, 3, 3, 3)) if M is None else np.asarray(M, dtype=float)
        self.Q = np.zeros((3, 3)) if Q is None else np.asarray(Q, dtype=float)

    def __call__(self, H, p):
        n = len(p)
        U = np.einsum("ijkl,nkl->nij", self.M, H) + self.Q[None] * p[:, None, None]
        return U, np.broadcast_to(self.M, (n, 3, 3, 3, 3)).copy(), np.broadcast_to(self.Q, (n, 3, 3)).copy()

    def describe(self):
        return {"provider": "linear"}


class SurrogateProvider:
    """Micro response from a trained model of ``(H22, p) -> diag(U)``.

    The prediction at the origin is subtracted so that the undeformed,
    unloaded state maps to exactly zero.  Tangents are central differences.
    """

    def __init__(self, model, delta=1e-6, zero_offset=True):
        from .surrogate import surrogate_tangents

        self.model = model
        self.delta = delta
        self._tangents = surrogate_tangents
        self.offset = model.predict(np.zeros((1, 2)))[0] if zero_offset else np.zeros(3)
        self.n_extrapolated = 0

    def __call__(self, H, p):
        X = np.column_stack([H[:, 1, 1], p])
        self.n_extrapolated += int(self.model.extrapolation_flags(X).sum())
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            y = self.model.predict(X) - self.offset
            Jac = self._tangents(self.model, X, self.delta)    # (n, 3, 2)
        n = len(p)
        U = np.zeros((n, 3, 3))
        M = np.zeros((n, 3, 3, 3, 3))
        Q = np.zeros((n, 3, 3))
        for i in range(3):
            U[:, i, i] = y[:, i]
            M[:, i, i, 1, 1] = Jac[:, i, 0]
            Q[:, i, i] = Jac[:, i, 1]
        return U, M, Q

    def describe(self):
        return {"provider": "surrogate", "model_sha256": self.model.digest()}


class CellProvider:
    """Micro response from direct solves of the solid cell problem.

    Identical quadrature states are solved once; results are cached by the
    exact input bytes.  Only the tangent columns in ``components`` are
    computed (the column test varies ``H22`` and ``p`` only).
    """

    def __init__(self, problem, components=("22", "p"), delta=1e-6):
        self.problem = problem
        self.components = components
        self.delta = delta
        self.cache = {}
        self._last = None

    def _solve(self, H, p):
        from .cell import MacroState, tangents

        key = H.tobytes() + np.float64(p).tobytes()
        if key in self.cache:
            return self.cache[key]
        pr = self.problem
        start = None
        n_inc = max(1, int(np.ceil(max(np.abs(H).max(), abs(p)) / 0.05)))
        if self._last is not None:
            x0, H0, p0 = self._last
            start = (x0, H0, p0)
            n_inc = max(1, int(np.ceil(max(np.abs(H - H0).max(), abs(p - p0)) / 0.05)))
        x, _ = pr.solve_free(H, p, n_inc, start)
        self._last = (x, H.copy(), float(p))
        U = pr.average_gradient(x, H)
        tp = tangents(pr.mesh, pr.pmap, pr.params, base=MacroState(H, p), delta=self.delta,
                      problem=pr, base_solution=x, components=self.components)
        self.cache[key] = (U, tp.M, tp.Q)
        return self.cache[key]

    def __call__(self, H, p):
        out = [self._solve(np.ascontiguousarray(h), float(q)) for h, q in zip(H, p)]
        return (np.array([o[0] for o in out]), np.array([o[1] for o in out]),
                np.array([o[2] for o in out]))

    def describe(self):
        from .mesh import mesh_digest

        return {"provider": "cell", "rve_sha256": mesh_digest(self.problem.mesh),
                "poisson_ratio": self.problem.params.poisson_ratio}


# -- linear poroelastic parameters -------------------------------------------

@dataclass
class LinearPoroParams:
    C: np.ndarray              # (3, 3, 3, 3) drained stiffness
    alpha: np.ndarray          # (3, 3) Biot coefficient tensor
    biot_modulus: float
    K: np.ndarray              # (3, 3) conductivity in w = -K grad p

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.K = np.asarray(self.K, dtype=float)
        self.biot_modulus = float(self.biot_modulus)
        problems = []
        scale = np.abs(self.C).max()
        if not scale > 0:
            problems.append("stiffness is zero")
        elif np.abs(self.C - self.C.transpose(2, 3, 0, 1)).max() > 1e-8 * max(scale, 1.0):
            problems.append("stiffness lacks major symmetry")
        if not self.biot_modulus > 0:
            problems.append(f"Biot modulus must be positive, got {self.biot_modulus:g}")
        if problems:
            raise DegenerateParameterError("; ".join(problems))

    @property
    def constrained_modulus(self):
        return float(self.C[1, 1, 1, 1])

    def consolidation_coefficient(self, axis=1):
        a = self.alpha[axis, axis]
        return float(self.K[axis, axis] / (1.0 / self.biot_modulus + a * a / self.C[axis, axis, axis, axis]))


def derive_linear_params(M, Q, K_i, V_s, V_f, params, symmetrize=True):
    """Linearise the finite-strain constitutive pipeline at ``F = I, p = 0``.

    ``C = V_s A(I) : (II + M)``, ``alpha = V_f I - V_s A(I) : Q``,
    ``1/M_b = -V_s tr Q`` and ``K = V_f K_i`` (cell-average flux).
    ``symmetrize`` removes the round-off asymmetry of finite-difference
    tangents from ``C``.
    """
    M = np.asarray(M, dtype=float)
    Q = np.asarray(Q, dtype=float)
    A0 = material_tangent(I3, params)
    C = V_s * _chain(A0, M)
    if symmetrize:
        C = 0.5 * (C + C.transpose(2, 3, 0, 1))
    alpha = V_f * I3 - V_s * np.einsum("ijkl,kl->ij", A0, Q)
    tr = float(np.trace(Q)) * V_s
    if tr == 0.0:
        raise DegenerateParameterError("trace of the pressure tangent is zero; Biot modulus undefined")
    return LinearPoroParams(C, alpha, -1.0 / tr, V_f * np.asarray(K_i, dtype=float))


def isotropic_linear_params(lam, mu, alpha, biot_modulus, conductivity):
    """Scalar parameter set (isotropic stiffness, ``alpha I``, ``k I``)."""
    C = (lam * np.einsum("ij,kl->ijkl", I3, I3)
         + mu * (np.einsum("ik,jl->ijkl", I3, I3) + np.einsum("il,jk->ijkl", I3, I3)))
    return LinearPoroParams(C, alpha * I3, biot_modulus, conductivity * I3)


# -- discretisation ------------------------------------------------------------

def _g_operator(N, dNdX):
    """(E, Q, 13, 32) map from local dofs (node-major u1 u2 u3 p) to g."""
    E, Qn = dNdX.shape[:2]
    B = np.zeros((E, Qn, 13, 8, 4))
    for i in range(3):
        for j in range(3):
            B[:, :, 3 * i + j, :, i] = dNdX[..., j]
    B[:, :, 9, :, 3] = N[None]
    for j in range(3):
        B[:, :, 10 + j, :, 3] = dNdX[..., j]
    return B.reshape(E, Qn, 13, 32)


@dataclass
class ColumnSetup:
    """Geometry, loading and time-stepping controls of the confined column."""

    height: float = 7.5
    breadth: float = 0.1
    divisions: tuple = (1, 30, 1)
    load: float = -0.2
    dt: float = 1.0
    t_end: float = 1000.0
    n_ramp: int = 10
    steady_tol: float = 1e-9
    min_steps: int = 1
    max_halvings: int = 6
    rel_tol: float = 1e-10
    abs_tol: float = 1e-14
    max_iter: int = 25
    stabilization: float = 0.5            # removes the early-time overshoot at the drained face
    refresh: str = "converged"          # or "iteration"
    profile_every: int = 10

    def __post_init__(self):
        if self.refresh not in ("converged", "iteration"):
            raise ValueError("refresh must be 'converged' or 'iteration'")
        if not (self.dt > 0 and self.height > 0 and self.breadth > 0):
            raise ValueError("dt, height and breadth must be positive")
        if self.n_ramp < 1:
            raise ValueError("n_ramp must be >= 1")


class Column:
    """Mesh, constraints and quadrature data of the confined column.

    Bottom: ``u = 0``.  Sides: zero normal displacement.  Top: traction
    ``load * N`` per reference area (dead load), ``p = 0``.  All other
    boundaries are impermeable.
    """

    def __init__(self, setup):
        self.setup = setup
        mesh = generate_column_mesh(setup.height, setup.breadth, setup.divisions)
        self.mesh = mesh
        nodes = mesh.nodes
        fixed = []
        bottom = mesh.boundary_nodes("bottom")
        fixed += [4 * bottom + c for c in range(3)]
        tol = 1e-9 * max(setup.height, setup.breadth)
        for axis in (0, 2):
            lo = np.flatnonzero(np.abs(nodes[:, axis] - nodes[:, axis].min()) < tol)
            hi = np.flatnonzero(np.abs(nodes[:, axis] - nodes[:, axis].max()) < tol)
            side = np.intersect1d(np.union1d(lo, hi), mesh.boundary_nodes("sides"))
            fixed.append(4 * side + axis)
        self.top = mesh.boundary_nodes("top")
        self.bottom = bottom
        fixed.append(4 * self.top + 3)
        fixed = np.unique(np.concatenate(fixed))
        self.dofmap = fem.DofMap(mesh.n_nodes, 4, None, fixed)
        self.cell_dofs = self.dofmap.cell_dofs(mesh.cells)
        coords = nodes[mesh.cells]
        dNdX, det, w = fem.cell_geometry(coords)
        N, _ = fem.shape_functions(fem.HEX_RULE.points)
        self.dV = det * w
        self.B = _g_operator(N, dNdX)
        self.h = np.cbrt(self.dV.sum(axis=1))
        # consistent nodal forces of a unit traction along y on the top face
        parents = mesh.face_parents("top")
        Nf, _, nda, _ = fem.face_geometry(coords[parents[:, 0]], parents[:, 1])
        area = np.linalg.norm(nda, axis=2)                    # (F, Qf)
        f = np.zeros(self.dofmap.n_total)
        np.add.at(f, 4 * mesh.cells[parents[:, 0]] + 1, np.einsum("fq,fqa->fa", area, Nf))
        self.unit_traction = f
        self.top_p = 4 * self.top + 3
        self.n_qp = self.dV.size
        self.cell_y = coords[..., 1].mean(axis=1)
        self._pattern = None

    def gather(self, full):
        ue = full[self.cell_dofs]                                  # (E, 32)
        return (self.B @ ue[:, None, :, None])[..., 0]             # (E, Q, 13)

    def assemble(self, stress, tangent=None):
        """Full residual ``B^T s dV`` and (optionally) the free-dof matrix."""
        Bt = np.swapaxes(self.B, -1, -2)
        fe = ((Bt @ (stress * self.dV[..., None])[..., None])[..., 0]).sum(axis=1)
        f = np.zeros(self.dofmap.n_total)
        np.add.at(f, self.cell_dofs.ravel(), fe.ravel())
        if tangent is None:
            return f, None
        Ke = (Bt @ ((tangent * self.dV[..., None, None]) @ self.B)).sum(axis=1)
        K, _ = fem.scatter(Ke, None, self.cell_dofs, self.dofmap.n_total)
        A, _ = self.dofmap.reduce(K, np.zeros(self.dofmap.n_total))
        return f, A


@dataclass
class QPState:
    """Quadrature-point record of a converged state (flattened over E x Q)."""

    H: np.ndarray
    p: np.ndarray
    grad_p: np.ndarray
    U: np.ndarray
    M: np.ndarray
    Q: np.ndarray


@dataclass
class MacroField:
    t: float
    u_full: np.ndarray                 # (n_total,) node-major u1 u2 u3 p
    qp: QPState
    load: float = 0.0
    drained: float = 0.0               # cumulative drained volume

    @property
    def displacement(self):
        return self.u_full.reshape(-1, 4)[:, :3]

    @property
    def pressure(self):
        return self.u_full.reshape(-1, 4)[:, 3]


# -- models --------------------------------------------------------------------

class ALEModel:
    """Finite-strain homogenised model with a micro response provider."""

    kind = "ale"

    def __init__(self, provider, K_i, solid_fraction, params=None):
        self.provider = provider
        self.K_i = np.asarray(K_i, dtype=float)
        self.V_s = float(solid_fraction)
        self.V_f = 1.0 - self.V_s
        self.params = params or MaterialParams()

    def micro(self, H, p):
        return self.provider(H, p)

    def constitutive(self, g, old, dt, tau, micro=None):
        """Conjugate vector ``s`` (n, 13) and ``ds/dg`` (n, 13, 13)."""
        H = g[:, :9].reshape(-1, 3, 3)
        p = g[:, 9]
        gp = g[:, 10:]
        dH = H - old.H
        dp = p - old.p
        if micro is None:
            M, Q = old.M, old.Q
            U = old.U + np.einsum("nijkl,nkl->nij", M, dH) + Q * dp[:, None, None]
        else:
            U, M, Q = micro
        F = I3 + H + U
        Vs, Vf = self.V_s, self.V_f
        P, A = pk1_and_tangent(F, self.params)
        cof = _cofactor(F)
        dC = cofactor_derivative(F)
        T, dT = _flux_operator(F, self.K_i)
        n = len(p)
        s = np.zeros((n, 13))
        D = np.zeros((n, 13, 13))
        PE = Vs * P - Vf * p[:, None, None] * cof
        DF = Vs * A - Vf * p[:, None, None, None, None] * dC
        dU = U - old.U
        W = Vs * dU - Vf * dH
        stor = np.einsum("nij,nij->n", cof, W)
        dstor_dF = np.einsum("nij,nijkl->nkl", W, dC)
        q = -Vf * np.einsum("nij,nj->ni", T, gp)
        dq_dF = -Vf * np.einsum("nijkl,nj->nikl", dT, gp)
        s[:, :9] = PE.reshape(n, 9)
        s[:, 9] = stor
        s[:, 10:] = dt * q - tau[:, None] * (gp - old.grad_p)
        chainH = II + M                                               # dF/dH
        D[:, :9, :9] = np.einsum("nijkl,nklmo->nijmo", DF, chainH).reshape(n, 9, 9)
        D[:, :9, 9] = (np.einsum("nijkl,nkl->nij", DF, Q) - Vf * cof).reshape(n, 9)
        D[:, 9, :9] = (np.einsum("nkl,nklmo->nmo", dstor_dF, chainH)
                       + Vs * np.einsum("nij,nijmo->nmo", cof, M) - Vf * cof).reshape(n, 9)
        D[:, 9, 9] = np.einsum("nkl,nkl->n", dstor_dF, Q) + Vs * np.einsum("nij,nij->n", cof, Q)
        D[:, 10:, :9] = dt * np.einsum("nikl,nklmo->nimo", dq_dF, chainH).reshape(n, 3, 9)
        D[:, 10:, 9] = dt * np.einsum("nikl,nkl->ni", dq_dF, Q)
        D[:, 10:, 10:] = -dt * Vf * T - tau[:, None, None] * I3
        return s, D

    def modulus(self):
        A0 = material_tangent(I3, self.params)
        return self.V_s * A0[1, 1, 1, 1]

    def describe(self):
        d = {"model": "ale", "solid_fraction": self.V_s, "poisson_ratio": self.params.poisson_ratio,
             "K_i": self.K_i.ravel().tolist()}
        d.update(self.provider.describe())
        return d


class LinearModel:
    """Small-strain Biot model: ``sigma = C:eps - alpha p``, ``w = -K grad p``."""

    kind = "linear"

    def __init__(self, lin):
        self.lin = lin

    def micro(self, H, p):
        k = len(p)
        return np.zeros((k, 3, 3)), np.zeros((k, 3, 3, 3, 3)), np.zeros((k, 3, 3))

    def constitutive(self, g, old, dt, tau, micro=None):
        lin = self.lin
        H = g[:, :9].reshape(-1, 3, 3)
        p = g[:, 9]
        gp = g[:, 10:]
        n = len(p)
        s = np.zeros((n, 13))
        D = np.zeros((n, 13, 13))
        s[:, :9] = (np.einsum("ijkl,nkl->nij", lin.C, H) - lin.alpha * p[:, None, None]).reshape(n, 9)
        s[:, 9] = -(np.einsum("ij,nij->n", lin.alpha, H - old.H) + (p - old.p) / lin.biot_modulus)
        s[:, 10:] = -dt * gp @ lin.K.T - tau[:, None] * (gp - old.grad_p)
        D[:, :9, :9] = lin.C.reshape(9, 9)
        D[:, :9, 9] = -lin.alpha.ravel()
        D[:, 9, :9] = -lin.alpha.ravel()
        D[:, 9, 9] = -1.0 / lin.biot_modulus
        D[:, 10:, 10:] = -dt * lin.K - tau[:, None, None] * I3
        return s, D

    def modulus(self):
        return self.lin.constrained_modulus

    def describe(self):
        lin = self.lin
        return {"model": "linear", "C2222": lin.C[1, 1, 1, 1], "C2211": lin.C[1, 1, 0, 0],
                "alpha22": lin.alpha[1, 1], "biot_modulus": lin.biot_modulus, "K22": lin.K[1, 1]}


# -- time stepping -------------------------------------------------------------

def initial_field(column, model):
    n = column.n_qp
    H = np.zeros((n, 3, 3))
    p = np.zeros(n)
    U, M, Q = model.micro(H, p)
    return MacroField(0.0, np.zeros(column.dofmap.n_total), QPState(H, p, np.zeros((n, 3)), U, M, Q))


def _qp_split(g):
    n = g.shape[0] * g.shape[1]
    g = g.reshape(n, 13)
    return g[:, :9].reshape(n, 3, 3).copy(), g[:, 9].copy(), g[:, 10:].copy()


def _system(column, model, old, dt, load, tau, refresh):
    dm = column.dofmap
    fext = load * column.unit_traction

    def rj(x, with_matrix=True):
        full = dm.expand(x)
        g = column.gather(full).reshape(-1, 13)
        micro = None
        if refresh == "iteration":
            H, p, _ = _qp_split(g.reshape(column.dV.shape + (13,)))
            micro = model.micro(H, p)
        s, D = model.constitutive(g, old, dt, tau, micro)
        shape = column.dV.shape
        f, A = column.assemble(s.reshape(shape + (13,)), D.reshape(shape + (13, 13)) if with_matrix else None)
        f = f - fext
        R = f[dm.free]
        return R, A, f

    return rj


def step(column, model, state, dt, load, setup=None):
    """Advance ``state`` by ``dt`` under top traction ``load``; returns the new field.

    Raises ``ConvergenceError`` when Newton fails (the caller may cut ``dt``).
    """
    setup = setup or column.setup
    if not dt > 0:
        raise ValueError("dt must be positive")
    tau = setup.stabilization * column.h**2 / model.modulus()
    tau = np.repeat(tau, column.dV.shape[1])
    rj = _system(column, model, state.qp, dt, load, tau, setup.refresh)

    def residual_and_jacobian(x):
        R, A, _ = rj(x)
        return R, A

    x0 = column.dofmap.restrict(state.u_full)
    try:
        res = fem.newton_solve(residual_and_jacobian, x0, rel_tol=setup.rel_tol, abs_tol=setup.abs_tol,
                               max_iter=setup.max_iter,
                               residual_only=lambda x: rj(x, with_matrix=False)[0])
    except (SolverError, ValueError, ArithmeticError) as exc:
        if isinstance(exc, ConvergenceError):
            raise
        raise ConvergenceError(f"step failed: {exc}") from exc
    _, _, f_full = rj(res.x, with_matrix=False)
    drained = float(f_full[column.top_p].sum())
    full = column.dofmap.expand(res.x)
    g = column.gather(full)
    H, p, gp = _qp_split(g)
    U, M, Q = model.micro(H, p)
    qp = QPState(H, p, gp, U, M, Q)
    new = MacroField(state.t + dt, full, qp, load, state.drained + drained)
    new.newton_iterations = res.iterations
    return new


def _step_with_halving(column, model, state, dt, load, setup, depth=0):
    try:
        return step(column, model, state, dt, load, setup), 1
    except ConvergenceError as exc:
        if depth >= setup.max_halvings:
            raise ConvergenceError(f"step at t={state.t:g} failed after {depth} time-step halvings",
                                   exc.history) from exc
        log.info("halving dt=%g at t=%g", dt, state.t)
        mid, n1 = _step_with_halving(column, model, state, dt / 2, load, setup, depth + 1)
        end, n2 = _step_with_halving(column, model, mid, dt / 2, load, setup, depth + 1)
        return end, n1 + n2


# -- outputs -------------------------------------------------------------------

HISTORY_COLUMNS = ("step", "time", "dt", "load", "settlement", "p_bottom", "p_max",
                   "p_max_y", "drained", "pore_volume_change", "newton_iterations")
NODE_COLUMNS = ("step", "time", "y", "pressure", "settlement")
CELL_COLUMNS = ("step", "time", "y", "K11", "K22", "F11", "F22", "F33", "H22", "U11", "U22",
                "M1122", "M2222", "Q11", "Q22", "w2_ale", "w2_linear")


def pore_volume(column, model, field):
    """Pore volume change from the state alone.

    Finite strain: ``int (det(I+H) - 1) - V_s (det Fbar - 1) dV``.
    Linear: the fluid content ``int alpha : eps + p / M dV``.
    """
    qp = field.qp
    if model.kind == "linear":
        lin = model.lin
        zeta = np.einsum("ij,nij->n", lin.alpha, qp.H) + qp.p / lin.biot_modulus
        return float((zeta * column.dV.ravel()).sum())
    Fm = I3 + qp.H
    Fb = Fm + qp.U
    change = (np.linalg.det(Fm) - 1.0) - model.V_s * (np.linalg.det(Fb) - 1.0)
    return float((change * column.dV.ravel()).sum())


@dataclass
class TimeSeries:
    kind: str
    history: list = field(default_factory=list)
    node_profiles: list = field(default_factory=list)
    cell_profiles: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def column(self, name):
        k = HISTORY_COLUMNS.index(name)
        return np.array([r[k] for r in self.history])

    @property
    def times(self):
        return self.column("time")

    @property
    def settlement(self):
        return self.column("settlement")

    @property
    def p_bottom(self):
        return self.column("p_bottom")

    @property
    def drained(self):
        return self.column("drained")

    def table(self, which="history", sep="\t"):
        cols, rows = {"history": (HISTORY_COLUMNS, self.history),
                      "nodes": (NODE_COLUMNS, self.node_profiles),
                      "cells": (CELL_COLUMNS, self.cell_profiles)}[which]
        out = [sep.join(cols)]
        for r in rows:
            out.append(sep.join(str(int(v)) if k in ("step", "newton_iterations") else format(float(v), ".17g")
                                for k, v in zip(cols, r)))
        return "\n".join(out) + "\n"

    def write(self, directory, prefix=None):
        from pathlib import Path

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        prefix = prefix or self.kind
        paths = {}
        for which in ("history", "nodes", "cells"):
            p = d / f"{prefix}_{which}.tsv"
            p.write_text(self.table(which))
            paths[which] = p
        return paths


def _record(series, column, model, field, k, dt, newton, profile):
    pres = field.pressure
    u = field.displacement
    settlement = float(-u[column.top, 1].min())
    p_bottom = float(pres[column.bottom].max())
    imax = int(np.argmax(pres))
    series.history.append((k, field.t, dt, field.load, settlement, p_bottom, float(pres.max()),
                           float(column.mesh.nodes[imax, 1]), field.drained,
                           pore_volume(column, model, field), newton))
    if not profile:
        return
    ys = column.mesh.nodes[:, 1]
    order = np.lexsort((column.mesh.nodes[:, 0], column.mesh.nodes[:, 2], ys))
    seen = set()
    for i in order:
        if ys[i] in seen:
            continue
        seen.add(ys[i])
        series.node_profiles.append((k, field.t, ys[i], pres[i], -u[i, 1]))
    qp = field.qp
    E, Qn = column.dV.shape
    Fb = (I3 + qp.H + qp.U)
    K_i = getattr(model, "K_i", None)
    if K_i is not None:
        Kt = transformed_conductivity(Fb, K_i)
        Gw, w = transformed_darcy(Fb, K_i, qp.grad_p, untransformed=True)
    else:
        Kt = np.broadcast_to(model.lin.K, Fb.shape)
        w = -qp.grad_p @ model.lin.K.T
        Gw = w
    w_lin = -qp.grad_p @ (K_i if K_i is not None else model.lin.K).T

    def cell_mean(a):
        return a.reshape((E, Qn) + a.shape[1:]).mean(axis=1)

    vals = {
        "K11": cell_mean(Kt[:, 0, 0]), "K22": cell_mean(Kt[:, 1, 1]),
        "F11": cell_mean(Fb[:, 0, 0]), "F22": cell_mean(Fb[:, 1, 1]), "F33": cell_mean(Fb[:, 2, 2]),
        "H22": cell_mean(qp.H[:, 1, 1]), "U11": cell_mean(qp.U[:, 0, 0]), "U22": cell_mean(qp.U[:, 1, 1]),
        "M1122": cell_mean(qp.M[:, 0, 0, 1, 1]), "M2222": cell_mean(qp.M[:, 1, 1, 1, 1]),
        "Q11": cell_mean(qp.Q[:, 0, 0]), "Q22": cell_mean(qp.Q[:, 1, 1]),
        "w2_ale": cell_mean(w[:, 1]), "w2_linear": cell_mean(w_lin[:, 1]),
    }
    for e in np.argsort(column.cell_y, kind="stable"):
        series.cell_profiles.append((k, field.t, column.cell_y[e]) + tuple(vals[c][e] for c in CELL_COLUMNS[3:]))


def _march(column, model, setup, callback=None):
    series = TimeSeries(model.kind, meta={"setup": setup.__dict__.copy(), "model": model.describe()})
    state = initial_field(column, model)
    _record(series, column, model, state, 0, 0.0, 0, True)
    k = 0
    t0 = time.perf_counter()
    for r in range(1, setup.n_ramp + 1):
        load = setup.load * r / setup.n_ramp
        dt = setup.dt / setup.n_ramp
        state, _ = _step_with_halving(column, model, state, dt, load, setup)
        k += 1
        _record(series, column, model, state, k, dt, state.newton_iterations, k % setup.profile_every == 0)
    prev = series.history[-1][4]
    n_after = 0
    steady = False
    while state.t < setup.t_end - 1e-12 * setup.t_end:
        dt = min(setup.dt, setup.t_end - state.t)
        state, _ = _step_with_halving(column, model, state, dt, setup.load, setup)
        k += 1
        n_after += 1
        s = float(-state.displacement[column.top, 1].min())
        # relative to the settlement so small and large loads stop equally late
        steady = abs(s - prev) <= setup.steady_tol * abs(s) and n_after >= setup.min_steps
        _record(series, column, model, state, k, dt, state.newton_iterations,
                steady or k % setup.profile_every == 0)
        if callback is not None:
            callback(state, series)
        prev = s
        if steady:
            break
    if not steady and (not series.node_profiles or series.node_profiles[-1][0] != k):
        _record(series, column, model, state, k, 0.0, 0, True)
        series.history.pop()
    series.meta.update({"steps": k, "steady": steady, "wall_time_s": time.perf_counter() - t0})
    series.final_state = state
    return series


def run_consolidation(setup, provider, K_i, solid_fraction, params=None, callback=None):
    """Confined compression of the column with the finite-strain model."""
    column = Column(setup)
    model = ALEModel(provider, K_i, solid_fraction, params)
    return _march(column, model, setup, callback)


def run_linear_reference(setup, lin, callback=None):
    """Same column, loading and time stepping with the linear Biot model."""
    column = Column(setup)
    return _march(column, LinearModel(lin), replace(setup, refresh="converged"), callback)
