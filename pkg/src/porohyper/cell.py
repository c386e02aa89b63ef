"""Nonlinear periodic solid cell problem.

Given a macroscopic displacement gradient ``H`` and pore pressure ``p``, find
the periodic fluctuation ``u1`` on the solid phase such that::

    int_s P(I + H + grad u1) : grad v dV + p int_G (cof F N) . v dS = 0

for all periodic ``v``, with ``N`` the outward normal of the solid on the
pore walls and ``cof F = J F^-T``.  The output handed to the macroscale is
the solid mean of ``grad u1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem
from .exceptions import ConvergenceError, DegenerateParameterError, SolverError, TangentError
from .material import MaterialParams, cofactor_derivative, pk1_and_tangent, strain_energy
from .mesh import periodic_pairs

log = logging.getLogger(__name__)

COMPONENT_NAMES = tuple(f"{i + 1}{j + 1}" for i in range(3) for j in range(3))


@dataclass(frozen=True)
class MacroState:
    grad_u0: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    p0: float = 0.0

    def __post_init__(self):
        g = np.array(self.grad_u0, dtype=float).reshape(3, 3)
        g.setflags(write=False)
        object.__setattr__(self, "grad_u0", g)
        object.__setattr__(self, "p0", float(self.p0))
        if np.linalg.det(g + np.eye(3)) <= 0:
            raise ValueError("macroscale deformation gradient is not admissible")

    def as_vector(self):
        return np.concatenate([self.grad_u0.ravel(), [self.p0]])

    @classmethod
    def from_vector(cls, v):
        v = np.asarray(v, dtype=float)
        return cls(v[:9].reshape(3, 3), v[9])


@dataclass
class MicroResponse:
    u1_field: np.ndarray           # (N, 3) nodal fluctuation
    avg_grad_u1: np.ndarray        # (3, 3) solid mean
    psi_field: np.ndarray          # (E, Q) energy density at quadrature points
    psi_avg: float
    psi_max: float
    converged_increments: int
    state: MacroState
    max_grad_u1: np.ndarray | None = None   # (3, 3) max |component| over qp


@dataclass
class TangentPair:
    M: np.ndarray      # (3, 3, 3, 3): d avg_grad_u1[i,j] / d grad_u0[k,l]
    Q: np.ndarray      # (3, 3): d avg_grad_u1 / d p0


def _b_operator(dNdX):
    """Gradient operator (..., 9, 24): grad[3i+j] = sum_a u[3a+i] dN[a, j]."""
    shape = dNdX.shape[:-2]
    B = np.zeros(shape + (3, 3, 8, 3))
    for i in range(3):
        B[..., i, :, :, i] = np.swapaxes(dNdX, -1, -2)
    return B.reshape(shape + (9, 24))


class SolidCellProblem:
    """Precomputed discretisation of the solid cell problem on one mesh."""

    def __init__(self, mesh, params=None, periodic_map=None, pin_node=None,
                 rel_tol=1e-8, abs_tol=1e-10, max_iter=25):
        self.mesh = mesh
        self.params = params or MaterialParams()
        self.pmap = periodic_map if periodic_map is not None else periodic_pairs(mesh)
        self.rel_tol, self.abs_tol, self.max_iter = rel_tol, abs_tol, max_iter
        reps = self.pmap.representatives(mesh.n_nodes)
        if pin_node is None:
            pin_node = int(np.argmin(np.linalg.norm(mesh.nodes, axis=1)))
        self.pin_node = int(pin_node)
        pin = reps[self.pin_node]
        self.dofmap = fem.DofMap(mesh.n_nodes, 3, reps, fixed_dofs=3 * pin + np.arange(3))
        self.cell_dofs = self.dofmap.cell_dofs(mesh.cells)

        coords = mesh.nodes[mesh.cells]
        dNdX, det, w = fem.cell_geometry(coords)
        self.dNdX = dNdX
        self.dV = det * w                                   # (E, Q)
        self.volume = float(self.dV.sum())
        # voxel meshes share one element geometry; keep a single operator then
        if np.allclose(dNdX, dNdX[:1], rtol=0, atol=1e-12 * np.abs(dNdX).max()):
            self.B = _b_operator(dNdX[:1])                  # (1, Q, 9, 24)
        else:
            self.B = _b_operator(dNdX)                      # (E, Q, 9, 24)

        faces = mesh.boundary.get("interface", np.zeros((0, 4), int))
        if len(faces):
            parents = mesh.face_parents("interface")
            self.face_cells = parents[:, 0]
            Nf, dNf, nda, _ = fem.face_geometry(coords[parents[:, 0]], parents[:, 1])
            self.face_N = Nf                                # (F, Qf, 8)
            self.face_B = _b_operator(dNf)                  # (F, Qf, 9, 24)
            self.face_nda = nda                             # (F, Qf, 3)
        else:
            self.face_cells = np.zeros(0, dtype=int)
        self._pattern = None
        self._modes = None
        self._amg = None

    # -- kinematics --------------------------------------------------------
    def grad(self, u_full, B=None, cells=None):
        cells = slice(None) if cells is None else cells
        ue = u_full[self.cell_dofs[cells]]
        B = self.B if B is None else B
        return (B @ ue[:, None, :, None])[..., 0]

    def _deformation(self, u_full, H):
        g = self.grad(u_full)                               # (E, Q, 9)
        return np.eye(3) + H + g.reshape(g.shape[:-1] + (3, 3))

    # -- residual and tangent ---------------------------------------------
    def _assemble(self, u_full, H, p, with_matrix=True):
        F = self._deformation(u_full, H)
        P, A = pk1_and_tangent(F, self.params)
        E = len(self.mesh.cells)
        wP = P.reshape(E, -1, 1, 9) * self.dV[..., None, None]
        D = A.reshape(E, -1, 9, 9) * self.dV[..., None, None] if with_matrix else None
        fe = np.zeros((E, 24))
        Ke = np.zeros((E, 24, 24)) if with_matrix else None
        for q in range(self.dV.shape[1]):
            Bq = self.B[:, q]
            fe += (wP[:, q] @ Bq)[:, 0]
            if with_matrix:
                Ke += np.swapaxes(Bq, -1, -2) @ (D[:, q] @ Bq)
        if p != 0.0 and len(self.face_cells):
            fc = self.face_cells
            ue = u_full[self.cell_dofs[fc]]
            g = (self.face_B @ ue[:, None, :, None])[..., 0]
            Ff = np.eye(3) + H + g.reshape(g.shape[:-1] + (3, 3))
            J = np.linalg.det(Ff)
            FinvT = np.swapaxes(np.linalg.inv(Ff), -1, -2)
            cof = J[..., None, None] * FinvT
            t = p * np.einsum("fqij,fqj->fqi", cof, self.face_nda)   # (F, Qf, 3)
            ff = np.einsum("fqa,fqi->fai", self.face_N, t).reshape(len(fc), 24)
            np.add.at(fe, fc, ff)
            if with_matrix:
                dC = cofactor_derivative(Ff)
                T = p * np.einsum("fqijkl,fqj->fqikl", dC, self.face_nda).reshape(len(fc), -1, 3, 9)
                # K[a i, b k] = N_a T[i, kl] dN_b[l]  ->  N_a (T @ B)[i, b k]
                TB = T @ self.face_B                                   # (F, Qf, 3, 24)
                Kf = np.einsum("fqa,fqin->fain", self.face_N, TB).reshape(len(fc), 24, 24)
                np.add.at(Ke, fc, Kf)
        R_full = np.zeros(self.dofmap.n_total)
        np.add.at(R_full, self.cell_dofs.ravel(), fe.ravel())
        R = np.zeros(self.dofmap.n_free)
        m = self.dofmap.free_index >= 0
        np.add.at(R, self.dofmap.free_index[m], R_full[m])
        if not with_matrix:
            return R, None
        K = self._matrix(Ke)
        return R, K

    def _matrix(self, Ke):
        if self._pattern is None:
            ne = 24
            rows = np.repeat(self.cell_dofs, ne, axis=1).ravel()
            cols = np.tile(self.cell_dofs, (1, ne)).ravel()
            fi = self.dofmap.free_index
            r, c = fi[rows], fi[cols]
            keep = (r >= 0) & (c >= 0)
            n = self.dofmap.n_free
            # map each kept entry to its slot in the summed CSR structure
            csr = sp.csr_matrix((np.ones(keep.sum()), (r[keep], c[keep])), shape=(n, n))
            csr.sum_duplicates()
            csr.sort_indices()
            order = np.lexsort((c[keep], r[keep]))
            rs, cs = r[keep][order], c[keep][order]
            new = np.ones(len(rs), bool)
            new[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
            slot_sorted = np.cumsum(new) - 1
            slot = np.empty(len(rs), dtype=np.int64)
            slot[order] = slot_sorted
            self._pattern = (keep, slot, csr.indptr, csr.indices, n)
        keep, slot, indptr, indices, n = self._pattern
        data = np.bincount(slot, weights=Ke.ravel()[keep], minlength=len(indices))
        return sp.csr_matrix((data, indices, indptr), shape=(n, n))

    def residual(self, x, H, p):
        return self._assemble(self.dofmap.expand(x), H, p, with_matrix=False)[0]

    def residual_and_jacobian(self, x, H, p):
        return self._assemble(self.dofmap.expand(x), H, p)

    # -- solving -------------------------------------------------------------
    def linear_solver(self, K, reuse=True):
        """Krylov solver for ``K``; the AMG hierarchy is shared between calls."""
        if self._modes is None:
            self._modes = fem.translation_modes(self.dofmap)
        if reuse and self._amg is not None:
            return self._amg.update(K)
        solver = fem.AMGSolver(K, self._modes)
        if reuse:
            self._amg = solver
        return solver

    def _rj_solver(self, x, H, p):
        R, K = self.residual_and_jacobian(x, H, p)
        return R, self.linear_solver(K)

    def _newton(self, x0, H, p):
        return fem.newton_solve(
            lambda x: self._rj_solver(x, H, p), x0,
            rel_tol=self.rel_tol, abs_tol=self.abs_tol, max_iter=self.max_iter,
            residual_only=lambda x: self.residual(x, H, p)).x

    def solve_free(self, H, p, n_increments=20, start=None, max_bisections=5):
        """Ramp linearly from ``start = (x, H0, p0)`` (default: zero) to (H, p)."""
        H = np.asarray(H, dtype=float).reshape(3, 3)
        if start is None:
            x = np.zeros(self.dofmap.n_free)
            H0, p0 = np.zeros((3, 3)), 0.0
        else:
            x, H0, p0 = start
            x = np.array(x, dtype=float)
        s, ds = 0.0, 1.0 / max(int(n_increments), 1)
        bisections = 0
        done = 0
        while s < 1.0 - 1e-14:
            s1 = min(1.0, s + ds)
            Hs = H0 + s1 * (H - H0)
            ps = p0 + s1 * (p - p0)
            try:
                x = self._newton(x, Hs, ps)
            except (ConvergenceError, SolverError, ValueError) as exc:
                bisections += 1
                if bisections > max_bisections:
                    raise ConvergenceError(
                        f"cell problem failed after {max_bisections} bisections at load fraction {s:.4f}",
                        getattr(exc, "history", ()), fraction=s) from exc
                ds *= 0.5
                continue
            s = s1
            done += 1
        return x, done

    def response(self, x, H, p, increments=0):
        u = self.dofmap.expand(x)
        F = self._deformation(u, H)
        g = F - np.eye(3) - H
        avg = np.einsum("eqij,eq->ij", g, self.dV) / self.volume
        psi = strain_energy(F, self.params)
        return MicroResponse(
            u1_field=u.reshape(-1, 3), avg_grad_u1=avg, psi_field=psi,
            psi_avg=float((psi * self.dV).sum() / self.volume), psi_max=float(psi.max()),
            converged_increments=increments, state=MacroState(H, p),
            max_grad_u1=np.abs(g).max(axis=(0, 1)))

    def solve(self, state, n_increments=20, start=None):
        x, n = self.solve_free(state.grad_u0, state.p0, n_increments, start)
        return self.response(x, state.grad_u0, state.p0, n), x

    def average_gradient(self, x, H):
        u = self.dofmap.expand(x)
        g = self.grad(u)
        return np.einsum("eqk,eq->k", g, self.dV).reshape(3, 3) / self.volume

    def chord_solve(self, x0, H, p, lu, rel_tol=1e-12, abs_tol=1e-15, max_iter=30):
        """Fixed-Jacobian iteration reusing factor ``lu``; falls back to Newton."""
        x = np.array(x0, dtype=float)
        R = self.residual(x, H, p)
        r0 = np.linalg.norm(R)
        target = max(rel_tol * r0, abs_tol)
        for _ in range(max_iter):
            if np.linalg.norm(R) <= target:
                return x
            x = x - lu.solve(R)
            R = self.residual(x, H, p)
        log.debug("chord iteration stalled; switching to Newton")
        return fem.newton_solve(lambda z: self._rj_solver(z, H, p), x,
                                rel_tol=rel_tol, abs_tol=abs_tol, max_iter=self.max_iter).x


def solve_rve(mesh, periodic_map, params, target, n_increments=20, problem=None):
    """Incrementally solve the cell problem for ``target`` (a ``MacroState``)."""
    problem = problem or SolidCellProblem(mesh, params, periodic_map)
    return problem.solve(target, n_increments)[0]


def _fd_component(problem, x_base, base, lu, k, h):
    H = base.grad_u0.copy()
    p = base.p0
    if k < 9:
        H = H.copy()
        H.flat[k] += h
    else:
        p = p + h
    x = problem.chord_solve(x_base, H, p, lu)
    return problem.average_gradient(x, H)


def tangents(mesh, periodic_map, params, base=None, delta=1e-6, scheme="central",
             problem=None, base_solution=None, n_increments=20, components=None):
    """Finite-difference tangents of the averaged micro gradient.

    Perturbed problems restart from the converged base field and reuse the
    base Jacobian preconditioner.  ``components`` limits the perturbed
    inputs (names ``'11'``..``'33'`` and ``'p'``); the remaining tangent
    columns are left at zero.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    problem = problem or SolidCellProblem(mesh, params, periodic_map)
    base = base or MacroState()
    if base_solution is None:
        if np.any(base.as_vector()):
            _, base_solution = problem.solve(base, n_increments)
        else:
            base_solution = np.zeros(problem.dofmap.n_free)
    _, K = problem.residual_and_jacobian(base_solution, base.grad_u0, base.p0)
    lu = problem.linear_solver(K, reuse=False)
    U0 = problem.average_gradient(base_solution, base.grad_u0)
    names = COMPONENT_NAMES + ("p",)
    active = set(range(10)) if components is None else {names.index(c) for c in components}
    cols = []
    for k in range(10):
        name = names[k]
        if k not in active:
            cols.append(np.zeros((3, 3)))
            continue
        try:
            up = _fd_component(problem, base_solution, base, lu, k, delta)
            if scheme == "central":
                um = _fd_component(problem, base_solution, base, lu, k, -delta)
                cols.append((up - um) / (2 * delta))
            elif scheme == "forward":
                cols.append((up - U0) / delta)
            else:
                raise ValueError(f"unknown scheme {scheme!r}")
        except (ConvergenceError, SolverError) as exc:
            raise TangentError(f"perturbed solve failed for component {name}", name) from exc
    M = np.stack(cols[:9], axis=-1).reshape(3, 3, 3, 3)
    Q = cols[9]
    return TangentPair(M, Q)


def biot_modulus(Q, solid_fraction=1.0):
    """``-1 / tr<Q>_s`` with ``<Q>_s = solid_fraction * Q``."""
    tr = float(np.trace(np.asarray(Q))) * solid_fraction
    if tr == 0.0 or not np.isfinite(tr):
        raise DegenerateParameterError("trace of the pressure tangent is zero")
    return -1.0 / tr


def oat_sweep(problem, component, values, conductivity=None):
    """One-factor-at-a-time sweep over ``component`` (``'11'``..``'33'`` or ``'p'``).

    Each row is solved by continuation from the previous one.  Failed rows
    are recorded with ``ok = False`` and the sweep continues.
    """
    from .macro import transformed_conductivity

    k = COMPONENT_NAMES.index(component) if component != "p" else 9
    rows = []
    x, prev = None, np.zeros(10)
    for v in np.atleast_1d(values):
        vec = np.zeros(10)
        vec[k] = v
        state = MacroState.from_vector(vec)
        start = None if x is None else (x, prev[:9].reshape(3, 3), prev[9])
        try:
            n_inc = 1 if x is not None else max(1, int(np.ceil(abs(v) / 0.01)))
            xs, _ = problem.solve_free(state.grad_u0, state.p0, n_inc, start)
            resp = problem.response(xs, state.grad_u0, state.p0)
            row = {"value": float(v), "ok": True, "avg": resp.avg_grad_u1.copy(),
                   "max": resp.max_grad_u1, "psi_avg": resp.psi_avg, "psi_max": resp.psi_max}
            if conductivity is not None:
                Fbar = np.eye(3) + state.grad_u0 + resp.avg_grad_u1
                row["K_diag"] = np.diag(transformed_conductivity(Fbar, conductivity)).copy()
            x, prev = xs, vec
        except (ConvergenceError, SolverError, ValueError) as exc:
            log.warning("sweep point %s=%g failed: %s", component, v, exc)
            row = {"value": float(v), "ok": False}
        rows.append(row)
    return rows
