"""Periodic Stokes cell problems and the hydraulic conductivity tensor.

For each unit body force ``e_i`` solve on the fluid cell::

    mu lap(k_i) - grad(p_i) + e_i = 0,   div(k_i) = 0

with no-slip on the pore walls and periodicity on the cube faces.  Column
``i`` of the conductivity ``K_i`` is the fluid-volume mean of ``k_i``; the
cell-volume average is ``fluid_fraction * K_i``.

Equal-order trilinear velocity and pressure are stabilised by a pressure
Laplacian with per-cell weight ``beta = beta_coef * h**2 / mu``.  With
``consistent=True`` the body force is carried into the stabilisation
term as well (residual-based form), otherwise the plain
pressure-Laplacian form is used.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from . import fem
from .exceptions import SolverError
from .mesh import periodic_pairs


@dataclass
class StokesCellSolution:
    velocity: np.ndarray          # (3, N, 3): velocity field of solution i at each node
    pressure: np.ndarray          # (3, N)
    K: np.ndarray                 # (3, 3) conductivity, fluid-volume mean
    fluid_fraction: float
    divergence: np.ndarray        # (3,) fluid mean of |div k_i|
    net_divergence: np.ndarray    # (3,) fluid mean of div k_i (signed)
    viscosity: float

    @property
    def K_cell_average(self):
        """Conductivity averaged over the whole cell."""
        return self.K * self.fluid_fraction

    def table(self, sep="\t"):
        rows = [sep.join(["row", "K_1", "K_2", "K_3", "Kcell_1", "Kcell_2", "Kcell_3",
                          "mean_abs_div", "mean_div"])]
        Kc = self.K_cell_average
        for i in range(3):
            vals = ([f"{v:.17g}" for v in self.K[i]] + [f"{v:.17g}" for v in Kc[i]]
                    + [f"{self.divergence[i]:.17g}", f"{self.net_divergence[i]:.17g}"])
            rows.append(sep.join([str(i + 1)] + vals))
        return "\n".join(rows) + "\n"


def _element_matrices(coords, mu, beta_coef):
    dNdX, det, w = fem.cell_geometry(coords)
    N, _ = fem.shape_functions(fem.HEX_RULE.points)
    dV = det * w                                            # (E, Q)
    E = len(coords)
    h = np.cbrt(dV.sum(axis=1))
    beta = beta_coef * h**2 / mu
    lap = np.einsum("eq,eqai,eqbi->eab", dV, dNdX, dNdX)    # (E, 8, 8)
    div = np.einsum("eq,qc,eqbj->ecbj", dV, N, dNdX)        # (E, 8, 8, 3)
    Ke = np.zeros((E, 8, 4, 8, 4))
    for i in range(3):
        Ke[:, :, i, :, i] = mu * lap
        Ke[:, :, 3, :, i] = -div[..., i]                    # -(q, div u)
        Ke[:, :, i, :, 3] = -np.swapaxes(div[..., i], 1, 2)  # -(p, div v)
    Ke[:, :, 3, :, 3] = -beta[:, None, None] * lap
    mass = np.einsum("eq,qa->ea", dV, N)                    # int N_a
    grad = np.einsum("eq,eqai->eai", dV, dNdX)              # int grad N_a
    return Ke.reshape(E, 32, 32), mass, grad, beta, dV, dNdX


def _fluid_components(mesh, reps):
    c = reps[mesh.cells]
    rows = np.repeat(c[:, 0], 7)
    cols = c[:, 1:].ravel()
    n = mesh.n_nodes
    graph = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    used = np.unique(c)
    ncomp, labels = connected_components(graph, directed=False)
    return len(np.unique(labels[used]))


def _fold(dofmap, f):
    out = np.zeros(dofmap.n_free)
    m = dofmap.free_index >= 0
    np.add.at(out, dofmap.free_index[m], f[m])
    return out


class _SaddleSolver:
    """MINRES on the symmetric stabilised saddle system.

    Block-diagonal preconditioner: AMG for the viscous block and AMG for
    ``M_p / mu + C`` on the pressure block.  The pressure is determined up
    to a constant; the right-hand sides are consistent, so MINRES returns
    a solution that is afterwards shifted to zero mean.
    """

    def __init__(self, S, Mp, comp, mu, rtol=1e-12, maxiter=5000):
        self.S = sp.csr_matrix(S)
        self.u = np.flatnonzero(comp < 3)
        self.p = np.flatnonzero(comp == 3)
        Auu = self.S[self.u][:, self.u]
        Cpp = -self.S[self.p][:, self.p]
        Spp = (Mp[self.p][:, self.p] / mu + Cpp).tocsr()
        self._mu = fem.amg_hierarchy(Auu.tocsr(), symmetry="hermitian")
        self._mp = fem.amg_hierarchy(Spp, symmetry="hermitian")
        self.rtol, self.maxiter = rtol, maxiter
        n = self.S.shape[0]

        def apply(r):
            z = np.empty_like(r)
            z[self.u] = self._mu.solve(r[self.u], maxiter=1, cycle="V", tol=1e-30)
            z[self.p] = self._mp.solve(r[self.p], maxiter=1, cycle="V", tol=1e-30)
            return z

        self.M = spla.LinearOperator((n, n), matvec=apply, dtype=float)

    def solve(self, b):
        x, info = spla.minres(self.S, b, rtol=self.rtol, maxiter=self.maxiter, M=self.M)
        if info != 0:
            raise SolverError(f"MINRES did not converge (info={info})")
        return x


def solve_stokes_cell(mesh, periodic_map=None, viscosity=1e-3, beta_coef=0.1,
                      consistent=True, cell_volume=None, rtol=1e-12):
    """Solve the three directional cell problems on ``mesh`` (fluid phase)."""
    mu = float(viscosity)
    if not mu > 0:
        raise ValueError("viscosity must be positive")
    pmap = periodic_map if periodic_map is not None else periodic_pairs(mesh)
    reps = pmap.representatives(mesh.n_nodes)
    if _fluid_components(mesh, reps) > 1:
        raise SolverError("fluid phase is disconnected; pressure is not unique")
    wall = mesh.boundary_nodes("interface") if "interface" in mesh.boundary else np.zeros(0, int)
    fixed = (wall[:, None] * 4 + np.arange(3)).ravel()
    dofmap = fem.DofMap(mesh.n_nodes, 4, reps, fixed_dofs=fixed)

    coords = mesh.nodes[mesh.cells]
    Ke, mass, grad, beta, dV, dNdX = _element_matrices(coords, mu, beta_coef)
    cdofs = dofmap.cell_dofs(mesh.cells)
    K, _ = fem.scatter(Ke, np.zeros((len(Ke), 32)), cdofs, dofmap.n_total)
    A, _ = dofmap.reduce(K, np.zeros(dofmap.n_total))

    n = dofmap.n_free
    comp = dofmap.free % 4
    rhs = np.zeros((n, 3))
    for i in range(3):
        f = np.zeros(dofmap.n_total)
        np.add.at(f, (mesh.cells * 4 + i).ravel(), mass.ravel())
        if consistent:
            np.add.at(f, (mesh.cells * 4 + 3).ravel(), (-beta[:, None] * grad[:, :, i]).ravel())
        rhs[:, i] = _fold(dofmap, f)
    # pressure mass matrix for the preconditioner and the zero-mean projection
    N, _ = fem.shape_functions(fem.HEX_RULE.points)
    Mp_e = np.einsum("eq,qa,qb->eab", dV, N, N)
    pdofs = mesh.cells * 4 + 3
    Mp_full, _ = fem.scatter(Mp_e, None, pdofs, dofmap.n_total)
    Mp, _ = dofmap.reduce(Mp_full, np.zeros(dofmap.n_total))
    m_full = np.zeros(dofmap.n_total)
    np.add.at(m_full, pdofs.ravel(), mass.ravel())
    m = _fold(dofmap, m_full)
    solver = _SaddleSolver(A, Mp, comp, mu, rtol=rtol)
    solutions = []
    for i in range(3):
        sol = solver.solve(rhs[:, i])
        if not np.all(np.isfinite(sol)):
            raise SolverError(f"Stokes cell problem for direction {i + 1} is singular")
        p = comp == 3
        sol[p] -= (m[p] @ sol[p]) / m[p].sum()
        solutions.append(sol)

    total = cell_volume if cell_volume is not None else 1.0
    fluid_volume = float(dV.sum())
    vel = np.zeros((3, mesh.n_nodes, 3))
    pres = np.zeros((3, mesh.n_nodes))
    Kmat = np.zeros((3, 3))
    div_avg = np.zeros(3)
    div_net = np.zeros(3)
    for i, sol in enumerate(solutions):
        full = dofmap.expand(sol).reshape(-1, 4)
        vel[i], pres[i] = full[:, :3], full[:, 3]
        ue = vel[i][mesh.cells]                              # (E, 8, 3)
        Kmat[:, i] = np.einsum("eq,qa,eai->i", dV, N, ue) / fluid_volume
        divq = np.einsum("eqaj,eaj->eq", dNdX, ue)
        div_avg[i] = float((np.abs(divq) * dV).sum() / fluid_volume)
        div_net[i] = float((divq * dV).sum() / fluid_volume)
        if not Kmat[i, i] > 0:
            raise SolverError(f"no through-flow along direction {i + 1}; fluid phase does not percolate")
    return StokesCellSolution(vel, pres, Kmat, fluid_volume / total, div_avg, div_net, mu)
