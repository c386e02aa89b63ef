"""Trilinear hexahedral finite-element machinery.

Element kernels are vectorised over cells: a kernel receives the nodal
coordinates of every cell, shape ``(E, 8, 3)``, and the local solution,
shape ``(E, ne)``, and returns local matrices ``(E, ne, ne)`` and local
load vectors ``(E, ne)``.  Local dofs are node-major
(``a * ncomp + c``).

Ordering contract: entries are scattered in cell order and duplicates are
summed by ``scipy.sparse`` after a stable sort on (row, column), so a given
input always produces a bit-identical matrix.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import AssemblyError, ConvergenceError, SolverError

_XI = np.array([-1, 1, 1, -1, -1, 1, 1, -1], dtype=float)
_ETA = np.array([-1, -1, 1, 1, -1, -1, 1, 1], dtype=float)
_ZETA = np.array([-1, -1, -1, -1, 1, 1, 1, 1], dtype=float)
_SIGNS = np.stack([_XI, _ETA, _ZETA], axis=1)      # (8, 3)


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray


def gauss_legendre_hex(order=2):
    """Tensor Gauss rule on the bi-unit cube; weights sum to 8."""
    g, w = np.polynomial.legendre.leggauss(order)
    P = np.array(np.meshgrid(g, g, g, indexing="ij")).reshape(3, -1).T
    W = np.einsum("i,j,k->ijk", w, w, w).ravel()
    return QuadratureRule(P, W)


def gauss_legendre_quad(order=2):
    g, w = np.polynomial.legendre.leggauss(order)
    P = np.array(np.meshgrid(g, g, indexing="ij")).reshape(2, -1).T
    W = np.outer(w, w).ravel()
    return QuadratureRule(P, W)


HEX_RULE = gauss_legendre_hex(2)
FACE_RULE = gauss_legendre_quad(2)


def shape_functions(xi):
    """Trilinear shape values ``(Q, 8)`` and reference gradients ``(Q, 8, 3)``."""
    xi = np.atleast_2d(xi)
    t = 1.0 + xi[:, None, :] * _SIGNS[None, :, :]       # (Q, 8, 3)
    N = 0.125 * t.prod(axis=2)
    dN = np.empty(t.shape)
    dN[..., 0] = 0.125 * _SIGNS[:, 0] * t[..., 1] * t[..., 2]
    dN[..., 1] = 0.125 * _SIGNS[:, 1] * t[..., 0] * t[..., 2]
    dN[..., 2] = 0.125 * _SIGNS[:, 2] * t[..., 0] * t[..., 1]
    return N, dN


def cell_geometry(coords, rule=HEX_RULE):
    """Physical gradients ``(E, Q, 8, 3)``, Jacobian determinants ``(E, Q)``
    and the rule weights for cells with nodal coordinates ``(E, 8, 3)``."""
    _, dN = shape_functions(rule.points)
    J = np.einsum("eai,qaj->eqij", coords, dN)          # dx_i / dxi_j
    det = np.linalg.det(J)
    Jinv = np.linalg.inv(J)
    dNdX = np.einsum("qaj,eqji->eqai", dN, Jinv)
    return dNdX, det, rule.weights


# reference coordinates of each local face: fixed axis and its value
_FACE_AXIS = np.array([0, 0, 1, 1, 2, 2])
_FACE_VALUE = np.array([-1.0, 1.0, -1.0, 1.0, -1.0, 1.0])


def face_geometry(coords, local_face, rule=FACE_RULE):
    """Quantities on boundary faces of their parent cells.

    ``coords`` is ``(F, 8, 3)`` for the parent cells and ``local_face`` the
    face index (0..5).  Returns the parent shape values ``(F, Q, 8)``,
    physical gradients ``(F, Q, 8, 3)``, outward area-weighted normals
    ``(F, Q, 3)`` (already multiplied by the rule weight) and the unit
    normals ``(F, Q, 3)``.
    """
    F = len(coords)
    nq = len(rule.weights)
    ref = np.zeros((F, nq, 3))
    axis = _FACE_AXIS[local_face]
    tangential = np.array([[b for b in range(3) if b != a] for a in range(3)])[axis]
    rows = np.arange(F)
    ref[rows, :, axis] = _FACE_VALUE[local_face][:, None]
    ref[rows[:, None], np.arange(nq)[None, :], tangential[:, 0:1]] = rule.points[None, :, 0]
    ref[rows[:, None], np.arange(nq)[None, :], tangential[:, 1:2]] = rule.points[None, :, 1]
    N, dN = shape_functions(ref.reshape(-1, 3))
    N = N.reshape(F, nq, 8)
    dN = dN.reshape(F, nq, 8, 3)
    J = np.einsum("fai,fqaj->fqij", coords, dN)
    Jinv = np.linalg.inv(J)
    dNdX = np.einsum("fqaj,fqji->fqai", dN, Jinv)
    ts = J[rows, :, :, tangential[:, 0]]                # (F, Q, 3)
    tt = J[rows, :, :, tangential[:, 1]]
    n = np.cross(ts, tt)
    centre = coords.mean(axis=1)
    x = np.einsum("fqa,fai->fqi", N, coords)
    flip = np.einsum("fqi,fqi->fq", n, x - centre[:, None, :]) < 0
    n[flip] *= -1.0
    norm = np.linalg.norm(n, axis=2, keepdims=True)
    return N, dNdX, n * rule.weights[None, :, None], n / norm


@dataclass(eq=False)
class DofMap:
    """Degree-of-freedom numbering with constraint elimination.

    Full dofs are ``node * ncomp + component``.  Periodic slaves are folded
    onto the dof of their representative node; fixed dofs carry prescribed
    values and are removed from the unknowns.
    """

    n_nodes: int
    ncomp: int
    representatives: np.ndarray | None = None
    fixed_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    fixed_values: np.ndarray | None = None

    def __post_init__(self):
        n = self.n_nodes * self.ncomp
        rep = np.arange(self.n_nodes) if self.representatives is None else np.asarray(self.representatives)
        comp = np.arange(self.ncomp)
        target = (rep[:, None] * self.ncomp + comp[None, :]).ravel()
        fixed = np.asarray(self.fixed_dofs, dtype=np.int64)
        vals = np.zeros(len(fixed)) if self.fixed_values is None else np.asarray(self.fixed_values, float)
        g_master = np.zeros(n)
        is_fixed = np.zeros(n, bool)
        g_master[target[fixed]] = vals
        is_fixed[target[fixed]] = True
        masters = np.flatnonzero((target == np.arange(n)) & ~is_fixed)
        index = np.full(n, -1, dtype=np.int64)
        index[masters] = np.arange(len(masters))
        self.n_total = n
        self.target = target
        self.free = masters
        self.free_index = index[target]        # -1 for fixed
        self.g = np.where(is_fixed[target], g_master[target], 0.0)
        self.n_free = len(masters)

    def cell_dofs(self, cells):
        return (cells[:, :, None] * self.ncomp + np.arange(self.ncomp)).reshape(len(cells), -1)

    def expand(self, x):
        full = self.g.copy()
        m = self.free_index >= 0
        full[m] = x[self.free_index[m]]
        return full

    def restrict(self, full):
        return np.asarray(full)[self.free]

    def with_values(self, values):
        """Same constraint set with new prescribed values."""
        return DofMap(self.n_nodes, self.ncomp, self.representatives, self.fixed_dofs, values)

    def reduce(self, K, f):
        """Fold a full COO/CSR system onto the free unknowns."""
        K = K.tocoo()
        fi = self.free_index
        r, c = fi[K.row], fi[K.col]
        keep = (r >= 0) & (c >= 0)
        A = sp.coo_matrix((K.data[keep], (r[keep], c[keep])), shape=(self.n_free, self.n_free)).tocsr()
        A.sum_duplicates()
        fixed_c = (r >= 0) & (c < 0)
        b = np.zeros(self.n_free)
        fr = fi >= 0
        np.add.at(b, fi[fr], np.asarray(f)[fr])
        if fixed_c.any():
            np.add.at(b, r[fixed_c], -K.data[fixed_c] * self.g[K.col[fixed_c]])
        return A, b


@dataclass(eq=False)
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    dofmap: DofMap | None = None


def scatter(local_K, local_f, cell_dofs, n):
    """Global full matrix and vector from local contributions."""
    E, ne = cell_dofs.shape
    rows = np.repeat(cell_dofs, ne, axis=1).ravel()
    cols = np.tile(cell_dofs, (1, ne)).ravel()
    K = sp.coo_matrix((np.asarray(local_K).ravel(), (rows, cols)), shape=(n, n)).tocsr()
    f = np.zeros(n)
    if local_f is not None:
        np.add.at(f, cell_dofs.ravel(), np.asarray(local_f).ravel())
    return K, f


def assemble(mesh, dofmap, element_kernel, u=None, cell_dofs=None):
    """Assemble and constrain a global system.

    ``u`` is the current full solution (used to gather local values for the
    kernel).  The returned system solves ``A x = b`` for the free unknowns.
    """
    if cell_dofs is None:
        cell_dofs = dofmap.cell_dofs(mesh.cells)
    coords = mesh.nodes[mesh.cells]
    u_full = np.zeros(dofmap.n_total) if u is None else np.asarray(u)
    Ke, fe = element_kernel(coords, u_full[cell_dofs])
    Ke = np.asarray(Ke)
    fe = np.zeros(cell_dofs.shape) if fe is None else np.asarray(fe)
    bad = ~(np.isfinite(Ke).all(axis=(1, 2)) & np.isfinite(fe).all(axis=1))
    if bad.any():
        cell = int(np.flatnonzero(bad)[0])
        raise AssemblyError(f"element kernel returned non-finite entries on cell {cell}", cell)
    K, f = scatter(Ke, fe, cell_dofs, dofmap.n_total)
    A, b = dofmap.reduce(K, f)
    return SparseSystem(A, b, dofmap)


def factorize(A):
    """Sparse LU factor; raises ``SolverError`` on a singular pivot."""
    A = sp.csc_matrix(A)
    try:
        return spla.splu(A)
    except RuntimeError as exc:
        raise SolverError(f"sparse factorisation failed: {exc}") from exc



def amg_hierarchy(A, **kw):
    """Smoothed-aggregation hierarchy built reproducibly.

    pyamg estimates spectral radii from unseeded random start vectors; the
    global numpy state is seeded for the build and restored afterwards.
    """
    import pyamg

    state = np.random.get_state()
    np.random.seed(0)
    try:
        return pyamg.smoothed_aggregation_solver(A, **kw)
    finally:
        np.random.set_state(state)


class AMGSolver:
    """Reusable preconditioned Krylov solve with the same ``solve`` API as a LU factor.

    A smoothed-aggregation AMG hierarchy (optionally with a near-nullspace
    basis ``B``) preconditions CG when ``A`` is symmetric and GMRES
    otherwise.  ``update`` swaps in a new matrix of the same pattern while
    keeping the hierarchy, which stays an effective preconditioner for
    nearby Newton matrices; it is rebuilt once the iteration count grows.
    Falls back to a sparse LU if the iteration stalls.
    """

    def __init__(self, A, B=None, tol=1e-10, maxiter=300, rebuild_after=60):
        self.B, self.tol, self.maxiter, self.rebuild_after = B, tol, maxiter, rebuild_after
        self._ml = None
        self.last_iterations = 0
        self.update(A)

    def update(self, A):
        self.A = sp.csr_matrix(A)
        asym = abs(self.A - self.A.T).max() if self.A.nnz else 0.0
        symmetric = asym <= 1e-12 * max(abs(self.A).max(), 1e-300)
        if self._ml is None or symmetric != self.symmetric or self.last_iterations > self.rebuild_after:
            self._build(symmetric)
        self._lu = None
        return self

    def _build(self, symmetric):
        self.symmetric = symmetric
        self._ml = amg_hierarchy(self.A, B=self.B, symmetry="hermitian" if symmetric else "nonsymmetric")
        self._prec = self._ml.aspreconditioner(cycle="V")
        self.last_iterations = 0

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        nb = np.linalg.norm(b)
        if nb == 0.0:
            return np.zeros_like(b)
        if self._lu is None:
            count = [0]

            def cb(_):
                count[0] += 1

            method = spla.cg if self.symmetric else spla.gmres
            kw = {} if self.symmetric else {"restart": 50}
            x, _ = method(self.A, b, rtol=self.tol, maxiter=self.maxiter, M=self._prec,
                          callback=cb, **kw)
            self.last_iterations = count[0]
            if np.linalg.norm(self.A @ x - b) <= 100 * self.tol * nb:
                return x
            self._lu = factorize(self.A)
        return self._lu.solve(b)


def translation_modes(dofmap):
    """Rigid translations restricted to the free dofs (AMG near-nullspace)."""
    comp = dofmap.free % dofmap.ncomp
    return (comp[:, None] == np.arange(dofmap.ncomp)[None, :]).astype(float)


def solve_linear(system, rhs=None, rtol=1e-10):
    """Direct solve of a ``SparseSystem`` (or a bare matrix plus ``rhs``)."""
    if isinstance(system, SparseSystem):
        A, b = system.matrix, system.rhs
    else:
        A, b = system, rhs
    b = np.asarray(b, dtype=float)
    if sp.issparse(A):
        x = factorize(A).solve(b)
    else:
        try:
            x = np.linalg.solve(np.asarray(A, float), b)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"dense solve failed: {exc}") from exc
    if not np.all(np.isfinite(x)):
        raise SolverError("solution contains non-finite values (singular matrix)")
    res = np.linalg.norm(A @ x - b)
    nb = np.linalg.norm(b)
    if res > rtol * max(nb, 1e-300) and res > 1e-14:
        raise SolverError(f"linear residual {res:.3e} exceeds {rtol:g} * |b| = {rtol * nb:.3e}")
    return x


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    residuals: list


def _apply_inverse(J, r):
    if hasattr(J, "solve") and not isinstance(J, np.ndarray):
        return J.solve(r)
    if sp.issparse(J):
        return factorize(J).solve(r)
    J = np.atleast_2d(np.asarray(J, float))
    try:
        return np.linalg.solve(J, r)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"singular Jacobian: {exc}") from exc


def newton_solve(residual_and_jacobian, x0, rel_tol=1e-8, abs_tol=1e-10, max_iter=25,
                 max_halvings=8, residual_only=None):
    """Damped Newton iteration.

    ``residual_and_jacobian(x)`` returns ``(R, J)`` where ``J`` is a dense or
    sparse matrix or any object with a ``solve`` method (e.g. a reused LU
    factor).  ``residual_only(x)`` is used for line-search trials when given.
    Converges at the first iterate with
    ``|R| <= max(rel_tol * |R0|, abs_tol)``; the step is halved (up to
    ``max_halvings`` times) while the residual norm grows.
    """
    scalar = np.ndim(x0) == 0
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()

    def rj(z):
        R, J = residual_and_jacobian(z[0] if scalar else z)
        return np.atleast_1d(np.asarray(R, float)), J

    def r_only(z):
        if residual_only is not None:
            return np.atleast_1d(np.asarray(residual_only(z[0] if scalar else z), float))
        return rj(z)[0]

    R, J = rj(x)
    norm = float(np.linalg.norm(R))
    history = [norm]
    target = max(rel_tol * norm, abs_tol)
    it = 0
    while norm > target:
        if it >= max_iter:
            raise ConvergenceError(
                f"Newton did not converge in {max_iter} iterations (|R| = {norm:.3e})", history)
        if not np.isfinite(norm):
            raise ConvergenceError("non-finite residual", history)
        dx = -np.atleast_1d(_apply_inverse(J, R))
        # try the full step with a combined evaluation; halve on growth
        try:
            Rt, Jt = rj(x + dx)
            nt = float(np.linalg.norm(Rt))
        except (ValueError, FloatingPointError, ArithmeticError):
            nt = np.inf
        if np.isfinite(nt) and nt <= norm:
            x, R, J, norm = x + dx, Rt, Jt, nt
        else:
            step = 0.5
            for _ in range(max_halvings):
                trial = x + step * dx
                try:
                    nt = float(np.linalg.norm(r_only(trial)))
                except (ValueError, FloatingPointError, ArithmeticError):
                    nt = np.inf
                if np.isfinite(nt) and nt <= norm:
                    break
                step *= 0.5
            if not np.isfinite(nt):
                raise ConvergenceError("line search left the admissible set", history)
            x = trial
            R, J = rj(x)
            norm = float(np.linalg.norm(R))
        it += 1
        history.append(norm)
    return NewtonResult(x[0] if scalar else x, it, history)
