"""Hexahedral meshes for the unit cell and the macroscale column.

Node ordering inside a cell follows the Gmsh convention for 8-node
hexahedra: bottom face (z = 0) counter-clockwise, then the top face.
Boundary faces are stored as node quadruples ordered so that the right-hand
rule gives the outward normal.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .exceptions import GeometryError, MeshParseError, PairingError

# local faces of the reference hex, outward oriented
HEX_FACES = np.array([
    [0, 4, 7, 3],   # x-
    [1, 2, 6, 5],   # x+
    [0, 1, 5, 4],   # y-
    [3, 7, 6, 2],   # y+
    [0, 3, 2, 1],   # z-
    [4, 5, 6, 7],   # z+
])

# unit-cube corner offsets in Gmsh order
HEX_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
])

RVE_SIDE_TAGS = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Unstructured hexahedral mesh.

    ``boundary`` maps a tag name to an ``(F, 4)`` array of outward-oriented
    faces.  ``lattice_ids`` is only set for voxel meshes; two voxel meshes cut
    from the same grid share a node exactly when their lattice ids agree.
    """

    nodes: np.ndarray
    cells: np.ndarray
    boundary: dict = field(default_factory=dict)
    domain_tag: str = "macro"
    lattice_ids: np.ndarray | None = None

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        cells = np.ascontiguousarray(self.cells, dtype=np.int64)
        nodes.setflags(write=False)
        cells.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "cells", cells)
        bnd = {}
        for tag, faces in self.boundary.items():
            arr = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 4)
            arr.setflags(write=False)
            bnd[str(tag)] = arr
        object.__setattr__(self, "boundary", bnd)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_cells(self):
        return len(self.cells)

    def cell_volumes(self):
        from .fem import cell_geometry

        _, detj, w = cell_geometry(self.nodes[self.cells])
        return (detj * w).sum(axis=1)

    def boundary_nodes(self, *tags):
        """Sorted unique node indices on the union of the given tags."""
        parts = [self.boundary[t].ravel() for t in tags if t in self.boundary]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(parts))

    def face_parents(self, tag):
        """Parent cell and local face index of every face with ``tag``."""
        faces = self.boundary[tag]
        lookup = {}
        cell_faces = self.cells[:, HEX_FACES]          # (E, 6, 4)
        keys = np.sort(cell_faces, axis=2)
        for e in range(len(self.cells)):
            for f in range(6):
                lookup.setdefault(tuple(keys[e, f]), (e, f))
        parents = np.empty((len(faces), 2), dtype=np.int64)
        for i, face in enumerate(np.sort(faces, axis=1)):
            try:
                parents[i] = lookup[tuple(face)]
            except KeyError:
                raise GeometryError(f"face {i} of tag {tag!r} is not a cell face") from None
        return parents

    def validate(self):
        """Check the structural invariants, raising ``GeometryError``."""
        if self.cells.size and (self.cells.min() < 0 or self.cells.max() >= self.n_nodes):
            raise GeometryError("cell references a missing node")
        vols = self.cell_volumes()
        bad = np.flatnonzero(vols <= 1e-14 * max(vols.max(initial=1.0), 1e-300))
        if bad.size:
            raise GeometryError(f"degenerate or inverted cell {int(bad[0])}")
        exterior = exterior_faces(self.cells)
        ext_keys = {tuple(f) for f in np.sort(exterior, axis=1)}
        seen = {}
        for tag, faces in self.boundary.items():
            for f in np.sort(faces, axis=1):
                key = tuple(f)
                if key in seen:
                    raise GeometryError(f"face {key} tagged both {seen[key]!r} and {tag!r}")
                seen[key] = tag
        missing = ext_keys - set(seen)
        if missing:
            raise GeometryError(f"{len(missing)} exterior faces carry no tag")
        extra = set(seen) - ext_keys
        if extra:
            raise GeometryError(f"{len(extra)} tagged faces are not on the boundary")
        if self.domain_tag in ("solid", "fluid"):
            if self.nodes.min() < -1e-12 or self.nodes.max() > 1 + 1e-12:
                raise GeometryError("RVE node outside the unit cube")
        return self


def exterior_faces(cells):
    """Faces used by exactly one cell, with the owning cell's orientation."""
    faces = cells[:, HEX_FACES].reshape(-1, 4)
    keys = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return faces[counts[inverse.ravel()] == 1]


# ---------------------------------------------------------------------------
# generators

def _voxel_centres(n):
    c = (np.arange(n) + 0.5) / n - 0.5
    return np.meshgrid(c, c, c, indexing="ij")


def three_channel_mask(n, radius):
    """Boolean ``(n, n, n)`` array, True where the voxel centre is fluid."""
    x, y, z = _voxel_centres(n)
    r2 = radius * radius
    return (y**2 + z**2 < r2) | (x**2 + z**2 < r2) | (x**2 + y**2 < r2)


def _percolates(mask, axis):
    # a cluster spanning two stacked copies crosses the periodic boundary
    doubled = np.concatenate([mask, mask], axis=axis)
    labels, _ = ndimage.label(doubled)
    n2 = doubled.shape[axis]
    first = np.unique(np.take(labels, 0, axis=axis))
    last = np.unique(np.take(labels, n2 - 1, axis=axis))
    return bool(np.intersect1d(first[first > 0], last[last > 0]).size)


def voxel_mesh(mask, domain_tag, spacing=None):
    """Mesh of the True voxels of ``mask`` on the unit cube.

    Faces on the cube sides get the side tags; faces between a selected and
    an unselected voxel are tagged ``interface``.
    """
    n = mask.shape[0]
    h = 1.0 / n if spacing is None else spacing
    m = n + 1
    ijk = np.argwhere(mask)
    corners = ijk[:, None, :] + HEX_CORNERS[None, :, :]
    lattice = corners[..., 0] + m * (corners[..., 1] + m * corners[..., 2])
    ids, cells = np.unique(lattice, return_inverse=True)
    cells = cells.reshape(-1, 8)
    li, lj, lk = ids % m, (ids // m) % m, ids // (m * m)
    nodes = np.column_stack([li, lj, lk]).astype(float) * h

    boundary = {t: [] for t in RVE_SIDE_TAGS}
    boundary["interface"] = []
    for axis in range(3):
        for side, f in ((0, 2 * axis), (1, 2 * axis + 1)):
            step = np.zeros(3, dtype=int)
            step[axis] = 1 if side else -1
            nb = ijk + step
            on_side = (nb[:, axis] < 0) | (nb[:, axis] >= n)
            tag = RVE_SIDE_TAGS[2 * axis + side]
            faces = cells[:, HEX_FACES[f]]
            boundary[tag].append(faces[on_side])
            inner = ~on_side
            nbv = nb[inner]
            other = ~mask[nbv[:, 0], nbv[:, 1], nbv[:, 2]]
            boundary["interface"].append(faces[inner][other])
    boundary = {t: np.concatenate(v) if v else np.zeros((0, 4), int) for t, v in boundary.items()}
    return Mesh(nodes, cells, boundary, domain_tag, lattice_ids=ids)


def generate_voxel_rve(resolution, channel_radius):
    """Voxelised unit cell: a cube minus three orthogonal cylinders.

    Returns ``(solid, fluid, porosity)``.  Porosity is the fluid voxel
    fraction.  The two meshes are cut from the same node lattice so
    interface nodes coincide (see ``Mesh.lattice_ids``).
    """
    n = int(resolution)
    if n < 8:
        raise GeometryError(f"resolution must be >= 8, got {resolution}")
    if not 0.0 < channel_radius < 0.5:
        raise GeometryError(f"channel radius must lie in (0, 0.5), got {channel_radius}")
    fluid_mask = three_channel_mask(n, channel_radius)
    n_fluid = int(fluid_mask.sum())
    if n_fluid == 0:
        raise GeometryError(
            f"radius {channel_radius} is not resolved at n={n}: no fluid voxels")
    for axis in range(3):
        if not _percolates(fluid_mask, axis):
            raise GeometryError(f"fluid phase is not connected along axis {axis + 1}")
    solid = voxel_mesh(~fluid_mask, "solid")
    fluid = voxel_mesh(fluid_mask, "fluid")
    return solid, fluid, n_fluid / n**3


def three_channel_porosity(radius):
    """Exact volume fraction of the three-cylinder union in the unit cube.

    Inclusion-exclusion with the Steinmetz solids; valid for r <= 0.5.
    """
    r = radius
    return 3 * math.pi * r**2 - 3 * (16.0 / 3.0) * r**3 + 8 * (2 - math.sqrt(2)) * r**3


def generate_column_mesh(height, breadth, divisions=(1, 30, 1)):
    """Structured box ``breadth x height x breadth`` with the height along y.

    Boundary tags: ``bottom`` (y = 0), ``top`` (y = height), ``sides``.
    """
    if height <= 0 or breadth <= 0:
        raise ValueError("column dimensions must be positive")
    nx, ny, nz = (int(d) for d in divisions)
    if nx < 1 or nz < 1 or ny < 1:
        raise ValueError("need at least one division per axis")
    xs = np.linspace(0.0, breadth, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    zs = np.linspace(0.0, breadth, nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.column_stack([X.ravel(order="F"), Y.ravel(order="F"), Z.ravel(order="F")])
    mx, my = nx + 1, ny + 1
    ii, jj, kk = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    base = np.column_stack([ii.ravel(order="F"), jj.ravel(order="F"), kk.ravel(order="F")])
    c = base[:, None, :] + HEX_CORNERS[None]
    cells = c[..., 0] + mx * (c[..., 1] + my * c[..., 2])
    faces = cells[:, HEX_FACES]
    boundary = {
        "bottom": faces[base[:, 1] == 0, 2],
        "top": faces[base[:, 1] == ny - 1, 3],
        "sides": np.concatenate([
            faces[base[:, 0] == 0, 0], faces[base[:, 0] == nx - 1, 1],
            faces[base[:, 2] == 0, 4], faces[base[:, 2] == nz - 1, 5],
        ]),
    }
    return Mesh(nodes, cells, boundary, "macro")


# ---------------------------------------------------------------------------
# periodicity

@dataclass(frozen=True, eq=False)
class PeriodicMap:
    """Master/slave node pairs per axis (0-based axis keys)."""

    pairs: dict
    axes: tuple

    def representatives(self, n_nodes):
        """Index of the node each node is identified with (its root)."""
        if not self.pairs:
            return np.arange(n_nodes)
        allp = np.concatenate([p for p in self.pairs.values()])
        g = sparse.coo_matrix((np.ones(len(allp)), (allp[:, 0], allp[:, 1])),
                              shape=(n_nodes, n_nodes))
        _, labels = connected_components(g, directed=False)
        # root of a class: its smallest node index that is never a slave
        slaves = np.zeros(n_nodes, bool)
        slaves[allp[:, 1]] = True
        order = np.lexsort((np.arange(n_nodes), slaves))
        root = np.full(labels.max() + 1, -1)
        for node in order:
            if root[labels[node]] < 0:
                root[labels[node]] = node
        return root[labels]

    def mapped(self, axis):
        return dict(self.pairs[axis])


def periodic_pairs(mesh, axes=(0, 1, 2), tol=1e-10):
    """Pair nodes on opposite bounding-box faces along each axis."""
    x = mesh.nodes
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    out = {}
    for a in axes:
        a = int(a)
        t = tol * span[a]
        masters = np.flatnonzero(np.abs(x[:, a] - lo[a]) <= t)
        slaves = np.flatnonzero(np.abs(x[:, a] - hi[a]) <= t)
        others = [b for b in range(3) if b != a]
        tree = cKDTree(x[slaves][:, others])
        d, j = tree.query(x[masters][:, others], distance_upper_bound=tol * span.max())
        bad = ~np.isfinite(d)
        if bad.any():
            raise PairingError(
                f"axis {a + 1}: {int(bad.sum())} master nodes have no partner",
                masters[bad])
        matched = slaves[j]
        if len(np.unique(matched)) != len(matched) or len(matched) != len(slaves):
            unmatched = np.setdiff1d(slaves, matched)
            raise PairingError(f"axis {a + 1}: pairing is not a bijection", unmatched)
        out[a] = np.column_stack([masters, matched])
    return PeriodicMap(out, tuple(int(a) for a in axes))


# ---------------------------------------------------------------------------
# Gmsh 2.2 ASCII subset

_GMSH_HEX, _GMSH_QUAD = 5, 3
_GMSH_NAMES = {1: "2-node line", 2: "3-node triangle", 4: "4-node tetrahedron",
               6: "6-node prism", 7: "5-node pyramid", 15: "1-node point"}


def _fmt(v):
    return format(float(v), ".17g")


def mesh_to_text(mesh):
    """Serialise ``mesh`` in the Gmsh 2.2 ASCII subset documented in docs/."""
    tags = sorted(mesh.boundary)
    phys = {t: i + 2 for i, t in enumerate(tags)}
    lines = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$PhysicalNames",
             str(len(tags) + 1), f'3 1 "{mesh.domain_tag}"']
    lines += [f'2 {phys[t]} "{t}"' for t in tags]
    lines += ["$EndPhysicalNames", "$Nodes", str(mesh.n_nodes)]
    lines += [f"{i + 1} {_fmt(a)} {_fmt(b)} {_fmt(c)}" for i, (a, b, c) in enumerate(mesh.nodes)]
    lines += ["$EndNodes", "$Elements"]
    n_faces = sum(len(mesh.boundary[t]) for t in tags)
    lines.append(str(n_faces + mesh.n_cells))
    k = 1
    for t in tags:
        for f in mesh.boundary[t]:
            lines.append(f"{k} {_GMSH_QUAD} 2 {phys[t]} {phys[t]} " + " ".join(str(v + 1) for v in f))
            k += 1
    for c in mesh.cells:
        lines.append(f"{k} {_GMSH_HEX} 2 1 1 " + " ".join(str(v + 1) for v in c))
        k += 1
    lines.append("$EndElements")
    return "\n".join(lines) + "\n"


def write_mesh(mesh, path):
    text = mesh_to_text(mesh)
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def mesh_digest(mesh):
    return hashlib.sha256(mesh_to_text(mesh).encode()).hexdigest()


def load_mesh(path):
    """Read a Gmsh 2.2 ASCII file holding 8-node hexahedra and tagged quads."""
    raw = Path(path).read_text().splitlines()
    pos = 0

    def nxt():
        nonlocal pos
        while pos < len(raw) and not raw[pos].strip():
            pos += 1
        if pos >= len(raw):
            raise MeshParseError("unexpected end of file", pos + 1)
        pos += 1
        return raw[pos - 1].strip(), pos

    def expect(token):
        s, ln = nxt()
        if s != token:
            raise MeshParseError(f"expected {token!r}, found {s!r}", ln)

    def count():
        s, ln = nxt()
        try:
            return int(s)
        except ValueError:
            raise MeshParseError(f"expected a count, found {s!r}", ln) from None

    names = {}
    node_ids, coords = {}, []
    hexes, hex_phys, quads, quad_phys = [], [], [], []
    have_nodes = have_elements = False
    expect("$MeshFormat")
    s, ln = nxt()
    parts = s.split()
    if len(parts) != 3 or parts[0] not in ("2.2", "2.2.0") or parts[1] != "0":
        raise MeshParseError(f"unsupported mesh format header {s!r}", ln)
    expect("$EndMeshFormat")
    while pos < len(raw):
        s, ln = nxt() if any(r.strip() for r in raw[pos:]) else ("", 0)
        if not s:
            break
        if s == "$PhysicalNames":
            for _ in range(count()):
                s, ln = nxt()
                p = s.split(maxsplit=2)
                if len(p) != 3:
                    raise MeshParseError("malformed physical name", ln)
                try:
                    names[(int(p[0]), int(p[1]))] = p[2].strip('"')
                except ValueError:
                    raise MeshParseError("malformed physical name", ln) from None
            expect("$EndPhysicalNames")
        elif s == "$Nodes":
            for i in range(count()):
                s, ln = nxt()
                p = s.split()
                if len(p) != 4:
                    raise MeshParseError("node line needs id and three coordinates", ln)
                try:
                    node_ids[int(p[0])] = i
                    coords.append([float(v) for v in p[1:]])
                except ValueError:
                    raise MeshParseError(f"malformed node line {s!r}", ln) from None
            expect("$EndNodes")
            have_nodes = True
        elif s == "$Elements":
            for _ in range(count()):
                s, ln = nxt()
                try:
                    p = [int(v) for v in s.split()]
                except ValueError:
                    raise MeshParseError(f"malformed element line {s!r}", ln) from None
                if len(p) < 3:
                    raise MeshParseError("element line too short", ln)
                etype, ntags = p[1], p[2]
                if etype not in (_GMSH_HEX, _GMSH_QUAD):
                    what = _GMSH_NAMES.get(etype, f"type {etype}")
                    raise MeshParseError(f"unsupported element type {etype} ({what})", ln)
                if ntags < 1:
                    raise MeshParseError("element carries no physical tag", ln)
                nn = 8 if etype == _GMSH_HEX else 4
                conn = p[3 + ntags:]
                if len(conn) != nn:
                    raise MeshParseError(f"expected {nn} nodes, found {len(conn)}", ln)
                try:
                    conn = [node_ids[v] for v in conn]
                except KeyError as exc:
                    raise MeshParseError(f"element references unknown node {exc.args[0]}", ln) from None
                if etype == _GMSH_HEX:
                    hexes.append(conn)
                    hex_phys.append((p[3], ln))
                else:
                    quads.append(conn)
                    quad_phys.append((p[3], ln))
            expect("$EndElements")
            have_elements = True
        elif s.startswith("$"):
            # skip unknown sections
            end = "$End" + s[1:]
            while True:
                t, ln = nxt()
                if t == end:
                    break
        else:
            raise MeshParseError(f"unexpected content {s!r}", ln)
    if not have_nodes or not have_elements:
        raise MeshParseError("file lacks $Nodes or $Elements section")
    if not hexes:
        raise MeshParseError("no hexahedra in file")
    domains = {names.get((3, t), None) for t, _ in hex_phys}
    for t, ln in hex_phys:
        if (3, t) not in names:
            raise MeshParseError(f"physical volume {t} has no name", ln)
    boundary = {}
    for f, (t, ln) in zip(quads, quad_phys):
        if (2, t) not in names:
            raise MeshParseError(f"physical surface {t} has no name", ln)
        boundary.setdefault(names[(2, t)], []).append(f)
    domain = domains.pop() if len(domains) == 1 else "macro"
    mesh = Mesh(np.array(coords), np.array(hexes), boundary, domain)
    try:
        mesh.validate()
    except GeometryError as exc:
        raise MeshParseError(f"invalid mesh: {exc}") from exc
    return mesh


def mesh_stats(mesh, sep="\t"):
    """Delimiter-separated summary table of a mesh."""
    vols = mesh.cell_volumes()
    rows = [("quantity", "value"), ("domain", mesh.domain_tag),
            ("nodes", mesh.n_nodes), ("cells", mesh.n_cells),
            ("volume", _fmt(vols.sum())), ("min_cell_volume", _fmt(vols.min())),
            ("max_cell_volume", _fmt(vols.max()))]
    rows += [(f"faces[{t}]", len(f)) for t, f in sorted(mesh.boundary.items())]
    return "\n".join(sep.join(str(v) for v in r) for r in rows) + "\n"
