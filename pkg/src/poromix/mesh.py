"""Conforming 2D triangulations with boundary tagging and refinement.

A :class:`TriMesh` stores vertices, CCW triangles with region tags, and a
derived edge table.  Boundary edges carry a Dirichlet ('D') or Neumann ('N')
tag.  Each edge has a fixed global unit normal: it points from the
lower-indexed incident cell to the higher-indexed one, and outward on the
boundary.  The tangent is the normal rotated by +90 degrees.
"""

from __future__ import annotations

import numpy as np

INTERIOR = 0
GAMMA_D = 1
GAMMA_N = 2

_TAG_CHARS = {"D": GAMMA_D, "N": GAMMA_N}
_TAG_NAMES = {GAMMA_D: "D", GAMMA_N: "N"}


class MeshError(Exception):
    """Invalid mesh topology or geometry."""


class MeshFormatError(MeshError):
    """Malformed mesh file; carries the offending line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


class TriMesh:
    """Immutable conforming triangulation.

    Parameters
    ----------
    vertices : (V, 2) float array
    cells : (C, 3) int array, counter-clockwise
    boundary_tags : dict mapping sorted vertex pairs to 'D' or 'N'
    regions : optional (C,) int array of region tags (default 0)
    ref_edges : optional (C,) int array of local refinement-edge indices
        (local edge ``j`` is opposite vertex ``j``); defaults to the
        longest edge of each cell.
    """

    def __init__(self, vertices, cells, boundary_tags, regions=None,
                 ref_edges=None, validate=True):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must be a (V, 2) array")
        if self.cells.ndim != 2 or self.cells.shape[1] != 3:
            raise MeshError("cells must be a (C, 3) array")
        C = self.cells.shape[0]
        if regions is None:
            self.regions = np.zeros(C, dtype=np.int64)
        else:
            self.regions = np.ascontiguousarray(regions, dtype=np.int64)
        self._build_edges(boundary_tags)
        if ref_edges is None:
            self.ref_edges = self._longest_edges()
        else:
            self.ref_edges = np.ascontiguousarray(ref_edges, dtype=np.int64)
        if validate:
            self.validate()

    # -- construction helpers ------------------------------------------------

    def _build_edges(self, boundary_tags):
        C = self.cells.shape[0]
        # local edge j (opposite vertex j) joins vertices (j+1, j+2) mod 3
        pairs = np.stack(
            [self.cells[:, [1, 2]], self.cells[:, [2, 0]], self.cells[:, [0, 1]]],
            axis=1,
        )  # (C, 3, 2)
        flat = pairs.reshape(-1, 2)
        key = np.sort(flat, axis=1)
        edges, inverse = np.unique(key, axis=0, return_inverse=True)
        E = edges.shape[0]
        self.edges = edges
        self.cell_edges = inverse.reshape(C, 3)

        edge_cells = np.full((E, 2), -1, dtype=np.int64)
        count = np.zeros(E, dtype=np.int64)
        for c in range(C):
            for j in range(3):
                e = self.cell_edges[c, j]
                if count[e] >= 2:
                    raise MeshError(f"edge {e} shared by more than two cells")
                edge_cells[e, count[e]] = c
                count[e] += 1
        self.edge_cells = edge_cells
        self._edge_count = count

        # boundary tags
        tags = np.full(E, INTERIOR, dtype=np.int64)
        seen = set()
        for (a, b), tag in boundary_tags.items():
            k = _edge_key(int(a), int(b))
            idx = self._find_edge(k)
            if idx is None:
                raise MeshError(f"tagged edge {k} not present in mesh")
            if tag not in _TAG_CHARS:
                raise MeshError(f"edge {k}: unknown boundary tag {tag!r}")
            tags[idx] = _TAG_CHARS[tag]
            seen.add(idx)
        self.edge_tags = tags

        # global orientation: normal from lower to higher incident cell,
        # outward on the boundary.  sign[c, j] = +1 when the global normal
        # is outward for cell c on its local edge j.
        signs = np.ones((C, 3), dtype=np.int64)
        for e in range(E):
            c0, c1 = edge_cells[e]
            if c1 >= 0 and c1 < c0:
                edge_cells[e, 0], edge_cells[e, 1] = c1, c0
        for c in range(C):
            for j in range(3):
                e = self.cell_edges[c, j]
                signs[c, j] = 1 if edge_cells[e, 0] == c else -1
        self.cell_edge_signs = signs

    def _find_edge(self, key):
        lo = np.searchsorted(self.edges[:, 0], key[0], side="left")
        hi = np.searchsorted(self.edges[:, 0], key[0], side="right")
        for i in range(lo, hi):
            if self.edges[i, 1] == key[1]:
                return i
        return None

    def _longest_edges(self):
        v = self.vertices[self.cells]  # (C, 3, 2)
        lens = np.stack(
            [np.linalg.norm(v[:, 2] - v[:, 1], axis=1),
             np.linalg.norm(v[:, 0] - v[:, 2], axis=1),
             np.linalg.norm(v[:, 1] - v[:, 0], axis=1)],
            axis=1,
        )
        # ties broken towards the lowest local index
        return np.argmax(np.round(lens, 12), axis=1).astype(np.int64)

    # -- queries ------------------------------------------------------------

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def cell_coords(self):
        return self.vertices[self.cells]

    def signed_areas(self):
        v = self.cell_coords()
        d1 = v[:, 1] - v[:, 0]
        d2 = v[:, 2] - v[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def cell_diameters(self):
        v = self.cell_coords()
        lens = np.stack(
            [np.linalg.norm(v[:, 2] - v[:, 1], axis=1),
             np.linalg.norm(v[:, 0] - v[:, 2], axis=1),
             np.linalg.norm(v[:, 1] - v[:, 0], axis=1)],
            axis=1,
        )
        return lens.max(axis=1)

    def edge_lengths(self):
        p = self.vertices[self.edges]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    def edge_normals(self):
        """Unit normal per edge, following the global orientation."""
        E = self.num_edges
        normals = np.zeros((E, 2))
        verts = self.vertices
        cells = self.cells
        for e in range(E):
            c = self.edge_cells[e, 0]
            # find local edge index in cell c
            j = int(np.where(self.cell_edges[c] == e)[0][0])
            a = verts[cells[c, (j + 1) % 3]]
            b = verts[cells[c, (j + 2) % 3]]
            t = b - a
            n = np.array([t[1], -t[0]])  # outward for CCW traversal
            normals[e] = n / np.linalg.norm(n)
        return normals

    def boundary_edges(self, tag=None):
        mask = self.edge_tags != INTERIOR
        if tag is not None:
            mask = self.edge_tags == tag
        return np.nonzero(mask)[0]

    def boundary_tag_dict(self):
        out = {}
        for e in self.boundary_edges():
            a, b = self.edges[e]
            out[(int(a), int(b))] = _TAG_NAMES[self.edge_tags[e]]
        return out

    # -- invariants ----------------------------------------------------------

    def validate(self):
        areas = self.signed_areas()
        if np.any(areas <= 0):
            bad = int(np.argmin(areas))
            raise MeshError(f"cell {bad} is not counter-clockwise "
                            f"(signed area {areas[bad]:.3e})")
        used = np.zeros(self.num_vertices, dtype=bool)
        used[self.cells.ravel()] = True
        if not used.all():
            raise MeshError("mesh has unused (hanging) vertices")
        interior = self._edge_count == 2
        boundary = self._edge_count == 1
        if not np.all(interior | boundary):
            raise MeshError("edge incident to no cell")
        if np.any(self.edge_tags[boundary] == INTERIOR):
            e = int(np.nonzero(boundary & (self.edge_tags == INTERIOR))[0][0])
            raise MeshError(f"boundary edge {tuple(self.edges[e])} is untagged")
        if np.any(self.edge_tags[interior] != INTERIOR):
            e = int(np.nonzero(interior & (self.edge_tags != INTERIOR))[0][0])
            raise MeshError(f"interior edge {tuple(self.edges[e])} carries a "
                            "boundary tag")
        euler = self.num_vertices - self.num_edges + self.num_cells + 1
        if euler != 2:
            raise MeshError(f"Euler relation violated: V-E+C+1 = {euler}")


def mesh_size(mesh: TriMesh) -> float:
    """Largest cell diameter."""
    return float(mesh.cell_diameters().max())


# -- generators ---------------------------------------------------------------

def unit_square_mesh(n: int) -> TriMesh:
    """Structured mesh of (0,1)^2, squares split along the (+1,+1) diagonal.

    Bottom and left boundary segments are Dirichlet, top and right Neumann.
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    xs = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(xs, xs, indexing="ij")
    vid = lambda i, j: i * (n + 1) + j
    vertices = np.column_stack([xx.ravel(), yy.ravel()])
    cells = []
    for i in range(n):
        for j in range(n):
            a = vid(i, j)
            b = vid(i + 1, j)
            c = vid(i + 1, j + 1)
            d = vid(i, j + 1)
            cells.append([a, b, c])
            cells.append([a, c, d])
    tags = {}
    for j in range(n):
        tags[_edge_key(vid(0, j), vid(0, j + 1))] = "D"      # x = 0
        tags[_edge_key(vid(n, j), vid(n, j + 1))] = "N"      # x = 1
    for i in range(n):
        tags[_edge_key(vid(i, 0), vid(i + 1, 0))] = "D"      # y = 0
        tags[_edge_key(vid(i, n), vid(i + 1, n))] = "N"      # y = 1
    return TriMesh(vertices, np.array(cells), tags)


def lshape_mesh(n: int) -> TriMesh:
    """Rotated L-shape (-1,1)^2 minus (-1,0)^2, n cells per unit length.

    Neumann on the outer segments x = +-1 and y = +-1, Dirichlet on the
    reentrant segments (x = 0, y < 0) and (y = 0, x < 0).
    """
    if n < 1:
        raise ValueError("n must be a positive integer")
    m = 2 * n
    xs = np.linspace(-1.0, 1.0, m + 1)
    index = {}
    vertices = []
    for i in range(m + 1):
        for j in range(m + 1):
            x, y = xs[i], xs[j]
            if x < 0 and y < 0:
                continue
            index[(i, j)] = len(vertices)
            vertices.append([x, y])
    cells = []
    for i in range(m):
        for j in range(m):
            # skip squares inside the removed quadrant
            if xs[i + 1] <= 0 and xs[j + 1] <= 0:
                continue
            a = index[(i, j)]
            b = index[(i + 1, j)]
            c = index[(i + 1, j + 1)]
            d = index[(i, j + 1)]
            cells.append([a, b, c])
            cells.append([a, c, d])
    tags = {}

    def seg(i0, j0, i1, j1, tag):
        tags[_edge_key(index[(i0, j0)], index[(i1, j1)])] = tag

    for j in range(m):
        seg(m, j, m, j + 1, "N")                     # x = 1
        if xs[j] >= 0:
            seg(0, j, 0, j + 1, "N")                 # x = -1, y >= 0
    for i in range(m):
        seg(i, m, i + 1, m, "N")                     # y = 1
        if xs[i] >= 0:
            seg(i, 0, i + 1, 0, "N")                 # y = -1, x >= 0
    for j in range(n):                               # x = 0, -1 <= y <= 0
        seg(n, j, n, j + 1, "D")
    for i in range(n):                               # y = 0, -1 <= x <= 0
        seg(i, n, i + 1, n, "D")
    return TriMesh(np.array(vertices), np.array(cells), tags)


# -- refinement ---------------------------------------------------------------

def uniform_refine(mesh: TriMesh) -> TriMesh:
    """Red refinement: each cell split into 4 similar children."""
    verts = [tuple(v) for v in mesh.vertices]
    vcount = mesh.num_vertices
    mid = {}

    def midpoint(a, b):
        nonlocal vcount
        k = _edge_key(a, b)
        if k not in mid:
            verts.append(tuple(0.5 * (mesh.vertices[a] + mesh.vertices[b])))
            mid[k] = vcount
            vcount += 1
        return mid[k]

    cells = []
    regions = []
    for c in range(mesh.num_cells):
        a, b, d = (int(v) for v in mesh.cells[c])
        mab = midpoint(a, b)
        mbd = midpoint(b, d)
        mda = midpoint(d, a)
        for tri in ([a, mab, mda], [mab, b, mbd], [mda, mbd, d],
                    [mab, mbd, mda]):
            cells.append(tri)
            regions.append(mesh.regions[c])
    tags = {}
    for (a, b), tag in mesh.boundary_tag_dict().items():
        m = mid[_edge_key(a, b)]
        tags[_edge_key(a, m)] = tag
        tags[_edge_key(m, b)] = tag
    return TriMesh(np.array(verts), np.array(cells), tags,
                   regions=np.array(regions))


def bisect_refine_with_parents(mesh: TriMesh, marked):
    """Newest-vertex bisection of the marked cells with conforming closure.

    Returns ``(mesh, parents)`` where ``parents[i]`` is the index of the
    input cell that produced output cell ``i``.
    """
    marked = np.asarray(sorted(set(int(m) for m in marked)), dtype=np.int64)
    if marked.size == 0:
        return (TriMesh(mesh.vertices.copy(), mesh.cells.copy(),
                        mesh.boundary_tag_dict(), regions=mesh.regions.copy(),
                        ref_edges=mesh.ref_edges.copy()),
                np.arange(mesh.num_cells))
    if marked.min() < 0 or marked.max() >= mesh.num_cells:
        raise ValueError("marked cell index out of range")

    E = mesh.num_edges
    edge_marked = np.zeros(E, dtype=bool)
    ref_global = mesh.cell_edges[np.arange(mesh.num_cells), mesh.ref_edges]
    edge_marked[ref_global[marked]] = True
    # closure: a cell with any marked edge must have its refinement edge marked
    while True:
        cells_hit = edge_marked[mesh.cell_edges].any(axis=1)
        need = cells_hit & ~edge_marked[ref_global]
        if not need.any():
            break
        edge_marked[ref_global[need]] = True

    verts = [tuple(v) for v in mesh.vertices]
    vcount = mesh.num_vertices
    mid = {}

    def midpoint(a, b):
        nonlocal vcount
        k = _edge_key(a, b)
        if k not in mid:
            verts.append(tuple(0.5 * (mesh.vertices[a] + mesh.vertices[b])))
            mid[k] = vcount
            vcount += 1
        return mid[k]

    is_marked_pair = {}
    for e in np.nonzero(edge_marked)[0]:
        is_marked_pair[(int(mesh.edges[e, 0]), int(mesh.edges[e, 1]))] = True

    def pair_marked(a, b):
        return is_marked_pair.get(_edge_key(a, b), False)

    new_cells = []
    new_ref = []
    new_regions = []
    parents = []

    def emit(tri, ref, region, parent):
        new_cells.append(tri)
        new_ref.append(ref)
        new_regions.append(region)
        parents.append(parent)

    for c in range(mesh.num_cells):
        r = int(mesh.ref_edges[c])
        vs = [int(v) for v in mesh.cells[c]]
        pk = vs[r]                      # peak: vertex opposite refinement edge
        a = vs[(r + 1) % 3]
        b = vs[(r + 2) % 3]
        if not pair_marked(a, b):
            emit(vs, r, mesh.regions[c], c)
            continue
        m = midpoint(a, b)
        # children (a, m, pk) and (m, b, pk); new refinement edge opposite m
        for child, sub_edge in (((a, m, pk), (pk, a)), ((m, b, pk), (b, pk))):
            if pair_marked(*sub_edge):
                # bisect the child at its own refinement edge
                ca, cb = sub_edge
                m2 = midpoint(ca, cb)
                # child has peak m; grandchildren get peak m2
                emit([ca, m2, m], 1, mesh.regions[c], c)
                emit([m2, cb, m], 0, mesh.regions[c], c)
            else:
                tri = list(child)
                # refinement edge is opposite the newest vertex m
                ref = tri.index(m)
                emit(tri, ref, mesh.regions[c], c)

    tags = {}
    for (a, b), tag in mesh.boundary_tag_dict().items():
        if pair_marked(a, b):
            m = mid[_edge_key(a, b)]
            tags[_edge_key(a, m)] = tag
            tags[_edge_key(m, b)] = tag
        else:
            tags[(a, b)] = tag
    out = TriMesh(np.array(verts), np.array(new_cells), tags,
                  regions=np.array(new_regions),
                  ref_edges=np.array(new_ref))
    return out, np.array(parents)


def bisect_refine(mesh: TriMesh, marked) -> TriMesh:
    """Newest-vertex bisection of ``marked`` cells, with conforming closure."""
    out, _ = bisect_refine_with_parents(mesh, marked)
    return out


# -- file I/O ----------------------------------------------------------------

def write_mesh(mesh: TriMesh, path):
    lines = ["trimesh 1", f"vertices {mesh.num_vertices}"]
    for v in mesh.vertices:
        lines.append(f"{v[0]:.17g} {v[1]:.17g}")
    lines.append(f"cells {mesh.num_cells}")
    for c in range(mesh.num_cells):
        a, b, d = mesh.cells[c]
        lines.append(f"{a} {b} {d} {mesh.regions[c]}")
    btags = mesh.boundary_tag_dict()
    lines.append(f"boundary {len(btags)}")
    for (a, b), tag in sorted(btags.items()):
        lines.append(f"{a} {b} {tag}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path) -> TriMesh:
    with open(path) as fh:
        raw = fh.readlines()
    # keep original line numbers, skipping comments/blanks
    items = [(i + 1, ln.strip()) for i, ln in enumerate(raw)
             if ln.strip() and not ln.strip().startswith("#")]
    pos = 0

    def next_line(what):
        nonlocal pos
        if pos >= len(items):
            last = items[-1][0] if items else 0
            raise MeshFormatError(last + 1, f"unexpected end of file, expected {what}")
        lineno, text = items[pos]
        pos += 1
        return lineno, text

    lineno, header = next_line("header")
    if header.split() != ["trimesh", "1"]:
        raise MeshFormatError(lineno, f"bad header {header!r}, expected 'trimesh 1'")

    lineno, text = next_line("vertex count")
    parts = text.split()
    if len(parts) != 2 or parts[0] != "vertices":
        raise MeshFormatError(lineno, f"expected 'vertices N', got {text!r}")
    try:
        nv = int(parts[1])
    except ValueError:
        raise MeshFormatError(lineno, f"bad vertex count {parts[1]!r}")
    vertices = np.zeros((nv, 2))
    for i in range(nv):
        lineno, text = next_line("vertex coordinates")
        parts = text.split()
        if len(parts) != 2:
            raise MeshFormatError(lineno, "expected 'x y'")
        try:
            vertices[i] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshFormatError(lineno, f"bad coordinate in {text!r}")

    lineno, text = next_line("cell count")
    parts = text.split()
    if len(parts) != 2 or parts[0] != "cells":
        raise MeshFormatError(lineno, f"expected 'cells M', got {text!r}")
    nc = int(parts[1])
    cells = np.zeros((nc, 3), dtype=np.int64)
    regions = np.zeros(nc, dtype=np.int64)
    for i in range(nc):
        lineno, text = next_line("cell connectivity")
        parts = text.split()
        if len(parts) != 4:
            raise MeshFormatError(lineno, "expected 'v0 v1 v2 region'")
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise MeshFormatError(lineno, f"bad integer in {text!r}")
        if any(v < 0 or v >= nv for v in vals[:3]):
            raise MeshFormatError(lineno, f"vertex index out of range in {text!r}")
        cells[i] = vals[:3]
        regions[i] = vals[3]

    lineno, text = next_line("boundary count")
    parts = text.split()
    if len(parts) != 2 or parts[0] != "boundary":
        raise MeshFormatError(lineno, f"expected 'boundary K', got {text!r}")
    nb = int(parts[1])
    tags = {}
    for i in range(nb):
        lineno, text = next_line("boundary edge")
        parts = text.split()
        if len(parts) != 3:
            raise MeshFormatError(lineno, "expected 'v0 v1 tag'")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError:
            raise MeshFormatError(lineno, f"bad vertex index in {text!r}")
        if parts[2] not in _TAG_CHARS:
            raise MeshFormatError(lineno,
                                  f"boundary tag must be D or N, got {parts[2]!r}")
        if a < 0 or a >= nv or b < 0 or b >= nv:
            raise MeshFormatError(lineno, f"vertex index out of range in {text!r}")
        tags[_edge_key(a, b)] = parts[2]

    try:
        return TriMesh(vertices, cells, tags, regions=regions)
    except MeshError as exc:
        raise MeshFormatError(lineno, str(exc)) from exc
