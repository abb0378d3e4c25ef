"""Simplicial meshes for solid, fluid, and coupled solid-fluid domains.

All generated meshes come from a Cartesian lattice on [-n, n]^d split into
simplices by the Kuhn (main-diagonal) template: 2 triangles per square, 6
tetrahedra per cube, identical in every cell so the triangulation conforms
across cell faces and is symmetric under point inversion.  Curved shapes
(disk, ball, ellipsoid) use a radial map that sends the lattice's max-norm
shells onto concentric boundary-shaped shells; lattice vertices on the
outermost shell land exactly on the curved boundary.

Coupled meshes embed a generated structure mesh unchanged (same vertex and
cell ordering, bit-identical coordinates) and graft fluid shells onto its
boundary, so the interface is conformal by construction and the structure
sub-mesh can be recovered exactly.

Region tags: SOLID / FLUID cells; INTERFACE / OUTER boundary facets.
Interface facet normals point out of the solid; outer normals out of the
domain.  Refinement increments halve the lattice spacing.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, ResourceLimitError, ValidationError

SOLID = 0
FLUID = 1
INTERFACE = 1
OUTER = 2

_SHAPES_2D = ("disk", "square")
_SHAPES_3D = ("ball", "box", "ellipsoid")
DEFAULT_MAX_VERTICES = 2_000_000


@dataclass(frozen=True)
class ShapeSpec:
    """A named generator shape with positive size parameters.

    kinds: disk(r), square(a) in 2D; ball(r), box(a, b, c), ellipsoid(a, b, c)
    in 3D.  square/box are centered at the origin with the given side lengths.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        kind = self.kind
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        expected = {"disk": 1, "square": 1, "ball": 1, "box": 3, "ellipsoid": 3}
        if kind not in expected:
            raise ValidationError(f"unknown shape kind {kind!r}")
        if len(params) != expected[kind]:
            raise ValidationError(
                f"{kind} takes {expected[kind]} parameter(s), got {len(params)}"
            )
        if any(p <= 0 for p in params):
            raise ValidationError(f"{kind} parameters must be positive: {params}")

    @property
    def dim(self):
        return 2 if self.kind in _SHAPES_2D else 3

    def boundary_radius(self, direction):
        """Distance from the origin to the shape boundary along unit rays.

        `direction` is an (n, d) array of unit vectors; returns (n,) radii.
        """
        d = np.asarray(direction, dtype=np.float64)
        if self.kind in ("ball", "disk"):
            return np.full(d.shape[0], self.params[0])
        if self.kind == "ellipsoid":
            a = np.asarray(self.params)
            return 1.0 / np.sqrt(np.sum((d / a) ** 2, axis=1))
        # square/box: first boundary plane hit along the ray
        if self.kind == "square":
            half = np.full(2, 0.5 * self.params[0])
        else:
            half = 0.5 * np.asarray(self.params)
        with np.errstate(divide="ignore"):
            t = half / np.abs(d)
        return np.min(t, axis=1)

    def volume(self):
        if self.kind == "disk":
            return math.pi * self.params[0] ** 2
        if self.kind == "square":
            return self.params[0] ** 2
        if self.kind == "ball":
            return 4.0 / 3.0 * math.pi * self.params[0] ** 3
        if self.kind == "ellipsoid":
            a, b, c = self.params
            return 4.0 / 3.0 * math.pi * a * b * c
        a, b, c = self.params
        return a * b * c

    def to_dict(self):
        return {"kind": self.kind, "params": list(self.params)}

    @staticmethod
    def from_dict(d):
        return ShapeSpec(d["kind"], tuple(d["params"]))


def shape(kind, *params):
    """Convenience constructor: shape('ball', 1.0)."""
    return ShapeSpec(kind, tuple(params))


# --- Kuhn simplex templates ------------------------------------------------

def _kuhn_templates(d):
    """Vertex-offset tuples of the Kuhn subdivision of the unit cube.

    Each simplex is a monotone lattice path 0 -> (1,..,1); the set is closed
    under reversing the path, which makes the triangulation symmetric under
    point inversion of the lattice.
    """
    templates = []
    for perm in itertools.permutations(range(d)):
        corner = np.zeros(d, dtype=np.int64)
        verts = [corner.copy()]
        for axis in perm:
            corner = corner.copy()
            corner[axis] += 1
            verts.append(corner)
        templates.append(np.array(verts))
    return templates


@dataclass(frozen=True)
class Mesh:
    """Immutable simplicial mesh with region and boundary tagging.

    verts: (nv, dim) float64; cells: (nc, dim+1) int32 vertex ids, positively
    oriented; cell_region: (nc,) int8 of SOLID/FLUID; facet_verts: (nf, dim)
    int32 tagged boundary/interface facets; facet_tag: INTERFACE or OUTER;
    facet_cell: owning cell id (the solid cell for interface facets);
    facet_normal/facet_measure: unit outward normal (out of the solid for the
    interface) and facet length/area; gen_info: generator provenance used to
    rebuild and to embed structure meshes in coupled ones.
    """

    dim: int
    verts: np.ndarray
    cells: np.ndarray
    cell_region: np.ndarray
    facet_verts: np.ndarray
    facet_tag: np.ndarray
    facet_cell: np.ndarray
    facet_normal: np.ndarray
    facet_measure: np.ndarray
    gen_info: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("verts", "cells", "cell_region", "facet_verts", "facet_tag",
                     "facet_cell", "facet_normal", "facet_measure"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    # -- basic queries ------------------------------------------------------

    @property
    def num_vertices(self):
        return self.verts.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    def cell_volumes(self):
        v = self.verts[self.cells]
        edges = v[:, 1:, :] - v[:, :1, :]
        det = np.linalg.det(edges)
        return det / math.factorial(self.dim)

    def volume(self, region=None):
        vols = self.cell_volumes()
        if region is None:
            return float(vols.sum())
        return float(vols[self.cell_region == region].sum())

    def max_cell_diameter(self):
        v = self.verts[self.cells]
        dmax = 0.0
        npts = self.dim + 1
        for i in range(npts):
            for j in range(i + 1, npts):
                dmax = max(dmax, float(np.max(np.linalg.norm(v[:, i] - v[:, j], axis=1))))
        return dmax

    def facet_ids(self, tag):
        return np.nonzero(self.facet_tag == tag)[0]

    def vertex_region(self):
        """Per-vertex tag: 2 on the interface, else SOLID(0)/FLUID(1)."""
        reg = np.full(self.num_vertices, -1, dtype=np.int8)
        fluid_cells = self.cells[self.cell_region == FLUID]
        if fluid_cells.size:
            reg[np.unique(fluid_cells)] = FLUID
        solid_cells = self.cells[self.cell_region == SOLID]
        if solid_cells.size:
            reg[np.unique(solid_cells)] = SOLID
        iface = self.facet_verts[self.facet_tag == INTERFACE]
        if iface.size:
            reg[np.unique(iface)] = 2
        return reg

    def interface_vertices(self):
        f = self.facet_verts[self.facet_tag == INTERFACE]
        return np.unique(f) if f.size else np.empty(0, dtype=np.int32)

    def outer_vertices(self):
        f = self.facet_verts[self.facet_tag == OUTER]
        return np.unique(f) if f.size else np.empty(0, dtype=np.int32)

    def content_hash(self):
        h = hashlib.sha256()
        h.update(str(self.dim).encode())
        for arr in (self.verts, self.cells, self.cell_region, self.facet_verts,
                    self.facet_tag):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def __hash__(self):
        return hash((self.dim, self.num_vertices, self.num_cells,
                     self.verts.tobytes()[:64]))

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (self.dim == other.dim
                and np.array_equal(self.verts, other.verts)
                and np.array_equal(self.cells, other.cells)
                and np.array_equal(self.cell_region, other.cell_region)
                and np.array_equal(self.facet_verts, other.facet_verts)
                and np.array_equal(self.facet_tag, other.facet_tag))


# --- facet machinery --------------------------------------------------------

def _facet_geometry(verts, facet_verts, ref_points, dim):
    """Measure and unit normal for each facet, oriented away from ref_points."""
    coords = verts[facet_verts]
    if dim == 2:
        tang = coords[:, 1] - coords[:, 0]
        measure = np.linalg.norm(tang, axis=1)
        normal = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
    else:
        e1 = coords[:, 1] - coords[:, 0]
        e2 = coords[:, 2] - coords[:, 0]
        normal = np.cross(e1, e2)
        measure = 0.5 * np.linalg.norm(normal, axis=1)
    normal = normal / np.linalg.norm(normal, axis=1)[:, None]
    centroid = coords.mean(axis=1)
    flip = np.einsum("ij,ij->i", normal, centroid - ref_points) < 0
    normal[flip] *= -1.0
    return measure, normal


def _build_facets(dim, verts, cells, cell_region):
    """Extract tagged facets: domain boundary -> OUTER (INTERFACE when the
    mesh is all solid), solid/fluid internal boundary -> INTERFACE."""
    nc = cells.shape[0]
    npf = dim  # vertices per facet
    local_facets = list(itertools.combinations(range(dim + 1), npf))
    all_f = []
    owner = []
    for lf in local_facets:
        all_f.append(np.sort(cells[:, lf], axis=1))
        owner.append(np.arange(nc))
    all_f = np.concatenate(all_f)
    owner = np.concatenate(owner)
    order = np.lexsort(all_f.T[::-1])
    all_f = all_f[order]
    owner = owner[order]
    same = np.all(all_f[1:] == all_f[:-1], axis=1)
    # boundary facets appear exactly once in the sorted list
    first = np.concatenate([[True], ~same])
    is_second = np.concatenate([[False], same])
    boundary_mask = first & ~np.concatenate([same, [False]])
    b_facets = all_f[boundary_mask]
    b_owner = owner[boundary_mask]
    # internal facets with two owners of different regions
    pair_first = np.nonzero(is_second)[0] - 1
    pair_second = np.nonzero(is_second)[0]
    c1 = owner[pair_first]
    c2 = owner[pair_second]
    mixed = cell_region[c1] != cell_region[c2]
    i_facets = all_f[pair_first][mixed]
    solid_owner = np.where(cell_region[c1[mixed]] == SOLID, c1[mixed], c2[mixed])

    all_solid = bool(np.all(cell_region == SOLID))
    tags = []
    fverts = []
    fowner = []
    if b_facets.size:
        fverts.append(b_facets)
        fowner.append(b_owner)
        tags.append(np.full(b_facets.shape[0], INTERFACE if all_solid else OUTER,
                            dtype=np.int8))
    if i_facets.size:
        fverts.append(i_facets)
        fowner.append(solid_owner)
        tags.append(np.full(i_facets.shape[0], INTERFACE, dtype=np.int8))
    if not fverts:
        raise GeometryError("mesh has no boundary facets")
    facet_verts = np.concatenate(fverts).astype(np.int32)
    facet_cell = np.concatenate(fowner).astype(np.int32)
    facet_tag = np.concatenate(tags)
    # canonical order: tag, then lexicographic vertex ids
    order = np.lexsort(tuple(facet_verts.T[::-1]) + (facet_tag,))
    facet_verts = facet_verts[order]
    facet_cell = facet_cell[order]
    facet_tag = facet_tag[order]
    # orient: for each facet, reference point = opposite vertex of owner cell
    own_cells = cells[facet_cell]
    ref_pts = np.empty((facet_verts.shape[0], dim))
    for i in range(facet_verts.shape[0]):
        cset = set(facet_verts[i])
        opp = [v for v in own_cells[i] if v not in cset]
        ref_pts[i] = verts[opp[0]]
    measure, normal = _facet_geometry(verts, facet_verts, ref_pts, dim)
    return facet_verts, facet_tag, facet_cell, normal, measure


def _orient_cells(verts, cells, dim):
    v = verts[cells]
    edges = v[:, 1:, :] - v[:, :1, :]
    det = np.linalg.det(edges)
    if np.any(np.abs(det) < 1e-14 * np.max(np.abs(det))):
        raise GeometryError("degenerate (zero-volume) cell produced by the map")
    neg = det < 0
    if neg.any():
        cells = cells.copy()
        cells[neg, -2], cells[neg, -1] = cells[neg, -1].copy(), cells[neg, -2].copy()
    return cells


def _finalize(dim, verts, cells, cell_region, gen_info):
    cells = _orient_cells(verts, cells, dim)
    fv, ft, fc, fn, fm = _build_facets(dim, verts, cells, cell_region)
    mesh = Mesh(dim=dim, verts=verts, cells=cells.astype(np.int32),
                cell_region=cell_region.astype(np.int8), facet_verts=fv,
                facet_tag=ft, facet_cell=fc, facet_normal=fn, facet_measure=fm,
                gen_info=gen_info)
    _check_mesh_invariants(mesh)
    return mesh


def _check_mesh_invariants(mesh):
    vols = mesh.cell_volumes()
    if np.any(vols <= 0):
        raise GeometryError("non-positive cell volume after orientation fix")
    iface = mesh.facet_tag == INTERFACE
    if iface.any():
        closed = np.abs((mesh.facet_measure[iface, None] * mesh.facet_normal[iface]).sum(axis=0)).max()
        area = mesh.facet_measure[iface].sum()
        if closed > 1e-10 * max(area, 1e-30):
            raise GeometryError(f"interface is not closed: |sum measure*n| = {closed:g}")
    # no solid vertex on the outer boundary
    if (mesh.cell_region == FLUID).any():
        solid_verts = set(np.unique(mesh.cells[mesh.cell_region == SOLID]).tolist())
        outer_verts = set(mesh.outer_vertices().tolist())
        if solid_verts & outer_verts:
            raise GeometryError("solid touches the outer boundary")


# --- lattice enumeration ----------------------------------------------------

def _lattice_points(n, dim):
    """Integer lattice [-n, n]^d in a fixed deterministic order (last axis
    fastest), as an (N, d) int array."""
    axes = [np.arange(-n, n + 1, dtype=np.int64)] * dim
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return grid.reshape(-1, dim)

def _cube_corners(n, dim):
    """Min-corner lattice coordinates of all unit cubes in [-n, n]^d."""
    axes = [np.arange(-n, n, dtype=np.int64)] * dim
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return grid.reshape(-1, dim)


def _cells_from_cubes(corners, vert_index, dim):
    """Kuhn-subdivide each cube; vert_index maps lattice tuples to ids."""
    templates = _kuhn_templates(dim)
    ncube = corners.shape[0]
    cells = np.empty((ncube * len(templates), dim + 1), dtype=np.int64)
    row = 0
    for tpl in templates:
        pts = corners[:, None, :] + tpl[None, :, :]
        idx = vert_index(pts.reshape(-1, dim)).reshape(ncube, dim + 1)
        cells[row:row + ncube] = idx
        row += ncube
    # deterministic cell order: cube-major, template-minor
    cells = cells.reshape(len(templates), ncube, dim + 1).transpose(1, 0, 2)
    return cells.reshape(-1, dim + 1)


class _LatticeIndex:
    def __init__(self, pts):
        self._map = {tuple(p): i for i, p in enumerate(pts.tolist())}

    def __call__(self, pts):
        m = self._map
        return np.fromiter((m[tuple(p)] for p in pts.tolist()), dtype=np.int64,
                           count=pts.shape[0])


# --- shape maps -------------------------------------------------------------

def _map_structure(shape_spec, lattice, n):
    """Map lattice/n in [-1,1]^d onto the shape.

    Box shapes scale the cube directly.  Round shapes use the smooth
    elliptic cube-to-ball map, which sends the cube surface exactly onto the
    unit sphere/circle (so outer-shell vertices lie exactly on the boundary)
    while keeping interior cells uniformly well-shaped -- a max-norm radial
    push would kink along the diagonals and degrade boundary-flux accuracy.
    """
    x = lattice.astype(np.float64) / float(n)
    kind = shape_spec.kind
    if kind == "square":
        return 0.5 * shape_spec.params[0] * x
    if kind == "box":
        half = 0.5 * np.asarray(shape_spec.params)
        return x * half[None, :]
    # round shapes
    if shape_spec.dim == 2:
        xx, yy = x[:, 0], x[:, 1]
        unit = np.stack([xx * np.sqrt(np.maximum(1.0 - yy * yy / 2.0, 0.0)),
                         yy * np.sqrt(np.maximum(1.0 - xx * xx / 2.0, 0.0))],
                        axis=1)
    else:
        xx, yy, zz = x[:, 0], x[:, 1], x[:, 2]
        fx = 1.0 - yy * yy / 2.0 - zz * zz / 2.0 + yy * yy * zz * zz / 3.0
        fy = 1.0 - zz * zz / 2.0 - xx * xx / 2.0 + zz * zz * xx * xx / 3.0
        fz = 1.0 - xx * xx / 2.0 - yy * yy / 2.0 + xx * xx * yy * yy / 3.0
        unit = np.stack([xx * np.sqrt(np.maximum(fx, 0.0)),
                         yy * np.sqrt(np.maximum(fy, 0.0)),
                         zz * np.sqrt(np.maximum(fz, 0.0))], axis=1)
    if kind in ("ball", "disk"):
        return shape_spec.params[0] * unit
    # ellipsoid: semi-axes a, b, c
    return unit * np.asarray(shape_spec.params)[None, :]


def generate_structure_mesh(shape_spec, refinement, max_vertices=DEFAULT_MAX_VERTICES):
    """Mesh of a solid structure shape.

    refinement >= 1; the lattice has 2^refinement segments per side, so each
    increment halves the mesh size.  All cells are SOLID and every boundary
    facet is tagged INTERFACE.
    """
    if isinstance(shape_spec, (tuple, list)):
        shape_spec = ShapeSpec(shape_spec[0], tuple(shape_spec[1:]))
    if refinement < 1 or int(refinement) != refinement:
        raise ValidationError(f"refinement must be a positive integer, got {refinement}")
    n = 2 ** (int(refinement) - 1)
    dim = shape_spec.dim
    nv = (2 * n + 1) ** dim
    if nv > max_vertices:
        raise ResourceLimitError(
            f"refinement {refinement} needs {nv} vertices > cap {max_vertices}")
    lattice = _lattice_points(n, dim)
    verts = _map_structure(shape_spec, lattice, n)
    index = _LatticeIndex(lattice)
    cells = _cells_from_cubes(_cube_corners(n, dim), index, dim)
    region = np.zeros(cells.shape[0], dtype=np.int8)
    gen_info = {"generator": "structure", "shape": shape_spec.to_dict(),
                "refinement": int(refinement), "half_grid": n}
    return _finalize(dim, verts, cells, region, gen_info)


def generate_coupled_mesh(structure, outer, refinement,
                          max_vertices=DEFAULT_MAX_VERTICES):
    """Coupled solid-fluid mesh: the structure mesh embedded unchanged, plus
    2^refinement fluid shells blending its boundary onto the outer shape.

    `structure` must come from generate_structure_mesh (its gen_info drives
    the embedding); `outer` is a ball/disk/box/square ShapeSpec strictly
    containing the structure.  The solid sub-mesh (first vertices/cells) is
    bit-identical to `structure`; the solid/fluid interface is conformal.
    """
    if isinstance(outer, (tuple, list)):
        outer = ShapeSpec(outer[0], tuple(outer[1:]))
    info = structure.gen_info
    if info.get("generator") != "structure":
        raise ValidationError("coupled meshes require a generated structure mesh")
    if refinement < 1 or int(refinement) != refinement:
        raise ValidationError(f"refinement must be a positive integer, got {refinement}")
    dim = structure.dim
    if outer.dim != dim:
        raise ValidationError(f"outer shape dim {outer.dim} != structure dim {dim}")
    sspec = ShapeSpec.from_dict(info["shape"])
    ns = int(info["half_grid"])
    layers = 2 ** int(refinement)
    ntot = ns + layers
    nv = (2 * ntot + 1) ** dim
    if nv > max_vertices:
        raise ResourceLimitError(
            f"coupled refinement {refinement} needs {nv} vertices > cap {max_vertices}")

    lattice = _lattice_points(ntot, dim)
    linf = np.max(np.abs(lattice), axis=1)
    solid_sel = linf <= ns
    fluid_sel = ~solid_sel
    solid_lattice = _lattice_points(ns, dim)
    # vertex order: structure lattice order first, then outer shells
    verts = np.empty((nv, dim))
    nsolid_v = solid_lattice.shape[0]
    verts[:nsolid_v] = _map_structure(sspec, solid_lattice, ns)
    fluid_lattice = lattice[fluid_sel]
    xf = fluid_lattice.astype(np.float64)
    r2 = np.linalg.norm(xf, axis=1)
    dirs = xf / r2[:, None]
    r_struct = _structure_boundary_radius(sspec, dirs)
    r_outer = outer.boundary_radius(dirs)
    clearance = r_outer - r_struct
    if np.min(clearance) <= 1e-12 * np.max(r_outer):
        raise GeometryError(
            "structure does not fit strictly inside the outer shape "
            f"(min clearance {np.min(clearance):g})")
    w = (np.max(np.abs(fluid_lattice), axis=1) - ns).astype(np.float64) / layers
    radii = r_struct + w * clearance
    verts[nsolid_v:] = dirs * radii[:, None]

    # index map consistent with solid-first vertex ordering
    pts_ordered = np.concatenate([solid_lattice, fluid_lattice])
    index = _LatticeIndex(pts_ordered)

    corners = _cube_corners(ntot, dim)
    corner_linf_max = np.max(np.maximum(np.abs(corners), np.abs(corners + 1)), axis=1)
    solid_cubes = corners[corner_linf_max <= ns]
    fluid_cubes = corners[corner_linf_max > ns]
    cells_s = _cells_from_cubes(solid_cubes, index, dim)
    cells_f = _cells_from_cubes(fluid_cubes, index, dim)
    cells = np.concatenate([cells_s, cells_f])
    region = np.concatenate([
        np.zeros(cells_s.shape[0], dtype=np.int8),
        np.ones(cells_f.shape[0], dtype=np.int8),
    ])
    gen_info = {
        "generator": "coupled", "structure": dict(info),
        "outer": outer.to_dict(), "refinement": int(refinement),
        "fluid_layers": layers,
    }
    return _finalize(dim, verts, cells, region, gen_info)


def _structure_boundary_radius(sspec, dirs):
    """Boundary distance of the *mapped* structure along each direction."""
    if sspec.kind in ("ball", "disk"):
        return np.full(dirs.shape[0], sspec.params[0])
    if sspec.kind in ("square", "box"):
        return sspec.boundary_radius(dirs)
    # ellipsoid
    return sspec.boundary_radius(dirs)


def extract_structure(coupled):
    """Recover the embedded structure mesh from a coupled mesh, bit-identically."""
    info = coupled.gen_info
    if info.get("generator") != "coupled":
        raise ValidationError("not a coupled mesh")
    sinfo = info["structure"]
    ns = int(sinfo["half_grid"])
    dim = coupled.dim
    nsolid_v = (2 * ns + 1) ** dim
    nsolid_c = int(np.sum(coupled.cell_region == SOLID))
    verts = coupled.verts[:nsolid_v].copy()
    cells = coupled.cells[:nsolid_c].copy()
    if np.any(cells >= nsolid_v):
        raise ValidationError("coupled mesh does not embed its structure first")
    region = np.zeros(nsolid_c, dtype=np.int8)
    return _finalize(dim, verts, cells.astype(np.int64), region, dict(sinfo))


def save_text(mesh, path):
    """Write a mesh in the native plain-text format.

    Grammar (one record per line, space-separated, '#' starts a comment)::

        lamewave-mesh 1
        dim <d>
        gen <json-one-liner or '{}'>
        vertices <nv>
        <x1> ... <xd>                (nv lines, %.17g -- exact float round-trip)
        cells <nc>
        <region> <v1> ... <v_{d+1}>  (nc lines)
        facets <nf>
        <tag> <cell> <v1> ... <v_d>  (nf lines)

    Facet normals/measures are recomputed on load; everything else round-trips
    bit-identically.
    """
    lines = ["lamewave-mesh 1", f"dim {mesh.dim}",
             "gen " + json.dumps(mesh.gen_info, sort_keys=True),
             f"vertices {mesh.num_vertices}"]
    for row in mesh.verts:
        lines.append(" ".join(f"{x:.17g}" for x in row))
    lines.append(f"cells {mesh.num_cells}")
    for reg, cell in zip(mesh.cell_region, mesh.cells):
        lines.append(str(int(reg)) + " " + " ".join(str(int(v)) for v in cell))
    lines.append(f"facets {mesh.facet_verts.shape[0]}")
    for tag, owner, fv in zip(mesh.facet_tag, mesh.facet_cell, mesh.facet_verts):
        lines.append(f"{int(tag)} {int(owner)} " + " ".join(str(int(v)) for v in fv))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_text(path):
    """Read a mesh written by save_text."""
    with open(path) as fh:
        raw = [ln.strip() for ln in fh]
    lines = [ln for ln in raw if ln and not ln.startswith("#")]
    if not lines or not lines[0].startswith("lamewave-mesh"):
        raise ValidationError(f"{path}: not a lamewave mesh file")
    pos = 1

    def expect(key):
        nonlocal pos
        if pos >= len(lines) or not lines[pos].startswith(key + " "):
            raise ValidationError(f"{path}: expected '{key} ...' at line {pos + 1}")
        val = lines[pos][len(key) + 1:]
        pos += 1
        return val

    dim = int(expect("dim"))
    gen_info = json.loads(expect("gen"))
    nv = int(expect("vertices"))
    verts = np.array([[float(t) for t in lines[pos + i].split()] for i in range(nv)])
    pos += nv
    nc = int(expect("cells"))
    rows = [lines[pos + i].split() for i in range(nc)]
    pos += nc
    cell_region = np.array([int(r[0]) for r in rows], dtype=np.int8)
    cells = np.array([[int(t) for t in r[1:]] for r in rows], dtype=np.int32)
    nf = int(expect("facets"))
    frows = [lines[pos + i].split() for i in range(nf)]
    pos += nf
    facet_tag = np.array([int(r[0]) for r in frows], dtype=np.int8)
    facet_cell = np.array([int(r[1]) for r in frows], dtype=np.int32)
    facet_verts = np.array([[int(t) for t in r[2:]] for r in frows], dtype=np.int32)
    if verts.shape != (nv, dim) or cells.shape != (nc, dim + 1):
        raise ValidationError(f"{path}: malformed vertex or cell block")
    ref_pts = np.empty((nf, dim))
    for i in range(nf):
        cset = set(facet_verts[i].tolist())
        opp = [v for v in cells[facet_cell[i]] if v not in cset]
        if not opp:
            raise ValidationError(f"{path}: facet {i} not a face of its cell")
        ref_pts[i] = verts[opp[0]]
    measure, normal = _facet_geometry(verts, facet_verts, ref_pts, dim)
    return Mesh(dim=dim, verts=verts, cells=cells, cell_region=cell_region,
                facet_verts=facet_verts, facet_tag=facet_tag,
                facet_cell=facet_cell, facet_normal=normal,
                facet_measure=measure, gen_info=gen_info)


def surface_integral_normal_dot(mesh, field, tag=INTERFACE):
    """Integral over tagged facets of (vertex vector field) . n.

    `field` is (num_vertices, dim); values on the facet vertices must be
    finite.  Uses the linear trace on each facet (exact for vertex-linear
    fields)."""
    field = np.asarray(field, dtype=np.float64)
    if field.shape != (mesh.num_vertices, mesh.dim):
        raise ValidationError(
            f"field shape {field.shape} != {(mesh.num_vertices, mesh.dim)}")
    ids = mesh.facet_ids(tag)
    if ids.size == 0:
        raise ValidationError(f"mesh has no facets with tag {tag}")
    fv = mesh.facet_verts[ids]
    if not np.all(np.isfinite(field[np.unique(fv)])):
        raise ValidationError("field has non-finite values on the surface vertices")
    mean_vals = field[fv].mean(axis=1)
    return float(np.einsum("i,ij,ij->", mesh.facet_measure[ids],
                           mean_vals, mesh.facet_normal[ids]))
