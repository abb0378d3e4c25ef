"""Finite-element assembly on simplicial meshes: P1/P2 Lagrange spaces,
elastic stiffness, masses, scalar Laplacian, mixed velocity-pressure blocks,
boundary traction recovery, and the energy inner products.

All element integrals are evaluated exactly from the barycentric moment
formula  int_T lam^a dV = d! |T| prod(a_i!) / (|a| + d)!  -- every bilinear
form here is polynomial on affine cells, so no quadrature tables are needed.
Assembly loops are vectorized over cells in a fixed order, which makes the
assembled matrices bit-reproducible.

The elastic stress is L(xi) = lam0 * D(xi) + lam1 * div(xi) * Id with
D = (grad + grad^T)/2, and the displacement form optionally includes the
zeroth-order shift term (xi, v).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import mesh as meshmod
from .errors import SolverError, ValidationError

_CELL_CHUNK = 8192


@dataclass(frozen=True)
class MaterialParams:
    """Material constants: Lamé pair (lam0, lam1), fluid viscosity nu, and
    the shift flag selecting the zeroth-order term in the solid operator.

    lam = lam0 + lam1 is derived, never stored.
    """

    lam0: float
    lam1: float
    nu: float = 1.0
    shift: bool = True

    def __post_init__(self):
        for name in ("lam0", "lam1", "nu"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0):
                raise ValidationError(f"{name} must be a positive real, got {v!r}")
            object.__setattr__(self, name, float(v))

    @property
    def lam(self):
        return self.lam0 + self.lam1


class SparseMatrix:
    """CSR matrix with symmetry flag and Dirichlet-constraint metadata.

    `constrained` lists eliminated DOF ids of the parent space and `free`
    the retained ones; `full_size` is the parent dimension.  A matrix that
    was never constrained has free=None and full_size==shape[0].
    """

    def __init__(self, mat, sym, constrained=None, free=None, full_size=None):
        mat = sp.csr_matrix(mat)
        mat.sort_indices()
        self.mat = mat
        self.sym = bool(sym)
        self.constrained = (np.asarray(constrained, dtype=np.int64)
                            if constrained is not None else np.empty(0, np.int64))
        self.free = np.asarray(free, dtype=np.int64) if free is not None else None
        self.full_size = int(full_size) if full_size is not None else mat.shape[0]
        if self.sym:
            d = abs(mat - mat.T)
            scale = abs(mat).max() or 1.0
            if d.nnz and d.max() > 1e-12 * scale:
                raise ValidationError(
                    f"matrix flagged symmetric violates |A-A^T| <= 1e-12|A|: {d.max():g}")

    @property
    def shape(self):
        return self.mat.shape

    @property
    def nnz(self):
        return self.mat.nnz

    def __matmul__(self, other):
        return self.mat @ other

    def toarray(self):
        return self.mat.toarray()

    def expand(self, v):
        """Scatter a reduced vector back to the parent space (zeros on
        constrained DOFs).  Identity when the matrix was never constrained."""
        v = np.asarray(v)
        if self.free is None:
            return v.copy()
        out = np.zeros(v.shape[:-1] + (self.full_size,), dtype=v.dtype)
        out[..., self.free] = v
        return out

    def restrict(self, v_full):
        """Pull a parent-space vector down to the free DOFs."""
        v_full = np.asarray(v_full)
        if self.free is None:
            return v_full.copy()
        return v_full[..., self.free]


def constrain(A, dofs):
    """Eliminate the listed DOFs from a SparseMatrix by symmetric row/column
    removal, recording the constraint metadata."""
    dofs = np.unique(np.asarray(dofs, dtype=np.int64))
    n = A.shape[0]
    if dofs.size and (dofs.min() < 0 or dofs.max() >= n):
        raise ValidationError("constrained DOF index out of range")
    keep = np.setdiff1d(np.arange(n), dofs, assume_unique=False)
    sub = A.mat[keep][:, keep]
    return SparseMatrix(sub, A.sym, constrained=dofs, free=keep, full_size=n)


# --- reference elements ------------------------------------------------------

def _basis_terms(dim, order):
    """Each basis function as a list of (coeff, exponent-tuple) in the d+1
    barycentric coordinates.  P2 node order: vertices, then edges in local
    lexicographic pair order."""
    nb = dim + 1
    terms = []
    for i in range(nb):
        e = [0] * nb
        e[i] = 1
        if order == 1:
            terms.append([(1.0, tuple(e))])
        else:
            e2 = [0] * nb
            e2[i] = 2
            terms.append([(2.0, tuple(e2)), (-1.0, tuple(e))])
    if order == 2:
        for i, j in _local_edges(dim):
            e = [0] * nb
            e[i] = 1
            e[j] = 1
            terms.append([(4.0, tuple(e))])
    return terms


def _local_edges(dim):
    return [(i, j) for i in range(dim + 1) for j in range(i + 1, dim + 1)]


def _moment(a, m):
    """Integral of prod(lam_i^a_i) over the m-simplex, including the m!|S|
    normalization for the unit-measure reference (multiply by m!|S|)."""
    num = 1.0
    for ai in a:
        num *= math.factorial(ai)
    return num / math.factorial(sum(a) + m)


def _diff_terms(terms, k):
    out = []
    for c, a in terms:
        if a[k] > 0:
            b = list(a)
            b[k] -= 1
            out.append((c * a[k], tuple(b)))
    return out


def _ref_tensors(dim, order):
    """Reference tensors for the (dim, order) Lagrange element.

    mass[i,j]   = int phi_i phi_j            (unit |detJ| scaling)
    grad[i,k,j,l] = int (dphi_i/dlam_k)(dphi_j/dlam_l)
    mixed[i,j,k]  = int phi_i (dphi_j/dlam_k)
    load[i]     = int phi_i
    Physical integrals are |detJ| times contractions with barycentric
    gradients."""
    basis = _basis_terms(dim, order)
    nb = len(basis)
    nl = dim + 1

    def integ(t1, t2=None):
        total = 0.0
        if t2 is None:
            for c, a in t1:
                total += c * _moment(a, dim)
            return total
        for c1, a1 in t1:
            for c2, a2 in t2:
                total += c1 * c2 * _moment(tuple(x + y for x, y in zip(a1, a2)), dim)
        return total

    dbasis = [[_diff_terms(b, k) for k in range(nl)] for b in basis]
    mass = np.array([[integ(bi, bj) for bj in basis] for bi in basis])
    grad = np.zeros((nb, nl, nb, nl))
    mixed = np.zeros((nb, nb, nl))
    for i in range(nb):
        for k in range(nl):
            for j in range(nb):
                for l in range(nl):
                    grad[i, k, j, l] = integ(dbasis[i][k], dbasis[j][l])
                mixed[i, j, k] = integ(basis[i], dbasis[j][k])
    loadv = np.array([integ(b) for b in basis])
    return mass, grad, mixed, loadv


def _facet_mass_ref(dim, order):
    """Facet-trace mass on the (d-1)-simplex, including the (d-1)! factor so
    the physical facet matrix is |F| times this."""
    m = dim - 1
    basis = _basis_terms(m, order)
    nb = len(basis)
    out = np.zeros((nb, nb))
    loadv = np.zeros(nb)
    fact = math.factorial(m)
    for i in range(nb):
        li = basis[i]
        loadv[i] = fact * sum(c * _moment(a, m) for c, a in li)
        for j in range(nb):
            tot = 0.0
            for c1, a1 in li:
                for c2, a2 in basis[j]:
                    tot += c1 * c2 * _moment(tuple(x + y for x, y in zip(a1, a2)), m)
            out[i, j] = fact * tot
    return out, loadv


# --- DOF maps ----------------------------------------------------------------

def _edge_table(mesh):
    """Global edge list (sorted vertex pairs, lexicographic) and per-cell
    local-edge -> global-edge ids."""
    cells = mesh.cells
    le = _local_edges(mesh.dim)
    pairs = np.concatenate([np.sort(cells[:, e], axis=1) for e in le])
    edges, inv = np.unique(pairs, axis=0, return_inverse=True)
    cell_edges = inv.reshape(len(le), -1).T
    return edges, cell_edges.astype(np.int64)


class DofMap:
    """Lagrange node/DOF numbering for one field.

    kind: 'scalar' or 'vector'; order: 1 or 2; region: 'SOLID', 'FLUID' or
    'GLOBAL'.  Nodes are mesh vertices (order 1/2) plus edge midpoints
    (order 2) of the region's cells, numbered vertices-first in mesh order;
    vector DOFs interleave components: dof = node * dim + component.
    """

    def __init__(self, mesh, kind, order, region="GLOBAL"):
        if kind not in ("scalar", "vector"):
            raise ValidationError(f"unknown field kind {kind!r}")
        if order not in (1, 2):
            raise ValidationError(f"order must be 1 or 2, got {order}")
        if region not in ("SOLID", "FLUID", "GLOBAL"):
            raise ValidationError(f"unknown region {region!r}")
        self.mesh = mesh
        self.kind = kind
        self.order = int(order)
        self.region = region
        self.ncomp = mesh.dim if kind == "vector" else 1
        if region == "GLOBAL":
            cell_ids = np.arange(mesh.num_cells)
        else:
            want = meshmod.SOLID if region == "SOLID" else meshmod.FLUID
            cell_ids = np.nonzero(mesh.cell_region == want)[0]
            if cell_ids.size == 0:
                raise ValidationError(f"mesh has no {region} cells")
        self.cell_ids = cell_ids
        cells = mesh.cells[cell_ids]
        vused = np.unique(cells)
        self.vert_ids = vused
        v2n = np.full(mesh.num_vertices, -1, dtype=np.int64)
        v2n[vused] = np.arange(vused.size)
        self._vert_to_node = v2n
        if order == 2:
            edges, cell_edges = _edge_table(mesh)
            eused = np.unique(cell_edges[cell_ids])
            e2n = np.full(edges.shape[0], -1, dtype=np.int64)
            e2n[eused] = vused.size + np.arange(eused.size)
            self.edge_verts = edges[eused]
            self._edge_to_node = e2n
            self.num_nodes = vused.size + eused.size
            self.cell_nodes = np.concatenate(
                [v2n[cells], e2n[cell_edges[cell_ids]]], axis=1)
        else:
            self.edge_verts = np.empty((0, 2), dtype=np.int64)
            self.num_nodes = vused.size
            self.cell_nodes = v2n[cells]
        self.num_dofs = self.num_nodes * self.ncomp

    def node_coords(self):
        c = self.mesh.verts[self.vert_ids]
        if self.order == 2:
            mid = 0.5 * (self.mesh.verts[self.edge_verts[:, 0]]
                         + self.mesh.verts[self.edge_verts[:, 1]])
            c = np.concatenate([c, mid])
        return c

    def cell_dofs(self):
        """(ncells, nodes_per_cell * ncomp) DOF ids, components interleaved."""
        n = self.cell_nodes
        if self.ncomp == 1:
            return n
        return (n[:, :, None] * self.ncomp
                + np.arange(self.ncomp)[None, None, :]).reshape(n.shape[0], -1)

    def boundary_nodes(self, tag):
        """Node ids lying on facets with the given tag."""
        m = self.mesh
        ids = m.facet_ids(tag)
        fv = m.facet_verts[ids]
        nodes = [self._vert_to_node[np.unique(fv)]]
        if self.order == 2:
            pairs = np.concatenate(
                [np.sort(fv[:, [i, j]], axis=1)
                 for i, j in _local_edges(m.dim - 1)])
            eids = _find_edges(self.edge_verts, np.unique(pairs, axis=0))
            nodes.append(self.vert_ids.size + eids)
        out = np.unique(np.concatenate(nodes))
        if (out < 0).any():
            raise ValidationError(f"tag {tag} facets touch nodes outside region "
                                  f"{self.region}")
        return out

    def boundary_dofs(self, tag):
        nodes = self.boundary_nodes(tag)
        if self.ncomp == 1:
            return nodes
        return (nodes[:, None] * self.ncomp
                + np.arange(self.ncomp)[None, :]).ravel()

    def inject(self, other):
        """Index array ix with other-DOF ix[i] matching self-DOF i, by shared
        mesh entity.  Requires same kind/order; raises if an entity of self
        is absent from other."""
        if (self.kind, self.order) != (other.kind, other.order):
            raise ValidationError("inject requires matching kind and order")
        nodes = [other._vert_to_node[self.vert_ids]]
        if self.order == 2:
            eids = _find_edges(other.edge_verts, self.edge_verts)
            nodes.append(np.where(eids >= 0, other.vert_ids.size + eids, -1))
        nmap = np.concatenate(nodes)
        if (nmap < 0).any():
            raise ValidationError("region nodes missing from target map")
        if self.ncomp == 1:
            return nmap
        return (nmap[:, None] * self.ncomp
                + np.arange(self.ncomp)[None, :]).ravel()

    def interpolate(self, f):
        """Nodal interpolation of a callable (points -> values) or of a
        per-mesh-vertex array (order 1: restriction; order 2: linear midpoint
        average -- exact for linear fields)."""
        pts = self.node_coords()
        if callable(f):
            vals = np.asarray(f(pts), dtype=np.float64)
        else:
            arr = np.asarray(f, dtype=np.float64)
            if arr.shape[0] != self.mesh.num_vertices:
                raise ValidationError("vertex array has wrong length")
            vals = arr[self.vert_ids]
            if self.order == 2:
                mids = 0.5 * (arr[self.edge_verts[:, 0]] + arr[self.edge_verts[:, 1]])
                vals = np.concatenate([vals, mids])
        if self.ncomp == 1:
            if vals.shape != (self.num_nodes,):
                raise ValidationError(f"scalar interpolant shape {vals.shape}")
            return vals.astype(np.float64)
        if vals.shape != (self.num_nodes, self.ncomp):
            raise ValidationError(f"vector interpolant shape {vals.shape}")
        return vals.ravel()

    def node_values(self, dofvec):
        """Reshape a DOF vector to (num_nodes, ncomp) (vector) or (num_nodes,)."""
        dofvec = np.asarray(dofvec)
        if dofvec.shape[-1] != self.num_dofs:
            raise ValidationError("DOF vector has wrong length")
        if self.ncomp == 1:
            return dofvec
        return dofvec.reshape(dofvec.shape[:-1] + (self.num_nodes, self.ncomp))

    def vertex_values(self, dofvec):
        """Field restricted to mesh vertices, as (num_vertices[, ncomp]) with
        zeros outside the region (for plotting / surface integrals)."""
        nv = self.node_values(dofvec)
        if self.ncomp == 1:
            out = np.zeros(self.mesh.num_vertices)
            out[self.vert_ids] = nv[: self.vert_ids.size]
        else:
            out = np.zeros((self.mesh.num_vertices, self.ncomp))
            out[self.vert_ids] = nv[: self.vert_ids.size]
        return out


def _find_edges(table, pairs):
    """Row indices of `pairs` in the lexicographically sorted pair `table`
    (-1 where absent)."""
    if table.shape[0] == 0:
        return np.full(pairs.shape[0], -1, dtype=np.int64)
    key = table[:, 0].astype(np.int64) * (table.max() + 2) + table[:, 1]
    pkey = pairs[:, 0].astype(np.int64) * (table.max() + 2) + pairs[:, 1]
    pos = np.searchsorted(key, pkey)
    pos = np.clip(pos, 0, key.size - 1)
    ok = key[pos] == pkey
    return np.where(ok, pos, -1)


def dof_map(mesh, kind, order, region="GLOBAL"):
    key = ("dofmap", mesh.content_hash(), kind, order, region)
    hit = _CACHE.get(key)
    if hit is None:
        hit = DofMap(mesh, kind, order, region)
        _CACHE[key] = hit
    return hit


_CACHE = {}


def clear_cache():
    _CACHE.clear()


# --- cell geometry -----------------------------------------------------------

def _cell_geometry(mesh, cell_ids):
    v = mesh.verts[mesh.cells[cell_ids]]
    E = (v[:, 1:, :] - v[:, :1, :]).transpose(0, 2, 1)  # columns are edges
    detJ = np.abs(np.linalg.det(E))
    Einv = np.linalg.inv(E)
    G = np.empty((cell_ids.size, mesh.dim + 1, mesh.dim))
    G[:, 1:, :] = Einv
    G[:, 0, :] = -Einv.sum(axis=1)
    return detJ, G


def _accumulate(n, rows, cols, vals, sym):
    A = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return SparseMatrix(A, sym)


# --- volume assembly ---------------------------------------------------------

def _assemble_form(dmap, kernel):
    """Generic cell-loop assembly.  kernel(detJ, G, chunk_slice) returns the
    (nchunk, ldof, ldof) element matrices for the chunk."""
    mesh = dmap.mesh
    dofs = dmap.cell_dofs()
    nloc = dofs.shape[1]
    nc = dmap.cell_ids.size
    rows = []
    cols = []
    vals = []
    for s in range(0, nc, _CELL_CHUNK):
        sl = slice(s, min(s + _CELL_CHUNK, nc))
        detJ, G = _cell_geometry(mesh, dmap.cell_ids[sl])
        elem = kernel(detJ, G)
        d = dofs[sl]
        rows.append(np.repeat(d, nloc, axis=1).ravel())
        cols.append(np.tile(d, (1, nloc)).ravel())
        vals.append(elem.reshape(elem.shape[0], -1).ravel())
    return (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))


def _mass_kernel(ref_mass, ncomp):
    if ncomp > 1:
        ref_mass = np.kron(ref_mass, np.eye(ncomp))

    def kernel(detJ, G):
        return detJ[:, None, None] * ref_mass[None, :, :]

    return kernel


def _stiffness_tensor(grad_ref, detJ, G):
    """S[c,i,a,j,b] = int dphi_i/dx_a dphi_j/dx_b on each cell of the chunk."""
    return np.einsum("ikjl,cka,clb,c->ciajb", grad_ref, G, G, detJ,
                     optimize=True)


def assemble_mass(mesh, dmap):
    """Mass matrix of the map's space over its region."""
    mass_ref, _, _, _ = _ref_tensors(mesh.dim, dmap.order)
    rows, cols, vals = _assemble_form(dmap, _mass_kernel(mass_ref, dmap.ncomp))
    return _accumulate(dmap.num_dofs, rows, cols, vals, sym=True)


def assemble_lame(mesh, params, order=2):
    """Solid stiffness and mass: K_S = int L(xi):D(v) (+ int xi.v when
    params.shift) and the vector L2 mass, both on a SOLID-only mesh."""
    if order not in (1, 2):
        raise ValidationError(f"order must be 1 or 2, got {order}")
    if not np.all(mesh.cell_region == meshmod.SOLID):
        raise ValidationError("assemble_lame requires a structure (all-SOLID) mesh")
    key = ("lame", mesh.content_hash(), params.lam0, params.lam1, params.shift, order)
    hit = _CACHE.get(key)
    if hit is not None:
        return hit
    dmap = dof_map(mesh, "vector", order, "SOLID")
    K = _assemble_lame_on(dmap, params)
    M = assemble_mass(mesh, dmap)
    _CACHE[key] = (K, M)
    return K, M


def _assemble_lame_on(dmap, params):
    mesh = dmap.mesh
    d = mesh.dim
    mass_ref, grad_ref, _, _ = _ref_tensors(d, dmap.order)
    nb = mass_ref.shape[0]

    def kernel(detJ, G):
        S = _stiffness_tensor(grad_ref, detJ, G)
        nchunk = S.shape[0]
        tr = np.einsum("cimjm->cij", S)
        K = 0.5 * params.lam0 * (
            np.einsum("cij,ab->ciajb", tr, np.eye(d))
            + S.transpose(0, 1, 4, 3, 2)
        ) + params.lam1 * S
        K = K.reshape(nchunk, nb * d, nb * d)
        if params.shift:
            K = K + detJ[:, None, None] * np.kron(mass_ref, np.eye(d))[None]
        return K

    rows, cols, vals = _assemble_form(dmap, kernel)
    return _accumulate(dmap.num_dofs, rows, cols, vals, sym=True)


def assemble_scalar_laplacian(mesh, order=2):
    """Scalar stiffness (constants in the kernel) and mass on a SOLID mesh."""
    if order not in (1, 2):
        raise ValidationError(f"order must be 1 or 2, got {order}")
    if not np.all(mesh.cell_region == meshmod.SOLID):
        raise ValidationError("assemble_scalar_laplacian requires an all-SOLID mesh")
    key = ("lap", mesh.content_hash(), order)
    hit = _CACHE.get(key)
    if hit is not None:
        return hit
    dmap = dof_map(mesh, "scalar", order, "SOLID")
    _, grad_ref, _, _ = _ref_tensors(mesh.dim, order)

    def kernel(detJ, G):
        S = _stiffness_tensor(grad_ref, detJ, G)
        return np.einsum("cimjm->cij", S)

    rows, cols, vals = _assemble_form(dmap, kernel)
    A = _accumulate(dmap.num_dofs, rows, cols, vals, sym=True)
    M = assemble_mass(mesh, dmap)
    _CACHE[key] = (A, M)
    return A, M


# --- mixed/coupled blocks ----------------------------------------------------

@dataclass(frozen=True)
class CoupledBlocks:
    """Assembled blocks of the monolithic fluid-structure system, with the
    outer no-slip already eliminated from the velocity space.

    Semidiscrete form: M_w dw/dt + A_visc w + T^T K_S xi - B_div^T p = 0,
    B_div w = 0, dxi/dt = w[trace_idx]; trace_idx maps solid DOFs into the
    reduced velocity vector.
    """

    mesh: object
    params: MaterialParams
    M_w: SparseMatrix
    A_visc: SparseMatrix
    B_div: SparseMatrix
    K_S: SparseMatrix
    M_S: SparseMatrix
    trace_idx: np.ndarray
    vel_map: DofMap = field(repr=False)
    pres_map: DofMap = field(repr=False)
    solid_map: DofMap = field(repr=False)
    fluid_mass: SparseMatrix = field(repr=False)

    @property
    def num_velocity(self):
        return self.M_w.shape[0]

    @property
    def num_pressure(self):
        return self.B_div.shape[0]

    def elastic_force(self, xi):
        """T^T K_S xi scattered into the reduced velocity space."""
        out = np.zeros(self.num_velocity)
        np.add.at(out, self.trace_idx, self.K_S @ xi)
        return out

    def solid_velocity(self, w):
        return w[self.trace_idx]


def assemble_coupled(mesh, params, velocity_order=2, pressure_order=1):
    """Taylor-Hood blocks of the coupled system on a solid+fluid mesh."""
    if (velocity_order, pressure_order) != (2, 1):
        raise ValidationError(
            "only the stable order-2 velocity / order-1 pressure pair is supported")
    if not np.any(mesh.cell_region == meshmod.FLUID):
        raise ValidationError("coupled assembly requires a FLUID region")
    key = ("coupled", mesh.content_hash(), params.lam0, params.lam1, params.nu,
           params.shift)
    hit = _CACHE.get(key)
    if hit is not None:
        return hit

    vmap = dof_map(mesh, "vector", 2, "GLOBAL")
    pmap = dof_map(mesh, "scalar", 1, "FLUID")
    smap = dof_map(mesh, "vector", 2, "SOLID")
    fmap = dof_map(mesh, "vector", 2, "FLUID")
    d = mesh.dim

    M_w_full = assemble_mass(mesh, vmap)

    # viscous form 2 nu int_F D(w):D(v), assembled on fluid cells then
    # scattered into the global velocity space
    mass_ref, grad_ref, mixed_ref, _ = _ref_tensors(d, 2)
    nb = mass_ref.shape[0]

    def visc_kernel(detJ, G):
        S = _stiffness_tensor(grad_ref, detJ, G)
        tr = np.einsum("cimjm->cij", S)
        A = params.nu * (np.einsum("cij,ab->ciajb", tr, np.eye(d))
                         + S.transpose(0, 1, 4, 3, 2))
        return A.reshape(S.shape[0], nb * d, nb * d)

    rows, cols, vals = _assemble_form(fmap, visc_kernel)
    finj = fmap.inject(vmap)
    A_visc_full = _accumulate(vmap.num_dofs, finj[rows], finj[cols], vals, sym=True)

    # divergence form int_F q div(w): pressure P1 rows, velocity P2 columns
    p_ref = _basis_terms(d, 1)
    v_basis = _basis_terms(d, 2)
    nbp = len(p_ref)
    mixed_pv = np.zeros((nbp, nb, d + 1))
    for i in range(nbp):
        for j in range(nb):
            for k in range(d + 1):
                dv = _diff_terms(v_basis[j], k)
                tot = 0.0
                for c1, a1 in p_ref[i]:
                    for c2, a2 in dv:
                        tot += c1 * c2 * _moment(
                            tuple(x + y for x, y in zip(a1, a2)), d)
                mixed_pv[i, j, k] = tot

    pdofs = pmap.cell_dofs()
    p_cells_vdofs = fmap.cell_dofs()
    rows_b = []
    cols_b = []
    vals_b = []
    nc = pmap.cell_ids.size
    if not np.array_equal(pmap.cell_ids, fmap.cell_ids):
        raise ValidationError("pressure/velocity fluid cell sets disagree")
    for s in range(0, nc, _CELL_CHUNK):
        sl = slice(s, min(s + _CELL_CHUNK, nc))
        detJ, G = _cell_geometry(mesh, pmap.cell_ids[sl])
        # B[c, i, (j,a)] = int p_i dphi_j/dx_a
        B = np.einsum("ijk,cka,c->cija", mixed_pv, G, detJ, optimize=True)
        B = B.reshape(B.shape[0], nbp, nb * d)
        dp = pdofs[sl]
        dv = finj[p_cells_vdofs[sl]]
        rows_b.append(np.repeat(dp, nb * d, axis=1).ravel())
        cols_b.append(np.tile(dv, (1, nbp)).ravel())
        vals_b.append(B.ravel())
    B_full = sp.coo_matrix(
        (np.concatenate(vals_b), (np.concatenate(rows_b), np.concatenate(cols_b))),
        shape=(pmap.num_dofs, vmap.num_dofs)).tocsr()
    B_full.sum_duplicates()
    B_full.sort_indices()

    K_S = _assemble_lame_on(smap, params)
    M_S = assemble_mass(mesh, smap)

    outer = vmap.boundary_dofs(meshmod.OUTER)
    M_w = constrain(M_w_full, outer)
    A_visc = constrain(A_visc_full, outer)
    free = M_w.free
    Bc = B_full[:, free]
    B_div = SparseMatrix(Bc, sym=False, constrained=outer, free=free,
                         full_size=vmap.num_dofs)

    sinj = smap.inject(vmap)
    pos = np.full(vmap.num_dofs, -1, dtype=np.int64)
    pos[free] = np.arange(free.size)
    trace_idx = pos[sinj]
    if (trace_idx < 0).any():
        raise ValidationError("solid DOFs collide with the outer no-slip set")

    Mf_full = assemble_mass(mesh, fmap)
    cf = sp.coo_matrix(Mf_full.mat)
    fluid_mass = _accumulate(vmap.num_dofs, finj[cf.row], finj[cf.col], cf.data,
                             sym=True)
    fluid_mass = constrain(fluid_mass, outer)

    blocks = CoupledBlocks(mesh=mesh, params=params, M_w=M_w, A_visc=A_visc,
                           B_div=B_div, K_S=K_S, M_S=M_S, trace_idx=trace_idx,
                           vel_map=vmap, pres_map=pmap, solid_map=smap,
                           fluid_mass=fluid_mass)
    _CACHE[key] = blocks
    return blocks


# --- boundary machinery ------------------------------------------------------

def boundary_node_mass(mesh, dmap, tag):
    """Scalar node-mass matrix of the trace space on tagged facets, plus the
    node ids (map-local) it is indexed by."""
    ids = mesh.facet_ids(tag)
    bnodes = dmap.boundary_nodes(tag)
    loc = np.full(dmap.num_nodes, -1, dtype=np.int64)
    loc[bnodes] = np.arange(bnodes.size)
    Mref, _ = _facet_mass_ref(mesh.dim, dmap.order)
    fnodes = _facet_nodes(mesh, dmap, ids)
    nloc = fnodes.shape[1]
    meas = mesh.facet_measure[ids]
    rows = np.repeat(loc[fnodes], nloc, axis=1).ravel()
    cols = np.tile(loc[fnodes], (1, nloc)).ravel()
    vals = (meas[:, None, None] * Mref[None]).ravel()
    Mb = sp.coo_matrix((vals, (rows, cols)),
                       shape=(bnodes.size, bnodes.size)).tocsr()
    Mb.sum_duplicates()
    return SparseMatrix(Mb, sym=True), bnodes


def _facet_nodes(mesh, dmap, facet_ids):
    """(nfacets, nodes_per_facet) map-local node ids: facet vertices then
    facet edges (matching the (d-1)-simplex reference node order)."""
    fv = mesh.facet_verts[facet_ids]
    nodes = [dmap._vert_to_node[fv]]
    if dmap.order == 2:
        cols = []
        for i, j in _local_edges(mesh.dim - 1):
            pairs = np.sort(fv[:, [i, j]], axis=1)
            eids = _find_edges(dmap.edge_verts, pairs)
            cols.append(dmap.vert_ids.size + eids)
        nodes.append(np.stack(cols, axis=1))
    out = np.concatenate(nodes, axis=1)
    if (out < 0).any():
        raise ValidationError("facet touches nodes outside the DOF map region")
    return out


def normal_load(mesh, dmap, tag=meshmod.INTERFACE):
    """Load vector of v -> int_{tagged facets} n . v for a vector map."""
    if dmap.kind != "vector":
        raise ValidationError("normal_load requires a vector map")
    ids = mesh.facet_ids(tag)
    _, load_ref = _facet_mass_ref(mesh.dim, dmap.order)
    fnodes = _facet_nodes(mesh, dmap, ids)
    w = mesh.facet_measure[ids][:, None] * load_ref[None, :]
    contrib = w[:, :, None] * mesh.facet_normal[ids][:, None, :]
    out = np.zeros(dmap.num_dofs)
    dofs = (fnodes[:, :, None] * dmap.ncomp
            + np.arange(dmap.ncomp)[None, None, :])
    np.add.at(out, dofs.ravel(), contrib.ravel())
    return out


def boundary_traction(mesh, params, psi, mu, order=2, require_dirichlet=True):
    """Consistent variational flux t ~ L(psi) n on the INTERFACE facets.

    psi is a solid vector DOF field with (approximately) zero boundary trace
    and mu its eigenvalue for the unshifted pencil.  Returns (t_facets,
    t_nodes, bnodes): per-facet centroid vectors over mesh.facet_ids(INTERFACE)
    plus the nodal boundary field that generated them.
    """
    dmap = dof_map(mesh, "vector", order, "SOLID")
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (dmap.num_dofs,):
        raise ValidationError(f"psi has shape {psi.shape}, expected ({dmap.num_dofs},)")
    bdofs = dmap.boundary_dofs(meshmod.INTERFACE)
    scale = np.abs(psi).max() or 1.0
    if require_dirichlet and np.abs(psi[bdofs]).max() > 1e-10 * scale:
        raise ValidationError(
            "psi violates the Dirichlet constraint beyond 1e-10 relative")
    K, M = assemble_lame(mesh, params, order)
    lam_shift = 1.0 + mu if params.shift else mu
    g = K @ psi - lam_shift * (M @ psi)
    Mb, bnodes = boundary_node_mass(mesh, dmap, meshmod.INTERFACE)
    gb = g.reshape(-1, dmap.ncomp)[bnodes]
    try:
        lu = spla.splu(sp.csc_matrix(Mb.mat))
    except RuntimeError as exc:  # pragma: no cover - singular boundary mass
        raise SolverError("boundary mass factorization failed", {"err": str(exc)})
    t_nodes = lu.solve(gb)
    ids = mesh.facet_ids(meshmod.INTERFACE)
    fnodes = _facet_nodes(mesh, dmap, ids)
    loc = np.full(dmap.num_nodes, -1, dtype=np.int64)
    loc[bnodes] = np.arange(bnodes.size)
    vals = t_nodes[loc[fnodes]]
    t_facets = _facet_mean_eval(mesh.dim, order, vals)
    return t_facets, t_nodes, bnodes


def _facet_mean_eval(dim, order, node_vals):
    """Per-facet mean of the trace field from its node values.

    The mean (1/|F|) int_F t damps the vertex/edge ringing that the consistent
    boundary-mass solve leaves in pointwise nodal values; point evaluation at
    the centroid would inherit that oscillation undamped.
    """
    m = dim - 1
    basis = _basis_terms(m, order)
    ref_vol = _moment(np.zeros(m + 1, dtype=np.int64), m)
    w = np.array([sum(c * _moment(np.array(a, dtype=np.int64), m)
                      for c, a in b) for b in basis]) / ref_vol
    return np.einsum("j,fj...->f...", w, node_vals)


# --- projections and inner products ------------------------------------------

def divergence_load(mesh, psi, order=2):
    """Load vector b[i] = int_S phi_i div(psi_h) for the scalar space of the
    same order on the SOLID region."""
    vmap = dof_map(mesh, "vector", order, "SOLID")
    smap = dof_map(mesh, "scalar", order, "SOLID")
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (vmap.num_dofs,):
        raise ValidationError("psi has the wrong length")
    _, _, mixed_ref, _ = _ref_tensors(mesh.dim, order)
    out = np.zeros(smap.num_dofs)
    psin = psi.reshape(-1, mesh.dim)
    nc = vmap.cell_ids.size
    for s in range(0, nc, _CELL_CHUNK):
        sl = slice(s, min(s + _CELL_CHUNK, nc))
        detJ, G = _cell_geometry(mesh, vmap.cell_ids[sl])
        # C[c,i,j,a] = int phi_i dphi_j/dx_a
        C = np.einsum("ijk,cka,c->cija", mixed_ref, G, detJ, optimize=True)
        vals = np.einsum("cija,cja->ci", C, psin[vmap.cell_nodes[sl]])
        np.add.at(out, smap.cell_nodes[sl].ravel(), vals.ravel())
    return out


def gradient_load(mesh, u, order=2):
    """Load vector b[(i,a)] = int_S phi_i du_h/dx_a for the vector space."""
    vmap = dof_map(mesh, "vector", order, "SOLID")
    smap = dof_map(mesh, "scalar", order, "SOLID")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (smap.num_dofs,):
        raise ValidationError("u has the wrong length")
    _, _, mixed_ref, _ = _ref_tensors(mesh.dim, order)
    out = np.zeros((vmap.num_nodes, mesh.dim))
    nc = vmap.cell_ids.size
    for s in range(0, nc, _CELL_CHUNK):
        sl = slice(s, min(s + _CELL_CHUNK, nc))
        detJ, G = _cell_geometry(mesh, vmap.cell_ids[sl])
        C = np.einsum("ijk,cka,c->cija", mixed_ref, G, detJ, optimize=True)
        vals = np.einsum("cija,cj->cia", C, u[smap.cell_nodes[sl]])
        np.add.at(out, vmap.cell_nodes[sl].ravel(),
                  vals.reshape(-1, mesh.dim))
    return out.ravel()


def mass_solve(M, b):
    """Solve M x = b with a cached sparse factorization."""
    key = ("msolve", id(M))
    lu = _CACHE.get(key)
    if lu is None:
        lu = spla.splu(sp.csc_matrix(M.mat))
        _CACHE[key] = lu
    return lu.solve(np.asarray(b, dtype=np.float64))


def inner_h1(xi, xit, params, mesh, order=2):
    """Energy inner product int xi.xit + int L(xi):D(xit) on the solid.

    Identical (bit-for-bit) to xi^T K xit with the shift=true stiffness."""
    K, _ = assemble_lame(mesh, MaterialParams(params.lam0, params.lam1,
                                              params.nu, shift=True), order)
    return float(np.asarray(xi) @ (K @ np.asarray(xit)))


def inner_l2(z, zt, mesh, kind="vector", order=2):
    """L2 inner product over the solid region."""
    dmap = dof_map(mesh, kind, order, "SOLID")
    key = ("l2mass", mesh.content_hash(), kind, order)
    M = _CACHE.get(key)
    if M is None:
        M = assemble_mass(mesh, dmap)
        _CACHE[key] = M
    return float(np.asarray(z) @ (M @ np.asarray(zt)))


# --- export ------------------------------------------------------------------

def save_matrix_market(A, path):
    """Write a SparseMatrix (or scipy sparse) in Matrix Market coordinate
    format."""
    from scipy.io import mmwrite

    mat = A.mat if isinstance(A, SparseMatrix) else sp.csr_matrix(A)
    mmwrite(str(path), mat)


_VTK_CELL = {2: 5, 3: 10}  # triangle, tetrahedron


def save_vtk(mesh, path, point_fields=None, cell_fields=None):
    """Write the mesh and per-vertex / per-cell fields as legacy ASCII VTK.

    Vector point fields must be (num_vertices, dim); 2D vectors are padded
    with a zero third component as VTK requires."""
    lines = ["# vtk DataFile Version 3.0", "lamewave export", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {mesh.num_vertices} double"]
    pts = mesh.verts
    if mesh.dim == 2:
        pts = np.concatenate([pts, np.zeros((pts.shape[0], 1))], axis=1)
    for p in pts:
        lines.append(" ".join(f"{x:.17g}" for x in p))
    npc = mesh.dim + 1
    lines.append(f"CELLS {mesh.num_cells} {mesh.num_cells * (npc + 1)}")
    for c in mesh.cells:
        lines.append(f"{npc} " + " ".join(str(int(v)) for v in c))
    lines.append(f"CELL_TYPES {mesh.num_cells}")
    lines.extend([str(_VTK_CELL[mesh.dim])] * mesh.num_cells)
    if point_fields:
        lines.append(f"POINT_DATA {mesh.num_vertices}")
        for name, arr in point_fields.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(f"{x:.17g}" for x in arr)
            else:
                if arr.shape[1] == 2:
                    arr = np.concatenate([arr, np.zeros((arr.shape[0], 1))], axis=1)
                lines.append(f"VECTORS {name} double")
                lines.extend(" ".join(f"{x:.17g}" for x in row) for row in arr)
    if cell_fields:
        lines.append(f"CELL_DATA {mesh.num_cells}")
        for name, arr in cell_fields.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(f"{float(x):.17g}" for x in np.asarray(arr))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
