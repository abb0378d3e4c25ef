"""Transfer maps between the vector overdetermined problem and its scalar
boundary-constancy counterpart.

``div_map`` sends a displacement mode to the scalar field Div(psi) (an
approximate Neumann eigenfunction with constant boundary values), ``grad_map``
sends a scalar mode back through its gradient, ``roundtrip`` composes the two,
and ``wave_variant_map`` runs the same plumbing with the componentwise
Laplacian in place of the elastic operator (so the material constant drops to
1).  Parameter bookkeeping is exact arithmetic; residual diagnostics are
reported, never thresholded here.

Flux-type diagnostics (the Neumann defect of the scalar field, the elastic
traction of the gradient field) are evaluated from patch-averaged second
derivatives: on order-2 elements the per-cell Hessian is constant, and the
volume-weighted average over the cells around each boundary vertex is far
less noisy than either pointwise differentiation or a consistent-flux lift
of a projected (non-eigen) field.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import mesh as meshmod
from .classify import fit_normal_traction
from .errors import ValidationError
from .fem import (MaterialParams, _cell_geometry, _local_edges, assemble_lame,
                  assemble_scalar_laplacian, boundary_node_mass,
                  boundary_traction, divergence_load, dof_map, gradient_load,
                  mass_solve)

DEGENERATE_RTOL = 1e-12


@dataclass(frozen=True)
class BridgeResult:
    """Transformed field plus exact parameter bookkeeping and diagnostics.

    ``eigenvalue`` and ``constant`` are the transformed pair (scalar problem:
    mu/lam and q/lam; vector problem: lam*mu_S and -lam*mu_S*c).  The
    ``diagnostics`` dict carries normalized residuals; a degenerate input
    (zero field, constant scalar, divergence-free displacement) comes back
    flagged, with a zero field.
    """

    kind: str
    field: np.ndarray
    eigenvalue: float
    constant: float
    diagnostics: dict
    degenerate: bool = False

    def __post_init__(self):
        arr = np.asarray(self.field, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "field", arr)
        clean = {}
        for name, val in self.diagnostics.items():
            val = float(val)
            if not np.isfinite(val):
                raise ValidationError(f"non-finite diagnostic {name!r}: {val}")
            clean[name] = val
        object.__setattr__(self, "diagnostics", clean)

    def to_json(self):
        payload = base64.b64encode(
            np.ascontiguousarray(self.field, dtype="<f8").tobytes()).decode()
        return json.dumps({
            "format": "lamewave-bridge",
            "version": 1,
            "kind": self.kind,
            "eigenvalue": self.eigenvalue,
            "constant": self.constant,
            "diagnostics": self.diagnostics,
            "degenerate": self.degenerate,
            "n": int(self.field.size),
            "field": payload,
        })

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != "lamewave-bridge":
            raise ValidationError("not a bridge result document")
        raw = base64.b64decode(doc["field"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if arr.size != doc["n"]:
            raise ValidationError("field payload length mismatch")
        return cls(kind=doc["kind"], field=arr,
                   eigenvalue=float(doc["eigenvalue"]),
                   constant=float(doc["constant"]),
                   diagnostics=dict(doc["diagnostics"]),
                   degenerate=bool(doc["degenerate"]))


def save_result(path, result):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(result.to_json())


def load_result(path):
    with open(path, "r", encoding="utf-8") as fh:
        return BridgeResult.from_json(fh.read())


# ---------------------------------------------------------------------------
# cached operators


class _Held:
    """Stable-identity matrix wrapper so mass_solve can cache factorizations."""

    def __init__(self, mat):
        self.mat = mat


_OP_CACHE = {}


def _vector_laplacian(mesh):
    """Componentwise scalar Laplacian blocks on the interleaved vector DOFs."""
    key = ("vlap", mesh.content_hash())
    hit = _OP_CACHE.get(key)
    if hit is None:
        A, M = assemble_scalar_laplacian(mesh)
        eye = sp.identity(mesh.dim, format="csr")
        hit = (_Held(sp.kron(A.mat, eye, format="csr")),
               _Held(sp.kron(M.mat, eye, format="csr")))
        _OP_CACHE[key] = hit
    return hit


def _held_sum(tag, mesh, A, M):
    """A + M with a stable identity per (mesh, operator) for dual solves."""
    key = ("sum", tag, mesh.content_hash())
    hit = _OP_CACHE.get(key)
    if hit is None:
        hit = _Held(sp.csr_matrix(A.mat + M.mat))
        _OP_CACHE[key] = hit
    return hit


# ---------------------------------------------------------------------------
# residual diagnostics


def _mass_norm(M, v):
    return float(np.sqrt(max(v @ (M @ v), 0.0)))


def _pencil_residuals(tag, mesh, A, M, v, mu):
    """(dual-norm residual, Rayleigh-quotient deviation) at eigenvalue mu.

    The operator residual r = (A - mu M) v is measured in the (A+M)^-1 dual
    norm against the (A+M) energy norm of v; the Rayleigh deviation
    |v'Av/v'Mv - mu|/mu is the eigenvalue-consistency companion (it converges
    one order faster for projected fields, whose energy-norm error dominates
    the operator residual).
    """
    S = _held_sum(tag, mesh, A, M)
    r = A.mat @ v - mu * (M.mat @ v)
    z = mass_solve(S, r)
    den = float(v @ (S.mat @ v))
    dual = float(np.sqrt(max(r @ z, 0.0) / den)) if den > 0.0 else 0.0
    vMv = float(v @ (M.mat @ v))
    if vMv > 0.0 and mu != 0.0:
        ray = float(v @ (A.mat @ v)) / vMv
        ray_rel = abs(ray - mu) / abs(mu)
    else:
        ray_rel = 0.0
    return dual, ray_rel


def _cell_hessians(mesh, sdm, u_nodes):
    """Constant per-cell Hessian of an order-2 scalar field, (ncells, d, d)."""
    detJ, G = _cell_geometry(mesh, np.arange(mesh.num_cells))
    dofs = sdm.cell_dofs()
    d = mesh.dim
    H = np.zeros((mesh.num_cells, d, d))
    for i in range(d + 1):
        gi = G[:, i, :]
        H += ((4.0 * u_nodes[dofs[:, i]])[:, None, None]
              * gi[:, :, None] * gi[:, None, :])
    for e, (i, j) in enumerate(_local_edges(d)):
        gi, gj = G[:, i, :], G[:, j, :]
        sym = gi[:, :, None] * gj[:, None, :] + gj[:, :, None] * gi[:, None, :]
        H += (4.0 * u_nodes[dofs[:, d + 1 + e]])[:, None, None] * sym
    return H, detJ


def _facet_patch_average(mesh, cell_vals, detJ, ids):
    """Per-facet value of a cellwise-constant field: volume-weighted vertex
    averages, then the mean over the facet's vertices."""
    flat = cell_vals.reshape(mesh.num_cells, -1)
    wsum = np.zeros(mesh.num_vertices)
    vsum = np.zeros((mesh.num_vertices, flat.shape[1]))
    for loc in range(mesh.dim + 1):
        vids = mesh.cells[:, loc]
        np.add.at(wsum, vids, detJ)
        np.add.at(vsum, vids, flat * detJ[:, None])
    vavg = vsum / wsum[:, None]
    out = vavg[mesh.facet_verts[ids]].mean(axis=1)
    return out.reshape((ids.size,) + cell_vals.shape[1:])


def _grad_traction(mesh, sdm, u, lam0, lam1):
    """Recovered traction of grad(u): lam0*H n + lam1*tr(H) n per facet."""
    ids = mesh.facet_ids(meshmod.INTERFACE)
    H, detJ = _cell_hessians(mesh, sdm, u)
    Hf = _facet_patch_average(mesh, H, detJ, ids)
    n = mesh.facet_normal[ids]
    Hn = np.einsum("fab,fb->fa", Hf, n)
    trH = np.einsum("faa->f", Hf)
    return lam0 * Hn + lam1 * trH[:, None] * n


def gradient_traction(mesh, u, lam0, lam1):
    """Per-facet traction of the gradient field of the scalar ``u``.

    Returns lam0*(Hess u)n + lam1*tr(Hess u)n over the interface facets,
    with the Hessian recovered by vertex-patch averaging; lam0=1, lam1=0
    gives the plain full-gradient flux of the wave variant.
    """
    sdm = dof_map(mesh, "scalar", 2, "SOLID")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (sdm.num_dofs,):
        raise ValidationError(
            f"field has shape {u.shape}, expected ({sdm.num_dofs},)")
    return _grad_traction(mesh, sdm, u, lam0, lam1)


def _div_normal_flux(mesh, sdm, psi):
    """Recovered normal derivative of Div(psi) on the interface facets."""
    ids = mesh.facet_ids(meshmod.INTERFACE)
    d = mesh.dim
    comps = psi.reshape(-1, d)
    g = None
    for a in range(d):
        H, detJ = _cell_hessians(mesh, sdm, comps[:, a])
        g = H[:, a, :] if g is None else g + H[:, a, :]
    gf = _facet_patch_average(mesh, g, detJ, ids)
    n = mesh.facet_normal[ids]
    return np.einsum("fa,fa->f", gf, n), ids


def _scalar_boundary(mesh):
    dm = dof_map(mesh, "scalar", 2, "SOLID")
    Mb, bnodes = boundary_node_mass(mesh, dm, meshmod.INTERFACE)
    return dm, Mb, bnodes


def _scalar_diagnostics(tag, mesh, A, M, v, mu_s, c, psi):
    sdm, Mb, bnodes = _scalar_boundary(mesh)
    dual, ray = _pencil_residuals(tag, mesh, A, M, v, mu_s)
    vb = v[bnodes]
    bn_norm = _mass_norm(Mb.mat, vb)
    flux, ids = _div_normal_flux(mesh, sdm, psi)
    meas = mesh.facet_measure[ids]
    flux_norm = float(np.sqrt(np.sum(meas * flux ** 2)))
    # interior-gradient scale sqrt(mu)|v|; boundary norm when the trace is
    # alive, area-scaled domain RMS as the floor for zero-trace fields
    area = float(Mb.mat.sum())
    vol = float(mesh.volume(meshmod.SOLID))
    ref = max(bn_norm, _mass_norm(M.mat, v) * np.sqrt(area / vol))
    scale = np.sqrt(abs(mu_s)) * ref if mu_s != 0.0 else ref
    if scale <= 0.0:
        scale = 1.0
    dev = vb - c
    trace = (_mass_norm(Mb.mat, dev) / bn_norm) if bn_norm > 0.0 else 0.0
    return {
        "pde_rel": dual,
        "rayleigh_rel": ray,
        "neumann_rel": flux_norm / scale,
        "trace_rho": trace,
    }


def _gradient_diagnostics(tag, mesh, K, M, V, mu, q, traction):
    dual, ray = _pencil_residuals(tag, mesh, K, M, V, mu)
    dm = dof_map(mesh, "vector", 2, "SOLID")
    bn = dm.boundary_nodes(meshmod.INTERFACE)
    _, Mb, _ = _scalar_boundary(mesh)
    Vb = V.reshape(dm.num_nodes, dm.ncomp)[bn]
    tr = float(np.sqrt(max(np.einsum("bi,bi->", Vb, Mb.mat @ Vb), 0.0)))
    # RMS trace over RMS field strength (dimensionless Dirichlet defect)
    area = float(Mb.mat.sum())
    vol = float(mesh.volume(meshmod.SOLID))
    dom = _mass_norm(M.mat, V)
    rel = (tr / np.sqrt(area)) / (dom / np.sqrt(vol)) if dom > 0.0 else 0.0
    fit = fit_normal_traction(traction, mesh)
    return {
        "pde_rel": dual,
        "rayleigh_rel": ray,
        "dirichlet_rel": rel,
        "traction_rho": fit.rho,
        "q_rel_err": abs(fit.qhat - q) / abs(q) if q != 0.0 else abs(fit.qhat),
    }


# ---------------------------------------------------------------------------
# the two directions


def div_map(psi, mu, q, params, mesh):
    """Project Div(psi) onto the scalar space; carry mu/lam and q/lam.

    Diagnostics: ``pde_rel`` (dual-norm pencil residual at the carried
    eigenvalue), ``rayleigh_rel`` (eigenvalue consistency), ``neumann_rel``
    (recovered normal flux over the interior gradient scale sqrt(mu)|v|_b)
    and ``trace_rho`` (boundary deviation around the carried constant).
    """
    lam = params.lam
    mu_s = mu / lam
    c = q / lam
    psi = np.asarray(psi, dtype=np.float64)
    dm = dof_map(mesh, "vector", 2, "SOLID")
    if psi.shape != (dm.num_dofs,):
        raise ValidationError(
            f"field has shape {psi.shape}, expected ({dm.num_dofs},)")
    A, M = assemble_scalar_laplacian(mesh)
    load = divergence_load(mesh, psi)
    if abs(load).max() <= DEGENERATE_RTOL * max(1.0, float(np.abs(psi).max())):
        return BridgeResult(kind="div", field=np.zeros(M.shape[0]),
                            eigenvalue=mu_s, constant=c,
                            diagnostics={"pde_rel": 0.0, "rayleigh_rel": 0.0,
                                         "neumann_rel": 0.0, "trace_rho": 0.0},
                            degenerate=True)
    v = mass_solve(M, load)
    diags = _scalar_diagnostics("lap", mesh, A, M, v, mu_s, c, psi)
    return BridgeResult(kind="div", field=v, eigenvalue=mu_s, constant=c,
                        diagnostics=diags)


def grad_map(u, mu_s, c, params, mesh):
    """Project grad(u) onto the vector space; carry lam*mu_S and -lam*mu_S*c.

    Diagnostics: ``pde_rel``/``rayleigh_rel`` (unshifted elastic pencil),
    ``dirichlet_rel`` (boundary trace over domain norm), ``traction_rho``
    (normal-proportionality of the recovered elastic traction) and
    ``q_rel_err`` (fitted traction constant against the carried one).
    """
    lam = params.lam
    mu = lam * mu_s
    q = -lam * mu_s * c
    u = np.asarray(u, dtype=np.float64)
    sdm = dof_map(mesh, "scalar", 2, "SOLID")
    if u.shape != (sdm.num_dofs,):
        raise ValidationError(
            f"field has shape {u.shape}, expected ({sdm.num_dofs},)")
    _, Ms = assemble_scalar_laplacian(mesh)
    load = gradient_load(mesh, u)
    if abs(load).max() <= DEGENERATE_RTOL * max(1.0, _mass_norm(Ms.mat, u)):
        return BridgeResult(kind="grad", field=np.zeros(load.size),
                            eigenvalue=mu, constant=q,
                            diagnostics={"pde_rel": 0.0, "rayleigh_rel": 0.0,
                                         "dirichlet_rel": 0.0,
                                         "traction_rho": 0.0, "q_rel_err": 0.0},
                            degenerate=True)
    unshifted = MaterialParams(params.lam0, params.lam1, nu=params.nu,
                               shift=False)
    K, M = assemble_lame(mesh, unshifted)
    V = mass_solve(M, load)
    traction = _grad_traction(mesh, sdm, u, params.lam0, params.lam1)
    diags = _gradient_diagnostics("lame", mesh, K, M, V, mu, q, traction)
    return BridgeResult(kind="grad", field=V, eigenvalue=mu, constant=q,
                        diagnostics=diags)


def roundtrip(psi, mu, params, mesh):
    """Compose the two maps: Xi = -(1/mu) grad(div(psi)).

    The returned field is Xi; diagnostics report the elastic pencil residual
    of Xi at mu plus the angle (degrees, mass inner product) between psi and
    Xi.  For a gradient-type mode the two spans coincide and the angle tends
    to zero under refinement.
    """
    if mu <= 0:
        raise ValidationError(f"eigenvalue must be positive, got {mu}")
    psi = np.asarray(psi, dtype=np.float64)
    t, _, _ = boundary_traction(mesh, params, psi, mu, require_dirichlet=False)
    qhat = fit_normal_traction(t, mesh).qhat
    down = div_map(psi, mu, qhat, params, mesh)
    if down.degenerate:
        return BridgeResult(kind="roundtrip", field=np.zeros_like(psi),
                            eigenvalue=mu, constant=qhat,
                            diagnostics={"pde_rel": 0.0, "rayleigh_rel": 0.0,
                                         "angle_deg": 90.0},
                            degenerate=True)
    up = grad_map(down.field, down.eigenvalue, down.constant, params, mesh)
    xi = -(1.0 / mu) * up.field
    unshifted = MaterialParams(params.lam0, params.lam1, nu=params.nu,
                               shift=False)
    K, M = assemble_lame(mesh, unshifted)
    nx = _mass_norm(M.mat, xi)
    npsi = _mass_norm(M.mat, psi)
    if nx == 0.0 or npsi == 0.0:
        angle = 90.0
    else:
        cosang = abs(float(psi @ (M.mat @ xi))) / (nx * npsi)
        angle = float(np.degrees(np.arccos(min(cosang, 1.0))))
    dual, ray = _pencil_residuals("lame", mesh, K, M, xi, mu)
    return BridgeResult(kind="roundtrip", field=xi, eigenvalue=mu,
                        constant=qhat,
                        diagnostics={"pde_rel": dual, "rayleigh_rel": ray,
                                     "angle_deg": angle})


def wave_variant_map(field, value, constant, mesh, direction="div"):
    """Same constructions for the componentwise-Laplacian system.

    The elastic operator is replaced by the vector Laplacian and the traction
    by the full-gradient flux, so the material constant is 1 and eigenvalues
    pass through unchanged: ``direction="div"`` maps a vector mode to its
    divergence (carrying mu and q as-is); ``direction="grad"`` maps a scalar
    mode to its gradient (carrying mu_S and -mu_S*c).
    """
    if direction not in ("div", "grad"):
        raise ValidationError(
            f"direction must be 'div' or 'grad', got {direction!r}")
    field = np.asarray(field, dtype=np.float64)
    A, Ms = assemble_scalar_laplacian(mesh)

    if direction == "div":
        dm = dof_map(mesh, "vector", 2, "SOLID")
        if field.shape != (dm.num_dofs,):
            raise ValidationError(
                f"field has shape {field.shape}, expected ({dm.num_dofs},)")
        load = divergence_load(mesh, field)
        if abs(load).max() <= DEGENERATE_RTOL * max(1.0, float(np.abs(field).max())):
            return BridgeResult(kind="wave_div", field=np.zeros(Ms.shape[0]),
                                eigenvalue=value, constant=constant,
                                diagnostics={"pde_rel": 0.0, "rayleigh_rel": 0.0,
                                             "neumann_rel": 0.0,
                                             "trace_rho": 0.0}, degenerate=True)
        v = mass_solve(Ms, load)
        diags = _scalar_diagnostics("lap", mesh, A, Ms, v, value, constant,
                                    field)
        return BridgeResult(kind="wave_div", field=v, eigenvalue=value,
                            constant=constant, diagnostics=diags)

    sdm = dof_map(mesh, "scalar", 2, "SOLID")
    if field.shape != (sdm.num_dofs,):
        raise ValidationError(
            f"field has shape {field.shape}, expected ({sdm.num_dofs},)")
    load = gradient_load(mesh, field)
    q = -value * constant
    if abs(load).max() <= DEGENERATE_RTOL * max(1.0, _mass_norm(Ms.mat, field)):
        return BridgeResult(kind="wave_grad", field=np.zeros(load.size),
                            eigenvalue=value, constant=q,
                            diagnostics={"pde_rel": 0.0, "rayleigh_rel": 0.0,
                                         "dirichlet_rel": 0.0,
                                         "traction_rho": 0.0, "q_rel_err": 0.0},
                            degenerate=True)
    Kv, Mv = _vector_laplacian(mesh)
    V = mass_solve(Mv, load)
    # full-gradient traction (grad V) n = (Hess u) n: lam0=1, no trace term
    traction = _grad_traction(mesh, sdm, field, 1.0, 0.0)
    diags = _gradient_diagnostics("vlap", mesh, Kv, Mv, V, value, q, traction)
    return BridgeResult(kind="wave_grad", field=V, eigenvalue=value,
                        constant=q, diagnostics=diags)
