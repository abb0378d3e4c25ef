"""Kernel-flux splitting of solid states and exact evolution of the
oscillatory part.

The solid state space carries one distinguished direction: the stationary
field ``phi`` whose boundary flux never decays.  ``solve_kernel`` computes it,
``kappa0`` measures how much of a given field points along it, ``project``
expands the flux-free remainder over a set of interior modes, and
``evolve_wave``/``synthesize_wave`` advance those coefficients in closed form
-- each pair just rotates at its own frequency sqrt(1 + mu_k), so the
evolution costs one cos/sin per mode at any time, positive or negative.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import mesh as meshmod
from .eig import EigenPair, smallest_eigs
from .errors import SolverError, ValidationError
from .fem import (MaterialParams, assemble_lame, constrain, dof_map,
                  mass_solve, normal_load)

KERNEL_RESIDUAL_TOL = 1e-9
IDENTITY_RTOL = 1e-6
FLUX_WARN_RTOL = 1e-6


@dataclass(frozen=True)
class KernelField:
    """Stationary unit-flux field of the solid operator.

    ``phi`` solves (L(phi), D(v)) + (phi, v) = int_boundary n.v for every
    test field v (coercive, no constraints); ``K_phi`` is its boundary flux
    int phi.n and ``h1_norm_sq`` its squared energy.  Testing the weak form
    with phi itself shows the two are the same number, up to the linear
    solver's ``residual`` -- that identity is what makes the flux
    normalization in ``kappa0`` well defined.  Without the zeroth-order term
    (``params.shift`` false) the affine field y/(lam0 + dim*lam1) replaces
    the solve and the energy drops the mass term; the identity persists.
    """

    phi: np.ndarray
    K_phi: float
    h1_norm_sq: float
    residual: float = 0.0

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=np.float64)
        if phi.ndim != 1 or not np.all(np.isfinite(phi)):
            raise ValidationError("kernel field must be a finite 1-d vector")
        phi = phi.copy()
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)
        for name in ("K_phi", "h1_norm_sq", "residual"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValidationError(f"{name} must be finite, got {v!r}")
            object.__setattr__(self, name, v)
        if self.h1_norm_sq <= 0:
            raise ValidationError(
                f"kernel energy must be positive, got {self.h1_norm_sq}")
        if abs(self.K_phi - self.h1_norm_sq) > IDENTITY_RTOL * self.h1_norm_sq:
            raise ValidationError(
                "kernel flux and energy disagree beyond "
                f"{IDENTITY_RTOL:g} relative: {self.K_phi} vs "
                f"{self.h1_norm_sq}")


def solve_kernel(mesh, params, scale=1.0):
    """Solid field spanning the stationary kernel, normalized to boundary
    data ``scale * n``.

    With the zeroth-order term present this is a weak solve of the coercive
    boundary-flux problem; without it (``params.shift`` false) the exact
    affine solution ``scale * y / (lam0 + dim*lam1)`` is interpolated
    instead.  The solve is linear in ``scale``, which exists mostly so tests
    can probe that.
    """
    scale = float(scale)
    if not np.isfinite(scale) or scale == 0.0:
        raise ValidationError(f"scale must be finite and nonzero, got {scale}")
    dmap = dof_map(mesh, "vector", 2, "SOLID")
    b = scale * normal_load(mesh, dmap, meshmod.INTERFACE)
    K, _ = assemble_lame(mesh, params)
    if params.shift:
        phi = mass_solve(K, b)
    else:
        alpha = scale / (params.lam0 + mesh.dim * params.lam1)
        phi = dmap.interpolate(lambda pts: alpha * pts)
    r = K @ phi - b
    residual = float(np.linalg.norm(r) / np.linalg.norm(b))
    if residual > KERNEL_RESIDUAL_TOL:
        raise SolverError("kernel solve residual above tolerance",
                          {"residual": residual, "tol": KERNEL_RESIDUAL_TOL})
    return KernelField(phi=phi, K_phi=float(b @ phi),
                       h1_norm_sq=float(phi @ (K @ phi)), residual=residual)


def _vertex_flux(mesh, dmap, field):
    """Boundary flux of a DOF field via the facet rule on its vertex trace."""
    return meshmod.surface_integral_normal_dot(mesh, dmap.vertex_values(field))


def kappa0(xi, kernel, mesh):
    """Flux coefficient of a solid field along the kernel direction.

    Returns the ratio of boundary fluxes int xi.n / int phi.n, both taken
    with the same facet rule (the surface integral of the vertex trace), so
    that xi - kappa0(xi)*phi has exactly zero flux in that rule.  Fields
    with zero boundary trace get exactly 0.
    """
    dmap = dof_map(mesh, "vector", 2, "SOLID")
    xi = np.asarray(xi, dtype=np.float64)
    if xi.shape != (dmap.num_dofs,):
        raise ValidationError(
            f"xi has shape {xi.shape}, expected ({dmap.num_dofs},)")
    if kernel.phi.shape != (dmap.num_dofs,):
        raise ValidationError("kernel field does not match this mesh")
    if kernel.K_phi <= 0:
        raise ValidationError(
            f"kernel field carries non-positive flux {kernel.K_phi}")
    fphi = _vertex_flux(mesh, dmap, kernel.phi)
    if not np.isfinite(fphi) or fphi <= 0:
        raise ValidationError(
            f"kernel vertex-trace flux is not positive: {fphi}")
    return _vertex_flux(mesh, dmap, xi) / fphi


@dataclass(frozen=True)
class WaveCoeffs:
    """Oscillatory coefficients over a selected set of interior modes.

    Per selected basis index k: the eigenvalue mu_k, the energy coefficient
    ``xi_h`` of the displacement and the mass coefficient ``zeta_l`` of the
    velocity.  ``omegas`` are the frequencies sqrt(1 + mu_k) and ``energy``
    the sum of squares that the rotation in ``evolve_wave`` conserves.
    """

    indices: tuple
    mus: np.ndarray
    xi_h: np.ndarray
    zeta_l: np.ndarray

    def __post_init__(self):
        idx = tuple(int(k) for k in self.indices)
        if any(k < 0 for k in idx):
            raise ValidationError(f"negative basis index in {idx}")
        if len(set(idx)) != len(idx):
            raise ValidationError("duplicate basis index")
        object.__setattr__(self, "indices", idx)
        for name in ("mus", "xi_h", "zeta_l"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).copy()
            if arr.shape != (len(idx),):
                raise ValidationError(
                    f"{name} has shape {arr.shape}, expected ({len(idx)},)")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(1.0 + self.mus <= 0.0):
            raise ValidationError("eigenvalue at or below -1 has no frequency")

    @property
    def omegas(self):
        return np.sqrt(1.0 + self.mus)

    def energy(self):
        return float(self.xi_h @ self.xi_h + self.zeta_l @ self.zeta_l)


def dirichlet_basis(mesh, params, m, tol=1e-8, seed=0):
    """First m boundary-clamped modes of the solid pencil, on full DOFs.

    Convenience wrapper for the constrain/solve/expand dance: the pencil is
    the one the classification solves (no zeroth-order shift -- ``mu`` is
    the plain eigenvalue, frequencies come out as sqrt(1 + mu)), and the
    returned vectors carry exact zeros on the interface so they can be
    paired against unconstrained fields.
    """
    unshifted = MaterialParams(params.lam0, params.lam1, nu=params.nu,
                               shift=False)
    K, M = assemble_lame(mesh, unshifted)
    dmap = dof_map(mesh, "vector", 2, "SOLID")
    bdofs = dmap.boundary_dofs(meshmod.INTERFACE)
    Kc = constrain(K, bdofs)
    Mc = constrain(M, bdofs)
    pairs = smallest_eigs(Kc, Mc, m, tol=tol, seed=seed)
    return [EigenPair(mu=p.mu, psi_tilde=Kc.expand(p.psi_tilde),
                      residual=p.residual, group=p.group) for p in pairs]


def _checked_indices(khat, nbasis):
    idx = [int(k) for k in khat]
    if len(set(idx)) != len(idx):
        raise ValidationError("duplicate index in the selected set")
    for k in idx:
        if not 0 <= k < nbasis:
            raise ValidationError(
                f"index {k} out of range for a basis of {nbasis} modes")
    return sorted(idx)


def project(state, basis, khat, params, mesh):
    """Split a state into oscillatory coefficients and a remainder.

    ``state`` is an (xi, zeta) pair of solid DOF fields.  For each k in
    ``khat`` the coefficients are the energy pairing (xi, psi_k)_H1 and the
    mass pairing (zeta, psi_tilde_k)_L2; the remainder subtracts the
    expansions.  xi is expected to arrive flux-free (subtract
    kappa0(xi)*phi first) -- a RuntimeWarning flags leftover flux, since the
    split is only orthogonal on flux-free fields.
    """
    xi, zeta = state
    dmap = dof_map(mesh, "vector", 2, "SOLID")
    xi = np.asarray(xi, dtype=np.float64)
    zeta = np.asarray(zeta, dtype=np.float64)
    for name, v in (("xi", xi), ("zeta", zeta)):
        if v.shape != (dmap.num_dofs,):
            raise ValidationError(
                f"{name} has shape {v.shape}, expected ({dmap.num_dofs},)")
    idx = _checked_indices(khat, len(basis))
    shifted = MaterialParams(params.lam0, params.lam1, nu=params.nu,
                             shift=True)
    K, M = assemble_lame(mesh, shifted)
    h1 = float(xi @ (K @ xi))
    flux = _vertex_flux(mesh, dmap, xi)
    if abs(flux) > FLUX_WARN_RTOL * (1.0 + np.sqrt(max(h1, 0.0))):
        warnings.warn(
            f"xi carries boundary flux {flux:.3e}; remove the kernel "
            "component (kappa0) before projecting", RuntimeWarning,
            stacklevel=2)
    Kxi = K @ xi
    Mzeta = M @ zeta
    xi_h = np.array([float(basis[k].psi @ Kxi) for k in idx])
    zeta_l = np.array([float(basis[k].psi_tilde @ Mzeta) for k in idx])
    xi_rem = xi.copy()
    zeta_rem = zeta.copy()
    for i, k in enumerate(idx):
        xi_rem -= xi_h[i] * basis[k].psi
        zeta_rem -= zeta_l[i] * basis[k].psi_tilde
    mus = np.array([basis[k].mu for k in idx])
    coeffs = WaveCoeffs(indices=tuple(idx), mus=mus, xi_h=xi_h,
                        zeta_l=zeta_l)
    return coeffs, (xi_rem, zeta_rem)


def evolve_wave(coeffs, t):
    """Advance the coefficients by time t (closed form, any sign).

    Each pair rotates at its own frequency:
    (xi, zeta) -> (cos(w t) xi + sin(w t) zeta, cos(w t) zeta - sin(w t) xi),
    which conserves xi^2 + zeta^2 per mode and composes like a group in t.
    """
    t = float(t)
    if not np.isfinite(t):
        raise ValidationError(f"time must be finite, got {t}")
    ang = coeffs.omegas * t
    c, s = np.cos(ang), np.sin(ang)
    return WaveCoeffs(indices=coeffs.indices, mus=coeffs.mus,
                      xi_h=c * coeffs.xi_h + s * coeffs.zeta_l,
                      zeta_l=c * coeffs.zeta_l - s * coeffs.xi_h)


def synthesize_wave(coeffs, basis, t):
    """Displacement/velocity fields of the coefficient wave at time t.

    Evolves the coefficients and expands: the displacement sums
    xi_h(t) * psi_k (zero boundary trace by construction), the velocity
    sums zeta_l(t) * psi_tilde_k.
    """
    if not basis:
        raise ValidationError("cannot synthesize against an empty basis")
    _checked_indices(coeffs.indices, len(basis))
    moved = evolve_wave(coeffs, t)
    n = basis[0].psi.shape[0]
    eta = np.zeros(n)
    eta_dot = np.zeros(n)
    for i, k in enumerate(moved.indices):
        eta += moved.xi_h[i] * basis[k].psi
        eta_dot += moved.zeta_l[i] * basis[k].psi_tilde
    return eta, eta_dot


# ---------------------------------------------------------------------------
# serialization

_CSV_HEADER = ("k", "mu", "omega", "xi_h", "zeta_l")


def save_coeffs(path, coeffs):
    """Write the coefficients as CSV rows (k, mu, omega, xi_h, zeta_l)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        om = coeffs.omegas
        for i, k in enumerate(coeffs.indices):
            writer.writerow([k, repr(float(coeffs.mus[i])),
                             repr(float(om[i])),
                             repr(float(coeffs.xi_h[i])),
                             repr(float(coeffs.zeta_l[i]))])


def load_coeffs(path):
    """Read coefficients written by ``save_coeffs`` (exact round-trip)."""
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != _CSV_HEADER:
        raise ValidationError(
            f"expected header {','.join(_CSV_HEADER)!r} in {path}")
    try:
        idx = tuple(int(r[0]) for r in rows[1:])
        mus = np.array([float(r[1]) for r in rows[1:]])
        omegas = np.array([float(r[2]) for r in rows[1:]])
        xi_h = np.array([float(r[3]) for r in rows[1:]])
        zeta_l = np.array([float(r[4]) for r in rows[1:]])
    except (IndexError, ValueError) as exc:
        raise ValidationError(f"malformed coefficient row in {path}: {exc}")
    coeffs = WaveCoeffs(indices=idx, mus=mus, xi_h=xi_h, zeta_l=zeta_l)
    if not np.allclose(omegas, coeffs.omegas, rtol=1e-12, atol=0.0):
        raise ValidationError(
            "frequency column inconsistent with sqrt(1 + mu)")
    return coeffs
