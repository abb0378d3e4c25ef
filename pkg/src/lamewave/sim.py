"""Implicit midpoint stepping of the coupled solid--fluid system, plus a
matrix-pencil probe of the underlying evolution operator's spectrum.

One velocity field lives on the whole mesh: it is the fluid velocity on the
fluid region and the solid velocity on the structure, so interface continuity
is built into the space and the traction balance is enforced weakly.  The
midpoint scheme keeps quadratic energy bookkeeping exact -- every step
satisfies E_new - E_old = -dissipation up to the linear solver's residual,
which is what lets a simulation distinguish physical viscous decay from
numerical damping.  On an all-solid mesh the same entry points degenerate to
the undamped symplectic midpoint scheme (no fluid, no constraint), which is
the configuration used for reversibility and convergence checks.

``generator_pencil``/``generator_spectrum`` assemble the first-order system
z*M*x = A*x in x = (displacement, velocity, pressure) and hand it to a dense
QZ solve at desk scale.  Velocity fields supported on the solid interior with
zero interface trace make the solid block close on itself exactly, so the
pencil carries purely imaginary eigenvalues exactly at the clamped solid
frequencies whenever such modes exist; everything else is pushed strictly
into the left half-plane by the viscous form.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import mesh as meshmod
from .decomp import kappa0, project, solve_kernel
from .errors import ResourceLimitError, SolverError, ValidationError
from .fem import (_CELL_CHUNK, _basis_terms, _cell_geometry, _diff_terms,
                  _moment, assemble_coupled, assemble_lame, dof_map,
                  normal_load, save_vtk)

SOLVER_TOL = 1e-8          # relative residual allowed per linear solve
PICARD_TOL = 1e-10         # relative velocity change declaring a fixed point
PICARD_MAXIT = 30
DENSE_PENCIL_LIMIT = 5000  # dense QZ refuses anything larger

_CACHE = {}

_SPECTRUM_NOTE = (
    "a finite pencil exhibits point spectrum only; whether the limit "
    "problem carries additional continuous spectrum on the imaginary axis "
    "is not visible at this scale")


def _is_coupled(mesh):
    return bool(np.any(mesh.cell_region == meshmod.FLUID))


def _kxi_load(mesh, params):
    """Cached boundary-flux load vector b with b.xi = int_interface xi.n."""
    key = ("kxi", mesh.content_hash())
    hit = _CACHE.get(key)
    if hit is None:
        smap = dof_map(mesh, "vector", 2, "SOLID")
        hit = normal_load(mesh, smap, meshmod.INTERFACE)
        _CACHE[key] = hit
    return hit


def _frozen(arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
    arr.setflags(write=False)
    return arr


# --- state -------------------------------------------------------------------

@dataclass(frozen=True)
class CoupledState:
    """One snapshot of the coupled system.

    ``xi`` holds solid displacement DOFs, ``w`` the reduced velocity vector
    (outer no-slip DOFs already eliminated, so the no-slip condition holds
    exactly by construction; on the solid region w is the solid velocity),
    and ``p`` the fluid pressure DOFs (empty on an all-solid mesh).  The
    cached diagnostics are the total energy ``E``, the boundary flux ``K_xi``
    of the displacement, and the fluid-region L2 norm ``u_norm`` of the
    velocity.
    """

    t: float
    xi: np.ndarray
    w: np.ndarray
    p: np.ndarray
    E: float
    K_xi: float
    u_norm: float

    def __post_init__(self):
        for name in ("xi", "w", "p"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.ndim != 1 or not np.all(np.isfinite(v)):
                raise ValidationError(f"state field {name} must be a finite "
                                      "1-d vector")
            object.__setattr__(self, name, _frozen(v))
        for name in ("t", "E", "K_xi", "u_norm"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValidationError(f"state field {name} must be finite")
            object.__setattr__(self, name, v)


def _make_state(t, xi, w, p, params, mesh):
    """Assemble the cached diagnostics and freeze a state."""
    b = _kxi_load(mesh, params)
    if xi.shape != b.shape:
        raise ValidationError("displacement vector does not match the solid "
                              f"space: {xi.shape} vs {b.shape}")
    if _is_coupled(mesh):
        blocks = assemble_coupled(mesh, params)
        if w.shape[0] != blocks.num_velocity or p.shape[0] != blocks.num_pressure:
            raise ValidationError("velocity/pressure vectors do not match "
                                  "the coupled spaces")
        E = 0.5 * float(w @ (blocks.M_w @ w) + xi @ (blocks.K_S @ xi))
        u_norm = float(np.sqrt(max(w @ (blocks.fluid_mass @ w), 0.0)))
    else:
        K, M = assemble_lame(mesh, params)
        if w.shape != xi.shape or p.size:
            raise ValidationError("an all-solid mesh carries equal-size "
                                  "displacement/velocity vectors and no "
                                  "pressure")
        E = 0.5 * float(w @ (M @ w) + xi @ (K @ xi))
        u_norm = 0.0
    return CoupledState(t=float(t), xi=xi, w=w, p=p, E=E,
                        K_xi=float(b @ xi), u_norm=u_norm)


def energy(state, params, mesh):
    """Total energy: kinetic over the whole mesh plus solid strain energy
    (plus the zeroth-order displacement term when ``params.shift``)."""
    return _make_state(state.t, state.xi, state.w, state.p, params, mesh).E


# --- initial data ------------------------------------------------------------

def initial_state(initial, params, mesh):
    """Build the t=0 state from ``(xi0, xi1, u0)`` and report what was done.

    ``xi0``/``xi1`` are solid DOF vectors or callables to interpolate; ``u0``
    is None, a callable, or a full velocity DOF vector.  On a coupled mesh
    the fluid part is projected onto the discrete divergence-free space with
    the solid trace held fixed, so the constraint the stepper enforces holds
    already at t=0.  The projection requires the solid data to push no net
    volume through the interface -- the fluid has nowhere to put it -- and
    rejects incompatible data.  Returns ``(state, report)`` where the report
    records the projection delta, the net interface flux, any outer no-slip
    clamping of ``u0``, and the pressure DOF pinned during the projection
    solve (that solve fixes every fluid boundary DOF, which leaves the
    constant pressure undetermined; the time stepper itself has no such
    freedom and pins nothing).
    """
    coupled = _is_coupled(mesh)
    if coupled:
        blocks = assemble_coupled(mesh, params)
        smap = blocks.solid_map
    else:
        smap = dof_map(mesh, "vector", 2, "SOLID")

    def solid_vec(data, name):
        v = smap.interpolate(data) if callable(data) else np.asarray(
            data, dtype=np.float64)
        if v.shape != (smap.num_dofs,):
            raise ValidationError(f"{name} does not match the solid space")
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"{name} must be finite")
        return v

    if len(initial) == 2:
        initial = (*initial, None)
    xi0_in, xi1_in, u0_in = initial
    xi0 = solid_vec(xi0_in if xi0_in is not None else np.zeros(smap.num_dofs),
                    "xi0")
    xi1 = solid_vec(xi1_in if xi1_in is not None else np.zeros(smap.num_dofs),
                    "xi1")

    report = {"projected": False, "projection_delta": 0.0,
              "interface_flux": 0.0, "outer_clamp": 0.0,
              "pinned_pressure_dof": None}
    if not coupled:
        if u0_in is not None:
            raise ValidationError("u0 requires a fluid region")
        return _make_state(0.0, xi0, xi1, np.empty(0), params, mesh), report

    vmap = blocks.vel_map
    nv = blocks.num_velocity
    target = np.zeros(nv)
    if u0_in is not None:
        u_full = vmap.interpolate(u0_in) if callable(u0_in) else np.asarray(
            u0_in, dtype=np.float64)
        if u_full.shape != (vmap.num_dofs,):
            raise ValidationError("u0 must be a callable or a full velocity "
                                  "DOF vector")
        if not np.all(np.isfinite(u_full)):
            raise ValidationError("u0 must be finite")
        clamped = u_full[blocks.M_w.constrained]
        report["outer_clamp"] = float(np.abs(clamped).max()) if clamped.size else 0.0
        target = u_full[blocks.M_w.free]
    target[blocks.trace_idx] = xi1

    B = blocks.B_div.mat
    fluid_free = np.setdiff1d(np.arange(nv), blocks.trace_idx)
    B_s = B[:, blocks.trace_idx]
    flux = float(np.ones(B.shape[0]) @ (B_s @ xi1))
    report["interface_flux"] = flux
    scale = 1.0 + float(np.linalg.norm(xi1))
    if abs(flux) > 1e-8 * scale:
        raise ValidationError(
            "initial solid velocity pushes net volume through the interface "
            f"({flux:.3e}); the enclosed fluid cannot absorb it")

    w = target.copy()
    if fluid_free.size:
        # minimize the kinetic distance to the target subject to B w = 0 with
        # the solid trace fixed; drop one constraint row (constant pressure)
        # since every boundary DOF of the sub-problem is prescribed
        M_ff = blocks.M_w.mat[fluid_free][:, fluid_free]
        B_f = B[:, fluid_free]
        rhs_c = -(B_s @ xi1) - B_f @ target[fluid_free]
        Bp = B_f[1:]
        S = sp.bmat([[M_ff, Bp.T], [Bp, None]], format="csc")
        rhs = np.concatenate([np.zeros(fluid_free.size), rhs_c[1:]])
        try:
            sol = spla.splu(S).solve(rhs)
        except RuntimeError as exc:
            raise SolverError("divergence-free projection factorization "
                              f"failed: {exc}") from exc
        dw = sol[:fluid_free.size]
        w[fluid_free] += dw
        report["pinned_pressure_dof"] = 0
        num = float(np.sqrt(max(dw @ (M_ff @ dw), 0.0)))
        den = 1.0 + float(np.sqrt(max(target @ (blocks.M_w @ target), 0.0)))
        report["projection_delta"] = num / den
        resid = float(np.linalg.norm(B @ w))
        if resid > SOLVER_TOL * (1.0 + float(np.linalg.norm(w))):
            raise SolverError("projected field violates the divergence "
                              "constraint", detail={"residual": resid})
        report["projected"] = True
    state = _make_state(0.0, xi0, w, np.zeros(blocks.num_pressure), params,
                        mesh)
    return state, report


# --- stepping ----------------------------------------------------------------

def _solid_factor(mesh, params, dt):
    key = ("solid-step", mesh.content_hash(), params.lam0, params.lam1,
           params.nu, params.shift, float(dt))
    hit = _CACHE.get(key)
    if hit is None:
        K, M = assemble_lame(mesh, params)
        H = ((2.0 / dt) * M.mat + (0.5 * dt) * K.mat).tocsc()
        try:
            hit = (spla.splu(H), K, M)
        except RuntimeError as exc:
            raise SolverError(f"midpoint operator factorization failed for "
                              f"dt={dt:g}: {exc}") from exc
        _CACHE[key] = hit
    return hit


def _trace_matrix(blocks):
    key = ("trace", blocks.mesh.content_hash())
    hit = _CACHE.get(key)
    if hit is None:
        n_s = blocks.K_S.shape[0]
        hit = sp.csr_matrix(
            (np.ones(n_s), (np.arange(n_s), blocks.trace_idx)),
            shape=(n_s, blocks.num_velocity))
        _CACHE[key] = hit
    return hit


def _coupled_factor(mesh, params, dt):
    key = ("step", mesh.content_hash(), params.lam0, params.lam1, params.nu,
           params.shift, float(dt))
    hit = _CACHE.get(key)
    if hit is None:
        blocks = assemble_coupled(mesh, params)
        T = _trace_matrix(blocks)
        H = ((2.0 / dt) * blocks.M_w.mat + blocks.A_visc.mat
             + (0.5 * dt) * (T.T @ (blocks.K_S.mat @ T)))
        B = blocks.B_div.mat
        S = sp.bmat([[H, B.T], [B, None]], format="csc")
        try:
            lu = spla.splu(S)
        except RuntimeError as exc:
            raise SolverError(f"saddle factorization failed for dt={dt:g}: "
                              f"{exc}") from exc
        hit = (lu, H, blocks)
        _CACHE[key] = hit
    return hit


def _ref_advection(dim):
    """Reference tensor R[m,i,j,n] = int phi_m phi_i dphi_j/dlam_n for the
    quadratic element (exact rational moments)."""
    key = ("adv", dim)
    hit = _CACHE.get(key)
    if hit is None:
        basis = _basis_terms(dim, 2)
        nb = len(basis)
        R = np.zeros((nb, nb, nb, dim + 1))
        for j in range(nb):
            for n in range(dim + 1):
                dj = _diff_terms(basis[j], n)
                for m in range(nb):
                    for i in range(nb):
                        tot = 0.0
                        for c1, a1 in basis[m]:
                            for c2, a2 in basis[i]:
                                for c3, a3 in dj:
                                    mono = tuple(x + y + z for x, y, z
                                                 in zip(a1, a2, a3))
                                    tot += c1 * c2 * c3 * _moment(mono, dim)
                        R[m, i, j, n] = tot
        _CACHE[key] = R
        hit = R
    return hit


def _advection_matrix(blocks, a_red):
    """Skew-symmetrized convection matrix N(a) on the reduced velocity space.

    N pairs test component e against a . grad of trial component e (block
    diagonal over components); the skew part 0.5(N - N^T) is what enters the
    scheme so the quadratic energy identity keeps its sign exactly.
    """
    mesh = blocks.mesh
    d = mesh.dim
    fmap = dof_map(mesh, "vector", 2, "FLUID")
    finj = fmap.inject(blocks.vel_map)
    R = _ref_advection(d)
    nb = R.shape[0]
    a_full = blocks.M_w.expand(a_red)
    cdofs = fmap.cell_dofs()
    ids = fmap.cell_ids
    rows, cols, vals = [], [], []
    for s in range(0, ids.size, _CELL_CHUNK):
        sl = slice(s, min(s + _CELL_CHUNK, ids.size))
        detJ, G = _cell_geometry(mesh, ids[sl])
        gdofs = finj[cdofs[sl]].reshape(-1, nb, d)
        aloc = a_full[gdofs]
        Nc = np.einsum("cma,cna,mijn,c->cij", aloc, G, R, detJ,
                       optimize=True)
        for e in range(d):
            de = gdofs[:, :, e]
            rows.append(np.repeat(de, nb, axis=1).ravel())
            cols.append(np.tile(de, (1, nb)).ravel())
            vals.append(Nc.ravel())
    n = blocks.vel_map.num_dofs
    N = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n)).tocsr()
    free = blocks.M_w.free
    Nr = N[free][:, free]
    return 0.5 * (Nr - Nr.T)


def _step_core(state, dt, params, mesh, *, convection=False,
               picard_tol=PICARD_TOL, picard_maxit=PICARD_MAXIT,
               step_index=0):
    """One midpoint step; returns (state, dissipation, residual, iterations)."""
    dt = float(dt)
    if not np.isfinite(dt) or dt == 0.0:
        raise ValidationError(f"dt must be finite and nonzero, got {dt!r}")
    if not _is_coupled(mesh):
        lu, K, M = _solid_factor(mesh, params, dt)
        if state.xi.shape[0] != K.shape[0] or state.w.shape[0] != K.shape[0]:
            raise ValidationError("state does not match the solid space")
        rhs = (2.0 / dt) * (M @ state.w) - K @ state.xi
        v = lu.solve(rhs)
        H_v = (2.0 / dt) * (M @ v) + (0.5 * dt) * (K @ v)
        residual = float(np.linalg.norm(H_v - rhs)
                         / (1.0 + np.linalg.norm(rhs)))
        if residual > SOLVER_TOL:
            raise SolverError("midpoint solve did not converge",
                              detail={"step": step_index, "residual": residual})
        xi1 = state.xi + dt * v
        w1 = 2.0 * v - state.w
        new = _make_state(state.t + dt, xi1, w1, np.empty(0), params, mesh)
        return new, 0.0, residual, 0

    lu, H, blocks = _coupled_factor(mesh, params, dt)
    if (state.xi.shape[0] != blocks.K_S.shape[0]
            or state.w.shape[0] != blocks.num_velocity
            or state.p.shape[0] != blocks.num_pressure):
        raise ValidationError("state does not match the coupled spaces")
    nv, npr = blocks.num_velocity, blocks.num_pressure
    g = (2.0 / dt) * (blocks.M_w @ state.w) - blocks.elastic_force(state.xi)
    rhs = np.concatenate([g, np.zeros(npr)])
    sol = lu.solve(rhs)
    v, q = sol[:nv], sol[nv:]
    iters = 0
    if convection:
        # Picard: refreeze the advecting field at the latest midpoint velocity
        B = blocks.B_div.mat
        for iters in range(1, picard_maxit + 1):
            N = _advection_matrix(blocks, v)
            S = sp.bmat([[H + N, B.T], [B, None]], format="csc")
            try:
                sol = spla.splu(S).solve(rhs)
            except RuntimeError as exc:
                raise SolverError("convective saddle factorization failed",
                                  detail={"step": step_index}) from exc
            v_new, q = sol[:nv], sol[nv:]
            dv = v_new - v
            delta = float(np.sqrt(max(dv @ (blocks.M_w @ dv), 0.0)))
            ref = float(np.sqrt(max(v_new @ (blocks.M_w @ v_new), 0.0)))
            v = v_new
            if delta <= picard_tol * max(ref, 1e-30):
                break
        else:
            raise SolverError(
                "Picard iteration for the convective term did not converge",
                detail={"step": step_index, "iterations": picard_maxit,
                        "last_delta": delta})
        r1 = H @ v + N @ v + blocks.B_div.mat.T @ q - g
    else:
        r1 = H @ v + blocks.B_div.mat.T @ q - g
    r2 = blocks.B_div.mat @ v
    residual = float(np.sqrt(np.linalg.norm(r1) ** 2
                             + np.linalg.norm(r2) ** 2)
                     / (1.0 + np.linalg.norm(rhs)))
    if residual > SOLVER_TOL:
        raise SolverError("saddle solve did not converge",
                          detail={"step": step_index, "residual": residual})
    xi1 = state.xi + dt * blocks.solid_velocity(v)
    w1 = 2.0 * v - state.w
    dissipation = dt * float(v @ (blocks.A_visc @ v))
    new = _make_state(state.t + dt, xi1, w1, -q, params, mesh)
    return new, dissipation, residual, iters


def step(state, dt, params, mesh, scheme="midpoint"):
    """Advance one implicit midpoint step of length ``dt``.

    The scheme is symmetric: a negative ``dt`` runs it backward and exactly
    inverts the corresponding forward step (used by the reversibility
    checks; with viscosity present the backward operator amplifies instead
    of damps, so backward coupled runs are for diagnostics only).  Energy
    satisfies E_new - E_old = -dt * 2 nu ||D(v)||^2 at the midpoint velocity
    v, up to the linear solver residual, so no step may gain energy beyond
    solver tolerance.
    """
    if scheme != "midpoint":
        raise ValidationError(f"unknown scheme {scheme!r}; only 'midpoint' "
                              "is available")
    new, _, _, _ = _step_core(state, dt, params, mesh)
    return new


# --- trajectories ------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Sampled orbit with a per-step energy ledger.

    ``times``/``E``/``K_xi``/``u_norm`` cover every step (length n+1);
    ``D`` holds per-step dissipation increments and ``residuals`` the linear
    solver residuals (length n).  The ledger is self-consistent:
    E[k+1] - E[k] + D[k] is at solver-residual level, see
    ``ledger_residuals``.  ``samples`` are full states at the configured
    stride (always including the first and last step); when a mode basis was
    supplied, ``coeffs`` carries the projected oscillatory coefficients and
    ``kappas`` the stationary-part amplitude per sample.
    """

    times: np.ndarray
    E: np.ndarray
    D: np.ndarray
    residuals: np.ndarray
    K_xi: np.ndarray
    u_norm: np.ndarray
    sample_steps: np.ndarray
    samples: tuple
    coeffs: tuple | None
    kappas: np.ndarray | None
    meta: dict

    def __post_init__(self):
        for name in ("times", "E", "D", "residuals", "K_xi", "u_norm"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        steps = np.asarray(self.sample_steps, dtype=np.int64)
        steps.setflags(write=False)
        object.__setattr__(self, "sample_steps", steps)
        n = self.times.shape[0] - 1
        if n < 0 or np.any(np.diff(self.times) <= 0):
            raise ValidationError("timestamps must be strictly increasing")
        for name in ("E", "K_xi", "u_norm"):
            if getattr(self, name).shape != (n + 1,):
                raise ValidationError(f"{name} must have one entry per step "
                                      "boundary")
        for name in ("D", "residuals"):
            if getattr(self, name).shape != (n,):
                raise ValidationError(f"{name} must have one entry per step")
        if len(self.samples) != steps.shape[0]:
            raise ValidationError("samples and sample_steps disagree")
        if self.kappas is not None:
            object.__setattr__(self, "kappas", _frozen(self.kappas))

    def ledger_residuals(self):
        """Per-step bookkeeping error E[k+1] - E[k] + D[k]."""
        return self.E[1:] - self.E[:-1] + self.D

    def save_csv(self, path):
        """Per-step ledger rows; coefficient columns are filled on sampled
        rows and left empty elsewhere."""
        ks = ()
        if self.coeffs is not None and self.coeffs:
            ks = self.coeffs[0].indices
        head = ["step", "t", "E", "D_cum", "K_xi", "u_norm", "kappa0"]
        head += [f"xi_h_{k}" for k in ks] + [f"zeta_l_{k}" for k in ks]
        at = {int(s): i for i, s in enumerate(self.sample_steps)}
        d_cum = np.concatenate([[0.0], np.cumsum(self.D)])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(head)
            for k in range(self.times.shape[0]):
                row = [k, repr(float(self.times[k])), repr(float(self.E[k])),
                       repr(float(d_cum[k])), repr(float(self.K_xi[k])),
                       repr(float(self.u_norm[k]))]
                i = at.get(k)
                if i is not None and self.kappas is not None:
                    row.append(repr(float(self.kappas[i])))
                else:
                    row.append("")
                if i is not None and self.coeffs is not None:
                    c = self.coeffs[i]
                    row += [repr(float(x)) for x in c.xi_h]
                    row += [repr(float(x)) for x in c.zeta_l]
                else:
                    row += [""] * (2 * len(ks))
                wr.writerow(row)

    def save_manifest(self, path):
        """Reproducibility manifest (JSON, sorted keys)."""
        with open(path, "w") as fh:
            json.dump(self.meta, fh, indent=2, sort_keys=True)
            fh.write("\n")


def simulate(initial, T, dt, params, mesh, *, convection=False, stride=1,
             basis=None, khat=None, picard_tol=PICARD_TOL,
             picard_maxit=PICARD_MAXIT):
    """Run the midpoint scheme from ``initial = (xi0, xi1, u0)`` to time T.

    ``T`` must be an integer number of steps.  When ``basis`` (a sequence of
    clamped solid modes) is given, each sampled state is split into its
    stationary amplitude kappa0, oscillatory coefficients over
    ``khat`` (default: the whole basis), and remainder -- the sampled
    coefficients are what the closed-form rotation of the oscillatory part
    should reproduce.  Convection adds the skew-symmetrized fluid transport
    term, solved by Picard iteration each step; non-convergence aborts with
    the step index.
    """
    T = float(T)
    dt = float(dt)
    if not np.isfinite(T) or T <= 0 or not np.isfinite(dt) or dt <= 0:
        raise ValidationError("T and dt must be positive finite")
    n_steps = int(round(T / dt))
    if n_steps < 1 or abs(n_steps * dt - T) > 1e-8 * max(T, 1.0):
        raise ValidationError(f"T={T!r} is not an integer multiple of "
                              f"dt={dt!r}")
    stride = int(stride)
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if convection and not _is_coupled(mesh):
        raise ValidationError("convection requires a fluid region")

    state, report = initial_state(initial, params, mesh)

    sampler = None
    if basis is not None:
        if khat is None:
            khat = tuple(range(len(basis)))
        sub = meshmod.extract_structure(mesh) if _is_coupled(mesh) else mesh
        kernel = solve_kernel(sub, params)

        def sampler(s):
            kap = kappa0(s.xi, kernel, sub)
            zeta = (assemble_coupled(mesh, params).solid_velocity(s.w)
                    if _is_coupled(mesh) else s.w)
            coeff, _ = project((s.xi - kap * kernel.phi, zeta), basis, khat,
                               params, sub)
            return kap, coeff

    times = [state.t]
    energies = [state.E]
    kxi = [state.K_xi]
    unorm = [state.u_norm]
    diss, resid = [], []
    sample_steps, samples, kappas, coeffs = [0], [state], [], []
    picard_max_seen = 0
    if sampler is not None:
        kap, c = sampler(state)
        kappas.append(kap)
        coeffs.append(c)

    for k in range(n_steps):
        prev_E = state.E
        state, d_k, r_k, iters = _step_core(
            state, dt, params, mesh, convection=convection,
            picard_tol=picard_tol, picard_maxit=picard_maxit,
            step_index=k)
        picard_max_seen = max(picard_max_seen, iters)
        times.append(state.t)
        energies.append(state.E)
        kxi.append(state.K_xi)
        unorm.append(state.u_norm)
        diss.append(d_k)
        resid.append(r_k)
        # exact quadratic bookkeeping is the scheme's contract; a violation
        # here means the solve lied about its residual
        assert abs(state.E - prev_E + d_k) <= 1e-6 * (1.0 + abs(prev_E))
        if (k + 1) % stride == 0 or k + 1 == n_steps:
            if sample_steps[-1] != k + 1:
                sample_steps.append(k + 1)
                samples.append(state)
                if sampler is not None:
                    kap, c = sampler(state)
                    kappas.append(kap)
                    coeffs.append(c)

    meta = {
        "mesh_hash": mesh.content_hash(),
        "dim": int(mesh.dim),
        "params": {"lam0": params.lam0, "lam1": params.lam1,
                   "nu": params.nu, "shift": bool(params.shift)},
        "T": n_steps * dt, "dt": dt, "n_steps": n_steps, "stride": stride,
        "scheme": "midpoint", "convection": bool(convection),
        "picard_tol": picard_tol, "picard_maxit": picard_maxit,
        "picard_max_iterations_used": picard_max_seen,
        "solver_tol": SOLVER_TOL,
        "projection": report,
        "khat": list(map(int, khat)) if basis is not None else None,
    }
    return Trajectory(
        times=np.array(times), E=np.array(energies), D=np.array(diss),
        residuals=np.array(resid), K_xi=np.array(kxi),
        u_norm=np.array(unorm), sample_steps=np.array(sample_steps),
        samples=tuple(samples),
        coeffs=tuple(coeffs) if sampler is not None else None,
        kappas=np.array(kappas) if sampler is not None else None,
        meta=meta)


def write_vtk_series(traj, params, mesh, directory, prefix="state"):
    """One legacy VTK file per sample; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    coupled = _is_coupled(mesh)
    if coupled:
        blocks = assemble_coupled(mesh, params)
        smap, vmap, pmap = blocks.solid_map, blocks.vel_map, blocks.pres_map
    else:
        smap = dof_map(mesh, "vector", 2, "SOLID")
    paths = []
    for i, s in enumerate(traj.samples):
        fields = {"displacement": smap.vertex_values(s.xi)}
        if coupled:
            fields["velocity"] = vmap.vertex_values(blocks.M_w.expand(s.w))
            fields["pressure"] = pmap.vertex_values(s.p)
        else:
            fields["velocity"] = smap.vertex_values(s.w)
        path = os.path.join(directory, f"{prefix}_{i:04d}.vtk")
        save_vtk(mesh, path, point_fields=fields,
                 cell_fields={"region": mesh.cell_region})
        paths.append(path)
    return paths


# --- generator pencil --------------------------------------------------------

@dataclass(frozen=True)
class GeneratorPencil:
    """First-order pencil z M x = A x in x = (displacement, velocity,
    pressure), with the divergence rows as algebraic constraints (zero M
    block).  The displacement block of M is the solid stiffness, so x*Mx is
    twice the energy of the state x carries and Re(z) x*Mx = -(viscous form)
    holds algebraically for every eigenpair: no eigenvalue may cross into
    the right half-plane.
    """

    A: sp.csr_matrix = field(repr=False)
    M: sp.csr_matrix = field(repr=False)
    n_solid: int
    n_velocity: int
    n_pressure: int
    mesh_hash: str
    regularity: dict
    fluid_mass: sp.csr_matrix = field(repr=False)

    @property
    def total(self):
        return self.n_solid + self.n_velocity + self.n_pressure

    def __post_init__(self):
        if self.A.shape != (self.total, self.total) or self.M.shape != self.A.shape:
            raise ValidationError("pencil blocks do not match the size "
                                  "metadata")
        if self.M[self.n_solid + self.n_velocity:].nnz:
            raise ValidationError("pressure rows of M must vanish")


@dataclass(frozen=True)
class SpectralPoint:
    """One finite eigenvalue with the share of its M-energy carried by
    fluid-region velocity DOFs; ``residual`` certifies the eigenvector
    recovered for it."""

    eigenvalue: complex
    fluid_fraction: float
    m_energy: float
    residual: float


@dataclass(frozen=True)
class SpectrumReport:
    points: tuple
    max_real: float
    scale: float
    n_finite: int
    n_dropped: int
    window: tuple | None
    note: str = _SPECTRUM_NOTE


def generator_pencil(mesh, params, seed=0):
    """Assemble the evolution pencil on a coupled mesh and certify that it
    is regular by factoring one seeded random real shift.

    Any positive real shift lies outside the spectrum (eigenvalues live in
    the closed left half-plane), so a successful factorization plus a small
    solve residual certifies regularity.  If the factorization fails, one
    pressure DOF is pinned (dropped) and the event recorded -- that is the
    undetermined-constant fallback; the standard coupled configuration
    determines the pressure and needs no pin.
    """
    blocks = assemble_coupled(mesh, params)
    T = _trace_matrix(blocks)
    KT = blocks.K_S.mat @ T
    n_s = blocks.K_S.shape[0]
    n_w = blocks.num_velocity
    n_p = blocks.num_pressure
    B = blocks.B_div.mat

    def build(drop_pressure):
        Bl = B[1:] if drop_pressure else B
        npr = Bl.shape[0]
        A = sp.bmat([[None, KT, None],
                     [-KT.T, -blocks.A_visc.mat, Bl.T],
                     [None, Bl, None]], format="csr")
        M = sp.block_diag(
            [blocks.K_S.mat, blocks.M_w.mat,
             sp.csr_matrix((npr, npr))], format="csr")
        return A, M, npr

    rng = np.random.default_rng(seed)
    shift = 0.5 + rng.random()
    pinned = None
    A, M, npr = build(False)
    for attempt in (False, True):
        if attempt:
            A, M, npr = build(True)
            pinned = 0
        try:
            lu = spla.splu((A - shift * M).tocsc())
            y = rng.standard_normal(A.shape[0])
            x = lu.solve(y)
            resid = float(np.linalg.norm((A - shift * M) @ x - y)
                          / np.linalg.norm(y))
        except RuntimeError:
            resid = np.inf
        if np.isfinite(resid) and resid <= 1e-8:
            break
    else:
        raise SolverError("generator pencil is singular",
                          detail={"shift": shift, "residual": resid})
    return GeneratorPencil(
        A=A, M=M, n_solid=n_s, n_velocity=n_w, n_pressure=npr,
        mesh_hash=mesh.content_hash(),
        regularity={"shift": shift, "residual": resid,
                    "pinned_pressure_dof": pinned},
        fluid_mass=sp.csr_matrix(blocks.fluid_mass.mat))


def _pencil_vector(pencil, lam):
    """Eigenvector for a QZ eigenvalue by shifted inverse iteration.

    The shift sits a hair off ``lam`` so the factorization never lands on
    the exact singularity; two solves are plenty since QZ already pinned
    the eigenvalue.  Returns (x, residual) with a relative eigen-residual
    certificate.
    """
    off = 1e-7 * (1.0 + abs(lam))
    shift = lam + off * (1.0 + 1.0j)
    S = (pencil.A - shift * pencil.M).astype(np.complex128).tocsc()
    try:
        lu = spla.splu(S)
    except RuntimeError as exc:
        raise SolverError(f"inverse iteration at {lam!r} failed: "
                          f"{exc}") from exc
    rng = np.random.default_rng(12345)
    x = rng.standard_normal(pencil.total) + 1j * rng.standard_normal(
        pencil.total)
    for _ in range(3):
        x = lu.solve(pencil.M @ x)
        nrm = np.linalg.norm(x)
        if nrm == 0.0:
            raise SolverError(f"inverse iteration at {lam!r} collapsed")
        x = x / nrm
    num = np.linalg.norm(pencil.A @ x - lam * (pencil.M @ x))
    den = np.linalg.norm(pencil.A @ x) + abs(lam) * np.linalg.norm(
        pencil.M @ x)
    return x, float(num / den) if den else float(num)


def _point(pencil, lam, mscale):
    """SpectralPoint for one eigenvalue, or None for an energy-free
    constraint artifact."""
    x, resid = _pencil_vector(pencil, lam)
    mx = float(np.real(np.conj(x) @ (pencil.M @ x)))
    if mx <= 1e-10 * mscale * float(np.real(np.conj(x) @ x)):
        return None
    s0 = pencil.n_solid
    w = x[s0:s0 + pencil.n_velocity]
    fl = float(np.real(np.conj(w) @ (pencil.fluid_mass @ w)))
    return SpectralPoint(eigenvalue=complex(lam),
                         fluid_fraction=max(fl, 0.0) / mx, m_energy=mx,
                         residual=resid)


def _dense_eigenvalues(pencil):
    """All finite eigenvalues of the pencil, by exact constraint elimination.

    The algebraic rows force ``B w = 0`` and pair every pressure DOF with
    one velocity direction in an infinite eigenvalue.  Projecting the
    velocity block onto ker(B) (dense QR nullspace) removes both at once
    and leaves a smaller regular pencil whose mass block is symmetric
    positive definite, so a Cholesky split turns it into a plain real
    eigenvalue problem -- the blocked Hessenberg path, several times faster
    on one core than generalized QZ at these sizes.  Returns
    ``(eigenvalues, n_dropped)`` where the drop count is the number of
    constraint directions eliminated; falls back to a full QZ sweep if the
    reduction degenerates.
    """
    n_s, n_v, n_p = pencil.n_solid, pencil.n_velocity, pencil.n_pressure
    A, M = pencil.A, pencil.M
    try:
        KT = A[:n_s, n_s:n_s + n_v]
        Av = -A[n_s:n_s + n_v, n_s:n_s + n_v]
        Mw = M[n_s:n_s + n_v, n_s:n_s + n_v]
        if n_p:
            Bd = A[n_s + n_v:, n_s:n_s + n_v].toarray()
            Q, R = sla.qr(Bd.T, check_finite=False)
            diag = np.abs(np.diag(R))
            rank = int(np.count_nonzero(
                diag > diag.max() * 1e-12 * max(Bd.shape))) if diag.size else 0
            Z = Q[:, rank:]
        else:
            Z = np.eye(n_v)
        KTZ = np.asarray(KT @ Z)
        AZ = Z.T @ np.asarray(Av @ Z)
        MZ = Z.T @ np.asarray(Mw @ Z)
        nr = n_s + Z.shape[1]
        Ar = np.zeros((nr, nr))
        Ar[:n_s, n_s:] = KTZ
        Ar[n_s:, :n_s] = -KTZ.T
        Ar[n_s:, n_s:] = -0.5 * (AZ + AZ.T)
        Mr = np.zeros((nr, nr))
        Mr[:n_s, :n_s] = M[:n_s, :n_s].toarray()
        Mr[n_s:, n_s:] = 0.5 * (MZ + MZ.T)
        L = np.linalg.cholesky(Mr)
        X = sla.solve_triangular(L, Ar, lower=True, check_finite=False)
        S = sla.solve_triangular(L, X.T, lower=True, check_finite=False).T
        vals = sla.eigvals(S, check_finite=False, overwrite_a=True)
        return vals, pencil.total - nr
    except np.linalg.LinAlgError:
        vals = sla.eig(A.toarray(), M.toarray(), right=False)
        finite = vals[np.isfinite(vals.real) & np.isfinite(vals.imag)]
        return finite, int(vals.size - finite.size)


def generator_spectrum(pencil, window=None):
    """Dense eigenvalue sweep of the pencil; desk scale by design.

    Eigenvalues come from a dense pass over the constraint-reduced pencil
    (vectors withheld -- at these sizes they dominate the cost); see
    ``_dense_eigenvalues``.  Eigenvectors are then recovered sparsely,
    but only where they matter: every point inside ``window`` (reported with
    the fluid share of its M-energy) and every eigenvalue whose real part
    pokes past the left half-plane beyond roundoff, so a spurious
    constraint direction can be told apart from a genuine instability by
    its vanishing M-energy.  ``max_real`` covers all kept eigenvalues; the
    window restricts reported points to lo <= |Im z| <= hi.
    """
    if pencil.total > DENSE_PENCIL_LIMIT:
        raise ResourceLimitError(
            f"pencil has {pencil.total} DOFs; the dense path stops at "
            f"{DENSE_PENCIL_LIMIT}")
    if window is not None:
        lo, hi = float(window[0]), float(window[1])
        if not (0 <= lo < hi) or not np.isfinite(hi):
            raise ValidationError(f"window must be 0 <= lo < hi, got "
                                  f"{window!r}")
        window = (lo, hi)
    vals, n_dropped = _dense_eigenvalues(pencil)
    finite = vals[np.isfinite(vals.real) & np.isfinite(vals.imag)]
    if finite.size == 0:
        raise SolverError("the pencil produced no finite eigenvalues")
    n_dropped += vals.size - finite.size
    scale = max(1.0, float(np.abs(finite).max()))
    mscale = float(np.abs(pencil.M).max())

    # roundoff-level right-half-plane excursions need no eigenvector; real
    # parts beyond that are either constraint artifacts (no M-energy) or a
    # genuine violation worth reporting precisely
    kept_re = []
    for lam in finite:
        if lam.real <= 1e-9 * scale:
            kept_re.append(lam.real)
            continue
        pt = _point(pencil, lam, mscale)
        if pt is None:
            n_dropped += 1
        else:
            kept_re.append(pt.eigenvalue.real)
    max_real = float(max(kept_re)) if kept_re else -np.inf

    pts = []
    if window is not None:
        for lam in finite:
            if window[0] <= abs(lam.imag) <= window[1]:
                pt = _point(pencil, lam, mscale)
                if pt is not None:
                    pts.append(pt)
    pts.sort(key=lambda pt: (abs(pt.eigenvalue.imag), pt.eigenvalue.imag,
                             pt.eigenvalue.real))
    return SpectrumReport(points=tuple(pts), max_real=max_real,
                          scale=scale, n_finite=int(len(kept_re)),
                          n_dropped=int(n_dropped), window=window)
