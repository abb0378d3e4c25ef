"""Good/bad domain classification from overdetermined boundary residuals.

A domain is flagged BAD when some Dirichlet–Lamé eigenfunction carries a
boundary traction (numerically) proportional to the normal; the scalar
analogue flags Schiffer-type domains through Neumann eigenfunctions with
(numerically) constant boundary trace.  Verdicts are always "up to cutoff m
and threshold tau": the residual trend under refinement, not any single
number, is the evidence.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la

from . import ball as ballmod
from . import mesh as meshmod
from .errors import ValidationError
from .eig import neumann_smallest_eigs, smallest_eigs
from .fem import (MaterialParams, assemble_lame, assemble_scalar_laplacian,
                  boundary_node_mass, boundary_traction, constrain, dof_map)

#: relative eigenvalue gap below which neighbouring modes are fitted jointly
CLUSTER_RTOL = 0.012

#: relative boundary-trace norm below which the constant-trace witness rule
#: does not apply (the trivial-solution exclusion for c = 0)
ZERO_TRACE_RTOL = 1e-8

GOOD = "GOOD_UP_TO_CUTOFF"
BAD = "BAD"


@dataclass(frozen=True)
class TractionFit:
    """Best constant-multiple-of-normal fit of a boundary traction field.

    ``qhat`` minimizes the facet-mass weighted misfit |t - q n|; ``rho`` is
    the normalized residual in [0, 1] (0 = exactly proportional, 1 = t
    orthogonal to n).  ``residuals`` holds |t - qhat n| per facet.  A zero
    input field is flagged ``degenerate`` and fits trivially.
    """

    qhat: float
    rho: float
    residuals: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        arr = np.asarray(self.residuals, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "residuals", arr)


def fit_normal_traction(t, mesh):
    """Fit t ~ qhat * n over the INTERFACE facets (facet-mass inner product)."""
    ids = mesh.facet_ids(meshmod.INTERFACE)
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (ids.size, mesh.dim):
        raise ValidationError(
            f"traction field has shape {t.shape}, expected {(ids.size, mesh.dim)}")
    if not np.all(np.isfinite(t)):
        raise ValidationError("traction field contains non-finite entries")
    normals = mesh.facet_normal[ids]
    meas = mesh.facet_measure[ids]
    tt = np.einsum("f,fd,fd->", meas, t, t)
    if tt == 0.0:
        return TractionFit(qhat=0.0, rho=0.0, residuals=np.zeros(ids.size),
                           degenerate=True)
    tn = np.einsum("f,fd,fd->", meas, t, normals)
    area = meas.sum()
    qhat = tn / area
    resid = t - qhat * normals
    rr = np.einsum("f,fd,fd->", meas, resid, resid)
    rho = float(np.sqrt(max(rr, 0.0) / tt))
    return TractionFit(qhat=float(qhat), rho=min(rho, 1.0),
                       residuals=np.linalg.norm(resid, axis=1))


@dataclass(frozen=True)
class ModeFit:
    """Per-mode classification row."""

    k: int
    mu: float
    rho: float
    qhat: float
    group: int
    degenerate: bool = False

    def to_dict(self):
        return {"k": self.k, "mu": self.mu, "rho": self.rho,
                "qhat": self.qhat, "group": self.group,
                "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d):
        return cls(k=int(d["k"]), mu=float(d["mu"]), rho=float(d["rho"]),
                   qhat=float(d["qhat"]), group=int(d["group"]),
                   degenerate=bool(d["degenerate"]))


@dataclass(frozen=True)
class ClassificationReport:
    """Outcome of a bad-domain or Schiffer classification run."""

    domain: dict
    kind: str                      # "lame" or "schiffer"
    modes: tuple
    tau: float
    m: int
    witnesses: tuple               # K-hat: indices with rho < tau
    verdict: str
    mesh_meta: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        khat = tuple(mf.k for mf in self.modes
                     if mf.rho < self.tau and not mf.degenerate)
        if tuple(self.witnesses) != khat:
            raise ValidationError("witness set inconsistent with rho/tau")
        want = BAD if khat else GOOD
        if self.verdict != want:
            raise ValidationError("verdict inconsistent with witness set")

    def to_json(self):
        doc = {
            "format": "lamewave-classification",
            "version": 1,
            "domain": self.domain,
            "kind": self.kind,
            "tau": self.tau,
            "m": self.m,
            "modes": [mf.to_dict() for mf in self.modes],
            "witnesses": list(self.witnesses),
            "verdict": self.verdict,
            "mesh_meta": self.mesh_meta,
            "metadata": self.metadata,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != "lamewave-classification":
            raise ValidationError("not a classification report")
        return cls(domain=doc["domain"], kind=doc["kind"],
                   modes=tuple(ModeFit.from_dict(d) for d in doc["modes"]),
                   tau=float(doc["tau"]), m=int(doc["m"]),
                   witnesses=tuple(int(k) for k in doc["witnesses"]),
                   verdict=doc["verdict"], mesh_meta=doc["mesh_meta"],
                   metadata=doc.get("metadata", {}))

    def to_csv(self):
        """Flat (k, mu_k, rho_k, qhat_k) rows; qhat is c-hat for Schiffer runs."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "mu", "rho", "qhat"])
        for mf in self.modes:
            w.writerow([mf.k, repr(mf.mu), repr(mf.rho), repr(mf.qhat)])
        return buf.getvalue()


def _cluster_labels(mu, rtol):
    labels = np.zeros(len(mu), dtype=np.int64)
    for i in range(1, len(mu)):
        scale = max(abs(mu[i]), abs(mu[i - 1]))
        joined = (mu[i] - mu[i - 1]) <= rtol * scale
        labels[i] = labels[i - 1] if joined else labels[i - 1] + 1
    return labels


def _joint_normal_fit(T, normals, meas):
    """Minimum-rho directions in the span of traction fields T[k].

    Returns per-direction (rho, qhat) sorted ascending in rho, with qhat
    scaled for the unit-M-norm combination of the (M-orthonormal) input
    modes.  Zero-traction members are reported as degenerate slots at the
    end.  Solves a small generalized symmetric eigenproblem: rho^2 is the
    Rayleigh quotient of the non-normal traction energy against total
    traction energy over the cluster span.
    """
    area = meas.sum()
    norms = np.sqrt(np.einsum("kfd,lfd,f->kl", T, T, meas).diagonal())
    live = norms > 0.0
    nlive = int(live.sum())
    out = []
    if nlive:
        Tn = T[live] / norms[live][:, None, None]
        qh = np.einsum("kfd,fd,f->k", Tn, normals, meas) / area
        R = Tn - qh[:, None, None] * normals[None]
        A = np.einsum("kfd,lfd,f->kl", R, R, meas)
        B = np.einsum("kfd,lfd,f->kl", Tn, Tn, meas)
        B += (1e-14 * max(B.diagonal().max(), 1.0)) * np.eye(nlive)
        wa, Va = la.eigh(A, B)
        scale_back = Va / norms[live][:, None]   # coeffs w.r.t. original modes
        for j in range(nlive):
            c = scale_back[:, j]
            qhat = float(qh @ Va[:, j])
            # unit M-norm combination of M-orthonormal modes: |c|_2 = 1
            cn = np.linalg.norm(c)
            out.append((float(np.sqrt(max(wa[j], 0.0))),
                        qhat / cn if cn > 0 else 0.0, False))
    for _ in range(len(T) - nlive):
        out.append((0.0, 0.0, True))
    return out


def _convention_metadata(mesh, params, modes):
    """Ball/disk convention arbitration recorded alongside the verdict.

    Compares the best witness (mu, |qhat|) against the closed-form
    candidates under both traction-constant conventions; the metadata names
    whichever matches, without presenting either as ground truth.
    """
    info = mesh.gen_info.get("shape", {})
    kind = info.get("kind")
    if kind not in ("ball", "disk"):
        return {}
    witnesses = [mf for mf in modes if not mf.degenerate and mf.rho < 0.5]
    if not witnesses:
        return {}
    best = min(witnesses, key=lambda mf: mf.rho)
    radius = float(info["params"][0])
    make = ballmod.ball_mode if kind == "ball" else ballmod.disk_mode
    entries = {}
    for conv in ballmod.CONVENTIONS:
        cmode = make(1, radius, params, convention=conv)
        qn = ballmod.traction_per_unit_l2(cmode)
        entries[conv] = {
            "mu": cmode.mu,
            "q_per_unit_l2": qn,
            "mu_rel_err": abs(best.mu - cmode.mu) / cmode.mu,
            "q_rel_err": abs(abs(best.qhat) - abs(qn)) / abs(qn),
        }
    matched = min(entries, key=lambda c: entries[c]["mu_rel_err"]
                  + entries[c]["q_rel_err"])
    return {"convention_check": {"witness_k": best.k, "witness_mu": best.mu,
                                 "witness_abs_qhat": abs(best.qhat),
                                 "candidates": entries, "matched": matched}}


def _mesh_meta(mesh):
    return {
        "dim": mesh.dim,
        "num_vertices": int(mesh.num_vertices),
        "num_cells": int(mesh.num_cells),
        "refinement": int(mesh.gen_info.get("refinement", -1)),
        "max_cell_diameter": float(mesh.max_cell_diameter()),
    }


def _validate_classify_args(m, tau):
    if m < 1:
        raise ValidationError(f"m must be >= 1, got {m}")
    if not (0.0 < tau < 1.0):
        raise ValidationError(f"tau must lie in (0, 1), got {tau}")


def classify_bad_domain(mesh, params, m, tau=0.1, tol=1e-8, seed=0,
                        cluster_rtol=CLUSTER_RTOL):
    """Bad-domain verdict from the first m Dirichlet–Lamé eigenmodes.

    Solves the unshifted pencil (regardless of ``params.shift``), recovers
    each mode's boundary traction, and fits t ~ q n — jointly over each
    near-degenerate eigenvalue cluster, since a witness may appear only as a
    combination of discretely-split modes.  Witness indices are those modes
    whose (cluster-optimal) rho falls below tau.
    """
    _validate_classify_args(m, tau)
    unshifted = MaterialParams(params.lam0, params.lam1, nu=params.nu,
                               shift=False)
    K, M = assemble_lame(mesh, unshifted)
    dmap = dof_map(mesh, "vector", 2, "SOLID")
    bdofs = dmap.boundary_dofs(meshmod.INTERFACE)
    Kc = constrain(K, bdofs)
    Mc = constrain(M, bdofs)
    pairs = smallest_eigs(Kc, Mc, m, tol=tol, seed=seed)

    ids = mesh.facet_ids(meshmod.INTERFACE)
    normals = mesh.facet_normal[ids]
    meas = mesh.facet_measure[ids]
    T = np.empty((m, ids.size, mesh.dim))
    for j, pair in enumerate(pairs):
        psi_full = Kc.expand(pair.psi_tilde)
        t_f, _, _ = boundary_traction(mesh, unshifted, psi_full, pair.mu)
        T[j] = t_f

    mus = np.array([p.mu for p in pairs])
    labels = _cluster_labels(mus, cluster_rtol)
    modes = [None] * m
    for g in np.unique(labels):
        idx = np.nonzero(labels == g)[0]
        fits = _joint_normal_fit(T[idx], normals, meas)
        for slot, (rho, qhat, degen) in zip(idx, fits):
            modes[slot] = ModeFit(k=int(slot), mu=float(mus[slot]),
                                  rho=float(rho), qhat=float(qhat),
                                  group=int(g), degenerate=degen)
    modes = tuple(modes)
    witnesses = tuple(mf.k for mf in modes
                      if mf.rho < tau and not mf.degenerate)
    meta = _convention_metadata(mesh, unshifted, modes)
    return ClassificationReport(
        domain=mesh.gen_info.get("shape", {}), kind="lame", modes=modes,
        tau=float(tau), m=int(m), witnesses=witnesses,
        verdict=BAD if witnesses else GOOD, mesh_meta=_mesh_meta(mesh),
        metadata=meta)


def schiffer_trace_fit(trace_vals, Mb):
    """(c-hat, rho, excluded) for one boundary-trace vector.

    c-hat is the boundary mean; rho the relative boundary-mass deviation
    from that constant; traces with norm below ZERO_TRACE_RTOL (relative to
    the boundary area scale) fall under the trivial-solution rule for c = 0
    and are excluded from witness candidacy.
    """
    u = np.asarray(trace_vals, dtype=np.float64)
    Mu = Mb.mat @ u
    area = Mb.mat.sum()
    nrm2 = float(u @ Mu)
    if nrm2 <= (ZERO_TRACE_RTOL ** 2) * area:
        return 0.0, 0.0, True
    chat = float(np.sum(Mu) / area)
    dev = u - chat
    rho2 = float(dev @ (Mb.mat @ dev)) / nrm2
    return chat, float(np.sqrt(max(rho2, 0.0))), False


def classify_schiffer(mesh, m, tau=0.1, tol=1e-8, seed=0,
                      cluster_rtol=CLUSTER_RTOL):
    """Schiffer-domain verdict from the first m Neumann Laplace eigenmodes.

    A witness mode has (numerically) constant, nonzero boundary trace:
    rho_k = |u_k - c-hat_k|_boundary / |u_k|_boundary with c-hat_k the
    boundary mean.  Zero-trace modes are excluded (only the trivial solution
    exists for c = 0).  Near-degenerate clusters are fitted jointly as in
    classify_bad_domain; the report's qhat column carries c-hat.
    """
    _validate_classify_args(m, tau)
    A, M = assemble_scalar_laplacian(mesh)
    pairs = neumann_smallest_eigs(A, M, m, tol=tol, seed=seed)
    dmap = dof_map(mesh, "scalar", 2, "SOLID")
    Mb, bnodes = boundary_node_mass(mesh, dmap, meshmod.INTERFACE)
    area = Mb.mat.sum()

    mus = np.array([p.mu for p in pairs])
    traces = np.stack([p.psi_tilde[bnodes] for p in pairs])
    labels = _cluster_labels(mus, cluster_rtol)
    modes = [None] * m
    for g in np.unique(labels):
        idx = np.nonzero(labels == g)[0]
        fits = _joint_schiffer_fit(traces[idx], Mb, area)
        for slot, (rho, chat, degen) in zip(idx, fits):
            modes[slot] = ModeFit(k=int(slot), mu=float(mus[slot]),
                                  rho=float(rho), qhat=float(chat),
                                  group=int(g), degenerate=degen)
    modes = tuple(modes)
    witnesses = tuple(mf.k for mf in modes
                      if mf.rho < tau and not mf.degenerate)
    return ClassificationReport(
        domain=mesh.gen_info.get("shape", {}), kind="schiffer", modes=modes,
        tau=float(tau), m=int(m), witnesses=witnesses,
        verdict=BAD if witnesses else GOOD, mesh_meta=_mesh_meta(mesh),
        metadata={})


def _joint_schiffer_fit(traces, Mb, area):
    """Cluster variant of schiffer_trace_fit: min-rho directions in the span."""
    Mt = (Mb.mat @ traces.T).T
    nrm2 = np.einsum("kb,kb->k", traces, Mt)
    live = nrm2 > (ZERO_TRACE_RTOL ** 2) * area
    out = []
    nlive = int(live.sum())
    if nlive:
        Tn = traces[live] / np.sqrt(nrm2[live])[:, None]
        MTn = (Mb.mat @ Tn.T).T
        means = MTn.sum(axis=1) / area
        centered = Tn - means[:, None]
        A = centered @ (Mb.mat @ centered.T)
        B = Tn @ MTn.T
        B += (1e-14 * max(B.diagonal().max(), 1.0)) * np.eye(nlive)
        wa, Va = la.eigh((A + A.T) / 2, (B + B.T) / 2)
        for j in range(nlive):
            chat = float(means @ Va[:, j])
            c = Va[:, j] / np.sqrt(nrm2[live])
            cn = np.linalg.norm(c)
            out.append((float(np.sqrt(max(wa[j], 0.0))),
                        chat / cn if cn > 0 else 0.0, False))
    for _ in range(len(traces) - nlive):
        out.append((0.0, 0.0, True))
    return out


def save_report(path, report):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")


def load_report(path):
    with open(path, "r", encoding="utf-8") as fh:
        return ClassificationReport.from_json(fh.read())
