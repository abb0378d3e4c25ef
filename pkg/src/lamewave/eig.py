"""Sparse symmetric generalized eigensolvers for stiffness/mass pencils.

Smallest eigenpairs of ``K x = mu M x`` via shift-invert Lanczos (ARPACK)
with a dense LAPACK fallback for small systems.  Returned eigenvectors are
M-normalized; degenerate eigenvalues come back as adjacent entries sharing a
group label so downstream code can treat the whole eigenspace as one unit.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError, ValidationError
from .fem import SparseMatrix

DENSE_CUTOFF = 2000
GROUP_RTOL = 1e-6


@dataclass(frozen=True)
class EigenPair:
    """One converged pair of the unshifted pencil.

    ``psi_tilde`` is the M-normalized eigenvector, ``psi`` the Sobolev-scaled
    copy ``psi_tilde / sqrt(1 + mu)``, ``residual`` the relative certificate
    ``|K v - mu M v|_2 / |K v|_2`` and ``group`` a label shared by entries of
    one (numerically) degenerate eigenvalue.
    """

    mu: float
    psi_tilde: np.ndarray
    residual: float
    group: int = 0
    psi: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vt = np.asarray(self.psi_tilde, dtype=np.float64)
        vt.setflags(write=False)
        object.__setattr__(self, "psi_tilde", vt)
        ps = vt / np.sqrt(1.0 + self.mu)
        ps.setflags(write=False)
        object.__setattr__(self, "psi", ps)


def _as_csr(A):
    if isinstance(A, SparseMatrix):
        return A.mat
    return sp.csr_matrix(A)


def _validate_pencil(K, M, m):
    Km, Mm = _as_csr(K), _as_csr(M)
    if Km.shape[0] != Km.shape[1] or Km.shape != Mm.shape:
        raise ValidationError(f"pencil shape mismatch: {Km.shape} vs {Mm.shape}")
    if m < 1:
        raise ValidationError(f"m must be >= 1, got {m}")
    if m > Km.shape[0]:
        raise ValidationError(f"m={m} exceeds pencil dimension {Km.shape[0]}")
    return Km, Mm


def _start_vector(n, seed):
    return np.random.default_rng(seed).standard_normal(n)


def _certify(Km, Mm, mu, vecs, tol):
    """Relative residuals |K v - mu M v| / |K v| per column."""
    KV = Km @ vecs
    MV = Mm @ vecs
    res = KV - MV * mu[None, :]
    num = np.linalg.norm(res, axis=0)
    den = np.linalg.norm(KV, axis=0)
    den[den == 0.0] = 1.0
    rel = num / den
    bad = rel > tol
    if np.any(bad):
        raise SolverError(
            "residual certificate failed for converged pairs",
            {"failed": int(bad.sum()), "max_residual": float(rel.max()),
             "tol": float(tol)})
    return rel


def _m_orthonormalize(Mm, mu, vecs):
    """Re-orthonormalize within degenerate groups (M-inner product)."""
    groups = _group_labels(mu)
    for g in np.unique(groups):
        idx = np.nonzero(groups == g)[0]
        block = vecs[:, idx]
        G = block.T @ (Mm @ block)
        L = la.cholesky(G, lower=True)
        vecs[:, idx] = la.solve_triangular(L, block.T, lower=True).T
    # exact unit M-norm for every column
    nrm = np.sqrt(np.einsum("ij,ij->j", vecs, Mm @ vecs))
    vecs /= nrm[None, :]
    return groups


def _group_labels(mu):
    labels = np.zeros(len(mu), dtype=np.int64)
    for i in range(1, len(mu)):
        scale = max(abs(mu[i]), abs(mu[i - 1]), 1e-300)
        close = abs(mu[i] - mu[i - 1]) <= GROUP_RTOL * scale
        labels[i] = labels[i - 1] if close else labels[i - 1] + 1
    return labels


def _canonical_sign(vecs):
    """Flip columns so the largest-magnitude entry is positive (determinism)."""
    for j in range(vecs.shape[1]):
        i = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[i, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vecs


def _dense_solve(Km, Mm, m, sigma_report):
    try:
        w, V = la.eigh(Km.toarray(), Mm.toarray(),
                       subset_by_index=[0, m - 1])
    except la.LinAlgError as exc:
        raise SolverError("dense pencil factorization failed",
                          {"shift": sigma_report, "err": str(exc)})
    return w, V


def _arpack_solve(Km, Mm, m, tol, seed, sigma):
    n = Km.shape[0]
    v0 = _start_vector(n, seed)
    try:
        w, V = spla.eigsh(Km.tocsc(), k=m, M=Mm.tocsc(), sigma=sigma,
                          which="LM", v0=v0, tol=tol)
    except spla.ArpackNoConvergence as exc:
        raise SolverError(
            "eigensolver did not converge within max iterations",
            {"requested": m, "converged": len(exc.eigenvalues),
             "shift": sigma})
    except RuntimeError as exc:
        raise SolverError("shifted factorization failed",
                          {"shift": sigma, "err": str(exc)})
    order = np.argsort(w)
    return w[order], V[:, order]


def _solve(K, M, m, tol, seed, sigma, drop_below=None):
    Km, Mm = _validate_pencil(K, M, m)
    n = Km.shape[0]
    pairs = []
    # when a kernel is filtered we may need extra converged pairs
    want = m
    while True:
        k = want if drop_below is None else min(n, want + 8)
        if n < DENSE_CUTOFF:
            w, V = _dense_solve(Km, Mm, k, sigma)
        else:
            w, V = _arpack_solve(Km, Mm, k, tol, seed, sigma)
        if drop_below is not None:
            keep = w > drop_below
            w, V = w[keep], V[:, keep]
        if len(w) >= m or k >= n:
            break
        want = want + (m - len(w)) + 8
    w, V = w[:m], V[:, :m]
    V = np.ascontiguousarray(V)
    groups = _m_orthonormalize(Mm, w, V)
    _canonical_sign(V)
    res = _certify(Km, Mm, w, V, tol)
    for j in range(m):
        pairs.append(EigenPair(mu=float(w[j]), psi_tilde=V[:, j].copy(),
                               residual=float(res[j]), group=int(groups[j])))
    return pairs


def smallest_eigs(K, M, m, tol=1e-8, seed=0):
    """Smallest ``m`` eigenpairs of the symmetric definite pencil (K, M).

    Shift-invert at 0 (ARPACK) above ``DENSE_CUTOFF`` unknowns, dense LAPACK
    below.  Pairs come back ascending, M-orthonormal within round-off, with
    residual certificates checked against ``tol``.  Identical inputs and seed
    give bit-identical eigenvalues.
    """
    return _solve(K, M, m, tol, seed, sigma=0.0)


def neumann_smallest_eigs(A, M, m, tol=1e-8, seed=0, mu_drop=1e-8):
    """Smallest nonzero eigenpairs of a semidefinite (Neumann-type) pencil.

    The factorization shift is moved off the kernel
    (``sigma0 = -1e-3 trace(A)/trace(M)``) and converged eigenvalues at or
    below ``mu_drop`` (the constant / rigid modes) are dropped before the
    first ``m`` survivors are returned.
    """
    Am, Mm = _as_csr(A), _as_csr(M)
    sigma0 = -1e-3 * (Am.diagonal().sum() / Mm.diagonal().sum())
    return _solve(A, M, m, tol, seed, sigma=float(sigma0), drop_below=mu_drop)


# ---------------------------------------------------------------------------
# serialization


def save_eigenpairs(path, pairs, meta=None):
    """Dump eigenpairs to a JSON document.

    Layout: a single JSON object with keys ``mu`` (list of floats),
    ``residual`` (list), ``group`` (list of ints), ``meta`` (caller dict),
    and ``psi_tilde`` — base64 of the little-endian float64 matrix stored
    row-major with shape ``[npairs, ndof]`` (given by ``shape``).
    """
    mus = [p.mu for p in pairs]
    mat = np.stack([p.psi_tilde for p in pairs]).astype("<f8")
    doc = {
        "format": "lamewave-eigenpairs",
        "version": 1,
        "mu": mus,
        "residual": [p.residual for p in pairs],
        "group": [p.group for p in pairs],
        "shape": list(mat.shape),
        "meta": dict(meta or {}),
        "psi_tilde": base64.b64encode(mat.tobytes()).decode("ascii"),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_eigenpairs(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "lamewave-eigenpairs":
        raise ValidationError(f"not an eigenpair dump: {path}")
    shape = tuple(doc["shape"])
    raw = base64.b64decode(doc["psi_tilde"])
    mat = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    pairs = [
        EigenPair(mu=float(mu), psi_tilde=mat[i], residual=float(res),
                  group=int(grp))
        for i, (mu, res, grp) in enumerate(
            zip(doc["mu"], doc["residual"], doc["group"]))
    ]
    return pairs, doc.get("meta", {})
