"""Closed-form radial eigenmodes of the ball and the disk.

The 3D ball of radius r carries an explicit family of radial vector modes

    psi_k(y) = j1(r_k |y|/r) * y/|y|,

where j1(x) = sin(x)/x^2 - cos(x)/x and r_k is the k-th positive root of j1
(equivalently of tan(x) = x).  Each psi_k vanishes on the sphere, is an
eigenfunction of the displacement operator, and its boundary traction is a
constant multiple of the outward normal, which is exactly the property the
classifier hunts for.  The 2D analogue lives on the disk: u_k = J0(a_k |y|/r)
with a_k the k-th positive root of J1; its gradient is the vector witness.

Two constants conventions are supported for the eigenvalue/traction pair and
an FEM run arbitrates between them (see classify.arbitrate_ball_convention):

    lambda_sum: C = lam0 + lam1        (consistent with D = sym grad with 1/2)
    paper:      C = 2*lam0 + lam1      (sym grad without the 1/2 factor)

All special functions here are evaluated without external special-function
libraries: power series (in extended precision) for |x| < 16 and Hankel
asymptotics beyond, giving absolute accuracy ~1e-13 or better.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

CONVENTIONS = ("lambda_sum", "paper")

# Series/asymptotic switch for J0/J1.  The asymptotic expansion's optimal
# truncation error is O(e^{-2x}); 16 is the smallest integer where that is
# comfortably below 1e-13.  The series is summed in longdouble because its
# largest term at x=16 is ~1.7e5.
_ASYMPTOTIC_CUTOFF = 16.0


def _bessel_series(x, nu):
    """J_nu(x) for nu in {0,1} by the ascending series, |x| <= ~16."""
    xl = np.asarray(x, dtype=np.longdouble)
    half = 0.5 * xl
    q = half * half
    if nu == 0:
        term = np.ones_like(xl)
    else:
        term = half.copy()
    total = term.copy()
    # term_{m+1}/term_m = -q / ((m+1)(m+nu+1)); 40 terms cover x=16 to ~1e-21
    for m in range(60):
        term = term * (-q) / ((m + 1.0) * (m + nu + 1.0))
        total += term
        if np.all(np.abs(term) <= 1e-24 * (1.0 + np.abs(total))):
            break
    return np.asarray(total, dtype=np.float64)


def _bessel_asymptotic(x, nu):
    """J_nu(x) by the Hankel expansion, x >= ~16."""
    x = np.asarray(x, dtype=np.float64)
    mu = 4.0 * nu * nu
    inv8x = 1.0 / (8.0 * x)
    p = np.ones_like(x)
    q = np.zeros_like(x)
    term = np.ones_like(x)
    for k in range(1, 25):
        term = term * (mu - (2.0 * k - 1.0) ** 2) / k * inv8x
        if k % 2 == 1:
            q += term * (-1.0) ** ((k - 1) // 2)
        else:
            p += term * (-1.0) ** (k // 2)
        if np.all(np.abs(term) < 1e-18):
            break
    omega = x - (0.5 * nu + 0.25) * math.pi
    return np.sqrt(2.0 / (math.pi * x)) * (p * np.cos(omega) - q * np.sin(omega))


def bessel_j0(x):
    """Bessel function J0, vectorized, abs error < ~1e-13."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    small = x < _ASYMPTOTIC_CUTOFF
    if small.any():
        out[small] = _bessel_series(x[small], 0)
    if (~small).any():
        out[~small] = _bessel_asymptotic(x[~small], 0)
    return out[0] if scalar else out


def bessel_j1(x):
    """Bessel function J1, vectorized (odd in x), abs error < ~1e-13."""
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    sign = np.sign(x)
    ax = np.abs(x)
    out = np.empty_like(ax)
    small = ax < _ASYMPTOTIC_CUTOFF
    if small.any():
        out[small] = _bessel_series(ax[small], 1)
    if (~small).any():
        out[~small] = _bessel_asymptotic(ax[~small], 1)
    out *= sign
    return out[0] if scalar else out


def spherical_j1(x):
    """Spherical Bessel j1(x) = sin(x)/x^2 - cos(x)/x with a stable small-x series."""
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    x = np.atleast_1d(x).copy()
    out = np.empty_like(x)
    small = np.abs(x) < 0.5
    if small.any():
        xs = x[small]
        x2 = xs * xs
        # nested ascending series; factors are x^2/(2m(2m+3))
        out[small] = (xs / 3.0) * (
            1.0 - x2 / 10.0 * (1.0 - x2 / 28.0 * (1.0 - x2 / 54.0 * (
                1.0 - x2 / 88.0 * (1.0 - x2 / 130.0 * (1.0 - x2 / 180.0)))))
        )
    big = ~small
    if big.any():
        xb = x[big]
        out[big] = np.sin(xb) / (xb * xb) - np.cos(xb) / xb
    return out[0] if scalar else out


def _spherical_j1_deriv(x):
    """d/dx spherical_j1 = j0(x) - 2 j1(x)/x."""
    x = np.asarray(x, dtype=np.float64)
    j0 = np.where(np.abs(x) > 1e-30, np.sin(x) / np.where(x == 0, 1.0, x), 1.0)
    return j0 - 2.0 * spherical_j1(x) / np.where(np.abs(x) < 1e-30, 1.0, x)


def _bisect_newton(f, fprime, lo, hi, tol=1e-14, max_newton=60):
    """Root of f in (lo, hi): bisection to ~1e-6 then guarded Newton to tol."""
    flo = f(lo)
    if flo == 0.0:
        return lo
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < 1e-6:
            break
    x = 0.5 * (lo + hi)
    for _ in range(max_newton):
        fx = f(x)
        dfx = fprime(x)
        step = fx / dfx
        x_new = x - step
        if not (lo <= x_new <= hi):
            x_new = 0.5 * (lo + hi)  # fall back to bisection midpoint
            if (f(x_new) > 0) == (f(lo) > 0):
                lo = x_new
            else:
                hi = x_new
            x = 0.5 * (lo + hi)
            continue
        x = x_new
        if abs(step) <= tol * max(1.0, abs(x)):
            break
    return x


def bessel_roots(count, kind="spherical"):
    """First `count` positive roots of spherical j1 (kind='spherical', i.e.
    tan x = x) or of the cylindrical J1 (kind='cylindrical').

    Roots are refined to ~1e-13 relative accuracy by bisection plus Newton.
    The k-th spherical root lies in (k*pi, (k+1/2)*pi) and approaches the
    upper end from below as k grows.
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    roots = np.empty(count)
    if kind == "spherical":
        # roots of g(x) = sin x - x cos x, same zeros as j1 for x > 0
        g = lambda x: math.sin(x) - x * math.cos(x)
        gp = lambda x: x * math.sin(x)
        for k in range(1, count + 1):
            roots[k - 1] = _bisect_newton(g, gp, k * math.pi + 1e-12, (k + 0.5) * math.pi)
    elif kind == "cylindrical":
        f = lambda x: float(bessel_j1(x))
        fp = lambda x: float(bessel_j0(x)) - float(bessel_j1(x)) / x
        for k in range(1, count + 1):
            roots[k - 1] = _bisect_newton(f, fp, k * math.pi + 1e-12, (k + 1) * math.pi - 1e-12)
    else:
        raise ValidationError(f"unknown root kind {kind!r}")
    return roots


def _check_convention(convention):
    if convention not in CONVENTIONS:
        raise ValidationError(
            f"convention must be one of {CONVENTIONS}, got {convention!r}"
        )


def _mode_constant(params, convention):
    _check_convention(convention)
    if convention == "lambda_sum":
        return params.lam0 + params.lam1
    return 2.0 * params.lam0 + params.lam1


@dataclass(frozen=True)
class BallMode:
    """Radial witness mode of the ball (3D) or disk (2D).

    Fields
    ------
    dim : 2 or 3
    index : 1-based mode index k
    root : k-th positive root (spherical j1 root in 3D, J1 root in 2D)
    radius : domain radius r
    mu : eigenvalue of the displacement operator, C * root^2 / r^2
    traction_constant : q with boundary traction = q * n, for the canonical
        normalization below
    boundary_value : 2D only; the constant boundary value c of the scalar
        potential (None in 3D)
    convention : constants convention that produced mu/q
    """

    dim: int
    index: int
    root: float
    radius: float
    mu: float
    traction_constant: float
    boundary_value: float | None
    convention: str

    def __call__(self, points):
        """Evaluate the vector mode at an array of points, shape (n, dim).

        3D: psi(y) = j1(r_k |y|/r) * y/|y| (value 0 at the origin).
        2D: psi(y) = grad of J0(a_k |y|/r) = -(a_k/r) J1(a_k |y|/r) * y/|y|.
        """
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[None, :]
        if pts.shape[1] != self.dim:
            raise ValidationError(
                f"points have dim {pts.shape[1]}, mode has dim {self.dim}"
            )
        rho = np.linalg.norm(pts, axis=1)
        safe = np.where(rho > 0, rho, 1.0)
        s = self.root * rho / self.radius
        if self.dim == 3:
            profile = spherical_j1(s)
        else:
            profile = -(self.root / self.radius) * bessel_j1(s)
        return (profile / safe)[:, None] * pts

    def potential(self, points):
        """Scalar potential: the mode equals a constant times its gradient.

        3D: phi(y) = -(r/r_k) j0(r_k |y|/r); 2D: u(y) = J0(a_k |y|/r).
        """
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[None, :]
        rho = np.linalg.norm(pts, axis=1)
        s = self.root * rho / self.radius
        if self.dim == 3:
            j0 = np.where(s > 1e-12, np.sin(np.where(s == 0, 1.0, s)) / np.where(s == 0, 1.0, s), 1.0 - s * s / 6.0)
            return -(self.radius / self.root) * j0
        return bessel_j0(s)

    def l2_norm(self):
        """Exact L2 norm of the vector mode over its domain."""
        rk = self.root
        r = self.radius
        if self.dim == 3:
            # integral of j1(rk rho/r)^2 rho^2 over the ball = r^3 sin^2(rk)/(2 rk^2) * 4pi...
            # closed form: ||psi||^2 = 2 pi r^3 j0(rk)^2 with j0(rk) = sin(rk)/rk
            return math.sqrt(2.0 * math.pi * r**3) * abs(math.sin(rk)) / rk
        # 2D: psi = grad J0(a rho / r): ||psi||^2 = (a/r)^2 * pi r^2 J0(a)^2
        return (rk / r) * math.sqrt(math.pi) * r * abs(float(bessel_j0(rk)))


def ball_mode(k, radius, params, convention="lambda_sum"):
    """k-th radial witness mode of the 3D ball of given radius.

    The eigenvalue is mu_k = C (r_k/r)^2 and the boundary traction of the
    returned normalization is q_k = C sin(r_k)/r times the outward normal,
    where C is the convention constant.
    """
    if k < 1:
        raise ValidationError(f"mode index must be >= 1, got {k}")
    if radius <= 0:
        raise ValidationError(f"radius must be positive, got {radius}")
    rk = float(bessel_roots(k, kind="spherical")[k - 1])
    c = _mode_constant(params, convention)
    mu = c * (rk / radius) ** 2
    q = c * math.sin(rk) / radius
    return BallMode(
        dim=3, index=k, root=rk, radius=float(radius), mu=mu,
        traction_constant=q, boundary_value=None, convention=convention,
    )


def disk_mode(k, radius, params, convention="lambda_sum"):
    """k-th radial witness of the 2D disk: scalar u_k = J0(a_k |y|/r) with
    vanishing normal derivative and constant boundary value c_k = J0(a_k).

    The vector witness is grad u_k, with eigenvalue mu = C (a_k/r)^2 and
    traction constant q = -mu * c_k (witness normalization grad u).
    """
    if k < 1:
        raise ValidationError(f"mode index must be >= 1, got {k}")
    if radius <= 0:
        raise ValidationError(f"radius must be positive, got {radius}")
    ak = float(bessel_roots(k, kind="cylindrical")[k - 1])
    c = _mode_constant(params, convention)
    mu = c * (ak / radius) ** 2
    ck = float(bessel_j0(ak))
    return BallMode(
        dim=2, index=k, root=ak, radius=float(radius), mu=mu,
        traction_constant=-mu * ck, boundary_value=ck, convention=convention,
    )


def traction_per_unit_l2(mode):
    """|q| of the mode rescaled to unit L2 norm (scale-invariant FEM target)."""
    return abs(mode.traction_constant) / mode.l2_norm()
