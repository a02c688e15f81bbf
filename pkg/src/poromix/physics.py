"""Material laws and manufactured solution cases.

The constitutive stack: isotropic Hooke tensor ``C tau = lam tr(tau) I +
2 mu tau``, its inverse, and two permeability laws (exponential and
Kozeny-Carman) expressed as scalar functions of the total stress trace and
the pore pressure through

    Theta = (c0 (d lam + 2 mu) + d alpha^2) p + alpha tr(sigma).

Manufactured cases carry closed-form fields (displacement, pressure and all
derived quantities) as vectorised numpy callables generated symbolically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import sympy as sp

EXPONENTIAL = "exponential"
KOZENY_CARMAN = "kozeny_carman"

D = 2  # spatial dimension


class PermeabilityError(Exception):
    """Permeability law evaluated outside its admissible range."""


@dataclass(frozen=True)
class ParameterSet:
    lam: float = 1.0
    mu: float = 1.0
    alpha: float = 0.1
    c0: float = 0.1
    k0: float = 0.1
    k1: float = 0.1
    k2: float = 0.1
    mu_f: float = 1.0
    law: str = KOZENY_CARMAN

    def __post_init__(self):
        if self.lam <= 0 or self.mu <= 0:
            raise ValueError("Lame parameters must be positive")
        if self.mu_f <= 0:
            raise ValueError("fluid viscosity must be positive")
        if self.k0 <= 0 or self.k1 < 0:
            raise ValueError("permeability constants must satisfy k0 > 0, k1 >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("Biot-Willis coefficient must lie in [0, 1]")
        if self.c0 < 0:
            raise ValueError("storativity must be nonnegative")
        if self.law not in (EXPONENTIAL, KOZENY_CARMAN):
            raise ValueError(f"unknown permeability law {self.law!r}")

    @property
    def dlam2mu(self) -> float:
        return D * self.lam + 2.0 * self.mu

    def with_(self, **kw) -> "ParameterSet":
        return replace(self, **kw)


def gamma(params: ParameterSet) -> float:
    """Coupling constant alpha sqrt(d) / (d lam + 2 mu)."""
    return params.alpha * math.sqrt(D) / params.dlam2mu


def gamma_tilde(params: ParameterSet) -> float:
    """Effective storativity c0 + d alpha^2 / (d lam + 2 mu)."""
    return params.c0 + D * params.alpha ** 2 / params.dlam2mu


# -- Hooke tensor -------------------------------------------------------------

def hooke(tau, params: ParameterSet):
    """C tau = lam tr(tau) I + 2 mu tau, acting on (..., 2, 2) arrays."""
    tau = np.asarray(tau, dtype=float)
    tr = np.trace(tau, axis1=-2, axis2=-1)
    out = 2.0 * params.mu * tau
    idx = np.arange(2)
    out[..., idx, idx] += params.lam * tr[..., None]
    return out


def hooke_inv(tau, params: ParameterSet):
    """Inverse Hooke: tau/(2 mu) - lam tr(tau) I / (2 mu (d lam + 2 mu))."""
    tau = np.asarray(tau, dtype=float)
    tr = np.trace(tau, axis1=-2, axis2=-1)
    out = tau / (2.0 * params.mu)
    idx = np.arange(2)
    out[..., idx, idx] -= (params.lam / (2.0 * params.mu * params.dlam2mu)
                           * tr[..., None])
    return out


# -- permeability laws --------------------------------------------------------

def _theta(tr_sigma, p, params: ParameterSet):
    return ((params.c0 * params.dlam2mu + D * params.alpha ** 2) * np.asarray(p)
            + params.alpha * np.asarray(tr_sigma))


def kappa(tr_sigma, p, params: ParameterSet):
    """Scalar permeability coefficient (the tensor is kappa * I)."""
    th = _theta(tr_sigma, p, params)
    dl = params.dlam2mu
    if params.law == EXPONENTIAL:
        return (params.k0 + params.k1 * np.exp(params.k2 * th / dl)) / params.mu_f
    eps = 1e-12 * dl
    denom = dl - th
    if np.any(np.abs(denom) < eps):
        raise PermeabilityError(
            "Kozeny-Carman denominator vanishes (Theta approaches d*lam+2*mu)")
    return params.k0 / params.mu_f + params.k1 * th ** 3 / (dl * params.mu_f
                                                            * denom ** 2)


def kappa_inv(tr_sigma, p, params: ParameterSet):
    """Reciprocal permeability; raises if positivity fails."""
    k = kappa(tr_sigma, p, params)
    eps = 1e-12 * params.dlam2mu
    if np.any(np.asarray(k) <= eps):
        raise PermeabilityError("permeability is not uniformly positive")
    return 1.0 / k


def kappa_inv_derivatives(tr_sigma, p, params: ParameterSet):
    """Analytic partials of 1/kappa w.r.t. (tr sigma, p)."""
    th = _theta(tr_sigma, p, params)
    dl = params.dlam2mu
    k = kappa(tr_sigma, p, params)
    if params.law == EXPONENTIAL:
        dk_dth = (params.k1 * params.k2 / (params.mu_f * dl)
                  * np.exp(params.k2 * th / dl))
    else:
        denom = dl - th
        dk_dth = (params.k1 / (dl * params.mu_f)
                  * (3.0 * th ** 2 * denom + 2.0 * th ** 3) / denom ** 3)
    dkinv_dth = -dk_dth / k ** 2
    dth_dtr = params.alpha
    dth_dp = params.c0 * dl + D * params.alpha ** 2
    return dkinv_dth * dth_dtr, dkinv_dth * dth_dp


# -- manufactured cases -------------------------------------------------------

@dataclass
class ManufacturedCase:
    """Closed-form fields of a benchmark problem.

    All callables take coordinate arrays ``(x, y)`` of a common shape and
    return arrays with field components in trailing axes: ``u -> (..., 2)``,
    ``sigma -> (..., 2, 2)``, ``grad_u -> (..., 2, 2)`` (du_i/dx_j),
    ``rho`` is the scalar entry rho_12 of the skew rotation tensor.
    """

    name: str
    params: ParameterSet
    geometry: str  # 'unit_square' or 'lshape'
    u: callable
    p: callable
    grad_u: callable
    grad_p: callable
    sigma: callable
    rho: callable
    phi: callable
    f: callable
    g: callable
    singular_corner: tuple | None = None

    def div_sigma(self, x, y):
        return -self.f(x, y)

    def div_phi(self, x, y):
        pr = self.params
        tr = np.trace(self.sigma(x, y), axis1=-2, axis2=-1)
        return (gamma_tilde(pr) * self.p(x, y)
                + pr.alpha / pr.dlam2mu * tr - self.g(x, y))

    # boundary data: the Dirichlet traces are the fields themselves;
    # Neumann data is evaluated from sigma and phi with the edge normal.
    def u_dirichlet(self, x, y):
        return self.u(x, y)

    def p_dirichlet(self, x, y):
        return self.p(x, y)

    def du_dirichlet_ds(self, x, y, s):
        """Tangential derivative of the displacement trace; s is (..., 2)."""
        return np.einsum("...ij,...j->...i", self.grad_u(x, y), s)

    def dp_dirichlet_ds(self, x, y, s):
        return np.einsum("...j,...j->...", self.grad_p(x, y), s)

    def traction(self, x, y, n):
        """sigma n on the Neumann boundary; n is (..., 2)."""
        return np.einsum("...ij,...j->...i", self.sigma(x, y), n)

    def normal_flux(self, x, y, n):
        return np.einsum("...j,...j->...", self.phi(x, y), n)


def _lambdify(args, expr):
    fn = sp.lambdify(args, expr, modules="numpy", cse=True)

    def wrapped(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.asarray(fn(x, y), dtype=float)
        if out.shape != x.shape:
            out = np.broadcast_to(out, x.shape).copy()
        return out

    return wrapped


def _lambdify_vector(args, exprs, shape):
    fns = [_lambdify(args, e) for e in exprs]

    def wrapped(x, y):
        x = np.asarray(x, dtype=float)
        comps = [np.broadcast_to(f(x, y), x.shape) for f in fns]
        out = np.stack(comps, axis=-1)
        return out.reshape(x.shape + shape)

    return wrapped


def _build_case(name, geometry, params, u_exprs, p_expr, xs, ys,
                singular_corner=None):
    """Derive all fields symbolically from (u, p) and the parameter set."""
    lam, mu, alpha = params.lam, params.mu, params.alpha
    dl = params.dlam2mu

    u1, u2 = u_exprs
    gu = sp.Matrix([[sp.diff(u1, xs), sp.diff(u1, ys)],
                    [sp.diff(u2, xs), sp.diff(u2, ys)]])
    eps = (gu + gu.T) / 2
    sigma = lam * eps.trace() * sp.eye(2) + 2 * mu * eps - alpha * p_expr * sp.eye(2)
    rho12 = (gu[0, 1] - gu[1, 0]) / 2
    theta = (params.c0 * dl + D * alpha ** 2) * p_expr + alpha * sigma.trace()
    if params.law == EXPONENTIAL:
        kap = (params.k0 + params.k1 * sp.exp(params.k2 * theta / dl)) / params.mu_f
    else:
        kap = (params.k0 / params.mu_f
               + params.k1 * theta ** 3 / (dl * params.mu_f * (dl - theta) ** 2))
    gp = sp.Matrix([sp.diff(p_expr, xs), sp.diff(p_expr, ys)])
    phi = kap * gp
    f = sp.Matrix([-sp.diff(sigma[0, 0], xs) - sp.diff(sigma[0, 1], ys),
                   -sp.diff(sigma[1, 0], xs) - sp.diff(sigma[1, 1], ys)])
    div_phi = sp.diff(phi[0], xs) + sp.diff(phi[1], ys)
    g = (params.c0 * p_expr + alpha / dl * sigma.trace()
         + D * alpha ** 2 / dl * p_expr - div_phi)

    args = (xs, ys)
    case = ManufacturedCase(
        name=name,
        params=params,
        geometry=geometry,
        u=_lambdify_vector(args, [u1, u2], (2,)),
        p=_lambdify(args, p_expr),
        grad_u=_lambdify_vector(args, [gu[0, 0], gu[0, 1], gu[1, 0], gu[1, 1]],
                                (2, 2)),
        grad_p=_lambdify_vector(args, [gp[0], gp[1]], (2,)),
        sigma=_lambdify_vector(
            args, [sigma[0, 0], sigma[0, 1], sigma[1, 0], sigma[1, 1]], (2, 2)),
        rho=_lambdify(args, rho12),
        phi=_lambdify_vector(args, [phi[0], phi[1]], (2,)),
        f=_lambdify_vector(args, [f[0], f[1]], (2,)),
        g=_lambdify(args, g),
        singular_corner=singular_corner,
    )
    return case


@lru_cache(maxsize=None)
def example1_case() -> ManufacturedCase:
    """Smooth trigonometric benchmark on the unit square (Kozeny-Carman)."""
    params = ParameterSet(lam=1.0, mu=1.0, alpha=0.1, c0=0.1, k0=0.1, k1=0.1,
                          k2=0.1, mu_f=1.0, law=KOZENY_CARMAN)
    xs, ys = sp.symbols("x y", real=True)
    u1 = sp.cos(sp.Rational(3, 2) * sp.pi * (xs + ys)) / 20
    u2 = sp.sin(sp.Rational(3, 2) * sp.pi * (xs - ys)) / 20
    p = sp.sin(sp.pi * xs) * sp.sin(sp.pi * ys)
    return _build_case("example1", "unit_square", params, (u1, u2), p, xs, ys)


CHI = 0.54448373  # corner singularity exponent for the 3*pi/2 reentrant angle
OMEGA = 3 * math.pi / 4  # half-opening of the reentrant material sector


@lru_cache(maxsize=None)
def example3_case() -> ManufacturedCase:
    """Singular L-shape benchmark with corner-concentrated gradients."""
    params = ParameterSet(lam=1e3, mu=10.0, alpha=0.25, c0=0.1, k0=0.5,
                          k1=0.1, k2=0.1, mu_f=0.1, law=KOZENY_CARMAN)
    lam, mu = params.lam, params.mu
    chi = CHI
    m2 = 2 * (lam + 2 * mu) / (mu + lam)
    m1 = -math.cos((chi + 1) * OMEGA) / math.cos((chi - 1) * OMEGA)

    xs, ys = sp.symbols("x y", real=True)
    r = sp.sqrt(xs ** 2 + ys ** 2)
    # atan2 branch cut lies on the excluded quadrant of the L-shape
    th = sp.atan2(ys, xs)
    # wedge angle measured from the bisector of the reentrant sector, so the
    # radial/tangential displacement components solve the momentum balance
    # with zero elastic body force (chi is the root of sin(2*omega*chi) =
    # -chi*sin(2*omega) for the half-opening omega = 3*pi/4)
    tw = th - sp.pi / 4
    u_r = r ** chi / (2 * mu) * (
        -(chi + 1) * sp.cos((chi + 1) * tw)
        + (m2 - chi - 1) * m1 * sp.cos((chi - 1) * tw))
    u_t = r ** chi / (2 * mu) * (
        (chi + 1) * sp.sin((chi + 1) * tw)
        + (m2 + chi - 1) * m1 * sp.sin((chi - 1) * tw))
    u1 = u_r * sp.cos(th) - u_t * sp.sin(th)
    u2 = u_r * sp.sin(th) + u_t * sp.cos(th)
    p = r ** sp.Rational(1, 3) * sp.sin((sp.pi / 2 + th) / 3)
    case = _build_case("example3", "lshape", params, (u1, u2), p, xs, ys,
                       singular_corner=(0.0, 0.0))

    # r = 0: u and p extend by their limit value 0 (chi > 0)
    for attr in ("u", "p"):
        inner = getattr(case, attr)

        def guarded(x, y, _inner=inner, _vec=(attr == "u")):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            origin = (x == 0.0) & (y == 0.0)
            if not origin.any():
                return _inner(x, y)
            xs_ = np.where(origin, 1.0, x)
            out = _inner(xs_, y)
            out[origin] = 0.0
            return out

        setattr(case, attr, guarded)
    return case


def constant_state_case(params: ParameterSet, A=((0.02, 0.01), (-0.015, 0.03)),
                        p_const=0.7, u0=(0.0, 0.0),
                        geometry="unit_square") -> ManufacturedCase:
    """Patch-test case: u = u0 + A x, constant p; all fields lie in the
    discrete spaces (displacement up to its cellwise average).  With A = 0
    every estimator residual vanishes identically as well."""
    A = np.asarray(A, dtype=float)
    xs, ys = sp.symbols("x y", real=True)
    u1 = u0[0] + A[0, 0] * xs + A[0, 1] * ys
    u2 = u0[1] + A[1, 0] * xs + A[1, 1] * ys
    p = sp.Float(p_const)
    return _build_case("constant_state", geometry, params, (u1, u2), p, xs, ys)


def zero_case(params: ParameterSet, geometry="unit_square") -> ManufacturedCase:
    """Homogeneous data (custom runs on user meshes)."""
    xs, ys = sp.symbols("x y", real=True)
    return _build_case("zero", geometry, params,
                       (sp.Integer(0), sp.Integer(0)), sp.Integer(0), xs, ys)
