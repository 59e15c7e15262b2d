"""Utility families certified against a reference marginal.

Families on the real line are compared with an exponential marginal
exp(-alpha*x); families on the positive half-line with a power marginal
x**(p-1).  Every family here keeps its ratio to the reference marginal of
the parametric form

    F(x) = 1 + shift + amp * sin(freq * z),    z = x  or  z = log x,

which is closed under the mixing construction used for the power families
and gives exact antiderivatives, so values, marginals and conjugates never
rely on numerical quadrature (tests cross-check against quadrature).  The
(shift, amp) pair yields hard two-sided ratio certificates
lower = 1 + shift - |amp| and upper = 1 + shift + |amp|.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "UtilityOnR", "UtilityOnRPlus", "UtilityField",
    "make_exponential", "make_perturbed_exponential",
    "make_power", "make_perturbed_power", "make_power_family_member",
    "shifted_inverse_mix", "rescale_to_unit_alpha",
    "certify_ratio_bounds", "conjugate_sandwich_audit",
    "RatioCertificate", "SandwichAudit",
]


def _maybe_scalar(out, like):
    if np.isscalar(like) or (isinstance(like, np.ndarray) and like.ndim == 0):
        return float(out)
    return out


def _exp_sine_integral(x, alpha, omega):
    # int_0^x exp(-alpha*s) sin(omega*s) ds
    e = np.exp(-alpha * x)
    return (omega - e * (alpha * np.sin(omega * x) + omega * np.cos(omega * x))) \
        / (alpha * alpha + omega * omega)


def _power_logsine_integral(x, p, nu):
    # int_1^x s**(p-1) sin(nu*log s) ds
    lx = np.log(x)
    xp = np.power(x, p)
    return (xp * (p * np.sin(nu * lx) - nu * np.cos(nu * lx)) + nu) / (p * p + nu * nu)


def _bracketed_root(f, fprime, lo, hi, iters: int = 100):
    """Solve f(x) = 0 componentwise for strictly decreasing f with f(lo) >= 0 >= f(hi).

    Newton steps safeguarded by the shrinking bracket; falls back to bisection
    whenever the Newton candidate leaves the bracket.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    x = 0.5 * (lo + hi)
    for _ in range(iters):
        fx = f(x)
        pos = fx > 0.0
        lo = np.where(pos, x, lo)
        hi = np.where(pos, hi, x)
        dfx = fprime(x)
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = x - fx / dfx
        inside = np.isfinite(xn) & (xn > lo) & (xn < hi)
        x_new = np.where(inside, xn, 0.5 * (lo + hi))
        if np.all(np.abs(x_new - x) <= 1e-16 * (1.0 + np.abs(x_new))):
            x = x_new
            break
        x = x_new
    return x


# ----------------------------------------------------------------------
# utilities on the real line


@dataclass(frozen=True)
class UtilityOnR:
    """Utility on R whose marginal is a certified perturbation of exp(-alpha*x).

    marginal U'(x) = F(x) * exp(-alpha*x) with F(x) = 1 + shift + amp*sin(omega*x),
    and certified bounds lower <= F <= upper.  `value_at_zero` anchors the
    utility itself (the marginal determines U only up to a constant).
    """

    alpha: float
    shift: float = 0.0
    amp: float = 0.0
    omega: float = 0.0
    value_at_zero: float | None = None

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError("risk aversion alpha must be positive")
        if self.value_at_zero is None:
            object.__setattr__(self, "value_at_zero", -1.0 / self.alpha)

    # -- certificate ----------------------------------------------------
    @property
    def lower(self) -> float:
        return 1.0 + self.shift - abs(self.amp)

    @property
    def upper(self) -> float:
        return 1.0 + self.shift + abs(self.amp)

    @property
    def f_bound(self) -> float:
        """Certified sup |F - 1|."""
        return abs(self.shift) + abs(self.amp)

    @property
    def g_bound(self) -> float:
        """Distance |alpha - 1| of the reference risk aversion from 1."""
        return abs(self.alpha - 1.0)

    # -- evaluators -----------------------------------------------------
    def ratio(self, x):
        x = np.asarray(x, dtype=float)
        out = 1.0 + self.shift + self.amp * np.sin(self.omega * x)
        return _maybe_scalar(out, x)

    def ratio_slope(self, x):
        x = np.asarray(x, dtype=float)
        return _maybe_scalar(self.amp * self.omega * np.cos(self.omega * x), x)

    def marginal(self, x):
        x = np.asarray(x, dtype=float)
        out = (1.0 + self.shift + self.amp * np.sin(self.omega * x)) * np.exp(-self.alpha * x)
        return _maybe_scalar(out, x)

    def curvature(self, x):
        """Second derivative U''(x)."""
        x = np.asarray(x, dtype=float)
        F = 1.0 + self.shift + self.amp * np.sin(self.omega * x)
        dF = self.amp * self.omega * np.cos(self.omega * x)
        return _maybe_scalar((dF - self.alpha * F) * np.exp(-self.alpha * x), x)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        out = self.value_at_zero \
            + (1.0 + self.shift) * (1.0 - np.exp(-self.alpha * x)) / self.alpha
        if self.amp != 0.0:
            out = out + self.amp * _exp_sine_integral(x, self.alpha, self.omega)
        return _maybe_scalar(out, x)

    @property
    def value_at_inf(self) -> float:
        """sup_x U(x), the x -> +inf limit of the anchored utility."""
        out = self.value_at_zero + (1.0 + self.shift) / self.alpha
        if self.amp != 0.0:
            out += self.amp * self.omega / (self.alpha ** 2 + self.omega ** 2)
        return float(out)

    def inverse_marginal(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0.0):
            raise ValueError("inverse marginal needs y > 0")
        if self.amp == 0.0:
            out = -np.log(y / (1.0 + self.shift)) / self.alpha
            return _maybe_scalar(out, y)
        # certified bracket from lower <= F <= upper
        lo = -np.log(y / self.lower) / self.alpha
        hi = -np.log(y / self.upper) / self.alpha
        yv = np.atleast_1d(y)
        root = _bracketed_root(lambda x: self.marginal(x) - yv, self.curvature,
                               np.broadcast_to(lo, yv.shape), np.broadcast_to(hi, yv.shape))
        return _maybe_scalar(root.reshape(np.shape(y)), y)

    def conjugate(self, y):
        """V(y) = sup_x (U(x) - x*y); V(0) is the supremum of U."""
        y = np.asarray(y, dtype=float)
        yv = np.atleast_1d(y).astype(float)
        out = np.empty_like(yv)
        zero = yv == 0.0
        if np.any(yv < 0.0):
            raise ValueError("conjugate is defined for y >= 0")
        out[zero] = self.value_at_inf
        if np.any(~zero):
            x = self.inverse_marginal(yv[~zero])
            out[~zero] = self.value(x) - yv[~zero] * x
        return _maybe_scalar(out.reshape(np.shape(y)), y)

    def conjugate_prime(self, y):
        return _maybe_scalar(-np.asarray(self.inverse_marginal(y)), y)

    def conjugate_curvature(self, y):
        x = self.inverse_marginal(y)
        return _maybe_scalar(-1.0 / np.asarray(self.curvature(x)), y)


def make_exponential(alpha: float) -> UtilityOnR:
    """Exponential utility -(1/alpha) * exp(-alpha*x)."""
    return UtilityOnR(alpha=float(alpha))


def make_perturbed_exponential(delta: float, alpha: float = 1.0, kind: str = "sine",
                               a: float = 0.2, omega: float = 1.0,
                               value_at_zero: float | None = None) -> UtilityOnR:
    """Certified perturbation of the exponential marginal.

    kind 'sine' uses F(x) = 1 + a*delta*sin(omega*x); kind 'constant-shift'
    uses F(x) = 1 + a*delta.  Construction fails when the perturbation is
    large enough to break strict monotonicity of the marginal or positivity
    of the ratio.
    """
    delta = float(delta)
    alpha = float(alpha)
    if delta < 0.0:
        raise ValueError("delta must be nonnegative")
    size = a * delta
    if kind == "sine":
        if a < 0.0:
            raise ValueError("sine amplitude a must be nonnegative")
        if size >= 1.0:
            raise ValueError("a*delta >= 1 leaves no positive ratio certificate")
        if size * omega >= alpha * (1.0 - size):
            raise ValueError("marginal monotonicity needs a*delta*omega < alpha*(1 - a*delta)")
        return UtilityOnR(alpha=alpha, amp=size, omega=float(omega),
                          value_at_zero=value_at_zero)
    if kind in ("constant-shift", "constant_shift"):
        if size >= 1.0 or size <= -1.0:
            raise ValueError("|a*delta| >= 1 leaves no positive ratio certificate")
        return UtilityOnR(alpha=alpha, shift=size, value_at_zero=value_at_zero)
    raise ValueError(f"unknown ratio kind {kind!r}")


def rescale_to_unit_alpha(u: UtilityOnR) -> UtilityOnR:
    """The normalized utility x -> alpha * U(x / alpha), whose reference risk aversion is 1."""
    return UtilityOnR(alpha=1.0, shift=u.shift, amp=u.amp, omega=u.omega / u.alpha,
                      value_at_zero=u.alpha * u.value_at_zero)


# ----------------------------------------------------------------------
# utilities on the positive half-line


@dataclass(frozen=True)
class UtilityOnRPlus:
    """Utility on (0, inf) whose marginal is a certified perturbation of x**(p-1).

    marginal U'(x) = F(x) * x**(p-1) with F(x) = 1 + shift + amp*sin(nu*log x)
    and certified bounds lower <= F <= upper.  `value_at_one` anchors U.
    """

    p: float
    shift: float = 0.0
    amp: float = 0.0
    nu: float = 0.0
    value_at_one: float | None = None

    def __post_init__(self):
        if self.p >= 0.0:
            raise ValueError("exponent p must be negative")
        if self.value_at_one is None:
            object.__setattr__(self, "value_at_one", 1.0 / self.p)

    @property
    def lower(self) -> float:
        return 1.0 + self.shift - abs(self.amp)

    @property
    def upper(self) -> float:
        return 1.0 + self.shift + abs(self.amp)

    @property
    def f_bound(self) -> float:
        return abs(self.shift) + abs(self.amp)

    def ratio(self, x):
        x = np.asarray(x, dtype=float)
        out = 1.0 + self.shift + self.amp * np.sin(self.nu * np.log(x))
        return _maybe_scalar(out, x)

    def marginal(self, x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self.ratio(x)) * np.power(x, self.p - 1.0)
        return _maybe_scalar(out, x)

    def curvature(self, x):
        x = np.asarray(x, dtype=float)
        F = np.asarray(self.ratio(x))
        dF = self.amp * self.nu * np.cos(self.nu * np.log(x)) / x
        out = dF * np.power(x, self.p - 1.0) + (self.p - 1.0) * F * np.power(x, self.p - 2.0)
        return _maybe_scalar(out, x)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        out = self.value_at_one + (1.0 + self.shift) * (np.power(x, self.p) - 1.0) / self.p
        if self.amp != 0.0:
            out = out + self.amp * _power_logsine_integral(x, self.p, self.nu)
        return _maybe_scalar(out, x)

    def inverse_marginal(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(y <= 0.0):
            raise ValueError("inverse marginal needs y > 0")
        expo = 1.0 / (self.p - 1.0)
        if self.amp == 0.0:
            out = np.power(y / (1.0 + self.shift), expo)
            return _maybe_scalar(out, y)
        lo = np.power(y / self.lower, expo)
        hi = np.power(y / self.upper, expo)
        yv = np.atleast_1d(y)
        root = _bracketed_root(lambda x: self.marginal(x) - yv, self.curvature,
                               np.broadcast_to(lo, yv.shape), np.broadcast_to(hi, yv.shape))
        return _maybe_scalar(root.reshape(np.shape(y)), y)

    @property
    def value_at_inf(self) -> float:
        """sup_x U(x), the x -> +inf limit of the anchored utility."""
        out = self.value_at_one - (1.0 + self.shift) / self.p
        if self.amp != 0.0:
            out += self.amp * self.nu / (self.p ** 2 + self.nu ** 2)
        return float(out)

    def conjugate(self, y):
        """V(y) = sup_x (U(x) - x*y); V(0) is the supremum of U."""
        y = np.asarray(y, dtype=float)
        yv = np.atleast_1d(y).astype(float)
        out = np.empty_like(yv)
        zero = yv == 0.0
        if np.any(yv < 0.0):
            raise ValueError("conjugate is defined for y >= 0")
        out[zero] = self.value_at_inf
        if np.any(~zero):
            x = self.inverse_marginal(yv[~zero])
            out[~zero] = self.value(x) - yv[~zero] * x
        return _maybe_scalar(out.reshape(np.shape(y)), y)

    def conjugate_prime(self, y):
        return _maybe_scalar(-np.asarray(self.inverse_marginal(y)), y)

    def conjugate_curvature(self, y):
        x = self.inverse_marginal(y)
        return _maybe_scalar(-1.0 / np.asarray(self.curvature(x)), y)


def make_power(p: float) -> UtilityOnRPlus:
    """Power utility x**p / p for p < 0."""
    return UtilityOnRPlus(p=float(p))


def _check_rplus_monotone(p: float, shift: float, amp: float, nu: float) -> None:
    low = 1.0 + shift - abs(amp)
    if low <= 0.0:
        raise ValueError("ratio certificate must stay positive")
    if abs(amp) * abs(nu) >= (1.0 - p) * low:
        raise ValueError("marginal monotonicity needs |amp|*nu < (1-p)*(ratio lower bound)")


def make_perturbed_power(p: float, b: float = 0.1, nu: float = 1.0,
                         value_at_one: float | None = None) -> UtilityOnRPlus:
    """Power marginal modulated by a log-periodic ratio 1 + b*sin(nu*log x)."""
    p = float(p)
    if p >= 0.0:
        raise ValueError("exponent p must be negative")
    _check_rplus_monotone(p, 0.0, b, nu)
    return UtilityOnRPlus(p=p, amp=float(b), nu=float(nu), value_at_one=value_at_one)


def shifted_inverse_mix(p0: float) -> Callable[[float], float]:
    """The canonical mixing weight fmix(p) = 1 / (1 - p + p0), equal to 1 at p0."""
    def fmix(p: float) -> float:
        return 1.0 / (1.0 - p + p0)
    return fmix


def make_power_family_member(base: UtilityOnRPlus, p: float,
                             fmix: Callable[[float], float]) -> UtilityOnRPlus:
    """Member at exponent p <= p0 of the family interpolating `base` toward pure power.

    The member's marginal is
        fmix(p) * x**(p - p0) * base_marginal(x) + (1 - fmix(p)) * x**(p-1),
    i.e. its ratio to x**(p-1) is fmix(p)*F_base + (1 - fmix(p)).  Certified
    bounds tighten accordingly: lower_p = fmix(p)*(lower-1)+1 and likewise for
    the upper bound.  The caller guarantees the family-level growth condition
    on fmix (bounded (1-p)*fmix(p) as p -> -inf); per-member positivity and
    marginal monotonicity are verified here.
    """
    p = float(p)
    p0 = base.p
    if p > p0:
        raise ValueError("family members need p <= p0")
    w0 = float(fmix(p0))
    if abs(w0 - 1.0) > 1e-12:
        raise ValueError("fmix(p0) must equal 1")
    w = float(fmix(p))
    if not (0.0 < w <= 1.0):
        raise ValueError("fmix(p) must lie in (0, 1]")
    shift = w * base.shift
    amp = w * base.amp
    _check_rplus_monotone(p, shift, amp, base.nu)
    return UtilityOnRPlus(p=p, shift=shift, amp=amp, nu=base.nu)


@dataclass(frozen=True)
class UtilityField:
    """A positive-half-line utility weighted by a bounded terminal factor.

    weights holds D_T per leaf; the objective is E[D_T * U(X_T)].  Bounds
    k1 <= D_T <= k2 with k1 > 0 are recorded at construction.
    """

    utility: UtilityOnRPlus
    weights: np.ndarray
    k1: float = field(init=False)
    k2: float = field(init=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "weights", w)
        if w.size == 0 or np.any(~np.isfinite(w)):
            raise ValueError("terminal weights must be finite and nonempty")
        k1, k2 = float(w.min()), float(w.max())
        if k1 <= 0.0:
            raise ValueError("terminal weights must be strictly positive")
        object.__setattr__(self, "k1", k1)
        object.__setattr__(self, "k2", k2)

    @staticmethod
    def from_claim(utility: UtilityOnRPlus, claim_values) -> "UtilityField":
        """Field with weights exp(B) for a bounded claim B given per leaf."""
        return UtilityField(utility, np.exp(np.asarray(claim_values, dtype=float)))


# ----------------------------------------------------------------------
# certification helpers


@dataclass(frozen=True)
class RatioCertificate:
    """Empirical ratio bounds of a marginal against its reference on a grid."""

    lower_hat: float
    upper_hat: float
    f_hat: float
    marginal_monotone: bool
    grid_min: float
    grid_max: float
    n_points: int


def certify_ratio_bounds(u, grid=None) -> RatioCertificate:
    """Empirical counterpart of the declared ratio certificate.

    Evaluates the ratio marginal/reference on a grid ([-20, 20] uniformly for
    real-line utilities, log-spaced on [1e-6, 1e4] for positive ones) and
    reports min, max, sup |ratio - 1| and a strict-monotonicity flag for the
    marginal itself.  Uses only the marginal evaluator, so it cross-checks
    the closed-form ratio.
    """
    if isinstance(u, UtilityOnRPlus):
        if grid is None:
            grid = np.logspace(-6.0, 4.0, 2001)
        ref = np.power(grid, u.p - 1.0)
    else:
        if grid is None:
            grid = np.linspace(-20.0, 20.0, 2001)
        ref = np.exp(-u.alpha * grid)
    grid = np.asarray(grid, dtype=float)
    mv = np.asarray(u.marginal(grid))
    ratio = mv / ref
    return RatioCertificate(
        lower_hat=float(ratio.min()),
        upper_hat=float(ratio.max()),
        f_hat=float(np.max(np.abs(ratio - 1.0))),
        marginal_monotone=bool(np.all(np.diff(mv) < 0.0)),
        grid_min=float(grid.min()),
        grid_max=float(grid.max()),
        n_points=int(grid.size),
    )


@dataclass(frozen=True)
class SandwichAudit:
    """Worst violation of the two-sided conjugate envelope on a y-grid."""

    max_violation: float
    worst_y: float
    n_points: int


def conjugate_sandwich_audit(u, ygrid=None) -> SandwichAudit:
    """Check the conjugate against its reference-conjugate envelope.

    With vtilde the conjugate of the reference utility (exponential or pure
    power) and bounds lower <= F <= upper, the conjugate must satisfy

        upper*vtilde(y/upper) + V(0) <= V(y) <= lower*vtilde(y/lower) + V(0)

    pointwise (V(0) is the supremum of U).  Returns the maximum violation of
    either side over the grid; for an exact reference member both sides
    collapse onto V and the violation is numerical noise.
    """
    if ygrid is None:
        ygrid = np.logspace(-3.0, 2.0, 200)
    ygrid = np.asarray(ygrid, dtype=float)
    if np.any(ygrid <= 0.0):
        raise ValueError("sandwich audit needs a positive y-grid")

    if isinstance(u, UtilityOnRPlus):
        q = u.p / (u.p - 1.0)

        def vtilde(y):
            return -np.power(y, q) / q
    else:
        def vtilde(y):
            return (y * np.log(y) - y) / u.alpha

    v0 = u.value_at_inf
    v = np.asarray(u.conjugate(ygrid))
    lo_env = u.upper * vtilde(ygrid / u.upper) + v0
    hi_env = u.lower * vtilde(ygrid / u.lower) + v0
    viol = np.maximum(lo_env - v, v - hi_env)
    k = int(np.argmax(viol))
    return SandwichAudit(max_violation=float(max(viol[k], 0.0)),
                         worst_y=float(ygrid[k]), n_points=int(ygrid.size))
