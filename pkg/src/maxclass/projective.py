"""Curves of Lagrangian subspaces and the projective structure they
induce on characteristic curves.

The reduced curve of a regular covector lives in a 2m-dimensional
symplectic quotient; in a symplectic chart it becomes a curve t -> S(t)
of symmetric matrices with S(0) = 0.  Matrix cross-ratios of four
sections, the generating function built from them, and its density rho
are the invariants computed here.

Number cross-ratio convention, used everywhere:

    [t1, t2, t3, t4] = (t1 - t2)(t3 - t4) / ((t1 - t4)(t3 - t2))

so [0, 1, 2, 3] = -1/3.  The Schwarzian derivative is normalized as

    S(psi) = (1/2) psi'''/psi' - (3/4) (psi''/psi')^2

(half the classical one), which makes rho transform with the bare
Schwarzian kernel (k/3) S(psi) under reparameterization.
"""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .distributions import Distribution2
from .errors import (
    InputError,
    StepInstabilityError,
    StratumError,
    WindowError,
)
from .fields import flow
from .linalg import null_space_of, rank_decide
from .symplectic import (
    CotangentPoint,
    _jsub_basis_pointwise,
    hamiltonian_lift,
    symplectic_matrix,
)


class GrassCurve:
    """A curve of m-dimensional subspaces in chart form t -> S(t),
    S symmetric m x m, defined on a window around 0.

    weight is the vanishing order of det(S(t) - S(s)) on the diagonal
    (m^2 for reduced curves of regular covectors; synthetic curves may
    carry other weights)."""

    def __init__(self, sampler, m, weight, window, label="curve"):
        a, b = float(window[0]), float(window[1])
        if not a < b:
            raise InputError("window must be an increasing pair")
        self._sampler = sampler
        self.m = int(m)
        self.weight = int(weight)
        self.window = (a, b)
        self.label = label
        self._cache = {}

    def S(self, t):
        t = float(t)
        a, b = self.window
        if not (a <= t <= b):
            raise WindowError(
                f"t = {t:g} outside the window [{a:g}, {b:g}] of {self.label}"
            )
        hit = self._cache.get(t)
        if hit is None:
            hit = np.asarray(self._sampler(t), dtype=float)
            self._cache[t] = hit
        return hit

    def pullback(self, phi, window, label=None):
        """The reparameterized curve tau -> S(phi(tau))."""
        return GrassCurve(
            lambda tau: self.S(phi(tau)), self.m, self.weight, window,
            label or f"{self.label} pulled back",
        )


# ---------------------------------------------------------------------------
# the reduced curve of a covector


def _darboux_completion(U, Shat):
    """Complete a Lagrangian frame U (2m x m, orthonormal columns) to a
    symplectic frame T = [U | V] with T^T Shat T in canonical block
    form."""
    SU = Shat @ U
    G = SU.T @ SU
    V2 = -SU @ np.linalg.inv(G)
    K = V2.T @ Shat @ V2
    V = V2 + U @ (K / 2.0)
    return np.concatenate([U, V], axis=1)


def jacobi_curve(D: Distribution2, lam: CotangentPoint, window=None) -> GrassCurve:
    """The reduced curve of subspaces along the characteristic curve of
    a regular covector, in matrix chart form with S(0) = 0.

    The ambient space is the symplectic quotient of {tangent to the
    annihilator of the square, skew-orthogonal to the fiber direction}
    by the plane spanned by the fiber direction and the characteristic
    direction; its dimension is 2m with m = n - 3.
    """
    lift = hamiltonian_lift(D)
    n = D.dim
    m = n - 3
    if m < 1:
        raise InputError("reduced curves need dimension at least 4")
    z0 = lam.full()
    h, _, grads = lift.point_data(z0)
    scale = max(1.0, float(np.max(np.abs(grads))))
    if float(np.max(np.abs(h))) > 1e-8 * scale:
        raise InputError("covector does not annihilate the square at its point")

    e0 = np.concatenate([np.zeros(n), z0[n:]])
    S = symplectic_matrix(n)
    H0 = np.asarray(lift.H.at(lam.as_point()), dtype=float)
    speed = float(np.linalg.norm(H0))
    if speed < 1e-12:
        raise StratumError("characteristic field vanishes at the covector")

    rows = np.vstack([grads, e0 @ S])
    r, _ = rank_decide(rows, context="reduction constraints")
    if r != 4:
        raise StratumError("reduction constraints are dependent at this covector")
    Sig0 = null_space_of(rows, context="skew-orthogonal slice")
    Q = Sig0.basis  # (2n, 2n-4)
    for v, what in ((e0, "fiber direction"), (H0, "characteristic direction")):
        res = np.linalg.norm(v - Q @ (Q.T @ v)) / max(1.0, np.linalg.norm(v))
        if res > 1e-8:
            raise StratumError(f"{what} escapes the slice (residual {res:.2e})")

    Ebar = Q.T @ e0
    Hbar = Q.T @ H0
    Qr = null_space_of(np.vstack([Ebar, Hbar]), context="reduction quotient").basis
    if Qr.shape[1] != 2 * m:
        raise StratumError(
            f"quotient has dim {Qr.shape[1]}, expected {2 * m}"
        )
    shat = (Q @ Qr).T @ S @ (Q @ Qr)
    shat = (shat - shat.T) / 2.0
    smin = float(np.linalg.svd(shat, compute_uv=False)[-1])
    if smin < 1e-8:
        raise StratumError("reduced symplectic form is close to degenerate")

    def reduced_coords(t):
        if t == 0.0:
            zt, Jt = z0, np.eye(2 * n)
        else:
            # chart samples feed log-determinant differences, which
            # amplify transport error by 1/h^3; keep it near roundoff
            fr = flow(lift.H, lam.as_point(), t, tol=1e-14)
            zt = np.asarray([float(c) for c in fr.point.coords])
            Jt = fr.differential
        B = _jsub_basis_pointwise(lift, zt)
        W = np.linalg.solve(Jt, B)
        C = Q.T @ W
        drift = float(np.max(np.abs(W - Q @ C))) / max(
            1.0, float(np.max(np.abs(W)))
        )
        if drift > 1e-6:
            raise WindowError(
                f"transported fiber drifts off the slice at t = {t:g} "
                f"(residual {drift:.2e}); shrink the window"
            )
        Cr = Qr.T @ C
        U, s, _ = np.linalg.svd(Cr)
        rk = int(np.sum(s > 1e-7 * s[0]))
        if rk != m:
            raise StratumError(
                f"reduced fiber has rank {rk} at t = {t:g}, expected {m}"
            )
        return U[:, :m]

    U0 = reduced_coords(0.0)
    iso = float(np.max(np.abs(U0.T @ shat @ U0)))
    if iso > 1e-8:
        raise StratumError(
            f"reduced fiber is not isotropic (residual {iso:.2e})"
        )
    T = _darboux_completion(U0, shat)
    Jcan = np.zeros((2 * m, 2 * m))
    Jcan[:m, m:] = np.eye(m)
    Jcan[m:, :m] = -np.eye(m)
    if float(np.max(np.abs(T.T @ shat @ T - Jcan))) > 1e-10:
        raise StratumError("symplectic frame completion failed")
    Tinv = -Jcan @ T.T @ shat

    def sampler(t):
        XY = Tinv @ reduced_coords(t)
        X, Y = XY[:m], XY[m:]
        sv = np.linalg.svd(X, compute_uv=False)
        if sv[-1] < 1e-10 * max(1.0, sv[0]):
            raise WindowError(
                f"curve leaves the matrix chart at t = {t:g}; shrink the window"
            )
        St = Y @ np.linalg.inv(X)
        asym = float(np.max(np.abs(St - St.T))) / max(1.0, float(np.max(np.abs(St))))
        if asym > 1e-6:
            raise WindowError(
                f"chart matrix is not symmetric at t = {t:g} "
                f"(residual {asym:.2e}); shrink the window"
            )
        return (St + St.T) / 2.0

    if window is None:
        # wide enough that density estimates can use coarse offsets,
        # where the chart log-determinants are clean; the smallest
        # singular value of a chart difference scales like offset^(2m-1),
        # so higher-rank curves need proportionally more room
        w = max(1.0, 0.5 * m) / max(1.0, speed)
        # the default must be honest: shrink until the chart holds at
        # probe points across the whole span
        for _ in range(8):
            try:
                for frac in (1.0, 0.75, 0.5, 0.25):
                    sampler(frac * w)
                    sampler(-frac * w)
                break
            except (WindowError, StratumError):
                w *= 0.6
        else:
            raise WindowError(
                "no window around t = 0 keeps the reduced curve inside "
                "its matrix chart"
            )
        window = (-w, w)
    return GrassCurve(sampler, m, m * m, window, label="reduced curve")


# ---------------------------------------------------------------------------
# cross-ratios


def number_cross_ratio(t1, t2, t3, t4):
    """[t1, t2, t3, t4] = (t1 - t2)(t3 - t4) / ((t1 - t4)(t3 - t2))."""
    den = (t1 - t4) * (t3 - t2)
    if den == 0:
        raise InputError("cross-ratio of coincident points")
    return (t1 - t2) * (t3 - t4) / den


def _guarded_inv_apply(A, B, what):
    """A^{-1} B with a conditioning guard."""
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] < 1e-12 * max(1.0, sv[0]):
        raise WindowError(
            f"{what} is numerically singular (condition ~ {sv[0] / max(sv[-1], 1e-300):.1e}); "
            "the four points are too close or badly placed"
        )
    return np.linalg.solve(A, B)


def cross_ratio(S1, S2, S3, S4):
    """Matrix cross-ratio (S1-S4)^{-1} (S4-S3) (S3-S2)^{-1} (S2-S1).

    Its eigenvalues (and in particular its determinant) are invariant
    under the chart changes of the ambient symplectic space.
    """
    S1, S2, S3, S4 = (np.asarray(S, dtype=float) for S in (S1, S2, S3, S4))
    left = _guarded_inv_apply(S1 - S4, S4 - S3, "difference S1 - S4")
    right = _guarded_inv_apply(S3 - S2, S2 - S1, "difference S3 - S2")
    return left @ right


def cross_ratio_eigenvalues(S1, S2, S3, S4):
    """Eigenvalues of the matrix cross-ratio, sorted by (real, imag)."""
    ev = np.linalg.eigvals(cross_ratio(S1, S2, S3, S4))
    order = np.lexsort((ev.imag, ev.real))
    return ev[order]


def _slogdet_x(mat):
    """Sign and log of |det|, via pivoted elimination in long double.

    Chart differences of a rank-m curve are graded matrices whose
    singular values span ~2m-1 decades of the offset; double-precision
    factorizations lose eps * condition in relative accuracy, which is
    the limiting noise for the density estimates.  The entries
    themselves are accurate, so the extra mantissa bits recover the
    small determinants.  Matrices here are at most 4 x 4.
    """
    a = np.array(mat, dtype=np.longdouble)
    n = a.shape[0]
    sign = 1.0
    for j in range(n):
        p = j + int(np.argmax(np.abs(a[j:, j])))
        if a[p, j] == 0.0:
            return 0.0, float("-inf")
        if p != j:
            a[[j, p]] = a[[p, j]]
            sign = -sign
        for i in range(j + 1, n):
            a[i, j:] -= (a[i, j] / a[j, j]) * a[j, j:]
    d = np.diag(a)
    sign *= float(np.prod(np.sign(d)))
    return sign, float(np.sum(np.log(np.abs(d))))


def g_function(curve: GrassCurve, t1, t2, t3, t4):
    """The generating function of the curve at four window points:
    log-determinants of chart differences, with the number cross-ratio
    term removing the weight-k diagonal singularity."""
    k = curve.weight

    def ld(a, b):
        sign, mag = _slogdet_x(curve.S(a) - curve.S(b))
        if sign == 0:
            raise WindowError(
                f"difference S({a:g}) - S({b:g}) is singular"
            )
        return sign, mag

    s12, l12 = ld(t1, t2)
    s34, l34 = ld(t3, t4)
    s14, l14 = ld(t1, t4)
    s32, l32 = ld(t3, t2)
    R = number_cross_ratio(t1, t2, t3, t4)
    if s12 * s34 * s14 * s32 * (np.sign(R) ** k) != 1.0:
        raise WindowError(
            "generating function has a nonpositive argument at these points"
        )
    return l12 + l34 - l14 - l32 - k * np.log(abs(R))


# ---------------------------------------------------------------------------
# the density rho


def rho(curve: GrassCurve, t, h=None, rtol=1e-6):
    """The projective density of the curve at t.

    Mixed second difference of G(a, b) = ln|det(S(t+a) - S(t+b))|
    - k ln|a - b| over the rectangle {-h, h} x {-2h, 2h}, divided by
    8 h^2; the error expansion is even in h, so two Richardson levels
    extrapolate it and a third scale cross-checks the result.

    The log-determinants lose precision as the offsets shrink (the
    chart differences have singular values down to offset^(2m-1)),
    while large offsets cost truncation.  The estimate walks a dyadic
    ladder of steps downward from the window room and returns the first
    Richardson extrapolation confirmed either by raw agreement of an
    adjacent step pair or by agreement of two successive extrapolations,
    with a per-step roundoff estimate guarding against fake agreement;
    if nothing qualifies, the best mismatch is reported and raised.

    rtol sets the accepted agreement, relative to max(1, |value|).  The
    default asks for six digits; heavy curves (large weight, strong
    curvature) can saturate double precision above that, and a caller
    that only needs a coarser value should relax rtol rather than
    swallow the refusal.
    """
    a, b = curve.window
    t = float(t)
    if h is None:
        h = 0.01 * (b - a)
    room = min(t - a, b - t)
    if room <= 0:
        raise WindowError(f"t = {t:g} has no room inside the window")
    h = min(h, 0.45 * room)
    rtol = float(rtol)
    k = curve.weight

    def G(aa, bb):
        Sa, Sb = curve.S(t + aa), curve.S(t + bb)
        diff = Sa - Sb
        sign, mag = _slogdet_x(diff)
        if sign == 0:
            raise WindowError(
                f"difference of chart matrices singular near t = {t:g}"
            )
        sv = np.linalg.svd(diff, compute_uv=False)
        # chart entries carry roundoff at eps * their own size, and the
        # log-determinant amplifies it by the smallest singular value
        scale = max(float(np.max(np.abs(Sa))), float(np.max(np.abs(Sb))), float(sv[0]))
        return mag - k * np.log(abs(aa - bb)), 2.2e-16 * scale / float(sv[-1])

    def rho_h(hh):
        terms = [G(hh, 2 * hh), G(hh, -2 * hh), G(-hh, 2 * hh), G(-hh, -2 * hh)]
        num = terms[0][0] - terms[1][0] - terms[2][0] + terms[3][0]
        noise = max(tt[1] for tt in terms) / (2.0 * hh * hh)
        return num / (8.0 * hh * hh), noise

    floor = min(h / 4.0, 0.45 * room / 256.0)
    hs = [0.45 * room]
    while hs[-1] / 2.0 >= floor and len(hs) < 12:
        hs.append(hs[-1] / 2.0)
    while len(hs) < 2:
        hs.append(hs[-1] / 2.0)
    vals = []
    for hh in hs:
        try:
            vals.append(rho_h(hh))
        except WindowError:
            vals.append(None)  # coarse offsets may leave the chart
    def rich(j):
        return (4.0 * vals[j + 1][0] - vals[j][0]) / 3.0

    best = None
    # walk coarse to fine, so the noise-dominated fine end of the ladder
    # is never reached on curves that resolve early; accept either raw
    # agreement of an adjacent pair (flat curves resolve at the coarse,
    # quiet end) or agreement of two pair extrapolations (curved quiet
    # curves resolve their h^2 term long before the raw values meet);
    # mismatches within the roundoff envelope count as agreement, since
    # no finer step can do better
    for j in range(len(hs) - 1):
        if vals[j] is None or vals[j + 1] is None:
            continue
        (va, _), (vb, nb) = vals[j], vals[j + 1]
        miss = abs(va - vb)
        tol = rtol * max(1.0, abs(vb))
        if nb <= 50.0 * tol:
            if best is None or miss < best[0]:
                best = (miss, rich(j), hs[j + 1])
            if miss <= max(tol, 3.0 * nb):
                return rich(j)
        if j + 2 < len(hs) and vals[j + 2] is not None:
            nc = vals[j + 2][1]
            rmiss = abs(rich(j) - rich(j + 1))
            rtol2 = rtol * max(1.0, abs(rich(j + 1)))
            if nc > 50.0 * rtol2:
                continue
            if best is None or rmiss < best[0]:
                best = (rmiss, rich(j + 1), hs[j + 2])
            if rmiss <= max(rtol2, 3.0 * nc):
                return rich(j + 1)
    if best is None:
        raise WindowError(
            f"no usable step for the density estimate at t = {t:g}: every "
            "ladder step either leaves the matrix chart or sits below the "
            "roundoff guard; move t inward or widen the window"
        )
    miss, val, hused = best
    raise StepInstabilityError(
        f"density estimates disagree at t = {t:g}: best mismatch {miss:.3g} "
        f"at step {hused:.3g} (value {val:.6g}); the window may be too small"
    )


def zero_order(curve: GrassCurve, t=None, hi=None, points: int = 13):
    """Vanishing order of det(S(t + d) - S(t)) as d -> 0, by the slope
    of a log-log fit over one decade of offsets; equals the curve's
    weight on regular curves."""
    a, b = curve.window
    if t is None:
        t = 0.0 if a < 0.0 < b else 0.5 * (a + b)
    t = float(t)
    room = max(b - t, t - a)
    side = 1.0 if b - t >= t - a else -1.0
    if hi is None:
        hi = 0.5 * room
    if hi <= 0:
        raise WindowError("no room for offsets inside the window")
    S0 = curve.S(t)

    def sample(lo_, hi_):
        # keep only offsets whose chart difference stands clear of the
        # determinant noise floor: the smallest singular value must beat
        # the entry-level roundoff of the sampling pipeline by a margin
        clean, smallest_clean = [], None
        for d in np.geomspace(lo_, hi_, points):
            Sd = curve.S(t + side * d)
            diff = Sd - S0
            sign, mag = np.linalg.slogdet(diff)
            sv = np.linalg.svd(diff, compute_uv=False)
            floor = 2.2e-16 * max(1.0, float(np.max(np.abs(Sd))))
            if sign != 0.0 and float(sv[-1]) > 30.0 * floor:
                clean.append((d, mag))
                if smallest_clean is None:
                    smallest_clean = d
        return clean, smallest_clean

    rows, lo_clean = sample(hi / 10.0, hi)
    if len(rows) < points:
        # the low end of the decade sits on the noise floor; slide the
        # sampling range outward as far as the window allows
        lo2 = lo_clean if lo_clean is not None else hi / 3.0
        rows, _ = sample(lo2, max(min(0.9 * room, 10.0 * lo2), 2.0 * lo2))
    if len(rows) < 8:
        raise StepInstabilityError(
            "vanishing-order fit has too few offsets above the "
            "determinant noise floor; widen the window or move t"
        )
    ds = np.asarray([r[0] for r in rows])
    logs = np.asarray([r[1] for r in rows])
    if float(ds[-1] / ds[0]) < 4.0:
        raise StepInstabilityError(
            "usable offsets span less than a decade; vanishing-order "
            "estimate would be unreliable"
        )
    # log|det| = k ln d + C + e1 d + e2 d^2 + ...; fitting the smooth
    # correction terms directly removes the slope bias a bare decade fit
    # picks up from them
    X = np.vstack([np.log(ds), np.ones_like(ds), ds, ds * ds]).T
    coef, *_ = np.linalg.lstsq(X, logs, rcond=None)
    resid = float(np.max(np.abs(X @ coef - logs)))
    if resid > 0.15:
        raise StepInstabilityError(
            f"log-log fit for the vanishing order is poor "
            f"(max residual {resid:.3g} log units)"
        )
    return float(coef[0])


# ---------------------------------------------------------------------------
# maps of the line: Mobius, smooth, and projectivizing charts


class MobiusMap:
    """t -> (a t + b) / (c t + d), ad - bc != 0."""

    __slots__ = ("a", "b", "c", "d")

    def __init__(self, a, b, c, d):
        if a * d - b * c == 0:
            raise InputError("degenerate coefficient matrix")
        self.a, self.b, self.c, self.d = (float(v) for v in (a, b, c, d))

    def __call__(self, t):
        den = self.c * t + self.d
        if den == 0:
            raise WindowError(f"map has a pole at t = {t:g}")
        return (self.a * t + self.b) / den

    def derivatives3(self, t):
        den = self.c * t + self.d
        if den == 0:
            raise WindowError(f"map has a pole at t = {t:g}")
        delta = self.a * self.d - self.b * self.c
        f = (self.a * t + self.b) / den
        f1 = delta / den ** 2
        f2 = -2.0 * self.c * delta / den ** 3
        f3 = 6.0 * self.c ** 2 * delta / den ** 4
        return f, f1, f2, f3

    def inverse(self):
        return MobiusMap(self.d, -self.b, -self.c, self.a)

    def compose(self, other):
        """self after other."""
        if isinstance(other, MobiusMap):
            return MobiusMap(
                self.a * other.a + self.b * other.c,
                self.a * other.b + self.b * other.d,
                self.c * other.a + self.d * other.c,
                self.c * other.b + self.d * other.d,
            )
        return SmoothMap1D.of(other).rcompose(self)


def _faa_di_bruno3(outer, inner):
    """Third-order jet of outer after inner from the two jets."""
    g, g1, g2, g3 = inner
    f, f1, f2, f3 = outer
    return (
        f,
        f1 * g1,
        f2 * g1 ** 2 + f1 * g2,
        f3 * g1 ** 3 + 3.0 * f2 * g1 * g2 + f1 * g3,
    )


class SmoothMap1D:
    """A map of an interval carrying derivatives to third order.

    Wraps either closed-form derivative callables or a plain function
    (whose derivatives then come from central differences at accuracy
    ~1e-8, documented for callers needing tight Schwarzian bounds)."""

    def __init__(self, fn, derivs=None):
        self._fn = fn
        self._derivs = derivs

    @classmethod
    def of(cls, obj):
        if isinstance(obj, SmoothMap1D):
            return obj
        if hasattr(obj, "derivatives3"):
            return cls(obj, obj.derivatives3)
        if callable(obj):
            return cls(obj)
        raise InputError("not a map of the line")

    def __call__(self, t):
        return self._fn(t)

    def derivatives3(self, t):
        if self._derivs is not None:
            return self._derivs(t)
        # central differences at the roundoff/truncation balance point
        # for the third derivative; accuracy ~1e-6 in the last entry
        f = self._fn
        h = 1e-3 * max(1.0, abs(t))
        v = [f(t + j * h) for j in (-2, -1, 0, 1, 2)]
        d1 = (8.0 * (v[3] - v[1]) - (v[4] - v[0])) / (12.0 * h)
        d2 = (-v[4] + 16.0 * v[3] - 30.0 * v[2] + 16.0 * v[1] - v[0]) / (
            12.0 * h ** 2
        )
        d3 = (v[4] - 2.0 * v[3] + 2.0 * v[1] - v[0]) / (2.0 * h ** 3)
        return v[2], d1, d2, d3

    def compose(self, other):
        """self after other."""
        other = SmoothMap1D.of(other)

        def derivs(t):
            gj = other.derivatives3(t)
            fj = self.derivatives3(gj[0])
            return _faa_di_bruno3(fj, gj)

        return SmoothMap1D(lambda t: self._fn(other(t)), derivs)

    def rcompose(self, outer):
        """outer after self."""
        return SmoothMap1D.of(outer).compose(self)


def schwarzian(psi, t):
    """(1/2) psi'''/psi' - (3/4)(psi''/psi')^2 at t (half the classical
    normalization)."""
    m = SmoothMap1D.of(psi)
    _, f1, f2, f3 = m.derivatives3(t)
    if f1 == 0:
        raise WindowError(f"map is critical at t = {t:g}")
    r = f2 / f1
    return 0.5 * f3 / f1 - 0.75 * r * r


class ProjectiveMap:
    """A projectivizing chart psi with S(psi) equal to a prescribed
    coefficient function, built from two solutions of u'' = -q u.

    psi(t0) = 0, psi'(t0) = 1, psi''(t0) = 0; psi is strictly increasing
    on its window."""

    def __init__(self, sol1, sol2, q, window, t0):
        self._u1 = sol1
        self._u2 = sol2
        self._q = q
        self.window = window
        self.t0 = float(t0)

    def _u(self, t):
        u1, du1 = self._u1(t)
        u2, du2 = self._u2(t)
        return u1, du1, u2, du2

    def __call__(self, t):
        u1, _, u2, _ = self._u(t)
        if u2 == 0:
            raise WindowError(f"chart pole at t = {t:g}; shrink the window")
        return u1 / u2

    def derivatives3(self, t):
        u1, _, u2, du2 = self._u(t)
        if u2 == 0:
            raise WindowError(f"chart pole at t = {t:g}; shrink the window")
        f = u1 / u2
        f1 = 1.0 / u2 ** 2
        f2 = -2.0 * du2 / u2 ** 3
        f3 = 2.0 * self._q(t) / u2 ** 2 + 6.0 * du2 ** 2 / u2 ** 4
        return f, f1, f2, f3

    def image(self):
        a, b = self.window
        return self(a), self(b)

    def inverse_at(self, tau):
        a, b = self.window
        lo, hi = self(a), self(b)
        if not (lo <= tau <= hi):
            raise WindowError(f"value {tau:g} outside the chart image")
        return brentq(lambda t: self(t) - tau, a, b, xtol=1e-13)

    def inverse_fn(self):
        return self.inverse_at


def projectivize(curve: GrassCurve, t0=None, nodes: int = 33) -> ProjectiveMap:
    """A chart psi on the curve's window whose Schwarzian matches
    (3/k) rho; in the new parameter tau = psi(t) the curve's density
    vanishes.

    rho is sampled on an inset grid, interpolated by a cubic spline, and
    u'' = -q u is integrated to both window ends with dense output.
    """
    a, b = curve.window
    if t0 is None:
        t0 = 0.5 * (a + b)
    t0 = float(t0)
    if not (a < t0 < b):
        raise InputError("t0 must lie inside the window")
    L = b - a
    margin = 0.05 * L
    grid = np.linspace(a + margin, b - margin, nodes)
    k = curve.weight
    vals = np.array([rho(curve, tg) for tg in grid])
    spline = CubicSpline(grid, (3.0 / k) * vals)

    def q(t):
        return float(spline(np.clip(t, grid[0], grid[-1])))

    def rhs(t, y):
        return [y[1], -q(t) * y[0]]

    sols = {}
    for key, y0 in (("u1", [0.0, 1.0]), ("u2", [1.0, 0.0])):
        parts = []
        for tend in (a, b):
            if tend == t0:
                continue
            out = solve_ivp(
                rhs, (t0, tend), y0, method="DOP853", dense_output=True,
                rtol=1e-12, atol=1e-14,
            )
            if not out.success:
                raise StepInstabilityError(
                    f"chart integration failed: {out.message}"
                )
            parts.append(out.sol)
        sols[key] = parts

    def make_eval(parts, y0):
        def ev(t):
            if t == t0:
                return y0[0], y0[1]
            sol = parts[0] if t < t0 else parts[-1]
            v = sol(t)
            return float(v[0]), float(v[1])
        return ev

    u1 = make_eval(sols["u1"], [0.0, 1.0])
    u2 = make_eval(sols["u2"], [1.0, 0.0])

    ts = np.linspace(a, b, 257)
    u2vals = np.array([u2(t)[0] for t in ts])
    if np.any(u2vals <= 0.0):  # u2(t0) = 1, so any nonpositive value is a pole
        raise WindowError(
            "projectivizing chart degenerates inside the window; shrink it"
        )
    wr = max(
        abs(u1(t)[1] * u2(t)[0] - u1(t)[0] * u2(t)[1] - 1.0)
        for t in ts[:: 16]
    )
    if wr > 1e-9:
        raise StepInstabilityError(
            f"chart solutions lost their normalization (drift {wr:.2e})"
        )
    return ProjectiveMap(u1, u2, q, (a, b), t0)
