"""Symplectification: Hamiltonian lifts, the characteristic field, and
the extension tower that measures the class of a distribution.

Conventions, fixed once for the whole package:

* cotangent coordinates are (q, p) with p-names suffixed "__p";
* the symplectic pairing is sigma(v, w) = v_p . w_q - v_q . w_p, i.e.
  matrix [[0, -I], [I, 0]] acting on (q, p)-stacked vectors;
* the Hamiltonian field of f is X_f = (df/dp, -df/dq), and the Poisson
  bracket {f, g} = X_f(g) = f_p . g_q - f_q . g_p.

With h_i = p . X_i and h_3 = {h_1, h_2}, the square of the distribution
has annihilator S = {h_1 = h_2 = h_3 = 0}, and the field

    H = {h_2, h_3} X_{h_1} - {h_1, h_3} X_{h_2}

is tangent to S and spans the kernel of the restricted symplectic form
away from the annihilator of the cube.  Moving the fiber of S along H
and differentiating in t yields the tower of extensions whose dimension
increments count the class.
"""

from __future__ import annotations

import numpy as np

from .distributions import Distribution2, power_basis
from .errors import (
    InputError,
    RankInstabilityError,
    StepInstabilityError,
    StratumError,
)
from .expr import Chart, ChartPoint, add, diff, mul, neg, sub, var
from .fields import VecField, flow_series, flow_series_batch, lie_bracket
from .jets import compile_tape, run_float, run_series_batch, sb_div, sb_mul
from .linalg import (
    SubspaceFrame,
    ToleranceRecord,
    _emit,
    null_space_of,
    rank_decide,
)

# ---------------------------------------------------------------------------
# cotangent charts and points

_MOMENTUM_SUFFIX = "__p"
_COCHARTS: dict = {}


def cotangent_chart(base: Chart) -> Chart:
    """The chart of T*M over a base chart: base names then momenta."""
    hit = _COCHARTS.get(base.names)
    if hit is None:
        hit = Chart(base.names + tuple(nm + _MOMENTUM_SUFFIX for nm in base.names))
        _COCHARTS[base.names] = hit
    return hit


class CotangentPoint:
    """A covector: base-point coordinates q and momentum components p."""

    __slots__ = ("chart", "q", "p")

    def __init__(self, base_chart: Chart, q, p):
        q = tuple(float(v) for v in q)
        p = tuple(float(v) for v in p)
        if len(q) != base_chart.dim or len(p) != base_chart.dim:
            raise InputError("covector components do not match the chart")
        self.chart = base_chart
        self.q = q
        self.p = p

    @classmethod
    def from_full(cls, base_chart, z):
        n = base_chart.dim
        z = np.asarray(z, dtype=float)
        return cls(base_chart, z[:n], z[n:])

    def base_point(self) -> ChartPoint:
        return ChartPoint(self.chart, self.q)

    def as_point(self) -> ChartPoint:
        return ChartPoint(cotangent_chart(self.chart), self.q + self.p)

    def full(self):
        return np.array(self.q + self.p, dtype=float)

    def __repr__(self):
        return f"CotangentPoint(q={self.q}, p={self.p})"


def symplectic_matrix(n: int):
    """sigma(v, w) = v^T S w on (q, p)-stacked coordinates."""
    S = np.zeros((2 * n, 2 * n))
    S[:n, n:] = -np.eye(n)
    S[n:, :n] = np.eye(n)
    return S


# ---------------------------------------------------------------------------
# the lift


class HamiltonianLift:
    """Symbolic data of the symplectification of one distribution."""

    def __init__(self, D: Distribution2):
        self.D = D
        self.n = D.dim
        base = D.chart
        co = cotangent_chart(base)
        self.cochart = co
        n = self.n
        self.X3 = lie_bracket(D.X1, D.X2)
        self.base_fields = (D.X1, D.X2, self.X3)

        pvars = [var(nm + _MOMENTUM_SUFFIX) for nm in base.names]

        def momentum(Y):
            acc = None
            for pj, comp in zip(pvars, Y.comps):
                t = mul(pj, comp)
                acc = t if acc is None else add(acc, t)
            return acc

        self.h1 = momentum(D.X1)
        self.h2 = momentum(D.X2)
        self.h3 = momentum(self.X3)

        def poisson(f, g):
            acc = None
            for nm in base.names:
                pm = nm + _MOMENTUM_SUFFIX
                t = sub(
                    mul(diff(f, pm), diff(g, nm)),
                    mul(diff(f, nm), diff(g, pm)),
                )
                acc = t if acc is None else add(acc, t)
            return acc

        self._poisson = poisson
        self.h13 = poisson(self.h1, self.h3)
        self.h23 = poisson(self.h2, self.h3)

        def ham_field(f):
            comps = [diff(f, nm + _MOMENTUM_SUFFIX) for nm in base.names]
            comps += [neg(diff(f, nm)) for nm in base.names]
            return VecField(co, comps)

        self.ham_field = ham_field
        self.H = ham_field(self.h1).scale(self.h23) - ham_field(self.h2).scale(
            self.h13
        )
        self.euler = VecField(co, [0] * n + pvars)

        # pointwise data: h-values, the two regularity brackets, gradients
        outs = [self.h1, self.h2, self.h3, self.h13, self.h23]
        for h in (self.h1, self.h2, self.h3):
            outs.extend(diff(h, v) for v in co.names)
        self._pt_tape = compile_tape(outs, co.names)

        base_outs = []
        for Y in self.base_fields:
            base_outs.extend(Y.comps)
        self._base_tape = compile_tape(base_outs, base.names)
        jac_outs = []
        for Y in self.base_fields:
            for c in Y.comps:
                jac_outs.extend(diff(c, v) for v in base.names)
        self._base_jac_tape = compile_tape(jac_outs, base.names)

    def point_data(self, z):
        """(h values (3,), bracket values (2,), gradients (3, 2n)) at a
        stacked cotangent point."""
        n = self.n
        env = dict(zip(self.cochart.names, (float(v) for v in z)))
        vals = run_float(self._pt_tape, env)
        h = np.array(vals[:3], dtype=float)
        brk = np.array(vals[3:5], dtype=float)
        grads = np.array(vals[5:], dtype=float).reshape(3, 2 * n)
        return h, brk, grads

    def base_values(self, q):
        """Rows X_1, X_2, X_3 at a base point given as an array."""
        env = dict(zip(self.D.chart.names, (float(v) for v in q)))
        vals = run_float(self._base_tape, env)
        return np.array(vals, dtype=float).reshape(3, self.n)

    def base_jacobians(self, q):
        env = dict(zip(self.D.chart.names, (float(v) for v in q)))
        vals = run_float(self._base_jac_tape, env)
        n = self.n
        return np.array(vals, dtype=float).reshape(3, n, n)


def hamiltonian_lift(D: Distribution2) -> HamiltonianLift:
    lift = D._cache.get("lift")
    if lift is None:
        lift = HamiltonianLift(D)
        D._cache["lift"] = lift
    return lift


def characteristic_field(D: Distribution2) -> VecField:
    """The symbolic characteristic Hamiltonian field on the cotangent
    chart (tangent to the annihilator of the square, spanning the kernel
    of the restricted form on the regular stratum)."""
    return hamiltonian_lift(D).H


# ---------------------------------------------------------------------------
# strata and sampling


def annihilator(D: Distribution2, q: ChartPoint, level: int = 2) -> SubspaceFrame:
    """Covectors annihilating D^level at q, as a frame in momentum
    components."""
    if level not in (1, 2, 3):
        raise InputError("annihilator level must be 1, 2 or 3")
    fields = power_basis(D, level)
    rows = np.stack([f.at(q) for f in fields])
    return null_space_of(rows, context=f"annihilator level {level}")


def _on_annihilator(lift, z, tol=1e-8):
    h, _, _ = lift.point_data(z)
    n = lift.n
    rows = lift.base_values(z[:n])
    scale = max(1.0, float(np.linalg.norm(z[n:])) * float(np.max(np.abs(rows))))
    return float(np.max(np.abs(h))) <= tol * scale


def _regularity_margin(lift, z):
    """|({h1,h3}, {h2,h3})| at z, the distance from the degenerate
    stratum in bracket terms."""
    _, brk, _ = lift.point_data(z)
    return float(np.hypot(brk[0], brk[1]))


def sample_regular_covector(D: Distribution2, q: ChartPoint, seed,
                            draws: int = 25) -> CotangentPoint:
    """A unit covector in the annihilator of D^2 over q, regular for the
    characteristic field, chosen among `draws` samples as one achieving
    the maximal tower exponent (so degenerate-leaf draws never win)."""
    pt, _ = _sample_with_nu(D, q, seed, draws)
    return pt


def _sample_with_nu(D, q, seed, draws):
    if seed is None:
        raise InputError("sampling a covector requires a seed")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    lift = hamiltonian_lift(D)
    n = D.dim
    fiber = annihilator(D, q, 2)
    if fiber.rank != n - 3:
        raise StratumError(
            f"annihilator of the square has dim {fiber.rank}, expected {n - 3}; "
            "base point off the (2,3) stratum"
        )
    cube = annihilator(D, q, 3)
    qa = np.array([float(v) for v in q.coords])
    cands = []
    attempts = 0
    while len(cands) < draws and attempts < 40 * draws:
        attempts += 1
        coeff = rng.standard_normal(fiber.rank)
        p = fiber.basis @ coeff
        nrm = np.linalg.norm(p)
        if nrm < 1e-12:
            continue
        p = p / nrm
        if cube.rank > 0 and np.linalg.norm(p - cube.project(p)) < 1e-6:
            continue  # annihilates the cube: wrong stratum
        z = np.concatenate([qa, p])
        if _regularity_margin(lift, z) < 1e-9:
            continue
        cands.append(p)
    if not cands:
        raise StratumError(
            "no regular covector found over this base point; the fiber "
            "appears to lie in the degenerate stratum"
        )
    Z0 = np.stack([np.concatenate([qa, p]) for p in cands])
    towers = _series_towers(D, Z0, D.dim - 2, lenient=True)
    best_nu = -1
    tied = []
    for idx, d in enumerate(towers):
        if d is None:
            continue  # ill-conditioned draw, spend another one
        nu = _nu_from_dims(d)
        if nu is None:
            continue
        if nu > best_nu:
            best_nu, tied = nu, [idx]
        elif nu == best_nu:
            tied.append(idx)
    if not tied:
        raise StratumError(
            "all sampled covectors gave unstable towers over this base point"
        )
    # among the maximal-exponent draws prefer the best-conditioned flag:
    # a draw close to the degenerate stratum keeps the same dimensions
    # but its new tower directions shrink toward the noise floor, which
    # degrades every curve computation downstream
    scores = _flag_condition(D, Z0[tied])
    best = tied[int(np.argmax(scores))]
    return CotangentPoint(D.chart, qa, cands[best]), best_nu


def _flag_condition(D, Z0):
    """Conditioning score of the extension flag per covector: the
    smallest magnitude (relative to the family scale) of the new
    direction added by each tower order before saturation.  Unit-norm
    covectors give comparable scores."""
    n = D.dim
    imax = max(n - 4, 1)
    M = _tower_blocks_series(D, Z0, imax)
    scores = np.zeros(M.shape[0])
    for b in range(M.shape[0]):
        nmax = float(np.max(np.abs(M[b])))
        if nmax == 0.0:
            continue
        U, s, _ = np.linalg.svd(M[b, 0] / nmax)
        r0 = int(np.sum(s > 1e-9 * max(s[0], 1e-300)))
        Q = U[:, :r0]
        worst = np.inf
        for k in range(1, imax + 1):
            R = M[b, k] / nmax
            R = R - Q @ (Q.T @ R)
            U2, sv, _ = np.linalg.svd(R)
            worst = min(worst, float(sv[0]))
            Q = np.linalg.qr(np.concatenate([Q, U2[:, :1]], axis=1))[0]
        scores[b] = 0.0 if not np.isfinite(worst) else worst
    return scores


# ---------------------------------------------------------------------------
# the fiber J(lambda) and the characteristic direction


def _jsub_basis_pointwise(lift, z):
    """Columns spanning J(lambda) = {v tangent to the annihilator of the
    square with base projection in D}, built numerically at one stacked
    cotangent point: n-3 vertical directions plus one lift of each frame
    field."""
    n = lift.n
    qv, pv = z[:n], z[n:]
    R = lift.base_values(qv)
    U, s, Vt = np.linalg.svd(R)
    if s[2] <= 1e-9 * s[0]:
        raise StratumError("frame of the square is degenerate at the base point")
    vert = Vt[3:].T  # (n, n-3)
    DX = lift.base_jacobians(qv)
    B = np.zeros((2 * n, n - 1))
    B[n:, : n - 3] = vert
    RRt = R @ R.T
    for j in (0, 1):
        vq = R[j]
        c = -np.einsum("a,iab,b->i", pv, DX, vq)
        vp = R.T @ np.linalg.solve(RRt, c)
        B[:n, n - 3 + j] = vq
        B[n:, n - 3 + j] = vp
    return B


def jacobi_subspace(D: Distribution2, lam: CotangentPoint) -> SubspaceFrame:
    """The fiber J(lambda) as a frame in the 2n stacked coordinates."""
    lift = hamiltonian_lift(D)
    z = lam.full()
    if not _on_annihilator(lift, z):
        raise InputError("covector does not annihilate the square at its point")
    B = _jsub_basis_pointwise(lift, z)
    fr = SubspaceFrame.from_spanning(B, context="J(lambda) fiber")
    if fr.rank != D.dim - 1:
        raise StratumError(f"J(lambda) has dim {fr.rank}, expected {D.dim - 1}")
    return fr


def characteristic_direction(D: Distribution2, lam: CotangentPoint):
    """Unit kernel direction of the symplectic form restricted to the
    tangent of the annihilator of the square, sign-fixed so the first
    component above tolerance is positive.  Computed numerically; the
    symbolic characteristic field is the independent route."""
    lift = hamiltonian_lift(D)
    z = lam.full()
    if not _on_annihilator(lift, z):
        raise InputError("covector does not annihilate the square at its point")
    _, _, grads = lift.point_data(z)
    r, _ = rank_decide(grads, context="annihilator constraint gradients")
    if r != 3:
        raise StratumError("constraint gradients are dependent at this covector")
    TS = null_space_of(grads, context="tangent of the annihilator")
    S = symplectic_matrix(D.dim)
    sig = TS.basis.T @ S @ TS.basis
    ker = null_space_of(sig, context="kernel of the restricted form")
    if ker.rank != 1:
        raise StratumError(
            f"restricted form has a {ker.rank}-dimensional kernel "
            "(expected a line: covector off the regular stratum)"
        )
    v = TS.basis @ ker.basis[:, 0]
    v = v / np.linalg.norm(v)
    idx = int(np.argmax(np.abs(v) > 1e-8))
    if v[idx] < 0:
        v = -v
    return v


# ---------------------------------------------------------------------------
# extension tower, series engine (exact local algebra, batched)


def _smatmul(A, B, K):
    """Series product of matrix series (B, K+1, r, m) x (B, K+1, m, c)."""
    out = np.zeros(A.shape[:2] + (A.shape[2], B.shape[3]))
    for k in range(K + 1):
        for j in range(k + 1):
            out[:, k] += A[:, j] @ B[:, k - j]
    return out


def _smatvec(A, v, K):
    """(B, K+1, r, c) x (B, K+1, c) -> (B, K+1, r)."""
    out = np.zeros(A.shape[:3])
    for k in range(K + 1):
        for j in range(k + 1):
            out[:, k] += np.einsum("brc,bc->br", A[:, j], v[:, k - j])
    return out


def _s3inv(G, K):
    """Series inverse of a 3x3 matrix series (B, K+1, 3, 3) via the
    adjugate; the base matrix must be invertible."""
    g = lambda i, j: G[:, :, i, j]
    m = lambda a, b: sb_mul(a, b, K)
    cof = {}
    for i in range(3):
        for j in range(3):
            i1, i2 = [a for a in range(3) if a != i]
            j1, j2 = [a for a in range(3) if a != j]
            minor = m(g(i1, j1), g(i2, j2)) - m(g(i1, j2), g(i2, j1))
            cof[(i, j)] = minor if (i + j) % 2 == 0 else -minor
    det = m(g(0, 0), cof[(0, 0)]) + m(g(0, 1), cof[(0, 1)]) + m(g(0, 2), cof[(0, 2)])
    inv = np.zeros_like(G)
    for i in range(3):
        for j in range(3):
            inv[:, :, i, j] = sb_div(cof[(j, i)], det, K)
    return inv


def _tower_blocks_series(D, Z0, imax):
    """Coefficient blocks M_k of the pulled-back spanning family of
    J(gamma(t)) for a batch of covectors: returns (B, imax+1, 2n, n+2)."""
    lift = hamiltonian_lift(D)
    n = D.dim
    K = imax
    B = Z0.shape[0]
    xs, Js = flow_series_batch(lift.H, Z0, K)
    qs = xs[:, :, :n]
    ps = xs[:, :, n:]

    env = {nm: qs[:, :, i] for i, nm in enumerate(D.chart.names)}
    base_vals = run_series_batch(lift._base_tape, env, K, B)
    R = np.zeros((B, K + 1, 3, n))
    for i in range(3):
        for j in range(n):
            R[:, :, i, j] = base_vals[i * n + j]
    jac_vals = run_series_batch(lift._base_jac_tape, env, K, B)
    DX = np.zeros((B, K + 1, 3, n, n))
    for i in range(3):
        for a in range(n):
            for b in range(n):
                DX[:, :, i, a, b] = jac_vals[(i * n + a) * n + b]

    Rt = R.swapaxes(2, 3)
    G = _smatmul(R, Rt, K)
    Ginv = _s3inv(G, K)
    Pv = -_smatmul(_smatmul(Rt, Ginv, K), R, K)
    Pv[:, 0] += np.eye(n)

    N = np.zeros((B, K + 1, 2 * n, n + 2))
    N[:, :, n:, :n] = Pv
    DXflat = DX.reshape(B, K + 1, 3 * n, n)
    for j in (0, 1):
        vq = R[:, :, j, :]
        w = _smatvec(DXflat, vq, K).reshape(B, K + 1, 3, n)
        c = -_smatvec(w, ps, K)
        vp = _smatvec(Rt, _smatvec(Ginv, c, K), K)
        N[:, :, :n, n + j] = vq
        N[:, :, n:, n + j] = vp

    M = np.zeros_like(N)
    M[:, 0] = N[:, 0]
    for k in range(1, K + 1):
        acc = N[:, k].copy()
        for j in range(1, k + 1):
            acc -= Js[:, j] @ M[:, k - j]
        M[:, k] = acc
    return M


# Residual significance floors for the tower engines: a singular value
# of the off-span residual of a unit-normalized block counts as a new
# direction above floor * guard, as absent below floor / guard, and
# raises in between.  The series engine computes blocks to near machine
# precision (entry noise ~ 1e-13), so its floor sits at 1e-11.  The
# stencil engine's finite-difference noise stays below ~1e-8 at the
# scaled steps; its floor is 1e-6, raised further whenever the measured
# extrapolation error of a block says the differences are worse.
_SERIES_SIG = 1e-11
_STENCIL_SIG = 1e-6


def _dims_one(blocks, rtol, sig_floor, guard, label, block_err=None):
    """Span dimensions of the running stack of coefficient blocks.

    blocks: (nblk, rows, cols).  Order 0 is a plain rank call; each
    later block is normalized, projected off the accumulated span, and
    its residual singular values are tested against a significance
    floor: counted above floor * guard, dropped below floor / guard,
    ambiguous in between raises.  Working with residuals keeps a
    genuinely new direction of small amplitude separated from roundoff,
    which a whole-stack SVD cannot do.

    block_err, when given, holds a measured error magnitude per block
    (same units as the blocks); the floor for a block is then the larger
    of sig_floor and its normalized measured error."""
    nblk = blocks.shape[0]
    nrm = np.max(np.abs(blocks), axis=(1, 2))
    if nrm[0] == 0.0:
        raise StratumError(f"{label}: base block of the tower vanishes")
    nmax = float(np.max(nrm))
    dims = []
    Q = None
    for i in range(nblk):
        if i == 0:
            M0 = blocks[0] / nrm[0]
            r, _ = rank_decide(
                M0, rtol=rtol, guard=guard,
                context=f"{label}: extension span order 0",
            )
            Q = np.linalg.svd(M0)[0][:, :r]
            dims.append(r)
            continue
        floor = sig_floor
        if block_err is not None and nrm[i] > 0:
            floor = max(floor, guard * float(block_err[i]) / float(nrm[i]))
        if nrm[i] <= 1e-9 * nmax:
            _emit(ToleranceRecord(
                f"{label}: extension increment order {i} (negligible block)",
                0, floor * guard, 0.0, float(nrm[i] / nmax)))
            dims.append(dims[-1])
            continue
        Mh = blocks[i] / nrm[i]
        R = Mh - Q @ (Q.T @ Mh)
        U, s, _ = np.linalg.svd(R)
        counted = int(np.sum(s > floor * guard))
        ambiguous = np.any((s > floor / guard) & (s <= floor * guard))
        rec = ToleranceRecord(
            f"{label}: extension increment order {i}",
            counted, floor * guard,
            float(s[counted - 1]) if counted else 0.0,
            float(s[counted]) if counted < len(s) else 0.0,
        )
        if ambiguous:
            raise RankInstabilityError(
                f"tower increment ambiguous at order {i} ({label}): residual "
                "singular value inside the significance band",
                rec.smallest_retained, rec.largest_discarded,
            )
        _emit(rec)
        if counted:
            Q = np.linalg.qr(np.concatenate([Q, U[:, :counted]], axis=1))[0]
        dims.append(dims[-1] + counted)
    return tuple(dims)


def _validate_tower(dims, n, detail):
    dims = [int(v) for v in dims]
    if dims[0] != n - 1:
        raise StratumError(
            f"tower starts at dim {dims[0]}, expected {n - 1} ({detail})"
        )
    plateaued = False
    for a, b in zip(dims, dims[1:]):
        inc = b - a
        if inc not in (0, 1):
            raise StepInstabilityError(
                f"tower increment {inc} outside {{0, 1}}: dims {dims} ({detail})"
            )
        if plateaued and inc != 0:
            raise StepInstabilityError(
                f"tower grew again after stabilizing: dims {dims} ({detail})"
            )
        if inc == 0:
            plateaued = True
    if dims[-1] > 2 * n - 4:
        raise StepInstabilityError(
            f"tower exceeded the 2n-4 bound: dims {dims} ({detail})"
        )
    return tuple(dims)


def _nu_from_dims(dims):
    for i in range(len(dims) - 1):
        if dims[i + 1] == dims[i]:
            return i
    return None


def _series_towers(D, Z0, imax, lenient=False):
    """Tower dimension tuples for a batch of stacked covectors.

    The curve parameter is rescaled by the characteristic field's speed
    at each start point, so slowly-moving draws keep their coefficient
    blocks at comparable magnitudes.  With lenient=True a draw whose
    rank decisions fail yields None instead of raising (the sampler
    discards such draws)."""
    Z0 = np.atleast_2d(np.asarray(Z0, dtype=float))
    lift = hamiltonian_lift(D)
    n = D.dim
    speeds = np.linalg.norm(lift.H.at_many(Z0), axis=1)
    M = _tower_blocks_series(D, Z0, imax)
    powers = np.arange(imax + 1)[:, None, None]
    out = []
    for b in range(Z0.shape[0]):
        try:
            if speeds[b] < 1e-12:
                raise StratumError(
                    "characteristic field vanishes at the covector"
                )
            Mb = M[b] * (1.0 / speeds[b]) ** powers
            dims = _dims_one(
                Mb, rtol=None, sig_floor=_SERIES_SIG, guard=10.0,
                label="series",
            )
            out.append(_validate_tower(dims, n, "series engine"))
        except (RankInstabilityError, StepInstabilityError, StratumError):
            if not lenient:
                raise
            out.append(None)
    return out


def nu_batch(D: Distribution2, Z0):
    """Tower exponent for a batch of stacked covectors (series engine)."""
    n = D.dim
    out = []
    for d in _series_towers(D, Z0, n - 2):
        nu = _nu_from_dims(d)
        if nu is None:
            raise StepInstabilityError(f"tower has no plateau: dims {d}")
        out.append(nu)
    return out


# ---------------------------------------------------------------------------
# extension tower, stencil engine (transport + finite differences)


def _fd_weights(l):
    """Central-difference weights for the l-th derivative on nodes
    -l..l, in node units (divide by h^l after summing)."""
    nodes = np.arange(-l, l + 1, dtype=float)
    m = 2 * l + 1
    V = np.zeros((m, m))
    fact = 1.0
    for k in range(m):
        if k > 0:
            fact *= k
        V[k] = nodes ** k / fact
    rhs = np.zeros(m)
    rhs[l] = 1.0
    return np.linalg.solve(V, rhs)


def default_stencil_step(D: Distribution2, lam: CotangentPoint) -> float:
    """1e-2 scaled by the characteristic field's size at the covector."""
    lift = hamiltonian_lift(D)
    Hval = lift.H.at(lam.as_point())
    return 1e-2 / max(1.0, float(np.linalg.norm(Hval)))


def _tower_dims_stencil(D, lam, imax, h_base, rtol=1e-6):
    lift = hamiltonian_lift(D)
    n = D.dim
    K = 14
    xs, Js = flow_series(lift.H, lam.as_point(), K)
    tail = max(
        float(np.max(np.abs(xs[K]))),
        float(np.max(np.abs(xs[K - 1]))),
        float(np.max(np.abs(Js[K]))),
    )
    r_valid = (3e-14 / tail) ** (1.0 / K) if tail > 0 else 1e6

    cacheP = {}

    def P_at(t):
        hit = cacheP.get(t)
        if hit is not None:
            return hit
        z = _horner(xs, t)
        Jt = _horner(Js, t)
        Bz = _jsub_basis_pointwise(lift, z)
        W = np.linalg.solve(Jt, Bz)
        Q = np.linalg.qr(W)[0]
        P = Q @ Q.T
        cacheP[t] = P
        return P

    def h_eff(l, T):
        # Steps live in curve time units T (the supplied step is 1e-2 T).
        # Low orders keep that step; high orders must enlarge it so that
        # roundoff amplified by h^-l stays under the truncation error,
        # whose leading power pi is set by stencil parity.
        pi = l + 1 if l % 2 else l + 2
        u = max(1e-2, (3e-16 / T ** l) ** (1.0 / (l + pi)))
        h = min(T * u, r_valid / (2 * l + 0.5))
        if h < 1e-8:
            raise StepInstabilityError(
                f"usable stencil step underflows (validity radius {r_valid:.2e})"
            )
        return h, pi

    def dims_for(hb):
        T = hb / 1e-2
        blocks = [P_at(0.0)]
        errs = [0.0]
        for l in range(1, imax + 1):
            hl, pi = h_eff(l, T)
            w = _fd_weights(l)
            nodes = np.arange(-l, l + 1)

            def D_of(hh):
                acc = np.zeros((2 * n, 2 * n))
                for wj, j in zip(w, nodes):
                    if wj != 0.0:
                        acc += wj * P_at(float(j * hh))
                return acc / hh ** l

            fine, coarse = D_of(hl), D_of(2 * hl)
            blocks.append((2 ** pi * fine - coarse) / (2 ** pi - 1))
            # the extrapolation correction bounds truncation and
            # roundoff of the pair; it is the block's error yardstick
            errs.append(float(np.max(np.abs(fine - coarse))) / (2 ** pi - 1))
        # derivatives in curve time units keep block magnitudes level
        scale = T ** np.arange(imax + 1)
        arr = np.stack(blocks) * scale[:, None, None]
        return _dims_one(
            arr, rtol=rtol, sig_floor=_STENCIL_SIG, guard=10.0,
            label="stencil", block_err=np.asarray(errs) * scale,
        )

    d1 = dims_for(h_base)
    d2 = dims_for(h_base / 2)
    if d1 != d2:
        raise StepInstabilityError(
            f"tower dimensions changed under step halving: "
            f"h={h_base:g} gives {d1}, h/2 gives {d2}"
        )
    return _validate_tower(
        d1, n, f"stencil engine, h={h_base:g} and {h_base / 2:g} agree"
    )


def _horner(cs, t):
    out = np.zeros_like(cs[0])
    for c in cs[::-1]:
        out = out * t + c
    return out


def extension_dims(D: Distribution2, lam: CotangentPoint, imax=None,
                   h=None, method: str = "stencil") -> tuple:
    """Dimensions of the extension tower J = J^(0) c J^(1) c ... at a
    covector: (dim J^(0), ..., dim J^(imax)).

    method "stencil" transports the fiber along the characteristic flow
    and differentiates projector curves by Richardson-extrapolated
    central differences (halving the step must not change any reported
    dimension); "series" does the same computation in exact truncated
    t-series arithmetic.  The two engines are independent routes to the
    same numbers.
    """
    n = D.dim
    if imax is None:
        imax = n - 2
    if imax < 1:
        raise InputError("imax must be >= 1")
    lift = hamiltonian_lift(D)
    z = lam.full()
    if not _on_annihilator(lift, z):
        raise InputError("covector does not annihilate the square at its point")
    if method == "series":
        return _series_towers(D, z[None, :], imax)[0]
    if method != "stencil":
        raise InputError(f"unknown tower method {method!r}")
    if h is None:
        h = default_stencil_step(D, lam)
    return _tower_dims_stencil(D, lam, imax, h)


def class_nu(D: Distribution2, lam: CotangentPoint) -> int:
    """Tower exponent nu(lambda): the first order at which the extension
    tower stops growing."""
    return nu_batch(D, lam.full()[None, :])[0]


# ---------------------------------------------------------------------------
# the class of the distribution at a base point


class ClassReport:
    """Result of estimating the class m(q) by fiber sampling."""

    __slots__ = ("q", "samples", "m", "regular")

    def __init__(self, q, samples, m, regular):
        self.q = q
        self.samples = tuple(samples)
        self.m = m
        self.regular = regular

    def as_dict(self):
        return {
            "base_point": list(self.q.coords),
            "samples": [
                {"p": list(p), "nu": int(nu)} for p, nu in self.samples
            ],
            "m": int(self.m),
            "regular": bool(self.regular),
        }

    def __repr__(self):
        return f"ClassReport(m={self.m}, regular={self.regular})"


def class_at(D: Distribution2, q: ChartPoint, samples: int = 5,
             seed=None, probes: int = 5) -> ClassReport:
    """The class m(q): the maximal tower exponent over sampled regular
    covectors of the fiber at q.

    The regular flag probes nearby base points with a reduced sampling
    budget and reports whether the class stays constant there.
    """
    if seed is None:
        raise InputError("class_at requires a seed")
    rng = np.random.default_rng(seed)
    recs = []
    for _ in range(samples):
        pt, nu = _sample_with_nu(D, q, rng, draws=25)
        recs.append((pt.p, nu))
    m = max(nu for _, nu in recs)

    regular = True
    qa = np.array([float(v) for v in q.coords])
    scale = 1e-3 * (1.0 + float(np.max(np.abs(qa))))
    for _ in range(probes):
        dq = qa + scale * rng.standard_normal(D.dim)
        try:
            _, nu = _sample_with_nu(
                D, ChartPoint(D.chart, tuple(dq)), rng, draws=8
            )
        except (StratumError, StepInstabilityError):
            regular = False
            break
        if nu != m:
            regular = False
            break
    return ClassReport(q, recs, m, regular)
