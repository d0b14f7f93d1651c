"""Carleman weight system, evaluated and accumulated exclusively in the log domain.

The weights are built from a spatial bump profile and a time profile gamma
that blows up at one endpoint (t=0 for the backward variants, t=T for the
forward ones).  With default parameters the log-weights reach magnitudes of
order 1e5, so the exponential weight itself is never materialized: every
consumer works with ``a*log(lam) + b*log(mu) + c*log(xi) + d*ell`` directly,
and quadratures combine contributions by log-sum-exp.

Four gamma variants are provided: ``backward``, ``backward-regularized``,
``forward`` and ``forward-regularized``.  The unspecified monotone bridge
between the power-law piece and the plateau is a quintic Hermite matching
value, first and second derivative at both junctions; if the quintic fails a
fine-grid monotonicity or variant-ordering check, a C2 smoothstep blend of
the two adjacent closed forms (monotone and ordered by construction) is used
instead.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp

from .mesh import SpatialMesh
from .scenario import ScenarioTree, time_weights

__all__ = [
    "WeightConfigError",
    "WeightSingularityError",
    "WeightBase",
    "WeightParams",
    "PowerSpec",
    "WeightSystem",
    "build_beta",
    "gamma",
    "build_weight_system",
    "log_weight",
    "weighted_expectation_norm",
    "weighted_slab_norm",
    "VARIANTS",
]

log = logging.getLogger(__name__)

VARIANTS = ("backward", "backward-regularized", "forward", "forward-regularized")
DEFAULT_KAPPA = 30.0


class WeightConfigError(ValueError):
    """Invalid weight parameters or a degenerate bump construction."""


class WeightSingularityError(ValueError):
    """A weight power was requested where the variant degenerates."""


# ---------------------------------------------------------------------------
# spatial bump profile


def _c4_smoothstep(s: np.ndarray) -> np.ndarray:
    # 9th-degree smoothstep: four vanishing derivatives at both ends.
    return s**5 * (126.0 + s * (-420.0 + s * (540.0 + s * (-315.0 + s * 70.0))))


def _c4_smoothstep_integral(s: np.ndarray) -> np.ndarray:
    return s**6 * (21.0 + s * (-60.0 + s * (67.5 + s * (-35.0 + s * 7.0))))


@dataclass(frozen=True)
class WeightBase:
    """C4 bump on [a_end, b_end]: zero at the ends, one interior maximum.

    The profile rises with constant slope, turns over inside the inner
    region through a smoothstep cap, and descends with constant slope, so
    the gradient magnitude is bounded below by ``a0`` at every grid point
    outside the inner mask.
    """

    a_end: float
    b_end: float
    x_center: float
    cap_halfwidth: float
    slope_ratio: float   # descending/ascending slope magnitude ratio
    scale: float         # normalizes the peak value to 1
    x_peak: float
    a0: float
    beta: np.ndarray     # values on the grid
    dbeta: np.ndarray    # derivative on the grid

    def __post_init__(self):
        self.beta.setflags(write=False)
        self.dbeta.setflags(write=False)

    @property
    def beta_max(self) -> float:
        return 1.0

    def value(self, x) -> np.ndarray:
        return self.scale * self._antiderivative(np.asarray(x, dtype=float))

    def derivative(self, x) -> np.ndarray:
        return self.scale * self._profile(np.asarray(x, dtype=float))

    def _profile(self, x: np.ndarray) -> np.ndarray:
        lo = self.x_center - self.cap_halfwidth
        hi = self.x_center + self.cap_halfwidth
        s = np.clip((x - lo) / (2.0 * self.cap_halfwidth), 0.0, 1.0)
        return 1.0 - (1.0 + self.slope_ratio) * _c4_smoothstep(s)

    def _antiderivative(self, x: np.ndarray) -> np.ndarray:
        lo = self.x_center - self.cap_halfwidth
        hi = self.x_center + self.cap_halfwidth
        out = np.where(x <= lo, x - self.a_end, 0.0)
        s = np.clip((x - lo) / (2.0 * self.cap_halfwidth), 0.0, 1.0)
        cap = (lo - self.a_end) + 2.0 * self.cap_halfwidth * (
            s - (1.0 + self.slope_ratio) * _c4_smoothstep_integral(s)
        )
        out = np.where((x > lo) & (x < hi), cap, out)
        cap_end = (lo - self.a_end) + self.cap_halfwidth * (1.0 - self.slope_ratio)
        out = np.where(x >= hi, cap_end - self.slope_ratio * (x - hi), out)
        return out


def build_beta(mesh: SpatialMesh) -> WeightBase:
    """Construct the bump with its unique critical point inside the inner region."""
    i_lo, i_hi = mesh.inner_interval
    x_center = 0.5 * (i_lo + i_hi)
    cap_halfwidth = 0.49 * 0.5 * (i_hi - i_lo)
    slope_ratio = (x_center - mesh.a_end) / (mesh.b_end - x_center)

    probe = WeightBase(
        a_end=mesh.a_end, b_end=mesh.b_end, x_center=x_center,
        cap_halfwidth=cap_halfwidth, slope_ratio=slope_ratio, scale=1.0,
        x_peak=x_center, a0=0.0,
        beta=np.zeros(mesh.M), dbeta=np.zeros(mesh.M),
    )
    lo = x_center - cap_halfwidth
    hi = x_center + cap_halfwidth
    x_peak = brentq(lambda x: probe._profile(np.array([x]))[0], lo, hi)
    peak_value = probe._antiderivative(np.array([x_peak]))[0]
    if peak_value <= 0.0:
        raise WeightConfigError("degenerate bump: non-positive peak")
    scale = 1.0 / peak_value

    beta = scale * probe._antiderivative(mesh.x)
    dbeta = scale * probe._profile(mesh.x)
    a0 = float(np.min(np.abs(dbeta[~mesh.inner_mask])))
    if a0 <= 0.0:
        raise WeightConfigError(
            "degenerate inner-region placement: the bump gradient vanishes "
            "at a grid point outside the inner mask"
        )
    return WeightBase(
        a_end=mesh.a_end, b_end=mesh.b_end, x_center=x_center,
        cap_halfwidth=cap_halfwidth, slope_ratio=slope_ratio, scale=scale,
        x_peak=float(x_peak), a0=a0, beta=beta, dbeta=dbeta,
    )


# ---------------------------------------------------------------------------
# time profile gamma


@dataclass(frozen=True)
class WeightParams:
    """Parameters of one weight variant.

    ``sigma`` is derived, never user-set; it must exceed 2 so the junction
    into the terminal rise is C2.
    """

    lam: float
    mu: float
    m: float
    T: float
    variant: str
    eps: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise WeightConfigError(f"unknown variant {self.variant!r}")
        if not 0.0 < self.T < 1.0:
            raise WeightConfigError(f"need 0 < T < 1, got {self.T}")
        if self.m < 1.0:
            raise WeightConfigError(f"need m >= 1, got {self.m}")
        if self.lam < 0.25 or self.mu < 0.25:
            raise WeightConfigError("lambda and mu must be >= 0.25")
        if self.lam < 1.0 or self.mu < 1.0:
            log.warning(
                "weight parameters lambda=%g mu=%g below 1: outside the "
                "regime the estimates are stated for", self.lam, self.mu)
        if self.sigma <= 2.0:
            raise WeightConfigError(
                f"sigma = lam*mu^2*exp(mu*(6m-4)) = {self.sigma:g} must "
                "exceed 2 for the C2 junction at 3T/4"
            )
        if self.regularized:
            if self.eps is None or not 0.0 < self.eps < self.T / 4.0:
                raise WeightConfigError(
                    f"regularized variant needs 0 < eps < T/4, got {self.eps}"
                )
        elif self.eps is not None:
            raise WeightConfigError("eps is only meaningful for regularized variants")

    @property
    def sigma(self) -> float:
        return self.lam * self.mu**2 * math.exp(self.mu * (6.0 * self.m - 4.0))

    @property
    def regularized(self) -> bool:
        return self.variant.endswith("-regularized")

    @property
    def forward(self) -> bool:
        return self.variant.startswith("forward")

    def companion(self, variant: str, eps: float | None = None) -> "WeightParams":
        """Same (lam, mu, m, T) under a different variant."""
        if variant.endswith("-regularized") and eps is None:
            eps = self.eps
        if not variant.endswith("-regularized"):
            eps = None
        return replace(self, variant=variant, eps=eps)


def _quintic_hermite(t0, t1, v0, d0, s0, v1, d1, s1):
    """Quintic matching value/1st/2nd derivative at both ends of [t0, t1]."""
    dt = t1 - t0
    b = np.array([v0, d0 * dt, s0 * dt * dt, v1, d1 * dt, s1 * dt * dt])
    basis = np.array([
        [1.0, 0.0, 0.0, -10.0, 15.0, -6.0],
        [0.0, 1.0, 0.0, -6.0, 8.0, -3.0],
        [0.0, 0.0, 0.5, -1.5, 1.5, -0.5],
        [0.0, 0.0, 0.0, 10.0, -15.0, 6.0],
        [0.0, 0.0, 0.0, -4.0, 7.0, -3.0],
        [0.0, 0.0, 0.0, 0.5, -1.0, 0.5],
    ])
    coeffs = b @ basis
    dcoeffs = coeffs[1:] * np.arange(1, 6)

    def evaluate(t):
        s = (np.asarray(t, dtype=float) - t0) / dt
        return (np.polynomial.polynomial.polyval(s, coeffs),
                np.polynomial.polynomial.polyval(s, dcoeffs) / dt)

    return evaluate


def _c2_smoothstep(s):
    return s * s * s * (10.0 + s * (-15.0 + 6.0 * s))


def _c2_smoothstep_deriv(s):
    return 30.0 * s * s * (1.0 - s) ** 2


def _blend_bridge(t0, t1, left, right):
    """C2 smoothstep blend g*right + (1-g)*left of two closed forms."""

    def evaluate(t):
        t = np.asarray(t, dtype=float)
        s = (t - t0) / (t1 - t0)
        g = _c2_smoothstep(s)
        dg = _c2_smoothstep_deriv(s) / (t1 - t0)
        lv, ld = left(t)
        rv, rd = right(t)
        return (1.0 - g) * lv + g * rv, (1.0 - g) * ld + g * rd + dg * (rv - lv)

    return evaluate


class GammaCurve:
    """Piecewise C2 time profile of one variant, with junction bookkeeping."""

    def __init__(self, params: WeightParams):
        self.params = params
        self.bridge_kind = "quintic"
        self._build()

    # closed forms ---------------------------------------------------------

    def _power_backward(self, t):
        t = np.asarray(t, dtype=float)
        m = self.params.m
        return t**-m, -m * t ** -(m + 1.0)

    def _power_forward(self, t, eps=0.0):
        t = np.asarray(t, dtype=float)
        m = self.params.m
        u = self.params.T - t + eps
        return u**-m, m * u ** -(m + 1.0)

    def _plateau(self, t):
        t = np.asarray(t, dtype=float)
        return np.ones_like(t), np.zeros_like(t)

    def _rise_backward(self, t):
        # 1 + (1 - 4(T-t)/T)^sigma on [3T/4, T]
        t = np.asarray(t, dtype=float)
        T, sg = self.params.T, self.params.sigma
        u = np.clip(1.0 - 4.0 * (T - t) / T, 0.0, 1.0)
        return 1.0 + u**sg, sg * u ** (sg - 1.0) * (4.0 / T)

    def _rise_forward(self, t):
        # 1 + (1 - 4t/T)^sigma on [0, T/4]
        t = np.asarray(t, dtype=float)
        T, sg = self.params.T, self.params.sigma
        u = np.clip(1.0 - 4.0 * t / T, 0.0, 1.0)
        return 1.0 + u**sg, -sg * u ** (sg - 1.0) * (4.0 / T)

    # assembly -------------------------------------------------------------

    def _make_bridge(self, t0, t1, left, right, decreasing):
        lv, ld = left(np.array([t0]))
        rv, rd = right(np.array([t1]))
        ls = _second_derivative(left, t0)
        rs = _second_derivative(right, t1)
        bridge = _quintic_hermite(t0, t1, lv[0], ld[0], ls, rv[0], rd[0], rs)
        grid = np.linspace(t0, t1, 2001)
        _, deriv = bridge(grid)
        sign = -1.0 if decreasing else 1.0
        if np.any(sign * deriv < -1e-12 * max(1.0, np.max(np.abs(deriv)))):
            self.bridge_kind = "blend"
            bridge = _blend_bridge(t0, t1, left, right)
        return bridge

    def _build(self):
        p = self.params
        T, eps = p.T, p.eps
        variant = p.variant
        if variant == "backward":
            bridge = self._make_bridge(T / 4, T / 2, self._power_backward,
                                       self._plateau, decreasing=True)
            self.pieces = [
                (0.0, T / 4, self._power_backward),
                (T / 4, T / 2, bridge),
                (T / 2, 3 * T / 4, self._plateau),
                (3 * T / 4, T, self._rise_backward),
            ]
            self.junctions = (T / 4, T / 2, 3 * T / 4)
            self.singular_time = 0.0
        elif variant == "backward-regularized":
            base = GammaCurve(p.companion("backward"))
            self.bridge_kind = base.bridge_kind

            def shifted(t):
                v, d = base.value_and_derivative(np.asarray(t, dtype=float) + eps)
                return v, d

            self.pieces = [
                (0.0, T / 2 - eps, shifted),
                (T / 2 - eps, 3 * T / 4, self._plateau),
                (3 * T / 4, T, self._rise_backward),
            ]
            self.junctions = (T / 4 - eps, T / 2 - eps, 3 * T / 4)
            self.singular_time = None
        elif variant == "forward":
            base = GammaCurve(p.companion("backward"))
            self.bridge_kind = base.bridge_kind

            def mirrored(t):
                v, d = base.value_and_derivative(T - np.asarray(t, dtype=float))
                return v, -d

            self.pieces = [(0.0, T, mirrored)]
            self.junctions = (T / 4, T / 2, 3 * T / 4)
            self.singular_time = T
        elif variant == "forward-regularized":
            def power(t):
                return self._power_forward(t, eps=eps)

            bridge = self._make_bridge(T / 2 + eps, 3 * T / 4, self._plateau,
                                       power, decreasing=False)
            self.pieces = [
                (0.0, T / 4, self._rise_forward),
                (T / 4, T / 2 + eps, self._plateau),
                (T / 2 + eps, 3 * T / 4, bridge),
                (3 * T / 4, T, power),
            ]
            self.junctions = (T / 4, T / 2 + eps, 3 * T / 4)
            self.singular_time = None
        else:  # pragma: no cover
            raise WeightConfigError(variant)

    def value_and_derivative(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        if self.singular_time is not None and np.any(t == self.singular_time):
            raise WeightSingularityError(
                f"gamma({self.params.variant}) is singular at t={self.singular_time}"
            )
        lo, hi = 0.0, self.params.T
        if np.any(t < lo) or np.any(t > hi):
            raise ValueError(f"t outside the evaluable range [{lo}, {hi}]")
        v = np.empty_like(t)
        d = np.empty_like(t)
        for (t0, t1, fn) in self.pieces:
            mask = (t >= t0) & (t <= t1) if t1 == hi else (t >= t0) & (t < t1)
            if np.any(mask):
                vv, dd = fn(t[mask])
                v[mask], d[mask] = vv, dd
        if scalar:
            return float(v[0]), float(d[0])
        return v, d


def _second_derivative(fn, t, h=1e-6):
    _, d_m = fn(np.array([t - h]))
    _, d_p = fn(np.array([t + h]))
    return (d_p[0] - d_m[0]) / (2.0 * h)


_CURVE_CACHE: dict[WeightParams, GammaCurve] = {}


def _curve(params: WeightParams) -> GammaCurve:
    curve = _CURVE_CACHE.get(params)
    if curve is None:
        curve = _CURVE_CACHE[params] = GammaCurve(params)
    return curve


def gamma(t, params: WeightParams):
    """Time profile value and first derivative at t for the given variant."""
    return _curve(params).value_and_derivative(t)


# ---------------------------------------------------------------------------
# weight system


@dataclass(frozen=True)
class PowerSpec:
    """Exponents of lam, mu, xi, theta plus an additive log constant."""

    lam: float = 0.0
    mu: float = 0.0
    xi: float = 0.0
    theta: float = 0.0
    log_const: float = 0.0

    def scaled(self, log_factor: float) -> "PowerSpec":
        return replace(self, log_const=self.log_const + log_factor)


class WeightSystem:
    """Cached log-weight tables on the tree time grid x mesh.

    ``log_xi[k, i]`` and ``ell[k, i]`` hold log(xi) and log(theta) at time
    level k and grid point i.  At a singular endpoint of an unregularized
    variant the row is marked and handled by limit rules rather than float
    arithmetic.
    """

    def __init__(self, params: WeightParams, base: WeightBase,
                 tree: ScenarioTree, mesh: SpatialMesh,
                 kappa: float = DEFAULT_KAPPA):
        if abs(params.T - tree.T) > 1e-12:
            raise WeightConfigError("params.T differs from the tree horizon")
        self.params = params
        self.base = base
        self.tree = tree
        self.mesh = mesh
        self.kappa = float(kappa)
        self.curve = _curve(params)

        mu, m, lam = params.mu, params.m, params.lam
        bump = np.exp(mu * (base.beta + 6.0 * m))           # e^{mu(beta+6m)}
        self._phi_shape = bump - mu * math.exp(6.0 * mu * (m + 1.0))
        if mu >= 1.0 and np.any(self._phi_shape >= 0.0):
            raise WeightConfigError("spatial weight shape lost its sign")

        times = tree.times
        K = len(times)
        self.gamma_values = np.empty(K)
        self.log_xi = np.empty((K, mesh.M))
        self.ell = np.empty((K, mesh.M))
        self.singular = np.zeros(K, dtype=bool)
        for k, t in enumerate(times):
            if self.curve.singular_time is not None and t == self.curve.singular_time:
                self.singular[k] = True
                self.gamma_values[k] = np.inf
                self.log_xi[k] = np.inf
                self.ell[k] = -np.inf
                continue
            g, _ = self.curve.value_and_derivative(float(t))
            self.gamma_values[k] = g
            self.log_xi[k] = math.log(g) + mu * (base.beta + 6.0 * m)
            self.ell[k] = lam * g * self._phi_shape
        for arr in (self.gamma_values, self.log_xi, self.ell, self.singular):
            arr.setflags(write=False)

    def companion(self, variant: str, eps: float | None = None) -> "WeightSystem":
        return WeightSystem(self.params.companion(variant, eps), self.base,
                            self.tree, self.mesh, kappa=self.kappa)

    # log-weight evaluation -------------------------------------------------

    def log_weight_row(self, depth: int, spec: PowerSpec,
                       strict: bool = True) -> np.ndarray:
        """log(lam^a mu^b xi^c theta^d) at one time level, per grid point.

        With ``strict`` (the default) a divergent limit at a singular
        endpoint raises; with ``strict=False`` it is returned as +inf,
        which the clamped tables saturate at their cap.
        """
        const = (spec.lam * math.log(self.params.lam)
                 + spec.mu * math.log(self.params.mu) + spec.log_const)
        if self.singular[depth]:
            return np.full(self.mesh.M, self._singular_limit(spec, const, strict))
        row = np.full(self.mesh.M, const)
        if spec.xi != 0.0:
            row = row + spec.xi * self.log_xi[depth]
        if spec.theta != 0.0:
            row = row + spec.theta * self.ell[depth]
        return row

    def _singular_limit(self, spec: PowerSpec, const: float,
                        strict: bool) -> float:
        # gamma -> +inf: the theta power dominates any xi power.
        if spec.theta > 0.0:
            return -np.inf
        if spec.theta < 0.0:
            if strict:
                raise WeightSingularityError(
                    "negative theta power at the singular endpoint of variant "
                    f"{self.params.variant!r}; use the regularized variant"
                )
            return np.inf
        if spec.xi > 0.0:
            if strict:
                raise WeightSingularityError(
                    "positive xi power diverges at the singular endpoint of "
                    f"variant {self.params.variant!r}"
                )
            return np.inf
        if spec.xi < 0.0:
            return -np.inf
        return const

    def log_weight_table(self, spec: PowerSpec, strict: bool = True) -> np.ndarray:
        return np.stack([self.log_weight_row(k, spec, strict=strict)
                         for k in range(self.tree.N + 1)])

    def clamped_weight_table(self, spec: PowerSpec,
                             support: np.ndarray | None = None) -> np.ndarray:
        """Linear-domain weights for optimizer use.

        The table is normalized by its largest finite log entry over the
        ``support`` region (by default everywhere) and clipped to
        [-kappa, 0] in the log domain, so the result lies in
        [exp(-kappa), 1] there.  Referencing the support where the term is
        actually evaluated keeps the penalty binding on that region, and
        the normalization makes the clamped table invariant under a common
        positive rescaling of the weight.  Singular +inf entries saturate
        at the cap.
        """
        logw = self.log_weight_table(spec, strict=False)
        finite = np.isfinite(logw)
        if support is not None:
            finite = finite & support
        ref = float(np.max(logw[finite])) if np.any(finite) else 0.0
        return np.exp(np.clip(logw - ref, -self.kappa, 0.0))


def build_weight_system(params: WeightParams, tree: ScenarioTree,
                        mesh: SpatialMesh, kappa: float = DEFAULT_KAPPA,
                        base: WeightBase | None = None) -> WeightSystem:
    if base is None:
        base = build_beta(mesh)
    return WeightSystem(params, base, tree, mesh, kappa=kappa)


def log_weight(t_index: int, x_index: int, power_spec: PowerSpec,
               system: WeightSystem) -> float:
    """Log-domain weight at one cached grid entry."""
    return float(system.log_weight_row(t_index, power_spec)[x_index])


# ---------------------------------------------------------------------------
# weighted quadrature


def _depth_indices(tree: ScenarioTree, depths) -> range:
    if depths is None:
        return range(tree.N + 1)
    lo, hi = depths
    return range(lo, hi + 1)


def weighted_expectation_norm(field: np.ndarray, power_spec: PowerSpec,
                              system: WeightSystem, tree: ScenarioTree,
                              mesh: SpatialMesh, depths=None,
                              clamped: bool = False) -> float:
    """log( E int w * field^2 dx dt ) by log-sum-exp in fixed order.

    Returns -inf for the zero field.  Raises if a +inf weight meets a
    nonzero value; restrict ``depths`` to exclude a singular endpoint in
    that case.
    """
    field = np.asarray(field)
    tau = time_weights(tree)
    clamped_table = None
    if clamped:
        clamped_table = np.log(system.clamped_weight_table(power_spec))
    pieces = []
    log_h = math.log(mesh.h)
    for k in _depth_indices(tree, depths):
        rows = field[tree.depth_slice(k)]
        if clamped_table is not None:
            logw = clamped_table[k]
        else:
            # rows outside ``depths`` are never touched, so a singular
            # endpoint can be excluded by the caller
            logw = system.log_weight_row(k, power_spec)
        with np.errstate(divide="ignore"):
            log_sq = 2.0 * np.log(np.abs(rows))
        bad = np.isposinf(logw)[None, :] & (rows != 0.0)
        if np.any(bad):
            raise WeightSingularityError(
                "field has support where the weight diverges; exclude the "
                "singular depth or use a regularized variant"
            )
        contrib = log_sq + logw[None, :] + (
            math.log(tau[k]) + log_h - k * math.log(2.0))
        pieces.append(contrib.ravel())
    stacked = np.concatenate(pieces)
    stacked = stacked[~np.isnan(stacked)]  # 0-field x (-inf) entries
    if stacked.size == 0:
        return -np.inf
    return float(logsumexp(stacked))


def weighted_slab_norm(slab: np.ndarray, power_spec: PowerSpec,
                       system: WeightSystem, tree: ScenarioTree,
                       mesh: SpatialMesh, depth: int) -> float:
    """log( E int w * slab^2 dx ) over the nodes of one depth (no dt factor)."""
    slab = np.atleast_2d(np.asarray(slab))
    if slab.shape != (tree.n_at_depth(depth), mesh.M):
        raise ValueError("slab shape does not match the depth")
    logw = system.log_weight_row(depth, power_spec)
    if np.any(np.isposinf(logw) & np.any(slab != 0.0, axis=0)):
        raise WeightSingularityError("slab weight diverges at this depth")
    with np.errstate(divide="ignore"):
        log_sq = 2.0 * np.log(np.abs(slab))
    contrib = (log_sq + logw[None, :] + math.log(mesh.h)
               - depth * math.log(2.0)).ravel()
    contrib = contrib[~np.isnan(contrib)]
    if contrib.size == 0:
        return -np.inf
    return float(logsumexp(contrib))
