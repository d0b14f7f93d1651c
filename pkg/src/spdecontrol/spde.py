"""Forward and backward SPDE integrators on the scenario tree.

Both solvers advance one depth level at a time with a semi-implicit step:
implicit in the divergence-form diffusion (a batched symmetric tridiagonal
solve per node), explicit in drift, reaction and sources, which are frozen
at the step's source node so each branch stays linear.  The backward solver
recovers the martingale component exactly from the two children before its
implicit step; its control-to-state map has a hand-written transpose, so the
adjoint identities used by the control synthesis hold to rounding error.

The diffusion coefficient of a step is frozen at the step's source node as
well; the resulting system matrix is shared by both children.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import (EllipticityError, SpatialMesh, gradient, l2_inner)
from .scenario import ScenarioTree, martingale_coefficient, time_weights

__all__ = [
    "StabilityError",
    "ForwardProblem",
    "BackwardProblem",
    "StatePair",
    "TreeOperator",
    "solve_forward",
    "solve_backward",
    "apply_adjoint",
    "adjoint_discrepancy",
    "duality_identity",
    "node_quadrature",
    "control_inner",
    "state_inner",
]

STABILITY_GUARD = 2.0


class StabilityError(ValueError):
    """Explicit lower-order terms are too large for the time step."""


def _as_adapted(field, tree: ScenarioTree, mesh: SpatialMesh, name: str):
    if field is None:
        return None
    field = np.asarray(field, dtype=float)
    if field.shape != (tree.n_nodes, mesh.M):
        raise ValueError(f"{name} must have shape (n_nodes, M), got {field.shape}")
    if not np.all(np.isfinite(field)):
        raise ValueError(f"{name} contains non-finite entries")
    return field


@dataclass
class ForwardProblem:
    """Data for dz - div(a grad z) dt = (<a_vec, grad z> + alpha z + phi1
    + div b) dt + phi2 dW, z(0) = z0."""

    a: np.ndarray                      # adapted diffusion coefficient
    z0: np.ndarray                     # initial spatial field
    drift_vec: np.ndarray | None = None
    alpha: np.ndarray | None = None
    rho2: np.ndarray | None = None     # unused by the forward dynamics
    src_phi1: np.ndarray | None = None
    src_div_b: np.ndarray | None = None
    noise_phi2: np.ndarray | None = None


@dataclass
class BackwardProblem:
    """Data for dy + div(a grad y) dt = (<a_vec, grad y> + alpha y + rho2 Y
    + phi + div b + 1_ctrl u) dt + Y dW, y(T) = y_T.

    ``diffusion_sign`` selects the sign of the div(a grad) term; +1 is the
    well-posed terminal-value convention used by every control problem here.
    """

    a: np.ndarray
    y_T: np.ndarray                    # one spatial field per leaf
    drift_vec: np.ndarray | None = None
    alpha: np.ndarray | None = None
    rho2: np.ndarray | None = None
    src_phi: np.ndarray | None = None
    src_div_b: np.ndarray | None = None
    control_u: np.ndarray | None = None
    diffusion_sign: int = +1


@dataclass
class StatePair:
    """Backward solution (y, Y); Y rows at leaf depth are zero by convention."""

    y: np.ndarray
    Y: np.ndarray


class _BatchTridiag:
    """Prefactored batch of symmetric tridiagonal systems, one per node."""

    def __init__(self, diag: np.ndarray, off: np.ndarray):
        B, M = diag.shape
        self.off = off
        self.w = np.empty((B, M - 1))
        self.dprime = np.empty((B, M))
        self.dprime[:, 0] = diag[:, 0]
        for i in range(1, M):
            self.w[:, i - 1] = off[:, i - 1] / self.dprime[:, i - 1]
            self.dprime[:, i] = diag[:, i] - self.w[:, i - 1] * off[:, i - 1]
        if np.any(self.dprime == 0.0):
            raise StabilityError("singular implicit step matrix")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        B, M = rhs.shape
        y = np.empty_like(rhs)
        y[:, 0] = rhs[:, 0]
        for i in range(1, M):
            y[:, i] = rhs[:, i] - self.w[:, i - 1] * y[:, i - 1]
        x = np.empty_like(rhs)
        x[:, -1] = y[:, -1] / self.dprime[:, -1]
        for i in range(M - 2, -1, -1):
            x[:, i] = (y[:, i] - self.off[:, i] * x[:, i + 1]) / self.dprime[:, i]
        return x

    def select(self, rows) -> "_BatchTridiag":
        out = object.__new__(_BatchTridiag)
        out.off = self.off[rows]
        out.w = self.w[rows]
        out.dprime = self.dprime[rows]
        return out


class TreeOperator:
    """Precomputed per-depth step machinery shared by solves and adjoints."""

    def __init__(self, tree: ScenarioTree, mesh: SpatialMesh, a: np.ndarray,
                 drift_vec=None, alpha=None, rho2=None, diffusion_sign: int = +1,
                 c0: float = 0.0):
        self.tree = tree
        self.mesh = mesh
        self.diffusion_sign = int(diffusion_sign)
        a = _as_adapted(a, tree, mesh, "a")
        if np.min(a) <= max(c0, 0.0):
            raise EllipticityError(
                f"diffusion coefficient minimum {np.min(a):g} violates the "
                f"ellipticity floor {c0:g}")
        self.drift_vec = _as_adapted(drift_vec, tree, mesh, "drift_vec")
        self.alpha = _as_adapted(alpha, tree, mesh, "alpha")
        self.rho2 = _as_adapted(rho2, tree, mesh, "rho2")
        self._check_stability()

        dt, h = tree.dt, mesh.h
        self._factors: list[_BatchTridiag] = []
        for k in range(tree.N):
            a_k = a[tree.depth_slice(k)]
            a_ext = np.pad(a_k, [(0, 0), (1, 1)], mode="edge")
            a_face = 0.5 * (a_ext[:, :-1] + a_ext[:, 1:])
            lo, hi = a_face[:, :-1], a_face[:, 1:]
            sgn = self.diffusion_sign
            diag = 1.0 + sgn * dt * (lo + hi) / h**2
            off = -sgn * dt * a_face[:, 1:-1] / h**2
            if sgn < 0 and np.any(diag <= np.abs(
                    np.pad(off, [(0, 0), (1, 0)])) + np.abs(
                    np.pad(off, [(0, 0), (0, 1)]))):
                raise StabilityError(
                    "anti-diffusive convention needs dt below the explicit limit")
            self._factors.append(_BatchTridiag(diag, off))

    def _check_stability(self):
        dt, h = self.tree.dt, self.mesh.h
        bound = 0.0
        if self.drift_vec is not None:
            bound += dt * float(np.max(np.abs(self.drift_vec))) / h
        if self.alpha is not None:
            bound += dt * float(np.max(np.abs(self.alpha)))
        if self.rho2 is not None:
            bound += np.sqrt(dt) * float(np.max(np.abs(self.rho2)))
        if bound > STABILITY_GUARD:
            raise StabilityError(
                f"explicit lower-order bound {bound:g} exceeds the stability "
                f"guard {STABILITY_GUARD:g}; reduce dt or the coefficients")

    # elementary per-depth operations ---------------------------------------

    def solve_A(self, k: int, rhs: np.ndarray) -> np.ndarray:
        return self._factors[k].solve(rhs)

    def apply_L(self, k: int, z: np.ndarray) -> np.ndarray:
        sl = self.tree.depth_slice(k)
        out = np.zeros_like(z)
        if self.drift_vec is not None:
            out += self.drift_vec[sl] * gradient(z, self.mesh)
        if self.alpha is not None:
            out += self.alpha[sl] * z
        return out

    def apply_LT(self, k: int, v: np.ndarray) -> np.ndarray:
        sl = self.tree.depth_slice(k)
        out = np.zeros_like(v)
        if self.drift_vec is not None:
            out -= gradient(self.drift_vec[sl] * v, self.mesh)
        if self.alpha is not None:
            out += self.alpha[sl] * v
        return out

    def _gather(self, field, k):
        return None if field is None else field[self.tree.depth_slice(k)]

    # forward dynamics -------------------------------------------------------

    def forward_solve(self, z0, phi1=None, div_b=None, phi2=None,
                      ctrl_u=None, ctrl_U=None) -> np.ndarray:
        """March the forward dynamics from the root to the leaves."""
        tree, mesh = self.tree, self.mesh
        dt, sdt = tree.dt, tree.sqrt_dt
        mask = mesh.ctrl_mask.astype(float)
        z = np.zeros((tree.n_nodes, mesh.M))
        z[0] = z0
        for k in range(tree.N):
            sl = tree.depth_slice(k)
            slab = z[sl]
            rhs = slab + dt * self.apply_L(k, slab)
            p1 = self._gather(phi1, k)
            if p1 is not None:
                rhs = rhs + dt * p1
            b_k = self._gather(div_b, k)
            if b_k is not None:
                rhs = rhs + dt * gradient(b_k, mesh)
            u_k = self._gather(ctrl_u, k)
            if u_k is not None:
                rhs = rhs + dt * mask * u_k
            half = self.solve_A(k, rhs)
            noise = None
            p2 = self._gather(phi2, k)
            U_k = self._gather(ctrl_U, k)
            if U_k is not None:
                p2 = U_k if p2 is None else p2 + U_k
            if p2 is not None:
                noise = self.solve_A(k, p2)
            child = z[tree.depth_slice(k + 1)]
            if noise is None:
                child[0::2] = half
                child[1::2] = half
            else:
                child[0::2] = half + sdt * noise
                child[1::2] = half - sdt * noise
        return z

    def forward_step_fn(self, phi1=None, div_b=None, phi2=None,
                        ctrl_u=None, ctrl_U=None):
        """Single-node replay of the forward recursion, for adaptedness audits."""
        tree, mesh = self.tree, self.mesh
        dt, sdt = tree.dt, tree.sqrt_dt
        mask = mesh.ctrl_mask.astype(float)

        def step(i: int, value: np.ndarray, sign: int) -> np.ndarray:
            k = tree.depth_of(i)
            j = i - tree.depth_start(k)
            row = value[None, :]
            rhs = row.copy()
            if self.drift_vec is not None:
                rhs += dt * self.drift_vec[i][None, :] * gradient(row, mesh)
            if self.alpha is not None:
                rhs += dt * self.alpha[i][None, :] * row
            if phi1 is not None:
                rhs += dt * phi1[i][None, :]
            if div_b is not None:
                rhs += dt * gradient(div_b[i][None, :], mesh)
            if ctrl_u is not None:
                rhs += dt * mask[None, :] * ctrl_u[i][None, :]
            solver = self._factors[k].select(slice(j, j + 1))
            out = solver.solve(rhs)
            p2 = None
            if phi2 is not None:
                p2 = phi2[i][None, :].copy()
            if ctrl_U is not None:
                p2 = ctrl_U[i][None, :] if p2 is None else p2 + ctrl_U[i][None, :]
            if p2 is not None:
                out = out + sign * sdt * solver.solve(p2)
            return out[0]

        return step

    # backward dynamics ------------------------------------------------------

    def backward_solve(self, y_T, phi=None, div_b=None, ctrl_u=None) -> StatePair:
        """March the backward dynamics from the leaves to the root.

        At each node the martingale component is the exact two-point
        representation coefficient of the children, so the returned pair
        satisfies the representation identity by construction.
        """
        tree, mesh = self.tree, self.mesh
        dt = tree.dt
        mask = mesh.ctrl_mask.astype(float)
        y = np.zeros((tree.n_nodes, mesh.M))
        Y = np.zeros((tree.n_nodes, mesh.M))
        y_T = np.asarray(y_T, dtype=float)
        if y_T.shape != (tree.n_leaves, mesh.M):
            raise ValueError("y_T must hold one spatial field per leaf")
        y[tree.leaf_slice()] = y_T
        for k in range(tree.N - 1, -1, -1):
            child = y[tree.depth_slice(k + 1)]
            up, dn = child[0::2], child[1::2]
            Z = martingale_coefficient(up, dn, dt)
            yhat = 0.5 * (up + dn)
            f = np.zeros_like(yhat)
            p_k = self._gather(phi, k)
            if p_k is not None:
                f += p_k
            b_k = self._gather(div_b, k)
            if b_k is not None:
                f += gradient(b_k, mesh)
            u_k = self._gather(ctrl_u, k)
            if u_k is not None:
                f += mask * u_k
            if self.rho2 is not None:
                f += self.rho2[tree.depth_slice(k)] * Z
            w = self.solve_A(k, yhat - dt * f)
            sl = tree.depth_slice(k)
            y[sl] = w - dt * self.apply_L(k, w)
            Y[sl] = Z
        return StatePair(y=y, Y=Y)

    # control-to-state maps and their plain transposes -----------------------

    def backward_control_map(self, u: np.ndarray) -> np.ndarray:
        """y component of the backward solve with control u and zero data."""
        zero_T = np.zeros((self.tree.n_leaves, self.mesh.M))
        return self.backward_solve(zero_T, ctrl_u=u).y

    def backward_control_transpose(self, w: np.ndarray) -> np.ndarray:
        """Plain-coordinate transpose of :meth:`backward_control_map`."""
        tree, mesh = self.tree, self.mesh
        dt, sdt = tree.dt, tree.sqrt_dt
        mask = mesh.ctrl_mask.astype(float)
        vbar = np.array(w, dtype=float, copy=True)
        g = np.zeros_like(vbar)
        for k in range(tree.N):
            sl = tree.depth_slice(k)
            vk = vbar[sl]
            q = self.solve_A(k, vk - dt * self.apply_LT(k, vk))
            g[sl] = -dt * mask * q
            if k + 1 < tree.N:
                child = vbar[tree.depth_slice(k + 1)]
                if self.rho2 is not None:
                    r = self.rho2[sl]
                    child[0::2] += 0.5 * (1.0 - sdt * r) * q
                    child[1::2] += 0.5 * (1.0 + sdt * r) * q
                else:
                    child[0::2] += 0.5 * q
                    child[1::2] += 0.5 * q
        return g

    def forward_control_map(self, u: np.ndarray, U: np.ndarray) -> np.ndarray:
        """State reached from zero initial data under drift and noise controls."""
        zero0 = np.zeros(self.mesh.M)
        return self.forward_solve(zero0, ctrl_u=u, ctrl_U=U)

    def forward_control_transpose(self, w: np.ndarray):
        tree, mesh = self.tree, self.mesh
        dt, sdt = tree.dt, tree.sqrt_dt
        mask = mesh.ctrl_mask.astype(float)
        vbar = np.array(w, dtype=float, copy=True)
        ubar = np.zeros_like(vbar)
        Ubar = np.zeros_like(vbar)
        for k in range(tree.N - 1, -1, -1):
            child = vbar[tree.depth_slice(k + 1)]
            xu = self.solve_A(k, child[0::2])
            xd = self.solve_A(k, child[1::2])
            s = xu + xd
            sl = tree.depth_slice(k)
            ubar[sl] = dt * mask * s
            Ubar[sl] = sdt * (xu - xd)
            vbar[sl] += s + dt * self.apply_LT(k, s)
        return ubar, Ubar


# ---------------------------------------------------------------------------
# public solver entry points


def _operator_for(problem, tree, mesh) -> TreeOperator:
    sign = getattr(problem, "diffusion_sign", +1)
    return TreeOperator(tree, mesh, problem.a, drift_vec=problem.drift_vec,
                        alpha=problem.alpha, rho2=problem.rho2,
                        diffusion_sign=sign)


def solve_forward(problem: ForwardProblem, tree: ScenarioTree,
                  mesh: SpatialMesh) -> np.ndarray:
    op = TreeOperator(tree, mesh, problem.a, drift_vec=problem.drift_vec,
                      alpha=problem.alpha)
    return op.forward_solve(problem.z0, phi1=problem.src_phi1,
                            div_b=problem.src_div_b, phi2=problem.noise_phi2)


def solve_backward(problem: BackwardProblem, tree: ScenarioTree,
                   mesh: SpatialMesh) -> StatePair:
    op = _operator_for(problem, tree, mesh)
    return op.backward_solve(problem.y_T, phi=problem.src_phi,
                             div_b=problem.src_div_b, ctrl_u=problem.control_u)


# ---------------------------------------------------------------------------
# quadrature-weighted pairings and adjoint wrappers


def node_quadrature(tree: ScenarioTree, mesh: SpatialMesh) -> np.ndarray:
    """Per-node weight P(node) * tau_depth * h of the discrete E int dx dt."""
    tau = time_weights(tree)
    q = np.empty(tree.n_nodes)
    for k in range(tree.N + 1):
        q[tree.depth_slice(k)] = 0.5**k * tau[k] * mesh.h
    return q


def state_inner(a: np.ndarray, b: np.ndarray, tree: ScenarioTree,
                mesh: SpatialMesh) -> float:
    q = node_quadrature(tree, mesh)
    return float(np.sum(q[:, None] * a * b))


def control_inner(u: np.ndarray, v: np.ndarray, tree: ScenarioTree,
                  mesh: SpatialMesh) -> float:
    """Same pairing as :func:`state_inner`; controls vanish at leaf depth."""
    return state_inner(u, v, tree, mesh)


def apply_adjoint(problem_or_op, w: np.ndarray, tree: ScenarioTree,
                  mesh: SpatialMesh) -> np.ndarray:
    """Adjoint of the backward control-to-state map in the E int dx dt pairing."""
    if isinstance(problem_or_op, TreeOperator):
        op = problem_or_op
    else:
        op = _operator_for(problem_or_op, tree, mesh)
    q = node_quadrature(tree, mesh)[:, None]
    g = op.backward_control_transpose(q * np.asarray(w))
    out = np.zeros_like(g)
    nonleaf = slice(0, tree.depth_start(tree.N))
    out[nonleaf] = g[nonleaf] / q[nonleaf]
    return out


def adjoint_discrepancy(op: TreeOperator, tree: ScenarioTree, mesh: SpatialMesh,
                        seed: int = 0, n_pairs: int = 10) -> float:
    """Max relative dot-product defect of the backward control map pair."""
    rng = np.random.default_rng(seed)
    q = node_quadrature(tree, mesh)[:, None]
    mask = mesh.ctrl_mask.astype(float)
    worst = 0.0
    for _ in range(n_pairs):
        u = rng.standard_normal((tree.n_nodes, mesh.M)) * mask
        u[tree.leaf_slice()] = 0.0
        w = rng.standard_normal((tree.n_nodes, mesh.M))
        lhs = state_inner(op.backward_control_map(u), w, tree, mesh)
        g = op.backward_control_transpose(q * w)
        rhs = float(np.sum(u * g))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    return worst


def duality_identity(fwd_op: TreeOperator, back_op: TreeOperator,
                     z: np.ndarray, pair: StatePair,
                     fwd_sources: dict | None = None,
                     back_sources: dict | None = None
                     ) -> tuple[float, float, float]:
    """Both sides of the discrete integration-by-parts identity.

    Returns (endpoint difference, accumulated per-step cross terms, scale);
    the first two agree to rounding relative to the scale because each
    step's defect is evaluated with the same algebra the solvers use.
    Requires both operators to share the diffusion coefficient and
    tree/mesh.
    """
    tree, mesh = fwd_op.tree, fwd_op.mesh
    dt = tree.dt
    fs = fwd_sources or {}
    bs = back_sources or {}
    mask = mesh.ctrl_mask.astype(float)

    leaves = tree.leaf_slice()
    terminal = float(np.sum(0.5**tree.N
                            * l2_inner(z[leaves], pair.y[leaves], mesh)))
    initial = float(l2_inner(z[0], pair.y[0], mesh))
    lhs = terminal - initial
    scale = abs(terminal) + abs(initial)

    total = 0.0
    for k in range(tree.N):
        sl = tree.depth_slice(k)
        child = pair.y[tree.depth_slice(k + 1)]
        rhat = 0.5 * (child[0::2] + child[1::2])
        z_k = z[sl]
        Ainv_rhat = back_op.solve_A(k, rhat)
        cross = fwd_op.apply_L(k, z_k) + back_op.apply_LT(k, z_k)

        f1 = np.zeros_like(z_k)
        if fs.get("phi1") is not None:
            f1 += fs["phi1"][sl]
        if fs.get("div_b") is not None:
            f1 += gradient(fs["div_b"][sl], mesh)
        g = np.zeros_like(z_k)
        if bs.get("phi") is not None:
            g += bs["phi"][sl]
        if bs.get("div_b") is not None:
            g += gradient(bs["div_b"][sl], mesh)
        if bs.get("u") is not None:
            g += mask * bs["u"][sl]
        if back_op.rho2 is not None:
            g += back_op.rho2[sl] * pair.Y[sl]

        defect = dt * l2_inner(cross, Ainv_rhat, mesh)
        defect += dt * l2_inner(f1, Ainv_rhat, mesh)
        if fs.get("phi2") is not None:
            defect += dt * l2_inner(fwd_op.solve_A(k, fs["phi2"][sl]),
                                    pair.Y[sl], mesh)
        if np.any(g):
            Ag = back_op.solve_A(k, g)
            defect += dt * l2_inner(z_k, Ag - dt * back_op.apply_L(k, Ag), mesh)
        total += float(np.sum(0.5**k * defect))
        scale += float(np.sum(0.5**k * np.abs(defect)))
    return lhs, total, scale
