"""Independent reference solvers used as oracles by tests and the selftest.

Two oracles check the control synthesis end to end:

* a dense solve of the full quadratic optimality system on a tiny tree,
  built by applying the control-to-state map to unit vectors; and
* a deterministic parabolic null-control solver that never touches the
  tree: plain time-stepping arrays, banded solves from scipy, and a dense
  normal-equation solve.  With noise off and frozen coefficients the tree
  problem collapses onto it.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_banded

from .mesh import SpatialMesh, gradient
from .scenario import ScenarioTree, time_weights
from .weights import WeightSystem
from .hum import (CONTROL_WEIGHT, GRADIENT_WEIGHT, STATE_WEIGHT, HumConfig,
                  QuadraticControlForm)

__all__ = [
    "dense_control_solution",
    "DeterministicHumOracle",
]


def _jacobi_solve(H: np.ndarray, b: np.ndarray) -> np.ndarray:
    # symmetric diagonal rescaling; the raw Hessian spans the clamp range
    d = np.sqrt(np.diag(H))
    sol = np.linalg.solve(H / d[:, None] / d[None, :], b / d)
    return sol / d


def dense_control_solution(form: QuadraticControlForm) -> np.ndarray:
    """Direct solve of the quadratic optimality system via a dense Hessian."""
    dofs = np.argwhere(form.dof_masks.reshape(-1) > 0.0).ravel()
    shape = form.dof_masks.shape
    n = dofs.size
    H = np.empty((n, n))
    for j, idx in enumerate(dofs):
        e = np.zeros(shape).reshape(-1)
        e[idx] = 1.0
        H[:, j] = form.hessian_apply(e.reshape(shape)).reshape(-1)[dofs]
    b = form.rhs().reshape(-1)[dofs]
    sol = _jacobi_solve(H, b)
    out = np.zeros(shape).reshape(-1)
    out[dofs] = sol
    return out.reshape(shape)


class DeterministicHumOracle:
    """Penalized null control for the deterministic parabolic counterpart.

    The dynamics are the pathwise backward recursion with node-independent
    data: one spatial field per time level.  The quadratic objective uses
    the same clamped weight tables and quadrature constants as the tree
    functional, so with deterministic data the two minimizers coincide.
    """

    def __init__(self, config: HumConfig, a_profile: np.ndarray,
                 y_T: np.ndarray, system: WeightSystem, tree: ScenarioTree,
                 mesh: SpatialMesh):
        if config.direction != "backward":
            raise ValueError("the deterministic oracle covers the backward "
                             "direction")
        self.config = config
        self.mesh = mesh
        self.N = tree.N
        self.dt = tree.dt
        self.y_T = np.asarray(y_T, dtype=float)
        self.tau = time_weights(tree)
        a_profile = np.asarray(a_profile, dtype=float)
        if a_profile.ndim == 1:
            a_profile = np.repeat(a_profile[None, :], tree.N, axis=0)
        self._banded = []
        h = mesh.h
        for k in range(tree.N):
            a_ext = np.pad(a_profile[k], (1, 1), mode="edge")
            a_face = 0.5 * (a_ext[:-1] + a_ext[1:])
            ab = np.zeros((3, mesh.M))
            ab[1] = 1.0 + self.dt * (a_face[:-1] + a_face[1:]) / h**2
            ab[0, 1:] = -self.dt * a_face[1:-1] / h**2
            ab[2, :-1] = -self.dt * a_face[1:-1] / h**2
            self._banded.append(ab)

        plain = system.companion(
            system.params.variant.removesuffix("-regularized"))
        support = np.zeros((tree.N + 1, mesh.M), dtype=bool)
        support[:-1, mesh.ctrl_mask] = True
        self.w_u = (math.exp(config.kappa / 3.0)
                    * plain.clamped_weight_table(CONTROL_WEIGHT,
                                                 support=support))
        self.w_y = system.clamped_weight_table(STATE_WEIGHT)
        self.w_g = (system.clamped_weight_table(GRADIENT_WEIGHT)
                    if config.include_gradient_penalty else None)
        self.mask = mesh.ctrl_mask.astype(float)

    def propagate(self, u: np.ndarray) -> np.ndarray:
        """Backward time-stepping under the control; returns (N+1, M) states."""
        y = np.zeros((self.N + 1, self.mesh.M))
        y[self.N] = self.y_T
        for k in range(self.N - 1, -1, -1):
            rhs = y[k + 1] - self.dt * self.mask * u[k]
            y[k] = solve_banded((1, 1), self._banded[k], rhs)
        return y

    def objective(self, u: np.ndarray) -> float:
        y = self.propagate(u)
        h = self.mesh.h
        v = 0.5 * float(np.sum(self.tau[:-1, None] * h * self.w_u[:-1]
                               * (self.mask * u) ** 2))
        v += 0.5 * float(np.sum(self.tau[:, None] * h * self.w_y * y * y))
        if self.w_g is not None:
            gy = gradient(y, self.mesh)
            v += 0.5 * float(np.sum(self.tau[:, None] * h * self.w_g
                                    * gy * gy))
        v += float(np.sum(h * y[0] ** 2)) / (2.0 * self.config.eps)
        return v

    def solve(self) -> tuple[np.ndarray, np.ndarray]:
        """Dense normal-equation solve; returns (control, state trajectory)."""
        n_ctrl = int(self.mask.sum())
        ctrl_idx = np.argwhere(self.mask > 0).ravel()
        dim = self.N * n_ctrl

        def unpack(vec):
            u = np.zeros((self.N, self.mesh.M))
            u[:, ctrl_idx] = vec.reshape(self.N, n_ctrl)
            return u

        y_free = self.propagate(np.zeros((self.N, self.mesh.M)))
        basis_states = np.empty((dim, self.N + 1, self.mesh.M))
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = 1.0
            basis_states[j] = self.propagate(unpack(e)) - y_free

        h = self.mesh.h
        qy = self.tau[:, None] * h * self.w_y
        qg = (self.tau[:, None] * h * self.w_g
              if self.w_g is not None else None)
        qu = (self.tau[:-1, None] * h * self.w_u[:-1])[:, ctrl_idx].reshape(-1)

        def state_pair(sa, sb):
            val = float(np.sum(qy * sa * sb))
            if qg is not None:
                val += float(np.sum(qg * gradient(sa, self.mesh)
                                    * gradient(sb, self.mesh)))
            val += float(np.sum(h * sa[0] * sb[0])) / self.config.eps
            return val

        H = np.empty((dim, dim))
        rhs = np.empty(dim)
        for i in range(dim):
            rhs[i] = -state_pair(basis_states[i], y_free)
            for j in range(i, dim):
                H[i, j] = H[j, i] = state_pair(basis_states[i],
                                               basis_states[j])
        H[np.arange(dim), np.arange(dim)] += qu
        sol = _jacobi_solve(H, rhs)
        u = unpack(sol)
        return u, self.propagate(u)
