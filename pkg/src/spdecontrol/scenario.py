"""Discrete probability space: non-recombining binary Brownian scenario tree.

Nodes are stored heap-style: the root is index 0, the children of node i are
2i+1 (up move, +sqrt(dt)) and 2i+2 (down move, -sqrt(dt)).  An adapted random
field is an array of shape (n_nodes, M) holding one spatial field per node;
the depth of a node is its time level.  Because every node corresponds to a
unique increment-sign prefix, node indexing itself encodes adaptedness.

All expectations are computed by iterated sibling-pair averaging, which makes
the tower property hold bitwise and keeps reductions deterministic regardless
of thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import SpatialMesh

__all__ = [
    "TreeConfigError",
    "ScenarioTree",
    "build_tree",
    "expectation",
    "conditional_expectation",
    "martingale_coefficient",
    "sample_adapted_coefficients",
    "measurability_probe",
    "alloc_field",
    "time_weights",
]

MAX_DEPTH = 16


class TreeConfigError(ValueError):
    """Tree depth or horizon outside the supported range."""


@dataclass(frozen=True)
class ScenarioTree:
    """Binary tree of Brownian increment signs up to depth N on [0, T]."""

    N: int
    T: float

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def sqrt_dt(self) -> float:
        return float(np.sqrt(self.dt))

    @property
    def n_nodes(self) -> int:
        return 2 ** (self.N + 1) - 1

    @property
    def n_leaves(self) -> int:
        return 2**self.N

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.N + 1)

    def depth_start(self, k: int) -> int:
        return 2**k - 1

    def depth_slice(self, k: int) -> slice:
        return slice(2**k - 1, 2 ** (k + 1) - 1)

    def n_at_depth(self, k: int) -> int:
        return 2**k

    def leaf_slice(self) -> slice:
        return self.depth_slice(self.N)

    def depth_of(self, i: int) -> int:
        return (i + 1).bit_length() - 1

    def children(self, i: int) -> tuple[int, int]:
        return 2 * i + 1, 2 * i + 2

    def parent(self, i: int) -> int:
        if i == 0:
            raise ValueError("root has no parent")
        return (i - 1) // 2

    def probability(self, i: int) -> float:
        """Exact dyadic probability of the path prefix ending at node i."""
        return 0.5 ** self.depth_of(i)

    def node_path(self, i: int) -> str:
        """Increment-sign string from the root, 'u' for +sqrt(dt), 'd' for -."""
        signs = []
        while i > 0:
            signs.append("u" if i % 2 == 1 else "d")
            i = (i - 1) // 2
        return "".join(reversed(signs))


def build_tree(N: int, T: float) -> ScenarioTree:
    if not 1 <= N <= MAX_DEPTH:
        raise TreeConfigError(f"need 1 <= N <= {MAX_DEPTH}, got {N}")
    if not 0.0 < T < 1.0:
        raise TreeConfigError(f"need 0 < T < 1, got {T}")
    return ScenarioTree(N=int(N), T=float(T))


def alloc_field(tree: ScenarioTree, mesh: SpatialMesh) -> np.ndarray:
    return np.zeros((tree.n_nodes, mesh.M))


def time_weights(tree: ScenarioTree) -> np.ndarray:
    """Trapezoid weights over the depth levels 0..N (they sum to T)."""
    w = np.full(tree.N + 1, tree.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _pair_average(values: np.ndarray) -> np.ndarray:
    # Sibling nodes are adjacent within a depth slab.
    return 0.5 * (values[0::2] + values[1::2])


def conditional_expectation(field: np.ndarray, tree: ScenarioTree,
                            from_depth: int, to_depth: int) -> np.ndarray:
    """E[field(from_depth) | depth to_depth], one row per node at to_depth."""
    if not 0 <= to_depth <= from_depth <= tree.N:
        raise ValueError("need 0 <= to_depth <= from_depth <= N")
    values = np.asarray(field)[tree.depth_slice(from_depth)]
    for _ in range(from_depth - to_depth):
        values = _pair_average(values)
    return values


def expectation(field: np.ndarray, tree: ScenarioTree, depth: int) -> np.ndarray:
    """Probability-weighted average of the node values at a depth."""
    return conditional_expectation(field, tree, depth, 0)[0]


def martingale_coefficient(child_up: np.ndarray, child_down: np.ndarray,
                           dt: float) -> np.ndarray:
    """Exact two-point martingale representation coefficient.

    Returns Z with X_child = E[X_child] + Z * dW for both children, where
    dW = +-sqrt(dt).
    """
    if dt <= 0.0:
        raise ValueError(f"need dt > 0, got {dt}")
    return (child_up - child_down) / (2.0 * np.sqrt(dt))


def sample_adapted_coefficients(tree: ScenarioTree, mesh: SpatialMesh, seed: int,
                                c0: float, c1: float,
                                roughness: float = 0.5) -> np.ndarray:
    """Random elliptic coefficient field, adapted by construction.

    Per node, a(node, x) = clamp(base(x) + roughness * sum_j s_j(path) *
    sin(j pi x~) / j^2, c0, c1) where x~ is the normalized coordinate, the
    s_j are tanh-compressed weighted sums of the increment signs along the
    path prefix (bounded, smooth in the path), and base sits mid-band.
    Clamping enforces the ellipticity band [c0, c1] unconditionally.
    """
    if not 0.0 < c0 < c1:
        raise ValueError(f"need 0 < c0 < c1, got ({c0}, {c1})")
    rng = np.random.default_rng(seed)
    n_modes = 3
    mode_weights = rng.standard_normal((n_modes, tree.N))
    x_norm = (mesh.x - mesh.a_end) / (mesh.b_end - mesh.a_end)
    modes = np.array([np.sin((j + 1) * np.pi * x_norm) / (j + 1) ** 2
                      for j in range(n_modes)])
    base = 0.5 * (c0 + c1) + 0.2 * (c1 - c0) * np.sin(np.pi * x_norm)
    amplitude = roughness * 0.25 * (c1 - c0)

    field = np.empty((tree.n_nodes, mesh.M))
    signs = np.zeros((tree.n_nodes, tree.N))
    field[0] = base
    for i in range(tree.n_nodes):
        k = tree.depth_of(i)
        if k < tree.N:
            up, down = tree.children(i)
            signs[up] = signs[down] = signs[i]
            signs[up, k] = 1.0
            signs[down, k] = -1.0
        if k > 0:
            s = np.tanh(mode_weights[:, :k] @ signs[i, :k] / np.sqrt(k))
            field[i] = base + amplitude * (s @ modes)
    np.clip(field, c0, c1, out=field)
    return field


def measurability_probe(field: np.ndarray, tree: ScenarioTree,
                        step_fn=None) -> bool:
    """Adaptedness audit for a node-indexed field.

    Without a ``step_fn`` only structural properties are checked (shape and
    finiteness); node indexing already guarantees that each value is a
    function of its path prefix.  With a ``step_fn(node, value, sign) ->
    child_value`` describing the generating forward recursion, every subtree
    is replayed from its stored root value and compared bitwise against the
    stored descendants, which catches values that were computed from
    future-dependent data.
    """
    field = np.asarray(field)
    if field.shape[0] != tree.n_nodes or not np.all(np.isfinite(field)):
        return False
    if step_fn is None:
        return True
    for i in range(tree.depth_start(tree.N)):
        up, down = tree.children(i)
        if not np.array_equal(step_fn(i, field[i], +1), field[up]):
            return False
        if not np.array_equal(step_fn(i, field[i], -1), field[down]):
            return False
    return True
