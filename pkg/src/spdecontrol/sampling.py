"""Documented random data generators for ensembles and experiments.

Everything is driven by ``numpy.random.default_rng`` seeded explicitly, and
child seeds are derived from a master seed by hashing ``master:label``, so
every ensemble member is reproducible in isolation.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .mesh import SpatialMesh
from .scenario import ScenarioTree, sample_adapted_coefficients

__all__ = [
    "seed_split",
    "smooth_field",
    "random_spatial_field",
    "random_adapted_field",
    "random_terminal_data",
    "random_bounded_adapted",
    "standard_coefficients",
]


def seed_split(master_seed: int, label: str) -> int:
    """Deterministic, collision-resistant child seed from master and label."""
    if not label:
        raise ValueError("label must be nonempty")
    digest = hashlib.sha256(f"{master_seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def smooth_field(mesh: SpatialMesh, coeffs: np.ndarray) -> np.ndarray:
    """Low-frequency sine combination with 1/j decay; zero at the boundary."""
    x_norm = (mesh.x - mesh.a_end) / (mesh.b_end - mesh.a_end)
    out = np.zeros(mesh.M)
    for j, c in enumerate(np.atleast_1d(coeffs), start=1):
        out += c * np.sin(j * np.pi * x_norm) / j
    return out


def random_spatial_field(rng: np.random.Generator, mesh: SpatialMesh,
                         scale: float = 1.0, n_modes: int = 4) -> np.ndarray:
    return scale * smooth_field(mesh, rng.standard_normal(n_modes))


def random_adapted_field(rng: np.random.Generator, tree: ScenarioTree,
                         mesh: SpatialMesh, scale: float = 1.0,
                         n_modes: int = 4) -> np.ndarray:
    """Independent smooth spatial field per node (adapted by indexing)."""
    coeffs = rng.standard_normal((tree.n_nodes, n_modes))
    x_norm = (mesh.x - mesh.a_end) / (mesh.b_end - mesh.a_end)
    modes = np.stack([np.sin(j * np.pi * x_norm) / j
                      for j in range(1, n_modes + 1)])
    return scale * coeffs @ modes


def random_terminal_data(rng: np.random.Generator, tree: ScenarioTree,
                         mesh: SpatialMesh, scale: float = 1.0,
                         mean_weight: float = 1.0) -> np.ndarray:
    """Terminal data per leaf: a shared smooth field plus leaf fluctuations.

    The shared component keeps the conditional expectation of the data away
    from zero, so endpoint residuals of control experiments sit well above
    rounding noise.
    """
    common = random_spatial_field(rng, mesh, scale=scale * mean_weight)
    fluct = scale * rng.standard_normal((tree.n_leaves, 4)) @ np.stack(
        [np.sin(j * np.pi * (mesh.x - mesh.a_end)
                / (mesh.b_end - mesh.a_end)) / j for j in range(1, 5)])
    return common[None, :] + fluct


def random_bounded_adapted(rng: np.random.Generator, tree: ScenarioTree,
                           mesh: SpatialMesh, bound: float) -> np.ndarray:
    """Adapted field with sup norm <= bound (tanh-compressed)."""
    return bound * np.tanh(random_adapted_field(rng, tree, mesh))


def standard_coefficients(tree: ScenarioTree, mesh: SpatialMesh, seed: int,
                          c0: float = 0.5, c1: float = 2.0,
                          roughness: float = 0.5) -> np.ndarray:
    return sample_adapted_coefficients(tree, mesh, seed, c0, c1, roughness)
