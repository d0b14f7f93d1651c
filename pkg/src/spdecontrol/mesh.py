"""1-D spatial discretization: grid, difference operators, inner products.

The domain is an interval (a_end, b_end) with M interior points and
homogeneous Dirichlet boundary conditions.  Fields are vectors of interior
values; the boundary values are implicitly zero.  All operators broadcast
over leading axes, so a batch of fields of shape (..., M) is handled in one
call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MeshConfigError",
    "EllipticityError",
    "SpatialMesh",
    "build_mesh",
    "gradient",
    "div_a_grad",
    "l2_inner",
    "h1_seminorm",
]


class MeshConfigError(ValueError):
    """Intervals are empty, misnested, or touch the domain boundary."""


class EllipticityError(ValueError):
    """A diffusion coefficient sample violates its lower bound."""


@dataclass(frozen=True)
class SpatialMesh:
    """Uniform grid on (a_end, b_end) with control-region masks.

    ``ctrl_mask`` flags the grid points of the control region O' and
    ``inner_mask`` those of the observation core O1 with O1 strictly inside
    O'.  Interval membership is half-open: lo <= x < hi.
    """

    a_end: float
    b_end: float
    M: int
    h: float
    x: np.ndarray
    ctrl_mask: np.ndarray
    inner_mask: np.ndarray
    ctrl_interval: tuple[float, float]
    inner_interval: tuple[float, float]

    def __post_init__(self):
        self.x.setflags(write=False)
        self.ctrl_mask.setflags(write=False)
        self.inner_mask.setflags(write=False)

    @property
    def n_ctrl(self) -> int:
        return int(self.ctrl_mask.sum())

    @property
    def n_inner(self) -> int:
        return int(self.inner_mask.sum())


def build_mesh(a_end, b_end, M, ctrl_interval, inner_interval) -> SpatialMesh:
    """Build a mesh, validating the nesting O1 inside O' inside (a_end, b_end)."""
    if not a_end < b_end:
        raise MeshConfigError(f"need a_end < b_end, got ({a_end}, {b_end})")
    if M < 5:
        raise MeshConfigError(f"need M >= 5, got {M}")
    c_lo, c_hi = ctrl_interval
    i_lo, i_hi = inner_interval
    if not (a_end < c_lo < c_hi < b_end):
        raise MeshConfigError(
            f"control interval {ctrl_interval} must lie strictly inside "
            f"({a_end}, {b_end})"
        )
    if not (c_lo < i_lo < i_hi < c_hi):
        raise MeshConfigError(
            f"inner interval {inner_interval} must lie strictly inside the "
            f"control interval {ctrl_interval}"
        )
    h = (b_end - a_end) / (M + 1)
    x = a_end + h * np.arange(1, M + 1)
    ctrl_mask = (x >= c_lo) & (x < c_hi)
    inner_mask = (x >= i_lo) & (x < i_hi)
    if ctrl_mask.sum() < 3:
        raise MeshConfigError("control region covers fewer than 3 grid points")
    if inner_mask.sum() < 1:
        raise MeshConfigError("inner region covers no grid point")
    if np.any(inner_mask & ~ctrl_mask):
        raise MeshConfigError("inner mask escapes the control mask")
    return SpatialMesh(
        a_end=float(a_end),
        b_end=float(b_end),
        M=int(M),
        h=float(h),
        x=x,
        ctrl_mask=ctrl_mask,
        inner_mask=inner_mask,
        ctrl_interval=(float(c_lo), float(c_hi)),
        inner_interval=(float(i_lo), float(i_hi)),
    )


def _zero_pad(field: np.ndarray) -> np.ndarray:
    # Dirichlet ghost values: one zero on each side of the last axis.
    pad = [(0, 0)] * (field.ndim - 1) + [(1, 1)]
    return np.pad(field, pad)


def gradient(field: np.ndarray, mesh: SpatialMesh) -> np.ndarray:
    """Central difference of the zero-extended field."""
    if field.shape[-1] != mesh.M:
        raise ValueError(f"field length {field.shape[-1]} != mesh.M {mesh.M}")
    p = _zero_pad(field)
    return (p[..., 2:] - p[..., :-2]) / (2.0 * mesh.h)


def gradient_transpose(field: np.ndarray, mesh: SpatialMesh) -> np.ndarray:
    """Transpose of :func:`gradient` in plain coordinates (= its negative)."""
    return -gradient(field, mesh)


def div_a_grad(a_field: np.ndarray, field: np.ndarray, mesh: SpatialMesh,
               c0: float = 0.0) -> np.ndarray:
    """Discrete (a u')' with face-averaged coefficient and Dirichlet ends.

    The induced matrix is symmetric negative semidefinite in the h-weighted
    inner product; that symmetry is what the duality tests downstream rely
    on.  The coefficient is extended by its edge values to the boundary
    faces.
    """
    if np.min(a_field) <= max(c0, 0.0):
        raise EllipticityError(
            f"coefficient minimum {np.min(a_field):g} <= ellipticity floor {c0:g}"
        )
    a_lo, a_hi = _face_coefficients(a_field)
    p = _zero_pad(field)
    flux_hi = a_hi * (p[..., 2:] - p[..., 1:-1])
    flux_lo = a_lo * (p[..., 1:-1] - p[..., :-2])
    return (flux_hi - flux_lo) / mesh.h**2


def _face_coefficients(a_field: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Face values a_{i-1/2}, a_{i+1/2}; edge extension beyond the boundary.
    pad = [(0, 0)] * (a_field.ndim - 1) + [(1, 1)]
    a_ext = np.pad(a_field, pad, mode="edge")
    a_face = 0.5 * (a_ext[..., :-1] + a_ext[..., 1:])
    return a_face[..., :-1], a_face[..., 1:]


def l2_inner(u: np.ndarray, v: np.ndarray, mesh: SpatialMesh) -> float | np.ndarray:
    """h-weighted sum over interior points.

    Chosen as plain h*sum (no boundary correction) so that div_a_grad is
    exactly self-adjoint in this inner product.
    """
    return mesh.h * np.sum(u * v, axis=-1)


def h1_seminorm(u: np.ndarray, mesh: SpatialMesh) -> float | np.ndarray:
    """Discrete H1 seminorm from face differences of the zero-extended field."""
    p = _zero_pad(u)
    d = (p[..., 1:] - p[..., :-1]) / mesh.h
    return np.sqrt(mesh.h * np.sum(d * d, axis=-1))
