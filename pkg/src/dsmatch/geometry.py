"""3D similarity transform and rotation conventions.

Rotation convention used everywhere in this package:

    R = Rz(kappa) @ Ry(phi) @ Rx(omega)

i.e. rotate about X by omega first, then Y by phi, then Z by kappa.
A transform maps a point p from the search frame into the reference
frame as ``scale * R @ p + (tx, ty, tz)``.

Point clouds are plain ``(n, 3)`` float64 arrays in a single projected
metric frame (meters); point order carries measurement identity and is
preserved by every operation in this package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

_TWO_PI = 2.0 * math.pi


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]; in-range values pass through unchanged."""
    if -math.pi < a <= math.pi:
        return a
    r = (a + math.pi) % _TWO_PI - math.pi
    if r == -math.pi:
        return math.pi
    return r


@dataclass(frozen=True)
class SimilarityTransform:
    """7-parameter similarity transform: translation (m), rotation (rad), scale.

    Angles are normalized to (-pi, pi] on construction; scale must be
    positive. Instances are immutable and safe to share across threads.
    """

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    omega: float = 0.0
    phi: float = 0.0
    kappa: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        values = (self.tx, self.ty, self.tz, self.omega, self.phi, self.kappa, self.scale)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("transform parameters must be finite")
        if self.scale <= 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "omega", normalize_angle(self.omega))
        object.__setattr__(self, "phi", normalize_angle(self.phi))
        object.__setattr__(self, "kappa", normalize_angle(self.kappa))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    @property
    def is_identity(self) -> bool:
        return (
            self.tx == 0.0 and self.ty == 0.0 and self.tz == 0.0
            and self.omega == 0.0 and self.phi == 0.0 and self.kappa == 0.0
            and self.scale == 1.0
        )

    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.omega, self.phi, self.kappa)


IDENTITY = SimilarityTransform()


def _rx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_matrix(omega: float, phi: float, kappa: float) -> np.ndarray:
    """Build the 3x3 rotation R = Rz(kappa) @ Ry(phi) @ Rx(omega)."""
    return _rz(kappa) @ _ry(phi) @ _rx(omega)


def rotation_derivatives(omega: float, phi: float, kappa: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial derivatives of the rotation matrix w.r.t. each angle.

    Returns (dR/domega, dR/dphi, dR/dkappa) for R = Rz @ Ry @ Rx.
    """
    cx, sx = math.cos(omega), math.sin(omega)
    cy, sy = math.cos(phi), math.sin(phi)
    cz, sz = math.cos(kappa), math.sin(kappa)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    return rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx


def angles_from_rotation(r: np.ndarray) -> tuple[float, float, float]:
    """Recover (omega, phi, kappa) from R = Rz(kappa) @ Ry(phi) @ Rx(omega).

    Near gimbal lock (|phi| -> pi/2) the split between omega and kappa is
    ill-conditioned; the evaluation regime uses small angles, so the
    standard extraction is adequate.
    """
    phi = math.asin(max(-1.0, min(1.0, -r[2, 0])))
    omega = math.atan2(r[2, 1], r[2, 2])
    kappa = math.atan2(r[1, 0], r[0, 0])
    return omega, phi, kappa


def apply_transform(t: SimilarityTransform, points: np.ndarray) -> np.ndarray:
    """Map points (shape (3,) or (n, 3)) through ``scale * R @ p + T``."""
    p = np.asarray(points, dtype=float)
    r = rotation_matrix(t.omega, t.phi, t.kappa)
    return t.scale * (p @ r.T) + t.translation


def invert(t: SimilarityTransform) -> SimilarityTransform:
    """Inverse transform: scale 1/s, rotation R^T, translation -R^T T / s."""
    r = rotation_matrix(t.omega, t.phi, t.kappa)
    inv_scale = 1.0 / t.scale
    tr = -inv_scale * (r.T @ t.translation)
    omega, phi, kappa = angles_from_rotation(r.T)
    return SimilarityTransform(tr[0], tr[1], tr[2], omega, phi, kappa, inv_scale)


def compose(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    """Composite transform applying b first, then a: x -> a(b(x))."""
    ra = rotation_matrix(a.omega, a.phi, a.kappa)
    rb = rotation_matrix(b.omega, b.phi, b.kappa)
    r = ra @ rb
    trans = a.scale * (ra @ b.translation) + a.translation
    omega, phi, kappa = angles_from_rotation(r)
    return SimilarityTransform(trans[0], trans[1], trans[2], omega, phi, kappa, a.scale * b.scale)


def with_update(t: SimilarityTransform, delta: np.ndarray, estimate_scale: bool) -> SimilarityTransform:
    """Additive parameter update in the order (tx, ty, tz, omega, phi, kappa[, scale])."""
    d = np.asarray(delta, dtype=float)
    scale = t.scale + d[6] if estimate_scale else t.scale
    return replace(
        t,
        tx=t.tx + d[0], ty=t.ty + d[1], tz=t.tz + d[2],
        omega=t.omega + d[3], phi=t.phi + d[4], kappa=t.kappa + d[5],
        scale=scale,
    )


def validate_cloud(points: np.ndarray) -> np.ndarray:
    """Coerce to an (n, 3) float64 array and reject non-finite coordinates."""
    p = np.asarray(points, dtype=float)
    if p.ndim == 1 and p.size == 0:
        p = p.reshape(0, 3)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (n, 3), got {p.shape}")
    if p.size and not np.isfinite(p).all():
        raise ValueError("point cloud contains non-finite coordinates")
    return p
