"""SO(3)/SE(3) primitives: unit-quaternion rotations, poses, exp/log maps.

Conventions
-----------
- Quaternions are Hamilton, stored (w, x, y, z), and represent body-to-world
  rotations: ``R(q) @ v_body = v_world``.
- Rotation-vector perturbations are applied on the right (local frame):
  ``q' = q * exp(delta)``.
- Small-angle branches switch below SMALL_ANGLE to avoid cancellation.
"""

from __future__ import annotations

import math

import numpy as np

SMALL_ANGLE = 1e-8


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ u == cross(v, u)."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


class Rotation:
    """Unit quaternion (w, x, y, z).

    Normalized on construction; comparisons use the w >= 0 canonical sheet
    of the double cover.
    """

    __slots__ = ("q",)

    def __init__(self, w: float, x: float, y: float, z: float):
        q = np.array([w, x, y, z], dtype=float)
        n = math.sqrt(float(q @ q))
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and nonzero")
        self.q = q / n

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_quat(cls, q) -> "Rotation":
        return cls(q[0], q[1], q[2], q[3])

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        """Shepperd's method; stable for all rotation matrices."""
        m = np.asarray(m, dtype=float)
        t = np.trace(m)
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            w = 0.25 * s
            x = (m[2, 1] - m[1, 2]) / s
            y = (m[0, 2] - m[2, 0]) / s
            z = (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
        return cls(w, x, y, z)

    def canonical(self) -> "Rotation":
        """Representative with w >= 0."""
        if self.q[0] < 0.0:
            return Rotation(*(-self.q))
        return Rotation(*self.q)

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ]
        )

    def __mul__(self, other: "Rotation") -> "Rotation":
        return Rotation(*quat_mul(self.q, other.q))

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation(w, -x, -y, -z)

    def apply(self, v) -> np.ndarray:
        return self.matrix() @ np.asarray(v, dtype=float)

    def __repr__(self) -> str:
        return "Rotation(w={:.6g}, x={:.6g}, y={:.6g}, z={:.6g})".format(*self.q)


class Pose:
    """Rigid transform (rotation, translation): maps local points to world."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation, translation):
        self.rotation = rotation
        self.translation = np.asarray(translation, dtype=float).copy()

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    def __mul__(self, other: "Pose") -> "Pose":
        return Pose(
            self.rotation * other.rotation,
            self.rotation.apply(other.translation) + self.translation,
        )

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def apply(self, p) -> np.ndarray:
        return self.rotation.apply(p) + self.translation

    def __repr__(self) -> str:
        return f"Pose({self.rotation!r}, t={self.translation})"


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product of two (w, x, y, z) arrays."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def so3_exp(omega) -> Rotation:
    """Rotation by angle |omega| about axis omega/|omega|.

    Two-term Taylor expansion below SMALL_ANGLE.
    """
    omega = np.asarray(omega, dtype=float)
    angle = math.sqrt(float(omega @ omega))
    if angle < SMALL_ANGLE:
        # sin(a/2)/a ~ 1/2 - a^2/48, cos(a/2) ~ 1 - a^2/8
        half = 0.5 - angle * angle / 48.0
        w = 1.0 - angle * angle / 8.0
    else:
        half = math.sin(0.5 * angle) / angle
        w = math.cos(0.5 * angle)
    return Rotation(w, half * omega[0], half * omega[1], half * omega[2])


def so3_log(r: Rotation) -> np.ndarray:
    """Minimal axis-angle vector of a rotation, |result| <= pi."""
    w, x, y, z = r.q
    if w < 0.0:  # canonical sheet, keeps the angle in [0, pi]
        w, x, y, z = -w, -x, -y, -z
    vn = math.sqrt(x * x + y * y + z * z)
    if vn < SMALL_ANGLE:
        # angle ~ 2*vn/w; scale = 2/w * (1 + vn^2/(3 w^2))
        scale = 2.0 / w * (1.0 + vn * vn / (3.0 * w * w))
    else:
        angle = 2.0 * math.atan2(vn, w)
        scale = angle / vn
    return np.array([scale * x, scale * y, scale * z])


def so3_exp_matrix(omega) -> np.ndarray:
    """Rodrigues formula, returning a rotation matrix directly."""
    omega = np.asarray(omega, dtype=float)
    angle = math.sqrt(float(omega @ omega))
    k = skew(omega)
    if angle < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(angle) / angle
    b = (1.0 - math.cos(angle)) / (angle * angle)
    return np.eye(3) + a * k + b * (k @ k)


def right_jacobian_so3(omega) -> np.ndarray:
    """J_r with so3_exp(omega + d) ~ so3_exp(omega) * so3_exp(J_r @ d)."""
    omega = np.asarray(omega, dtype=float)
    angle = math.sqrt(float(omega @ omega))
    k = skew(omega)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + (k @ k) / 6.0
    a2 = angle * angle
    c1 = (1.0 - math.cos(angle)) / a2
    c2 = (angle - math.sin(angle)) / (a2 * angle)
    return np.eye(3) - c1 * k + c2 * (k @ k)


def right_jacobian_inv_so3(omega) -> np.ndarray:
    """Inverse of right_jacobian_so3; valid for |omega| < pi."""
    omega = np.asarray(omega, dtype=float)
    angle = math.sqrt(float(omega @ omega))
    k = skew(omega)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + (k @ k) / 12.0
    a2 = angle * angle
    c = 1.0 / a2 - (1.0 + math.cos(angle)) / (2.0 * angle * math.sin(angle))
    return np.eye(3) + 0.5 * k + c * (k @ k)
