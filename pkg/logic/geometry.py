"""Rigid-body geometry: camera poses, the SE(3) exponential map and pose interpolation.

Twists are ordered (omega, v): rotation first, translation second. Pose updates are
left-multiplicative, ``exp(delta) * pose``, so a twist acts in the world frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from models.exceptions import ContractViolationError

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix [v]x with [v]x @ u == cross(v, u)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,):
        raise ContractViolationError(f"skew expects a 3-vector, got shape {v.shape}")
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues' formula."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    S = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + S + 0.5 * S @ S
    return (
        np.eye(3)
        + np.sin(theta) / theta * S
        + (1.0 - np.cos(theta)) / theta**2 * S @ S
    )


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = float(np.linalg.norm(omega))
    S = skew(omega)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * S + S @ S / 6.0
    return (
        np.eye(3)
        + (1.0 - np.cos(theta)) / theta**2 * S
        + (theta - np.sin(theta)) / theta**3 * S @ S
    )


def se3_exp(twist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact SE(3) exponential of a 6-vector twist (omega, v).

    Returns:
        tuple: (rotation matrix, translation)
    """
    twist = np.asarray(twist, dtype=np.float64)
    if twist.shape != (6,):
        raise ContractViolationError(f"twist must have shape (6,), got {twist.shape}")
    omega, v = twist[:3], twist[3:]
    return so3_exp(omega), so3_left_jacobian(omega) @ v


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform.

    Attributes:
        quat: unit quaternion (x, y, z, w), scipy ordering
        translation: camera center in world coordinates (meters)
    """

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise ContractViolationError(
                f"Pose needs quat (4,) and translation (3,), got {q.shape} and {t.shape}"
            )
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0.0:
            raise ContractViolationError("Pose quaternion must be finite and nonzero")
        object.__setattr__(self, "quat", q / norm)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_rt(cls, rotation: np.ndarray, translation: np.ndarray) -> Pose:
        return cls(Rotation.from_matrix(rotation).as_quat(), np.asarray(translation))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> Pose:
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls.from_rt(matrix[:3, :3], matrix[:3, 3])

    @property
    def rotation(self) -> np.ndarray:
        return Rotation.from_quat(self.quat).as_matrix()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> Pose:
        R = self.rotation
        return Pose.from_rt(R.T, -R.T @ self.translation)

    def compose(self, other: Pose) -> Pose:
        """Return self * other."""
        return Pose.from_matrix(self.matrix() @ other.matrix())

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        """Map camera-frame points (n, 3) to world coordinates."""
        return np.asarray(points) @ self.rotation.T + self.translation


def se3_apply_twist(pose: Pose, delta: np.ndarray) -> Pose:
    """Left-multiplicative update exp(delta) * pose; the quaternion is renormalized."""
    R_d, t_d = se3_exp(delta)
    R = R_d @ pose.rotation
    t = R_d @ pose.translation + t_d
    return Pose.from_rt(R, t)


def twist_gradient(points: np.ndarray, grad_points: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a left twist at zero of a loss that depends on world points.

    Under exp(delta) * p the first-order motion is omega x p + v, so the twist gradient is
    (sum p x g, sum g).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    grad_points = np.asarray(grad_points, dtype=np.float64).reshape(-1, 3)
    return np.concatenate([
        np.cross(points, grad_points).sum(axis=0),
        grad_points.sum(axis=0),
    ])


def interpolate_pose(a: Pose, b: Pose, alpha: float) -> Pose:
    """Linear interpolation of translation, slerp of rotation; alpha in [0, 1]."""
    if alpha <= 0.0:
        return a
    if alpha >= 1.0:
        return b
    slerp = Slerp([0.0, 1.0], Rotation.from_quat(np.stack([a.quat, b.quat])))
    quat = slerp([alpha]).as_quat()[0]
    return Pose(quat, (1.0 - alpha) * a.translation + alpha * b.translation)


def rotation_angle_deg(a: Pose, b: Pose) -> float:
    """Angle of the relative rotation between two poses, in degrees."""
    rel = Rotation.from_quat(a.quat).inv() * Rotation.from_quat(b.quat)
    return float(np.degrees(rel.magnitude()))


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, -1.0, 0.0)) -> Pose:
    """Camera pose at ``eye`` looking at ``target`` (camera x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x = -x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_rt(np.stack([x, y, z], axis=1), eye)
