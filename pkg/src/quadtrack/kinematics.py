"""Quadruped morphology, joint space and forward kinematics.

Joint order is (FL, FR, RL, RR) x (hip-abduction, hip-flexion, knee-flexion).
Each leg is a serial chain: abduction rotates about the trunk x axis, the
lateral hip link then carries the thigh and calf, both rotating in the leg's
sagittal plane.  With all joints at zero the legs hang straight down.
Positive hip-flexion swings the foot forward (+x).

Keypoints (13): ``trunk`` followed by ``hip_<leg>``, ``knee_<leg>``,
``foot_<leg>`` for each leg.  Batched helpers operate on arrays with a
leading batch axis and use only elementwise arithmetic, so a row's result
never depends on how many rows are processed together.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import numpy as np

LEGS = ("FL", "FR", "RL", "RR")
JOINTS_PER_LEG = 3
N_JOINTS = 12
KEYPOINTS: tuple[str, ...] = ("trunk",) + tuple(
    f"{part}_{leg}" for leg in LEGS for part in ("hip", "knee", "foot")
)
N_KEYPOINTS = len(KEYPOINTS)
KEYPOINT_INDEX = {name: i for i, name in enumerate(KEYPOINTS)}
FOOT_INDICES = tuple(KEYPOINT_INDEX[f"foot_{leg}"] for leg in LEGS)
KNEE_INDICES = tuple(KEYPOINT_INDEX[f"knee_{leg}"] for leg in LEGS)
HIP_INDICES = tuple(KEYPOINT_INDEX[f"hip_{leg}"] for leg in LEGS)
# +1 for left legs (lateral link points to +y), -1 for right legs
LEG_SIDE = np.array([1.0, -1.0, 1.0, -1.0])


class KinematicsError(ValueError):
    """Invalid kinematic input (non-finite values, bad ids, bad morphology)."""


@dataclass(frozen=True)
class Morphology:
    trunk_dims: np.ndarray
    hip_offsets: np.ndarray  # (4, 3), trunk frame
    l_hip: float
    l_thigh: float
    l_calf: float
    joint_limits: np.ndarray  # (12, 2)
    torque_limit: np.ndarray  # (12,)
    trunk_mass: float
    leg_joint_inertia: float

    def __post_init__(self):
        for name in ("trunk_dims", "hip_offsets", "joint_limits", "torque_limit"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        if self.trunk_dims.shape != (3,):
            raise KinematicsError("trunk_dims must have 3 entries")
        if self.hip_offsets.shape != (4, 3):
            raise KinematicsError("hip_offsets must be 4 x 3")
        if self.joint_limits.shape != (N_JOINTS, 2):
            raise KinematicsError("joint_limits must be 12 (lo, hi) pairs")
        if self.torque_limit.shape != (N_JOINTS,):
            raise KinematicsError("torque_limit must have 12 entries")
        if not (self.l_thigh > 0 and self.l_calf > 0 and self.l_hip >= 0):
            raise KinematicsError("link lengths must be positive")
        if np.any(self.joint_limits[:, 0] >= self.joint_limits[:, 1]):
            raise KinematicsError("joint limits require lo < hi for every joint")
        if self.trunk_mass <= 0 or self.leg_joint_inertia <= 0:
            raise KinematicsError("trunk_mass and leg_joint_inertia must be positive")
        # left/right pairs mirror about the trunk x-z plane
        mirror = self.hip_offsets[[1, 0, 3, 2]] * np.array([1.0, -1.0, 1.0])
        if not np.allclose(mirror, self.hip_offsets, atol=1e-12):
            raise KinematicsError("hip_offsets must be mirror-symmetric about the x-z plane")

    @property
    def lower(self) -> np.ndarray:
        return self.joint_limits[:, 0]

    @property
    def upper(self) -> np.ndarray:
        return self.joint_limits[:, 1]

    @property
    def trunk_inertia(self) -> np.ndarray:
        """Principal moments of a solid box, body frame."""
        x, y, z = self.trunk_dims
        m = self.trunk_mass
        return m / 12.0 * np.array([y * y + z * z, x * x + z * z, x * x + y * y])

    @property
    def leg_length(self) -> float:
        return self.l_thigh + self.l_calf

    @classmethod
    def from_dict(cls, d: dict) -> "Morphology":
        expected = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(d) - expected
        if unknown:
            raise KinematicsError(f"unknown morphology keys: {sorted(unknown)}")
        missing = expected - set(d)
        if missing:
            raise KinematicsError(f"missing morphology keys: {sorted(missing)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "trunk_dims": self.trunk_dims.tolist(),
            "hip_offsets": self.hip_offsets.tolist(),
            "l_hip": float(self.l_hip),
            "l_thigh": float(self.l_thigh),
            "l_calf": float(self.l_calf),
            "joint_limits": self.joint_limits.tolist(),
            "torque_limit": self.torque_limit.tolist(),
            "trunk_mass": float(self.trunk_mass),
            "leg_joint_inertia": float(self.leg_joint_inertia),
        }


def packaged_defaults() -> dict:
    text = resources.files("quadtrack").joinpath("default_config.json").read_text()
    return json.loads(text)


def default_morphology() -> Morphology:
    return Morphology.from_dict(packaged_defaults()["morphology"])


@dataclass(frozen=True)
class RootPose:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        o = np.array(self.orientation, dtype=float).reshape(4)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(o))):
            raise KinematicsError("root pose must be finite")
        n = np.linalg.norm(o)
        if abs(n - 1.0) > 1e-6:
            raise KinematicsError(f"root quaternion norm {n:.9f} is not unit")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", o / n)


class KeypointSet:
    """World-frame positions of the 13 keypoints, indexable by id."""

    __slots__ = ("points",)

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=float)
        if points.shape != (N_KEYPOINTS, 3):
            raise KinematicsError(f"expected ({N_KEYPOINTS}, 3) points, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise KinematicsError("keypoints must be finite")
        self.points = points

    def __getitem__(self, key: str) -> np.ndarray:
        return self.points[keypoint_index(key)]

    def __len__(self) -> int:
        return N_KEYPOINTS

    def as_dict(self) -> dict[str, np.ndarray]:
        return {k: self.points[i] for i, k in enumerate(KEYPOINTS)}


def keypoint_index(key: str) -> int:
    try:
        return KEYPOINT_INDEX[key]
    except KeyError:
        raise KinematicsError(f"unknown keypoint id {key!r}") from None


# -- quaternion helpers (w, x, y, z), batched over leading axes ----------------

def quat_to_matrix(quat: np.ndarray) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(quat, dtype=float), -1, 0)
    out = np.empty(np.shape(w) + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rotate(mat: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply rotation matrices ``mat[..., 3, 3]`` to vectors ``v[..., 3]`` elementwise."""
    return (mat[..., 0] * v[..., 0:1] + mat[..., 1] * v[..., 1:2] + mat[..., 2] * v[..., 2:3])


def rotate_inv(mat: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply the transpose of ``mat`` to ``v``."""
    return np.stack(
        [
            mat[..., 0, 0] * v[..., 0] + mat[..., 1, 0] * v[..., 1] + mat[..., 2, 0] * v[..., 2],
            mat[..., 0, 1] * v[..., 0] + mat[..., 1, 1] * v[..., 1] + mat[..., 2, 1] * v[..., 2],
            mat[..., 0, 2] * v[..., 0] + mat[..., 1, 2] * v[..., 1] + mat[..., 2, 2] * v[..., 2],
        ],
        axis=-1,
    )


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    rv = np.asarray(rv, dtype=float)
    angle = np.sqrt(np.sum(rv * rv, axis=-1))
    half = 0.5 * angle
    # sin(half)/angle with its small-angle limit
    k = np.where(angle > 1e-12, np.sin(half) / np.where(angle > 1e-12, angle, 1.0), 0.5 - angle * angle / 48.0)
    return np.concatenate([np.cos(half)[..., None], rv * k[..., None]], axis=-1)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., :1] < 0, -q, q)
    v = q[..., 1:]
    s = np.sqrt(np.sum(v * v, axis=-1))
    angle = 2.0 * np.arctan2(s, q[..., 0])
    k = np.where(s > 1e-12, angle / np.where(s > 1e-12, s, 1.0), 2.0)
    return v * k[..., None]


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


# -- forward kinematics -------------------------------------------------------

def leg_points(morph: Morphology, q: np.ndarray) -> np.ndarray:
    """Trunk-frame (hip, knee, foot) of every leg, shape (..., 4, 3, 3)."""
    q = np.asarray(q, dtype=float)
    qq = q.reshape(q.shape[:-1] + (4, 3))
    a, h, k = qq[..., 0], qq[..., 1], qq[..., 2]
    ca, sa = np.cos(a), np.sin(a)
    y0 = LEG_SIDE * morph.l_hip
    kx = morph.l_thigh * np.sin(h)
    kz = -morph.l_thigh * np.cos(h)
    fx = kx + morph.l_calf * np.sin(h + k)
    fz = kz - morph.l_calf * np.cos(h + k)
    hip = morph.hip_offsets
    out = np.empty(q.shape[:-1] + (4, 3, 3))
    out[..., 0, :] = hip
    out[..., 1, 0] = hip[:, 0] + kx
    out[..., 1, 1] = hip[:, 1] + ca * y0 - sa * kz
    out[..., 1, 2] = hip[:, 2] + sa * y0 + ca * kz
    out[..., 2, 0] = hip[:, 0] + fx
    out[..., 2, 1] = hip[:, 1] + ca * y0 - sa * fz
    out[..., 2, 2] = hip[:, 2] + sa * y0 + ca * fz
    return out


def trunk_frame_keypoints(morph: Morphology, q: np.ndarray) -> np.ndarray:
    """Keypoints in the trunk frame, shape (..., 13, 3)."""
    legs = leg_points(morph, q)
    out = np.zeros(legs.shape[:-3] + (N_KEYPOINTS, 3))
    out[..., 1:, :] = legs.reshape(legs.shape[:-3] + (12, 3))
    return out


def trunk_frame_jacobian(morph: Morphology, q: np.ndarray) -> np.ndarray:
    """d(trunk-frame keypoints)/dq, shape (..., 13, 3, 12)."""
    q = np.asarray(q, dtype=float)
    qq = q.reshape(q.shape[:-1] + (4, 3))
    a, h, k = qq[..., 0], qq[..., 1], qq[..., 2]
    ca, sa = np.cos(a), np.sin(a)
    side = LEG_SIDE * morph.l_hip
    kz = -morph.l_thigh * np.cos(h)
    fz = kz - morph.l_calf * np.cos(h + k)
    dk_dh = (morph.l_thigh * np.cos(h), morph.l_thigh * np.sin(h))  # (dx, dz)
    df_dk = (morph.l_calf * np.cos(h + k), morph.l_calf * np.sin(h + k))
    df_dh = (dk_dh[0] + df_dk[0], dk_dh[1] + df_dk[1])
    jac = np.zeros(q.shape[:-1] + (N_KEYPOINTS, 3, N_JOINTS))
    for leg in range(4):
        base = 1 + 3 * leg
        ja, jh, jk = 3 * leg, 3 * leg + 1, 3 * leg + 2
        c, s = ca[..., leg], sa[..., leg]
        y0 = side[leg]
        for kp, zz in ((base + 1, kz[..., leg]), (base + 2, fz[..., leg])):
            # abduction: derivative of the x-axis rotation of (y0, z)
            jac[..., kp, 1, ja] = -s * y0 - c * zz
            jac[..., kp, 2, ja] = c * y0 - s * zz
        for kp, (dx, dz) in ((base + 1, dk_dh), (base + 2, df_dh)):
            jac[..., kp, 0, jh] = dx[..., leg]
            jac[..., kp, 1, jh] = -s * dz[..., leg]
            jac[..., kp, 2, jh] = c * dz[..., leg]
        dx, dz = df_dk
        jac[..., base + 2, 0, jk] = dx[..., leg]
        jac[..., base + 2, 1, jk] = -s * dz[..., leg]
        jac[..., base + 2, 2, jk] = c * dz[..., leg]
    return jac


def fk_batch(morph: Morphology, position: np.ndarray, quat: np.ndarray, q: np.ndarray) -> np.ndarray:
    """World-frame keypoints for batched roots and joints, shape (..., 13, 3)."""
    local = trunk_frame_keypoints(morph, q)
    rot = quat_to_matrix(quat)[..., None, :, :]
    return rotate(rot, local) + np.asarray(position, dtype=float)[..., None, :]


def _check_q(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (N_JOINTS,):
        raise KinematicsError(f"joint configuration must have 12 entries, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise KinematicsError("joint configuration must be finite")
    return q


def forward_kinematics(morph: Morphology, root: RootPose, q) -> KeypointSet:
    q = _check_q(q)
    return KeypointSet(fk_batch(morph, root.position, root.orientation, q))


def fk_jacobian(morph: Morphology, root: RootPose, q, keypoint: str) -> np.ndarray:
    """3 x 12 Jacobian of one world-frame keypoint with respect to the joints."""
    idx = keypoint_index(keypoint)
    q = _check_q(q)
    local = trunk_frame_jacobian(morph, q)[idx]  # (3, 12)
    return quat_to_matrix(root.orientation) @ local


def clamp_to_limits(morph: Morphology, q) -> np.ndarray:
    return np.clip(np.asarray(q, dtype=float), morph.lower, morph.upper)


def within_limits(morph: Morphology, q, tol: float = 0.0) -> bool:
    q = np.asarray(q, dtype=float)
    return bool(np.all(q >= morph.lower - tol) and np.all(q <= morph.upper + tol))


def standing_height(morph: Morphology, pose: Sequence[float]) -> float:
    """Root height that puts the lowest foot on z = 0 for an upright trunk."""
    kp = trunk_frame_keypoints(morph, np.asarray(pose, dtype=float))
    return float(-kp[list(FOOT_INDICES), 2].min())
