"""Floating-base quadruped simulation with penalty ground contact and PD joints.

The trunk is the only body with mass.  Legs are kinematic chains whose joints
integrate PD torques against a small per-joint inertia, so joint motion moves
the foot points but does not push the trunk except through ground contact.

Each 20 ms control step runs four 5 ms substeps:

1. PD torque, clipped to the torque limit, integrated with semi-implicit Euler
   on the joints; joints stop at their limits.
2. Foot points below z = 0 get a spring force along +z plus normal and
   tangential damping.  The damping terms are applied implicitly in the trunk
   velocity (one 6x6 SPD solve per env), which keeps light trunk rotations
   stable at this step size.  Tangential damping is clamped to the friction
   cone and separating contacts are dropped in a second pass.
3. Free rotation of the trunk (the gyroscopic term) uses the implicit midpoint
   rule on body angular momentum, which conserves rotational kinetic energy;
   the orientation advances by the midpoint angular velocity.

Everything is batched over a leading env axis with per-row arithmetic only,
so splitting envs across threads cannot change any result.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numba
import numpy as np

from .dataset import MotionClip
from .kinematics import (
    FOOT_INDICES,
    LEG_SIDE,
    N_JOINTS,
    N_KEYPOINTS,
    Morphology,
    fk_batch,
    quat_to_matrix,
    rotate_inv,
)

log = logging.getLogger(__name__)

TERMINATION_REASONS = ("none", "fall", "tilt", "tracking-divergence", "timeout")
FAILURE_CODES = (1, 2, 3)
PARAM_NAMES = ("friction_coeff", "mass_scale", "kp", "kd", "contact_stiffness", "contact_damping", "gravity")
(I_MU, I_MASS, I_KP, I_KD, I_K, I_C, I_G) = range(7)
REF_FEATURES = 16  # q_ref - default (12), ref root velocity in ref frame (3), ref root height (1)
STANDING_POSE = (0.0, 0.8, -1.6) * 4
REWARD_KEYS = ("track", "action_rate", "energy", "alive", "termination")


class SimulationError(FloatingPointError):
    """Non-finite action or state; the message names the offending envs."""


class SimConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DynamicsParams:
    friction_coeff: float = 1.0
    mass_scale: float = 1.0
    kp: float = 40.0
    kd: float = 1.0
    contact_stiffness: float = 3.0e4
    contact_damping: float = 300.0
    gravity: float = 9.81

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector())):
            raise SimConfigError("dynamics parameters must be finite")
        if self.friction_coeff < 0:
            raise SimConfigError("friction_coeff must be >= 0")
        if self.kp <= 0 or self.kd <= 0:
            raise SimConfigError("kp and kd must be > 0")
        if self.contact_stiffness <= 0:
            raise SimConfigError("contact_stiffness must be > 0")
        if self.mass_scale <= 0 or self.contact_damping < 0 or self.gravity < 0:
            raise SimConfigError("mass_scale must be > 0; contact_damping and gravity >= 0")

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in PARAM_NAMES], dtype=float)

    @classmethod
    def from_vector(cls, v) -> "DynamicsParams":
        return cls(**{k: float(x) for k, x in zip(PARAM_NAMES, v)})


def _default_ranges() -> dict:
    return {
        "friction_coeff": [0.5, 1.25],
        "mass_scale": [0.8, 1.2],
        "kp": [0.9, 1.1],
        "kd": [0.9, 1.1],
        "contact_stiffness": [1.0, 1.0],
        "contact_damping": [1.0, 1.0],
        "gravity": [1.0, 1.0],
    }


@dataclass
class SimEnvConfig:
    control_dt: float = 0.02
    substeps: int = 4
    warmup_substeps: int = 10
    ground: bool = True
    tangential_damping: float = 300.0
    leg_reaction: bool = True  # ground forces load the joints; False keeps the legs purely kinematic
    rotation_iters: int = 10
    nominal: dict = field(default_factory=lambda: asdict(DynamicsParams()))
    randomize: bool = True
    ranges: dict = field(default_factory=_default_ranges)
    action_scale: float = 0.5
    default_pose: list = field(default_factory=lambda: list(STANDING_POSE))
    ref_window: int = 4
    command_dim: int = 8
    reward_weights: dict = field(default_factory=lambda: {
        "track": 1.0, "action_rate": 0.01, "energy": 0.0005, "alive": 0.05, "termination": 10.0})
    track_weights: dict = field(default_factory=lambda: {"foot": 2.0, "trunk": 1.0, "intermediate": 0.5})
    min_height: float = 0.08
    max_tilt_deg: float = 60.0
    max_tracking_error: float = 0.5
    max_episode_steps: int = 1000
    reset_noise: float = 0.01
    random_start: bool = True
    joint_vel_scale: float = 0.1
    ang_vel_scale: float = 0.25
    contact_force_scale: float = 0.01

    def __post_init__(self):
        if self.control_dt <= 0 or self.substeps < 1 or self.warmup_substeps < 0:
            raise SimConfigError("control_dt > 0 and substeps >= 1 required")
        if len(self.default_pose) != N_JOINTS:
            raise SimConfigError("default_pose must have 12 entries")
        if self.ref_window < 1 or self.command_dim < 0:
            raise SimConfigError("ref_window >= 1 and command_dim >= 0 required")
        if set(self.reward_weights) != set(REWARD_KEYS):
            raise SimConfigError(f"reward_weights must have exactly the keys {REWARD_KEYS}")
        if any(w < 0 for w in self.reward_weights.values()):
            raise SimConfigError("reward weights must be >= 0 (component signs are fixed)")
        if set(self.track_weights) != {"foot", "trunk", "intermediate"}:
            raise SimConfigError("track_weights needs foot, trunk and intermediate")
        if any(w < 0 for w in self.track_weights.values()):
            raise SimConfigError("track weights must be >= 0")
        unknown = set(self.ranges) - set(PARAM_NAMES)
        if unknown:
            raise SimConfigError(f"unknown randomization ranges: {sorted(unknown)}")
        for k, r in self.ranges.items():
            if len(r) != 2 or not r[0] <= r[1]:
                raise SimConfigError(f"invalid range for {k}: {r} (need lo <= hi)")
        self.nominal_params()  # validates

    @property
    def substep_dt(self) -> float:
        return self.control_dt / self.substeps

    def nominal_params(self) -> DynamicsParams:
        unknown = set(self.nominal) - set(PARAM_NAMES)
        if unknown:
            raise SimConfigError(f"unknown dynamics parameters: {sorted(unknown)}")
        return DynamicsParams(**self.nominal)

    def keypoint_weights(self) -> np.ndarray:
        c = np.full(N_KEYPOINTS, self.track_weights["intermediate"], dtype=float)
        c[0] = self.track_weights["trunk"]
        c[list(FOOT_INDICES)] = self.track_weights["foot"]
        return c

    def evaluation(self) -> "SimEnvConfig":
        """Copy with nominal dynamics, no reset noise and episodes starting at frame 0."""
        return replace(self, randomize=False, reset_noise=0.0, random_start=False)

    def actor_fields(self) -> tuple[tuple[str, int], ...]:
        return (
            ("joint_pos", N_JOINTS),
            ("joint_vel", N_JOINTS),
            ("base_ang_vel", 3),
            ("projected_gravity", 3),
            ("prev_action", N_JOINTS),
            ("ref_window", self.ref_window * REF_FEATURES),
            ("command", self.command_dim),
        )

    def privileged_fields(self) -> tuple[tuple[str, int], ...]:
        return (
            ("root_lin_vel", 3),
            ("root_height", 1),
            ("dynamics", len(PARAM_NAMES)),
            ("contact_force", 4),
            ("ref_root_offset", 3),
        )

    @property
    def actor_dim(self) -> int:
        return sum(w for _, w in self.actor_fields())

    @property
    def critic_dim(self) -> int:
        return self.actor_dim + sum(w for _, w in self.privileged_fields())


@dataclass
class SimState:
    """Batched physics state; every field has a leading env axis."""

    pos: np.ndarray  # (N, 3) world
    quat: np.ndarray  # (N, 4) w x y z
    lin_vel: np.ndarray  # (N, 3) world
    ang_vel: np.ndarray  # (N, 3) body frame
    q: np.ndarray  # (N, 12)
    qd: np.ndarray  # (N, 12)
    foot_contact: np.ndarray  # (N, 4) bool
    contact_force: np.ndarray  # (N, 4) normal force
    time: np.ndarray  # (N,)
    episode_step: np.ndarray  # (N,) int

    @classmethod
    def at_rest(cls, pos, quat, q) -> "SimState":
        pos = np.atleast_2d(np.asarray(pos, dtype=float))
        quat = np.atleast_2d(np.asarray(quat, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        n = len(pos)
        quat = quat / np.linalg.norm(quat, axis=1, keepdims=True)
        return cls(pos.copy(), quat, np.zeros((n, 3)), np.zeros((n, 3)), q.copy(), np.zeros((n, N_JOINTS)),
                   np.zeros((n, 4), dtype=bool), np.zeros((n, 4)), np.zeros(n), np.zeros(n, dtype=int))

    @property
    def n(self) -> int:
        return len(self.pos)

    def copy(self) -> "SimState":
        return SimState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def take(self, idx) -> "SimState":
        return SimState(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def put(self, idx, other: "SimState"):
        for f in fields(self):
            getattr(self, f.name)[idx] = getattr(other, f.name)

    def check(self):
        norms = np.linalg.norm(self.quat, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise SimulationError("state quaternion is not unit norm")
        if np.any(self.time < 0):
            raise SimulationError("state time must be >= 0")

    def finite_rows(self) -> np.ndarray:
        ok = np.ones(self.n, dtype=bool)
        for a in (self.pos, self.quat, self.lin_vel, self.ang_vel, self.q, self.qd):
            ok &= np.all(np.isfinite(a), axis=1)
        return ok

    def keypoints(self, morph: Morphology) -> np.ndarray:
        return fk_batch(morph, self.pos, self.quat, self.q)


@dataclass
class RewardTerms:
    r_track: np.ndarray
    r_action_rate: np.ndarray
    r_energy: np.ndarray
    r_alive: np.ndarray
    r_termination: np.ndarray
    total: np.ndarray


@dataclass
class ObsSplit:
    actor: np.ndarray  # (N, actor_dim)
    critic: np.ndarray  # (N, critic_dim), actor columns first

    @property
    def privileged(self) -> np.ndarray:
        return self.critic[:, self.actor.shape[1]:]


@dataclass
class Reference:
    """What the tracked motion contributes to one step."""

    keypoints: np.ndarray  # (N, 13, 3) target for the post-step state
    root_pos: np.ndarray  # (N, 3)
    window: np.ndarray  # (N, W * REF_FEATURES) window starting at the post-step frame
    command: np.ndarray  # (N, command_dim)


# -- physics ------------------------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _feet(q, hip, l_hip, l_thigh, l_calf, side, out):
    for leg in range(4):
        a = q[3 * leg]
        h = q[3 * leg + 1]
        k = q[3 * leg + 2]
        ca = np.cos(a)
        sa = np.sin(a)
        y0 = side[leg] * l_hip
        kz = -l_thigh * np.cos(h)
        fx = l_thigh * np.sin(h) + l_calf * np.sin(h + k)
        fz = kz - l_calf * np.cos(h + k)
        out[leg, 0] = hip[leg, 0] + fx
        out[leg, 1] = hip[leg, 1] + ca * y0 - sa * fz
        out[leg, 2] = hip[leg, 2] + sa * y0 + ca * fz


@numba.njit(cache=True, nogil=True)
def _chol_solve(A, b, n):
    L = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    y = np.zeros(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    x = np.zeros(n)
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x


@numba.njit(cache=True, nogil=True)
def _foot_jac(q, leg, l_hip, l_thigh, l_calf, side, out):
    """d foot / d (abduction, hip, knee) in the trunk frame."""
    a = q[3 * leg]
    h = q[3 * leg + 1]
    k = q[3 * leg + 2]
    ca = np.cos(a)
    sa = np.sin(a)
    y0 = side[leg] * l_hip
    fz = -l_thigh * np.cos(h) - l_calf * np.cos(h + k)
    dzh = l_thigh * np.sin(h) + l_calf * np.sin(h + k)
    dzk = l_calf * np.sin(h + k)
    out[0, 0] = 0.0
    out[1, 0] = -sa * y0 - ca * fz
    out[2, 0] = ca * y0 - sa * fz
    out[0, 1] = l_thigh * np.cos(h) + l_calf * np.cos(h + k)
    out[1, 1] = -sa * dzh
    out[2, 1] = ca * dzh
    out[0, 2] = l_calf * np.cos(h + k)
    out[1, 2] = -sa * dzk
    out[2, 2] = ca * dzk


@numba.njit(cache=True, nogil=True)
def _kernel(geo_hip, l_hip, l_thigh, l_calf, side, lower, upper, tl, inertia_j, mass0, inertia0,
            ground, ct0, rot_iters, dt, n_sub, hold, couple, P, pos, quat, v, w, q, qd, target, contact, fn, energy):
    """In-place integration of every env for ``n_sub`` substeps.

    Unknowns per substep are the trunk twist and the 12 joint rates.  With
    ``couple`` they are solved together, so ground forces push back on the
    joints through the leg Jacobians; otherwise the joints follow their PD
    torques alone and the legs move the feet kinematically.  Contact springs
    and dampers are linearly implicit.
    """
    n_env = pos.shape[0]
    n_x = 18
    feet = np.zeros((4, 3))
    r = np.zeros((4, 3))
    R = np.zeros((3, 3))
    Iw = np.zeros((3, 3))
    A = np.zeros((n_x, n_x))
    b = np.zeros(n_x)
    G = np.zeros((4, 3, 9))
    Jl = np.zeros((3, 3))
    idx = np.zeros((4, 9), dtype=np.int64)
    for i in range(4):
        for c in range(6):
            idx[i, c] = c
        for c in range(3):
            idx[i, 6 + c] = 6 + 3 * i + c
    tau = np.zeros(12)
    x = np.zeros(n_x)
    fs = np.zeros(4)
    cn = np.zeros(4)
    ct = np.zeros(4)
    act = np.zeros(4, dtype=np.bool_)
    ww = np.zeros(3)
    Ib = np.zeros(3)
    L0 = np.zeros(3)
    L1 = np.zeros(3)
    Lm = np.zeros(3)
    for e in range(n_env):
        mu = P[e, 0]
        m = mass0 * P[e, 1]
        kp = P[e, 2]
        kd = P[e, 3]
        kc = P[e, 4]
        cc = P[e, 5]
        g = P[e, 6]
        for c in range(3):
            Ib[c] = inertia0[c] * P[e, 1]
        energy[e] = 0.0
        for _ in range(n_sub):
            _feet(q[e], geo_hip, l_hip, l_thigh, l_calf, side, feet)
            for j in range(12):
                if hold:
                    qd[e, j] = 0.0
                    tau[j] = 0.0
                    continue
                t = kp * (target[e, j] - q[e, j]) - kd * qd[e, j]
                if t > tl[j]:
                    t = tl[j]
                elif t < -tl[j]:
                    t = -tl[j]
                tau[j] = t
                if not couple:
                    qd[e, j] = qd[e, j] + dt * t / inertia_j
            qw, qx, qy, qz = quat[e, 0], quat[e, 1], quat[e, 2], quat[e, 3]
            R[0, 0] = 1 - 2 * (qy * qy + qz * qz)
            R[0, 1] = 2 * (qx * qy - qw * qz)
            R[0, 2] = 2 * (qx * qz + qw * qy)
            R[1, 0] = 2 * (qx * qy + qw * qz)
            R[1, 1] = 1 - 2 * (qx * qx + qz * qz)
            R[1, 2] = 2 * (qy * qz - qw * qx)
            R[2, 0] = 2 * (qx * qz - qw * qy)
            R[2, 1] = 2 * (qy * qz + qw * qx)
            R[2, 2] = 1 - 2 * (qx * qx + qy * qy)
            for c in range(3):
                ww[c] = R[c, 0] * w[e, 0] + R[c, 1] * w[e, 1] + R[c, 2] * w[e, 2]
            any_act = False
            for i in range(4):
                for c in range(3):
                    r[i, c] = R[c, 0] * feet[i, 0] + R[c, 1] * feet[i, 1] + R[c, 2] * feet[i, 2]
                pen = -(pos[e, 2] + r[i, 2])
                act[i] = ground and pen > 0
                fs[i] = kc * pen if act[i] else 0.0
                cn[i] = cc + dt * kc if act[i] else 0.0
                ct[i] = ct0 if act[i] else 0.0
                fn[e, i] = 0.0
                any_act = any_act or act[i]
                if act[i]:
                    # foot velocity = v + w x r + R Jl qd_leg
                    rx, ry, rz = r[i, 0], r[i, 1], r[i, 2]
                    G[i, :, :] = 0.0
                    G[i, 0, 0] = 1.0
                    G[i, 1, 1] = 1.0
                    G[i, 2, 2] = 1.0
                    G[i, 0, 4] = rz
                    G[i, 0, 5] = -ry
                    G[i, 1, 3] = -rz
                    G[i, 1, 5] = rx
                    G[i, 2, 3] = ry
                    G[i, 2, 4] = -rx
                    if not hold:
                        _foot_jac(q[e], i, l_hip, l_thigh, l_calf, side, Jl)
                        for a in range(3):
                            for c in range(3):
                                G[i, a, 6 + c] = R[a, 0] * Jl[0, c] + R[a, 1] * Jl[1, c] + R[a, 2] * Jl[2, c]
            if any_act:
                for a in range(3):
                    for c in range(3):
                        Iw[a, c] = R[a, 0] * Ib[0] * R[c, 0] + R[a, 1] * Ib[1] * R[c, 1] + R[a, 2] * Ib[2] * R[c, 2]
                for _pass in range(2):
                    A[:, :] = 0.0
                    A[0, 0] = m
                    A[1, 1] = m
                    A[2, 2] = m
                    for a in range(3):
                        for c in range(3):
                            A[3 + a, 3 + c] = Iw[a, c]
                    b[0] = m * v[e, 0]
                    b[1] = m * v[e, 1]
                    b[2] = m * v[e, 2] - dt * m * g
                    for a in range(3):
                        b[3 + a] = Iw[a, 0] * ww[0] + Iw[a, 1] * ww[1] + Iw[a, 2] * ww[2]
                    for j in range(12):
                        A[6 + j, 6 + j] = inertia_j
                        b[6 + j] = inertia_j * qd[e, j] + (dt * tau[j] if couple else 0.0)
                    for i in range(4):
                        if not act[i]:
                            continue
                        C0 = ct[i]
                        C2 = cn[i]
                        na = 9 if couple else 6
                        for a in range(na):
                            ia = idx[i, a]
                            for c in range(9):
                                Aac = dt * (G[i, 0, a] * C0 * G[i, 0, c] + G[i, 1, a] * C0 * G[i, 1, c]
                                            + G[i, 2, a] * C2 * G[i, 2, c])
                                if c < na:
                                    A[ia, idx[i, c]] += Aac
                                else:
                                    b[ia] -= Aac * qd[e, idx[i, c] - 6]
                            b[ia] += dt * G[i, 2, a] * fs[i]
                    x[:] = _chol_solve(A, b, n_x)
                    for i in range(4):
                        if not act[i]:
                            continue
                        vf0 = 0.0
                        vf1 = 0.0
                        vf2 = 0.0
                        for a in range(9):
                            xa = x[idx[i, a]]
                            vf0 += G[i, 0, a] * xa
                            vf1 += G[i, 1, a] * xa
                            vf2 += G[i, 2, a] * xa
                        F0 = -ct[i] * vf0
                        F1 = -ct[i] * vf1
                        F2 = fs[i] - cn[i] * vf2
                        fn[e, i] = F2
                        ftan = np.sqrt(F0 * F0 + F1 * F1)
                        cap = mu * max(F2, 0.0)
                        if F2 <= 0:
                            act[i] = False
                            fn[e, i] = 0.0
                        elif ftan > cap:
                            ct[i] = ct[i] * (cap / ftan)
                    if _pass == 0:
                        continue
                for c in range(3):
                    v[e, c] = x[c]
                    ww[c] = x[3 + c]
                if couple and not hold:
                    for j in range(12):
                        qd[e, j] = x[6 + j]
            else:
                v[e, 2] = v[e, 2] - dt * g
                if couple and not hold:
                    for j in range(12):
                        qd[e, j] = qd[e, j] + dt * tau[j] / inertia_j
            # joints, with hard stops at the limits
            power = 0.0
            for j in range(12):
                qdj = qd[e, j]
                qn = q[e, j] + dt * qdj
                if qn < lower[j]:
                    qn = lower[j]
                    if qdj < 0:
                        qdj = 0.0
                elif qn > upper[j]:
                    qn = upper[j]
                    if qdj > 0:
                        qdj = 0.0
                q[e, j] = qn
                qd[e, j] = qdj
                power += abs(tau[j] * qdj)
            energy[e] += power
            for i in range(4):
                contact[e, i] = act[i]
            for c in range(3):
                pos[e, c] = pos[e, c] + dt * v[e, c]
            # free rotation: implicit midpoint on body angular momentum
            for c in range(3):
                L0[c] = Ib[c] * (R[0, c] * ww[0] + R[1, c] * ww[1] + R[2, c] * ww[2])
                L1[c] = L0[c]
            for _it in range(rot_iters):
                for c in range(3):
                    Lm[c] = 0.5 * (L0[c] + L1[c])
                o0 = Lm[0] / Ib[0]
                o1 = Lm[1] / Ib[1]
                o2 = Lm[2] / Ib[2]
                L1[0] = L0[0] + dt * (Lm[1] * o2 - Lm[2] * o1)
                L1[1] = L0[1] + dt * (Lm[2] * o0 - Lm[0] * o2)
                L1[2] = L0[2] + dt * (Lm[0] * o1 - Lm[1] * o0)
            r0 = 0.5 * (L0[0] + L1[0]) / Ib[0] * dt
            r1 = 0.5 * (L0[1] + L1[1]) / Ib[1] * dt
            r2 = 0.5 * (L0[2] + L1[2]) / Ib[2] * dt
            ang = np.sqrt(r0 * r0 + r1 * r1 + r2 * r2)
            half = 0.5 * ang
            if ang > 1e-12:
                k = np.sin(half) / ang
            else:
                k = 0.5 - ang * ang / 48.0
            dw, dx, dy, dz = np.cos(half), r0 * k, r1 * k, r2 * k
            nw = qw * dw - qx * dx - qy * dy - qz * dz
            nx = qw * dx + qx * dw + qy * dz - qz * dy
            ny = qw * dy - qx * dz + qy * dw + qz * dx
            nz = qw * dz + qx * dy - qy * dx + qz * dw
            nrm = np.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
            quat[e, 0] = nw / nrm
            quat[e, 1] = nx / nrm
            quat[e, 2] = ny / nrm
            quat[e, 3] = nz / nrm
            for c in range(3):
                w[e, c] = L1[c] / Ib[c]
        energy[e] /= max(n_sub, 1)


def physics_step(morph: Morphology, cfg: SimEnvConfig, state: SimState, q_target, params, n_substeps=None,
                 hold_joints=False):
    """Advance ``state`` by ``n_substeps`` physics substeps (default: one control step).

    ``params`` is an (N, 7) array of dynamics parameters in PARAM_NAMES order.
    With ``hold_joints`` the legs stay rigid at ``state.q`` and only the trunk moves.
    Returns (new_state, mean joint power |tau * qd| per env).
    """
    k = cfg.substeps if n_substeps is None else int(n_substeps)
    n = state.n
    P = np.ascontiguousarray(np.broadcast_to(np.asarray(params, dtype=float), (n, len(PARAM_NAMES))))
    pos, quat, v = state.pos.astype(float).copy(), state.quat.astype(float).copy(), state.lin_vel.astype(float).copy()
    w, q, qd = state.ang_vel.astype(float).copy(), state.q.astype(float).copy(), state.qd.astype(float).copy()
    tgt = np.ascontiguousarray(np.broadcast_to(np.asarray(q_target, dtype=float), (n, N_JOINTS)))
    contact = state.foot_contact.astype(bool).copy()
    fn = state.contact_force.astype(float).copy()
    energy = np.zeros(n)
    if k > 0:
        _kernel(morph.hip_offsets, float(morph.l_hip), float(morph.l_thigh), float(morph.l_calf), LEG_SIDE,
                morph.lower.copy(), morph.upper.copy(), morph.torque_limit, float(morph.leg_joint_inertia),
                float(morph.trunk_mass), morph.trunk_inertia, bool(cfg.ground), float(cfg.tangential_damping),
                int(cfg.rotation_iters), float(cfg.substep_dt), k, bool(hold_joints), bool(cfg.leg_reaction), P,
                pos, quat, v, w, q, qd, tgt, contact, fn, energy)
    new = SimState(pos, quat, v, w, q, qd, contact, fn, state.time + k * cfg.substep_dt, state.episode_step.copy())
    return new, energy


# -- reward, termination, observation -----------------------------------------

def tracking_reward(keypoints, ref_keypoints, weights) -> np.ndarray:
    """exp(-sum_j c_j |x_j - x_ref_j|^2), floored at the smallest positive double."""
    e = np.asarray(keypoints, dtype=float) - np.asarray(ref_keypoints, dtype=float)
    s = np.sum(np.asarray(weights, dtype=float) * np.sum(e * e, axis=-1), axis=-1)
    return np.maximum(np.exp(-s), np.finfo(float).tiny)


def check_termination(cfg: SimEnvConfig, state: SimState, keypoints, ref_keypoints, horizon=None):
    """Termination flags and reason codes (indices into TERMINATION_REASONS)."""
    reason = np.zeros(state.n, dtype=int)
    err = np.sqrt(np.sum((np.asarray(keypoints) - np.asarray(ref_keypoints)) ** 2, axis=-1)).max(axis=-1)
    up = quat_to_matrix(state.quat)[:, 2, 2]
    if horizon is not None:
        reason = np.where(state.episode_step >= np.asarray(horizon), 4, reason)
    reason = np.where(err > cfg.max_tracking_error, 3, reason)
    reason = np.where(up < np.cos(np.radians(cfg.max_tilt_deg)), 2, reason)
    reason = np.where(state.pos[:, 2] < cfg.min_height, 1, reason)
    return reason > 0, reason


def observe(morph: Morphology, cfg: SimEnvConfig, state: SimState, params, prev_target, ref: Reference) -> ObsSplit:
    default = np.asarray(cfg.default_pose, dtype=float)
    R = quat_to_matrix(state.quat)
    gravity_b = -R[:, 2, :]  # R^T (0, 0, -1)
    actor = np.concatenate([
        state.q - default,
        state.qd * cfg.joint_vel_scale,
        state.ang_vel * cfg.ang_vel_scale,
        gravity_b,
        prev_target - default,
        ref.window,
        ref.command,
    ], axis=1)
    priv = np.concatenate([
        rotate_inv(R, state.lin_vel),
        state.pos[:, 2:3],
        np.broadcast_to(np.asarray(params, dtype=float), (state.n, len(PARAM_NAMES))),
        state.contact_force * cfg.contact_force_scale,
        rotate_inv(R, ref.root_pos - state.pos),
    ], axis=1)
    return ObsSplit(actor, np.concatenate([actor, priv], axis=1))


def step(morph: Morphology, cfg: SimEnvConfig, state: SimState, action, params, reference: Reference,
         prev_target=None, horizon=None):
    """One control step.  ``action`` holds target joint positions.

    Returns (state, RewardTerms, terminated, reason codes, ObsSplit).
    """
    action = np.atleast_2d(np.asarray(action, dtype=float))
    bad = ~np.all(np.isfinite(action), axis=1)
    if bad.any():
        raise SimulationError(f"non-finite action for envs {np.nonzero(bad)[0].tolist()}")
    target = np.clip(action, morph.lower, morph.upper)
    prev_target = state.q if prev_target is None else prev_target
    new, energy = physics_step(morph, cfg, state, target, params)
    new.episode_step = new.episode_step + 1
    ok = new.finite_rows()
    if not ok.all():
        i = int(np.nonzero(~ok)[0][0])
        raise SimulationError(f"env {i}: non-finite state after step {int(state.episode_step[i])} "
                              f"(pos={state.pos[i].tolist()}, q={state.q[i].tolist()})")
    kp = new.keypoints(morph)
    terminated, reason = check_termination(cfg, new, kp, reference.keypoints, horizon)
    w = cfg.reward_weights
    failed = np.isin(reason, FAILURE_CODES)
    d = target - prev_target
    terms = RewardTerms(
        r_track=tracking_reward(kp, reference.keypoints, cfg.keypoint_weights()),
        r_action_rate=-np.sum(d * d, axis=1),
        r_energy=-energy,
        r_alive=np.where(failed, 0.0, 1.0),
        r_termination=np.where(failed, -1.0, 0.0),
        total=np.zeros(new.n),
    )
    terms.total = (w["track"] * terms.r_track + w["action_rate"] * terms.r_action_rate
                   + w["energy"] * terms.r_energy + w["alive"] * terms.r_alive
                   + w["termination"] * terms.r_termination)
    obs = observe(morph, cfg, new, params, target, reference)
    return new, terms, terminated, reason, obs


def randomize(nominal: DynamicsParams, ranges: dict, rng: np.random.Generator) -> DynamicsParams:
    """Multiplicative uniform sample of every parameter (PARAM_NAMES order, one draw each)."""
    vec = nominal.vector()
    for k, r in ranges.items():
        if k not in PARAM_NAMES:
            raise SimConfigError(f"unknown parameter {k!r}")
        if not r[0] <= r[1]:
            raise SimConfigError(f"invalid range for {k}: lo > hi")
    out = vec.copy()
    for j, k in enumerate(PARAM_NAMES):
        lo, hi = ranges.get(k, (1.0, 1.0))
        u = rng.random()
        out[j] = vec[j] * (lo + (hi - lo) * u)
    return DynamicsParams.from_vector(out)


# -- motion references and the vectorized environment -------------------------

class MotionRef:
    """Per-clip precomputation: world keypoints and observation features."""

    def __init__(self, morph: Morphology, cfg: SimEnvConfig, clip: MotionClip):
        if clip.n_frames < 1:
            raise SimConfigError(f"motion {clip.id!r} is empty")
        self.clip = clip
        self.T = clip.n_frames
        q = np.clip(clip.q, morph.lower, morph.upper)
        self.q = q
        self.keypoints = fk_batch(morph, clip.root_pos, clip.root_quat, q)
        vel = np.zeros((self.T, 3))
        if self.T > 1:
            vel[:-1] = np.diff(clip.root_pos, axis=0) * clip.fps
            vel[-1] = vel[-2]
        R = quat_to_matrix(clip.root_quat)
        self.features = np.concatenate(
            [q - np.asarray(cfg.default_pose), rotate_inv(R, vel), clip.root_pos[:, 2:3]], axis=1)
        self.W = cfg.ref_window

    def window(self, frames: np.ndarray) -> np.ndarray:
        idx = np.minimum(np.asarray(frames)[:, None] + np.arange(self.W), self.T - 1)
        return self.features[idx].reshape(len(idx), -1)


class VecEnv:
    """N independent environments, each tracking its assigned motion clip.

    ``actions`` passed to ``step`` are normalized: the joint target is
    ``default_pose + action_scale * action`` (clipped to limits).
    """

    def __init__(self, morph: Morphology, cfg: SimEnvConfig, motions, seed: int = 0,
                 command_embeddings=None, num_threads: int = 1):
        self.morph = morph
        self.cfg = cfg
        self.n = len(motions)
        if self.n == 0:
            raise SimConfigError("VecEnv needs at least one motion")
        self.seed = int(seed)
        self.rngs = [np.random.default_rng(np.random.SeedSequence([self.seed, i])) for i in range(self.n)]
        self.num_threads = max(1, int(num_threads))
        self._pool = ThreadPoolExecutor(self.num_threads) if self.num_threads > 1 else None
        self._refs: dict[int, MotionRef] = {}
        self.nominal = cfg.nominal_params()
        self.params = np.tile(self.nominal.vector(), (self.n, 1))
        self.default = np.asarray(cfg.default_pose, dtype=float)
        self.state = SimState.at_rest(np.zeros((self.n, 3)), np.tile([1.0, 0, 0, 0], (self.n, 1)),
                                      np.tile(self.default, (self.n, 1)))
        self.prev_target = np.tile(self.default, (self.n, 1))
        self.start = np.zeros(self.n, dtype=int)
        self.horizon = np.ones(self.n, dtype=int)
        self.set_motions(motions, command_embeddings)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def set_motions(self, motions, command_embeddings=None):
        if len(motions) != self.n:
            raise SimConfigError(f"expected {self.n} motions, got {len(motions)}")
        self.motions = list(motions)
        self.refs = [self._ref(m) for m in self.motions]
        # concatenated tables so per-step reference lookups are single gathers
        uniq: dict[int, int] = {}
        tables = []
        for ref in self.refs:
            if id(ref) not in uniq:
                uniq[id(ref)] = sum(len(t.features) for t in tables)
                tables.append(ref)
        self._off = np.array([uniq[id(r)] for r in self.refs], dtype=int)
        self._T = np.array([r.T for r in self.refs], dtype=int)
        self._kp_all = np.concatenate([t.keypoints for t in tables])
        self._feat_all = np.concatenate([t.features for t in tables])
        self._root_all = np.concatenate([t.clip.root_pos for t in tables])
        cd = self.cfg.command_dim
        if command_embeddings is None:
            self.commands = np.zeros((self.n, cd))
        else:
            self.commands = np.asarray(command_embeddings, dtype=float).reshape(self.n, cd)

    def _ref(self, clip: MotionClip) -> MotionRef:
        key = id(clip)
        ref = self._refs.get(key)
        if ref is None or ref.clip is not clip:
            ref = MotionRef(self.morph, self.cfg, clip)
            self._refs[key] = ref
        return ref

    def frames(self, ahead: int = 0) -> np.ndarray:
        """Reference frame index of each env's current (or a later) step."""
        return np.minimum(self.start + self.state.episode_step + ahead, self._T - 1)

    def _reference(self, frames: np.ndarray) -> Reference:
        g = self._off + frames
        W = self.cfg.ref_window
        win = self._off[:, None] + np.minimum(frames[:, None] + np.arange(W), self._T[:, None] - 1)
        return Reference(self._kp_all[g], self._root_all[g], self._feat_all[win].reshape(self.n, -1), self.commands)

    def reset(self, idx) -> None:
        """Reset the listed envs to a frame of their motion (frame 0 unless random_start)."""
        idx = np.atleast_1d(np.asarray(idx, dtype=int))
        if idx.size == 0:
            return
        cfg = self.cfg
        pos, quat, q = [], [], []
        for i in idx:
            rng = self.rngs[i]
            ref = self.refs[i]
            p = randomize(self.nominal, cfg.ranges, rng) if cfg.randomize else self.nominal
            self.params[i] = p.vector()
            f = int(rng.integers(0, max(ref.T - 1, 1))) if cfg.random_start else 0
            self.start[i] = f
            self.horizon[i] = max(1, min(cfg.max_episode_steps, ref.T - 1 - f))
            qi = ref.q[f]
            if cfg.reset_noise > 0:
                qi = qi + cfg.reset_noise * rng.standard_normal(N_JOINTS)
            pos.append(ref.clip.root_pos[f])
            quat.append(ref.clip.root_quat[f])
            q.append(np.clip(qi, self.morph.lower, self.morph.upper))
        st = SimState.at_rest(np.array(pos), np.array(quat), np.array(q))
        if cfg.warmup_substeps > 0:
            st, _ = physics_step(self.morph, cfg, st, st.q.copy(), self.params[idx], cfg.warmup_substeps, True)
            st.time = np.zeros(len(idx))
            st.episode_step = np.zeros(len(idx), dtype=int)
        self.state.put(idx, st)
        self.prev_target[idx] = st.q

    def reset_all(self) -> ObsSplit:
        self.reset(np.arange(self.n))
        return self.observe()

    def observe(self) -> ObsSplit:
        ref = self._reference(self.frames())
        return observe(self.morph, self.cfg, self.state, self.params, self.prev_target, ref)

    def targets(self, actions) -> np.ndarray:
        return np.clip(self.default + self.cfg.action_scale * actions, self.morph.lower, self.morph.upper)

    def _run(self, fn, target, ref, horizon):
        if self._pool is None or self.n < 2:
            return fn(self.state, target, self.params, ref, self.prev_target, horizon)
        chunks = [c for c in np.array_split(np.arange(self.n), self.num_threads) if c.size]

        def job(c):
            r = Reference(ref.keypoints[c], ref.root_pos[c], ref.window[c], ref.command[c])
            return fn(self.state.take(c), target[c], self.params[c], r, self.prev_target[c], horizon[c])

        parts = list(self._pool.map(job, chunks))
        st = self.state.copy()
        for c, p in zip(chunks, parts):
            st.put(c, p[0])
        cat = lambda k: np.concatenate([getattr(p[1], k) for p in parts])  # noqa: E731
        terms = RewardTerms(*(cat(f.name) for f in fields(RewardTerms)))
        term = np.concatenate([p[2] for p in parts])
        reason = np.concatenate([p[3] for p in parts])
        obs = ObsSplit(np.concatenate([p[4].actor for p in parts]), np.concatenate([p[4].critic for p in parts]))
        return st, terms, term, reason, obs

    def step(self, actions, auto_reset: bool = True):
        """Step all envs with normalized actions.

        Returns (obs, RewardTerms, done, info); ``info["reason"]`` lists the
        termination reason per env, ``info["failed"]`` flags non-timeout ends
        and ``info["terminal_obs"]`` holds the observation before any reset.
        """
        actions = np.asarray(actions, dtype=float).reshape(self.n, N_JOINTS)
        if not np.all(np.isfinite(actions)):
            rows = np.nonzero(~np.all(np.isfinite(actions), axis=1))[0].tolist()
            raise SimulationError(f"non-finite action for envs {rows}")
        target = self.targets(actions)
        ref = self._reference(self.frames(1))

        def fn(state, tgt, params, r, prev, hor):
            return step(self.morph, self.cfg, state, tgt, params, r, prev, hor)

        st, terms, done, reason, obs = self._run(fn, target, ref, self.horizon)
        self.state = st
        self.prev_target = target
        info = {"reason": [TERMINATION_REASONS[r] for r in reason], "failed": np.isin(reason, FAILURE_CODES),
                "terminal_obs": obs}
        if auto_reset and done.any():
            idx = np.nonzero(done)[0]
            self.reset(idx)
            obs = self.observe()
        return obs, terms, done, info

    def snapshot(self, i: int):
        s = self.state
        return s.pos[i].copy(), s.quat[i].copy(), s.q[i].copy(), s.qd[i].copy(), s.foot_contact[i].copy()


def reset(morph: Morphology, cfg: SimEnvConfig, motion: MotionClip, rng_seed: int = 0, command=None):
    """Single-env reset; returns (SimState with one row, ObsSplit)."""
    env = VecEnv(morph, cfg, [motion], seed=rng_seed,
                 command_embeddings=None if command is None else np.atleast_2d(command))
    obs = env.reset_all()
    return env.state, obs
