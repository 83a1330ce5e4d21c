"""Per-frame weighted inverse kinematics for keypoint retargeting.

Each frame minimizes

    sum_i w_i |FK_i(q) - target_i|^2 + w_reg |q - q_prev|^2

with damped Gauss-Newton.  Every trial point is projected onto the joint
limits before it is evaluated, so accepted iterates are always feasible and
the objective never increases.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numba
import numpy as np

from .dataset import AnnotationTriple, MotionClip
from .kinematics import (
    FOOT_INDICES,
    HIP_INDICES,
    KEYPOINT_INDEX,
    KNEE_INDICES,
    LEG_SIDE,
    KEYPOINTS,
    N_KEYPOINTS,
    KeypointSet,
    Morphology,
    RootPose,
    clamp_to_limits,
    fk_batch,
    quat_to_matrix,
    trunk_frame_keypoints,
    within_limits,
)

log = logging.getLogger(__name__)


class RetargetError(ValueError):
    pass


@dataclass
class RetargetWeights:
    w_keypoint: dict[str, float]
    w_reg: float = 0.1

    def __post_init__(self):
        for k, v in self.w_keypoint.items():
            if k not in KEYPOINT_INDEX:
                raise RetargetError(f"unknown keypoint id {k!r}")
            if v < 0:
                raise RetargetError("keypoint weights must be non-negative")
        if self.w_reg < 0:
            raise RetargetError("w_reg must be non-negative")
        if not any(v > 0 for v in self.w_keypoint.values()):
            raise RetargetError("at least one keypoint weight must be positive")

    @classmethod
    def default(cls, foot: float = 5.0, other: float = 1.0, w_reg: float = 0.1) -> "RetargetWeights":
        return cls({k: (foot if k.startswith("foot") else other) for k in KEYPOINTS}, w_reg)

    def vector(self) -> np.ndarray:
        return np.array([self.w_keypoint.get(k, 0.0) for k in KEYPOINTS])


@dataclass
class SolverOptions:
    max_iters: int = 50
    obj_tol: float = 1e-8
    step_tol: float = 1e-12
    damping: float = 1e-4
    max_backtracks: int = 12
    # per-leg restarts, tried only while a leg's keypoint RMS error exceeds restart_tol
    restart_tol: float = 1e-3
    restart_seeds: tuple = ((0.0, 0.8, -1.6), (0.0, 2.6, -1.2), (0.0, -1.0, -0.8), (0.0, 1.6, -0.4))


@dataclass
class RetargetProblem:
    morph: Morphology
    targets: Sequence[KeypointSet]
    root_track: Sequence[RootPose]
    weights: RetargetWeights
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if len(self.targets) < 1:
            raise RetargetError("retargeting needs at least one frame")
        if len(self.targets) != len(self.root_track):
            raise RetargetError("targets and root_track must have the same length")

    @property
    def n_frames(self) -> int:
        return len(self.targets)


class FrameSolution(NamedTuple):
    q: np.ndarray
    residual: float
    converged: bool


@dataclass
class RetargetResult:
    q_traj: np.ndarray  # (T, 12)
    residuals: np.ndarray  # (T,)
    converged: np.ndarray  # (T,) bool


def _leg_fk(morph: Morphology, q4: np.ndarray):
    """Trunk-frame (hip, knee, foot) positions (4, 3, 3) and their Jacobians (4, 3, 3, 3).

    Jacobian axes: leg, keypoint, coordinate, leg joint.
    """
    a, h, k = q4[:, 0], q4[:, 1], q4[:, 2]
    ca, sa = np.cos(a), np.sin(a)
    ch, sh = np.cos(h), np.sin(h)
    chk, shk = np.cos(h + k), np.sin(h + k)
    y0 = LEG_SIDE * morph.l_hip
    l1, l2 = morph.l_thigh, morph.l_calf
    kx, kz = l1 * sh, -l1 * ch
    fx, fz = kx + l2 * shk, kz - l2 * chk
    hip = morph.hip_offsets
    pos = np.empty((4, 3, 3))
    pos[:, 0] = hip
    pos[:, 1, 0] = hip[:, 0] + kx
    pos[:, 1, 1] = hip[:, 1] + ca * y0 - sa * kz
    pos[:, 1, 2] = hip[:, 2] + sa * y0 + ca * kz
    pos[:, 2, 0] = hip[:, 0] + fx
    pos[:, 2, 1] = hip[:, 1] + ca * y0 - sa * fz
    pos[:, 2, 2] = hip[:, 2] + sa * y0 + ca * fz
    jac = np.zeros((4, 3, 3, 3))
    for kp, zz, dx, dz in ((1, kz, l1 * ch, l1 * sh), (2, fz, l1 * ch + l2 * chk, l1 * sh + l2 * shk)):
        jac[:, kp, 1, 0] = -sa * y0 - ca * zz
        jac[:, kp, 2, 0] = ca * y0 - sa * zz
        jac[:, kp, 0, 1] = dx
        jac[:, kp, 1, 1] = -sa * dz
        jac[:, kp, 2, 1] = ca * dz
    jac[:, 2, 0, 2] = l2 * chk
    jac[:, 2, 1, 2] = -sa * l2 * shk
    jac[:, 2, 2, 2] = ca * l2 * shk
    return pos, jac


def weighted_rms(w: np.ndarray, e: np.ndarray) -> float:
    active = w > 0
    return float(np.sqrt(np.dot(w[active], np.sum(e[active] ** 2, axis=1)) / w[active].sum()))


def solve_frame(problem: RetargetProblem, t: int, q_prev) -> FrameSolution:
    """Local minimizer of the frame-``t`` objective, started from ``q_prev``.

    The objective is a sum of independent per-leg terms (the trunk keypoint
    does not depend on q), so the four 3-joint subproblems are iterated
    side by side.  Joints sitting on a limit with the descent direction
    pointing outward are held fixed for the step (active set); every trial
    point is projected onto the limits.  A leg stops after a step improving
    its objective by less than ``obj_tol``.  That last step is kept, except
    on the first iteration: a start that cannot be improved by ``obj_tol`` is
    returned unchanged, so a converged start is a fixed point.

    The returned residual is the weighted RMS keypoint error over keypoints
    with positive weight.
    """
    if not 0 <= t < problem.n_frames:
        raise RetargetError(f"frame index {t} out of range")
    morph = problem.morph
    q0 = np.array(q_prev, dtype=float)
    if q0.shape != (12,) or not within_limits(morph, q0, 1e-12):
        raise RetargetError("q_prev must be 12 joint angles within joint limits")
    q0 = clamp_to_limits(morph, q0)
    targets = np.asarray(problem.targets[t].points)
    if not np.all(np.isfinite(targets)):
        raise RetargetError(f"frame {t}: non-finite targets")
    root = problem.root_track[t]
    rot = quat_to_matrix(root.orientation)
    # work in the trunk frame: rotation preserves the squared errors
    local_t = (targets - root.position) @ rot
    w_all = problem.weights.vector()
    w_reg = problem.weights.w_reg
    opts = problem.solver

    leg_kp = np.array([[HIP_INDICES[l], KNEE_INDICES[l], FOOT_INDICES[l]] for l in range(4)])
    tgt = local_t[leg_kp]  # (4, 3, 3)
    w = w_all[leg_kp]  # (4, 3)
    qp = q0.reshape(4, 3)
    q, f, done, fails = _gauss_newton_legs(morph, tgt, w, w_reg, qp, qp.copy(), opts)
    kp_err = _leg_keypoint_rms(morph, q, tgt, w)
    retry = kp_err > opts.restart_tol
    for seed in opts.restart_seeds:
        if not retry.any():
            break
        start = qp.copy()
        start[retry] = np.clip(seed, morph.lower[:3], morph.upper[:3])
        q2, f2, done2, fails2 = _gauss_newton_legs(morph, tgt, w, w_reg, qp, start, opts)
        better = retry & (f2 < f)
        q[better], f[better], done[better], fails[better] = q2[better], f2[better], done2[better], fails2[better]
        retry &= _leg_keypoint_rms(morph, q, tgt, w) > opts.restart_tol
    converged = bool(done.all())
    if not converged:
        if np.any(fails >= opts.max_iters // 2):
            log.warning("frame %d: diverging, %s consecutive damped steps without decrease", t, fails.tolist())
        else:
            log.debug("frame %d: max_iters reached", t)
    q_out = q.reshape(12)
    kp = trunk_frame_keypoints(morph, q_out)
    return FrameSolution(q_out, weighted_rms(w_all, kp - local_t), converged)


def _leg_keypoint_rms(morph, q, tgt, w):
    pos, _ = _leg_fk(morph, q)
    se = np.sum(w * np.sum((pos - tgt) ** 2, axis=2), axis=1)
    return np.sqrt(se / np.maximum(w.sum(axis=1), 1e-300))


def _gauss_newton_legs(morph, tgt, w, w_reg, qp, q, opts):
    q = np.ascontiguousarray(q, dtype=float).copy()
    f = np.zeros(4)
    done = np.zeros(4, dtype=np.bool_)
    fails = np.zeros(4, dtype=np.int64)
    _gn_kernel(np.ascontiguousarray(morph.hip_offsets, dtype=float), LEG_SIDE * morph.l_hip, float(morph.l_thigh),
               float(morph.l_calf), morph.lower.reshape(4, 3).copy(), morph.upper.reshape(4, 3).copy(),
               np.ascontiguousarray(tgt, dtype=float), np.ascontiguousarray(w, dtype=float), float(w_reg),
               np.ascontiguousarray(qp, dtype=float), q, f, done, fails, int(opts.max_iters), float(opts.obj_tol),
               float(opts.step_tol), float(opts.damping), int(opts.max_backtracks))
    return q, f, done, fails


@numba.njit(cache=True)
def _leg_eval(hip, y0, l1, l2, tgt, w, w_reg, qp, q, e, jac):
    """Objective of one leg at ``q``; fills residuals e (3, 3) and Jacobian jac (3 keypoints, 3 coords, 3 joints)."""
    a, h, k = q[0], q[1], q[2]
    ca, sa = math.cos(a), math.sin(a)
    ch, sh = math.cos(h), math.sin(h)
    chk, shk = math.cos(h + k), math.sin(h + k)
    kx, kz = l1 * sh, -l1 * ch
    fx, fz = kx + l2 * shk, kz - l2 * chk
    for c in range(3):
        e[0, c] = hip[c] - tgt[0, c]
    e[1, 0] = hip[0] + kx - tgt[1, 0]
    e[1, 1] = hip[1] + ca * y0 - sa * kz - tgt[1, 1]
    e[1, 2] = hip[2] + sa * y0 + ca * kz - tgt[1, 2]
    e[2, 0] = hip[0] + fx - tgt[2, 0]
    e[2, 1] = hip[1] + ca * y0 - sa * fz - tgt[2, 1]
    e[2, 2] = hip[2] + sa * y0 + ca * fz - tgt[2, 2]
    jac[:] = 0.0
    for kp in (1, 2):
        if kp == 1:
            zz, dx, dz = kz, l1 * ch, l1 * sh
        else:
            zz, dx, dz = fz, l1 * ch + l2 * chk, l1 * sh + l2 * shk
        jac[kp, 1, 0] = -sa * y0 - ca * zz
        jac[kp, 2, 0] = ca * y0 - sa * zz
        jac[kp, 0, 1] = dx
        jac[kp, 1, 1] = -sa * dz
        jac[kp, 2, 1] = ca * dz
    jac[2, 0, 2] = l2 * chk
    jac[2, 1, 2] = -sa * l2 * shk
    jac[2, 2, 2] = ca * l2 * shk
    f = 0.0
    for kp in range(3):
        f += w[kp] * (e[kp, 0] ** 2 + e[kp, 1] ** 2 + e[kp, 2] ** 2)
    for j in range(3):
        f += w_reg * (q[j] - qp[j]) ** 2
    return f


@numba.njit(cache=True)
def _solve3(A, b):
    """Gaussian elimination with partial pivoting for a 3x3 system."""
    M = A.copy()
    x = b.copy()
    for c in range(3):
        p = c
        for r in range(c + 1, 3):
            if abs(M[r, c]) > abs(M[p, c]):
                p = r
        if p != c:
            for j in range(3):
                M[c, j], M[p, j] = M[p, j], M[c, j]
            x[c], x[p] = x[p], x[c]
        for r in range(c + 1, 3):
            m = M[r, c] / M[c, c]
            for j in range(c, 3):
                M[r, j] -= m * M[c, j]
            x[r] -= m * x[c]
    for c in range(2, -1, -1):
        s = x[c]
        for j in range(c + 1, 3):
            s -= M[c, j] * x[j]
        x[c] = s / M[c, c]
    return x


@numba.njit(cache=True)
def _gn_kernel(hips, y0s, l1, l2, lo, hi, tgt, w, w_reg, qp, q, f_out, done_out, fails_out, max_iters, obj_tol,
               step_tol, damping, max_backtracks):
    e = np.empty((3, 3))
    jac = np.empty((3, 3, 3))
    e_try = np.empty((3, 3))
    jac_try = np.empty((3, 3, 3))
    H = np.empty((3, 3))
    A = np.empty((3, 3))
    g = np.empty(3)
    rhs = np.empty(3)
    q_try = np.empty(3)
    q_new = np.empty(3)
    free = np.empty(3, dtype=np.bool_)
    for leg in range(4):
        ql = q[leg]
        sw = np.sqrt(w[leg])
        f = _leg_eval(hips[leg], y0s[leg], l1, l2, tgt[leg], w[leg], w_reg, qp[leg], ql, e, jac)
        done = f == 0.0
        mu = damping
        fails = 0
        it = 0
        while not done and it < max_iters:
            it += 1
            # normal equations of the weighted residual, plus the regularizer
            for i in range(3):
                g[i] = w_reg * (ql[i] - qp[leg, i])
                for j in range(3):
                    H[i, j] = w_reg if i == j else 0.0
            for kp in range(3):
                wk = sw[kp] * sw[kp]
                for c in range(3):
                    for i in range(3):
                        g[i] += wk * jac[kp, c, i] * e[kp, c]
                        for j in range(3):
                            H[i, j] += wk * jac[kp, c, i] * jac[kp, c, j]
            # active set: on a bound and the gradient pushes further out
            for i in range(3):
                fixed = (ql[i] <= lo[leg, i] and g[i] > 0) or (ql[i] >= hi[leg, i] and g[i] < 0)
                free[i] = not fixed
            gnorm = 0.0
            for i in range(3):
                for j in range(3):
                    A[i, j] = H[i, j] if (free[i] and free[j]) else 0.0
                A[i, i] += mu * (H[i, i] + 1e-9) + (0.0 if free[i] else 1.0)
                rhs[i] = -g[i] if free[i] else 0.0
                gnorm += rhs[i] * rhs[i]
            gnorm = math.sqrt(gnorm)
            step = _solve3(A, rhs)
            alpha = 1.0
            accepted = False
            tiny = False
            f_new = f
            for _ in range(max_backtracks):
                dmax = 0.0
                for i in range(3):
                    v = min(max(ql[i] + alpha * step[i], lo[leg, i]), hi[leg, i])
                    q_try[i] = v
                    dmax = max(dmax, abs(v - ql[i]))
                if dmax < step_tol:
                    tiny = True
                    break
                f_try = _leg_eval(hips[leg], y0s[leg], l1, l2, tgt[leg], w[leg], w_reg, qp[leg], q_try, e_try,
                                  jac_try)
                if f_try < f:
                    accepted = True
                    f_new = f_try
                    q_new[:] = q_try
                    break
                alpha *= 0.5
            small = accepted and (f - f_new < obj_tol)
            take = accepted and not (small and it == 1)
            stalled = not accepted
            done = small or (stalled and (tiny or gnorm < 1e-12))
            if take:
                ql[:] = q_new
                f = f_new
                e[:] = e_try
                jac[:] = jac_try
                mu = max(mu * 0.3, 1e-9)
                fails = 0
            elif stalled and not done:
                mu *= 10.0
                fails += 1
        f_out[leg] = f
        done_out[leg] = done
        fails_out[leg] = fails


def solve_trajectory(problem: RetargetProblem, q_init=None) -> RetargetResult:
    q = np.zeros(12) if q_init is None else np.asarray(q_init, dtype=float)
    q = clamp_to_limits(problem.morph, q)
    qs, res, conv = [], [], []
    for t in range(problem.n_frames):
        sol = solve_frame(problem, t, q)
        if not sol.converged:
            log.warning("frame %d did not converge (residual %.3g m)", t, sol.residual)
        q = sol.q
        qs.append(q)
        res.append(sol.residual)
        conv.append(sol.converged)
    return RetargetResult(np.array(qs), np.array(res), np.array(conv))


class SkateScore(NamedTuple):
    mean_speed: float
    no_contact: bool


def foot_skate_score(morph: Morphology, root_track: Sequence[RootPose], q_traj, contacts, fps: float = 50.0) -> SkateScore:
    """Mean horizontal foot speed over (frame, foot) pairs flagged in contact.

    Speed at frame t is the forward difference to t + 1, so the last frame
    contributes nothing.
    """
    q_traj = np.asarray(q_traj, dtype=float)
    contacts = np.asarray(contacts, dtype=bool)
    T = len(root_track)
    if q_traj.shape != (T, 12) or contacts.shape != (T, 4):
        raise RetargetError("root_track, q_traj and contacts must have matching frame counts")
    pos = np.array([r.position for r in root_track])
    quat = np.array([r.orientation for r in root_track])
    feet = fk_batch(morph, pos, quat, q_traj)[:, list(FOOT_INDICES), :2]
    speed = np.linalg.norm(np.diff(feet, axis=0), axis=2) * fps  # (T-1, 4)
    mask = contacts[:-1]
    if not mask.any():
        return SkateScore(0.0, True)
    return SkateScore(float(speed[mask].mean()), False)


# -- source keypoint handling -------------------------------------------------

def estimate_root_pose(morph: Morphology, keypoints: np.ndarray) -> RootPose:
    """Rigid fit of the trunk and hip keypoints to their trunk-frame positions (Kabsch)."""
    idx = [0] + list(HIP_INDICES)
    src = np.vstack([np.zeros(3), morph.hip_offsets])
    dst = np.asarray(keypoints, dtype=float)[idx]
    sc, dc = src.mean(axis=0), dst.mean(axis=0)
    H = (src - sc).T @ (dst - dc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RootPose(dc - R @ sc, matrix_to_quat(R))


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
            q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
            q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
            q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def read_keypoint_csv(path, scale: float = 1.0) -> np.ndarray:
    """Read ``frame,keypoint,x,y,z`` rows into a (T, 13, 3) array.

    Every frame must list all 13 keypoints.
    """
    frames: dict[int, dict[str, np.ndarray]] = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        needed = {"frame", "keypoint", "x", "y", "z"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise RetargetError(f"keypoint CSV needs columns {sorted(needed)}")
        for line, row in enumerate(reader, start=2):
            kp = row["keypoint"]
            if kp not in KEYPOINT_INDEX:
                raise RetargetError(f"line {line}: unknown keypoint {kp!r}")
            try:
                t = int(row["frame"])
                frames.setdefault(t, {})[kp] = np.array([float(row[a]) for a in "xyz"])
            except ValueError:
                raise RetargetError(f"line {line}: malformed number") from None
    if not frames:
        raise RetargetError("keypoint CSV has no rows")
    order = sorted(frames)
    if order != list(range(len(order))):
        raise RetargetError("frames must be numbered 0..T-1 without gaps")
    out = np.zeros((len(order), N_KEYPOINTS, 3))
    for t in order:
        missing = set(KEYPOINTS) - set(frames[t])
        if missing:
            raise RetargetError(f"frame {t}: missing keypoints {sorted(missing)}")
        for k, v in frames[t].items():
            out[t, KEYPOINT_INDEX[k]] = v
    return out * scale


def retarget_keypoints(morph: Morphology, keypoints: np.ndarray, weights: RetargetWeights,
                       solver: SolverOptions | None = None, q_init=None,
                       clip_id: str = "retargeted", annotations: AnnotationTriple | None = None,
                       contact_height: float = 0.02) -> tuple[MotionClip, RetargetResult]:
    """Retarget a (T, 13, 3) keypoint trajectory and pack the result as a clip.

    Root poses come from a rigid fit of the trunk and hip keypoints; foot
    contacts are flagged where the target foot is within ``contact_height``
    of the ground.
    """
    keypoints = np.asarray(keypoints, dtype=float)
    roots = [estimate_root_pose(morph, kp) for kp in keypoints]
    problem = RetargetProblem(morph, [KeypointSet(k) for k in keypoints], roots, weights, solver or SolverOptions())
    result = solve_trajectory(problem, q_init)
    contacts = keypoints[:, list(FOOT_INDICES), 2] < contact_height
    ann = annotations or AnnotationTriple()
    clip = MotionClip(
        clip_id,
        np.array([r.position for r in roots]),
        np.array([r.orientation for r in roots]),
        result.q_traj,
        contacts,
        ann,
        "retarget",
        flags=() if all([ann.action_label, ann.scenario, ann.command]) else ("synthetic",),
    )
    return clip, result
