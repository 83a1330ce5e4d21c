from dataclasses import asdict, replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quadtrack.dataset import MotionClip
from quadtrack.kinematics import FOOT_INDICES, N_KEYPOINTS, default_morphology, fk_batch, standing_height
from quadtrack.simenv import (
    LEG_SIDE, PARAM_NAMES, REF_FEATURES, STANDING_POSE, DynamicsParams, Reference, SimConfigError, SimEnvConfig,
    SimState, SimulationError, VecEnv, _chol_solve, _feet, _foot_jac, check_termination, observe, physics_step,
    randomize, reset, step, tracking_reward,
)

M = default_morphology()
POSE = np.array(STANDING_POSE)
H = standing_height(M, POSE)


def standing_clip(T=20, height=H, sway=0.0):
    q = np.tile(POSE, (T, 1))
    q[:, 1::3] += sway * np.sin(np.arange(T) / 5.0)[:, None]
    return MotionClip("stand", np.tile([0.0, 0.0, height], (T, 1)), np.tile([1.0, 0, 0, 0], (T, 1)), q,
                      np.ones((T, 4), dtype=bool))


def params(cfg):
    return cfg.nominal_params().vector()


def run(cfg, st_, target, n):
    hist = []
    for _ in range(n):
        st_, _ = physics_step(M, cfg, st_, target, params(cfg))
        hist.append(st_)
    return hist


def max_diff(a, b):
    return max(np.abs(getattr(a, k) - getattr(b, k)).max() for k in ("pos", "quat", "lin_vel", "ang_vel", "q", "qd"))


def free_cfg(**kw):
    return SimEnvConfig(ground=False, nominal=asdict(DynamicsParams(gravity=0.0)), **kw)


# -- kernel building blocks ---------------------------------------------------

def test_foot_jacobian_matches_finite_differences(rng):
    out = np.zeros((4, 3))
    J = np.zeros((3, 3))
    for _ in range(20):
        q = rng.uniform(M.lower, M.upper)
        for leg in range(4):
            _foot_jac(q, leg, M.l_hip, M.l_thigh, M.l_calf, LEG_SIDE, J)
            fd = np.zeros((3, 3))
            for c in range(3):
                qp, qm = q.copy(), q.copy()
                qp[3 * leg + c] += 1e-6
                qm[3 * leg + c] -= 1e-6
                _feet(qp, M.hip_offsets, M.l_hip, M.l_thigh, M.l_calf, LEG_SIDE, out)
                fp = out[leg].copy()
                _feet(qm, M.hip_offsets, M.l_hip, M.l_thigh, M.l_calf, LEG_SIDE, out)
                fd[:, c] = (fp - out[leg]) / 2e-6
            np.testing.assert_allclose(J, fd, atol=1e-8)


def test_feet_match_forward_kinematics(rng):
    out = np.zeros((4, 3))
    for _ in range(10):
        q = rng.uniform(M.lower, M.upper)
        _feet(q, M.hip_offsets, M.l_hip, M.l_thigh, M.l_calf, LEG_SIDE, out)
        kp = fk_batch(M, np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), q[None])[0]
        np.testing.assert_allclose(out, kp[list(FOOT_INDICES)], atol=1e-12)


def test_cholesky_solve(rng):
    for n in (1, 6, 18):
        B = rng.normal(size=(n, n))
        A = B @ B.T + n * np.eye(n)
        b = rng.normal(size=n)
        np.testing.assert_allclose(_chol_solve(A, b, n), np.linalg.solve(A, b), rtol=1e-10, atol=1e-12)


# -- step examples ------------------------------------------------------------

def test_static_equilibrium_rigid_legs():
    # kinematic legs: a robot standing still with action = current q stays put
    cfg = SimEnvConfig(leg_reaction=False)
    settled = run(cfg, SimState.at_rest([[0, 0, H]], [[1, 0, 0, 0]], [POSE]), POSE, 200)[-1]
    hist = run(cfg, settled, settled.q.copy(), 100)
    assert max_diff(hist[-2], hist[-1]) < 1e-6
    assert max_diff(settled, hist[-1]) < 1e-6


def test_static_equilibrium_loaded_legs():
    # with ground reaction on the joints the PD targets have to carry the weight,
    # so the equilibrium is reached while holding the nominal pose as target
    cfg = SimEnvConfig()
    hist = run(cfg, SimState.at_rest([[0, 0, H]], [[1, 0, 0, 0]], [POSE]), POSE, 400)
    assert max_diff(hist[-2], hist[-1]) < 1e-6
    up = hist[-1].quat[0, 0] ** 2
    assert up > 0.99


@pytest.mark.parametrize("leg_reaction,tol", [(False, 1e-9), (True, 0.10)])
def test_drop_penetration_matches_static_force_balance(leg_reaction, tol):
    cfg = SimEnvConfig(leg_reaction=leg_reaction)
    hist = run(cfg, SimState.at_rest([[0, 0, H + 0.1]], [[1, 0, 0, 0]], [POSE]), POSE, 400)
    last = hist[-1]
    assert last.foot_contact.all()
    feet_z = fk_batch(M, last.pos, last.quat, last.q)[0, list(FOOT_INDICES), 2]
    expect = M.trunk_mass * 9.81 / (4 * 3.0e4)
    np.testing.assert_allclose(-feet_z, expect, rtol=tol)
    np.testing.assert_allclose(last.contact_force.sum(), M.trunk_mass * 9.81, rtol=1e-6)


def test_zero_gravity_pd_decay_and_constant_root_velocity():
    cfg = free_cfg()
    s = SimState.at_rest([[0, 0, 1.0]], [[1, 0, 0, 0]], [POSE])
    s.qd[:] = 1.0
    s.lin_vel[:] = [[0.3, -0.2, 0.1]]
    speeds = []
    for h in run(cfg, s, POSE, 50):
        speeds.append(np.abs(h.qd).max())
        np.testing.assert_array_equal(h.lin_vel, [[0.3, -0.2, 0.1]])
    assert speeds[-1] < 1e-6 * speeds[0]


def test_trunk_kinetic_energy_conserved_in_free_rotation():
    cfg = free_cfg()
    s = SimState.at_rest([[0, 0, 1.0]], [[1, 0, 0, 0]], [POSE])
    s.ang_vel[:] = [[2.0, -1.0, 3.0]]
    s.lin_vel[:] = [[0.3, 0.0, 0.1]]

    def ke(x):
        return 0.5 * M.trunk_mass * np.sum(x.lin_vel ** 2) + 0.5 * np.sum(M.trunk_inertia * x.ang_vel ** 2)

    prev = s
    for h in run(cfg, s, POSE, 200):
        assert abs(ke(h) - ke(prev)) < 1e-6
        prev = h
    assert not np.allclose(prev.ang_vel, s.ang_vel)  # the body does tumble


def test_ballistic_flight_semi_implicit_euler():
    cfg = SimEnvConfig(ground=False)
    s = SimState.at_rest([[0, 0, 2.0]], [[1, 0, 0, 0]], [POSE])
    out, _ = physics_step(M, cfg, s, POSE, params(cfg))
    dt, g = cfg.substep_dt, 9.81
    v = -g * dt * np.arange(1, 5)
    np.testing.assert_allclose(out.lin_vel[0, 2], v[-1], atol=1e-14)
    np.testing.assert_allclose(out.pos[0, 2], 2.0 + dt * v.sum(), atol=1e-14)
    assert out.time[0] == pytest.approx(0.02)


def test_frictionless_ground_keeps_horizontal_velocity():
    nominal = asdict(DynamicsParams(friction_coeff=0.0))
    cfg = SimEnvConfig(nominal=nominal, leg_reaction=False)
    s = run(cfg, SimState.at_rest([[0, 0, H]], [[1, 0, 0, 0]], [POSE]), POSE, 50)[-1]
    s.lin_vel[:, 0] = 0.5
    hist = run(cfg, s, POSE, 20)
    assert hist[-1].foot_contact.all()
    np.testing.assert_allclose(hist[-1].lin_vel[0, 0], 0.5, atol=1e-12)
    grip = SimEnvConfig(leg_reaction=False)
    s.lin_vel[:, 0] = 0.5
    assert abs(run(grip, s, POSE, 20)[-1].lin_vel[0, 0]) < 0.05


def test_torques_clipped_and_joint_limits_hold():
    cfg = free_cfg(leg_reaction=False)
    s = SimState.at_rest([[0, 0, 1.0]], [[1, 0, 0, 0]], [POSE])
    for h in run(cfg, s, M.upper + 5.0, 30):
        assert np.all(h.q <= M.upper) and np.all(h.q >= M.lower)
    # one substep from rest: the joint moves by at most dt^2 * torque_limit / inertia
    cfg1 = replace(cfg, substeps=1)
    out, energy = physics_step(M, cfg1, s, M.upper, params(cfg))
    dt = cfg1.substep_dt
    bound = dt * dt * M.torque_limit / M.leg_joint_inertia
    assert np.all(np.abs(out.q - s.q) <= bound + 1e-15)
    assert np.all(energy >= 0)


def test_step_deterministic_and_non_finite_errors():
    cfg = SimEnvConfig()
    clip = standing_clip()
    env = VecEnv(M, cfg.evaluation(), [clip])
    env.reset_all()
    s0 = env.state.copy()
    ref = env._reference(env.frames(1))
    p = env.params
    a = step(M, cfg, s0, POSE[None] + 0.1, p, ref)
    b = step(M, cfg, s0, POSE[None] + 0.1, p, ref)
    assert max_diff(a[0], b[0]) == 0.0
    np.testing.assert_array_equal(a[1].total, b[1].total)
    np.testing.assert_array_equal(a[4].critic, b[4].critic)
    with pytest.raises(SimulationError, match="non-finite action"):
        step(M, cfg, s0, np.full((1, 12), np.nan), p, ref)
    bad = s0.copy()
    bad.lin_vel[0, 0] = np.nan
    with pytest.raises(SimulationError, match="env 0"):
        step(M, cfg, bad, POSE[None], p, ref)


def test_action_clipped_to_limits():
    cfg = free_cfg()
    s = SimState.at_rest([[0, 0, 1.0]], [[1, 0, 0, 0]], [POSE])
    ref = Reference(fk_batch(M, s.pos, s.quat, s.q), s.pos.copy(), np.zeros((1, 4 * REF_FEATURES)), np.zeros((1, 8)))
    a = step(M, cfg, s, M.upper[None] + 3.0, params(cfg), ref)
    b = step(M, cfg, s, M.upper[None], params(cfg), ref)
    assert max_diff(a[0], b[0]) == 0.0


# -- reward -------------------------------------------------------------------

def test_tracking_reward_examples():
    x = np.zeros((2, 3))
    assert tracking_reward(x, x, [1.0, 1.0]) == 1.0
    e = np.array([[np.sqrt(np.log(2)), 0, 0]])
    assert tracking_reward(e, np.zeros((1, 3)), [1.0]) == pytest.approx(0.5, abs=1e-15)
    two = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    assert tracking_reward(two, np.zeros((2, 3)), [0.5, 0.5]) == pytest.approx(0.36787944117144233, abs=1e-15)
    assert tracking_reward(np.full((1, 3), 1e4), np.zeros((1, 3)), [1.0]) > 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, N_KEYPOINTS - 1), st.floats(1e-3, 2.0))
def test_tracking_reward_range_and_strict_decrease(seed, j, grow):
    rng = np.random.default_rng(seed)
    c = SimEnvConfig().keypoint_weights()
    ref = rng.normal(size=(N_KEYPOINTS, 3))
    x = ref + rng.normal(0, 0.1, ref.shape)
    r0 = tracking_reward(x, ref, c)
    assert 0 < r0 <= 1
    y = x.copy()
    y[j] = ref[j] + (x[j] - ref[j]) * (1 + grow) + (1e-3 if np.allclose(x[j], ref[j]) else 0.0)
    assert tracking_reward(y, ref, c) < r0


def test_reward_components_signs_and_total():
    cfg = SimEnvConfig()
    env = VecEnv(M, cfg, [standing_clip(sway=0.2)] * 3, seed=5)
    env.reset_all()
    rng = np.random.default_rng(0)
    w = cfg.reward_weights
    for _ in range(10):
        _, t, _, _ = env.step(rng.normal(0, 0.5, (3, 12)))
        assert np.all((t.r_track > 0) & (t.r_track <= 1))
        assert np.all(t.r_action_rate <= 0) and np.all(t.r_energy <= 0)
        assert np.all(t.r_alive >= 0) and np.all(t.r_termination <= 0)
        total = (w["track"] * t.r_track + w["action_rate"] * t.r_action_rate + w["energy"] * t.r_energy
                 + w["alive"] * t.r_alive + w["termination"] * t.r_termination)
        np.testing.assert_array_equal(t.total, total)


# -- termination --------------------------------------------------------------

def _one(pos=(0, 0, H), quat=(1, 0, 0, 0)):
    s = SimState.at_rest([pos], [quat], [POSE])
    return s, s.keypoints(M)


def test_termination_examples():
    cfg = SimEnvConfig()
    s, kp = _one()
    done, reason = check_termination(cfg, s, kp, kp)
    assert not done[0] and reason[0] == 0
    s, kp = _one(pos=(0, 0, 0.0))
    assert check_termination(cfg, s, kp, kp)[1][0] == 1
    s, kp = _one()
    done, reason = check_termination(cfg, s, kp, kp + [1.0, 0, 0])
    assert done[0] and reason[0] == 3
    tilt = np.radians(61)
    s, kp = _one(quat=(np.cos(tilt / 2), np.sin(tilt / 2), 0, 0))
    assert check_termination(cfg, s, kp, kp)[1][0] == 2
    s, kp = _one()
    s.episode_step[:] = 7
    assert check_termination(cfg, s, kp, kp, horizon=np.array([7]))[1][0] == 4
    assert check_termination(cfg, s, kp, kp, horizon=np.array([8]))[1][0] == 0


def test_termination_priority_fall_first():
    cfg = SimEnvConfig()
    s, kp = _one(pos=(0, 0, 0.0), quat=(0.0, 1.0, 0, 0))
    s.episode_step[:] = 100
    assert check_termination(cfg, s, kp, kp + 5.0, horizon=np.array([1]))[1][0] == 1


def test_timeout_is_not_a_failure():
    cfg = SimEnvConfig(randomize=False, random_start=False, reset_noise=0.0)
    env = VecEnv(M, cfg, [standing_clip(T=4)])
    env.reset_all()
    for k in range(3):
        _, t, done, info = env.step(np.zeros((1, 12)))
    assert done[0] and info["reason"] == ["timeout"] and not info["failed"][0]
    assert t.r_termination[0] == 0 and t.r_alive[0] == 1


# -- randomization ------------------------------------------------------------

def test_randomize_examples():
    nominal = DynamicsParams()
    assert randomize(nominal, {k: [1.0, 1.0] for k in PARAM_NAMES}, np.random.default_rng(0)) == nominal
    ranges = SimEnvConfig().ranges
    a = randomize(nominal, ranges, np.random.default_rng(42))
    b = randomize(nominal, ranges, np.random.default_rng(42))
    assert a == b
    rng = np.random.default_rng(7)
    v = np.array([randomize(nominal, ranges, rng).vector() for _ in range(10000)])
    nom = nominal.vector()
    for j, k in enumerate(PARAM_NAMES):
        lo, hi = ranges[k]
        assert v[:, j].min() >= nom[j] * lo - 1e-12 and v[:, j].max() <= nom[j] * hi + 1e-12
    assert v[:, 0].min() < 0.51 and v[:, 0].max() > 1.24
    with pytest.raises(SimConfigError):
        randomize(nominal, {"friction_coeff": [1.2, 0.5]}, rng)
    with pytest.raises(SimConfigError):
        randomize(nominal, {"viscosity": [1, 1]}, rng)


def test_config_and_param_validation():
    with pytest.raises(SimConfigError):
        DynamicsParams(friction_coeff=-0.1)
    with pytest.raises(SimConfigError):
        DynamicsParams(kp=0.0)
    with pytest.raises(SimConfigError):
        DynamicsParams(contact_stiffness=0.0)
    with pytest.raises(SimConfigError):
        SimEnvConfig(ranges={"mass_scale": [1.2, 0.8]})
    with pytest.raises(SimConfigError):
        SimEnvConfig(reward_weights={"track": 1.0})
    with pytest.raises(SimConfigError):
        SimEnvConfig(nominal={"kp": 40.0, "stiction": 1.0})


# -- reset and observations ---------------------------------------------------

def test_reset_without_noise_matches_frame_zero():
    clip = standing_clip(sway=0.1)
    cfg = SimEnvConfig(reset_noise=0.0, random_start=False)
    s, obs = reset(M, cfg, clip, rng_seed=3)
    np.testing.assert_allclose(s.pos[0], clip.root_pos[0], atol=1e-3)
    np.testing.assert_allclose(s.q[0], clip.q[0], atol=1e-3)
    assert abs(abs(np.dot(s.quat[0], clip.root_quat[0])) - 1) < 1e-3
    assert s.time[0] == 0 and s.episode_step[0] == 0


def test_reset_same_seed_identical():
    cfg = SimEnvConfig()
    a = reset(M, cfg, standing_clip(), rng_seed=11)
    b = reset(M, cfg, standing_clip(), rng_seed=11)
    assert max_diff(a[0], b[0]) == 0.0
    np.testing.assert_array_equal(a[1].critic, b[1].critic)
    c = reset(M, cfg, standing_clip(), rng_seed=12)
    assert max_diff(a[0], c[0]) > 0


def test_reset_empty_motion_rejected():
    empty = MotionClip("e", np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 12)), np.zeros((0, 4)))
    with pytest.raises(SimConfigError):
        reset(M, SimEnvConfig(), empty)


def _slice(cfg, name, obs_row):
    off = 0
    for n, w in cfg.actor_fields():
        if n == name:
            return obs_row[off:off + w]
        off += w
    raise KeyError(name)


def test_reference_window_is_first_frames():
    clip = standing_clip(sway=0.3)
    cfg = SimEnvConfig(reset_noise=0.0, random_start=False, randomize=False)
    _, obs = reset(M, cfg, clip)
    win = _slice(cfg, "ref_window", obs.actor[0]).reshape(cfg.ref_window, REF_FEATURES)
    np.testing.assert_allclose(win[:, :12], clip.q[:cfg.ref_window] - POSE, atol=1e-15)
    np.testing.assert_allclose(win[:, 15], clip.root_pos[:cfg.ref_window, 2], atol=1e-15)


def test_observation_layout():
    cfg = SimEnvConfig()
    env = VecEnv(M, cfg, [standing_clip()] * 2)
    obs = env.reset_all()
    assert obs.actor.shape == (2, cfg.actor_dim) and obs.critic.shape == (2, cfg.critic_dim)
    np.testing.assert_array_equal(obs.critic[:, :cfg.actor_dim], obs.actor)
    np.testing.assert_array_equal(obs.privileged[:, 4:4 + len(PARAM_NAMES)], env.params)


def test_actor_observation_has_no_privileged_provenance(rng):
    cfg = SimEnvConfig()
    actor_names = {n for n, _ in cfg.actor_fields()}
    priv_names = {n for n, _ in cfg.privileged_fields()}
    assert not actor_names & priv_names
    env = VecEnv(M, cfg, [standing_clip()])
    env.reset_all()
    env.step(np.zeros((1, 12)))
    s = env.state
    ref = env._reference(env.frames())
    base = observe(M, cfg, s, env.params, env.prev_target, ref)
    # perturb every privileged source; the actor part must not move
    s2 = s.copy()
    s2.lin_vel += rng.normal(size=3)
    s2.pos[:, 2] += 0.5
    s2.contact_force += 100.0
    p2 = env.params * 1.3
    ref2 = Reference(ref.keypoints, ref.root_pos + 1.0, ref.window, ref.command)
    other = observe(M, cfg, s2, p2, env.prev_target, ref2)
    np.testing.assert_array_equal(base.actor, other.actor)
    assert np.all(np.abs(base.privileged - other.privileged).max(axis=0)[[0, 3, 4, 11, 15]] > 0)


def test_vecenv_thread_count_independent():
    cfg = SimEnvConfig()
    clips = [standing_clip(sway=0.1 * i) for i in range(5)]

    def roll(threads):
        env = VecEnv(M, cfg, clips, seed=9, num_threads=threads)
        env.reset_all()
        rng = np.random.default_rng(1)
        out = []
        for _ in range(30):
            obs, t, done, _ = env.step(rng.normal(0, 0.3, (5, 12)))
            out.append((obs.critic.copy(), t.total.copy(), done.copy()))
        env.close()
        return out

    a, b = roll(1), roll(4)
    for (oa, ta, da), (ob, tb, db) in zip(a, b):
        np.testing.assert_array_equal(oa, ob)
        np.testing.assert_array_equal(ta, tb)
        np.testing.assert_array_equal(da, db)


def test_env_rng_streams_independent_of_batch():
    cfg = SimEnvConfig()
    clips = [standing_clip() for _ in range(3)]
    big = VecEnv(M, cfg, clips, seed=4)
    big.reset_all()
    small = VecEnv(M, cfg, clips[:1], seed=4)
    small.reset_all()
    np.testing.assert_array_equal(big.params[0], small.params[0])
    np.testing.assert_array_equal(big.state.q[0], small.state.q[0])
