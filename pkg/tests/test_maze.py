import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csac.env import (EVALUATION, EXPLORATION, AgentState, EnvConfig, MazeEnv,
                      compute_rewards, wrap_angle)
from csac.maze import (CLEARANCE, MazeSpec, Rect, author_layout, builtin_maze, raycast,
                       validate_maze)


def square_room(size=10.0):
    walls = [[0, 0, size, 0], [size, 0, size, size], [size, size, 0, size], [0, size, 0, 0]]
    return MazeSpec([Rect(0, 0, size, size)], np.array(walls, float), [], [],
                    Rect(1, 1, 2, 2), Rect(size - 1, size - 1, size, size))


def brute_force_ray(walls, ox, oy, angle, max_range):
    """Exhaustive parametric intersection, one segment at a time."""
    dx, dy = math.cos(angle), math.sin(angle)
    best = max_range
    for x0, y0, x1, y1 in walls:
        ex, ey = x1 - x0, y1 - y0
        den = dx * ey - dy * ex
        if abs(den) < 1e-15:
            continue
        t = ((x0 - ox) * ey - (y0 - oy) * ex) / den
        u = ((x0 - ox) * dy - (y0 - oy) * dx) / den
        if t >= 0 and 0 <= u <= 1:
            best = min(best, t)
    return best


def test_raycast_perpendicular_and_diagonal():
    spec = square_room()
    assert raycast(spec, (5, 5), 0.0) == pytest.approx(5.0)
    assert raycast(spec, (5, 5), math.pi / 2) == pytest.approx(5.0)
    assert raycast(spec, (5, 5), math.pi / 4) == pytest.approx(5 * math.sqrt(2))


def test_raycast_capped_at_max_range():
    assert raycast(square_room(30.0), (15, 15), 0.0, max_range=10.0) == 10.0


def test_raycast_rejects_origin_on_wall():
    with pytest.raises(ValueError):
        raycast(square_room(), (0.0, 5.0), 0.0)


def test_raycast_through_door_matches_brute_force():
    spec = builtin_maze(2)
    safe = next(d for d in spec.doors if not d.dead_end)
    mx, my = safe.midpoint
    origin = (mx - 2.0, my)
    dist = raycast(spec, origin, 0.0, max_range=50.0)
    assert dist > 2.0  # passes the door gap into room 2
    assert dist == pytest.approx(brute_force_ray(spec.walls, *origin, 0.0, 50.0), abs=1e-12)
    rng = np.random.default_rng(0)
    env = MazeEnv(spec, rng=rng)
    for _ in range(200):
        env.reset(EXPLORATION)
        angle = rng.uniform(-math.pi, math.pi)
        got = raycast(spec, (env.state.x, env.state.y), angle, 10.0)
        assert got == pytest.approx(brute_force_ray(spec.walls, env.state.x, env.state.y,
                                                    angle, 10.0), abs=1e-12)


def test_straight_line_and_rotation():
    env = MazeEnv(square_room(), EnvConfig(dt=0.1))
    env.set_state(AgentState(5.0, 5.0, 0.0, 1))
    env.step(1.0, 0.0)
    assert (env.state.x, env.state.y, env.state.heading) == pytest.approx((5.1, 5.0, 0.0))
    env = MazeEnv(square_room(), EnvConfig(dt=1.0))
    env.set_state(AgentState(5.0, 5.0, 0.5, 1))
    env.step(0.0, math.pi)
    assert (env.state.x, env.state.y) == (5.0, 5.0)
    assert env.state.heading == pytest.approx(wrap_angle(0.5 + math.pi))


def swept_contact(x, y, nx, ny, walls):
    """Independent swept-segment oracle: first contact parameter along the motion."""
    best = math.inf
    for x0, y0, x1, y1 in walls:
        # solve p + s*(q - p) = w0 + u*(w1 - w0) with Cramer's rule
        a11, a12 = nx - x, -(x1 - x0)
        a21, a22 = ny - y, -(y1 - y0)
        det = a11 * a22 - a12 * a21
        if det == 0:
            continue
        bx, by = x0 - x, y0 - y
        s = (bx * a22 - a12 * by) / det
        u = (a11 * by - bx * a21) / det
        if 0 <= s <= 1 and 0 <= u <= 1:
            best = min(best, s)
    return best


def test_collision_stops_short_of_wall():
    env = MazeEnv(square_room(), EnvConfig(dt=0.1))
    env.set_state(AgentState(9.95, 5.0, 0.0, 1))
    res = env.step(1.0, 0.0)
    assert res.collided
    s = swept_contact(9.95, 5.0, 10.05, 5.0, env.spec.walls)
    length = 0.1
    expected_x = 9.95 + (10.05 - 9.95) * (s - CLEARANCE / length)
    assert env.state.x == pytest.approx(expected_x, abs=1e-12)
    assert 10.0 - env.state.x == pytest.approx(CLEARANCE, abs=1e-12)


def test_step_rejects_bad_actions():
    env = MazeEnv(square_room())
    env.reset()
    with pytest.raises(ValueError):
        env.step(math.nan, 0.0)
    with pytest.raises(ValueError):
        env.step(2.0, 0.0)


def _state(spec, x, y):
    return AgentState(x, y, 0.0, spec.room_of(x, y))


def test_rewards_inside_room_and_on_exit():
    spec = builtin_maze(3)
    r, exits = compute_rewards(_state(spec, 2, 4), _state(spec, 2.1, 4), spec)
    np.testing.assert_allclose(r, [-0.01, 0, 0])
    assert not exits.any()
    r, exits = compute_rewards(_state(spec, 5.95, 7), _state(spec, 6.05, 7), spec)
    np.testing.assert_allclose(r, [10.0, 0, 0])
    assert exits.tolist() == [True, False, False]


def test_backward_crossing_revokes_bonus():
    spec = builtin_maze(2)
    r, _ = compute_rewards(_state(spec, 6.05, 7), _state(spec, 5.95, 7), spec)
    np.testing.assert_allclose(r, [-10.0, -0.01])


def drive_to(env, tx, ty, trace, limit=400):
    """Simple proportional controller toward a waypoint; records prev/new states."""
    for _ in range(limit):
        s = env.state
        if math.hypot(tx - s.x, ty - s.y) < 0.1:
            return None
        bearing = math.atan2(ty - s.y, tx - s.x)
        err = wrap_angle(bearing - s.heading)
        omega = float(np.clip(4 * err, -math.pi, math.pi))
        v = 1.0 if abs(err) < 0.3 else 0.0
        prev = AgentState(s.x, s.y, s.heading, s.subtask)
        res = env.step(v, omega)
        trace.append((prev, env.state, res))
        if res.done:
            return res
    return None


def replay_returns(trace, spec, bonus=10.0, living=0.01):
    """Event-scanning oracle over a trajectory of (prev, new) positions."""
    n = spec.room_count
    out = np.zeros(n)
    for prev, new, _ in trace:
        p = spec.room_of(prev.x, prev.y)
        q = spec.room_of(new.x, new.y)
        into_goal = spec.in_goal(new.x, new.y) and not spec.in_goal(prev.x, prev.y)
        if q == p + 1 or (p == n and into_goal):
            out[p - 1] += bonus
        else:
            out[p - 1] -= living
            if q == p - 1:
                out[q - 1] -= bonus
    return out


def test_successful_episode_returns_match_replay_oracle():
    spec = builtin_maze(2)
    env = MazeEnv(spec, EnvConfig(max_episode_steps=5000))
    env.set_state(AgentState(1.5, 3.0, 0.0, 1))
    trace = []
    safe = next(d for d in spec.doors if not d.dead_end).midpoint
    dead = next(d for d in spec.doors if d.dead_end).midpoint
    # detour through the dead-end pocket and back, then the safe route to the goal
    for wp in [(dead[0] - 0.5, dead[1]), (dead[0] + 0.8, dead[1]), (dead[0] - 0.8, dead[1]),
               (safe[0] - 0.6, safe[1]), (safe[0] + 0.6, safe[1]), spec.goal_area.center]:
        res = drive_to(env, *wp, trace)
    assert res is not None and res.goal_reached
    total = np.sum([t[2].rewards for t in trace], axis=0)
    np.testing.assert_allclose(total, replay_returns(trace, spec), atol=1e-9)
    # every subtask nets one bonus: 10 - 0.01 * (non-exit steps it was active)
    for j in (1, 2):
        active = sum(1 for prev, _, r in trace
                     if spec.room_of(prev.x, prev.y) == j and not r.exits[j - 1])
        assert total[j - 1] == pytest.approx(10.0 - 0.01 * active)


def test_reset_modes():
    spec = builtin_maze(3)
    env = MazeEnv(spec, rng=np.random.default_rng(3))
    for _ in range(50):
        obs, n = env.reset(EVALUATION)
        assert spec.start_area.contains(env.state.x, env.state.y) and n == 1
    counts = np.zeros(4, int)
    for _ in range(10_000):
        _, n = env.reset(EXPLORATION)
        assert n == spec.room_of(env.state.x, env.state.y)
        counts[n] += 1
    assert counts[0] == 0 and (counts[1:] > 0).all()


def test_exploration_spawn_in_room_three_is_subtask_three():
    spec = builtin_maze(3)
    env = MazeEnv(spec, rng=np.random.default_rng(9))
    for _ in range(200):
        _, n = env.reset(EXPLORATION)
        if spec.rooms[2].contains(env.state.x, env.state.y) and env.state.x > spec.rooms[2].x0:
            assert n == 3
            return
    pytest.fail("no spawn in room 3")


def test_observation_shape_and_range():
    spec = builtin_maze(2)
    env = MazeEnv(spec, rng=np.random.default_rng(0))
    obs, _ = env.reset(EXPLORATION)
    assert obs.laser.shape == (16,) and (obs.laser > 0).all() and (obs.laser <= 10).all()
    vec = env.encode(obs)
    assert vec.shape == (env.observation_size,)


@pytest.mark.parametrize("rooms", [2, 3, 4])
def test_builtin_layouts(rooms):
    spec = builtin_maze(rooms)
    report = validate_maze(spec)
    assert report.ok, report.problems
    assert report.transitions == rooms - 1 and report.dead_end_pockets == rooms - 1
    for j in range(1, rooms):
        doors = spec.doors_for(j)
        assert len(doors) == 2 and sum(d.dead_end for d in doors) == 1
        centre = spec.rooms[j - 1].center
        dead = next(d for d in doors if d.dead_end)
        safe = next(d for d in doors if not d.dead_end)
        assert math.dist(centre, dead.midpoint) < math.dist(centre, safe.midpoint)


def test_builtin_files_match_authoring_code():
    for rooms in (2, 3, 4):
        assert builtin_maze(rooms).to_dict() == author_layout(rooms).to_dict()


def test_unsupported_room_count():
    with pytest.raises(ValueError):
        builtin_maze(5)


def test_layout_file_round_trip(tmp_path):
    spec = builtin_maze(3).scaled(0.5)
    spec.save(tmp_path / "m.json")
    assert MazeSpec.load(tmp_path / "m.json").to_dict() == spec.to_dict()


def test_validation_flags_missing_pocket():
    data = builtin_maze(2).to_dict()
    data["pockets"] = []
    report = validate_maze(MazeSpec.from_dict(data))
    assert not report.ok


def test_pocket_belongs_to_next_room():
    spec = builtin_maze(3)
    for pocket in spec.pockets:
        cx, cy = np.mean(pocket.polygon, axis=0)
        assert spec.room_of(cx, cy) == pocket.transition + 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_containment_under_random_actions(seed):
    spec = builtin_maze(2).scaled(0.5)
    rng = np.random.default_rng(seed)
    env = MazeEnv(spec, EnvConfig(max_episode_steps=10_000), rng)
    env.reset(EXPLORATION)
    for _ in range(300):
        prev = env.state
        res = env.step(rng.uniform(-1, 1), rng.uniform(-math.pi, math.pi))
        s = env.state
        assert spec.in_free_space(s.x, s.y)
        assert s.subtask == spec.room_of(s.x, s.y)
        assert abs(s.subtask - prev.subtask) <= 1
        assert res.rewards.shape == (2,)


def test_same_seed_same_trajectory():
    spec = builtin_maze(2)

    def run():
        env = MazeEnv(spec, rng=np.random.default_rng(5))
        env.reset(EXPLORATION)
        acts = np.random.default_rng(6)
        out = []
        for _ in range(200):
            env.step(acts.uniform(-1, 1), acts.uniform(-3, 3))
            out.append((env.state.x, env.state.y, env.state.heading))
        return np.array(out)
    assert run().tobytes() == run().tobytes()


def test_episode_ends_at_step_limit():
    env = MazeEnv(square_room(), EnvConfig(max_episode_steps=5))
    env.set_state(AgentState(5, 5, 0, 1))
    results = [env.step(0.0, 0.0) for _ in range(5)]
    assert [r.done for r in results] == [False] * 4 + [True]
    assert not results[-1].goal_reached
