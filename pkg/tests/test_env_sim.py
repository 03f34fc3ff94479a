import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affordance_maps import env_sim, maps, training
from affordance_maps.env_sim import AGENT_RADIUS, Circle, EnvironmentSpec


def empty_spec(**kw):
    return EnvironmentSpec(["obstacle"], [], **kw)


def run(spec, start, actions, seed=0):
    state = env_sim.make_state(spec, start, seed=seed)
    out = []
    for a in actions:
        state, obs = env_sim.step(state, spec, a)
        out.append((state, obs))
    return out


# -- dynamics ---------------------------------------------------------------------

def test_zero_throttle_stays_put():
    spec = empty_spec()
    (state, obs), = run(spec, (1.5, 1.0), [np.zeros(4)])
    np.testing.assert_array_equal(state.p, [1.5, 1.0])
    np.testing.assert_array_equal(obs.observed_dp, [0.0, 0.0])


def test_calibrated_terminal_speed():
    expected = env_sim.THRUST * math.sqrt(2) * (1 - env_sim.DRAG_FREE) / env_sim.DRAG_FREE
    assert expected == pytest.approx(0.23, abs=0.01)
    spec = empty_spec(width=40.0)
    state = run(spec, (1.0, 1.0), [[1.0, 0.0, 0.0, 1.0]] * 80)[-1][0]
    assert np.hypot(*state.u) == pytest.approx(expected, abs=1e-6)
    assert state.u[1] == pytest.approx(0.0, abs=1e-12)


def test_throttle_directions_are_diagonal():
    spec = empty_spec()
    for k, d in enumerate(env_sim.DIRECTIONS):
        a = np.zeros(4)
        a[k] = 1.0
        (state, _), = run(spec, (1.5, 1.0), [a])
        assert np.all(np.sign(state.u) == np.sign(d))
        assert abs(state.u[0]) == pytest.approx(abs(state.u[1]))


def test_speed_cap_holds():
    spec = empty_spec(width=40.0)
    state = env_sim.make_state(spec, (1.0, 1.0), velocity=(1.0, 0.0))
    state, _ = env_sim.step(state, spec, [1, 0, 0, 1])
    assert np.hypot(*state.u) <= env_sim.V_MAX + 1e-12


def test_actions_are_clamped():
    spec = empty_spec()
    a = run(spec, (1.5, 1.0), [[5.0, -3.0, 0.0, 0.0]])[0][0]
    b = run(spec, (1.5, 1.0), [[1.0, 0.0, 0.0, 0.0]])[0][0]
    np.testing.assert_array_equal(a.p, b.p)


def test_force_fields_push_vertically():
    up = EnvironmentSpec(["force_up"], [Circle(0, (1.5, 1.0), 0.5)], border_channel=0)
    down = EnvironmentSpec(["force_down"], [Circle(0, (1.5, 1.0), 0.5)], border_channel=0)
    (su, _), = run(up, (1.5, 1.0), [np.zeros(4)])
    (sd, _), = run(down, (1.5, 1.0), [np.zeros(4)])
    assert su.u[1] == pytest.approx(env_sim.FIELD_ACCEL * (1 - env_sim.DRAG_FREE))
    assert sd.u[1] == pytest.approx(-env_sim.FIELD_ACCEL * (1 - env_sim.DRAG_FREE))


def test_fog_changes_only_the_observation():
    fog = EnvironmentSpec(["fog"], [Circle(0, (1.5, 1.0), 0.8)], border_channel=0)
    clear = empty_spec()
    acts = training.exploration_actions(np.random.default_rng(0), 100)
    a = run(fog, (1.5, 1.0), acts, seed=3)
    b = run(clear, (1.5, 1.0), acts, seed=3)
    for (sa, oa), (sb, ob) in zip(a, b):
        np.testing.assert_array_equal(sa.p, sb.p)
        if oa.in_fog:
            assert not np.array_equal(oa.observed_position, sa.p)
        else:
            np.testing.assert_array_equal(oa.observed_position, sa.p)


def test_fog_observation_noise_is_about_root_two():
    fog = EnvironmentSpec(["fog"], [Circle(0, (1.5, 1.0), 0.8)], border_channel=0)
    steps = run(fog, (1.5, 1.0), [np.zeros(4)] * 5000, seed=1)
    dps = np.array([o.observed_dp for _, o in steps[1:]])
    np.testing.assert_allclose(dps.std(axis=0), math.sqrt(2), rtol=0.05)


def test_scaled_fog_interpretation():
    spec = env_sim.with_fog_std(maps.experiment_four(), 0.25)
    assert spec.fog_std == 0.25
    assert maps.experiment_four(fog_std=0.25) == spec


def test_trajectories_are_deterministic():
    spec = maps.experiment_two()["twelve"]
    acts = training.exploration_actions(np.random.default_rng(1), 300)
    a = run(spec, (0.2, 0.2), acts, seed=5)
    b = run(spec, (0.2, 0.2), acts, seed=5)
    assert all(np.array_equal(x.p, y.p) and np.array_equal(x.u, y.u) for (x, _), (y, _) in zip(a, b))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["exp1", "exp2-two", "exp2-twelve"]))
def test_containment_and_impenetrability(seed, name):
    spec = maps.builtin(name)
    rng = np.random.default_rng(seed)
    state = env_sim.make_state(spec, env_sim.sample_free_position(spec, rng))
    for a in training.exploration_actions(rng, 400):
        state, _ = env_sim.step(state, spec, a)
        assert AGENT_RADIUS - 1e-9 <= state.p[0] <= spec.width - AGENT_RADIUS + 1e-9
        assert AGENT_RADIUS - 1e-9 <= state.p[1] <= spec.height - AGENT_RADIUS + 1e-9
        centers, radii = spec.circles("obstacle")
        assert np.all(np.hypot(*(state.p - centers).T) >= radii + AGENT_RADIUS - 1e-9)
        assert np.hypot(*state.u) <= env_sim.V_MAX + 1e-12


def test_wall_contact_removes_normal_velocity():
    spec = empty_spec()
    state = env_sim.make_state(spec, (2.9, 1.0), velocity=(0.2, 0.1))
    state, obs = env_sim.step(state, spec, np.zeros(4))
    assert state.p[0] == pytest.approx(spec.width - AGENT_RADIUS)
    assert state.u[0] <= 1e-12
    assert state.u[1] > 0
    assert "border" in obs.touching


def test_clearance_sign():
    spec = maps.experiment_one()
    c = spec.shapes[0]
    assert env_sim.clearance(spec, np.array(c.center)) < 0
    assert env_sim.clearance(spec, np.array([0.2, 0.2])) > 0


# -- local views ------------------------------------------------------------------

def test_view_at_empty_centre_is_zero():
    view = env_sim.local_view(empty_spec(), np.array([1.5, 1.0]))
    assert view.shape == (1, 11, 11)
    assert not view.any()


def test_view_matches_circle_equation():
    spec = EnvironmentSpec(["obstacle", "border"], [Circle(0, (1.5, 1.0), 0.3)], border_channel=1)
    p = np.array([1.4, 1.0])
    view = env_sim.local_view(spec, p)
    row, col = spec.cell_index(p)
    res = spec.resolution
    off = np.arange(-5, 6)
    xs = (col + off + 0.5) / res
    ys = (row + off + 0.5) / res
    gx, gy = np.meshgrid(xs, ys)
    expected = ((gx - 1.5) ** 2 + (gy - 1.0) ** 2 < 0.09).astype(float)
    np.testing.assert_array_equal(view[0], expected)
    assert expected.sum() > 0 and not view[1].any()


def test_view_outside_arena_reports_border():
    spec = EnvironmentSpec(["obstacle", "border"], [], border_channel=1)
    view = env_sim.local_view(spec, np.array([0.02, 1.0]))
    assert view[1][:, :4].all() and not view[1][:, 6:].any()
    far = env_sim.local_view(spec, np.array([-5.0, -5.0]))
    assert far[1].all()


def test_pixel_pitch_covers_one_step():
    pitch = 1.0 / env_sim.RESOLUTION
    assert pitch == pytest.approx(0.5 / 11, rel=0.01)
    half_width = (2 * env_sim.VIEW_HALF + 1) * pitch / 2
    assert half_width == pytest.approx(0.25)
    assert env_sim.V_MAX < half_width


def test_view_translation_consistency():
    spec = maps.experiment_one()
    a = env_sim.local_view(spec, np.array([1.0, 1.0]))
    b = env_sim.local_view(spec, np.array([1.0 + 1 / 22, 1.0]))
    np.testing.assert_array_equal(a[:, :, 1:], b[:, :, :-1])


def test_raster_size_and_rule():
    spec = maps.experiment_one()
    assert (spec.rows, spec.cols) == (44, 66)
    centers = spec.cell_centers()
    c = spec.shapes[0]
    inside = ((centers - np.array(c.center)) ** 2).sum(-1) < c.radius ** 2
    assert spec.raster[0][inside].all()


def test_spec_json_round_trip(tmp_path):
    spec = maps.experiment_three()
    spec.save(tmp_path / "s.json")
    assert EnvironmentSpec.load(tmp_path / "s.json") == spec


def test_spec_rejects_shape_outside_arena():
    with pytest.raises(ValueError):
        EnvironmentSpec(["obstacle"], [Circle(0, (0.1, 1.0), 0.3)])


# -- corners and generation ---------------------------------------------------------

def test_corner_zero_geometry():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s, t = env_sim.sample_start_target(rng, 0)
        assert np.all((0.1 <= s) & (s <= 0.3))
        assert 2.7 <= t[0] <= 2.9 and 1.7 <= t[1] <= 1.9


def test_corner_samples_are_uniform():
    rng = np.random.default_rng(1)
    xs = np.array([env_sim.sample_start_target(rng, 2)[0][0] for _ in range(10_000)])
    u = np.sort((xs - 2.7) / 0.2)
    n = len(u)
    d = max(np.max(np.arange(1, n + 1) / n - u), np.max(u - np.arange(n) / n))
    assert d < 1.628 / math.sqrt(n)  # KS critical value at alpha = 0.01


def test_distinct_seeds_distinct_samples():
    a = env_sim.sample_start_target(1, 0)
    b = env_sim.sample_start_target(2, 0)
    assert not np.array_equal(a[0], b[0])
    with pytest.raises(ValueError):
        env_sim.sample_start_target(0, 4)


def test_generation_is_deterministic():
    assert env_sim.generate_environment(7, "hard") == env_sim.generate_environment(7, "hard")


def _gaps(spec):
    out = []
    s = spec.shapes
    for i in range(len(s)):
        for j in range(i + 1, len(s)):
            out.append((s[i], s[j], math.dist(s[i].center, s[j].center) - s[i].radius - s[j].radius))
    return out


def test_generated_easy_maps_keep_clearance_and_free_corners():
    for seed in range(100):
        spec = env_sim.generate_environment(seed, "easy")
        assert 6 <= len(spec.shapes) <= 10
        for shape in spec.shapes:
            assert 0.1 <= shape.radius <= 0.5
            x, y = shape.center
            r = shape.radius
            assert min(x - r, y - r, spec.width - x - r, spec.height - y - r) >= 0.15 - 1e-12
            for cx, cy in ((0.0, 0.0), (2.6, 0.0), (0.0, 1.6), (2.6, 1.6)):
                qx, qy = min(max(x, cx), cx + 0.4), min(max(y, cy), cy + 0.4)
                assert math.hypot(x - qx, y - qy) >= r
        assert all(g >= 0.15 - 1e-12 for _, _, g in _gaps(spec))


def test_generated_hard_maps_only_relax_force_fields():
    for seed in range(50):
        spec = env_sim.generate_environment(seed, "hard")
        for a, b, gap in _gaps(spec):
            if gap < 0.15:
                assert "force" in spec.channels[a.channel] or "force" in spec.channels[b.channel]
