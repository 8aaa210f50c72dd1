import numpy as np
import pytest

from endosplat.config import Config
from endosplat.deformation import ControlPointSet, field_weights
from endosplat.energy import anchor_neighbors
from endosplat.errors import FrameUnusableError
from endosplat.evaluation import generate
from endosplat.pipeline import (
    OnlineTracker,
    SceneState,
    TrackSet,
    extend_canonical,
    fit_frame,
    init_offsets_from_flow,
    initialize,
    flow_targets,
    resample_control_points,
    smoothness_laplacian,
    solve_offsets_least_squares,
)
from endosplat.render import render
from endosplat.scene import Camera, Frame, GaussianSet, project_point

from oracles import gradient_descent_least_squares, laplacian_by_edges

FAST = Config(stride=4, first_iterations=30, iterations=5)


def flat_frame(size=8, index=0, mask=None, rng=None):
    rng = rng or np.random.default_rng(0)
    cam = Camera(size, size, (size - 1) / 2, (size - 1) / 2, size, size)
    return Frame(rng.uniform(0.2, 0.8, (size, size, 3)), np.ones((size, size)), cam, mask=mask, index=index)


@pytest.fixture(scope="module")
def static_frames():
    return generate("static", frames=3).frames


@pytest.fixture(scope="module")
def static_state(static_frames):
    return initialize(static_frames[0], FAST)


def test_stride_one_gives_one_gaussian_per_pixel():
    s = initialize(flat_frame(8), Config(stride=1, first_iterations=0))
    assert len(s.scene) == 64
    assert np.allclose(s.scene.scales, 1 / 8) and np.all(s.scene.opacities == 0.9)


def test_initialize_rejects_fully_masked_frame():
    with pytest.raises(FrameUnusableError):
        initialize(flat_frame(8, mask=np.ones((8, 8), bool)), FAST)


def test_first_frame_fit_reaches_low_image_error(static_frames):
    s = initialize(static_frames[0], Config(stride=2, first_iterations=300))
    assert s.history[0].e_img < 1e-3


def test_control_point_counts_and_determinism():
    scene = GaussianSet(np.random.default_rng(0).normal(size=(128, 3)), np.ones((128, 3)), np.tile([1.0, 0, 0, 0], (128, 1)), np.zeros((128, 3)), np.ones(128))

    def state(seed, n=128):
        return SceneState(scene.subset(np.arange(n)), None, None, 0, None, np.random.default_rng(seed), 1.0)

    assert len(resample_control_points(state(0), Config())) == 2
    assert len(resample_control_points(state(0, 10), Config())) == 1
    a = resample_control_points(state(5), Config(k_frac=8))
    b = resample_control_points(state(5), Config(k_frac=8))
    assert np.array_equal(a.anchors, b.anchors) and len(np.unique(a.anchors)) == 16
    assert np.array_equal(a.positions, scene.positions[a.anchors])


def random_ls_instance(r, K, M):
    cps = ControlPointSet.at(r.uniform(-1, 1, (K, 3)), 1.5)
    x = cps.positions[r.integers(0, K, M)] + r.normal(0, 0.4, (M, 3))
    A, _ = field_weights(x, cps)
    return A, r.normal(size=(M, 3))


def test_least_squares_zero_and_uniform_targets(rng):
    for K in (1, 2, 5, 17):
        A, _ = random_ls_instance(rng, K, 40)
        assert np.all(solve_offsets_least_squares(A, np.zeros((40, 3))) == 0)
        t = rng.normal(size=3)
        d = solve_offsets_least_squares(A, np.tile(t, (40, 1)))
        assert np.abs(d - t).max() < 1e-10


def test_least_squares_matches_gradient_descent(rng):
    A, v = random_ls_instance(rng, 3, 50)
    d = solve_offsets_least_squares(A, v, 1e-8)
    ref = gradient_descent_least_squares(A, v, 1e-8, steps=5000)
    assert np.abs(d - ref).max() < 1e-5


def test_laplacian_matches_edge_assembly(rng):
    p = rng.normal(size=(7, 3))
    nb = anchor_neighbors(p, 3)
    L = smoothness_laplacian(p, nb, 0.7)
    assert np.allclose(L, laplacian_by_edges(p, nb, 0.7), atol=1e-15)
    assert np.allclose(L, L.T) and np.allclose(L.sum(axis=1), 0)


def test_regularized_least_squares_matches_gradient_descent(rng):
    A, v = random_ls_instance(rng, 5, 80)
    p = rng.uniform(-1, 1, (5, 3))
    L = smoothness_laplacian(p, anchor_neighbors(p, 4), 1.5)
    d = solve_offsets_least_squares(A, v, 1e-6, laplacian=L, smoothing=0.1)
    ref = gradient_descent_least_squares(A, v, 1e-6, steps=20000, laplacian=L, smoothing=0.1)
    assert np.abs(d - ref).max() < 1e-6
    t = rng.normal(size=3)
    assert np.abs(solve_offsets_least_squares(A, np.tile(t, (80, 1)), 1e-6, L, 0.1) - t).max() < 1e-10


def test_unreached_control_point_follows_its_neighbors():
    # a chain of control points; samples only reach the two ends, which move
    # by +1 and +3 along x; the middle ones interpolate between them
    cps = ControlPointSet.at(np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)], 8.0)
    x = np.array([[0.0, 0, 0], [4.0, 0, 0]])
    A, _ = field_weights(x, cps)
    v = np.array([[1.0, 0, 0], [3.0, 0, 0]])
    L = smoothness_laplacian(cps.positions, anchor_neighbors(cps.positions, 2), cps.gamma)
    scale = np.sum(A * A) / 5
    d = solve_offsets_least_squares(A, v, 1e-6 * scale, L, 1e-2 * scale)
    dx = d[:, 0]
    assert np.all(np.diff(dx) > 0.3) and abs(dx[2] - 2) < 1e-6
    assert abs(dx[0] - 1) < 1e-3 and abs(dx[4] - 3) < 1e-3
    assert np.allclose(d[:, 1:], 0)


def test_flow_samples_avoid_masked_bilinear_taps():
    size = 8
    cam = Camera(size, size, 3.5, 3.5, size, size)
    mask = np.zeros((size, size), bool)
    mask[:, 4:] = True
    depth = np.where(mask, 0.5, 1.0)
    prev = Frame(np.full((size, size, 3), 0.5), np.ones((size, size)), cam, index=0)
    flow = np.zeros((size, size, 2))
    flow[..., 0] = 0.5  # every target lands half a pixel to the right
    frame = Frame(np.full((size, size, 3), 0.5), depth, cam, mask=mask, flow=flow, index=1)
    state = SceneState(None, None, None, 0, None, np.random.default_rng(0), 1.0, last_frame=prev)
    x, v = flow_targets(state, frame, Config())
    # targets at col 3.5 would blend in the masked column 4
    assert len(x) == size * 3
    assert np.allclose(v[:, 2], 0) and np.allclose(v[:, 0], 0.5 / size)


def test_zero_flow_gives_zero_offsets(static_frames, static_state):
    f = static_frames[1]
    f0 = Frame(f.rgb, f.depth, f.camera, flow=np.zeros((64, 64, 2)), index=1)
    cps = init_offsets_from_flow(static_state, f0, FAST)
    assert np.all(cps.offsets == 0)


def test_no_flow_leaves_offsets_zero(static_frames, static_state):
    cps = init_offsets_from_flow(static_state, static_frames[1], FAST)
    assert np.all(cps.offsets == 0)


def test_extension_skips_covered_and_masked_pixels(static_state, static_frames):
    f = static_frames[1]
    covered = render(static_state.scene, f.camera).opacity >= FAST.opacity_threshold
    _, _, added = extend_canonical(static_state, f, FAST)
    assert not covered[added[:, 0], added[:, 1]].any()
    mask = np.ones((64, 64), bool)
    masked = Frame(f.rgb, f.depth, f.camera, mask=mask, index=1)
    scene, _, added = extend_canonical(static_state, masked, FAST)
    assert len(added) == 0 and len(scene) == len(static_state.scene)


def test_fully_covered_frame_adds_nothing(static_frames):
    s = initialize(static_frames[0], Config(stride=1, first_iterations=0, initial_opacity=1.0))
    s.scene.scales[:] = 0.05
    _, _, added = extend_canonical(s, static_frames[1])
    assert len(added) == 0


def test_identical_frame_keeps_offsets_near_zero(static_frames):
    cfg = Config(stride=2, first_iterations=200, iterations=100)
    s = initialize(static_frames[0], cfg)
    s1 = fit_frame(s, static_frames[1], cfg)
    assert np.abs(s1.fitted_cps.offsets).max() < 1e-3
    assert len(s1.scene) >= len(s.scene)


def test_static_scene_energy_stays_near_first_frame():
    frames = generate("static", frames=5).frames
    cfg = Config(stride=2)
    s = initialize(frames[0], cfg)
    for f in frames[1:]:
        s = fit_frame(s, f, cfg)
    first = s.history[0].total
    assert all(h.total < 1.5 * first for h in s.history[1:]), [h.total / first for h in s.history]


def test_gaussian_moments_persist_and_control_moments_reset(static_state, static_frames):
    s1 = fit_frame(static_state, static_frames[1], FAST)
    steps = s1.adam.row_steps
    assert steps["positions"].shape == (len(s1.scene),)
    assert steps["positions"].max() == FAST.first_iterations + FAST.iterations
    assert steps["offsets"].max() == FAST.iterations
    s2 = fit_frame(s1, static_frames[2], FAST)
    assert s2.adam.row_steps["positions"].max() == FAST.first_iterations + 2 * FAST.iterations
    assert s2.adam.row_steps["offsets"].max() == FAST.iterations


def test_failed_frame_leaves_state_unchanged(static_state, static_frames):
    f = static_frames[1]
    bad = Frame(f.rgb, f.depth, f.camera, mask=np.ones((64, 64), bool), index=1)
    before = static_state.scene.positions.copy()
    with pytest.raises(FrameUnusableError, match="frame 1"):
        fit_frame(static_state, bad, FAST)
    assert np.array_equal(static_state.scene.positions, before) and static_state.t == 0


def test_update_counts_grow(static_state, static_frames):
    s1 = fit_frame(static_state, static_frames[1], FAST)
    assert s1.scene.update_counts.max() == static_state.scene.update_counts.max() + 1


def test_tracks_bind_visibility_and_dead_queries(static_state, static_frames):
    f = static_frames[0]
    g = 17
    u = project_point(static_state.scene.positions[g], f.camera)[0]
    depth = f.depth.copy()
    depth[5, 5] = np.nan
    f_holes = Frame(f.rgb, depth, f.camera, index=0)
    tracks = TrackSet([0, 0], [u, np.array([5.0, 5.0])])
    tracks.bind(static_state, f_holes)
    # u is not a pixel center, so bind through the exact 3D point instead
    tracks3 = TrackSet([0], [static_state.scene.positions[g]])
    tracks3.update(static_state, f)
    assert tracks3.gaussian[0] == g
    assert tracks.gaussian[1] == TrackSet.DEAD
    tracks.record(static_state, f_holes)
    assert np.isnan(tracks.rows[1][0][1]) and tracks.rows[1][0][6] is False

    moved = static_state.copy()
    moved.scene.positions[g] += [5.0, 0, 0]  # far outside the frustum
    tracks3.record(moved, f)
    frame, uu, vv, x, y, z, vis = tracks3.rows[0][-1]
    assert not vis and np.isfinite(x)


def test_query_at_projected_center_binds_that_gaussian(static_state, static_frames):
    f = static_frames[0]
    cam = f.camera
    # place a Gaussian exactly on the surface point of pixel (10, 20)
    state = static_state.copy()
    target = np.array([20.0, 10.0])
    x = cam.to_world(np.array([(20 - cam.cx) / cam.fx, (10 - cam.cy) / cam.fy, 1.0]) * f.depth[10, 20])
    state.scene.positions[3] = x
    tracks = TrackSet([0], [target])
    tracks.bind(state, f)
    assert tracks.gaussian[0] == 3


def test_online_tracker_emits_one_row_per_frame(static_frames):
    tracks = TrackSet([0, 1], [np.array([10.0, 10.0]), np.array([30.0, 40.0])])
    tracker = OnlineTracker(FAST, tracks)
    sizes = []
    for f in static_frames:
        sizes.append(len(tracker.process(f).scene))
    assert [len(r) for r in tracks.rows] == [3, 2]
    assert sizes == sorted(sizes)
    assert tracks.trajectories_2d().shape == (2, 3, 2)
    assert np.isnan(tracks.trajectories_2d()[1, 0]).all()
