import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crtbev.geometry import Grid2D, GridSpec, GtObject, bev_footprint, cell_box_overlap_ratio
from crtbev.mfe import (HeadSample, HeadWeights, IllConditionedFit, LossWeights, fit_heads,
                        fit_occupancy_head, fit_velocity_head, focal_hess_logits, focal_loss,
                        focal_loss_and_grad, head_logits, load_heads, make_targets, mfe_loss,
                        normal_equations, occupancy_head, occupancy_loss_and_grad, save_heads,
                        solve_ridge, velocity_head)

SPEC = GridSpec(16, 16, 1.0, (-8.0, -8.0))


def conv_oracle(data, w: HeadWeights):
    """Nested-loop zero-padded 3x3 conv followed by a 1x1 conv."""
    c, nx, ny = data.shape
    hid = w.conv3_w.shape[0]
    out = np.zeros((w.out_channels, nx, ny))
    for x in range(nx):
        for y in range(ny):
            h = w.conv3_b.copy()
            for k in range(hid):
                for ci in range(c):
                    for dx in range(3):
                        for dy in range(3):
                            i, j = x + dx - 1, y + dy - 1
                            if 0 <= i < nx and 0 <= j < ny:
                                h[k] += w.conv3_w[k, ci, dx, dy] * data[ci, i, j]
            out[:, x, y] = w.conv1_w @ h + w.conv1_b
    return out


# ---------------------------------------------------------------- heads

def test_velocity_head_zero_weights():
    bev = Grid2D(SPEC, np.random.default_rng(0).normal(size=(8, 16, 16)))
    assert not velocity_head(bev, HeadWeights.zeros(8, 2)).data.any()


def test_velocity_head_delta_kernel():
    bev = Grid2D(SPEC, np.random.default_rng(1).normal(size=(8, 16, 16)))
    k = np.zeros((8, 8, 3, 3))
    for c in range(8):
        k[c, c, 1, 1] = 1.0
    pick = np.zeros((2, 8))
    pick[0, 3], pick[1, 6] = 1.0, 1.0
    w = HeadWeights(k, np.zeros(8), pick, np.zeros(2))
    assert np.array_equal(velocity_head(bev, w).data, bev.data[[3, 6]])


def test_velocity_head_matches_loop_oracle():
    bev = Grid2D(SPEC, np.random.default_rng(2).normal(size=(8, 16, 16)))
    w = HeadWeights.init(3, 8, 2, hidden=4)
    assert np.allclose(velocity_head(bev, w).data, conv_oracle(bev.data, w), atol=1e-12)


def test_occupancy_head_examples():
    bev = Grid2D(SPEC, np.random.default_rng(3).normal(size=(4, 16, 16)))
    assert np.all(occupancy_head(bev, HeadWeights.zeros(4, 1)).data == 0.5)
    w = HeadWeights.from_effective(np.zeros((1, 36)), np.array([40.0]), 4)
    assert np.all(occupancy_head(bev, w).data > 1 - 1e-12)
    w = HeadWeights.init(4, 4, 1)
    ref = 1 / (1 + np.exp(-conv_oracle(bev.data, w)))
    assert np.allclose(occupancy_head(bev, w).data, ref, atol=1e-12)


def test_head_channel_mismatch():
    with pytest.raises(ValueError):
        velocity_head(Grid2D.zeros(SPEC, 3), HeadWeights.zeros(4, 2))


@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_head_logits_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    spec = GridSpec(6, 5, 1.0)
    b1, b2 = rng.normal(size=(2, 3, 6, 5))
    w = HeadWeights.init(seed % 101, 3, 2)
    _, bias = w.effective()
    lin = lambda d: head_logits(Grid2D(spec, d), w) - bias[:, None, None]  # noqa: E731
    assert np.allclose(lin(a * b1 + b * b2), a * lin(b1) + b * lin(b2), atol=1e-9)


def test_heads_bundle_round_trip(tmp_path):
    heads = {"velocity": HeadWeights.init(1, 4, 2), "occupancy": HeadWeights.init(2, 4, 1)}
    save_heads(tmp_path / "h.bin", heads)
    back = load_heads(tmp_path / "h.bin")
    for name, hw in heads.items():
        for k, v in hw.to_arrays().items():
            assert back[name].to_arrays()[k].tobytes() == v.tobytes()


# ---------------------------------------------------------------- targets

def test_targets_empty():
    m, o = make_targets(SPEC, [])
    assert not m.data.any() and not o.data.any()


def test_targets_two_by_two_box():
    obj = GtObject((1.0, 1.0, 0.5), (2.0, 2.0, 1.0), 0.0, (3.0, -1.0))
    m, o = make_targets(SPEC, [obj])
    on = np.argwhere(o.data[0] == 1).tolist()
    assert on == [[8, 8], [8, 9], [9, 8], [9, 9]]
    for x, y in on:
        assert tuple(m.data[:, x, y]) == (3.0, -1.0)
    assert np.count_nonzero(m.data.any(axis=0)) == 4


def test_targets_below_threshold():
    # covers 30% of cell (8, 8) = [0, 1) x [0, 1)
    obj = GtObject((0.15, 0.5, 0.5), (0.3, 1.0, 1.0), 0.0, (2.0, 0.0))
    m, o = make_targets(SPEC, [obj], 0.5)
    assert o.data[0, 8, 8] == 0 and not m.data[:, 8, 8].any()


def test_targets_fully_contained_cell_gets_exact_velocity():
    obj = GtObject((0.3, -0.2, 0.5), (4.5, 2.5, 1.0), 0.4, (1.25, -3.5))
    m, o = make_targets(SPEC, [obj])
    assert o.data[0, 8, 7] == 1.0 and tuple(m.data[:, 8, 7]) == (1.25, -3.5)


def random_objects(rng, n):
    objs = []
    while len(objs) < n:
        o = GtObject((rng.uniform(-7, 7), rng.uniform(-7, 7), 0.5), (rng.uniform(0.5, 4), rng.uniform(0.5, 3), 1.0),
                     rng.uniform(-math.pi, math.pi), tuple(rng.normal(size=2) * 3))
        r = 0.5 * math.hypot(*o.dims[:2])
        if all(math.hypot(o.center[0] - p.center[0], o.center[1] - p.center[1]) > r + 0.5 * math.hypot(*p.dims[:2])
               for p in objs):
            objs.append(o)
    return objs


@given(st.integers(0, 2**31 - 1), st.floats(0.05, 1.0))
def test_targets_match_per_cell_recomputation(seed, tau):
    rng = np.random.default_rng(seed)
    objs = random_objects(rng, 3)
    polys = [bev_footprint(o) for o in objs]
    m, o = make_targets(SPEC, objs, tau)
    for x in range(16):
        for y in range(16):
            r = cell_box_overlap_ratio(SPEC, x, y, polys)
            assert (o.data[0, x, y] == 1) == (r >= tau)
            if r >= tau:
                own = [cell_box_overlap_ratio(SPEC, x, y, [p]) for p in polys]
                assert tuple(m.data[:, x, y]) == objs[int(np.argmax(own))].velocity
            else:
                assert not m.data[:, x, y].any()


# ---------------------------------------------------------------- losses

def test_loss_perfect_prediction():
    m, o = make_targets(SPEC, [GtObject((1.0, 1.0, 0.5), (2.0, 2.0, 1.0), 0.0, (3.0, -1.0))])
    total, parts = mfe_loss(m, o, m, o)
    assert parts["vel"] == 0.0
    assert parts["occ"] < 1e-12
    assert total == pytest.approx(30 * parts["occ"])


def test_velocity_mse_closed_form():
    m, o = make_targets(SPEC, [GtObject((1.0, 1.0, 0.5), (2.0, 2.0, 1.0), 0.0, (3.0, -1.0))])
    _, parts = mfe_loss(Grid2D.zeros(SPEC, 2), o, m, o)
    k, n = 4, SPEC.n_cells
    assert parts["vel"] == pytest.approx(k * 10 / (2 * n), rel=1e-15)


def test_focal_single_cell():
    assert focal_loss(np.array([0.5]), np.array([1.0])) == pytest.approx(-0.25 * 0.25 * math.log(0.5), rel=1e-15)


@given(st.integers(0, 2**31 - 1))
def test_total_is_weighted_sum(seed):
    rng = np.random.default_rng(seed)
    spec = GridSpec(4, 4, 1.0)
    g = lambda c: Grid2D(spec, rng.random((c, 4, 4)))  # noqa: E731
    edges = np.linspace(1, 10, 5)
    depth_gt = np.where(rng.random((3, 5)) < 0.3, np.inf, rng.uniform(1, 10, (3, 5)))
    prob = rng.dirichlet(np.ones(4), size=(3, 5)).transpose(2, 0, 1)
    lw = LossWeights(depth=rng.random(), seg=rng.random(), vel=rng.random(), occ=rng.random())
    total, p = mfe_loss(g(2), g(1), g(2), Grid2D(spec, (rng.random((1, 4, 4)) > 0.5) * 1.0),
                        prob, depth_gt, edges, rng.random((3, 5)), (rng.random((3, 5)) > 0.5) * 1.0, lw)
    ref = lw.depth * p["depth"] + lw.seg * p["seg"] + lw.vel * p["vel"] + lw.occ * p["occ"]
    assert abs(total - ref) <= 1e-12 * max(1.0, abs(ref))


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        mfe_loss(Grid2D.zeros(SPEC, 2), Grid2D.zeros(SPEC, 1), Grid2D.zeros(GridSpec(2, 2, 1.0), 2),
                 Grid2D.zeros(SPEC, 1))


# ---------------------------------------------------------------- gradients

def test_focal_logit_gradient_and_hessian_finite_differences():
    rng = np.random.default_rng(5)
    z, y = rng.normal(size=500) * 3, (rng.random(500) > 0.5) * 1.0
    h = 1e-5
    _, g = focal_loss_and_grad(z, y)
    fd = (focal_loss_and_grad(z + h, y)[0] - focal_loss_and_grad(z - h, y)[0]) / (2 * h)
    assert np.all(np.abs(g - fd) <= 1e-4 * np.maximum(np.abs(fd), 1e-6))
    hs = focal_hess_logits(z, y)
    fd2 = (focal_loss_and_grad(z + h, y)[1] - focal_loss_and_grad(z - h, y)[1]) / (2 * h)
    assert np.all(np.abs(hs - fd2) <= 1e-4 * np.maximum(np.abs(fd2), 1e-6))


def small_samples(seed, n=2, c=3, spec=GridSpec(8, 8, 1.0)):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        bev = Grid2D(spec, rng.normal(size=(c, *spec.shape)))
        occ = Grid2D(spec, (rng.random((1, *spec.shape)) < 0.3) * 1.0)
        out.append(HeadSample(bev, Grid2D(spec, rng.normal(size=(2, *spec.shape))), occ))
    return out


def test_occupancy_parameter_gradient_finite_differences():
    samples = small_samples(6)
    w = HeadWeights.init(7, 3, 1, hidden=3)
    _, grad = occupancy_loss_and_grad(w, samples)
    rng = np.random.default_rng(8)
    names = list(grad)
    h = 1e-5
    for _ in range(200):
        name = names[rng.integers(len(names))]
        arr = getattr(w, name)
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        fp, _ = occupancy_loss_and_grad(w, samples)
        arr[idx] = old - h
        fm, _ = occupancy_loss_and_grad(w, samples)
        arr[idx] = old
        fd = (fp - fm) / (2 * h)
        assert abs(grad[name][idx] - fd) <= 1e-4 * max(abs(fd), 1e-8)


# ---------------------------------------------------------------- fitting

def test_ridge_normal_equations_residual():
    samples = small_samples(9, n=3)
    xtx, xty, _ = normal_equations(samples)
    sol = solve_ridge(xtx, xty, 1e-3)
    resid = (xtx + 1e-3 * np.eye(len(xtx))) @ sol - xty
    assert np.max(np.abs(resid)) / max(np.max(np.abs(xty)), 1.0) < 1e-8


def test_planted_linear_head_recovered():
    rng = np.random.default_rng(10)
    planted = HeadWeights.from_effective(rng.normal(size=(2, 27)), rng.normal(size=2), 3)
    samples = []
    for s in small_samples(11, n=4):
        samples.append(HeadSample(s.bev, velocity_head(s.bev, planted), s.occ_gt))
    head, loss = fit_velocity_head(samples, ridge=1e-12)
    k, b = head.effective()
    k0, b0 = planted.effective()
    assert np.max(np.abs(k - k0)) <= 1e-6 * np.max(np.abs(k0))
    assert np.max(np.abs(b - b0)) <= 1e-6 * np.max(np.abs(b0))
    assert loss < 1e-18


def test_zero_targets_give_zero_weights():
    samples = [HeadSample(s.bev, Grid2D.zeros(s.bev.spec, 2), s.occ_gt) for s in small_samples(12)]
    head, _ = fit_velocity_head(samples, ridge=1e-3)
    k, b = head.effective()
    assert not k.any() and not b.any()


def test_singular_fit_without_ridge():
    spec = GridSpec(4, 4, 1.0)
    s = HeadSample(Grid2D.zeros(spec, 2), Grid2D.zeros(spec, 2), Grid2D.zeros(spec, 1))
    with pytest.raises(IllConditionedFit, match="ill-conditioned fit; increase λ_r"):
        fit_velocity_head([s], ridge=0.0)


def test_occupancy_fit_reaches_stationary_point():
    samples = small_samples(13, n=3)
    noise = np.random.default_rng(14)
    for s in samples:
        # noisy labels keep the optimum finite
        s.occ_gt.data[:] = (s.bev.data[:1] + noise.normal(size=(1, 8, 8)) > 0.3) * 1.0
    head, loss = fit_occupancy_head(samples, max_iter=200)
    assert loss < occupancy_loss_and_grad(HeadWeights.zeros(3, 1), samples)[0]
    k, b = head.effective()
    w = HeadWeights(k.reshape(1, 3, 3, 3), b, np.eye(1), np.zeros(1))
    _, grad = occupancy_loss_and_grad(w, samples)
    assert max(np.max(np.abs(v)) for v in grad.values()) < 1e-5


def test_fit_heads_requires_samples():
    with pytest.raises(ValueError):
        fit_heads([])
