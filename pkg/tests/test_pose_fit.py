import json

import numpy as np
import pytest

from ctbody.body_model import BodyParams, forward
from ctbody.depthmap import DepthMap, OrthoCamera
from ctbody.errors import ConfigError, DimensionMismatch, EmptyDepthMap, MissingCamera, NoValidPixels
from ctbody.metrics import mpjpe
from ctbody.pose_fit import (GmmPrior, PoseFitConfig, PoseFitResult, PoseObjective, backproject, fit_pose,
                             gmm_prior_nll, gmm_prior_responsibilities, loss_eq2, median_filter_valid,
                             normalize_depth, preprocess_depth, resize_bilinear)
from ctbody.render import render_depth
from ctbody.synth import default_camera, random_params

from conftest import central_difference


def test_gmm_prior_single_gaussian_closed_form(rng):
    prior = GmmPrior.default(5, 0.25)
    x = rng.normal(size=prior.dim)
    ref = 0.5 * (x * x).sum() / 0.25 + 0.5 * prior.dim * np.log(2 * np.pi * 0.25)
    nll, g = gmm_prior_nll(prior, x, return_grad=True)
    assert nll == pytest.approx(ref, rel=1e-12)
    np.testing.assert_allclose(g, x / 0.25, rtol=1e-12)


def test_gmm_prior_gradient_and_responsibilities(rng):
    D = 6
    prior = GmmPrior([0.2, 0.5, 0.3], rng.normal(size=(3, D)), rng.uniform(0.1, 1, (3, D)))
    x = rng.normal(size=D)
    _, g = gmm_prior_nll(prior, x, return_grad=True)
    np.testing.assert_allclose(g, central_difference(lambda y: gmm_prior_nll(prior, y), x), atol=1e-7)
    r = gmm_prior_responsibilities(prior, x)
    assert r.sum() == pytest.approx(1.0)
    # far from every mean the log-sum-exp must not underflow
    assert np.isfinite(gmm_prior_nll(prior, x + 1e3))
    with pytest.raises(DimensionMismatch):
        gmm_prior_nll(prior, np.zeros(D + 1))
    with pytest.raises(ConfigError):
        GmmPrior([0.5, 0.6], np.zeros((2, 2)), np.ones((2, 2)))


def test_gmm_prior_load(tmp_path):
    p = GmmPrior.default(3)
    (tmp_path / "p.json").write_text(json.dumps(p.to_dict()))
    q = GmmPrior.load(tmp_path / "p.json")
    np.testing.assert_array_equal(q.means, p.means)


def naive_median(depth, valid, r):
    out = depth.astype(float).copy()
    H, W = depth.shape
    for i in range(H):
        for j in range(W):
            if valid[i, j]:
                vals = [depth[a, b] for a in range(max(0, i - r), min(H, i + r + 1))
                        for b in range(max(0, j - r), min(W, j + r + 1)) if valid[a, b]]
                out[i, j] = np.median(vals)
    return out


def test_median_filter_matches_naive(rng):
    d = rng.normal(size=(9, 7))
    v = rng.random((9, 7)) > 0.3
    np.testing.assert_allclose(median_filter_valid(d, v, 1), naive_median(d, v, 1))
    np.testing.assert_allclose(median_filter_valid(d, v, 2), naive_median(d, v, 2))


def test_resize_bilinear_constant_and_validity(rng):
    d = np.full((20, 9), 3.5)
    v = np.ones((20, 9), bool)
    v[:, :4] = False
    out, ok = resize_bilinear(d, v, (10, 5))
    np.testing.assert_allclose(out[ok], 3.5)
    assert not ok[:, 0].any() and ok[:, -1].all()
    # a linear ramp survives resizing exactly away from the edges
    ramp = np.add.outer(np.arange(16.0), 2 * np.arange(8.0))
    out, ok = resize_bilinear(ramp, np.ones_like(ramp, bool), (8, 4))
    s = (np.arange(8) + 0.5) * 2 - 0.5
    t = (np.arange(4) + 0.5) * 2 - 0.5
    np.testing.assert_allclose(out, np.add.outer(s, 2 * t))


def test_preprocess_target_size_and_units(spec):
    d = render_depth(forward(spec, BodyParams.zeros(spec)), default_camera())
    p = preprocess_depth(d)
    assert p.depth.shape == (128, 54)
    assert p.camera.shape == (128, 54)
    assert p.depth[p.valid].min() >= 0 and p.depth[p.valid].max() <= 1
    lo, hi = p.norm
    assert lo == pytest.approx(d.depth[d.valid].min()) and hi == pytest.approx(d.depth[d.valid].max())
    # backprojection through the resized camera stays on the body
    pts = backproject(p).points
    full = backproject(d).points
    assert abs(pts[:, 2].mean() - full[:, 2].mean()) < 0.01


def test_preprocess_errors():
    cam = OrthoCamera((4, 4), (1, 1), (0, 0), 10)
    with pytest.raises(EmptyDepthMap):
        normalize_depth(DepthMap(np.zeros((4, 4)), np.zeros((4, 4), bool), cam))
    with pytest.raises(MissingCamera):
        backproject(DepthMap(np.ones((4, 4)), np.ones((4, 4), bool)))


def test_objective_gradient(tiny_spec, rng):
    spec = tiny_spec
    gt = random_params(spec, rng)
    sub = forward(spec, gt).vertices[::2]
    cloud = sub + rng.normal(0, 0.005, sub.shape)
    lm = (np.array([0, 5, 9]), forward(spec, gt).vertices[[0, 5, 9]] + 0.01)
    for robust in (None, 0.02):
        cfg = PoseFitConfig(optimize_beta=True, bidirectional=True, chamfer_robust_m=robust)
        obj = PoseObjective(spec, cloud, cfg, lm, gt_height=1.7)
        p = random_params(spec, rng)
        f, _, (gb, gt_, gtr) = obj(p)

        def f_theta(t):
            return obj(BodyParams(p.beta, t, p.trans), need_grad=False)[0]

        def f_beta(b):
            return obj(BodyParams(b, p.theta, p.trans), need_grad=False)[0]

        def f_trans(t):
            return obj(BodyParams(p.beta, p.theta, t), need_grad=False)[0]

        for g, fd in ((gt_, central_difference(f_theta, p.theta)), (gb, central_difference(f_beta, p.beta)),
                      (gtr, central_difference(f_trans, p.trans))):
            np.testing.assert_allclose(g, fd, atol=1e-3 * max(1.0, np.abs(fd).max()))


def test_fit_pose_recovers_clean_pose(spec, rng):
    gt = random_params(spec, rng)
    depth = render_depth(forward(spec, gt), default_camera())
    res = fit_pose(spec, depth, gt.beta)
    assert np.all(np.diff(res.objective_trace) <= 1e-9 * abs(res.objective_trace[0]))
    est = forward(spec, res.params())
    assert mpjpe(est.joints, forward(spec, gt).joints) < 20.0
    back = PoseFitResult.from_dict(json.loads(res.to_json()))
    np.testing.assert_array_equal(back.theta, res.theta)


def test_fit_pose_zero_iterations_and_errors(spec):
    cam = default_camera()
    depth = render_depth(forward(spec, BodyParams.zeros(spec)), cam)
    r = fit_pose(spec, depth, np.zeros(spec.n_betas), cfg=PoseFitConfig(iterations=0))
    assert r.iterations == 0 and len(r.objective_trace) == 1
    with pytest.raises(DimensionMismatch):
        fit_pose(spec, depth, np.zeros(spec.n_betas + 1))
    with pytest.raises(NoValidPixels):
        fit_pose(spec, None, np.zeros(spec.n_betas))
    with pytest.raises(ConfigError):
        PoseFitConfig(stages=("local",)).validate()


def test_loss_eq2(spec, rng):
    gt = random_params(spec, rng)
    total, parts = loss_eq2(gt, gt, spec)
    assert total == 0.0 and parts == {"smpl": 0.0, "v2v": 0.0, "height": 0.0}
    p = gt.copy()
    p.trans = p.trans + [0.03, 0.0, 0.04]
    total, parts = loss_eq2(p, gt, spec, lambda1=2.0, lambda2=0.5)
    assert parts["v2v"] == pytest.approx(0.05)
    assert parts["smpl"] == pytest.approx((0.03 ** 2 + 0.04 ** 2) / (4 + 36 + 3))
    assert parts["height"] == pytest.approx(0.0, abs=1e-12)
    assert total == pytest.approx(parts["smpl"] + 2.0 * 0.05)
