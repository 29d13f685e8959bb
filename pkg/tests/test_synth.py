import json

import numpy as np
import pytest

from ctbody.body_model import BodyParams, body_height, forward, load_model
from ctbody.ct_pipeline import remove_bed, threshold
from ctbody.synth import (ENTRY_FILES, GenOptions, ToySpec, gen_dataset, gen_entry, make_toy_model,
                          random_params, toy_joint_names, toy_landmarks)


def test_toy_model_is_valid(spec):
    spec.validate()
    assert spec.n_betas == 4 and spec.n_joints == 12
    assert len(toy_joint_names()) == 12
    assert {"torso", "head", "l_arm", "r_arm", "l_leg", "r_leg"} <= set(spec.regions)
    assert 1.5 < body_height(forward(spec, BodyParams.zeros(spec))) < 2.0


def test_toy_shape_components(spec):
    rest = forward(spec, BodyParams.zeros(spec))
    for k in range(4):
        b = np.zeros(4)
        b[k] = 1.0
        assert np.abs(forward(spec, BodyParams(b, np.zeros((12, 3)), np.zeros(3))).vertices - rest.vertices).max() > 0.005
    # component 0 scales overall height
    b = np.array([1.0, 0, 0, 0])
    assert body_height(forward(spec, BodyParams(b, np.zeros((12, 3)), np.zeros(3)))) > body_height(rest)


def test_toy_spec_validation():
    with pytest.raises(ValueError):
        make_toy_model(ToySpec(limb_segments=2, n_joints=10))
    with pytest.raises(ValueError):
        make_toy_model(ToySpec(n_betas=5))


def test_landmarks_are_extremes(spec):
    lm = toy_landmarks(spec)
    assert len(lm) == 5 and len(set(lm.tolist())) == 5
    assert spec.template_vertices[lm[0], 0] == spec.template_vertices[:, 0].max()


def test_gen_entry_consistency(spec, rng):
    p = random_params(spec, rng)
    e = gen_entry(spec, p, GenOptions(seed=4))
    # the bed is a separate component and the body survives bed removal exactly
    body = remove_bed(threshold(e.volume, -300, 2000)).data
    np.testing.assert_array_equal(body, e.body_mask)
    assert (e.volume.intensities == 100).any()
    np.testing.assert_array_equal(e.depth.depth, e.clean_depth.depth)
    np.testing.assert_allclose(e.landmarks[1], e.mesh.vertices[e.landmarks[0]])
    assert e.height == pytest.approx(body_height(e.mesh))


def test_drape_changes_torso_pixels(spec, rng):
    p = random_params(spec, rng)
    e = gen_entry(spec, p, GenOptions(drape=True, seed=1))
    assert e.occlusion["changed_fraction"] >= 0.9
    changed = e.depth.valid & e.clean_depth.valid & (e.depth.depth != e.clean_depth.depth)
    # the cover lies above the body
    assert np.all(e.depth.depth[changed] < e.clean_depth.depth[changed])


def test_gen_entry_is_deterministic(spec):
    p = random_params(spec, np.random.default_rng(3))
    a = gen_entry(spec, p, GenOptions(drape=True, noise_sigma_mm=2.0, seed=9))
    b = gen_entry(spec, p, GenOptions(drape=True, noise_sigma_mm=2.0, seed=9))
    np.testing.assert_array_equal(a.depth.depth, b.depth.depth)
    np.testing.assert_array_equal(a.volume.intensities, b.volume.intensities)


def test_rest_pose_ct(spec, rng):
    p = random_params(spec, rng)
    e = gen_entry(spec, p, GenOptions(ct_pose="rest", bed=False))
    rest = forward(spec, BodyParams(p.beta, np.zeros_like(p.theta), p.trans))
    vox = np.argwhere(e.body_mask) * e.volume.spacing + e.volume.origin
    assert np.abs(vox[:, 0].max() / 1000 - rest.vertices[:, 0].max()) < 0.012


def test_gen_options_validation():
    with pytest.raises(ValueError):
        GenOptions(ct_pose="sitting").validate()
    with pytest.raises(ValueError):
        GenOptions(bed_hu=500).validate()


def test_gen_dataset_layout(tmp_path):
    folders = gen_dataset(tmp_path, 2, seed=5)
    assert json.loads((tmp_path / "dataset.json").read_text())["entries"] == ["entry_000", "entry_001"]
    load_model(tmp_path / "model.ctbm").validate()
    for f in folders:
        for name in ENTRY_FILES:
            assert (tmp_path / f / name).exists()
