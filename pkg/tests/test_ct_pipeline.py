import numpy as np
import pytest

from ctbody.ct_pipeline import (BinaryMask, CtConfig, TriMesh, Volume, ball, crop_cloud, ct_to_cloud,
                                marching_cubes, morph, read_volume, remove_bed, sample_surface, signed_volume,
                                surface_area, threshold, write_volume)
from ctbody.errors import ConfigError, EmptyMask, EmptyMesh, InvalidRange, IoError


def naive_erode(a, se):
    r = se.shape[0] // 2
    out = np.zeros_like(a)
    offs = np.argwhere(se) - r
    for idx in np.ndindex(a.shape):
        ok = True
        for o in offs:
            q = tuple(np.array(idx) + o)
            if any(c < 0 or c >= n for c, n in zip(q, a.shape)) or not a[q]:
                ok = False
                break
        out[idx] = ok
    return out


def naive_dilate(a, se):
    r = se.shape[0] // 2
    out = np.zeros_like(a)
    offs = np.argwhere(se) - r
    for idx in np.ndindex(a.shape):
        for o in offs:
            q = tuple(np.array(idx) + o)
            if all(0 <= c < n for c, n in zip(q, a.shape)) and a[q]:
                out[idx] = True
                break
    return out


def test_threshold_is_inclusive():
    vol = Volume(np.array([-301, -300, 0, 2000, 2001], float).reshape(5, 1, 1))
    m = threshold(vol, -300, 2000)
    assert m.data.ravel().tolist() == [False, True, True, True, False]
    with pytest.raises(InvalidRange):
        threshold(vol, 10, 0)


def test_ball_shape():
    assert ball(0).sum() == 1
    assert ball(1).sum() == 7
    assert ball(2).sum() == 33


@pytest.mark.parametrize("op", ["open", "close"])
def test_morphology_matches_naive(op, rng):
    a = rng.random((9, 8, 7)) > 0.55
    se = ball(1)
    p = np.pad(a, 1)
    ref = naive_dilate(naive_erode(p, se), se) if op == "open" else naive_erode(naive_dilate(p, se), se)
    got = morph(BinaryMask(a), op, 1).data
    np.testing.assert_array_equal(got, ref[1:-1, 1:-1, 1:-1])


def test_morphology_rejects_bad_args():
    m = BinaryMask(np.ones((3, 3, 3)))
    with pytest.raises(ConfigError):
        morph(m, "open", -1)
    with pytest.raises(ConfigError):
        morph(m, "dilate", 1)
    np.testing.assert_array_equal(morph(m, "close", 0).data, m.data)


def test_closing_keeps_boundary_structure():
    a = np.zeros((6, 6, 6), bool)
    a[:3] = True
    np.testing.assert_array_equal(morph(BinaryMask(a), "close", 2).data, a)


def test_remove_bed_keeps_largest_component():
    a = np.zeros((10, 10, 10), bool)
    a[1:4, 1:4, 1:4] = True  # 27
    a[6:9, 6:9, 5:9] = True  # 36
    a[0, 9, 9] = True
    out = remove_bed(BinaryMask(a)).data
    assert out.sum() == 36 and out[7, 7, 6]


def test_remove_bed_tie_goes_to_first_voxel():
    a = np.zeros((8, 3, 3), bool)
    a[5:7] = True
    a[0:2] = True
    out = remove_bed(BinaryMask(a)).data
    assert out[0].all() and not out[5].any()


def test_remove_bed_cut_plane_and_empty():
    a = np.zeros((4, 4, 10), bool)
    a[:, :, :] = True  # body fused to a bed: the cut separates nothing but clears the floor
    out = remove_bed(BinaryMask(a, (1, 1, 1), (0, 0, 0)), cut_mm=4.0).data
    assert not out[:, :, :4].any() and out[:, :, 4:].all()
    with pytest.raises(EmptyMask):
        remove_bed(BinaryMask(np.zeros((3, 3, 3))))


def sphere_mask(radius_vox, spacing=1.0):
    n = int(2 * radius_vox + 8)
    g = (np.arange(n) - (n - 1) / 2) * spacing
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    return BinaryMask(x * x + y * y + z * z <= (radius_vox * spacing) ** 2, (spacing,) * 3,
                      (-(n - 1) / 2 * spacing,) * 3)


def test_marching_cubes_sphere_is_closed_and_outward():
    mesh = marching_cubes(sphere_mask(15))
    assert signed_volume(mesh.vertices, mesh.faces) > 0
    # every edge shared by exactly two faces
    e = np.sort(np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert abs(r.mean() - 15) < 1.0


def test_marching_cubes_empty():
    with pytest.raises(EmptyMask):
        marching_cubes(BinaryMask(np.zeros((4, 4, 4))))


def two_triangles():
    # areas 1 and 3
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0]], float)
    return TriMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))


def test_sampling_is_area_weighted():
    mesh = two_triangles()
    n = 20000
    c = sample_surface(mesh, n, seed=3, to_meters=False)
    k = int((c.face_index == 0).sum())
    # binomial(n, 1/4): 5 sigma band
    sd = np.sqrt(n * 0.25 * 0.75)
    assert abs(k - n / 4) < 5 * sd
    p = c.points[c.face_index == 0]
    assert np.all(p[:, 0] >= -1e-12) and np.all(p[:, 1] >= -1e-12)
    assert np.all(p[:, 0] + p[:, 1] / 2 <= 1 + 1e-12)
    np.testing.assert_array_equal(sample_surface(mesh, 50, 7).points, sample_surface(mesh, 50, 7).points)
    assert surface_area(mesh.vertices, mesh.faces) == pytest.approx(4.0)


def test_sampling_errors():
    with pytest.raises(ConfigError):
        sample_surface(two_triangles(), 0, 1)
    with pytest.raises(EmptyMesh):
        sample_surface(TriMesh(np.zeros((3, 3)), np.zeros((0, 3), int)), 5, 1)


def test_crop_cloud():
    c = sample_surface(two_triangles(), 500, 1)  # meters
    out = crop_cloud(c, [[-1, -1, -1], [5, 5, 5]])
    assert len(out) == int((c.face_index == 0).sum())
    assert np.all(out.face_index == 0)


def test_volume_round_trip(tmp_path, rng):
    vol = Volume(rng.integers(-1000, 2000, (5, 4, 3)).astype(float), (1.5, 2.0, 2.5), (-10, 0, 3))
    write_volume(vol, tmp_path / "v")
    back = read_volume(tmp_path / "v.json")
    np.testing.assert_array_equal(back.intensities, vol.intensities)
    assert back.spacing == vol.spacing and back.origin == vol.origin
    (tmp_path / "v.raw").write_bytes(b"\0\0")
    with pytest.raises(IoError):
        read_volume(tmp_path / "v.json")
    with pytest.raises(IoError):
        read_volume(tmp_path / "nothing.json")


def test_volume_validation():
    with pytest.raises(ConfigError):
        Volume(np.zeros((3, 3)))
    with pytest.raises(ConfigError):
        Volume(np.zeros((3, 3, 3)), (1, 0, 1))


def test_ct_to_cloud_on_box_with_bed():
    I = np.full((30, 30, 30), -1000.0)
    I[8:22, 8:22, 10:24] = 40.0  # body
    I[2:28, 2:28, 4:6] = 100.0  # separate bed slab
    cloud, mesh = ct_to_cloud(Volume(I, (2, 2, 2), (0, 0, 0)), CtConfig(n_points=800), seed=1)
    assert len(cloud) == 800
    # all samples on the body box surface (meters)
    assert cloud.points[:, 2].min() > 0.017
    np.testing.assert_allclose(cloud.points.mean(axis=0), [0.03, 0.03, 0.034], atol=0.002)
