import numpy as np
import pytest

from ctbody.body_model import BodyParams, forward, rodrigues
from ctbody.errors import BadMask, DimensionMismatch, NoIntersection
from ctbody.metrics import (EvalConfig, SliceSpec, circumference, evaluate, hull_perimeter, mpjpe, pve,
                            reports_to_csv)
from ctbody.synth import random_params


def cylinder(radius=0.15, length=1.0, n=64, rings=11):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    x = np.linspace(0, length, rings)
    v = np.array([[xi, radius * np.cos(a), radius * np.sin(a)] for xi in x for a in t])
    f = []
    for r in range(rings - 1):
        for k in range(n):
            a, b = r * n + k, r * n + (k + 1) % n
            f += [[a, b, a + n], [b, b + n, a + n]]

    class M:
        vertices = v
        faces = np.array(f)
    return M


def test_mpjpe_and_pve_basics(rng):
    a = rng.normal(size=(10, 3))
    assert mpjpe(a, a) == 0.0 and pve(a, a) == 0.0
    b = a + [0.03, 0.0, 0.04]
    assert mpjpe(b, a) == pytest.approx(50.0)
    assert pve(b, a, mask=[0, 3]) == pytest.approx(50.0)
    assert pve(b, a, mask=np.arange(10) < 2) == pytest.approx(50.0)
    with pytest.raises(DimensionMismatch):
        mpjpe(a, a[:3])
    with pytest.raises(BadMask):
        pve(a, a, mask=[])
    with pytest.raises(BadMask):
        pve(a, a, mask=np.ones(3, bool))


def test_hull_perimeter():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]])
    assert hull_perimeter(sq) == pytest.approx(4.0)
    assert hull_perimeter(np.array([[0, 0], [1, 0], [3, 0]])) == pytest.approx(6.0)
    assert hull_perimeter(np.zeros((1, 2))) == 0.0


def test_cylinder_circumference():
    m = cylinder(0.15, n=256)
    c = circumference(m, SliceSpec("mid", 0.43))
    assert c == pytest.approx(2 * np.pi * 15, rel=0.01)


def test_circumference_rigid_invariance(rng):
    m = cylinder(0.12, n=40)
    ref = circumference(m, SliceSpec("a", 0.37))
    R = rodrigues(rng.normal(size=3))
    up = R @ np.array([1.0, 0, 0])

    class Moved:
        vertices = m.vertices @ R.T + rng.normal(size=3)
        faces = m.faces
    got = circumference(Moved, SliceSpec("a", 0.37), up_axis=up)
    assert abs(got - ref) <= 1e-9 * ref


def test_circumference_misses():
    m = cylinder()
    with pytest.raises(NoIntersection):
        circumference(m, SliceSpec("a", 0.5), faces=np.zeros((0, 3), int))
    with pytest.raises(ValueError):
        SliceSpec("bad", 1.0)


def test_evaluate_identical_and_offset(spec, rng):
    gt = random_params(spec, rng)
    r = evaluate(gt, gt, spec)
    assert r.mpjpe_mm == 0.0 and r.pve_mm == 0.0 and r.torso_v2v_mm == 0.0
    assert all(c["abs_error"] == 0.0 for c in r.circumference_cm.values())
    p = gt.copy()
    p.trans = p.trans + [0.03, 0.0, 0.04]
    r = evaluate(p, gt, spec)
    assert r.mpjpe_mm == pytest.approx(50.0) and r.pve_mm == pytest.approx(50.0)
    # circumference is measured on the rest-pose shape: translation cannot change it
    assert all(c["abs_error"] == 0.0 for c in r.circumference_cm.values())
    posed = evaluate(p, gt, spec, EvalConfig(circumference_pose="posed"))
    for c in posed.circumference_cm.values():
        assert c["abs_error"] <= 1e-9 * c["gt"]


def test_reports_csv(spec, rng):
    gt = random_params(spec, rng)
    r = evaluate(gt, gt, spec)
    text = reports_to_csv({"a": r, "b": r})
    lines = text.strip().splitlines()
    assert lines[0].split(",")[:4] == ["entry", "MPJPE_mm", "PVE_mm", "torso_V2V_mm"]
    assert len(lines) == 3 and lines[1].startswith("a,")
    assert reports_to_csv({}) == ""
