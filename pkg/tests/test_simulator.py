"""Phantom rasterization and synthetic stack acquisition."""

import numpy as np
import pytest

from stackrecon import rng, simulator
from stackrecon.core import sample_volume
from stackrecon.geometry import RigidTransform
from stackrecon.simulator import (
    Ellipsoid,
    MOTION_PRESETS,
    MotionSpec,
    bias_log_field,
    make_phantom,
    perturb_transforms,
    simulate_bundle,
    simulate_stack,
)


# ---------------------------------------------------------------------------
# phantom


def test_empty_spec_gives_zero_volume():
    vol = make_phantom([], shape=(12, 10, 8), spacing=1.0)
    assert vol.data.shape == (12, 10, 8)
    assert not vol.data.any()


def test_single_ellipsoid_volume_matches_analytic():
    a, b, c = 12.0, 11.0, 10.0
    vol = make_phantom([Ellipsoid((0, 0, 0), (a, b, c), 1.0)],
                       shape=(64, 64, 64), spacing=0.5)
    count = int(np.count_nonzero(vol.data))
    measured = count * 0.5**3
    analytic = 4.0 / 3.0 * np.pi * a * b * c
    assert abs(measured - analytic) / analytic < 0.02


def test_nested_ellipsoids_inner_overrides():
    spec = [
        Ellipsoid((0, 0, 0), (20, 20, 20), 0.3),
        Ellipsoid((0, 0, 0), (8, 8, 8), 0.9),
    ]
    vol = make_phantom(spec, shape=(48, 48, 48), spacing=1.0)
    center = tuple(s // 2 for s in vol.shape)
    assert vol.data[center] == pytest.approx(0.9)
    # a point inside the outer shell only
    assert vol.data[center[0] + 14, center[1], center[2]] == pytest.approx(0.3)


def test_phantom_rotation_moves_mass():
    e = [Ellipsoid((0, 0, 0), (16, 6, 6), 0.5, (0.0, 0.0, np.pi / 2))]
    vol = make_phantom(e, shape=(48, 48, 48), spacing=1.0)
    # quarter turn about z swaps the long axis from x to y
    occ = np.nonzero(vol.data)
    span_x = occ[0].max() - occ[0].min()
    span_y = occ[1].max() - occ[1].min()
    assert span_y > span_x + 10


# ---------------------------------------------------------------------------
# orientations


def test_orientations_orthogonal_and_proper():
    axes = []
    for name in ("axial", "coronal", "sagittal"):
        r = simulator._orientation_matrix(name)
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)
        axes.append(r[:, 2])
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(float(axes[i] @ axes[j])) < 1e-12


def test_unknown_orientation_rejected():
    vol = make_phantom(shape=(24, 24, 24), spacing=2.0)
    with pytest.raises(ValueError):
        simulate_stack(vol, "oblique", 2.0, 4.0)


# ---------------------------------------------------------------------------
# acquisition geometry and validation


def _small_vol():
    return make_phantom(shape=(32, 32, 32), spacing=1.5)


@pytest.mark.parametrize("kwargs", [
    {"inplane": -1.0, "thickness": 4.0},
    {"inplane": 1.5, "thickness": 0.0},
    {"inplane": 1.5, "thickness": 4.0, "gap": -0.1},
    {"inplane": 1.5, "thickness": 4.0, "k_sim": 15},
    {"inplane": 1.5, "thickness": 4.0, "k_sim": 0},
])
def test_bad_acquisition_parameters_rejected(kwargs):
    with pytest.raises(ValueError):
        simulate_stack(_small_vol(), "axial", **kwargs)


def test_stack_covers_phantom():
    vol = _small_vol()
    st, truth = simulate_stack(vol, "axial", 1.5, 3.0, k_sim=4)
    ext = (np.array(vol.shape) - 1) * vol.spacing
    n1, n2, ns = st.data.shape
    assert (n1 - 1) * 1.5 >= ext[0] - 1.5
    assert (ns - 1) * 3.0 + 3.0 >= ext[2] - 3.0
    assert st.mask.shape == st.data.shape
    assert st.mask.all()
    assert len(st.transforms) == ns
    assert truth["orientation"] == "axial"
    assert len(truth["scales"]) == ns


def test_degenerate_psf_equals_trilinear_resampling(monkeypatch):
    # shrink the acquisition blur to nothing: each pixel must become the
    # trilinear pick at its own center
    vol = make_phantom(shape=(40, 40, 40), spacing=1.2)
    monkeypatch.setattr(simulator, "psf_covariance",
                        lambda r1, r2, r3: np.diag([1e-12, 1e-12, 1e-12]))
    st, _ = simulate_stack(vol, "axial", 1.2, 2.4, k_sim=4, seed=3)
    n1, n2, ns = st.data.shape
    a = (np.arange(n1) - (n1 - 1) / 2) * 1.2
    b = (np.arange(n2) - (n2 - 1) / 2) * 1.2
    aa, bb = np.meshgrid(a, b, indexing="ij")
    p = np.stack([aa.ravel(), bb.ravel(), np.zeros(aa.size)], axis=1)
    for i in range(0, ns, 3):
        want = sample_volume(vol, st.transforms[i].apply(p))
        got = st.data[:, :, i].reshape(-1)
        assert np.max(np.abs(got - want)) < 1e-4


def test_bias_is_exactly_multiplicative():
    # same seed with and without bias: the ratio at every pixel must equal
    # the recorded bias field evaluated at the pixel center
    vol = _small_vol()
    clean, _ = simulate_stack(vol, "axial", 1.5, 3.0, k_sim=8, seed=5)
    biased, truth = simulate_stack(vol, "axial", 1.5, 3.0, k_sim=8, seed=5,
                                   bias_scale=0.3)
    n1, n2, ns = clean.data.shape
    a = (np.arange(n1) - (n1 - 1) / 2) * 1.5
    b = (np.arange(n2) - (n2 - 1) / 2) * 1.5
    aa, bb = np.meshgrid(a, b, indexing="ij")
    p = np.stack([aa.ravel(), bb.ravel(), np.zeros(aa.size)], axis=1)
    coeffs = np.array(truth["bias_coeffs"])
    half = np.array(truth["bias_half_extent"])
    for i in range(ns):
        centers = clean.transforms[i].apply(p)
        factor = np.exp(bias_log_field(coeffs, half, truth["bias_offset"],
                                       centers))
        want = clean.data[:, :, i].reshape(-1) * factor
        got = biased.data[:, :, i].reshape(-1)
        assert np.max(np.abs(got - want)) < 1e-5
    # the recorded field is roughly mean-zero in log space over the volume
    assert abs(np.mean(bias_log_field(
        coeffs, half, truth["bias_offset"],
        np.random.default_rng(0).uniform(-20, 20, (4000, 3))))) < 0.2


def test_noise_standard_deviation():
    vol = _small_vol()
    clean, _ = simulate_stack(vol, "axial", 1.5, 3.0, k_sim=8, seed=2)
    noisy, truth = simulate_stack(vol, "axial", 1.5, 3.0, k_sim=8, seed=2,
                                  noise_sigma=0.05)
    resid = (noisy.data - clean.data).reshape(-1)
    assert truth["noise_sigma"] == 0.05
    assert abs(float(resid.std()) - 0.05) / 0.05 < 0.10
    assert abs(float(resid.mean())) < 0.005


def test_per_slice_scales_applied():
    vol = _small_vol()
    base, _ = simulate_stack(vol, "axial", 1.5, 3.0, k_sim=8, seed=4)
    scaled, truth = simulate_stack(vol, "axial", 1.5, 3.0, k_sim=8, seed=4,
                                   scale_sigma=0.2)
    scales = np.array(truth["scales"])
    assert scales.std() > 0.02
    for i in range(base.data.shape[2]):
        want = base.data[:, :, i] * scales[i]
        assert np.allclose(scaled.data[:, :, i], want, atol=1e-6)
    assert np.allclose(scaled.scales, scales)


def test_simulation_seeded_and_seed_sensitive():
    vol = _small_vol()
    kw = dict(inplane=1.5, thickness=3.0, k_sim=8, bias_scale=0.2,
              noise_sigma=0.02, motion=MOTION_PRESETS["mild"])
    a1, t1 = simulate_stack(vol, "axial", seed=7, **kw)
    a2, t2 = simulate_stack(vol, "axial", seed=7, **kw)
    b, _ = simulate_stack(vol, "axial", seed=8, **kw)
    assert np.array_equal(a1.data, a2.data)
    assert t1 == t2
    for x, y in zip(a1.transforms, a2.transforms):
        assert np.array_equal(x.to_matrix(), y.to_matrix())
    assert not np.array_equal(a1.data, b.data)


# ---------------------------------------------------------------------------
# motion


def test_no_motion_slices_on_nominal_planes():
    vol = _small_vol()
    st, truth = simulate_stack(vol, "axial", 1.5, 3.0, k_sim=4)
    assert truth["motion"] is None
    ns = st.data.shape[2]
    pitch = 3.0
    for i, t in enumerate(st.transforms):
        z = (i - (ns - 1) / 2) * pitch
        assert np.allclose(t.to_matrix()[:3, :3], np.eye(3), atol=1e-12)
        assert np.allclose(t.to_matrix()[:3, 3], [0, 0, z], atol=1e-12)


def test_motion_steps_bounded_by_rates():
    vol = _small_vol()
    spec = MotionSpec(trans_rate=2.0, rot_rate=5.0, interval=1.0)
    st, _ = simulate_stack(vol, "coronal", 1.5, 3.0, k_sim=4, motion=spec,
                           seed=11)
    mats = [t.to_matrix() for t in st.transforms]
    # consecutive relative motion must respect rate x interval ceilings
    nominal = simulate_stack(vol, "coronal", 1.5, 3.0, k_sim=4)[0].transforms
    walks = [m @ np.linalg.inv(n.to_matrix())
             for m, n in zip(mats, nominal)]
    for w0, w1 in zip(walks[:-1], walks[1:]):
        step = w1 @ np.linalg.inv(w0)
        ang = np.degrees(np.arccos(
            np.clip((np.trace(step[:3, :3]) - 1.0) / 2.0, -1.0, 1.0)))
        assert ang <= 5.0 + 1e-6
        assert np.linalg.norm(step[:3, 3]) <= 2.0 + 1e-6
    moved = max(np.linalg.norm(w[:3, 3]) for w in walks)
    assert moved > 0.1


def test_motion_presets_table():
    assert MOTION_PRESETS["none"] is None
    assert MOTION_PRESETS["mild"].trans_rate == 2.0
    assert MOTION_PRESETS["mild"].rot_rate == 5.0
    assert MOTION_PRESETS["severe"].trans_rate == 21.4
    assert MOTION_PRESETS["severe"].rot_rate == 59.7


# ---------------------------------------------------------------------------
# bundles


def test_bundle_cycles_orientations_and_prefix_is_stable():
    vol = _small_vol()
    two, tr2 = simulate_bundle(vol, 2, inplane=1.5, thickness=3.0,
                               k_sim=4, noise_sigma=0.01, seed=3)
    four, tr4 = simulate_bundle(vol, 4, inplane=1.5, thickness=3.0,
                                k_sim=4, noise_sigma=0.01, seed=3)
    assert [t["orientation"] for t in tr4["stacks"]] == [
        "axial", "coronal", "sagittal", "axial"]
    assert tr4["seed"] == 3
    # stacks are seeded independently: a longer bundle extends, never
    # reshuffles, a shorter one
    for a, b in zip(two, four):
        assert np.array_equal(a.data, b.data)
    assert tr2["stacks"] == tr4["stacks"][:2]
    # the fourth stack is axial again but differently seeded
    assert not np.array_equal(four[0].data, four[3].data)


# ---------------------------------------------------------------------------
# transform perturbation


def test_perturb_zero_sigma_is_identity():
    base = [RigidTransform.from_axis_angle((0.1, 0.2, 0.3), (1.0, -2.0, 3.0))
            for _ in range(4)]
    out = perturb_transforms(base, 0.0, 0.0, rng.derive_key(0, 1))
    for a, b in zip(base, out):
        assert np.allclose(a.to_matrix(), b.to_matrix(), atol=1e-12)


def test_perturb_translation_statistics():
    base = [RigidTransform.identity() for _ in range(300)]
    out = perturb_transforms(base, 1.0, 0.0, rng.derive_key(5, 9))
    d = np.stack([t.to_matrix()[:3, 3] for t in out])
    assert abs(float(d.std()) - 1.0) < 0.15
    # rotation untouched when its sigma is zero
    for t in out:
        assert np.allclose(t.to_matrix()[:3, :3], np.eye(3), atol=1e-12)


def test_perturb_seeded():
    base = [RigidTransform.identity() for _ in range(10)]
    a = perturb_transforms(base, 1.0, 2.0, rng.derive_key(1, 2))
    b = perturb_transforms(base, 1.0, 2.0, rng.derive_key(1, 2))
    c = perturb_transforms(base, 1.0, 2.0, rng.derive_key(1, 3))
    for x, y in zip(a, b):
        assert np.array_equal(x.to_matrix(), y.to_matrix())
    assert not np.allclose(a[0].to_matrix(), c[0].to_matrix())
