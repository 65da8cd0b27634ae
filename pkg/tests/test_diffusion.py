"""Denoising schedule, forward corruption, and the reverse refinement chain."""

import numpy as np
import pytest

from stackrecon import rng
from stackrecon.diffusion import (
    GAMMA_EMBED_DIM,
    NoiseHead,
    Schedule,
    final_step,
    forward_diffuse,
    gamma_embed,
    make_schedule,
    refine,
    reverse_step,
    train_noise_head,
)


# ---------------------------------------------------------------------------
# schedule


def test_schedule_reference_values():
    s = make_schedule(0.001, 10)
    assert s.alphas.shape == (11,)
    assert s.gammas.shape == (11,)
    assert s.alphas[0] == 1.0
    assert s.gammas[0] == 1.0
    # the retention product after ten steps is pinned
    assert abs(s.gammas[10] - 0.94649) < 1e-5
    # per-step factors at displayed precision
    assert round(float(s.alphas[1]), 3) == 0.999
    assert round(float(s.alphas[10]), 3) == 0.990


def test_schedule_single_step():
    s = make_schedule(0.001, 1)
    # one step: the product is the lone factor, which is 1 - alpha0 up to
    # second order in alpha0
    assert s.gammas[1] == s.alphas[1]
    assert abs(s.alphas[1] - (1.0 - 0.001)) < 1e-6


def test_schedule_monotone_and_bounded():
    s = make_schedule(0.003, 40)
    a = s.alphas[1:]
    g = s.gammas[1:]
    assert np.all((a > 0.0) & (a < 1.0))
    assert np.all(np.diff(a) < 0.0)
    assert np.all(np.diff(s.gammas) < 0.0)
    assert np.all((g > 0.0) & (g < 1.0))


def test_schedule_cumprod_identity():
    s = make_schedule(0.002, 25)
    # gamma_i / gamma_{i-1} must reproduce alpha_i near machine precision
    ratios = s.gammas[1:] / s.gammas[:-1]
    assert np.max(np.abs(ratios - s.alphas[1:])) < 1e-12
    assert np.max(np.abs(s.gammas - np.cumprod(s.alphas))) < 1e-12


@pytest.mark.parametrize(
    "alpha0,t",
    [
        (0.0, 10),
        (-0.001, 10),
        (0.1, 10),  # alpha0 >= 1/t
        (0.2, 5),
        (0.001, 0),
        (0.001, -3),
    ],
)
def test_schedule_rejects_bad_parameters(alpha0, t):
    with pytest.raises(ValueError):
        make_schedule(alpha0, t)


def test_schedule_rejects_non_integer_t():
    with pytest.raises(ValueError):
        make_schedule(0.001, 10.5)


# ---------------------------------------------------------------------------
# forward corruption


def test_forward_diffuse_index_range():
    s = make_schedule(0.001, 10)
    v0 = np.zeros((4, 4, 4), dtype=np.float32)
    for i in (0, 11, -1):
        with pytest.raises(ValueError):
            forward_diffuse(v0, s, i, rng.derive_key(0, 1))


def test_forward_diffuse_zero_volume_noise_stats():
    # with v0 = 0 the output is sqrt(1 - gamma_i) * eps, so its variance
    # pins down the noise scale directly
    s = make_schedule(0.001, 10)
    v0 = np.zeros((64, 64, 64), dtype=np.float32)
    vi, eps = forward_diffuse(v0, s, 10, rng.derive_key(3, 44))
    assert vi.dtype == np.float32
    assert eps.shape == v0.shape
    want = 1.0 - s.gammas[10]
    got = float(np.var(vi.astype(np.float64)))
    assert abs(got - want) / want < 0.05
    # eps itself is standard normal
    assert abs(float(np.std(eps.astype(np.float64))) - 1.0) < 0.01
    assert abs(float(np.mean(eps))) < 0.01


def test_forward_diffuse_matches_closed_form():
    s = make_schedule(0.004, 7)
    key = rng.derive_key(9, 2)
    v0 = np.linspace(-1.0, 2.0, 4 * 5 * 6).reshape(4, 5, 6).astype(np.float32)
    vi, eps = forward_diffuse(v0, s, 4, key)
    g = s.gammas[4]
    want = np.sqrt(g) * v0.astype(np.float64) + np.sqrt(1.0 - g) * eps
    assert np.max(np.abs(vi - want.astype(np.float32))) < 1e-6


def test_forward_diffuse_deterministic():
    s = make_schedule(0.001, 10)
    v0 = np.full((8, 8, 8), 0.3, dtype=np.float32)
    a1, e1 = forward_diffuse(v0, s, 5, rng.derive_key(1, 2))
    a2, e2 = forward_diffuse(v0, s, 5, rng.derive_key(1, 2))
    b, _ = forward_diffuse(v0, s, 5, rng.derive_key(1, 3))
    assert np.array_equal(a1, a2)
    assert np.array_equal(e1, e2)
    assert not np.array_equal(a1, b)


def test_forward_diffuse_mean_is_unbiased():
    # across independent draws the mean of v_i is sqrt(gamma_i) v0; check a
    # hundred probe voxels stay within three standard errors almost always
    s = make_schedule(0.001, 10)
    n_seeds = 200
    probes = 100
    v0 = np.linspace(0.0, 1.0, probes).astype(np.float32).reshape(probes, 1, 1)
    acc = np.zeros(probes)
    for seed in range(n_seeds):
        vi, _ = forward_diffuse(v0, s, 10, rng.derive_key(17, seed))
        acc += vi.reshape(probes)
    mean = acc / n_seeds
    g = s.gammas[10]
    se = np.sqrt((1.0 - g) / n_seeds)
    z = np.abs(mean - np.sqrt(g) * v0.reshape(probes)) / se
    assert np.count_nonzero(z < 3.0) >= 97
    # pooled statistic over all probes and seeds
    pooled = np.sum(mean - np.sqrt(g) * v0.reshape(probes)) / (
        se * np.sqrt(probes)
    )
    assert abs(pooled) < 3.0


# ---------------------------------------------------------------------------
# reverse steps


def test_reverse_step_zero_noise_prediction():
    s = make_schedule(0.002, 12)
    vi = np.array([0.25, -1.5, 3.0])
    out = reverse_step(vi, 7, s, np.zeros(3))
    assert np.allclose(out, vi / np.sqrt(s.alphas[7]), rtol=0, atol=1e-12)


def test_reverse_step_undoes_marginal_noise():
    # v_i = sqrt(gamma_i) v0 + sqrt(1-gamma_i) eps; removing the exact noise
    # present must land on sqrt(gamma_{i-1}) v0 plus a shrunken noise term
    s = make_schedule(0.001, 10)
    v0 = np.array([1.0, -2.0, 0.5])
    eps = np.array([0.3, 0.1, -0.7])
    i = 6
    g = s.gammas[i]
    vi = np.sqrt(g) * v0 + np.sqrt(1.0 - g) * eps
    eps_true = (vi - np.sqrt(g) * v0) / np.sqrt(1.0 - g)
    out = reverse_step(vi, i, s, eps_true)
    gp = s.gammas[i - 1]
    coef = np.sqrt(s.alphas[i]) * (1.0 - gp) / np.sqrt(1.0 - g)
    want = np.sqrt(gp) * v0 + coef * eps
    assert np.max(np.abs(out - want)) < 1e-12


def test_final_step_inverts_forward_exactly():
    s = make_schedule(0.001, 10)
    v0 = np.linspace(-0.5, 1.5, 50)
    g1 = s.gammas[1]
    eps = np.sin(np.arange(50.0))
    v1 = np.sqrt(g1) * v0 + np.sqrt(1.0 - g1) * eps
    out = final_step(v1, s, eps)
    assert np.max(np.abs(out - v0)) < 1e-12


def test_single_step_chain_by_hand():
    s = make_schedule(0.01, 1)
    g1 = float(s.gammas[1])
    v0 = np.array([2.0])
    eps = np.array([0.5])
    v1 = np.sqrt(g1) * 2.0 + np.sqrt(1.0 - g1) * 0.5
    got = final_step(np.array([v1]), s, eps)
    assert abs(float(got[0]) - 2.0) < 1e-12


# ---------------------------------------------------------------------------
# gamma embedding and the noise head


def test_gamma_embed_shape_and_values():
    e = gamma_embed(0.5)
    assert e.shape == (GAMMA_EMBED_DIM,)
    f = np.array([1.0, 2.0, 4.0, 8.0]) * np.pi * 0.5
    ref = np.concatenate([np.sin(f), np.cos(f)])
    assert np.allclose(e, ref, atol=1e-6)
    assert np.all(np.isfinite(gamma_embed(0.0)))
    assert np.all(np.isfinite(gamma_embed(1.0)))


def test_noise_head_forward_and_meta_roundtrip():
    head = NoiseHead(feat_dim=6, hidden=32, seed=4)
    z = np.linspace(-1, 1, 5 * 6).reshape(5, 6)
    vi = np.linspace(0, 1, 5)
    v0 = np.linspace(1, 0, 5)
    out = head.predict(z, vi, v0, 0.97)
    assert out.shape == (5,)
    assert np.all(np.isfinite(out))

    clone = NoiseHead.from_meta(head.meta())
    for name, p in head.store.groups.items():
        assert np.array_equal(p.data, clone.store.groups[name].data)
    assert np.array_equal(out, clone.predict(z, vi, v0, 0.97))


def test_noise_head_predict_chunking_consistent():
    head = NoiseHead(feat_dim=4, hidden=16, seed=1)
    m = 1000
    g = np.random.default_rng(0)
    z = g.normal(size=(m, 4))
    vi = g.normal(size=m)
    v0 = g.normal(size=m)
    full = head.predict(z, vi, v0, 0.95)
    small = head.predict(z, vi, v0, 0.95, chunk=37)
    # BLAS may round differently for different matmul shapes, so require
    # agreement only to float32 working precision
    assert small.shape == full.shape
    assert np.allclose(full, small, rtol=0, atol=1e-5)


# ---------------------------------------------------------------------------
# training


def _toy_volume(n=12):
    ax = np.linspace(-1.0, 1.0, n)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    v0 = np.exp(-(x**2 + y**2 + z**2) / 0.3).astype(np.float32)
    feats = np.stack(
        [x, y, z, v0.astype(np.float64)], axis=-1
    ).reshape(-1, 4)
    return feats, v0


def test_train_noise_head_zero_iterations():
    feats, v0 = _toy_volume()
    s = make_schedule(0.001, 10)
    head = NoiseHead(feat_dim=4, hidden=16, seed=0)
    before = {k: p.data.copy() for k, p in head.store.groups.items()}
    trace = train_noise_head(head, feats, v0, s, iterations=0)
    assert trace == []
    for k, p in head.store.groups.items():
        assert np.array_equal(p.data, before[k])


def test_train_noise_head_learns_something():
    feats, v0 = _toy_volume()
    s = make_schedule(0.001, 10)
    head = NoiseHead(feat_dim=4, hidden=32, seed=0)
    trace = train_noise_head(
        head, feats, v0, s, iterations=300, batch=512, lr=1e-3, seed=2
    )
    assert len(trace) == 300
    assert trace[0]["iteration"] == 0
    assert trace[-1]["iteration"] == 299
    # predicting the unit normal target: the zero predictor scores about 1.0
    tail = np.median([r["mse"] for r in trace[-30:]])
    assert np.isfinite(tail)
    assert tail < 1.0


def test_train_noise_head_seeded_repro():
    feats, v0 = _toy_volume(8)
    s = make_schedule(0.001, 5)
    h1 = NoiseHead(feat_dim=4, hidden=16, seed=3)
    h2 = NoiseHead(feat_dim=4, hidden=16, seed=3)
    t1 = train_noise_head(h1, feats, v0, s, iterations=40, batch=128, seed=9)
    t2 = train_noise_head(h2, feats, v0, s, iterations=40, batch=128, seed=9)
    assert t1 == t2
    for k in h1.store.groups:
        assert np.array_equal(h1.store.groups[k].data, h2.store.groups[k].data)


# ---------------------------------------------------------------------------
# refinement chain


def _oracle(vcur, v0f, g, i):
    # the exact noise present in the current state, recoverable because the
    # clean volume is an argument
    return (vcur - np.sqrt(g) * v0f) / np.sqrt(1.0 - g)


def test_refine_oracle_recovers_input():
    s = make_schedule(0.001, 10)
    n = 10
    v0 = np.linspace(0.0, 1.0, n**3).reshape(n, n, n).astype(np.float32)
    z = np.zeros((n**3, 1))
    out = refine(None, z, v0, s, seed=5, head_fn=_oracle)
    scale = float(v0.max())
    rel = np.max(np.abs(out["v0_hat"] - v0)) / scale
    assert rel < 1e-5
    # residual added back on top of the input
    assert np.max(np.abs(out["combined"] - 2.0 * v0)) / scale < 1e-5
    # affine rescale of an exact doubling returns the original range exactly
    r = out["combined_rescaled"]
    assert abs(float(r.min()) - float(v0.min())) < 1e-6
    assert abs(float(r.max()) - float(v0.max())) < 1e-6
    assert np.max(np.abs(r - v0)) / scale < 1e-5
    assert not out["degenerate_range"]


def test_refine_rescale_preserves_target_range():
    # even with a useless predictor the rescaled output must live in the
    # input's intensity range
    s = make_schedule(0.001, 10)
    g = np.random.default_rng(1)
    v0 = g.uniform(0.2, 0.9, size=(6, 6, 6)).astype(np.float32)
    z = np.zeros((216, 1))
    out = refine(
        None, z, v0, s, seed=0, head_fn=lambda vc, v0f, gam, i: np.zeros_like(vc)
    )
    r = out["combined_rescaled"]
    assert abs(float(r.min()) - float(v0.min())) < 1e-6
    assert abs(float(r.max()) - float(v0.max())) < 1e-6


def test_refine_degenerate_constant_volume():
    s = make_schedule(0.001, 10)
    v0 = np.full((5, 5, 5), 0.4, dtype=np.float32)
    z = np.zeros((125, 1))
    out = refine(None, z, v0, s, seed=2, head_fn=_oracle)
    assert out["degenerate_range"]
    # midpoint fill of the collapsed range
    assert np.allclose(out["combined_rescaled"], 0.4, atol=1e-6)
    assert np.all(np.isfinite(out["combined_rescaled"]))


def test_refine_deterministic():
    feats, v0 = _toy_volume(8)
    s = make_schedule(0.001, 10)
    head = NoiseHead(feat_dim=4, hidden=16, seed=0)
    a = refine(head, feats, v0, s, seed=7)
    b = refine(head, feats, v0, s, seed=7)
    c = refine(head, feats, v0, s, seed=8)
    assert np.array_equal(a["v0_hat"], b["v0_hat"])
    assert np.array_equal(a["combined_rescaled"], b["combined_rescaled"])
    assert not np.array_equal(a["v0_hat"], c["v0_hat"])
