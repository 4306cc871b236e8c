import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatfill.diffusion import (AfpContext, Condition, NoiseSchedule, afp_blend, ddim_invert,
                                 ddim_sample, guided_noise, inpaint_multiview, inpaint_view,
                                 self_attention, softmax)
from splatfill.errors import NumericError, ValidationError
from splatfill.score_models import PointTarget, TinyAttentionUNet

SCHED = NoiseSchedule()


# ----------------------------------------------------------------- schedule


def test_schedule_matches_direct_product():
    betas = np.linspace(1e-4, 0.02, 1000)
    ab = [1.0]
    for b in betas:
        ab.append(ab[-1] * (1 - b))
    np.testing.assert_allclose(SCHED.alpha_bar, ab, rtol=1e-12)
    assert SCHED.alpha_bar[0] == 1.0
    assert np.all(np.diff(SCHED.alpha_bar) < 0)
    assert np.all(SCHED.alpha_bar > 0)


def test_timesteps():
    ts = SCHED.timesteps(50)
    assert ts[0] == 20 and ts[-1] == 1000 and len(ts) == 50
    assert np.all(np.diff(ts) > 0)
    assert SCHED.timesteps(1).tolist() == [1000]
    with pytest.raises(ValidationError):
        SCHED.timesteps(0)


# ---------------------------------------------------------------- attention


def test_single_key_returns_value():
    V = np.array([[0.3, -2.0, 5.0]])
    out = self_attention(np.random.default_rng(0).normal(size=(4, 2)), np.array([[1.0, 2.0]]), V)
    np.testing.assert_allclose(out, np.repeat(V, 4, axis=0))


def test_equal_logits_average_values():
    K = np.array([[1.0, 0.0], [1.0, 0.0]])
    V = np.array([[1.0, 2.0], [3.0, 6.0]])
    np.testing.assert_allclose(self_attention(np.array([[0.7, 0.1]]), K, V), [[2.0, 4.0]])


def test_attention_brute_force():
    rng = np.random.default_rng(4)
    Q = rng.integers(-3, 4, (2, 2)).astype(float)
    K = rng.integers(-3, 4, (3, 2)).astype(float)
    V = rng.integers(-3, 4, (3, 2)).astype(float)
    expected = np.zeros((2, 2))
    for i in range(2):
        logits = [sum(Q[i, c] * K[j, c] for c in range(2)) / np.sqrt(2) for j in range(3)]
        w = [np.exp(x) for x in logits]
        expected[i] = sum(w[j] * V[j] for j in range(3)) / sum(w)
    np.testing.assert_allclose(self_attention(Q, K, V, 2), expected, rtol=1e-12)


def test_attention_shape_errors():
    with pytest.raises(ValidationError):
        self_attention(np.ones((2, 3)), np.ones((4, 2)), np.ones((4, 2)))
    with pytest.raises(ValidationError):
        self_attention(np.ones((2, 2)), np.ones((4, 2)), np.ones((3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_softmax_rows_and_hull(seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=30, size=(5, 7))
    assert np.allclose(softmax(logits).sum(axis=1), 1.0, atol=1e-9)
    V = rng.normal(size=(7, 3))
    out = self_attention(rng.normal(size=(5, 4)), rng.normal(size=(7, 4)), V)
    assert np.all(out >= V.min(axis=0) - 1e-12) and np.all(out <= V.max(axis=0) + 1e-12)


def _ctx(rng, n_refs, lam, n=6, d=4):
    keys = tuple(rng.normal(size=(n, d)) for _ in range(n_refs))
    vals = tuple(rng.normal(size=(n, d)) for _ in range(n_refs))
    return AfpContext(keys, vals, lam)


def test_afp_boundaries():
    rng = np.random.default_rng(0)
    Q, K, V = (rng.normal(size=(6, 4)) for _ in range(3))
    ctx0 = _ctx(rng, 2, 0.0)
    np.testing.assert_array_equal(afp_blend(Q, K, V, ctx0), self_attention(Q, K, V))
    ctx1 = AfpContext(ctx0.reference_keys, ctx0.reference_values, 1.0)
    mean = sum(self_attention(Q, k, v) for k, v in zip(ctx1.reference_keys, ctx1.reference_values)) / 2
    np.testing.assert_allclose(afp_blend(Q, K, V, ctx1), mean, atol=1e-12)
    same = AfpContext((K,), (V,), 0.6)
    np.testing.assert_allclose(afp_blend(Q, K, V, same), self_attention(Q, K, V), atol=1e-12)


def test_afp_validation():
    with pytest.raises(ValidationError):
        AfpContext((), (), 0.5)
    with pytest.raises(ValidationError):
        AfpContext((np.ones((2, 2)),), (np.ones((2, 2)),), 1.5)
    ctx = AfpContext((np.ones((3, 5)),), (np.ones((3, 2)),), 0.5)
    with pytest.raises(ValidationError):
        afp_blend(np.ones((2, 2)), np.ones((3, 2)), np.ones((3, 2)), ctx)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_afp_linear_in_lambda(seed, lam):
    rng = np.random.default_rng(seed)
    Q, K, V = (rng.normal(size=(6, 4)) for _ in range(3))
    base = _ctx(rng, 3, lam)
    at = {x: afp_blend(Q, K, V, AfpContext(base.reference_keys, base.reference_values, x))
          for x in (0.0, 1.0, lam)}
    assert np.allclose(at[lam], lam * at[1.0] + (1 - lam) * at[0.0], atol=1e-9)


# --------------------------------------------------------------------- DDIM


class ShiftedNoise:
    """Returns ``base + c`` independent of the input, for guidance algebra checks."""

    def __init__(self, table):
        self.table = table

    def predict_noise(self, latent, t, cond, afp=None, capture=None):
        return np.full(np.shape(latent), self.table[cond.text])


def test_guidance_combination():
    m = ShiftedNoise({"pos": 2.0, "neg": 0.5})
    x = np.zeros((2, 2, 3))
    c = Condition("pos", "neg", guidance_scale=7.5)
    np.testing.assert_allclose(guided_noise(m, x, 10, c), 0.5 + 7.5 * 1.5)
    np.testing.assert_array_equal(guided_noise(m, x, 10, c.replace(guidance_scale=1.0)), 2.0)


def test_inversion_closed_form_point_target():
    x0 = np.random.default_rng(0).uniform(size=(8, 8, 3))
    model = PointTarget(x0, SCHED)
    traj = ddim_invert(x0, 50, model, Condition(), SCHED)
    ab = SCHED.alpha_bar
    eps = (traj[1].data - np.sqrt(ab[traj[1].t]) * x0) / np.sqrt(1 - ab[traj[1].t])
    for lat in traj[1:]:
        x0_hat = (lat.data - np.sqrt(1 - ab[lat.t]) * eps) / np.sqrt(ab[lat.t])
        np.testing.assert_allclose(x0_hat, x0, atol=1e-12)
    np.testing.assert_allclose(traj[-1].data, np.sqrt(ab[1000]) * x0 + np.sqrt(1 - ab[1000]) * eps,
                               atol=1e-12)
    assert [lat.t for lat in traj] == [0] + SCHED.timesteps(50).tolist()


def test_single_step_inversion_by_substitution():
    x0 = np.random.default_rng(1).uniform(size=(4, 4, 3))
    target = np.random.default_rng(2).uniform(size=(4, 4, 3))
    model = PointTarget(target, SCHED)
    traj = ddim_invert(x0, 1, model, Condition(), SCHED)
    ab = SCHED.alpha_bar[1000]
    eps = (x0 - np.sqrt(ab) * target) / np.sqrt(1 - ab)
    np.testing.assert_allclose(traj[1].data, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps, atol=1e-12)


def test_round_trip_and_determinism():
    x0 = np.random.default_rng(3).uniform(size=(32, 32, 3))
    model = PointTarget(x0, SCHED)
    runs = []
    for _ in range(2):
        traj = ddim_invert(x0, 50, model, Condition(), SCHED)
        runs.append(ddim_sample(traj[-1].data, 50, model, Condition(), SCHED))
    assert np.max(np.abs(runs[0] - x0)) < 1e-3
    assert runs[0].tobytes() == runs[1].tobytes()


def test_inpaint_mask_all_zero_keeps_input():
    img = np.random.default_rng(4).uniform(size=(16, 16, 3))
    model = PointTarget(np.full_like(img, 0.5), SCHED)
    cond = Condition(mask=np.zeros((16, 16)))
    out = inpaint_view(img, 50, model, cond, SCHED)
    assert np.max(np.abs(out - img)) < 1e-3


def test_inpaint_mask_all_one_reaches_target():
    img = np.random.default_rng(5).uniform(size=(16, 16, 3))
    target = np.random.default_rng(6).uniform(size=(16, 16, 3))
    out = inpaint_view(img, 50, PointTarget(target, SCHED), Condition(mask=np.ones((16, 16))), SCHED)
    assert np.max(np.abs(out - target)) < 1e-3


def test_inpaint_known_region_preserved():
    rng = np.random.default_rng(7)
    img = rng.uniform(size=(16, 16, 3))
    mask = (rng.uniform(size=(16, 16)) > 0.6).astype(float)
    target = np.where(mask[..., None] > 0, 0.5, img)
    out = inpaint_view(img, 50, PointTarget(np.full_like(img, 0.5), SCHED), Condition(mask=mask), SCHED)
    assert np.max(np.abs(out - target)) < 1e-3


def test_non_finite_latent_raises():
    class Exploding:
        def predict_noise(self, latent, t, cond, afp=None, capture=None):
            return np.full(np.shape(latent), np.inf)
    with pytest.raises(NumericError, match="timestep"):
        ddim_invert(np.zeros((2, 2, 3)), 5, Exploding(), Condition(), SCHED)


def test_known_trajectory_length_checked():
    x = np.zeros((2, 2, 3))
    traj = ddim_invert(x, 5, PointTarget(x, SCHED), Condition(), SCHED)
    with pytest.raises(ValidationError):
        ddim_sample(x, 6, PointTarget(x, SCHED), Condition(mask=np.ones((2, 2))), SCHED, known=traj)


# -------------------------------------------------------------- multi-view


def _two_views(seed=0, size=10, noise=0.05):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.8, (size, size, 3))
    other = np.clip(base + rng.normal(0, noise, base.shape), 0, 1)
    mask = np.zeros((size, size))
    mask[3:7, 3:7] = 1
    return {0: base, 1: other}, {0: mask, 1: mask}


def test_single_view_equals_plain_inpainting():
    rendered, masks = _two_views()
    model = TinyAttentionUNet(schedule=SCHED)
    out = inpaint_multiview({0: rendered[0]}, {0: masks[0]}, [0], model, SCHED, 10, 0.6,
                            text="a vase")
    plain = inpaint_view(rendered[0], 10, model, Condition("a vase", mask=masks[0], view_id=0), SCHED)
    assert out[0].tobytes() == plain.tobytes()


def test_lambda_zero_is_bit_identical_to_no_afp():
    rendered, masks = _two_views()
    model = TinyAttentionUNet(schedule=SCHED)
    out = inpaint_multiview(rendered, masks, [0], model, SCHED, 10, 0.0, "cake", "can", 7.5)
    cond = Condition("cake", "can", mask=masks[1], guidance_scale=7.5, view_id=1)
    plain = inpaint_view(rendered[1], 10, model, cond, SCHED)
    assert out[1].tobytes() == plain.tobytes()


def test_afp_improves_consistency_between_similar_views():
    # identical inputs would agree at any lambda, so the second view is lightly perturbed
    rendered, masks = _two_views(size=12)
    model = TinyAttentionUNet(schedule=SCHED)
    diffs = {}
    for lam in (0.0, 1.0):
        out = inpaint_multiview(rendered, masks, [0], model, SCHED, 20, lam, "cake", "can", 7.5)
        diffs[lam] = np.abs(out[0] - out[1])[masks[0] > 0].mean()
    assert diffs[1.0] < diffs[0.0]


def test_all_references_feed_pass_two():
    seen = []

    def hook(features, block):
        seen.append(block)
        return features

    rendered, masks = _two_views(size=8)
    rendered[2] = rendered[1][::-1].copy()
    masks[2] = masks[1]
    model = TinyAttentionUNet(schedule=SCHED)
    out = inpaint_multiview(rendered, masks, [0, 2], model, SCHED, 5, 0.6, "x", clip_image_hook=hook)
    assert sorted(out) == [0, 1, 2]
    assert seen and set(seen) == {0, 1}
    with pytest.raises(ValidationError):
        inpaint_multiview(rendered, masks, [5], model, SCHED, 5, 0.6)
