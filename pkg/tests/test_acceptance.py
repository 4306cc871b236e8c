"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line."""

import time
from importlib import resources

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, random_cloud
from oracles import canonical, exact_partition, separated_clusters
from splatfill.config import PipelineConfig, load_config
from splatfill.diffusion import (AfpContext, Condition, NoiseSchedule, afp_blend, ddim_invert,
                                 ddim_sample, self_attention)
from splatfill.losses import l1_grad, l1_loss, tg_sds_grad
from splatfill.metrics import PSNR_CAP, eval_metrics
from splatfill.pipeline import load_cloud, run_pipeline, save_cloud
from splatfill.renderer import PARAM_GROUPS, rasterize, render_backward
from splatfill.scene_io import CameraIntrinsics, CameraPose, View, save_scene
from splatfill.score_models import PointTarget
from splatfill.synthetic import toy_scene
from splatfill.view_select import kmeans
from splatfill.warp import align_depth_least_squares, project_pixels, warp_view

CAM32 = CameraIntrinsics(32, 32, 30.0, 30.0, 15.5, 15.5)
IDENTITY = CameraPose.identity()


def record(n, title, ok, detail, elapsed, limit):
    in_time = elapsed < limit
    status = "PASS" if ok and in_time else "FAIL"
    line = f"{status} criterion {n}: {title} ({detail}; {elapsed:.2f}s / {limit:g}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert in_time, line


# ------------------------------------------------------------------------ 1


def test_criterion_01_renderer_gradients():
    start = time.perf_counter()
    h, rtol, atol = 1e-4, 1e-3, 1e-5
    checked = worst = bad = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cloud = random_cloud(rng, int(rng.integers(1, 11)))
        fwd = rasterize(cloud, IDENTITY, CAM32)
        target = rng.uniform(size=(32, 32, 3))
        # keep every pixel clear of the |.| kink so the stencil sees a smooth loss
        near = np.abs(fwd.color - target) < 0.01
        target = np.where(near, fwd.color + np.where(fwd.color < 0.5, 0.01, -0.01), target)
        grads = render_backward(cloud, IDENTITY, CAM32, l1_grad(fwd.color, target), forward=fwd)
        for name in PARAM_GROUPS:
            arr = getattr(cloud, name)
            for idx in np.ndindex(arr.shape):
                vals = []
                for sgn in (1, -1):
                    c = cloud.copy()
                    getattr(c, name)[idx] += sgn * h
                    out = rasterize(c, IDENTITY, CAM32, structure=fwd.structure)
                    vals.append(l1_loss(out.color, target))
                fd = (vals[0] - vals[1]) / (2 * h)
                err = abs(grads[name][idx] - fd)
                checked += 1
                worst = max(worst, err)
                bad += err > atol + rtol * abs(fd)
    record(1, "renderer gradients vs central differences", bad == 0,
           f"{bad}/{checked} mismatches, worst abs error {worst:.2e}",
           time.perf_counter() - start, 60)


# ------------------------------------------------------------------------ 2


def test_criterion_02_compositing_conservation():
    start = time.perf_counter()
    worst_sum = worst_hull = 0.0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        cloud = random_cloud(rng, int(rng.integers(1, 21)), opacity=(-3.0, 8.0))
        out = rasterize(cloud, IDENTITY, CAM32)
        total = out.weights.sum(axis=0).reshape(32, 32) + out.final_transmittance
        worst_sum = max(worst_sum, float(np.max(np.abs(total - 1.0))))
        pal = np.vstack([cloud.colors, cloud.background])
        below = np.max(pal.min(axis=0) - out.color)
        above = np.max(out.color - pal.max(axis=0))
        worst_hull = max(worst_hull, float(below), float(above))
    ok = worst_sum <= 1e-6 and worst_hull <= 1e-12
    record(2, "weights plus final transmittance sum to one, colours in hull", ok,
           f"max |sum-1| {worst_sum:.1e}, max hull excursion {worst_hull:.1e}",
           time.perf_counter() - start, 30)


# ------------------------------------------------------------------------ 3


def test_criterion_03_attention_propagation_boundaries():
    start = time.perf_counter()
    e0 = e1 = elin = 0.0
    rng = np.random.default_rng(3)
    for _ in range(1000):
        n, m, d, dv, r = (int(x) for x in rng.integers(1, 9, 5))
        Q, K, V = rng.normal(size=(n, d)), rng.normal(size=(m, d)), rng.normal(size=(m, dv))
        refs_k = tuple(rng.normal(size=(int(rng.integers(1, 9)), d)) for _ in range(r))
        refs_v = tuple(rng.normal(size=(len(k), dv)) for k in refs_k)
        lam = float(rng.uniform())
        at = {x: afp_blend(Q, K, V, AfpContext(refs_k, refs_v, x)) for x in (0.0, 1.0, lam)}
        ref_mean = sum(self_attention(Q, k, v) for k, v in zip(refs_k, refs_v)) / r
        e0 = max(e0, float(np.max(np.abs(at[0.0] - self_attention(Q, K, V)))))
        e1 = max(e1, float(np.max(np.abs(at[1.0] - ref_mean))))
        elin = max(elin, float(np.max(np.abs(at[lam] - (lam * at[1.0] + (1 - lam) * at[0.0])))))
    ok = e0 <= 1e-6 and e1 <= 1e-6 and elin <= 1e-9
    record(3, "attention propagation boundaries and linearity", ok,
           f"lambda=0 err {e0:.1e}, lambda=1 err {e1:.1e}, linearity err {elin:.1e}",
           time.perf_counter() - start, 10)


# ------------------------------------------------------------------------ 4


def test_criterion_04_ddim_round_trip():
    start = time.perf_counter()
    schedule = NoiseSchedule()
    x0 = np.random.default_rng(4).uniform(size=(32, 32, 3))
    model = PointTarget(x0, schedule)
    outs = []
    for _ in range(2):
        traj = ddim_invert(x0, 50, model, Condition(), schedule)
        outs.append(ddim_sample(traj[-1].data, 50, model, Condition(), schedule))
    err = float(np.max(np.abs(outs[0] - x0)))
    same = outs[0].tobytes() == outs[1].tobytes()
    record(4, "DDIM invert-then-sample round trip", err < 1e-3 and same,
           f"L-inf error {err:.1e}, bit-identical {same}", time.perf_counter() - start, 10)


# ------------------------------------------------------------------------ 5


def test_criterion_05_warp_oracle():
    start = time.perf_counter()
    intr = CameraIntrinsics(100, 100, 100.0, 100.0, 50.0, 50.0)
    rng = np.random.default_rng(5)
    ref = View(0, intr, IDENTITY, rng.uniform(size=(100, 100, 3)), np.zeros((100, 100), np.uint8))
    closer = CameraPose(np.eye(3), np.array([0.0, 0.0, -1.0]))
    u, v, _ = project_pixels(np.full((100, 100), 2.0), IDENTITY, intr, closer, intr)
    i = 50 * 100 + 60
    mapped = (int(np.floor(u[i] + 0.5)), int(np.floor(v[i] + 0.5)))
    w = warp_view(ref, np.full((100, 100), 2.0), closer, intr)
    exact = mapped == (70, 50) and w.source_index[50, 70] == i

    a = np.deg2rad(5)
    pose = CameraPose(np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]]),
                      np.array([0.2, 0.05, 0.1]))
    depth = 3.0 + 0.01 * np.mgrid[0:100, 0:100][1]
    fwd = warp_view(ref, depth, pose, intr)
    back_u, back_v, _ = project_pixels(np.where(fwd.validity > 0, fwd.warped_depth, 1.0),
                                       pose, intr, IDENTITY, intr)
    src = fwd.source_index.ravel()
    sel = src >= 0
    dist = np.hypot(back_u[sel] - src[sel] % 100, back_v[sel] - src[sel] // 100)
    ok = exact and sel.sum() > 0 and float(dist.max()) <= 1.0
    record(5, "plane warp pixel map and round trip", ok,
           f"(60,50) -> {mapped}, round-trip max {dist.max():.3f} px over {sel.sum()} pixels",
           time.perf_counter() - start, 10)


# ------------------------------------------------------------------------ 6


def test_criterion_06_depth_alignment():
    start = time.perf_counter()
    p = align_depth_least_squares(np.array([1.0, 2, 3]), np.array([3.0, 5, 7]))
    e_exact = max(abs(p.scale - 2), abs(p.shift - 1))
    rng = np.random.default_rng(6)
    mono = rng.uniform(0.5, 4.0, (64, 64))
    q = align_depth_least_squares(mono, 0.5 * mono - 2 + rng.normal(0, 1e-9, mono.shape))
    e_noisy = max(abs(q.scale - 0.5), abs(q.shift + 2))
    record(6, "least-squares depth alignment", e_exact <= 1e-12 and e_noisy <= 1e-6,
           f"exact err {e_exact:.1e}, noisy err {e_noisy:.1e}", time.perf_counter() - start, 1)


# ------------------------------------------------------------------------ 7


def test_criterion_07_tg_sds_support():
    start = time.perf_counter()
    schedule = NoiseSchedule()
    rng = np.random.default_rng(7)
    x = rng.uniform(size=(16, 16, 3))
    # a target far from x keeps every masked pixel's gradient away from zero
    model = PointTarget(1.0 - x, schedule)
    mismatches = 0
    for _ in range(100):
        mask = rng.uniform(size=(16, 16)) < rng.uniform(0.05, 0.95)
        edges, depth, valid = rng.uniform(size=(3, 16, 16))
        g, _ = tg_sds_grad(x, mask, edges > 0.5, depth, valid > 0.3, model,
                           Condition("wall", guidance_scale=7.5), schedule, rng)
        mismatches += int(np.sum(np.any(g != 0, axis=-1) != mask))
    record(7, "TG-SDS gradient support equals the mask", mismatches == 0,
           f"{mismatches} mismatched pixels over 100 masks", time.perf_counter() - start, 10)


# ------------------------------------------------------------------------ 8


def test_criterion_08_kmeans_recovery():
    start = time.perf_counter()
    pts, truth = separated_clusters(8)
    a = kmeans(pts, 3, seed=0)
    b = kmeans(pts, 3, seed=0)
    best, _ = exact_partition(pts, 3)
    exact = canonical(a.labels) == canonical(best) == canonical(truth)
    same = np.array_equal(a.labels, b.labels) and np.array_equal(a.centroids, b.centroids)
    record(8, "k-means matches the exact partition", exact and same,
           f"exact {exact}, deterministic {same}", time.perf_counter() - start, 5)


# ------------------------------------------------------------------------ 9


def test_criterion_09_end_to_end_toy(tmp_path):
    start = time.perf_counter()
    toy = toy_scene()
    scene_dir = tmp_path / "scene"
    save_scene(toy.scene, scene_dir)
    save_cloud(toy.cloud, scene_dir)
    cfg = PipelineConfig()
    assert (cfg.coarse_iters, cfg.fine_iters, cfg.score_model) == (2000, 1000, "point_target")
    run_pipeline(scene_dir, cfg, tmp_path / "out")
    cloud = load_cloud(tmp_path / "out" / "cloud.bin")
    masked, unmasked = [], []
    for v in toy.scene.views:
        img = rasterize(cloud, v.pose, v.intrinsics).color
        masked.append(l1_loss(img, toy.oracle_targets[v.id], v.mask))
        rep = eval_metrics({0: img}, {0: toy.source_renders[v.id]}, {0: 1 - v.mask})
        unmasked.append(rep.views[0].masked_psnr)
    ok = max(masked) < 0.05 and min(unmasked) > 30.0
    record(9, "end-to-end toy pipeline", ok,
           f"worst masked L1 {max(masked):.4f}, worst unmasked PSNR {min(unmasked):.2f} dB",
           time.perf_counter() - start, 600)


# ----------------------------------------------------------------------- 10


def test_criterion_10_default_config():
    start = time.perf_counter()
    cfg = load_config()
    values = (cfg.lambda_a, cfg.k_clusters, cfg.guidance_scale, cfg.cond_scale_depth,
              cfg.cond_scale_texture, cfg.lambda_dssim)
    text = (resources.files("splatfill") / "data" / "default.cfg").read_text()
    wanted = ["lambda_a = 0.6", "k_clusters = 3", "guidance_scale = 7.5", "cond_scale_depth = 1.0",
              "cond_scale_texture = 0.8", "lambda_dssim = 0.2"]
    lines = set(text.splitlines())
    ok = values == (0.6, 3, 7.5, 1.0, 0.8, 0.2) and all(w in lines for w in wanted)
    record(10, "default configuration values", ok, f"loaded {values}", time.perf_counter() - start, 1)


# ----------------------------------------------------------------------- 11


def test_criterion_11_metrics():
    start = time.perf_counter()
    img = np.random.default_rng(11).uniform(0.0, 0.9, (32, 32, 3))
    same = eval_metrics({0: img}, {0: img}).views[0]
    off = eval_metrics({0: img + 0.1}, {0: img}).views[0]
    ok = same.ssim == pytest.approx(1.0, abs=1e-12) and same.psnr == PSNR_CAP and abs(off.psnr - 20.0) <= 0.01
    record(11, "metric sanity", ok, f"ssim {same.ssim:.12f}, psnr {same.psnr}, offset psnr {off.psnr:.4f}",
           time.perf_counter() - start, 5)
