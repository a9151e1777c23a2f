"""Acceptance checks, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line (collected again in the pytest
terminal summary). Criteria 6 and 7 train on the 90-cloud synthetic benchmark;
their results are cached under ``.cache/`` keyed by the package sources, so a
cold run takes about an hour on one core and a warm one a few seconds. Set
``CINET_SKIP_BENCHMARK=1`` to skip them.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from cinet import autodiff as ad
from cinet.autodiff import Tensor, check_gradients
from cinet.cli import main
from cinet.geometry import PointCloud, SpatialIndex, farthest_point_sample, knn_query, voxel_downsample
from cinet.gmm import gmm_fit
from cinet.mad import init_mad, mad_forward, mapping_attention
from cinet.metrics import confusion_counts, read_report, report
from cinet.pipeline import (cloud_loss, component_logits, crop_structure, evaluate, intervene_predict,
                            load_checkpoint, save_checkpoint)
from cinet.quality import grid_uniformity, kde_density, quality_vector, scott_bandwidth
from cinet.structural import build_structure, embed_points, encode_groups, encode_structure, init_encoder, point_tokens
from cinet.synthetic import ArtifactSpec, GeneratorConfig, add_normal_noise, apply_scan_artifacts, generate_cloud
from conftest import brute_fps, brute_knn, plate_points, tiny_model, tiny_preps

RESULTS = []

skip_bench = pytest.mark.skipif(os.environ.get("CINET_SKIP_BENCHMARK") == "1", reason="CINET_SKIP_BENCHMARK=1")


def verdict(n: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    RESULTS.append(line)
    assert ok, line


# 1 ---------------------------------------------------------------------------


def _voxel_oracle(pts, labels, size):
    cells = {}
    for p, lab in zip(pts, labels):
        cells.setdefault(tuple(np.floor(p / size).astype(int)), []).append((p, lab))
    return {k: (np.mean([p for p, _ in v], axis=0), int(2 * sum(l for _, l in v) >= len(v))) for k, v in cells.items()}


def _kde_oracle(pts, h):
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    return np.exp(-d2 / (2 * h * h)).sum(axis=1) / (len(pts) * (2 * math.pi) ** 1.5 * h**3)


def test_c1_geometry_oracles():
    t = time.perf_counter()
    fails = []
    for n in (50, 300, 1000):
        rng = np.random.default_rng(n)
        pts = np.round(rng.random((n, 3)) * 8) / 8 if n == 300 else rng.random((n, 3))  # n=300 has ties
        index = SpatialIndex(pts)
        for a in range(0, n, max(1, n // 20)):
            for k in (1, 8, 32):
                idx, dist = knn_query(index, pts[a], k)
                ref_i, ref_d = brute_knn(pts, pts[a], k)
                if not (np.array_equal(idx, ref_i) and np.array_equal(dist, ref_d)):
                    fails.append(f"knn n={n} a={a} k={k}")
        m = min(n, 40) if n <= 300 else 12
        first = int(np.argmax(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))
        if not np.array_equal(farthest_point_sample(pts, m), brute_fps(pts, m, first)):
            fails.append(f"fps n={n}")
        labels = (rng.random(n) < 0.3).astype(int)
        for size in (0.1, 0.35):
            down = voxel_downsample(PointCloud(pts, labels), size)
            ref = _voxel_oracle(pts, labels, size)
            keys = [tuple(np.floor(p / size).astype(int)) for p in down.points]
            ok = down.n_points == len(ref) and all(
                np.allclose(p, ref[k][0], rtol=0, atol=1e-12) and lab == ref[k][1]
                for p, lab, k in zip(down.points, down.labels, keys))
            if not ok:
                fails.append(f"voxel n={n} size={size}")
        pp = plate_points(n, seed=n)
        got, _ = kde_density(PointCloud(pp))
        ref = _kde_oracle(pp, scott_bandwidth(pp))
        rel = float(np.max(np.abs(got - ref) / ref))
        if rel >= 1e-6:
            fails.append(f"kde n={n} rel={rel:.2e}")
    secs = time.perf_counter() - t
    verdict(1, not fails and secs < 30, f"kNN/FPS/voxel exact, KDE rel<1e-6 for n<=1000 in {secs:.1f}s "
                                        f"(limit 30s); mismatches: {fails or 'none'}")


# 2 ---------------------------------------------------------------------------

TRUE_MEANS = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 1.0], [0.0, 3.0, -1.0]])
TRUE_WEIGHTS = np.array([0.5, 0.3, 0.2])


def test_c2_em_monotone_and_recovery():
    monotone, recovered = True, 0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = TRUE_MEANS[rng.choice(3, size=1500, p=TRUE_WEIGHTS)] + 0.4 * rng.standard_normal((1500, 3))
        m = gmm_fit(x, 3, seed=seed, standardize=False)
        monotone &= bool(np.all(np.diff(m.trace) >= -1e-9))
        for K in (1, 2, 4):
            monotone &= bool(np.all(np.diff(gmm_fit(x, K, seed=seed).trace) >= -1e-9))
        rows, cols = linear_sum_assignment(np.linalg.norm(m.means[:, None] - TRUE_MEANS[None], axis=2))
        order = rows[np.argsort(cols)]
        recovered += (np.max(np.abs(m.means[order] - TRUE_MEANS)) <= 0.1
                      and np.max(np.abs(m.weights[order] - TRUE_WEIGHTS)) <= 0.05)
    verdict(2, monotone and recovered >= 2, f"log-likelihood monotone (1e-9): {monotone}; "
                                            f"3-component recovery in {recovered}/3 seeds (need 2)")


# 3 ---------------------------------------------------------------------------


def _op_cases(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    c = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    pos = Tensor(rng.random((3, 4)) + 0.5, requires_grad=True)
    g = Tensor(rng.standard_normal(4), requires_grad=True)
    w = rng.standard_normal((3, 4))
    idx = np.array([2, 0, 0, 1])
    return {
        "add": (lambda: ad.sum(ad.add(a, c) * w), [a, c]),
        "mul": (lambda: ad.sum(ad.mul(a, c) * w), [a, c]),
        "matmul": (lambda: ad.sum(ad.matmul(a, b)), [a, b]),
        "transpose": (lambda: ad.sum(ad.transpose(a) * w.T), [a]),
        "reshape": (lambda: ad.sum(ad.reshape(a, (4, 3)) * w.reshape(4, 3)), [a]),
        "exp": (lambda: ad.sum(ad.exp(a) * w), [a]),
        "log": (lambda: ad.sum(ad.log(pos) * w), [pos]),
        "square": (lambda: ad.sum(ad.square(a) * w), [a]),
        "sigmoid": (lambda: ad.sum(ad.sigmoid(a) * w), [a]),
        "log_sigmoid": (lambda: ad.sum(ad.log_sigmoid(a) * w), [a]),
        "gelu": (lambda: ad.sum(ad.gelu(a) * w), [a]),
        "softmax": (lambda: ad.sum(ad.softmax(a, axis=1) * w), [a]),
        "logsumexp": (lambda: ad.sum(ad.logsumexp(a, axis=0) * w[0]), [a]),
        "sum": (lambda: ad.sum(ad.square(ad.sum(a, axis=0))), [a]),
        "mean": (lambda: ad.sum(ad.square(ad.mean(a, axis=1))), [a]),
        "concat": (lambda: ad.sum(ad.concat([a, c], axis=0) * np.vstack([w, w])), [a, c]),
        "gather": (lambda: ad.sum(ad.square(ad.gather(a, idx, axis=1))), [a]),
        "index": (lambda: ad.sum(ad.square(ad.index(a, (slice(None), idx)))), [a]),
        "layer_norm": (lambda: ad.sum(ad.layer_norm(a, g, g) * w), [a, g]),
    }


def test_c3_finite_difference_checks():
    t = time.perf_counter()
    errs = {}
    for name, (fn, params) in _op_cases(np.random.default_rng(0)).items():
        errs[name] = check_gradients(fn, params)
    s = build_structure(PointCloud(plate_points(512, seed=9)), 16, 32)
    enc = init_encoder(d_model=32, n_heads=4, seed=1, coord_scale=np.array([4.0, 4.0, 30.0]), embed_bias_std=1.0)
    wt = np.random.default_rng(1).standard_normal((512, 32))
    errs["sr_encoder"] = check_gradients(lambda: ad.sum(point_tokens(encode_structure(s, enc), s) * wt),
                                         [p for _, p in enc.named()], max_coords=8)
    mad = init_mad(32, 32, seed=2)
    sig = np.array([[0.3, -0.2, 0.1, -1.0], [1.0, 0.5, -0.5, 0.2]])
    wl = np.random.default_rng(2).standard_normal((2, 512))
    errs["mad_head"] = check_gradients(
        lambda: ad.sum(mad_forward(encode_structure(s, enc), s, sig, mad).logits * wl),
        [p for _, p in mad.named()], max_coords=8)
    preps = tiny_preps(6, n=512, n_groups=16, k=32)
    for mode in ("plugin", "marginalize"):
        m, _ = tiny_model(preps[:4], d_model=32, d_latent=32, n_heads=4, n_groups=16, group_k=32,
                          intervention=mode, embed_bias_std=1.0)
        errs[f"loss_{mode}"] = check_gradients(lambda: cloud_loss(preps[4], m, 5.0, preps[4].n_points),
                                               [p for _, p in m.parameters()], max_coords=4)
    secs = time.perf_counter() - t
    worst = max(errs, key=errs.get)
    verdict(3, errs[worst] < 1e-4 and secs < 120,
            f"{len(errs)} gradient checks, worst {worst} rel err {errs[worst]:.2e} (limit 1e-4), {secs:.1f}s (limit 120s)")


# 4 ---------------------------------------------------------------------------


def test_c4_intervention_identities():
    preps = tiny_preps(6)
    m3, _ = tiny_model(preps[:4], gmm_components=3)
    signals, weights = m3.components(preps[4].quality, "marginalize")
    z = component_logits(preps[4], m3, signals)[0].data
    manual = weights @ ad.sigmoid_np(z)
    d_marg = float(np.max(np.abs(intervene_predict(preps[4], m3, "marginalize").prob - manual)))
    m1, _ = tiny_model(preps[:4], gmm_components=1)
    mu = m1.gmm.means[0] * m1.gmm.scale + m1.gmm.shift
    d_k1 = float(np.max(np.abs(intervene_predict(preps[4], m1, "marginalize").prob
                               - intervene_predict(replace(preps[4], quality=mu), m1, "plugin").prob)))
    verdict(4, d_marg <= 1e-12 and d_k1 <= 1e-12,
            f"marginalize vs weighted sum max diff {d_marg:.1e}; K=1 vs plugin at mu1 {d_k1:.1e} (limit 1e-12)")


# 5 ---------------------------------------------------------------------------


def test_c5_symmetries():
    rng = np.random.default_rng(0)
    s = build_structure(PointCloud(plate_points(256, seed=4)), 8, 16)
    enc = init_encoder(d_model=16, n_heads=2, seed=3, coord_scale=np.array([4.0, 4.0, 30.0]))
    perm = np.stack([rng.permutation(16) for _ in range(8)])
    local = np.take_along_axis(s.groups.local, perm[:, :, None], axis=1)
    d_member = float(np.max(np.abs(encode_structure(s, enc).rows.data - encode_groups(embed_points(local, enc), enc)
                                   .rows.data)))

    pts = np.round(plate_points(256, seed=5) * 1024) / 1024
    a = build_structure(PointCloud(pts), 8, 16)
    b = build_structure(PointCloud(pts + np.array([7.0, -3.0, 2.0])), 8, 16)
    exact_shift = np.array_equal(point_tokens(encode_structure(a, enc), a).data,
                                 point_tokens(encode_structure(b, enc), b).data)

    preps = tiny_preps(6)
    model, _ = tiny_model(preps[:4], gmm_components=3)
    d_group = 0.0
    for prep in preps[4:]:
        permuted, _ = crop_structure(prep.structure, rng.permutation(prep.structure.groups.n_groups))
        for mode in ("plugin", "marginalize"):
            sig, w = model.components(prep.quality, mode)
            pa = w @ ad.sigmoid_np(component_logits(prep, model, sig)[0].data)
            pb = w @ ad.sigmoid_np(component_logits(prep, model, sig, permuted)[0].data)
            d_group = max(d_group, float(np.max(np.abs(pa - pb))))

    simplex = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        _, alpha = mapping_attention(Tensor(r.standard_normal((12, 16)) * 3), r.standard_normal((3, 4)) * 5,
                                     init_mad(16, 16, seed=seed))
        simplex &= bool(np.all(alpha.data >= 0) and np.allclose(alpha.data.sum(axis=1), 1.0, rtol=0, atol=1e-12))
    ok = d_member <= 1e-12 and exact_shift and d_group <= 1e-12 and simplex
    verdict(5, ok, f"member permutation {d_member:.1e}, translation exact {exact_shift}, "
                   f"group order {d_group:.1e} (limits 1e-12), attention on simplex {simplex}")


# 6, 7 ------------------------------------------------------------------------


@skip_bench
def test_c6_end_to_end_benchmark():
    from cinet.experiments import run_benchmark

    r = run_benchmark()
    miou = r["test"]["miou"]
    total = r["train_seconds"] + r["prep_seconds"]
    npts = np.array(r["n_points"])
    ok = miou >= 0.75 and r["epochs"] <= 50 and total < 15 * 60
    verdict(6, ok, f"test mIoU {miou:.4f} (need 0.75) after {r['epochs']} epochs, best val epoch {r['best_epoch']}, "
                   f"{len(npts)} clouds of {npts.mean():.0f} points; wall-clock {total / 60:.1f} min on this "
                   f"machine ({os.cpu_count()} CPU), limit 15 min")


@skip_bench
def test_c7_module_ablation():
    from cinet.experiments import run_variant_ablation

    res = run_variant_ablation()
    mean = {k: float(np.mean(v["miou"])) for k, v in res.items()}
    base, full = mean["baseline"], mean["full"]
    lo, hi = min(base, full) - 0.01, max(base, full) + 0.01
    inside = {k: lo <= mean[k] <= hi for k in ("+SR", "+QA", "+MAD")}
    ok = full >= base + 0.02 and all(inside.values())
    cells = ", ".join(f"{k} {v:.4f}" for k, v in mean.items())
    verdict(7, ok, f"mean test mIoU over 3 seeds: {cells}; full-baseline {full - base:+.4f} (need +0.02); "
                   f"single-module rows within [baseline, full]±0.01: {inside}")


# 8 ---------------------------------------------------------------------------


def test_c8_metrics():
    c = confusion_counts([1, 0, 0, 1, 0, 1], [1, 1, 0, 0, 0, 1])
    r = report(c)
    hand = ((c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 2) and r.iou == {"defect": 0.5, "normal": 0.5} and r.oa == 4 / 6)
    r2 = report(confusion_counts(np.zeros(10), np.r_[1, np.zeros(9)]))
    hand &= r2.iou == {"defect": 0.0, "normal": 0.9} and r2.miou == 0.45
    rng = np.random.default_rng(0)
    assoc, mean_ok = True, True
    for _ in range(200):
        n = rng.integers(1, 6)
        parts = [confusion_counts(rng.integers(0, 2, 50), rng.integers(0, 2, 50)) for _ in range(n)]
        total = report(parts)
        order = rng.permutation(n)
        cut = rng.integers(1, n + 1)
        left = sum((parts[i] for i in order[1:cut]), parts[order[0]])
        merged = sum((parts[i] for i in order[cut:]), left)
        assoc &= report(merged).counts == total.counts and report(merged).miou == total.miou
        mean_ok &= abs(total.miou - np.mean(list(total.iou.values()))) <= 1e-12
    verdict(8, hand and assoc and mean_ok, f"hand-computed matrices exact {hand}, micro aggregation associative "
                                          f"{assoc}, mIoU = mean IoU within 1e-12 {mean_ok}")


# 9 ---------------------------------------------------------------------------

SMALL_GEN = """\
[dataset]
n_clouds = 4
n_train = 2
n_val = 1
n_test = 1
seed = 11

[substrate]
extent_x = 5.0
extent_y = 4.0
pitch = 0.044

[defects]
kinds = bump, hole, stain
"""

TRAIN = ["--epochs", "2", "--d-model", "16", "--lr", "0.003", "--seed", "4", "--jobs", "1", "--set", "n_groups=16",
         "--set", "group_k=16", "--set", "n_heads=2", "--set", "gmm_components=2", "--set", "positive_weight=5"]


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c9_determinism(tmp_path):
    (tmp_path / "gen.ini").write_text(SMALL_GEN)
    for tag in ("a", "b"):
        assert main(["generate", "--config", str(tmp_path / "gen.ini"), "--out", str(tmp_path / f"data_{tag}"),
                     "--jobs", "1"]) == 0
    same_data = _tree(tmp_path / "data_a") == _tree(tmp_path / "data_b")
    data = str(tmp_path / "data_a")
    for tag in ("a", "b"):
        assert main(["train", "--data", data, "--out", str(tmp_path / f"run_{tag}")] + TRAIN) == 0
        assert main(["eval", "--model", str(tmp_path / f"run_{tag}" / "model.ckpt"), "--data", data, "--out",
                     str(tmp_path / f"ev_{tag}"), "--jobs", "1"]) == 0
    same_ckpt = (tmp_path / "run_a/model.ckpt").read_bytes() == (tmp_path / "run_b/model.ckpt").read_bytes()
    same_csv = (tmp_path / "ev_a/metrics.csv").read_bytes() == (tmp_path / "ev_b/metrics.csv").read_bytes()
    model = load_checkpoint(tmp_path / "run_a/model.ckpt")
    save_checkpoint(model, tmp_path / "again.ckpt")
    again = load_checkpoint(tmp_path / "again.ckpt")
    from cinet.synthetic import load_split

    test = load_split(data, "test")
    round_trip = (evaluate(test, model).summary() == evaluate(test, again).summary()
                  and read_report(tmp_path / "ev_a/metrics.csv")["all"]["miou"] == evaluate(test, again).miou)
    ok = same_data and same_ckpt and same_csv and round_trip
    verdict(9, ok, f"bitwise-identical datasets {same_data}, checkpoints {same_ckpt}, eval CSVs {same_csv}; "
                   f"checkpoint round trip preserves metrics {round_trip}")


# 10 --------------------------------------------------------------------------


def test_c10_quality_semantics():
    gen = GeneratorConfig()
    gen.artifacts = ArtifactSpec(occlusion_prob=0.0, blur_rate=0.0)
    occ_spec = ArtifactSpec(occlusion_prob=1.0, blur_rate=0.0)
    occ_wins = noise_wins = 0
    for i in range(20):
        cloud = generate_cloud(gen, i)
        q = quality_vector(cloud)
        occ_wins += grid_uniformity(apply_scan_artifacts(cloud, occ_spec, 100 + i)) < q.uniformity
        noisy = add_normal_noise(cloud, 0.01, 200 + i)
        noise_wins += quality_vector(noisy).integrity < q.integrity
    verdict(10, occ_wins >= 19 and noise_wins >= 19,
            f"occlusion lowers uniformity in {occ_wins}/20, normal noise (sigma 0.01 mm) lowers integrity in "
            f"{noise_wins}/20 (need 19)")
