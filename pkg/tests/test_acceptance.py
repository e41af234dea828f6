"""One test per acceptance criterion; each prints a PASS/FAIL line in the terminal summary."""

import math
import time

import numpy as np
import torch
import pytest

from _oracles import gradient_check, psnr_loop, ssim_windows
from conftest import record_acceptance
from hbenhance.architecture import (
    HBlockSpec, activation_graph, block_peak_memory, build_network, channel_width, count_flops, count_params,
    harmonic_inputs, peak_activation_memory, simulate_liveness, reference_cost, table_rows,
)
from hbenhance.fie import feature_identity_loss, projection_matrix
from hbenhance.metrics import psnr, ssim, to_luma
from hbenhance.network import EnhanceNet
from hbenhance.objective import ObjectiveConfig, charbonnier_loss, charbonnier_per_sample, total_objective
from hbenhance.task_head import load_head
from hbenhance.trainer import AblationConfig, TrainingConfig, ablation_suite, evaluate, train
from hbenhance.weather import (
    HazeParams, SynthConfig, apply_haze, build_paired_dataset, compose_variants, dehaze_known, write_image,
)


def _finish(n, title, ok, detail, t0, budget_s):
    took = time.perf_counter() - t0
    ok = ok and took < budget_s
    record_acceptance(n, title, ok, f"{detail}; {took:.1f}s (budget {budget_s:.0f}s)")
    assert ok, detail


def _within(x, ref, band):
    return abs(x / ref - 1) <= band


def test_01_cost_model_against_published_table():
    t0 = time.perf_counter()
    n33, n71 = build_network("layers33"), build_network("layers71")
    c33, c71 = reference_cost(n33, 1024, 512), reference_cost(n71, 1024, 512)
    ratio = c71["flops_g"] / c33["flops_g"]
    ok = (_within(count_params(n33), 0.11e6, 0.2) and _within(count_params(n71), 0.28e6, 0.2)
          and _within(c33["flops_g"], 57.02, 0.3) and _within(c71["flops_g"], 146.16, 0.3)
          and _within(ratio, 146.16 / 57.02, 0.15))
    full = count_flops(n33, 1024, 512) / 1e9
    detail = (f"params {count_params(n33)}/{count_params(n71)} vs 0.11M/0.28M; GFLOPs (one-stage MAC) "
              f"{c33['flops_g']:.2f}/{c71['flops_g']:.2f} vs 57.02/146.16; ratio {ratio:.3f} vs 2.563; "
              f"layers33 2-FLOP/MAC x3 stages = {full:.1f}G")
    _finish(1, "cost model vs published costs", ok, detail, t0, 1.0)


# transcription of the published 71-layer table: (id, kernel/stride, output channels)
PUBLISHED_ROWS = [("Concat1", None, 6), ("Conv1", (3, 1), 32)]
for _b, (_conv_in, _depth) in enumerate(zip([1, 3, 5, 7, 9], [8, 16, 16, 16, 4])):
    PUBLISHED_ROWS += [(f"HBlock{_b + 1}", (3, 1), 32), (f"Concat{_b + 2}", None, 64),
                       (f"Conv{_conv_in + 1}", (1, 1), 32), (f"Add{_b + 1}", None, 32),
                       (f"Conv{_conv_in + 2}", (3, 1), 3 if _b == 4 else 32)]
PUBLISHED_ROWS.append(("Output", None, 3))


def test_02_architecture_table_conformance():
    t0 = time.perf_counter()
    net = build_network("layers71")
    rows = table_rows(net)
    got = [(r.id, r.info, r.out_channels) for r in rows]
    mismatches = [(g, e) for g, e in zip(got, PUBLISHED_ROWS) if g != e]
    depths = [b.spec.depth_L for b in net.blocks()]
    ok = len(rows) == 28 and not mismatches and depths == [8, 16, 16, 16, 4]
    _finish(2, "layers71 matches the architecture table row by row", ok,
            f"{len(rows)} rows, {len(mismatches)} mismatches, HBlock depths {depths}", t0, 1.0)


def test_03_connectivity_and_width_oracles():
    t0 = time.perf_counter()
    bad = 0
    checked = 0
    for depth in (4, 8, 16):
        for l in range(1, depth + 1):
            expect_in = [l - 2 ** j for j in range(0, 5) if l % (2 ** j) == 0 and l - 2 ** j >= 0]
            n = max(j for j in range(0, 5) if l % (2 ** j) == 0)
            for k in (4, 14, 16, 20, 40):
                raw = k * 1.6 ** n
                lo = 2 * math.floor(raw / 2)
                expect_w = lo + 2 if raw - lo >= 1 else lo
                bad += channel_width(k, l) != expect_w
                checked += 1
            bad += harmonic_inputs(l) != expect_in
            checked += 1
    _finish(3, "harmonic wiring and channel widths vs divisibility oracle", bad == 0,
            f"{checked} cases, {bad} mismatches", t0, 1.0)


@pytest.mark.slow
def test_04_gradients_match_finite_differences():
    t0 = time.perf_counter()
    r = gradient_check(seed=0, dtype=torch.float64)
    ok = r["max_rel_en"] <= 1e-6 and r["max_rel_phi"] <= 1e-6
    _finish(4, "objective gradients vs central differences (float64)", ok,
            f"{r['n_en']} enhancer params max rel err {r['max_rel_en']:.2e}, "
            f"{r['n_phi']} projector params max rel err {r['max_rel_phi']:.2e}", t0, 120.0)


def test_05_loss_unit_suite():
    t0 = time.perf_counter()
    checks = {}
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    checks["charbonnier(x, x) == eps"] = charbonnier_loss(x, x, 5e-3).item() == 5e-3
    e1, e2 = torch.eye(4, dtype=torch.float64)[:1], torch.eye(4, dtype=torch.float64)[1:2]
    checks["FI identical = 0"] = feature_identity_loss(e1, e1).item() == 0.0
    checks["FI orthogonal = 2"] = abs(feature_identity_loss(e1, e2).item() - 2.0) < 1e-12
    checks["FI antipodal = 4"] = abs(feature_identity_loss(e1, -e1).item() - 4.0) < 1e-12
    g = torch.Generator().manual_seed(0)
    a = torch.nn.functional.normalize(torch.randn(256, 128, generator=g, dtype=torch.float64), dim=1)
    b = torch.nn.functional.normalize(torch.randn(256, 128, generator=g, dtype=torch.float64), dim=1)
    fi = feature_identity_loss(a, b)
    checks["FI in [0,4] and = 2-2cos"] = bool((fi >= 0).all() and (fi <= 4).all()
                                             and torch.allclose(fi, 2 - 2 * (a * b).sum(1), atol=1e-12))
    from _oracles import tiny_problem
    net, head, proj, bad, clean, labels, _ = tiny_problem(0)
    t = total_objective(net, head, proj, bad, clean, labels, ObjectiveConfig(alpha=0, beta_fi=0))
    expect = sum(charbonnier_per_sample(o, clean) for o in net(bad)).mean()
    checks["alpha=beta=0 -> summed recovery"] = abs(t.total.item() - expect.item()) < 1e-12
    t = total_objective(net, head, proj, bad, clean, labels, ObjectiveConfig(alpha=0.01, beta_fi=0.1))
    checks["weighted sum"] = abs(t.total.item() - (t.recovery + 0.01 * t.task + 0.1 * t.identity).item()) < 1e-12
    failed = [k for k, v in checks.items() if not v]
    _finish(5, "loss unit suite", not failed, f"{len(checks)} checks, failed: {failed or 'none'}", t0, 10.0)


def test_06_weather_synthesis_suite(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    img = rng.uniform(0.1, 0.9, (64, 64, 3))
    checks = {}
    checks["haze beta=0 identity"] = np.abs(apply_haze(img, HazeParams((0.9, 0.9, 0.9), 0.0)) - img).max() <= 1e-6
    p = HazeParams((0.85, 0.8, 0.9), 2.0)
    checks["known-parameter dehaze round trip"] = np.abs(dehaze_known(apply_haze(img, p), p) - img).max() <= 1e-5
    a, b = compose_variants(img, 11), compose_variants(img, 11)
    checks["bit-identical reruns"] = all(np.array_equal(x[1], y[1]) and x[2].to_dict() == y[2].to_dict()
                                         for x, y in zip(a, b))
    for i in range(3):
        write_image(tmp_path / "clean" / f"c{i}.png", rng.uniform(0, 1, (32, 32, 3)))
    m = build_paired_dataset(tmp_path / "clean", tmp_path / "out", SynthConfig(), seed=0)
    checks["3 clean -> 12 degraded, 4 tags"] = len(m.records) == 12 and len({r.variant_tag for r in m.records}) == 4
    failed = [k for k, v in checks.items() if not v]
    _finish(6, "weather synthesis suite", not failed, f"{len(checks)} checks, failed: {failed or 'none'}", t0, 30.0)


@pytest.mark.slow
def test_07_freeze_law(tmp_path, toy_manifest, toy_head):
    t0 = time.perf_counter()
    head_before = {k: v.clone() for k, v in toy_head.state_dict().items()}
    net = EnhanceNet(build_network("layers33"), seed=123)
    en_before = [p.detach().clone() for p in net.parameters()]
    cfg = TrainingConfig.desk(max_steps=100, seed=5)
    res = train(toy_manifest, net, toy_head, ObjectiveConfig(), cfg, tmp_path)
    head_same = all(torch.equal(v, toy_head.state_dict()[k]) for k, v in head_before.items())
    on_disk = load_head(toy_head.checkpoint_path).state_dict()
    disk_same = all(torch.equal(on_disk[k], toy_head.state_dict()[k]) for k in on_disk
                    if on_disk[k].is_floating_point())
    dims = res.projector.projection_dims
    proj_same = all(np.array_equal(getattr(res.projector, f"proj_{d}").numpy(),
                                   projection_matrix(res.projector.seed, d)) for d in dims)
    en_changed = sum(not torch.equal(a, b) for a, b in zip(en_before, net.parameters()))
    ok = head_same and disk_same and proj_same and en_changed == len(en_before) and res.steps == 100
    _finish(7, "frozen head and projections unchanged, enhancer updated", ok,
            f"{res.steps} steps; head bitwise same {head_same} (vs checkpoint {disk_same}); projections "
            f"{dims} same {proj_same}; enhancer tensors changed {en_changed}/{len(en_before)}", t0, 300.0)


@pytest.mark.slow
def test_08_smoke_training(tmp_path, toy_manifest, toy_head):
    t0 = time.perf_counter()
    net = EnhanceNet(build_network("layers33", recursion_T=3), seed=0)
    res = train(toy_manifest, net, toy_head, ObjectiveConfig(), TrainingConfig.desk(), tmp_path / "run")
    epochs = res.run_log.epochs()
    first, last = epochs[0]["mean_L_R"], epochs[-1]["mean_L_R"]
    rep = evaluate(res.checkpoint, toy_manifest.split("test"), toy_head, out_dir=tmp_path / "eval")
    gain = rep.overall["psnr"] - rep.extra["degraded_psnr"]
    ok = last <= 0.5 * first and gain >= 2.0 and res.steps <= 2000
    _finish(8, "desk smoke training", ok,
            f"{res.steps} steps; epoch-mean L_R {first:.4f} -> {last:.4f} ({100 * (1 - last / first):.0f}% lower); "
            f"held-out PSNR {rep.extra['degraded_psnr']:.2f} -> {rep.overall['psnr']:.2f} dB (+{gain:.2f}); "
            f"task acc {rep.extra['task_accuracy_degraded']:.3f} -> {rep.extra['task_accuracy_enhanced']:.3f}",
            t0, 1800.0)


@pytest.mark.slow
def test_09_directional_ablation(tmp_path, toy_manifest, toy_head):
    t0 = time.perf_counter()
    cfg = AblationConfig(seeds=(0, 1, 2))
    table = ablation_suite(toy_manifest, toy_head, cfg, tmp_path)
    m = {a: table[a]["accuracy_mean"] for a in "abcd"}
    sd = {a: table[a]["accuracy_sd"] for a in "abcd"}
    d_ge_c = m["d"] >= m["c"] - max(sd["c"], sd["d"])
    c_ge_b = m["c"] >= m["b"] - max(sd["b"], sd["c"])
    detail = "; ".join(f"({a}) {m[a]:.3f}±{sd[a]:.3f}" for a in "abcd")
    _finish(9, "ablation ordering d >= c >= b within 1 sd (3 seeds)", d_ge_c and c_ge_b,
            f"task accuracy {detail}; d>=c {d_ge_c}, c>=b {c_ge_b}", t0, 7200.0)


def test_10_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    a, b = rng.uniform(0, 1, (32, 32, 3)), rng.uniform(0, 1, (32, 32, 3))
    analytic = psnr(np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.5))
    checks = {
        "PSNR 6.0206": abs(analytic - 6.0206) <= 1e-3,
        "SSIM self = 1": ssim(a, a) == 1.0,
        "PSNR vs loop": abs(psnr(a, b) - psnr_loop(a, b)) <= 1e-6,
        "SSIM vs windows": abs(ssim(a, b) - ssim_windows(to_luma(a), to_luma(b))) <= 1e-6,
    }
    failed = [k for k, v in checks.items() if not v]
    _finish(10, "PSNR/SSIM oracles", not failed, f"PSNR(0, 0.5) = {analytic:.6f}; failed: {failed or 'none'}",
            t0, 10.0)


def test_11_memory_accounting():
    t0 = time.perf_counter()
    net = build_network("layers33")
    peak, _ = peak_activation_memory(net, 64, 64)
    dense, _ = peak_activation_memory(net, 64, 64, wiring="dense")
    nodes = activation_graph(net)
    produced = {n.name: i for i, n in enumerate(nodes)}
    last_use = dict(produced)
    for i, n in enumerate(nodes):
        for s in n.inputs:
            last_use[s] = i
    size = {n.name: n.channels * 64 * 64 * 4 for n in nodes}
    keep = {"input_bad", nodes[-1].name}
    oracle = max(sum(size[x] for x in size if produced[x] <= t and (x in keep or last_use[x] >= t))
                 for t in range(len(nodes)))
    blk, _ = block_peak_memory(HBlockSpec(8, 14), 64, 64)
    ok = peak < dense and peak == oracle
    _finish(11, "harmonic peak activation memory < dense wiring, equals liveness oracle", ok,
            f"layers33 @64x64: {peak} B vs dense {dense} B, oracle {oracle} B; depth-8 block peak {blk} B",
            t0, 10.0)
