"""Acceptance criteria A1-A12, one pass/fail line each.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are
repeated in the "acceptance criteria" section of the terminal summary.
A3 and A11 train models and take several minutes on one CPU core.
"""

import csv
import json
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest
import torch

from sense.backbone import BackboneConfig
from sense.cli import main
from sense.crf import CRFConfig, crf_refine
from sense.dataset import _as_loaded, synth_corpus
from sense.disparity import read_disparity_file, synthetic_disparity, write_dsp1, write_pfm
from sense.evaluation import average_precision, binary_iou, evaluate_referring, referring_miou
from sense.model import ModelConfig, SenseModel, count_parameters
from sense.sdaf import SDAF, normalize_disparity, sdaf_refine
from sense.sief import SIEF
from sense.tiling import Accumulators, accumulate, cosine_blend_mask, plan_tiles, reconstruct, tiled_probabilities
from sense.training import TrainConfig, fit, load_checkpoint, make_checkpoint, restore_model, save_checkpoint

OVERFIT_SEEDS = (0, 1, 2)
OVERFIT_LR = 1e-2


# -- A1 / A2: SIEF -----------------------------------------------------------


def test_a1_sief_normalization(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst, lo, hi = 0.0, 1.0, 0.0
    for draw in range(1000):
        torch.manual_seed(draw)
        m = SIEF(32, 64, sf=16)
        n = int(rng.integers(1, 50))
        scale = float(10 ** rng.uniform(-2, 2))
        with torch.no_grad():
            w = m.fusion_weights(scale * torch.randn(n, 32), scale * torch.randn(n, 32))
        worst = max(worst, float((w.w_left + w.w_right - 1).abs().max()))
        lo, hi = min(lo, float(w.w_left.min())), max(hi, float(w.w_left.max()))
    dt = time.perf_counter() - t0
    ok = worst < 1e-6 and lo >= 0 and hi <= 1 and dt < 10
    acceptance("A1", ok, f"SIEF normalization: max|W_L+W_R-1|={worst:.2e}, W_L in [{lo:.3f}, {hi:.3f}], "
                         f"1000 draws in {dt:.1f} s")


def test_a2_identity_view(acceptance):
    eps = np.finfo(np.float64).eps
    worst = 0.0
    for draw in range(100):
        torch.manual_seed(10_000 + draw)
        m = SIEF(32, 64, sf=16).double()
        f = torch.randn(int(draw % 17) + 1, 32, dtype=torch.float64) * 10 ** (draw % 5 - 2)
        with torch.no_grad():
            out = m.fuse_raw(f, f)
        worst = max(worst, float(((out - f).abs() / f.abs().clamp_min(1e-300)).max()))
    # a convex combination of two equal values is exact up to two roundings
    ok = worst <= 4 * eps
    acceptance("A2", ok, f"identity-view fusion: max relative deviation {worst:.2e} (<= 4 ulp = {4 * eps:.1e}), "
                         f"100 draws")


# -- A3 / A10: overfit runs --------------------------------------------------


@pytest.fixture(scope="module")
def overfit_runs(tmp_path_factory):
    runs = []
    for seed in OVERFIT_SEEDS:
        samples = _as_loaded(synth_corpus(8, 352, seed, tmp_path_factory.mktemp(f"overfit{seed}")))
        cfg = TrainConfig(batch_size=8, total_steps=300, negative_fraction=0.0, seed=seed, lr=OVERFIT_LR)
        model = SenseModel(cfg.model_config())
        digest_before = model.backbone.parameter_digest()
        t0 = time.perf_counter()
        result = fit(model, samples, cfg, fixed_batch=True)
        elapsed = time.perf_counter() - t0
        runs.append(dict(seed=seed, model=model, cfg=cfg, samples=samples, result=result, seconds=elapsed,
                         miou=evaluate_referring(model, samples).miou, digest_before=digest_before,
                         digest_after=model.backbone.parameter_digest()))
    return runs


def test_a3_toy_overfit(acceptance, overfit_runs):
    mious = [r["miou"] for r in overfit_runs]
    ratios = [r["result"].losses[-1] / r["result"].losses[0] for r in overfit_runs]
    secs = [r["seconds"] for r in overfit_runs]
    ok = statistics.median(mious) > 0.9 and statistics.median(ratios) < 0.1 and max(secs) < 300
    acceptance("A3", ok, f"toy overfit (8 samples, 352 px, 300 steps, lr {OVERFIT_LR:g}): median mIoU "
                         f"{statistics.median(mious):.3f} {[round(m, 3) for m in mious]}, median final/initial loss "
                         f"{statistics.median(ratios):.4f}, per-seed time {[round(s) for s in secs]} s "
                         f"(total {sum(secs):.0f} s)")


def test_a10_frozen_contract(acceptance, overfit_runs, tmp_path):
    run = overfit_runs[0]
    same_hash = all(r["digest_before"] == r["digest_after"] for r in overfit_runs)
    model = run["model"]
    path = tmp_path / "ckpt.pt"
    save_checkpoint(make_checkpoint(model, run["cfg"], run["result"].state), path)
    restored = restore_model(load_checkpoint(path))
    deltas = []
    for s in run["samples"][:4]:
        a = model.predict_logits(s.left, s.right, [s.phrase, "background"], s.disparity)
        b = restored.predict_logits(s.left, s.right, [s.phrase, "background"], s.disparity)
        deltas.append(float(np.abs(a - b).max()))
    ok = same_hash and max(deltas) == 0
    acceptance("A10", ok, f"frozen contract: backbone SHA-256 unchanged over 300 steps x {len(overfit_runs)} seeds "
                          f"= {same_hash}; checkpoint round-trip max|dlogits| = {max(deltas):g}")


# -- A4: gradients -------------------------------------------------------------


def test_a4_gradient_correctness(acceptance):
    torch.manual_seed(0)
    cfg = ModelConfig(backbone=BackboneConfig(input_resolution=32), embed_dim=4, decoder_heads=1, mlp_ratio=1,
                      up_width=1, gate_hidden=2, sf=16)
    model = SenseModel(cfg).double()
    n_params = count_parameters(model)
    gen = torch.Generator().manual_seed(1)
    feats = [tuple(torch.randn(1, 5, 32, generator=gen, dtype=torch.float64) for _ in range(2)) for _ in range(3)]
    text = torch.randn(1, 32, generator=gen, dtype=torch.float64)
    # piecewise-constant disparity keeps every gate ReLU input away from its kink, where a
    # central difference would straddle a point with no derivative
    disp = torch.from_numpy(synthetic_disparity((32, 32), "planes", seed=1).values.astype(np.float64))[None]
    target = (torch.rand(1, 32, 32, generator=gen) > 0.5).double()

    def loss():
        return torch.nn.functional.binary_cross_entropy_with_logits(model.head(feats, text, disp), target)

    kinks = []
    hooks = [g.conv1.register_forward_hook(lambda m, i, o: kinks.append(float(o.abs().min())))
             for g in (model.sdaf.gate_low, model.sdaf.gate_high)]
    with torch.no_grad():
        loss()
    for hk in hooks:
        hk.remove()
    params = list(model.parameters())
    grads = torch.autograd.grad(loss(), params)
    h, worst, checked = 1e-4, 0.0, 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            for flat in range(p.numel()):
                i = np.unravel_index(flat, p.shape)
                old = float(p[i])
                p[i] = old + h
                up = float(loss())
                p[i] = old - h
                down = float(loss())
                p[i] = old
                num, ana = (up - down) / (2 * h), float(g[i])
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-6))
                checked += 1
    # normalized disparity is <= 1, so one step moves a gate ReLU input by at most h
    margin = min(kinks)
    ok = n_params <= 5000 and margin > 10 * h and worst < 1e-4
    acceptance("A4", ok, f"gradient check: {checked} parameters ({n_params} total, float64, step {h:g}), "
                         f"max relative error {worst:.2e}; min |ReLU input| {margin:.3f}")


# -- A5: tiling ------------------------------------------------------------------


def test_a5_tiling_reconstruction(acceptance):
    H = W = 704
    patch = 352
    plan = plan_tiles(H, W, patch)
    left = np.zeros((H, W, 3), np.uint8)
    const = tiled_probabilities(left, left, ["a"], lambda l, r, p, d: np.full((1, patch, patch), 0.37), patch)
    const_err = float(np.abs(const - 0.37).max())

    rng = np.random.default_rng(0)
    preds = {w: rng.random((patch, patch)) for w in plan.windows}
    mask = cosine_blend_mask(patch, patch)
    acc = Accumulators.zeros((H, W))
    for w in plan.windows:
        accumulate(acc, preds[w], w, mask)
    min_weight = float(acc.A_W.min())
    base = reconstruct(acc)
    perm_err = 0.0
    for k in range(3):
        acc2 = Accumulators.zeros((H, W))
        for i in np.random.default_rng(k).permutation(len(plan)):
            accumulate(acc2, preds[plan.windows[i]], plan.windows[i], mask)
        perm_err = max(perm_err, float(np.abs(reconstruct(acc2) - base).max()))

    # brute-force per-pixel weighted mean on every border pixel plus a random sample
    ys = np.r_[np.zeros(W, int), np.full(W, H - 1), np.arange(H), np.arange(H), rng.integers(0, H, 3000)]
    xs = np.r_[np.arange(W), np.arange(W), np.zeros(H, int), np.full(H, W - 1), rng.integers(0, W, 3000)]
    oracle_err = 0.0
    for py, px in zip(ys, xs):
        num = den = 0.0
        for (y, x), p in preds.items():
            if y <= py < y + patch and x <= px < x + patch:
                m = mask[py - y, px - x]
                num += m * p[py - y, px - x]
                den += m
        oracle_err = max(oracle_err, abs(num / den - base[py, px]))
    ok = len(plan) == 9 and const_err < 1e-6 and min_weight > 0 and perm_err < 1e-6 and oracle_err < 1e-12
    acceptance("A5", ok, f"tiling: {len(plan)} windows; constant error {const_err:.1e}; min A_W {min_weight:.1e}; "
                         f"order change {perm_err:.1e}; brute-force oracle error {oracle_err:.1e} "
                         f"on {len(ys)} pixels")


# -- A6: shapes ---------------------------------------------------------------------


def test_a6_shape_contracts(acceptance):
    found = []
    for res, variant in ((352, "two-layer"), (512, "two-layer"), (352, "three-layer")):
        model = SenseModel(ModelConfig(backbone=BackboneConfig(input_resolution=res), sdaf_variant=variant)).eval()
        shapes = {}

        def record(name):
            def hook(module, inputs, output):
                shapes[name] = tuple(output.shape[-2:])
            return hook

        model.decoder.register_forward_hook(record("grid"))
        if variant == "three-layer":
            model.sdaf.upsample[0].register_forward_hook(record("mid"))
        x = torch.zeros(1, 3, res, res)
        with torch.no_grad():
            feats = model.encode_pair(x, x)
            out = model.head(feats, model.encode_prompts(["car"]), torch.zeros(1, res, res))
        g = res // 16
        tokens = tuple(feats[0][0].shape[1:2])
        ok = tokens == (1 + g * g,) and shapes["grid"] == (g, g) and tuple(out.shape) == (1, res, res)
        if variant == "three-layer":
            ok = ok and shapes["mid"] == (88, 88)
        found.append((ok, f"{res}/{variant}: {tokens[0]} tokens -> {g}x{g} -> "
                          f"{'88x88 -> ' if variant == 'three-layer' else ''}{out.shape[-2]}x{out.shape[-1]}"))
    acceptance("A6", all(ok for ok, _ in found), "shape contracts: " + "; ".join(d for _, d in found))


# -- A7: disparity --------------------------------------------------------------------


def test_a7_disparity_normalization(acceptance, tmp_path):
    norm = normalize_disparity(np.array([0.0, 96.0, 192.0], dtype=np.float32)).tolist()
    sdaf = SDAF(64, 16).eval()
    grid = torch.randn(64, 22, 22)
    synth = synthetic_disparity((352, 352), "random-smooth", seed=3)
    write_pfm(tmp_path / "d.pfm", synth.values)
    write_dsp1(tmp_path / "d.dsp", synth.values)
    with torch.no_grad():
        ref = sdaf_refine(grid, synth, sdaf)
        same = [torch.equal(sdaf_refine(grid, read_disparity_file(tmp_path / n, (352, 352)), sdaf), ref)
                for n in ("d.pfm", "d.dsp")]
    ok = norm == [0.0, 0.5, 1.0] and all(same)
    acceptance("A7", ok, f"disparity normalization {{0, 96, 192}} -> {norm}; SDAF output bitwise equal for "
                         f"PFM/DSP1 vs synthetic: {same}")


# -- A8: CRF ------------------------------------------------------------------------------


def test_a8_crf_behaviour(acceptance):
    rng = np.random.default_rng(0)
    n = 32
    truth = np.zeros((n, n), int)
    truth[:, n // 2:] = 1
    guide = np.where(truth[..., None] == 1, 200.0, 40.0) * np.ones(3)
    noisy = truth.copy()
    flips = [(5, 5), (9, 24), (20, 8), (26, 27), (14, 12), (3, 20)]
    for y, x in flips:
        noisy[y, x] = 1 - noisy[y, x]
    probs = np.where(noisy[..., None] == np.arange(2), 0.8, 0.2)
    out = crf_refine(probs, guide)
    fixed = all(out[y, x].argmax() == truth[y, x] for y, x in flips)
    clean = bool(np.array_equal(out.argmax(-1), truth))

    logits = rng.normal(size=(40, 40, 5))
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    g = rng.integers(0, 255, (40, 40, 3)).astype(np.float64)
    cons = max(float(np.abs(crf_refine(p, g, CRFConfig(method=m)).sum(-1) - 1).max()) for m in ("exact", "lattice"))
    ident = np.array_equal(crf_refine(p, g, CRFConfig(gauss_weight=0, bilateral_weight=0)), p)
    ok = fixed and clean and cons < 1e-5 and ident
    acceptance("A8", ok, f"CRF: {len(flips)} salt-and-pepper pixels restored = {fixed} (whole map = {clean}); "
                         f"max|sum-1| = {cons:.1e}; zero-weight identity = {ident}")


# -- A9: metrics -------------------------------------------------------------------------------


def _fraction_ap(scores, labels):
    n_pos = sum(labels)
    ap, prev = Fraction(0), Fraction(0)
    for t in sorted(set(scores), reverse=True):
        sel = [l for s, l in zip(scores, labels) if s >= t]
        recall = Fraction(sum(sel), n_pos)
        ap += (recall - prev) * Fraction(sum(sel), len(sel))
        prev = recall
    return ap


def test_a9_metric_oracles(acceptance):
    rng = np.random.default_rng(0)
    iou_exact, ap_worst = True, 0.0
    for trial in range(300):
        h, w = int(rng.integers(1, 9)), int(rng.integers(2, 9))
        pred, target = rng.random((h, w)), rng.random((h, w)) > 0.5
        p = pred >= 0.5
        inter, union = int((p & target).sum()), int((p | target).sum())
        oracle = 1.0 if union == 0 else inter / union
        iou_exact &= binary_iou(pred, target) == oracle
        target.flat[0], target.flat[1] = True, False
        scores = (rng.integers(0, 4 if trial % 2 else 1000, (h, w)) / 7).ravel().tolist()
        labels = target.ravel().astype(int).tolist()
        exact = _fraction_ap(scores, labels)
        ap_worst = max(ap_worst, abs(average_precision(np.array(scores), np.array(labels)) - float(exact)))
    perfect_ap = average_precision(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0]))
    t = rng.random((8, 8)) > 0.5
    perfect_miou = referring_miou([t.astype(float)], [t])
    # "exact" for AP means agreement with the rational oracle up to float rounding of the sum
    ok = iou_exact and ap_worst <= 1e-12 and perfect_ap == 1.0 and perfect_miou == 1.0
    acceptance("A9", ok, f"metrics: IoU bitwise equal to counting oracle = {iou_exact}; AP vs rational threshold "
                         f"sweep max error {ap_worst:.1e} (300 rasters <= 8x8); perfect AP {perfect_ap}; "
                         f"perfect mIoU {perfect_miou}")


# -- A11: ablation ---------------------------------------------------------------------------------


def test_a11_ablation_harness(acceptance, tmp_path, capsys):
    code = main(["ablate", "--out-dir", str(tmp_path), "--seeds", "3"])
    out = capsys.readouterr().out
    rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
    by = {(r["sief"], r["sf"], r["sdaf"]): r for r in rows}
    expected = {("off", "16", "off"), ("attention", "16", "two-layer"), ("attention", "16", "three-layer"),
                ("attention", "16", "one-layer-low"), ("attention", "16", "one-layer-high"),
                ("attention", "16", "off"), ("attention", "2", "off"), ("concat-only", "16", "off")}
    default_ap = float(by[("attention", "16", "two-layer")]["ap"])
    off_ap = float(by[("attention", "16", "off")]["ap"])
    diff = off_ap - default_ap
    table = (tmp_path / "ablation.txt").read_text()
    ok = (code == 0 and set(by) == expected and all(r["seeds"] == "3" for r in rows) and "†" in table
          and "directional_check\tpass" in out and diff <= 0.02 and (tmp_path / "ablation.png").exists())
    acceptance("A11", ok, f"ablation: {len(rows)} cells x 3 seeds, report + figure written; "
                          f"AP default {default_ap:.3f}, SDAF off {off_ap:.3f}, off - default = {diff:+.3f} "
                          f"(tolerance +0.02)")


# -- A12: runtime -------------------------------------------------------------------------------------


def test_a12_runtime_report(acceptance, tmp_path, capsys):
    code = main(["bench", "--repeats", "5", "--runs", "3", "--report", str(tmp_path / "bench.json"),
                 "--figure", str(tmp_path / "bench.png")])
    out = capsys.readouterr().out
    report = json.loads((tmp_path / "bench.json").read_text())
    pairs = [(r["total_ms"], r["total_without_disparity_ms"]) for r in report["runs"]]
    ok = (code == 0 and all(wo <= w for w, wo in pairs) and "194.74" in out and "17.12" in out
          and (tmp_path / "bench.png").exists())
    shown = ", ".join(f"{w:.1f}/{wo:.1f}" for w, wo in pairs)
    acceptance("A12", ok, f"runtime: with/without disparity ms per run [{shown}] at {report['resolution']} px; "
                          f"published 194.74/17.12 ms printed as context only")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
