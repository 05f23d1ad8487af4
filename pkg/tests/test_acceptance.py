"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The ablation criterion trains twelve diffusion models (four rows, three
seeds). Its output directory defaults to ``acceptance_runs/`` in the repo and
can be moved with ``CAMOINPAINT_ACCEPTANCE_DIR``; finished runs and a matching
``ablation.json`` are reused rather than retrained.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from acceptance_log import record
from conftest import random_blob_mask
from oracles import bgrec_oracle, enhance_oracle, lmp_oracle, map_oracle, mha_oracle, mlp_oracle
from test_superpixel import flood_components

from camoinpaint.autoencoder import nearest_code
from camoinpaint.conditioning import (ConditionEnhancer, FusionMLP, bgrec_loss, bkrm_retrieve, enhance_condition,
                                  localized_masked_pool, masked_average_pool, rcem_fuse)
from camoinpaint.config import ABLATION_ROWS, Ablation, RunConfig
from camoinpaint.data import DatasetManifest
from camoinpaint.diffusion import InpaintModel, LatentBatch, build_schedule, encode_pairs, sample_inpaint, total_loss
from camoinpaint.errors import ConfigError
from camoinpaint.evaluation import DeskExtractor, GaussianStats, evaluate, fid, gaussian_stats, kid, make_report
from camoinpaint.pipeline import (ablate, build_autoencoder, format_ablation_table, foreground_audit,
                              parameter_counts, train_ldm)
from camoinpaint.superpixel import fill_index, slic_foreground
from camoinpaint.toy import make_pairs, make_toy_dataset

T = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float64))
ACCEPT_DIR = Path(os.environ.get("CAMOINPAINT_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / "acceptance_runs"))
N_INSTANCES = 100


def rel_close(got, want, rtol=1e-6, floor=1e-12):
    got, want = np.asarray(got, np.float64), np.asarray(want, np.float64)
    return bool(np.all(np.abs(got - want) <= rtol * np.maximum(np.abs(want), floor)))


def tiny_instance(rng, h=5, w=4, c=3, s=3):
    cm = random_blob_mask(rng, h, w, min_fg=s)
    cf = rng.normal(size=(c, h, w))
    spx = slic_foreground(cf.transpose(1, 2, 0), cm, s, seed=int(rng.integers(1 << 30)))
    return cf, cm, spx


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_01_equation_oracles():
    rng = np.random.default_rng(101)
    worst = {}

    def check(name, ok):
        worst.setdefault(name, True)
        worst[name] &= ok

    cfg = RunConfig(unet_channels=8, attn_heads=2, key_dim=4, value_dim=4, superpixels=3, codebook_size=8,
                    diffusion_steps=20, sample_steps=5)
    sched = build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    for i in range(N_INSTANCES):
        cf, cm, spx = tiny_instance(rng)
        n = spx.n_labels
        check("masked_average_pool", rel_close(masked_average_pool(T(cf)[None], T(cm)[None, None])[0, 0],
                                               map_oracle(cf, cm)))
        lmp, _ = localized_masked_pool(T(cf)[None], torch.from_numpy(spx.labels)[None], n)
        check("localized_masked_pool", rel_close(lmp[0], lmp_oracle(cf, spx.labels, n)))

        H, K, dk, dv = 2, int(rng.integers(2, 9)), 4, 3
        xf, mem = rng.normal(size=(n, 3)), rng.normal(size=(K, 3))
        wq, wk, wv = rng.normal(size=(H, 3, dk)), rng.normal(size=(H, 3, dk)), rng.normal(size=(H, 3, dv))
        wo = rng.normal(size=(H * dv, 3))
        got, attn = bkrm_retrieve(T(xf)[None], T(mem), T(wq), T(wk), T(wv), T(wo), return_attention=True)
        want, want_attn = mha_oracle(xf, mem, wq, wk, wv, wo)
        check("bkrm_retrieve", rel_close(got[0], want) and rel_close(attn[0], want_attn))

        fusion = FusionMLP(3).double()
        xb = rng.normal(size=cf.shape)
        with torch.no_grad():
            fused = rcem_fuse(T(cf)[None], T(xb)[None], fusion)[0]
        w1, b1 = fusion.fc1.weight[:, :, 0, 0].detach().numpy(), fusion.fc1.bias.detach().numpy()
        w2, b2 = fusion.fc2.weight[:, :, 0, 0].detach().numpy(), fusion.fc2.bias.detach().numpy()
        check("rcem_fuse", rel_close(fused, mlp_oracle(cf, xb, w1, b1, w2, b2), floor=1e-9))

        zrec, z0 = rng.normal(size=cf.shape), rng.normal(size=cf.shape)
        check("enhance_condition", rel_close(enhance_condition(T(cf)[None], T(zrec)[None], T(cm)[None, None])[0],
                                             enhance_oracle(cf, zrec, cm)))
        check("bgrec_loss", rel_close(bgrec_loss(T(zrec)[None], T(z0)[None], T(cm)[None, None]).item(),
                                      bgrec_oracle(zrec, z0, cm)))

        # total loss: recompose the two terms by loops from the model's own outputs
        h = w = 8
        cm8 = random_blob_mask(rng, h, w, min_fg=3)
        cf8 = rng.normal(size=(3, h, w))
        spx8 = slic_foreground(cf8.transpose(1, 2, 0), cm8, 3, seed=i)
        batch = LatentBatch(T(rng.normal(size=(1, 3, h, w))), T(cf8)[None], T(cm8)[None, None],
                            torch.from_numpy(spx8.labels)[None], torch.from_numpy(fill_index(spx8))[None], 3)
        row = ABLATION_ROWS[i % 4]
        model = InpaintModel(cfg, T(rng.normal(size=(8, 3))), row, seed=i).double()
        t = torch.tensor([int(rng.integers(1, cfg.diffusion_steps + 1))])
        eps = T(rng.normal(size=(1, 3, h, w)))
        with torch.no_grad():
            total, parts = total_loss(model, batch, t, eps, sched)
            cond = model.condition(batch)
            ab = sched.alpha_bar[int(t)]
            zt = math.sqrt(ab) * batch.z0 + math.sqrt(1 - ab) * eps
            pred = model.denoiser(zt, cond.concat(), t)[0].numpy()
        e = eps[0].numpy()
        l_diff = sum((pred[a, x, y] - e[a, x, y]) ** 2 for a in range(3) for x in range(h) for y in range(w))
        l_diff /= 3 * h * w
        l_bg = bgrec_oracle(cond.z_rec[0].numpy(), batch.z0[0].numpy(), cm8) if row.rcem else 0.0
        check("total_loss", rel_close(total.item(), l_diff + l_bg) and rel_close(parts["L_diff"], l_diff))
    ok = all(worst.values())
    failed = [k for k, v in worst.items() if not v]
    assert record(1, ok, f"7 equations x {N_INSTANCES} random instances at 1e-6 relative"
                         + (f"; mismatches: {failed}" if failed else "")), failed


# -- 2 ----------------------------------------------------------------------------------


def test_criterion_02_quantization():
    rng = np.random.default_rng(202)
    ok = True
    for _ in range(N_INSTANCES):
        K, D, n = int(rng.integers(2, 40)), int(rng.integers(1, 5)), int(rng.integers(1, 30))
        book, z = rng.normal(size=(K, D)), rng.normal(size=(n, D))
        brute = []
        for v in z:
            best, arg = math.inf, -1
            for k in range(K):
                d = sum((v[j] - book[k, j]) ** 2 for j in range(D))
                if d < best:
                    best, arg = d, k
            brute.append(arg)
        ok &= nearest_code(T(z), T(book)).tolist() == brute
    tie_book = T([[1.0, 0.0], [0.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])
    tie = nearest_code(T([[0.0, 0.0], [0.5, 0.0], [-0.5, 0.0]]), tie_book).tolist()
    ok &= tie == [1, 0, 1]
    assert record(2, ok, f"{N_INSTANCES} brute-force cases; ties {tie} (expect [1, 0, 1])")


# -- 3 ----------------------------------------------------------------------------------


def test_criterion_03_gradient_check():
    torch.manual_seed(3)
    rng = np.random.default_rng(303)
    cm = np.ones((4, 4), np.uint8)
    cm[1:3, 0:3] = 0
    cf = rng.normal(size=(3, 4, 4))
    spx = slic_foreground(cf.transpose(1, 2, 0), cm, 2, seed=0)
    assert spx.n_labels == 2
    enh = ConditionEnhancer(T(rng.normal(size=(8, 3))), channels=3, heads=2, key_dim=4, value_dim=4,
                            localized=True).double()
    z0 = T(rng.normal(size=(1, 3, 4, 4)))
    args = (T(cf)[None], T(cm)[None, None], torch.from_numpy(spx.labels)[None],
            torch.from_numpy(fill_index(spx))[None], 2)

    def loss():
        return bgrec_loss(enh(*args).z_rec, z0, args[1])

    enh.zero_grad()
    loss().backward()
    worst, checked, h = 0.0, 0, 1e-6
    for name, p in enh.named_parameters():
        g = p.grad.detach().clone().reshape(-1)
        flat = p.data.reshape(-1)
        for j in range(flat.numel()):
            old = flat[j].item()
            with torch.no_grad():
                flat[j] = old + h
                up = loss().item()
                flat[j] = old - h
                down = loss().item()
                flat[j] = old
            num = (up - down) / (2 * h)
            err = abs(num - g[j].item()) / max(abs(num), abs(g[j].item()), 1e-8)
            worst = max(worst, err)
            checked += 1
    ok = worst < 1e-4
    assert record(3, ok, f"{checked} parameters, worst relative error {worst:.2e} (tolerance 1e-4)")


# -- 4 ----------------------------------------------------------------------------------


def test_criterion_04_fid():
    mu = np.full(16, 0.5)
    exact = fid(GaussianStats(np.zeros(16), np.eye(16)), GaussianStats(mu, np.eye(16)))
    rng = np.random.default_rng(404)
    a = rng.normal(size=(20000, 16))
    b = rng.normal(size=(20000, 16)) + mu
    sa = gaussian_stats(a)
    sampled = fid(sa, gaussian_stats(b))
    self_fid = fid(sa, sa)
    ok = abs(exact - 4.0) < 1e-12 and 3.8 <= sampled <= 4.2 and self_fid < 1e-3
    assert record(4, ok, f"exact {exact:.12f} (4), sampled {sampled:.4f} in [3.8, 4.2], self {self_fid:.2e}")


# -- 5 ----------------------------------------------------------------------------------


def test_criterion_05_kid():
    def k(x, y):
        return (sum(a * b for a, b in zip(x, y)) / len(x) + 1.0) ** 3

    rng = np.random.default_rng(505)
    x, y = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    xx = (k(x[0], x[1]) + k(x[1], x[0]) + k(x[0], x[2]) + k(x[2], x[0]) + k(x[1], x[2]) + k(x[2], x[1])) / 6
    yy = (k(y[0], y[1]) + k(y[1], y[0]) + k(y[0], y[2]) + k(y[2], y[0]) + k(y[1], y[2]) + k(y[2], y[1])) / 6
    xy = sum(k(x[i], y[j]) for i in range(3) for j in range(3)) / 9
    hand = xx + yy - 2 * xy
    unrolled_err = abs(kid(x, y, block_size=3) - hand)

    full = np.random.default_rng(0).normal(size=(1000, 16))
    same = kid(full[:500], full[500:], 50)
    r = np.random.default_rng(1)
    mean = float(np.mean([kid(r.normal(size=(500, 16)), r.normal(size=(500, 16)), 50) for _ in range(100)]))
    parts = [unrolled_err < 1e-10, abs(same) <= 0.005, abs(mean) <= 0.002]
    ok = all(parts)
    assert record(5, ok, f"3-point error {unrolled_err:.1e} (<1e-10); same-distribution KID {same:+.5f} "
                         f"(|.|<=0.005); mean of 100 resamples {mean:+.5f} (|.|<=0.002)")


# -- 6 ----------------------------------------------------------------------------------


def test_criterion_06_slic():
    rng = np.random.default_rng(606)
    s = RunConfig().superpixels
    bad = []
    for trial in range(50):
        h, w = int(rng.integers(8, 17)), int(rng.integers(8, 17))
        cm = random_blob_mask(rng, h, w)
        feats = rng.normal(size=(h, w, 3))
        a = slic_foreground(feats, cm, s, seed=trial)
        b = slic_foreground(feats, cm, s, seed=trial)
        lab = a.labels
        partition = np.array_equal(lab >= 0, cm == 0) and (lab[cm == 1] == -1).all()
        n = a.n_labels
        partition &= set(np.unique(lab[lab >= 0])) == set(range(n)) and n <= s
        connected = all(flood_components(lab, j) == 1 for j in range(n))
        determinism = np.array_equal(lab, b.labels)
        hist = np.asarray(a.objective_history)
        monotone = bool(np.all(np.diff(hist) <= 1e-9 * max(1.0, hist[0])))
        if not (partition and connected and determinism and monotone):
            bad.append((trial, partition, connected, determinism, monotone))
    assert record(6, not bad, f"50 random masks (s={s}): partition, 4-connectivity, determinism, monotone objective"
                              + (f"; failures {bad[:3]}" if bad else "")), bad


# -- 7 ----------------------------------------------------------------------------------


def test_criterion_07_foreground_preservation():
    cfg = RunConfig(sample_steps=10)
    ae = build_autoencoder(cfg).eval()
    pairs = make_pairs(24, seed=707)
    batch = encode_pairs(ae, pairs, cfg)
    model = InpaintModel(cfg, ae.codebook.detach().clone(), Ablation(True, True, True), seed=0).eval()
    imgs = sample_inpaint(model, ae, pairs, build_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end),
                          cfg, seed=7, batch=batch)
    audits = [foreground_audit(p, im) for p, im in zip(pairs, imgs)]
    assert record(7, all(audits), f"{sum(audits)}/{len(audits)} generated images bitwise-equal on the object at 8 bits")


# -- 8 ----------------------------------------------------------------------------------


def test_criterion_08_overfit(tmp_path):
    cfg = RunConfig(ldm_steps=2000)
    ae = build_autoencoder(cfg).eval()
    pairs = make_pairs(8, seed=808)
    batch = encode_pairs(ae, pairs, cfg)
    g = torch.Generator().manual_seed(8)
    t = torch.randint(1, cfg.diffusion_steps + 1, (len(pairs),), generator=g)
    eps = torch.randn(batch.z0.shape, generator=g)
    t0 = time.time()
    _, _, records = train_ldm(cfg, Ablation(True, True, True), ae, batch, tmp_path, fixed_batch=(batch, t, eps),
                              record_every=1)
    losses = np.array([r.total for r in records])
    window = 50
    smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
    initial = smooth[0]
    hit = np.nonzero(smooth < 0.1 * initial)[0]
    step = int(hit[0]) + window if len(hit) else None
    ok = step is not None and step <= 2000
    assert record(8, ok, f"smoothed total {initial:.4f} -> {smooth[-1]:.5f}; below 10% at step {step} "
                         f"(limit 2000; {time.time() - t0:.0f}s)")


# -- 9 and 10 -------------------------------------------------------------------------------


SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def ablation_report():
    cfg = RunConfig()
    data = ACCEPT_DIR / "toy2000"
    if not (data / "manifest.txt").exists():
        make_toy_dataset(data, n=2000, test_fraction=0.25, seed=0, size=cfg.image_size)
    out = ACCEPT_DIR / "ablation"
    cached = out / "ablation.json"
    if cached.exists():
        rep = json.loads(cached.read_text())
        if rep["config_hash"] == cfg.config_hash() and tuple(rep["seeds"]) == SEEDS:
            return rep
    t0 = time.time()
    rep = ablate(cfg, DatasetManifest.read(data), out, SEEDS, progress=print)
    rep["wall_seconds"] = time.time() - t0
    return rep


def test_criterion_09_ablation_trend(ablation_report):
    rows = {r["row"]: r for r in ablation_report["rows"]}
    base, bkrm, full = (rows[n]["fid_mean"] for n in ("base", "+BKRM", "+BKRM+RCEM+LMP"))
    gain = (base - full) / base
    ordering = base >= bkrm >= full
    ok = full < base and gain >= 0.05 and ordering
    budget = sum(r["train_seconds"] for r in ablation_report["runs"])
    print(format_ablation_table(ablation_report))
    assert record(9, ok, f"seed-mean FID base {base:.3f}, +BKRM {bkrm:.3f}, +BKRM+RCEM {rows['+BKRM+RCEM']['fid_mean']:.3f}, "
                         f"full {full:.3f}; improvement {100 * gain:.1f}% (>=5%), ordering "
                         f"{'holds' if ordering else 'violated'}; {len(SEEDS)} seeds, {budget / 60:.0f} min training")


def test_criterion_10_parameter_delta(ablation_report):
    cfg = RunConfig()
    counts = parameter_counts(cfg, build_autoencoder(cfg))
    base, full = counts["base"], counts["+BKRM+RCEM+LMP"]
    delta = full["total"] - base["total"]
    only_extra = full["denoiser"] == base["denoiser"] and full["autoencoder"] == base["autoencoder"] \
        and delta == full["retrieval_fusion"]
    rows = {r["row"]: r for r in ablation_report["rows"]}
    reported = rows["+BKRM+RCEM+LMP"]["params_delta"] == delta
    frac = delta / full["total"]
    ok = only_extra and reported and frac < 0.005
    assert record(10, ok, f"+{delta} parameters ({100 * frac:.3f}% of {full['total']}, limit 0.5%); "
                          f"all in retrieval/fusion: {only_extra}; shown in report: {reported}")


# -- 11 -----------------------------------------------------------------------------------


def test_criterion_11_no_published_comparable_label(tmp_path):
    from PIL import Image

    ext = DeskExtractor()
    refused = []
    try:
        make_report(1.0, 0.01, 10, 10, ext, "x", claim_published_comparable=True)
        refused.append(False)
    except ConfigError:
        refused.append(True)
    d = tmp_path / "imgs"
    d.mkdir()
    for i, p in enumerate(make_pairs(6, seed=11)):
        Image.fromarray((p.image * 255).round().astype(np.uint8)).save(d / f"{i}.png")
    try:
        evaluate(d, d, out_path=tmp_path / "m.json", claim_published_comparable=True)
        refused.append(False)
    except ConfigError:
        refused.append(True)
    refused.append(not (tmp_path / "m.json").exists())
    rep = json.loads(make_report(1.0, 0.01, 10, 10, ext, "x").to_json())
    labelled = rep["published_comparable"] is False and "not comparable" in rep["note"]
    ok = all(refused) and labelled
    assert record(11, ok, f"published-comparable label refused for {ext.id}: {refused}; reports carry the note: {labelled}")
