"""Acceptance criteria 1-7, one test each, each reporting a PASS/FAIL line.

Criteria 5 and 6 train real models on the desk-scale synthetic corpus and take
several minutes; trained models are shared between them through the harness cache.
"""

import time

import numpy as np
import pytest
import torch

from fsaudit.auditor import centroid_pairwise
from fsaudit.config import DefenseConfig, desk_preset
from fsaudit.data import as_pool, image_index, sample_episode, split
from fsaudit.defenses import (
    CLOAK_LEVELS, CloakConfig, OutputNoiseConfig, clip_gradient, cloak_images, dp_noise, memguard_perturb,
    perturb_output,
)
from fsaudit.extractors import build_extractor
from fsaudit.harness import REPORT_NAMES, clear_caches, read_jsonl, replay, run_audit, run_robustness, write_jsonl
from fsaudit.metrics import cos_sim, mse, ssim
from fsaudit.models import KINDS, ProtoNet, build_model, episode_loss, episode_tensors
from fsaudit.probing import STRATEGIES, build_probe
from fsaudit.synthetic import SyntheticSpec, make_corpus
from oracles import centroid_pairwise_loop, cos_loop, mse_loop, proto_posterior_loop, ssim_loop
from test_data import check_split_invariants
from test_models import PixelExtractor

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# --- 1. metric oracles -------------------------------------------------------

def test_criterion_1_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = dict.fromkeys(("mse", "cossim", "ssim", "li", "proto"), 0.0)
    for _ in range(1000):
        shape = (3, int(rng.integers(11, 15)), int(rng.integers(11, 15)))
        x, y = rng.random(shape), rng.random(shape)
        if rng.random() < 0.3:
            y = np.clip(x + rng.normal(scale=0.05, size=shape), 0, 1)
        worst["mse"] = max(worst["mse"], abs(mse(x, y) - mse_loop(x, y)))
        worst["cossim"] = max(worst["cossim"], abs(cos_sim(x, y) - cos_loop(x, y)))
        worst["ssim"] = max(worst["ssim"], abs(ssim(x, y) - ssim_loop(x, y)))

        emb = rng.normal(size=(int(rng.integers(2, 10)), int(rng.integers(1, 8))))
        c, p = centroid_pairwise(emb)
        co, po = centroid_pairwise_loop(emb)
        worst["li"] = max(worst["li"], abs(c - co), abs(p - po))

        k, shots, n = int(rng.integers(2, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 6))
        support = torch.from_numpy(rng.random((k, shots, 3, 1, 1)))
        queries = torch.from_numpy(rng.random((n, 3, 1, 1)))
        got = ProtoNet(PixelExtractor()).double().way_scores(support, queries).detach().numpy()
        want = proto_posterior_loop(support.numpy()[..., 0, 0], queries.numpy()[..., 0, 0])
        worst["proto"] = max(worst["proto"], float(np.abs(got - want).max()))
    tol = {"mse": 1e-7, "cossim": 1e-7, "ssim": 1e-4, "li": 1e-9, "proto": 1e-5}
    elapsed = time.perf_counter() - start
    ok = all(worst[m] <= tol[m] for m in tol) and elapsed < 60
    report(1, ok, ", ".join(f"{m} max err {worst[m]:.1e} (tol {tol[m]:g})" for m in tol) + f"; {elapsed:.1f}s")


# --- 2. split and leakage -----------------------------------------------------

def test_criterion_2_split_and_leakage():
    start = time.perf_counter()
    recs = make_corpus(SyntheticSpec(n_users=20, n_images=12, size=8, seed=0))
    index = image_index(recs)
    n_probes = 0
    for seed in range(50):
        sp = split(recs, seed)
        check_split_invariants(sp, recs)
        for h in (sp.target, sp.aux):
            trained = {(u, i) for u, ids in h.train_ids.items() for i in ids}
            pool = h.auditor_pool(index)
            for u in h.users:
                ids = h.nontrain_ids[u] if u in h.nontrain_ids else h.nonmem_ids[u]
                images = [index[(u, i)] for i in ids]
                for arch in ("siamese", "proto"):
                    for strategy in STRATEGIES:
                        probe = build_probe(arch, images, pool, 3, 2, 2, strategy, seed)
                        used = {(im.user_id, im.image_id) for way in probe.support for im in way}
                        used |= {(im.user_id, im.image_id) for im in probe.queries}
                        assert not used & trained
                        n_probes += 1
    elapsed = time.perf_counter() - start
    report(2, elapsed < 60, f"50 seeds, {n_probes} probes, no leakage; {elapsed:.1f}s")


# --- 3. defense invariants ------------------------------------------------------

def test_criterion_3_defense_invariants():
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    for _ in range(10_000):
        g = rng.normal(scale=rng.choice([0.1, 1.0, 10.0]), size=int(rng.integers(1, 50)))
        c = float(rng.uniform(0.1, 5.0))
        out = clip_gradient(g, c)
        n = np.linalg.norm(g)
        assert np.linalg.norm(out) <= c * (1 + 1e-12)
        if n <= c:
            assert np.array_equal(out, g)
        else:
            assert np.allclose(out / np.linalg.norm(out), g / n) and abs(np.linalg.norm(out) - c) <= 1e-9 * c

    gauss = dp_noise(np.zeros(100_000), 0.8, 1.5, seed=1).std()
    lap = perturb_output(np.zeros(100_000), OutputNoiseConfig(0.2, seed=2)).std()
    std_err = max(abs(gauss / 1.2 - 1), abs(lap / 0.2 - 1))
    assert std_err <= 0.02

    applied = 0
    for _ in range(1000):
        k = int(rng.integers(2, 8))
        s = rng.dirichlet(np.ones(k) * rng.choice([0.3, 1.0, 5.0]))
        res = memguard_perturb(s, target=int(rng.integers(k)))
        if (s == s.max()).sum() == 1:
            assert res.applied
            assert res.scores.argmax() == s.argmax()
            assert abs(res.scores.sum() - 1) <= 1e-6
            applied += 1

    torch.manual_seed(0)
    surrogate = build_extractor("simple_cnn", 8, batch_norm=False).eval()
    images = rng.random((4, 3, 16, 16))
    budgets = {}
    for level, eps in CLOAK_LEVELS.items():
        out = cloak_images(images, surrogate, CloakConfig.preset(level, steps=10), seed=0)
        budgets[level] = float(np.abs(out - images).max())
        assert budgets[level] <= eps and out.min() >= 0 and out.max() <= 1
    elapsed = time.perf_counter() - start
    report(3, elapsed < 120, f"clip 1e4 ok, noise std err {std_err:.4f}, memguard {applied}/1000 non-tie ok, "
                             f"cloak max |delta| {budgets}; {elapsed:.1f}s")


# --- 4. gradient checks ----------------------------------------------------------

def test_criterion_4_gradient_checks():
    pool = as_pool(make_corpus(SyntheticSpec(n_users=5, n_images=8, size=16, seed=4)))
    support, queries, labels = episode_tensors(sample_episode(pool, 3, 2, 2, 0))
    support, queries = support.double(), queries.double()
    worst = {}
    for kind in KINDS:
        torch.manual_seed(4)
        m = build_model(kind, width=4).double().eval()
        params = [p for p in m.parameters() if p.requires_grad]
        rng = np.random.default_rng(4)
        errs = []
        for _ in range(6):
            p = params[int(rng.integers(len(params)))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            (g,) = torch.autograd.grad(episode_loss(m, support, queries, labels), p)
            h = 1e-5
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                up = episode_loss(m, support, queries, labels).item()
                p[idx] = orig - h
                down = episode_loss(m, support, queries, labels).item()
                p[idx] = orig
            numeric = (up - down) / (2 * h)
            errs.append(abs(g[idx].item() - numeric) / max(abs(numeric), abs(g[idx].item()), 1e-6))
        worst[kind] = max(errs)
    report(4, all(v <= 1e-3 for v in worst.values()),
           ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items()))


# --- 5. end-to-end directional audit ---------------------------------------------

def _median_auc(record, name):
    return float(record.reports[name].median("auc"))


@pytest.fixture(scope="module")
def audits():
    start = time.perf_counter()
    recs = {arch: run_audit(desk_preset(architecture=arch)) for arch in ("siamese", "proto", "relation")}
    return recs, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_5_directional_audit(audits):
    recs, elapsed = audits
    cfg = desk_preset()
    assert (cfg.synthetic.n_users, cfg.synthetic.n_images, cfg.k, cfg.shots, cfg.queries, cfg.repetitions) == (
        40, 20, 5, 5, 5, 5)
    med = {a: {n: _median_auc(r, n) for n in REPORT_NAMES} for a, r in recs.items()}
    a = med["siamese"]["reference"] >= 0.75 and med["siamese"]["reference"] > med["proto"]["reference"]
    b = all(med[x]["reference"] - med[x]["basic"] >= 0.02 for x in ("proto", "relation"))
    c = all(med[x]["reference"] >= med[x]["li_baseline"] for x in ("proto", "relation"))
    detail = "; ".join(
        f"{x} ref {m['reference']:.3f} basic {m['basic']:.3f} li {m['li_baseline']:.3f}" for x, m in med.items()
    )
    report(5, a and b and c and elapsed < 1200, f"(a) {a} (b) {b} (c) {c} | {detail}; {elapsed:.0f}s")


# --- 6. robustness trends ---------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_robustness_trends(audits):
    start = time.perf_counter()
    cfg = desk_preset(architecture="proto")
    deltas = cfg.robustness.noise_deltas
    variants = [("baseline", DefenseConfig()), ("memguard", DefenseConfig(memguard=True))]
    variants += [(f"output_noise:{d:g}", DefenseConfig(output_noise=d)) for d in deltas]
    recs = run_robustness(cfg, variants)
    assert all(r.error is None for r in recs)
    base = _median_auc(recs[0], "reference")
    drop = base - _median_auc(recs[1], "reference")
    curve = [base] + [_median_auc(r, "reference") for r in recs[2:]]
    monotone = all(b <= a for a, b in zip(curve, curve[1:]))
    elapsed = time.perf_counter() - start
    report(6, drop <= 0.10 and monotone and elapsed < 1500,
           f"memguard drop {drop:+.3f} (<= 0.10), noise curve over delta {[0] + list(deltas)}: "
           f"{[round(v, 3) for v in curve]} monotone={monotone}; {elapsed:.0f}s")


# --- 7. reproducibility --------------------------------------------------------------

def test_criterion_7_replay(tmp_path):
    cfg = desk_preset(
        synthetic=SyntheticSpec(n_users=12, n_images=12, size=16, seed=0), min_images=12, keep_images=12,
        image_size=16, width=8, k=3, shots=2, queries=2, epochs=1, episodes_per_epoch=3, eval_episodes=5,
        probes_per_user=2, auditor_epochs=20, repetitions=2, architecture="relation",
        defense=DefenseConfig(output_noise=0.05),
    )
    original = run_audit(cfg)
    (stored,) = read_jsonl(write_jsonl([original], tmp_path / "r.jsonl"))
    clear_caches()
    again = replay(stored)
    worst = max(
        abs(a[k] - b[k])
        for n in REPORT_NAMES
        for a, b in zip(again.reports[n].runs, stored.reports[n].runs)
        for k in a
    )
    same_acc = np.allclose(again.train_acc, stored.train_acc, atol=1e-9, rtol=0)
    report(7, worst <= 1e-9 and same_acc, f"max metric difference after replay {worst:.1e}")
