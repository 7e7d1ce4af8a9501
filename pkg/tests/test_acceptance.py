"""Acceptance suite: one PASS/FAIL line per criterion (1-11).

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are echoed in
the terminal summary. Each check compares against an independent oracle or a
published constant at the stated tolerance.
"""

import math
import time

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE, SMOKE_STEPS
from marecg import objectives as obj
from marecg.audit import HEADS, TOLERANCE, audit_head
from marecg.checkpoint import dumps_checkpoint, loads_checkpoint
from marecg.config import RunConfig, n_patches
from marecg.ingest import (encode_signal, format_header, load_signal, make_header, parse_header, preprocess,
                           synth_corpus, synth_record, SynthSpec)
from marecg.model import PatchTokenizer, mask_count, sample_mask
from marecg.ontology import dumps_graph, floyd_warshall, loads_graph, tree_distance
from marecg.physio import detect_rpeaks, rhythm_targets
from marecg.probe import extract_features, label_fraction_split, macro_auc, run_probe
from marecg.snomed import (REFERENCE_ROUTES, default_routing, dumps_routing, loads_routing, resolve_codes,
                           route_code, select_primary, soft_target, total_variation, unnormalized_mass)
from marecg.trainer import (MarEcg, _STREAMS, _stream, ablation_matrix, ledger_columns, model_tensors,
                            save_model, load_model)


def report(k: int, checks: list[tuple[str, bool]]) -> None:
    failed = [name for name, ok in checks if not ok]
    detail = "; ".join(name for name, _ in checks) if not failed else "failed: " + "; ".join(failed)
    ACCEPTANCE[k] = (not failed, detail)
    print(f"criterion {k}: {'PASS' if not failed else 'FAIL'}  {detail}")
    assert not failed, detail


# -- 1 -------------------------------------------------------------------------------


def test_criterion_01_graph_fidelity(graph):
    t0 = time.perf_counter()
    D = tree_distance(graph.adjacency)
    D_fw = floyd_warshall(graph.adjacency)
    elapsed = time.perf_counter() - t0
    report(1, [
        ("D_tree == Floyd-Warshall on 1600 entries", D.shape == (40, 40) and np.array_equal(D, D_fw)),
        ("max entry 4", int(D.max()) == 4),
        ("D[25,19] = D[5,6] = 1", D[25, 19] == 1 and D[5, 6] == 1),
        (f"runtime {elapsed * 1e3:.1f} ms < 1 s", elapsed < 1.0),
    ])


# -- 2 -------------------------------------------------------------------------------


def test_criterion_02_soft_target_masses(graph):
    D = graph.distance
    singleton = resolve_codes([164889003], graph=graph)  # AF, single active leaf
    u = unnormalized_mass(singleton, D, 1.0)
    published = (1.000, 0.368, 0.135, 0.050, 0.018)
    per_class = [u[D[singleton.primary] == d] for d in range(5)]
    masses_ok = all(len(v) and np.all(np.abs(v - m) <= 5e-4) for v, m in zip(per_class, published))

    pair = resolve_codes([54329005], graph=graph)  # {19, 25}
    clamp_ok = all(unnormalized_mass(pair, D, 1.0)[c] >= 1.0 for c in pair.active)
    clamp_wide = resolve_codes([164889003, 164909002, 54329005], graph=graph)
    clamp_ok &= all(unnormalized_mass(clamp_wide, D, 1.0)[c] >= 1.0 for c in clamp_wide.active)

    on_active = np.zeros(40)
    on_active[list(pair.active)] = 0.5
    tv_cold = total_variation(soft_target(pair, D, 1e-3), on_active)
    tv_hot = max(total_variation(soft_target(t, D, 1e3), np.full(40, 1 / 40)) for t in (singleton, pair, clamp_wide))
    report(2, [
        ("sigma=1 class masses match (1, .368, .135, .050, .018) within 5e-4", masses_ok),
        ("clamp lifts every active leaf to >= 1", clamp_ok),
        (f"sigma=1e-3 TV to uniform-on-active {tv_cold:.1e} <= 1e-3", tv_cold <= 1e-3),
        (f"sigma=1e3 TV to uniform-on-40 {tv_hot:.1e} <= 1e-3", tv_hot <= 1e-3),
    ])


# -- 3 -------------------------------------------------------------------------------

# worked routing rows, transcribed independently of the package table
_WORKED = {
    164889003: {5, 1}, 164909002: {13, 2}, 426177001: {11, 1}, 54329005: {25, 19, 3},
    164931005: {21, 25, 3}, 233917008: {17, 18, 2}, 698252002: {1}, 6374002: {2}, 413444003: {3},
}


def _expected_root_only_draws(cfg, corpus):
    """Replay the trainer's record order and count root-only draws."""
    order = _stream(len(corpus), cfg.seed)
    draws = [next(order) for _ in range(SMOKE_STEPS * cfg.accumulation * cfg.micro_batch)]
    return sum(not corpus[i].leaf_target.has_primary for i in draws)


def test_criterion_03_routing_and_primary(graph, smoke_config, smoke_corpus, smoke_run):
    table = default_routing(graph)
    routes_ok = all(set(route_code(c, table)) == nodes for c, nodes in _WORKED.items())
    routes_ok &= set(REFERENCE_ROUTES) == set(_WORKED)
    ami = resolve_codes([54329005], table, graph)
    nos = resolve_codes([698252002], table, graph)

    root_only = [r for r in smoke_corpus if r.leaf_target.root_only]
    expected = _expected_root_only_draws(smoke_config, smoke_corpus)
    filtered = smoke_run.counters.get("gscl_filtered", -1)
    ar_rows = smoke_run.column("ar")
    report(3, [
        ("all worked routing rows exact", routes_ok),
        ("{19,25} -> 25", ami.active == (19, 25) and ami.primary == 25 and select_primary({19, 25}, graph) == 25),
        ("{16,17} -> 17", select_primary({16, 17}, graph) == 17),
        ("root-only record flagged, no primary", nos.root_only and nos.primary is None),
        (f"mixed corpus: {len(root_only)} root-only records kept for AR", len(root_only) > 0
         and all(r.quality == "pass" for r in root_only) and np.all(np.isfinite(ar_rows))),
        (f"GSCL filter counter {filtered} == replayed root-only draws {expected}", filtered == expected > 0),
    ])


# -- 4 -------------------------------------------------------------------------------


def test_criterion_04_tokenization_and_mask_count(rng):
    shapes_ok = True
    for L, T in ((3500, 139), (4700, 187)):
        tok = PatchTokenizer(12, n_patches(L, 50, 25), 50, 25, dim=8)
        shapes_ok &= n_patches(L, 50, 25) == T and tok.patchify(torch.zeros(1, 12, L)).shape[-2] == T
    counts_ok = True
    for k in range(20):
        pct = int(rng.integers(1, 100))
        C, T = int(rng.integers(1, 13)), int(rng.integers(1, 200))
        expected = -(-pct * C * T // 100)  # exact integer ceiling
        plan = sample_mask(C, T, pct / 100, seed=k)
        counts_ok &= mask_count(pct / 100, C, T) == expected == plan.count
    report(4, [
        ("T=139 at L=3500 and T=187 at L=4700", shapes_ok),
        ("mask cardinality == ceil(r*C*T) on 20 random draws", counts_ok),
    ])


# -- 5 -------------------------------------------------------------------------------


def test_criterion_05_gradient_audit():
    t0 = time.perf_counter()
    errors = {h: audit_head(h).max_rel_error for h in HEADS}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    report(5, [
        (f"all {len(HEADS)} heads <= 1e-4 (worst {worst} {errors[worst]:.1e})",
         all(e <= TOLERANCE for e in errors.values())),
        (f"runtime {elapsed:.1f} s < 120 s", elapsed < 120),
    ])


# -- 6 -------------------------------------------------------------------------------


def test_criterion_06_prototype_head(graph):
    torch.manual_seed(0)
    net = obj.PrototypeNet(40, 192, 48, dropout=0.1)
    a_hat = torch.as_tensor(graph.norm_adjacency, dtype=torch.float32)
    norms_train = net.train()(a_hat, torch.Generator().manual_seed(1)).norm(dim=1).detach()
    norms_eval = net.eval()(a_hat).norm(dim=1).detach()
    count = obj.parameter_count(net)

    net64 = net.double()
    P = net64(a_hat.double())
    g = torch.Generator().manual_seed(3)
    h = obj.unit(torch.randn(5, 48, generator=g, dtype=torch.float64))
    leaf_codes = [164889003, 164909002, 426177001, 270492004, 59931005]
    targets = [resolve_codes([c], graph=graph) for c in leaf_codes]
    t = torch.tensor(np.stack([soft_target(x, graph.distance, 1e-3) for x in targets]))
    gscl = obj.gscl_loss(h, P, t, 0.1)
    infonce = torch.nn.functional.cross_entropy(h @ P.T / 0.1, torch.tensor([x.primary for x in targets]))
    gap = abs(float((gscl - infonce).detach()))
    report(6, [
        ("40 prototype rows unit-norm within 1e-6 (train and eval)",
         float((norms_train - 1).abs().max()) <= 1e-6 and float((norms_eval - 1).abs().max()) <= 1e-6),
        (f"trainable parameters {count} in [50k, 60k]", 50_000 <= count <= 60_000),
        (f"sigma->0 GSCL vs InfoNCE gap {gap:.1e} <= 1e-6", gap <= 1e-6),
    ])


# -- 7 -------------------------------------------------------------------------------


def _match(detected, truth, tol=10):
    detected, truth = np.asarray(detected), np.asarray(truth)
    hits = sum(np.any(np.abs(detected - t) <= tol) for t in truth)
    true_pos = sum(np.any(np.abs(truth - d) <= tol) for d in detected)
    return hits, true_pos


def test_criterion_07_msps_physiology():
    n_truth = n_hit = n_det = n_tp = 0
    for rate in range(40, 181, 10):
        for seed in range(3):
            rec = synth_record(SynthSpec(rate_bpm=float(rate)), seed=seed * 1000 + rate, length=5000)
            peaks = detect_rpeaks(rec.signal[0], 500.0)
            truth = rec.meta["true_rpeaks"]
            hits, tp = _match(peaks, truth)
            n_truth, n_hit, n_det, n_tp = n_truth + len(truth), n_hit + hits, n_det + len(peaks), n_tp + tp
    recall, precision = n_hit / n_truth, n_tp / n_det

    def bucket_of_train(rr):
        return rhythm_targets(np.arange(0, 5000, rr)).rate_bucket

    exact_ok = (bucket_of_train(500) == "normal" and bucket_of_train(501) == "brady"
                and bucket_of_train(300) == "normal" and bucket_of_train(299) == "tachy")
    synth_ok = True
    for rate, want in ((56, "brady"), (64, "normal"), (96, "normal"), (105, "tachy")):
        rec = synth_record(SynthSpec(rate_bpm=float(rate)), seed=rate, length=5000)
        synth_ok &= rhythm_targets(detect_rpeaks(rec.signal[0], 500.0)).rate_bucket == want

    alt_ok = True
    for seed in range(3):
        big = synth_record(SynthSpec(rate_bpm=75.0, rhythm="bigeminy"), seed=seed, length=5000)
        reg = synth_record(SynthSpec(rate_bpm=75.0), seed=seed, length=5000)
        alt_ok &= rhythm_targets(detect_rpeaks(big.signal[0], 500.0)).alternation is True
        alt_ok &= rhythm_targets(detect_rpeaks(reg.signal[0], 500.0)).alternation is False
    report(7, [
        (f"clean 40-180 bpm recall {recall:.4f} precision {precision:.4f} >= 0.99",
         recall >= 0.99 and precision >= 0.99),
        ("buckets at 60/100 bpm boundaries (exact trains and synthetic records)", exact_ok and synth_ok),
        ("alternation true on bigeminy, false on regular", alt_ok),
        ("ramp 0 at epoch 0, 1 at epoch 5", obj.msps_ramp(0.0) == 0.0 and obj.msps_ramp(5.0) == 1.0),
    ])


# -- 8 -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def gating_runs(smoke_corpus):
    cfg = RunConfig.tiny(micro_batch=4, accumulation=2)
    return ablation_matrix(cfg, smoke_corpus[:16], seeds=(0,), max_steps=2)


def test_criterion_08_ablation_gating(gating_runs):
    runs = {a: gating_runs[a, 0] for a in ("C1", "C2p", "C2", "C3")}
    cols = {a: set(r.columns) for a, r in runs.items()}
    pair = lambda *names: {n for t in names for n in (t, f"{t}_w")}  # noqa: E731
    diffs_ok = (
        cols["C2p"] - cols["C1"] == pair("jepa", "view", "ica", "bca", "opa", "mpct") | {"augment"}
        and not cols["C1"] - cols["C2p"]
        and cols["C2"] ^ cols["C2p"] == pair("gscl")
        and cols["C3"] ^ cols["C2"] == pair("patch_rhythm", "patch_pos", "msps")
    )
    c1 = runs["C1"]
    c1_ok = set(c1.columns) - {"step", "epoch", "lr", "grad_norm", "applied", "total"} == pair("recon", "mask", "ar")
    c1_ok &= all(row["total"] == row["ar"] for row in c1.ledger)

    first = {a: r.ledger[0] for a, r in runs.items()}
    shared_ok = len({first[a]["ar"] for a in runs}) == 1
    shared_ok &= all(first["C2p"][k] == first[a][k] for a in ("C2", "C3") for k in ("jepa", "mpct"))
    shared_ok &= first["C2p"]["view"] == first["C2"]["view"]  # C3 augments under a different policy
    gscl_gap = (first["C2"]["total"] - first["C2p"]["total"]) - first["C2"]["gscl_w"]
    gscl_ok = abs(gscl_gap) <= 1e-6 * abs(first["C2"]["total"])

    timing = {"temporal_crop", "time_dilation"}
    c3_log = runs["C3"].aug_log
    aug_ok = runs["C3"].ledger[0]["augment"] == "rhythm_safe" and runs["C2"].ledger[0]["augment"] == "unconstrained"
    aug_ok &= bool(c3_log) and not any(timing & set(names) for _, names in c3_log)
    aug_ok &= any(timing & set(names) for _, names in runs["C2"].aug_log)
    report(8, [
        ("column differences match the gating table", diffs_ok),
        ("C1 ledger AR-only and total == L_AR bitwise", c1_ok),
        ("shared terms identical at step 0", shared_ok),
        (f"C2 - C2' total == lambda*GSCL (gap {gscl_gap:.1e})", gscl_ok),
        ("C3 rhythm-safe augmentation log, C2 unconstrained", aug_ok),
    ])


# -- 9 -------------------------------------------------------------------------------


def test_criterion_09_smoke_training(smoke_run):
    total = smoke_run.column("total")
    first, last = total[:5].mean(), total[-5:].mean()
    report(9, [
        (f"{smoke_run.steps} optimizer steps", smoke_run.steps == SMOKE_STEPS),
        (f"last-5 / first-5 total {last / first:.3f} <= 0.80", last <= 0.8 * first),
        (f"skipped steps {smoke_run.skipped} == 0", smoke_run.skipped == 0),
        (f"runtime {smoke_run.seconds:.0f} s < 300 s", smoke_run.seconds < 300),
    ])


# -- 10 ------------------------------------------------------------------------------


def _pair_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_criterion_10_probe(rng, smoke_run, probe_corpus):
    worst = 0.0
    for _ in range(100):
        n, K = int(rng.integers(4, 40)), int(rng.integers(1, 4))
        S = rng.integers(0, 6, size=(n, K)).astype(float)  # coarse scores force ties
        Y = np.zeros((n, K), dtype=int)
        for k in range(K):
            Y[rng.permutation(n)[: int(rng.integers(1, n))], k] = 1
        oracle = np.mean([_pair_auc(S[:, k], Y[:, k]) for k in range(K)])
        worst = max(worst, abs(macro_auc(S, Y).macro - oracle))

    split_ok = True
    for seed in range(10):
        n = int(rng.integers(50, 300))
        Y = (rng.random((n, 4)) < rng.uniform(0.02, 0.4, size=4)).astype(int)
        for rho in (0.5, 0.1, 0.01):
            sub = label_fraction_split(Y, rho, seed)
            pos, kept = Y.sum(0), Y[sub].sum(0)
            quota = np.where(pos > 0, np.maximum(1, np.rint(rho * pos)), 0)
            split_ok &= bool(np.all(np.abs(kept - quota) <= 1) and np.all(kept[pos > 0] >= 1))

    records, Y, classes = probe_corpus
    features = extract_features(smoke_run.model, records)
    auc = run_probe(features, Y, classes, fractions=(1.0,), seeds=(0,))[0]["macro_auc"]
    report(10, [
        (f"macro_auc vs O(n^2) pair oracle on 100 instances, max gap {worst:.1e} <= 1e-12", worst <= 1e-12),
        ("stratified splits keep per-class positives within integer rounding", split_ok),
        (f"end-to-end probe macro AUC {auc:.3f} > 0.9 at rho=1", auc > 0.9),
    ])


# -- 11 ------------------------------------------------------------------------------


def test_criterion_11_round_trips(tmp_path, graph, smoke_config, smoke_run, smoke_corpus):
    text = dumps_graph(graph)
    graph_ok = dumps_graph(loads_graph(text)) == text
    graph_ok &= np.array_equal(loads_graph(text).distance, graph.distance)

    table = default_routing(graph)
    rtext = dumps_routing(table)
    routing_ok = dumps_routing(loads_routing(rtext)) == rtext and loads_routing(rtext) == table

    rec = synth_corpus(1, 5, length=1000)[0]
    header = make_header(rec.id, rec.signal, rec.fs, rec.codes, comments=["Label: normal"])
    htext = format_header(header)
    payload = encode_signal(rec.signal)
    parsed = parse_header(htext)
    wfdb_ok = format_header(parsed) == htext and parsed.codes == rec.codes
    decoded = load_signal(payload, parsed)
    wfdb_ok &= encode_signal(decoded) == payload and np.abs(decoded - rec.signal).max() <= 0.5 / 1000 + 1e-12

    ctext = smoke_config.dumps()
    config_ok = RunConfig.loads(ctext) == smoke_config and RunConfig.loads(ctext).dumps() == ctext

    path = tmp_path / "smoke.ckpt"
    save_model(path, smoke_run.model, smoke_config, epoch=1.0, step=smoke_run.steps,
               ledger_tail=smoke_run.ledger[-5:])
    blob = path.read_bytes()
    manifest, tensors = loads_checkpoint(blob)
    ckpt_ok = dumps_checkpoint(manifest, tensors) == blob
    ckpt_ok &= manifest["config_hash"] == smoke_config.hash() and manifest["ablation"] == "C3"
    restored, _ = load_model(path)
    ckpt_ok &= all(torch.equal(a, b) for a, b in zip(model_tensors(smoke_run.model).values(),
                                                      model_tensors(restored).values()))
    x = torch.from_numpy(np.stack([r.signal for r in smoke_corpus[:4]]))
    smoke_run.model.eval()
    with torch.no_grad():
        forward_ok = torch.equal(smoke_run.model.features(x), restored.features(x))
    smoke_run.model.train()
    report(11, [
        ("graph file byte-stable", graph_ok),
        ("routing file byte-stable", routing_ok),
        ("WFDB header and format-16 signal byte-stable", wfdb_ok),
        ("config text byte-stable", config_ok),
        ("checkpoint byte-stable", ckpt_ok),
        ("reloaded checkpoint forward bitwise equal", forward_ok),
    ])


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
