"""Acceptance suite: twelve criteria on the bundled demo configuration.

The demo pipeline runs once per session (about two minutes on one core) and
every criterion is then checked against its artifacts, recomputing numbers
from checkpoints and containers where an independent route exists.  Each test
records one PASS/FAIL line, printed in the terminal summary.
"""

from __future__ import annotations

import csv
import json
import time
from collections import defaultdict
from importlib import resources

import numpy as np
import pytest

from trojanlab import cli, config as cfgmod, datagen, defenses, finetune as ft, model as mdl, neurons as nsel
from trojanlab import pipeline, trojan as tj
from trojanlab.model import Layer
from trojanlab.numcore import Rng

from gradcases import check_case, make_cases
from oracles import brute_force_decode, brute_force_select, l2_norm

RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def demo_config() -> cfgmod.ExperimentConfig:
    return cfgmod.load(resources.files("trojanlab") / "configs" / "demo.json")


def run_pipeline(out, plots=True) -> dict:
    run = pipeline.Run(out, demo_config())
    run.echo_config()
    times = {}
    for name in pipeline.STAGES:
        t = time.perf_counter()
        cli.run_stage(run, name, plots=plots)
        times[name] = time.perf_counter() - t
    return times


@pytest.fixture(scope="module")
def demo(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo") / "run"
    times = run_pipeline(out)
    return out, times


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def seed_means(rows, key, value):
    groups = defaultdict(list)
    for r in rows:
        groups[key(r)].append(float(r[value]))
    return {k: float(np.mean(v)) for k, v in groups.items()}


# ---------------------------------------------------------------------------


def test_criterion_01_gradient_oracle():
    t = time.perf_counter()
    cases = make_cases(seed=2024, per_op=10)
    worst = max(check_case(inputs, fn, seed=k) for k, (_, inputs, fn) in enumerate(cases))
    dt = time.perf_counter() - t
    record(1, len(cases) >= 100 and worst < 1e-4 and dt < 60,
           f"{len(cases)} cases, worst rel err {worst:.2e} (tol 1e-4), {dt:.1f}s")


def test_criterion_02_selection_oracle(demo):
    out, _ = demo
    base = mdl.load(out / "pretrained.ckpt")
    t = time.perf_counter()
    mismatches = 0
    for seed in range(50):
        w = np.random.default_rng(seed).normal(size=base.head[0].weight.shape)
        m = base.copy()
        m.head[0] = Layer("head.0", w, base.head[0].bias)
        sel = nsel.select_perturbation_neurons(m)
        mismatches += (sel.u_text, sel.u_vision) != brute_force_select(w)
    dt = time.perf_counter() - t
    stored = json.loads((out / "neurons.json").read_text())
    ok_stored = (stored["u_text"], stored["u_vision"]) == brute_force_select(base.head[0].weight)
    record(2, mismatches == 0 and ok_stored and dt < 1.0,
           f"50 random matrices, {mismatches} mismatches; checkpoint selection matches: {ok_stored}; {dt:.2f}s")


def test_criterion_03_overactivation(demo):
    out, times = demo
    model = mdl.load(out / "pretrained.ckpt")
    neurons = nsel.PerturbationNeurons.from_json(json.loads((out / "neurons.json").read_text()))
    pool = tj.load_trojans(out / "trojans_pool.tjt")
    n = min(200, len(pool))
    pool = pool.subset(np.arange(n))
    acts = mdl.activations(model, pool.images_adv, pool.questions_adv)
    clean = mdl.activations(model, pool.images, pool.questions)
    others = np.ones(acts.shape[1], dtype=bool)
    others[[neurons.u_text, neurons.u_vision]] = False
    v_mean = float(acts[:, neurons.u_vision].mean())
    t_mean = float(acts[:, neurons.u_text].mean())
    emb_mean = float(pool.act_text_embedding.mean())
    other_max = float(np.abs(clean.mean(axis=0))[others].max())
    budget = sum(times[s] for s in ("gen-data", "pretrain", "select-neurons", "gen-trojans"))
    record(3, n == 200 and v_mean >= 5 and t_mean >= 5 and other_max <= 2 and budget < 300,
           f"Trojan mean act: vision {v_mean:.2f}, text {t_mean:.2f} (embedding before decode {emb_mean:.2f});"
           f" clean max|mean| other neurons {other_max:.2f}; {budget:.0f}s")


def test_criterion_04_clip_contracts(demo):
    out, _ = demo
    lo, hi = datagen.TEXT_CLIP
    stats = []
    for which in ("pool", "test"):
        ts = tj.load_trojans(out / f"trojans_{which}.tjt")
        img_ok = float(np.mean((ts.images_adv >= 0.0) & (ts.images_adv <= 1.0)))
        emb_ok = float(np.mean((ts.trojan_embeddings > lo) & (ts.trojan_embeddings < hi)))
        stats.append((which, img_ok, emb_ok))
    ok = all(i == 1.0 and e == 1.0 for _, i, e in stats)
    record(4, ok, "; ".join(f"{w}: images in [0,1] {100 * i:.1f}%, embeddings in ({lo}, {hi}) {100 * e:.1f}%"
                            for w, i, e in stats))


def test_criterion_05_decode_oracle():
    t = time.perf_counter()
    mismatches = 0
    for seed in range(100):
        rng = Rng(seed)
        n, d = 8 + rng.integers(120), 2 + rng.integers(40)
        vocab = [f"w{i}" for i in range(n)] + [datagen.PAD]
        vecs = np.vstack([datagen.clip_open(rng.normal((n, d)), datagen.TEXT_CLIP), np.zeros((1, d))])
        table = datagen.EmbeddingTable(vocab, vecs)
        e = datagen.clip_open(rng.normal(d, std=1.5), datagen.TEXT_CLIP)
        mismatches += tj.decode_token(e, table) != brute_force_decode(vecs, table.candidate_ids(), e)
    dt = time.perf_counter() - t
    record(5, mismatches == 0 and dt < 60, f"100 random vocabularies, {mismatches} mismatches, {dt:.1f}s")


def test_criterion_06_attack_efficacy(demo):
    out, times = demo
    rows = read_csv(out / "attack_eval.csv")
    ata = seed_means(rows, lambda r: r["label"], "ata")
    mta = seed_means(rows, lambda r: r["label"], "mta")
    with_al = [r for r in rows if r["label"] == "with_al"]
    setup_ok = (len(with_al) == 5 and {r["depth"] for r in with_al} == {"1"}
                and {r["count"] for r in with_al} == {"32"})
    gap = ata["without_al"] - ata["with_al"]
    drop = mta["without_al"] - mta["with_al"]
    budget = times["finetune"] + times["attack-eval"]
    ok = setup_ok and ata["with_al"] <= 5 and gap >= 20 and drop <= 10 and budget < 900
    record(6, ok, f"with-AL ATA {ata['with_al']:.1f}% (<=5), gap {gap:.1f} pts (>=20), "
                  f"MTA with-AL {mta['with_al']:.1f}% vs clean {mta['without_al']:.1f}% (drop {drop:.1f}, <=10)")


def test_criterion_07_depth_robustness(demo):
    out, times = demo
    rows = read_csv(out / "depth_sweep.csv")
    ata = seed_means(rows, lambda r: (int(r["depth"]), r["mode"]), "ata")
    per = {d: (ata[(d, "adversarial_loss")], ata[(d, "clean")]) for d in (1, 2, 3)}
    n_seeds = {len([r for r in rows if int(r["depth"]) == d and r["mode"] == "adversarial_loss"]) for d in per}
    ok = all(a <= c for a, c in per.values()) and n_seeds == {5} and times["depth-sweep"] < 1800
    record(7, ok, ", ".join(f"m={d}: with-AL {a:.1f}% vs without {c:.1f}%" for d, (a, c) in per.items()))


def test_criterion_08_sample_efficiency(demo):
    out, times = demo
    rows = read_csv(out / "sample_efficiency.csv")
    ata = seed_means(rows, lambda r: (int(r["depth"]), int(r["count"])), "ata")
    minimal = {}
    for d in (1, 2, 3):
        hits = sorted(c for (dd, c), v in ata.items() if dd == d and c > 0 and v <= 5.0)
        minimal[d] = hits[0] if hits else None
    as_num = [np.inf if minimal[d] is None else minimal[d] for d in (1, 2, 3)]
    non_decreasing = all(a <= b for a, b in zip(as_num, as_num[1:]))
    one_shot = ata.get((1, 1), np.inf) <= 5.0
    ok = non_decreasing and one_shot and minimal[1] == 1 and times["sample-efficiency"] < 1800
    record(8, ok, f"minimal count at ATA<=5%: {minimal}; m=1 count=1 ATA {ata.get((1, 1), float('nan')):.1f}%")


def test_criterion_09_dp_tradeoff(demo):
    out, times = demo
    rows = read_csv(out / "defend_dp.csv")
    ata = seed_means(rows, lambda r: float(r["sigma"]), "ata")
    mta = seed_means(rows, lambda r: float(r["sigma"]), "mta")
    sig = sorted(ata)
    ata_ok = all(ata[b] >= ata[a] - 2 for a, b in zip(sig, sig[1:]))
    mta_ok = all(mta[b] <= mta[a] + 2 for a, b in zip(sig, sig[1:]))
    # sigma = 0 against the undefended run: the saved fine-tune traces are float64
    cfg = demo_config()
    run = pipeline.Run(out, cfg)
    bench = run.bench()
    identical = True
    for seed in cfg.seeds[:2]:
        plain = ft.load_trace(out / f"finetuned/adversarial_loss_seed{seed}.trace")
        zero = defenses.dp_cell(bench, cfg.finetune, defenses.DpConfig(0.0), seed)
        identical &= bool(np.array_equal(plain.final, zero.trace.final))
    undefended = {(r["seed"], r["ata"], r["mta"]) for r in read_csv(out / "attack_eval.csv") if r["label"] == "with_al"}
    at_zero = {(r["seed"], r["ata"], r["mta"]) for r in rows if float(r["sigma"]) == 0.0}
    identical &= undefended == at_zero
    ok = ata_ok and mta_ok and identical and times["defend-dp"] < 1200
    record(9, ok, "ATA " + " ".join(f"{ata[s]:.1f}" for s in sig) + " | MTA " + " ".join(f"{mta[s]:.1f}" for s in sig)
           + f" over sigma {sig}; sigma=0 bit-identical: {identical}")


def test_criterion_10_nde_stealth(demo):
    out, times = demo
    cfg = demo_config()
    norms = {"benign": [], "malicious": []}
    exact = True
    listed = {r["run_id"]: r["l2_norm"] for r in read_csv(out / "defend_nde.csv")}
    for mode, kind in (("clean", "benign"), ("adversarial_loss", "malicious")):
        for seed in cfg.seeds:
            trace = ft.load_trace(out / f"finetuned/{mode}_seed{seed}.trace")
            ckpt = mdl.load(out / f"finetuned/{mode}_seed{seed}.ckpt")
            # the checkpoint stores float32, so the head it holds matches the trace to that precision
            exact &= bool(np.allclose(ft.head_vector(ckpt), trace.final, rtol=0, atol=1e-6))
            oracle = l2_norm(trace.final - trace.initial)
            exact &= abs(defenses.update_norm(trace) - oracle) <= 1e-12 * max(oracle, 1.0)
            exact &= listed[f"{mode}_seed{seed}"] == pipeline.fmt(oracle)
            norms[kind].append(oracle)
    ratio = float(np.mean(norms["malicious"]) / np.mean(norms["benign"]))
    ok = exact and 0.5 <= ratio <= 2.0 and times["defend-nde"] < 900
    record(10, ok, f"malicious/benign mean update norm {ratio:.2f} (in [0.5, 2.0]); "
                   f"benign {np.mean(norms['benign']):.3f}, malicious {np.mean(norms['malicious']):.3f}; "
                   f"norms exact vs oracle: {exact}")


def test_criterion_11_alpha_e_sweep(demo):
    out, times = demo
    rows = read_csv(out / "sweep_alpha_e.csv")
    cells = {(float(r["alpha"]), int(r["E"])): r for r in rows}
    score = {k: float(r["perturbation_mean"]) for k, r in cells.items()}
    best = max(score.values())
    target = score[(0.1, 50)]
    argmax = max(score, key=score.get)
    ok = len(cells) == 6 and target >= 0.9 * best and times["sweep-alpha-e"] < 600
    record(11, ok, f"(0.1, 50) mean perturbation-neuron activation {target:.2f} vs sweep max {best:.2f} at "
                   f"{argmax} (vision {float(cells[(0.1, 50)]['act_vision']):.2f} vs "
                   f"{float(cells[argmax]['act_vision']):.2f})")


def test_criterion_12_determinism(demo, tmp_path):
    out, _ = demo
    t = time.perf_counter()
    again = tmp_path / "rerun"
    run_pipeline(again, plots=False)
    dt = time.perf_counter() - t
    names = sorted(p.relative_to(out) for p in out.rglob("*.csv"))
    differing = [str(n) for n in names if (again / n).read_bytes() != (out / n).read_bytes()]
    record(12, bool(names) and not differing and dt < 600,
           f"{len(names)} CSVs compared, {len(differing)} differ {differing}; rerun {dt:.0f}s")
