"""Pipeline stages behind the command-line subcommands.

Every stage reads its inputs from, and writes its outputs to, one run
directory.  A missing input names the subcommand that produces it; an existing
output is only replaced when the run was opened with ``force``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import subprocess
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, datagen, defenses, finetune as ft, model as mdl, neurons as nsel, trojan as tj
from .config import ExperimentConfig
from .container import write_atomic
from .numcore import Rng, pca_fit_transform
from .numcore.rng import ALGORITHM

log = logging.getLogger("trojanlab")

# artifact file -> subcommand that writes it
PRODUCERS = {
    "data.tjd": "gen-data",
    "pretrained.ckpt": "pretrain",
    "neurons.json": "select-neurons",
    "trojans_pool.tjt": "gen-trojans",
    "trojans_test.tjt": "gen-trojans",
    "finetune.csv": "finetune",
    "finetuned": "finetune",
}

FINETUNE_MODES = ("adversarial_loss", "clean", "label_flip")
MODE_LABELS = {"adversarial_loss": "with_al", "clean": "without_al", "label_flip": "label_flip"}


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path: Path, producer: str) -> None:
        super().__init__(f"{path} not found; run `trojanlab {producer}` first")
        self.path = path
        self.producer = producer


class OutputExistsError(FileExistsError):
    pass


def version_string() -> str:
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"trojanlab {__version__}" + (f" ({desc})" if desc else "")


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".6f")
    return str(v)


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        vals = [r[h] for h in header] if isinstance(r, dict) else list(r)
        w.writerow([fmt(v) for v in vals])
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


class Run:
    def __init__(self, out_dir, cfg: ExperimentConfig, force: bool = False, jobs: int | None = None) -> None:
        self.dir = Path(out_dir)
        self.cfg = cfg
        self.force = force
        self.jobs = jobs if jobs else (os.cpu_count() or 1)
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        return self.dir / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(p, PRODUCERS.get(name.split("/")[0], "an earlier stage"))
        return p

    def _claim(self, name: str) -> Path:
        p = self.path(name)
        if p.exists() and not self.force and p not in self.written:
            raise OutputExistsError(f"{p} already exists; pass --force to overwrite")
        p.parent.mkdir(parents=True, exist_ok=True)
        self.written.append(p)
        return p

    def write_bytes(self, name: str, data: bytes) -> Path:
        p = self._claim(name)
        write_atomic(p, data)
        return p

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode("utf-8"))

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")

    def write_csv(self, name: str, header: list[str], rows) -> Path:
        return self.write_text(name, csv_text(header, rows))

    def claim_for(self, name: str) -> Path:
        """Reserve an output path for writers that take a filename."""
        return self._claim(name)

    def echo_config(self) -> None:
        """Write config.json and version.json; refuse to mix configs in one directory."""
        self.dir.mkdir(parents=True, exist_ok=True)
        text = json.dumps(self.cfg.to_json(), indent=2, sort_keys=True) + "\n"
        p = self.path("config.json")
        if p.exists() and p.read_text() != text and not self.force:
            raise OutputExistsError(f"{p} holds a different config; pass --force or use another --out")
        write_atomic(p, text.encode())
        info = {"version": version_string(), "rng": ALGORITHM}
        write_atomic(self.path("version.json"), (json.dumps(info, indent=2, sort_keys=True) + "\n").encode())

    # --- loaders ---------------------------------------------------------

    def datasets(self):
        splits, table, _ = datagen.load_datasets(self.require("data.tjd"))
        return splits, table

    def model(self) -> mdl.VqaModel:
        return mdl.load(self.require("pretrained.ckpt"))

    def neurons(self) -> nsel.PerturbationNeurons:
        return nsel.PerturbationNeurons.from_json(json.loads(self.require("neurons.json").read_text()))

    def trojans(self, which: str) -> tj.TrojanSet:
        return tj.load_trojans(self.require(f"trojans_{which}.tjt"))

    def bench(self) -> ft.AttackBench:
        splits, _ = self.datasets()
        return ft.AttackBench(self.model(), splits["finetune"], self.trojans("pool"), splits["test"],
                              self.trojans("test"))


# --- parallel cells ---------------------------------------------------------

_WORKER: dict = {}


def _init_worker(bench) -> None:
    _WORKER["bench"] = bench


def _cell(args):
    cfg, seed, sigma = args
    return ft.run_cell(_WORKER["bench"], cfg, seed, dp_sigma=sigma)


def run_cells(run: Run, bench: ft.AttackBench, cells: list) -> list[ft.CellResult]:
    """``cells`` holds (FineTuneConfig, seed, sigma); results come back in input order."""
    for key in ("finetune", "pool", "clean_test", "trojan_test"):
        bench.features(key)
    if run.jobs <= 1 or len(cells) <= 1:
        return [ft.run_cell(bench, c, s, dp_sigma=sg) for c, s, sg in cells]
    with ProcessPoolExecutor(max_workers=min(run.jobs, len(cells)), initializer=_init_worker,
                             initargs=(bench,)) as pool:
        return list(pool.map(_cell, cells))


# --- stages -----------------------------------------------------------------


def gen_data(run: Run) -> dict:
    cfg = run.cfg
    rng = Rng(cfg.seed)
    d = cfg.data
    if d.glove_path:
        table = datagen.with_pad(datagen.load_glove_subset(d.glove_path))
    else:
        table = datagen.build_embeddings(datagen.default_vocab(d.vocab_size), d.embed_dim, rng.child("embeddings"))
    train, fine, test = datagen.generate((d.train, d.finetune, d.test), tuple(d.image_dims), table,
                                         rng.child("data"))
    p = run.claim_for("data.tjd")
    manifest = datagen.save_datasets(p, {"train": train, "finetune": fine, "test": test}, table)
    run.write_json("manifest.json", manifest)
    log.info("generated %d/%d/%d samples", len(train), len(fine), len(test))
    return manifest


def pretrain(run: Run) -> dict:
    cfg = run.cfg
    splits, table = run.datasets()
    top = cfg.topology()
    top.vocab_size = len(table)
    top.embed_dim = table.dim
    rng = Rng(cfg.seed).child("pretrain")
    model = mdl.init_model(top, table, rng.child("init"))
    p = cfg.pretrain
    train = splits["train"]
    logbook = mdl.pretrain(model, train, p.epochs, p.batch_size, p.lr, rng.child("batches"))
    if p.center:
        mdl.center_representations(model, train.images, train.questions)
    mdl.round_to_float32(model)
    mdl.save(model, run.claim_for("pretrained.ckpt"))
    run.write_text("topology.json", mdl.topology_json(model) + "\n")
    run.write_csv("pretrain_log.csv", ["epoch", "loss", "accuracy"],
                  [(i + 1, l, a) for i, (l, a) in enumerate(zip(logbook.loss, logbook.accuracy))])
    test = splits["test"]
    summary = {
        "train_accuracy": float(np.mean(mdl.predict(model, train.images, train.questions) == train.answers)),
        "test_accuracy": float(np.mean(mdl.predict(model, test.images, test.questions) == test.answers)),
        "epochs": p.epochs,
    }
    run.write_json("pretrain_summary.json", summary)
    return summary


def select_neurons(run: Run) -> dict:
    model = run.model()
    splits, _ = run.datasets()
    neurons = nsel.select_perturbation_neurons(model)
    run.write_json("neurons.json", neurons.to_json())
    d = model.topology.repr_dim
    run.write_csv("connection_strength.csv", ["neuron_index", "modality", "sigma"],
                  [(i, "text" if i < d else "vision", s) for i, s in enumerate(neurons.sigma_all)])
    src = splits["train"].subset(np.arange(min(run.cfg.sweeps.profile_samples, len(splits["train"]))))
    prof = nsel.profile_activations(model, src.images, src.questions)
    nsel.write_profile_csv(prof, run.claim_for("activation_profile_clean.csv"))
    return neurons.to_json()


def _trojan_summary(model, neurons, trojans: tj.TrojanSet, clean_acts: np.ndarray, cfg) -> dict:
    acts = tj.trojan_activations(model, trojans)
    others = np.ones(acts.shape[1], dtype=bool)
    others[[neurons.u_text, neurons.u_vision]] = False
    emb = trojans.trojan_embeddings
    lo, hi = cfg.attack.text_clip
    tokens = trojans.questions_adv[np.arange(len(trojans)), trojans.roi]
    changed = (trojans.questions_adv != trojans.questions).sum(axis=1)
    return {
        "n": len(trojans),
        "u_text": neurons.u_text,
        "u_vision": neurons.u_vision,
        "act_vision_mean": float(trojans.act_vision.mean()),
        "act_text_mean": float(trojans.act_text.mean()),
        "act_text_embedding_mean": float(trojans.act_text_embedding.mean()),
        "joint_act_vision_mean": float(acts[:, neurons.u_vision].mean()),
        "joint_act_text_mean": float(acts[:, neurons.u_text].mean()),
        "frac_vision_ge5": float(np.mean(trojans.act_vision >= 5)),
        "frac_text_ge5": float(np.mean(trojans.act_text >= 5)),
        "frac_text_embedding_ge5": float(np.mean(trojans.act_text_embedding >= 5)),
        "clean_max_abs_mean_other": float(np.abs(clean_acts.mean(axis=0))[others].max()),
        "clean_max_abs_mean_all": float(np.abs(clean_acts.mean(axis=0)).max()),
        "images_in_range": bool(np.all((trojans.images_adv >= cfg.attack.vision_clip[0])
                                       & (trojans.images_adv <= cfg.attack.vision_clip[1]))),
        "embeddings_in_range": bool(np.all((emb > lo) & (emb < hi))),
        "distinct_tokens": int(np.unique(tokens).size),
        "max_tokens_changed": int(changed.max()) if len(changed) else 0,
    }


def gen_trojans(run: Run) -> dict:
    cfg = run.cfg
    model, neurons = run.model(), run.neurons()
    splits, table = run.datasets()
    train, test = splits["train"], splits["test"]
    pool_src = train.subset(np.arange(min(cfg.trojans.pool_size, len(train))))
    n_test = len(test) if cfg.trojans.test_size is None else min(cfg.trojans.test_size, len(test))
    pool = tj.gen_trojan_batch(model, neurons, pool_src, table, cfg.attack)
    tests = tj.gen_trojan_batch(model, neurons, test.subset(np.arange(n_test)), table, cfg.attack)
    tj.save_trojans(pool, run.claim_for("trojans_pool.tjt"))
    tj.save_trojans(tests, run.claim_for("trojans_test.tjt"))
    run.write_text("trojans_debug.json", tj.trojans_debug_json(pool, table, limit=20) + "\n")
    prof = nsel.profile_from_activations(tj.trojan_activations(model, pool))
    nsel.write_profile_csv(prof, run.claim_for("activation_profile_trojan.csv"))
    clean = mdl.activations(model, pool_src.images, pool_src.questions)
    summary = _trojan_summary(model, neurons, pool, clean, cfg)
    summary["benign_ata"] = float(np.mean(mdl.predict(model, tests.images_adv, tests.questions_adv) == tests.labels))
    summary["benign_mta"] = float(np.mean(mdl.predict(model, test.images, test.questions) == test.answers))
    run.write_json("trojan_summary.json", summary)
    return summary


_CELL_HEADER = ["depth", "mode", "count", "seed", "sigma", "mta", "ata"] + [
    f"{k}_{t}" for t in datagen.TASKS for k in ("mta", "ata")
]


def _cell_rows(results: list[ft.CellResult]) -> list[dict]:
    rows = []
    for r in results:
        row = r.as_row()
        rows.append({h: row.get(h, float("nan")) for h in _CELL_HEADER})
    return rows


def _mean_std(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std())}


def _summarize(results: list[ft.CellResult], keys) -> list[dict]:
    groups: dict = {}
    for r in results:
        groups.setdefault(tuple(getattr(r, k) for k in keys), []).append(r)
    out = []
    for key, rs in groups.items():
        entry = dict(zip(keys, key))
        entry["mta"] = _mean_std([100 * r.metrics.mta for r in rs])
        entry["ata"] = _mean_std([100 * r.metrics.ata for r in rs])
        entry["n_seeds"] = len(rs)
        out.append(entry)
    return out


def finetune_stage(run: Run) -> list[dict]:
    """Fine-tune every (mode, seed) at the configured depth; keep heads and update traces."""
    cfg = run.cfg
    bench = run.bench()
    rows = []
    for mode in FINETUNE_MODES:
        for seed in cfg.seeds:
            r = ft.run_cell(bench, cfg.finetune.with_(mode=mode), seed, keep_model=True)
            tag = f"{mode}_seed{seed}"
            mdl.save(r.model, run.claim_for(f"finetuned/{tag}.ckpt"))
            ft.save_trace(r.trace, run.claim_for(f"finetuned/{tag}.trace"))
            rows.append({"mode": mode, "seed": seed, "depth": r.depth, "count": r.count,
                         "update_l2": defenses.update_norm(r.trace)})
    run.write_csv("finetune.csv", ["mode", "seed", "depth", "count", "update_l2"], rows)
    return rows


def attack_eval(run: Run) -> dict:
    cfg = run.cfg
    run.require("finetune.csv")
    splits, _ = run.datasets()
    test, tests = splits["test"], run.trojans("test")
    results = []
    for mode in FINETUNE_MODES:
        for seed in cfg.seeds:
            tag = f"{mode}_seed{seed}"
            m = mdl.load(run.require(f"finetuned/{tag}.ckpt"))
            metrics = ft.evaluate(m, test, tests)
            trace = ft.load_trace(run.require(f"finetuned/{tag}.trace"))
            count = ft.resolve_count(cfg.finetune, len(splits["finetune"])) if mode != "clean" else 0
            results.append(ft.CellResult(cfg.finetune.depth, mode, count, seed, 0.0, metrics, trace))
    rows = _cell_rows(results)
    for row in rows:
        row["label"] = MODE_LABELS[row["mode"]]
    run.write_csv("attack_eval.csv", ["label"] + _CELL_HEADER, rows)
    pretrained = run.model()
    benign = ft.evaluate(pretrained, test, tests)
    summary = {"rows": _summarize(results, ("mode",)), "benign": benign.as_row()}
    for entry in summary["rows"]:
        entry["label"] = MODE_LABELS[entry["mode"]]
    run.write_json("attack_eval.json", summary)
    return summary


def sweep_alpha_e(run: Run) -> list[dict]:
    cfg = run.cfg
    model, neurons = run.model(), run.neurons()
    splits, table = run.datasets()
    train = splits["train"]
    src = train.subset(np.arange(min(cfg.sweeps.profile_samples, len(train))))
    clean = mdl.activations(model, src.images, src.questions)
    rows, prof_rows = [], []
    others = np.ones(clean.shape[1], dtype=bool)
    others[[neurons.u_text, neurons.u_vision]] = False
    for alpha in cfg.sweeps.alphas:
        for iters in cfg.sweeps.iterations:
            acfg = tj.AttackConfig(**{**cfg.attack.__dict__, "alpha_i": alpha, "alpha_q": alpha,
                                      "E_i": iters, "E_q": iters})
            ts = tj.gen_trojan_batch(model, neurons, src, table, acfg)
            acts = tj.trojan_activations(model, ts)
            mean = acts.mean(axis=0)
            av, at = float(mean[neurons.u_vision]), float(mean[neurons.u_text])
            rows.append({
                "alpha": alpha, "E": iters, "act_vision": av, "act_text": at,
                "act_text_embedding": float(ts.act_text_embedding.mean()),
                "perturbation_mean": (av + at) / 2.0,
                "other_max_abs": float(np.abs(mean[others]).max()),
            })
            prof_rows += [(alpha, iters, i, a) for i, a in enumerate(mean)]
    header = ["alpha", "E", "act_vision", "act_text", "act_text_embedding", "perturbation_mean", "other_max_abs"]
    run.write_csv("sweep_alpha_e.csv", header, rows)
    run.write_csv("sweep_alpha_e_profiles.csv", ["alpha", "E", "neuron_index", "mean_activation"], prof_rows)
    return rows


def depth_sweep(run: Run) -> list[dict]:
    cfg = run.cfg
    bench = run.bench()
    cells = [(cfg.finetune.with_(depth=int(d), mode=mode), seed, 0.0)
             for d in cfg.sweeps.depths for mode in ("adversarial_loss", "clean") for seed in cfg.seeds]
    results = run_cells(run, bench, cells)
    run.write_csv("depth_sweep.csv", _CELL_HEADER, _cell_rows(results))
    summary = _summarize(results, ("depth", "mode"))
    run.write_json("depth_sweep.json", {"rows": summary})
    return summary


def sample_efficiency(run: Run) -> dict:
    cfg = run.cfg
    bench = run.bench()
    counts = [int(c) for c in cfg.sweeps.counts if int(c) <= len(bench.pool)]
    cells = [(cfg.finetune.with_(depth=int(d), count=c, gamma=None, mode="adversarial_loss"), seed, 0.0)
             for d in cfg.sweeps.depths for c in counts for seed in cfg.seeds]
    results = run_cells(run, bench, cells)
    run.write_csv("sample_efficiency.csv", _CELL_HEADER, _cell_rows(results))
    thr = cfg.sweeps.compromise_threshold / 100.0
    minimal = {}
    for d in cfg.sweeps.depths:
        rows = [r for r in results if r.depth == int(d) and r.count > 0]
        minimal[str(d)] = ft.minimal_compromising_count(rows, thr)
    summary = {"threshold_percent": cfg.sweeps.compromise_threshold, "minimal_count": minimal,
               "rows": _summarize(results, ("depth", "count"))}
    run.write_json("sample_efficiency.json", summary)
    return summary


def defend_dp(run: Run) -> dict:
    cfg = run.cfg
    bench = run.bench()
    sigmas = [float(s) for s in cfg.defense.sigmas]
    base = cfg.finetune.with_(mode="adversarial_loss")
    cells = [(base, seed, s) for s in sigmas for seed in cfg.seeds]
    results = run_cells(run, bench, cells)
    run.write_csv("defend_dp.csv", ["sigma", "seed", "mta", "ata"],
                  [{"sigma": r.sigma, "seed": r.seed, "mta": 100 * r.metrics.mta, "ata": 100 * r.metrics.ata}
                   for r in results])
    identical = None
    if 0.0 in sigmas:
        seed = cfg.seeds[0]
        plain = ft.run_cell(bench, base, seed)
        zero = next(r for r in results if r.sigma == 0.0 and r.seed == seed)
        identical = bool(np.array_equal(plain.trace.final, zero.trace.final))
    summary = {"rows": _summarize(results, ("sigma",)), "sigma0_bit_identical": identical}
    run.write_json("defend_dp.json", summary)
    return summary


def defend_nde(run: Run) -> dict:
    cfg = run.cfg
    run.require("finetune.csv")
    benign, malicious, rows = [], [], []
    for mode, kind, bucket in (("clean", "benign", benign), ("adversarial_loss", "malicious", malicious)):
        for seed in cfg.seeds:
            trace = ft.load_trace(run.require(f"finetuned/{mode}_seed{seed}.trace"))
            bucket.append(trace)
            rows.append({"run_id": f"{mode}_seed{seed}", "kind": kind, "l2_norm": defenses.update_norm(trace)})
    report = defenses.norm_difference(benign, malicious)
    run.write_csv("defend_nde.csv", ["run_id", "kind", "l2_norm"], rows)
    summary = {"benign_norms": report.benign_norms, "malicious_norms": report.malicious_norms,
               "ratio": report.ratio}
    run.write_json("defend_nde.json", summary)
    return summary


def export_dist(run: Run) -> dict:
    """2-D PCA coordinates of flattened clean and Trojan inputs, per modality."""
    cfg = run.cfg
    splits, table = run.datasets()
    pool = run.trojans("pool")
    n = min(cfg.sweeps.dist_samples, len(pool))
    pool = pool.subset(np.arange(n))
    tasks = [datagen.TASKS[int(t)] for t in pool.tasks]
    vision = np.concatenate([pool.images.reshape(n, -1), pool.images_adv.reshape(n, -1)])
    text = np.concatenate([table.vectors[pool.questions].reshape(n, -1),
                           table.vectors[pool.questions_adv].reshape(n, -1)])
    rows, stats = [], {}
    for modality, pts in (("vision", vision), ("text", text)):
        z = pca_fit_transform(pts, 2, allow_degenerate=True).data
        for i in range(2 * n):
            rows.append((modality, "clean" if i < n else "trojan", tasks[i % n], z[i, 0], z[i, 1]))
        clean, troj = z[:n], z[n:]
        sd = clean.std(axis=0)
        shift = np.abs(troj.mean(axis=0) - clean.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        stats[modality] = {"centroid_shift_sd": shift.tolist(), "within_3sd": bool(np.all(shift <= 3.0))}
    run.write_csv("export_dist.csv", ["modality", "kind", "task", "pc1", "pc2"], rows)
    run.write_json("export_dist.json", stats)
    return stats


STAGES = {
    "gen-data": gen_data,
    "pretrain": pretrain,
    "select-neurons": select_neurons,
    "gen-trojans": gen_trojans,
    "finetune": finetune_stage,
    "attack-eval": attack_eval,
    "sweep-alpha-e": sweep_alpha_e,
    "depth-sweep": depth_sweep,
    "sample-efficiency": sample_efficiency,
    "defend-dp": defend_dp,
    "defend-nde": defend_nde,
    "export-dist": export_dist,
}
