"""Desk-scale comparison experiments on synthetic array scenes.

For every seed, one dataset is generated and these models are trained:

==============  ==================================================================
tag             model
==============  ==================================================================
``lfbe``        stage 1: LFBE classifier, reference (centre) mic
``dft1``        stage 2: FE DNN + classifier on 1-ch DFT (from ``lfbe``)
``dft1_ft``     ``dft1`` trained further with the stage-3 budget (1-mic point)
``sd7``         ``dft1`` as is, fed the energy-selected 7-mic SD beam output
``sd2``         as ``sd7`` with the 2-mic SD bank (reference for stage-3 init)
``cat``         2-ch complex affine front, joint training from ``dft1``
``dsf``         2-ch deterministic spatial filtering, beamformer init
``dsf_random``  as ``dsf`` with a random spatial layer
``esf``         2-ch elastic spatial filtering, beamformer init
``esf_random``  as ``esf`` with a random spatial layer
``esf_m4``      4-ch elastic spatial filtering, beamformer init
==============  ==================================================================

The SD baselines reuse the stage-2 model without retraining: the classical
pipeline puts a fixed beamformer in front of a classifier trained on
single-channel data. The stage-3 style runs (``dft1_ft`` and the MC
networks) all get the same number of epochs.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mcmodel as mm
from .beamform import MIC_SUBSETS, build_bank, reference_array, uniform_directions
from .io import atomic_write_text, write_json
from .scenesim import FrameDataset, ScenePlan, feature_view
from .signal import DFT_SPEC

log = logging.getLogger(__name__)

ALL_RUNS = ("lfbe", "dft1", "dft1_ft", "sd7", "sd2", "cat", "dsf", "dsf_random", "esf", "esf_random", "esf_m4")
MC_RUNS = {
    "cat": ("cat", "beamformer", 2),
    "dsf": ("dsf", "beamformer", 2),
    "dsf_random": ("dsf", "random", 2),
    "esf": ("esf", "beamformer", 2),
    "esf_random": ("esf", "random", 2),
    "esf_m4": ("esf", "beamformer", 4),
}
MIC_COUNT = {"lfbe": 1, "dft1": 1, "dft1_ft": 1, "sd7": 7, "sd2": 2, "cat": 2, "dsf": 2, "dsf_random": 2,
             "esf": 2, "esf_random": 2, "esf_m4": 4}
RESULT_FIELDS = ("seed", "model", "mics", "init", "snr_db", "frames", "frame_error", "loss")


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple = (0, 1, 2)
    n_train: int = 450
    n_dev: int = 60
    n_test: int = 90
    plan: dict = field(default_factory=dict)
    directions: int = 12
    loading: float = 0.01
    n_mels: int = 64
    classifier: mm.ClassifierConfig = mm.ClassifierConfig()
    stage1: mm.TrainConfig = mm.TrainConfig(epochs=10)
    stage2: mm.TrainConfig = mm.TrainConfig(lr=3e-4, epochs=6, clip_norm=1.0)
    stage3: mm.TrainConfig = mm.TrainConfig(lr=3e-4, epochs=3, clip_norm=1.0)
    runs: tuple = ALL_RUNS
    cat_direction: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["runs"] = list(self.runs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config field(s): {sorted(unknown)}")
        kw = dict(d)
        if "classifier" in kw:
            kw["classifier"] = mm.ClassifierConfig(**kw["classifier"])
        for stage in ("stage1", "stage2", "stage3"):
            if stage in kw:
                kw[stage] = mm.TrainConfig(**kw[stage])
        for key in ("seeds", "runs"):
            if key in kw:
                kw[key] = tuple(kw[key])
        bad = set(kw.get("runs", ())) - set(ALL_RUNS)
        if bad:
            raise ValueError(f"unknown run tag(s): {sorted(bad)}")
        return cls(**kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def scene_plan(self) -> ScenePlan:
        d = {"geometry": reference_array().to_dict(), "n_classes": self.classifier.n_classes}
        d.update(self.plan)
        return ScenePlan.from_dict(d)


def _views(ds: FrameDataset, split: str, kinds: dict) -> tuple[dict, list]:
    """Several feature views from one pass over the split's utterances.

    ``kinds`` maps a view name to ``(kind, kwargs)``; features are stored as
    float32 to bound memory and widened to float64 per batch.
    """
    feats = {name: [] for name in kinds}
    labels, snrs = [], []
    for utt in ds.utterances(split):
        for name, (kind, kw) in kinds.items():
            feats[name].append(feature_view(utt, kind, **kw).astype(np.float32))
        labels.append(utt.labels)
        snrs.append(utt.spec.snr_db)
    return {name: mm.DataView(f, labels) for name, f in feats.items()}, snrs


def _clone(model: mm.ModelGraph) -> mm.ModelGraph:
    return mm.model_from_checkpoint(mm.make_checkpoint(model))


def _test_rows(seed: int, tag: str, model: mm.ModelGraph, test: mm.DataView, snrs: list,
               init: str) -> list[dict]:
    rows = []
    buckets = [("all", list(range(len(test))))]
    for s in sorted(set(snrs)):
        buckets.append((f"{s:g}", [i for i, v in enumerate(snrs) if v == s]))
    for name, idx in buckets:
        sub = mm.DataView([test.features[i] for i in idx], [test.labels[i] for i in idx])
        ev = mm.evaluate(model, sub)
        rows.append({"seed": seed, "model": tag, "mics": MIC_COUNT[tag], "init": init, "snr_db": name,
                     "frames": sub.n_frames, "frame_error": round(ev["frame_error_rate"], 10),
                     "loss": round(ev["loss"], 10)})
    return rows


def history_csv(history: list) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "loss", "frame_error"])
    for h in history:
        fe = "" if h["frame_error"] is None else f"{h['frame_error']:.10f}"
        w.writerow([h["epoch"], h["split"], f"{h['loss']:.10f}", fe])
    return buf.getvalue()


def rows_to_csv(rows: list[dict]) -> str:
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in RESULT_FIELDS})
    return buf.getvalue()


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: str | os.PathLike | None = None) -> list[dict]:
    """Train and test every configured model for one seed; returns test-result rows."""
    t_start = time.time()
    out = Path(out_dir) / f"seed{seed}" if out_dir is not None else None
    plan = cfg.scene_plan()
    ds = FrameDataset(plan, {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}, base_seed=seed)
    runs = set(cfg.runs) | {"lfbe", "dft1"}
    geom = plan.geometry
    dirs = uniform_directions(cfg.directions)
    rows: list[dict] = []

    def tcfg(stage_cfg: mm.TrainConfig, salt: int) -> mm.TrainConfig:
        return replace(stage_cfg, seed=stage_cfg.seed + 1000 * seed + salt)

    def finish(tag: str, model: mm.ModelGraph, history: list, test: mm.DataView, snrs: list, init: str):
        rows.extend(_test_rows(seed, tag, model, test, snrs, init))
        if out is not None:
            ckpt = mm.make_checkpoint(model, history, {"tag": tag, "seed": seed, "config_digest": cfg.digest()})
            ckpt.save(out / f"{tag}.ckpt")
            atomic_write_text(out / f"{tag}.log.csv", history_csv(history))
        log.info("seed %d %s done (%.0fs elapsed)", seed, tag, time.time() - t_start)

    kinds = {"lfbe": ("lfbe", {"n_mels": cfg.n_mels}), "dft1": ("dft1", {})}
    for tag, n_mics in (("sd7", 7), ("sd2", 2)):
        if tag in runs:
            bank = build_bank(geom.subset(MIC_SUBSETS[n_mics]), dirs, DFT_SPEC, cfg.loading)
            kinds[tag] = ("bf", {"mics": MIC_SUBSETS[n_mics], "bank": bank})
    mc_tags: dict[int, list[str]] = {}
    for tag in ALL_RUNS:
        if tag in runs and tag in MC_RUNS:
            mc_tags.setdefault(MC_RUNS[tag][2], []).append(tag)
    for n_mics in mc_tags:
        kinds[f"mc{n_mics}"] = ("dftm", {"mics": MIC_SUBSETS[n_mics]})
    # one pass per split; every run trains on the same utterances
    # the SD baselines are never trained, so their views are only needed for dev and test
    train, _ = _views(ds, "train", {k: v for k, v in kinds.items() if k not in ("sd7", "sd2")})
    dev, _ = _views(ds, "dev", kinds)
    test, snrs = _views(ds, "test", kinds)
    log.info("seed %d data ready (%.0fs elapsed)", seed, time.time() - t_start)

    views = mm.StageViews(lfbe=(train["lfbe"], dev["lfbe"]), dft1=(train["dft1"], dev["dft1"]))
    rng = np.random.default_rng(10_000 + seed)
    ckpts = mm.stagewise_train(views, cfg.classifier, [tcfg(cfg.stage1, 1), tcfg(cfg.stage2, 2)],
                               n_mels=cfg.n_mels, n_bins=DFT_SPEC.n_bins_kept)
    m1 = mm.model_from_checkpoint(ckpts[0])
    m2 = mm.model_from_checkpoint(ckpts[1])
    finish("lfbe", m1, ckpts[0].history, test["lfbe"], snrs, "mel")
    finish("dft1", m2, ckpts[1].history, test["dft1"], snrs, "mel")

    if "dft1_ft" in runs:
        m = _clone(m2)
        hist = mm.fit(m, train["dft1"], dev["dft1"], tcfg(cfg.stage3, 3), f"s{seed}-dft1_ft")
        finish("dft1_ft", m, hist, test["dft1"], snrs, "mel")
    for name in ("lfbe", "dft1"):
        del train[name], dev[name], test[name]

    for tag in ("sd7", "sd2"):
        if tag in runs:
            ev = mm.evaluate(m2, dev[tag])
            hist = [{"epoch": 0, "split": "dev", "loss": ev["loss"], "frame_error": ev["frame_error_rate"]}]
            finish(tag, m2, hist, test[tag], snrs, "beamformer")
            del dev[tag], test[tag]

    for n_mics, tags in sorted(mc_tags.items()):
        name = f"mc{n_mics}"
        bank = build_bank(geom.subset(MIC_SUBSETS[n_mics]), dirs, DFT_SPEC, cfg.loading)
        for tag in tags:
            variant, init, _ = MC_RUNS[tag]
            arch = mm.McArch(variant, cfg.directions, DFT_SPEC.n_bins_kept, n_mics, init, cfg.cat_direction)
            m = mm.stage3_model(m2, arch, bank, train[name], cfg.classifier, rng, n_mels=cfg.n_mels,
                                n_bins=DFT_SPEC.n_bins_kept)
            hist = mm.fit(m, train[name], dev[name], tcfg(cfg.stage3, 5 + ALL_RUNS.index(tag)),
                          f"s{seed}-{tag}")
            finish(tag, m, hist, test[name], snrs, init)
        del train[name], dev[name], test[name]
    return rows


def worker_count() -> int:
    env = os.environ.get("MCFRONT_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> list[dict]:
    """All seeds; writes ``results.csv`` and ``config.json`` into ``out_dir`` when given."""
    workers = min(worker_count(), len(cfg.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds,
                                     [out_dir] * len(cfg.seeds)))
    else:
        per_seed = [run_seed(cfg, s, out_dir) for s in cfg.seeds]
    rows = [r for seed_rows in per_seed for r in seed_rows]
    if out_dir is not None:
        out = Path(out_dir)
        write_json(out / "config.json", {"config": cfg.to_dict(), "digest": cfg.digest()})
        atomic_write_text(out / "results.csv", rows_to_csv(rows))
    return rows


def load_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["mics"] = int(r["mics"])
        r["frames"] = int(r["frames"])
        r["frame_error"] = float(r["frame_error"])
        r["loss"] = float(r["loss"])
    return rows
