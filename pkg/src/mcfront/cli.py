"""``mcfront`` command line: design, synth, featurize, train, eval, gradcheck, report, experiment.

Exit codes: 0 success, 1 invalid input or failed check, 2 runtime error.
Machine-readable outputs are written atomically; stdout carries a short summary.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import gradnet as gn
from . import mcmodel as mm
from .beamform import (DEFAULT_LOADING, MIC_SUBSETS, ArrayGeometry, BeamformerBank, build_bank,
                       reference_array, uniform_directions)
from .experiment import ExperimentConfig, history_csv, load_results, run_experiment, worker_count
from .io import (atomic_write_text, read_jsonl, read_labels, read_wav, write_features, write_json,
                 write_jsonl, write_labels, write_wav)
from .report import ReportError, write_report
from .scenesim import SPLIT_OFFSETS, SceneSpec, ScenePlan, Utterance, feature_view, mix_scene, split_seeds
from .signal import DFT_SPEC, estimate_global_stats

log = logging.getLogger("mcfront")

MODEL_ARCHS = ("lfbe", "dft1", "cat", "dsf", "esf")
FEATURE_KINDS = ("lfbe", "dft1", "dftm", "bf")
LAYER_THRESHOLD = 1e-6
NETWORK_THRESHOLD = 1e-4


class InputError(click.ClickException):
    """Invalid user input; exit code 1."""

    exit_code = 1


def digest_of(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def load_json(path, what: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError(f"{what}: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{what}: invalid JSON in {path}: {exc}") from None


def load_geometry(value: str) -> ArrayGeometry:
    if value == "reference":
        return reference_array()
    try:
        return ArrayGeometry.from_dict(load_json(value, "--geometry"))
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"--geometry: {exc}") from None


def mic_indices(geom: ArrayGeometry, mics: int | None) -> tuple[int, ...]:
    if mics is None:
        return tuple(range(geom.n_mics))
    if geom.n_mics == 7 and mics in MIC_SUBSETS:
        return MIC_SUBSETS[mics]
    if mics == geom.n_mics:
        return tuple(range(mics))
    raise InputError(f"--mics: {mics} microphones is not a known subset of a {geom.n_mics}-mic geometry")


def load_bank(path) -> BeamformerBank:
    try:
        return BeamformerBank.from_dict(load_json(path, "--bank"))
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"--bank: {exc}") from None


def load_checkpoint(path, what: str) -> mm.Checkpoint:
    try:
        return mm.Checkpoint.load(path)
    except FileNotFoundError:
        raise InputError(f"{what}: file not found: {path}") from None
    except (KeyError, ValueError) as exc:
        raise InputError(f"{what}: {exc}") from None


# ---------------------------------------------------------------------------
# dataset directories: <dir>/manifest.jsonl + WAV and uint16 label files


def read_manifest(data_dir) -> list[dict]:
    path = Path(data_dir) / "manifest.jsonl"
    if not path.exists():
        raise InputError(f"--data: no manifest.jsonl in {data_dir}")
    records = read_jsonl(path)
    if not records:
        raise InputError(f"--data: empty manifest in {data_dir}")
    return records


def load_utterance(data_dir, rec: dict) -> Utterance:
    spec = SceneSpec.from_dict(rec["spec"])
    wave, _ = read_wav(Path(data_dir) / rec["wav_path"], spec.sample_rate_hz)
    if wave.shape[0] != spec.geometry.n_mics:
        raise InputError(f"{rec['wav_path']}: {wave.shape[0]} channels, geometry has {spec.geometry.n_mics}")
    labels = read_labels(Path(data_dir) / rec["label_path"])
    return Utterance(spec, wave * rec.get("scale", 1.0), labels)


def load_view(data_dir, kind: str, mics=None, bank=None, n_mels: int = 64) -> tuple[mm.DataView, list[SceneSpec]]:
    feats, labels, specs = [], [], []
    for rec in read_manifest(data_dir):
        utt = load_utterance(data_dir, rec)
        f = feature_view(utt, kind, mics=mics, bank=bank, n_mels=n_mels)
        if f.shape[0] != utt.labels.shape[0]:
            raise InputError(f"{rec['label_path']}: label count does not match the audio")
        feats.append(f.astype(np.float32))
        labels.append(utt.labels)
        specs.append(utt.spec)
    return mm.DataView(feats, labels), specs


def _synth_one(args) -> dict:
    spec, out_dir, split, index = args
    utt = mix_scene(spec)
    stem = f"{split}_{index:05d}"
    scale = write_wav(Path(out_dir) / f"{stem}.wav", utt.waveform, spec.sample_rate_hz)
    write_labels(Path(out_dir) / f"{stem}.lab", utt.labels)
    return {"wav_path": f"{stem}.wav", "label_path": f"{stem}.lab", "split": split,
            "spec_digest": spec.digest(), "scale": scale, "frames": int(utt.labels.shape[0]),
            "spec": spec.to_dict()}


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.option("--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Frequency-domain multi-channel front-ends: beamformers, MC networks and experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")


@cli.command()
@click.option("--geometry", default="reference", show_default=True,
              help="Geometry JSON file, or 'reference' for the 7-mic circular array.")
@click.option("--mics", type=click.Choice(["1", "2", "4", "7"]), default=None,
              help="Use a microphone subset of the reference array.")
@click.option("--directions", type=click.IntRange(min=1), default=12, show_default=True)
@click.option("--loading", type=click.FloatRange(min=0.0), default=DEFAULT_LOADING, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def design(geometry, mics, directions, loading, out):
    """Design a super-directive beamformer bank over uniform look directions."""
    geom = load_geometry(geometry)
    if mics is not None:
        geom = geom.subset(mic_indices(geom, int(mics)))
    bank = build_bank(geom, uniform_directions(directions), DFT_SPEC, loading)
    doc = bank.to_dict()
    doc["config_digest"] = digest_of({"geometry": geom.to_dict(), "directions": directions, "loading": loading})
    write_json(out, doc)
    click.echo(f"bank: D={directions} K={DFT_SPEC.n_bins_kept} M={geom.n_mics} "
               f"max |w^H v - 1| = {bank.distortionless_error():.2e} -> {out}")


@cli.command()
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), required=True,
              help="ScenePlan JSON (missing fields take defaults; geometry defaults to the reference array).")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--utterances", type=click.IntRange(min=1), default=500, show_default=True)
@click.option("--split", type=click.Choice(list(SPLIT_OFFSETS)), default="train", show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
def synth(spec_path, out, utterances, split, seed):
    """Generate labelled multi-channel scenes (WAV + uint16 labels + manifest)."""
    doc = load_json(spec_path, "--spec")
    doc.setdefault("geometry", reference_array().to_dict())
    try:
        plan = ScenePlan.from_dict(doc)
        specs = [plan.draw(s) for s in split_seeds(split, utterances, seed)]
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"--spec: {exc}") from None
    jobs = [(s, out, split, i) for i, s in enumerate(specs)]
    Path(out).mkdir(parents=True, exist_ok=True)
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_synth_one, jobs, chunksize=8))
    else:
        records = [_synth_one(j) for j in jobs]
    # manifest written once, in utterance order, after every file exists
    for r in records:
        r["config_digest"] = digest_of(plan.to_dict())
    write_jsonl(Path(out) / "manifest.jsonl", records)
    frames = sum(r["frames"] for r in records)
    click.echo(f"{len(records)} {split} utterances, {frames} frames -> {out}")


@cli.command()
@click.option("--data", type=click.Path(file_okay=False), required=True)
@click.option("--kind", type=click.Choice(FEATURE_KINDS), required=True)
@click.option("--mics", type=click.Choice(["1", "2", "4", "7"]), default=None)
@click.option("--bank", "bank_path", type=click.Path(dir_okay=False), default=None,
              help="Beamformer bank for --kind bf.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def featurize(data, kind, mics, bank_path, out):
    """Write per-utterance MCF1 feature files for one view of a dataset."""
    records = read_manifest(data)
    geom = SceneSpec.from_dict(records[0]["spec"]).geometry
    idx = mic_indices(geom, int(mics)) if mics else None
    bank = load_bank(bank_path) if bank_path else None
    if kind == "bf" and bank is None:
        raise InputError("--bank is required for --kind bf")
    out_records = []
    for rec in records:
        utt = load_utterance(data, rec)
        feats = feature_view(utt, kind, mics=idx, bank=bank)
        name = Path(rec["wav_path"]).with_suffix(".mcf").name
        write_features(Path(out) / name, feats)
        write_labels(Path(out) / Path(rec["label_path"]).name, utt.labels)
        out_records.append({"feature_path": name, "label_path": Path(rec["label_path"]).name,
                            "split": rec["split"], "spec_digest": rec["spec_digest"], "kind": kind,
                            "dims": list(feats.shape)})
    write_jsonl(Path(out) / "manifest.jsonl", out_records)
    click.echo(f"{len(out_records)} {kind} feature files -> {out}")


@cli.command()
@click.option("--data", type=click.Path(file_okay=False), required=True, help="Training split directory.")
@click.option("--dev", type=click.Path(file_okay=False), required=True, help="Dev split directory.")
@click.option("--arch", type=click.Choice(MODEL_ARCHS), required=True)
@click.option("--init", "init", type=click.Choice(["bf", "random"]), default="bf", show_default=True,
              help="Spatial-layer initialisation of cat/dsf/esf.")
@click.option("--mics", type=click.Choice(["1", "2", "4", "7"]), default="2", show_default=True)
@click.option("--from", "from_ckpt", type=click.Path(dir_okay=False), default=None,
              help="Previous-stage checkpoint (stage 1 for dft1, stage 2 for cat/dsf/esf).")
@click.option("--bank", "bank_path", type=click.Path(dir_okay=False), default=None,
              help="Bank JSON; designed on the fly (12 directions) when omitted.")
@click.option("--epochs", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--lr", type=click.FloatRange(min=0.0, min_open=True), default=1e-3, show_default=True)
@click.option("--batch-size", type=click.IntRange(min=1), default=16, show_default=True)
@click.option("--bptt", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--clip-norm", type=click.FloatRange(min=0.0, min_open=True), default=None,
              help="Clip the global gradient norm (off by default).")
@click.option("--hidden", type=click.IntRange(min=1), default=64, show_default=True)
@click.option("--layers", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--out", type=click.Path(file_okay=False), required=True)
def train(data, dev, arch, init, mics, from_ckpt, bank_path, epochs, lr, batch_size, bptt, clip_norm, hidden,
          layers, seed, out):
    """Train one stage: lfbe (stage 1), dft1 (stage 2) or an MC network (stage 3)."""
    options = {k: v for k, v in locals().items() if k not in ("data", "dev", "out")}
    records = read_manifest(data)
    n_classes = SceneSpec.from_dict(records[0]["spec"]).n_classes
    geom = SceneSpec.from_dict(records[0]["spec"]).geometry
    classifier = mm.ClassifierConfig(n_layers=layers, hidden=hidden, n_classes=n_classes)
    cfg = mm.TrainConfig(lr=lr, batch_size=batch_size, epochs=epochs, bptt_length=bptt, seed=seed,
                         clip_norm=clip_norm)
    rng = np.random.default_rng(seed)
    previous = mm.model_from_checkpoint(load_checkpoint(from_ckpt, "--from")) if from_ckpt else None
    meta = {"config_digest": digest_of(options), "train_options": options}

    if arch == "lfbe":
        tr, _ = load_view(data, "lfbe")
        dv, _ = load_view(dev, "lfbe")
        model = mm.assemble("lfbe", classifier, rng, feature_stats=estimate_global_stats(tr.features))
    elif arch == "dft1":
        tr, _ = load_view(data, "dft1")
        dv, _ = load_view(dev, "dft1")
        if previous is None:
            model = mm.assemble("dft1", classifier, rng, input_stats=estimate_global_stats(tr.features))
        else:
            if previous.input_kind != "lfbe":
                raise InputError("--from: dft1 training starts from a stage-1 (lfbe) checkpoint")
            model = mm.stage2_model(previous, tr, classifier, rng)
    else:
        if previous is None or previous.input_kind != "dft1":
            raise InputError("--from: cat/dsf/esf training needs a stage-2 (dft1) checkpoint")
        idx = mic_indices(geom, int(mics))
        bank = load_bank(bank_path) if bank_path else build_bank(geom.subset(idx), uniform_directions(12), DFT_SPEC)
        tr, _ = load_view(data, "dftm", mics=idx)
        dv, _ = load_view(dev, "dftm", mics=idx)
        d, k, m = bank.shape
        try:
            mc_arch = mm.McArch(arch, d, k, len(idx), "beamformer" if init == "bf" else "random")
            model = mm.stage3_model(previous, mc_arch, bank, tr, classifier, rng)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        meta["mics"] = list(idx)
    history = mm.fit(model, tr, dv, cfg, arch)
    ckpt = mm.make_checkpoint(model, history, meta)
    ckpt.save(Path(out) / "model.ckpt")
    atomic_write_text(Path(out) / "train.log.csv", history_csv(history))
    final = history[-1]
    click.echo(f"{arch}: dev loss {final['loss']:.4f} dev frame error {final['frame_error']:.4f} "
               f"-> {Path(out) / 'model.ckpt'}")


@cli.command("eval")
@click.option("--model", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--data", type=click.Path(file_okay=False), required=True)
@click.option("--bank", "bank_path", type=click.Path(dir_okay=False), default=None,
              help="Feed a single-channel model the energy-selected beam of this bank (SD baseline).")
@click.option("--mics", type=click.Choice(["1", "2", "4", "7"]), default=None,
              help="Microphones used with --bank (default: all).")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Also write results as JSON.")
def evaluate_cmd(model_path, data, bank_path, mics, out):
    """Frame error rate and cross-entropy of a checkpoint on a dataset split."""
    ckpt = load_checkpoint(model_path, "--model")
    model = mm.model_from_checkpoint(ckpt)
    geom = SceneSpec.from_dict(read_manifest(data)[0]["spec"]).geometry
    if model.input_kind == "dftm":
        view, _ = load_view(data, "dftm", mics=tuple(ckpt.meta.get("mics", range(geom.n_mics))))
    elif bank_path:
        if model.input_kind != "dft1":
            raise InputError("--bank needs a single-channel DFT model")
        idx = mic_indices(geom, int(mics) if mics else None)
        view, _ = load_view(data, "bf", mics=idx, bank=load_bank(bank_path))
    else:
        view, _ = load_view(data, model.input_kind, n_mels=ckpt.meta.get("n_mels", 64))
    if view.features[0].shape[1] != model.input_dim:
        raise InputError(f"--data: feature dimension {view.features[0].shape[1]} != model input {model.input_dim}")
    ev = mm.evaluate(model, view)
    result = {"model": str(model_path), "data": str(data), "frames": view.n_frames,
              "frame_error": ev["frame_error_rate"], "loss": ev["loss"],
              "config_digest": ckpt.meta.get("config_digest")}
    if out:
        write_json(out, result)
    click.echo(f"frames {view.n_frames} frame_error {ev['frame_error_rate']:.4f} loss {ev['loss']:.4f}")


def gradcheck_cases():
    """(name, layer, input, threshold, eps) for every layer type and every full architecture."""
    rng = np.random.default_rng(0)
    cases = [
        ("affine", gn.Affine(rng.standard_normal((3, 4)), rng.standard_normal(3)), rng.standard_normal((2, 4))),
        ("complex_affine", gn.ComplexAffine(rng.standard_normal((2, 3)) + 1j * rng.standard_normal((2, 3)),
                                            rng.standard_normal(2) + 1j * rng.standard_normal(2)),
         rng.standard_normal((2, 6))),
        ("block_complex_affine", gn.BlockComplexAffine(rng.standard_normal((3, 2, 2)) + 1j * rng.standard_normal((3, 2, 2))),
         rng.standard_normal((2, 12))),
        ("pow_pairs", gn.PowPairs(), rng.standard_normal((2, 6))),
        ("maxpool", gn.MaxPoolGroups(3), rng.standard_normal((2, 6))),
        ("relu", gn.ReLU(), rng.standard_normal((2, 5)) + 0.05 * np.sign(rng.standard_normal((2, 5)))),
        ("log_floor", gn.LogFloor(), rng.uniform(0.5, 2.0, (2, 5))),
        ("normalize", gn.Normalize(rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)), rng.standard_normal((2, 4))),
        ("lstm", gn.LSTM.init(3, 4, rng), rng.standard_normal((3, 2, 3))),
        ("softmax_xent", gn.CrossEntropy(np.array([0, 2])), rng.standard_normal((2, 3))),
    ]
    out = [(name, layer, x, LAYER_THRESHOLD, 1e-5) for name, layer, x in cases]
    for variant in mm.VARIANTS:
        r = np.random.default_rng(1)
        arch = mm.McArch(variant, 3, 9, 2, init="random")
        cls = mm.ClassifierConfig(n_layers=1, hidden=4, n_classes=3)
        stack = (mm.build_mc_front(arch, rng=r) + mm.build_fe_dnn(9, 5, "random", rng=r)
                 + mm.build_classifier(5, cls, r) + [gn.CrossEntropy(np.array([[0], [2]]))])
        out.append((f"network:{variant}", gn.Sequential(stack), r.standard_normal((2, 1, 36)),
                    NETWORK_THRESHOLD, 1e-4))
    return out


@cli.command()
@click.option("--all", "run_all", is_flag=True, help="Check every layer and every full architecture.")
@click.option("--layer", "only", multiple=True, help="Check only the named case(s).")
def gradcheck(run_all, only):
    """Central finite-difference gradient checks in double precision."""
    cases = gradcheck_cases()
    names = [c[0] for c in cases]
    if not run_all and not only:
        raise InputError("pass --all or at least one --layer (choices: " + ", ".join(names) + ")")
    unknown = set(only) - set(names)
    if unknown:
        raise InputError(f"--layer: unknown case(s) {sorted(unknown)}")
    failed = 0
    click.echo(f"{'case':<24} {'max rel err':>12} {'threshold':>10}  result")
    for name, layer, x, threshold, eps in cases:
        if not run_all and name not in only:
            continue
        err = gn.grad_check(layer, x, eps=eps)
        ok = err < threshold
        failed += not ok
        click.echo(f"{name:<24} {err:>12.2e} {threshold:>10.0e}  {'PASS' if ok else 'FAIL'}")
    if failed:
        raise InputError(f"{failed} gradient check(s) above threshold")


@cli.command()
@click.option("--results", type=click.Path(dir_okay=False), required=True, help="results.csv from experiment.")
@click.option("--baseline", default="lfbe", show_default=True, help="Model tag used as the baseline.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def report(results, baseline, out):
    """Relative frame-error reduction, mic-count sweep and init-ablation tables (CSV + SVG)."""
    try:
        rows = load_results(results)
    except FileNotFoundError:
        raise InputError(f"--results: file not found: {results}") from None
    except (KeyError, ValueError) as exc:
        raise InputError(f"--results: malformed results file: {exc}") from None
    try:
        written = write_report(rows, out, baseline)
    except ReportError as exc:
        raise InputError(f"--baseline: {exc}") from None
    with open(results, "rb") as fh:
        source = hashlib.sha256(fh.read()).hexdigest()[:16]
    write_json(Path(out) / "report.json", {"baseline": baseline, "results_digest": source,
                                          "files": sorted(p.name for p in written)})
    for p in written:
        click.echo(str(p))


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="ExperimentConfig JSON; defaults give the full three-seed comparison.")
@click.option("--seed", "seeds", type=click.IntRange(min=0), multiple=True, help="Override the seed list.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
def experiment(config_path, seeds, out):
    """Run the stage-wise comparison on synthetic scenes, then write the report."""
    try:
        cfg = ExperimentConfig.from_dict(load_json(config_path, "--config")) if config_path else ExperimentConfig()
    except (TypeError, ValueError) as exc:
        raise InputError(f"--config: {exc}") from None
    if seeds:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seeds": list(seeds)})
    t0 = time.time()
    rows = run_experiment(cfg, out)
    write_report(rows, Path(out) / "report", "lfbe")
    click.echo(f"{len(cfg.seeds)} seed(s), {len(rows)} result rows in {time.time() - t0:.0f}s -> {out}")


def main(argv=None) -> int:
    """Entry point with the documented exit codes (usage errors count as invalid input)."""
    try:
        cli.main(args=argv, prog_name="mcfront", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("runtime error", exc_info=True)
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
