"""Experiment orchestration behind the CLI: train, attack, sweep, report."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .. import attacks
from ..dataset import HEIGHT, WIDTH, generate_dataset, write_manifest
from ..metrics import (TARGETED_GRID, UNTARGETED_GRID, read_curve_csv,
                       success_ratio_curve, sweep_untargeted)
from ..model import Recognizer
from ..training import train
from .config import ConfigError, ExperimentConfig, parse_config, stream_seed

log = logging.getLogger(__name__)

BLOB_BYTES = HEIGHT * WIDTH * 8
MANIFEST_COLUMNS = ["id", "file", "norm", "method", "converged"]
RECORD_COLUMNS = ["id", "method", "mode", "converged", "norm", "relative_norm", "iterations",
                  "clean_text", "target_text", "target_position", "target_tokens", "success"]


class RunError(RuntimeError):
    """Runtime failure of a pipeline stage (exit code 2)."""


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(header)
        wr.writerows(rows)


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# -- train -------------------------------------------------------------------

def run_train(cfg: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(cfg.dataset.n_train, cfg.dataset.n_test, cfg.dataset.seed)
    model, report = train(ds, cfg.train_config(), seed=cfg.seed)
    model_path = out / "model.sqat"
    model.save(model_path)
    write_manifest(out / "dataset.csv", ds)
    _write_csv(out / "train_report.csv", ["metric", "value"], [
        ["train_cer", repr(report.train_cer)],
        ["test_cer", repr(report.test_cer)],
        ["final_loss", repr(report.final_loss)],
    ])
    _write_csv(out / "train_losses.csv", ["epoch", "loss"],
               [[i, repr(v)] for i, v in enumerate(report.losses)])
    (out / "config.ini").write_text(cfg.to_ini())
    return {"model_path": str(model_path), "train_cer": report.train_cer,
            "test_cer": report.test_cer}


# -- attack ------------------------------------------------------------------

def attack_image(model, image, sample_id: int, cfg: ExperimentConfig):
    """Run the configured attack on one image; returns (Perturbation, record)."""
    p = cfg.attack
    clean = model.generate(image)
    target = None
    if p.mode == "targeted":
        rng = np.random.default_rng(stream_seed(cfg.seed, "target", sample_id))
        target = attacks.single_token_target(model, image, rng, p.target_rank)

    if p.method == "fgsm":
        pert = (attacks.fgsm_targeted(model, image, target) if target is not None
                else attacks.fgsm_untargeted(model, image))
    elif p.method == "deepfool":
        pert = attacks.deepfool(model, image, p.top_amount, p.deepfool_max_iters)
    elif p.method == "be":
        pert = attacks.backward_error(model, image, target, p.alpha, p.iterations, p.margin)
    elif p.method == "cw":
        tgt = target if target is not None else attacks.AttackTarget(clean.tokens)
        pert = attacks.cw_attack(model, image, p.mode, tgt, p.c, p.eta, p.lr, p.weight_decay,
                                 p.max_iters, p.patience,
                                 seed=stream_seed(cfg.seed, "cw_init", sample_id))
    else:
        raise ConfigError(f"unknown method {p.method!r}")

    decoded = model.generate(image + pert.delta)
    if target is not None:
        success = bool(np.array_equal(decoded.tokens, target.labels))
    else:
        success = bool(attacks.changed_positions(clean.tokens, decoded.tokens).any())
    record = {
        "id": sample_id, "method": p.method, "mode": p.mode,
        "converged": int(pert.converged), "norm": repr(pert.l2_norm),
        "relative_norm": repr(pert.l2_norm / float(np.linalg.norm(image))),
        "iterations": pert.iterations, "clean_text": clean.text,
        "target_text": model.decode_text(target.labels) if target is not None else "",
        "target_position": "" if target is None else target.position,
        "target_tokens": "" if target is None else " ".join(str(int(t)) for t in target.labels),
        "success": int(success),
    }
    return pert, record


_worker = {}


def _init_worker(model_path, cfg_text):
    _worker["model"] = Recognizer.load(model_path)
    _worker["cfg"] = parse_config(cfg_text)


def _job(args):
    sample_id, text, seed = args
    from ..dataset import render_text_line
    pert, rec = attack_image(_worker["model"], render_text_line(text, seed), sample_id, _worker["cfg"])
    return pert.delta, pert.l2_norm, rec


def check_compatible(model: Recognizer, ds) -> None:
    if model.charset != ds.charset:
        raise RunError("model charset does not match the dataset charset")
    img = ds.test[0].image
    if img.shape != (HEIGHT, WIDTH):
        raise RunError(f"dataset images are {img.shape}, model expects {(HEIGHT, WIDTH)}")


def run_attack(cfg: ExperimentConfig, model_path, out_dir) -> dict:
    start = time.perf_counter()
    out = Path(out_dir)
    blobs = out / "perturbations"
    blobs.mkdir(parents=True, exist_ok=True)
    model = Recognizer.load(model_path)
    ds = generate_dataset(cfg.dataset.n_train, cfg.dataset.n_test, cfg.dataset.seed)
    check_compatible(model, ds)
    if cfg.attack.n_images > len(ds.test):
        raise RunError(f"requested {cfg.attack.n_images} images but the test split has {len(ds.test)}")
    samples = ds.test[: cfg.attack.n_images]
    cfg = _with_model_path(cfg, model_path)

    jobs = [(s.id, s.text, s.seed) for s in samples]
    if cfg.attack.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.attack.workers, initializer=_init_worker,
                                 initargs=(str(model_path), cfg.to_ini())) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = []
        for s in samples:
            pert, rec = attack_image(model, s.image, s.id, cfg)
            results.append((pert.delta, pert.l2_norm, rec))
            log.info("image %d: %s norm=%.4g success=%d", s.id, cfg.attack.method, pert.l2_norm, rec["success"])

    results.sort(key=lambda r: r[2]["id"])
    manifest, records = [], []
    for delta, norm, rec in results:
        name = f"perturbations/{rec['id']:06d}.f64"
        (out / name).write_bytes(np.ascontiguousarray(delta, dtype="<f8").tobytes())
        manifest.append([rec["id"], name, repr(float(norm)), rec["method"], rec["converged"]])
        records.append([rec[c] for c in RECORD_COLUMNS])
    _write_csv(out / "manifest.csv", MANIFEST_COLUMNS, manifest)
    _write_csv(out / "records.csv", RECORD_COLUMNS, records)
    (out / "run.ini").write_text(cfg.to_ini())
    elapsed = time.perf_counter() - start
    (out / "run_info.txt").write_text(
        f"config_hash {cfg.hash()}\nimages {len(results)}\nwall_time_s {elapsed:.3f}\n")
    return {"n_images": len(results), "wall_time": elapsed,
            "success": sum(r[2]["success"] for r in results)}


def _with_model_path(cfg: ExperimentConfig, model_path) -> ExperimentConfig:
    from dataclasses import replace
    return replace(cfg, model_path=str(Path(model_path).resolve()))


def load_perturbations(run_dir):
    """Manifest rows with their delta arrays; validates file existence and size."""
    run = Path(run_dir)
    mpath = run / "manifest.csv"
    if not mpath.is_file():
        raise RunError(f"{run}: no manifest.csv, run the attack first")
    rows = _read_csv(mpath)
    out = []
    for row in rows:
        blob = run / row["file"]
        if not blob.is_file():
            raise RunError(f"missing perturbation file {blob}")
        raw = blob.read_bytes()
        if len(raw) != BLOB_BYTES:
            raise RunError(f"{blob}: expected {BLOB_BYTES} bytes, found {len(raw)}")
        delta = np.frombuffer(raw, dtype="<f8").reshape(HEIGHT, WIDTH).astype(np.float64)
        out.append((row, delta))
    return out


# -- sweep -------------------------------------------------------------------

def run_sweep(run_dir) -> list[Path]:
    run = Path(run_dir)
    ini = run / "run.ini"
    if not ini.is_file():
        raise RunError(f"{run}: no run.ini, not an attack run directory")
    cfg = parse_config(ini.read_text())
    if not cfg.model_path or not Path(cfg.model_path).is_file():
        raise RunError(f"model file {cfg.model_path!r} referenced by the run is missing")
    model = Recognizer.load(cfg.model_path)
    ds = generate_dataset(cfg.dataset.n_train, cfg.dataset.n_test, cfg.dataset.seed)
    pert = load_perturbations(run)
    records = {int(r["id"]): r for r in _read_csv(run / "records.csv")}
    ids = [int(row["id"]) for row, _ in pert]
    images = [ds.by_id(i).image for i in ids]
    deltas = [d for _, d in pert]
    label = f"{cfg.attack.method}_{cfg.attack.mode}"
    if cfg.attack.mode == "untargeted":
        curve = sweep_untargeted(model, images, deltas, UNTARGETED_GRID, ids)
    else:
        targets = [records[i]["target_text"] for i in ids]
        curve = success_ratio_curve(model, images, deltas, targets, TARGETED_GRID, ids,
                                    native=cfg.attack.method == "cw")
    curve_path = run / f"curve_{label}.csv"
    curve.write_csv(curve_path)
    curve.write_records(run / f"sweep_records_{label}.csv")
    return [curve_path]


def verify_targeted(run_dir) -> list[tuple[int, bool]]:
    """Re-decode every converged targeted perturbation; (id, matches target)."""
    run = Path(run_dir)
    cfg = parse_config((run / "run.ini").read_text())
    model = Recognizer.load(cfg.model_path)
    ds = generate_dataset(cfg.dataset.n_train, cfg.dataset.n_test, cfg.dataset.seed)
    records = {int(r["id"]): r for r in _read_csv(run / "records.csv")}
    out = []
    for row, delta in load_perturbations(run):
        if row["converged"] != "1":
            continue
        i = int(row["id"])
        target = np.array([int(t) for t in records[i]["target_tokens"].split()], dtype=np.int64)
        tokens = model.generate(ds.by_id(i).image + delta).tokens
        out.append((i, bool(np.array_equal(tokens, target))))
    return out


# -- report ------------------------------------------------------------------

def curve_label(path) -> str:
    stem = Path(path).stem
    return stem[len("curve_"):] if stem.startswith("curve_") else stem


def run_report(curve_paths, out_dir, figure: bool = True) -> dict:
    if not curve_paths:
        raise RunError("report needs at least one curve file")
    curves = []
    for p in curve_paths:
        if not Path(p).is_file():
            raise RunError(f"curve file not found: {p}")
        curves.append((curve_label(p), read_curve_csv(p)))
    grid0, kind0 = curves[0][1].grid, curves[0][1].metric_kind
    for label, c in curves[1:]:
        if c.grid != grid0 or c.metric_kind != kind0:
            raise RunError(f"curve {label!r} does not share the grid/metric of {curves[0][0]!r}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [[label, repr(e), repr(v)] for label, c in curves for e, v in zip(c.grid, c.values)]
    _write_csv(out / "report.csv", ["method", "epsilon", "value"], rows)

    endpoints = sorted(((c.values[-1], label) for label, c in curves), key=lambda t: (-t[0], t[1]))
    lines = [f"metric: {kind0}", f"grid: {len(grid0)} points, {grid0[0]!r} .. {grid0[-1]!r}",
             "endpoint values (descending):"]
    lines += [f"  {label}: {v:.6f}" for v, label in endpoints]
    if kind0 == "mean_cer":
        lines.append("max mean CER:")
        lines += [f"  {label}: {max(c.values):.6f}" for label, c in curves]
    summary = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(summary)

    fig_path = None
    if figure:
        from .plotting import plot_curves
        fig_path = out / "report.png"
        plot_curves([(label, c) for label, c in curves], fig_path)
    return {"summary": summary, "figure": fig_path, "endpoints": endpoints}
