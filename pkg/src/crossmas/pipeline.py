"""Batch pipeline: phantom cohorts, atlas-to-target registration, label
fusion, evaluation and the atlas-count sweep.

Every step reads and writes files under an output directory so that the
command-line driver can run the steps independently. Paths inside a
pipeline config are resolved relative to the config file.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from ._backend import BACKEND
from .ddf import warp_label, warp_scalar, write_ddf
from .errors import DivergedError
from .fusion import lwf_fuse, majority_vote
from .io import atomic_write_text, read_volume, write_json, write_volume
from .metrics import MetricReport, dice_score, evaluate_segmentation
from .phantom import PhantomConfig, generate_cohort
from .registration import RegistrationConfig, register_bidirectional
from .similarity import (FeatureConfig, PatchSpec, SimilarityModel, TrainConfig, ground_truth_similarity,
                         mi_patch_similarity, predict_similarity, train_similarity)
from .volume import center_align_translation, zscore_normalize

FUSION_METHODS = ("mv", "lwf-oracle", "lwf-learned", "lwf-mi")


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode("utf-8")).hexdigest()


def run_manifest(command, config, seeds):
    """Everything needed to rerun ``command``; deliberately free of timestamps and paths."""
    return {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "versions": {"crossmas": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "backend": BACKEND,
    }


def write_manifest(out, command, config, seeds):
    write_json(Path(out) / f"run_manifest_{command}.json", run_manifest(command, config, seeds))


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    """Atlases and targets are lists of ``{"name", "image", "label"}`` entries.

    Target labels are needed by registration (the Dice term) and by
    evaluation; ``lwf-oracle`` also reads them to build its weights and is
    therefore an upper bound, never an inference path.
    """

    atlases: list
    targets: list
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    fusion: str = "mv"
    model: str | None = None
    patch: int = 1
    mi_patch: int = 3
    mi_bins: int = 16
    jobs: int = 1
    center_align: bool = True
    base_dir: str = "."

    def __post_init__(self):
        if isinstance(self.registration, dict):
            self.registration = RegistrationConfig.from_dict(self.registration)
        if not self.atlases:
            raise ValueError("pipeline needs at least one atlas")
        if not self.targets:
            raise ValueError("pipeline needs at least one target")
        if self.fusion not in FUSION_METHODS:
            raise ValueError(f"unknown fusion method {self.fusion!r}; choose from {FUSION_METHODS}")
        if self.fusion == "lwf-learned" and not self.model:
            raise ValueError("lwf-learned fusion needs a similarity model path")
        if self.patch < 0 or self.mi_patch < 0:
            raise ValueError("patch radii must be >= 0")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        for entry in list(self.atlases) + list(self.targets):
            if not {"name", "image", "label"} <= entry.keys():
                raise ValueError(f"entry needs name, image and label: {entry}")
        names = [e["name"] for e in self.atlases]
        if len(set(names)) != len(names):
            raise ValueError("atlas names must be unique")

    def to_dict(self):
        return {"atlases": self.atlases, "targets": self.targets, "registration": self.registration.to_dict(),
                "fusion": self.fusion, "model": self.model, "patch": self.patch, "mi_patch": self.mi_patch,
                "mi_bins": self.mi_bins, "jobs": self.jobs, "center_align": self.center_align}

    @classmethod
    def load(cls, path, **overrides):
        path = Path(path)
        d = json.loads(path.read_text())
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls(base_dir=str(path.parent), **d)

    def resolve(self, rel):
        return Path(self.base_dir) / rel


# ---------------------------------------------------------------------------
# Phantom cohort
# ---------------------------------------------------------------------------

def _entry(name, image, label):
    return {"name": name, "image": image, "label": label}


def make_cohort(out, phantom: PhantomConfig, n_atlases, n_targets, seed, n_train_targets=0,
                registration: RegistrationConfig | None = None):
    """Write a phantom cohort plus ready-to-run pipeline configs.

    Subjects ``0..n_atlases-1`` provide atlases (modality A), the next
    ``n_targets`` are evaluation targets and the following
    ``n_train_targets`` are similarity-training targets (modality B).
    """
    out = Path(out)
    n = n_atlases + n_targets + n_train_targets
    configs, pairs = generate_cohort(phantom, n, seed)
    subjects = []
    for i, (cfg, ((ai, al), (ti, tl), gt)) in enumerate(zip(configs, pairs)):
        d = f"subject_{i:02d}"
        write_volume(out / d / "image_a.mvol", ai)
        write_volume(out / d / "label_a.mvol", al)
        write_volume(out / d / "image_b.mvol", ti)
        write_volume(out / d / "label_b.mvol", tl)
        write_ddf(out / d / "gt_ddf.json", gt)
        subjects.append({"name": d, "seed": cfg.seed, "phantom": cfg.to_dict()})
    write_json(out / "cohort.json", {"seed": seed, "subjects": subjects})

    def side(i, m):
        d = f"subject_{i:02d}"
        return _entry(d, f"{d}/image_{m}.mvol", f"{d}/label_{m}.mvol")

    reg = (registration or RegistrationConfig()).to_dict()
    atlases = [side(i, "a") for i in range(n_atlases)]
    targets = [side(i, "b") for i in range(n_atlases, n_atlases + n_targets)]
    write_json(out / "pipeline.json", {"atlases": atlases, "targets": targets, "registration": reg})
    if n_train_targets:
        train = [side(i, "b") for i in range(n_atlases + n_targets, n)]
        write_json(out / "train_pipeline.json", {"atlases": atlases, "targets": train, "registration": reg})
    return [s["seed"] for s in subjects]


# ---------------------------------------------------------------------------
# Registration
# ---------------------------------------------------------------------------

def job_dir(out, target, atlas):
    return Path(out) / "reg" / target["name"] / atlas["name"]


def _register_job(args):
    atlas_paths, target_paths, reg_dict, center_align, dest = args
    atlas_img, atlas_lab = (read_volume(p) for p in atlas_paths)
    target_img, target_lab = (read_volume(p) for p in target_paths)
    config = RegistrationConfig.from_dict(reg_dict)
    init = None
    if center_align:
        # U samples the atlas, so it points from target anatomy back to atlas anatomy
        init = -center_align_translation(atlas_lab, target_lab) / np.asarray(target_img.spacing)
    try:
        result = register_bidirectional(zscore_normalize(atlas_img), atlas_lab, zscore_normalize(target_img),
                                        target_lab, config, init_translation=init)
    except DivergedError as exc:
        return {"status": "diverged", "iteration": exc.iteration}
    dest = Path(dest)
    write_ddf(dest / "U.json", result.U)
    write_ddf(dest / "V.json", result.V)
    lines = [json.dumps({k: e[k] for k in ("iteration", "dice_term", "cons_term", "total")}, sort_keys=True)
             for e in result.trace_lines()]
    atomic_write_text(dest / "trace.jsonl", "\n".join(lines) + "\n")
    warped = warp_label(atlas_lab, result.U)
    write_volume(dest / "warped_label.mvol", warped)
    write_volume(dest / "warped_image.mvol", warp_scalar(atlas_img, result.U))
    report = evaluate_segmentation(warped, target_lab)
    summary = {"status": "ok", "iterations": len(result.trace), "initial_dice": result.initial_dice,
               "final_dice": result.final_dice, "final_loss": result.final_loss.to_dict(),
               "metrics": report.rows}
    write_json(dest / "summary.json", summary)
    return summary


def run_registration(cfg: PipelineConfig, out):
    """Register every atlas to every target; returns ``(summaries, n_diverged)``."""
    out = Path(out)
    jobs, keys = [], []
    for target in cfg.targets:
        for atlas in cfg.atlases:
            jobs.append(((cfg.resolve(atlas["image"]), cfg.resolve(atlas["label"])),
                         (cfg.resolve(target["image"]), cfg.resolve(target["label"])),
                         cfg.registration.to_dict(), cfg.center_align, job_dir(out, target, atlas)))
            keys.append((target["name"], atlas["name"]))
    if cfg.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_register_job, jobs))
    else:
        results = [_register_job(j) for j in jobs]

    report = MetricReport()
    rows = []
    for (t, a), res in zip(keys, results):
        rows.append({"target": t, "atlas": a, **{k: v for k, v in res.items() if k != "metrics"}})
        for r in res.get("metrics", []):
            report.add(f"{t}/{a}", r["label"], r["ds"], r["asd"], r["hd"], r["vd"])
    write_json(out / "registration.json", {"jobs": rows})
    atomic_write_text(out / "registration_metrics.csv", report.to_csv())
    n_diverged = sum(r["status"] != "ok" for r in results)
    return rows, n_diverged


# ---------------------------------------------------------------------------
# Fusion
# ---------------------------------------------------------------------------

def _load_model(cfg: PipelineConfig):
    return SimilarityModel.from_json(cfg.resolve(cfg.model).read_text())


def atlas_weights(cfg: PipelineConfig, out, target, method, model=None):
    """Warped labels and per-atlas weight maps for one target, in atlas order."""
    target_img = read_volume(cfg.resolve(target["image"]))
    gold = read_volume(cfg.resolve(target["label"]))
    labels, weights = [], []
    for atlas in cfg.atlases:
        d = job_dir(out, target, atlas)
        if not (d / "warped_label.mvol").exists():
            raise FileNotFoundError(f"missing registration output {d}; run 'register' first")
        warped = read_volume(d / "warped_label.mvol")
        if method == "mv":
            w = np.ones(warped.dims)
        elif method == "lwf-oracle":
            w = ground_truth_similarity(warped, gold, PatchSpec(cfg.patch)).data
        elif method == "lwf-learned":
            w = predict_similarity(model, zscore_normalize(target_img), warped).data
        elif method == "lwf-mi":
            w = mi_patch_similarity(target_img, read_volume(d / "warped_image.mvol"),
                                    PatchSpec(cfg.mi_patch), cfg.mi_bins).data
        else:
            raise ValueError(f"unknown fusion method {method!r}")
        labels.append(warped)
        weights.append(w)
    return labels, weights, gold


def fuse(labels, weights, method):
    return majority_vote(labels) if method == "mv" else lwf_fuse(labels, weights)


def mean_fg_dice(pred, gold):
    return float(np.mean([dice_score(pred, gold, lab) for lab in gold.label_set if lab != 0]))


def run_fusion(cfg: PipelineConfig, out, method=None):
    """Fuse each target's warped atlases and evaluate against its gold label."""
    method = method or cfg.fusion
    model = _load_model(cfg) if method == "lwf-learned" else None
    out = Path(out)
    report = MetricReport()
    for target in cfg.targets:
        labels, weights, gold = atlas_weights(cfg, out, target, method, model)
        fused = fuse(labels, weights, method)
        write_volume(out / "fused" / method / f"{target['name']}.mvol", fused)
        evaluate_segmentation(fused, gold, case=target["name"], report=report)
    atomic_write_text(out / f"fusion_{method}.csv", report.to_csv())
    atomic_write_text(out / f"fusion_{method}.json", report.to_json())
    return report


def run_sweep(cfg: PipelineConfig, out, n_list, method=None):
    """Fused mean foreground Dice using the first ``n`` atlases, for each ``n``."""
    method = method or cfg.fusion
    n_list = [int(n) for n in n_list]
    if any(n < 1 or n > len(cfg.atlases) for n in n_list):
        raise ValueError(f"atlas counts must lie in 1..{len(cfg.atlases)}, got {n_list}")
    model = _load_model(cfg) if method == "lwf-learned" else None
    per_target = [atlas_weights(cfg, out, t, method, model) for t in cfg.targets]
    rows = []
    for n in n_list:
        ds = [mean_fg_dice(fuse(labels[:n], weights[:n], method), gold) for labels, weights, gold in per_target]
        rows.append((n, float(np.mean(ds)), float(np.std(ds))))
    _write_csv(Path(out) / f"sweep_{method}.csv", ["n", "mean_ds", "std_ds"],
               [(n, f"{m:.6f}", f"{s:.6f}") for n, m, s in rows])
    return rows


# ---------------------------------------------------------------------------
# Similarity training
# ---------------------------------------------------------------------------

def similarity_pairs(cfg: PipelineConfig, out):
    pairs = []
    for target in cfg.targets:
        target_img = zscore_normalize(read_volume(cfg.resolve(target["image"])))
        gold = read_volume(cfg.resolve(target["label"]))
        for atlas in cfg.atlases:
            warped = read_volume(job_dir(out, target, atlas) / "warped_label.mvol")
            pairs.append((target_img, warped, ground_truth_similarity(warped, gold, PatchSpec(cfg.patch))))
    return pairs


def run_training(cfg: PipelineConfig, out, train: TrainConfig | None = None):
    """Train a similarity model on this pipeline's registration outputs."""
    pairs = similarity_pairs(cfg, out)
    if train is None:
        label_set = tuple(sorted(set().union(*(p[1].label_set for p in pairs))))
        train = TrainConfig(features=FeatureConfig(label_set=label_set, patch=(cfg.patch,) * 3))
    result = train_similarity(pairs, train)
    atomic_write_text(Path(out) / "similarity_model.json", result.model.to_json())
    atomic_write_text(Path(out) / "similarity_trace.jsonl",
                      "".join(json.dumps({"iteration": i, "cross_entropy": v}) + "\n"
                              for i, v in enumerate(result.trace)))
    return result

