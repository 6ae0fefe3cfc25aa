"""End-to-end commands: phantom, train, predict, evaluate, plot."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backends import load_backend
from .catalog import (
    SubjectRecord, Volume, list_subject_ids, load_subject, read_volume, route_cohort, save_subject,
    split_train_val, subject_path, write_volume,
)
from .config import RunConfig
from .detector import (
    detector_patches, finetune_detector, infer_detector, make_detector_backend,
)
from .errors import MissingFile, MissingModel, PipelineError, StageError, UnknownCohort
from .evaluation import (
    Counts, EvalReport, aggregate_cohort, dice, match_lesions, render_confusion, render_overlay,
)
from .phantom import PhantomSpec, generate_cohort
from .postprocess import (
    IntensityThreshold, apply_intensity_filter, compute_brain_mask, derive_intensity_threshold,
    postprocess_pipeline,
)
from .preprocess import ResizeTransform, invert_resize, preprocess_subject, resize_inplane, zscore_normalize
from .segmenter import UNetSegmenter, build_training_pairs, infer_segmenter, train_segmenter

log = logging.getLogger(__name__)

CONFOUNDERS = "CONF"
PREDICT_STAGES = (
    "normalize", "resize", "detector", "intensity_filter", "segmenter",
    "intensity_filter", "brain_mask", "binarize", "invert_resize",
)


@contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")


def artifact_paths(config: RunConfig) -> dict[str, Path]:
    d = config.model_dir()
    return {
        "detector": d / "detector.pt",
        "segmenter": d / "segmenter.pt",
        "threshold": d / "threshold.txt",
        "manifest": d / "manifest.json",
    }


# -- phantom ------------------------------------------------------------------


def cmd_phantom(config: RunConfig, n: int, template: PhantomSpec = PhantomSpec()) -> list[Path]:
    """Write ``n`` phantom subjects (plus their confounder masks) under ``config.data_root``."""
    if n < 1:
        raise ValueError(f"phantom count must be >= 1, got {n}")
    out = []
    for subject in generate_cohort(n, template, config.seed):
        with stage("phantom_write"):
            d = save_subject(subject, config.data_root)
            write_volume(Volume(subject.extras["confounders"], subject.t2s.spacing),
                         subject_path(config.data_root, subject.id, CONFOUNDERS))
        out.append(d)
    return out


# -- train --------------------------------------------------------------------


def group_subject_ids(config: RunConfig) -> list[str]:
    ids = []
    for sid in list_subject_ids(config.data_root):
        try:
            if route_cohort(sid, config.extra_routes) == config.group:
                ids.append(sid)
        except UnknownCohort:
            log.warning("skipping %s: cohort not routable", sid)
    return ids


def stage1_scores(backend, subject: SubjectRecord, thr: IntensityThreshold, config: RunConfig) -> Volume:
    """Detector scores filtered by the T2* intensity threshold (the segmenter's fourth channel)."""
    det = infer_detector(backend, subject, config.detector_hyperparams())
    return apply_intensity_filter(det.score_volume, subject.t2s, thr, config.filter_mode, config.connectivity)


@dataclass
class TrainResult:
    artifacts: dict[str, Path]
    manifest: dict
    threshold: IntensityThreshold
    detector_history: list = field(default_factory=list)
    segmenter_history: list = field(default_factory=list)


def cmd_train(config: RunConfig) -> TrainResult:
    """Train both stages and derive the intensity threshold for one model group."""
    paths = artifact_paths(config)
    stages = []
    with stage("load"):
        ids = group_subject_ids(config)
        if not ids:
            raise MissingFile(f"no subjects of group {config.group.value} under {config.data_root}")
        subjects = [load_subject(config.data_root, sid, require_annotation=True) for sid in ids]
    stages.append("load")

    with stage("preprocess"):
        prepped = {s.id: preprocess_subject(s, config.inplane_size)[0] for s in subjects}
    stages.append("preprocess")

    with stage("split"):
        if len(ids) >= 2:
            train_ids, val_ids = split_train_val(ids, config.split_fraction, config.seed)
        else:
            train_ids, val_ids = list(ids), []
    stages.append("split")

    with stage("threshold"):
        thr = derive_intensity_threshold(prepped.values(), config.connectivity, config.threshold_margin)
        thr.save(paths["threshold"])
    stages.append("threshold")

    hp_det = config.detector_hyperparams()
    with stage("detector_train"):
        train_patches = detector_patches([prepped[i] for i in train_ids], hp_det, config.seed)
        val_patches = detector_patches([prepped[i] for i in val_ids], hp_det, config.seed + 1)
        kwargs = {"width": config.detector_width, "instance_threshold": config.instance_threshold}
        if config.detector_backend == "maskrcnn":
            kwargs = {"weights": config.detector_weights or None}
        detector = make_detector_backend(config.detector_backend, config.seed, **kwargs)
        finetune_detector(train_patches, val_patches, hp_det, detector, config.seed)
        detector.save(paths["detector"])
    stages.append("detector_train")

    with stage("stage1_inference"):
        stage1 = {i: stage1_scores(detector, prepped[i], thr, config) for i in train_ids + val_ids}
    stages.append("stage1_inference")

    hp_seg = config.segmenter_hyperparams()
    with stage("segmenter_train"):
        rng = np.random.default_rng(config.seed)
        pairs = [p for i in train_ids for p in build_training_pairs(prepped[i], stage1[i], hp_seg.empty_slice_keep, rng)]
        val_pairs = [p for i in val_ids for p in build_training_pairs(prepped[i], stage1[i], hp_seg.empty_slice_keep, rng)]
        segmenter = UNetSegmenter(config.segmenter_widths, seed=config.seed)
        train_segmenter(pairs, hp_seg, segmenter, config.seed, val_pairs)
        segmenter.save(paths["segmenter"])
    stages.append("segmenter_train")

    manifest = {
        "command": "train",
        "version": __version__,
        "torch": torch.__version__,
        "python": platform.python_version(),
        "config": config.to_dict(),
        "config_text": config.to_text(),
        "overrides": config.overrides(),
        "seed": config.seed,
        "group": config.group.value,
        "subjects": ids,
        "split": {"train": train_ids, "val": val_ids},
        "threshold": thr.value,
        "detector_patches": {"train": len(train_patches), "val": len(val_patches)},
        "segmenter_pairs": {"train": len(pairs), "val": len(val_pairs)},
        "segmenter_pos_weight": segmenter.pos_weight,
        "losses": {
            "detector": [r.to_dict() for r in detector.history],
            "segmenter": [r.to_dict() for r in segmenter.history],
        },
        "stages": stages,
        "artifacts": {k: sha256(paths[k]) for k in ("detector", "segmenter", "threshold")},
    }
    _write_json(paths["manifest"], manifest)
    return TrainResult(paths, manifest, thr, detector.history, segmenter.history)


def config_from_manifest(path) -> RunConfig:
    return RunConfig.from_text(json.loads(Path(path).read_text())["config_text"])


# -- predict ------------------------------------------------------------------


@dataclass
class Models:
    detector: object
    segmenter: UNetSegmenter
    threshold: IntensityThreshold
    hashes: dict


def load_models(config: RunConfig) -> Models:
    paths = artifact_paths(config)
    for key in ("detector", "segmenter", "threshold"):
        if not paths[key].exists():
            raise MissingModel(f"missing {key} artifact {paths[key]}; run train first")
    return Models(
        load_backend(paths["detector"]), load_backend(paths["segmenter"]),
        IntensityThreshold.load(paths["threshold"]),
        {k: sha256(paths[k]) for k in ("detector", "segmenter", "threshold")},
    )


@dataclass
class Prediction:
    path: Path
    mask: np.ndarray
    stages: list
    intermediates: dict = field(default_factory=dict)


def prediction_path(config: RunConfig, subject_id: str) -> Path:
    return Path(config.output_dir) / "predictions" / f"{subject_id}_pred.nii.gz"


def predict_subject(config: RunConfig, subject: SubjectRecord, models: Models,
                    keep_intermediates: bool = False) -> tuple[Volume, list, dict]:
    """Run the full prediction chain on one loaded subject; returns the native-grid mask."""
    stages: list[str] = []
    with stage("normalize"):
        norm = {k: zscore_normalize(v) for k, v in subject.volumes().items()}
    stages.append("normalize")
    with stage("resize"):
        t = ResizeTransform(subject.shape[1:], (config.inplane_size,) * 2, "linear")
        vols = {k: resize_inplane(v, t) for k, v in norm.items()}
        pre = SubjectRecord(subject.id, vols["T1"], vols["T2"], vols["T2S"])
    stages.append("resize")
    with stage("detector"):
        det = infer_detector(models.detector, pre, config.detector_hyperparams())
    stages.append("detector")
    with stage("intensity_filter"):
        s1 = apply_intensity_filter(det.score_volume, pre.t2s, models.threshold, config.filter_mode,
                                    config.connectivity)
    stages.append("intensity_filter")
    with stage("segmenter"):
        prob = infer_segmenter(models.segmenter, pre, s1)
    stages.append("segmenter")
    with stage("postprocess"):
        brain = compute_brain_mask(pre.t2s, config.dilation_radius)
        post_log: list[str] = []
        binary = postprocess_pipeline(prob, pre.t2s, models.threshold, brain, config.filter_mode,
                                      config.binarize_threshold, config.connectivity, log=post_log)
    stages.extend(post_log)
    with stage("invert_resize"):
        native = invert_resize(binary, t, "nearest")
        native = Volume(native.data.astype(np.uint8), subject.t2s.spacing)
    stages.append("invert_resize")
    extra = {}
    if keep_intermediates:
        extra = {"preprocessed": pre, "stage1_raw": det.score_volume, "stage1": s1, "prob": prob,
                 "brain": brain, "binary": binary, "transform": t}
    return native, stages, extra


def cmd_predict(config: RunConfig, subject_id: str, out_path=None, models: Models | None = None,
                keep_intermediates: bool = False) -> Prediction:
    models = models or load_models(config)
    with stage("load"):
        subject = load_subject(config.data_root, subject_id)
    native, stages, extra = predict_subject(config, subject, models, keep_intermediates)
    out = Path(out_path) if out_path else prediction_path(config, subject_id)
    with stage("write"):
        write_volume(native, out)
        _write_json(out.with_name(f"{subject_id}_manifest.json"), {
            "command": "predict",
            "subject": subject_id,
            "stages": stages,
            "config": config.to_dict(),
            "overrides": config.overrides(),
            "artifacts": models.hashes,
            "transform": ResizeTransform(subject.shape[1:], (config.inplane_size,) * 2).to_manifest(),
            "output": {"path": str(out), "sha256": sha256(out), "positives": int(native.data.sum())},
        })
    return Prediction(out, native.data, stages, extra)


def cmd_predict_many(config: RunConfig, ids) -> list[Prediction]:
    models = load_models(config)
    if config.workers == 1:
        return [cmd_predict(config, sid, models=models) for sid in ids]
    with ThreadPoolExecutor(config.workers) as pool:
        return list(pool.map(lambda sid: cmd_predict(config, sid, models=models), ids))


# -- evaluate / plot --------------------------------------------------------------


def evaluation_dir(config: RunConfig) -> Path:
    return Path(config.output_dir) / "evaluation"


def _overlay_slices(gt: np.ndarray, pred: np.ndarray, k: int) -> list[int]:
    weight = gt.sum(axis=(1, 2)) * 1000 + pred.sum(axis=(1, 2))
    order = np.argsort(-weight, kind="stable")
    return sorted(int(z) for z in order[:k] if weight[z] > 0) or [gt.shape[0] // 2]


def _evaluate_one(config: RunConfig, sid: str, overlays: bool):
    with stage("evaluate_load"):
        pred_file = prediction_path(config, sid)
        if not pred_file.exists():
            raise MissingFile(f"no prediction for subject {sid} at {pred_file}")
        pred = read_volume(pred_file).data
        gt = read_volume(subject_path(config.data_root, sid, "CMB")).data
    with stage("evaluate_match"):
        report = match_lesions(pred, gt, config.connectivity)
        d = dice(pred, gt)
    images = []
    if overlays and config.overlays_per_subject > 0:
        t2s = read_volume(subject_path(config.data_root, sid, "T2S")).data
        for z in _overlay_slices(gt, pred, config.overlays_per_subject):
            out = evaluation_dir(config) / "overlays" / f"{sid}_s{z:03d}.png"
            images.append(render_overlay(t2s[z], gt[z], pred[z], out))
    return sid, report, d, images


def cmd_evaluate(config: RunConfig, ids=None, overlays: bool = True) -> EvalReport:
    """Lesion-level tables per subject and per cohort, overlays and one confusion plot per cohort."""
    if ids is None:
        pred_dir = Path(config.output_dir) / "predictions"
        ids = sorted(p.name.removesuffix("_pred.nii.gz") for p in pred_dir.glob("*_pred.nii.gz"))
    if config.workers == 1:
        results = [_evaluate_one(config, sid, overlays) for sid in ids]
    else:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(lambda sid: _evaluate_one(config, sid, overlays), ids))
    with stage("aggregate"):
        report = aggregate_cohort([(sid, r) for sid, r, _, _ in results], config.extra_routes,
                                  {sid: d for sid, _, d, _ in results})
        report.settings = {"connectivity": config.connectivity, "matching": "greedy one-to-one, >=1 voxel overlap",
                           "binarize_threshold": config.binarize_threshold, "filter_mode": config.filter_mode}
    out = evaluation_dir(config)
    report.write(out)
    images = {cohort: render_confusion(c, f"cohort {cohort}", out / f"confusion_cohort{cohort}.png")
              for cohort, c in report.cohorts.items()}
    _write_json(out / "manifest.json", {
        "command": "evaluate", "subjects": list(ids), "settings": report.settings,
        "config": config.to_dict(), "confusion_images": {k: str(v) for k, v in images.items()},
        "overlays": {sid: [str(p) for p in imgs] for sid, _, _, imgs in results},
    })
    return report


def cmd_plot(config: RunConfig, ids=None, slices=None) -> list[Path]:
    """Re-render confusion plots from ``summary.csv`` and overlays for the requested slices."""
    out = evaluation_dir(config)
    summary = out / "summary.csv"
    if not summary.exists():
        raise MissingFile(f"{summary} not found; run evaluate first")
    written = []
    with summary.open() as fh:
        for row in csv.DictReader(fh):
            if row["level"] == "cohort":
                c = Counts(int(row["tp"]), int(row["fp"]), int(row["fn"]), int(row["subjects"]))
                written.append(render_confusion(c, f"cohort {row['key']}", out / f"confusion_cohort{row['key']}.png"))
    for sid in ids or []:
        pred = read_volume(prediction_path(config, sid)).data
        gt = read_volume(subject_path(config.data_root, sid, "CMB")).data
        t2s = read_volume(subject_path(config.data_root, sid, "T2S")).data
        for z in slices if slices is not None else _overlay_slices(gt, pred, config.overlays_per_subject):
            written.append(render_overlay(t2s[z], gt[z], pred[z], out / "overlays" / f"{sid}_s{z:03d}.png"))
    return written


__all__ = [
    "PREDICT_STAGES", "PipelineError", "cmd_phantom", "cmd_train", "cmd_predict", "cmd_predict_many",
    "cmd_evaluate", "cmd_plot", "config_from_manifest", "load_models",
]
