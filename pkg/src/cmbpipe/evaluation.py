"""Lesion-level matching, cohort aggregation and overlay rendering."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .catalog import ModelGroup, Volume, route_cohort
from .errors import ShapeMismatch
from .postprocess import DEFAULT_CONNECTIVITY, connected_components


def _array(v):
    return v.data if isinstance(v, Volume) else np.asarray(v)


@dataclass
class MatchReport:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (gt label, pred label)
    overlaps: dict[tuple[int, int], int] = field(default_factory=dict)
    n_gt: int = 0
    n_pred: int = 0


def match_lesions(pred, gt, connectivity: int = DEFAULT_CONNECTIVITY) -> MatchReport:
    """One-to-one greedy matching of predicted and reference lesions.

    Any overlap of one voxel or more makes a candidate pair; pairs are taken
    by descending overlap, ties broken by the lower GT then predicted label.
    """
    p, g = _array(pred), _array(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != reference shape {g.shape}")
    pl = connected_components(p, connectivity)
    gl = connected_components(g, connectivity)
    both = (pl.labels > 0) & (gl.labels > 0)
    keys, counts = np.unique(
        np.stack([gl.labels[both], pl.labels[both]], axis=1), axis=0, return_counts=True
    ) if both.any() else (np.zeros((0, 2), int), np.zeros(0, int))
    overlaps = {(int(a), int(b)): int(c) for (a, b), c in zip(keys, counts)}
    used_gt, used_pred, pairs = set(), set(), []
    for (a, b), c in sorted(overlaps.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1])):
        if a in used_gt or b in used_pred:
            continue
        used_gt.add(a)
        used_pred.add(b)
        pairs.append((a, b))
    tp = len(pairs)
    return MatchReport(tp, pl.count - tp, gl.count - tp, pairs, overlaps, gl.count, pl.count)


def dice(pred, gt) -> float:
    p, g = _array(pred).astype(bool), _array(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction shape {p.shape} != reference shape {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    subjects: int = 0

    def add(self, r: MatchReport):
        self.tp += r.tp
        self.fp += r.fp
        self.fn += r.fn
        self.subjects += 1

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else float("nan")

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else float("nan")


@dataclass
class EvalReport:
    subjects: dict[str, MatchReport] = field(default_factory=dict)
    dice: dict[str, float] = field(default_factory=dict)
    cohorts: dict[str, Counts] = field(default_factory=dict)
    groups: dict[str, Counts] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def total(self) -> Counts:
        c = Counts()
        for r in self.subjects.values():
            c.add(r)
        return c

    def subject_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject", "cohort", "tp", "fp", "fn", "dice"])
        for sid in sorted(self.subjects):
            r = self.subjects[sid]
            d = self.dice.get(sid, float("nan"))
            w.writerow([sid, sid[0], r.tp, r.fp, r.fn, f"{d:.6f}"])
        return buf.getvalue()

    def summary_table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "key", "subjects", "tp", "fp", "fn", "recall", "precision"])
        for level, rows in (("cohort", self.cohorts), ("group", self.groups)):
            for key in sorted(rows):
                c = rows[key]
                w.writerow([level, key, c.subjects, c.tp, c.fp, c.fn, f"{c.recall:.6f}", f"{c.precision:.6f}"])
        return buf.getvalue()

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        a = out_dir / "subjects.csv"
        b = out_dir / "summary.csv"
        a.write_text(self.subject_table())
        b.write_text(self.summary_table())
        return a, b


def aggregate_cohort(
    reports: Iterable[tuple[str, MatchReport]],
    extra_routes: Mapping[str, ModelGroup] | None = None,
    dice_scores: Mapping[str, float] | None = None,
) -> EvalReport:
    """Sum per-subject counts per cohort digit and per model group."""
    out = EvalReport()
    cohorts, groups = defaultdict(Counts), defaultdict(Counts)
    for sid, r in reports:
        group = route_cohort(sid, extra_routes)
        out.subjects[sid] = r
        cohorts[sid[0]].add(r)
        groups[group.value].add(r)
    out.cohorts = dict(sorted(cohorts.items()))
    out.groups = dict(sorted(groups.items()))
    if dice_scores:
        out.dice = {k: float(v) for k, v in dice_scores.items() if k in out.subjects}
    return out


def _gray(slice_2d: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(slice_2d, [1, 99]) if slice_2d.size else (0, 1)
    if hi <= lo:
        hi = lo + 1
    # capped below 255 so pure white stays reserved for the GT boxes
    return (np.clip((slice_2d - lo) / (hi - lo), 0, 1) * 220).astype(np.uint8)


def lesion_boxes_2d(mask_2d: np.ndarray) -> list[tuple[int, int, int, int]]:
    """(row0, col0, row1, col1) inclusive bounding boxes of 8-connected blobs."""
    labels, n = ndimage.label(mask_2d > 0, structure=np.ones((3, 3), bool))
    boxes = []
    for sl in ndimage.find_objects(labels):
        boxes.append((sl[0].start, sl[1].start, sl[0].stop - 1, sl[1].stop - 1))
    return boxes


def render_overlay(t2s_slice, gt_slice, pred_slice, out_path, margin: int = 1) -> Path:
    """Grayscale T2* with predictions tinted red and a white box around each GT lesion."""
    t2s_slice, gt_slice, pred_slice = (np.asarray(a) for a in (t2s_slice, gt_slice, pred_slice))
    if not t2s_slice.shape == gt_slice.shape == pred_slice.shape:
        raise ShapeMismatch("overlay slices must share a shape")
    g = _gray(t2s_slice.astype(np.float64))
    rgb = np.stack([g, g, g], axis=-1)
    red = pred_slice > 0
    rgb[red] = (rgb[red] * 0.3 + np.array([255, 0, 0]) * 0.7).astype(np.uint8)
    img = Image.fromarray(rgb, "RGB")
    draw = ImageDraw.Draw(img)
    h, w = g.shape
    for r0, c0, r1, c1 in lesion_boxes_2d(gt_slice):
        box = (max(c0 - margin, 0), max(r0 - margin, 0), min(c1 + margin, w - 1), min(r1 + margin, h - 1))
        draw.rectangle(box, outline=(255, 255, 255))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    img.save(out_path)
    return out_path


def render_confusion(counts: Counts, title: str, out_path) -> Path:
    """Lesion-level confusion matrix; the true-negative cell is undefined for lesion counts."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = np.array([[counts.tp, counts.fn], [counts.fp, 0]], dtype=float)
    fig, ax = plt.subplots(figsize=(3.6, 3.2), dpi=100)
    ax.imshow(np.ma.masked_array(grid, [[0, 0], [0, 1]]), cmap="Blues")
    for (i, j), v in np.ndenumerate(grid):
        ax.text(j, i, "-" if (i, j) == (1, 1) else f"{int(v)}", ha="center", va="center")
    ax.set_xticks([0, 1], ["lesion", "none"])
    ax.set_yticks([0, 1], ["lesion", "none"])
    ax.set_xlabel("predicted")
    ax.set_ylabel("reference")
    ax.set_title(title)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path)
    plt.close(fig)
    return out_path
