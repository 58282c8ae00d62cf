"""Chamfer-distance average precision for vectorised map instances."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

CLASSES = ("centerline", "boundary", "divider")
THRESHOLDS = (0.5, 1.0, 1.5)
N_RECALL = 101


@dataclass
class MapInstance:
    cls: str
    xy: np.ndarray
    confidence: float | None = None

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)


def chamfer(a, b):
    """Symmetric mean nearest-point distance between two point sets (metres)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ContractError("chamfer needs non-empty point sets")
    dx = a[:, None, 0] - b[None, :, 0]
    dy = a[:, None, 1] - b[None, :, 1]
    d = np.sqrt(dx * dx + dy * dy)
    return 0.5 * (math.fsum(d.min(axis=1).tolist()) / len(a) + math.fsum(d.min(axis=0).tolist()) / len(b))


def _as_scenes(x):
    """Accept one scene (list of instances) or a list of scenes."""
    if len(x) and isinstance(x[0], MapInstance):
        return [x]
    return list(x)


def pairwise_chamfer(a_sets, b_sets):
    """Chamfer distance for every pair of two lists of equal-size point sets."""
    if not len(a_sets) or not len(b_sets):
        return np.zeros((len(a_sets), len(b_sets)))
    a = np.stack([np.asarray(x, dtype=np.float64).reshape(-1, 2) for x in a_sets])
    b = np.stack([np.asarray(x, dtype=np.float64).reshape(-1, 2) for x in b_sets])
    dx = a[:, None, :, None, 0] - b[None, :, None, :, 0]
    dy = a[:, None, :, None, 1] - b[None, :, None, :, 1]
    d = np.sqrt(dx * dx + dy * dy)
    return 0.5 * (d.min(axis=3).mean(axis=2) + d.min(axis=2).mean(axis=2))


def match_ranked(preds_by_scene, gts_by_scene, cls, tau, _dist=None):
    """Greedy confidence-ordered matching; returns ``(tp flags in rank order, n_gt)``.

    Each prediction takes the nearest still-unmatched ground truth of its
    class in the same scene and counts as a hit when that distance is below
    ``tau``.
    """
    ranked = []
    for s, preds in enumerate(preds_by_scene):
        for i, p in enumerate(preds):
            if p.cls == cls:
                conf = 1.0 if p.confidence is None else float(p.confidence)
                ranked.append((-conf, s, i))
    ranked.sort()
    gts = [[g for g in scene if g.cls == cls] for scene in gts_by_scene]
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    n_gt = sum(len(g) for g in gts)
    dist = _dist if _dist is not None else {}
    tp = []
    for _, s, i in ranked:
        if s >= len(gts) or not len(gts[s]):
            tp.append(False)
            continue
        if s not in dist:
            own = [p for p in preds_by_scene[s] if p.cls == cls]
            dist[s] = pairwise_chamfer([p.xy for p in own], [g.xy for g in gts[s]])
            dist[s, "index"] = {j: k for k, j in enumerate(
                [j for j, p in enumerate(preds_by_scene[s]) if p.cls == cls])}
        row = np.where(used[s], np.inf, dist[s][dist[s, "index"][i]])
        best = int(np.argmin(row))
        hit = row[best] < tau
        if hit:
            used[s][best] = True
        tp.append(bool(hit))
    return np.asarray(tp, dtype=bool), n_gt


def interpolated_ap(tp, n_gt):
    """101-point interpolated AP from rank-ordered TP flags."""
    if n_gt == 0:
        return None if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    total = 0.0
    for i in range(N_RECALL):
        # recall >= i/100 evaluated in integers: 100*tp >= i*n_gt
        ok = 100 * ctp >= i * n_gt
        total += precision[ok].max() if ok.any() else 0.0
    return total / N_RECALL


def ap(predictions, ground_truth, cls, tau, _dist=None):
    """Average precision for one class at one Chamfer threshold.

    Returns ``None`` when the class has neither ground truth nor predictions.
    """
    preds = _as_scenes(predictions)
    gts = _as_scenes(ground_truth)
    if len(preds) != len(gts):
        if not preds:
            preds = [[] for _ in gts]
        elif not gts:
            gts = [[] for _ in preds]
        else:
            raise ContractError("predictions and ground truth cover different scene counts")
    tp, n_gt = match_ranked(preds, gts, cls, tau, _dist)
    return interpolated_ap(tp, n_gt)


@dataclass
class ApResult:
    ap: dict = field(default_factory=dict)  # (class, tau) -> AP
    classes: tuple = CLASSES
    thresholds: tuple = THRESHOLDS

    @property
    def defined(self):
        return bool(self.ap)

    @property
    def mAP(self):
        return float(np.mean(list(self.ap.values()))) if self.ap else float("nan")

    def class_ap(self, cls):
        vals = [v for (c, _), v in self.ap.items() if c == cls]
        return float(np.mean(vals)) if vals else float("nan")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "tau", "AP"])
        for (c, t), v in self.ap.items():
            w.writerow([c, f"{t:g}", f"{v:.6f}"])
        w.writerow(["mAP", "", f"{self.mAP:.6f}" if self.defined else "undefined"])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({
            "ap": [{"class": c, "tau": t, "ap": v} for (c, t), v in self.ap.items()],
            "mAP": self.mAP if self.defined else "undefined",
        }, sort_keys=True)


def map_over(predictions, ground_truth, classes=CLASSES, thresholds=THRESHOLDS):
    """AP over the class x threshold grid; classes absent from both sides are skipped."""
    preds = _as_scenes(predictions)
    gts = _as_scenes(ground_truth)
    if not preds:
        preds = [[] for _ in gts]
    if not gts:
        gts = [[] for _ in preds]
    result = ApResult(classes=tuple(classes), thresholds=tuple(thresholds))
    for c in classes:
        dist = {}
        for t in thresholds:
            v = ap(preds, gts, c, t, dist)
            if v is not None:
                result.ap[(c, t)] = v
    return result
