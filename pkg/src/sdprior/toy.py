"""Synthetic end-to-end benchmark: lane-level map decoding from SD tokens.

Each scene holds one or more roads.  The SD frame only carries the road
reference line (plus optional signal points and relations) and its tags;
the lane-level ground truth depends on the ``lanes`` tag, so the geometry
alone cannot disambiguate 1, 2 or 3 lanes.
"""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import layers
from . import tensor as T
from .errors import ContractError
from .metrics import CLASSES, MapInstance, map_over
from .osm import NEAR, FrameElement, RangeSpec, SdFrame, frame_from_dict, frame_to_dict, make_tagset, resample_polyline
from .sd_encoder import SdEncoder, SdEncoderConfig, batch_raw, frame_tokens
from .synthetic import _NAME_A, _NAME_B

NO_OBJECT = len(CLASSES)
MODES = ("with-tags", "no-tags", "frozen-nlp", "finetune-0.1")
TEXT_LR_MULTIPLIER = {"with-tags": 0.1, "finetune-0.1": 0.1, "frozen-nlp": 0.0}


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneSpec:
    max_roads: int = 2
    lanes: tuple = (1, 3)
    lane_width: float = 3.5
    oneway_prob: float = 0.5
    area: RangeSpec = NEAR
    noise: float = 0.0  # std of SD reference-line noise (m)
    max_slope: float = 0.12
    max_curvature: float = 0.004
    signal_prob: float = 0.3
    relation_prob: float = 0.5
    points: int = 10

    def __post_init__(self):
        if self.lane_width <= 0:
            raise ContractError("lane width must be positive")
        self.lanes = tuple(int(v) for v in self.lanes)
        if not 1 <= self.lanes[0] <= self.lanes[1]:
            raise ContractError(f"invalid lane-count range {self.lanes}")

    def max_instances(self):
        return self.max_roads * (2 * self.lanes[1] + 1)


@dataclass
class Scene:
    frame: SdFrame
    gt: list


def offset_curve(xy, d):
    """Offset a dense polyline by ``d`` metres along its left normal."""
    t = np.gradient(xy, axis=0)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    normal = np.stack([-t[:, 1], t[:, 0]], axis=1)
    return xy + d * normal


def lane_offsets(k, w):
    """``(boundaries, dividers, centerlines)`` lateral offsets for ``k`` lanes of width ``w``."""
    half = k * w / 2.0
    boundaries = [-half, half]
    dividers = [-half + j * w for j in range(1, k)]
    centerlines = [-half + (j + 0.5) * w for j in range(k)]
    return boundaries, dividers, centerlines


def road_ground_truth(ref, k, w, oneway, points):
    """Lane-level instances for a road with dense reference line ``ref``."""
    boundaries, dividers, centerlines = lane_offsets(k, w)
    out = []
    for d in centerlines:
        xy = resample_polyline(offset_curve(ref, d), points)
        if not oneway and d > 0:
            xy = xy[::-1].copy()
        out.append(MapInstance("centerline", xy))
    for d in boundaries:
        out.append(MapInstance("boundary", resample_polyline(offset_curve(ref, d), points)))
    for d in dividers:
        out.append(MapInstance("divider", resample_polyline(offset_curve(ref, d), points)))
    return out


def generate_scene(spec, seed, scene_id=None):
    """One scene.  Road geometry comes from its own random stream and keeps the
    clearance of the widest allowed road, so the SD geometry is identical
    whatever lane counts are drawn."""
    geo_rng, attr_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    hx, hy = spec.area.half_extents
    xs = np.linspace(-hx, hx, 121)
    widest = spec.lanes[1] * spec.lane_width / 2.0
    n_roads = int(geo_rng.integers(1, spec.max_roads + 1))
    curves = []
    for _ in range(200):
        if len(curves) == n_roads:
            break
        c = geo_rng.uniform(-hy + widest, hy - widest)
        a = geo_rng.uniform(-spec.max_slope, spec.max_slope)
        b = geo_rng.uniform(-spec.max_curvature, spec.max_curvature)
        ys = c + a * xs + b * xs * xs
        if all(np.min(np.abs(ys - other)) > 2 * widest + 2.0 for other in curves):
            curves.append(ys)
    elements, gt = [], []
    for i, ys in enumerate(curves):
        ref = np.stack([xs, ys], axis=1)
        sd = ref + geo_rng.normal(0.0, spec.noise, ref.shape) if spec.noise > 0 else ref
        k = int(attr_rng.integers(spec.lanes[0], spec.lanes[1] + 1))
        oneway = bool(attr_rng.random() < spec.oneway_prob)
        tags = {
            "highway": ["primary", "secondary", "tertiary", "residential"][attr_rng.integers(4)],
            "lanes": str(k),
            "oneway": "yes" if oneway else "no",
            "name": f"{_NAME_A[attr_rng.integers(len(_NAME_A))]} {_NAME_B[attr_rng.integers(len(_NAME_B))]}",
        }
        road_id = f"w{i + 1}"
        elements.append(FrameElement(road_id, "polyline", make_tagset(tags), resample_polyline(sd, spec.points)))
        gt.extend(road_ground_truth(ref, k, spec.lane_width, oneway, spec.points))
        if geo_rng.random() < spec.signal_prob:
            j = int(geo_rng.integers(10, len(xs) - 10))
            sig_id = f"n{i + 1}"
            elements.append(FrameElement(sig_id, "point", make_tagset({"highway": "traffic_signals"}),
                                         ref[j:j + 1].copy()))
            if geo_rng.random() < spec.relation_prob:
                elements.append(FrameElement(f"r{i + 1}", "relation",
                                             make_tagset({"type": "regulatory", "control": "traffic_signals"}),
                                             members=((sig_id, road_id),)))
    frame_id = scene_id if scene_id is not None else f"scene-{seed}"
    return Scene(SdFrame(frame_id, spec.area, elements), gt)


def generate_dataset(spec, n, seed):
    seeds = np.random.default_rng(seed).integers(0, 2**62, n)
    return [generate_scene(spec, int(s), f"scene-{seed}-{i}") for i, s in enumerate(seeds)]


def scene_to_dict(scene):
    return {"frame": frame_to_dict(scene.frame),
            "gt": [{"class": g.cls, "xy": [[round(float(x), 6), round(float(y), 6)] for x, y in g.xy]}
                   for g in scene.gt]}


def scene_from_dict(d):
    return Scene(frame_from_dict(d["frame"]), [MapInstance(g["class"], g["xy"]) for g in d["gt"]])


def write_scenes(path, scenes):
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(scene_to_dict(s), separators=(",", ":")) + "\n")


def read_scenes(path):
    with open(path, encoding="utf-8") as fh:
        return [scene_from_dict(json.loads(line)) for line in fh if line.strip()]


def instances_to_json(instances):
    return [{"class": g.cls, "xy": [[round(float(x), 6), round(float(y), 6)] for x, y in g.xy],
             **({"confidence": round(float(g.confidence), 9)} if g.confidence is not None else {})}
            for g in instances]


def instances_from_json(items):
    return [MapInstance(d["class"], d["xy"], d.get("confidence")) for d in items]


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

@dataclass
class ToyDecoderConfig:
    queries: int = 20
    d_model: int = 64
    layers: int = 2
    heads: int = 8
    d_ff: int = 128
    dropout: float = 0.1
    points: int = 10

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ContractError("heads must divide d_model")


class MapDecoder:
    """Learned queries refined by self-attention, cross-attention to SD tokens and feed-forward.

    Point outputs are offsets from a learned per-query reference point, in
    units of the range half-extents.
    """

    def __init__(self, config, seed=0):
        self.config = config
        c = config
        rng = np.random.default_rng(seed)
        p = {}
        p["query"] = T.parameter(rng.normal(0.0, 1.0, (c.queries, c.d_model)))
        p["ref"] = T.parameter(rng.uniform(-0.5, 0.5, (c.queries, 1, 2)))
        for i in range(c.layers):
            layers.init_decoder_layer(rng, p, f"layer{i}", c.d_model, c.d_ff)
        layers.init_layer_norm(p, "ln_out", c.d_model)
        layers.init_linear(rng, p, "cls", c.d_model, len(CLASSES) + 1)
        layers.init_linear(rng, p, "pts1", c.d_model, c.d_model)
        layers.init_linear(rng, p, "pts2", c.d_model, c.points * 2)
        p["pts2.w"].data *= 0.1
        self.params = p

    def forward(self, memory, valid=None, rng=None):
        """Return ``(class logits (B,Q,C+1), normalised points (B,Q,P,2))``."""
        c, p = self.config, self.params
        b = memory.shape[0]
        rate = c.dropout if rng is not None else 0.0
        x = p["query"].reshape(1, c.queries, c.d_model) + T.Tensor(np.zeros((b, c.queries, c.d_model)))
        bias = layers.key_bias(valid)
        for i in range(c.layers):
            x = layers.decoder_layer(x, memory, p, f"layer{i}", c.heads, bias, rng, rate)
        x = layers.layer_norm(x, p, "ln_out")
        logits = layers.linear(x, p, "cls")
        h = T.gelu(layers.linear(x, p, "pts1"))
        offsets = layers.linear(h, p, "pts2").reshape(b, c.queries, c.points, 2)
        return logits, offsets + p["ref"]

    __call__ = forward


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

def matching_cost(log_probs, pred_points, gt_classes, gt_points, lam=5.0):
    """Cost ``-log p(class) + lam * L1`` for every (query, gt) pair, and whether the
    reversed ground-truth orientation was the cheaper one."""
    log_probs = np.asarray(log_probs)
    pred_points = np.asarray(pred_points)
    q = len(pred_points)
    g = len(gt_classes)
    if g == 0:
        return np.zeros((q, 0)), np.zeros((q, 0), dtype=bool)
    gt_points = np.asarray(gt_points)
    fwd = np.abs(pred_points[:, None] - gt_points[None]).mean(axis=(2, 3))
    rev = np.abs(pred_points[:, None] - gt_points[None, :, ::-1]).mean(axis=(2, 3))
    reverse = rev < fwd
    l1 = np.where(reverse, rev, fwd)
    return -log_probs[:, np.asarray(gt_classes)] + lam * l1, reverse


def _solve(cost):
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()), rows, cols


def assign(cost):
    """Minimum-cost one-to-one assignment of gt columns to query rows.

    Returns ``[(query, gt), ...]`` sorted by gt.  Among optimal assignments
    (costs equal to within 1e-12 relative) the one whose query indices, read
    in gt order, are lexicographically smallest wins.
    """
    cost = np.asarray(cost, dtype=np.float64)
    q, g = cost.shape
    if g == 0:
        return []
    if g > q:
        raise ContractError(f"{g} ground-truth instances exceed {q} queries")
    best, rows, cols = _solve(cost)
    match = dict(zip(cols.tolist(), rows.tolist()))
    tol = 1e-12 * (1.0 + np.abs(cost).sum())
    big = 1e6 * (1.0 + np.abs(cost).max()) * g

    # the optimum is unique unless banning one of its pairs leaves the cost unchanged
    def tied():
        for j, r in match.items():
            banned = cost.copy()
            banned[r, j] = big
            if _solve(banned)[0] <= best + tol:
                return True
        return False

    if not tied():
        return [(match[j], j) for j in range(g)]
    fixed, used, spent = [], set(), 0.0
    for j in range(g):
        rest_cols = list(range(j + 1, g))
        for r in range(q):
            if r in used:
                continue
            rest_rows = [i for i in range(q) if i not in used and i != r]
            tail = _solve(cost[np.ix_(rest_rows, rest_cols)])[0] if rest_cols else 0.0
            if spent + cost[r, j] + tail <= best + tol:
                fixed.append((r, j))
                used.add(r)
                spent += cost[r, j]
                break
    return fixed


def set_loss(logits, points, gts, area, lam=5.0, no_object_weight=0.1):
    """Bipartite-matched set loss for a batch.

    ``gts`` holds one list of :class:`MapInstance` (metres) per scene.  Returns
    ``(loss tensor, matchings)``.
    """
    b, q = logits.shape[0], logits.shape[1]
    hx, hy = area.half_extents
    scale = np.array([hx, hy])
    lp = T.log_softmax(logits.detach(), axis=-1).data
    targets = np.full((b, q), NO_OBJECT, dtype=np.int64)
    weights = np.full((b, q), no_object_weight)
    idx_b, idx_q, tgt_pts = [], [], []
    matchings = []
    n_gt = 0
    for s, scene_gt in enumerate(gts):
        if len(scene_gt) > q:
            raise ContractError(f"{len(scene_gt)} ground-truth instances exceed {q} queries")
        cls = [CLASSES.index(g.cls) for g in scene_gt]
        gpts = np.stack([g.xy / scale for g in scene_gt]) if scene_gt else np.zeros((0, points.shape[2], 2))
        cost, reverse = matching_cost(lp[s], points.data[s], cls, gpts, lam)
        pairs = assign(cost)
        matchings.append(pairs)
        n_gt += len(pairs)
        for qi, gi in pairs:
            targets[s, qi] = cls[gi]
            weights[s, qi] = 1.0
            idx_b.append(s)
            idx_q.append(qi)
            tgt_pts.append(gpts[gi][::-1] if reverse[qi, gi] else gpts[gi])
    loss = T.cross_entropy(logits, targets, weights)
    if idx_b:
        pred = points[np.asarray(idx_b), np.asarray(idx_q)]
        diff = (pred - np.stack(tgt_pts)).abs()
        loss = loss + diff.sum() * (lam / (points.shape[2] * 2))
    return loss * (1.0 / max(n_gt, 1)), matchings


def match_and_loss(logits, points, gt, area, lam=5.0, no_object_weight=0.1):
    """Single-scene form of :func:`set_loss` taking (Q, C+1) logits and (Q, P, 2) points."""
    logits = T._as_tensor(logits)
    points = T._as_tensor(points)
    loss, matchings = set_loss(logits.reshape(1, *logits.shape), points.reshape(1, *points.shape),
                               [gt], area, lam, no_object_weight)
    return loss, matchings[0]


def to_instances(logits, points, area):
    """Per-query predictions in metres: arg-max real class, its probability as confidence."""
    logits = np.asarray(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    prob = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    hx, hy = area.half_extents
    out = []
    for q in range(len(logits)):
        c = int(np.argmax(prob[q, :NO_OBJECT]))
        out.append(MapInstance(CLASSES[c], np.asarray(points[q]) * [hx, hy], float(prob[q, c])))
    return out


# ---------------------------------------------------------------------------
# model and training
# ---------------------------------------------------------------------------

class ToyModel:
    """Text encoder (optional) + SD encoder + decoder, with the tag mode baked in."""

    def __init__(self, sd_config, dec_config, mode="with-tags", text_encoder=None, seed=0):
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}")
        if mode != "no-tags" and text_encoder is None:
            raise ContractError(f"mode {mode!r} needs a text encoder")
        if sd_config.d_model != dec_config.d_model:
            raise ContractError("SD encoder and decoder widths differ")
        self.mode = mode
        self.text = text_encoder if mode != "no-tags" else None
        if self.text is not None and self.text_multiplier > 0:
            # finetuning works on a private copy so the caller's pretrained weights survive
            self.text = copy.deepcopy(self.text)
        if self.text is not None and self.text.config.embed_dim != sd_config.tag_dim:
            raise ContractError("text embedding width does not match the SD token tag segment")
        self.sd = SdEncoder(sd_config, seed)
        self.decoder = MapDecoder(dec_config, seed + 1)
        self._frozen_cache = {}

    @property
    def text_multiplier(self):
        return TEXT_LR_MULTIPLIER.get(self.mode, 0.0)

    def parameters(self):
        params = {f"sd.{k}": v for k, v in self.sd.params.items()}
        params.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        if self.text is not None:
            params.update({f"text.{k}": v for k, v in self.text.params.items()})
        return params

    def multipliers(self):
        return {k: self.text_multiplier for k in self.parameters() if k.startswith("text.")}

    def tag_tensors(self, sequences, rng=None, train=False):
        if self.text is None:
            return None
        if train and self.text_multiplier > 0:
            unique = {}
            for s in sequences:
                for t in s.tagsets:
                    unique.setdefault(t, len(unique))
            emb = self.text.embed_tagsets(list(unique), rng)
            return [emb[np.asarray([unique[t] for t in s.tagsets], dtype=np.int64)] if s.tagsets else None
                    for s in sequences]
        missing = [t for s in sequences for t in s.tagsets if t not in self._frozen_cache]
        if missing:
            missing = list(dict.fromkeys(missing))
            vecs = self.text.embed_numpy(missing)
            self._frozen_cache.update(zip(missing, vecs))
        return [np.stack([self._frozen_cache[t] for t in s.tagsets]) if s.tagsets else None for s in sequences]

    def clear_cache(self):
        self._frozen_cache = {}

    def forward(self, sequences, rng=None, train=False):
        tags = self.tag_tensors(sequences, rng, train)
        raw, valid = batch_raw(sequences, tags, self.sd.config)
        memory = self.sd(raw, valid, rng)
        return self.decoder(memory, valid, rng)

    def predict(self, frames, seed=0, batch_size=64):
        out = []
        with T.no_grad():
            for i in range(0, len(frames), batch_size):
                chunk = frames[i:i + batch_size]
                seqs = [frame_tokens(f, self.sd.config, seed + i + j)[0] for j, f in enumerate(chunk)]
                logits, pts = self.forward(seqs)
                out.extend(to_instances(logits.data[j], pts.data[j], f.range) for j, f in enumerate(chunk))
        return out


def decode(model, frame, seed=0):
    """Q predictions for one frame."""
    return model.predict([frame], seed)[0]


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 1e-3
    lam: float = 5.0
    no_object_weight: float = 0.1
    decay_at: float = 0.75  # fraction of epochs after which lr drops 10x
    eval_every: int = 1


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    effective_lr: dict = field(default_factory=dict)

    def to_csv(self):
        import io
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mode", "train_loss"] + [f"AP_{c}" for c in CLASSES] + ["mAP"])
        for r in self.rows:
            w.writerow([r["epoch"], r["mode"], f"{r['train_loss']:.6f}"]
                       + [f"{r[f'AP_{c}']:.6f}" for c in CLASSES] + [f"{r['mAP']:.6f}"])
        return buf.getvalue()


def evaluate(model, scenes, seed=0):
    preds = model.predict([s.frame for s in scenes], seed)
    return map_over(preds, [s.gt for s in scenes])


def train_toy(train_scenes, eval_scenes, mode="with-tags", text_encoder=None, sd_config=None,
              dec_config=None, train_config=None, seed=0):
    """Jointly train SD encoder and decoder (and the text encoder at its mode multiplier).

    Returns ``(model, log)``; ``log.rows`` holds per-epoch held-out AP.
    """
    sd_config = sd_config or SdEncoderConfig(d_model=64, d_ff=128)
    dec_config = dec_config or ToyDecoderConfig(d_model=sd_config.d_model)
    tc = train_config or TrainConfig()
    model = ToyModel(sd_config, dec_config, mode, text_encoder, seed)
    params = model.parameters()
    frozen = {k for k, m in model.multipliers().items() if m == 0.0}
    trainable = {k: v for k, v in params.items() if k not in frozen}
    opt = T.Adam(trainable, lr=tc.lr, multipliers={k: v for k, v in model.multipliers().items() if k in trainable})
    log = TrainLog(effective_lr={**opt.effective_lr(), **{k: 0.0 for k in frozen}})
    order_rng = np.random.default_rng(seed + 7)
    drop_rng = np.random.default_rng(seed + 11)
    area = train_scenes[0].frame.range
    n = len(train_scenes)
    for epoch in range(tc.epochs):
        opt.lr = tc.lr * (0.1 if epoch >= int(tc.decay_at * tc.epochs) else 1.0)
        perm = order_rng.permutation(n)
        losses = []
        for start in range(0, n, tc.batch_size):
            idx = perm[start:start + tc.batch_size]
            seqs = [frame_tokens(train_scenes[i].frame, sd_config, int(order_rng.integers(2**62)))[0] for i in idx]
            logits, pts = model.forward(seqs, drop_rng, train=True)
            loss, _ = set_loss(logits, pts, [train_scenes[i].gt for i in idx], area, tc.lam, tc.no_object_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        if model.text is not None and model.text_multiplier > 0:
            model.clear_cache()
        row = {"epoch": epoch, "mode": mode, "train_loss": float(np.mean(losses))}
        last = epoch == tc.epochs - 1
        if eval_scenes and (last or (tc.eval_every and (epoch + 1) % tc.eval_every == 0)):
            res = evaluate(model, eval_scenes, seed)
            row.update({f"AP_{c}": res.class_ap(c) for c in CLASSES})
            row["mAP"] = res.mAP
        else:
            row.update({f"AP_{c}": float("nan") for c in CLASSES})
            row["mAP"] = float("nan")
        log.rows.append(row)
    return model, log


def model_metadata(model, train_config=None):
    return {
        "mode": model.mode,
        "sd_config": asdict(model.sd.config),
        "dec_config": asdict(model.decoder.config),
        "text": model.text.metadata() if model.text is not None else None,
        "train_config": asdict(train_config) if train_config else None,
    }
