"""OSM XML ingestion and ego-centric frame extraction.

Frame element ids are strings prefixed with the OSM kind (``n``, ``w``,
``r``) because node, way and relation ids share no namespace in OSM.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from xml.parsers import expat
from xml.sax.saxutils import quoteattr

import numpy as np

from .errors import ContractError, DanglingReference, ParseError

EARTH_RADIUS = 6_371_000.0
DEFAULT_POINTS = 10

KIND_PREFIX = {"node": "n", "way": "w", "relation": "r"}


# ---------------------------------------------------------------------------
# tag sets
# ---------------------------------------------------------------------------

def make_tagset(pairs=()):
    """Canonical tag set: a tuple of ``(key, value)`` string pairs sorted by key."""
    if isinstance(pairs, dict):
        pairs = pairs.items()
    out = sorted((str(k), str(v)) for k, v in pairs)
    for a, b in zip(out, out[1:]):
        if a[0] == b[0]:
            raise ContractError(f"duplicate tag key {a[0]!r}")
    return tuple(out)


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OsmElement:
    id: int
    kind: str  # "node" | "way" | "relation"
    tags: tuple = ()
    lonlat: tuple | None = None
    nodes: tuple | None = None
    members: tuple | None = None  # ((kind, ref, role), ...)

    @property
    def key(self):
        return f"{KIND_PREFIX[self.kind]}{self.id}"


@dataclass(frozen=True)
class EgoPose:
    lon: float
    lat: float
    heading: float = 0.0  # radians, counter-clockwise from east

    def __post_init__(self):
        if not (-math.pi < self.heading <= math.pi):
            raise ContractError(f"heading {self.heading} outside (-pi, pi]")


@dataclass(frozen=True)
class RangeSpec:
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0 and self.width > 0):
            raise ContractError("range length and width must be positive")

    @property
    def half_extents(self):
        return self.length / 2.0, self.width / 2.0


NEAR = RangeSpec(60.0, 30.0)
FAR = RangeSpec(120.0, 60.0)
RANGE_PRESETS = {"near": NEAR, "far": FAR}


@dataclass
class FrameElement:
    id: str
    kind: str  # "point" | "polyline" | "relation"
    tags: tuple = ()
    xy: np.ndarray | None = None  # (1, 2) for points, (P, 2) for polylines
    members: tuple | None = None  # ((id_a, id_b), ...) for relations


@dataclass
class SdFrame:
    id: str
    range: RangeSpec
    elements: list = field(default_factory=list)

    def element_map(self):
        return {e.id: e for e in self.elements}

    def check(self, points=None):
        """Raise ``ContractError`` if a frame invariant does not hold."""
        geo = {}
        for e in self.elements:
            if e.kind == "point":
                if e.xy.shape != (1, 2):
                    raise ContractError(f"point {e.id} must have one xy pair")
                geo[e.id] = e
            elif e.kind == "polyline":
                if points is not None and e.xy.shape != (points, 2):
                    raise ContractError(f"polyline {e.id} has {len(e.xy)} points, expected {points}")
                geo[e.id] = e
        for e in self.elements:
            if e.kind == "relation":
                for a, b in e.members:
                    if a not in geo or b not in geo:
                        raise ContractError(f"relation {e.id} references element outside the frame")


# ---------------------------------------------------------------------------
# XML parsing
# ---------------------------------------------------------------------------

class _Builder:
    def __init__(self, parser):
        self.parser = parser
        self.elements = []
        self.current = None

    def fail(self, msg):
        raise ParseError(msg, self.parser.CurrentByteIndex)

    def _int(self, attrs, name):
        try:
            return int(attrs[name])
        except (KeyError, ValueError):
            self.fail(f"missing or invalid attribute {name!r}")

    def _float(self, attrs, name):
        try:
            return float(attrs[name])
        except (KeyError, ValueError):
            self.fail(f"missing or invalid attribute {name!r}")

    def start(self, name, attrs):
        cur = self.current
        if name in ("node", "way", "relation"):
            if cur is not None:
                self.fail(f"<{name}> nested inside <{cur['kind']}>")
            cur = {"kind": name, "id": self._int(attrs, "id"), "tags": [], "nodes": [], "members": []}
            if name == "node":
                cur["lonlat"] = (self._float(attrs, "lon"), self._float(attrs, "lat"))
            self.current = cur
        elif name == "tag" and cur is not None:
            if "k" not in attrs or "v" not in attrs:
                self.fail("tag without k/v")
            cur["tags"].append((attrs["k"], attrs["v"]))
        elif name == "nd" and cur is not None and cur["kind"] == "way":
            cur["nodes"].append(self._int(attrs, "ref"))
        elif name == "member" and cur is not None and cur["kind"] == "relation":
            kind = attrs.get("type")
            if kind not in KIND_PREFIX:
                self.fail(f"member with invalid type {kind!r}")
            cur["members"].append((kind, self._int(attrs, "ref"), attrs.get("role", "")))

    def end(self, name):
        cur = self.current
        if cur is None or name != cur["kind"]:
            return
        try:
            tags = make_tagset(cur["tags"])
        except ContractError as exc:
            self.fail(str(exc))
        if name == "node":
            el = OsmElement(cur["id"], "node", tags, lonlat=cur["lonlat"])
        elif name == "way":
            if len(cur["nodes"]) < 2:
                self.fail(f"way {cur['id']} has fewer than 2 nodes")
            el = OsmElement(cur["id"], "way", tags, nodes=tuple(cur["nodes"]))
        else:
            if not cur["members"]:
                self.fail(f"relation {cur['id']} has no members")
            el = OsmElement(cur["id"], "relation", tags, members=tuple(cur["members"]))
        self.elements.append(el)
        self.current = None


def parse_osm_xml(data):
    """Parse an OSM v0.6 XML document into a list of :class:`OsmElement`.

    Errors caused by premature end of input are reported at ``len(data)``.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    parser = expat.ParserCreate()
    builder = _Builder(parser)
    parser.StartElementHandler = builder.start
    parser.EndElementHandler = builder.end
    try:
        parser.Parse(data, False)
    except expat.ExpatError as exc:
        raise ParseError(expat.errors.messages[exc.code], parser.ErrorByteIndex) from None
    try:
        parser.Parse(b"", True)
    except expat.ExpatError as exc:
        raise ParseError(expat.errors.messages[exc.code], len(data)) from None

    node_ids = {e.id for e in builder.elements if e.kind == "node"}
    missing = []
    for e in builder.elements:
        if e.kind == "way":
            missing.extend(n for n in e.nodes if n not in node_ids and n not in missing)
    if missing:
        raise DanglingReference(missing)
    return builder.elements


def serialize_osm_xml(elements):
    lines = ["<?xml version='1.0' encoding='UTF-8'?>", '<osm version="0.6">']

    def tag_lines(tags):
        return [f"    <tag k={quoteattr(k)} v={quoteattr(v)}/>" for k, v in tags]

    for e in elements:
        if e.kind == "node":
            head = f'  <node id="{e.id}" lon="{e.lonlat[0]!r}" lat="{e.lonlat[1]!r}"'
            if not e.tags:
                lines.append(head + "/>")
                continue
            lines.append(head + ">")
            lines.extend(tag_lines(e.tags))
            lines.append("  </node>")
        elif e.kind == "way":
            lines.append(f'  <way id="{e.id}">')
            lines.extend(f'    <nd ref="{n}"/>' for n in e.nodes)
            lines.extend(tag_lines(e.tags))
            lines.append("  </way>")
        else:
            lines.append(f'  <relation id="{e.id}">')
            lines.extend(f'    <member type="{k}" ref="{r}" role={quoteattr(role)}/>' for k, r, role in e.members)
            lines.extend(tag_lines(e.tags))
            lines.append("  </relation>")
    lines.append("</osm>")
    return ("\n".join(lines) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def project(lon, lat, ego):
    """Local equirectangular projection into the ego frame (metres, x along heading)."""
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    east = EARTH_RADIUS * np.radians(lon - ego.lon) * math.cos(math.radians(ego.lat))
    north = EARTH_RADIUS * np.radians(lat - ego.lat)
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    return c * east + s * north, -s * east + c * north


def unproject(x, y, ego):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    east = c * x - s * y
    north = s * x + c * y
    lon = ego.lon + np.degrees(east / (EARTH_RADIUS * math.cos(math.radians(ego.lat))))
    lat = ego.lat + np.degrees(north / EARTH_RADIUS)
    return lon, lat


def point_in_range(xy, area):
    hx, hy = area.half_extents
    return abs(xy[0]) <= hx and abs(xy[1]) <= hy


def segment_intersects_range(p, q, area):
    """Liang-Barsky test of segment ``p``-``q`` against the closed range rectangle."""
    hx, hy = area.half_extents
    t0, t1 = 0.0, 1.0
    d = (q[0] - p[0], q[1] - p[1])
    for pi, di, lo, hi in ((p[0], d[0], -hx, hx), (p[1], d[1], -hy, hy)):
        if di == 0.0:
            if pi < lo or pi > hi:
                return False
            continue
        a, b = (lo - pi) / di, (hi - pi) / di
        if a > b:
            a, b = b, a
        t0, t1 = max(t0, a), min(t1, b)
        if t0 > t1:
            return False
    return True


def polyline_intersects_range(xy, area):
    return any(segment_intersects_range(xy[i], xy[i + 1], area) for i in range(len(xy) - 1))


def arc_lengths(xy):
    seg = np.hypot(*np.diff(xy, axis=0).T)
    return np.concatenate([[0.0], np.cumsum(seg)])


def resample_polyline(points, n_points=DEFAULT_POINTS):
    """Resample to ``n_points`` equally spaced in arc length; endpoints kept exactly."""
    xy = np.asarray(points, dtype=np.float64)
    if xy.ndim != 2 or xy.shape[1] != 2 or len(xy) < 2:
        raise ContractError("resample_polyline needs at least 2 (x, y) points")
    if n_points < 2:
        raise ContractError("resample_polyline needs n_points >= 2")
    cum = arc_lengths(xy)
    total = cum[-1]
    if total == 0.0:
        return np.repeat(xy[:1], n_points, axis=0)
    targets = np.linspace(0.0, total, n_points)
    # searchsorted keeps zero-length segments from confusing the interpolation
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(xy) - 2)
    seg_len = cum[idx + 1] - cum[idx]
    frac = np.divide(targets - cum[idx], seg_len, out=np.zeros_like(targets), where=seg_len > 0)
    out = xy[idx] + frac[:, None] * (xy[idx + 1] - xy[idx])
    out[0] = xy[0]
    out[-1] = xy[-1]
    return out


# ---------------------------------------------------------------------------
# frame extraction
# ---------------------------------------------------------------------------

def project_to_frame(elements, ego, area, n_points=DEFAULT_POINTS, frame_id="frame"):
    """Build an :class:`SdFrame` of every element intersecting the range.

    Tagged nodes become point elements, as do untagged nodes that a relation
    lists directly.  Ways are kept whole when any segment touches the range and
    are then resampled.  A relation survives only when all its members did.
    """
    if n_points < 2:
        raise ContractError("n_points must be >= 2")
    nodes = {e.id: e for e in elements if e.kind == "node"}
    member_nodes = {ref for e in elements if e.kind == "relation"
                    for kind, ref, _ in e.members if kind == "node"}

    def xy_of(node_ids):
        lonlat = np.array([nodes[n].lonlat for n in node_ids])
        x, y = project(lonlat[:, 0], lonlat[:, 1], ego)
        return np.stack([x, y], axis=1)

    out = []
    kept = set()
    for e in elements:
        if e.kind == "node":
            if not e.tags and e.id not in member_nodes:
                continue
            xy = xy_of([e.id])
            if point_in_range(xy[0], area):
                out.append(FrameElement(e.key, "point", e.tags, xy))
                kept.add(e.key)
        elif e.kind == "way":
            missing = [n for n in e.nodes if n not in nodes]
            if missing:
                raise DanglingReference(missing)
            xy = xy_of(e.nodes)
            if polyline_intersects_range(xy, area):
                out.append(FrameElement(e.key, "polyline", e.tags, resample_polyline(xy, n_points)))
                kept.add(e.key)
    for e in elements:
        if e.kind != "relation":
            continue
        ids = [f"{KIND_PREFIX[k]}{ref}" for k, ref, _ in e.members]
        if not all(i in kept for i in ids):
            continue
        pairs = tuple(zip(ids, ids[1:])) if len(ids) > 1 else ((ids[0], ids[0]),)
        out.append(FrameElement(e.key, "relation", e.tags, members=pairs))
    return SdFrame(frame_id, area, out)


# ---------------------------------------------------------------------------
# JSON lines
# ---------------------------------------------------------------------------

def _r6(v):
    v = round(float(v), 6)
    return 0.0 if v == 0.0 else v


def frame_to_dict(frame):
    els = []
    for e in frame.elements:
        d = {"id": e.id, "kind": e.kind, "tags": [list(kv) for kv in e.tags]}
        if e.kind == "relation":
            d["members"] = [list(p) for p in e.members]
        else:
            d["xy"] = [[_r6(x), _r6(y)] for x, y in e.xy]
        els.append(d)
    return {"id": frame.id, "range": [frame.range.length, frame.range.width], "elements": els}


def frame_from_dict(d):
    els = []
    for e in d["elements"]:
        tags = make_tagset(tuple(kv) for kv in e["tags"])
        if e["kind"] == "relation":
            els.append(FrameElement(e["id"], "relation", tags, members=tuple(tuple(p) for p in e["members"])))
        else:
            els.append(FrameElement(e["id"], e["kind"], tags, np.array(e["xy"], dtype=np.float64).reshape(-1, 2)))
    return SdFrame(d["id"], RangeSpec(*d["range"]), els)


def dumps_frame(frame):
    return json.dumps(frame_to_dict(frame), separators=(",", ":"), ensure_ascii=False)


def loads_frame(line):
    return frame_from_dict(json.loads(line))


def write_frames(path, frames):
    with open(path, "w", encoding="utf-8") as fh:
        for f in frames:
            fh.write(dumps_frame(f) + "\n")


def read_frames(path):
    with open(path, encoding="utf-8") as fh:
        return [loads_frame(line) for line in fh if line.strip()]
