import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdprior.errors import ContractError, DanglingReference, ParseError
from sdprior.osm import (FAR, NEAR, EgoPose, FrameElement, RangeSpec, SdFrame, arc_lengths, dumps_frame,
                         frame_to_dict, loads_frame, make_tagset, parse_osm_xml, polyline_intersects_range, project,
                         project_to_frame, read_frames, resample_polyline, serialize_osm_xml, unproject, write_frames)

FIXTURES = Path(__file__).parent / "fixtures"
ORIGIN = EgoPose(0.0, 0.0, 0.0)


def load(name):
    return (FIXTURES / name).read_bytes()


# -- parsing ---------------------------------------------------------------

def test_two_nodes_and_a_way():
    doc = b"""<osm version="0.6"><node id="1" lat="0" lon="0"/><node id="2" lat="0" lon="1"/>
    <way id="5"><nd ref="1"/><nd ref="2"/></way></osm>"""
    els = parse_osm_xml(doc)
    assert len(els) == 3
    assert els[2].nodes == (1, 2)


def test_node_tags_resolved():
    doc = b'<osm><node id="7" lat="1" lon="2"><tag k="highway" v="traffic_signals"/></node></osm>'
    (node,) = parse_osm_xml(doc)
    assert node.tags == (("highway", "traffic_signals"),)
    assert node.lonlat == (2.0, 1.0)


def test_valid_fixture_contents():
    els = parse_osm_xml(load("valid.osm"))
    kinds = [e.kind for e in els]
    assert kinds.count("node") == 5 and kinds.count("way") == 2 and kinds.count("relation") == 2
    way = next(e for e in els if e.id == 10)
    assert way.tags == (("highway", "residential"), ("lanes", "2"), ("name", "Main Street"))
    rel = next(e for e in els if e.id == 20)
    assert rel.members == (("node", 3, "device"), ("way", 10, "to"))


def test_truncated_fixture_reports_truncation_offset():
    data = load("truncated.osm")
    with pytest.raises(ParseError) as exc:
        parse_osm_xml(data)
    assert exc.value.offset == len(data)


@pytest.mark.parametrize("cut", [100, 250, 400, 700])
def test_cutting_valid_file_fails_at_cut(cut):
    data = load("valid.osm")[:cut]
    with pytest.raises(ParseError) as exc:
        parse_osm_xml(data)
    assert exc.value.offset == cut


def test_dangling_fixture_lists_missing_node():
    with pytest.raises(DanglingReference) as exc:
        parse_osm_xml(load("dangling.osm"))
    assert exc.value.missing_ids == [999]


def test_malformed_xml_has_offset_inside_document():
    doc = b"<osm><node id='1' lat='0' lon='0'></way></osm>"
    with pytest.raises(ParseError) as exc:
        parse_osm_xml(doc)
    assert 0 < exc.value.offset < len(doc)


def test_duplicate_tag_key_is_a_parse_error():
    with pytest.raises(ParseError):
        parse_osm_xml(b'<osm><node id="1" lat="0" lon="0"><tag k="a" v="1"/><tag k="a" v="2"/></node></osm>')


def test_short_way_rejected():
    with pytest.raises(ParseError):
        parse_osm_xml(b'<osm><node id="1" lat="0" lon="0"/><way id="2"><nd ref="1"/></way></osm>')


def test_parse_serialize_fixed_point():
    els = parse_osm_xml(load("valid.osm"))
    blob = serialize_osm_xml(els)
    again = parse_osm_xml(blob)
    assert again == els
    assert serialize_osm_xml(again) == blob


def test_make_tagset_canonical_order():
    assert make_tagset({"b": "1", "a": "2"}) == (("a", "2"), ("b", "1"))
    with pytest.raises(ContractError):
        make_tagset([("a", "1"), ("a", "2")])


# -- projection ------------------------------------------------------------

def test_origin_projects_to_zero():
    x, y = project(0.3, 51.0, EgoPose(0.3, 51.0, 1.0))
    assert (float(x), float(y)) == (0.0, 0.0)


def test_east_offset_at_equator():
    x, y = project(0.001, 0.0, ORIGIN)
    assert math.isclose(float(x), 6371000.0 * math.radians(0.001), rel_tol=1e-12)
    assert abs(float(x) - 111.19) < 0.01
    assert float(y) == 0.0


def test_heading_rotates_frame():
    # heading pi/2 means ego looks north, so a point to the north is straight ahead
    x, y = project(0.0, 0.001, EgoPose(0.0, 0.0, math.pi / 2))
    assert abs(float(x) - 111.19) < 0.01 and abs(float(y)) < 1e-9
    x, y = project(0.001, 0.0, EgoPose(0.0, 0.0, math.pi / 2))
    assert abs(float(y) + 111.19) < 0.01


def test_heading_bounds():
    EgoPose(0, 0, math.pi)
    with pytest.raises(ContractError):
        EgoPose(0, 0, -math.pi)


@settings(max_examples=50, deadline=None)
@given(st.floats(-170, 170), st.floats(-70, 70), st.floats(-3.14, 3.14),
       st.floats(-700, 700), st.floats(-700, 700))
def test_project_unproject_roundtrip(lon0, lat0, heading, x, y):
    ego = EgoPose(lon0, lat0, heading)
    lon, lat = unproject(x, y, ego)
    x2, y2 = project(lon, lat, ego)
    assert abs(float(x2) - x) < 1e-6 and abs(float(y2) - y) < 1e-6
    lon3, lat3 = unproject(x2, y2, ego)
    assert abs(float(lon3) - float(lon)) < 1e-9 and abs(float(lat3) - float(lat)) < 1e-9


# -- resampling ------------------------------------------------------------

def test_resample_straight_segment():
    out = resample_polyline([[0, 0], [9, 0]], 10)
    assert np.allclose(out, np.stack([np.arange(10.0), np.zeros(10)], 1), atol=1e-12)


def test_resample_l_shape():
    out = resample_polyline([[0, 0], [1, 0], [1, 1]], 3)
    assert np.allclose(out, [[0, 0], [1, 0], [1, 1]], atol=1e-12)


def test_resample_zero_length():
    out = resample_polyline([[2, 3], [2, 3], [2, 3]], 4)
    assert np.array_equal(out, np.tile([2.0, 3.0], (4, 1)))


def test_resample_needs_two_points():
    with pytest.raises(ContractError):
        resample_polyline([[0, 0]], 5)
    with pytest.raises(ContractError):
        resample_polyline([[0, 0], [1, 1]], 1)


def distance_to_polyline(p, xy):
    best = math.inf
    for a, b in zip(xy[:-1], xy[1:]):
        d = b - a
        t = 0.0 if not d.any() else min(1.0, max(0.0, float((p - a) @ d / (d @ d))))
        best = min(best, float(np.hypot(*(a + t * d - p))))
    return best


def arc_position(p, xy):
    """Arc-length coordinate of a point lying on the polyline."""
    cum = arc_lengths(xy)
    best, pos = math.inf, 0.0
    for i, (a, b) in enumerate(zip(xy[:-1], xy[1:])):
        d = b - a
        t = 0.0 if not d.any() else min(1.0, max(0.0, float((p - a) @ d / (d @ d))))
        dist = float(np.hypot(*(a + t * d - p)))
        if dist < best - 1e-12:
            best, pos = dist, cum[i] + t * (cum[i + 1] - cum[i])
    return pos


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 12))
def test_resample_lies_on_polyline_at_even_spacing(seed, n):
    xy = np.cumsum(np.random.default_rng(seed).normal(0, 5, (5, 2)), axis=0)
    out = resample_polyline(xy, n)
    total = arc_lengths(xy)[-1]
    assert np.array_equal(out[0], xy[0]) and np.array_equal(out[-1], xy[-1])
    for k, p in enumerate(out):
        assert distance_to_polyline(p, xy) < 1e-9
        assert abs(arc_position(p, xy) - k * total / (n - 1)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 12), st.integers(2, 30))
def test_resample_idempotent_on_straight_input(seed, n, p):
    rng = np.random.default_rng(seed)
    a, d = rng.normal(0, 10, 2), rng.normal(0, 10, 2)
    t = np.sort(np.concatenate([[0, 1], rng.random(n - 2)]))
    xy = a + t[:, None] * d
    once = resample_polyline(xy, p)
    assert np.allclose(resample_polyline(once, p), once, atol=1e-9, rtol=0)


# -- frame extraction --------------------------------------------------------

def test_valid_fixture_frame():
    els = parse_osm_xml(load("valid.osm"))
    frame = project_to_frame(els, ORIGIN, NEAR, 10)
    ids = [e.id for e in frame.elements]
    # untagged node 1 is only a way vertex; way 11 lies ~1.5 km away and takes its relation with it
    assert ids == ["n3", "w10", "r20"]
    frame.check(10)
    assert np.array_equal(frame.element_map()["w10"].xy[0], [0.0, 0.0])
    assert frame.element_map()["r20"].members == (("n3", "w10"),)
    assert frame.element_map()["w10"].xy.shape == (10, 2)


def test_way_crossing_edge_kept_whole():
    ego = ORIGIN
    lon_out, _ = unproject(50.0, 0.0, ego)
    lon_in, _ = unproject(10.0, 0.0, ego)
    doc = f"""<osm><node id="1" lat="0" lon="{float(lon_in)!r}"/><node id="2" lat="0" lon="{float(lon_out)!r}"/>
    <node id="3" lat="0.01" lon="0"/><node id="4" lat="0.011" lon="0"/>
    <way id="1"><nd ref="1"/><nd ref="2"/></way><way id="2"><nd ref="3"/><nd ref="4"/></way></osm>""".encode()
    frame = project_to_frame(parse_osm_xml(doc), ego, NEAR, 5)
    assert [e.id for e in frame.elements] == ["w1"]
    assert abs(frame.elements[0].xy[-1, 0] - 50.0) < 1e-6


def test_segment_passing_through_range_counts():
    assert polyline_intersects_range(np.array([[-100.0, 0.0], [100.0, 0.0]]), NEAR)
    assert not polyline_intersects_range(np.array([[-100.0, 20.0], [100.0, 20.0]]), NEAR)
    assert polyline_intersects_range(np.array([[-100.0, 15.0], [100.0, 15.0]]), NEAR)


def test_empty_frame_is_valid():
    frame = project_to_frame([], ORIGIN, FAR)
    assert frame.elements == []
    assert loads_frame(dumps_frame(frame)).elements == []


def test_frame_json_roundtrip_and_determinism(tmp_path):
    els = parse_osm_xml(load("valid.osm"))
    a = dumps_frame(project_to_frame(els, EgoPose(0.0001, 0.00005, 0.3), NEAR))
    b = dumps_frame(project_to_frame(parse_osm_xml(load("valid.osm")), EgoPose(0.0001, 0.00005, 0.3), NEAR))
    assert a == b
    assert dumps_frame(loads_frame(a)) == a
    write_frames(tmp_path / "f.jsonl", [loads_frame(a)] * 2)
    assert [dumps_frame(f) for f in read_frames(tmp_path / "f.jsonl")] == [a, a]


def test_frame_json_layout():
    frame = SdFrame("f", RangeSpec(60, 30), [
        FrameElement("n1", "point", (("highway", "stop"),), np.array([[1.23456789, -0.0000001]])),
        FrameElement("w1", "polyline", (), np.array([[0.0, 0.0], [1.0, 2.0]])),
        FrameElement("r1", "relation", (("type", "x"),), members=(("n1", "w1"),)),
    ])
    d = frame_to_dict(frame)
    assert d["range"] == [60, 30]
    assert d["elements"][0]["xy"] == [[1.234568, 0.0]]
    assert d["elements"][2] == {"id": "r1", "kind": "relation", "tags": [["type", "x"]], "members": [["n1", "w1"]]}


def test_frame_check_catches_open_relation():
    frame = SdFrame("f", NEAR, [FrameElement("r1", "relation", (), members=(("n1", "n2"),))])
    with pytest.raises(ContractError):
        frame.check()
