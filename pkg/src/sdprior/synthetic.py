"""Synthetic OSM-like tag sets for pretraining experiments."""

import numpy as np

from .osm import make_tagset

RELEVANT_VALUES = {
    "lanes": ["1", "2", "3", "4", "5"],
    "oneway": ["yes", "no", "-1"],
    "maxspeed": ["20", "30", "40", "50", "60", "70", "80", "100", "120"],
    "surface": ["asphalt", "concrete", "paving_stones", "gravel", "unpaved", "cobblestone", "sett"],
    "lit": ["yes", "no"],
    "sidewalk": ["both", "left", "right", "no", "separate"],
    "cycleway": ["lane", "track", "no", "shared_lane", "opposite"],
    "bridge": ["yes", "viaduct"],
    "tunnel": ["yes", "culvert"],
    "layer": ["-1", "1", "2"],
    "smoothness": ["good", "intermediate", "bad", "excellent"],
    "access": ["private", "destination", "permissive", "no"],
    "junction": ["roundabout", "circular"],
    "turn:lanes": ["left|through", "through|right", "left|through|right", "left;through|through"],
}
HIGHWAYS = ["motorway", "trunk", "primary", "secondary", "tertiary", "residential", "service",
            "unclassified", "living_street", "motorway_link", "trunk_link", "primary_link"]

_NAME_A = ["park", "oak", "maple", "main", "river", "hill", "lake", "cedar", "pine", "elm", "church",
           "mill", "station", "market", "king", "queen", "bridge", "spring", "north", "south"]
_NAME_B = ["avenue", "street", "road", "lane", "drive", "boulevard", "way", "court", "place", "terrace"]
_COUNTIES = ["adams", "baker", "clark", "dane", "essex", "franklin", "grant", "hudson", "jackson", "kent"]
_STATES = ["ca", "ny", "tx", "wa", "or", "il", "oh", "pa"]


def random_relevant_tagset(rng, extra=(2, 4)):
    tags = {"highway": HIGHWAYS[rng.integers(len(HIGHWAYS))]}
    keys = sorted(RELEVANT_VALUES)
    n = rng.integers(extra[0], extra[1] + 1)
    for i in rng.choice(len(keys), size=n, replace=False):
        vals = RELEVANT_VALUES[keys[i]]
        tags[keys[i]] = vals[rng.integers(len(vals))]
    return make_tagset(tags)


def random_irrelevant_tags(rng):
    """Name, TIGER import and source tags with random values."""
    tags = {}
    if rng.random() < 0.9:
        tags["name"] = f"{_NAME_A[rng.integers(len(_NAME_A))]} {_NAME_B[rng.integers(len(_NAME_B))]}"
    if rng.random() < 0.6:
        tags["tiger:cfcc"] = f"A{rng.integers(10, 80)}"
        tags["tiger:county"] = f"{_COUNTIES[rng.integers(len(_COUNTIES))]}, {_STATES[rng.integers(len(_STATES))]}"
        if rng.random() < 0.7:
            tags["tiger:tlid"] = str(rng.integers(10_000_000, 99_999_999))
    if rng.random() < 0.3:
        tags["source"] = ["bing", "survey", "tiger_import", "gps"][rng.integers(4)]
    if rng.random() < 0.2:
        tags["old_name"] = f"{_NAME_A[rng.integers(len(_NAME_A))]} {_NAME_B[rng.integers(len(_NAME_B))]}"
    return tags


def tag_groups(n_groups, variants, seed=0):
    """``n_groups`` distinct relevant tag sets, each with ``variants`` distinct noisy versions.

    Returns a list of ``(relevant, [variant, ...])``.
    """
    rng = np.random.default_rng(seed)
    seen = set()
    groups = []
    while len(groups) < n_groups:
        rel = random_relevant_tagset(rng)
        if rel in seen:
            continue
        seen.add(rel)
        out, vseen = [], set()
        while len(out) < variants:
            v = make_tagset({**dict(rel), **random_irrelevant_tags(rng)})
            if v not in vseen:
                vseen.add(v)
                out.append(v)
        groups.append((rel, out))
    return groups
