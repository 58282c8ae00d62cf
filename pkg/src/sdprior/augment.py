"""SD-prior augmentation: rigid position noise, element dropping and tag masking.

All transforms return new frames and leave the input untouched.  Random
draws depend only on the seed and the frame content in element order, so a
frame and its JSON round trip augment identically.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .corpus import RelevanceConfig
from .errors import ContractError
from .osm import SdFrame


@dataclass
class AugmentConfig:
    drop_rate: float = 0.0
    locally_constant: bool = True
    sigma_trans: float = 0.0  # metres, per axis
    sigma_rot: float = 0.0  # degrees
    tag_element_rate: float = 0.0
    tag_drop_rate: float = 0.0
    non_relevant_only: bool = True

    def __post_init__(self):
        for name in ("drop_rate", "tag_element_rate", "tag_drop_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        for name in ("sigma_trans", "sigma_rot"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")

    def to_dict(self):
        return asdict(self)


def _copy(frame, elements):
    return SdFrame(frame.id, frame.range, elements)


def _rigid(xy, theta, t):
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return xy @ rot.T + t


def position_noise(frame, cfg, seed=0):
    """Rotate about the ego origin then translate; one draw per frame or per element."""
    rng = np.random.default_rng(seed)
    sigma_rot = math.radians(cfg.sigma_rot)

    def draw():
        t = rng.normal(0.0, 1.0, 2) * cfg.sigma_trans
        theta = rng.normal() * sigma_rot
        return theta, t

    shared = draw() if cfg.locally_constant else None
    out = []
    for e in frame.elements:
        if e.kind == "relation":
            out.append(replace(e))
            continue
        theta, t = shared if shared is not None else draw()
        out.append(replace(e, xy=_rigid(e.xy, theta, t)))
    return _copy(frame, out)


def element_drop(frame, rate, seed=0):
    """Drop each point/polyline with probability ``rate`` and any relation left with a missing member."""
    if not 0.0 <= rate <= 1.0:
        raise ContractError(f"drop rate must lie in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    dropped = set()
    for e in frame.elements:
        if e.kind != "relation" and rng.random() < rate:
            dropped.add(e.id)
    out = []
    for e in frame.elements:
        if e.id in dropped:
            continue
        if e.kind == "relation" and any(a in dropped or b in dropped for a, b in e.members):
            continue
        out.append(replace(e))
    return _copy(frame, out)


def tag_mask(frame, cfg, relevance=None, seed=0):
    """Drop tags from a random subset of elements; optionally only non-relevant tags are eligible."""
    relevance = relevance or RelevanceConfig.default()
    rng = np.random.default_rng(seed)
    out = []
    for e in frame.elements:
        if rng.random() >= cfg.tag_element_rate:
            out.append(replace(e))
            continue
        kept = []
        for k, v in e.tags:
            eligible = relevance.is_irrelevant(k) or not cfg.non_relevant_only
            # draw for every tag so the stream does not depend on eligibility
            u = rng.random()
            if eligible and u < cfg.tag_drop_rate:
                continue
            kept.append((k, v))
        out.append(replace(e, tags=tuple(kept)))
    return _copy(frame, out)


def augment(frame, cfg, relevance=None, seed=0):
    """Element drop, then position noise, then tag masking, each on its own seed stream."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_drop, s_noise, s_mask = root.spawn(3)
    f = element_drop(frame, cfg.drop_rate, s_drop)
    f = position_noise(f, cfg, s_noise)
    return tag_mask(f, cfg, relevance, s_mask)
