"""Contrastive pretraining corpus of OSM tag sets.

Tag sets are grouped by their *relevant subset*: the tags left after removing
names, contact details and import artefacts.  Positive pairs come from the
same group; the packing in :func:`make_batches` guarantees that every other
pair in a batch belongs to a different group, so in-batch negatives really
are negatives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import NamedTuple

import numpy as np

from .errors import ContractError
from .osm import make_tagset


@dataclass(frozen=True)
class RelevanceConfig:
    exact: frozenset = frozenset()
    prefixes: tuple = ()

    def is_irrelevant(self, key):
        return key in self.exact or any(key.startswith(p) for p in self.prefixes)

    @classmethod
    def from_lines(cls, lines):
        exact, prefixes = set(), []
        for raw in lines:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.endswith("*"):
                prefixes.append(line[:-1])
            else:
                exact.add(line)
        return cls(frozenset(exact), tuple(sorted(set(prefixes))))

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_lines(fh)

    @classmethod
    def default(cls):
        text = resources.files("sdprior").joinpath("data/irrelevant_tags.txt").read_text("utf-8")
        return cls.from_lines(text.splitlines())

    def dumps(self):
        return "".join(f"{k}\n" for k in sorted(self.exact)) + "".join(f"{p}*\n" for p in self.prefixes)


def relevant_subset(tags, cfg):
    return make_tagset((k, v) for k, v in tags if not cfg.is_irrelevant(k))


def group_key(tags):
    """Canonical string for a tag set, used as a dictionary key."""
    return json.dumps([list(kv) for kv in make_tagset(tags)], separators=(",", ":"), ensure_ascii=False)


@dataclass
class TagsetCorpus:
    tagsets: list = field(default_factory=list)
    index: dict = field(default_factory=dict)  # group key -> corpus indices

    def __len__(self):
        return len(self.tagsets)

    def bucket_sizes(self):
        return {k: len(v) for k, v in self.index.items()}


def _iter_tagsets(items):
    for item in items:
        if hasattr(item, "elements"):
            for e in item.elements:
                yield e.tags
        elif hasattr(item, "tags"):
            yield item.tags
        else:
            yield item


def build_corpus(items, cfg):
    """Unique non-empty tag sets from frames, elements or raw tag sets, in first-seen order."""
    seen = set()
    corpus = TagsetCorpus()
    for tags in _iter_tagsets(items):
        tags = make_tagset(tags)
        if not tags or tags in seen:
            continue
        seen.add(tags)
        corpus.index.setdefault(group_key(relevant_subset(tags, cfg)), []).append(len(corpus.tagsets))
        corpus.tagsets.append(tags)
    return corpus


class Pair(NamedTuple):
    anchor: tuple
    positive: tuple
    group: str


def sample_positive_pairs(corpus, cfg, pairs_per_tagset=20, rel_tag_cl=True, seed=0):
    """Draw ``pairs_per_tagset`` positive pairs for every relevant-subset group.

    With ``rel_tag_cl`` the anchor and positive are drawn with replacement
    from the group.  Without it, irrelevant tags are stripped and each pair is
    the stripped tag set twice.
    """
    if len(corpus) == 0:
        raise ContractError("empty corpus")
    rng = np.random.default_rng(seed)
    pairs = []
    for key in sorted(corpus.index):
        members = corpus.index[key]
        if rel_tag_cl:
            a = rng.integers(0, len(members), pairs_per_tagset)
            p = rng.integers(0, len(members), pairs_per_tagset)
            pairs.extend(Pair(corpus.tagsets[members[i]], corpus.tagsets[members[j]], key) for i, j in zip(a, p))
        else:
            stripped = relevant_subset(corpus.tagsets[members[0]], cfg)
            pairs.extend(Pair(stripped, stripped, key) for _ in range(pairs_per_tagset))
    return pairs


@dataclass
class ContrastiveBatch:
    anchors: list
    positives: list
    groups: list

    @property
    def size(self):
        return len(self.anchors)


def make_batches(pairs, batch_size, seed=0):
    """Shuffle, then pack pairs so that no batch holds two pairs of one group.

    Each pair goes to the earliest non-full batch after the last batch that
    already holds its group.  Batches with fewer than two pairs are dropped.
    """
    if batch_size < 2:
        raise ContractError("batch size must be >= 2")
    if len({p.group for p in pairs}) < 2:
        raise ContractError("contrastive batches need at least 2 distinct relevant subsets")
    order = np.random.default_rng(seed).permutation(len(pairs))
    batches = []
    last = {}
    first_open = 0
    for i in order:
        pair = pairs[i]
        j = max(first_open, last.get(pair.group, -1) + 1)
        while j < len(batches) and len(batches[j]) >= batch_size:
            j += 1
        if j == len(batches):
            batches.append([])
        batches[j].append(pair)
        last[pair.group] = j
        while first_open < len(batches) and len(batches[first_open]) >= batch_size:
            first_open += 1
    return [ContrastiveBatch([p.anchor for p in b], [p.positive for p in b], [p.group for p in b])
            for b in batches if len(b) >= 2]


def batch_is_valid(batch, cfg=None):
    """Brute-force check of the positive/negative invariants of a batch."""
    if cfg is not None:
        rel_a = [relevant_subset(t, cfg) for t in batch.anchors]
        rel_p = [relevant_subset(t, cfg) for t in batch.positives]
    else:
        rel_a = rel_p = batch.groups
    n = batch.size
    for i in range(n):
        for j in range(n):
            same = rel_a[i] == rel_p[j]
            if (i == j) != same:
                return False
    return True


def write_corpus(path, corpus):
    with open(path, "w", encoding="utf-8") as fh:
        for tags in corpus.tagsets:
            fh.write(json.dumps([list(kv) for kv in tags], ensure_ascii=False) + "\n")


def read_tagsets(path):
    with open(path, encoding="utf-8") as fh:
        return [make_tagset(tuple(kv) for kv in json.loads(line)) for line in fh if line.strip()]
