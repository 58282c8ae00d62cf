"""Desk-scale experiment protocols shared by the acceptance tests and the demos.

Each function builds its own data from seeds, so a result is reproducible
from the arguments alone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .corpus import RelevanceConfig, build_corpus
from .metrics import CLASSES
from .sd_encoder import SdEncoderConfig
from .synthetic import tag_groups
from .text_encoder import TextEncoderConfig, pretrain, retrieval_accuracy
from .toy import SceneSpec, ToyDecoderConfig, TrainConfig, generate_dataset, train_toy


def separability(seed, rel_tag_cl=True, groups=200, variants=5, epochs=4, batch_size=256, pairs_per_tagset=20,
                 config=None):
    """Top-1 retrieval of a held-out noisy variant's relevant twin.

    ``groups`` relevant tag sets get ``variants`` noisy versions each; all but
    the last variant go into the pretraining corpus, the last one is the query
    and the gallery is the bare relevant tag sets.
    """
    rel = RelevanceConfig.default()
    data = tag_groups(groups, variants, seed=100 + seed)
    corpus = build_corpus([v for _, vs in data for v in vs[:-1]], rel)
    encoder, log = pretrain(corpus, rel, config, epochs=epochs, batch_size=batch_size,
                            pairs_per_tagset=pairs_per_tagset, rel_tag_cl=rel_tag_cl, seed=seed)
    labels = list(range(groups))
    acc = retrieval_accuracy(encoder, [vs[-1] for _, vs in data], [r for r, _ in data], labels, labels)
    return acc, log


@dataclass
class ToyRun:
    mode: str
    seed: int
    ap: dict
    mAP: float
    seconds: float
    rows: list = field(default_factory=list)


# widths used for the tag-utility benchmark; the text encoder keeps its defaults
TOY_SD = SdEncoderConfig(d_model=64, d_ff=128, heads=4)
TOY_DECODER = ToyDecoderConfig(d_model=64, heads=4)


def toy_data(seed, n_train=2000, n_eval=500, spec=None):
    spec = spec or SceneSpec()
    return generate_dataset(spec, n_train, 10 * seed + 1), generate_dataset(spec, n_eval, 10 * seed + 2)


def toy_text_encoder(train_scenes, seed, extra_groups=100, epochs=2, batch_size=128, pairs_per_tagset=5):
    """Contrastively pretrain a text encoder on the training frames' tags plus synthetic OSM-like groups."""
    rel = RelevanceConfig.default()
    items = [s.frame for s in train_scenes] + [v for _, vs in tag_groups(extra_groups, 4, seed) for v in vs]
    encoder, _ = pretrain(build_corpus(items, rel), rel, TextEncoderConfig(), epochs=epochs,
                          batch_size=batch_size, pairs_per_tagset=pairs_per_tagset, seed=seed)
    return encoder


def tag_utility(seed, modes=("no-tags", "with-tags", "frozen-nlp"), epochs=30, n_train=2000, n_eval=500,
                sd_config=TOY_SD, dec_config=TOY_DECODER, progress=None):
    """Train one toy model per mode on the same data and pretrained encoder; returns ``{mode: ToyRun}``."""
    train, held = toy_data(seed, n_train, n_eval)
    encoder = toy_text_encoder(train, seed) if any(m != "no-tags" for m in modes) else None
    out = {}
    for mode in modes:
        t0 = time.perf_counter()
        _, log = train_toy(train, held, mode, encoder, sd_config, dec_config,
                           TrainConfig(epochs=epochs, eval_every=0), seed)
        last = log.rows[-1]
        out[mode] = ToyRun(mode, seed, {c: last[f"AP_{c}"] for c in CLASSES}, last["mAP"],
                           time.perf_counter() - t0, log.rows)
        if progress:
            progress(out[mode])
    return out


def mean_over(runs, mode, key=None):
    """Mean final mAP (or class AP when ``key`` is a class) of ``mode`` over a list of per-seed results."""
    vals = [r[mode].mAP if key is None else r[mode].ap[key] for r in runs]
    return float(np.mean(vals))
