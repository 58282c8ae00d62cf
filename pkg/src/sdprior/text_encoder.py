"""Tag-set text encoder: word-level tokenizer, small pre-norm transformer, MNR loss."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from . import tensor as T
from .corpus import make_batches, sample_positive_pairs
from .errors import ContractError

PAD, UNK, CLS, SEP = 0, 1, 2, 3
RESERVED = ("[PAD]", "[UNK]", "[CLS]", "[SEP]")

_WORD = re.compile(r"[^\W_]+")


def words(text):
    """Lowercase and split on whitespace and punctuation (``:``, ``=``, ``_``, ``-`` ...)."""
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ContractError("vocabulary must start with the reserved tokens")
        self.tokens = tokens
        self.ids = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token):
        return self.ids.get(token, UNK)


def build_vocab(tagsets, max_size=1000):
    """Most frequent words first, ties broken lexicographically."""
    tagsets = list(tagsets)
    if not tagsets:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for tags in tagsets:
        for k, v in tags:
            counts.update(words(k))
            counts.update(words(v))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(list(RESERVED) + [w for w, _ in ranked[: max(0, max_size - len(RESERVED))]])


def tokenize_tagset(tags, vocab, max_len=64):
    """``[CLS] key value [SEP] key value [SEP] ...`` in key order, truncated to ``max_len``."""
    ids = [CLS]
    for k, v in sorted(tags):
        ids.extend(vocab.id(w) for w in words(k))
        ids.extend(vocab.id(w) for w in words(v))
        ids.append(SEP)
    return ids[:max_len]


def pad_sequences(seqs):
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


@dataclass
class TextEncoderConfig:
    layers: int = 2
    heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_len: int = 64
    embed_dim: int = 144
    dropout: float = 0.1
    scale: float = 20.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ContractError("d_model must be divisible by heads")
        if self.embed_dim <= 0:
            raise ContractError("embed_dim must be positive")


class TextEncoder:
    """Maps token id sequences to unit-norm ``embed_dim`` vectors taken at ``[CLS]``."""

    def __init__(self, config, vocab, seed=0):
        self.config = config
        self.vocab = vocab
        c = config
        rng = np.random.default_rng(seed)
        p = {}
        p["tok"] = T.parameter(rng.normal(0.0, 1.0, (len(vocab), c.d_model)))
        p["pos"] = T.parameter(rng.normal(0.0, 0.1, (c.max_len, c.d_model)))
        layers.init_layer_norm(p, "ln_emb", c.d_model)
        for i in range(c.layers):
            layers.init_encoder_layer(rng, p, f"layer{i}", c.d_model, c.d_ff)
        layers.init_layer_norm(p, "ln_out", c.d_model)
        layers.init_linear(rng, p, "proj", c.d_model, c.embed_dim)
        self.params = p

    def forward(self, ids, rng=None):
        """``ids`` is an int array (batch, seq) padded with ``PAD``; returns a (batch, embed_dim) tensor."""
        c, p = self.config, self.params
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise ContractError("ids must be a 2-d (batch, seq) array")
        if ids.shape[1] > c.max_len:
            raise ContractError(f"sequence length {ids.shape[1]} exceeds max_len {c.max_len}")
        rate = c.dropout if rng is not None else 0.0
        x = T.embedding(p["tok"], ids) + p["pos"][: ids.shape[1]]
        x = layers.layer_norm(x, p, "ln_emb")
        x = T.dropout(x, T.dropout_mask(rng, x.shape, rate))
        bias = layers.key_bias(ids != PAD)
        for i in range(c.layers):
            x = layers.encoder_layer(x, p, f"layer{i}", c.heads, bias, rng, rate)
        x = layers.layer_norm(x, p, "ln_out")
        return T.l2_normalize(layers.linear(x[:, 0, :], p, "proj"), axis=-1)

    __call__ = forward

    def encode_ids(self, seq):
        """Embedding of one id sequence, dropout off."""
        if len(seq) > self.config.max_len:
            raise ContractError(f"sequence length {len(seq)} exceeds max_len {self.config.max_len}")
        with T.no_grad():
            return self.forward(np.asarray([seq], dtype=np.int64)).data[0]

    def embed_tagsets(self, tagsets, rng=None, chunk=512):
        """Tensor of embeddings for a list of tag sets (graph recorded if grad is on)."""
        seqs = [tokenize_tagset(t, self.vocab, self.config.max_len) for t in tagsets]
        if len(seqs) <= chunk:
            return self.forward(pad_sequences(seqs), rng)
        return T.concat([self.forward(pad_sequences(seqs[i:i + chunk]), rng)
                         for i in range(0, len(seqs), chunk)], axis=0)

    def embed_numpy(self, tagsets):
        with T.no_grad():
            return self.embed_tagsets(list(tagsets)).data

    def metadata(self):
        return {"config": asdict(self.config), "vocab": self.vocab.tokens}

    @classmethod
    def from_metadata(cls, meta):
        return cls(TextEncoderConfig(**meta["config"]), Vocabulary(meta["vocab"]))


def encode_tagset(encoder, seq):
    return encoder.encode_ids(seq)


def mnr_loss(anchors, positives, scale=20.0, tol=1e-6):
    """Multiple negatives ranking loss over unit-norm (B, d) anchor/positive tensors."""
    anchors, positives = T._as_tensor(anchors), T._as_tensor(positives)
    if anchors.shape != positives.shape or anchors.ndim != 2:
        raise T.ShapeError("mnr_loss", anchors.shape, positives.shape)
    for name, x in (("anchor", anchors), ("positive", positives)):
        norms = np.linalg.norm(x.data, axis=1)
        if np.any(np.abs(norms - 1.0) > tol):
            raise ContractError(f"{name} embeddings are not unit-norm")
    b = anchors.shape[0]
    scores = (anchors @ positives.transpose(1, 0)) * scale
    return T.cross_entropy(scores, np.arange(b)) * (1.0 / b)


@dataclass
class PretrainLog:
    epoch: list
    loss: list

    def epoch_means(self):
        ep = np.asarray(self.epoch)
        ls = np.asarray(self.loss)
        return [float(ls[ep == e].mean()) for e in sorted(set(self.epoch))]


def pretrain(corpus, relevance, config=None, vocab=None, epochs=4, batch_size=256, lr=1e-3,
             pairs_per_tagset=20, rel_tag_cl=True, seed=0, vocab_size=2000, encoder=None):
    """Contrastive pretraining with in-batch negatives; returns ``(encoder, log)``."""
    config = config or TextEncoderConfig()
    if encoder is None:
        vocab = vocab or build_vocab(corpus.tagsets, vocab_size)
        encoder = TextEncoder(config, vocab, seed)
    pairs = sample_positive_pairs(corpus, relevance, pairs_per_tagset, rel_tag_cl, seed)
    opt = T.Adam(encoder.params, lr=lr)
    drop_rng = np.random.default_rng(seed + 1)
    log = PretrainLog([], [])
    for epoch in range(epochs):
        for batch in make_batches(pairs, batch_size, seed + 1000 * (epoch + 1)):
            emb = encoder.embed_tagsets(batch.anchors + batch.positives, drop_rng)
            b = batch.size
            loss = mnr_loss(emb[:b], emb[b:], config.scale)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.epoch.append(epoch)
            log.loss.append(loss.item())
    return encoder, log


def retrieval_accuracy(encoder, queries, gallery, query_labels, gallery_labels):
    """Top-1 nearest-neighbour (cosine) accuracy of queries against a labelled gallery."""
    q = encoder.embed_numpy(queries)
    g = encoder.embed_numpy(gallery)
    nn = np.argmax(q @ g.T, axis=1)
    return float(np.mean(np.asarray(gallery_labels)[nn] == np.asarray(query_labels)))


def save_metadata(path, encoder):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(encoder.metadata(), fh, sort_keys=True, indent=1)


def load_metadata(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
