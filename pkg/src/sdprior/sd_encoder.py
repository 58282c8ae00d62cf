"""Point-level SD map tokens with orthogonal random element identifiers.

Every point element yields one token, every polyline one token per resampled
point, and every relation one token per member pair.  A raw token is the
concatenation ``[sin/cos position | tag embedding | identifier pair]``:
points and polyline points carry their element's identifier twice, relation
tokens carry the identifiers of the two members.  Identifiers are rows of the
Q factor of a Gaussian matrix, so distinct elements get exactly orthogonal
identifiers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from . import tensor as T
from .errors import CapacityError, ContractError


@dataclass
class OrfTable:
    d_orf: int
    ids: list
    rows: np.ndarray
    fallback: bool = False  # True when rows are only approximately orthogonal

    def row(self, element_id):
        return self.rows[self._index[element_id]]

    def __post_init__(self):
        self._index = {e: i for i, e in enumerate(self.ids)}

    def __contains__(self, element_id):
        return element_id in self._index

    def swapped(self, a, b):
        rows = self.rows.copy()
        i, j = self._index[a], self._index[b]
        rows[[i, j]] = rows[[j, i]]
        return OrfTable(self.d_orf, list(self.ids), rows, self.fallback)


def _positive_first_entry(rows):
    out = rows.copy()
    for r in out:
        nz = np.flatnonzero(r)
        if nz.size and r[nz[0]] < 0:
            r *= -1.0
    return out


def generate_orf(element_ids, d_orf=64, seed=0, allow_fallback=False):
    """Identifier rows for ``element_ids`` (assigned in ascending id order)."""
    ids = sorted(set(element_ids))
    n = len(ids)
    if n < 1:
        raise ContractError("generate_orf needs at least one element")
    rng = np.random.default_rng(seed)
    if n > d_orf:
        if not allow_fallback:
            raise CapacityError(f"{n} elements exceed identifier dimension {d_orf}")
        g = rng.standard_normal((n, d_orf))
        rows = g / np.linalg.norm(g, axis=1, keepdims=True)
        return OrfTable(d_orf, ids, _positive_first_entry(rows), fallback=True)
    q, _ = np.linalg.qr(rng.standard_normal((d_orf, d_orf)))
    return OrfTable(d_orf, ids, _positive_first_entry(q[:n]))


def posenc(x, y, d_pos, area):
    """Fixed sin/cos encoding of ego-frame coordinates normalised by the range half-extents.

    Frequencies ``pi * 10000**(4k/d_pos)`` for ``k < d_pos/4``; output order per
    frequency is ``sin(u), cos(u), sin(v), cos(v)``.  Accepts scalars or arrays
    and returns ``(..., d_pos)``.
    """
    if d_pos % 4:
        raise ContractError("d_pos must be divisible by 4")
    hx, hy = area.half_extents
    u = np.asarray(x, dtype=np.float64)[..., None] / hx
    v = np.asarray(y, dtype=np.float64)[..., None] / hy
    freq = np.pi * 10000.0 ** (4.0 * np.arange(d_pos // 4) / d_pos)
    out = np.stack([np.sin(u * freq), np.cos(u * freq), np.sin(v * freq), np.cos(v * freq)], axis=-1)
    return out.reshape(*out.shape[:-2], d_pos)


@dataclass
class SdEncoderConfig:
    d_model: int = 128
    layers: int = 2
    heads: int = 8
    dropout: float = 0.1
    d_orf: int = 64
    d_pos: int = 32
    tag_dim: int = 144
    d_ff: int = 256
    orf_fallback: bool = False

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ContractError("heads must divide d_model")
        if self.d_pos % 4:
            raise ContractError("d_pos must be divisible by 4")

    @property
    def raw_dim(self):
        return self.d_pos + self.tag_dim + 2 * self.d_orf


@dataclass
class TokenSequence:
    """Raw tokens of one frame before the learned input projection."""
    pos: np.ndarray  # (N, d_pos)
    ident: np.ndarray  # (N, 2*d_orf)
    tag_rows: np.ndarray  # (N,) index into ``tagsets``
    tagsets: list  # one tag set per element that owns tokens
    owners: list = field(default_factory=list)
    kinds: list = field(default_factory=list)
    point_index: list = field(default_factory=list)

    def __len__(self):
        return len(self.tag_rows)

    def raw(self, tag_matrix):
        """Concatenated ``(N, raw_dim)`` array given a ``(len(tagsets), tag_dim)`` matrix."""
        tags = np.asarray(tag_matrix)[self.tag_rows] if len(self.tagsets) else np.zeros((len(self), 0))
        return np.concatenate([self.pos, tags, self.ident], axis=1)


def geometric_ids(frame):
    return [e.id for e in frame.elements if e.kind in ("point", "polyline")]


def assemble_tokens(frame, orf, config):
    """Token layout for a frame; tag embeddings are attached later by row index."""
    pos, ident, rows, owners, kinds, pidx, tagsets = [], [], [], [], [], [], []
    zero_pos = np.zeros(config.d_pos)
    for e in frame.elements:
        if e.kind == "relation":
            for a, b in e.members:
                for m in (a, b):
                    if m not in orf:
                        raise ContractError(f"relation {e.id} member {m} has no identifier")
            continue
        if e.id not in orf:
            raise ContractError(f"element {e.id} has no identifier")
    for e in frame.elements:
        row = len(tagsets)
        tagsets.append(e.tags)
        if e.kind == "relation":
            for a, b in e.members:
                pos.append(zero_pos)
                ident.append(np.concatenate([orf.row(a), orf.row(b)]))
                rows.append(row)
                owners.append(e.id)
                kinds.append("relation")
                pidx.append(-1)
            continue
        r = orf.row(e.id)
        enc = posenc(e.xy[:, 0], e.xy[:, 1], config.d_pos, frame.range)
        kind = "point" if e.kind == "point" else "polyline-point"
        for i in range(len(e.xy)):
            pos.append(enc[i])
            ident.append(np.concatenate([r, r]))
            rows.append(row)
            owners.append(e.id)
            kinds.append(kind)
            pidx.append(i)
    n = len(rows)
    return TokenSequence(
        pos=np.array(pos).reshape(n, config.d_pos),
        ident=np.array(ident).reshape(n, 2 * orf.d_orf),
        tag_rows=np.asarray(rows, dtype=np.int64),
        tagsets=tagsets, owners=owners, kinds=kinds, point_index=pidx,
    )


def frame_tokens(frame, config, seed=0):
    """ORF table plus assembled tokens for a frame."""
    ids = geometric_ids(frame)
    orf = generate_orf(ids or ["_"], config.d_orf, seed, config.orf_fallback)
    return assemble_tokens(frame, orf, config), orf


class SdEncoder:
    def __init__(self, config, seed=0):
        self.config = config
        c = config
        rng = np.random.default_rng(seed)
        p = {}
        layers.init_linear(rng, p, "in", c.raw_dim, c.d_model)
        for i in range(c.layers):
            layers.init_encoder_layer(rng, p, f"layer{i}", c.d_model, c.d_ff)
        layers.init_layer_norm(p, "ln_out", c.d_model)
        self.params = p

    def forward(self, raw, valid=None, rng=None):
        """``raw`` is a (B, N, raw_dim) tensor, ``valid`` a (B, N) bool mask of real tokens."""
        c, p = self.config, self.params
        raw = T._as_tensor(raw)
        if raw.ndim != 3 or raw.shape[-1] != c.raw_dim:
            raise T.ShapeError("sd_encoder", raw.shape, (None, None, c.raw_dim))
        if raw.shape[1] < 1:
            raise ContractError("encode_sd needs at least one token")
        rate = c.dropout if rng is not None else 0.0
        x = layers.linear(raw, p, "in")
        bias = layers.key_bias(valid)
        for i in range(c.layers):
            x = layers.encoder_layer(x, p, f"layer{i}", c.heads, bias, rng, rate)
        return layers.layer_norm(x, p, "ln_out")

    __call__ = forward


def batch_raw(sequences, tag_tensors, config):
    """Pad a list of token sequences into a (B, N, raw_dim) tensor and a validity mask.

    ``tag_tensors[i]`` is a (len(tagsets_i), tag_dim) tensor (or array, or
    ``None`` for zero tag segments).
    """
    b = len(sequences)
    n = max(len(s) for s in sequences)
    valid = np.zeros((b, n), dtype=bool)
    pos = np.zeros((b, n, config.d_pos))
    ident = np.zeros((b, n, 2 * config.d_orf))
    tag_parts = []
    for i, s in enumerate(sequences):
        k = len(s)
        valid[i, :k] = True
        pos[i, :k] = s.pos
        ident[i, :k] = s.ident
        tt = tag_tensors[i] if tag_tensors is not None else None
        if tt is None:
            tag_parts.append(T.Tensor(np.zeros((n, config.tag_dim))))
            continue
        tt = T._as_tensor(tt)
        rows = tt[s.tag_rows]
        if k < n:
            rows = T.concat([rows, T.Tensor(np.zeros((n - k, config.tag_dim)))], axis=0)
        tag_parts.append(rows)
    tags = T.concat([t.reshape(1, n, config.tag_dim) for t in tag_parts], axis=0)
    return T.concat([T.Tensor(pos), tags, T.Tensor(ident)], axis=-1), valid


def encode_sd(tokens, encoder, tag_matrix=None, rng=None):
    """Encode a single frame's tokens; returns an (N, d_model) array-backed tensor."""
    raw, valid = batch_raw([tokens], [tag_matrix], encoder.config)
    return encoder(raw, valid, rng)[0]
