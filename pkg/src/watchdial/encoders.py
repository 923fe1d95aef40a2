"""Token and video-feature encoders.

Text goes embedding lookup -> sinusoidal positional encoding -> layer norm.
Video features arrive as three synthetic streams (object-level with box
coordinates, frame-level, audio-like) and are projected to the shared model
dimension with linear+ReLU maps.
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError
from .programs import KEYWORDS
from .tensor import Tensor, add, concat, dropout, embedding, layer_norm, matmul, relu, reshape

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
RESERVED = (PAD, SOS, EOS, UNK) + KEYWORDS


def tokenize(text):
    """Lowercase whitespace tokenizer; module keywords keep their exact form."""
    return [t if t in KEYWORDS else t.lower() for t in text.split()]


class Vocab:
    """Bidirectional token/index map with a fixed reserved prefix."""

    def __init__(self, tokens=()):
        self._tokens = list(RESERVED)
        seen = set(self._tokens)
        for tok in sorted(set(tokens)):
            if tok not in seen:
                self._tokens.append(tok)
                seen.add(tok)
        self._index = {t: i for i, t in enumerate(self._tokens)}
        self.pad = self._index[PAD]
        self.sos = self._index[SOS]
        self.eos = self._index[EOS]
        self.unk = self._index[UNK]

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._index

    def encode(self, tokens):
        unk = self.unk
        return [self._index.get(t, unk) for t in tokens]

    def decode(self, ids):
        return [self._tokens[i] for i in ids]

    def keyword_ids(self):
        return [self._index[k] for k in KEYWORDS]

    def to_text(self):
        return "".join(f"{i}\t{t}\n" for i, t in enumerate(self._tokens))

    @classmethod
    def from_text(cls, text):
        tokens = []
        for line in text.splitlines():
            if not line:
                continue
            idx, _, tok = line.partition("\t")
            if not _:
                raise DataError(f"malformed vocab line {line!r}")
            if int(idx) != len(tokens):
                raise DataError(f"non-dense vocab index {idx}")
            tokens.append(tok)
        if tokens[: len(RESERVED)] != list(RESERVED):
            raise DataError("vocab reserved prefix is missing or reordered")
        return cls(tokens[len(RESERVED) :])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


@dataclass
class VideoFeatures:
    """Three synthetic feature streams plus normalized box coordinates."""

    obj: np.ndarray  # (F, O, d_vis)
    obj_coords: np.ndarray  # (F, O, 4), each coordinate in [0, 1]
    cnn: np.ndarray  # (F, d_vis)
    aud: np.ndarray  # (F, d_aud)

    def __post_init__(self):
        f, o, _ = self.obj.shape
        if f < 1 or o < 1:
            raise DataError(f"video needs at least one frame and object, got F={f}, O={o}")
        if self.obj_coords.shape != (f, o, 4):
            raise DataError(f"coordinate block shape {self.obj_coords.shape} != {(f, o, 4)}")
        if self.obj_coords.min() < 0.0 or self.obj_coords.max() > 1.0:
            raise DataError("box coordinates must lie in [0, 1]")
        if self.cnn.shape[0] != f or self.aud.shape[0] != f:
            raise DataError("frame counts of the three streams disagree")


class EncodedText(NamedTuple):
    reps: Tensor  # (L, d)
    token_ids: tuple


@lru_cache(maxsize=None)
def _pe_table(length, dim, dtype_name):
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.empty((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table = table.astype(np.dtype(dtype_name))
    table.setflags(write=False)
    return table


def positional_encoding(length, dim, dtype=np.float64):
    """Sinusoidal position table, (length, dim); parameter-free and cached."""
    if dim % 2 != 0:
        raise ConfigError(f"positional encoding needs an even dimension, got {dim}")
    return _pe_table(length, dim, np.dtype(dtype).name)


def encode_text(token_ids, emb, gain, bias):
    """Embed a nonempty id sequence, add positions, layer-normalize rows."""
    if len(token_ids) == 0:
        raise DataError("cannot encode an empty token sequence")
    d = emb.shape[1]
    x = embedding(emb, token_ids)
    pe = Tensor(_pe_table(len(token_ids), d, emb.dtype.name)[: len(token_ids)])
    return layer_norm(add(x, pe), gain, bias)


def decoder_prefix(token_ids, sos_id, emb, gain, bias):
    """Encode ``[sos] + tokens``; the autoregressive input at every step."""
    return encode_text([sos_id] + list(token_ids), emb, gain, bias)


def project_video(video, weights, drop=0.0, rng=None, train=False):
    """Map the three raw streams to the model dimension.

    Box coordinates are first projected to d_vis and concatenated onto the
    object features before the shared linear+ReLU. Returns (obj (F,O,d),
    cnn (F,d), aud (F,d)) tensors.
    """
    dt = weights["obj_w"].dtype
    f, o, dv = video.obj.shape

    coords = matmul(Tensor(video.obj_coords.reshape(f * o, 4).astype(dt)), weights["coord_w"])
    coords = add(coords, weights["coord_b"])
    obj_in = concat([Tensor(video.obj.reshape(f * o, dv).astype(dt)), coords], axis=-1)
    obj = relu(add(matmul(obj_in, weights["obj_w"]), weights["obj_b"]))
    obj = dropout(obj, drop, rng, train)
    obj = reshape(obj, (f, o, -1))

    cnn = relu(add(matmul(Tensor(video.cnn.astype(dt)), weights["cnn_w"]), weights["cnn_b"]))
    cnn = dropout(cnn, drop, rng, train)
    aud = relu(add(matmul(Tensor(video.aud.astype(dt)), weights["aud_w"]), weights["aud_b"]))
    aud = dropout(aud, drop, rng, train)
    return obj, cnn, aud
