"""Frozen base encoders and linear projection heads.

The built-in encoders are feature-hashing bags of n-grams (bytes for
packets, words for text). They carry no trainable state. Real pretrained
encoders can be plugged in by precomputing their outputs offline and
loading them with :class:`ExternalEncoder`.
"""

from __future__ import annotations

import hashlib
import json
import re
import warnings
import zlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ShapeError

BASE_DIM = 512
EMBED_DIM = 128

_WORD = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*")


class EmptyInputWarning(UserWarning):
    pass


def tokenize(text: str) -> list:
    return _WORD.findall(text.lower())


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


@lru_cache(maxsize=16)
def _byte_buckets(dim: int, seed: int) -> np.ndarray:
    # ids 0..255 are unigrams, 256 + 256*a + b are bigrams
    ids = np.arange(256 + 256 * 256, dtype=np.uint64) + np.uint64(seed) * np.uint64(1 << 20)
    with np.errstate(over="ignore"):
        return (_splitmix64(ids) % np.uint64(dim)).astype(np.int64)


def _l2(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


@dataclass(frozen=True)
class HashedPacketEncoder:
    """Byte unigram+bigram counts hashed into ``output_dim`` buckets, L2-normalized."""

    output_dim: int = BASE_DIM
    seed: int = 0
    modality = "packet"
    kind = "hashed-ngram"

    def encode(self, payload: bytes) -> np.ndarray:
        if len(payload) == 0:
            warnings.warn("empty payload encoded as zero vector", EmptyInputWarning)
            return np.zeros(self.output_dim)
        b = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
        ids = np.concatenate([b, 256 + 256 * b[:-1] + b[1:]])
        counts = np.bincount(_byte_buckets(self.output_dim, self.seed)[ids], minlength=self.output_dim)
        return _l2(counts.astype(np.float64))

    def encode_many(self, payloads) -> np.ndarray:
        return np.stack([self.encode(p) for p in payloads]) if payloads else np.zeros((0, self.output_dim))


@dataclass(frozen=True)
class HashedTextEncoder:
    """Lower-cased word n-grams (unigram+bigram by default) hashed into buckets."""

    output_dim: int = BASE_DIM
    seed: int = 0
    ngram_max: int = 2
    modality = "text"
    kind = "hashed-ngram"

    def _bucket(self, gram: str) -> int:
        return zlib.crc32(f"{self.seed}\x1f{gram}".encode()) % self.output_dim

    def encode(self, text: str) -> np.ndarray:
        toks = tokenize(text)
        if not toks:
            warnings.warn("empty text encoded as zero vector", EmptyInputWarning)
            return np.zeros(self.output_dim)
        v = np.zeros(self.output_dim)
        for n in range(1, self.ngram_max + 1):
            for i in range(len(toks) - n + 1):
                v[self._bucket(" ".join(toks[i:i + n]))] += 1.0
        return _l2(v)

    def encode_many(self, texts) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts]) if texts else np.zeros((0, self.output_dim))


def content_id(x) -> str:
    data = x if isinstance(x, (bytes, bytearray)) else str(x).encode()
    return hashlib.sha1(data).hexdigest()


class ExternalEncoder:
    """Lookup of precomputed base vectors, keyed by sample id.

    The file is JSON-lines ``{"id": ..., "vec": [...]}``. When no explicit
    id is given the key defaults to the SHA-1 hex digest of the input
    (payload bytes or UTF-8 text).
    """

    kind = "external-import"

    def __init__(self, vectors: dict, modality: str):
        dims = {len(v) for v in vectors.values()}
        if len(dims) > 1:
            raise ShapeError("a single vector length", sorted(dims))
        self.vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
        self.modality = modality
        self.output_dim = dims.pop() if dims else 0

    @classmethod
    def load(cls, path, modality: str) -> "ExternalEncoder":
        vecs = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    vecs[str(d["id"])] = d["vec"]
        return cls(vecs, modality)

    def encode(self, x, sample_id=None) -> np.ndarray:
        key = sample_id if sample_id is not None else content_id(x)
        return self.vectors[key].copy()

    def encode_many(self, xs, ids=None) -> np.ndarray:
        ids = ids or [None] * len(xs)
        return np.stack([self.encode(x, i) for x, i in zip(xs, ids)]) if xs else np.zeros((0, self.output_dim))


def encode_packet_base(payload: bytes, enc) -> np.ndarray:
    if enc.modality != "packet":
        raise ValueError("encoder modality must be 'packet'")
    return enc.encode(payload)


def encode_text_base(text: str, enc) -> np.ndarray:
    if enc.modality != "text":
        raise ValueError("encoder modality must be 'text'")
    return enc.encode(text)


@dataclass
class ProjectionHead:
    weight: np.ndarray  # (embed_dim, input_dim)
    bias: np.ndarray    # (embed_dim,)
    seed: int | None = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError((self.weight.shape[0],), self.bias.shape)

    @classmethod
    def init(cls, input_dim: int, embed_dim: int = EMBED_DIM, seed: int = 0) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(input_dim)
        return cls(rng.uniform(-bound, bound, (embed_dim, input_dim)),
                   rng.uniform(-bound, bound, embed_dim), seed)

    @property
    def input_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return project(x, self)

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.weight.copy(), self.bias.copy(), self.seed)

    def to_json(self) -> dict:
        return {"weight": self.weight.tolist(), "bias": self.bias.tolist(),
                "embed_dim": self.embed_dim, "input_dim": self.input_dim,
                "seed": self.seed, "version": 1}

    @classmethod
    def from_json(cls, d: dict) -> "ProjectionHead":
        if d.get("version") != 1:
            raise ValueError(f"unsupported head checkpoint version {d.get('version')}")
        head = cls(np.array(d["weight"], dtype=np.float64), np.array(d["bias"], dtype=np.float64), d.get("seed"))
        if head.weight.shape != (d["embed_dim"], d["input_dim"]):
            raise ShapeError((d["embed_dim"], d["input_dim"]), head.weight.shape)
        return head


def project(base: np.ndarray, head: ProjectionHead) -> np.ndarray:
    """``weight @ base + bias``; accepts a single vector or a row batch."""
    base = np.asarray(base, dtype=np.float64)
    if base.shape[-1] != head.input_dim:
        raise ShapeError(head.input_dim, base.shape[-1])
    return base @ head.weight.T + head.bias


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; 0.0 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(a.shape, b.shape)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class Encoders:
    """The frozen encoder pair used by both pretraining and reasoning."""

    packet: object
    text: object

    @classmethod
    def default(cls, packet_dim: int = BASE_DIM, text_dim: int = BASE_DIM, seed: int = 0) -> "Encoders":
        return cls(HashedPacketEncoder(packet_dim, seed), HashedTextEncoder(text_dim, seed))


@dataclass
class Heads:
    """Projection heads; ``None`` means the base output is used directly."""

    text: ProjectionHead | None = None
    packet: ProjectionHead | None = None

    def embed_packets(self, base: np.ndarray) -> np.ndarray:
        return base if self.packet is None else project(base, self.packet)

    def embed_texts(self, base: np.ndarray) -> np.ndarray:
        return base if self.text is None else project(base, self.text)

    def to_json(self) -> dict:
        return {"text": None if self.text is None else self.text.to_json(),
                "packet": None if self.packet is None else self.packet.to_json()}

    @classmethod
    def from_json(cls, d: dict) -> "Heads":
        return cls(None if d.get("text") is None else ProjectionHead.from_json(d["text"]),
                   None if d.get("packet") is None else ProjectionHead.from_json(d["packet"]))
