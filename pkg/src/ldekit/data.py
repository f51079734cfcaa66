"""Synthetic variable-length corpus generation, the corpus file format,
random-crop batching, and the shifted-delta feature transform.

Each class is a mixture of G Gaussian "phones" with first-order Markov
dynamics over the phone index, so utterances have genuine temporal
structure for the convolutional front-end to exploit. Phone centers are
drawn per class, centered so no class is separable by its global mean
alone, then rescaled so the mean pairwise center distance exceeds the
frame noise by a configurable ratio.

Corpus files are record-oriented little-endian binary: a header
(magic, version, class count, feature dim) followed by one record per
utterance (id, label, L, D, row-major float64 frames). Identical spec
and seed reproduce the file byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .ndcore import DimensionError, Rng

MAGIC = b"LDEC"
FORMAT_VERSION = 1

# synthetic analogue of short / medium / long duration test buckets,
# (bucket tag, inclusive frame-length range)
DURATION_BUCKETS = (("short", (100, 200)),
                    ("medium", (300, 500)),
                    ("long", (1200, 1500)))
BUCKET_SEP = "#"


class CorpusFormatError(ValueError):
    """Corpus file is malformed or disagrees with its header."""


@dataclass
class SyntheticSpec:
    """Corpus generator parameters; everything derives from (spec, seed)."""

    num_classes: int = 4
    feature_dim: int = 20
    phones_per_class: int = 5
    min_len: int = 100
    max_len: int = 1500
    noise_std: float = 1.0
    separation: float = 1.2   # mean pairwise center distance / noise_std
    self_loop: float = 0.85   # phone persistence per frame
    train_utterances: int = 800
    test_utterances: int = 400
    bucketed_test: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.min_len < 1 or self.min_len > self.max_len:
            raise ValueError("bad utterance length range")
        if self.phones_per_class < 1:
            raise ValueError("phones_per_class must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        if not 0.0 <= self.self_loop < 1.0:
            raise ValueError("self_loop must be in [0, 1)")

    def class_names(self):
        return [f"L{k}" for k in range(self.num_classes)]


@dataclass
class Utterance:
    id: str
    label: int
    features: np.ndarray  # D x L

    @property
    def num_frames(self) -> int:
        return self.features.shape[1]

    @property
    def bucket(self) -> str | None:
        """Duration bucket tag carried in the id, if any."""
        if BUCKET_SEP in self.id:
            return self.id.rsplit(BUCKET_SEP, 1)[1]
        return None


@dataclass
class CropPolicy:
    crop_min: int = 200
    crop_max: int = 1000

    def __post_init__(self):
        if not 1 <= self.crop_min <= self.crop_max:
            raise ValueError("crop_min must be in [1, crop_max]")


@dataclass
class ClassGenerator:
    centers: np.ndarray     # G x D phone centers
    transitions: np.ndarray  # G x G row-stochastic


def _build_generators(spec: SyntheticSpec, rng: Rng) -> list[ClassGenerator]:
    g, d = spec.phones_per_class, spec.feature_dim
    all_centers = [rng.normal((g, d)) for _ in range(spec.num_classes)]

    # rescale so the mean pairwise distance among all phone centers is
    # separation * noise_std (classes differ by construction)
    pool = np.vstack(all_centers)
    diffs = pool[:, None, :] - pool[None, :, :]
    dists = np.sqrt((diffs ** 2).sum(axis=2))
    n = pool.shape[0]
    mean_dist = dists.sum() / (n * (n - 1)) if n > 1 else 1.0
    target = spec.separation * max(spec.noise_std, 1e-12)
    scale = target / mean_dist if mean_dist > 0 else 0.0

    gens = []
    for centers in all_centers:
        trans = rng.uniform((g, g), low=0.05, high=1.0)
        trans /= trans.sum(axis=1, keepdims=True)
        trans = spec.self_loop * np.eye(g) + (1.0 - spec.self_loop) * trans
        gens.append(ClassGenerator(centers=centers * scale, transitions=trans))
    return gens


def _sample_utterance(gen: ClassGenerator, length: int, noise_std: float,
                      rng: Rng) -> np.ndarray:
    g, d = gen.centers.shape
    cum = np.cumsum(gen.transitions, axis=1)
    phones = np.empty(length, dtype=np.int64)
    phones[0] = rng.integers(0, g - 1)
    u = rng.uniform((length,))
    for t in range(1, length):
        # rounding can push cum[-1] fractionally below 1, clamp the draw
        phones[t] = min(np.searchsorted(cum[phones[t - 1]], u[t]), g - 1)
    frames = gen.centers[phones]
    if noise_std > 0:
        frames = frames + rng.normal((length, d), std=noise_std)
    return frames.T  # D x L


def _draw_length(spec: SyntheticSpec, rng: Rng, bucketed: bool):
    if not bucketed:
        return rng.integers(spec.min_len, spec.max_len), None
    tag, (lo, hi) = DURATION_BUCKETS[rng.integers(0, len(DURATION_BUCKETS) - 1)]
    return rng.integers(lo, hi), tag


def generate_corpus(spec: SyntheticSpec) -> tuple[list[Utterance], list[Utterance]]:
    """Deterministic train/test utterance sets with disjoint ids.

    Test utterances carry a duration bucket tag in their id (after '#')
    when bucketed_test is set.
    """
    root = Rng(spec.seed)
    gens = _build_generators(spec, root.split(0))

    def make_split(prefix, count, stream, bucketed):
        rng = root.split(stream)
        utts = []
        for i in range(count):
            label = i % spec.num_classes  # balanced splits
            length, tag = _draw_length(spec, rng, bucketed)
            feats = _sample_utterance(gens[label], length, spec.noise_std, rng)
            uid = f"{prefix}{i:05d}"
            if tag is not None:
                uid = f"{uid}{BUCKET_SEP}{tag}"
            utts.append(Utterance(id=uid, label=label, features=feats))
        return utts

    train = make_split("tr", spec.train_utterances, 1, bucketed=False)
    test = make_split("te", spec.test_utterances, 2, bucketed=spec.bucketed_test)
    return train, test


def crop_or_extend(utt: Utterance, target_len: int, rng: Rng) -> np.ndarray:
    """Exactly target_len frames: uniform random contiguous crop when the
    utterance is longer, wrap-around tiling then truncation when shorter."""
    feats = utt.features
    length = feats.shape[1]
    if length == target_len:
        return feats
    if length > target_len:
        start = rng.integers(0, length - target_len)
        return feats[:, start:start + target_len]
    reps = -(-target_len // length)
    return np.tile(feats, (1, reps))[:, :target_len]


def sdc(x: np.ndarray, n_coeffs: int = 7, delta: int = 1, shift: int = 3,
        blocks: int = 7, append_static: bool = True) -> np.ndarray:
    """Shifted delta coefficients, parameterized N-d-P-k.

    Output frame t stacks, for i in [0, k), the deltas
    x[:N, t + i*P + d] - x[:N, t + i*P - d]; with append_static the N
    static coefficients x[:N, t] are appended, giving the conventional
    56-dim output for 7-1-3-7.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected a D x L sequence, got {x.shape}")
    dim, length = x.shape
    if dim < n_coeffs:
        raise DimensionError(f"need at least {n_coeffs} feature dims, got {dim}")
    min_len = 2 * delta + (blocks - 1) * shift + 1
    if length < min_len:
        raise ValueError(f"sequence of {length} frames too short for "
                         f"{n_coeffs}-{delta}-{shift}-{blocks} deltas "
                         f"(needs at least {min_len})")
    first = delta
    last = length - 1 - ((blocks - 1) * shift + delta)
    out_len = last - first + 1
    parts = []
    for i in range(blocks):
        off = i * shift
        plus = x[:n_coeffs, first + off + delta:first + off + delta + out_len]
        minus = x[:n_coeffs, first + off - delta:first + off - delta + out_len]
        parts.append(plus - minus)
    if append_static:
        parts.append(x[:n_coeffs, first:first + out_len])
    return np.vstack(parts)


def make_batches(utts: list[Utterance], batch_size: int, policy: CropPolicy,
                 rng: Rng):
    """One epoch of shuffled (B x D x L, labels) batches.

    A fresh length L is drawn uniformly from the crop range per step and
    every member is cropped or extended to it.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(utts))
    for start in range(0, len(utts), batch_size):
        members = [utts[i] for i in order[start:start + batch_size]]
        target = rng.integers(policy.crop_min, policy.crop_max)
        feats = np.stack([crop_or_extend(u, target, rng) for u in members])
        labels = np.array([u.label for u in members], dtype=np.int64)
        yield feats, labels


def write_corpus(path, utts: list[Utterance], num_classes: int,
                 feature_dim: int) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, num_classes, feature_dim))
        for u in utts:
            feats = np.ascontiguousarray(u.features, dtype="<f8")
            if feats.shape[0] != feature_dim:
                raise CorpusFormatError(
                    f"utterance {u.id}: dim {feats.shape[0]} != header "
                    f"{feature_dim}")
            ident = u.id.encode("utf-8")
            fh.write(struct.pack("<I", len(ident)))
            fh.write(ident)
            fh.write(struct.pack("<III", u.label, feats.shape[1],
                                 feats.shape[0]))
            fh.write(feats.tobytes())


def read_corpus(path) -> tuple[list[Utterance], int, int]:
    """Returns (utterances, num_classes, feature_dim)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, num_classes, feature_dim = struct.unpack_from("<III", blob, 4)
    if version != FORMAT_VERSION:
        raise CorpusFormatError(f"{path}: unsupported version {version}")
    off = 16
    utts = []
    ids = set()
    while off < len(blob):
        if off + 4 > len(blob):
            raise CorpusFormatError(f"{path}: truncated record header")
        (id_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + id_len + 12 > len(blob):
            raise CorpusFormatError(f"{path}: truncated record")
        ident = blob[off:off + id_len].decode("utf-8")
        off += id_len
        label, length, dim = struct.unpack_from("<III", blob, off)
        off += 12
        if dim != feature_dim:
            raise CorpusFormatError(f"{path}: record dim {dim} != header "
                                    f"{feature_dim}")
        if label >= num_classes:
            raise CorpusFormatError(f"{path}: label {label} out of range")
        if ident in ids:
            raise CorpusFormatError(f"{path}: duplicate utterance id {ident}")
        ids.add(ident)
        nbytes = dim * length * 8
        if off + nbytes > len(blob):
            raise CorpusFormatError(f"{path}: truncated frame data for {ident}")
        feats = np.frombuffer(blob, dtype="<f8", count=dim * length,
                              offset=off).reshape(dim, length).copy()
        off += nbytes
        utts.append(Utterance(id=ident, label=label, features=feats))
    return utts, num_classes, feature_dim
