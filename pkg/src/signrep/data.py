"""Synthetic gesture corpus, clip downsampling, feature files, batching.

The synthetic corpus replaces real sign video: each of G gestures is a
fixed random unit prototype vector; a sample is a word sequence whose
gestures are emitted as L noisy copies of their prototype. The gesture to
word mapping is a seeded random bijection, so translation reduces to a
learnable code.

Feature files are the binary interchange format between the pretraining
stage and the downstream tasks:

    magic  8 bytes   b"C2RLFEAT"
    u32    version   1
    u32    T         number of frames (rows)
    u32    D         feature dimension (columns)
    f32[]  payload   T*D little-endian floats, row-major

A manifest is UTF-8 text, one record per line:
``<id>\\t<relative feature path>\\t<sentence>``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError
from . import text as text_mod

FEATURE_MAGIC = b"C2RLFEAT"
FEATURE_VERSION = 1


@dataclass
class FrameSequence:
    """One sign video as per-frame feature vectors."""

    id: str
    features: np.ndarray  # (T, D) float32

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be (T>=1, D), got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise ValueError(f"non-finite feature values in sequence {self.id!r}")

    @property
    def length(self) -> int:
        return self.features.shape[0]


Sample = tuple[FrameSequence, str]
Dataset = list[Sample]


@dataclass
class PairBatch:
    """Aligned (video, text) rows: the unit of training and evaluation."""

    videos: np.ndarray       # (N, T_max, D) float32, zero padded
    frame_mask: np.ndarray   # (N, T_max) bool, True on real frames
    token_ids: np.ndarray    # (N, U_max) int64, PAD padded, BOS...EOS
    token_mask: np.ndarray   # (N, U_max) bool, True on real tokens
    ids: list[str]
    sentences: list[str]

    @property
    def size(self) -> int:
        return self.videos.shape[0]


@dataclass
class SyntheticSpec:
    num_gestures: int = 20
    vocab_words: int = 20
    frames_per_gesture: int = 4
    feature_dim: int = 32
    noise_sigma: float = 0.05
    min_sentence_len: int = 3
    max_sentence_len: int = 8
    mapping_seed: int = 7
    train_size: int = 2000
    val_size: int = 200
    test_size: int = 200

    def __post_init__(self):
        if self.num_gestures != self.vocab_words:
            raise ConfigError(
                f"gesture/word bijection requires equal counts, got "
                f"{self.num_gestures} vs {self.vocab_words}"
            )
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 1 <= self.min_sentence_len <= self.max_sentence_len:
            raise ConfigError("invalid sentence length range")
        for name in ("num_gestures", "frames_per_gesture", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


def gesture_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """(G, D) fixed random unit vectors, derived from the mapping seed."""
    rng = np.random.default_rng(spec.mapping_seed)
    protos = rng.normal(size=(spec.num_gestures, spec.feature_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    return protos.astype(np.float32)


def gesture_words(spec: SyntheticSpec) -> list[str]:
    """Word assigned to each gesture: a seeded random bijection."""
    rng = np.random.default_rng(spec.mapping_seed)
    rng.normal(size=(spec.num_gestures, spec.feature_dim))  # keep draws aligned with prototypes
    order = rng.permutation(spec.vocab_words)
    return [f"w{order[g]:02d}" for g in range(spec.num_gestures)]


def generate_synthetic(spec: SyntheticSpec, seed: int) -> dict[str, Dataset]:
    """Build train/val/test splits, disjoint by sample index, reproducible by seed."""
    protos = gesture_prototypes(spec)
    words = gesture_words(spec)
    rng = np.random.default_rng(seed)
    sizes = {"train": spec.train_size, "val": spec.val_size, "test": spec.test_size}
    splits: dict[str, Dataset] = {}
    index = 0
    for split, size in sizes.items():
        samples: Dataset = []
        for _ in range(size):
            length = int(rng.integers(spec.min_sentence_len, spec.max_sentence_len + 1))
            gestures = rng.integers(0, spec.num_gestures, size=length)
            frames = np.repeat(protos[gestures], spec.frames_per_gesture, axis=0)
            if spec.noise_sigma > 0:
                frames = frames + spec.noise_sigma * rng.standard_normal(frames.shape)
            sentence = " ".join(words[g] for g in gestures)
            video = FrameSequence(id=f"sample-{index:05d}", features=frames.astype(np.float32))
            samples.append((video, sentence))
            index += 1
        splits[split] = samples
    return splits


# -- clip downsampling -------------------------------------------------------


@dataclass
class PreprocessConfig:
    downsample_rate: float = 0.25
    train_mode: bool = False

    def __post_init__(self):
        if not 0.0 < self.downsample_rate <= 1.0:
            raise ConfigError(
                f"downsample_rate must be in (0, 1], got {self.downsample_rate}"
            )


def clip_bounds(num_frames: int, rate: float) -> list[tuple[int, int]]:
    """Split [0, T) into ceil(rate*T) sequential clips, sizes differing by <= 1.

    Remainder frames are given to the leading clips, one each.
    """
    num_clips = math.ceil(rate * num_frames)
    base, rem = divmod(num_frames, num_clips)
    bounds = []
    start = 0
    for clip in range(num_clips):
        size = base + (1 if clip < rem else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def downsample_frames(video: FrameSequence, cfg: PreprocessConfig,
                      rng: np.random.Generator | None = None) -> FrameSequence:
    """Keep one frame per clip: random in train mode, the first at inference."""
    bounds = clip_bounds(video.length, cfg.downsample_rate)
    if cfg.train_mode:
        if rng is None:
            raise ValueError("train-mode downsampling needs an rng")
        picks = [int(rng.integers(lo, hi)) for lo, hi in bounds]
    else:
        picks = [lo for lo, _ in bounds]
    return FrameSequence(id=video.id, features=video.features[picks])


# -- feature files ------------------------------------------------------------


def write_features(path, features: np.ndarray) -> None:
    features = np.asarray(features, dtype="<f4")
    if features.ndim != 2:
        raise ValueError(f"features must be 2-d, got shape {features.shape}")
    t, d = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, t, d))
        fh.write(features.tobytes(order="C"))


def read_features(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    header = len(FEATURE_MAGIC) + 12
    if len(raw) < header or raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file (bad magic)")
    version, t, d = struct.unpack_from("<III", raw, len(FEATURE_MAGIC))
    if version != FEATURE_VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    payload = np.frombuffer(raw, dtype="<f4", offset=header)
    if payload.size != t * d:
        raise DataError(
            f"{path}: header promises {t}x{d}={t * d} floats, payload has {payload.size}"
        )
    features = payload.reshape(t, d)
    if not np.isfinite(features).all():
        raise DataError(f"{path}: payload contains non-finite values")
    return features.copy()


def write_manifest(path, records: list[tuple[str, str, str]]) -> None:
    """Records are (id, relative feature path, sentence)."""
    lines = [f"{rid}\t{rel}\t{sentence}" for rid, rel, sentence in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_features(manifest_path) -> Dataset:
    """Read a manifest and its referenced feature files into a dataset."""
    manifest_path = Path(manifest_path)
    try:
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent
    dataset: Dataset = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(
                f"{manifest_path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
            )
        rid, rel, sentence = parts
        features = read_features(root / rel)
        dataset.append((FrameSequence(id=rid, features=features), sentence))
    return dataset


# -- batching ------------------------------------------------------------------


def pad_videos(videos: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad (T_i, D) feature arrays to a common length; mask marks real frames."""
    t_max = max(v.shape[0] for v in videos)
    d = videos[0].shape[1]
    out = np.zeros((len(videos), t_max, d), dtype=np.float32)
    mask = np.zeros((len(videos), t_max), dtype=bool)
    for i, v in enumerate(videos):
        out[i, : v.shape[0]] = v
        mask[i, : v.shape[0]] = True
    return out, mask


def make_batches(dataset: Dataset, vocab, batch_size: int, *,
                 rng: np.random.Generator | None = None,
                 shuffle: bool = False,
                 drop_last: bool = False,
                 preprocess: PreprocessConfig | None = None) -> Iterator[PairBatch]:
    """Assemble PairBatches; deterministic for a given generator state.

    ``drop_last`` implements the contrastive-pretraining rule: a trailing
    partial batch is discarded (an in-batch softmax over one or two items
    is degenerate), and batch_size must be at least 2. Evaluation keeps
    every sample.
    """
    if not dataset:
        raise ValueError("cannot batch an empty dataset")
    if drop_last and batch_size < 2:
        raise ConfigError("contrastive training needs batch_size >= 2")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(dataset))
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an rng")
        order = rng.permutation(len(dataset))
    stop = len(dataset) - (len(dataset) % batch_size) if drop_last else len(dataset)
    for lo in range(0, stop, batch_size):
        chunk = [dataset[i] for i in order[lo: lo + batch_size]]
        if not chunk:
            break
        videos = []
        for video, _ in chunk:
            if preprocess is not None:
                video = downsample_frames(video, preprocess, rng)
            videos.append(video.features)
        padded, frame_mask = pad_videos(videos)
        token_ids, token_mask = text_mod.pad_batch(
            [text_mod.encode(sentence, vocab) for _, sentence in chunk]
        )
        yield PairBatch(
            videos=padded,
            frame_mask=frame_mask,
            token_ids=token_ids,
            token_mask=token_mask,
            ids=[video.id for video, _ in chunk],
            sentences=[sentence for _, sentence in chunk],
        )
