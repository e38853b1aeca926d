"""Model assemblies: pretraining encoder-decoder, translation and retrieval heads.

The pretraining model couples a visual branch (frame projection, temporal
conv block, FC to hidden size, positions, transformer encoder) with a text
encoder and an autoregressive text decoder, plus a trainable contrastive
temperature stored as a log so it stays positive.

Downstream models consume offline features written by ``extract_features``
(the visual encoder's outputs after inference-mode downsampling): the
translation head is projection + encoder + decoder + vocabulary logits;
the retrieval head is a dual encoder with fully independent video and text
parameters.

Checkpoints are binary containers; see ``save_checkpoint`` for the layout.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import nn
from . import tensor as T
from . import text as text_mod
from .errors import ConfigError, DataError
from .nn import ModelConfig, Module
from .tensor import Tensor

TAU_INIT = 0.07      # contrastive temperature at initialization
TAU_MIN = 0.01       # clamp: logit scale 1/tau never exceeds 100

CHECKPOINT_MAGIC = b"SGREPCK1"
CHECKPOINT_VERSION = 1


class _TextDecoderHead(Module):
    """Embedding + positions + decoder stack + vocabulary projection."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.hidden_size, rng)
        self.pos = nn.PositionalEmbedding(cfg.max_positions, cfg.hidden_size, rng)
        self.drop = nn.Dropout(cfg.dropout)
        self.decoder = nn.TransformerDecoder(cfg, cfg.num_decoder_layers, rng)
        self.tied = cfg.tie_decoder_embedding
        if not self.tied:
            self.out_proj = nn.Linear(cfg.hidden_size, cfg.vocab_size, rng)

    def forward(self, shifted_ids: np.ndarray, tgt_mask: np.ndarray,
                memory: Tensor, mem_mask: np.ndarray, rng=None) -> Tensor:
        shifted_ids = np.asarray(shifted_ids)
        if (shifted_ids[:, 0] != text_mod.BOS).any():
            raise ValueError("decoder input must start with BOS")
        x = self.drop(self.pos(self.embed(shifted_ids)), rng)
        hidden = self.decoder(x, memory, tgt_mask, mem_mask, rng)
        if self.tied:
            flat = T.reshape(hidden, (-1, hidden.shape[-1]))
            logits = T.matmul(flat, T.transpose(self.embed.weight))
            return T.reshape(logits, hidden.shape[:-1] + (self.embed.weight.shape[0],))
        return self.out_proj(hidden)

    __call__ = forward


class _TextEncoderTower(Module):
    """Embedding + positions + encoder stack over token ids."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.hidden_size, rng)
        self.pos = nn.PositionalEmbedding(cfg.max_positions, cfg.hidden_size, rng)
        self.drop = nn.Dropout(cfg.dropout)
        self.encoder = nn.TransformerEncoder(cfg, cfg.num_encoder_layers, rng)

    def forward(self, ids: np.ndarray, mask: np.ndarray, rng=None) -> Tensor:
        x = self.drop(self.pos(self.embed(np.asarray(ids))), rng)
        return self.encoder(x, mask, rng)

    __call__ = forward


class C2RLModel(Module):
    """Joint pretraining model: visual encoder, text encoder, text decoder."""

    kind = "pretrain"

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        cfg = config
        self.config = cfg
        self.frame_proj = nn.Linear(cfg.frame_feature_dim, cfg.frame_channels, rng)
        self.temporal = nn.ConvBNReLU(cfg.frame_channels, rng)
        self.sign_fc = nn.Linear(cfg.frame_channels, cfg.hidden_size, rng)
        self.sign_pos = nn.PositionalEmbedding(cfg.max_positions, cfg.hidden_size, rng)
        self.sign_drop = nn.Dropout(cfg.dropout)
        self.visual_encoder = nn.TransformerEncoder(cfg, cfg.num_encoder_layers, rng)
        self.text_tower = _TextEncoderTower(cfg, rng)
        self.decoder_head = _TextDecoderHead(cfg, rng)
        self.log_temp = Tensor(np.log(TAU_INIT), requires_grad=True)

    @property
    def temperature(self) -> Tensor:
        return T.exp(self.log_temp)

    def clamp_temperature(self) -> None:
        """Keep the logit scale 1/tau at or below 1/TAU_MIN (call after updates)."""
        self.log_temp.data = np.maximum(self.log_temp.data, np.log(TAU_MIN))

    def sign_embedding(self, frames, frame_mask=None, rng=None) -> Tensor:
        frames = frames if isinstance(frames, Tensor) else Tensor(frames)
        if frames.shape[-1] != self.config.frame_feature_dim:
            raise ConfigError(
                f"frame feature dim {frames.shape[-1]} does not match model "
                f"config {self.config.frame_feature_dim}"
            )
        x = self.frame_proj(frames)
        x = self.temporal(x)
        x = self.sign_fc(x)
        return self.sign_drop(self.sign_pos(x), rng)

    def visual_encode(self, frames, frame_mask=None, rng=None) -> Tensor:
        x = self.sign_embedding(frames, frame_mask, rng)
        return self.visual_encoder(x, frame_mask, rng)

    def text_encode(self, ids, mask=None, rng=None) -> Tensor:
        return self.text_tower(ids, mask, rng)

    def decode_logits(self, memory: Tensor, mem_mask, shifted_ids, tgt_mask, rng=None) -> Tensor:
        return self.decoder_head(shifted_ids, tgt_mask, memory, mem_mask, rng)


class SLTModel(Module):
    """Translation head over frozen offline features."""

    kind = "slt"

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        cfg = config
        self.config = cfg
        self.projection = nn.Linear(cfg.frame_feature_dim, cfg.hidden_size, rng)
        self.pos = nn.PositionalEmbedding(cfg.max_positions, cfg.hidden_size, rng)
        self.drop = nn.Dropout(cfg.dropout)
        self.encoder = nn.TransformerEncoder(cfg, cfg.num_encoder_layers, rng)
        self.decoder_head = _TextDecoderHead(cfg, rng)

    def projection_parameters(self) -> dict[str, Tensor]:
        return {f"projection.{k}": v for k, v in self.projection.named_parameters()}

    def encode(self, features, mask=None, rng=None) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.shape[-1] != self.config.frame_feature_dim:
            raise ConfigError(
                f"feature dim {x.shape[-1]} does not match model config "
                f"{self.config.frame_feature_dim}"
            )
        x = self.drop(self.pos(self.projection(x)), rng)
        return self.encoder(x, mask, rng)

    def forward_logits(self, features, feature_mask, shifted_ids, tgt_mask, rng=None) -> Tensor:
        memory = self.encode(features, feature_mask, rng)
        return self.decoder_head(shifted_ids, tgt_mask, memory, feature_mask, rng)


class SLRetModel(Module):
    """Dual-encoder retrieval head; the two towers share no parameters."""

    kind = "slret"

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        cfg = config
        self.config = cfg
        self.projection = nn.Linear(cfg.frame_feature_dim, cfg.hidden_size, rng)
        self.video_pos = nn.PositionalEmbedding(cfg.max_positions, cfg.hidden_size, rng)
        self.video_drop = nn.Dropout(cfg.dropout)
        self.video_encoder = nn.TransformerEncoder(cfg, cfg.num_encoder_layers, rng)
        self.text_tower = _TextEncoderTower(cfg, rng)
        self.log_temp = Tensor(np.log(TAU_INIT), requires_grad=True)

    @property
    def temperature(self) -> Tensor:
        return T.exp(self.log_temp)

    def clamp_temperature(self) -> None:
        self.log_temp.data = np.maximum(self.log_temp.data, np.log(TAU_MIN))

    def embed_videos(self, features, mask=None, rng=None) -> Tensor:
        x = features if isinstance(features, Tensor) else Tensor(features)
        if x.shape[-1] != self.config.frame_feature_dim:
            raise ConfigError(
                f"feature dim {x.shape[-1]} does not match model config "
                f"{self.config.frame_feature_dim}"
            )
        x = self.video_drop(self.video_pos(self.projection(x)), rng)
        return self.video_encoder(x, mask, rng)

    def embed_texts(self, ids, mask=None, rng=None) -> Tensor:
        return self.text_tower(ids, mask, rng)


_MODEL_KINDS = {"pretrain": C2RLModel, "slt": SLTModel, "slret": SLRetModel}


# -- checkpoint container -----------------------------------------------------


@dataclass
class Checkpoint:
    kind: str
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    rng_state: dict | None
    extra: dict

    def build_model(self):
        cls = _MODEL_KINDS.get(self.kind)
        if cls is None:
            raise DataError(f"unknown model kind {self.kind!r} in checkpoint")
        model = cls(self.config, seed=0)
        model.load_state(self.arrays)
        return model


def save_checkpoint(path, model: Module, rng_state: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write a versioned binary checkpoint.

    Layout (little-endian): 8-byte magic, u32 version, u32 header length,
    UTF-8 JSON header, then the concatenated raw float32 parameter/buffer
    payloads. The header carries the model kind, its architecture config,
    the optimizer rng state, and for each array its name, shape and byte
    offset into the payload.
    """
    entries = []
    blobs = []
    offset = 0
    for name, array in model.named_state():
        raw = np.ascontiguousarray(array, dtype="<f4")
        entries.append({"name": name, "shape": list(array.shape), "offset": offset})
        blobs.append(raw.tobytes())
        offset += len(blobs[-1])
    header = {
        "kind": model.kind,
        "config": asdict(model.config),
        "rng_state": rng_state,
        "extra": extra or {},
        "arrays": entries,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    head = len(CHECKPOINT_MAGIC) + 8
    if len(raw) < head or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack_from("<II", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[head: head + header_len].decode("utf-8"))
    base = head + header_len
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    config = ModelConfig(**header["config"])
    return Checkpoint(
        kind=header["kind"],
        config=config,
        arrays=arrays,
        rng_state=header.get("rng_state"),
        extra=header.get("extra", {}),
    )


def load_model(path):
    """Convenience: read a checkpoint and materialize its model in eval mode."""
    model = load_checkpoint(path).build_model()
    return model.eval()


# -- offline feature extraction --------------------------------------------------


def extract_features(model: C2RLModel, dataset: data_mod.Dataset, out_dir,
                     downsample_rate: float = 0.25, batch_size: int = 64,
                     manifest_name: str = "manifest.tsv") -> Path:
    """Run the frozen visual encoder over a dataset and write feature files.

    Applies inference-mode downsampling, encodes in eval mode, and writes
    one feature file per sample (unpadded length) plus a manifest. Returns
    the manifest path. Re-running over the same inputs is bit-identical.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    was_training = model.training
    model.eval()
    pre = data_mod.PreprocessConfig(downsample_rate, train_mode=False)
    records = []
    try:
        with T.no_grad():
            for lo in range(0, len(dataset), batch_size):
                chunk = dataset[lo: lo + batch_size]
                videos = [data_mod.downsample_frames(v, pre) for v, _ in chunk]
                padded, mask = data_mod.pad_videos([v.features for v in videos])
                encoded = model.visual_encode(padded, mask).data
                for row, (video, (_, sentence)) in enumerate(zip(videos, chunk)):
                    rel = f"features/{video.id}.feat"
                    data_mod.write_features(out_dir / rel, encoded[row, : video.length])
                    records.append((video.id, rel, sentence))
    finally:
        model.train(was_training)
    manifest = out_dir / manifest_name
    data_mod.write_manifest(manifest, records)
    return manifest
