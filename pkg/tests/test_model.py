"""Model assemblies: shape chains, determinism, checkpoints, feature extraction."""

import math

import numpy as np
import pytest

from signrep import data, model as model_mod, nn, tensor as T, text
from signrep.data import FrameSequence, PreprocessConfig, SyntheticSpec, generate_synthetic
from signrep.errors import ConfigError, DataError
from signrep.model import C2RLModel, SLRetModel, SLTModel
from signrep.nn import ModelConfig


def tiny_cfg(**overrides):
    base = dict(
        frame_feature_dim=8,
        vocab_size=12,
        hidden_size=16,
        num_heads=4,
        ffn_dim=24,
        num_encoder_layers=1,
        num_decoder_layers=1,
        dropout=0.0,
        frame_channels=8,
        max_positions=64,
    )
    base.update(overrides)
    return ModelConfig(**base)


class TestC2RLModel:
    def test_sign_embedding_shape_chain(self, rng):
        cfg = tiny_cfg(frame_feature_dim=64, hidden_size=512, num_heads=8,
                       ffn_dim=32, frame_channels=16)
        m = C2RLModel(cfg, seed=0).eval()
        out = m.sign_embedding(rng.normal(size=(2, 7, 64)).astype(np.float32))
        assert out.shape == (2, 7, 512)

    def test_single_frame_ok(self, rng):
        m = C2RLModel(tiny_cfg(), seed=0).eval()
        out = m.visual_encode(rng.normal(size=(1, 1, 8)).astype(np.float32))
        assert out.shape == (1, 1, 16)

    def test_frame_dim_mismatch(self, rng):
        m = C2RLModel(tiny_cfg(), seed=0)
        with pytest.raises(ConfigError, match="frame feature dim"):
            m.sign_embedding(rng.normal(size=(1, 3, 9)).astype(np.float32))

    def test_visual_encode_deterministic_at_inference(self, rng):
        m = C2RLModel(tiny_cfg(dropout=0.3), seed=0).eval()
        x = rng.normal(size=(2, 5, 8)).astype(np.float32)
        mask = np.ones((2, 5), dtype=bool)
        np.testing.assert_array_equal(
            m.visual_encode(x, mask).data, m.visual_encode(x, mask).data
        )

    def test_visual_encode_padding_invariance(self, rng):
        m = C2RLModel(tiny_cfg(), seed=0).eval()
        x = rng.normal(size=(1, 4, 8)).astype(np.float32)
        mask = np.ones((1, 4), dtype=bool)
        out = m.visual_encode(x, mask).data
        x_pad = np.concatenate([x, np.zeros((1, 3, 8), dtype=np.float32)], axis=1)
        mask_pad = np.concatenate([mask, np.zeros((1, 3), dtype=bool)], axis=1)
        out_pad = m.visual_encode(x_pad, mask_pad).data
        np.testing.assert_allclose(out_pad[:, :4], out, atol=1e-5)

    def test_text_encode_shapes_and_bounds(self):
        m = C2RLModel(tiny_cfg(), seed=0).eval()
        ids = np.array([[1, 4, 5, 2], [1, 6, 2, 0]])
        mask = ids != 0
        out = m.text_encode(ids, mask)
        assert out.shape == (2, 4, 16)
        with pytest.raises(ValueError, match="out of range"):
            m.text_encode(np.array([[1, 12, 2]]), np.ones((1, 3), bool))

    def test_decode_logits_causality_and_shape(self, rng):
        m = C2RLModel(tiny_cfg(), seed=0).eval()
        memory = m.visual_encode(rng.normal(size=(2, 6, 8)).astype(np.float32))
        ids = np.array([[1, 4, 5, 6, 7], [1, 8, 9, 4, 5]])
        mask = np.ones((2, 5), dtype=bool)
        logits = m.decode_logits(memory, None, ids, mask)
        assert logits.shape == (2, 5, 12)
        bumped = ids.copy()
        bumped[:, 3:] = 10
        logits_b = m.decode_logits(memory, None, bumped, mask)
        np.testing.assert_array_equal(logits.data[:, :3], logits_b.data[:, :3])

    def test_decoder_input_must_start_with_bos(self, rng):
        m = C2RLModel(tiny_cfg(), seed=0).eval()
        memory = m.visual_encode(rng.normal(size=(1, 3, 8)).astype(np.float32))
        with pytest.raises(ValueError, match="BOS"):
            m.decode_logits(memory, None, np.array([[4, 5]]), np.ones((1, 2), bool))

    def test_untrained_uniform_head_ce_near_log_vocab(self, rng):
        # zero the output projection: logits all equal -> CE = log |V|
        from signrep import objectives as obj
        m = C2RLModel(tiny_cfg(), seed=0).eval()
        m.decoder_head.out_proj.weight.data[:] = 0.0
        m.decoder_head.out_proj.bias.data[:] = 0.0
        memory = m.visual_encode(rng.normal(size=(2, 4, 8)).astype(np.float32))
        ids = np.array([[1, 4, 5, 2], [1, 6, 7, 2]])
        mask = np.ones((2, 4), dtype=bool)
        logits = m.decode_logits(memory, None, ids[:, :-1], mask[:, :-1])
        loss = obj.lm_loss(logits, ids[:, 1:], mask[:, 1:])
        assert abs(loss.item() - math.log(12)) < 0.1

    def test_temperature_positive_and_clamped(self):
        m = C2RLModel(tiny_cfg(), seed=0)
        assert m.temperature.item() == pytest.approx(0.07, rel=1e-5)
        m.log_temp.data = np.asarray(np.log(1e-6), dtype=m.log_temp.dtype)
        m.clamp_temperature()
        assert m.temperature.item() == pytest.approx(0.01, rel=1e-4)
        assert m.temperature.item() > 0

    def test_parameter_count_stable(self):
        counts = []
        for _ in range(2):
            m = C2RLModel(tiny_cfg(), seed=3)
            counts.append(sum(p.size for _, p in m.named_parameters()))
        assert counts[0] == counts[1]

    def test_tied_decoder_embedding_flag(self, rng):
        cfg = tiny_cfg(tie_decoder_embedding=True)
        m = C2RLModel(cfg, seed=0).eval()
        memory = m.visual_encode(rng.normal(size=(1, 3, 8)).astype(np.float32))
        logits = m.decode_logits(memory, None, np.array([[1, 4]]), np.ones((1, 2), bool))
        assert logits.shape == (1, 2, 12)
        paths = [p for p, _ in m.named_parameters()]
        assert not any("out_proj" in p for p in paths)


class TestSLRetModel:
    def test_towers_disjoint_before_and_after_step(self, rng):
        from signrep import objectives as obj, training
        m = SLRetModel(tiny_cfg(), seed=0)
        video_params = {id(p) for _, p in m.video_encoder.named_parameters()}
        text_params = {id(p) for _, p in m.text_tower.named_parameters()}
        assert not video_params & text_params

        feats = rng.normal(size=(4, 3, 8)).astype(np.float32)
        fmask = np.ones((4, 3), dtype=bool)
        ids = np.tile(np.array([[1, 5, 2]]), (4, 1))
        tmask = np.ones((4, 3), dtype=bool)
        opt = training.Adam([(m.parameters(), 1e-3)])
        T.reset_tape()
        pair = obj.clcl_similarity(
            m.embed_videos(feats, fmask, rng), fmask,
            m.embed_texts(ids, tmask, rng), tmask, m.temperature,
        )
        loss = obj.info_nce(pair)
        T.backward(loss)
        before_v = {k: v.data.copy() for k, v in m.video_encoder.named_parameters()}
        before_t = {k: v.data.copy() for k, v in m.text_tower.named_parameters()}
        opt.step()
        changed_v = any(not np.array_equal(before_v[k], v.data)
                        for k, v in m.video_encoder.named_parameters())
        changed_t = any(not np.array_equal(before_t[k], v.data)
                        for k, v in m.text_tower.named_parameters())
        assert changed_v and changed_t
        v_state = dict(m.video_encoder.named_state())
        t_state = dict(m.text_tower.named_state())
        assert not any(a is b for a in v_state.values() for b in t_state.values())


class TestCheckpoint:
    def test_round_trip_bit_exact_forward(self, tmp_path, rng):
        m = C2RLModel(tiny_cfg(), seed=5).eval()
        x = rng.normal(size=(2, 4, 8)).astype(np.float32)
        before = m.visual_encode(x).data.copy()
        path = tmp_path / "model.ckpt"
        model_mod.save_checkpoint(path, m, rng_state={"note": 1}, extra={"epoch": 3})
        loaded = model_mod.load_model(path)
        after = loaded.visual_encode(x).data
        np.testing.assert_array_equal(before, after)

    def test_header_fields_survive(self, tmp_path):
        m = SLTModel(tiny_cfg(), seed=1)
        path = tmp_path / "slt.ckpt"
        gen = np.random.default_rng(42)
        model_mod.save_checkpoint(path, m, rng_state=gen.bit_generator.state,
                                  extra={"best_metric": 0.5})
        ckpt = model_mod.load_checkpoint(path)
        assert ckpt.kind == "slt"
        assert ckpt.extra["best_metric"] == 0.5
        restored = np.random.Generator(np.random.PCG64())
        restored.bit_generator.state = ckpt.rng_state
        assert restored.integers(1 << 30) == np.random.default_rng(42).integers(1 << 30)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(DataError, match="magic"):
            model_mod.load_checkpoint(path)

    def test_slret_round_trip(self, tmp_path, rng):
        m = SLRetModel(tiny_cfg(), seed=2).eval()
        feats = rng.normal(size=(2, 3, 8)).astype(np.float32)
        before = m.embed_videos(feats).data.copy()
        path = tmp_path / "ret.ckpt"
        model_mod.save_checkpoint(path, m)
        loaded = model_mod.load_model(path)
        np.testing.assert_array_equal(before, loaded.embed_videos(feats).data)


class TestExtractFeatures:
    def make_dataset(self, n=7):
        spec = SyntheticSpec(
            num_gestures=5, vocab_words=5, frames_per_gesture=4, feature_dim=8,
            noise_sigma=0.0, min_sentence_len=2, max_sentence_len=5,
            mapping_seed=1, train_size=n, val_size=0, test_size=0,
        )
        return generate_synthetic(spec, seed=9)["train"]

    def test_lengths_follow_downsampling(self, tmp_path):
        dataset = self.make_dataset()
        m = C2RLModel(tiny_cfg(), seed=0)
        manifest = model_mod.extract_features(m, dataset, tmp_path, downsample_rate=0.25)
        loaded = data.load_features(manifest)
        assert len(loaded) == len(dataset)
        for (orig, sentence), (feat, sentence2) in zip(dataset, loaded):
            assert sentence == sentence2
            assert feat.length == math.ceil(0.25 * orig.length)
            assert feat.features.shape[1] == 16

    def test_repeat_extraction_bit_identical(self, tmp_path):
        dataset = self.make_dataset(5)
        m = C2RLModel(tiny_cfg(), seed=0)
        man1 = model_mod.extract_features(m, dataset, tmp_path / "a")
        man2 = model_mod.extract_features(m, dataset, tmp_path / "b")
        for (va, sa), (vb, sb) in zip(data.load_features(man1), data.load_features(man2)):
            np.testing.assert_array_equal(va.features, vb.features)
            assert sa == sb

    def test_manifest_line_count(self, tmp_path):
        dataset = self.make_dataset(6)
        m = C2RLModel(tiny_cfg(), seed=0)
        manifest = model_mod.extract_features(m, dataset, tmp_path)
        lines = [l for l in manifest.read_text().splitlines() if l.strip()]
        assert len(lines) == 6
