import dataclasses

import numpy as np
import pytest
import torch

from dpcc.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint, serialize
from dpcc.codec.bitstream import (
    FRAME_I,
    FRAME_P,
    FrameBitstream,
    pack_entropy_header,
    pack_sequence,
    unpack_entropy_header,
    unpack_sequence,
)
from dpcc.codec.networks import CodecModel, PointCounts
from dpcc.codec.pipeline import (
    PLANE_BYTES,
    decode_blocks,
    decode_frame,
    decode_sequence,
    encode_blocks,
    encode_frame,
    encode_inter,
    encode_intra,
    encode_sequence,
    frame_tensor,
    model_hash,
    predict_features,
)
from dpcc.codec.training import FramePair, bce_target_occupancy, make_pairs, train, train_step
from dpcc.config import Config, load_config, save_config, toy_config
from dpcc.errors import CheckpointMismatchError, DecodeError, EmptyInputError, ShapeError
from dpcc.nn import Adam
from dpcc.sparse_tensor import build_tensor, downsample_coords
from dpcc.synthetic import rigid_shape, translating_sequence

from oracles import sorted_unique

SMALL = toy_config(enc_channels=(8, 8, 8), predictor_hidden=8)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return CodecModel(SMALL).eval()


@pytest.fixture(scope="module")
def frames():
    return translating_sequence(4, depth=6, seed=3)


class TestConfig:
    def test_file_roundtrip(self, tmp_path):
        cfg = toy_config(lam=2.5, seed=9)
        save_config(cfg, tmp_path / "c.ini")
        assert load_config(tmp_path / "c.ini") == cfg

    def test_validation(self, tmp_path):
        with pytest.raises(ValueError):
            Config(blocks=3)
        with pytest.raises(ValueError):
            Config(depth=3)
        (tmp_path / "bad.ini").write_text("[dpcc]\nnope = 1\n")
        with pytest.raises(ValueError):
            load_config(tmp_path / "bad.ini")


class TestNetworks:
    def test_encoder_on_singleton(self, model):
        c = np.array([[45, 17, 60]])
        ms = model.encoder(frame_tensor(c, 6))
        for s, t in enumerate(ms):
            assert t.coords.tolist() == (c >> s).tolist()
            assert t.scale == s

    def test_encoder_scales_and_widths(self, model, frames):
        ms = model.encoder(frame_tensor(frames[0], 6))
        for s in (1, 2, 3):
            np.testing.assert_array_equal(ms[s].coords, sorted_unique(frames[0] >> s))
        assert [t.channels for t in ms] == [*SMALL.enc_channels, SMALL.bottleneck]

    def test_default_widths(self):
        cfg = Config()
        assert (cfg.enc_channels, cfg.bottleneck) == ((32, 64, 64), 8)

    def test_encoder_rejects_bad_input(self, model):
        with pytest.raises(ShapeError):
            model.encoder(build_tensor([(0, 0, 0)], [[1.0, 2.0]], depth=6))
        with pytest.raises(EmptyInputError):
            model.encoder(build_tensor(np.zeros((0, 3)), depth=6))

    def test_predictor_zero_weights_give_bias(self, frames):
        torch.manual_seed(1)
        m = CodecModel(SMALL).eval()
        with torch.no_grad():
            m.predictor.target.weight.zero_()
            m.predictor.target.bias.copy_(torch.arange(SMALL.bottleneck, dtype=torch.float32))
            ms = m.encoder(frame_tensor(frames[0], 6))
            pred = predict_features(m, frames[0], ms.p3.coords)
        assert pred.shape == (len(ms.p3), SMALL.bottleneck)
        assert torch.equal(pred, m.predictor.target.bias.expand_as(pred))

    def test_predictor_far_targets_get_bias(self, model):
        prev = np.array([[0, 0, 0], [1, 2, 3], [5, 5, 5]])
        with torch.no_grad():
            pred = predict_features(model, prev, np.array([[6, 6, 6], [7, 0, 7]]))
        assert torch.equal(pred, model.predictor.target.bias.expand_as(pred))

    def test_decoder_hits_requested_counts(self, model, frames):
        counts = PointCounts.of(frames[0])
        with torch.no_grad():
            ms = model.encoder(frame_tensor(frames[0], 6))
            out, stages = model.decoder(ms.p3, counts.per_stage())
        assert len(out) == counts.n_full
        assert [len(s[0]) >= k for s, k in zip(stages, counts.per_stage())] == [True] * 3

    def test_occupancy_labels(self):
        rng = np.random.default_rng(0)
        a = sorted_unique(rng.integers(0, 8, size=(50, 3)))
        b = sorted_unique(rng.integers(0, 8, size=(50, 3)))
        assert bce_target_occupancy(a, a).tolist() == [1.0] * len(a)
        assert bce_target_occupancy(a, a + 100).tolist() == [0.0] * len(a)
        truth = set(map(tuple, b.tolist()))
        assert bce_target_occupancy(a, b).tolist() == [float(tuple(p) in truth) for p in a.tolist()]


class TestBitstream:
    def sample(self, **kw):
        fields = dict(frame_type=FRAME_P, depth=10, bottleneck_channels=8, checkpoint_hash=2**64 - 5,
                      n_full=1000, n_1ds=400, n_2ds=100, n_3ds=30, coord_stream=b"\x03abc",
                      entropy_header=pack_entropy_header(240, np.full(8, -5), np.full(8, 6)),
                      feature_stream=bytes(range(50)))
        fields.update(kw)
        return FrameBitstream(**fields)

    def test_roundtrip_and_layout(self):
        fb = self.sample()
        raw = fb.to_bytes()
        assert raw[:4] == b"DPCC" and raw[4] == 1 and raw[5] == FRAME_P and raw[6] == 10 and raw[7] == 8
        assert len(raw) == fb.size
        back, end = FrameBitstream.from_bytes(raw)
        assert back == fb and end == len(raw)
        bits = fb.bits()
        assert bits["total"] == bits["coords"] + bits["feats"] + bits["side"] == 8 * len(raw)

    def test_sequence(self):
        frames = [self.sample(), self.sample(frame_type=FRAME_I, feature_stream=b"")]
        blob = pack_sequence(frames)
        assert int.from_bytes(blob[:4], "little") == 2
        assert unpack_sequence(blob) == frames
        with pytest.raises(DecodeError):
            unpack_sequence(blob + b"x")
        with pytest.raises(DecodeError):
            unpack_sequence(blob[:-3])

    def test_bad_headers(self):
        raw = bytearray(self.sample().to_bytes())
        raw[0] = ord("X")
        with pytest.raises(DecodeError):
            FrameBitstream.from_bytes(bytes(raw))
        with pytest.raises(DecodeError):
            FrameBitstream.from_bytes(self.sample(n_1ds=2000).to_bytes())

    def test_entropy_header(self):
        blob = pack_entropy_header(7, np.array([-3, 0]), np.array([4, 9]))
        count, lo, hi = unpack_entropy_header(blob, 2)
        assert (count, lo.tolist(), hi.tolist()) == (7, [-3, 0], [4, 9])
        with pytest.raises(DecodeError):
            unpack_entropy_header(blob, 3)


class TestPipeline:
    def test_gop_closed_loop(self, model, frames):
        encoded = encode_sequence(frames, model, gop=4)
        assert [e.bitstream.frame_type for e in encoded] == [FRAME_I, FRAME_P, FRAME_P, FRAME_P]
        blob = pack_sequence([e.bitstream for e in encoded])
        decoded = decode_sequence(unpack_sequence(blob), model)
        assert len(decoded) == 4
        for enc, dec, frame in zip(encoded, decoded, frames):
            np.testing.assert_array_equal(enc.reconstruction, dec)
            assert len(dec) == enc.bitstream.n_full == len(frame)
            np.testing.assert_array_equal(enc.bottleneck_coords, downsample_coords(frame, 3))

    def test_counts_in_header(self, model, frames):
        bits = encode_intra(frames[0], model).bitstream
        c = PointCounts.of(frames[0])
        assert (bits.n_full, bits.n_1ds, bits.n_2ds, bits.n_3ds) == (
            c.n_full, c.n_1ds, c.n_2ds, len(downsample_coords(frames[0], 3)))

    def test_gop_length_controls_intra(self, model, frames):
        types = [e.bitstream.frame_type for e in encode_sequence(frames, model, gop=2)]
        assert types == [FRAME_I, FRAME_P, FRAME_I, FRAME_P]
        with pytest.raises(ValueError):
            encode_sequence(frames, model, gop=0)

    def test_wrong_checkpoint(self, model, frames):
        bits = encode_intra(frames[0], model).bitstream
        torch.manual_seed(5)
        other = CodecModel(SMALL).eval()
        with pytest.raises(CheckpointMismatchError):
            decode_frame(bits, other)

    def test_p_frame_needs_reference(self, model, frames):
        bits = encode_inter(frames[1], frames[0], model).bitstream
        with pytest.raises(DecodeError):
            decode_frame(bits, model)
        with pytest.raises(EmptyInputError):
            encode_inter(frames[1], np.zeros((0, 3)), model)
        with pytest.raises(EmptyInputError):
            encode_frame(np.zeros((0, 3)), model)

    def test_corrupt_substreams(self, model, frames):
        bits = encode_intra(frames[0], model).bitstream
        with pytest.raises(DecodeError):
            decode_frame(dataclasses.replace(bits, n_3ds=bits.n_3ds + 1), model)
        with pytest.raises(DecodeError):
            decode_frame(dataclasses.replace(bits, feature_stream=bits.feature_stream[:-2]), model)

    def test_blocks(self, model, frames):
        prev = encode_intra(frames[0], model).reconstruction
        parts, partition = encode_blocks(frames[1], model, 4, reference=prev)
        assert len(parts) == 4 and PLANE_BYTES == 5
        encoder_side = np.concatenate([p.reconstruction for p in parts if p is not None])
        decoded = decode_blocks([p.bitstream if p is not None else None for p in parts], model, partition, prev)
        np.testing.assert_array_equal(sorted_unique(decoded), sorted_unique(encoder_side))
        assert len(decoded) == len(frames[1])

    def test_model_hash_matches_file(self, model, tmp_path):
        h = save_checkpoint(model, tmp_path / "m.dpck")
        loaded, cfg, h2 = load_checkpoint(tmp_path / "m.dpck")
        assert h == h2 == model_hash(model) == model_hash(loaded)
        assert cfg == SMALL
        for (n, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(a, b), n

    def test_checkpoint_errors(self, model):
        blob = serialize(model)
        with pytest.raises(DecodeError):
            read_checkpoint(b"NOPE" + blob[4:])
        with pytest.raises(DecodeError):
            read_checkpoint(blob[:-7])


class TestTraining:
    def test_pairs_and_blocks(self):
        seq = translating_sequence(3, depth=6, seed=1)
        assert len(make_pairs(seq)) == 2
        pairs = make_pairs(seq, blocks=4)
        assert 0 < len(pairs) <= 8
        assert sum(len(p.current) for p in pairs) == len(seq[1]) + len(seq[2])

    def test_step_terms(self):
        torch.manual_seed(2)
        m = CodecModel(SMALL)
        seq = translating_sequence(2, depth=6, seed=2)
        terms = train_step(m, Adam(m.parameters()), FramePair(seq[0], seq[1]), 4.0, torch.Generator().manual_seed(0))
        assert len(terms.bce) == 3 and all(b >= 0 for b in terms.bce)
        assert terms.loss == pytest.approx(terms.rate + 4.0 * terms.distortion, rel=1e-5)
        assert terms.distortion == pytest.approx(sum(terms.bce), rel=1e-5)

    def test_zero_lambda_is_rate_only(self):
        torch.manual_seed(3)
        m = CodecModel(SMALL)
        before = {k: v.clone() for k, v in m.decoder.state_dict().items()}
        seq = translating_sequence(2, depth=6, seed=2)
        terms = train_step(m, Adam(m.parameters()), FramePair(seq[0], seq[1]), 0.0)
        assert terms.loss == pytest.approx(terms.rate)
        for k, v in m.decoder.state_dict().items():
            assert torch.equal(v, before[k]), k

    @pytest.mark.slow
    def test_loss_decreases_on_fixed_pair(self):
        torch.manual_seed(4)
        m = CodecModel(SMALL)
        seq = translating_sequence(2, depth=6, seed=5)
        hist = train(m, [FramePair(seq[0], seq[1])], 200, lam=10.0, seed=0)
        losses = np.array([t.loss for t in hist])
        assert losses[-20:].mean() < losses[:20].mean()


def test_rigid_shape_moves_rigidly():
    seq = translating_sequence(6, depth=6, step=(1, 2), seed=0)
    base = rigid_shape(6)
    for f in seq:
        assert f.min() >= 0 and f.max() < 64
        shift = f.min(axis=0) - base.min(axis=0)
        np.testing.assert_array_equal(f, sorted_unique(base + shift))
    for a, b in zip(seq, seq[1:]):
        move = np.abs(b.min(axis=0) - a.min(axis=0))
        assert move.sum() in (1, 2) and np.count_nonzero(move) == 1
