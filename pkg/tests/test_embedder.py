"""Embedder tests: architecture, training loop, pooling, filters, file IO."""

import numpy as np
import pytest

from vburst import nn
from vburst.embedder import (
    EmbedderConfig,
    FrameEmbeddingSequence,
    build_embedder,
    classify_eval,
    cumulative_frequency_response,
    extract_frame_embeddings,
    hard_labels,
    load_external_embeddings,
    pool_functionals,
    save_external_embeddings,
    speaker_split,
    temporal_length_chain,
    train_embedder,
)

FS = 16000

# Small architecture used throughout to keep tests fast.
TINY_STACK = ((8, 32, 8), (8, 8, 2))


def tiny_config(**overrides):
    base = dict(
        task="CR",
        conv_stack=TINY_STACK,
        hidden_dim=10,
        frame_len_samples=256,
        batch_size=32,
        max_epochs=50,
        initial_lr=1e-1,
        seed=0,
    )
    base.update(overrides)
    return EmbedderConfig(**base)


def tone_utterance(rng, class_index, n_frames=6, frame_len=256):
    """Frames of a class-specific pure tone in light noise."""
    freqs = [500.0, 1500.0, 3000.0, 6000.0]
    t = np.arange(frame_len) / FS
    frames = []
    for _ in range(n_frames):
        phase = rng.uniform(0, 2 * np.pi)
        tone = np.sin(2 * np.pi * freqs[class_index] * t + phase)
        frames.append(tone + 0.1 * rng.standard_normal(frame_len))
    return np.array(frames)


class TestBuildEmbedder:
    def test_er_output_dim(self):
        cfg = tiny_config(task="ER")
        net = build_embedder(cfg)
        out, _ = nn.forward(net, np.zeros((2, 1, 256)))
        assert out.shape == (2, 10)

    def test_cr_output_dim(self):
        net = build_embedder(tiny_config(task="CR"))
        out, _ = nn.forward(net, np.zeros((2, 1, 256)))
        assert out.shape == (2, 4)

    def test_single_whole_frame_kernel(self):
        cfg = EmbedderConfig(
            task="ER", conv_stack=((1, 4000, 4000),), frame_len_samples=4000
        )
        assert temporal_length_chain(cfg.conv_stack, 4000) == [4000, 1]
        net = build_embedder(cfg)
        out, _ = nn.forward(net, np.zeros((1, 1, 4000)))
        assert out.shape == (1, 10)

    def test_overreducing_stack_reports_chain(self):
        cfg = tiny_config(conv_stack=((4, 64, 64), (4, 64, 1)))
        with pytest.raises(ValueError, match=r"\[256, 4, -59\]"):
            build_embedder(cfg)

    def test_structure_relu_then_softmax(self):
        net = build_embedder(tiny_config())
        kinds = [s.kind for s in net.specs]
        assert kinds == [
            "conv1d",
            "relu",
            "conv1d",
            "relu",
            "flatten",
            "dense",
            "relu",
            "dense",
            "softmax",
        ]

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            EmbedderConfig(task="XX")
        with pytest.raises(ValueError):
            EmbedderConfig(hidden_dim=0)
        with pytest.raises(ValueError):
            EmbedderConfig(input_kind="mel")


class TestHardLabels:
    def test_argmax(self):
        row = [0.1, 0.9] + [0.0] * 8
        assert hard_labels([row])[0] == 1

    def test_tie_breaks_low(self):
        row = [0.5, 0.5] + [0.0] * 8
        assert hard_labels([row])[0] == 0

    def test_all_zero_row(self):
        assert hard_labels([[0.0] * 10])[0] == 0

    def test_one_hot_round_trip(self):
        eye = np.eye(10)
        assert np.array_equal(hard_labels(eye), np.arange(10))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            hard_labels([[1.5] + [0.0] * 9])
        with pytest.raises(ValueError):
            hard_labels([[-0.1] + [0.0] * 9])


class TestSpeakerSplit:
    def test_ninety_ten(self):
        train, crossval = speaker_split(range(10), 0.9, seed=0)
        assert len(train) == 9 and len(crossval) == 1
        assert train.isdisjoint(crossval)

    def test_deterministic(self):
        assert speaker_split(range(10), 0.9, 7) == speaker_split(range(10), 0.9, 7)

    def test_two_speakers_min_one_each(self):
        train, crossval = speaker_split([0, 1], 0.9, seed=0)
        assert len(train) == 1 and len(crossval) == 1

    def test_partition_property(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(2, 30))
            ratio = float(rng.uniform(0.05, 0.95))
            train, crossval = speaker_split(range(n), ratio, int(rng.integers(100)))
            assert train | crossval == set(range(n))
            assert train.isdisjoint(crossval)
            assert len(train) >= 1 and len(crossval) >= 1

    def test_too_few_speakers_rejected(self):
        with pytest.raises(ValueError):
            speaker_split([3], 0.9, seed=0)


class TestTrainEmbedder:
    def _tone_sets(self, seed=0):
        rng = np.random.default_rng(seed)
        train = [
            (tone_utterance(rng, c), c) for c in range(4) for _ in range(4)
        ]
        crossval = [
            (tone_utterance(rng, c), c) for c in range(4) for _ in range(2)
        ]
        return train, crossval

    def test_separable_tones_learned(self):
        train, crossval = self._tone_sets()
        net, history = train_embedder(tiny_config(), train, crossval)
        frames = {f"cv{i}": f for i, (f, _) in enumerate(crossval)}
        labels = {f"cv{i}": c for i, (_, c) in enumerate(crossval)}
        uar, _, _ = classify_eval(net, frames, labels)
        assert uar > 0.9
        assert len(history.crossval_loss) <= 51

    def test_zero_epochs_returns_initial_network(self):
        train, crossval = self._tone_sets()
        cfg = tiny_config(max_epochs=0)
        net, history = train_embedder(cfg, train, crossval)
        init = build_embedder(cfg)
        for (_, _, a), (_, _, b) in zip(net.flat_params(), init.flat_params()):
            assert np.array_equal(a, b)
        assert len(history.crossval_loss) == 1

    def test_returned_model_matches_min_history(self):
        train, crossval = self._tone_sets()
        cfg = tiny_config(max_epochs=8)
        net, history = train_embedder(cfg, train, crossval)
        x_cv = np.vstack([f for f, _ in crossval])
        y_cv = np.concatenate(
            [np.full(len(f), c, dtype=np.int64) for f, c in crossval]
        )
        probs, _ = nn.forward(net, x_cv[:, None, :])
        loss, _ = nn.mean_cross_entropy(probs, y_cv)
        assert loss == pytest.approx(min(history.crossval_loss), abs=1e-12)

    def test_absent_class_warns(self):
        rng = np.random.default_rng(1)
        train = [(tone_utterance(rng, c), c) for c in range(3)]
        crossval = [(tone_utterance(rng, 0), 0)]
        _, history = train_embedder(tiny_config(max_epochs=1), train, crossval)
        assert any("class 3" in w for w in history.warnings)

    def test_empty_side_rejected(self):
        train, crossval = self._tone_sets()
        with pytest.raises(ValueError):
            train_embedder(tiny_config(), [], crossval)
        with pytest.raises(ValueError):
            train_embedder(tiny_config(), train, [])


class TestExtraction:
    def test_embedding_shape(self):
        net = build_embedder(tiny_config(task="ER"))
        rng = np.random.default_rng(0)
        seq = extract_frame_embeddings(net, rng.normal(size=(7, 256)), "u1")
        assert seq.embeddings.shape == (7, 10)
        assert seq.utterance_id == "u1"

    def test_dim_follows_hidden(self):
        net = build_embedder(tiny_config(hidden_dim=32))
        seq = extract_frame_embeddings(net, np.zeros((3, 256)))
        assert seq.embeddings.shape == (3, 32)

    def test_identical_frames_identical_rows(self):
        net = build_embedder(tiny_config())
        frame = np.random.default_rng(1).normal(size=256)
        seq = extract_frame_embeddings(net, np.stack([frame, frame]))
        assert np.array_equal(seq.embeddings[0], seq.embeddings[1])

    def test_pre_activation_goes_negative(self):
        # embeddings are taken before the ReLU, so negatives must appear
        rng = np.random.default_rng(2)
        saw_negative = False
        for trial in range(100):
            net = build_embedder(tiny_config(seed=trial))
            seq = extract_frame_embeddings(net, rng.normal(size=(2, 256)))
            if (seq.embeddings < 0).any():
                saw_negative = True
                break
        assert saw_negative

    def test_wrong_frame_length_rejected(self):
        net = build_embedder(tiny_config())
        with pytest.raises(ValueError):
            extract_frame_embeddings(net, np.zeros((2, 300)))


class TestPooling:
    def test_worked_example(self):
        seq = FrameEmbeddingSequence("u", np.array([[1.0, 3.0], [3.0, 5.0]]))
        assert np.array_equal(pool_functionals(seq).vector, [2.0, 4.0, 1.0, 1.0])

    def test_single_frame_zero_std(self):
        seq = FrameEmbeddingSequence("u", np.array([[1.5, -2.0, 0.25]]))
        pooled = pool_functionals(seq).vector
        assert np.array_equal(pooled, [1.5, -2.0, 0.25, 0.0, 0.0, 0.0])

    def test_dim_ten_pools_to_twenty(self):
        rng = np.random.default_rng(0)
        seq = FrameEmbeddingSequence("u", rng.normal(size=(5, 10)))
        assert pool_functionals(seq).vector.shape == (20,)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            e = rng.normal(size=(int(rng.integers(1, 9)), int(rng.integers(1, 7))))
            got = pool_functionals(FrameEmbeddingSequence("u", e)).vector
            want = []
            for j in range(e.shape[1]):
                want.append(sum(e[:, j]) / e.shape[0])
            for j in range(e.shape[1]):
                m = sum(e[:, j]) / e.shape[0]
                want.append((sum((v - m) ** 2 for v in e[:, j]) / e.shape[0]) ** 0.5)
            assert np.abs(got - np.array(want)).max() < 1e-12

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        e = rng.normal(size=(8, 4))
        a = pool_functionals(FrameEmbeddingSequence("u", e)).vector
        b = pool_functionals(
            FrameEmbeddingSequence("u", e[rng.permutation(8)])
        ).vector
        assert np.abs(a - b).max() <= 1e-12

    def test_scaling_equivariance(self):
        rng = np.random.default_rng(3)
        e = rng.normal(size=(6, 5))
        base = pool_functionals(FrameEmbeddingSequence("u", e)).vector
        scaled = pool_functionals(FrameEmbeddingSequence("u", 2.0 * e)).vector
        assert np.abs(scaled - 2.0 * base).max() <= 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            FrameEmbeddingSequence("u", np.zeros((0, 4)))


class TestClassifyEval:
    def test_perfect_and_frame_level_equivalence(self):
        net = build_embedder(tiny_config())
        rng = np.random.default_rng(0)
        frames = {f"u{i}": rng.normal(size=(1, 256)) for i in range(8)}
        # use the model's own single-frame argmax as the label: perfect score
        labels = {}
        for utt_id, f in frames.items():
            probs, _ = nn.forward(net, f[:, None, :])
            labels[utt_id] = int(probs[0].argmax())
        uar, war, cm = classify_eval(net, frames, labels)
        assert uar == 1.0 and war == 1.0
        assert cm.total == 8

    def test_mean_softmax_aggregation(self):
        net = build_embedder(tiny_config())
        rng = np.random.default_rng(1)
        f = rng.normal(size=(5, 256))
        probs, _ = nn.forward(net, f[:, None, :])
        expected = int(probs.mean(axis=0).argmax())
        uar, war, _ = classify_eval(net, {"u": f}, {"u": expected})
        assert uar == 1.0 and war == 1.0

    def test_unknown_label_rejected(self):
        net = build_embedder(tiny_config())
        with pytest.raises(ValueError):
            classify_eval(net, {"u": np.zeros((1, 256))}, {"u": 4})


class TestFilterResponse:
    def _net_with_kernels(self, kernels):
        kernels = np.asarray(kernels, dtype=np.float64)
        cfg = tiny_config(
            conv_stack=((kernels.shape[0], kernels.shape[1], 8),)
        )
        net = build_embedder(cfg)
        net.params[0]["w"][...] = kernels[:, None, :]
        return net

    def test_impulse_kernel_flat(self):
        impulse = np.zeros((1, 16))
        impulse[0, 0] = 1.0
        resp = cumulative_frequency_response(self._net_with_kernels(impulse), 64)
        assert np.abs(resp.magnitude - 1.0).max() < 1e-12

    def test_first_difference_nulls_dc(self):
        resp = cumulative_frequency_response(
            self._net_with_kernels([[1.0, -1.0]]), 64
        )
        assert resp.magnitude[0] == pytest.approx(0.0, abs=1e-12)

    def test_matches_direct_dft_oracle(self):
        rng = np.random.default_rng(4)
        net = build_embedder(
            tiny_config(conv_stack=((6, 64, 8), (4, 4, 2)), seed=9)
        )
        n_fft = 512
        resp = cumulative_frequency_response(net, n_fft)
        # direct O(n^2) DFT: explicit cos/sin sums per bin
        kernels = net.params[0]["w"].reshape(-1, 64)
        bins = np.arange(n_fft // 2 + 1)
        n_idx = np.arange(n_fft)
        angles = 2.0 * np.pi * bins[:, None] * n_idx[None, :] / n_fft
        total = np.zeros(n_fft // 2 + 1)
        for kernel in kernels:
            padded = np.zeros(n_fft)
            padded[:64] = kernel
            re = (np.cos(angles) * padded).sum(axis=1)
            im = -(np.sin(angles) * padded).sum(axis=1)
            total += np.sqrt(re**2 + im**2)
        total /= total.max()
        assert np.abs(resp.magnitude - total).max() < 1e-9

    def test_normalized_peak_and_bins(self):
        rng = np.random.default_rng(5)
        net = self._net_with_kernels(rng.normal(size=(3, 16)))
        resp = cumulative_frequency_response(net, 256, sample_rate_hz=FS)
        assert resp.magnitude.max() == pytest.approx(1.0, abs=1e-15)
        assert resp.magnitude.min() >= 0.0
        assert resp.bin_hz[0] == 0.0
        assert resp.bin_hz[-1] == FS / 2

    def test_non_conv_first_layer_rejected(self):
        net = nn.build_network([nn.LayerSpec("dense", in_dim=4, out_dim=2)], 0)
        with pytest.raises(ValueError):
            cumulative_frequency_response(net, 64)


class TestEmbeddingFiles:
    def test_frame_level_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        data = {
            "utt_b": rng.normal(size=(3, 8)).astype(np.float32),
            "utt_a": rng.normal(size=(5, 8)).astype(np.float32),
        }
        path = tmp_path / "emb.bemb"
        save_external_embeddings(path, data, frame_level=True)
        loaded = load_external_embeddings(path)
        assert loaded.frame_level
        assert set(loaded.by_id) == {"utt_a", "utt_b"}
        for utt_id, rows in data.items():
            assert np.allclose(
                loaded.by_id[utt_id].embeddings, rows.astype(np.float64)
            )

    def test_pooled_dims_double(self, tmp_path):
        rng = np.random.default_rng(1)
        for dim, pooled_dim in [(1024, 2048), (768, 1536)]:
            path = tmp_path / f"d{dim}.bemb"
            save_external_embeddings(
                path, {"u": rng.normal(size=(4, dim))}, frame_level=True
            )
            pooled = load_external_embeddings(path).pooled()
            assert pooled["u"].vector.shape == (pooled_dim,)

    def test_utterance_level_round_trip(self, tmp_path):
        path = tmp_path / "u.bemb"
        save_external_embeddings(
            path, {"u": np.arange(6, dtype=np.float32)}, frame_level=False
        )
        loaded = load_external_embeddings(path)
        assert not loaded.frame_level
        assert np.allclose(loaded.by_id["u"].vector, np.arange(6))
        assert np.allclose(loaded.pooled()["u"].vector, np.arange(6))

    def test_truncated_names_byte_offset(self, tmp_path):
        path = tmp_path / "t.bemb"
        save_external_embeddings(
            path, {"u": np.zeros((2, 4), dtype=np.float32)}, frame_level=True
        )
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 8])
        with pytest.raises(ValueError, match=r"byte \d+"):
            load_external_embeddings(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bemb"
        path.write_bytes(b"XEMB" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_external_embeddings(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "v.bemb"
        save_external_embeddings(path, {"u": np.zeros((1, 2))})
        raw = bytearray(path.read_bytes())
        raw[4:8] = (9).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            load_external_embeddings(path)

    def test_inconsistent_dims_rejected(self, tmp_path):
        # hand-build a file whose second utterance changes dimension
        import struct

        out = bytearray()
        out += b"BEMB" + struct.pack("<I", 1) + struct.pack("<B", 1)
        out += struct.pack("<I", 2)
        for utt_id, dim in [("a", 4), ("b", 5)]:
            enc = utt_id.encode()
            out += struct.pack("<I", len(enc)) + enc
            out += struct.pack("<II", 1, dim)
            out += np.zeros(dim, dtype="<f4").tobytes()
        path = tmp_path / "mix.bemb"
        path.write_bytes(bytes(out))
        with pytest.raises(ValueError, match="inconsistent"):
            load_external_embeddings(path)
