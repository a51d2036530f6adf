"""Exporter suite: encoder geometry, BEMB writing, and the primary round trip."""

import logging
from pathlib import Path

import numpy as np
import pytest
from scipy.io import wavfile

from bemb_export import ExportJob, MODEL_REGISTRY, export, load_model, main
from bemb_export.models import (
    FRAME_HOP,
    FRAME_WINDOW,
    SAMPLE_RATE_HZ,
    encode,
    frame_waveform,
)
from bemb_export.writer import encode_bemb, write_bemb
from vburst import embedder


def write_wav(path: Path, seconds: float = 0.4, seed: int = 0) -> np.ndarray:
    """A short noisy tone on disk; returns the stored samples."""
    rng = np.random.default_rng(seed)
    n = int(SAMPLE_RATE_HZ * seconds)
    t = np.arange(n) / SAMPLE_RATE_HZ
    wave = 0.2 * np.sin(2.0 * np.pi * (300.0 + 40.0 * seed) * t)
    wave = (wave + 0.01 * rng.normal(size=n)).astype(np.float32)
    wavfile.write(path, SAMPLE_RATE_HZ, wave)
    return wave


def make_corpus(root: Path, stems=("clip_a", "clip_b", "clip_c")) -> Path:
    wav_dir = root / "wav"
    wav_dir.mkdir()
    for i, stem in enumerate(stems):
        write_wav(wav_dir / f"{stem}.wav", seed=i)
    return wav_dir


class TestRegistry:
    def test_published_model_widths(self):
        assert MODEL_REGISTRY["wav2vec2-base"].hidden_dim == 768
        assert MODEL_REGISTRY["wav2vec2-base"].n_layers == 12
        assert MODEL_REGISTRY["hubert-large"].hidden_dim == 1024
        assert MODEL_REGISTRY["wavlm-large"].hidden_dim == 1024
        assert MODEL_REGISTRY["hubert-large"].n_layers == 24

    def test_unknown_model_rejected(self):
        with pytest.raises(ValueError, match="unknown model 'notreal'"):
            load_model("notreal")

    def test_same_id_loads_identical_weights(self):
        a = load_model("wav2vec2-base")
        b = load_model("wav2vec2-base")
        assert np.array_equal(a.w_in, b.w_in)
        assert np.array_equal(a.w_mix, b.w_mix)
        assert np.array_equal(a.layer_gain, b.layer_gain)


class TestFraming:
    def test_frame_count_follows_window_hop_grid(self):
        n = 5 * FRAME_HOP + FRAME_WINDOW
        frames = frame_waveform(np.arange(n, dtype=float))
        assert frames.shape == (6, FRAME_WINDOW)
        assert np.array_equal(frames[1], np.arange(FRAME_HOP, FRAME_HOP + FRAME_WINDOW))

    def test_short_input_pads_to_one_frame(self):
        frames = frame_waveform(np.ones(150))
        assert frames.shape == (1, FRAME_WINDOW)
        assert frames[0, :150].sum() == 150.0
        assert frames[0, 150:].sum() == 0.0

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            frame_waveform(np.empty(0))


class TestEncode:
    def test_layer_zero_differs_from_final(self):
        model = load_model("wav2vec2-base")
        rng = np.random.default_rng(1)
        x = rng.normal(size=3 * FRAME_WINDOW)
        first = encode(model, x, layer=0, batch_size=64)
        final = encode(model, x, layer=model.spec.n_layers, batch_size=64)
        assert first.shape == final.shape
        assert not np.allclose(first, final)

    def test_layer_out_of_range_rejected(self):
        model = load_model("wav2vec2-base")
        with pytest.raises(ValueError, match="out of range 0..12"):
            encode(model, np.ones(FRAME_WINDOW), layer=13, batch_size=8)

    def test_batch_size_must_be_positive(self):
        model = load_model("wav2vec2-base")
        with pytest.raises(ValueError, match="batch size"):
            encode(model, np.ones(FRAME_WINDOW), layer=1, batch_size=0)
        with pytest.raises(ValueError, match="batch size"):
            ExportJob("wav2vec2-base", "in", "out.bemb", batch_size=0)

    def test_values_bounded_by_tanh(self):
        model = load_model("hubert-large")
        rng = np.random.default_rng(2)
        h = encode(model, rng.normal(size=2000), layer=5, batch_size=3)
        assert np.all(np.abs(h) <= 1.0)
        assert h.shape[1] == 1024


class TestWriter:
    def test_empty_mapping_rejected(self):
        with pytest.raises(ValueError, match="nothing to write"):
            encode_bemb({})

    def test_mixed_dims_rejected(self):
        bad = {"a": np.ones((2, 4)), "b": np.ones((2, 5))}
        with pytest.raises(ValueError, match="mixed embedding dims"):
            encode_bemb(bad)

    def test_utterance_level_requires_single_row(self):
        with pytest.raises(ValueError, match="one frame"):
            encode_bemb({"a": np.ones((3, 4))}, frame_level=False)

    def test_failed_write_leaves_no_files(self, tmp_path):
        with pytest.raises(ValueError):
            write_bemb(tmp_path / "out.bemb", {"a": np.ones((1, 2, 3))})
        assert list(tmp_path.iterdir()) == []

    def test_random_tables_round_trip_through_primary_loader(self, tmp_path):
        rng = np.random.default_rng(9)
        for case in range(20):
            n_utts = int(rng.integers(1, 6))
            dim = int(rng.integers(1, 40))
            seqs = {
                f"utt_{case}_{i}": rng.normal(size=(int(rng.integers(1, 7)), dim))
                for i in range(n_utts)
            }
            path = tmp_path / f"case_{case}.bemb"
            write_bemb(path, seqs)
            loaded = embedder.load_external_embeddings(path)
            assert loaded.frame_level
            assert set(loaded.by_id) == set(seqs)
            for utt_id, seq in loaded.by_id.items():
                expect = np.asarray(seqs[utt_id], dtype=np.float32)
                assert np.array_equal(seq.embeddings, expect.astype(np.float64))


class TestExport:
    def test_three_wavs_load_in_primary_with_stem_ids(self, tmp_path):
        wav_dir = make_corpus(tmp_path)
        out = tmp_path / "base.bemb"
        count = export(ExportJob("wav2vec2-base", str(wav_dir), str(out)))
        assert count == 3

        loaded = embedder.load_external_embeddings(out)
        assert loaded.frame_level
        assert set(loaded.by_id) == {"clip_a", "clip_b", "clip_c"}
        pooled = loaded.pooled()
        for utt_id, seq in loaded.by_id.items():
            assert seq.embeddings.shape[1] == 768
            assert pooled[utt_id].vector.shape == (1536,)

    @pytest.mark.parametrize("model_id", ["hubert-large", "wavlm-large"])
    def test_large_models_pool_to_double_width(self, tmp_path, model_id):
        wav_dir = make_corpus(tmp_path, stems=("x", "y"))
        out = tmp_path / f"{model_id}.bemb"
        export(ExportJob(model_id, str(wav_dir), str(out)))
        pooled = embedder.load_external_embeddings(out).pooled()
        assert {v.vector.shape for v in pooled.values()} == {(2048,)}

    def test_rerun_is_byte_identical(self, tmp_path):
        wav_dir = make_corpus(tmp_path)
        first = tmp_path / "one.bemb"
        second = tmp_path / "two.bemb"
        export(ExportJob("wav2vec2-base", str(wav_dir), str(first)))
        export(ExportJob("wav2vec2-base", str(wav_dir), str(second)))
        assert first.read_bytes() == second.read_bytes()

    def test_batch_size_does_not_change_output(self, tmp_path):
        wav_dir = make_corpus(tmp_path, stems=("x",))
        small = tmp_path / "small.bemb"
        big = tmp_path / "big.bemb"
        export(ExportJob("wav2vec2-base", str(wav_dir), str(small), batch_size=1))
        export(ExportJob("wav2vec2-base", str(wav_dir), str(big), batch_size=512))
        assert small.read_bytes() == big.read_bytes()

    def test_frame_count_matches_wav_length(self, tmp_path):
        wav_dir = make_corpus(tmp_path, stems=("x",))
        samples = int(SAMPLE_RATE_HZ * 0.4)
        expect_frames = (samples - FRAME_WINDOW) // FRAME_HOP + 1
        out = tmp_path / "x.bemb"
        export(ExportJob("wav2vec2-base", str(wav_dir), str(out)))
        loaded = embedder.load_external_embeddings(out)
        assert loaded.by_id["x"].embeddings.shape == (expect_frames, 768)

    def test_sub_window_wav_yields_single_frame(self, tmp_path):
        wav_dir = tmp_path / "wav"
        wav_dir.mkdir()
        wavfile.write(
            wav_dir / "tiny.wav",
            SAMPLE_RATE_HZ,
            np.full(100, 0.1, dtype=np.float32),
        )
        out = tmp_path / "tiny.bemb"
        export(ExportJob("wav2vec2-base", str(wav_dir), str(out)))
        loaded = embedder.load_external_embeddings(out)
        assert loaded.by_id["tiny"].embeddings.shape == (1, 768)
        pooled = loaded.pooled()["tiny"].vector
        assert np.all(pooled[768:] == 0.0)  # one frame has zero spread

    def test_int_pcm_normalized_to_unit_range(self, tmp_path):
        rng = np.random.default_rng(4)
        wave = (0.3 * rng.normal(size=SAMPLE_RATE_HZ // 4)).clip(-1, 1)
        float_dir = tmp_path / "f"
        int_dir = tmp_path / "i"
        float_dir.mkdir()
        int_dir.mkdir()
        quantized = np.round(wave * np.iinfo(np.int16).max).astype(np.int16)
        wavfile.write(float_dir / "u.wav", SAMPLE_RATE_HZ, quantized / 32767.0)
        wavfile.write(int_dir / "u.wav", SAMPLE_RATE_HZ, quantized)
        f_out = tmp_path / "f.bemb"
        i_out = tmp_path / "i.bemb"
        export(ExportJob("wav2vec2-base", str(float_dir), str(f_out)))
        export(ExportJob("wav2vec2-base", str(int_dir), str(i_out)))
        f_emb = embedder.load_external_embeddings(f_out).by_id["u"].embeddings
        i_emb = embedder.load_external_embeddings(i_out).by_id["u"].embeddings
        assert np.allclose(f_emb, i_emb, atol=1e-5)

    def test_stereo_downmixed_to_mono(self, tmp_path):
        wav_dir = tmp_path / "wav"
        wav_dir.mkdir()
        rng = np.random.default_rng(5)
        stereo = rng.normal(size=(SAMPLE_RATE_HZ // 8, 2)).astype(np.float32)
        wavfile.write(wav_dir / "s.wav", SAMPLE_RATE_HZ, stereo)
        out = tmp_path / "s.bemb"
        assert export(ExportJob("wav2vec2-base", str(wav_dir), str(out))) == 1
        loaded = embedder.load_external_embeddings(out)
        assert loaded.by_id["s"].embeddings.shape[1] == 768

    def test_missing_directory_is_an_error(self, tmp_path):
        with pytest.raises(ValueError, match="does not exist"):
            export(ExportJob("wav2vec2-base", str(tmp_path / "gone"), "o.bemb"))

    def test_directory_without_wavs_is_an_error(self, tmp_path):
        with pytest.raises(ValueError, match="no WAV files"):
            export(ExportJob("wav2vec2-base", str(tmp_path), "o.bemb"))

    def test_unreadable_wav_skipped_with_warning(self, tmp_path, caplog):
        wav_dir = make_corpus(tmp_path, stems=("good",))
        (wav_dir / "broken.wav").write_bytes(b"not audio at all")
        out = tmp_path / "out.bemb"
        with caplog.at_level(logging.WARNING, logger="bemb_export"):
            count = export(ExportJob("wav2vec2-base", str(wav_dir), str(out)))
        assert count == 1
        assert "skipping unreadable broken.wav" in caplog.text
        loaded = embedder.load_external_embeddings(out)
        assert set(loaded.by_id) == {"good"}

    def test_wrong_sample_rate_skipped(self, tmp_path, caplog):
        wav_dir = make_corpus(tmp_path, stems=("good",))
        wavfile.write(
            wav_dir / "slow.wav", 8000, np.zeros(1600, dtype=np.float32)
        )
        out = tmp_path / "out.bemb"
        with caplog.at_level(logging.WARNING, logger="bemb_export"):
            count = export(ExportJob("wav2vec2-base", str(wav_dir), str(out)))
        assert count == 1
        assert "expected 16000 Hz, got 8000" in caplog.text

    def test_nothing_readable_is_an_error(self, tmp_path, caplog):
        wav_dir = tmp_path / "wav"
        wav_dir.mkdir()
        (wav_dir / "junk.wav").write_bytes(b"\x00\x01")
        with caplog.at_level(logging.WARNING, logger="bemb_export"):
            with pytest.raises(ValueError, match="no utterances exported"):
                export(ExportJob("wav2vec2-base", str(wav_dir), "o.bemb"))

    def test_explicit_layer_changes_output(self, tmp_path):
        wav_dir = make_corpus(tmp_path, stems=("x",))
        early = tmp_path / "early.bemb"
        final = tmp_path / "final.bemb"
        export(ExportJob("wav2vec2-base", str(wav_dir), str(early), layer=1))
        export(ExportJob("wav2vec2-base", str(wav_dir), str(final)))
        assert early.read_bytes() != final.read_bytes()


class TestCli:
    def test_main_exports_and_reports_count(self, tmp_path, capsys):
        wav_dir = make_corpus(tmp_path)
        out = tmp_path / "cli.bemb"
        code = main(
            [
                "--model", "wav2vec2-base",
                "--input-dir", str(wav_dir),
                "--output", str(out),
            ]
        )
        assert code == 0
        assert f"exported 3 utterances to {out}" in capsys.readouterr().out
        assert set(embedder.load_external_embeddings(out).by_id) == {
            "clip_a", "clip_b", "clip_c",
        }

    def test_main_reports_errors_on_stderr(self, tmp_path, capsys):
        code = main(
            [
                "--model", "notreal",
                "--input-dir", str(tmp_path),
                "--output", str(tmp_path / "o.bemb"),
            ]
        )
        assert code == 1
        assert "error: unknown model 'notreal'" in capsys.readouterr().err

    def test_main_accepts_layer_and_batch_flags(self, tmp_path, capsys):
        wav_dir = make_corpus(tmp_path, stems=("x",))
        out = tmp_path / "cli.bemb"
        code = main(
            [
                "--model", "hubert-large",
                "--input-dir", str(wav_dir),
                "--output", str(out),
                "--layer", "3",
                "--batch-size", "16",
            ]
        )
        assert code == 0
        loaded = embedder.load_external_embeddings(out)
        assert loaded.by_id["x"].embeddings.shape[1] == 1024
