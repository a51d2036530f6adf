"""Dataset manifests, synthetic corpora, experiment runs, and the CLI.

Every command reads a flat key=value config file; the only positional
arguments are the subcommand and the config path.  Library functions take
explicit seeds or generators and never touch global random state.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import embedder, metrics, mtl, nn, signal
from .metrics import EMOTION_NAMES, N_COUNTRIES, N_EMOTIONS

SAMPLE_RATE_HZ = 16000
SPLITS = ("train", "val", "test")

MANIFEST_COLUMNS = (
    ["utterance_id", "speaker_id", "split", "country", "age"]
    + list(EMOTION_NAMES)
)

# Synthetic corpus layout in frequency: the country rides on one of four
# low carriers, each emotion intensity is the energy of one narrow noise
# band relative to an always-on reference band, age sets both the rate and
# the on-fraction of the on/off gate, and each speaker adds a faint tone.
COUNTRY_CARRIERS_HZ = (1000.0, 1400.0, 1800.0, 2200.0)
EMOTION_BAND_CENTERS_HZ = tuple(2600.0 + 400.0 * k for k in range(N_EMOTIONS))
REFERENCE_BAND_HZ = 6600.0
BAND_HALF_WIDTH_HZ = 100.0
REFERENCE_BAND_RMS = 0.3
CARRIER_AMPLITUDE = 0.35
FLOOR_NOISE_RMS = 0.05
AGE_YEARS_RANGE = (18.0, 39.0)
AGE_RATE_RANGE_HZ = (3.0, 24.0)
AGE_DUTY_RANGE = (0.35, 0.65)
SPEAKER_TONE_RANGE_HZ = (6900.0, 7700.0)
SPEAKER_TONE_AMP_RANGE = (0.005, 0.015)
DOMINANT_INTENSITY_RANGE = (0.75, 1.0)
OTHER_INTENSITY_MAX = 0.12


@dataclass(frozen=True)
class LabelRecord:
    """One manifest row."""

    utterance_id: str
    speaker_id: str
    split: str
    country: int
    age_years: float
    intensities: tuple

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if not 0 <= self.country < N_COUNTRIES:
            raise ValueError(f"country {self.country} out of range")
        values = tuple(float(v) for v in self.intensities)
        if len(values) != N_EMOTIONS:
            raise ValueError(f"expected {N_EMOTIONS} intensities")
        if min(values) < 0.0 or max(values) > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        object.__setattr__(self, "intensities", values)

    def labels(self) -> dict:
        return {
            "emotions": list(self.intensities),
            "age": self.age_years,
            "country": self.country,
        }


def parse_manifest(path: str | Path, allow_age_outside_range: bool = False):
    """Read and validate manifest rows; errors carry the file row number."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            missing = sorted(set(MANIFEST_COLUMNS) - set(header or []))
            raise ValueError(f"manifest header missing columns: {missing}")
        records = []
        seen = set()
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ValueError(f"row {row_number}: wrong field count")
            try:
                record = LabelRecord(
                    utterance_id=row[0],
                    speaker_id=row[1],
                    split=row[2],
                    country=int(row[3]),
                    age_years=float(row[4]),
                    intensities=tuple(float(v) for v in row[5:]),
                )
                low, high = AGE_YEARS_RANGE
                if not allow_age_outside_range and not low <= record.age_years <= high:
                    raise ValueError(
                        f"age {record.age_years} outside [{low}, {high}]"
                    )
            except ValueError as exc:
                raise ValueError(f"row {row_number}: {exc}") from exc
            if record.utterance_id in seen:
                raise ValueError(
                    f"row {row_number}: duplicate utterance id"
                    f" {record.utterance_id!r}"
                )
            seen.add(record.utterance_id)
            records.append(record)
    return records


def serialize_manifest(records, path: str | Path) -> None:
    """Write rows in the given order; floats keep full precision."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow(
                [r.utterance_id, r.speaker_id, r.split, r.country, r.age_years]
                + [str(v) for v in r.intensities]
            )


# ---------------------------------------------------------------------------
# synthetic corpus


def _band_noise(rng, n: int, center_hz: float) -> np.ndarray:
    """Unit-energy noise confined to center +- BAND_HALF_WIDTH_HZ."""
    spectrum = np.fft.rfft(rng.normal(size=n))
    freqs = np.fft.rfftfreq(n, d=1.0 / SAMPLE_RATE_HZ)
    mask = (freqs >= center_hz - BAND_HALF_WIDTH_HZ) & (
        freqs < center_hz + BAND_HALF_WIDTH_HZ
    )
    spectrum[~mask] = 0.0
    return np.fft.irfft(spectrum, n=n)


def _scaled_to_gated_energy(y: np.ndarray, gate: np.ndarray, energy: float):
    """Scale y so that the energy of y*gate is exactly the target.

    The gate keeps a random fraction of any noise realization, so hitting
    band-energy targets on the gated signal requires scaling against the
    gated support; this is what makes intensity labels exactly the
    realized gated band-energy ratios.
    """
    realized = float(np.sum((y * gate) ** 2))
    return y * np.sqrt(energy / realized)


def age_to_rate_hz(age_years: float) -> float:
    """Linear map from the age range onto the modulation-rate range."""
    (a_lo, a_hi), (r_lo, r_hi) = AGE_YEARS_RANGE, AGE_RATE_RANGE_HZ
    return r_lo + (age_years - a_lo) * (r_hi - r_lo) / (a_hi - a_lo)


def age_to_duty(age_years: float) -> float:
    """Linear map from the age range onto the gate on-fraction range."""
    (a_lo, a_hi), (d_lo, d_hi) = AGE_YEARS_RANGE, AGE_DUTY_RANGE
    return d_lo + (age_years - a_lo) * (d_hi - d_lo) / (a_hi - a_lo)


def _speaker_splits(n_speakers: int, rng) -> list[str]:
    """Speaker-disjoint split assignment at roughly 70:15:15."""
    n_val = max(1, round(0.15 * n_speakers))
    n_test = max(1, round(0.15 * n_speakers))
    if n_val + n_test >= n_speakers:
        n_val = n_test = 1
    order = rng.permutation(n_speakers)
    out = ["train"] * n_speakers
    for i in order[:n_val]:
        out[i] = "val"
    for i in order[n_val : n_val + n_test]:
        out[i] = "test"
    return out


def synth_dataset(n_utterances: int, n_speakers: int, seed: int):
    """Generate a labeled corpus whose labels are recoverable by design.

    Utterances are 0.5-1.5 s at 16 kHz.  Speakers are assigned countries
    in a balanced tile and each cycles through dominant emotion classes,
    so any speaker subset covers every class roughly evenly.  Returns
    (waveforms by id, manifest records).
    """
    if n_speakers < 4:
        raise ValueError("need at least 4 speakers to cover every country")
    if n_utterances < n_speakers:
        raise ValueError("need at least one utterance per speaker")
    rng = np.random.default_rng(seed)

    speaker_ids = [f"spk{i:03d}" for i in range(n_speakers)]
    countries = np.tile(np.arange(N_COUNTRIES), n_speakers)[:n_speakers]
    rng.shuffle(countries)
    tone_hz = rng.uniform(*SPEAKER_TONE_RANGE_HZ, size=n_speakers)
    tone_amp = rng.uniform(*SPEAKER_TONE_AMP_RANGE, size=n_speakers)
    splits = _speaker_splits(n_speakers, rng)
    class_cycles = [rng.permutation(N_EMOTIONS) for _ in range(n_speakers)]
    next_class = [0] * n_speakers

    speaker_of = np.arange(n_utterances) % n_speakers
    rng.shuffle(speaker_of)

    waveforms = {}
    records = []
    for i in range(n_utterances):
        s = int(speaker_of[i])
        dominant = int(class_cycles[s][next_class[s] % N_EMOTIONS])
        next_class[s] += 1

        duration = rng.uniform(0.5, 1.5)
        n = int(round(duration * SAMPLE_RATE_HZ))
        t = np.arange(n) / SAMPLE_RATE_HZ
        age = rng.uniform(*AGE_YEARS_RANGE)

        intensities = rng.uniform(0.0, OTHER_INTENSITY_MAX, size=N_EMOTIONS)
        intensities[dominant] = rng.uniform(*DOMINANT_INTENSITY_RANGE)

        # age rides on the gate twice: modulation rate and on-fraction
        gate = (
            np.cos(
                2.0 * np.pi * age_to_rate_hz(age) * t
                + rng.uniform(0.0, 2.0 * np.pi)
            )
            >= np.cos(np.pi * age_to_duty(age))
        ).astype(np.float64)

        reference_energy = REFERENCE_BAND_RMS**2 * n / 2.0
        x = _scaled_to_gated_energy(
            _band_noise(rng, n, REFERENCE_BAND_HZ), gate, reference_energy
        )
        for k in range(N_EMOTIONS):
            x += _scaled_to_gated_energy(
                _band_noise(rng, n, EMOTION_BAND_CENTERS_HZ[k]),
                gate,
                intensities[k] * reference_energy,
            )
        x += CARRIER_AMPLITUDE * np.sin(
            2.0 * np.pi * COUNTRY_CARRIERS_HZ[countries[s]] * t
            + rng.uniform(0.0, 2.0 * np.pi)
        )
        x += tone_amp[s] * np.sin(
            2.0 * np.pi * tone_hz[s] * t + rng.uniform(0.0, 2.0 * np.pi)
        )
        x = x * gate + FLOOR_NOISE_RMS * rng.normal(size=n)

        utt_id = f"u{i:05d}"
        waveforms[utt_id] = signal.Waveform(x, SAMPLE_RATE_HZ)
        records.append(
            LabelRecord(
                utterance_id=utt_id,
                speaker_id=speaker_ids[s],
                split=splits[s],
                country=int(countries[s]),
                age_years=float(age),
                intensities=tuple(intensities),
            )
        )
    return waveforms, records


# ---------------------------------------------------------------------------
# experiment configuration

DEFAULT_CONV_STACK = ((24, 64, 16), (16, 8, 2), (32, 5, 2), (32, 5, 2))
DEFAULT_HIDDEN = {"ER": 32, "CR": 8}


@dataclass(frozen=True)
class FeatureSource:
    """One feature stream: a trained frame embedder or an embedding file."""

    name: str
    kind: str = "embedder"
    # embedder settings
    task: str = "ER"
    input_kind: str = "raw"
    conv_stack: tuple = DEFAULT_CONV_STACK
    hidden_dim: int = 0  # 0 means the per-task default
    frame_len_samples: int = 4000
    train_hop_samples: int = 1600
    extract_hop_samples: int = 200
    input_gain: float = 4.0
    batch_size: int = 16
    max_epochs: int = 60
    initial_lr: float = 1e-1
    grad_clip: float = 5.0
    crossval_ratio: float = 0.9
    min_crossval_accuracy: float = 0.85
    max_tries: int = 4
    # external settings
    path: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("embedder", "external"):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "external" and not self.path:
            raise ValueError(f"source {self.name!r} needs a path")
        if self.hidden_dim == 0 and self.kind == "embedder":
            object.__setattr__(self, "hidden_dim", DEFAULT_HIDDEN[self.task])

    def embedder_config(self, seed: int) -> embedder.EmbedderConfig:
        return embedder.EmbedderConfig(
            task=self.task,
            input_kind=self.input_kind,
            conv_stack=self.conv_stack,
            hidden_dim=self.hidden_dim,
            frame_len_samples=self.frame_len_samples,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            initial_lr=self.initial_lr,
            grad_clip=self.grad_clip,
            seed=seed,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    """A full run: feature sources, one MTL head config, seeds, outputs."""

    manifest: str
    wav_dir: str
    output_dir: str
    sources: tuple
    mtl_preset: str = "Sys-1"
    # Pooled utterance sets are tiny, so the MTL overfits its training
    # speakers without an L2 pull; 0 restores the module default.
    mtl_weight_decay: float = 1e-3
    seeds: tuple = (0,)
    hybrid: mtl.HybridSpec | None = None

    def __post_init__(self) -> None:
        if not self.sources:
            raise ValueError("need at least one feature source")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.mtl_preset not in mtl.PRESETS:
            raise ValueError(f"unknown preset {self.mtl_preset!r}")
        if self.hybrid is not None:
            names = {s.name for s in self.sources}
            for source in (
                self.hybrid.emotion_source,
                self.hybrid.age_source,
                self.hybrid.country_source,
            ):
                if source not in names:
                    raise ValueError(f"hybrid names unknown source {source!r}")


def parse_kv(path: str | Path) -> dict:
    """Flat key=value lines; '#' starts a comment; later keys win."""
    out = {}
    for line_number, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {line_number}: expected key=value")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _parse_conv_stack(text: str) -> tuple:
    """Rows like 24x64x16,16x8x2 as (out_channels, kernel_len, stride)."""
    rows = []
    for part in text.replace(" ", "").split(","):
        dims = part.split("x")
        if len(dims) != 3:
            raise ValueError(f"bad conv stack row {part!r}")
        rows.append(tuple(int(v) for v in dims))
    return tuple(rows)


_SOURCE_FIELD_TYPES = {
    "kind": str,
    "task": str,
    "input_kind": str,
    "conv_stack": _parse_conv_stack,
    "hidden_dim": int,
    "frame_len_samples": int,
    "train_hop_samples": int,
    "extract_hop_samples": int,
    "input_gain": float,
    "batch_size": int,
    "max_epochs": int,
    "initial_lr": float,
    "grad_clip": float,
    "crossval_ratio": float,
    "min_crossval_accuracy": float,
    "max_tries": int,
    "path": str,
}


def experiment_config_from_kv(kv: dict) -> ExperimentConfig:
    for key in ("manifest", "wav_dir", "output_dir", "sources"):
        if key not in kv:
            raise ValueError(f"config is missing required key {key!r}")
    sources = []
    for name in kv["sources"].replace(",", " ").split():
        prefix = f"source.{name}."
        fields = {}
        for key, value in kv.items():
            if key.startswith(prefix):
                field_name = key[len(prefix):]
                if field_name not in _SOURCE_FIELD_TYPES:
                    raise ValueError(f"unknown source key {key!r}")
                fields[field_name] = _SOURCE_FIELD_TYPES[field_name](value)
        sources.append(FeatureSource(name=name, **fields))
    hybrid = None
    if any(k.startswith("hybrid.") for k in kv):
        hybrid = mtl.HybridSpec(
            emotion_source=kv["hybrid.emotion_source"],
            age_source=kv["hybrid.age_source"],
            country_source=kv["hybrid.country_source"],
        )
    seeds = tuple(int(v) for v in kv.get("seeds", "0").replace(",", " ").split())
    return ExperimentConfig(
        manifest=kv["manifest"],
        wav_dir=kv["wav_dir"],
        output_dir=kv["output_dir"],
        sources=tuple(sources),
        mtl_preset=kv.get("mtl_preset", "Sys-1"),
        mtl_weight_decay=float(kv.get("mtl_weight_decay", "0.001")),
        seeds=seeds,
        hybrid=hybrid,
    )


# ---------------------------------------------------------------------------
# experiment pipeline


def _normalized_input(wave: signal.Waveform, source: FeatureSource) -> np.ndarray:
    x = wave.samples
    if source.input_kind == "zff":
        x = signal.zff_filter(wave).samples
    x = (x - x.mean()) / (x.std() + 1e-8)
    return x * source.input_gain


def _frame_matrix(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    if x.shape[0] < frame_len:
        padded = np.zeros(frame_len)
        padded[: x.shape[0]] = x
        return padded[None, :]
    n = (x.shape[0] - frame_len) // hop + 1
    return np.stack([x[i * hop : i * hop + frame_len] for i in range(n)])


def _source_label(record: LabelRecord, task: str) -> int:
    if task == "ER":
        return int(np.argmax(record.intensities))
    return record.country


def _crossval_speakers(speakers, ratio: float, seed: int):
    """Deterministic speaker holdout keeping at least two on each side."""
    ordered = sorted(set(speakers))
    if len(ordered) < 2:
        raise ValueError("need at least two speakers for a crossval split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ordered))
    cut = int(round(ratio * len(ordered)))
    cut = min(len(ordered) - 2, max(1, cut)) if len(ordered) > 2 else 1
    train = {ordered[i] for i in order[:cut]}
    crossval = {ordered[i] for i in order[cut:]}
    return train, crossval


def _train_source_embedder(source, records, waveforms, seed: int):
    """Train one frame classifier, retrying on weak crossval accuracy.

    Retries draw fresh initialization seeds on a fixed schedule; the
    attempt with the best crossval accuracy wins if none clears the bar.
    """
    train_records = [r for r in records if r.split == "train"]
    fit_speakers, cv_speakers = _crossval_speakers(
        [r.speaker_id for r in train_records], source.crossval_ratio, seed + 29
    )

    inputs = {
        r.utterance_id: _normalized_input(waveforms[r.utterance_id], source)
        for r in train_records
    }
    fit_set, cv_set, cv_frames, cv_labels = [], [], {}, {}
    for r in train_records:
        frames = _frame_matrix(
            inputs[r.utterance_id], source.frame_len_samples,
            source.train_hop_samples,
        )
        label = _source_label(r, source.task)
        if r.speaker_id in fit_speakers:
            fit_set.append((frames, label))
        else:
            cv_set.append((frames, label))
            cv_frames[r.utterance_id] = frames
            cv_labels[r.utterance_id] = label

    best = None
    for attempt in range(source.max_tries):
        cfg = source.embedder_config(seed + 1000 * attempt)
        net, history = embedder.train_embedder(cfg, fit_set, cv_set)
        _, accuracy, _ = embedder.classify_eval(net, cv_frames, cv_labels)
        if best is None or accuracy > best[1]:
            best = (net, accuracy, history, attempt)
        if accuracy >= source.min_crossval_accuracy:
            break
    net, accuracy, history, attempt = best
    info = {
        "crossval_accuracy": accuracy,
        "attempts": attempt + 1,
        "epochs": len(history.crossval_loss) - 1,
        "warnings": list(history.warnings),
    }
    return net, info


def _extract_pooled(net, records, waveforms, source) -> dict:
    pooled = {}
    for r in records:
        x = _normalized_input(waveforms[r.utterance_id], source)
        frames = _frame_matrix(
            x, source.frame_len_samples, source.extract_hop_samples
        )
        seq = embedder.extract_frame_embeddings(net, frames, r.utterance_id)
        pooled[r.utterance_id] = embedder.pool_functionals(seq)
    return pooled


def _load_waveforms(records, wav_dir: str | Path) -> dict:
    return {
        r.utterance_id: signal.load_wav(Path(wav_dir) / f"{r.utterance_id}.wav")
        for r in records
    }


@dataclass
class ExperimentSummary:
    """Aggregate over seeds plus every per-seed report."""

    val_s_mtl: list = field(default_factory=list)
    test_s_mtl: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)

    def mean_std(self, split: str):
        values = self.val_s_mtl if split == "val" else self.test_s_mtl
        return float(np.mean(values)), float(np.std(values))

    def as_text(self) -> str:
        lines = []
        for seed in sorted(self.reports):
            row = [f"seed={seed}"]
            for split in ("val", "test"):
                row.append(f"{split}_s_mtl={self.reports[seed][split].s_mtl:.6f}")
            lines.append(" ".join(row))
        for split in ("val", "test"):
            mean, std = self.mean_std(split)
            lines.append(f"{split}_s_mtl_mean={mean:.6f}")
            lines.append(f"{split}_s_mtl_std={std:.6f}")
        return "\n".join(lines) + "\n"


def _run_stage(stage: str, seed: int, fn):
    try:
        return fn()
    except Exception as exc:
        raise RuntimeError(
            f"stage {stage!r} failed for seed {seed}: {exc}"
        ) from exc


def _seed_features(source, records, waveforms, seed, seed_dir):
    """Pooled utterance embeddings for one source, persisting any model."""
    if source.kind == "external":
        loaded = embedder.load_external_embeddings(source.path)
        pooled = loaded.pooled()
        missing = sorted({r.utterance_id for r in records} - set(pooled))
        if missing:
            raise ValueError(f"embedding file lacks utterances: {missing}")
        return {r.utterance_id: pooled[r.utterance_id] for r in records}
    net, info = _train_source_embedder(source, records, waveforms, seed)
    nn.save_network(net, seed_dir / f"embedder_{source.name}.bmtl")
    (seed_dir / f"embedder_{source.name}.txt").write_text(
        "".join(f"{k}={info[k]}\n" for k in sorted(info))
    )
    return _extract_pooled(net, records, waveforms, source)


def _train_and_predict(preset, features, records, seed, model_path, weight_decay):
    """One MTL system: train on the train split, predict val and test."""
    by_split = {
        split: [r for r in records if r.split == split] for split in SPLITS
    }
    train_labels = {r.utterance_id: r.labels() for r in by_split["train"]}
    val_labels = {r.utterance_id: r.labels() for r in by_split["val"]}
    pick = lambda rows: {r.utterance_id: features[r.utterance_id] for r in rows}

    mtl_cfg = mtl.MtlConfig.preset(preset, seed=seed, weight_decay=weight_decay)
    probe = next(iter(features.values()))
    input_dim = (
        probe.vector.shape[0]
        if isinstance(probe, embedder.UtteranceEmbedding)
        else np.asarray(probe).shape[0]
    )
    model = mtl.build_mtl(mtl_cfg, input_dim)
    model, _ = mtl.train_mtl(
        model, pick(by_split["train"]), train_labels, mtl_cfg,
        pick(by_split["val"]), val_labels,
    )
    mtl.save_mtl(model, model_path)
    return {
        split: mtl.predict_set(model, pick(by_split[split]))
        for split in ("val", "test")
    }


def run_experiment(cfg: ExperimentConfig) -> ExperimentSummary:
    """Per-seed pipeline with persisted models, predictions, and reports."""
    records = parse_manifest(cfg.manifest)
    waveforms = None
    if any(s.kind == "embedder" for s in cfg.sources):
        waveforms = _load_waveforms(records, cfg.wav_dir)
    labels = {
        split: {
            r.utterance_id: r.labels() for r in records if r.split == split
        }
        for split in ("val", "test")
    }

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = ExperimentSummary()

    for seed in cfg.seeds:
        seed_dir = out_dir / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)

        pooled = {
            source.name: _run_stage(
                f"features:{source.name}", seed,
                lambda s=source: _seed_features(
                    s, records, waveforms, seed, seed_dir
                ),
            )
            for source in cfg.sources
        }

        if cfg.hybrid is None:
            features = (
                pooled[cfg.sources[0].name]
                if len(cfg.sources) == 1
                else mtl.early_fuse([pooled[s.name] for s in cfg.sources])
            )
            predictions = _run_stage(
                "mtl", seed,
                lambda: _train_and_predict(
                    cfg.mtl_preset, features, records, seed,
                    seed_dir / "mtl.mtlb", cfg.mtl_weight_decay,
                ),
            )
        else:
            per_system = {
                source.name: _run_stage(
                    f"mtl:{source.name}", seed,
                    lambda s=source: _train_and_predict(
                        cfg.mtl_preset, pooled[s.name], records, seed,
                        seed_dir / f"mtl_{s.name}.mtlb", cfg.mtl_weight_decay,
                    ),
                )
                for source in cfg.sources
            }
            predictions = {
                split: mtl.hybrid_fuse(
                    cfg.hybrid,
                    {name: preds[split] for name, preds in per_system.items()},
                )
                for split in ("val", "test")
            }
            for name, preds in per_system.items():
                for split in ("val", "test"):
                    mtl.write_prediction_table(
                        seed_dir / f"predictions_{split}_{name}.csv",
                        preds[split],
                    )

        summary.reports[seed] = {}
        for split in ("val", "test"):
            mtl.write_prediction_table(
                seed_dir / f"predictions_{split}.csv", predictions[split]
            )
            report = _run_stage(
                f"evaluate:{split}", seed,
                lambda s=split: metrics.full_report(
                    {
                        utt_id: pred.as_record()
                        for utt_id, pred in predictions[s].items()
                    },
                    labels[s],
                ),
            )
            (seed_dir / f"report_{split}.txt").write_text(report.as_text())
            summary.reports[seed][split] = report
        summary.val_s_mtl.append(summary.reports[seed]["val"].s_mtl)
        summary.test_s_mtl.append(summary.reports[seed]["test"].s_mtl)

    (out_dir / "summary.txt").write_text(summary.as_text())
    return summary


def emit_filter_plot(
    model_path: str | Path,
    out_path: str | Path,
    n_fft: int = 512,
    sample_rate_hz: int = 16000,
) -> None:
    """Two-column plot data for the first conv layer's summed response."""
    net = nn.load_network(model_path)
    response = embedder.cumulative_frequency_response(net, n_fft, sample_rate_hz)
    with open(out_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frequency_hz", "normalized_magnitude"])
        for hz, mag in zip(response.bin_hz, response.magnitude):
            writer.writerow([f"{hz:.9g}", f"{mag:.9g}"])


# ---------------------------------------------------------------------------
# command-line entry points


def _need(kv: dict, key: str) -> str:
    if key not in kv:
        raise ValueError(f"config is missing required key {key!r}")
    return kv[key]


def _source_from_kv(kv: dict, name: str = "main") -> FeatureSource:
    fields = {}
    for key, parse in _SOURCE_FIELD_TYPES.items():
        if key in kv:
            fields[key] = parse(kv[key])
    return FeatureSource(name=name, **fields)


def _cmd_synth(kv: dict) -> None:
    out_dir = Path(_need(kv, "out_dir"))
    waveforms, records = synth_dataset(
        int(_need(kv, "n_utterances")),
        int(_need(kv, "n_speakers")),
        int(kv.get("seed", "0")),
    )
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    for utt_id, wave in waveforms.items():
        signal.save_wav(wav_dir / f"{utt_id}.wav", wave)
    serialize_manifest(records, out_dir / "manifest.csv")
    print(
        f"wrote {len(records)} utterances from"
        f" {len({r.speaker_id for r in records})} speakers to {out_dir}"
    )


def _cmd_train_embedder(kv: dict) -> None:
    records = parse_manifest(_need(kv, "manifest"))
    waveforms = _load_waveforms(records, _need(kv, "wav_dir"))
    source = _source_from_kv(kv)
    net, info = _train_source_embedder(
        source, records, waveforms, int(kv.get("seed", "0"))
    )
    nn.save_network(net, _need(kv, "out_model"))
    print(
        f"crossval accuracy {info['crossval_accuracy']:.3f}"
        f" after {info['attempts']} attempt(s)"
    )


def _cmd_extract(kv: dict) -> None:
    net = nn.load_network(_need(kv, "model"))
    records = parse_manifest(_need(kv, "manifest"))
    waveforms = _load_waveforms(records, _need(kv, "wav_dir"))
    source = _source_from_kv(kv)
    sequences = {}
    for r in records:
        x = _normalized_input(waveforms[r.utterance_id], source)
        frames = _frame_matrix(
            x, source.frame_len_samples, source.extract_hop_samples
        )
        seq = embedder.extract_frame_embeddings(net, frames, r.utterance_id)
        sequences[r.utterance_id] = seq.embeddings
    embedder.save_external_embeddings(
        _need(kv, "out"), sequences, frame_level=True
    )
    print(f"extracted {len(sequences)} utterances")


def _cmd_pool(kv: dict) -> None:
    loaded = embedder.load_external_embeddings(_need(kv, "in"))
    pooled = loaded.pooled()
    embedder.save_external_embeddings(
        _need(kv, "out"),
        {utt_id: emb.vector for utt_id, emb in pooled.items()},
        frame_level=False,
    )
    print(f"pooled {len(pooled)} utterances")


def _load_pooled_sets(paths_text: str) -> list:
    sets = []
    for path in paths_text.replace(",", " ").split():
        sets.append(embedder.load_external_embeddings(path).pooled())
    return sets


def _cmd_train_mtl(kv: dict) -> None:
    records = parse_manifest(_need(kv, "manifest"))
    sets = _load_pooled_sets(_need(kv, "embeddings"))
    features = sets[0] if len(sets) == 1 else mtl.early_fuse(sets)
    preset = kv.get("mtl_preset", "Sys-1")
    predictions = _train_and_predict(
        preset, features, records, int(kv.get("seed", "0")),
        _need(kv, "out_model"), float(kv.get("weight_decay", "0.001")),
    )
    if "out_predictions" in kv:
        mtl.write_prediction_table(kv["out_predictions"], predictions["val"])
    print(f"trained {preset} model on {len(records)} records")


def _cmd_evaluate(kv: dict) -> None:
    predictions = mtl.read_prediction_table(_need(kv, "predictions"))
    records = parse_manifest(_need(kv, "manifest"))
    wanted = kv.get("split")
    labels = {
        r.utterance_id: r.labels()
        for r in records
        if (wanted is None or r.split == wanted)
        and r.utterance_id in predictions
    }
    report = metrics.full_report(
        {utt_id: pred.as_record() for utt_id, pred in predictions.items()
         if utt_id in labels},
        labels,
    )
    if "out" in kv:
        Path(kv["out"]).write_text(report.as_text())
    print(report.as_text(), end="")


def _cmd_fuse_early(kv: dict) -> None:
    fused = mtl.early_fuse(_load_pooled_sets(_need(kv, "inputs")))
    embedder.save_external_embeddings(_need(kv, "out"), fused, frame_level=False)
    print(f"fused {len(fused)} utterances")


def _cmd_fuse_hybrid(kv: dict) -> None:
    spec = mtl.HybridSpec(
        emotion_source="emotions", age_source="age", country_source="country"
    )
    fused = mtl.hybrid_fuse(
        spec,
        {
            "emotions": mtl.read_prediction_table(_need(kv, "emotion_predictions")),
            "age": mtl.read_prediction_table(_need(kv, "age_predictions")),
            "country": mtl.read_prediction_table(_need(kv, "country_predictions")),
        },
    )
    mtl.write_prediction_table(_need(kv, "out"), fused)
    print(f"fused predictions for {len(fused)} utterances")


def _cmd_filter_plot(kv: dict) -> None:
    emit_filter_plot(
        _need(kv, "model"),
        _need(kv, "out"),
        n_fft=int(kv.get("n_fft", "512")),
        sample_rate_hz=int(kv.get("sample_rate_hz", "16000")),
    )
    print(f"wrote filter response to {kv['out']}")


def _cmd_run(kv: dict) -> None:
    cfg = experiment_config_from_kv(kv)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(
        "".join(f"{k}={kv[k]}\n" for k in sorted(kv))
    )
    summary = run_experiment(cfg)
    print(summary.as_text(), end="")


_COMMANDS = {
    "synth": _cmd_synth,
    "train-embedder": _cmd_train_embedder,
    "extract": _cmd_extract,
    "pool": _cmd_pool,
    "train-mtl": _cmd_train_mtl,
    "evaluate": _cmd_evaluate,
    "fuse-early": _cmd_fuse_early,
    "fuse-hybrid": _cmd_fuse_hybrid,
    "filter-plot": _cmd_filter_plot,
    "run": _cmd_run,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vburst",
        description="Vocal burst analysis pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="path to a key=value config file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override one config key",
        )
    args = parser.parse_args(argv)
    kv = parse_kv(args.config)
    for override in args.set:
        if "=" not in override:
            parser.error(f"--set needs KEY=VALUE, got {override!r}")
        key, value = override.split("=", 1)
        kv[key.strip()] = value.strip()
    try:
        _COMMANDS[args.command](kv)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
