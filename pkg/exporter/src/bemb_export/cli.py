"""Command line entry: run one export job over a directory of WAVs."""

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from bemb_export.models import SAMPLE_RATE_HZ, encode, load_model
from bemb_export.writer import write_bemb

log = logging.getLogger("bemb_export")


@dataclass(frozen=True)
class ExportJob:
    """One batch run: which model, over which files, to which output."""

    model_id: str
    input_dir: str
    output_path: str
    layer: int | None = None  # None selects the final layer
    batch_size: int = 256

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


def _read_waveform(path: Path) -> np.ndarray:
    """Mono float64 samples at the expected rate; raises on anything else."""
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE_HZ:
        raise ValueError(f"expected {SAMPLE_RATE_HZ} Hz, got {rate}")
    samples = np.asarray(data, dtype=np.float64)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if np.issubdtype(np.asarray(data).dtype, np.integer):
        samples = samples / float(np.iinfo(np.asarray(data).dtype).max)
    if samples.size == 0:
        raise ValueError("empty waveform")
    return samples


def export(job: ExportJob) -> int:
    """Embed every readable WAV under the job's input directory.

    Unreadable files are skipped with a logged warning; finishing with
    nothing exported is an error.  Returns the number of utterances
    written.
    """
    model = load_model(job.model_id)
    layer = model.spec.n_layers if job.layer is None else job.layer
    in_dir = Path(job.input_dir)
    if not in_dir.is_dir():
        raise ValueError(f"input directory {str(in_dir)!r} does not exist")
    wavs = sorted(in_dir.glob("*.wav"))
    if not wavs:
        raise ValueError(f"no WAV files in {str(in_dir)!r}")

    sequences = {}
    for path in wavs:
        try:
            samples = _read_waveform(path)
        except Exception as exc:
            log.warning("skipping unreadable %s: %s", path.name, exc)
            continue
        sequences[path.stem] = encode(model, samples, layer, job.batch_size)
    if not sequences:
        raise ValueError(f"no utterances exported from {str(in_dir)!r}")

    write_bemb(job.output_path, sequences, frame_level=True)
    return len(sequences)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bemb-export",
        description="Export frame-level speech embeddings to a BEMB file.",
    )
    parser.add_argument("--model", required=True, help="registered model id")
    parser.add_argument("--input-dir", required=True, help="directory of WAVs")
    parser.add_argument("--output", required=True, help="output BEMB path")
    parser.add_argument(
        "--layer", type=int, default=None,
        help="encoder layer to read (default: final)",
    )
    parser.add_argument(
        "--batch-size", type=int, default=256,
        help="frames transformed per pass",
    )
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    job = ExportJob(
        model_id=args.model,
        input_dir=args.input_dir,
        output_path=args.output,
        layer=args.layer,
        batch_size=args.batch_size,
    )
    try:
        count = export(job)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"exported {count} utterances to {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
