#!/usr/bin/env python3
"""Compare per-source systems against their hybrid fusion on one corpus.

Trains a separate multi-task model on each feature source's pooled
embeddings, assembles the hybrid prediction (emotions from the ER-source
system, age and country from the CR-source system), and prints all rows
side by side.  Expects a corpus laid out by run_synthetic_experiment.py.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from vburst import cli, metrics, mtl


def score_row(predictions: dict, labels: dict) -> str:
    """Per-task metrics for one system; blank composite when undefined.

    A single-source system can score below zero on its off-task metrics,
    where the combined score has no value; the components always do.
    """
    ids = sorted(labels)
    per_emotion = [
        metrics.ccc(
            [predictions[u]["emotions"][k] for u in ids],
            [labels[u]["emotions"][k] for u in ids],
        )
        for k in range(len(labels[ids[0]]["emotions"]))
    ]
    m_ccc = metrics.mean_ccc(per_emotion)
    age_mae = metrics.mae(
        [predictions[u]["age"] for u in ids], [labels[u]["age"] for u in ids]
    )
    cm = metrics.confusion_matrix(
        [int(np.argmax(predictions[u]["country_probs"])) for u in ids],
        [int(labels[u]["country"]) for u in ids],
        metrics.N_COUNTRIES,
    )
    u = metrics.uar(cm)
    if m_ccc > 0.0 and u > 0.0:
        composite = "%.3f" % metrics.s_mtl(m_ccc, u, max(age_mae, metrics.MAE_FLOOR))
    else:
        composite = "-"
    return f"{m_ccc:.3f}\t{u:.3f}\t{age_mae:.3f}\t{composite}"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--corpus", default="synth_run", help="corpus directory")
    parser.add_argument("--out", default="hybrid_run", help="output directory")
    parser.add_argument("--seed", type=int, default=3)
    parser.add_argument("--preset", default="Sys-1", choices=["Sys-1", "Sys-2"])
    args = parser.parse_args()

    corpus = Path(args.corpus)
    config = cli.ExperimentConfig(
        manifest=str(corpus / "manifest.csv"),
        wav_dir=str(corpus / "wav"),
        output_dir=args.out,
        sources=(
            cli.FeatureSource(name="er", task="ER"),
            cli.FeatureSource(name="cr", task="CR"),
        ),
        mtl_preset=args.preset,
        seeds=(args.seed,),
        hybrid=mtl.HybridSpec(
            emotion_source="er", age_source="cr", country_source="cr"
        ),
    )
    summary = cli.run_experiment(config)

    seed_dir = Path(args.out) / f"seed_{args.seed}"
    records = cli.parse_manifest(corpus / "manifest.csv")
    print("system\tsplit\tccc\tuar\tmae\ts_mtl")
    for split in ("val", "test"):
        labels = {
            r.utterance_id: r.labels() for r in records if r.split == split
        }
        for name in ("er", "cr"):
            predictions = mtl.read_prediction_table(
                seed_dir / f"predictions_{split}_{name}.csv"
            )
            row = score_row(
                {u: p.as_record() for u, p in predictions.items()}, labels
            )
            print(f"{name}\t{split}\t{row}")
        print(f"hybrid\t{split}\t{summary.reports[args.seed][split].as_row()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
