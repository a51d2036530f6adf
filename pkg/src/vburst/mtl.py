"""Multi-task learner: embedding to emotions, age, and country, plus fusion.

A shared leaky-ReLU trunk feeds three heads: linear emotion intensities,
linear normalized age, and a softmax country distribution.  The joint loss
is the unweighted mean of emotion MSE, age MSE, and country cross-entropy.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .embedder import UtteranceEmbedding
from .metrics import EMOTION_NAMES, N_COUNTRIES, N_EMOTIONS

PRESETS = {"Sys-1": (128, 64), "Sys-2": (256, 128)}

_MTL_MAGIC = b"MTLB"
_MTL_VERSION = 1


@dataclass
class MtlConfig:
    """Trunk sizes and training settings; age stats filled in by training."""

    hidden1: int = 128
    hidden2: int = 64
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0
    weight_decay: float = 0.0
    standardize_features: bool = True
    age_mean: float = 0.0
    age_std: float = 1.0

    def __post_init__(self) -> None:
        if not self.hidden1 >= self.hidden2 >= 1:
            raise ValueError("hidden sizes must satisfy hidden1 >= hidden2 >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "MtlConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; use one of {sorted(PRESETS)}")
        h1, h2 = PRESETS[name]
        return cls(hidden1=h1, hidden2=h2, **overrides)


@dataclass(frozen=True)
class MtlPrediction:
    """One utterance's predictions in reporting units."""

    emotions: np.ndarray
    age_years: float
    country_probs: np.ndarray

    def __post_init__(self) -> None:
        e = np.asarray(self.emotions, dtype=np.float64)
        p = np.asarray(self.country_probs, dtype=np.float64)
        if e.shape != (N_EMOTIONS,) or p.shape != (N_COUNTRIES,):
            raise ValueError("prediction has wrong field shapes")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ValueError("country probabilities must sum to 1")
        object.__setattr__(self, "emotions", e)
        object.__setattr__(self, "country_probs", p)

    def as_record(self) -> dict:
        return {
            "emotions": self.emotions.tolist(),
            "age": self.age_years,
            "country_probs": self.country_probs.tolist(),
        }


@dataclass(frozen=True)
class HybridSpec:
    """Which system supplies each task's predictions."""

    emotion_source: str
    age_source: str
    country_source: str


@dataclass
class MtlModel:
    """Shared trunk plus the three task heads."""

    config: MtlConfig
    input_dim: int
    trunk: nn.Network
    emotion_head: nn.Network
    age_head: nn.Network
    country_head: nn.Network
    feat_mean: np.ndarray | None = None
    feat_std: np.ndarray | None = None

    def n_params(self) -> int:
        return (
            self.trunk.n_params()
            + self.emotion_head.n_params()
            + self.age_head.n_params()
            + self.country_head.n_params()
        )

    def _parts(self):
        return (self.trunk, self.emotion_head, self.age_head, self.country_head)


@dataclass
class MtlHistory:
    """Per-epoch validation trace."""

    val_loss: list[float] = field(default_factory=list)
    val_s_mtl: list[float] = field(default_factory=list)


def build_mtl(cfg: MtlConfig, input_dim: int) -> MtlModel:
    """Trunk dense(h1), leaky-ReLU, dense(h2), leaky-ReLU; heads 10/1/4."""
    if input_dim < 1:
        raise ValueError("input_dim must be at least 1")
    trunk = nn.build_network(
        [
            nn.LayerSpec("dense", in_dim=input_dim, out_dim=cfg.hidden1),
            nn.LayerSpec("leaky_relu"),
            nn.LayerSpec("dense", in_dim=cfg.hidden1, out_dim=cfg.hidden2),
            nn.LayerSpec("leaky_relu"),
        ],
        cfg.seed,
    )
    emotion_head = nn.build_network(
        [nn.LayerSpec("dense", in_dim=cfg.hidden2, out_dim=N_EMOTIONS)],
        cfg.seed + 1,
    )
    age_head = nn.build_network(
        [nn.LayerSpec("dense", in_dim=cfg.hidden2, out_dim=1)], cfg.seed + 2
    )
    country_head = nn.build_network(
        [
            nn.LayerSpec("dense", in_dim=cfg.hidden2, out_dim=N_COUNTRIES),
            nn.LayerSpec("softmax"),
        ],
        cfg.seed + 3,
    )
    return MtlModel(cfg, input_dim, trunk, emotion_head, age_head, country_head)


def normalize_age(cfg: MtlConfig, years):
    """Years to standardized units using the config's train-set stats."""
    return (np.asarray(years, dtype=np.float64) - cfg.age_mean) / cfg.age_std


def denormalize_age(cfg: MtlConfig, normalized):
    """Inverse of normalize_age; normalized 0 maps to the train mean age."""
    return np.asarray(normalized, dtype=np.float64) * cfg.age_std + cfg.age_mean


def _validate_target(target: dict) -> None:
    e = np.asarray(target["emotions"], dtype=np.float64)
    if e.shape != (N_EMOTIONS,) or e.min() < 0.0 or e.max() > 1.0:
        raise ValueError("target emotions must be 10 values in [0, 1]")
    country = int(target["country"])
    if not 0 <= country < N_COUNTRIES:
        raise ValueError(f"target country {country} out of range")


def mtl_loss(pred_emotions, pred_age_norm, pred_country_probs, target) -> float:
    """Mean of emotion MSE, normalized-age MSE, and country cross-entropy."""
    _validate_target(target)
    e_loss, _ = nn.loss_mse(pred_emotions, target["emotions"])
    a_loss, _ = nn.loss_mse([float(pred_age_norm)], [float(target["age"])])
    c_loss, _ = nn.loss_cross_entropy(pred_country_probs, int(target["country"]))
    return (e_loss + a_loss + c_loss) / 3.0


def _model_forward(model: MtlModel, x: np.ndarray):
    z, trunk_cache = nn.forward(model.trunk, x)
    e, e_cache = nn.forward(model.emotion_head, z)
    a, a_cache = nn.forward(model.age_head, z)
    p, c_cache = nn.forward(model.country_head, z)
    return (e, a[:, 0], p), (trunk_cache, e_cache, a_cache, c_cache)


def _standardize(model: MtlModel, x: np.ndarray) -> np.ndarray:
    if model.feat_mean is None:
        return x
    return (x - model.feat_mean) / model.feat_std


def _batch_loss_and_grads(model, x, emotions, ages_norm, countries):
    """Joint loss over a batch plus gradients for every sub-network."""
    (e, a, p), (trunk_cache, e_cache, a_cache, c_cache) = _model_forward(model, x)
    batch = x.shape[0]

    e_loss, ge = nn.loss_mse(e, emotions)
    a_loss, ga = nn.loss_mse(a, ages_norm)
    c_loss, gp = nn.mean_cross_entropy(p, countries)
    loss = (e_loss + a_loss + c_loss) / 3.0

    e_grads, gz_e = nn.backward(
        model.emotion_head, e_cache, ge / 3.0, return_input_grad=True
    )
    a_grads, gz_a = nn.backward(
        model.age_head, a_cache, (ga / 3.0)[:, None], return_input_grad=True
    )
    c_grads, gz_c = nn.backward(
        model.country_head, c_cache, gp / 3.0, return_input_grad=True
    )
    trunk_grads = nn.backward(model.trunk, trunk_cache, gz_e + gz_a + gz_c)
    return loss, (trunk_grads, e_grads, a_grads, c_grads)


def _dataset_arrays(embeddings: dict, labels: dict, input_dim: int | None):
    ids = sorted(embeddings)
    missing = sorted(set(ids) - set(labels))
    if missing:
        raise ValueError(f"missing labels for utterances: {missing}")
    vectors = []
    for utt_id in ids:
        item = embeddings[utt_id]
        v = item.vector if isinstance(item, UtteranceEmbedding) else np.asarray(item, dtype=np.float64)
        if input_dim is not None and v.shape != (input_dim,):
            raise ValueError(
                f"embedding dim {v.shape} for {utt_id!r} does not match"
                f" model input dim {input_dim}"
            )
        vectors.append(v)
    x = np.vstack(vectors)
    emotions = np.array([labels[u]["emotions"] for u in ids], dtype=np.float64)
    ages = np.array([labels[u]["age"] for u in ids], dtype=np.float64)
    countries = np.array([labels[u]["country"] for u in ids], dtype=np.int64)
    return ids, x, emotions, ages, countries


def train_mtl(
    model: MtlModel,
    train_embeddings: dict,
    train_labels: dict,
    cfg: MtlConfig,
    val_embeddings: dict | None = None,
    val_labels: dict | None = None,
):
    """Adam training with best-validation checkpointing.

    Age targets are standardized by the train-set mean/std (stored in cfg);
    features are standardized likewise when cfg.standardize_features.
    cfg.weight_decay > 0 adds a classic L2 pull toward zero on every
    parameter.  Stops after cfg.patience epochs without validation
    improvement.  Returns (model, history); history is bit-identical for
    a fixed seed.
    """
    if val_embeddings is None:
        val_embeddings, val_labels = train_embeddings, train_labels
    _, x_tr, emo_tr, age_tr, cou_tr = _dataset_arrays(
        train_embeddings, train_labels, model.input_dim
    )
    _, x_va, emo_va, age_va, cou_va = _dataset_arrays(
        val_embeddings, val_labels, model.input_dim
    )

    cfg.age_mean = float(age_tr.mean())
    cfg.age_std = float(age_tr.std()) or 1.0
    age_tr_n = normalize_age(cfg, age_tr)
    age_va_n = normalize_age(cfg, age_va)

    if cfg.standardize_features:
        model.feat_mean = x_tr.mean(axis=0)
        model.feat_std = x_tr.std(axis=0)
        model.feat_std[model.feat_std == 0.0] = 1.0
    x_tr = _standardize(model, x_tr)
    x_va = _standardize(model, x_va)

    states = [
        nn.OptimizerState("adam", cfg.learning_rate) for _ in model._parts()
    ]
    shuffle_rng = np.random.default_rng(cfg.seed + 17)
    history = MtlHistory()
    best_loss = np.inf
    best_params = [
        [{k: v.copy() for k, v in p.items()} for p in part.params]
        for part in model._parts()
    ]
    since_best = 0

    for _ in range(cfg.max_epochs):
        order = shuffle_rng.permutation(x_tr.shape[0])
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = _batch_loss_and_grads(
                model, x_tr[idx], emo_tr[idx], age_tr_n[idx], cou_tr[idx]
            )
            for part, state, g in zip(model._parts(), states, grads):
                if cfg.weight_decay > 0.0:
                    # L2 applied to gradients only; reported losses stay
                    # pure data terms so histories remain comparable.
                    for p, gl in zip(part.params, g):
                        for name in gl:
                            gl[name] = gl[name] + cfg.weight_decay * p[name]
                nn.optimizer_step(state, part.params, g)

        (e, a, p), _ = _model_forward(model, x_va)
        e_loss, _ = nn.loss_mse(e, emo_va)
        a_loss, _ = nn.loss_mse(a, age_va_n)
        c_loss, _ = nn.mean_cross_entropy(p, cou_va)
        val_loss = (e_loss + a_loss + c_loss) / 3.0
        history.val_loss.append(val_loss)
        history.val_s_mtl.append(
            _safe_s_mtl(e, denormalize_age(cfg, a), p, emo_va, age_va, cou_va)
        )

        if val_loss < best_loss:
            best_loss = val_loss
            best_params = [
                [{k: v.copy() for k, v in p.items()} for p in part.params]
                for part in model._parts()
            ]
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    for part, saved in zip(model._parts(), best_params):
        for p, s in zip(part.params, saved):
            for k in p:
                p[k][...] = s[k]
    return model, history


def _safe_s_mtl(e, age_years, p, emo_true, age_true, cou_true) -> float:
    from . import metrics

    try:
        per = [
            metrics.ccc(np.clip(e[:, k], 0.0, 1.0), emo_true[:, k])
            for k in range(N_EMOTIONS)
        ]
        cm = metrics.confusion_matrix(
            p.argmax(axis=1), cou_true, N_COUNTRIES
        )
        return metrics.s_mtl(
            float(np.mean(per)),
            metrics.uar(cm),
            max(metrics.mae(age_years, age_true), 1e-6),
        )
    except ValueError:
        return float("nan")


def predict(model: MtlModel, embedding) -> MtlPrediction:
    """Clamped emotions, denormalized age, country distribution."""
    v = embedding.vector if isinstance(embedding, UtteranceEmbedding) else np.asarray(embedding, dtype=np.float64)
    if v.shape != (model.input_dim,):
        raise ValueError(
            f"embedding dim {v.shape} does not match model input dim"
            f" {model.input_dim}"
        )
    x = _standardize(model, v[None, :])
    (e, a, p), _ = _model_forward(model, x)
    return MtlPrediction(
        emotions=np.clip(e[0], 0.0, 1.0),
        age_years=float(denormalize_age(model.config, a[0])),
        country_probs=p[0],
    )


def predict_set(model: MtlModel, embeddings: dict) -> dict:
    """MtlPrediction per utterance id."""
    return {utt_id: predict(model, emb) for utt_id, emb in embeddings.items()}


def early_fuse(sets: list) -> dict:
    """Concatenate utterance embeddings across sets, aligned by id."""
    if not sets:
        raise ValueError("need at least one embedding set")
    base_ids = set(sets[0])
    for i, s in enumerate(sets[1:], start=1):
        if set(s) != base_ids:
            missing = sorted(base_ids ^ set(s))
            raise ValueError(
                f"embedding set {i} does not cover the same utterances;"
                f" mismatched ids: {missing}"
            )
    fused = {}
    for utt_id in sorted(base_ids):
        parts = []
        for s in sets:
            item = s[utt_id]
            parts.append(
                item.vector
                if isinstance(item, UtteranceEmbedding)
                else np.asarray(item, dtype=np.float64)
            )
        fused[utt_id] = np.concatenate(parts)
    return fused


def hybrid_fuse(spec: HybridSpec, predictions_by_system: dict) -> dict:
    """Assemble each task's predictions from its named source system."""
    for source in (spec.emotion_source, spec.age_source, spec.country_source):
        if source not in predictions_by_system:
            raise ValueError(f"unknown prediction source {source!r}")
    emotion_set = predictions_by_system[spec.emotion_source]
    age_set = predictions_by_system[spec.age_source]
    country_set = predictions_by_system[spec.country_source]
    ids = set(emotion_set)
    if set(age_set) != ids or set(country_set) != ids:
        missing = sorted(ids ^ set(age_set)) + sorted(ids ^ set(country_set))
        raise ValueError(f"sources cover different utterances: {missing}")
    return {
        utt_id: MtlPrediction(
            emotions=emotion_set[utt_id].emotions,
            age_years=age_set[utt_id].age_years,
            country_probs=country_set[utt_id].country_probs,
        )
        for utt_id in ids
    }


PREDICTION_COLUMNS = (
    ["utterance_id"]
    + list(EMOTION_NAMES)
    + ["age"]
    + [f"country_prob_{i}" for i in range(N_COUNTRIES)]
)


def write_prediction_table(path: str | Path, predictions: dict) -> None:
    """One header row, then one row per utterance sorted by id."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PREDICTION_COLUMNS)
        for utt_id in sorted(predictions):
            pred = predictions[utt_id]
            writer.writerow(
                [utt_id]
                + [f"{v:.9g}" for v in pred.emotions]
                + [f"{pred.age_years:.9g}"]
                + [f"{v:.9g}" for v in pred.country_probs]
            )


def read_prediction_table(path: str | Path) -> dict:
    """Inverse of write_prediction_table."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != PREDICTION_COLUMNS:
            raise ValueError(f"unexpected prediction table header: {header}")
        out = {}
        for row in reader:
            utt_id = row[0]
            values = [float(v) for v in row[1:]]
            out[utt_id] = MtlPrediction(
                emotions=np.array(values[:N_EMOTIONS]),
                age_years=values[N_EMOTIONS],
                country_probs=np.array(values[N_EMOTIONS + 1 :]),
            )
    return out


def save_mtl(model: MtlModel, path: str | Path) -> None:
    """Single-file model container wrapping the four network blobs."""
    cfg = model.config
    out = bytearray()
    out += _MTL_MAGIC
    out += struct.pack("<I", _MTL_VERSION)
    out += struct.pack("<I", model.input_dim)
    out += struct.pack("<II", cfg.hidden1, cfg.hidden2)
    out += struct.pack("<dd", cfg.age_mean, cfg.age_std)
    has_stats = model.feat_mean is not None
    out += struct.pack("<B", 1 if has_stats else 0)
    if has_stats:
        out += model.feat_mean.astype("<f8").tobytes()
        out += model.feat_std.astype("<f8").tobytes()
    for part in model._parts():
        blob = nn.encode_network(part)
        out += struct.pack("<I", len(blob))
        out += blob
    Path(path).write_bytes(bytes(out))


def load_mtl(path: str | Path) -> MtlModel:
    """Inverse of save_mtl."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MTL_MAGIC:
        raise ValueError(f"not a multi-task model file: bad magic {raw[:4]!r}")
    offset = 4
    version = struct.unpack_from("<I", raw, offset)[0]
    offset += 4
    if version != _MTL_VERSION:
        raise ValueError(f"unsupported model container version {version}")
    input_dim = struct.unpack_from("<I", raw, offset)[0]
    offset += 4
    h1, h2 = struct.unpack_from("<II", raw, offset)
    offset += 8
    age_mean, age_std = struct.unpack_from("<dd", raw, offset)
    offset += 16
    has_stats = raw[offset] == 1
    offset += 1
    feat_mean = feat_std = None
    if has_stats:
        feat_mean = np.frombuffer(raw, dtype="<f8", count=input_dim, offset=offset).copy()
        offset += input_dim * 8
        feat_std = np.frombuffer(raw, dtype="<f8", count=input_dim, offset=offset).copy()
        offset += input_dim * 8
    parts = []
    for _ in range(4):
        if offset + 4 > len(raw):
            raise ValueError(f"model container truncated at byte {offset}")
        size = struct.unpack_from("<I", raw, offset)[0]
        offset += 4
        if offset + size > len(raw):
            raise ValueError(f"model container truncated at byte {offset}")
        parts.append(nn.decode_network(raw[offset : offset + size]))
        offset += size
    cfg = MtlConfig(hidden1=h1, hidden2=h2, age_mean=age_mean, age_std=age_std)
    return MtlModel(cfg, input_dim, *parts, feat_mean=feat_mean, feat_std=feat_std)
