"""Task-specific CNN embedders on 250 ms frames.

Covers building and training the frame classifiers, extracting
pre-activation embeddings, mean/std pooling, first-layer filter analysis,
and reading externally computed embedding files.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, nn

DEFAULT_CONV_STACK = ((16, 30, 10), (16, 10, 2), (32, 5, 2), (32, 5, 2))
DEFAULT_FRAME_LEN = 4000

_BEMB_MAGIC = b"BEMB"
_BEMB_VERSION = 1


@dataclass(frozen=True)
class EmbedderConfig:
    """Architecture and training settings for one frame classifier.

    conv_stack rows are (out_channels, kernel_len, stride).  ER is the
    10-class emotion task, CR the 4-class country task.
    """

    task: str = "ER"
    input_kind: str = "raw"
    conv_stack: tuple = DEFAULT_CONV_STACK
    hidden_dim: int = 10
    frame_len_samples: int = DEFAULT_FRAME_LEN
    batch_size: int = 64
    max_epochs: int = 100
    initial_lr: float = 1e-1
    grad_clip: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in ("ER", "CR"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.input_kind not in ("raw", "zff"):
            raise ValueError(f"unknown input kind {self.input_kind!r}")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be at least 1")
        if not self.conv_stack:
            raise ValueError("conv_stack must have at least one layer")

    @property
    def n_classes(self) -> int:
        return 10 if self.task == "ER" else 4


@dataclass(frozen=True)
class FrameEmbeddingSequence:
    """Per-frame embeddings for one utterance."""

    utterance_id: str
    embeddings: np.ndarray

    def __post_init__(self) -> None:
        e = np.asarray(self.embeddings, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] < 1:
            raise ValueError("embeddings must be n_frames x dim with n_frames >= 1")
        if not np.isfinite(e).all():
            raise ValueError("embeddings contain non-finite values")
        object.__setattr__(self, "embeddings", e)


@dataclass(frozen=True)
class UtteranceEmbedding:
    """Fixed-length utterance vector: per-coordinate means then stds."""

    utterance_id: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] % 2 != 0:
            raise ValueError("vector must be one-dimensional with even length")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class FilterResponse:
    """Summed first-layer filter magnitude spectrum, peak-normalized."""

    n_fft: int
    magnitude: np.ndarray
    bin_hz: np.ndarray


@dataclass
class TrainHistory:
    """Per-epoch crossval record; entry 0 is the untrained baseline."""

    crossval_loss: list[float] = field(default_factory=list)
    learning_rate: list[float] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def temporal_length_chain(conv_stack, frame_len: int) -> list[int]:
    lengths = [frame_len]
    for _, kernel_len, stride in conv_stack:
        lengths.append(nn.conv_output_len(lengths[-1], kernel_len, stride))
    return lengths


def build_embedder(cfg: EmbedderConfig) -> nn.Network:
    """Conv stack with ReLUs, flatten, hidden dense + ReLU, softmax output."""
    lengths = temporal_length_chain(cfg.conv_stack, cfg.frame_len_samples)
    if min(lengths) < 1:
        raise ValueError(
            f"conv stack reduces temporal length below 1: {lengths}"
        )
    specs = []
    in_channels = 1
    for out_channels, kernel_len, stride in cfg.conv_stack:
        specs.append(
            nn.LayerSpec(
                "conv1d",
                in_channels=in_channels,
                out_channels=out_channels,
                kernel_len=kernel_len,
                stride=stride,
            )
        )
        specs.append(nn.LayerSpec("relu"))
        in_channels = out_channels
    flat_dim = in_channels * lengths[-1]
    specs.append(nn.LayerSpec("flatten"))
    specs.append(nn.LayerSpec("dense", in_dim=flat_dim, out_dim=cfg.hidden_dim))
    specs.append(nn.LayerSpec("relu"))
    specs.append(nn.LayerSpec("dense", in_dim=cfg.hidden_dim, out_dim=cfg.n_classes))
    specs.append(nn.LayerSpec("softmax"))
    return nn.build_network(specs, cfg.seed)


def hard_labels(intensities) -> np.ndarray:
    """Dominant class per row; ties break toward the lowest index."""
    x = np.asarray(intensities, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 10:
        raise ValueError("expected an n x 10 intensity matrix")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("intensities must lie in [0, 1]")
    return np.argmax(x, axis=1)


def speaker_split(speaker_ids, ratio: float, seed: int):
    """Partition distinct speakers into train and crossval sets.

    Train side gets round(ratio * total) speakers, shuffled by seed, with
    at least one speaker on each side.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    unique = sorted(set(speaker_ids))
    if len(unique) < 2:
        raise ValueError("need at least 2 distinct speakers to split")
    order = np.random.default_rng(seed).permutation(len(unique))
    n_train = int(round(ratio * len(unique)))
    n_train = min(max(n_train, 1), len(unique) - 1)
    train = {unique[i] for i in order[:n_train]}
    crossval = {unique[i] for i in order[n_train:]}
    return train, crossval


def _mean_ce_in_chunks(net: nn.Network, frames: np.ndarray, labels: np.ndarray):
    total = 0.0
    correct = 0
    for start in range(0, frames.shape[0], 256):
        batch = frames[start : start + 256]
        probs, _ = nn.forward(net, batch[:, None, :])
        y = labels[start : start + 256]
        loss, _ = nn.mean_cross_entropy(probs, y)
        total += loss * batch.shape[0]
        correct += int((probs.argmax(axis=1) == y).sum())
    return total / frames.shape[0], correct / frames.shape[0]


def _clone_params(net: nn.Network) -> list[dict]:
    return [{k: v.copy() for k, v in p.items()} for p in net.params]


def _restore_params(net: nn.Network, saved: list[dict]) -> None:
    for p, s in zip(net.params, saved):
        for k in p:
            p[k][...] = s[k]


def train_embedder(cfg: EmbedderConfig, train_utterances, crossval_utterances):
    """Train a frame classifier with the halving learning-rate schedule.

    Each argument is a sequence of (frames, class_index) pairs where frames
    is an n x frame_len matrix; every frame inherits its utterance label.
    Training halves the learning rate on any epoch without crossval
    improvement (restoring the best parameters) and stops when a halving
    would cross the floor or max_epochs is reached.  Returns the network
    achieving the best crossval loss and the loss history (entry 0 is the
    untrained baseline).
    """
    if len(train_utterances) < 1 or len(crossval_utterances) < 1:
        raise ValueError("need at least one train and one crossval utterance")

    def stack(utts):
        frames = np.vstack([np.asarray(f, dtype=np.float64) for f, _ in utts])
        labels = np.concatenate(
            [np.full(len(f), label, dtype=np.int64) for f, label in utts]
        )
        return frames, labels

    x_train, y_train = stack(train_utterances)
    x_cv, y_cv = stack(crossval_utterances)

    history = TrainHistory()
    present = set(np.unique(y_train).tolist())
    for c in range(cfg.n_classes):
        if c not in present:
            history.warnings.append(
                f"class {c} absent from the training subset"
            )

    net = build_embedder(cfg)
    sched = nn.LrSchedule(current_lr=cfg.initial_lr)
    state = nn.OptimizerState("sgd", cfg.initial_lr)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)

    best_loss, _ = _mean_ce_in_chunks(net, x_cv, y_cv)
    best_params = _clone_params(net)
    history.crossval_loss.append(best_loss)
    history.learning_rate.append(sched.current_lr)
    sched.best_val_loss = best_loss

    for _ in range(cfg.max_epochs):
        order = shuffle_rng.permutation(x_train.shape[0])
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            probs, cache = nn.forward(net, x_train[idx][:, None, :])
            _, lgrad = nn.mean_cross_entropy(probs, y_train[idx])
            grads = nn.backward(net, cache, lgrad)
            state.learning_rate = sched.current_lr
            nn.optimizer_step(state, net.params, grads, grad_clip=cfg.grad_clip)

        cv_loss, _ = _mean_ce_in_chunks(net, x_cv, y_cv)
        history.crossval_loss.append(cv_loss)
        history.learning_rate.append(sched.current_lr)
        if cv_loss < best_loss:
            best_loss = cv_loss
            best_params = _clone_params(net)
        else:
            # halving epoch: resume from the best parameters seen so far
            _restore_params(net, best_params)
        sched = nn.lr_update(sched, cv_loss)
        if sched.exhausted:
            break

    _restore_params(net, best_params)
    return net, history


def _embedding_specs(net: nn.Network) -> int:
    tail = [spec.kind for spec in net.specs[-4:]]
    if tail != ["dense", "relu", "dense", "softmax"]:
        raise ValueError("network does not end in the embedder head layout")
    return len(net.specs) - 4


def extract_frame_embeddings(
    net: nn.Network, frames: np.ndarray, utterance_id: str = ""
) -> FrameEmbeddingSequence:
    """Pre-activation output of the hidden dense layer for each frame."""
    hidden_index = _embedding_specs(net)
    x = np.asarray(frames, dtype=np.float64)[:, None, :]
    out, _ = nn.forward(net, x, n_layers=hidden_index + 1)
    return FrameEmbeddingSequence(utterance_id, out)


def pool_functionals(seq: FrameEmbeddingSequence) -> UtteranceEmbedding:
    """Concatenate per-coordinate mean and population std over frames."""
    e = seq.embeddings
    if e.shape[0] < 1:
        raise ValueError("cannot pool an empty frame sequence")
    vector = np.concatenate([e.mean(axis=0), e.std(axis=0)])
    return UtteranceEmbedding(seq.utterance_id, vector)


def classify_eval(net: nn.Network, utterance_frames, labels):
    """Utterance-level evaluation by mean softmax over frames.

    utterance_frames maps utterance id to a frame matrix; labels maps
    utterance id to the true class.  Returns (uar, war, ConfusionMatrix).
    """
    n_classes = net.specs[-2].out_dim
    preds = []
    trues = []
    for utt_id in sorted(labels):
        label = int(labels[utt_id])
        if not 0 <= label < n_classes:
            raise ValueError(f"label {label} out of range for {utt_id!r}")
        frames = np.asarray(utterance_frames[utt_id], dtype=np.float64)
        probs, _ = nn.forward(net, frames[:, None, :])
        preds.append(int(probs.mean(axis=0).argmax()))
        trues.append(label)
    cm = metrics.confusion_matrix(preds, trues, n_classes)
    return metrics.uar(cm), metrics.war(cm), cm


def cumulative_frequency_response(
    net: nn.Network, n_fft: int = 512, sample_rate_hz: int = 16000
) -> FilterResponse:
    """Summed magnitude spectrum of every first-layer kernel, peak 1."""
    first = net.specs[0]
    if first.kind != "conv1d":
        raise ValueError("first layer is not convolutional")
    if n_fft < first.kernel_len:
        raise ValueError("n_fft must be at least the kernel length")
    kernels = net.params[0]["w"].reshape(-1, first.kernel_len)
    padded = np.zeros((kernels.shape[0], n_fft))
    padded[:, : first.kernel_len] = kernels
    magnitude = np.abs(np.fft.rfft(padded, axis=1)).sum(axis=0)
    peak = magnitude.max()
    if peak > 0:
        magnitude = magnitude / peak
    bin_hz = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    return FilterResponse(n_fft, magnitude, bin_hz)


@dataclass(frozen=True)
class ExternalEmbeddings:
    """Contents of one embedding file."""

    frame_level: bool
    by_id: dict

    def pooled(self) -> dict:
        """Utterance vectors: pooled frame embeddings or stored vectors."""
        if not self.frame_level:
            return dict(self.by_id)
        return {
            utt_id: pool_functionals(seq) for utt_id, seq in self.by_id.items()
        }


def save_external_embeddings(
    path: str | Path, sequences, frame_level: bool = True
) -> None:
    """Write the shared embedding file format.

    sequences maps utterance id to an n_frames x dim matrix (frame level)
    or a single vector (utterance level, stored as one row).
    """
    out = bytearray()
    out += _BEMB_MAGIC
    out += struct.pack("<I", _BEMB_VERSION)
    out += struct.pack("<B", 1 if frame_level else 0)
    out += struct.pack("<I", len(sequences))
    for utt_id in sorted(sequences):
        rows = np.atleast_2d(np.asarray(sequences[utt_id], dtype=np.float32))
        encoded = utt_id.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<II", rows.shape[0], rows.shape[1])
        out += rows.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_external_embeddings(path: str | Path) -> ExternalEmbeddings:
    """Read the shared embedding format, upcasting values to 64-bit."""
    raw = Path(path).read_bytes()

    def need(offset: int, nbytes: int) -> None:
        if offset + nbytes > len(raw):
            raise ValueError(f"embedding file truncated at byte {offset}")

    need(0, 13)
    if raw[:4] != _BEMB_MAGIC:
        raise ValueError(f"not an embedding file: bad magic {raw[:4]!r}")
    version = struct.unpack_from("<I", raw, 4)[0]
    if version != _BEMB_VERSION:
        raise ValueError(f"unsupported embedding format version {version}")
    frame_level = raw[8] == 1
    count = struct.unpack_from("<I", raw, 9)[0]
    offset = 13

    by_id: dict = {}
    dim_seen = None
    for _ in range(count):
        need(offset, 4)
        id_len = struct.unpack_from("<I", raw, offset)[0]
        offset += 4
        need(offset, id_len)
        utt_id = raw[offset : offset + id_len].decode("utf-8")
        offset += id_len
        need(offset, 8)
        n_frames, dim = struct.unpack_from("<II", raw, offset)
        offset += 8
        if dim_seen is None:
            dim_seen = dim
        elif dim != dim_seen:
            raise ValueError(
                f"inconsistent embedding dim for {utt_id!r}:"
                f" {dim} != {dim_seen}"
            )
        nbytes = n_frames * dim * 4
        need(offset, nbytes)
        values = np.frombuffer(
            raw, dtype="<f4", count=n_frames * dim, offset=offset
        ).astype(np.float64)
        offset += nbytes
        rows = values.reshape(n_frames, dim)
        if frame_level:
            by_id[utt_id] = FrameEmbeddingSequence(utt_id, rows)
        else:
            if n_frames != 1:
                raise ValueError(
                    f"utterance-level file stores {n_frames} rows for"
                    f" {utt_id!r}; expected 1"
                )
            by_id[utt_id] = UtteranceEmbedding(utt_id, rows[0])
    return ExternalEmbeddings(frame_level, by_id)
