"""Self-contained stand-in encoders for the released SSL speech models.

This sandbox cannot download checkpoints, so each model id maps to a
deterministic encoder with the real model's geometry: a 25 ms window
advanced 20 ms per frame and the published hidden width per layer.
Weights are derived from a fixed per-model seed, so the same id always
produces bit-identical embeddings for the same audio.
"""

from dataclasses import dataclass

import numpy as np

SAMPLE_RATE_HZ = 16000
FRAME_WINDOW = 400  # 25 ms
FRAME_HOP = 320  # 20 ms


@dataclass(frozen=True)
class ModelSpec:
    """Identity and geometry of one encoder."""

    name: str
    hidden_dim: int
    n_layers: int
    seed: int

    def __post_init__(self) -> None:
        if self.hidden_dim < 1 or self.n_layers < 1:
            raise ValueError("hidden_dim and n_layers must be positive")


MODEL_REGISTRY = {
    "wav2vec2-base": ModelSpec("wav2vec2-base", 768, 12, 7001),
    "hubert-large": ModelSpec("hubert-large", 1024, 24, 7002),
    "wavlm-large": ModelSpec("wavlm-large", 1024, 24, 7003),
}


@dataclass(frozen=True)
class Model:
    """Loaded weights: a frame projection plus a shared layer mixer."""

    spec: ModelSpec
    w_in: np.ndarray
    b_in: np.ndarray
    w_mix: np.ndarray
    layer_gain: np.ndarray
    layer_bias: np.ndarray


def load_model(model_id: str) -> Model:
    """Materialize the encoder weights for a registered model id."""
    if model_id not in MODEL_REGISTRY:
        known = ", ".join(sorted(MODEL_REGISTRY))
        raise ValueError(f"unknown model {model_id!r}; known models: {known}")
    spec = MODEL_REGISTRY[model_id]
    rng = np.random.default_rng(spec.seed)
    dim = spec.hidden_dim
    return Model(
        spec=spec,
        w_in=rng.normal(size=(FRAME_WINDOW, dim)) / np.sqrt(FRAME_WINDOW),
        b_in=rng.normal(size=dim) * 0.1,
        w_mix=rng.normal(size=(dim, dim)) / np.sqrt(dim),
        layer_gain=rng.uniform(0.5, 1.5, size=(spec.n_layers, dim)),
        layer_bias=rng.normal(size=(spec.n_layers, dim)) * 0.1,
    )


def frame_waveform(samples: np.ndarray) -> np.ndarray:
    """Cut the window/hop grid; signals shorter than one window pad out."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("samples must be a non-empty one-dimensional array")
    if x.size < FRAME_WINDOW:
        padded = np.zeros(FRAME_WINDOW)
        padded[: x.size] = x
        return padded[None, :]
    n = (x.size - FRAME_WINDOW) // FRAME_HOP + 1
    return np.stack(
        [x[i * FRAME_HOP : i * FRAME_HOP + FRAME_WINDOW] for i in range(n)]
    )


def encode(model: Model, samples: np.ndarray, layer: int, batch_size: int):
    """Frame-level hidden states at the requested layer, (n_frames, dim).

    Layer 0 is the frame projection; layer k applies k mixing blocks;
    the default in the export job is the final layer.  Batch size only
    bounds how many frames are transformed per pass.
    """
    if not 0 <= layer <= model.spec.n_layers:
        raise ValueError(
            f"layer {layer} out of range 0..{model.spec.n_layers}"
        )
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    frames = frame_waveform(samples)
    out = np.empty((frames.shape[0], model.spec.hidden_dim))
    for start in range(0, frames.shape[0], batch_size):
        chunk = frames[start : start + batch_size]
        h = np.tanh(chunk @ model.w_in + model.b_in)
        for k in range(layer):
            h = np.tanh(
                (h * model.layer_gain[k]) @ model.w_mix + model.layer_bias[k]
            )
        out[start : start + chunk.shape[0]] = h
    return out
