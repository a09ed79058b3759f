"""Speaker classification head, class weighting and inference."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from spkid import numcore as nc
from spkid.audio_io import AudioClip
from spkid.encoder import EncoderConfig, encode, transformer_encode
from spkid.errors import InputTooShort, MissingClass, ShapeMismatch
from spkid.numcore import Tensor


@dataclass
class HeadParams:
    hidden: Tensor  # [d, h]
    hidden_bias: Tensor  # [h]
    out: Tensor  # [h, C]
    out_bias: Tensor  # [C]

    @classmethod
    def init(cls, dim, n_classes, hidden=None, seed=0):
        hidden = hidden or 2 * dim
        rng = np.random.default_rng([seed, 303])
        return cls(
            Tensor(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(dim, hidden)), requires_grad=True),
            Tensor(np.zeros(hidden), requires_grad=True),
            # small output layer: initial predictions near uniform, loss near ln C
            Tensor(rng.normal(0.0, 0.1 / math.sqrt(hidden), size=(hidden, n_classes)),
                   requires_grad=True),
            Tensor(np.zeros(n_classes), requires_grad=True),
        )

    @property
    def n_classes(self) -> int:
        return self.out.shape[1]

    def params(self, prefix="head.") -> dict:
        return {prefix + "hidden": self.hidden, prefix + "hidden_bias": self.hidden_bias,
                prefix + "out": self.out, prefix + "out_bias": self.out_bias}

    @classmethod
    def from_params(cls, params, prefix="head."):
        return cls(params[prefix + "hidden"], params[prefix + "hidden_bias"],
                   params[prefix + "out"], params[prefix + "out_bias"])


def mlp_head(pooled, params: HeadParams) -> Tensor:
    """``logits = linear(gelu(linear(pooled)))``."""
    pooled = nc.as_tensor(pooled)
    if pooled.shape[-1] != params.hidden.shape[0]:
        raise ShapeMismatch(f"pooled dim {pooled.shape[-1]} vs head input {params.hidden.shape[0]}")
    h = nc.gelu(nc.linear(pooled, params.hidden, params.hidden_bias))
    return nc.linear(h, params.out, params.out_bias)


def class_weights(manifest, split="train") -> np.ndarray:
    """Inverse-frequency weights ``N / (C * n_c)`` over the classes of ``manifest``."""
    entries = manifest.split(split)
    c = manifest.n_classes
    counts = np.zeros(c, dtype=np.int64)
    for e in entries:
        counts[manifest.class_id(e.speaker)] += 1
    missing = [lab for lab, i in manifest.label_index.items() if counts[i] == 0]
    if missing:
        raise MissingClass(f"classes absent from split {split!r}: {', '.join(sorted(missing))}")
    return counts.sum() / (c * counts.astype(np.float64))


@dataclass
class SpeakerModel:
    """Encoder + head parameters with the settings needed for inference."""

    params: dict
    encoder: EncoderConfig
    labels: list
    max_len_s: float = 4.0
    sample_rate: int = 16000

    @property
    def head(self) -> HeadParams:
        return HeadParams.from_params(self.params)

    def logits(self, waves, lengths) -> Tensor:
        latents, valid = encode(waves, lengths, self.params, self.encoder)
        context = transformer_encode(latents, valid, self.params, self.encoder)
        pooled = nc.mean_pool(context, valid)
        return mlp_head(pooled, self.head)


def softmax_np(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_batch(model: SpeakerModel, waves, lengths) -> np.ndarray:
    """Class probabilities [B, C] in float64."""
    logits = model.logits(waves, lengths).data.astype(np.float64)
    return softmax_np(logits)


def predict(clip, model: SpeakerModel, label_index=None):
    """Classify one clip from its first ``model.max_len_s`` seconds.

    Returns (speaker label, probabilities).
    """
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float32)
    max_len = int(round(model.max_len_s * model.sample_rate))
    samples = samples[:max_len]
    if model.encoder.n_frames(len(samples)) < 1:
        raise InputTooShort(f"clip of {len(samples)} samples is shorter than the "
                            f"receptive field ({model.encoder.receptive_field})")
    probs = predict_batch(model, samples[None, :], np.array([len(samples)]))[0]
    labels = model.labels
    if label_index is not None:
        labels = sorted(label_index, key=label_index.get)
    return labels[int(np.argmax(probs))], probs
