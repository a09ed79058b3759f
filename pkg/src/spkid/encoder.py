"""Representation stack: MFCC teacher features, convolutional latent encoder,
span masking and the transformer context network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dct

from spkid import numcore as nc
from spkid.errors import ClipTooShort, EmptyLabels, InputTooShort, ShapeMismatch
from spkid.numcore import Tensor

DEFAULT_CONV = ((64, 10, 5), (64, 3, 2), (64, 3, 2), (64, 3, 2),
                (64, 3, 2), (64, 2, 2), (64, 2, 2))

MFCC_WINDOW = 400
MFCC_HOP = 160
MFCC_NFFT = 512
MFCC_FILTERS = 26


@dataclass(frozen=True)
class EncoderConfig:
    conv_layers: tuple = DEFAULT_CONV
    model_dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_dim: int = 128
    mask_prob: float = 0.065
    mask_span: int = 10
    max_positions: int = 512

    def __post_init__(self):
        layers = tuple(tuple(int(v) for v in layer) for layer in self.conv_layers)
        object.__setattr__(self, "conv_layers", layers)
        if not layers:
            raise ValueError("need at least one conv layer")
        if any(c < 1 or w < 1 or s < 1 for c, w, s in layers):
            raise ValueError("conv layers need positive channels, width and stride")
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ValueError("mask_prob must lie in [0, 1)")
        if self.mask_span < 1:
            raise ValueError("mask_span must be >= 1")

    @property
    def hop(self) -> int:
        return math.prod(s for _, _, s in self.conv_layers)

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for _, w, s in self.conv_layers:
            rf += (w - 1) * jump
            jump *= s
        return rf

    def n_frames(self, n_samples) -> int:
        t = int(n_samples)
        for _, w, s in self.conv_layers:
            if t < w:
                return 0
            t = (t - w) // s + 1
        return t


@dataclass(frozen=True)
class MaskSpec:
    length: int
    spans: tuple = ()
    masked_indices: frozenset = field(default=frozenset())

    @classmethod
    def from_spans(cls, length, spans):
        idx = set()
        for start, n in spans:
            idx.update(range(start, start + n))
        return cls(length, tuple(spans), frozenset(idx))

    def as_bool(self) -> np.ndarray:
        out = np.zeros(self.length, dtype=bool)
        if self.masked_indices:
            out[sorted(self.masked_indices)] = True
        return out


# ---------------------------------------------------------------- MFCC


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(n_filters=MFCC_FILTERS, n_fft=MFCC_NFFT, sample_rate=16000,
                   fmin=0.0, fmax=8000.0):
    """Triangular filters on the HTK mel scale; returns (weights, centre_hz)."""
    mels = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_filters + 2)
    hz = _mel_to_hz(mels)
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    fb = np.zeros((n_filters, freqs.size))
    for i in range(n_filters):
        lo, mid, hi = hz[i], hz[i + 1], hz[i + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb, hz[1:-1]


def log_mel_energies(samples, sample_rate=16000):
    x = np.asarray(samples, dtype=np.float64)
    if x.size < MFCC_WINDOW:
        raise ClipTooShort(f"need at least {MFCC_WINDOW} samples, got {x.size}")
    n_frames = (x.size - MFCC_WINDOW) // MFCC_HOP + 1
    idx = np.arange(MFCC_WINDOW)[None, :] + MFCC_HOP * np.arange(n_frames)[:, None]
    window = np.hanning(MFCC_WINDOW + 2)[1:-1]
    spec = np.abs(np.fft.rfft(x[idx] * window, n=MFCC_NFFT)) ** 2 / MFCC_NFFT
    fb, _ = mel_filterbank(sample_rate=sample_rate)
    return np.log(spec @ fb.T + 1e-10)


def mfcc(clip, n_coeffs=13, sample_rate=16000) -> np.ndarray:
    """MFCCs, one row per 10 ms frame of 25 ms (Hann window, 26 mel filters)."""
    samples = getattr(clip, "samples", clip)
    sample_rate = getattr(clip, "sample_rate", sample_rate)
    logmel = log_mel_energies(samples, sample_rate)
    return dct(logmel, type=2, norm="ortho", axis=1)[:, :n_coeffs]


# ---------------------------------------------------------------- parameters


def init_encoder_params(config: EncoderConfig, seed=0, prefix="enc.") -> dict:
    rng = np.random.default_rng([seed, 101])
    d = config.model_dim
    p = {}

    def add(name, value):
        p[prefix + name] = Tensor(value, requires_grad=True, name=prefix + name)

    c_in = 1
    for i, (c_out, width, _) in enumerate(config.conv_layers):
        add(f"conv.{i}.weight", rng.normal(0.0, math.sqrt(2.0 / (c_in * width)),
                                           size=(c_out, c_in, width)))
        add(f"conv.{i}.ln.gamma", np.ones(c_out))
        add(f"conv.{i}.ln.beta", np.zeros(c_out))
        c_in = c_out
    if c_in != d:
        add("proj.weight", rng.normal(0.0, 1.0 / math.sqrt(c_in), size=(c_in, d)))
        add("proj.bias", np.zeros(d))
    add("mask_emb", rng.uniform(0.0, 1.0, size=d))
    add("pos_emb", rng.normal(0.0, 0.1, size=(config.max_positions, d)))
    for li in range(config.n_layers):
        pre = f"layer.{li}."
        for ln in ("ln1", "ln2"):
            add(pre + ln + ".gamma", np.ones(d))
            add(pre + ln + ".beta", np.zeros(d))
        for proj in ("q", "k", "v", "o"):
            add(pre + f"attn.{proj}.weight", rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)))
            add(pre + f"attn.{proj}.bias", np.zeros(d))
        add(pre + "ffn.w1", rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, config.ffn_dim)))
        add(pre + "ffn.b1", np.zeros(config.ffn_dim))
        add(pre + "ffn.w2", rng.normal(0.0, 1.0 / math.sqrt(config.ffn_dim),
                                        size=(config.ffn_dim, d)))
        add(pre + "ffn.b2", np.zeros(d))
    return p


# ---------------------------------------------------------------- forward passes


def frame_lengths(config: EncoderConfig, lengths) -> np.ndarray:
    return np.array([config.n_frames(n) for n in np.atleast_1d(lengths)], dtype=np.int64)


def feature_encoder(waveform, params, config: EncoderConfig, prefix="enc.") -> Tensor:
    """Conv stack (conv -> layer_norm -> gelu per layer): [.., time] -> [.., frames, d]."""
    x = waveform if isinstance(waveform, Tensor) else Tensor(waveform)
    if x.shape[-1] < config.receptive_field:
        raise InputTooShort(f"waveform of {x.shape[-1]} samples is shorter than the "
                            f"receptive field ({config.receptive_field})")
    h = nc.reshape(x, (*x.shape, 1))
    for i, (_, _, stride) in enumerate(config.conv_layers):
        h = nc.conv1d_time_major(h, params[f"{prefix}conv.{i}.weight"], stride)
        h = nc.layer_norm(h, params[f"{prefix}conv.{i}.ln.gamma"],
                          params[f"{prefix}conv.{i}.ln.beta"])
        h = nc.gelu(h)
    if f"{prefix}proj.weight" in params:
        h = nc.linear(h, params[f"{prefix}proj.weight"], params[f"{prefix}proj.bias"])
    return h


def sample_span_mask(length, mask_prob, mask_span, rng, min_spans=0) -> MaskSpec:
    """Each position starts a span with probability ``mask_prob``."""
    starts = np.flatnonzero(rng.random(length) < mask_prob)
    if starts.size < min_spans and length > 0:
        pool = np.setdiff1d(np.arange(length), starts)
        need = min(min_spans - starts.size, pool.size)
        starts = np.sort(np.concatenate([starts, rng.choice(pool, need, replace=False)]))
    spans = [(int(s), int(min(mask_span, length - s))) for s in starts]
    return MaskSpec.from_spans(length, spans)


def apply_mask(frames, mask_embedding, mask: np.ndarray) -> Tensor:
    """Replace frames where ``mask`` is set by ``mask_embedding``."""
    m = np.asarray(mask, dtype=frames.data.dtype)[..., None]
    return nc.add(nc.mul(frames, 1.0 - m), nc.mul(mask_embedding, m))


def span_mask(frames, mask_embedding, config: EncoderConfig, seed, min_spans=0):
    """Mask a single ``[T, d]`` sequence; returns (masked frames, MaskSpec)."""
    frames = nc.as_tensor(frames)
    if frames.ndim != 2:
        raise ShapeMismatch("span_mask expects [T, d]; use mask_batch for batches")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    spec = sample_span_mask(frames.shape[0], config.mask_prob, config.mask_span, rng, min_spans)
    if not spec.masked_indices:
        return frames, spec
    return apply_mask(frames, mask_embedding, spec.as_bool()), spec


def mask_batch(frames, valid_len, mask_embedding, config: EncoderConfig, rng, min_spans=0):
    """Span-mask each sequence of ``[B, T, d]`` within its valid length.

    Returns (masked frames, bool mask [B, T], list of MaskSpec).
    """
    b, t = frames.shape[:2]
    mask = np.zeros((b, t), dtype=bool)
    specs = []
    for i in range(b):
        spec = sample_span_mask(int(valid_len[i]), config.mask_prob, config.mask_span,
                                rng, min_spans)
        specs.append(spec)
        mask[i, :spec.length] = spec.as_bool()
    return apply_mask(frames, mask_embedding, mask), mask, specs


def attention_bias(valid_mask, dtype) -> np.ndarray:
    """Additive key bias [B, 1, 1, T]: 0 at valid keys, -1e9 at padding."""
    valid_mask = np.asarray(valid_mask, dtype=bool)
    return np.where(valid_mask, 0.0, -1e9).astype(dtype)[:, None, None, :]


def self_attention(x, valid_mask, params, pre, n_heads, return_weights=False):
    b, t, d = x.shape
    dh = d // n_heads

    def heads(name):
        y = nc.linear(x, params[pre + f"attn.{name}.weight"], params[pre + f"attn.{name}.bias"])
        return nc.transpose(nc.reshape(y, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = nc.mul(nc.matmul(q, nc.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dh))
    scores = nc.add(scores, attention_bias(valid_mask, x.data.dtype))
    weights = nc.softmax(scores, axis=-1)
    ctx = nc.matmul(weights, v)
    ctx = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
    out = nc.linear(ctx, params[pre + "attn.o.weight"], params[pre + "attn.o.bias"])
    return (out, weights) if return_weights else out


def transformer_encode(frames, valid_mask, params, config: EncoderConfig, prefix="enc.",
                       return_hidden=False):
    """Pre-norm transformer over ``[B, T, d]`` (or ``[T, d]``) frames.

    ``hidden[0]`` is the position-embedded input and ``hidden[i]`` the output
    of block ``i``.  Padding frames (``valid_mask`` False) are never attended to.
    """
    x = nc.as_tensor(frames)
    single = x.ndim == 2
    if single:
        x = nc.reshape(x, (1, *x.shape))
        valid_mask = None if valid_mask is None else np.asarray(valid_mask)[None]
    b, t, d = x.shape
    if d != config.model_dim:
        raise ShapeMismatch(f"frames have dim {d}, config.model_dim is {config.model_dim}")
    if t > config.max_positions:
        raise ShapeMismatch(f"{t} frames exceed max_positions {config.max_positions}")
    if valid_mask is None:
        valid_mask = np.ones((b, t), dtype=bool)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if valid_mask.shape != (b, t):
        raise ShapeMismatch(f"valid_mask {valid_mask.shape} for frames {(b, t)}")

    pos = nc.getitem(params[prefix + "pos_emb"], slice(0, t))
    h = nc.add(x, pos)
    hidden = [h]
    for li in range(config.n_layers):
        pre = f"{prefix}layer.{li}."
        a = nc.layer_norm(h, params[pre + "ln1.gamma"], params[pre + "ln1.beta"])
        h = nc.add(h, self_attention(a, valid_mask, params, pre, config.n_heads))
        f = nc.layer_norm(h, params[pre + "ln2.gamma"], params[pre + "ln2.beta"])
        f = nc.gelu(nc.linear(f, params[pre + "ffn.w1"], params[pre + "ffn.b1"]))
        h = nc.add(h, nc.linear(f, params[pre + "ffn.w2"], params[pre + "ffn.b2"]))
        hidden.append(h)
    if single:
        h = nc.reshape(h, (t, d))
        hidden = [nc.reshape(s, (t, d)) for s in hidden]
    return (h, hidden) if return_hidden else h


def encode(waves, lengths, params, config: EncoderConfig, prefix="enc."):
    """Waveform batch -> (latents [B,T,d], valid frame mask [B,T])."""
    latents = feature_encoder(waves, params, config, prefix)
    n_valid = frame_lengths(config, lengths)
    t = latents.shape[-2]
    valid = np.arange(t)[None, :] < n_valid[:, None]
    return latents, valid


# ---------------------------------------------------------------- label alignment


def frame_align(teacher_labels, target_len, teacher_hop=MFCC_HOP, teacher_window=MFCC_WINDOW,
                latent_hop=320, latent_window=400, offset=0) -> np.ndarray:
    """Map teacher frame labels onto latent frames by nearest window centre.

    ``offset`` is the sample position of the first latent window relative to
    the first teacher window (non-zero for cropped clips).  Ties go to the
    earlier teacher frame.
    """
    labels = np.asarray(teacher_labels)
    if labels.size == 0:
        raise EmptyLabels("no teacher labels to align")
    t = np.arange(int(target_len), dtype=np.int64)
    # offset of latent centre from first teacher centre, in half-samples
    num2 = 2 * (t * latent_hop + int(offset)) + latent_window - teacher_window
    den2 = 2 * teacher_hop
    # nearest index = ceil(num2/den2 - 1/2), which rounds exact halves down
    idx = -((-(num2 - teacher_hop)) // den2)
    idx = np.clip(idx, 0, labels.size - 1)
    return labels[idx]
