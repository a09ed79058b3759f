"""Training loops (pretraining and fine-tuning), logs, checkpoints, evaluation.

Every loop follows the same shape: sample a mini-batch, run the encoder,
compute the objective, backpropagate, take an Adam step, record the training
loss; every ``eval_interval`` steps compute the validation loss and keep the
parameters with the best one.
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from spkid import numcore as nc
from spkid.audio_io import ClipCache, Manifest, batch_iter
from spkid.classify import HeadParams, SpeakerModel, class_weights, mlp_head, softmax_np
from spkid.encoder import (
    MFCC_HOP,
    MFCC_WINDOW,
    EncoderConfig,
    encode,
    frame_align,
    init_encoder_params,
    mask_batch,
    mfcc,
    transformer_encode,
)
from spkid.errors import (
    ConfigError,
    CorruptCheckpoint,
    DivergedLoss,
    EmptySplit,
    ShapeMismatch,
    VersionMismatch,
)
from spkid.metrics import MetricsReport, confusion_matrix, precision_recall_f1
from spkid.numcore import Tensor
from spkid.objectives import (
    Codebook,
    kmeans_assign,
    kmeans_fit,
    masked_prediction_loss,
    pretrain_loss_w2v,
)

log = logging.getLogger(__name__)

OBJECTIVES = ("w2v", "hubert", "finetune")
CHECKPOINT_MAGIC = b"SPKIDCKP"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------- configuration


@dataclass
class TrainConfig:
    objective: str = "finetune"
    max_iter: int = 500
    batch_size: int = 8
    lr: float = 0.0  # 0 picks the objective default
    seed: int = 0
    eval_interval: int = 10
    patience: int = 10
    max_len_s: float = 4.0
    float64: bool = False
    freeze_encoder: bool = False
    weighted: bool = True
    head_hidden: int = 0  # 0 means 2 * model_dim
    checkpoint_dir: str = ""
    # contrastive objective
    num_distractors: int = 10
    kappa: float = 0.1
    alpha: float = 0.1
    codebook_groups: int = 2
    codebook_entries: int = 32
    gumbel_temperature: float = 2.0
    gumbel_temperature_end: float = 0.5
    # masked cluster prediction
    n_clusters: int = 100
    kmeans_iters: int = 100
    mfcc_coeffs: int = 13
    teacher_max_frames: int = 100_000
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    @property
    def learning_rate(self) -> float:
        if self.lr > 0:
            return self.lr
        return 1e-3 if self.objective == "finetune" else 5e-4

    @property
    def dtype(self):
        return np.float64 if self.float64 else np.float32

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["encoder"]["conv_layers"] = [list(layer) for layer in self.encoder.conv_layers]
        return out

    @classmethod
    def from_dict(cls, data) -> "TrainConfig":
        data = dict(data)
        enc = dict(data.pop("encoder", {}))
        if "conv_layers" in enc:
            enc["conv_layers"] = tuple(tuple(layer) for layer in enc["conv_layers"])
        try:
            return cls(encoder=EncoderConfig(**enc), **data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def replace(self, **changes) -> "TrainConfig":
        enc_keys = {f.name for f in dataclasses.fields(EncoderConfig)}
        enc_changes = {k: changes.pop(k) for k in list(changes) if k in enc_keys}
        encoder = dataclasses.replace(self.encoder, **enc_changes) if enc_changes else self.encoder
        return dataclasses.replace(self, encoder=encoder, **changes)


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "encoder"}
_ENCODER_FIELDS = {f.name: f for f in dataclasses.fields(EncoderConfig)}
_FIELD_TYPES = {
    **{name: type(f.default) for name, f in _TRAIN_FIELDS.items()},
    **{name: type(f.default) for name, f in _ENCODER_FIELDS.items()},
}


def _parse_value(key, text):
    kind = _FIELD_TYPES[key]
    text = text.strip()
    try:
        if key == "conv_layers":
            return tuple(tuple(int(v) for v in part.split(":")) for part in text.split(","))
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config(text, overrides=None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.  Unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value)
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(key, value) if isinstance(value, str) else value
    enc = {k: values.pop(k) for k in list(values) if k in _ENCODER_FIELDS}
    try:
        return TrainConfig(encoder=EncoderConfig(**enc), **values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides=None) -> TrainConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read(), overrides)


def format_config(config: TrainConfig) -> str:
    lines = []
    for name in _TRAIN_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(config, name))}")
    for name in _ENCODER_FIELDS:
        lines.append(f"{name} = {_format_value(getattr(config.encoder, name))}")
    return "\n".join(lines) + "\n"


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(":".join(str(v) for v in layer) for layer in value)
    return str(value)


# ---------------------------------------------------------------- logs


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (step, TL, VL or None)
    evals: list = field(default_factory=list)  # per-evaluation extras

    def record(self, step, tl, vl=None):
        if self.rows and step <= self.rows[-1][0]:
            raise ValueError("TrainLog steps must be strictly increasing")
        self.rows.append((int(step), float(tl), None if vl is None else float(vl)))

    def set_vl(self, vl):
        step, tl, _ = self.rows[-1]
        self.rows[-1] = (step, tl, float(vl))

    def to_csv(self) -> str:
        out = ["step,TL,VL"]
        for step, tl, vl in self.rows:
            out.append(f"{step},{tl!r},{'' if vl is None else repr(vl)}")
        return "\n".join(out) + "\n"

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        out = cls()
        with open(path, newline="", encoding="utf-8") as f:
            for row in csv.DictReader(f):
                out.rows.append((int(row["step"]), float(row["TL"]),
                                 float(row["VL"]) if row["VL"] else None))
        return out

    @property
    def steps(self) -> int:
        return self.rows[-1][0] if self.rows else 0


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    tensors: dict  # name -> float32 array
    config: dict
    meta: dict = field(default_factory=dict)
    path: Optional[str] = None

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)


def save_checkpoint(tensors, config, path, meta=None) -> None:
    """JSON header with a tensor directory, then little-endian float32 payload."""
    directory = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        value = tensors[name]
        # asarray keeps 0-d tensors 0-d, unlike ascontiguousarray
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f4",
                         order="C")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset,
                          "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    if isinstance(config, TrainConfig):
        config = config.to_dict()
    header = {"format_version": CHECKPOINT_VERSION, "config": config, "meta": meta or {},
              "tensors": directory, "payload_bytes": offset}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for chunk in chunks:
                f.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def _read_header(f, file_size):
    magic = f.read(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad checkpoint magic")
    raw = f.read(8)
    if len(raw) != 8:
        raise CorruptCheckpoint("truncated header length")
    (n,) = struct.unpack("<Q", raw)
    if n > file_size:
        raise CorruptCheckpoint("header length exceeds file size")
    blob = f.read(n)
    if len(blob) != n:
        raise CorruptCheckpoint("truncated header")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError):
        raise CorruptCheckpoint("header is not valid JSON") from None
    if not isinstance(header, dict):
        raise CorruptCheckpoint("header is not a JSON object")
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint format {version!r}, expected {CHECKPOINT_VERSION}")
    _validate_directory(header)
    return header, len(CHECKPOINT_MAGIC) + 8 + n


def _validate_directory(header):
    try:
        directory = header["tensors"]
        payload = header["payload_bytes"]
        if not isinstance(directory, list) or not isinstance(payload, int):
            raise TypeError
        pos = 0
        names = set()
        for item in sorted(directory, key=lambda d: d["offset"]):
            name, shape, off, nbytes = item["name"], item["shape"], item["offset"], item["nbytes"]
            if not isinstance(name, str) or name in names:
                raise CorruptCheckpoint("bad or duplicate tensor name")
            names.add(name)
            if not isinstance(shape, list) or not all(isinstance(s, int) and s >= 0 for s in shape):
                raise CorruptCheckpoint(f"bad shape for {name}")
            if off != pos or nbytes != 4 * math.prod(shape):
                raise CorruptCheckpoint(f"tensor {name} does not tile the payload")
            pos += nbytes
        if pos != payload:
            raise CorruptCheckpoint("tensor directory does not cover the payload")
        if not isinstance(header.get("config"), dict) or not isinstance(header.get("meta"), dict):
            raise CorruptCheckpoint("missing config or meta")
    except (KeyError, TypeError):
        raise CorruptCheckpoint("malformed tensor directory") from None


def read_checkpoint_header(path) -> dict:
    """Header only (config, meta, tensor names/shapes); the payload is not read."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        header, _ = _read_header(f, size)
    return header


def load_checkpoint(path) -> Checkpoint:
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        header, start = _read_header(f, size)
        payload = f.read()
    if len(payload) != header["payload_bytes"]:
        raise CorruptCheckpoint(f"payload has {len(payload)} bytes, "
                                f"header declares {header['payload_bytes']}")
    tensors = {}
    for item in header["tensors"]:
        a = np.frombuffer(payload, dtype="<f4", count=math.prod(item["shape"]),
                          offset=item["offset"])
        tensors[item["name"]] = a.reshape(item["shape"]).astype(np.float32)
    return Checkpoint(tensors, header["config"], header["meta"], str(path))


def _snapshot(params) -> dict:
    return {name: p.data.copy() for name, p in params.items()}


def params_from_arrays(arrays, dtype) -> dict:
    return {name: Tensor(np.asarray(a), requires_grad=True, name=name, dtype=dtype)
            for name, a in arrays.items()}


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> SpeakerModel:
    config = ckpt.train_config()
    params = params_from_arrays(ckpt.tensors, dtype)
    labels = ckpt.meta.get("labels")
    if not labels or "head.out" not in params:
        raise CorruptCheckpoint("checkpoint has no classification head")
    return SpeakerModel(params, config.encoder, list(labels), config.max_len_s)


# ---------------------------------------------------------------- teacher labels


@dataclass
class TeacherLabels:
    """Per-clip frame labels at a fixed frame geometry (hop/window in samples)."""

    labels: dict
    k: int
    hop: int = MFCC_HOP
    window: int = MFCC_WINDOW

    def aligned(self, batch, n_frames, config: EncoderConfig) -> np.ndarray:
        out = np.zeros((len(batch.paths), n_frames), dtype=np.int64)
        for i, path in enumerate(batch.paths):
            offset = 0 if batch.offsets is None else int(batch.offsets[i])
            out[i] = frame_align(self.labels[path], n_frames, self.hop, self.window,
                                 config.hop, config.receptive_field, offset)
        return out


def teacher_hash(config: TrainConfig) -> str:
    key = {"mfcc_coeffs": config.mfcc_coeffs, "n_clusters": config.n_clusters,
           "kmeans_iters": config.kmeans_iters, "teacher_max_frames": config.teacher_max_frames,
           "seed": config.seed, "window": MFCC_WINDOW, "hop": MFCC_HOP}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def save_teacher_cache(path, teacher: TeacherLabels, config_hash):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps({"config_hash": config_hash, "k": teacher.k, "hop": teacher.hop,
                            "window": teacher.window}, sort_keys=True) + "\n")
        for p in sorted(teacher.labels):
            f.write(json.dumps({"path": p, "labels": [int(v) for v in teacher.labels[p]]}) + "\n")


def load_teacher_cache(path, config_hash) -> Optional[TeacherLabels]:
    """Cached labels, or None when absent, unreadable or built with another config."""
    try:
        with open(path, encoding="utf-8") as f:
            head = json.loads(f.readline())
            if head.get("config_hash") != config_hash:
                return None
            labels = {}
            for line in f:
                row = json.loads(line)
                labels[row["path"]] = np.asarray(row["labels"], dtype=np.int64)
    except (OSError, ValueError, KeyError, AttributeError):
        return None
    return TeacherLabels(labels, int(head["k"]), int(head["hop"]), int(head["window"]))


def compute_mfcc_teacher(config: TrainConfig, manifest: Manifest, load=None) -> TeacherLabels:
    """First-iteration teacher: k-means over MFCC frames of the training split."""
    load = load or ClipCache()
    feats = {e.path: mfcc(load(e.path), config.mfcc_coeffs) for e in manifest.entries}
    train_paths = sorted(e.path for e in manifest.split("train"))
    if not train_paths:
        raise EmptySplit("teacher fitting needs a non-empty train split")
    pool = np.concatenate([feats[p] for p in train_paths])
    rng = np.random.default_rng([config.seed, 404])
    if pool.shape[0] > config.teacher_max_frames:
        pool = pool[np.sort(rng.choice(pool.shape[0], config.teacher_max_frames, replace=False))]
    centroids = kmeans_fit(pool, config.n_clusters, config.kmeans_iters, seed=config.seed)
    labels = {p: kmeans_assign(f, centroids) for p, f in feats.items()}
    return TeacherLabels(labels, config.n_clusters)


def mfcc_teacher(config: TrainConfig, manifest: Manifest, load=None) -> TeacherLabels:
    """MFCC teacher, read from / written to the cache beside ``checkpoint_dir``."""
    cache = None
    if config.checkpoint_dir:
        cache = os.path.join(os.path.dirname(os.path.abspath(config.checkpoint_dir)) or ".",
                             os.path.basename(os.path.normpath(config.checkpoint_dir))
                             + ".teacher.jsonl")
        h = teacher_hash(config)
        cached = load_teacher_cache(cache, h)
        if cached is not None and set(cached.labels) >= {e.path for e in manifest.entries}:
            return cached
    teacher = compute_mfcc_teacher(config, manifest, load)
    if cache:
        save_teacher_cache(cache, teacher, teacher_hash(config))
    return teacher


# ---------------------------------------------------------------- model assembly


def build_params(config: TrainConfig, n_classes=None, n_clusters=None) -> dict:
    d = config.encoder.model_dim
    with nc.precision(config.dtype):
        params = init_encoder_params(config.encoder, config.seed)
        rng = np.random.default_rng([config.seed, 505])
        if config.objective == "w2v":
            params.update(Codebook.init(d, config.codebook_groups, config.codebook_entries,
                                        config.seed).params())
            params["w2v.final_proj.weight"] = Tensor(
                rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)), requires_grad=True)
            params["w2v.final_proj.bias"] = Tensor(np.zeros(d), requires_grad=True)
        elif config.objective == "hubert":
            k = n_clusters or config.n_clusters
            params["hubert.proj"] = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, k)),
                                           requires_grad=True)
        else:
            head = HeadParams.init(d, n_classes, config.head_hidden or None, config.seed)
            params.update(head.params())
        for name, p in params.items():
            p.name = name
    return params


def load_encoder_weights(params, init: Checkpoint):
    """Copy every ``enc.*`` tensor from ``init`` into ``params`` (shapes must agree)."""
    copied = 0
    for name, value in init.tensors.items():
        if not name.startswith("enc."):
            continue
        if name not in params:
            raise ShapeMismatch(f"checkpoint tensor {name} has no counterpart in the model")
        if tuple(params[name].shape) != tuple(value.shape):
            raise ShapeMismatch(f"{name}: checkpoint {value.shape} vs model {params[name].shape}")
        params[name].data = np.asarray(value, dtype=params[name].data.dtype).copy()
        copied += 1
    return copied


# ---------------------------------------------------------------- shared loop


def _batch_seed(config, epoch):
    return int(np.random.default_rng([config.seed, 606, epoch]).integers(2**63))


def _gumbel_temperature(config, step):
    frac = 0.0 if config.max_iter <= 1 else (step - 1) / (config.max_iter - 1)
    t0, t1 = config.gumbel_temperature, config.gumbel_temperature_end
    return t0 * (t1 / t0) ** frac


def _train_loop(config, manifest, params, trainable, step_fn, val_fn, meta, progress=None):
    trainlog = TrainLog()
    opt = nc.Adam([params[n] for n in trainable], lr=config.learning_rate)
    load = ClipCache()
    best = {"vl": math.inf, "arrays": None, "step": 0}
    last_good = _snapshot(params)
    bad_evals = 0
    step = 0
    epoch = 0
    ckpt_path = os.path.join(config.checkpoint_dir, "best.ckpt") if config.checkpoint_dir else None

    def save(arrays, path, extra):
        if path:
            save_checkpoint(arrays, config, path, {**meta, **extra})

    stop = False
    while not stop:
        batches = batch_iter(manifest, "train", config.batch_size, config.max_len_s,
                             seed=_batch_seed(config, epoch), random_crop=True, load=load)
        for batch in batches:
            step += 1
            loss, parts = step_fn(batch, step)
            tl = loss.item()
            if not math.isfinite(tl):
                arrays = best["arrays"] or last_good
                path = (os.path.join(config.checkpoint_dir, "last_good.ckpt")
                        if config.checkpoint_dir else None)
                save(arrays, path, {"diverged_at": step})
                raise DivergedLoss(f"training loss is {tl} at step {step}", path)
            opt.zero_grad()
            loss.backward()
            opt.step()
            trainlog.record(step, tl)
            if progress:
                progress(step, tl, parts)
            if step % config.eval_interval == 0 or step == config.max_iter:
                vl, extras = val_fn()
                trainlog.set_vl(vl)
                trainlog.evals.append({"step": step, "vl": vl, **extras})
                if progress:
                    progress(step, tl, {"VL": vl, **extras})
                if vl < best["vl"]:
                    best.update(vl=vl, arrays=_snapshot(params), step=step)
                    bad_evals = 0
                    save(best["arrays"], ckpt_path, {"best_vl": vl, "best_step": step})
                else:
                    bad_evals += 1
                last_good = _snapshot(params)
                if config.objective == "finetune" and bad_evals >= config.patience:
                    stop = True
            if step >= config.max_iter:
                stop = True
            if stop:
                break
        epoch += 1

    if config.checkpoint_dir:
        os.makedirs(config.checkpoint_dir, exist_ok=True)
        trainlog.write_csv(os.path.join(config.checkpoint_dir, "trainlog.csv"))
        with open(os.path.join(config.checkpoint_dir, "config.txt"), "w", encoding="utf-8") as f:
            f.write(format_config(config))
    arrays = {n: np.asarray(a, dtype=np.float32) for n, a in best["arrays"].items()}
    ckpt = Checkpoint(arrays, config.to_dict(),
                      {**meta, "best_vl": best["vl"], "best_step": best["step"]}, ckpt_path)
    return ckpt, trainlog


# ---------------------------------------------------------------- pretraining


def _encode_masked(params, config, batch, rng, min_spans):
    enc = config.encoder
    latents, valid = encode(batch.waves, batch.lengths, params, enc)
    masked, mask, _ = mask_batch(latents, valid.sum(axis=1), params["enc.mask_emb"], enc, rng,
                                 min_spans)
    context = transformer_encode(masked, valid, params, enc)
    return latents, context, mask, valid


def w2v_loss(params, config, batch, rng, temperature):
    latents, context, mask, _ = _encode_masked(params, config, batch, rng, min_spans=2)
    context = nc.linear(context, params["w2v.final_proj.weight"], params["w2v.final_proj.bias"])
    codebook = Codebook.from_params(params)
    return pretrain_loss_w2v(context, latents, codebook, mask, config.num_distractors,
                             config.kappa, config.alpha, temperature, rng)


def hubert_loss(params, config, batch, rng, teacher: TeacherLabels, with_accuracy=False):
    _, context, mask, valid = _encode_masked(params, config, batch, rng, min_spans=1)
    labels = teacher.aligned(batch, context.shape[1], config.encoder)
    mask = mask & valid
    loss = masked_prediction_loss(context, labels, mask, params["hubert.proj"])
    parts = {}
    if with_accuracy:
        logits = context.data[mask] @ params["hubert.proj"].data
        parts["correct"] = int((logits.argmax(axis=1) == labels[mask]).sum())
        parts["masked"] = int(mask.sum())
    return loss, parts


def pretrain_validation(params, config, manifest, teacher=None, split="val", load=None):
    """Deterministic objective value on ``split`` (fixed masks, noise and crops).

    Returns (mean loss, extras); for masked cluster prediction the extras hold
    the masked-frame prediction accuracy.
    """
    entries = manifest.split(split)
    if not entries:
        raise EmptySplit(f"split {split!r} is empty")
    rng = np.random.default_rng([config.seed, 707])
    total, weight = 0.0, 0
    correct = masked = 0
    with nc.precision(config.dtype):
        for batch in batch_iter(manifest, split, config.batch_size, config.max_len_s, seed=0,
                                random_crop=False, shuffle=False, load=load):
            if config.objective == "w2v":
                loss, _ = w2v_loss(params, config, batch, rng, config.gumbel_temperature_end)
            else:
                loss, parts = hubert_loss(params, config, batch, rng, teacher, with_accuracy=True)
                correct += parts["correct"]
                masked += parts["masked"]
            n = len(batch.paths)
            total += loss.item() * n
            weight += n
    extras = {}
    if config.objective == "hubert":
        extras["masked_accuracy"] = correct / max(masked, 1)
    return total / weight, extras


def pretrain(config: TrainConfig, manifest: Manifest, teacher: Optional[TeacherLabels] = None,
             init: Optional[Checkpoint] = None, progress=None):
    """Self-supervised pretraining; returns (best-VL Checkpoint, TrainLog).

    For ``hubert`` the MFCC k-means teacher is computed (or read from cache)
    when ``teacher`` is not given.
    """
    if config.objective not in ("w2v", "hubert"):
        raise ConfigError("pretrain needs objective w2v or hubert")
    if not manifest.split("val"):
        raise EmptySplit("pretraining needs a non-empty val split")
    load = ClipCache()
    with nc.precision(config.dtype):
        if config.objective == "hubert" and teacher is None:
            teacher = mfcc_teacher(config, manifest, load)
        n_clusters = teacher.k if teacher is not None else None
        params = build_params(config, n_clusters=n_clusters)
        if init is not None:
            load_encoder_weights(params, init)
        meta = {"objective": config.objective, "labels": manifest.labels}
        if teacher is not None:
            meta["teacher_k"] = teacher.k

        def step_fn(batch, step):
            rng = np.random.default_rng([config.seed, 808, step])
            if config.objective == "w2v":
                return w2v_loss(params, config, batch, rng, _gumbel_temperature(config, step))
            return hubert_loss(params, config, batch, rng, teacher)

        def val_fn():
            return pretrain_validation(params, config, manifest, teacher, load=load)

        return _train_loop(config, manifest, params, list(params), step_fn, val_fn, meta, progress)


# ---------------------------------------------------------------- fine-tuning


def finetune_loss(model: SpeakerModel, batch, weights):
    logits = model.logits(batch.waves, batch.lengths)
    return nc.weighted_cross_entropy(logits, batch.targets, weights), logits


def finetune_validation(model: SpeakerModel, config, manifest, weights, split="val", load=None):
    """Deterministic weighted cross-entropy on ``split`` plus macro-F1/accuracy."""
    entries = manifest.split(split)
    if not entries:
        raise EmptySplit(f"split {split!r} is empty")
    logits_all, targets_all = [], []
    with nc.precision(config.dtype):
        for batch in batch_iter(manifest, split, max(config.batch_size, 16), config.max_len_s,
                                seed=0, random_crop=False, shuffle=False, load=load):
            logits_all.append(model.logits(batch.waves, batch.lengths).data)
            targets_all.append(batch.targets)
    logits = np.concatenate(logits_all)
    targets = np.concatenate(targets_all)
    vl = nc.weighted_cross_entropy(Tensor(logits, dtype=logits.dtype), targets, weights).item()
    preds = logits.argmax(axis=1)
    report = precision_recall_f1(confusion_matrix(preds, targets, manifest.n_classes))
    return vl, {"macro_f1": report.macro_f1, "accuracy": report.accuracy}


def finetune(config: TrainConfig, manifest: Manifest, init: Optional[Checkpoint] = None,
             progress=None):
    """Supervised training of encoder + head with (optionally) weighted cross-entropy.

    Early-stops after ``patience`` evaluations without a VL improvement.
    """
    if config.objective != "finetune":
        config = config.replace(objective="finetune")
    c = manifest.n_classes
    weights = class_weights(manifest, "train") if config.weighted else np.ones(c)
    if not manifest.split("val"):
        raise EmptySplit("fine-tuning needs a non-empty val split")
    load = ClipCache()
    with nc.precision(config.dtype):
        params = build_params(config, n_classes=c)
        if init is not None:
            load_encoder_weights(params, init)
        model = SpeakerModel(params, config.encoder, manifest.labels, config.max_len_s)
        trainable = [n for n in params if not (config.freeze_encoder and n.startswith("enc."))]
        for n in params:
            if n not in trainable:
                params[n].requires_grad = False
        meta = {"objective": "finetune", "labels": manifest.labels,
                "class_weights": [float(w) for w in weights]}

        def step_fn(batch, step):
            loss, _ = finetune_loss(model, batch, weights)
            return loss, {}

        def val_fn():
            return finetune_validation(model, config, manifest, weights, load=load)

        return _train_loop(config, manifest, params, trainable, step_fn, val_fn, meta, progress)


# ---------------------------------------------------------------- evaluation


def evaluate(model: SpeakerModel, manifest: Manifest, split="test", batch_size=16) -> MetricsReport:
    """Predict every clip of ``split`` (manifest order) and score the predictions."""
    entries = manifest.split(split)
    if not entries:
        raise EmptySplit(f"split {split!r} is empty")
    dtype = next(iter(model.params.values())).data.dtype
    preds, targets = [], []
    with nc.precision(dtype):
        for batch in batch_iter(manifest, split, batch_size, model.max_len_s, seed=0,
                                random_crop=False, shuffle=False):
            probs = softmax_np(model.logits(batch.waves, batch.lengths).data.astype(np.float64))
            preds.append(probs.argmax(axis=1))
            targets.append(batch.targets)
    cm = confusion_matrix(np.concatenate(preds), np.concatenate(targets), manifest.n_classes,
                          manifest.labels)
    return precision_recall_f1(cm)


def steps_to_threshold(trainlog: TrainLog, key="macro_f1", threshold=0.95):
    """First evaluated step whose ``key`` reaches ``threshold`` (None if never)."""
    for row in trainlog.evals:
        if row.get(key, -math.inf) >= threshold:
            return row["step"]
    return None


def hubert_masked_accuracy(ckpt: Checkpoint, manifest, teacher, split="test") -> float:
    config = ckpt.train_config()
    with nc.precision(config.dtype):
        params = params_from_arrays(ckpt.tensors, config.dtype)
        _, extras = pretrain_validation(params, config, manifest, teacher, split=split)
    return extras["masked_accuracy"]


def w2v_contrastive_value(ckpt: Checkpoint, manifest, split="val") -> float:
    """Mean contrastive loss (no diversity term) on ``split`` with fixed noise and masks."""
    config = ckpt.train_config().replace(alpha=0.0)
    with nc.precision(config.dtype):
        params = params_from_arrays(ckpt.tensors, config.dtype)
        value, _ = pretrain_validation(params, config, manifest, split=split)
    return value
