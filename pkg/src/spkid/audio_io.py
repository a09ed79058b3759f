"""WAV decoding/encoding, corpus manifests and batched views.

Only 16-bit PCM mono RIFF/WAVE is accepted.  Manifests are line-delimited
JSON with exactly the keys ``path``, ``speaker``, ``split``, ``duration_s``.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional

import numpy as np

from spkid.errors import (
    ClassTooSmall,
    DuplicatePath,
    EmptySplit,
    NotWav,
    ParseError,
    Truncated,
    UnsupportedFormat,
)

DEFAULT_SAMPLE_RATE = 16000
SPLITS = ("train", "val", "test")
MANIFEST_KEYS = frozenset({"path", "speaker", "split", "duration_s"})


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    source_path: Optional[str] = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError("AudioClip holds mono samples only")
        if samples.size and (samples.min() < -1.0 or samples.max() > 1.0):
            raise ValueError("samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path) -> AudioClip:
    """Decode a PCM16 mono WAV file; amplitudes are ``raw / 32768``."""
    with open(path, "rb") as f:
        blob = f.read()
    samples, rate = decode_wav(blob)
    return AudioClip(samples, rate, source_path=str(path))


def decode_wav(blob: bytes):
    """Return ``(samples, sample_rate)`` from an in-memory WAV file."""
    if len(blob) < 12 or blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise NotWav("missing RIFF/WAVE header")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(blob):
        chunk_id = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body_start = pos + 8
        if body_start + size > len(blob):
            raise Truncated(f"chunk {chunk_id!r} declares {size} bytes, "
                            f"{len(blob) - body_start} available")
        body = blob[body_start:body_start + size]
        if chunk_id == b"fmt ":
            if size < 16:
                raise UnsupportedFormat("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
            break
        pos = body_start + size + (size & 1)
    if fmt is None:
        raise UnsupportedFormat("no fmt chunk before data")
    tag, channels, rate, _, _, bits = fmt
    if tag != 1 or bits != 16:
        raise UnsupportedFormat(f"need PCM16, got format tag {tag} with {bits} bits")
    if channels != 1:
        raise UnsupportedFormat(f"need mono, got {channels} channels")
    if rate <= 0:
        raise UnsupportedFormat("sample rate must be positive")
    if data is None:
        raise Truncated("no data chunk")
    if len(data) % 2:
        raise Truncated("data chunk holds a partial sample")
    raw = np.frombuffer(data, dtype="<i2")
    return raw.astype(np.float32) / 32768.0, rate


def encode_wav(samples, sample_rate=DEFAULT_SAMPLE_RATE) -> bytes:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size and (samples.min() < -1.0 or samples.max() > 1.0):
        raise ValueError("samples must lie in [-1, 1]")
    # scale 32768 keeps k/32768 exact on round trip; +1.0 clamps to 32767
    raw = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    payload = raw.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16,
        b"data", len(payload),
    )
    return header + payload


def write_wav(clip: AudioClip, path) -> None:
    with open(path, "wb") as f:
        f.write(encode_wav(clip.samples, clip.sample_rate))


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    speaker: str
    split: str
    duration_s: float

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")


@dataclass(frozen=True)
class Manifest:
    entries: tuple = ()
    label_index: dict = field(default_factory=dict)

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        seen = set()
        for e in entries:
            if e.path in seen:
                raise DuplicatePath(e.path)
            seen.add(e.path)
        if not self.label_index:
            labels = sorted({e.speaker for e in entries})
            object.__setattr__(self, "label_index", {s: i for i, s in enumerate(labels)})

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> list:
        return sorted(self.label_index, key=self.label_index.get)

    @property
    def n_classes(self) -> int:
        return len(self.label_index)

    def split(self, name) -> list:
        return [e for e in self.entries if e.split == name]

    def class_id(self, speaker) -> int:
        return self.label_index[speaker]


def load_manifest(path) -> Manifest:
    """Parse a JSONL manifest; relative paths resolve against its directory."""
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError:
                raise ParseError("not valid UTF-8", lineno) from None
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except (json.JSONDecodeError, RecursionError) as exc:
                raise ParseError(f"invalid JSON: {getattr(exc, 'msg', exc)}", lineno) from None
            if not isinstance(row, dict) or set(row) != MANIFEST_KEYS:
                raise ParseError(f"expected keys {sorted(MANIFEST_KEYS)}", lineno)
            p, spk, split, dur = row["path"], row["speaker"], row["split"], row["duration_s"]
            if not isinstance(p, str) or not isinstance(spk, str) or not p or not spk:
                raise ParseError("path and speaker must be non-empty strings", lineno)
            if split not in SPLITS:
                raise ParseError(f"unknown split {split!r}", lineno)
            if isinstance(dur, bool) or not isinstance(dur, (int, float)) \
                    or not math.isfinite(dur) or dur <= 0:
                raise ParseError("duration_s must be a positive number", lineno)
            full = os.path.normpath(os.path.join(root, p))
            if full in seen:
                raise DuplicatePath(f"line {lineno}: {p}")
            seen.add(full)
            entries.append(ManifestEntry(full, spk, split, float(dur)))
    return Manifest(tuple(entries))


def save_manifest(manifest: Manifest, path) -> None:
    """Write JSONL; paths under the manifest directory are stored relative."""
    root = os.path.dirname(os.path.abspath(path))
    lines = []
    for e in manifest.entries:
        p = os.path.abspath(e.path)
        rel = os.path.relpath(p, root)
        if not rel.startswith(".."):
            p = rel.replace(os.sep, "/")
        row = {"path": p, "speaker": e.speaker, "split": e.split,
               "duration_s": round(e.duration_s, 6)}
        lines.append(json.dumps(row, sort_keys=True))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(line + "\n" for line in lines))


def apportion(count: int, ratios) -> list:
    """Split ``count`` items by ``ratios`` so each share is within 1 of count*ratio.

    Floors first; leftover items go to splits that would otherwise be empty,
    then by largest remainder, ties to the earlier split.
    """
    ideal = [count * r for r in ratios]
    sizes = [int(math.floor(x + 1e-9)) for x in ideal]
    left = count - sum(sizes)
    order = sorted(range(len(ratios)),
                   key=lambda i: (sizes[i] > 0, -(ideal[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return sizes


def stratified_split(manifest: Manifest, ratios=(0.8, 0.1, 0.1), seed=0) -> Manifest:
    """Reassign every entry's split, class by class, with a seeded shuffle."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must be three positive fractions summing to 1")
    by_class = {}
    for e in manifest.entries:
        by_class.setdefault(e.speaker, []).append(e)
    assigned = {}
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda e: e.path)
        if len(group) < 3:
            raise ClassTooSmall(f"class {label!r} has {len(group)} entries, need >= 3")
        rng = np.random.default_rng([seed, manifest.label_index[label]])
        perm = rng.permutation(len(group))
        sizes = apportion(len(group), ratios)
        pos = 0
        for name, n in zip(SPLITS, sizes):
            for j in perm[pos:pos + n]:
                assigned[group[j].path] = name
            pos += n
    entries = tuple(replace(e, split=assigned[e.path]) for e in manifest.entries)
    return Manifest(entries, dict(manifest.label_index))


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    waves: np.ndarray  # [B, L] float32, zero padded
    lengths: np.ndarray  # [B] valid sample counts
    targets: np.ndarray  # [B] class ids
    paths: list
    offsets: np.ndarray = None  # [B] crop start within each clip, in samples


class ClipCache:
    """Memoizing WAV loader; decoded sample arrays are read-only and shared."""

    def __init__(self, loader: Callable = read_wav):
        self._loader = loader
        self._clips = {}

    def __call__(self, path) -> np.ndarray:
        clip = self._clips.get(path)
        if clip is None:
            clip = self._loader(path).samples
            self._clips[path] = clip
        return clip


def batch_iter(manifest: Manifest, split, batch_size, max_len_s=4.0, seed=0,
               random_crop=True, shuffle=True, sample_rate=DEFAULT_SAMPLE_RATE,
               load=None) -> Iterator[Batch]:
    """One epoch of batches over ``split`` in a seeded order.

    Clips longer than ``max_len_s`` are cropped: a seeded random window when
    ``random_crop``, otherwise the first ``max_len_s`` seconds.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    entries = manifest.split(split)
    if not entries:
        raise EmptySplit(f"split {split!r} is empty")
    load = load or ClipCache()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(entries)) if shuffle else np.arange(len(entries))
    max_len = int(round(max_len_s * sample_rate))
    for start in range(0, len(order), batch_size):
        chunk = [entries[i] for i in order[start:start + batch_size]]
        waves, offsets = [], []
        for e in chunk:
            x = load(e.path)
            off = 0
            if len(x) > max_len:
                off = int(rng.integers(0, len(x) - max_len + 1)) if random_crop else 0
                x = x[off:off + max_len]
            waves.append(x)
            offsets.append(off)
        lengths = np.array([len(w) for w in waves], dtype=np.int64)
        out = np.zeros((len(waves), int(lengths.max())), dtype=np.float32)
        for i, w in enumerate(waves):
            out[i, :len(w)] = w
        targets = np.array([manifest.class_id(e.speaker) for e in chunk], dtype=np.int64)
        yield Batch(out, lengths, targets, [e.path for e in chunk],
                    np.array(offsets, dtype=np.int64))
