"""Deterministic synthetic multi-speaker corpus.

Each speaker is a source-filter voice: a harmonic source at its own pitch,
shaped by three formant resonators, plus white noise.  Profiles are laid out
on a grid (8 pitch levels x 8 formant levels) with small seeded offsets, so
any two distinct indices differ by at least 20 Hz in pitch or 100 Hz in the
first formant.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from spkid.audio_io import (
    DEFAULT_SAMPLE_RATE,
    AudioClip,
    Manifest,
    ManifestEntry,
    save_manifest,
    stratified_split,
    write_wav,
)
from spkid.errors import IndexOutOfRange

MAX_SPEAKERS = 64
MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: str
    f0: float
    formants: tuple
    bandwidths: tuple
    snr_db: float


def speaker_label(index: int) -> str:
    return f"R{index + 1:02d}"


def make_speaker_profile(index: int, seed: int = 0) -> SpeakerProfile:
    if not 0 <= index < MAX_SPEAKERS:
        raise IndexOutOfRange(f"speaker index {index} outside 0..{MAX_SPEAKERS - 1}")
    rng = np.random.default_rng([seed, index, 7])
    pitch_level = index % 8
    formant_level = index // 8
    f0 = 85.0 + 26.0 * pitch_level + rng.uniform(-3.0, 3.0)
    f1 = 320.0 + 115.0 * formant_level + rng.uniform(-5.0, 5.0)
    f2 = 1150.0 + 140.0 * formant_level + rng.uniform(-40.0, 40.0) + 30.0 * pitch_level
    f3 = 2500.0 + 120.0 * formant_level + rng.uniform(-60.0, 60.0)
    bandwidths = tuple(float(b) for b in rng.uniform([60, 80, 110], [90, 120, 160]))
    snr_db = float(rng.uniform(20.0, 30.0))
    return SpeakerProfile(speaker_label(index), float(f0),
                          (float(f1), float(f2), float(f3)), bandwidths, snr_db)


def _resonator(x, freq, bandwidth, sample_rate):
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2.0 * np.pi * freq / sample_rate
    a = [1.0, -2.0 * r * np.cos(theta), r * r]
    # unit gain at the centre frequency
    gain = abs(1.0 - 2.0 * r * np.cos(theta) * np.exp(-1j * theta) + r * r * np.exp(-2j * theta))
    return lfilter([gain], a, x)


def _voice(source, formants, bandwidths, sample_rate):
    out = 0.5 * source
    for freq, bw in zip(formants, bandwidths):
        out = out + _resonator(source, freq, bw, sample_rate)
    return out


def synth_clip(profile: SpeakerProfile, duration_s: float, seed: int = 0,
               sample_rate: int = DEFAULT_SAMPLE_RATE) -> AudioClip:
    """Source-filter voice with seeded pitch jitter and additive white noise."""
    if not 0.5 <= duration_s <= 10.0:
        raise ValueError("duration_s must lie in [0.5, 10]")
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng([seed, int(round(profile.f0 * 1000)), 11])

    # pitch track: one +-2% jitter value per 100 ms, linearly interpolated
    seg = sample_rate // 10
    knots = 1.0 + rng.uniform(-0.02, 0.02, size=n // seg + 2)
    track = profile.f0 * np.interp(np.arange(n) / seg, np.arange(knots.size), knots)
    phase = 2.0 * np.pi * np.cumsum(track) / sample_rate + rng.uniform(0, 2 * np.pi)

    nyquist = sample_rate / 2.0
    n_harm = int((nyquist * 0.95) // (profile.f0 * 1.02))
    source = np.zeros(n)
    for k in range(1, n_harm + 1):
        source += np.sin(k * phase) / k

    voiced = _voice(source, profile.formants, profile.bandwidths, sample_rate)
    p_signal = np.mean(voiced ** 2)
    noise = rng.normal(0.0, np.sqrt(p_signal / 10 ** (profile.snr_db / 10.0)), size=n)
    out = voiced + noise
    out = 0.9 * out / np.max(np.abs(out))
    return AudioClip(out.astype(np.float32), sample_rate)


def synth_corpus(n_speakers: int, clips_per_speaker: int, duration_s: float,
                 out_dir, seed: int = 0) -> Manifest:
    """Write ``out_dir/<speaker>/<clip>.wav`` plus ``out_dir/manifest.jsonl``."""
    if not 1 <= n_speakers <= MAX_SPEAKERS:
        raise IndexOutOfRange(f"n_speakers must lie in 1..{MAX_SPEAKERS}")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for s in range(n_speakers):
        profile = make_speaker_profile(s, seed)
        spk_dir = os.path.join(out_dir, profile.speaker_id)
        os.makedirs(spk_dir, exist_ok=True)
        for c in range(clips_per_speaker):
            clip = synth_clip(profile, duration_s, seed=seed * 100003 + s * 1009 + c)
            path = os.path.join(spk_dir, f"{c:03d}.wav")
            write_wav(clip, path)
            entries.append(ManifestEntry(os.path.abspath(path), profile.speaker_id,
                                         "train", clip.duration_s))
    manifest = stratified_split(Manifest(tuple(entries)), (0.8, 0.1, 0.1), seed)
    save_manifest(manifest, os.path.join(out_dir, MANIFEST_NAME))
    return manifest
