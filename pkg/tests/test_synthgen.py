import itertools

import numpy as np
import pytest

from spkid.audio_io import load_manifest, read_wav
from spkid.encoder import mfcc
from spkid.errors import IndexOutOfRange
from spkid.synthgen import (
    MANIFEST_NAME,
    MAX_SPEAKERS,
    make_speaker_profile,
    synth_clip,
    synth_corpus,
)


def low_band_peak(samples, rate=16000, lo=50.0, hi=500.0):
    x = np.asarray(samples, dtype=np.float64)
    spec = np.abs(np.fft.rfft(x * np.hanning(x.size))) ** 2
    freqs = np.fft.rfftfreq(x.size, 1.0 / rate)
    band = (freqs >= lo) & (freqs <= hi)
    return freqs[band][np.argmax(spec[band])]


class TestProfiles:
    def test_deterministic(self):
        assert make_speaker_profile(0, 4) == make_speaker_profile(0, 4)

    @pytest.mark.parametrize("seed", [0, 1, 17])
    def test_invariants_all_indices(self, seed):
        profiles = [make_speaker_profile(i, seed) for i in range(MAX_SPEAKERS)]
        for p in profiles:
            assert 70 <= p.f0 <= 300
            assert p.formants[0] < p.formants[1] < p.formants[2] < 8000
        for a, b in itertools.combinations(profiles, 2):
            formant_gap = max(abs(x - y) for x, y in zip(a.formants, b.formants))
            assert abs(a.f0 - b.f0) >= 10 or formant_gap >= 100

    def test_ten_speakers_pairwise(self):
        profiles = [make_speaker_profile(i, 0) for i in range(10)]
        assert len({p.speaker_id for p in profiles}) == 10
        assert profiles[0].speaker_id == "R01" and profiles[9].speaker_id == "R10"

    @pytest.mark.parametrize("index", [-1, 64])
    def test_out_of_range(self, index):
        with pytest.raises(IndexOutOfRange):
            make_speaker_profile(index, 0)


class TestClip:
    def test_length(self):
        clip = synth_clip(make_speaker_profile(0, 0), 2.0, seed=1)
        assert clip.samples.shape == (32000,)
        assert clip.sample_rate == 16000

    def test_bit_identical(self):
        p = make_speaker_profile(3, 0)
        assert np.array_equal(synth_clip(p, 1.0, 5).samples, synth_clip(p, 1.0, 5).samples)
        assert not np.array_equal(synth_clip(p, 1.0, 5).samples, synth_clip(p, 1.0, 6).samples)

    def test_peak_normalized(self):
        clip = synth_clip(make_speaker_profile(5, 0), 1.0, seed=2)
        assert np.max(np.abs(clip.samples)) == pytest.approx(0.9, abs=1e-6)

    @pytest.mark.parametrize("index", range(10))
    def test_low_band_peak_at_f0(self, index):
        profile = make_speaker_profile(index, 0)
        clip = synth_clip(profile, 2.0, seed=index)
        assert abs(low_band_peak(clip.samples) - profile.f0) <= 0.03 * profile.f0

    @pytest.mark.parametrize("duration", [0.4, 10.5])
    def test_duration_bounds(self, duration):
        with pytest.raises(ValueError):
            synth_clip(make_speaker_profile(0, 0), duration)


class TestCorpus:
    def test_layout_and_split(self, tmp_path):
        manifest = synth_corpus(2, 3, 0.5, tmp_path, seed=0)
        files = sorted(p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("*.wav"))
        assert files == ["R01/000.wav", "R01/001.wav", "R01/002.wav",
                         "R02/000.wav", "R02/001.wav", "R02/002.wav"]
        for spk in ("R01", "R02"):
            sizes = [sum(1 for e in manifest.split(s) if e.speaker == spk)
                     for s in ("train", "val", "test")]
            assert sum(sizes) == 3 and sizes[0] == 2

    def test_thousand_entries(self, tmp_path):
        manifest = synth_corpus(10, 100, 0.5, tmp_path, seed=0)
        assert len(manifest) == 1000
        assert manifest.n_classes == 10

    def test_rerun_identical_manifest_bytes(self, tmp_path):
        synth_corpus(2, 4, 0.5, tmp_path / "a", seed=9)
        synth_corpus(2, 4, 0.5, tmp_path / "b", seed=9)
        assert (tmp_path / "a" / MANIFEST_NAME).read_bytes() == \
            (tmp_path / "b" / MANIFEST_NAME).read_bytes()
        assert (tmp_path / "a" / "R02" / "003.wav").read_bytes() == \
            (tmp_path / "b" / "R02" / "003.wav").read_bytes()

    def test_nearest_centroid_separable(self, tmp_path):
        synth_corpus(10, 20, 1.0, tmp_path, seed=0)
        manifest = load_manifest(tmp_path / MANIFEST_NAME)
        feats = np.stack([mfcc(read_wav(e.path)).mean(axis=0) for e in manifest.entries])
        labels = np.array([manifest.class_id(e.speaker) for e in manifest.entries])
        feats = (feats - feats.mean(0)) / feats.std(0)
        centroids = np.stack([feats[labels == c].mean(0) for c in range(10)])
        d = ((feats[:, None, :] - centroids[None]) ** 2).sum(-1)
        assert (d.argmin(1) == labels).mean() >= 0.9
