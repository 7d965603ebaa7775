"""Signal front-end tests: STFT/iSTFT, mixing, WAV I/O."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from avsep.dsp import (
    ComplexSpectrogram,
    StftConfig,
    Waveform,
    istft,
    istft_tensor,
    mix_sources,
    read_wav,
    stft,
    stft_tensor,
    write_wav,
)
from avsep.errors import (
    ConfigMismatchError,
    DegenerateSourceError,
    InvalidInputError,
)

CFG = StftConfig()


def random_waveform(seed, n=32000, scale=0.1):
    rng = np.random.default_rng(seed)
    return Waveform(rng.standard_normal(n) * scale)


def stft_oracle(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Frame-by-frame DFT with explicit reflection padding and windowing."""
    win, hop = cfg.win_length, cfg.hop_length
    n = np.arange(win)
    window = np.sqrt(0.5 - 0.5 * np.cos(2 * np.pi * n / win))
    padded = np.pad(x, win // 2, mode="reflect")
    frames = len(x) // hop + 1
    out = np.zeros((2, frames, cfg.num_bins))
    for t in range(frames):
        seg = padded[t * hop : t * hop + win] * window
        spec = np.fft.rfft(seg)
        out[0, t] = spec.real
        out[1, t] = spec.imag
    return out


class TestStft:
    def test_paper_geometry(self):
        w = random_waveform(0)
        s = stft(w, CFG)
        assert s.num_bins == 257
        assert s.num_frames == 251
        assert s.data.shape == (2, 251, 257)

    def test_zero_waveform_gives_zero_spectrogram(self):
        s = stft(Waveform(np.zeros(4096)), CFG)
        assert torch.all(s.data == 0)

    def test_matches_frame_by_frame_dft_oracle(self):
        w = random_waveform(1, n=4096)
        got = stft(w, CFG).data.numpy()
        want = stft_oracle(w.samples, CFG)
        assert got.shape == want.shape
        assert np.max(np.abs(got - want)) < 1e-10

    def test_empty_waveform_rejected(self):
        with pytest.raises(InvalidInputError):
            stft_tensor(torch.zeros(0), CFG)

    def test_rate_mismatch_rejected(self):
        w = Waveform(np.zeros(4096) + 0.1, sample_rate=8000)
        with pytest.raises(ConfigMismatchError):
            stft(w, CFG)

    def test_linearity(self):
        w1, w2 = random_waveform(2, n=4096), random_waveform(3, n=4096)
        a, b = 0.7, -1.3
        combined = stft_tensor(
            torch.as_tensor(a * w1.samples + b * w2.samples), CFG
        )
        separate = a * stft(w1, CFG).data + b * stft(w2, CFG).data
        scale = torch.max(torch.abs(separate))
        assert torch.max(torch.abs(combined - separate)) / scale < 1e-10

    def test_batched_matches_single(self):
        w1, w2 = random_waveform(4, n=4096), random_waveform(5, n=4096)
        batch = torch.stack([w1.tensor(), w2.tensor()])
        out = stft_tensor(batch, CFG)
        assert torch.equal(out[0], stft(w1, CFG).data)
        assert torch.equal(out[1], stft(w2, CFG).data)


class TestIstft:
    def test_round_trip_2s(self):
        w = random_waveform(10)
        back = istft(stft(w, CFG), CFG, w.num_samples)
        err = np.max(np.abs(back.samples - w.samples))
        assert err < 1e-6 * np.max(np.abs(w.samples))

    def test_round_trip_chirp(self):
        t = np.arange(16000) / 16000.0
        chirp = np.sin(2 * np.pi * (4000.0 * t**2 / 2))  # 0 -> 4 kHz over 1 s
        w = Waveform(chirp)
        back = istft(stft(w, CFG), CFG, w.num_samples)
        rel_l2 = np.linalg.norm(back.samples - w.samples) / np.linalg.norm(w.samples)
        assert rel_l2 < 1e-6

    def test_zero_spectrogram_gives_zero(self):
        s = ComplexSpectrogram(torch.zeros(2, 40, CFG.num_bins, dtype=torch.float64))
        w = istft(s, CFG, 4000)
        assert np.all(w.samples == 0)

    def test_bin_mismatch_rejected(self):
        s = torch.zeros(2, 40, 129, dtype=torch.float64)
        with pytest.raises(ConfigMismatchError):
            istft_tensor(s, CFG, 4000)

    def test_out_len_truncates_and_pads(self):
        w = random_waveform(11, n=4096)
        s = stft(w, CFG)
        short = istft(s, CFG, 1000)
        assert short.num_samples == 1000
        assert np.max(np.abs(short.samples - w.samples[:1000])) < 1e-8
        long = istft(s, CFG, 6000)
        assert long.num_samples == 6000
        assert np.all(long.samples[-1000:] == 0)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.integers(4, 60))
    def test_round_trip_property_hop_multiples(self, seed, hops):
        n = hops * CFG.hop_length
        w = random_waveform(seed, n=n)
        back = istft(stft(w, CFG), CFG, n)
        err = np.max(np.abs(back.samples - w.samples))
        assert err < 1e-6 * max(np.max(np.abs(w.samples)), 1e-12)


class TestMixSources:
    def tones(self, n=8000):
        t = np.arange(n) / 16000.0
        a = Waveform(0.3 * np.sin(2 * np.pi * 500 * t))
        b = Waveform(0.3 * np.sin(2 * np.pi * 1500 * t))
        return a, b

    def test_equal_power_tones_double_mixture_power(self):
        a, b = self.tones()
        mixed = mix_sources([a, b], [0.0, 0.0])
        assert mixed.mixture.power() == pytest.approx(2 * a.power(), rel=1e-6)

    def test_requested_gain_measured(self):
        a, b = self.tones()
        mixed = mix_sources([a, b], [0.0, -5.0])
        ratio_db = 10 * np.log10(mixed.sources[0].power() / mixed.sources[1].power())
        assert abs(ratio_db - 5.0) < 1e-6

    def test_requested_noise_snr_measured(self):
        a, b = self.tones()
        noise = random_waveform(20, n=8000, scale=0.05)
        mixed = mix_sources([a, b], [0.0, 0.0], noise=noise, noise_snr_db=20.0)
        clean = np.sum([s.samples for s in mixed.sources], axis=0)
        snr_db = 10 * np.log10(np.mean(clean**2) / mixed.noise.power())
        assert abs(snr_db - 20.0) < 1e-6

    def test_mixture_is_exact_sum(self):
        a, b = self.tones()
        noise = random_waveform(21, n=8000, scale=0.05)
        mixed = mix_sources([a, b], [0.0, 3.0], noise=noise, noise_snr_db=5.0)
        total = mixed.sources[0].samples + mixed.sources[1].samples + mixed.noise.samples
        assert np.array_equal(mixed.mixture.samples, total)

    def test_peak_normalization_preserves_ratios(self):
        a, b = self.tones()
        loud_a = Waveform(a.samples * 10)
        loud_b = Waveform(b.samples * 10)
        mixed = mix_sources([loud_a, loud_b], [0.0, -5.0])
        assert np.max(np.abs(mixed.mixture.samples)) <= 1.0
        ratio_db = 10 * np.log10(mixed.sources[0].power() / mixed.sources[1].power())
        assert abs(ratio_db - 5.0) < 1e-6
        total = mixed.sources[0].samples + mixed.sources[1].samples
        assert np.array_equal(mixed.mixture.samples, total)

    def test_errors(self):
        a, b = self.tones()
        with pytest.raises(InvalidInputError):
            mix_sources([a], [0.0])
        with pytest.raises(InvalidInputError):
            mix_sources([a, b], [1.0, 0.0])  # reference gain must be 0
        with pytest.raises(InvalidInputError):
            mix_sources([a, Waveform(b.samples[:-1])], [0.0, 0.0])
        with pytest.raises(DegenerateSourceError):
            mix_sources([a, Waveform(np.zeros_like(b.samples))], [0.0, 0.0])
        with pytest.raises(InvalidInputError):
            mix_sources([a, b], [0.0, 0.0], noise=a)  # missing snr

    def test_three_and_four_speakers(self):
        a, b = self.tones()
        t = np.arange(8000) / 16000.0
        c = Waveform(0.3 * np.sin(2 * np.pi * 2500 * t))
        d = Waveform(0.3 * np.sin(2 * np.pi * 3500 * t))
        for sources, gains in [([a, b, c], [0.0, -2.0, 2.0]), ([a, b, c, d], [0.0, 1.0, -1.0, 3.0])]:
            mixed = mix_sources(sources, gains)
            assert len(mixed.sources) == len(sources)
            for i in range(1, len(sources)):
                ratio = 10 * np.log10(mixed.sources[i].power() / mixed.sources[0].power())
                assert abs(ratio - gains[i]) < 1e-6


class TestWavIO:
    def test_float32_round_trip(self, tmp_path):
        w = random_waveform(30, n=1600)
        path = tmp_path / "x.wav"
        write_wav(path, w)
        back = read_wav(path)
        assert back.sample_rate == 16000
        assert np.array_equal(
            back.samples, w.samples.astype(np.float32).astype(np.float64)
        )

    def test_int16_round_trip(self, tmp_path):
        w = Waveform(np.linspace(-0.9, 0.9, 1600))
        path = tmp_path / "x16.wav"
        write_wav(path, w, fmt="int16")
        back = read_wav(path)
        assert np.max(np.abs(back.samples - w.samples)) < 1.0 / 32768


class TestValidation:
    def test_waveform_rejects_nan(self):
        with pytest.raises(InvalidInputError):
            Waveform(np.array([0.0, np.nan]))

    def test_waveform_rejects_bad_rate(self):
        with pytest.raises(InvalidInputError):
            Waveform(np.zeros(10), sample_rate=0)

    def test_config_rejects_short_window(self):
        with pytest.raises(InvalidInputError):
            StftConfig(window_ms=16.0, hop_ms=8.0)  # window < 4x hop

    def test_config_rejects_unknown_window(self):
        with pytest.raises(InvalidInputError):
            StftConfig(window="hamming")
