import math
import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uwspeech.signal import (AudioFormatError, MelSpectrogram, SignalConfig, Waveform, griffin_lim,
                             istft, load_mel, load_wav, mel_spectrogram, mel_to_linear, save_mel,
                             save_wav, spectral_convergence, stft)

SR = 16000


def tone(freq, seconds=1.0, amp=0.5):
    t = np.arange(int(SR * seconds)) / SR
    return Waveform(amp * np.sin(2 * np.pi * freq * t), SR)


def write_raw_wav(path, data: bytes, channels=1, width=2, rate=SR):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(data)


def test_frame_and_hop_lengths():
    cfg = SignalConfig()
    assert cfg.frame_len == 800
    assert cfg.hop_len == 200


@pytest.mark.parametrize("n,expected", [(800, 1), (801, 2), (1000, 2), (1001, 3), (16000, 77)])
def test_num_frames_formula(n, expected):
    assert SignalConfig().num_frames(n) == expected
    w = Waveform(np.random.default_rng(0).normal(size=n) * 0.1)
    assert mel_spectrogram(w).num_frames == expected


def test_shorter_than_one_frame_is_error():
    with pytest.raises(ValueError, match="shorter than one frame"):
        mel_spectrogram(Waveform(np.zeros(799)))
    with pytest.raises(ValueError):
        mel_spectrogram(Waveform(np.zeros(0)))


def test_zero_waveform_is_log_floor():
    cfg = SignalConfig()
    mel = mel_spectrogram(Waveform(np.zeros(4000)), cfg)
    assert mel.num_mels == 80
    np.testing.assert_array_equal(mel.frames, np.float32(cfg.log_floor))
    assert cfg.log_floor == pytest.approx(math.log(1e-5))


def test_one_khz_argmax_is_nearest_center():
    # oracle: HTK mel centers computed here from scratch, not from the package
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    pts = np.linspace(to_mel(0.0), to_mel(8000.0), 82)[1:-1]
    centers = 700.0 * (10 ** (pts / 2595.0) - 1.0)
    nearest = int(np.argmin(np.abs(centers - 1000.0)))
    mel = mel_spectrogram(tone(1000.0))
    assert np.all(mel.frames.argmax(axis=1) == nearest)


def test_mel_deterministic_and_finite():
    w = Waveform(np.random.default_rng(3).normal(size=5000) * 0.3)
    a, b = mel_spectrogram(w), mel_spectrogram(w)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert np.all(np.isfinite(a.frames))


def test_sample_rate_mismatch():
    with pytest.raises(ValueError, match="Hz"):
        mel_spectrogram(Waveform(np.zeros(2000), 8000))


def test_config_validation():
    with pytest.raises(ValueError):
        SignalConfig(fft_size=512).validate()
    with pytest.raises(ValueError):
        SignalConfig(mel_fmax=9000).validate()
    with pytest.raises(ValueError):
        SignalConfig(mel_fmin=8000, mel_fmax=8000).validate()


def test_wav_one_second(tmp_path):
    path = tmp_path / "a.wav"
    save_wav(path, tone(440.0))
    w = load_wav(path)
    assert len(w) == 16000 and w.sample_rate == SR
    assert np.max(np.abs(w.samples)) <= 1.0
    np.testing.assert_allclose(w.samples, tone(440.0).samples, atol=1 / 32768)


def test_wav_all_zero(tmp_path):
    path = tmp_path / "z.wav"
    write_raw_wav(path, b"\x00\x00" * 1000)
    w = load_wav(path)
    assert len(w) == 1000 and not w.samples.any()


def test_wav_stereo_rejected(tmp_path):
    path = tmp_path / "s.wav"
    write_raw_wav(path, b"\x00\x00" * 2000, channels=2)
    with pytest.raises(AudioFormatError, match="mono"):
        load_wav(path)


def test_wav_8bit_rejected(tmp_path):
    path = tmp_path / "b.wav"
    write_raw_wav(path, b"\x80" * 1000, width=1)
    with pytest.raises(AudioFormatError, match="16-bit"):
        load_wav(path)


def test_wav_garbage_rejected(tmp_path):
    path = tmp_path / "g.wav"
    path.write_bytes(b"not a wav file at all")
    with pytest.raises(AudioFormatError):
        load_wav(path)


def test_waveform_rejects_bad_input():
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))


def test_istft_inverts_stft():
    x = np.random.default_rng(1).normal(size=3000)
    cfg = SignalConfig()
    y = istft(stft(x, cfg), cfg)
    # sample 0 falls on the window's zero and is unrecoverable
    np.testing.assert_allclose(y[1:len(x)], x[1:], atol=1e-9)


def test_griffin_lim_silent():
    cfg = SignalConfig()
    mel = MelSpectrogram(np.full((40, 80), cfg.log_floor, dtype=np.float32))
    w = griffin_lim(mel, cfg, seed=0)
    assert np.sqrt(np.mean(w.samples ** 2)) < 1e-4


def test_griffin_lim_length_and_determinism():
    cfg = SignalConfig()
    src = tone(440.0, 0.5)
    mel = mel_spectrogram(src, cfg)
    a = griffin_lim(mel, cfg, seed=7, iters=5)
    b = griffin_lim(mel, cfg, seed=7, iters=5)
    assert np.array_equal(a.samples, b.samples)
    assert len(a) == (mel.num_frames - 1) * cfg.hop_len + cfg.frame_len
    assert abs(len(a) - len(src)) < cfg.hop_len
    assert np.all(np.isfinite(a.samples))


def test_griffin_lim_error_decreases():
    cfg = SignalConfig()
    mel = mel_spectrogram(tone(440.0), cfg)
    target = mel_to_linear(mel, cfg)
    errs = [spectral_convergence(target, griffin_lim(mel, cfg, seed=0, iters=k).samples, cfg)
            for k in (1, 5, 60)]
    assert errs[2] <= errs[1] <= errs[0]
    assert errs[2] < 0.25


def test_griffin_lim_rejects_bad_iters():
    mel = MelSpectrogram(np.zeros((3, 80), dtype=np.float32))
    with pytest.raises(ValueError):
        griffin_lim(mel, iters=0)
    with pytest.raises(ValueError):
        griffin_lim(MelSpectrogram(np.zeros((0, 80), dtype=np.float32)))


def test_mel_file_roundtrip(tmp_path):
    frames = np.random.default_rng(0).normal(size=(17, 80)).astype(np.float32)
    path = tmp_path / "x.mel"
    save_mel(path, MelSpectrogram(frames))
    back = load_mel(path)
    assert back.frames.dtype == np.float32
    assert np.array_equal(back.frames, frames)
    assert back.frame_ms == 50.0 and back.hop_ms == 12.5
    raw = path.read_bytes()
    assert raw[:6] == b"UWMEL\x00"
    assert struct.unpack_from("<III", raw, 6) == (1, 17, 80)


def test_mel_file_bad_magic(tmp_path):
    path = tmp_path / "bad.mel"
    path.write_bytes(b"garbage" * 4)
    with pytest.raises(ValueError, match="not a mel"):
        load_mel(path)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(800, 6000), seed=st.integers(0, 2 ** 16), amp=st.floats(0.0, 1.0))
def test_mel_shape_and_finiteness(n, seed, amp):
    x = np.random.default_rng(seed).uniform(-1, 1, size=n) * amp
    mel = mel_spectrogram(Waveform(x))
    assert mel.frames.shape == (SignalConfig().num_frames(n), 80)
    assert np.all(np.isfinite(mel.frames))
    assert np.all(mel.frames >= np.float32(math.log(1e-5)))
