import math
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scrffi.signal_sim import (BFSK_DEVIATION, FILE_MAGIC, UNLABELED, ChannelProfile,
                               DatasetFormatError, DatasetSpec, EmitterProfile, IQRecord,
                               ProfileCollisionError, ReceiverProfile, emitter_distort,
                               generate_dataset, modulate, read_dataset, record_rng,
                               stack_records, synth_baseband, write_dataset)

from conftest import two_emitters


def naive_dft(x):
    """Direct O(n^2) DFT, independent of numpy's FFT."""
    n = len(x)
    k = np.arange(n)
    return np.array([np.sum(x * np.exp(-2j * np.pi * f * k / n)) for f in range(n)])


def clean_spec(emitters, **kw):
    base = dict(receiver=ReceiverProfile(), channel=ChannelProfile(), length=256, seed=0)
    base.update(kw)
    return DatasetSpec((1,) * len(emitters), emitters, **base)


def test_all_distortions_off_gives_clean_waveform():
    spec = clean_spec((EmitterProfile(0), EmitterProfile(1)))
    symbols = np.ones(8)
    out = synth_baseband(spec, 0, np.random.default_rng(0), symbols=symbols)
    np.testing.assert_array_equal(out, modulate(symbols, 256, "bfsk"))


def test_record_shape_matches_length():
    ems = tuple(EmitterProfile(k, (0.01 * k, 0.0)) for k in range(6))
    spec = DatasetSpec((2,) * 6, ems, length=256)
    recs = generate_dataset(spec)
    assert len(recs) == 12
    assert all(r.samples.shape == (2, 256) for r in recs)


def test_cubic_term_creates_third_harmonic():
    L = 256
    f_bin = 4
    tone = np.exp(2j * np.pi * f_bin * np.arange(L) / L)
    out = emitter_distort(tone, EmitterProfile(0, (0.1, 0.0)))
    dft_in, dft_out = np.abs(naive_dft(tone)), np.abs(naive_dft(out))
    assert dft_in[3 * f_bin] < 1e-9 * L
    np.testing.assert_allclose(dft_out[3 * f_bin], 0.1 * L, rtol=1e-9)
    np.testing.assert_allclose(dft_out[f_bin], L, rtol=1e-9)
    # numpy's FFT agrees with the brute-force transform
    np.testing.assert_allclose(np.abs(np.fft.fft(out)), dft_out, atol=1e-8)


def test_third_harmonic_through_full_chain():
    spec = clean_spec((EmitterProfile(0, (0.1, 0.0)), EmitterProfile(1)))
    out = synth_baseband(spec, 0, np.random.default_rng(0), symbols=np.ones(8))
    f_bin = int(BFSK_DEVIATION * 256)
    mag = np.abs(naive_dft(out))
    clean = np.abs(naive_dft(modulate(np.ones(8), 256)))
    assert clean[3 * f_bin] < 1e-9
    assert mag[3 * f_bin] > 0.09 * 256


def test_rejects_short_records():
    spec = clean_spec((EmitterProfile(0), EmitterProfile(1)), length=8)
    with pytest.raises(ValueError, match="too short"):
        synth_baseband(spec, 0, np.random.default_rng(0))


@pytest.mark.parametrize("bad", [dict(poly_coeffs=(math.nan, 0.0)),
                                 dict(carrier_freq_offset=math.inf),
                                 dict(poly_coeffs=(0.6, 0.0)),
                                 dict(iq_gain_imbalance=0.0)])
def test_rejects_bad_emitter_fields(bad):
    with pytest.raises(ValueError):
        EmitterProfile(0, **bad)


def test_receiver_validation():
    with pytest.raises(ValueError):
        ReceiverProfile(gain=0.0)
    with pytest.raises(ValueError):
        ReceiverProfile(noise_snr_db=(20, 10))
    assert ReceiverProfile(noise_snr_db=12).snr_range == (12, 12)


def test_channel_normalization():
    ch = ChannelProfile((1 + 1j, 2 + 0j))
    np.testing.assert_allclose(np.sum(np.abs(ch.taps()) ** 2), 1.0)
    with pytest.raises(ValueError):
        ChannelProfile((0j, 0j))
    with pytest.raises(ValueError):
        ChannelProfile(tuple([1 + 0j] * 9))


def test_class_index_out_of_range(small_spec):
    with pytest.raises(ValueError):
        synth_baseband(small_spec, 2, np.random.default_rng(0))


def test_zero_counts_give_empty_dataset():
    spec = DatasetSpec((0, 0), two_emitters())
    assert generate_dataset(spec) == []


def test_generation_is_deterministic(small_spec):
    a, b = generate_dataset(small_spec), generate_dataset(small_spec)
    assert all(np.array_equal(r.samples, s.samples) and r.label == s.label for r, s in zip(a, b))


def test_imbalanced_histogram_is_exact():
    counts = (30, 45, 60, 75, 90, 100)
    ems = tuple(EmitterProfile(k, (0.02 * k, 0.0)) for k in range(6))
    recs = generate_dataset(DatasetSpec(counts, ems, length=32, seed=9))
    assert np.bincount([r.label for r in recs]).tolist() == list(counts)


def test_profile_collision():
    ems = (EmitterProfile(0, (0.1, 0.0)), EmitterProfile(1, (0.1001, 0.0)))
    with pytest.raises(ProfileCollisionError):
        generate_dataset(DatasetSpec((1, 1), ems, min_separation=0.01))
    generate_dataset(DatasetSpec((1, 1), ems, min_separation=1e-5))


def test_target_records_are_unlabeled_unless_revealed(small_spec):
    from dataclasses import replace
    tgt = replace(small_spec, domain="target")
    assert all(r.label == UNLABELED for r in generate_dataset(tgt))
    assert [r.label for r in generate_dataset(tgt, reveal_labels=True)] == [0] * 5 + [1] * 4


@given(seed=st.integers(0, 2**31), snr=st.floats(-5, 40))
def test_unit_rms_and_finite(seed, snr):
    spec = DatasetSpec((2, 2), two_emitters(), ReceiverProfile(0, (0.1, -0.05), 0.3j, 0.4, 2.0, snr),
                       ChannelProfile((1 + 0j, 0.5j, -0.2 + 0j)), length=48, seed=seed)
    for r in generate_dataset(spec):
        assert np.all(np.isfinite(r.samples))
        rms = np.sqrt(np.mean(r.samples.astype(np.float64) ** 2) * 2)
        assert abs(rms - 1.0) < 1e-6


def test_identical_emitters_identical_outputs():
    spec = clean_spec((EmitterProfile(0), EmitterProfile(1)),
                      receiver=ReceiverProfile(noise_snr_db=10))
    a = synth_baseband(spec, 0, np.random.default_rng(5))
    b = synth_baseband(spec, 1, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_fingerprints_are_learnable_from_spectra():
    ems = (EmitterProfile(0, (0.3, 0.05), 1.1, 0.1, 0.004),
           EmitterProfile(1, (-0.3, -0.05), 0.9, -0.1, -0.004))
    spec = DatasetSpec((100, 100), ems, ReceiverProfile(noise_snr_db=20), length=256, seed=4)
    x, y = stack_records(generate_dataset(spec))
    mag = np.abs(np.fft.fft(x[:, 0] + 1j * x[:, 1], axis=1))
    train = np.arange(200) % 2 == 0
    cents = np.stack([mag[train & (y == k)].mean(axis=0) for k in (0, 1)])
    d = np.linalg.norm(mag[~train, None, :] - cents[None], axis=2)
    assert np.mean(np.argmin(d, axis=1) == y[~train]) > 0.9


def test_receiver_change_keeps_labels(small_spec):
    from dataclasses import replace
    other = replace(small_spec, receiver=ReceiverProfile(1, (-0.1, 0.1), 0j, 0.5, 1.0, (10, 20)))
    a, b = generate_dataset(small_spec), generate_dataset(other)
    assert [r.label for r in a] == [r.label for r in b]
    assert not np.allclose(stack_records(a)[0], stack_records(b)[0])


def test_records_depend_only_on_seed_and_index(small_spec):
    recs = generate_dataset(small_spec)
    i = 6  # second class, second record
    x = synth_baseband(small_spec, 1, record_rng(small_spec.seed, i))
    x = x / np.sqrt(np.mean(np.abs(x) ** 2))
    np.testing.assert_array_equal(recs[i].samples, np.stack([x.real, x.imag]).astype(np.float32))


def test_round_trip_is_bit_exact(tmp_path, small_spec):
    recs = generate_dataset(small_spec)
    p1, p2 = tmp_path / "a.scrf", tmp_path / "b.scrf"
    write_dataset(recs, p1, 2)
    back, K = read_dataset(p1, domain="source")
    assert K == 2 and back == recs
    write_dataset(back, p2, 2)
    assert p1.read_bytes() == p2.read_bytes()


def test_wrong_magic(tmp_path, small_spec):
    p = tmp_path / "a.scrf"
    write_dataset(generate_dataset(small_spec), p, 2)
    data = bytearray(p.read_bytes())
    data[:4] = b"SCRG"
    p.write_bytes(bytes(data))
    with pytest.raises(DatasetFormatError, match="magic"):
        read_dataset(p)


def test_truncated_file(tmp_path, small_spec):
    p = tmp_path / "a.scrf"
    write_dataset(generate_dataset(small_spec), p, 2)
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(DatasetFormatError):
        read_dataset(p)
    p.write_bytes(b"SCR")
    with pytest.raises(DatasetFormatError):
        read_dataset(p)


def golden_bytes(label_a=2):
    # header: magic, version 1, K = 3, N = 2, L = 4
    out = b"SCRF" + struct.pack("<H", 1) + struct.pack("<H", 3) + struct.pack("<I", 2) \
        + struct.pack("<I", 4)
    out += struct.pack("<H", label_a)
    out += struct.pack("<8f", 1.0, 0.5, -0.5, -1.0, 0.0, 0.25, 0.75, 2.0)
    out += b"\xff\xff"
    out += struct.pack("<8f", *([0.125] * 4 + [-3.0] * 4))
    return out


def test_golden_two_record_file(tmp_path):
    p = tmp_path / "golden.scrf"
    p.write_bytes(golden_bytes())
    recs, K = read_dataset(p)
    assert K == 3 and len(recs) == 2
    assert recs[0].label == 2 and recs[0].domain == "source"
    np.testing.assert_array_equal(recs[0].samples, [[1.0, 0.5, -0.5, -1.0], [0.0, 0.25, 0.75, 2.0]])
    assert recs[1].label == UNLABELED and recs[1].domain == "target"
    np.testing.assert_array_equal(recs[1].samples, [[0.125] * 4, [-3.0] * 4])
    # and writing it back reproduces the hand-built bytes
    p2 = tmp_path / "again.scrf"
    write_dataset(recs, p2, K)
    assert p2.read_bytes() == golden_bytes()
    assert golden_bytes()[:4] == FILE_MAGIC


def test_label_out_of_range_in_file(tmp_path):
    p = tmp_path / "bad.scrf"
    p.write_bytes(golden_bytes(label_a=3))
    with pytest.raises(DatasetFormatError, match="label"):
        read_dataset(p)


def test_write_rejects_bad_records(tmp_path):
    rec = IQRecord(np.zeros((2, 4), np.float32), 5)
    with pytest.raises(ValueError):
        write_dataset([rec], tmp_path / "x.scrf", 3)


def test_qpsk_modulation():
    spec = DatasetSpec((2, 2), two_emitters(), modulation="qpsk", length=64)
    assert len(generate_dataset(spec)) == 4
    w = modulate(np.array([0, 1, 2, 3]), 128, "qpsk")
    np.testing.assert_allclose(np.abs(w), 1.0)
    np.testing.assert_allclose(w[0], np.exp(1j * np.pi / 4))
