"""Synthetic cross-receiver IQ datasets.

A record is produced by modulating a random symbol stream, passing it through
the emitter nonlinearity (odd polynomial, IQ imbalance, carrier offset), a
short FIR channel, the receiver nonlinearity (polynomial, rotation, gain, DC
offset) and additive white Gaussian noise, then normalizing to unit RMS.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

UNLABELED = -1
FILE_MAGIC = b"SCRF"
FILE_VERSION = 1
_FILE_UNLABELED = 0xFFFF
_HEADER = struct.Struct("<4sHHII")

MODULATIONS = ("bfsk", "qpsk")
SAMPLES_PER_SYMBOL = 32
BFSK_DEVIATION = 1.0 / 16.0  # cycles per sample


class ProfileCollisionError(ValueError):
    """Two emitter profiles are closer than the requested minimum separation."""


class DatasetFormatError(ValueError):
    """An SCRF file is malformed."""


@dataclass(frozen=True)
class EmitterProfile:
    """Transmitter hardware fingerprint.

    ``poly_coeffs`` are ``(a3, a5)`` of ``u + a3*u**3 + a5*u**5``.
    ``iq_gain_imbalance`` is the Q/I branch gain ratio (1 means balanced),
    ``iq_phase_skew`` is in radians and ``carrier_freq_offset`` is a fraction
    of the sample rate.
    """

    id: int
    poly_coeffs: tuple[float, float] = (0.0, 0.0)
    iq_gain_imbalance: float = 1.0
    iq_phase_skew: float = 0.0
    carrier_freq_offset: float = 0.0

    def __post_init__(self):
        vals = (*self.poly_coeffs, self.iq_gain_imbalance, self.iq_phase_skew,
                self.carrier_freq_offset)
        if len(self.poly_coeffs) != 2:
            raise ValueError("emitter poly_coeffs must be (a3, a5)")
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"emitter {self.id}: non-finite profile field")
        if max(abs(c) for c in self.poly_coeffs) > 0.5:
            raise ValueError(f"emitter {self.id}: |a3|, |a5| must be <= 0.5")
        if self.iq_gain_imbalance <= 0:
            raise ValueError(f"emitter {self.id}: iq_gain_imbalance must be > 0")

    def as_vector(self) -> np.ndarray:
        return np.array([*self.poly_coeffs, self.iq_gain_imbalance,
                         self.iq_phase_skew, self.carrier_freq_offset])


@dataclass(frozen=True)
class ReceiverProfile:
    """Receiver front-end distortion and noise level.

    ``noise_snr_db`` is a scalar, a ``(lo, hi)`` range sampled uniformly per
    record, or ``math.inf`` for a noiseless receiver.
    """

    id: int = 0
    poly_coeffs: tuple[float, float] = (0.0, 0.0)
    dc_offset: complex = 0j
    phase_rotation: float = 0.0
    gain: float = 1.0
    noise_snr_db: float | tuple[float, float] = math.inf

    def __post_init__(self):
        if len(self.poly_coeffs) != 2:
            raise ValueError("receiver poly_coeffs must be (b2, b3)")
        vals = (*self.poly_coeffs, self.dc_offset.real, self.dc_offset.imag,
                self.phase_rotation, self.gain)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"receiver {self.id}: non-finite profile field")
        if self.gain <= 0:
            raise ValueError(f"receiver {self.id}: gain must be > 0")
        lo, hi = self.snr_range
        if math.isnan(lo) or math.isnan(hi) or lo > hi:
            raise ValueError(f"receiver {self.id}: invalid SNR range {self.noise_snr_db!r}")

    @property
    def snr_range(self) -> tuple[float, float]:
        if isinstance(self.noise_snr_db, (tuple, list)):
            lo, hi = self.noise_snr_db
            return float(lo), float(hi)
        return float(self.noise_snr_db), float(self.noise_snr_db)


@dataclass(frozen=True)
class ChannelProfile:
    fir_taps: tuple[complex, ...] = (1 + 0j,)
    normalize: bool = True

    def __post_init__(self):
        taps = np.asarray(self.fir_taps, dtype=complex)
        if taps.ndim != 1 or not 1 <= taps.size <= 8:
            raise ValueError("channel needs between 1 and 8 FIR taps")
        if not np.all(np.isfinite(taps)):
            raise ValueError("channel taps must be finite")
        if not np.any(taps != 0):
            raise ValueError("channel needs at least one nonzero tap")

    def taps(self) -> np.ndarray:
        t = np.asarray(self.fir_taps, dtype=complex)
        if self.normalize:
            t = t / np.linalg.norm(t)
        return t


@dataclass
class IQRecord:
    samples: np.ndarray  # (2, L) float32, I row then Q row
    label: int = UNLABELED
    domain: str = "target"

    @property
    def labeled(self) -> bool:
        return self.label != UNLABELED

    def __eq__(self, other):
        if not isinstance(other, IQRecord):
            return NotImplemented
        return (self.label == other.label and self.domain == other.domain
                and self.samples.dtype == other.samples.dtype
                and np.array_equal(self.samples, other.samples))


@dataclass(frozen=True)
class DatasetSpec:
    """Everything needed to regenerate a dataset bit-exactly.

    ``phase_jitter`` bounds the uniformly drawn initial carrier phase of
    each record (radians).
    """

    per_class_counts: tuple[int, ...]
    emitters: tuple[EmitterProfile, ...]
    receiver: ReceiverProfile = field(default_factory=ReceiverProfile)
    channel: ChannelProfile = field(default_factory=ChannelProfile)
    modulation: str = "bfsk"
    length: int = 256
    seed: int = 0
    domain: str = "source"
    phase_jitter: float = 0.0
    min_separation: float = 0.0

    @property
    def K(self) -> int:
        return len(self.per_class_counts)

    def validate(self):
        if len(self.emitters) != self.K:
            raise ValueError(f"need {self.K} emitters, got {len(self.emitters)}")
        if any(c < 0 for c in self.per_class_counts):
            raise ValueError("per_class_counts entries must be >= 0")
        if self.length < 16:
            raise ValueError(f"record length {self.length} < 16 is too short to modulate")
        if self.modulation not in MODULATIONS:
            raise ValueError(f"unknown modulation {self.modulation!r}")
        if self.domain not in ("source", "target"):
            raise ValueError(f"domain must be 'source' or 'target', got {self.domain!r}")
        if not math.isfinite(self.phase_jitter):
            raise ValueError("phase_jitter must be finite")
        check_separation(self.emitters, self.min_separation)


def check_separation(emitters: Sequence[EmitterProfile], min_separation: float):
    """Raise ProfileCollisionError if two emitters are too similar.

    Distance is the largest absolute difference over the profile fields.
    """
    vecs = [e.as_vector() for e in emitters]
    for i in range(len(vecs)):
        for j in range(i + 1, len(vecs)):
            dist = float(np.max(np.abs(vecs[i] - vecs[j])))
            if dist < min_separation:
                raise ProfileCollisionError(
                    f"emitters {emitters[i].id} and {emitters[j].id} differ by "
                    f"{dist:.3g} < min_separation {min_separation:.3g}")


def modulate(symbols: np.ndarray, length: int, modulation: str = "bfsk",
             phase: float = 0.0) -> np.ndarray:
    """Clean complex baseband waveform for a symbol stream.

    BFSK symbols are +/-1 and produce a phase-continuous tone at
    ``+/-BFSK_DEVIATION``; QPSK symbols are integers 0..3 with rectangular
    pulses.
    """
    idx = np.arange(length) // SAMPLES_PER_SYMBOL
    sym = np.asarray(symbols)[idx]
    if modulation == "bfsk":
        inst = 2 * np.pi * BFSK_DEVIATION * sym
        ph = np.concatenate(([0.0], np.cumsum(inst)[:-1]))
        return np.exp(1j * (ph + phase))
    if modulation == "qpsk":
        return np.exp(1j * (np.pi / 4 + np.pi / 2 * sym + phase))
    raise ValueError(f"unknown modulation {modulation!r}")


def emitter_distort(u: np.ndarray, em: EmitterProfile) -> np.ndarray:
    a3, a5 = em.poly_coeffs
    v = u + a3 * u**3 + a5 * u**5
    i, q = v.real, v.imag
    g, skew = em.iq_gain_imbalance, em.iq_phase_skew
    q = g * (np.cos(skew) * q - np.sin(skew) * i)
    n = np.arange(u.size)
    return (i + 1j * q) * np.exp(2j * np.pi * em.carrier_freq_offset * n)


def receiver_distort(v: np.ndarray, rx: ReceiverProfile) -> np.ndarray:
    b2, b3 = rx.poly_coeffs
    w = v + b2 * v**2 + b3 * v**3
    return rx.gain * np.exp(1j * rx.phase_rotation) * w + rx.dc_offset


def synth_baseband(spec: DatasetSpec, cls: int, rng: np.random.Generator,
                   symbols: np.ndarray | None = None) -> np.ndarray:
    """One received complex baseband record for class ``cls`` (0-based).

    The emitter distortion is applied before the channel and the receiver
    distortion after it; noise is added last. Output is not normalized.
    """
    if not 0 <= cls < spec.K:
        raise ValueError(f"class {cls} out of range for K={spec.K}")
    L = spec.length
    if L < 16:
        raise ValueError(f"record length {L} < 16 is too short to modulate")
    n_sym = -(-L // SAMPLES_PER_SYMBOL)
    if symbols is None:
        if spec.modulation == "bfsk":
            symbols = rng.choice((-1.0, 1.0), size=n_sym)
        else:
            symbols = rng.integers(0, 4, size=n_sym)
    phase = rng.uniform(-spec.phase_jitter, spec.phase_jitter) if spec.phase_jitter else 0.0
    u = modulate(symbols, L, spec.modulation, phase)
    v = emitter_distort(u, spec.emitters[cls])
    v = np.convolve(v, spec.channel.taps())[:L]
    x = receiver_distort(v, spec.receiver)
    lo, hi = spec.receiver.snr_range
    snr_db = lo if lo == hi else rng.uniform(lo, hi)
    if math.isfinite(snr_db):
        p_sig = np.mean(np.abs(x) ** 2)
        sigma = math.sqrt(p_sig / 10 ** (snr_db / 10) / 2)
        x = x + sigma * (rng.standard_normal(L) + 1j * rng.standard_normal(L))
    return x


def record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_dataset(spec: DatasetSpec, reveal_labels: bool = False) -> list[IQRecord]:
    """Generate ``sum(per_class_counts)`` records, grouped by class.

    Target-domain records are unlabeled unless ``reveal_labels`` is set,
    which is meant only for building evaluation sets.
    """
    spec.validate()
    keep = spec.domain == "source" or reveal_labels
    records = []
    index = 0
    for cls, count in enumerate(spec.per_class_counts):
        for _ in range(count):
            x = synth_baseband(spec, cls, record_rng(spec.seed, index))
            x = x / np.sqrt(np.mean(np.abs(x) ** 2))
            samples = np.stack([x.real, x.imag]).astype(np.float32)
            records.append(IQRecord(samples, cls if keep else UNLABELED, spec.domain))
            index += 1
    return records


def stack_records(records: Sequence[IQRecord]) -> tuple[np.ndarray, np.ndarray]:
    """(N, 2, L) float64 sample array and (N,) label array."""
    if not records:
        raise ValueError("no records")
    x = np.stack([r.samples for r in records]).astype(np.float64)
    y = np.array([r.label for r in records], dtype=np.int64)
    return x, y


def write_dataset(records: Sequence[IQRecord], path, num_classes: int):
    records = list(records)
    L = records[0].samples.shape[1] if records else 0
    chunks = [_HEADER.pack(FILE_MAGIC, FILE_VERSION, num_classes, len(records), L)]
    for r in records:
        if r.samples.shape != (2, L):
            raise ValueError(f"record shape {r.samples.shape} != (2, {L})")
        if r.labeled and not 0 <= r.label < num_classes:
            raise ValueError(f"label {r.label} out of range for K={num_classes}")
        lab = r.label if r.labeled else _FILE_UNLABELED
        chunks.append(struct.pack("<H", lab))
        chunks.append(np.ascontiguousarray(r.samples, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_dataset(path, domain: str | None = None) -> tuple[list[IQRecord], int]:
    """Read an SCRF file; returns ``(records, K)``.

    Without an explicit ``domain``, labeled records are tagged ``source`` and
    unlabeled ones ``target``.
    """
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header")
    magic, version, K, N, L = _HEADER.unpack_from(data)
    if magic != FILE_MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r}")
    if version != FILE_VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version}")
    rec_size = 2 + 8 * L
    if len(data) != _HEADER.size + N * rec_size:
        raise DatasetFormatError(
            f"{path}: expected {_HEADER.size + N * rec_size} bytes, got {len(data)}")
    records = []
    off = _HEADER.size
    for _ in range(N):
        (lab,) = struct.unpack_from("<H", data, off)
        samples = np.frombuffer(data, dtype="<f4", count=2 * L, offset=off + 2)
        off += rec_size
        if lab == _FILE_UNLABELED:
            lab = UNLABELED
        elif lab >= K:
            raise DatasetFormatError(f"{path}: label {lab} out of range for K={K}")
        dom = domain or ("source" if lab != UNLABELED else "target")
        records.append(IQRecord(samples.reshape(2, L).astype(np.float32), lab, dom))
    return records, K
