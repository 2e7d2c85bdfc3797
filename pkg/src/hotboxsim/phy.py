"""IEEE 802.15.4 (2.4 GHz) physical layer: framing, DSSS spreading, O-QPSK
modulation, an MSK-style differential chip detector, despreading,
synchronisation and the RSSI/LQI read-outs.

Everything here is a pure function of its inputs.  Random noise is added
elsewhere (see :mod:`hotboxsim.impairments`).
"""
from __future__ import annotations

import binascii
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np

from .errors import EmptySignal, InsufficientSymbols, LengthError, OversizeFrame

CHIP_RATE = 2.0e6            # chips per second
CHIPS_PER_SYMBOL = 32
MAX_MPDU = 127               # octets covered by the length field
PREAMBLE = bytes(4)
SFD = 0xA7
SHR_NIBBLES = 10             # 8 preamble nibbles + 2 SFD nibbles
DEFAULT_SPC = 4
SYNC_MIN_PREAMBLE = 4
SYNC_SEARCH_CHIPS = 32

# Width of the score band within which the MSK branch of the despreader
# treats candidates as tied (scaled by the susceptibility).  The shipped
# value is overridden by the calibration file.
MSK_TIE_BAND = 4.0

# LQI map end points on the per-symbol correlation scale (calibration
# constants, overridden by the calibration file).
LQI_SCORE_LOW = 0.0
LQI_SCORE_HIGH = 32.0

# Symbol 0 of the 2.4 GHz chip table, chip c0 first.
_BASE_CHIPS = (1, 1, 0, 1, 1, 0, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1,
               0, 1, 0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 1, 1, 1, 0)


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    """A PHY frame.  ``length`` counts header + payload + fcs octets."""

    header: bytes
    payload: bytes
    fcs: bytes
    length: int
    preamble: bytes = PREAMBLE
    sfd: int = SFD

    @property
    def mpdu(self) -> bytes:
        return self.header + self.payload + self.fcs

    def to_bytes(self) -> bytes:
        """Full PPDU: sync header, PHY header and MPDU."""
        return self.preamble + bytes([self.sfd, self.length]) + self.mpdu

    def fcs_ok(self) -> bool:
        return crc16(self.header + self.payload) == self.fcs


@dataclass
class Codebook:
    entries: np.ndarray        # (16, 32) uint8
    msk_entries: np.ndarray    # (16, 32) uint8

    def __post_init__(self):
        self.entries.setflags(write=False)
        self.msk_entries.setflags(write=False)
        self._bipolar = (2.0 * self.entries - 1.0).T.copy()
        self._msk_bipolar = (2.0 * self.msk_entries - 1.0).T.copy()

    def min_distance(self, msk: bool = False) -> int:
        return int(_pairwise_distance(self.msk_entries if msk else self.entries)
                   [~np.eye(16, dtype=bool)].min())


@dataclass
class ChipStream:
    """Chip decisions.

    ``coherent`` optionally carries soft chip estimates from a coherent
    sampler running next to the differential detector; the despreader uses
    them for the coherent branch of its blended metric.
    """

    chips: np.ndarray
    chip_rate: float = CHIP_RATE
    samples_per_chip: int = 1
    coherent: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self):
        return len(self.chips)


@dataclass
class BasebandSignal:
    i_samples: np.ndarray
    q_samples: np.ndarray
    samples_per_chip: int = DEFAULT_SPC

    def __post_init__(self):
        if len(self.i_samples) != len(self.q_samples):
            raise ValueError("i and q rails differ in length")

    def __len__(self):
        return len(self.i_samples)

    @property
    def n_chips(self) -> int:
        return max(len(self) // self.samples_per_chip - 1, 0)

    def envelope(self) -> np.ndarray:
        return self.i_samples ** 2 + self.q_samples ** 2

    def slice(self, start: int, stop: int) -> "BasebandSignal":
        return BasebandSignal(self.i_samples[start:stop], self.q_samples[start:stop],
                              self.samples_per_chip)


@dataclass(frozen=True)
class Detected:
    """Frame found; ``index`` is the sample index of the frame start."""

    index: int


@dataclass(frozen=True)
class Lost:
    pass


SyncOutcome = Union[Detected, Lost]


# ---------------------------------------------------------------------------
# codebook
# ---------------------------------------------------------------------------

def _pairwise_distance(table):
    t = np.asarray(table, dtype=np.int16)
    return (t[:, None, :] != t[None, :, :]).sum(axis=2)


def _chip_table():
    base = np.array(_BASE_CHIPS, dtype=np.uint8)
    rows = [np.roll(base, 4 * n) for n in range(8)]
    for n in range(8):
        row = rows[n].copy()
        row[1::2] ^= 1
        rows.append(row)
    return np.array(rows, dtype=np.uint8)


@lru_cache(maxsize=1)
def build_codebook() -> Codebook:
    """Chip table plus the sequences the differential detector reports.

    The MSK view of each symbol is obtained by running the symbol alone
    through the modulator and detector without noise.
    """
    entries = _chip_table()
    msk = np.array([demodulate_chips(modulate_oqpsk(ChipStream(row), DEFAULT_SPC)).chips
                    for row in entries], dtype=np.uint8)
    return Codebook(entries, msk)


# ---------------------------------------------------------------------------
# framing
# ---------------------------------------------------------------------------

_REV8 = bytes(int(f"{b:08b}"[::-1], 2) for b in range(256))


def crc16(data: bytes) -> bytes:
    """FCS of the 802.15.4 MAC (CRC-16/KERMIT), least significant byte first.

    binascii only offers the MSB-first variant, so the reflected CRC is
    computed on bit-reversed input and reversed back.
    """
    reg = binascii.crc_hqx(bytes(data).translate(_REV8), 0)
    reg = int(f"{reg:016b}"[::-1], 2)
    return bytes([reg & 0xFF, reg >> 8])


def encode_frame(header: bytes, payload: bytes) -> Frame:
    header, payload = bytes(header), bytes(payload)
    length = len(header) + len(payload) + 2
    if length > MAX_MPDU:
        raise OversizeFrame(f"MPDU of {length} octets exceeds {MAX_MPDU}")
    return Frame(header=header, payload=payload, fcs=crc16(header + payload), length=length)


def bytes_to_nibbles(data: bytes) -> np.ndarray:
    b = np.frombuffer(bytes(data), dtype=np.uint8)
    out = np.empty(2 * len(b), dtype=np.uint8)
    out[0::2] = b & 0x0F
    out[1::2] = b >> 4
    return out


def nibbles_to_bytes(nibbles) -> bytes:
    n = np.asarray(nibbles, dtype=np.uint8)
    if len(n) % 2:
        raise LengthError("odd number of nibbles")
    return (n[0::2] | (n[1::2] << 4)).astype(np.uint8).tobytes()


def frame_to_nibbles(frame: Frame) -> np.ndarray:
    """Nibbles from preamble through FCS, low nibble of each octet first."""
    return bytes_to_nibbles(frame.to_bytes())


def nibbles_to_frame(nibbles, header_len: int) -> Frame:
    """Inverse of :func:`frame_to_nibbles`.  The header length is not encoded
    in the PHY, so the caller supplies it."""
    data = nibbles_to_bytes(nibbles)
    length = data[5]
    mpdu = data[6:6 + length]
    if len(mpdu) != length or length < header_len + 2:
        raise LengthError("nibble stream shorter than its length field")
    return Frame(header=mpdu[:header_len], payload=mpdu[header_len:-2], fcs=mpdu[-2:],
                 length=length, preamble=data[:4], sfd=data[4])


# ---------------------------------------------------------------------------
# spreading and modulation
# ---------------------------------------------------------------------------

def spread(nibbles: Sequence[int], codebook: Codebook) -> ChipStream:
    n = np.asarray(nibbles, dtype=np.intp)
    if n.size and (n.min() < 0 or n.max() > 15):
        raise ValueError("nibble out of range")
    return ChipStream(codebook.entries[n].reshape(-1))


def _half_sine(spc):
    return np.sin(np.pi * np.arange(2 * spc) / (2 * spc))


def modulate_oqpsk(chips, samples_per_chip: int = DEFAULT_SPC) -> BasebandSignal:
    """Half-sine O-QPSK.

    Even chips drive the I rail and odd chips the Q rail.  Each chip is a
    half-sine lasting two chip periods, so the rails overlap and Q trails I
    by one chip period (half of its own pulse).  N chips give (N+1)*spc
    samples.
    """
    spc = int(samples_per_chip)
    if spc < 2 or spc % 2:
        raise ValueError("samples_per_chip must be even and >= 2")
    c = np.asarray(chips.chips if isinstance(chips, ChipStream) else chips, dtype=np.float64)
    n = len(c)
    total = (n + 1) * spc if n else 0
    i = np.zeros(total)
    q = np.zeros(total)
    a = 2.0 * c - 1.0
    pulse = _half_sine(spc)
    ie = np.outer(a[0::2], pulse).ravel()
    qo = np.outer(a[1::2], pulse).ravel()
    i[:len(ie)] = ie
    q[spc:spc + len(qo)] = qo
    return BasebandSignal(i, q, spc)


def differential_statistics(signal: BasebandSignal) -> np.ndarray:
    """Per-chip soft output of the MSK-style detector.

    For chip k the detector sums Im(r[n] * conj(r[n - spc])) over the
    spc samples centred on (k+1)*spc, i.e. it correlates two windows one
    chip apart.  Samples before the start of the signal count as zero.
    """
    spc = signal.samples_per_chip
    n = signal.n_chips
    i, q = signal.i_samples, signal.q_samples
    h = spc // 2
    hi = h + n * spc
    pad = np.zeros(spc - h, dtype=i.dtype)
    ip = np.concatenate([pad, i[:hi - spc]])
    qp = np.concatenate([pad, q[:hi - spc]])
    prod = q[h:hi] * ip - i[h:hi] * qp
    return prod.reshape(n, spc).sum(axis=1)


def coherent_samples(signal: BasebandSignal) -> np.ndarray:
    """Soft chips from a coherent sampler: each rail read at its pulse peak."""
    spc = signal.samples_per_chip
    n = signal.n_chips
    idx = (np.arange(n) + 1) * spc
    return np.where(np.arange(n) % 2 == 0, signal.i_samples[idx], signal.q_samples[idx])


def _beta(profile) -> float:
    return 1.0 if profile is None else float(profile.susceptibility)


def demodulate_chips(signal: BasebandSignal, profile=None) -> ChipStream:
    """Hard chip decisions from the differential detector.

    A positive statistic decodes as 1.  When the receiving profile also
    decodes against the coherent codebook (susceptibility below 1), the
    coherent soft chips are attached for the despreader.
    """
    spc = signal.samples_per_chip
    if len(signal) % spc:
        raise LengthError("signal length is not a whole number of chips")
    stats = differential_statistics(signal)
    out = ChipStream((stats > 0).astype(np.uint8), samples_per_chip=spc)
    if _beta(profile) < 1.0:
        out.coherent = coherent_samples(signal)
    return out


# ---------------------------------------------------------------------------
# despreading, sync, read-outs
# ---------------------------------------------------------------------------

def despread(chips: ChipStream, codebook: Codebook, profile=None,
             tie_band: Optional[float] = None):
    """Decode 32-chip blocks into nibbles.

    score(n) = (1 - beta) * corr(chips, entry[n]) + beta * corr(chips, msk_entry[n])
    with correlations on the +-1 scale (32 means a perfect match).  Any
    candidate within ``beta * tie_band`` of the best score counts as tied and
    ties go to the lowest nibble value.

    Returns ``(nibbles, scores)`` where ``scores`` holds the winner's score.
    """
    hard = np.asarray(chips.chips)
    if len(hard) % CHIPS_PER_SYMBOL:
        raise LengthError(f"{len(hard)} chips is not a multiple of {CHIPS_PER_SYMBOL}")
    beta = _beta(profile)
    band = beta * (MSK_TIE_BAND if tie_band is None else float(tie_band))
    bip = (2.0 * hard - 1.0).reshape(-1, CHIPS_PER_SYMBOL)
    score = np.zeros((len(bip), 16))
    if beta < 1.0:
        coh = bip if chips.coherent is None else np.asarray(chips.coherent, dtype=np.float64).reshape(bip.shape)
        score += (1.0 - beta) * (coh @ codebook._bipolar)
    if beta > 0.0:
        score += beta * (bip @ codebook._msk_bipolar)
    best = score.max(axis=1, keepdims=True)
    winners = np.argmax(score >= best - band - 1e-9, axis=1)
    return winners.astype(np.uint8), score[np.arange(len(score)), winners]


def detect_sync(decisions: ChipStream, codebook: Codebook,
                min_preamble: int = SYNC_MIN_PREAMBLE,
                search_chips: int = SYNC_SEARCH_CHIPS) -> SyncOutcome:
    """Look for preamble + SFD in a chip decision stream.

    Every chip offset in ``0..search_chips`` is tried in order; the first one
    where at least ``min_preamble`` of the 8 preamble nibbles decode as 0 and
    both SFD nibbles decode exactly wins.
    """
    c = np.asarray(decisions.chips)
    need = SHR_NIBBLES * CHIPS_PER_SYMBOL
    last = min(search_chips, len(c) - need)
    if last < 0:
        return Lost()
    win = np.lib.stride_tricks.sliding_window_view(2.0 * c[:last + need] - 1.0, need)
    sym = np.argmax(win.reshape(last + 1, SHR_NIBBLES, CHIPS_PER_SYMBOL) @ codebook._msk_bipolar, axis=2)
    ok = ((sym[:, :8] == 0).sum(axis=1) >= min_preamble) & (sym[:, 8] == SFD & 0xF) & (sym[:, 9] == SFD >> 4)
    hits = np.flatnonzero(ok)
    if hits.size == 0:
        return Lost()
    return Detected(int(hits[0]) * decisions.samples_per_chip)


def compute_rssi(signal: BasebandSignal, rx_gain_db: float) -> float:
    """Mean power in dB relative to unit amplitude, plus ``rx_gain_db``,
    rounded to whole dB."""
    if len(signal) == 0:
        raise EmptySignal("cannot measure the power of an empty signal")
    power = float(np.mean(signal.envelope()))
    return float(np.round(10.0 * np.log10(power) + rx_gain_db))


def compute_lqi(scores, low: float = LQI_SCORE_LOW, high: float = LQI_SCORE_HIGH) -> int:
    """Map the mean of the first 8 symbol scores linearly onto 0..255."""
    s = np.asarray(scores, dtype=np.float64)
    if len(s) < 8:
        raise InsufficientSymbols(f"need 8 symbol scores, got {len(s)}")
    x = (s[:8].mean() - low) / (high - low)
    return int(np.clip(np.round(255.0 * x), 0, 255))
