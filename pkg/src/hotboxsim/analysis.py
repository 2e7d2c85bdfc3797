"""Statistics over packet traces: per-bit error histograms, per-nibble error
rates and the MSB susceptibility ratio, plus binned link summaries.

Bits are numbered in transmission order over the MPDU: byte ``k`` holds bits
``8k .. 8k+7`` and its least significant bit goes first.  Lost packets carry
no received bits and are left out of every bit-level statistic.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateHistogram, IoError, LengthMismatch, UnknownPayloadPattern
from .fileio import atomic_write_text
from .orchestrator import Trace, build_payload


def _as_bits(x) -> np.ndarray:
    if isinstance(x, str):
        if set(x) - {"0", "1"}:
            raise ValueError("bit strings may only contain 0 and 1")
        return np.frombuffer(x.encode(), dtype=np.uint8) - ord("0")
    return np.unpackbits(np.frombuffer(bytes(x), dtype=np.uint8), bitorder="little")


def bit_errors(sent, received) -> set:
    """Indices where two equally long bit strings differ.

    Accepts ``bytes`` (bits in transmission order) or strings of 0/1.
    """
    a, b = _as_bits(sent), _as_bits(received)
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} vs {len(b)} bits")
    return set(np.flatnonzero(a != b).tolist())


@dataclass
class BitErrorHistogram:
    counts: np.ndarray
    total_corrupt_packets: int
    header_bits: int = 0        # bits [0, header_bits) belong to the MAC header
    payload_bits: Optional[int] = None

    @property
    def normalized(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else np.zeros(len(self.counts))

    def region(self, k: int) -> str:
        if k < self.header_bits:
            return "header"
        if self.payload_bits is not None and k >= self.header_bits + self.payload_bits:
            return "fcs"
        return "payload"


@dataclass
class NibbleStats:
    transmitted: np.ndarray     # per nibble value
    erroneous: np.ndarray

    @property
    def rate(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.erroneous / self.transmitted

    def _group(self, lo):
        t = self.transmitted[lo:lo + 8].sum()
        return self.erroneous[lo:lo + 8].sum() / t if t else math.nan

    @property
    def msb0_rate(self) -> float:
        return self._group(0)

    @property
    def msb1_rate(self) -> float:
        return self._group(8)

    @property
    def susceptibility_ratio(self) -> float:
        """msb1_rate / msb0_rate; NaN when both are zero, inf when only
        msb0_rate is."""
        m0, m1 = self.msb0_rate, self.msb1_rate
        if math.isnan(m0) or math.isnan(m1) or (m0 == 0 and m1 == 0):
            return math.nan
        return math.inf if m0 == 0 else m1 / m0


@dataclass
class LinkBin:
    label: str
    start_s: float
    end_s: float
    packets: int
    mean_rssi_dbm: float
    mean_lqi: float
    ber: float
    prr_ok: float
    prr_corrupt: float
    prr_lost: float
    mean_rx_temp_c: float
    mean_tx_temp_c: float


@dataclass
class LinkSummary:
    bins: List[LinkBin]

    def column(self, name) -> np.ndarray:
        return np.array([getattr(b, name) for b in self.bins], dtype=float)


# ---------------------------------------------------------------------------

def _received_matrix(records):
    sent = np.array([np.frombuffer(r.sent, dtype=np.uint8) for r in records])
    recv = np.array([np.frombuffer(r.received_bytes(), dtype=np.uint8) for r in records])
    return sent, recv


def _check_lengths(records):
    lengths = {len(r.sent) for r in records} | {len(r.received) for r in records if r.received is not None}
    if len(lengths) > 1:
        raise LengthMismatch(f"inconsistent frame lengths {sorted(lengths)}")
    return lengths.pop() if lengths else None


def _error_counts(records) -> np.ndarray:
    """Number of bit errors in each record."""
    out = np.zeros(len(records), dtype=np.int64)
    if not records:
        return out
    _check_lengths(records)
    for k in range(0, len(records), 4096):
        sent, recv = _received_matrix(records[k:k + 4096])
        out[k:k + len(sent)] = np.unpackbits(sent ^ recv, axis=1).sum(axis=1, dtype=np.int64)
    return out


def packet_ber(trace: Trace) -> np.ndarray:
    """Per-packet bit error rate of every non-lost record, in trace order."""
    heard = [r for r in trace.records if r.outcome != "lost"]
    if not heard:
        return np.zeros(0)
    return _error_counts(heard) / (8.0 * len(heard[0].sent))


def per_bit_histogram(trace: Trace) -> BitErrorHistogram:
    corrupt = [r for r in trace.records if r.outcome == "corrupt"]
    n_bytes = _check_lengths(trace.records)
    n_bits = 8 * (n_bytes if n_bytes is not None else trace.header_len + trace.payload_len + 2)
    counts = np.zeros(n_bits, dtype=np.int64)
    for k in range(0, len(corrupt), 4096):
        sent, recv = _received_matrix(corrupt[k:k + 4096])
        counts += np.unpackbits(sent ^ recv, axis=1, bitorder="little").sum(axis=0, dtype=np.int64)
    return BitErrorHistogram(counts, len(corrupt), 8 * trace.header_len, 8 * trace.payload_len)


def nibble_stats(trace: Trace) -> NibbleStats:
    """Per nibble value error rates over the payload of Ok and Corrupt
    packets.  A nibble is erroneous when any of its four bits differs."""
    h, n = trace.header_len, trace.payload_len
    pattern = build_payload(n)
    values = np.empty(2 * n, dtype=np.intp)
    p = np.frombuffer(pattern, dtype=np.uint8)
    values[0::2], values[1::2] = p & 0xF, p >> 4
    received = [r for r in trace.records if r.outcome != "lost"]
    transmitted = np.zeros(16, dtype=np.int64)
    erroneous = np.zeros(16, dtype=np.int64)
    for r in trace.records:
        if r.sent[h:h + n] != pattern:
            raise UnknownPayloadPattern(f"packet {r.seq} does not carry the test pattern")
    if received:
        np.add.at(transmitted, values, len(received))
        for k in range(0, len(received), 4096):
            sent, recv = _received_matrix(received[k:k + 4096])
            diff = (sent ^ recv)[:, h:h + n]
            bad = np.empty((len(diff), 2 * n), dtype=bool)
            bad[:, 0::2], bad[:, 1::2] = (diff & 0xF) != 0, (diff >> 4) != 0
            np.add.at(erroneous, values, bad.sum(axis=0))
    return NibbleStats(transmitted, erroneous)


def distribution_similarity(h1: BitErrorHistogram, h2: BitErrorHistogram) -> float:
    """Pearson correlation of the two normalised histograms."""
    a, b = np.asarray(h1.counts, float), np.asarray(h2.counts, float)
    if len(a) != len(b):
        raise LengthMismatch("histograms differ in length")
    if not a.any() or not b.any():
        raise DegenerateHistogram("histogram has no errors")
    a, b = a / a.sum(), b / b.sum()
    if a.std() == 0 or b.std() == 0:
        raise DegenerateHistogram("histogram is flat")
    return float(np.corrcoef(a, b)[0, 1])


def _summarize(label, start, end, records):
    n = len(records)
    counts = {o: sum(r.outcome == o for r in records) for o in ("ok", "corrupt", "lost")}
    heard = [r for r in records if r.outcome != "lost"]
    mean = lambda xs: float(np.mean(xs)) if len(xs) else math.nan
    if heard:
        bits = 8 * sum(len(r.sent) for r in heard)
        ber = int(_error_counts([r for r in heard if r.outcome == "corrupt"]).sum()) / bits
    else:
        ber = math.nan
    frac = lambda k: counts[k] / n if n else math.nan
    return LinkBin(label, start, end, n, mean([r.rssi_dbm for r in heard]), mean([r.lqi for r in heard]),
                   ber, frac("ok"), frac("corrupt"), frac("lost"),
                   mean([r.rx_temp for r in records]), mean([r.tx_temp for r in records]))


def link_summary(trace: Trace, binning: Union[str, float] = "dwell",
                 include_transitional: bool = False) -> LinkSummary:
    """Bin a trace per dwell (``"dwell"``) or per ``binning`` seconds."""
    recs = [r for r in trace.records if include_transitional or not r.transitional]
    bins = []
    if binning == "dwell":
        for step in sorted({r.step for r in recs}):
            sub = [r for r in recs if r.step == step]
            tgt = max(sub[0].tx_target, sub[0].rx_target)
            label = f"step{step}" if math.isnan(tgt) else f"step{step}@{tgt:g}C"
            bins.append(_summarize(label, min(r.sim_time for r in sub), max(r.sim_time for r in sub), sub))
    else:
        width = float(binning)
        if not width > 0:
            raise ValueError("bin width must be positive")
        keys = {}
        for r in recs:
            keys.setdefault(int(r.sim_time // width), []).append(r)
        for k in sorted(keys):
            bins.append(_summarize(f"t{k * width:g}", k * width, (k + 1) * width, keys[k]))
    return LinkSummary(bins)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.6f}"
    return str(v)


def _table(result):
    if isinstance(result, BitErrorHistogram):
        norm = result.normalized
        return (["bit_index", "region", "count", "normalized"],
                [[k, result.region(k), int(c), float(norm[k])] for k, c in enumerate(result.counts)])
    if isinstance(result, NibbleStats):
        rows = [[f"0x{v:X}", v >> 3, int(result.transmitted[v]), int(result.erroneous[v]), float(result.rate[v])]
                for v in range(16)]
        for name, lo in (("msb0", 0), ("msb1", 8)):
            rows.append([name, lo >> 3, int(result.transmitted[lo:lo + 8].sum()),
                         int(result.erroneous[lo:lo + 8].sum()), result._group(lo)])
        rows.append(["susceptibility_ratio", "-", "-", "-", result.susceptibility_ratio])
        return ["nibble", "msb", "transmitted", "erroneous", "error_rate"], rows
    if isinstance(result, LinkSummary):
        names = [f.name for f in dataclasses.fields(LinkBin)]
        return names, [[getattr(b, n) for n in names] for b in result.bins]
    if isinstance(result, Sequence) and result and dataclasses.is_dataclass(result[0]):
        names = [f.name for f in dataclasses.fields(result[0])]
        return names, [[getattr(x, n) for n in names] for x in result]
    raise TypeError(f"cannot export {type(result).__name__}")


def to_csv_text(result) -> str:
    header, rows = _table(result)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def export_csv(result, path):
    """Write ``result`` as CSV with a header row and 6-decimal floats."""
    atomic_write_text(path, to_csv_text(result))


def read_csv(path) -> List[dict]:
    """Load an exported CSV; numeric cells come back as floats."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    def conv(s):
        try:
            return float(s)
        except ValueError:
            return s
    return [{k: conv(v) for k, v in row.items()} for row in rows]
