import math

import numpy as np
import pytest

from hotboxsim import analysis as an
from hotboxsim import orchestrator as orch
from hotboxsim.errors import DegenerateHistogram, LengthMismatch, UnknownPayloadPattern
from hotboxsim.impairments import load_calibration
from hotboxsim.phy import encode_frame
from hotboxsim.thermal import ScheduleStep

CAL = load_calibration()
PAYLOAD = orch.build_payload(80)


def record(seq, outcome="ok", flips=(), step=0, t=None, rx_temp=30.0, direction=0):
    sent = encode_frame(orch.mac_header(seq, direction), PAYLOAD).mpdu
    received = None
    if outcome == "corrupt":
        buf = bytearray(sent)
        for bit in flips:
            buf[bit // 8] ^= 1 << (bit % 8)
        received = bytes(buf)
    heard = outcome != "lost"
    return orch.PacketRecord(seq, direction, float(seq if t is None else t), 30.0, rx_temp, sent, outcome,
                             received, -80.0 if heard else None, 200 if heard else None, step)


def trace_of(records):
    return orch.Trace({"payload_len": 80}, list(records), "test")


# --- bit_errors -------------------------------------------------------------

def test_bit_errors_examples():
    assert an.bit_errors("1011", "1011") == set()
    assert an.bit_errors("000000000", "000001000") == {5}
    assert an.bit_errors("0101", "1010") == {0, 1, 2, 3}
    assert an.bit_errors(b"\x00\x00", b"\x00\x01") == {8}    # LSB goes first
    with pytest.raises(LengthMismatch):
        an.bit_errors("01", "011")
    with pytest.raises(ValueError):
        an.bit_errors("012", "010")


# --- histograms -------------------------------------------------------------

def test_histogram_without_errors_is_zero():
    h = an.per_bit_histogram(trace_of([record(0), record(1, "lost")]))
    assert h.total_corrupt_packets == 0 and not h.counts.any()
    assert len(h.counts) == 8 * (9 + 80 + 2)


def test_histogram_single_flip():
    h = an.per_bit_histogram(trace_of([record(0), record(1, "corrupt", [100])]))
    assert np.flatnonzero(h.counts).tolist() == [100]
    assert h.region(10) == "header" and h.region(100) == "payload" and h.region(8 * 90) == "fcs"


def test_histogram_conserves_error_count():
    rng = np.random.default_rng(0)
    recs = []
    total = 0
    for k in range(50):
        flips = sorted(set(rng.integers(0, 728, rng.integers(1, 20)).tolist()))
        total += len(flips)
        recs.append(record(k, "corrupt", flips))
    h = an.per_bit_histogram(trace_of(recs))
    assert h.counts.sum() == total
    assert h.normalized.sum() == pytest.approx(1.0)


def test_histogram_rejects_mixed_lengths():
    short = record(1)
    short.sent = short.sent[:-1]
    with pytest.raises(LengthMismatch):
        an.per_bit_histogram(trace_of([record(0), short]))


def test_msb_nibbles_carry_more_histogram_mass():
    trace = orch.run_fixed_snr(CAL.skew_snr_db, CAL.device_profile(), 400, seed=2, cal=CAL)
    h = an.per_bit_histogram(trace)
    payload = h.counts[8 * 9:8 * 89].reshape(80, 8).sum(axis=1)
    values = np.frombuffer(PAYLOAD, dtype=np.uint8) & 0xF
    assert payload[values >= 8].mean() > payload[values < 8].mean()


# --- nibble statistics ------------------------------------------------------

def test_nibble_stats_error_free_ratio_is_nan():
    st = an.nibble_stats(trace_of([record(0), record(1)]))
    # 80 byte pattern: values 0..7 sit in 6 octets, 8..15 in 4; two nibbles each
    assert st.transmitted.tolist() == [2 * 12] * 8 + [2 * 8] * 8
    assert not st.erroneous.any()
    assert math.isnan(st.susceptibility_ratio)
    assert st.msb0_rate == 0.0


def test_nibble_stats_counts_errors_per_value():
    # payload byte 16 is 0x88: flip one bit in each nibble of it
    bit = 8 * (9 + 16)
    st = an.nibble_stats(trace_of([record(0, "corrupt", [bit, bit + 4]), record(1, "lost")]))
    assert st.erroneous[8] == 2 and st.erroneous.sum() == 2
    assert st.transmitted.sum() == 160
    assert math.isinf(st.susceptibility_ratio)
    assert np.all((st.rate >= 0) & (st.rate <= 1))


def test_nibble_stats_needs_test_pattern():
    r = record(0)
    r.sent = r.sent[:9] + bytes(80) + r.sent[-2:]
    with pytest.raises(UnknownPayloadPattern):
        an.nibble_stats(trace_of([r]))


# --- similarity -------------------------------------------------------------

def test_similarity():
    rng = np.random.default_rng(1)
    h = an.BitErrorHistogram(rng.integers(0, 50, 728), 10)
    assert an.distribution_similarity(h, h) == pytest.approx(1.0)
    flat = an.BitErrorHistogram(np.full(728, 3), 10)
    with pytest.raises(DegenerateHistogram):
        an.distribution_similarity(h, flat)
    with pytest.raises(DegenerateHistogram):
        an.distribution_similarity(h, an.BitErrorHistogram(np.zeros(728, dtype=int), 0))
    other = an.BitErrorHistogram(rng.integers(0, 50, 728), 10)
    assert -1.0 <= an.distribution_similarity(h, other) <= 1.0


# --- link summaries ---------------------------------------------------------

def test_all_ok_and_all_lost_bins():
    recs = [record(k, step=0) for k in range(5)] + [record(k, "lost", step=1) for k in range(5, 9)]
    s = an.link_summary(trace_of(recs))
    ok, lost = s.bins
    assert (ok.ber, ok.prr_ok, ok.packets) == (0.0, 1.0, 5)
    assert lost.prr_lost == 1.0
    assert math.isnan(lost.mean_rssi_dbm) and math.isnan(lost.mean_lqi) and math.isnan(lost.ber)


def test_ber_counts_corrupt_bits_over_heard_bits():
    recs = [record(0), record(1, "corrupt", [3, 9]), record(2, "lost")]
    (b,) = an.link_summary(trace_of(recs)).bins
    assert b.ber == pytest.approx(2 / (2 * 8 * 91))
    assert b.prr_ok + b.prr_corrupt + b.prr_lost == pytest.approx(1.0, abs=1e-12)


def test_time_bins():
    recs = [record(k, t=k * 0.5) for k in range(10)]
    s = an.link_summary(trace_of(recs), 2.0)
    assert s.column("packets").tolist() == [4, 4, 2]
    with pytest.raises(ValueError):
        an.link_summary(trace_of(recs), -1.0)


@pytest.fixture(scope="module")
def heated_trace():
    cfg = orch.ExperimentConfig(packets_per_run=1800, heated_side="receiver", seed=4,
                                schedule=tuple(ScheduleStep(t, 60.0) for t in (30.0, 50.0, 70.0)))
    return orch.run_experiment(cfg, CAL)


def test_prr_sums_to_one_in_every_bin(heated_trace):
    for binning in ("dwell", 30.0):
        for d in (None, 0, 1):
            s = an.link_summary(heated_trace.select(direction=d), binning)
            total = s.column("prr_ok") + s.column("prr_corrupt") + s.column("prr_lost")
            assert np.all(np.abs(total - 1.0) <= 1e-12)


def test_ber_rises_with_receiver_temperature(heated_trace):
    stats = pytest.importorskip("scipy.stats")
    s = an.link_summary(heated_trace.select(direction=heated_trace.heated_direction("receiver")))
    rho = stats.spearmanr(s.column("mean_rx_temp_c"), s.column("ber")).statistic
    assert rho == pytest.approx(1.0)
    ber = s.column("ber")
    assert ber[-1] > 5 * ber[0]


# --- CSV --------------------------------------------------------------------

def test_csv_roundtrip_and_determinism(tmp_path, heated_trace):
    s = an.link_summary(heated_trace)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    an.export_csv(s, a)
    an.export_csv(s, b)
    assert a.read_bytes() == b.read_bytes()
    rows = an.read_csv(a)
    assert len(rows) == len(s.bins)
    for row, bin_ in zip(rows, s.bins):
        assert row["label"] == bin_.label
        assert row["packets"] == bin_.packets
        assert row["ber"] == pytest.approx(bin_.ber, abs=1e-6)


def test_csv_of_empty_summary_is_header_only(tmp_path):
    path = tmp_path / "empty.csv"
    an.export_csv(an.LinkSummary([]), path)
    assert path.read_text().splitlines() == [",".join(an.LinkBin.__dataclass_fields__)]


def test_csv_of_histogram_and_nibbles(heated_trace):
    hist = an.to_csv_text(an.per_bit_histogram(heated_trace)).splitlines()
    assert hist[0] == "bit_index,region,count,normalized" and len(hist) == 1 + 728
    nib = an.to_csv_text(an.nibble_stats(heated_trace)).splitlines()
    assert nib[1].startswith("0x0,0,") and nib[-1].startswith("susceptibility_ratio,")
    with pytest.raises(TypeError):
        an.to_csv_text(object())
