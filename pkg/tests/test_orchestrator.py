import numpy as np
import pytest

from hotboxsim import analysis, phy
from hotboxsim import orchestrator as orch
from hotboxsim.errors import ConfigError, TraceFormatError
from hotboxsim.impairments import ChannelState, LinkGeometry, load_calibration
from hotboxsim.thermal import ScheduleStep

CAL = load_calibration()


def small_config(**kw):
    base = dict(packets_per_run=300, heated_side="receiver",
                schedule=(ScheduleStep(30.0, 10.0), ScheduleStep(40.0, 10.0)), seed=11)
    base.update(kw)
    return orch.ExperimentConfig(**base)


@pytest.fixture(scope="module")
def small_trace():
    return orch.run_experiment(small_config(), CAL)


# --- payload and header -----------------------------------------------------

def test_build_payload_examples():
    assert orch.build_payload(4) == bytes([0x00, 0x00, 0x11, 0x11])
    p80 = orch.build_payload(80)
    assert len(p80) == 80 and p80[64:80] == p80[0:16]
    assert orch.build_payload(33)[32] == 0x00
    assert orch.build_payload(32)[-2:] == b"\xff\xff"
    with pytest.raises(ValueError):
        orch.build_payload(0)


def test_mac_header_carries_sequence_and_addresses():
    h = orch.mac_header(0x1FF, 1)
    assert len(h) == orch.MAC_HEADER_LEN
    assert h[2] == 0xFF
    assert (h[5], h[7]) == (1, 2)


# --- classification ---------------------------------------------------------

def test_classify():
    frame = phy.encode_frame(b"\x01", b"abc")
    assert orch.classify(frame, phy.Lost(), None) == "lost"
    assert orch.classify(frame, phy.Detected(0), frame.mpdu) == "ok"
    bad = bytearray(frame.mpdu)
    bad[1] ^= 0x10
    assert orch.classify(frame, phy.Detected(0), bytes(bad)) == "corrupt"


def test_noiseless_link_is_error_free():
    sim = orch.LinkSimulator(orch.build_payload(80), cal=CAL)
    frame, sig, offset = sim.frame(0, 3)
    out = sim.receive(frame, sig, ChannelState.noiseless(-80.0), CAL.device_profile(),
                      np.random.default_rng(0), offset)
    assert out[0] == "ok" and out[1] is None
    # the first chip of a symbol depends on the previous symbol, so even a
    # clean frame scores slightly below the maximum on some symbols
    assert out[3] >= 240


# --- configs ----------------------------------------------------------------

def test_swap_is_an_involution():
    cfg = orch.resolve_config(small_config(tx_profile=CAL.device_profile("A", susceptibility=0.3)), CAL)
    once = orch.swap_roles(cfg)
    assert once.tx_profile == cfg.rx_profile and once.substream == 1
    assert orch.swap_roles(once) == cfg


def test_validation_names_the_field():
    with pytest.raises(ConfigError, match="payload_len"):
        orch.validate_config(small_config(payload_len=200))
    with pytest.raises(ConfigError, match="heated_side"):
        orch.validate_config(small_config(heated_side="left"))
    with pytest.raises(ConfigError, match="schedule"):
        orch.validate_config(small_config(schedule=(ScheduleStep(95.0),)))


def test_yaml_config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("packets_per_run: 50\nheated_side: transmitter\nschedule:\n"
                    "  - {target_temp: 30, dwell_seconds: 5}\n  - 45\nrx_profile:\n  susceptibility: 0.5\n")
    cfg = orch.load_config(path, CAL)
    assert cfg.packets_per_run == 50 and cfg.heated_side == "transmitter"
    assert [s.target_temp for s in cfg.schedule] == [30.0, 45.0]
    assert cfg.rx_profile.susceptibility == 0.5
    assert cfg.rx_profile.rx_noise_temp_coeff == CAL.rx_noise_temp_coeff


@pytest.mark.parametrize("text,line,match", [
    ("packets_per_run: 10\nheated_side: sideways\n", 2, "heated_side"),
    ("seed: 1\nwarp_drive: true\n", 2, "unknown field"),
    ("seed: 1\n\ntx_profile:\n  tx_temp_coeff: 0.5\n", 4, "tx_profile"),
    ("seed: 1\npackets_per_run: 1.5\n", 2, "packets_per_run"),
    ("seed: [1\n", 2, "YAML"),
])
def test_config_errors_carry_line_numbers(tmp_path, text, line, match):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match) as info:
        orch.load_config(path, CAL)
    assert info.value.line == line
    assert f"{path}:{line}:" in str(info.value)


# --- experiments ------------------------------------------------------------

def test_record_counts_and_alternation(small_trace):
    recs = small_trace.records
    assert len(recs) == 300
    dirs = np.array([r.direction for r in recs])
    assert abs((dirs == 0).sum() - (dirs == 1).sum()) <= 1
    assert np.all(dirs[0::2] == 0) and np.all(dirs[1::2] == 1)
    for d in (0, 1):
        seqs = [r.seq for r in recs if r.direction == d]
        assert seqs == list(range(len(seqs)))
    times = [r.sim_time for r in recs]
    assert times == sorted(times)


def test_lost_records_have_no_readings(small_trace):
    for r in small_trace.records:
        if r.outcome == "lost":
            assert r.rssi_dbm is None and r.lqi is None and r.received is None
        else:
            assert r.rssi_dbm is not None and 0 <= r.lqi <= 255
        if r.outcome == "corrupt":
            assert r.received != r.sent and len(r.received) == len(r.sent)


def test_dwell_temperatures_match_targets(small_trace):
    for r in small_trace.records:
        assert abs(r.rx_temp - r.rx_target) <= 0.5
        assert abs(r.tx_temp - r.tx_target) <= 0.5
    # receiver heated: box B follows the schedule, box A stays at 30
    last = small_trace.select(step=1)
    assert all(r.rx_target == 40.0 for r in last.records if r.direction == 0)
    assert all(r.tx_target == 40.0 for r in last.records if r.direction == 1)
    assert small_trace.heated_direction("receiver") == 0
    assert small_trace.heated_direction("transmitter") == 1


def test_transit_packets_are_flagged():
    cfg = small_config(transit_packets=True, packets_per_run=100, inter_packet_interval=2.0,
                       schedule=(ScheduleStep(30.0, 5.0), ScheduleStep(32.0, 5.0)))
    trace = orch.run_experiment(cfg, CAL)
    flagged = [r for r in trace.records if r.transitional]
    assert flagged and len(trace.records) == 100 + len(flagged)
    assert len(trace.select().records) == 100


def test_same_seed_gives_identical_trace_files(tmp_path, small_trace):
    again = orch.run_experiment(small_config(), CAL)
    a, b = tmp_path / "a.trace", tmp_path / "b.trace"
    orch.write_trace(small_trace, a)
    orch.write_trace(again, b)
    assert a.read_bytes() == b.read_bytes()
    other = orch.run_experiment(small_config(seed=12), CAL)
    assert orch.trace_to_text(other) != orch.trace_to_text(small_trace)


def test_replay_from_snapshot(tmp_path, small_trace):
    path = tmp_path / "run.trace"
    orch.write_trace(small_trace, path)
    loaded = orch.read_trace(path)
    replay = orch.run_experiment(orch.config_from_snapshot(loaded.config), CAL)
    assert orch.trace_to_text(replay) == path.read_text()


def test_trace_file_roundtrip(tmp_path, small_trace):
    path = tmp_path / "run.trace"
    orch.write_trace(small_trace, path)
    loaded = orch.read_trace(path)
    assert loaded.calibration_version == CAL.version
    assert len(loaded.records) == len(small_trace.records)
    for a, b in zip(loaded.records, small_trace.records):
        assert (a.seq, a.direction, a.outcome, a.sent, a.received, a.lqi) == \
               (b.seq, b.direction, b.outcome, b.sent, b.received, b.lqi)


@pytest.mark.parametrize("cut", ["footer", "half", "magic"])
def test_damaged_trace_rejected(tmp_path, small_trace, cut):
    text = orch.trace_to_text(small_trace)
    lines = text.splitlines()
    if cut == "footer":
        text = "\n".join(lines[:-1]) + "\n"
    elif cut == "half":
        text = text[:len(text) // 2]
    else:
        text = "\n".join(lines[1:]) + "\n"
    path = tmp_path / "bad.trace"
    path.write_text(text)
    with pytest.raises(TraceFormatError):
        orch.read_trace(path)


def test_high_snr_run_is_all_ok():
    cfg = small_config(heated_side="none", packets_per_run=200, geometry=LinkGeometry(path_loss_db=40.0))
    trace = orch.run_experiment(cfg, CAL)
    assert all(r.outcome == "ok" for r in trace.records)


def test_fixed_snr_stops_after_enough_corrupt_packets():
    trace = orch.run_fixed_snr(-1.0, CAL.device_profile(), 10, seed=1, cal=CAL, min_corrupt=20)
    assert sum(r.outcome == "corrupt" for r in trace.records) == 20


# --- role swapping ----------------------------------------------------------

def test_swap_with_identical_profiles_is_indistinguishable():
    stats = pytest.importorskip("scipy.stats")
    cfg = orch.ExperimentConfig(packets_per_run=10_000, heated_side="none",
                                schedule=(ScheduleStep(30.0, 10.0),), seed=21)
    a = analysis.packet_ber(orch.run_experiment(cfg, CAL))
    b = analysis.packet_ber(orch.run_experiment(orch.swap_roles(cfg), CAL))
    assert stats.ks_2samp(a, b).pvalue > 0.01


def test_susceptibility_follows_the_receiving_device():
    cfg = orch.ExperimentConfig(
        packets_per_run=4000, heated_side="none", schedule=(ScheduleStep(30.0, 10.0),), seed=3,
        tx_profile=CAL.device_profile("A", susceptibility=0.2),
        rx_profile=CAL.device_profile("B", susceptibility=1.0),
        base_noise_dbm=CAL.tx_power_dbm - CAL.path_loss_db - CAL.skew_snr_db)

    def ratios(c):
        trace = orch.run_experiment(c, CAL)
        return [analysis.nibble_stats(trace.select(direction=d)).susceptibility_ratio for d in (0, 1)]

    to_b, to_a = ratios(cfg)
    assert to_b > 1.4 and to_a < 1.2          # B (beta=1) receives A->B
    to_b, to_a = ratios(orch.swap_roles(cfg))
    assert to_a > 1.4 and to_b < 1.2          # after the swap B carries beta=0.2
