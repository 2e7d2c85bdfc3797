"""Experiment protocol: two chambers, two motes taking turns, a shared
simulated clock, and one phy simulation per packet.

Mote A sits in box A and uses ``tx_profile``; mote B sits in box B and uses
``rx_profile``.  Directions alternate A->B, B->A, ... so one run yields two
data sets.  With ``heated_side="receiver"`` box B follows the schedule, which
makes A->B the receiver-heated set and B->A the transmitter-heated set.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml

from . import phy
from .errors import ConfigError, IoError, TraceFormatError
from .fileio import atomic_write_text
from .impairments import (Calibration, ChannelState, DeviceProfile, LinkGeometry, apply_awgn,
                          link_state, load_calibration)
from .phy import BasebandSignal, ChipStream, Lost
from .thermal import PlantParams, ScheduleStep, ThermalState, run_lockstep

DIRECTIONS = ("A->B", "B->A")
HEATED_SIDES = ("transmitter", "receiver", "both", "none")
OUTCOMES = ("ok", "corrupt", "lost")
TRACE_MAGIC = "# hotboxsim-trace v1"
TRACE_COLUMNS = ("seq", "direction", "sim_time_s", "tx_temp_c", "rx_temp_c", "outcome",
                 "rssi_dbm", "lqi", "sent_hex", "received_hex",
                 "step", "tx_target_c", "rx_target_c", "transitional")
MAC_HEADER_LEN = 9
PATTERN_PERIOD = 32


def build_payload(length: int) -> bytes:
    """Test pattern 00 00 11 11 ... FF FF, repeated and cut to ``length``."""
    if length < 1:
        raise ValueError("payload length must be >= 1")
    period = bytes(v * 0x11 for v in range(16) for _ in range(2))
    reps = -(-length // PATTERN_PERIOD)
    return (period * reps)[:length]


def mac_header(seq: int, direction: int) -> bytes:
    """Data frame header: frame control, sequence number, PAN id, short
    destination and source addresses (all little endian)."""
    src, dst = (1, 2) if direction == 0 else (2, 1)
    return bytes([0x41, 0x88, seq & 0xFF, 0x22, 0x00, dst, 0x00, src, 0x00])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReceiverSettings:
    samples_per_chip: int = phy.DEFAULT_SPC
    min_preamble: int = phy.SYNC_MIN_PREAMBLE
    tie_band: Optional[float] = None
    lqi_score_low: Optional[float] = None
    lqi_score_high: Optional[float] = None


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one run.

    Fields left as ``None`` are filled from the calibration by
    :func:`resolve_config`; a trace stores the resolved config so it can be
    replayed exactly.
    """

    packets_per_run: int = 180_000
    payload_len: int = 80
    heated_side: str = "receiver"
    schedule: tuple = tuple(ScheduleStep(float(t), 1200.0) for t in range(30, 90, 10))
    constant_side_temp: float = 30.0
    geometry: Optional[LinkGeometry] = None
    tx_profile: Optional[DeviceProfile] = None
    rx_profile: Optional[DeviceProfile] = None
    seed: int = 0
    inter_packet_interval: float = 0.1
    base_noise_dbm: Optional[float] = None
    substream: int = 0
    transit_packets: bool = False
    receiver: ReceiverSettings = ReceiverSettings()
    dt: float = 0.5

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"] = [dataclasses.asdict(s) for s in self.schedule]
        return d


def resolve_config(config: ExperimentConfig, cal: Calibration) -> ExperimentConfig:
    rx = config.receiver
    rx = dataclasses.replace(
        rx,
        tie_band=cal.msk_tie_band if rx.tie_band is None else rx.tie_band,
        lqi_score_low=cal.lqi_score_low if rx.lqi_score_low is None else rx.lqi_score_low,
        lqi_score_high=cal.lqi_score_high if rx.lqi_score_high is None else rx.lqi_score_high)
    return dataclasses.replace(
        config,
        geometry=config.geometry or cal.geometry(),
        tx_profile=config.tx_profile or cal.device_profile("A"),
        rx_profile=config.rx_profile or cal.device_profile("B"),
        base_noise_dbm=cal.base_noise_dbm if config.base_noise_dbm is None else config.base_noise_dbm,
        receiver=rx)


def validate_config(config: ExperimentConfig, params: Optional[PlantParams] = None):
    """Raise ConfigError naming the offending field."""
    def bad(key, msg):
        raise ConfigError(f"{key}: {msg}")

    if not isinstance(config.packets_per_run, int) or config.packets_per_run < 1:
        bad("packets_per_run", "must be an integer >= 1")
    if not 1 <= config.payload_len <= phy.MAX_MPDU - MAC_HEADER_LEN - 2:
        bad("payload_len", f"must lie in [1, {phy.MAX_MPDU - MAC_HEADER_LEN - 2}]")
    if config.heated_side not in HEATED_SIDES:
        bad("heated_side", f"must be one of {', '.join(HEATED_SIDES)}")
    if not config.schedule:
        bad("schedule", "needs at least one step")
    limit = params.max_temp if params else 90.0
    for s in config.schedule:
        if s.target_temp > limit:
            bad("schedule", f"target {s.target_temp} above the {limit} degC limit")
    if config.constant_side_temp > limit:
        bad("constant_side_temp", f"above the {limit} degC limit")
    if not config.inter_packet_interval > 0:
        bad("inter_packet_interval", "must be positive")
    if not 0 < config.dt <= 1:
        bad("dt", "must lie in (0, 1]")
    spc = config.receiver.samples_per_chip
    if spc < 2 or spc % 2:
        bad("receiver.samples_per_chip", "must be even and >= 2")
    if not 0 <= config.receiver.min_preamble <= 8:
        bad("receiver.min_preamble", "must lie in [0, 8]")
    if not 0 <= config.seed < 2 ** 64:
        bad("seed", "must be a 64-bit unsigned integer")


def swap_roles(config: ExperimentConfig) -> ExperimentConfig:
    """Exchange the two device profiles.  The seed stays, the substream bit
    flips, so swapping twice returns the original config."""
    return dataclasses.replace(config, tx_profile=config.rx_profile, rx_profile=config.tx_profile,
                               substream=config.substream ^ 1)


_SECTION_TYPES = {"geometry": LinkGeometry, "tx_profile": DeviceProfile,
                  "rx_profile": DeviceProfile, "receiver": ReceiverSettings}


def config_from_dict(data: dict, cal: Optional[Calibration] = None, lines: Optional[dict] = None,
                     source: Optional[str] = None) -> ExperimentConfig:
    """Build a config from plain data.  ``lines`` maps dotted key paths to
    line numbers for error messages."""
    lines = lines or {}

    def fail(key, msg):
        raise ConfigError(f"{key}: {msg}", source=source, line=lines.get(key))

    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", source=source, line=1)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            fail(key, "unknown field")
        if key == "schedule":
            if not isinstance(value, list) or not value:
                fail(key, "must be a non-empty list of steps")
            steps = []
            for k, item in enumerate(value):
                try:
                    steps.append(ScheduleStep(**item) if isinstance(item, dict) else ScheduleStep(float(item)))
                except (TypeError, ValueError) as exc:
                    fail(f"schedule.{k}", str(exc))
            kwargs[key] = tuple(steps)
        elif key in _SECTION_TYPES:
            if value is None:
                continue
            if not isinstance(value, dict):
                fail(key, "must be a mapping")
            base = {}
            if cal is not None and key.endswith("_profile"):
                base = dataclasses.asdict(cal.device_profile("A" if key == "tx_profile" else "B"))
            elif cal is not None and key == "geometry":
                base = dataclasses.asdict(cal.geometry())
            base.update(value)
            try:
                kwargs[key] = _SECTION_TYPES[key](**base)
            except (TypeError, ValueError) as exc:
                sub = next((f"{key}.{k}" for k in value if f"{key}.{k}" in lines and k in str(exc)), key)
                fail(sub, str(exc))
        else:
            kwargs[key] = value
    for key in ("packets_per_run", "seed", "substream"):
        if key in kwargs and (isinstance(kwargs[key], bool) or not isinstance(kwargs[key], int)):
            fail(key, "must be an integer")
    try:
        config = ExperimentConfig(**kwargs)
        validate_config(config)
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0]
        raise ConfigError(str(exc), source=source, line=lines.get(key)) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), source=source) from None
    return config


def _key_lines(node, prefix="", out=None):
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}{k.value}"
            out[path] = k.start_mark.line + 1
            _key_lines(v, path + ".", out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out[f"{prefix}{i}"] = v.start_mark.line + 1
            _key_lines(v, f"{prefix}{i}.", out)
    return out


def load_config(path, cal: Optional[Calibration] = None) -> ExperimentConfig:
    """Read a YAML config file whose keys mirror ExperimentConfig."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", source=str(path),
                          line=mark.line + 1 if mark else None) from None
    return config_from_dict(data or {}, cal, _key_lines(node) if node else {}, str(path))


# ---------------------------------------------------------------------------
# packets
# ---------------------------------------------------------------------------

@dataclass
class PacketRecord:
    seq: int
    direction: int              # index into DIRECTIONS
    sim_time: float
    tx_temp: float
    rx_temp: float
    sent: bytes                 # MPDU: header + payload + fcs
    outcome: str                # "ok" | "corrupt" | "lost"
    received: Optional[bytes] = None   # only for corrupt
    rssi_dbm: Optional[float] = None
    lqi: Optional[int] = None
    step: int = -1
    tx_target: float = math.nan
    rx_target: float = math.nan
    transitional: bool = False

    def received_bytes(self) -> Optional[bytes]:
        if self.outcome == "ok":
            return self.sent
        return self.received


@dataclass
class Trace:
    config: dict
    records: List[PacketRecord]
    calibration_version: str
    header_len: int = MAC_HEADER_LEN

    @property
    def payload_len(self) -> int:
        return int(self.config.get("payload_len", 80))

    def select(self, direction=None, step=None, include_transitional=False) -> "Trace":
        recs = [r for r in self.records
                if (direction is None or r.direction == direction)
                and (step is None or r.step == step)
                and (include_transitional or not r.transitional)]
        return Trace(self.config, recs, self.calibration_version, self.header_len)

    def heated_direction(self, role: str) -> int:
        """Direction whose ``role`` ("receiver" or "transmitter") sits in a
        scheduled box.  Only meaningful for single-sided heating."""
        side = self.config.get("heated_side")
        box = {"transmitter": 0, "receiver": 1}.get(side)
        if box is None:
            raise ValueError(f"heated_side={side!r} has no single heated box")
        # direction d is sent from box d
        return box if role == "transmitter" else 1 - box


def classify(sent: phy.Frame, sync, decoded: Optional[bytes]) -> str:
    """Outcome of one transmission: lost, ok or corrupt."""
    if isinstance(sync, Lost) or decoded is None:
        return "lost"
    return "ok" if bytes(decoded) == sent.mpdu else "corrupt"


class LinkSimulator:
    """Runs the transmit and receive chain for individual packets.

    Modulated frames are cached per (direction, sequence byte).  Noise is
    drawn in two stages: first for the part of the signal the synchroniser
    needs, then, only if sync succeeds, for the rest.
    """

    def __init__(self, payload: bytes, receiver: ReceiverSettings = ReceiverSettings(),
                 cal: Optional[Calibration] = None):
        self.codebook = phy.build_codebook()
        self.payload = bytes(payload)
        self.spc = receiver.samples_per_chip
        self.min_preamble = receiver.min_preamble
        cal = cal or Calibration()
        pick = lambda v, d: d if v is None else v
        self.tie_band = pick(receiver.tie_band, cal.msk_tie_band)
        self.lqi_low = pick(receiver.lqi_score_low, cal.lqi_score_low)
        self.lqi_high = pick(receiver.lqi_score_high, cal.lqi_score_high)
        self._cache: Dict[tuple, tuple] = {}
        self.sync_samples = (phy.SHR_NIBBLES * phy.CHIPS_PER_SYMBOL + phy.SYNC_SEARCH_CHIPS + 1) * self.spc

    def frame(self, direction: int, seq: int):
        key = (direction, seq & 0xFF)
        hit = self._cache.get(key)
        if hit is None:
            frame = phy.encode_frame(mac_header(seq, direction), self.payload)
            clean = phy.modulate_oqpsk(phy.spread(phy.frame_to_nibbles(frame), self.codebook), self.spc)
            # unrounded power of the clean frame in dB; compute_rssi rounds
            rssi_offset = float(10.0 * np.log10(np.mean(clean.envelope())))
            fast = BasebandSignal(clean.i_samples.astype(np.float32), clean.q_samples.astype(np.float32), self.spc)
            hit = (frame, fast, rssi_offset)
            self._cache[key] = hit
        return hit

    def receive(self, frame: phy.Frame, signal: BasebandSignal, channel: ChannelState,
                rx_profile: DeviceProfile, rng: np.random.Generator, rssi_offset: float = 0.0):
        """Returns (outcome, received mpdu or None, rssi, lqi)."""
        head = apply_awgn(signal.slice(0, self.sync_samples), channel, rng)
        sync = phy.detect_sync(phy.demodulate_chips(head), self.codebook, self.min_preamble)
        if isinstance(sync, Lost):
            return "lost", None, None, None
        tail = apply_awgn(signal.slice(self.sync_samples, len(signal)), channel, rng)
        noisy = BasebandSignal(np.concatenate([head.i_samples, tail.i_samples]),
                               np.concatenate([head.q_samples, tail.q_samples]), self.spc)
        chips = phy.demodulate_chips(noisy, rx_profile)
        start = sync.index // self.spc
        n_sym = (len(chips) - start) // phy.CHIPS_PER_SYMBOL
        stop = start + n_sym * phy.CHIPS_PER_SYMBOL
        view = ChipStream(chips.chips[start:stop], samples_per_chip=self.spc,
                          coherent=None if chips.coherent is None else chips.coherent[start:stop])
        nibbles, scores = phy.despread(view, self.codebook, rx_profile, self.tie_band)
        nibbles = nibbles[:n_sym - n_sym % 2]
        data = phy.nibbles_to_bytes(nibbles)
        mpdu = data[6:6 + len(frame.mpdu)]
        mpdu = mpdu + bytes(len(frame.mpdu) - len(mpdu))
        outcome = classify(frame, sync, mpdu)
        # signal-component power; RSSI reads the received signal level
        rssi = float(np.round(channel.rssi_dbm + rssi_offset))
        lqi = phy.compute_lqi(scores[phy.SHR_NIBBLES:phy.SHR_NIBBLES + 8], self.lqi_low, self.lqi_high)
        return outcome, (mpdu if outcome == "corrupt" else None), rssi, lqi


def packet_rng(seed: int, substream: int, direction: int, seq: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, substream, direction, seq]))


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

def _dwell_shares(n_packets: int, n_steps: int) -> List[int]:
    base, extra = divmod(n_packets, n_steps)
    return [base + (1 if k < extra else 0) for k in range(n_steps)]


def _chamber_targets(config: ExperimentConfig):
    heat_a = config.heated_side in ("transmitter", "both")
    heat_b = config.heated_side in ("receiver", "both")
    const = config.constant_side_temp
    return [[s.target_temp if heat_a else const, s.target_temp if heat_b else const]
            for s in config.schedule]


def plan_timeline(config: ExperimentConfig, params: PlantParams, env_temp: float):
    """Thermal run for both boxes plus the send times of every packet.

    Returns (thermal run, list of (time, step, transitional)).
    """
    shares = _dwell_shares(config.packets_per_run, len(config.schedule))
    dwell = [max(s.dwell_seconds, n * config.inter_packet_interval)
             for s, n in zip(config.schedule, shares)]
    init = ThermalState.at_rest(config.constant_side_temp, env_temp)
    run = run_lockstep([init, init], _chamber_targets(config), dwell, params, config.dt)
    ticks = []
    prev_end = 0.0
    for (step, start, _end), n in zip(run.dwell_windows(), shares):
        if config.transit_packets:
            t = prev_end
            while t < start - 1e-9:
                ticks.append((t, step, True))
                t += config.inter_packet_interval
        ticks.extend((start + j * config.inter_packet_interval, step, False) for j in range(n))
        prev_end = start + n * config.inter_packet_interval
    return run, ticks


def run_experiment(config: ExperimentConfig, cal: Optional[Calibration] = None) -> Trace:
    cal = cal or load_calibration()
    config = resolve_config(config, cal)
    params = PlantParams.from_calibration(cal)
    validate_config(config, params)
    run, ticks = plan_timeline(config, params, cal.env_temp)

    times = np.array([t for t, _, _ in ticks])
    idx = np.clip(np.searchsorted(run.time, times, side="right") - 1, 0, len(run.time) - 1)
    motes, targets = run.mote[idx], run.target[idx]

    sim = LinkSimulator(build_payload(config.payload_len), config.receiver, cal)
    profiles = (config.tx_profile, config.rx_profile)
    records = []
    seqs = [0, 0]
    for g, (t, step, transitional) in enumerate(ticks):
        d = g % 2
        tx, rx = (0, 1) if d == 0 else (1, 0)
        seq = seqs[d]
        seqs[d] += 1
        t_tx, t_rx = float(motes[g, tx]), float(motes[g, rx])
        channel = link_state(profiles[tx], t_tx, profiles[rx], t_rx, config.geometry, config.base_noise_dbm)
        frame, signal, offset = sim.frame(d, seq)
        rng = packet_rng(config.seed, config.substream, d, seq)
        outcome, received, rssi, lqi = sim.receive(frame, signal, channel, profiles[rx], rng, offset)
        records.append(PacketRecord(seq, d, float(t), t_tx, t_rx, frame.mpdu, outcome, received, rssi, lqi,
                                    step, float(targets[g, tx]), float(targets[g, rx]), transitional))
    return Trace(config.to_dict(), records, cal.version)


def run_fixed_snr(snr_db: float, rx_profile: DeviceProfile, n_packets: int, seed: int = 0,
                  payload_len: int = 80, cal: Optional[Calibration] = None,
                  min_corrupt: Optional[int] = None, max_packets: Optional[int] = None,
                  receiver: ReceiverSettings = ReceiverSettings()) -> Trace:
    """Single-direction link at a fixed SNR with no thermal model.

    With ``min_corrupt`` set, keeps sending past ``n_packets`` until that many
    corrupt packets were seen (or ``max_packets`` is reached).
    """
    cal = cal or Calibration()
    sim = LinkSimulator(build_payload(payload_len), receiver, cal)
    channel = ChannelState.from_levels(snr_db, 0.0)
    records = []
    corrupt = 0
    seq = 0
    if max_packets is not None:
        limit = max_packets
    else:
        limit = n_packets if min_corrupt is None else max(100 * n_packets, 100 * min_corrupt)
    while seq < limit and (seq < n_packets or (min_corrupt is not None and corrupt < min_corrupt)):
        frame, signal, offset = sim.frame(0, seq)
        outcome, received, rssi, lqi = sim.receive(frame, signal, channel, rx_profile,
                                                   packet_rng(seed, 0, 0, seq), offset)
        corrupt += outcome == "corrupt"
        records.append(PacketRecord(seq, 0, seq * 0.1, rx_profile.reference_temp, rx_profile.reference_temp,
                                    frame.mpdu, outcome, received, rssi, lqi, 0))
        seq += 1
    config = {"payload_len": payload_len, "snr_db": snr_db, "seed": seed,
              "rx_profile": dataclasses.asdict(rx_profile), "heated_side": "none"}
    return Trace(config, records, cal.version)


# ---------------------------------------------------------------------------
# trace files
# ---------------------------------------------------------------------------

def _fmt(v, digits=6):
    if v is None:
        return "-"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.{digits}f}"
    return str(v)


def trace_to_text(trace: Trace) -> str:
    out = [TRACE_MAGIC,
           f"# calibration_version: {trace.calibration_version}",
           f"# header_len: {trace.header_len}",
           "# config: " + json.dumps(trace.config, sort_keys=True),
           "\t".join(TRACE_COLUMNS)]
    for r in trace.records:
        out.append("\t".join([
            str(r.seq), DIRECTIONS[r.direction], _fmt(r.sim_time, 3), _fmt(r.tx_temp, 3),
            _fmt(r.rx_temp, 3), r.outcome, _fmt(None if r.rssi_dbm is None else int(r.rssi_dbm)),
            _fmt(r.lqi), r.sent.hex().upper(), r.received.hex().upper() if r.received else "-",
            str(r.step), _fmt(r.tx_target, 3), _fmt(r.rx_target, 3), str(int(r.transitional))]))
    out.append(f"# end records={len(trace.records)}")
    return "\n".join(out) + "\n"


def write_trace(trace: Trace, path):
    atomic_write_text(path, trace_to_text(trace))


def read_trace(path) -> Trace:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read trace {path}: {exc}") from exc
    if not lines or lines[0] != TRACE_MAGIC:
        raise TraceFormatError(f"{path}: not a hotboxsim trace")
    meta = {}
    body_start = None
    for k, line in enumerate(lines[1:], 1):
        if line.startswith("# ") and ":" in line:
            key, _, val = line[2:].partition(":")
            meta[key.strip()] = val.strip()
        else:
            body_start = k
            break
    if body_start is None or lines[body_start].split("\t") != list(TRACE_COLUMNS):
        raise TraceFormatError(f"{path}: missing column header")
    footer = lines[-1]
    if not footer.startswith("# end records="):
        raise TraceFormatError(f"{path}: truncated (no end marker)")
    body = lines[body_start + 1:-1]
    if int(footer.split("=", 1)[1]) != len(body):
        raise TraceFormatError(f"{path}: record count does not match end marker")
    try:
        config = json.loads(meta["config"])
        records = []
        for lineno, line in enumerate(body, body_start + 2):
            f = line.split("\t")
            if len(f) != len(TRACE_COLUMNS):
                raise TraceFormatError(f"{path}:{lineno}: expected {len(TRACE_COLUMNS)} fields")
            num = lambda s, conv=float: None if s == "-" else conv(s)
            records.append(PacketRecord(
                seq=int(f[0]), direction=DIRECTIONS.index(f[1]), sim_time=float(f[2]),
                tx_temp=float(f[3]), rx_temp=float(f[4]), sent=bytes.fromhex(f[8]), outcome=f[5],
                received=None if f[9] == "-" else bytes.fromhex(f[9]),
                rssi_dbm=num(f[6]), lqi=num(f[7], int), step=int(f[10]),
                tx_target=float(f[11]), rx_target=float(f[12]), transitional=f[13] == "1"))
            if f[5] not in OUTCOMES:
                raise TraceFormatError(f"{path}:{lineno}: unknown outcome {f[5]!r}")
    except TraceFormatError:
        raise
    except (KeyError, ValueError, IndexError) as exc:
        raise TraceFormatError(f"{path}: malformed trace ({exc})") from None
    return Trace(config, records, meta.get("calibration_version", "unknown"),
                 int(meta.get("header_len", MAC_HEADER_LEN)))


def config_from_snapshot(snapshot: dict) -> ExperimentConfig:
    """Rebuild the resolved config stored in a trace header."""
    return config_from_dict(snapshot)
