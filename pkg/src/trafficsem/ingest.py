"""Packet capture and flow-table ingestion.

Reads classic libpcap files and flow CSV exports, pairs packets with flow
labels, generates synthetic desk-scale traffic and produces the fixed
temporal test split used by every evaluation.
"""

from __future__ import annotations

import csv
import ipaddress
import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import CorruptCaptureError, RowError, SchemaError, UnsupportedFormatError

log = logging.getLogger(__name__)

MAX_PAYLOAD_LEN = 128
DEFAULT_LABEL = "Benign"

PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_SWAPPED = 0xD4C3B2A1
PCAP_MAGIC_NS = 0xA1B23C4D
PCAP_MAGIC_NS_SWAPPED = 0x4D3CB2A1

LINKTYPE_NULL = 0
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228

PROTO_NUMBERS = {"icmp": 1, "tcp": 6, "udp": 17}
PROTO_NAMES = {v: k.upper() for k, v in PROTO_NUMBERS.items()}

REQUIRED_COLUMNS = (
    "src_ip", "dst_ip", "src_port", "dst_port", "protocol",
    "start", "duration", "packet_count", "byte_count", "label",
)
INT_COLUMNS = {"src_port", "dst_port", "packet_count", "byte_count"}


def make_flow_key(src_ip, dst_ip, src_port, dst_port, protocol) -> str:
    """Direction-independent 5-tuple digest: ``proto|ip|port|ip|port``."""
    a = (str(ipaddress.ip_address(src_ip)), int(src_port))
    b = (str(ipaddress.ip_address(dst_ip)), int(dst_port))
    lo, hi = (a, b) if a <= b else (b, a)
    return f"{int(protocol)}|{lo[0]}|{lo[1]}|{hi[0]}|{hi[1]}"


def parse_flow_key(key: str):
    proto, a_ip, a_port, b_ip, b_port = key.split("|")
    return a_ip, b_ip, int(a_port), int(b_port), int(proto)


@dataclass(frozen=True)
class PacketRecord:
    timestamp: int  # microseconds since epoch
    payload: bytes
    label: str | None = None
    flow_key: str = ""
    length: int = 0  # captured bytes before pad/truncate
    flow_index: int | None = None

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError("timestamp must be >= 0")


@dataclass
class FlowRecord:
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int
    start: float
    duration: float
    packet_count: int
    byte_count: int
    label: str
    rates: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def flow_key(self) -> str:
        return make_flow_key(self.src_ip, self.dst_ip, self.src_port, self.dst_port, self.protocol)

    @property
    def proto_name(self) -> str:
        return PROTO_NAMES.get(self.protocol, str(self.protocol))

    def columns(self) -> dict:
        """Flat column view used for template filling."""
        cols = dict(self.extra)
        cols.update(self.rates)
        cols.update(
            src_ip=self.src_ip, dst_ip=self.dst_ip, src_port=self.src_port,
            dst_port=self.dst_port, protocol=self.protocol, proto=self.proto_name,
            start=self.start, duration=self.duration, packet_count=self.packet_count,
            byte_count=self.byte_count, label=self.label,
        )
        return cols


@dataclass
class LabeledSequence:
    records: list
    class_set: list = field(default_factory=list)
    unmatched: int = 0

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def labels(self) -> list:
        return [r.label for r in self.records]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([r.timestamp for r in self.records], dtype=np.int64)

    def sorted(self) -> "LabeledSequence":
        recs = sorted(self.records, key=lambda r: r.timestamp)
        return replace(self, records=recs)

    def check(self):
        ts = self.timestamps
        if len(ts) > 1 and np.any(np.diff(ts) < 0):
            raise ValueError("records are not sorted by timestamp")
        known = set(self.class_set)
        for r in self.records:
            if r.label is not None and r.label not in known:
                raise ValueError(f"label {r.label!r} not in class_set")


def normalize_payload(data: bytes, max_payload_len: int = MAX_PAYLOAD_LEN) -> bytes:
    return bytes(data[:max_payload_len]).ljust(max_payload_len, b"\x00")


def class_set_of(records) -> list:
    seen = []
    for r in records:
        if r.label is not None and r.label not in seen:
            seen.append(r.label)
    return seen


# --------------------------------------------------------------------------
# libpcap

def _parse_l3(frame: bytes, linktype: int):
    """Return (flow_key, transport_payload) or ("", None) for non-IPv4 frames."""
    off = 0
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return "", None
        ethertype = struct.unpack_from("!H", frame, 12)[0]
        off = 14
        while ethertype in (0x8100, 0x88A8) and len(frame) >= off + 4:
            ethertype = struct.unpack_from("!H", frame, off + 2)[0]
            off += 4
        if ethertype != 0x0800:
            return "", None
    elif linktype == LINKTYPE_NULL:
        off = 4
    elif linktype not in (LINKTYPE_RAW, LINKTYPE_IPV4):
        return "", None

    if len(frame) < off + 20 or frame[off] >> 4 != 4:
        return "", None
    ihl = (frame[off] & 0x0F) * 4
    proto = frame[off + 9]
    src = str(ipaddress.IPv4Address(frame[off + 12:off + 16]))
    dst = str(ipaddress.IPv4Address(frame[off + 16:off + 20]))
    l4 = off + ihl
    sport = dport = 0
    payload_off = l4
    if proto == 6 and len(frame) >= l4 + 20:
        sport, dport = struct.unpack_from("!HH", frame, l4)
        payload_off = l4 + (frame[l4 + 12] >> 4) * 4
    elif proto == 17 and len(frame) >= l4 + 8:
        sport, dport = struct.unpack_from("!HH", frame, l4)
        payload_off = l4 + 8
    return make_flow_key(src, dst, sport, dport, proto), frame[payload_off:]


def read_pcap(path, max_payload_len: int = MAX_PAYLOAD_LEN, strip_headers: bool = False) -> LabeledSequence:
    """Parse a classic (microsecond) libpcap file into an unlabeled sequence.

    Payloads keep link and IP headers unless ``strip_headers`` is set, in
    which case only the transport payload is retained.
    """
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise UnsupportedFormatError(f"{path}: too short for a capture header")
    magic = struct.unpack_from("<I", data, 0)[0]
    if magic == PCAP_MAGIC:
        endian = "<"
    elif magic == PCAP_MAGIC_SWAPPED:
        endian = ">"
    elif magic in (PCAP_MAGIC_NS, PCAP_MAGIC_NS_SWAPPED):
        raise UnsupportedFormatError(f"{path}: nanosecond-resolution captures are not supported")
    else:
        raise UnsupportedFormatError(f"{path}: bad magic 0x{magic:08X}")
    linktype = struct.unpack_from(endian + "I", data, 20)[0]

    records = []
    off = 24
    while off < len(data):
        if off + 16 > len(data):
            raise CorruptCaptureError("truncated record header", off)
        ts_sec, ts_usec, incl_len, _orig_len = struct.unpack_from(endian + "IIII", data, off)
        body = off + 16
        if body + incl_len > len(data):
            raise CorruptCaptureError(f"record claims {incl_len} bytes past end of file", off)
        frame = data[body:body + incl_len]
        key, transport = _parse_l3(frame, linktype)
        raw = transport if (strip_headers and transport is not None) else frame
        records.append(PacketRecord(
            timestamp=ts_sec * 1_000_000 + ts_usec,
            payload=normalize_payload(raw, max_payload_len),
            flow_key=key,
            length=min(len(raw), max_payload_len),
        ))
        off = body + incl_len

    # sorted() is stable, so equal timestamps keep file order
    records.sort(key=lambda r: r.timestamp)
    return LabeledSequence(records=records, class_set=[])


def _frame(payload: bytes, flow_key: str) -> bytes:
    """Wrap a transport payload in Ethernet/IPv4/TCP-or-UDP headers."""
    src, dst, sport, dport, proto = parse_flow_key(flow_key) if flow_key else ("0.0.0.0", "0.0.0.0", 0, 0, 6)
    if proto == 6:
        l4 = struct.pack("!HHIIBBHHH", sport, dport, 0, 0, 5 << 4, 0x18, 65535, 0, 0)
    elif proto == 17:
        l4 = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0)
    else:
        l4 = b""
    total = 20 + len(l4) + len(payload)
    ip = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, total, 0, 0, 64, proto, 0,
        ipaddress.IPv4Address(src).packed, ipaddress.IPv4Address(dst).packed,
    )
    eth = b"\x02\x00\x00\x00\x00\x01" + b"\x02\x00\x00\x00\x00\x02" + b"\x08\x00"
    return eth + ip + l4 + payload


def write_pcap(path, records, endian: str = "<", frame: bool = True, linktype: int = LINKTYPE_ETHERNET):
    """Write records as a classic pcap. With ``frame`` each payload (its first
    ``length`` bytes) is wrapped in synthetic Ethernet/IPv4/L4 headers built
    from the record's flow key."""
    out = bytearray(struct.pack(endian + "IHHiIII", PCAP_MAGIC, 2, 4, 0, 0, 65535, linktype))
    for r in records:
        body = r.payload[:r.length] if r.length else r.payload
        if frame:
            body = _frame(body, r.flow_key)
        sec, usec = divmod(r.timestamp, 1_000_000)
        out += struct.pack(endian + "IIII", sec, usec, len(body), len(body))
        out += body
    Path(path).write_bytes(bytes(out))


# --------------------------------------------------------------------------
# flow CSV

def load_schema_map(path) -> dict:
    """Schema maps are JSON objects ``{canonical_name: csv_column}``."""
    with open(path) as fh:
        return json.load(fh)


def default_schema_map() -> dict:
    return {c: c for c in REQUIRED_COLUMNS}


def _parse_time(cell: str) -> float:
    try:
        return float(cell)
    except ValueError:
        return datetime.fromisoformat(cell).timestamp()


def _parse_proto(cell: str) -> int:
    cell = cell.strip()
    if cell.lower() in PROTO_NUMBERS:
        return PROTO_NUMBERS[cell.lower()]
    return int(float(cell))


class FlowTable(list):
    """List of FlowRecord that also carries per-row parse failures."""

    def __init__(self, records=(), row_errors=()):
        super().__init__(records)
        self.row_errors = list(row_errors)


def read_flow_csv(path, schema_map: dict | None = None, strict: bool = False) -> FlowTable:
    """Read a flow table. Malformed rows are collected in ``row_errors``
    (1-based data row index) unless ``strict`` is set."""
    schema_map = schema_map or default_schema_map()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for canon in REQUIRED_COLUMNS:
            col = schema_map.get(canon, canon)
            if col not in header:
                raise SchemaError(col)
        mapped = {schema_map.get(c, c): c for c in schema_map}
        mapped.update({schema_map.get(c, c): c for c in REQUIRED_COLUMNS})

        table = FlowTable()
        for i, row in enumerate(reader, start=1):
            try:
                table.append(_flow_from_row(row, mapped))
            except (ValueError, TypeError) as exc:
                err = RowError(i, str(exc))
                if strict:
                    raise err from exc
                log.warning("%s: %s", path, err)
                table.row_errors.append(err)
    return table


def _flow_from_row(row: dict, mapped: dict) -> FlowRecord:
    vals, rates, extra = {}, {}, {}
    for col, cell in row.items():
        canon = mapped.get(col)
        if canon is None:
            extra[col] = cell
            continue
        if cell is None:
            raise ValueError(f"missing cell {col!r}")
        cell = cell.strip()
        if canon in ("src_ip", "dst_ip", "label"):
            vals[canon] = cell
        elif canon == "protocol":
            vals[canon] = _parse_proto(cell)
        elif canon == "start":
            vals[canon] = _parse_time(cell)
        elif canon in INT_COLUMNS:
            v = float(cell)
            if v < 0 or not math.isfinite(v):
                raise ValueError(f"{col}={cell!r} must be a non-negative count")
            vals[canon] = int(v)
        elif canon == "duration":
            v = float(cell)
            if v < 0 or not math.isfinite(v):
                raise ValueError(f"{col}={cell!r} must be non-negative")
            vals[canon] = v
        else:
            rates[canon] = float(cell)
    return FlowRecord(**vals, rates=rates, extra=extra)


def write_flow_csv(path, flows, schema_map: dict | None = None):
    schema_map = schema_map or default_schema_map()
    rate_names = sorted({k for f in flows for k in f.rates})
    canon = list(REQUIRED_COLUMNS) + rate_names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([schema_map.get(c, c) for c in canon])
        for f in flows:
            cols = f.columns()
            cols["protocol"] = f.proto_name
            w.writerow([repr(cols[c]) if isinstance(cols[c], float) else cols[c] for c in canon])


# --------------------------------------------------------------------------
# alignment

def align(flows, packets: LabeledSequence, window: float = 1.0,
          default_label: str = DEFAULT_LABEL) -> LabeledSequence:
    """Label each packet from the flow whose ``[start, start+duration+window]``
    interval (seconds) contains it; the latest-starting match wins.
    Unmatched packets get ``default_label`` and are counted."""
    if window <= 0:
        raise ValueError("window must be > 0")
    by_key: dict[str, list] = {}
    for idx, f in enumerate(flows):
        lo = int(round(f.start * 1_000_000))
        hi = int(round((f.start + f.duration + window) * 1_000_000))
        by_key.setdefault(f.flow_key, []).append((lo, hi, idx))

    out, unmatched = [], 0
    for p in packets.records:
        best = None
        for lo, hi, idx in by_key.get(p.flow_key, ()):
            if lo <= p.timestamp <= hi and (best is None or lo >= best[0]):
                best = (lo, idx)
        if best is None:
            unmatched += 1
            out.append(replace(p, label=default_label, flow_index=None))
        else:
            out.append(replace(p, label=flows[best[1]].label, flow_index=best[1]))
    if unmatched:
        log.info("align: %d of %d packets matched no flow", unmatched, len(out))

    classes = class_set_of(flows)
    if unmatched and default_label not in classes:
        classes.append(default_label)
    return LabeledSequence(records=out, class_set=classes, unmatched=unmatched)


# --------------------------------------------------------------------------
# synthetic data

COARSE_CLASSES = ["Benign", "DoS", "Reconnaissance", "Brute Force"]
FINE_CLASSES = [
    "Benign", "OS Scan", "Vulnerability Scan", "Port Scan", "ICMP Flood",
    "Slowloris", "SYN Flood", "UDP Flood", "DNS Flood", "Dictionary Attack",
]
ACI_GROUPS = {
    "Benign": "Benign",
    "OS Scan": "Reconnaissance", "Vulnerability Scan": "Reconnaissance", "Port Scan": "Reconnaissance",
    "ICMP Flood": "DoS", "Slowloris": "DoS", "SYN Flood": "DoS", "UDP Flood": "DoS", "DNS Flood": "DoS",
    "Dictionary Attack": "Brute Force",
}

# protocol, candidate destination ports (None: random high port), mean inter-arrival (s)
_PROFILES = {
    "benign": (6, [443, 80, 8883], 0.02),
    "dos": (17, [80, 53], 0.0008),
    "reconnaissance": (6, None, 0.003),
    "brute force": (6, [22, 23], 0.05),
    "os scan": (6, None, 0.004),
    "vulnerability scan": (6, [80, 443, 8080], 0.01),
    "port scan": (6, None, 0.002),
    "icmp flood": (1, [0], 0.0005),
    "slowloris": (6, [80], 0.5),
    "syn flood": (6, [80, 443], 0.0003),
    "udp flood": (17, [123, 1900], 0.0004),
    "dns flood": (17, [53], 0.0006),
    "dictionary attack": (6, [22, 21], 0.08),
}


def default_class_names(num_classes: int) -> list:
    if num_classes == 4:
        return list(COARSE_CLASSES)
    if num_classes <= len(FINE_CLASSES):
        return FINE_CLASSES[:num_classes]
    return FINE_CLASSES + [f"Class {k}" for k in range(len(FINE_CLASSES), num_classes)]


def synth_dataset(num_classes: int, per_class: int, seed: int = 0, *,
                  class_names=None, cycles: int = 5, signal_rate: float = 0.4,
                  band_prob: float = 0.9, max_payload_len: int = MAX_PAYLOAD_LEN,
                  flow_size=(5, 15)):
    """Generate labeled packets and their flow rows.

    Traffic arrives in ``cycles`` rounds; each round holds one contiguous
    episode per class in a random order, so classes interleave over time and
    the final 20% of the timeline contains every class. Within an episode a
    packet is "informative" with probability ``signal_rate`` (bytes drawn
    mostly from a class-specific byte band) and otherwise opaque (uniform
    random bytes, as for encrypted content).
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    names = list(class_names) if class_names is not None else default_class_names(num_classes)
    if len(names) != num_classes or len(set(names)) != num_classes:
        raise ValueError("class_names must hold num_classes distinct labels")
    rng = np.random.default_rng(seed)
    cycles = max(1, min(cycles, per_class))
    width = 256 // num_classes

    profiles = []
    for k, name in enumerate(names):
        proto, ports, iat = _PROFILES.get(name.lower(), ((6, 17, 1)[k % 3], [1000 + 37 * k], 0.001 * (1 + k)))
        profiles.append((proto, ports, iat))

    # episode sizes per class: per_class split as evenly as possible over cycles
    sizes = [[per_class // cycles + (1 if c < per_class % cycles else 0) for c in range(cycles)]
             for _ in names]

    records, flows = [], []
    t = 1_700_000_000.0
    for c in range(cycles):
        for k in rng.permutation(num_classes):
            proto, ports, iat = profiles[k]
            remaining = sizes[k][c]
            while remaining > 0:
                n = min(remaining, int(rng.integers(flow_size[0], flow_size[1] + 1)))
                remaining -= n
                src = f"10.0.{int(rng.integers(0, 256))}.{int(rng.integers(1, 255))}"
                dst = f"192.168.{k % 256}.{int(rng.integers(1, 255))}"
                sport = int(rng.integers(1024, 65536))
                dport = int(rng.integers(1, 1024)) if ports is None else int(rng.choice(ports))
                if proto == 1:
                    sport = dport = 0
                key = make_flow_key(src, dst, sport, dport, proto)
                start = t
                nbytes = 0
                for _ in range(n):
                    length = int(rng.integers(max_payload_len - 32, max_payload_len + 1))
                    if rng.random() < signal_rate:
                        in_band = rng.random(length) < band_prob
                        body = np.where(in_band, rng.integers(k * width, (k + 1) * width, length),
                                        rng.integers(0, 256, length))
                    else:
                        body = rng.integers(0, 256, length)
                    payload = body.astype(np.uint8).tobytes()
                    records.append(PacketRecord(
                        timestamp=int(round(t * 1_000_000)),
                        payload=normalize_payload(payload, max_payload_len),
                        label=names[k], flow_key=key, length=length, flow_index=len(flows),
                    ))
                    nbytes += length
                    t += float(rng.exponential(iat)) + 1e-6
                duration = max(t - start - 1e-6, 0.0)
                flows.append(FlowRecord(
                    src_ip=src, dst_ip=dst, src_port=sport, dst_port=dport, protocol=proto,
                    start=round(start, 6), duration=round(duration, 6), packet_count=n, byte_count=nbytes,
                    label=names[k],
                    rates={"bytes_per_s": round(nbytes / max(duration, 1e-6), 3),
                           "packets_per_s": round(n / max(duration, 1e-6), 3)},
                ))
            t += 0.5  # idle gap between episodes

    return LabeledSequence(records=records, class_set=names), flows


def byte_histogram(records) -> np.ndarray:
    counts = np.zeros(256, dtype=np.float64)
    for r in records:
        counts += np.bincount(np.frombuffer(r.payload, dtype=np.uint8), minlength=256)
    total = counts.sum()
    return counts / total if total else counts


# --------------------------------------------------------------------------
# splits

TEST_FRACTION = 0.2


def split_dataset(seq: LabeledSequence, fraction: float, seed: int = 0):
    """Temporal hold-out plus stratified training subsample.

    The test set is always the last 20% of records by time, independent of
    ``fraction``; the training set is a per-label random subset (size
    ``round(fraction * count)``) of the remaining records, kept in time order.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    seq = seq.sorted()
    n = len(seq)
    n_test = int(round(TEST_FRACTION * n))
    pool, test = seq.records[:n - n_test], seq.records[n - n_test:]

    rng = np.random.default_rng(seed)
    by_label: dict = {}
    for i, r in enumerate(pool):
        by_label.setdefault(r.label, []).append(i)
    keep = []
    for label in sorted(by_label, key=str):
        idx = by_label[label]
        m = len(idx) if fraction == 1 else int(round(fraction * len(idx)))
        if m == 0:
            warnings.warn(f"class {label!r} absent from training split at fraction {fraction}")
            continue
        keep.extend(rng.choice(idx, size=m, replace=False).tolist())
    keep.sort()
    missing = [c for c in seq.class_set if c not in by_label]
    for c in missing:
        warnings.warn(f"class {c!r} absent from training pool")
    train = LabeledSequence([pool[i] for i in keep], list(seq.class_set))
    return train, LabeledSequence(list(test), list(seq.class_set))


# --------------------------------------------------------------------------
# persistence

def save_sequence(path, seq: LabeledSequence):
    with open(path, "w") as fh:
        fh.write(json.dumps({"class_set": seq.class_set, "unmatched": seq.unmatched}) + "\n")
        for r in seq.records:
            fh.write(json.dumps({
                "ts": r.timestamp, "payload_hex": r.payload.hex(), "label": r.label,
                "flow_key": r.flow_key, "length": r.length, "flow_index": r.flow_index,
            }) + "\n")


def load_sequence(path) -> LabeledSequence:
    with open(path) as fh:
        head = json.loads(fh.readline())
        recs = []
        for line in fh:
            d = json.loads(line)
            recs.append(PacketRecord(d["ts"], bytes.fromhex(d["payload_hex"]), d["label"],
                                     d["flow_key"], d["length"], d["flow_index"]))
    return LabeledSequence(recs, head["class_set"], head.get("unmatched", 0))
