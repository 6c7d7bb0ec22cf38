"""Packet capture ingestion, host-centric flow grouping and packet preprocessing.

Classic libpcap files only (both byte orders, microsecond and nanosecond
variants). Frames are expected to be Ethernet II carrying IPv4.
"""

from __future__ import annotations

import base64
import io
import ipaddress
import json
import os
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
ETH_HEADER_LEN = 14
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_ARP = 0x0806
MIN_IPV4_HEADER_LEN = 20
LINKTYPE_ETHERNET = 1

PROTO_ICMP = 1
PROTO_TCP = 6
PROTO_UDP = 17


class FlowcapError(Exception):
    """Base class for capture and preprocessing errors."""


class UnknownMagic(FlowcapError):
    pass


class TruncatedHeader(FlowcapError):
    def __init__(self, offset: int, message: str = "truncated global header"):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class TruncatedRecord(FlowcapError):
    def __init__(self, offset: int, message: str = "truncated packet record"):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class UnknownFilter(FlowcapError):
    pass


class NotIPv4(FlowcapError):
    pass


class TooShort(FlowcapError):
    pass


class EmptyFlow(FlowcapError):
    pass


class ViolatedMonotonicity(FlowcapError):
    pass


@dataclass(frozen=True)
class Packet:
    ts: float
    data: bytes
    orig_len: int = 0

    def __post_init__(self):
        if self.ts < 0:
            raise ValueError("packet timestamp must be non-negative")
        if not self.data:
            raise ValueError("packet bytes must be non-empty")
        if self.orig_len == 0:
            object.__setattr__(self, "orig_len", len(self.data))


@dataclass(frozen=True, order=True)
class FlowKey:
    """Direction-free flow identifier.

    Addresses are stored as integers with ``ip_lo <= ip_hi``. For the 5-tuple
    variant the ports travel with their endpoint, so ``port_lo`` belongs to
    ``ip_lo``.
    """

    ip_lo: int
    ip_hi: int
    proto: int
    port_lo: int | None = None
    port_hi: int | None = None

    @property
    def variant(self) -> str:
        return "3-tuple" if self.port_lo is None else "5-tuple"

    def __str__(self) -> str:
        lo = str(ipaddress.IPv4Address(self.ip_lo))
        hi = str(ipaddress.IPv4Address(self.ip_hi))
        if self.port_lo is None:
            return f"{lo}-{hi}-{self.proto}"
        return f"{lo}:{self.port_lo}-{hi}:{self.port_hi}-{self.proto}"

    @classmethod
    def parse(cls, text: str) -> "FlowKey":
        """Inverse of ``str(key)``."""
        a, b, proto = text.rsplit("-", 2)
        if ":" in a:
            ip_a, port_a = a.split(":")
            ip_b, port_b = b.split(":")
            return cls(int(ipaddress.IPv4Address(ip_a)), int(ipaddress.IPv4Address(ip_b)),
                       int(proto), int(port_a), int(port_b))
        return cls(int(ipaddress.IPv4Address(a)), int(ipaddress.IPv4Address(b)), int(proto))


@dataclass
class PrepConfig:
    d: int = 448
    N: int = 30
    filter: str = "http"
    flow_variant: str = "3-tuple"
    on_disorder: str = "error"

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("d must be positive")
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if self.flow_variant not in ("3-tuple", "5-tuple"):
            raise ValueError(f"unknown flow variant {self.flow_variant!r}")
        if self.on_disorder not in ("error", "clamp"):
            raise ValueError(f"unknown disorder policy {self.on_disorder!r}")
        if self.filter not in FILTERS:
            raise UnknownFilter(self.filter)


@dataclass
class FlowRecord:
    """One flow (or subflow): an ``n x d`` matrix in [0, 1] plus relative timestamps."""

    packets: np.ndarray
    timestamps: np.ndarray
    label: int | None = None
    mask: np.ndarray | None = None
    key: FlowKey | None = None

    def __post_init__(self):
        self.packets = np.asarray(self.packets, dtype=np.float32)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones(len(self.packets), dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
        if self.packets.ndim != 2:
            raise ValueError("packet matrix must be 2-D")
        if not (len(self.packets) == len(self.timestamps) == len(self.mask)):
            raise ValueError("packets, timestamps and mask disagree in length")

    @property
    def n(self) -> int:
        """Number of valid (unpadded) packets."""
        return int(self.mask.sum())

    @property
    def d(self) -> int:
        return self.packets.shape[1]

    def valid(self) -> "FlowRecord":
        """Drop padding rows."""
        if self.mask.all():
            return self
        return FlowRecord(self.packets[self.mask], self.timestamps[self.mask],
                          self.label, None, self.key)

    def check(self, N: int | None = None) -> None:
        """Raise ``ValueError`` if any record invariant is broken."""
        rec = self.valid()
        T = rec.timestamps
        if rec.n < 1:
            raise ValueError("flow has no valid packets")
        if N is not None and rec.n > N:
            raise ValueError(f"flow length {rec.n} exceeds N={N}")
        if T[0] != 0.0:
            raise ValueError(f"first timestamp is {T[0]}, expected 0")
        if np.any(np.diff(T) < 0):
            raise ValueError("timestamps decrease")
        if not np.all(np.isfinite(rec.packets)):
            raise ValueError("non-finite packet cell")
        if rec.packets.min() < 0.0 or rec.packets.max() > 1.0:
            raise ValueError("packet cell outside [0, 1]")


# --------------------------------------------------------------------------
# pcap I/O


def _open_source(source) -> tuple[bytes, str]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source), "<bytes>"
    if isinstance(source, (str, os.PathLike)):
        return Path(source).read_bytes(), str(source)
    return source.read(), getattr(source, "name", "<stream>")


def parse_pcap(source: bytes | str | os.PathLike | BinaryIO) -> list[Packet]:
    """Read every record of a classic pcap capture, in file order."""
    buf, _ = _open_source(source)
    if len(buf) < 4:
        raise UnknownMagic(f"capture too short for a magic number ({len(buf)} bytes)")
    for endian in ("<", ">"):
        (magic,) = struct.unpack(endian + "I", buf[:4])
        if magic in (MAGIC_USEC, MAGIC_NSEC):
            break
    else:
        raise UnknownMagic(f"unrecognised magic 0x{buf[:4].hex()}")
    if len(buf) < GLOBAL_HEADER_LEN:
        raise TruncatedHeader(len(buf))
    frac_div = 1e9 if magic == MAGIC_NSEC else 1e6

    packets = []
    offset = GLOBAL_HEADER_LEN
    rec_fmt = endian + "IIII"
    while offset < len(buf):
        if offset + RECORD_HEADER_LEN > len(buf):
            raise TruncatedRecord(offset, "truncated record header")
        sec, frac, incl_len, orig_len = struct.unpack_from(rec_fmt, buf, offset)
        start = offset + RECORD_HEADER_LEN
        if start + incl_len > len(buf):
            raise TruncatedRecord(offset, "truncated packet data")
        packets.append(Packet(sec + frac / frac_div, buf[start:start + incl_len], orig_len))
        offset = start + incl_len
    return packets


def write_pcap(packets: Iterable[Packet], dest: str | os.PathLike | BinaryIO | None = None,
               nanosecond: bool = False, big_endian: bool = False,
               snaplen: int = 65535) -> bytes:
    """Serialise packets as a classic pcap capture; returns the bytes written."""
    endian = ">" if big_endian else "<"
    magic = MAGIC_NSEC if nanosecond else MAGIC_USEC
    scale = 10**9 if nanosecond else 10**6
    out = io.BytesIO()
    out.write(struct.pack(endian + "IHHiIII", magic, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))
    for pkt in packets:
        ticks = round(pkt.ts * scale)
        sec, frac = divmod(ticks, scale)
        out.write(struct.pack(endian + "IIII", sec, frac, len(pkt.data), max(pkt.orig_len, len(pkt.data))))
        out.write(pkt.data)
    data = out.getvalue()
    if dest is not None:
        if isinstance(dest, (str, os.PathLike)):
            Path(dest).write_bytes(data)
        else:
            dest.write(data)
    return data


# --------------------------------------------------------------------------
# header inspection


@dataclass(frozen=True)
class IPv4Info:
    src: int
    dst: int
    proto: int
    sport: int | None
    dport: int | None


def ethertype(frame: bytes) -> int | None:
    if len(frame) < ETH_HEADER_LEN:
        return None
    return int.from_bytes(frame[12:14], "big")


def ipv4_info(frame: bytes) -> IPv4Info | None:
    """Addresses, protocol and ports of an Ethernet/IPv4 frame; None if not parseable."""
    if ethertype(frame) != ETHERTYPE_IPV4 or len(frame) < ETH_HEADER_LEN + MIN_IPV4_HEADER_LEN:
        return None
    ip = frame[ETH_HEADER_LEN:]
    if ip[0] >> 4 != 4:
        return None
    ihl = (ip[0] & 0x0F) * 4
    proto = ip[9]
    src = int.from_bytes(ip[12:16], "big")
    dst = int.from_bytes(ip[16:20], "big")
    sport = dport = None
    if proto in (PROTO_TCP, PROTO_UDP) and len(ip) >= ihl + 4:
        sport, dport = struct.unpack_from(">HH", ip, ihl)
    return IPv4Info(src, dst, proto, sport, dport)


def _is_http(pkt: Packet) -> bool:
    info = ipv4_info(pkt.data)
    return info is not None and info.proto == PROTO_TCP and 80 in (info.sport, info.dport)


def _is_icmp(pkt: Packet) -> bool:
    info = ipv4_info(pkt.data)
    return info is not None and info.proto == PROTO_ICMP


def _is_arp(pkt: Packet) -> bool:
    return ethertype(pkt.data) == ETHERTYPE_ARP


FILTERS: dict[str, Callable[[Packet], bool]] = {
    "all": lambda pkt: True,
    "http": _is_http,
    "arp": _is_arp,
    "icmp": _is_icmp,
}


def filter_packets(flow: Sequence[Packet], filter: str = "all") -> list[Packet]:
    try:
        pred = FILTERS[filter]
    except KeyError:
        raise UnknownFilter(f"unknown packet filter {filter!r}; choose from {sorted(FILTERS)}") from None
    return [pkt for pkt in flow if pred(pkt)]


# --------------------------------------------------------------------------
# flow identification


def flow_key(info: IPv4Info, variant: str = "3-tuple") -> FlowKey:
    if variant == "3-tuple":
        lo, hi = sorted((info.src, info.dst))
        return FlowKey(lo, hi, info.proto)
    a = (info.src, info.sport or 0)
    b = (info.dst, info.dport or 0)
    (ip_lo, port_lo), (ip_hi, port_hi) = sorted((a, b))
    return FlowKey(ip_lo, ip_hi, info.proto, port_lo, port_hi)


@dataclass
class FlowTable:
    flows: dict[FlowKey, list[Packet]] = field(default_factory=dict)
    skipped: int = 0
    truncated: int = 0

    def __len__(self):
        return len(self.flows)

    def __getitem__(self, key: FlowKey) -> list[Packet]:
        return self.flows[key]

    def __iter__(self):
        return iter(self.flows)

    def items(self):
        return self.flows.items()

    def values(self):
        return self.flows.values()


def identify_flows(packets: Iterable[Packet], cfg: PrepConfig) -> FlowTable:
    """Group packets by flow key, keeping capture order and the first N packets of each flow.

    Non-IPv4 frames are counted in ``skipped``; packets beyond N in ``truncated``.
    """
    table = FlowTable()
    for pkt in packets:
        info = ipv4_info(pkt.data)
        if info is None:
            table.skipped += 1
            continue
        bucket = table.flows.setdefault(flow_key(info, cfg.flow_variant), [])
        if len(bucket) < cfg.N:
            bucket.append(pkt)
        else:
            table.truncated += 1
    return table


# --------------------------------------------------------------------------
# preprocessing


def strip_headers(frame: bytes) -> bytes:
    """Drop the Ethernet header and excise the 8 IPv4 address bytes."""
    if len(frame) < ETH_HEADER_LEN + MIN_IPV4_HEADER_LEN:
        raise TooShort(f"frame of {len(frame)} bytes is shorter than Ethernet + IPv4 headers")
    if ethertype(frame) != ETHERTYPE_IPV4:
        raise NotIPv4(f"ethertype 0x{ethertype(frame):04x} is not IPv4")
    ip = frame[ETH_HEADER_LEN:]
    return ip[:12] + ip[20:]


def preprocess_packet(pkt: Packet | bytes, d: int = 448) -> np.ndarray:
    """Fixed-length float vector of the stripped packet, bytes scaled to [0, 1]."""
    frame = pkt.data if isinstance(pkt, Packet) else pkt
    raw = np.frombuffer(strip_headers(frame), dtype=np.uint8)[:d]
    out = np.zeros(d, dtype=np.float32)
    out[: len(raw)] = raw / np.float32(255.0)
    return out


def build_flow_record(flow: Sequence[Packet], cfg: PrepConfig, label: int | None = None,
                      key: FlowKey | None = None) -> FlowRecord:
    if not flow:
        raise EmptyFlow("cannot build a record from an empty flow")
    flow = flow[: cfg.N]
    ts = np.array([p.ts for p in flow], dtype=np.float64)
    if np.any(np.diff(ts) < 0):
        if cfg.on_disorder == "error":
            bad = int(np.argmax(np.diff(ts) < 0)) + 1
            raise ViolatedMonotonicity(f"packet {bad} of flow {key} arrives before its predecessor")
        ts = np.maximum.accumulate(ts)
    matrix = np.stack([preprocess_packet(p, cfg.d) for p in flow])
    return FlowRecord(matrix, ts - ts[0], label, None, key)


@dataclass
class PrepareResult:
    records: list[FlowRecord]
    skipped: int = 0
    truncated: int = 0
    filtered_out: int = 0
    empty_flows: int = 0


def prepare(packets: Sequence[Packet], cfg: PrepConfig,
            label_of: Callable[[FlowKey], int | None] = lambda key: None) -> PrepareResult:
    """Packets of one capture -> flow records, in order of each flow's first packet.

    The protocol filter is applied per packet before grouping, so packets the
    filter rejects never take one of a flow's N slots.
    """
    kept = filter_packets(packets, cfg.filter)
    table = identify_flows(kept, cfg)
    result = PrepareResult([], table.skipped, table.truncated, len(packets) - len(kept))
    for key, flow in table.items():
        if not flow:
            result.empty_flows += 1
            continue
        result.records.append(build_flow_record(flow, cfg, label_of(key), key))
    return result


# --------------------------------------------------------------------------
# dataset files


def record_to_dict(rec: FlowRecord) -> dict:
    return {
        "key": None if rec.key is None else str(rec.key),
        "label": rec.label,
        "n": rec.n,
        "d": rec.d,
        "packets": base64.b64encode(np.ascontiguousarray(rec.packets, dtype="<f4").tobytes()).decode("ascii"),
        "timestamps": [float(t) for t in rec.timestamps],
    }


def record_from_dict(obj: dict) -> FlowRecord:
    n, d = obj["n"], obj["d"]
    packets = np.frombuffer(base64.b64decode(obj["packets"]), dtype="<f4").reshape(n, d)
    key = None if obj.get("key") is None else FlowKey.parse(obj["key"])
    return FlowRecord(packets.astype(np.float32), obj["timestamps"], obj.get("label"), None, key)


def save_dataset(records: Sequence[FlowRecord], path: str | os.PathLike,
                 classes: Sequence[str] = (), prep: PrepConfig | None = None,
                 extra: dict | None = None) -> Path:
    """Write ``records`` as JSON lines plus a ``<path>.manifest.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec.valid())) + "\n")
    counts = Counter(rec.label for rec in records)
    manifest = {
        "format": "eids-flows/1",
        "classes": list(classes),
        "prep": asdict(prep) if prep is not None else None,
        "num_records": len(records),
        "counts": {(classes[k] if classes and k is not None else str(k)): v
                   for k, v in sorted(counts.items(), key=lambda kv: (kv[0] is None, kv[0] or 0))},
    }
    if extra:
        manifest.update(extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2))
    return path


def manifest_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def load_dataset(path: str | os.PathLike) -> tuple[list[FlowRecord], dict]:
    path = Path(path)
    with path.open() as fh:
        records = [record_from_dict(json.loads(line)) for line in fh if line.strip()]
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
    return records, manifest
