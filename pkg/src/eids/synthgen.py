"""Seeded synthetic HTTP flows for desk-scale training and testing.

Each class has a byte motif (payload template plus per-packet variation) and
a timing profile. Two classes can share their motif so that they differ only
in inter-arrival times. Flows are built as real Ethernet/IPv4/TCP frames
and run through :func:`eids.flowcap.preprocess_packet`, so writing them to
a pcap and preparing that capture gives the same records back.
"""

from __future__ import annotations

import ipaddress
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import flowcap
from .flowcap import FlowKey, FlowRecord, Packet, PrepConfig

CLASS_NAMES = ("benign", "sql_injection", "command_injection", "backdoor_malware", "uploading_attack", "xss")

VICTIM_IP = int(ipaddress.IPv4Address("192.168.1.10"))
_CLIENT_NET = int(ipaddress.IPv4Address("10.0.0.0"))
_ETH = bytes.fromhex("0000000000aa" "0000000000bb") + struct.pack(">H", flowcap.ETHERTYPE_IPV4)
_FIXED_HEADER = 32  # IPv4 (20) + TCP (20) - excised addresses (8)
_EPOCH = 1_700_000_000


class InvalidSpec(ValueError):
    pass


@dataclass
class TimingProfile:
    """Inter-arrival model; times in seconds.

    ``periodic``: ``gap`` with relative spread ``spread``.
    ``bursty``: bursts of ``burst`` packets ``gap`` apart, ``pause`` between bursts.
    ``heavy_tail``: Pareto(``alpha``) gaps scaled by ``gap``.
    """

    kind: str = "periodic"
    gap: float = 0.1
    spread: float = 0.1
    burst: int = 4
    pause: float = 1.0
    alpha: float = 2.5

    def gaps(self, count: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "periodic":
            g = self.gap * (1.0 + self.spread * rng.uniform(-1, 1, count))
        elif self.kind == "bursty":
            g = np.full(count, self.gap) * (1.0 + self.spread * rng.uniform(-1, 1, count))
            g[self.burst - 1::self.burst] = self.pause
        elif self.kind == "heavy_tail":
            g = self.gap * (1.0 + rng.pareto(self.alpha, count))
        else:
            raise InvalidSpec(f"unknown timing profile {self.kind!r}")
        return np.maximum(g, 1e-6)


@dataclass
class ClassProfile:
    name: str
    timing: TimingProfile = field(default_factory=TimingProfile)
    motif: int | None = None  # classes with equal motif ids share byte content
    payload: tuple[int, int] = (40, 300)
    length: tuple[int, int] = (30, 30)


@dataclass
class SynthSpec:
    classes: list[ClassProfile]
    flows_per_class: int = 3
    seed: int = 0
    d: int = 448
    N: int = 30
    motif_distance: float = 0.9  # share of template bytes that are motif-specific
    variation: float = 0.05  # share of payload bytes redrawn per packet

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise InvalidSpec("need at least two classes")
        if self.flows_per_class < 1:
            raise InvalidSpec("flows_per_class must be positive")
        if not 0 <= self.motif_distance <= 1 or not 0 <= self.variation <= 1:
            raise InvalidSpec("motif_distance and variation must lie in [0, 1]")
        for c in self.classes:
            lo, hi = c.length
            if not 1 <= lo <= hi <= self.N:
                raise InvalidSpec(f"class {c.name}: flow lengths {c.length} outside [1, {self.N}]")
            if not 0 <= c.payload[0] <= c.payload[1] <= self.d - _FIXED_HEADER:
                raise InvalidSpec(f"class {c.name}: payload sizes {c.payload} do not fit d={self.d}")

    def motif_of(self, cls: int) -> int:
        m = self.classes[cls].motif
        return cls if m is None else m

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthSpec":
        obj = dict(obj)
        classes = []
        for c in obj.pop("classes"):
            c = dict(c)
            c["timing"] = TimingProfile(**c.get("timing", {}))
            for k in ("payload", "length"):
                if k in c:
                    c[k] = tuple(c[k])
            classes.append(ClassProfile(**c))
        return cls(classes=classes, **obj)


def default_spec(flows_per_class: int = 3, seed: int = 0, N: int = 30, d: int = 448) -> SynthSpec:
    """Six web-attack style classes; ``benign`` and ``sql_injection`` differ only in timing."""
    t = TimingProfile
    profiles = [
        ClassProfile("benign", t("periodic", gap=0.05, spread=0.2), motif=0),
        ClassProfile("sql_injection", t("periodic", gap=1.0, spread=0.2), motif=0),
        ClassProfile("command_injection", t("bursty", gap=0.02, burst=3, pause=0.8)),
        ClassProfile("backdoor_malware", t("heavy_tail", gap=0.2, alpha=2.0)),
        ClassProfile("uploading_attack", t("periodic", gap=0.3, spread=0.5), payload=(200, 400)),
        ClassProfile("xss", t("bursty", gap=0.1, burst=5, pause=2.0)),
    ]
    return SynthSpec(profiles, flows_per_class=flows_per_class, seed=seed, N=N, d=d)


def timing_pair_spec(flows_per_class: int = 3, seed: int = 0, N: int = 30, d: int = 448) -> SynthSpec:
    """Just the two classes that share bytes and differ in inter-arrival times."""
    spec = default_spec(flows_per_class, seed, N, d)
    spec.classes = spec.classes[:2]
    return spec


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(list(key))


def _frame(payload: bytes, sport: int, dport: int, seq: int, src: int, dst: int) -> bytes:
    tcp = struct.pack(">HHIIBBHHH", sport, dport, seq, 0, 5 << 4, 0x18, 64240, 0, 0)
    total = 20 + len(tcp) + len(payload)
    ip = struct.pack(">BBHHHBBH", 0x45, 0, total, seq & 0xFFFF, 0x4000, 64, flowcap.PROTO_TCP, 0)
    ip += struct.pack(">II", src, dst)
    return _ETH + ip + tcp + payload


def client_ip(cls: int, flow: int) -> int:
    return _CLIENT_NET + (cls + 1) * 256 + flow + 1


def _templates(spec: SynthSpec) -> dict[int, np.ndarray]:
    width = spec.d - _FIXED_HEADER
    shared = _rng(spec.seed, 0xC0FFEE).integers(0, 256, width, dtype=np.uint8)
    out = {}
    for motif in sorted({spec.motif_of(c) for c in range(len(spec.classes))}):
        own = _rng(spec.seed, 1, motif).integers(0, 256, width, dtype=np.uint8)
        pick = _rng(spec.seed, 2, motif).random(width) < spec.motif_distance
        out[motif] = np.where(pick, own, shared)
    return out


def generate_flow(spec: SynthSpec, cls: int, flow: int, templates=None) -> tuple[list[Packet], FlowKey]:
    """Frames of one flow with absolute timestamps, plus its flow key."""
    templates = templates or _templates(spec)
    profile = spec.classes[cls]
    motif = spec.motif_of(cls)
    # byte stream keyed by motif, not class, so motif-sharing classes get identical bytes
    brng = _rng(spec.seed, 3, motif, flow)
    trng = _rng(spec.seed, 4, cls, flow)
    lo, hi = profile.length
    n = int(brng.integers(lo, hi + 1))
    client = client_ip(cls, flow)
    sport = int(brng.integers(32768, 61000))
    template = templates[motif]

    T = np.concatenate([[0.0], np.cumsum(profile.timing.gaps(n - 1, trng))])
    T = np.round(T, 6)
    start = _EPOCH + 10 * (cls * spec.flows_per_class + flow)
    packets = []
    for i in range(n):
        size = int(brng.integers(profile.payload[0], profile.payload[1] + 1))
        payload = template[:size].copy()
        redraw = brng.random(size) < spec.variation
        payload[redraw] = brng.integers(0, 256, int(redraw.sum()), dtype=np.uint8)
        if i % 2 == 0:
            frame = _frame(payload.tobytes(), sport, 80, i, client, VICTIM_IP)
        else:
            frame = _frame(payload.tobytes(), 80, sport, i, VICTIM_IP, client)
        packets.append(Packet(start + float(T[i]), frame))
    return packets, flowcap.flow_key(flowcap.ipv4_info(packets[0].data))


def generate(spec: SynthSpec) -> list[FlowRecord]:
    """``flows_per_class`` records per class, class-major order, labels = class index."""
    spec.validate()
    templates = _templates(spec)
    prep = PrepConfig(d=spec.d, N=spec.N, filter="http")
    records = []
    for cls in range(len(spec.classes)):
        for flow in range(spec.flows_per_class):
            packets, key = generate_flow(spec, cls, flow, templates)
            rec = flowcap.build_flow_record(packets, prep, cls, key)
            rec.timestamps = np.round(rec.timestamps, 6)
            records.append(rec)
    return records


def class_names(spec: SynthSpec) -> list[str]:
    return [c.name for c in spec.classes]


# --------------------------------------------------------------------------
# pcap export


def _record_frames(rec: FlowRecord, start: float, fallback: tuple[int, int]) -> list[Packet]:
    rec = rec.valid()
    src, dst = (rec.key.ip_lo, rec.key.ip_hi) if rec.key is not None else fallback
    frames = []
    for row, t in zip(rec.packets, rec.timestamps):
        stripped = np.rint(row * 255.0).astype(np.uint8).tobytes()
        total = int.from_bytes(stripped[2:4], "big")
        length = total - 8 if 20 <= total <= len(stripped) + 8 else len(stripped)
        stripped = stripped[:length]
        frame = _ETH + stripped[:12] + struct.pack(">II", src, dst) + stripped[12:]
        frames.append(Packet(start + float(t), frame))
    return frames


def write_pcap(dataset: Sequence[FlowRecord], path: str | os.PathLike,
               classes: Sequence[str] = (), nanosecond: bool = False) -> Path:
    """Write flows as an interleaved, time-ordered capture plus ``<path>.labels.json``.

    Flow j starts at ``epoch + j`` seconds. Records without a key get a
    placeholder address pair.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    packets, labels = [], {}
    for j, rec in enumerate(dataset):
        fallback = (client_ip(250, j % 250), VICTIM_IP)
        frames = _record_frames(rec, _EPOCH + j, fallback)
        packets.extend(frames)
        key = rec.key or FlowKey(*sorted(fallback), flowcap.PROTO_TCP)
        if rec.label is not None:
            labels[str(key)] = classes[rec.label] if classes else rec.label
    packets.sort(key=lambda p: p.ts)
    flowcap.write_pcap(packets, path, nanosecond=nanosecond)
    labels_path(path).write_text(json.dumps({"classes": list(classes), "flows": labels}, indent=2))
    return path


def labels_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".labels.json")
