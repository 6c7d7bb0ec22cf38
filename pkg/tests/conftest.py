import ipaddress
import struct

import numpy as np
import pytest

from eids.augment import collate
from eids.flowcap import FlowRecord, Packet
from eids.tinyformer import ModelConfig, edl_loss, forward, init_weights, loss_and_grads

ETH_IPV4 = bytes(12) + b"\x08\x00"
ETH_ARP = bytes(12) + b"\x08\x06"


def ip(text):
    return int(ipaddress.IPv4Address(text))


def make_frame(src="10.0.0.1", dst="10.0.0.2", proto=6, sport=1234, dport=80, payload=b"", ttl=64):
    """Ethernet + IPv4 (+ TCP/UDP ports) frame, built field by field."""
    if proto == 6:
        l4 = struct.pack(">HHIIBBHHH", sport, dport, 0, 0, 0x50, 0x18, 1024, 0, 0)
    elif proto == 17:
        l4 = struct.pack(">HHHH", sport, dport, 8 + len(payload), 0)
    else:
        l4 = struct.pack(">BBHI", 8, 0, 0, 0)
    total = 20 + len(l4) + len(payload)
    header = struct.pack(">BBHHHBBH", 0x45, 0, total, 1, 0, ttl, proto, 0)
    header += struct.pack(">II", ip(src), ip(dst))
    return ETH_IPV4 + header + l4 + payload


def make_packet(ts, **kw):
    return Packet(ts, make_frame(**kw))


def random_record(rng, n, d=16, label=0, spread=1.0):
    T = np.concatenate([[0.0], np.cumsum(rng.exponential(spread, n - 1))])
    return FlowRecord(rng.random((n, d)).astype(np.float32), T, label)


TINY = dict(d=16, N=5, d_m=4, h=2, d_h=2, d_ff=8, c=3)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY, pe_kind="none", dtype="float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def batch(rng, cfg, lengths, spread=0.7):
    recs = [random_record(rng, n, d=cfg.d, label=i % cfg.c, spread=spread) for i, n in enumerate(lengths)]
    X, M, T = collate(recs, cfg.N)
    return X, M, T, np.array([r.label for r in recs])


def fd_check(w, X, M, T, y, rng_seed=5, eps=1e-4):
    """Worst relative error of analytic vs central-difference gradients, per tensor."""
    def loss():
        probs = forward(w, X, M, T, train=True, rng=np.random.default_rng(rng_seed))[0]
        return edl_loss(probs, y, M.sum(axis=1))

    _, grads, _ = loss_and_grads(w, X, M, T, y, train=True, rng=np.random.default_rng(rng_seed))
    worst = {}
    for name, param in w.params.items():
        fd = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + eps
            up = loss()
            param[idx] = old - eps
            down = loss()
            param[idx] = old
            fd[idx] = (up - down) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(fd), np.abs(grads[name])), 1e-6)
        worst[name] = float((np.abs(fd - grads[name]) / denom).max())
    return worst


def relu_margin(w, X, M, T, rng_seed=5):
    """Smallest |pre-activation| of the FFN ReLU over valid positions."""
    _, trace = forward(w, X, M, T, train=True, rng=np.random.default_rng(rng_seed))
    return min(np.abs(c["F1"][M]).min() for c in trace.blocks)


def smooth_point(kind, seed=0, margin=1e-2):
    """Weights and batch whose ReLU inputs stay clear of the kink by more than the FD step."""
    cfg = ModelConfig(**TINY, pe_kind=kind, dtype="float64")
    rng = np.random.default_rng(seed)
    while True:
        w = init_weights(cfg, int(rng.integers(1 << 30)))
        for k in w.params:
            w.params[k] += rng.normal(0, 0.1, w.params[k].shape)
        X, M, T, y = batch(rng, cfg, [3, 5, 1])
        if relu_margin(w, X, M, T) > margin:
            return w, X, M, T, y


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number, name, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
