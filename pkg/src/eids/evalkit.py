"""Ensemble inference and confidence-threshold streaming evaluation.

A flow is fed to the ensemble one packet at a time; the first prefix whose
top-1 confidence reaches the threshold fixes the decision. Flows that never
get there are decided on the full flow.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .flowcap import EmptyFlow, FlowRecord


class Member(Protocol):
    def predict_proba(self, X: np.ndarray, M: np.ndarray, T: np.ndarray) -> np.ndarray: ...


@dataclass
class Ensemble:
    members: list
    aggregation: str = "mean"
    N: int | None = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if self.aggregation not in ("mean", "vote"):
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        configs = [getattr(m, "config", None) for m in self.members]
        if all(c is not None for c in configs):
            if len({c.c for c in configs}) != 1:
                raise ValueError("ensemble members disagree on the number of classes")
            if len({c.pe_family for c in configs}) != 1:
                raise ValueError("ensemble members use different positional-encoding families")
            if self.N is None:
                self.N = configs[0].N

    def predict_batch(self, X, M, T) -> np.ndarray:
        outs = np.stack([np.asarray(m.predict_proba(X, M, T), dtype=np.float64) for m in self.members])
        if self.aggregation == "mean":
            return outs.mean(axis=0)
        votes = np.zeros(outs.shape[1:])
        winners = outs.argmax(axis=2)
        for row in winners:
            votes[np.arange(len(row)), row] += 1.0
        return votes / len(self.members)


def _single(rec: FlowRecord, k: int, N: int | None):
    rec = rec.valid()
    width = N if N is not None else rec.n
    X = np.zeros((1, width, rec.d), dtype=np.float32)
    X[0, :k] = rec.packets[:k]
    M = np.zeros((1, width), dtype=bool)
    M[0, :k] = True
    T = np.zeros((1, width))
    T[0, :k] = rec.timestamps[:k]
    return X, M, T


def ensemble_predict(ens: Ensemble, prefix: FlowRecord) -> np.ndarray:
    """Aggregated class distribution for one (prefix) flow."""
    rec = prefix.valid()
    return ens.predict_batch(*_single(rec, rec.n, ens.N))[0]


@dataclass
class Decision:
    flow_id: str
    predicted: int
    confidence: float
    k: int
    crossed_threshold: bool
    tau: float
    label: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def stream_classify(ens: Ensemble, flow: FlowRecord, tau: float, flow_id: str = "") -> Decision:
    """Decide at the first prefix whose top-1 confidence reaches ``tau``, else on the full flow."""
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    rec = flow.valid()
    if rec.n == 0:
        raise EmptyFlow("cannot classify an empty flow")
    for k in range(1, rec.n + 1):
        probs = ens.predict_batch(*_single(rec, k, ens.N))[0]
        top = int(np.argmax(probs))
        if probs[top] >= tau:
            return Decision(flow_id, top, float(probs[top]), k, True, tau, rec.label)
    return Decision(flow_id, top, float(probs[top]), rec.n, False, tau, rec.label)


class PrefixStream:
    """Incremental form of :func:`stream_classify` for packet-by-packet replay."""

    def __init__(self, ens: Ensemble, tau: float, N: int):
        self.ens, self.tau, self.N = ens, tau, N
        self.rows: list[np.ndarray] = []
        self.times: list[float] = []
        self.decision: Decision | None = None
        self.last: tuple[int, float] | None = None

    def push(self, row: np.ndarray, t: float, flow_id: str = "") -> Decision | None:
        """Add one packet; returns a decision the first time one is reached."""
        if self.decision is not None or len(self.rows) >= self.N:
            return None
        self.rows.append(row)
        self.times.append(t)
        rec = FlowRecord(np.stack(self.rows), np.array(self.times))
        k = rec.n
        probs = self.ens.predict_batch(*_single(rec, k, self.ens.N))[0]
        top = int(np.argmax(probs))
        self.last = (top, float(probs[top]))
        if probs[top] >= self.tau:
            self.decision = Decision(flow_id, top, float(probs[top]), k, True, self.tau)
        elif k == self.N:
            self.decision = Decision(flow_id, top, float(probs[top]), k, False, self.tau)
        return self.decision

    def finish(self, flow_id: str = "") -> Decision | None:
        """Decision on the full flow when the capture ends before one was reached."""
        if self.decision is None and self.last is not None:
            top, conf = self.last
            self.decision = Decision(flow_id, top, conf, len(self.rows), False, self.tau)
            return self.decision
        return None


# --------------------------------------------------------------------------
# metrics


def latency_cost(k: int, o: int) -> float:
    """``1 - 1 / (1 + exp(k - o))``, written to stay finite for large ``|k - o|``."""
    z = k - o
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass
class ErdeCosts:
    c_fn: float = 1.0
    c_tp: float = 1.0
    c_fp: float | None = None  # None: share of attack flows in the evaluated set


def erde(decisions: Sequence[Decision], labels: Sequence[int], benign_class: int = 0,
         o: int = 5, costs: ErdeCosts | None = None) -> float:
    """Mean early-risk detection error over flows, attack vs benign."""
    if o < 1:
        raise ValueError("o must be at least 1")
    costs = costs or ErdeCosts()
    labels = list(labels)
    if not labels:
        return 0.0
    attack = [y != benign_class for y in labels]
    c_fp = costs.c_fp if costs.c_fp is not None else sum(attack) / len(labels)
    total = 0.0
    for dec, is_attack in zip(decisions, attack):
        said_attack = dec.predicted != benign_class
        if said_attack and not is_attack:
            total += c_fp
        elif is_attack and not said_attack:
            total += costs.c_fn
        elif is_attack:
            total += costs.c_tp * latency_cost(dec.k, o)
    return total / len(labels)


@dataclass
class EvalReport:
    tau: float
    decisions: list[Decision]
    top1_accuracy: float
    max_earliness: int | None
    mean_earliness: float | None
    fnr: float
    far: float
    erde: dict[int, float]
    confusion: list[list[int]]
    benign_class: int = 0
    class_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["erde"] = {str(k): v for k, v in self.erde.items()}
        return out

    def summary(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k != "decisions"}

    def table(self) -> str:
        def fmt(v):
            return "n/a" if v is None else (f"{v:.4f}" if isinstance(v, float) else str(v))

        rows = [("threshold", fmt(self.tau)), ("flows", str(len(self.decisions))),
                ("top-1 accuracy", fmt(self.top1_accuracy)),
                ("max earliness", fmt(self.max_earliness)), ("mean earliness", fmt(self.mean_earliness)),
                ("FNR", fmt(self.fnr)), ("FAR", fmt(self.far))]
        rows += [(f"ERDE_{o}", fmt(v)) for o, v in sorted(self.erde.items())]
        width = max(len(r[0]) for r in rows)
        lines = [f"{name.ljust(width)}  {value}" for name, value in rows]
        names = self.class_names or [str(i) for i in range(len(self.confusion))]
        lines.append("")
        lines.append("confusion (rows = true class, columns = predicted)")
        cw = max(len(n) for n in names)
        for name, row in zip(names, self.confusion):
            lines.append(f"{name.ljust(cw)}  " + " ".join(f"{v:3d}" for v in row))
        return "\n".join(lines)

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def compute_metrics(decisions: Sequence[Decision], labels: Sequence[int], benign_class: int = 0,
                    tau: float | None = None, n_classes: int | None = None,
                    o_list: Sequence[int] = (5,), costs: ErdeCosts | None = None,
                    class_names: Sequence[str] = ()) -> EvalReport:
    """Accuracy, earliness, FNR, FAR, ERDE and the confusion matrix of a decision set.

    Earliness counts only flows decided correctly after crossing the
    threshold; every flow counts towards accuracy and the error rates.
    """
    labels = [int(y) for y in labels]
    if len(labels) != len(decisions):
        raise ValueError("decisions and labels differ in length")
    c = n_classes or (max(labels + [d.predicted for d in decisions], default=0) + 1)
    conf = np.zeros((c, c), dtype=int)
    for dec, y in zip(decisions, labels):
        conf[y, dec.predicted] += 1
    total = len(labels)
    correct = int(np.trace(conf))
    early = [d.k for d, y in zip(decisions, labels) if d.predicted == y and d.crossed_threshold]
    attack_rows = [i for i in range(c) if i != benign_class]
    n_attack = int(conf[attack_rows].sum())
    n_benign = int(conf[benign_class].sum())
    missed = int(conf[attack_rows, benign_class].sum())
    alarms = n_benign - int(conf[benign_class, benign_class])
    if tau is None:
        tau = decisions[0].tau if decisions else float("nan")
    return EvalReport(
        tau=tau,
        decisions=list(decisions),
        top1_accuracy=correct / total if total else 0.0,
        max_earliness=max(early) if early else None,
        mean_earliness=float(np.mean(early)) if early else None,
        fnr=missed / n_attack if n_attack else 0.0,
        far=alarms / n_benign if n_benign else 0.0,
        erde={int(o): erde(decisions, labels, benign_class, int(o), costs) for o in o_list},
        confusion=conf.tolist(),
        benign_class=benign_class,
        class_names=list(class_names),
    )


def evaluate(ens: Ensemble, test_set: Sequence[FlowRecord], tau: float = 0.99,
             o_list: Sequence[int] = (5,), benign_class: int = 0, n_classes: int | None = None,
             costs: ErdeCosts | None = None, class_names: Sequence[str] = (),
             flow_ids: Sequence[str] | None = None) -> EvalReport:
    if not test_set:
        raise ValueError("empty test set")
    ids = flow_ids or [str(rec.key) if rec.key is not None else str(i) for i, rec in enumerate(test_set)]
    decisions = [stream_classify(ens, rec, tau, fid) for rec, fid in zip(test_set, ids)]
    labels = [rec.label for rec in test_set]
    if any(y is None for y in labels):
        raise ValueError("every test flow needs a label")
    if n_classes is None:
        cfg = getattr(ens.members[0], "config", None)
        n_classes = cfg.c if cfg is not None else None
    return compute_metrics(decisions, labels, benign_class, tau, n_classes, o_list, costs, class_names)


def tau_sweep(ens: Ensemble, test_set: Sequence[FlowRecord], taus: Sequence[float],
              **kwargs) -> list[dict]:
    return [evaluate(ens, test_set, tau, **kwargs).summary() for tau in taus]
