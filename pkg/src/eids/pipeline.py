"""Run configuration plus the split-ensemble training and loading used by the CLI."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import augment, evalkit
from .augment import AugConfig
from .flowcap import FlowRecord, PrepConfig
from .tinyformer import ModelConfig, load_weights, save_weights, train

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "eids-ensemble/1"


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 4
    lr: float = 2e-4
    seed: int = 0
    edl_normalize: bool = False
    splits: int = 29
    keep: int = 5


@dataclass
class EvalConfig:
    tau: float = 0.99
    o_list: list[int] = field(default_factory=lambda: [5])
    benign_class: int = 0
    aggregation: str = "mean"


@dataclass
class RunConfig:
    prep: PrepConfig = field(default_factory=PrepConfig)
    aug: AugConfig = field(default_factory=AugConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict | None) -> "RunConfig":
        obj = obj or {}
        unknown = set(obj) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        sections = {
            "prep": PrepConfig, "aug": AugConfig, "model": ModelConfig,
            "train": TrainConfig, "eval": EvalConfig,
        }
        kwargs = {}
        for name, typ in sections.items():
            values = obj.get(name) or {}
            allowed = {f.name for f in dataclasses.fields(typ)}
            bad = set(values) - allowed
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = typ(**values)
        kwargs["paths"] = dict(obj.get("paths") or {})
        return cls(**kwargs)

    def override(self, section: str, **values) -> "RunConfig":
        """Copy with non-None ``values`` replacing fields of ``section``."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **values)})


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_dict(yaml.safe_load(Path(path).read_text()))


# --------------------------------------------------------------------------
# ensemble training


def group_by_class(records: Sequence[FlowRecord], n_classes: int) -> list[list[FlowRecord]]:
    groups = [[] for _ in range(n_classes)]
    for rec in records:
        if rec.label is None:
            raise ValueError("training flows must be labelled")
        groups[rec.label].append(rec)
    return groups


def _member_seed(seed: int, split_id: int) -> int:
    return int(np.random.SeedSequence([seed, split_id]).generate_state(1)[0])


@dataclass
class MemberResult:
    split_id: int
    test_index: list[int]
    accuracy: float
    mean_earliness: float | None
    max_earliness: int | None
    seed: int
    archive: str | None = None
    train_seconds: float = 0.0

    def rank_key(self):
        early = self.mean_earliness if self.mean_earliness is not None else float("inf")
        return (-self.accuracy, early)


def train_split(groups, plan: augment.SplitPlan, cfg: RunConfig):
    """Train one member on a split and score it on that split's held-out flows."""
    seed = _member_seed(cfg.train.seed, plan.split_id)
    train_flows = [groups[c][i] for c in range(len(groups)) for i in plan.train(c)]
    test_flows = [groups[c][i] for c in range(len(groups)) for i in plan.test(c)]
    samples = augment.expand_training_set(train_flows, cfg.aug.oversample_factor)
    aug = dataclasses.replace(cfg.aug, seed=seed)
    t0 = time.perf_counter()
    weights, history = train(samples, cfg.model, aug, epochs=cfg.train.epochs,
                             batch_size=cfg.train.batch_size, seed=seed, lr=cfg.train.lr,
                             edl_normalize=cfg.train.edl_normalize)
    elapsed = time.perf_counter() - t0
    report = evalkit.evaluate(evalkit.Ensemble([weights]), test_flows, cfg.eval.tau,
                              cfg.eval.o_list, cfg.eval.benign_class)
    result = MemberResult(plan.split_id, list(plan.test_index), report.top1_accuracy,
                          report.mean_earliness, report.max_earliness, seed, None, elapsed)
    return weights, history, result


def train_ensemble(records: Sequence[FlowRecord], cfg: RunConfig, out_dir: str | os.PathLike,
                   classes: Sequence[str] = (), on_member=None) -> dict:
    """Train one model per selected split, keep the best ``cfg.train.keep``, write a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_classes = cfg.model.c
    groups = group_by_class(records, n_classes)
    plans = augment.enumerate_splits([len(g) for g in groups], count=cfg.train.splits,
                                     seed=cfg.train.seed)
    results = []
    for plan in plans:
        weights, history, result = train_split(groups, plan, cfg)
        name = f"split_{plan.split_id:05d}.tfw"
        save_weights(weights, out_dir / name)
        result.archive = name
        with (out_dir / f"split_{plan.split_id:05d}.history.jsonl").open("w") as fh:
            for row in history:
                fh.write(json.dumps(row) + "\n")
        results.append(result)
        log.info("split %d: accuracy %.3f mean earliness %s", plan.split_id, result.accuracy,
                 result.mean_earliness)
        if on_member is not None:
            on_member(result)
    ranked = sorted(results, key=lambda r: r.rank_key())
    kept = ranked[: cfg.train.keep]
    manifest = {
        "format": MANIFEST_FORMAT,
        "classes": list(classes) or [str(i) for i in range(n_classes)],
        "prep": asdict(cfg.prep),
        "eval": asdict(cfg.eval),
        "members": [asdict(r) for r in kept],
        "candidates": [asdict(r) for r in results],
    }
    (out_dir / "ensemble.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_ensemble(manifest_path: str | os.PathLike, aggregation: str | None = None):
    """Ensemble and manifest dictionary from an ``ensemble.json`` file."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{manifest_path} is not an ensemble manifest")
    members = [load_weights(manifest_path.parent / m["archive"]) for m in manifest["members"]]
    agg = aggregation or manifest.get("eval", {}).get("aggregation", "mean")
    return evalkit.Ensemble(members, agg), manifest
