"""Command-line entry point: ``eids {synth,prepare,train,eval,stream,bench,sweep}``.

Exit codes: 0 success, 1 usage error, 2 input error (missing or malformed
file), 3 numeric failure, 4 nothing to do (e.g. the filter left no flows).
"""

from __future__ import annotations

import argparse
import json
import logging
import resource
import statistics
import sys
import time
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import evalkit, flowcap, synthgen
from .pipeline import RunConfig, load_config, load_ensemble, train_ensemble
from .tinyformer import NonFiniteActivation, count_params

log = logging.getLogger("eids")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC, EXIT_EMPTY = 0, 1, 2, 3, 4


class InputError(Exception):
    pass


class EmptyResult(Exception):
    pass


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    return path


def _config(args) -> RunConfig:
    cfg = load_config(_need(args.config) if args.config else None)
    return cfg


def _emit(obj, fh=None):
    print(json.dumps(obj), file=fh or sys.stdout)


# --------------------------------------------------------------------------
# labels


def load_labels(path) -> dict:
    """``{"classes": [...], "files": {name: class}, "flows": {key: class}}`` from JSON or YAML."""
    data = yaml.safe_load(_need(path).read_text()) or {}
    if not isinstance(data, dict):
        raise InputError(f"{path}: labels manifest must be a mapping")
    if "files" not in data and "flows" not in data:
        data = {"files": data}
    files = data.get("files") or {}
    flows = data.get("flows") or {}
    classes = list(data.get("classes") or [])
    for name in list(files.values()) + list(flows.values()):
        if name not in classes:
            classes.append(name)
    return {"classes": classes, "files": files, "flows": flows}


def cmd_prepare(args) -> int:
    cfg = _config(args).override("prep", d=args.d, N=args.N, filter=args.filter,
                                 flow_variant=args.flow_variant)
    labels = load_labels(args.labels) if args.labels else {"classes": [], "files": {}, "flows": {}}
    classes = labels["classes"]
    records, totals = [], Counter()
    for pcap in args.pcaps:
        packets = flowcap.parse_pcap(_need(pcap))
        file_class = labels["files"].get(Path(pcap).name, labels["files"].get(str(pcap)))

        def label_of(key, file_class=file_class):
            name = labels["flows"].get(str(key), file_class)
            return None if name is None else classes.index(name)

        result = flowcap.prepare(packets, cfg.prep, label_of)
        records += result.records
        totals.update(packets=len(packets), skipped=result.skipped, truncated=result.truncated,
                      filtered_out=result.filtered_out)
    if not records:
        raise EmptyResult(f"no flows left after filtering with {cfg.prep.filter!r}")
    flowcap.save_dataset(records, args.out, classes, cfg.prep, {"totals": dict(totals)})
    counts = Counter(classes[r.label] if r.label is not None else "unlabelled" for r in records)
    print(f"wrote {len(records)} flows to {args.out}")
    for name, count in sorted(counts.items()):
        print(f"  {name}: {count}")
    print("  " + ", ".join(f"{k}={v}" for k, v in sorted(totals.items())))
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.spec:
        spec = synthgen.SynthSpec.from_dict(yaml.safe_load(_need(args.spec).read_text()))
    else:
        spec = synthgen.default_spec(flows_per_class=args.flows_per_class or 3, seed=args.seed or 0)
    if args.flows_per_class:
        spec.flows_per_class = args.flows_per_class
    if args.seed is not None:
        spec.seed = args.seed
    records = synthgen.generate(spec)
    classes = synthgen.class_names(spec)
    prep = flowcap.PrepConfig(d=spec.d, N=spec.N)
    flowcap.save_dataset(records, args.out, classes, prep, {"synth_spec": spec.to_dict()})
    print(f"wrote {len(records)} synthetic flows to {args.out}")
    if args.pcap:
        synthgen.write_pcap(records, args.pcap, classes)
        print(f"wrote capture {args.pcap} and labels {synthgen.labels_path(args.pcap)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg = cfg.override("train", epochs=args.epochs, splits=args.splits, keep=args.keep, seed=args.seed)
    cfg = cfg.override("model", pe_kind=args.pe_kind)
    records, manifest = flowcap.load_dataset(_need(args.dataset))
    if not records:
        raise EmptyResult(f"{args.dataset} holds no flows")
    classes = manifest.get("classes") or []
    if classes and len(classes) != cfg.model.c:
        cfg = cfg.override("model", c=len(classes))
    d = records[0].d
    if d != cfg.model.d:
        cfg = cfg.override("model", d=d)
    if manifest.get("prep"):
        cfg = cfg.override("prep", **manifest["prep"])

    def report(r):
        early = "n/a" if r.mean_earliness is None else f"{r.mean_earliness:.2f}"
        print(f"split {r.split_id:4d}  accuracy {r.accuracy:.3f}  mean earliness {early}  "
              f"({r.train_seconds:.1f}s)", flush=True)

    out = train_ensemble(records, cfg, args.out_dir, classes, on_member=report)
    print(f"kept {len(out['members'])} of {len(out['candidates'])} models -> "
          f"{Path(args.out_dir) / 'ensemble.json'}")
    return EXIT_OK


def _decision_row(dec: evalkit.Decision, classes) -> dict:
    row = dec.to_dict()
    if classes and 0 <= dec.predicted < len(classes):
        row["class_name"] = classes[dec.predicted]
    return row


def cmd_eval(args) -> int:
    cfg = _config(args).override("eval", tau=args.tau, aggregation=args.aggregation)
    ens, manifest = load_ensemble(_need(args.manifest), cfg.eval.aggregation)
    records, data_manifest = flowcap.load_dataset(_need(args.dataset))
    if not records:
        raise EmptyResult(f"{args.dataset} holds no flows")
    classes = manifest.get("classes") or data_manifest.get("classes") or []
    report = evalkit.evaluate(ens, records, cfg.eval.tau, cfg.eval.o_list, cfg.eval.benign_class,
                              class_names=classes)
    out = Path(args.report or "report.json")
    report.save(out)
    if args.decisions:
        with Path(args.decisions).open("w") as fh:
            for dec in report.decisions:
                _emit(_decision_row(dec, classes), fh)
    print(report.table())
    print(f"\nreport written to {out}")
    return EXIT_OK


def stream_capture(ens: evalkit.Ensemble, packets, prep: flowcap.PrepConfig, tau: float):
    """Replay packets in timestamp order; yields ``(timestamp, decision, forward_seconds)``."""
    streams: dict[flowcap.FlowKey, evalkit.PrefixStream] = {}
    first_ts: dict[flowcap.FlowKey, float] = {}
    timings: dict[flowcap.FlowKey, list[float]] = {}
    keep = flowcap.FILTERS[prep.filter]
    last_ts = 0.0
    for pkt in sorted(packets, key=lambda p: p.ts):
        last_ts = pkt.ts
        info = flowcap.ipv4_info(pkt.data)
        if info is None or not keep(pkt):
            continue
        key = flowcap.flow_key(info, prep.flow_variant)
        stream = streams.get(key)
        if stream is None:
            stream = streams[key] = evalkit.PrefixStream(ens, tau, prep.N)
            first_ts[key] = pkt.ts
            timings[key] = []
        if stream.decision is not None or len(stream.rows) >= prep.N:
            continue
        row = flowcap.preprocess_packet(pkt, prep.d)
        t0 = time.perf_counter()
        dec = stream.push(row, pkt.ts - first_ts[key], str(key))
        timings[key].append(time.perf_counter() - t0)
        if dec is not None:
            yield pkt.ts, dec, timings[key]
    for key, stream in streams.items():
        dec = stream.finish(str(key))
        if dec is not None:
            yield last_ts, dec, timings[key]


def cmd_stream(args) -> int:
    cfg = _config(args).override("eval", tau=args.tau)
    ens, manifest = load_ensemble(_need(args.manifest), cfg.eval.aggregation)
    prep = flowcap.PrepConfig(**manifest["prep"]) if manifest.get("prep") else cfg.prep
    classes = manifest.get("classes") or []
    packets = flowcap.parse_pcap(_need(args.pcap))
    fh = Path(args.log).open("w") if args.log else sys.stdout
    latencies = []
    try:
        for ts, dec, times in stream_capture(ens, packets, prep, cfg.eval.tau):
            row = {"timestamp": ts, "flow": dec.flow_id, "class": dec.predicted,
                   "confidence": dec.confidence, "k": dec.k, "crossed_threshold": dec.crossed_threshold}
            if classes:
                row["class_name"] = classes[dec.predicted]
            _emit(row, fh)
            latencies += times
    finally:
        if fh is not sys.stdout:
            fh.close()
    if latencies:
        ms = np.array(latencies) * 1e3
        print(f"forward passes: {len(ms)}, median {np.median(ms):.3f} ms, "
              f"p95 {np.percentile(ms, 95):.3f} ms", file=sys.stderr)
    return EXIT_OK


def analytic_footprint(ens: evalkit.Ensemble) -> dict:
    """Bytes of float32 weights plus the activation buffers of one single-flow forward pass."""
    weight_bytes = 0
    act_bytes = 0
    for m in ens.members:
        cfg = m.config
        weight_bytes += 4 * (sum(v.size for v in m.params.values()) + sum(v.size for v in m.buffers.values()))
        N = cfg.N
        per_block = (3 * N * cfg.inner          # Q, K, V
                     + 3 * cfg.h * N * N        # scores, weights, dropped weights
                     + N * cfg.inner            # concatenated heads
                     + 4 * N * cfg.d_m          # projection, residual, two norms
                     + 2 * N * cfg.d_ff)        # FFN pre/post activation
        act = N * cfg.d + 2 * N * cfg.d_m + cfg.L * per_block + cfg.d_m + 2 * cfg.c
        act_bytes = max(act_bytes, 4 * act)
    return {"weight_bytes": weight_bytes, "activation_bytes": act_bytes,
            "total_bytes": weight_bytes + act_bytes}


def bench(ens: evalkit.Ensemble, runs: int = 1000, warmup: int = 50, seed: int = 0) -> dict:
    cfg = ens.members[0].config
    rng = np.random.default_rng(seed)
    X = rng.random((1, cfg.N, cfg.d)).astype(np.float32)
    M = np.ones((1, cfg.N), dtype=bool)
    T = np.cumsum(rng.random((1, cfg.N)), axis=1)
    T -= T[:, :1]
    for _ in range(warmup):
        ens.predict_batch(X, M, T)
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter()
        ens.predict_batch(X, M, T)
        samples.append(time.perf_counter() - t0)
    ms = np.array(samples) * 1e3
    out = {
        "members": len(ens.members),
        "parameters_per_member": count_params(ens.members[0]),
        "runs": runs,
        "latency_ms": {"median": float(np.median(ms)), "p95": float(np.percentile(ms, 95)),
                       "mean": float(ms.mean()), "min": float(ms.min())},
        "memory": analytic_footprint(ens),
    }
    # ru_maxrss is KiB on Linux
    out["memory"]["process_peak_rss_bytes"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    return out


def cmd_bench(args) -> int:
    ens, _ = load_ensemble(_need(args.manifest))
    result = bench(ens, runs=args.runs, warmup=args.warmup)
    text = json.dumps(result, indent=2)
    if args.report:
        Path(args.report).write_text(text)
    print(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    ens, manifest = load_ensemble(_need(args.manifest), cfg.eval.aggregation)
    records, _ = flowcap.load_dataset(_need(args.dataset))
    if not records:
        raise EmptyResult(f"{args.dataset} holds no flows")
    rows = evalkit.tau_sweep(ens, records, args.taus, o_list=cfg.eval.o_list,
                             benign_class=cfg.eval.benign_class)
    for row in rows:
        _emit({k: row[k] for k in ("tau", "top1_accuracy", "max_earliness", "mean_earliness",
                                   "fnr", "far", "erde")})
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eids", description="Transformer early intrusion detection toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help, description=help)
        p.add_argument("--config", help="YAML run configuration")
        p.set_defaults(func=func)
        return p

    p = add("prepare", cmd_prepare, "turn labelled pcap files into a flow dataset")
    p.add_argument("pcaps", nargs="+")
    p.add_argument("--labels", help="labels manifest (file name or flow key -> class)")
    p.add_argument("--out", required=True)
    p.add_argument("--d", type=int)
    p.add_argument("--N", type=int)
    p.add_argument("--filter", choices=sorted(flowcap.FILTERS))
    p.add_argument("--flow-variant", choices=["3-tuple", "5-tuple"])

    p = add("synth", cmd_synth, "generate a synthetic labelled dataset (and capture)")
    p.add_argument("--out", required=True)
    p.add_argument("--pcap")
    p.add_argument("--spec", help="YAML synthetic spec")
    p.add_argument("--flows-per-class", type=int)
    p.add_argument("--seed", type=int)

    p = add("train", cmd_train, "train a split ensemble")
    p.add_argument("dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--splits", type=int)
    p.add_argument("--keep", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pe-kind")

    p = add("eval", cmd_eval, "streaming evaluation of an ensemble on a dataset")
    p.add_argument("manifest")
    p.add_argument("dataset")
    p.add_argument("--tau", type=float)
    p.add_argument("--aggregation", choices=["mean", "vote"])
    p.add_argument("--report")
    p.add_argument("--decisions", help="write per-flow decisions as JSON lines")

    p = add("stream", cmd_stream, "replay a capture and emit decisions as flows reach the threshold")
    p.add_argument("manifest")
    p.add_argument("pcap")
    p.add_argument("--tau", type=float)
    p.add_argument("--log", help="decision log path (default: stdout)")

    p = add("bench", cmd_bench, "single-flow inference latency and memory footprint")
    p.add_argument("manifest")
    p.add_argument("--runs", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--report")

    p = add("sweep", cmd_sweep, "evaluate over several thresholds")
    p.add_argument("manifest")
    p.add_argument("dataset")
    p.add_argument("--taus", type=float, nargs="+", default=[0.5, 0.8, 0.9, 0.95, 0.99])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EmptyResult as exc:
        print(f"warning: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (InputError, flowcap.FlowcapError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NonFiniteActivation, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
