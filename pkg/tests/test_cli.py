import json

import numpy as np
import pytest
import yaml

from eids import cli, evalkit, flowcap, synthgen
from eids.flowcap import PrepConfig
from eids.pipeline import RunConfig, load_config

from conftest import make_packet


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Synthetic capture, prepared dataset and a one-split ensemble shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "synth.jsonl"), "--pcap", str(root / "synth.pcap")]) == 0
    assert cli.main(["prepare", str(root / "synth.pcap"), "--labels", str(root / "synth.pcap.labels.json"),
                     "--out", str(root / "data.jsonl")]) == 0
    assert cli.main(["train", str(root / "data.jsonl"), "--out-dir", str(root / "models"),
                     "--splits", "1", "--epochs", "1"]) == 0
    return root


def read_jsonl(path):
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def test_synth_and_prepare_counts(work, capsys):
    records, manifest = flowcap.load_dataset(work / "data.jsonl")
    assert len(records) == 18
    assert np.bincount([r.label for r in records]).tolist() == [3] * 6
    assert manifest["classes"] == synthgen.class_names(synthgen.default_spec())
    cli.main(["prepare", str(work / "synth.pcap"), "--labels", str(work / "synth.pcap.labels.json"),
              "--out", str(work / "again.jsonl")])
    out = capsys.readouterr().out
    assert "wrote 18 flows" in out and "benign: 3" in out


def test_prepare_with_filename_labels(tmp_path):
    pkts = [make_packet(i * 0.1, sport=4000, dport=80) for i in range(4)]
    flowcap.write_pcap(pkts, tmp_path / "ddos.pcap")
    (tmp_path / "labels.yaml").write_text(yaml.safe_dump({"ddos.pcap": "attack"}))
    assert cli.main(["prepare", str(tmp_path / "ddos.pcap"), "--labels", str(tmp_path / "labels.yaml"),
                     "--out", str(tmp_path / "d.jsonl")]) == 0
    (rec,), manifest = flowcap.load_dataset(tmp_path / "d.jsonl")
    assert manifest["classes"] == ["attack"] and rec.label == 0 and rec.n == 4


def test_missing_file_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.pcap"
    assert cli.main(["prepare", str(missing), "--out", str(tmp_path / "x.jsonl")]) == cli.EXIT_INPUT
    assert str(missing) in capsys.readouterr().err


def test_http_filter_on_non_http_capture(tmp_path):
    pkts = [make_packet(i * 0.1, proto=17, sport=5353, dport=53) for i in range(3)]
    flowcap.write_pcap(pkts, tmp_path / "dns.pcap")
    code = cli.main(["prepare", str(tmp_path / "dns.pcap"), "--filter", "http", "--out", str(tmp_path / "x.jsonl")])
    assert code == cli.EXIT_EMPTY
    assert code not in (cli.EXIT_OK, cli.EXIT_USAGE, cli.EXIT_INPUT, cli.EXIT_NUMERIC)


def test_usage_error():
    assert cli.main(["train"]) == cli.EXIT_USAGE
    assert cli.main(["--help"]) == cli.EXIT_OK


def test_train_single_split_manifest(work):
    manifest = json.loads((work / "models" / "ensemble.json").read_text())
    assert len(manifest["members"]) == 1 and len(manifest["candidates"]) == 1
    assert (work / "models" / manifest["members"][0]["archive"]).exists()


def test_train_deterministic(work, tmp_path):
    assert cli.main(["train", str(work / "data.jsonl"), "--out-dir", str(tmp_path / "m2"),
                     "--splits", "1", "--epochs", "1"]) == 0
    a = json.loads((work / "models" / "ensemble.json").read_text())
    b = json.loads((tmp_path / "m2" / "ensemble.json").read_text())
    for m in a["members"] + a["candidates"] + b["members"] + b["candidates"]:
        m.pop("train_seconds", None)
    assert a == b
    name = a["members"][0]["archive"]
    assert (work / "models" / name).read_bytes() == (tmp_path / "m2" / name).read_bytes()


def test_eval_writes_report(work, tmp_path):
    report = tmp_path / "report.json"
    assert cli.main(["eval", str(work / "models" / "ensemble.json"), str(work / "data.jsonl"),
                     "--report", str(report), "--decisions", str(tmp_path / "dec.jsonl")]) == 0
    data = json.loads(report.read_text())
    assert data["tau"] == 0.99 and len(data["decisions"]) == 18
    assert 0 <= data["top1_accuracy"] <= 1 and 0 <= data["fnr"] <= 1 and 0 <= data["far"] <= 1
    assert len(read_jsonl(tmp_path / "dec.jsonl")) == 18


def test_eval_errors(work, tmp_path):
    assert cli.main(["eval", str(tmp_path / "none.json"), str(work / "data.jsonl")]) == cli.EXIT_INPUT
    flowcap.save_dataset([], tmp_path / "empty.jsonl", [])
    assert cli.main(["eval", str(work / "models" / "ensemble.json"), str(tmp_path / "empty.jsonl"),
                     "--report", str(tmp_path / "r.json")]) != cli.EXIT_OK


def test_stream_matches_eval(work, tmp_path):
    log = tmp_path / "stream.jsonl"
    assert cli.main(["eval", str(work / "models" / "ensemble.json"), str(work / "data.jsonl"),
                     "--tau", "0.5", "--report", str(tmp_path / "r.json"),
                     "--decisions", str(tmp_path / "dec.jsonl")]) == 0
    assert cli.main(["stream", str(work / "models" / "ensemble.json"), str(work / "synth.pcap"),
                     "--tau", "0.5", "--log", str(log)]) == 0
    batch = {d["flow_id"]: (d["predicted"], d["k"], d["crossed_threshold"], d["confidence"])
             for d in read_jsonl(tmp_path / "dec.jsonl")}
    live = {d["flow"]: (d["class"], d["k"], d["crossed_threshold"], d["confidence"]) for d in read_jsonl(log)}
    assert live == batch


def test_stream_stub_single_line_at_three():
    class Stub:
        def predict_proba(self, X, M, T):
            k = M.sum(axis=1)
            return np.where((k >= 3)[:, None], [[0.005, 0.995]], [[0.5, 0.5]])

    pkts = [make_packet(10 + 0.1 * i, sport=4000, dport=80) for i in range(8)]
    ens = evalkit.Ensemble([Stub()], N=30)
    lines = list(cli.stream_capture(ens, pkts, PrepConfig(), 0.99))
    assert len(lines) == 1
    ts, dec, _ = lines[0]
    assert dec.k == 3 and dec.predicted == 1 and ts == pytest.approx(10.2)


def test_stream_empty_capture(work, tmp_path):
    flowcap.write_pcap([], tmp_path / "empty.pcap")
    log = tmp_path / "log.jsonl"
    assert cli.main(["stream", str(work / "models" / "ensemble.json"), str(tmp_path / "empty.pcap"),
                     "--log", str(log)]) == 0
    assert log.read_text() == ""


def test_bench_schema(work, tmp_path):
    report = tmp_path / "bench.json"
    assert cli.main(["bench", str(work / "models" / "ensemble.json"), "--runs", "50", "--warmup", "5",
                     "--report", str(report)]) == 0
    data = json.loads(report.read_text())
    assert {"median", "p95"} <= set(data["latency_ms"])
    assert data["memory"]["total_bytes"] < 1 << 20
    assert data["parameters_per_member"] == 5086


def test_sweep(work, capsys):
    assert cli.main(["sweep", str(work / "models" / "ensemble.json"), str(work / "data.jsonl"),
                     "--taus", "0.5", "0.99"]) == 0
    rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert [r["tau"] for r in rows] == [0.5, 0.99]


def test_config_precedence(tmp_path):
    (tmp_path / "run.yaml").write_text(yaml.safe_dump({"train": {"epochs": 3, "seed": 9}, "eval": {"tau": 0.9}}))
    cfg = load_config(tmp_path / "run.yaml")
    assert (cfg.train.epochs, cfg.train.seed, cfg.eval.tau) == (3, 9, 0.9)
    assert cfg.train.batch_size == 4 and cfg.train.lr == 2e-4 and cfg.model.is_reference()
    assert cfg.override("train", epochs=7, seed=None).train == cfg.train.__class__(epochs=7, seed=9)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"train": {"epoch": 3}})


def test_config_flag_beats_file(work, tmp_path):
    (tmp_path / "run.yaml").write_text(yaml.safe_dump({"eval": {"tau": 1e-9}}))
    args = ["eval", str(work / "models" / "ensemble.json"), str(work / "data.jsonl"), "--config",
            str(tmp_path / "run.yaml"), "--report"]
    assert cli.main(args + [str(tmp_path / "a.json")]) == 0
    assert json.loads((tmp_path / "a.json").read_text())["tau"] == 1e-9
    assert cli.main(args + [str(tmp_path / "b.json"), "--tau", "0.7"]) == 0
    assert json.loads((tmp_path / "b.json").read_text())["tau"] == 0.7
