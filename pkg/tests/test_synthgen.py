import json

import numpy as np
import pytest

from eids import flowcap, synthgen
from eids.flowcap import PrepConfig
from eids.synthgen import ClassProfile, InvalidSpec, SynthSpec, TimingProfile


@pytest.fixture(scope="module")
def dataset():
    return synthgen.generate(synthgen.default_spec(3))


def test_shape_six_by_three(dataset):
    assert len(dataset) == 18
    assert [r.label for r in dataset] == [c for c in range(6) for _ in range(3)]
    for rec in dataset:
        rec.check(30)
        assert rec.d == 448 and rec.timestamps[0] == 0.0


def test_deterministic_under_seed(dataset):
    again = synthgen.generate(synthgen.default_spec(3))
    for a, b in zip(dataset, again):
        assert a.packets.tobytes() == b.packets.tobytes()
        assert a.timestamps.tobytes() == b.timestamps.tobytes()
        assert a.key == b.key
    other = synthgen.generate(synthgen.default_spec(3, seed=1))
    assert any(a.packets.tobytes() != b.packets.tobytes() for a, b in zip(dataset, other))


def test_timing_pair_differs_only_in_time():
    recs = synthgen.generate(synthgen.timing_pair_spec(4))
    benign, sqli = recs[:4], recs[4:]
    for a, b in zip(benign, sqli):
        np.testing.assert_array_equal(a.packets, b.packets)
        assert not np.array_equal(a.timestamps, b.timestamps)
    gap_a = np.mean([np.diff(r.timestamps).mean() for r in benign])
    gap_b = np.mean([np.diff(r.timestamps).mean() for r in sqli])
    assert gap_b > 5 * gap_a


def test_other_classes_differ_in_bytes_and_timing(dataset):
    means = [np.mean([r.packets.mean(axis=0) for r in dataset[3 * c:3 * c + 3]], axis=0) for c in range(6)]
    for i in range(1, 6):
        for j in range(i + 1, 6):
            assert np.abs(means[i] - means[j]).max() > 0.1


@pytest.mark.parametrize("kind", ["periodic", "bursty", "heavy_tail"])
def test_timing_profiles_positive(kind):
    gaps = TimingProfile(kind).gaps(500, np.random.default_rng(0))
    assert gaps.shape == (500,) and gaps.min() > 0


def test_invalid_specs():
    with pytest.raises(InvalidSpec):
        SynthSpec([ClassProfile("only")]).validate()
    with pytest.raises(InvalidSpec):
        SynthSpec([ClassProfile("a", length=(0, 3)), ClassProfile("b")]).validate()
    with pytest.raises(InvalidSpec):
        SynthSpec([ClassProfile("a", length=(1, 31)), ClassProfile("b")], N=30).validate()
    with pytest.raises(InvalidSpec):
        TimingProfile("poisson").gaps(3, np.random.default_rng(0))


def test_variable_lengths_within_bounds():
    spec = SynthSpec([ClassProfile("a", length=(1, 12)), ClassProfile("b", length=(5, 30))], flows_per_class=20)
    recs = synthgen.generate(spec)
    lengths = [r.n for r in recs]
    assert min(lengths[:20]) >= 1 and max(lengths[:20]) <= 12
    assert min(lengths[20:]) >= 5 and max(lengths[20:]) <= 30
    assert len(set(lengths)) > 3


def test_spec_dict_round_trip():
    spec = synthgen.default_spec(2, seed=7)
    again = SynthSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again == spec


# ---------------------------------------------------------------- pcap export


@pytest.mark.parametrize("nanosecond", [False, True])
def test_pcap_round_trip(tmp_path, dataset, nanosecond):
    path = synthgen.write_pcap(dataset, tmp_path / "s.pcap", synthgen.class_names(synthgen.default_spec()),
                               nanosecond=nanosecond)
    labels = json.loads(synthgen.labels_path(path).read_text())
    result = flowcap.prepare(flowcap.parse_pcap(path), PrepConfig(),
                             label_of=lambda key: labels["classes"].index(labels["flows"][str(key)]))
    got = {r.key: r for r in result.records}
    assert len(got) == len(dataset)
    for rec in dataset:
        back = got[rec.key]
        assert back.label == rec.label and back.n == rec.n
        np.testing.assert_array_equal(back.packets, rec.packets)
        np.testing.assert_allclose(back.timestamps, rec.timestamps, atol=1e-6)


def test_flow_of_n_packets_gives_n_records(tmp_path, dataset):
    rec = dataset[7]
    path = synthgen.write_pcap([rec], tmp_path / "one.pcap")
    pkts = flowcap.parse_pcap(path)
    assert len(pkts) == rec.n
    assert {flowcap.flow_key(flowcap.ipv4_info(p.data)) for p in pkts} == {rec.key}


def test_empty_dataset_header_only(tmp_path):
    path = synthgen.write_pcap([], tmp_path / "empty.pcap")
    assert path.stat().st_size == 24
    assert flowcap.parse_pcap(path) == []


def test_nearest_centroid_floor_at_max_motif_distance():
    base = synthgen.default_spec(6)
    classes = base.classes[2:] + [ClassProfile("extra", base.classes[0].timing)]
    spec = SynthSpec(classes, flows_per_class=6, motif_distance=1.0)
    recs = synthgen.generate(spec)
    feats = np.array([r.packets.mean(axis=0) for r in recs])
    labels = np.array([r.label for r in recs])
    train = np.arange(len(recs)) % 6 < 3
    cents = np.array([feats[train & (labels == c)].mean(axis=0) for c in range(len(classes))])
    pred = np.argmin(((feats[~train, None, :] - cents[None]) ** 2).sum(axis=2), axis=1)
    assert (pred == labels[~train]).mean() == 1.0
