import json
from collections import Counter

import numpy as np
import pytest

from crossembed.data import (PairedExample, SyntheticSpec, encode_split, generate_synthetic,
                             hash_split, iter_jsonl, load_dataset, read_cache, read_manifest,
                             write_cache, write_jsonl, write_manifest)
from crossembed.errors import ConfigError, DataError
from crossembed.text import train_vocab


def record(i, dim=3, title="red scarf", **extra):
    return json.dumps({"id": f"p{i}", "title": title, "features": [0.5] * dim, **extra})


# --- ingestion ----------------------------------------------------------------------


def test_empty_file_is_rejected(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(DataError, match="no usable records"):
        load_dataset(path)
    with pytest.raises(DataError, match="no such file"):
        load_dataset(tmp_path / "missing.jsonl")


def test_single_record_goes_to_its_hash_split(tmp_path):
    path = tmp_path / "one.jsonl"
    path.write_text(record(0) + "\n")
    ds = load_dataset(path)
    assert len(ds.examples) == 1
    name = hash_split("p0")
    assert ds.splits[name] == [0]
    assert sum(len(v) for v in ds.splits.values()) == 1


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(record(0) + "\n" + record(1) + "\n{not json\n")
    with pytest.raises(DataError, match=r"bad.jsonl:3"):
        load_dataset(path)
    path.write_text(record(0) + "\n" + json.dumps({"id": "x", "features": [1, 2, 3]}) + "\n")
    with pytest.raises(DataError, match=r":2: missing field 'title'"):
        load_dataset(path)
    path.write_text(json.dumps({"id": "x", "title": "t", "features": [1, float("nan")]}) + "\n")
    with pytest.raises(DataError, match="finite"):
        load_dataset(path)


def test_feature_dim_mismatch_and_duplicate_ids(tmp_path):
    path = tmp_path / "f.jsonl"
    path.write_text(record(0) + "\n" + record(1, dim=4) + "\n")
    with pytest.raises(DataError, match="expected 3"):
        load_dataset(path)
    path.write_text(record(0) + "\n" + record(0) + "\n")
    with pytest.raises(DataError, match="duplicate id"):
        load_dataset(path)


def test_empty_titles_are_dropped_and_counted(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text("\n".join([record(0), record(1, title="®©"), record(2, title="   ")]) + "\n")
    ds = load_dataset(path)
    assert [ex.id for ex in ds.examples] == ["p0"] and ds.dropped == 2


def test_manifest_overrides_hash_split(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(record(i) for i in range(5)) + "\n")
    ds = load_dataset(path, manifest={"train": ["p0", "p1", "p2"], "val": ["p3"], "test": ["p4"]})
    assert ds.manifest() == {"train": ["p0", "p1", "p2"], "val": ["p3"], "test": ["p4"]}
    write_manifest(tmp_path / "s.json", ds)
    assert read_manifest(tmp_path / "s.json") == ds.manifest()
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "bad.json")


def test_hash_split_is_deterministic_and_proportional():
    names = [hash_split(f"id{i}") for i in range(20000)]
    assert names == [hash_split(f"id{i}") for i in range(20000)]
    freq = Counter(names)
    assert freq["train"] / 20000 == pytest.approx(0.9, abs=0.01)
    assert freq["val"] / 20000 == pytest.approx(0.01, abs=0.005)
    assert hash_split("x", (1.0, 0.0, 0.0)) == "train"


def test_jsonl_round_trip_is_bit_exact(tmp_path):
    ds = generate_synthetic(SyntheticSpec(samples=10000, val_samples=0, test_samples=0, seed=4))
    path = tmp_path / "rt.jsonl"
    write_jsonl(path, ds.examples)
    again = list(iter_jsonl(path))
    assert len(again) == 10000
    for a, b in zip(ds.examples, again):
        assert (a.id, a.title, a.group_id) == (b.id, b.title, b.group_id)
        assert a.image_features.tobytes() == b.image_features.tobytes()


def test_cache_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticSpec(num_classes=6, samples=300, val_samples=20,
                                          test_samples=30, seed=5))
    ds.dropped = 3
    write_cache(tmp_path / "c.bin", ds)
    again = read_cache(tmp_path / "c.bin")
    assert again.splits == ds.splits and again.dropped == 3
    for a, b in zip(ds.examples, again.examples):
        assert (a.id, a.title, a.group_id) == (b.id, b.title, b.group_id)
        assert a.image_features.tobytes() == b.image_features.tobytes()
    (tmp_path / "junk.bin").write_bytes(b"garbage!" * 8)
    with pytest.raises(DataError):
        read_cache(tmp_path / "junk.bin")


# --- model-ready arrays ------------------------------------------------------------------


def test_encode_split_groups_and_empty():
    exs = [PairedExample("a", np.zeros(2, np.float32), "red hat", "g1"),
           PairedExample("b", np.ones(2, np.float32), "blue hat", None),
           PairedExample("c", np.ones(2, np.float32), "red cap", "g1")]
    vocab = train_vocab([ex.title for ex in exs], target_size=30)
    enc = encode_split(exs, vocab, max_len=8)
    assert enc.tokens.shape == (3, 8) and enc.features.shape == (3, 2)
    assert enc.groups[0] == enc.groups[2] != enc.groups[1]
    with pytest.raises(ConfigError):
        encode_split([], vocab)


# --- synthetic generator ---------------------------------------------------------------


def test_synthetic_is_deterministic_with_disjoint_splits():
    spec = SyntheticSpec(num_classes=10, samples=500, val_samples=50, test_samples=50, seed=9)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert [e.to_json() for e in a.examples] == [e.to_json() for e in b.examples]
    ids = {name: {a.examples[i].id for i in idx} for name, idx in a.splits.items()}
    assert len(ids["train"]) == 500 and len(ids["val"]) == 50 and len(ids["test"]) == 50
    assert not (ids["train"] & ids["val"] or ids["train"] & ids["test"] or ids["val"] & ids["test"])
    c = generate_synthetic(SyntheticSpec(num_classes=10, samples=500, val_samples=50,
                                         test_samples=50, seed=10))
    assert [e.title for e in c.examples] != [e.title for e in a.examples]


def test_title_length_statistics():
    ds = generate_synthetic(SyntheticSpec(samples=10000, val_samples=0, test_samples=0, seed=1))
    lengths = np.array([len(ex.title.split()) for ex in ds.examples])
    assert lengths.min() >= 3
    assert abs(lengths.mean() - 17) <= 1 and abs(lengths.std() - 5) <= 1


@pytest.mark.parametrize("G", [2, 3])
def test_order_coding_shares_bags_within_a_group(G):
    spec = SyntheticSpec(num_classes=4 * G, samples=600, val_samples=0, test_samples=0,
                         order_coding=True, order_group_size=G, seed=2)
    ds = generate_synthetic(spec)
    by_draw: dict = {}
    for ex in ds.examples:
        _, draw, cls = ex.id.split("-")
        by_draw.setdefault(draw, []).append((int(cls[1:]), ex.title))
    checked = 0
    for members in by_draw.values():
        bags = {tuple(sorted(Counter(t.split()).items())) for _, t in members}
        assert len(bags) == 1  # identical bag of words for every class in the group
        if len(members) == G:
            assert len({t for _, t in members}) == G  # but every class orders it differently
            assert len({c // G for c, _ in members}) == 1
            checked += 1
    assert checked == 600 // G


def test_order_coded_classes_differ_only_in_order():
    ds = generate_synthetic(SyntheticSpec(num_classes=6, samples=3000, val_samples=0,
                                          test_samples=0, order_coding=True,
                                          order_group_size=3, seed=3))
    # the unigram distribution over all titles of a class is the same for the whole group
    freq: dict = {}
    for ex in ds.examples:
        freq.setdefault(ex.group_id, Counter()).update(ex.title.split())
    for g in range(2):
        vocabularies = [set(freq[f"c{3 * g + j}"]) for j in range(3)]
        assert vocabularies[0] == vocabularies[1] == vocabularies[2]


def test_noise_free_two_classes_are_separable():
    ds = generate_synthetic(SyntheticSpec(num_classes=2, samples=200, val_samples=0,
                                          test_samples=0, feature_noise=0.0, seed=6))
    feats = {}
    for ex in ds.examples:
        feats.setdefault(ex.group_id, []).append(ex.image_features)
    a, b = np.array(feats["c0"]), np.array(feats["c1"])
    # every class is a single point and the two points differ
    assert np.ptp(a, axis=0).max() == 0 and np.ptp(b, axis=0).max() == 0
    assert np.abs(a[0] - b[0]).max() > 0.1


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(num_classes=1)
    with pytest.raises(ConfigError):
        SyntheticSpec(feature_noise=-1)
    with pytest.raises(ConfigError):
        SyntheticSpec(min_title_len=2)
    with pytest.raises(ConfigError, match="divisible"):
        SyntheticSpec(num_classes=10, order_coding=True, order_group_size=3)
