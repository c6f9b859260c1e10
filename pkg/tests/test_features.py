import hashlib
import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import RidgeClassifier

from milfuse.errors import EmptyDatasetError, FormatError, StratificationError, ValidationError
from milfuse.features import (FeatureBag, Manifest, ManifestEntry, Modality, PairedSample, SplitSpec,
                              SynthConfig, decode_bag, encode_bag, generate_synthetic_dataset,
                              load_manifest, read_bag, read_split, stratified_split, write_bag,
                              write_manifest, write_split)
from milfuse.numerics import make_rng


def _bag(k, d=1024, seed=0, sid="s"):
    return FeatureBag(sid, Modality.HE, make_rng(seed).standard_normal((k, d)).astype(np.float32))


@pytest.mark.parametrize("k", [1, 5])
def test_bag_roundtrip(tmp_path, k):
    bag = _bag(k)
    write_bag(bag, tmp_path / "b.milf")
    back = read_bag(tmp_path / "b.milf")
    assert back.features.dtype == np.float64
    np.testing.assert_array_equal(back.features, bag.features)


def test_bag_byte_layout():
    buf = encode_bag(np.array([[1.0, 2.0]], dtype=np.float32))
    assert buf[:4] == b"MILF"
    assert struct.unpack("<III", buf[4:16]) == (1, 1, 2)
    assert buf[16:] == struct.pack("<ff", 1.0, 2.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 1000), st.integers(0, 2**32 - 1))
def test_bag_roundtrip_property(k, seed):
    x = make_rng(seed).standard_normal((k, 3)).astype(np.float32)
    buf = encode_bag(x)
    back = decode_bag(buf)
    np.testing.assert_array_equal(back, x)
    assert encode_bag(back) == buf


def test_bad_magic(tmp_path):
    p = tmp_path / "x.milf"
    p.write_bytes(b"XXXX" + encode_bag(np.ones((1, 2)))[4:])
    with pytest.raises(FormatError) as info:
        read_bag(p)
    assert info.value.offset == 0


def test_truncated_payload():
    buf = encode_bag(np.ones((3, 4)))
    with pytest.raises(FormatError, match="truncated") as info:
        decode_bag(buf[:-5])
    assert info.value.offset == len(buf) - 5


def test_truncated_header():
    with pytest.raises(FormatError) as info:
        decode_bag(b"MILF\x01\x00")
    assert info.value.offset == 6


def test_bad_version():
    buf = bytearray(encode_bag(np.ones((1, 1))))
    buf[4] = 9
    with pytest.raises(FormatError) as info:
        decode_bag(bytes(buf))
    assert info.value.offset == 4


def test_bag_rejects_nonfinite():
    with pytest.raises(ValidationError):
        FeatureBag("a", "he", np.array([[np.nan]]))


def test_paired_sample_modalities():
    he = _bag(2, 4)
    with pytest.raises(ValidationError):
        PairedSample("s", 0, he, he)


def _write_pairs(root, rows):
    (root / "bags").mkdir(exist_ok=True)
    entries = []
    for i, (label, have_ihc) in enumerate(rows):
        sid = f"s{i}"
        write_bag(_bag(3, 8, i), root / f"bags/{sid}_he.milf")
        if have_ihc:
            write_bag(_bag(4, 8, 100 + i), root / f"bags/{sid}_ihc.milf")
        entries.append(ManifestEntry(sid, label, f"bags/{sid}_he.milf", f"bags/{sid}_ihc.milf"))
    return entries


def test_load_manifest_drops_incomplete_pairs(tmp_path, caplog):
    entries = _write_pairs(tmp_path, [(0, True), (1, False), (2, True)])
    write_manifest(Manifest(entries, 4), tmp_path / "m.tsv")
    with caplog.at_level(logging.WARNING):
        samples = load_manifest(tmp_path / "m.tsv", tmp_path)
    assert [s.slide_id for s in samples] == ["s0", "s2"]
    assert any("s1" in r.message for r in caplog.records)
    assert samples[0].he.K == 3 and samples[0].ihc.K == 4


def test_load_manifest_all_labels(tmp_path):
    entries = _write_pairs(tmp_path, [(0, True), (1, True), (2, True), (3, True)])
    write_manifest(Manifest(entries, 4), tmp_path / "m.tsv")
    assert sorted(s.label for s in load_manifest(tmp_path / "m.tsv", tmp_path, 4)) == [0, 1, 2, 3]


def test_load_manifest_empty(tmp_path):
    entries = _write_pairs(tmp_path, [(0, False)])
    write_manifest(Manifest(entries, 4), tmp_path / "m.tsv")
    with pytest.raises(EmptyDatasetError):
        load_manifest(tmp_path / "m.tsv", tmp_path)


def test_manifest_duplicate_id(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("slide_id\tlabel\the_path\tihc_path\na\t0\tx\ty\na\t1\tx\ty\n")
    with pytest.raises(ValidationError, match="duplicate"):
        load_manifest(p, tmp_path)


def test_manifest_label_out_of_range(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("slide_id\tlabel\the_path\tihc_path\na\t4\tx\ty\n")
    with pytest.raises(ValidationError, match="label"):
        load_manifest(p, tmp_path, num_classes=4)


def _manifest(counts):
    entries, i = [], 0
    for label, n in enumerate(counts):
        for _ in range(n):
            entries.append(ManifestEntry(f"id{i:03d}", label, "", ""))
            i += 1
    return Manifest(entries, len(counts))


def test_split_40_balanced():
    m = _manifest([10, 10, 10, 10])
    s = stratified_split(m, seed=3)
    assert (len(s.train_ids), len(s.val_ids), len(s.test_ids)) == (32, 4, 4)
    labels = m.labels
    for c in range(4):
        assert sum(labels[i] == c for i in s.train_ids) == 8
        assert sum(labels[i] == c for i in s.val_ids) == 1
        assert sum(labels[i] == c for i in s.test_ids) == 1


def test_split_deterministic():
    m = _manifest([12, 15, 11, 20])
    assert stratified_split(m, seed=5) == stratified_split(m, seed=5)
    assert stratified_split(m, seed=5) != stratified_split(m, seed=6)


def test_split_too_small_class():
    with pytest.raises(StratificationError):
        stratified_split(_manifest([10, 2, 10, 10]))


def test_split_missing_class():
    with pytest.raises(ValidationError):
        stratified_split(_manifest([10, 0, 10, 10]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(10, 60), min_size=2, max_size=5), st.integers(0, 10_000))
def test_split_properties(counts, seed):
    m = _manifest(counts)
    s = stratified_split(m, seed=seed)
    parts = [set(s.train_ids), set(s.val_ids), set(s.test_ids)]
    assert parts[0] | parts[1] | parts[2] == {e.slide_id for e in m.entries}
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    labels = m.labels
    for c, n in enumerate(counts):
        got = [sum(labels[i] == c for i in p) for p in parts]
        for g, f in zip(got, (0.8, 0.1, 0.1)):
            assert abs(g - n * f) <= 1


def test_split_file_roundtrip(tmp_path):
    s = stratified_split(_manifest([10, 10, 10]), seed=11)
    write_split(s, tmp_path / "split.txt")
    text = (tmp_path / "split.txt").read_text()
    assert "seed=11" in text and "[train]" in text and "[val]" in text and "[test]" in text
    assert read_split(tmp_path / "split.txt") == s


def test_split_spec_rejects_overlap():
    with pytest.raises(ValidationError):
        SplitSpec(["a"], ["a"], [])


# -- synthetic generator ------------------------------------------------------


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synthetic_deterministic_files(tmp_path):
    cfg = SynthConfig(samples_per_class=10, dim=64)
    generate_synthetic_dataset(cfg, 7, tmp_path / "a")
    generate_synthetic_dataset(cfg, 7, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    generate_synthetic_dataset(cfg, 8, tmp_path / "c")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_synthetic_files_load_back(tmp_path):
    ds = generate_synthetic_dataset(SynthConfig(samples_per_class=10, dim=32), 7, tmp_path)
    loaded = load_manifest(ds.manifest_path, tmp_path)
    assert len(loaded) == 40
    for a, b in zip(ds.samples, loaded):
        np.testing.assert_array_equal(a.he.features, b.he.features)
        np.testing.assert_array_equal(a.ihc.features, b.ihc.features)


def test_synthetic_bag_sizes_vary():
    ds = generate_synthetic_dataset(SynthConfig(samples_per_class=10, dim=16), 7)
    assert any(s.he.K != s.ihc.K for s in ds.samples)
    assert all(8 <= s.he.K <= 32 for s in ds.samples)


@pytest.mark.parametrize("kw", [dict(num_classes=3), dict(samples_per_class=5), dict(min_bag=0),
                                dict(min_bag=10, max_bag=5), dict(signal_fraction=1.5)])
def test_synthetic_invalid_config(kw):
    with pytest.raises(ValidationError):
        generate_synthetic_dataset(SynthConfig(**kw), 0)


def _probe_accuracies(cfg, seed):
    """Ridge probe on mean-pooled features, trained on train+val, scored on test."""
    ds = generate_synthetic_dataset(cfg, seed)
    split = stratified_split(ds.manifest, seed=seed)
    by_id = {s.slide_id: s for s in ds.samples}

    def feats(ids, which):
        rows = []
        for i in ids:
            s = by_id[i]
            he, ihc = s.he.features.mean(0), s.ihc.features.mean(0)
            rows.append({"he": he, "ihc": ihc, "both": np.concatenate([he, ihc])}[which])
        return np.array(rows)

    fit_ids = split.train_ids + split.val_ids
    y_fit = [by_id[i].label for i in fit_ids]
    y_test = [by_id[i].label for i in split.test_ids]
    return {w: RidgeClassifier(alpha=1.0).fit(feats(fit_ids, w), y_fit).score(feats(split.test_ids, w), y_test)
            for w in ("he", "ihc", "both")}


def test_synthetic_probe_bounds():
    acc = _probe_accuracies(SynthConfig(), 7)
    assert acc["he"] <= 0.65
    assert acc["ihc"] <= 0.65
    assert acc["both"] >= 0.9


def test_synthetic_no_signal_is_chance():
    # 400 test bags keep the binomial spread of chance accuracy near 0.02
    cfg = SynthConfig(samples_per_class=1000, dim=64, signal_fraction=0.0)
    acc = _probe_accuracies(cfg, 7)
    for v in acc.values():
        assert abs(v - 0.25) < 0.08
