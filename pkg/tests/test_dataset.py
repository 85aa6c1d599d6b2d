import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histotile.dataset import (ClassLabel, DatasetError, Manifest, ManifestError, ManifestRecord,
                               XorShift64Star, load_manifest, make_split, save_manifest, splitmix64)


def image_manifest(per_class=100):
    return Manifest(ManifestRecord(f"{c.slug}_{i:03d}", f"{c.slug}/{i}.png", c)
                    for c in ClassLabel for i in range(per_class))


def split_counts(manifest, split):
    counts = {c: {"train": 0, "validation": 0, "test": 0} for c in ClassLabel}
    for rec in manifest:
        counts[rec.label][split.assignment[rec.id]] += 1
    return counts


def test_labels():
    assert [int(c) for c in ClassLabel] == [0, 1, 2, 3]
    assert [c.slug for c in ClassLabel] == ["normal", "benign", "in_situ", "invasive"]
    assert ClassLabel.parse("in_situ") is ClassLabel.IN_SITU
    with pytest.raises(DatasetError):
        ClassLabel.parse("carcinoma")


def test_splitmix64_reference_values():
    # first outputs of SplitMix64 seeded with 0 (state advanced by the golden gamma each call)
    state, outs = 0, []
    for _ in range(3):
        outs.append(splitmix64(state))
        state = (state + 0x9E3779B97F4A7C15) & ((1 << 64) - 1)
    assert outs == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_xorshift_update_equations():
    rng = XorShift64Star(1)
    x = rng.state
    x ^= x >> 12
    x ^= (x << 25) & ((1 << 64) - 1)
    x ^= x >> 27
    assert rng.next_u64() == (x * 0x2545F4914F6CDD1D) & ((1 << 64) - 1)


def test_below_is_in_range():
    rng = XorShift64Star(9)
    draws = [rng.below(7) for _ in range(2000)]
    assert set(draws) == set(range(7))


def test_split_60_20_20():
    m = image_manifest()
    split = make_split(m, (0.6, 0.2, 0.2), seed=2018)
    for counts in split_counts(m, split).values():
        assert counts == {"train": 60, "validation": 20, "test": 20}


def test_all_train():
    m = image_manifest(7)
    split = make_split(m, (1, 0, 0), seed=1)
    assert set(split.assignment.values()) == {"train"}


def test_split_determinism_and_seed_sensitivity():
    m = image_manifest()
    a = make_split(m, (0.6, 0.2, 0.2), seed=1)
    assert a.assignment == make_split(m, (0.6, 0.2, 0.2), seed=1).assignment
    assert a.assignment != make_split(m, (0.6, 0.2, 0.2), seed=2).assignment


def test_split_independent_of_record_order():
    m = image_manifest(10)
    shuffled = Manifest(reversed(m))
    assert make_split(m, seed=3).assignment == make_split(shuffled, seed=3).assignment


@settings(max_examples=80, deadline=None)
@given(sizes=st.lists(st.integers(1, 40), min_size=4, max_size=4),
       raw=st.lists(st.integers(0, 20), min_size=3, max_size=3).filter(lambda r: sum(r) > 0),
       seed=st.integers(0, 2**32))
def test_stratification_bound(sizes, raw, seed):
    ratios = [r / sum(raw) for r in raw]
    m = Manifest(ManifestRecord(f"{c.slug}{i}", "p", c) for c, n in zip(ClassLabel, sizes) for i in range(n))
    split = make_split(m, ratios, seed)
    assert set(split.assignment) == {r.id for r in m}
    for label, counts in split_counts(m, split).items():
        n = sizes[int(label)]
        assert sum(counts.values()) == n
        for name, ratio in zip(("train", "validation", "test"), ratios):
            assert abs(counts[name] - ratio * n) <= 1 + 1e-9


def test_empty_class_and_bad_ratios():
    m = Manifest(ManifestRecord(f"n{i}", "p", ClassLabel.NORMAL) for i in range(3))
    with pytest.raises(DatasetError):
        make_split(m)
    with pytest.raises(DatasetError):
        make_split(image_manifest(2), (0.5, 0.2, 0.2))


def test_patches_inherit_split():
    m = image_manifest(5)
    split = make_split(m, (0.6, 0.2, 0.2), 0)
    patches = [ManifestRecord(r.id, "x", r.label, None, x, 0, "identity") for r in m for x in (0, 4)]
    stamped = split.apply(patches)
    for rec in stamped:
        assert rec.split == split.assignment[rec.id]


def test_manifest_round_trip(tmp_path):
    m = Manifest([
        ManifestRecord("a", "a.png", ClassLabel.NORMAL, "train"),
        ManifestRecord("b", "b.png", ClassLabel.INVASIVE, None),
        ManifestRecord("a", "p/a_0_0.png", ClassLabel.NORMAL, "train", 0, 0, "rot90"),
    ])
    save_manifest(m, tmp_path / "m.jsonl")
    assert load_manifest(tmp_path / "m.jsonl") == m
    first = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[0])
    assert first == {"id": "a", "path": "a.png", "label": "normal", "split": "train"}


def test_unknown_label_names_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"id": "a", "path": "a.png", "label": "normal"}\n'
                    '{"id": "b", "path": "b.png", "label": "carcinoma"}\n')
    with pytest.raises(ManifestError, match="line 2") as err:
        load_manifest(path)
    assert err.value.line == 2


def test_parse_error_names_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text('{"id": "a", "path": "a.png", "label": "normal"}\n\n{oops\n')
    with pytest.raises(ManifestError, match="line 3"):
        load_manifest(path)


def test_duplicate_ids_rejected(tmp_path):
    with pytest.raises(DatasetError):
        Manifest([ManifestRecord("a", "x", ClassLabel.NORMAL)] * 2)


def test_class_histogram(tmp_path):
    save_manifest(image_manifest(), tmp_path / "m.jsonl")
    assert load_manifest(tmp_path / "m.jsonl").histogram() == {0: 100, 1: 100, 2: 100, 3: 100}
