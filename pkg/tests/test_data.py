import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kneeoa.data import (
    AugmentationConfig,
    DatasetManifest,
    ManifestError,
    SampleRecord,
    augment,
    largest_remainder_allocation,
    load_manifest,
    preprocess,
    save_manifest,
    stratified_split,
)
from synthdata import unsplit_manifest


def write_csv(path, rows, header="image_path,kl_grade,subject_id"):
    path.write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))
    return path


class TestLoadManifest:
    def test_counts(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", ["a.png,0,s1", "b.png,0,s2", "c.png,4,s3"])
        m = load_manifest(p)
        assert len(m) == 3
        assert m.class_counts == {0: 2, 1: 0, 2: 0, 3: 0, 4: 1}

    def test_header_only(self, tmp_path):
        m = load_manifest(write_csv(tmp_path / "m.csv", []))
        assert len(m) == 0
        assert all(c == 0 for c in m.class_counts.values())

    def test_bad_grade_names_line(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", ["a.png,0,s1", "b.png,5,s2"])
        with pytest.raises(ManifestError, match=r"m\.csv:3"):
            load_manifest(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "absent.csv")

    def test_missing_columns(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", ["a.png,0"], header="image_path,kl_grade")
        with pytest.raises(ManifestError, match="header"):
            load_manifest(p)

    def test_row_order_preserved(self, tmp_path):
        rows = [f"img{i}.png,{i % 5},s{i}" for i in range(10)]
        m = load_manifest(write_csv(tmp_path / "m.csv", rows))
        assert [r.image_path for r in m.records] == [f"img{i}.png" for i in range(10)]

    def test_roundtrip(self, tmp_path):
        p = write_csv(tmp_path / "m.csv", ["a.png,1,s1,train"],
                      header="image_path,kl_grade,subject_id,split")
        m = load_manifest(p)
        save_manifest(m, tmp_path / "out.csv")
        again = load_manifest(tmp_path / "out.csv")
        assert again.records == m.records


class TestStratifiedSplit:
    def test_exact_division(self):
        m = unsplit_manifest({g: 10 for g in range(5)})
        out = stratified_split(m, (7, 1, 2), seed=3)
        for g in range(5):
            recs = [r for r in out.records if r.grade == g]
            sizes = {s: sum(1 for r in recs if r.split == s) for s in ("train", "val", "test")}
            assert sizes == {"train": 7, "val": 1, "test": 2}

    def test_deterministic(self):
        m = unsplit_manifest({0: 13, 2: 7, 4: 29})
        a = stratified_split(m, (7, 1, 2), seed=11)
        b = stratified_split(m, (7, 1, 2), seed=11)
        assert [r.split for r in a.records] == [r.split for r in b.records]

    def test_seed_changes_assignment(self):
        m = unsplit_manifest({g: 40 for g in range(5)})
        a = stratified_split(m, (7, 1, 2), seed=0)
        b = stratified_split(m, (7, 1, 2), seed=1)
        assert [r.split for r in a.records] != [r.split for r in b.records]

    def test_already_assigned_rejected(self):
        m = unsplit_manifest({0: 3})
        out = stratified_split(m, (7, 1, 2), seed=0)
        with pytest.raises(ManifestError, match="unassigned"):
            stratified_split(out, (7, 1, 2), seed=0)

    def test_partition_and_proportionality(self):
        counts = {0: 53, 1: 11, 2: 27, 3: 8, 4: 1}
        m = unsplit_manifest(counts)
        out = stratified_split(m, (7, 1, 2), seed=5)
        assert all(r.split in ("train", "val", "test") for r in out.records)
        for g, n in counts.items():
            recs = [r for r in out.records if r.grade == g]
            sizes = [sum(1 for r in recs if r.split == s) for s in ("train", "val", "test")]
            assert sum(sizes) == n
            for size, frac in zip(sizes, (0.7, 0.1, 0.2)):
                assert abs(size - round(frac * n)) <= 1

    def test_empty_grade_allowed(self):
        m = unsplit_manifest({0: 10, 3: 0})
        out = stratified_split(m, (7, 1, 2), seed=0)
        assert len(out) == 10

    def test_group_by_subject(self):
        records = []
        for i in range(30):
            records.append(
                SampleRecord(f"i{i}.png", grade=i % 2, subject_id=f"subj{i // 3}")
            )
        out = stratified_split(DatasetManifest(records), (7, 1, 2), seed=2,
                               group_by_subject=True)
        by_subject = {}
        for r in out.records:
            by_subject.setdefault(r.subject_id, set()).add(r.split)
        assert all(len(s) == 1 for s in by_subject.values())


class TestLargestRemainder:
    @given(
        n=st.integers(0, 10_000),
        ratios=st.tuples(*[st.floats(0.01, 100)] * 3),
    )
    @settings(max_examples=200, deadline=None)
    def test_sums_and_bounds(self, n, ratios):
        sizes = largest_remainder_allocation(n, ratios)
        assert sum(sizes) == n
        total = sum(ratios)
        for size, r in zip(sizes, ratios):
            assert abs(size - n * r / total) <= 1


class TestPreprocess:
    def test_resize_shape(self):
        out = preprocess(np.zeros((448, 448), dtype=np.uint8))
        assert out.shape == (224, 224, 3)

    def test_constant_preserved(self):
        out = preprocess(np.full((300, 180, 3), 0.25, dtype=np.float32))
        assert np.allclose(out, 0.25, atol=1e-6)

    def test_identity_resize(self):
        img = np.random.default_rng(0).random((224, 224, 3)).astype(np.float32)
        assert np.array_equal(preprocess(img), img)

    def test_grayscale_replicated(self):
        img = np.random.default_rng(1).integers(0, 256, (224, 224), dtype=np.uint8)
        out = preprocess(img)
        assert np.array_equal(out[:, :, 0], out[:, :, 1])
        assert np.array_equal(out[:, :, 0], out[:, :, 2])
        assert np.allclose(out[:, :, 0], img / 255.0)

    def test_bounds(self):
        rng = np.random.default_rng(2)
        for shape in [(17, 301), (512, 512, 3), (224, 10)]:
            out = preprocess(rng.integers(0, 256, shape, dtype=np.uint8))
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            preprocess(np.zeros((0, 10), dtype=np.uint8))


class TestAugment:
    @pytest.fixture
    def img(self):
        return np.random.default_rng(3).random((224, 224, 3)).astype(np.float32)

    def test_identity_config(self, img):
        out = augment(img, AugmentationConfig.identity(), sample_index=4, epoch=7)
        assert np.array_equal(out, img)

    def test_forced_flip(self, img):
        cfg = AugmentationConfig(
            hflip_prob=1.0, brightness_range=(1, 1), saturation_range=(1, 1),
            max_rotation_deg=0, max_translate_frac=0, seed=0,
        )
        out = augment(img, cfg, 0, 0)
        assert np.array_equal(out, img[:, ::-1, :])

    def test_deterministic(self, img):
        cfg = AugmentationConfig(seed=9)
        a = augment(img, cfg, sample_index=5, epoch=2)
        b = augment(img, cfg, sample_index=5, epoch=2)
        assert np.array_equal(a, b)

    def test_stream_varies_with_index_and_epoch(self, img):
        cfg = AugmentationConfig(seed=9)
        a = augment(img, cfg, sample_index=5, epoch=2)
        b = augment(img, cfg, sample_index=6, epoch=2)
        c = augment(img, cfg, sample_index=5, epoch=3)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_degenerate_brightness(self, img):
        cfg = AugmentationConfig(
            hflip_prob=0.0, brightness_range=(0.5, 0.5), saturation_range=(1, 1),
            max_rotation_deg=0, max_translate_frac=0, seed=0,
        )
        out = augment(img, cfg, 0, 0)
        assert np.allclose(out, np.clip(img * 0.5, 0, 1))

    def test_output_in_unit_interval(self, img):
        cfg = AugmentationConfig(seed=1)
        for i in range(5):
            out = augment(img, cfg, i, 0)
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            AugmentationConfig(hflip_prob=1.5)
        with pytest.raises(ValueError):
            AugmentationConfig(brightness_range=(2.0, 1.0))
        with pytest.raises(ValueError):
            AugmentationConfig(max_rotation_deg=-1)
