import hashlib
import json
from pathlib import Path

import matplotlib.pyplot as plt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsule.catalog import (
    ClassCatalog,
    ClassStats,
    DataError,
    DatasetManifest,
    SampleRecord,
    compute_stats,
    emit_distribution_plot,
    generate_synthetic,
    ingest,
)


def _tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


def _touch_tree(root, layout):
    for split, classes in layout.items():
        for name, n in classes.items():
            d = root / split / name
            d.mkdir(parents=True)
            for i in range(n):
                (d / f"img{i}.png").write_bytes(b"x")


class TestCatalog:
    def test_default_has_ten_classes_with_normal(self):
        cat = ClassCatalog.default()
        assert len(cat.classes) == 10
        assert cat.normal_class == "Normal"
        assert "Worms" in cat.abnormal

    @pytest.mark.parametrize(
        "classes,normal",
        [(("A",), "A"), (("A", "A"), "A"), (("A", "B"), "C")],
    )
    def test_invalid(self, classes, normal):
        with pytest.raises(DataError):
            ClassCatalog(classes, normal)

    def test_load_json(self, tmp_path):
        p = tmp_path / "cat.json"
        p.write_text(json.dumps({"classes": ["Normal", "X"], "normal_class": "Normal"}))
        assert ClassCatalog.load(p) == ClassCatalog(("Normal", "X"), "Normal")


class TestIngest:
    def test_directory_layout(self, tmp_path, toy_catalog):
        layout = {"train": {"Normal": 2, "Ulcer": 2, "Worms": 2}, "val": {"Normal": 1, "Ulcer": 1, "Worms": 1}}
        _touch_tree(tmp_path, layout)
        m = ingest(tmp_path, toy_catalog)
        assert len(m) == 9
        assert {r.class_name for r in m.records} == {"Normal", "Ulcer", "Worms"}
        assert all(r.origin == "original" for r in m.records)

    def test_unknown_class_in_csv_is_named(self, tmp_path, toy_catalog):
        csv = tmp_path / "m.csv"
        csv.write_text("image_path,class_name,split\na.png,Wormz,train\n")
        with pytest.raises(DataError, match="Wormz"):
            ingest(csv, toy_catalog)

    def test_unknown_class_directory_is_named(self, tmp_path, toy_catalog):
        _touch_tree(tmp_path, {"train": {"Wormz": 1}})
        with pytest.raises(DataError, match="Wormz"):
            ingest(tmp_path, toy_catalog)

    def test_empty_dataset_rejected(self, tmp_path, toy_catalog):
        (tmp_path / "train").mkdir()
        with pytest.raises(DataError):
            ingest(tmp_path, toy_catalog)

    def test_missing_path(self, tmp_path, toy_catalog):
        with pytest.raises(DataError, match="nope"):
            ingest(tmp_path / "nope", toy_catalog)

    def test_synthetic_counts(self, tmp_path, toy_catalog):
        root = generate_synthetic(toy_catalog, {c: 10 for c in toy_catalog.classes}, 16, 0, tmp_path / "d")
        n_files = sum(1 for p in root.rglob("*.png"))
        m = ingest(root, toy_catalog)
        assert len(m.select("train")) == n_files == 40

    def test_csv_round_trip(self, tmp_path, small_manifest):
        path = small_manifest.write_csv(tmp_path / "sub" / "manifest.csv")
        assert path.read_text().splitlines()[0] == "image_path,class_name,split,origin,source_path"
        again = ingest(path, small_manifest.catalog)
        assert again == small_manifest

    def test_round_trip_with_augmented_records(self, tmp_path, toy_catalog):
        recs = [
            SampleRecord(str(tmp_path / "a.png"), "Ulcer", "train"),
            SampleRecord(str(tmp_path / "aug" / "a_aug0.png"), "Ulcer", "train", "augmented", str(tmp_path / "a.png")),
        ]
        m = DatasetManifest(toy_catalog, recs)
        again = ingest(m.write_csv(tmp_path / "m.csv"), toy_catalog)
        assert again == m
        assert again.records[1].source_path == str(tmp_path / "a.png")

    def test_duplicate_paths_rejected(self, toy_catalog):
        r = SampleRecord("/x/a.png", "Normal", "train")
        with pytest.raises(DataError):
            DatasetManifest(toy_catalog, [r, r])

    def test_augmented_needs_source(self):
        with pytest.raises(DataError):
            SampleRecord("/x/a.png", "Normal", "train", "augmented", "")


class TestStats:
    def test_paper_counts_ratio(self):
        stats = ClassStats({"Normal": 28663, "Worms": 158}, "Normal")
        assert stats.imbalance_ratio == pytest.approx(181.41, abs=0.005)
        assert stats.imbalance_ratio == 28663 / 158

    def test_balanced(self):
        assert ClassStats({c: 50 for c in "ABCD"}).imbalance_ratio == 1.0

    def test_zero_count_excluded_from_ratio(self):
        stats = ClassStats({"A": 0, "B": 10, "C": 40})
        assert stats.counts["A"] == 0
        assert stats.imbalance_ratio == 4.0

    def test_empty_split_errors(self, toy_catalog):
        m = DatasetManifest(toy_catalog, [SampleRecord("/a.png", "Normal", "train")])
        with pytest.raises(DataError):
            compute_stats(m, "val")

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["Normal", "Ulcer", "Polyp", "Worms"]), st.sampled_from(["train", "val"])), min_size=1, max_size=60))
    def test_counts_exhaustive(self, rows):
        cat = ClassCatalog(("Normal", "Ulcer", "Polyp", "Worms"), "Normal")
        recs = [SampleRecord(f"/d/{i}.png", c, s) for i, (c, s) in enumerate(rows)]
        m = DatasetManifest(cat, recs)
        for split in ("train", "val"):
            n = sum(1 for _, s in rows if s == split)
            if n:
                assert compute_stats(m, split).total == n


class TestPlot:
    def _bars(self, monkeypatch, stats, include_normal, tmp_path):
        seen = {}
        real = plt.Axes.bar

        def spy(self, x, height, *a, **k):
            seen["n"] = len(x)
            return real(self, x, height, *a, **k)

        monkeypatch.setattr(plt.Axes, "bar", spy)
        out = emit_distribution_plot(stats, tmp_path / "p.png", include_normal=include_normal)
        assert out.exists() and out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        return seen["n"]

    def test_bar_counts(self, monkeypatch, tmp_path):
        cat = ClassCatalog.default()
        stats = ClassStats({c: i + 1 for i, c in enumerate(cat.classes)}, "Normal")
        assert self._bars(monkeypatch, stats, True, tmp_path) == 10
        assert self._bars(monkeypatch, stats, False, tmp_path) == 9

    def test_empty_stats(self, tmp_path):
        with pytest.raises(DataError):
            emit_distribution_plot(ClassStats({}), tmp_path / "p.png")

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            emit_distribution_plot(ClassStats({"A": 1}), tmp_path / "missing" / "p.png")


class TestSynthetic:
    def test_byte_identical(self, tmp_path, toy_catalog):
        counts = {"Normal": 5, "Ulcer": 5}
        a = generate_synthetic(toy_catalog, counts, 16, 7, tmp_path / "a")
        b = generate_synthetic(toy_catalog, counts, 16, 7, tmp_path / "b")
        assert _tree_digest(a) == _tree_digest(b)
        c = generate_synthetic(toy_catalog, counts, 16, 8, tmp_path / "c")
        assert _tree_digest(a) != _tree_digest(c)

    def test_zero_count_dir(self, tmp_path, toy_catalog):
        root = generate_synthetic(toy_catalog, {"Ulcer": 0}, 16, 0, tmp_path / "d")
        d = root / "train" / "Ulcer"
        assert d.is_dir() and not any(d.iterdir())

    def test_size_floor(self, tmp_path, toy_catalog):
        with pytest.raises(ValueError):
            generate_synthetic(toy_catalog, {"Ulcer": 1}, 8, 0, tmp_path)

    def test_localized_quadrants_recorded(self, tmp_path, toy_catalog):
        from capsule.catalog import load_quadrants

        root = generate_synthetic(toy_catalog, {"Normal": 2, "Ulcer": 3}, 32, 0, tmp_path / "q", localized=True)
        q = load_quadrants(root)
        assert len(q) == 3  # Normal has no pattern
        assert set(q.values()) <= {0, 1, 2, 3}
