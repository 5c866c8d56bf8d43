"""Exit criteria, one test per criterion; the terminal summary prints a PASS/FAIL line for each."""

import hashlib
import math
import statistics
import time

import numpy as np
import pytest
import torch

from capsule.augment import TransformSpec, apply_transform, build_plan, default_tiers, execute_plan
from capsule.catalog import ClassCatalog, ClassStats, compute_stats, generate_synthetic, ingest, load_quadrants
from capsule.curriculum import build_schedule
from capsule.explain import cam_from_maps, gradcam, predicted_class, quadrant_of
from capsule.metrics import REFERENCE_ROWS, ConfusionMatrix, render_comparison, weighted_report
from capsule.model import ModelSpec, build_model, expand_head
from capsule.trainer import ImageCache, TrainConfig, final_f1, run_curriculum, run_direct

from test_metrics import oracle, random_cm

CAT4 = ClassCatalog(("Normal", "Ulcer", "Polyp", "Worms"), "Normal")


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.mark.acceptance("AC1 augmentation balance (target 300, all abnormal >= 300, ratio not worse, < 2 min)")
def test_ac1_augmentation_balance(tmp_path):
    start = time.perf_counter()
    counts = dict(zip(CAT4.classes, (2866, 290, 80, 16)))
    root = generate_synthetic(CAT4, counts, 16, 0, tmp_path / "data")
    manifest = ingest(root, CAT4)
    pre = compute_stats(manifest)
    plan = build_plan(pre, CAT4, 300, 25)
    out = execute_plan(manifest, plan, default_tiers(), 0, tmp_path / "aug")
    post = compute_stats(out, origin=None)
    elapsed = time.perf_counter() - start
    print(f"pre {pre.counts} post {post.counts} ratio {pre.without_normal().imbalance_ratio:.3f} -> "
          f"{post.without_normal().imbalance_ratio:.3f} in {elapsed:.1f}s")
    assert all(post.counts[c] >= 300 for c in CAT4.abnormal)
    assert post.counts == plan.projected_counts()
    assert post.without_normal().imbalance_ratio <= pre.without_normal().imbalance_ratio
    assert post.counts["Normal"] == 2866
    assert elapsed < 120


@pytest.mark.acceptance("AC2 tier algebra and byte-exact flip/rotate90 identities on 100 images")
def test_ac2_tier_algebra():
    tiers = default_tiers()
    light = {"horizontal_flip", "vertical_flip"}
    medium = light | {"rotate90", "color_jitter"}
    heavy = medium | {"shift_scale_rotate", "gaussian_blur"}
    assert tiers["light"].kinds == light and tiers["medium"].kinds == medium and tiers["heavy"].kinds == heavy
    assert tiers["light"].kinds < tiers["medium"].kinds < tiers["heavy"].kinds

    rng = np.random.default_rng(2024)
    hflip, vflip = TransformSpec("horizontal_flip", 1.0), TransformSpec("vertical_flip", 1.0)
    rot = TransformSpec("rotate90", 1.0, {"k": (1, 1)})
    for _ in range(100):
        h, w = rng.integers(4, 40, size=2)
        img = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        for spec in (hflip, vflip):
            assert apply_transform(apply_transform(img, spec, rng), spec, rng).tobytes() == img.tobytes()
        out = img
        for _ in range(4):
            out = apply_transform(out, rot, rng)
        assert out.shape == img.shape and out.tobytes() == img.tobytes()


@pytest.mark.acceptance("AC3 determinism: byte-identical augmentation and identical loss curves")
def test_ac3_determinism(small_manifest, tmp_path):
    plan = build_plan(compute_stats(small_manifest), CAT4, 40, 25)
    runs = []
    for name in ("a", "b"):
        out = execute_plan(small_manifest, plan, default_tiers(), 5, tmp_path / name)
        runs.append({r.image_path.split(f"/{name}/", 1)[1]: _sha(r.image_path) for r in out.select("train", "augmented")})
    assert runs[0] == runs[1] and len(runs[0]) == 3 * 10 * 3

    sched = build_schedule(compute_stats(small_manifest), CAT4)
    cfg = TrainConfig(epochs_per_stage=1, batch_size=16, seed=4, deterministic=True)
    spec = ModelSpec("tiny_hybrid", 2)
    a = run_curriculum(small_manifest, sched, spec, cfg)[1]
    b = run_curriculum(small_manifest, sched, spec, cfg)[1]
    assert a.losses == b.losses
    assert [e.val for e in a.epochs] == [e.val for e in b.epochs]


@pytest.mark.acceptance("AC4 curriculum schedule properties over 50 random count maps (< 10 s)")
def test_ac4_curriculum_schedule():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(2, 11))
        names = tuple(f"k{i}" for i in range(n))
        normal = names[int(rng.integers(n))]
        cat = ClassCatalog(names, normal)
        counts = {c: int(rng.integers(0, 30000)) for c in names}
        s = build_schedule(ClassStats(counts, normal), cat)
        added = [st.added_class for st in s.stages[1:]]
        assert len(s) == len(cat.abnormal) + 1
        assert all(counts[x] >= counts[y] for x, y in zip(added, added[1:]))
        assert sorted(added) == sorted(cat.abnormal)
        assert s.final.label_space == cat.classes
    assert time.perf_counter() - start < 10


@pytest.mark.acceptance("AC5 head expansion keeps backbone features and retained logits exactly (20 batches)")
def test_ac5_head_expansion():
    model = build_model(ModelSpec("tiny_hybrid", 2), ["Normal", "Abnormal"], seed=0).eval()
    wider = expand_head(model, ["Normal", "Ulcer", "Abnormal-rest"], copy_overlap=True, seed=1).eval()
    widest = expand_head(wider, list(CAT4.classes), copy_overlap=True, seed=2).eval()
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(20):
            x = torch.randn(int(torch.randint(1, 9, (1,), generator=gen)), 3, 32, 32, generator=gen)
            f0 = model.forward_features(x)
            for m in (wider, widest):
                for a, b in zip(f0, m.forward_features(x)):
                    assert torch.equal(a, b)
            assert torch.equal(model(x)[:, 0], wider(x)[:, 0])
            assert torch.equal(wider(x)[:, :2], widest(x)[:, [0, 1]])


@pytest.mark.acceptance("AC6 metrics oracle on 1000 matrices, recall == accuracy, reference rows verbatim")
def test_ac6_metrics():
    rng = np.random.default_rng(123)
    for _ in range(1000):
        cm = random_cm(rng)
        rep = weighted_report(ConfusionMatrix(tuple(f"c{i}" for i in range(len(cm))), cm))
        acc, w, per = oracle(cm)
        assert rep.accuracy == acc and [rep.precision, rep.recall, rep.f1] == w
        assert [(m.precision, m.recall, m.f1, m.support) for m in rep.per_class.values()] == per
        assert rep.recall == rep.accuracy
    table = render_comparison([], REFERENCE_ROWS)
    for row in ("76% | 0.78 | 0.76 | 0.76", "82% | 0.81 | 0.82 | 0.78", "89.57% | 0.893 | 0.895 | 0.894", "89.79% | 0.909 | 0.897 | 0.902"):
        assert row in table


@pytest.fixture(scope="module")
def localized(tmp_path_factory):
    root = generate_synthetic(CAT4, {c: 150 for c in CAT4.classes}, 32, 3, tmp_path_factory.mktemp("loc") / "data",
                              val_counts={c: 30 for c in CAT4.classes}, localized=True)
    return root, ingest(root, CAT4)


@pytest.mark.acceptance("AC7 GradCAM: exact 2x2, range on 100 pairs, scaling invariance 1e-6, quadrant locality >= 80%")
def test_ac7_gradcam(localized):
    a = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    assert cam_from_maps(a, np.ones_like(a)).tolist() == [[0.25, 0.5], [0.75, 1.0]]

    gen = torch.Generator().manual_seed(0)
    for i in range(100):
        n = 2 + i % 4
        model = build_model(ModelSpec("tiny_hybrid", n), [f"c{j}" for j in range(n)], seed=i)
        x = torch.randn(1, 3, 32, 32, generator=gen)
        hm = gradcam(model, x, f"c{i % n}")
        assert hm.grid.min() >= 0.0 and hm.grid.max() <= 1.0
        assert hm.upsampled.min() >= 0.0 and hm.upsampled.max() <= 1.0
        if i % 10 == 0:
            lam = float(torch.rand(1, generator=gen)) * 10 + 0.01
            with torch.no_grad():
                model.head.weight[i % n] *= lam
                model.head.bias[i % n] *= lam
            np.testing.assert_allclose(gradcam(model, x, f"c{i % n}").grid, hm.grid, atol=1e-6)

    root, manifest = localized
    quadrants = load_quadrants(root)
    model, log = run_direct(manifest, ModelSpec("tiny_hybrid", 4), TrainConfig(epochs_per_stage=1, seed=0), total_epochs=3)
    cache = ImageCache(32)
    hits = total = 0
    for r in manifest.select("val"):
        if r.class_name == CAT4.normal_class:
            continue
        x = cache.batch([r.image_path])
        if predicted_class(model, x) != r.class_name:
            continue
        hm = gradcam(model, x, r.class_name)
        total += 1
        hits += quadrant_of(*hm.centroid(), 32) == quadrants[r.image_path]
    print(f"quadrant locality {hits}/{total}")
    assert total >= 30
    assert hits / total >= 0.80


@pytest.fixture(scope="module")
def skewed(tmp_path_factory):
    base = tmp_path_factory.mktemp("skewed")
    root = generate_synthetic(CAT4, dict(zip(CAT4.classes, (400, 60, 30, 12))), 32, 1, base / "data",
                              val_counts={c: 40 for c in CAT4.classes})
    manifest = ingest(root, CAT4)
    stats = compute_stats(manifest)
    plan = build_plan(stats, CAT4, 200, 25)
    return execute_plan(manifest, plan, default_tiers(), 0, base / "aug"), stats


@pytest.mark.acceptance("AC8 end-to-end toy run: curriculum F1 >= 0.90, 5-seed mean >= direct - 0.05, < 15 min")
def test_ac8_end_to_end(skewed):
    start = time.perf_counter()
    manifest, stats = skewed
    sched = build_schedule(stats, CAT4)
    assert sched.ordering == ("Ulcer", "Polyp", "Worms")
    spec = ModelSpec("tiny_hybrid", 2)
    cur, dire = [], []
    for seed in range(5):
        cfg = TrainConfig(epochs_per_stage=5, batch_size=32, seed=seed)
        model, clog = run_curriculum(manifest, sched, spec, cfg)
        _, dlog = run_direct(manifest, spec, cfg)
        assert len(clog.epochs) <= 20 and len(dlog.epochs) == len(clog.epochs)
        assert model.class_names == list(CAT4.classes)
        cur.append(final_f1(clog))
        dire.append(final_f1(dlog))
    elapsed = time.perf_counter() - start
    print(f"curriculum F1 {cur} direct F1 {dire} in {elapsed:.0f}s")
    assert all(math.isfinite(v) for v in cur + dire)
    assert min(cur) >= 0.90
    assert statistics.mean(cur) >= statistics.mean(dire) - 0.05
    assert elapsed < 15 * 60
