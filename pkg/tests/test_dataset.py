import json

import numpy as np
import pytest

from stepdet.dataset import (
    Annotation,
    DatasetError,
    DetectionDataset,
    GeneratorConfig,
    ImageRecord,
    category_masses,
    count_images_per_category,
    frequency_groups,
    generate_shapeworld,
    load_annotations,
    partition_head_tail,
    save_annotations,
    zipf_masses,
)


def test_uniform_exponent_balances_categories():
    ds = generate_shapeworld(
        GeneratorConfig(num_categories=2, zipf_exponent=0.0, num_images=400, seed=1)
    )
    counts = count_images_per_category(ds)
    assert set(counts) == {0, 1}
    # exponent 0 is uniform; counts should agree within sampling noise
    assert abs(counts[0] - counts[1]) < 0.25 * (counts[0] + counts[1])


def test_generation_deterministic():
    cfg = GeneratorConfig(num_categories=6, zipf_exponent=1.0, num_images=40, seed=9)
    a = generate_shapeworld(cfg)
    b = generate_shapeworld(cfg)
    assert a.images == b.images
    assert a.annotations == b.annotations
    assert a.categories == b.categories


def test_seed_changes_data():
    base = GeneratorConfig(num_categories=6, zipf_exponent=1.0, num_images=40, seed=9)
    other = GeneratorConfig(num_categories=6, zipf_exponent=1.0, num_images=40, seed=10)
    assert generate_shapeworld(base).annotations != generate_shapeworld(other).annotations


def test_zipf_counts_match_law():
    cfg = GeneratorConfig(num_categories=40, zipf_exponent=1.2, num_images=4000, seed=3)
    ds = generate_shapeworld(cfg)
    counts = count_images_per_category(ds)
    masses = category_masses(cfg)

    # the inclusion construction keeps P(category in image) proportional to its
    # Zipf mass, so empirical counts should track expectation chi-square-style
    lam = cfg.avg_categories_per_image
    q = np.minimum(lam * masses, 0.95)
    empty = np.prod(1.0 - q)
    expected = (q + empty * masses) * cfg.num_images
    observed = np.array([counts[c] for c in range(40)], dtype=np.float64)
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    # 40 bins; generous bound ~ mean + 5 sd of a chi-square(40)
    assert chi2 < 40 + 5 * np.sqrt(80), chi2

    # rank-1 over rank-40 mass ratio is 40^1.2; check the empirical ratio
    by_rank = sorted(counts.values(), reverse=True)
    ratio = by_rank[0] / max(by_rank[-1], 1)
    assert 0.5 * 40**1.2 < ratio < 2.0 * 40**1.2


def test_zipf_masses_closed_form():
    m = zipf_masses(4, 1.0)
    h = 1 + 1 / 2 + 1 / 3 + 1 / 4
    assert np.allclose(sorted(m, reverse=True), [1 / h, 1 / (2 * h), 1 / (3 * h), 1 / (4 * h)])
    assert m.sum() == pytest.approx(1.0)


def test_too_many_categories_rejected():
    with pytest.raises(DatasetError, match="renderable"):
        GeneratorConfig(num_categories=49, zipf_exponent=1.0, num_images=10, seed=0).validate()


def test_count_images_per_category_image_level():
    ds = DetectionDataset(
        images=[ImageRecord(id=0, width=64, height=64, noise_seed=0)],
        annotations=[
            Annotation(id=0, image_id=0, category=0, bbox=(1, 1, 5, 5)),
            Annotation(id=1, image_id=0, category=0, bbox=(10, 10, 15, 15)),
        ],
        categories=[0, 1],
    )
    counts = count_images_per_category(ds)
    assert counts == {0: 1, 1: 0}


def test_count_images_three_image_example():
    ds = DetectionDataset(
        images=[ImageRecord(id=i, width=64, height=64, noise_seed=i) for i in range(3)],
        annotations=[
            Annotation(id=0, image_id=0, category=0, bbox=(1, 1, 5, 5)),
            Annotation(id=1, image_id=1, category=0, bbox=(1, 1, 5, 5)),
            Annotation(id=2, image_id=1, category=1, bbox=(10, 10, 15, 15)),
            Annotation(id=3, image_id=2, category=1, bbox=(1, 1, 5, 5)),
        ],
        categories=[0, 1],
    )
    assert count_images_per_category(ds) == {0: 2, 1: 2}


def _dataset_with_counts(counts: dict[int, int]) -> DetectionDataset:
    images, annotations = [], []
    img_id = ann_id = 0
    for cat, n in counts.items():
        for _ in range(n):
            images.append(ImageRecord(id=img_id, width=64, height=64, noise_seed=img_id))
            annotations.append(
                Annotation(id=ann_id, image_id=img_id, category=cat, bbox=(1, 1, 9, 9))
            )
            img_id += 1
            ann_id += 1
    return DetectionDataset(images=images, annotations=annotations, categories=sorted(counts))


def test_partition_threshold_inclusive_on_head():
    ds = _dataset_with_counts({0: 100, 1: 30, 2: 5})
    part = partition_head_tail(ds, 30)
    assert part.head == {0, 1}
    assert part.tail == {2}
    assert part.head | part.tail == set(ds.categories)
    assert not part.head & part.tail


def test_partition_degenerate_empty_head():
    ds = _dataset_with_counts({0: 10, 1: 10})
    part = partition_head_tail(ds, 100)
    assert part.head == set()
    assert part.tail == {0, 1}


def test_partition_union_intersection_property():
    rng = np.random.default_rng(5)
    for _ in range(20):
        counts = {c: int(rng.integers(1, 50)) for c in range(int(rng.integers(2, 8)))}
        ds = _dataset_with_counts(counts)
        m = int(rng.integers(1, 60))
        part = partition_head_tail(ds, m)
        assert part.head | part.tail == set(ds.categories)
        assert not part.head & part.tail
        for c in part.head:
            assert count_images_per_category(ds)[c] >= m


def test_frequency_group_boundaries():
    ds = _dataset_with_counts({0: 5, 1: 50, 2: 101})
    groups = frequency_groups(ds, (10, 100))
    assert groups.rare == {0}
    assert groups.common == {1}
    assert groups.frequent == {2}

    # both boundary counts land in common
    ds = _dataset_with_counts({0: 10, 1: 100})
    groups = frequency_groups(ds, (10, 100))
    assert groups.common == {0, 1}
    assert groups.rare == set() and groups.frequent == set()


def test_save_load_round_trip(tmp_path, small_generated):
    path = tmp_path / "ds.json"
    save_annotations(small_generated, path)
    loaded = load_annotations(path)
    assert loaded.images == small_generated.images
    assert loaded.annotations == small_generated.annotations
    assert loaded.categories == small_generated.categories


def test_save_is_byte_deterministic(tmp_path, small_generated):
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    save_annotations(small_generated, p1)
    save_annotations(small_generated, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_missing_image_reference(tmp_path, small_generated):
    path = tmp_path / "ds.json"
    save_annotations(small_generated, path)
    doc = json.loads(path.read_text())
    doc["annotations"][0]["image_id"] = 10_000
    path.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match="annotation"):
        load_annotations(path)


def test_load_rejects_inverted_bbox(tmp_path, small_generated):
    path = tmp_path / "ds.json"
    save_annotations(small_generated, path)
    doc = json.loads(path.read_text())
    bad = doc["annotations"][0]
    bad["bbox"] = [50.0, 10.0, 20.0, 30.0]
    path.write_text(json.dumps(doc))
    with pytest.raises(DatasetError, match=str(bad["id"])):
        load_annotations(path)


def test_annotations_inside_image_bounds(small_generated):
    for ann in small_generated.annotations:
        rec = small_generated.image_by_id(ann.image_id)
        x0, y0, x1, y1 = ann.bbox
        assert 0 <= x0 < x1 <= rec.width
        assert 0 <= y0 < y1 <= rec.height


def test_every_image_has_annotations(small_generated):
    for rec in small_generated.images:
        assert small_generated.annotations_by_image(rec.id)


def test_subset_tag_gives_fresh_images_same_distribution():
    base = GeneratorConfig(num_categories=6, zipf_exponent=1.0, num_images=40, seed=9)
    val = GeneratorConfig(
        num_categories=6, zipf_exponent=1.0, num_images=40, seed=9, subset_tag=1
    )
    assert np.allclose(category_masses(base), category_masses(val))
    assert generate_shapeworld(base).annotations != generate_shapeworld(val).annotations
