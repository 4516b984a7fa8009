"""Sample container format, synthetic generator, and batching."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from ilseg import data as D

GEN64 = D.GeneratorConfig(image_size=64, train_count=2, val_count=1, test_count=1,
                          full_val_count=1, full_test_count=1)


def _tree_digest(root: Path) -> dict:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


# container format


def test_sample_round_trip_bitwise(tmp_path):
    sample = D.render_sample(GEN64, 3, 1, "train", 0, (1,))
    path = tmp_path / "s.bin"
    D.save_sample(sample, path)
    loaded = D.load_sample(path)
    assert loaded.image.tobytes() == sample.image.tobytes()
    assert loaded.labels.tobytes() == sample.labels.tobytes()
    assert loaded.annotated == sample.annotated

    first = path.read_bytes()
    D.save_sample(loaded, path)
    assert path.read_bytes() == first


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "s.bin"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 64)
    with pytest.raises(D.BadMagicError):
        D.load_sample(path)


def test_load_rejects_truncations(tmp_path):
    sample = D.render_sample(GEN64, 3, 1, "train", 0, (1,))
    path = tmp_path / "s.bin"
    D.save_sample(sample, path)
    raw = path.read_bytes()

    for cut in (len(D.MAGIC) + 4, len(D.MAGIC) + 8 + 100, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(D.TruncatedPayloadError):
            D.load_sample(path)


def test_load_rejects_trailing_bytes(tmp_path):
    sample = D.render_sample(GEN64, 3, 1, "train", 0, (1,))
    path = tmp_path / "s.bin"
    D.save_sample(sample, path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(D.SampleFormatError, match="trailing"):
        D.load_sample(path)


def test_load_rejects_zero_extent(tmp_path):
    import struct

    path = tmp_path / "s.bin"
    path.write_bytes(D.MAGIC + struct.pack("<II", 0, 4) + b"\0")
    with pytest.raises(D.SampleFormatError, match="zero extent"):
        D.load_sample(path)


def test_sample_validate_rejects_unannotated_labels():
    labels = np.zeros((4, 4), dtype=np.uint8)
    labels[0, 0] = 3
    sample = D.Sample(image=np.zeros((4, 4), dtype=np.float32), labels=labels, annotated=(1,))
    with pytest.raises(D.SampleFormatError):
        sample.validate()


# rendering and generation


def test_render_sample_deterministic():
    a = D.render_sample(GEN64, 11, 2, "val", 3, (2,))
    b = D.render_sample(GEN64, 11, 2, "val", 3, (2,))
    assert a.image.tobytes() == b.image.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()
    c = D.render_sample(GEN64, 12, 2, "val", 3, (2,))
    assert a.image.tobytes() != c.image.tobytes()


def test_render_labels_follow_annotated_set():
    sample = D.render_sample(GEN64, 11, 2, "train", 0, (2,))
    assert set(np.unique(sample.labels).tolist()) <= {0, 2}
    full = D.render_sample(GEN64, 11, 0, "val", 0, (1, 2, 3, 4, 5))
    assert set(np.unique(full.labels).tolist()) == {0, 1, 2, 3, 4, 5}


def test_rendered_areas_stay_in_configured_ranges():
    area_img = float(GEN64.image_size ** 2)
    ranges = {c.id: c.area_range for c in D.CATEGORIES}
    n_checked = 0
    for idx in range(20):
        sample = D.render_sample(GEN64, 7, 0, "val", idx, (1, 2, 3, 4, 5))
        for cid, (lo, hi) in ranges.items():
            frac = float((sample.labels == cid).sum()) / area_img
            assert lo <= frac <= hi, f"category {cid} area {frac} outside [{lo}, {hi}]"
            n_checked += 1
    for stage_tag in (1, 2, 3, 4):
        for idx in range(5):
            cats = D.STAGE_CATEGORIES[stage_tag - 1]
            sample = D.render_sample(GEN64, 7, stage_tag, "train", idx, cats)
            for cid in cats:
                lo, hi = ranges[cid]
                frac = float((sample.labels == cid).sum()) / area_img
                assert lo <= frac <= hi
                n_checked += 1
    assert n_checked >= 100


def test_generate_writes_expected_tree(tmp_path):
    manifests = D.generate(GEN64, 3, tmp_path)
    assert sorted(manifests) == ["full", "stage_1", "stage_2", "stage_3", "stage_4"]
    for key, path in manifests.items():
        assert path.exists()
        doc = D.load_manifest(path)
        if key == "full":
            assert sorted(doc["categories"]) == [1, 2, 3, 4, 5]
            assert all(e["split"] in ("val", "test") for e in doc["samples"])
        else:
            stage = int(key.split("_")[1])
            assert tuple(sorted(doc["categories"])) == D.STAGE_CATEGORIES[stage - 1]
    train = D.manifest_samples(D.load_manifest(manifests["stage_2"]), "train")
    assert len(train) == GEN64.train_count
    assert all(set(np.unique(s.labels).tolist()) <= {0, 2} for s in train)


def test_generate_is_byte_identical(tmp_path):
    D.generate(GEN64, 3, tmp_path / "a")
    D.generate(GEN64, 3, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    D.generate(GEN64, 4, tmp_path / "c")
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")


def test_generator_config_validation():
    with pytest.raises(ValueError):
        D.GeneratorConfig(image_size=12).validate()
    with pytest.raises(ValueError):
        D.GeneratorConfig(image_size=20).validate()
    with pytest.raises(ValueError):
        D.GeneratorConfig(train_count=0).validate()


# manifests


def test_manifest_rejects_bad_json(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text('{"version": 1,\n  "seed": }\n')
    with pytest.raises(D.SampleFormatError, match=r"line 2 column"):
        D.load_manifest(path)


def test_manifest_rejects_missing_keys(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"version": 1, "seed": 0, "samples": []}))
    with pytest.raises(D.SampleFormatError, match="categories"):
        D.load_manifest(path)


def test_manifest_rejects_unknown_version(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"version": 99, "seed": 0, "categories": {}, "samples": []}))
    with pytest.raises(D.SampleFormatError, match="version"):
        D.load_manifest(path)


def test_manifest_rejects_missing_sample_file(tmp_path):
    path = tmp_path / "manifest.json"
    D.write_manifest(path, {1: "lobe"}, [("gone.bin", (1,), "train")], seed=0)
    with pytest.raises(D.SampleFormatError, match="gone.bin"):
        D.load_manifest(path)
    doc = D.load_manifest(path, check_files=False)
    assert doc["samples"][0]["path"] == "gone.bin"


def test_manifest_samples_rejects_annotation_mismatch(tmp_path):
    sample = D.render_sample(GEN64, 3, 1, "train", 0, (1,))
    D.save_sample(sample, tmp_path / "s.bin")
    path = tmp_path / "manifest.json"
    D.write_manifest(path, {1: "lobe", 2: "disc"}, [("s.bin", (1, 2), "train")], seed=3)
    with pytest.raises(D.SampleFormatError, match="disagree"):
        D.manifest_samples(D.load_manifest(path), "train")


# batching


def _stage_samples(tmp_path, n=4):
    cfg = D.GeneratorConfig(image_size=32, train_count=n, val_count=1, test_count=1,
                            full_val_count=1, full_test_count=1)
    manifests = D.generate(cfg, 5, tmp_path)
    return D.manifest_samples(D.load_manifest(manifests["stage_1"]), "train")


def _collect(batches):
    return [(e, img.tobytes(), lab.tobytes(), tuple(a), tuple(i)) for e, img, lab, a, i in batches]


def test_iterate_batches_deterministic_and_epoch_orders_differ(tmp_path):
    samples = _stage_samples(tmp_path)
    a = _collect(D.iterate_batches(samples, 2, seed=9, n_epochs=2))
    b = _collect(D.iterate_batches(samples, 2, seed=9, n_epochs=2))
    assert a == b
    order_e0 = [i for e, _, _, _, idx in a if e == 0 for i in idx]
    order_e1 = [i for e, _, _, _, idx in a if e == 1 for i in idx]
    assert sorted(order_e0) == sorted(order_e1) == list(range(len(samples)))
    different = _collect(D.iterate_batches(samples, 2, seed=10, n_epochs=2))
    assert a != different


def test_iterate_batches_resume_reproduces_suffix(tmp_path):
    samples = _stage_samples(tmp_path)
    whole = _collect(D.iterate_batches(samples, 2, seed=9, n_epochs=3))
    tail = _collect(D.iterate_batches(samples, 2, seed=9, n_epochs=2, start_epoch=1))
    n_per_epoch = len(whole) // 3
    assert whole[n_per_epoch:] == tail


def test_iterate_batches_without_augment_keeps_stored_bytes(tmp_path):
    samples = _stage_samples(tmp_path)
    for _, images, labels, _, idx in D.iterate_batches(samples, 2, seed=9):
        for pos, i in enumerate(idx):
            assert images[pos, 0].tobytes() == samples[i].image.tobytes()
            assert labels[pos].tobytes() == samples[i].labels.tobytes()
    assert images.dtype == np.float32


def test_iterate_batches_augment_is_deterministic_and_label_safe(tmp_path):
    samples = _stage_samples(tmp_path)
    a = _collect(D.iterate_batches(samples, 2, seed=9, augment=True, n_epochs=2))
    b = _collect(D.iterate_batches(samples, 2, seed=9, augment=True, n_epochs=2))
    assert a == b
    raw = _collect(D.iterate_batches(samples, 2, seed=9, n_epochs=2))
    assert a != raw
    for _, images, labels, annots, _ in D.iterate_batches(samples, 2, seed=9, augment=True):
        for pos in range(images.shape[0]):
            assert set(np.unique(labels[pos]).tolist()) <= {0} | set(annots[pos])


def test_iterate_batches_rejects_bad_arguments(tmp_path):
    samples = _stage_samples(tmp_path)
    with pytest.raises(ValueError):
        list(D.iterate_batches(samples, 0, seed=9))
    with pytest.raises(ValueError):
        list(D.iterate_batches([], 2, seed=9))
