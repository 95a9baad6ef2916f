import json

import numpy as np
import pytest

from objclust.datasets import (DatasetManifest, SceneDataset, compose_scene, dataset_checksum,
                               generate_multimnist, load_dataset, load_source_digits, read_image,
                               sklearn_digits)


@pytest.fixture(scope="module")
def digits():
    return sklearn_digits(28)


@pytest.fixture(scope="module")
def generated(tmp_path_factory, digits):
    root = tmp_path_factory.mktemp("mm")
    manifest = generate_multimnist(*digits, 40, 3, root)
    return root, manifest


def test_sklearn_digits_shape(digits):
    images, labels = digits
    assert images.shape[1:] == (28, 28) and images.dtype == np.uint8
    assert set(np.unique(labels)) == set(range(10))


def test_every_scene_has_one_to_ten_annotations(generated):
    root, manifest = generated
    n = 0
    for rec in load_dataset(manifest):
        assert 1 <= len(rec.boxes) == len(rec.labels) <= 10
        assert np.all(rec.boxes[:, :2] >= 0) and np.all(rec.boxes[:, 2:] <= 128)
        assert np.all((rec.labels >= 0) & (rec.labels <= 9))
        n += 1
    assert n == manifest.count == 40


def test_same_seed_is_byte_identical(tmp_path, digits):
    a = generate_multimnist(*digits, 12, 5, tmp_path / "a")
    b = generate_multimnist(*digits, 12, 5, tmp_path / "b")
    c = generate_multimnist(*digits, 12, 6, tmp_path / "c")
    assert dataset_checksum(a) == dataset_checksum(b)
    assert dataset_checksum(a) != dataset_checksum(c)


def test_mean_object_count(digits):
    # uniform{1..10} has mean 5.5; standard error over 1e4 scenes is ~0.03
    images, labels = digits
    counts = [len(compose_scene(images, labels, np.random.default_rng([0, i]))[1])
              for i in range(10_000)]
    assert abs(np.mean(counts) - 5.5) <= 0.1


def test_round_trip_reproduces_annotations(generated):
    root, manifest = generated
    written = [json.loads(line) for line in open(manifest.annotation_path)]
    loaded = list(load_dataset(root))
    assert [r.id for r in loaded] == [w["id"] for w in written]
    for rec, w in zip(loaded, written):
        assert rec.boxes.tolist() == w["boxes"]
        assert rec.labels.tolist() == w["labels"]
        assert rec.image.shape == (3, 128, 128) and rec.image.dtype == np.float32
        assert rec.image.min() >= 0 and rec.image.max() <= 1
        assert np.array_equal(rec.image[0], rec.image[2])


def test_shuffle_order_is_deterministic(generated):
    root, _ = generated
    a = [r.id for r in load_dataset(root, shuffle_seed=1)]
    b = [r.id for r in load_dataset(root, shuffle_seed=1)]
    assert a == b and sorted(a) == [r.id for r in load_dataset(root)]
    assert a != sorted(a)


def test_boxes_are_tight(generated):
    _, manifest = generated
    for rec in load_dataset(manifest):
        img = rec.image[0]
        for x0, y0, x1, y1 in rec.boxes.astype(int):
            patch = img[y0:y1, x0:x1]
            assert patch[0].max() > 0.05 and patch[-1].max() > 0.05
            assert patch[:, 0].max() > 0.05 and patch[:, -1].max() > 0.05


def test_missing_image_names_file(tmp_path, digits):
    manifest = generate_multimnist(*digits, 3, 0, tmp_path)
    victim = manifest.image_path("train_000001")
    victim.unlink()
    with pytest.raises(FileNotFoundError, match="train_000001.png"):
        list(load_dataset(manifest))
    with pytest.raises(FileNotFoundError, match="train_000001.png"):
        DatasetManifest.load(tmp_path).validate()


def test_missing_annotation_file(tmp_path, digits):
    manifest = generate_multimnist(*digits, 2, 0, tmp_path)
    manifest.annotation_path.unlink()
    with pytest.raises(FileNotFoundError, match="annotations_train.jsonl"):
        list(load_dataset(manifest))


def test_count_mismatch_is_reported(tmp_path, digits):
    manifest = generate_multimnist(*digits, 3, 0, tmp_path)
    lines = manifest.annotation_path.read_text().splitlines()
    manifest.annotation_path.write_text("\n".join(lines[:2]) + "\n")
    with pytest.raises(ValueError, match="manifest says 3"):
        manifest.validate()


def test_empty_source_is_rejected(tmp_path):
    with pytest.raises(ValueError):
        generate_multimnist(np.zeros((0, 28, 28), np.uint8), np.zeros(0), 5, 0, tmp_path)


def test_load_source_digits_from_npz(tmp_path, digits):
    images, labels = digits
    np.savez(tmp_path / "mnist.npz", x_train=images[:10], y_train=labels[:10])
    got_x, got_y = load_source_digits(tmp_path)
    assert np.array_equal(got_x, images[:10]) and np.array_equal(got_y, labels[:10])
    with pytest.raises(FileNotFoundError):
        load_source_digits(tmp_path / "nowhere")


def test_load_source_digits_from_idx(tmp_path):
    import struct

    images = np.arange(2 * 28 * 28, dtype=np.uint64).reshape(2, 28, 28).astype(np.uint8)
    (tmp_path / "train-images-idx3-ubyte").write_bytes(
        struct.pack(">HBBIII", 0, 8, 3, 2, 28, 28) + images.tobytes())
    (tmp_path / "train-labels-idx1-ubyte").write_bytes(
        struct.pack(">HBBI", 0, 8, 1, 2) + bytes([7, 3]))
    x, y = load_source_digits(tmp_path)
    assert np.array_equal(x, images) and y.tolist() == [7, 3]


def test_scene_dataset_batches(generated):
    root, manifest = generated
    ds = SceneDataset.from_manifest(root)
    assert len(ds) == manifest.count
    b = ds.batch([0, 5])
    assert b.shape == (2, 3, 128, 128) and b.dtype == np.float32
    assert np.array_equal(b[0], read_image(manifest.image_path(ds.ids[0])))
    rec = ds.record(5)
    assert rec.id == ds.ids[5] and np.array_equal(rec.image, b[1])
