import gzip

import numpy as np
import pytest

import data_loader
from data_loader import (
    FER_HEADER,
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    DataFormatError,
    Dataset,
    batches,
    download_dataset,
    load_dataset,
    load_fer_csv,
    load_idx,
    normalize,
    normalize_splits,
    read_idx,
    split_validation,
    write_idx,
)
from tests.conftest import toy_dataset


def fer_row(emotion, usage, value=0, count=48 * 48):
    return f"{emotion},{' '.join([str(value)] * count)},{usage}"


def write_fer(path, rows, header=",".join(FER_HEADER)):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join([header] + rows) + "\n")
    return path


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------

def test_idx_header_and_payload(tmp_path):
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    path = write_idx(tmp_path / "images", images)
    raw = path.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03"
    assert raw[4:16] == b"\x00\x00\x00\x02\x00\x00\x00\x03\x00\x00\x00\x04"
    np.testing.assert_array_equal(read_idx(path, IDX_IMAGES_MAGIC), images)


def test_idx_rejects_bad_magic(tmp_path):
    path = write_idx(tmp_path / "labels", np.arange(5))
    with pytest.raises(DataFormatError, match="bad magic"):
        read_idx(path, IDX_IMAGES_MAGIC)


def test_idx_rejects_truncated_payload(tmp_path):
    path = write_idx(tmp_path / "images", np.zeros((3, 4, 4)))
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DataFormatError, match="truncated payload"):
        read_idx(path, IDX_IMAGES_MAGIC)


def test_idx_falls_back_to_gzip(tmp_path):
    labels = np.array([3, 1, 4, 1, 5])
    write_idx(tmp_path / "labels.gz", labels)
    with gzip.open(tmp_path / "labels.gz", "rb") as f:
        assert f.read(4) == b"\x00\x00\x08\x01"
    np.testing.assert_array_equal(read_idx(tmp_path / "labels", IDX_LABELS_MAGIC), labels)


def test_idx_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_idx(tmp_path / "absent", IDX_LABELS_MAGIC)


def test_load_idx_scales_pixels(tmp_path):
    write_idx(tmp_path / "img", np.full((2, 4, 4), 255))
    write_idx(tmp_path / "lab", np.array([0, 9]))
    dataset = load_idx(tmp_path / "img", tmp_path / "lab")
    assert dataset.images.dtype == np.float32
    np.testing.assert_array_equal(dataset.images, 1.0)
    assert dataset.labels.tolist() == [0, 9]


# ---------------------------------------------------------------------------
# FER2013
# ---------------------------------------------------------------------------

def test_fer_routes_rows_by_usage(tmp_path):
    path = write_fer(tmp_path / "fer2013.csv", [
        fer_row(0, "Training", 255),
        fer_row(3, "Training"),
        fer_row(6, "PublicTest"),
        fer_row(2, "PrivateTest"),
    ])
    splits = load_fer_csv(path)
    assert {k: len(v) for k, v in splits.items()} == {"train": 2, "public_test": 1, "private_test": 1}
    assert splits["train"].images.shape == (2, 48, 48)
    assert splits["train"].labels.tolist() == [0, 3]
    assert splits["train"].images[0].max() == pytest.approx(1.0)
    assert splits["train"].num_classes == 7


def test_fer_reports_line_of_short_row(tmp_path):
    path = write_fer(tmp_path / "fer2013.csv", [
        fer_row(0, "Training"),
        fer_row(1, "Training", count=100),
    ])
    with pytest.raises(DataFormatError, match=r"fer2013.csv:3: expected 2304 pixels, got 100"):
        load_fer_csv(path)


def test_fer_line_numbers_count_blank_lines(tmp_path):
    path = tmp_path / "fer2013.csv"
    path.write_text("\n".join([",".join(FER_HEADER), fer_row(0, "Training"), "",
                               fer_row(1, "Training", count=10)]) + "\n")
    with pytest.raises(DataFormatError, match=r"fer2013.csv:4: expected 2304 pixels, got 10"):
        load_fer_csv(path)


def test_fer_skips_blank_lines(tmp_path):
    path = tmp_path / "fer2013.csv"
    path.write_text("\n".join([",".join(FER_HEADER), fer_row(0, "Training"), "",
                               fer_row(1, "PublicTest")]) + "\n\n")
    splits = load_fer_csv(path)
    assert len(splits["train"]) == 1
    assert len(splits["public_test"]) == 1


@pytest.mark.parametrize("row, message", [
    ("x," + " ".join(["0"] * 2304) + ",Training", r":3: emotion 'x' is not a class index"),
    ("7," + " ".join(["0"] * 2304) + ",Training", r":3: emotion 7 outside 0..6"),
    ("1," + " ".join(["0"] * 2303 + ["abc"]) + ",Training", r":3: pixels must be space-separated integers"),
    ("1," + " ".join(["0"] * 2303 + ["256"]) + ",Training", r":3: pixel value above 255"),
])
def test_fer_rejects_malformed_fields_with_line(tmp_path, row, message):
    path = write_fer(tmp_path / "fer2013.csv", [fer_row(0, "Training"), row])
    with pytest.raises(DataFormatError, match=message):
        load_fer_csv(path)


def test_fer_rejects_extra_fields(tmp_path):
    path = write_fer(tmp_path / "fer2013.csv", [fer_row(0, "Training") + ",extra"])
    with pytest.raises(DataFormatError):
        load_fer_csv(path)


def test_fer_rejects_header_and_usage(tmp_path):
    with pytest.raises(DataFormatError, match="header"):
        load_fer_csv(write_fer(tmp_path / "a.csv", [fer_row(0, "Training")], header="label,pixels,Usage"))
    with pytest.raises(DataFormatError, match="unknown Usage"):
        load_fer_csv(write_fer(tmp_path / "b.csv", [fer_row(0, "Training"), fer_row(0, "Holdout")]))


def test_fer_dataset_splits(tmp_path):
    write_fer(tmp_path / "fer2013" / "fer2013.csv", [
        fer_row(0, "Training", 10), fer_row(1, "Training", 200),
        fer_row(2, "PublicTest", 50), fer_row(3, "PrivateTest", 90),
    ])
    splits = load_dataset("fer2013", tmp_path)
    assert [splits[k].split for k in ("train", "val", "test")] == ["train", "val", "test"]
    assert splits["val"].labels.tolist() == [2]
    assert splits["test"].labels.tolist() == [3]


# ---------------------------------------------------------------------------
# Normalization, splitting, batching
# ---------------------------------------------------------------------------

def test_normalize_uses_training_statistics():
    train = toy_dataset(n=50)
    train = Dataset(train.images * 3 + 2, train.labels, "train", "toy", 3)
    test = toy_dataset(n=20, seed=4, split="test")
    splits = normalize_splits({"train": train, "test": test})
    assert float(splits["train"].images.mean()) == pytest.approx(0.0, abs=1e-5)
    assert float(splits["train"].images.std()) == pytest.approx(1.0, abs=1e-4)
    assert splits["test"].mean == splits["train"].mean
    expected = (test.images - splits["train"].mean) / (splits["train"].std + 1e-8)
    np.testing.assert_allclose(splits["test"].images, expected, rtol=1e-5, atol=1e-5)


def test_normalize_constant_images_stay_finite():
    dataset = Dataset(np.ones((4, 8, 8), dtype=np.float32), np.zeros(4, dtype=int), "train", "toy", 3)
    assert np.all(normalize(dataset).images == 0.0)


def test_split_validation_is_seeded_partition():
    dataset = toy_dataset(n=30)
    train, val = split_validation(dataset, 0.2, seed=5)
    assert (len(train), len(val)) == (24, 6)
    assert (train.split, val.split) == ("train", "val")
    again_train, _ = split_validation(dataset, 0.2, seed=5)
    np.testing.assert_array_equal(train.images, again_train.images)
    rows = {row.tobytes() for row in np.concatenate([train.images, val.images])}
    assert rows == {row.tobytes() for row in dataset.images}


def test_batches_cover_every_sample_once():
    dataset = toy_dataset(n=10)
    seen = []
    sizes = []
    for images, labels, idx in batches(dataset, 4, np.random.default_rng(0)):
        np.testing.assert_array_equal(labels, dataset.labels[idx])
        sizes.append(len(images))
        seen.extend(idx.tolist())
    assert sizes == [4, 4, 2]
    assert sorted(seen) == list(range(10))
    natural = np.concatenate([idx for _, _, idx in batches(dataset, 4, None)])
    np.testing.assert_array_equal(natural, np.arange(10))


def test_dataset_validates_labels():
    with pytest.raises(DataFormatError, match="labels outside"):
        Dataset(np.zeros((2, 4, 4)), np.array([0, 5]), "train", "toy", 3)
    with pytest.raises(DataFormatError, match="2 images but 3 labels"):
        Dataset(np.zeros((2, 4, 4)), np.array([0, 1, 2]), "train", "toy", 3)


# ---------------------------------------------------------------------------
# Dataset root
# ---------------------------------------------------------------------------

def test_load_dataset_from_idx_root(mnist_root):
    splits = load_dataset("mnist", mnist_root, seed=1, val_fraction=0.25)
    assert (len(splits["train"]), len(splits["val"]), len(splits["test"])) == (30, 10, 12)
    assert splits["test"].images.shape == (12, 28, 28)
    assert splits["train"].mean is not None
    assert splits["val"].mean == splits["train"].mean


def test_load_dataset_unknown_name(tmp_path):
    with pytest.raises(ValueError, match="Unknown dataset"):
        load_dataset("cifar", tmp_path)


def test_download_rejects_bad_checksum(tmp_path, monkeypatch):
    class FakeResponse:
        content = b"not an idx file"

        def raise_for_status(self):
            pass

    monkeypatch.setattr(data_loader.requests, "get", lambda url, timeout: FakeResponse())
    with pytest.raises(DataFormatError, match="md5"):
        download_dataset("mnist", tmp_path)
    assert not any((tmp_path / "mnist").iterdir())


def test_download_has_no_fer_mirror(tmp_path):
    with pytest.raises(ValueError, match="by hand"):
        download_dataset("fer2013", tmp_path)
