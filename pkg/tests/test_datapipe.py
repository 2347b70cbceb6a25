import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drattn import datapipe as dp
from drattn.synthetic import write_dataset


def test_augment_group_identities():
    img = np.random.default_rng(0).integers(0, 256, (9, 9, 3), dtype=np.uint8)
    r = lambda a: dp.augment(a, "rot90")  # noqa: E731
    assert np.array_equal(r(r(r(r(img)))), img)
    assert np.array_equal(dp.augment(dp.augment(img, "hflip"), "hflip"), img)
    assert np.array_equal(dp.augment(img, "rot180"), r(r(img)))
    assert np.array_equal(dp.augment(img, "rot270"), r(r(r(img))))


def test_rot90_is_counter_clockwise():
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[0, 1] = 255  # top-right
    assert dp.augment(img, "rot90")[0, 0, 0] == 255  # moves to top-left


def test_augment_rejects_non_square_rotation_and_unknown_op():
    with pytest.raises(ValueError):
        dp.augment(np.zeros((2, 3, 3), dtype=np.uint8), "rot90")
    with pytest.raises(ValueError):
        dp.augment(np.zeros((2, 2, 3), dtype=np.uint8), "shear")


def _bilinear_oracle(src, th, tw):
    h, w = src.shape
    out = np.zeros((th, tw))
    for i in range(th):
        for j in range(tw):
            y = i * (h - 1) / (th - 1) if th > 1 else 0.0
            x = j * (w - 1) / (tw - 1) if tw > 1 else 0.0
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = (src[y0, x0] * (1 - dy) * (1 - dx) + src[y0, x1] * (1 - dy) * dx
                         + src[y1, x0] * dy * (1 - dx) + src[y1, x1] * dy * dx)
    return out


@pytest.mark.parametrize("src_shape, dst", [((2, 2), (3, 3)), ((4, 5), (7, 3)), ((3, 3), (1, 4)), ((5, 2), (5, 8))])
def test_bilinear_resize_matches_hand_oracle(src_shape, dst):
    src = np.random.default_rng(0).random(src_shape)
    np.testing.assert_allclose(dp.bilinear_resize(src, dst), _bilinear_oracle(src, *dst), atol=1e-12)


def test_bilinear_corner_values_preserved():
    src = np.array([[0.0, 10.0], [20.0, 30.0]])
    out = dp.bilinear_resize(src, (3, 3))
    assert out[1, 1] == 15.0
    assert (out[0, 0], out[0, 2], out[2, 0], out[2, 2]) == (0.0, 10.0, 20.0, 30.0)


def test_rescale_image_roundtrip_when_same_size():
    img = np.random.default_rng(1).integers(0, 256, (6, 6, 3), dtype=np.uint8)
    assert np.array_equal(dp.rescale_image(img, (6, 6)), img)
    assert dp.rescale_image(img, (12, 4)).shape == (12, 4, 3)


def test_to_tensor_batch_layout():
    img = np.zeros((2, 3, 3), dtype=np.uint8)
    img[..., 1] = 255
    batch = dp.to_tensor_batch([img])
    assert batch.shape == (1, 3, 2, 3)
    assert batch[0, 1].min() == 1.0 and batch[0, 0].max() == 0.0


def test_load_image_errors_name_the_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.raises(dp.IngestionError, match="broken.png"):
        dp.load_image(bad)


# --- manifests -----------------------------------------------------------

def _samples(n_per_grade=10, grades=range(5)):
    return dp.Manifest([dp.Sample(f"/data/g{g}_{i:03d}.png", g) for g in grades for i in range(n_per_grade)])


def test_manifest_roundtrip(tmp_path):
    (tmp_path / "images").mkdir()
    m = dp.split_dataset(dp.expand_dataset(dp.Manifest(
        [dp.Sample(str(tmp_path / "images" / f"a{i}.png"), i % 5) for i in range(15)]), "one-random", 0))
    dp.write_manifest(m, tmp_path / "manifest.csv")
    text = (tmp_path / "manifest.csv").read_text()
    assert text.splitlines()[0] == ",".join(dp.MANIFEST_HEADER)
    assert "images/a0.png" in text and str(tmp_path) not in text
    back = dp.read_manifest(tmp_path / "manifest.csv")
    assert back.samples == m.samples


@pytest.mark.parametrize("content, message", [
    ("file,grade\n", "header"),
    ("path,grade,split,aug_tag\nx.png,7,train,orig\n", "grade"),
    ("path,grade,split,aug_tag\nx.png,1,holdout,orig\n", "split"),
    ("path,grade,split,aug_tag\nx.png,1,train,shear\n", "augmentation"),
])
def test_read_manifest_validation(tmp_path, content, message):
    p = tmp_path / "m.csv"
    p.write_text(content)
    with pytest.raises(dp.ManifestError, match=message):
        dp.read_manifest(p)


def test_expand_dataset_policies():
    m = _samples(4)
    assert len(dp.expand_dataset(m, "none")) == 20
    one = dp.expand_dataset(m, "one-random", seed=3)
    assert len(one) == 40
    assert one.samples == dp.expand_dataset(m, "one-random", seed=3).samples
    full = dp.expand_dataset(m, "full")
    assert len(full) == 100
    for s in full.samples:
        assert s.origin == dp.origin_of(s.path, s.aug_tag)
    with pytest.raises(ValueError):
        dp.expand_dataset(m, "twice")


def test_split_is_stratified_and_grouped():
    m = dp.split_dataset(dp.expand_dataset(_samples(11), "full"), seed=2)
    by_origin = {}
    for s in m.samples:
        by_origin.setdefault(s.origin, set()).add(s.split)
    assert all(len(v) == 1 for v in by_origin.values())
    for g in range(5):
        originals = [s for s in m.samples if s.grade == g and s.aug_tag == "orig"]
        sizes = [sum(s.split == name for s in originals) for name in dp.SPLITS]
        assert sizes == [5, 3, 3] or all(abs(a - 11 * f) <= 1 for a, f in zip(sizes, (0.5, 0.3, 0.2)))
        assert sum(sizes) == 11


def test_split_small_class_goes_to_train(caplog):
    m = dp.Manifest([dp.Sample(f"/d/{i}.png", 0) for i in range(10)] + [dp.Sample("/d/x.png", 4)])
    with caplog.at_level(logging.WARNING):
        out = dp.split_dataset(m)
    assert [s.split for s in out.samples if s.grade == 4] == ["train"]
    assert "grade 4" in caplog.text


def test_split_rejects_bad_fractions():
    with pytest.raises(ValueError):
        dp.split_dataset(_samples(), (0.5, 0.5, 0.5))


def test_split_is_seeded():
    a = dp.split_dataset(_samples(), seed=1).samples
    assert a == dp.split_dataset(_samples(), seed=1).samples
    assert a != dp.split_dataset(_samples(), seed=2).samples


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 500), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_allocate_within_one(n, a, b):
    a, b = sorted((a, b))
    fractions = (a, b - a, 1.0 - b)
    sizes = dp.allocate(n, fractions)
    assert sum(sizes) == n and min(sizes) >= 0
    for size, f in zip(sizes, fractions):
        assert abs(size - n * f) <= 1 + 1e-9


def test_allocate_examples():
    assert dp.allocate(7, (0.5, 0.3, 0.2)) == [3, 2, 2]
    assert dp.allocate(10, (0.5, 0.3, 0.2)) == [5, 3, 2]
    assert dp.allocate(50, (0.5, 0.3, 0.2)) == [25, 15, 10]


def test_class_distribution():
    dist = dp.class_distribution(_samples(2, grades=(0, 0, 3)))
    assert dist.counts == {0: 4, 1: 0, 2: 0, 3: 2, 4: 0}
    assert dist.total == 6 and dist.fractions[3] == pytest.approx(1 / 3)


# --- ingestion -------------------------------------------------------------

def test_scan_directory_by_subfolder_and_csv(tmp_path):
    write_dataset(tmp_path / "raw", per_class=2, size=8)
    m = dp.scan_directory(tmp_path / "raw")
    assert len(m) == 10 and sorted(m.counts.values()) == [2] * 5
    labels = tmp_path / "labels.csv"
    labels.write_text("image,grade\n0/img_0000.png,3\n")
    m2 = dp.scan_directory(tmp_path / "raw", labels)
    assert [s.grade for s in m2.samples] == [3]


def test_scan_directory_errors(tmp_path):
    with pytest.raises(dp.IngestionError):
        dp.scan_directory(tmp_path / "missing")
    labels = tmp_path / "labels.csv"
    labels.write_text("image,grade\nghost.png,1\n")
    with pytest.raises(dp.IngestionError, match="ghost.png"):
        dp.scan_directory(tmp_path, labels)


def test_preprocess_materialises_variants(tmp_path):
    write_dataset(tmp_path / "raw", per_class=3, size=10)
    m = dp.preprocess(tmp_path / "raw", tmp_path / "out", resize=8, policy="one-random", seed=0)
    assert len(m) == 30
    originals = {s.origin: s for s in m.samples if s.aug_tag == "orig"}
    for s in m.samples:
        img = dp.load_image(s.path)
        assert img.shape == (8, 8, 3)
        if s.aug_tag != "orig":
            src = dp.load_image(originals[s.origin].path)
            assert np.array_equal(img, dp.augment(src, s.aug_tag))
            assert s.split == originals[s.origin].split
    images, labels = dp.load_split_arrays(m, "train")
    assert images.shape[1:] == (3, 8, 8) and len(labels) == len(m.split("train"))
