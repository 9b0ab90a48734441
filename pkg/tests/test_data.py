import json
from dataclasses import replace

import numpy as np
import pytest
import torch
from PIL import Image

from rpnet.data import (
    DatasetSpec,
    SegmentationFolder,
    Shape,
    SyntheticSpec,
    decode_colors,
    decode_label,
    encode_label,
    export_prediction,
    generate_synthetic,
    list_pairs,
    load_pair,
    render_shapes,
    write_dataset,
)
from rpnet.errors import DataError


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(SyntheticSpec(seed=11, num_images=4))
        b = generate_synthetic(SyntheticSpec(seed=11, num_images=4))
        for (ia, la), (ib, lb) in zip(a, b):
            assert torch.equal(ia, ib) and torch.equal(la, lb)
        c = generate_synthetic(SyntheticSpec(seed=12, num_images=4))
        assert not all(torch.equal(x, y) for x, y in zip(a.labels, c.labels))

    def test_default_shapes(self):
        ds = generate_synthetic(SyntheticSpec(num_images=64))
        assert len(ds) == 64
        image, label = ds[0]
        assert image.shape == (3, 64, 64) and image.dtype == torch.float32
        assert label.shape == (64, 64) and label.dtype == torch.int64
        assert 0.0 <= image.min() and image.max() <= 1.0
        assert set(torch.cat(ds.labels).unique().tolist()) == {0, 1, 2, 3}

    def test_thin_structures_present(self):
        ds = generate_synthetic(SyntheticSpec(num_images=64))
        bars = [s for layout in ds.layouts for s in layout if s.kind == "bar"]
        assert bars and all(min(s.height, s.width) <= 3 for s in bars)

    def test_single_rectangle_area(self):
        image, label = render_shapes([Shape("rect", 2, 3, 5, 4, 7)], (16, 16), 4)
        assert int((label == 2).sum()) == 28
        assert int((label == 0).sum()) == 256 - 28
        ys, xs = np.nonzero(label == 2)
        assert (ys.min(), ys.max(), xs.min(), xs.max()) == (3, 6, 5, 11)

    def test_zero_shapes_is_background(self):
        ds = generate_synthetic(SyntheticSpec(num_images=3, shapes_per_image=(0, 0), noise=0.0))
        for image, label in ds:
            assert bool((label == 0).all())
            assert torch.allclose(image, image[:, :1, :1].expand_as(image))

    def test_pixel_aligned_colours(self):
        spec = SyntheticSpec(seed=5, num_images=2, noise=0.0)
        ds = generate_synthetic(spec)
        palette = np.array(spec.palette) / 255.0
        for image, label in ds:
            np.testing.assert_allclose(image.numpy().transpose(1, 2, 0), palette[label.numpy()], atol=3e-3)

    def test_noise_bound(self):
        spec = SyntheticSpec(seed=6, num_images=2)
        noisy = generate_synthetic(spec)
        clean, _ = render_shapes(noisy.layouts[0], spec.image_size, spec.num_classes)
        assert float((noisy.images[0] - torch.from_numpy(clean)).abs().max()) <= spec.noise + 1e-6

    def test_disk(self):
        _, label = render_shapes([Shape("disk", 1, 8.0, 8.0, radius=2.0)], (16, 16), 2)
        assert int(label.sum()) == 13  # lattice points with x^2 + y^2 <= 4

    def test_rejects_bad_class(self):
        with pytest.raises(ValueError):
            render_shapes([Shape("rect", 5, 0, 0, 2, 2)], (4, 4), 4)


def _spec(root, **kw):
    return DatasetSpec(str(root), "train", ("a", "b", "c"), ((255, 0, 0), (0, 255, 0), (0, 0, 255)), **kw)


class TestLabels:
    def test_colour_round_trip_2x2(self, tmp_path):
        spec = _spec(tmp_path)
        label = np.array([[0, 1], [2, 255]])
        path = export_prediction(label, spec.palette, tmp_path / "p.png")
        raw = np.array(Image.open(path))
        np.testing.assert_array_equal(raw, [[[255, 0, 0], [0, 255, 0]], [[0, 0, 255], [0, 0, 0]]])
        np.testing.assert_array_equal(decode_label(path, spec).numpy(), label)

    def test_index_round_trip(self, tmp_path):
        spec = _spec(tmp_path)
        label = np.array([[0, 2, 1], [255, 1, 0]])
        path = encode_label(label, tmp_path / "l.png")
        np.testing.assert_array_equal(decode_label(path, spec).numpy(), label)

    def test_unknown_colour(self):
        spec = _spec("/nonexistent")
        rgb = np.zeros((1, 2, 3), dtype=np.uint8)
        rgb[0, 1] = (1, 2, 3)
        with pytest.raises(DataError, match=r"\(1, 2, 3\)"):
            decode_colors(rgb, spec)

    def test_unknown_index(self, tmp_path):
        path = encode_label(np.array([[0, 7]]), tmp_path / "l.png")
        with pytest.raises(DataError, match="7"):
            decode_label(path, _spec(tmp_path))

    def test_palette_must_be_injective(self):
        with pytest.raises(ValueError):
            DatasetSpec("x", "train", ("a", "b"), ((1, 1, 1), (1, 1, 1)))
        with pytest.raises(ValueError):
            DatasetSpec("x", "train", ("a",), ((0, 0, 0),))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            decode_label(tmp_path / "nope.png", _spec(tmp_path))


def _png(path, arr, mode):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), mode=mode).save(path)


class TestLayouts:
    def test_camvid(self, tmp_path):
        label = np.array([[0, 5], [10, 11]])
        _png(tmp_path / "train" / "0001.png", np.full((2, 2, 3), 128), "RGB")
        _png(tmp_path / "trainannot" / "0001.png", label, "L")
        spec = DatasetSpec.camvid(tmp_path)
        assert spec.num_classes == 11 and len(spec.palette) == 11
        spec = replace(spec, size=None)
        image, lab = load_pair(spec, 0)
        assert image.shape == (3, 2, 2) and abs(float(image[0, 0, 0]) - 128 / 255) < 1e-6
        np.testing.assert_array_equal(lab.numpy(), [[0, 5], [10, 255]])

    def test_cityscapes_label_ids(self, tmp_path):
        ids = np.array([[7, 8], [26, 0]])
        _png(tmp_path / "leftImg8bit/val/aachen/a_000000_leftImg8bit.png", np.zeros((2, 2, 3)), "RGB")
        _png(tmp_path / "gtFine/val/aachen/a_000000_gtFine_labelIds.png", ids, "L")
        spec = DatasetSpec.cityscapes(tmp_path, "val", train_size=False)
        assert spec.num_classes == 19
        spec = replace(spec, size=None)
        (pair,) = list_pairs(spec)
        assert pair[1].name == "a_000000_gtFine_labelIds.png"
        _, lab = load_pair(spec, 0)
        np.testing.assert_array_equal(lab.numpy(), [[0, 1], [13, 255]])

    def test_folder_round_trip(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(seed=2, num_images=3, image_size=(16, 16)))
        write_dataset(ds, tmp_path, "val")
        meta = json.loads((tmp_path / "dataset.json").read_text())
        assert meta["class_names"] == list(ds.class_names)
        folder = SegmentationFolder(DatasetSpec.folder(tmp_path, "val"))
        assert len(folder) == 3
        for i in range(3):
            image, label = folder[i]
            assert torch.equal(label, ds.labels[i])
            assert float((image - ds.images[i]).abs().max()) <= 0.5 / 255 + 1e-6

    def test_resize_uses_nearest_for_labels(self, tmp_path):
        _png(tmp_path / "train" / "x.png", np.zeros((4, 4, 3)), "RGB")
        _png(tmp_path / "trainannot" / "x.png", np.array([[0, 1, 2, 0]] * 4), "L")
        spec = _spec(tmp_path, size=(2, 2))
        image, label = load_pair(spec, 0)
        assert image.shape == (3, 2, 2)
        np.testing.assert_array_equal(label.numpy(), [[0, 2], [0, 2]])

    def test_empty_split(self, tmp_path):
        assert len(SegmentationFolder(_spec(tmp_path))) == 0
