"""Dataset access (CamVid, Cityscapes, on-disk folders) and the synthetic
shapes generator used for desk-scale experiments.

Directory layouts:

* ``camvid`` / ``folder``: ``<root>/<split>/<name>.png`` paired with
  ``<root>/<split>annot/<name>.png`` (the SegNet CamVid layout). A ``folder``
  root carries a ``dataset.json`` with class names and palette.
* ``cityscapes``: ``<root>/leftImg8bit/<split>/<city>/<stem>_leftImg8bit.png``
  paired with ``<root>/gtFine/<split>/<city>/<stem>_gtFine_labelIds.png``.

Label PNGs are either single-channel index maps (modes ``L``, ``P``, ``I``)
or RGB colour maps decoded through the palette; the mode decides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError
from .pyramid import resize_nearest

IGNORE_INDEX = 255
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetSpec:
    root: str
    split: str
    class_names: tuple[str, ...]
    palette: tuple[tuple[int, int, int], ...]
    ignore_index: int = IGNORE_INDEX
    void_color: tuple[int, int, int] = (0, 0, 0)
    layout: str = "folder"
    # raw label index -> train id; indices absent from the map become ignore
    label_map: dict[int, int] | None = None
    size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if len(self.palette) != len(self.class_names):
            raise ValueError("palette and class_names must have the same length")
        colors = [tuple(c) for c in self.palette] + [tuple(self.void_color)]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colours (including void) must be distinct")
        if 0 <= self.ignore_index < self.num_classes:
            raise ValueError("ignore_index must lie outside [0, num_classes)")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @classmethod
    def camvid(cls, root, split="train") -> "DatasetSpec":
        return cls._from_resource("camvid", root, split, layout="camvid")

    @classmethod
    def cityscapes(cls, root, split="train", train_size=True) -> "DatasetSpec":
        spec = cls._from_resource("cityscapes", root, split, layout="cityscapes")
        if train_size:
            meta = _resource("cityscapes")
            spec = replace(spec, size=tuple(meta["train_size"]))
        return spec

    @classmethod
    def folder(cls, root, split="train") -> "DatasetSpec":
        meta_path = Path(root) / "dataset.json"
        if not meta_path.exists():
            raise DataError(f"missing dataset description {meta_path}")
        meta = json.loads(meta_path.read_text())
        return cls._from_meta(meta, root, split, layout="folder")

    @classmethod
    def _from_resource(cls, name, root, split, layout):
        return cls._from_meta(_resource(name), root, split, layout)

    @classmethod
    def _from_meta(cls, meta, root, split, layout):
        label_map = meta.get("label_map")
        return cls(
            root=str(root),
            split=split,
            class_names=tuple(meta["class_names"]),
            palette=tuple(tuple(c) for c in meta["palette"]),
            ignore_index=meta.get("ignore_index", IGNORE_INDEX),
            void_color=tuple(meta.get("void_color", (0, 0, 0))),
            layout=layout,
            label_map={int(k): v for k, v in label_map.items()} if label_map else None,
            size=tuple(meta["size"]) if meta.get("size") and layout == "folder" else None,
        )


def _resource(name) -> dict:
    text = resources.files("rpnet").joinpath("resources").joinpath(f"{name}.json").read_text()
    return json.loads(text)


def list_pairs(spec: DatasetSpec) -> list[tuple[Path, Path]]:
    root = Path(spec.root)
    if spec.layout == "cityscapes":
        images = sorted((root / "leftImg8bit" / spec.split).glob("*/*_leftImg8bit.png"))
        pairs = []
        for img in images:
            stem = img.name.removesuffix("_leftImg8bit.png")
            lab = root / "gtFine" / spec.split / img.parent.name / f"{stem}_gtFine_labelIds.png"
            pairs.append((img, lab))
        return pairs
    images = sorted((root / spec.split).glob("*.png"))
    return [(img, root / f"{spec.split}annot" / img.name) for img in images]


def _lookup_table(spec: DatasetSpec, size: int) -> np.ndarray:
    table = np.full(size, spec.ignore_index, dtype=np.int64)
    if spec.label_map is None:
        table[: spec.num_classes] = np.arange(spec.num_classes)
        if spec.ignore_index < size:
            table[spec.ignore_index] = spec.ignore_index
    else:
        for raw, train_id in spec.label_map.items():
            if raw < size:
                table[raw] = train_id
    return table


def decode_label(path, spec: DatasetSpec) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing label file {path}")
    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if mode in ("L", "P", "I", "I;16"):
        arr = arr.astype(np.int64)
        if spec.label_map is None:
            bad = (arr >= spec.num_classes) & (arr != spec.ignore_index)
            if bad.any():
                raise DataError(f"{path}: label index {int(arr[bad][0])} is not a known class")
        table = _lookup_table(spec, max(int(arr.max()) + 1, 256))
        return torch.from_numpy(table[arr])
    if mode in ("RGB", "RGBA"):
        return torch.from_numpy(decode_colors(arr[..., :3], spec, source=path))
    raise DataError(f"{path}: unsupported label image mode {mode}")


def decode_colors(rgb: np.ndarray, spec: DatasetSpec, source="<array>") -> np.ndarray:
    """Map an ``(H, W, 3)`` colour image to class indices via the palette."""
    codes = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    lut = {((r << 16) | (g << 8) | b): i for i, (r, g, b) in enumerate(spec.palette)}
    v = spec.void_color
    lut[(v[0] << 16) | (v[1] << 8) | v[2]] = spec.ignore_index
    uniq, inverse = np.unique(codes, return_inverse=True)
    mapped = np.empty(len(uniq), dtype=np.int64)
    for j, code in enumerate(uniq):
        if int(code) not in lut:
            color = ((code >> 16) & 255, (code >> 8) & 255, code & 255)
            raise DataError(f"{source}: unknown palette colour {tuple(int(c) for c in color)}")
        mapped[j] = lut[int(code)]
    return mapped[inverse].reshape(codes.shape)


def encode_label(label, path, spec: DatasetSpec | None = None):
    """Write an index-map PNG; inverts ``spec.label_map`` when it is one-to-one."""
    arr = np.asarray(label, dtype=np.int64)
    if spec is not None and spec.label_map is not None:
        inverse = {}
        for raw, tid in spec.label_map.items():
            if tid in inverse:
                raise ValueError("label_map is not invertible")
            inverse[tid] = raw
        arr = np.vectorize(lambda v: inverse.get(int(v), int(v)))(arr) if arr.size else arr
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("index labels must fit in 8 bits")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path)
    return path


def load_image(path, size=None) -> torch.Tensor:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing image file {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def load_pair(spec: DatasetSpec, index: int, pairs=None):
    """Image ``(3, H, W)`` in [0, 1] and label ``(H, W)`` for one sample."""
    pairs = pairs if pairs is not None else list_pairs(spec)
    if not 0 <= index < len(pairs):
        raise IndexError(f"index {index} outside split of {len(pairs)} samples")
    img_path, lab_path = pairs[index]
    image = load_image(img_path, spec.size)
    label = decode_label(lab_path, spec)
    if spec.size is not None and tuple(label.shape) != tuple(spec.size):
        label = resize_nearest(label, spec.size)
    if image.shape[-2:] != label.shape:
        raise DataError(f"{img_path} and {lab_path} differ in size")
    return image, label


class SegmentationFolder:
    """Lazily decoded dataset over a :class:`DatasetSpec`."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        self.pairs = list_pairs(spec)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, index):
        return load_pair(self.spec, index, self.pairs)


def export_prediction(pred, palette, path, void_color=(0, 0, 0), ignore_index=IGNORE_INDEX):
    """Write a palette-coloured RGB PNG of a label map."""
    pred = np.asarray(pred, dtype=np.int64)
    lut = np.array([tuple(c) for c in palette] + [tuple(void_color)], dtype=np.uint8)
    idx = np.where(pred == ignore_index, len(palette), pred)
    if idx.min(initial=0) < 0 or idx.max(initial=0) > len(palette):
        raise ValueError("prediction contains indices outside the palette")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(lut[idx], mode="RGB").save(path)
    return path


# ---------------------------------------------------------------------------
# synthetic shapes

SYNTH_COLORS = (
    (0.15, 0.15, 0.15),
    (0.90, 0.20, 0.20),
    (0.20, 0.80, 0.25),
    (0.25, 0.35, 0.95),
    (0.95, 0.90, 0.20),
    (0.85, 0.30, 0.90),
)


@dataclass(frozen=True)
class Shape:
    """An axis-aligned rectangle (``rect``/``bar``) or a disk, in pixels.

    Rectangles cover rows ``[top, top + height)`` and columns
    ``[left, left + width)``; disks cover pixels whose centre lies within
    ``radius`` of ``(cy, cx)``.
    """

    kind: str
    class_id: int
    top: float = 0
    left: float = 0
    height: float = 0
    width: float = 0
    radius: float = 0


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    num_images: int = 64
    image_size: tuple[int, int] = (64, 64)
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (1, 6)
    thin_prob: float = 0.2
    # rectangle sides and disk diameters, as fractions of the shorter image side
    shape_extent: tuple[float, float] = (0.25, 0.6)
    noise: float = 0.05

    def __post_init__(self):
        if not 2 <= self.num_classes <= len(SYNTH_COLORS):
            raise ValueError(f"num_classes must be in [2, {len(SYNTH_COLORS)}]")
        lo, hi = self.shapes_per_image
        if not 0 <= lo <= hi:
            raise ValueError("shapes_per_image must be an ordered non-negative range")

    @property
    def class_names(self):
        return ("background",) + tuple(f"class{i}" for i in range(1, self.num_classes))

    @property
    def palette(self):
        return tuple(tuple(int(round(255 * v)) for v in c) for c in SYNTH_COLORS[: self.num_classes])


def render_shapes(shapes, size, num_classes) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free image ``(3, H, W)`` and label ``(H, W)``; later shapes occlude."""
    h, w = size
    label = np.zeros((h, w), dtype=np.int64)
    ys, xs = np.mgrid[0:h, 0:w]
    for s in shapes:
        if not 0 <= s.class_id < num_classes:
            raise ValueError(f"shape class {s.class_id} outside [0, {num_classes})")
        if s.kind in ("rect", "bar"):
            mask = (ys >= s.top) & (ys < s.top + s.height) & (xs >= s.left) & (xs < s.left + s.width)
        elif s.kind == "disk":
            mask = (ys - s.top) ** 2 + (xs - s.left) ** 2 <= s.radius**2
        else:
            raise ValueError(f"unknown shape kind {s.kind!r}")
        label[mask] = s.class_id
    colors = np.asarray(SYNTH_COLORS[:num_classes], dtype=np.float32)
    image = colors[label].transpose(2, 0, 1)
    return np.ascontiguousarray(image), label


def _sample_shape(rng, spec: SyntheticSpec) -> Shape:
    h, w = spec.image_size
    side = min(h, w)
    lo, hi = (max(1, int(round(f * side))) for f in spec.shape_extent)
    cls = int(rng.integers(1, spec.num_classes))
    u = rng.random()
    if u < spec.thin_prob:
        thickness = int(rng.integers(1, 4))
        length = int(rng.integers(side // 4, side * 3 // 4 + 1))
        if rng.random() < 0.5:
            return Shape("bar", cls, int(rng.integers(0, h - thickness + 1)),
                         int(rng.integers(0, w - length + 1)), thickness, length)
        return Shape("bar", cls, int(rng.integers(0, h - length + 1)),
                     int(rng.integers(0, w - thickness + 1)), length, thickness)
    if u < spec.thin_prob + (1 - spec.thin_prob) / 2:
        sh, sw = (int(v) for v in rng.integers(lo, hi + 1, size=2))
        return Shape("rect", cls, int(rng.integers(0, h - sh + 1)), int(rng.integers(0, w - sw + 1)), sh, sw)
    r = float(rng.uniform(lo, hi)) / 2
    return Shape("disk", cls, float(rng.uniform(0, h)), float(rng.uniform(0, w)), radius=r)


def sample_layout(rng, spec: SyntheticSpec) -> list[Shape]:
    lo, hi = spec.shapes_per_image
    if spec.num_classes < 2 or hi == 0:
        return []
    n = int(rng.integers(lo, hi + 1))
    return [_sample_shape(rng, spec) for _ in range(n)]


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    images: list[torch.Tensor] = field(default_factory=list)
    labels: list[torch.Tensor] = field(default_factory=list)
    layouts: list[list[Shape]] = field(default_factory=list)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, index):
        return self.images[index], self.labels[index]

    @property
    def num_classes(self):
        return self.spec.num_classes

    @property
    def class_names(self):
        return self.spec.class_names

    @property
    def palette(self):
        return self.spec.palette


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Deterministic dataset: identical specs give bit-identical tensors."""
    rng = np.random.default_rng(spec.seed)
    ds = SyntheticDataset(spec)
    for _ in range(spec.num_images):
        shapes = sample_layout(rng, spec)
        image, label = render_shapes(shapes, spec.image_size, spec.num_classes)
        noise = rng.uniform(-spec.noise, spec.noise, size=image.shape).astype(np.float32)
        image = np.clip(image + noise, 0.0, 1.0)
        ds.images.append(torch.from_numpy(image))
        ds.labels.append(torch.from_numpy(label))
        ds.layouts.append(shapes)
    return ds


def write_dataset(dataset, root, split="train"):
    """Write images/labels in the ``folder`` layout plus ``dataset.json``."""
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    meta = {
        "name": "synthetic",
        "class_names": list(dataset.class_names),
        "palette": [list(c) for c in dataset.palette],
        "void_color": [0, 0, 0],
        "ignore_index": IGNORE_INDEX,
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=2) + "\n")
    for i in range(len(dataset)):
        image, label = dataset[i]
        arr = (image.permute(1, 2, 0).numpy() * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(root / split / f"{i:05d}.png")
        encode_label(label.numpy(), root / f"{split}annot" / f"{i:05d}.png")
    return root
