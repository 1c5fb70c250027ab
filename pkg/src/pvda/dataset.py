"""Image samples, University-1652 loading, and the synthetic toy benchmark."""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .config import ConfigError, ToyConfig

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp")


class DatasetError(RuntimeError):
    """Fatal problem with a dataset tree or a sampling request."""


class View(enum.IntEnum):
    UAV = 0
    SATELLITE = 1


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    QUERY = "QUERY"
    GALLERY = "GALLERY"


@dataclass
class ImageSample:
    """One image: ``pixels`` is a float tensor (3, H, W) in [0, 1], or None until loaded from disk."""

    pixels: torch.Tensor | None
    view: View
    location_id: int
    source_path: str | None = None
    image_size: int | None = None

    def image(self) -> torch.Tensor:
        if self.pixels is not None:
            return self.pixels
        if self.source_path is None:
            raise DatasetError("sample has neither pixels nor a source path")
        return read_image(self.source_path, self.image_size)


@dataclass
class Dataset:
    samples: list[ImageSample]
    num_locations: int
    split: Split

    def __post_init__(self) -> None:
        for s in self.samples:
            if not 0 <= s.location_id < self.num_locations:
                raise DatasetError(f"location_id {s.location_id} outside [0, {self.num_locations})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def views(self) -> np.ndarray:
        return np.array([int(s.view) for s in self.samples], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.location_id for s in self.samples], dtype=np.int64)

    def of_view(self, view: View) -> "Dataset":
        return Dataset([s for s in self.samples if s.view == view], self.num_locations, self.split)

    def images(self, indices=None) -> torch.Tensor:
        idx = range(len(self.samples)) if indices is None else indices
        return torch.stack([self.samples[i].image() for i in idx])


def read_image(path: str | Path, size: int | None) -> torch.Tensor:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


# University-1652 subtrees: split name -> (part, [(subdir, view)], Split)
U1652_SPLITS = {
    "train": ("train", [("drone", View.UAV), ("satellite", View.SATELLITE)], Split.TRAIN),
    "query_drone": ("test", [("query_drone", View.UAV)], Split.QUERY),
    "gallery_satellite": ("test", [("gallery_satellite", View.SATELLITE)], Split.GALLERY),
    "query_satellite": ("test", [("query_satellite", View.SATELLITE)], Split.QUERY),
    "gallery_drone": ("test", [("gallery_drone", View.UAV)], Split.GALLERY),
}
_TEST_SUBDIRS = ("query_drone", "gallery_satellite", "query_satellite", "gallery_drone")


@dataclass
class LoadReport:
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"counts": self.counts, "skipped": self.skipped}, indent=2))


def _class_dirs(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.is_dir())


def load_university1652(root: str | Path, split: str, image_size: int = 256,
                        report: LoadReport | None = None) -> Dataset:
    """Load one split of a University-1652 style tree.

    Location ids follow the lexicographic order of class directory names.  For
    test splits the order is taken over the union of all test subtrees, so
    query and gallery ids agree.  Pixels are decoded lazily; every file is
    opened once here so unreadable images are skipped up front.
    """
    if split not in U1652_SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {sorted(U1652_SPLITS)}")
    part, subdirs, split_kind = U1652_SPLITS[split]
    root = Path(root)
    part_dir = root / part
    if not part_dir.is_dir():
        raise DatasetError(f"missing directory: {part_dir}")

    id_sources = [s for s, _ in subdirs] if part == "train" else list(_TEST_SUBDIRS)
    names: set[str] = set()
    for sub in id_sources:
        d = part_dir / sub
        if d.is_dir():
            names.update(p.name for p in _class_dirs(d))
    if not names:
        raise DatasetError(f"no class directories under {part_dir}")
    class_to_id = {name: i for i, name in enumerate(sorted(names))}

    report = report if report is not None else LoadReport()
    samples: list[ImageSample] = []
    for sub, view in subdirs:
        d = part_dir / sub
        if not d.is_dir():
            raise DatasetError(f"missing directory: {d}")
        classes = _class_dirs(d)
        if not classes:
            raise DatasetError(f"no class directories under {d}")
        n_loaded = 0
        for cdir in classes:
            files = sorted(p for p in cdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise DatasetError(f"class directory has no images: {cdir}")
            for f in files:
                try:
                    with Image.open(f) as im:
                        im.verify()
                except Exception as exc:  # PIL raises a zoo of types here
                    log.warning("skipping unreadable image %s (%s)", f, exc)
                    report.skipped.append(str(f))
                    continue
                samples.append(ImageSample(None, view, class_to_id[cdir.name], str(f), image_size))
                n_loaded += 1
        report.counts.setdefault(split, {})[view.name] = n_loaded
    return Dataset(samples, len(class_to_id), split_kind)


# ---------------------------------------------------------------------------
# synthetic data

def _location_pattern(rng: np.random.Generator, size: int, contrast: float) -> torch.Tensor:
    """Smooth random RGB pattern around mid-grey: a coarse random grid upsampled bicubically."""
    coarse = torch.from_numpy(rng.uniform(-0.5, 0.5, size=(1, 3, 5, 5)).astype(np.float32))
    pat = F.interpolate(coarse, size=(size, size), mode="bicubic", align_corners=True)[0]
    return 0.5 + contrast * pat.clamp(-0.5, 0.5)


# per-channel tint of the UAV view at full strength; with the pattern contrast
# bounded this never saturates, so the shift is an exact constant offset
UAV_TINT = torch.tensor([0.2, -0.2, 0.15])


def uav_transform(img: torch.Tensor, strength: float) -> torch.Tensor:
    """Global, location-independent UAV appearance shift."""
    if strength == 0.0:
        return img
    return img + (strength * UAV_TINT)[:, None, None]


def _render(canvas: torch.Tensor, view: View, cfg: ToyConfig, rng: np.random.Generator) -> torch.Tensor:
    """Crop the location canvas (centre for satellite, random offset for UAV) and apply the view shift.

    The UAV crop offset reaches ``uav_jitter * view_shift_strength`` pixels, capped at ``uav_jitter``.
    """
    j, size = cfg.uav_jitter, cfg.image_size
    dy = dx = j
    reach = int(round(j * cfg.view_shift_strength)) if view == View.UAV else 0
    reach = min(reach, j)
    if reach:
        dy, dx = (int(v) for v in rng.integers(j - reach, j + reach + 1, size=2))
    img = canvas[:, dy:dy + size, dx:dx + size]
    if view == View.UAV:
        img = uav_transform(img, cfg.view_shift_strength)
    noise = torch.from_numpy(rng.normal(0.0, cfg.noise_std, size=img.shape).astype(np.float32))
    return (img + noise).clamp(0.0, 1.0)


def generate_toy_dataset(config: ToyConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Synthetic cross-view benchmark.

    Train uses location ids ``[0, L)``; query (UAV) and gallery (satellite)
    use the unseen ids ``[L, L + E)``, and the gallery additionally holds
    ``num_distractors`` satellite images of locations no query shows.
    Each location has one satellite image and ``uav_per_location`` UAV images.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_train, n_eval, n_dis = config.num_locations, config.num_eval_locations, config.num_distractors
    total = n_train + n_eval + n_dis
    canvas = config.image_size + 2 * config.uav_jitter
    patterns = [_location_pattern(rng, canvas, config.pattern_contrast) for _ in range(total)]

    def make(loc: int, view: View) -> ImageSample:
        return ImageSample(_render(patterns[loc], view, config, rng), view, loc, None, config.image_size)

    train, query, gallery = [], [], []
    for loc in range(total):
        if loc < n_train:
            train.append(make(loc, View.SATELLITE))
            train.extend(make(loc, View.UAV) for _ in range(config.uav_per_location))
        elif loc < n_train + n_eval:
            gallery.append(make(loc, View.SATELLITE))
            query.extend(make(loc, View.UAV) for _ in range(config.uav_per_location))
        else:
            gallery.append(make(loc, View.SATELLITE))
    return (
        Dataset(train, n_train, Split.TRAIN),
        Dataset(query, total, Split.QUERY),
        Dataset(gallery, total, Split.GALLERY),
    )


def write_university1652_tree(root: str | Path, train: Dataset, query: Dataset, gallery: Dataset) -> None:
    """Write datasets as a University-1652 style PNG tree (transposed test roles included)."""
    root = Path(root)

    def dump(ds: Dataset, subdir: str, view: View | None = None) -> None:
        counters: dict[int, int] = {}
        for s in ds.samples:
            if view is not None and s.view != view:
                continue
            d = root / subdir / f"{s.location_id:04d}"
            d.mkdir(parents=True, exist_ok=True)
            n = counters.get(s.location_id, 0)
            counters[s.location_id] = n + 1
            arr = (s.image().permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
            Image.fromarray(arr).save(d / f"{n:03d}.png")

    dump(train, "train/drone", View.UAV)
    dump(train, "train/satellite", View.SATELLITE)
    dump(query, "test/query_drone")
    dump(gallery, "test/gallery_satellite")
    query_locs = {s.location_id for s in query.samples}
    dump(Dataset([s for s in gallery.samples if s.location_id in query_locs], gallery.num_locations, Split.QUERY),
         "test/query_satellite")
    dump(query, "test/gallery_drone")


# ---------------------------------------------------------------------------
# batching

def sample_batch_indices(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of a view-balanced batch: half UAV, half satellite (odd slot drawn at random)."""
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2 so both views are present")
    views = dataset.views
    uav = np.flatnonzero(views == View.UAV)
    sat = np.flatnonzero(views == View.SATELLITE)
    if len(uav) == 0 or len(sat) == 0:
        raise ConfigError("dataset must contain both UAV and satellite images for training")
    n_uav = batch_size // 2
    if batch_size % 2:
        n_uav += int(rng.integers(0, 2))
    n_sat = batch_size - n_uav
    pick_u = rng.choice(uav, size=n_uav, replace=len(uav) < n_uav)
    pick_s = rng.choice(sat, size=n_sat, replace=len(sat) < n_sat)
    return np.concatenate([pick_u, pick_s])


def sample_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> list[ImageSample]:
    return [dataset.samples[i] for i in sample_batch_indices(dataset, batch_size, rng)]
