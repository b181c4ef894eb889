"""Seeded synthetic detection scenes with known and held-out shape classes.

Dataset layout written by :func:`build_dataset`::

    <root>/manifest.json            spec, seeds, scene list (format spikedet-dataset v1)
    <root>/images/<scene_id>.png    8-bit RGB, lossless
    <root>/annotations/train.txt    "# spikedet-annotations v1" header, then one JSON
    <root>/annotations/val.txt      object per scene (see SceneAnnotation.to_json)

Unknown-class objects are rendered in training scenes but never written to
the training annotations; validation annotations carry them with
``"unknown": true`` and no class id.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .errors import ConfigurationError, GenerationError
from .geometry import BBox, iou_matrix

ANNOTATION_HEADER = "# spikedet-annotations v1"
DATASET_FORMAT = "spikedet-dataset"
DATASET_VERSION = 1

ARCHETYPES = ("circle", "square", "triangle", "cross", "diamond", "ring", "hbar")


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    known_classes: tuple[str, ...] = ("circle", "square", "triangle")
    unknown_classes: tuple[str, ...] = ("cross", "diamond")
    size_range: tuple[int, int] = (12, 28)
    objects_range: tuple[int, int] = (1, 3)
    unknown_prob: float = 0.25
    unknown_in_train: bool = True
    background_range: tuple[int, int] = (30, 90)
    background_noise: float = 6.0
    min_gap: int = 2
    max_pair_iou: float = 0.0
    max_retries: int = 200

    def __post_init__(self) -> None:
        if set(self.known_classes) & set(self.unknown_classes):
            raise ConfigurationError("known and unknown archetypes must be disjoint")
        for name in self.known_classes + self.unknown_classes:
            if name not in ARCHETYPES:
                raise ConfigurationError(f"unknown archetype {name!r}")
        if not self.known_classes:
            raise ConfigurationError("need at least one known class")
        lo, hi = self.objects_range
        if lo < 0 or hi < lo:
            raise ConfigurationError("bad objects_range")
        if self.size_range[0] < 3 or self.size_range[1] < self.size_range[0]:
            raise ConfigurationError("bad size_range")
        if not 0 <= self.max_pair_iou <= 0.3:
            raise ConfigurationError("max_pair_iou must lie in [0, 0.3]")

    @property
    def num_classes(self) -> int:
        return len(self.known_classes)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class ObjectAnnotation:
    box: BBox
    archetype: str
    class_id: int | None  # 1..K for known classes
    unknown: bool = False

    def to_json(self) -> dict:
        d = {"box": list(self.box.as_tuple()), "archetype": self.archetype}
        if self.unknown:
            d["unknown"] = True
        else:
            d["class_id"] = self.class_id
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ObjectAnnotation":
        return cls(BBox.from_array(d["box"]), d["archetype"], d.get("class_id"), bool(d.get("unknown", False)))


@dataclass(frozen=True)
class SceneAnnotation:
    scene_id: str
    seed: int
    width: int
    height: int
    objects: tuple[ObjectAnnotation, ...] = field(default_factory=tuple)

    @property
    def known(self) -> list[ObjectAnnotation]:
        return [o for o in self.objects if not o.unknown]

    @property
    def unknown(self) -> list[ObjectAnnotation]:
        return [o for o in self.objects if o.unknown]

    def known_boxes(self) -> np.ndarray:
        return np.array([o.box.as_tuple() for o in self.known], dtype=np.float64).reshape(-1, 4)

    def known_labels(self) -> np.ndarray:
        return np.array([o.class_id for o in self.known], dtype=np.int64)

    def without_unknowns(self) -> "SceneAnnotation":
        return SceneAnnotation(self.scene_id, self.seed, self.width, self.height, tuple(self.known))

    def to_json(self) -> str:
        return json.dumps(
            {
                "scene_id": self.scene_id,
                "seed": self.seed,
                "width": self.width,
                "height": self.height,
                "objects": [o.to_json() for o in self.objects],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "SceneAnnotation":
        d = json.loads(line)
        objs = tuple(ObjectAnnotation.from_json(o) for o in d["objects"])
        return cls(d["scene_id"], int(d["seed"]), int(d["width"]), int(d["height"]), objs)


def shape_mask(archetype: str, x0: int, y0: int, size: int, image_size: int) -> np.ndarray:
    """Boolean mask of a shape inscribed in the square (x0, y0, x0+size, y0+size).

    A pixel is covered when its center lies inside the shape.
    """
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    px, py = xx + 0.5, yy + 0.5
    u = (px - x0) / size  # normalized coordinates inside the square
    v = (py - y0) / size
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if archetype == "circle":
        r = size / 2
        m = (px - (x0 + r)) ** 2 + (py - (y0 + r)) ** 2 <= r * r
    elif archetype == "square":
        m = inside
    elif archetype == "triangle":
        m = inside & (np.abs(u - 0.5) <= 0.5 * v)
    elif archetype == "cross":
        m = inside & ((np.abs(u - 0.5) <= 1 / 6) | (np.abs(v - 0.5) <= 1 / 6))
    elif archetype == "diamond":
        m = np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5
    elif archetype == "ring":
        d2 = (u - 0.5) ** 2 + (v - 0.5) ** 2
        m = (d2 <= 0.25) & (d2 >= 0.09)
    elif archetype == "hbar":
        m = inside & (np.abs(v - 0.5) <= 0.2)
    else:
        raise ConfigurationError(f"unknown archetype {archetype!r}")
    return m


def tight_box(mask: np.ndarray) -> BBox:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise GenerationError("rendered shape covers no pixel")
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _background(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    n = spec.image_size
    base = rng.integers(spec.background_range[0], spec.background_range[1] + 1, size=3).astype(np.float64)
    gx, gy = rng.uniform(-0.25, 0.25, size=2)
    yy, xx = np.mgrid[0:n, 0:n]
    grad = (gx * xx + gy * yy)[..., None]
    noise = rng.normal(0.0, spec.background_noise, size=(n, n, 3))
    return base[None, None, :] + grad + noise


def _object_color(rng: np.random.Generator) -> np.ndarray:
    c = rng.integers(90, 256, size=3).astype(np.float64)
    c[rng.integers(0, 3)] = rng.integers(170, 256)
    return c


def generate_scene(
    spec: SceneSpec, scene_seed: int, scene_id: str = "scene", archetypes: list[str] | None = None
) -> tuple[np.ndarray, SceneAnnotation]:
    """Render one scene. Returns an (H, W, 3) uint8 image and its full annotation.

    ``archetypes`` forces the object list (used by fixtures); otherwise the
    count and kinds are drawn from ``spec``.
    """
    rng = np.random.default_rng(scene_seed)
    n = spec.image_size
    img = _background(rng, spec)
    if archetypes is None:
        count = int(rng.integers(spec.objects_range[0], spec.objects_range[1] + 1))
        archetypes = []
        for _ in range(count):
            if spec.unknown_classes and rng.random() < spec.unknown_prob:
                archetypes.append(spec.unknown_classes[int(rng.integers(len(spec.unknown_classes)))])
            else:
                archetypes.append(spec.known_classes[int(rng.integers(len(spec.known_classes)))])
    objects: list[ObjectAnnotation] = []
    placed = np.zeros((0, 4))
    lo, hi = spec.size_range
    for arch in archetypes:
        for _attempt in range(spec.max_retries):
            size = int(rng.integers(lo, min(hi, n) + 1))
            if size > n:
                continue
            x0 = int(rng.integers(0, n - size + 1))
            y0 = int(rng.integers(0, n - size + 1))
            cand = np.array([[x0 - spec.min_gap, y0 - spec.min_gap, x0 + size + spec.min_gap, y0 + size + spec.min_gap]], float)
            if len(placed) == 0 or iou_matrix(cand, placed).max() <= spec.max_pair_iou:
                break
        else:
            raise GenerationError(
                f"could not place {arch!r} in scene {scene_id} (seed {scene_seed}) after {spec.max_retries} tries;"
                f" image {n}px, sizes {spec.size_range}, {len(objects)} objects already placed"
            )
        mask = shape_mask(arch, x0, y0, size, n)
        img[mask] = _object_color(rng)
        placed = np.vstack([placed, cand])
        unknown = arch in spec.unknown_classes
        cid = None if unknown else spec.known_classes.index(arch) + 1
        objects.append(ObjectAnnotation(tight_box(mask), arch, cid, unknown))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, SceneAnnotation(scene_id, int(scene_seed), n, n, tuple(objects))


def scene_seeds(seed: int, split: str, count: int) -> list[int]:
    code = {"train": 1, "val": 2, "pretrain": 3}[split]
    return [int(np.random.SeedSequence([seed, code, i]).generate_state(1)[0]) for i in range(count)]


@dataclass
class Scene:
    image: np.ndarray
    annotation: SceneAnnotation


@dataclass
class Dataset:
    spec: SceneSpec
    train: list[Scene]
    val: list[Scene]
    manifest: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes


def make_split(spec: SceneSpec, seed: int, split: str, count: int) -> list[Scene]:
    out = []
    for i, s in enumerate(scene_seeds(seed, split, count)):
        image, ann = generate_scene(spec, s, f"{split}-{i:05d}")
        if split != "val":
            if not spec.unknown_in_train and ann.unknown:
                image, ann = generate_scene(spec, s, f"{split}-{i:05d}", [o.archetype for o in ann.known])
            ann = ann.without_unknowns()
        out.append(Scene(image, ann))
    return out


def build_dataset(spec: SceneSpec, n_train: int, n_val: int, seed: int, out_dir: str | Path | None = None,
                  overwrite: bool = False) -> Dataset:
    """Generate train/val splits; persist them when ``out_dir`` is given."""
    if n_train < 1 or n_val < 1:
        raise ConfigurationError("n_train and n_val must be >= 1")
    train_seeds, val_seeds = scene_seeds(seed, "train", n_train), scene_seeds(seed, "val", n_val)
    if set(train_seeds) & set(val_seeds):
        raise GenerationError("train and val scene seeds collide; pick another dataset seed")
    ds = Dataset(spec, make_split(spec, seed, "train", n_train), make_split(spec, seed, "val", n_val))
    ds.manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "artifact_version": __version__,
        "seed": seed,
        "n_train": n_train,
        "n_val": n_val,
        "spec": spec.to_dict(),
        "scenes": {
            "train": [[s.annotation.scene_id, s.annotation.seed] for s in ds.train],
            "val": [[s.annotation.scene_id, s.annotation.seed] for s in ds.val],
        },
    }
    if out_dir is not None:
        write_dataset(ds, out_dir, overwrite)
    return ds


def write_dataset(ds: Dataset, out_dir: str | Path, overwrite: bool = False) -> Path:
    root = Path(out_dir)
    if (root / "manifest.json").exists() and not overwrite:
        raise FileExistsError(f"dataset already exists at {root} (pass overwrite to replace it)")
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for split, scenes in (("train", ds.train), ("val", ds.val)):
        lines = [ANNOTATION_HEADER]
        for s in scenes:
            Image.fromarray(s.image, "RGB").save(root / "images" / f"{s.annotation.scene_id}.png")
            lines.append(s.annotation.to_json())
        (root / "annotations" / f"{split}.txt").write_text("\n".join(lines) + "\n")
    (root / "manifest.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True) + "\n")
    return root


def read_annotations(path: str | Path) -> list[SceneAnnotation]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != ANNOTATION_HEADER:
        raise ConfigurationError(f"{path}: missing or unsupported annotation header")
    return [SceneAnnotation.from_json(l) for l in lines[1:] if l.strip()]


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("format") != DATASET_FORMAT or manifest.get("version") != DATASET_VERSION:
        raise ConfigurationError(f"{root}: not a {DATASET_FORMAT} v{DATASET_VERSION} directory")
    spec = SceneSpec.from_dict(manifest["spec"])
    splits = {}
    for split in ("train", "val"):
        anns = read_annotations(root / "annotations" / f"{split}.txt")
        splits[split] = [
            Scene(np.asarray(Image.open(root / "images" / f"{a.scene_id}.png").convert("RGB")), a) for a in anns
        ]
    return Dataset(spec, splits["train"], splits["val"], manifest)
