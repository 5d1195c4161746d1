"""Dataset loading, preprocessing, pair sampling and the synthetic toy pedestrian set."""
from __future__ import annotations

import colorsys
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .networks import rgb_to_gray

log = logging.getLogger(__name__)

MARKET_RE = re.compile(r"^(-?\d+)_c(\d+)s(\d+)_(\d+)_(\d+)\.(?:jpg|jpeg|png)$", re.IGNORECASE)
CAMERA_RE = re.compile(r"_c(\d+)")
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}
LAYOUTS = ("market_names", "folder_per_id", "manifest")
JUNK = -1


class CorruptImageError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass
class PedestrianImage:
    pixels: torch.Tensor  # 3xHxW in [0, 1]
    identity: int  # contiguous label in [1, K], or -1 for junk
    camera: int
    path: str
    raw_identity: int | None = None

    @property
    def is_junk(self) -> bool:
        return self.identity == JUNK


@dataclass(frozen=True)
class Record:
    path: str
    identity: int
    camera: int
    raw_identity: int


@dataclass
class TrainingPair:
    first: PedestrianImage
    second: PedestrianImage
    mode: str


def preprocess(img, target: tuple[int, int], train_mode: bool = False,
               rng: np.random.Generator | None = None) -> torch.Tensor:
    """Decode, resize to ``target`` (H, W) and return a 3xHxW float tensor in [0, 1].

    ``img`` may be a path, a PIL image or an HxWx3 uint8 array. In train mode
    the image is flipped horizontally with probability 0.5 (needs ``rng``).
    Channel mean/std normalisation happens inside the encoders.
    """
    try:
        if isinstance(img, (str, Path)):
            with Image.open(img) as handle:
                pil = handle.convert("RGB")
        elif isinstance(img, np.ndarray):
            pil = Image.fromarray(img).convert("RGB")
        else:
            pil = img.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise CorruptImageError(f"cannot decode {img}: {exc}") from exc
    h, w = target
    if pil.size != (w, h):
        pil = pil.resize((w, h), Image.BILINEAR)
    arr = np.asarray(pil, dtype=np.float32) / 255.0
    out = torch.from_numpy(arr.copy()).permute(2, 0, 1).contiguous()
    if train_mode:
        if rng is None:
            raise ValueError("train_mode preprocessing needs an rng")
        if rng.random() < 0.5:
            out = out.flip(-1)
    return out


def to_grayscale(img) -> torch.Tensor:
    """Luminance (ITU-R 601 weights) of a PedestrianImage or 3xHxW tensor, shape 1xHxW."""
    pixels = img.pixels if isinstance(img, PedestrianImage) else img
    return rgb_to_gray(pixels)


class ReidDataset(torch.utils.data.Dataset):
    """Immutable list of labelled records; pixels are decoded on access and optionally cached."""

    def __init__(self, records: Sequence[Record], size: tuple[int, int], split: str = "train",
                 cache: bool = True):
        self.records = tuple(records)
        self.size = tuple(size)
        self.split = split
        self._cache: dict[int, torch.Tensor] | None = {} if cache else None
        ids = sorted({r.identity for r in self.records if r.identity != JUNK})
        self.identities = tuple(ids)
        self._by_id: dict[int, tuple[int, ...]] = {
            i: tuple(n for n, r in enumerate(self.records) if r.identity == i) for i in ids
        }

    @property
    def num_identities(self) -> int:
        return len(self.identities)

    @property
    def num_images(self) -> int:
        return len(self.records)

    def __len__(self):
        return len(self.records)

    def indices_of(self, identity: int) -> tuple[int, ...]:
        return self._by_id.get(identity, ())

    def pixels(self, index: int) -> torch.Tensor:
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        out = preprocess(self.records[index].path, self.size)
        if self._cache is not None:
            self._cache[index] = out
        return out

    def __getitem__(self, index: int) -> PedestrianImage:
        r = self.records[index]
        return PedestrianImage(self.pixels(index), r.identity, r.camera, r.path, r.raw_identity)

    def stack(self, indices=None) -> torch.Tensor:
        indices = range(len(self)) if indices is None else indices
        return torch.stack([self.pixels(i) for i in indices])

    def labels(self) -> np.ndarray:
        return np.array([r.identity for r in self.records], dtype=np.int64)

    def raw_labels(self) -> np.ndarray:
        return np.array([r.raw_identity for r in self.records], dtype=np.int64)

    def cameras(self) -> np.ndarray:
        return np.array([r.camera for r in self.records], dtype=np.int64)


def _scan_market(root: Path):
    for path in sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        m = MARKET_RE.match(path.name)
        if not m:
            log.warning("skipping unparsable file name %s", path.name)
            continue
        yield str(path), int(m.group(1)), int(m.group(2))


def _scan_folders(root: Path):
    for folder in sorted(p for p in root.iterdir() if p.is_dir()):
        try:
            raw = int(folder.name)
        except ValueError:
            log.warning("skipping non-numeric identity folder %s", folder.name)
            continue
        for path in sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            m = CAMERA_RE.search(path.stem)
            yield str(path), raw, int(m.group(1)) if m else 1


def _scan_manifest(root: Path):
    manifest = root if root.is_file() else root / "manifest.tsv"
    base = manifest.parent
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            log.warning("manifest line %d: expected 3 tab-separated fields", lineno)
            continue
        path = Path(parts[0])
        if not path.is_absolute():
            path = base / path
        yield str(path), int(parts[1]), int(parts[2])


def load_dataset(root, layout: str = "folder_per_id", size: tuple[int, int] = (256, 128),
                 split: str = "train", relabel: bool = True, verify: bool = False,
                 cache: bool = True) -> ReidDataset:
    """Scan ``root`` in one of the supported layouts.

    With ``relabel`` the identities are mapped onto 1..K in sorted order of
    their raw ids; junk images (raw id -1) are kept with identity -1. Query and
    gallery splits should use ``relabel=False`` so their labels stay comparable.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if layout == "market_names":
        rows = list(_scan_market(root))
    elif layout == "folder_per_id":
        rows = list(_scan_folders(root))
    elif layout == "manifest":
        rows = list(_scan_manifest(root))
    else:
        raise ValueError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if verify:
        kept = []
        for row in rows:
            try:
                with Image.open(row[0]) as handle:
                    handle.convert("RGB")
            except (UnidentifiedImageError, OSError):
                log.warning("skipping corrupt image %s", row[0])
                continue
            kept.append(row)
        rows = kept
    raw_ids = sorted({raw for _, raw, _ in rows if raw != JUNK})
    if not raw_ids:
        raise ValueError(f"no identities found under {root}")
    mapping = {raw: n + 1 for n, raw in enumerate(raw_ids)} if relabel else {raw: raw for raw in raw_ids}
    mapping[JUNK] = JUNK
    records = [Record(path, mapping[raw], cam, raw) for path, raw, cam in rows]
    return ReidDataset(records, size, split, cache=cache)


def sample_pair(ds: ReidDataset, mode: str, rng: np.random.Generator) -> TrainingPair:
    if mode == "same_id":
        eligible = [i for i in ds.identities if len(ds.indices_of(i)) >= 2]
        if not eligible:
            raise SamplingError("same_id sampling needs an identity with at least two images")
        ident = eligible[rng.integers(len(eligible))]
        a, b = rng.choice(ds.indices_of(ident), size=2, replace=False)
    elif mode == "cross_id":
        if ds.num_identities < 2:
            raise SamplingError("cross_id sampling needs at least two identities")
        i, j = rng.choice(ds.identities, size=2, replace=False)
        pool_i, pool_j = ds.indices_of(int(i)), ds.indices_of(int(j))
        a = pool_i[rng.integers(len(pool_i))]
        b = pool_j[rng.integers(len(pool_j))]
    else:
        raise ValueError(f"unknown pair mode {mode!r}")
    return TrainingPair(ds[int(a)], ds[int(b)], mode)


def sample_identity_batch(ds: ReidDataset, batch_size: int, rng: np.random.Generator,
                          instances: int = 2) -> list[int]:
    """One identity-balanced batch: ``batch_size // instances`` ids x ``instances`` images.

    Positions ``n`` and ``n ^ 1`` share an identity (same-id partner) and
    rolling the batch by ``instances`` lands on a different identity
    (cross-id partner).
    """
    if instances != 2:
        raise ValueError("only two instances per identity are supported")
    if batch_size % instances:
        raise ValueError("batch_size must be a multiple of instances")
    per_batch = batch_size // instances
    eligible = [i for i in ds.identities if len(ds.indices_of(i)) >= instances]
    if len(eligible) < max(per_batch, 2):
        raise SamplingError(f"need at least {max(per_batch, 2)} identities with "
                            f"{instances}+ images, found {len(eligible)}")
    batch = []
    for ident in rng.choice(eligible, size=per_batch, replace=False):
        batch.extend(int(v) for v in rng.choice(ds.indices_of(int(ident)), size=instances, replace=False))
    return batch


def identity_batches(ds: ReidDataset, batch_size: int, rng: np.random.Generator,
                     instances: int = 2) -> Iterator[list[int]]:
    while True:
        yield sample_identity_batch(ds, batch_size, rng, instances)


# ---------------------------------------------------------------------------
# synthetic pedestrians

def _hue_rgb(h: float, s: float = 0.85, v: float = 0.9) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float32)


def identity_colors(ids: int, seed: int) -> list[tuple[np.ndarray, np.ndarray, int]]:
    """(torso colour, leg colour, torso half-width delta) per identity."""
    rng = np.random.default_rng([seed, 1])
    out = []
    for n in range(ids):
        hue = n / ids + rng.uniform(-0.03, 0.03)
        out.append((_hue_rgb(hue), _hue_rgb(hue + 0.5 + rng.uniform(-0.1, 0.1), 0.7, 0.6),
                    int(rng.integers(0, 2))))
    return out


def draw_pedestrian(size: tuple[int, int], torso, legs, build: int, rng: np.random.Generator) -> np.ndarray:
    """Render one HxWx3 uint8 image: gray background with a floor band, head, torso and legs."""
    h, w = size
    # the structure encoder sees instance-normalised gray, so keep the mean
    # level near constant and put the per-image variation in spatial layout
    level = rng.uniform(0.45, 0.55)
    slope = rng.uniform(-0.2, 0.2)
    rows = np.linspace(-0.5, 0.5, h, dtype=np.float32)[:, None]
    bg = level + slope * rows + np.zeros((1, w), np.float32)
    floor = int(round(h * rng.uniform(0.8, 0.9)))
    bg[floor:] *= 0.75
    bg = np.clip(bg, 0, 1)
    img = np.repeat(bg[:, :, None], 3, axis=2)
    sy, sx = h / 64.0, w / 32.0
    cx = int(round(w / 2 + rng.uniform(-6, 6) * sx))
    top = int(round(rng.uniform(3, 9) * sy))
    half = int(round((5 + build) * sx))
    head_r = max(1, int(round(3 * sx)))
    head_top, torso_top = top, top + int(round(7 * sy))
    legs_top = torso_top + int(round(20 * sy))
    bottom = min(h - 1, legs_top + int(round(rng.uniform(20, 26) * sy)))
    spread = int(round(rng.uniform(0, 3) * sx))
    leg_w = max(1, int(round(3 * sx)))
    skin = np.array([0.85, 0.7, 0.55], np.float32)
    img[head_top:head_top + 2 * head_r + 1, max(0, cx - head_r):cx + head_r + 1] = skin
    img[torso_top:legs_top, max(0, cx - half):cx + half] = torso
    img[legs_top:bottom, max(0, cx - spread - leg_w - 1):max(0, cx - spread)] = legs
    img[legs_top:bottom, cx + spread:cx + spread + leg_w + 1] = legs
    img = img + rng.normal(0, 0.01, img.shape).astype(np.float32)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_toy_dataset(out_dir, ids: int = 4, imgs_per_id: int = 8, size: tuple[int, int] = (64, 32),
                     seed: int = 0, cameras: int = 2, force: bool = False) -> Path:
    """Write a deterministic folder-per-id toy set (plus ``manifest.tsv``).

    Identity fixes the garment colours and build; each image draws its own
    position, leg pose and background. Cameras alternate so every identity is
    seen from every camera.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} is not empty (use force to overwrite)")
        for path in sorted(out.rglob("*"), reverse=True):
            path.unlink() if path.is_file() else path.rmdir()
    out.mkdir(parents=True, exist_ok=True)
    palette = identity_colors(ids, seed)
    lines = []
    for n in range(ids):
        torso, legs, build = palette[n]
        folder = out / f"{n + 1:04d}"
        folder.mkdir()
        for k in range(imgs_per_id):
            rng = np.random.default_rng([seed, 2, n, k])
            cam = k % cameras + 1
            name = f"{n + 1:04d}_c{cam}s1_{k:06d}_00.png"
            Image.fromarray(draw_pedestrian(size, torso, legs, build, rng)).save(folder / name)
            lines.append(f"{folder.name}/{name}\t{n + 1}\t{cam}")
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n")
    return out
