"""Manifests, PGM image IO, augmentation, synthetic data and k-fold splits."""

from __future__ import annotations

import csv
import hashlib
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, TypeVar

import numpy as np

from .encoder import VA_MAX

MANIFEST_COLUMNS = ("id", "hor_path", "ver_path", "pre_va", "post_va")

Item = TypeVar("Item")


class DataError(ValueError):
    """Malformed manifest, image or dataset."""


@dataclass
class SampleRecord:
    id: str
    pre_va: float
    post_va: float
    hor_path: Optional[Path] = None
    ver_path: Optional[Path] = None
    hor_image: Optional[np.ndarray] = None
    ver_image: Optional[np.ndarray] = None


# -- PGM ---------------------------------------------------------------------

_HEADER = re.compile(rb"P5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM as a uint8 array of shape (H, W)."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise DataError(f"{path}: unsupported PGM magic {raw[:2]!r}, expected P5")
    m = _HEADER.match(raw)
    if m is None:
        raise DataError(f"{path}: malformed PGM header")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} unsupported, expected 255")
    payload = raw[m.end():]
    if len(payload) < width * height:
        raise DataError(f"{path}: truncated payload ({len(payload)} of {width * height} bytes)")
    return np.frombuffer(payload[: width * height], dtype=np.uint8).reshape(height, width)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a [0, 1] float image (or uint8 array) as binary PGM."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes())


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize; same-size input is returned unchanged."""
    H, W = img.shape
    h, w = size
    if (H, W) == (h, w):
        return img.copy()

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, fy = coords(h, H)
    x0, x1, fx = coords(w, W)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def load_image(path, size: Optional[tuple[int, int]] = (64, 64)) -> np.ndarray:
    img = read_pgm(path).astype(np.float64) / 255.0
    return resize_bilinear(img, tuple(size)) if size is not None else img


# -- manifest ----------------------------------------------------------------

def _parse_va(value: str, column: str, row: int) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise DataError(f"row {row}: {column}={value!r} is not a number") from None
    if not math.isfinite(v) or not 0.0 <= v <= VA_MAX:
        raise DataError(f"row {row}: {column}={v} outside [0, {VA_MAX}]")
    return v


def load_manifest(path) -> list[SampleRecord]:
    """Parse ``id,hor_path,ver_path,pre_va,post_va``; image paths resolve relative to the manifest.

    Rows are numbered from 1 (the first data row) in error messages.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    records: list[SampleRecord] = []
    seen: set[str] = set()
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        for row_no, row in enumerate(reader, start=1):
            sid = (row["id"] or "").strip()
            if not sid:
                raise DataError(f"row {row_no}: empty id")
            if sid in seen:
                raise DataError(f"row {row_no}: duplicate id {sid!r}")
            seen.add(sid)
            rec = SampleRecord(
                id=sid,
                pre_va=_parse_va(row["pre_va"], "pre_va", row_no),
                post_va=_parse_va(row["post_va"], "post_va", row_no),
                hor_path=root / row["hor_path"],
                ver_path=root / row["ver_path"],
            )
            for p in (rec.hor_path, rec.ver_path):
                if not p.is_file():
                    raise DataError(f"row {row_no}: image file not found: {p}")
            records.append(rec)
    return records


def write_manifest(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r[k] for k in MANIFEST_COLUMNS})


@dataclass
class Dataset:
    """Images and VA values held as aligned arrays."""

    ids: list[str]
    hor: np.ndarray  # (N, H, W)
    ver: np.ndarray
    pre_va: np.ndarray  # (N,)
    post_va: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset([self.ids[i] for i in idx], self.hor[idx], self.ver[idx], self.pre_va[idx], self.post_va[idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.ids).encode())
        for arr in (self.hor, self.ver, self.pre_va, self.post_va):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def load_dataset(manifest, image_size: tuple[int, int] = (64, 64)) -> Dataset:
    records = load_manifest(manifest)
    if not records:
        raise DataError(f"{manifest}: no samples")
    hor = np.stack([load_image(r.hor_path, image_size) for r in records])
    ver = np.stack([load_image(r.ver_path, image_size) for r in records])
    return Dataset(
        [r.id for r in records],
        hor,
        ver,
        np.array([r.pre_va for r in records]),
        np.array([r.post_va for r in records]),
    )


# -- augmentation ------------------------------------------------------------

@dataclass(frozen=True)
class AugmentationPolicy:
    """Random spatial and photometric jitter.

    The spatial draw (rotation angle, flip, mirror) is shared by both views of
    a sample; brightness and contrast are drawn per view.  Grayscale images
    have no colour to drop, so contrast jitter stands in for random
    gray-scale.  Defaults are plain engineering choices.
    """

    rotation_deg: float = 15.0
    flip_prob: float = 0.5
    mirror_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    @property
    def is_identity(self) -> bool:
        return not (self.rotation_deg or self.flip_prob or self.mirror_prob or self.brightness or self.contrast)


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre with bilinear sampling and zero fill."""
    if degrees == 0:
        return img
    H, W = img.shape
    th = math.radians(degrees)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    sy = math.cos(th) * dy + math.sin(th) * dx + cy
    sx = -math.sin(th) * dy + math.cos(th) * dx + cx
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    out = np.zeros_like(img, dtype=np.float64)
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            yi, xi = y0 + oy, x0 + ox
            ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
            vals = np.where(ok, img[np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)], 0.0)
            out += wy * wx * vals
    return out


def flip(img: np.ndarray) -> np.ndarray:
    """Upside-down (vertical) flip."""
    return img[::-1, :].copy()


def mirror(img: np.ndarray) -> np.ndarray:
    """Left-right (horizontal) flip."""
    return img[:, ::-1].copy()


def augment(hor: np.ndarray, ver: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator):
    """Augment one sample's view pair; returns new (hor, ver)."""
    if policy.is_identity:
        return hor, ver
    angle = rng.uniform(-policy.rotation_deg, policy.rotation_deg) if policy.rotation_deg else 0.0
    do_flip = rng.random() < policy.flip_prob
    do_mirror = rng.random() < policy.mirror_prob
    out = []
    for img in (hor, ver):
        img = rotate(img, angle)
        if do_flip:
            img = flip(img)
        if do_mirror:
            img = mirror(img)
        if policy.brightness:
            img = img + rng.uniform(-policy.brightness, policy.brightness)
        if policy.contrast:
            c = rng.uniform(1.0 - policy.contrast, 1.0 + policy.contrast)
            img = img.mean() + c * (img - img.mean())
        out.append(np.clip(img, 0.0, 1.0))
    return out[0], out[1]


def sample_rng(seed: int, step: int, index: int) -> np.random.Generator:
    """Per-sample generator that does not depend on batch order."""
    return np.random.default_rng([seed, step, index])


# -- synthetic data ----------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    noise_std: float = 0.02
    blob_sigma: float = 4.0
    pixel_noise: float = 0.02
    coef_hor: float = 0.4
    coef_ver: float = 0.4
    coef_pre: float = 0.3


def planted_post_va(u, v, pre_va, eps, cfg: SynthConfig = SynthConfig()):
    """Ground-truth postoperative VA of the synthetic generator."""
    raw = cfg.coef_hor * np.asarray(u) + cfg.coef_ver * np.asarray(v) + cfg.coef_pre * np.asarray(pre_va) + eps
    return np.clip(raw, 0.0, VA_MAX)


def render_blob(center_y: float, center_x: float, size: int, sigma: float, rng: np.random.Generator, pixel_noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    blob = np.exp(-((yy - center_y) ** 2 + (xx - center_x) ** 2) / (2 * sigma**2))
    img = 0.1 + 0.8 * blob + rng.normal(0.0, pixel_noise, (size, size))
    # quantize like an 8-bit file so in-memory and on-disk datasets agree
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class SyntheticData:
    dataset: Dataset
    latents: np.ndarray  # (N, 3): u, v, eps
    manifest: Optional[Path] = None


def generate_synthetic(count: int, seed: int, cfg: SynthConfig = SynthConfig(), out_dir=None) -> SyntheticData:
    """Two-view data where the target needs both views.

    The horizontal view holds a blob whose x position encodes ``u``, the
    vertical view a blob whose y position encodes ``v``; the target is
    ``clip(0.4 u + 0.4 v + 0.3 pre_va + eps)``.  A predictor seeing one view
    only is left with the variance of the other term (0.4^2 / 12).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    n = cfg.image_size
    margin = n / 8.0
    span = n - 2 * margin
    u = rng.random(count)
    v = rng.random(count)
    # rounded to 6 decimals so the manifest text round-trips exactly
    pre = np.round(rng.uniform(0.1, 0.9, count), 6)
    eps = rng.normal(0.0, cfg.noise_std, count)
    post = np.round(planted_post_va(u, v, pre, eps, cfg), 6)
    centre = (n - 1) / 2.0
    hor = np.stack([render_blob(centre, margin + u[i] * span, n, cfg.blob_sigma, rng, cfg.pixel_noise) for i in range(count)])
    ver = np.stack([render_blob(margin + v[i] * span, centre, n, cfg.blob_sigma, rng, cfg.pixel_noise) for i in range(count)])
    ids = [f"s{i:05d}" for i in range(count)]
    data = SyntheticData(Dataset(ids, hor, ver, pre, post), np.stack([u, v, eps], axis=1))
    if out_dir is not None:
        data.manifest = write_dataset(data.dataset, out_dir)
        with (Path(out_dir) / "latents.csv").open("w", encoding="utf-8") as fh:
            fh.write("id,u,v,eps\n")
            for sid, (a, b, e) in zip(ids, data.latents):
                fh.write(f"{sid},{a!r},{b!r},{e!r}\n")
    return data


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, sid in enumerate(ds.ids):
        hp, vp = f"images/{sid}_hor.pgm", f"images/{sid}_ver.pgm"
        write_pgm(out / hp, ds.hor[i])
        write_pgm(out / vp, ds.ver[i])
        rows.append({"id": sid, "hor_path": hp, "ver_path": vp, "pre_va": f"{ds.pre_va[i]:.6f}", "post_va": f"{ds.post_va[i]:.6f}"})
    manifest = out / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest


# -- cross-validation --------------------------------------------------------

def kfold_split(items: Sequence[Item], k: int, seed: int) -> list[tuple[list[Item], list[Item]]]:
    """Seeded shuffle into k folds whose sizes differ by at most one."""
    n = len(items)
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"need at least k={k} items, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    out = []
    for f in range(k):
        test = [items[i] for i in folds[f]]
        train = [items[i] for g in range(k) if g != f for i in folds[g]]
        out.append((train, test))
    return out
