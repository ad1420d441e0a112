"""Image ingestion, noise, patch corpora, synthetic data and result emission.

Grayscale images are floats on the 0..255 scale; segmentation inputs are
floats in [0, 1].  All randomness goes through ``numpy.random.default_rng``
(PCG64), seeded explicitly, so corpora are reproducible across platforms.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ContractError, FormatError

GRAY_WEIGHTS = (0.2989, 0.5870, 0.1140)


def rgb_to_gray(rgb):
    rgb = np.asarray(rgb, dtype=float)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ContractError(f"expected an H x W x 3 image, got shape {rgb.shape}")
    r, g, b = GRAY_WEIGHTS
    return r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]


def load_image(path, gray=True):
    """Load an 8-bit grayscale or RGB raster (PGM/PPM, PNG, ...).

    With ``gray=True`` the result is an H x W float array on 0..255 (RGB is
    converted with ``rgb_to_gray``); otherwise an H x W x C array in [0, 1].
    """
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode not in ("L", "RGB"):
                raise FormatError(f"{path}: unsupported mode {mode!r} (need 8-bit L or RGB)")
            im.load()
            arr = np.asarray(im, dtype=np.uint8)
    except FormatError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    data = arr.astype(float)
    if gray:
        return data if data.ndim == 2 else rgb_to_gray(data)
    if data.ndim == 2:
        data = data[..., None]
    return data / 255.0


def save_image(path, image):
    """Write an 8-bit grayscale image (values rounded and clipped to 0..255)."""
    arr = np.clip(np.rint(np.asarray(image, dtype=float)), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def add_gaussian_noise(image, sigma, seed):
    """i.i.d. Gaussian noise with standard deviation ``sigma``; not clipped."""
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    image = np.asarray(image, dtype=float)
    return image + sigma * rng.standard_normal(image.shape)


def extract_patches(image, side, count, seed):
    """``count`` patches with uniformly drawn corners, split into halves.

    Returns ``(train, test, corners)``; the first ``count // 2`` patches go to
    training and the rest to testing.
    """
    image = np.asarray(image, dtype=float)
    H, W = image.shape[:2]
    if H < side or W < side:
        raise ContractError(f"image {H}x{W} smaller than patch side {side}")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, H - side + 1, size=count)
    cols = rng.integers(0, W - side + 1, size=count)
    patches = [image[r:r + side, c:c + side].copy() for r, c in zip(rows, cols)]
    half = count // 2
    corners = list(zip(rows.tolist(), cols.tolist()))
    return patches[:half], patches[half:], corners


def make_pairs(clean, sigma, seed):
    """``(clean, noisy)`` pairs with one derived noise seed per patch."""
    seeds = np.random.SeedSequence(seed).spawn(len(clean))
    return [(x, add_gaussian_noise(x, sigma, s)) for x, s in zip(clean, seeds)]


def synthetic_image(seed, H=128, W=128):
    """Piecewise-smooth test image on 0..255: shapes over a gentle ramp."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:H, 0:W].astype(float)
    gy, gx = rng.uniform(-0.4, 0.4, size=2)
    img = 128.0 + gy * (yy - H / 2) + gx * (xx - W / 2)
    for _ in range(12):
        level = rng.uniform(20.0, 235.0)
        if rng.random() < 0.5:
            h, w = rng.integers(H // 8, H // 2), rng.integers(W // 8, W // 2)
            r, c = rng.integers(0, H - h), rng.integers(0, W - w)
            img[r:r + h, c:c + w] = level
        else:
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            ry, rx = rng.uniform(H / 16, H / 4), rng.uniform(W / 16, W / 4)
            img[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = level
    return img


def denoise_corpus(seed, count=16, side=32, sigma=25.0, H=128, W=128):
    """Training and held-out pairs cut from two different synthetic images.

    Each image gives ``count`` patches; the training set keeps the first
    half of the first image's patches and the held-out set the second half
    of the second image's, so the two sets never share pixels.
    """
    ss = np.random.SeedSequence(seed).generate_state(4)
    train_img = synthetic_image(int(ss[0]), H, W)
    test_img = synthetic_image(int(ss[1]), H, W)
    train, _, _ = extract_patches(train_img, side, 2 * count, int(ss[2]))
    _, test, _ = extract_patches(test_img, side, 2 * count, int(ss[3]))
    return make_pairs(train[:count], sigma, int(ss[2]) + 1), make_pairs(test[:count], sigma, int(ss[3]) + 1)


# -- emission -------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        if math.isnan(f):
            return "nan"
        return f
    return obj


def emit(data, path, fmt=None, columns=None):
    """Write a table (CSV) or a metrics mapping (JSON).

    CSV tables are sequences of rows (tuples or dicts) with a header row and
    floats printed with 17 significant digits.  JSON keeps insertion order;
    infinite values become the strings ``"inf"``/``"-inf"``.
    """
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    if fmt == "json":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(_jsonable(data), fh, indent=2, allow_nan=False)
            fh.write("\n")
        return
    if fmt != "csv":
        raise ContractError(f"unknown format {fmt!r}")
    rows = list(data)
    if columns is None:
        if rows and isinstance(rows[0], dict):
            columns = list(rows[0].keys())
        else:
            raise ContractError("CSV emission needs column names")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            vals = [r[c] for c in columns] if isinstance(r, dict) else list(r)
            w.writerow([_fmt(v) for v in vals])


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -- configuration --------------------------------------------------------------

@dataclass
class RunConfig:
    """Serializable run settings; JSON documents and CLI flags fill it."""

    pipeline: str = "toy"
    seed: int = 0
    out: str = "out"
    input: Optional[str] = None
    model: Optional[str] = None
    x_star: float = 0.3
    y: float = 1.5
    theta_lo: float = 0.0
    theta_hi: float = 3.0
    theta_points: int = 301
    sigma: float = 25.0
    filters: int = 3
    filter_size: int = 3
    patches: int = 16
    patch_side: int = 32
    surrogate_iterations: int = 1500
    outer_iterations: int = 4
    tv_lo: float = 0.0
    tv_hi: float = 60.0
    tv_points: int = 21
    kind: str = "bregman"
    lam: float = 1.0
    images: int = 4
    height: int = 64
    width: int = 128
    classes: int = 3
    epochs: int = 100
    timing: bool = False
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc):
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ContractError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return asdict(self)
