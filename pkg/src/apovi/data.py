"""Tasks, synthetic task generators, IDX image files and the interpolation baseline."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, FormatError, PSDError, TruncationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_MAX_IDX_ELEMENTS = 1 << 34


@dataclass
class Task:
    """One dataset: inputs ``X (N, D)``, outputs ``Y (N, P)``, optional context mask."""

    X: np.ndarray
    Y: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X.reshape(-1, 1)
        if self.Y.ndim == 1:
            self.Y = self.Y.reshape(-1, 1)
        if self.X.shape[0] != self.Y.shape[0]:
            raise DataError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
            if self.mask.shape[0] != self.X.shape[0]:
                raise DataError("mask length does not match the number of rows")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def in_dim(self) -> int:
        return self.X.shape[1]

    @property
    def out_dim(self) -> int:
        return self.Y.shape[1]

    def subset(self, idx) -> "Task":
        return Task(self.X[idx], self.Y[idx])

    def permuted(self, perm) -> "Task":
        return Task(self.X[perm], self.Y[perm], None if self.mask is None else self.mask[perm])

    def context(self) -> "Task":
        """Rows selected by the mask (all rows when there is no mask)."""
        return self if self.mask is None else Task(self.X[self.mask], self.Y[self.mask])

    @classmethod
    def empty(cls, in_dim: int, out_dim: int) -> "Task":
        return cls(np.zeros((0, in_dim)), np.zeros((0, out_dim)))


MetaDataset = list  # a list of Task


def union(context: Task, target: Task) -> Task:
    """Target rows plus any context rows not already present in the target."""
    seen = {tuple(r) for r in np.concatenate([target.X, target.Y], axis=1)}
    extra = [i for i, r in enumerate(np.concatenate([context.X, context.Y], axis=1)) if tuple(r) not in seen]
    if not extra:
        return Task(target.X, target.Y)
    return Task(np.concatenate([target.X, context.X[extra]]), np.concatenate([target.Y, context.Y[extra]]))


# ---------------------------------------------------------------------------
# GP prior samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "se"
    lengthscale: float = 0.5
    variance: float = 1.0
    period: float = 1.0

    def __post_init__(self):
        if self.kind not in ("se", "periodic", "laplacian"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if min(self.lengthscale, self.variance, self.period) <= 0:
            raise ValueError("kernel hyperparameters must be positive")


def _kernel_from_dist(spec: KernelSpec, dist: np.ndarray) -> np.ndarray:
    if spec.kind == "se":
        return spec.variance * np.exp(-(dist**2) / (2 * spec.lengthscale**2))
    if spec.kind == "laplacian":
        return spec.variance * np.exp(-dist / spec.lengthscale)
    return spec.variance * np.exp(-2 * np.sin(math.pi * dist / spec.period) ** 2 / spec.lengthscale**2)


def kernel_eval(spec: KernelSpec, x, x2) -> float:
    dist = float(np.linalg.norm(np.atleast_1d(np.asarray(x, float) - np.asarray(x2, float))))
    return float(_kernel_from_dist(spec, np.asarray(dist)))


def gram(spec: KernelSpec, X1, X2=None) -> np.ndarray:
    X1 = np.asarray(X1, float).reshape(len(X1), -1)
    X2 = X1 if X2 is None else np.asarray(X2, float).reshape(len(X2), -1)
    dist = np.sqrt(np.maximum(((X1[:, None, :] - X2[None, :, :]) ** 2).sum(-1), 0.0))
    return _kernel_from_dist(spec, dist)


def gp_cholesky(K: np.ndarray, signal_var: float, retries: int = 3) -> tuple[np.ndarray, int]:
    """Cholesky of a Gram matrix with base jitter ``1e-6 * signal_var``.

    Returns the factor and the number of escalations needed.
    """
    jitter = 1e-6 * signal_var
    eye = np.eye(K.shape[0])
    for attempt in range(retries + 1):
        try:
            return np.linalg.cholesky(K + jitter * eye), attempt
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise PSDError(f"Gram matrix not positive definite after {retries} jitter retries")


def gp_sample_function(spec: KernelSpec, X: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One GP prior draw at the rows of ``X``; coincident rows get identical values."""
    X = np.asarray(X, float).reshape(len(X), -1)
    if len(X) == 0:
        return np.zeros(0)
    uniq, inverse = np.unique(X, axis=0, return_inverse=True)
    L, _ = gp_cholesky(gram(spec, uniq), spec.variance)
    f = L @ rng.standard_normal(len(uniq))
    return f[inverse.reshape(-1)]


def gp_sample_task(spec: KernelSpec, n_range=(10, 50), interval=(-2.0, 2.0), noise_sd: float = 0.05,
                   rng: np.random.Generator | None = None, in_dim: int = 1) -> Task:
    lo, hi = n_range
    a, b = interval
    if lo > hi or a >= b or noise_sd < 0:
        raise ValueError("invalid GP task parameters")
    rng = rng if rng is not None else np.random.default_rng()
    n = int(rng.integers(lo, hi + 1))
    X = rng.uniform(a, b, size=(n, in_dim))
    f = gp_sample_function(spec, X, rng)
    Y = f + noise_sd * rng.standard_normal(n)
    return Task(X, Y.reshape(-1, 1))


def gp_meta_dataset(spec: KernelSpec, size: int, rng: np.random.Generator, **kwargs) -> list:
    return [gp_sample_task(spec, rng=rng, **kwargs) for _ in range(size)]


# Cubic dataset with a central gap: inputs on [-4, -1.5] U [1.5, 4], y = x^3 / 10 + N(0, 0.3^2).
CUBIC_INTERVALS = ((-4.0, -1.5), (1.5, 4.0))
CUBIC_NOISE_SD = 0.3


def cubic_gap_task(rng: np.random.Generator, n: int = 100, noise: bool = True) -> Task:
    half = n // 2
    left = rng.uniform(*CUBIC_INTERVALS[0], size=half)
    right = rng.uniform(*CUBIC_INTERVALS[1], size=n - half)
    x = np.concatenate([left, right])
    y = x**3 / 10.0
    if noise:
        y = y + CUBIC_NOISE_SD * rng.standard_normal(n)
    return Task(x.reshape(-1, 1), y.reshape(-1, 1))


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------


def _read_idx(path) -> tuple[int, tuple, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncationError(f"{path}: header needs 4 bytes, file has {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = 3 if magic == IDX_IMAGES_MAGIC else 1
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncationError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = 1
    for d in dims:
        count *= d
    if count > _MAX_IDX_ELEMENTS:
        raise FormatError(f"{path}: dimensions {dims} overflow the supported size")
    payload = raw[header:]
    if len(payload) < count:
        raise TruncationError(f"{path}: expected {count} payload bytes, found {len(payload)}")
    return magic, dims, payload[:count]


def load_idx(path) -> np.ndarray:
    """Images from an IDX image file as ``(n, H, W)`` floats in [0, 1]."""
    magic, dims, payload = _read_idx(path)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: magic 0x{magic:08x} is a label file, expected images")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    magic, dims, payload = _read_idx(path)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: magic 0x{magic:08x} is an image file, expected labels")
    return np.frombuffer(payload, dtype=np.uint8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    """Write ``(n, H, W)`` images in [0, 1] (or uint8) as an IDX image file."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    n, h, w = images.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + images.tobytes())


def bundled_digits(size: int = 16) -> np.ndarray:
    """scikit-learn's 8x8 handwritten digits, bilinearly resized to ``size x size`` in [0, 1]."""
    from scipy.ndimage import zoom
    from sklearn.datasets import load_digits

    imgs = load_digits().images / 16.0
    if size != imgs.shape[1]:
        imgs = np.stack([zoom(im, size / im.shape[0], order=1) for im in imgs])
    return np.clip(imgs, 0.0, 1.0)


def downsample(images: np.ndarray, size: int) -> np.ndarray:
    """Mean-pool or bilinearly resize ``(n, H, W)`` images to ``size x size``."""
    from scipy.ndimage import zoom

    n, h, w = images.shape
    if h == size and w == size:
        return images
    if h % size == 0 and w % size == 0:
        return images.reshape(n, size, h // size, size, w // size).mean(axis=(2, 4))
    return np.clip(np.stack([zoom(im, (size / h, size / w), order=1) for im in images]), 0.0, 1.0)


# ---------------------------------------------------------------------------
# image completion tasks
# ---------------------------------------------------------------------------


def pixel_coordinates(h: int, w: int) -> np.ndarray:
    """``(h*w, 2)`` coordinates with boundary pixels at -1 and +1."""
    if h < 2 or w < 2:
        raise DataError("pixel coordinate map needs at least 2 rows and 2 columns")
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return np.stack([-1.0 + 2.0 * ii / (h - 1), -1.0 + 2.0 * jj / (w - 1)], axis=-1).reshape(-1, 2)


@dataclass
class ImageTask:
    image: np.ndarray  # (H, W)
    mask: np.ndarray  # (H, W) bool, True = observed

    def __post_init__(self):
        if self.mask.shape != self.image.shape:
            raise DataError("mask shape does not match image")

    @property
    def task(self) -> Task:
        h, w = self.image.shape
        return Task(pixel_coordinates(h, w), self.image.reshape(-1, 1), self.mask.reshape(-1))

    def context(self) -> Task:
        return self.task.context()


def make_image_task(image, p: float, binarise: bool, rng: np.random.Generator) -> ImageTask:
    if not 0.0 <= p <= 1.0:
        raise ValueError("unmask probability must lie in [0, 1]")
    image = np.asarray(image, dtype=np.float64)
    if min(image.shape) < 2:
        raise DataError("images need at least 2 rows and 2 columns")
    if binarise:
        image = (image >= 0.5).astype(np.float64)
    mask = rng.random(image.shape) < p
    return ImageTask(image, mask)


def linear_interp_baseline(task: ImageTask, k: int = 4, power: float = 2.0) -> np.ndarray:
    """Inverse-distance-weighted fill of masked pixels from the ``k`` nearest observed ones."""
    h, w = task.image.shape
    obs = np.argwhere(task.mask)
    if len(obs) == 0:
        raise DataError("interpolation needs at least one unmasked pixel")
    out = task.image.copy()
    missing = np.argwhere(~task.mask)
    if len(missing) == 0:
        return out
    kk = min(k, len(obs))
    dist, idx = cKDTree(obs).query(missing, k=kk)
    dist, idx = dist.reshape(len(missing), kk), idx.reshape(len(missing), kk)
    vals = task.image[obs[idx, 0], obs[idx, 1]]
    wts = 1.0 / dist**power
    out[missing[:, 0], missing[:, 1]] = (wts * vals).sum(1) / wts.sum(1)
    return out
