"""Datasets: public benchmarks, a synthetic Gaussian hierarchy, and augmentations."""
from __future__ import annotations

import gzip
import hashlib
import os
import pickle
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

FETCH_HINTS = {
    "mnist": "place mnist.pkl.gz (train, valid, test tuples) or the four IDX files "
             "(train-images-idx3-ubyte.gz, ...) from http://yann.lecun.com/exdb/mnist/ under <root>/mnist/",
    "fashion": "place the four IDX files from "
               "https://github.com/zalandoresearch/fashion-mnist (data/fashion) under <root>/fashion/",
    "newsgroups": "run sklearn.datasets.fetch_20newsgroups(data_home='<root>/newsgroups') once with network access",
    "omniglot": "unzip images_background.zip and images_evaluation.zip from "
                "https://github.com/brendenlake/omniglot (python/) under <root>/omniglot/",
}
OMNIGLOT_5 = ("Braille", "Glagolitic", "Cyrillic", "Oriya", "Bengali")


class MissingData(FileNotFoundError):
    pass


class NotAnImage(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    x_train: torch.Tensor
    y_train: np.ndarray
    x_test: torch.Tensor
    y_test: np.ndarray
    likelihood: str = "bernoulli"
    meta: dict = field(default_factory=dict)

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max()) + 1)


def data_root(root: Optional[str | Path] = None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get("TREEVAE_DATA")
    return Path(env) if env else Path.home() / ".cache" / "treevae"


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# -- loaders -----------------------------------------------------------------


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _find(folder: Path, stem: str) -> Optional[Path]:
    for cand in (folder / stem, folder / (stem + ".gz")):
        if cand.exists():
            return cand
    return None


def read_idx(path: Path) -> np.ndarray:
    with _open(path) as f:
        magic = f.read(4)
        if len(magic) != 4 or magic[0] != 0 or magic[1] != 0:
            raise ValueError(f"{path} is not an IDX file")
        ndim = magic[3]
        shape = struct.unpack(">" + "I" * ndim, f.read(4 * ndim))
        return np.frombuffer(f.read(), dtype=np.uint8).reshape(shape)


def _idx_dataset(folder: Path, name: str) -> tuple:
    stems = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
             "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
    paths = [_find(folder, s) for s in stems]
    if any(p is None for p in paths):
        raise MissingData(f"{name}: files not found in {folder}; {FETCH_HINTS[name]}")
    xtr, ytr, xte, yte = (read_idx(p) for p in paths)
    scale = lambda a: torch.from_numpy(a.astype(np.float32) / 255.0).unsqueeze(1)
    checksums = {p.name: sha256(p) for p in paths}
    return scale(xtr), ytr.astype(np.int64), scale(xte), yte.astype(np.int64), checksums


def _mnist(folder: Path) -> tuple:
    pkl = folder / "mnist.pkl.gz"
    if pkl.exists():
        with gzip.open(pkl, "rb") as f:
            train, valid, test = pickle.load(f, encoding="latin1")
        to_img = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32).reshape(-1, 1, 28, 28))
        xtr = to_img(np.concatenate([train[0], valid[0]]))
        ytr = np.concatenate([train[1], valid[1]]).astype(np.int64)
        return xtr, ytr, to_img(test[0]), np.asarray(test[1], dtype=np.int64), {pkl.name: sha256(pkl)}
    return _idx_dataset(folder, "mnist")


def _newsgroups(folder: Path, seed: int) -> tuple:
    from sklearn.datasets import fetch_20newsgroups
    from sklearn.feature_extraction.text import TfidfVectorizer

    try:
        raw = fetch_20newsgroups(data_home=str(folder), subset="all", download_if_missing=False)
    except OSError as exc:
        raise MissingData(f"newsgroups: {exc}; {FETCH_HINTS['newsgroups']}") from None
    feats = TfidfVectorizer(max_features=2000).fit_transform(raw.data).toarray().astype(np.float32)
    y = np.asarray(raw.target, dtype=np.int64)
    perm = np.random.default_rng(seed).permutation(len(y))
    cut = int(0.6 * len(y))
    tr, te = perm[:cut], perm[cut:]
    return torch.from_numpy(feats[tr]), y[tr], torch.from_numpy(feats[te]), y[te], {}


def _omniglot(folder: Path, alphabets: Optional[tuple], seed: int) -> tuple:
    from PIL import Image

    dirs = [folder / "images_background", folder / "images_evaluation"]
    if not any(d.is_dir() for d in dirs):
        raise MissingData(f"omniglot: no image folders in {folder}; {FETCH_HINTS['omniglot']}")
    found = sorted({a.name: a for d in dirs if d.is_dir() for a in d.iterdir() if a.is_dir()}.items())
    if alphabets is not None:
        found = [(k, v) for k, v in found if k in alphabets]
        if len(found) != len(alphabets):
            raise MissingData(f"omniglot: alphabets {alphabets} not all present in {folder}")
    xs, ys = [], []
    for label, (_, alpha) in enumerate(found):
        for png in sorted(alpha.glob("*/*.png")):
            img = Image.open(png).convert("L").resize((28, 28), Image.BILINEAR)
            xs.append(1.0 - np.asarray(img, dtype=np.float32) / 255.0)  # strokes -> 1
            ys.append(label)
    x = np.stack(xs)[:, None]
    y = np.asarray(ys, dtype=np.int64)
    rng = np.random.default_rng(seed)
    test = np.zeros(len(y), dtype=bool)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        test[rng.choice(idx, size=int(round(0.2 * len(idx))), replace=False)] = True
    return (torch.from_numpy(x[~test]), y[~test], torch.from_numpy(x[test]), y[test],
            {"alphabets": [k for k, _ in found]})


def stratified_subset(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Indices of a class-balanced random subset of size ``k`` (sorted)."""
    rng = np.random.default_rng(seed)
    classes = np.unique(y)
    per = np.full(len(classes), k // len(classes))
    per[: k - per.sum()] += 1
    picks = [rng.choice(np.flatnonzero(y == c), size=n, replace=False) for c, n in zip(classes, per)]
    return np.sort(np.concatenate(picks))


def load_dataset(name: str, root: Optional[str | Path] = None, subset: Optional[int] = None,
                 seed: int = 0) -> Dataset:
    base = data_root(root)
    if name == "mnist":
        parts = _mnist(base / "mnist")
    elif name == "fashion":
        parts = _idx_dataset(base / "fashion", "fashion")
    elif name == "newsgroups":
        parts = _newsgroups(base / "newsgroups", seed)
    elif name in ("omniglot", "omniglot5"):
        parts = _omniglot(base / "omniglot", OMNIGLOT_5 if name == "omniglot5" else None, seed)
    else:
        raise MissingData(f"unknown dataset {name!r}; known: mnist, fashion, newsgroups, omniglot, omniglot5, synthetic")
    xtr, ytr, xte, yte, meta = parts
    if subset is not None and subset < len(ytr):
        idx = stratified_subset(ytr, subset, seed)
        xtr, ytr = xtr[idx], ytr[idx]
    return Dataset(name, xtr, ytr, xte, yte, "bernoulli", {"checksums": meta} if meta else {})


# -- synthetic hierarchy -------------------------------------------------------


def synthetic_means(dim: int, n_clusters: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Leaf means of a balanced binary hierarchy.

    Each level splits every group along its own orthogonal direction. The
    deepest split puts siblings ``separation`` apart and every level above
    doubles that distance.
    """
    levels = int(np.log2(n_clusters))
    if 2 ** levels != n_clusters or n_clusters < 2:
        raise ValueError("n_clusters must be a power of two, at least 2")
    if levels > dim:
        raise ValueError("dim too small for the hierarchy")
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    means = np.zeros((1, dim))
    for k in range(levels):
        offset = 0.5 * separation * 2 ** (levels - 1 - k)
        step = offset * basis[:, k]
        means = np.stack([means - step, means + step], axis=1).reshape(-1, dim)
    return means


def synthetic_hierarchical(n: int = 2000, dim: int = 16, n_clusters: int = 4, separation: float = 6.0,
                           seed: int = 0, n_test: int = 400) -> Dataset:
    """Gaussian clusters (unit variance) arranged as a balanced binary tree.

    Label ``c`` is the leaf index; siblings are (2i, 2i+1) at the lowest level.
    """
    rng = np.random.default_rng(seed)
    means = synthetic_means(dim, n_clusters, separation, rng)

    def draw(count):
        y = np.arange(count) % n_clusters
        y = y[rng.permutation(count)]
        x = means[y] + rng.standard_normal((count, dim))
        return torch.from_numpy(x.astype(np.float32)), y.astype(np.int64)

    xtr, ytr = draw(n)
    xte, yte = draw(n_test)

    def nested(lo, hi):
        return lo if hi - lo == 1 else [nested(lo, (lo + hi) // 2), nested((lo + hi) // 2, hi)]

    meta = {"means": means, "hierarchy": nested(0, n_clusters),
            "sibling_pairs": [(2 * i, 2 * i + 1) for i in range(n_clusters // 2)]}
    return Dataset("synthetic", xtr, ytr, xte, yte, "gaussian", meta)


# -- augmentation ----------------------------------------------------------------


@dataclass
class AugmentationPolicy:
    crop_scale: Optional[tuple] = None
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.0
    jitter_p: float = 0.0
    brightness: float = 0.0
    contrast: float = 0.0
    saturation: float = 0.0
    hue: float = 0.0
    gray_p: float = 0.0
    rotate: float = 0.0  # degrees, affine family
    shift: float = 0.0  # pixels
    shear: float = 0.0  # degrees
    zoom: float = 0.0  # relative

    @classmethod
    def preset(cls, name: str) -> "AugmentationPolicy":
        if name in ("none", "identity"):
            return cls()
        if name == "flip":
            return cls(flip_p=0.5)
        if name == "cifar":
            return cls(crop_scale=(0.2, 1.0), flip_p=0.5, jitter_p=0.8, brightness=0.4, contrast=0.4,
                       saturation=0.4, hue=0.1, gray_p=0.2)
        if name == "celeba":
            return cls(crop_scale=(0.75, 1.0), crop_ratio=(4 / 5, 5 / 4), flip_p=0.5, jitter_p=0.8,
                       brightness=0.2, contrast=0.2, saturation=0.2)
        if name == "omniglot":
            return cls(rotate=10.0, shift=2.0, shear=0.01 * 45.0, zoom=0.1)
        raise ValueError(f"unknown augmentation preset {name!r}")


def _crop_box(h, w, scale, ratio, rng):
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = np.exp(rng.uniform(np.log(ratio[0]), np.log(ratio[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw
    return 0, 0, h, w


def augment_image(img: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    import torchvision.transforms.functional as TF

    c, h, w = img.shape
    out = img
    if policy.rotate or policy.shift or policy.shear or policy.zoom:
        out = TF.affine(out, angle=float(rng.uniform(-policy.rotate, policy.rotate)),
                        translate=[int(rng.integers(-policy.shift, policy.shift + 1)),
                                   int(rng.integers(-policy.shift, policy.shift + 1))],
                        scale=float(rng.uniform(1 - policy.zoom, 1 + policy.zoom)),
                        shear=[float(rng.uniform(-policy.shear, policy.shear))])
    if policy.crop_scale is not None:
        top, left, ch, cw = _crop_box(h, w, policy.crop_scale, policy.crop_ratio, rng)
        out = TF.resized_crop(out, top, left, ch, cw, [h, w], antialias=True)
    if rng.random() < policy.flip_p:
        out = TF.hflip(out)
    if rng.random() < policy.jitter_p:
        ops = []
        if policy.brightness:
            f = rng.uniform(1 - policy.brightness, 1 + policy.brightness)
            ops.append(lambda t, f=f: TF.adjust_brightness(t, f))
        if policy.contrast:
            f = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
            ops.append(lambda t, f=f: TF.adjust_contrast(t, f))
        if policy.saturation and c == 3:
            f = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
            ops.append(lambda t, f=f: TF.adjust_saturation(t, f))
        if policy.hue and c == 3:
            f = rng.uniform(-policy.hue, policy.hue)
            ops.append(lambda t, f=f: TF.adjust_hue(t, f))
        for i in rng.permutation(len(ops)):
            out = ops[i](out)
    if c == 3 and rng.random() < policy.gray_p:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    return out.clamp(0.0, 1.0)


def augment_batch(x: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    if x.dim() != 4:
        raise NotAnImage(f"augmentation needs [N, C, H, W] images, got shape {tuple(x.shape)}")
    return torch.stack([augment_image(img, policy, rng) for img in x])


def augment_pair(x: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator):
    """Two independent augmented views of a batch."""
    return augment_batch(x, policy, rng), augment_batch(x, policy, rng)
