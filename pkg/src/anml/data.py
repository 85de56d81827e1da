"""Omniglot ingestion, class splits, trajectory sampling and a synthetic stand-in dataset."""

from __future__ import annotations

import io
import logging
import os
import urllib.request
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

OMNIGLOT_CLASSES = 1623
OMNIGLOT_META_TEST = 660
OMNIGLOT_URLS = (
    "https://raw.githubusercontent.com/brendenlake/omniglot/master/python/images_background.zip",
    "https://raw.githubusercontent.com/brendenlake/omniglot/master/python/images_evaluation.zip",
)
DATA_ROOT_ENV = "ANML_DATA_ROOT"
METATEST_TRAIN_PER_CLASS = 15


class DatasetError(RuntimeError):
    pass


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data/omniglot"))


@dataclass
class ClassInstanceStore:
    """All images in memory, plus the meta-train / meta-test class split.

    ``images`` is (classes, instances, H, W) in [0, 1] with ink = 1.  Meta-train
    labels are positions in ``meta_train``; meta-test classes keep their first
    ``n_metatest_train`` instances for meta-test training and hold out the rest.
    """

    images: np.ndarray
    class_names: list[str]
    meta_train: np.ndarray
    meta_test: np.ndarray
    n_metatest_train: int = METATEST_TRAIN_PER_CLASS
    source: str = ""
    split_seed: int = 0

    def __post_init__(self):
        overlap = set(self.meta_train.tolist()) & set(self.meta_test.tolist())
        if overlap:
            raise DatasetError(f"meta-train and meta-test share classes {sorted(overlap)[:5]}")
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (classes, instances, H, W), got {self.images.shape}")

    @property
    def n_instances(self) -> int:
        return self.images.shape[1]

    @property
    def image_size(self) -> int:
        return self.images.shape[2]

    def phase_of(self, class_index: int) -> str:
        if class_index in set(self.meta_train.tolist()):
            return "meta_train"
        if class_index in set(self.meta_test.tolist()):
            return "meta_test"
        return "unused"

    def describe(self) -> dict[str, object]:
        return {
            "source": self.source,
            "classes": self.images.shape[0],
            "instances": self.n_instances,
            "image_size": self.image_size,
            "meta_train_classes": len(self.meta_train),
            "meta_test_classes": len(self.meta_test),
            "split_seed": self.split_seed,
        }


@dataclass
class TaskTrajectory:
    """Ordered (image, label) stream; meta-test trajectories carry their held-out set."""

    images: np.ndarray
    labels: np.ndarray
    class_order: list[int]
    phase: str
    test_images: np.ndarray | None = None
    test_labels: np.ndarray | None = None
    instance_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_order)

    def updates_since_last_seen(self, label: int) -> int:
        """SGD steps remaining after the last instance of ``label``."""
        idx = np.flatnonzero(self.labels == label)
        if idx.size == 0:
            raise ValueError(f"label {label} not in trajectory")
        return len(self.labels) - 1 - int(idx[-1])


def split_classes(n_classes: int, n_meta_test: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded permutation; the first ``n_meta_test`` entries are held out. Both halves sorted."""
    if not 0 <= n_meta_test <= n_classes:
        raise DatasetError(f"cannot hold out {n_meta_test} of {n_classes} classes")
    perm = np.random.default_rng(seed).permutation(n_classes)
    return np.sort(perm[n_meta_test:]), np.sort(perm[:n_meta_test])


# ---------------------------------------------------------------- Omniglot on disk


def _character_dirs(root: Path) -> list[Path]:
    dirs = sorted({p.parent for p in root.rglob("*.png")}, key=lambda p: p.relative_to(root).as_posix())
    return dirs


def _decode(path: Path, size: int) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        ink = 1.0 - np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    if ink.shape != (size, size):
        ink = np.asarray(Image.fromarray(ink, mode="F").resize((size, size), Image.BILINEAR))
    return np.clip(ink, 0.0, 1.0)


def load_omniglot(
    root: str | Path,
    seed: int = 0,
    image_size: int = 28,
    expected_classes: int | None = OMNIGLOT_CLASSES,
    n_meta_test: int = OMNIGLOT_META_TEST,
    instances: int = 20,
) -> ClassInstanceStore:
    """Read ``<root>/<alphabet>/<character>/<name>.png`` (any nesting depth) into memory.

    Classes are enumerated by sorted relative directory path; images are
    ink-inverted and bilinearly resized to ``image_size``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"data root {root} does not exist")
    chars = _character_dirs(root)
    if expected_classes is not None and len(chars) != expected_classes:
        raise DatasetError(f"{root}: found {len(chars)} character classes, expected {expected_classes}")
    images = np.zeros((len(chars), instances, image_size, image_size), dtype=np.float32)
    bad: list[str] = []
    for ci, cdir in enumerate(chars):
        files = sorted(cdir.glob("*.png"))
        if len(files) < instances:
            bad.append(f"{cdir} ({len(files)} images, need {instances})")
            continue
        for ii, f in enumerate(files[:instances]):
            try:
                images[ci, ii] = _decode(f, image_size)
            except Exception as exc:  # PIL raises a zoo of types for corrupt files
                bad.append(f"{f} ({type(exc).__name__})")
    if bad:
        raise DatasetError(f"{len(bad)} unreadable inputs: " + "; ".join(bad[:10]))
    train, test = split_classes(len(chars), n_meta_test, seed)
    names = [c.relative_to(root).as_posix() for c in chars]
    return ClassInstanceStore(images, names, train, test, source=f"omniglot:{root}", split_seed=seed)


def validate_omniglot_tree(root: str | Path, expected_classes: int = OMNIGLOT_CLASSES) -> list[str]:
    """Problems found in an on-disk tree (empty list when it looks complete)."""
    root = Path(root)
    if not root.is_dir():
        return [f"{root} does not exist"]
    n = len(_character_dirs(root))
    if n != expected_classes:
        return [f"{root}: {n} character classes, expected {expected_classes}"]
    return []


def fetch_omniglot(
    root: str | Path,
    urls: tuple[str, ...] = OMNIGLOT_URLS,
    offline: bool = False,
    expected_classes: int = OMNIGLOT_CLASSES,
) -> str:
    """Download and unpack the archives unless a complete tree is present.

    Returns ``"already present"``, ``"downloaded"`` or raises DatasetError.
    """
    root = Path(root)
    problems = validate_omniglot_tree(root, expected_classes)
    if not problems:
        return "already present"
    if offline:
        raise DatasetError("offline and no valid tree: " + "; ".join(problems))
    root.mkdir(parents=True, exist_ok=True)
    for url in urls:
        log.info("downloading %s", url)
        try:
            with urllib.request.urlopen(url, timeout=60) as resp:
                payload = resp.read()
            with zipfile.ZipFile(io.BytesIO(payload)) as zf:
                zf.extractall(root)
        except (OSError, zipfile.BadZipFile) as exc:
            raise DatasetError(f"failed to fetch {url}: {exc}") from exc
    problems = validate_omniglot_tree(root, expected_classes)
    if problems:
        raise DatasetError("downloaded tree failed verification: " + "; ".join(problems))
    return "downloaded"


# ---------------------------------------------------------------- raw fixtures


def write_raw_fixture(store: ClassInstanceStore, directory: str | Path) -> Path:
    """Dump a store as 8-bit grayscale ``.raw`` files plus ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    c, n, h, w = store.images.shape
    lines = [f"fixture 1 classes={c} instances={n} height={h} width={w}"]
    for ci in range(c):
        for ii in range(n):
            fname = f"c{ci:04d}_i{ii:02d}.raw"
            pix = np.round(store.images[ci, ii] * 255).astype(np.uint8)
            (directory / fname).write_bytes(pix.tobytes())
            lines.append(f"{store.class_names[ci]} {ii} {fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def load_raw_fixture(directory: str | Path, seed: int = 0, n_meta_test: int = 0) -> ClassInstanceStore:
    directory = Path(directory)
    lines = (directory / "manifest.txt").read_text().splitlines()
    header = dict(tok.split("=") for tok in lines[0].split()[2:])
    c, n, h, w = (int(header[k]) for k in ("classes", "instances", "height", "width"))
    images = np.zeros((c, n, h, w), dtype=np.float32)
    names: list[str] = []
    for line in lines[1:]:
        name, ii, fname = line.split()
        if not names or names[-1] != name:
            names.append(name)
        raw = np.frombuffer((directory / fname).read_bytes(), dtype=np.uint8)
        if raw.size != h * w:
            raise DatasetError(f"{directory / fname}: {raw.size} bytes, expected {h * w}")
        images[len(names) - 1, int(ii)] = raw.reshape(h, w) / np.float32(255)
    train, test = split_classes(c, n_meta_test, seed)
    return ClassInstanceStore(images, names, train, test, source=f"fixture:{directory}", split_seed=seed)


# ---------------------------------------------------------------- synthetic data


def _render(points: np.ndarray, size: int, sigma: float) -> np.ndarray:
    """Soft-ink rendering of sampled stroke points: (B, P, 2) -> (B, size, size)."""
    grid = np.stack(np.meshgrid(np.arange(size), np.arange(size), indexing="ij"), -1).reshape(-1, 2)
    d2 = ((points[:, :, None, :] - grid[None, None]) ** 2).sum(-1)
    ink = np.exp(-d2 / (2 * sigma**2)).max(axis=1)
    return ink.reshape(-1, size, size)


def make_synthetic_store(
    n_classes: int,
    instances: int,
    image_size: int,
    seed: int,
    n_meta_test: int = 0,
    strokes: int = 3,
    jitter: float = 0.3,
) -> ClassInstanceStore:
    """Random stroke characters: each class is a few quadratic curves, each
    instance re-draws them with jittered control points and a sub-pixel shift."""
    if min(n_classes, instances, image_size) <= 0:
        raise DatasetError("synthetic store sizes must be positive")
    rng = np.random.default_rng(seed)
    scale = image_size / 14.0
    margin = 1.5 * scale
    t = np.linspace(0.0, 1.0, 12)
    basis = np.stack([(1 - t) ** 2, 2 * t * (1 - t), t**2], axis=1)  # (T, 3)
    images = np.zeros((n_classes, instances, image_size, image_size), dtype=np.float32)
    for c in range(n_classes):
        ctrl = rng.uniform(margin, image_size - 1 - margin, size=(strokes, 3, 2))
        noisy = ctrl[None] + rng.normal(0.0, jitter * scale, size=(instances, strokes, 3, 2))
        noisy += rng.uniform(-0.5, 0.5, size=(instances, 1, 1, 2)) * scale
        pts = np.einsum("tk,iskd->istd", basis, noisy).reshape(instances, -1, 2)
        images[c] = _render(pts, image_size, 0.6 * scale)
    train, test = split_classes(n_classes, n_meta_test, seed)
    names = [f"synthetic/{c:04d}" for c in range(n_classes)]
    return ClassInstanceStore(
        np.clip(images, 0.0, 1.0), names, train, test, source=f"synthetic:{seed}", split_seed=seed
    )


# ---------------------------------------------------------------- sampling


def make_metatrain_trajectory(store: ClassInstanceStore, label: int, k: int | None = None) -> TaskTrajectory:
    """All (or the first ``k``) instances of the meta-train class at position ``label``."""
    if not 0 <= label < len(store.meta_train):
        raise DatasetError(f"meta-train label {label} out of range")
    cls = int(store.meta_train[label])
    k = store.n_instances if k is None else k
    imgs = store.images[cls, :k]
    return TaskTrajectory(imgs, np.full(k, label, dtype=np.int64), [cls], "meta_train", instance_ids=np.arange(k))


def sample_remember_set(store: ClassInstanceStore, size: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Uniform sample without replacement over every meta-train instance."""
    total = len(store.meta_train) * store.n_instances
    if not 0 <= size <= total:
        raise DatasetError(f"remember set of {size} requested from {total} meta-train instances")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    flat = rng.choice(total, size=size, replace=False)
    labels, inst = np.divmod(flat, store.n_instances)
    images = store.images[store.meta_train[labels], inst]
    return images, labels.astype(np.int64)


def make_metatest_trajectory(store: ClassInstanceStore, n_classes: int, seed) -> TaskTrajectory:
    """``n_classes`` held-out classes in seeded order, 15 contiguous training instances each.

    Labels are encounter order 0..n-1; the remaining instances form the test set.
    """
    if not 1 <= n_classes <= len(store.meta_test):
        raise DatasetError(f"trajectory of {n_classes} classes requested, {len(store.meta_test)} held out")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = [int(c) for c in rng.permutation(store.meta_test)[:n_classes]]
    q = store.n_metatest_train
    imgs = store.images[order]  # (n, instances, H, W)
    h, w = imgs.shape[2:]
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), q)
    test_n = store.n_instances - q
    return TaskTrajectory(
        images=imgs[:, :q].reshape(-1, h, w),
        labels=labels,
        class_order=order,
        phase="meta_test",
        test_images=imgs[:, q:].reshape(-1, h, w),
        test_labels=np.repeat(np.arange(n_classes, dtype=np.int64), test_n),
        instance_ids=np.tile(np.arange(q), n_classes),
    )


def make_iid_stream(trajectory: TaskTrajectory, epochs: int, seed) -> TaskTrajectory:
    """``epochs`` independently shuffled passes over the trajectory's multiset."""
    if epochs < 1:
        raise DatasetError(f"epochs must be >= 1, got {epochs}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(len(trajectory)) for _ in range(epochs)])
    return TaskTrajectory(
        images=trajectory.images[order],
        labels=trajectory.labels[order],
        class_order=trajectory.class_order,
        phase=trajectory.phase + ":iid",
        test_images=trajectory.test_images,
        test_labels=trajectory.test_labels,
        instance_ids=trajectory.instance_ids[order] if len(trajectory.instance_ids) else trajectory.instance_ids,
    )
