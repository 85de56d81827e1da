"""On-disk fixtures mimicking the Omniglot archive layout."""

from __future__ import annotations

import io
import zipfile
from pathlib import Path

import numpy as np
from PIL import Image


def write_png_tree(root: Path, n_classes: int, instances: int = 20, size: int = 8, seed: int = 0, per_alphabet: int = 40) -> Path:
    """``root/<alphabet>/<character>/<id>_<k>.png``: dark strokes on white, like the originals."""
    rng = np.random.default_rng(seed)
    for c in range(n_classes):
        d = root / f"Alphabet_{c // per_alphabet:02d}" / f"character{c % per_alphabet + 1:02d}"
        d.mkdir(parents=True, exist_ok=True)
        base = rng.random((size, size)) < 0.3
        for k in range(instances):
            ink = base ^ (rng.random((size, size)) < 0.05)
            Image.fromarray(np.where(ink, 0, 255).astype(np.uint8)).save(d / f"{c:04d}_{k + 1:02d}.png")
    return root


def zip_tree(src: Path, dest: Path) -> Path:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for p in sorted(src.rglob("*.png")):
            zf.write(p, p.relative_to(src.parent).as_posix())
    dest.write_bytes(buf.getvalue())
    return dest
