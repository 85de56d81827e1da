"""Representation analyses: activation sparsity, dead units, KNN over activations, CSV export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .autodiff import no_grad
from .models import AnmlModel, Model, anml_forward

ACTIVE_THRESHOLD = 0.01
ANML_KINDS = ("pre", "gate", "post")
# seed stream reserved for the random-weight NM control
RANDOM_NM_STREAM = 0x5EED


@dataclass
class ActivationDump:
    """One row per image in each ``vectors[kind]`` array, aligned with the id arrays."""

    class_ids: np.ndarray
    instance_ids: np.ndarray
    vectors: dict[str, np.ndarray]
    phase: str = ""
    kinds: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.kinds:
            self.kinds = tuple(self.vectors)
        n = len(self.class_ids)
        for k in self.kinds:
            if self.vectors[k].shape[0] != n:
                raise ValueError(f"{k}: {self.vectors[k].shape[0]} rows for {n} records")

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def dim(self) -> int:
        return self.vectors[self.kinds[0]].shape[1]

    def select(self, order: np.ndarray) -> "ActivationDump":
        return ActivationDump(
            self.class_ids[order],
            self.instance_ids[order],
            {k: v[order] for k, v in self.vectors.items()},
            self.phase,
            self.kinds,
        )


def capture_activations(
    model: Model,
    images: np.ndarray,
    class_ids: np.ndarray,
    instance_ids: np.ndarray,
    phase: str,
    params=None,
    chunk: int = 256,
) -> ActivationDump:
    """Gate-path vectors for ANML; the representation (latent) vector for OML."""
    values = model.params if params is None else params
    parts: dict[str, list[np.ndarray]] = {}
    with no_grad():
        for s in range(0, len(images), chunk):
            x = images[s : s + chunk]
            if isinstance(model, AnmlModel):
                _, pre, gate, post = anml_forward(model, x, values, True)
                got = {"pre": pre.data, "gate": gate.data, "post": post.data}
            else:
                latent = model.representation(values, model.images(x))
                got = {"latent": latent.data.reshape(len(x), -1)}
            for k, v in got.items():
                parts.setdefault(k, []).append(v)
    vectors = {k: np.concatenate(v) for k, v in parts.items()}
    return ActivationDump(np.asarray(class_ids), np.asarray(instance_ids), vectors, phase)


def sparsity_stats(dump: ActivationDump, threshold: float = ACTIVE_THRESHOLD) -> dict[str, dict[str, float]]:
    """Per kind: mean fraction of units above ``threshold`` and units never above it."""
    if len(dump) == 0:
        raise ValueError("empty activation dump")
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    out = {}
    for kind in dump.kinds:
        active = dump.vectors[kind] > threshold
        dead = int((~active.any(axis=0)).sum())
        out[kind] = {
            "mean_active_fraction": float(active.mean(axis=1).mean()),
            "dead_neurons": dead,
            "dead_fraction": dead / active.shape[1],
        }
    return out


def knn_classify(
    train_points: np.ndarray,
    train_labels: np.ndarray,
    query_points: np.ndarray,
    k: int = 5,
    chunk: int = 512,
) -> np.ndarray:
    """Majority label among the ``k`` Euclidean-nearest training points.

    Equal distances at the k-th place go to the earlier training point.  Vote
    ties go to the label with the smaller summed distance, then the smaller id.
    """
    train = np.asarray(train_points, dtype=np.float64)
    labels = np.asarray(train_labels)
    queries = np.asarray(query_points, dtype=np.float64)
    if len(train) == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= len(train):
        raise ValueError(f"k={k} with {len(train)} training points")
    out = np.empty(len(queries), dtype=labels.dtype)
    for s in range(0, len(queries), chunk):
        q = queries[s : s + chunk]
        d = np.sqrt(((q[:, None, :] - train[None, :, :]) ** 2).sum(-1))
        nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
        for row, idx in enumerate(nearest):
            votes: dict = {}
            for j in idx:
                c, tot = votes.get(labels[j], (0, 0.0))
                votes[labels[j]] = (c + 1, tot + d[row, j])
            out[s + row] = min(votes, key=lambda lab: (-votes[lab][0], votes[lab][1], lab))
    return out


def knn_accuracy(train: ActivationDump, query: ActivationDump, kind: str, k: int = 5) -> float:
    pred = knn_classify(train.vectors[kind], train.class_ids, query.vectors[kind], k)
    return float((pred == query.class_ids).mean())


def random_nm_model(model: AnmlModel, seed: int) -> AnmlModel:
    """Same prediction network, freshly initialized gating network."""
    fresh = type(model).initialize(model.profile, [RANDOM_NM_STREAM, seed], model.params["nm.fc.weight"].dtype)
    swap = {n: fresh.params[n] for n in model.params.names() if n.startswith("nm.")}
    return model.with_params(model.params.replace(swap))


# ---------------------------------------------------------------- CSV


def export_activations(dump: ActivationDump, path: str | Path) -> Path:
    """``class,instance,kind,v0..`` rows, kinds interleaved per image, 9 significant digits."""
    if len(dump) == 0:
        raise ValueError("empty activation dump")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "instance", "kind"] + [f"v{i}" for i in range(dump.dim)])
        for i in range(len(dump)):
            for kind in dump.kinds:
                vals = [f"{v:.9g}" for v in dump.vectors[kind][i]]
                w.writerow([int(dump.class_ids[i]), int(dump.instance_ids[i]), kind] + vals)
    return path


def read_activations(path: str | Path, phase: str = "") -> ActivationDump:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    kinds: list[str] = []
    ids: list[tuple[int, int]] = []
    vectors: dict[str, list[list[float]]] = {}
    for r in rows:
        cls, inst, kind = int(r[0]), int(r[1]), r[2]
        if kind not in kinds:
            kinds.append(kind)
        if kind == kinds[0]:
            ids.append((cls, inst))
        vectors.setdefault(kind, []).append([float(v) for v in r[3:]])
    arr = np.array(ids, dtype=np.int64).reshape(-1, 2)
    return ActivationDump(
        arr[:, 0], arr[:, 1], {k: np.array(v, dtype=np.float32) for k, v in vectors.items()}, phase, tuple(kinds)
    )


def write_stats(stats: Mapping[str, object], path: str | Path) -> Path:
    """Flat ``key = value`` report; nested dicts become dotted keys."""
    lines: list[str] = []

    def walk(prefix: str, obj) -> None:
        if isinstance(obj, Mapping):
            for k, v in obj.items():
                walk(f"{prefix}.{k}" if prefix else str(k), v)
        else:
            lines.append(f"{prefix} = {obj}")

    walk("", stats)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def analyze(
    model: Model,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    test_images: np.ndarray,
    test_labels: np.ndarray,
    k: int = 5,
    threshold: float = ACTIVE_THRESHOLD,
    params=None,
    phase: str = "",
    control_seed: int | None = 0,
    train_instances: Sequence[int] | None = None,
    test_instances: Sequence[int] | None = None,
) -> tuple[ActivationDump, dict[str, object]]:
    """Sparsity on the test images plus KNN (test queries against train points) per vector kind."""
    tr_inst = np.arange(len(train_labels)) if train_instances is None else np.asarray(train_instances)
    te_inst = np.arange(len(test_labels)) if test_instances is None else np.asarray(test_instances)
    train = capture_activations(model, train_images, train_labels, tr_inst, phase, params)
    test = capture_activations(model, test_images, test_labels, te_inst, phase, params)
    stats: dict[str, object] = {"phase": phase, "threshold": threshold, "k": k}
    stats["sparsity"] = sparsity_stats(test, threshold)
    stats["knn"] = {kind: knn_accuracy(train, test, kind, k) for kind in test.kinds}
    if control_seed is not None and isinstance(model, AnmlModel):
        ctrl = random_nm_model(model.with_params(model.params if params is None else params), control_seed)
        ctrain = capture_activations(ctrl, train_images, train_labels, tr_inst, phase)
        ctest = capture_activations(ctrl, test_images, test_labels, te_inst, phase)
        stats["knn_random_nm"] = {kind: knn_accuracy(ctrain, ctest, kind, k) for kind in ("gate", "post")}
    return test, stats
