"""Meta-test evaluation: sequential or i.i.d. fine-tuning, the treatment matrix, and the learning-rate search."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .autodiff import NonFiniteError, Tensor, no_grad
from .data import ClassInstanceStore, TaskTrajectory, make_iid_stream, make_metatest_trajectory
from .metatrain import InnerLoopDiverged, accuracy, unroll
from .models import Model, treatment_profile

log = logging.getLogger(__name__)

DEFAULT_BETAS = (3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1)
PAPER_LENGTHS = (10, 50, 75, 100, 150, 200, 300, 400, 500, 600)
AGGREGATE_COLUMNS = ("treatment", "n_classes", "seed", "beta", "iid", "epochs", "train_acc", "test_acc", "runtime_s")
ORACLE_SUFFIX = "-Oracle"


@dataclass
class EvalReport:
    treatment: str
    n_classes: int
    seed: int
    beta: float
    iid: bool
    epochs: int
    train_acc: float = math.nan
    test_acc: float = math.nan
    per_class_train: list[float] = field(default_factory=list)
    per_class_test: list[float] = field(default_factory=list)
    class_order: list[int] = field(default_factory=list)
    steps: int = 0
    first_class_gap: int = 0
    runtime_s: float = 0.0
    frozen_audit: bool = True
    failed: str | None = None
    failed_step: int | None = None
    dry_run: bool = False
    config: dict[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict[str, object]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "EvalReport":
        return cls(**d)

    def aggregate_row(self) -> list[str]:
        return [
            self.treatment,
            str(self.n_classes),
            str(self.seed),
            f"{self.beta:.6g}",
            str(int(self.iid)),
            str(self.epochs),
            f"{self.train_acc:.6f}",
            f"{self.test_acc:.6f}",
            f"{self.runtime_s:.3f}",
        ]


def _per_class(pred: np.ndarray, labels: np.ndarray, n: int) -> list[float]:
    out = []
    for c in range(n):
        m = labels == c
        out.append(float((pred[m] == c).mean()) if m.any() else math.nan)
    return out


def _predict(model: Model, values, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    preds = []
    with no_grad():
        for s in range(0, len(images), chunk):
            preds.append(model.forward(values, images[s : s + chunk]).data.argmax(axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def prefix_cache(prefix, values, x_np: np.ndarray, model: Model, chunk: int = 256) -> tuple:
    parts: list[tuple] = []
    with no_grad():
        for s in range(0, len(x_np), chunk):
            parts.append(prefix(values, model.images(x_np[s : s + chunk])))
    if not parts or not parts[0]:
        return ()
    return tuple(Tensor(np.concatenate([p[i].data for p in parts])) for i in range(len(parts[0])))


def training_stream(traj: TaskTrajectory, iid: bool, epochs: int, seed: int) -> TaskTrajectory:
    """Sequential passes repeat the class-contiguous order; oracle passes reshuffle each epoch."""
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if iid:
        return make_iid_stream(traj, epochs, np.random.default_rng([seed, 1]))
    if epochs == 1:
        return traj
    return TaskTrajectory(
        images=np.concatenate([traj.images] * epochs),
        labels=np.concatenate([traj.labels] * epochs),
        class_order=traj.class_order,
        phase=traj.phase,
        test_images=traj.test_images,
        test_labels=traj.test_labels,
        instance_ids=np.concatenate([traj.instance_ids] * epochs),
    )


def run_metatest(
    model: Model,
    store: ClassInstanceStore,
    n_classes: int,
    beta: float,
    treatment: str,
    seed: int,
    iid: bool = False,
    epochs: int = 1,
    dry_run: bool = False,
) -> EvalReport:
    """Fine-tune the treatment's meta-test-plastic parameters one instance per step, then evaluate.

    One parameter copy serves the whole trajectory and no output column is
    reset.  ``dry_run`` builds the stream and reports its arithmetic only.
    """
    t0 = time.perf_counter()
    profile = treatment_profile(treatment)
    if n_classes > model.profile.n_outputs:
        raise ValueError(f"{n_classes} classes exceed head width {model.profile.n_outputs}")
    model = profile.apply(model)
    traj = make_metatest_trajectory(store, n_classes, np.random.default_rng([seed, 0]))
    stream = training_stream(traj, iid, epochs, seed)
    report = EvalReport(
        treatment=treatment,
        n_classes=n_classes,
        seed=seed,
        beta=float(beta),
        iid=iid,
        epochs=epochs,
        class_order=traj.class_order,
        steps=len(stream),
        first_class_gap=stream.updates_since_last_seen(0),
        dry_run=dry_run,
    )
    if dry_run:
        report.runtime_s = time.perf_counter() - t0
        return report

    params = model.params
    plastic = params.where("metatest_plastic")
    frozen = [n for n in params.names() if n not in set(plastic)]
    before = params.fingerprint(frozen)
    prefix, suffix = model.plan(plastic)
    cache = prefix_cache(prefix, params, stream.images, model)
    x = model.images(stream.images)
    try:
        final, _ = unroll(suffix, params, x, cache, stream.labels, beta, "metatest_plastic", differentiable=False)
    except InnerLoopDiverged as exc:
        report.failed, report.failed_step = str(exc), exc.step
        report.runtime_s = time.perf_counter() - t0
        return report
    report.frozen_audit = final.fingerprint(frozen) == before
    if not report.frozen_audit:
        raise AssertionError(f"{treatment}: frozen parameters changed during meta-test training")

    pred_train = _predict(model, final, traj.images)
    pred_test = _predict(model, final, traj.test_images)
    report.train_acc = float((pred_train == traj.labels).mean())
    report.test_acc = float((pred_test == traj.test_labels).mean())
    report.per_class_train = _per_class(pred_train, traj.labels, n_classes)
    report.per_class_test = _per_class(pred_test, traj.test_labels, n_classes)
    report.runtime_s = time.perf_counter() - t0
    return report


def grid_search_scores(
    model: Model,
    store: ClassInstanceStore,
    n_classes: int,
    candidate_betas: Sequence[float],
    seeds: Sequence[int],
    treatment: str,
    iid: bool = False,
    epochs: int = 1,
) -> dict[float, float]:
    """Mean meta-test-test accuracy per candidate (-inf when any seed diverged)."""
    if not candidate_betas:
        raise ValueError("empty learning-rate grid")
    if not seeds:
        raise ValueError("grid search needs at least one seed")
    scores: dict[float, float] = {}
    for beta in candidate_betas:
        accs = []
        for s in seeds:
            r = run_metatest(model, store, n_classes, beta, treatment, s, iid, epochs)
            accs.append(-math.inf if r.failed else r.test_acc)
        scores[float(beta)] = float(np.mean(accs))
    return scores


def select_beta(scores: Mapping[float, float]) -> float:
    """Highest score; ties go to the smaller learning rate."""
    best, best_score = None, -math.inf
    for beta in sorted(scores):
        if scores[beta] > best_score:
            best, best_score = beta, scores[beta]
    if best is None:
        raise RuntimeError("every learning-rate candidate failed")
    return best


def grid_search_beta(
    model: Model,
    store: ClassInstanceStore,
    n_classes: int,
    candidate_betas: Sequence[float],
    seeds: Sequence[int],
    treatment: str,
    iid: bool = False,
    epochs: int = 1,
) -> float:
    if len(candidate_betas) == 1:
        return float(candidate_betas[0])
    scores = grid_search_scores(model, store, n_classes, candidate_betas, seeds, treatment, iid, epochs)
    log.info("%s n=%d beta scores %s", treatment, n_classes, scores)
    return select_beta(scores)


# ---------------------------------------------------------------- matrix


@dataclass
class MatrixConfig:
    treatments: list[str]
    lengths: list[int]
    seeds: list[int]
    betas: list[float] = field(default_factory=lambda: list(DEFAULT_BETAS))
    search_seeds: list[int] = field(default_factory=lambda: [1000, 1001, 1002])
    epochs: int = 1
    dry_run: bool = False


ModelSource = Callable[[str, int], Model]


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def run_matrix(
    cfg: MatrixConfig,
    model_for: ModelSource,
    store: ClassInstanceStore,
    out_dir: str | Path | None = None,
) -> list[EvalReport]:
    """One report per (treatment, length, seed) cell; ``-Oracle`` cells train i.i.d.

    ``model_for(treatment, seed)`` supplies the starting model.  The learning
    rate search runs on the first evaluation seed's model over trajectories
    drawn from ``search_seeds``.  A failing cell is recorded and the matrix
    carries on.
    """
    reports: list[EvalReport] = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for name in cfg.treatments:
        iid = name.endswith(ORACLE_SUFFIX)
        treatment_profile(name)
        for n in cfg.lengths:
            beta = float(cfg.betas[0]) if cfg.betas else math.nan
            if not cfg.dry_run and len(cfg.betas) > 1:
                try:
                    search_model = model_for(name, cfg.seeds[0])
                    beta = grid_search_beta(search_model, store, n, cfg.betas, cfg.search_seeds, name, iid, cfg.epochs)
                except (RuntimeError, ValueError, NonFiniteError) as exc:
                    log.error("beta search failed for %s n=%d: %s", name, n, exc)
                    beta = math.nan
            for seed in cfg.seeds:
                try:
                    if math.isnan(beta):
                        raise RuntimeError("no usable learning rate")
                    r = run_metatest(model_for(name, seed), store, n, beta, name, seed, iid, cfg.epochs, cfg.dry_run)
                except Exception as exc:  # cells fail independently
                    r = EvalReport(name, n, seed, beta, iid, cfg.epochs, failed=f"{type(exc).__name__}: {exc}")
                r.config = {"betas": list(cfg.betas), "search_seeds": list(cfg.search_seeds)}
                reports.append(r)
                if out is not None:
                    tag = f"{name.replace(':', '_').replace('+', '_')}-n{n}-s{seed}.json"
                    _write_atomic(out / tag, r.to_json())
    if out is not None:
        write_aggregate(reports, out / "aggregate.csv")
    return reports


def write_aggregate(reports: Iterable[EvalReport], path: str | Path) -> Path:
    path = Path(path)
    rows = [AGGREGATE_COLUMNS] + [r.aggregate_row() for r in reports]
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    os.replace(tmp, path)
    return path


def relative_drops(reports: Iterable[EvalReport], metric: str = "test_acc") -> dict[tuple[str, int], float]:
    """1 - sequential / oracle accuracy per (treatment, length), from mean accuracies."""
    groups: dict[tuple[str, int, bool], list[float]] = {}
    for r in reports:
        if r.failed or r.dry_run:
            continue
        base = r.treatment[: -len(ORACLE_SUFFIX)] if r.treatment.endswith(ORACLE_SUFFIX) else r.treatment
        groups.setdefault((base, r.n_classes, r.iid), []).append(getattr(r, metric))
    drops = {}
    for (name, n, iid), vals in groups.items():
        if iid or (name, n, True) not in groups:
            continue
        oracle = float(np.mean(groups[(name, n, True)]))
        drops[(name, n)] = 1.0 - float(np.mean(vals)) / oracle if oracle > 0 else math.nan
    return drops


def binned_class_accuracy(per_class: Sequence[float], bin_size: int = 10) -> list[float]:
    """Mean accuracy over consecutive groups of ``bin_size`` classes in encounter order."""
    if bin_size <= 0:
        raise ValueError("bin size must be positive")
    arr = np.asarray(per_class, dtype=np.float64)
    return [float(np.nanmean(arr[i : i + bin_size])) for i in range(0, len(arr), bin_size)]


def untuned_accuracy(model: Model, store: ClassInstanceStore, n_classes: int, seed: int) -> tuple[float, float]:
    """Train/test accuracy before any fine-tuning on the trajectory of this seed."""
    traj = make_metatest_trajectory(store, n_classes, np.random.default_rng([seed, 0]))
    return (
        accuracy(model, traj.images, traj.labels),
        accuracy(model, traj.test_images, traj.test_labels),
    )
