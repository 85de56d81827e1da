"""Meta-training: the differentiable inner loop, the outer Adam step, and the i.i.d. pretraining baseline."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .autodiff import NonFiniteError, Tensor, backward, no_grad, ops
from .data import ClassInstanceStore, TaskTrajectory, make_metatrain_trajectory, sample_remember_set
from .models import Model, profile_to_dict, treatment_profile
from .nn import AdamState, ParameterSet

log = logging.getLogger(__name__)


class InnerLoopDiverged(NonFiniteError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


METRIC_COLUMNS = ("iter", "meta_loss", "traj_loss", "rem_loss", "grad_norm_nm", "grad_norm_pln")


@dataclass
class MetaTrainConfig:
    k: int = 20
    remember_size: int = 64
    iterations: int = 20000
    alpha: float = 1e-3
    beta: float = 0.1
    seed: int = 0
    profile: str = "full"
    treatment: str = "ANML"
    grad_clip: float = 0.0
    first_order: bool = False
    checkpoint_every: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("k", "iterations", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("remember_size", "alpha", "beta", "grad_clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        t = treatment_profile(self.treatment)
        if not t.meta_trained:
            raise ValueError(f"treatment {self.treatment} is not meta-trained")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class EpisodeResult:
    """One unrolled inner loop.  Parameter sets hold graph nodes when differentiable."""

    initial: ParameterSet
    losses: list[float]
    final: ParameterSet
    meta_loss: float = math.nan
    traj_loss: float = math.nan
    rem_loss: float = math.nan
    grad_norm_nm: float = math.nan
    grad_norm_pln: float = math.nan
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.losses)


def unroll(
    suffix: Callable,
    values: ParameterSet,
    x: Tensor,
    cache: tuple,
    labels: np.ndarray,
    beta: float,
    plastic: str = "inner_plastic",
    differentiable: bool = False,
    create_graph: bool | None = None,
) -> tuple[ParameterSet, list[float]]:
    """One SGD step per row of ``x`` on the parameters flagged ``plastic``.

    ``suffix(values, x_rows, cache_rows)`` must return logits; ``cache`` holds
    per-row activations that do not depend on the plastic parameters.
    """
    create_graph = differentiable if create_graph is None else create_graph
    names = values.where(plastic)
    losses: list[float] = []
    for i in range(len(labels)):
        if not differentiable:
            values = values.as_leaves(names)
        xi = ops.rows(x, i, i + 1)
        ci = tuple(ops.rows(c, i, i + 1) for c in cache)
        loss = ops.softmax_cross_entropy(suffix(values, xi, ci), labels[i : i + 1])
        value = float(loss.data)
        if not math.isfinite(value):
            raise InnerLoopDiverged(f"inner-loop loss is {value} at step {i} (label {int(labels[i])})", i)
        losses.append(value)
        if beta == 0 or not names:
            continue
        grads = backward(loss, [values[n] for n in names], create_graph=create_graph)
        values = nn.sgd_step(values, grads, beta, differentiable=differentiable, plastic=plastic)
    if not differentiable:
        values = ParameterSet({n: Tensor(t.data) for n, t in values.items()}, values.flags)
    return values, losses


def run_inner_loop(
    model: Model,
    trajectory: TaskTrajectory,
    beta: float,
    differentiable: bool,
    params: ParameterSet | None = None,
    create_graph: bool | None = None,
) -> EpisodeResult:
    """k sequential single-instance SGD steps on the inner-plastic parameters.

    ``params`` (default: the model's) is the starting point; it may carry graph
    history, e.g. meta-parameter leaves after a column reinit.  Without it, a
    differentiable run starts from fresh leaves over every parameter.
    """
    if params is not None:
        start = params
    else:
        start = model.params.as_leaves() if differentiable else model.params
    prefix, suffix = model.plan(start.where("inner_plastic"))
    x = model.images(trajectory.images)
    cache = prefix(start, x)
    final, losses = unroll(
        suffix, start, x, cache, trajectory.labels, beta, "inner_plastic", differentiable, create_graph
    )
    return EpisodeResult(initial=start, losses=losses, final=final)


def reinit_output_column(
    params: ParameterSet,
    class_index: int,
    seed,
    head: tuple[str, str] = ("pln.fc.weight", "pln.fc.bias"),
) -> ParameterSet:
    """Redraw the head weights and bias feeding output unit ``class_index``.

    The head weight is stored (outputs, inputs), so the unit's incoming
    weights are one row.  The replacement is a constant: no gradient reaches
    the meta-learned values it overwrote.
    """
    w_name, b_name = head
    w, b = params[w_name], params[b_name]
    n_out, fan_in = w.shape
    if not 0 <= class_index < n_out:
        raise IndexError(f"class index {class_index} outside head of width {n_out}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(fan_in)
    fresh_w = w.data.copy()
    fresh_w[class_index] = rng.uniform(-bound, bound, size=fan_in)
    fresh_b = b.data.copy()
    fresh_b[class_index] = rng.uniform(-bound, bound)
    mask_w = np.ones(w.shape, dtype=bool)
    mask_w[class_index] = False
    mask_b = np.ones(b.shape, dtype=bool)
    mask_b[class_index] = False
    return params.replace(
        {
            w_name: ops.where(mask_w, w, Tensor(fresh_w)),
            b_name: ops.where(mask_b, b, Tensor(fresh_b)),
        }
    )


def _norm(arrays) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64))) for a in arrays)))


def episode_rng(seed: int, iteration: int) -> np.random.Generator:
    """Every outer iteration draws from its own stream, so resuming needs no RNG state."""
    return np.random.default_rng([seed, iteration])


def sample_episode(store: ClassInstanceStore, cfg: MetaTrainConfig, iteration: int):
    rng = episode_rng(cfg.seed, iteration)
    label = int(rng.integers(len(store.meta_train)))
    traj = make_metatrain_trajectory(store, label, cfg.k)
    rem_x, rem_y = sample_remember_set(store, cfg.remember_size, rng)
    reinit_seed = int(rng.integers(2**63))
    return traj, rem_x, rem_y, reinit_seed


def run_episode(
    model: Model,
    traj: TaskTrajectory,
    rem_x: np.ndarray,
    rem_y: np.ndarray,
    cfg: MetaTrainConfig,
    reinit_seed: int,
    leaves: ParameterSet | None = None,
) -> EpisodeResult:
    """Reinit, differentiable inner loop, meta-loss on trajectory + remember set, meta-gradient."""
    meta_names = model.params.where("meta_learned")
    leaves = model.params.as_leaves(meta_names) if leaves is None else leaves
    label = int(traj.labels[0])
    start = reinit_output_column(leaves, label, reinit_seed, model.head_names)

    k = len(traj)
    x = model.images(np.concatenate([traj.images, rem_x]) if len(rem_x) else traj.images)
    y = np.concatenate([traj.labels, rem_y]).astype(np.int64)
    prefix, suffix = model.plan(start.where("inner_plastic"))
    cache = prefix(start, x)
    inner_cache = tuple(ops.rows(c, 0, k) for c in cache)
    final, losses = unroll(
        suffix,
        start,
        ops.rows(x, 0, k),
        inner_cache,
        traj.labels,
        cfg.beta,
        "inner_plastic",
        differentiable=True,
        create_graph=not cfg.first_order,
    )
    logits = suffix(final, x, cache)
    meta_loss = ops.softmax_cross_entropy(logits, y)
    value = float(meta_loss.data)
    if not math.isfinite(value):
        raise NonFiniteError(f"meta-loss is {value} (class {label})")

    # per-part losses for the metrics stream, from the same logits
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    nll = np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]
    grads = backward(meta_loss, [leaves[n] for n in meta_names])
    garr = {n: g.data for n, g in zip(meta_names, grads)}
    return EpisodeResult(
        initial=start,
        losses=losses,
        final=final,
        meta_loss=value,
        traj_loss=float(nll[:k].mean()),
        rem_loss=float(nll[k:].mean()) if len(y) > k else math.nan,
        grad_norm_nm=_norm(a for n, a in garr.items() if not n.startswith("pln.")),
        grad_norm_pln=_norm(a for n, a in garr.items() if n.startswith("pln.")),
        grads=garr,
    )


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        return grads
    total = _norm(grads.values())
    if total <= max_norm:
        return grads
    return {n: g * (max_norm / total) for n, g in grads.items()}


def meta_step(
    model: Model,
    store: ClassInstanceStore,
    cfg: MetaTrainConfig,
    opt_state: AdamState,
    iteration: int,
) -> tuple[Model, dict[str, float]]:
    """One outer iteration; ``opt_state`` is advanced in place."""
    traj, rem_x, rem_y, reinit_seed = sample_episode(store, cfg, iteration)
    ep = run_episode(model, traj, rem_x, rem_y, cfg, reinit_seed)
    grads = clip_gradients(ep.grads, cfg.grad_clip)
    params = nn.adam_step(model.params, grads, opt_state, cfg.alpha)
    metrics = {
        "iter": iteration,
        "meta_loss": ep.meta_loss,
        "traj_loss": ep.traj_loss,
        "rem_loss": ep.rem_loss,
        "grad_norm_nm": ep.grad_norm_nm,
        "grad_norm_pln": ep.grad_norm_pln,
    }
    return model.with_params(params), metrics


# ---------------------------------------------------------------- run loop


def format_metrics(row: dict[str, float]) -> list[str]:
    return [str(int(row["iter"]))] + [f"{float(row[c]):.9g}" for c in METRIC_COLUMNS[1:]]


def checkpoint_metadata(model: Model, cfg: MetaTrainConfig, iteration: int) -> dict[str, object]:
    meta: dict[str, object] = {"iteration": iteration, "architecture": model.kind}
    meta.update({f"train.{k}": v for k, v in asdict(cfg).items()})
    meta.update({f"profile.{k}": v for k, v in profile_to_dict(model.profile).items()})
    return meta


def meta_train(
    model: Model,
    store: ClassInstanceStore,
    cfg: MetaTrainConfig,
    run_dir: str | Path | None = None,
    opt_state: AdamState | None = None,
    start_iteration: int = 0,
    on_iteration: Callable[[dict[str, float]], None] | None = None,
) -> tuple[Model, AdamState, list[dict[str, float]]]:
    """Outer loop from ``start_iteration`` + 1 to ``cfg.iterations``.

    With a run directory, rows go to ``metrics.csv`` (rows past the start
    iteration are dropped first, so a resumed run rewrites an identical file)
    and checkpoints to ``ckpt/iter-NNNNNN`` every ``checkpoint_every`` plus
    ``ckpt/final``.
    """
    if len(store.meta_train) > model.profile.n_outputs:
        raise ValueError(f"{len(store.meta_train)} meta-train classes exceed head width {model.profile.n_outputs}")
    state = AdamState.for_params(model.params) if opt_state is None else opt_state
    history: list[dict[str, float]] = []
    writer = None
    fh = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        path = run_dir / "metrics.csv"
        kept: list[list[str]] = []
        if path.exists() and start_iteration > 0:
            with path.open(newline="") as old:
                kept = [r for r in list(csv.reader(old))[1:] if int(r[0]) <= start_iteration]
        fh = path.open("w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        writer.writerows(kept)
    t0 = time.perf_counter()
    try:
        for it in range(start_iteration + 1, cfg.iterations + 1):
            model, row = meta_step(model, store, cfg, state, it)
            history.append(row)
            if writer is not None:
                writer.writerow(format_metrics(row))
            if on_iteration is not None:
                on_iteration(row)
            if it % 100 == 0:
                log.info("iter %d meta_loss %.4f (%.1fs)", it, row["meta_loss"], time.perf_counter() - t0)
            if run_dir is not None and (it % cfg.checkpoint_every == 0 or it == cfg.iterations):
                fh.flush()
                meta = checkpoint_metadata(model, cfg, it)
                tag = "final" if it == cfg.iterations else f"iter-{it:06d}"
                nn.save_checkpoint(run_dir / "ckpt" / tag, model.params, meta, state)
    finally:
        if fh is not None:
            fh.close()
    return model, state, history


# ---------------------------------------------------------------- i.i.d. pretraining


@dataclass
class PretrainConfig:
    batch_size: int = 32
    alpha: float = 1e-3
    seed: int = 0


def pretrain_schedule(image_budget: int, n_images: int, batch_size: int) -> list[int]:
    """Batch sizes summing to exactly ``image_budget``."""
    if image_budget < 0 or batch_size <= 0 or n_images <= 0:
        raise ValueError("budget must be non-negative and batch/data sizes positive")
    full, rest = divmod(image_budget, batch_size)
    return [batch_size] * full + ([rest] if rest else [])


def pretrain_iid(
    model: Model,
    store: ClassInstanceStore,
    image_budget: int,
    cfg: PretrainConfig | None = None,
) -> tuple[Model, int]:
    """Supervised Adam training of every parameter on shuffled meta-train images.

    Returns the trained model and the number of image evaluations spent.
    """
    cfg = cfg or PretrainConfig()
    n_per = store.n_instances
    total = len(store.meta_train) * n_per
    if len(store.meta_train) > model.profile.n_outputs:
        raise ValueError("head narrower than the meta-train class count")
    if image_budget == 0:
        return model, 0
    names = model.params.names()
    trainable = model.params.with_flags({n: nn.Flags(True, False, False) for n in names})
    state = AdamState.for_params(trainable)
    rng = np.random.default_rng(cfg.seed)
    order = np.zeros(0, dtype=np.int64)
    spent = 0
    params = trainable
    for bs in pretrain_schedule(image_budget, total, cfg.batch_size):
        if len(order) < bs:
            order = np.concatenate([order, rng.permutation(total)])
        idx, order = order[:bs], order[bs:]
        labels, inst = np.divmod(idx, n_per)
        x = store.images[store.meta_train[labels], inst]
        leaves = params.as_leaves()
        loss = ops.softmax_cross_entropy(model.forward(leaves, x), labels)
        if not math.isfinite(float(loss.data)):
            raise NonFiniteError(f"pretraining loss non-finite after {spent} images")
        grads = backward(loss, [leaves[n] for n in names])
        params = nn.adam_step(params, grads, state, cfg.alpha)
        spent += bs
    log.info("pretraining spent %d image evaluations", spent)
    return model.with_params(params.with_flags(model.params.flags)), spent


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, params: ParameterSet | None = None, chunk: int = 256) -> float:
    values = model.params if params is None else params
    if len(labels) == 0:
        return math.nan
    correct = 0
    with no_grad():
        for s in range(0, len(labels), chunk):
            logits = model.forward(values, images[s : s + chunk])
            correct += int((logits.data.argmax(axis=1) == labels[s : s + chunk]).sum())
    return correct / len(labels)
