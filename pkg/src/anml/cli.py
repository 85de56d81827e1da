"""Command-line front end: ``anml {fetch-data,meta-train,meta-test,analyze}``."""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, data, metatest, nn
from .autodiff import NonFiniteError
from .config import ConfigError, RunConfig, load_config
from .metatrain import MetaTrainConfig, PretrainConfig, meta_train, pretrain_iid, unroll
from .models import Model, build_model, get_profile, profile_from_dict, profile_to_dict, treatment_profile

log = logging.getLogger("anml")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def resolve_config(args) -> RunConfig:
    overrides = list(args.set or [])
    for key in ("seed", "out", "profile", "treatment", "tag"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(args.config, overrides)


def new_run_dir(cfg: RunConfig, name: str | None) -> Path:
    root = Path(cfg.out)
    if name is None:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        name = f"{stamp}-{cfg.tag or cfg.treatment.replace(':', '_').replace('+', '_')}"
        candidate, i = root / name, 1
        while candidate.exists():
            candidate, i = root / f"{name}-{i}", i + 1
    else:
        candidate = root / name
    for sub in ("ckpt", "reports"):
        (candidate / sub).mkdir(parents=True, exist_ok=True)
    (candidate / "config.snapshot").write_text(cfg.to_text())
    return candidate


def load_store(cfg: RunConfig) -> data.ClassInstanceStore:
    size = get_profile(cfg.profile).image_size
    if cfg.dataset == "synthetic":
        return data.make_synthetic_store(
            cfg.synthetic_classes, cfg.synthetic_instances, size, cfg.data_seed, cfg.synthetic_meta_test
        )
    root = cfg.data_root or str(data.default_data_root())
    return data.load_omniglot(root, cfg.data_seed, size, n_meta_test=cfg.n_meta_test)


def _dtype(cfg: RunConfig):
    return np.float64 if cfg.dtype == "float64" else np.float32


def fresh_model(cfg: RunConfig, treatment: str, seed: int) -> Model:
    return treatment_profile(treatment).build(get_profile(cfg.profile), seed, _dtype(cfg))


def model_from_checkpoint(path: str | Path) -> tuple[Model, nn.Checkpoint]:
    ckpt = nn.load_checkpoint(path)
    meta = ckpt.metadata
    try:
        profile = profile_from_dict({k[len("profile.") :]: v for k, v in meta.items() if k.startswith("profile.")})
        kind = meta["architecture"]
    except KeyError as exc:
        raise CliError("CHECKPOINT", f"{path}: metadata lacks {exc}") from None
    return build_model(kind, ckpt.params, profile), ckpt


def _train_config(cfg: RunConfig) -> MetaTrainConfig:
    return MetaTrainConfig(
        k=cfg.k,
        remember_size=cfg.remember_size,
        iterations=cfg.iterations,
        alpha=cfg.alpha,
        beta=cfg.beta,
        seed=cfg.seed,
        profile=cfg.profile,
        treatment=cfg.treatment,
        grad_clip=cfg.grad_clip,
        first_order=cfg.first_order,
        checkpoint_every=cfg.checkpoint_every,
    )


# ---------------------------------------------------------------- commands


def cmd_fetch_data(args) -> int:
    root = args.root or str(data.default_data_root())
    urls = tuple(args.url) if args.url else data.OMNIGLOT_URLS
    status = data.fetch_omniglot(root, urls, offline=args.offline, expected_classes=args.expected_classes)
    print(f"{status}: {root}")
    return 0


def cmd_metatrain(args) -> int:
    cfg = resolve_config(args)
    store = load_store(cfg)
    run = new_run_dir(cfg, args.run_name)
    t = treatment_profile(cfg.treatment)
    if not t.meta_trained:
        model = fresh_model(cfg, cfg.treatment, cfg.seed)
        spent = 0
        if t.pretrained:
            model, spent = pretrain_iid(
                model, store, cfg.pretrain_budget, PretrainConfig(cfg.pretrain_batch, cfg.alpha, cfg.seed)
            )
        meta: dict[str, object] = {"iteration": 0, "architecture": model.kind}
        meta.update({"train.treatment": cfg.treatment, "train.seed": cfg.seed, "pretrain_images": spent})
        meta.update({f"profile.{k}": v for k, v in profile_to_dict(model.profile).items()})
        nn.save_checkpoint(run / "ckpt" / "final", model.params, meta)
        print(run)
        return 0

    tcfg = _train_config(cfg)
    opt_state = None
    start = 0
    if args.resume:
        model, ckpt = model_from_checkpoint(args.resume)
        model = t.apply(model)
        opt_state = ckpt.adam
        start = int(ckpt.metadata.get("iteration", 0))
        src = Path(args.resume).resolve().parent.parent / "metrics.csv"
        dst = run / "metrics.csv"
        if src.exists() and src.resolve() != dst.resolve():
            shutil.copyfile(src, dst)
    else:
        model = fresh_model(cfg, cfg.treatment, cfg.seed)
    if opt_state is None:
        opt_state = nn.AdamState.for_params(model.params)
    meta_train(model, store, tcfg, run, opt_state, start)
    print(run)
    return 0


def cmd_metatest(args) -> int:
    cfg = resolve_config(args)
    store = load_store(cfg)
    base = None
    if args.checkpoint:
        base, _ = model_from_checkpoint(args.checkpoint)

    def model_for(treatment: str, seed: int) -> Model:
        t = treatment_profile(treatment)
        if t.name == "Scratch":
            return fresh_model(cfg, t.name, seed)
        if base is None:
            raise CliError("CHECKPOINT", f"treatment {treatment} needs --checkpoint")
        if base.kind != t.architecture:
            raise CliError("CHECKPOINT", f"checkpoint holds a {base.kind} model, {treatment} needs {t.architecture}")
        return base

    for name in cfg.treatments:
        t = treatment_profile(name)
        if t.name != "Scratch" and base is not None and base.kind != t.architecture:
            raise CliError("CHECKPOINT", f"checkpoint holds a {base.kind} model, {name} needs {t.architecture}")
    run = new_run_dir(cfg, args.run_name)
    mcfg = metatest.MatrixConfig(
        treatments=cfg.treatments,
        lengths=cfg.lengths,
        seeds=cfg.seeds,
        betas=cfg.betas,
        search_seeds=cfg.search_seeds,
        epochs=cfg.epochs,
        dry_run=cfg.dry_run,
    )
    reports = metatest.run_matrix(mcfg, model_for, store, run / "reports")
    for r in reports:
        status = "FAILED " + str(r.failed) if r.failed else f"train {r.train_acc:.3f} test {r.test_acc:.3f}"
        print(f"{r.treatment} n={r.n_classes} seed={r.seed} beta={r.beta:g} steps={r.steps} "
              f"first_class_gap={r.first_class_gap} {status}")
    drops = metatest.relative_drops(reports)
    for (name, n), d in sorted(drops.items()):
        print(f"relative_drop {name} n={n} {d:.4f}")
    print(run)
    return 0 if not any(r.failed for r in reports) else 3


def cmd_analyze(args) -> int:
    cfg = resolve_config(args)
    store = load_store(cfg)
    model, _ = model_from_checkpoint(args.checkpoint)
    treatment = cfg.treatment if treatment_profile(cfg.treatment).architecture == model.kind else (
        "ANML" if model.kind == "anml" else "OML"
    )
    model = treatment_profile(treatment).apply(model)
    run = new_run_dir(cfg, args.run_name)
    traj = data.make_metatest_trajectory(store, cfg.analysis_classes, np.random.default_rng([cfg.seed, 0]))
    params = model.params
    prefix, suffix = model.plan(params.where("metatest_plastic"))
    cache = metatest.prefix_cache(prefix, params, traj.images, model)
    tuned, _ = unroll(suffix, params, model.images(traj.images), cache, traj.labels, cfg.beta, "metatest_plastic")
    for phase, values in (("before_finetune", params), ("after_finetune", tuned)):
        dump, stats = analysis.analyze(
            model,
            traj.images,
            traj.labels,
            traj.test_images,
            traj.test_labels,
            k=cfg.knn_k,
            threshold=cfg.active_threshold,
            params=values,
            phase=phase,
            control_seed=cfg.seed,
            train_instances=traj.instance_ids,
            test_instances=np.tile(np.arange(store.n_metatest_train, store.n_instances), traj.n_classes),
        )
        analysis.export_activations(dump, run / "reports" / f"activations-{phase}.csv")
        analysis.write_stats(stats, run / "reports" / f"stats-{phase}.txt")
        for kind, s in stats["sparsity"].items():
            print(f"{phase} {kind} active={s['mean_active_fraction']:.4f} dead={s['dead_neurons']} "
                  f"knn={stats['knn'][kind]:.4f}")
    print(run)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="root directory for run directories")
    common.add_argument("--profile", choices=("full", "desk"))
    common.add_argument("--treatment")
    common.add_argument("--tag")
    common.add_argument("--run-name", help="exact run directory name under --out (default: timestamp-tag)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="anml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fetch-data", help="download and verify Omniglot")
    p.add_argument("--root", help=f"data root (default ${data.DATA_ROOT_ENV} or data/omniglot)")
    p.add_argument("--url", action="append", help="archive URL (repeatable)")
    p.add_argument("--offline", action="store_true", help="only validate an existing tree")
    p.add_argument("--expected-classes", type=int, default=data.OMNIGLOT_CLASSES)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_fetch_data)

    p = sub.add_parser("meta-train", parents=[common], help="run the meta-training outer loop")
    p.add_argument("--resume", metavar="CKPT", help="checkpoint directory to continue from")
    p.set_defaults(func=cmd_metatrain)

    p = sub.add_parser("meta-test", parents=[common], help="evaluate treatments over lengths and seeds")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.set_defaults(func=cmd_metatest)

    p = sub.add_parser("analyze", parents=[common], help="sparsity and KNN analyses of a checkpoint")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except ConfigError as exc:
        code, msg = "CONFIG", str(exc)
    except data.DatasetError as exc:
        code, msg = "DATA", str(exc)
    except NonFiniteError as exc:
        code, msg = "NONFINITE", str(exc)
    except (ValueError, KeyError) as exc:
        code, msg = "INVALID", str(exc)
    except OSError as exc:
        code, msg = "IO", str(exc)
    print(f"error[{code}]: {' '.join(msg.split())}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
