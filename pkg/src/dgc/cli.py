"""Command-line entry point: gen-data, train, eval, compare, grad-check.

Exit status: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from . import config as cfgmod
from . import metrics, trainer
from .config import RunConfig
from .data import (
    ImageFormatError,
    ImageStore,
    ManifestError,
    generate_synthetic,
    load_manifest,
    save_manifest,
    split_patient_level,
    write_pgm,
    write_split_list,
)
from .gradcheck import run_suite, summarize
from .model import DETERMINISTIC, GENERATIVE, ConfigError
from .objective import NumericalError
from .plotting import roc_svg

log = logging.getLogger("dgc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _resolve_config(args) -> RunConfig:
    cfg = cfgmod.PRESETS[args.preset]()
    if args.config:
        cfg = cfgmod.load_config(args.config, base=cfg)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            train=dataclasses.replace(
                cfg.train, init_seed=args.seed, shuffle_seed=args.seed + 1, noise_seed=args.seed + 2
            ),
        )
    return cfg


def _header(cfg: RunConfig, **extra) -> dict[str, object]:
    h: dict[str, object] = {f"config.{k}": v for k, v in cfgmod.to_items(cfg).items()}
    h.update(extra)
    return h


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _sidecar(out: Path, name: str, lines: list[str]) -> None:
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(out / name, "a", encoding="utf-8") as fh:
        for line in lines:
            fh.write(f"{stamp} {line}\n")


def _split_fractions(cfg: RunConfig) -> tuple[float, float, float]:
    total = cfg.n_train + cfg.n_val + cfg.n_test
    return cfg.n_train / total, cfg.n_val / total, cfg.n_test / total


def _synthetic_splits(cfg: RunConfig):
    total = cfg.n_train + cfg.n_val + cfg.n_test
    images, manifest = generate_synthetic(cfg.synthetic, total)
    splits = split_patient_level(manifest, _split_fractions(cfg), seed=cfg.synthetic.seed)
    return images, manifest, splits


def _train_cfg(cfg: RunConfig, mode: str | None = None, **overrides) -> cfgmod.TrainConfig:
    t = cfg.train
    if mode is not None:
        t = dataclasses.replace(t, model=dataclasses.replace(t.model, mode=mode))
    return dataclasses.replace(t, **overrides) if overrides else t


# ----------------------------------------------------------------- commands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, _, splits = _synthetic_splits(cfg)
    head = _header(cfg)
    comments = [f"{k}={head[k]}" for k in sorted(head)]
    pgm_comment = "\n".join(c for c in comments if c.split("=", 1)[0] in _PGM_KEYS)
    for path, pixels in images.items():
        write_pgm(out / "images" / path, pixels, comment=pgm_comment)
    everything = []
    for name, split in zip(("train", "val", "test"), splits):
        moved = split.subset([dataclasses.replace(r, image_path=f"images/{r.image_path}") for r in split])
        everything.extend(moved.records)
        save_manifest(moved, out / f"{name}.csv", comments)
        write_split_list(out / f"{name}.txt", split.patients())
    save_manifest(splits[0].subset(everything), out / "manifest.csv", comments)
    print(f"wrote {len(images)} images and train/val/test manifests to {out}")
    return EXIT_OK


_PGM_KEYS = {f"config.{k}" for k in ("data_seed", "synthetic_size", "amplitude", "pixel_noise_std", "prevalence")}


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_m = load_manifest(args.train)
    val_m = load_manifest(args.val)
    root = Path(args.images_root) if args.images_root else Path(args.train).parent
    tc = _train_cfg(cfg, args.mode)
    result = trainer.train(tc, train_m, val_m, ImageStore(root=root))
    trainer.save_checkpoint(result.best, out / "checkpoint.dgc")
    _write(out / "history.csv", trainer.history_csv(result.history, _header(cfg, mode=tc.model.mode)))
    _sidecar(out, "run.log", [f"train epoch={h.epoch} wall_seconds={h.wall_seconds:.3f}" for h in result.history])
    print(f"best epoch {result.best.epoch}: val mean AUC {result.best.metric:.4f} -> {out / 'checkpoint.dgc'}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = trainer.load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    if manifest.n_labels != ckpt.model.config.n_labels:
        raise UsageError(f"manifest has {manifest.n_labels} labels, checkpoint has {ckpt.model.config.n_labels}")
    root = Path(args.images_root) if args.images_root else Path(args.manifest).parent
    noise = args.eval_noise_std if args.eval_noise_std is not None else cfg.eval_noise_std
    report = trainer.evaluate(ckpt, manifest, ImageStore(root=root), pixel_noise_std=noise, noise_seed=cfg.eval_noise_seed)
    ckpt_items = {f"checkpoint.{k}": v for k, v in cfgmod.train_items(ckpt.config).items()}
    header = {"checkpoint": Path(args.checkpoint).name, "eval_noise_std": noise, **ckpt_items}
    run = ckpt.model.mode
    _write(out / "roc.csv", metrics.roc_csv(report, header))
    _write(out / "auc.csv", metrics.auc_csv({run: report}, header))
    if args.svg:
        _write(out / "roc.svg", roc_svg({run: report}))
    print(f"mean AUC {report.mean_auc:.4f} over {len(report.aucs)} labels")
    return EXIT_OK


def cmd_compare(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    noise = args.eval_noise_std if args.eval_noise_std is not None else cfg.eval_noise_std
    if args.data:
        data = Path(args.data)
        train_m, val_m, test_m = (load_manifest(data / f"{n}.csv") for n in ("train", "val", "test"))
        store = ImageStore(root=data)
    else:
        images, _, (train_m, val_m, test_m) = _synthetic_splits(cfg)
        store = ImageStore(images)
    base = cfg.train.init_seed
    runs: dict[str, list[metrics.RocReport]] = {GENERATIVE: [], DETERMINISTIC: []}
    per_seed: dict[str, metrics.RocReport] = {}
    timings = []
    for k in range(args.seeds):
        seed = base + 100 * k
        for mode in (GENERATIVE, DETERMINISTIC):
            # paired: both modes share init and shuffle seeds for the same k
            tc = _train_cfg(cfg, mode, init_seed=seed, shuffle_seed=seed + 1, noise_seed=seed + 2)
            t0 = time.perf_counter()
            result = trainer.train(tc, train_m, val_m, store)
            report = trainer.evaluate(
                result.best, test_m, store, pixel_noise_std=noise, noise_seed=cfg.eval_noise_seed + k
            )
            timings.append(f"compare seed={seed} mode={mode} wall_seconds={time.perf_counter() - t0:.3f}")
            runs[mode].append(report)
            per_seed[f"{mode}.seed{seed}"] = report
            print(f"seed {seed} {mode}: test mean AUC {report.mean_auc:.4f}", flush=True)
    comparison = metrics.compare_report(runs, reference=DETERMINISTIC)
    header = _header(cfg, seeds=args.seeds, eval_noise_std=noise)
    _write(out / "compare.csv", comparison.to_csv(header))
    _write(out / "compare.txt", comparison.to_text())
    _write(out / "auc.csv", metrics.auc_csv(per_seed, header))
    if args.svg:
        _write(out / "roc.svg", roc_svg({GENERATIVE: runs[GENERATIVE][0], DETERMINISTIC: runs[DETERMINISTIC][0]}))
    _sidecar(out, "run.log", timings)
    gen, det = comparison.mean_row(GENERATIVE), comparison.mean_row(DETERMINISTIC)
    verdict = "PASS" if gen.auc_mean >= det.auc_mean - 0.02 else "FAIL"
    print(comparison.to_text(), end="")
    print(
        f"non-inferiority (generative >= deterministic - 0.02): {verdict} "
        f"[{gen.auc_mean:.4f} vs {det.auc_mean:.4f}, delta {gen.delta:+.4f}]"
    )
    return EXIT_OK


def cmd_grad_check(args, cfg: RunConfig) -> int:
    results, secs = run_suite(args.seeds, start_seed=args.seed or 0)
    failed = 0
    for name, s in summarize(results).items():
        status = "ok" if s.passed else "FAIL"
        failed += not s.passed
        print(
            f"{status:4} {name:32} max_rel_err={s.max_rel_error:.2e} checked={s.checked} "
            f"kinks={s.kinks} below_roundoff={s.unresolved}"
        )
    print(f"{len(results)} checks over {args.seeds} seeds in {secs:.1f}s; {failed} failing")
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value run configuration file")
    common.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default="desk")
    common.add_argument("--seed", type=int, help="base seed (init; shuffle=seed+1, noise=seed+2)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dgc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write a synthetic PGM dataset with patient-level splits")

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--train", required=True, help="training manifest CSV")
    t.add_argument("--val", required=True, help="validation manifest CSV")
    t.add_argument("--images-root", help="directory image paths are relative to")
    t.add_argument("--mode", choices=(GENERATIVE, DETERMINISTIC))

    e = sub.add_parser("eval", parents=[common], help="ROC/AUC of a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--images-root")
    e.add_argument("--eval-noise-std", type=float)
    e.add_argument("--svg", action="store_true", help="also render roc.svg")

    c = sub.add_parser("compare", parents=[common], help="generative vs deterministic over paired seeds")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--data", help="directory from gen-data (default: generate in memory)")
    c.add_argument("--eval-noise-std", type=float)
    c.add_argument("--svg", action="store_true")

    g = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=20)

    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
        cfg.train.model.validate()
        cfg.synthetic.validate()
    except (cfgmod.ConfigFileError, ConfigError, ValueError, OSError) as exc:
        print(f"dgc: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    fn = COMMANDS.get(args.command)
    if fn is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return fn(args, cfg)
    except (UsageError, ManifestError, FileNotFoundError) as exc:
        print(f"dgc: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        trainer.TrainingError,
        trainer.CheckpointError,
        NumericalError,
        ImageFormatError,
        FloatingPointError,
    ) as exc:
        print(f"dgc: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
