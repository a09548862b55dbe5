"""Command-line entry point: ``panogan <subcommand> [--config PATH] [--seed N] [--threads N] [--out DIR]``."""
from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import anomaly, evaluation
from .checkpoint import load_checkpoint, save_checkpoint, tensor_digest
from .config import RunConfig, derive_seed, load_config
from .datasets import PatchDataset, load_dataset, save_dataset, synth_anomalous, synth_healthy
from .encoder import (FrozenGan, build_encoder, encoder_checkpoint, encoder_train_epoch,
                      load_encoder, make_optimizer)
from .errors import ConfigError, InvalidInputError, PanoganError, TrainingDivergedError
from .pgan import ProgressiveTrainer, load_gan, module_tensors
from .preprocess import (ABNORMAL, HEALTHY_SOURCE, NORMAL, UNHEALTHY_SOURCE, check_annotations,
                         clahe, extract_patches, label_patches, read_annotations, read_image,
                         read_pgm, resize)

IMAGE_SUFFIXES = (".pgm", ".raw")


# ------------------------------------------------------------------ helpers

class Run:
    """Resolved configuration plus the output directory of one invocation."""

    def __init__(self, cfg: RunConfig, out: Path, command: str):
        self.cfg, self.out, self.command = cfg, out, command

    def path(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.out / p

    def write_resolved_config(self):
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / f"config.{self.command}.json").write_text(self.cfg.to_json())

    @property
    def gan_dir(self) -> Path:
        return self.out / "gan"

    @property
    def encoder_dir(self) -> Path:
        return self.out / "encoder"

    @property
    def eval_dir(self) -> Path:
        return self.out / "eval"


class JsonLines:
    def __init__(self, path: Path, keep_while=None):
        # on resume, drop records written after the checkpoint we restarted from
        lines = []
        if keep_while is not None and path.exists():
            for line in path.read_text().splitlines():
                if keep_while(json.loads(line)):
                    lines.append(line + "\n")
        path.write_text("".join(lines))
        self.fh = open(path, "a")

    def __call__(self, record: dict):
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    torch.set_num_threads(n)
    # a single thread is the reproducible mode
    torch.use_deterministic_algorithms(n == 1)


# ---------------------------------------------------------------- synth

def _labelled_set(name, size, normal_n, normal_seed, lesion_n, lesion_seed, synth):
    parts = []
    if normal_n:
        parts.append(synth_healthy(normal_n, size, normal_seed, source=f"{name}-normal"))
    if lesion_n:
        parts.append(synth_anomalous(lesion_n, size, lesion_seed, synth.radius, synth.contrast,
                                     source=f"{name}-lesion"))
    patches = [p for ds in parts for p in ds.patches]
    return PatchDataset(size, patches, {"source": name, "parts": [ds.manifest for ds in parts]})


def cmd_synth(run: Run, args) -> None:
    cfg, s = run.cfg, run.cfg.synth
    seed = lambda tag: derive_seed(cfg.seed, tag)  # noqa: E731
    train = synth_healthy(s.n_train, cfg.patch_size, seed("synth-train"), source="synth-train")
    outputs = {"train": train,
               "val": _labelled_set("synth-val", cfg.patch_size, s.n_val_normal, seed("synth-val-normal"),
                                    s.n_val_abnormal, seed("synth-val-lesion"), s),
               "test": _labelled_set("synth-test", cfg.patch_size, s.n_test_normal,
                                     seed("synth-test-normal"), s.n_test_abnormal,
                                     seed("synth-test-lesion"), s)}
    for split, ds in outputs.items():
        if not len(ds):
            continue
        path = run.path(getattr(cfg.data, split))
        path.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, path)
        print(f"{split}: {path} {ds.manifest['counts']}")


# ----------------------------------------------------------- preprocess

def _source_images(folder: Path):
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES and not p.name.endswith(".mask.pgm"))


def _image_patches(cfg: RunConfig, image_path: Path, policy: str):
    pp = cfg.preprocess
    mask_path = image_path.with_name(image_path.stem + ".mask.pgm")
    if not mask_path.exists():
        raise InvalidInputError(f"missing lung mask for image {image_path.name} "
                                f"(expected {mask_path.name})")
    image = read_image(image_path)
    mask = read_pgm(mask_path) > 0
    if mask.shape != image.shape:
        raise InvalidInputError(f"mask {mask_path.name} is {mask.shape}, image {image_path.name} "
                                f"is {image.shape}")
    if pp.resize:
        image = resize(image, pp.resize)
        mask = resize(mask.astype(np.float64), pp.resize) >= 0.5
    annotations = []
    if policy == UNHEALTHY_SOURCE:
        ann_path = image_path.with_name(image_path.stem + ".json")
        if not ann_path.exists():
            raise InvalidInputError(f"missing nodule annotation for image {image_path.name}")
        _, annotations = read_annotations(ann_path)
        check_annotations(annotations, image.shape)
    image = clahe(image, pp.clahe)
    patches = extract_patches(image, mask, cfg.patch_size, pp.stride, pp.min_coverage,
                              source=image_path.stem)
    return label_patches(patches, annotations, policy)


def _split_counts(n: int, fractions) -> list[int]:
    cuts = np.rint(np.cumsum(fractions) * n).astype(int)
    return np.diff(np.r_[0, cuts]).tolist()


def cmd_preprocess(run: Run, args) -> None:
    cfg = run.cfg
    if args.input:
        cfg.preprocess.input_dir = args.input
    if not cfg.preprocess.input_dir:
        raise ConfigError("preprocess.input_dir is not set (use --input or the config file)")
    root = Path(cfg.preprocess.input_dir)
    if not root.is_dir():
        raise InvalidInputError(f"input directory {root} does not exist")
    rng = np.random.default_rng(derive_seed(cfg.seed, "split"))
    split = {"train": [], "val": [], "test": []}
    train_f, val_f, test_f = cfg.preprocess.split
    for policy, folder, fractions in (
            (HEALTHY_SOURCE, "healthy", (train_f, val_f, test_f)),
            (UNHEALTHY_SOURCE, "unhealthy", (0.0, val_f / (val_f + test_f) if val_f + test_f else 0.0,
                                             test_f / (val_f + test_f) if val_f + test_f else 1.0))):
        images = _source_images(root / folder)
        order = rng.permutation(len(images))
        # images are split whole so no image contributes to two splits
        counts = _split_counts(len(images), fractions)
        start = 0
        for name, count in zip(("train", "val", "test"), counts):
            for i in order[start:start + count]:
                split[name].extend(_image_patches(cfg, images[i], policy))
            start += count
    if not any(split.values()):
        raise InvalidInputError(f"no images found under {root}/healthy or {root}/unhealthy")
    params = {"input_dir": str(root), "resize": cfg.preprocess.resize,
              "stride": cfg.preprocess.stride, "min_coverage": cfg.preprocess.min_coverage,
              "clahe": vars(cfg.preprocess.clahe)}
    for name, patches in split.items():
        ds = PatchDataset(cfg.patch_size, patches, {"source": f"preprocess-{name}", "params": params})
        path = run.path(getattr(cfg.data, name))
        path.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(ds, path)
        print(f"{name}: {path} {ds.manifest['counts']}")


# ------------------------------------------------------------ train-gan

def _normal_array(run: Run, split: str = "train") -> np.ndarray:
    ds = load_dataset(run.path(getattr(run.cfg.data, split)), run.cfg.patch_size)
    normal = ds.subset(NORMAL)
    if not len(normal):
        raise InvalidInputError(f"{split} dataset has no normal patches")
    return normal.array()


def cmd_train_gan(run: Run, args) -> None:
    cfg = run.cfg
    real = _normal_array(run)
    gdir = run.gan_dir
    gdir.mkdir(parents=True, exist_ok=True)
    last = gdir / "last.ckpt"
    if args.resume and last.exists():
        meta, tensors = load_checkpoint(last)
        if meta.get("arch") != vars(cfg.gan.arch):
            raise ConfigError("checkpoint architecture differs from the configured one")
        trainer = ProgressiveTrainer.restore(real, meta, tensors)
        log = JsonLines(gdir / "log.jsonl", lambda r: r["step"] < trainer.step_count)
    else:
        trainer = ProgressiveTrainer(real, cfg.gan.arch, cfg.gan.schedule(), cfg.gan.train,
                                     derive_seed(cfg.seed, "gan"))
        log = JsonLines(gdir / "log.jsonl")

    def sink(t):
        meta, tensors = t.checkpoint()
        name = "final.ckpt" if t.done else f"step{t.step_count:08d}.ckpt"
        save_checkpoint(gdir / name, meta, tensors)
        save_checkpoint(last, meta, tensors)

    start = time.perf_counter()
    try:
        trainer.run(log=log, sink=sink, every=cfg.gan.checkpoint_every)
    except TrainingDivergedError as exc:
        write_json(gdir / "diverged.json", {"error": str(exc), **exc.diagnostics})
        raise
    finally:
        log.close()
    write_json(gdir / "timing.json", {"seconds": time.perf_counter() - start,
                                      "steps": trainer.step_count})
    print(f"GAN trained for {trainer.step_count} steps; checkpoint {gdir / 'final.ckpt'}")


# -------------------------------------------------------- train-encoder

def _frozen_gan(run: Run) -> FrozenGan:
    path = run.gan_dir / "final.ckpt"
    if not path.exists():
        raise InvalidInputError(f"no final GAN checkpoint at {path}; run train-gan first")
    g, d, scale, alpha = load_gan(*load_checkpoint(path))
    if g.cfg.latent_dim != run.cfg.gan.arch.latent_dim or scale != run.cfg.patch_size:
        raise ConfigError("GAN checkpoint does not match the configured latent size / patch size")
    return FrozenGan(g, d, scale, alpha)


def _gan_digest(gan: FrozenGan) -> str:
    return tensor_digest({**module_tensors("g", gan.g), **module_tensors("d", gan.d)})


def _latest_epoch(edir: Path):
    found = sorted(edir.glob("epoch_*.ckpt"))
    return found[-1] if found else None


def cmd_train_encoder(run: Run, args) -> None:
    cfg = run.cfg
    gan = _frozen_gan(run)
    real = _normal_array(run)
    val_path = run.path(cfg.data.val)
    val = load_dataset(val_path, cfg.patch_size) if val_path.exists() else None
    if val is not None and (not len(val.subset(NORMAL)) or not len(val.subset(ABNORMAL))):
        val = None  # selection needs both classes; fall back to the last epoch
    edir = run.encoder_dir
    edir.mkdir(parents=True, exist_ok=True)
    ecfg, tcfg, loss = cfg.encoder_config(), cfg.encoder.train, cfg.encoder.loss

    latest = _latest_epoch(edir) if args.resume else None
    if latest is not None:
        meta, tensors = load_checkpoint(latest)
        if meta.get("encoder") != vars(ecfg) or meta.get("loss") != vars(loss):
            raise ConfigError(f"{latest.name} was trained with a different encoder configuration")
        e, opt = load_encoder(meta, tensors, tcfg)
        start, aucs = meta["epoch"] + 1, list(meta["aucs"])
        log = JsonLines(edir / "log.jsonl", lambda r: r["epoch"] < start)
    else:
        e = build_encoder(ecfg)
        opt = make_optimizer(e, tcfg)
        start, aucs = 0, []
        log = JsonLines(edir / "log.jsonl")

    digest = _gan_digest(gan)
    seed = derive_seed(cfg.seed, "encoder-train")
    started = time.perf_counter()
    try:
        for epoch in range(start, tcfg.epochs):
            mean = encoder_train_epoch(e, opt, gan, real, loss, tcfg.batch_size, seed, epoch,
                                       log=lambda r: log({"kind": "batch", **r}))
            if _gan_digest(gan) != digest:
                raise PanoganError("frozen GAN parameters changed during encoder training")
            auc = None
            if val is not None:
                scored = anomaly.score_dataset(e, gan, val, cfg.score.variant, cfg.score.batch_size)
                auc = evaluation.roc_auc([s.score.value for s in scored], val.labels()).auc
            aucs.append(auc)
            meta, tensors = encoder_checkpoint(e, ecfg, loss, epoch, opt,
                                               {"aucs": aucs, "gan_digest": digest, "train_loss": mean})
            save_checkpoint(edir / f"epoch_{epoch:04d}.ckpt", meta, tensors)
            log({"kind": "epoch", "epoch": epoch, "loss": mean, "val_auc": auc})
            print(f"epoch {epoch}: loss {mean:.6f}" + (f", val AUC {auc:.4f}" if auc is not None else ""))
    except TrainingDivergedError as exc:
        write_json(edir / "diverged.json", {"error": str(exc), **exc.diagnostics})
        raise
    finally:
        log.close()

    if val is not None:
        best = evaluation.select_epoch(aucs)
    else:
        best = len(aucs) - 1
    shutil.copyfile(edir / f"epoch_{best:04d}.ckpt", edir / "best.ckpt")
    write_json(edir / "selection.json", {"aucs": aucs, "best_epoch": best,
                                         "best_checkpoint": f"epoch_{best:04d}.ckpt"})
    write_json(edir / "timing.json", {"seconds": time.perf_counter() - started})
    print(f"selected epoch {best}")


# ------------------------------------------------------ score / evaluate

def cmd_score(run: Run, args) -> None:
    cfg = run.cfg
    gan = _frozen_gan(run)
    path = run.encoder_dir / "best.ckpt"
    if not path.exists():
        raise InvalidInputError(f"no encoder checkpoint at {path}; run train-encoder first")
    meta, tensors = load_checkpoint(path)
    trained = meta.get("loss", {}).get("variant")
    if trained != cfg.score.variant:
        raise ConfigError(f"encoder was trained with {trained!r} but scoring uses {cfg.score.variant!r}")
    e = load_encoder(meta, tensors)
    test = load_dataset(run.path(cfg.data.test), cfg.patch_size)
    timings = {}
    scored = anomaly.score_dataset(e, gan, test, cfg.score.variant, cfg.score.batch_size, timings)
    run.eval_dir.mkdir(parents=True, exist_ok=True)
    anomaly.write_scores_csv(run.eval_dir / "scores.csv", scored)
    write_json(run.eval_dir / "timing.json", timings)
    if cfg.score.dump_reconstructions:
        recon = [type(p)(s.reconstruction.astype(np.float32), p.label, p.source, p.x, p.y)
                 for p, s in zip(test.patches, scored)]
        save_dataset(PatchDataset(cfg.patch_size, recon, {"source": "reconstructions"}),
                     run.eval_dir / "reconstructions.pano")
    print(f"scored {len(scored)} patches -> {run.eval_dir / 'scores.csv'}")


def cmd_evaluate(run: Run, args) -> None:
    path = run.eval_dir / "scores.csv"
    if not path.exists():
        raise InvalidInputError(f"no scores at {path}; run score first")
    rows = anomaly.read_scores_csv(path)
    if any(r["label"] is None for r in rows):
        raise InvalidInputError("evaluation needs labelled patches")
    scores = [r["score"] for r in rows]
    labels = [r["label"] for r in rows]
    report = evaluation.evaluate(scores, labels)
    run.eval_dir.joinpath("report.json").write_text(report.to_json())
    run.eval_dir.joinpath("roc.tsv").write_text(evaluation.roc_table(report))
    evaluation.write_roc_svg(run.eval_dir / "roc.svg", report)
    means = {lab: float(np.mean([s for s, l in zip(scores, labels) if l == lab]))
             for lab in (NORMAL, ABNORMAL)}
    write_json(run.eval_dir / "summary.json", {"mean_score": means, "auc": report.auc})
    print(f"AUC {report.auc:.4f}  threshold {report.threshold:.6g}  sensitivity "
          f"{report.sensitivity:.4f}  specificity {report.specificity:.4f}")


# ----------------------------------------------------------------- main

COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "train-gan": cmd_train_gan,
    "train-encoder": cmd_train_encoder,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--threads", type=int, help="torch threads; 1 selects deterministic mode")
    common.add_argument("--out", type=Path, default=Path("run"), help="output directory")

    parser = argparse.ArgumentParser(prog="panogan", description=__doc__.split(":")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "preprocess":
            p.add_argument("--input", help="directory with healthy/ and unhealthy/ image folders")
        if name in ("train-gan", "train-encoder"):
            p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    return parser


def resolve(args) -> Run:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
    return Run(cfg, args.out, args.command)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        set_threads(args.threads)
        run = resolve(args)
        run.write_resolved_config()
        COMMANDS[args.command](run, args)
    except PanoganError as exc:
        print(f"panogan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"panogan {args.command}: {exc}", file=sys.stderr)
        return InvalidInputError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
