"""Command-line entry point: ``wsed <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data_io, dsp, gcrnn, postproc, salr
from .config import ConfigError, RunConfig
from .evaluation import score
from .train import TrainData, config_items, train, write_run_manifest

log = logging.getLogger("wsed")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3
RESOLVED_NAME = "resolved_config.txt"
CKPT_NAME = "checkpoint.wsedckpt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(args) -> list[tuple[str, str, str]]:
    items = []
    for kv in getattr(args, "set", None) or []:
        if "=" not in kv:
            raise UsageError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        items.append((k.strip(), v.strip(), "--set"))
    if getattr(args, "seed", None) is not None:
        items.append(("train.seed", str(args.seed), "--seed"))
    if getattr(args, "no_vat", False):
        items.append(("vat.lambda", "0", "--no-vat"))
    return items


def _run_config(args, config_path=None) -> RunConfig:
    path = getattr(args, "config", None) or config_path
    return RunConfig.load(path, _overrides(args))


def _config_for_ckpt(args) -> RunConfig:
    """Explicit --config wins, else the resolved config written next to the checkpoint."""
    if getattr(args, "config", None):
        return _run_config(args)
    beside = Path(args.ckpt).parent / RESOLVED_NAME
    return _run_config(args, beside if beside.exists() else None)


def _class_names(cfg: RunConfig) -> list[str]:
    path = cfg.get("train.classes")
    if path:
        return data_io.load_class_list(path)
    names = data_io.DCASE2018_CLASSES
    if cfg.section("model").n_classes != len(names):
        raise ConfigError("train.classes is required when model.n_classes differs from 10")
    return list(names)


def _model_config(cfg: RunConfig, names) -> gcrnn.GcrnnConfig:
    cfg.set_default("model.n_classes", len(names))
    mc = cfg.section("model")
    if mc.n_classes != len(names):
        raise ConfigError(f"model.n_classes={mc.n_classes} but class list has {len(names)} names")
    return mc


def load_features_for(path: str, feat_cfg: dsp.FeatureConfig) -> np.ndarray:
    if path.endswith(".wsed"):
        return dsp.load_features(path, feat_cfg.hop, feat_cfg.sample_rate).values
    return dsp.load_clip_features(path, feat_cfg).values


def _manifest_features(manifest, feat_cfg, splits=None) -> dict[str, np.ndarray]:
    entries = data_io.load_manifest(manifest)
    if splits:
        entries = [e for e in entries if e.split in splits]
    return {e.clip_id: load_features_for(e.path, feat_cfg) for e in entries}


def _splits(value: str | None):
    if not value:
        return None
    return [s.strip() for s in value.split(",") if s.strip()]


def _load_params(path) -> dict:
    if not Path(path).exists():
        raise FileNotFoundError(path)
    return ad.load_checkpoint(path)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> None:
    spec = data_io.SynthSpec.from_json(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    paths = data_io.synthesize(spec, args.out)
    for k, p in sorted(paths.items()):
        print(f"{k}\t{p}")


def cmd_featurize(args) -> None:
    cfg = _run_config(args)
    feat_cfg = cfg.section("dsp")
    out = Path(args.out)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for e in data_io.load_manifest(args.manifest):
        target = out / "features" / (Path(e.clip_id).stem + ".wsed")
        dsp.save_features(target, dsp.load_clip_features(e.path, feat_cfg))
        entries.append(data_io.ManifestEntry(e.clip_id, str(target), e.split))
    data_io.save_manifest(out / "manifest.tsv", entries)
    cfg.write_resolved(out / RESOLVED_NAME)
    print(out / "manifest.tsv")


def cmd_train(args) -> None:
    cfg = _run_config(args)
    for key in ("train.manifest", "train.weak_labels"):
        if not cfg.get(key):
            raise ConfigError(f"{key} is required for train")
    names = _class_names(cfg)
    model_cfg = _model_config(cfg, names)
    feat_cfg, vat_cfg, train_cfg = cfg.section("dsp"), cfg.section("vat"), cfg.section("train")
    entries = data_io.load_manifest(cfg.get("train.manifest"))
    weak = data_io.load_weak_labels(cfg.get("train.weak_labels"), names)
    use_unl = cfg.get("train.use_unlabelled", "true").lower() in ("1", "true", "yes", "on")
    labelled = [e.clip_id for e in entries if e.split == "weak" and e.clip_id in weak]
    unlabelled = [e.clip_id for e in entries if e.split == "unlabelled_in_domain"] if use_unl else []
    missing = [e.clip_id for e in entries if e.split == "weak" and e.clip_id not in weak]
    if missing:
        raise data_io.DataError(f"{len(missing)} weak clips lack labels, e.g. {missing[0]}")
    wanted = set(labelled) | set(unlabelled)
    feats = {e.clip_id: load_features_for(e.path, feat_cfg) for e in entries if e.clip_id in wanted}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out / RESOLVED_NAME)
    hashes = {"manifest": data_io.file_hash(cfg.get("train.manifest")),
              "weak_labels": data_io.file_hash(cfg.get("train.weak_labels"))}
    settings = {**config_items("train", train_cfg), **config_items("model", model_cfg),
                **config_items("dsp", feat_cfg), **config_items("vat", vat_cfg)}
    write_run_manifest(out / "run_manifest.txt", settings, hashes)
    result = train(train_cfg, TrainData(feats, weak, labelled, unlabelled), model_cfg, vat_cfg, out)
    last = result.metrics[-1]
    print(f"trained {len(result.metrics)} epochs; final ce={last['ce_loss']:.5f} "
          f"val_weak_f1={last['val_weak_f1']:.4f}; checkpoint {out / CKPT_NAME}")


def cmd_predict(args) -> None:
    cfg = _config_for_ckpt(args)
    names = _class_names(cfg)
    model_cfg = _model_config(cfg, names)
    feat_cfg = cfg.section("dsp")
    params = _load_params(args.ckpt)
    if args.params:
        if not Path(args.params).exists():
            raise FileNotFoundError(args.params)
        pp = salr.read_params(args.params, names)
    else:
        pp = [postproc.DEFAULT_PARAMS] * len(names)
    clips = _manifest_features(args.manifest, feat_cfg, _splits(args.split))
    ids = sorted(clips)
    preds = gcrnn.predict_batch(params, [clips[i] for i in ids], model_cfg)
    corpus = {cid: postproc.apply(fp, pp, names, cid, feat_cfg.hop, feat_cfg.sample_rate,
                                  feat_cfg.duration)
              for cid, (fp, _) in zip(ids, preds)}
    postproc.write_events(args.out, corpus)
    cfg.write_resolved(Path(args.out).with_suffix(".config.txt"))
    print(f"{sum(len(e.events) for e in corpus.values())} events -> {args.out}")


def cmd_refine(args) -> None:
    cfg = _config_for_ckpt(args)
    names = _class_names(cfg)
    model_cfg = _model_config(cfg, names)
    feat_cfg, grid = cfg.section("dsp"), cfg.section("salr")
    params = _load_params(args.ckpt)
    split = args.split or cfg.get("salr.split")
    clips = _manifest_features(args.manifest, feat_cfg, _splits(split))
    presence = float(cfg.get("salr.presence_threshold", "0.5"))
    report = salr.refine(params, model_cfg, clips, names, grid, presence_threshold=presence)
    out = Path(args.out)
    salr.write_report(out, report)
    params_path = out.with_name(out.stem + "_params.tsv")
    salr.write_params(params_path, names, report.params)
    cfg.write_resolved(out.with_suffix(".config.txt"))
    for c in report.classes:
        flag = " (fallback: no qualifying clips)" if c.fallback else ""
        print(f"{c.name}: threshold={c.chosen.threshold:g} width={c.chosen.median_width}{flag}")
    print(f"params -> {params_path}")


def cmd_score(args) -> None:
    cfg = _run_config(args)
    collars = cfg.section("eval")
    ref = data_io.load_strong_labels(args.ref)
    est = data_io.load_strong_labels(args.est)
    labels = data_io.load_class_list(cfg.get("train.classes")) if cfg.get("train.classes") else None
    report = score(ref, est, collars, labels)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_tsv(), encoding="utf-8")


def cmd_dump(args) -> None:
    cfg = _config_for_ckpt(args)
    names = _class_names(cfg)
    model_cfg = _model_config(cfg, names)
    if not Path(args.clip).exists():
        raise FileNotFoundError(args.clip)
    values = load_features_for(args.clip, cfg.section("dsp"))
    preds, _ = gcrnn.predict_clip(_load_params(args.ckpt), values, model_cfg)
    if args.out:
        gcrnn.write_activations(args.out, preds, names)
    else:
        gcrnn.write_activations("/dev/stdout", preds, names)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wsed", description="Weakly-labelled sound event detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None)
        if config:
            sp.add_argument("--config", default=None, help="key=value settings file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a config key (repeatable)")

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    common(sp, config=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("featurize", help="compute feature caches")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_featurize)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-vat", action="store_true", help="disable VAT (lambda = 0)")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="write strong predictions")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--params", default=None, help="per-class post-processing params file")
    sp.add_argument("--split", default=None, help="comma-separated manifest splits to use")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("refine", help="self-adaptive label refinement")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default=None, help="comma-separated manifest splits to use")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_refine)

    sp = sub.add_parser("score", help="event-based F1 / error rate")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--est", required=True)
    sp.add_argument("--out", default=None)
    common(sp)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("dump-activations", help="per-frame head activations for one clip")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--out", default=None)
    common(sp)
    sp.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"wsed: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"wsed: error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_DATA
    except (ad.NonFiniteError, FloatingPointError) as exc:
        print(f"wsed: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"wsed: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
