"""Command-line pipeline.

Subcommands: gen-data (synthetic corpora), train (TAP/LDE classifier),
eval (score a corpus with a checkpoint), fuse (linear score fusion),
gmm (classical per-class mixture baseline).

Exit codes: 0 success, 1 usage or config error, 2 data/format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig, config_to_dict, load_config
from .data import (
    DURATION_BUCKETS,
    CorpusFormatError,
    Utterance,
    generate_corpus,
    read_corpus,
    sdc,
    write_corpus,
)
from .encoding import LdeConfig
from .gmm import em_fit, gmm_classify, log_posterior_scores
from .metrics import (
    AlignmentError,
    ScoresFormatError,
    TrialScore,
    TrialSet,
    cavg,
    eer_average,
    eer_pooled,
    fuse,
    read_scores,
    train_fusion,
    write_det_points,
    write_scores,
)
from .ndcore import Rng
from .train import (
    ENCODER_LDE,
    CheckpointError,
    Model,
    ModelConfig,
    NumericalError,
    infer,
    load_model,
    save_gmm_bank,
    save_model,
    train_model,
)


class UsageError(ValueError):
    """Bad command line or refusal to overwrite without --force."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; 2 is reserved for data
    # errors here, so surface parse failures as exceptions instead
    def error(self, message):
        raise UsageError(message)


def _require_file(path, what: str) -> None:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{what} not found: {path}")


def _prepare_output(path, force: bool) -> None:
    """Overwrite policy plus directory creation, before any real work."""
    if os.path.exists(path) and not force:
        raise UsageError(f"refusing to overwrite {path} (pass --force)")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _print_metrics(tag: str, trials: TrialSet) -> None:
    print(f"[{tag}] trials={len(trials.trials)} "
          f"eer_avg={eer_average(trials) * 100:.2f}% "
          f"eer_pooled={eer_pooled(trials) * 100:.2f}% "
          f"cavg={cavg(trials) * 100:.2f}%")


def _print_bucket_metrics(trials: TrialSet) -> None:
    """Per-duration-bucket breakdown for corpora that tag test utterances."""
    groups: dict[str, list[TrialScore]] = {}
    for t in trials.trials:
        head, sep, tail = t.id.partition("#")
        if sep:
            groups.setdefault(tail, []).append(t)
    if not groups:
        return
    known = [name for name, _ in DURATION_BUCKETS]
    order = [b for b in known if b in groups]
    order += sorted(b for b in groups if b not in known)
    k = trials.num_classes
    for bucket in order:
        subset = TrialSet(trials.class_names, groups[bucket])
        counts = np.bincount(subset.labels(), minlength=k)
        if counts.min() == 0:
            print(f"[{bucket}] trials={len(subset.trials)} "
                  f"(skipped: not every class present)")
        else:
            _print_metrics(bucket, subset)


def _model_config(rc: RunConfig, num_classes: int, in_dim: int) -> ModelConfig:
    fe = rc.frontend.build(in_dim)
    embed = fe.out_dim if fe is not None else in_dim
    enc = rc.encoder
    lde = None
    if enc.model == ENCODER_LDE:
        lde = LdeConfig(num_components=enc.components, feature_dim=embed,
                        smoothing_mode=enc.smoothing, beta=enc.beta,
                        aggregation_mode=enc.aggregation,
                        length_normalize=enc.length_normalize)
    try:
        return ModelConfig(in_dim=in_dim, num_classes=num_classes,
                           encoder=enc.model, lde=lde, frontend=fe,
                           freeze_dictionary=enc.freeze_dictionary,
                           zero_dictionary=enc.zero_dictionary)
    except ValueError as exc:
        raise ConfigError(f"bad model settings: {exc}") from exc


def cmd_gen_data(args) -> int:
    rc = load_config(args.config)
    if args.out is not None:
        train_path = os.path.join(args.out, "train.bin")
        test_path = os.path.join(args.out, "test.bin")
    else:
        train_path = rc.paths.train_corpus
        test_path = rc.paths.test_corpus
    _prepare_output(train_path, args.force)
    _prepare_output(test_path, args.force)
    train, test = generate_corpus(rc.data)
    write_corpus(train_path, train, rc.data.num_classes, rc.data.feature_dim)
    write_corpus(test_path, test, rc.data.num_classes, rc.data.feature_dim)
    print(f"wrote {len(train)} train utterances to {train_path}")
    print(f"wrote {len(test)} test utterances to {test_path}")
    return 0


def cmd_train(args) -> int:
    rc = load_config(args.config)
    _require_file(rc.paths.train_corpus, "train corpus")
    _prepare_output(rc.paths.checkpoint, args.force)
    _prepare_output(rc.paths.loss_log, args.force)
    sgd_cfg = rc.train.sgd()
    policy = rc.train.crop()

    utts, num_classes, in_dim = read_corpus(rc.paths.train_corpus)
    model_cfg = _model_config(rc, num_classes, in_dim)
    root = Rng(rc.train.seed)
    model = Model(model_cfg, root.split(0))
    steps = train_model(model, utts, sgd_cfg, root.split(1),
                        batch_size=rc.train.batch_size, policy=policy,
                        smooth_window=rc.train.smooth_window,
                        log_path=rc.paths.loss_log)
    save_model(rc.paths.checkpoint, model, epoch=sgd_cfg.epochs,
               rng_state=root.state(),
               extra_meta={"run_config": config_to_dict(rc)})
    last = steps[-1].smoothed if steps else float("nan")
    print(f"trained {rc.encoder.model} for {sgd_cfg.epochs} epochs "
          f"({len(steps)} steps, final smoothed loss {last:.5f})")
    print(f"checkpoint: {rc.paths.checkpoint}")
    print(f"loss log: {rc.paths.loss_log}")
    return 0


def cmd_eval(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.corpus, "corpus")
    _prepare_output(args.scores, args.force)
    model, _meta = load_model(args.checkpoint)
    utts, num_classes, in_dim = read_corpus(args.corpus)
    if num_classes != model.cfg.num_classes or in_dim != model.cfg.in_dim:
        raise CorpusFormatError(
            f"{args.corpus}: {num_classes} classes of dim {in_dim} but the "
            f"checkpoint expects {model.cfg.num_classes} of dim "
            f"{model.cfg.in_dim}")
    class_names = [f"L{k}" for k in range(num_classes)]
    trials = [TrialScore(u.id, u.label, infer(model, u.features))
              for u in utts]
    tset = TrialSet(class_names, trials)
    write_scores(args.scores, tset)
    if args.det is not None:
        for k, name in enumerate(class_names):
            det_path = f"{args.det}.{name}.txt"
            _prepare_output(det_path, args.force)
            write_det_points(det_path, tset, k)
    print(f"scores: {args.scores}")
    _print_metrics("all", tset)
    _print_bucket_metrics(tset)
    return 0


def cmd_fuse(args) -> int:
    if len(args.train_scores) != len(args.scores):
        raise UsageError("need one eval scores file per training scores file")
    for path in args.train_scores + args.scores:
        _require_file(path, "scores file")
    _prepare_output(args.out, args.force)
    train_sets = [read_scores(p) for p in args.train_scores]
    eval_sets = [read_scores(p) for p in args.scores]
    fusion = train_fusion(train_sets, iterations=args.iterations)
    fused = fuse(eval_sets, fusion)
    write_scores(args.out, fused)
    rendered = " ".join(f"{w:.6g}" for w in fusion.weights)
    print(f"fusion weights: {rendered} (bias {fusion.bias:.6g})")
    print(f"fused scores: {args.out}")
    _print_metrics("fused", fused)
    _print_bucket_metrics(fused)
    return 0


def _gmm_features(utt: Utterance, g) -> np.ndarray:
    if not g.use_sdc:
        return utt.features
    try:
        return sdc(utt.features, n_coeffs=g.sdc_coeffs, delta=g.sdc_delta,
                   shift=g.sdc_shift, blocks=g.sdc_blocks,
                   append_static=g.sdc_static)
    except ValueError as exc:
        raise CorpusFormatError(f"utterance {utt.id}: {exc}") from exc


def cmd_gmm(args) -> int:
    rc = load_config(args.config)
    _require_file(rc.paths.train_corpus, "train corpus")
    _require_file(rc.paths.test_corpus, "test corpus")
    _prepare_output(rc.paths.gmm_checkpoint, args.force)
    _prepare_output(rc.paths.gmm_scores, args.force)
    train, num_classes, in_dim = read_corpus(rc.paths.train_corpus)
    test, k2, d2 = read_corpus(rc.paths.test_corpus)
    if (k2, d2) != (num_classes, in_dim):
        raise CorpusFormatError(
            f"{rc.paths.test_corpus}: header ({k2} classes, dim {d2}) does "
            f"not match the train corpus ({num_classes}, dim {in_dim})")
    g = rc.gmm

    pooled: list[list[np.ndarray]] = [[] for _ in range(num_classes)]
    for utt in train:
        pooled[utt.label].append(_gmm_features(utt, g).T)
    rng = Rng(g.seed)
    models = []
    for k in range(num_classes):
        if not pooled[k]:
            raise CorpusFormatError(f"no training utterances for class L{k}")
        frames = np.concatenate(pooled[k], axis=0)
        if 0 < g.max_frames_per_class < frames.shape[0]:
            stride = -(-frames.shape[0] // g.max_frames_per_class)
            frames = frames[::stride]
        model, history = em_fit(frames, g.components, g.iterations,
                                rng.split(k))
        models.append(model)
        print(f"class L{k}: {g.components} components on "
              f"{frames.shape[0]} frames, final avg ll {history[-1]:.5f}")
    save_gmm_bank(rc.paths.gmm_checkpoint, models,
                  meta={"run_config": config_to_dict(rc)})

    class_names = [f"L{k}" for k in range(num_classes)]
    trials = [TrialScore(u.id, u.label,
                         log_posterior_scores(
                             gmm_classify(models, _gmm_features(u, g))))
              for u in test]
    tset = TrialSet(class_names, trials)
    write_scores(rc.paths.gmm_scores, tset)
    print(f"bank: {rc.paths.gmm_checkpoint}")
    print(f"scores: {rc.paths.gmm_scores}")
    _print_metrics("all", tset)
    _print_bucket_metrics(tset)
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="ldekit",
                     description="Sequence-classification pipeline: "
                                 "synthetic corpora, pooled classifiers, "
                                 "mixture baseline, scoring, fusion.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    p = sub.add_parser("gen-data", help="write synthetic train/test corpora")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--out", default=None,
                   help="directory for train.bin/test.bin (default: the "
                        "corpus paths from the config)")
    p.add_argument("--force", action="store_true",
                   help="overwrite existing outputs")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a pooled sequence classifier")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--force", action="store_true",
                   help="overwrite existing outputs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a corpus with a checkpoint")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--corpus", required=True, help="corpus file to score")
    p.add_argument("--scores", required=True, help="output scores file")
    p.add_argument("--det", default=None, metavar="PREFIX",
                   help="also write PREFIX.<class>.txt detection points")
    p.add_argument("--force", action="store_true",
                   help="overwrite existing outputs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="train and apply linear score fusion")
    p.add_argument("--train-scores", required=True, nargs="+",
                   help="scores files the fusion weights are fitted on")
    p.add_argument("--scores", required=True, nargs="+",
                   help="scores files to fuse, one per system, same order")
    p.add_argument("--out", required=True, help="fused scores file")
    p.add_argument("--iterations", type=int, default=500,
                   help="fusion training iterations (default 500)")
    p.add_argument("--force", action="store_true",
                   help="overwrite existing outputs")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("gmm", help="fit per-class mixtures and score")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--force", action="store_true",
                   help="overwrite existing outputs")
    p.set_defaults(func=cmd_gmm)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (CorpusFormatError, CheckpointError, ScoresFormatError,
            AlignmentError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # remaining pipeline complaints are shape/content problems
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
