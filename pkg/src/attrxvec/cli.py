"""Command-line entry point: ``attrxvec <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import archive, attributes, backend, metrics, synth, tying
from .errors import AttrxvecError, ConfigError, DataError

log = logging.getLogger("attrxvec")


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _read_lines(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.readlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None


def _train_config(args, seed, schedule=("speaker",)):
    from .train import TrainConfig
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr_initial=args.lr_initial,
                       lr_final=args.lr_final, weight_decay=args.weight_decay,
                       chunk_min_s=args.chunk_min, chunk_max_s=args.chunk_max, schedule=schedule,
                       seed=seed)


def _speaker_data(args, feats_path):
    manifest = synth.load_manifest(args.manifest)
    feats = archive.read_features(feats_path)
    train = manifest.subset("train")
    if not train.records:
        raise DataError(f"{args.manifest}: no 'train' records")
    index = {s: i for i, s in enumerate(train.speakers())}
    missing = [r.utt_id for r in train.records if r.utt_id not in feats]
    if missing:
        raise DataError(f"features missing for utterance {missing[0]}")
    return feats, {r.utt_id: index[r.speaker] for r in train.records}, len(index)


def _xvector_cfg(args, feats, n_speakers):
    from .xvector import XVectorCfg
    dim = next(iter(feats.values())).shape[1]
    return XVectorCfg(feat_dim=dim, frame_dims=args.frame_dims, segment_dims=args.segment_dims,
                      n_speakers=n_speakers, dtype=args.dtype)


def _write_history(path, history):
    if path:
        from .pipeline import format_history
        Path(path).write_text(format_history(history), encoding="utf-8")


# -- subcommands -------------------------------------------------------------------


def cmd_synth_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "speaker":
        cfg = synth.SpeakerCorpusConfig(args.speakers, args.utts, args.eval_speakers, args.eval_utts,
                                        args.frames, args.dim, args.ratio, args.within_std,
                                        args.seed)
        manifest, feats = synth.synth_speaker_corpus(cfg)
        synth.save_manifest(out / "manifest.txt", manifest)
        archive.write_features(out, feats)
        if cfg.eval_speakers >= 2:
            trials = synth.make_trials(manifest.subset("eval"), args.trial_policy,
                                       args.nontarget_ratio, args.seed)
            metrics.write_trials(out / "trials.txt", trials)
        print(f"wrote {len(manifest)} utterances to {out}")
    else:
        inventory = attributes.derive_saus(attributes.default_attribute_map())
        cfg = tying.SynthAlignmentConfig(n_sau=len(inventory), n_utts=args.utts,
                                         saus_per_utt=args.saus_per_utt, dim=args.dim,
                                         seed=args.seed)
        alignments, feats = tying.synth_alignment(cfg)
        (out / "alignments.txt").write_text(tying.format_alignments(alignments), encoding="utf-8")
        (out / "inventory.txt").write_text(attributes.format_inventory(inventory), encoding="utf-8")
        archive.write_features(out, feats)
        print(f"wrote {len(alignments)} aligned utterances to {out}")
    return 0


def cmd_extract_features(args):
    from .frontend import FrontendConfig, extract, read_wav
    cfg = FrontendConfig(sample_rate=args.sample_rate, cmn_window_s=args.cmn_window)
    cfg.validate()
    root = Path(args.wav_list).parent
    feats = {}
    for lineno, line in enumerate(_read_lines(args.wav_list), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 2 or fields[0] in feats:
            raise DataError(f"{args.wav_list}:{lineno}: expected unique 'utt_id path'")
        path = Path(fields[1]) if Path(fields[1]).is_absolute() else root / fields[1]
        feats[fields[0]] = extract(read_wav(path), cfg, apply_cmn=not args.no_cmn,
                                   apply_vad=not args.no_vad)
        if len(feats[fields[0]]) == 0:
            log.warning("%s: no frames survived voice activity detection", fields[0])
    digest = archive.write_features(args.out, feats)
    print(f"wrote {len(feats)} feature matrices to {args.out} (sha256 {digest})")
    return 0


def cmd_prepare_attributes(args):
    amap = (attributes.load_attribute_map(args.map) if args.map
            else attributes.default_attribute_map())
    inventory = attributes.derive_saus(amap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "inventory.txt").write_text(attributes.format_inventory(inventory), encoding="utf-8")
    print(f"{len(inventory)} SAUs from {len(amap)} phonemes")
    if args.phone_alignments:
        index = {(s.manner, s.place): s.id for s in inventory}
        symbols = {ph: index[pair] for ph, pair in amap.entries.items()}
        alignments = tying.parse_alignments(_read_lines(args.phone_alignments),
                                            args.phone_alignments, symbols)
        (out / "alignments.txt").write_text(tying.format_alignments(alignments), encoding="utf-8")
        print(f"mapped {len(alignments)} phoneme alignments to SAU contexts")
    return 0


def cmd_accumulate_stats(args):
    alignments = tying.parse_alignments(_read_lines(args.alignments), args.alignments)
    feats = archive.read_features(args.feats)
    parts = []
    for utt in sorted(alignments):
        if utt not in feats:
            raise DataError(f"features missing for aligned utterance {utt}")
        parts.append(tying.accumulate_stats(alignments[utt], feats[utt]))
    stats = tying.merge_stats(*parts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tying.save_stats(out / "stats.bin", stats)
    inv = Path(args.inventory).read_text(encoding="utf-8") if args.inventory else \
        attributes.format_inventory(attributes.derive_saus(attributes.default_attribute_map()))
    (out / "inventory.txt").write_text(inv, encoding="utf-8")
    print(f"{len(stats)} distinct tri-SAU states from {len(parts)} utterances")
    return 0


def cmd_tie_states(args):
    stats_dir = Path(args.stats)
    stats = tying.load_stats(stats_dir / "stats.bin")
    inventory = attributes.parse_inventory((stats_dir / "inventory.txt").read_text(encoding="utf-8"))
    if args.questions != "auto":
        raise ConfigError("only automatically generated questions are supported (--questions auto)")
    target = tying.PRESETS.get(args.target_leaves)
    if target is None:
        try:
            target = int(args.target_leaves)
        except ValueError:
            raise ConfigError(f"--target-leaves must be a count or one of "
                              f"{', '.join(tying.PRESETS)}") from None
    tree = tying.build_tree(stats, tying.make_questions(inventory), target, args.min_gain,
                            n_sau=len(inventory))
    out = Path(args.out) if args.out else stats_dir / "tree.txt"
    tying.save_tree(tree, out)
    print(f"{tree.nsa_count} NSA units written to {out}")
    return 0


def _nsa_labels(args):
    if args.nsa_labels:
        from .pipeline import parse_frame_labels
        return parse_frame_labels(_read_lines(args.nsa_labels), args.nsa_labels)
    if not (args.nsa_units and args.nsa_alignments):
        raise ConfigError("give --nsa-units with --nsa-alignments, or --nsa-labels")
    tree = tying.load_tree(args.nsa_units)
    alignments = tying.parse_alignments(_read_lines(args.nsa_alignments), args.nsa_alignments)
    return {u: tree.relabel(a) for u, a in alignments.items()}


def cmd_train_xvector(args):
    from .checkpoint import save_checkpoint
    from .train import train_xvector
    from .xvector import XVector
    feats, labels, n_spk = _speaker_data(args, args.feats)
    net = XVector(_xvector_cfg(args, feats, n_spk), seed=args.seed)
    net, opt, history = train_xvector(net, feats, labels, _train_config(args, args.seed))
    save_checkpoint(args.out, net, opt)
    _write_history(args.history, history)
    print(f"trained {len(history.steps)} steps; final loss {history.losses('speaker')[-1]:.4f}")
    return 0


def cmd_train_mtl(args):
    from .checkpoint import save_checkpoint
    from .mtl import MTLCfg, MTLNet
    from .train import alternating_train, nsa_frame_accuracy
    feats, labels, n_spk = _speaker_data(args, args.speaker_feats)
    nsa_feats = archive.read_features(args.nsa_feats)
    nsa_labels = _nsa_labels(args)
    missing = sorted(set(nsa_labels) - set(nsa_feats))
    if missing:
        raise DataError(f"NSA features missing for utterance {missing[0]}")
    n_nsa = int(max(v.max() for v in nsa_labels.values())) + 1
    if args.nsa_units:
        n_nsa = max(n_nsa, tying.load_tree(args.nsa_units).nsa_count)
    cfg = MTLCfg(_xvector_cfg(args, feats, n_spk), n_nsa, args.nsa_fc_dim,
                 args.cross_stitch_layers, args.alpha_init, args.mode, args.alpha_granularity,
                 args.freeze_alpha)
    net = MTLNet(cfg, seed=args.seed)
    schedule = tuple(s.strip() for s in args.schedule.split(","))
    net, opt, history = alternating_train(net, (feats, labels), (nsa_feats, nsa_labels),
                                          _train_config(args, args.seed, schedule))
    save_checkpoint(args.out, net, opt)
    _write_history(args.history, history)
    acc = nsa_frame_accuracy(net, nsa_feats, nsa_labels)
    print(f"trained {len(history.steps)} steps; NSA training-frame accuracy {acc:.4f} "
          f"(chance {1.0 / n_nsa:.4f})")
    return 0


def cmd_extract_embeddings(args):
    from .checkpoint import load_checkpoint
    net, _ = load_checkpoint(args.model)
    feats = archive.read_features(args.feats)
    emb = {u: net.extract_embedding(feats[u]) for u in sorted(feats)}
    digest = archive.write_embeddings(args.out, emb)
    print(f"wrote {len(emb)} embeddings to {args.out} (sha256 {digest})")
    return 0


def cmd_train_backend(args):
    manifest = synth.load_manifest(args.manifest)
    emb = archive.read_embeddings(args.embeddings)
    records = [r for r in manifest.subset(args.split).records if r.utt_id in emb]
    if not records:
        raise DataError(f"no embeddings for the '{args.split}' split of {args.manifest}")
    x = np.stack([emb[r.utt_id] for r in records])
    labels = [r.speaker for r in records]
    model = backend.train_backend(x, labels, args.lda_dim, args.em_iters, args.length_norm)
    digest = backend.save_backend(args.out, model)
    print(f"backend trained on {len(records)} embeddings of {len(set(labels))} speakers "
          f"(sha256 {digest})")
    return 0


def cmd_score(args):
    model = backend.load_backend(args.model)
    emb = archive.read_embeddings(args.embeddings)
    trials = metrics.load_trials(args.trials)
    scorer = model.scorer()
    values = []
    for t in trials:
        for utt in (t.enroll, t.test):
            if utt not in emb:
                raise DataError(f"no embedding for trial utterance {utt}")
        values.append(scorer.score(emb[t.enroll], emb[t.test]))
    scores = metrics.ScoreSet(trials, np.array(values))
    if args.out:
        metrics.write_scores(args.out, scores)
    else:
        sys.stdout.write(metrics.format_scores(scores))
    return 0


def cmd_evaluate(args):
    trials = metrics.load_trials(args.trials)
    scores = metrics.load_scores(args.scores, trials)
    report = metrics.evaluate(scores, args.p_target, args.c_miss, args.c_fa)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if args.figure:
        from .plotting import plot_score_histogram
        tar, non = scores.split()
        plot_score_histogram(tar, non, args.figure, threshold=report.eer_threshold)
    return 0


def cmd_run(args):
    from .config import load_config
    from .pipeline import STAGES, run
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.experiment.seed = args.seed
    force = set(STAGES) if args.force == ["all"] else set(args.force or ())
    report = run(cfg, args.work_dir, until=args.until, force=force)
    if report is not None:
        sys.stdout.write(Path(report).read_text(encoding="utf-8"))
    return 0


def cmd_show_config(args):
    from .config import ExperimentConfig, format_config, load_config, preset_text
    if args.preset:
        sys.stdout.write(preset_text(args.preset))
        return 0
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    sys.stdout.write(format_config(cfg))
    return 0


# -- parser ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _add_network_args(p):
    p.add_argument("--frame-dims", type=_int_list, default=(512, 512, 512, 512, 1536))
    p.add_argument("--segment-dims", type=_int_list, default=(512, 512))
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr-initial", type=float, default=1e-3)
    p.add_argument("--lr-final", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--chunk-min", type=float, default=2.0, help="shortest training chunk (s)")
    p.add_argument("--chunk-max", type=float, default=4.0, help="longest training chunk (s)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--history", help="write per-step loss/accuracy as TSV")
    p.add_argument("--out", required=True, help="checkpoint path")


def build_parser():
    parser = _Parser(prog="attrxvec",
                                     description="Speaker embeddings with attribute-unit multitask training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a seeded synthetic corpus")
    p.add_argument("--kind", choices=("speaker", "nsa"), default="speaker")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=50)
    p.add_argument("--utts", type=int, default=6, help="utterances per speaker (or NSA utterances)")
    p.add_argument("--eval-speakers", type=int, default=20)
    p.add_argument("--eval-utts", type=int, default=6)
    p.add_argument("--frames", type=int, default=400)
    p.add_argument("--dim", type=int, default=30)
    p.add_argument("--ratio", type=float, default=10.0, help="between/within variance ratio")
    p.add_argument("--within-std", type=float, default=1.0)
    p.add_argument("--saus-per-utt", type=int, default=60)
    p.add_argument("--trial-policy", choices=("exhaustive", "sampled"), default="exhaustive")
    p.add_argument("--nontarget-ratio", type=float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("extract-features", help="MFCC features from a list of wave files")
    p.add_argument("--wav-list", required=True, help="lines 'utt_id path'")
    p.add_argument("--out", required=True)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--cmn-window", type=float, default=3.0)
    p.add_argument("--no-cmn", action="store_true")
    p.add_argument("--no-vad", action="store_true")
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("prepare-attributes", help="derive the SAU inventory from a phoneme map")
    p.add_argument("--map", help="'phoneme manner place' lines (default: shipped English table)")
    p.add_argument("--phone-alignments", help="alignment blocks with phoneme symbols to convert")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare_attributes)

    p = sub.add_parser("accumulate-stats", help="per-context Gaussian statistics for tying")
    p.add_argument("--alignments", required=True)
    p.add_argument("--feats", required=True)
    p.add_argument("--inventory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_accumulate_stats)

    p = sub.add_parser("tie-states", help="grow the tying trees to a target leaf count")
    p.add_argument("--stats", required=True, help="directory from accumulate-stats")
    p.add_argument("--questions", default="auto")
    p.add_argument("--target-leaves", default="400", help="count or preset nsa80/nsa400/nsa1248")
    p.add_argument("--min-gain", type=float, default=0.0)
    p.add_argument("--out", help="tree path (default: <stats>/tree.txt)")
    p.set_defaults(func=cmd_tie_states)

    p = sub.add_parser("train-xvector", help="train the single-task baseline")
    p.add_argument("--feats", required=True)
    p.add_argument("--manifest", required=True)
    _add_network_args(p)
    p.set_defaults(func=cmd_train_xvector)

    p = sub.add_parser("train-mtl", help="train the speaker + NSA multitask network")
    p.add_argument("--speaker-feats", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--nsa-feats", required=True)
    p.add_argument("--nsa-units", help="tree exported by tie-states")
    p.add_argument("--nsa-alignments", help="tri-SAU alignments relabelled through --nsa-units")
    p.add_argument("--nsa-labels", help="precomputed frame labels 'utt id id ...' instead")
    p.add_argument("--cross-stitch-layers", type=_int_list, default=(1, 2))
    p.add_argument("--alpha-init", type=float, default=0.1)
    p.add_argument("--alpha-granularity", choices=("scalar", "channel"), default="scalar")
    p.add_argument("--freeze-alpha", action="store_true")
    p.add_argument("--mode", choices=("improved", "original", "shared"), default="improved")
    p.add_argument("--nsa-fc-dim", type=int, default=128)
    p.add_argument("--schedule", default="speaker,nsa")
    _add_network_args(p)
    p.set_defaults(func=cmd_train_mtl)

    p = sub.add_parser("extract-embeddings", help="embeddings for every utterance in a feature archive")
    p.add_argument("--model", required=True)
    p.add_argument("--feats", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_embeddings)

    p = sub.add_parser("train-backend", help="fit LDA + PLDA on labelled embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--lda-dim", type=int, default=70)
    p.add_argument("--em-iters", type=int, default=10)
    p.add_argument("--length-norm", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_backend)

    p = sub.add_parser("score", help="PLDA log-likelihood ratios for a trial list")
    p.add_argument("--model", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", help="write 'enroll test score' lines here instead of stdout")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("evaluate", help="EER and minDCF of a score file")
    p.add_argument("--trials", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--p-target", type=float, default=0.001)
    p.add_argument("--c-miss", type=float, default=1.0)
    p.add_argument("--c-fa", type=float, default=1.0)
    p.add_argument("--out")
    p.add_argument("--figure", help="score histogram PNG")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="run or resume the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--work-dir", required=True)
    p.add_argument("--seed", type=int, help="override experiment.seed")
    p.add_argument("--until", help="stop after this stage")
    p.add_argument("--force", nargs="*", help="rerun these stages ('all' for every stage)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("show-config", help="print a config with every default filled in")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--config")
    group.add_argument("--preset", choices=("desk",), help="print a shipped config file")
    p.set_defaults(func=cmd_show_config)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AttrxvecError as exc:
        print(f"attrxvec {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"attrxvec {args.command}: {exc.filename}: file not found", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
