"""Command-line entry point: ``cdvat {synth,train,eval,perturb-demo,experiment}``.

Every verb reads one JSON config (optional; defaults otherwise) and accepts
``--set dotted.path=value`` overrides. Outputs land under ``output_dir``:

    corpus.bin, norm.bin, trials.txt          synth
    <mode>/checkpoint.bin, metrics.jsonl      train
    <mode>/timings.jsonl                      wall-clock stamps, kept apart from the metrics
    <mode>/eval.json                          eval
    perturb_demo.json                         perturb-demo
    summary.txt, summary.json                 experiment

Exit status: 0 ok, 2 config error, 3 IO or file-format error, 4 numeric divergence.
"""
import argparse
import io
import json
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import dataio, evaluation, experiment, trainer
from .container import FormatError, atomic_write_bytes
from .experiment import ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4
OUTPUT_ENV = "CDVAT_OUTPUT_DIR"


class StageError(Exception):
    def __init__(self, stage, exc):
        self.stage = stage
        self.exc = exc
        super().__init__(f"stage {stage!r} failed: {exc}")


def load(args):
    overrides = list(args.set or [])
    if args.config is None:
        d = experiment.apply_overrides({}, overrides)
        if "output_dir" not in d and os.environ.get(OUTPUT_ENV):
            d["output_dir"] = os.environ[OUTPUT_ENV]
        return experiment.config_from_dict(d)
    return experiment.load_config(args.config, overrides)


def write_text(path, text):
    atomic_write_bytes(path, text.encode())


# ---------------------------------------------------------------------------
# verbs

def cmd_synth(cfg):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = dataio.synth_generate(cfg.synth)
    split, stats = experiment.prepare(corpus, cfg)
    dataio.save_corpus(corpus, out / "corpus.bin")
    dataio.save_norm_stats(stats, out / "norm.bin")
    write_text(out / "trials.txt", evaluation.format_trials(experiment.eval_trials(split, cfg)))
    write_text(out / "config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"corpus": str(out / "corpus.bin"), "utterances": len(corpus)}


def _split(cfg, corpus_path=None):
    corpus = dataio.load_corpus(corpus_path or Path(cfg.output_dir) / "corpus.bin")
    return experiment.prepare(corpus, cfg)


def cmd_train(cfg, mode, corpus_path=None, split=None):
    """Train one regime; the metrics log and final checkpoint go to ``output_dir/<mode>/``."""
    if split is None:
        split, _ = _split(cfg, corpus_path)
    out = Path(cfg.output_dir) / mode
    out.mkdir(parents=True, exist_ok=True)
    state, data, tcfg = experiment.init_mode(split, mode, cfg)
    metrics, timings = io.StringIO(), io.StringIO()
    try:
        trainer.train(state, data, tcfg, cfg.embedder, trainer.jsonl_logger(metrics, timings))
    except trainer.DivergenceError:
        # parameters are only updated after the finiteness check, so this is the last finite state
        trainer.checkpoint(state, out / "checkpoint.diverged.bin", cfg.embedder, tcfg)
        raise
    finally:
        write_text(out / "metrics.jsonl", metrics.getvalue())
        write_text(out / "timings.jsonl", timings.getvalue())
    trainer.checkpoint(state, out / "checkpoint.bin", cfg.embedder, tcfg)
    return state


def _normalised(corpus, norm_path):
    if norm_path is None or not Path(norm_path).exists():
        return corpus
    return dataio.apply_normalization(corpus, dataio.load_norm_stats(norm_path))


def cmd_eval(checkpoint, corpus_path, trials_path, out_path, norm_path=None):
    state, emb_cfg, _ = trainer.restore(checkpoint)
    corpus = _normalised(dataio.load_corpus(corpus_path), norm_path)
    trials = evaluation.read_trials(trials_path)
    by_id = {u.id: u for u in corpus}
    wanted = sorted({i for a, b, _ in trials for i in (a, b)})
    missing = [i for i in wanted if i not in by_id]
    if missing:
        raise KeyError(f"trial id {missing[0]!r} not found in corpus")
    report = evaluation.evaluate([by_id[i] for i in wanted], state.params, emb_cfg, trials)
    write_text(out_path, report.to_json())
    return report


def perturb_summary(reports):
    ratios = [r.ratio for r in reports]
    # iterates_dot[k] is d(k).d(k+1); d(0) is random, so the first informative one is d(1).d(2)
    dots = [r.iterates_dot[1] for r in reports if len(r.iterates_dot) > 1]
    return {
        "n": len(reports),
        "median_ratio": statistics.median(ratios),
        "fraction_adversarial_ge_random": float(np.mean([r.lcs_adversarial >= r.lcs_random_baseline
                                                         for r in reports])),
        "median_d1_dot_d2": statistics.median(dots) if dots else None,
    }


def cmd_perturb_demo(cfg, checkpoint, corpus_path, out_path, n=None):
    state, emb_cfg, _ = trainer.restore(checkpoint)
    split, _ = _split(cfg, corpus_path)
    held_out = split.evaluation or split.validation
    p = cfg.perturb
    windows = experiment.held_out_windows(held_out, emb_cfg, n or p.n, p.seed)
    reports = experiment.perturbation_demo(state.params, emb_cfg, windows, cfg.train.hp, p.K, p.seed)
    doc = {"epsilon": cfg.train.hp.epsilon, "zeta": cfg.train.hp.zeta, "K": p.K,
           "summary": perturb_summary(reports), "rows": [r.to_dict() for r in reports]}
    write_text(out_path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except trainer.DivergenceError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def cmd_experiment(cfg):
    """synth -> partition -> three regimes -> evaluation; writes summary.txt / summary.json."""
    out = Path(cfg.output_dir)
    _stage("synth", cmd_synth, cfg)
    split, _ = _stage("partition", _split, cfg)
    trials = _stage("trials", evaluation.read_trials, out / "trials.txt")
    rows = {}
    for mode in experiment.MODES:
        state = _stage(f"train:{mode}", cmd_train, cfg, mode, split=split)
        rows[mode] = _stage(f"eval:{mode}", evaluation.evaluate, split.evaluation, state.params, cfg.embedder,
                            trials)
        write_text(out / mode / "eval.json", rows[mode].to_json())
    recovery = experiment.eer_recovery(rows)
    table = experiment.format_table(rows, recovery)
    write_text(out / "summary.txt", table)
    summary = {"rows": {m: rows[m].to_dict() for m in experiment.MODES}, "eer_recovery": recovery}
    write_text(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return table


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    common.add_argument("--set", action="append", metavar="PATH=VALUE",
                        help="override a config field, e.g. --set train.hp.epsilon=2.0")
    parser = argparse.ArgumentParser(prog="cdvat", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    sub.add_parser("synth", parents=[common], help="generate the synthetic corpus, normalisation stats, trials")

    p = sub.add_parser("train", parents=[common], help="train one regime")
    p.add_argument("--mode", choices=experiment.MODES, default="cdvat")
    p.add_argument("--corpus")

    p = sub.add_parser("eval", parents=[common], help="score a trial list with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--norm", help="normalisation stats (default: output_dir/norm.bin if present)")
    p.add_argument("--trials")
    p.add_argument("--mode", choices=experiment.MODES, default="cdvat",
                   help="selects the default checkpoint and report paths")
    p.add_argument("--out")

    p = sub.add_parser("perturb-demo", parents=[common], help="adversarial vs random LCS on held-out windows")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--mode", choices=experiment.MODES, default="cdvat")
    p.add_argument("-n", type=int)
    p.add_argument("--out")

    sub.add_parser("experiment", parents=[common], help="run all three regimes and print the summary table")
    return parser


def dispatch(args):
    cfg = load(args)
    out = Path(cfg.output_dir)
    if args.verb == "synth":
        info = cmd_synth(cfg)
        print(f"wrote {info['utterances']} utterances to {info['corpus']}")
    elif args.verb == "train":
        state = cmd_train(cfg, args.mode, args.corpus)
        print(f"{args.mode}: {state.epoch} epochs, {state.step} steps -> {out / args.mode / 'checkpoint.bin'}")
    elif args.verb == "eval":
        report = cmd_eval(args.checkpoint or out / args.mode / "checkpoint.bin",
                          args.corpus or out / "corpus.bin",
                          args.trials or out / "trials.txt",
                          args.out or out / args.mode / "eval.json",
                          args.norm or out / "norm.bin")
        print(report.to_json(), end="")
    elif args.verb == "perturb-demo":
        doc = cmd_perturb_demo(cfg, args.checkpoint or out / args.mode / "checkpoint.bin", args.corpus,
                               args.out or out / "perturb_demo.json", args.n)
        print(json.dumps(doc["summary"], indent=2, sort_keys=True))
    elif args.verb == "experiment":
        t0 = time.perf_counter()
        print(cmd_experiment(cfg), end="")
        print(f"elapsed {time.perf_counter() - t0:.1f} s", file=sys.stderr)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except trainer.DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc.exc, (OSError, FormatError, KeyError)) else 1
    except (OSError, FormatError, KeyError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
