"""Command-line entry point: ``svforge {synth,train,prune,eval,score}``.

Exit codes: 0 ok, 1 configuration error, 2 runtime error, 3 invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from contextlib import contextmanager

from . import config as C
from . import evaluation as ev
from . import frontend as fe
from . import pipeline as P
from .checkpoint import checksum, load_checkpoint, save_checkpoint
from .encoder import StructureError
from .pruning import PruningError
from .tensor import GradError, ShapeError
from .training import STAGES, TrainData, TrainingError, _latest_epoch, _stage_ckpt, default_stage_sequence

log = logging.getLogger("svforge")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_INVARIANT = 0, 1, 2, 3


class InvariantError(RuntimeError):
    pass


class RunLockedError(RuntimeError):
    pass


# -- helpers ---------------------------------------------------------------------------------------

def resolve_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    pairs = [C.parse_set(s) for s in (args.set or [])]
    if getattr(args, "head", None):
        pairs.append(("head.kind", args.head))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    return C.apply_overrides(cfg, pairs)


def prepare_out_dir(path: str, force: bool, must_be_empty: bool):
    if os.path.isdir(path) and os.listdir(path):
        if force:
            shutil.rmtree(path)
        elif must_be_empty:
            raise fe.ConfigError(f"output directory {path} exists; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)


@contextmanager
def run_lock(out_dir: str):
    """One run owns an output directory at a time."""
    path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{out_dir} is locked by another run (remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(path):
            os.remove(path)


def require_file(path: str, what: str) -> str:
    if not path or not os.path.isfile(path):
        raise fe.ConfigError(f"missing {what}: {path}")
    return path


def load_dataset(data_dir: str, cfg: C.RunConfig):
    manifest = require_file(os.path.join(data_dir, "manifest.tsv"), "dataset manifest (run 'svforge synth' first)")
    utts = fe.load_manifest_utterances(manifest)
    splits = P.split_corpus(utts, cfg.data)
    test = ev.read_trials(require_file(os.path.join(data_dir, "trials_test.txt"), "test trial list"))
    dev_path = os.path.join(data_dir, "trials_dev.txt")
    dev = ev.read_trials(dev_path) if os.path.isfile(dev_path) else None
    return splits, test, dev


def write_text(path: str, text: str):
    with open(path, "w") as f:
        f.write(text)


def _metrics_text(rows: dict) -> str:
    return "".join(f"{name}\t{m['eer']!r}\t{m['mindcf']!r}\n" for name, m in rows.items())


# -- commands -----------------------------------------------------------------------------------------

def cmd_synth(args, cfg: C.RunConfig) -> int:
    prepare_out_dir(args.out, args.force, must_be_empty=True)
    with run_lock(args.out):
        corpus = P.synth_corpus(cfg)
        wav_rows = []
        for u in corpus.utterances:
            rel = os.path.join("wav", f"{u.utt_id}.wav")
            os.makedirs(os.path.join(args.out, "wav"), exist_ok=True)
            fe.write_wav(os.path.join(args.out, rel), u.waveform)
            wav_rows.append((u.utt_id, u.speaker_id, rel))
        fe.write_manifest(os.path.join(args.out, "manifest.tsv"), wav_rows)
        # trials are drawn from the 16-bit round-tripped corpus the other commands will read
        utts = fe.load_manifest_utterances(os.path.join(args.out, "manifest.tsv"))
        splits = P.split_corpus(utts, cfg.data)
        test, dev = P.make_trial_lists(splits, cfg.data, cfg.seed)
        ev.write_trials(os.path.join(args.out, "trials_test.txt"), test)
        if dev is not None:
            ev.write_trials(os.path.join(args.out, "trials_dev.txt"), dev)
        write_text(os.path.join(args.out, "config.txt"), C.dumps(cfg))
    print(f"wrote {len(wav_rows)} utterances, {len(test)} test trials to {args.out}")
    return EXIT_OK


def _stages_arg(text: str | None) -> list[str]:
    stages = list(STAGES) if not text else [s.strip() for s in text.split(",") if s.strip()]
    try:
        return default_stage_sequence(stages)
    except ValueError as e:
        raise fe.ConfigError(str(e)) from None


def _load_previous_stage(cfg: C.RunConfig, ckpt_dir: str, stage: str):
    """Model + classifier from the final checkpoint of the stage before ``stage``."""
    prev = STAGES[STAGES.index(stage) - 1]
    last = cfg.train.stage(prev).epochs - 1
    path = _stage_ckpt(ckpt_dir, prev, last)
    if _latest_epoch(ckpt_dir, prev) < last or not os.path.isfile(path):
        raise fe.ConfigError(f"stage {stage!r} needs a finished {prev!r} stage in {ckpt_dir}; "
                             f"run with --stages including {prev}")
    arrays = load_checkpoint(path)
    return P.load_model(cfg, arrays), P.load_classifier(arrays, cfg)


def cmd_train(args, cfg: C.RunConfig) -> int:
    stages = _stages_arg(args.stages)
    splits, test, dev = load_dataset(args.data, cfg)
    prepare_out_dir(args.out, args.force, must_be_empty=False)
    with run_lock(args.out):
        ckpt_dir = os.path.join(args.out, "ckpt")
        if stages[0] == "freeze":
            state = P.TrainState(P.build_model(cfg), None)
        else:
            model, cls = _load_previous_stage(cfg, ckpt_dir, stages[0])
            state = P.TrainState(model, cls)
        write_text(os.path.join(args.out, "config.txt"), C.dumps(cfg))
        results = P.train_stages(state, splits.train, cfg, stages, out_dir=args.out, resume=not args.no_resume,
                                 max_epochs=args.max_epochs)
        arrays = P.model_checkpoint(state.model, state.classifier)
        save_checkpoint(os.path.join(args.out, "model.ckpt"), arrays)
        lines = [f"stages\t{','.join(stages)}", f"head\t{cfg.head.kind}",
                 f"head_params\t{state.model.head.num_parameters()}",
                 f"encoder_params\t{state.model.encoder.num_parameters()}",
                 f"checksum\t{checksum(arrays)}"]
        for st, r in results.items():
            lines.append(f"{st}_epoch_losses\t" + ",".join(f"{x:.6f}" for x in r.epoch_losses))
        write_text(os.path.join(args.out, "train_summary.txt"), "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_prune(args, cfg: C.RunConfig) -> int:
    if not 0.0 <= cfg.prune.target < 1.0:
        raise fe.ConfigError("prune.target must lie in [0, 1)")
    arrays = load_checkpoint(require_file(args.model, "teacher checkpoint"))
    splits, _, _ = load_dataset(args.data, cfg)
    prepare_out_dir(args.out, args.force, must_be_empty=False)
    with run_lock(args.out):
        model = P.load_model(cfg, arrays)
        cls = P.load_classifier(arrays, cfg)
        if cfg.prune.refine_epochs > 0 and cls is not None:
            n_joint = TrainData(splits.train, perturb=cfg.train.stage2.speed_perturb).num_classes
            if cls.weight.shape[0] != n_joint:
                raise fe.ConfigError(f"re-fine-tuning repeats the joint stage ({n_joint} classes) but the checkpoint "
                                     f"classifier has {cls.weight.shape[0]}; prune the last joint-stage checkpoint "
                                     f"(ckpt/joint_epochNNN.ckpt) or set prune.refine_epochs=0")
        teacher_sum = checksum(model.encoder.state_dict())
        out = P.prune_model(model, splits.train, cfg)
        if checksum(model.encoder.state_dict()) != teacher_sum:
            raise InvariantError("teacher encoder changed during pruning")
        pruned = out.model
        if cfg.prune.refine_epochs > 0:
            if cls is None:
                raise fe.ConfigError("re-fine-tuning needs the classifier (cls.*) in the teacher checkpoint")
            state = P.TrainState(pruned, cls)
            refine = P.refine_config(cfg)
            P.train_stages(state, splits.train, refine, ["joint", "lmft"], out_dir=os.path.join(args.out, "refine"),
                           resume=not args.no_resume)
            cls = state.classifier
        save_checkpoint(os.path.join(args.out, "pruned.ckpt"), P.model_checkpoint(pruned, cls))
        save_checkpoint(os.path.join(args.out, "gates.ckpt"), out.result.gates.tensors())
        report = out.report + f"final_expected_sparsity\t{out.result.history[-1]['expected_sparsity']:.4f}\n"
        write_text(os.path.join(args.out, "prune_report.txt"), report)
        write_text(os.path.join(args.out, "config.txt"), C.dumps(cfg))
    print(report, end="")
    return EXIT_OK


def cmd_eval(args, cfg: C.RunConfig) -> int:
    arrays = load_checkpoint(require_file(args.model, "model checkpoint"))
    if any(k.startswith("gate.") for k in arrays):
        raise InvariantError("model checkpoint still carries gate tensors; evaluate an extracted model")
    splits, test, dev = load_dataset(args.data, cfg)
    prepare_out_dir(args.out, args.force, must_be_empty=False)
    with run_lock(args.out):
        model = P.load_model(cfg, arrays)
        res = P.evaluate(model, splits, test, dev, cfg.eval, asnorm=args.asnorm, qmf=args.qmf)
        ev.save_embeddings(os.path.join(args.out, "embeddings.ckpt"), res.embeddings)
        for name, vals in res.scores.items():
            s = ev.ScoreSet(test, vals)
            ev.write_scores(os.path.join(args.out, f"scores_{name.replace('+', '_')}.txt"), s)
        write_text(os.path.join(args.out, "metrics.txt"), _metrics_text(res.rows))
    print(res.table(), end="")
    return EXIT_OK


def cmd_score(args, cfg: C.RunConfig) -> int:
    trials = ev.read_trials(require_file(args.trials, "trial list"))
    if args.scores:
        s = ev.read_scores(require_file(args.scores, "score file"), trials)
    else:
        emb = ev.load_embeddings(require_file(args.embeddings, "embedding file"))
        s = ev.score_trials(trials, emb)
        if args.out:
            ev.write_scores(args.out, s)
    row = P._row(s.raw, s.labels, cfg.eval)
    print(f"EER(%)\t{100 * row['eer']:.4f}\nmDCF\t{row['mindcf']:.6f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file with 'dotted.key = value' lines")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="svforge", description="Desk-scale speaker-verification workbench")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus and trial lists")
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", parents=[common], help="run training stages")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stages", help="comma-separated subset of freeze,joint,lmft")
    t.add_argument("--head", help="shorthand for --set head.kind=...")
    t.add_argument("--no-resume", action="store_true")
    t.add_argument("--max-epochs", type=int, help=argparse.SUPPRESS)

    r = sub.add_parser("prune", parents=[common], help="prune a trained encoder")
    r.add_argument("--data", required=True)
    r.add_argument("--model", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--head")
    r.add_argument("--no-resume", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="score the test trials")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--head")
    e.add_argument("--asnorm", action=argparse.BooleanOptionalAction, default=None)
    e.add_argument("--qmf", action=argparse.BooleanOptionalAction, default=None)

    c = sub.add_parser("score", parents=[common], help="metrics from a score or embedding file")
    c.add_argument("--trials", required=True)
    g = c.add_mutually_exclusive_group(required=True)
    g.add_argument("--scores")
    g.add_argument("--embeddings")
    c.add_argument("--out")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "prune": cmd_prune, "eval": cmd_eval, "score": cmd_score}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (fe.ConfigError, ev.MetricError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvariantError, StructureError, ShapeError, GradError) as e:
        print(f"invariant violation: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except (RunLockedError, TrainingError, PruningError, FloatingPointError, OSError, ValueError, KeyError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
