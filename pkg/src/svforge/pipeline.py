"""End-to-end orchestration shared by the CLI, the experiment scripts and the tests."""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import evaluation as ev
from . import frontend as fe
from .config import DataConfig, EvalConfig, RunConfig
from .encoder import ConformerEncoder
from .heads import build_head
from .losses import ArcFace
from .pruning import PruneResult, distill_train, prune_train, pruning_report
from .training import (SpeakerModel, TrainData, TrainingError, extract_embeddings, lmft_classifier, run_stage, stream,
                       utterance_features)

log = logging.getLogger(__name__)


@dataclass
class Splits:
    train: list
    dev: list
    test: list


def split_corpus(utts: list[fe.Utterance], cfg: DataConfig) -> Splits:
    """Per speaker (utterances sorted by id): first ``train_utts`` train, next ``dev_utts`` dev, rest test."""
    by_spk: dict[str, list] = {}
    for u in sorted(utts, key=lambda u: u.utt_id):
        by_spk.setdefault(u.speaker_id, []).append(u)
    tr, dv, te = [], [], []
    for spk in sorted(by_spk):
        us = by_spk[spk]
        if len(us) < cfg.train_utts + cfg.dev_utts + 2:
            raise fe.ConfigError(f"speaker {spk} has {len(us)} utterances; split needs "
                                 f"{cfg.train_utts + cfg.dev_utts + 2}")
        tr += us[: cfg.train_utts]
        dv += us[cfg.train_utts: cfg.train_utts + cfg.dev_utts]
        te += us[cfg.train_utts + cfg.dev_utts:]
    return Splits(tr, dv, te)


def make_trial_lists(splits: Splits, cfg: DataConfig, seed: int) -> tuple[ev.TrialList, ev.TrialList | None]:
    test = ev.TrialList.from_tuples(fe.make_trials(splits.test, cfg.test_trials, stream(seed, "trials", "test")))
    test.check_both_classes()
    dev = None
    if splits.dev and cfg.dev_trials > 0:
        dev = ev.TrialList.from_tuples(fe.make_trials(splits.dev, cfg.dev_trials, stream(seed, "trials", "dev")))
        dev.check_both_classes()
    return test, dev


def synth_corpus(cfg: RunConfig) -> fe.SynthCorpus:
    d = cfg.data
    return fe.synth_dataset(d.n_speakers, d.utts_per_speaker, cfg.seed, d.min_dur, d.max_dur)


# -- models -------------------------------------------------------------------------------------

def build_model(cfg: RunConfig, seed: int | None = None, head_kind: str | None = None) -> SpeakerModel:
    seed = cfg.seed if seed is None else seed
    kind = head_kind or cfg.head.kind
    enc = ConformerEncoder(cfg.encoder, stream(seed, "init", "encoder"))
    n_layers = cfg.encoder.num_layers + 1
    hrng = stream(seed, "init", "head")
    if kind == "weighted":
        head = build_head(kind, n_layers, cfg.encoder.model_dim, hrng, embed_dim=cfg.head.embed_dim)
    elif kind == "mfa":
        head = build_head(kind, n_layers, cfg.encoder.model_dim, hrng, embed_dim=cfg.head.embed_dim,
                          attention=cfg.head.attention)
    else:
        head = build_head(kind, n_layers, cfg.encoder.model_dim, hrng, adapter_dim=cfg.head.adapter_dim,
                          embed_dim=cfg.head.embed_dim, attention=cfg.head.attention)
    if kind == "lora_adapter_mfa":
        enc.attach_lora_all(cfg.head.lora_rank, cfg.head.lora_alpha, stream(seed, "init", "lora"))
    return SpeakerModel(enc, head)


def model_checkpoint(model: SpeakerModel, classifier: ArcFace | None = None) -> dict[str, np.ndarray]:
    arrays = model.tensors()
    if classifier is not None:
        arrays.update({"cls." + k: v for k, v in classifier.state_dict().items()})
    return arrays


def load_model(cfg: RunConfig, arrays: dict[str, np.ndarray], head_kind: str | None = None) -> SpeakerModel:
    """Rebuild a model from checkpoint tensors; pruned encoders are resized to the stored shapes."""
    model = build_model(cfg, head_kind=head_kind)
    has_lora = any(k.startswith("lora.") for k in arrays)
    if model.encoder.has_lora() and not has_lora:
        for layer in model.encoder.layers:
            layer.mhsa.lora = {}
            layer.mhsa.wq.weight.requires_grad = True
            layer.mhsa.wv.weight.requires_grad = True
    model.load_tensors(arrays, resize_encoder=True)
    return model


def load_classifier(arrays: dict[str, np.ndarray], cfg: RunConfig) -> ArcFace | None:
    if "cls.weight" not in arrays:
        return None
    w = arrays["cls.weight"]
    c = ArcFace(w.shape[0], w.shape[1], np.random.default_rng(0))
    c.weight.data = np.array(w)
    return c


# -- training ----------------------------------------------------------------------------------------

@dataclass
class TrainState:
    model: SpeakerModel
    classifier: ArcFace | None
    data: TrainData | None = None


def train_stages(state: TrainState, train_utts: list, cfg: RunConfig, stages: list[str],
                 out_dir: str | None = None, resume: bool = True, seed: int | None = None,
                 max_epochs: int | None = None) -> dict:
    """Run the requested stages in order on ``state`` (modified in place)."""
    seed = cfg.seed if seed is None else seed
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    results = {}
    for stage in stages:
        scfg = cfg.train.stage(stage)
        data = TrainData(train_utts, perturb=scfg.speed_perturb)
        if state.classifier is None:
            state.classifier = ArcFace(data.num_classes, cfg.head.embed_dim, stream(seed, "init", "classifier"),
                                       margin=scfg.margin, scale=scfg.scale)
        elif state.classifier.weight.shape[0] != data.num_classes:
            prev = state.data or TrainData(train_utts, perturb=not scfg.speed_perturb)
            if prev.num_classes < data.num_classes:
                raise TrainingError(f"classifier has {prev.num_classes} classes but stage {stage!r} trains "
                                    f"{data.num_classes}; start from a checkpoint taken before LMFT")
            state.classifier = lmft_classifier(state.classifier, prev, data)
        if stage == "freeze" and state.model.encoder.has_lora():
            scfg = replace(scfg, trainable="head+lora")
        if scfg.trainable == "all" and state.model.encoder.has_lora():
            state.model.encoder.merge_lora()
        ckpt_dir = os.path.join(out_dir, "ckpt") if out_dir else None
        log_path = os.path.join(out_dir, f"{stage}.log") if out_dir else None
        results[stage] = run_stage(state.model, state.classifier, data, scfg, seed, log_path=log_path,
                                   ckpt_dir=ckpt_dir, resume=resume, max_epochs=max_epochs)
        state.data = data
    return results


# -- evaluation ------------------------------------------------------------------------------------

@dataclass
class EvalResult:
    rows: dict
    scores: dict
    embeddings: dict

    def table(self) -> str:
        lines = [f"{'system':<14}{'EER(%)':>9}{'mDCF':>9}"]
        for name, m in self.rows.items():
            lines.append(f"{name:<14}{100 * m['eer']:>9.2f}{m['mindcf']:>9.4f}")
        return "\n".join(lines) + "\n"


def evaluate(model: SpeakerModel, splits: Splits, test: ev.TrialList, dev: ev.TrialList | None,
             cfg: EvalConfig, asnorm: bool | None = None, qmf: bool | None = None) -> EvalResult:
    asnorm = cfg.asnorm if asnorm is None else asnorm
    qmf = cfg.qmf if qmf is None else qmf
    utts = splits.test + splits.dev + (splits.train if asnorm else [])
    emb = extract_embeddings(model, utts)
    durations = {u.utt_id: u.waveform.duration for u in utts}
    s_test = ev.score_trials(test, emb)
    rows = {"raw": _row(s_test.raw, s_test.labels, cfg)}
    scores = {"raw": s_test.raw.copy()}
    if asnorm:
        by_spk: dict[str, list] = {}
        for u in splits.train:
            by_spk.setdefault(u.speaker_id, []).append(emb[u.utt_id])
        cohort = ev.Cohort.from_speakers(by_spk, top_k=min(cfg.top_k, len(by_spk)))
        ev.as_norm(s_test, emb, cohort)
        rows["as-norm"] = _row(s_test.normalized, s_test.labels, cfg)
        scores["as-norm"] = s_test.normalized.copy()
        if qmf and dev is not None:
            s_dev = ev.as_norm(ev.score_trials(dev, emb), emb, cohort)
            which = cfg.qmf_input
            model_q = ev.qmf_calibrate(ev.qmf_features(s_dev, durations, emb, cohort, which), s_dev.labels)
            ev.apply_qmf(s_test, model_q, ev.qmf_features(s_test, durations, emb, cohort, which))
            rows["as-norm+qmf"] = _row(s_test.calibrated, s_test.labels, cfg)
            scores["as-norm+qmf"] = s_test.calibrated.copy()
    return EvalResult(rows, scores, emb)


def _row(scores, labels, cfg: EvalConfig) -> dict:
    eer, thr = ev.compute_eer(scores, labels)
    return {"eer": eer, "threshold": thr,
            "mindcf": ev.compute_mindcf(scores, labels, cfg.p_target, cfg.c_miss, cfg.c_fa)}


# -- pruning -------------------------------------------------------------------------------------------

def feature_batches(utts: list, n_frames: int, batch_size: int, seed: int):
    """Deterministic un-augmented fbank crops for distillation."""
    feats = [utterance_features(u.waveform.samples) for u in utts]

    def batch(step: int) -> np.ndarray:
        rng = stream(seed, "distill-batch", step)
        out = []
        for i in rng.integers(0, len(feats), batch_size):
            f = feats[i]
            if f.shape[0] < n_frames:
                f = np.concatenate([f] * (n_frames // f.shape[0] + 1))
            s = int(rng.integers(0, f.shape[0] - n_frames + 1))
            out.append(f[s:s + n_frames])
        return np.stack(out)

    return batch


@dataclass
class PruneOutcome:
    result: PruneResult
    report: str
    post_losses: list
    model: SpeakerModel


def prune_model(model: SpeakerModel, train_utts: list, cfg: RunConfig, seed: int | None = None,
                n_frames: int = 100, batch_size: int = 4) -> PruneOutcome:
    """Gate training on a copy of the encoder, extraction, then post-prune distillation.

    ``model`` keeps the teacher encoder; the returned model carries the pruned
    encoder and a copy of the head.
    """
    seed = cfg.seed if seed is None else seed
    if model.encoder.has_lora():
        model.encoder.merge_lora()
    teacher = model.encoder
    student = teacher.clone()
    batch = feature_batches(train_utts, n_frames, batch_size, seed)
    res = prune_train(teacher, student, batch, cfg.prune, stream(seed, "gate"))
    pruned = res.pruned
    post = []
    if cfg.prune.post_distill_steps > 0:
        post_batch = feature_batches(train_utts, n_frames, batch_size, seed + 1)
        post = distill_train(teacher, pruned, post_batch, cfg.prune.post_distill_steps, lr=cfg.prune.lr_student,
                             l1=cfg.prune.l1)
    report = pruning_report(student, pruned)
    return PruneOutcome(res, report, post, SpeakerModel(pruned, model.head.clone()))


def refine_config(cfg: RunConfig) -> RunConfig:
    """Joint stage shortened to ``prune.refine_epochs`` with its cosine decay compressed to fit."""
    n = cfg.prune.refine_epochs
    s2 = cfg.train.stage2
    return replace(cfg, train=replace(cfg.train, stage2=replace(s2, epochs=n, cosine_epochs=min(s2.cosine_epochs, n))))


# -- experiment ------------------------------------------------------------------------------------

def snapshot(state: TrainState, cfg: RunConfig) -> TrainState:
    """Deep copy of model + classifier via checkpoint tensors."""
    arrays = model_checkpoint(state.model, state.classifier)
    return TrainState(load_model(cfg, arrays), load_classifier(arrays, cfg), state.data)


def run_experiment(cfg: RunConfig, out_dir: str | None = None, baseline: bool = True, prune: bool = True,
                   report=print) -> dict:
    """Synthetic corpus → (weighted-head stage-i baseline) → three stages → pruning → re-fine-tuning.

    Returns EER/minDCF rows per system plus timings and the pruning outcome.
    """
    t0 = time.perf_counter()
    timings = {}

    def tick(name, since):
        timings[name] = time.perf_counter() - since
        report(f"[{timings[name]:7.1f}s] {name}")

    utts = synth_corpus(cfg).utterances
    splits = split_corpus(utts, cfg.data)
    test, dev = make_trial_lists(splits, cfg.data, cfg.seed)
    sub = (lambda name: os.path.join(out_dir, name)) if out_dir else (lambda name: None)
    systems = {}

    if baseline:
        t = time.perf_counter()
        base_cfg = replace(cfg, head=replace(cfg.head, kind="weighted"))
        state = TrainState(build_model(base_cfg), None)
        train_stages(state, splits.train, base_cfg, ["freeze"], out_dir=sub("weighted"))
        systems["weighted/freeze"] = evaluate(state.model, splits, test, dev, cfg.eval)
        tick("weighted head, stage i", t)

    t = time.perf_counter()
    state = TrainState(build_model(cfg), None)
    train_stages(state, splits.train, cfg, ["freeze", "joint"], out_dir=sub("main"))
    joint = snapshot(state, cfg)
    train_stages(state, splits.train, cfg, ["lmft"], out_dir=sub("main"))
    systems[f"{cfg.head.kind}/lmft"] = evaluate(state.model, splits, test, dev, cfg.eval)
    tick(f"{cfg.head.kind}, three stages", t)

    outcome = None
    if prune:
        t = time.perf_counter()
        outcome = prune_model(joint.model, splits.train, cfg)
        pstate = TrainState(outcome.model, joint.classifier, joint.data)
        if cfg.prune.refine_epochs > 0:
            refine = refine_config(cfg)
            train_stages(pstate, splits.train, refine, ["joint", "lmft"], out_dir=sub("refine"))
        systems["pruned"] = evaluate(pstate.model, splits, test, dev, cfg.eval)
        tick("pruning + re-fine-tuning", t)

    timings["total"] = time.perf_counter() - t0
    return {"systems": systems, "timings": timings, "prune": outcome, "test": test}
