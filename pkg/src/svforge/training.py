"""Three-stage speaker training: frozen encoder, joint fine-tuning, large-margin fine-tuning."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import frontend as fe
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import ConformerEncoder
from .losses import ArcFace, arcface_loss
from .nn import Module
from .tensor import Tensor

log = logging.getLogger(__name__)

STAGES = ("freeze", "joint", "lmft")
SELECTORS = ("head-only", "head+lora", "all")


class TrainingError(RuntimeError):
    pass


# -- optimiser -----------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    weight_decay: float = 1e-4


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, maximize: bool = False):
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if maximize:
            g = -g
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data * (1.0 - lr * state.weight_decay)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, named_params, lr: float, weight_decay: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, maximize: bool = False):
        self.params = dict(named_params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.maximize = maximize
        self.state = OptimizerState(weight_decay=weight_decay)

    def step(self, lr: float | None = None):
        grads = {n: p.grad for n, p in self.params.items()}
        adamw_step(self.params, grads, self.state, self.lr if lr is None else lr, self.betas, self.eps, self.maximize)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}step": np.array([self.state.step], dtype=np.float64)}
        for n in self.state.m:
            out[f"{prefix}m.{n}"] = self.state.m[n]
            out[f"{prefix}v.{n}"] = self.state.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str):
        self.state.step = int(arrays[f"{prefix}step"][0])
        self.state.m.clear()
        self.state.v.clear()
        for key, arr in arrays.items():
            if key.startswith(prefix + "m."):
                self.state.m[key[len(prefix) + 2:]] = np.array(arr, dtype=np.float64)
            elif key.startswith(prefix + "v."):
                self.state.v[key[len(prefix) + 2:]] = np.array(arr, dtype=np.float64)


# -- stage configuration --------------------------------------------------------------

@dataclass
class StageConfig:
    stage: str = "freeze"
    lr_start: float = 1e-4
    lr_end: float = 1e-5
    schedule: str = "warmup+step"
    epochs: int = 20
    warmup_epochs: float = 5.0
    step_epochs: int = 5
    gamma: float = 0.1
    cosine_epochs: float = 2.0
    frame_range: tuple = (200, 300)
    margin: float = 0.2
    scale: float = 32.0
    augment: bool = True
    weight_decay: float = 1e-4
    trainable: str = "head-only"
    batch_size: int = 32
    speed_perturb: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.trainable not in SELECTORS:
            raise ValueError(f"trainable must be one of {SELECTORS}")
        if self.schedule not in ("step", "cosine", "warmup+step"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        for name in ("lr_start", "lr_end", "warmup_epochs", "gamma", "cosine_epochs", "margin", "scale",
                     "weight_decay"):
            setattr(self, name, float(getattr(self, name)))
        self.frame_range = tuple(int(v) for v in self.frame_range)
        if self.frame_range[0] > self.frame_range[1] or self.frame_range[0] < 1:
            raise ValueError("frame_range must satisfy 1 <= min <= max")
        if self.margin < 0:
            raise ValueError("margin must be >= 0")


def paper_stage_configs() -> dict[str, StageConfig]:
    """Hyperparameters as published for the full-size system (epoch count of stage i unstated)."""
    return {
        "freeze": StageConfig("freeze", 1e-4, 1e-5, "warmup+step", epochs=20, warmup_epochs=5, step_epochs=5,
                              gamma=0.1, frame_range=(200, 300), margin=0.2, scale=32, augment=True,
                              trainable="head-only"),
        "joint": StageConfig("joint", 1e-5, 5e-6, "cosine", epochs=4, cosine_epochs=2, frame_range=(200, 300),
                             margin=0.2, scale=32, augment=True, trainable="all"),
        "lmft": StageConfig("lmft", 1e-5, 5e-6, "cosine", epochs=2, cosine_epochs=1, frame_range=(500, 600),
                            margin=0.5, scale=32, augment=False, trainable="all", speed_perturb=False),
    }


def desk_stage_configs() -> dict[str, StageConfig]:
    """Desk-scale schedule: same stage order and schedule types, shorter crops, larger learning rates.

    The joint stage runs longer than published because the toy encoder starts
    from random weights instead of a pretrained model.
    """
    return {
        "freeze": StageConfig("freeze", 2e-3, 2e-4, "warmup+step", epochs=12, warmup_epochs=2, step_epochs=5,
                              gamma=0.1, frame_range=(120, 180), margin=0.2, scale=32, augment=True,
                              trainable="head-only", batch_size=32),
        "joint": StageConfig("joint", 1e-3, 5e-5, "cosine", epochs=24, cosine_epochs=24, frame_range=(120, 180),
                             margin=0.2, scale=32, augment=True, trainable="all", batch_size=32),
        "lmft": StageConfig("lmft", 1e-4, 5e-5, "cosine", epochs=2, cosine_epochs=1, frame_range=(250, 300),
                            margin=0.5, scale=32, augment=False, trainable="all", batch_size=16,
                            speed_perturb=False),
    }


def lr_at(cfg: StageConfig, epoch: int, step: int = 0, steps_per_epoch: int = 1) -> float:
    """Learning rate at (epoch, step-within-epoch).

    warmup+step: linear ramp from 0 over ``warmup_epochs`` then x``gamma`` every
    ``step_epochs`` epochs counted from the end of warm-up, floored at lr_end.
    cosine: half-cosine from lr_start to lr_end over ``cosine_epochs``, then flat.
    """
    e = epoch + step / max(steps_per_epoch, 1)
    if cfg.schedule == "warmup+step":
        if e < cfg.warmup_epochs:
            return cfg.lr_start * e / cfg.warmup_epochs
        n = int((epoch - cfg.warmup_epochs) // cfg.step_epochs)
        return max(cfg.lr_start * cfg.gamma ** n, cfg.lr_end)
    if cfg.schedule == "step":
        return max(cfg.lr_start * cfg.gamma ** (epoch // cfg.step_epochs), cfg.lr_end)
    p = min(e / cfg.cosine_epochs, 1.0)
    return cfg.lr_end + (cfg.lr_start - cfg.lr_end) * 0.5 * (1.0 + math.cos(math.pi * p))


# -- model wrapper ---------------------------------------------------------------------------

class SpeakerModel(Module):
    """Encoder + embedding head; names map to checkpoint prefixes enc./lora./head."""

    def __init__(self, encoder: ConformerEncoder, head: Module):
        self.encoder = encoder
        self.head = head

    def embed(self, feats, rng=None) -> Tensor:
        return self.head(self.encoder.encode(feats, rng))

    def named_tensors(self):
        for n, p in self.encoder.named_parameters():
            if ".lora." in n:
                yield "lora." + n.replace(".lora.", ".", 1), p
            else:
                yield "enc." + n, p
        for n, p in self.head.named_parameters():
            yield "head." + n, p

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_tensors()}

    def load_tensors(self, arrays: dict[str, np.ndarray], strict: bool = True, resize_encoder: bool = False):
        """Copy checkpoint tensors in. ``resize_encoder`` accepts smaller (pruned) encoder shapes."""
        own = dict(self.named_tensors())
        wanted = {k: v for k, v in arrays.items() if k.split(".", 1)[0] in ("enc", "lora", "head")}
        if strict and set(own) != set(wanted):
            raise KeyError(f"checkpoint mismatch: missing={sorted(set(own) - set(wanted))[:5]} "
                           f"unexpected={sorted(set(wanted) - set(own))[:5]}")
        for k, arr in wanted.items():
            if k in own:
                if own[k].shape != arr.shape and not (resize_encoder and k.startswith("enc.")):
                    raise T.ShapeError(f"{k}: {arr.shape} vs {own[k].shape}")
                own[k].data = np.array(arr, dtype=T.DTYPE)

    def select_trainable(self, selector: str) -> dict[str, Tensor]:
        """Set requires_grad per selector and return the trainable tensors by name."""
        if selector not in SELECTORS:
            raise ValueError(f"invalid trainable selector {selector!r}")
        out = {}
        lora_frozen_bases = set()
        for layer in self.encoder.layers:
            for tgt in layer.mhsa.lora:
                lora_frozen_bases.add(id(layer.mhsa.wq.weight if tgt == "query" else layer.mhsa.wv.weight))
        for n, p in self.named_tensors():
            if n.startswith("head."):
                on = True
            elif n.startswith("lora."):
                on = selector in ("head+lora", "all")
            else:
                on = selector == "all" and id(p) not in lora_frozen_bases
            p.requires_grad = on
            if on:
                out[n] = p
        return out


# -- data ---------------------------------------------------------------------------------------

@dataclass
class Example:
    utt_id: str
    samples: np.ndarray
    label: int
    factor: float = 1.0


class TrainData:
    """Waveform examples with (speaker, speed-factor) class labels."""

    def __init__(self, utterances: list[fe.Utterance], perturb: bool):
        if not utterances:
            raise TrainingError("empty training set")
        self.speakers = sorted({u.speaker_id for u in utterances})
        factors = fe.SPEED_FACTORS if perturb else (1.0,)
        self.classes = [(s, f) for s in self.speakers for f in factors]
        idx = {c: i for i, c in enumerate(self.classes)}
        self.examples: list[Example] = []
        for u in utterances:
            for f in factors:
                x = u.waveform.samples if f == 1.0 else fe.speed_perturb(u.waveform, f).samples
                self.examples.append(Example(u.utt_id, x, idx[(u.speaker_id, f)], f))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_index(self, speaker: str, factor: float = 1.0) -> int:
        return self.classes.index((speaker, factor))


def crop(x: np.ndarray, n_frames: int, rng: np.random.Generator) -> np.ndarray:
    """Random window covering ``n_frames`` fbank frames; short inputs are wrap-padded."""
    need = (n_frames - 1) * fe.HOP_LENGTH + fe.WIN_LENGTH
    if x.size < need:
        reps = int(np.ceil(need / x.size))
        x = np.tile(x, reps)
    start = int(rng.integers(0, x.size - need + 1))
    return x[start:start + need]


def utterance_features(x: np.ndarray, stats=None) -> np.ndarray:
    return fe.normalize(fe.fbank(x), stats).frames


def make_batch(examples: list[Example], n_frames: int, rng, augment: bool, policy=None):
    feats, labels = [], []
    for ex in examples:
        x = crop(ex.samples, n_frames, rng)
        if augment:
            x = fe.augment(fe.Waveform(x), policy or fe.AugmentPolicy(), rng).samples
        feats.append(utterance_features(x))
        labels.append(ex.label)
    return np.stack(feats), np.array(labels)


def stream(seed: int, *key) -> np.random.Generator:
    """Independent generator for a named sub-stream of a run seed."""
    import zlib

    words = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in key]
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(words)))


# -- stage runner --------------------------------------------------------------------------------

@dataclass
class StageResult:
    epoch_losses: list = field(default_factory=list)
    log_lines: list = field(default_factory=list)


def _stage_ckpt(ckpt_dir: str, stage: str, epoch: int) -> str:
    return os.path.join(ckpt_dir, f"{stage}_epoch{epoch:03d}.ckpt")


def _latest_epoch(ckpt_dir: str | None, stage: str) -> int:
    if not ckpt_dir or not os.path.isdir(ckpt_dir):
        return -1
    best = -1
    for name in os.listdir(ckpt_dir):
        if name.startswith(stage + "_epoch") and name.endswith(".ckpt"):
            best = max(best, int(name[len(stage) + 6:-5]))
    return best


def run_stage(model: SpeakerModel, classifier: ArcFace, data: TrainData, cfg: StageConfig, seed: int,
              log_path: str | None = None, ckpt_dir: str | None = None, resume: bool = True,
              max_epochs: int | None = None) -> StageResult:
    """Train one stage; checkpoints at every epoch boundary allow bit-exact resumption.

    ``max_epochs`` stops early (used to simulate an interrupted run).
    """
    if data.num_classes != classifier.weight.shape[0]:
        raise TrainingError(f"classifier has {classifier.weight.shape[0]} rows for {data.num_classes} classes")
    classifier.margin = cfg.margin
    classifier.scale = cfg.scale
    trainable = model.select_trainable(cfg.trainable)
    trainable.update({"cls." + n: p for n, p in classifier.named_parameters()})
    for p in classifier.parameters():
        p.requires_grad = True
    opt = AdamW(trainable, cfg.lr_start, weight_decay=cfg.weight_decay)

    encoder_trains = any(n.startswith(("enc.", "lora.")) for n in trainable)
    model.head.train(True)
    model.encoder.train(cfg.trainable == "all")

    n = len(data.examples)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = n // bs
    result = StageResult()
    start_epoch = 0
    if resume and ckpt_dir:
        last = _latest_epoch(ckpt_dir, cfg.stage)
        if last >= 0:
            arrays = load_checkpoint(_stage_ckpt(ckpt_dir, cfg.stage, last))
            model.load_tensors(arrays)
            classifier.load_state_dict({k[4:]: v for k, v in arrays.items() if k.startswith("cls.")})
            opt.load_state_arrays(arrays, "opt.")
            result.epoch_losses = list(arrays["meta.epoch_losses"])
            start_epoch = last + 1
            log.info("resuming stage %s at epoch %d", cfg.stage, start_epoch)
    if log_path:
        kept = []
        if start_epoch > 0 and os.path.exists(log_path):
            with open(log_path) as f:
                kept = [ln for ln in f if int(ln.split("\t", 1)[0]) < start_epoch]
        with open(log_path, "w") as f:
            f.writelines(kept)

    end_epoch = cfg.epochs if max_epochs is None else min(cfg.epochs, max_epochs)
    for epoch in range(start_epoch, end_epoch):
        rng = stream(seed, cfg.stage, "data", epoch)
        drng = stream(seed, cfg.stage, "dropout", epoch) if encoder_trains else None
        order = rng.permutation(n)
        losses = []
        lines = []
        for step in range(steps_per_epoch):
            batch = [data.examples[i] for i in order[step * bs:(step + 1) * bs]]
            n_frames = int(rng.integers(cfg.frame_range[0], cfg.frame_range[1] + 1))
            feats, labels = make_batch(batch, n_frames, rng, cfg.augment)
            lr = lr_at(cfg, epoch, step, steps_per_epoch)
            emb = model.head(model.encoder.encode(feats, drng))
            loss = arcface_loss(emb, labels, classifier)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at stage {cfg.stage} epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(loss.item())
            lines.append(f"{epoch}\t{step}\t{lr:.6e}\t{loss.item():.6f}\n")
        result.epoch_losses.append(float(np.mean(losses)))
        result.log_lines.extend(lines)
        log.info("stage %s epoch %d loss %.4f", cfg.stage, epoch, result.epoch_losses[-1])
        if log_path:
            with open(log_path, "a") as f:
                f.writelines(lines)
        if ckpt_dir:
            os.makedirs(ckpt_dir, exist_ok=True)
            arrays = model.tensors()
            arrays.update({"cls." + k: v for k, v in classifier.state_dict().items()})
            arrays.update(opt.state_arrays("opt."))
            arrays["meta.epoch_losses"] = np.array(result.epoch_losses, dtype=np.float64)
            save_checkpoint(_stage_ckpt(ckpt_dir, cfg.stage, epoch), arrays)
    for p in model.parameters():
        p.requires_grad = False
    model.eval()
    return result


def lmft_classifier(classifier: ArcFace, data_from: TrainData, data_to: TrainData) -> ArcFace:
    """Keep only the classifier rows for classes present in ``data_to`` (unperturbed speakers)."""
    rows = [data_from.classes.index(c) for c in data_to.classes]
    out = ArcFace.__new__(ArcFace)
    out.weight = T.parameter(classifier.weight.data[rows].copy())
    out.margin = classifier.margin
    out.scale = classifier.scale
    return out


# -- embedding extraction ------------------------------------------------------------------------

def extract_embeddings(model: SpeakerModel, utterances: list[fe.Utterance]) -> dict[str, np.ndarray]:
    model.eval()
    out = {}
    with T.no_grad():
        for u in utterances:
            feats = utterance_features(u.waveform.samples)
            out[u.utt_id] = model.embed(feats).data[0].copy()
    return out


def default_stage_sequence(stages: list[str]) -> list[str]:
    """Validate stage ordering (freeze -> joint -> lmft; gaps allowed, no reordering)."""
    pos = [STAGES.index(s) if s in STAGES else -1 for s in stages]
    if any(p < 0 for p in pos):
        raise ValueError(f"unknown stage in {stages}")
    if pos != sorted(pos) or len(set(pos)) != len(pos):
        raise ValueError(f"stages must run in order {STAGES}, got {stages}")
    return list(stages)


def with_overrides(cfg: StageConfig, **kw) -> StageConfig:
    return replace(cfg, **kw)
