"""Mean-teacher training: losses, teacher averaging, augmentation, optimizer, stages."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, ContractError, DivergenceError
from .evaluation import DecodeConfig, decode, event_f1
from .model import ClipPrediction, ModelConfig, ModelOutput, build_params, forward, save_checkpoint
from .params import ParamSet
from .tensor import Tensor, getitem, no_grad

LOG_COLUMNS = (
    "epoch",
    "lr",
    "cons_w",
    "loss_total",
    "loss_strong",
    "loss_weak",
    "loss_cons",
    "val_f1_student",
    "val_f1_teacher",
)


@dataclass
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 1
    n_strong: int = 1
    n_weak: int = 1
    n_unlabeled: int = 2
    lr_max: float = 0.001
    rampup_epochs: int = 50
    ema_alpha: float = 0.999
    weak_loss_weight: float = 0.5
    consistency_max_weight: float = 2.0
    weight_decay: float = 1e-6
    seed: int = 0
    validate_every: int = 1
    # augmentation: each transform fires with its probability; 0 disables it
    augment: bool = True
    mixup_prob: float = 0.5
    mixup_alpha: float = 0.2
    time_mask_prob: float = 0.5
    time_mask_rate: float = 0.1
    shift_prob: float = 0.5
    max_time_shift: int = 24
    max_freq_shift: int = 4
    filter_prob: float = 0.5
    filter_db: float = 6.0
    filter_max_knots: int = 6

    def __post_init__(self):
        quotas = (self.n_strong, self.n_weak, self.n_unlabeled)
        if min(quotas) < 0 or sum(quotas) == 0:
            raise ConfigError(f"batch quotas {quotas} must be >= 0 with at least one > 0")
        if not 0.0 <= self.ema_alpha < 1.0:
            raise ConfigError(f"ema_alpha must lie in [0, 1), got {self.ema_alpha}")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.validate_every < 1:
            raise ConfigError("epochs >= 0, steps_per_epoch >= 1 and validate_every >= 1 required")
        if self.rampup_epochs < 0:
            raise ConfigError("rampup_epochs must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# schedules and teacher averaging
# ---------------------------------------------------------------------------


def ramp(epoch: float, rampup_epochs: int = 50) -> float:
    """``exp(-5 (1 - t)^2)`` with ``t = min(epoch / rampup_epochs, 1)``."""
    if rampup_epochs == 0:
        return 1.0
    t = min(epoch / rampup_epochs, 1.0)
    return math.exp(-5.0 * (1.0 - t) ** 2)


def schedules(epoch: int, cfg: TrainConfig) -> tuple[float, float]:
    """Learning rate and consistency weight for ``epoch``."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    r = ramp(epoch, cfg.rampup_epochs)
    return cfg.lr_max * r, cfg.consistency_max_weight * r


def ema_update(teacher: ParamSet, student: ParamSet, alpha: float) -> ParamSet:
    """In place ``t <- alpha * t + (1 - alpha) * s`` over leaves and BN buffers."""
    if teacher.manifest() != student.manifest():
        raise ContractError("teacher and student parameter manifests differ")
    for name, t in teacher.leaves.items():
        s = student.leaves[name].data
        t.data *= alpha
        t.data += (1.0 - alpha) * s
    for name, b in teacher.buffers.items():
        b *= alpha
        b += (1.0 - alpha) * student.buffers[name]
    return teacher


# ---------------------------------------------------------------------------
# batches and losses
# ---------------------------------------------------------------------------


@dataclass
class Clip:
    """One training clip: normalized features plus whatever labels it has."""

    clip_id: str
    features: np.ndarray  # (1001, 128)
    strong: np.ndarray | None = None  # (250, C) frame targets
    weak: np.ndarray | None = None  # (C,) clip targets
    embedding: np.ndarray | None = None  # (250, D) aligned

    @property
    def kind(self) -> str:
        if self.strong is not None:
            return "strong"
        return "weak" if self.weak is not None else "unlabeled"


@dataclass
class Batch:
    features: np.ndarray  # (B, Tf, F)
    strong: np.ndarray  # (B, Tt, C); zeros where not strong
    weak: np.ndarray  # (B, C); zeros where unlabeled
    kinds: tuple
    embedding: np.ndarray | None = None
    clip_ids: tuple = ()

    def copy(self) -> Batch:
        emb = None if self.embedding is None else self.embedding.copy()
        return Batch(
            self.features.copy(), self.strong.copy(), self.weak.copy(), self.kinds, emb, self.clip_ids
        )


def make_batch(clips, class_count: int, frames_out: int = 250) -> Batch:
    feats = np.stack([c.features for c in clips])
    strong = np.zeros((len(clips), frames_out, class_count))
    weak = np.zeros((len(clips), class_count))
    for i, c in enumerate(clips):
        if c.strong is not None:
            if np.shape(c.strong) != strong.shape[1:]:
                raise ContractError(
                    f"clip {c.clip_id}: strong targets {np.shape(c.strong)} != {strong.shape[1:]}"
                )
            strong[i] = c.strong
            weak[i] = c.strong.max(axis=0)
        elif c.weak is not None:
            weak[i] = c.weak
    embs = [c.embedding for c in clips]
    if any(e is None for e in embs) and not all(e is None for e in embs):
        raise ContractError("some clips in the batch lack embeddings")
    emb = None if embs[0] is None else np.stack(embs)
    return Batch(feats, strong, weak, tuple(c.kind for c in clips), emb, tuple(c.clip_id for c in clips))


@dataclass
class LossComponents:
    total: float
    strong: float
    weak: float
    cons: float


def batch_loss(
    student: ModelOutput,
    teacher: ModelOutput | None,
    batch: Batch,
    weak_weight: float = 0.5,
    cons_weight: float = 0.0,
) -> tuple[Tensor, LossComponents]:
    """Supervised BCE terms plus weighted student/teacher consistency.

    Strong BCE covers the strong-labelled clips' frames, weak BCE the
    weak-labelled clips, and the MSE consistency every clip. Teacher outputs
    are treated as constants. A missing teacher contributes zero.
    """
    B = len(batch.kinds)
    if student.strong.shape != batch.strong.shape or student.weak.shape != batch.weak.shape:
        raise ContractError(
            f"prediction shapes {student.strong.shape}/{student.weak.shape} do not match "
            f"labels {batch.strong.shape}/{batch.weak.shape}"
        )
    kinds = np.asarray(batch.kinds)
    zero = Tensor(np.asarray(0.0))
    s_idx = np.flatnonzero(kinds == "strong")
    w_idx = np.flatnonzero(kinds == "weak")
    l_strong = (
        nn.binary_cross_entropy(getitem(student.strong, s_idx), batch.strong[s_idx])
        if len(s_idx)
        else zero
    )
    l_weak = (
        nn.binary_cross_entropy(getitem(student.weak, w_idx), batch.weak[w_idx]) if len(w_idx) else zero
    )
    if teacher is not None and B:
        l_cons = nn.mse(student.strong, teacher.strong.data) + nn.mse(student.weak, teacher.weak.data)
    else:
        l_cons = zero
    total = l_strong + l_weak * weak_weight + l_cons * cons_weight
    comps = LossComponents(total.item(), l_strong.item(), l_weak.item(), l_cons.item())
    return total, comps


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _target_index(i: int, frames_in: int, frames_out: int) -> int:
    return i * frames_out // frames_in


def mixup(batch: Batch, lam: float, perm) -> Batch:
    """``x' = lam * x + (1 - lam) * x[perm]`` for features, embeddings and targets."""
    out = batch.copy()
    perm = np.asarray(perm)
    out.features = lam * batch.features + (1.0 - lam) * batch.features[perm]
    out.strong = lam * batch.strong + (1.0 - lam) * batch.strong[perm]
    out.weak = lam * batch.weak + (1.0 - lam) * batch.weak[perm]
    if batch.embedding is not None:
        out.embedding = lam * batch.embedding + (1.0 - lam) * batch.embedding[perm]
    return out


def time_mask(batch: Batch, start: int, stop: int, rows=None) -> Batch:
    """Zero feature frames ``[start, stop)`` and the matching target frames."""
    out = batch.copy()
    rows = np.arange(len(batch.kinds)) if rows is None else np.asarray(rows)
    tf, tt = batch.features.shape[1], batch.strong.shape[1]
    t0 = _target_index(start, tf, tt)
    t1 = -(-stop * tt // tf)
    out.features[rows, start:stop] = 0.0
    out.strong[rows, t0:t1] = 0.0
    return out


def shift(batch: Batch, frames: int, bands: int, rows=None) -> Batch:
    """Roll features by ``frames``/``bands``; targets and embeddings follow the frame roll."""
    out = batch.copy()
    rows = np.arange(len(batch.kinds)) if rows is None else np.asarray(rows)
    tf, tt = batch.features.shape[1], batch.strong.shape[1]
    tshift = int(round(frames * tt / tf))
    out.features[rows] = np.roll(batch.features[rows], (frames, bands), axis=(1, 2))
    out.strong[rows] = np.roll(batch.strong[rows], tshift, axis=1)
    if batch.embedding is not None:
        out.embedding[rows] = np.roll(batch.embedding[rows], tshift, axis=1)
    return out


def filter_gain(batch: Batch, gain_db, row: int, log_scale: float = 1.0) -> Batch:
    """Apply a per-band gain in dB to one clip of log-mel features.

    A power gain of ``g`` dB adds ``g * ln(10) / 10`` to a natural-log mel
    value; ``log_scale`` converts that into normalized feature units.
    """
    out = batch.copy()
    out.features[row] += np.asarray(gain_db)[None, :] * (math.log(10.0) / 10.0) * log_scale
    return out


def random_filter_db(bands: int, max_db: float, max_knots: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-linear gain curve through 2..max_knots random knots in [-max_db, max_db]."""
    k = int(rng.integers(2, max(2, max_knots) + 1))
    inner = np.sort(rng.uniform(0, bands - 1, size=k - 2))
    xs = np.concatenate([[0.0], inner, [bands - 1.0]])
    ys = rng.uniform(-max_db, max_db, size=k)
    return np.interp(np.arange(bands), xs, ys)


def augment(batch: Batch, cfg: TrainConfig, rng: np.random.Generator, log_scale: float = 1.0) -> Batch:
    """Randomly mix up, mask, shift and filter the batch.

    Mixup pairs clips of the same label kind so mixed targets stay meaningful.
    """
    out = batch
    kinds = np.asarray(batch.kinds)
    if cfg.mixup_prob > 0 and rng.random() < cfg.mixup_prob:
        lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        perm = np.arange(len(kinds))
        for kind in ("strong", "weak", "unlabeled"):
            idx = np.flatnonzero(kinds == kind)
            perm[idx] = rng.permutation(idx)
        out = mixup(out, lam, perm)
    tf, bands = batch.features.shape[1:]
    for i in range(len(kinds)):
        if cfg.time_mask_prob > 0 and rng.random() < cfg.time_mask_prob:
            span = int(rng.integers(1, max(1, int(cfg.time_mask_rate * tf)) + 1))
            start = int(rng.integers(0, tf - span + 1))
            out = time_mask(out, start, start + span, rows=[i])
        if cfg.shift_prob > 0 and rng.random() < cfg.shift_prob:
            dt = int(rng.integers(-cfg.max_time_shift, cfg.max_time_shift + 1))
            df = int(rng.integers(-cfg.max_freq_shift, cfg.max_freq_shift + 1))
            out = shift(out, dt, df, rows=[i])
        if cfg.filter_prob > 0 and rng.random() < cfg.filter_prob:
            gains = random_filter_db(bands, cfg.filter_db, cfg.filter_max_knots, rng)
            out = filter_gain(out, gains, i, log_scale)
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with bias correction and weight decay decoupled from the adaptive step."""

    def __init__(self, params: ParamSet, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in params.leaves.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.leaves.items()}
        self.t = 0

    def step(self, lr: float, weight_decay: float = 0.0, frozen: ParamSet | None = None) -> None:
        """Update every leaf that has a gradient.

        Args:
            lr: Step size.
            weight_decay: Decoupled decay coefficient.
            frozen: Parameters that must never be updated (the teacher);
                sharing a leaf with it is a contract error.
        """
        if frozen is not None:
            shared = {id(t) for t in frozen.leaves.values()} & {id(t) for t in self.params.leaves.values()}
            if shared:
                raise ContractError("optimizer update set overlaps with frozen parameters")
        for name, t in self.params.leaves.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise DivergenceError(name)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, t in self.params.leaves.items():
            if weight_decay:
                t.data *= 1.0 - lr * weight_decay
            g = t.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            t.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# prediction helpers
# ---------------------------------------------------------------------------


def predict_clips(params: ParamSet, cfg: ModelConfig, clips, batch_size: int = 4) -> list[ClipPrediction]:
    """Eval-mode predictions for a list of :class:`Clip`."""
    out = []
    with no_grad():
        for i in range(0, len(clips), batch_size):
            chunk = clips[i : i + batch_size]
            feats = np.stack([c.features for c in chunk])
            emb = np.stack([c.embedding for c in chunk]) if cfg.embedding_dim else None
            res = forward(feats, params, cfg, emb, training=False)
            for j, c in enumerate(chunk):
                out.append(ClipPrediction(res.strong.data[j].copy(), res.weak.data[j].copy(), c.clip_id))
    return out


def score_predictions(preds, ref_events, class_names, decode_cfg: DecodeConfig = DecodeConfig()) -> float:
    est = []
    for p in preds:
        est.extend(decode(p.strong, class_names, decode_cfg, p.clip_id))
    return event_f1(ref_events, est).f1


# ---------------------------------------------------------------------------
# stage orchestration
# ---------------------------------------------------------------------------


@dataclass
class TrainData:
    """Clips grouped by label stream plus an optional validation set.

    Attributes:
        strong, weak, unlabeled: Training streams.
        pseudo: Pseudo-labelled clips; they join the strong stream in stage 2.
        validation: Clips scored with event-F1 for checkpoint selection.
        validation_events: Reference events of the validation clips.
        class_names: Column order of the targets.
        log_scale: Normalized feature units per natural-log unit (1 / std).
    """

    class_names: tuple
    strong: list = field(default_factory=list)
    weak: list = field(default_factory=list)
    unlabeled: list = field(default_factory=list)
    pseudo: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    validation_events: list = field(default_factory=list)
    log_scale: float = 1.0


class _Stream:
    """Endless reshuffled pass over a list."""

    def __init__(self, items, rng: np.random.Generator):
        self.items = list(items)
        self.rng = rng
        self.order: list[int] = []

    def take(self, n: int) -> list:
        out = []
        for _ in range(n):
            if not self.order:
                self.order = self.rng.permutation(len(self.items)).tolist()
            out.append(self.items[self.order.pop(0)])
        return out


@dataclass
class StageResult:
    student: ParamSet
    teacher: ParamSet
    log: list
    best: dict  # "student"/"teacher" -> {"path", "epoch", "f1"}
    log_path: Path | None = None


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def run_stage(
    stage: int,
    data: TrainData,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir=None,
    decode_cfg: DecodeConfig = DecodeConfig(),
    progress=None,
    meta: dict | None = None,
) -> StageResult:
    """Train one mean-teacher stage from a fresh initialization.

    Args:
        stage: 1 or 2; stage 2 moves ``data.pseudo`` into the strong stream.
        data: Training streams and validation set.
        model_cfg: Network configuration.
        cfg: Optimization recipe.
        out_dir: Receives ``metrics_stage<k>.csv`` and the best checkpoints;
            nothing is written when None.
        decode_cfg: Event decoding used for validation F1.
        progress: Optional callable receiving each log row.
        meta: Extra entries stored in every checkpoint header.

    Returns:
        StageResult with the final student/teacher and the best checkpoints.
    """
    if stage not in (1, 2):
        raise ConfigError(f"stage must be 1 or 2, got {stage}")
    strong = list(data.strong)
    if stage == 2:
        if not data.pseudo:
            raise ConfigError("stage 2 requires pseudo-labelled clips (pseudo-label manifests)")
        strong += list(data.pseudo)
    streams = {"strong": strong, "weak": data.weak, "unlabeled": data.unlabeled}
    quotas = {"strong": cfg.n_strong, "weak": cfg.n_weak, "unlabeled": cfg.n_unlabeled}
    for kind, n in quotas.items():
        if n > 0 and not streams[kind]:
            raise ConfigError(f"{kind} stream is empty but its batch quota is {n}")
    class_count = len(data.class_names)
    if class_count != model_cfg.class_count:
        raise ConfigError(f"{class_count} class names for a {model_cfg.class_count}-class model")

    student = build_params(model_cfg, cfg.seed)
    teacher = student.clone()
    opt = AdamW(student)
    seq = np.random.SeedSequence([cfg.seed, stage])
    sample_seq, drop_seq = seq.spawn(2)
    samplers = {
        k: _Stream(v, np.random.default_rng(s)) for (k, v), s in zip(streams.items(), sample_seq.spawn(3))
    }
    drop_rng = np.random.default_rng(drop_seq)
    frames_out = model_cfg.output_frames

    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / f"metrics_stage{stage}.csv"
        with open(log_path, "w", newline="") as fh:
            csv.writer(fh).writerow(LOG_COLUMNS)

    log: list[dict] = []
    best = {"student": {"path": None, "epoch": None, "f1": -1.0}, "teacher": {"path": None, "epoch": None, "f1": -1.0}}
    step = 0
    for epoch in range(cfg.epochs):
        lr, cons_w = schedules(epoch, cfg)
        sums = np.zeros(4)
        for k in range(cfg.steps_per_epoch):
            clips = []
            for kind in ("strong", "weak", "unlabeled"):
                if quotas[kind]:
                    clips += samplers[kind].take(quotas[kind])
            batch = make_batch(clips, class_count, frames_out)
            if cfg.augment:
                aug_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stage, epoch, k, 7]))
                batch = augment(batch, cfg, aug_rng, data.log_scale)
            student.zero_grad()
            s_out = forward(batch.features, student, model_cfg, batch.embedding, training=True, rng=drop_rng)
            t_out = None
            if cfg.consistency_max_weight > 0:
                with no_grad():
                    t_out = forward(batch.features, teacher, model_cfg, batch.embedding, training=False)
            total, comps = batch_loss(s_out, t_out, batch, cfg.weak_loss_weight, cons_w)
            total.backward()
            opt.step(lr, cfg.weight_decay, frozen=teacher)
            step += 1
            ema_update(teacher, student, min(1.0 - 1.0 / (step + 1), cfg.ema_alpha))
            sums += (comps.total, comps.strong, comps.weak, comps.cons)
        sums /= cfg.steps_per_epoch

        f1_s = f1_t = float("nan")
        last = epoch == cfg.epochs - 1
        if data.validation and ((epoch + 1) % cfg.validate_every == 0 or last):
            f1_s = score_predictions(
                predict_clips(student, model_cfg, data.validation), data.validation_events, data.class_names, decode_cfg
            )
            f1_t = score_predictions(
                predict_clips(teacher, model_cfg, data.validation), data.validation_events, data.class_names, decode_cfg
            )
        row = dict(
            zip(
                LOG_COLUMNS,
                (epoch, lr, cons_w, *(float(v) for v in sums), f1_s, f1_t),
            )
        )
        log.append(row)
        if log_path is not None:
            with open(log_path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in LOG_COLUMNS])
        if progress is not None:
            progress(row)

        for role, params, f1 in (("student", student, f1_s), ("teacher", teacher, f1_t)):
            improved = f1 > best[role]["f1"] if not math.isnan(f1) else (last and not data.validation)
            if not improved:
                continue
            path = None
            if out is not None:
                path = out / f"stage{stage}_epoch{epoch}_{role}.flkc"
                info = {
                    "stage": stage,
                    "epoch": epoch,
                    "role": role,
                    "val_f1": None if math.isnan(f1) else f1,
                    "class_names": list(data.class_names),
                    **(meta or {}),
                }
                save_checkpoint(path, params, model_cfg, info)
                old = best[role]["path"]
                if old is not None and Path(old).exists():
                    Path(old).unlink()
            best[role] = {"path": path, "epoch": epoch, "f1": f1}
    return StageResult(student, teacher, log, best, log_path)
