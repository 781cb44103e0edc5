"""Pretraining loops: PULSE, label-paired oracles and ablations."""

from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import NumericOverflowError
from .model import PulseConfig, PulseModel, load_checkpoint, save_checkpoint
from .seeding import make_rng

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8
CLIP_NORM = 5.0


class Variant(str, enum.Enum):
    PULSE = "pulse"
    ORACLE_POSITIVE = "oracle-positive"
    ORACLE_NEGATIVE = "oracle-negative"
    NO_TV_PARAMS = "abl-no-tv"
    SHARED_ENCODERS = "abl-shared-encoders"
    FIXED_T0 = "abl-fixed-t0"
    RANDOM_PAIRS = "abl-random-pairs"


ABLATIONS = (Variant.NO_TV_PARAMS, Variant.SHARED_ENCODERS, Variant.FIXED_T0, Variant.RANDOM_PAIRS)


class TrainingDiverged(RuntimeError):
    pass


class PairingError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip: float = CLIP_NORM
    batch_size: int = 64
    seed: int = 0
    variant: str = Variant.PULSE.value
    warmup_frac: float = 0.3
    start_div: float = 25.0
    final_div: float = 1e4
    mask_min: float = 0.25
    mask_max: float = 0.50

    def __post_init__(self):
        self.variant = Variant(self.variant).value
        if self.clip != CLIP_NORM:
            raise ValueError("gradient clipping is fixed at 5")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.mask_min <= self.mask_max < 1:
            raise ValueError("mask extent must satisfy 0 < min <= max < 1")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- optimizer


def one_cycle_lr(step, total_steps, peak_lr, warmup_frac=0.3, start_div=25.0, final_div=1e4):
    """Linear warm-up from ``peak/start_div`` then cosine decay to ``peak/final_div``."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    start, floor = peak_lr / start_div, peak_lr / final_div
    warm = warmup_frac * total_steps
    if step <= warm:
        return start + (peak_lr - start) * (step / warm if warm > 0 else 1.0)
    span = max(total_steps - 1 - warm, 1e-12)
    frac = min((step - warm) / span, 1.0)
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(grads, max_norm=CLIP_NORM):
    """Scale ``grads`` (name -> array) so the global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class AdamW:
    def __init__(self, params, beta1=BETA1, beta2=BETA2, eps=EPS):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr, weight_decay):
        """In-place update of ``params`` (name -> array)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if weight_decay:
                p -= lr * weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    model: PulseModel
    optimizer: AdamW
    train_cfg: TrainConfig
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    best_params: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def restore_best(self):
        for k, arr in self.best_params.items():
            self.model.params[k].data = arr.copy()
        return self.model


def variant_model_config(model_cfg, variant):
    variant = Variant(variant)
    if variant is Variant.NO_TV_PARAMS:
        return replace(model_cfg, use_tv=False)
    if variant is Variant.SHARED_ENCODERS:
        return replace(model_cfg, shared_encoders=True)
    return model_cfg


def channel_stats(windows):
    flat = windows.reshape(-1, windows.shape[-1])
    std = flat.std(axis=0)
    return flat.mean(axis=0), np.where(std > 0, std, 1.0)


# ---------------------------------------------------------------- batches


def contiguous_mask(rng, W, lo=0.25, hi=0.5):
    """Zero-one mask hiding a random contiguous run of ``lo..hi`` of the window."""
    length = int(rng.integers(math.ceil(lo * W), math.floor(hi * W) + 1))
    start = int(rng.integers(0, W - length + 1))
    keep = np.ones(W)
    keep[start : start + length] = 0.0
    return keep, length / W


def same_label_partners(rng, labels, idx, by_class):
    partners = np.empty(len(idx), dtype=np.int64)
    for n, i in enumerate(idx):
        pool = by_class[labels[i]]
        if len(pool) < 2:
            raise PairingError(f"class {labels[i]} has a single window; cannot form pairs")
        j = i
        while j == i:
            j = pool[rng.integers(len(pool))]
        partners[n] = j
    return partners


class _Objective:
    """Builds the per-batch loss for one variant."""

    def __init__(self, model, cfg, Y, labels):
        self.model, self.cfg, self.Y, self.labels = model, cfg, Y, labels
        self.variant = Variant(cfg.variant)
        self.W = Y.shape[1]
        self.by_class = {c: np.flatnonzero(labels == c) for c in np.unique(labels)}
        if self.variant in (Variant.ORACLE_POSITIVE, Variant.ORACLE_NEGATIVE):
            for c, pool in self.by_class.items():
                if len(pool) < 2:
                    raise PairingError(f"class {c} has a single window; cannot form pairs")

    def __call__(self, idx, rng):
        m, Y, v = self.model, self.Y, self.variant
        info = {}
        if v in (Variant.ORACLE_POSITIVE, Variant.ORACLE_NEGATIVE):
            j = same_label_partners(rng, self.labels, idx, self.by_class)
            Yi, Yj = Y[idx], Y[j]
            if v is Variant.ORACLE_NEGATIVE:
                extents = []
                ki, kj = np.empty(Yi.shape[:2]), np.empty(Yj.shape[:2])
                for n in range(len(idx)):
                    ki[n], e1 = contiguous_mask(rng, self.W, self.cfg.mask_min, self.cfg.mask_max)
                    kj[n], e2 = contiguous_mask(rng, self.W, self.cfg.mask_min, self.cfg.mask_max)
                    extents += [e1, e2]
                info["mask_extent"] = float(np.mean(extents))
                return m.loss_cross(Yi * ki[..., None], Yj * kj[..., None], target=Yj), info
            return m.loss_cross(Yi, Yj), info
        if v is Variant.FIXED_T0:
            draws = [1]
        else:
            draws = [int(t) for t in rng.integers(1, self.W // 2 + 1, size=m.config.pseudo_pairs)]
        target = None
        if v is Variant.RANDOM_PAIRS:
            t_idx = rng.integers(len(Y), size=len(idx))
            target = Y[t_idx]
            info["cross_label"] = int(np.sum(self.labels[idx] != self.labels[t_idx]))
            info["pairs"] = len(idx)
        return m.loss_pulse(Y[idx], draws, target=target), info


def _grads(model):
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in model.params.items()}


def evaluate_loss(model, cfg, Y, labels, batch_size=256):
    """Validation loss with draws from a fixed seed, so epochs compare."""
    if len(Y) == 0:
        return math.nan
    obj = _Objective(model, cfg, Y, labels)
    rng = make_rng(cfg.seed, "validation")
    total = 0.0
    for s in range(0, len(Y), batch_size):
        idx = np.arange(s, min(s + batch_size, len(Y)))
        loss, _ = obj(idx, rng)
        total += loss.item() * len(idx)
    return total / len(Y)


# ---------------------------------------------------------------- training


def _log(path, record):
    if path is not None:
        with open(path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(dataset, model_cfg, train_cfg, out_dir=None, resume=False, progress=None):
    """Train one variant on ``dataset`` and return the final :class:`TrainState`.

    With ``out_dir`` the best checkpoint goes to ``out_dir/best``, a resumable
    one to ``out_dir/last`` and per-epoch records to ``out_dir/metrics.jsonl``.
    """
    cfg = train_cfg
    model_cfg = variant_model_config(model_cfg, cfg.variant)
    Ytr, ltr = dataset.subset("train")
    Yva, lva = dataset.subset("val")
    if len(Ytr) == 0 or len(Yva) == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    if Ytr.shape[2] != model_cfg.channels or Ytr.shape[1] != model_cfg.window:
        model_cfg = replace(model_cfg, channels=Ytr.shape[2], window=Ytr.shape[1])

    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = out_dir / "metrics.jsonl" if out_dir is not None else None
    run_meta = {"train_config": asdict(cfg), "dataset_hash": dataset.config_hash}

    if resume:
        if out_dir is None or not (out_dir / "last" / "manifest.json").exists():
            raise FileNotFoundError("nothing to resume")
        model, manifest, moments = load_checkpoint(out_dir / "last", with_moments=True)
        if manifest.get("run") != run_meta:
            raise ValueError("checkpoint was written by a different configuration")
        opt = AdamW({k: t.data for k, t in model.params.items()})
        opt.m, opt.v, opt.t = moments["m"], moments["v"], manifest["step"]
        state = TrainState(model, opt, cfg, step=manifest["step"], epoch=manifest["epoch"],
                           best_val=manifest["best_val"], best_epoch=manifest["best_epoch"],
                           history=manifest["history"], events=manifest["events"])
        best, _ = load_checkpoint(out_dir / "best")
        state.best_params = {k: t.data.copy() for k, t in best.params.items()}
    else:
        model = PulseModel(model_cfg, seed=cfg.seed)
        model.input_mean, model.input_std = channel_stats(Ytr)
        opt = AdamW({k: t.data for k, t in model.params.items()})
        state = TrainState(model, opt, cfg)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            if log_path.exists():
                log_path.unlink()

    Ytr_s, Yva_s = model.standardize(Ytr), model.standardize(Yva)
    train_obj = _Objective(model, cfg, Ytr_s, ltr)
    n_batches = math.ceil(len(Ytr) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    bad_in_row = 0

    for epoch in range(state.epoch, cfg.epochs):
        t_start = time.perf_counter()
        rng = make_rng(cfg.seed, "epoch", epoch)
        order = rng.permutation(len(Ytr))
        losses, extras = [], {}
        lr = None
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            lr = one_cycle_lr(state.step, total_steps, cfg.lr, cfg.warmup_frac,
                              cfg.start_div, cfg.final_div)
            for t in model.params.values():
                t.grad = None
            try:
                loss, info = train_obj(idx, rng)
                value = loss.item()
                if not math.isfinite(value):
                    raise FloatingPointError
                loss.backward()
            except (FloatingPointError, NumericOverflowError) as exc:
                bad_in_row += 1
                state.events.append({"epoch": epoch, "step": state.step, "event": "non-finite loss",
                                     "detail": str(exc)})
                if bad_in_row >= 2:
                    raise TrainingDiverged(
                        f"loss non-finite twice in a row at step {state.step}"
                    ) from exc
                state.step += 1
                continue
            bad_in_row = 0
            for k, val in info.items():
                extras.setdefault(k, []).append(val)
            grads, _ = clip_grad_norm(_grads(model), cfg.clip)
            if all(np.all(np.isfinite(g)) for g in grads.values()):
                opt.step({k: t.data for k, t in model.params.items()}, grads, lr, cfg.weight_decay)
            else:
                state.events.append({"epoch": epoch, "step": state.step,
                                     "event": "non-finite gradient, step skipped"})
            losses.append(value)
            state.step += 1

        val = evaluate_loss(model, cfg, Yva_s, lva)
        record = {"epoch": epoch, "step": state.step, "lr": lr,
                  "train_loss": float(np.mean(losses)) if losses else math.nan,
                  "val_loss": val}
        if "mask_extent" in extras:
            record["mask_extent"] = float(np.mean(extras["mask_extent"]))
        if "cross_label" in extras:
            record["cross_label_pairs"] = int(sum(extras["cross_label"]))
            record["pairs"] = int(sum(extras["pairs"]))
        state.history.append(dict(record))
        state.epoch = epoch + 1
        improved = val < state.best_val
        if improved:
            state.best_val, state.best_epoch = val, epoch
            state.best_params = {k: t.data.copy() for k, t in model.params.items()}
        record["wall_time"] = time.perf_counter() - t_start
        _log(log_path, record)
        if progress is not None:
            progress(record)
        if out_dir is not None:
            meta = {"run": run_meta, "step": state.step, "epoch": state.epoch,
                    "val_loss": val, "best_val": state.best_val, "best_epoch": state.best_epoch}
            if improved:
                save_checkpoint(model, out_dir / "best", extra=meta)
            save_checkpoint(model, out_dir / "last",
                            extra={**meta, "history": state.history, "events": state.events},
                            moments={"m": opt.m, "v": opt.v})
    return state


def train_oracle(dataset, model_cfg, train_cfg, polarity, **kw):
    variant = {"positive": Variant.ORACLE_POSITIVE, "negative": Variant.ORACLE_NEGATIVE}
    if polarity not in variant:
        raise ValueError(f"polarity must be 'positive' or 'negative', got {polarity!r}")
    return train(dataset, model_cfg, replace(train_cfg, variant=variant[polarity].value), **kw)


def train_ablation(dataset, model_cfg, train_cfg, which, **kw):
    try:
        v = Variant(which)
    except ValueError as exc:
        raise ValueError(f"unknown ablation {which!r}") from exc
    if v not in ABLATIONS:
        raise ValueError(f"{which!r} is not an ablation")
    return train(dataset, model_cfg, replace(train_cfg, variant=v.value), **kw)


def cross_label_fraction(history):
    pairs = sum(r.get("pairs", 0) for r in history)
    cross = sum(r.get("cross_label_pairs", 0) for r in history)
    return cross / pairs if pairs else math.nan, pairs
