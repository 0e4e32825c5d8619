"""Training loop: patch sampling, batched Adam steps, early stopping.

One epoch walks the sampled patch grid of every training case (in a
seeded shuffled order, optionally capped), accumulating the combined
loss over mini-batches. After each epoch the model runs full tiled
inference on the validation cases; the tracked score is the mean Dice
over foreground classes. Training stops once the score has not improved
for `patience` consecutive epochs and the best-scoring parameters are
restored.

Three model kinds share the loop: a coarse-grid sub-network trained on
merged binary targets, a plain fine-grid network, and the two-network
cascade (whose loss is taken on the fine output while the coarse tail
fine-tunes through the bridge).
"""

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tape, Tensor, add, scale
from .checkpoint import check_same_arch, load_checkpoint, model_arch, save_model
from .config import PipelineConfig, render_config
from .errors import ConfigError, GeometryError
from .inference import predict_cascade_high, predict_net
from .losses import LossConfig, combined_loss
from .metrics import dice
from .optim import Adam
from .sampler import augment, cut_sample, training_grid
from .unet import CascadeModel, UNet, UNetConfig, build_unet, freeze_lowres
from .volume import Volume, clip_hu, merge_format1, resample


@dataclass(frozen=True)
class TrainCase:
    case_id: str
    ct_high: Volume
    labels_high: Volume
    ct_low: Volume = None
    labels_low: Volume = None  # merged binary labels on the coarse grid
    split: str = None


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    best_score: float = -np.inf
    best_epoch: int = 0
    since_best: int = 0


@dataclass
class TrainResult:
    model: object
    best_epoch: int
    best_score: float
    history: list = field(default_factory=list)


# ------------------------------------------------------------ data prep


def preprocess_intensity(ct: Volume, cfg: PipelineConfig):
    """Clip and resample one intensity volume onto (fine, coarse) grids."""
    ct = clip_hu(ct, cfg.clip_lo, cfg.clip_hi)
    high_sp = (cfg.spacing_high,) * 3
    low_sp = (cfg.spacing_low,) * 3
    ct_high = ct if ct.spacing == high_sp else clip_hu(
        resample(ct, high_sp, "cubic"), cfg.clip_lo, cfg.clip_hi)
    ct_low = clip_hu(resample(ct, low_sp, "cubic"), cfg.clip_lo, cfg.clip_hi)
    return ct_high, ct_low


def preprocess_case(case_id, ct: Volume, labels: Volume, cfg: PipelineConfig,
                    split=None) -> TrainCase:
    """Clip and resample one raw case onto the fine and coarse grids."""
    ct_high, ct_low = preprocess_intensity(ct, cfg)
    high_sp = (cfg.spacing_high,) * 3
    low_sp = (cfg.spacing_low,) * 3
    labels_high = labels if labels.spacing == high_sp else resample(
        labels, high_sp, "nearest")
    labels_low = resample(merge_format1(labels_high), low_sp, "nearest")
    return TrainCase(case_id, ct_high, labels_high, ct_low, labels_low, split)


def split_cases(cases, cfg: PipelineConfig):
    """(train, val) lists: manifest tags when present, else a seeded shuffle.

    A single-case dataset validates on its own training case (the
    overfit configuration).
    """
    if not cases:
        raise ConfigError("dataset is empty")
    if all(c.split for c in cases):
        train = [c for c in cases if c.split == "train"]
        val = [c for c in cases if c.split == "val"]
    elif len(cases) == 1:
        train = list(cases)
        val = list(cases)
    else:
        order = np.random.default_rng(cfg.seed).permutation(len(cases))
        n_val = max(1, int(round(cfg.cohort_val_fraction * len(cases))))
        val = [cases[i] for i in order[:n_val]]
        train = [cases[i] for i in order[n_val:]]
    if not train:
        raise ConfigError("training split is empty")
    if not val:
        raise ConfigError("validation split is empty")
    return train, val


# ---------------------------------------------------------- model builds


def build_model(cfg: PipelineConfig, rng):
    """The model the `train` stage optimizes (cascade or plain network)."""
    rate = cfg.dropout_rate if cfg.use_dropout else 0.0
    high = UNetConfig(
        base_filters=cfg.high_base_filters,
        levels=cfg.high_levels,
        in_channels=2 if cfg.use_multires else 1,
        out_classes=3,
        input_size=cfg.high_input_size,
        dropout_rate=rate,
    )
    if not cfg.use_multires:
        return build_unet(high, rng)
    low = UNetConfig(
        base_filters=cfg.low_base_filters,
        levels=cfg.low_levels,
        in_channels=1,
        out_classes=2,
        input_size=cfg.low_input_size,
        dropout_rate=rate,
    )
    return CascadeModel(low, high, cfg.ratio, rng)


def build_lowres_model(cfg: PipelineConfig, rng) -> UNet:
    return build_unet(
        UNetConfig(
            base_filters=cfg.low_base_filters,
            levels=cfg.low_levels,
            in_channels=1,
            out_classes=2,
            input_size=cfg.low_input_size,
            dropout_rate=cfg.dropout_rate if cfg.use_dropout else 0.0,
        ),
        rng,
    )


def load_lowres_into(model: CascadeModel, ckpt_path):
    """Copy pretrained coarse-net parameters into a cascade and freeze."""
    ckpt = load_checkpoint(ckpt_path)
    check_same_arch(ckpt, model_arch(model.lowres))
    for w, b in model.lowres.parameterized_layers():
        for p in (w, b):
            if p.name not in ckpt.params:
                raise GeometryError(f"checkpoint lacks parameter {p.name}")
            p.data[...] = ckpt.params[p.name]
    freeze_lowres(model)
    return model


# -------------------------------------------------------------- the loop


def _mode(model):
    if isinstance(model, CascadeModel):
        return "cascade"
    return "low" if model.cfg.out_classes == 2 else "high"


def _case_volumes(case: TrainCase, mode):
    if mode == "low":
        if case.ct_low is None or case.labels_low is None:
            raise ConfigError(f"case {case.case_id} lacks coarse-grid volumes")
        return case.ct_low, case.labels_low
    return case.ct_high, case.labels_high


def _forward(model, tape, sample, cfg, training, rng):
    high = Tensor(sample.high_in[None] * cfg.input_scale)
    if isinstance(model, CascadeModel):
        low = Tensor(sample.low_in[None] * cfg.input_scale)
        _, probs = model.forward(tape, low, high, training=training, rng=rng)
        return probs
    return model.forward(tape, high, training=training, rng=rng)


def _validate(model, cases, cfg: PipelineConfig, mode):
    """Mean foreground Dice over the validation cases plus per-class rows."""
    per_case = []
    merged = []
    by_class = {}
    for case in cases:
        ct, ref = _case_volumes(case, mode)
        if mode == "cascade":
            probs = predict_cascade_high(model, case.ct_high, case.ct_low,
                                         cfg.input_scale)
        else:
            probs = predict_net(model, ct, cfg.input_scale)
        pred = probs.argmax(axis=0)
        ref_data = ref.data
        classes = range(1, probs.shape[0])
        present = [c for c in classes if (ref_data == c).any()]
        scores = [dice(pred == c, ref_data == c) for c in (present or classes)]
        per_case.append(float(np.mean(scores)))
        merged.append(dice(pred > 0, ref_data > 0))
        for c in classes:
            if (ref_data == c).any():
                by_class.setdefault(c, []).append(dice(pred == c, ref_data == c))
    row = {"val_merged": float(np.mean(merged))}
    for c, vals in sorted(by_class.items()):
        row[f"val_c{c}"] = float(np.mean(vals))
    return float(np.mean(per_case)), row


def _named(model):
    if hasattr(model, "named_parameters"):
        return model.named_parameters()
    return [(p.name, p) for p in model.parameters()]


def _snapshot(model):
    return {name: p.data.copy() for name, p in _named(model)}


def _restore(model, snap):
    for name, p in _named(model):
        p.data[...] = snap[name]


def _epoch_entries(train_cases, cfg, mode, out_size, rng):
    entries = []
    for idx, case in enumerate(train_cases):
        _, labels = _case_volumes(case, mode)
        jitter = int(rng.integers(cfg.train_stride)) if cfg.grid_jitter else 0
        grid = training_grid(labels.shape, out_size, cfg.train_stride,
                             jitter=jitter)
        entries.extend((idx, corner) for corner in grid.tiles())
    order = rng.permutation(len(entries))
    entries = [entries[i] for i in order]
    if cfg.patches_per_epoch:
        entries = entries[: cfg.patches_per_epoch]
    return entries


def _cut(model, case: TrainCase, corner, cfg, mode):
    ct, labels = _case_volumes(case, mode)
    if mode == "cascade":
        if case.ct_low is None:
            raise ConfigError(f"case {case.case_id} lacks the coarse-grid volume")
        return cut_sample(
            ct, labels, corner,
            model.highres.cfg.input_size, model.highres.cfg.output_size,
            low_ct=case.ct_low, low_input_size=model.lowres.cfg.input_size,
            class_weights=cfg.class_weights, case_id=case.case_id,
        )
    net_cfg = model.cfg
    weights = cfg.format1_weights if mode == "low" else cfg.class_weights
    return cut_sample(ct, labels, corner, net_cfg.input_size,
                      net_cfg.output_size, class_weights=weights,
                      case_id=case.case_id)


def train(cases, model, cfg: PipelineConfig, out_dir=None, log=None) -> TrainResult:
    """Optimize `model` on the cases; returns the best-epoch parameters.

    Writes best.ckpt and history.csv under `out_dir` when given. The
    entire run is a deterministic function of cfg.seed, the cases and
    the model's initial parameters.
    """
    mode = _mode(model)
    train_cases, val_cases = split_cases(cases, cfg)
    out_size = (model.highres if mode == "cascade" else model).cfg.output_size
    loss_cfg = LossConfig(
        alpha=cfg.loss_alpha,
        gamma=cfg.loss_gamma,
        class_weights=cfg.format1_weights if mode == "low" else cfg.class_weights,
        topk_fraction=cfg.topk_fraction,
    )
    opt = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rng = np.random.default_rng(cfg.seed)
    state = TrainState()
    best = _snapshot(model)
    history = []

    for epoch in range(1, cfg.max_epochs + 1):
        state.epoch = epoch
        entries = _epoch_entries(train_cases, cfg, mode, out_size, rng)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(entries), cfg.batch_size):
            batch = entries[start:start + cfg.batch_size]
            tape = Tape()
            total = None
            for idx, corner in batch:
                sample = _cut(model, train_cases[idx], corner, cfg, mode)
                if cfg.use_augment:
                    sample = augment(sample, rng, cfg.clip_lo, cfg.clip_hi,
                                     probability=cfg.augment_probability)
                probs = _forward(model, tape, sample, cfg, True, rng)
                loss = combined_loss(tape, probs, sample.target, sample.weights,
                                     loss_cfg)
                total = loss if total is None else add(tape, total, loss)
            total = scale(tape, total, 1.0 / len(batch))
            tape.backward(total)
            opt.step()
            opt.zero_grad()
            state.step += 1
            epoch_loss += total.data.item()
            n_batches += 1

        score, extras = _validate(model, val_cases, cfg, mode)
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / max(n_batches, 1),
            "val_mean": score,
        }
        row.update(extras)
        history.append(row)
        if log:
            log("epoch %d  train_loss %.4f  val_mean %.4f  val_merged %.4f"
                % (epoch, row["train_loss"], score, row.get("val_merged", 0.0)))

        if score > state.best_score:
            state.best_score = score
            state.best_epoch = epoch
            state.since_best = 0
            best = _snapshot(model)
        else:
            state.since_best += 1
            if state.since_best >= cfg.patience:
                break

    _restore(model, best)
    result = TrainResult(model, state.best_epoch, state.best_score, history)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_model(os.path.join(out_dir, "best.ckpt"), model,
                   config_text=render_config(cfg))
        write_history(os.path.join(out_dir, "history.csv"), history)
    return result


HISTORY_COLUMNS = ("epoch", "train_loss", "val_mean", "val_merged",
                   "val_c1", "val_c2")


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([
                row.get(col, "") if not isinstance(row.get(col), float)
                else f"{row[col]:.6f}"
                for col in HISTORY_COLUMNS
            ])


def pretrain_lowres(cases, cfg: PipelineConfig, out_dir=None, log=None,
                    rng=None) -> TrainResult:
    """Train the coarse sub-network alone on merged binary targets."""
    model = build_lowres_model(cfg, rng or np.random.default_rng(cfg.seed))
    return train(cases, model, cfg, out_dir=out_dir, log=log)
