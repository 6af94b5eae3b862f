"""Optimization loop over mixed batches, validation, and model selection.

One Adam optimizer holds the parameters of both co-trained instances;
every step backpropagates the single summed objective and follows a
per-step cosine learning-rate schedule. Besides the dual-instance method
the loop supports a plain single-model supervised variant (the
single-task and multi-task baselines) and a single-model weak/strong
view-consistency variant (the image-augmentation ablation).

Runs are deterministic in the config seed on one platform; checkpoints
restore training bit-compatibly.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .augment import strong_augment, weak_augment
from .data import PartialDataset, draw_samples, sample_batch, split_holdout
from .losses import (LossConfig, LossReport, attr_bce_loss, id_ce_loss,
                     semi_par_directed, semi_reid_directed, total_objective)
from .metrics import MetricsReport, par_metrics, reid_map_cmc
from .model import (ArchConfig, DualOutputs, DualTaskModel, build_model,
                    forward_dual, images_to_tensor, init_dual, samples_to_tensor)

VARIANTS = ("dual", "single", "imgaug")
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised when a step produces a non-finite loss; carries the report."""

    def __init__(self, step: int, report: dict):
        super().__init__(f"non-finite loss at step {step}: {report}")
        self.step = step
        self.report = report


@dataclass
class TrainConfig:
    arch: ArchConfig
    loss: LossConfig = field(default_factory=LossConfig)
    epochs: int = 100
    batch_size: int = 64
    lr0: float = 3e-4
    optimizer: str = "adam"
    seed: int = 0
    eval_every: int = 1   # epochs between validation passes
    ratio_a: float = 0.5  # fraction of each batch drawn from dataset A

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 4:
            raise ValueError(f"batch_size must be >= 4, got {self.batch_size}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if not 0.0 < self.ratio_a < 1.0:
            raise ValueError(f"ratio_a must be in (0, 1), got {self.ratio_a}")


@dataclass
class TrainedRun:
    best_model: DualTaskModel
    best_side: str            # "L" | "R"; single-model variants report "L"
    history: list             # one dict per step: step, epoch, lr, loss parts
    val_history: list         # (epoch, {"L": MetricsReport[, "R": ...]})


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * 0.5 * (1 + cos(pi * step / total_steps))."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)


def select_best(model_l, model_r, metrics_l: MetricsReport, metrics_r: MetricsReport):
    """Keep the instance with the higher primary score (mean of retrieval
    mAP and attribute F1 over its tasks); ties go to the left model."""
    if metrics_l.task_set() != metrics_r.task_set():
        raise ValueError(f"mismatched task sets: {metrics_l.task_set()} vs {metrics_r.task_set()}")
    if metrics_l.primary_score() >= metrics_r.primary_score():
        return model_l, "L"
    return model_r, "R"


def _chunked_outputs(model, samples, chunk: int = 256):
    outs = []
    for i in range(0, len(samples), chunk):
        outs.append(model(samples_to_tensor(samples[i:i + chunk])))
    return outs


def reid_features(model, samples) -> np.ndarray:
    with torch.no_grad():
        outs = _chunked_outputs(model, tuple(samples))
        return torch.cat([o.reid_features for o in outs]).numpy()


def par_probabilities(model, samples) -> np.ndarray:
    with torch.no_grad():
        outs = _chunked_outputs(model, tuple(samples))
        return torch.sigmoid(torch.cat([o.par_logits for o in outs])).numpy()


def evaluate_reid(model, query_ds: PartialDataset, gallery_ds: PartialDataset):
    was_training = model.training
    model.eval()
    try:
        qf = reid_features(model, query_ds.samples)
        gf = qf if gallery_ds is query_ds else reid_features(model, gallery_ds.samples)
        return reid_map_cmc(qf, query_ds.person_ids(), query_ds.camera_ids(),
                            gf, gallery_ds.person_ids(), gallery_ds.camera_ids())
    finally:
        model.train(was_training)


def evaluate_par(model, ds: PartialDataset, threshold: float = 0.5):
    was_training = model.training
    model.eval()
    try:
        probs = par_probabilities(model, ds.samples)
        return par_metrics(probs, ds.attributes_matrix().astype(np.int64), threshold)
    finally:
        model.train(was_training)


def evaluate_model(model, ds_a: PartialDataset | None, ds_b: PartialDataset | None,
                   threshold: float = 0.5) -> MetricsReport:
    """Metrics for whichever tasks the model has, on held-out data.

    Retrieval uses the dataset as both query and gallery; the protocol's
    same-id/same-camera exclusion removes each query's self-match.
    """
    reid = None
    if model.cfg.has_reid and ds_a is not None:
        reid = evaluate_reid(model, ds_a, ds_a)
    par = None
    if model.cfg.has_par and ds_b is not None:
        par = evaluate_par(model, ds_b, threshold)
    return MetricsReport(reid=reid, par=par)


def _single_supervised(out, n_a: int, ids, attrs) -> LossReport:
    ref = out.reid_logits if out.reid_logits is not None else out.par_logits
    zero = torch.zeros((), dtype=ref.dtype)
    sup_reid, sup_par = zero, zero
    if out.reid_logits is not None:
        sup_reid = id_ce_loss(out.reid_logits[:n_a], ids)
    if out.par_logits is not None:
        sup_par = attr_bce_loss(out.par_logits[n_a:], attrs.to(out.par_logits.dtype))
    return LossReport(sup_reid=sup_reid, sup_par=sup_par, semi_reid=zero,
                      semi_par=zero, semi_unlabeled=zero, semi_labeled=zero,
                      total=sup_reid + sup_par)


def _imgaug_report(model, batch, loss_cfg: LossConfig, aug_rng) -> LossReport:
    """Single-model view consistency: the weak view supervises the strong
    view (one direction), with the same per-task consistency losses as
    the dual-instance method."""
    images = batch.images()
    weak = model(images_to_tensor(weak_augment(images, aug_rng)))
    strong = model(images_to_tensor(strong_augment(images, aug_rng)))
    n_a = batch.n_a

    ids = torch.from_numpy(batch.a_person_ids()) if model.cfg.has_reid else None
    attrs = torch.from_numpy(batch.b_attributes()) if model.cfg.has_par else None
    sup = _single_supervised(weak, n_a, ids, attrs)

    zero = sup.semi_unlabeled
    semi_u, semi_l = zero, zero
    semi_reid, semi_par = zero, zero
    if loss_cfg.lam > 0:
        par_on_a = semi_par_directed(strong, weak, n_a, True, loss_cfg)
        reid_on_b = semi_reid_directed(strong, weak, n_a, False, loss_cfg)
        if par_on_a is not None:
            semi_u = semi_u + par_on_a / n_a
            semi_par = semi_par + par_on_a / n_a
        if reid_on_b is not None:
            semi_u = semi_u + reid_on_b / batch.n_b
            semi_reid = semi_reid + reid_on_b / batch.n_b
        if loss_cfg.include_labeled_consistency:
            reid_on_a = semi_reid_directed(strong, weak, n_a, True, loss_cfg)
            par_on_b = semi_par_directed(strong, weak, n_a, False, loss_cfg)
            if reid_on_a is not None:
                semi_l = semi_l + reid_on_a / n_a
                semi_reid = semi_reid + reid_on_a / n_a
            if par_on_b is not None:
                semi_l = semi_l + par_on_b / batch.n_b
                semi_par = semi_par + par_on_b / batch.n_b

    total = sup.sup_reid + sup.sup_par + loss_cfg.lam * (semi_u + semi_l)
    return LossReport(sup_reid=sup.sup_reid, sup_par=sup.sup_par, semi_reid=semi_reid,
                      semi_par=semi_par, semi_unlabeled=semi_u, semi_labeled=semi_l,
                      total=total)


def save_model(path, model: DualTaskModel, cfg: TrainConfig, side: str):
    """Persist a trained model for later evaluation."""
    torch.save({"version": CHECKPOINT_VERSION, "cfg": cfg, "side": side,
                "state": model.state_dict()}, path)


def load_model(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg: TrainConfig = blob["cfg"]
    model = build_model(cfg.arch, seed=0)
    model.load_state_dict(blob["state"])
    model.eval()
    return model, cfg, blob["side"]


def _save_checkpoint(path, cfg, variant, epoch, models, opt, rng, aug_rng,
                     history, val_history):
    torch.save({
        "version": CHECKPOINT_VERSION,
        "cfg": cfg,
        "variant": variant,
        "epoch": epoch,
        "models": [m.state_dict() for m in models],
        "optimizer": opt.state_dict(),
        "np_rng": rng.bit_generator.state,
        "aug_rng": aug_rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "history": history,
        "val_history": val_history,
    }, path)


def train(ds_a: PartialDataset, ds_b: PartialDataset, cfg: TrainConfig,
          variant: str = "dual", val_fraction: float = 0.1,
          log_path=None, checkpoint_path=None, checkpoint_every: int | None = None,
          stop_after_epoch: int | None = None, resume_from=None,
          pretrained_weights=None) -> TrainedRun:
    """Run the training loop and return the kept model plus its records.

    A seeded 10% (by default) holdout of each dataset serves as the
    validation split for periodic evaluation and final best-of-two
    selection. ``stop_after_epoch`` ends the run early after writing a
    checkpoint; ``resume_from`` restores one and continues bit-compatibly
    given the same datasets and config.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    if variant == "imgaug" and not (cfg.arch.has_reid and cfg.arch.has_par):
        raise ValueError("the imgaug variant needs both task heads")
    # keep blas/omp reductions bit-stable regardless of the host's core count
    torch.set_num_threads(int(os.environ.get("KA_THREADS", "1")))

    seeds = np.random.SeedSequence(cfg.seed).generate_state(6)
    train_a, val_a = split_holdout(ds_a, val_fraction, int(seeds[2]))
    train_b, val_b = split_holdout(ds_b, val_fraction, int(seeds[3]))

    arch = cfg.arch
    mixed = variant == "dual" or (arch.has_reid and arch.has_par)
    if mixed:
        n_train = len(train_a) + len(train_b)
    else:
        n_train = len(train_a) if arch.has_reid else len(train_b)
    spe = steps_per_epoch(n_train, cfg.batch_size)
    total_steps = cfg.epochs * spe

    if variant == "dual":
        model_l, model_r = init_dual(arch, int(seeds[1]), int(seeds[1]) + 1,
                                     pretrained_weights)
        models = [model_l, model_r]
    else:
        models = [build_model(arch, int(seeds[1]), pretrained_weights)]
    params = [p for m in models for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=cfg.lr0)
    rng = np.random.default_rng(int(seeds[0]))
    aug_rng = np.random.default_rng(int(seeds[4]))

    history: list[dict] = []
    val_history: list = []
    start_epoch = 0
    if resume_from is not None:
        blob = torch.load(resume_from, map_location="cpu", weights_only=False)
        if blob["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {blob['version']} != {CHECKPOINT_VERSION}")
        if blob["cfg"] != cfg or blob["variant"] != variant:
            raise ValueError("checkpoint config/variant does not match the requested run")
        for m, state in zip(models, blob["models"]):
            m.load_state_dict(state)
        opt.load_state_dict(blob["optimizer"])
        rng.bit_generator.state = blob["np_rng"]
        aug_rng.bit_generator.state = blob["aug_rng"]
        torch.set_rng_state(blob["torch_rng"])
        history = list(blob["history"])
        val_history = list(blob["val_history"])
        start_epoch = blob["epoch"]

    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    for m in models:
        m.train()

    log_f = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(start_epoch + 1, last_epoch + 1):
            for i in range(spe):
                step = (epoch - 1) * spe + i
                lr = cosine_lr(step, total_steps, cfg.lr0)
                for g in opt.param_groups:
                    g["lr"] = lr

                if mixed:
                    batch = sample_batch(train_a, train_b, cfg.batch_size, cfg.ratio_a, rng)
                elif arch.has_reid:
                    batch_samples = draw_samples(train_a, cfg.batch_size, rng)
                else:
                    batch_samples = draw_samples(train_b, cfg.batch_size, rng)

                if variant == "dual":
                    report = total_objective(forward_dual(models[0], models[1], batch), cfg.loss)
                elif variant == "imgaug":
                    report = _imgaug_report(models[0], batch, cfg.loss, aug_rng)
                else:
                    if mixed:
                        out = models[0](samples_to_tensor(batch.a_samples + batch.b_samples))
                        n_a = batch.n_a
                        ids = torch.from_numpy(batch.a_person_ids())
                        attrs = torch.from_numpy(batch.b_attributes())
                    else:
                        out = models[0](samples_to_tensor(batch_samples))
                        if arch.has_reid:
                            n_a = len(batch_samples)
                            ids = torch.from_numpy(np.array(
                                [s.person_id for s in batch_samples], dtype=np.int64))
                            attrs = None
                        else:
                            n_a = 0
                            ids = None
                            attrs = torch.from_numpy(np.stack(
                                [s.attributes for s in batch_samples]).astype(np.float32))
                    report = _single_supervised(out, n_a, ids, attrs)

                if not report.finite():
                    raise TrainingDiverged(step, report.floats())
                opt.zero_grad()
                report.total.backward()
                opt.step()

                record = {"step": step, "epoch": epoch, "lr": lr, **report.floats()}
                history.append(record)
                if log_f is not None:
                    log_f.write(json.dumps(record) + "\n")

            if epoch % cfg.eval_every == 0 or epoch == last_epoch:
                reports = {"L": evaluate_model(models[0], val_a, val_b)}
                if variant == "dual":
                    reports["R"] = evaluate_model(models[1], val_a, val_b)
                val_history.append((epoch, reports))

            at_stop = stop_after_epoch is not None and epoch == stop_after_epoch
            if checkpoint_path is not None and (
                    at_stop or (checkpoint_every is not None and epoch % checkpoint_every == 0)):
                _save_checkpoint(checkpoint_path, cfg, variant, epoch, models, opt,
                                 rng, aug_rng, history, val_history)
    finally:
        if log_f is not None:
            log_f.close()

    final_reports = val_history[-1][1]
    if variant == "dual":
        best_model, best_side = select_best(models[0], models[1],
                                            final_reports["L"], final_reports["R"])
    else:
        best_model, best_side = models[0], "L"
    return TrainedRun(best_model=best_model, best_side=best_side,
                      history=history, val_history=val_history)
