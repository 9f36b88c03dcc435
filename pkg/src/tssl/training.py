"""Pretraining loop: per-epoch schedule, variant assembly, SGD, checkpoints.

Five objective variants share one loop:

  trust_ssl_additive       base + lam_sel(e) * selective(detached gate) + aux terms
  trust_ssl_multiplicative rho(e) * base + lam_sel_max * selective(in-graph gate) + aux terms
  scalar_uncertainty       additive path with a single factor (T = 1)
  cosine_gate              additive path, gate = sigma(cos/tau), no KL term
  simclr_only              base term only

Determinism contract: given (config, seed), checkpoints and metrics are
bit-identical across runs and augmentation thread counts. Augmentation
streams are keyed by dataset index, not batch position, so shuffling and
parallelism cannot reorder randomness.
"""

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import fusion, models, objective
from . import rng as rng_mod

VARIANTS = (
    "trust_ssl_additive",
    "trust_ssl_multiplicative",
    "scalar_uncertainty",
    "cosine_gate",
    "simclr_only",
)

_EVIDENTIAL_VARIANTS = ("trust_ssl_additive", "trust_ssl_multiplicative", "scalar_uncertainty")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, breakdown: objective.LossBreakdown):
        super().__init__(
            f"non-finite loss at epoch {epoch} step {step}: {breakdown.to_dict()}"
        )
        self.epoch = epoch
        self.step = step
        self.breakdown = breakdown


@dataclass
class TrainSettings:
    variant: str = "trust_ssl_additive"
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-6
    seed: int = 1
    checkpoint_every: int = 20
    ntxent_tau: float = objective.DEFAULT_NTXENT_TAU
    anchor_tau: float = objective.DEFAULT_ANCHOR_TAU
    threads: int = 1
    model: models.ModelConfig = field(default_factory=models.ModelConfig)
    weights: objective.LossWeights = field(default_factory=objective.LossWeights)
    schedule: objective.ScheduleState = None
    augment: data_mod.AugmentConfig = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; one of {VARIANTS}")
        if self.schedule is None:
            self.schedule = objective.ScheduleState(total_epochs=self.epochs)
        if self.augment is None:
            self.augment = data_mod.AugmentConfig(out_size=self.model.image_size)

    @property
    def has_evidential_gate(self) -> bool:
        return self.variant in _EVIDENTIAL_VARIANTS


@dataclass
class EpochMetrics:
    epoch: int
    mean_total: float
    mean_base: float
    mean_selective: float
    mean_anchor: float
    mean_diversity: float
    mean_aux: float
    mean_kl: float
    k_bar: float          # None for gateless variants
    i_bar: float
    lambda_sel: float
    lambda_min: float
    lr: float
    wall_time: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * epoch / total_epochs))


def init_optimizer(model: models.Model) -> dict:
    return {name: np.zeros_like(t.data) for name, t in model.params.items()}


def sgd_step(model: models.Model, grads: ad.GradientMap, opt: dict,
             lr: float, momentum: float, weight_decay: float) -> None:
    """Momentum SGD with coupled weight decay on params present in the graph."""
    for name, p in model.params.items():
        g = grads.get(p)
        if g is None:
            continue
        buf = opt[name]
        buf *= momentum
        buf += g + weight_decay * p.data
        p.data = p.data - lr * buf


def _augment_batch(images, indices, seed, epoch, cfg: data_mod.AugmentConfig, threads):
    def one(i):
        return data_mod.augment_pair(images[i], seed, epoch, int(i), cfg)

    if threads > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pairs = list(pool.map(one, indices))
    else:
        pairs = [one(i) for i in indices]
    v1 = np.stack([p[0][0] for p in pairs])
    v2 = np.stack([p[1][0] for p in pairs])
    f1 = np.array([p[0][1] for p in pairs], dtype=np.int64)
    f2 = np.array([p[1][1] for p in pairs], dtype=np.int64)
    return v1, v2, f1, f2


def train_step(model: models.Model, settings: TrainSettings, epoch: int,
               v1, v2, fam1, fam2):
    """One forward/backward/update-free step: returns (loss tensor, breakdown, K, I)."""
    cfg = settings
    batch = v1.shape[0]
    lam_min = objective.schedule_lambda_min(epoch, cfg.schedule)
    lam_sel = objective.schedule_lambda_sel(epoch, cfg.schedule)

    x = ad.constant(np.concatenate([v1, v2], axis=0))
    h = models.encode(model, x)
    h1 = ad.slice_rows(h, 0, batch)
    h2 = ad.slice_rows(h, batch, 2 * batch)
    p_all = models.project(model, h)
    p1 = ad.slice_rows(p_all, 0, batch)
    p2 = ad.slice_rows(p_all, batch, 2 * batch)
    base = objective.simclr_ntxent(p1, p2, cfg.ntxent_tau)

    if cfg.variant == "simclr_only":
        total, breakdown = objective.total_loss(
            base, None, None, None, None, None,
            lambda_sel=0.0, lambda_min=lam_min,
            weights=objective.LossWeights(0.0, 0.0, 0.0, 0.0))
        return total, breakdown, None, None

    z_all = models.factorize(model, h)
    z1s = [ad.slice_rows(z, 0, batch) for z in z_all]
    z2s = [ad.slice_rows(z, batch, 2 * batch) for z in z_all]

    selective = None
    kl = None
    k_means, i_means = [], []
    base_weight = 1.0

    if cfg.variant == "cosine_gate":
        tau = np.logaddexp(0.0, model.params["gate/tau_raw"].data)   # softplus, detached
        gates = [fusion.cosine_gate(z1s[t].data, z2s[t].data, tau[t])
                 for t in range(len(z1s))]
        selective = objective.selective_additive(z1s, z2s, gates)
    else:
        states1 = [models.evidence(model, z1s[t], t) for t in range(len(z1s))]
        states2 = [models.evidence(model, z2s[t], t) for t in range(len(z2s))]
        in_graph = cfg.variant == "trust_ssl_multiplicative"
        gates = []
        for t in range(len(z1s)):
            k, i, w = fusion.gate_from_states(states1[t], states2[t], lam_min,
                                              in_graph=in_graph)
            gates.append(w)
            k_means.append(np.mean(k.data if in_graph else k))
            i_means.append(np.mean(i.data if in_graph else i))
        if in_graph:
            selective = objective.selective_multiplicative(z1s, z2s, gates)
            lam_sel = cfg.schedule.lambda_sel_max
            base_weight = objective.base_weight_multiplicative(epoch, cfg.schedule)
        else:
            selective = objective.selective_additive(z1s, z2s, gates)
        alphas = [st.alpha for st in states1] + [st.alpha for st in states2]
        kl = objective.kl_regularizer(alphas)

    anchor = objective.anchor_loss(z1s, z2s, fam1, fam2,
                                   cfg.model.num_factors, cfg.anchor_tau)
    div_term = ad.scale(objective.diversity_loss(z1s) + objective.diversity_loss(z2s), 0.5)
    logits = models.aux_predict(model, h)
    aux = objective.aux_loss(ad.slice_rows(logits, 0, batch),
                             ad.slice_rows(logits, batch, 2 * batch), fam1, fam2)

    total, breakdown = objective.total_loss(
        base, selective, anchor, div_term, aux, kl,
        lambda_sel=lam_sel, lambda_min=lam_min, weights=cfg.weights,
        base_weight=base_weight)
    k_bar = float(np.mean(k_means)) if k_means else None
    i_bar = float(np.mean(i_means)) if i_means else None
    return total, breakdown, k_bar, i_bar


def train_epoch(dataset: data_mod.Dataset, model: models.Model, opt: dict,
                settings: TrainSettings, epoch: int, step_writer=None) -> EpochMetrics:
    """Run one epoch of Alg-style training; returns aggregated metrics."""
    t0 = time.monotonic()
    cfg = settings
    n = len(dataset)
    order = rng_mod.derive(cfg.seed, rng_mod.PURPOSE_SHUFFLE, epoch).permutation(n)
    num_batches = n // cfg.batch_size
    lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs)

    sums = {"total": 0.0, "base": 0.0, "selective": 0.0, "anchor": 0.0,
            "diversity": 0.0, "aux": 0.0, "kl": 0.0}
    k_sum, i_sum, gate_steps = 0.0, 0.0, 0

    for step in range(num_batches):
        idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
        v1, v2, f1, f2 = _augment_batch(dataset.images, idx, cfg.seed, epoch,
                                        cfg.augment, cfg.threads)
        total, breakdown, k_bar, i_bar = train_step(model, cfg, epoch, v1, v2, f1, f2)
        if not np.isfinite(breakdown.total):
            raise TrainingDiverged(epoch, step, breakdown)
        grads = ad.backward(total)
        sgd_step(model, grads, opt, lr, cfg.momentum, cfg.weight_decay)

        sums["total"] += breakdown.total
        sums["base"] += breakdown.base
        sums["selective"] += breakdown.selective
        sums["anchor"] += breakdown.anchor
        sums["diversity"] += breakdown.diversity
        sums["aux"] += breakdown.aux
        sums["kl"] += breakdown.kl
        if k_bar is not None:
            k_sum += k_bar
            i_sum += i_bar
            gate_steps += 1
        if step_writer is not None:
            row = {"epoch": epoch, "step": step}
            row.update(breakdown.to_dict())
            row["k_bar"] = k_bar
            row["i_bar"] = i_bar
            step_writer(row)

    denom = max(num_batches, 1)
    return EpochMetrics(
        epoch=epoch,
        mean_total=sums["total"] / denom,
        mean_base=sums["base"] / denom,
        mean_selective=sums["selective"] / denom,
        mean_anchor=sums["anchor"] / denom,
        mean_diversity=sums["diversity"] / denom,
        mean_aux=sums["aux"] / denom,
        mean_kl=sums["kl"] / denom,
        k_bar=(k_sum / gate_steps) if gate_steps else None,
        i_bar=(i_sum / gate_steps) if gate_steps else None,
        lambda_sel=objective.schedule_lambda_sel(epoch, cfg.schedule),
        lambda_min=objective.schedule_lambda_min(epoch, cfg.schedule),
        lr=lr,
        wall_time=time.monotonic() - t0,
    )


def checkpoint_meta(settings: TrainSettings, epoch_next: int, experiment_config=None) -> dict:
    meta = {
        "format": "tssl-checkpoint",
        "variant": settings.variant,
        "epoch": epoch_next,
        "model": {
            "image_size": settings.model.image_size,
            "conv_widths": list(settings.model.conv_widths),
            "backbone_dim": settings.model.backbone_dim,
            "projector_dim": settings.model.projector_dim,
            "num_factors": settings.model.num_factors,
            "factor_dim": settings.model.factor_dim,
            "num_prototypes": settings.model.num_prototypes,
            "prior_strength": settings.model.prior_strength,
        },
    }
    if experiment_config is not None:
        meta["experiment_config"] = experiment_config
    return meta


def save_training_checkpoint(path, model, opt, settings, epoch_next,
                             experiment_config=None):
    extra = {f"opt/momentum/{name}": buf for name, buf in opt.items()}
    models.save_checkpoint(path, model,
                           checkpoint_meta(settings, epoch_next, experiment_config),
                           extra_arrays=extra)


def load_training_checkpoint(path, settings: TrainSettings):
    """Restore (model, optimizer, next_epoch) from a training checkpoint."""
    meta, arrays = models.load_checkpoint(path)
    model = models.restore_model(settings.model, arrays)
    opt = init_optimizer(model)
    for name in opt:
        key = f"opt/momentum/{name}"
        if key in arrays:
            opt[name] = arrays[key].copy()
    return model, opt, int(meta.get("epoch", 0)), meta


def run_pretraining(dataset: data_mod.Dataset, settings: TrainSettings,
                    out_dir: str, resume: str = None, experiment_config=None,
                    log=None) -> dict:
    """Full training run; writes metrics.jsonl, steps.jsonl, checkpoints.

    Returns a file inventory dict (paths relative to out_dir).
    """
    os.makedirs(out_dir, exist_ok=True)
    if resume is not None:
        model, opt, start_epoch, _ = load_training_checkpoint(resume, settings)
    else:
        model = models.init_model(settings.model, settings.seed)
        opt = init_optimizer(model)
        start_epoch = 0

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    steps_path = os.path.join(out_dir, "steps.jsonl")
    inventory = {"metrics": "metrics.jsonl", "steps": "steps.jsonl", "checkpoints": []}
    mode = "a" if (resume is not None and os.path.exists(metrics_path)) else "w"
    with open(metrics_path, mode) as mf, open(steps_path, mode) as sf:
        def write_step(row):
            sf.write(json.dumps(row, sort_keys=True) + "\n")

        for epoch in range(start_epoch, settings.epochs):
            metrics = train_epoch(dataset, model, opt, settings, epoch,
                                  step_writer=write_step)
            mf.write(json.dumps(metrics.to_dict(), sort_keys=True) + "\n")
            mf.flush()
            sf.flush()
            if log is not None:
                log(metrics)
            final = epoch == settings.epochs - 1
            if final or (settings.checkpoint_every > 0
                         and (epoch + 1) % settings.checkpoint_every == 0):
                name = ("checkpoint_final.ckpt" if final
                        else f"checkpoint_{epoch + 1:04d}.ckpt")
                save_training_checkpoint(os.path.join(out_dir, name), model, opt,
                                         settings, epoch + 1, experiment_config)
                inventory["checkpoints"].append(name)
    return inventory
