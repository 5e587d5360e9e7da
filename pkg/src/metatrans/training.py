"""Objective, optimizer and epoch loop.

The total loss is ``L_cls + L_adv``: the domain heads see the adversarial term
at unit weight, and the feature extractor sees it reversed and scaled by
``lambda1`` through the gradient reversal layer.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import tensor as tn
from .config import TrainConfig
from .data import SENTINEL_UNLABELED, SOURCE, TARGET, VideoBatch, concat
from .tensor import ContractError, NumericError, Tensor

log = logging.getLogger(__name__)

__all__ = ["VideoBatch", "SENTINEL_UNLABELED", "loss_cls", "loss_adv", "total_loss",
           "generate_pseudo_labels", "AdamState", "adam_step", "train", "grid_search_lambda",
           "ExperimentReport", "variant_settings"]


class DivergenceError(NumericError):
    pass


@dataclass(frozen=True)
class VariantSettings:
    mode: str
    adversarial: bool
    use_target: bool


def variant_settings(variant: str) -> VariantSettings:
    table = {
        "full": VariantSettings(mdl.SUBTRACT, True, True),
        "wo_sub": VariantSettings(mdl.NO_SUBTRACT, True, True),
        "wo_adv": VariantSettings(mdl.SUBTRACT, False, True),
        "fs_pooling": VariantSettings(mdl.FS_POOLING, True, True),
        "source_only": VariantSettings(mdl.NO_SUBTRACT, False, False),
    }
    if variant not in table:
        raise ValueError(f"unknown variant {variant!r}")
    return table[variant]


# -- losses ------------------------------------------------------------------

def loss_cls(batch: VideoBatch, model: mdl.MetaTransModel, outputs: dict | None = None,
             mode: str = mdl.SUBTRACT) -> Tensor:
    """Mean cross-entropy over every sample that carries a (pseudo-)label."""
    idx, labels = batch.supervision()
    if idx.size == 0:
        raise ContractError("loss_cls: batch has no labeled or pseudo-labeled sample")
    if outputs is None:
        outputs = mdl.model_forward(batch.x, model, 0.0, mode, with_domain=False)
    logits = outputs["task_logits"]
    logits = tn.reshape(logits, (logits.shape[0], logits.shape[-1]))
    if idx.size != len(batch):
        logits = logits[idx]
    return tn.cross_entropy(logits, labels)


def loss_adv(batch: VideoBatch, model: mdl.MetaTransModel, lambda1: float,
             outputs: dict | None = None, mode: str = mdl.SUBTRACT) -> Tensor:
    """Mean over videos of (frame-averaged CE + video CE) on the domain label."""
    if len(np.unique(batch.domain_label)) < 2:
        log.warning("loss_adv: batch holds a single domain")
    if outputs is None:
        outputs = mdl.model_forward(batch.x, model, lambda1, mode)
    frame = outputs["frame_domain_logits"]
    B, T = frame.shape[0], frame.shape[1]
    frame_loss = tn.cross_entropy(tn.reshape(frame, (B * T, 2)), np.repeat(batch.domain_label, T))
    video = tn.reshape(outputs["video_domain_logits"], (B, 2))
    # every video has T frames, so the mean over all frames is the mean of per-video means
    return frame_loss + tn.cross_entropy(video, batch.domain_label)


def total_loss(batch: VideoBatch, model: mdl.MetaTransModel, cfg: TrainConfig,
               adversarial: bool | None = None) -> tuple[Tensor, dict[str, float]]:
    vs = variant_settings(cfg.variant)
    adversarial = vs.adversarial if adversarial is None else adversarial
    out = mdl.model_forward(batch.x, model, cfg.lambda1, vs.mode, with_domain=adversarial,
                            fused=True)
    lc = loss_cls(batch, model, out, vs.mode)
    if not adversarial:
        return lc, {"loss_cls": lc.item(), "loss_adv": 0.0}
    la = loss_adv(batch, model, cfg.lambda1, out, vs.mode)
    return lc + la, {"loss_cls": lc.item(), "loss_adv": la.item()}


def generate_pseudo_labels(x: np.ndarray, model_snapshot: mdl.MetaTransModel,
                           mode: str = mdl.SUBTRACT, threshold: float | None = None) -> np.ndarray:
    """Argmax of task logits; ties resolve to the smaller class index."""
    logits = mdl.predict(x, model_snapshot, mode)
    labels = np.argmax(logits, axis=1)
    if threshold is not None and len(labels):
        z = logits - logits.max(axis=1, keepdims=True)
        prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        labels = np.where(prob.max(axis=1) >= threshold, labels, SENTINEL_UNLABELED)
    return labels


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        arrs = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls([np.zeros_like(a) for a in arrs], [np.zeros_like(a) for a in arrs])


def adam_step(params: list[Tensor], grads: list[np.ndarray | None], state: AdamState,
              lr: float, wd: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One Adam update in place, with decoupled weight decay applied first."""
    if len(params) != len(state.m):
        raise ContractError("adam_step: state does not match parameter list")
    grads = [np.zeros_like(p.data) if g is None else g for p, g in zip(params, grads)]
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ContractError("adam_step: shape mismatch")
        if not np.isfinite(g).all():
            raise NumericError("adam_step: non-finite gradient, step aborted")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if wd:
            p.data -= lr * wd * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -- reports -----------------------------------------------------------------

@dataclass
class ExperimentReport:
    lambda1: float
    seed: int
    preset: str
    variant: str
    epochs: list[dict] = field(default_factory=list)
    target_acc: float = float("nan")
    source_acc: float = float("nan")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs,
                "final": {"lambda1": self.lambda1, "target_acc": self.target_acc,
                          "source_acc": self.source_acc, "seed": self.seed,
                          "preset": self.preset, "variant": self.variant}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def accuracy(batch: VideoBatch, model: mdl.MetaTransModel, mode: str,
             labels: np.ndarray | None = None) -> float:
    labels = batch.class_label if labels is None else labels
    if len(batch) == 0 or (labels == SENTINEL_UNLABELED).any():
        return float("nan")
    pred = np.argmax(mdl.predict(batch.x, model, mode), axis=1)
    return float(100.0 * (pred == labels).mean())


# -- training loop -----------------------------------------------------------

def _batches(n_source: int, n_target: int, half: int, rng: np.random.Generator,
             use_target: bool):
    src = rng.permutation(n_source)
    steps = -(-n_source // half)
    if use_target and n_target:
        reps = -(-steps * half // n_target)
        tgt = np.concatenate([rng.permutation(n_target) for _ in range(reps)])
    for s in range(steps):
        si = src[s * half:(s + 1) * half]
        ti = tgt[s * half:(s + 1) * half] if use_target and n_target else None
        yield si, ti


def train(source: VideoBatch, target: VideoBatch, cfg: TrainConfig,
          source_eval: VideoBatch | None = None, target_eval: VideoBatch | None = None,
          init: mdl.MetaTransModel | None = None, on_epoch=None,
          eval_every: int = 1) -> tuple[mdl.MetaTransModel, ExperimentReport]:
    """Train one model; target class labels are only read for evaluation.

    Accuracies are measured every ``eval_every`` epochs and always after the
    last one; skipped epochs record NaN.
    """
    cfg.validate()
    vs = variant_settings(cfg.variant)
    if len(source) == 0:
        raise ContractError("train: empty source set")
    if source.d != cfg.model.d or (len(target) and target.d != cfg.model.d):
        raise ContractError(f"train: feature width differs from model d={cfg.model.d}")
    model = init.copy() if init is not None else mdl.init_model(cfg.model, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 7])
    params = model.parameters()
    state = AdamState.zeros_like(params)
    src_train = VideoBatch(source.x, source.class_label, np.full(len(source), SOURCE))
    tgt_train = VideoBatch(target.x, target.class_label, np.full(len(target), TARGET)).unlabeled()
    src_eval = source_eval if source_eval is not None else source
    tgt_eval = target_eval if target_eval is not None else target
    half = cfg.batch_size // 2
    # the source-only baseline trains no adversary, so its lambda1 is reported as 0
    lam = 0.0 if cfg.variant == "source_only" else cfg.lambda1
    report = ExperimentReport(lam, cfg.seed, cfg.preset, cfg.variant)

    for epoch in range(cfg.epochs):
        pseudo_on = vs.use_target and epoch >= cfg.pseudo_start_epoch
        if pseudo_on:
            # the current weights are the state at the end of the previous epoch
            pseudo = generate_pseudo_labels(tgt_train.x, model, vs.mode, cfg.pseudo_threshold)
        adversarial = vs.adversarial and (cfg.adv_during_warmup or epoch >= cfg.pseudo_start_epoch)
        sums = {"loss_cls": 0.0, "loss_adv": 0.0}
        steps = 0
        for si, ti in _batches(len(src_train), len(tgt_train), half, rng, vs.use_target):
            batch = src_train.subset(si)
            if ti is not None:
                tb = tgt_train.subset(ti)
                if pseudo_on:
                    tb.pseudo_label = pseudo[ti]
                    tb.pseudo_active = True
                batch = concat(batch, tb)
            model.zero_grad()
            loss, parts = total_loss(batch, model, cfg, adversarial=adversarial)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss diverged at epoch {epoch}")
            tn.backward(loss)
            adam_step(params, [p.grad for p in params], state, cfg.learning_rate,
                      cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)
            for k in sums:
                sums[k] += parts[k]
            steps += 1
        measure = (epoch + 1) % max(eval_every, 1) == 0 or epoch == cfg.epochs - 1
        rec = {"epoch": epoch,
               "loss_cls": sums["loss_cls"] / steps,
               "loss_adv": sums["loss_adv"] / steps,
               "source_acc": accuracy(src_eval, model, vs.mode) if measure else float("nan"),
               "target_acc": accuracy(tgt_eval, model, vs.mode) if measure else float("nan")}
        report.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    report.target_acc = report.epochs[-1]["target_acc"]
    report.source_acc = report.epochs[-1]["source_acc"]
    return model, report


def train_split(source: VideoBatch, val_fraction: float, seed: int):
    perm = np.random.default_rng([seed, 11]).permutation(len(source))
    n_val = int(round(val_fraction * len(source)))
    return source.subset(np.sort(perm[n_val:])), source.subset(np.sort(perm[:n_val]))


DEFAULT_GRID = tuple(round(0.01 * i, 2) for i in range(1, 11))


def grid_search_lambda(source: VideoBatch, target: VideoBatch, cfg: TrainConfig,
                       grid=DEFAULT_GRID, val_fraction: float = 0.2,
                       target_val: VideoBatch | None = None) -> tuple[float, list[dict]]:
    """Train once per lambda1; select by target validation accuracy, smaller lambda on ties.

    The validation data are 20% of the labeled source plus a labeled target
    subset that is disjoint from the target videos used for training.
    """
    grid = list(grid)
    if not grid:
        raise ContractError("grid_search_lambda: empty grid")
    src_tr, src_val = train_split(source, val_fraction, cfg.seed)
    if target_val is None:
        tgt_tr, target_val = train_split(target, val_fraction, cfg.seed + 1)
    else:
        tgt_tr = target
    rows = []
    for lam in grid:
        run_cfg = dataclasses.replace(cfg, lambda1=float(lam))
        _, rep = train(src_tr, tgt_tr, run_cfg, source_eval=src_val, target_eval=target_val,
                       eval_every=cfg.epochs)
        rows.append({"lambda1": float(lam), "target_val_acc": rep.target_acc,
                     "source_val_acc": rep.source_acc})
    best = min(rows, key=lambda r: (-r["target_val_acc"], r["lambda1"]))
    return best["lambda1"], rows
