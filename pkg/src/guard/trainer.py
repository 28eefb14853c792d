"""
Training of the classification head on pooled embeddings.

Class-weighted cross-entropy, analytic backpropagation through
Linear -> GELU -> Dropout -> Linear, AdamW with decoupled weight decay, linear
warmup followed by cosine decay to zero, periodic validation F1 and best-F1
checkpoint selection. The encoder is frozen: the parameter universe is HeadParams.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
from tqdm import tqdm

from src.guard.config import TrainConfig
from src.guard.domain import (
    CrossValidationReport,
    EmbeddingDataset,
    FoldResult,
    HeadParams,
    HistoryEntry,
    Label,
    N_CLASSES,
    TrainingHistory,
)
from src.guard.errors import EmptyClass, NonFiniteLoss, OutOfRange, TooFewSamples
from src.guard.evaluation import (
    aggregate,
    confusion_matrix,
    metrics_from_cm,
    roc_auc,
    stratified_kfold,
    stratified_split,
)
from src.guard.head import dropout_mask, forward_cache, gelu_grad, init_head, log_softmax, predict_proba, softmax
from utils.splitmix import SplitMix64

logger = logging.getLogger(__name__)

CV_INNER_RATIOS = (0.85, 0.15, 0.0)


@dataclass
class OptimizerState:
    """AdamW moments mirroring HeadParams"""
    m: HeadParams
    v: HeadParams
    step_count: int = 0

    @classmethod
    def for_params(cls, params: HeadParams) -> 'OptimizerState':
        return cls(m=params.zeros_like(), v=params.zeros_like(), step_count=0)


def class_weights(n_safe: int, n_malicious: int) -> Tuple[float, float]:
    """Inverse-frequency weights N_total / (2 * N_c)"""
    if n_safe <= 0 or n_malicious <= 0:
        raise EmptyClass(f"both classes need samples (safe={n_safe}, malicious={n_malicious})")
    total = n_safe + n_malicious
    return total / (2.0 * n_safe), total / (2.0 * n_malicious)


def _sample_weights(labels: np.ndarray, weights: Sequence[float], dtype) -> np.ndarray:
    return np.asarray(weights, dtype=dtype)[np.asarray(labels, dtype=np.int64)]


def weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray,
                           weights: Sequence[float] = (1.0, 1.0)) -> float:
    """Weighted mean of per-sample cross-entropy, sum(w_i * nll_i) / sum(w_i)"""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    nll = -log_softmax(logits)[np.arange(len(labels)), labels]
    w = _sample_weights(labels, weights, np.float64)
    return float((w * nll).sum() / w.sum())


def _backward_sums(h: np.ndarray, labels: np.ndarray, params: HeadParams,
                   weights: Sequence[float], mask: Optional[np.ndarray]):
    """Unnormalized weighted loss, weight total and gradient sums for one micro-batch"""
    h = np.atleast_2d(np.asarray(h, dtype=params.dtype))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    w = _sample_weights(labels, weights, params.dtype)

    z1, a1, logits = forward_cache(h, params, mask)
    rows = np.arange(len(labels))
    loss_sum = float((w * -log_softmax(logits)[rows, labels]).sum(dtype=np.float64))

    dlogits = softmax(logits)
    dlogits[rows, labels] -= 1
    dlogits *= w[:, None]

    grad_w2 = dlogits.T @ a1
    grad_b2 = dlogits.sum(axis=0)
    da1 = dlogits @ params.w2
    if mask is not None:
        da1 = da1 * mask
    dz1 = da1 * gelu_grad(z1)
    grad_w1 = dz1.T @ h
    grad_b1 = dz1.sum(axis=0)
    return loss_sum, float(w.sum(dtype=np.float64)), HeadParams(grad_w1, grad_b1, grad_w2, grad_b2)


def _scale(grads: HeadParams, factor: float) -> HeadParams:
    return HeadParams(*(g * g.dtype.type(factor) for g in grads.arrays()))


def head_backward(h: np.ndarray, labels: np.ndarray, params: HeadParams,
                  weights: Sequence[float] = (1.0, 1.0), rng: Optional[SplitMix64] = None,
                  dropout_p: float = 0.1, mask: Optional[np.ndarray] = None) -> Tuple[float, HeadParams]:
    """Weighted cross-entropy and its analytic gradients

    Args:
        h: Batch of pooled embeddings (n, input)
        labels: Class index per row
        params: Head parameters (their dtype sets the precision)
        weights: (w_safe, w_malicious)
        rng: Draws a dropout mask when given and no mask is passed
        dropout_p: Drop probability used with rng
        mask: Explicit inverted-dropout mask (n, hidden)

    Returns:
        (loss, gradients mirroring params)
    """
    h = np.atleast_2d(h)
    if mask is None and rng is not None:
        mask = dropout_mask(rng, (h.shape[0], params.b1.shape[0]), dropout_p, params.dtype)
    loss_sum, weight_sum, grads = _backward_sums(h, labels, params, weights, mask)
    return loss_sum / weight_sum, _scale(grads, 1.0 / weight_sum)


def head_loss(h: np.ndarray, labels: np.ndarray, params: HeadParams,
              weights: Sequence[float] = (1.0, 1.0), mask: Optional[np.ndarray] = None) -> float:
    """Weighted cross-entropy of the head with a fixed (or no) dropout mask"""
    h = np.atleast_2d(np.asarray(h, dtype=params.dtype))
    return weighted_cross_entropy(forward_cache(h, params, mask)[2], labels, weights)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then cosine decay to 0 at max_steps"""
    if not 0 <= step <= cfg.max_steps:
        raise OutOfRange(f"step {step} outside [0, {cfg.max_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.max_steps - cfg.warmup_steps)
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(params: HeadParams, grads: HeadParams, state: OptimizerState,
               cfg: TrainConfig, lr: float) -> Tuple[HeadParams, OptimizerState]:
    """One AdamW update with bias correction and decoupled weight decay"""
    step = state.step_count + 1
    beta1, beta2 = cfg.beta1, cfg.beta2
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step

    new_params, new_m, new_v = [], [], []
    for theta, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        theta = theta - lr * (m_hat / (np.sqrt(v_hat) + cfg.epsilon) + cfg.weight_decay * theta)
        new_params.append(theta.astype(params.dtype))
        new_m.append(m.astype(params.dtype))
        new_v.append(v.astype(params.dtype))
    return HeadParams(*new_params), OptimizerState(HeadParams(*new_m), HeadParams(*new_v), step)


def _check_classes(ds: EmbeddingDataset, name: str) -> None:
    if ds.n_safe == 0 or ds.n_malicious == 0:
        raise EmptyClass(f"{name} set needs both classes (safe={ds.n_safe}, malicious={ds.n_malicious})")


class _BatchStream:
    """Seeded epoch permutations cut into batches

    Every epoch visits each sample exactly once; its last batch is short when
    batch_size does not divide n.
    """

    def __init__(self, n: int, batch_size: int, rng: SplitMix64):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.position = 0

    def next(self) -> np.ndarray:
        if self.position >= self.n:
            self.order = self.rng.permutation(self.n)
            self.position = 0
        batch = self.order[self.position:self.position + self.batch_size]
        self.position += len(batch)
        return batch


def _update(params: HeadParams, state: OptimizerState, ds: EmbeddingDataset, batch: np.ndarray,
            weights, cfg: TrainConfig, rng: SplitMix64, lr: float):
    """One optimizer step over a batch, accumulated across micro-batches"""
    loss_total, weight_total = 0.0, 0.0
    grads = params.zeros_like()
    for chunk in np.array_split(batch, cfg.accumulation_steps):
        if len(chunk) == 0:
            continue
        mask = dropout_mask(rng, (len(chunk), params.b1.shape[0]), cfg.dropout_p, params.dtype)
        loss_sum, weight_sum, chunk_grads = _backward_sums(
            ds.embeddings[chunk], ds.labels[chunk], params, weights, mask)
        loss_total += loss_sum
        weight_total += weight_sum
        grads = HeadParams(*(a + b for a, b in zip(grads.arrays(), chunk_grads.arrays())))

    loss = loss_total / weight_total
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"loss became {loss} at step {state.step_count + 1} (lr={lr:.3g})")
    params, state = adamw_step(params, _scale(grads, 1.0 / weight_total), state, cfg, lr)
    return params, state, loss


def evaluate_head(params: HeadParams, ds: EmbeddingDataset, weights=(1.0, 1.0),
                  threshold: float = 0.5) -> Tuple[float, float]:
    """(weighted loss, F1 at threshold) of a dataset in infer mode"""
    logits = forward_cache(ds.embeddings.astype(params.dtype), params)[2]
    loss = weighted_cross_entropy(logits, ds.labels, weights)
    scores = softmax(logits)[:, Label.MALICIOUS]
    f1 = metrics_from_cm(confusion_matrix(scores, ds.labels, threshold)).f1
    return loss, f1


def train_head(ds_train: EmbeddingDataset, ds_val: EmbeddingDataset, cfg: TrainConfig,
               progress: bool = False) -> Tuple[HeadParams, TrainingHistory]:
    """Train a fresh head and return the best-validation-F1 checkpoint

    Validation runs every cfg.eval_every steps and after the last step; ties keep
    the earliest checkpoint.

    Raises:
        EmptyClass: Either dataset lacks a class
        NonFiniteLoss: The training loss diverged
    """
    _check_classes(ds_train, "training")
    _check_classes(ds_val, "validation")
    weights = class_weights(ds_train.n_safe, ds_train.n_malicious)
    history = TrainingHistory(class_weights=weights)

    rng = SplitMix64(cfg.seed)
    params = init_head(rng, (ds_train.dim, cfg.hidden_dim, N_CLASSES))
    state = OptimizerState.for_params(params)
    batches = _BatchStream(len(ds_train), cfg.batch_size, rng)
    best = params.copy()
    recent_losses: List[float] = []

    logger.info("Training head on %s, validating on %s, class weights %.4f / %.4f",
                ds_train, ds_val, *weights)
    for step in tqdm(range(1, cfg.max_steps + 1), disable=not progress, desc="train-head"):
        lr = lr_schedule(step, cfg)
        params, state, loss = _update(params, state, ds_train, batches.next(), weights, cfg, rng, lr)
        recent_losses.append(loss)

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            val_loss, val_f1 = evaluate_head(params, ds_val, weights, cfg.eval_threshold)
            history.entries.append(HistoryEntry(
                step=step, lr=lr, train_loss=float(np.mean(recent_losses)),
                val_loss=val_loss, val_f1=val_f1))
            recent_losses = []
            if val_f1 > history.best_val_f1:
                history.best_val_f1 = val_f1
                history.best_step = step
                best = params.copy()
            logger.debug("step %d lr %.3g val_loss %.4f val_f1 %.4f", step, lr, val_loss, val_f1)

    logger.info("Best validation F1 %.4f at step %d", history.best_val_f1, history.best_step)
    return best, history


def merge_datasets(*datasets: EmbeddingDataset) -> EmbeddingDataset:
    return EmbeddingDataset(np.concatenate([d.embeddings for d in datasets]),
                            np.concatenate([d.labels for d in datasets]))


def train_final(ds_train: EmbeddingDataset, ds_val: EmbeddingDataset, cfg: TrainConfig,
                stop_step: Optional[int] = None, progress: bool = False) -> HeadParams:
    """Train on train + validation for a fixed number of steps, no checkpoint selection

    stop_step is typically the best step of an earlier train_head run; the
    learning-rate schedule still spans cfg.max_steps.
    """
    ds = merge_datasets(ds_train, ds_val)
    _check_classes(ds, "combined")
    stop_step = cfg.max_steps if stop_step is None else stop_step
    if not 1 <= stop_step <= cfg.max_steps:
        raise OutOfRange(f"stop step {stop_step} outside [1, {cfg.max_steps}]")
    weights = class_weights(ds.n_safe, ds.n_malicious)

    rng = SplitMix64(cfg.seed)
    params = init_head(rng, (ds.dim, cfg.hidden_dim, N_CLASSES))
    state = OptimizerState.for_params(params)
    batches = _BatchStream(len(ds), cfg.batch_size, rng)
    for step in tqdm(range(1, stop_step + 1), disable=not progress, desc="train-final"):
        params, state, _ = _update(params, state, ds, batches.next(), weights, cfg, rng,
                                   lr_schedule(step, cfg))
    logger.info("Final head trained on %s for %d steps", ds, stop_step)
    return params


def _run_fold(ds: EmbeddingDataset, fold: int, held_out: np.ndarray, cfg: TrainConfig) -> FoldResult:
    train_idx = np.setdiff1d(np.arange(len(ds)), held_out)
    training = ds.subset(train_idx)
    fit_idx, inner_val_idx, _ = stratified_split(training.labels, CV_INNER_RATIOS, cfg.seed + fold)
    fold_cfg = cfg.model_copy(update={"seed": cfg.seed + fold})
    params, history = train_head(training.subset(fit_idx), training.subset(inner_val_idx), fold_cfg)

    validation = ds.subset(held_out)
    scores = predict_proba(validation.embeddings, params)
    report = metrics_from_cm(confusion_matrix(scores, validation.labels, cfg.eval_threshold))
    result = FoldResult(
        fold=fold, n_train=len(training), n_validation=len(validation),
        f1=report.f1, precision=report.precision, recall=report.recall,
        roc_auc=roc_auc(scores, validation.labels), best_step=history.best_step)
    logger.info("Fold %d: F1 %.4f precision %.4f recall %.4f ROC-AUC %.4f",
                fold, result.f1, result.precision, result.recall, result.roc_auc)
    return result


def run_cross_validation(ds: EmbeddingDataset, k: int = 5, cfg: Optional[TrainConfig] = None,
                         workers: int = 1, progress: bool = False) -> CrossValidationReport:
    """Stratified k-fold training and evaluation with mean/std/min/max per metric

    Each fold trains on the other k - 1 folds (with a stratified inner validation
    split for checkpoint selection) using seed cfg.seed + fold, and is scored on
    its held-out fold at cfg.eval_threshold.

    Raises:
        TooFewSamples: k < 2 or a class has fewer than k samples
    """
    cfg = cfg or TrainConfig()
    if k < 2:
        raise TooFewSamples(f"cross-validation needs k >= 2, got {k}")
    folds = stratified_kfold(ds.labels, k, cfg.seed)

    jobs = list(enumerate(folds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: _run_fold(ds, job[0], job[1], cfg), jobs))
    else:
        results = [_run_fold(ds, fold, held_out, cfg)
                   for fold, held_out in tqdm(jobs, disable=not progress, desc="cv")]
    results.sort(key=lambda r: r.fold)

    summary = {name: aggregate([getattr(r, name) for r in results])
               for name in ("f1", "precision", "recall", "roc_auc")}
    return CrossValidationReport(folds=results, summary=summary)


def write_history(history: TrainingHistory, path: Union[str, Path]) -> None:
    """One line per evaluation: step, lr, train_loss, val_loss, val_f1"""
    with open(path, "wb") as f:
        for entry in history.entries:
            f.write(orjson.dumps(entry, option=orjson.OPT_APPEND_NEWLINE))
