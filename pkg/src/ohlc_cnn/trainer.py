"""Training loop with mini-batches, early stopping, history, and gradient checks."""

import time
from dataclasses import dataclass, field

import numpy as np

from .data_pipeline import SampleSet
from .loss_metrics import ConfusionMatrix, bce_loss, compute_metrics
from .nn_core import Model, model_backward_batch, model_forward, model_forward_batch
from .optim import AdamState, HyperParams, adam_step

EVAL_CHUNK = 4096


class TrainingDivergedError(RuntimeError):
    """Raised when a non-finite loss appears during training."""


@dataclass
class TrainConfig:
    max_epochs: int = 25
    patience: int = 5
    batch_size: int = 1000
    early_stopping: bool = True
    seed: int = 0
    validation_fraction: float = 0.1
    threshold: float = 0.5
    hyper: HyperParams = field(default_factory=HyperParams)

    def validate(self) -> None:
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError(
                f"validation_fraction must be in (0, 1), got {self.validation_fraction}"
            )
        self.hyper.validate()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    test_loss: float | None = None
    test_acc: float | None = None
    wall_time: float = 0.0


@dataclass
class TrainHistory:
    records: list
    best_epoch: int = 0

    def val_losses(self) -> list:
        return [r.val_loss for r in self.records]

    def __len__(self) -> int:
        return len(self.records)


HISTORY_HEADER = "epoch,train_loss,train_acc,val_loss,val_acc,test_loss,test_acc"


def write_history_csv(path, history: TrainHistory) -> None:
    """One row per epoch; wall times stay out so reruns are byte-identical."""
    def fmt(v):
        return "" if v is None else f"{v:.12g}"

    lines = [HISTORY_HEADER]
    for r in history.records:
        lines.append(",".join([
            str(r.epoch), fmt(r.train_loss), fmt(r.train_acc),
            fmt(r.val_loss), fmt(r.val_acc), fmt(r.test_loss), fmt(r.test_acc),
        ]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def split_validation(samples: SampleSet, fraction: float):
    """Carve the chronologically-last `fraction` of a SampleSet off as validation."""
    n = len(samples)
    n_val = max(1, int(n * fraction))
    n_fit = n - n_val
    if n_fit < 1:
        raise ValueError(f"validation fraction {fraction} leaves no training samples of {n}")
    fit = SampleSet(samples.windows[:n_fit], samples.labels[:n_fit], samples.window_len)
    val = SampleSet(samples.windows[n_fit:], samples.labels[n_fit:], samples.window_len)
    return fit, val


def evaluate(model: Model, data: SampleSet, threshold: float = 0.5):
    """Inference-mode pass over a SampleSet.

    Returns (ConfusionMatrix, MetricReport, mean loss). Dropout is off, so the
    result is deterministic and independent of any RNG state.
    """
    n = len(data)
    if n == 0:
        raise ValueError("cannot evaluate on an empty sample set")
    preds = np.empty(n, dtype=np.float64)
    for start in range(0, n, EVAL_CHUNK):
        stop = min(start + EVAL_CHUNK, n)
        probs, _ = model_forward_batch(data.windows[start:stop], model, mode="infer")
        preds[start:stop] = probs
    loss = bce_loss(preds, data.labels)
    pred_pos = preds >= threshold
    actual_pos = data.labels.astype(np.int64) == 1
    cm = ConfusionMatrix(
        tp=int(np.sum(pred_pos & actual_pos)),
        fp=int(np.sum(pred_pos & ~actual_pos)),
        tn=int(np.sum(~pred_pos & ~actual_pos)),
        fn=int(np.sum(~pred_pos & actual_pos)),
    )
    return cm, compute_metrics(cm), loss


def early_stop_check(val_losses, patience: int) -> bool:
    """True (stop) when the last `patience` epochs show no strict improvement
    over the best validation loss seen before them."""
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    losses = list(val_losses)
    if len(losses) <= patience:
        return False
    best_before = min(losses[:-patience])
    return all(v >= best_before for v in losses[-patience:])


def train(model: Model, train_set: SampleSet, config: TrainConfig,
          eval_set: SampleSet | None = None, optimizer_state: AdamState | None = None):
    """Train with Adam, early stopping on a validation split, best-epoch restore.

    The last `validation_fraction` of `train_set` becomes the validation split
    (chronological, no shuffling across the boundary). Each epoch shuffles the
    remaining samples with the seeded generator, averages gradients over each
    batch, and applies one Adam step per batch. If `eval_set` is given, its
    loss/accuracy are recorded per epoch as observational test curves; early
    stopping only ever monitors the validation loss. A caller-supplied
    `optimizer_state` is used (and left holding the end-of-training
    accumulators) so it can be checkpointed for exact resumption.

    Returns (model with the best-validation-loss parameters, TrainHistory).
    """
    config.validate()
    if len(train_set) == 0:
        raise ValueError("training set is empty")

    fit, val = split_validation(train_set, config.validation_fraction)
    rng = np.random.default_rng(config.seed)
    model = model.copy()
    params = model.parameters()
    state = optimizer_state if optimizer_state is not None else AdamState(params)

    n_fit = len(fit)
    records = []
    best_loss = np.inf
    best_epoch = 0
    best_params = None

    for epoch in range(1, config.max_epochs + 1):
        tick = time.perf_counter()
        order = rng.permutation(n_fit)
        loss_sum = 0.0
        hits = 0
        for batch_no, start in enumerate(range(0, n_fit, config.batch_size)):
            sel = order[start:start + config.batch_size]
            x = fit.windows[sel]
            y = fit.labels[sel]
            probs, cache = model_forward_batch(x, model, mode="train", rng=rng)
            batch_loss = bce_loss(probs, y)
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}, batch {batch_no}"
                )
            grads = model_backward_batch(cache, y, model)
            adam_step(params, grads, state, config.hyper)
            loss_sum += batch_loss * sel.size
            hits += int(np.sum((probs >= config.threshold) == (y == 1)))

        _, val_metrics, val_loss = evaluate(model, val, config.threshold)
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n_fit,
            train_acc=hits / n_fit,
            val_loss=val_loss,
            val_acc=val_metrics.accuracy,
        )
        if eval_set is not None:
            _, test_metrics, test_loss = evaluate(model, eval_set, config.threshold)
            record.test_loss = test_loss
            record.test_acc = test_metrics.accuracy
        record.wall_time = time.perf_counter() - tick
        records.append(record)

        if val_loss < best_loss:
            best_loss = val_loss
            best_epoch = epoch
            best_params = [p.copy() for p in params]

        if config.early_stopping and early_stop_check([r.val_loss for r in records],
                                                      config.patience):
            break

    if best_params is not None:
        model.set_parameters(best_params)
    return model, TrainHistory(records, best_epoch)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    n_checked: int

    def ok(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error <= tolerance


def grad_check(model: Model, sample, label, epsilon: float = 1e-5,
               max_params: int | None = None, rng=None, backward_fn=None,
               refine_threshold: float = 1e-5) -> GradCheckResult:
    """Compare analytic gradients against central finite differences.

    For each parameter entry (all of them, or a random subsample of
    `max_params` for large models) the loss is evaluated at +/- epsilon and
    the relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-4)
    is recorded; the floor lets exactly-zero gradients compare cleanly against
    finite-difference noise.

    A coordinate whose error exceeds `refine_threshold` is re-probed at
    epsilon/100 and the smaller error kept: when a relu/leaky pre-activation
    lies within epsilon of its kink the two probes straddle different linear
    pieces and the central difference is meaningless, but shrinking epsilon
    below the distance to the kink removes the straddle. A genuinely wrong
    gradient is epsilon-independent and still fails.

    Requires dropout disabled so the forward pass is deterministic.
    `backward_fn(model, sample, label)` can replace the analytic gradient
    computation (used for negative-control tests).
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if model.config.dropout_rate != 0.0:
        raise ValueError("grad_check requires a model with dropout_rate 0")
    sample = np.asarray(sample, dtype=np.float64)

    if backward_fn is None:
        _, cache = model_forward(sample, model, mode="train")
        analytic = model_backward_batch(cache, [label], model)
    else:
        analytic = backward_fn(model, sample, label)

    def loss_at_current_params() -> float:
        prob, _ = model_forward(sample, model, mode="train")
        return bce_loss([prob], [label])

    params = model.parameters()
    names = model.parameter_names()

    def central_difference(arr, j, eps) -> float:
        orig = arr.flat[j]
        arr.flat[j] = orig + eps
        loss_plus = loss_at_current_params()
        arr.flat[j] = orig - eps
        loss_minus = loss_at_current_params()
        arr.flat[j] = orig
        if not (np.isfinite(loss_plus) and np.isfinite(loss_minus)):
            raise TrainingDivergedError("non-finite loss while probing a parameter")
        return (loss_plus - loss_minus) / (2.0 * eps)

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if max_params is not None and max_params < len(coords):
        if rng is None:
            rng = np.random.default_rng(0)
        picks = rng.choice(len(coords), size=max_params, replace=False)
        coords = [coords[k] for k in np.sort(picks)]

    worst = 0.0
    worst_name = ""
    for i, j in coords:
        arr = params[i]
        a = analytic[i].flat[j]

        def rel_error(eps) -> float:
            numeric = central_difference(arr, j, eps)
            return abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)

        rel = rel_error(epsilon)
        if rel > refine_threshold:
            rel = min(rel, rel_error(epsilon / 100.0))
        if rel > worst:
            worst = rel
            idx = np.unravel_index(j, arr.shape)
            worst_name = f"{names[i]}[{','.join(str(v) for v in idx)}]"
    return GradCheckResult(worst, worst_name, len(coords))
