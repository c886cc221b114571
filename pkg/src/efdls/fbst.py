"""Per-user student-teacher training.

Each user holds two identically shaped networks. The student is the only one
that ever sees a gradient; the teacher is a frozen copy whose hidden-layer
outputs act as regression targets through a feature-matching loss. The
teacher's weights change only when the server hands down a matched bundle.

Loss pieces:
  * feature-matching (KD) loss: for each of the four hidden outputs, squared
    elementwise difference summed over features and averaged over the batch,
    then summed across the four stages;
  * supervised loss: mean cross-entropy of the softmax probabilities;
  * total: epsilon * supervised + (1 - epsilon) * feature-matching.

On the very first federated epoch (and whenever no teacher has been loaded)
training is supervised-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import extractor as ext
from . import nncore


class ConfigError(ValueError):
    pass


@dataclass
class FBSTConfig:
    epsilon: float = 0.9
    local_epochs_per_round: int = 1
    batch_size: int = 16
    kd_reduction: str = "batch_mean_sum_features"
    # "batch": the teacher normalizes with the statistics of the batch at
    # hand (no side effects), so a teacher holding the student's own weights
    # reproduces the student's trace exactly. "running": the teacher uses the
    # running statistics carried in its loaded bundle.
    teacher_bn_mode: str = "batch"

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie strictly inside (0,1), got {self.epsilon}")
        if self.local_epochs_per_round < 1:
            raise ConfigError("local_epochs_per_round must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.kd_reduction != "batch_mean_sum_features":
            raise ConfigError(f"unknown kd_reduction policy '{self.kd_reduction}'")
        if self.teacher_bn_mode not in ("batch", "running"):
            raise ConfigError(f"teacher_bn_mode must be 'batch' or 'running', got '{self.teacher_bn_mode}'")


@dataclass
class LossReport:
    kd: float
    sup: float
    total: float
    epoch: int


class FBSTPair:
    """A user's student and its frozen teacher twin.

    The teacher starts as a copy of the freshly initialized student but is
    inert (``teacher_initialized`` False) until the server loads weights into
    it; until then the training loss is supervised-only.
    """

    def __init__(self, student: ext.FeatureExtractor):
        self.student = student
        self.teacher = ext.clone_model(student)
        self.teacher_initialized = False

    def load_teacher(self, bundle: ext.WeightBundle) -> None:
        ext.load_hidden_weights(self.teacher, bundle)
        self.teacher_initialized = True

    def load_student(self, bundle: ext.WeightBundle) -> None:
        ext.load_hidden_weights(self.student, bundle)


def kd_loss(student_trace: ext.ForwardTrace, teacher_trace: ext.ForwardTrace) -> float:
    """Feature-matching loss between two traces of the same batch.

    Per stage m: mean over the batch of the per-instance sum of squared
    differences; the four stage values are summed. Symmetric in its arguments
    and zero exactly when the traces agree.
    """
    total = 0.0
    for name in ext.ForwardTrace.HIDDEN_FIELDS:
        s = getattr(student_trace, name)
        t = getattr(teacher_trace, name)
        if s.shape != t.shape:
            raise nncore.ShapeError(
                f"trace field '{name}' shapes differ: {s.shape} vs {t.shape}"
            )
        diff = s.astype(np.float64) - t.astype(np.float64)
        total += float(np.sum(diff * diff) / s.shape[0])
    return total


def kd_loss_grads(student_trace: ext.ForwardTrace, teacher_trace: ext.ForwardTrace,
                  scale: float = 1.0) -> dict:
    """Gradients of kd_loss with respect to the student's hidden outputs
    (the teacher side is a constant)."""
    grads = {}
    for name in ext.ForwardTrace.HIDDEN_FIELDS:
        s = getattr(student_trace, name)
        t = getattr(teacher_trace, name)
        grads[name] = scale * 2.0 * (s - t) / s.shape[0]
    return grads


def sup_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class.

    Probabilities are clamped below at 1e-12 before the log.
    """
    n = probs.shape[0]
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise nncore.ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError(
            f"label out of range: classes are [0, {probs.shape[1]}), got values "
            f"in [{labels.min()}, {labels.max()}]"
        )
    picked = probs[np.arange(n), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))


def sup_loss_logit_grad(probs: np.ndarray, labels: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Gradient of sup_loss with respect to the logits (softmax folded in)."""
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), np.asarray(labels)] -= 1.0
    return scale * g / n


def total_loss(sup: float, kd: float, epsilon: float) -> float:
    """epsilon-weighted combination of the supervised and KD terms."""
    if not 0.0 < epsilon < 1.0:
        raise ConfigError(f"epsilon must lie strictly inside (0,1), got {epsilon}")
    return epsilon * sup + (1.0 - epsilon) * kd


class SupervisedLoss:
    """Cross-entropy as a gradcheck-compatible loss object."""

    def __init__(self, labels: np.ndarray):
        self.labels = np.asarray(labels)

    def value(self, trace: ext.ForwardTrace) -> float:
        return sup_loss(trace.probs, self.labels)

    def output_grads(self, trace: ext.ForwardTrace) -> dict:
        return {"logits": sup_loss_logit_grad(trace.probs, self.labels)}


class DistillationLoss:
    """Combined supervised + feature-matching loss against a fixed teacher
    trace, with gradient injection at the logits and all four hidden
    outputs."""

    def __init__(self, teacher_trace: ext.ForwardTrace, labels: np.ndarray, epsilon: float):
        if not 0.0 < epsilon < 1.0:
            raise ConfigError(f"epsilon must lie strictly inside (0,1), got {epsilon}")
        self.teacher_trace = teacher_trace
        self.labels = np.asarray(labels)
        self.epsilon = epsilon

    def value(self, trace: ext.ForwardTrace) -> float:
        return total_loss(sup_loss(trace.probs, self.labels),
                          kd_loss(trace, self.teacher_trace), self.epsilon)

    def output_grads(self, trace: ext.ForwardTrace) -> dict:
        grads = kd_loss_grads(trace, self.teacher_trace, scale=1.0 - self.epsilon)
        grads["logits"] = sup_loss_logit_grad(trace.probs, self.labels, scale=self.epsilon)
        return grads


def iter_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Yield shuffled index batches covering [0, n); the last short batch is
    kept."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_train_epoch(pair: FBSTPair, x: np.ndarray, y: np.ndarray,
                      config: FBSTConfig, k: int, adam: nncore.AdamState,
                      rng: np.random.Generator) -> tuple[LossReport, ext.WeightBundle]:
    """One federated epoch of local training on (x, y).

    Runs ``local_epochs_per_round`` shuffled passes. The combined loss is
    used only when k > 1 and a teacher has been loaded; otherwise training is
    supervised-only and the report records kd = 0. Only the student is
    updated. Returns the averaged loss report and a snapshot of the student's
    hidden weights tagged with k.
    """
    if x.shape[0] == 0:
        raise ValueError("local_train_epoch needs a non-empty training set")
    use_teacher = k > 1 and pair.teacher_initialized
    params = pair.student.parameters()
    kd_sum = sup_sum = total_sum = 0.0
    n_batches = 0
    for _ in range(config.local_epochs_per_round):
        for idx in iter_batches(x.shape[0], config.batch_size, rng):
            xb, yb = x[idx], y[idx]
            trace, cache = pair.student.forward(xb, training=True, want_cache=True)
            sup = sup_loss(trace.probs, yb)
            if use_teacher:
                if config.teacher_bn_mode == "batch":
                    teacher_trace = pair.teacher.forward(xb, training=True, update_running=False)
                else:
                    teacher_trace = pair.teacher.forward(xb, training=False)
                kd = kd_loss(trace, teacher_trace)
                loss = total_loss(sup, kd, config.epsilon)
                out_grads = kd_loss_grads(trace, teacher_trace, scale=1.0 - config.epsilon)
                out_grads["logits"] = sup_loss_logit_grad(trace.probs, yb, scale=config.epsilon)
            else:
                kd = 0.0
                loss = sup
                out_grads = {"logits": sup_loss_logit_grad(trace.probs, yb)}
            if not np.isfinite(loss):
                raise nncore.NumericError(f"non-finite training loss at federated epoch {k}")
            grads = pair.student.backward(cache, out_grads)
            nncore.adam_step(params, grads, adam)
            kd_sum += kd
            sup_sum += sup
            total_sum += loss
            n_batches += 1
    report = LossReport(kd=kd_sum / n_batches, sup=sup_sum / n_batches,
                        total=total_sum / n_batches, epoch=k)
    return report, ext.extract_hidden_weights(pair.student, epoch_tag=k)
