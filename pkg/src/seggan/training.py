"""Loss, optimizer and the supervised / adversarial training loops.

The adversarial loop runs two phases per epoch, discriminator first: phase D
maximizes log D(truth, truth) + log(1 - D(truth, prediction)) with the
generator frozen (its output enters as a constant), then phase G minimizes
the segmentation loss plus a weighted adversarial term with the discriminator
frozen.  Freezing is enforced, not assumed: parameter digests are taken
around each phase and any drift raises.

With ``lambda_adv == 0`` the adversarial term is skipped outright rather than
multiplied by zero, and each phase draws from its own derived RNG stream, so
the generator's update sequence is bit-identical to ``train_supervised``
under the same seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Node, backward, constant, forward_record, zero_grads
from .data import batch_iterator
from .layers import _sigmoid_arr
from .models import GanModel
from .seeding import stream_rng
from .tensor import DomainError, ShapeError, Tensor

__all__ = [
    "TrainConfig",
    "LossRecord",
    "RmsProp",
    "NanGradientError",
    "TrainingAbort",
    "FreezeViolation",
    "bce_with_logits",
    "train_supervised",
    "train_adversarial",
    "write_loss_csv",
]


class NanGradientError(RuntimeError):
    """A parameter's gradient went non-finite; the message names the parameter."""


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss or gradient.

    Carries the records so far and the last epoch-end parameter snapshot so
    callers can still emit a usable checkpoint.
    """

    def __init__(self, message, records, last_good_params):
        super().__init__(message)
        self.records = records
        self.last_good_params = last_good_params


class FreezeViolation(RuntimeError):
    """A frozen network's parameters changed during a phase."""


@dataclass
class TrainConfig:
    """Hyperparameters that fully determine a run given dataset and seed."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 1
    batch_size: int = 2
    dropout: float = 0.5
    lambda_adv: float = 0.1
    d_steps_per_epoch: int = 1
    seed: int = 0
    shuffle: bool = True

    def validate(self) -> "TrainConfig":
        if self.learning_rate <= 0 or self.beta1 <= 0 or self.beta2 <= 0 or self.epsilon <= 0:
            raise ValueError("learning_rate, beta1, beta2 and epsilon must be positive")
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.d_steps_per_epoch < 0:
            raise ValueError("d_steps_per_epoch must be >= 0")
        return self


@dataclass
class LossRecord:
    """Per-epoch loss summary; adversarial fields stay None in supervised runs."""

    epoch: int
    gen_loss: float
    disc_loss: float | None = None
    seg_bce: float | None = None
    adv_bce: float | None = None
    phase_order: str = "G"


def bce_with_logits(logits: Node, targets, weights=None) -> Node:
    """Mean binary cross entropy fused with the sigmoid, in the stable form.

    Computes mean(w * (max(x, 0) - x*t + log(1 + exp(-|x|)))), which never
    exponentiates a positive argument, so |x| = 100 is exact where the naive
    sigmoid-then-log composition overflows.
    """
    if isinstance(targets, Node):
        targets = targets.value
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets)
    x = logits.value.data
    if t.shape != x.shape:
        raise ShapeError(f"logits {x.shape} vs targets {t.shape}")
    if t.min() < 0 or t.max() > 1:
        raise DomainError("targets must lie in [0, 1]")
    t = t.astype(x.dtype)
    if weights is None:
        w = None
    else:
        w = weights.data if isinstance(weights, Tensor) else np.asarray(weights)
        if w.shape != x.shape:
            raise ShapeError(f"weights {w.shape} vs logits {x.shape}")
        w = w.astype(x.dtype)
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    if w is not None:
        per = per * w
    n = x.size
    value = Tensor(np.asarray(per.sum() / n, dtype=x.dtype))

    def rule(g):
        d = (_sigmoid_arr(x) - t) / n
        if w is not None:
            d = d * w
        return g * d

    return forward_record("bce_with_logits", value, [(logits, rule)])


class RmsProp:
    """RMSprop: normalize each gradient by a moving average of its squares.

    Keeps two exponential averages per parameter: ``v`` of raw gradients
    (a momentum buffer, maintained and inspectable but not used by the
    update) and ``s`` of squared gradients; the update is
    -lr * g / sqrt(s + eps).

    ``literal_paper_form`` switches to the update rule exactly as printed in
    the source formulas (minus signs in both averages and an extra gradient
    factor).  Those formulas drive ``s`` negative, so the square root goes
    NaN within a few steps; the flag exists only to demonstrate that
    divergence side by side and must not be used for training.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, literal_paper_form=False):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.literal_paper_form = literal_paper_form
        self.t = 0
        self.v = {name: np.zeros(p.shape, dtype=p.dtype) for name, p in self.params}
        self.s = {name: np.zeros(p.shape, dtype=p.dtype) for name, p in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            g = p.grad_array()
            if g is None:
                g = np.zeros(p.shape, dtype=p.dtype)
            elif not np.all(np.isfinite(g)):
                raise NanGradientError(f"non-finite gradient for parameter {name!r} at step {self.t}")
            v, s = self.v[name], self.s[name]
            if self.literal_paper_form:
                v[...] = b1 * v - (1 - b1) * g
                s[...] = b2 * s - (1 - b2) * g * g
                with np.errstate(invalid="ignore"):
                    delta = -self.lr * (v / np.sqrt(s + self.eps)) * g
            else:
                v[...] = b1 * v + (1 - b1) * g
                s[...] = b2 * s + (1 - b2) * g * g
                delta = -self.lr * g / np.sqrt(s + self.eps)
            p.value = Tensor(p.value.data + delta, dtype=p.dtype)

    def zero_grads(self) -> None:
        zero_grads(p for _, p in self.params)


def _mean_loss(per_sample: list[Node]) -> Node:
    total = per_sample[0]
    for term in per_sample[1:]:
        total = total + term
    return total / float(len(per_sample))


def _snapshot(params):
    return [(name, p.value.data.copy()) for name, p in params]


def _digest(params) -> bytes:
    h = hashlib.sha1()
    for name, p in params:
        h.update(name.encode())
        h.update(p.value.data.tobytes())
    return h.digest()


def train_supervised(model, dataset, config: TrainConfig, on_epoch=None):
    """Train a generator on (image, mask) samples with BCE-with-logits.

    Returns (records, model).  A non-finite loss or gradient raises
    TrainingAbort carrying the records so far and the last epoch-end
    parameter snapshot.
    """
    config.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    params = model.parameters()
    opt = RmsProp(
        params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.epsilon
    )
    shuffle_rng = stream_rng(config.seed, "shuffle") if config.shuffle else None
    model.set_training(True)
    model.bind_dropout_rng(stream_rng(config.seed, "dropout"))
    records: list[LossRecord] = []
    last_good = _snapshot(params)
    for epoch in range(config.epochs):
        batch_losses = []
        for batch in batch_iterator(dataset, config.batch_size, shuffle_rng):
            opt.zero_grads()
            per = [bce_with_logits(model(constant(s.image)), s.mask) for s in batch]
            loss = _mean_loss(per)
            lv = loss.item()
            if not np.isfinite(lv):
                raise TrainingAbort(f"non-finite loss at epoch {epoch}", records, last_good)
            backward(loss)
            try:
                opt.step()
            except NanGradientError as err:
                raise TrainingAbort(str(err), records, last_good) from err
            batch_losses.append(lv)
        mean = float(np.mean(batch_losses))
        rec = LossRecord(epoch=epoch, gen_loss=mean, seg_bce=mean, phase_order="G")
        records.append(rec)
        if on_epoch:
            on_epoch(rec)
        last_good = _snapshot(params)
    return records, model


def train_adversarial(gan: GanModel, dataset, config: TrainConfig, on_epoch=None, on_phase=None):
    """Two-phase adversarial training: discriminator first, then generator.

    Phase D takes ``d_steps_per_epoch`` optimizer steps on real pairs
    (truth, truth) labeled 1 and fake pairs (truth, prediction) labeled 0,
    cycling its own shuffled batch order; the generator output enters as a
    constant.  Phase G minimizes bce(prediction, truth) plus
    lambda_adv * bce(D(truth, prediction), 1) with the discriminator left
    unstepped.  Both freezes are verified by parameter digests.
    """
    config.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    g_params = gan.generator.parameters("generator.")
    d_params = gan.discriminator.parameters("discriminator.")
    opt_g = RmsProp(
        g_params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.epsilon
    )
    opt_d = RmsProp(
        d_params, lr=config.learning_rate, beta1=config.beta1, beta2=config.beta2, eps=config.epsilon
    )
    g_shuffle = stream_rng(config.seed, "shuffle") if config.shuffle else None
    d_shuffle = stream_rng(config.seed, "shuffle_disc") if config.shuffle else None
    gan.set_training(True)
    gan.generator.bind_dropout_rng(stream_rng(config.seed, "dropout"))
    gan.discriminator.bind_dropout_rng(stream_rng(config.seed, "dropout_disc"))
    one = Tensor([1.0])
    zero = Tensor([0.0])
    records: list[LossRecord] = []
    all_params = g_params + d_params
    last_good = _snapshot(all_params)
    for epoch in range(config.epochs):
        phase_order = ""
        d_losses: list[float] = []
        if config.d_steps_per_epoch > 0:
            phase_order += "D"
            g_before = _digest(g_params)
            d_batches = list(batch_iterator(dataset, config.batch_size, d_shuffle))
            for step in range(config.d_steps_per_epoch):
                batch = d_batches[step % len(d_batches)]
                opt_d.zero_grads()
                per = []
                for s in batch:
                    fake = constant(gan.generator(constant(s.image)).value)
                    truth = constant(s.mask)
                    real_term = bce_with_logits(gan.pair_logit(truth, truth), one)
                    fake_term = bce_with_logits(gan.pair_logit(truth, fake), zero)
                    per.append((real_term + fake_term) * 0.5)
                loss = _mean_loss(per)
                lv = loss.item()
                if not np.isfinite(lv):
                    raise TrainingAbort(f"non-finite D loss at epoch {epoch}", records, last_good)
                backward(loss)
                try:
                    opt_d.step()
                except NanGradientError as err:
                    raise TrainingAbort(str(err), records, last_good) from err
                d_losses.append(lv)
            if _digest(g_params) != g_before:
                raise FreezeViolation("generator parameters changed during phase D")
            if on_phase:
                on_phase(epoch, "D")
        phase_order += "G"
        d_before = _digest(d_params)
        seg_losses: list[float] = []
        adv_losses: list[float] = []
        gen_losses: list[float] = []
        for batch in batch_iterator(dataset, config.batch_size, g_shuffle):
            opt_g.zero_grads()
            zero_grads(p for _, p in d_params)
            per = []
            seg_vals = []
            adv_vals = []
            for s in batch:
                pred = gan.generator(constant(s.image))
                seg = bce_with_logits(pred, s.mask)
                seg_vals.append(seg.item())
                if config.lambda_adv > 0:
                    adv = bce_with_logits(gan.pair_logit(constant(s.mask), pred), one)
                    adv_vals.append(adv.item())
                    per.append(seg + adv * config.lambda_adv)
                else:
                    per.append(seg)
            loss = _mean_loss(per)
            lv = loss.item()
            if not np.isfinite(lv):
                raise TrainingAbort(f"non-finite G loss at epoch {epoch}", records, last_good)
            backward(loss)
            try:
                opt_g.step()
            except NanGradientError as err:
                raise TrainingAbort(str(err), records, last_good) from err
            gen_losses.append(lv)
            seg_losses.extend(seg_vals)
            adv_losses.extend(adv_vals)
        if _digest(d_params) != d_before:
            raise FreezeViolation("discriminator parameters changed during phase G")
        if on_phase:
            on_phase(epoch, "G")
        rec = LossRecord(
            epoch=epoch,
            gen_loss=float(np.mean(gen_losses)),
            disc_loss=float(np.mean(d_losses)) if d_losses else None,
            seg_bce=float(np.mean(seg_losses)),
            adv_bce=float(np.mean(adv_losses)) if adv_losses else None,
            phase_order=phase_order,
        )
        records.append(rec)
        if on_epoch:
            on_epoch(rec)
        last_good = _snapshot(all_params)
    return records, gan


def _fmt(x) -> str:
    return "" if x is None else f"{x:.10g}"


def write_loss_csv(path, records, echo_lines=()) -> None:
    """Loss history as CSV with the run config echoed in leading comments."""
    lines = [f"# {line}" for line in echo_lines]
    lines.append("epoch,generator_loss,discriminator_loss,seg_bce,adv_bce,phase_order")
    for r in records:
        lines.append(
            f"{r.epoch},{_fmt(r.gen_loss)},{_fmt(r.disc_loss)},{_fmt(r.seg_bce)},"
            f"{_fmt(r.adv_bce)},{r.phase_order}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
