"""Finite-difference verification of every backward rule in the package.

Each check builds a scalar loss from an op, block or whole network in 64-bit
mode, computes gradients once with the tape and once with central
differences, and reports the worst relative error.  Elementary ops are
checked over every input coordinate; networks are checked against a seeded
random subset of coordinates per parameter tensor, which keeps the full suite
in the tens of seconds while still touching every backward rule on every
layer type and topology.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .models import DISCRIMINATOR_DESIGNS, GENERATOR_TOPOLOGIES, AttentionGate, GeneratorSpec, build_discriminator, build_generator
from .seeding import stream_rng
from .tensor import Tensor, precision
from .training import bce_with_logits

__all__ = ["CheckResult", "relative_error", "check_function", "run_checks", "DEFAULT_TOLERANCE"]

DEFAULT_TOLERANCE = 1e-4
_H = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:40s} max_rel_err={self.max_rel_err:.3e} (tol {self.tolerance:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Worst per-coordinate |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_function(f, x: Tensor, indices=None, h: float = _H) -> float:
    """Compare tape gradients of a scalar function against finite differences.

    ``f`` maps a Node to a scalar Node and must be deterministic (re-seed any
    sampling inside).  Returns the max relative error over the checked
    coordinates.
    """
    node = ad.parameter(x)
    loss = f(node)
    ad.backward(loss)
    analytic = node.grad.data
    numeric = ad.finite_difference_grad(lambda t: f(ad.constant(t)).item(), x, h=h, indices=indices).data
    if indices is not None:
        flat_a = analytic.reshape(-1)[list(indices)]
        flat_n = numeric.reshape(-1)[list(indices)]
        return relative_error(flat_a, flat_n)
    return relative_error(analytic, numeric)


def _rand(rng, shape, scale=1.0, offset=0.0):
    return Tensor(rng.normal(offset, scale, size=shape), dtype=np.float64)


def _projection(rng, shape):
    """Fixed random projection making sum-based losses sensitive to every output."""
    return ad.constant(Tensor(rng.normal(0.0, 1.0, size=shape), dtype=np.float64))


def _model_param_errors(model, loss_of, rng, coords_per_tensor=6, h=1e-7):
    """Check d(loss)/d(theta) for a sampled coordinate subset of every parameter.

    Whole networks are piecewise-smooth: a perturbed weight can push a ReLU
    preactivation or a pool argmax across its kink, where a central difference
    estimates nothing meaningful.  Coordinates whose one-sided slopes disagree
    (beyond the h*f'' a smooth function allows) are skipped as astride a kink;
    skips must stay rare or the check fails outright.  The relative-error
    floor is 1e-4: with a loss of order one, a gradient coordinate below that
    is verified absolutely at the ~1e-10 finite-difference noise level, where
    a relative demand would only measure the quotient noise.
    """
    ad.zero_grads(p for _, p in model.parameters())
    loss = loss_of()
    ad.backward(loss)
    f0 = loss.item()
    worst = 0.0
    checked = skipped = 0
    for name, node in model.parameters():
        analytic = node.grad.data.reshape(-1)
        size = analytic.size
        k = min(coords_per_tensor, size)
        coords = rng.choice(size, size=k, replace=False) if size > k else np.arange(size)
        original = node.value
        flat = original.data.reshape(-1)
        for i in coords:
            bumped = flat.copy()
            bumped[i] += h
            node.value = Tensor(bumped.reshape(original.shape), dtype=np.float64)
            f_plus = loss_of().item()
            bumped[i] -= 2 * h
            node.value = Tensor(bumped.reshape(original.shape), dtype=np.float64)
            f_minus = loss_of().item()
            node.value = original
            central = (f_plus - f_minus) / (2 * h)
            slope_gap = abs((f_plus - f0) / h - (f0 - f_minus) / h)
            if slope_gap > max(1e-6, 1e-4 * abs(central)):
                skipped += 1
                continue
            checked += 1
            worst = max(worst, relative_error(analytic[i], central, floor=1e-4))
    if checked == 0 or skipped > 0.25 * (checked + skipped):
        return float("inf")
    return worst


# ---------------------------------------------------------------------------
# Individual checks (all run inside precision("float64"))
# ---------------------------------------------------------------------------


def _elementary_checks(rng):
    x = _rand(rng, (3, 4))
    y = _rand(rng, (3, 4), offset=3.0)  # positive for log/div
    checks = {}
    checks["op_add"] = lambda: check_function(lambda a: ad.reduce_sum(ad.mul(ad.add(a, ad.constant(y)), ad.constant(y))), x)
    checks["op_sub"] = lambda: check_function(lambda a: ad.reduce_sum(ad.mul(ad.sub(a, ad.constant(y)), ad.constant(y))), x)
    checks["op_mul"] = lambda: check_function(lambda a: ad.reduce_sum(ad.mul(a, ad.constant(y))), x)
    checks["op_div"] = lambda: check_function(lambda a: ad.reduce_sum(ad.div(a, ad.constant(y))), x)
    checks["op_div_denominator"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.div(ad.constant(x), a)), y
    )
    checks["op_scalar_mix"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.add(ad.mul(a, 2.5), -1.25)), x
    )
    checks["op_exp"] = lambda: check_function(lambda a: ad.reduce_sum(ad.exp(a)), x)
    checks["op_log"] = lambda: check_function(lambda a: ad.reduce_sum(ad.log(a)), y)
    m1 = _rand(rng, (3, 5))
    m2 = _rand(rng, (5, 2))
    p = stream_rng(11, "gradcheck")
    proj = Tensor(p.normal(size=(3, 2)), dtype=np.float64)
    checks["op_matmul_lhs"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(ad.matmul(a, ad.constant(m2)), ad.constant(proj))), m1
    )
    checks["op_matmul_rhs"] = lambda: check_function(
        lambda b: ad.reduce_sum(ad.mul(ad.matmul(ad.constant(m1), b), ad.constant(proj))), m2
    )
    other = _rand(rng, (2, 4))
    w = Tensor(stream_rng(12, "gradcheck").normal(size=(5, 4)), dtype=np.float64)
    checks["op_concat"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(ad.concat([a, ad.constant(other)], axis=0), ad.constant(w))), x
    )
    checks["op_reshape"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(ad.reshape(a, (4, 3)), ad.constant(x.reshape((4, 3))))), x
    )
    checks["op_sum_axis"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(ad.reduce_sum(a, axis=1), ad.constant(Tensor([1.0, -2.0, 0.5], dtype=np.float64)))), x
    )
    checks["op_mean"] = lambda: check_function(lambda a: ad.reduce_mean(a), x)
    return checks


def _layer_checks(rng):
    checks = {}
    # keep preactivations away from relu's kink and pool ties off the grid
    x_act = _rand(rng, (2, 4, 4), offset=0.1)
    checks["act_relu"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(layers.relu(a), _projection(stream_rng(20, "gradcheck"), (2, 4, 4)))), x_act
    )
    checks["act_sigmoid"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(layers.sigmoid(a), _projection(stream_rng(21, "gradcheck"), (2, 4, 4)))), x_act
    )
    checks["act_softmax"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(layers.softmax(a, axis=0), _projection(stream_rng(22, "gradcheck"), (2, 4, 4)))), x_act
    )

    x_img = _rand(rng, (2, 6, 6))
    w = _rand(rng, (3, 2, 3, 3), scale=0.5)
    b = _rand(rng, (3,), scale=0.1)
    proj_same = _projection(stream_rng(23, "gradcheck"), (3, 6, 6))
    checks["conv2d_input"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(layers.conv2d(a, ad.constant(w), ad.constant(b), 1, 1), proj_same)), x_img
    )
    checks["conv2d_weight"] = lambda: check_function(
        lambda wn: ad.reduce_sum(ad.mul(layers.conv2d(ad.constant(x_img), wn, ad.constant(b), 1, 1), proj_same)), w
    )
    checks["conv2d_bias"] = lambda: check_function(
        lambda bn: ad.reduce_sum(ad.mul(layers.conv2d(ad.constant(x_img), ad.constant(w), bn, 1, 1), proj_same)), b
    )
    proj_half = _projection(stream_rng(24, "gradcheck"), (3, 3, 3))
    checks["conv2d_stride2"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(layers.conv2d(a, ad.constant(w), ad.constant(b), 2, 1), proj_half)), x_img
    )

    x_pool = Tensor(stream_rng(25, "gradcheck").permutation(np.arange(2 * 6 * 6, dtype=np.float64)).reshape(2, 6, 6) * 0.1, dtype=np.float64)
    proj_pool = _projection(stream_rng(26, "gradcheck"), (2, 3, 3))
    checks["max_pool2d"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(layers.max_pool2d(a), proj_pool)), x_pool
    )

    proj_up = _projection(stream_rng(27, "gradcheck"), (2, 12, 12))
    checks["upsample_nearest"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(layers.upsample_nearest2x(a), proj_up)), x_img
    )

    wt = _rand(rng, (2, 3, 2, 2), scale=0.5)
    bt = _rand(rng, (3,), scale=0.1)
    proj_t = _projection(stream_rng(28, "gradcheck"), (3, 12, 12))
    checks["conv_transpose_input"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(layers.conv_transpose2d(a, ad.constant(wt), ad.constant(bt)), proj_t)), x_img
    )
    checks["conv_transpose_weight"] = lambda: check_function(
        lambda wn: ad.reduce_sum(ad.mul(layers.conv_transpose2d(ad.constant(x_img), wn, ad.constant(bt)), proj_t)), wt
    )

    xv = _rand(rng, (7,))
    wl = _rand(rng, (4, 7), scale=0.5)
    bl = _rand(rng, (4,), scale=0.1)
    proj_l = _projection(stream_rng(29, "gradcheck"), (4,))
    checks["linear_input"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(layers.linear(a, ad.constant(wl), ad.constant(bl)), proj_l)), xv
    )
    checks["linear_weight"] = lambda: check_function(
        lambda wn: ad.reduce_sum(ad.mul(layers.linear(ad.constant(xv), wn, ad.constant(bl)), proj_l)), wl
    )

    def dropout_fn(a):
        # identical mask on every evaluation: fresh generator, fixed seed
        return ad.reduce_sum(
            ad.mul(layers.dropout(a, 0.4, np.random.default_rng(99), training=True),
                   _projection(stream_rng(30, "gradcheck"), (2, 6, 6)))
        )

    checks["dropout_fixed_mask"] = lambda: check_function(dropout_fn, x_img)

    alpha_x = _rand(rng, (3, 4, 4))
    alpha_map = Tensor(stream_rng(31, "gradcheck").uniform(0.1, 0.9, size=(1, 4, 4)), dtype=np.float64)
    proj_cs = _projection(stream_rng(32, "gradcheck"), (3, 4, 4))
    checks["channel_scale_features"] = lambda: check_function(
        lambda a: ad.reduce_sum(ad.mul(layers.channel_scale(a, ad.constant(alpha_map)), proj_cs)), alpha_x
    )
    checks["channel_scale_map"] = lambda: check_function(
        lambda m: ad.reduce_sum(ad.mul(layers.channel_scale(ad.constant(alpha_x), m), proj_cs)), alpha_map
    )

    targets = Tensor(stream_rng(33, "gradcheck").uniform(0, 1, size=(2, 6, 6)), dtype=np.float64)
    checks["bce_with_logits"] = lambda: check_function(lambda a: bce_with_logits(a, targets), x_img)
    return checks


def _block_checks(rng):
    checks = {}

    def double_conv_err():
        block = layers.DoubleConv(2, 3, stream_rng(40, "gradcheck"))
        x = _rand(rng, (2, 6, 6), offset=0.2)
        proj = _projection(stream_rng(41, "gradcheck"), (3, 6, 6))
        input_err = check_function(lambda a: ad.reduce_sum(ad.mul(block(a), proj)), x)
        xc = ad.constant(x)
        param_err = _model_param_errors(
            block, lambda: ad.reduce_sum(ad.mul(block(xc), proj)), stream_rng(42, "gradcheck"), coords_per_tensor=8
        )
        return max(input_err, param_err)

    checks["block_double_conv"] = double_conv_err

    def gate_err():
        gate = AttentionGate(4, 8, stream_rng(43, "gradcheck"))
        g = _rand(rng, (4, 8, 8))
        x_l = _rand(rng, (8, 4, 4))
        proj = _projection(stream_rng(44, "gradcheck"), (4, 8, 8))
        e1 = check_function(lambda a: ad.reduce_sum(ad.mul(gate(a, ad.constant(x_l)), proj)), g)
        e2 = check_function(lambda a: ad.reduce_sum(ad.mul(gate(ad.constant(g), a), proj)), x_l)
        gc, xc = ad.constant(g), ad.constant(x_l)
        e3 = _model_param_errors(
            gate, lambda: ad.reduce_sum(ad.mul(gate(gc, xc), proj)), stream_rng(45, "gradcheck"), coords_per_tensor=8
        )
        return max(e1, e2, e3)

    checks["block_attention_gate"] = gate_err
    return checks


def _network_checks(rng, coords_per_tensor=5):
    checks = {}
    for topology in GENERATOR_TOPOLOGIES:
        def gen_err(topology=topology):
            model = build_generator(GeneratorSpec(topology=topology, base_channels=2), seed=7)
            model.set_training(False)
            x = ad.constant(_rand(rng, (1, 16, 16), offset=0.5, scale=0.25))
            proj = _projection(stream_rng(50, "gradcheck"), (1, 16, 16))
            return _model_param_errors(
                model,
                lambda: ad.reduce_sum(ad.mul(model(x), proj)),
                stream_rng(51, "gradcheck"),
                coords_per_tensor=coords_per_tensor,
            )

        checks[f"generator_{topology}"] = gen_err
    for design in DISCRIMINATOR_DESIGNS:
        def disc_err(design=design):
            model = build_discriminator(design, 128, seed=7)
            model.set_training(False)  # dropout identity; the op has its own check
            x = ad.constant(_rand(rng, (128,), scale=0.5))
            return _model_param_errors(
                model,
                lambda: model.forward_logit(x),
                stream_rng(52, "gradcheck"),
                coords_per_tensor=coords_per_tensor,
            )

        checks[f"discriminator_{design}"] = disc_err
    return checks


def run_checks(select=None, tolerance: float = DEFAULT_TOLERANCE) -> list[CheckResult]:
    """Run the full oracle suite (or the subset whose names contain `select`)."""
    results = []
    with precision(np.float64):
        rng = stream_rng(1, "gradcheck")
        suite: dict = {}
        suite.update(_elementary_checks(rng))
        suite.update(_layer_checks(rng))
        suite.update(_block_checks(rng))
        suite.update(_network_checks(rng))
        for name, fn in suite.items():
            if select and select not in name:
                continue
            results.append(CheckResult(name=name, max_rel_err=fn(), tolerance=tolerance))
    return results
