"""
Gradient oracle over every operation kind and every training loss

Each check wraps one differentiable piece into a scalar function of a
single 64-bit tensor (other operands are fixed random constants) and
compares reverse-mode gradients with central differences.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tensor, grad_check
from distill_losses import (LossComponents, LossWeights, ModalityMask, cmd_loss, fused_kd_loss, mad_loss,
                            supervised_ce, total_loss, umd_loss)
from error_handler import GradCheckError

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4

# name -> factory(rng) -> (function of one tensor, evaluation point)
CheckFactory = Callable[[np.random.Generator], Tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    """Values with |x| >= 0.1 so the relu kink stays outside the probe step"""
    return np.sign(rng.standard_normal(shape) + 1e-12) * (0.1 + np.abs(rng.standard_normal(shape)))


def _const(array: np.ndarray) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64))


def _readout(rng: np.random.Generator, op: Callable[[Tensor], Tensor], shape) -> Callable[[Tensor], Tensor]:
    """sum(op(x) * W) with a fixed random W, so every output element matters"""
    probe = op(_const(np.zeros(shape)))
    weights = rng.standard_normal(probe.shape)

    def function(x: Tensor) -> Tensor:
        return ad.sum_over(ad.mul(op(x), _const(weights)))
    return function


def _unary(op, shape, point=None):
    def factory(rng):
        x = rng.standard_normal(shape) if point is None else point(rng, shape)
        return _readout(rng, op, shape), x
    return factory


def _binary(op, shape_a, shape_b, vary: int):
    def factory(rng):
        a = rng.standard_normal(shape_a)
        b = rng.standard_normal(shape_b)
        if vary == 0:
            fixed = _const(b)
            return _readout(rng, lambda x: op(x, fixed), shape_a), a
        fixed = _const(a)
        return _readout(rng, lambda x: op(fixed, x), shape_b), b
    return factory


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _scale_by_tensor(rng):
    x = _const(rng.standard_normal((3, 4)))
    return _readout(rng, lambda s: ad.scale(x, s), (1,)), rng.standard_normal((1,))


def _concat_check(rng):
    other = _const(rng.standard_normal((2, 3)))
    return _readout(rng, lambda x: ad.concat([other, x], axis=0), (4, 3)), rng.standard_normal((4, 3))


def _cosine_check(rng):
    b = _const(rng.standard_normal((3, 5)))
    return _readout(rng, lambda x: ad.cosine_similarity(x, b, axis=-1), (3, 5)), rng.standard_normal((3, 5))


OP_CHECKS: Dict[str, CheckFactory] = {
    'matmul[a]': _binary(ad.matmul, (3, 4), (4, 2), 0),
    'matmul[b]': _binary(ad.matmul, (3, 4), (4, 2), 1),
    'add': _binary(ad.add, (3, 4), (3, 4), 0),
    'sub[a]': _binary(ad.sub, (3, 4), (3, 4), 0),
    'sub[b]': _binary(ad.sub, (3, 4), (3, 4), 1),
    'mul': _binary(ad.mul, (3, 4), (3, 4), 0),
    'scalar-scale': _unary(lambda x: ad.scale(x, 0.7), (3, 4)),
    'scalar-scale[tensor]': _scale_by_tensor,
    'relu': _unary(ad.relu, (3, 4), _away_from_zero),
    'gelu': _unary(ad.gelu, (3, 4)),
    'sum-over-axes': _unary(lambda x: ad.sum_over(x, axes=(1,)), (2, 3, 4)),
    'mean-over-axes': _unary(lambda x: ad.mean_over(x, axes=(0, 2)), (2, 3, 4)),
    'reshape': _unary(lambda x: ad.reshape(x, (4, 6)), (2, 3, 4)),
    'transpose': _unary(lambda x: ad.transpose(x, (2, 0, 1)), (2, 3, 4)),
    'concat': _concat_check,
    'softmax-over-axis': _unary(lambda x: ad.softmax(x, axis=-1), (3, 4)),
    'log-softmax-over-axis': _unary(lambda x: ad.log_softmax(x, axis=1), (3, 4)),
    'log-clamped': _unary(ad.log_clamped, (3, 4), _positive),
    'nearest-upsample-2d': _unary(lambda x: ad.upsample(x, 2), (1, 2, 2, 3)),
    'patch-merge-2d': _unary(lambda x: ad.patch_merge(x, 2), (1, 4, 4, 2)),
    'cosine-similarity-over-axis': _cosine_check,
}


def _features(rng, shape=(2, 4, 4, 3)) -> np.ndarray:
    return rng.standard_normal(shape)


def _sup_check(rng):
    labels = rng.integers(0, 4, size=(2, 3))
    return (lambda x: supervised_ce(ad.softmax(x, axis=-1), labels)), rng.standard_normal((2, 3, 4))


def _mad_check(rng):
    teacher = ad.softmax(_const(rng.standard_normal((2, 3, 4))), axis=-1)
    return (lambda x: mad_loss(ad.softmax(x, axis=-1), teacher)), rng.standard_normal((2, 3, 4))


def _umd_check(rng):
    shape = (2, 4, 4, 3)
    teacher = {'R': [_const(_features(rng, shape))], 'D': [_const(_features(rng, shape))]}
    other = _const(_features(rng, shape))
    mask = ModalityMask(('R', 'D'))
    return (lambda x: umd_loss({'R': [x], 'D': [other]}, teacher, mask)), _features(rng, shape)


def _cmd_check(rng):
    shape = (2, 4, 4, 3)
    teacher = {m: [_const(_features(rng, shape))] for m in ('R', 'D', 'E')}
    others = {m: _const(_features(rng, shape)) for m in ('D', 'E')}
    mask = ModalityMask(('R', 'D', 'E'))
    return (lambda x: cmd_loss({'R': [x], **{m: [t] for m, t in others.items()}}, teacher, mask)), _features(rng, shape)


def _fused_check(rng):
    teacher = [_const(_features(rng, (2, 4, 4, 3))), _const(_features(rng, (2, 2, 2, 5)))]
    second = _const(_features(rng, (2, 2, 2, 5)))
    return (lambda x: fused_kd_loss([x, second], teacher)), _features(rng, (2, 4, 4, 3))


def _total_check(rng):
    labels = rng.integers(0, 4, size=(2, 3))
    teacher = ad.softmax(_const(rng.standard_normal((2, 3, 4))), axis=-1)
    weights = LossWeights(lambda_mad=50.0, alpha=5.0, beta=10.0, fused_kd=1.0)

    def function(x):
        probs = ad.softmax(x, axis=-1)
        components = LossComponents(sup=supervised_ce(probs, labels), mad=mad_loss(probs, teacher))
        return total_loss(components, weights)
    return function, rng.standard_normal((2, 3, 4))


LOSS_CHECKS: Dict[str, CheckFactory] = {
    'supervised_ce': _sup_check,
    'mad_loss': _mad_check,
    'umd_loss': _umd_check,
    'cmd_loss': _cmd_check,
    'fused_kd_loss': _fused_check,
    'total_loss': _total_check,
}


@dataclass
class CheckResult:
    name: str
    trials: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def run_checks(trials: int = 20, seed: int = 0, names: List[str] = None) -> List[CheckResult]:
    """Run every check `trials` times on fresh random inputs"""
    checks = {**OP_CHECKS, **LOSS_CHECKS}
    selected = names or list(checks)
    results = []
    for name in selected:
        rng = np.random.default_rng([seed, selected.index(name)])
        worst = 0.0
        for _ in range(trials):
            function, point = checks[name](rng)
            worst = max(worst, grad_check(function, point))
        results.append(CheckResult(name, trials, worst))
        logger.info(f"grad_check {name}: max relative error {worst:.2e} over {trials} inputs")
    return results


def assert_all_pass(results: List[CheckResult]):
    failed = [r for r in results if not r.passed]
    if failed:
        raise GradCheckError(f"gradient check failed for {[r.name for r in failed]}",
                             {r.name: r.max_error for r in failed})
