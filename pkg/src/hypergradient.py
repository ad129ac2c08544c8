"""Architecture hypergradients through one-step unrolled weight updates.

All mixed second derivatives are central differences of first-order
gradients: the point held fixed is moved by +/- alpha along a direction
vector with alpha = fd_scale / ||direction||, and the two gradients with
respect to the other argument are differenced. Three such products appear:

* own term:    d2/dA_k dW_k of learner k's stage-2 objective, applied to
               the validation gradient at W'_k;
* cross term:  d2/dV'_k dW_j of learner j's loss on k's pseudo-labels,
               applied to j's validation gradient, and then
               d2/dA_k dV_k of k's training loss applied to the result.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from src.autodiff import BoundParams, LossBuilder, ParamVector, Tape, Tensor, grad_many, grad_of_inner_product
from src.config import config
from src.datasets import LabeledDataset
from src.learner import NetworkSpec, hard_ce_loss, predict_proba, soft_ce_loss

logger = logging.getLogger(__name__)

# (weights, arch) -> scalar loss
WeightArchLoss = Callable[[BoundParams, BoundParams], Tensor]


def hvp_fd(loss_builder: LossBuilder, base_point: ParamVector, diff_wrt: ParamVector,
           direction: ParamVector, fd_scale: float = config.DEFAULT_FD_SCALE) -> ParamVector:
    """Central-difference mixed Hessian-vector product.

    `loss_builder(at, wrt)` is evaluated with `at` = base_point +/- alpha *
    direction and differentiated with respect to `wrt` = diff_wrt. A null
    direction gives exact zeros.
    """
    norm = direction.norm()
    if norm < config.NULL_DIRECTION_NORM:
        return diff_wrt.zeros_like()
    alpha = fd_scale / norm
    plus = grad_of_inner_product(loss_builder, base_point.shifted(direction, alpha), diff_wrt)
    minus = grad_of_inner_product(loss_builder, base_point.shifted(direction, -alpha), diff_wrt)
    return diff_wrt.with_values((plus.values - minus.values) / (2.0 * alpha))


def validation_grads(val_loss: WeightArchLoss, w_prime: ParamVector,
                     arch: ParamVector) -> Tuple[float, ParamVector, ParamVector]:
    """(L_val, dL_val/dW', dL_val/dA) from one tape."""
    with Tape() as tape:
        weights = w_prime.bind(tape)
        logits = arch.bind(tape)
        loss = val_loss(weights, logits)
        grad_w, grad_a = grad_many(loss, weights, logits)
    return float(loss.values), grad_w, grad_a


@dataclass(frozen=True)
class OwnGradient:
    """Learner k's own hypergradient and the pieces it is made of."""
    val_loss: float
    direction: ParamVector
    direct: ParamVector
    correction: ParamVector
    gradient: ParamVector


def own_arch_grad(val_loss: WeightArchLoss, stage2_loss: WeightArchLoss, w_pre: ParamVector,
                  w_prime: ParamVector, arch: ParamVector, xi_w: float,
                  fd_scale: float = config.DEFAULT_FD_SCALE, correction_sign: float = 1.0) -> OwnGradient:
    """dA_k of L(W'_k(A_k), A_k, val) with the stage-2 step unrolled once.

    direct - xi_w * [d2/dA dW O_k(W_k, A_k)] u,  u = dL_val/dW'_k.
    `correction_sign` flips the second term; only the gradient-check
    mutation test sets it.
    """
    value, direction, direct = validation_grads(val_loss, w_prime, arch)
    correction = hvp_fd(stage2_loss, base_point=w_pre, diff_wrt=arch, direction=direction, fd_scale=fd_scale)
    gradient = direct.shifted(correction, -xi_w * correction_sign)
    return OwnGradient(value, direction, direct, correction, gradient)


def first_order_arch_grad(val_loss: WeightArchLoss, w_prime: ParamVector, arch: ParamVector) -> OwnGradient:
    """dA_k of L(W'_k, A_k, val) with W'_k held constant; the correction is zero."""
    value, direction, direct = validation_grads(val_loss, w_prime, arch)
    return OwnGradient(value, direction, direct, arch.zeros_like(), direct)


def pseudo_label_loss(consumer_net: NetworkSpec, consumer_arch: ParamVector, unlabeled: np.ndarray,
                      producer_net: NetworkSpec) -> Callable[[BoundParams, BoundParams, BoundParams], Tensor]:
    """Soft CE of the consumer on labels recomputed from the producer's V'.

    The returned function takes (consumer weights, producer V', producer
    arch) so that either producer argument may be the one on the tape.
    """
    def loss(consumer_weights: BoundParams, producer_v: BoundParams, producer_arch: BoundParams) -> Tensor:
        labels = predict_proba(unlabeled, producer_v, producer_arch, producer_net)
        return soft_ce_loss(consumer_weights, consumer_arch.constants(), consumer_net, unlabeled, labels)

    return loss


@dataclass(frozen=True)
class CrossInputs:
    """Everything the (producer k, consumer j) term reads."""
    producer_net: NetworkSpec
    producer_arch: ParamVector
    producer_v_pre: ParamVector
    producer_v_prime: ParamVector
    consumer_net: NetworkSpec
    consumer_arch: ParamVector
    consumer_w_pre: ParamVector
    consumer_direction: ParamVector
    train_batch: LabeledDataset
    unlabeled: np.ndarray


def cross_arch_grad(inputs: CrossInputs, tradeoff: float, xi_v: float, xi_w: float,
                    fd_scale: float = config.DEFAULT_FD_SCALE, harden: bool = False,
                    label_arch_pathway: bool = False) -> ParamVector:
    """Contribution to A_k's gradient from consumer j's validation loss.

    Evaluated right to left as vectors:
      u2 = [d2/dV'_k dW_j L(W_j, A_j, pl_k(V'_k))] u1
      u3 = [d2/dA_k dV_k L(V_k, A_k, train)] u2
      result = xi_w * xi_v * tradeoff * u3
    With `label_arch_pathway` the labels also see A_k directly, adding
    -xi_w * tradeoff * [d2/dA_k dW_j L(W_j, A_j, pl_k)] u1.
    """
    zeros = inputs.producer_arch.zeros_like()
    u1 = inputs.consumer_direction
    if tradeoff == 0.0 or harden or u1.norm() < config.NULL_DIRECTION_NORM:
        return zeros

    pl_loss = pseudo_label_loss(inputs.consumer_net, inputs.consumer_arch, inputs.unlabeled, inputs.producer_net)
    total = zeros
    if xi_v != 0.0:
        frozen_arch = inputs.producer_arch.constants()
        u2 = hvp_fd(
            lambda weights, v_prime: pl_loss(weights, v_prime, frozen_arch),
            base_point=inputs.consumer_w_pre, diff_wrt=inputs.producer_v_prime, direction=u1, fd_scale=fd_scale,
        )
        producer_net, batch = inputs.producer_net, inputs.train_batch
        u3 = hvp_fd(
            lambda v, arch: hard_ce_loss(v, arch, producer_net, batch),
            base_point=inputs.producer_v_pre, diff_wrt=inputs.producer_arch, direction=u2, fd_scale=fd_scale,
        )
        total = total.shifted(u3, xi_w * xi_v * tradeoff)
    if label_arch_pathway:
        v_prime = inputs.producer_v_prime.constants()
        direct = hvp_fd(
            lambda weights, arch: pl_loss(weights, v_prime, arch),
            base_point=inputs.consumer_w_pre, diff_wrt=inputs.producer_arch, direction=u1, fd_scale=fd_scale,
        )
        total = total.shifted(direct, -xi_w * tradeoff)
    return total


def numeric_gradient(objective: Callable[[np.ndarray], np.ndarray], point: np.ndarray,
                     step: float = config.GRADCHECK_STEP) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued objective, one column per coordinate."""
    point = np.asarray(point, dtype=np.float64)
    columns = []
    for index in range(point.size):
        plus = point.copy()
        minus = point.copy()
        plus[index] += step
        minus[index] -= step
        columns.append((np.asarray(objective(plus)) - np.asarray(objective(minus))) / (2.0 * step))
    return np.stack(columns, axis=-1)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||); exact zero when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)) / scale)


def check_finite(vector: ParamVector, what: str) -> Optional[str]:
    """Name of the first non-finite slot of `vector`, if any."""
    if np.all(np.isfinite(vector.values)):
        return None
    for name in vector.names:
        if not np.all(np.isfinite(vector.slot(name))):
            return f"{what}:{name}"
    return what
