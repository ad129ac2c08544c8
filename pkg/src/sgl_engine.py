"""Small-group search: K learners co-trained through each other's pseudo-labels.

One call to `sgl_step` runs three stages with a barrier after each:

1. every learner takes a training-loss step on V_k, giving V'_k;
2. every learner labels the unlabeled batch with V'_k, then takes a step
   on W_k against its training loss plus tradeoff times the soft
   cross-entropy on every peer's pseudo-labels, giving W'_k;
3. every learner descends its architecture logits A_k along the gradient
   of the summed validation losses of the whole group.

Within a stage the learners only read the snapshot taken at the previous
barrier, so they may run on a worker pool.
"""

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from src.arch_optimizers import AdamState, build_arch_optimizer
from src.autodiff import BoundParams, ParamVector, Tensor, value_and_grad
from src.datasets import LabeledDataset, MinibatchSampler, PseudoLabeledDataset, TaskData, UnlabeledDataset
from src.exceptions import ConfigError, NonFiniteGradientError
from src.hypergradient import (
    CrossInputs,
    OwnGradient,
    check_finite,
    cross_arch_grad,
    first_order_arch_grad,
    own_arch_grad,
)
from src.learner import (
    LearnerState,
    NetworkSpec,
    accuracy,
    evaluate,
    generate_pseudo_dataset,
    hard_ce_loss,
    init_learner,
    soft_ce_loss,
)
from src.models import EngineConfig, LearnerMetrics, MetricRecord

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass(frozen=True)
class StepBatches:
    """The minibatches one step reads; `val` holds one batch per learner."""
    train: LabeledDataset
    val: Tuple[LabeledDataset, ...]
    unlabeled: UnlabeledDataset


@dataclass
class GroupState:
    """All learners of a group plus the run-level state a checkpoint must carry."""
    learners: List[LearnerState]
    arch_states: List[Optional[AdamState]]
    samplers: Dict[str, MinibatchSampler]
    step: int = 0
    best_val: Optional[float] = None
    stale_evals: int = 0

    def __post_init__(self):
        if any(learner.net != self.learners[0].net for learner in self.learners):
            raise ConfigError("all learners of a group must share one network spec")

    @property
    def size(self) -> int:
        return len(self.learners)

    @property
    def net(self) -> NetworkSpec:
        return self.learners[0].net

    def copy(self) -> "GroupState":
        return GroupState(
            learners=[learner.copy() for learner in self.learners],
            arch_states=list(self.arch_states),
            samplers=copy.deepcopy(self.samplers),
            step=self.step,
            best_val=self.best_val,
            stale_evals=self.stale_evals,
        )


@dataclass
class StageSnapshot:
    """Values fixed at the stage-1 and stage-2 barriers."""
    v_prime: List[ParamVector]
    w_prime: List[ParamVector]
    pseudo_batches: List[PseudoLabeledDataset]
    stage1_losses: List[float] = field(default_factory=list)
    stage2_objectives: List[float] = field(default_factory=list)


@dataclass
class ArchGradients:
    own: List[OwnGradient]
    cross: Dict[Tuple[int, int], ParamVector]
    totals: List[ParamVector]


def _map(pool: Optional[ThreadPoolExecutor], fn: Callable[[T], R], items: Sequence[T]) -> List[R]:
    if pool is None:
        return [fn(item) for item in items]
    return list(pool.map(fn, items))


def _raise_if_not_finite(vector: ParamVector, stage: str, learner: int, **norms: float) -> None:
    where = check_finite(vector, stage)
    if where is not None:
        raise NonFiniteGradientError(
            f"non-finite gradient in {stage}",
            {"learner": learner, "slot": where, **{key: f"{value:.4g}" for key, value in norms.items()}},
        )


def init_group(engine: EngineConfig, net: NetworkSpec, run_seed: int, data: TaskData,
               dtype=np.float64) -> GroupState:
    """Seeded learners plus group-level samplers for the three data roles."""
    learners = [init_learner(k, net, seed, dtype) for k, seed in enumerate(engine.seeds_for_run(run_seed))]
    optimizer = build_arch_optimizer(engine)
    train_seq, val_seq, unlabeled_seq = np.random.SeedSequence(run_seed).spawn(3)
    samplers = {
        "train": MinibatchSampler(len(data.train), engine.batch_size, np.random.default_rng(train_seq)),
        "unlabeled": MinibatchSampler(len(data.unlabeled), engine.unlabeled_batch, np.random.default_rng(unlabeled_seq)),
    }
    if engine.shared_val_batch:
        samplers["val"] = MinibatchSampler(len(data.val), engine.val_batch, np.random.default_rng(val_seq))
    else:
        for k, child in enumerate(val_seq.spawn(engine.num_learners)):
            samplers[f"val{k}"] = MinibatchSampler(len(data.val), engine.val_batch, np.random.default_rng(child))
    logger.info("group learners=%d seeds=%s weights=%d arch_coords=%d",
                len(learners), [l.seed for l in learners], learners[0].num_weights(), learners[0].arch.size)
    return GroupState(learners=learners, arch_states=[optimizer.init_state(l.arch) for l in learners],
                      samplers=samplers)


def _draw(samplers: Dict[str, MinibatchSampler], size: int, data: TaskData) -> StepBatches:
    train = samplers["train"].minibatch(data.train)
    unlabeled = samplers["unlabeled"].minibatch(data.unlabeled)
    if "val" in samplers:
        shared = samplers["val"].minibatch(data.val)
        val = tuple(shared for _ in range(size))
    else:
        val = tuple(samplers[f"val{k}"].minibatch(data.val) for k in range(size))
    return StepBatches(train=train, val=val, unlabeled=unlabeled)


def draw_batches(group: GroupState, data: TaskData) -> StepBatches:
    """Advance the group's samplers by one step, in place."""
    return _draw(group.samplers, group.size, data)


def stage1_update(learner: LearnerState, train_batch: LabeledDataset, xi_v: float,
                  arch: Optional[ParamVector] = None) -> Tuple[ParamVector, float]:
    """V'_k = V_k - xi_v * dL(V_k, A_k, train)/dV_k; returns (V'_k, loss)."""
    arch = learner.arch if arch is None else arch
    net = learner.net
    loss, gradient = value_and_grad(lambda logits, v: hard_ce_loss(v, logits, net, train_batch), arch, learner.v)
    _raise_if_not_finite(gradient, "stage1", learner.index, loss=loss)
    return learner.v.shifted(gradient, -xi_v), loss


def stage2_objective(weights: BoundParams, arch: BoundParams, net: NetworkSpec, train_batch: LabeledDataset,
                     peer_batches: Sequence[PseudoLabeledDataset], tradeoff: float) -> Tensor:
    """Training CE plus tradeoff times the soft CE on every peer's pseudo-labels."""
    objective = hard_ce_loss(weights, arch, net, train_batch)
    if tradeoff == 0.0 or not peer_batches:
        return objective
    peers = None
    for batch in peer_batches:
        term = soft_ce_loss(weights, arch, net, batch.inputs, batch.soft_labels)
        peers = term if peers is None else peers + term
    return objective + tradeoff * peers


def stage2_update(learner: LearnerState, train_batch: LabeledDataset, peer_batches: Sequence[PseudoLabeledDataset],
                  tradeoff: float, xi_w: float, arch: Optional[ParamVector] = None) -> Tuple[ParamVector, float]:
    """W'_k = W_k - xi_w * d(stage-2 objective)/dW_k; returns (W'_k, objective)."""
    arch = learner.arch if arch is None else arch
    net = learner.net
    value, gradient = value_and_grad(
        lambda logits, w: stage2_objective(w, logits, net, train_batch, peer_batches, tradeoff), arch, learner.w,
    )
    _raise_if_not_finite(gradient, "stage2", learner.index, objective=value)
    return learner.w.shifted(gradient, -xi_w), value


def peers_of(k: int, pseudo_batches: Sequence[PseudoLabeledDataset]) -> List[PseudoLabeledDataset]:
    return [batch for batch in pseudo_batches if batch.producer != k]


def inner_updates(learners: Sequence[LearnerState], archs: Sequence[ParamVector], label_archs: Sequence[ParamVector],
                  batches: StepBatches, engine: EngineConfig,
                  pool: Optional[ThreadPoolExecutor] = None) -> StageSnapshot:
    """Stages 1 and 2 for every learner under the given architecture values."""
    indices = range(len(learners))
    stage1 = _map(pool, lambda k: stage1_update(learners[k], batches.train, engine.xi_v, archs[k]), indices)
    v_prime = [v for v, _ in stage1]

    pseudo = [
        generate_pseudo_dataset(batches.unlabeled.inputs, v_prime[k].constants(), label_archs[k].constants(),
                                learners[k].net, producer=k, harden=engine.harden_pseudo_labels)
        for k in indices
    ]

    stage2 = _map(
        pool,
        lambda k: stage2_update(learners[k], batches.train, peers_of(k, pseudo), engine.tradeoff, engine.xi_w, archs[k]),
        indices,
    )
    return StageSnapshot(
        v_prime=v_prime,
        w_prime=[w for w, _ in stage2],
        pseudo_batches=pseudo,
        stage1_losses=[loss for _, loss in stage1],
        stage2_objectives=[value for _, value in stage2],
    )


def arch_gradients(learners: Sequence[LearnerState], snapshot: StageSnapshot, batches: StepBatches,
                   engine: EngineConfig, pool: Optional[ThreadPoolExecutor] = None,
                   own_correction_sign: float = 1.0) -> ArchGradients:
    """Own and cross hypergradients of every learner, evaluated at the pre-step V and W."""
    indices = range(len(learners))

    def own(k: int) -> OwnGradient:
        learner = learners[k]
        net, val_batch = learner.net, batches.val[k]
        if engine.first_order:
            return first_order_arch_grad(lambda w, logits: hard_ce_loss(w, logits, net, val_batch),
                                         snapshot.w_prime[k], learner.arch)
        peers = peers_of(k, snapshot.pseudo_batches)
        return own_arch_grad(
            lambda w, logits: hard_ce_loss(w, logits, net, val_batch),
            lambda w, logits: stage2_objective(w, logits, net, batches.train, peers, engine.tradeoff),
            w_pre=learner.w, w_prime=snapshot.w_prime[k], arch=learner.arch, xi_w=engine.xi_w,
            fd_scale=engine.fd_scale, correction_sign=own_correction_sign,
        )

    owns = _map(pool, own, indices)

    coupled = engine.tradeoff != 0.0 and not engine.first_order
    pairs = [(k, j) for k in indices for j in indices if j != k] if coupled else []

    def cross(pair: Tuple[int, int]) -> ParamVector:
        k, j = pair
        producer, consumer = learners[k], learners[j]
        inputs = CrossInputs(
            producer_net=producer.net,
            producer_arch=producer.arch,
            producer_v_pre=producer.v,
            producer_v_prime=snapshot.v_prime[k],
            consumer_net=consumer.net,
            consumer_arch=consumer.arch,
            consumer_w_pre=consumer.w,
            consumer_direction=owns[j].direction,
            train_batch=batches.train,
            unlabeled=batches.unlabeled.inputs,
        )
        return cross_arch_grad(
            inputs, engine.tradeoff, engine.xi_v, engine.xi_w, fd_scale=engine.fd_scale,
            harden=engine.harden_pseudo_labels, label_arch_pathway=engine.label_arch_pathway,
        )

    crosses = dict(zip(pairs, _map(pool, cross, pairs)))

    totals = []
    for k in indices:
        total = owns[k].gradient
        for j in indices:
            if (k, j) in crosses:
                total = total.shifted(crosses[(k, j)], 1.0)
        totals.append(total)
    if not coupled:
        crosses = {(k, j): learners[k].arch.zeros_like() for k in indices for j in indices if j != k}
    return ArchGradients(own=owns, cross=crosses, totals=totals)


def stage3_update(group: GroupState, snapshot: StageSnapshot, batches: StepBatches, engine: EngineConfig,
                  pool: Optional[ThreadPoolExecutor] = None,
                  own_correction_sign: float = 1.0) -> Tuple[List[ParamVector], List[Optional[AdamState]], ArchGradients]:
    """New architecture logits and optimizer states for every learner."""
    grads = arch_gradients(group.learners, snapshot, batches, engine, pool, own_correction_sign)
    optimizer = build_arch_optimizer(engine)
    archs, states = [], []
    for k, learner in enumerate(group.learners):
        total = grads.totals[k]
        if check_finite(total, "stage3") is not None:
            own_norm = grads.own[k].gradient.norm()
            cross_norm = sum(g.norm() for (producer, _), g in grads.cross.items() if producer == k)
            logger.error("stage3 learner=%d own_norm=%.4g cross_norm=%.4g", k, own_norm, cross_norm)
            _raise_if_not_finite(total, "stage3", k, own_norm=own_norm, cross_norm=cross_norm)
        arch, state = optimizer.step(learner.arch, total, group.arch_states[k])
        archs.append(arch)
        states.append(state)
    return archs, states, grads


def sgl_step(group: GroupState, engine: EngineConfig, batches: StepBatches, workers: int = 1,
             own_correction_sign: float = 1.0,
             samplers: Optional[Dict[str, MinibatchSampler]] = None) -> Tuple[GroupState, MetricRecord]:
    """One search iteration; the input group is never modified.

    The new group carries `samplers` when given, else the input group's.
    """
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        learners = group.learners
        snapshot = inner_updates(learners, [l.arch for l in learners], [l.arch for l in learners],
                                 batches, engine, pool)
        archs, states, grads = stage3_update(group, snapshot, batches, engine, pool, own_correction_sign)
    finally:
        if pool is not None:
            pool.shutdown()

    new_learners = []
    for k, learner in enumerate(learners):
        updated = learner.copy()
        if engine.commit_inner_updates:
            updated.v = snapshot.v_prime[k]
            updated.w = snapshot.w_prime[k]
        updated.arch = archs[k]
        new_learners.append(updated)

    record = MetricRecord(
        step=group.step + 1,
        learners=[
            LearnerMetrics(
                stage1_loss=snapshot.stage1_losses[k],
                stage2_objective=snapshot.stage2_objectives[k],
                val_loss=grads.own[k].val_loss,
                val_accuracy=accuracy(snapshot.w_prime[k], learner.arch, learner.net, batches.val[k]),
                own_grad_norm=grads.own[k].gradient.norm(),
            )
            for k, learner in enumerate(learners)
        ],
        cross_grad_norms={f"{k}<-{j}": g.norm() for (k, j), g in sorted(grads.cross.items())},
    )
    new_group = GroupState(
        learners=new_learners,
        arch_states=states,
        samplers=group.samplers if samplers is None else samplers,
        step=group.step + 1,
        best_val=group.best_val,
        stale_evals=group.stale_evals,
    )
    return new_group, record


def advance(group: GroupState, engine: EngineConfig, data: TaskData, workers: int = 1,
            own_correction_sign: float = 1.0) -> Tuple[GroupState, MetricRecord, StepBatches]:
    """Draw the next batches from a copy of the samplers and take one step.

    The input group, samplers included, is left as it was if the step raises.
    """
    samplers = copy.deepcopy(group.samplers)
    batches = _draw(samplers, group.size, data)
    new_group, record = sgl_step(group, engine, batches, workers=workers,
                                 own_correction_sign=own_correction_sign, samplers=samplers)
    return new_group, record, batches


def evaluate_group(group: GroupState, data: LabeledDataset) -> List[LearnerMetrics]:
    """Full-set loss and accuracy of every learner's W_k."""
    metrics = []
    for learner in group.learners:
        loss, acc = evaluate(learner.w, learner.arch, learner.net, data)
        metrics.append(LearnerMetrics(val_loss=loss, val_accuracy=acc))
    return metrics


def flat_arch(group: GroupState) -> np.ndarray:
    return np.concatenate([learner.arch.values for learner in group.learners])


def split_arch(group: GroupState, values: np.ndarray) -> List[ParamVector]:
    archs, offset = [], 0
    for learner in group.learners:
        size = learner.arch.size
        archs.append(learner.arch.with_values(values[offset:offset + size]))
        offset += size
    return archs


def composed_terms(group: GroupState, batches: StepBatches, engine: EngineConfig, arch_values: np.ndarray) -> np.ndarray:
    """Per-learner L(W'_k, A_k, val) with V', pseudo-labels and W' recomputed from `arch_values`.

    Pseudo-labels use the group's current logits unless `label_arch_pathway`
    is set, in which case they see the supplied values too.
    """
    archs = split_arch(group, np.asarray(arch_values, dtype=group.learners[0].arch.dtype))
    label_archs = archs if engine.label_arch_pathway else [learner.arch for learner in group.learners]
    snapshot = inner_updates(group.learners, archs, label_archs, batches, engine)
    return np.array([
        float(hard_ce_loss(snapshot.w_prime[k].constants(), archs[k].constants(), learner.net, batches.val[k]).values)
        for k, learner in enumerate(group.learners)
    ])


def composed_objective(group: GroupState, batches: StepBatches, engine: EngineConfig, arch_values: np.ndarray) -> float:
    """Sum of the group's one-step validation losses as a function of all architecture logits."""
    return float(composed_terms(group, batches, engine, arch_values).sum())
