"""Data models for the small-group learning engine."""

import hashlib
import json
from enum import Enum
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.config import config
from src.exceptions import ConfigError


class CandidateOpKind(str, Enum):
    """Candidate operations available on a cell edge."""
    ZERO = "zero"
    IDENTITY = "identity"
    AFFINE = "affine"
    AFFINE_TANH = "affine_tanh"
    AFFINE_RELU = "affine_relu"
    AVG_POOL = "avg_pool_1d"
    CONV = "conv_1d"


DEFAULT_OPS = [
    CandidateOpKind.ZERO,
    CandidateOpKind.IDENTITY,
    CandidateOpKind.AFFINE,
    CandidateOpKind.AFFINE_TANH,
    CandidateOpKind.AFFINE_RELU,
]


class ArchOptimizerKind(str, Enum):
    """Update rule applied to the architecture logits."""
    PLAIN = "plain"
    ADAM = "adam"


class CellSpec(BaseModel):
    """Cell topology shared by every learner of a group."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_nodes: int = Field(default=4, ge=2)
    num_input_nodes: int = Field(default=1, ge=1, le=2)
    num_cells: int = Field(default=1, ge=1, le=2)
    width: int = Field(default=4, ge=1)
    ops: List[CandidateOpKind] = Field(default_factory=lambda: list(DEFAULT_OPS))
    edges: Optional[List[Tuple[int, int]]] = None
    genotype_k: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _check_topology(self) -> "CellSpec":
        if self.num_input_nodes >= self.num_nodes:
            raise ValueError("num_input_nodes must leave at least one computed node")
        if not self.ops:
            raise ValueError("ops must name at least one candidate operation")
        if len(set(self.ops)) != len(self.ops):
            raise ValueError("ops contains duplicates")
        for source, target in self.edge_list():
            if not 0 <= source < target < self.num_nodes:
                raise ValueError(f"edge ({source}, {target}) must satisfy 0 <= from < to < num_nodes")
            if target < self.num_input_nodes:
                raise ValueError(f"edge ({source}, {target}) points into an input node")
        return self

    def edge_list(self) -> List[Tuple[int, int]]:
        """Edges in index order; the full DAG ordered by (to, from) when not given."""
        if self.edges is not None:
            return [tuple(edge) for edge in self.edges]
        return [
            (source, target)
            for target in range(self.num_input_nodes, self.num_nodes)
            for source in range(target)
        ]

    def incoming(self, node: int) -> List[int]:
        """Indices of the edges ending at `node`."""
        return [index for index, (_, target) in enumerate(self.edge_list()) if target == node]


class DatasetSpec(BaseModel):
    """Where the task, validation, test and unlabeled data come from."""
    model_config = ConfigDict(extra="forbid")

    source: Literal["gaussian_mixture", "csv"] = "gaussian_mixture"
    num_classes: int = Field(default=2, ge=2)
    dim: int = Field(default=2, ge=1)
    per_class: int = Field(default=100, ge=1)
    test_per_class: int = Field(default=100, ge=1)
    unlabeled_per_class: int = Field(default=50, ge=1)
    separation: float = Field(default=3.0, ge=0)
    label_noise: float = Field(default=0.0, ge=0, lt=1)
    unlabeled_shift: float = 0.5
    train_fraction: float = Field(default=0.5, gt=0, lt=1)
    seed: int = 0
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None
    unlabeled_csv: Optional[str] = None
    label_column: int = -1

    @model_validator(mode="after")
    def _check_source(self) -> "DatasetSpec":
        if self.source == "csv" and not (self.train_csv and self.test_csv and self.unlabeled_csv):
            raise ValueError("csv source needs train_csv, test_csv and unlabeled_csv")
        return self


class EngineConfig(BaseModel):
    """Optimizer settings for one small-group search."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    num_learners: int = Field(default=2, ge=1)
    tradeoff: float = Field(default=config.DEFAULT_LAMBDA, ge=0, alias="lambda")
    xi_v: float = Field(default=0.1, gt=0)
    xi_w: float = Field(default=0.1, gt=0)
    eta_a: float = Field(default=0.1, gt=0)
    fd_scale: float = Field(default=config.DEFAULT_FD_SCALE, gt=0)
    arch_optimizer: ArchOptimizerKind = ArchOptimizerKind.ADAM
    adam_lr: float = Field(default=config.ADAM_LR, gt=0)
    adam_weight_decay: float = Field(default=config.ADAM_WEIGHT_DECAY, ge=0)
    adam_betas: Tuple[float, float] = config.ADAM_BETAS
    adam_eps: float = Field(default=config.ADAM_EPS, gt=0)
    steps: int = Field(default=50, ge=0)
    batch_size: int = Field(default=64, ge=1)
    val_batch_size: Optional[int] = Field(default=None, ge=1)
    unlabeled_batch_size: Optional[int] = Field(default=None, ge=1)
    commit_inner_updates: bool = True
    shared_val_batch: bool = True
    harden_pseudo_labels: bool = False
    label_arch_pathway: bool = False
    first_order: bool = False
    patience: Optional[int] = Field(default=None, ge=1)
    eval_every: int = Field(default=10, ge=1)
    learner_seeds: Optional[List[int]] = None

    @model_validator(mode="after")
    def _check_seeds(self) -> "EngineConfig":
        if self.learner_seeds is not None and len(self.learner_seeds) != self.num_learners:
            raise ValueError("learner_seeds must list one seed per learner")
        return self

    @property
    def val_batch(self) -> int:
        return self.val_batch_size or self.batch_size

    @property
    def unlabeled_batch(self) -> int:
        return self.unlabeled_batch_size or self.batch_size

    def seeds_for_run(self, run_seed: int) -> List[int]:
        """Per-learner seeds; derived from the run seed unless listed explicitly."""
        if self.learner_seeds is not None:
            return list(self.learner_seeds)
        return [run_seed * config.LEARNER_SEED_STRIDE + k for k in range(self.num_learners)]


class ExperimentConfig(BaseModel):
    """Everything one experiment file specifies."""
    model_config = ConfigDict(extra="forbid")

    name: str = "sgl"
    engine: EngineConfig = Field(default_factory=EngineConfig)
    cell: CellSpec = Field(default_factory=CellSpec)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    seeds: List[int] = Field(default_factory=lambda: list(config.DEFAULT_SEEDS), min_length=1)
    output_dir: str = config.OUTPUT_DIR
    precision: Literal["f64", "f32"] = "f64"
    workers: int = Field(default=1, ge=1)
    retrain_steps: int = Field(default=200, ge=0)
    retrain_lr: float = Field(default=0.1, gt=0)
    emit_plots: bool = False

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        """Parse a JSON config, turning validation failures into field-level errors."""
        try:
            return cls.model_validate_json(text)
        except ValidationError as exc:
            fields = [
                f"{'.'.join(str(part) for part in error['loc']) or '<root>'}: {error['msg']}"
                for error in exc.errors()
            ]
            raise ConfigError("invalid experiment config", fields) from exc

    def to_text(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2) + "\n"

    def config_hash(self) -> str:
        """Hash of the sections that define the optimized model and data.

        The step budget is left out so a run can be resumed with a larger one.
        """
        payload = self.model_dump(mode="json", by_alias=True, include={"engine", "cell", "dataset", "precision"})
        payload["engine"].pop("steps", None)
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def dtype(self) -> str:
        return config.PRECISIONS[self.precision]


class GenotypeEntry(BaseModel):
    """One retained (incoming edge, operation) pair."""
    edge: int
    source: int
    op: CandidateOpKind
    weight: float


class NodeGenotype(BaseModel):
    node: int
    entries: List[GenotypeEntry]


class Genotype(BaseModel):
    """Discretized cell: the retained operations of every computed node."""
    k: int
    nodes: List[NodeGenotype]

    def entries_for(self, node: int) -> List[GenotypeEntry]:
        for item in self.nodes:
            if item.node == node:
                return item.entries
        return []

    def parametric_count(self) -> int:
        non_parametric = {CandidateOpKind.ZERO, CandidateOpKind.IDENTITY, CandidateOpKind.AVG_POOL}
        return sum(1 for item in self.nodes for entry in item.entries if entry.op not in non_parametric)


class LearnerMetrics(BaseModel):
    """Per-learner quantities observed in one step."""
    stage1_loss: Optional[float] = None
    stage2_objective: Optional[float] = None
    val_loss: float
    val_accuracy: float = Field(ge=0, le=1)
    own_grad_norm: Optional[float] = None


class MetricRecord(BaseModel):
    """One row of the metrics table."""
    step: int = Field(ge=0)
    learners: List[LearnerMetrics]
    cross_grad_norms: Dict[str, float] = Field(default_factory=dict)
    wall_time: float = 0.0


class GradcheckReport(BaseModel):
    """Analytic hypergradient versus central differences of the composed objective."""
    own_errors: List[float]
    cross_errors: Dict[str, float]
    total_error: float
    tolerance: float
    passed: bool
    num_weights: int
    num_arch_coords: int
    seconds: float


class SeedResult(BaseModel):
    seed: int
    steps_run: int
    val_error: float
    test_error: float
    learner_test_errors: List[float]


class RunManifest(BaseModel):
    """Written next to metrics.csv so readers can tell which layout they hold."""
    metrics_schema_version: int = config.METRICS_SCHEMA_VERSION
    name: str
    seed: int
    config_hash: str
    learner_seeds: List[int]
    steps_run: int
    first_order: bool


class RetrainResult(BaseModel):
    learner: int
    genotype: Genotype
    parametric_ops: int
    test_error: float


class SearchSummary(BaseModel):
    """Per-seed results and their mean and sample standard deviation."""
    name: str
    results: List[SeedResult]
    val_error_mean: float
    val_error_std: float
    test_error_mean: float
    test_error_std: float


class CompareReport(BaseModel):
    """Group search against the single-learner baseline over the same seeds."""
    sgl: SearchSummary
    baseline: SearchSummary

    @property
    def difference(self) -> float:
        return self.sgl.test_error_mean - self.baseline.test_error_mean
