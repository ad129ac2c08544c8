"""Seeded experiments: search, gradient check, baseline comparison and retraining."""

import logging
import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.autodiff import ParamVector, value_and_grad
from src.checkpoint import load_checkpoint, save_checkpoint
from src.config import config
from src.datasets import MinibatchSampler, TaskData, build_task_data, concat
from src.exceptions import CheckpointError, ConfigError, OracleBudgetError
from src.hypergradient import numeric_gradient, relative_error
from src.learner import NetworkSpec, evaluate, hard_ce_loss, init_weights
from src.models import (
    ArchOptimizerKind,
    CompareReport,
    ExperimentConfig,
    GradcheckReport,
    MetricRecord,
    RetrainResult,
    RunManifest,
    SearchSummary,
    SeedResult,
)
from src.plots import comparison_bars, cross_gradient_curves, validation_curves, write_figure
from src.search_space import derive_genotype
from src.sgl_engine import (
    GroupState,
    advance,
    arch_gradients,
    composed_terms,
    draw_batches,
    evaluate_group,
    flat_arch,
    init_group,
    inner_updates,
)

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("stage1_loss", "stage2_objective", "val_loss", "val_accuracy", "own_grad_norm")


def _fmt(value: Optional[float]) -> str:
    """Shortest round-tripping decimal; empty for missing values."""
    if value is None:
        return ""
    return repr(float(value))


def metric_columns(num_learners: int) -> List[str]:
    columns = ["step"]
    for k in range(num_learners):
        columns += [f"k{k}_{name}" for name in METRIC_FIELDS]
    columns += [f"cross_{k}<-{j}" for k in range(num_learners) for j in range(num_learners) if j != k]
    return columns


def metric_row(record: MetricRecord, num_learners: int) -> Dict[str, str]:
    row = {"step": str(record.step)}
    for k, learner in enumerate(record.learners):
        for name in METRIC_FIELDS:
            row[f"k{k}_{name}"] = _fmt(getattr(learner, name))
    for k in range(num_learners):
        for j in range(num_learners):
            if j != k:
                row[f"cross_{k}<-{j}"] = _fmt(record.cross_grad_norms.get(f"{k}<-{j}"))
    return row


def mean_std(values: List[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (zero for a single value)."""
    array = np.asarray(values, dtype=np.float64)
    std = float(array.std(ddof=1)) if len(array) > 1 else 0.0
    return float(array.mean()), std


class ExperimentRunner:
    """Runs one experiment config; every seed gets its own output directory."""

    def __init__(self, experiment: ExperimentConfig, config_text: Optional[str] = None):
        self.experiment = experiment
        self.config_text = config_text if config_text is not None else experiment.to_text()
        self.dtype = np.dtype(experiment.dtype)
        self._data: Optional[TaskData] = None

    @property
    def root(self) -> Path:
        return Path(self.experiment.output_dir) / self.experiment.name

    def run_dir(self, seed: int) -> Path:
        return self.root / f"seed-{seed}"

    def task_data(self) -> TaskData:
        if self._data is None:
            self._data = build_task_data(self.experiment.dataset, self.dtype)
        return self._data

    def network(self) -> NetworkSpec:
        data = self.task_data()
        return NetworkSpec(self.experiment.cell, data.input_dim, data.num_classes)

    # Search

    def run_search(self, resume: Optional[Path] = None) -> SearchSummary:
        """Search under every configured seed and write summary.csv.

        A checkpoint belongs to a single seed, so `resume` needs exactly one.
        """
        if resume is not None and len(self.experiment.seeds) != 1:
            raise ConfigError(f"resume needs exactly one seed, got {len(self.experiment.seeds)}", ["seeds"])
        results = [self._search_seed(seed, resume) for seed in self.experiment.seeds]
        summary = self._summarize(results)
        self._write_summary(summary)
        logger.info("search name=%s seeds=%d test_error=%.4f+-%.4f", summary.name, len(results),
                    summary.test_error_mean, summary.test_error_std)
        return summary

    def _search_seed(self, seed: int, resume: Optional[Path] = None) -> SeedResult:
        experiment, engine = self.experiment, self.experiment.engine
        data, net = self.task_data(), self.network()
        run_dir = self.run_dir(seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        with open(run_dir / "config.copy", "w", encoding="utf-8", newline="") as handle:
            handle.write(self.config_text)

        config_hash = experiment.config_hash()
        rows: List[Dict[str, str]] = []
        timings: List[Dict[str, str]] = []
        records: List[MetricRecord] = []
        if resume is not None:
            group = load_checkpoint(resume, net, config_hash)
            expected = engine.seeds_for_run(seed)
            if [learner.seed for learner in group.learners] != expected:
                raise CheckpointError(
                    f"{resume}: learner seeds {[l.seed for l in group.learners]} do not belong to seed {seed} "
                    f"(expected {expected})"
                )
            rows, timings = self._previous_rows(run_dir, group.step)
        else:
            group = init_group(engine, net, seed, data, self.dtype)
            initial = MetricRecord(step=0, learners=evaluate_group(group, data.val))
            records.append(initial)
            rows.append(metric_row(initial, group.size))

        logger.info("search seed=%d start_step=%d steps=%d dir=%s", seed, group.step, engine.steps, run_dir)
        try:
            while group.step < engine.steps:
                started = time.perf_counter()
                group, record, _ = advance(group, engine, data, workers=experiment.workers)
                record.wall_time = time.perf_counter() - started
                records.append(record)
                rows.append(metric_row(record, group.size))
                timings.append({"step": str(record.step), "wall_time": _fmt(record.wall_time)})
                for k, learner in enumerate(record.learners):
                    logger.debug("step=%d learner=%d val_loss=%.6f own_grad_norm=%.4g",
                                 record.step, k, learner.val_loss, learner.own_grad_norm or 0.0)
                if self._should_stop(group, data):
                    logger.info("early stop seed=%d step=%d best_val=%.6f", seed, group.step, group.best_val)
                    break
        finally:
            self._write_table(run_dir / "metrics.csv", rows, metric_columns(group.size))
            self._write_table(run_dir / "timing.csv", timings, ["step", "wall_time"])

        save_checkpoint(group, run_dir / "final.ckpt", config_hash)
        manifest = RunManifest(name=experiment.name, seed=seed, config_hash=config_hash,
                               learner_seeds=[learner.seed for learner in group.learners],
                               steps_run=group.step, first_order=engine.first_order)
        (run_dir / "run.json").write_text(manifest.model_dump_json(indent=2) + "\n")
        for learner in group.learners:
            genotype = derive_genotype(learner.arch, experiment.cell)
            (run_dir / f"genotype-k{learner.index}.json").write_text(genotype.model_dump_json(indent=2) + "\n")
        if experiment.emit_plots and records:
            write_figure(validation_curves(records), run_dir / "validation.html")
            write_figure(cross_gradient_curves(records), run_dir / "cross_grads.html")

        val_errors = [1.0 - m.val_accuracy for m in evaluate_group(group, data.val)]
        test_errors = [1.0 - m.val_accuracy for m in evaluate_group(group, data.test)]
        result = SeedResult(
            seed=seed,
            steps_run=group.step,
            val_error=float(np.mean(val_errors)),
            test_error=float(np.mean(test_errors)),
            learner_test_errors=test_errors,
        )
        logger.info("seed=%d steps=%d val_error=%.4f test_error=%.4f", seed, group.step,
                    result.val_error, result.test_error)
        return result

    def _should_stop(self, group: GroupState, data: TaskData) -> bool:
        """Plateau check on the full validation loss every `eval_every` steps."""
        engine = self.experiment.engine
        if engine.patience is None or group.step % engine.eval_every != 0:
            return False
        current = float(np.mean([m.val_loss for m in evaluate_group(group, data.val)]))
        if group.best_val is None or current < group.best_val:
            group.best_val = current
            group.stale_evals = 0
            return False
        group.stale_evals += 1
        return group.stale_evals >= engine.patience

    @staticmethod
    def _previous_rows(run_dir: Path, step: int) -> Tuple[List[Dict[str, str]], List[Dict[str, str]]]:
        tables = []
        for name in ("metrics.csv", "timing.csv"):
            path = run_dir / name
            if not path.exists():
                tables.append([])
                continue
            frame = pd.read_csv(path, dtype=str, keep_default_na=False)
            frame = frame[frame["step"].astype(int) <= step]
            tables.append(frame.to_dict(orient="records"))
        return tables[0], tables[1]

    @staticmethod
    def _write_table(path: Path, rows: List[Dict[str, str]], columns: List[str]) -> None:
        frame = pd.DataFrame(rows, columns=columns).fillna("")
        frame.to_csv(path, index=False, lineterminator="\n")

    def _summarize(self, results: List[SeedResult]) -> SearchSummary:
        val_mean, val_std = mean_std([r.val_error for r in results])
        test_mean, test_std = mean_std([r.test_error for r in results])
        return SearchSummary(
            name=self.experiment.name,
            results=results,
            val_error_mean=val_mean,
            val_error_std=val_std,
            test_error_mean=test_mean,
            test_error_std=test_std,
        )

    def _write_summary(self, summary: SearchSummary) -> None:
        rows = [
            {"seed": str(r.seed), "steps_run": str(r.steps_run), "val_error": _fmt(r.val_error),
             "test_error": _fmt(r.test_error)}
            for r in summary.results
        ]
        rows.append({"seed": "mean", "steps_run": "", "val_error": _fmt(summary.val_error_mean),
                     "test_error": _fmt(summary.test_error_mean)})
        rows.append({"seed": "std", "steps_run": "", "val_error": _fmt(summary.val_error_std),
                     "test_error": _fmt(summary.test_error_std)})
        self.root.mkdir(parents=True, exist_ok=True)
        self._write_table(self.root / "summary.csv", rows, ["seed", "steps_run", "val_error", "test_error"])

    # Gradient check

    def oracle_instance(self) -> ExperimentConfig:
        """The configured instance forced to float64 and shrunk into the oracle budget."""
        experiment = self.experiment
        if experiment.precision != "f64":
            logger.warning("gradcheck forces f64 precision (config asked for %s)", experiment.precision)
        if experiment.engine.first_order:
            logger.warning("gradcheck certifies the unrolled gradient; first_order is switched off")
        engine = experiment.engine.model_copy(update={"arch_optimizer": ArchOptimizerKind.PLAIN, "first_order": False})
        batch_updates = {}
        for name, size in (("batch_size", engine.batch_size), ("val_batch_size", engine.val_batch),
                           ("unlabeled_batch_size", engine.unlabeled_batch)):
            if size > config.ORACLE_MAX_BATCH:
                logger.warning("gradcheck shrinks %s from %d to %d", name, size, config.ORACLE_MAX_BATCH)
                batch_updates[name] = config.ORACLE_MAX_BATCH
        engine = engine.model_copy(update=batch_updates)

        data = build_task_data(experiment.dataset, np.float64)
        cell = experiment.cell
        net = NetworkSpec(cell, data.input_dim, data.num_classes)
        while ParamVector(net.weight_layout()).size > config.ORACLE_MAX_WEIGHTS and cell.width > 1:
            cell = cell.model_copy(update={"width": cell.width - 1})
            net = NetworkSpec(cell, data.input_dim, data.num_classes)
        if cell.width != experiment.cell.width:
            logger.warning("gradcheck shrinks cell width from %d to %d", experiment.cell.width, cell.width)

        weights = ParamVector(net.weight_layout()).size
        arch_coords = ParamVector(net.arch_layout()).size
        if weights > config.ORACLE_MAX_WEIGHTS or arch_coords > config.ORACLE_MAX_ARCH_COORDS:
            raise OracleBudgetError(
                f"gradcheck instance has {weights} weights and {arch_coords} arch coordinates per learner; "
                f"the oracle allows {config.ORACLE_MAX_WEIGHTS} and {config.ORACLE_MAX_ARCH_COORDS}. "
                "Reduce num_nodes, the op list or the input dimension."
            )
        return experiment.model_copy(update={"engine": engine, "cell": cell, "precision": "f64"})

    def run_gradcheck(self, seed: Optional[int] = None, own_correction_sign: float = 1.0) -> GradcheckReport:
        """Analytic stage-3 gradients against central differences of the composed objective."""
        started = time.perf_counter()
        experiment = self.oracle_instance()
        engine = experiment.engine
        seed = experiment.seeds[0] if seed is None else seed
        data = build_task_data(experiment.dataset, np.float64)
        net = NetworkSpec(experiment.cell, data.input_dim, data.num_classes)
        group = init_group(engine, net, seed, data, np.float64)
        batches = draw_batches(group, data)

        learners = group.learners
        snapshot = inner_updates(learners, [l.arch for l in learners], [l.arch for l in learners], batches, engine)
        grads = arch_gradients(learners, snapshot, batches, engine, own_correction_sign=own_correction_sign)
        # jacobian[j, :] = d(term_j) / d(all arch coordinates)
        jacobian = numeric_gradient(lambda values: composed_terms(group, batches, engine, values), flat_arch(group))

        offsets = np.cumsum([0] + [l.arch.size for l in learners])
        block = {k: slice(offsets[k], offsets[k + 1]) for k in range(group.size)}
        own_errors = [relative_error(grads.own[k].gradient.values, jacobian[k, block[k]]) for k in range(group.size)]
        cross_errors = {
            f"{k}<-{j}": relative_error(gradient.values, jacobian[j, block[k]])
            for (k, j), gradient in sorted(grads.cross.items())
        }
        analytic_total = np.concatenate([total.values for total in grads.totals])
        total_error = relative_error(analytic_total, jacobian.sum(axis=0))

        report = GradcheckReport(
            own_errors=own_errors,
            cross_errors=cross_errors,
            total_error=total_error,
            tolerance=config.GRADCHECK_TOLERANCE,
            passed=total_error <= config.GRADCHECK_TOLERANCE,
            num_weights=learners[0].num_weights(),
            num_arch_coords=learners[0].arch.size,
            seconds=time.perf_counter() - started,
        )
        logger.info("gradcheck total_error=%.3e passed=%s weights=%d arch_coords=%d seconds=%.2f",
                    report.total_error, report.passed, report.num_weights, report.num_arch_coords, report.seconds)
        return report

    # Comparison

    def baseline_experiment(self) -> ExperimentConfig:
        """The same experiment with a single learner."""
        engine = self.experiment.engine
        seeds = None if engine.learner_seeds is None else engine.learner_seeds[:1]
        baseline_engine = engine.model_copy(update={"num_learners": 1, "learner_seeds": seeds})
        return self.experiment.model_copy(update={"engine": baseline_engine, "name": f"{self.experiment.name}-baseline"})

    def run_compare(self) -> CompareReport:
        """Group search and single-learner baseline over the same seeds and step budget."""
        sgl_runner = ExperimentRunner(self.experiment, self.config_text)
        sgl_runner._data = self._data
        baseline = self.baseline_experiment()
        baseline_runner = ExperimentRunner(baseline)
        baseline_runner._data = self.task_data()
        report = CompareReport(sgl=sgl_runner.run_search(), baseline=baseline_runner.run_search())
        logger.info("compare sgl=%.4f+-%.4f baseline=%.4f+-%.4f difference=%.4f",
                    report.sgl.test_error_mean, report.sgl.test_error_std,
                    report.baseline.test_error_mean, report.baseline.test_error_std, report.difference)
        if self.experiment.emit_plots:
            write_figure(comparison_bars(report.sgl, report.baseline), self.root / "compare.html")
        return report

    # Genotype derivation and retraining

    def derive_and_retrain(self, checkpoint: Path, retrain_steps: Optional[int] = None) -> List[RetrainResult]:
        """Retrain every learner's derived genotype from scratch on train+val and report test error."""
        experiment = self.experiment
        steps = experiment.retrain_steps if retrain_steps is None else retrain_steps
        data, net = self.task_data(), self.network()
        group = load_checkpoint(checkpoint, net, experiment.config_hash())
        pool = concat(data.train, data.val)
        results = []
        for learner in group.learners:
            genotype = derive_genotype(learner.arch, experiment.cell)
            if genotype.parametric_count() == 0:
                logger.warning("learner=%d genotype has no parametric operations; retraining anyway", learner.index)
            discrete = net.discrete(genotype)
            weights = self.retrain(discrete, pool, steps, seed=learner.seed)
            _, acc = evaluate(weights, None, discrete, data.test)
            results.append(RetrainResult(learner=learner.index, genotype=genotype,
                                         parametric_ops=genotype.parametric_count(), test_error=1.0 - acc))
            logger.info("retrain learner=%d steps=%d test_error=%.4f", learner.index, steps, 1.0 - acc)
        return results

    def retrain(self, discrete: NetworkSpec, pool, steps: int, seed: int) -> ParamVector:
        """Plain minibatch SGD on a fixed genotype network."""
        rng = np.random.default_rng(seed)
        weights = init_weights(discrete, rng, self.dtype)
        sampler = MinibatchSampler(len(pool), self.experiment.engine.batch_size, rng)
        no_arch = ParamVector([], dtype=self.dtype)
        for _ in range(steps):
            batch = sampler.minibatch(pool)
            _, gradient = value_and_grad(lambda _arch, w: hard_ce_loss(w, None, discrete, batch), no_arch, weights)
            weights = weights.shifted(gradient, -self.experiment.retrain_lr)
        return weights
