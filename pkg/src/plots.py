"""Static HTML figures for finished runs."""

import logging
from pathlib import Path
from typing import Sequence, Union

import plotly.graph_objects as go

from src.models import MetricRecord, SearchSummary

logger = logging.getLogger(__name__)


def validation_curves(records: Sequence[MetricRecord], title: str = "Validation loss") -> go.Figure:
    """One line per learner: validation loss against step."""
    figure = go.Figure()
    if not records:
        return figure
    steps = [record.step for record in records]
    for k in range(len(records[0].learners)):
        figure.add_trace(go.Scatter(
            x=steps,
            y=[record.learners[k].val_loss for record in records],
            mode="lines+markers",
            name=f"learner {k}",
        ))
    figure.update_layout(title=title, xaxis_title="step", yaxis_title="cross-entropy", template="plotly_white")
    return figure


def cross_gradient_curves(records: Sequence[MetricRecord]) -> go.Figure:
    figure = go.Figure()
    pairs = sorted({pair for record in records for pair in record.cross_grad_norms})
    for pair in pairs:
        figure.add_trace(go.Scatter(
            x=[record.step for record in records if pair in record.cross_grad_norms],
            y=[record.cross_grad_norms[pair] for record in records if pair in record.cross_grad_norms],
            mode="lines",
            name=pair,
        ))
    figure.update_layout(title="Cross-learner hypergradient norms", xaxis_title="step",
                         yaxis_title="norm", yaxis_type="log", template="plotly_white")
    return figure


def comparison_bars(sgl: SearchSummary, baseline: SearchSummary) -> go.Figure:
    figure = go.Figure(go.Bar(
        x=[sgl.name, baseline.name],
        y=[sgl.test_error_mean, baseline.test_error_mean],
        error_y={"type": "data", "array": [sgl.test_error_std, baseline.test_error_std]},
    ))
    figure.update_layout(title="Test error (mean and std over seeds)", yaxis_title="error", template="plotly_white")
    return figure


def write_figure(figure: go.Figure, path: Union[str, Path]) -> Path:
    path = Path(path)
    figure.write_html(str(path), include_plotlyjs="cdn", full_html=True, config={"staticPlot": True})
    logger.info("figure written path=%s", path)
    return path
