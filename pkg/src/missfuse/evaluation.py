"""Metrics and the 14-scenario missing-modality evaluation sweep.

Regression outputs are scored as binary sentiment: a prediction is positive
iff it exceeds 0, samples with label exactly 0 are excluded, and calibration
uses the sigmoid of the raw output. Multiclass outputs use support-weighted
recall/F1 and one-vs-all one-hot averaging for Brier/NLL.

The canonical scenario suite is seven fixed availability patterns plus seven
random-drop missing rates (0.1 through 0.7); every evaluation runs the model
in deterministic mean mode, so fixed scenarios are exactly reproducible and
random scenarios are reproducible given the seed.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .backbone import Checkpoint, MultimodalBackbone
from .datamodel import CombinationId, Sample
from .synthdata import apply_fixed, apply_random
from .training import tensors_from_samples

PROB_FLOOR = 1e-12
CSV_COLUMNS = ("scenario", "label", "seed", "acc", "f1", "brier", "nll")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _binary_subset(preds: np.ndarray, labels: np.ndarray):
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError("prediction/label lengths must match")
    if not np.isfinite(preds).all():
        raise ValueError("non-finite predictions")
    keep = labels != 0
    if not keep.any():
        raise ValueError("all labels are zero; binary metrics undefined")
    return preds[keep], labels[keep]


def binary_metrics(preds, labels) -> tuple[float, float]:
    """Accuracy and positive-class F1; positive iff value > 0, zero labels excluded."""
    p, y = _binary_subset(preds, labels)
    pred_pos = p > 0
    true_pos = y > 0
    acc = float((pred_pos == true_pos).mean())
    tp = int((pred_pos & true_pos).sum())
    fp = int((pred_pos & ~true_pos).sum())
    fn = int((~pred_pos & true_pos).sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    return acc, float(f1)


def weighted_multiclass_metrics(logits, labels) -> tuple[float, float]:
    """Support-weighted per-class recall and F1 (classes with zero support drop out)."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError("need an (N, K>=2) logits matrix")
    if logits.shape[0] != labels.shape[0]:
        raise ValueError("prediction/label lengths must match")
    preds = logits.argmax(axis=1)
    n = labels.shape[0]
    w_recall = 0.0
    w_f1 = 0.0
    for c in range(logits.shape[1]):
        support = int((labels == c).sum())
        if support == 0:
            continue
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        recall = tp / support
        precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        w_recall += support / n * recall
        w_f1 += support / n * f1
    return float(w_recall), float(w_f1)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=1, keepdims=True)


def brier_score(preds, labels, kind: str) -> float:
    """Mean squared gap between predicted probability and the (one-hot) outcome."""
    if kind == "regression":
        z, y = _binary_subset(preds, labels)
        p = _sigmoid(z)
        t = (y > 0).astype(np.float64)
        return float(((p - t) ** 2).mean())
    if kind == "classification":
        logits = np.asarray(preds, dtype=np.float64)
        labels = np.asarray(labels).astype(np.int64).reshape(-1)
        if logits.shape[0] == 0:
            raise ValueError("empty evaluation set")
        p = _softmax(logits)
        onehot = np.eye(logits.shape[1])[labels]
        return float(((p - onehot) ** 2).mean())
    raise ValueError(f"unknown task kind {kind!r}")


def nll_score(preds, labels, kind: str) -> float:
    """Mean negative log-likelihood (natural log, probabilities clamped)."""
    if kind == "regression":
        z, y = _binary_subset(preds, labels)
        p = np.clip(_sigmoid(z), PROB_FLOOR, 1.0 - PROB_FLOOR)
        t = (y > 0).astype(np.float64)
        return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())
    if kind == "classification":
        logits = np.asarray(preds, dtype=np.float64)
        labels = np.asarray(labels).astype(np.int64).reshape(-1)
        if logits.shape[0] == 0:
            raise ValueError("empty evaluation set")
        p = np.clip(_softmax(logits), PROB_FLOOR, 1.0 - PROB_FLOOR)
        onehot = np.eye(logits.shape[1])[labels]
        return float(-(onehot * np.log(p) + (1.0 - onehot) * np.log(1.0 - p)).mean())
    raise ValueError(f"unknown task kind {kind!r}")


def compute_metrics(logits: np.ndarray, labels: np.ndarray, kind: str) -> dict:
    if kind == "regression":
        acc, f1 = binary_metrics(logits, labels)
        n_eval = int((np.asarray(labels).reshape(-1) != 0).sum())
    else:
        acc, f1 = weighted_multiclass_metrics(logits, labels)
        n_eval = int(np.asarray(labels).reshape(-1).shape[0])
    return {
        "acc": acc,
        "f1": f1,
        "brier": brier_score(logits, labels, kind),
        "nll": nll_score(logits, labels, kind),
        "n_eval": n_eval,
    }


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str  # "fixed" | "random"
    label: str
    pattern: Optional[CombinationId] = None
    mr: Optional[float] = None

    def __post_init__(self):
        if self.kind == "fixed":
            if self.pattern is None or self.mr is not None:
                raise ValueError("fixed scenario needs a pattern and no mr")
        elif self.kind == "random":
            if self.mr is None or self.pattern is not None:
                raise ValueError("random scenario needs an mr and no pattern")
        else:
            raise ValueError(f"unknown scenario kind {self.kind!r}")


@dataclass
class ScenarioResult:
    scenario: ScenarioSpec
    seed: int
    acc: float = math.nan
    f1: float = math.nan
    brier: float = math.nan
    nll: float = math.nan
    n_eval: int = 0
    error: Optional[str] = None


FIXED_LABEL_ORDER = ("L", "V", "A", "L,V", "L,A", "A,V", "L,A,V")
RANDOM_MRS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


def default_scenarios(m: int = 3) -> list[ScenarioSpec]:
    """Seven fixed patterns plus seven random missing rates."""
    fixed: list[ScenarioSpec] = []
    if m == 3:
        for label in FIXED_LABEL_ORDER:
            fixed.append(
                ScenarioSpec(kind="fixed", label=label, pattern=CombinationId.from_names(label, m))
            )
    else:
        for cid in sorted(range(1, 1 << m), key=lambda c: (bin(c).count("1"), c)):
            comb = CombinationId(cid)
            fixed.append(ScenarioSpec(kind="fixed", label=comb.names(m), pattern=comb))
    random = [ScenarioSpec(kind="random", label=f"{mr:.1f}", mr=mr) for mr in RANDOM_MRS]
    return fixed + random


def parse_scenario_filter(spec: str, m: int = 3) -> list[ScenarioSpec]:
    """Parse e.g. "fixed:L,A" or "random:0.3" or "all" into scenario specs."""
    spec = spec.strip()
    if spec in ("", "all"):
        return default_scenarios(m)
    out = []
    for chunk in spec.split(";"):
        chunk = chunk.strip()
        if ":" not in chunk:
            raise ValueError(f"bad scenario filter {chunk!r}; use kind:value")
        kind, value = chunk.split(":", 1)
        kind = kind.strip()
        value = value.strip()
        if kind == "fixed":
            out.append(ScenarioSpec(kind="fixed", label=value, pattern=CombinationId.from_names(value, m)))
        elif kind == "random":
            mr = float(value)
            out.append(ScenarioSpec(kind="random", label=f"{mr:.1f}", mr=mr))
        else:
            raise ValueError(f"unknown scenario kind {kind!r}")
    return out


def _scenario_samples(samples: Sequence[Sample], spec: ScenarioSpec, seed: int, index: int):
    if spec.kind == "fixed":
        return apply_fixed(samples, spec.pattern)
    # Targets above the per-sample feasibility cap (every sample keeps one
    # modality) evaluate at the cap; the scenario keeps its requested label.
    m = samples[0].mask.m
    mr = min(spec.mr, (m - 1) / m) if spec.mr > 0 else spec.mr
    mask_seed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
    return apply_random(samples, target_mr=mr, seed=mask_seed)


def evaluate_logits(
    model: MultimodalBackbone, samples: Sequence[Sample], batch_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (mean-mode) logits and labels over a sample list."""
    feats, masks, labels = tensors_from_samples(samples)
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, labels.shape[0], batch_size):
            sl = slice(start, start + batch_size)
            out = model([f[sl] for f in feats], masks[sl], mode="mean")
            chunks.append(out.logits.numpy())
    return np.concatenate(chunks, axis=0), labels.numpy()


def run_suite(
    model: Checkpoint | MultimodalBackbone,
    samples: Sequence[Sample],
    scenarios: Optional[Sequence[ScenarioSpec]] = None,
    seeds: Sequence[int] = (0,),
    batch_size: int = 256,
) -> list[ScenarioResult]:
    """Evaluate each scenario x seed; per-scenario failures are recorded, not raised."""
    if isinstance(model, Checkpoint):
        net = model.build_model()
    else:
        net = model
    kind = net.config.task
    if scenarios is None:
        scenarios = default_scenarios(net.config.m)
    if any(s.mask.available_count != s.mask.m for s in samples):
        raise ValueError("evaluation dataset must be complete; scenarios impose the masks")
    results = []
    for index, spec in enumerate(scenarios):
        for seed in seeds:
            try:
                masked = _scenario_samples(samples, spec, seed, index)
                logits, labels = evaluate_logits(net, masked, batch_size=batch_size)
                metrics = compute_metrics(logits, labels, kind)
                results.append(
                    ScenarioResult(
                        scenario=spec,
                        seed=seed,
                        acc=metrics["acc"],
                        f1=metrics["f1"],
                        brier=metrics["brier"],
                        nll=metrics["nll"],
                        n_eval=metrics["n_eval"],
                    )
                )
            except Exception as exc:  # per-scenario isolation
                results.append(ScenarioResult(scenario=spec, seed=seed, error=str(exc)))
    return results


# ---------------------------------------------------------------------------
# Aggregation and serialization
# ---------------------------------------------------------------------------

METRIC_NAMES = ("acc", "f1", "brier", "nll")


@dataclass
class SummaryRow:
    scenario: ScenarioSpec
    n_seeds: int
    mean: dict
    ci95: dict


@dataclass
class SuiteSummary:
    rows: list[SummaryRow]
    avg: dict
    errors: list[dict]

    def row_by_label(self, label: str) -> SummaryRow:
        for row in self.rows:
            if row.scenario.label == label:
                return row
        raise KeyError(label)


def summarize(results: Sequence[ScenarioResult]) -> SuiteSummary:
    """Per-scenario mean and 95% CI over seeds, plus the unweighted Avg row."""
    order: list[ScenarioSpec] = []
    grouped: dict[ScenarioSpec, list[ScenarioResult]] = {}
    errors = []
    for res in results:
        if res.error is not None:
            errors.append({"label": res.scenario.label, "seed": res.seed, "error": res.error})
            continue
        if res.scenario not in grouped:
            order.append(res.scenario)
            grouped[res.scenario] = []
        grouped[res.scenario].append(res)
    rows = []
    for spec in order:
        group = grouped[spec]
        mean = {}
        ci = {}
        for name in METRIC_NAMES:
            vals = np.array([getattr(r, name) for r in group], dtype=np.float64)
            mean[name] = float(vals.mean())
            if len(vals) > 1:
                ci[name] = float(1.96 * vals.std(ddof=1) / math.sqrt(len(vals)))
            else:
                ci[name] = 0.0
        rows.append(SummaryRow(scenario=spec, n_seeds=len(group), mean=mean, ci95=ci))
    if rows:
        avg = {
            name: float(np.mean([row.mean[name] for row in rows])) for name in METRIC_NAMES
        }
    else:
        avg = {name: math.nan for name in METRIC_NAMES}
    return SuiteSummary(rows=rows, avg=avg, errors=errors)


def write_results_csv(results: Sequence[ScenarioResult], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for res in results:
            writer.writerow(
                [
                    res.scenario.kind,
                    res.scenario.label,
                    res.seed,
                    repr(res.acc),
                    repr(res.f1),
                    repr(res.brier),
                    repr(res.nll),
                ]
            )
    return path


def write_summary_csv(summary: SuiteSummary, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "label", "n_seeds"] + list(METRIC_NAMES))
        for row in summary.rows:
            writer.writerow(
                [row.scenario.kind, row.scenario.label, row.n_seeds]
                + [repr(row.mean[name]) for name in METRIC_NAMES]
            )
        writer.writerow(
            ["avg", "Avg.", ""] + [repr(summary.avg[name]) for name in METRIC_NAMES]
        )
    return path


def summary_payload(summary: SuiteSummary, extra: Optional[dict] = None) -> dict:
    payload = {
        "rows": [
            {
                "kind": row.scenario.kind,
                "label": row.scenario.label,
                "n_seeds": row.n_seeds,
                "mean": row.mean,
                "ci95": row.ci95,
            }
            for row in summary.rows
        ],
        "avg": summary.avg,
        "errors": summary.errors,
    }
    if extra:
        payload.update(extra)
    return payload


def write_summary_json(summary: SuiteSummary, path: str | Path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary_payload(summary, extra), indent=2, sort_keys=True))
    return path


def plot_mr_curves(summary: SuiteSummary, path: str | Path) -> Optional[Path]:
    """Calibration-vs-missing-rate curves over the random scenarios."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in summary.rows if r.scenario.kind == "random"]
    if not rows:
        return None
    mrs = [r.scenario.mr for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, metric in zip(axes, ("nll", "brier")):
        vals = [r.mean[metric] for r in rows]
        errs = [r.ci95[metric] for r in rows]
        ax.errorbar(mrs, vals, yerr=errs, marker="o")
        ax.set_xlabel("missing rate")
        ax.set_ylabel(metric.upper())
        ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_scenario_bars(summary: SuiteSummary, path: str | Path) -> Optional[Path]:
    """Per-scenario accuracy/F1 bar chart."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not summary.rows:
        return None
    labels = [r.scenario.label for r in summary.rows]
    x = np.arange(len(labels))
    fig, ax = plt.subplots(figsize=(max(6, 0.7 * len(labels)), 3.5))
    ax.bar(x - 0.2, [r.mean["acc"] for r in summary.rows], width=0.4, label="ACC")
    ax.bar(x + 0.2, [r.mean["f1"] for r in summary.rows], width=0.4, label="F1")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
