"""Evaluation: Dice, lesion-wise F1, volume trajectories, paired t-tests, reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage, stats

from .core import DEFAULT_THRESHOLD, LABEL_KEYS, DatasetManifest, ValidationError, binarize, write_json
from .losses import HEAD_FOR_LABEL

# connectivity -> scipy rank of the structuring element
_CONNECTIVITY = {6: 1, 18: 2, 26: 3}

# tasks reported per dataset when none are requested; mirrors which outputs
# each annotation style can be scored on
DEFAULT_TASKS = {
    "PH-2015": ("all_t1", "all_t2"),
    "PH-2016": ("all_t1",),
    "PH-SEG2": ("new_t2",),
    "PH-SEG2+": ("all_t1", "new_t2"),
    "PH-VAN": ("vanish_t2",),
}
METRICS = ("dice", "f1")


def _pair(pred, gt, threshold):
    a, b = binarize(pred, threshold), binarize(gt, threshold)
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def dice_score(pred, gt, threshold: float = DEFAULT_THRESHOLD) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a, b = _pair(pred, gt, threshold)
    s = int(a.sum()) + int(b.sum())
    if s == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / s


@dataclass(frozen=True)
class LesionMatchResult:
    tp: int
    fp: int
    fn: int
    detected_gt: int
    n_pred: int
    n_gt: int
    matched: tuple[tuple[int, int, int], ...] = field(repr=False)

    @property
    def precision(self) -> float:
        return self.tp / self.n_pred if self.n_pred else 1.0

    @property
    def recall(self) -> float:
        return self.detected_gt / self.n_gt if self.n_gt else 1.0

    @property
    def f1(self) -> float:
        """``2 tp / (2 tp + fp + fn)``; two empty masks score 1."""
        denom = 2 * self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else 2 * self.tp / denom


def components(m, connectivity: int = 26) -> tuple[np.ndarray, int]:
    if connectivity not in _CONNECTIVITY:
        raise ValidationError(f"connectivity must be one of {sorted(_CONNECTIVITY)}")
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY[connectivity])
    return ndimage.label(m, structure=structure)


def lesion_f1(
    pred,
    gt,
    connectivity: int = 26,
    min_overlap_voxels: int = 1,
    threshold: float = DEFAULT_THRESHOLD,
) -> LesionMatchResult:
    """Component-wise detection scores.

    A ground-truth lesion is detected when some predicted component overlaps
    it by at least ``min_overlap_voxels``; predicted components with no such
    overlap are false positives and undetected lesions false negatives.
    ``tp`` counts matched predicted components, ``detected_gt`` matched
    ground-truth ones.
    """
    a, b = _pair(pred, gt, threshold)
    la, na = components(a, connectivity)
    lb, nb = components(b, connectivity)
    both = (la > 0) & (lb > 0)
    pairs, counts = np.unique(np.stack([la[both], lb[both]]), axis=1, return_counts=True)
    matched = tuple(
        (int(p), int(g), int(c)) for (p, g), c in zip(pairs.T, counts) if c >= min_overlap_voxels
    )
    tp = len({p for p, _, _ in matched})
    det = len({g for _, g, _ in matched})
    return LesionMatchResult(tp, na - tp, nb - det, det, na, nb, matched)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation; NaN when either sequence is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError("sequences differ in length")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        return math.nan
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


@dataclass(frozen=True)
class TrajectoryReport:
    pred_volumes: tuple[float, ...]
    gt_volumes: tuple[float, ...]
    rho: float

    @property
    def defined(self) -> bool:
        return not math.isnan(self.rho)


def volume_of(m, spacing=None, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Lesion volume in mm^3 of a mask or thresholded probability map."""
    sp = spacing if spacing is not None else getattr(m, "spacing", (1.0, 1.0, 1.0))
    return float(binarize(m, threshold).sum()) * float(np.prod(sp))


def volume_trajectory(pred_series, gt_series, spacing=None, threshold: float = DEFAULT_THRESHOLD) -> TrajectoryReport:
    if len(pred_series) != len(gt_series):
        raise ValidationError("prediction and ground-truth series differ in length")
    if len(pred_series) < 2:
        raise ValidationError("a trajectory needs at least two timepoints")
    pv = tuple(volume_of(p, spacing, threshold) for p in pred_series)
    gv = tuple(volume_of(g, spacing, threshold) for g in gt_series)
    return TrajectoryReport(pv, gv, pearson(pv, gv))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool


def paired_t_test(scores_a: Sequence[float], scores_b: Sequence[float]) -> TTestResult:
    """Two-sided paired Student t-test on ``a - b``.

    Zero variance of the differences is flagged ``degenerate`` with
    ``t = 0, p = 1`` (all equal) or ``t = +-inf, p = 0`` (constant shift).
    """
    a, b = np.asarray(scores_a, dtype=np.float64), np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("paired samples must be 1-D and equally long")
    n = a.size
    if n < 2:
        raise ValidationError("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0 or not math.isfinite(sd):
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n - 1, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n - 1, True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), n - 1))
    return TTestResult(t, p, n - 1, False)


def significance_stars(p: float) -> str:
    if p <= 0.005:
        return "***"
    if p <= 0.01:
        return "**"
    if p <= 0.05:
        return "*"
    return ""


def outside_wm_fraction(preds, wm, threshold: float = DEFAULT_THRESHOLD) -> float:
    """Share of predicted lesion voxels (over all given maps) outside WM."""
    inside_wm = binarize(wm)
    total = outside = 0
    for p in preds:
        m = binarize(p, threshold)
        total += int(m.sum())
        outside += int((m & ~inside_wm).sum())
    return outside / total if total else 0.0


# ---------------------------------------------------------------------------
# suite evaluation


def _summary(values: Sequence[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), sd


def evaluate_predictions(
    predictions: Mapping[str, Mapping[str, Mapping[tuple[int, int], object]]],
    oracle: Sequence[DatasetManifest],
    tasks: Sequence[str] | None = None,
    model: str = "ensemble",
    split: str = "test",
    connectivity: int = 26,
    min_overlap_voxels: int = 1,
    threshold: float = DEFAULT_THRESHOLD,
) -> list[dict]:
    """Score precomputed predictions against oracle labels.

    ``predictions[dataset][subject][pair]`` is a PredictionBundle. Requested
    tasks without oracle labels yield rows with ``mean = None`` (N/A).
    """
    rows = []
    for m in oracle:
        wanted = tasks or DEFAULT_TASKS.get(m.name, tuple(k for k in LABEL_KEYS if m.availability[k]))
        ds_preds = predictions.get(m.name, {})
        for task in wanted:
            available = bool(m.availability.get(task))
            per_case = {metric: [] for metric in METRICS}
            empty = 0
            cases = []
            if available:
                for rec in m.records_in(split):
                    for pair, ls in sorted(rec.labels.items()):
                        gt = getattr(ls, task)
                        pb = ds_preds.get(rec.subject_id, {}).get(pair)
                        if gt is None or pb is None:
                            continue
                        pred = getattr(pb, HEAD_FOR_LABEL[task]).data
                        if not binarize(pred, threshold).any() and not binarize(gt).any():
                            empty += 1
                        per_case["dice"].append(dice_score(pred, gt, threshold))
                        per_case["f1"].append(lesion_f1(pred, gt, connectivity, min_overlap_voxels, threshold).f1)
                        cases.append(f"{rec.subject_id}:{pair[0]}-{pair[1]}")
            for metric in METRICS:
                mean, sd = _summary(per_case[metric])
                rows.append(
                    {
                        "dataset": m.name,
                        "task": task,
                        "metric": metric,
                        "model": model,
                        "mean": mean,
                        "sd": sd,
                        "n": len(per_case[metric]),
                        "per_case": per_case[metric],
                        "cases": cases,
                        "empty_empty": empty,
                        "available": available and bool(per_case[metric]),
                    }
                )
    return rows


def evaluate_suite(
    checkpoints,
    manifests: Sequence[DatasetManifest],
    oracle: Sequence[DatasetManifest],
    tasks: Sequence[str] | None = None,
    split: str = "test",
    per_member: bool = True,
    overlap: float = 0.5,
    **metric_options,
) -> dict:
    """Per-dataset, per-task mean and sd of Dice and lesion-wise F1.

    ``checkpoints`` are checkpoint paths or networks; the ensemble is the
    voxelwise mean of member probabilities. With ``per_member`` each member
    also gets its own rows (``model = "fold<k>"``).
    """
    from .model import PredictionBundle, load_checkpoint
    from .trainer import predict

    nets = [load_checkpoint(c)[0] if isinstance(c, (str, Path)) else c for c in checkpoints]
    member_preds: list[dict] = [{} for _ in nets]
    ensemble: dict = {}
    for m in manifests:
        for rec in m.records_in(split):
            for k, net in enumerate(nets):
                for pair, pb in predict([net], rec, m.availability, overlap):
                    member_preds[k].setdefault(m.name, {}).setdefault(rec.subject_id, {})[pair] = pb
            pairs = member_preds[0][m.name][rec.subject_id]
            ensemble.setdefault(m.name, {})[rec.subject_id] = {
                pair: PredictionBundle.mean(mp[m.name][rec.subject_id][pair] for mp in member_preds) for pair in pairs
            }
    rows = []
    if per_member and len(nets) > 1:
        for k, preds in enumerate(member_preds):
            rows += evaluate_predictions(preds, oracle, tasks, f"fold{k}", split, **metric_options)
    rows += evaluate_predictions(ensemble, oracle, tasks, "ensemble", split, **metric_options)
    return {"split": split, "n_members": len(nets), "rows": rows}


def report_rows(report: dict, model: str = "ensemble", metric: str | None = None) -> list[dict]:
    return [r for r in report["rows"] if r["model"] == model and (metric is None or r["metric"] == metric)]


def _cell(row) -> str:
    if row["mean"] is None:
        return "N/A"
    return f"{100 * row['mean']:.2f} ± {100 * row['sd']:.2f}"


def format_table(report: dict, models: Sequence[str] | None = None) -> str:
    """Plain-text table of mean ± sd (percent) per model, dataset/task and metric."""
    rows = report["rows"]
    models = models or sorted({r["model"] for r in rows}, key=lambda m: (m == "ensemble", m))
    cols = []
    for r in rows:
        key = (r["dataset"], r["task"])
        if key not in cols:
            cols.append(key)
    lines = []
    for metric in METRICS:
        header = [f"{metric:<10}"] + [f"{d}/{t}" for d, t in cols]
        lines.append(" | ".join(header))
        for model in models:
            cells = {(r["dataset"], r["task"]): _cell(r) for r in rows if r["model"] == model and r["metric"] == metric}
            lines.append(" | ".join([f"{model:<10}"] + [cells.get(c, "") for c in cols]))
        lines.append("")
    empties = sum(r["empty_empty"] for r in rows if r["metric"] == "dice" and r["model"] == "ensemble")
    if empties:
        lines.append(f"note: {empties} empty/empty case(s) scored 1 by convention")
    return "\n".join(lines).rstrip() + "\n"


def compare_reports(report_a: dict, report_b: dict, model: str = "ensemble") -> list[dict]:
    """Paired t-tests between two reports over matching per-case scores."""
    b_rows = {(r["dataset"], r["task"], r["metric"]): r for r in report_rows(report_b, model)}
    out = []
    for ra in report_rows(report_a, model):
        key = (ra["dataset"], ra["task"], ra["metric"])
        rb = b_rows.get(key)
        row = {"dataset": key[0], "task": key[1], "metric": key[2], "mean_a": ra["mean"], "mean_b": None}
        if rb is None or ra["mean"] is None or rb["mean"] is None or ra.get("cases") != rb.get("cases") or ra["n"] < 2:
            row.update({"t": None, "p": None, "degenerate": True, "stars": ""})
        else:
            res = paired_t_test(ra["per_case"], rb["per_case"])
            row.update(
                {
                    "mean_b": rb["mean"],
                    "t": None if math.isinf(res.t) else res.t,
                    "p": res.p,
                    "degenerate": res.degenerate,
                    "stars": significance_stars(res.p),
                }
            )
        out.append(row)
    return out


def ablation_table(reports: Mapping[str, dict], metric: str = "dice", model: str = "ensemble") -> dict:
    """``{config label: {"dataset/task": mean}}`` for side-by-side ablations."""
    return {
        label: {f"{r['dataset']}/{r['task']}": r["mean"] for r in report_rows(rep, model, metric)}
        for label, rep in reports.items()
    }


def format_ablation(table: Mapping[str, Mapping[str, float | None]]) -> str:
    cols = []
    for vals in table.values():
        for c in vals:
            if c not in cols:
                cols.append(c)
    lines = [" | ".join(["config"] + cols)]
    for label, vals in table.items():
        cells = ["N/A" if vals.get(c) is None else f"{100 * vals[c]:.2f}" for c in cols]
        lines.append(" | ".join([label] + cells))
    return "\n".join(lines) + "\n"


def write_report(report: dict, json_path, table_path=None) -> None:
    write_json(report, json_path)
    if table_path is not None:
        Path(table_path).write_text(format_table(report))


# ---------------------------------------------------------------------------
# plots


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "hetseg"
    # keep labels as searchable text rather than glyph paths
    matplotlib.rcParams["svg.fonttype"] = "none"
    return plt


def _save_svg(fig, path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_trajectories(reports: Mapping[str, TrajectoryReport], path, title: str = "Lesion volume") -> None:
    """Line chart of predicted vs ground-truth volume (ml) per subject, with rho."""
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, (label, rep) in enumerate(reports.items()):
        color = f"C{k % 10}"
        x = np.arange(1, len(rep.gt_volumes) + 1)
        rho = "undefined" if not rep.defined else f"{rep.rho:.3f}"
        ax.plot(x, np.array(rep.pred_volumes) / 1000, "-o", color=color, label=f"{label} (ρ = {rho})")
        ax.plot(x, np.array(rep.gt_volumes) / 1000, "--", color=color, alpha=0.6)
    ax.set_xlabel("timepoint")
    ax.set_ylabel("lesion volume (ml)")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_ablation(table: Mapping[str, Mapping[str, float | None]], path, title: str = "Ablation") -> None:
    plt = _figure()
    cols = sorted({c for vals in table.values() for c in vals})
    labels = list(table)
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(cols)), 4))
    width = 0.8 / max(len(labels), 1)
    x = np.arange(len(cols))
    for k, label in enumerate(labels):
        vals = [table[label].get(c) for c in cols]
        ax.bar(x + k * width, [0 if v is None else 100 * v for v in vals], width, label=label)
    ax.set_xticks(x + width * (len(labels) - 1) / 2)
    ax.set_xticklabels(cols, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("score (%)")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)
