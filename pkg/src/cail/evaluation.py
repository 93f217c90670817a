"""Edge AUROC, template-to-truth matching, teacher-forced action error, DAG export."""
from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .kuramoto import TrajectoryDataset
from .model import CailModel, previous


def _offdiag(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    return a[~np.eye(n, dtype=bool)]


def auroc(edge_scores, gt) -> float | None:
    """Rank-based AUROC of ``|edge_scores|`` against a binary adjacency, diagonal excluded.

    Ties count one half.  Returns ``None`` when the truth has no positives or
    no negatives.
    """
    scores = np.asarray(edge_scores, dtype=float)
    truth = np.asarray(gt)
    if scores.shape != truth.shape or scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValueError(f"score matrix {scores.shape} and truth {truth.shape} must be equal square shapes")
    s = np.abs(_offdiag(scores))
    y = _offdiag(truth) != 0
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)  # average ranks handle ties
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def match_templates(templates, gt_graphs) -> tuple[dict[int, int], float | None]:
    """Injective template/graph assignment maximising mean AUROC (exhaustive search).

    Returns ``({template index: graph index}, mean AUROC)``.  When the counts
    differ, the smaller side is matched into the larger one.
    """
    templates = [np.asarray(t) for t in templates]
    gt_graphs = [np.asarray(g) for g in gt_graphs]
    score = np.full((len(templates), len(gt_graphs)), np.nan)
    for i, t in enumerate(templates):
        for j, g in enumerate(gt_graphs):
            v = auroc(t, g)
            if v is not None:
                score[i, j] = v
    best_map, best_val = {}, -math.inf
    if len(templates) >= len(gt_graphs):
        for perm in itertools.permutations(range(len(templates)), len(gt_graphs)):
            pairs = {t: g for g, t in enumerate(perm)}
            val = _mean_pairs(score, pairs)
            if val is not None and val > best_val:
                best_map, best_val = pairs, val
    else:
        for perm in itertools.permutations(range(len(gt_graphs)), len(templates)):
            pairs = dict(enumerate(perm))
            val = _mean_pairs(score, pairs)
            if val is not None and val > best_val:
                best_map, best_val = pairs, val
    if not best_map:
        return {}, None
    return best_map, float(best_val)


def _mean_pairs(score: np.ndarray, pairs: dict[int, int]) -> float | None:
    vals = [score[t, g] for t, g in pairs.items()]
    vals = [v for v in vals if not np.isnan(v)]
    return float(np.mean(vals)) if vals else None


def action_error(model: CailModel, dataset: TrajectoryDataset, split: str = "test") -> float:
    """Teacher-forced mean squared error between predicted and expert actions."""
    errs = [((model.predict_actions(dataset.states[i], dataset.actions[i]) - dataset.actions[i]) ** 2)
            for i in dataset.indices(split)]
    return float(np.mean(np.concatenate(errs))) if errs else float("nan")


def closed_loop_error(model: CailModel, dataset: TrajectoryDataset, split: str = "test") -> float:
    """Like :func:`action_error` but feeding back the model's own previous actions."""
    errs = []
    n_act = model.config.n_action
    for i in dataset.indices(split):
        s, a = dataset.states[i], dataset.actions[i]
        own = np.zeros_like(a)
        for t in range(a.shape[0]):
            # the prediction at step t only depends on rows <= t
            pred = model.predict_actions(s[:t + 1], np.vstack([own[:t], np.zeros((1, n_act))]))
            own[t] = pred[-1]
        errs.append((own - a) ** 2)
    return float(np.mean(np.concatenate(errs))) if errs else float("nan")


def mean_abs_graph(model: CailModel, dataset: TrajectoryDataset, split: str = "test") -> np.ndarray:
    """Time-averaged ``|G_t|`` over every step of a split."""
    acc, steps = None, 0
    for i in dataset.indices(split):
        _, graphs = model.selection(dataset.states[i])
        part = np.abs(graphs).sum(axis=0)
        acc = part if acc is None else acc + part
        steps += graphs.shape[0]
    return acc / steps


def selection_accuracy(model: CailModel, dataset: TrajectoryDataset, assignment: dict[int, int],
                       split: str = "test") -> float | None:
    """Fraction of steps where the argmax template maps to the active ground-truth graph."""
    hits, total = 0, 0
    for i in dataset.indices(split):
        alpha, _ = model.selection(dataset.states[i])
        chosen = alpha.argmax(axis=1)
        mapped = np.array([assignment.get(int(c), -1) for c in chosen])
        hits += int((mapped == dataset.regimes[i]).sum())
        total += len(chosen)
    return hits / total if total else None


def evaluate(model: CailModel, dataset: TrajectoryDataset, config: dict | None = None,
             closed_loop: bool = False) -> dict:
    """EvalReport as a plain dict."""
    report: dict = {"action_mse": action_error(model, dataset, "test")}
    if closed_loop:
        report["action_mse_closed_loop"] = closed_loop_error(model, dataset, "test")
    if model.bank is not None:
        templates = model.bank.matrices()
        avg = mean_abs_graph(model, dataset, "test")
        report["static_auroc"] = auroc(avg, dataset.gt_graphs[0]) if len(dataset.gt_graphs) == 1 else None
        assignment, dyn = match_templates(templates, dataset.gt_graphs)
        report["dynamic_auroc"] = dyn
        report["assignment"] = {str(k): v for k, v in sorted(assignment.items())}
        report["selection_accuracy"] = selection_accuracy(model, dataset, assignment, "test")
        report["template_aurocs"] = [[auroc(t, g) for g in dataset.gt_graphs] for t in templates]
    else:
        report.update(static_auroc=None, dynamic_auroc=None, assignment={}, selection_accuracy=None)
    report["meta"] = {"scale": dataset.scale, "mode": dataset.mode, "dataset_seed": dataset.seed,
                      "n_test": len(dataset.indices("test")), "config": config or {}}
    return report


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


# --- export ---------------------------------------------------------------

def template_dot(matrix: np.ndarray, names: list[str], threshold: float, title: str) -> str:
    lines = [f"digraph {title} {{"]
    for name in names:
        lines.append(f'  "{name}";')
    top = max(float(np.abs(matrix).max()), 1e-12)
    n = matrix.shape[0]
    for j in range(n):
        for i in range(n):
            w = float(matrix[j, i])
            if i == j or w == 0.0 or abs(w) < threshold:
                continue
            width = 0.5 + 4.5 * abs(w) / top
            lines.append(f'  "{names[j]}" -> "{names[i]}" [weight="{w:.6g}", penwidth={width:.3f}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def exported_edges(matrix: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    n = matrix.shape[0]
    return [(j, i) for j in range(n) for i in range(n)
            if i != j and matrix[j, i] != 0.0 and abs(matrix[j, i]) >= threshold]


def export_templates(model: CailModel, names: list[str], out_dir, threshold: float) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    mats = model.bank.matrices()
    for k, m in enumerate(mats):
        p = out / f"template_{k}.dot"
        p.write_text(template_dot(m, names, threshold, f"template_{k}"))
        written.append(p)
    p = out / "templates.json"
    payload = {"nodes": names, "threshold": threshold,
               "templates": [m.tolist() for m in mats],
               "edges": [exported_edges(m, threshold) for m in mats]}
    p.write_text(json.dumps(payload, sort_keys=True) + "\n")
    written.append(p)
    return written


def is_dag(n: int, edges: list[tuple[int, int]]) -> bool:
    """Kahn topological sort."""
    indeg = [0] * n
    out: list[list[int]] = [[] for _ in range(n)]
    for j, i in edges:
        out[j].append(i)
        indeg[i] += 1
    queue = [v for v in range(n) if indeg[v] == 0]
    seen = 0
    while queue:
        v = queue.pop()
        seen += 1
        for w in out[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                queue.append(w)
    return seen == n
