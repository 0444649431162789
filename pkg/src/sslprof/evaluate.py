"""Evaluation harness: kNN classification of perturbations from well
vectors, stratified K-fold cross-validation, within/cross cell-line
transfer, and embedding diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import DatasetManifest, EmbeddingTable, plate_cell_lines, well_perturbations
from .errors import ValidationError
from .seeding import TAG_FOLDS, rng_for

METRICS = ("cosine", "euclidean")
MODES = ("within", "cross", "both")


@dataclass(frozen=True)
class EvalConfig:
    k: int = 5
    metric: str = "cosine"
    n_folds: int = 5
    seed: int = 0
    mode: str = "both"

    def __post_init__(self):
        if self.k < 1:
            raise ValidationError("k must be >= 1")
        if self.metric not in METRICS:
            raise ValidationError(f"metric must be one of {METRICS}")
        if self.n_folds < 2:
            raise ValidationError("n_folds must be >= 2")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")


@dataclass
class EvalReport:
    config: dict
    fold_accuracies: list[float] = field(default_factory=list)
    mean_accuracy: float = 0.0
    std_accuracy: float = 0.0
    per_line: dict = field(default_factory=dict)
    cross_line: dict = field(default_factory=dict)
    confusion: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "fold_accuracies": self.fold_accuracies,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "per_line": self.per_line,
            "cross_line": self.cross_line,
            "confusion": self.confusion,
            "diagnostics": self.diagnostics,
        }


def _distances(train: np.ndarray, query: np.ndarray, metric: str) -> np.ndarray:
    train = np.asarray(train, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if metric == "euclidean":
        return np.sqrt(((train - query) ** 2).sum(axis=1))
    tn = np.linalg.norm(train, axis=1)
    qn = np.linalg.norm(query)
    denom = np.maximum(tn * qn, 1e-12)
    return 1.0 - (train @ query) / denom


def knn_predict(train_vectors, train_labels, query_vector, k: int, metric: str = "cosine"):
    """Majority vote among the k nearest training rows.

    Ties break by smallest summed distance among the tied labels, then by
    lexicographic label order, so predictions are fully deterministic.
    """
    train = np.asarray(train_vectors)
    labels = list(train_labels)
    if train.ndim != 2 or train.shape[0] == 0:
        raise ValidationError("empty or malformed training set")
    if len(labels) != train.shape[0]:
        raise ValidationError("label count does not match training rows")
    if k > train.shape[0]:
        raise ValidationError(f"k={k} larger than training set of {train.shape[0]}")
    if metric not in METRICS:
        raise ValidationError(f"metric must be one of {METRICS}")

    dists = _distances(train, np.asarray(query_vector), metric)
    nearest = np.argsort(dists, kind="stable")[:k]
    votes: dict = {}
    sums: dict = {}
    for i in nearest:
        lab = labels[i]
        votes[lab] = votes.get(lab, 0) + 1
        sums[lab] = sums.get(lab, 0.0) + float(dists[i])
    best = max(votes.values())
    tied = [lab for lab, v in votes.items() if v == best]
    tied.sort(key=lambda lab: (sums[lab], str(lab)))
    return tied[0]


def _stratified_folds(keys, labels, n_folds: int, seed: int) -> list[int]:
    """Deterministic fold id per key (keys pre-sorted), stratified by label.

    Each class is spread round-robin over the folds from a staggered
    per-class offset, so folds stay balanced even when a class has fewer
    wells than folds. Infeasible cases (a class with a single well, or an
    empty test fold) raise a validation error.
    """
    by_label: dict = {}
    for idx, key in enumerate(keys):
        by_label.setdefault(labels[idx], []).append(idx)
    if n_folds > len(keys):
        raise ValidationError(f"{n_folds} folds for {len(keys)} wells")
    fold_of = [0] * len(keys)
    rng = rng_for(seed, TAG_FOLDS)
    dealt = 0
    for label in sorted(by_label, key=str):
        idxs = by_label[label]
        if len(idxs) < 2:
            raise ValidationError(
                f"class {label!r} has {len(idxs)} well(s); need >= 2 to appear "
                "in both train and test folds"
            )
        order = rng.permutation(len(idxs))
        for j in order:
            fold_of[idxs[j]] = dealt % n_folds
            dealt += 1
    counts = np.bincount(fold_of, minlength=n_folds)
    if (counts == 0).any():
        raise ValidationError(
            f"fold(s) {np.flatnonzero(counts == 0).tolist()} would have no test "
            "wells; lower n_folds"
        )
    return fold_of


def kfold_eval(table: EmbeddingTable, labels, cfg: EvalConfig) -> EvalReport:
    """Stratified K-fold kNN accuracy over well vectors.

    ``labels`` maps table keys to class labels (or is a sequence aligned
    with the table rows). Fold assignment is deterministic in the seed and
    invariant to table row order.
    """
    table.validate()
    order = np.argsort([repr(k) for k in table.keys], kind="stable")
    keys = [table.keys[i] for i in order]
    vectors = table.vectors[order]
    if isinstance(labels, dict):
        missing = [k for k in keys if k not in labels]
        if missing:
            raise ValidationError(f"labels missing for keys: {missing[:5]}")
        labs = [labels[k] for k in keys]
    else:
        labs = [labels[i] for i in order]

    fold_of = np.asarray(_stratified_folds(keys, labs, cfg.n_folds, cfg.seed))
    labs = np.asarray(labs, dtype=object)

    fold_accs = []
    confusion: dict = {}
    for fold in range(cfg.n_folds):
        test_idx = np.flatnonzero(fold_of == fold)
        train_idx = np.flatnonzero(fold_of != fold)
        correct = 0
        for i in test_idx:
            pred = knn_predict(vectors[train_idx], labs[train_idx], vectors[i], cfg.k, cfg.metric)
            truth = labs[i]
            confusion.setdefault(str(truth), {})
            confusion[str(truth)][str(pred)] = confusion[str(truth)].get(str(pred), 0) + 1
            correct += int(pred == truth)
        fold_accs.append(correct / len(test_idx))

    report = EvalReport(
        config={
            "k": cfg.k,
            "metric": cfg.metric,
            "n_folds": cfg.n_folds,
            "seed": cfg.seed,
            "mode": cfg.mode,
        },
        fold_accuracies=[float(a) for a in fold_accs],
        mean_accuracy=float(np.mean(fold_accs)),
        std_accuracy=float(np.std(fold_accs)),
        confusion=confusion,
    )
    return report


def cross_cell_line_eval(
    tables_by_line: dict[str, EmbeddingTable],
    labels,
    cfg: EvalConfig,
    center: bool = False,
) -> dict[str, float]:
    """Fit on all wells of one cell line, test on another, per direction.

    ``center`` subtracts each line's mean vector before transfer (useful
    when lines differ by a constant embedding offset).
    """
    lines = sorted(tables_by_line)
    if len(lines) < 2:
        raise ValidationError("cross-line evaluation needs >= 2 cell lines")

    def line_data(line):
        table = tables_by_line[line]
        table.validate()
        labs = [labels[k] for k in table.keys] if isinstance(labels, dict) else list(labels[line])
        vecs = table.vectors.astype(np.float64)
        if center:
            vecs = vecs - vecs.mean(axis=0)
        return vecs, labs

    data = {line: line_data(line) for line in lines}
    label_sets = {line: set(labs) for line, (_, labs) in data.items()}
    shared = set.intersection(*label_sets.values())
    if not shared:
        raise ValidationError("cell lines share no perturbation labels")

    results: dict[str, float] = {}
    for src in lines:
        for dst in lines:
            if src == dst:
                continue
            train_vecs, train_labs = data[src]
            test_vecs, test_labs = data[dst]
            correct = sum(
                int(
                    knn_predict(train_vecs, train_labs, test_vecs[i], cfg.k, cfg.metric)
                    == test_labs[i]
                )
                for i in range(len(test_labs))
            )
            results[f"{src}->{dst}"] = correct / len(test_labs)
    return results


def intra_well_consistency(site_table: EmbeddingTable) -> float:
    """Mean over wells of the mean pairwise cosine similarity of site rows."""
    site_table.validate()
    if site_table.level != "site":
        raise ValidationError("intra_well_consistency needs a site-level table")
    groups: dict = {}
    for i, key in enumerate(site_table.keys):
        groups.setdefault((key[0], key[1]), []).append(i)
    per_well = []
    for well, idxs in sorted(groups.items()):
        if len(idxs) < 2:
            raise ValidationError(f"well {well} has a single site row")
        vecs = site_table.vectors[idxs].astype(np.float64)
        norms = np.maximum(np.linalg.norm(vecs, axis=1, keepdims=True), 1e-12)
        sims = (vecs / norms) @ (vecs / norms).T
        n = len(idxs)
        off_diag = (sims.sum() - np.trace(sims)) / (n * (n - 1))
        per_well.append(off_diag)
    return float(np.mean(per_well))


@dataclass
class CollapseDiagnostics:
    collapsed: bool
    low_variance_fraction: float
    singular_value_fraction: float
    dim_std_min: float
    dim_std_mean: float
    dim_std_max: float

    def to_dict(self) -> dict:
        return {
            "collapsed": self.collapsed,
            "low_variance_fraction": self.low_variance_fraction,
            "singular_value_fraction": self.singular_value_fraction,
            "dim_std_min": self.dim_std_min,
            "dim_std_mean": self.dim_std_mean,
            "dim_std_max": self.dim_std_max,
        }


def embedding_collapse_check(table: EmbeddingTable) -> CollapseDiagnostics:
    """Detect a degenerate embedding table.

    Flags collapse when more than half the dimensions have a standard
    deviation below 1e-4; also reports the fraction of singular values of
    the centred matrix above 1% of the largest.
    """
    table.validate()
    if table.vectors.shape[0] < 2:
        raise ValidationError("collapse check needs >= 2 rows")
    vecs = table.vectors.astype(np.float64)
    stds = vecs.std(axis=0)
    low_frac = float((stds < 1e-4).mean())
    centered = vecs - vecs.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals.size == 0 or svals.max() <= 0:
        sv_frac = 0.0
    else:
        sv_frac = float((svals > 0.01 * svals.max()).mean())
    return CollapseDiagnostics(
        collapsed=low_frac > 0.5,
        low_variance_fraction=low_frac,
        singular_value_fraction=sv_frac,
        dim_std_min=float(stds.min()),
        dim_std_mean=float(stds.mean()),
        dim_std_max=float(stds.max()),
    )


def split_by_cell_line(
    table: EmbeddingTable, manifest: DatasetManifest
) -> dict[str, EmbeddingTable]:
    lines = plate_cell_lines(manifest)
    groups: dict[str, list[int]] = {}
    for i, key in enumerate(table.keys):
        line = lines.get(key[0])
        if line is None:
            raise ValidationError(f"plate {key[0]!r} not in manifest")
        groups.setdefault(line, []).append(i)
    return {
        line: EmbeddingTable(
            keys=[table.keys[i] for i in idxs],
            vectors=table.vectors[idxs],
            level=table.level,
        )
        for line, idxs in sorted(groups.items())
    }


def evaluate_wells(
    table: EmbeddingTable,
    manifest: DatasetManifest,
    cfg: EvalConfig,
    site_table: EmbeddingTable | None = None,
) -> EvalReport:
    """Full protocol: per-line K-fold, cross-line transfer, diagnostics."""
    labels = well_perturbations(manifest)
    by_line = split_by_cell_line(table, manifest)

    report = EvalReport(
        config={
            "k": cfg.k,
            "metric": cfg.metric,
            "n_folds": cfg.n_folds,
            "seed": cfg.seed,
            "mode": cfg.mode,
        }
    )
    if cfg.mode in ("within", "both"):
        all_fold_accs = []
        for line, sub in by_line.items():
            sub_report = kfold_eval(sub, labels, cfg)
            report.per_line[line] = {
                "fold_accuracies": sub_report.fold_accuracies,
                "mean_accuracy": sub_report.mean_accuracy,
            }
            for truth, row in sub_report.confusion.items():
                dst = report.confusion.setdefault(truth, {})
                for pred, count in row.items():
                    dst[pred] = dst.get(pred, 0) + count
            all_fold_accs.extend(sub_report.fold_accuracies)
        report.fold_accuracies = [float(a) for a in all_fold_accs]
        report.mean_accuracy = float(np.mean(all_fold_accs))
        report.std_accuracy = float(np.std(all_fold_accs))
    if cfg.mode in ("cross", "both") and len(by_line) >= 2:
        report.cross_line = cross_cell_line_eval(by_line, labels, cfg)

    diag = embedding_collapse_check(table).to_dict()
    if site_table is not None:
        diag["intra_well_cosine"] = intra_well_consistency(site_table)
    report.diagnostics = diag
    return report
