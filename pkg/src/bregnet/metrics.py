"""Dimensional (RMSE, CC, CCC, SAGR) and categorical affect metrics.

Variances and covariances use the population (1/n) convention.  Metrics
that are undefined for their input raise :class:`UndefinedMetricError`
instead of returning a placeholder value.
"""

import json
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ContractError, UndefinedMetricError

UNDEFINED = "undefined"
DIMENSIONAL_METRICS = ("rmse", "cc", "ccc", "sagr")
AXES = ("valence", "arousal")
CATEGORICAL_METRICS = ("accuracy", "f1", "ppv", "kappa", "alpha", "mcc")
DEFAULT_TRIALS = 200


def _pair(pred, gt, min_len=1):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    gt = np.asarray(gt, dtype=np.float64).ravel()
    if pred.shape != gt.shape:
        raise ContractError(f"length mismatch: {pred.size} predictions vs {gt.size} ground truths")
    if pred.size < min_len:
        raise ContractError(f"need at least {min_len} samples, got {pred.size}")
    return pred, gt


def rmse(pred, gt):
    pred, gt = _pair(pred, gt)
    d = pred - gt
    # scale first so tiny differences do not underflow to an exact 0
    m = np.abs(d).max()
    if m == 0:
        return 0.0
    return float(m * np.sqrt(np.mean((d / m) ** 2)))


def cc(pred, gt):
    """Pearson correlation."""
    pred, gt = _pair(pred, gt, min_len=2)
    dp, dg = pred - pred.mean(), gt - gt.mean()
    vp, vg = np.mean(dp * dp), np.mean(dg * dg)
    if vp == 0 or vg == 0:
        raise UndefinedMetricError("CC is undefined for a constant series")
    r = np.mean(dp * dg) / np.sqrt(vp * vg)
    return float(np.clip(r, -1.0, 1.0))


def ccc(pred, gt):
    """Concordance correlation ``2 cov / (var_p + var_g + (mu_p - mu_g)^2)``.

    ``2 rho sigma_p sigma_g`` equals ``2 cov``, which keeps the value defined
    when only one of the two series is constant.
    """
    pred, gt = _pair(pred, gt, min_len=2)
    mp, mg = pred.mean(), gt.mean()
    dp, dg = pred - mp, gt - mg
    vp, vg = np.mean(dp * dp), np.mean(dg * dg)
    if vp == 0 and vg == 0:
        raise UndefinedMetricError("CCC is undefined when both series are constant")
    return float(2 * np.mean(dp * dg) / (vp + vg + (mp - mg) ** 2))


def sagr(pred, gt):
    """Fraction of samples whose signs agree, with sign(0) = 0."""
    pred, gt = _pair(pred, gt)
    return float(np.mean(np.sign(pred) == np.sign(gt)))


# -------------------------------------------------------------- categorical

@dataclass(frozen=True)
class ConfusionMatrix:
    """K x K counts; rows are ground truth, columns are predictions."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ContractError(f"confusion matrix must be square, got shape {counts.shape}")
        if not np.all(counts == np.round(counts)) or (counts < 0).any():
            raise ContractError("confusion matrix entries must be non-negative integers")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def num_classes(self):
        return self.counts.shape[0]


def confusion_matrix(pred, gt, num_classes=None):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ContractError("pred and gt must have equal length")
    if pred.size and min(pred.min(), gt.min()) < 0:
        raise ContractError("class labels must be non-negative")
    k = num_classes
    if k is None:
        k = int(max(pred.max(initial=-1), gt.max(initial=-1))) + 1
    elif pred.size and max(pred.max(), gt.max()) >= k:
        raise ContractError(f"class label outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (gt, pred), 1)
    return ConfusionMatrix(counts)


def _as_counts(cm):
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else ConfusionMatrix(cm).counts
    if counts.sum() == 0:
        raise ContractError("confusion matrix is empty")
    return counts.astype(np.float64)


def accuracy(cm):
    c = _as_counts(cm)
    return float(np.trace(c) / c.sum())


def _per_class(cm):
    c = _as_counts(cm)
    tp = np.diag(c)
    actual = c.sum(axis=1)
    predicted = c.sum(axis=0)
    keep = (actual > 0) | (predicted > 0)
    if not keep.all():
        warnings.warn(f"classes {np.flatnonzero(~keep).tolist()} have no samples and no predictions; "
                      "dropped from macro averages", stacklevel=3)
    return tp[keep], actual[keep], predicted[keep]


def f1_macro(cm):
    tp, actual, predicted = _per_class(cm)
    return float(np.mean(2 * tp / (actual + predicted)))


def ppv_macro(cm):
    """Macro precision; a class that is never predicted contributes 0."""
    tp, _, predicted = _per_class(cm)
    if (predicted == 0).any():
        warnings.warn("some classes are never predicted; their precision counts as 0", stacklevel=2)
    prec = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    return float(np.mean(prec))


def cohen_kappa(cm):
    c = _as_counts(cm)
    n = c.sum()
    p_o = np.trace(c) / n
    p_e = float(c.sum(axis=1) @ c.sum(axis=0)) / (n * n)
    if p_e == 1:
        raise UndefinedMetricError("kappa is undefined when chance agreement is 1")
    return float((p_o - p_e) / (1 - p_e))


def krippendorff_alpha(cm):
    """Nominal alpha for two coders (prediction and ground truth), no missing data."""
    c = _as_counts(cm)
    o = c + c.T  # coincidence matrix
    n_c = o.sum(axis=1)
    n = n_c.sum()
    disagree_obs = o.sum() - np.trace(o)
    disagree_exp = n * n - float(n_c @ n_c)
    if n <= 1 or disagree_exp == 0:
        raise UndefinedMetricError("alpha is undefined when only one category occurs")
    return float(1 - (n - 1) * disagree_obs / disagree_exp)


def mcc(cm):
    """Multiclass Matthews correlation (Gorodkin's R_K statistic)."""
    c = _as_counts(cm)
    s = c.sum()
    correct = np.trace(c)
    t = c.sum(axis=1)
    p = c.sum(axis=0)
    denom = (s * s - p @ p) * (s * s - t @ t)
    if denom == 0:
        raise UndefinedMetricError("MCC is undefined when either rater uses a single class")
    return float((correct * s - p @ t) / np.sqrt(denom))


CATEGORICAL_SCORERS = {
    "accuracy": accuracy,
    "f1": f1_macro,
    "ppv": ppv_macro,
    "kappa": cohen_kappa,
    "alpha": krippendorff_alpha,
    "mcc": mcc,
}


def categorical_metrics(cm, strict=False):
    """All categorical metrics of a confusion matrix.

    Undefined metrics become ``None`` (with a warning) unless ``strict``.
    """
    out = {}
    for name, fn in CATEGORICAL_SCORERS.items():
        try:
            out[name] = fn(cm)
        except UndefinedMetricError as exc:
            if strict:
                raise
            warnings.warn(f"{name}: {exc}", stacklevel=2)
            out[name] = None
    return out


# ------------------------------------------------------- skew normalization

def exact_mean(values):
    """Correctly rounded mean; the mean of identical values is that value."""
    values = list(values)
    return float(sum(map(Fraction, values)) / len(values))


@dataclass
class SkewResult:
    original: float
    normalized: float
    per_trial: list


def balanced_subsets(gt, trials=DEFAULT_TRIALS, seed=0, num_classes=None):
    """Yield ``trials`` index arrays, each under-sampling every class to the smallest count.

    Trial ``t`` draws from its own generator seeded with ``(seed, t)``, so the
    subsets do not depend on evaluation order.  Indices come back sorted.
    """
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if trials < 1:
        raise ContractError("trials must be >= 1")
    if gt.size == 0:
        raise ContractError("no samples to normalise")
    k = int(gt.max()) + 1 if num_classes is None else num_classes
    classes = [np.flatnonzero(gt == c) for c in range(k)]
    if num_classes is None:
        classes = [idx for idx in classes if idx.size]
    m = min(idx.size for idx in classes)
    if m == 0:
        missing = [c for c, idx in enumerate(classes) if idx.size == 0]
        raise ContractError(f"classes {missing} are absent from the ground truth")
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        picked = [rng.choice(idx, size=m, replace=False) for idx in classes]
        yield np.sort(np.concatenate(picked))


def skew_normalize(scorer, preds, gts, trials=DEFAULT_TRIALS, seed=0, num_classes=None):
    """Score on the full set and averaged over class-balanced under-samples."""
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.shape[0] != gts.shape[0]:
        raise ContractError("preds and gts must have equal length")
    original = float(scorer(preds, gts))
    per_trial = [float(scorer(preds[idx], gts[idx]))
                 for idx in balanced_subsets(gts, trials, seed, num_classes)]
    return SkewResult(original, exact_mean(per_trial), per_trial)


# ----------------------------------------------------------------- reports

@dataclass
class MetricReport:
    """Metric name -> (original, skew-normalized or None).  Undefined values are None."""

    task: str
    values: dict = field(default_factory=dict)
    trials: int = 0
    seed: int = 0

    def to_dict(self):
        flat = {}
        for name, (orig, norm) in self.values.items():
            flat[name] = UNDEFINED if orig is None else orig
            if norm is not None or self.trials and name in CATEGORICAL_METRICS:
                flat[f"{name}_norm"] = UNDEFINED if norm is None else norm
        return {"task": self.task, "trials": self.trials, "seed": self.seed, "metrics": flat}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _defined(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError as exc:
        warnings.warn(str(exc), stacklevel=3)
        return None


def dimensional_report(pred, gt):
    """RMSE/CC/CCC/SAGR for valence (column 0) and arousal (column 1)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ContractError("prediction and ground-truth arrays differ in length")
    fns = {"rmse": rmse, "cc": cc, "ccc": ccc, "sagr": sagr}
    values = {}
    for name in DIMENSIONAL_METRICS:
        for j, axis in enumerate(AXES):
            values[f"{name}_{axis}"] = (_defined(fns[name], pred[:, j], gt[:, j]), None)
    return MetricReport("dimensional", values)


def categorical_report(pred, gt, trials=DEFAULT_TRIALS, seed=0, num_classes=None):
    """Original and skew-normalized categorical metrics.

    ``num_classes`` sizes the confusion matrix; under-sampling balances the
    classes that occur in ``gt``.  Every metric is scored on the same subsets.  A normalized value
    is undefined if the metric is undefined on any trial.
    """
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    k = num_classes
    if k is None:
        k = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        original = categorical_metrics(confusion_matrix(pred, gt, k))
        per_trial = {name: [] for name in CATEGORICAL_METRICS}
        for idx in balanced_subsets(gt, trials, seed):
            scores = categorical_metrics(confusion_matrix(pred[idx], gt[idx], k))
            for name in CATEGORICAL_METRICS:
                per_trial[name].append(scores[name])
    values = {}
    for name in CATEGORICAL_METRICS:
        trial_values = per_trial[name]
        norm = None if None in trial_values else exact_mean(trial_values)
        if original[name] is None or norm is None:
            warnings.warn(f"{name} is undefined for these predictions", stacklevel=2)
        values[name] = (original[name], norm)
    return MetricReport("categorical", values, trials, seed)
