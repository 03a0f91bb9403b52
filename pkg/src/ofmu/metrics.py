"""Evaluation suite: accuracies, confidence-threshold membership inference,
the unlearning difficulty index, Spearman rank correlation and the
max-normalised overall score."""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import LabeledBatch
from .errors import InvalidArgument, UndefinedCorrelation
from .objectives import DEFAULT_SIM_FLOOR, cosine_sim

METRIC_COLUMNS = ("UA", "RA", "TA", "MIA")


def _as_batch(data):
    return data if isinstance(data, LabeledBatch) else data.as_batch()


def accuracy(problem, theta, data):
    """Fraction of samples whose arg-max class (lowest index on ties) is the label."""
    batch = _as_batch(data)
    if batch.size == 0:
        raise InvalidArgument("accuracy of an empty set is undefined")
    if not problem.is_classifier:
        raise InvalidArgument("accuracy needs a classification problem")
    pred = np.argmax(problem.outputs(theta, batch.inputs), axis=1)
    return float(np.mean(pred == batch.labels))


def unlearning_accuracy(problem, theta, forget):
    """UA, reported as one minus accuracy on the forget set."""
    return 1.0 - accuracy(problem, theta, forget)


def confidences(problem, theta, data):
    """Per-sample maximum softmax probability."""
    batch = _as_batch(data)
    return problem.predict_proba(theta, batch.inputs).max(axis=1)


def balanced_subsample(members, nonmembers, seed):
    """Downsample the larger group to the size of the smaller one.

    The larger group is sorted first so the draw depends only on its values,
    not on sample order.
    """
    members = np.sort(np.asarray(members, dtype=np.float64))
    nonmembers = np.sort(np.asarray(nonmembers, dtype=np.float64))
    m = min(members.size, nonmembers.size)
    rng = np.random.default_rng(seed)
    if members.size > m:
        members = np.sort(members[rng.choice(members.size, m, replace=False)])
    elif nonmembers.size > m:
        nonmembers = np.sort(nonmembers[rng.choice(nonmembers.size, m, replace=False)])
    return members, nonmembers


def fit_threshold(members, nonmembers):
    """Threshold maximising balanced accuracy for ``member iff conf >= t``.

    Candidates are -inf, the midpoints between consecutive distinct values
    and +inf; ties go to the lowest threshold. Returns ``(t, balanced_acc)``.
    """
    values = np.unique(np.concatenate([members, nonmembers]))
    cands = np.concatenate([[-np.inf], (values[:-1] + values[1:]) / 2.0, [np.inf]])
    ms = np.sort(members)
    ns = np.sort(nonmembers)
    # rates from integer counts with one division, so equal rates compare equal
    tpr = (ms.size - np.searchsorted(ms, cands, side="left")) / ms.size
    tnr = np.searchsorted(ns, cands, side="left") / ns.size
    bal = 0.5 * (tpr + tnr)
    best = int(np.argmax(bal))
    return float(cands[best]), float(bal[best])


def mia_efficacy_from_confidences(member_conf, nonmember_conf, forget_conf, seed=0):
    member_conf = np.asarray(member_conf, dtype=np.float64)
    nonmember_conf = np.asarray(nonmember_conf, dtype=np.float64)
    forget_conf = np.asarray(forget_conf, dtype=np.float64)
    if member_conf.size < 2 or nonmember_conf.size < 2:
        raise InvalidArgument("retain and held-out sets need at least 2 samples each")
    if forget_conf.size == 0:
        raise InvalidArgument("forget set is empty")
    members, nonmembers = balanced_subsample(member_conf, nonmember_conf, seed)
    pooled = np.concatenate([members, nonmembers])
    if np.all(pooled == pooled[0]):
        # no separating threshold exists: the attack is a coin flip at c
        return 0.5 * float(np.mean(forget_conf < pooled[0]))
    t, _ = fit_threshold(members, nonmembers)
    return float(np.mean(forget_conf < t))


def mia_efficacy(problem, theta_u, retain, heldout, forget, seed=0):
    """Share of forget samples the confidence attack labels non-member (TN / |D_f|)."""
    return mia_efficacy_from_confidences(
        confidences(problem, theta_u, retain),
        confidences(problem, theta_u, heldout),
        confidences(problem, theta_u, forget),
        seed,
    )


@dataclass(frozen=True)
class UdiConfig:
    alpha: float = 1.0
    lambda_w: float = 1.0
    gamma: float = 1.0
    ell_target: float = None

    def __post_init__(self):
        if min(self.alpha, self.lambda_w, self.gamma) < 0:
            raise InvalidArgument("UDI weights must be non-negative")

    def target(self, problem):
        if self.ell_target is not None:
            return self.ell_target
        return math.log(problem.class_count)


def udi_from_components(grad_norm, sim, margin, cfg):
    return cfg.alpha * grad_norm + cfg.lambda_w * (1.0 - sim) + cfg.gamma * margin


def udi(problem, theta, x, batch_r, cfg=UdiConfig(), sim_floor=DEFAULT_SIM_FLOOR):
    """Difficulty of unlearning one forget sample ``x`` against the retain batch."""
    x = _as_batch(x)
    if x.size != 1:
        raise InvalidArgument(f"udi expects exactly one sample, got {x.size}")
    loss, gf = problem.loss_and_grad(theta, x)
    gr = problem.grad(theta, _as_batch(batch_r))
    sim = cosine_sim(gf, gr, sim_floor)
    margin = max(0.0, cfg.target(problem) - loss)
    return udi_from_components(float(np.linalg.norm(gf)), sim, margin, cfg)


def average_ranks(values):
    """1-based ranks, tied values sharing the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys):
    """Spearman rank correlation with average ranks for ties."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InvalidArgument("spearman needs two 1-D sequences of equal length")
    if xs.size < 2:
        raise InvalidArgument("spearman needs at least two observations")
    rx = average_ranks(xs)
    ry = average_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(np.dot(rx, rx)) * float(np.dot(ry, ry)))
    if denom == 0.0:
        raise UndefinedCorrelation("rank variance is zero for at least one sequence")
    return float(np.clip(np.dot(rx, ry) / denom, -1.0, 1.0))


def overall_score(table):
    """Average of max-normalised metrics per method.

    ``table`` maps method -> {metric: value}; every method must report the
    same metrics, all non-negative.
    """
    if not table:
        raise InvalidArgument("overall score needs at least one method")
    methods = list(table)
    metrics = list(table[methods[0]])
    if not metrics:
        raise InvalidArgument("no metrics to aggregate")
    for m in methods:
        if set(table[m]) != set(metrics):
            raise InvalidArgument(f"method {m!r} reports a different metric set")
    scores = {m: 0.0 for m in methods}
    for metric in metrics:
        col = [float(table[m][metric]) for m in methods]
        if min(col) < 0:
            raise InvalidArgument(f"metric {metric!r} has negative values")
        top = max(col)
        if top <= 0:
            raise InvalidArgument(f"metric {metric!r} is zero for every method")
        for m, v in zip(methods, col):
            scores[m] += v / top
    return {m: s / len(metrics) for m, s in scores.items()}


@dataclass
class MetricsReport:
    methods: dict = field(default_factory=dict)
    udi_values: list = field(default_factory=list)
    udi_tau: float = None
    overall: dict = field(default_factory=dict)

    def refresh_overall(self):
        table = {m: {c: row[c] for c in METRIC_COLUMNS} for m, row in self.methods.items()}
        try:
            self.overall = overall_score(table) if table else {}
        except InvalidArgument:
            self.overall = {m: None for m in table}
        return self.overall

    def to_dict(self):
        return {
            "methods": self.methods,
            "udi_values": self.udi_values,
            "udi_tau": self.udi_tau,
            "overall": self.overall,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("methods", {}), d.get("udi_values", []), d.get("udi_tau"), d.get("overall", {}))

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", *METRIC_COLUMNS, "overall"])
            for m, row in self.methods.items():
                ov = self.overall.get(m)
                w.writerow([m, *(repr(float(row[c])) for c in METRIC_COLUMNS), "" if ov is None else repr(ov)])
