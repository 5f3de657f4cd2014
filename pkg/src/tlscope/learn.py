"""l1-regularized logistic regression and its evaluation harness.

The solver is proximal gradient descent (ISTA) with a backtracking line
search, optionally with momentum (FISTA style) that is reset whenever an
extrapolated step would raise the objective, so accepted iterates never
go uphill. It minimizes

    (1/N) * negative log-likelihood + lam * sum(|w|)

with intercepts left unpenalized. Internally every column is divided by
its root-mean-square (and the penalty reweighted to match), which leaves
the objective and its minimizer unchanged but keeps the step size from
being dictated by the largest-magnitude feature.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from .errors import (
    DimensionMismatch,
    NonFiniteFeature,
    SingleClassData,
    TooFewSamples,
    UnknownLabel,
)
from .features import FeatureSpace, fit_space, parse_views, views_name
from .ingest import FlowRecord

DEFAULT_LAMBDA_GRID = tuple(float(x) for x in np.logspace(-4, 1, 11))
DEFAULT_FDR_RATIO = 1e-4
TOL = 1e-7
MAX_ITER = 10_000


# ---------------------------------------------------------------- objective


def _one_hot(y_idx: np.ndarray, n_classes: int) -> np.ndarray:
    Y = np.zeros((len(y_idx), n_classes))
    Y[np.arange(len(y_idx)), y_idx] = 1.0
    return Y


def _loss_from_scores(S: np.ndarray, y_idx: np.ndarray, objective: str) -> float:
    if objective == "binary":
        s = S[:, 0]
        y = (y_idx == 1).astype(float)
        return float(-np.mean(y * log_expit(s) + (1 - y) * log_expit(-s)))
    return float(np.mean(logsumexp(S, axis=1) - S[np.arange(len(y_idx)), y_idx]))


def _grad_from_scores(S: np.ndarray, X: np.ndarray, y_idx: np.ndarray, objective: str) -> tuple[np.ndarray, np.ndarray]:
    if objective == "binary":
        R = expit(S) - (y_idx == 1).astype(float)[:, None]
    else:
        R = softmax(S, axis=1) - _one_hot(y_idx, S.shape[1])
    return (R.T @ X) / X.shape[0], R.mean(axis=0)


def smooth_loss(W: np.ndarray, b: np.ndarray, X: np.ndarray, y_idx: np.ndarray, objective: str) -> float:
    """Mean negative log-likelihood (the differentiable part of the objective)."""
    return _loss_from_scores(X @ W.T + b, y_idx, objective)


def smooth_grad(W: np.ndarray, b: np.ndarray, X: np.ndarray, y_idx: np.ndarray, objective: str) -> tuple[np.ndarray, np.ndarray]:
    return _grad_from_scores(X @ W.T + b, X, y_idx, objective)


def objective_value(W, b, X, y_idx, lam: float, objective: str) -> float:
    return smooth_loss(W, b, X, y_idx, objective) + lam * float(np.abs(W).sum())


def soft_threshold(x: np.ndarray, t) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


# ---------------------------------------------------------------- model


@dataclass
class LinearModel:
    class_labels: tuple
    weights: np.ndarray  # C x D, C == 1 for the binary head
    intercepts: np.ndarray
    l1_strength: float
    objective: str
    space: Optional[FeatureSpace] = None
    training_meta: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False)
    n_iter: int = 0

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def nonzero(self) -> int:
        return int(np.count_nonzero(self.weights))

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(
                f"model expects {self.n_features} features"
                + (f" (views {views_name(self.space.views)})" if self.space else "")
                + f", got {X.shape[1]}"
            )
        return X @ self.weights.T + self.intercepts

    def predict_proba(self, X) -> np.ndarray:
        S = self.decision_function(X)
        if self.objective == "binary":
            p = expit(S[:, 0])
            return np.column_stack([1.0 - p, p])
        return softmax(S, axis=1)

    def predict_index(self, X) -> np.ndarray:
        # argmax returns the first maximum, i.e. the lowest class index on ties
        return np.argmax(self.predict_proba(X), axis=1)

    def predict(self, X) -> list:
        return [self.class_labels[i] for i in self.predict_index(X)]

    def positive_scores(self, X) -> np.ndarray:
        return self.predict_proba(X)[:, -1]

    def to_dict(self) -> dict:
        C, D = self.weights.shape
        return {
            "labels": list(self.class_labels),
            "objective": self.objective,
            "weights": {"rows": C, "cols": D, "data": [float(x) for x in self.weights.ravel()]},
            "intercepts": [float(x) for x in self.intercepts],
            "lambda": self.l1_strength,
            "views": list(self.space.views) if self.space else [],
            "features": self.space.to_dict() if self.space else None,
            "scaler": self.space.scaler.to_dict() if self.space and self.space.scaler else None,
            "dictionary": self.space.dictionary.to_dict() if self.space and self.space.dictionary else None,
            "seed": self.training_meta.get("seed"),
            "created": self.training_meta.get("created"),
            "training_meta": self.training_meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: Mapping) -> "LinearModel":
        w = d["weights"]
        weights = np.asarray(w["data"], dtype=float).reshape(w["rows"], w["cols"])
        space = FeatureSpace.from_dict(d["features"]) if d.get("features") else None
        return cls(
            class_labels=tuple(d["labels"]),
            weights=weights,
            intercepts=np.asarray(d["intercepts"], dtype=float),
            l1_strength=float(d["lambda"]),
            objective=d["objective"],
            space=space,
            training_meta=dict(d.get("training_meta", {})),
        )

    @classmethod
    def load(cls, path) -> "LinearModel":
        with open(path) as fp:
            return cls.from_dict(json.load(fp))


def predict_proba(model: LinearModel, x) -> np.ndarray:
    """Class probabilities for one vector (1-D result) or a matrix."""
    x = np.asarray(x, dtype=float)
    p = model.predict_proba(x)
    return p[0] if x.ndim == 1 else p


# ---------------------------------------------------------------- training


def _encode_labels(y: Sequence, positive=None) -> tuple[tuple, np.ndarray]:
    classes = sorted(set(y), key=lambda c: (str(type(c)), c))
    if positive is not None and len(classes) == 2 and positive in classes:
        classes = [c for c in classes if c != positive] + [positive]
    index = {c: i for i, c in enumerate(classes)}
    return tuple(classes), np.array([index[c] for c in y], dtype=int)


def train(
    X,
    y: Sequence,
    lam: float,
    objective: Optional[str] = None,
    seed: int = 0,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
    positive=None,
    classes: Optional[Sequence] = None,
    init: Optional[tuple[np.ndarray, np.ndarray]] = None,
    space: Optional[FeatureSpace] = None,
    accelerate: bool = True,
) -> LinearModel:
    """Fit an l1-penalized logistic regression by proximal gradient with backtracking.

    With ``accelerate`` the steps use restarted momentum; without it this
    is plain ISTA. Either way the recorded objective history is
    non-increasing.

    ``objective`` is "binary" (one weight row, sigmoid link) or
    "multinomial" (one row per class, softmax link); it defaults to binary
    for two classes. For the binary head the positive class is ``positive``
    if given, else the last label in sorted order. The optimizer starts
    from zero (or ``init``) and is deterministic; ``seed`` is recorded only.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y):
        raise DimensionMismatch(f"X has shape {X.shape} but {len(y)} labels were given")
    if X.shape[0] < 2:
        raise SingleClassData("need at least two samples")
    if not np.all(np.isfinite(X)):
        raise NonFiniteFeature("feature matrix contains NaN or infinity")
    if lam < 0:
        raise ValueError("l1 strength must be nonnegative")
    if classes is None:
        classes, y_idx = _encode_labels(y, positive)
    else:
        classes = tuple(classes)
        index = {c: i for i, c in enumerate(classes)}
        try:
            y_idx = np.array([index[c] for c in y], dtype=int)
        except KeyError as exc:
            raise UnknownLabel(str(exc)) from exc
    if len(set(y_idx.tolist())) < 2:
        raise SingleClassData(f"only one class present: {classes[y_idx[0]]!r}")
    if objective is None:
        objective = "binary" if len(classes) == 2 else "multinomial"
    if objective == "binary" and len(classes) != 2:
        raise ValueError("binary objective needs exactly two classes")
    C = 1 if objective == "binary" else len(classes)

    n, d = X.shape
    scale = np.sqrt(np.mean(X * X, axis=0))
    scale[scale == 0] = 1.0
    Xs = X / scale
    penalty = lam / scale  # per-coordinate threshold weight in scaled space

    if init is not None:
        V = np.asarray(init[0], dtype=float) * scale
        b = np.asarray(init[1], dtype=float).copy()
    else:
        V = np.zeros((C, d))
        b = np.zeros(C)

    curvature = 0.25 if objective == "binary" else 0.5
    t = 1.0 / (curvature * (d + 1))  # safe: ||[Xs 1]||^2 / n <= d + 1 after RMS scaling
    t = max(t, 1e-3)

    def pen(V_):
        return float(np.sum(penalty * np.abs(V_)))

    S = Xs @ V.T + b
    obj = _loss_from_scores(S, y_idx, objective) + pen(V)
    history = [obj]
    # extrapolated point (equal to the iterate when momentum is off or reset)
    Vy, by, Sy = V, b, S
    theta = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        fy = _loss_from_scores(Sy, y_idx, objective)
        gV, gb = _grad_from_scores(Sy, Xs, y_idx, objective)
        t *= 1.25
        while True:
            V_new = soft_threshold(Vy - t * gV, t * penalty)
            b_new = by - t * gb
            dV, db = V_new - Vy, b_new - by
            S_new = Xs @ V_new.T + b_new
            f_new = _loss_from_scores(S_new, y_idx, objective)
            quad = float(np.sum(gV * dV) + np.sum(gb * db)) + (float(np.sum(dV * dV)) + float(np.sum(db * db))) / (2 * t)
            if f_new <= fy + quad + 1e-15 * max(1.0, abs(fy)):
                break
            t *= 0.5
            if t < 1e-20:
                f_new, V_new, b_new, S_new = fy, Vy, by, Sy
                break
        obj_new = f_new + pen(V_new)
        if obj_new > obj:
            if Vy is V:
                # a plain step that fails to descend is roundoff: stop here
                history.append(obj)
                break
            # momentum overshot: restart from the current iterate
            Vy, by, Sy, theta = V, b, S, 1.0
            continue
        done = obj - obj_new <= tol * max(abs(obj), 1e-12)
        if accelerate:
            theta_next = (1.0 + np.sqrt(1.0 + 4.0 * theta * theta)) / 2.0
            c = (theta - 1.0) / theta_next
            Vy = V_new + c * (V_new - V)
            by = b_new + c * (b_new - b)
            Sy = S_new + c * (S_new - S)
            theta = theta_next
        else:
            Vy, by, Sy = V_new, b_new, S_new
        V, b, S, obj = V_new, b_new, S_new, obj_new
        history.append(obj)
        if done:
            break

    W = V / scale
    return LinearModel(
        class_labels=tuple(classes),
        weights=W,
        intercepts=b,
        l1_strength=float(lam),
        objective=objective,
        space=space,
        training_meta={"seed": seed, "n_samples": int(n), "tol": tol, "max_iter": max_iter},
        history=history,
        n_iter=it,
    )


# ---------------------------------------------------------------- metrics


def accuracy_at_fdr(scores, labels, ratio: float = DEFAULT_FDR_RATIO) -> float:
    """Recall on the positive class at the loosest threshold with FP <= ratio * TP.

    Samples scoring at or above a threshold are called positive, so tied
    scores are always kept together. Returns 0 when only the empty
    selection qualifies.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise ValueError("accuracy_at_fdr needs both classes")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order])
    fp = np.cumsum(~labels[order])
    # only cut where the next score differs (end of a tie group)
    cut = np.ones(len(s), dtype=bool)
    cut[:-1] = s[:-1] != s[1:]
    ok = cut & (fp <= ratio * tp)
    if not ok.any():
        return 0.0
    return float(tp[ok].max()) / n_pos


@dataclass(frozen=True)
class Confusion:
    classes: tuple
    counts: np.ndarray

    @property
    def percentages(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        out = np.zeros(self.counts.shape)
        np.divide(100.0 * self.counts, rows, out=out, where=rows > 0)
        return out


def confusion_matrix(predictions: Sequence, labels: Sequence, classes: Optional[Sequence] = None) -> Confusion:
    """Counts with rows = true class and columns = predicted class."""
    if len(predictions) != len(labels):
        raise DimensionMismatch("predictions and labels differ in length")
    if classes is None:
        classes = sorted(set(labels) | set(predictions), key=lambda c: (str(type(c)), c))
    classes = tuple(classes)
    index = {c: i for i, c in enumerate(classes)}
    counts = np.zeros((len(classes), len(classes)), dtype=int)
    for p, t in zip(predictions, labels):
        if p not in index or t not in index:
            raise UnknownLabel(f"label {p if p not in index else t!r} not in {classes}")
        counts[index[t], index[p]] += 1
    return Confusion(classes, counts)


@dataclass
class EvalReport:
    classes: tuple
    total_accuracy: float
    per_class_accuracy: dict
    accuracy_at_fdr: dict
    confusion: np.ndarray
    fold_accuracy: list
    views: tuple = ()
    l1_strength: Optional[float] = None
    lambda_scores: dict = field(default_factory=dict)
    folds: dict = field(default_factory=dict)

    @property
    def mean_fold_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracy)) if self.fold_accuracy else float("nan")

    def to_dict(self) -> dict:
        return {
            "views": views_name(self.views) if self.views else None,
            "lambda": self.l1_strength,
            "classes": list(self.classes),
            "total_accuracy": self.total_accuracy,
            "mean_fold_accuracy": self.mean_fold_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "accuracy_at_fdr": {repr(k): v for k, v in self.accuracy_at_fdr.items()},
            "confusion": self.confusion.tolist(),
            "fold_accuracy": self.fold_accuracy,
            "lambda_scores": {repr(k): v for k, v in self.lambda_scores.items()},
            "folds": self.folds,
        }


def report_from_predictions(
    classes: Sequence,
    y_true: Sequence,
    y_pred: Sequence,
    positive_scores=None,
    fdr_ratios: Iterable[float] = (DEFAULT_FDR_RATIO,),
    fold_accuracy: Sequence[float] = (),
    **extra: Any,
) -> EvalReport:
    conf = confusion_matrix(y_pred, y_true, classes)
    total = conf.counts.sum()
    per_class = {}
    for i, c in enumerate(conf.classes):
        row = conf.counts[i].sum()
        per_class[c] = float(conf.counts[i, i] / row) if row else float("nan")
    fdr = {}
    if positive_scores is not None and len(conf.classes) == 2:
        is_pos = [t == conf.classes[-1] for t in y_true]
        if 0 < sum(is_pos) < len(is_pos):
            for r in fdr_ratios:
                fdr[float(r)] = accuracy_at_fdr(positive_scores, is_pos, r)
    return EvalReport(
        classes=conf.classes,
        total_accuracy=float(np.trace(conf.counts) / total) if total else float("nan"),
        per_class_accuracy=per_class,
        accuracy_at_fdr=fdr,
        confusion=conf.counts,
        fold_accuracy=list(fold_accuracy),
        **extra,
    )


# ---------------------------------------------------------------- cross-validation


def content_key(flow: FlowRecord) -> str:
    return hashlib.sha256((flow.to_json() + "\x00" + str(flow.label)).encode()).hexdigest()


def assign_folds(flows: Sequence[FlowRecord], k: int, seed: int = 0) -> list[int]:
    """Stratified fold ids that depend only on flow content and the seed.

    Identical flows always share a fold. Within each class the distinct
    flows are ordered by a seeded hash and dealt round-robin, continuing
    the deal across classes so fold sizes stay balanced.
    """
    keys = [content_key(f) for f in flows]
    by_class: dict = {}
    for key, flow in zip(keys, flows):
        by_class.setdefault(str(flow.label), set()).add(key)
    fold_of: dict = {}
    counter = 0
    for label in sorted(by_class):
        ranked = sorted(by_class[label], key=lambda c: hashlib.sha256(f"{seed}:{c}".encode()).hexdigest())
        for c in ranked:
            fold_of[c] = counter % k
            counter += 1
    return [fold_of[key] for key in keys]


@dataclass
class CVResult:
    report: EvalReport
    chosen_lambda: float
    lambda_accuracy: dict
    folds: list
    oof_predictions: list
    oof_scores: Optional[np.ndarray]


def cross_validate(
    flows: Sequence[FlowRecord],
    views: Iterable[str],
    k: int = 10,
    lambdas: Sequence[float] = DEFAULT_LAMBDA_GRID,
    seed: int = 0,
    objective: Optional[str] = None,
    fdr_ratios: Iterable[float] = (DEFAULT_FDR_RATIO,),
    scaler_scope: str = "fold",
    tol: float = TOL,
    max_iter: int = MAX_ITER,
    positive=None,
) -> CVResult:
    """Stratified k-fold evaluation over a lambda grid.

    The feature dictionary and Meta scaler are refit on each training fold
    (``scaler_scope="global"`` deliberately fits them once on all flows,
    for leakage experiments only). Lambda is picked by mean validation
    accuracy across folds, ties going to the larger lambda; the returned
    report pools the out-of-fold predictions at that lambda.
    """
    views = parse_views(views)
    if k < 2:
        raise TooFewSamples("k must be at least 2")
    if len(flows) < k:
        raise TooFewSamples(f"{len(flows)} samples cannot fill {k} folds")
    labels = [f.label for f in flows]
    if any(lab is None for lab in labels):
        raise UnknownLabel("every flow needs a label for training")
    classes, _ = _encode_labels(labels, positive)
    if len(classes) < 2:
        raise SingleClassData("only one class present")
    if objective is None:
        objective = "binary" if len(classes) == 2 else "multinomial"

    fold_ids = assign_folds(flows, k, seed)
    counts = np.bincount(fold_ids, minlength=k)
    if (counts == 0).any():
        raise TooFewSamples(f"only {len(set(fold_ids))} distinct folds could be filled for k={k}")

    keys = [content_key(f) for f in flows]
    grid = sorted({float(x) for x in lambdas}, reverse=True)
    global_space = fit_space(views, flows, "all") if scaler_scope == "global" else None

    preds = {lam: [None] * len(flows) for lam in grid}
    scores = {lam: np.zeros(len(flows)) for lam in grid}
    fold_acc = {lam: [] for lam in grid}
    for fold in range(k):
        train_idx = sorted((i for i in range(len(flows)) if fold_ids[i] != fold), key=lambda i: keys[i])
        test_idx = [i for i in range(len(flows)) if fold_ids[i] == fold]
        train_flows = [flows[i] for i in train_idx]
        space = global_space or fit_space(views, train_flows, f"fold{fold}")
        X_tr = space.matrix(train_flows)
        y_tr = [labels[i] for i in train_idx]
        X_te = space.matrix([flows[i] for i in test_idx])
        init = None
        for lam in grid:
            model = train(X_tr, y_tr, lam, objective, seed, tol, max_iter, classes=classes, init=init, space=space)
            init = (model.weights, model.intercepts)
            proba = model.predict_proba(X_te)
            idx = np.argmax(proba, axis=1)
            correct = 0
            for j, i in enumerate(test_idx):
                preds[lam][i] = classes[idx[j]]
                scores[lam][i] = proba[j, -1]
                correct += preds[lam][i] == labels[i]
            fold_acc[lam].append(correct / len(test_idx))

    lambda_accuracy = {lam: float(np.mean(fold_acc[lam])) for lam in grid}
    best = max(lambda_accuracy.values())
    chosen = max(lam for lam, acc in lambda_accuracy.items() if acc == best)
    report = report_from_predictions(
        classes,
        labels,
        preds[chosen],
        scores[chosen] if len(classes) == 2 else None,
        fdr_ratios,
        fold_acc[chosen],
        views=views,
        l1_strength=chosen,
        lambda_scores=lambda_accuracy,
        folds={"k": k, "seed": seed, "scheme": "stratified-content-hash", "sizes": counts.tolist()},
    )
    return CVResult(report, chosen, lambda_accuracy, fold_ids, preds[chosen], scores[chosen] if len(classes) == 2 else None)


def fit_model(
    flows: Sequence[FlowRecord],
    views: Iterable[str],
    lam: float,
    seed: int = 0,
    objective: Optional[str] = None,
    corpus_id: str = "",
    positive=None,
) -> LinearModel:
    """Fit dictionary, scaler and weights on all of ``flows``."""
    ordered = sorted(flows, key=content_key)
    space = fit_space(views, ordered, corpus_id)
    X = space.matrix(ordered)
    model = train(X, [f.label for f in ordered], lam, objective, seed, positive=positive, space=space)
    model.training_meta.update({"corpus": corpus_id, "created": corpus_id, "views": views_name(space.views)})
    return model


def corpus_digest(flows: Iterable[FlowRecord]) -> str:
    h = hashlib.sha256()
    for key in sorted(content_key(f) for f in flows):
        h.update(key.encode())
    return "sha256:" + h.hexdigest()[:16]


ABLATION_ROWS = ("Meta+SPLT+BD+TLS+SS", "Meta+SPLT+BD+TLS", "TLS", "Meta+SPLT+BD")


def ablation_table(reports: Mapping[str, EvalReport], ratio: float = DEFAULT_FDR_RATIO) -> str:
    """Aligned text table: one row per view set, total accuracy and FDR recall."""
    head = f"{'Dataset':<22}{'Total Accuracy':>16}{f'{ratio * 100:g}% FDR':>12}"
    lines = [head, "-" * len(head)]
    for name, rep in reports.items():
        fdr = rep.accuracy_at_fdr.get(ratio)
        fdr_txt = f"{100 * fdr:.1f}%" if fdr is not None else "n/a"
        lines.append(f"{name:<22}{100 * rep.total_accuracy:>15.1f}%{fdr_txt:>12}")
    return "\n".join(lines)
