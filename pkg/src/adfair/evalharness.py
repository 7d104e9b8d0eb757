"""Zero-shot, few-shot and transfer evaluation of a trained checkpoint."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fairmetrics as fm
from .model import ModelParams, encode_image, encode_text
from .numkernel import log_softmax_rows, softmax_rows

SCENARIOS = ("zero_shot", "few_shot", "transfer")
REPRESENTATIONS = ("v", "h_v", "h_concat")


class ScenarioError(ValueError):
    pass


class StratificationError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    kind: str = "zero_shot"
    label_fraction: float = 0.10
    probe_steps: int = 500
    probe_lr: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ScenarioError(f"unknown scenario {self.kind!r}; choose from {SCENARIOS}")
        if not 0 < self.label_fraction <= 1:
            raise ScenarioError(f"label_fraction must be in (0, 1], got {self.label_fraction}")


@dataclass
class ProbeResult:
    W: np.ndarray
    b: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    train_acc: float
    eval_acc: float = float("nan")
    eval_scores: np.ndarray = field(default=None, repr=False)

    def scores(self, X) -> np.ndarray:
        return softmax_rows(((X - self.mean) / self.scale) @ self.W + self.b).output


def representation(params: ModelParams, ds, repr_: str = "v") -> np.ndarray:
    if repr_ not in REPRESENTATIONS:
        raise ScenarioError(f"unknown representation {repr_!r}; choose from {REPRESENTATIONS}")
    h_v, v = encode_image(params, ds.images)
    if repr_ == "v":
        return v
    if repr_ == "h_v":
        return h_v
    h_u, _ = encode_text(params, ds.tokens, ds.masks)
    return np.concatenate([h_v, h_u], axis=1)


def zero_shot_scores(params: ModelParams, images, prompts) -> np.ndarray:
    """Softmax over cosine similarity to each class prototype, divided by tau."""
    if prompts.tokens.shape[0] != params.arch.C_cls:
        raise ScenarioError(
            f"{prompts.tokens.shape[0]} prompts for {params.arch.C_cls} classes; need one per class"
        )
    _, protos = encode_text(params, prompts.tokens, prompts.masks)
    _, v = encode_image(params, images)
    return softmax_rows(v @ protos.T / params.tau).output


def zero_shot_eval(params: ModelParams, test_set, prompts) -> fm.Predictions:
    scores = zero_shot_scores(params, test_set.images, prompts)
    return fm.Predictions(test_set.group, test_set.label, scores, test_set.sample_id)


def stratified_subsample(labels, fraction: float, n_classes: int, seed: int) -> np.ndarray:
    """Seeded per-class draw of ``round(fraction * n_c)`` indices."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        k = int(round(fraction * idx.size))
        if k < 1:
            raise StratificationError(
                f"class {c} absent from the {fraction:.0%} subsample ({idx.size} available)"
            )
        chosen.append(rng.choice(idx, size=k, replace=False))
    return np.sort(np.concatenate(chosen))


def fit_linear_probe(X, y, n_classes: int, steps: int = 500, lr: float = 0.1) -> ProbeResult:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardised with the training statistics; weights start
    at zero so the fit is deterministic.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    mean = X.mean(axis=0, keepdims=True)
    scale = X.std(axis=0, keepdims=True)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    n, d = Z.shape
    W = np.zeros((d, n_classes))
    b = np.zeros((1, n_classes))
    onehot = np.eye(n_classes)[y]
    for _ in range(steps):
        probs = np.exp(log_softmax_rows(Z @ W + b).output)
        g = (probs - onehot) / n
        W -= lr * (Z.T @ g)
        b -= lr * g.sum(axis=0, keepdims=True)
    result = ProbeResult(W, b, mean, scale, train_acc=0.0)
    result.train_acc = float(np.mean(np.argmax(result.scores(X), axis=1) == y) * 100.0)
    return result


def few_shot_probe(params: ModelParams, train_set, eval_set, fraction: float = 0.10,
                   target: str = "disease", repr_: str = "v", steps: int = 500,
                   lr: float = 0.1, seed: int = 0) -> ProbeResult:
    """Train a linear probe on frozen features of a stratified ``fraction``
    of ``train_set``; score ``eval_set``."""
    if target == "disease":
        y_train, y_eval, n_cls = train_set.label, eval_set.label, params.arch.C_cls
    elif target == "attribute":
        y_train, y_eval, n_cls = train_set.group, eval_set.group, params.arch.C_attr
    else:
        raise ScenarioError(f"unknown probe target {target!r}")
    idx = stratified_subsample(y_train, fraction, n_cls, seed)
    X_train = representation(params, train_set.subset(idx), repr_)
    probe = fit_linear_probe(X_train, y_train[idx], n_cls, steps, lr)
    scores = probe.scores(representation(params, eval_set, repr_))
    probe.eval_scores = scores
    probe.eval_acc = float(np.mean(np.argmax(scores, axis=1) == y_eval) * 100.0)
    return probe


def attribute_probe_accuracy(params: ModelParams, train_set, eval_set, fraction: float = 1.0,
                             repr_: str = "h_concat", seed: int = 0) -> float:
    return few_shot_probe(params, train_set, eval_set, fraction, "attribute", repr_,
                          seed=seed).eval_acc


def scenario_predictions(scenario: ScenarioConfig, params: ModelParams, datasets: dict) -> fm.Predictions:
    """``datasets`` needs ``test`` and, for zero-shot, ``prompts``; probe
    scenarios need ``train`` (the labelled pool the probe samples from)."""
    test = datasets["test"]
    if scenario.kind == "zero_shot":
        return zero_shot_eval(params, test, datasets["prompts"])
    probe = few_shot_probe(params, datasets["train"], test, scenario.label_fraction,
                           "disease", "v", scenario.probe_steps, scenario.probe_lr,
                           scenario.seed)
    return fm.Predictions(test.group, test.label, probe.eval_scores, test.sample_id)


def run_scenario(scenario: ScenarioConfig, params: ModelParams, datasets: dict,
                 out_dir=None, attribute: str = "group", gauc_mode: str = "label-free",
                 extra: dict | None = None):
    """Evaluate one scenario; returns ``{attribute: MetricTable}``.

    With ``out_dir`` set, writes ``predictions_<scenario>_<attribute>.csv``
    and ``report_<scenario>.json``.
    """
    if attribute != "group":
        raise ScenarioError(f"datasets carry a single sensitive attribute 'group', not {attribute!r}")
    preds = scenario_predictions(scenario, params, datasets)
    table = fm.metric_table(preds, gauc_mode)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fm.write_predictions(out / f"predictions_{scenario.kind}_{attribute}.csv", preds)
        report = {
            "scenario": scenario.kind,
            "label_fraction": scenario.label_fraction if scenario.kind != "zero_shot" else None,
            "gauc_mode": gauc_mode,
            "n_test": int(preds.label.size),
            "tables": {attribute: table.to_dict()},
        }
        if extra:
            report.update(extra)
        (out / f"report_{scenario.kind}.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n"
        )
    return {attribute: table}
