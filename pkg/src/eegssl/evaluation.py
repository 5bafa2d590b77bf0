"""Downstream evaluation: frozen-encoder probing, fine-tuning, metrics,
masking ablation grids, and noise-robustness curves."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import EegDataset, NoiseSpec, perturb_dataset
from .embedding import EmbedConfig
from .masking import MaskConfig
from .networks import EncoderConfig, Model, build_model, standardize_rows
from .training import EmaSchedule, LossConfig, TrainConfig, pretrain

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricReport:
    """Classification metrics; auroc is None unless the task is binary."""

    accuracy: float
    balanced_accuracy: float
    weighted_f1: float
    auroc: float | None
    per_class_recall: dict[int, float]

    def as_row(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "balanced_accuracy": self.balanced_accuracy,
            "weighted_f1": self.weighted_f1,
            "auroc": "" if self.auroc is None else self.auroc,
        }


def extract_representations(
    dataset: EegDataset, model: Model, encoder: str = "context", batch_size: int = 256
) -> np.ndarray:
    """Pooled per-window representations from the frozen model.

    Runs the full unmasked sequence through the embedding and the chosen
    encoder, then mean-pools over patch positions. "target" probes the
    EMA encoder (with its usual row normalization) instead of the
    gradient-trained context encoder.
    """
    if encoder not in ("context", "target"):
        raise ValueError(f"encoder must be 'context' or 'target', got {encoder!r}")
    model.eval()
    out = []
    x_all = torch.as_tensor(dataset.stacked(), dtype=torch.float32)
    with torch.no_grad():
        for start in range(0, x_all.shape[0], batch_size):
            patches = model.patchify(x_all[start : start + batch_size])
            if encoder == "context":
                reps = model.context_encoder(patches)
            else:
                reps = standardize_rows(model.target_encoder(patches))
            out.append(reps.mean(dim=1).numpy())
    return np.concatenate(out, axis=0)


# -- linear probe ----------------------------------------------------------


@dataclass
class LinearProbe:
    """Multinomial logistic regression fitted on frozen representations."""

    weights: np.ndarray  # (K, D)
    bias: np.ndarray  # (K,)
    feature_mean: np.ndarray
    feature_std: np.ndarray
    classes: np.ndarray

    def scores(self, reps: np.ndarray) -> np.ndarray:
        """Class probabilities, shape (n, K)."""
        x = (reps - self.feature_mean) / self.feature_std
        logits = x @ self.weights.T + self.bias
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, reps: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(reps), axis=1)]


def fit_linear_probe(
    reps: np.ndarray,
    labels: np.ndarray,
    l2_penalty: float = 1e-4,
    tol: float = 1e-6,
    max_iter: int = 10_000,
) -> LinearProbe:
    """Full-batch gradient descent with backtracking, run to convergence.

    The objective is mean cross-entropy plus l2_penalty * ||W||^2 on the
    standardized features; starting from zero weights the whole fit is
    deterministic, and duplicating the training set leaves it unchanged.
    """
    classes, y_idx = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes in the training labels")
    mean = reps.mean(axis=0)
    std = reps.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    x = (reps - mean) / std
    n, d = x.shape
    k = classes.size
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y_idx] = 1.0

    w = np.zeros((k, d))
    b = np.zeros(k)

    def loss_and_grad(w, b):
        logits = x @ w.T + b
        logits = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(logits).sum(axis=1))
        loss = float(np.mean(log_z - logits[np.arange(n), y_idx])) + l2_penalty * float((w**2).sum())
        p = np.exp(logits - log_z[:, None])
        g = p - onehot
        grad_w = g.T @ x / n + 2.0 * l2_penalty * w
        grad_b = g.mean(axis=0)
        return loss, grad_w, grad_b

    loss, grad_w, grad_b = loss_and_grad(w, b)
    step = 1.0
    for _ in range(max_iter):
        while True:
            w_new = w - step * grad_w
            b_new = b - step * grad_b
            new_loss, new_gw, new_gb = loss_and_grad(w_new, b_new)
            if new_loss <= loss or step < 1e-12:
                break
            step *= 0.5
        improved = loss - new_loss
        w, b, grad_w, grad_b = w_new, b_new, new_gw, new_gb
        loss = new_loss
        step = min(step * 1.5, 1e4)
        if improved < tol:
            break
    return LinearProbe(weights=w, bias=b, feature_mean=mean, feature_std=std, classes=classes)


def linear_probe(
    train_reps: np.ndarray,
    train_labels: np.ndarray,
    test_reps: np.ndarray,
    test_labels: np.ndarray,
    l2_penalty: float = 1e-4,
) -> MetricReport:
    """Fit on train representations, report metrics on the test set."""
    probe = fit_linear_probe(train_reps, train_labels, l2_penalty=l2_penalty)
    scores = probe.scores(test_reps)
    return compute_metrics(test_labels, scores=scores, class_order=probe.classes)


# -- metrics ----------------------------------------------------------------


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def auroc_rank(truth: np.ndarray, score: np.ndarray) -> float:
    """Area under the ROC curve via the midrank statistic (ties at 0.5)."""
    truth = np.asarray(truth)
    positive = truth == truth.max()
    n_pos = int(positive.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both classes present in the truth labels")
    ranks = _midranks(np.asarray(score, dtype=np.float64))
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def compute_metrics(
    truth: np.ndarray,
    scores: np.ndarray | None = None,
    predicted: np.ndarray | None = None,
    class_order: np.ndarray | None = None,
) -> MetricReport:
    """Accuracy, balanced accuracy (mean per-class recall), support-weighted
    F1, and AUROC for binary tasks with scores.

    scores: (n, K) class scores in class_order (defaults to sorted unique
    truth labels); either scores or predicted labels must be given.
    """
    truth = np.asarray(truth)
    if predicted is None:
        if scores is None:
            raise ValueError("need scores or predicted labels")
        scores = np.asarray(scores)
        if class_order is None:
            class_order = np.unique(truth)
        if scores.ndim == 1:
            scores = np.stack([1.0 - scores, scores], axis=1)
        predicted = np.asarray(class_order)[np.argmax(scores, axis=1)]
    predicted = np.asarray(predicted)

    classes = np.unique(truth)
    accuracy = float((predicted == truth).mean())
    recalls: dict[int, float] = {}
    f1_values = []
    supports = []
    for c in classes:
        in_class = truth == c
        support = int(in_class.sum())
        tp = int((predicted[in_class] == c).sum())
        fp = int((predicted[~in_class] == c).sum())
        recall = tp / support
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        recalls[int(c)] = recall
        f1_values.append(f1)
        supports.append(support)
    balanced = float(np.mean(list(recalls.values())))
    weighted_f1 = float(np.average(f1_values, weights=supports))

    auroc = None
    if classes.size == 2 and scores is not None:
        order = np.asarray(class_order if class_order is not None else classes)
        positive_col = int(np.argmax(order == classes.max()))
        auroc = auroc_rank(truth, scores[:, positive_col])

    return MetricReport(
        accuracy=accuracy,
        balanced_accuracy=balanced,
        weighted_f1=weighted_f1,
        auroc=auroc,
        per_class_recall=recalls,
    )


# -- fine-tuning -------------------------------------------------------------


@dataclass
class FineTuneResult:
    model: Model
    head: nn.Linear
    report: MetricReport
    eval_loss: float


def fine_tune(
    model: Model,
    train: EegDataset,
    eval_set: EegDataset,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 64,
    seed: int = 0,
    init: str = "pretrained",
) -> FineTuneResult:
    """Supervised training of the whole model plus a linear head.

    init="random" rebuilds the model from scratch (the fully supervised
    baseline); epochs=0 just evaluates the freshly attached zero head.
    """
    if init not in ("pretrained", "random"):
        raise ValueError(f"init must be 'pretrained' or 'random', got {init!r}")
    if init == "random":
        model = build_model(
            model.embed.cfg, model.enc_cfg, model.embed.in_channels, model.embed.length, seed
        )
    torch.set_num_threads(1)

    labels = train.labels()
    classes = np.unique(labels)
    class_to_idx = {int(c): i for i, c in enumerate(classes)}
    y = torch.as_tensor([class_to_idx[int(v)] for v in labels], dtype=torch.long)
    x = torch.as_tensor(train.stacked(), dtype=torch.float32)

    head = nn.Linear(model.enc_cfg.embed_dim, classes.size)
    head.weight.data.zero_()
    head.bias.data.zero_()

    params = list(model.trainable_parameters()) + list(head.parameters())
    optimizer = torch.optim.Adam(params, lr=lr)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(seed)

    model.train()
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            pooled = model.context_encoder(model.patchify(x[idx])).mean(dim=1)
            logits = head(pooled)
            loss = loss_fn(logits, y[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    model.eval()
    eval_labels = eval_set.labels()
    eval_y = torch.as_tensor([class_to_idx[int(v)] for v in eval_labels], dtype=torch.long)
    with torch.no_grad():
        pooled = model.context_encoder(
            model.patchify(torch.as_tensor(eval_set.stacked(), dtype=torch.float32))
        ).mean(dim=1)
        logits = head(pooled)
        eval_loss = float(loss_fn(logits, eval_y))
        scores = logits.softmax(dim=1).numpy()
    report = compute_metrics(eval_labels, scores=scores, class_order=classes)
    return FineTuneResult(model=model, head=head, report=report, eval_loss=eval_loss)


# -- experiment harnesses ----------------------------------------------------


def ablation_sweep(
    train: EegDataset,
    val: EegDataset,
    test: EegDataset,
    embed_cfg: EmbedConfig,
    enc_cfg: EncoderConfig,
    mask_cfg: MaskConfig,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    strategies: list[str],
    mask_ratios: list[float],
    preserve_blocks: list[int],
    seeds: list[int],
    csv_path: str | Path | None = None,
) -> list[dict]:
    """Pretrain + probe for every (strategy, ratio, blocks, seed) cell."""
    import dataclasses

    rows = []
    train_labels = train.labels()
    test_labels = test.labels()
    for strategy in strategies:
        for ratio in mask_ratios:
            for blocks in preserve_blocks:
                for seed in seeds:
                    cell_mask = dataclasses.replace(
                        mask_cfg, strategy=strategy, mask_ratio=ratio, preserve_blocks=blocks
                    )
                    model = build_model(
                        embed_cfg, enc_cfg, train.num_channels, train.num_steps, seed
                    )
                    pretrain(
                        train, val, model, cell_mask, loss_cfg, train_cfg, seed=seed
                    )
                    report = linear_probe(
                        extract_representations(train, model),
                        train_labels,
                        extract_representations(test, model),
                        test_labels,
                    )
                    row = {
                        "strategy": strategy,
                        "mask_ratio": ratio,
                        "preserve_blocks": blocks,
                        "seed": seed,
                        **report.as_row(),
                    }
                    rows.append(row)
                    logger.info("sweep cell %s", row)
    if csv_path is not None:
        _write_csv(csv_path, rows)
    return rows


def robustness_eval(
    model: Model,
    train: EegDataset,
    test: EegDataset,
    noise_kinds: list[str],
    magnitudes: list[float],
    seed: int = 0,
    csv_path: str | Path | None = None,
    plot_path: str | Path | None = None,
) -> list[dict]:
    """Probe accuracy under each noise kind across severities.

    The probe is fitted once on clean training representations; magnitude 0
    reproduces the clean test accuracy exactly.
    """
    probe = fit_linear_probe(extract_representations(train, model), train.labels())
    test_labels = test.labels()
    rows = []
    for kind_index, kind in enumerate(noise_kinds):
        spec = NoiseSpec(kind=kind)
        for mag_index, magnitude in enumerate(magnitudes):
            noise_seed = int(
                np.random.SeedSequence([seed, kind_index, mag_index]).generate_state(1)[0]
            )
            noisy = perturb_dataset(test, spec, magnitude, noise_seed)
            scores = probe.scores(extract_representations(noisy, model))
            report = compute_metrics(test_labels, scores=scores, class_order=probe.classes)
            rows.append({"kind": kind, "magnitude": magnitude, **report.as_row()})
    if csv_path is not None:
        _write_csv(csv_path, rows)
    if plot_path is not None:
        _plot_robustness(plot_path, rows, noise_kinds)
    return rows


def _plot_robustness(path: str | Path, rows: list[dict], kinds: list[str]):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for kind in kinds:
        points = [(r["magnitude"], r["accuracy"]) for r in rows if r["kind"] == kind]
        xs, ys = zip(*sorted(points))
        ax.plot(xs, ys, marker="o", label=kind)
    ax.set_xlabel("noise magnitude")
    ax.set_ylabel("probe accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _write_csv(path: str | Path, rows: list[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
