"""Mini-batch consistency training and exact inference.

Each step samples a labeled and an unlabeled batch, draws M DropNode
augmentations per node from the pre-computed panel, and takes one Adam
step on supervised cross-entropy plus the warmup-weighted
confidence-filtered consistency loss. Inference propagates the full
feature matrix exactly once by power iteration, rescaled by 1 - delta.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .augment import (
    AugmentedBatch,
    MaskSampler,
    deterministic_propagate,
    random_propagate_batch,
    scatter_batch_gradient,
)
from .errors import InputError, TrainingError
from .graph import CsrGraph, FeatureMatrix, LabelTable
from .neural import (
    AdamState,
    MlpModel,
    PropagationSettings,
    adam_step,
    init_model,
    mlp_backward,
    mlp_forward,
    sharpen,
    softmax_vjp,
)
from .push import (
    PropagationWeights,
    SparsifiedPanel,
    build_panel,
    weights_for,
)

PROB_FLOOR = 1e-12
DISTANCES = ("l2", "kl")


@dataclass
class TrainConfig:
    """Every knob of the pipeline; defaults follow the tuned citation setup."""

    delta: float = 0.5
    m_aug: int = 2
    scheme: str = "ppr"
    alpha: float | None = 0.2
    order: int = 20
    r_max: float = 1e-7
    k: int = 32
    gamma: float | None = None          # None resolves to 2 / num_classes
    tau: float = 0.5
    lam_max: float = 1.5
    warmup_steps: int = 1000
    distance: str = "l2"
    batch_labeled: int = 50
    batch_unlabeled: int = 100
    unlabeled_size: int | None = None   # None takes the whole unlabeled set
    lr: float = 1e-2
    weight_decay: float = 1e-3
    clip_norm: float | None = 5.0
    num_layers: int = 2
    hidden_dim: int = 64
    max_steps: int = 3000
    eval_every: int = 10
    patience: int = 50
    seed: int = 0
    embed_mode: bool = False
    batchnorm: bool = False
    shared_mask: bool = False
    renorm_ppr: bool = False
    detach_pseudo_label: bool = True
    stop_on_loss: bool = False
    workers: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.delta < 1.0:
            raise InputError("delta must lie in [0, 1)")
        if self.m_aug < 1:
            raise InputError("m_aug must be >= 1")
        if self.gamma is not None and not 0.0 <= self.gamma < 1.0:
            raise InputError("gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise InputError("tau must lie in (0, 1]")
        if self.lam_max < 0:
            raise InputError("lam_max must be >= 0")
        if self.warmup_steps < 1:
            raise InputError("warmup_steps must be >= 1")
        if self.distance not in DISTANCES:
            raise InputError(f"distance must be one of {DISTANCES}")
        for name in ("batch_labeled", "batch_unlabeled", "k", "max_steps",
                     "eval_every", "patience", "workers"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        if self.unlabeled_size is not None and self.unlabeled_size < 0:
            raise InputError("unlabeled_size must be >= 0")
        if self.r_max <= 0:
            raise InputError("r_max must be positive")
        if self.lr <= 0:
            raise InputError("lr must be positive")

    def weights(self) -> PropagationWeights:
        return weights_for(self.scheme, self.order,
                           self.alpha if self.scheme == "ppr" else None,
                           renormalize=self.renorm_ppr)

    def resolved_gamma(self, num_classes: int) -> float:
        if self.gamma is not None:
            return self.gamma
        return 2.0 / num_classes

    def settings(self) -> PropagationSettings:
        return PropagationSettings(
            delta=self.delta, scheme=self.scheme,
            alpha=self.alpha if self.scheme == "ppr" else None, order=self.order,
        )


@dataclass
class TrainRecord:
    step: int
    sup_loss: float
    con_loss: float
    lam: float
    conf_frac: float
    val_acc: float | None = None


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)
    best_step: int = -1
    best_val: float = float("nan")
    stopped_early: bool = False

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step\tsup_loss\tcon_loss\tlambda\tconf_frac\tval_acc\n")
            for r in self.records:
                val = "" if r.val_acc is None else f"{r.val_acc:.6g}"
                fh.write(
                    f"{r.step}\t{r.sup_loss:.6g}\t{r.con_loss:.6g}\t"
                    f"{r.lam:.6g}\t{r.conf_frac:.6g}\t{val}\n"
                )


@dataclass(frozen=True)
class Predictions:
    """Class probabilities and argmax classes for every node."""

    probs: np.ndarray    # (num_nodes, C)
    classes: np.ndarray  # (num_nodes,)


def lambda_warmup(step: int, lam_max: float, warmup_steps: int) -> float:
    """Linear ramp from 0 at step 0 to lam_max at warmup_steps."""
    if warmup_steps < 1:
        raise InputError("warmup_steps must be >= 1")
    return lam_max * min(1.0, step / warmup_steps)


def subset_rng(seed: int) -> np.random.Generator:
    """The stream used for unlabeled-subset sampling at a given seed.

    Shared with the approximate command so a panel built there covers
    exactly the nodes a training run with the same seed will request.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed).spawn(3)[1]))


def sample_unlabeled_subset(unlabeled, size: int,
                            rng: np.random.Generator) -> np.ndarray:
    """Uniform without-replacement subset; the full set when size covers it."""
    ids = np.asarray(sorted(set(int(v) for v in unlabeled)), dtype=np.int64)
    if size >= ids.size:
        return ids
    if size == 0:
        return np.empty(0, dtype=np.int64)
    return np.sort(rng.choice(ids, size=size, replace=False))


def supervised_loss(preds: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Average cross-entropy over augmentations; gradient is wrt logits."""
    preds = np.asarray(preds, dtype=np.float64)
    m_aug, batch, num_classes = preds.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise InputError("labels must align with the batch axis")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= num_classes:
        raise InputError("label out of range")
    p_true = np.maximum(preds[:, np.arange(batch), labels], PROB_FLOOR)
    loss = float(-np.log(p_true).sum() / (batch * m_aug))
    onehot = np.zeros((batch, num_classes))
    onehot[np.arange(batch), labels] = 1.0
    grad_logits = (preds - onehot[None]) / (batch * m_aug)
    return loss, grad_logits


def consistency_loss(preds: np.ndarray, gamma: float, tau: float,
                     distance: str, detach_pseudo_label: bool = True
                     ) -> tuple[float, np.ndarray, int]:
    """Confidence-filtered disagreement with the sharpened average.

    The denominator stays batch * M no matter how many nodes pass the
    confidence filter. Returns (loss, grad wrt logits, confident count).
    """
    if distance not in DISTANCES:
        raise InputError(f"distance must be one of {DISTANCES}")
    preds = np.asarray(preds, dtype=np.float64)
    m_aug, batch, _ = preds.shape
    if batch == 0:
        return 0.0, np.zeros_like(preds), 0
    center = preds.mean(axis=0)
    confident = center.max(axis=1) >= gamma
    target = sharpen(center, tau)
    norm = batch * m_aug

    clamped = np.maximum(preds, PROB_FLOOR)
    if distance == "l2":
        diffs = target[None] - preds
        per = (diffs * diffs).sum(axis=2)
        grad_p = 2.0 * (preds - target[None])
    else:
        tgt = np.maximum(target, PROB_FLOOR)
        per = (tgt[None] * (np.log(tgt[None]) - np.log(clamped))).sum(axis=2)
        grad_p = -tgt[None] / clamped

    loss = float(per[:, confident].sum() / norm)
    grad_p = grad_p * confident[None, :, None] / norm

    if not detach_pseudo_label:
        # pull the gradient through sharpen(mean(preds)) as well
        if distance == "l2":
            g_target = 2.0 * m_aug * (target - center)
        else:
            tgt = np.maximum(target, PROB_FLOOR)
            g_target = (np.log(tgt[None]) - np.log(clamped) + 1.0).sum(axis=0)
        ratio = target / np.maximum(center, PROB_FLOOR)
        inner = (g_target * target).sum(axis=1, keepdims=True)
        g_center = (1.0 / tau) * ratio * (g_target - inner)
        g_center = g_center * confident[:, None] / norm
        grad_p = grad_p + g_center[None] / m_aug

    grad_logits = softmax_vjp(preds, grad_p)
    return loss, grad_logits, int(confident.sum())


class _EpochSampler:
    """Shuffled without-replacement batches; partial final batches allowed."""

    def __init__(self, ids: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.batch_size = max(1, min(batch_size, self.ids.size)) if self.ids.size else 0
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self.ids.size == 0:
            return self.ids
        if self._pos >= self._order.size:
            self._order = self.rng.permutation(self.ids)
            self._pos = 0
        batch = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch


def batch_loss_and_grads(model: MlpModel, aug: AugmentedBatch,
                         labels: np.ndarray, num_labeled: int, gamma: float,
                         tau: float, distance: str, lam: float,
                         detach_pseudo_label: bool = True,
                         embed_inputs=None, training: bool = True):
    """Loss and parameter gradients for one augmented union batch.

    The first ``num_labeled`` batch rows carry the supervised loss, the
    rest the consistency loss. ``embed_inputs`` is (panel, features,
    num_nodes) when the embedding matrix is in use; its gradient flows
    back through the propagation scatter.
    """
    m_aug, batch, _ = aug.features.shape
    probs = np.empty((m_aug, batch, model.num_classes))
    caches = []
    for m in range(m_aug):
        probs[m], cache = mlp_forward(model, aug.features[m], training=training)
        caches.append(cache)

    sup, grad_sup = supervised_loss(probs[:, :num_labeled], labels)
    con, conf_count = 0.0, 0
    grad_logits = np.zeros_like(probs)
    grad_logits[:, :num_labeled] = grad_sup
    if batch > num_labeled and lam != 0.0:
        con, grad_con, conf_count = consistency_loss(
            probs[:, num_labeled:], gamma, tau, distance, detach_pseudo_label
        )
        grad_logits[:, num_labeled:] = lam * grad_con
    elif batch > num_labeled:
        con_only, _, conf_count = consistency_loss(
            probs[:, num_labeled:], gamma, tau, distance, detach_pseudo_label
        )
        con = con_only

    loss = sup + lam * con
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss at batch (sup={sup}, con={con})")

    grads = None
    grad_inputs = np.empty_like(aug.features)
    for m in range(m_aug):
        g, grad_inputs[m] = mlp_backward(model, caches[m], grad_logits[m])
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]

    if model.embed is not None:
        if embed_inputs is None:
            raise InputError("embed mode requires embed_inputs")
        panel, features, num_nodes = embed_inputs
        grad_hidden = scatter_batch_gradient(panel, aug, grad_inputs, num_nodes)
        touched = np.unique(np.concatenate(
            [panel.row(int(s)).indices for s in aug.nodes]
        )) if aug.nodes.size else np.empty(0, dtype=np.int64)
        if touched.size:
            x_rows = _gather_feature_rows(features, touched)
            grads[0] = grads[0] + x_rows.T @ grad_hidden[touched]
    return loss, grads, (sup, con, conf_count)


def _gather_feature_rows(features: FeatureMatrix, indices) -> np.ndarray:
    if features.is_sparse:
        return features._sparse[indices].toarray()
    return features.dense()[indices]


def _propagated_eval_inputs(model: MlpModel, graph: CsrGraph,
                            features: FeatureMatrix,
                            weights: PropagationWeights, delta: float) -> np.ndarray:
    """Exact inference-style inputs: propagate (1 - delta)-scaled features."""
    if model.embed is not None:
        hidden = features.dense() @ model.embed
        return deterministic_propagate(graph, hidden, weights, 1.0 - delta)
    return deterministic_propagate(graph, features, weights, 1.0 - delta)


def train(config: TrainConfig, graph: CsrGraph, features: FeatureMatrix,
          labels: LabelTable, panel: SparsifiedPanel | None = None,
          log_path=None) -> tuple[MlpModel, TrainLog]:
    """Run the full pipeline; returns the best-validation model and log."""
    config.validate()
    if not labels.train:
        raise InputError("training requires a non-empty train split")
    num_classes = labels.num_classes
    gamma = config.resolved_gamma(num_classes)
    weights = config.weights()

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    rng_init = np.random.Generator(np.random.PCG64(seeds[0]))
    rng_subset = subset_rng(config.seed)
    rng_shuffle = np.random.Generator(np.random.PCG64(seeds[2]))

    labeled = np.asarray(sorted(labels.train), dtype=np.int64)
    unlabeled_all = np.setdiff1d(
        np.arange(graph.num_nodes, dtype=np.int64), labeled, assume_unique=False
    )
    subset_size = (config.unlabeled_size if config.unlabeled_size is not None
                   else unlabeled_all.size)
    unlabeled = sample_unlabeled_subset(unlabeled_all, subset_size, rng_subset)

    panel_nodes = np.union1d(labeled, unlabeled)
    if panel is None:
        panel = build_panel(graph, panel_nodes, weights, config.r_max,
                            config.k, workers=config.workers)
    else:
        expected = (config.scheme, config.alpha if config.scheme == "ppr" else None,
                    config.order, config.r_max, config.k)
        got = (panel.params.scheme, panel.params.alpha, panel.params.order,
               panel.params.r_max, panel.params.k)
        if expected != got:
            raise InputError(f"panel params {got} disagree with config {expected}")
        missing = [int(s) for s in panel_nodes if s not in panel]
        if missing:
            raise InputError(f"panel lacks rows for {len(missing)} required nodes")

    model = init_model(rng_init, features.num_features, config.hidden_dim,
                       num_classes, config.num_layers, embed=config.embed_mode,
                       batchnorm=config.batchnorm)
    adam = AdamState(lr=config.lr, weight_decay=config.weight_decay,
                     clip_norm=config.clip_norm)
    sampler = MaskSampler(config.seed, config.delta,
                          shared_per_augmentation=config.shared_mask,
                          num_nodes=graph.num_nodes)
    label_arr = {int(n): int(c) for n, c in labels.labels.items()}
    labeled_stream = _EpochSampler(labeled, config.batch_labeled, rng_shuffle)
    unlabeled_stream = _EpochSampler(unlabeled, config.batch_unlabeled, rng_shuffle)
    valid_ids = np.asarray(sorted(labels.valid), dtype=np.int64)

    eval_inputs = None
    if valid_ids.size and not config.embed_mode:
        eval_inputs = _propagated_eval_inputs(model, graph, features, weights,
                                              config.delta)

    log = TrainLog()
    best = model.copy()
    best_metric = -np.inf
    evals_since_best = 0
    embed_inputs = (panel, features, graph.num_nodes) if config.embed_mode else None

    for step in range(config.max_steps):
        batch_l = labeled_stream.next()
        batch_u = unlabeled_stream.next()
        batch = np.concatenate([batch_l, batch_u])
        lam = lambda_warmup(step, config.lam_max, config.warmup_steps)

        if config.embed_mode:
            hidden = np.zeros((graph.num_nodes, model.embed.shape[1]))
            touched = np.unique(np.concatenate(
                [panel.row(int(s)).indices for s in batch]
            ))
            hidden[touched] = _gather_feature_rows(features, touched) @ model.embed
            aug = random_propagate_batch(panel, hidden, batch, config.delta,
                                         config.m_aug, sampler, step)
        else:
            aug = random_propagate_batch(panel, features, batch, config.delta,
                                         config.m_aug, sampler, step)

        batch_labels = np.array([label_arr[int(s)] for s in batch_l], dtype=np.int64)
        try:
            loss, grads, (sup, con, conf_count) = batch_loss_and_grads(
                model, aug, batch_labels, batch_l.size, gamma, config.tau,
                config.distance, lam,
                detach_pseudo_label=config.detach_pseudo_label,
                embed_inputs=embed_inputs,
            )
            adam_step(adam, model.parameters(), grads)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}") from exc

        conf_frac = conf_count / batch_u.size if batch_u.size else 0.0
        record = TrainRecord(step=step, sup_loss=sup, con_loss=con, lam=lam,
                             conf_frac=conf_frac)

        if valid_ids.size and (step + 1) % config.eval_every == 0:
            if config.embed_mode:
                eval_inputs = _propagated_eval_inputs(model, graph, features,
                                                      weights, config.delta)
            val_probs, _ = mlp_forward(model, eval_inputs[valid_ids], training=False)
            val_pred = val_probs.argmax(axis=1)
            truth = np.array([label_arr[int(s)] for s in valid_ids])
            val_acc = float((val_pred == truth).mean())
            record.val_acc = val_acc
            if config.stop_on_loss:
                p_true = np.maximum(val_probs[np.arange(truth.size), truth], PROB_FLOOR)
                metric = float(np.log(p_true).mean())  # higher is better
            else:
                metric = val_acc
            if metric >= best_metric:
                # ties keep the latest checkpoint; strict gains reset patience
                if metric > best_metric:
                    evals_since_best = 0
                else:
                    evals_since_best += 1
                best_metric = metric
                best = model.copy()
                log.best_step = step
                log.best_val = val_acc
            else:
                evals_since_best += 1
            log.records.append(record)
            if evals_since_best >= config.patience:
                log.stopped_early = True
                break
        else:
            log.records.append(record)

    model.load_values(best if log.best_step >= 0 else model)
    if log_path is not None:
        log.write_tsv(log_path)
    return model, log


def infer(model: MlpModel, graph: CsrGraph, features: FeatureMatrix,
          settings: PropagationSettings, renormalize_ppr: bool = False) -> Predictions:
    """Exact predictions for every node via one power-iteration pass."""
    if features.num_features != model.input_dim:
        raise InputError(
            f"feature dim {features.num_features} does not match model "
            f"input dim {model.input_dim}"
        )
    weights = weights_for(settings.scheme, settings.order,
                          settings.alpha if settings.scheme == "ppr" else None,
                          renormalize=renormalize_ppr)
    inputs = _propagated_eval_inputs(model, graph, features, weights, settings.delta)
    probs, _ = mlp_forward(model, inputs, training=False)
    return Predictions(probs=probs, classes=probs.argmax(axis=1).astype(np.int64))


def evaluate(predictions: Predictions, labels, split) -> float:
    """Fraction of argmax matches over the split."""
    label_map: Mapping[int, int]
    label_map = labels.labels if isinstance(labels, LabelTable) else labels
    ids = list(split)
    if not ids:
        raise InputError("cannot evaluate an empty split")
    hits = 0
    for node in ids:
        node = int(node)
        if node < 0 or node >= predictions.classes.size:
            raise InputError(f"node {node} outside prediction domain")
        if node not in label_map:
            raise InputError(f"node {node} has no label")
        hits += int(predictions.classes[node] == label_map[node])
    return hits / len(ids)
