"""Progressive training and the cached forward pass.

A model of depth ``K`` is trained in ``K + 1`` stages. Stage ``s`` feeds
``[X, X~1, ..., X~s]`` through base MLPs ``0..s``, concatenates their outputs
and classifies them with a stage-specific head. Each aggregate ``X~k`` is
computed once, by NAP over the embeddings of base MLP ``k-1`` at the start of
stage ``k``, and then served from the cache for the rest of training and for
inference. The graph is therefore read exactly ``K`` times per run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import privacy as pv
from .dpoptim import Adam, DpConfig, clip_and_noise, poisson_sample
from .graph import Graph, SplitMasks, bound_degree
from .nap import AggregateCache, NapConfig, cached_nap
from .nn import Mlp, cross_entropy, jk_concat, jk_split, predict

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 2
    hidden_dim: int = 16
    base_layers: int = 1
    head_layers: int = 1
    norm: str = "auto"
    dtype: str = "float32"
    freeze_prior: bool = False

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be non-negative")
        if self.base_layers < 1 or self.head_layers < 1:
            raise ValueError("MLPs need at least one layer")
        if self.norm not in ("auto",) + Mlp.NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")

    def resolved_norm(self, level: str) -> str:
        """Batch norm by default; group norm whenever samples must stay separable."""
        if self.norm == "auto":
            return "group" if level == "node" else "batch"
        if level == "node" and self.norm == "batch":
            raise ValueError("node-level training cannot use batch norm (it mixes samples)")
        return self.norm


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.01
    patience: Optional[int] = None
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be positive")


class ProgapModel:
    """Base MLPs for stages ``0..stage``, the current head, and the aggregate cache."""

    def __init__(self, in_dim: int, num_classes: int, config: ModelConfig,
                 nap_config: NapConfig, norm: str, seed: int = 0):
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.config = config
        self.nap_config = nap_config
        self.norm = norm
        self.seed = seed
        self.dtype = np.dtype(config.dtype)
        self.cache = AggregateCache()
        self.bases: list[Mlp] = []
        self.head: Mlp | None = None
        self.stage = -1
        self.expand()

    @property
    def depth(self) -> int:
        return self.config.depth

    def _base_dims(self, k: int) -> list[int]:
        h = self.config.hidden_dim
        return [self.in_dim if k == 0 else h] + [h] * self.config.base_layers

    def _head_dims(self, s: int) -> list[int]:
        h = self.config.hidden_dim
        return [(s + 1) * h] + [h] * (self.config.head_layers - 1) + [self.num_classes]

    def expand(self) -> None:
        """Move to the next stage: add a base MLP and replace the head."""
        s = self.stage + 1
        if s > self.depth:
            raise ValueError("model is already at full depth")
        self.bases.append(Mlp(self._base_dims(s), norm=self.norm, seed=self._init_seed("base", s),
                              dtype=self.dtype))
        self.head = Mlp(self._head_dims(s), norm=self.norm, plain_last=True,
                        seed=self._init_seed("head", s), dtype=self.dtype)
        self.stage = s

    def _init_seed(self, kind: str, s: int) -> int:
        return int(np.random.SeedSequence([self.seed, s, kind == "head"]).generate_state(1)[0])

    def parameters(self, trainable_only: bool = False) -> dict[str, np.ndarray]:
        """Named references to the current stage's parameters."""
        first = self.stage if trainable_only and self.config.freeze_prior else 0
        out = {}
        for k in range(first, self.stage + 1):
            out.update({f"base{k}.{n}": p for n, p in self.bases[k].params.items()})
        out.update({f"head{self.stage}.{n}": p for n, p in self.head.params.items()})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for k, mlp in enumerate(self.bases):
            out.update({f"base{k}.{n}": v for n, v in mlp.state_dict().items()})
        out.update({f"head{self.stage}.{n}": v for n, v in self.head.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, mlp in enumerate(self.bases):
            prefix = f"base{k}."
            mlp.load_state_dict({n[len(prefix):]: v for n, v in state.items() if n.startswith(prefix)})
        prefix = f"head{self.stage}."
        self.head.load_state_dict({n[len(prefix):]: v for n, v in state.items() if n.startswith(prefix)})

    # forward / backward over cached inputs

    def stage_inputs(self, x: np.ndarray, s: int | None = None) -> list[np.ndarray]:
        s = self.stage if s is None else s
        missing = [k for k in range(1, s + 1) if k not in self.cache]
        if missing:
            raise ValueError(f"aggregates for stages {missing} are not cached")
        return [np.asarray(x, dtype=self.dtype)] + [self.cache[k] for k in range(1, s + 1)]

    def forward(self, inputs: list[np.ndarray], train: bool = False):
        """Logits of the current stage for row-aligned ``inputs``; returns ``(logits, caches)``."""
        if len(inputs) != self.stage + 1:
            raise ValueError(f"stage {self.stage} needs {self.stage + 1} inputs, got {len(inputs)}")
        embeds, caches = [], []
        for mlp, x in zip(self.bases, inputs):
            out, c = mlp.forward(x, train=train)
            embeds.append(out)
            caches.append(c)
        logits, head_cache = self.head.forward(jk_concat(embeds), train=train)
        return logits, (caches, head_cache)

    def backward(self, caches, dlogits: np.ndarray, per_sample: bool = False,
                 trainable_only: bool = True) -> dict[str, np.ndarray]:
        base_caches, head_cache = caches
        grads = {}
        head_grads, djk = self.head.backward(head_cache, dlogits, per_sample=per_sample)
        grads.update({f"head{self.stage}.{n}": g for n, g in head_grads.items()})
        first = self.stage if trainable_only and self.config.freeze_prior else 0
        widths = [m.out_dim for m in self.bases]
        for k, dk in enumerate(jk_split(djk, widths)):
            if k < first:
                continue
            # aggregates are cached constants, so nothing flows past base k's input
            g, _ = self.bases[k].backward(base_caches[k], dk, per_sample=per_sample)
            grads.update({f"base{k}.{n}": v for n, v in g.items()})
        return grads

    def embed(self, inputs: list[np.ndarray], k: int) -> np.ndarray:
        return self.bases[k].forward(inputs[k], train=False)[0]


def ensure_cache(model: ProgapModel, s: int, graph: Graph | None, x: np.ndarray) -> None:
    """Populate aggregates ``1..s`` (the ``if not cached`` branch of the forward pass)."""
    x = np.asarray(x, dtype=model.dtype)
    prev = x
    for k in range(1, s + 1):
        if k not in model.cache:
            emb = model.bases[k - 1].forward(prev, train=False)[0]
            cached_nap(model.cache, k, graph, emb, model.nap_config)
        prev = model.cache[k]


def forward_stage(model: ProgapModel, s: int, graph: Graph | None, x=None, mode: str = "eval"):
    """Logits of submodel ``s`` over all nodes.

    ``s`` must equal the model's current stage (earlier heads are discarded
    during training). Missing aggregates are computed through NAP, which
    requires ``graph``; with a full cache the graph is never touched.
    """
    if s != model.stage:
        raise ValueError(f"model holds the head of stage {model.stage}, not {s}")
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if x is None:
        if graph is None:
            raise ValueError("need node features")
        x = graph.features
    ensure_cache(model, s, graph, x)
    logits, _ = model.forward(model.stage_inputs(x, s), train=mode == "train")
    return logits


def early_stop(history, patience: int | None) -> tuple[bool, int]:
    """Return ``(stop, best)`` where ``best`` is the 1-based argmax epoch (earliest on ties).

    Stops once ``patience`` epochs have passed without a new best.
    """
    if len(history) == 0:
        raise ValueError("history is empty")
    best = int(np.argmax(history)) + 1
    stop = patience is not None and len(history) - best >= patience
    return stop, best


def _accuracy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    if not mask.any():
        return math.nan
    return float(np.mean(predict(logits[mask]) == labels[mask]))


def evaluate(model: ProgapModel, graph: Graph, masks: SplitMasks, split: str = "test") -> float:
    """Accuracy on a split, computed from cached aggregates only."""
    logits = forward_stage(model, model.stage, None, graph.features)
    return _accuracy(logits, graph.labels, masks.get(split))


def resolve_privacy(spec: pv.PrivacySpec, n_train: int, train_config: TrainConfig,
                    depth: int) -> pv.PrivacySpec:
    """Fill the run-dependent fields of ``spec`` and calibrate noise if needed."""
    spec = replace(spec, depth=depth)
    if spec.level == "node":
        batch = min(train_config.batch_size, n_train - 1)
        steps = math.ceil(n_train / batch)
        spec = replace(spec, batch_size=batch, num_nodes=n_train,
                       iterations=train_config.epochs * steps)
    needs = spec.level != "none" and (
        spec.sigma_ap is None or (spec.level == "node" and spec.sigma_gp is None))
    if needs:
        spec = pv.calibrate(spec)
    return spec


def train_progressive(
    graph: Graph,
    masks: SplitMasks,
    model_config: ModelConfig,
    privacy: pv.PrivacySpec,
    train_config: TrainConfig,
    on_stage_end: Callable[[ProgapModel], None] | None = None,
):
    """Train all ``K + 1`` stages; returns ``(model, metrics, report)``.

    Edge-level and non-private runs use full-batch Adam with per-stage early
    stopping on validation accuracy. Node-level runs bound the out-degree to
    ``privacy.max_degree``, then train each stage for a fixed number of
    epochs with DP-Adam over Poisson batches.
    """
    level = privacy.level
    norm = model_config.resolved_norm(level)
    train_idx = np.flatnonzero(masks.train)
    spec = resolve_privacy(privacy, train_idx.size, train_config, model_config.depth)
    report = pv.account(spec)

    if level == "node":
        graph = bound_degree(graph, spec.max_degree, seed=train_config.seed)
    nap_sigma = spec.sigma_ap if (level != "none" and model_config.depth) else 0.0
    model = ProgapModel(graph.features.shape[1], graph.num_classes, model_config,
                        NapConfig(sigma=nap_sigma, seed=train_config.seed), norm,
                        seed=train_config.seed)
    x = np.asarray(graph.features, dtype=model.dtype)
    labels = graph.labels
    metrics: list[dict] = []
    global_step = 0

    for s in range(model_config.depth + 1):
        if s > 0:
            model.expand()
        ensure_cache(model, s, graph, x)
        inputs = model.stage_inputs(x, s)
        train_inputs = [a[train_idx] for a in inputs]
        params = model.parameters(trainable_only=True)
        opt = Adam(params, lr=train_config.learning_rate)

        if level == "node":
            global_step = _train_stage_dp(model, s, inputs, train_inputs, labels, train_idx,
                                          masks, opt, spec, train_config, metrics, global_step)
        else:
            _train_stage_full(model, s, inputs, train_inputs, labels, train_idx, masks,
                              opt, train_config, metrics)
        if on_stage_end is not None:
            on_stage_end(model)

    return model, metrics, report


def _log_epoch(metrics, model, s, epoch, inputs, labels, masks, loss):
    logits, _ = model.forward(inputs, train=False)
    rec = {
        "stage": s,
        "epoch": epoch,
        "train_acc": _accuracy(logits, labels, masks.train),
        "val_acc": _accuracy(logits, labels, masks.val),
        "loss": loss,
    }
    metrics.append(rec)
    log.debug("stage %d epoch %d loss %.4f val %.4f", s, epoch, loss, rec["val_acc"])
    return rec


def _check_loss(loss, s, epoch):
    if not math.isfinite(loss):
        raise TrainingDivergence(f"non-finite loss {loss} at stage {s}, epoch {epoch}")


def _train_stage_full(model, s, inputs, train_inputs, labels, train_idx, masks, opt,
                      cfg: TrainConfig, metrics):
    y = labels[train_idx]
    history = []
    best_state = None
    for epoch in range(1, cfg.epochs + 1):
        logits, caches = model.forward(train_inputs, train=True)
        loss, dlogits = cross_entropy(logits, y)
        _check_loss(loss, s, epoch)
        opt.step(model.backward(caches, dlogits))
        rec = _log_epoch(metrics, model, s, epoch, inputs, labels, masks, loss)
        if math.isnan(rec["val_acc"]):
            continue
        history.append(rec["val_acc"])
        stop, best = early_stop(history, cfg.patience)
        if best == len(history):
            best_state = model.state_dict()
        if stop:
            break
    if best_state is not None:
        model.load_state_dict(best_state)


def _train_stage_dp(model, s, inputs, train_inputs, labels, train_idx, masks, opt,
                    spec: pv.PrivacySpec, cfg: TrainConfig, metrics, global_step: int) -> int:
    n_train = train_idx.size
    q = spec.sample_rate
    steps = spec.iterations // cfg.epochs
    dp = DpConfig(clip=spec.clip, noise_std=spec.sigma_gp or 0.0, sample_rate=q, seed=cfg.seed)
    y = labels[train_idx]
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(steps):
            step = global_step
            global_step += 1
            batch = poisson_sample(n_train, q, cfg.seed, step)
            if batch.size == 0:
                # still release the noise, as the mechanism prescribes
                empty = {k: np.zeros((0,) + p.shape, p.dtype) for k, p in opt.params.items()}
                opt.step(clip_and_noise(empty, dp, n_train, step))
                continue
            logits, caches = model.forward([a[batch] for a in train_inputs], train=True)
            loss, dlogits = cross_entropy(logits, y[batch])
            _check_loss(loss, s, epoch)
            losses.append(loss)
            # per-sample gradients of each sample's own loss, not of the batch mean
            per_sample = model.backward(caches, dlogits * batch.size, per_sample=True)
            opt.step(clip_and_noise(per_sample, dp, n_train, step))
        _log_epoch(metrics, model, s, epoch, inputs, labels, masks,
                   float(np.mean(losses)) if losses else math.nan)
    return global_step
