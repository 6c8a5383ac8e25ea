"""scikit-learn style classifier wrapping progressive private training."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .graph import Graph, SplitMasks
from .nn import predict_proba as _softmax
from .privacy import PrivacySpec, default_delta
from .trainer import ModelConfig, TrainConfig, forward_stage, train_progressive
from .validation import check_adjacency, check_node_mask, check_semi_supervised_labels


class ProgapClassifier(ClassifierMixin, BaseEstimator):
    """Transductive node classifier trained progressively with private aggregation.

    ``fit`` sees the whole graph: ``X`` holds features for every node and
    ``y`` uses ``-1`` for unlabeled nodes, as in
    ``sklearn.semi_supervised``. After fitting, ``predict`` needs only node
    features; neighborhood information comes from aggregates cached during
    training, so no further privacy budget is spent.

    Parameters
    ----------
    depth : int
        Number of aggregation stages ``K``.
    privacy : {"edge", "node", "none"}
    epsilon : float
        Target budget; ``inf`` trains without noise.
    delta : float or "auto"
        ``"auto"`` uses ``1 / (10 * #edges)`` at edge level and
        ``1 / (10 * #nodes)`` at node level.
    epochs : int or None
        Per-stage epochs; ``None`` means 100 (edge/none) or 10 (node).
    """

    def __init__(self, depth=2, hidden_dim=16, base_layers=1, head_layers=1,
                 privacy="edge", epsilon=math.inf, delta="auto", max_degree=100,
                 clip=1.0, batch_size=256, epochs=None, learning_rate=0.01,
                 patience=None, freeze_prior=False, random_state=0):
        self.depth = depth
        self.hidden_dim = hidden_dim
        self.base_layers = base_layers
        self.head_layers = head_layers
        self.privacy = privacy
        self.epsilon = epsilon
        self.delta = delta
        self.max_degree = max_degree
        self.clip = clip
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.patience = patience
        self.freeze_prior = freeze_prior
        self.random_state = random_state

    def _privacy_spec(self, graph: Graph) -> PrivacySpec:
        level = self.privacy
        if level not in ("edge", "node", "none"):
            raise ValueError(f"privacy must be 'edge', 'node' or 'none', got {level!r}")
        if self.epsilon is None or math.isinf(self.epsilon):
            level = "none"
        delta = self.delta
        if delta == "auto":
            units = graph.num_nodes if level == "node" else graph.num_edges
            delta = default_delta(units)
        eps = None if level == "none" else float(self.epsilon)
        return PrivacySpec(level, float(delta), self.depth, max_degree=self.max_degree,
                           clip=self.clip, epsilon=eps)

    def fit(self, X, y, adjacency=None, val_mask=None):
        """Train on the labeled nodes of the graph given by ``adjacency``.

        ``val_mask`` selects labeled nodes held out for early stopping.
        """
        X = check_array(X, dtype=np.float64)
        n = X.shape[0]
        if adjacency is None:
            raise ValueError("ProgapClassifier.fit needs the graph adjacency")
        src, dst = check_adjacency(adjacency, n)
        self.classes_, encoded, labeled = check_semi_supervised_labels(y, n)
        val = check_node_mask(val_mask, n, "val_mask") & labeled
        train = labeled & ~val
        masks = SplitMasks(train, val, ~labeled)

        graph = Graph.from_edges(src, dst, X, encoded, len(self.classes_))
        spec = self._privacy_spec(graph)
        epochs = self.epochs or (10 if spec.level == "node" else 100)
        model_cfg = ModelConfig(depth=self.depth, hidden_dim=self.hidden_dim,
                                base_layers=self.base_layers, head_layers=self.head_layers,
                                freeze_prior=self.freeze_prior)
        train_cfg = TrainConfig(epochs=epochs, learning_rate=self.learning_rate,
                                patience=self.patience, batch_size=self.batch_size,
                                seed=self.random_state)
        self.model_, self.history_, self.privacy_report_ = train_progressive(
            graph, masks, model_cfg, spec, train_cfg)
        self.n_features_in_ = X.shape[1]
        self.n_nodes_ = n
        return self

    @property
    def epsilon_(self) -> float:
        check_is_fitted(self, "privacy_report_")
        return self.privacy_report_.epsilon

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape != (self.n_nodes_, self.n_features_in_):
            raise ValueError(
                f"X must hold features of the {self.n_nodes_} training-graph nodes "
                f"({self.n_features_in_} columns); got shape {X.shape}")
        return forward_stage(self.model_, self.model_.stage, None, X)

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        check_is_fitted(self, "classes_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
