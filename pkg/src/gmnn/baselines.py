"""Reference methods run on the same graphs and splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import make_optimizer, masked_cross_entropy, add
from .em import (EMConfig, EMHistory, _labeled, pretrain_q, run_training_phase,
                 sample_labels, split_accs)
from .graphdata import Graph, make_label_features, normalize_adjacency, one_hot
from .models import build_qnet, q_forward, row_softmax


@dataclass
class LPConfig:
    alpha: float = 0.99
    iterations: int = 100

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")


def label_propagation(g: Graph, cfg: LPConfig | None = None) -> np.ndarray:
    """Diffuse one-hot seed labels over the symmetrically normalized
    adjacency (no self-loops): F <- alpha S F + (1 - alpha) Y.

    Returns per-node predictions; nodes no mass reaches fall to class 0.
    """
    cfg = cfg or LPConfig()
    spread = normalize_adjacency(g, add_self_loops=False, dtype=np.float64)
    train = _labeled(g.split.train, g.labels)
    seeds = np.zeros((g.num_nodes, g.num_classes), dtype=np.float64)
    seeds[train, g.labels[train]] = 1.0
    f = seeds.copy()
    for _ in range(cfg.iterations):
        f = cfg.alpha * spread.matmul(f) + (1.0 - cfg.alpha) * seeds
    return np.argmax(f, axis=1).astype(np.int64)


def self_training(g: Graph, cfg: EMConfig, *, features=None):
    """q annotates the unlabeled nodes and then trains on its own
    annotations, with the same iteration and epoch budget as the EM loop.
    Returns (qnet, history) with the best-validation snapshot restored."""
    features = g.features if features is None else features
    rng = np.random.default_rng(cfg.seed)
    adj = normalize_adjacency(g)
    history = EMHistory()

    qnet = build_qnet(g.num_features, g.num_classes, cfg.hidden, cfg.q_arch,
                      cfg.input_dropout, rng=rng)
    pretrain_q(g, qnet, cfg, features=features, adj=adj, rng=rng, history=history)

    def q_accs():
        return split_accs(q_forward(qnet, adj, features), g)

    accs = q_accs()
    history.add_iteration(0, accs["val"], accs["test"], None, None)
    best_val = -np.inf if accs["val"] is None else accs["val"]
    best_snap, best_it = qnet.snapshot(), 0

    train = _labeled(g.split.train, g.labels)
    unlabeled = np.setdiff1d(np.arange(g.num_nodes), train)
    hard = one_hot(g.labels, g.num_classes)
    opt = make_optimizer(cfg.optimizer, qnet.params(), cfg.lr, cfg.weight_decay)

    for it in range(1, cfg.max_iterations + 1):
        probs_q = row_softmax(q_forward(qnet, adj, features).data.astype(np.float64))
        states = sample_labels(probs_q, g, cfg, rng)
        targets = np.mean([make_label_features(st, dtype=np.float64) for st in states], axis=0)

        def make_loss(r):
            logits = q_forward(qnet, adj, features, training=True, rng=r)
            loss = masked_cross_entropy(logits, targets, unlabeled)
            if train.size:
                loss = add(loss, masked_cross_entropy(logits, hard, train))
            return loss

        run_training_phase(qnet, make_loss, cfg.epochs_q, opt, rng=rng,
                           eval_fn=q_accs, selection=cfg.selection,
                           history=history, iteration=it, phase="q", role="q")
        accs = q_accs()
        history.add_iteration(it, accs["val"], accs["test"], None, None)
        if accs["val"] is not None and accs["val"] > best_val:
            best_val, best_snap, best_it = accs["val"], qnet.snapshot(), it

    if cfg.selection:
        qnet.load_snapshot(best_snap)
    history.best_iteration = best_it
    return qnet, history
