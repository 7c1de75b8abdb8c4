"""Pseudolikelihood EM over a pair of graph networks.

One network (q) predicts labels from attributes; the other (p) predicts a
node's label from its neighbors' label vectors. Training alternates:
q annotates the unlabeled nodes, p trains on the annotated graph (M-step),
then p's predictive distributions become soft targets for q (E-step).
Ground-truth labels stay pinned throughout; final predictions come from q.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import Tape, add, backward, make_optimizer, masked_cross_entropy, scale
from .graphdata import Graph, LabelStates, make_label_features, normalize_adjacency, one_hot
from .models import (accuracy, build_pnet, build_qnet, p_forward, predict,
                     q_forward, row_softmax)

STRATEGIES = ("single", "multi", "annealing", "max_pool", "mean_pool")


@dataclass
class EMConfig:
    strategy: str = "annealing"
    num_samples: int = 10            # draws per expectation under the multi strategy
    tau: float = 0.1                 # annealing temperature
    epochs_pretrain: int = 100
    epochs_p: int = 100
    epochs_q: int = 100
    max_iterations: int = 10
    use_attrs_in_p: bool = False
    selection: bool = True           # keep the best-validation snapshot
    seed: int = 0
    optimizer: str = "rmsprop"
    lr: float = 0.05
    weight_decay: float = 5e-4
    input_dropout: float = 0.5
    hidden: int = 16
    q_arch: str = "gc2"
    p_arch: str = "gc2"
    exclude_self_label: bool = False
    binarize: bool = True            # applied by the task drivers, not here
    fp_iters: int = 20               # fixed-point sweeps per non-amortized E-step
    fp_damping: float = 0.5

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.num_samples < 1:
            raise ValueError("num_samples must be at least 1")
        if min(self.epochs_pretrain, self.epochs_p, self.epochs_q) < 1:
            raise ValueError("epoch counts must be at least 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if not 0.0 <= self.input_dropout < 1.0:
            raise ValueError("input_dropout must be in [0, 1)")
        if not 0.0 < self.fp_damping < 1.0:
            raise ValueError("fp_damping must be in (0, 1)")

    def replace(self, **kw) -> "EMConfig":
        args = {f.name: getattr(self, f.name) for f in fields(self)}
        args.update(kw)
        return EMConfig(**args)


_CSV_COLUMNS = ("iteration", "phase", "epoch", "loss",
                "val_acc_q", "val_acc_p", "test_acc_q", "test_acc_p")


@dataclass
class EMHistory:
    epochs: list = field(default_factory=list)
    iterations: list = field(default_factory=list)
    best_iteration: int | None = None

    def add_epoch(self, iteration: int, phase: str, epoch: int, loss: float,
                  accs: dict | None, role: str) -> None:
        row = {c: None for c in _CSV_COLUMNS}
        row.update(iteration=iteration, phase=phase, epoch=epoch, loss=loss)
        if accs:
            row[f"val_acc_{role}"] = accs.get("val")
            row[f"test_acc_{role}"] = accs.get("test")
        self.epochs.append(row)

    def add_iteration(self, iteration: int, val_q, test_q, val_p, test_p) -> None:
        self.iterations.append({"iteration": iteration, "val_acc_q": val_q,
                                "test_acc_q": test_q, "val_acc_p": val_p,
                                "test_acc_p": test_p})

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(_CSV_COLUMNS)
        def cell(v):
            return "" if v is None else (repr(float(v)) if isinstance(v, float) else v)
        for row in self.epochs:
            writer.writerow([cell(row[c]) for c in _CSV_COLUMNS])
        for row in self.iterations:
            writer.writerow([row["iteration"], "iteration", "", "",
                             cell(row["val_acc_q"]), cell(row["val_acc_p"]),
                             cell(row["test_acc_q"]), cell(row["test_acc_p"])])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    def q_val_by_iteration(self) -> list:
        return [r["val_acc_q"] for r in self.iterations]


# ---------------------------------------------------------------------------
# shared phase runner


def _labeled(idx: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return idx[labels[idx] >= 0]


def split_accs(logits, g: Graph) -> dict:
    out = {"val": None, "test": None}
    val = _labeled(g.split.val, g.labels)
    test = _labeled(g.split.test, g.labels)
    if val.size:
        out["val"] = accuracy(logits, g.labels, val)
    if test.size:
        out["test"] = accuracy(logits, g.labels, test)
    return out


def run_training_phase(net, make_loss, epochs: int, opt, *, rng,
                       eval_fn=None, selection: bool = True,
                       history: EMHistory | None = None, iteration: int = 0,
                       phase: str = "", role: str = "q"):
    """Train for a fixed number of epochs, optionally restoring the
    best-validation snapshot afterwards. Returns that best accuracy."""
    best_val, best_snap = -np.inf, None
    for ep in range(epochs):
        with Tape() as tape:
            loss = make_loss(rng)
        backward(tape, loss)
        opt.step()
        accs = eval_fn() if eval_fn is not None else None
        if history is not None:
            history.add_epoch(iteration, phase, ep, loss.item(), accs, role)
        if selection and accs is not None and accs.get("val") is not None:
            if accs["val"] > best_val:
                best_val, best_snap = accs["val"], net.snapshot()
    if best_snap is not None:
        net.load_snapshot(best_snap)
    return best_val if best_val > -np.inf else None


# ---------------------------------------------------------------------------
# EM pieces


def pretrain_q(g: Graph, qnet, cfg: EMConfig, *, features=None, adj=None,
               rng=None, history: EMHistory | None = None):
    """Supervised training of q on the labeled split alone."""
    features = g.features if features is None else features
    adj = normalize_adjacency(g) if adj is None else adj
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    train = _labeled(g.split.train, g.labels)
    if train.size == 0:
        raise ValueError("pretraining needs at least one labeled train node")
    targets = one_hot(g.labels, g.num_classes)
    opt = make_optimizer(cfg.optimizer, qnet.params(), cfg.lr, cfg.weight_decay)

    def make_loss(r):
        logits = q_forward(qnet, adj, features, training=True, rng=r)
        return masked_cross_entropy(logits, targets, train)

    def eval_fn():
        return split_accs(q_forward(qnet, adj, features), g)

    return run_training_phase(qnet, make_loss, cfg.epochs_pretrain, opt, rng=rng,
                              eval_fn=eval_fn, selection=cfg.selection,
                              history=history, iteration=0, phase="pretrain", role="q")


def _sharpen(probs: np.ndarray, tau: float) -> np.ndarray:
    logp = np.log(np.maximum(probs, 1e-300)) / tau
    logp -= logp.max(axis=1, keepdims=True)
    e = np.exp(logp)
    return e / e.sum(axis=1, keepdims=True)


def _categorical_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cum = np.cumsum(probs, axis=1)
    cum /= cum[:, -1:]
    u = rng.random((probs.shape[0], 1))
    return np.minimum((u > cum).sum(axis=1), probs.shape[1] - 1).astype(np.int64)


def sample_labels(q_probs: np.ndarray, g: Graph, cfg: EMConfig,
                  rng: np.random.Generator) -> list[LabelStates]:
    """Annotate the graph: ground truth on the train split, strategy-driven
    labels everywhere else. Returns one state set per sample (multiple only
    under the multi strategy)."""
    n, k = q_probs.shape
    train = _labeled(g.split.train, g.labels)
    unlabeled = np.setdiff1d(np.arange(n), train, assume_unique=False)

    def base() -> LabelStates:
        st = LabelStates(n, k)
        st.set_observed(train, g.labels[train])
        return st

    out = []
    if cfg.strategy == "mean_pool":
        st = base()
        st.set_soft(unlabeled, q_probs[unlabeled])
        out.append(st)
    elif cfg.strategy == "max_pool":
        st = base()
        st.set_sampled(unlabeled, np.argmax(q_probs[unlabeled], axis=1))
        out.append(st)
    else:
        draws = cfg.num_samples if cfg.strategy == "multi" else 1
        probs = _sharpen(q_probs, cfg.tau) if cfg.strategy == "annealing" else q_probs
        for _ in range(draws):
            st = base()
            st.set_sampled(unlabeled, _categorical_rows(probs, rng)[unlabeled])
            out.append(st)
    return out


def _scaled_mean(losses):
    total = losses[0]
    for term in losses[1:]:
        total = add(total, term)
    if len(losses) > 1:
        total = scale(total, 1.0 / len(losses))
    return total


def m_step(g: Graph, pnet, states: list[LabelStates], cfg: EMConfig, *,
           attrs=None, adj=None, first_adj=None, opt=None, rng=None,
           history: EMHistory | None = None, iteration: int = 0):
    """Train p to predict each node's annotation from its neighborhood.

    The loss averages the full-graph cross-entropy over the sampled label
    sets; targets coincide with the input label vectors."""
    adj = normalize_adjacency(g) if adj is None else adj
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    opt = opt or make_optimizer(cfg.optimizer, pnet.params(), cfg.lr, cfg.weight_decay)
    feats = [make_label_features(st) for st in states]
    everyone = np.arange(g.num_nodes)

    def make_loss(r):
        losses = []
        for f in feats:
            logits = p_forward(pnet, adj, f, attrs, training=True, rng=r,
                               first_adj=first_adj)
            losses.append(masked_cross_entropy(logits, f, everyone))
        return _scaled_mean(losses)

    def eval_fn():
        return split_accs(p_forward(pnet, adj, feats[0], attrs, first_adj=first_adj), g)

    return run_training_phase(pnet, make_loss, cfg.epochs_p, opt, rng=rng,
                              eval_fn=eval_fn, selection=cfg.selection,
                              history=history, iteration=iteration, phase="p", role="p")


def p_soft_targets(g: Graph, pnet, states: list[LabelStates], *, attrs=None,
                   adj=None, first_adj=None) -> np.ndarray:
    """p's predictive distribution per node, averaged over the sampled label
    sets, with ground truth pinned on the train split."""
    adj = normalize_adjacency(g) if adj is None else adj
    acc = None
    for st in states:
        feats = make_label_features(st)
        probs = row_softmax(p_forward(pnet, adj, feats, attrs, first_adj=first_adj)
                            .data.astype(np.float64))
        acc = probs if acc is None else acc + probs
    targets = acc / len(states)
    train = _labeled(g.split.train, g.labels)
    targets[train] = one_hot(g.labels[train], g.num_classes, dtype=np.float64)
    return targets


def e_step(g: Graph, qnet, pnet, states: list[LabelStates], cfg: EMConfig, *,
           features=None, adj=None, p_adj=None, p_first_adj=None, attrs=None,
           opt=None, rng=None, history: EMHistory | None = None, iteration: int = 0):
    """Train q toward p's predictions on unlabeled nodes plus the ground
    truth on labeled ones."""
    features = g.features if features is None else features
    adj = normalize_adjacency(g) if adj is None else adj
    p_adj = adj if p_adj is None else p_adj
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    opt = opt or make_optimizer(cfg.optimizer, qnet.params(), cfg.lr, cfg.weight_decay)
    targets = p_soft_targets(g, pnet, states, attrs=attrs, adj=p_adj,
                             first_adj=p_first_adj)
    train = _labeled(g.split.train, g.labels)
    unlabeled = np.setdiff1d(np.arange(g.num_nodes), train)
    hard = one_hot(g.labels, g.num_classes)

    def make_loss(r):
        logits = q_forward(qnet, adj, features, training=True, rng=r)
        loss = masked_cross_entropy(logits, targets, unlabeled)
        if train.size:
            loss = add(loss, masked_cross_entropy(logits, hard, train))
        return loss

    def eval_fn():
        return split_accs(q_forward(qnet, adj, features), g)

    return run_training_phase(qnet, make_loss, cfg.epochs_q, opt, rng=rng,
                              eval_fn=eval_fn, selection=cfg.selection,
                              history=history, iteration=iteration, phase="q", role="q")


# ---------------------------------------------------------------------------
# full loop


def train_gmnn(g: Graph, cfg: EMConfig, *, features=None):
    """Alternate M- and E-steps after pretraining q; return (qnet, pnet,
    history) with q restored to its best-validation snapshot."""
    features = g.features if features is None else features
    rng = np.random.default_rng(cfg.seed)
    adj = normalize_adjacency(g)
    p_first_adj = (normalize_adjacency(g, add_self_loops=False)
                   if cfg.exclude_self_label else None)
    attrs = features if cfg.use_attrs_in_p else None
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

    if cfg.max_iterations == 0:
        history.best_iteration = 0
        return qnet, None, history

    # p is created only now so the pretrain RNG stream matches a plain q run
    pnet = build_pnet(g.num_classes, cfg.hidden, cfg.p_arch,
                      num_attr_features=g.num_features if cfg.use_attrs_in_p else 0,
                      input_dropout=cfg.input_dropout, rng=rng)
    opt_q = make_optimizer(cfg.optimizer, qnet.params(), cfg.lr, cfg.weight_decay)
    opt_p = make_optimizer(cfg.optimizer, pnet.params(), cfg.lr, cfg.weight_decay)

    for it in range(1, cfg.max_iterations + 1):
        probs_q = row_softmax(q_forward(qnet, adj, features).data.astype(np.float64))
        states = sample_labels(probs_q, g, cfg, rng)
        m_step(g, pnet, states, cfg, attrs=attrs, adj=adj, first_adj=p_first_adj,
               opt=opt_p, rng=rng, history=history, iteration=it)
        e_step(g, qnet, pnet, states, cfg, features=features, adj=adj, p_adj=adj,
               p_first_adj=p_first_adj, attrs=attrs, opt=opt_q, rng=rng,
               history=history, iteration=it)
        accs = q_accs()
        p_accs = split_accs(p_forward(pnet, adj, make_label_features(states[0]),
                                      attrs, first_adj=p_first_adj), g)
        history.add_iteration(it, accs["val"], accs["test"], p_accs["val"], p_accs["test"])
        if accs["val"] is not None and accs["val"] > best_val:
            best_val, best_snap, best_it = accs["val"], qnet.snapshot(), it

    if cfg.selection:
        qnet.load_snapshot(best_snap)
        history.best_iteration = best_it
    else:
        history.best_iteration = cfg.max_iterations
    return qnet, pnet, history


# ---------------------------------------------------------------------------
# non-amortized inference


def fixed_point_inference(g: Graph, pnet, iterations: int = 20, damping: float = 0.5, *,
                          attrs=None, adj=None, first_adj=None, num_samples: int = 1,
                          exact: bool = False, rng: np.random.Generator | None = None,
                          init: np.ndarray | None = None,
                          max_exact_assignments: int = 1_000_000) -> np.ndarray:
    """Iterate the mean-field stationarity condition with a fixed p.

    Each node's distribution is updated toward softmax of the expected
    log-probability p assigns to it under the current distributions of the
    other unlabeled nodes (sampled, or enumerated exactly when exact=True);
    damping is the weight kept on the old table. Labeled train rows stay
    pinned to their one-hot ground truth.
    """
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must be in [0, 1)")
    n, k = g.num_nodes, g.num_classes
    adj = normalize_adjacency(g) if adj is None else adj
    train = _labeled(g.split.train, g.labels)
    unlabeled = np.setdiff1d(np.arange(n), train)
    pinned = one_hot(g.labels[train], k, dtype=np.float64)

    if init is None:
        table = np.full((n, k), 1.0 / k, dtype=np.float64)
    else:
        table = np.array(init, dtype=np.float64)
    if train.size:
        table[train] = pinned

    if exact:
        count = k ** unlabeled.size
        if count > max_exact_assignments:
            raise ValueError(f"exact mode would enumerate {count} assignments")
    elif rng is None:
        rng = np.random.default_rng(0)

    assign = np.full(n, -1, dtype=np.int64)
    if train.size:
        assign[train] = g.labels[train]

    def log_p(feats: np.ndarray) -> np.ndarray:
        logits = p_forward(pnet, adj, feats.astype(np.float32), attrs,
                           first_adj=first_adj).data.astype(np.float64)
        m = logits.max(axis=1, keepdims=True)
        shifted = logits - m
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    for _ in range(iterations):
        expected = np.zeros((n, k), dtype=np.float64)
        if exact:
            for combo in itertools.product(range(k), repeat=unlabeled.size):
                assign[unlabeled] = combo
                weight = float(np.prod(table[unlabeled, list(combo)])) if unlabeled.size else 1.0
                if weight == 0.0:
                    continue
                expected += weight * log_p(one_hot(assign, k, dtype=np.float64))
        else:
            for _s in range(num_samples):
                assign[unlabeled] = _categorical_rows(table[unlabeled], rng)
                expected += log_p(one_hot(assign, k, dtype=np.float64)) / num_samples
        expected -= expected.max(axis=1, keepdims=True)
        fresh = np.exp(expected)
        fresh /= fresh.sum(axis=1, keepdims=True)
        table = damping * table + (1.0 - damping) * fresh
        if train.size:
            table[train] = pinned
    return table


def train_nonamortized(g: Graph, cfg: EMConfig, *, features=None):
    """EM with a free per-node distribution table instead of q.

    p trains exactly as usual on labels sampled from the table; the E-step
    runs damped fixed-point sweeps. Returns (table, pnet, history); the
    table is the best-validation snapshot."""
    rng = np.random.default_rng(cfg.seed)
    adj = normalize_adjacency(g)
    p_first_adj = (normalize_adjacency(g, add_self_loops=False)
                   if cfg.exclude_self_label else None)
    attrs = (g.features if features is None else features) if cfg.use_attrs_in_p else None
    history = EMHistory()
    n, k = g.num_nodes, g.num_classes

    table = np.full((n, k), 1.0 / k, dtype=np.float64)
    train = _labeled(g.split.train, g.labels)
    if train.size:
        table[train] = one_hot(g.labels[train], k, dtype=np.float64)

    pnet = build_pnet(k, cfg.hidden, cfg.p_arch,
                      num_attr_features=attrs.shape[1] if attrs is not None else 0,
                      input_dropout=cfg.input_dropout, rng=rng)
    opt_p = make_optimizer(cfg.optimizer, pnet.params(), cfg.lr, cfg.weight_decay)

    def table_accs(t):
        preds = np.argmax(t, axis=1)
        out = {"val": None, "test": None}
        val = _labeled(g.split.val, g.labels)
        test = _labeled(g.split.test, g.labels)
        if val.size:
            out["val"] = float(np.mean(preds[val] == g.labels[val]))
        if test.size:
            out["test"] = float(np.mean(preds[test] == g.labels[test]))
        return out

    best_val, best_table, best_it = -np.inf, table.copy(), 0
    for it in range(1, cfg.max_iterations + 1):
        states = sample_labels(table, g, cfg, rng)
        m_step(g, pnet, states, cfg, attrs=attrs, adj=adj, first_adj=p_first_adj,
               opt=opt_p, rng=rng, history=history, iteration=it)
        table = fixed_point_inference(g, pnet, iterations=cfg.fp_iters,
                                      damping=cfg.fp_damping, attrs=attrs, adj=adj,
                                      first_adj=p_first_adj, rng=rng, init=table)
        accs = table_accs(table)
        history.add_iteration(it, accs["val"], accs["test"], None, None)
        if accs["val"] is not None and accs["val"] > best_val:
            best_val, best_table, best_it = accs["val"], table.copy(), it

    history.best_iteration = best_it
    return (best_table if cfg.selection else table), pnet, history
