"""Task drivers: object classification, link classification on line graphs,
unsupervised representation learning, and result aggregation.

Every driver runs one or more seeds, collects a scalar metric per seed and
returns a RunResult whose JSON report is byte-deterministic.
"""

from __future__ import annotations

import json
import multiprocessing
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .autodiff import SparseMatrix, make_optimizer, masked_cross_entropy
from .baselines import LPConfig, label_propagation, self_training
from .em import EMConfig, EMHistory, run_training_phase, train_gmnn, train_nonamortized
from .graphdata import (Graph, Split, binarize_features, line_graph_from_edges,
                        normalize_adjacency, one_hot)
from .models import (accuracy, build_pnet, build_qnet, extract_representations,
                     GnnModel, LayerSpec, p_forward, predict, q_forward, row_softmax)

OBJECT_METHODS = ("gmnn", "gcn", "lp", "self-train", "gmnn-nonamortized")
LINK_METHODS = ("gmnn", "gcn", "lp", "self-train")
UNSUP_METHODS = ("gmnn", "gcn")   # gcn = pretrained q alone, no EM smoothing


# ---------------------------------------------------------------------------
# metrics and aggregation


def binary_f1(preds: np.ndarray, truth: np.ndarray, positive: int) -> float:
    """F1 of the given class; 0 when there is nothing to score."""
    preds = np.asarray(preds)
    truth = np.asarray(truth)
    tp = int(np.sum((preds == positive) & (truth == positive)))
    fp = int(np.sum((preds == positive) & (truth != positive)))
    fn = int(np.sum((preds != positive) & (truth == positive)))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2.0 * tp / denom


def aggregate(values) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("aggregate needs at least one value")
    mean = float(arr.mean())
    std = 0.0 if arr.size == 1 else float(arr.std(ddof=1))
    return mean, std


def render_mean_std(mean: float, std: float, decimals: int = 3) -> str:
    """Render fractions as percentages, e.g. '83.675 ± 0.900'."""
    return f"{mean * 100:.{decimals}f} ± {std * 100:.{decimals}f}"


@dataclass
class RunResult:
    task: str
    method: str
    config: dict
    seeds: list[int]
    per_seed: list[float]
    histories: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return aggregate(self.per_seed)[0]

    @property
    def std(self) -> float:
        return aggregate(self.per_seed)[1]

    def to_report(self) -> dict:
        mean, std = aggregate(self.per_seed)
        return {"task": self.task, "method": self.method, "config": self.config,
                "seeds": [int(s) for s in self.seeds],
                "per_seed": [float(v) for v in self.per_seed],
                "mean": mean, "std": std}

    def to_json(self) -> str:
        return json.dumps(self.to_report(), sort_keys=True, indent=2) + "\n"


def _config_dict(cfg: EMConfig, dataset: str, **extra) -> dict:
    doc = asdict(cfg)
    doc["dataset"] = dataset
    doc.update(extra)
    return doc


def _run_seeds(worker, arg_lists, parallel: int = 1):
    if parallel > 1:
        with multiprocessing.Pool(parallel) as pool:
            return pool.map(worker, arg_lists)
    return [worker(a) for a in arg_lists]


# ---------------------------------------------------------------------------
# object classification


def _object_seed(args):
    g, features, method, cfg, lp_cfg, seed = args
    cfg = cfg.replace(seed=seed)
    if method == "lp":
        preds = label_propagation(g, lp_cfg)
        history = EMHistory()
    elif method == "self-train":
        qnet, history = self_training(g, cfg, features=features)
        preds = predict(q_forward(qnet, normalize_adjacency(g), features))
    elif method == "gmnn-nonamortized":
        table, _pnet, history = train_nonamortized(g, cfg, features=features)
        preds = np.argmax(table, axis=1)
    elif method in ("gmnn", "gcn"):
        run_cfg = cfg.replace(max_iterations=0) if method == "gcn" else cfg
        qnet, _pnet, history = train_gmnn(g, run_cfg, features=features)
        preds = predict(q_forward(qnet, normalize_adjacency(g), features))
    else:
        raise ValueError(f"unknown object-classification method: {method!r}")
    test = g.split.test
    metric = float(np.mean(preds[test] == g.labels[test]))
    return metric, history


def run_object_classification(g: Graph, method: str, cfg: EMConfig, seeds,
                              lp_cfg: LPConfig | None = None, parallel: int = 1,
                              dataset: str = "") -> RunResult:
    """Transductive node classification; the metric is test accuracy."""
    if method not in OBJECT_METHODS:
        raise ValueError(f"unknown object-classification method: {method!r}")
    seeds = [int(s) for s in seeds]
    features = binarize_features(g).features if cfg.binarize else g.features
    results = _run_seeds(_object_seed,
                         [(g, features, method, cfg, lp_cfg, s) for s in seeds],
                         parallel)
    return RunResult(task="object", method=method,
                     config=_config_dict(cfg, dataset),
                     seeds=seeds, per_seed=[m for m, _ in results],
                     histories=[h for _, h in results])


# ---------------------------------------------------------------------------
# link classification


@dataclass
class LinkTaskSpec:
    """Weighted directed edge records plus the labeling thresholds.

    Records become line-graph nodes; a record is a positive instance when
    weight > pos_threshold, negative when weight < neg_threshold, unlabeled
    otherwise.
    """

    num_nodes: int
    edges: np.ndarray          # (m, 3): source, target, weight
    pos_threshold: float = 3.0
    neg_threshold: float = -3.0
    train_size: int = 100
    val_size: int = 500

    def labels(self) -> np.ndarray:
        w = self.edges[:, 2]
        out = np.full(self.edges.shape[0], -1, dtype=np.int64)
        out[w > self.pos_threshold] = 1
        out[w < self.neg_threshold] = 0
        return out


def load_weighted_edges(path, **kw) -> LinkTaskSpec:
    """Read a weighted-edge sidecar file: {"num_nodes": n, "edges": [[u,v,w],...]}."""
    with open(path) as fh:
        raw = json.load(fh)
    unknown = set(raw) - {"num_nodes", "edges"}
    if unknown:
        raise ValueError(f"unknown sidecar fields: {sorted(unknown)}")
    edges = np.asarray(raw["edges"], dtype=np.float64).reshape(-1, 3)
    n = int(raw["num_nodes"])
    ids = edges[:, :2].astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ValueError("sidecar edge references a node out of range")
    return LinkTaskSpec(num_nodes=n, edges=edges, **kw)


def _link_seed(args):
    line, labels, labeled_ids, spec, method, cfg, lp_cfg, seed, positive = args
    rng = np.random.default_rng(seed)
    perm = rng.permutation(labeled_ids)
    train = np.sort(perm[:spec.train_size])
    val = np.sort(perm[spec.train_size:spec.train_size + spec.val_size])
    test = np.sort(perm[spec.train_size + spec.val_size:])
    if train.size == 0 or test.size == 0:
        raise ValueError("not enough labeled links for the requested split sizes")
    g = Graph(num_nodes=line.num_nodes, num_classes=2, edges=line.edges,
              features=line.features, labels=labels, split=Split(train, val, test))
    cfg = cfg.replace(seed=seed)
    if method == "lp":
        preds = label_propagation(g, lp_cfg)
        history = EMHistory()
    elif method == "self-train":
        qnet, history = self_training(g, cfg)
        preds = predict(q_forward(qnet, normalize_adjacency(g), g.features))
    else:
        run_cfg = cfg.replace(max_iterations=0) if method == "gcn" else cfg
        qnet, _pnet, history = train_gmnn(g, run_cfg)
        preds = predict(q_forward(qnet, normalize_adjacency(g), g.features))
    metric = binary_f1(preds[test], labels[test], positive)
    return metric, history


def run_link_classification(spec: LinkTaskSpec, method: str, cfg: EMConfig, seeds,
                            lp_cfg: LPConfig | None = None, parallel: int = 1,
                            dataset: str = "") -> RunResult:
    """Binary link classification on the line graph of the edge records.

    The metric is the F1 of the minority labeled class (ties favor the
    positive class); splits are re-sampled per seed.
    """
    if method not in LINK_METHODS:
        raise ValueError(f"unknown link-classification method: {method!r}")
    seeds = [int(s) for s in seeds]
    records = spec.edges[:, :2].astype(np.int64)
    # self-ratings have no counterparty, hence nothing to classify
    keep = records[:, 0] != records[:, 1]
    records = records[keep]
    labels = spec.labels()[keep]
    line = line_graph_from_edges(records, spec.num_nodes, num_classes=2)
    labeled_ids = np.flatnonzero(labels >= 0)
    if labeled_ids.size < spec.train_size + 1:
        raise ValueError("not enough labeled links for the requested split sizes")
    pos_count = int(np.sum(labels[labeled_ids] == 1))
    neg_count = int(np.sum(labels[labeled_ids] == 0))
    positive = 1 if pos_count <= neg_count else 0
    results = _run_seeds(_link_seed,
                         [(line, labels, labeled_ids, spec, method, cfg, lp_cfg, s, positive)
                          for s in seeds], parallel)
    return RunResult(task="link", method=method,
                     config=_config_dict(cfg, dataset, scored_class=positive,
                                         pos_threshold=spec.pos_threshold,
                                         neg_threshold=spec.neg_threshold,
                                         train_size=spec.train_size,
                                         val_size=spec.val_size),
                     seeds=seeds, per_seed=[m for m, _ in results],
                     histories=[h for _, h in results])


# ---------------------------------------------------------------------------
# unsupervised representation learning


@dataclass
class ProbeConfig:
    optimizer: str = "adam"
    lr: float = 0.01
    weight_decay: float = 0.0
    epochs: int = 300
    selection: bool = True


def neighbor_targets(g: Graph) -> SparseMatrix:
    """Row-stochastic matrix: uniform over each node's neighbors, self for
    isolated nodes."""
    n = g.num_nodes
    if g.edges.size:
        rows = np.concatenate([g.edges[:, 0], g.edges[:, 1]])
        cols = np.concatenate([g.edges[:, 1], g.edges[:, 0]])
    else:
        rows = np.zeros(0, dtype=np.int64)
        cols = np.zeros(0, dtype=np.int64)
    deg = np.bincount(rows, minlength=n)
    isolated = np.flatnonzero(deg == 0)
    vals = 1.0 / deg[rows]
    rows = np.concatenate([rows, isolated])
    cols = np.concatenate([cols, isolated])
    vals = np.concatenate([vals, np.ones(isolated.size)])
    return SparseMatrix.from_coo(rows, cols, vals.astype(np.float64), (n, n))


def topk_rows(dense: np.ndarray, k: int) -> SparseMatrix:
    """Keep the k largest entries per row, renormalized to sum to 1."""
    n, width = dense.shape
    k = min(k, width)
    cols = np.argpartition(dense, width - k, axis=1)[:, width - k:]
    rows = np.repeat(np.arange(n), k)
    vals = dense[rows, cols.ravel()].astype(np.float64)
    mat = SparseMatrix.from_coo(rows, cols.ravel(), vals, (n, width))
    sums = mat.row_sums()
    return SparseMatrix(mat.indptr, mat.indices,
                        mat.values / np.repeat(sums, np.diff(mat.indptr)),
                        mat.shape, validate=False)


def linear_probe(reps: np.ndarray, labels: np.ndarray, split: Split,
                 cfg: ProbeConfig | None = None, seed: int = 0) -> float:
    """Fit a linear classifier on frozen representations; returns test
    accuracy. The representations are never modified."""
    cfg = cfg or ProbeConfig()
    reps = np.asarray(reps)
    num_classes = int(labels.max()) + 1
    rng = np.random.default_rng(seed)
    head = GnnModel([LayerSpec("linear", reps.shape[1], num_classes)], rng=rng)
    opt = make_optimizer(cfg.optimizer, head.params(), cfg.lr, cfg.weight_decay)
    hard = one_hot(labels, num_classes)
    train = split.train[labels[split.train] >= 0]
    val = split.val[labels[split.val] >= 0]

    def make_loss(r):
        return masked_cross_entropy(head.forward(None, [reps]), hard, train)

    def eval_fn():
        logits = head.forward(None, [reps])
        out = {"val": None, "test": None}
        if val.size:
            out["val"] = accuracy(logits, labels, val)
        return out

    run_training_phase(head, make_loss, cfg.epochs, opt, rng=rng,
                       eval_fn=eval_fn if cfg.selection else None,
                       selection=cfg.selection)
    return accuracy(head.forward(None, [reps]), labels, split.test)


def _unsup_seed(args):
    g, cfg, probe_cfg, topk, seed = args
    cfg = cfg.replace(seed=seed)
    n = g.num_nodes
    rng = np.random.default_rng(cfg.seed)
    adj = normalize_adjacency(g)
    features = binarize_features(g).features if cfg.binarize else g.features
    targets0 = neighbor_targets(g)
    everyone = np.arange(n)

    qnet = build_qnet(g.num_features, n, cfg.hidden, cfg.q_arch,
                      cfg.input_dropout, rng=rng)
    opt_q = make_optimizer(cfg.optimizer, qnet.params(), cfg.lr, cfg.weight_decay)

    def q_loss(r):
        logits = q_forward(qnet, adj, features, training=True, rng=r)
        return masked_cross_entropy(logits, targets0, everyone)

    history = EMHistory()
    run_training_phase(qnet, q_loss, cfg.epochs_pretrain, opt_q, rng=rng,
                       selection=False, history=history, phase="pretrain", role="q")
    reps_pre = extract_representations(qnet, adj, [features])
    acc_pre = linear_probe(reps_pre, g.labels, g.split, probe_cfg, seed=cfg.seed)

    pnet = build_pnet(n, cfg.hidden, cfg.p_arch, input_dropout=cfg.input_dropout,
                      rng=rng)
    opt_p = make_optimizer(cfg.optimizer, pnet.params(), cfg.lr, cfg.weight_decay)

    for it in range(1, cfg.max_iterations + 1):
        soft = row_softmax(q_forward(qnet, adj, features).data)
        p_in = topk_rows(soft, topk) if topk else soft
        p_target = p_in

        def p_loss(r):
            logits = p_forward(pnet, adj, p_in, training=True, rng=r)
            return masked_cross_entropy(logits, p_target, everyone)

        run_training_phase(pnet, p_loss, cfg.epochs_p, opt_p, rng=rng,
                           selection=False, history=history, iteration=it,
                           phase="p", role="p")
        p_probs = row_softmax(p_forward(pnet, adj, p_in).data)
        q_target = topk_rows(p_probs, topk) if topk else p_probs

        def q_loss_it(r):
            logits = q_forward(qnet, adj, features, training=True, rng=r)
            return masked_cross_entropy(logits, q_target, everyone)

        run_training_phase(qnet, q_loss_it, cfg.epochs_q, opt_q, rng=rng,
                           selection=False, history=history, iteration=it,
                           phase="q", role="q")

    reps_post = extract_representations(qnet, adj, [features])
    acc_post = linear_probe(reps_post, g.labels, g.split, probe_cfg, seed=cfg.seed)
    return acc_pre, acc_post, history


def default_unsup_config(hidden: int = 512) -> EMConfig:
    return EMConfig(strategy="mean_pool", optimizer="adam", lr=0.1,
                    weight_decay=5e-4, hidden=hidden, epochs_pretrain=200,
                    epochs_p=100, epochs_q=100, max_iterations=2,
                    q_arch="gc2-linear", p_arch="gc2-linear")


def run_unsupervised(g: Graph, cfg: EMConfig, seeds,
                     probe_cfg: ProbeConfig | None = None, topk: int | None = None,
                     parallel: int = 1, dataset: str = "") -> dict[str, RunResult]:
    """Neighbor-prediction pretraining, then EM smoothing through p; linear
    probes score the frozen representations.

    Returns two RunResults sharing each seed's pretraining: 'gcn' probes the
    pretrained representations, 'gmnn' probes the EM-smoothed ones.
    """
    seeds = [int(s) for s in seeds]
    probe_cfg = probe_cfg or ProbeConfig()
    results = _run_seeds(_unsup_seed, [(g, cfg, probe_cfg, topk, s) for s in seeds],
                         parallel)
    config = _config_dict(cfg, dataset, probe=asdict(probe_cfg),
                          topk=topk if topk else 0)
    pre = RunResult(task="unsup", method="gcn", config=config, seeds=seeds,
                    per_seed=[a for a, _, _ in results])
    post = RunResult(task="unsup", method="gmnn", config=config, seeds=seeds,
                     per_seed=[b for _, b, _ in results],
                     histories=[h for _, _, h in results])
    return {"gcn": pre, "gmnn": post}


def default_link_config() -> EMConfig:
    return EMConfig(optimizer="adam", lr=0.01, weight_decay=0.0,
                    input_dropout=0.0, hidden=128, epochs_pretrain=100,
                    epochs_p=5, epochs_q=5, binarize=False)
