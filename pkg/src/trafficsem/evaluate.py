"""Metrics, experiments and cost accounting.

AUC is the Mann-Whitney statistic computed from integer tie-group counts,
so it is exact up to the final division. Multi-class AUC is one-vs-rest on
each class probability; mAUC is the unweighted mean over classes.

FLOPs convention: one multiply-add counts as 2 FLOPs; element-wise ops
(add, multiply, activation, exp, divide) count 1 each.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import contrastive, ingest, kg as kgmod, reason, textgen
from .embed import Encoders
from .errors import TrafficSemError, UndefinedMetricError
from .providers import make_provider

log = logging.getLogger(__name__)

SCARCITY_FRACTIONS = (1.0, 0.7, 0.5, 0.4, 0.3)
REFERENCE_PARAMS = 110_000_000
REFERENCE_FLOPS = 2 * REFERENCE_PARAMS  # one token forward of the reference encoder


# --------------------------------------------------------------------------
# metrics

def _auc_counts(scores, labels):
    """``(2 * concordant + ties, 2 * P * N)`` as exact integers."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    order = np.argsort(s, kind="stable")
    s, y = s[order], y[order]
    bounds = np.flatnonzero(np.diff(s)) + 1
    num, neg_below = 0, 0
    for grp in np.split(y, bounds):
        p = int(grp.sum())
        q = len(grp) - p
        num += p * (2 * neg_below + q)
        neg_below += q
    return num, 2 * n_pos * n_neg


def roc_auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties credited 0.5."""
    num, den = _auc_counts(scores, labels)
    return num / den


def per_class_auc(probs, truth, classes) -> tuple:
    """One-vs-rest AUC per class. Returns ``(auc_map, excluded)`` where
    ``excluded`` lists classes whose AUC is undefined on this data."""
    probs = np.asarray(probs)
    truth = list(truth)
    out, excluded = {}, []
    for j, c in enumerate(classes):
        try:
            out[c] = roc_auc(probs[:, j], [t == c for t in truth])
        except UndefinedMetricError:
            excluded.append(c)
            warnings.warn(f"AUC undefined for class {c!r}; excluded from the mean")
    return out, excluded


def mean_auc(per_class: dict) -> float:
    if not per_class:
        raise ValueError("no per-class AUCs to average")
    return float(np.mean(list(per_class.values())))


def top_k_accuracy(rankings, truth, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    truth = list(truth)
    if not truth:
        return 0.0
    return sum(t in list(r)[:k] for r, t in zip(rankings, truth)) / len(truth)


def fingerprint(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricReport:
    per_class_auc: dict
    mauc: float
    top_k: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    fingerprint: str = ""
    excluded: list = field(default_factory=list)

    @classmethod
    def from_scores(cls, probs, truth, classes, config=None, rankings=None, ks=(1, 5)):
        aucs, excluded = per_class_auc(probs, truth, classes)
        truth = list(truth)
        if rankings is None:
            rankings = [[classes[j] for j in np.argsort(-row, kind="stable")] for row in np.asarray(probs)]
        top = {f"top{k}": top_k_accuracy(rankings, truth, k) for k in ks if k <= len(classes)}
        counts = {c: truth.count(c) for c in classes}
        return cls(aucs, mean_auc(aucs), top, counts, fingerprint(config or {}), excluded)

    def to_json(self) -> dict:
        return asdict(self)


def logistic_probe(train_x, train_y, test_x, classes, seed: int = 0) -> np.ndarray:
    """Per-packet multinomial logistic regression baseline; returns class
    probabilities aligned with ``classes``."""
    from sklearn.linear_model import LogisticRegression

    clf = LogisticRegression(max_iter=3000, random_state=seed)
    clf.fit(train_x, list(train_y))
    probs = np.zeros((len(test_x), len(classes)))
    cols = {c: i for i, c in enumerate(clf.classes_)}
    p = clf.predict_proba(test_x)
    for j, c in enumerate(classes):
        if c in cols:
            probs[:, j] = p[:, cols[c]]
    return probs


# --------------------------------------------------------------------------
# experiments

@dataclass
class ExperimentConfig:
    pretrain: contrastive.TrainConfig = field(default_factory=contrastive.TrainConfig)
    reasoner: reason.ReasonerConfig = field(default_factory=reason.ReasonerConfig)
    v: int = kgmod.DEFAULT_V
    n: int = kgmod.DEFAULT_N
    concepts_per_text: int = 2
    provider: dict = field(default_factory=lambda: {"kind": "stub", "seed": 0})
    groups: dict = field(default_factory=dict)
    seed: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        pre = contrastive.TrainConfig(**d.pop("pretrain", {}))
        rea = reason.ReasonerConfig(**d.pop("reasoner", {}))
        return cls(pre, rea, **d)


@dataclass
class ExperimentResult:
    report: MetricReport
    probe: MetricReport
    model: object = None
    heads: object = None
    losses: list = field(default_factory=list)


def relabel(seq, groups: dict):
    """Map labels through ``groups`` (identity for unmapped labels)."""
    if not groups:
        return seq
    recs = [ingest.PacketRecord(r.timestamp, r.payload, groups.get(r.label, r.label), r.flow_key,
                                r.length, r.flow_index) for r in seq.records]
    return ingest.LabeledSequence(recs, ingest.class_set_of(recs), seq.unmatched)


def missions_of(classes) -> list:
    return [c for c in classes if c.strip().lower() != textgen.BENIGN]


def build_graphs(classes, cfg: ExperimentConfig) -> dict:
    provider = make_provider(**cfg.provider)
    return {m: kgmod.build_graph(m, provider, cfg.v, cfg.n) for m in missions_of(classes)}


def subset_corpus(corpus, records):
    keep = {id(r) for r in records}
    idx = [i for i, p in enumerate(corpus.packets) if id(p) in keep]
    if len(idx) != len(keep):
        raise TrafficSemError("corpus does not cover every training record")
    return textgen.PairedCorpus([corpus.texts[i] for i in idx], [corpus.packets[i] for i in idx],
                                dict(corpus.report, n=len(idx)))


def run_experiment(seq, corpus, graphs: dict, cfg: ExperimentConfig, fraction: float = 1.0,
                   encoders: Encoders | None = None) -> ExperimentResult:
    """Split, pretrain heads on the training packets' texts, train the
    reasoner, and score the temporal test set against the probe baseline.

    ``seq`` must already carry the reasoning labels and share record
    objects with ``corpus.packets``.
    """
    encoders = encoders or Encoders.default(seed=cfg.seed)
    train, test = ingest.split_dataset(seq, fraction, cfg.seed)
    heads, losses = contrastive.pretrain_heads(subset_corpus(corpus, train.records), encoders, cfg.pretrain)
    missions = missions_of(seq.class_set)
    model, _ = reason.train_reasoner(train, [graphs[m] for m in missions], heads, encoders, cfg.reasoner,
                                     classes=seq.class_set)
    probs = reason.infer_stream(test, model, heads, encoders)
    truth = test.labels
    conf = cfg.to_json() | {"fraction": fraction}
    report = MetricReport.from_scores(probs, truth, seq.class_set, conf)

    xtr = heads.embed_packets(encoders.packet.encode_many([r.payload for r in train.records]))
    xte = heads.embed_packets(encoders.packet.encode_many([r.payload for r in test.records]))
    base = logistic_probe(xtr, train.labels, xte, seq.class_set, cfg.seed)
    probe = MetricReport.from_scores(base, truth, seq.class_set, conf | {"baseline": "logistic-probe"})
    return ExperimentResult(report, probe, model, heads, losses)


def prepare(seq, flows, cfg: ExperimentConfig):
    """KGs and paired corpus for a (possibly fine-labeled) sequence.

    Returns ``(reasoning_seq, corpus, graphs)``; texts are built from the
    fine labels, reasoning uses the grouped labels.
    """
    grouped = relabel(seq, cfg.groups)
    graphs = build_graphs(grouped.class_set, cfg)
    provider = make_provider(**cfg.provider)
    corpus = textgen.build_corpus(flows, graphs, seq.records, provider, cfg.concepts_per_text, cfg.seed,
                                  cfg.groups)
    if grouped is not seq:
        corpus = textgen.PairedCorpus(corpus.texts, grouped.records, corpus.report)
    return grouped, corpus, graphs


@dataclass
class SweepResult:
    curve: dict            # fraction -> mAUC (None when that fraction failed)
    reports: dict          # fraction -> MetricReport
    errors: dict           # fraction -> message

    def to_json(self) -> dict:
        return {"curve": {str(k): v for k, v in self.curve.items()},
                "reports": {str(k): r.to_json() for k, r in self.reports.items()},
                "errors": {str(k): v for k, v in self.errors.items()}}


def scarcity_sweep(seq, corpus, graphs, cfg: ExperimentConfig, fractions=SCARCITY_FRACTIONS,
                   encoders=None) -> SweepResult:
    """Retrain per training fraction against the fixed temporal test set.

    A failing fraction is recorded and the sweep continues.
    """
    fractions = list(fractions)
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    curve, reports, errors = {}, {}, {}
    for f in fractions:
        try:
            res = run_experiment(seq, corpus, graphs, cfg, f, encoders)
        except (TrafficSemError, ValueError, ArithmeticError) as exc:
            log.warning("fraction %s failed: %s", f, exc)
            curve[f], errors[f] = None, f"{type(exc).__name__}: {exc}"
            continue
        curve[f], reports[f] = res.report.mauc, res.report
    return SweepResult(curve, reports, errors)


def write_curve_csv(path, curve: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fraction", "mauc"])
        for f, v in curve.items():
            w.writerow([f, "" if v is None else f"{v:.6f}"])


def zero_shot_eval(records, heads, encoders, class_prompts: dict, ks=(1, 5)) -> dict:
    ranks = contrastive.zero_shot_rankings([r.payload for r in records], heads, encoders, class_prompts)
    truth = [r.label for r in records]
    return {f"top{k}": top_k_accuracy(ranks, truth, k) for k in ks}


# --------------------------------------------------------------------------
# cost

def count_params(model) -> int:
    """Exact number of trainable scalars."""
    return int(sum(p.numel() for p in model.parameters() if p.requires_grad))


def linear_flops(n_in: int, n_out: int, rows: int = 1) -> int:
    return 2 * n_in * n_out * rows


def attention_flops(window: int, d_model: int, heads: int) -> dict:
    """Closed-form self-attention cost for one window.

    ``projection`` (Q/K/V and output projections) is quadratic in d_model;
    ``mixing`` (scores, softmax, weighted sum) is linear in d_model.
    """
    proj = linear_flops(d_model, 3 * d_model, window) + linear_flops(d_model, d_model, window)
    scores = 2 * window * window * d_model + heads * window * window          # QK^T and scaling
    softmax = 3 * heads * window * window                                    # exp, sum, divide
    mix = 2 * window * window * d_model
    return {"projection": proj, "mixing": scores + softmax + mix}


def gnn_flops(graph, embed_dim: int, d: int, layers: int) -> int:
    """Per-packet GNN cost for one mission. Concept features are static and
    cached, so only the sensor adapter runs per packet."""
    idx = reason.GraphIndex.of(graph)
    n_nodes = len(idx.node_ids)
    n_edges = len(idx.src)
    n_recv = int(idx.has_pred.sum())
    adapter = linear_flops(embed_dim, d) + d
    per_layer = n_nodes * (linear_flops(d, d) + d) + n_edges * 3 * d + n_recv * d
    return adapter + layers * per_layer


@dataclass
class CostReport:
    params: int
    flops: int
    flops_window: int
    breakdown: dict
    reference_params: int = REFERENCE_PARAMS
    reference_flops: int = REFERENCE_FLOPS
    convention: str = "multiply-add = 2 FLOPs; element-wise op = 1 FLOP"

    @property
    def param_ratio(self) -> float:
        return self.params / self.reference_params

    @property
    def flop_ratio(self) -> float:
        return self.flops / self.reference_flops

    def to_json(self) -> dict:
        return asdict(self) | {"param_ratio": self.param_ratio, "flop_ratio": self.flop_ratio}


def head_flops(cfg: reason.ReasonerConfig, token_dim: int, n_classes: int, streaming: bool) -> dict:
    a, dm = cfg.window, cfg.d_model
    out = {}
    if streaming:
        # new token only through the input and Q/K/V projections, plus table adds
        out["input"] = linear_flops(token_dim, dm) + a * dm
    else:
        out["input"] = linear_flops(token_dim, dm, a) + 2 * a * dm
    for b in range(cfg.depth):
        att = attention_flops(a, dm, cfg.heads)
        if streaming and b == 0:
            att["projection"] = linear_flops(dm, 3 * dm) + 3 * dm * a + linear_flops(dm, dm, a)
        out[f"block{b}.attention"] = att["projection"] + att["mixing"]
        ffn = linear_flops(dm, cfg.d_ff, a) + a * cfg.d_ff + linear_flops(cfg.d_ff, dm, a)
        norm = 2 * (a * dm * 7 + a * dm)  # two layer norms (~7 ops/elt) and residual adds
        out[f"block{b}.ffn"] = ffn + norm
    out["pool"] = a * dm
    out["classifier"] = linear_flops(dm, cfg.mlp_hidden) + cfg.mlp_hidden + linear_flops(cfg.mlp_hidden, n_classes)
    out["softmax"] = 3 * n_classes
    return out


def count_flops(model, window: int | None = None, streaming: bool = True) -> CostReport:
    """FLOPs for scoring one packet.

    ``streaming=True`` counts the cached-projection scorer (each frame token
    is projected once on arrival); ``streaming=False`` counts a full
    recomputation of the window. Both figures are reported.
    """
    cfg = model.cfg
    if window is not None and window != cfg.window:
        cfg = reason.ReasonerConfig(**(asdict(cfg) | {"window": window}))
    token_dim = len(model.reasoners) * cfg.d
    n_classes = len(model.classes)
    gnn = {f"gnn.{g.mission}": gnn_flops(g, model.embed_dim, cfg.d, cfg.layers) for g in model.graphs}
    stream = gnn | head_flops(cfg, token_dim, n_classes, True)
    full = head_flops(cfg, token_dim, n_classes, False)
    flops_window = cfg.window * sum(gnn.values()) + sum(full.values())
    flops = sum(stream.values())
    return CostReport(count_params(model), flops if streaming else flops_window, flops_window, stream)


def default_cost_model(embed_dim: int = 128, classes=ingest.COARSE_CLASSES, cfg=None):
    """Untrained reasoner with the default shape (M = 3 missions, V = 10, N = 2)."""
    from .providers import StubProvider

    provider = StubProvider(0)
    graphs = [kgmod.build_graph(m, provider) for m in missions_of(classes)]
    return reason.ReasonerModel(graphs, classes, embed_dim, cfg or reason.ReasonerConfig())


def write_cost_csv(path, rep: CostReport):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component", "flops"])
        for k, v in rep.breakdown.items():
            w.writerow([k, v])
        w.writerow(["total", rep.flops])
