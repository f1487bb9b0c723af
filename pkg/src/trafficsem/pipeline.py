"""End-to-end pipeline with a hashed artifact manifest.

Stages run in order: ingest, kg, corpus, pretrain, train, evaluate. After
each stage the manifest records the sha256 of every artifact it wrote plus
the hash of the config section it depends on. With ``resume=True`` a stage
is skipped when its manifest entry is intact; once any stage recomputes,
every later stage recomputes too.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path


from . import contrastive, evaluate, ingest, kg as kgmod, reason, textgen
from .embed import Encoders, Heads
from .errors import ConfigError, ReportError, StageError

log = logging.getLogger(__name__)

STAGES = ("ingest", "kg", "corpus", "pretrain", "train", "evaluate")
MANIFEST = "manifest.json"


@dataclass
class PipelineConfig:
    out: str = "run"
    pcap: str | None = None
    flows: str | None = None
    schema_map: str | None = None
    align_window: float = 1.0
    synth: dict = field(default_factory=lambda: {"num_classes": 4, "per_class": 1000, "seed": 0})
    provider: dict = field(default_factory=lambda: {"kind": "stub", "seed": 0})
    v: int = kgmod.DEFAULT_V
    n: int = kgmod.DEFAULT_N
    concepts_per_text: int = 2
    pretrain: dict = field(default_factory=dict)
    reasoner: dict = field(default_factory=dict)
    groups: dict | str = field(default_factory=dict)
    fraction: float = 1.0
    encoder_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.groups, str):
            if self.groups != "aci":
                raise ConfigError(f"unknown group map {self.groups!r}")
            self.groups = dict(ingest.ACI_GROUPS)
        contrastive.TrainConfig(**self.pretrain)
        reason.ReasonerConfig(**self.reasoner)
        if not 0 < self.fraction <= 1:
            raise ConfigError("fraction must lie in (0, 1]")
        if (self.pcap is None) != (self.flows is None):
            raise ConfigError("pcap and flows must be given together")

    def check_paths(self):
        for name in ("pcap", "flows", "schema_map"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} file not found: {p}")

    def experiment(self) -> evaluate.ExperimentConfig:
        return evaluate.ExperimentConfig(
            contrastive.TrainConfig(**self.pretrain), reason.ReasonerConfig(**self.reasoner),
            self.v, self.n, self.concepts_per_text, dict(self.provider), dict(self.groups), self.seed)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            d = json.load(fh)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def stage_inputs(cfg: PipelineConfig) -> dict:
    """Config subset each stage depends on (cumulative)."""
    c = cfg.to_json()
    keys = {
        "ingest": ["pcap", "flows", "schema_map", "align_window", "synth", "groups"],
        "kg": ["provider", "v", "n"],
        "corpus": ["concepts_per_text", "seed"],
        "pretrain": ["pretrain", "fraction", "encoder_seed"],
        "train": ["reasoner"],
        "evaluate": [],
    }
    out, acc = {}, {}
    for s in STAGES:
        acc.update({k: c[k] for k in keys[s]})
        if s == "ingest":
            for p in ("pcap", "flows", "schema_map"):
                if c[p]:
                    acc[p + "_sha256"] = sha256_file(c[p])
        out[s] = _hash(acc)
    return out


class Manifest:
    def __init__(self, root: Path):
        self.root = root
        self.path = root / MANIFEST
        self.stages = {}
        if self.path.exists():
            self.stages = json.loads(self.path.read_text()).get("stages", {})

    def valid(self, stage: str, config_hash: str) -> bool:
        entry = self.stages.get(stage)
        if not entry or entry.get("config") != config_hash:
            return False
        for rel, digest in entry["artifacts"].items():
            p = self.root / rel
            if not p.is_file() or sha256_file(p) != digest:
                return False
        return True

    def record(self, stage: str, config_hash: str, paths):
        rels = sorted(str(Path(p).relative_to(self.root)) for p in paths)
        self.stages[stage] = {"config": config_hash,
                              "artifacts": {r: sha256_file(self.root / r) for r in rels}}
        self.write()

    def drop_from(self, stage: str):
        for s in STAGES[STAGES.index(stage):]:
            self.stages.pop(s, None)

    def write(self):
        ordered = {s: self.stages[s] for s in STAGES if s in self.stages}
        self.path.write_text(json.dumps({"stages": ordered}, indent=1, sort_keys=True) + "\n")


def encoders_for(cfg: PipelineConfig) -> Encoders:
    return Encoders.default(seed=cfg.encoder_seed)


# --------------------------------------------------------------------------
# stages: each returns the artifact paths it wrote

def _ingest(cfg, root, state):
    if cfg.pcap:
        packets = ingest.read_pcap(cfg.pcap)
        schema = ingest.load_schema_map(cfg.schema_map) if cfg.schema_map else None
        flows = ingest.read_flow_csv(cfg.flows, schema)
        seq = ingest.align(flows, packets, cfg.align_window)
    else:
        s = dict(cfg.synth)
        seq, flows = ingest.synth_dataset(s.pop("num_classes", 4), s.pop("per_class", 1000), **s)
    if cfg.groups:
        missing = sorted(set(seq.class_set) - set(cfg.groups))
        if missing:
            raise ConfigError(f"group map does not cover labels {missing}")
    ingest.save_sequence(root / "packets.jsonl", seq)
    ingest.write_flow_csv(root / "flows.csv", flows)
    return [root / "packets.jsonl", root / "flows.csv"]


def _load_ingest(cfg, root, state):
    state["seq"] = ingest.load_sequence(root / "packets.jsonl")
    state["flows"] = ingest.read_flow_csv(root / "flows.csv")


def _kg(cfg, root, state):
    grouped = evaluate.relabel(state["seq"], cfg.groups)
    graphs = evaluate.build_graphs(grouped.class_set, cfg.experiment())
    (root / "kg").mkdir(exist_ok=True)
    paths = []
    for m, g in graphs.items():
        report = kgmod.validate_graph(g)
        if not report.ok:
            raise ConfigError(f"graph for {m!r} invalid: {sorted(report.kinds())}")
        p = root / "kg" / f"{kgmod.mission_slug(m)}.json"
        kgmod.save(g, p)
        paths.append(p)
    return paths


def _load_kg(cfg, root, state):
    grouped = evaluate.relabel(state["seq"], cfg.groups)
    state["grouped"] = grouped
    state["graphs"] = {m: kgmod.load(root / "kg" / f"{kgmod.mission_slug(m)}.json")
                       for m in evaluate.missions_of(grouped.class_set)}


def _corpus(cfg, root, state):
    from .providers import make_provider
    corpus = textgen.build_corpus(state["flows"], state["graphs"], state["seq"].records,
                                  make_provider(**cfg.provider), cfg.concepts_per_text, cfg.seed, cfg.groups)
    corpus.save(root / "corpus.jsonl")
    return [root / "corpus.jsonl"]


def _load_corpus(cfg, root, state):
    corpus = textgen.PairedCorpus.load(root / "corpus.jsonl")
    recs = state["grouped"].records
    if len(corpus) != len(recs) or any(p.timestamp != r.timestamp for p, r in zip(corpus.packets, recs)):
        raise ConfigError("corpus is not aligned with the packet sequence")
    # reuse the sequence's record objects so training subsets can be matched
    state["corpus"] = textgen.PairedCorpus(corpus.texts, recs, corpus.report)
    state["train"], state["test"] = ingest.split_dataset(state["grouped"], cfg.fraction, cfg.seed)


def _pretrain(cfg, root, state):
    sub = evaluate.subset_corpus(state["corpus"], state["train"].records)
    heads, _ = contrastive.pretrain_heads(sub, encoders_for(cfg), contrastive.TrainConfig(**cfg.pretrain),
                                          log_path=root / "pretrain_log.jsonl")
    with open(root / "heads.json", "w") as fh:
        json.dump({"encoder_seed": cfg.encoder_seed, "heads": heads.to_json()}, fh)
    return [root / "heads.json", root / "pretrain_log.jsonl"]


def _load_pretrain(cfg, root, state):
    state["heads"] = load_heads(root / "heads.json")


def _train(cfg, root, state):
    missions = evaluate.missions_of(state["grouped"].class_set)
    model, _ = reason.train_reasoner(state["train"], [state["graphs"][m] for m in missions], state["heads"],
                                     encoders_for(cfg), reason.ReasonerConfig(**cfg.reasoner),
                                     classes=state["grouped"].class_set, log_path=root / "train_log.jsonl")
    model.save(root / "reasoner.json")
    return [root / "reasoner.json", root / "train_log.jsonl"]


def _load_train(cfg, root, state):
    state["model"] = reason.ReasonerModel.load(root / "reasoner.json").attach(state["heads"], encoders_for(cfg))


def _evaluate(cfg, root, state):
    enc = encoders_for(cfg)
    heads, model, train, test = state["heads"], state["model"], state["train"], state["test"]
    classes = model.classes
    probs = reason.infer_stream(test, model, heads, enc)
    reason.write_scores(root / "scores.jsonl", test, probs, classes)
    conf = cfg.to_json()
    rep = evaluate.MetricReport.from_scores(probs, test.labels, classes, conf)
    xtr = heads.embed_packets(enc.packet.encode_many([r.payload for r in train.records]))
    xte = heads.embed_packets(enc.packet.encode_many([r.payload for r in test.records]))
    probe = evaluate.MetricReport.from_scores(
        evaluate.logistic_probe(xtr, train.labels, xte, classes, cfg.seed), test.labels, classes, conf)
    # zero-shot ranking over the fine labels the texts were written for
    fine = ingest.split_dataset(state["seq"], 1.0, cfg.seed)[1].records
    prompts = textgen.class_prompts(state["seq"].class_set)
    zs = evaluate.zero_shot_eval(fine, heads, enc, prompts, ks=[k for k in (1, 5) if k <= len(prompts)])
    cost = evaluate.count_flops(model)
    metrics = {"fingerprint": evaluate.fingerprint(conf), "model": rep.to_json(), "probe": probe.to_json(),
               "zero_shot": zs, "cost": cost.to_json()}
    with open(root / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=1)
    texts = {}
    for s in state["corpus"].texts:
        texts.setdefault(cfg.groups.get(s.label, s.label), []).append(s.text)
    vocab = {"texts": kgmod.vocab_report(texts, top_k=10, stopwords=STOPWORDS),
             "concepts": kgmod.vocab_report(state["graphs"], top_k=10)}
    with open(root / "vocab.json", "w") as fh:
        json.dump(vocab, fh, indent=1, sort_keys=True)
    return [root / "metrics.json", root / "scores.jsonl", root / "vocab.json"]


STOPWORDS = frozenset(
    "a an the of to from and or in on at by for with while which over was were is are this that "
    "its it as be been into sent".split())

_RUN = {"ingest": _ingest, "kg": _kg, "corpus": _corpus, "pretrain": _pretrain, "train": _train,
        "evaluate": _evaluate}
_LOAD = {"ingest": _load_ingest, "kg": _load_kg, "corpus": _load_corpus, "pretrain": _load_pretrain,
         "train": _load_train, "evaluate": lambda *a: None}


def load_heads(path) -> Heads:
    with open(path) as fh:
        d = json.load(fh)
    return Heads.from_json(d["heads"] if "heads" in d else d)


def run_pipeline(cfg: PipelineConfig, out_dir=None, resume: bool = False) -> Path:
    """Run all stages; returns the artifact directory.

    A failing stage raises :class:`StageError` naming it; artifacts of
    completed stages stay on disk and in the manifest.
    """
    cfg.check_paths()
    root = Path(out_dir or cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
    manifest = Manifest(root)
    hashes = stage_inputs(cfg)
    state: dict = {}
    dirty = not resume
    for stage in STAGES:
        if not dirty and manifest.valid(stage, hashes[stage]):
            log.info("stage %s: up to date", stage)
        else:
            dirty = True
            manifest.drop_from(stage)
            log.info("stage %s: running", stage)
            try:
                paths = _RUN[stage](cfg, root, state)
            except Exception as exc:
                manifest.write()
                raise StageError(stage, exc) from exc
            manifest.record(stage, hashes[stage], paths)
        try:
            _LOAD[stage](cfg, root, state)
        except Exception as exc:
            raise StageError(stage, exc) from exc
    return root


# --------------------------------------------------------------------------
# report

def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(cells[0]), fmt(["-" * w for w in widths])] + [fmt(r) for r in cells[1:]])


def report(artifact_dir) -> str:
    """Plain-text summary: AUC table with mean column, zero-shot top-k,
    cost, and per-mission term-frequency tables."""
    root = Path(artifact_dir)
    for name in ("metrics.json", "vocab.json"):
        if not (root / name).is_file():
            raise ReportError(name)
    metrics = json.loads((root / "metrics.json").read_text())
    vocab = json.loads((root / "vocab.json").read_text())
    out = []
    classes = list(metrics["model"]["per_class_auc"])
    rows = []
    for name, key in (("reasoner", "model"), ("logistic probe", "probe")):
        m = metrics[key]
        rows.append([name] + [f"{m['per_class_auc'][c]:.4f}" for c in classes] + [f"{m['mauc']:.4f}"])
    out.append("AUC (one-vs-rest)\n" + _table(["model"] + classes + ["mAUC"], rows))
    zs = metrics.get("zero_shot", {})
    if zs:
        out.append("Zero-shot accuracy\n" + _table(list(zs), [[f"{v:.4f}" for v in zs.values()]]))
    c = metrics["cost"]
    out.append("Cost\n" + _table(["params", "FLOPs/packet", "FLOPs/window", "param ratio", "FLOP ratio"],
                                 [[c["params"], c["flops"], c["flops_window"], f"{c['param_ratio']:.6f}",
                                   f"{c['flop_ratio']:.6f}"]]) + f"\n({c['convention']})")
    for kind in ("concepts", "texts"):
        for mission, rows in vocab[kind].items():
            out.append(f"Term frequency ({kind}, {mission})\n" + _table(["term", "count"], rows))
    sweep = root / "sweep.json"
    if sweep.is_file():
        curve = json.loads(sweep.read_text())["curve"]
        out.append("Data scarcity\n" + _table(["fraction", "mAUC"],
                                             [[f, "failed" if v is None else f"{v:.4f}"] for f, v in curve.items()]))
    return "\n\n".join(out) + "\n"
