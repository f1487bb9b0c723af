"""Natural-language descriptions for packets.

Each packet's matched flow row is rendered through a label-specific
template, optionally enriched with concepts sampled from the mission's
knowledge graph, then paraphrased by a provider.
"""

from __future__ import annotations

import json
import logging
import string
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ProviderError, TemplateError
from .ingest import FlowRecord, PacketRecord, parse_flow_key
from .providers import _data

log = logging.getLogger(__name__)

TEMPLATE = "template"
PARAPHRASED = "paraphrased"
BENIGN = "benign"


@dataclass
class TemplateText:
    text: str
    source_flow: FlowRecord | None = None
    injected_concepts: tuple = ()


@dataclass
class TextSample:
    text: str
    label: str
    provenance: str = TEMPLATE

    def __post_init__(self):
        if not self.text:
            raise ValueError("text samples must be non-empty")


@dataclass
class PairedCorpus:
    texts: list
    packets: list
    report: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.texts)

    def save(self, path):
        with open(path, "w") as fh:
            for s, p in zip(self.texts, self.packets):
                fh.write(json.dumps({"text": s.text, "packet_hex": p.payload.hex(), "label": s.label,
                                     "ts": p.timestamp, "provenance": s.provenance}) + "\n")

    @classmethod
    def load(cls, path) -> "PairedCorpus":
        texts, packets = [], []
        with open(path) as fh:
            for line in fh:
                d = json.loads(line)
                payload = bytes.fromhex(d["packet_hex"])
                texts.append(TextSample(d["text"], d["label"], d["provenance"]))
                packets.append(PacketRecord(d["ts"], payload, d["label"], length=len(payload)))
        return cls(texts, packets)


def templates_for(label: str) -> list:
    lib = _data("templates.json")
    return list(lib.get(label.strip().lower(), lib["default"]))


def _format(name, value):
    if name == "duration":
        return f"{float(value):.3f}"
    if isinstance(value, (int, np.integer)) or name in ("packet_count", "byte_count", "src_port", "dst_port"):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def render_template(flow: FlowRecord, templates, seed: int) -> TemplateText:
    """Fill a seed-selected template with the flow's column values."""
    templates = list(templates)
    if not templates:
        raise ValueError("template set is empty")
    tpl = templates[int(np.random.default_rng(seed).integers(len(templates)))]
    cols = flow.columns()
    values = {}
    for _, name, _, _ in string.Formatter().parse(tpl):
        if name is None:
            continue
        if name not in cols:
            raise TemplateError(name)
        values[name] = _format(name, cols[name])
    return TemplateText(tpl.format(**values), flow, ())


def inject_concepts(t: TemplateText, kg, k: int, seed: int) -> TemplateText:
    """Append ``involving c1, c2, ...`` with ``k`` concepts sampled from the graph."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return t
    pool = kg.concepts
    if k > len(pool):
        warnings.warn(f"requested {k} concepts but graph {kg.mission!r} has {len(pool)}")
        k = len(pool)
    idx = np.random.default_rng(seed).choice(len(pool), size=k, replace=False)
    chosen = tuple(pool[i] for i in idx)
    body = t.text.rstrip()
    end = body[-1] if body and body[-1] in ".!?" else ""
    body = body[:-1] if end else body
    return TemplateText(f"{body}, involving {', '.join(chosen)}{end or '.'}", t.source_flow,
                        t.injected_concepts + chosen)


def paraphrase(t: TemplateText, provider, label: str = "") -> TextSample:
    """Provider rewrite of a template text. Raises ProviderError carrying the
    original text so callers can fall back to the template."""
    label = label or (t.source_flow.label if t.source_flow is not None else "")
    try:
        out = provider.paraphrase_text(t.text)
    except ProviderError as exc:
        exc.original = t.text
        raise
    if not out or not out.strip():
        raise ProviderError("provider returned empty text", t.text)
    return TextSample(out, label, PARAPHRASED)


def fallback_flow(p: PacketRecord) -> FlowRecord:
    """Single-packet pseudo flow for packets that matched no flow row."""
    if p.flow_key:
        src, dst, sport, dport, proto = parse_flow_key(p.flow_key)
    else:
        src, dst, sport, dport, proto = "0.0.0.0", "0.0.0.0", 0, 0, 0
    return FlowRecord(src, dst, sport, dport, proto, p.timestamp / 1e6, 0.0, 1, p.length or len(p.payload),
                      p.label or "")


def _seed(seed, i, salt):
    return int(np.random.SeedSequence([seed, i, salt]).generate_state(1)[0])


def build_corpus(flows, kgs: dict, packets, provider, k: int = 2, seed: int = 0,
                 groups: dict | None = None) -> PairedCorpus:
    """One text per packet (render -> inject -> paraphrase), index-aligned.

    ``kgs`` maps mission name to graph; ``groups`` maps a fine label to its
    mission (identity when absent). Benign packets skip concept injection.
    """
    groups = groups or {}
    records = list(packets)
    drafts, labels = [], []
    for i, p in enumerate(records):
        label = p.label
        mission = groups.get(label, label)
        flow = flows[p.flow_index] if p.flow_index is not None else fallback_flow(p)
        t = render_template(flow, templates_for(label), _seed(seed, i, 0))
        if mission.strip().lower() != BENIGN:
            if mission not in kgs:
                raise KeyError(f"no knowledge graph for mission {mission!r} (label {label!r})")
            t = inject_concepts(t, kgs[mission], k, _seed(seed, i, 1))
        drafts.append(t)
        labels.append(label)

    def one(args):
        t, label = args
        try:
            return paraphrase(t, provider, label)
        except ProviderError as exc:
            log.warning("paraphrase failed, keeping template: %s", exc)
            return TextSample(exc.original or t.text, label, TEMPLATE)

    jobs = list(zip(drafts, labels))
    if getattr(provider, "kind", "stub") == "http" and getattr(provider, "max_in_flight", 1) > 1:
        with ThreadPoolExecutor(max_workers=provider.max_in_flight) as pool:
            texts = list(pool.map(one, jobs))  # map preserves input order
    else:
        texts = [one(j) for j in jobs]

    failures = sum(s.provenance == TEMPLATE for s in texts)
    report = {"n": len(texts), "provider_errors": failures,
              "concepts_injected": sum(len(d.injected_concepts) for d in drafts)}
    return PairedCorpus(texts, records, report)


def class_prompts(labels) -> dict:
    """Default zero-shot prompt per class label."""
    return {c: f"{c} traffic" for c in labels}
