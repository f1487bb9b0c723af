"""Hierarchical graph reasoning over mission knowledge graphs.

Per packet and per mission, node features are initialized from the joint
embedding space (packet embedding on the sensor node, concept text
embeddings elsewhere), pushed through ``L`` rounds of affine transform +
hierarchical message passing, and read out at the embedding node. The
per-mission readouts form a frame token; a window of ``A`` frame tokens is
classified by a small transformer encoder.

Message passing uses the element-wise product of the receiving node and
each predecessor in the previous hierarchy level, followed by the
activation, averaged over predecessors. Updates are synchronous.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import kg as kgmod
from .errors import ConfigError, GraphError, ShapeError, TrainingError

DTYPE = torch.float64
CHECKPOINT_VERSION = 1

ACTIVATIONS = {"tanh": torch.tanh, "relu": torch.relu, "identity": lambda x: x, "sigmoid": torch.sigmoid}


@dataclass
class ReasonerConfig:
    d: int = 8              # node feature dim
    layers: int = 3         # GNN rounds
    d_model: int = 128
    heads: int = 8
    depth: int = 1
    d_ff: int = 128
    window: int = 30        # A
    mlp_hidden: int = 64
    activation: str = "tanh"
    product: str = "elementwise"
    smoothing: float = 0.1
    lr: float = 5.0e-4
    beta1: float = 0.9
    beta2: float = 0.8
    epsilon: float = 1.0e-6
    steps: int = 3000
    batch: int = 128
    chunk: int = 16         # consecutive windows per chunk (smoothing pairs)
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.product not in ("elementwise", "scalar"):
            raise ConfigError("product must be 'elementwise' or 'scalar'")
        if self.batch % self.chunk:
            raise ConfigError("batch must be a multiple of chunk")


# --------------------------------------------------------------------------
# graph plumbing

class GraphIndex:
    """Hierarchy levels (longest path from a source) and the predecessor
    edges that connect consecutive levels."""

    def __init__(self, node_ids, edges):
        self.node_ids = list(node_ids)
        pos = {n: i for i, n in enumerate(self.node_ids)}
        try:
            e = [(pos[u], pos[v]) for u, v in edges]
        except KeyError as exc:
            raise GraphError(f"edge references unknown node {exc.args[0]!r}") from None
        order = kgmod.topological_order(list(range(len(self.node_ids))), e)
        if order is None:
            raise GraphError("graph has a cycle")
        level = [0] * len(self.node_ids)
        succ = {}
        for u, v in e:
            succ.setdefault(u, []).append(v)
        for u in order:
            for v in succ.get(u, ()):
                level[v] = max(level[v], level[u] + 1)
        self.levels = level
        hier = [(u, v) for u, v in e if level[u] == level[v] - 1]
        self.src = torch.tensor([u for u, _ in hier], dtype=torch.long)
        self.dst = torch.tensor([v for _, v in hier], dtype=torch.long)
        deg = torch.zeros(len(self.node_ids), dtype=DTYPE)
        deg.index_add_(0, self.dst, torch.ones(len(hier), dtype=DTYPE))
        self.has_pred = deg > 0
        self.inv_deg = torch.where(self.has_pred, 1.0 / deg.clamp(min=1), torch.zeros_like(deg))

    @classmethod
    def of(cls, graph) -> "GraphIndex":
        return cls(graph.node_ids, graph.edges)


@dataclass
class FeatureAssignment:
    node_ids: list
    levels: list
    values: torch.Tensor  # (..., n_nodes, D)

    def __getitem__(self, node_id):
        return self.values[..., self.node_ids.index(node_id), :]


def message_pass(graph, fa: FeatureAssignment, l: int = 1, activation="tanh",
                 product: str = "elementwise", index: GraphIndex | None = None) -> FeatureAssignment:
    """One synchronous round of hierarchical aggregation.

    For each node with predecessors one level up:
    ``x_v <- mean_u act(x_v * x_u)`` (or ``act(<x_v, x_u>) * x_u`` for the
    scalar-gated variant); nodes without such predecessors keep their values.
    """
    idx = index or GraphIndex.of(graph)
    act = ACTIVATIONS[activation] if isinstance(activation, str) else activation
    x = fa.values
    xs = x.index_select(-2, idx.src)
    xd = x.index_select(-2, idx.dst)
    if product == "elementwise":
        msg = act(xd * xs)
    else:
        msg = act((xd * xs).sum(-1, keepdim=True)) * xs
    agg = torch.zeros_like(x).index_add(x.dim() - 2, idx.dst, msg) * idx.inv_deg.to(x.dtype)[:, None]
    out = torch.where(idx.has_pred[:, None], agg, x)
    return FeatureAssignment(fa.node_ids, fa.levels, out)


# --------------------------------------------------------------------------
# modules

def _unit(x: torch.Tensor) -> torch.Tensor:
    # the joint space is compared by cosine, so the adapter sees directions only
    n = x.norm(dim=-1, keepdim=True)
    return torch.where(n > 0, x / n.clamp(min=1e-300), torch.zeros_like(x))


class MissionReasoner(nn.Module):
    """GNN for one mission graph."""

    def __init__(self, graph, embed_dim: int, cfg: ReasonerConfig):
        super().__init__()
        self.graph = graph
        self.mission = graph.mission
        self.cfg = cfg
        self.index = GraphIndex.of(graph)
        self.adapter = nn.Linear(embed_dim, cfg.d, dtype=DTYPE)
        self.weight = nn.Parameter(torch.empty(cfg.layers, cfg.d, cfg.d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.empty(cfg.layers, cfg.d, dtype=DTYPE))
        self.sensor_pos = self.index.node_ids.index(graph.sensor)
        self.embedding_pos = self.index.node_ids.index(graph.embedding)
        self.register_buffer("node_emb", torch.zeros(len(self.index.node_ids), embed_dim, dtype=DTYPE),
                             persistent=False)

    @property
    def node_texts(self) -> list:
        return [text for _, text, _ in self.graph.nodes]

    def attach(self, heads, encoders):
        """Precompute the (static) text embeddings of all non-sensor nodes."""
        base = encoders.text.encode_many(self.node_texts)
        emb = torch.as_tensor(heads.embed_texts(base), dtype=DTYPE)
        emb[self.sensor_pos] = 0.0
        self.node_emb = emb
        return self

    def anchor_adapter(self, scale: float = 3.0, noise: float = 0.1, gen=None):
        """Point adapter rows at the mission's key-concept text embeddings.

        The sensor feature then starts as scaled cosines between the packet
        and the mission's key concepts in the joint space, which carries far
        more class signal than a random projection.
        """
        key = [i for i, lvl in enumerate(self.index.levels) if lvl == 1]
        rows = _unit(self.node_emb[[key[i % len(key)] for i in range(self.cfg.d)]])
        with torch.no_grad():
            jitter = torch.randn(rows.shape, generator=gen, dtype=DTYPE) * noise / math.sqrt(rows.shape[1])
            self.adapter.weight.copy_(scale * rows + jitter)
            self.adapter.bias.zero_()
        return self

    def init_features(self, packet_emb: torch.Tensor) -> torch.Tensor:
        """Level-0 features, shape (P, n_nodes, d)."""
        nodes = self.adapter(_unit(self.node_emb))
        sensor = self.adapter(_unit(packet_emb))
        p = packet_emb.shape[0]
        x = nodes.unsqueeze(0).expand(p, -1, -1)
        mask = torch.zeros(len(self.index.node_ids), 1, dtype=torch.bool)
        mask[self.sensor_pos] = True
        return torch.where(mask, sensor.unsqueeze(1), x)

    def propagate(self, x: torch.Tensor) -> torch.Tensor:
        fa = FeatureAssignment(self.index.node_ids, self.index.levels, x)
        for l in range(self.cfg.layers):
            fa = FeatureAssignment(fa.node_ids, fa.levels, fa.values @ self.weight[l].T + self.bias[l])
            fa = message_pass(self.graph, fa, l + 1, self.cfg.activation, self.cfg.product, self.index)
        return fa.values

    def forward(self, packet_emb: torch.Tensor) -> torch.Tensor:
        return self.propagate(self.init_features(packet_emb))[:, self.embedding_pos]


class EncoderBlock(nn.Module):
    """Post-norm transformer encoder block (self-attention + ReLU FFN)."""

    def __init__(self, d_model, heads, d_ff):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(d_model, 3 * d_model, dtype=DTYPE)
        self.out = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.ln1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.ff1 = nn.Linear(d_model, d_ff, dtype=DTYPE)
        self.ff2 = nn.Linear(d_ff, d_model, dtype=DTYPE)
        self.ln2 = nn.LayerNorm(d_model, dtype=DTYPE)

    def attend(self, x, qkv):
        b, a, d = x.shape
        h, dh = self.heads, d // self.heads
        q, k, v = qkv.view(b, a, 3, h, dh).permute(2, 0, 3, 1, 4)
        w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        ctx = (w @ v).transpose(1, 2).reshape(b, a, d)
        h1 = self.ln1(x + self.out(ctx))
        return self.ln2(h1 + self.ff2(torch.relu(self.ff1(h1))))

    def forward(self, x):
        return self.attend(x, self.qkv(x))


class TemporalHead(nn.Module):
    def __init__(self, token_dim, n_classes, cfg: ReasonerConfig):
        super().__init__()
        self.window = cfg.window
        self.in_proj = nn.Linear(token_dim, cfg.d_model, dtype=DTYPE)
        self.pos = nn.Parameter(torch.empty(cfg.window, cfg.d_model, dtype=DTYPE))
        self.blocks = nn.ModuleList(EncoderBlock(cfg.d_model, cfg.heads, cfg.d_ff) for _ in range(cfg.depth))
        self.mlp = nn.Sequential(nn.Linear(cfg.d_model, cfg.mlp_hidden, dtype=DTYPE), nn.ReLU(),
                                 nn.Linear(cfg.mlp_hidden, n_classes, dtype=DTYPE))

    def encode(self, tokens):
        x = self.in_proj(tokens) + self.pos
        for blk in self.blocks:
            x = blk(x)
        return x

    def forward(self, tokens):
        """Logits for windows of shape (B, A, token_dim)."""
        return self.mlp(self.encode(tokens).mean(dim=1))


def _init_(module: nn.Module, gen: torch.Generator):
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, TemporalHead):
                m.pos.normal_(0.0, 0.02, generator=gen)
        for m in module.modules():
            if isinstance(m, MissionReasoner):
                # unit-norm inputs: unit-variance weights give O(1) node features
                m.adapter.weight.normal_(0.0, 1.0, generator=gen)
                m.adapter.bias.zero_()
                d = m.weight.shape[-1]
                m.weight.copy_(torch.eye(d, dtype=DTYPE).expand_as(m.weight))
                m.weight.add_(torch.randn(m.weight.shape, generator=gen, dtype=DTYPE) / math.sqrt(d) * 0.5)
                m.bias.uniform_(-0.1, 0.1, generator=gen)


class ReasonerModel(nn.Module):
    """Mission GNNs + temporal transformer head."""

    def __init__(self, graphs, classes, embed_dim: int, cfg: ReasonerConfig | None = None):
        super().__init__()
        self.cfg = cfg or ReasonerConfig()
        self.classes = list(classes)
        self.missions = [g.mission for g in graphs]
        self.embed_dim = embed_dim
        self.reasoners = nn.ModuleList(MissionReasoner(g, embed_dim, self.cfg) for g in graphs)
        self.head = TemporalHead(len(graphs) * self.cfg.d, len(self.classes), self.cfg)
        gen = torch.Generator().manual_seed(self.cfg.seed)
        _init_(self, gen)

    @property
    def graphs(self):
        return [r.graph for r in self.reasoners]

    def attach(self, heads, encoders):
        for r in self.reasoners:
            r.attach(heads, encoders)
        return self

    def frame_tokens(self, packet_emb: torch.Tensor) -> torch.Tensor:
        """(P, embed_dim) packet embeddings -> (P, M*d) frame tokens."""
        return torch.cat([r(packet_emb) for r in self.reasoners], dim=-1)

    def window_logits(self, tokens: torch.Tensor, ends) -> torch.Tensor:
        return self.head(tokens[window_indices(ends, self.cfg.window)])

    # -- checkpoint -------------------------------------------------------
    def to_checkpoint(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "missions": self.missions,
            "classes": self.classes,
            "embed_dim": self.embed_dim,
            "graphs": [kgmod.to_json(g) for g in self.graphs],
            "tensors": {k: {"shape": list(v.shape), "data": v.detach().reshape(-1).tolist()}
                        for k, v in self.state_dict().items()},
        }

    @classmethod
    def from_checkpoint(cls, d: dict) -> "ReasonerModel":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')}")
        model = cls([kgmod.from_json(g) for g in d["graphs"]], d["classes"], d["embed_dim"],
                    ReasonerConfig(**d["config"]))
        state = {k: torch.tensor(v["data"], dtype=DTYPE).reshape(v["shape"]) for k, v in d["tensors"].items()}
        model.load_state_dict(state)
        return model

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_checkpoint(), fh)

    @classmethod
    def load(cls, path) -> "ReasonerModel":
        with open(path) as fh:
            return cls.from_checkpoint(json.load(fh))


def window_indices(ends, window: int) -> torch.Tensor:
    """Index matrix (len(ends), window) with left repeat-padding of index 0."""
    ends = torch.as_tensor(ends, dtype=torch.long)
    offs = torch.arange(-window + 1, 1, dtype=torch.long)
    return (ends[:, None] + offs).clamp(min=0)


# --------------------------------------------------------------------------
# operation-level API

def packet_embeddings(payloads, heads, encoders) -> torch.Tensor:
    base = encoders.packet.encode_many(list(payloads))
    return torch.as_tensor(heads.embed_packets(base), dtype=DTYPE)


def init_node_features(graph, payload: bytes, heads, encoders, reasoner: MissionReasoner) -> FeatureAssignment:
    if reasoner.graph is not graph and reasoner.graph.node_ids != graph.node_ids:
        raise GraphError(f"reasoner was built for mission {reasoner.mission!r}")
    if not reasoner.node_emb.abs().sum():
        reasoner.attach(heads, encoders)
    x = reasoner.init_features(packet_embeddings([payload], heads, encoders))[0]
    return FeatureAssignment(reasoner.index.node_ids, reasoner.index.levels, x)


def layer_transform(fa: FeatureAssignment, reasoner: MissionReasoner, l: int) -> FeatureAssignment:
    """``x <- W_l x + b_l`` on every node (``l`` is 1-based)."""
    if not 1 <= l <= reasoner.cfg.layers:
        raise ValueError(f"layer index {l} out of range 1..{reasoner.cfg.layers}")
    w, b = reasoner.weight[l - 1], reasoner.bias[l - 1]
    if fa.values.shape[-1] != w.shape[1]:
        raise ShapeError(w.shape[1], fa.values.shape[-1])
    return FeatureAssignment(fa.node_ids, fa.levels, fa.values @ w.T + b)


def mission_forward(graphs, payload: bytes, reasoners, heads, encoders) -> torch.Tensor:
    """Frame token for one packet: embedding-node readouts concatenated in mission order."""
    if len(graphs) < 1:
        raise ValueError("need at least one mission")
    parts = []
    for g, r in zip(graphs, reasoners):
        fa = init_node_features(g, payload, heads, encoders, r)
        for l in range(1, r.cfg.layers + 1):
            fa = layer_transform(fa, r, l)
            fa = message_pass(g, fa, l, r.cfg.activation, r.cfg.product, r.index)
        parts.append(fa[g.embedding])
    return torch.cat(parts)


def pad_window(tokens: torch.Tensor, window: int) -> torch.Tensor:
    """Last ``window`` tokens, repeating the earliest when history is short."""
    return tokens[window_indices([len(tokens) - 1], window)[0] if len(tokens) else []]


def temporal_forward(tokens: torch.Tensor, head: TemporalHead) -> torch.Tensor:
    """Class probabilities for one window (A, token_dim) or a batch (B, A, token_dim)."""
    single = tokens.dim() == 2
    if single:
        tokens = tokens.unsqueeze(0)
    if tokens.shape[1] != head.window:
        tokens = torch.stack([pad_window(t, head.window) for t in tokens])
    probs = torch.softmax(head(tokens), dim=-1)
    return probs[0] if single else probs


def smoothing_penalty(probs: torch.Tensor, chunk: int) -> torch.Tensor:
    """Sum over consecutive pairs of squared L2 output change, averaged over chunks."""
    p = probs.view(-1, chunk, probs.shape[-1])
    return ((p[:, 1:] - p[:, :-1]) ** 2).sum(dim=(1, 2)).mean()


def batch_loss(model: ReasonerModel, packet_emb, labels, ends, chunk, smoothing):
    """CE + smoothing over windows ending at ``ends`` (chunks of consecutive ends)."""
    ends = torch.as_tensor(ends, dtype=torch.long)
    win = window_indices(ends, model.cfg.window)
    needed, inverse = torch.unique(win, return_inverse=True)
    tokens = model.frame_tokens(packet_emb[needed])
    logits = model.head(tokens[inverse])
    ce = nn.functional.cross_entropy(logits, labels[ends])
    probs = torch.softmax(logits, dim=-1)
    smooth = smoothing_penalty(probs, chunk) if chunk > 1 else probs.new_zeros(())
    return ce + smoothing * smooth, ce, smooth


def _sample_ends(rng, n, batch, chunk):
    starts = rng.integers(0, max(n - chunk, 0) + 1, size=batch // chunk)
    ends = (starts[:, None] + np.arange(chunk)[None, :]).reshape(-1)
    return np.minimum(ends, n - 1)


def train_reasoner(train, graphs, heads, encoders, config: ReasonerConfig | None = None,
                   classes=None, packet_emb=None, log_path=None):
    """Fit GNN + temporal head on a labeled packet sequence (heads frozen).

    Returns ``(model, log)`` where ``log`` is a list of per-step dicts.
    """
    cfg = config or ReasonerConfig()
    classes = list(classes or train.class_set)
    cls_index = {c: i for i, c in enumerate(classes)}
    try:
        labels = torch.tensor([cls_index[r.label] for r in train.records], dtype=torch.long)
    except KeyError as exc:
        raise ConfigError(f"label {exc.args[0]!r} not among classes {classes}") from None
    if packet_emb is None:
        packet_emb = packet_embeddings([r.payload for r in train.records], heads, encoders)
    embed_dim = packet_emb.shape[1]
    model = ReasonerModel(graphs, classes, embed_dim, cfg).attach(heads, encoders)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    for r in model.reasoners:
        r.anchor_adapter(gen=gen)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)
    n = len(train.records)
    chunk = min(cfg.chunk, n)
    batch = (cfg.batch // cfg.chunk) * chunk
    history = []
    for step in range(cfg.steps):
        ends = _sample_ends(rng, n, batch, chunk)
        loss, ce, smooth = batch_loss(model, packet_emb, labels, ends, chunk, cfg.smoothing)
        if not torch.isfinite(loss):
            norms = {k: float(v.norm()) for k, v in model.named_parameters()}
            raise TrainingError(step, "non-finite reasoner loss", norms)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append({"step": step, "loss": loss.item(), "ce": ce.item(), "smooth": smooth.item()})
    if log_path is not None:
        with open(log_path, "w") as fh:
            for row in history:
                fh.write(json.dumps(row) + "\n")
    return model, history


@torch.no_grad()
def infer_stream(seq, model: ReasonerModel, heads, encoders, packet_emb=None, block: int = 256) -> np.ndarray:
    """Score every packet from the window of frame tokens ending at it."""
    n = len(seq.records) if hasattr(seq, "records") else len(seq)
    if n == 0:
        return np.zeros((0, len(model.classes)))
    if packet_emb is None:
        packet_emb = packet_embeddings([r.payload for r in seq.records], heads, encoders)
    tokens = torch.cat([model.frame_tokens(packet_emb[i:i + 1024]) for i in range(0, n, 1024)])
    out = []
    for i in range(0, n, block):
        logits = model.window_logits(tokens, torch.arange(i, min(i + block, n)))
        out.append(torch.softmax(logits, dim=-1))
    return torch.cat(out).numpy()


class StreamingScorer:
    """Per-packet scorer that caches each frame token's projections.

    Input projection and first-block Q/K/V are linear in (token + position),
    so token parts are computed once on arrival and position parts are
    precomputed tables; only attention mixing, the output projection, the
    FFN and the classifier are re-run per packet.
    """

    def __init__(self, model: ReasonerModel):
        self.model = model
        head = model.head
        blk = head.blocks[0]
        with torch.no_grad():
            self.pos_in = head.in_proj.bias + head.pos                      # (A, d_model)
            self.pos_qkv = self.pos_in @ blk.qkv.weight.T + blk.qkv.bias    # (A, 3 d_model)
        self.cache = deque(maxlen=head.window)

    @torch.no_grad()
    def push_token(self, token: torch.Tensor) -> torch.Tensor:
        head = self.model.head
        blk = head.blocks[0]
        x_tok = token @ head.in_proj.weight.T
        self.cache.append((x_tok, x_tok @ blk.qkv.weight.T))
        items = list(self.cache)
        items = [items[0]] * (head.window - len(items)) + items
        x = torch.stack([a for a, _ in items]) + self.pos_in
        qkv = torch.stack([b for _, b in items]) + self.pos_qkv
        h = blk.attend(x.unsqueeze(0), qkv.unsqueeze(0))
        for other in head.blocks[1:]:
            h = other(h)
        return torch.softmax(head.mlp(h.mean(dim=1)), dim=-1)[0]

    @torch.no_grad()
    def push(self, payload: bytes, heads, encoders) -> torch.Tensor:
        emb = packet_embeddings([payload], heads, encoders)
        return self.push_token(self.model.frame_tokens(emb)[0])


def write_scores(path, seq, scores, classes):
    with open(path, "w") as fh:
        for r, row in zip(seq.records, scores):
            fh.write(json.dumps({"ts": r.timestamp, "scores": dict(zip(classes, map(float, row))),
                                 "label": r.label}) + "\n")
