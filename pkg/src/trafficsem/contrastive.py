"""Contrastive alignment of packet and text embeddings.

Only the projection heads are trained; base encodings are computed once
and held fixed. The loss is InfoNCE over in-batch negatives with cosine
similarity and temperature ``tau``. Two denominators are supported:

``standard``
    positive plus negatives (the usual SimCLR/CLIP form)
``paper-literal``
    negatives only (the positive is excluded from the denominator)
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .embed import EMBED_DIM, Heads, ProjectionHead
from .errors import ConfigError, ShapeError, TrainingError

DENOMINATOR_MODES = ("standard", "paper-literal")
SSL_MODES = ("none", "packet-only", "both")


@dataclass
class TrainConfig:
    lr: float = 5.0e-4
    beta1: float = 0.9
    beta2: float = 0.8
    epsilon: float = 1.0e-6
    steps: int = 3000
    batch: int = 128
    tau: float = 0.07
    denominator_mode: str = "standard"
    ssl_mode: str = "both"
    symmetric: bool = False
    embed_dim: int = EMBED_DIM
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.denominator_mode not in DENOMINATOR_MODES:
            raise ConfigError(f"denominator_mode must be one of {DENOMINATOR_MODES}")
        if self.ssl_mode not in SSL_MODES:
            raise ConfigError(f"ssl_mode must be one of {SSL_MODES}")


def _logsumexp(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))


def info_nce(z_t, z_p_pos, negatives, tau: float, mode: str = "standard") -> float:
    """Loss for one anchor text embedding against its packet and a negative set."""
    if tau <= 0:
        raise ConfigError("tau must be > 0")
    if len(negatives) == 0:
        raise ValueError("negatives must be non-empty")
    if mode not in DENOMINATOR_MODES:
        raise ConfigError(f"unknown denominator mode {mode!r}")
    pos = _cos(z_t, z_p_pos) / tau
    neg = np.array([_cos(z_t, z) / tau for z in negatives])
    terms = neg if mode == "paper-literal" else np.append(neg, pos)
    return float(_logsumexp(terms) - pos)


def _unit(z):
    n = np.linalg.norm(z, axis=1, keepdims=True)
    safe = np.where(n > 0, n, 1.0)
    return np.where(n > 0, z / safe, 0.0), n


def _directional(sim, mode):
    """Row-wise loss and d(mean loss)/d(sim) for rows as anchors."""
    b = sim.shape[0]
    logits = sim.copy()
    if mode == "paper-literal":
        np.fill_diagonal(logits, -np.inf)
    lse = _logsumexp(logits, axis=1)
    losses = lse - np.diag(sim)
    prob = np.exp(logits - lse[:, None])
    grad = (prob - np.eye(b)) / b
    return losses, grad


def batch_loss_and_sim_grad(z_t, z_p, tau, mode="standard", symmetric=False):
    """Mean InfoNCE over a batch with in-batch negatives, plus d/dZ for both sides."""
    if z_t.shape[0] != z_p.shape[0] or z_t.shape[0] < 2:
        raise ShapeError("matching batch sizes >= 2", (z_t.shape[0], z_p.shape[0]))
    u, nu = _unit(z_t)
    v, nv = _unit(z_p)
    sim = (u @ v.T) / tau
    losses, g = _directional(sim, mode)
    loss = losses.mean()
    if symmetric:
        losses2, g2 = _directional(sim.T, mode)
        loss = 0.5 * (loss + losses2.mean())
        g = 0.5 * (g + g2.T)
    gc = g / tau
    du = gc @ v
    dv = gc.T @ u
    # back through normalization: (g - (g.u)u)/|z|, zero for zero vectors
    with np.errstate(invalid="ignore", divide="ignore"):
        dz_t = np.where(nu > 0, (du - np.sum(du * u, axis=1, keepdims=True) * u) / np.where(nu > 0, nu, 1), 0.0)
        dz_p = np.where(nv > 0, (dv - np.sum(dv * v, axis=1, keepdims=True) * v) / np.where(nv > 0, nv, 1), 0.0)
    return float(loss), dz_t, dz_p


def batch_loss(x_t, x_p, heads: Heads, tau, mode="standard", symmetric=False) -> float:
    """Mean batch loss given *base* encodings and heads."""
    loss, _, _ = batch_loss_and_sim_grad(heads.embed_texts(x_t), heads.embed_packets(x_p), tau, mode, symmetric)
    return loss


def info_nce_grad(x_t, x_p, heads: Heads, tau, mode="standard", symmetric=False):
    """Loss and exact gradients w.r.t. head parameters.

    Returns ``(loss, grads)`` where grads maps ``text.weight``,
    ``text.bias``, ``packet.weight``, ``packet.bias`` to arrays; a side with
    no head contributes no entries.
    """
    z_t, z_p = heads.embed_texts(x_t), heads.embed_packets(x_p)
    loss, dz_t, dz_p = batch_loss_and_sim_grad(z_t, z_p, tau, mode, symmetric)
    grads = {}
    if heads.text is not None:
        grads["text.weight"] = dz_t.T @ x_t
        grads["text.bias"] = dz_t.sum(axis=0)
    if heads.packet is not None:
        grads["packet.weight"] = dz_p.T @ x_p
        grads["packet.bias"] = dz_p.sum(axis=0)
    return loss, grads


def head_params(heads: Heads) -> dict:
    out = {}
    for side in ("text", "packet"):
        h = getattr(heads, side)
        if h is not None:
            out[f"{side}.weight"] = h.weight
            out[f"{side}.bias"] = h.bias
    return out


class Adam:
    """Adam with bias correction; updates arrays in place."""

    def __init__(self, params: dict, lr=5.0e-4, beta1=0.9, beta2=0.8, eps=1.0e-6):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def init_heads(text_dim: int, packet_dim: int, config: TrainConfig) -> Heads:
    ss = np.random.SeedSequence(config.seed)
    s_text, s_packet = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    if config.ssl_mode == "none":
        if text_dim != packet_dim:
            raise ShapeError(text_dim, packet_dim)
        return Heads()
    if config.ssl_mode == "packet-only":
        return Heads(packet=ProjectionHead.init(packet_dim, text_dim, s_packet))
    return Heads(ProjectionHead.init(text_dim, config.embed_dim, s_text),
                 ProjectionHead.init(packet_dim, config.embed_dim, s_packet))


def corpus_base(corpus, encoders):
    """Base encodings ``(x_t, x_p)`` of a paired corpus."""
    x_t = encoders.text.encode_many([s.text for s in corpus.texts])
    x_p = encoders.packet.encode_many([p.payload for p in corpus.packets])
    return x_t, x_p


def pretrain_heads(corpus, encoders, config: TrainConfig, base=None, log_path=None):
    """Train the projection heads on a paired corpus.

    Returns ``(heads, losses)`` with one loss per optimizer step. ``base``
    may carry precomputed ``(x_t, x_p)`` encodings.
    """
    x_t, x_p = base if base is not None else corpus_base(corpus, encoders)
    n = len(x_t)
    if n < config.batch:
        raise ConfigError(f"corpus size {n} is smaller than batch {config.batch}")
    heads = init_heads(x_t.shape[1], x_p.shape[1], config)
    params = head_params(heads)
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.epsilon)
    rng = np.random.default_rng(config.seed)
    order, pos = rng.permutation(n), 0
    losses = []
    for step in range(config.steps):
        if pos + config.batch > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + config.batch]
        pos += config.batch
        loss, grads = info_nce_grad(x_t[idx], x_p[idx], heads, config.tau,
                                    config.denominator_mode, config.symmetric)
        if not math.isfinite(loss):
            raise TrainingError(step, "non-finite contrastive loss",
                                {k: float(np.linalg.norm(v)) for k, v in params.items()})
        losses.append(loss)
        if grads:
            opt.step(grads)
    if log_path is not None:
        write_train_log(log_path, losses)
    return heads, losses


def write_train_log(path, losses):
    with open(path, "w") as fh:
        for i, loss in enumerate(losses):
            fh.write(json.dumps({"step": i, "loss": loss}) + "\n")


def zero_shot_scores(payload_base, prompt_base, heads: Heads) -> np.ndarray:
    """Cosine matrix (packets x classes) in the joint space."""
    u, _ = _unit(np.atleast_2d(heads.embed_packets(payload_base)))
    v, _ = _unit(np.atleast_2d(heads.embed_texts(prompt_base)))
    return u @ v.T


def zero_shot_classify(payload: bytes, heads: Heads, encoders, class_prompts: dict, k: int) -> list:
    """Top-``k`` labels by cosine to each class prompt; ties keep prompt order."""
    labels = list(class_prompts)
    if not 1 <= k <= len(labels):
        raise ValueError(f"k must be in [1, {len(labels)}]")
    pb = encoders.packet.encode(payload)
    tb = encoders.text.encode_many([class_prompts[c] for c in labels])
    sims = zero_shot_scores(pb, tb, heads)[0]
    order = np.argsort(-sims, kind="stable")
    return [labels[i] for i in order[:k]]


def zero_shot_rankings(payloads, heads: Heads, encoders, class_prompts: dict) -> list:
    labels = list(class_prompts)
    pb = encoders.packet.encode_many(list(payloads))
    tb = encoders.text.encode_many([class_prompts[c] for c in labels])
    sims = zero_shot_scores(pb, tb, heads)
    return [[labels[i] for i in np.argsort(-row, kind="stable")] for row in sims]


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
