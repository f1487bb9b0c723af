import math

import numpy as np
import pytest
import torch

from trafficsem import reason
from trafficsem.embed import Encoders, Heads, HashedPacketEncoder, HashedTextEncoder, ProjectionHead
from trafficsem.errors import GraphError, ShapeError
from trafficsem.ingest import LabeledSequence, PacketRecord, synth_dataset
from trafficsem.kg import ConceptLayer, assemble_graph
from trafficsem.reason import FeatureAssignment, ReasonerConfig, ReasonerModel

from oracles import dense_message_pass, random_dag

DT = torch.float64


class _Plain:
    """Bare graph value for message-passing tests."""

    def __init__(self, n, edges):
        self.node_ids = list(range(n))
        self.edges = edges


def _fa(n, x):
    return FeatureAssignment(list(range(n)), [0] * n, torch.as_tensor(x, dtype=DT))


def _toy(d=4, window=3, seed=0, embed_dim=6):
    graphs = [
        assemble_graph("DoS", [ConceptLayer(1, ["flood", "syn"]), ConceptLayer(2, ["spoof"])]),
        assemble_graph("Reconnaissance", [ConceptLayer(1, ["scan", "probe", "sweep"])]),
    ]
    enc = Encoders(HashedPacketEncoder(16), HashedTextEncoder(16))
    heads = Heads(ProjectionHead.init(16, embed_dim, 1), ProjectionHead.init(16, embed_dim, 2))
    cfg = ReasonerConfig(d=d, layers=2, d_model=8, heads=2, d_ff=8, window=window, mlp_hidden=5,
                         batch=8, chunk=4, steps=3, seed=seed)
    return graphs, enc, heads, cfg


def _toy_seq(n=24, seed=0):
    rng = np.random.default_rng(seed)
    labels = ["Benign", "DoS", "Reconnaissance"]
    recs = [PacketRecord(i, rng.integers(0, 256, 12, dtype=np.uint8).tobytes(), labels[(i // 4) % 3])
            for i in range(n)]
    return LabeledSequence(recs, labels)


# -- message passing ------------------------------------------------------

def test_all_ones_predecessor_is_identity():
    x = [[1.0, 1.0, 1.0], [0.3, -2.0, 5.0]]
    out = reason.message_pass(_Plain(2, [(0, 1)]), _fa(2, x), activation="identity")
    assert torch.equal(out.values, torch.tensor(x, dtype=DT))


def test_opposite_predecessors_cancel():
    x = [[1.0, -2.0], [-1.0, 2.0], [0.7, 0.4]]
    out = reason.message_pass(_Plain(3, [(0, 2), (1, 2)]), _fa(3, x), activation="identity")
    assert torch.equal(out.values[2], torch.zeros(2, dtype=DT))
    assert torch.equal(out.values[:2], torch.tensor(x[:2], dtype=DT))


@pytest.mark.parametrize("activation", ["tanh", "identity", "relu"])
def test_matches_dense_oracle(activation):
    rng = np.random.default_rng(11)
    act = {"tanh": math.tanh, "identity": lambda v: v, "relu": lambda v: max(v, 0.0)}[activation]
    for _ in range(30):
        n, edges = random_dag(rng)
        d = int(rng.integers(1, 9))
        x = rng.normal(size=(n, d))
        got = reason.message_pass(_Plain(n, edges), _fa(n, x), activation=activation).values.numpy()
        want = np.array(dense_message_pass(n, edges, x.tolist(), act))
        assert np.max(np.abs(got - want)) <= 1e-12


def test_skip_edges_ignored():
    # 0 -> 1 -> 2 and a shortcut 0 -> 2: node 2 sits two levels down, so only 1 feeds it
    x = [[2.0], [3.0], [0.5]]
    out = reason.message_pass(_Plain(3, [(0, 1), (1, 2), (0, 2)]), _fa(3, x), activation="identity")
    assert out.values[2, 0].item() == 0.5 * 3.0


def test_synchronous_update_order_free():
    rng = np.random.default_rng(2)
    n, edges = random_dag(rng)
    x = rng.normal(size=(n, 3))
    a = reason.message_pass(_Plain(n, edges), _fa(n, x)).values
    b = reason.message_pass(_Plain(n, edges[::-1]), _fa(n, x)).values
    assert torch.allclose(a, b, atol=1e-15)


def test_scalar_variant():
    x = [[1.0, 2.0], [0.5, -1.0]]
    out = reason.message_pass(_Plain(2, [(0, 1)]), _fa(2, x), activation="identity", product="scalar")
    gate = 0.5 * 1.0 + -1.0 * 2.0
    assert torch.allclose(out.values[1], gate * torch.tensor([1.0, 2.0], dtype=DT))


def test_cycle_rejected():
    with pytest.raises(GraphError):
        reason.GraphIndex([0, 1], [(0, 1), (1, 0)])


# -- layer transform ------------------------------------------------------

def _reasoner(d=4, embed_dim=6):
    graphs, _, _, cfg = _toy(d=d, embed_dim=embed_dim)
    return reason.MissionReasoner(graphs[0], embed_dim, cfg)


def test_layer_identity_and_constant():
    r = _reasoner()
    fa = _fa(5, np.random.default_rng(0).normal(size=(5, 4)))
    with torch.no_grad():
        r.weight[0] = torch.eye(4)
        r.bias[0] = 0.0
        r.weight[1] = 0.0
        r.bias[1] = torch.tensor([1.0, 2.0, 3.0, 4.0])
    assert torch.equal(reason.layer_transform(fa, r, 1).values, fa.values)
    assert torch.equal(reason.layer_transform(fa, r, 2).values, r.bias[1].detach().expand(5, 4))


def test_layer_matches_loop_oracle():
    r = _reasoner()
    x = np.random.default_rng(1).normal(size=(5, 4))
    with torch.no_grad():
        r.weight.normal_()
        r.bias.normal_()
    got = reason.layer_transform(_fa(5, x), r, 2).values.detach().numpy()
    w, b = r.weight[1].detach().numpy(), r.bias[1].detach().numpy()
    want = [[sum(w[i, j] * row[j] for j in range(4)) + b[i] for i in range(4)] for row in x]
    assert np.allclose(got, want, atol=1e-13)


def test_layer_shape_error_and_range():
    r = _reasoner()
    with pytest.raises(ShapeError):
        reason.layer_transform(_fa(5, np.zeros((5, 3))), r, 1)
    with pytest.raises(ValueError):
        reason.layer_transform(_fa(5, np.zeros((5, 4))), r, 3)


# -- feature init ---------------------------------------------------------

def test_concepts_static_sensor_varies():
    graphs, enc, heads, cfg = _toy()
    r = reason.MissionReasoner(graphs[0], 6, cfg)
    a = reason.init_node_features(graphs[0], b"\x01\x02\x03\x04", heads, enc, r)
    b = reason.init_node_features(graphs[0], b"\xff\xfe\xfd", heads, enc, r)
    s = r.sensor_pos
    others = [i for i in range(len(a.node_ids)) if i != s]
    assert torch.equal(a.values[others], b.values[others])
    assert not torch.equal(a.values[s], b.values[s])
    again = reason.init_node_features(graphs[0], b"\x01\x02\x03\x04", heads, enc, r)
    assert torch.equal(a.values, again.values)


def test_identity_adapter_passes_embedding_through():
    graphs, _, _, cfg = _toy(d=8, embed_dim=8)
    enc = Encoders(HashedPacketEncoder(8), HashedTextEncoder(8))
    heads = Heads()  # base vectors are already unit length
    r = reason.MissionReasoner(graphs[0], 8, cfg)
    with torch.no_grad():
        r.adapter.weight.copy_(torch.eye(8))
        r.adapter.bias.zero_()
    payload = bytes(range(30))
    fa = reason.init_node_features(graphs[0], payload, heads, enc, r)
    assert torch.allclose(fa[graphs[0].sensor], torch.as_tensor(enc.packet.encode(payload)), atol=1e-15)


# -- mission forward ------------------------------------------------------

def test_token_lengths():
    graphs, enc, heads, _ = _toy()
    cfg = ReasonerConfig(d=8)
    rs = [reason.MissionReasoner(g, 6, cfg) for g in graphs]
    assert reason.mission_forward(graphs[:1], b"abc", rs[:1], heads, enc).shape == (8,)
    three = graphs + [assemble_graph("Brute Force", [ConceptLayer(1, ["login"])])]
    rs.append(reason.MissionReasoner(three[2], 6, cfg))
    assert reason.mission_forward(three, b"abc", rs, heads, enc).shape == (24,)


def test_mission_forward_matches_model_path():
    graphs, enc, heads, cfg = _toy()
    model = ReasonerModel(graphs, ["Benign", "DoS", "Reconnaissance"], 6, cfg).attach(heads, enc)
    token = reason.mission_forward(graphs, b"payload!", list(model.reasoners), heads, enc)
    batch = model.frame_tokens(reason.packet_embeddings([b"payload!"], heads, enc))[0]
    assert torch.allclose(token, batch, atol=1e-13)


def test_concept_permutation_invariance():
    _, enc, heads, cfg = _toy()
    a = assemble_graph("DoS", [ConceptLayer(1, ["flood", "syn", "botnet"]), ConceptLayer(2, ["spoof", "amp"])])
    b = assemble_graph("DoS", [ConceptLayer(1, ["botnet", "flood", "syn"]), ConceptLayer(2, ["amp", "spoof"])])
    ra = reason.MissionReasoner(a, 6, cfg)
    rb = reason.MissionReasoner(b, 6, cfg)
    rb.load_state_dict(ra.state_dict())
    for payload in (b"\x00\x10\x20", b"hello world"):
        xa = reason.mission_forward([a], payload, [ra], heads, enc)
        xb = reason.mission_forward([b], payload, [rb], heads, enc)
        assert torch.allclose(xa, xb, atol=1e-12)


# -- temporal head --------------------------------------------------------

def _head(classes=4, window=5):
    cfg = ReasonerConfig(window=window)
    head = reason.TemporalHead(24, classes, cfg)
    reason._init_(head, torch.Generator().manual_seed(0))
    return head


def test_equal_logits_uniform():
    head = _head()
    with torch.no_grad():
        head.mlp[-1].weight.zero_()
        head.mlp[-1].bias.fill_(0.7)
    p = reason.temporal_forward(torch.randn(5, 24, dtype=DT), head)
    assert torch.allclose(p, torch.full((4,), 0.25, dtype=DT), atol=1e-15)


def test_probabilities_normalized():
    head = _head()
    p = reason.temporal_forward(torch.randn(7, 5, 24, dtype=DT) * 3, head)
    assert p.shape == (7, 4)
    assert torch.all(p >= 0)
    assert torch.max(torch.abs(p.sum(-1) - 1)) <= 1e-9


def test_logit_shift_invariance():
    head = _head()
    x = torch.randn(5, 24, dtype=DT)
    a = reason.temporal_forward(x, head)
    with torch.no_grad():
        head.mlp[-1].bias += 12.5
    b = reason.temporal_forward(x, head)
    assert torch.allclose(a, b, atol=1e-14)
    assert a.argmax() == b.argmax()


def test_short_history_repeat_padded():
    head = _head()
    x = torch.randn(2, 24, dtype=DT)
    padded = torch.stack([x[0], x[0], x[0], x[0], x[1]])
    assert torch.equal(reason.pad_window(x, 5), padded)
    assert torch.allclose(reason.temporal_forward(x, head), reason.temporal_forward(padded, head))


def test_window_indices():
    assert reason.window_indices([0, 4], 3).tolist() == [[0, 0, 0], [2, 3, 4]]


# -- training -------------------------------------------------------------

def test_total_loss_gradient_finite_differences():
    graphs, enc, heads, cfg = _toy(d=4, window=3)
    seq = _toy_seq(12)
    model = ReasonerModel(graphs, seq.class_set, 6, cfg).attach(heads, enc)
    emb = reason.packet_embeddings([r.payload for r in seq], heads, enc)
    labels = torch.tensor([seq.class_set.index(lab) for lab in seq.labels])
    ends = np.array([2, 3, 4, 5, 8, 9, 10, 11])

    def loss():
        return reason.batch_loss(model, emb, labels, ends, 4, 0.5)[0]

    model.zero_grad()
    loss().backward()
    h = 1e-6
    worst = 0.0
    for p in model.parameters():
        g = p.grad.clone()
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
            fd = (up - down) / (2 * h)
            a = g.view(-1)[i].item()
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    assert worst <= 1e-4


def test_smoothing_penalty_value():
    p = torch.tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.5, 0.5]], dtype=DT)
    # chunks [[r0, r1], [r2, r3]]: (1 + 1) and (0.25 + 0.25), averaged
    assert reason.smoothing_penalty(p, 2).item() == pytest.approx((2.0 + 0.5) / 2)


def _train(seq, lr=5e-3, smoothing=0.1, steps=40, seed=0):
    graphs, enc, heads, _ = _toy()
    cfg = ReasonerConfig(d=4, layers=2, d_model=16, heads=2, d_ff=16, window=6, mlp_hidden=8,
                         batch=32, chunk=8, steps=steps, lr=lr, smoothing=smoothing, seed=seed)
    return reason.train_reasoner(seq, graphs, heads, enc, cfg), (graphs, enc, heads, cfg)


def test_lr_zero_leaves_parameters():
    seq = _toy_seq(40)
    (model, _), (graphs, enc, heads, cfg) = _train(seq, lr=0.0, steps=3)
    init = ReasonerModel(graphs, seq.class_set, 6, cfg).attach(heads, enc)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    for r in init.reasoners:
        r.anchor_adapter(gen=gen)
    for (k, a), (_, b) in zip(model.state_dict().items(), init.state_dict().items()):
        assert torch.equal(a, b), k


def test_training_deterministic(tmp_path):
    seq = _toy_seq(40)
    (a, log_a), _ = _train(seq, steps=5)
    (b, log_b), _ = _train(seq, steps=5)
    assert log_a == log_b
    for (k, x), (_, y) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(x, y), k
    a.save(tmp_path / "a.json")
    b.save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def _jitter(model, enc, heads, seq):
    probs = reason.infer_stream(seq, model, heads, enc)
    return np.linalg.norm(np.diff(probs, axis=0), axis=1).mean()


def test_smoothing_term_pulls_outputs_together():
    seq, _ = synth_dataset(3, 120, seed=4, class_names=["Benign", "DoS", "Reconnaissance"])
    const = LabeledSequence([PacketRecord(r.timestamp, r.payload, "DoS") for r in seq], seq.class_set)
    (m0, _), (_, enc, heads, _) = _train(const, lr=0.0, steps=1)
    before = _jitter(m0, enc, heads, const)
    after = {}
    for lam in (0.0, 0.1, 2.0):
        (m, _), _ = _train(const, smoothing=lam, steps=30)
        after[lam] = _jitter(m, enc, heads, const)
    assert after[0.1] < before
    assert after[2.0] < after[0.0]


def test_smoothing_decreases_during_training():
    seq, _ = synth_dataset(3, 120, seed=4, class_names=["Benign", "DoS", "Reconnaissance"])
    (_, log), _ = _train(seq, smoothing=2.0, steps=60)
    first = np.mean([r["smooth"] for r in log[5:20]])
    last = np.mean([r["smooth"] for r in log[-15:]])
    assert last < first


# -- inference ------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    seq = _toy_seq(40)
    (model, _), (_, enc, heads, _) = _train(seq, steps=10)
    return model, enc, heads


def test_single_packet_stream(trained):
    model, enc, heads = trained
    out = reason.infer_stream(LabeledSequence([PacketRecord(0, b"abc", "DoS")]), model, heads, enc)
    assert out.shape == (1, 3) and abs(out.sum() - 1) < 1e-12


def test_stream_length_and_repeats(trained):
    model, enc, heads = trained
    seq = LabeledSequence([PacketRecord(i, b"same bytes", "DoS") for i in range(5)]
                          + [PacketRecord(5 + i, bytes([i]) * 9, "DoS") for i in range(4)])
    out = reason.infer_stream(seq, model, heads, enc, block=4)
    assert out.shape == (9, 3)
    assert all(np.array_equal(out[0], out[i]) for i in range(1, 5))


def test_streaming_scorer_matches_batch(trained):
    model, enc, heads = trained
    seq = _toy_seq(15, seed=3)
    batch = reason.infer_stream(seq, model, heads, enc)
    scorer = reason.StreamingScorer(model)
    stream = np.stack([scorer.push(r.payload, heads, enc).numpy() for r in seq])
    assert np.max(np.abs(batch - stream)) <= 1e-10


def test_checkpoint_roundtrip(trained, tmp_path):
    model, enc, heads = trained
    model.save(tmp_path / "m.json")
    back = ReasonerModel.load(tmp_path / "m.json").attach(heads, enc)
    seq = _toy_seq(10, seed=5)
    assert np.array_equal(reason.infer_stream(seq, model, heads, enc), reason.infer_stream(seq, back, heads, enc))
    assert back.classes == model.classes and back.missions == model.missions


def test_write_scores(trained, tmp_path):
    import json
    model, enc, heads = trained
    seq = _toy_seq(3)
    scores = reason.infer_stream(seq, model, heads, enc)
    reason.write_scores(tmp_path / "s.jsonl", seq, scores, model.classes)
    row = json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])
    assert set(row) == {"ts", "scores", "label"} and list(row["scores"]) == model.classes
