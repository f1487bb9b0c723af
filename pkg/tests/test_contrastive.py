import json
import math

import numpy as np
import pytest

from trafficsem import contrastive, textgen
from trafficsem.contrastive import TrainConfig, info_nce, info_nce_grad, zero_shot_classify
from trafficsem.embed import Heads, ProjectionHead
from trafficsem.errors import ConfigError

from oracles import fd_check, loop_info_nce


def _unit(v):
    return np.asarray(v, float) / np.linalg.norm(v)


def test_closed_form_single_negative():
    z = np.array([1.0, 0.0])
    loss = info_nce(z, z, [np.array([0.0, 1.0])], tau=1.0)
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.31326, abs=1e-5)


def test_equal_similarities_give_log_k_plus_one():
    z = np.array([1.0, 0.0])
    loss = info_nce(z, z, [z.copy() for _ in range(4)], tau=0.3)
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_paper_literal_matches_scalar_formula():
    rng = np.random.default_rng(1)
    for _ in range(20):
        t, p = _unit(rng.normal(size=6)), _unit(rng.normal(size=6))
        negs = [_unit(rng.normal(size=6)) for _ in range(5)]
        tau = rng.uniform(0.05, 1.0)
        num = math.exp(float(t @ p) / tau)
        den = sum(math.exp(float(t @ n) / tau) for n in negs)
        assert info_nce(t, p, negs, tau, "paper-literal") == pytest.approx(-math.log(num / den), rel=1e-12)


def test_tau_must_be_positive():
    z = np.ones(2)
    with pytest.raises(ConfigError):
        info_nce(z, z, [z], tau=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(tau=-1)


def test_standard_loss_nonnegative_and_monotone():
    rng = np.random.default_rng(2)
    t = _unit(rng.normal(size=5))
    orth = rng.normal(size=5)
    orth = _unit(orth - (orth @ t) * t)
    negs = [_unit(rng.normal(size=5)) for _ in range(3)]
    losses = [info_nce(t, math.cos(a) * t + math.sin(a) * orth, negs, 0.1)
              for a in np.linspace(math.pi, 0.0, 12)]
    assert min(losses) >= 0
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_negative_order_invariance():
    rng = np.random.default_rng(3)
    t, p = rng.normal(size=4), rng.normal(size=4)
    negs = [rng.normal(size=4) for _ in range(6)]
    a = info_nce(t, p, negs, 0.2)
    b = info_nce(t, p, negs[::-1], 0.2)
    assert a == pytest.approx(b, abs=1e-13)


def test_batch_loss_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x_t, x_p = rng.normal(size=(5, 7)), rng.normal(size=(5, 6))
    heads = Heads(ProjectionHead.init(7, 3, 1), ProjectionHead.init(6, 3, 2))
    for mode in contrastive.DENOMINATOR_MODES:
        for sym in (False, True):
            got = contrastive.batch_loss(x_t, x_p, heads, 0.3, mode, sym)
            assert got == pytest.approx(loop_info_nce(x_t, x_p, heads, 0.3, mode, sym), rel=1e-11)


@pytest.mark.parametrize("ssl_mode", contrastive.SSL_MODES)
@pytest.mark.parametrize("mode", contrastive.DENOMINATOR_MODES)
def test_gradient_matches_finite_differences(ssl_mode, mode):
    rng = np.random.default_rng(5)
    dim = 6
    x_t, x_p = rng.normal(size=(4, dim)), rng.normal(size=(4, dim))
    heads = contrastive.init_heads(dim, dim, TrainConfig(ssl_mode=ssl_mode, embed_dim=5, seed=3))
    worst = fd_check(x_t, x_p, heads, 0.5, mode, False)
    assert worst <= 1e-5


def test_symmetric_gradient():
    rng = np.random.default_rng(6)
    x_t, x_p = rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
    heads = Heads(ProjectionHead.init(5, 3, 1), ProjectionHead.init(4, 3, 2))
    assert fd_check(x_t, x_p, heads, 0.2, "standard", True) <= 1e-5


def test_zero_heads_symmetric_batch_zero_gradient():
    x = np.tile(np.array([0.3, -0.1, 0.8]), (4, 1))
    heads = Heads(ProjectionHead(np.zeros((2, 3)), np.zeros(2)), ProjectionHead(np.zeros((2, 3)), np.zeros(2)))
    _, grads = info_nce_grad(x, x, heads, 0.1)
    assert all(not g.any() for g in grads.values())


def test_packet_only_has_no_text_gradient():
    rng = np.random.default_rng(7)
    heads = contrastive.init_heads(8, 8, TrainConfig(ssl_mode="packet-only"))
    _, grads = info_nce_grad(rng.normal(size=(4, 8)), rng.normal(size=(4, 8)), heads, 0.1)
    assert set(grads) == {"packet.weight", "packet.bias"}
    assert heads.text is None


def test_adam_matches_reference_step():
    w = np.array([1.0, -2.0])
    opt = contrastive.Adam({"w": w}, lr=0.1, beta1=0.9, beta2=0.8, eps=1e-6)
    g = np.array([0.5, -4.0])
    opt.step({"w": g})
    # first step of bias-corrected Adam moves each coordinate by ~lr * sign(g)
    m_hat, v_hat = g, g * g
    assert np.allclose(w, [1.0, -2.0] - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-6))


# -- pretraining ----------------------------------------------------------

@pytest.fixture(scope="module")
def corpus(small_synth, stub):
    from trafficsem import kg
    seq, flows = small_synth
    graphs = {m: kg.build_graph(m, stub, 4, 2) for m in seq.class_set if m != "Benign"}
    return textgen.build_corpus(flows, graphs, seq.records, stub, k=2, seed=0)


def test_lr_zero_keeps_init(corpus, encoders):
    cfg = TrainConfig(lr=0.0, steps=5, batch=16)
    heads, _ = contrastive.pretrain_heads(corpus, encoders, cfg)
    init = contrastive.init_heads(512, 512, cfg)
    assert np.array_equal(heads.text.weight, init.text.weight)
    assert np.array_equal(heads.packet.bias, init.packet.bias)


def test_pretrain_deterministic_and_logs(corpus, encoders, tmp_path):
    cfg = TrainConfig(steps=15, batch=16, seed=2)
    _, a = contrastive.pretrain_heads(corpus, encoders, cfg, log_path=tmp_path / "log.jsonl")
    _, b = contrastive.pretrain_heads(corpus, encoders, cfg)
    assert a == b
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["loss"] for r in rows] == a and rows[-1]["step"] == 14


def test_pretrain_makes_progress(encoders, stub):
    from trafficsem import ingest, kg
    seq, flows = ingest.synth_dataset(4, 120, seed=0)
    graphs = {m: kg.build_graph(m, stub, 4, 2) for m in seq.class_set if m != "Benign"}
    corpus = textgen.build_corpus(flows, graphs, seq.records, stub)
    _, losses = contrastive.pretrain_heads(corpus, encoders, TrainConfig(steps=300, batch=64))
    assert np.mean(losses[-100:]) < np.mean(losses[:100])


def test_pretrain_needs_enough_pairs(corpus, encoders):
    with pytest.raises(ConfigError):
        contrastive.pretrain_heads(corpus, encoders, TrainConfig(batch=len(corpus) + 1))


# -- zero-shot ------------------------------------------------------------

def test_zero_shot_permutation_and_prefix(encoders):
    heads = contrastive.init_heads(512, 512, TrainConfig(seed=1))
    prompts = textgen.class_prompts(["Benign", "DoS", "Reconnaissance", "Brute Force", "Other"])
    payload = bytes(range(40))
    full = zero_shot_classify(payload, heads, encoders, prompts, k=5)
    assert sorted(full) == sorted(prompts)
    assert zero_shot_classify(payload, heads, encoders, prompts, k=1) == full[:1]


def test_zero_shot_tie_keeps_label_order(encoders):
    prompts = {"b": "same prompt", "a": "same prompt", "c": "other words entirely"}
    heads = contrastive.init_heads(512, 512, TrainConfig(seed=0))
    r1 = zero_shot_classify(b"\x00\x01", heads, encoders, prompts, 3)
    r2 = zero_shot_classify(b"\x00\x01", heads, encoders, prompts, 3)
    assert r1 == r2
    assert r1.index("b") < r1.index("a")


def test_zero_shot_rejects_bad_k(encoders):
    with pytest.raises(ValueError):
        zero_shot_classify(b"x", Heads(), encoders, {"a": "a"}, 2)
