"""Align packets with text, then classify packets nobody labeled for us.

Ten traffic classes are synthesized, each packet gets a short description
of its flow, and linear heads on top of two frozen hashed encoders are
trained so that paired (text, packet) embeddings land close together.
Afterwards a packet is classified by ranking prompts such as
"Port Scan traffic" by cosine similarity. We compare three settings: no
heads, a head on the packet side only, and heads on both sides.
"""

from trafficsem import contrastive, evaluate as ev, ingest, textgen
from trafficsem.contrastive import TrainConfig
from trafficsem.embed import Encoders

seq, flows = ingest.synth_dataset(10, 200, seed=0)
cfg = ev.ExperimentConfig(groups=dict(ingest.ACI_GROUPS))
_, corpus, _ = ev.prepare(seq, flows, cfg)
corpus = textgen.PairedCorpus(corpus.texts, seq.records, corpus.report)

print("sample texts")
for s in corpus.texts[:3]:
    print(f"  [{s.label}] {s.text}")

train, test = ingest.split_dataset(seq, 1.0)
sub = ev.subset_corpus(corpus, train.records)
enc = Encoders.default()
prompts = textgen.class_prompts(seq.class_set)

print(f"\n{len(sub)} training pairs, {len(test)} test packets, {len(prompts)} classes")
for mode in contrastive.SSL_MODES:
    if mode == "none":
        heads = contrastive.init_heads(0, 0, TrainConfig(ssl_mode="none"))
    else:
        heads, losses = contrastive.pretrain_heads(sub, enc, TrainConfig(steps=500, ssl_mode=mode))
        print(f"  {mode}: loss {losses[0]:.3f} -> {losses[-1]:.3f}")
    acc = ev.zero_shot_eval(test.records, heads, enc, prompts, ks=(1, 5))
    print(f"  {mode:12s} top1 {acc['top1']:.3f}  top5 {acc['top5']:.3f}")
