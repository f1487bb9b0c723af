"""Command-line entry point: ``trafficsem <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import contrastive, evaluate, ingest, kg as kgmod, pipeline, reason, textgen
from .embed import Encoders
from .errors import StageError, TrafficSemError
from .providers import make_provider


def _provider(args):
    if args.provider == "http":
        return make_provider("http", endpoint=args.endpoint, model=args.model)
    return make_provider("stub", seed=args.provider_seed)


def _add_provider(p):
    p.add_argument("--provider", choices=["stub", "http"], default="stub")
    p.add_argument("--endpoint", help="chat-completion URL for --provider http")
    p.add_argument("--model", default="gpt-4o")
    p.add_argument("--provider-seed", type=int, default=0)


def _encoders(args):
    return Encoders.default(seed=args.encoder_seed)


def _dump(obj, path):
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _load_graphs(paths):
    graphs = [kgmod.load(p) for p in paths]
    return {g.mission: g for g in graphs}


# --------------------------------------------------------------------------
# subcommands

def cmd_ingest(args):
    if args.synth:
        seq, flows = ingest.synth_dataset(args.synth, args.per_class, seed=args.seed)
    else:
        if not (args.pcap and args.flows):
            raise TrafficSemError("need --pcap and --flows, or --synth N")
        schema = ingest.load_schema_map(args.schema_map) if args.schema_map else None
        flows = ingest.read_flow_csv(args.flows, schema, strict=args.strict)
        seq = ingest.align(flows, ingest.read_pcap(args.pcap, args.max_payload), args.window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ingest.save_sequence(out / "packets.jsonl", seq)
    ingest.write_flow_csv(out / "flows.csv", flows)
    print(f"{len(seq)} packets, {len(flows)} flows, {seq.unmatched} unmatched -> {out}")


def cmd_kg(args):
    if args.kg_cmd == "generate":
        g = kgmod.build_graph(args.mission, _provider(args), args.v, args.n)
        kgmod.save(g, args.out)
        sizes = [len(layer.concepts) for layer in g.layers]
        print(f"{g.mission}: layers {sizes}, {len(g.edges)} edges -> {args.out}")
    elif args.kg_cmd == "validate":
        bad = 0
        for path in args.graphs:
            rep = kgmod.validate_graph(kgmod.load(path))
            for v in rep.violations:
                print(f"{path}: {v.kind}: {v.detail}")
            bad += not rep.ok
        if bad:
            raise TrafficSemError(f"{bad} graph(s) failed validation")
        print(f"{len(args.graphs)} graph(s) valid")
    else:
        table = kgmod.vocab_report({g.mission: g for g in map(kgmod.load, args.graphs)}, args.top_k)
        for mission, rows in table.items():
            print(mission)
            for term, count in rows:
                print(f"  {term}\t{count}")


def cmd_corpus(args):
    seq = ingest.load_sequence(args.packets)
    flows = ingest.read_flow_csv(args.flows)
    groups = dict(ingest.ACI_GROUPS) if args.groups == "aci" else {}
    corpus = textgen.build_corpus(flows, _load_graphs(args.kg), seq.records, _provider(args), args.k,
                                  args.seed, groups)
    corpus.save(args.out)
    print(f"{len(corpus)} texts ({corpus.report['provider_errors']} template fallbacks) -> {args.out}")


def cmd_pretrain(args):
    corpus = textgen.PairedCorpus.load(args.corpus)
    cfg = contrastive.TrainConfig(lr=args.lr, steps=args.steps, batch=args.batch, tau=args.tau,
                                  denominator_mode=args.denominator, ssl_mode=args.ssl_mode,
                                  symmetric=args.symmetric, seed=args.seed)
    heads, losses = contrastive.pretrain_heads(corpus, _encoders(args), cfg, log_path=args.log)
    _dump({"encoder_seed": args.encoder_seed, "config": contrastive.config_dict(cfg), "heads": heads.to_json()},
          args.out)
    print(f"loss {losses[0]:.4f} -> {losses[-1]:.4f}; heads -> {args.out}", file=sys.stderr)


def cmd_train(args):
    seq = ingest.load_sequence(args.packets)
    if args.groups == "aci":
        seq = evaluate.relabel(seq, ingest.ACI_GROUPS)
    train, _ = ingest.split_dataset(seq, args.fraction, args.seed)
    graphs = _load_graphs(args.kg)
    missions = evaluate.missions_of(seq.class_set)
    missing = [m for m in missions if m not in graphs]
    if missing:
        raise TrafficSemError(f"no graph given for missions {missing}")
    cfg = reason.ReasonerConfig(steps=args.steps, batch=args.batch, window=args.window, smoothing=args.smoothing,
                                lr=args.lr, seed=args.seed)
    heads = pipeline.load_heads(args.heads)
    model, hist = reason.train_reasoner(train, [graphs[m] for m in missions], heads, _encoders(args), cfg,
                                        classes=seq.class_set, log_path=args.log)
    model.save(args.out)
    print(f"loss {hist[0]['loss']:.4f} -> {hist[-1]['loss']:.4f}; model -> {args.out}", file=sys.stderr)


def _model(args):
    heads = pipeline.load_heads(args.heads)
    return reason.ReasonerModel.load(args.model).attach(heads, _encoders(args)), heads


def _target(args, seq):
    if getattr(args, "groups", None) == "aci":
        seq = evaluate.relabel(seq, ingest.ACI_GROUPS)
    if args.split == "test":
        return ingest.split_dataset(seq, 1.0)[1]
    return seq


def cmd_infer(args):
    model, heads = _model(args)
    seq = _target(args, ingest.load_sequence(args.packets))
    scores = reason.infer_stream(seq, model, heads, _encoders(args))
    reason.write_scores(args.out, seq, scores, model.classes)
    print(f"{len(scores)} score vectors -> {args.out}", file=sys.stderr)


def cmd_evaluate(args):
    model, heads = _model(args)
    seq = _target(args, ingest.load_sequence(args.packets))
    probs = reason.infer_stream(seq, model, heads, _encoders(args))
    rep = evaluate.MetricReport.from_scores(probs, seq.labels, model.classes, model.to_checkpoint()["config"])
    _dump({"model": rep.to_json(), "cost": evaluate.count_flops(model).to_json()}, args.out)


def cmd_sweep(args):
    cfg = pipeline.PipelineConfig.load(args.config)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    s = dict(cfg.synth)
    if cfg.pcap:
        flows = ingest.read_flow_csv(cfg.flows)
        seq = ingest.align(flows, ingest.read_pcap(cfg.pcap), cfg.align_window)
    else:
        seq, flows = ingest.synth_dataset(s.pop("num_classes", 4), s.pop("per_class", 1000), **s)
    exp = cfg.experiment()
    grouped, corpus, graphs = evaluate.prepare(seq, flows, exp)
    res = evaluate.scarcity_sweep(grouped, corpus, graphs, exp, args.fractions,
                                  Encoders.default(seed=cfg.encoder_seed))
    _dump(res.to_json(), root / "sweep.json")
    evaluate.write_curve_csv(root / "sweep.csv", res.curve)
    for f, v in res.curve.items():
        print(f"{f}\t{'failed: ' + res.errors[f] if v is None else f'{v:.4f}'}")


def cmd_cost(args):
    if args.model:
        model = reason.ReasonerModel.load(args.model)
    else:
        cfg = reason.ReasonerConfig(d_model=args.d_model, depth=args.depth, window=args.window)
        model = evaluate.default_cost_model(cfg=cfg)
    rep = evaluate.count_flops(model)
    if args.csv:
        evaluate.write_cost_csv(args.csv, rep)
    _dump(rep.to_json(), args.out)


def cmd_report(args):
    sys.stdout.write(pipeline.report(args.dir))


def cmd_run(args):
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig()
    root = pipeline.run_pipeline(cfg, args.out, resume=args.resume)
    print(f"artifacts -> {root}")


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trafficsem", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p, seed=True):
        p.add_argument("--encoder-seed", type=int, default=0)
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ingest", help="parse pcap + flow CSV (or synthesize) into labeled packets")
    p.add_argument("--pcap")
    p.add_argument("--flows")
    p.add_argument("--schema-map")
    p.add_argument("--window", type=float, default=1.0)
    p.add_argument("--max-payload", type=int, default=ingest.MAX_PAYLOAD_LEN)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--synth", type=int, metavar="N_CLASSES")
    p.add_argument("--per-class", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("kg", help="knowledge graph tools")
    ks = p.add_subparsers(dest="kg_cmd", required=True)
    g = ks.add_parser("generate")
    g.add_argument("--mission", required=True)
    g.add_argument("--v", type=int, default=kgmod.DEFAULT_V)
    g.add_argument("--n", type=int, default=kgmod.DEFAULT_N)
    g.add_argument("--out", required=True)
    _add_provider(g)
    g = ks.add_parser("validate")
    g.add_argument("graphs", nargs="+")
    g = ks.add_parser("vocab")
    g.add_argument("graphs", nargs="+")
    g.add_argument("--top-k", type=int, default=10)
    p.set_defaults(func=cmd_kg)

    p = sub.add_parser("corpus", help="build the paired text corpus")
    p.add_argument("--packets", required=True)
    p.add_argument("--flows", required=True)
    p.add_argument("--kg", nargs="+", required=True)
    p.add_argument("--k", type=int, default=2, help="concepts injected per text")
    p.add_argument("--groups", choices=["none", "aci"], default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_provider(p)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("pretrain", help="contrastive training of the projection heads")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ssl-mode", choices=contrastive.SSL_MODES, default="both")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--tau", type=float, default=0.07)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--denominator", choices=contrastive.DENOMINATOR_MODES, default="standard")
    p.add_argument("--symmetric", action="store_true")
    p.add_argument("--log")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train the graph reasoner")
    p.add_argument("--packets", required=True)
    p.add_argument("--kg", nargs="+", required=True)
    p.add_argument("--heads", required=True)
    p.add_argument("--groups", choices=["none", "aci"], default="none")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--window", type=int, default=30)
    p.add_argument("--smoothing", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--log")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (("infer", cmd_infer, "score packets"), ("evaluate", cmd_evaluate, "AUC report")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--packets", required=True)
        p.add_argument("--model", required=True)
        p.add_argument("--heads", required=True)
        p.add_argument("--groups", choices=["none", "aci"], default="none")
        p.add_argument("--split", choices=["test", "all"], default="test" if name == "evaluate" else "all")
        p.add_argument("--out", required=name == "infer")
        common(p, seed=False)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="data-scarcity sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--fractions", type=float, nargs="+", default=list(evaluate.SCARCITY_FRACTIONS))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("cost", help="parameter and FLOP counts")
    p.add_argument("--model")
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--window", type=int, default=30)
    p.add_argument("--csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("report", help="render tables from an artifact directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full pipeline from one config file")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrafficSemError, OSError, ValueError, KeyError) as exc:
        print(f"error: [{args.cmd}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
