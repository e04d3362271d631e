"""Command line entry point: synthesis, training, evaluation, serving, chat."""

from __future__ import annotations

import argparse
import logging
import random
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_run_config
from .datafiles import (
    Knowledge,
    corpus_vocab,
    load_knowledge,
    load_paraphrase_bank,
)
from .dialog import Dialog, load_corpus, write_corpus
from .evalharness import evaluate_corpus, write_report
from .generator import (
    CausalLmGenerator,
    TemplateOracleGenerator,
    load_generator,
    pretrain_generator,
    save_generator,
)
from .rag import train_rag
from .retriever import (
    GoldLookupRetriever,
    HierarchicalRetriever,
    PathOracleRetriever,
    load_retriever,
    make_pseudo_pairs,
    pretrain_retriever_grouped,
    save_retriever,
)
from .sessions import EventLog, SessionStore, Turn
from .synth import SplitSpec, forge_corpus, load_splits, make_splits, save_splits

logger = logging.getLogger(__name__)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowrag")
    parser.add_argument("--config", type=Path, help="run config file (JSON)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--split", choices=["seen", "unseen"], help="override split mode")
    parser.add_argument("--out", type=Path, help="override the artifact directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="forge the dialog corpus and splits")
    sub.add_parser("pretrain-retriever", help="contrastive retriever pre-training")
    sub.add_parser("pretrain-generator", help="generator pre-training")
    sub.add_parser("train", help="joint fine-tuning on the mixture likelihood")
    p_eval = sub.add_parser("eval", help="evaluate on the test split")
    p_eval.add_argument("--part", choices=["val", "test"], default="test")
    p_eval.add_argument("--oracle", action="store_true", help="evaluate oracle models")
    p_serve = sub.add_parser("serve", help="run the HTTP session service")
    p_serve.add_argument("--oracle", action="store_true", help="serve oracle models")
    p_chat = sub.add_parser("chat", help="interactive terminal session")
    p_chat.add_argument("--flowchart", help="chart id (defaults to the first)")
    p_chat.add_argument("--oracle", action="store_true", help="chat with oracle models")
    return parser


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.split is not None:
        cfg.split_mode = args.split
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _load_corpus_and_splits(cfg: RunConfig) -> tuple[list[Dialog], SplitSpec]:
    if not cfg.corpus_path.exists():
        raise ConfigError(f"corpus not found at {cfg.corpus_path}; run `flowrag synth` first")
    corpus = load_corpus(cfg.corpus_path)
    splits = load_splits(cfg.splits_path)
    return corpus, splits


def _split_dialogs(corpus, splits: SplitSpec):
    by_id = {d.dialog_id: d for d in corpus}
    return (
        [by_id[i] for i in splits.train],
        [by_id[i] for i in splits.val],
        [by_id[i] for i in splits.test],
    )


def cmd_synth(cfg: RunConfig) -> int:
    knowledge = load_knowledge(cfg.data_dir)
    bank = load_paraphrase_bank(cfg.data_dir, knowledge)
    rng = random.Random(cfg.seed)
    corpus = forge_corpus(list(knowledge.charts.values()), knowledge.faqs, bank, cfg.synth, rng)
    splits = make_splits(corpus, list(knowledge.charts.values()), cfg.split_mode, rng)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, cfg.corpus_path)
    save_splits(splits, cfg.splits_path)
    print(
        f"forged {len(corpus)} dialogs over {len(knowledge.charts)} flowcharts "
        f"({len(splits.train)} train / {len(splits.val)} val / {len(splits.test)} test)"
    )
    print(f"corpus:  {cfg.corpus_path}")
    print(f"splits:  {cfg.splits_path}")
    return 0


def cmd_pretrain_retriever(cfg: RunConfig) -> int:
    import torch

    knowledge = load_knowledge(cfg.data_dir)
    corpus, splits = _load_corpus_and_splits(cfg)
    train, val, _ = _split_dialogs(corpus, splits)
    vocab = corpus_vocab(train, knowledge.documents.values())
    torch.manual_seed(cfg.retriever.seed)
    model = HierarchicalRetriever(vocab, cfg.retriever.embed_dim)
    train_pairs = make_pseudo_pairs(train, knowledge.documents)
    val_pairs = make_pseudo_pairs(val, knowledge.documents)
    pretrain_retriever_grouped(
        model, train_pairs, knowledge.documents, cfg.retriever, val_pairs=val_pairs
    )
    save_retriever(model, cfg.retriever_path)
    print(f"retriever checkpoint: {cfg.retriever_path}")
    return 0


def cmd_pretrain_generator(cfg: RunConfig) -> int:
    import torch

    knowledge = load_knowledge(cfg.data_dir)
    corpus, splits = _load_corpus_and_splits(cfg)
    train, val, _ = _split_dialogs(corpus, splits)
    vocab = corpus_vocab(train, knowledge.documents.values())
    torch.manual_seed(cfg.generator.seed)
    model = CausalLmGenerator(
        vocab, dim=cfg.generator.dim, layers=cfg.generator.layers, heads=cfg.generator.heads
    )
    triples = [
        (p.history, p.document, p.response) for p in make_pseudo_pairs(train, knowledge.documents)
    ]
    val_triples = [
        (p.history, p.document, p.response) for p in make_pseudo_pairs(val, knowledge.documents)
    ]
    pretrain_generator(model, triples, cfg.generator, val_triples=val_triples)
    save_generator(model, cfg.generator_path)
    print(f"generator checkpoint: {cfg.generator_path}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    knowledge = load_knowledge(cfg.data_dir)
    corpus, splits = _load_corpus_and_splits(cfg)
    train, _, _ = _split_dialogs(corpus, splits)
    retriever = load_retriever(cfg.retriever_path)
    generator = load_generator(cfg.generator_path)
    nll = train_rag(retriever, generator, train, knowledge.documents, cfg.rag, cfg.train)
    for epoch, value in enumerate(nll):
        print(f"epoch {epoch}: mean NLL {value:.4f}")
    save_retriever(retriever, cfg.retriever_path)
    save_generator(generator, cfg.generator_path)
    print(f"updated checkpoints under {cfg.out_dir}")
    return 0


def _oracle_models(knowledge: Knowledge):
    vocab = corpus_vocab([], knowledge.documents.values())
    retrievers = {
        chart_id: PathOracleRetriever(knowledge.charts[chart_id], docs)
        for chart_id, docs in knowledge.documents.items()
    }
    return retrievers, TemplateOracleGenerator(vocab)


def cmd_eval(cfg: RunConfig, part: str, oracle: bool) -> int:
    knowledge = load_knowledge(cfg.data_dir)
    corpus, splits = _load_corpus_and_splits(cfg)
    _, val, test = _split_dialogs(corpus, splits)
    dialogs = test if part == "test" else val
    if oracle:
        vocab = corpus_vocab(dialogs, knowledge.documents.values())
        retriever = GoldLookupRetriever(dialogs)
        generator = TemplateOracleGenerator(vocab)
        report, records = evaluate_corpus(
            retriever,
            generator,
            dialogs,
            knowledge.charts,
            knowledge.documents,
            cfg.rag,
            compute_perplexity=False,
        )
        print(report.format_table(f"{part} split (oracle models)"))
        write_report(report, records, cfg.reports_dir, f"{part}-oracle")
        return 0
    retriever = load_retriever(cfg.retriever_path)
    generator = load_generator(cfg.generator_path)
    report, records = evaluate_corpus(
        retriever, generator, dialogs, knowledge.charts, knowledge.documents, cfg.rag
    )
    print(report.format_table(f"{part} split"))
    write_report(report, records, cfg.reports_dir, part)
    print(f"report files under {cfg.reports_dir}")
    return 0


def _build_engine(cfg: RunConfig, oracle: bool):
    from .service import ChatEngine

    knowledge = load_knowledge(cfg.data_dir)
    if oracle:
        retriever, generator = _oracle_models(knowledge)
    else:
        if not cfg.retriever_path.exists() or not cfg.generator_path.exists():
            raise ConfigError(
                f"checkpoints missing under {cfg.out_dir}; train first or pass --oracle"
            )
        retriever = load_retriever(cfg.retriever_path)
        generator = load_generator(cfg.generator_path)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    store = SessionStore(EventLog(cfg.session_log_path))
    return ChatEngine(
        knowledge, retriever, generator, cfg.rag, store, topk_panel=cfg.service.topk_panel
    )


def cmd_serve(cfg: RunConfig, oracle: bool) -> int:
    import uvicorn

    from .service import build_app

    engine = _build_engine(cfg, oracle)
    app = build_app(engine)
    print(f"serving on http://{cfg.service.host}:{cfg.service.port}")
    uvicorn.run(app, host=cfg.service.host, port=cfg.service.port, log_level="warning")
    return 0


def cmd_chat(cfg: RunConfig, flowchart: str | None, oracle: bool) -> int:
    engine = _build_engine(cfg, oracle)
    chart_ids = engine.knowledge.chart_ids()
    chart_id = flowchart or chart_ids[0]
    if chart_id not in engine.knowledge.charts:
        raise ConfigError(f"unknown flowchart {chart_id!r}; available: {chart_ids}")
    session = engine.store.create(chart_id)
    print(f"chatting over {chart_id!r} (session {session.session_id}); empty line quits")
    while True:
        try:
            text = input("you> ").strip()
        except EOFError:
            break
        if not text:
            break
        history = engine.store.get(session.session_id).history_with(text)
        agent_text, doc_id, _ = engine.reply(chart_id, history)
        engine.store.add_turn(session.session_id, Turn(text, agent_text, doc_id, []))
        print(f"agent> {agent_text}   [{doc_id}]")
    engine.store.close(session.session_id)
    print("session closed")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _load_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "pretrain-retriever":
            return cmd_pretrain_retriever(cfg)
        if args.command == "pretrain-generator":
            return cmd_pretrain_generator(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.part, args.oracle)
        if args.command == "serve":
            return cmd_serve(cfg, args.oracle)
        if args.command == "chat":
            return cmd_chat(cfg, args.flowchart, args.oracle)
        raise AssertionError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, PermissionError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
