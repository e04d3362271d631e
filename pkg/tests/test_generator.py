import math

import pytest
import torch

from flowrag.datafiles import corpus_vocab
from flowrag.dialog import DialogHistory, Utterance
from flowrag.flowchart import Document
from flowrag.generator import (
    CausalLmGenerator,
    GeneratorTrainConfig,
    TemplateOracleGenerator,
    batch_nll,
    build_lm_input,
    encode_target,
    greedy_generate,
    load_generator,
    log_prob,
    pretrain_generator,
    save_generator,
)
from flowrag.retriever import make_pseudo_pairs
from flowrag.text import AGENT, BEGIN, SEP, Vocab


def history(*texts):
    utts = []
    for i, text in enumerate(texts):
        utts.append(Utterance("user" if i % 2 == 0 else "agent", text))
    return DialogHistory(tuple(utts))


@pytest.fixture(scope="module")
def vocab():
    return Vocab.build(
        ["replace the fuse now .", "does the engine crank ?", "yes", "no",
         "my car is dead", "check the battery ."]
    )


@pytest.fixture()
def doc():
    return Document("node:t0", "node", "t0", ("does the engine crank ?", "no"), "replace the fuse now .")


class TestLmInput:
    def test_layout_root_doc_single_utterance(self, vocab):
        root_doc = Document("node:n0", "node", "n0", (), "does the engine crank ?")
        inp = build_lm_input(vocab, history("my car is dead"), root_doc)
        assert inp.tokens[0] == BEGIN
        assert inp.tokens[-1] == AGENT
        assert inp.tokens.count(SEP) == 1
        sep_at = inp.tokens.index(SEP)
        assert list(inp.tokens[1:sep_at]) == ["does", "the", "engine", "crank", "?"]
        assert list(inp.tokens[sep_at + 1 : -1]) == ["my", "car", "is", "dead"]
        assert inp.segment_ids[0] == 0 and inp.segment_ids[-1] == 2

    def test_deterministic(self, vocab, doc):
        h = history("my car is dead")
        assert build_lm_input(vocab, h, doc) == build_lm_input(vocab, h, doc)

    def test_truncation_drops_oldest_keeps_latest(self, vocab, doc):
        turns = ["my car is dead"]
        for i in range(12):
            turns.extend([f"does the engine crank {i} ?", "no"])
        h = history(*turns)
        inp = build_lm_input(vocab, h, doc, max_context=48)
        assert len(inp.token_ids) <= 48
        # the latest user utterance ("no") must survive
        assert inp.tokens[-2] == "no"
        # the document value is intact at the front
        assert list(inp.tokens[1:6]) == ["replace", "the", "fuse", "now", "."]

    def test_distinct_inputs_for_distinct_pairs(self, vocab, doc):
        other = Document("node:t1", "node", "t1", ("x ?",), "check the battery .")
        h1, h2 = history("my car is dead"), history("yes")
        seen = {
            build_lm_input(vocab, h, d).token_ids
            for h in (h1, h2)
            for d in (doc, other)
        }
        assert len(seen) == 4

    def test_detokenized_roundtrip_contains_value_and_history(self, vocab, doc):
        inp = build_lm_input(vocab, history("my car is dead"), doc)
        text = inp.detokenized()
        assert "replace the fuse now ." in text
        assert "my car is dead" in text


class TestTemplateOracle:
    def test_value_scores_zero(self, vocab, doc):
        oracle = TemplateOracleGenerator(vocab)
        inp = build_lm_input(vocab, history("my car is dead"), doc)
        y = encode_target(vocab, doc.value)
        assert log_prob(oracle, inp, y) == [0.0] * len(y)

    def test_other_tokens_floored(self, vocab, doc):
        oracle = TemplateOracleGenerator(vocab)
        inp = build_lm_input(vocab, history("my car is dead"), doc)
        y = encode_target(vocab, "check the battery .")
        assert min(log_prob(oracle, inp, y)) <= -1e8

    def test_distributions_sum_to_one(self, vocab, doc):
        oracle = TemplateOracleGenerator(vocab)
        inp = build_lm_input(vocab, history("my car is dead"), doc)
        logp = oracle.next_token_log_probs(inp, [[], [vocab.id_of("replace")]])
        sums = torch.exp(logp).sum(dim=1)
        assert torch.allclose(sums, torch.ones(2), atol=1e-6)

    def test_greedy_emits_value(self, vocab, doc):
        oracle = TemplateOracleGenerator(vocab)
        inp = build_lm_input(vocab, history("my car is dead"), doc)
        tokens = vocab.decode(greedy_generate(oracle, inp))
        assert tokens == ["replace", "the", "fuse", "now", "."]


@pytest.fixture(scope="module")
def neural_model(vocab):
    torch.manual_seed(0)
    return CausalLmGenerator(vocab, dim=32, layers=2, heads=2)


class TestNeuralGenerator:
    @pytest.fixture()
    def model(self, neural_model):
        return neural_model

    def test_uniform_logits_give_log_v(self, vocab, doc):
        torch.manual_seed(0)
        model = CausalLmGenerator(vocab, dim=32, layers=2, heads=2)
        torch.nn.init.zeros_(model.head.weight)
        torch.nn.init.zeros_(model.head.bias)
        inp = build_lm_input(vocab, history("my car is dead"), doc)
        y = encode_target(vocab, "yes")
        lps = log_prob(model, inp, y)
        assert lps == pytest.approx([-math.log(len(vocab))] * len(y), abs=1e-5)

    def test_chain_rule_matches_stepwise_oracle(self, vocab, doc):
        torch.manual_seed(1)
        model = CausalLmGenerator(vocab, dim=32, layers=2, heads=2).double()
        inp = build_lm_input(vocab, history("my car is dead"), doc)
        y = encode_target(vocab, "check the battery .")
        total = sum(model.sequence_log_probs(inp, y))
        stepwise = 0.0
        prefix = []
        for tok in y:
            logp = model.next_token_log_probs(inp, [prefix])[0]
            stepwise += float(logp[tok])
            prefix.append(tok)
        assert total == pytest.approx(stepwise, abs=1e-9)

    def test_per_position_distributions_sum_to_one(self, model, vocab, doc):
        inp = build_lm_input(vocab, history("my car is dead"), doc)
        logp = model.next_token_log_probs(inp, [[], [3]])
        assert torch.allclose(torch.exp(logp).sum(dim=1), torch.ones(2), atol=1e-6)

    def test_log_prob_validates_target(self, model, vocab, doc):
        inp = build_lm_input(vocab, history("my car is dead"), doc)
        with pytest.raises(ValueError):
            log_prob(model, inp, [])
        with pytest.raises(ValueError):
            log_prob(model, inp, [vocab.id_of("yes")])  # no end marker

    def test_checkpoint_roundtrip(self, model, vocab, doc, tmp_path):
        path = tmp_path / "generator.pt"
        save_generator(model, path)
        clone = load_generator(path)
        inp = build_lm_input(vocab, history("my car is dead"), doc)
        y = encode_target(vocab, "yes")
        assert clone.sequence_log_probs(inp, y) == pytest.approx(
            model.sequence_log_probs(inp, y)
        )


class TestPretraining:
    def test_oracle_backend_rejected(self, vocab):
        oracle = TemplateOracleGenerator(vocab)
        with pytest.raises(ValueError):
            pretrain_generator(oracle, [(history("hi"), None, "yes")], GeneratorTrainConfig())

    def test_empty_triples_rejected(self, vocab):
        model = CausalLmGenerator(vocab, dim=16, layers=1, heads=2)
        with pytest.raises(ValueError):
            pretrain_generator(model, [], GeneratorTrainConfig())

    def test_zero_epochs_unchanged(self, vocab, doc):
        torch.manual_seed(0)
        model = CausalLmGenerator(vocab, dim=16, layers=1, heads=2)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        pretrain_generator(
            model, [(history("hi"), doc, "yes")], GeneratorTrainConfig(epochs=0)
        )
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v)

    def test_indifferent_classifier_loss_is_log_two(self, vocab, doc):
        # negative equals positive -> labels 1 and 0 on identical logits; a
        # zeroed head outputs logit 0 and BCE collapses to log 2
        torch.manual_seed(0)
        model = CausalLmGenerator(vocab, dim=16, layers=1, heads=2)
        torch.nn.init.zeros_(model.cls_head.weight)
        torch.nn.init.zeros_(model.cls_head.bias)
        from flowrag.generator import _classification_logits

        inp = build_lm_input(vocab, history("my car is dead"), doc)
        y = encode_target(vocab, "yes")
        logits = _classification_logits(model, [(inp, y), (inp, y)])
        labels = torch.tensor([1.0, 0.0])
        loss = torch.nn.functional.binary_cross_entropy_with_logits(logits, labels)
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-6)

    def test_training_improves_held_out_nll(self, knowledge, small_corpus):
        dialogs = [d for d in small_corpus if d.flowchart_id == "car-no-start-toy"][:24]
        held_out, train = dialogs[:6], dialogs[6:]
        vocab = corpus_vocab(dialogs, knowledge.documents.values())
        pseudo_train = make_pseudo_pairs(train, knowledge.documents)
        pseudo_eval = make_pseudo_pairs(held_out, knowledge.documents)
        torch.manual_seed(3)
        model = CausalLmGenerator(vocab, dim=32, layers=2, heads=2)
        eval_items = [
            (build_lm_input(vocab, p.history, p.document), encode_target(vocab, p.response))
            for p in pseudo_eval
        ]
        with torch.no_grad():
            before = batch_nll(model, eval_items).item()
        triples = [(p.history, p.document, p.response) for p in pseudo_train]
        pretrain_generator(
            model, triples, GeneratorTrainConfig(epochs=3, lr=1e-3, batch_size=16, seed=3)
        )
        with torch.no_grad():
            after = batch_nll(model, eval_items).item()
        assert after < before

    def test_lambda_zero_reduces_to_pure_nll(self, vocab, doc):
        # with lambda 0 the classification head receives no gradient
        torch.manual_seed(0)
        model = CausalLmGenerator(vocab, dim=16, layers=1, heads=2)
        cls_before = model.cls_head.weight.clone()
        triples = [(history("my car is dead"), doc, doc.value)] * 4
        pretrain_generator(
            model, triples, GeneratorTrainConfig(epochs=2, lr=1e-3, batch_size=2, lambda_cls=0.0)
        )
        assert torch.equal(cls_before, model.cls_head.weight)
