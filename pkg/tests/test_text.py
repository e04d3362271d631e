from hypothesis import given
from hypothesis import strategies as st

from flowrag.text import SPECIAL_TOKENS, Vocab, detokenize, tokenize


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Does the Battery read 12V, or not?") == [
        "does", "the", "battery", "read", "12v", ",", "or", "not", "?",
    ]


def test_tokenize_never_emits_special_tokens():
    toks = tokenize("weird <begin> input <end>")
    for special in SPECIAL_TOKENS:
        assert special not in toks


def test_vocab_roundtrip():
    vocab = Vocab.build(["the cat sat", "the dog ran"])
    ids = vocab.encode("the cat ran")
    assert vocab.decode(ids) == ["the", "cat", "ran"]
    assert vocab.id_of("unseen-token") == vocab.unk_id


def test_vocab_serialization():
    vocab = Vocab.build(["alpha beta gamma"])
    clone = Vocab.from_dict(vocab.to_dict())
    assert clone.tokens == vocab.tokens
    assert clone.id_of("beta") == vocab.id_of("beta")


@given(st.text())
def test_tokenize_total(text):
    toks = tokenize(text)
    assert all(t == t.lower() for t in toks)
    assert detokenize(toks).count(" ") == max(0, len(toks) - 1)
