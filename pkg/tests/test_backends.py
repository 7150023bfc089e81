import sys
import types

import pytest
import torch

from evidencemap.backends import (
    FastWeightDecoder,
    MockEncoder,
    MockSpec,
    TableDecoder,
    TinyCausalDecoder,
    PretrainedEncoder,
    UniformDecoder,
    WordVocab,
    parse_backend_key,
    share_budget,
)
from evidencemap.errors import DimensionMismatch, IdOutOfRange, ModelError, PreconditionError, TokenizationError


class TestWordVocab:
    def test_build_ranks_by_frequency_then_alphabet(self):
        vocab = WordVocab.build(["b a a", "c b a"], max_size=10)
        assert vocab.itos[4:] == ["a", "b", "c"]

    def test_build_respects_max_size(self):
        vocab = WordVocab.build(["b a a", "c b a"], max_size=5)
        assert len(vocab) == 5
        assert vocab.itos[4] == "a"

    def test_encode_unknown_and_decode_specials(self):
        vocab = WordVocab(["yes", "no"])
        assert vocab.encode("yes maybe") == [4, WordVocab.UNK]
        assert vocab.decode([WordVocab.BOS, 4, 5, WordVocab.EOS, 99]) == "yes no tok99"

    def test_dict_round_trip(self):
        vocab = WordVocab(["yes", "no"])
        assert WordVocab.from_dict(vocab.to_dict()).itos == vocab.itos


class TestMockEncoder:
    def test_seeded_weights_are_reproducible(self):
        a = MockEncoder(MockSpec(seed=3, dim=8), max_context=64)
        b = MockEncoder(MockSpec(seed=3, dim=8), max_context=64)
        c = MockEncoder(MockSpec(seed=4, dim=8), max_context=64)
        assert torch.equal(a.encode("hello").states, b.encode("hello").states)
        assert not torch.equal(a.encode("hello").states, c.encode("hello").states)

    def test_states_are_prefix_causal(self):
        encoder = MockEncoder(MockSpec(seed=0, dim=8), max_context=64)
        first = encoder.encode("alpha beta gamma").states
        second = encoder.encode("alpha beta delta").states
        assert torch.allclose(first[:2], second[:2])
        assert not torch.allclose(first[2], second[2])

    def test_empty_input(self):
        encoder = MockEncoder(MockSpec(seed=0, dim=8), max_context=64)
        with pytest.raises(TokenizationError, match="empty input"):
            encoder.encode("   ")

    def test_hashes_whole_words(self):
        encoder = MockEncoder(MockSpec(seed=0, dim=8), buckets=64, max_context=64)
        ids = encoder.tokenize("aspirin  relieves\npain aspirin")
        assert len(ids) == 4
        assert ids[0] == ids[3]
        assert all(0 <= i < 64 for i in ids)

    def test_plain_text_keeps_its_head(self):
        encoder = MockEncoder(MockSpec(seed=0, dim=8), max_context=5)
        encoded = encoder.encode("a b c d e f g")
        assert encoded.truncated
        assert encoded.token_ids == encoder.tokenize("a b c d e")

    def test_segments_keep_fixed_pieces(self):
        encoder = MockEncoder(MockSpec(seed=0, dim=8), max_context=20)
        cue = "\nCue: now"
        encoded = encoder.encode_segments([("x " * 100, True), (cue, False)])
        assert encoded.truncated
        assert len(encoded.token_ids) == 20
        assert encoded.token_ids[-2:] == encoder.tokenize(cue)
        assert encoded.pooled_index == 19
        assert encoded.states.shape == (20, 8)

    def test_fixed_pieces_over_budget(self):
        encoder = MockEncoder(MockSpec(seed=0, dim=8), max_context=2)
        with pytest.raises(TokenizationError, match="fixed prompt text"):
            encoder.encode_segments([("evidence", True), ("one two three", False)])

    def test_short_prompt_not_truncated(self):
        encoder = MockEncoder(MockSpec(seed=0, dim=8), max_context=64)
        encoded = encoder.encode("a short prompt")
        assert not encoded.truncated
        assert encoded.pooled_index == 2


class TestTinyCausalDecoder:
    @pytest.fixture
    def decoder(self):
        return TinyCausalDecoder(MockSpec(seed=1, dim=8, vocab_size=16), WordVocab(["a", "b"]), n_layers=1)

    def test_frozen_at_construction(self, decoder):
        assert all(not p.requires_grad for p in decoder.parameters())

    def test_embed_tokens(self, decoder):
        assert decoder.embed_tokens([4, 5]).shape == (2, 8)
        assert decoder.embed_tokens([]).shape == (0, 8)
        with pytest.raises(IdOutOfRange):
            decoder.embed_tokens([16])

    def test_forward_logits_checks_shape(self, decoder):
        with pytest.raises(DimensionMismatch):
            decoder.forward_logits(torch.zeros(3, 5, dtype=torch.float64))
        with pytest.raises(PreconditionError):
            decoder.forward_logits(torch.zeros(0, 8, dtype=torch.float64))

    def test_logits_are_causal(self, decoder):
        x = decoder.embed_tokens([4, 5, 4])
        longer = torch.cat([x, decoder.embed_tokens([5])])
        assert torch.allclose(decoder.forward_logits(x), decoder.forward_logits(longer)[:3])

    def test_same_seed_same_checksum(self, decoder):
        other = TinyCausalDecoder(MockSpec(seed=1, dim=8, vocab_size=16), WordVocab(["a", "b"]), n_layers=1)
        assert decoder.checksum() == other.checksum()

    def test_generate_requires_budget(self, decoder):
        with pytest.raises(PreconditionError):
            decoder.generate(decoder.embed_tokens([4]), 0)

    def test_vocab_larger_than_vocab_size(self):
        with pytest.raises(PreconditionError):
            TinyCausalDecoder(MockSpec(seed=1, dim=8, vocab_size=5), WordVocab(["a", "b"]))


def test_table_decoder_stops_at_eos():
    decoder = TableDecoder(MockSpec(seed=0, dim=4, vocab_size=8), default_id=5, table={3: WordVocab.EOS})
    produced = decoder.generate(decoder.embed_tokens([4, 4]), max_new_tokens=10)
    assert produced == [5, 5, WordVocab.EOS]


def test_table_decoder_respects_budget():
    decoder = TableDecoder(MockSpec(seed=0, dim=4, vocab_size=8), default_id=5)
    assert decoder.generate(decoder.embed_tokens([4]), max_new_tokens=3) == [5, 5, 5]


def test_uniform_decoder_logits_are_zero():
    decoder = UniformDecoder(MockSpec(seed=0, dim=4, vocab_size=8))
    logits = decoder.forward_logits(decoder.embed_tokens([4, 5]))
    assert torch.count_nonzero(logits) == 0


def test_parse_backend_key():
    assert parse_backend_key("mock") == ("mock", "")
    assert parse_backend_key("mock:transformer") == ("mock", "transformer")
    assert parse_backend_key("mock:fastweight") == ("mock", "fastweight")
    assert parse_backend_key("pretrained:gpt2") == ("pretrained", "gpt2")
    with pytest.raises(ModelError):
        parse_backend_key("pretrained:")
    with pytest.raises(ModelError):
        parse_backend_key("other")
    with pytest.raises(ModelError):
        parse_backend_key("mock:lstm")


class TestFastWeightDecoder:
    @pytest.fixture
    def decoder(self):
        return FastWeightDecoder(MockSpec(seed=1, dim=16, vocab_size=12), WordVocab(["a", "b"]), key_dim=4)

    def test_frozen_and_seeded(self, decoder):
        assert all(not p.requires_grad for p in decoder.parameters())
        other = FastWeightDecoder(MockSpec(seed=1, dim=16, vocab_size=12), WordVocab(["a", "b"]), key_dim=4)
        assert decoder.checksum() == other.checksum()

    def test_key_dim_must_divide_dim(self):
        with pytest.raises(PreconditionError):
            FastWeightDecoder(MockSpec(seed=1, dim=10, vocab_size=12), key_dim=4)

    def test_logits_are_causal(self, decoder):
        x = decoder.embed_tokens([4, 5, 4])
        longer = torch.cat([x, decoder.embed_tokens([5])])
        assert torch.allclose(decoder.forward_logits(x), decoder.forward_logits(longer)[:3])

    def test_prefix_row_steers_the_next_token(self, decoder):
        # the longest readout row wins when the read vector points along it
        token = int(decoder.readout.norm(dim=1).argmax())
        query = torch.nn.functional.normalize(decoder.embed_tokens([4]) @ decoder.query.T, dim=-1)[0]
        target = decoder.readout[token] / decoder.readout[token].norm()
        row = (50.0 * torch.outer(target, query)).reshape(1, 16)
        logits = decoder.forward_logits(torch.cat([row, decoder.embed_tokens([4])]))
        assert int(torch.argmax(logits[-1])) == token


def test_share_budget():
    assert share_budget([3, 4], 10) == [3, 4]
    assert share_budget([600, 5], 100) == [95, 5]
    assert share_budget([50, 50], 41) == [20, 21]
    assert share_budget([10, 10], 0) == [0, 0]


def test_pretrained_encoder_context_respects_position_table(monkeypatch):
    class FakeTokenizer:
        model_max_length = int(1e30)

        def num_special_tokens_to_add(self, pair=False):
            return 2

    fake_model = types.SimpleNamespace(config=types.SimpleNamespace(hidden_size=8, max_position_embeddings=512))
    fake = types.ModuleType("transformers")
    fake.AutoTokenizer = types.SimpleNamespace(from_pretrained=lambda model_id: FakeTokenizer())
    fake.AutoModel = types.SimpleNamespace(from_pretrained=lambda model_id, torch_dtype=None: fake_model)
    monkeypatch.setitem(sys.modules, "transformers", fake)

    assert PretrainedEncoder("fake-bert", max_context=1024).max_context == 510
    assert PretrainedEncoder("fake-bert", max_context=128).max_context == 126
    assert PretrainedEncoder("fake-bert").max_context == 510
