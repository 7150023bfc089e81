import math

import pytest
import torch
from torch import nn

from evidencemap.backends import FastWeightDecoder, MockSpec, TableDecoder, UniformDecoder, WordVocab
from evidencemap.core_types import AnalysisBundle, AnalysisFlags
from evidencemap.errors import ConfigError, DimensionMismatch, PreconditionError
from evidencemap.generation import (
    ProjectorMLP,
    assemble_prompt,
    embed_text,
    generate_answer,
    project_analysis,
    render_text,
    sequence_loss,
)
from evidencemap.pipeline import build_stack

VOCAB = WordVocab(["alpha", "beta", "gamma", "Evidence:", "Question:"])


@pytest.fixture
def uniform():
    return UniformDecoder(MockSpec(seed=0, dim=4, vocab_size=16), VOCAB)


def test_render_text_golden(sample_records):
    assert render_text(sample_records[1]) == (
        "Evidence: vitamin c does not prevent colds in most people\n"
        "Evidence: vitamin c may shorten colds\n"
        "Question: Does vitamin c prevent colds"
    )


def test_render_text_llm_first(sample_records):
    assert render_text(sample_records[0]).splitlines()[0] == "Evidence: aspirin reduces pain"


def test_render_text_without_text_evidence(sample_records):
    flags = AnalysisFlags(text_evidence=False)
    assert render_text(sample_records[1], flags) == "Question: Does vitamin c prevent colds"


def test_embed_text_keeps_tail(sample_records, uniform):
    full = uniform.tokenize(render_text(sample_records[1]))
    clipped = embed_text(sample_records[1], uniform, max_tokens=3)
    assert torch.equal(clipped, uniform.embed_tokens(full[-3:]))


class TestProjector:
    def test_mlp_mode_has_hidden_layer(self):
        projector = ProjectorMLP(8, 4, hidden=16)
        assert sum(isinstance(m, nn.Linear) for m in projector.layers) == 2
        assert any(isinstance(m, nn.ReLU) for m in projector.layers)

    def test_linear_mode_is_single_layer(self):
        projector = ProjectorMLP(8, 4, hidden=16, mode="linear")
        assert len(projector.layers) == 1

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            ProjectorMLP(8, 4, hidden=16, mode="conv")

    def test_shape_check(self):
        with pytest.raises(DimensionMismatch):
            ProjectorMLP(8, 4, hidden=16)(torch.zeros(2, 5, dtype=torch.float64))

    def test_empty_bundle_projects_to_no_rows(self):
        bundle = AnalysisBundle(summary=None, eval_vectors=(), cor_vectors=())
        assert project_analysis(bundle, ProjectorMLP(8, 4, hidden=16)).shape == (0, 4)


class TestAssemble:
    def test_layout_and_order(self):
        h_a = torch.ones(2, 4, dtype=torch.float64)
        h_t = torch.zeros(3, 4, dtype=torch.float64)
        assembly = assemble_prompt(h_a, h_t, ["summary", "eval"])
        assert assembly.layout == ("summary", "eval", "text", "text", "text")
        assert len(assembly) == 5
        assert torch.equal(assembly.embeddings[:2], h_a)

    def test_default_role_tag(self):
        assembly = assemble_prompt(torch.ones(1, 4), torch.zeros(1, 4))
        assert assembly.layout == ("analysis", "text")

    def test_width_mismatch(self):
        with pytest.raises(DimensionMismatch):
            assemble_prompt(torch.ones(1, 4), torch.zeros(1, 5))

    def test_role_count_mismatch(self):
        with pytest.raises(DimensionMismatch):
            assemble_prompt(torch.ones(2, 4), torch.zeros(1, 4), ["summary"])


def test_uniform_decoder_loss_is_length_times_log_vocab(uniform):
    assembly = assemble_prompt(torch.zeros(0, 4, dtype=torch.float64), uniform.embed_tokens([4, 5]))
    loss = sequence_loss(assembly, [6, 7, WordVocab.EOS], uniform)
    assert float(loss) == pytest.approx(3 * math.log(16))


def test_empty_answer_has_zero_loss(uniform):
    assembly = assemble_prompt(torch.zeros(0, 4, dtype=torch.float64), uniform.embed_tokens([4]))
    assert float(sequence_loss(assembly, [], uniform)) == 0.0


def test_loss_needs_prompt(uniform):
    assembly = assemble_prompt(torch.zeros(0, 4, dtype=torch.float64), torch.zeros(0, 4, dtype=torch.float64))
    with pytest.raises(PreconditionError):
        sequence_loss(assembly, [4], uniform)


def test_table_decoder_loss_prefers_table_token():
    decoder = TableDecoder(MockSpec(seed=0, dim=4, vocab_size=16), default_id=5, vocab=VOCAB)
    assembly = assemble_prompt(torch.zeros(0, 4, dtype=torch.float64), decoder.embed_tokens([4]))
    assert float(sequence_loss(assembly, [5], decoder)) < float(sequence_loss(assembly, [6], decoder))


def test_generate_answer_strips_control_tokens():
    decoder = TableDecoder(MockSpec(seed=0, dim=4, vocab_size=16), default_id=5, table={3: WordVocab.EOS},
                           vocab=VOCAB)
    assembly = assemble_prompt(torch.zeros(0, 4, dtype=torch.float64), decoder.embed_tokens([4, 4]))
    output = generate_answer(assembly, decoder, max_new_tokens=10, record_id="q1")
    assert output.generated_answer == "beta beta"
    assert output.token_count == 2
    assert output.record_id == "q1"


def test_generate_answer_empty_prompt(uniform):
    assembly = assemble_prompt(torch.zeros(0, 4, dtype=torch.float64), torch.zeros(0, 4, dtype=torch.float64))
    with pytest.raises(PreconditionError):
        generate_answer(assembly, uniform, max_new_tokens=2)


def test_sequence_loss_matches_incremental_teacher_forcing():
    decoder = FastWeightDecoder(MockSpec(seed=2, dim=16, vocab_size=12), VOCAB, key_dim=4)
    rng = torch.Generator().manual_seed(0)
    for _ in range(50):
        n_analysis, n_text, n_answer = (int(v) for v in torch.randint(0, 4, (3,), generator=rng))
        h_a = torch.randn(n_analysis, 16, generator=rng, dtype=torch.float64)
        text_ids = torch.randint(0, 12, (n_text + 1,), generator=rng).tolist()
        answer = torch.randint(0, 12, (n_answer,), generator=rng).tolist()
        assembly = assemble_prompt(h_a, decoder.embed_tokens(text_ids))

        expected = 0.0
        context = assembly.embeddings
        for token in answer:
            expected -= float(torch.log_softmax(decoder.forward_logits(context)[-1], dim=-1)[token])
            context = torch.cat([context, decoder.embed_tokens([token])])
        assert float(sequence_loss(assembly, answer, decoder)) == pytest.approx(expected, abs=1e-5)


def test_text_only_assembly_is_the_rendered_text(sample_records, tiny_config, tiny_vocab):
    stack = build_stack(tiny_config, AnalysisFlags(analysis=False), tiny_vocab)
    record = sample_records[0]
    assembly = stack.assemble(record)
    assert set(assembly.layout) == {"text"}
    assert torch.equal(assembly.embeddings, embed_text(record, stack.decoder, stack.flags))
