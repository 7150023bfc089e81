import pytest
import torch
from conftest import llm, paper

from evidencemap.analysis import (
    SUPPORT_TEMPLATE,
    PromptTemplates,
    SummarizerMLP,
    build_analysis,
    encode_correlation,
    encode_evidence,
    encode_support,
    pool_hidden,
    render,
    summarize,
    template_segments,
)
from evidencemap.backends import MockEncoder, MockSpec
from evidencemap.core_types import AnalysisFlags, EvidenceMapRecord
from evidencemap.errors import ConfigError, DimensionMismatch, IndexOutOfRange, PreconditionError


@pytest.fixture
def encoder():
    return MockEncoder(MockSpec(seed=0, dim=8), max_context=256)


@pytest.fixture
def mlp():
    return SummarizerMLP(dim=8, slots=4, hidden=16)


class TestTemplates:
    def test_substituted_text_is_not_rescanned(self):
        text = PromptTemplates().render_support("see {question}", "real")
        assert text.startswith("Evidence: see {question}\nQuestion: real")

    def test_segments(self):
        segments = template_segments(SUPPORT_TEMPLATE, evidence="E", question="Q")
        assert segments == [("Evidence: ", False), ("E", True), ("\nQuestion: ", False), ("Q", False),
                            ("\nHow much the evidence supports the question:", False)]
        assert "".join(text for text, _ in segments) == render(SUPPORT_TEMPLATE, evidence="E", question="Q")
        assert render("{evidence}!", evidence="x") == "x!"

    def test_template_must_end_with_cue(self):
        with pytest.raises(ConfigError, match="must end with"):
            PromptTemplates(individual="Evidence: {evidence}\nMeaning:")

    def test_template_must_keep_placeholders(self):
        with pytest.raises(ConfigError, match="missing question"):
            PromptTemplates(support="Evidence: {evidence}\nHow much the evidence supports the question:")

    def test_from_file(self, tmp_path):
        path = tmp_path / "templates.toml"
        path.write_text('individual = "Fact: {evidence}\\nThis evidence means: "\n', encoding="utf-8")
        templates = PromptTemplates.from_file(path)
        assert templates.render_individual("x") == "Fact: x\nThis evidence means: "

    def test_from_file_unknown_key(self, tmp_path):
        path = tmp_path / "templates.toml"
        path.write_text('other = "x"\n', encoding="utf-8")
        with pytest.raises(ConfigError):
            PromptTemplates.from_file(path)


class TestSummarizer:
    def test_layout_pads_and_masks(self, mlp):
        x, mask = mlp.layout([torch.ones(8, dtype=torch.float64)] * 2)
        assert x.shape == (32,)
        assert mask.tolist() == [True, True, False, False]
        assert torch.count_nonzero(x[16:]) == 0

    def test_too_many_features(self, mlp):
        with pytest.raises(DimensionMismatch):
            mlp.layout([torch.ones(8, dtype=torch.float64)] * 5)

    def test_wrong_feature_width(self, mlp):
        with pytest.raises(DimensionMismatch):
            mlp.layout([torch.ones(3, dtype=torch.float64)])

    def test_summary_is_non_negative(self, mlp):
        summary = summarize([torch.randn(8, dtype=torch.float64) for _ in range(3)], mlp)
        assert summary.shape == (8,)
        assert bool((summary >= 0).all())


    def test_zero_weights_give_zero_summary(self, mlp):
        with torch.no_grad():
            for layer in mlp.layers:
                layer.weight.zero_()
                layer.bias.zero_()
        summary = summarize([torch.randn(8, dtype=torch.float64) for _ in range(3)], mlp)
        assert torch.count_nonzero(summary) == 0

    def test_identity_layer_passes_positive_part(self):
        mlp = SummarizerMLP(dim=8, slots=1, hidden=16, n_layers=1)
        with torch.no_grad():
            mlp.layers[0].weight.copy_(torch.eye(8, dtype=torch.float64))
            mlp.layers[0].bias.zero_()
        feature = torch.linspace(-1, 1, 8, dtype=torch.float64)
        assert torch.equal(summarize([feature], mlp), torch.relu(feature))

    def test_matches_matmul_oracle(self, mlp):
        features = [torch.randn(8, dtype=torch.float64) for _ in range(3)]
        x = torch.cat(features + [torch.zeros(8, dtype=torch.float64)])
        first, second = mlp.layers
        hidden = torch.relu(first.weight @ x + first.bias)
        expected = torch.relu(second.weight @ hidden + second.bias)
        assert torch.allclose(summarize(features, mlp), expected, atol=1e-12)

    def test_empty_slots_do_not_contribute(self, mlp):
        features = [torch.randn(8, dtype=torch.float64) for _ in range(2)]
        before = summarize(features, mlp)
        with torch.no_grad():
            mlp.layers[0].weight[:, 16:] = 100.0
        assert torch.equal(summarize(features, mlp), before)

def test_pool_hidden_bounds():
    states = torch.zeros(3, 2)
    assert pool_hidden(states, 2).shape == (2,)
    with pytest.raises(IndexOutOfRange):
        pool_hidden(states, 3)


def test_encoders_return_cue_state(encoder):
    templates = PromptTemplates()
    item = paper("p1", "aspirin relieves pain")
    assert encode_evidence(item, encoder, templates).shape == (8,)
    assert encode_correlation(item, paper("p2", "other"), encoder, templates).shape == (8,)
    expected = encoder.encode(templates.render_support(item.text, "why")).states[-1]
    assert torch.equal(encode_support(item, "why", encoder, templates), expected)


def test_support_needs_question(encoder):
    with pytest.raises(PreconditionError):
        encode_support(paper("p1", "x"), "  ", encoder, PromptTemplates())


def test_correlation_is_order_sensitive(encoder):
    a, b = paper("p1", "first fact"), paper("p2", "second fact")
    templates = PromptTemplates()
    assert not torch.equal(encode_correlation(a, b, encoder, templates), encode_correlation(b, a, encoder, templates))



def test_vectors_follow_their_inputs(encoder):
    templates = PromptTemplates()
    item = paper("p1", "aspirin relieves pain")
    assert not torch.equal(encode_support(item, "is aspirin useful", encoder, templates),
                           encode_support(item, "does metformin harm", encoder, templates))
    assert not torch.equal(encode_evidence(item, encoder, templates),
                           encode_evidence(paper("p1", "metformin lowers glucose"), encoder, templates))


class TestLongEvidence:
    LONG = " ".join(f"word{i}" for i in range(600))

    @pytest.fixture
    def short_encoder(self):
        return MockEncoder(MockSpec(seed=0, dim=8), max_context=64)

    def test_question_survives_truncation(self, short_encoder):
        templates = PromptTemplates()
        item = paper("p1", self.LONG)
        assert not torch.equal(encode_support(item, "is aspirin effective", short_encoder, templates),
                               encode_support(item, "does metformin cause harm", short_encoder, templates))

    def test_second_evidence_survives_truncation(self, short_encoder):
        templates = PromptTemplates()
        first = paper("p1", self.LONG)
        assert not torch.equal(
            encode_correlation(first, paper("p2", "first other snippet"), short_encoder, templates),
            encode_correlation(first, paper("p2", "totally different"), short_encoder, templates))

    def test_both_evidence_items_get_a_share(self, short_encoder):
        segments = template_segments(PromptTemplates().correlation, evidence1=self.LONG, evidence2=self.LONG)
        encoded = short_encoder.encode_segments(segments)
        assert encoded.truncated
        assert len(encoded.token_ids) == 64
        tok = short_encoder.tokenize
        head = self.LONG.split()
        expected = (tok("Evidence1:") + tok(" ".join(head[:26])) + tok("Evidence2:") + tok(" ".join(head[:27]))
                    + tok("The logical relationship between these two pieces of evidence:"))
        assert encoded.token_ids == expected


class TestBuildAnalysis:
    def test_counts_for_three_nodes(self, sample_records, encoder, mlp):
        bundle = build_analysis(sample_records[0], encoder, PromptTemplates(), mlp)
        assert bundle.summary.shape == (8,)
        assert [node for node, _ in bundle.eval_vectors] == ["llm", "p1", "p2"]
        assert [pair for pair, _ in bundle.cor_vectors] == [("llm", "p1"), ("llm", "p2"), ("p1", "p2")]
        assert len(bundle) == 1 + 3 + 3

    def test_single_node_has_no_correlations(self, sample_records, encoder, mlp):
        bundle = build_analysis(sample_records[2], encoder, PromptTemplates(), mlp)
        assert bundle.cor_vectors == ()
        assert len(bundle.eval_vectors) == 1

    def test_disabled_parts_are_empty(self, sample_records, encoder, mlp):
        flags = AnalysisFlags(cor=False, sum=False)
        bundle = build_analysis(sample_records[0], encoder, PromptTemplates(), mlp, flags)
        assert bundle.summary is None
        assert bundle.cor_vectors == ()
        assert len(bundle.eval_vectors) == 3

    def test_analysis_off_disables_everything(self, sample_records, encoder, mlp):
        bundle = build_analysis(sample_records[0], encoder, PromptTemplates(), mlp, AnalysisFlags(analysis=False))
        assert len(bundle) == 0
        assert bundle.flags == AnalysisFlags(analysis=False).effective()
        assert bundle.flags.sum is False

    def test_nodes_are_visited_llm_first(self, encoder, mlp):
        record = EvidenceMapRecord(id="o", question="why",
                                   evidence=(paper("p1", "first fact"), llm("key point"), paper("p2", "second fact")))
        bundle = build_analysis(record, encoder, PromptTemplates(), mlp)
        assert [node for node, _ in bundle.eval_vectors] == ["llm", "p1", "p2"]
        assert [pair for pair, _ in bundle.cor_vectors] == [("llm", "p1"), ("llm", "p2"), ("p1", "p2")]

    def test_summary_flag_leaves_other_vectors_alone(self, sample_records, encoder, mlp):
        full = build_analysis(sample_records[0], encoder, PromptTemplates(), mlp)
        no_sum = build_analysis(sample_records[0], encoder, PromptTemplates(), mlp, AnalysisFlags(sum=False))
        assert no_sum.summary is None
        for (_, a), (_, b) in zip(full.eval_vectors + full.cor_vectors, no_sum.eval_vectors + no_sum.cor_vectors):
            assert torch.equal(a, b)

    def test_no_evidence(self, encoder, mlp):
        record = EvidenceMapRecord(id="e", question="anything", evidence=())
        bundle = build_analysis(record, encoder, PromptTemplates(), mlp)
        assert bundle.eval_vectors == ()
        assert bundle.cor_vectors == ()
        assert bundle.summary.shape == (8,)


class TestPromptGoldens:
    EVIDENCE = "Aspirin irreversibly inhibits COX-1."
    OTHER = "COX-1 produces thromboxane A2 in platelets."
    QUESTION = "Does aspirin reduce platelet aggregation?"

    def test_individual(self, fixtures_dir):
        expected = (fixtures_dir / "prompts" / "individual.txt").read_text(encoding="utf-8")
        assert PromptTemplates().render_individual(self.EVIDENCE) == expected

    def test_support(self, fixtures_dir):
        expected = (fixtures_dir / "prompts" / "support.txt").read_text(encoding="utf-8")
        assert PromptTemplates().render_support(self.EVIDENCE, self.QUESTION) == expected

    def test_correlation(self, fixtures_dir):
        expected = (fixtures_dir / "prompts" / "correlation.txt").read_text(encoding="utf-8")
        assert PromptTemplates().render_correlation(self.EVIDENCE, self.OTHER) == expected


@pytest.mark.parametrize("m", range(1, 7))
def test_row_count_law(m, encoder):
    record = EvidenceMapRecord(id="c", question="why?",
                               evidence=tuple(paper(f"p{i}", f"fact number {i}") for i in range(m)))
    mlp = SummarizerMLP(dim=8, slots=6, hidden=16)
    pairs = m * (m - 1) // 2
    assert len(build_analysis(record, encoder, PromptTemplates(), mlp)) == 1 + m + pairs
    assert len(build_analysis(record, encoder, PromptTemplates(), mlp, AnalysisFlags(eval=False))) == 1 + pairs
    assert len(build_analysis(record, encoder, PromptTemplates(), mlp, AnalysisFlags(cor=False))) == 1 + m
    assert len(build_analysis(record, encoder, PromptTemplates(), mlp, AnalysisFlags(sum=False))) == m + pairs
