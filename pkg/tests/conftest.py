import threading
from pathlib import Path
from typing import List, Sequence

import pytest

from evidencemap.backends import WordVocab
from evidencemap.core_types import EvidenceItem, EvidenceMapRecord, EvidenceSource
from evidencemap.generation import render_text
from evidencemap.pipeline import ModelConfig, build_stack
from evidencemap.remote import CompletionClient
from evidencemap.training import TrainConfig, train

FIXTURES = Path(__file__).resolve().parent / "fixtures"


def paper(item_id: str, text: str) -> EvidenceItem:
    return EvidenceItem(id=item_id, source=EvidenceSource.PAPER, text=text)


def llm(text: str) -> EvidenceItem:
    return EvidenceItem(id="llm", source=EvidenceSource.LLM, text=text)


class ScriptedClient(CompletionClient):
    """Returns queued replies in order (the last one repeats) and records every request."""

    model_name = "scripted"

    def __init__(self, replies: Sequence[str]):
        self.replies: List[str] = list(replies)
        self.requests: List[tuple] = []
        self._lock = threading.Lock()

    def complete(self, system_text: str, user_text: str) -> str:
        with self._lock:
            self.requests.append((system_text, user_text))
            if len(self.replies) > 1:
                return self.replies.pop(0)
            return self.replies[0]


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def sample_records() -> List[EvidenceMapRecord]:
    return [
        EvidenceMapRecord(
            id="q1",
            question="Is aspirin effective for pain relief",
            evidence=(
                llm("aspirin reduces pain"),
                paper("p1", "aspirin blocks prostaglandin synthesis"),
                paper("p2", "trials show aspirin relieves headache pain"),
            ),
            reference_answer="yes aspirin relieves pain",
            dataset_id="unit",
        ),
        EvidenceMapRecord(
            id="q2",
            question="Does vitamin c prevent colds",
            evidence=(
                paper("p1", "vitamin c does not prevent colds in most people"),
                paper("p2", "vitamin c may shorten colds"),
            ),
            reference_answer="no vitamin c does not prevent colds",
            dataset_id="unit",
        ),
        EvidenceMapRecord(
            id="q3",
            question="Is exercise good for the heart",
            evidence=(paper("p1", "exercise strengthens the heart muscle"),),
            reference_answer="yes exercise is good for the heart",
            dataset_id="unit",
        ),
    ]


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        seed=0,
        encoder_dim=8,
        encoder_max_context=256,
        decoder_dim=16,
        decoder_key_dim=4,
        vocab_size=96,
        decoder_layers=1,
        decoder_heads=2,
        summarizer_hidden=16,
        projector_hidden=16,
        max_slots=4,
    )


@pytest.fixture
def tiny_vocab(sample_records) -> WordVocab:
    texts = [render_text(r) + "\n" + r.reference_answer for r in sample_records]
    return WordVocab.build(texts, 96)


@pytest.fixture
def tiny_stack(tiny_config, tiny_vocab):
    return build_stack(tiny_config, vocab=tiny_vocab, max_new_tokens=6)


# -------------------- Memorization corpus --------------------
# (drug, verb, target, outcome, answer); five patient groups per drug give 50 records
DRUG_FACTS = [
    ("aspirin", "inhibits", "platelets", "fewer clots", "prevents blood clots"),
    ("metformin", "lowers", "glucose", "better control", "lowers blood sugar"),
    ("atorvastatin", "reduces", "cholesterol", "fewer infarcts", "lowers cholesterol"),
    ("amoxicillin", "kills", "bacteria", "faster recovery", "treats bacterial infection"),
    ("ibuprofen", "blocks", "prostaglandins", "less swelling", "relieves inflammation"),
    ("warfarin", "antagonizes", "vitamin", "longer clotting", "thins the blood"),
    ("omeprazole", "suppresses", "acid", "healed ulcers", "reduces stomach acid"),
    ("salbutamol", "relaxes", "airways", "easier breathing", "opens the airways"),
    ("lisinopril", "inhibits", "angiotensin", "lower pressure", "lowers blood pressure"),
    ("sertraline", "raises", "serotonin", "improved mood", "treats depression"),
]
PATIENT_GROUPS = ["elderly", "pediatric", "diabetic", "obese", "pregnant"]


def memorization_records() -> List[EvidenceMapRecord]:
    """Fifty three-snippet records; every drug has one short answer shared by its five patient groups."""
    records = []
    for drug, verb, target, outcome, answer in DRUG_FACTS:
        for group in PATIENT_GROUPS:
            records.append(EvidenceMapRecord(
                id=f"{drug}-{group}",
                question=f"what does {drug} do ?",
                evidence=(
                    paper("p1", f"{drug} {verb} {target} in {group} patients"),
                    paper("p2", f"{group} cohorts taking {drug} showed {outcome}"),
                    paper("p3", f"{drug} trials in {group} adults report {outcome}"),
                ),
                reference_answer=answer,
                dataset_id="memorize",
            ))
    return records


def memorization_vocab(records: Sequence[EvidenceMapRecord]) -> WordVocab:
    return WordVocab.build([render_text(r) + "\n" + r.reference_answer for r in records], 128)


@pytest.fixture(scope="session")
def memorized(tmp_path_factory):
    """The default mock stack trained with default settings on the memorization corpus."""
    records = memorization_records()
    vocab = memorization_vocab(records)
    stack = build_stack(ModelConfig(vocab_size=128), vocab=vocab, max_new_tokens=8)
    report = train(records, stack, TrainConfig(checkpoint_dir=tmp_path_factory.mktemp("memorized")))
    return records, stack, report
