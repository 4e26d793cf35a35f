"""Ontology loading, validation, and equivalence-class mapping."""

import json

import pytest

from utilseq.errors import DomainError, ParseError, ValidationError
from utilseq.ontology import (
    PHI_CUSTOM,
    PHI_IDENTITY,
    PHI_SEMANTIC,
    Concept,
    EquivalenceMap,
    Ontology,
    apply_phi,
    load_ontology,
    save_ontology,
)


def write_records(path, records):
    with path.open("w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record) + "\n")


def test_single_record_file(tmp_path):
    path = tmp_path / "onto.jsonl"
    write_records(path, [{"id": "C1", "canonical": ["warfarin"], "semantic_type": "MEDICATION"}])
    onto = load_ontology(path)
    assert len(onto) == 1
    assert onto.semantic_types == {"MEDICATION"}
    assert onto.concepts["C1"].canonical == ("warfarin",)
    assert onto.selected == {"C1"}


def test_dangling_parent_is_named(tmp_path):
    path = tmp_path / "onto.jsonl"
    write_records(
        path,
        [
            {"id": "C1", "canonical": ["a"], "semantic_type": "T"},
            {"id": "C2", "canonical": ["b"], "semantic_type": "T", "parents": ["C9"]},
        ],
    )
    with pytest.raises(ValidationError, match="C9"):
        load_ontology(path)


def test_cycle_detected(tmp_path):
    path = tmp_path / "onto.jsonl"
    write_records(
        path,
        [
            {"id": "C1", "canonical": ["a"], "semantic_type": "T", "parents": ["C2"]},
            {"id": "C2", "canonical": ["b"], "semantic_type": "T", "parents": ["C1"]},
        ],
    )
    with pytest.raises(ValidationError, match="cycle"):
        load_ontology(path)


def test_duplicate_id_rejected(tmp_path):
    path = tmp_path / "onto.jsonl"
    write_records(
        path,
        [
            {"id": "C1", "canonical": ["a"], "semantic_type": "T"},
            {"id": "C1", "canonical": ["b"], "semantic_type": "T"},
        ],
    )
    with pytest.raises(ValidationError, match="duplicate"):
        load_ontology(path)


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "onto.jsonl"
    path.write_text('{"id": "C1", "canonical": ["a"]}\nnot json\n', encoding="utf-8")
    with pytest.raises(ParseError, match="2"):
        load_ontology(path)


def test_load_is_idempotent(tmp_path):
    path = tmp_path / "onto.jsonl"
    write_records(
        path,
        [
            {"id": "C2", "canonical": ["b", "c"], "semantic_type": "T2", "synonyms": [["x"]]},
            {"id": "C1", "canonical": ["a"], "semantic_type": "T1", "selected": False},
        ],
    )
    first = load_ontology(path)
    second = load_ontology(path)
    assert first == second
    assert list(first.concepts) == ["C1", "C2"]  # sorted iteration
    assert first.selected == {"C2"}


def test_save_load_round_trip(tmp_path):
    onto = Ontology(
        [
            Concept("C1", ("a",), ((("s"),),), "T1", ()),
            Concept("C2", ("b", "c"), (), "T2", ("C1",)),
        ],
        selected=["C2"],
    )
    path = tmp_path / "onto.jsonl"
    save_ontology(onto, path)
    assert load_ontology(path) == onto


class TestEquivalenceMap:
    def setup_method(self):
        self.onto = Ontology(
            [
                Concept("C1", ("a",), (), "MEDICATION", ()),
                Concept("C2", ("b",), (), "MEDICATION", ()),
                Concept("C3", ("c",), (), "FINDING", ()),
            ]
        )

    def test_identity_mode(self):
        phi = EquivalenceMap(mode=PHI_IDENTITY)
        assert apply_phi(phi, self.onto, "C1") == "C1"

    def test_semantic_mode(self):
        phi = EquivalenceMap(mode=PHI_SEMANTIC)
        assert apply_phi(phi, self.onto, "C1") == "MEDICATION"

    def test_custom_mode(self):
        phi = EquivalenceMap(mode=PHI_CUSTOM, custom_table={"C1": "G0", "C2": "G0", "C3": "G1"})
        assert apply_phi(phi, self.onto, "C1") == "G0"

    def test_outside_selected_is_domain_error(self):
        onto = Ontology(
            [Concept("C1", ("a",), (), "T", ()), Concept("C2", ("b",), (), "T", ())],
            selected=["C1"],
        )
        with pytest.raises(DomainError):
            apply_phi(EquivalenceMap(mode=PHI_IDENTITY), onto, "C2")

    def test_total_on_selected_in_every_mode(self):
        for phi in (
            EquivalenceMap(mode=PHI_IDENTITY),
            EquivalenceMap(mode=PHI_SEMANTIC),
            EquivalenceMap(mode=PHI_CUSTOM, custom_table={"C1": "x", "C2": "x", "C3": "y"}),
        ):
            labels = phi.concept_classes(self.onto)
            assert set(labels) == self.onto.selected

    def test_equal_semantic_types_share_a_class(self):
        phi = EquivalenceMap(mode=PHI_SEMANTIC)
        assert apply_phi(phi, self.onto, "C1") == apply_phi(phi, self.onto, "C2")
        assert apply_phi(phi, self.onto, "C1") != apply_phi(phi, self.onto, "C3")

    def test_custom_missing_entry_rejected(self):
        phi = EquivalenceMap(mode=PHI_CUSTOM, custom_table={"C1": "G0"})
        with pytest.raises(ValidationError):
            phi.concept_classes(self.onto)


def test_ancestors_transitive():
    onto = Ontology(
        [
            Concept("A", ("a",), (), "T", ()),
            Concept("B", ("b",), (), "T", ("A",)),
            Concept("C", ("c",), (), "T", ("B",)),
        ]
    )
    assert onto.ancestors("C") == {"A", "B"}
    assert onto.is_ancestor("A", "C")
    assert not onto.is_ancestor("C", "A")
    assert not onto.is_ancestor("A", "A")
