from __future__ import annotations

import random

import pytest

from conftest import FLIGHTS_CONTEXT, FLIGHTS_QUESTION
from qurg.rewrite_diff import MatchPolicy
from qurg.schema_link import (
    LINK_RELATION_MIRROR,
    Column,
    LinkRelation,
    Schema,
    SchemaError,
    build_schema_link_matrix,
    link_stats,
)


class TestSchemaValidation:
    def test_out_of_range_table(self):
        with pytest.raises(SchemaError):
            Schema((("t",),), (Column(("c",), 3),))

    def test_dangling_foreign_key(self):
        with pytest.raises(SchemaError):
            Schema((("t",),), (Column(("c",), 0),), foreign_keys=frozenset({(0, 9)}))

    def test_empty_table_name(self):
        with pytest.raises(SchemaError):
            Schema(((),), ())

    def test_unknown_column_type(self):
        with pytest.raises(SchemaError):
            Schema((("t",),), (Column(("c",), 0, "blob"),))

    def test_no_foreign_keys_is_valid(self):
        schema = Schema((("t",),), (Column(("c",), 0),))
        assert schema.foreign_keys == frozenset()


class TestMatching:
    def test_single_word_exact_column_mirrored(self):
        schema = Schema((("people",),), (Column(("name",), 0),))
        matrix = build_schema_link_matrix(("the", "name"), (), schema)
        col = matrix.column_position(0)
        assert matrix.relation_at(1, col) is LinkRelation.EXACT_COLUMN
        assert matrix.relation_at(col, 1) is LinkRelation.EXACT_COLUMN_REV

    def test_bigram_exact_beats_partial(self):
        schema = Schema((("flights",),), (Column(("flight", "number"), 0),))
        matrix = build_schema_link_matrix(("flight", "number"), (), schema)
        col = matrix.column_position(0)
        assert matrix.relation_at(0, col) is LinkRelation.EXACT_COLUMN
        assert matrix.relation_at(1, col) is LinkRelation.EXACT_COLUMN
        partials = [
            rel for rel in matrix.cells.values() if rel is LinkRelation.PARTIAL_COLUMN
        ]
        assert partials == []

    def test_partial_on_multiword_name_only(self):
        schema = Schema(
            (("people",),),
            (Column(("person", "name"), 0), Column(("age",), 0)),
        )
        matrix = build_schema_link_matrix(("name", "of", "ages"), (), schema)
        assert matrix.relation_at(0, matrix.column_position(0)) is LinkRelation.PARTIAL_COLUMN
        # "ages" matches single-word column "age" exactly under the plural policy,
        # never partially.
        assert matrix.relation_at(2, matrix.column_position(1)) is LinkRelation.EXACT_COLUMN

    def test_longest_ngram_consumes_tokens(self):
        # Columns: ["flight number"] and ["number"]; the bigram wins and the
        # shorter exact match for "number" is suppressed by consumption.
        schema = Schema(
            (("t",),),
            (Column(("flight", "number"), 0), Column(("number",), 0)),
        )
        matrix = build_schema_link_matrix(("flight", "number"), (), schema)
        assert matrix.relation_at(1, matrix.column_position(1)) is None
        assert matrix.relation_at(1, matrix.column_position(0)) is LinkRelation.EXACT_COLUMN

    def test_earlier_element_wins_tie(self):
        schema = Schema(
            (("t",),),
            (Column(("name",), 0), Column(("name",), 0)),
        )
        matrix = build_schema_link_matrix(("name",), (), schema)
        assert matrix.relation_at(0, matrix.column_position(0)) is LinkRelation.EXACT_COLUMN
        assert matrix.relation_at(0, matrix.column_position(1)) is None

    def test_ngram_does_not_span_question_context_boundary(self):
        schema = Schema((("t",),), (Column(("flight", "number"), 0),))
        # "flight" ends the question, "number" starts the context.
        matrix = build_schema_link_matrix(("flight",), ("number",), schema)
        col = matrix.column_position(0)
        assert matrix.relation_at(0, col) is LinkRelation.PARTIAL_COLUMN
        assert matrix.relation_at(1, col) is LinkRelation.PARTIAL_COLUMN


class TestStructureRelations:
    def test_belongs_and_has(self):
        schema = Schema((("t",),), (Column(("c",), 0),))
        matrix = build_schema_link_matrix((), (), schema)
        t, c = matrix.table_position(0), matrix.column_position(0)
        assert matrix.relation_at(c, t) is LinkRelation.COLUMN_BELONGS_TO_TABLE
        assert matrix.relation_at(t, c) is LinkRelation.TABLE_HAS_COLUMN

    def test_primary_key_precedence(self):
        schema = Schema(
            (("t",),), (Column(("c",), 0),), primary_keys=frozenset({0})
        )
        matrix = build_schema_link_matrix((), (), schema)
        t, c = matrix.table_position(0), matrix.column_position(0)
        assert matrix.relation_at(c, t) is LinkRelation.PRIMARY_KEY_OF
        assert matrix.relation_at(t, c) is LinkRelation.HAS_PRIMARY_KEY

    def test_foreign_key_cells(self, toy_schema):
        matrix = build_schema_link_matrix((), (), toy_schema)
        src, dst = matrix.column_position(3), matrix.column_position(0)
        assert matrix.relation_at(src, dst) is LinkRelation.FOREIGN_KEY_FORWARD
        assert matrix.relation_at(dst, src) is LinkRelation.FOREIGN_KEY_BACKWARD
        counts = link_stats(matrix)
        assert counts["Foreign-Key-Forward"] == 1
        assert counts["Foreign-Key-Backward"] == 1

    def test_same_table_columns(self):
        schema = Schema(
            (("t",),), (Column(("a",), 0), Column(("b",), 0), Column(("c",), 0))
        )
        matrix = build_schema_link_matrix((), (), schema)
        counts = link_stats(matrix)
        assert counts["Same-Table-Columns"] == 6  # 3 ordered pairs x 2

    def test_foreign_key_wins_over_same_table(self):
        schema = Schema(
            (("t",),),
            (Column(("a",), 0), Column(("b",), 0)),
            foreign_keys=frozenset({(0, 1)}),
        )
        matrix = build_schema_link_matrix((), (), schema)
        a, b = matrix.column_position(0), matrix.column_position(1)
        assert matrix.relation_at(a, b) is LinkRelation.FOREIGN_KEY_FORWARD
        assert matrix.relation_at(b, a) is LinkRelation.FOREIGN_KEY_BACKWARD
        assert "Same-Table-Columns" not in link_stats(matrix)


class TestHandEnumeratedCounts:
    def test_counts(self, toy_schema):
        matrix = build_schema_link_matrix(FLIGHTS_QUESTION, FLIGHTS_CONTEXT, toy_schema)
        # Hand enumeration over the utterance
        # "which one has the most ? / how many arriving flights are there in
        # each of the cities ?" against tables (city, flight) and columns
        # (city id | city name | flight id | origin city id | arriving flights):
        #   exact table:   "flights" -> flight, "cities" -> city
        #   exact column:  bigram "arriving flights" -> arriving flights
        #   partial column: "cities" -> city id, city name, origin city id;
        #                   "flights" -> flight id
        # plus structure: belongs (3 non-key columns), PK (2), same-table
        # (2 + 6 ordered pairs), FK (1 each way).
        assert link_stats(matrix) == {
            "Exact-Table-Match": 2,
            "Exact-Table-Match-Rev": 2,
            "Exact-Column-Match": 2,
            "Exact-Column-Match-Rev": 2,
            "Partial-Column-Match": 4,
            "Partial-Column-Match-Rev": 4,
            "Column-Belongs-To-Table": 3,
            "Table-Has-Column": 3,
            "Primary-Key-Of": 2,
            "Has-Primary-Key": 2,
            "Same-Table-Columns": 8,
            "Foreign-Key-Forward": 1,
            "Foreign-Key-Backward": 1,
        }

    def test_stats_sum_equals_cells(self, toy_schema):
        matrix = build_schema_link_matrix(FLIGHTS_QUESTION, FLIGHTS_CONTEXT, toy_schema)
        assert sum(link_stats(matrix).values()) == len(matrix.cells)

    def test_all_none(self):
        schema = Schema((("zz",),), ())
        matrix = build_schema_link_matrix(("hello",), (), schema)
        assert link_stats(matrix) == {}


class TestInvariants:
    def _random_case(self, rng: random.Random):
        words = ["city", "name", "flight", "id", "age", "country"]
        tables = tuple(
            tuple(rng.sample(words, rng.randint(1, 2))) for _ in range(rng.randint(1, 3))
        )
        columns = tuple(
            Column(tuple(rng.sample(words, rng.randint(1, 3))), rng.randrange(len(tables)))
            for _ in range(rng.randint(1, 5))
        )
        pks = frozenset(
            idx for idx in range(len(columns)) if rng.random() < 0.3
        )
        fks = frozenset(
            (a, b)
            for a in range(len(columns))
            for b in range(len(columns))
            if a != b and rng.random() < 0.1
        )
        schema = Schema(tables, columns, pks, fks)
        question = tuple(rng.choice(words + ["the", "?"]) for _ in range(rng.randint(1, 6)))
        context = tuple(rng.choice(words + ["show", "all"]) for _ in range(rng.randint(0, 8)))
        return question, context, schema

    def test_mirror_symmetry(self):
        rng = random.Random(41)
        for _ in range(60):
            question, context, schema = self._random_case(rng)
            matrix = build_schema_link_matrix(question, context, schema)
            for (i, j), rel in matrix.cells.items():
                assert matrix.cells.get((j, i)) is LINK_RELATION_MIRROR[rel]

    def test_exactness_dominance(self):
        rng = random.Random(43)
        exact_to_partial = {
            LinkRelation.EXACT_TABLE: LinkRelation.PARTIAL_TABLE,
            LinkRelation.EXACT_COLUMN: LinkRelation.PARTIAL_COLUMN,
        }
        for _ in range(60):
            question, context, schema = self._random_case(rng)
            matrix = build_schema_link_matrix(question, context, schema)
            for (i, j), rel in matrix.cells.items():
                if rel in exact_to_partial:
                    assert matrix.cells[(i, j)] is not exact_to_partial[rel]

    def test_layout_purity(self):
        rng = random.Random(47)
        for _ in range(60):
            question, context, schema = self._random_case(rng)
            matrix = build_schema_link_matrix(question, context, schema)
            utter = matrix.n_question + matrix.n_context
            match_relations = {
                LinkRelation.EXACT_TABLE, LinkRelation.PARTIAL_TABLE,
                LinkRelation.EXACT_COLUMN, LinkRelation.PARTIAL_COLUMN,
            }
            for (i, j), rel in matrix.cells.items():
                assert not (i < utter and j < utter), "utterance-internal cell"
                if i < utter:
                    assert rel in match_relations
                elif j < utter:
                    assert rel in {LINK_RELATION_MIRROR[r] for r in match_relations}
                else:
                    assert rel not in match_relations
                    assert rel not in {LINK_RELATION_MIRROR[r] for r in match_relations}

    def test_case_sensitive_policy(self):
        schema = Schema((("City",),), ())
        strict = MatchPolicy(lowercase=False)
        matrix = build_schema_link_matrix(("city",), (), schema, strict)
        assert matrix.cells == {}
