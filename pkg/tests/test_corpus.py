import json

import pytest

from sslm import corpus as cp


def rec(i, abstract, categories=(), title="t"):
    return cp.BibliographicRecord(record_id=f"r{i}", title=title, abstract=abstract,
                                  categories=list(categories))


class TestCleanRecords:
    def test_exact_duplicate_first_survives(self):
        records = [rec(1, "Same text."), rec(2, "Same text.")]
        out = cp.clean_records(records)
        assert len(out) == 1 and out[0].record_id == "r1"

    def test_missing_abstract_dropped(self):
        assert cp.clean_records([rec(1, "")]) == []
        assert cp.clean_records([rec(1, None)]) == []

    def test_five_records_three_survivors(self):
        records = [
            rec(1, "First abstract."),
            rec(2, "Second abstract."),
            rec(3, "First abstract."),   # duplicate of r1
            rec(4, None),                # missing
            rec(5, "Third abstract."),
        ]
        out = cp.clean_records(records)
        assert [r.record_id for r in out] == ["r1", "r2", "r5"]

    def test_normalized_dedup_key(self):
        # same content modulo case and whitespace is a duplicate
        records = [rec(1, "A  Study of things"), rec(2, "a study  of THINGS")]
        assert len(cp.clean_records(records)) == 1

    def test_control_chars_and_blank_lines_removed(self):
        out = cp.clean_records([rec(1, "line one\n\n\nline two\x00\x07")])
        assert out[0].abstract == "line one line two"

    def test_idempotent(self):
        records = [rec(1, "One.\n\nTwo."), rec(2, "Other text"), rec(3, "one. two.")]
        once = cp.clean_records(records)
        twice = cp.clean_records(once)
        assert once == twice

    def test_order_preserved(self):
        records = [rec(i, f"abstract {i}") for i in range(10)]
        out = cp.clean_records(records)
        assert [r.record_id for r in out] == [f"r{i}" for i in range(10)]


class TestComputeStats:
    def test_hand_count(self):
        stats = cp.compute_stats(["a b c", "a b"])
        assert stats.n_documents == 2
        assert stats.total_words == 5
        assert stats.unique_words == 3
        assert stats.avg_words_per_document == pytest.approx(2.5, abs=1e-9)

    def test_empty(self):
        stats = cp.compute_stats([])
        assert stats.n_documents == 0 and stats.total_words == 0
        assert stats.avg_words_per_document == 0

    def test_bucket_for_170_words(self):
        stats = cp.compute_stats([" ".join(["w"] * 170)])
        assert stats.avg_words_per_document == 170
        assert stats.length_histogram == {"[150,200)": 1}

    def test_top_bucket(self):
        stats = cp.compute_stats([" ".join(["w"] * 700)])
        assert stats.length_histogram == {"[500,inf)": 1}

    def test_histogram_sums_to_documents(self):
        lines = [" ".join(["w"] * n) for n in (3, 49, 50, 170, 550, 551)]
        stats = cp.compute_stats(lines)
        assert sum(stats.length_histogram.values()) == stats.n_documents

    def test_identity(self):
        lines = ["a b", "c d e", "f"]
        stats = cp.compute_stats(lines)
        assert stats.avg_words_per_document * stats.n_documents == pytest.approx(stats.total_words, abs=1e-9)

    def test_case_sensitive_uniques(self):
        stats = cp.compute_stats(["Word word WORD"])
        assert stats.unique_words == 3

    def test_json_report(self):
        payload = json.loads(cp.compute_stats(["a b"]).to_json())
        assert set(payload) == {"n_documents", "total_words", "unique_words",
                                "avg_words_per_document", "length_histogram"}


class TestCategoryDistribution:
    def test_multi_category_one_count_each(self):
        out = cp.category_distribution([rec(1, "x", ["Economics", "History"])])
        assert out == [("Economics", 1, 50.0), ("History", 1, 50.0)]

    def test_empty(self):
        assert cp.category_distribution([]) == []

    def test_hand_enumeration(self):
        records = [rec(1, "a", ["x"]), rec(2, "b", ["x", "y"]), rec(3, "c", ["y"])]
        out = cp.category_distribution(records)
        assert out == [("x", 2, 50.0), ("y", 2, 50.0)]

    def test_percentages_sum_to_100(self):
        records = [rec(i, "a", [f"c{i % 3}", f"c{(i + 1) % 5}"]) for i in range(17)]
        out = cp.category_distribution(records)
        assert sum(p for _, _, p in out) == pytest.approx(100.0, abs=1e-9)

    def test_sorted_descending(self):
        records = [rec(1, "a", ["big", "small"]), rec(2, "b", ["big"])]
        out = cp.category_distribution(records)
        assert [c for c, _, _ in out] == ["big", "small"]


class TestSplitCorpus:
    def test_99_to_1(self):
        lines = [f"line {i}" for i in range(1000)]
        train, test = cp.split_corpus(lines, cp.SplitSpec(99, 1, seed=0))
        assert len(train) == 990 and len(test) == 10

    def test_9_to_1(self):
        lines = [f"line {i}" for i in range(10)]
        train, test = cp.split_corpus(lines, cp.SplitSpec(9, 1, seed=3))
        assert len(train) == 9 and len(test) == 1

    def test_deterministic(self):
        lines = [f"line {i}" for i in range(100)]
        a = cp.split_corpus(lines, cp.SplitSpec(4, 1, seed=7))
        b = cp.split_corpus(lines, cp.SplitSpec(4, 1, seed=7))
        assert a == b

    def test_partition(self):
        lines = [f"line {i}" for i in range(123)]
        train, test = cp.split_corpus(lines, cp.SplitSpec(3, 1, seed=5))
        assert len(train) + len(test) == len(lines)
        assert not set(train) & set(test)
        assert sorted(train + test) == sorted(lines)

    def test_empty_corpus(self):
        with pytest.raises(cp.CorpusError):
            cp.split_corpus([], cp.SplitSpec(99, 1))

    def test_bad_weights(self):
        with pytest.raises(cp.CorpusError):
            cp.SplitSpec(0, 0)


class TestFileIO:
    def test_records_roundtrip(self, tmp_path):
        path = tmp_path / "records.tsv"
        path.write_text(
            "record_id\ttitle\tabstract\tissn\tyear\tcategories\n"
            "r1\tTitle one\tAbstract body\t1234-5678\t2019\tEconomics;History\n"
            "r2\tTitle two\t\t\t\t\n",
            encoding="utf-8",
        )
        records = cp.read_records_tsv(path)
        assert records[0].categories == ["Economics", "History"]
        assert records[0].year == 2019
        assert records[1].abstract is None

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("record_id\ttitle\nr1\tx\n", encoding="utf-8")
        with pytest.raises(cp.CorpusError):
            cp.read_records_tsv(path)

    def test_corpus_roundtrip(self, tmp_path):
        path = tmp_path / "corpus.txt"
        cp.write_corpus(["one line", "", "another line"], path)
        raw = path.read_bytes()
        assert raw == b"one line\nanother line\n"
        assert cp.read_corpus(path) == ["one line", "another line"]
