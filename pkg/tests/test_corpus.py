import numpy as np
import pytest

from dtmgibbs.corpus import (BAG_OF_WORDS_DIR, CorpusFormatError, LoadReport,
                             build_vocabulary, load_corpus, save_corpus,
                             split_holdout)


class TestBuildVocabulary:
    def test_frequency_order_with_stopwords(self):
        v = build_vocabulary([["a", "a", "b", "c"]], max_terms=2, stopwords={"c"})
        assert v.terms == ("a", "b")

    def test_cap_larger_than_terms(self):
        v = build_vocabulary([["x", "y"]], max_terms=5)
        assert v.size == 2

    def test_lexicographic_tie_break(self):
        v = build_vocabulary([["b", "a"]], max_terms=10)
        # oracle: exhaustive sort on (-count, term)
        expected = tuple(t for t, _ in sorted({"a": 1, "b": 1}.items(),
                                              key=lambda kv: (-kv[1], kv[0])))
        assert v.terms == expected == ("a", "b")

    def test_all_filtered_is_error(self):
        with pytest.raises(ValueError):
            build_vocabulary([["the", "of"]], max_terms=5, stopwords={"the", "of"})

    def test_bijection(self):
        v = build_vocabulary([["q", "r", "s", "q"]], max_terms=3)
        for i, t in enumerate(v.terms):
            assert v.index[t] == i
        assert len(set(v.terms)) == v.size


class TestLoadCorpus:
    def test_basic_parse(self, tiny_corpus_file):
        c = load_corpus(tiny_corpus_file)
        assert c.vocabulary.terms == ("a", "b", "c")  # freq a=2,b=2,c=1; tie a<b
        assert c.n_slices == 2
        np.testing.assert_array_equal(c.slices[0].docs[0].tokens, [0, 1, 0])
        np.testing.assert_array_equal(c.slices[1].docs[0].tokens, [1, 2])

    def test_empty_file_is_error(self, tmp_path):
        p = tmp_path / "empty.txt"
        p.write_text("", encoding="utf-8")
        with pytest.raises(CorpusFormatError, match="empty corpus"):
            load_corpus(p)

    def test_malformed_line_reports_lineno(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("1\ta b\nno-tab-here\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError, match=":2:"):
            load_corpus(p)

    def test_nonmonotone_timestamps_sorted(self, tmp_path):
        p = tmp_path / "shuffled.txt"
        p.write_text("3\tc c\n1\ta\n2\tb b b\n1\ta a\n", encoding="utf-8")
        c = load_corpus(p)
        # reference parser: group lines by key, sort keys ascending
        assert [s.slice_index for s in c.slices] == [1, 2, 3]
        assert [s.n_docs for s in c.slices] == [2, 1, 1]
        assert c.n_docs == 4

    def test_numeric_key_ordering(self, tmp_path):
        p = tmp_path / "numeric.txt"
        p.write_text("10\ta\n2\tb\n", encoding="utf-8")
        c = load_corpus(p)
        # numeric sort puts key 2 first, not lexicographic "10"
        assert c.slices[0].docs[0].tokens[0] == c.vocabulary.index["b"]

    def test_oov_dropped_and_reported(self, tiny_corpus_file):
        reports = []
        vocab = build_vocabulary([["a", "b"]], max_terms=2)
        c = load_corpus(tiny_corpus_file, vocabulary=vocab,
                        report_sink=reports.append)
        assert isinstance(reports[0], LoadReport)
        assert reports[0].docs_read == 2
        assert reports[0].tokens_dropped == 1  # the 'c'
        np.testing.assert_array_equal(c.slices[1].docs[0].tokens, [1])

    def test_bag_of_words_dir(self, tmp_path):
        d = tmp_path / "bow"
        d.mkdir()
        (d / "vocab.txt").write_text("apple\nbanana\n", encoding="utf-8")
        (d / "docs.txt").write_text("1\t0 1 0\n2\t1\n", encoding="utf-8")
        c = load_corpus(d, BAG_OF_WORDS_DIR)
        assert c.vocabulary.terms == ("apple", "banana")
        np.testing.assert_array_equal(c.slices[0].docs[0].tokens, [0, 1, 0])

    def test_bag_of_words_unknown_id_is_error(self, tmp_path):
        d = tmp_path / "bow"
        d.mkdir()
        (d / "vocab.txt").write_text("apple\n", encoding="utf-8")
        (d / "docs.txt").write_text("1\t0 3\n", encoding="utf-8")
        with pytest.raises(CorpusFormatError, match="unknown token id"):
            load_corpus(d, BAG_OF_WORDS_DIR)

    def test_round_trip(self, tmp_path):
        p = tmp_path / "orig.txt"
        p.write_text("2\tb c b\n1\ta a b\n1\tc\n", encoding="utf-8")
        c1 = load_corpus(p)
        out = tmp_path / "saved.txt"
        save_corpus(c1, out)
        c2 = load_corpus(out)
        assert c1 == c2


class TestSplitHoldout:
    def _corpus(self, tmp_path, lengths=(10, 10, 10, 10, 10), n_slices=2):
        lines = []
        for t in range(1, n_slices + 1):
            for j, n in enumerate(lengths):
                toks = " ".join(f"w{(j + i) % 7}" for i in range(n))
                lines.append(f"{t}\t{toks}")
        p = tmp_path / "c.txt"
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return load_corpus(p)

    def test_deterministic(self, tmp_path):
        c = self._corpus(tmp_path)
        s1 = split_holdout(c, 0.4, 0.5, seed=9)
        s2 = split_holdout(c, 0.4, 0.5, seed=9)
        assert s1.train == s2.train
        for a, b in zip(s1.test, s2.test):
            np.testing.assert_array_equal(a.observed, b.observed)
            np.testing.assert_array_equal(a.heldout, b.heldout)

    def test_even_split_counts(self, tmp_path):
        c = self._corpus(tmp_path, lengths=(10,))
        s = split_holdout(c, 0.9, 0.5, seed=0)
        for td in s.test:
            assert td.observed.size == 5 and td.heldout.size == 5

    def test_token_multiset_conserved(self, tmp_path):
        c = self._corpus(tmp_path, lengths=(9, 13, 4))
        s = split_holdout(c, 0.9, 0.3, seed=3)
        originals = {d.doc_id: d.tokens for sl in c.slices for d in sl.docs}
        for td in s.test:
            merged = np.sort(np.concatenate([td.observed, td.heldout]))
            np.testing.assert_array_equal(merged, np.sort(originals[td.doc_id]))

    def test_train_test_disjoint(self, tmp_path):
        c = self._corpus(tmp_path, lengths=(5, 5, 5, 5))
        s = split_holdout(c, 0.5, 0.5, seed=1)
        test_ids = {td.doc_id for td in s.test}
        train_ids = {d.doc_id for sl in s.train.slices for d in sl.docs}
        assert not (test_ids & train_ids)
        assert len(test_ids) + len(train_ids) == c.n_docs

    def test_per_doc_fraction_within_one_token(self, tmp_path):
        c = self._corpus(tmp_path, lengths=(7, 11, 23, 5))
        frac = 0.35
        s = split_holdout(c, 0.9, frac, seed=2)
        for td in s.test:
            n = td.observed.size + td.heldout.size
            assert abs(td.heldout.size - frac * n) <= 1.0

    def test_mean_heldout_fraction(self, tmp_path):
        # Monte Carlo over seeds with mixed doc lengths
        c = self._corpus(tmp_path, lengths=tuple(range(3, 41, 2)), n_slices=1)
        fracs = []
        for seed in range(1000):
            s = split_holdout(c, 0.9, 0.5, seed=seed)
            for td in s.test:
                n = td.observed.size + td.heldout.size
                fracs.append(td.heldout.size / n)
        assert abs(np.mean(fracs) - 0.5) < 0.02

    def test_single_token_doc_fully_observed(self, tmp_path):
        p = tmp_path / "one.txt"
        p.write_text("1\tw0\n1\tw1 w2\n", encoding="utf-8")
        c = load_corpus(p)
        s = split_holdout(c, 0.99, 0.5, seed=0)
        assert s.unsplittable_docs == 1
        tiny = [td for td in s.test if td.observed.size + td.heldout.size == 1]
        assert tiny and all(td.heldout.size == 0 for td in tiny)

    def test_fraction_validation(self, tmp_path):
        c = self._corpus(tmp_path)
        with pytest.raises(ValueError):
            split_holdout(c, 0.0, 0.5, seed=0)
        with pytest.raises(ValueError):
            split_holdout(c, 0.5, 1.0, seed=0)
