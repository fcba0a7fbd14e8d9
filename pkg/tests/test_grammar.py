import json

import numpy as np
import pytest

from kneurons.analysis import layer_stats
from kneurons.attribution import AttributionConfig, AttributionMap
from kneurons.errors import ArgumentError, LoadError
from kneurons.grammar import (
    AgreementExample,
    GrammarRecord,
    attribute_dataset,
    attribute_pair,
    common_distinct,
    convert_colorless_green,
    counts_by_stratum,
    load_agreement_dataset,
    record_counts,
    stratify_stats,
)
from kneurons.selection import NeuronSet
from kneurons.toy import PlantedNeuron, ToyModelSpec, build_toy_model

VOCAB = ["[PAD]", "[UNK]", "[MASK]", "the", "keys", "to", "cabinet", "are", "is", "on",
         "table", "key", "##s"]


@pytest.fixture
def agreement_toy():
    ids = {w: i for i, w in enumerate(VOCAB)}
    planted = [PlantedNeuron(2, 3, [ids["keys"]], ids["are"], 2.0),
               PlantedNeuron(0, 1, [ids["cabinet"]], ids["is"], 0.5)]
    return build_toy_model(ToyModelSpec(3, 6, len(VOCAB), planted, seed=4, vocab=VOCAB))


def write_rows(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def row(good="are", bad="is", n=1, **extra):
    r = {"sentence": "the keys to the cabinet are on the table", "mask_index": 5,
         "good": good, "bad": bad, "n_attractors": n}
    r.update(extra)
    return r


class TestLoad:
    def test_three_rows_one_multi_token(self, tmp_path, agreement_toy):
        # "keyss" splits into "key" + "##s" + "##s"
        path = write_rows(tmp_path / "a.jsonl", [row(), row(n=2), row(good="keyss", bad="key")])
        examples, skipped = load_agreement_dataset(path, agreement_toy)
        assert [e.n_attractors for e in examples] == [1, 2]
        assert len(skipped) == 1 and "keyss" in skipped[0].reason

    def test_mask_substitution(self, tmp_path):
        examples, _ = load_agreement_dataset(write_rows(tmp_path / "a.jsonl", [row()]))
        assert examples[0].sentence == "the keys to the cabinet [MASK] on the table"

    def test_pre_masked_sentence(self, tmp_path):
        r = row(sentence="the keys [MASK] here", mask_index=None)
        examples, _ = load_agreement_dataset(write_rows(tmp_path / "a.jsonl", [r]))
        assert examples[0].sentence == "the keys [MASK] here"

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert load_agreement_dataset(tmp_path / "e.jsonl") == ([], [])

    def test_malformed_rows(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text("{oops\n" + json.dumps(row(good="is")) + "\n"
                        + json.dumps(row(mask_index=40)) + "\n")
        examples, skipped = load_agreement_dataset(path)
        assert examples == [] and [s.line for s in skipped] == [1, 2, 3]

    def test_missing_file(self, tmp_path):
        with pytest.raises(LoadError):
            load_agreement_dataset(tmp_path / "nope.jsonl")

    def test_example_validation(self):
        with pytest.raises(ArgumentError):
            AgreementExample("a [MASK]", "x", "x", 0, "1")
        with pytest.raises(ArgumentError):
            AgreementExample("a [MASK]", "x", "y", -1, "1")


def test_convert_colorless_green(tmp_path):
    header = "pattern\tconstr_id\tsent_id\tcorrect_number\tform\tclass\ttype\tprefix\tn_attr\tpunct\tfreq\tlen_context\tlen_prefix\tsent\n"
    lines = [
        "NOUN VERB\t1\t0\tplural\tare\tcorrect\toriginal\tx\t1\tno\t1\t3\t5\tthe keys to the cabinet are on the table",
        "NOUN VERB\t1\t0\tplural\tis\twrong\toriginal\tx\t1\tno\t1\t3\t5\tthe keys to the cabinet is on the table",
        "NOUN VERB\t2\t0\tsingular\tis\tcorrect\toriginal\tx\t0\tno\t1\t3\t2\tthe key is here",
    ]
    src = tmp_path / "generated.tab"
    src.write_text(header + "\n".join(lines) + "\n")
    dst = tmp_path / "out.jsonl"
    assert convert_colorless_green(src, dst) == 1
    examples, skipped = load_agreement_dataset(dst)
    assert skipped == []
    ex = examples[0]
    assert (ex.good_form, ex.bad_form, ex.n_attractors) == ("are", "is", 1)
    assert ex.sentence == "the keys to the cabinet [MASK] on the table"


def test_convert_rejects_missing_columns(tmp_path):
    src = tmp_path / "bad.tab"
    src.write_text("sent\tform\nfoo\tbar\n")
    with pytest.raises(LoadError):
        convert_colorless_green(src, tmp_path / "o.jsonl")


def test_attribute_pair_prefers_good_form(agreement_toy):
    ex = AgreementExample("the keys to the cabinet [MASK] on the table", "are", "is", 1, "e1")
    rec = attribute_pair(agreement_toy, ex, AttributionConfig(steps=10))
    assert rec.good_map.target_id != rec.bad_map.target_id
    assert np.nanmax(rec.good_map.scores) > np.nanmax(rec.bad_map.scores)
    assert np.unravel_index(np.nanargmax(rec.good_map.scores), (3, 6)) == (2, 3)
    assert np.unravel_index(np.nanargmax(rec.bad_map.scores), (3, 6)) == (0, 1)


def test_attribute_dataset_skips_failures(agreement_toy):
    good = AgreementExample("the keys [MASK]", "are", "is", 0, "a")
    bad = AgreementExample("the keys [MASK]", "are", "iss", 0, "b")
    records = attribute_dataset(agreement_toy, [good, bad], AttributionConfig(steps=3))
    assert [r.example_id for r in records] == ["a"]


def rec(n, good, bad, eid="x"):
    return GrammarRecord(eid, n, AttributionMap(np.asarray(good, float), eid, 0),
                         AttributionMap(np.asarray(bad, float), eid, 1))


class TestStratify:
    def test_single_stratum_matches_plain_stats(self):
        records = [rec(1, [[1.0, 2.0]], [[0.5, 0.0]]), rec(1, [[3.0, 0.0]], [[0.0, 0.5]])]
        out = stratify_stats(records)
        assert list(out) == [1]
        good, bad = out[1]
        np.testing.assert_array_equal(good.mean, layer_stats([r.good_map for r in records]).mean)
        assert good.n_prompts == 2 and bad.max[0] == 0.5

    def test_two_strata_sizes(self):
        records = [rec(0, [[1.0]], [[0.0]])] * 3 + [rec(2, [[0.0]], [[1.0]])] * 2
        out = stratify_stats(records)
        assert out[0][0].n_prompts == 3 and out[2][0].n_prompts == 2
        assert out[0][0].mean[0] == 1.0 and out[2][1].mean[0] == 1.0

    def test_unknown_stratum(self):
        with pytest.raises(ArgumentError):
            stratify_stats([rec(0, [[1.0]], [[0.0]])], strata=[4])
        with pytest.raises(ArgumentError):
            stratify_stats([])


class TestCommonDistinct:
    def test_example(self):
        good = NeuronSet([(1, 0), (1, 1), (3, 2)])
        bad = NeuronSet([(1, 1), (2, 5)])
        c = common_distinct(good, bad, 4)
        assert c.common.tolist() == [0, 1, 0, 0]
        assert c.distinct.tolist() == [0, 1, 1, 1]

    def test_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            good = NeuronSet({(int(l), int(i)) for l, i in rng.integers(0, 5, size=(6, 2))})
            bad = NeuronSet({(int(l), int(i)) for l, i in rng.integers(0, 5, size=(6, 2))})
            c = common_distinct(good, bad, 5)
            assert 2 * c.common.sum() + c.distinct.sum() == len(good) + len(bad)

    def test_degenerate_map_counts_as_empty(self):
        c = record_counts(rec(0, [[1.0, 0.2]], [[-1.0, 0.0]]), 0.5)
        assert c.common.tolist() == [0] and c.distinct.tolist() == [1]

    def test_counts_by_stratum(self):
        records = [rec(0, [[1.0, 0.9]], [[1.0, 0.1]]), rec(0, [[1.0, 0.0]], [[0.0, 1.0]])]
        out = counts_by_stratum(records, 0.5)
        assert out[0]["n"] == 2
        assert out[0]["common"] == [0.5] and out[0]["distinct"] == [1.5]
