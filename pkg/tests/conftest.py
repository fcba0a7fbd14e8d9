import numpy as np
import pytest
import torch

from kneurons.toy import ToyModel

TINY_VOCAB = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "the", "capital", "of",
              "france", "is", "paris", "berlin", "cat", "##s", ",", "."]


@pytest.fixture(scope="session")
def tiny_bert_dir(tmp_path_factory):
    """A randomly initialised 2-layer BERT saved in the published checkpoint format."""
    from transformers import BertConfig, BertForMaskedLM, BertTokenizerFast

    path = tmp_path_factory.mktemp("tinybert")
    (path / "vocab.txt").write_text("\n".join(TINY_VOCAB) + "\n")
    tokenizer = BertTokenizerFast(str(path / "vocab.txt"), do_lower_case=True)
    torch.manual_seed(0)
    config = BertConfig(vocab_size=len(TINY_VOCAB), hidden_size=16, num_hidden_layers=2,
                        num_attention_heads=2, intermediate_size=8, max_position_embeddings=32)
    BertForMaskedLM(config).save_pretrained(path)
    tokenizer.save_pretrained(path)
    return path


@pytest.fixture
def quadratic_toy():
    """One layer, one neuron reading token ``a``; target ``b`` logit is h**2.

    The prompt "a a [MASK]" gives activation x = 2, so F(x) - F(0) = 4.
    """
    vocab = ["[PAD]", "[UNK]", "[MASK]", "a", "b"]
    w_in = np.zeros((1, 1, 5))
    w_in[0, 0, 3] = 1.0
    w_out = np.zeros((1, 5, 1))
    w_out[0, 4, 0] = 1.0
    model = ToyModel(w_in, np.zeros((1, 1)), w_out, vocab=vocab, readout="square")
    return model, model.tokenize_prompt("a a [MASK]", "b")


@pytest.fixture
def linear_toy():
    """One layer, D=3, all neurons active; target logit is sum_i w_i h_i plus embedding."""
    vocab = ["[PAD]", "[UNK]", "[MASK]", "a", "b"]
    w_in = np.zeros((1, 3, 5))
    w_in[0, :, 3] = [1.0, 2.0, 0.5]
    b_in = np.array([[0.0, -1.0, 0.25]])
    weights = np.array([0.7, -1.3, 2.0])
    w_out = np.zeros((1, 5, 3))
    w_out[0, 4, :] = weights
    model = ToyModel(w_in, b_in, w_out, vocab=vocab)
    return model, model.tokenize_prompt("a a [MASK]", "b"), weights


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL/SKIP line per criterion

_criteria: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        number, name = marker.args
        entry = _criteria.setdefault(number, {"name": name, "outcomes": []})
        entry["outcomes"].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outcomes = entry["outcomes"]
        if "failed" in outcomes:
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        terminalreporter.write_line(f"criterion {number} [{status}] {entry['name']}")
