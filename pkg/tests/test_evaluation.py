import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hierdx.evaluation import (
    DatasetResult,
    EvalError,
    PredictionRecord,
    accuracy,
    aggregate,
    evaluate,
    macro_f1,
    macro_f1_from_letters,
)
from hierdx.mcq import build_lesion_condition, build_mcq

from oracles import confusion_macro_f1

# one label per malignancy class, giving correct letters A, B, C
CLASS_LABEL = {"A": "pigmented nevus", "B": "melanoma", "C": "hypertrophic actinic keratosis"}


def answer(letter):
    return f"<thinking>look</thinking><final diagnosis>{letter}</final diagnosis>"


def mcq_items(tree, n):
    return {
        f"q{i}": build_mcq("nodular melanoma", None, tree, 4, seed=i, item_id=f"q{i}", inject_ancestor=True)
        for i in range(n)
    }


def lesion_items(tree, truths):
    out = {}
    for i, letter in enumerate(truths):
        base = build_mcq(CLASS_LABEL[letter], None, tree, 4, seed=i, item_id=f"l{i}")
        item = build_lesion_condition(base)
        assert item.correct_letter == letter
        out[item.id] = item
    return out


class TestAccuracy:
    def test_seven_of_ten(self, tree):
        items = mcq_items(tree, 10)
        preds = []
        for i, (iid, it) in enumerate(items.items()):
            if i < 7:
                text = answer(it.correct_letter)
            elif i < 9:
                wrong = next(o.letter for o in it.options if o.letter != it.correct_letter)
                text = answer(wrong)
            else:
                text = "no tags and no letter here"
            preds.append(PredictionRecord(iid, text))
        res = accuracy(preds, items)
        assert res.accuracy == pytest.approx(0.7)
        assert res.invalid_rate == pytest.approx(0.1)
        assert res.invalid_rate + res.extractable_rate == pytest.approx(1.0)

    def test_all_correct(self, tree):
        items = mcq_items(tree, 5)
        preds = [PredictionRecord(i, f"<final diagnosis>{it.correct_letter}</final diagnosis>") for i, it in items.items()]
        assert accuracy(preds, items).accuracy == 1.0

    def test_empty(self, tree):
        with pytest.raises(EvalError):
            accuracy([], mcq_items(tree, 1))

    def test_unknown_id(self, tree):
        with pytest.raises(EvalError):
            accuracy([PredictionRecord("missing", answer("A"))], mcq_items(tree, 1))

    def test_lenient_recovers_unclosed(self, tree):
        items = mcq_items(tree, 1)
        (iid, it), = items.items()
        text = f"<final diagnosis>{it.correct_letter}"
        assert accuracy([PredictionRecord(iid, text)], items, "strict").accuracy == 0.0
        assert accuracy([PredictionRecord(iid, text)], items, "lenient").accuracy == 1.0

    @given(st.randoms(use_true_random=False))
    def test_permutation_invariant(self, tree, rnd):
        items = mcq_items(tree, 8)
        preds = [PredictionRecord(i, answer(rnd.choice("ABCD"))) for i in items]
        shuffled = preds[:]
        rnd.shuffle(shuffled)
        a, b = accuracy(preds, items), accuracy(shuffled, items)
        assert (a.accuracy, a.invalid_rate) == (b.accuracy, b.invalid_rate)


class TestMacroF1:
    def test_worked_example(self, tree):
        truths = ["A", "A", "B", "B", "B"]
        items = lesion_items(tree, truths)
        guesses = [answer("A"), answer("A"), answer("B"), answer("A"), "unreadable"]
        preds = [PredictionRecord(i, g) for i, g in zip(items, guesses)]
        assert macro_f1(preds, items) == pytest.approx(1.3 / 3)
        assert round(macro_f1(preds, items), 4) == 0.4333
        assert accuracy(preds, items).macro_f1 == pytest.approx(1.3 / 3)

    def test_perfect(self, tree):
        items = lesion_items(tree, ["A", "B", "C", "A"])
        preds = [PredictionRecord(i, answer(it.correct_letter)) for i, it in items.items()]
        assert macro_f1(preds, items) == 1.0

    def test_absent_class_counts_zero(self):
        assert macro_f1_from_letters(["A", "B"], ["A", "B"]) == pytest.approx(2 / 3)

    def test_non_lesion_rejected(self, tree):
        items = mcq_items(tree, 2)
        with pytest.raises(EvalError):
            macro_f1([PredictionRecord(i, answer("A")) for i in items], items)

    def test_single_class_predictions(self):
        truth = list("ABC" * 4)
        pred = ["B"] * len(truth)
        assert macro_f1_from_letters(truth, pred) == pytest.approx(confusion_macro_f1(truth, pred), abs=1e-12)

    @given(
        st.lists(
            st.tuples(st.sampled_from("ABC"), st.sampled_from(["A", "B", "C", None])), min_size=1, max_size=30
        )
    )
    def test_oracle(self, pairs):
        truth, pred = zip(*pairs)
        assert macro_f1_from_letters(truth, pred) == pytest.approx(confusion_macro_f1(truth, pred), abs=1e-12)


def row(name, acc, n=10):
    return DatasetResult(name, n, int(acc * n), 0, acc, 0.0)


class TestAggregate:
    def test_two(self):
        assert aggregate([row("x", 0.6), row("y", 0.8)]).averages["accuracy"] == pytest.approx(0.7)

    def test_single(self):
        assert aggregate([row("x", 0.45)]).averages["accuracy"] == pytest.approx(0.45)

    def test_three(self):
        rep = aggregate([row("x", 0.5), row("y", 0.6), row("z", 0.7)])
        assert rep.averages["accuracy"] == pytest.approx(0.6)
        assert [d.dataset for d in rep.datasets] == ["x", "y", "z"]
        assert rep.averages["macro_f1"] is None

    def test_weighted(self):
        rep = aggregate([row("x", 0.5, n=10), row("y", 1.0, n=30)], weighted=True)
        assert rep.averages["accuracy"] == pytest.approx(0.875)

    def test_table(self):
        text = aggregate([row("x", 0.6), row("y", 0.8)]).table()
        assert "Avg." in text and "0.7000" in text


def test_evaluate_groups_by_dataset(tree):
    items = mcq_items(tree, 6)
    preds = []
    for i, (iid, it) in enumerate(items.items()):
        letter = it.correct_letter if i % 3 else next(o.letter for o in it.options if o.letter != it.correct_letter)
        preds.append(PredictionRecord(iid, answer(letter), "ds1" if i < 3 else "ds2"))
    rep = evaluate(preds, items)
    assert [d.dataset for d in rep.datasets] == ["ds1", "ds2"]
    assert rep.averages["accuracy"] == pytest.approx(2 / 3)
    assert rep.to_dict()["n"] == 6
