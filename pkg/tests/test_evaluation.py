import itertools
import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from photostyle.evaluation import (
    EvalConfig,
    EvalReport,
    PredictionRecord,
    average_precision,
    confusion_matrix,
    evaluate,
    load_predictions,
    mean_average_precision,
    patch_plan,
    per_class_ap,
    per_class_precision,
    predict_image,
    report_from_predictions,
    save_predictions,
)
from photostyle.manifest import split_records
from photostyle.model import ModelConfig, build_model
from photostyle.pipeline import batch_inputs, column_inputs
from photostyle.transforms import derive_rng, resize_short_side


def brute_force_ap(scores, positives):
    """Independent O(n^2) reference: explicit stable ranking, no vector math."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    terms = []
    found = 0
    for rank, idx in enumerate(order, start=1):
        if positives[idx]:
            found += 1
            terms.append(found / rank)
    return sum(terms) / len(terms)


class _StubModel:
    """Model stand-in: fixed per-call probability rows, cycling a pattern."""

    def __init__(self, pattern, columns=("rgb_patch",)):
        self.pattern = [torch.tensor(row, dtype=torch.float32) for row in pattern]
        self.config = SimpleNamespace(columns=tuple(columns))
        self._served = 0

    def eval(self):
        return self

    def predict_proba(self, inputs):
        batch = next(iter(inputs.values())).shape[0]
        rows = []
        for _ in range(batch):
            rows.append(self.pattern[self._served % len(self.pattern)])
            self._served += 1
        return torch.stack(rows)


class TestAveragePrecision:
    def test_hand_example(self):
        ap = average_precision([0.9, 0.8, 0.7, 0.6], [True, False, True, False])
        assert ap == pytest.approx(5 / 6, abs=1e-12)
        assert f"{ap:.4f}" == "0.8333"

    def test_perfect_ranking_is_one(self):
        assert average_precision([0.9, 0.8, 0.1, 0.0], [True, True, False, False]) == 1.0

    def test_single_positive_gives_reciprocal_rank(self):
        scores = [0.9, 0.8, 0.7, 0.6, 0.5]
        for rank in range(1, 6):
            positives = [False] * 5
            positives[rank - 1] = True
            assert average_precision(scores, positives) == pytest.approx(1 / rank, abs=1e-12)

    def test_all_positive_is_one(self):
        assert average_precision([0.3, 0.9, 0.1], [True, True, True]) == 1.0

    def test_all_256_labelings_of_eight_items_match_brute_force(self):
        rng = np.random.default_rng(17)
        scores = rng.normal(size=8)
        assert len(np.unique(scores)) == 8
        checked = 0
        for bits in itertools.product([False, True], repeat=8):
            if not any(bits):
                with pytest.raises(ValueError):
                    average_precision(scores, bits)
                continue
            expected = brute_force_ap(list(scores), list(bits))
            assert abs(average_precision(scores, bits) - expected) < 1e-12
            checked += 1
        assert checked == 255

    def test_random_scores_with_ties_match_brute_force(self):
        rng = np.random.default_rng(23)
        for _ in range(50):
            n = int(rng.integers(2, 30))
            scores = np.round(rng.random(n), 1)  # coarse grid forces ties
            positives = rng.random(n) < 0.4
            if not positives.any():
                positives[int(rng.integers(0, n))] = True
            expected = brute_force_ap(list(scores), list(positives))
            assert abs(average_precision(scores, positives) - expected) < 1e-12

    def test_ties_keep_input_order(self):
        assert average_precision([0.5, 0.5], [False, True]) == pytest.approx(0.5)
        assert average_precision([0.5, 0.5], [True, False]) == 1.0

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=12)
        positives = rng.random(12) < 0.5
        positives[0] = True
        base = average_precision(scores, positives)
        assert average_precision(2.0 * scores + 1.0, positives) == pytest.approx(base, abs=1e-12)
        assert average_precision(np.exp(scores), positives) == pytest.approx(base, abs=1e-12)

    def test_empty_and_shape_errors(self):
        with pytest.raises(ValueError):
            average_precision([], [])
        with pytest.raises(ValueError):
            average_precision([0.5, 0.4], [True])


class TestPerClassMetrics:
    def test_per_class_ap_hand_case(self):
        probs = [
            [0.7, 0.2, 0.1],
            [0.1, 0.8, 0.1],
            [0.5, 0.3, 0.2],
        ]
        truths = [(0,), (1,), (0, 1)]
        aps = per_class_ap(probs, truths, 3)
        # class 0: scores (.7,.1,.5), positives rows 0 and 2 -> 1/1, 2/2
        assert aps[0] == pytest.approx(1.0, abs=1e-12)
        # class 1: scores (.2,.8,.3), positives rows 1 and 2 -> 1/1, 2/2
        assert aps[1] == pytest.approx(1.0, abs=1e-12)
        assert aps[2] is None

    def test_per_class_ap_shape_checks(self):
        with pytest.raises(ValueError):
            per_class_ap([[0.5, 0.5]], [(0,)], 3)
        with pytest.raises(ValueError):
            per_class_ap([[0.5, 0.5]], [(0,), (1,)], 2)

    def test_mean_average_precision_skips_undefined(self):
        assert mean_average_precision([0.5, None, 1.0]) == pytest.approx(0.75, abs=1e-12)
        with pytest.raises(ValueError):
            mean_average_precision([None, None])

    def test_per_class_precision_hand_case(self):
        pcp = per_class_precision([0, 0, 0, 1], [(0,), (0,), (1,), (1,)], 3)
        assert pcp[0] == pytest.approx(2 / 3, abs=1e-12)
        assert pcp[1] == 1.0
        assert pcp[2] is None

    def test_per_class_precision_multilabel_truths_count(self):
        pcp = per_class_precision([0, 1], [(0, 1), (0, 1)], 2)
        assert pcp == [1.0, 1.0]

    def test_per_class_precision_errors(self):
        with pytest.raises(ValueError):
            per_class_precision([2], [(0,)], 2)
        with pytest.raises(ValueError):
            per_class_precision([0, 1], [(0,)], 2)


class TestConfusionMatrix:
    def test_hand_counts(self):
        matrix, support = confusion_matrix([0, 1, 1, 1], [0, 0, 1, 1], 2)
        assert matrix.tolist() == [[0.5, 0.5], [0.0, 1.0]]
        assert support.tolist() == [2, 2]

    def test_perfect_predictions_give_identity(self):
        truths = [0, 1, 2, 0, 1, 2]
        matrix, support = confusion_matrix(truths, truths, 3)
        assert np.array_equal(matrix, np.eye(3))
        assert support.tolist() == [2, 2, 2]

    def test_rows_with_support_sum_to_one(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            n, k = int(rng.integers(1, 40)), int(rng.integers(2, 7))
            preds = rng.integers(0, k, size=n)
            truths = rng.integers(0, k, size=n)
            matrix, support = confusion_matrix(preds, truths, k)
            for row, sup in zip(matrix, support):
                if sup:
                    assert row.sum() == pytest.approx(1.0, abs=1e-9)
                else:
                    assert np.all(row == 0.0)

    def test_zero_support_row_stays_zero(self):
        matrix, support = confusion_matrix([0, 0], [0, 0], 3)
        assert support.tolist() == [2, 0, 0]
        assert np.all(matrix[1:] == 0.0)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            confusion_matrix([3], [0], 3)
        with pytest.raises(ValueError):
            confusion_matrix([0], [-1], 3)


class TestPredictionRecord:
    def test_valid_record_round_trips_json(self):
        record = PredictionRecord("img-1", (0.25, 0.75), (1,))
        payload = json.loads(record.to_json())
        assert payload == {"id": "img-1", "probabilities": [0.25, 0.75], "truths": [1]}

    def test_probability_sum_enforced(self):
        with pytest.raises(ValueError, match="sum"):
            PredictionRecord("img-1", (0.3, 0.3), (0,))
        PredictionRecord("img-1", (0.5, 0.5 + 5e-7), (0,))  # inside tolerance

    def test_truth_bounds_enforced(self):
        with pytest.raises(ValueError, match="empty"):
            PredictionRecord("img-1", (1.0,), ())
        with pytest.raises(ValueError, match="out of range"):
            PredictionRecord("img-1", (0.5, 0.5), (2,))

    def test_save_load_round_trip(self, tmp_path):
        records = [
            PredictionRecord("a", (0.123456789, 0.876543211), (0,)),
            PredictionRecord("b", (0.5, 0.5), (0, 1)),
        ]
        path = tmp_path / "preds.jsonl"
        save_predictions(path, records)
        loaded = load_predictions(path)
        assert loaded == records

    def test_load_reports_bad_line_number(self, tmp_path):
        path = tmp_path / "preds.jsonl"
        good = PredictionRecord("a", (1.0,), (0,)).to_json()
        path.write_text(good + "\n" + "{not json}\n")
        with pytest.raises(ValueError, match="line 2"):
            load_predictions(path)

    def test_load_skips_blank_lines(self, tmp_path):
        path = tmp_path / "preds.jsonl"
        path.write_text("\n" + PredictionRecord("a", (1.0,), (0,)).to_json() + "\n\n")
        assert len(load_predictions(path)) == 1


class TestPatchPlan:
    def test_grid_yields_exactly_fifty(self):
        assert len(patch_plan(256, 384, "grid", 224, 50)) == 50

    def test_center_and_warp_yield_one(self):
        center = patch_plan(256, 300, "center", 224, 50)
        assert len(center) == 1 and not center[0].flip
        warp = patch_plan(256, 300, "warp", 224, 50)
        assert warp[0].top == 0 and warp[0].left == 0 and warp[0].size == 224

    def test_random_needs_rng_and_respects_count(self):
        with pytest.raises(ValueError):
            patch_plan(256, 300, "random", 224, 10)
        specs = patch_plan(256, 300, "random", 224, 10, rng=derive_rng(0, "x", 0))
        assert len(specs) == 10
        for spec in specs:
            spec.validate(256, 300)


class TestPredictImage:
    def test_constant_stub_returns_its_distribution(self):
        model = _StubModel([[0.2, 0.3, 0.5]])
        image = np.random.default_rng(0).random((64, 96, 3)).astype(np.float32)
        probs = predict_image(model, image, patch_policy="grid")
        assert probs == pytest.approx([0.2, 0.3, 0.5], abs=1e-6)
        assert model._served == 50

    def test_alternating_stub_averages_to_half(self):
        model = _StubModel([[1.0, 0.0], [0.0, 1.0]])
        image = np.zeros((64, 64, 3), np.float32)
        probs = predict_image(model, image, patch_policy="grid")
        assert probs == pytest.approx([0.5, 0.5], abs=1e-9)

    def test_batching_does_not_change_the_mean(self):
        pattern = [[0.7, 0.3], [0.1, 0.9], [0.4, 0.6], [0.25, 0.75]]
        image = np.zeros((64, 64, 3), np.float32)
        means = []
        for batch_size in (1, 7, 50):
            model = _StubModel(pattern)
            means.append(predict_image(model, image, patch_policy="grid", batch_size=batch_size))
        assert means[0] == pytest.approx(means[1], abs=1e-6)
        assert means[0] == pytest.approx(means[2], abs=1e-6)

    def test_real_model_simplex_and_determinism(self, dataset):
        model = build_model(
            ModelConfig(columns=("saliency",), num_classes=3, fusion_dim=8, init_seed=2)
        ).eval()
        record = split_records(dataset["manifest"], "test")[0]
        from photostyle.pipeline import load_record_image, load_record_saliency

        image = load_record_image(record, dataset["image_root"])
        smap = load_record_saliency(record, dataset["saliency_root"])
        a = predict_image(model, image, smap, "grid")
        b = predict_image(model, image, smap, "grid")
        assert np.array_equal(a, b)
        assert a.sum() == pytest.approx(1.0, abs=1e-6)
        assert np.all(a >= 0)

    def test_mean_matches_per_patch_softmax_average(self, dataset):
        model = build_model(
            ModelConfig(columns=("saliency",), num_classes=3, fusion_dim=8, init_seed=4)
        ).eval()
        record = split_records(dataset["manifest"], "test")[0]
        from photostyle.pipeline import load_record_image, load_record_saliency

        image = load_record_image(record, dataset["image_root"])
        smap = load_record_saliency(record, dataset["saliency_root"])

        resized = resize_short_side(image, 256)
        specs = patch_plan(resized.shape[0], resized.shape[1], "grid", 224, 50)
        assert len(specs) == 50
        rows = []
        with torch.no_grad():
            for spec in specs:  # one patch at a time: different batching path
                item = column_inputs(resized, smap, spec, ("saliency",))
                rows.append(model.predict_proba(batch_inputs([item])).numpy()[0])
        expected = np.mean(rows, axis=0)

        got = predict_image(model, image, smap, "grid", batch_size=50)
        assert got == pytest.approx(expected, abs=1e-6)


class TestReports:
    def _perfect_predictions(self):
        rows = []
        for i, cls in enumerate([0, 0, 1, 1, 2, 2]):
            probs = [0.1, 0.1, 0.1]
            probs[cls] = 0.8
            rows.append(PredictionRecord(f"r{i}", tuple(probs), (cls,)))
        return rows

    def test_perfect_predictions_give_identity_and_unit_scores(self):
        report = report_from_predictions(self._perfect_predictions(), ("a", "b", "c"))
        assert report.map == pytest.approx(1.0, abs=1e-12)
        assert report.ap == pytest.approx([1.0, 1.0, 1.0])
        assert report.pcp == pytest.approx([1.0, 1.0, 1.0])
        assert report.mean_pcp == pytest.approx(1.0)
        assert np.array_equal(np.asarray(report.confusion), np.eye(3))
        assert report.support == [2, 2, 2]
        assert report.sample_count == 6

    def test_twenty_record_fixture_matches_brute_force(self):
        rng = np.random.default_rng(42)
        k = 3
        predictions = []
        for i in range(20):
            logits = rng.normal(size=k)
            probs = np.exp(logits) / np.exp(logits).sum()
            truths = tuple(
                sorted(set([int(rng.integers(0, k))] + ([1] if rng.random() < 0.3 else [])))
            )
            predictions.append(PredictionRecord(f"rec-{i:02d}", tuple(probs), truths))

        report = report_from_predictions(predictions, ("a", "b", "c"))

        probs = np.asarray([p.probabilities for p in predictions])
        expected_aps = []
        for c in range(k):
            positives = [c in p.truths for p in predictions]
            expected_aps.append(brute_force_ap(list(probs[:, c]), positives))
        assert report.ap == pytest.approx(expected_aps, abs=1e-9)
        assert report.map == pytest.approx(np.mean(expected_aps), abs=1e-9)

        argmax = probs.argmax(axis=1)
        for c in range(k):
            hit = [c in p.truths for p, a in zip(predictions, argmax) if a == c]
            expected = sum(hit) / len(hit) if hit else None
            if expected is None:
                assert report.pcp[c] is None
            else:
                assert report.pcp[c] == pytest.approx(expected, abs=1e-9)

    def test_report_dict_round_trip_is_exact(self):
        report = report_from_predictions(self._perfect_predictions(), ("a", "b", "c"), {"seed": 1})
        clone = EvalReport.from_dict(json.loads(json.dumps(report.to_dict())))
        assert clone == report

    def test_report_validates_lengths(self):
        with pytest.raises(ValueError):
            EvalReport(
                class_names=("a", "b"),
                ap=[1.0],
                map=1.0,
                pcp=[1.0, None],
                mean_pcp=1.0,
                confusion=[[1.0, 0.0], [0.0, 1.0]],
                support=[1, 1],
                sample_count=2,
            )

    def test_class_count_mismatch_rejected(self):
        preds = [PredictionRecord("a", (0.5, 0.5), (0,))]
        with pytest.raises(ValueError, match="classes"):
            report_from_predictions(preds, ("a", "b", "c"))

    def test_empty_predictions_rejected(self):
        with pytest.raises(ValueError):
            report_from_predictions([], ("a",))


class TestEvaluate:
    def _model(self):
        return build_model(
            ModelConfig(
                columns=("saliency", "rgb_patch"), num_classes=3, fusion_dim=16, init_seed=1
            )
        ).eval()

    def test_grid_evaluation_is_run_to_run_identical(self, dataset):
        config = EvalConfig()
        model = self._model()
        report_a, preds_a = evaluate(
            model, dataset["manifest"], config, dataset["image_root"], dataset["saliency_root"]
        )
        report_b, preds_b = evaluate(
            model, dataset["manifest"], config, dataset["image_root"], dataset["saliency_root"]
        )
        assert preds_a == preds_b
        assert report_a.to_dict() == report_b.to_dict()
        assert report_a.sample_count == len(split_records(dataset["manifest"], "test"))
        ids = [p.id for p in preds_a]
        assert ids == sorted(ids)

    def test_worker_count_does_not_change_results(self, dataset):
        model = self._model()
        _, serial = evaluate(
            model, dataset["manifest"], EvalConfig(jobs=1),
            dataset["image_root"], dataset["saliency_root"],
        )
        _, threaded = evaluate(
            model, dataset["manifest"], EvalConfig(jobs=4),
            dataset["image_root"], dataset["saliency_root"],
        )
        assert serial == threaded

    def test_missing_split_rejected(self, dataset):
        with pytest.raises(ValueError, match="val"):
            evaluate(
                self._model(), dataset["manifest"], EvalConfig(),
                dataset["image_root"], dataset["saliency_root"], split="val",
            )

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EvalConfig(patch_policy="mosaic")
        with pytest.raises(ValueError):
            EvalConfig(saliency_input="inverted")
        with pytest.raises(ValueError):
            EvalConfig(jobs=0)
