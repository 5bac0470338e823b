import numpy as np
import pytest

from src.app.exceptions import ConfigError
from src.app.models.tracker_net import SiameseTracker
from src.app.services.geometry import Box3D
from src.app.services.sequences import Frame, Sequence
from src.app.services.tracker import (
    SearchTransform,
    TemplateStrategy,
    Tracker,
    crop_search,
    crop_template,
    evaluate,
    format_summary,
)

CEILING = 100.0 * 20 / 21


def oracle(mocker, sequence):
    """Patch the network step so it returns the ground truth of each frame in turn."""
    return mocker.patch.object(Tracker, "_predict_box", side_effect=[(b, 1.0) for b in sequence.boxes[1:]])


class TestTemplateStrategy:
    def test_parse(self):
        assert TemplateStrategy.parse("F&P") is TemplateStrategy.FIRST_AND_PREVIOUS
        assert TemplateStrategy.parse("AP") is TemplateStrategy.ALL_PREVIOUS

    def test_unknown(self):
        with pytest.raises(ValueError):
            TemplateStrategy.parse("X")


class TestCropTemplate:
    def test_first_frame_uses_ground_truth_for_every_strategy(self, sample_sequence):
        first = crop_template(sample_sequence.clouds[:1], sample_sequence.boxes[:1], "F")
        for strategy in "P", "FP", "AP":
            crop = crop_template(sample_sequence.clouds[:1], sample_sequence.boxes[:1], strategy)
            assert np.array_equal(crop, first)

    def test_crop_is_in_box_frame(self, sample_sequence):
        crop = crop_template(sample_sequence.clouds[:1], sample_sequence.boxes[:1], "F", margin=0.0)
        box = sample_sequence.boxes[0]
        assert len(crop) > 0
        assert np.all(np.abs(crop[:, 0]) <= box.l / 2 + 1e-9)
        assert np.all(np.abs(crop[:, 1]) <= box.w / 2 + 1e-9)

    def test_union_keeps_duplicates(self, sample_sequence):
        clouds = [sample_sequence.clouds[0]] * 2
        boxes = [sample_sequence.boxes[0]] * 2
        single = crop_template(clouds[:1], boxes[:1], "F")
        assert len(crop_template(clouds, boxes, "F&P")) == 2 * len(single)

    def test_all_previous_concatenates(self, sample_sequence):
        clouds, boxes = sample_sequence.clouds[:3], sample_sequence.boxes[:3]
        expected = sum(len(crop_template([c], [b], "F")) for c, b in zip(clouds, boxes))
        assert len(crop_template(clouds, boxes, "AP")) == expected

    def test_first_ignores_later_frames(self, sample_sequence, rng):
        clouds, boxes = list(sample_sequence.clouds[:3]), list(sample_sequence.boxes[:3])
        before = crop_template(clouds, boxes, "F").tobytes()
        clouds[1] = clouds[1] + rng.normal(size=clouds[1].shape)
        clouds[2] = np.zeros((0, 4))
        boxes[2] = boxes[2].moved_to(0.0, 0.0, 0.0)
        assert crop_template(clouds, boxes, "F").tobytes() == before

    def test_empty_template_is_legal(self, car_box):
        assert len(crop_template([np.zeros((0, 4))], [car_box], "F")) == 0

    def test_needs_history(self):
        with pytest.raises(ValueError):
            crop_template([], [], "F")


class TestCropSearch:
    def test_stationary_target_is_centred(self, car_box):
        frame = np.array([[car_box.x, car_box.y, car_box.z, 0.5]])
        points, _ = crop_search(frame, car_box, (-3.2, -3.2, -3, 3.2, 3.2, 1))
        assert np.allclose(points, [[0.0, 0.0, 0.0, 0.5]])

    def test_round_trip(self, car_box, rng):
        transform = SearchTransform((car_box.x, car_box.y, car_box.z))
        for _ in range(20):
            box = Box3D(*rng.uniform(-3, 3, 3), 1, 2, 1, rng.uniform(-3, 3))
            back = transform.to_local(transform.to_world(box))
            assert np.allclose(back.as_array(), box.as_array(), atol=1e-9)

    def test_prediction_maps_back_to_world(self, car_box):
        transform = SearchTransform((car_box.x, car_box.y, car_box.z))
        local = Box3D(0.5, -0.25, 0.1, 1.8, 4.2, 1.6, 0.2)
        world = transform.to_world(local)
        assert (world.x, world.y, world.z) == pytest.approx((10.5, -0.25, 0.1))
        assert world.yaw == pytest.approx(0.2)

    def test_empty_region(self, car_box):
        points, _ = crop_search(np.array([[50.0, 50.0, 0.0, 0.0]]), car_box, (-3.2, -3.2, -3, 3.2, 3.2, 1))
        assert len(points) == 0


class TestTracker:
    def test_config_mismatch(self, tiny_model, tiny_config):
        other = tiny_config.with_overrides({"decoder.k": 8})
        with pytest.raises(ConfigError):
            Tracker(tiny_model, other)

    def test_oracle_hits_the_ceiling(self, tiny_config, sample_sequence, mocker):
        oracle(mocker, sample_sequence)
        result = Tracker(object(), tiny_config).track_sequence(sample_sequence)
        assert result.boxes[0] == sample_sequence.boxes[0]
        assert result.score.num_frames == len(sample_sequence) - 1
        assert result.score.success == pytest.approx(CEILING)
        assert result.score.precision == pytest.approx(CEILING)

    def test_drifting_prediction_fails(self, tiny_config, car_box, mocker):
        frames = [Frame(np.zeros((0, 4)), car_box.moved_to(10.0 + 3.0 * t, 0.0, 0.0)) for t in range(5)]
        seq = Sequence(frames)
        mocker.patch.object(Tracker, "_predict_box", return_value=(car_box, 1.0))
        result = Tracker(object(), tiny_config).track_sequence(seq)
        assert result.score.ious[-1] == 0.0
        assert result.score.success < 30.0

    def test_search_is_centred_on_previous_result(self, tiny_config, sample_sequence, mocker):
        predict = oracle(mocker, sample_sequence)
        Tracker(object(), tiny_config).track_sequence(sample_sequence, "P")
        transforms = [call.args[2] for call in predict.call_args_list]
        boxes = sample_sequence.boxes
        assert transforms[1].offset == pytest.approx((boxes[1].x, boxes[1].y, boxes[1].z))

    def test_replay_is_identical(self, tiny_model, tiny_config, sample_sequence):
        tracker = Tracker(tiny_model, tiny_config)
        first = tracker.track_sequence(sample_sequence)
        second = tracker.track_sequence(sample_sequence)
        assert first.boxes == second.boxes
        assert first.score.success == second.score.success

    def test_predict_restores_training_mode(self, tiny_model, sample_sequence):
        tiny_model.train()
        preds = tiny_model.predict(sample_sequence.clouds[0], sample_sequence.clouds[1])
        assert tiny_model.training
        assert preds.boxes.shape == (16, 5)


class TestEvaluate:
    def test_frame_weighted_mean(self, tiny_config, car_box, mocker):
        short = Sequence([Frame(np.zeros((0, 4)), car_box)] * 3, "a", "Car")
        long = Sequence([Frame(np.zeros((0, 4)), car_box)] * 7, "b", "Van")
        far = car_box.moved_to(40.0, 0.0, 0.0)
        mocker.patch.object(Tracker, "_predict_box",
                            side_effect=[(car_box, 1.0)] * 2 + [(far, 0.5)] * 6)
        summary = evaluate(Tracker(object(), tiny_config), [short, long])
        assert summary.categories["Car"].frames == 2
        assert summary.categories["Van"].frames == 6
        assert summary.categories["Van"].success == 0.0
        assert summary.mean.success == pytest.approx(CEILING * 2 / 8)
        assert len(summary.records) == 10
        assert "Mean" in format_summary(summary)

    def test_no_sequences(self, tiny_config):
        with pytest.raises(ValueError):
            evaluate(Tracker(object(), tiny_config), [])

    def test_summary_dict(self, tiny_config, sample_sequence, mocker):
        oracle(mocker, sample_sequence)
        summary = evaluate(Tracker(object(), tiny_config), [sample_sequence])
        assert summary.to_dict()["mean"]["frames"] == len(sample_sequence) - 1


def test_tracker_network_on_empty_template(tiny_model):
    preds = tiny_model.predict(np.zeros((0, 4)), np.zeros((0, 4)))
    assert np.isfinite(preds.scores.numpy()).all()
    assert isinstance(tiny_model, SiameseTracker)
