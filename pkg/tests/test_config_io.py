import json
import re

import numpy as np
import pytest

from pedcast.config import DEFAULTS, ConfigError, RunConfig, load_config, parse_override
from pedcast.predictions import (PredictedObject, PredictionFile, PredictionFormatError, dumps_predictions,
                                 loads_predictions)
from pedcast.render import CanvasTransform, render_svg


def test_config_defaults_and_precedence(tmp_path):
    assert RunConfig()["train.lr"] == 1e-3
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"train.lr": 1e-3, "seed": 3}))
    cfg = load_config(path, {"seed": 9})
    assert cfg["train.lr"] == 1e-3 and cfg["seed"] == 9
    assert RunConfig(json.loads(cfg.to_json())) == cfg
    assert set(cfg.as_dict()) == set(DEFAULTS)


def test_config_rejects_unknown_and_mistyped(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig({"train.lrr": 1.0})
    with pytest.raises(ConfigError):
        RunConfig({"seed": 1.5})
    with pytest.raises(ConfigError):
        RunConfig({"sti.use_interaction": 1})
    with pytest.raises(ConfigError):
        RunConfig({"frames.future": ["a"]})
    (tmp_path / "l.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "l.json")


def test_parse_override():
    assert parse_override("train.steps=5") == ("train.steps", 5)
    assert parse_override("sim.preset=smoke") == ("sim.preset", "smoke")
    assert parse_override("frames.future=[1, 2]") == ("frames.future", [1, 2])
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_config_updated_and_copies():
    cfg = RunConfig({"seed": 4})
    up = cfg.updated({"train.steps": 3})
    assert up["seed"] == 4 and up["train.steps"] == 3 and cfg["train.steps"] == 2500
    fut = cfg["frames.future"]
    fut.append(9.0)
    assert len(cfg["frames.future"]) == 6


def _pf():
    rng = np.random.default_rng(0)
    pf = PredictionFile((0.5, 1.0))
    pf.scenes[0] = [PredictedObject(rng.normal(size=5), 0.25, rng.normal(size=(2, 3)), rng.normal(size=(3, 3))),
                    PredictedObject(rng.normal(size=5), 1.0, rng.normal(size=(2, 3)))]
    pf.scenes[3] = []
    return pf


def test_predictions_round_trip_exact():
    pf = _pf()
    back = loads_predictions(dumps_predictions(pf))
    assert back.t_future == pf.t_future and sorted(back.scenes) == [0, 3]
    for a, b in zip(pf.scenes[0], back.scenes[0]):
        assert np.array_equal(a.box, b.box) and a.score == b.score and np.array_equal(a.future, b.future)
        assert (a.history is None) == (b.history is None)
        if a.history is not None:
            assert np.array_equal(a.history, b.history)


@pytest.mark.parametrize("mutate, message", [
    (lambda s: s.replace("pedcast-predictions 1", "other"), "header"),
    (lambda s: s.replace("scene 3 0", "scene 3 1"), "ends inside"),
    (lambda s: s.replace("scene 0 2", "scene 0 3"), "expected .det"),
    (lambda s: re.sub(r"\nfut [^\n]*", "\nfut 1 2 3", s, count=1), "future values"),
    (lambda s: s.replace("0.25", "1.5"), "outside"),
    (lambda s: s.replace("scene 3 0", "scene 0 0"), "twice"),
    (lambda s: s.replace("0.25", "x"), "numbers"),
])
def test_predictions_format_errors(mutate, message):
    text = mutate(dumps_predictions(_pf()))
    with pytest.raises(PredictionFormatError, match=message):
        loads_predictions(text)


def test_canvas_transform_by_hand():
    tf = CanvasTransform(half_range=20, size=800, margin=20)
    # scale = 760 / 40 = 19 px per metre; y grows downwards
    px, py = tf(1.0, 2.0)
    assert (float(px), float(py)) == pytest.approx((20 + 21 * 19, 20 + 18 * 19))


def test_render_empty_scene_is_axes_only():
    svg = render_svg()
    assert svg.startswith("<svg") and 'version="1.1"' in svg and svg.rstrip().endswith("</svg>")
    assert svg.count("<line") == 2
    assert "<polygon" not in svg and "<polyline" not in svg and "<circle" not in svg


def test_render_one_detection():
    det = PredictedObject(np.array([1.0, 2.0, 2.0, 4.0, 0.0]), 0.9, np.array([[1.5, 2.0, 0.0], [2.0, 2.0, 0.0]]),
                          np.array([[1.0, 2.0, 0.0], [0.5, 2.0, 0.0]]))
    svg = render_svg(detections=[det])
    section = svg.split('<g id="detections">')[1].split("</g>")[0]
    assert section.count("<polygon") == 1 and section.count("<polyline") == 2
    # the corner at local (+w/2, -l/2) is world (2, 0) -> canvas (20 + 22*19, 20 + 20*19)
    first = re.search(r'<polygon points="([^"]+)"', section).group(1).split()[0]
    assert tuple(map(float, first.split(","))) == pytest.approx((438.0, 400.0))
    assert 'stroke="yellow"' in section and 'stroke="cyan"' in section


def test_render_points_and_ground_truth():
    class G:
        box = np.array([0.0, 0.0, 1.0, 1.0, 0.3])
        future = np.array([[0.5, 0.0, 0.0]])
    svg = render_svg(points=np.array([[0, 0, 0], [100, 100, 0]]), ground_truth=[G()])
    assert svg.count("<circle") == 1
    assert 'stroke="#3c3"' in svg
