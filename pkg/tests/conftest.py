import numpy as np
import pytest
import torch

from crowdcount.annotations import (
    Split,
    Weather,
    serialize_heads,
    serialize_label_record,
)
from crowdcount.network import BackboneConfig, build_model
from crowdcount.synthdata import SceneSpec, generate_scene


@pytest.fixture(autouse=True)
def single_threaded_torch():
    # Bitwise-determinism assertions depend on a fixed reduction order.
    torch.set_num_threads(1)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return build_model(BackboneConfig("tiny"))


def make_fixture_dataset():
    """12 deterministic synthetic images spanning splits, bands and weathers.

    Head counts are chosen to hit every density band: low (<=50),
    medium (51-500), high (>500 via many small heads on a large canvas).
    """
    specs = [
        (Split.TRAIN, 0, 10, Weather.NORMAL),
        (Split.TRAIN, 1, 30, Weather.RAIN),
        (Split.TRAIN, 2, 80, Weather.NORMAL),
        (Split.TRAIN, 3, 120, Weather.SNOW),
        (Split.TRAIN, 4, 0, Weather.NORMAL),
        (Split.TRAIN, 5, 55, Weather.FOG_HAZE),
        (Split.VAL, 6, 25, Weather.NORMAL),
        (Split.VAL, 7, 60, Weather.RAIN),
        (Split.VAL, 8, 50, Weather.NORMAL),
        (Split.TEST, 9, 51, Weather.NORMAL),
        (Split.TEST, 10, 90, Weather.FOG_HAZE),
        (Split.TEST, 11, 15, Weather.SNOW),
    ]
    dataset = []
    for split, seed, n_heads, weather in specs:
        pixels, ann = generate_scene(
            SceneSpec(
                dims=(192, 160),
                n_heads=n_heads,
                head_radius_range=(2.0, 4.0),
                weather=weather,
                seed=seed,
            )
        )
        ann = ann.__class__(**{**ann.__dict__, "split": split})
        dataset.append((pixels, ann))
    return dataset


@pytest.fixture(scope="session")
def fixture_dataset():
    return make_fixture_dataset()


@pytest.fixture(scope="session")
def fixture_dataset_dir(fixture_dataset, tmp_path_factory):
    """The same 12 scenes written out in the on-disk dataset layout."""
    from PIL import Image

    root = tmp_path_factory.mktemp("fixture_dataset")
    for pixels, ann in fixture_dataset:
        base = root / ann.split.value
        (base / "images").mkdir(parents=True, exist_ok=True)
        (base / "gt").mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(base / "images" / f"{ann.image_id}.png")
        (base / "gt" / f"{ann.image_id}.txt").write_text(serialize_heads(ann))
        with open(base / "image_labels.txt", "a") as f:
            f.write(serialize_label_record(ann))
    return root


@pytest.fixture(scope="session")
def fixture_annotations(fixture_dataset):
    return [ann for _, ann in fixture_dataset]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One PASS/FAIL line per acceptance criterion at the end of the run.
_acceptance_outcomes = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::", 1)[1]
    number = int(name.split("_")[2])
    label = name.split(f"test_criterion_{number}_", 1)[1].replace("_", " ")
    if report.when == "call":
        _acceptance_outcomes[number] = (label, report.outcome)
    elif report.when == "setup" and report.outcome != "passed":
        _acceptance_outcomes[number] = (label, report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance_outcomes):
        label, outcome = _acceptance_outcomes[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number} ({label}): {verdict}")
