"""Shared fixtures: planner exemplars, fixture clients, toy backend settings and mask directories."""
import json

import numpy as np
import pytest
from PIL import Image

from src.models.generation import AttentionSchedule, BackendConfig, ToyDenoiserSpec
from src.services.planner import parse_plan
from src.services.region_masks import bitmap_to_image

PRINTED_EXEMPLAR = """{
    "goal": "Decorating a Cake",
    "steps": [
        {
            "step": "Setting the Cake on a Platter",
            "object": [["cake", "new"], ["platter", "new"]],
            "action": "Set the baked cake on a platter.",
            "state_of_main_object": "A baked cake on the platter."
        },
        {
            "step": "Applying Icing",
            "object": [["cake", "similar shape", 1], ["spoon", "new"]],
            "action": "Person using a spoon to place some icing on the top of the cake.",
            "state_of_main_object": "The cake covered by icing."
        }
    ],
    "relation": [
        [1.0 , 0.5, 0.4, 0.3],
        [0.9, 1.0 , 0.5, 0.4],
        [0.8, 0.9, 1.0, 0.4],
        [0.7, 0.8, 0.9, 1.0 ]
    ]
}"""


def _exemplar_2x2() -> str:
    data = json.loads(PRINTED_EXEMPLAR)
    data["relation"] = [[1.0, 0.5], [0.9, 1.0]]
    return json.dumps(data, indent=4)


def make_plan_json(num_steps: int, relation=None, shared_label: str = "pot") -> str:
    """A valid planner answer with *num_steps* steps; every later step reuses *shared_label*."""
    steps = []
    for i in range(num_steps):
        objects = [[shared_label, "new"]] if i == 0 else [[shared_label, "similar", i], [f"tool{i}", "new"]]
        steps.append({
            "step": f"Step {i + 1}",
            "object": objects,
            "action": f"Do thing {i + 1} with the {shared_label}.",
            "state_of_main_object": f"The {shared_label} after thing {i + 1}.",
        })
    if relation is None:
        relation = np.eye(num_steps).tolist()
    return json.dumps({"goal": "Testing a pot", "steps": steps, "relation": relation}, indent=4)


@pytest.fixture
def printed_exemplar() -> str:
    """The exemplar exactly as printed: 2 steps with a 4x4 relation."""
    return PRINTED_EXEMPLAR


@pytest.fixture
def exemplar_2x2() -> str:
    return _exemplar_2x2()


@pytest.fixture
def cake_plan():
    return parse_plan(_exemplar_2x2())


@pytest.fixture
def three_step_plan():
    return parse_plan(make_plan_json(3, relation=np.ones((3, 3)).tolist()))


@pytest.fixture
def toy_spec() -> ToyDenoiserSpec:
    return ToyDenoiserSpec()


@pytest.fixture
def short_backend() -> BackendConfig:
    """A 6-step schedule sharing in the first 4 steps, for fast pipeline tests."""
    return BackendConfig(total_steps=6, schedule=AttentionSchedule(total_steps=6, shared_steps=4))


@pytest.fixture
def mask_dir(tmp_path):
    """Recorded segmentation masks in the save_masks layout for a 3-step 'pot' plan."""
    directory = tmp_path / "masks"
    directory.mkdir()
    index = {}
    for step in range(3):
        bitmap = np.zeros((64, 64), dtype=np.uint8)
        bitmap[8 * step:8 * step + 24, 16:48] = 1
        name = f"step{step}_pot.png"
        bitmap_to_image(bitmap).save(directory / name)
        index[str(step)] = {"pot": name}
    (directory / "index.json").write_text(json.dumps(index), encoding="utf-8")
    return directory


@pytest.fixture
def white_image() -> Image.Image:
    return Image.new("RGB", (64, 64), "white")
