"""Tests for per-step prompt composition."""
import random

import pytest

from src.models.generation import PromptMode
from src.models.plan import Plan, PlanStep, SimilarityMatrix
from src.services.recaption import compose_prompts, join_caption


def _synthetic_plan(rng: random.Random) -> Plan:
    words = ["pot", "water", "pasta", "lid", "stove", "salt", "spoon", "bowl"]
    n = rng.randint(1, 6)
    steps = []
    for i in range(n):
        action = " ".join(rng.choices(words, k=rng.randint(1, 6))) + rng.choice(["", ".", " ."])
        state = " ".join(rng.choices(words, k=rng.randint(1, 6))) + rng.choice(["", "."])
        steps.append(PlanStep(index=i, title=f"Step {i}", action=action.strip() or "stir", state=state))
    return Plan(goal="cooking", steps=tuple(steps), similarity=SimilarityMatrix.identity(n))


def test_recaption_joins_action_and_previous_state(cake_plan):
    prompts = compose_prompts(cake_plan, PromptMode.RECAPTION)
    assert prompts[0].text == "Set the baked cake on a platter."
    assert prompts[1].text == (
        "Person using a spoon to place some icing on the top of the cake. A baked cake on the platter."
    )


@pytest.mark.parametrize("mode", list(PromptMode))
def test_first_prompt_is_first_action(cake_plan, mode):
    prompts = compose_prompts(cake_plan, mode)
    assert prompts[0].text == cake_plan.steps[0].action
    assert all(p.mode is mode for p in prompts)


def test_instruction_only_returns_raw_actions(three_step_plan):
    prompts = compose_prompts(three_step_plan, PromptMode.INSTRUCTION_ONLY)
    assert [p.text for p in prompts] == three_step_plan.actions


def test_concatenation_uses_adjacent_action(three_step_plan):
    prompts = compose_prompts(three_step_plan, PromptMode.CONCATENATION)
    assert prompts[2].text == "Do thing 2 with the pot. Do thing 3 with the pot."


def test_mode_accepts_string_value(cake_plan):
    assert compose_prompts(cake_plan, "recaption") == compose_prompts(cake_plan, PromptMode.RECAPTION)


def test_join_strips_only_one_period():
    assert join_caption("Boil water..", "Hot.") == "Boil water.. Hot."
    assert join_caption("Boil water.", "Water is hot.") == "Boil water. Water is hot."
    assert join_caption("Boil water", "Water is hot.") == "Boil water. Water is hot."
    assert join_caption("Boil water.  ", "Water is hot.") == "Boil water. Water is hot."


def test_prompt_rule_on_synthetic_plans():
    rng = random.Random(0)
    for _ in range(100):
        plan = _synthetic_plan(rng)
        actions, states = plan.actions, plan.states

        recaption = compose_prompts(plan, PromptMode.RECAPTION)
        concatenation = compose_prompts(plan, PromptMode.CONCATENATION)
        assert len(recaption) == len(concatenation) == len(plan)
        assert [p.index for p in recaption] == list(range(len(plan)))
        assert recaption[0].text == actions[0]
        for i in range(1, len(plan)):
            assert recaption[i].text.startswith(actions[i])
            assert recaption[i].text.endswith(states[i - 1])
            assert concatenation[i].text.startswith(actions[i - 1])
            assert concatenation[i].text.endswith(actions[i])


def test_compose_is_pure(three_step_plan):
    assert compose_prompts(three_step_plan, PromptMode.RECAPTION) == compose_prompts(
        three_step_plan, PromptMode.RECAPTION
    )
