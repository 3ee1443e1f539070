"""Per-step text prompts for the image model."""
from src.models.generation import PromptMode, StepPrompt
from src.models.plan import Plan


def join_caption(first: str, second: str) -> str:
    """Join two caption parts with ". ", dropping one trailing "." from *first*."""
    first = first.rstrip()
    if first.endswith("."):
        first = first[:-1]
    return f"{first}. {second}"


def compose_prompts(plan: Plan, mode: PromptMode) -> list[StepPrompt]:
    """Build one prompt per step.

    recaption:        p_0 = a_0, p_i = a_i + s_(i-1)
    concatenation:    p_0 = a_0, p_i = a_(i-1) + a_i
    instruction_only: p_i = a_i
    """
    mode = PromptMode(mode)
    actions = plan.actions
    states = plan.states
    prompts = []
    for i, action in enumerate(actions):
        if i == 0 or mode is PromptMode.INSTRUCTION_ONLY:
            text = action
        elif mode is PromptMode.RECAPTION:
            text = join_caption(action, states[i - 1])
        else:
            text = join_caption(actions[i - 1], action)
        prompts.append(StepPrompt(index=i, text=text, mode=mode))
    return prompts
