"""Prompt template loading and placeholder substitution.

Templates ship verbatim inside the package; several contain literal braces,
so substitution is plain string replacement rather than str.format.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

_PACKAGE = "skillplay.templates"


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    """Return the template text (trailing newline stripped)."""
    path = resources.files(_PACKAGE).joinpath(f"{name}.txt")
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise KeyError(f"unknown prompt template {name!r}") from None
    return text.rstrip("\n")


def render(template_name: str, **substitutions: str) -> str:
    """Fill {placeholder} slots by literal replacement."""
    text = load_template(template_name)
    for key, value in substitutions.items():
        slot = "{" + key + "}"
        if slot not in text:
            raise KeyError(f"template {template_name!r} has no slot {slot}")
        text = text.replace(slot, value)
    return text


def solver_messages(problem: str) -> list[dict[str, str]]:
    return [
        {"role": "system", "content": load_template("solver_system")},
        {"role": "user", "content": problem},
    ]


def challenger_messages() -> list[dict[str, str]]:
    return [
        {"role": "system", "content": load_template("challenger_system")},
        {"role": "user", "content": load_template("challenger_user")},
    ]


def code_generation_messages(question: str) -> list[dict[str, str]]:
    return [{"role": "user", "content": render("code_generation", question=question)}]


def answer_check_messages(answer: str, reference: str) -> list[dict[str, str]]:
    return [
        {"role": "system", "content": load_template("answer_check_system")},
        {
            "role": "user",
            "content": render("answer_check_user", answer=answer, response=reference),
        },
    ]


def repetition_judge_messages(new_problem: str, references: list[str]) -> list[dict[str, str]]:
    numbered = "\n".join(f"{i + 1}. {r}" for i, r in enumerate(references))
    return [
        {
            "role": "user",
            "content": render(
                "repetition_judge",
                reference_problems=numbered,
                new_problem=new_problem,
            ),
        }
    ]
