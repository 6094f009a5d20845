"""Prompt template catalogue: loading, rendering, and the task descriptions.

Templates live as plain-text files (one per template name) under
``nesycd/templates`` and may be overridden by a user-supplied directory.
Rendering is a single substitution pass: placeholder-looking text inside a
bound value is never re-substituted, which keeps rendering injective in the
question text.
"""

from __future__ import annotations

import json
import re
from importlib import resources
from pathlib import Path

TEMPLATE_NAMES = (
    "cot_generation",
    "knowledge_summary_only",
    "knowledge_full",
    "ad_inference",
    "ap_inference",
    "dc_inference",
)

# Placeholders each template must have bound at render time.
REQUIRED_PLACEHOLDERS = {
    "cot_generation": ("Task_Name", "Task_Description", "QUESTION"),
    "knowledge_summary_only": ("QUESTION", "WRONG_RESPONSE"),
    "knowledge_full": ("QUESTION", "WRONG_RESPONSE"),
    "ad_inference": ("KNOWLEDGE", "QUESTION"),
    "ap_inference": ("QUESTION",),
    "dc_inference": ("QUESTION",),
}

_PLACEHOLDER_RE = re.compile(r"\{(Task_Name|Task_Description|QUESTION|WRONG_RESPONSE|KNOWLEDGE)\}")


class TemplateError(ValueError):
    pass


def load_template(name: str, template_dir: str | Path | None = None) -> str:
    """Read a template body; the file's single trailing newline is not part of it."""
    if name not in TEMPLATE_NAMES:
        raise TemplateError(f"unknown template {name!r}; expected one of {TEMPLATE_NAMES}")
    if template_dir is not None:
        text = (Path(template_dir) / f"{name}.txt").read_text(encoding="utf-8")
    else:
        text = (resources.files("nesycd") / "templates" / f"{name}.txt").read_text(encoding="utf-8")
    return text.removesuffix("\n")


def render_template(name: str, template_dir: str | Path | None = None, **bindings: str) -> str:
    """Render a template with every required placeholder bound.

    Raises TemplateError when a required binding is missing, so no output can
    carry an unbound placeholder.
    """
    required = REQUIRED_PLACEHOLDERS[name] if name in REQUIRED_PLACEHOLDERS else ()
    missing = [p for p in required if p not in bindings]
    if missing:
        raise TemplateError(f"template {name!r}: unbound placeholders {missing}")
    body = load_template(name, template_dir)

    def _sub(match: re.Match) -> str:
        key = match.group(1)
        if key not in bindings:
            raise TemplateError(f"template {name!r}: unbound placeholder {{{key}}}")
        return bindings[key]

    return _PLACEHOLDER_RE.sub(_sub, body)


def load_task_catalogue(path: str | Path | None = None) -> dict[str, str]:
    """Task name -> hand-written description map; '_default' is the fallback."""
    if path is not None:
        raw = Path(path).read_text(encoding="utf-8")
    else:
        raw = (resources.files("nesycd") / "templates" / "task_catalogue.json").read_text(
            encoding="utf-8"
        )
    catalogue = json.loads(raw)
    if not isinstance(catalogue, dict):
        raise TemplateError("task catalogue must be a JSON object of task -> description")
    return catalogue


def task_description(task: str, catalogue: dict[str, str]) -> str:
    if task in catalogue:
        return catalogue[task]
    # Fall back to the dataset prefix (e.g. "bbh/navigate" -> "bbh").
    prefix = task.split("/", 1)[0]
    if prefix in catalogue:
        return catalogue[prefix]
    return catalogue.get("_default", "Answer the question accurately")


def render_cot_prompt(
    task: str,
    question: str,
    catalogue: dict[str, str],
    template_dir: str | Path | None = None,
) -> str:
    return render_template(
        "cot_generation",
        template_dir,
        Task_Name=task,
        Task_Description=task_description(task, catalogue),
        QUESTION=question,
    )


def render_knowledge_prompt(
    question: str,
    wrong_response: str,
    variant: str,
    template_dir: str | Path | None = None,
) -> str:
    if variant not in ("summary_only", "full"):
        raise TemplateError(f"unknown knowledge variant {variant!r}")
    name = "knowledge_full" if variant == "full" else "knowledge_summary_only"
    return render_template(name, template_dir, QUESTION=question, WRONG_RESPONSE=wrong_response)


def render_dc_prompt(question: str, template_dir: str | Path | None = None) -> str:
    return render_template("dc_inference", template_dir, QUESTION=question)


def render_ap_prompt(question: str, template_dir: str | Path | None = None) -> str:
    return render_template("ap_inference", template_dir, QUESTION=question)


def render_ad_template(
    question: str, knowledge_block: str, template_dir: str | Path | None = None
) -> str:
    return render_template(
        "ad_inference", template_dir, KNOWLEDGE=knowledge_block, QUESTION=question
    )
