"""Instruction blocks sent to the text model.

``PE`` asks for the caption with a facial-attribute clause spliced in, with the
face image attached separately.  ``IE`` turns the enhanced caption into one
sentence for an identity-preserving image generator.
"""

from __future__ import annotations

from dataclasses import dataclass
from string import Template

PE_CONSTRAINTS = (
    "preserve the original caption verbatim;",
    "insert a short clause including only facial attributes of the image (approx. age, gender presentation, notable traits);",
    "omit clothing, accessories and background of the image;",
    "ensure the result reads as one natural sentence.",
)

IE_CONSTRAINTS = (
    "preserves the subject's identity and keeps the face fully visible (no occluding items);",
    "retains only profession/role attire, explicit actions, gender or hairstyle cues mentioned in the prompt;",
    "adds nothing not present in the description and focus on the attributes of the prompt subject;",
    "reads as natural third-person narration with no hashtags, camera directions, or meta language.",
)


def _bullets(items: tuple[str, ...]) -> str:
    return "\n".join(f"- {s}" for s in items)


_PE = Template(
    "Inputs\n"
    "1. Original prompt T: ${prompt}\n"
    "2. Image of one person's face (attached)\n"
    "\n"
    "Task\n"
    "Return one revised caption according to the inputs that\n" + _bullets(PE_CONSTRAINTS) + "\n"
)

_IE = Template(
    "Input\n"
    "Original prompt T_c: ${prompt}\n"
    "\n"
    "Task\n"
    "Return one sentence that\n" + _bullets(IE_CONSTRAINTS) + "\n"
)


@dataclass(frozen=True)
class EnhancementTemplate:
    kind: str
    template: Template

    def render(self, text: str) -> str:
        text = text.strip()
        if not text:
            raise ValueError(f"{self.kind} instruction needs a nonempty prompt")
        # substitute() raises on any unresolved slot
        return self.template.substitute(prompt=text)


PE_TEMPLATE = EnhancementTemplate("PE", _PE)
IE_TEMPLATE = EnhancementTemplate("IE", _IE)


def build_pe_instruction(prompt: str) -> str:
    return PE_TEMPLATE.render(prompt)


def build_ie_instruction(enhanced_prompt: str) -> str:
    return IE_TEMPLATE.render(enhanced_prompt)
