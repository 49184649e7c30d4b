"""Deterministic template captioner for rendered viewpoints.

Captions name three things the downstream alignment can latch onto: the
viewing direction (from the quaternion octant), the camera distance (depth
tercile), and, for block-centered viewpoints, the focused region. Dataset
descriptors supply the structural vocabulary; the external-LLM path sends
the rendered image plus an instruction prompt instead.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Provenance, Viewpoint


@dataclass(frozen=True)
class DatasetDescriptor:
    """Subject word plus the structure vocabulary used to fill templates."""

    name: str
    subject: str
    structures: tuple[str, ...]
    instruction_prompts: tuple[str, ...] = ()  # sent to an external captioner

    def __post_init__(self):
        if not self.structures:
            raise ValueError("descriptor needs at least one structure term")


CARP_FISH = DatasetDescriptor(
    name="carp_fish",
    subject="carp fish",
    structures=(
        "the skeletal structure", "the spine and fin rays", "the caudal fin",
        "the dorsal fin", "the head region", "the rib cage", "the tail structure",
    ),
    instruction_prompts=(
        "Describe the fish's appearance, including its skeletal structure and "
        "notable features, based on the current viewpoint.",
        "Identify the head, body, and tail regions of the fish and describe "
        "their orientation relative to the viewing perspective.",
        "Which anatomical parts are most clearly visible in this image, and "
        "which are partially hidden?",
    ),
)

SKULL = DatasetDescriptor(
    name="skull",
    subject="human skull",
    structures=(
        "the facial bones", "the eye sockets", "the nasal cavity", "the upper incisors",
        "the dental arch", "the mandible", "the zygomatic arch", "the temporal bone",
    ),
    instruction_prompts=(
        "Describe the anatomical features of the human skull visible in this "
        "volumetric rendering, including bones and cavities.",
        "Is the skull viewed from a frontal, lateral, or oblique angle?",
        "What specific part of the skull appears to be emphasized or in focus "
        "in this view?",
    ),
)

ARGON_BUBBLE = DatasetDescriptor(
    name="argon_bubble",
    subject="argon bubble",
    structures=(
        "the turbulent wake region", "the outer shell", "the boundary layer",
        "vortex structures", "the head-like front region", "the tail-like rear region",
    ),
    instruction_prompts=(
        "Describe the overall flow structure and identify any dominant "
        "directional features present in this rendering.",
        "Describe any observable vortex structures or instabilities visible "
        "from this angle.",
        "Estimate the spatial scale shown in the view. Are we observing a "
        "zoomed-in detail or an overview of the entire volume?",
    ),
)

GENERIC = DatasetDescriptor(
    name="generic",
    subject="volume",
    structures=("the dense core", "the outer boundary", "fine interior detail"),
    instruction_prompts=(
        "Describe the key structural features visible in this rendering.",
    ),
)

BUILTIN_DESCRIPTORS = {d.name: d for d in (CARP_FISH, SKULL, ARGON_BUBBLE, GENERIC)}

UNIFORM_TEMPLATES = (
    "{distance} {direction} view of the {subject} showing overall structure",
    "{distance} {direction} view of the {subject} highlighting {structure}",
    "the {subject} seen from a {distance} {direction} viewpoint, with {structure} visible",
)

BLOCK_TEMPLATES = (
    "{distance} {direction} close-up of {region} of the {subject}",
    "{distance} {direction} view focused on {region} of the {subject}, near {structure}",
)

_SIGNIFICANT = 0.35  # axis weight below which a direction component is ignored


def direction_phrase(eye_direction) -> str:
    """Octant-style name for the unit direction from look-at toward the eye.

    Tokens always appear in vertical, depth, horizontal order so the same
    region gets the same phrase regardless of which axis dominates.
    """
    d = np.asarray(eye_direction, dtype=float)
    d = d / np.linalg.norm(d)
    names = (("right", "left"), ("top", "bottom"), ("rear", "frontal"))
    tokens = []
    for axis in (1, 2, 0):  # vertical, depth, horizontal
        if abs(d[axis]) < _SIGNIFICANT:
            continue
        tokens.append(names[axis][0] if d[axis] > 0 else names[axis][1])
    if not tokens:
        dominant = int(np.argmax(np.abs(d)))
        tokens = [names[dominant][0] if d[dominant] > 0 else names[dominant][1]]
    if tokens == ["top"]:
        return "top-down"
    if tokens == ["bottom"]:
        return "bottom-up"
    return "-".join(tokens)


def distance_phrase(depth: float, d_min: float, d_max: float) -> str:
    t = (depth - d_min) / max(d_max - d_min, 1e-12)
    if t < 1.0 / 3.0:
        return "close-up"
    if t < 2.0 / 3.0:
        return "mid-range"
    return "distant"


def region_phrase(block_index, grid_dims) -> str:
    """Stable human-readable name for a block's position in its grid."""
    words = (("left", "central", "right"), ("lower", "middle", "upper"),
             ("front", "mid", "rear"))
    tokens = []
    for axis in range(3):
        n = grid_dims[axis]
        t = (block_index[axis] + 0.5) / n
        third = 0 if t < 1.0 / 3.0 else (1 if t < 2.0 / 3.0 else 2)
        tokens.append(words[axis][third])
    ijk = ",".join(str(i) for i in block_index)
    return f"the {tokens[1]} {tokens[2]}-{tokens[0]} region (block {ijk})"


def viewpoint_caption(descriptor: DatasetDescriptor, vp: Viewpoint, prov: Provenance,
                      d_min: float, d_max: float, ordinal: int = 0,
                      grid_dims=None) -> str:
    """Deterministic caption for one sampled viewpoint."""
    eye_dir = -vp.forward
    ctx = {
        "subject": descriptor.subject,
        "direction": direction_phrase(eye_dir),
        "distance": distance_phrase(vp.depth, d_min, d_max),
        "structure": descriptor.structures[ordinal % len(descriptor.structures)],
    }
    if prov.kind == "block":
        if grid_dims is None:
            raise ValueError("block-centered caption needs grid dims")
        ctx["region"] = region_phrase(prov.block_index, grid_dims)
        template = BLOCK_TEMPLATES[ordinal % len(BLOCK_TEMPLATES)]
    else:
        template = UNIFORM_TEMPLATES[ordinal % len(UNIFORM_TEMPLATES)]
    return template.format(**ctx)


def instruction_prompt(descriptor: DatasetDescriptor, ordinal: int = 0) -> str:
    prompts = descriptor.instruction_prompts or GENERIC.instruction_prompts
    return prompts[ordinal % len(prompts)]


class CaptionCache:
    """Disk cache for external captions, keyed by image hash and prompt."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _key(self, png_bytes: bytes, prompt: str) -> Path:
        h = hashlib.sha256()
        h.update(png_bytes)
        h.update(prompt.encode("utf-8"))
        return self.directory / f"{h.hexdigest()}.json"

    def get(self, png_bytes: bytes, prompt: str) -> str | None:
        path = self._key(png_bytes, prompt)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["text"]

    def put(self, png_bytes: bytes, prompt: str, text: str) -> None:
        self._key(png_bytes, prompt).write_text(
            json.dumps({"text": text}), encoding="utf-8"
        )


def external_caption(provider, png_bytes: bytes, prompt: str,
                     cache: CaptionCache | None = None) -> str:
    """Ask an external vision-language service to describe the rendering."""
    if cache is not None:
        hit = cache.get(png_bytes, prompt)
        if hit is not None:
            return hit
    text = provider.caption(png_bytes, prompt)
    if cache is not None:
        cache.put(png_bytes, prompt, text)
    return text
