"""Prompt assembly and parsing of raw model text into a normalized label list."""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

from .errors import EmptyLabelError, EmptyPromptError, EmptyProposalError

# Characters stripped from both ends of a label, besides whitespace.
_EDGE_PUNCT = ".,;:!-–\"'"
_STRIP_CHARS = _EDGE_PUNCT + " \t\r\n\f\v"

# Leading list markers: "1.", "2)", "-", "*", "•".
_LIST_MARKER = re.compile(r"^(?:\d+[.)]|[-*•])\s*")
_LINE_MARKER = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s*", re.MULTILINE)
_WS_RUN = re.compile(r"\s+")
_SPLIT = re.compile(r"[\n,.;]")


@dataclass(frozen=True)
class TaskPrompt:
    """The user-controllable task text plus optional format/addendum instructions."""

    task_text: str
    addendum: str = ""

    def __post_init__(self):
        if not self.task_text.strip():
            raise EmptyPromptError("task text is empty")


@dataclass(frozen=True)
class RawProposal:
    """Verbatim backend output, stored byte-exact; ``source`` names the backend."""

    text: str
    source: str


@dataclass(frozen=True)
class ProposalList:
    """Ordered, deduplicated, normalized object labels."""

    labels: tuple[str, ...]

    def __post_init__(self):
        if not self.labels:
            raise EmptyProposalError("proposal list has no labels")
        seen = set()
        for label in self.labels:
            if normalize_label(label) != label:
                raise ValueError(f"label not normalized: {label!r}")
            if label in seen:
                raise ValueError(f"duplicate label: {label!r}")
            seen.add(label)
        object.__setattr__(self, "labels", tuple(self.labels))

    @classmethod
    def normalized(cls, labels) -> "ProposalList":
        """Build from arbitrary strings: normalize, skip empties, dedupe in order."""
        out: list[str] = []
        seen: set[str] = set()
        for raw in labels:
            try:
                label = normalize_label(raw)
            except EmptyLabelError:
                continue
            if label not in seen:
                seen.add(label)
                out.append(label)
        if not out:
            raise EmptyProposalError("no labels survived normalization")
        return cls(tuple(out))

    def __iter__(self):
        return iter(self.labels)

    def __len__(self):
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self.labels

    def as_set(self) -> frozenset[str]:
        return frozenset(self.labels)

    def joined(self) -> str:
        return ", ".join(self.labels)


def build_prompt(prompt: TaskPrompt) -> str:
    """Render the full prompt: task text, newline, addendum (omitted when empty)."""
    if not prompt.task_text.strip():
        raise EmptyPromptError("task text is empty")
    if prompt.addendum:
        return prompt.task_text + "\n" + prompt.addendum
    return prompt.task_text


def normalize_label(s: str) -> str:
    """Canonical label form: lowercase, edge punctuation and list markers
    stripped, internal whitespace runs collapsed to single spaces.

    Marker and punctuation stripping iterate to a fixed point, which makes
    the whole function idempotent. Raises EmptyLabelError when nothing is left.
    """
    t = s.lower().strip()
    prev = None
    while t != prev:
        prev = t
        t = _LIST_MARKER.sub("", t, count=1)
        t = t.strip(_STRIP_CHARS)
    t = _WS_RUN.sub(" ", t)
    if not t:
        raise EmptyLabelError(f"label is empty after normalization: {s!r}")
    return t


def parse_proposal(raw: RawProposal) -> ProposalList:
    """Split raw model text into labels and normalize them.

    Line-leading list markers are removed first so that "1." style numbering
    does not get severed into its own fragment by the period split. Fragments
    are then split on newlines, commas, periods, and semicolons, normalized,
    and deduplicated keeping first occurrence.
    """
    text = raw.text
    prev = None
    while text != prev:
        prev = text
        text = _LINE_MARKER.sub("", text)
    out: list[str] = []
    seen: set[str] = set()
    for fragment in _SPLIT.split(text):
        try:
            label = normalize_label(fragment)
        except EmptyLabelError:
            continue
        if label not in seen:
            seen.add(label)
            out.append(label)
    if not out:
        raise EmptyProposalError(
            f"no labels parsed from backend {raw.source!r} output: {raw.text[:80]!r}"
        )
    return ProposalList(tuple(out))


def prompt_digest(prompt_text: str) -> str:
    """Short digest of a rendered prompt, used as a fixture key component."""
    import hashlib

    return hashlib.sha256(prompt_text.encode("utf-8")).hexdigest()[:16]


def default_prompt() -> TaskPrompt:
    """The prompt pair shipped with the package."""
    task = resources.files("focus.assets").joinpath("default_task.txt").read_text("utf-8")
    add = resources.files("focus.assets").joinpath("default_addendum.txt").read_text("utf-8")
    return TaskPrompt(task_text=task.strip(), addendum=add.strip())
