from __future__ import annotations

import string

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focus.errors import EmptyLabelError, EmptyPromptError, EmptyProposalError
from focus.proposals import (
    ProposalList,
    RawProposal,
    TaskPrompt,
    build_prompt,
    default_prompt,
    normalize_label,
    parse_proposal,
)

EDGE_PUNCT = ".,;:!-–\"'"


def normalize_oracle(s: str) -> str:
    """Character-level reference: lowercase, repeatedly strip one leading list
    marker and edge punctuation/whitespace, then collapse whitespace runs."""
    t = s.lower().strip()
    while True:
        before = t
        # one leading marker: digits followed by '.' or ')', or -, *, bullet
        i = 0
        while i < len(t) and t[i].isdigit():
            i += 1
        if i > 0 and i < len(t) and t[i] in ".)":
            t = t[i + 1:].lstrip()
        elif t[:1] in ("-", "*", "•"):
            t = t[1:].lstrip()
        while t and (t[0] in EDGE_PUNCT or t[0].isspace()):
            t = t[1:]
        while t and (t[-1] in EDGE_PUNCT or t[-1].isspace()):
            t = t[:-1]
        if t == before:
            break
    out, prev_space = [], False
    for ch in t:
        if ch.isspace():
            if not prev_space:
                out.append(" ")
            prev_space = True
        else:
            out.append(ch)
            prev_space = False
    return "".join(out)


class TestTaskPrompt:
    def test_build_prompt_concatenates(self):
        p = TaskPrompt(
            "Your task is to identify and list all physical objects in the image",
            "Respond with a comma-separated list.",
        )
        rendered = build_prompt(p)
        assert rendered.startswith(p.task_text)
        assert rendered == p.task_text + "\n" + p.addendum

    def test_task_only_prompt(self):
        p = TaskPrompt("Your task is to identify and list all body parts in the image")
        assert build_prompt(p) == p.task_text

    def test_minimal_prompt(self):
        assert build_prompt(TaskPrompt("x")) == "x"

    def test_empty_task_rejected(self):
        with pytest.raises(EmptyPromptError):
            TaskPrompt("   ")

    def test_deterministic(self):
        a = build_prompt(TaskPrompt("task", "extra"))
        b = build_prompt(TaskPrompt("task", "extra"))
        assert a == b

    def test_shipped_default_loads(self):
        p = default_prompt()
        assert p.task_text
        assert p.addendum


class TestNormalizeLabel:
    @pytest.mark.parametrize(
        "raw,expected",
        [
            ("  Belt.", "belt"),
            ("2. Sun   Glasses", "sun glasses"),
            ("belt", "belt"),
            ("- watch", "watch"),
            ("3) Hat", "hat"),
            ("* Tie!", "tie"),
            ('"jacket"', "jacket"),
            ("SCARF;", "scarf"),
            ("license  plate", "license plate"),
        ],
    )
    def test_examples(self, raw, expected):
        assert normalize_label(raw) == expected
        assert normalize_oracle(raw) == expected

    @pytest.mark.parametrize("raw", ["", "   ", "...", "-", "1.", "2)  ."])
    def test_empty_results_raise(self, raw):
        with pytest.raises(EmptyLabelError):
            normalize_label(raw)

    @settings(max_examples=300, deadline=None)
    @given(st.text(max_size=30))
    def test_idempotent_and_matches_oracle(self, s):
        try:
            once = normalize_label(s)
        except EmptyLabelError:
            assert normalize_oracle(s) == ""
            return
        assert normalize_label(once) == once
        assert once == normalize_oracle(s)


class TestParseProposal:
    def raw(self, text):
        return RawProposal(text=text, source="test")

    def test_comma_list(self):
        assert list(parse_proposal(self.raw("belt, sunglasses, jacket"))) == [
            "belt", "sunglasses", "jacket",
        ]

    def test_numbered_lines_dedupe(self):
        assert list(parse_proposal(self.raw("1. Belt\n2. belt\n3. Watch"))) == ["belt", "watch"]

    def test_nothing_parseable(self):
        with pytest.raises(EmptyProposalError):
            parse_proposal(self.raw("...,"))

    def test_mixed_delimiters(self):
        got = parse_proposal(self.raw("hat; scarf. glove\ntie"))
        assert list(got) == ["hat", "scarf", "glove", "tie"]

    def test_verbatim_text_untouched(self):
        raw = self.raw("  Belt, WATCH  ")
        parse_proposal(raw)
        assert raw.text == "  Belt, WATCH  "

    @settings(max_examples=300, deadline=None)
    @given(st.text(max_size=60))
    def test_total_except_declared_error(self, text):
        try:
            result = parse_proposal(self.raw(text))
        except EmptyProposalError:
            return
        labels = list(result)
        assert labels == list(dict.fromkeys(labels))
        for label in labels:
            assert label == normalize_label(label)

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(
            st.text(alphabet=string.ascii_letters + " ", min_size=1, max_size=10),
            min_size=1, max_size=8,
        )
    )
    def test_reparse_of_rendered_list_is_identity(self, raw_labels):
        try:
            first = parse_proposal(self.raw(", ".join(raw_labels)))
        except EmptyProposalError:
            return
        second = parse_proposal(self.raw(first.joined()))
        assert list(second) == list(first)

    @settings(max_examples=200, deadline=None)
    @given(st.text(alphabet=string.printable, max_size=60))
    def test_dedup_preserves_subsequence_order(self, text):
        try:
            result = parse_proposal(self.raw(text))
        except EmptyProposalError:
            return
        # rebuild the normalized fragment stream and check subsequence order
        stream = []
        cleaned = text
        prev = None
        import re
        marker = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s*", re.MULTILINE)
        while cleaned != prev:
            prev = cleaned
            cleaned = marker.sub("", cleaned)
        for fragment in re.split(r"[\n,.;]", cleaned):
            try:
                stream.append(normalize_label(fragment))
            except EmptyLabelError:
                pass
        it = iter(stream)
        assert all(label in it for label in result)


class TestProposalList:
    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            ProposalList(("belt", "belt"))

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            ProposalList(("Belt",))

    def test_rejects_empty(self):
        with pytest.raises(EmptyProposalError):
            ProposalList(())

    def test_normalized_constructor(self):
        got = ProposalList.normalized(["  Belt.", "belt", "2. Watch", "!!"])
        assert list(got) == ["belt", "watch"]

    def test_normalized_all_empty(self):
        with pytest.raises(EmptyProposalError):
            ProposalList.normalized(["...", "-"])
