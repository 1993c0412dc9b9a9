"""HTML stripping and tokenization shared by the store and the featurizers."""
from __future__ import annotations

import re
from html.parser import HTMLParser

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


class _Stripper(HTMLParser):
    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.prose: list[str] = []
        self.code: list[str] = []
        self._code_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag == "code":
            self._code_depth += 1

    def handle_endtag(self, tag):
        if tag == "code" and self._code_depth:
            self._code_depth -= 1

    def handle_data(self, data):
        (self.code if self._code_depth else self.prose).append(data)


def split_html(html: str) -> tuple[str, str]:
    """Return ``(prose_text, code_text)`` of an HTML fragment with tags removed.

    Text inside ``<code>`` elements goes to ``code_text``; everything else to
    ``prose_text``.  Character references are decoded.
    """
    if "<" not in html and "&" not in html:
        return html, ""
    p = _Stripper()
    p.feed(html)
    p.close()
    return "".join(p.prose), "".join(p.code)


def stripped_length(html: str) -> int:
    """Number of characters left after removing tags (code contents included)."""
    prose, code = split_html(html)
    return len(prose) + len(code)


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop tokens shorter than two characters."""
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if len(t) >= 2]
