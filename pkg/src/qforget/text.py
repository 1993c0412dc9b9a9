"""tf-idf text model fitted per field (body, title, tags).

idf(t) = ln((1 + N) / (1 + df(t))) + 1, weights are raw term counts times idf,
L2-normalized per document and field.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .textutil import split_html, tokenize

TEXT_FIELDS = ("body", "title", "tags")
DEFAULT_VOCAB_CAPS = {"body": 500, "title": 300, "tags": 200}


def field_text(field: str, title: str, body_html: str, tags: Sequence[str]) -> str:
    """Raw text of one field; code elements are excluded from the body."""
    if field == "body":
        return split_html(body_html)[0]
    if field == "title":
        return title
    if field == "tags":
        return " ".join(tags)
    raise ValueError(f"unknown text field {field!r}")


@dataclass(frozen=True)
class FieldModel:
    field: str
    terms: tuple[str, ...]
    df: np.ndarray
    n_docs: int

    def __post_init__(self):
        object.__setattr__(self, "vocabulary", {t: i for i, t in enumerate(self.terms)})
        idf = np.log((1.0 + self.n_docs) / (1.0 + self.df)) + 1.0
        object.__setattr__(self, "idf", idf)

    def __len__(self) -> int:
        return len(self.terms)

    def transform(self, docs: Sequence[str]) -> sp.csr_matrix:
        vocab = self.vocabulary
        indptr, indices, data = [0], [], []
        for doc in docs:
            counts = Counter(t for t in tokenize(doc) if t in vocab)
            cols = sorted(vocab[t] for t in counts)
            weights = np.array([counts[self.terms[c]] * self.idf[c] for c in cols], dtype=np.float64)
            norm = math.sqrt(float(weights @ weights)) if len(weights) else 0.0
            if norm > 0:
                weights = weights / norm
            indices.extend(cols)
            data.extend(weights.tolist())
            indptr.append(len(indices))
        return sp.csr_matrix(
            (np.array(data, np.float64), np.array(indices, np.int64), np.array(indptr, np.int64)),
            shape=(len(docs), len(self.terms)),
        )


@dataclass(frozen=True)
class TextModel:
    fields: dict[str, FieldModel]

    def feature_names(self, fields: Sequence[str] | None = None) -> list[str]:
        fields = fields or list(self.fields)
        return [f"tfidf_{f}:{t}" for f in fields for t in self.fields[f].terms]

    def transform(self, docs: Mapping[str, Sequence[str]], fields: Sequence[str] | None = None) -> sp.csr_matrix:
        fields = fields or list(self.fields)
        blocks = [self.fields[f].transform(docs[f]) for f in fields]
        if not blocks:
            n = len(next(iter(docs.values()))) if docs else 0
            return sp.csr_matrix((n, 0))
        return sp.hstack(blocks, format="csr")


def fit_field(field: str, docs: Sequence[str], vocab_cap: int) -> FieldModel:
    if len(docs) == 0:
        raise ValueError("cannot fit a text model on an empty corpus")
    df: Counter = Counter()
    for doc in docs:
        df.update(set(tokenize(doc)))
    ranked = sorted(df.items(), key=lambda kv: (-kv[1], kv[0]))[:vocab_cap]
    terms = tuple(sorted(t for t, _ in ranked))
    return FieldModel(field, terms, np.array([df[t] for t in terms], dtype=np.float64), len(docs))


def fit_text_model(
    docs: Mapping[str, Sequence[str]], vocab_caps: Mapping[str, int] | None = None,
) -> TextModel:
    """Fit one vocabulary per field from training documents only."""
    caps = {**DEFAULT_VOCAB_CAPS, **(vocab_caps or {})}
    return TextModel({f: fit_field(f, docs[f], caps[f]) for f in docs})


def transform_text(model: TextModel, docs: Mapping[str, Sequence[str]], fields: Sequence[str] | None = None):
    return model.transform(docs, fields)
