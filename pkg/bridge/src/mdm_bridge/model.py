"""Pluggable predictors for the bridge server.

A model maps (tokens, t) to one probability vector per masked position,
where masks arrive as -1. The demo model answers from a lookup table: the
row of a bigram table keyed by the nearest unmasked token on the left, or
the marginal column when nothing is observed to the left.
"""

from __future__ import annotations

import json

import numpy as np

WIRE_MASK = -1


class TableLookupModel:
    def __init__(self, k: int, marginal, bigram=None):
        self.k = int(k)
        self.marginal = np.asarray(marginal, dtype=np.float64)
        if self.marginal.shape != (self.k,):
            raise ValueError("marginal must have one entry per token")
        self.marginal = self.marginal / self.marginal.sum()
        if bigram is not None:
            self.bigram = np.asarray(bigram, dtype=np.float64)
            if self.bigram.shape != (self.k, self.k):
                raise ValueError("bigram table must be K x K")
            self.bigram = self.bigram / self.bigram.sum(axis=1, keepdims=True)
        else:
            self.bigram = None

    def predict(self, tokens: list[int], t: float) -> list[tuple[int, list[float]]]:
        out = []
        last_seen: int | None = None
        rows = []
        for pos, tok in enumerate(tokens):
            if tok == WIRE_MASK:
                if last_seen is not None and self.bigram is not None:
                    rows.append((pos, self.bigram[last_seen]))
                else:
                    rows.append((pos, self.marginal))
            else:
                last_seen = tok
        for pos, row in rows:
            out.append((pos, [float(p) for p in row]))
        return out


def load_model(spec_path: str | None) -> TableLookupModel:
    """Build the demo model from a JSON spec file, or a uniform default."""
    if spec_path is None:
        return TableLookupModel(8, [1.0 / 8] * 8)
    with open(spec_path) as f:
        doc = json.load(f)
    return TableLookupModel(doc["k"], doc["marginal"], doc.get("bigram"))
