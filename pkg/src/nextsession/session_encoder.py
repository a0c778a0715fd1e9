"""Collapse each session's item vectors into one session token.

Aggregator variants: mean, max, max_relu (ReLU applied to the item vectors,
then max pooling), recurrent (gated recurrent cell over the session's items
in log order, last hidden state), and attention (bidirectional self-attention
within the session — no causal mask, since items in one session arrive
together and carry no internal ordering — followed by mean pooling).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import EncoderBlock, GRUCell, full_mask

KINDS = ("mean", "max", "max_relu", "recurrent", "attention")


@dataclass
class IseConfig:
    kind: str = "mean"
    layers: int = 1  # attention only
    heads: int = 2   # attention only


class SessionEncoder:
    def __init__(self, cfg: IseConfig, dim: int, rng):
        if cfg.kind not in KINDS:
            raise ValueError(f"unknown session aggregator {cfg.kind!r}")
        self.cfg = cfg
        self.dim = dim
        self.gru = None
        self.blocks = []
        if cfg.kind == "recurrent":
            self.gru = GRUCell(dim, dim, rng, name="ise.gru")
        elif cfg.kind == "attention":
            self.blocks = [
                EncoderBlock(dim, cfg.heads, rng, name=f"ise.block{i}")
                for i in range(cfg.layers)
            ]

    def parameters(self):
        params = {}
        if self.gru is not None:
            params.update(self.gru.parameters())
        for b in self.blocks:
            params.update(b.parameters())
        return params

    def encode_sessions(self, item_vecs, lengths):
        """(n, d) item vectors + per-session lengths -> (m, d) session tokens.

        lengths must be positive and sum to n; rows are grouped contiguously
        and chronologically.
        """
        lengths = list(lengths)
        if any(ln < 1 for ln in lengths):
            raise ValueError("empty session passed to the session encoder")
        n = item_vecs.shape[0]
        if sum(lengths) != n:
            raise ValueError(
                f"session lengths sum to {sum(lengths)} but got {n} item rows"
            )
        seg_ids = np.repeat(np.arange(len(lengths)), lengths)

        kind = self.cfg.kind
        if kind == "mean":
            return T.segment_reduce(item_vecs, seg_ids, "mean")
        if kind == "max":
            return T.segment_reduce(item_vecs, seg_ids, "max")
        if kind == "max_relu":
            return T.segment_reduce(T.relu(item_vecs), seg_ids, "max")

        # sequential variants work session by session
        tokens = []
        start = 0
        for ln in lengths:
            rows = T.gather(item_vecs, np.arange(start, start + ln))
            if kind == "recurrent":
                tokens.append(self.gru.run(rows)[-1])
            else:  # attention
                x = rows
                mask = full_mask(ln)
                for block in self.blocks:
                    x = block(x, mask)
                tokens.append(T.segment_reduce(x, np.zeros(ln, dtype=np.int64), "mean"))
            start += ln
        return tokens[0] if len(tokens) == 1 else T.concat(tokens, axis=0)
