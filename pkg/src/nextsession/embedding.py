"""Item/feature embedding tables and the fusion network producing item vectors.

Every item vector is ``fuse([id_embedding ‖ feature_embeddings...])`` where
fuse is a one-hidden-layer perceptron (width 2d, tanh) ending at the model
width d.  The same path produces both the input-side vectors consumed by the
encoders and the catalog-side vectors used for scoring — the tables are tied,
so ``output_item_vectors()[i]`` and ``embed_items([i])`` are the same
computation.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class EmbeddingSpace:
    """Lookup tables plus the fusion perceptron.

    feature_schema is a list of (name, vocab_size) pairs; item_features, when
    the schema is non-empty, is an (num_items, num_features) int array giving
    each catalog item's default feature values (used when embed_items is
    called without explicit features, and by output_item_vectors).
    """

    INIT_STD = 0.02

    def __init__(self, num_items, dim, rng, id_dim=None, feature_schema=(),
                 feature_dim=16, item_features=None):
        if num_items < 1:
            raise ValueError("num_items must be >= 1")
        self.num_items = num_items
        self.dim = dim
        self.id_dim = dim if id_dim is None else id_dim
        self.feature_schema = tuple(feature_schema)
        self.feature_dim = feature_dim

        if self.feature_schema:
            if item_features is None:
                raise ValueError("feature_schema given but item_features missing")
            item_features = np.asarray(item_features, dtype=np.int64)
            if item_features.shape != (num_items, len(self.feature_schema)):
                raise ValueError(
                    f"item_features shape {item_features.shape} does not match "
                    f"({num_items}, {len(self.feature_schema)})"
                )
        self.item_features = item_features

        def init(*shape):
            return T.parameter(rng.normal(0.0, self.INIT_STD, size=shape))

        self.item_table = init(num_items, self.id_dim)
        self.feature_tables = {
            name: init(vocab, feature_dim) for name, vocab in self.feature_schema
        }
        in_width = self.id_dim + feature_dim * len(self.feature_schema)
        hidden = 2 * dim
        self.fuse_w1 = init(in_width, hidden)
        self.fuse_b1 = T.parameter(np.zeros(hidden))
        self.fuse_w2 = init(hidden, dim)
        self.fuse_b2 = T.parameter(np.zeros(dim))

    def parameters(self):
        params = {
            "emb.item_table": self.item_table,
            "emb.fuse_w1": self.fuse_w1,
            "emb.fuse_b1": self.fuse_b1,
            "emb.fuse_w2": self.fuse_w2,
            "emb.fuse_b2": self.fuse_b2,
        }
        for name, _ in self.feature_schema:
            params[f"emb.feat.{name}"] = self.feature_tables[name]
        return params

    def embed_items(self, ids, features=None):
        """Fused vectors for a list of item ids -> Tensor (len(ids), dim).

        features, when given, is an (n, num_features) array of feature value
        ids overriding the catalog defaults.  Out-of-vocabulary ids raise.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError("ids must be one-dimensional")
        if ids.size == 0:
            raise ValueError("embed_items needs at least one id")
        bad = (ids < 0) | (ids >= self.num_items)
        if bad.any():
            raise IndexError(
                f"item id {int(ids[bad][0])} out of vocabulary "
                f"(catalog size {self.num_items})"
            )
        parts = [T.gather(self.item_table, ids)]
        if self.feature_schema:
            if features is None:
                features = self.item_features[ids]
            features = np.asarray(features, dtype=np.int64)
            if features.shape != (ids.size, len(self.feature_schema)):
                raise ValueError(
                    f"features shape {features.shape} does not match "
                    f"({ids.size}, {len(self.feature_schema)})"
                )
            for j, (name, vocab) in enumerate(self.feature_schema):
                col = features[:, j]
                if (col < 0).any() or (col >= vocab).any():
                    raise IndexError(f"feature {name!r} value out of range")
                parts.append(T.gather(self.feature_tables[name], col))
        x = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
        h = T.tanh(T.add(T.matmul(x, self.fuse_w1), self.fuse_b1))
        return T.add(T.matmul(h, self.fuse_w2), self.fuse_b2)

    def output_item_vectors(self):
        """Catalog-side vectors for scoring: embed the whole catalog."""
        return self.embed_items(np.arange(self.num_items))
