"""Unsampled top-K evaluation, the alpha sweep, the data-scaling harness,
and the attention-complexity benchmark.

All ranking is exact: every user's vector is scored against the full catalog
and sorted, with ties broken by ascending item id so reports are reproducible
across platforms.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .data import DatasetSplit, Session, UserSplit, encoder_views

DEFAULT_CUTOFFS = (10, 100, 500)


def top_k(user_vec: np.ndarray, item_vecs: np.ndarray, k: int) -> np.ndarray:
    """Exact top-k item ids by dot product, descending; ties by ascending id."""
    scores = item_vecs @ user_vec
    n = scores.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds catalog size {n}")
    order = np.lexsort((np.arange(n), -scores))
    return order[:k]


def recall_at_k(ranked, targets, k: int) -> float:
    tset = set(int(t) for t in targets)
    if not tset:
        raise ValueError("recall needs a non-empty target set")
    hits = sum(1 for it in ranked[:k] if int(it) in tset)
    return hits / len(tset)


def ndcg_at_k(ranked, targets, k: int) -> float:
    """Binary-relevance NDCG with 1-based positions.

    DCG sums 1/log2(p+1) over hit positions p <= k; the ideal DCG places all
    targets first, so IDCG = sum_{p=1}^{min(k, |targets|)} 1/log2(p+1).
    """
    tset = set(int(t) for t in targets)
    if not tset:
        raise ValueError("ndcg needs a non-empty target set")
    dcg = 0.0
    for p, it in enumerate(ranked[:k], start=1):
        if int(it) in tset:
            dcg += 1.0 / np.log2(p + 1)
    ideal = sum(1.0 / np.log2(p + 1) for p in range(1, min(k, len(tset)) + 1))
    return dcg / ideal


@dataclass
class EvalReport:
    protocol: str
    cutoffs: tuple
    recall: dict
    ndcg: dict
    num_users: int
    skipped_users: int
    config_hash: str

    def to_json(self) -> str:
        blob = {
            "protocol": self.protocol,
            "cutoffs": list(self.cutoffs),
            "recall": {str(k): v for k, v in self.recall.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "num_users": self.num_users,
            "skipped_users": self.skipped_users,
            "config_hash": self.config_hash,
        }
        return json.dumps(blob, sort_keys=True, indent=2)

    def table(self) -> str:
        lines = [
            f"protocol: {self.protocol}   users: {self.num_users} "
            f"(skipped {self.skipped_users})",
            f"{'K':>6} {'Recall@K':>12} {'NDCG@K':>12}",
        ]
        for k in self.cutoffs:
            lines.append(f"{k:>6} {self.recall[k]:>12.6f} {self.ndcg[k]:>12.6f}")
        return "\n".join(lines)


def evaluate(model, split: DatasetSplit, cutoffs=DEFAULT_CUTOFFS, config_hash="") -> EvalReport:
    """Rank the full catalog for every user and average the metrics."""
    if model.cfg.num_items != split.catalog_size:
        raise ValueError(
            f"catalog mismatch: model has {model.cfg.num_items} items, "
            f"dataset has {split.catalog_size}"
        )
    cutoffs = tuple(sorted(set(cutoffs)))
    k_max = min(max(cutoffs), split.catalog_size)
    with T.no_grad():
        item_matrix = model.embedding.output_item_vectors().data
    recall_sums = {k: 0.0 for k in cutoffs}
    ndcg_sums = {k: 0.0 for k in cutoffs}
    n = 0
    skipped = 0
    for user in split.users:
        views = encoder_views(user.train_sessions)
        if not views or not user.targets:
            skipped += 1
            continue
        with T.no_grad():
            uvec = model.user_vector(views).data
        ranked = top_k(uvec, item_matrix, k_max)
        for k in cutoffs:
            recall_sums[k] += recall_at_k(ranked, user.targets, k)
            ndcg_sums[k] += ndcg_at_k(ranked, user.targets, k)
        n += 1
    if n == 0:
        raise ValueError("no evaluable users in split")
    return EvalReport(
        protocol=split.protocol,
        cutoffs=cutoffs,
        recall={k: recall_sums[k] / n for k in cutoffs},
        ndcg={k: ndcg_sums[k] / n for k in cutoffs},
        num_users=n,
        skipped_users=skipped + split.stats.get("skipped_users", 0),
        config_hash=config_hash,
    )


# ---------------------------------------------------------------------------
# sweeps and harnesses
# ---------------------------------------------------------------------------


def alpha_sweep(split: DatasetSplit, cfg, alphas, catalog=None, log_fn=None):
    """Train one model per rank-loss weight (same seed) and evaluate each.

    Returns one row per alpha; a failed cell carries an "error" field and the
    sweep continues.
    """
    from .trainer import train

    if len(alphas) < 1:
        raise ValueError("alpha_sweep needs at least one alpha")
    rows = []
    for alpha in alphas:
        cell_cfg = replace(cfg, loss=replace(cfg.loss, alpha=float(alpha)))
        try:
            result = train(split, cell_cfg, catalog=catalog, log_fn=log_fn)
            report = evaluate(result.model, split)
            rows.append(
                {
                    "alpha": float(alpha),
                    "recall": dict(report.recall),
                    "ndcg": dict(report.ndcg),
                    "num_users": report.num_users,
                }
            )
        except Exception as e:  # keep sweeping; record the failure
            rows.append({"alpha": float(alpha), "error": f"{type(e).__name__}: {e}"})
        if log_fn is not None:
            log_fn({"sweep_alpha": float(alpha), "done": True})
    return rows


def sweep_table(rows, cutoffs=DEFAULT_CUTOFFS) -> str:
    """Delimited (tab) table of sweep rows, plot-ready."""
    header = ["alpha"]
    for k in cutoffs:
        header.append(f"recall@{k}")
    for k in cutoffs:
        header.append(f"ndcg@{k}")
    header.append("error")
    lines = ["\t".join(header)]
    for row in rows:
        cells = [repr(row["alpha"])]
        if "error" in row:
            cells += [""] * (2 * len(cutoffs)) + [row["error"]]
        else:
            cells += [repr(row["recall"][k]) for k in cutoffs]
            cells += [repr(row["ndcg"][k]) for k in cutoffs]
            cells.append("")
        lines.append("\t".join(cells))
    return "\n".join(lines)


def _clip_sessions_to(sessions: list[Session], max_ts: int) -> list[Session]:
    out = []
    for s in sessions:
        keep = [i for i, ts in enumerate(s.timestamps) if ts <= max_ts]
        if not keep:
            continue
        out.append(
            Session(
                session_id=s.session_id,
                items=[s.items[i] for i in keep],
                positives=[s.positives[i] for i in keep],
                timestamps=[s.timestamps[i] for i in keep],
                features=[s.features[i] for i in keep] if s.features else [],
            )
        )
    return out


def scaling_run(split: DatasetSplit, cfg, fractions, catalog=None, recall_k=500, log_fn=None):
    """Train on chronological prefixes of the train views, evaluate on the
    fixed targets, and report (train_items, Recall@recall_k) per fraction.

    train_items counts the positive interactions available for training at
    that fraction.  A fraction whose prefix leaves no trainable user is
    marked skipped.
    """
    from .trainer import train

    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fractions must be in (0, 1], got {f}")

    all_ts = [
        ts
        for user in split.users
        for s in user.train_sessions
        for ts in s.timestamps
    ]
    if not all_ts:
        raise ValueError("split has no train interactions")
    t0, t1 = min(all_ts), max(all_ts)

    rows = []
    for f in sorted(fractions):
        max_ts = t1 if f == 1.0 else int(t0 + f * (t1 - t0))
        users = []
        train_items = 0
        for user in split.users:
            clipped = _clip_sessions_to(user.train_sessions, max_ts)
            if not clipped:
                continue
            train_items += sum(s.num_positives() for s in clipped)
            users.append(UserSplit(user.user_id, clipped, user.targets))
        row = {"fraction": f, "train_items": train_items}
        if not users:
            row["skipped"] = "no users with train data at this fraction"
            rows.append(row)
            continue
        sub = DatasetSplit(
            protocol=split.protocol,
            users=users,
            catalog_size=split.catalog_size,
            stats={**split.stats, "skipped_users": 0},
        )
        try:
            result = train(sub, cfg, catalog=catalog, log_fn=log_fn)
            report = evaluate(
                result.model, sub, cutoffs=(min(recall_k, split.catalog_size),)
            )
            row[f"recall@{recall_k}"] = report.recall[min(recall_k, split.catalog_size)]
            row["num_users"] = report.num_users
        except Exception as e:
            row["skipped"] = f"{type(e).__name__}: {e}"
        rows.append(row)
        if log_fn is not None:
            log_fn(row)
    rows.sort(key=lambda r: r["train_items"])
    return rows


def scaling_table(rows, recall_k=500) -> str:
    lines = ["\t".join(["fraction", "train_items", f"recall@{recall_k}", "skipped"])]
    for row in rows:
        lines.append(
            "\t".join(
                [
                    repr(row["fraction"]),
                    str(row["train_items"]),
                    repr(row.get(f"recall@{recall_k}", "")),
                    row.get("skipped", ""),
                ]
            )
        )
    return "\n".join(lines)


def _pin_blas_threads():
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:
        import contextlib

        return contextlib.nullcontext()


def complexity_bench(n_items: int, session_len: int, dim=64, layers=2, heads=2,
                     repeats=3, seed=0) -> dict:
    """Attention cost at item granularity vs session granularity.

    Pair counts are analytic (n^2 vs (n/M)^2, ratio exactly M^2); the time
    ratio is measured by running the same sequence encoder forward over n
    tokens and over n/M tokens, single-threaded, best of ``repeats``.
    """
    from .sequence_encoder import SequenceEncoder, SseConfig

    if n_items % session_len:
        raise ValueError("session_len must divide n_items")
    m_sessions = n_items // session_len
    item_pairs = n_items * n_items
    session_pairs = m_sessions * m_sessions
    pair_ratio = item_pairs / session_pairs

    rng = np.random.default_rng(seed)
    enc = SequenceEncoder(
        SseConfig(
            backbone="causal_attention",
            layers=layers,
            heads=heads,
            dropout=0.0,
            max_positions=n_items,
        ),
        dim,
        rng,
    )

    def timed(m):
        tokens = T.Tensor(rng.normal(0, 1, size=(m, dim)).astype(np.float32))
        with T.no_grad():
            enc.encode(tokens)  # warm-up
            best = np.inf
            for _ in range(repeats):
                start = time.perf_counter()
                enc.encode(tokens)
                best = min(best, time.perf_counter() - start)
        return best

    with _pin_blas_threads():
        item_time = timed(n_items)
        session_time = timed(m_sessions)

    return {
        "n_items": n_items,
        "session_len": session_len,
        "item_level_pairs": item_pairs,
        "session_level_pairs": session_pairs,
        "pair_ratio": pair_ratio,
        "item_time_s": item_time,
        "session_time_s": session_time,
        "time_ratio": item_time / session_time,
    }
