"""Synthetic interaction-log generators.

Each generator emits rows for the raw CSV format understood by
``data.ingest`` (columns user,item,session,timestamp,action).  Timestamps are
session-major: session k of every user precedes session k+1 of every user,
so a chronological prefix of the log keeps an equal number of leading
sessions for everyone.  That keeps time-fraction experiments non-degenerate.

Patterns:

* ``copy-last-session``: every session of a user repeats the user's fixed
  signature items (plus random exposure noise).  Predicting the next session
  is exactly "copy the last one", so the task is learnable at small scale.
* ``rotate-catalog``: each user's positives advance deterministically
  through the catalog from session to session.
* ``hard-negative-sessions``: users come in twin pairs with mostly
  overlapping taste.  Each user clicks the pair's shared items plus a few
  private ones, and is repeatedly exposed to the *twin's* private items.
  Co-occurrence drags the twin's privates right next to the user's own
  positives, so they crowd the ranking unless exposures are used as
  negatives.  A slice of sessions also exposes an own-pool item the user
  did not click that session, so over-weighting exposure demotion punishes
  future positives.
"""

from __future__ import annotations

import csv

import numpy as np

PATTERNS = ("copy-last-session", "rotate-catalog", "hard-negative-sessions")


def _row(user, item, session, ts, positive):
    return (f"u{user:05d}", f"i{item:05d}", f"u{user:05d}-s{session:03d}", ts,
            "click" if positive else "exposure")


def _timestamp(session_idx, user, pos):
    # session-major ordering; generous strides keep everything strictly sorted
    return session_idx * 10_000_000 + user * 1_000 + pos


def copy_last_session(num_users=200, num_sessions=10, catalog=500,
                      positives_per_session=4, exposures_per_session=2, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(num_users):
        signature = rng.choice(catalog, size=positives_per_session, replace=False)
        for s in range(num_sessions):
            pos = 0
            for it in signature:
                rows.append(_row(u, int(it), s, _timestamp(s, u, pos), True))
                pos += 1
            for it in rng.integers(0, catalog, size=exposures_per_session):
                rows.append(_row(u, int(it), s, _timestamp(s, u, pos), False))
                pos += 1
    return rows


def rotate_catalog(num_users=100, num_sessions=8, catalog=300,
                   positives_per_session=3, exposures_per_session=2, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(num_users):
        base = int(rng.integers(0, catalog))
        for s in range(num_sessions):
            pos = 0
            start = base + s * positives_per_session
            for j in range(positives_per_session):
                rows.append(_row(u, (start + j) % catalog, s, _timestamp(s, u, pos), True))
                pos += 1
            for it in rng.integers(0, catalog, size=exposures_per_session):
                rows.append(_row(u, int(it), s, _timestamp(s, u, pos), False))
                pos += 1
    return rows


def hard_negative_sessions(num_users=220, num_sessions=10, shared_items=6,
                           private_items=3, twin_exposures=2,
                           self_exposure_rate=0.5, seed=0):
    """Twin-pair corpus whose exposures are genuinely hard negatives.

    Users come in pairs with mostly overlapping taste: each pair owns
    ``shared_items`` items both twins click, plus ``private_items`` per user
    that only that user clicks.  A session clicks two shared items and one
    own-private item, then exposes ``twin_exposures`` of the twin's private
    items.  Because the twin clicks those same items alongside the shared
    ones, co-occurrence pulls them right next to the user's own positives —
    only the exposure signal says they are not wanted.  With probability
    ``self_exposure_rate`` a session also exposes one own-pool item it did
    not click, so indiscriminate exposure demotion hurts future positives.

    The catalog is sized exactly to the pair count:
    ``(num_users // 2) * (shared_items + 2 * private_items)`` raw items.
    """
    if num_users < 2 or num_users % 2:
        raise ValueError("num_users must be even (users come in pairs)")
    if not 1 <= twin_exposures <= private_items:
        raise ValueError("twin_exposures must be in [1, private_items]")
    if shared_items < 2 or shared_items + private_items < 4:
        raise ValueError("need shared_items >= 2 and shared+private >= 4")
    pairs = num_users // 2
    catalog = pairs * (shared_items + 2 * private_items)
    rng = np.random.default_rng(seed)
    ids = rng.permutation(catalog)
    used = 0
    rows = []
    for p in range(pairs):
        sh = ids[used:used + shared_items]; used += shared_items
        pa = ids[used:used + private_items]; used += private_items
        pb = ids[used:used + private_items]; used += private_items
        for who, own, other in ((2 * p, pa, pb), (2 * p + 1, pb, pa)):
            for s in range(num_sessions):
                clicked = list(rng.choice(sh, 2, replace=False))
                clicked.append(int(rng.choice(own)))
                exposed = list(rng.choice(other, twin_exposures, replace=False))
                if rng.random() < self_exposure_rate:
                    pool = np.setdiff1d(np.concatenate([sh, own]), clicked)
                    exposed.append(int(rng.choice(pool)))
                pos = 0
                for it in clicked:
                    rows.append(_row(who, int(it), s, _timestamp(s, who, pos), True))
                    pos += 1
                for it in exposed:
                    rows.append(_row(who, int(it), s, _timestamp(s, who, pos), False))
                    pos += 1
    return rows


def generate(pattern: str, **kwargs) -> list[tuple]:
    if pattern == "copy-last-session":
        return copy_last_session(**kwargs)
    if pattern == "rotate-catalog":
        return rotate_catalog(**kwargs)
    if pattern == "hard-negative-sessions":
        return hard_negative_sessions(**kwargs)
    raise ValueError(f"unknown pattern {pattern!r}; choose from {PATTERNS}")


def write_log(path: str, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "item", "session", "timestamp", "action"])
        writer.writerows(rows)
