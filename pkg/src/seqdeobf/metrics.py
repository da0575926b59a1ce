"""Edit distance and layer error rate."""

from __future__ import annotations

import numpy as np

from .graph import LayerSequence, LayerWord


def _words(seq) -> list[str]:
    if isinstance(seq, LayerSequence):
        return seq.rendered_words()
    return [w.render() if isinstance(w, LayerWord) else str(w) for w in seq]


def distance_batch(A: np.ndarray, la: np.ndarray, B: np.ndarray, lb: np.ndarray) -> np.ndarray:
    """Levenshtein distances for N integer-coded pairs at once.

    ``A`` is ``(N, La)`` and ``B`` is ``(N, Lb)``, right-padded with any
    value; ``la`` and ``lb`` hold the true lengths.  Rows are filled one at a
    time; insertions within a row are resolved with a running minimum.
    """
    # work column-major: one DP column per pair, so row updates are contiguous
    A = np.ascontiguousarray(np.asarray(A).T)
    B = np.ascontiguousarray(np.asarray(B).T)
    la, lb = np.asarray(la), np.asarray(lb)
    width, n = B.shape[0] + 1, B.shape[1]
    j = np.arange(width, dtype=np.int32)[:, None]
    prev = np.repeat(j, n, axis=1)
    out = prev[lb, np.arange(n)]
    base = np.empty_like(prev)
    for i in range(1, A.shape[0] + 1):
        base[0] = i
        np.minimum(prev[1:] + 1, prev[:-1] + (A[i - 1] != B), out=base[1:])
        base -= j
        cur = np.minimum.accumulate(base, axis=0)
        cur += j
        done = np.flatnonzero(la == i)
        out[done] = cur[lb[done], done]
        prev = cur
    return out


def edit_distance(a, b) -> int:
    """Levenshtein distance over whole words (unit insert/delete/substitute)."""
    a, b = _words(a), _words(b)
    if not a or not b:
        return max(len(a), len(b))
    codes: dict[str, int] = {}
    ia = np.array([[codes.setdefault(w, len(codes)) for w in a]])
    ib = np.array([[codes.setdefault(w, len(codes)) for w in b]])
    return int(distance_batch(ia, np.array([len(a)]), ib, np.array([len(b)]))[0])


def ler(predicted, truth) -> float:
    """Edit distance normalized by the truth length; may exceed 1."""
    t = _words(truth)
    if not t:
        raise ValueError("layer error rate needs a non-empty reference sequence")
    return edit_distance(predicted, t) / len(t)
