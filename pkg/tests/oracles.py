"""Brute-force reference implementations used by several test modules."""


def brute_force_dtw(cost):
    """Enumerate every boundary-to-boundary monotone path; minimize (total, length)."""
    n, m = cost.shape
    best = None

    def walk(i, j, total, length):
        nonlocal best
        if (i, j) == (n - 1, m - 1):
            if best is None or (total, length) < best:
                best = (total, length)
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            a, b = i + di, j + dj
            if a < n and b < m:
                walk(a, b, total + cost[a, b], length + 1)

    walk(0, 0, cost[0, 0], 1)
    return best[0] / best[1]


def brute_force_edits(ref, hyp):
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    return min(brute_force_edits(ref[1:], hyp[1:]) + (ref[0] != hyp[0]),
               brute_force_edits(ref[1:], hyp) + 1,
               brute_force_edits(ref, hyp[1:]) + 1)
