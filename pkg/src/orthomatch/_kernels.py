"""Compiled per-placement scoring loops.

Each placement is scored by a fixed sequential loop that depends only on the
window contents, so a score is bit-identical no matter how placement rows are
split across threads.  All loops release the GIL.
"""

import numpy as np
from numba import njit

NEG_INF = -np.inf
POS_INF = np.inf


@njit(nogil=True, cache=True)
def window_moments(image, v, u, n, m):
    """Sum and sum of squares over a window, in the image's own dtype."""
    zero = image[0, 0] - image[0, 0]
    acc = zero
    acc2 = zero
    for t in range(n):
        for s in range(m):
            x = image[v + t, u + s]
            acc += x
            acc2 += x * x
    return acc, acc2


@njit(nogil=True, cache=True)
def window_stats(image, v, u, n, m, exact):
    """Window mean and sum of squared deviations.

    With ``exact`` (integer images) the deviation sum comes from integer
    moments with no rounding, so constant windows give exactly 0.  Float
    images take a second, centered pass instead.
    """
    k = n * m
    acc, acc2 = window_moments(image, v, u, n, m)
    mean = acc / k
    if exact:
        return mean, (k * acc2 - acc * acc) / k
    rss = 0.0
    for t in range(n):
        for s in range(m):
            d = image[v + t, u + s] - mean
            rss += d * d
    return mean, rss


@njit(nogil=True, cache=True)
def sad_at(image, v, u, tpl):
    n, m = tpl.shape
    acc = image[0, 0] - image[0, 0]
    for t in range(n):
        for s in range(m):
            acc += abs(image[v + t, u + s] - tpl[t, s])
    return acc


@njit(nogil=True, cache=True)
def ssd_at(image, v, u, tpl):
    n, m = tpl.shape
    acc = image[0, 0] - image[0, 0]
    for t in range(n):
        for s in range(m):
            d = image[v + t, u + s] - tpl[t, s]
            acc += d * d
    return acc


# Correlation sums below keep four interleaved partial sums along each row;
# the order is fixed, so results do not depend on how rows are scheduled.


@njit(nogil=True, cache=True)
def ncc_at(image, v, u, tdev, tss, exact):
    """Zero-mean NCC; ``tdev`` is the template minus its mean, ``tss`` its sum of squares.

    The numerator uses sum(R * dP), equal to sum((R - Rbar) * dP) because dP sums to 0.
    """
    n, m = tdev.shape
    _, rss = window_stats(image, v, u, n, m, exact)
    if rss <= 0.0:
        return NEG_INF
    m4 = m - m % 4
    a0 = a1 = a2 = a3 = 0.0
    for t in range(n):
        for s in range(0, m4, 4):
            a0 += image[v + t, u + s] * tdev[t, s]
            a1 += image[v + t, u + s + 1] * tdev[t, s + 1]
            a2 += image[v + t, u + s + 2] * tdev[t, s + 2]
            a3 += image[v + t, u + s + 3] * tdev[t, s + 3]
        for s in range(m4, m):
            a0 += image[v + t, u + s] * tdev[t, s]
    # rounding can step just past the Cauchy-Schwarz bound
    return min(1.0, max(-1.0, ((a0 + a1) + (a2 + a3)) / np.sqrt(rss * tss)))


@njit(nogil=True, cache=True)
def wncc_at(image, v, u, weights, tabs, tss, exact):
    """Weighted absolute-deviation correlation; ``tabs`` is ``|template - mean|``."""
    n, m = tabs.shape
    mean, rss = window_stats(image, v, u, n, m, exact)
    if rss <= 0.0:
        return NEG_INF
    m4 = m - m % 4
    a0 = a1 = a2 = a3 = 0.0
    for t in range(n):
        for s in range(0, m4, 4):
            a0 += weights[t, s] * abs(image[v + t, u + s] - mean) * tabs[t, s]
            a1 += weights[t, s + 1] * abs(image[v + t, u + s + 1] - mean) * tabs[t, s + 1]
            a2 += weights[t, s + 2] * abs(image[v + t, u + s + 2] - mean) * tabs[t, s + 2]
            a3 += weights[t, s + 3] * abs(image[v + t, u + s + 3] - mean) * tabs[t, s + 3]
        for s in range(m4, m):
            a0 += weights[t, s] * abs(image[v + t, u + s] - mean) * tabs[t, s]
    return ((a0 + a1) + (a2 + a3)) / np.sqrt(rss * tss)


# Integer variants: with an integer template every sum below is exact, scaled
# by the pixel count k (k*R - sum R instead of R - mean), so a perfect match
# divides x by sqrt(x*x) and lands on exactly 1.


@njit(nogil=True, cache=True)
def ncc_at_int(image, v, u, tpl, tsum, tssk):
    """NCC for ``int64`` image and template; ``tssk = k*sum(P^2) - sum(P)^2``."""
    n, m = tpl.shape
    k = n * m
    acc = image[0, 0] - image[0, 0]
    acc2 = acc
    accp = acc
    for t in range(n):
        for s in range(m):
            x = image[v + t, u + s]
            acc += x
            acc2 += x * x
            accp += x * tpl[t, s]
    rssk = k * acc2 - acc * acc
    if rssk <= 0:
        return NEG_INF
    num = k * accp - acc * tsum
    return min(1.0, max(-1.0, num / np.sqrt(float(rssk) * float(tssk))))


@njit(nogil=True, cache=True)
def wncc_at_int(image, v, u, wtabs, tssk):
    """WNCC for an ``int64`` image; ``wtabs = w * |k*P - sum P|``."""
    n, m = wtabs.shape
    k = n * m
    acc, acc2 = window_moments(image, v, u, n, m)
    rssk = k * acc2 - acc * acc
    if rssk <= 0:
        return NEG_INF
    m4 = m - m % 4
    a0 = a1 = a2 = a3 = 0.0
    for t in range(n):
        for s in range(0, m4, 4):
            a0 += abs(k * image[v + t, u + s] - acc) * wtabs[t, s]
            a1 += abs(k * image[v + t, u + s + 1] - acc) * wtabs[t, s + 1]
            a2 += abs(k * image[v + t, u + s + 2] - acc) * wtabs[t, s + 2]
            a3 += abs(k * image[v + t, u + s + 3] - acc) * wtabs[t, s + 3]
        for s in range(m4, m):
            a0 += abs(k * image[v + t, u + s] - acc) * wtabs[t, s]
    return ((a0 + a1) + (a2 + a3)) / (k * np.sqrt(float(rssk) * float(tssk)))


@njit(nogil=True, cache=True)
def ncc_int_rows(image, tpl, tsum, tssk, v0, v1, out):
    for v in range(v0, v1):
        for u in range(out.shape[1]):
            out[v, u] = ncc_at_int(image, v, u, tpl, tsum, tssk)


@njit(nogil=True, cache=True)
def wncc_int_rows(image, wtabs, tssk, v0, v1, out):
    for v in range(v0, v1):
        for u in range(out.shape[1]):
            out[v, u] = wncc_at_int(image, v, u, wtabs, tssk)


@njit(nogil=True, cache=True)
def sad_rows(image, tpl, v0, v1, out):
    for v in range(v0, v1):
        for u in range(out.shape[1]):
            out[v, u] = sad_at(image, v, u, tpl)


@njit(nogil=True, cache=True)
def ssd_rows(image, tpl, v0, v1, out):
    for v in range(v0, v1):
        for u in range(out.shape[1]):
            out[v, u] = ssd_at(image, v, u, tpl)


@njit(nogil=True, cache=True)
def ncc_rows(image, tdev, tss, exact, v0, v1, out):
    for v in range(v0, v1):
        for u in range(out.shape[1]):
            out[v, u] = ncc_at(image, v, u, tdev, tss, exact)


@njit(nogil=True, cache=True)
def wncc_rows(image, weights, tabs, tss, exact, v0, v1, out):
    for v in range(v0, v1):
        for u in range(out.shape[1]):
            out[v, u] = wncc_at(image, v, u, weights, tabs, tss, exact)


@njit(nogil=True, cache=True)
def rotate_template(local, theta, out, valid):
    """Nearest-neighbour rotation of ``local`` about its center into ``out``.

    Output offset ``o`` samples ``local`` at ``R(theta) o``; samples outside
    the source frame become 0 and are flagged invalid.
    """
    h, w = out.shape
    sh, sw = local.shape
    c = np.cos(theta)
    s = np.sin(theta)
    ci = (w - 1) / 2.0
    cj = (h - 1) / 2.0
    si = (sw - 1) / 2.0
    sj = (sh - 1) / 2.0
    for j in range(h):
        oj = j - cj
        for i in range(w):
            oi = i - ci
            su = int(np.floor(si + c * oi - s * oj + 0.5))
            sv = int(np.floor(sj + s * oi + c * oj + 0.5))
            if 0 <= su < sw and 0 <= sv < sh:
                out[j, i] = local[sv, su]
                valid[j, i] = True
            else:
                out[j, i] = 0.0
                valid[j, i] = False


@njit(nogil=True, cache=True)
def score_particles(image, exact, local, weights, method, us, vs, hs, eps, out):
    """Score one template placement per particle.

    ``us``/``vs`` are the upper-left window pixels, ``hs`` the headings used to
    rotate ``local`` back into the map frame.  ``method`` is 2 for NCC and 3
    for WNCC.  Out-of-bounds or degenerate placements score ``eps``; every
    score is floored at ``eps``.
    """
    n, m = local.shape
    H, W = image.shape
    tpl = np.empty((n, m))
    valid = np.empty((n, m), dtype=np.bool_)
    tdev = np.empty((n, m))
    last_h = np.nan
    tss = 0.0
    for k in range(us.shape[0]):
        u = us[k]
        v = vs[k]
        if u < 0 or v < 0 or u + m > W or v + n > H:
            out[k] = eps
            continue
        if hs[k] != last_h:
            rotate_template(local, hs[k], tpl, valid)
            # out-of-frame samples take the in-frame mean so they carry no deviation
            mean = 0.0
            count = 0
            for t in range(n):
                for s in range(m):
                    if valid[t, s]:
                        mean += tpl[t, s]
                        count += 1
            mean = mean / count if count else 0.0
            for t in range(n):
                for s in range(m):
                    if not valid[t, s]:
                        tpl[t, s] = mean
            tss = 0.0
            for t in range(n):
                for s in range(m):
                    d = tpl[t, s] - mean
                    tss += d * d
                    tdev[t, s] = d if method == 2 else abs(d)
            last_h = hs[k]
        if tss == 0.0:
            out[k] = eps
            continue
        if method == 2:
            score = ncc_at(image, v, u, tdev, tss, exact)
        else:
            score = wncc_at(image, v, u, weights, tdev, tss, exact)
        out[k] = score if score > eps else eps
