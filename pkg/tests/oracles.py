"""Independent oracles used by several test modules."""

import numpy as np


def central_difference(f, x: np.ndarray, eps: float = 1e-6, index=None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    With ``index`` (an iterable of flat positions) only those entries are
    estimated and the rest of the result is nan.
    """
    g = np.full(x.shape, np.nan)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    positions = range(flat.size) if index is None else index
    for i in positions:
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-relative difference, guarded for tiny gradients."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


# Reference string transformations, written without looking at the library's.

def ref_reverse(s):
    out = ""
    for ch in s:
        out = ch + out
    return out


def ref_uppercase(s):
    return "".join(chr(ord(c) - 32) if "a" <= c <= "z" else c for c in s)


def ref_duplicate(s):
    out = []
    for c in s:
        out += [c, c]
    return "".join(out)


def ref_rotate(s, k):
    if not s:
        return s
    n = len(s)
    return "".join(s[(i - k) % n] for i in range(n))


def ref_strip_vowels(s):
    return "".join(c for c in s if c not in "aeiou")


def ref_swap_pairs(s):
    out = []
    i = 0
    while i + 1 < len(s):
        out += [s[i + 1], s[i]]
        i += 2
    if i < len(s):
        out.append(s[i])
    return "".join(out)


def ref_sort(s):
    counts = [0] * 128
    for c in s:
        counts[ord(c)] += 1
    return "".join(chr(i) * n for i, n in enumerate(counts))


def ref_append(s, lit):
    return "%s%s" % (s, lit)


def ref_prepend(s, lit):
    return "%s%s" % (lit, s)


def ref_replace(s, old, new):
    return new.join(s.split(old))


def ref_remove(s, ch):
    return "".join(c for c in s if c != ch)


def ref_first_last(s):
    return s[:1] + s[-1:]


REFERENCE = {
    "reverse": ref_reverse,
    "uppercase": ref_uppercase,
    "duplicate": ref_duplicate,
    "rotate": ref_rotate,
    "strip_vowels": ref_strip_vowels,
    "swap_pairs": ref_swap_pairs,
    "sort": ref_sort,
    "append": ref_append,
    "prepend": ref_prepend,
    "replace": ref_replace,
    "remove": ref_remove,
    "first_last": ref_first_last,
}
