"""Hand-computed corpus BLEU cases.

Each case lists the clipped n-gram precisions worked out by hand and the
resulting scores as closed-form arithmetic: ``(candidates, references,
unsmoothed, smoothed)``.  Smoothing adds one to both counts of orders with
no matches.
"""

import math


def s(text):
    return text.split()


def geo(*p):
    return math.prod(p) ** (1 / len(p))


CASES = [
    # identical
    ([s("a b c d")], [s("a b c d")], 100.0, 100.0),
    # 3/3 2/2 1/1 0/0 ; BP exp(1 - 4/3)
    ([s("the cat sat")], [s("the cat sat down")], 0.0, 100 * math.exp(1 - 4 / 3)),
    # 4/5 3/4 2/3 1/2 ; equal lengths
    ([s("a b c d e")], [s("a b c d f")], 100 * geo(4 / 5, 3 / 4, 2 / 3, 1 / 2), 100 * geo(4 / 5, 3 / 4, 2 / 3, 1 / 2)),
    # 1/4 0/3 0/2 0/1
    ([s("a a a a")], [s("a b c d")], 0.0, 100 * geo(1 / 4, 1 / 4, 1 / 3, 1 / 2)),
    # all precisions 1 ; BP exp(1 - 8/4)
    ([s("a b c d")], [s("a b c d e f g h")], 100 * math.exp(-1), 100 * math.exp(-1)),
    # 4/6 3/5 2/4 1/3 ; longer than reference
    ([s("a b c d a b")], [s("a b c d")], 100 * geo(4 / 6, 3 / 5, 2 / 4, 1 / 3), 100 * geo(4 / 6, 3 / 5, 2 / 4, 1 / 3)),
    # two lines pooled: 7/8 4/6 2/4 1/2
    ([s("a b c d"), s("e f g h")], [s("a b c d"), s("e f x h")],
     100 * geo(7 / 8, 4 / 6, 2 / 4, 1 / 2), 100 * geo(7 / 8, 4 / 6, 2 / 4, 1 / 2)),
    # no overlap: 0/4 0/3 0/2 0/1
    ([s("x y z w")], [s("a b c d")], 0.0, 100 * geo(1 / 5, 1 / 4, 1 / 3, 1 / 2)),
    # empty candidate
    ([[]], [s("a b")], 0.0, 0.0),
    # reversed order: 4/4 0/3 0/2 0/1
    ([s("d c b a")], [s("a b c d")], 0.0, 100 * geo(1, 1 / 4, 1 / 3, 1 / 2)),
]
