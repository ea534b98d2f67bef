"""Quadrature rules shared by the assembly and projection code.

Triangle rule: 12-point symmetric rule exact for polynomials of total
degree <= 6 (barycentric points, weights normalized to sum 1, i.e. they
are weights w.r.t. the area measure divided by the triangle area).

Edge rule: Gauss-Legendre on [0,1]; 4 points are exact up to degree 7,
which covers every product of traces appearing in the moment and dual
systems (degree <= 6).
"""
from __future__ import annotations

import numpy as np

__all__ = ["TRI_POINTS", "TRI_WEIGHTS", "edge_rule", "EDGE_POINTS", "EDGE_WEIGHTS"]


def _tri_rule_degree6():
    # symmetric orbits: two 3-point orbits + one 6-point orbit
    a1, w1 = 0.063089014491502228340331602870819, 0.050844906370206816920936809106869
    a2, w2 = 0.249286745170910421291638553107019, 0.116786275726379366046199650633782
    b1 = 0.053145049844816947353249671631398
    b2 = 0.310352451033784405416607733956552
    w3 = 0.082851075618373575193553456420442
    pts = []
    wts = []
    for a, w in ((a1, w1), (a2, w2)):
        for p in ((1 - 2 * a, a, a), (a, 1 - 2 * a, a), (a, a, 1 - 2 * a)):
            pts.append(p)
            wts.append(w)
    c = 1.0 - b1 - b2
    for p in ((b1, b2, c), (b2, b1, c), (b1, c, b2), (b2, c, b1), (c, b1, b2), (c, b2, b1)):
        pts.append(p)
        wts.append(w3)
    return np.array(pts), np.array(wts)


TRI_POINTS, TRI_WEIGHTS = _tri_rule_degree6()


def edge_rule(n):
    """n-point Gauss-Legendre rule on [0,1] (points, weights summing to 1)."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


EDGE_POINTS, EDGE_WEIGHTS = edge_rule(4)
