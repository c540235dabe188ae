#
# This file is part of the hjhom project.
#
# The contents of this file are subject to the BSD 3-Clause License, the
# full text of which is available in the accompanying LICENSE file at the
# root directory of this project.
#
from collections import namedtuple
import logging
import math

import numpy as np
from scipy import optimize

from .environment import HamiltonianField, uniformGrid
from .jobs import PicklableError

logger = logging.getLogger(__name__)

DEFAULT_C_GAMMA = 10.0
DEFAULT_MOMENTUM_TOL = 1e-12
SCAN_POINTS = 2049
SUBLEVEL_SCAN_POINTS = 257
# H(x, .) is treated as flat around its minimizer when it moves less than this (relative)
FLATNESS_EPS = 64 * np.finfo(float).eps
# Gauss-Legendre nodes integrate the quartic mollifier kernel exactly
MOLLIFIER_NODES = 8

SublevelEndpoints = namedtuple('SublevelEndpoints', ['pMinus', 'pPlus', 'level', 'x'])


class HamiltonianError(PicklableError):
    def __init__(self, message):
        super(HamiltonianError, self).__init__(message)
        self.message = message

    def __str__(self):
        return self.message


class EmptySublevelError(HamiltonianError):
    def __init__(self, x, level, lambdaHat):
        super(EmptySublevelError, self).__init__(
            "level {!r} is below min H(x, .) = {!r} at x = {!r}".format(level, lambdaHat, x))
        self.x = x
        self.level = level
        self.lambdaHat = lambdaHat


class UnsupportedExponentError(HamiltonianError):
    def __init__(self, gamma, needed=2.0):
        super(UnsupportedExponentError, self).__init__(
            "growth exponent gamma = {!r} is not supported here, gamma > {!r} is required".format(gamma, needed))
        self.gamma = gamma


def _scalar(value):
    return float(np.asarray(value, dtype=float))


def _argminInterval(H, x, ps, values, threshold):
    """Outermost points of {p : H(x, p) <= threshold} around the grid minimum."""
    inside = np.nonzero(values <= threshold)[0]
    first, last = int(inside[0]), int(inside[-1])

    def excess(p):
        return _scalar(H(x, p)) - threshold

    left = ps[first]
    if first > 0:
        left = optimize.brentq(excess, ps[first - 1], ps[first], xtol=1e-14)
    right = ps[last]
    if last < ps.size - 1:
        right = optimize.brentq(excess, ps[last], ps[last + 1], xtol=1e-14)
    return left, right


def _slopeRoot(H, x, lo, hi, tol):
    """Root of p -> dH/dp(x, p) when it changes sign strictly across [lo, hi], else None."""
    def slope(p):
        return _scalar(H.slope(x, p))

    if not slope(lo) < 0.0 < slope(hi):
        return None
    return float(optimize.brentq(slope, lo, hi, xtol=tol))


def minProfile(H, x, tol=DEFAULT_MOMENTUM_TOL):
    """Returns (min_p H(x, p), argmin) for a quasiconvex section of H.

    The global basin is located on a grid over [-R, R], R the a-priori
    minimizer radius, refined by bounded Brent and then by a root of dH/dp when
    the slope brackets one. When the section is flat around its minimum, the
    midpoint of the argmin interval is returned.
    """
    radius = H.rHat()
    for _ in range(8):
        ps = np.linspace(-radius, radius, SCAN_POINTS)
        values = np.asarray(H(x, ps), dtype=float)
        k = int(np.argmin(values))
        if 0 < k < ps.size - 1:
            break
        radius *= 2.0
    else:
        k = min(max(k, 1), ps.size - 2)

    result = optimize.minimize_scalar(lambda p: _scalar(H(x, p)), bounds=(ps[k - 1], ps[k + 1]),
                                      method='bounded', options={'xatol': tol})
    pStar, lambdaHat = float(result.x), float(result.fun)
    if values[k] < lambdaHat:
        pStar, lambdaHat = float(ps[k]), float(values[k])
    # Brent stalls where H is flat to rounding; the slope root is sharper there
    root = _slopeRoot(H, x, float(ps[k - 1]), float(ps[k + 1]), tol)
    if root is not None and _scalar(H(x, root)) <= lambdaHat + FLATNESS_EPS * max(1.0, abs(lambdaHat)):
        pStar, lambdaHat = root, min(lambdaHat, _scalar(H(x, root)))

    threshold = lambdaHat + FLATNESS_EPS * max(1.0, abs(lambdaHat))
    delta = max(tol, 1e-9 * max(1.0, abs(pStar)))
    flatHere = _scalar(H(x, pStar - delta)) <= threshold and _scalar(H(x, pStar + delta)) <= threshold
    if flatHere or np.count_nonzero(values <= threshold) > 1:
        # only the basin containing pStar counts
        mask = values <= threshold
        j = int(np.argmin(np.abs(ps - pStar)))
        lo = j
        while lo > 0 and mask[lo - 1]:
            lo -= 1
        hi = j
        while hi < ps.size - 1 and mask[hi + 1]:
            hi += 1
        if mask[j] and hi > lo:
            left, right = _argminInterval(H, x, ps[max(lo - 1, 0):hi + 2], values[max(lo - 1, 0):hi + 2], threshold)
            pStar = 0.5 * (left + right)
            if _scalar(H.slope(x, pStar)) != 0.0:
                root = _slopeRoot(H, x, left, right, tol)
                pStar = pStar if root is None else root
            lambdaHat = min(lambdaHat, _scalar(H(x, pStar)))
    return lambdaHat, pStar


class MinProfile:
    """Tabulated lambdaHat(x), pHat(x) on a grid, with the a-priori radius and
    the sampled joint Lipschitz constant."""
    def __init__(self, H, xs, tol=DEFAULT_MOMENTUM_TOL):
        self.xs = np.asarray(xs, dtype=float)
        if H.xIndependent:
            value, arg = minProfile(H, float(self.xs[0]) if self.xs.size else 0.0, tol)
            self.lambdaHat = np.full(self.xs.shape, value)
            self.pHat = np.full(self.xs.shape, arg)
        else:
            pairs = [minProfile(H, float(x), tol) for x in self.xs]
            self.lambdaHat = np.array([v for v, _ in pairs])
            self.pHat = np.array([p for _, p in pairs])
        self.rHat = H.rHat()

    @property
    def kappaHat(self):
        if self.xs.size < 2:
            return 0.0
        dx = np.diff(self.xs)
        return float(max(np.max(np.abs(np.diff(self.lambdaHat)) / dx), np.max(np.abs(np.diff(self.pHat)) / dx)))


def sublevelEndpoints(H, x, level, tol=DEFAULT_MOMENTUM_TOL, profile=None):
    """Endpoints p-(x) <= pHat(x) <= p+(x) of {p : H(x, p) <= level}."""
    lambdaHat, pHat = profile if profile is not None else minProfile(H, x, tol)
    if level < lambdaHat - tol:
        raise EmptySublevelError(x, level, lambdaHat)
    if level <= lambdaHat:
        return SublevelEndpoints(pHat, pHat, level, x)

    radius = ((max(level, 0.0) + 1.0 / H.alpha0) / H.alpha0) ** (1.0 / H.gamma) * 1.01 + abs(pHat) + 1e-9

    def excess(p):
        return _scalar(H(x, p)) - level

    def outermost(start, end):
        # outermost sample still inside the sublevel, scanning from `end` back towards `start`
        while excess(end) <= 0.0:
            end = start + 2.0 * (end - start)
        ps = np.linspace(start, end, SUBLEVEL_SCAN_POINTS)
        inside = np.nonzero(np.asarray(H(x, ps), dtype=float) <= level)[0]
        j = int(inside[-1]) if inside.size else 0
        return optimize.brentq(excess, ps[j], ps[j + 1], xtol=tol)

    pPlus = outermost(pHat, pHat + radius)
    pMinus = outermost(pHat, pHat - radius)
    return SublevelEndpoints(float(pMinus), float(pPlus), level, x)


def sublevelArrays(H, xs, level, tol=DEFAULT_MOMENTUM_TOL, profile=None):
    """Vectorized sublevelEndpoints over a grid; returns (pMinus, pPlus) arrays.

    `profile` is an optional MinProfile on the same grid.
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    if H.xIndependent and xs.size:
        pair = None if profile is None else (float(profile.lambdaHat[0]), float(profile.pHat[0]))
        ends = sublevelEndpoints(H, float(xs[0]), level, tol, pair)
        return np.full(xs.shape, ends.pMinus), np.full(xs.shape, ends.pPlus)
    pMinus = np.empty(xs.shape)
    pPlus = np.empty(xs.shape)
    for i, x in enumerate(xs):
        pair = None if profile is None else (float(profile.lambdaHat[i]), float(profile.pHat[i]))
        ends = sublevelEndpoints(H, float(x), level, tol, pair)
        pMinus[i], pPlus[i] = ends.pMinus, ends.pPlus
    return pMinus, pPlus


# Explicit bounds

def lipschitzBound(alpha0, alpha1, gamma, kappa, level, cGamma=DEFAULT_C_GAMMA):
    if gamma <= 1:
        raise UnsupportedExponentError(gamma, 1.0)
    diffusionTerm = (kappa * math.sqrt(1.0 + alpha1 + abs(level)) / alpha0) ** (2.0 / (gamma - 1.0))
    growthTerm = (max(1.0 + level * alpha0, 0.0) / alpha0 ** 2) ** (1.0 / gamma)
    return cGamma * (diffusionTerm + growthTerm)


def holderBound(alpha0, gamma, level, cGamma=DEFAULT_C_GAMMA):
    """Returns (K, exponent) with |u(x) - u(y)| <= K |x - y|^exponent."""
    if gamma <= 2:
        raise UnsupportedExponentError(gamma)
    exponent = (gamma - 2.0) / (gamma - 1.0)
    K = cGamma * ((1.0 / alpha0) ** (1.0 / (gamma - 1.0))
                  + (max(1.0 + level * alpha0, 0.0) / alpha0 ** 2) ** (1.0 / gamma))
    return K, exponent


# Strictification

def mollifierKernel(s):
    s = np.asarray(s, dtype=float)
    return np.where(np.abs(s) < 1.0, 15.0 / 16.0 * (1.0 - s * s) ** 2, 0.0)


def penaltyModulus(n, rHat, gamma):
    return 1.0 / (n * (1.0 + rHat + n ** (1.0 / gamma)) ** 4)


def strictifyBound(H, n, radius):
    """Sup-distance bound between H and strictify(H, n) on R x [-radius, radius]."""
    rHat = H.rHat()
    etaN = penaltyModulus(n, rHat, H.gamma)
    spread = radius + rHat
    return 2.0 / n + etaN * (spread ** 4 + spread)


def strictify(H, n, C=None, domain=None):
    """Strictly quasiconvex approximation H_n of a quasiconvex H.

    H_n = max(2/n, G) + eta_n (|q|^4 + |q|) + V with V = min_p H, G = H - V
    and q = p - pHat_n(x), pHat_n the midpoint of {G <= 1/n} mollified at
    radius 1/(2nC). x-dependent Hamiltonians are tabulated on `domain`
    (one period when H is periodic).
    """
    if n < 1:
        raise HamiltonianError("strictification level must be >= 1, got {!r}".format(n))
    rHat = H.rHat()
    etaN = penaltyModulus(n, rHat, H.gamma)
    C = max(1.0, H.alpha1) if C is None else C
    radius = 1.0 / (2.0 * n * C)
    floor = 2.0 / n

    def midpoint(x):
        lambdaHat, pHat = minProfile(H, x)
        ends = sublevelEndpoints(H, x, lambdaHat + 1.0 / n, profile=(lambdaHat, pHat))
        return lambdaHat, 0.5 * (ends.pMinus + ends.pPlus)

    if H.xIndependent:
        V, pHatN = midpoint(0.0)

        def potential(x):
            return np.full(np.shape(x), V)

        def selection(x):
            return np.full(np.shape(x), pHatN)
    else:
        period = H.period
        if period is not None:
            lo, hi = 0.0, float(period)
        else:
            lo, hi = domain if domain is not None else (-50.0, 50.0)
        xs = uniformGrid(lo, hi, min(radius / 4.0, 1e-2))
        table = np.array([midpoint(float(x)) for x in xs])
        Vtab, mtab = table[:, 0], table[:, 1]
        nodes, weights = np.polynomial.legendre.leggauss(MOLLIFIER_NODES)
        weights = weights * mollifierKernel(nodes)

        def potential(x):
            return np.interp(x, xs, Vtab, period=period)

        def raw(x):
            return np.interp(x, xs, mtab, period=period)

        smooth = sum(w * raw(xs + radius * s) for s, w in zip(nodes, weights))

        def selection(x):
            return np.interp(x, xs, smooth, period=period)

    def evaluate(x, p):
        V = potential(x)
        q = np.abs(p - selection(x))
        return np.maximum(floor, H(x, p) - V) + etaN * (q ** 4 + q) + V

    gammaBar = max(H.gamma, 4.0)
    alpha0 = min(H.alpha0 / (1.0 + H.alpha0), etaN / 8.0)
    alpha1 = 2.0 * H.alpha1 + 2.0 + 16.0 * etaN * (1.0 + rHat) ** 4
    logger.debug("strictify n=%d eta_n=%s radius=%s", n, etaN, radius)
    return HamiltonianField(evaluate, alpha0, alpha1, gammaBar, etaN, "strictified", None,
                            H.xIndependent, H.period, parameters=dict(H.parameters, strictify_level=n))
