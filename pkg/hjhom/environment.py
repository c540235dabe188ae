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
from scipy import optimize, stats

from .jobs import PicklableError

logger = logging.getLogger(__name__)

# A sample of a is treated as a zero of the diffusion when a(x) <= DEFAULT_A_TOL
DEFAULT_A_TOL = 1e-10

PERIODIC = "periodic"
RANDOM = "random"
CUSTOM = "custom"

# Random substreams, one per field, so that adding a field never reshuffles the others
DIFFUSION_STREAM = 0
POTENTIAL_STREAM = 1
DRIFT_STREAM = 2

HYPOTHESES = ("A1", "A2", "H1", "H2", "H3", "qC", "sqC")

ValidationCheck = namedtuple('ValidationCheck', ['hypothesis', 'passed', 'worst', 'witness', 'note'])

# `lo`, `hi`: endpoints of a maximal interval of {a > aTol}
# `loIsZero`, `hiIsZero`: False when the endpoint is a cut made by the window
Component = namedtuple('Component', ['lo', 'hi', 'loIsZero', 'hiIsZero'])


class EnvironmentError_(PicklableError):
    def __init__(self, message):
        super(EnvironmentError_, self).__init__(message)
        self.message = message

    def __str__(self):
        return self.message


class HypothesisViolation(EnvironmentError_):
    def __init__(self, hypothesis, message):
        super(HypothesisViolation, self).__init__("({}) {}".format(hypothesis, message))
        self.hypothesis = hypothesis


class WindowError(EnvironmentError_):
    pass


def uniformGrid(lo, hi, dx):
    count = max(2, int(math.ceil((hi - lo) / dx - 1e-9)))
    return np.linspace(lo, hi, count + 1)


class DiffusionField:
    """The square root of the diffusion coefficient a, with its Lipschitz constant.

    `sqrtA` is a vectorized callable in base coordinates. `anchors`, when
    given, returns the exact zeros of the base field inside [lo, hi].
    Shifting composes an offset and never resamples.
    """
    def __init__(self, sqrtA, kappa, period=None, anchors=None, offset=0.0, extent=None, label="custom"):
        self._sqrtA = sqrtA
        self.kappa = kappa
        self.period = period
        self._anchors = anchors
        self.offset = offset
        self.extent = extent
        self.label = label

    def sqrtA(self, x):
        return self._sqrtA(np.asarray(x, dtype=float) + self.offset)

    def a(self, x):
        s = self.sqrtA(x)
        return s * s

    def shifted(self, y):
        return DiffusionField(self._sqrtA, self.kappa, self.period, self._anchors,
                              self.offset + y, self.extent, self.label)

    def knownZeros(self, lo, hi):
        if self._anchors is None:
            return None
        zeros = np.asarray(self._anchors(lo + self.offset, hi + self.offset), dtype=float) - self.offset
        return zeros[(zeros >= lo) & (zeros <= hi)]

    @staticmethod
    def fromSamples(xs, sqrtAValues, kappa=None):
        xs = np.asarray(xs, dtype=float)
        values = np.asarray(sqrtAValues, dtype=float)
        if kappa is None:
            kappa = float(np.max(np.abs(np.diff(values)) / np.diff(xs)))
        return DiffusionField(lambda x: np.interp(x, xs, values), kappa, label="samples")


class HamiltonianField:
    """H(x, p) with the growth constants of the class it is declared in.

    `evaluate(x, p)` broadcasts like a numpy ufunc. `slope(x, p)` is the
    derivative in p; when omitted it is taken by central differences.
    """
    def __init__(self, evaluate, alpha0, alpha1, gamma, eta=0.0, form="general",
                 slope=None, xIndependent=False, period=None, offset=0.0, parameters=None):
        self._evaluate = evaluate
        self._slope = slope
        self.alpha0 = alpha0
        self.alpha1 = alpha1
        self.gamma = gamma
        self.eta = eta
        self.form = form
        self.xIndependent = xIndependent
        self.period = period
        self.offset = offset
        self.parameters = dict(parameters or {})

    def __call__(self, x, p):
        return self._evaluate(np.asarray(x, dtype=float) + self.offset, np.asarray(p, dtype=float))

    def slope(self, x, p):
        p = np.asarray(p, dtype=float)
        if self._slope is not None:
            return self._slope(np.asarray(x, dtype=float) + self.offset, p)
        h = 1e-6 * np.maximum(1.0, np.abs(p))
        return (self(x, p + h) - self(x, p - h)) / (2.0 * h)

    def shifted(self, y):
        return HamiltonianField(self._evaluate, self.alpha0, self.alpha1, self.gamma, self.eta,
                                self.form, self._slope, self.xIndependent, self.period,
                                self.offset + y, self.parameters)

    def rHat(self):
        """A-priori radius containing every minimizer of H(x, .)."""
        return ((1.0 + self.alpha1 * self.alpha0) / self.alpha0 ** 2) ** (1.0 / self.gamma)


class Environment:
    def __init__(self, diffusion, hamiltonian, seed=0, kind=PERIODIC, spec=None):
        self.diffusion = diffusion
        self.hamiltonian = hamiltonian
        self.seed = seed
        self.kind = kind
        self.spec = dict(spec or {})

    @property
    def period(self):
        return self.diffusion.period

    def a(self, x):
        return self.diffusion.a(x)

    def sqrtA(self, x):
        return self.diffusion.sqrtA(x)

    def H(self, x, p):
        return self.hamiltonian(x, p)

    def shifted(self, y):
        return Environment(self.diffusion.shifted(y), self.hamiltonian.shifted(y), self.seed, self.kind, self.spec)

    def defaultWindow(self):
        if self.period is not None:
            return (0.0, float(self.period))
        if self.diffusion.extent is not None:
            lo, hi = self.diffusion.extent
            return (lo - self.diffusion.offset, hi - self.diffusion.offset)
        return (0.0, 10.0)


def shift(env, y):
    return env.shifted(y)


# Potentials

def periodicBump(height, halfWidth, period=1.0, center=0.5):
    """Cosine bump of the given height centered at `center` (in periods), zero
    outside a relative half-width. Lipschitz constant height*pi/(2*halfWidth*period)."""
    def bump(x):
        s = np.mod(x, period) / period - center
        r = np.abs(s) / halfWidth
        return np.where(r < 1.0, height * np.cos(0.5 * np.pi * np.minimum(r, 1.0)) ** 2, 0.0)
    return bump


def shotNoise(points, width, height):
    """height * (1 - exp(-sum_j k((x - y_j)/width))) with a cosine kernel k on (-1, 1)."""
    points = np.sort(np.asarray(points, dtype=float))

    def field(x):
        x = np.asarray(x, dtype=float)
        flat = np.atleast_1d(x).ravel()
        total = np.zeros_like(flat)
        if points.size and flat.size:
            lo = np.searchsorted(points, flat - width, side='left')
            hi = np.searchsorted(points, flat + width, side='right')
            for k in range(int(np.max(hi - lo))):
                idx = np.minimum(lo + k, points.size - 1)
                r = np.abs(flat - points[idx]) / width
                total += np.where((lo + k < hi) & (r < 1.0), np.cos(0.5 * np.pi * np.minimum(r, 1.0)) ** 2, 0.0)
        return (height * -np.expm1(-total)).reshape(x.shape)
    return field


def distanceTo(points):
    points = np.sort(np.asarray(points, dtype=float))

    def distance(x):
        x = np.asarray(x, dtype=float)
        if points.size == 0:
            return np.full(x.shape, np.inf)
        idx = np.searchsorted(points, x)
        left = points[np.clip(idx - 1, 0, points.size - 1)]
        right = points[np.clip(idx, 0, points.size - 1)]
        return np.minimum(np.abs(x - left), np.abs(x - right))
    return distance


def sampledLipschitz(field, lo, hi, dx):
    xs = uniformGrid(lo, hi, dx)
    values = field(xs)
    return float(np.max(np.abs(np.diff(values))) / (xs[1] - xs[0])) if xs.size > 1 else 0.0


# Hamiltonian families

def _growthConstants(form, gamma, vmin, vmax, cmax, flatWidth, lipV, lipC):
    if form == "double-well":
        alpha0 = min(0.5, 1.0 / max(1.0 - vmin, 1.0))
        alpha1 = max(1.0 + vmax, 4.0, lipV)
        return alpha0, alpha1
    if form == "pinned":
        r = (2.0 * cmax) ** (1.0 / (gamma - 1.0)) if cmax > 0 else 0.0
        alpha0 = min(0.5 / gamma, 1.0 / max(r * cmax * (1.0 - 1.0 / gamma) - vmin, 1.0))
        alpha1 = max(1.0 / gamma, vmax, 1.0 + cmax, lipV + lipC)
        return alpha0, alpha1
    offset = flatWidth + cmax
    lowerFactor = 1.0 if offset == 0 else 2.0 ** (1.0 - gamma)
    alpha0 = min(lowerFactor, 1.0 / max(offset ** gamma - vmin, 1.0))
    upperFactor = 1.0 if cmax == 0 else 2.0 ** (gamma - 1.0)
    upperShift = 0.0 if cmax == 0 else 2.0 ** (gamma - 1.0) * cmax ** gamma
    slopeBound = gamma * max(1.0, cmax) ** (gamma - 1.0)
    driftBound = lipC * gamma * (1.0 + cmax) ** (gamma - 1.0) * 2.0 ** (gamma - 1.0)
    alpha1 = max(upperFactor, upperShift + vmax, slopeBound, lipV + driftBound)
    return alpha0, alpha1


def separableHamiltonian(form, gamma, potential, drift, alpha0, alpha1, eta=0.0,
                         flatWidth=1.0, xIndependent=False, period=None, parameters=None):
    """H(x, p) = G(p - c(x)) + V(x) for the power and flat-bottom families,
    |p|^gamma/gamma - c(x)|p| + V(x) for the pinned family and
    (p^2 - 1)^2 + V(x) for the double well."""
    if form == "power":
        def G(q):
            return np.abs(q) ** gamma

        def Gslope(q):
            return gamma * np.abs(q) ** (gamma - 1.0) * np.sign(q)
    elif form == "flat-bottom":
        def G(q):
            return np.maximum(np.abs(q) - flatWidth, 0.0) ** gamma

        def Gslope(q):
            return gamma * np.maximum(np.abs(q) - flatWidth, 0.0) ** (gamma - 1.0) * np.sign(q)
    elif form == "double-well":
        def G(q):
            return (q * q - 1.0) ** 2

        def Gslope(q):
            return 4.0 * q * (q * q - 1.0)
    elif form == "pinned":
        def evaluatePinned(x, p):
            return np.abs(p) ** gamma / gamma - drift(x) * np.abs(p) + potential(x)

        def slopePinned(x, p):
            return (np.abs(p) ** (gamma - 1.0) - drift(x)) * np.sign(p)
        return HamiltonianField(evaluatePinned, alpha0, alpha1, gamma, eta, "pinned", slopePinned,
                                xIndependent, period, parameters=parameters)
    else:
        raise HypothesisViolation("H1", "unknown Hamiltonian family '{}'".format(form))

    shifted = form in ("power", "flat-bottom")

    def evaluate(x, p):
        q = p - drift(x) if shifted else p
        return G(q) + potential(x)

    def slope(x, p):
        q = p - drift(x) if shifted else p
        return Gslope(q) + 0.0 * potential(x)

    return HamiltonianField(evaluate, alpha0, alpha1, gamma, eta, form, slope, xIndependent, period,
                            parameters=parameters)


def _zeroField(x):
    return np.zeros(np.shape(x))


def _number(spec, key, default):
    value = spec.get(key, default)
    if value is None:
        return None
    try:
        return float(value)
    except (TypeError, ValueError):
        raise HypothesisViolation("H1", "field '{}' is not a number: {!r}".format(key, value))


def _poissonPoints(rng, intensity, lo, hi):
    count = int(stats.poisson(intensity * (hi - lo)).rvs(random_state=rng))
    return np.sort(stats.uniform.rvs(loc=lo, scale=hi - lo, size=count, random_state=rng))


def sampleEnvironment(spec, seed=0):
    """Builds an Environment from a declarative description.

    Recognized keys: family (periodic | random), diffusion (sin2 | poisson |
    constant), hamiltonian (power | flat-bottom | pinned | double-well) and
    the numeric constants documented in README.md. The same (spec, seed)
    always yields the same evaluators.
    """
    family = str(spec.get("family", PERIODIC))
    diffusionName = str(spec.get("diffusion", "sin2" if family == PERIODIC else "poisson"))
    form = str(spec.get("hamiltonian", "power"))
    gamma = _number(spec, "gamma", 3.0)
    if gamma <= 1.0:
        raise HypothesisViolation("H1", "growth exponent gamma must exceed 1, got {}".format(gamma))

    potentialHeight = _number(spec, "potential_height", 0.0)
    potentialWidth = _number(spec, "potential_width", 0.25)
    driftHeight = _number(spec, "drift_height", 0.0)
    driftWidth = _number(spec, "drift_width", 0.25)
    flatWidth = _number(spec, "flat_width", 1.0)

    if family == PERIODIC:
        period = _number(spec, "diffusion_period", 1.0)
        if diffusionName == "sin2":
            diffusion = DiffusionField(lambda x: np.abs(np.sin(np.pi * x / period)), np.pi / period, period,
                                       anchors=lambda lo, hi: period * np.arange(math.ceil(lo / period),
                                                                                 math.floor(hi / period) + 1),
                                       label="sin2")
        elif diffusionName == "constant":
            value = _number(spec, "diffusion_value", 0.25)
            raise HypothesisViolation("A1", "constant diffusion a = {} never vanishes".format(value))
        else:
            raise HypothesisViolation("A1", "unknown periodic diffusion '{}'".format(diffusionName))
        potential = periodicBump(potentialHeight, potentialWidth, period) if potentialHeight else _zeroField
        drift = periodicBump(driftHeight, driftWidth, period) if driftHeight else _zeroField
        lipV = potentialHeight * np.pi / (2.0 * potentialWidth * period)
        lipC = driftHeight * np.pi / (2.0 * driftWidth * period)
        kind = PERIODIC
    elif family == RANDOM:
        period = None
        kappa = _number(spec, "kappa", 1.0)
        if kappa <= 0:
            raise HypothesisViolation("A2", "kappa must be positive, got {}".format(kappa))
        intensity = _number(spec, "poisson_intensity", 1.0)
        extentLength = _number(spec, "extent_length", 400.0)
        extent = (-0.5 * extentLength, 0.5 * extentLength)
        if diffusionName != "poisson":
            if diffusionName == "constant":
                raise HypothesisViolation("A1", "constant diffusion never vanishes")
            raise HypothesisViolation("A1", "unknown random diffusion '{}'".format(diffusionName))
        rng = np.random.default_rng([int(seed), DIFFUSION_STREAM])
        anchors = _poissonPoints(rng, intensity, *extent)
        if anchors.size == 0:
            raise HypothesisViolation("A1", "no Poisson anchor in the generated extent")
        distance = distanceTo(anchors)
        diffusion = DiffusionField(lambda x: np.clip(kappa * distance(x), 0.0, 1.0), kappa, None,
                                   anchors=lambda lo, hi: anchors[(anchors >= lo) & (anchors <= hi)],
                                   extent=extent, label="poisson")
        potentialIntensity = _number(spec, "potential_intensity", 1.0)
        driftIntensity = _number(spec, "drift_intensity", 1.0)
        potential = _zeroField
        drift = _zeroField
        if potentialHeight:
            potentialRng = np.random.default_rng([int(seed), POTENTIAL_STREAM])
            potential = shotNoise(_poissonPoints(potentialRng, potentialIntensity, *extent),
                                  potentialWidth, potentialHeight)
        if driftHeight:
            driftRng = np.random.default_rng([int(seed), DRIFT_STREAM])
            drift = shotNoise(_poissonPoints(driftRng, driftIntensity, *extent), driftWidth, driftHeight)
        lipV = 1.05 * sampledLipschitz(potential, extent[0], extent[1], potentialWidth / 64.0) if potentialHeight else 0.0
        lipC = 1.05 * sampledLipschitz(drift, extent[0], extent[1], driftWidth / 64.0) if driftHeight else 0.0
        kind = RANDOM
    else:
        raise HypothesisViolation("A1", "unknown environment family '{}'".format(family))

    vmin = min(0.0, potentialHeight)
    vmax = max(0.0, potentialHeight)
    alpha0, alpha1 = _growthConstants(form, gamma, vmin, vmax, abs(driftHeight), flatWidth if form == "flat-bottom" else 0.0,
                                      lipV, lipC)
    alpha0 = _number(spec, "alpha0", alpha0)
    alpha1 = _number(spec, "alpha1", alpha1)
    eta = _number(spec, "eta", 0.0)
    if alpha0 <= 0 or alpha1 <= 0:
        raise HypothesisViolation("H1", "growth constants must be positive, got alpha0={} alpha1={}".format(alpha0, alpha1))
    if eta < 0:
        raise HypothesisViolation("sqC", "eta must be nonnegative, got {}".format(eta))
    if form == "double-well":
        gamma = 4.0

    xIndependent = not potentialHeight and not driftHeight
    hamiltonian = separableHamiltonian(form, gamma, potential, drift, alpha0, alpha1, eta, flatWidth,
                                       xIndependent, period,
                                       parameters={"potential_height": potentialHeight, "drift_height": driftHeight})
    logger.debug("sampled %s environment (%s, %s) seed=%s alpha0=%s alpha1=%s",
                 kind, diffusion.label, form, seed, alpha0, alpha1)
    return Environment(diffusion, hamiltonian, int(seed), kind, spec)


# Validation

class ValidationReport:
    def __init__(self, checks, window, dx, pBox):
        self.checks = list(checks)
        self.window = window
        self.dx = dx
        self.pBox = pBox

    @property
    def passed(self):
        return all(check.passed for check in self.checks)

    def check(self, hypothesis):
        return next(c for c in self.checks if c.hypothesis == hypothesis)

    def failed(self):
        return [c.hypothesis for c in self.checks if not c.passed]

    def toText(self):
        lines = ["validation window = [{!r}, {!r}]".format(*self.window),
                 "validation dx = {!r}".format(self.dx),
                 "validation momentum box = [{!r}, {!r}]".format(-self.pBox, self.pBox)]
        for c in self.checks:
            lines.append("{} = {} worst={!r} witness={} {}".format(
                c.hypothesis, "pass" if c.passed else "FAIL", c.worst, c.witness, c.note).rstrip())
        return "\n".join(lines) + "\n"


def _worst(excess, *coordinates):
    index = np.unravel_index(int(np.argmax(excess)), excess.shape)
    witness = tuple(float(c[i]) for c, i in zip(coordinates, index))
    return float(excess[index]), witness


def validateEnvironment(env, dx=0.01, tol=1e-9, window=None, pBox=None, aTol=DEFAULT_A_TOL, momentumSamples=401):
    """Sampling-based check of the structural hypotheses; never raises."""
    H = env.hamiltonian
    window = window or env.defaultWindow()
    xs = uniformGrid(window[0], window[1], dx)
    if pBox is None:
        pBox = max(2.0 * H.rHat(), 2.0)
    ps = np.linspace(-pBox, pBox, momentumSamples)
    values = H(xs[:, None], ps[None, :])
    scale = np.maximum(1.0, np.abs(values))
    checks = []

    a = env.a(xs)
    features = zeroFeatures(env.diffusion, window[0], window[1], aTol, dx)
    minIndex = int(np.argmin(a))
    hasZero = bool(features)
    notDegenerate = bool(np.max(a) > aTol)
    note = "" if hasZero else "no zero of a in the window"
    if not notDegenerate:
        note = "a vanishes identically"
    checks.append(ValidationCheck("A1", hasZero and notDegenerate, float(a[minIndex]), (float(xs[minIndex]),), note))

    sqrtA = env.sqrtA(xs)
    ratio = np.abs(np.diff(sqrtA)) - env.diffusion.kappa * np.diff(xs)
    worst, witness = _worst(ratio, xs[:-1])
    checks.append(ValidationCheck("A2", worst <= tol * max(1.0, env.diffusion.kappa * dx), worst, witness,
                                  "kappa = {!r}".format(env.diffusion.kappa)))

    powers = np.abs(ps) ** H.gamma
    lower = (H.alpha0 * powers[None, :] - 1.0 / H.alpha0) - values
    upper = values - H.alpha1 * (powers[None, :] + 1.0)
    excess = np.maximum(lower, upper) / scale
    worst, witness = _worst(excess, xs, ps)
    checks.append(ValidationCheck("H1", worst <= tol, worst, witness, ""))

    dp = np.diff(ps)
    pSum = np.abs(ps[:-1]) + np.abs(ps[1:]) + 1.0
    excess = (np.abs(np.diff(values, axis=1)) - H.alpha1 * pSum[None, :] ** (H.gamma - 1.0) * dp[None, :]) / scale[:, :-1]
    worst, witness = _worst(excess, xs, ps[:-1])
    checks.append(ValidationCheck("H2", worst <= tol, worst, witness, ""))

    excess = (np.abs(np.diff(values, axis=0)) - H.alpha1 * (powers[None, :] + 1.0) * np.diff(xs)[:, None]) / scale[:-1, :]
    worst, witness = _worst(excess, xs[:-1], ps)
    checks.append(ValidationCheck("H3", worst <= tol, worst, witness, ""))

    # a sublevel is an interval iff no sample rises above both the best value on its left and on its right
    prefixMin = np.minimum.accumulate(values, axis=1)
    suffixMin = np.minimum.accumulate(values[:, ::-1], axis=1)[:, ::-1]
    barrier = np.full(values.shape, -np.inf)
    barrier[:, 1:-1] = (values[:, 1:-1] - np.maximum(prefixMin[:, :-2], suffixMin[:, 2:])) / scale[:, 1:-1]
    worst, witness = _worst(barrier, xs, ps)
    checks.append(ValidationCheck("qC", worst <= tol, max(worst, 0.0), witness, ""))

    if H.eta > 0:
        argmin = np.argmin(values, axis=1)
        steps = np.diff(values, axis=1) - H.eta * dp[None, :]
        column = np.arange(dp.size)[None, :]
        rightSide = column >= argmin[:, None] + 1
        leftSide = column + 1 <= argmin[:, None] - 1
        deficit = np.where(rightSide, -steps, np.where(leftSide, np.diff(values, axis=1) + H.eta * dp[None, :], -np.inf))
        deficit = deficit / scale[:, :-1]
        worst, witness = _worst(deficit, xs, ps[:-1])
        checks.append(ValidationCheck("sqC", worst <= tol, max(worst, 0.0), witness, "eta = {!r}".format(H.eta)))
    else:
        checks.append(ValidationCheck("sqC", True, 0.0, (), "eta = 0, not required"))

    report = ValidationReport(checks, window, dx, pBox)
    logger.debug("validation of %s: failed=%s", env.diffusion.label, report.failed())
    return report


# Zero set and components

def _refineMinimum(diffusion, lo, hi):
    result = optimize.minimize_scalar(lambda x: float(diffusion.a(x)), bounds=(lo, hi), method='bounded',
                                      options={'xatol': 1e-13})
    return float(result.x), float(diffusion.a(result.x))


def _plateauEdge(diffusion, inside, outside, aTol):
    return float(optimize.brentq(lambda x: float(diffusion.a(x)) - aTol, inside, outside, xtol=1e-14))


def zeroFeatures(diffusion, lo, hi, aTol=DEFAULT_A_TOL, dx=1e-3):
    """Sorted (left, right) pairs: points (left == right) and plateaus of {a <= aTol}."""
    xs = uniformGrid(lo, hi, dx)
    a = diffusion.a(xs)
    below = a <= aTol
    candidates = []
    plateaus = []

    i = 0
    while i < xs.size:
        if not below[i]:
            i += 1
            continue
        j = i
        while j + 1 < xs.size and below[j + 1]:
            j += 1
        if j > i:
            left = xs[i] if i == 0 else _plateauEdge(diffusion, xs[i], xs[i - 1], aTol)
            right = xs[j] if j == xs.size - 1 else _plateauEdge(diffusion, xs[j], xs[j + 1], aTol)
            plateaus.append((left, right))
        else:
            x, value = _refineMinimum(diffusion, xs[max(i - 1, 0)], xs[min(i + 1, xs.size - 1)])
            candidates.append((x, value, False) if value <= a[i] else (xs[i], a[i], False))
        i = j + 1

    interior = np.arange(1, xs.size - 1)
    minima = interior[(a[interior] <= a[interior - 1]) & (a[interior] <= a[interior + 1]) & ~below[interior]]
    for i in minima:
        x, value = _refineMinimum(diffusion, xs[i - 1], xs[i + 1])
        if value <= aTol:
            candidates.append((x, value, False))

    known = diffusion.knownZeros(lo, hi)
    if known is not None:
        candidates.extend((float(z), 0.0, True) for z in known)

    candidates.sort()
    points = []
    for x, value, exact in candidates:
        if any(left - 0.5 * dx <= x <= right + 0.5 * dx for left, right in plateaus):
            continue
        if points and x - points[-1][0] <= 0.5 * dx:
            previous = points[-1]
            if (exact and not previous[2]) or (exact == previous[2] and value < previous[1]):
                points[-1] = (x, value, exact)
            continue
        points.append((x, value, exact))

    features = [(x, x) for x, _, _ in points] + plateaus
    return sorted(features)


class ComponentDecomposition:
    def __init__(self, window, components, features, aTol, dx):
        self.window = window
        self.components = list(components)
        self.features = list(features)
        self.aTol = aTol
        self.dx = dx

    @property
    def hasZero(self):
        return bool(self.features)

    @property
    def flags(self):
        return [] if self.hasZero else ["no-zero"]

    def zeroSamples(self):
        samples = []
        for left, right in self.features:
            if right > left:
                samples.extend(uniformGrid(left, right, self.dx))
            else:
                samples.append(left)
        return np.array(samples, dtype=float)

    def trimmedWindow(self):
        if not self.hasZero:
            raise WindowError("window [{}, {}] contains no zero of a".format(*self.window))
        return (self.features[0][0], self.features[-1][1])

    def interiorComponents(self):
        return [c for c in self.components if c.loIsZero and c.hiIsZero]

    def componentGrid(self, component):
        return uniformGrid(component.lo, component.hi, self.dx)

    def windowGrid(self, trimmed=True):
        lo, hi = self.trimmedWindow() if trimmed else self.window
        pieces = [self.componentGrid(c) for c in self.components if c.lo >= lo and c.hi <= hi]
        pieces.append(self.zeroSamples())
        grid = np.unique(np.concatenate(pieces))
        return grid[(grid >= lo) & (grid <= hi)]


def decomposeComponents(env, window, aTol=DEFAULT_A_TOL, dx=1e-3):
    lo, hi = float(window[0]), float(window[1])
    if not hi > lo:
        raise WindowError("window [{}, {}] has no length".format(lo, hi))
    features = zeroFeatures(env.diffusion, lo, hi, aTol, dx)
    components = []
    if not features:
        logger.warning("window [%s, %s] contains no zero of a", lo, hi)
        components.append(Component(lo, hi, False, False))
    else:
        if features[0][0] > lo:
            components.append(Component(lo, features[0][0], False, True))
        for (_, right), (left, _) in zip(features[:-1], features[1:]):
            if left > right:
                components.append(Component(right, left, True, True))
        if features[-1][1] < hi:
            components.append(Component(features[-1][1], hi, True, False))
    logger.debug("window [%s, %s]: %d zero features, %d components", lo, hi, len(features), len(components))
    return ComponentDecomposition((lo, hi), components, features, aTol, dx)


def endpointDrift(first, second):
    """Largest endpoint displacement between two decompositions of the same window."""
    if len(first.components) != len(second.components):
        return math.inf
    drift = 0.0
    for c1, c2 in zip(first.components, second.components):
        drift = max(drift, abs(c1.lo - c2.lo), abs(c1.hi - c2.hi))
    return drift
