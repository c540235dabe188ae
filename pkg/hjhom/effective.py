#
# This file is part of the hjhom project.
#
# The contents of this file are subject to the BSD 3-Clause License, the
# full text of which is available in the accompanying LICENSE file at the
# root directory of this project.
#
from collections import namedtuple
import logging

import numpy as np
import pandas as pd
from scipy import integrate
from scipy.interpolate import PchipInterpolator

from .cell import CellError, MINUS, PLUS, solverFor
from .environment import ValidationCheck, Environment
from .hamlib import lipschitzBound, penaltyModulus, strictify, strictifyBound
from .jobs import PicklableError, scheduleJobs

logger = logging.getLogger(__name__)

# `lambdaMax` None means the smaller of alpha1 (thetaMax^gamma + 1) and the
# sampled max of H(x, +-thetaMax)
LevelGridSpec = namedtuple('LevelGridSpec', ['tolLambda', 'uniformCount', 'thetaMax', 'lambdaMax'])
LevelGridSpec.__new__.__defaults__ = (1e-7, 96, 2.0, None)

EnsembleTheta = namedtuple('EnsembleTheta', ['thetaMinus', 'thetaPlus', 'stdMinus', 'stdPlus', 'samples'])

StabilityRow = namedtuple('StabilityRow', ['n', 'eta', 'hamiltonianDistance', 'distanceBound', 'hbarDistance'])

AUDIT_GRID_POINTS = 401


class CurveError(PicklableError):
    def __init__(self, message):
        super(CurveError, self).__init__(message)
        self.message = message

    def __str__(self):
        return self.message


class CurveRangeError(CurveError):
    def __init__(self, theta, lo, hi):
        super(CurveRangeError, self).__init__(
            "theta = {!r} is outside the tabulated range [{!r}, {!r}], increase lambda_max".format(theta, lo, hi))
        self.theta = theta
        self.lo = lo
        self.hi = hi


class DiagnosticFailure(CurveError):
    pass


class EffectiveCurve:
    def __init__(self, lambda0, levels, thetaMinus, thetaPlus, thetaMinus0, thetaPlus0,
                 window, seeds=(), criticalBracket=None):
        self.lambda0 = float(lambda0)
        self.levels = np.asarray(levels, dtype=float)
        self.thetaMinus = np.asarray(thetaMinus, dtype=float)
        self.thetaPlus = np.asarray(thetaPlus, dtype=float)
        self.thetaMinus0 = float(thetaMinus0)
        self.thetaPlus0 = float(thetaPlus0)
        self.window = tuple(window)
        self.seeds = list(seeds)
        self.criticalBracket = criticalBracket or (self.lambda0, self.lambda0)

        rightX = np.concatenate([[self.thetaPlus0], self.thetaPlus])
        rightY = np.concatenate([[self.lambda0], self.levels])
        keep = np.concatenate([[True], np.diff(rightX) > 0])
        self._right = PchipInterpolator(rightX[keep], rightY[keep], extrapolate=False)
        leftX = np.concatenate([self.thetaMinus[::-1], [self.thetaMinus0]])
        leftY = np.concatenate([self.levels[::-1], [self.lambda0]])
        keep = np.concatenate([np.diff(leftX) > 0, [True]])
        self._left = PchipInterpolator(leftX[keep], leftY[keep], extrapolate=False)

    @property
    def windowLength(self):
        return self.window[1] - self.window[0]

    @property
    def flatWidth(self):
        return self.thetaPlus0 - self.thetaMinus0

    @property
    def thetaRange(self):
        return float(self.thetaMinus[-1]), float(self.thetaPlus[-1])

    def __call__(self, theta):
        return evaluateHbar(self, theta)

    def levelTable(self):
        return pd.DataFrame({'lambda': self.levels, 'theta_minus': self.thetaMinus, 'theta_plus': self.thetaPlus},
                            columns=['lambda', 'theta_minus', 'theta_plus'])

    def hbarTable(self, thetas):
        thetas = np.asarray(thetas, dtype=float)
        return pd.DataFrame({'theta': thetas, 'hbar': evaluateHbar(self, thetas)}, columns=['theta', 'hbar'])


def evaluateHbar(curve, theta):
    thetas = np.asarray(theta, dtype=float)
    lo, hi = curve.thetaRange
    outside = (thetas < lo) | (thetas > hi)
    if np.any(outside):
        raise CurveRangeError(float(np.atleast_1d(thetas)[np.argmax(np.atleast_1d(outside))]), lo, hi)
    values = np.full(thetas.shape, curve.lambda0)
    right = thetas > curve.thetaPlus0
    left = thetas < curve.thetaMinus0
    values = np.where(right, curve._right(np.where(right, thetas, curve.thetaPlus0)), values)
    values = np.where(left, curve._left(np.where(left, thetas, curve.thetaMinus0)), values)
    return float(values) if values.ndim == 0 else values


def windowAverage(profile):
    return float(integrate.trapezoid(profile.f, profile.grid) / (profile.grid[-1] - profile.grid[0]))


def thetaPair(env, window, level, settings=None, threads=1, rtol=None, atol=None):
    """Window averages of the minus and plus branch derivatives at `level`.

    Blow-down, obstruction and junction mismatches of either corrector propagate.
    """
    solver = solverFor(env, window, settings, threads)
    minus = solver.buildCorrector(level, MINUS, rtol=rtol, atol=atol)
    plus = solver.buildCorrector(level, PLUS, rtol=rtol, atol=atol)
    return windowAverage(minus), windowAverage(plus)


def ensembleThetaPair(environments, window, level, settings=None, threads=1):
    pairs = scheduleJobs(lambda index: thetaPair(environments[index], window, level, settings),
                         [(index,) for index in range(len(environments))], threads)
    samples = np.array(pairs)
    return EnsembleTheta(float(samples[:, 0].mean()), float(samples[:, 1].mean()),
                         float(samples[:, 0].std(ddof=1)) if len(pairs) > 1 else 0.0,
                         float(samples[:, 1].std(ddof=1)) if len(pairs) > 1 else 0.0, samples)


def calibrateCGamma(env, window, levels, settings=None, threads=1):
    """Smallest C_gamma for which lipschitzBound covers max |f+-| of the
    correctors at every level."""
    H = env.hamiltonian
    solver = solverFor(env, window, settings, threads)
    ratio = 0.0
    for level in levels:
        unit = lipschitzBound(H.alpha0, H.alpha1, H.gamma, env.diffusion.kappa, level, 1.0)
        for branch in (MINUS, PLUS):
            profile = solver.buildCorrector(level, branch)
            ratio = max(ratio, float(np.max(np.abs(profile.f))) / unit)
    logger.debug("calibrated C_gamma = %r over %d levels", ratio, len(levels))
    return ratio


def levelCap(env, window, thetaMax):
    H = env.hamiltonian
    bound = H.alpha1 * (thetaMax ** H.gamma + 1.0)
    xs = np.linspace(window[0], window[1], 513)
    sampled = float(np.max(np.maximum(H(xs, thetaMax), H(xs, -thetaMax))))
    return min(bound, 1.05 * sampled + 0.05)


def levelGrid(lambda0, gridSpec, lambdaMax):
    geometric = []
    k = 0
    while lambda0 + gridSpec.tolLambda * 2.0 ** k < lambdaMax:
        geometric.append(lambda0 + gridSpec.tolLambda * 2.0 ** k)
        k += 1
    uniform = np.linspace(lambda0, lambdaMax, gridSpec.uniformCount + 1)[1:]
    return np.unique(np.concatenate([geometric, uniform]))


def flatEndpoints(lambda0, levels, thetaMinus, thetaPlus):
    """Limits of theta+- as the level decreases to lambda0: quadratic
    extrapolation from the three smallest levels, bounded by the table inf/sup."""
    def extrapolate(values):
        x = levels[:3]
        total = 0.0
        for i in range(3):
            weight = 1.0
            for j in range(3):
                if j != i:
                    weight *= (lambda0 - x[j]) / (x[i] - x[j])
            total += weight * values[i]
        return total

    plus0 = min(extrapolate(thetaPlus), float(np.min(thetaPlus)))
    minus0 = max(extrapolate(thetaMinus), float(np.max(thetaMinus)))
    if minus0 > plus0:
        minus0 = plus0 = 0.5 * (minus0 + plus0)
    return minus0, plus0


def _thetaTable(solver, levels, threads, rtol=None, atol=None):
    """theta-(level), theta+(level) for every level; a level whose correctors
    cannot be assembled fails the table with the level named."""
    def job(level):
        try:
            return thetaPair(solver.env, solver, level, rtol=rtol, atol=atol)
        except CellError as e:
            raise DiagnosticFailure("corrector at level {!r}: {}".format(level, e))
    solver.warmProfiles()
    results = np.array(scheduleJobs(job, [(level,) for level in levels], threads))
    return np.asarray(levels), results[:, 0], results[:, 1]


def _monotone(thetaMinus, thetaPlus):
    return bool(np.all(np.diff(thetaPlus) > 0) and np.all(np.diff(thetaMinus) < 0))


def buildEffectiveCurve(env, window, gridSpec=None, tol=None, settings=None, threads=1, critical=None):
    """Critical value, theta+-(lambda) on a level grid and the flat part.

    `critical` is an optional precomputed CriticalValue.
    """
    gridSpec = gridSpec or LevelGridSpec()
    solver = solverFor(env, window, settings)
    if critical is None:
        critical = solver.criticalValue(gridSpec.tolLambda if tol is None else tol)
    lambda0 = critical.level
    trimmed = solver.decomposition.trimmedWindow()
    lambdaMax = gridSpec.lambdaMax or levelCap(env, trimmed, gridSpec.thetaMax)
    levels = levelGrid(critical.hi, gridSpec, lambdaMax)

    levels, thetaMinus, thetaPlus = _thetaTable(solver, levels, threads)
    if not _monotone(thetaMinus, thetaPlus):
        logger.warning("theta curves not monotone, retrying with tighter integration tolerances")
        s = solver.settings
        levels, thetaMinus, thetaPlus = _thetaTable(solver, levels, threads, s.rtol / 100.0, s.atol / 100.0)
        if not _monotone(thetaMinus, thetaPlus):
            raise DiagnosticFailure("theta curves are not monotone in the level after refinement")
    if levels.size < 3:
        raise DiagnosticFailure("fewer than three usable levels above the critical value")

    minus0, plus0 = flatEndpoints(lambda0, levels, thetaMinus, thetaPlus)
    logger.debug("effective curve: lambda0=%r flat part [%r, %r], %d levels", lambda0, minus0, plus0, levels.size)
    return EffectiveCurve(lambda0, levels, thetaMinus, thetaPlus, minus0, plus0, trimmed,
                          seeds=[env.seed], criticalBracket=(critical.lo, critical.hi))


class AuditReport:
    def __init__(self, checks, thetas):
        self.checks = list(checks)
        self.thetas = thetas

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def check(self, name):
        return next(c for c in self.checks if c.hypothesis == name)

    def toText(self):
        lines = ["audit grid = {} points on [{!r}, {!r}]".format(self.thetas.size, self.thetas[0], self.thetas[-1])]
        for c in self.checks:
            lines.append("{} = {} worst={!r} witness={} {}".format(
                c.hypothesis, "pass" if c.passed else "FAIL", c.worst, c.witness, c.note).rstrip())
        return "\n".join(lines) + "\n"


def auditCurve(curve, alpha0, alpha1, gamma, tol=1e-6, points=AUDIT_GRID_POINTS):
    lo, hi = curve.thetaRange
    thetas = np.linspace(lo, hi, points)
    values = evaluateHbar(curve, thetas)
    scale = np.maximum(1.0, np.abs(values))
    checks = []

    powers = np.abs(thetas) ** gamma
    excess = np.maximum(alpha0 * powers - 1.0 / alpha0 - values, values - alpha1 * (powers + 1.0)) / scale
    i = int(np.argmax(excess))
    checks.append(ValidationCheck("H1", excess[i] <= tol, float(excess[i]), (float(thetas[i]),), ""))

    prefixMin = np.minimum.accumulate(values)
    suffixMin = np.minimum.accumulate(values[::-1])[::-1]
    barrier = (values[1:-1] - np.maximum(prefixMin[:-2], suffixMin[2:])) / scale[1:-1]
    i = int(np.argmax(barrier))
    checks.append(ValidationCheck("quasiconvex", barrier[i] <= tol, max(float(barrier[i]), 0.0),
                                  (float(thetas[i + 1]),), "sublevels are intervals"))

    steps = np.diff(values)
    leftWing = thetas[1:] <= curve.thetaMinus0
    rightWing = thetas[:-1] >= curve.thetaPlus0
    wrong = np.concatenate([steps[leftWing], -steps[rightWing]])
    worst = float(np.max(wrong)) if wrong.size else 0.0
    checks.append(ValidationCheck("monotone", worst <= tol, worst, (), "wings"))

    lipschitz = float(np.max(np.abs(steps) / np.diff(thetas)))
    checks.append(ValidationCheck("lipschitz", bool(np.isfinite(lipschitz)), lipschitz, (), "sampled"))

    i = int(np.argmin(values))
    gapToMin = abs(float(values[i]) - curve.lambda0)
    onFlat = curve.thetaMinus0 - (thetas[1] - thetas[0]) <= thetas[i] <= curve.thetaPlus0 + (thetas[1] - thetas[0])
    checks.append(ValidationCheck("minimum", gapToMin <= tol and onFlat, gapToMin, (float(thetas[i]),),
                                  "lambda0 = {!r}".format(curve.lambda0)))

    roundTrip = max(float(np.max(np.abs(evaluateHbar(curve, curve.thetaPlus) - curve.levels))),
                    float(np.max(np.abs(evaluateHbar(curve, curve.thetaMinus) - curve.levels))))
    checks.append(ValidationCheck("round-trip", roundTrip <= tol * max(1.0, float(curve.levels[-1])),
                                  roundTrip, (), ""))

    sandwich = bool(np.all(curve.thetaMinus < curve.thetaMinus0) and np.all(curve.thetaPlus > curve.thetaPlus0))
    checks.append(ValidationCheck("flat-sandwich", sandwich, curve.flatWidth, (), ""))
    return AuditReport(checks, thetas)


def stabilityStudy(env, window, levels, thetas, gridSpec=None, settings=None, threads=1, radius=3.0):
    """Effective curves of strictify(H, n) against the one of H on a theta grid."""
    gridSpec = gridSpec or LevelGridSpec(thetaMax=float(np.max(np.abs(thetas))) * 1.1)
    thetas = np.asarray(thetas, dtype=float)
    base = buildEffectiveCurve(env, window, gridSpec, settings=settings, threads=threads)
    reference = evaluateHbar(base, thetas)
    ps = np.linspace(-radius, radius, 1201)
    xs = np.linspace(window[0], window[1], 65)
    H = env.hamiltonian
    rows = []
    for n in levels:
        Hn = strictify(H, n, domain=window)
        strictEnv = Environment(env.diffusion, Hn, env.seed, env.kind, env.spec)
        distance = float(np.max(np.abs(Hn(xs[:, None], ps[None, :]) - H(xs[:, None], ps[None, :]))))
        curve = buildEffectiveCurve(strictEnv, window, gridSpec, settings=settings, threads=threads)
        hbarDistance = float(np.max(np.abs(evaluateHbar(curve, thetas) - reference)))
        rows.append(StabilityRow(n, penaltyModulus(n, H.rHat(), H.gamma), distance,
                                 strictifyBound(H, n, radius), hbarDistance))
        logger.debug("strictify n=%d: |H - H_n| = %r, |Hbar - Hbar_n| = %r", n, distance, hbarDistance)
    return rows
