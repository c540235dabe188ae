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
import pandas as pd

from .effective import evaluateHbar
from .hamlib import MinProfile, lipschitzBound
from .jobs import PicklableError, scheduleJobs

logger = logging.getLogger(__name__)

LAX_FRIEDRICHS = "llf"
ENGQUIST_OSHER = "eo"

LINEAR = "linear"
PERIODIC = "periodic"

# `dt` None means the largest stable step times `safety`;
# `halfWidth` is the half length of the linear-boundary domain [-X, X]
SchemeConfig = namedtuple('SchemeConfig', ['dx', 'dt', 'flavor', 'halfWidth', 'horizon', 'boundary',
                                           'tailFraction', 'gapTol', 'safety', 'checkEvery', 'periods'])
SchemeConfig.__new__.__defaults__ = (0.02, None, ENGQUIST_OSHER, 20.0, 100.0, LINEAR, 0.5, 0.02, 0.9, 16, 1)

EffectiveEstimate = namedtuple('EffectiveEstimate', ['hL', 'hU', 'slope', 'conclusive', 'run'])

ComparisonRow = namedtuple('ComparisonRow', ['theta', 'hbar', 'estimate', 'hL', 'hU', 'error', 'relativeError',
                                             'onFlat', 'passed'])

MOMENTUM_SAMPLES = 201


class SchemeError(PicklableError):
    def __init__(self, message):
        super(SchemeError, self).__init__(message)
        self.message = message

    def __str__(self):
        return self.message


class CflViolationError(SchemeError):
    def __init__(self, number):
        super(CflViolationError, self).__init__(
            "time step violates the monotonicity condition, CFL number {!r} > 1".format(number))
        self.number = number


class SolverBlowupError(SchemeError):
    def __init__(self, step, reason="non-finite values"):
        super(SolverBlowupError, self).__init__("solver aborted at step {}: {}".format(step, reason))
        self.step = step


def gradientBox(env, theta, xs):
    """Momentum radius the scheme's gradients have to stay in."""
    H = env.hamiltonian
    level = float(np.max(H(xs, theta)))
    radius = 1.5 * (max(level + 1.0 / H.alpha0, 0.0) / H.alpha0) ** (1.0 / H.gamma)
    return max(radius, abs(theta) + 1.0)


class ParabolicScheme:
    """Explicit monotone scheme for u_t = a u_xx + H(x, u_x), u(0, x) = theta x + perturbation.

    With periodic boundaries the state is the periodic part v = u - theta x
    on whole periods; with linear ones it is u on [-X, X] with ghost cells of
    slope theta.
    """
    def __init__(self, env, theta, config):
        if config.flavor not in (LAX_FRIEDRICHS, ENGQUIST_OSHER):
            raise SchemeError("unknown numerical Hamiltonian '{}'".format(config.flavor))
        if config.boundary not in (LINEAR, PERIODIC):
            raise SchemeError("unknown boundary treatment '{}'".format(config.boundary))
        self.env = env
        self.H = env.hamiltonian
        self.theta = float(theta)
        self.periodic = config.boundary == PERIODIC
        dx = config.dx
        if self.periodic:
            if env.period is None:
                raise SchemeError("periodic boundaries need a periodic environment")
            count = int(round(config.periods * env.period / dx))
            dx = config.periods * env.period / count
            self.x = dx * np.arange(count)
            self.center = 0
        else:
            half = int(math.ceil(config.halfWidth / dx))
            self.x = dx * np.arange(-half, half + 1)
            self.center = half
        self.dx = dx
        self.a = env.a(self.x)
        self.pBox = gradientBox(env, self.theta, self.x)

        ps = np.linspace(-self.pBox, self.pBox, MOMENTUM_SAMPLES)
        slopes = np.abs(self.H.slope(self.x[:, None], ps[None, :]))
        self.alpha = np.max(slopes, axis=1)
        maxSlope = float(np.max(self.alpha))
        if config.flavor == ENGQUIST_OSHER:
            profile = MinProfile(self.H, self.x)
            self.pHat = profile.pHat
            self.lambdaHat = profile.lambdaHat
            dissipation = 0.0
        else:
            dissipation = maxSlope
        rate = 2.0 * float(np.max(self.a)) / dx ** 2 + (maxSlope + dissipation) / dx
        if config.dt is None:
            dt = config.safety / rate
        else:
            dt = config.dt
            if dt * rate > 1.0:
                raise CflViolationError(dt * rate)
        self.steps = max(1, int(math.ceil(config.horizon / dt)))
        self.dt = config.horizon / self.steps
        self.cflNumber = self.dt * rate
        self.config = config._replace(dx=dx, dt=self.dt)
        if not self.periodic and config.halfWidth < maxSlope * config.horizon:
            logger.warning("domain half-width %r is inside the influence cone %r", config.halfWidth,
                           maxSlope * config.horizon)

    def initial(self, perturbation=None):
        base = np.zeros(self.x.shape) if self.periodic else self.theta * self.x
        if perturbation is None:
            return base
        return base + (perturbation(self.x) if callable(perturbation) else np.asarray(perturbation, dtype=float))

    def differences(self, u):
        if self.periodic:
            left, right = np.roll(u, 1), np.roll(u, -1)
            pMinus = self.theta + (u - left) / self.dx
            pPlus = self.theta + (right - u) / self.dx
        else:
            padded = np.concatenate(([u[0] - self.theta * self.dx], u, [u[-1] + self.theta * self.dx]))
            left, right = padded[:-2], padded[2:]
            pMinus = (u - left) / self.dx
            pPlus = (right - u) / self.dx
        return pMinus, pPlus

    def numericalHamiltonian(self, pMinus, pPlus):
        if self.config.flavor == LAX_FRIEDRICHS:
            return self.H(self.x, 0.5 * (pMinus + pPlus)) + 0.5 * self.alpha * (pPlus - pMinus)
        return (self.H(self.x, np.minimum(pMinus, self.pHat)) + self.H(self.x, np.maximum(pPlus, self.pHat))
                - self.lambdaHat)

    def step(self, u):
        pMinus, pPlus = self.differences(u)
        return u + self.dt * (self.a * (pPlus - pMinus) / self.dx + self.numericalHamiltonian(pMinus, pPlus))

    def maxGradient(self, u):
        pMinus, _ = self.differences(u)
        return float(np.max(np.abs(pMinus)))


class ParabolicRun:
    def __init__(self, theta, config, times, centerValues, grid, finalProfile, maxGradient, pBox):
        self.theta = theta
        self.config = config
        self.times = times
        self.centerValues = centerValues
        self.grid = grid
        self.finalProfile = finalProfile
        self.maxGradient = maxGradient
        self.pBox = pBox

    def _tail(self, tailFraction):
        start = (1.0 - tailFraction) * self.times[-1]
        mask = (self.times >= start) & (self.times > 0)
        return self.times[mask], self.centerValues[mask]

    def tailEstimates(self, tailFraction=None):
        """(h_L, h_U): min and max of u(t, 0)/t over the tail of the horizon."""
        t, u = self._tail(self.config.tailFraction if tailFraction is None else tailFraction)
        ratio = u / t
        return float(np.min(ratio)), float(np.max(ratio))

    def tailSlope(self, tailFraction=None):
        t, u = self._tail(self.config.tailFraction if tailFraction is None else tailFraction)
        return float(np.polyfit(t, u, 1)[0])

    def trajectoryTable(self, rows=2001):
        stride = max(1, (self.times.size - 1) // (rows - 1))
        t = self.times[1::stride]
        u = self.centerValues[1::stride]
        return pd.DataFrame({'t': t, 'u0': u, 'u0_over_t': u / t}, columns=['t', 'u0', 'u0_over_t'])


def solveParabolic(env, theta, config=None, perturbation=None):
    config = config or SchemeConfig(boundary=PERIODIC if env.period else LINEAR)
    scheme = ParabolicScheme(env, theta, config)
    u = scheme.initial(perturbation)
    times = scheme.dt * np.arange(scheme.steps + 1)
    centerValues = np.empty(scheme.steps + 1)
    centerValues[0] = u[scheme.center]
    maxGradient = scheme.maxGradient(u)
    for n in range(1, scheme.steps + 1):
        u = scheme.step(u)
        centerValues[n] = u[scheme.center]
        if n % config.checkEvery == 0 or n == scheme.steps:
            if not np.all(np.isfinite(u)):
                raise SolverBlowupError(n)
            gradient = scheme.maxGradient(u)
            if gradient > scheme.pBox:
                raise SolverBlowupError(n, "gradient {!r} left the box [-{!r}, {!r}]".format(
                    gradient, scheme.pBox, scheme.pBox))
            maxGradient = max(maxGradient, gradient)
    logger.debug("parabolic run theta=%r: %d steps, dt=%r, cfl=%r", theta, scheme.steps, scheme.dt,
                 scheme.cflNumber)
    profile = u + scheme.theta * scheme.x if scheme.periodic else u
    return ParabolicRun(float(theta), scheme.config, times, centerValues, scheme.x, profile, maxGradient,
                        scheme.pBox)


def estimateEffective(env, theta, config=None, tailFraction=None):
    run = solveParabolic(env, theta, config)
    hL, hU = run.tailEstimates(tailFraction)
    slope = run.tailSlope(tailFraction)
    conclusive = hU - hL <= run.config.gapTol * max(1.0, abs(slope))
    if not conclusive:
        logger.warning("tail spread %r at theta=%r exceeds the gap tolerance, a longer horizon is advised",
                       hU - hL, theta)
    return EffectiveEstimate(hL, hU, slope, conclusive, run)


def lipschitzReference(env, theta, cGamma, xs=None):
    """K(theta): the a-priori gradient bound at the level max_x H(x, theta)."""
    H = env.hamiltonian
    if xs is None:
        xs = np.linspace(*env.defaultWindow(), num=257)
    level = float(np.max(H(xs, theta)))
    return lipschitzBound(H.alpha0, H.alpha1, H.gamma, env.diffusion.kappa, level, cGamma)


def comparisonCheck(env, theta, config, lower, upper, steps=None):
    """Advances two ordered initial data in lockstep; returns the largest
    violation max(v - w) seen (<= 0 when ordering is preserved)."""
    scheme = ParabolicScheme(env, theta, config)
    v = scheme.initial(lower)
    w = scheme.initial(upper)
    worst = float(np.max(v - w))
    for _ in range(scheme.steps if steps is None else steps):
        v = scheme.step(v)
        w = scheme.step(w)
        worst = max(worst, float(np.max(v - w)))
    return worst


def gridRefinement(env, theta, config, refinements=3):
    """Tail slopes for dx, dx/2, dx/4, ... with the time step rescaled by the CFL rule."""
    estimates = []
    dx = config.dx
    for _ in range(refinements):
        run = solveParabolic(env, theta, config._replace(dx=dx, dt=None))
        estimates.append((dx, run.tailSlope()))
        dx /= 2.0
    return estimates


class ComparisonReport:
    def __init__(self, rows, tolerance, estimates=()):
        self.rows = list(rows)
        self.tolerance = tolerance
        self.estimates = list(estimates)

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    @property
    def maxRelativeError(self):
        return max(r.relativeError for r in self.rows)

    def toFrame(self):
        return pd.DataFrame([r._asdict() for r in self.rows], columns=list(ComparisonRow._fields))

    def toText(self):
        lines = ["tolerance = {!r}".format(self.tolerance)]
        for r in self.rows:
            lines.append("theta = {!r} hbar = {!r} parabolic = {!r} [{!r}, {!r}] error = {!r}{} {}".format(
                r.theta, r.hbar, r.estimate, r.hL, r.hU, r.relativeError, " (flat part)" if r.onFlat else "",
                "pass" if r.passed else "FAIL"))
        return "\n".join(lines) + "\n"


def homogenizationTest(env, curve, thetas, config=None, tolerance=0.05, threads=1):
    """Compares the parabolic long-time slope with the effective curve at each theta."""
    estimates = scheduleJobs(lambda theta: estimateEffective(env, theta, config), [(theta,) for theta in thetas],
                             threads)

    rows = []
    for theta, estimate in zip(thetas, estimates):
        hbar = evaluateHbar(curve, theta)
        error = abs(estimate.slope - hbar)
        relative = error / max(1.0, abs(hbar))
        onFlat = curve.thetaMinus0 <= theta <= curve.thetaPlus0
        rows.append(ComparisonRow(float(theta), hbar, estimate.slope, estimate.hL, estimate.hU, error, relative,
                                  onFlat, relative <= tolerance))
    return ComparisonReport(rows, tolerance, estimates)
