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
from scipy import integrate, optimize, sparse

from .environment import ComponentDecomposition, decomposeComponents, WindowError, DEFAULT_A_TOL
from .hamlib import (EmptySublevelError, MinProfile, lipschitzBound, minProfile,
                     sublevelArrays, sublevelEndpoints, DEFAULT_C_GAMMA)
from .jobs import PicklableError, scheduleJobs

logger = logging.getLogger(__name__)

PLUS = "plus"
MINUS = "minus"

ZERO = "zero"
LAYER = "layer"
ODE = "ode"

TRACKED = "tracked"
BLEW_DOWN = "blew_down"
OBSTRUCTED = "obstructed"
FAILED = "failed"
SKIPPED = "skipped"

CellSettings = namedtuple('CellSettings', ['dx', 'aTol', 'rtol', 'atol', 'switchTol', 'junctionTol',
                                           'cGamma', 'rootTol', 'method'])
CellSettings.__new__.__defaults__ = (1e-3, DEFAULT_A_TOL, 1e-9, 1e-11, 1e-8, 1e-4,
                                     DEFAULT_C_GAMMA, 1e-12, 'Radau')

# `blowDown` is None when the branch tracked the whole component, else the escape position
BranchSamples = namedtuple('BranchSamples', ['component', 'level', 'branch', 'grid', 'f', 'provenance',
                                             'blowDown', 'junctionGap'])

# `segments` are (start, stop) index ranges of the components inside `grid`
CorrectorProfile = namedtuple('CorrectorProfile', ['grid', 'f', 'u', 'level', 'branch', 'provenance', 'segments'])

ComponentVerdict = namedtuple('ComponentVerdict', ['component', 'status', 'x'])

CriticalValue = namedtuple('CriticalValue', ['level', 'lo', 'hi', 'evaluations'])

GronwallReport = namedtuple('GronwallReport', ['grid', 'gap', 'bound', 'inverseDiffusionIntegral',
                                               'logBound', 'etaEffective', 'mergedAt', 'passed', 'lemmaPassed'])

BridgeReport = namedtuple('BridgeReport', ['grid', 'slope', 'worst', 'worstAt', 'passed'])


class CellError(PicklableError):
    def __init__(self, message):
        super(CellError, self).__init__(message)
        self.message = message

    def __str__(self):
        return self.message


class EndpointObstructedError(CellError):
    def __init__(self, component, x, level=None):
        super(EndpointObstructedError, self).__init__(
            "level {!r} is obstructed at endpoint x = {!r} of component ({!r}, {!r})".format(
                level, x, component.lo, component.hi))
        self.component = component
        self.x = x


class NumericalFailureError(CellError):
    def __init__(self, x, reason=""):
        super(NumericalFailureError, self).__init__(
            "branch integration failed at x = {!r}: {}".format(x, reason))
        self.x = x


class BlowDownError(CellError):
    def __init__(self, component, x):
        super(BlowDownError, self).__init__(
            "branch escaped at x = {!r} in component ({!r}, {!r})".format(x, component.lo, component.hi))
        self.component = component
        self.x = x


class AssemblyError(CellError):
    def __init__(self, component, gap):
        super(AssemblyError, self).__init__(
            "junction mismatch {!r} on component ({!r}, {!r})".format(gap, component.lo, component.hi))
        self.component = component
        self.gap = gap


class NonMonotonePredicateError(CellError):
    def __init__(self, levels):
        super(NonMonotonePredicateError, self).__init__(
            "feasibility is not monotone in the level, infeasible at {!r} above a feasible level".format(levels))
        self.levels = levels


class FeasibilityReport:
    def __init__(self, level, verdicts, zeroSetOk, supLambdaHat):
        self.level = level
        self.verdicts = list(verdicts)
        self.zeroSetOk = zeroSetOk
        self.supLambdaHat = supLambdaHat

    @property
    def feasible(self):
        return self.zeroSetOk and all(v.status == TRACKED for v in self.verdicts)

    @property
    def inconclusive(self):
        return any(v.status == FAILED for v in self.verdicts)

    def toText(self):
        lines = ["level = {!r}".format(self.level),
                 "zero set = {} (sup lambdaHat = {!r})".format("ok" if self.zeroSetOk else "obstructed",
                                                                self.supLambdaHat)]
        for v in self.verdicts:
            where = "" if v.x is None else " at x = {!r}".format(v.x)
            lines.append("component ({!r}, {!r}) = {}{}".format(v.component.lo, v.component.hi, v.status, where))
        lines.append("feasible = {}".format("yes" if self.feasible else "no"))
        return "\n".join(lines) + "\n"


def _picker(forward):
    if forward:
        return lambda ends: ends.pPlus
    return lambda ends: ends.pMinus


# Components handed to one stiff solve; fixed so results do not depend on the worker count
COMPONENT_BATCH = 32

SampledProfile = namedtuple('SampledProfile', ['lambdaHat', 'pHat'])

# A branch integration between preparation and the stiff solve. `start`/`stop`
# bound the stretch left to the solver, `targets` are the grid points on it
# in integration order followed by `stop`.
Leg = namedtuple('Leg', ['component', 'grid', 'f', 'provenance', 'forward', 'start', 'stop', 'value', 'targets',
                         'startIsZero', 'endIsZero', 'tailLayer', 'startEnds', 'endEnds'])

# `values` at the leg targets, or the escape position
LegSolution = namedtuple('LegSolution', ['values', 'tail', 'escape'])


class CellSolver:
    """Branch integration of a(x) f' + H(x, f) = level on the components of
    {a > 0} of a decomposed window.

    Zero-set data (minimizer profile at the zero samples) is computed once;
    minimizer profiles at other points are cached as they are needed.
    """
    def __init__(self, env, decomposition, settings=None, threads=1):
        self.env = env
        self.H = env.hamiltonian
        self.diffusion = env.diffusion
        self.decomposition = decomposition
        self.settings = settings or CellSettings(dx=decomposition.dx, aTol=decomposition.aTol)
        self.threads = max(1, int(threads))
        if not decomposition.hasZero:
            raise WindowError("window [{}, {}] contains no zero of a".format(*decomposition.window))
        lo, hi = decomposition.trimmedWindow()
        self.components = [c for c in decomposition.interiorComponents() if c.lo >= lo and c.hi <= hi]
        self.zeroSamples = decomposition.zeroSamples()
        self.zeroProfile = MinProfile(self.H, self.zeroSamples, self.settings.rootTol)
        self.supLambdaHat = float(np.max(self.zeroProfile.lambdaHat))
        self._grids = {}
        self._profiles = {}
        self._minimumLevel = None

    def componentGrid(self, component):
        if component not in self._grids:
            self._grids[component] = self.decomposition.componentGrid(component)
        return self._grids[component]

    def minimumLevel(self):
        """min H over the trimmed window, sampled on the component grids."""
        if self._minimumLevel is None:
            if self.H.xIndependent:
                self._minimumLevel = minProfile(self.H, 0.0)[0]
            else:
                coarse = np.concatenate([self.componentGrid(c)[::8] for c in self.components] + [self.zeroSamples])
                self._minimumLevel = float(np.min(MinProfile(self.H, coarse).lambdaHat))
        return self._minimumLevel

    def escapeBound(self, level):
        H = self.H
        return 2.0 * lipschitzBound(H.alpha0, H.alpha1, H.gamma, self.diffusion.kappa, level,
                                    self.settings.cGamma) + 1.0

    def profileAt(self, x):
        """(min_p H(x, p), argmin), cached per position."""
        key = None if self.H.xIndependent else float(x)
        profile = self._profiles.get(key)
        if profile is None:
            profile = minProfile(self.H, float(x), self.settings.rootTol)
            self._profiles[key] = profile
        return profile

    def _sublevels(self, xs, level):
        pairs = np.array([self.profileAt(x) for x in (xs[:1] if self.H.xIndependent else xs)])
        return sublevelArrays(self.H, xs, level, self.settings.rootTol, SampledProfile(pairs[:, 0], pairs[:, 1]))

    def warmProfiles(self):
        """Fills the profile cache at every component endpoint and its neighbors,
        so that forked workers inherit it."""
        for component in self.components:
            grid = self.componentGrid(component)
            for x in (grid[0], grid[1], grid[-2], grid[-1]):
                self.profileAt(x)

    def _endpoint(self, component, x, level, isZero):
        profile = self.profileAt(x)
        if isZero and level <= profile[0] + self.settings.rootTol:
            raise EndpointObstructedError(component, x, level)
        try:
            return sublevelEndpoints(self.H, x, level, self.settings.rootTol, profile)
        except EmptySublevelError:
            raise EndpointObstructedError(component, x, level)

    def _switchPoint(self, component, grid, a, aSwitch, head, forward):
        """Position where a crosses aSwitch next to a zero endpoint; the algebraic
        branch holds between the endpoint and this point."""
        above = np.nonzero(a > aSwitch)[0]
        if above.size == 0:
            return None, np.ones(grid.shape, dtype=bool)
        if forward == head:
            k = int(above[0])
            inner = grid[k]
            outer = grid[k - 1] if k > 0 else component.lo
            layer = np.arange(grid.size) < k
        else:
            k = int(above[-1])
            inner = grid[k]
            outer = grid[k + 1] if k < grid.size - 1 else component.hi
            layer = np.arange(grid.size) > k
        if float(self.diffusion.a(outer)) >= aSwitch:
            return inner, layer
        x = optimize.brentq(lambda s: float(self.diffusion.a(s)) - aSwitch, min(inner, outer), max(inner, outer),
                            xtol=1e-15)
        return float(x), layer


    def _prepare(self, component, level, branch):
        """Endpoint values and boundary layers of one branch. Returns finished
        BranchSamples when the algebraic branch covers the whole component."""
        settings = self.settings
        forward = branch == PLUS
        grid = self.componentGrid(component)
        a = self.diffusion.a(grid)
        startX, startIsZero = (component.lo, component.loIsZero) if forward else (component.hi, component.hiIsZero)
        endX, endIsZero = (component.hi, component.hiIsZero) if forward else (component.lo, component.loIsZero)

        startEnds = self._endpoint(component, startX, level, startIsZero)
        endEnds = self._endpoint(component, endX, level, endIsZero)
        pick = _picker(forward)

        f = np.full(grid.shape, np.nan)
        provenance = np.full(grid.shape, ODE, dtype=object)
        odeMask = np.ones(grid.shape, dtype=bool)

        xs = startX
        if startIsZero:
            neighbor = grid[1] if forward else grid[-2]
            neighborEnds = self._endpoint(component, neighbor, level, False)
            slopeCap = max(1.0, abs(pick(neighborEnds) - pick(startEnds)) / abs(neighbor - startX))
            aSwitch = settings.switchTol / slopeCap
            xs, layer = self._switchPoint(component, grid, a, aSwitch, True, forward)
            if xs is None:
                pMinus, pPlus = self._sublevels(grid, level)
                provenance[:] = LAYER
                return BranchSamples(component, level, branch, grid, pPlus if forward else pMinus, provenance,
                                     None, 0.0)
            if layer.any():
                pMinus, pPlus = self._sublevels(grid[layer], level)
                f[layer] = pPlus if forward else pMinus
                provenance[layer] = LAYER
                odeMask &= ~layer
        else:
            aSwitch = settings.switchTol

        xe = endX
        tailLayer = np.zeros(grid.shape, dtype=bool)
        if endIsZero:
            xe, tailLayer = self._switchPoint(component, grid, a, aSwitch, False, forward)
            if xe is None:
                raise NumericalFailureError(endX, "no sample with a above the switch threshold")
            odeMask &= ~tailLayer

        startValue = pick(self._endpoint(component, xs, level, False)) if xs != startX else pick(startEnds)
        if forward:
            targets = grid[odeMask & (grid > xs) & (grid < xe)]
        else:
            targets = grid[odeMask & (grid < xs) & (grid > xe)][::-1]
        if xe != xs:
            targets = np.append(targets, xe)
        f[odeMask & (grid == xs)] = startValue
        return Leg(component, grid, f, provenance, forward, xs, xe, startValue, targets,
                   startIsZero, endIsZero, tailLayer, startEnds, endEnds)

    def _solveLegs(self, legs, level, rtol, atol):
        """Integrates f' = (level - H(x, f))/a(x) along all legs in one stiff solve.

        Leg j is mapped onto s in [0, 1] by x = start_j + s (stop_j - start_j),
        which keeps the Jacobian diagonal. A leg whose |f| reaches the escape
        bound is frozen there and reported as escaped.
        """
        starts = np.array([leg.start for leg in legs])
        spans = np.array([leg.stop - leg.start for leg in legs])
        bound = self.escapeBound(level)
        H = self.H
        a = self.diffusion.a

        def rhs(s, y):
            x = starts + s * spans
            with np.errstate(over='ignore', invalid='ignore'):
                return np.where(np.abs(y) < bound, spans * (level - H(x, y)) / a(x), 0.0)

        def jacobian(s, y):
            x = starts + s * spans
            with np.errstate(over='ignore', invalid='ignore'):
                diagonal = np.where(np.abs(y) < bound, -spans * H.slope(x, y) / a(x), 0.0)
            if diagonal.size == 1:
                return diagonal.reshape(1, 1)
            return sparse.diags(diagonal, format='csc')

        solution = integrate.solve_ivp(rhs, (0.0, 1.0), [leg.value for leg in legs], method=self.settings.method,
                                       jac=jacobian, rtol=rtol, atol=atol, dense_output=True)
        if solution.status != 0:
            if len(legs) > 1:
                logger.debug("batch solve failed at level %r, integrating its %d legs one by one", level, len(legs))
                return [self._solveLegs([leg], level, rtol, atol)[0] for leg in legs]
            failedAt = float(starts[0] + (solution.t[-1] if solution.t.size else 0.0) * spans[0])
            return [NumericalFailureError(failedAt, solution.message)]

        results = []
        for j, leg in enumerate(legs):
            escaped = np.nonzero(np.abs(solution.y[j]) >= bound)[0]
            if escaped.size:
                results.append(LegSolution(None, None, float(starts[j] + solution.t[escaped[0]] * spans[j])))
                continue
            s = np.clip((leg.targets - starts[j]) / spans[j], 0.0, 1.0)
            results.append(LegSolution(solution.sol(s)[j], float(solution.y[j, -1]), None))
        return results

    def _finish(self, leg, level, branch, solved):
        settings = self.settings
        grid, f, provenance, forward = leg.grid, leg.f, leg.provenance, leg.forward
        pick = _picker(forward)
        if solved.escape is not None:
            logger.debug("%s branch at level %r escaped at x=%r", branch, level, solved.escape)
            return BranchSamples(leg.component, level, branch, grid, f, provenance, solved.escape, np.inf)

        if solved.values.size:
            f[np.searchsorted(grid, leg.targets[:-1])] = solved.values[:-1]
        tailValue = solved.tail

        gap = 0.0
        if leg.endIsZero:
            if leg.tailLayer.any():
                pMinus, pPlus = self._sublevels(grid[leg.tailLayer], level)
                f[leg.tailLayer] = pPlus if forward else pMinus
                provenance[leg.tailLayer] = LAYER
            tailEnds = self._endpoint(leg.component, leg.stop, level, False)
            # falling past the opposite sublevel endpoint next to a zero means escape
            if forward and tailValue < tailEnds.pMinus - settings.junctionTol:
                return BranchSamples(leg.component, level, branch, grid, f, provenance, leg.stop, np.inf)
            if not forward and tailValue > tailEnds.pPlus + settings.junctionTol:
                return BranchSamples(leg.component, level, branch, grid, f, provenance, leg.stop, np.inf)
            gap = abs(tailValue - pick(tailEnds))
        else:
            f[grid == leg.stop] = tailValue

        if leg.startIsZero:
            provenance[0 if forward else -1] = ZERO
            f[0 if forward else -1] = pick(leg.startEnds)
        if leg.endIsZero:
            provenance[-1 if forward else 0] = ZERO
            f[-1 if forward else 0] = pick(leg.endEnds)
        return BranchSamples(leg.component, level, branch, grid, f, provenance, None, gap)

    def integrateBatch(self, components, level, branch=PLUS, rtol=None, atol=None):
        """Branches on the given components; failed components come back as
        the CellError raised."""
        rtol = self.settings.rtol if rtol is None else rtol
        atol = self.settings.atol if atol is None else atol
        results = [None] * len(components)
        legs, slots = [], []
        for k, component in enumerate(components):
            try:
                prepared = self._prepare(component, level, branch)
                if isinstance(prepared, BranchSamples):
                    results[k] = prepared
                elif prepared.stop == prepared.start:
                    results[k] = self._finish(prepared, level, branch,
                                              LegSolution(np.empty(0), prepared.value, None))
                else:
                    legs.append(prepared)
                    slots.append(k)
            except CellError as e:
                results[k] = e
        if legs:
            for k, leg, solved in zip(slots, legs, self._solveLegs(legs, level, rtol, atol)):
                if isinstance(solved, CellError):
                    results[k] = solved
                    continue
                try:
                    results[k] = self._finish(leg, level, branch, solved)
                except CellError as e:
                    results[k] = e
        return results

    def integrateBranch(self, component, level, branch=PLUS, rtol=None, atol=None):
        """Integrates f' = (level - H(x, f))/a(x) across one component.

        The plus branch runs forward from the left endpoint, the minus branch
        backward from the right one. Next to zero endpoints the algebraic
        branch f = p(x) is used wherever a <= aSwitch.
        """
        result = self.integrateBatch([component], level, branch, rtol, atol)[0]
        if isinstance(result, CellError):
            raise result
        return result

    def branches(self, level, branch=PLUS, shortCircuit=False, rtol=None, atol=None, indices=None):
        """Integrates the given components (all by default) in batches of
        COMPONENT_BATCH; results come back in the order of `indices`.

        Obstructed or failed components are returned as the exception raised.
        With `shortCircuit` a serial run stops after the first batch holding a
        component that did not track, and the returned list is shorter.
        """
        indices = list(range(len(self.components)) if indices is None else indices)
        batches = [[self.components[i] for i in indices[k:k + COMPONENT_BATCH]]
                   for k in range(0, len(indices), COMPONENT_BATCH)]

        def stops(batchResults):
            return shortCircuit and any(not isinstance(r, BranchSamples) or r.blowDown is not None
                                        for r in batchResults)

        if self.threads == 1 or len(batches) <= 1:
            results = []
            for batch in batches:
                batchResults = self.integrateBatch(batch, level, branch, rtol, atol)
                results.extend(batchResults)
                if stops(batchResults):
                    break
            return results

        self.warmProfiles()
        perBatch = scheduleJobs(self.integrateBatch, [(batch, level, branch, rtol, atol) for batch in batches],
                                self.threads)
        # cut where a serial run would have stopped, so callers see the same results for any worker count
        results = []
        for batchResults in perBatch:
            results.extend(batchResults)
            if stops(batchResults):
                break
        return results

    def feasibility(self, level, tol=None, tracked=None):
        """Whether every plus branch tracks its component at `level`.

        `tracked` maps components to a level at which they are known to track;
        by monotonicity in the level they are not integrated again at or above it.
        """
        tol = self.settings.rootTol if tol is None else tol
        tracked = tracked or {}
        zeroSetOk = level >= self.supLambdaHat - tol
        verdicts = []
        if zeroSetOk:
            pending = [i for i, c in enumerate(self.components) if tracked.get(c, np.inf) > level]
            results = dict(zip(pending, self.branches(level, PLUS, shortCircuit=True, indices=pending)))
            for i, component in enumerate(self.components):
                result = results.get(i)
                if component in tracked and tracked[component] <= level:
                    verdicts.append(ComponentVerdict(component, TRACKED, None))
                elif result is None:
                    verdicts.append(ComponentVerdict(component, SKIPPED, None))
                elif isinstance(result, EndpointObstructedError):
                    verdicts.append(ComponentVerdict(component, OBSTRUCTED, result.x))
                elif isinstance(result, CellError):
                    logger.warning("inconclusive integration at level %r: %s", level, result)
                    verdicts.append(ComponentVerdict(component, FAILED, getattr(result, 'x', None)))
                elif result.blowDown is not None:
                    verdicts.append(ComponentVerdict(component, BLEW_DOWN, result.blowDown))
                else:
                    verdicts.append(ComponentVerdict(component, TRACKED, None))
        report = FeasibilityReport(level, verdicts, zeroSetOk, self.supLambdaHat)
        logger.debug("feasibility at level %r: %s", level, report.feasible)
        return report

    def criticalValue(self, tolLambda=1e-7, maxDoublings=60):
        """Bisection of the feasibility predicate down to a bracket of half-width <= tolLambda.

        Components that tracked at some level are skipped at higher levels, so
        late bisection steps only integrate the components that still blow down.
        The final monotonicity check integrates every component.
        """
        evaluations = []
        tracked = {}

        def feasible(level, reuse=True):
            report = self.feasibility(level, tracked=tracked if reuse else None)
            for verdict in report.verdicts:
                if verdict.status == TRACKED and tracked.get(verdict.component, np.inf) > level:
                    tracked[verdict.component] = level
            evaluations.append((level, report.feasible))
            return report.feasible

        floor = max(self.supLambdaHat, self.minimumLevel())
        if feasible(floor):
            return CriticalValue(floor, floor, floor, evaluations)

        hi = max(self.H.alpha1, floor + tolLambda)
        for _ in range(maxDoublings):
            if feasible(hi):
                break
            hi = floor + 2.0 * (hi - floor)
        else:
            raise CellError("no feasible level found up to {!r}".format(hi))
        firstFeasible = hi

        lo = floor
        while 0.5 * (hi - lo) > tolLambda:
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                hi = mid
            else:
                lo = mid

        spread = max(firstFeasible - hi, 4.0 * tolLambda)
        failures = [level for level in (hi + 0.25 * spread, hi + 0.5 * spread, hi + 0.75 * spread)
                    if not feasible(level, reuse=False)]
        if failures:
            raise NonMonotonePredicateError(failures)
        estimate = 0.5 * (lo + hi)
        logger.debug("critical value %r in [%r, %r] after %d evaluations", estimate, lo, hi, len(evaluations))
        return CriticalValue(estimate, lo, hi, evaluations)

    def buildCorrector(self, level, branch=PLUS, tol=None, checkJunctions=True, rtol=None, atol=None):
        """Assembles f on the trimmed window: p(x) on the zero set, integrated
        branches on the components, and u = cumulative integral of f with u(0) = 0."""
        tol = self.settings.junctionTol if tol is None else tol
        results = self.branches(level, branch, rtol=rtol, atol=atol)
        pieces = {}
        for component, result in zip(self.components, results):
            if isinstance(result, CellError):
                raise result
            if result.blowDown is not None:
                raise BlowDownError(component, result.blowDown)
            if checkJunctions and result.junctionGap > tol:
                raise AssemblyError(component, result.junctionGap)
            pieces[component] = result

        pMinus, pPlus = sublevelArrays(self.H, self.zeroSamples, level, self.settings.rootTol, self.zeroProfile)
        zeroValues = dict(zip(self.zeroSamples.tolist(), (pPlus if branch == PLUS else pMinus).tolist()))

        startingAt = {c.lo: c for c in self.components}
        grid, f, provenance, segments = [], [], [], []
        for left, right in self.decomposition.features:
            if right > left:
                points = [x for x in self.zeroSamples if left <= x <= right]
            else:
                points = [left]
            for x in points:
                if grid and x <= grid[-1]:
                    continue
                grid.append(float(x))
                f.append(zeroValues[float(x)])
                provenance.append(ZERO)
            component = startingAt.get(right)
            if component is None:
                continue
            samples = pieces[component]
            start = len(grid) - 1
            grid.extend(samples.grid[1:-1].tolist())
            f.extend(samples.f[1:-1].tolist())
            provenance.extend(samples.provenance[1:-1].tolist())
            segments.append((start, len(grid) + 1))

        grid = np.array(grid)
        f = np.array(f)
        u = integrate.cumulative_trapezoid(f, grid, initial=0.0)
        if grid[0] <= 0.0 <= grid[-1]:
            u = u - np.interp(0.0, grid, u)
        return CorrectorProfile(grid, f, u, level, branch, np.array(provenance, dtype=object), segments)

    def limitCorrector(self, lambda0, branch=PLUS, step=None):
        """Corrector at the critical value by three-point Richardson extrapolation
        from levels lambda0 + step, lambda0 + 2 step, lambda0 + 4 step."""
        step = 1e-3 if step is None else step
        profiles = [self.buildCorrector(lambda0 + k * step, branch, checkJunctions=False) for k in (1, 2, 4)]
        near, middle, far = (p.f for p in profiles)
        f = (8.0 * near - 6.0 * middle + far) / 3.0
        # the branch is monotone in the level
        f = np.minimum(f, near) if branch == PLUS else np.maximum(f, near)
        grid = profiles[0].grid
        u = integrate.cumulative_trapezoid(f, grid, initial=0.0)
        if grid[0] <= 0.0 <= grid[-1]:
            u = u - np.interp(0.0, grid, u)
        return profiles[0]._replace(f=f, u=u, level=lambda0)


def solverFor(env, window, settings=None, threads=1):
    if isinstance(window, CellSolver):
        return window
    if isinstance(window, ComponentDecomposition):
        return CellSolver(env, window, settings, threads)
    settings = settings or CellSettings()
    return CellSolver(env, decomposeComponents(env, window, settings.aTol, settings.dx), settings, threads)


def integrateBranch(env, component, level, branch=PLUS, settings=None, decomposition=None):
    settings = settings or CellSettings()
    if decomposition is None:
        decomposition = decomposeComponents(env, (component.lo, component.hi), settings.aTol, settings.dx)
    return CellSolver(env, decomposition, settings).integrateBranch(component, level, branch)


def feasibility(env, window, level, tol=None, settings=None):
    return solverFor(env, window, settings).feasibility(level, tol)


def criticalValue(env, window, tolLambda=1e-7, settings=None, threads=1):
    return solverFor(env, window, settings, threads).criticalValue(tolLambda)


def buildCorrector(env, window, level, branch=PLUS, tol=None, settings=None, threads=1):
    return solverFor(env, window, settings, threads).buildCorrector(level, branch, tol)


def residual(env, profile, level=None):
    """Sup norm of a u'' + H(x, u') - level on component interiors, one cell away from zeros."""
    level = profile.level if level is None else level
    worst = 0.0
    for start, stop in profile.segments:
        x = profile.grid[start:stop]
        f = profile.f[start:stop]
        if x.size < 5:
            continue
        fPrime = np.gradient(f, x)
        values = env.a(x) * fPrime + env.H(x, f) - level
        # x[0] and x[-1] are the zeros; the central difference at x[1] and x[-2] reaches
        # into the zero sample, where u'' is undefined, so the collar is one cell of
        # stencil past the zeros
        worst = max(worst, float(np.max(np.abs(values[2:-2]))))
    return worst


def gronwallMergeCheck(env, component, level, gap=1e-3, settings=None, decomposition=None, eta=None):
    """Follows two plus-branch solutions started `gap` apart just past the head
    boundary layer and compares their distance with the Gronwall decay bound."""
    settings = settings or CellSettings()
    if decomposition is None:
        decomposition = decomposeComponents(env, (component.lo, component.hi), settings.aTol, settings.dx)
    solver = CellSolver(env, decomposition, settings)
    reference = solver.integrateBranch(component, level, PLUS)
    if reference.blowDown is not None:
        raise BlowDownError(component, reference.blowDown)
    odeIndices = np.nonzero(reference.provenance == ODE)[0]
    if odeIndices.size < 3:
        raise CellError("component ({!r}, {!r}) has no integrated samples".format(component.lo, component.hi))
    grid = reference.grid[odeIndices[0]:odeIndices[-1] + 1]
    y = float(grid[0])
    start = float(reference.f[odeIndices[0]])

    H = env.hamiltonian
    a = env.a

    def rhs(x, state):
        inverse = 1.0 / float(a(x))
        return np.array([(level - float(H(x, state[0]))) * inverse,
                         (level - float(H(x, state[1]))) * inverse,
                         inverse])

    def jacobian(x, state):
        inverse = 1.0 / float(a(x))
        return np.array([[-float(H.slope(x, state[0])) * inverse, 0.0, 0.0],
                         [0.0, -float(H.slope(x, state[1])) * inverse, 0.0],
                         [0.0, 0.0, 0.0]])

    solution = integrate.solve_ivp(rhs, (y, float(grid[-1])), [start, start + gap, 0.0], method=settings.method,
                                   t_eval=grid, jac=jacobian, rtol=1e-12, atol=1e-14)
    if solution.status != 0:
        raise NumericalFailureError(float(solution.t[-1]), solution.message)
    lower, upper, integral = solution.y
    gaps = np.abs(upper - lower)

    if eta is None:
        eta = H.eta
    if eta <= 0:
        separated = gaps > 1e-10
        secants = (H(grid, upper) - H(grid, lower))[separated] / (upper - lower)[separated]
        eta = float(np.min(secants)) if secants.size else 0.0
    bound = gap * np.exp(-eta * integral)
    noise = 1e3 * (1e-14 + 1e-12 * np.maximum(np.abs(lower), np.abs(upper)))
    passed = bool(np.all(gaps <= bound * (1.0 + 1e-6) + noise))

    kappa = env.diffusion.kappa
    logBound = np.log((grid - component.lo) / (y - component.lo)) / (2.0 * kappa)
    lemmaPassed = bool(np.all(integral >= logBound - 1e-9)) if component.loIsZero else True
    merged = np.nonzero(gaps < 1e-8)[0]
    mergedAt = float(grid[merged[0]]) if merged.size else None
    if not passed:
        logger.warning("merge distance exceeds the Gronwall bound on (%r, %r)", component.lo, component.hi)
    return GronwallReport(grid, gaps, bound, integral, logBound, eta, mergedAt, passed, lemmaPassed)


def bridgeSupersolution(env, profMinus, profPlus, x0, tol=None):
    """Joins the minus branch left of x0 with the plus branch right of x0 and
    checks a w'' + H(x, w') <= level + tol on the grid."""
    if profMinus.grid.shape != profPlus.grid.shape or not np.array_equal(profMinus.grid, profPlus.grid):
        raise CellError("bridged profiles must share their grid")
    if profMinus.level != profPlus.level:
        raise CellError("bridged profiles must share their level")
    grid = profPlus.grid
    level = profPlus.level
    if tol is None:
        tol = 2.0 * float(np.max(np.diff(grid)))
    k = int(np.argmin(np.abs(grid - x0)))
    slope = np.where(grid < grid[k], profMinus.f, profPlus.f)

    worst, worstAt = -np.inf, None
    for start, stop in profPlus.segments:
        x = grid[start:stop]
        if x.size < 5:
            continue
        side = profMinus if x[-1] <= grid[k] else profPlus
        f = side.f[start:stop]
        values = env.a(x) * np.gradient(f, x) + env.H(x, f) - level
        interior = values[2:-2]
        i = int(np.argmax(interior))
        if interior[i] > worst:
            worst, worstAt = float(interior[i]), float(x[2 + i])
    # at the junction the subdifferential is [f-(x0), f+(x0)]; quasiconvexity reduces it to the endpoints
    for value in (profMinus.f[k], profPlus.f[k]):
        excess = float(env.H(grid[k], value)) - level
        if excess > worst:
            worst, worstAt = excess, float(grid[k])
    return BridgeReport(grid, slope, worst, worstAt, worst <= tol)
