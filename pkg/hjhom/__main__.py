#!/usr/bin/env python
#
# This file is part of the hjhom project.
#
# The contents of this file are subject to the BSD 3-Clause License, the
# full text of which is available in the accompanying LICENSE file at the
# root directory of this project.
#
import argparse
import cProfile
import errno
import hashlib
import json
import logging
import os
import sys
import threading

from atomicwrites import atomic_write
import numpy as np

from .jobs import PicklableError, scheduleJobs

VERSION = "1.0.0-dev"

HashAlgorithm = hashlib.md5

OUTPUT_LOCK = threading.Lock()

CONFIG_SCHEMA = "hjhom-config/1"

EXIT_SUCCESS = 0
EXIT_FAILURE = 1
EXIT_ACCEPTANCE = 2

VERBS = ["validate", "critical-value", "corrector", "curve", "verify", "sweep", "emit"]

# Names accepted by the `accept` configuration key
GATES = ["validation", "audit", "closed-form", "stability", "verify"]

# Flag destination -> (environment variable, configuration key)
OVERRIDES = {
    "seed": ("HJHOM_SEED", "seed"),
    "window": ("HJHOM_WINDOW", "window_length"),
    "threads": ("HJHOM_THREADS", "threads"),
    "tol_lambda": ("HJHOM_TOL_LAMBDA", "tol_lambda"),
    "out": ("HJHOM_OUT", "out"),
}

# Configuration keys handed to environment.sampleEnvironment
ENVIRONMENT_KEYS = ["family", "diffusion", "hamiltonian", "gamma", "potential_height", "potential_width",
                    "drift_height", "drift_width", "flat_width", "diffusion_period", "diffusion_value", "kappa",
                    "poisson_intensity", "potential_intensity", "drift_intensity", "extent_length",
                    "alpha0", "alpha1", "eta"]

# Keys that do not change numeric outputs and stay out of the configuration hash
UNHASHED_KEYS = ["threads", "out", "accept"]

RANDOM_WINDOW_LENGTH = 100.0

logger = logging.getLogger(__name__)


class ConfigurationError(PicklableError):
    def __init__(self, field, message):
        super(ConfigurationError, self).__init__(message)
        self.field = field
        self.message = message

    def __str__(self):
        return "configuration field '{}': {}".format(self.field, self.message)


class PipelineError(PicklableError):
    def __init__(self, stage, message):
        super(PipelineError, self).__init__(message)
        self.stage = stage
        self.message = message

    def __str__(self):
        return "stage '{}' failed: {}".format(self.stage, self.message)


class AcceptanceError(PicklableError):
    def __init__(self, criterion, message=""):
        super(AcceptanceError, self).__init__(message)
        self.criterion = criterion
        self.message = message

    def __str__(self):
        return "acceptance gate '{}' failed{}".format(self.criterion, ": " + self.message if self.message else "")


def printTraceStatement(msg: str) -> None:
    if "HJHOM_LOG" in os.environ:
        with OUTPUT_LOCK:
            print("hjhom: " + msg)


def printErrStr(message):
    with OUTPUT_LOCK:
        print(message, file=sys.stderr)


def getStringHash(dataString):
    hasher = HashAlgorithm()
    hasher.update(dataString.encode("UTF-8"))
    return hasher.hexdigest()


def ensureDirectoryExists(path):
    try:
        os.makedirs(path)
    except OSError as e:
        if e.errno != errno.EEXIST:
            raise


class PersistentJSONDict:
    def __init__(self, fileName):
        self._dirty = False
        self._dict = {}
        self._fileName = fileName
        try:
            with open(self._fileName, 'r') as f:
                self._dict = json.load(f)
        except IOError:
            pass
        except ValueError:
            printErrStr("hjhom: persistent json file %s was broken" % fileName)

    def save(self):
        if self._dirty:
            with atomic_write(self._fileName, overwrite=True) as f:
                json.dump(self._dict, f, sort_keys=True, indent=2)
            self._dirty = False

    def __setitem__(self, key, value):
        self._dict[key] = value
        self._dirty = True

    def __getitem__(self, key):
        return self._dict[key]

    def __contains__(self, key):
        return key in self._dict

    def __eq__(self, other):
        return type(self) is type(other) and self.__dict__ == other.__dict__


def parseConfigText(text):
    """Parses `key = value` lines; `#` starts a comment. The first key must be `schema`."""
    values = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError("line {}".format(number), "expected 'key = value', got {!r}".format(line))
        if not values and key != "schema":
            raise ConfigurationError("schema", "the first key must be 'schema = {}'".format(CONFIG_SCHEMA))
        if key in values:
            raise ConfigurationError(key, "given twice (line {})".format(number))
        values[key] = value.strip()
    if values.get("schema") != CONFIG_SCHEMA:
        raise ConfigurationError("schema", "expected {!r}, got {!r}".format(CONFIG_SCHEMA, values.get("schema")))
    return values


class Configuration:
    # None marks an optional key without a default
    _defaultValues = {
        "schema": CONFIG_SCHEMA,
        "family": "periodic",
        "diffusion": None,
        "hamiltonian": "power",
        "gamma": "3",
        "potential_height": "0",
        "potential_width": "0.25",
        "drift_height": "0",
        "drift_width": "0.25",
        "flat_width": "1",
        "diffusion_period": "1",
        "diffusion_value": None,
        "kappa": "1",
        "poisson_intensity": "1",
        "potential_intensity": "1",
        "drift_intensity": "1",
        "extent_length": "400",
        "alpha0": None,
        "alpha1": None,
        "eta": "0",
        "seed": "0",
        "seeds": None,
        "window_start": None,
        "window_length": None,
        "threads": "1",
        "out": "hjhom-out",
        "grid_dx": "0.001",
        "validate_dx": "0.01",
        "a_tol": "1e-10",
        "tol_lambda": "1e-7",
        "ode_rtol": "1e-9",
        "ode_atol": "1e-11",
        "junction_tol": "1e-4",
        "c_gamma": "10",
        "corrector_levels": "0.5, 1",
        "theta_max": "2",
        "theta_points": "81",
        "level_count": "96",
        "lambda_max": None,
        "audit_tol": "1e-6",
        "strictify_levels": None,
        "verify_thetas": "-1.5, 0, 1.5",
        "parabolic_dx": "0.02",
        "horizon_time": "100",
        "half_width": "20",
        "flux": "eo",
        "boundary": None,
        "tail_fraction": "0.5",
        "gap_tol": "0.02",
        "verify_tol": "0.05",
        "closed_form_tol": "1e-3",
        "accept": "",
    }

    _choices = {
        "family": ["periodic", "random"],
        "diffusion": ["sin2", "poisson", "constant"],
        "hamiltonian": ["power", "flat-bottom", "pinned", "double-well"],
        "flux": ["eo", "llf"],
        "boundary": ["linear", "periodic"],
    }

    _integers = ["seed", "threads", "theta_points", "level_count"]

    _integerLists = ["seeds", "strictify_levels"]

    _numberLists = ["corrector_levels", "verify_thetas"]

    def __init__(self, configurationFile=None, overrides=None):
        self._configurationFile = configurationFile
        self._overrides = overrides or {}
        self._cfg = None

    def __enter__(self):
        self._cfg = dict(self._defaultValues)
        if self._configurationFile is not None:
            try:
                with open(self._configurationFile, 'r') as f:
                    text = f.read()
            except IOError as e:
                raise ConfigurationError("config", "cannot read {}: {}".format(self._configurationFile, e))
            for key, value in parseConfigText(text).items():
                if key not in self._defaultValues:
                    raise ConfigurationError(key, "unknown key")
                self._cfg[key] = value
        for key, value in self._overrides.items():
            if value is not None:
                self._cfg[key] = str(value)
        self._check()
        return self

    def __exit__(self, typ, value, traceback):
        self._cfg = None

    def _check(self):
        for key in self._cfg:
            if self._cfg[key] is None:
                continue
            if key in self._choices:
                self.choice(key)
            elif key in self._integers:
                self.integer(key)
            elif key in self._integerLists:
                self.integerList(key)
            elif key in self._numberLists:
                self.numberList(key)
            elif key == "accept":
                self.gates()
            elif key not in ("schema", "out"):
                self.number(key)
        if self.integer("threads") < 1:
            raise ConfigurationError("threads", "must be at least 1")
        if self.optionalNumber("window_length") is not None and self.number("window_length") <= 0:
            raise ConfigurationError("window_length", "must be positive")
        for key in ("grid_dx", "validate_dx", "parabolic_dx", "tol_lambda", "horizon_time", "half_width"):
            if self.number(key) <= 0:
                raise ConfigurationError(key, "must be positive")
        if not 0.0 < self.number("tail_fraction") <= 1.0:
            raise ConfigurationError("tail_fraction", "must lie in (0, 1]")

    def text(self, key):
        return self._cfg[key]

    def choice(self, key):
        value = self._cfg[key]
        if value is not None and value not in self._choices[key]:
            raise ConfigurationError(key, "expected one of {}, got {!r}".format(", ".join(self._choices[key]), value))
        return value

    def number(self, key):
        value = self._cfg[key]
        if value is None:
            raise ConfigurationError(key, "required")
        try:
            result = float(value)
        except ValueError:
            raise ConfigurationError(key, "not a decimal number: {!r}".format(value))
        if not np.isfinite(result):
            raise ConfigurationError(key, "not finite: {!r}".format(value))
        return result

    def optionalNumber(self, key):
        return None if self._cfg[key] is None else self.number(key)

    def integer(self, key):
        try:
            return int(self._cfg[key])
        except (TypeError, ValueError):
            raise ConfigurationError(key, "not an integer: {!r}".format(self._cfg[key]))

    def _items(self, key):
        value = self._cfg[key]
        if value is None:
            return []
        return [item.strip() for item in value.split(",") if item.strip()]

    def numberList(self, key):
        try:
            return [float(item) for item in self._items(key)]
        except ValueError:
            raise ConfigurationError(key, "not a list of decimal numbers: {!r}".format(self._cfg[key]))

    def integerList(self, key):
        try:
            return [int(item) for item in self._items(key)]
        except ValueError:
            raise ConfigurationError(key, "not a list of integers: {!r}".format(self._cfg[key]))

    def gates(self):
        names = self._items("accept")
        for name in names:
            if name not in GATES:
                raise ConfigurationError("accept", "unknown gate {!r}, expected one of {}".format(name, ", ".join(GATES)))
        return names

    def environmentSpec(self):
        spec = {}
        for key in ENVIRONMENT_KEYS:
            if self._cfg[key] is None:
                continue
            spec[key] = self._cfg[key] if key in self._choices else self.number(key)
        return spec

    def canonicalText(self):
        return "\n".join("{}={}".format(key, self._cfg[key]) for key in sorted(self._cfg)
                         if key not in UNHASHED_KEYS)


def resolveOverrides(options, environ):
    """Flag > HJHOM_* variable; the configuration file and defaults come after both."""
    overrides = {}
    for dest, (variable, key) in OVERRIDES.items():
        value = getattr(options, dest, None)
        if value is None:
            value = environ.get(variable)
        overrides[key] = value
    return overrides


class Pipeline:
    """The stages of one seed in one artifact directory."""
    def __init__(self, cfg, store, seed, threads=1, fresh=False):
        self.cfg = cfg
        self.store = store
        self.seed = seed
        self.threads = threads
        self.fresh = fresh
        self.configHash = getStringHash(cfg.canonicalText() + "\nseed={}".format(seed))
        self.summaries = {}
        self._env = None
        self._solver = None
        self._critical = None
        self._curve = None

    def stageHash(self, stage):
        return getStringHash(self.configHash + "\nstage=" + stage)

    def environment(self):
        from .environment import sampleEnvironment, EnvironmentError_
        if self._env is None:
            try:
                self._env = sampleEnvironment(self.cfg.environmentSpec(), self.seed)
            except EnvironmentError_ as e:
                raise PipelineError("validate", str(e))
        return self._env

    def window(self):
        env = self.environment()
        length = self.cfg.optionalNumber("window_length")
        start = self.cfg.optionalNumber("window_start")
        if length is None and start is None and env.period is not None:
            return env.defaultWindow()
        if length is None:
            length = env.period if env.period is not None else RANDOM_WINDOW_LENGTH
        if start is None:
            start = 0.0 if env.period is not None else -0.5 * length
        return (start, start + length)

    def cellSettings(self):
        from .cell import CellSettings
        return CellSettings(dx=self.cfg.number("grid_dx"), aTol=self.cfg.number("a_tol"),
                            rtol=self.cfg.number("ode_rtol"), atol=self.cfg.number("ode_atol"),
                            junctionTol=self.cfg.number("junction_tol"), cGamma=self.cfg.number("c_gamma"))

    def gridSpec(self):
        from .effective import LevelGridSpec
        return LevelGridSpec(self.cfg.number("tol_lambda"), self.cfg.integer("level_count"),
                             self.cfg.number("theta_max"), self.cfg.optionalNumber("lambda_max"))

    def schemeConfig(self):
        from .parabolic import SchemeConfig, LINEAR, PERIODIC
        env = self.environment()
        boundary = self.cfg.choice("boundary") or (PERIODIC if env.period is not None else LINEAR)
        return SchemeConfig(dx=self.cfg.number("parabolic_dx"), flavor=self.cfg.choice("flux"),
                            halfWidth=self.cfg.number("half_width"), horizon=self.cfg.number("horizon_time"),
                            boundary=boundary, tailFraction=self.cfg.number("tail_fraction"),
                            gapTol=self.cfg.number("gap_tol"))

    def solver(self):
        from .cell import solverFor
        from .environment import EnvironmentError_
        if self._solver is None:
            gamma = self.environment().hamiltonian.gamma
            if gamma <= 2.0:
                raise ConfigurationError("gamma", "the cell pipeline requires gamma > 2, got {!r}".format(gamma))
            try:
                self._solver = solverFor(self.environment(), self.window(), self.cellSettings(), self.threads)
            except EnvironmentError_ as e:
                raise PipelineError("critical-value", str(e))
        return self._solver

    def thetaGrid(self, curve):
        thetaMax = self.cfg.number("theta_max")
        lo, hi = curve.thetaRange
        return np.linspace(max(-thetaMax, lo), min(thetaMax, hi), self.cfg.integer("theta_points"))

    def run(self, stages):
        from .storage import Stages
        runners = {
            Stages.VALIDATE: self.validateStage,
            Stages.CRITICAL_VALUE: self.criticalValueStage,
            Stages.CORRECTOR: self.correctorStage,
            Stages.CURVE: self.curveStage,
            Stages.STABILITY: self.stabilityStage,
            Stages.VERIFY: self.verifyStage,
        }
        with self.store.checkpoints() as checkpoints:
            for stage in stages:
                if stage == Stages.STABILITY and not self.cfg.integerList("strictify_levels"):
                    continue
                stageHash = self.stageHash(stage)
                summaryFile = stage + ".json"
                if not self.fresh and checkpoints.isCurrent(stage, stageHash):
                    printTraceStatement("Stage {} is current in {}".format(stage, self.store))
                    self.summaries[stage] = self.store.readJSON(summaryFile)
                    continue
                printTraceStatement("Running stage {} for seed {}".format(stage, self.seed))
                try:
                    summary, files = runners[stage]()
                except (ConfigurationError, PipelineError):
                    raise
                except Exception as e: # pylint: disable=broad-except
                    logger.debug("stage %s failed", stage, exc_info=True)
                    raise PipelineError(stage, "{}: {}".format(type(e).__name__, e))
                files.append(self.store.writeJSON(summaryFile, summary))
                checkpoints.record(stage, stageHash, files)
                self.summaries[stage] = summary

    def critical(self):
        from .cell import CriticalValue
        if self._critical is None:
            summary = self.summaries.get("critical-value") or self.store.readJSON("critical-value.json")
            self._critical = CriticalValue(summary["lambda0"], summary["lo"], summary["hi"], [])
        return self._critical

    def curve(self):
        from .effective import EffectiveCurve
        if self._curve is None:
            summary = self.summaries.get("curve") or self.store.readJSON("curve.json")
            table = self.store.readTable("curve_levels.csv")
            self._curve = EffectiveCurve(summary["lambda0"], table["lambda"].values, table["theta_minus"].values,
                                         table["theta_plus"].values, summary["thetaMinus0"], summary["thetaPlus0"],
                                         summary["window"], summary["seeds"], summary["criticalBracket"])
        return self._curve

    def validateStage(self):
        from .environment import validateEnvironment, decomposeComponents
        env = self.environment()
        window = self.window()
        report = validateEnvironment(env, dx=self.cfg.number("validate_dx"), window=window,
                                     aTol=self.cfg.number("a_tol"))
        decomposition = decomposeComponents(env, window, self.cfg.number("a_tol"), self.cfg.number("validate_dx"))
        if not report.passed:
            logger.warning("environment fails %s", ", ".join(report.failed()))
        text = report.toText() + "zero set = {} features, {} components of a > 0\n".format(
            len(decomposition.features), len(decomposition.components))
        summary = {"passed": report.passed, "failed": report.failed(), "window": list(window),
                   "hasZero": decomposition.hasZero}
        return summary, [self.store.writeText("validation.txt", text)]

    def criticalValueStage(self):
        solver = self.solver()
        critical = solver.criticalValue(self.cfg.number("tol_lambda"))
        self._critical = critical
        text = ("lambda0 = {!r}\nbracket = [{!r}, {!r}]\nevaluations = {}\nsup lambda-hat on the zero set = {!r}\n"
                "min H = {!r}\n").format(critical.level, critical.lo, critical.hi, len(critical.evaluations),
                                         solver.supLambdaHat, solver.minimumLevel())
        summary = {"lambda0": critical.level, "lo": critical.lo, "hi": critical.hi,
                   "evaluations": len(critical.evaluations), "supLambdaHat": solver.supLambdaHat}
        return summary, [self.store.writeText("critical.txt", text)]

    def correctorStage(self):
        import pandas as pd
        from .cell import MINUS, PLUS, bridgeSupersolution, residual
        from .hamlib import holderBound, lipschitzBound
        solver = self.solver()
        env = self.environment()
        H = env.hamiltonian
        lambda0 = self.critical().level
        files, entries, lines = [], [], []

        def write(name, minus, plus):
            frame = pd.DataFrame({"x": plus.grid, "f_minus": minus.f, "f_plus": plus.f, "u_minus": minus.u,
                                  "u_plus": plus.u, "provenance_minus": minus.provenance,
                                  "provenance_plus": plus.provenance},
                                 columns=["x", "f_minus", "f_plus", "u_minus", "u_plus", "provenance_minus",
                                          "provenance_plus"])
            files.append(self.store.writeTable(name, frame))

        for index, offset in enumerate(self.cfg.numberList("corrector_levels")):
            level = lambda0 + offset
            minus = solver.buildCorrector(level, MINUS)
            plus = solver.buildCorrector(level, PLUS)
            name = "corrector_{}.csv".format(index)
            write(name, minus, plus)
            residuals = (residual(env, minus), residual(env, plus))
            bridge = bridgeSupersolution(env, minus, plus, float(solver.zeroSamples[0]))
            K = lipschitzBound(H.alpha0, H.alpha1, H.gamma, env.diffusion.kappa, level, self.cfg.number("c_gamma"))
            holder, exponent = holderBound(H.alpha0, H.gamma, level, self.cfg.number("c_gamma"))
            observed = float(max(np.max(np.abs(minus.f)), np.max(np.abs(plus.f))))
            entries.append({"file": name, "level": level, "residualMinus": residuals[0],
                            "residualPlus": residuals[1], "lipschitzBound": K, "observedSlope": observed,
                            "bridgePassed": bridge.passed})
            lines.append("level = {!r} ({})\n  residual minus = {!r} plus = {!r}\n  max |f| = {!r} <= K = {!r}\n"
                         "  Holder bound = {!r} |x - y|^{!r}\n  bridge at {!r}: {} worst={!r}".format(
                             level, name, residuals[0], residuals[1], observed, K, holder, exponent,
                             float(solver.zeroSamples[0]), "pass" if bridge.passed else "FAIL", bridge.worst))

        write("corrector_limit.csv", solver.limitCorrector(lambda0, MINUS), solver.limitCorrector(lambda0, PLUS))
        lines.append("limit corrector at lambda0 = {!r} (corrector_limit.csv)".format(lambda0))
        files.append(self.store.writeText("corrector.txt", "\n".join(lines) + "\n"))
        return {"lambda0": lambda0, "levels": entries, "limit": "corrector_limit.csv"}, files

    def curveStage(self):
        from .effective import auditCurve, buildEffectiveCurve
        env = self.environment()
        H = env.hamiltonian
        curve = buildEffectiveCurve(env, self.solver(), self.gridSpec(), settings=self.cellSettings(),
                                    threads=self.threads, critical=self.critical())
        self._curve = curve
        audit = auditCurve(curve, H.alpha0, H.alpha1, H.gamma, self.cfg.number("audit_tol"))
        hbar = curve.hbarTable(self.thetaGrid(curve))
        closedForm = float(np.max(np.abs(hbar["hbar"].values - np.abs(hbar["theta"].values) ** H.gamma)))
        files = [self.store.writeTable("curve_levels.csv", curve.levelTable()),
                 self.store.writeTable("curve_hbar.csv", hbar),
                 self.store.writeText("audit.txt", audit.toText())]
        summary = {"lambda0": curve.lambda0, "thetaMinus0": curve.thetaMinus0, "thetaPlus0": curve.thetaPlus0,
                   "window": list(curve.window), "seeds": curve.seeds, "criticalBracket": list(curve.criticalBracket),
                   "auditPassed": audit.passed, "auditFailed": [c.hypothesis for c in audit.checks if not c.passed],
                   "closedFormError": closedForm}
        return summary, files

    def stabilityStage(self):
        import pandas as pd
        from .effective import StabilityRow, stabilityStudy
        curve = self.curve()
        rows = stabilityStudy(self.environment(), curve.window, self.cfg.integerList("strictify_levels"),
                              self.thetaGrid(curve), self.gridSpec(), self.cellSettings(), self.threads)
        frame = pd.DataFrame([r._asdict() for r in rows], columns=list(StabilityRow._fields))
        bounded = all(r.hamiltonianDistance <= r.distanceBound for r in rows)
        shrinking = rows[-1].hbarDistance <= rows[0].hbarDistance
        summary = {"passed": bounded and shrinking, "hbarDistances": [r.hbarDistance for r in rows]}
        return summary, [self.store.writeTable("stability.csv", frame)]

    def verifyStage(self):
        from .parabolic import homogenizationTest
        curve = self.curve()
        lo, hi = curve.thetaRange
        thetas = [t for t in self.cfg.numberList("verify_thetas") if lo <= t <= hi]
        if len(thetas) < len(self.cfg.numberList("verify_thetas")):
            logger.warning("verify thetas outside [%r, %r] dropped", lo, hi)
        if not thetas:
            raise PipelineError("verify", "no verify theta inside the curve range [{!r}, {!r}]".format(lo, hi))
        report = homogenizationTest(self.environment(), curve, thetas, self.schemeConfig(),
                                    self.cfg.number("verify_tol"), self.threads)
        files = [self.store.writeTable("verify.csv", report.toFrame()),
                 self.store.writeText("verify.txt", report.toText())]
        trajectories = []
        for index, estimate in enumerate(report.estimates):
            name = "trajectory_{}.csv".format(index)
            files.append(self.store.writeTable(name, estimate.run.trajectoryTable()))
            trajectories.append({"file": name, "theta": estimate.run.theta})
        summary = {"passed": report.passed, "maxRelativeError": report.maxRelativeError,
                   "trajectories": trajectories}
        return summary, files

    def failedGates(self):
        checks = {
            "validation": ("validate", lambda s: s["passed"]),
            "audit": ("curve", lambda s: s["auditPassed"]),
            "closed-form": ("curve", lambda s: s["closedFormError"] <= self.cfg.number("closed_form_tol")),
            "stability": ("stability", lambda s: s["passed"]),
            "verify": ("verify", lambda s: s["passed"]),
        }
        failed = []
        for gate in self.cfg.gates():
            stage, predicate = checks[gate]
            if stage not in self.summaries:
                printTraceStatement("Gate {} not evaluated: stage {} did not run".format(gate, stage))
                continue
            if not predicate(self.summaries[stage]):
                failed.append(AcceptanceError(gate, "seed {}".format(self.seed)))
        return failed


def _stagesFor(verb):
    from .storage import Stages
    return Stages.upTo(Stages.STABILITY if verb == Stages.CURVE else verb)


def runSweep(cfg, store, seeds, threads, fresh):
    """One curve per seed in `seed-<n>` subdirectories plus the aggregate tables."""
    import pandas as pd
    from .storage import ArtifactStore, Stages

    stages = [Stages.VALIDATE, Stages.CRITICAL_VALUE, Stages.CURVE]

    def pipelineFor(seed, ignoreCheckpoints):
        return Pipeline(cfg, ArtifactStore(store.path("seed-{}".format(seed))), seed, 1, ignoreCheckpoints)

    def job(seed):
        pipelineFor(seed, fresh).run(stages)

    # Workers leave their stages checkpointed; the reload below reads them back
    scheduleJobs(job, [(seed,) for seed in seeds], threads)
    pipelines = [pipelineFor(seed, False) for seed in seeds]
    for pipeline in pipelines:
        pipeline.run(stages)

    curves = [p.curve() for p in pipelines]
    lo = max(c.thetaRange[0] for c in curves)
    hi = min(c.thetaRange[1] for c in curves)
    thetaMax = cfg.number("theta_max")
    thetas = np.linspace(max(-thetaMax, lo), min(thetaMax, hi), cfg.integer("theta_points"))
    values = np.array([c(thetas) for c in curves])

    perSeed = pd.DataFrame({"seed": seeds, "lambda0": [c.lambda0 for c in curves],
                            "theta_minus0": [c.thetaMinus0 for c in curves],
                            "theta_plus0": [c.thetaPlus0 for c in curves]},
                           columns=["seed", "lambda0", "theta_minus0", "theta_plus0"])
    columns = {"theta": thetas, "hbar_mean": values.mean(axis=0),
               "hbar_std": values.std(axis=0, ddof=1) if len(seeds) > 1 else np.zeros_like(thetas)}
    store.writeTable("sweep.csv", perSeed)
    store.writeTable("sweep_hbar.csv", pd.DataFrame(columns, columns=["theta", "hbar_mean", "hbar_std"]))
    spread = ["{} mean = {!r} std = {!r}".format(name, float(perSeed[name].mean()),
                                                  float(perSeed[name].std(ddof=1)) if len(seeds) > 1 else 0.0)
              for name in ("lambda0", "theta_minus0", "theta_plus0")]
    store.writeText("sweep.txt", "seeds = {}\n".format(", ".join(str(s) for s in seeds)) + "\n".join(spread) + "\n")
    return [gate for p in pipelines for gate in p.failedGates()]


def runPipeline(options, environ=None):
    """Runs the stages of `options.verb`; returns (exit status, artifact directory)."""
    from .storage import ArtifactStore, RunManifest
    environ = os.environ if environ is None else environ
    configFile = options.config or environ.get("HJHOM_CONFIG")
    fresh = bool(options.fresh) or environ.get("HJHOM_FRESH", "") not in ("", "0")

    with Configuration(configFile, resolveOverrides(options, environ)) as cfg:
        store = ArtifactStore(cfg.text("out"))
        threads = cfg.integer("threads")
        seeds = [cfg.integer("seed")]
        if options.verb == "sweep":
            seeds = cfg.integerList("seeds") or seeds
            failed = runSweep(cfg, store, seeds, threads, fresh)
            window = Pipeline(cfg, store, seeds[0]).window()
        else:
            pipeline = Pipeline(cfg, store, seeds[0], threads, fresh)
            pipeline.run(_stagesFor(options.verb))
            failed = pipeline.failedGates()
            window = pipeline.window()

        tolerances = {key: cfg.number(key) for key in ("tol_lambda", "junction_tol", "ode_rtol", "ode_atol",
                                                       "a_tol", "audit_tol", "verify_tol")}
        RunManifest(getStringHash(cfg.canonicalText()), seeds, window, tolerances, options.verb).save(store)

    for gate in failed:
        printErrStr("hjhom: {}".format(gate))
    return (EXIT_ACCEPTANCE if failed else EXIT_SUCCESS), store.directory


def emitPlotsData(artifactDir):
    """Normalized plot tables under `plots/`; raises PipelineError naming missing artifacts."""
    import pandas as pd
    from .storage import ArtifactStore, RunManifest
    store = ArtifactStore(artifactDir)
    required = ["curve_hbar.csv", "curve_levels.csv", "corrector.json", "verify.json"]
    missing = [name for name in required if not store.exists(name)]
    if not missing:
        correctors = store.readJSON("corrector.json")["levels"]
        trajectories = store.readJSON("verify.json")["trajectories"]
        missing = [entry["file"] for entry in correctors + trajectories if not store.exists(entry["file"])]
    if missing:
        raise PipelineError("emit", "missing artifacts in {}: {}".format(store.directory, ", ".join(missing)))

    written = [store.writeTable("plots/hbar.csv", store.readTable("curve_hbar.csv")[["theta", "hbar"]]),
               store.writeTable("plots/theta.csv",
                                store.readTable("curve_levels.csv")[["lambda", "theta_minus", "theta_plus"]])]

    frames = []
    for entry in correctors:
        table = store.readTable(entry["file"])[["x", "f_minus", "f_plus"]]
        table.insert(0, "lambda", entry["level"])
        frames.append(table)
    written.append(store.writeTable("plots/correctors.csv", pd.concat(frames, ignore_index=True)))

    frames = []
    for entry in trajectories:
        table = store.readTable(entry["file"])[["t", "u0_over_t"]]
        table.insert(0, "theta", entry["theta"])
        frames.append(table)
    written.append(store.writeTable("plots/traces.csv", pd.concat(frames, ignore_index=True)))

    if store.exists(RunManifest.FILE_NAME):
        RunManifest.refreshOutputs(store)
    return [store.path(name) for name in written]


def main(argv=None):
    parser = argparse.ArgumentParser(description="hjhom v" + VERSION)
    parser.add_argument("verb", choices=VERBS, help="pipeline stage to run up to, or 'sweep' / 'emit'")
    parser.add_argument("--config", dest="config", default=None,
                        help="configuration file (schema {}); also HJHOM_CONFIG".format(CONFIG_SCHEMA))
    parser.add_argument("--seed", dest="seed", type=int, default=None, help="environment seed")
    parser.add_argument("--window", dest="window", type=float, default=None, help="window length")
    parser.add_argument("--threads", dest="threads", type=int, default=None, help="worker threads")
    parser.add_argument("--fresh", dest="fresh", action="store_true", help="ignore stage checkpoints")
    parser.add_argument("--tol-lambda", dest="tol_lambda", type=float, default=None,
                        help="bisection tolerance of the critical value")
    parser.add_argument("--out", dest="out", default=None, help="artifact directory")
    options = parser.parse_args(argv)

    logging.basicConfig(format='%(asctime)s [%(levelname)s]: %(message)s',
                        level=logging.DEBUG if "HJHOM_LOG" in os.environ else logging.WARNING)

    try:
        if options.verb == "emit":
            out = options.out or os.environ.get("HJHOM_OUT")
            if out is None:
                with Configuration(options.config or os.environ.get("HJHOM_CONFIG")) as cfg:
                    out = cfg.text("out")
            for path in emitPlotsData(out):
                print(path)
            return EXIT_SUCCESS
        status, directory = runPipeline(options)
        print(directory)
        return status
    except ConfigurationError as e:
        printErrStr("hjhom: {}".format(e))
        return EXIT_FAILURE
    except PipelineError as e:
        printErrStr("hjhom: {}".format(e))
        return EXIT_FAILURE


class ProfilerError(Exception):
    def __init__(self, returnCode):
        self.returnCode = returnCode


def mainWrapper():
    if 'HJHOM_PROFILE' in os.environ:
        INVOCATION_HASH = getStringHash(','.join(sys.argv))
        CALL_SCRIPT = '''
import hjhom.__main__
returnCode = hjhom.__main__.main()
if returnCode != 0:
    raise hjhom.__main__.ProfilerError(returnCode)
'''
        try:
            cProfile.run(CALL_SCRIPT, filename='hjhom-{}.prof'.format(INVOCATION_HASH))
        except ProfilerError as e:
            sys.exit(e.returnCode)
    else:
        sys.exit(main())


if __name__ == '__main__':
    mainWrapper()
