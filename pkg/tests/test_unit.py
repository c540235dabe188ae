#!/usr/bin/env python
#
# This file is part of the hjhom project.
#
# The contents of this file are subject to the BSD 3-Clause License, the
# full text of which is available in the accompanying LICENSE file at the
# root directory of this project.
#
# In Python unittests are always members, not functions. Silence lint in this file.
# pylint: disable=no-self-use
#
from argparse import Namespace
from contextlib import contextmanager
from collections import namedtuple
import os
import pickle
import tempfile
import unittest

import numpy as np
import pandas as pd

from hjhom import __main__ as hjhom

from hjhom.__main__ import (
    Configuration,
    Pipeline,
    PersistentJSONDict,
    emitPlotsData,
    parseConfigText,
    resolveOverrides,
)
from hjhom.__main__ import (
    AcceptanceError,
    ConfigurationError,
    PipelineError,
)
from hjhom import cell, effective, environment, hamlib, jobs, parabolic
from hjhom.cell import CellSettings, MINUS, PLUS
from hjhom.environment import DiffusionField, HamiltonianField, HypothesisViolation, WindowError
from hjhom.storage import ArtifactStore, RunManifest, Stages

ASSETS_DIR = os.path.join(os.path.dirname(__file__), "unittests")
CONFIGS_DIR = os.path.join(ASSETS_DIR, "configs")

FAST = CellSettings(dx=0.01)


@contextmanager
def cd(targetDirectory):
    oldDirectory = os.getcwd()
    os.chdir(os.path.expanduser(targetDirectory))
    try:
        yield
    finally:
        os.chdir(oldDirectory)


def temporaryFileName():
    with tempfile.NamedTemporaryFile() as f:
        return f.name


def powerEnvironment(**extra):
    spec = {"family": "periodic", "diffusion": "sin2", "hamiltonian": "power", "gamma": 3.0}
    spec.update(extra)
    return environment.sampleEnvironment(spec, 0)


def bumpEnvironment():
    return powerEnvironment(potential_height=0.5, potential_width=0.25)


def shiftedPower(shift, floor):
    return HamiltonianField(lambda x, p: np.abs(p - shift) ** 3 + floor + 0.0 * np.asarray(x), 1.0, 3.0, 3.0,
                            xIndependent=True)


class TestHelperFunctions(unittest.TestCase):
    def testGetStringHash(self):
        self.assertEqual(hjhom.getStringHash("gamma=3"), hjhom.getStringHash("gamma=3"))
        self.assertNotEqual(hjhom.getStringHash("gamma=3"), hjhom.getStringHash("gamma=4"))
        self.assertEqual(len(hjhom.getStringHash("")), 32)

    def testEnsureDirectoryExists(self):
        with tempfile.TemporaryDirectory() as tempDir:
            path = os.path.join(tempDir, "a", "b")
            hjhom.ensureDirectoryExists(path)
            hjhom.ensureDirectoryExists(path)
            self.assertTrue(os.path.isdir(path))

    def testUniformGrid(self):
        grid = environment.uniformGrid(0.0, 1.0, 0.3)
        self.assertEqual(grid[0], 0.0)
        self.assertEqual(grid[-1], 1.0)
        self.assertLessEqual(np.max(np.diff(grid)), 0.3)
        self.assertEqual(environment.uniformGrid(0.0, 1.0, 10.0).size, 3)


class TestPersistentJSONDict(unittest.TestCase):
    def testBrokenFile(self):
        d = PersistentJSONDict(os.path.join(ASSETS_DIR, "broken_json.txt"))
        self.assertNotIn("a", d)

    def testSaveOnlyWhenDirty(self):
        fileName = temporaryFileName()
        d = PersistentJSONDict(fileName)
        d.save()
        self.assertFalse(os.path.exists(fileName))
        d["stage"] = {"hash": "abc"}
        d.save()
        self.assertEqual(PersistentJSONDict(fileName)["stage"], {"hash": "abc"})
        os.remove(fileName)


class TestParseConfigText(unittest.TestCase):
    def testCommentsAndWhitespace(self):
        values = parseConfigText("# leading comment\n\nschema = hjhom-config/1\n  gamma=3   # trailing\n")
        self.assertEqual(values, {"schema": "hjhom-config/1", "gamma": "3"})

    def testSchemaFirst(self):
        with self.assertRaises(ConfigurationError) as cm:
            parseConfigText("gamma = 3\nschema = hjhom-config/1\n")
        self.assertEqual(cm.exception.field, "schema")

    def testWrongSchema(self):
        with self.assertRaises(ConfigurationError) as cm:
            parseConfigText("schema = hjhom-config/0\n")
        self.assertEqual(cm.exception.field, "schema")

    def testMalformedLine(self):
        with self.assertRaises(ConfigurationError) as cm:
            parseConfigText("schema = hjhom-config/1\ngamma 3\n")
        self.assertEqual(cm.exception.field, "line 2")

    def testDuplicateKey(self):
        with self.assertRaises(ConfigurationError) as cm:
            parseConfigText("schema = hjhom-config/1\ngamma = 3\ngamma = 4\n")
        self.assertEqual(cm.exception.field, "gamma")


class TestConfiguration(unittest.TestCase):
    def testOpenClose(self):
        with Configuration(os.path.join(CONFIGS_DIR, "quickstart.cfg")):
            pass

    def testDefaults(self):
        with Configuration() as cfg:
            self.assertEqual(cfg.number("gamma"), 3.0)
            self.assertEqual(cfg.integer("threads"), 1)
            self.assertEqual(cfg.gates(), [])
            self.assertEqual(cfg.numberList("corrector_levels"), [0.5, 1.0])
            self.assertIsNone(cfg.optionalNumber("lambda_max"))

    def testFileValues(self):
        with Configuration(os.path.join(CONFIGS_DIR, "quickstart.cfg")) as cfg:
            self.assertEqual(cfg.number("grid_dx"), 0.01)
            self.assertEqual(cfg.integer("theta_points"), 31)
            self.assertEqual(cfg.environmentSpec()["hamiltonian"], "power")

    def testUnknownKey(self):
        with self.assertRaises(ConfigurationError) as cm:
            with Configuration(os.path.join(CONFIGS_DIR, "unknown_key.cfg")):
                pass
        self.assertEqual(cm.exception.field, "window_lenght")

    def testBadValue(self):
        with self.assertRaises(ConfigurationError) as cm:
            with Configuration(os.path.join(CONFIGS_DIR, "bad_value.cfg")):
                pass
        self.assertEqual(cm.exception.field, "gamma")

    def testMissingSchema(self):
        with self.assertRaises(ConfigurationError) as cm:
            with Configuration(os.path.join(CONFIGS_DIR, "no_schema.cfg")):
                pass
        self.assertEqual(cm.exception.field, "schema")

    def testMissingFile(self):
        with self.assertRaises(ConfigurationError) as cm:
            with Configuration(temporaryFileName()):
                pass
        self.assertEqual(cm.exception.field, "config")

    def testUnknownGate(self):
        with self.assertRaises(ConfigurationError) as cm:
            with Configuration(overrides={"accept": "validation, speed"}):
                pass
        self.assertEqual(cm.exception.field, "accept")

    def testOverridesBeatFile(self):
        with Configuration(os.path.join(CONFIGS_DIR, "quickstart.cfg"), {"grid_dx": "0.02", "seed": None}) as cfg:
            self.assertEqual(cfg.number("grid_dx"), 0.02)
            self.assertEqual(cfg.integer("seed"), 0)

    def testFlagBeatsEnvironmentVariable(self):
        options = Namespace(seed=7, window=None, threads=None, tol_lambda=None, out=None)
        overrides = resolveOverrides(options, {"HJHOM_SEED": "3", "HJHOM_THREADS": "4"})
        self.assertEqual(overrides["seed"], 7)
        self.assertEqual(overrides["threads"], "4")
        self.assertIsNone(overrides["window_length"])

    def testCanonicalTextIgnoresThreads(self):
        with Configuration(overrides={"threads": "1"}) as one, Configuration(overrides={"threads": "8"}) as eight:
            self.assertEqual(one.canonicalText(), eight.canonicalText())
        with Configuration(overrides={"gamma": "4"}) as other, Configuration() as default:
            self.assertNotEqual(other.canonicalText(), default.canonicalText())


class TestArtifactStore(unittest.TestCase):
    def testTablesRoundTrip(self):
        with tempfile.TemporaryDirectory() as tempDir:
            store = ArtifactStore(tempDir)
            frame = pd.DataFrame({"theta": [0.0, 0.5], "hbar": [0.0, 0.125]}, columns=["theta", "hbar"])
            store.writeTable("curve_hbar.csv", frame)
            with open(store.path("curve_hbar.csv")) as f:
                self.assertEqual(f.readline().strip(), "theta,hbar")
            self.assertEqual(store.readTable("curve_hbar.csv")["hbar"].tolist(), [0.0, 0.125])

    def testInventory(self):
        with tempfile.TemporaryDirectory() as tempDir:
            store = ArtifactStore(tempDir)
            store.writeText("b.txt", "b\n")
            store.writeJSON("plots/a.json", {"x": 1})
            RunManifest("0" * 32, [0], (0.0, 1.0), {"tol_lambda": 1e-7}, "validate").save(store)
            self.assertEqual(store.inventory(), ["b.txt", "plots/a.json"])
            document = store.readJSON(RunManifest.FILE_NAME)
            self.assertEqual(document["format"], RunManifest.MANIFEST_FILE_FORMAT_VERSION)
            self.assertEqual(document["outputs"], ["b.txt", "plots/a.json"])
            self.assertEqual(document["window"], [0.0, 1.0])
            self.assertIn("numpy", document["versions"])

    def testCheckpoints(self):
        with tempfile.TemporaryDirectory() as tempDir:
            store = ArtifactStore(tempDir)
            store.writeText("critical.txt", "lambda0 = 0\n")
            with store.checkpoints() as checkpoints:
                self.assertFalse(checkpoints.isCurrent(Stages.CRITICAL_VALUE, "h1"))
                # stages are only ever recorded, never withdrawn
                self.assertFalse(hasattr(checkpoints, "forget"))
                checkpoints.record(Stages.CRITICAL_VALUE, "h1", ["critical.txt"])
            with store.checkpoints() as checkpoints:
                self.assertTrue(checkpoints.isCurrent(Stages.CRITICAL_VALUE, "h1"))
                self.assertFalse(checkpoints.isCurrent(Stages.CRITICAL_VALUE, "h2"))
            os.remove(store.path("critical.txt"))
            with store.checkpoints() as checkpoints:
                self.assertFalse(checkpoints.isCurrent(Stages.CRITICAL_VALUE, "h1"))

    def testStageOrder(self):
        self.assertEqual(Stages.upTo(Stages.CRITICAL_VALUE), [Stages.VALIDATE, Stages.CRITICAL_VALUE])
        self.assertEqual(Stages.upTo(Stages.VERIFY)[-1], Stages.VERIFY)


class TestEnvironment(unittest.TestCase):
    def testRandomSamplingIsReproducible(self):
        spec = {"family": "random", "potential_height": 0.5, "extent_length": 40}
        xs = np.linspace(-10.0, 10.0, 401)
        first = environment.sampleEnvironment(spec, 5)
        second = environment.sampleEnvironment(spec, 5)
        other = environment.sampleEnvironment(spec, 6)
        np.testing.assert_array_equal(first.a(xs), second.a(xs))
        np.testing.assert_array_equal(first.H(xs, 0.7), second.H(xs, 0.7))
        self.assertFalse(np.array_equal(first.a(xs), other.a(xs)))

    def testShiftComposesOffsets(self):
        env = bumpEnvironment()
        xs = np.linspace(0.0, 1.0, 11)
        shifted = environment.shift(env, 0.3)
        np.testing.assert_allclose(shifted.a(xs), env.a(xs + 0.3))
        np.testing.assert_allclose(shifted.H(xs, 0.5), env.H(xs + 0.3, 0.5))
        np.testing.assert_allclose(shifted.shifted(-0.3).a(xs), env.a(xs))
        self.assertFalse(hasattr(shifted.hamiltonian, "withConstants"))

    def testConstantDiffusionRejected(self):
        with self.assertRaises(HypothesisViolation) as cm:
            environment.sampleEnvironment({"diffusion": "constant", "diffusion_value": 0.25}, 0)
        self.assertEqual(cm.exception.hypothesis, "A1")
        self.assertIn("(A1)", str(cm.exception))

    def testSublinearGrowthRejected(self):
        with self.assertRaises(HypothesisViolation) as cm:
            environment.sampleEnvironment({"gamma": 1.0}, 0)
        self.assertEqual(cm.exception.hypothesis, "H1")

    def testDefaultGrowthConstants(self):
        H = powerEnvironment().hamiltonian
        self.assertEqual((H.alpha0, H.alpha1), (1.0, 3.0))
        self.assertTrue(H.xIndependent)
        self.assertFalse(bumpEnvironment().hamiltonian.xIndependent)

    def testValidatePower(self):
        report = environment.validateEnvironment(bumpEnvironment())
        self.assertTrue(report.passed, report.toText())
        self.assertEqual(report.check("sqC").note, "eta = 0, not required")

    def testValidateDoubleWell(self):
        env = environment.sampleEnvironment({"hamiltonian": "double-well"}, 0)
        report = environment.validateEnvironment(env)
        self.assertFalse(report.check("qC").passed)
        self.assertIn("qC", report.failed())
        self.assertTrue(report.check("A1").passed)

    def testValidatePinned(self):
        env = environment.sampleEnvironment({"hamiltonian": "pinned", "gamma": 2.0, "drift_height": 1.0}, 0)
        report = environment.validateEnvironment(env)
        self.assertFalse(report.check("qC").passed)
        self.assertAlmostEqual(abs(report.check("qC").witness[0] - 0.5), 0.0, delta=0.25)

    def testValidateStrictModulus(self):
        H = hamlib.strictify(powerEnvironment().hamiltonian, 4)
        env = environment.Environment(powerEnvironment().diffusion, H)
        self.assertTrue(environment.validateEnvironment(env).check("sqC").passed)

    def testDecomposePeriodic(self):
        decomposition = environment.decomposeComponents(powerEnvironment(), (0.0, 3.0), dx=0.01)
        self.assertEqual(decomposition.features, [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)])
        self.assertEqual(len(decomposition.interiorComponents()), 3)
        self.assertEqual(decomposition.trimmedWindow(), (0.0, 3.0))
        self.assertEqual(decomposition.flags, [])

    def testDecomposeWithoutZero(self):
        decomposition = environment.decomposeComponents(powerEnvironment(), (0.2, 0.8), dx=0.01)
        self.assertFalse(decomposition.hasZero)
        self.assertEqual(decomposition.flags, ["no-zero"])
        with self.assertRaises(WindowError):
            decomposition.trimmedWindow()

    def testDecomposeEmptyWindow(self):
        with self.assertRaises(WindowError):
            environment.decomposeComponents(powerEnvironment(), (1.0, 1.0))

    def testZeroPlateau(self):
        diffusion = DiffusionField(lambda x: np.maximum(np.abs(x) - 0.5, 0.0), 1.0)
        features = environment.zeroFeatures(diffusion, -2.0, 2.0, 1e-10, 0.01)
        self.assertEqual(len(features), 1)
        left, right = features[0]
        self.assertAlmostEqual(left, -0.5, places=4)
        self.assertAlmostEqual(right, 0.5, places=4)

    def testIsolatedZeroWithoutAnchors(self):
        diffusion = DiffusionField.fromSamples([0.0, 0.3137, 1.0], [1.0, 0.0, 1.0])
        features = environment.zeroFeatures(diffusion, 0.0, 1.0, 1e-10, 0.01)
        self.assertEqual(len(features), 1)
        self.assertAlmostEqual(features[0][0], 0.3137, places=6)

    def testEndpointDrift(self):
        env = powerEnvironment()
        coarse = environment.decomposeComponents(env, (0.0, 2.0), dx=0.01)
        fine = environment.decomposeComponents(env, (0.0, 2.0), dx=0.005)
        self.assertLess(environment.endpointDrift(coarse, fine), 1e-12)


class TestHamlib(unittest.TestCase):
    def testMinProfile(self):
        lambdaHat, pHat = hamlib.minProfile(shiftedPower(0.3, 0.2), 0.0)
        self.assertAlmostEqual(lambdaHat, 0.2, places=10)
        self.assertAlmostEqual(pHat, 0.3, places=4)

    def testMinProfileFlatBottom(self):
        H = HamiltonianField(lambda x, p: np.maximum(np.abs(p) - 1.0, 0.0) ** 3 + 0.0 * np.asarray(x),
                             0.25, 3.0, 3.0, xIndependent=True)
        lambdaHat, pHat = hamlib.minProfile(H, 0.0)
        self.assertEqual(lambdaHat, 0.0)
        self.assertAlmostEqual(pHat, 0.0, places=6)

    def testMinProfileQuarticArgmin(self):
        # flat to rounding around p = 1, where bounded Brent alone stalls near 1e-4
        H = HamiltonianField(lambda x, p: (np.asarray(p) - 1.0) ** 4 + 2.0 + 0.0 * np.asarray(x), 1.0, 3.0, 4.0,
                             slope=lambda x, p: 4.0 * (np.asarray(p) - 1.0) ** 3 + 0.0 * np.asarray(x),
                             xIndependent=True)
        lambdaHat, pHat = hamlib.minProfile(H, 0.0)
        self.assertEqual(lambdaHat, 2.0)
        self.assertLess(abs(pHat - 1.0), 1e-8)

    def testMinProfileTable(self):
        env = bumpEnvironment()
        xs = np.linspace(0.0, 1.0, 21)
        profile = hamlib.MinProfile(env.hamiltonian, xs)
        np.testing.assert_allclose(profile.lambdaHat, env.H(xs, 0.0), atol=1e-10)
        self.assertGreater(profile.kappaHat, 0.0)

    def testSublevelEndpoints(self):
        ends = hamlib.sublevelEndpoints(shiftedPower(0.0, 0.0), 0.0, 8.0)
        self.assertAlmostEqual(ends.pMinus, -2.0, places=9)
        self.assertAlmostEqual(ends.pPlus, 2.0, places=9)

    def testSublevelAtMinimum(self):
        ends = hamlib.sublevelEndpoints(shiftedPower(0.0, 0.0), 0.0, 0.0, profile=(0.0, 0.0))
        self.assertEqual((ends.pMinus, ends.pPlus), (0.0, 0.0))

    def testEmptySublevel(self):
        with self.assertRaises(hamlib.EmptySublevelError) as cm:
            hamlib.sublevelEndpoints(shiftedPower(0.0, 0.2), 0.0, 0.1)
        self.assertAlmostEqual(cm.exception.lambdaHat, 0.2, places=9)

    def testSublevelArrays(self):
        env = bumpEnvironment()
        xs = np.linspace(0.0, 1.0, 11)
        pMinus, pPlus = hamlib.sublevelArrays(env.hamiltonian, xs, 2.0)
        np.testing.assert_allclose(env.H(xs, pPlus), 2.0, atol=1e-9)
        np.testing.assert_allclose(pMinus, -pPlus, atol=1e-9)

    def testLipschitzBoundScaling(self):
        base = hamlib.lipschitzBound(1.0, 3.0, 3.0, 1.0, 1.0)
        self.assertGreater(hamlib.lipschitzBound(1.0, 3.0, 3.0, 2.0, 1.0), base)
        self.assertGreater(hamlib.lipschitzBound(1.0, 3.0, 3.0, 1.0, 4.0), base)
        self.assertGreater(hamlib.lipschitzBound(0.5, 3.0, 3.0, 1.0, 1.0), base)

    def testHolderBound(self):
        K, exponent = hamlib.holderBound(1.0, 3.0, 1.0)
        self.assertAlmostEqual(exponent, 0.5)
        self.assertGreater(K, 0.0)
        with self.assertRaises(hamlib.UnsupportedExponentError):
            hamlib.holderBound(1.0, 2.0, 1.0)

    def testStrictifyIndependent(self):
        H = powerEnvironment().hamiltonian
        Hn = hamlib.strictify(H, 4)
        ps = np.linspace(-2.0, 2.0, 801)
        distance = np.max(np.abs(Hn(0.0, ps) - H(0.0, ps)))
        self.assertLessEqual(distance, hamlib.strictifyBound(H, 4, 2.0))
        self.assertGreater(Hn.eta, 0.0)
        self.assertEqual(Hn.gamma, 4.0)
        right = Hn(0.0, ps[ps > 0.0])
        self.assertTrue(np.all(np.diff(right) > 0.0))

    def testStrictifyPeriodic(self):
        H = bumpEnvironment().hamiltonian
        Hn = hamlib.strictify(H, 4)
        xs = np.linspace(0.0, 1.0, 33)
        ps = np.linspace(-2.0, 2.0, 201)
        distance = np.max(np.abs(Hn(xs[:, None], ps[None, :]) - H(xs[:, None], ps[None, :])))
        self.assertLessEqual(distance, hamlib.strictifyBound(H, 4, 2.0))
        self.assertGreater(distance, 0.4)

    def testStrictifyRejectsLevelZero(self):
        with self.assertRaises(hamlib.HamiltonianError):
            hamlib.strictify(powerEnvironment().hamiltonian, 0)


class TestCellProblem(unittest.TestCase):
    def testCriticalValueOfPower(self):
        critical = cell.criticalValue(powerEnvironment(), (0.0, 1.0), tolLambda=1e-7, settings=FAST)
        self.assertLessEqual(critical.lo, critical.level)
        self.assertLessEqual(critical.level, critical.hi)
        self.assertLess(abs(critical.level), 1e-6)

    def testFeasibilityBelowZeroSet(self):
        report = cell.feasibility(powerEnvironment(), (0.0, 1.0), -0.1, settings=FAST)
        self.assertFalse(report.feasible)
        self.assertFalse(report.zeroSetOk)
        self.assertIn("feasible = no", report.toText())

    def testFeasibilityAboveCritical(self):
        report = cell.feasibility(bumpEnvironment(), (0.0, 2.0), 2.0, settings=FAST)
        self.assertTrue(report.feasible)
        self.assertEqual([v.status for v in report.verdicts], [cell.TRACKED, cell.TRACKED])

    def testObstructedAtCriticalLevel(self):
        env = powerEnvironment()
        decomposition = environment.decomposeComponents(env, (0.0, 1.0), dx=0.01)
        with self.assertRaises(cell.EndpointObstructedError):
            cell.integrateBranch(env, decomposition.components[0], 0.0, PLUS, FAST, decomposition)

    def testConstantBranchesOfPower(self):
        env = powerEnvironment()
        plus = cell.buildCorrector(env, (0.0, 1.0), 8.0, PLUS, settings=FAST)
        minus = cell.buildCorrector(env, (0.0, 1.0), 8.0, MINUS, settings=FAST)
        np.testing.assert_allclose(plus.f, 2.0, atol=1e-6)
        np.testing.assert_allclose(minus.f, -2.0, atol=1e-6)
        self.assertAlmostEqual(float(np.interp(0.0, plus.grid, plus.u)), 0.0)
        self.assertAlmostEqual(plus.u[-1], 2.0, places=5)

    def testResidualOfBumpCorrector(self):
        env = bumpEnvironment()
        profile = cell.buildCorrector(env, (0.0, 1.0), 2.0, PLUS, settings=FAST)
        self.assertLess(cell.residual(env, profile), 5e-2)
        self.assertEqual(profile.provenance[0], cell.ZERO)
        self.assertIn(cell.ODE, set(profile.provenance))

    def testBranchesAreOrderedInLevel(self):
        env = bumpEnvironment()
        solver = cell.solverFor(env, (0.0, 1.0), FAST)
        low = solver.buildCorrector(1.5, PLUS)
        high = solver.buildCorrector(2.0, PLUS)
        self.assertTrue(np.all(high.f >= low.f - 1e-8))
        lowMinus = solver.buildCorrector(1.5, MINUS)
        highMinus = solver.buildCorrector(2.0, MINUS)
        self.assertTrue(np.all(highMinus.f <= lowMinus.f + 1e-8))

    def testThreadsDoNotChangeCorrector(self):
        env = bumpEnvironment()
        single = cell.buildCorrector(env, (0.0, 3.0), 2.0, PLUS, settings=FAST, threads=1)
        pooled = cell.buildCorrector(env, (0.0, 3.0), 2.0, PLUS, settings=FAST, threads=3)
        np.testing.assert_array_equal(single.grid, pooled.grid)
        np.testing.assert_array_equal(single.f, pooled.f)

    def testShiftInvariance(self):
        env = bumpEnvironment()
        base = cell.buildCorrector(env, (0.0, 1.0), 2.0, PLUS, settings=FAST)
        moved = cell.buildCorrector(env.shifted(1.0), (0.0, 1.0), 2.0, PLUS, settings=FAST)
        np.testing.assert_allclose(base.f, moved.f, atol=1e-6)

    def testWindowWithoutZero(self):
        with self.assertRaises(WindowError):
            cell.solverFor(powerEnvironment(), (0.2, 0.8), FAST)

    def testGronwallMerge(self):
        env = powerEnvironment()
        component = environment.Component(0.0, 1.0, True, True)
        report = cell.gronwallMergeCheck(env, component, 1.0, settings=FAST)
        self.assertTrue(report.passed)
        self.assertTrue(report.lemmaPassed)
        self.assertGreater(report.etaEffective, 0.0)
        self.assertTrue(np.all(np.diff(report.gap) <= 1e-12))
        # level lambda0 + 1 with lambda0 = 0; starts 1e-3 apart meet before the middle of the component
        self.assertIsNotNone(report.mergedAt)
        self.assertLess(report.mergedAt, 0.5)
        self.assertLess(float(np.min(report.gap[report.grid < 0.5])), 1e-9)

    def testResidualSkipsZeroCollar(self):
        env = bumpEnvironment()
        profile = cell.buildCorrector(env, (0.0, 1.0), 2.0, PLUS, settings=FAST)
        start, stop = profile.segments[0]
        clean = cell.residual(env, profile)

        atZeros = profile.f.copy()
        atZeros[[start, stop - 1]] += 1.0
        self.assertEqual(cell.residual(env, profile._replace(f=atZeros)), clean)

        inside = profile.f.copy()
        inside[start + 5] += 1.0
        self.assertGreater(cell.residual(env, profile._replace(f=inside)), clean + 1.0)

    def testBatchMatchesSingleComponent(self):
        spec = {"family": "random", "potential_height": 0.5, "potential_width": 0.5, "extent_length": 80}
        solver = cell.solverFor(environment.sampleEnvironment(spec, 3), (-30.0, 30.0), FAST)
        self.assertGreater(len(solver.components), cell.COMPONENT_BATCH)
        batched = solver.branches(2.0, PLUS)
        for index in (0, len(solver.components) // 2, len(solver.components) - 1):
            single = solver.integrateBranch(solver.components[index], 2.0, PLUS)
            np.testing.assert_allclose(batched[index].f, single.f, atol=1e-6)
            self.assertEqual(batched[index].blowDown, single.blowDown)

    def testThreadsDoNotChangeCriticalValue(self):
        spec = {"family": "random", "potential_height": 0.5, "potential_width": 0.5, "extent_length": 80}
        env = environment.sampleEnvironment(spec, 1)
        single = cell.criticalValue(env, (-30.0, 30.0), tolLambda=1e-5, settings=FAST, threads=1)
        pooled = cell.criticalValue(env, (-30.0, 30.0), tolLambda=1e-5, settings=FAST, threads=2)
        self.assertEqual(single.level, pooled.level)
        self.assertEqual(single.evaluations, pooled.evaluations)

    def testTrackedComponentsAreSkipped(self):
        integrated = []

        class CountingSolver(cell.CellSolver):
            def integrateBatch(self, components, level, branch=PLUS, rtol=None, atol=None):
                integrated.extend(components)
                return super(CountingSolver, self).integrateBatch(components, level, branch, rtol, atol)

        env = bumpEnvironment()
        solver = CountingSolver(env, environment.decomposeComponents(env, (0.0, 3.0), dx=0.01), FAST)
        first, rest = solver.components[0], solver.components[1:]
        report = solver.feasibility(2.0, tracked={first: 1.5})
        self.assertTrue(report.feasible)
        self.assertEqual(integrated, rest)
        self.assertEqual(report.verdicts[0].status, cell.TRACKED)

        del integrated[:]
        solver.feasibility(1.0, tracked={first: 1.5})
        self.assertEqual(integrated[0], first)

    def testBridgeSupersolution(self):
        env = powerEnvironment()
        solver = cell.solverFor(env, (0.0, 2.0), FAST)
        minus = solver.buildCorrector(1.0, MINUS)
        plus = solver.buildCorrector(1.0, PLUS)
        report = cell.bridgeSupersolution(env, minus, plus, 1.0)
        self.assertTrue(report.passed)
        self.assertEqual(report.slope[0], minus.f[0])
        self.assertEqual(report.slope[-1], plus.f[-1])

    def testBridgeNeedsSameLevel(self):
        env = powerEnvironment()
        solver = cell.solverFor(env, (0.0, 1.0), FAST)
        with self.assertRaises(cell.CellError):
            cell.bridgeSupersolution(env, solver.buildCorrector(1.0, MINUS), solver.buildCorrector(2.0, PLUS), 0.0)

    def testLimitCorrector(self):
        solver = cell.solverFor(powerEnvironment(), (0.0, 1.0), FAST)
        limit = solver.limitCorrector(0.0, PLUS)
        near = solver.buildCorrector(1e-3, PLUS, checkJunctions=False)
        self.assertEqual(limit.level, 0.0)
        self.assertTrue(np.all(limit.f <= near.f + 1e-12))
        self.assertTrue(np.all(limit.f >= 0.0))


class TestEffectiveCurve(unittest.TestCase):
    def syntheticCurve(self):
        levels = np.linspace(0.01, 4.0, 50)
        return effective.EffectiveCurve(0.0, levels, -np.sqrt(levels), np.sqrt(levels), 0.0, 0.0, (0.0, 1.0))

    def testLevelGrid(self):
        spec = effective.LevelGridSpec(tolLambda=1e-3, uniformCount=4)
        levels = effective.levelGrid(1.0, spec, 2.0)
        self.assertTrue(np.all(np.diff(levels) > 0.0))
        self.assertAlmostEqual(levels[0], 1.001)
        self.assertEqual(levels[-1], 2.0)
        self.assertIn(1.5, levels.tolist())

    def testLevelCap(self):
        env = powerEnvironment()
        self.assertAlmostEqual(effective.levelCap(env, (0.0, 1.0), 2.0), 1.05 * 8.0 + 0.05)

    def testFlatEndpoints(self):
        levels = np.array([1.1, 1.2, 1.4, 2.0])
        minus0, plus0 = effective.flatEndpoints(1.0, levels, -0.5 - (levels - 1.0), 0.5 + (levels - 1.0))
        self.assertAlmostEqual(minus0, -0.5)
        self.assertAlmostEqual(plus0, 0.5)

    def testEvaluateHbar(self):
        curve = self.syntheticCurve()
        self.assertEqual(effective.evaluateHbar(curve, 0.0), 0.0)
        self.assertAlmostEqual(curve(1.0), 1.0, places=2)
        values = curve(np.array([-1.5, 1.5]))
        self.assertEqual(values.shape, (2,))
        with self.assertRaises(effective.CurveRangeError) as cm:
            curve(3.0)
        self.assertEqual(cm.exception.theta, 3.0)

    def testTables(self):
        curve = self.syntheticCurve()
        self.assertEqual(list(curve.levelTable().columns), ["lambda", "theta_minus", "theta_plus"])
        self.assertEqual(list(curve.hbarTable([0.0, 1.0]).columns), ["theta", "hbar"])

    def testAuditSynthetic(self):
        report = effective.auditCurve(self.syntheticCurve(), 1.0, 1.0, 2.0)
        self.assertTrue(report.passed, report.toText())
        self.assertTrue(report.check("round-trip").passed)

    def testAuditFlagsGrowthMismatch(self):
        report = effective.auditCurve(self.syntheticCurve(), 1.0, 0.1, 2.0)
        self.assertFalse(report.check("H1").passed)

    def testWindowAverage(self):
        Profile = namedtuple('Profile', ['grid', 'f'])
        profile = Profile(np.linspace(0.0, 2.0, 5), np.array([1.0, 1.0, 3.0, 3.0, 3.0]))
        self.assertAlmostEqual(effective.windowAverage(profile), 2.25)

    def testThetaPairOfPower(self):
        thetaMinus, thetaPlus = effective.thetaPair(powerEnvironment(), (0.0, 1.0), 8.0, FAST)
        self.assertAlmostEqual(thetaMinus, -2.0, places=6)
        self.assertAlmostEqual(thetaPlus, 2.0, places=6)

    def testThetaTableNamesFailedLevel(self):
        solver = cell.solverFor(bumpEnvironment(), (0.0, 1.0), FAST)
        with self.assertRaises(effective.DiagnosticFailure) as cm:
            effective._thetaTable(solver, [-0.05, 1.5, 2.0], 1)
        self.assertIn("level -0.05", str(cm.exception))

    def testThetaTableFailsAcrossWorkers(self):
        solver = cell.solverFor(bumpEnvironment(), (0.0, 1.0), FAST)
        with self.assertRaises(effective.DiagnosticFailure) as cm:
            effective._thetaTable(solver, [1.5, 2.0, -0.05], 3)
        self.assertIn("level -0.05", str(cm.exception))

    def testThetaPairChecksJunctions(self):
        # a negative tolerance rejects every junction, even an exact one
        strict = FAST._replace(junctionTol=-1.0)
        with self.assertRaises(cell.AssemblyError):
            effective.thetaPair(bumpEnvironment(), (0.0, 1.0), 2.0, strict)

    def testCalibratedCGamma(self):
        env = powerEnvironment()
        cGamma = effective.calibrateCGamma(env, (0.0, 1.0), [1.0, 8.0], FAST)
        H = env.hamiltonian

        def unit(level):
            return hamlib.lipschitzBound(H.alpha0, H.alpha1, H.gamma, env.diffusion.kappa, level, 1.0)
        # f = +-level^(1/3) exactly
        self.assertAlmostEqual(cGamma, max(1.0 / unit(1.0), 2.0 / unit(8.0)), places=6)

    def testCurveOfPower(self):
        spec = effective.LevelGridSpec(tolLambda=1e-7, uniformCount=48, thetaMax=1.5)
        curve = effective.buildEffectiveCurve(powerEnvironment(), (0.0, 1.0), spec, settings=FAST)
        np.testing.assert_allclose(curve.thetaPlus, np.cbrt(curve.levels), atol=1e-6)
        np.testing.assert_allclose(curve.thetaMinus, -np.cbrt(curve.levels), atol=1e-6)
        self.assertLess(abs(curve.lambda0), 1e-6)
        self.assertAlmostEqual(curve(1.2), 1.728, delta=1e-3)
        self.assertLess(curve.flatWidth, 0.02)
        self.assertEqual(curve.seeds, [0])

    def testEnsembleThetaPair(self):
        spec = {"family": "random", "extent_length": 40}
        envs = [environment.sampleEnvironment(spec, seed) for seed in (1, 2)]
        ensemble = effective.ensembleThetaPair(envs, (-5.0, 5.0), 1.0, FAST, threads=2)
        self.assertAlmostEqual(ensemble.thetaPlus, 1.0, places=5)
        self.assertAlmostEqual(ensemble.stdPlus, 0.0, places=5)
        self.assertEqual(ensemble.samples.shape, (2, 2))


class TestParabolicScheme(unittest.TestCase):
    def testCflViolation(self):
        config = parabolic.SchemeConfig(dx=0.05, dt=1.0, boundary=parabolic.PERIODIC, horizon=1.0)
        with self.assertRaises(parabolic.CflViolationError) as cm:
            parabolic.ParabolicScheme(powerEnvironment(), 1.0, config)
        self.assertGreater(cm.exception.number, 1.0)

    def testConfigurationErrors(self):
        with self.assertRaises(parabolic.SchemeError):
            parabolic.ParabolicScheme(powerEnvironment(), 1.0, parabolic.SchemeConfig(flavor="upwind"))
        randomEnv = environment.sampleEnvironment({"family": "random", "extent_length": 40}, 1)
        with self.assertRaises(parabolic.SchemeError):
            parabolic.ParabolicScheme(randomEnv, 1.0, parabolic.SchemeConfig(boundary=parabolic.PERIODIC))

    def testLinearDataIsExact(self):
        env = powerEnvironment()
        for boundary in (parabolic.PERIODIC, parabolic.LINEAR):
            for flavor in (parabolic.ENGQUIST_OSHER, parabolic.LAX_FRIEDRICHS):
                config = parabolic.SchemeConfig(dx=0.05, flavor=flavor, boundary=boundary, halfWidth=2.0,
                                                horizon=1.0)
                run = parabolic.solveParabolic(env, -1.0, config)
                self.assertAlmostEqual(run.centerValues[-1], 1.0, places=9)
                self.assertAlmostEqual(run.tailSlope(), 1.0, places=9)

    def testEstimateEffective(self):
        config = parabolic.SchemeConfig(dx=0.05, boundary=parabolic.PERIODIC, horizon=2.0)
        estimate = parabolic.estimateEffective(powerEnvironment(), 0.5, config)
        self.assertLessEqual(estimate.hL, estimate.hU)
        self.assertAlmostEqual(estimate.slope, 0.125, places=9)
        self.assertTrue(estimate.conclusive)

    def testTrajectoryTable(self):
        config = parabolic.SchemeConfig(dx=0.05, boundary=parabolic.PERIODIC, horizon=1.0)
        table = parabolic.solveParabolic(powerEnvironment(), 1.0, config).trajectoryTable(rows=11)
        self.assertEqual(list(table.columns), ["t", "u0", "u0_over_t"])
        self.assertGreater(table["t"].iloc[0], 0.0)
        np.testing.assert_allclose(table["u0_over_t"], 1.0, atol=1e-9)

    def testComparisonPrinciple(self):
        env = bumpEnvironment()
        config = parabolic.SchemeConfig(dx=0.05, boundary=parabolic.PERIODIC, horizon=1.0)
        worst = parabolic.comparisonCheck(env, 1.0, config, lambda x: 0.0 * x,
                                          lambda x: 0.1 * (1.0 + np.sin(2.0 * np.pi * x)), steps=200)
        self.assertLessEqual(worst, 1e-12)

    def testLipschitzReference(self):
        env = powerEnvironment()
        self.assertGreater(parabolic.lipschitzReference(env, 2.0, 10.0),
                           parabolic.lipschitzReference(env, 0.5, 10.0))

    def testGridRefinement(self):
        config = parabolic.SchemeConfig(dx=0.1, boundary=parabolic.PERIODIC, horizon=0.5)
        estimates = parabolic.gridRefinement(powerEnvironment(), 1.0, config, refinements=2)
        self.assertEqual(len(estimates), 2)
        self.assertAlmostEqual(estimates[1][0], 0.05)

    def testHomogenizationReport(self):
        levels = np.linspace(0.01, 4.0, 200)
        curve = effective.EffectiveCurve(0.0, levels, -np.cbrt(levels), np.cbrt(levels), 0.0, 0.0, (0.0, 1.0))
        config = parabolic.SchemeConfig(dx=0.05, boundary=parabolic.PERIODIC, horizon=1.0)
        report = parabolic.homogenizationTest(powerEnvironment(), curve, [-1.0, 1.2], config, threads=2)
        self.assertTrue(report.passed, report.toText())
        self.assertEqual(list(report.toFrame()["theta"]), [-1.0, 1.2])
        self.assertEqual(len(report.estimates), 2)


class TestJobs(unittest.TestCase):
    def testResultsKeepSubmissionOrder(self):
        squares = jobs.scheduleJobs(lambda k: k * k, [(k,) for k in range(8)], 3)
        self.assertEqual(squares, [k * k for k in range(8)])

    def testThreadsWithoutProcesses(self):
        self.assertEqual(jobs.scheduleJobs(lambda a, b: a + b, [(1, 2), (3, 4)], 2, processes=False), [3, 7])

    def testErrorsKeepTheirFields(self):
        component = environment.Component(0.0, 1.0, True, True)
        error = pickle.loads(pickle.dumps(cell.EndpointObstructedError(component, 0.0, 0.25)))
        self.assertIsInstance(error, cell.EndpointObstructedError)
        self.assertEqual(error.component, component)
        self.assertEqual(error.x, 0.0)
        self.assertIn("level 0.25", str(error))

    def testErrorsCrossWorkers(self):
        component = environment.Component(0.0, 1.0, True, True)

        def job(x):
            if x > 0.5:
                raise cell.EndpointObstructedError(component, x, 1.0)
            return x
        with self.assertRaises(cell.EndpointObstructedError) as cm:
            jobs.scheduleJobs(job, [(0.25,), (0.75,)], 2)
        self.assertEqual(cm.exception.x, 0.75)
        self.assertEqual(cm.exception.component, component)

    def testNestedJobsRunInline(self):
        def outer(k):
            return (jobs.inWorker(), jobs.scheduleJobs(lambda j: j + k, [(0,), (1,)], 2))
        results = jobs.scheduleJobs(outer, [(10,), (20,)], 2)
        self.assertEqual(results, [(True, [10, 11]), (True, [20, 21])])
        self.assertFalse(jobs.inWorker())


class TestCommandLine(unittest.TestCase):
    def testValidateVerb(self):
        with tempfile.TemporaryDirectory() as tempDir:
            returnCode = hjhom.main(["validate", "--config", os.path.join(CONFIGS_DIR, "quickstart.cfg"),
                                     "--out", tempDir])
            self.assertEqual(returnCode, 0)
            store = ArtifactStore(tempDir)
            self.assertTrue(store.readJSON("validate.json")["passed"])
            manifest = store.readJSON(RunManifest.FILE_NAME)
            self.assertIn("validation.txt", manifest["outputs"])
            self.assertIn("stages.json", manifest["outputs"])

    def testRerunReusesStage(self):
        with tempfile.TemporaryDirectory() as tempDir:
            argv = ["validate", "--config", os.path.join(CONFIGS_DIR, "quickstart.cfg"), "--out", tempDir]
            self.assertEqual(hjhom.main(argv), 0)
            before = os.stat(os.path.join(tempDir, "validation.txt")).st_ino
            self.assertEqual(hjhom.main(argv), 0)
            self.assertEqual(os.stat(os.path.join(tempDir, "validation.txt")).st_ino, before)

    def testFailedGate(self):
        with tempfile.TemporaryDirectory() as tempDir:
            returnCode = hjhom.main(["validate", "--config", os.path.join(CONFIGS_DIR, "double_well.cfg"),
                                     "--out", tempDir])
            self.assertEqual(returnCode, 2)

    def testBrokenConfig(self):
        with tempfile.TemporaryDirectory() as tempDir:
            returnCode = hjhom.main(["validate", "--config", os.path.join(CONFIGS_DIR, "unknown_key.cfg"),
                                     "--out", tempDir])
            self.assertEqual(returnCode, 1)

    def testGammaGate(self):
        with tempfile.TemporaryDirectory() as tempDir:
            with Configuration(overrides={"gamma": "2", "out": tempDir}) as cfg:
                pipeline = Pipeline(cfg, ArtifactStore(tempDir), 0)
                with self.assertRaises(ConfigurationError) as cm:
                    pipeline.run(Stages.upTo(Stages.CRITICAL_VALUE))
        self.assertEqual(cm.exception.field, "gamma")
        self.assertIn("gamma > 2", str(cm.exception))

    def testPipelineWindows(self):
        with tempfile.TemporaryDirectory() as tempDir:
            store = ArtifactStore(tempDir)
            with Configuration() as cfg:
                self.assertEqual(Pipeline(cfg, store, 0).window(), (0.0, 1.0))
            with Configuration(overrides={"window_length": "3"}) as cfg:
                self.assertEqual(Pipeline(cfg, store, 0).window(), (0.0, 3.0))
            with Configuration(overrides={"family": "random", "extent_length": "40"}) as cfg:
                self.assertEqual(Pipeline(cfg, store, 0).window(), (-50.0, 50.0))

    def testFailedGatesAreNamed(self):
        with tempfile.TemporaryDirectory() as tempDir:
            with Configuration(overrides={"accept": "validation, audit"}) as cfg:
                pipeline = Pipeline(cfg, ArtifactStore(tempDir), 0)
                pipeline.summaries["validate"] = {"passed": False}
                failed = pipeline.failedGates()
        self.assertEqual(len(failed), 1)
        self.assertIsInstance(failed[0], AcceptanceError)
        self.assertEqual(failed[0].criterion, "validation")

    def testEmitNamesMissingArtifacts(self):
        with tempfile.TemporaryDirectory() as tempDir:
            with self.assertRaises(PipelineError) as cm:
                emitPlotsData(tempDir)
        self.assertEqual(cm.exception.stage, "emit")
        self.assertIn("curve_hbar.csv", str(cm.exception))
        self.assertIn("verify.json", str(cm.exception))


if __name__ == '__main__':
    unittest.TestCase.longMessage = True
    unittest.main()
