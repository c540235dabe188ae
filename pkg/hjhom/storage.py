#
# This file is part of the hjhom project.
#
# The contents of this file are subject to the BSD 3-Clause License, the
# full text of which is available in the accompanying LICENSE file at the
# root directory of this project.
#
import datetime
import json
import os

from atomicwrites import atomic_write
import numpy as np
import pandas as pd
import scipy

from hjhom.__main__ import PersistentJSONDict, VERSION, ensureDirectoryExists, printTraceStatement


class Stages:
    VALIDATE = "validate"
    CRITICAL_VALUE = "critical-value"
    CORRECTOR = "corrector"
    CURVE = "curve"
    STABILITY = "stability"
    VERIFY = "verify"

    ORDER = [VALIDATE, CRITICAL_VALUE, CORRECTOR, CURVE, STABILITY, VERIFY]

    @staticmethod
    def upTo(stage):
        return Stages.ORDER[:Stages.ORDER.index(stage) + 1]


class StageCheckpoints:
    """stages.json: for every finished stage its configuration hash and payload files."""
    def __init__(self, directory):
        self._directory = directory
        self._stages = None

    def __enter__(self):
        self._stages = PersistentJSONDict(os.path.join(self._directory, "stages.json"))
        return self

    def __exit__(self, typ, value, traceback):
        # Does not write to disc when unchanged
        self._stages.save()

    def isCurrent(self, stage, stageHash):
        if stage not in self._stages:
            return False
        entry = self._stages[stage]
        if entry["hash"] != stageHash:
            return False
        return all(os.path.exists(os.path.join(self._directory, name)) for name in entry["files"])

    def record(self, stage, stageHash, files):
        self._stages[stage] = {"hash": stageHash, "files": sorted(files)}


class ArtifactStore:
    """One artifact directory; every file is written atomically."""
    def __init__(self, directory):
        self.directory = os.path.abspath(directory)
        ensureDirectoryExists(self.directory)

    def __str__(self):
        return "artifact directory {}".format(self.directory)

    def path(self, name):
        return os.path.join(self.directory, name)

    def exists(self, name):
        return os.path.exists(self.path(name))

    def checkpoints(self):
        return StageCheckpoints(self.directory)

    def writeText(self, name, text):
        ensureDirectoryExists(os.path.dirname(self.path(name)))
        with atomic_write(self.path(name), overwrite=True) as f:
            f.write(text)
        printTraceStatement("Wrote {}".format(self.path(name)))
        return name

    def writeJSON(self, name, document):
        return self.writeText(name, json.dumps(document, sort_keys=True, indent=2) + "\n")

    def writeTable(self, name, frame):
        return self.writeText(name, frame.to_csv(index=False))

    def readJSON(self, name):
        with open(self.path(name), 'r') as f:
            return json.load(f)

    def readTable(self, name):
        return pd.read_csv(self.path(name))

    def inventory(self):
        files = []
        for root, _, names in os.walk(self.directory):
            for name in names:
                relative = os.path.relpath(os.path.join(root, name), self.directory).replace(os.sep, "/")
                if relative != RunManifest.FILE_NAME:
                    files.append(relative)
        return sorted(files)


class RunManifest:
    # Bump this counter whenever the manifest layout changes.
    MANIFEST_FILE_FORMAT_VERSION = 1
    FILE_NAME = "manifest.json"

    def __init__(self, configHash, seeds, window, tolerances, verb):
        self.configHash = configHash
        self.seeds = list(seeds)
        self.window = list(window)
        self.tolerances = dict(tolerances)
        self.verb = verb
        self.started = datetime.datetime.utcnow().isoformat() + "Z"

    @staticmethod
    def versions():
        return {"hjhom": VERSION, "numpy": np.__version__, "scipy": scipy.__version__, "pandas": pd.__version__}

    def document(self, outputs):
        return {
            "format": RunManifest.MANIFEST_FILE_FORMAT_VERSION,
            "configHash": self.configHash,
            "seeds": self.seeds,
            "window": self.window,
            "tolerances": self.tolerances,
            "verb": self.verb,
            "versions": RunManifest.versions(),
            "timestamps": {"started": self.started, "finished": datetime.datetime.utcnow().isoformat() + "Z"},
            "outputs": outputs,
        }

    def save(self, store):
        store.writeJSON(RunManifest.FILE_NAME, self.document(store.inventory()))

    @staticmethod
    def refreshOutputs(store):
        """Rewrites the output inventory of an existing manifest."""
        document = store.readJSON(RunManifest.FILE_NAME)
        document["outputs"] = store.inventory()
        document["timestamps"]["finished"] = datetime.datetime.utcnow().isoformat() + "Z"
        store.writeJSON(RunManifest.FILE_NAME, document)
