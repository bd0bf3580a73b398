import dataclasses
import os
import time

import pytest
import torch

from uwspeech.evalkit import corpus_per
from uwspeech.pipeline import Run, RunConfig, end_to_end, read_lines

# filled by test_acceptance; printed once at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}
# measured values with no pass/fail threshold of their own
RECORDED_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
    if RECORDED_LINES:
        terminalreporter.section("recorded measurements")
        for line in RECORDED_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


class ToyRuns:
    """Lazily executed full toy pipelines, shared by every test in the session."""

    def __init__(self, base):
        self.base = base
        self._cache = {}

    def get(self, name, cfg: RunConfig, **kwargs):
        if name not in self._cache:
            root = self.base / name
            start = time.time()
            result = end_to_end(root, cfg, **kwargs)
            result["wall_seconds"] = time.time() - start
            self._cache[name] = (root, result)
        return self._cache[name]

    def main(self):
        return self.get("main", RunConfig.toy_preset())

    def rerun(self):
        return self.get("rerun", RunConfig.toy_preset())

    def lambda_zero(self):
        cfg = RunConfig.toy_preset()
        cfg.xlvae = dataclasses.replace(cfg.xlvae, lam=0.0)
        return self.get("lambda0", cfg, skip_audio=True)

    def overlap_half(self):
        """XL-VAE only, written language sharing half of the target inventory."""
        if "overlap05" not in self._cache:
            cfg = RunConfig.toy_preset()
            cfg.toy = dataclasses.replace(cfg.toy, overlap=0.5)
            run = Run(self.base / "overlap05", cfg)
            start = time.time()
            run.gen()
            run.extract_features()
            run.train_xlvae()
            result = {"written_test_per": corpus_per(
                [h.split() for h in read_lines(run.root / "xlvae" / "wrt.test.ctc")],
                [r.split() for r in read_lines(run.root / "xlvae" / "wrt.test.phn")]),
                      "wall_seconds": time.time() - start}
            self._cache["overlap05"] = (run.root, result)
        return self._cache["overlap05"]


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    base = os.environ.get("UWSPEECH_TEST_RUNS")
    if base:
        from pathlib import Path
        path = Path(base)
        path.mkdir(parents=True, exist_ok=True)
    else:
        path = tmp_path_factory.mktemp("toy_runs")
    return ToyRuns(path)
