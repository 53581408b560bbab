import sys
import time
from pathlib import Path
from types import SimpleNamespace

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flakeadapt import experiment as ex  # noqa: E402
from flakeadapt.config import load  # noqa: E402

BENCHMARK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "benchmark.yaml"


def _run_benchmark(root):
    cfg = load(BENCHMARK_CONFIG, [f"output_dir={root}"])
    t0 = time.perf_counter()
    report = ex.pipeline(cfg)
    return SimpleNamespace(cfg=cfg, out=ex.Layout(root), report=report, wall_time_s=time.perf_counter() - t0)


@pytest.fixture(scope="session")
def benchmark(tmp_path_factory):
    """One full pipeline run of the pseudo-target benchmark, shared by the slow tests."""
    return _run_benchmark(tmp_path_factory.mktemp("benchmark_a"))


@pytest.fixture(scope="session")
def benchmark_repeat(tmp_path_factory, benchmark):
    return _run_benchmark(tmp_path_factory.mktemp("benchmark_b"))


@pytest.fixture(scope="session")
def benchmark_ablation(benchmark):
    return ex.run_ablation(benchmark.cfg, benchmark.out)


# ------------------------------------------------------------ acceptance summary

_OUTCOMES: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    entry = _OUTCOMES.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_OUTCOMES):
        e = _OUTCOMES[number]
        line = f"criterion {number:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["details"]:
            line += "  [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
