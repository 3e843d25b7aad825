import functools

import numpy as np
import pytest

from copydet import synth
from copydet.imaging import ImageBuf


@functools.lru_cache(maxsize=None)
def procedural(seed: int, width: int = 320, height: int = 320) -> ImageBuf:
    return synth.procedural_image(seed, width, height)


def random_buf(rng, h, w, c=3) -> ImageBuf:
    return ImageBuf(rng.integers(0, 256, size=(h, w, c), dtype=np.uint8))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@functools.lru_cache(maxsize=None)
def paste_fixture(n: int = 50, seed: int = 77):
    """(attacked image, true box) pairs from overlay-paste; held out from detector calibration."""
    from copydet.imaging import apply_attack

    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        src = synth.procedural_image(5000 + i, *synth.random_size(rng))
        spec = synth.sample_attack("overlay-paste", rng, (src.width, src.height))
        img, record = apply_attack(src, spec, f"r{i}")
        out.append((img, record.box))
    return tuple(out)


@functools.lru_cache(maxsize=None)
def clean_fixture(n: int = 100):
    """Paste-free procedural images of varied size."""
    rng = np.random.default_rng(91)
    return tuple(synth.procedural_image(9000 + i, *synth.random_size(rng)) for i in range(n))


# --- acceptance reporting: one line per criterion in the terminal summary ---

_criteria: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): test belongs to the named acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (report.when != "call" and report.passed):
        return
    entry = _criteria.setdefault(marker.args[0], {"passed": True, "notes": []})
    entry["passed"] &= report.passed
    entry["notes"].extend(str(v) for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, entry in _criteria.items():
        status = "PASS" if entry["passed"] else "FAIL"
        notes = "; ".join(dict.fromkeys(entry["notes"]))
        terminalreporter.write_line(f"{status}  {name}" + (f"  [{notes}]" if notes else ""))
