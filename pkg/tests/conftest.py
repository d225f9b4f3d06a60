import numpy as np
import pytest

from keyforge.bitting import BittingCode, KeySpec


@pytest.fixture(scope="session")
def spec() -> KeySpec:
    return KeySpec.default()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def code() -> BittingCode:
    return BittingCode.parse("0-4-9-2-6")


def random_homography(rng: np.random.Generator) -> np.ndarray:
    """Entries uniform in [-1, 1] with H[2][2] = 1 and |det| > 0.1."""
    while True:
        h = rng.uniform(-1.0, 1.0, size=(3, 3))
        h[2, 2] = 1.0
        if abs(np.linalg.det(h)) > 0.1:
            return h


def reference_warp(img: np.ndarray, h: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Loop-free but independent bilinear inverse warp; every out-of-image tap reads 0."""
    inv = np.linalg.inv(h)
    src_h, src_w = img.shape
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    q = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)])
    p = inv @ q
    sx, sy = p[0] / p[2], p[1] / p[2]
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0

    def tap(xi, yi):
        ok = (xi >= 0) & (xi < src_w) & (yi >= 0) & (yi < src_h)
        out = np.zeros(xi.shape)
        out[ok] = img[yi[ok], xi[ok]]
        return out

    val = (
        tap(x0, y0) * (1 - fx) * (1 - fy)
        + tap(x0 + 1, y0) * fx * (1 - fy)
        + tap(x0, y0 + 1) * (1 - fx) * fy
        + tap(x0 + 1, y0 + 1) * fx * fy
    )
    return val.reshape(out_h, out_w)


# ---------------------------------------------------------------- acceptance log

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion; the summary prints a PASS/FAIL line per entry."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA[number] = (title, bool(ok), detail)
        print(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
