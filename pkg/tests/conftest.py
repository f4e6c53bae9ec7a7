import numpy as np
import pytest

from active_teacher.detection import BBox, Detection, ImagePredictions

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def random_probs(rng: np.random.Generator, n_classes: int, sharpness: float = 1.0) -> np.ndarray:
    p = rng.dirichlet(np.full(n_classes, sharpness))
    return p / p.sum()


def random_box(rng: np.random.Generator, extent: float = 10.0) -> BBox:
    x, y = rng.uniform(0, extent, size=2)
    w, h = rng.uniform(0.2, extent / 2, size=2)
    return BBox(x, y, x + w, y + h)


def random_detection(rng: np.random.Generator, n_classes: int = 5) -> Detection:
    return Detection.from_probs(random_box(rng), random_probs(rng, n_classes, rng.uniform(0.1, 2.0)))


def random_image(rng: np.random.Generator, image_id, n_classes: int = 5, max_boxes: int = 6) -> ImagePredictions:
    k = int(rng.integers(0, max_boxes + 1))
    return ImagePredictions(image_id, [random_detection(rng, n_classes) for _ in range(k)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


# --- acceptance reporting ----------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal
# summary; a test may attach a detail string through the ``detail`` fixture.

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    def record(text: str) -> None:
        request.node._criterion_detail = text

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    _CRITERIA[number] = (title, report.passed, getattr(item, "_criterion_detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, passed, text = _CRITERIA[number]
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{text}]" if text else ""))
