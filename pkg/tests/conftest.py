import numpy as np
import pytest
import torch
from hypothesis import settings

from vlcp.model import ModelConfig, VLPModel
from vlcp.taskstream import StreamConfig, generate_task_stream

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

torch.set_num_threads(1)


def central_difference(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn(x)`` by central differences (double precision)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(fn(x))
        flat[i] = old - h
        down = float(fn(x))
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / scale


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def assert_gradient_matches(fn, x: torch.Tensor, tol: float = 1e-5) -> float:
    err = relative_error(analytic_grad(fn, x), central_difference(fn, x))
    assert err < tol, f"relative gradient error {err:.3e}"
    return err


def unit_rows(gen: torch.Generator, n: int, d: int, dtype=torch.float64) -> torch.Tensor:
    x = torch.randn(n, d, generator=gen, dtype=dtype)
    return x / x.norm(dim=-1, keepdim=True)


@pytest.fixture(scope="session")
def tiny_stream():
    cfg = StreamConfig(num_tasks=2, classes_per_task=[5, 5], samples_total=160, seed=3)
    return generate_task_stream(cfg)


@pytest.fixture
def tiny_model_cfg():
    return ModelConfig(embed_dim=16, proj_dim=8, num_heads=2, num_layers_image=1, num_layers_text=1, num_layers_fusion=1, vocab_size=256, max_seq_len=14)


@pytest.fixture
def tiny_model(tiny_model_cfg):
    torch.manual_seed(0)
    return VLPModel(tiny_model_cfg).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.fixture
def record(request):
    """``record(detail)`` attaches the measured values to this criterion's line."""
    marker = request.node.get_closest_marker("criterion")
    number = marker.args[0]
    entry = CRITERIA.setdefault(number, {"title": marker.args[1], "detail": "", "ok": None})

    def _record(detail: str) -> None:
        entry["detail"] = detail
        print(f"criterion {number}: {detail}")

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    entry = CRITERIA.setdefault(marker.args[0], {"title": marker.args[1], "detail": "", "ok": None})
    if report.failed:
        entry["ok"] = False
    elif report.when == "call" and entry["ok"] is None:
        entry["ok"] = report.passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        e = CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        detail = f" ({e['detail']})" if e["detail"] else ""
        terminalreporter.write_line(f"[{status}] criterion {number:>2}: {e['title']}{detail}")
