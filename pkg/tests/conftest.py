import pytest
import torch

from satnmt.model import HyperParams, SATModel, init_params


def random_model(seed: int, K: int = 1, V: int = 11, d_model: int = 8, N: int = 1,
                 h: int = 2, d_ff: int = 16, scale: float = 1.0,
                 dtype=torch.float32, sharing: str = "shared-all") -> SATModel:
    """A small model with O(scale) random weights so outputs are input-sensitive."""
    hp = HyperParams(V, V, d_model=d_model, N=N, h=h, d_ff=d_ff, K=K, dropout=0.0,
                     sharing=sharing, seed=seed)
    params = init_params(hp, dtype=dtype)
    g = torch.Generator().manual_seed(seed + 1000)
    with torch.no_grad():
        for name, t in params.unique().items():
            if t.dim() == 2:
                t.copy_(torch.randn(t.shape, generator=g, dtype=dtype) * scale / t.shape[1] ** 0.5
                        if not name.endswith("embed") and name != "out_proj"
                        else torch.randn(t.shape, generator=g, dtype=dtype) * scale)
            elif name.endswith(".bias") or name.endswith(".b1") or name.endswith(".b2"):
                t.copy_(torch.randn(t.shape, generator=g, dtype=dtype) * 0.1)
    return SATModel(hp, params)


def random_ids(g: torch.Generator, B: int, n: int, V: int) -> torch.Tensor:
    return torch.randint(4, V, (B, n), generator=g)


@pytest.fixture
def tiny_model():
    return random_model(0)


# --- acceptance summary -------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): acceptance criterion checked by a test")


_CRITERIA: dict[str, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    rep = outcome.get_result()
    entry = _CRITERIA.setdefault(marker.args[0], {"ok": True, "details": []})
    if rep.failed or rep.skipped:
        entry["ok"] = False
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, entry in _CRITERIA.items():
        terminalreporter.write_line(f"{'PASS' if entry['ok'] else 'FAIL'}  {name}")
        for detail in entry["details"]:
            terminalreporter.write_line(f"      {detail}")
