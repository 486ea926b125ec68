import random

import pytest
import torch
from hypothesis import HealthCheck, settings

from treevae.config import ArchConfig
from treevae.model import build_model
from treevae.topology import grow_at, new_root_tree

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_arch(**kw) -> ArchConfig:
    base = dict(input_shape=(16,), likelihood="gaussian", latent_dims=2, max_depth=3, hidden=8,
                bottom_up_dim=8, encoder_out=8, encoder_hidden=[8], dtype="float64")
    base.update(kw)
    return ArchConfig(**base)


def random_topology(rng: random.Random, max_depth: int = 3, max_grows: int = 5):
    t = new_root_tree(max_depth)
    for _ in range(rng.randint(0, max_grows)):
        options = [l for l in t.sorted_leaves if t.depth[l] < max_depth]
        if not options:
            break
        t = grow_at(t, rng.choice(options))
    return t


def tiny_model(topology=None, seed=0, **kw):
    return build_model(topology or new_root_tree(3), tiny_arch(**kw), seed=seed)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (ok, detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
