import numpy as np
import pytest

from flowmaps import sim
from flowmaps.cdit import ModelConfig
from flowmaps.mapenc import stack_tokens, tokenize_map


def randomize(module, rng, std=0.3):
    """Overwrite every parameter with noise so zero-init layers are exercised."""
    for p in module.parameters():
        p.data = rng.normal(0.0, std, p.shape).astype(p.dtype)


def make_small_config() -> ModelConfig:
    return ModelConfig(dim=8, cdit_blocks=2, enc_layers=2, heads=2, palette_size=12, tau_max=20, tokens=12, dropout=0.0)


def make_scene_batch(episodes) -> dict:
    """Four snapshots from different episodes with matching query fields."""
    snaps = [episodes[i].snapshots[3 * i] for i in range(4)]
    tokens = stack_tokens([tokenize_map(s, 12) for s in snaps])
    return {
        "tokens": tokens,
        "tau": np.array([s.tau for s in snaps]),
        "tau_q": np.array([s.tau + 1 for s in snaps]),
        "descriptor": np.array([s.objects[i % 3].descriptor for i, s in enumerate(snaps)]),
        "x1": np.array([s.objects[i % 3].bbox.as_tuple() for i, s in enumerate(snaps)]),
    }


@pytest.fixture
def small_config():
    return make_small_config()


@pytest.fixture(scope="session")
def episodes():
    return sim.make_dataset(7, 6)


@pytest.fixture
def scene_batch(episodes):
    return make_scene_batch(episodes)


# -- acceptance summary ---------------------------------------------------------------

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
