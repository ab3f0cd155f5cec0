import numpy as np
import pytest

from optformer.blocks import BlockVariant, ModelConfig, init_params

ALL_VARIANTS = [v.value for v in BlockVariant]


def tiny_config(variant="vanilla", **kw):
    base = dict(layers=2, heads=2, d_model=16, context=8, vocab=16, variant=variant)
    base.update(kw)
    return ModelConfig(**base)


def jittered_params(cfg, seed=0, scale=0.3):
    """Init params with the scalars moved off their init values."""
    params = init_params(cfg)
    rng = np.random.default_rng(seed)
    for k, v in params.items():
        if v.ndim == 0 or v.shape == ():
            params[k] = v + scale * rng.standard_normal(v.shape)
        elif k.endswith(".gain"):
            params[k] = v + 0.1 * rng.standard_normal(v.shape)
    return params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; printed at session end."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
