import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from amss.model import LabeledBatch, ModelSpec, build_model

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def make_problem(seed=0, fusion="concat", dims=(3, 4), widths=((5,), (4, 3)), C=3, B=6):
    rng = np.random.default_rng(seed)
    model = build_model(ModelSpec(dims, widths, C, fusion), rng)
    for name in model.params:
        if name.endswith(".bias") or name == "fusion.logits":
            model.params[name] = 0.3 * rng.standard_normal(model.params[name].shape)
    xs = [rng.standard_normal((B, d)) for d in dims]
    y = np.eye(C)[rng.integers(0, C, B)]
    return model, LabeledBatch(xs, y)


@pytest.fixture
def problem():
    return make_problem()


@pytest.fixture(autouse=True)
def _output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("AMSS_OUTPUT_ROOT", str(tmp_path / "runs"))
