import pytest
from hypothesis import HealthCheck, settings

from coreecho import autodiff as ad
from coreecho.data import SamplerConfig, SynthSpec, synth_generate
from coreecho.model import EncoderConfig, init_params

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _float64():
    ad.set_default_dtype("float64")
    yield
    ad.set_default_dtype("float64")


TINY_SAMPLER = SamplerConfig(clip_frames=8, stride=2)


def tiny_encoder_config(embed_dim=8, size=16, frames=8):
    return EncoderConfig(frames=frames, height=size, width=size, channels=3, widths=(4, 8),
                         temporal_strides=(2, 2), embed_dim=embed_dim)


@pytest.fixture
def tiny_model():
    return init_params(tiny_encoder_config(), seed=0)


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = SynthSpec(split_counts=(8, 4, 4), frames=(16, 24), size=16, radius=(5.0, 5.0), centre_jitter=1.0)
    return synth_generate(spec, seed=3)


CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
