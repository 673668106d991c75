import numpy as np
import pytest
import torch

from protodiff import protonet, denoiser
from protodiff.model import build_model
from protodiff.schedule import build_linear_schedule

# acceptance criteria report lines, printed after the run (see
# pytest_terminal_summary)
ACCEPTANCE_RESULTS: list[tuple[int, str, bool]] = []


def record_criterion(number: int, description: str, ok: bool) -> None:
    ACCEPTANCE_RESULTS.append((number, description, ok))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, description, ok in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2} {status}  {description}")


def make_tiny_model(seed=0, dtype=torch.float32, zero_init=False, m=4,
                    image_size=16, T=40):
    """Small but fully live model for unit tests."""
    enc_cfg = protonet.EncoderConfig(in_channels=3, in_size=(image_size, image_size),
                                     channels=(6, 8, 8, 10))
    den_cfg = denoiser.DenoiserConfig(in_channels=3, image_size=image_size, base=8,
                                      mults=(1, 2), n_blocks=1, emb_dim=16, cond_dim=m)
    sched = build_linear_schedule(T, 1e-3, 0.12)
    return build_model(enc_cfg, den_cfg, m=m, eps_sim=1e-4, sched=sched,
                       seed=seed, dtype=dtype, zero_init=zero_init)


@pytest.fixture(scope="session")
def tiny_model():
    return make_tiny_model()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
