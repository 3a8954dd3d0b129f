import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from neurocodec.config import preset
from neurocodec.data import collate
from neurocodec.eegio import EEGRecording, Sample, patchify

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)


@pytest.fixture
def tiny():
    return preset("tiny")


@pytest.fixture
def tiny64():
    """Tiny preset in double precision with a shallower decoder for gradient checks."""
    return preset("tiny", precision="f64", patch_w=64, codebook_size=16, codebook_dim=8,
                  decoder_layers=1, tmax=4)


def random_batch(cfg, B=2, C=2, n_times=2, seed=0, dtype=None, channels=(3, 7, 11, 19)):
    rng = np.random.default_rng(seed)
    dtype = dtype or cfg.dtype
    x = torch.as_tensor(rng.standard_normal((B, C * n_times, cfg.patch_w)), dtype=dtype)
    chan = torch.tensor([[channels[j]] * n_times for j in range(C)]).reshape(1, -1).repeat(B, 1)
    time = torch.arange(1, n_times + 1).repeat(C).reshape(1, -1).repeat(B, 1)
    return x, chan, time


def make_recording(C=2, T=400, rate=200.0, seed=0, labels=("C3", "C4", "O1", "O2", "F3", "F4")):
    rng = np.random.default_rng(seed)
    return EEGRecording.from_labels(labels[:C], rate, (rng.standard_normal((C, T)) * 1e-5).astype(np.float32),
                                    {"id": f"r{seed}"})


def pytest_terminal_summary(terminalreporter):
    # setup, call and teardown reports all carry the properties; keep one copy
    lines = list(dict.fromkeys(v for reports in terminalreporter.stats.values() for r in reports
                               for k, v in getattr(r, "user_properties", []) if k == "acceptance"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
