import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def tone(freq, fps=30.0, n=300, amp=1.0, phase=0.0):
    t = np.arange(n) / fps
    return amp * np.sin(2 * np.pi * freq * t + phase)
