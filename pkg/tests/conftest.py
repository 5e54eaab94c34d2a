import json
import sys
from pathlib import Path

import numpy as np
import pytest

from fedsemcom import channel as ch
from fedsemcom.model import SemComModel, fixed_channel_fn, mse_loss
from fedsemcom.params import ParamVector

GOLDEN_DIR = Path(__file__).parent / "golden"
sys.path.insert(0, str(GOLDEN_DIR))


@pytest.fixture(scope="session")
def golden():
    return json.loads((GOLDEN_DIR / "golden.json").read_text())


def central_difference(model: SemComModel, params: ParamVector, images, snr_db, real, coords, step=1e-5):
    """Central finite differences of the MSE loss for the given coordinates.

    Uses only forward passes, so it is independent of ``model.backward``.
    """
    channel_fn = fixed_channel_fn(real) if real is not None else None
    base = params.values

    def loss_at(values):
        out, _ = model.forward(ParamVector(values, params.layout), images, snr_db, channel_fn)
        return mse_loss(images, out)

    fd = np.empty(len(coords))
    for j, i in enumerate(coords):
        up = base.copy()
        up[i] += step
        down = base.copy()
        down[i] -= step
        fd[j] = (loss_at(up) - loss_at(down)) / (2 * step)
    return fd


def fixed_realization(shape, snr_db, fading, seed):
    return ch.draw(shape, ch.ChannelConfig(snr_db, fading), np.random.default_rng(seed))
