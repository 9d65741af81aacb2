import numpy as np
import pytest
import torch

from recfusion.networks import NetConfig

TINY = NetConfig(base_channels=4, num_blocks=1, attention_heads=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


def rand_images(shape, seed=0, dtype=torch.float64):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=gen, dtype=dtype)


# -- desk-scale runs shared by the acceptance and desk tests -----------------------

import dataclasses
import time
from importlib.resources import files

from recfusion.config import load_config
from recfusion.data import full_batch, make_synthetic_dataset
from recfusion.metrics import spatial_frequency_sf
from recfusion.networks import fusion_forward
from recfusion.trainer import focus_agreement, train

DESK_SEEDS = (0, 1, 2)


def desk_config():
    return load_config(files("recfusion") / "configs" / "desk.yaml")


class DeskRuns:
    def __init__(self, root):
        self.root = root
        self.cfg = desk_config()
        s = self.cfg.data.synth
        self.train_set = make_synthetic_dataset(self.cfg.task, s.n_train, s.size, s.seed, s.blur_sigma)
        self.holdout = make_synthetic_dataset(self.cfg.task, s.n_holdout, s.size, s.holdout_seed, s.blur_sigma)
        self._cache = {}

    def run(self, seed=0, fixed_weights=False, tag=""):
        key = (seed, fixed_weights, tag)
        if key not in self._cache:
            tcfg = dataclasses.replace(self.cfg.train, seed=seed, fixed_weights=fixed_weights)
            out = self.root / f"seed{seed}_{'fixed' if fixed_weights else 'full'}{tag}"
            t0 = time.perf_counter()
            state = train(self.train_set, tcfg, self.cfg.net, self.cfg.loss, holdout=self.holdout, out_dir=out)
            seconds = time.perf_counter() - t0
            batch = full_batch(self.holdout)
            with torch.no_grad():
                fused = fusion_forward(state.theta_F, batch.images_a, batch.images_b)
            held = [r["loss_r"] for r in state.history if r["stage"] == "holdout"]
            self._cache[key] = {
                "state": state,
                "checkpoint": out / "final.ckpt",
                "seconds": seconds,
                "holdout_initial": held[0],
                "holdout_final": held[-1],
                "agreement": None if fixed_weights else focus_agreement(state.theta_P, batch),
                "sf": float(np.mean([spatial_frequency_sf(f[0].double().numpy()) for f in fused])),
            }
        return self._cache[key]


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk"))


# -- acceptance report -------------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    def record(number, passed, detail):
        _ACCEPTANCE[number] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
