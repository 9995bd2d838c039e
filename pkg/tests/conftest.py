from __future__ import annotations

import numpy as np
import pytest

from micl.dataio import SynthConfig, group_by_subject, synth_generate
from micl.dsp import preprocess_session
from micl.net import BnLayerStats, ModelConfig, init_bn_stats, init_params

# tiny architecture that keeps every layer but runs in milliseconds
TINY = ModelConfig(n_channels=3, win_len=25, f1=2, temporal_kernel=4, depth_mult=2, sep_kernel=3,
                   k1=5, s1=5, k2=3, s2=1, dropout_p=0.0)
SMALL = ModelConfig(n_channels=8, f1=4, temporal_kernel=16, sep_kernel=8)


def random_model(cfg: ModelConfig, seed: int, dtype=np.float32):
    """Parameters and BN running stats with every coordinate randomised."""
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed=seed, dtype=dtype)
    t = p.tensors()
    for name in ("bn1", "bn2", "bn3"):
        t[f"{name}.gamma"][...] = rng.uniform(0.5, 1.5, t[f"{name}.gamma"].shape)
        t[f"{name}.beta"][...] = rng.normal(0, 0.3, t[f"{name}.beta"].shape)
    t["fc.bias"][...] = rng.normal(0, 0.1, t["fc.bias"].shape)
    stats = [BnLayerStats(rng.normal(0, 0.5, s.mean.shape).astype(dtype),
                          rng.uniform(0.5, 2.0, s.var.shape).astype(dtype))
             for s in init_bn_stats(cfg, dtype)]
    return p, stats


@pytest.fixture(scope="session")
def small_cohort():
    sc = SynthConfig(n_subjects=3, n_sessions=4, trials_per_session=10, seed=11)
    sessions = [preprocess_session(s, cue_s=sc.cue_s) for s in synth_generate(sc)]
    return group_by_subject(sessions)
