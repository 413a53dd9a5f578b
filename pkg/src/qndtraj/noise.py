"""Reproducible per-trajectory random streams.

Every trajectory ``index`` of a run with ``base_seed`` gets one Philox
stream per measurement channel, derived from ``SeedSequence(base_seed,
spawn_key=(purpose, index))``.  Streams never depend on worker count or
evaluation order.
"""
import numpy as np

PHYSICAL = 0
CONDITIONED = 1


def channel_streams(base_seed: int, index: int, n_channels: int, purpose: int = PHYSICAL):
    root = np.random.SeedSequence(int(base_seed), spawn_key=(purpose, int(index)))
    return [np.random.Generator(np.random.Philox(ss)) for ss in root.spawn(n_channels)]


def physical_noise(n_diffusive: int, n_counting: int, n_steps: int, dt: float, base_seed: int, index: int):
    """Return ``(dW, u)``: Gaussian increments ``(K, p)`` and thinning uniforms ``(K, m)``."""
    streams = channel_streams(base_seed, index, n_diffusive + n_counting, PHYSICAL)
    sd = np.sqrt(dt)
    dW = np.empty((n_steps, n_diffusive))
    u = np.empty((n_steps, n_counting))
    for i in range(n_diffusive):
        dW[:, i] = streams[i].standard_normal(n_steps) * sd
    for j in range(n_counting):
        u[:, j] = streams[n_diffusive + j].random(n_steps)
    return dW, u
