"""
Synthetic heterogeneous HAR federation for desk-scale runs.

Each activity is a fixed parameterized signal family (base frequency, per-channel
amplitude/phase/harmonic). Clients jitter the family frequencies, pick their own noise
level, and inherit a per-dataset sensor orientation, so the data is non-IID across
clients and datasets while classes stay separable.
"""
import logging

import numpy as np

from config import ACTIVITY_CODES, N_CHANNELS, TARGET_HZ, WINDOW_HOP, WINDOW_LEN
from data_loader import (
    DataError,
    WindowSet,
    build_federation_layout,
    label_index,
    make_windows,
    znormalize,
)
from utils.seeding import make_rng

logger = logging.getLogger(__name__)

# class families do not depend on the experiment seed
FAMILY_SEED = 20210
BASE_FREQUENCY_HZ = 0.7
FREQUENCY_STEP_HZ = 0.42


def class_family(index):
    """Signal parameters shared by every client for activity `index`"""
    rng = np.random.default_rng([FAMILY_SEED, index])
    return {
        "frequency": BASE_FREQUENCY_HZ + FREQUENCY_STEP_HZ * index,
        "amplitude": rng.uniform(0.5, 1.5, size=N_CHANNELS),
        "phase": rng.uniform(0.0, 2 * np.pi, size=N_CHANNELS),
        "harmonic": rng.choice([2.0, 3.0], size=N_CHANNELS),
        "harmonic_weight": rng.uniform(0.0, 0.6, size=N_CHANNELS),
    }


def _rotation_z(degrees):
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def synth_stream(family, n_samples, frequency_scale, noise, rng, rotation_deg=0.0):
    """One continuous [n_samples, 6] stream of a single activity"""
    t = np.arange(n_samples) / TARGET_HZ
    f = family["frequency"] * frequency_scale
    offset = rng.uniform(0.0, 2 * np.pi)
    arg = 2 * np.pi * f * t[:, None] + family["phase"][None, :] + offset
    signal = family["amplitude"][None, :] * np.sin(arg)
    signal += family["harmonic_weight"][None, :] * np.sin(family["harmonic"][None, :] * arg)
    signal += noise * rng.standard_normal(signal.shape)
    if rotation_deg:
        rot = _rotation_z(rotation_deg)
        signal[:, 0:3] = signal[:, 0:3] @ rot.T
        signal[:, 3:6] = signal[:, 3:6] @ rot.T
    return signal


def _class_probabilities(spec):
    weights = np.array([spec.class_weights.get(code, 1.0) for code in spec.classes], dtype=np.float64)
    return weights / weights.sum()


def generate_client(spec, client_index, cfg, seed):
    """Labeled, z-normalized windows for one synthetic client"""
    rng = make_rng(seed, "client", spec.tag, client_index)
    class_ids = [label_index(c) for c in spec.classes]
    probs = _class_probabilities(spec)
    jitter = {c: 1.0 + rng.uniform(-cfg.frequency_jitter, cfg.frequency_jitter) for c in class_ids}
    noise = rng.uniform(cfg.noise_min, cfg.noise_max)
    rotation = spec.rotation_deg + rng.uniform(-5.0, 5.0) if spec.rotation_deg else 0.0
    n_target = int(rng.integers(spec.min_windows, spec.max_windows + 1))

    windows, labels = [], []
    count = 0
    while count < n_target:
        c = class_ids[int(rng.choice(len(class_ids), p=probs))]
        m = int(min(rng.integers(cfg.segment_min_windows, cfg.segment_max_windows + 1), n_target - count))
        n_samples = WINDOW_LEN + WINDOW_HOP * (m - 1)
        stream = synth_stream(class_family(c), n_samples, jitter[c], noise, rng, rotation)
        frames = make_windows(stream)
        windows.append(frames)
        labels.append(np.full(len(frames), c, dtype=np.int64))
        count += len(frames)

    ws = WindowSet(
        windows=np.concatenate(windows, axis=0),
        labels=np.concatenate(labels),
        source_dataset=spec.tag,
        client_id=f"{spec.tag}_{client_index:03d}",
    )
    return znormalize(ws)


def generate_synthetic_clients(cfg, seed):
    """
    Generate every client's labeled windows (before partitioning).

    Returns:
        list[WindowSet]: one per client, ordered by dataset then client index
    """
    if not cfg.datasets or cfg.n_clients == 0:
        raise DataError("synthetic federation needs at least one client")
    cfg.validate()
    clients = []
    for spec in cfg.datasets:
        for i in range(spec.n_clients):
            clients.append(generate_client(spec, i, cfg, seed))
        logger.info(f"Generated {spec.n_clients} synthetic clients for '{spec.tag}' ({', '.join(spec.classes)})")
    return clients


def generate_synthetic_federation(cfg, seed):
    """Synthetic clients partitioned into a FederationLayout"""
    return build_federation_layout(generate_synthetic_clients(cfg, seed), seed)


def class_codes_present(ws):
    return sorted({ACTIVITY_CODES[i] for i in np.unique(ws.labels)}) if ws.labels is not None else []
