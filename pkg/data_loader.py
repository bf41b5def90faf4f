"""
Sensor data pipeline for the FedHAR simulator
Resampling, windowing, z-normalization, client partitioning and the on-disk formats
"""
import enum
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from config import (
    ACTIVITY_CODES,
    BYTES_PER_LABEL,
    BYTES_PER_VALUE,
    MIN_WINDOWS_PER_CLIENT,
    N_CHANNELS,
    SENSOR_COLUMNS,
    TARGET_HZ,
    WINDOW_HOP,
    WINDOW_LEN,
    ZNORM_EPSILON,
)
from utils.seeding import derive_seed

logger = logging.getLogger(__name__)

FWIN_MAGIC = b"FWIN"
FWIN_VERSION = 1
MANIFEST_VERSION = 1
SERVER_CLIENT_ID = "server"


class DataError(ValueError):
    """Input data violates a pipeline precondition"""


ActivityLabel = enum.IntEnum("ActivityLabel", [(code, i) for i, code in enumerate(ACTIVITY_CODES)])


def label_index(code):
    """Activity code (e.g. 'ST') or index -> index"""
    if isinstance(code, (int, np.integer)):
        if not 0 <= int(code) < len(ACTIVITY_CODES):
            raise DataError(f"activity index out of range: {code}")
        return int(code)
    code = str(code).strip().upper()
    if code not in ActivityLabel.__members__:
        raise DataError(f"unknown activity code {code!r}")
    return int(ActivityLabel[code])


def label_code(index):
    return ActivityLabel(int(index)).name


# ============================================================
# DOMAIN TYPES
# ============================================================
@dataclass
class WindowSet:
    """Fixed-length 6-channel windows from one client (or a pooled set)"""
    windows: np.ndarray
    labels: Optional[np.ndarray] = None
    source_dataset: str = ""
    client_id: str = ""

    def __post_init__(self):
        self.windows = np.ascontiguousarray(np.asarray(self.windows, dtype=np.float32))
        if self.windows.ndim != 3 or self.windows.shape[1:] != (N_CHANNELS, WINDOW_LEN):
            if not (self.windows.size == 0):
                raise DataError(
                    f"windows must be [n, {N_CHANNELS}, {WINDOW_LEN}], got {list(self.windows.shape)}"
                )
            self.windows = self.windows.reshape(0, N_CHANNELS, WINDOW_LEN)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.windows),):
                raise DataError(f"labels must have shape [{len(self.windows)}], got {list(self.labels.shape)}")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(ACTIVITY_CODES)):
                raise DataError("labels must be valid activity indices")

    def __len__(self):
        return len(self.windows)

    @property
    def has_labels(self):
        return self.labels is not None

    def take(self, indices, keep_labels=True):
        indices = np.asarray(indices, dtype=np.int64)
        return WindowSet(
            windows=self.windows[indices],
            labels=self.labels[indices] if (keep_labels and self.labels is not None) else None,
            source_dataset=self.source_dataset,
            client_id=self.client_id,
        )


@dataclass
class ClientShard:
    """
    One simulated device: label-stripped training windows plus a labeled local test split.

    `withheld_labels` keeps the ground truth of the stripped training windows for
    analysis (class distribution, embedding export); training never reads it.
    """
    client_id: str
    source_dataset: str
    train: WindowSet
    test: WindowSet
    withheld_labels: Optional[np.ndarray] = None

    @property
    def n_train(self):
        return len(self.train)

    @property
    def n_test(self):
        return len(self.test)


@dataclass
class ClientPartition:
    """Result of splitting one client's labeled windows"""
    shard: ClientShard
    server_labeled: WindowSet


@dataclass
class FederationLayout:
    """All clients plus the server's labeled pool and the combined test set"""
    clients: List[ClientShard]
    server_labeled: WindowSet
    server_test: WindowSet
    test_sources: np.ndarray
    test_client_ids: np.ndarray
    labeled_sources: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=object))

    @property
    def tags(self):
        """Source tags in first-appearance order"""
        seen = []
        for shard in self.clients:
            if shard.source_dataset not in seen:
                seen.append(shard.source_dataset)
        return seen

    @property
    def test_index(self) -> Dict[str, np.ndarray]:
        """Indices into server_test per source tag"""
        return {tag: np.flatnonzero(self.test_sources == tag) for tag in self.tags}

    def client(self, client_id):
        for shard in self.clients:
            if shard.client_id == client_id:
                return shard
        raise KeyError(client_id)

    def pooled_unlabeled(self):
        """Union of all clients' label-stripped training windows"""
        if not self.clients:
            return WindowSet(np.zeros((0, N_CHANNELS, WINDOW_LEN), dtype=np.float32), client_id="pooled")
        return WindowSet(
            np.concatenate([c.train.windows for c in self.clients], axis=0),
            source_dataset="mixed",
            client_id="pooled",
        )


# ============================================================
# STREAM PREPROCESSING
# ============================================================
def resampled_length(t, src_hz, dst_hz=TARGET_HZ):
    # small tolerance so exact ratios such as 4 * 50 / 100 never floor below the integer
    return int(math.floor((t - 1) * dst_hz / src_hz + 1e-9)) + 1


def resample(stream, src_hz, dst_hz=TARGET_HZ):
    """
    Linearly interpolate a [t, ch] stream onto a uniform dst_hz grid.

    Output length is floor((t - 1) * dst_hz / src_hz) + 1.
    """
    stream = np.asarray(stream, dtype=np.float64)
    if stream.ndim == 1:
        stream = stream[:, None]
    if src_hz <= 0 or dst_hz <= 0:
        raise DataError(f"sampling rates must be positive (src={src_hz}, dst={dst_hz})")
    t = stream.shape[0]
    if t < 2:
        raise DataError(f"need at least 2 samples to resample, got {t}")
    if src_hz == dst_hz:
        return stream.copy()
    t_out = resampled_length(t, src_hz, dst_hz)
    positions = np.arange(t_out) * (src_hz / dst_hz)
    positions = np.minimum(positions, t - 1)
    source = np.arange(t)
    return np.stack([np.interp(positions, source, stream[:, ch]) for ch in range(stream.shape[1])], axis=1)


def resample_labels(labels, src_hz, dst_hz=TARGET_HZ):
    """Nearest-sample label for each resampled time step"""
    labels = np.asarray(labels)
    if src_hz == dst_hz:
        return labels.copy()
    t_out = resampled_length(len(labels), src_hz, dst_hz)
    nearest = np.rint(np.arange(t_out) * (src_hz / dst_hz)).astype(np.int64)
    return labels[np.minimum(nearest, len(labels) - 1)]


def window_count(t, window=WINDOW_LEN, hop=WINDOW_HOP):
    if t < window:
        return 0
    return (t - window) // hop + 1


def make_windows(stream, window=WINDOW_LEN, hop=WINDOW_HOP):
    """
    Slice a [t, ch] stream into [n, ch, window] frames with the given hop.

    The trailing remainder shorter than a full window is dropped.
    """
    stream = np.asarray(stream, dtype=np.float32)
    if stream.ndim != 2:
        raise DataError(f"stream must be [t, ch], got {list(stream.shape)}")
    t = stream.shape[0]
    if t < window:
        raise DataError(f"stream too short: {t} samples, need at least {window}")
    frames = np.lib.stride_tricks.sliding_window_view(stream, window, axis=0)[::hop]
    return np.ascontiguousarray(frames, dtype=np.float32)


def window_labels(labels, window=WINDOW_LEN, hop=WINDOW_HOP):
    """Majority per-sample label of each window (ties go to the lower index)"""
    labels = np.asarray(labels, dtype=np.int64)
    frames = np.lib.stride_tricks.sliding_window_view(labels, window)[::hop]
    return np.array([np.bincount(f, minlength=len(ACTIVITY_CODES)).argmax() for f in frames], dtype=np.int64)


def znormalize_windows(windows, eps=ZNORM_EPSILON):
    """Per window, per channel standardization"""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.size == 0:
        return windows.astype(np.float32)
    mean = windows.mean(axis=2, keepdims=True)
    std = windows.std(axis=2, keepdims=True)
    return ((windows - mean) / (std + eps)).astype(np.float32)


def znormalize(ws, eps=ZNORM_EPSILON):
    """Return a copy of `ws` with each channel of each window z-normalized"""
    return WindowSet(
        windows=znormalize_windows(ws.windows, eps),
        labels=None if ws.labels is None else ws.labels.copy(),
        source_dataset=ws.source_dataset,
        client_id=ws.client_id,
    )


# ============================================================
# PARTITIONING
# ============================================================
def _round_fifth(n):
    """round-half-up(n / 5) in exact integer arithmetic"""
    return (2 * n + 5) // 10


def split_sizes(n):
    """(test, client_unlabeled, server_labeled) sizes for n windows"""
    n_test = _round_fifth(n)
    n_server = _round_fifth(n - n_test)
    return n_test, n - n_test - n_server, n_server


def partition(labeled, seed):
    """
    Split one client's labeled windows into test / client-unlabeled / server-labeled.

    20% goes to test, 20% of the remainder (with labels) to the server pool, the rest stays
    on the client with labels stripped. Seeded shuffle, then slice.
    """
    if labeled.labels is None:
        raise DataError(f"client {labeled.client_id}: partition needs labeled windows")
    n = len(labeled)
    if n < MIN_WINDOWS_PER_CLIENT:
        raise DataError(f"client {labeled.client_id}: {n} windows, need at least {MIN_WINDOWS_PER_CLIENT}")

    n_test, n_client, n_server = split_sizes(n)
    order = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(order[:n_test])
    server_idx = np.sort(order[n_test:n_test + n_server])
    client_idx = np.sort(order[n_test + n_server:])

    shard = ClientShard(
        client_id=labeled.client_id,
        source_dataset=labeled.source_dataset,
        train=labeled.take(client_idx, keep_labels=False),
        test=labeled.take(test_idx),
        withheld_labels=labeled.labels[client_idx].copy(),
    )
    return ClientPartition(shard=shard, server_labeled=labeled.take(server_idx))


def build_federation_layout(client_sets, seed):
    """
    Partition every client and assemble the server pool and combined test set.

    Clients are ordered by ascending client id.
    """
    if not client_sets:
        raise DataError("no clients to partition")
    ids = [ws.client_id for ws in client_sets]
    if len(set(ids)) != len(ids):
        raise DataError("client ids must be unique")

    clients = []
    labeled_parts = []
    for ws in sorted(client_sets, key=lambda w: w.client_id):
        part = partition(ws, derive_seed(seed, "partition", ws.client_id))
        clients.append(part.shard)
        labeled_parts.append(part.server_labeled)

    server_labeled = WindowSet(
        windows=np.concatenate([p.windows for p in labeled_parts], axis=0),
        labels=np.concatenate([p.labels for p in labeled_parts]),
        source_dataset="mixed",
        client_id=SERVER_CLIENT_ID,
    )
    server_test = WindowSet(
        windows=np.concatenate([c.test.windows for c in clients], axis=0),
        labels=np.concatenate([c.test.labels for c in clients]),
        source_dataset="mixed",
        client_id="server_test",
    )
    test_sources = np.concatenate([np.full(c.n_test, c.source_dataset, dtype=object) for c in clients])
    test_client_ids = np.concatenate([np.full(c.n_test, c.client_id, dtype=object) for c in clients])
    labeled_sources = np.concatenate([np.full(len(p), p.source_dataset, dtype=object) for p in labeled_parts])

    layout = FederationLayout(
        clients=clients,
        server_labeled=server_labeled,
        server_test=server_test,
        test_sources=test_sources,
        test_client_ids=test_client_ids,
        labeled_sources=labeled_sources,
    )
    logger.info(
        f"Federation layout: {len(clients)} clients, {sum(c.n_train for c in clients)} unlabeled client windows, "
        f"{len(server_labeled)} server-labeled, {len(server_test)} test"
    )
    return layout


# ============================================================
# FWIN FILES
# ============================================================
def _pack_str(value):
    encoded = value.encode("utf-8")
    return struct.pack("<I", len(encoded)) + encoded


def window_set_to_bytes(ws):
    header = [
        FWIN_MAGIC,
        struct.pack("<I", FWIN_VERSION),
        _pack_str(ws.client_id),
        _pack_str(ws.source_dataset),
        struct.pack("<IB", len(ws), 1 if ws.has_labels else 0),
    ]
    body = [np.ascontiguousarray(ws.windows, dtype="<f4").tobytes()]
    if ws.has_labels:
        body.append(ws.labels.astype(np.uint8).tobytes())
    return b"".join(header + body)


def window_set_from_bytes(payload):
    view = memoryview(payload)
    if len(view) < 8 or bytes(view[:4]) != FWIN_MAGIC:
        raise DataError("not a FWIN file (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", view, 4)
        if version != FWIN_VERSION:
            raise DataError(f"unsupported FWIN version {version}")
        offset = 8
        strings = []
        for _ in range(2):
            (length,) = struct.unpack_from("<I", view, offset)
            offset += 4
            strings.append(bytes(view[offset:offset + length]).decode("utf-8"))
            offset += length
        n, has_labels = struct.unpack_from("<IB", view, offset)
        offset += 5
    except struct.error as e:
        raise DataError(f"truncated FWIN header: {e}")

    n_values = n * N_CHANNELS * WINDOW_LEN
    expected = offset + 4 * n_values + (n if has_labels else 0)
    if len(view) != expected:
        raise DataError(f"FWIN size mismatch: expected {expected} bytes, got {len(view)}")
    windows = np.frombuffer(view[offset:offset + 4 * n_values], dtype="<f4").astype(np.float32)
    offset += 4 * n_values
    labels = None
    if has_labels:
        labels = np.frombuffer(view[offset:offset + n], dtype=np.uint8).astype(np.int64)
    return WindowSet(
        windows=windows.reshape(n, N_CHANNELS, WINDOW_LEN),
        labels=labels,
        client_id=strings[0],
        source_dataset=strings[1],
    )


def write_window_file(path, ws):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(window_set_to_bytes(ws))


def read_window_file(path):
    with open(path, "rb") as f:
        return window_set_from_bytes(f.read())


# ============================================================
# CSV INGESTION
# ============================================================
def read_sensor_csv(path, sample_rate_hz, client_id, source_dataset, normalize=True):
    """
    Ingest one raw stream CSV (t, ax, ay, az, gx, gy, gz[, label]) into windows.

    The stream is resampled to 50 Hz, framed with 50% overlap and z-normalized per window.
    Labels may be activity codes or indices; each window takes the majority label.
    """
    df = pd.read_csv(path)
    missing = [c for c in SENSOR_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing sensor columns {missing}")
    if "t" in df.columns:
        df = df.sort_values("t", kind="stable")
    stream = df[SENSOR_COLUMNS].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(stream)):
        raise DataError(f"{path}: sensor columns contain missing or non-finite values")

    labels = None
    if "label" in df.columns:
        labels = np.array([label_index(v) for v in df["label"].tolist()], dtype=np.int64)

    stream = resample(stream, sample_rate_hz)
    windows = make_windows(stream)
    window_y = None
    if labels is not None:
        window_y = window_labels(resample_labels(labels, sample_rate_hz)[:len(stream)])
    ws = WindowSet(windows=windows, labels=window_y, source_dataset=source_dataset, client_id=client_id)
    logger.info(f"Ingested {path}: {len(ws)} windows for client {client_id} ({source_dataset})")
    return znormalize(ws) if normalize else ws


# ============================================================
# MANIFEST
# ============================================================
def write_manifest(path, client_sets, seed, files, extra=None):
    """Manifest JSON listing each client's file, tag and window count"""
    base = os.path.dirname(os.path.abspath(path))
    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": seed,
        "window_len": WINDOW_LEN,
        "n_channels": N_CHANNELS,
        "clients": [
            {
                "client_id": ws.client_id,
                "source": ws.source_dataset,
                "file": os.path.relpath(os.path.abspath(file), base),
                "format": "fwin",
                "n_windows": len(ws),
                "has_labels": ws.has_labels,
            }
            for ws, file in zip(client_sets, files)
        ],
    }
    if extra:
        manifest.update(extra)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(path):
    """
    Load every client listed in a manifest.

    Returns:
        list[WindowSet]: one labeled window set per client, in manifest order
    """
    try:
        with open(path, "r") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{path} is not valid JSON: {e}")
    entries = manifest.get("clients")
    if not entries:
        raise DataError(f"{path}: manifest lists no clients")

    base = os.path.dirname(os.path.abspath(path))
    client_sets = []
    for entry in entries:
        for key in ("client_id", "source", "file"):
            if key not in entry:
                raise DataError(f"{path}: manifest entry missing {key!r}: {entry}")
        file = os.path.join(base, entry["file"])
        fmt = entry.get("format", "fwin")
        if fmt == "fwin":
            ws = read_window_file(file)
            if ws.client_id != entry["client_id"] or ws.source_dataset != entry["source"]:
                raise DataError(f"{file}: header does not match manifest entry {entry['client_id']}")
        elif fmt == "csv":
            if "sample_rate_hz" not in entry:
                raise DataError(f"{path}: csv entry {entry['client_id']} needs sample_rate_hz")
            ws = read_sensor_csv(file, float(entry["sample_rate_hz"]), entry["client_id"], entry["source"])
        else:
            raise DataError(f"{path}: unknown client file format {fmt!r}")
        if not ws.has_labels:
            raise DataError(f"{file}: client data must be labeled before partitioning")
        client_sets.append(ws)
    logger.info(f"Loaded {len(client_sets)} clients from {path}")
    return client_sets


# ============================================================
# STORAGE FOOTPRINT
# ============================================================
def window_bytes(n_windows, labeled):
    per_window = N_CHANNELS * WINDOW_LEN * BYTES_PER_VALUE
    return n_windows * per_window + (n_windows * BYTES_PER_LABEL if labeled else 0)


def windowset_bytes(ws):
    return window_bytes(len(ws), ws.has_labels)


def storage_footprint(layout):
    """
    Local data footprint per client (unlabeled train + labeled test) and its mean per tag.

    Returns:
        tuple: (per_client DataFrame, per_dataset DataFrame)
    """
    rows = []
    for shard in layout.clients:
        total = windowset_bytes(shard.train) + windowset_bytes(shard.test)
        rows.append({
            "client_id": shard.client_id,
            "source": shard.source_dataset,
            "n_train": shard.n_train,
            "n_test": shard.n_test,
            "bytes": total,
            "mb": total / 1024 ** 2,
        })
    per_client = pd.DataFrame(rows, columns=["client_id", "source", "n_train", "n_test", "bytes", "mb"])
    per_dataset = (
        per_client.groupby("source", sort=False)
        .agg(clients=("client_id", "count"), mean_bytes=("bytes", "mean"), mean_mb=("mb", "mean"))
        .reset_index()
    )
    return per_client, per_dataset
