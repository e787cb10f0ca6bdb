"""Trial data container and its on-disk format.

A dataset is N independent trials of q units sampled at T time bins, stored
as a (N, q, T) float64 array with units concatenated in group order. On disk
it is a JSON manifest (``basepath.json``) describing the shape, sampling
period, group sizes, and any generative ground truth, next to a little-endian
float64 payload (``basepath.bin``) of exactly 8*N*q*T bytes laid out
trial-major, then unit-major, each row holding that unit's T samples.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigError
from .state import FORMAT_VERSION, Groups


@dataclass
class Dataset:
    ys: np.ndarray  # (N, q, T)
    delta: float  # sampling period, ms
    groups: Groups
    seed: int = 0
    ground_truth: dict = field(default_factory=dict)
    latents: np.ndarray = None  # optional (N, M, p, T) generative latents

    def __post_init__(self):
        self.ys = np.asarray(self.ys, dtype=float)
        if self.ys.ndim != 3:
            raise ConfigError(f"expected (N, q, T) data, got shape {self.ys.shape}")
        if self.ys.shape[1] != self.groups.q:
            raise ConfigError(
                f"data has {self.ys.shape[1]} units, groups describe {self.groups.q}"
            )

    @property
    def N(self):
        return self.ys.shape[0]

    @property
    def q(self):
        return self.ys.shape[1]

    @property
    def T(self):
        return self.ys.shape[2]

    def group_view(self, m):
        """Trials of one group, (N, q_m, T)."""
        return self.ys[:, self.groups.slice(m), :]


def _jsonify(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    return obj


def save_dataset(basepath, ds):
    """Write ``basepath.json`` + ``basepath.bin``; returns the base path."""
    basepath = str(basepath)
    if basepath.endswith(".json"):
        basepath = basepath[:-5]
    payload = np.ascontiguousarray(ds.ys, dtype="<f8")
    with open(basepath + ".bin", "wb") as fh:
        fh.write(payload.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "dataset",
        "N": int(ds.N),
        "T": int(ds.T),
        "delta_ms": float(ds.delta),
        "groups": list(ds.groups.sizes),
        "seed": int(ds.seed),
        "ground_truth": _jsonify(ds.ground_truth),
    }
    with open(basepath + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return basepath


def load_dataset(basepath):
    basepath = str(basepath)
    if basepath.endswith(".json"):
        basepath = basepath[:-5]
    try:
        with open(basepath + ".json") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read dataset manifest: {exc}") from exc
    if manifest.get("kind") != "dataset":
        raise ConfigError(f"{basepath}.json is not a dataset manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported dataset version {manifest.get('format_version')}")
    N, T = manifest["N"], manifest["T"]
    groups = Groups(tuple(manifest["groups"]))
    expected = 8 * N * groups.q * T
    raw = open(basepath + ".bin", "rb").read()
    if len(raw) != expected:
        raise ConfigError(
            f"payload size {len(raw)} does not match manifest ({expected} bytes)"
        )
    ys = np.frombuffer(raw, dtype="<f8").reshape(N, groups.q, T).astype(float)
    gt = manifest.get("ground_truth", {})
    for key in ("C", "d", "phis", "taus", "delays", "noise_vars"):
        if key in gt:
            gt[key] = np.asarray(gt[key], dtype=float)
    return Dataset(
        ys=ys,
        delta=manifest["delta_ms"],
        groups=groups,
        seed=manifest.get("seed", 0),
        ground_truth=gt,
    )
