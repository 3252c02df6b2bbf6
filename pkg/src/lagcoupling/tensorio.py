"""Dataset containers, the LDT1 tensor format, JSON configuration and CSV output.

LDT1 layout (all little-endian)::

    bytes 0-3     magic b"LDT1"
    bytes 4-7     u32 rank
    next 4*rank   u32 dims
    remainder     f64 payload, row-major (last index fastest)
"""
import json
import math
import struct
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError, IoError

MAGIC = b"LDT1"

__all__ = [
    "AnalysisConfig",
    "PairedDataset",
    "load_config",
    "read_dataset",
    "read_tensor",
    "write_dataset",
    "write_matrix_csv",
    "write_tensor",
]


def write_tensor(t, path):
    """Write an array of float64 values to ``path`` in LDT1 format."""
    arr = np.ascontiguousarray(t, dtype="<f8")
    if arr.ndim == 0:
        raise DataError("a tensor needs rank >= 1")
    if not np.all(np.isfinite(arr)):
        raise DataError("tensor holds non-finite values")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(arr.tobytes(order="C"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_tensor(path):
    """Read an LDT1 file and return a float64 ndarray with the stored dims.

    Raises
    ------
    FormatError
        Bad magic bytes, truncated header, or payload length not matching
        the product of the dims.
    DataError
        The payload holds NaN or Inf.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    off = 8 + 4 * rank
    if rank == 0 or len(raw) < off:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: zero-length dimension")
    n = math.prod(dims)
    if len(raw) - off != 8 * n:
        raise FormatError(f"{path}: payload has {len(raw) - off} bytes, dims need {8 * n}")
    data = np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64).reshape(dims)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: non-finite values")
    return data


def write_matrix_csv(m, path):
    """Write a 1-d or 2-d array as header-less CSV with 17 significant digits."""
    arr = np.asarray(m, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DataError("write_matrix_csv expects a matrix")
    if not np.all(np.isfinite(arr)):
        raise DataError("matrix holds non-finite values")
    text = "".join(",".join(format(v, ".17g") for v in row) + "\n" for row in arr)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


@dataclass
class PairedDataset:
    """Simultaneous recordings of two regions.

    ``region1`` has shape ``(N, T, d1)`` and ``region2`` has shape
    ``(N, T, d2)``: trials, time samples and channels. ``meta`` carries
    free-form provenance (simulation anchors, seeds, ...).
    """

    region1: np.ndarray
    region2: np.ndarray
    sample_rate_hz: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.region1 = np.asarray(self.region1, dtype=float)
        self.region2 = np.asarray(self.region2, dtype=float)
        if self.region1.ndim != 3 or self.region2.ndim != 3:
            raise DataError("each region must be a (trials, times, channels) array")
        if self.region1.shape[:2] != self.region2.shape[:2]:
            raise DataError(
                f"regions disagree on (trials, times): {self.region1.shape[:2]} vs {self.region2.shape[:2]}"
            )
        if self.n_trials < 2:
            raise DataError("need at least two trials")
        if not self.sample_rate_hz > 0:
            raise DataError("sample rate must be positive")

    @property
    def n_trials(self):
        return self.region1.shape[0]

    @property
    def n_times(self):
        return self.region1.shape[1]

    @property
    def dims(self):
        return self.region1.shape[2], self.region2.shape[2]

    def regions(self):
        return self.region1, self.region2

    def permuted(self, perm1=None, perm2=None):
        """Return a copy with trials reordered independently per region."""
        r1 = self.region1 if perm1 is None else self.region1[perm1]
        r2 = self.region2 if perm2 is None else self.region2[perm2]
        return PairedDataset(r1, r2, self.sample_rate_hz, dict(self.meta))


def write_dataset(ds, directory, stem="data"):
    """Write ``ds`` as two LDT1 files plus a JSON sidecar; return the paths."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IoError(f"output directory {directory} does not exist")
    p1 = directory / f"{stem}_region1.ldt"
    p2 = directory / f"{stem}_region2.ldt"
    pm = directory / f"{stem}_meta.json"
    write_tensor(ds.region1, p1)
    write_tensor(ds.region2, p2)
    meta = {"sample_rate_hz": ds.sample_rate_hz, **ds.meta}
    try:
        pm.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default))
    except OSError as exc:
        raise IoError(f"cannot write {pm}: {exc}") from exc
    return p1, p2, pm


def read_dataset(directory, stem="data"):
    directory = Path(directory)
    pm = directory / f"{stem}_meta.json"
    try:
        meta = json.loads(pm.read_text())
    except OSError as exc:
        raise IoError(f"cannot read {pm}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{pm}: {exc}") from exc
    fs = meta.pop("sample_rate_hz", None)
    if fs is None:
        raise FormatError(f"{pm}: missing sample_rate_hz")
    r1 = read_tensor(directory / f"{stem}_region1.ldt")
    r2 = read_tensor(directory / f"{stem}_region2.ldt")
    return PairedDataset(r1, r2, float(fs), meta)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not JSON serialisable: {type(obj)}")


AUTO = "auto"


@dataclass
class AnalysisConfig:
    """All knobs of a full analysis run.

    Only ``d_auto`` and ``d_cross`` are required; everything else has a
    default. Penalties accept ``"auto"`` to request calibration.
    """

    d_auto: int
    d_cross: int
    f0_hz: float = 18.0
    bandwidth_ms: float = 50.0
    decimate_factor: int = 10
    lambda_auto: float = 0.0
    lambda_cross: object = AUTO
    lambda_diag: object = 0.1
    iter_max: int = 100
    ths: float = 1e-3
    alpha_bh: float = 0.05
    n_bootstrap: int = 200
    seed: int = 0
    max_false: int = 0
    n_tune_bootstrap: int = 50
    lambda_cross_grid: list = None
    window_ms: float = 100.0
    tau1_ms: float = 15.0
    tau2_ms: float = 30.0
    n_perm: int = 2000

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(msg):
            raise ConfigError(msg)

        for name in ("d_auto", "d_cross", "decimate_factor", "iter_max", "n_bootstrap",
                     "seed", "max_false", "n_tune_bootstrap", "n_perm"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                bad(f"{name} must be an integer, got {v!r}")
        if self.d_auto < 0 or self.d_cross < 0:
            bad("bandwidths must be nonnegative")
        if self.decimate_factor < 1:
            bad("decimate_factor must be >= 1")
        if self.iter_max < 1:
            bad("iter_max must be positive")
        if self.n_bootstrap < 2 or self.n_tune_bootstrap < 2:
            bad("bootstrap sizes must be >= 2")
        if self.n_perm < 1:
            bad("n_perm must be positive")
        if not 0 <= self.seed < 2**64:
            bad("seed must fit in 64 bits")
        if self.max_false < 0:
            bad("max_false must be nonnegative")
        for name in ("f0_hz", "bandwidth_ms", "ths", "window_ms", "tau1_ms", "tau2_ms"):
            v = getattr(self, name)
            if not _is_real(v) or not v > 0:
                bad(f"{name} must be a positive number, got {v!r}")
        if not _is_real(self.alpha_bh) or not 0 < self.alpha_bh < 1:
            bad(f"alpha_bh must lie in (0, 1), got {self.alpha_bh!r}")
        if not _is_real(self.lambda_auto) or self.lambda_auto < 0:
            bad("lambda_auto must be a nonnegative number")
        for name in ("lambda_cross", "lambda_diag"):
            v = getattr(self, name)
            if v == AUTO:
                continue
            if not _is_real(v) or v < 0:
                bad(f"{name} must be a nonnegative number or 'auto', got {v!r}")
        if self.tau1_ms > self.tau2_ms:
            bad("tau1_ms must not exceed tau2_ms")
        if self.lambda_cross_grid is not None:
            g = self.lambda_cross_grid
            if not isinstance(g, list) or not g or not all(_is_real(x) and x >= 0 for x in g):
                bad("lambda_cross_grid must be a nonempty list of nonnegative numbers")

    def check_times(self, n_times):
        """Bandwidths must leave room inside the decimated series."""
        if self.d_cross > n_times - 1 or self.d_auto > n_times - 1:
            raise ConfigError(
                f"bandwidths d_auto={self.d_auto}, d_cross={self.d_cross} exceed T-1={n_times - 1}"
            )

    def to_dict(self):
        return asdict(self)


def _is_real(v):
    return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) and math.isfinite(v)


def load_config(path):
    """Load an :class:`AnalysisConfig` from a JSON file.

    Unknown keys are rejected so typos do not silently fall back to defaults.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(doc)


def config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    known = {f.name for f in fields(AnalysisConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    for req in ("d_auto", "d_cross"):
        if req not in doc:
            raise ConfigError(f"missing required field {req!r}")
    # null means "use the default"
    doc = {k: v for k, v in doc.items() if v is not None}
    return AnalysisConfig(**doc)
