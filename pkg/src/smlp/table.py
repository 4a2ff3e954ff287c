"""Dense rectilinear N-dimensional lookup tables.

A table maps points of an N-dimensional rectilinear grid (N up to 8,
per-axis coordinates strictly increasing but not necessarily uniform) to
one or more output scalars.  This module owns the data model, synthetic
table generation, the multilinear-interpolation baseline, normalization
of inputs to the unit cube, and the binary file format.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

MAX_DIMS = 8

TABLE_MAGIC = b"SMLP-TAB\0"
TABLE_VERSION = 1
_FLAG_F32 = 1

SYNTHETIC_FAMILIES = ("multilinear", "gauss-bumps", "regimes", "flame-like")


@dataclass(frozen=True)
class GridTable:
    """Dense table over a rectilinear grid.

    ``values`` has shape (num_points, num_scalars): rows enumerate grid
    points in row-major order (last axis fastest), so one row is the
    contiguous scalar vector of one grid point.  Instances are immutable
    after construction and safe to share across threads.
    """

    axes: tuple[np.ndarray, ...]
    scalar_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        if not 1 <= len(self.axes) <= MAX_DIMS:
            raise ValueError(f"dims must be 1..{MAX_DIMS}, got {len(self.axes)}")
        axes = tuple(np.ascontiguousarray(a, dtype=np.float64) for a in self.axes)
        for d, a in enumerate(axes):
            if a.ndim != 1 or len(a) < 2:
                raise ValueError(f"axis {d} must be 1-D with length >= 2")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"axis {d} has non-finite coordinates")
            if not np.all(np.diff(a) > 0):
                raise ValueError(f"axis {d} is not strictly increasing")
        names = tuple(str(n) for n in self.scalar_names)
        if len(names) < 1:
            raise ValueError("at least one output scalar required")
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        npts = int(np.prod([len(a) for a in axes]))
        if vals.shape != (npts, len(names)):
            raise ValueError(
                f"values shape {vals.shape} != ({npts}, {len(names)}) "
                "implied by axes and scalar names"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("table values contain NaN/Inf")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "scalar_names", names)
        object.__setattr__(self, "values", vals)

    @property
    def dims(self) -> int:
        return len(self.axes)

    @property
    def num_scalars(self) -> int:
        return len(self.scalar_names)

    @property
    def num_points(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    def values_grid(self) -> np.ndarray:
        """Values reshaped to (*axis lengths, num_scalars), zero copy."""
        return self.values.reshape(self.shape + (self.num_scalars,))

    def point(self, flat_index: int) -> "TablePoint":
        idx = np.unravel_index(flat_index, self.shape)
        coords = np.array([a[i] for a, i in zip(self.axes, idx)])
        return TablePoint(inputs=coords, outputs=self.values[flat_index].copy())


@dataclass(frozen=True)
class TablePoint:
    """One flattened training sample: grid coordinates and scalar values."""

    inputs: np.ndarray
    outputs: np.ndarray


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic synthetic table."""

    family: str
    axis_lengths: tuple[int, ...]
    num_scalars: int
    seed: int

    def __post_init__(self):
        if self.family not in SYNTHETIC_FAMILIES:
            raise ConfigError(
                f"unknown synthetic family {self.family!r}; "
                f"choose one of {', '.join(SYNTHETIC_FAMILIES)}"
            )
        lengths = tuple(int(n) for n in self.axis_lengths)
        if not 1 <= len(lengths) <= MAX_DIMS:
            raise ConfigError(f"axis count must be 1..{MAX_DIMS}")
        if any(n < 2 for n in lengths):
            raise ConfigError("every axis length must be >= 2")
        if self.num_scalars < 1:
            raise ConfigError("scalar count must be >= 1")
        object.__setattr__(self, "axis_lengths", lengths)


@dataclass(frozen=True)
class NormStats:
    """Per-dimension affine maps between raw coordinates and [0, 1]."""

    lows: np.ndarray
    highs: np.ndarray

    def __post_init__(self):
        lows = np.asarray(self.lows, dtype=np.float64)
        highs = np.asarray(self.highs, dtype=np.float64)
        if np.any(highs <= lows):
            raise ValueError("degenerate axis: min == max")
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return (np.asarray(raw, dtype=np.float64) - self.lows) / (self.highs - self.lows)

    def denormalize(self, unit: np.ndarray) -> np.ndarray:
        return np.asarray(unit, dtype=np.float64) * (self.highs - self.lows) + self.lows


def _family_params(spec: SyntheticSpec):
    """Draw axes and per-scalar function parameters for a spec.

    The draw order is fixed so a spec always regenerates the same table.
    """
    rng = np.random.default_rng(spec.seed)
    dims = len(spec.axis_lengths)

    axes = []
    for n in spec.axis_lengths:
        span = 10.0 ** rng.uniform(0.0, 3.0)
        lo = rng.uniform(-0.5, 0.5) * span
        gaps = rng.uniform(0.6, 1.4, size=n - 1)
        coords = np.empty(n)
        coords[0] = lo
        coords[1:] = lo + span * np.cumsum(gaps) / gaps.sum()
        axes.append(coords)

    per_scalar = []
    for _ in range(spec.num_scalars):
        scale = 10.0 ** rng.uniform(-2.0, 3.0)
        if spec.family == "multilinear":
            p = {
                "c": scale * rng.choice([-1.0, 1.0]),
                "a": rng.uniform(-1.0, 1.0, size=dims),
                "b": rng.uniform(0.5, 1.5, size=dims),
            }
        elif spec.family == "gauss-bumps":
            k = 4
            p = {
                "base": rng.uniform(0.2, 0.5) * scale,
                "amp": rng.uniform(0.3, 1.0, size=k) * scale,
                "mu": rng.uniform(0.0, 1.0, size=(k, dims)),
                "sigma": rng.uniform(0.15, 0.5, size=(k, dims)),
            }
        elif spec.family == "regimes":
            seam_dims = [0] if dims == 1 else [0, 1]
            p = {
                "base": rng.uniform(1.0, 2.0) * scale,
                "lin": rng.uniform(-0.3, 0.3, size=dims) * scale,
                "seam_dims": seam_dims,
                "seam_pos": rng.uniform(0.45, 0.55, size=len(seam_dims)),
                "kink": rng.uniform(0.5, 1.0, size=len(seam_dims))
                * rng.choice([-1.0, 1.0], size=len(seam_dims))
                * scale,
                "mod": rng.uniform(-0.3, 0.3, size=len(seam_dims)),
            }
        else:  # flame-like
            p = {
                "base": rng.uniform(0.2, 0.4) * scale,
                "amp": scale,
                "peak_at": rng.uniform(0.25, 0.6),
                "width": rng.uniform(0.28, 0.45),
                "eps": rng.uniform(0.08, 0.22, size=max(dims - 1, 1)),
                "phase": rng.uniform(0.0, np.pi, size=max(dims - 1, 1)),
            }
        per_scalar.append(p)
    return axes, per_scalar


def _eval_family(family: str, params: dict, u: np.ndarray) -> np.ndarray:
    """Evaluate one scalar's generating function on unit-cube coordinates."""
    dims = u.shape[-1]
    if family == "multilinear":
        out = np.full(u.shape[:-1], params["c"])
        for d in range(dims):
            out = out * (params["a"][d] * u[..., d] + params["b"][d])
        return out
    if family == "gauss-bumps":
        out = np.full(u.shape[:-1], params["base"])
        for amp, mu, sigma in zip(params["amp"], params["mu"], params["sigma"]):
            expo = np.zeros(u.shape[:-1])
            for d in range(dims):
                expo += (u[..., d] - mu[d]) ** 2 / (2.0 * sigma[d] ** 2)
            out = out + amp * np.exp(-expo)
        return out
    if family == "regimes":
        out = np.full(u.shape[:-1], params["base"])
        for d in range(dims):
            out = out + params["lin"][d] * u[..., d]
        for i, d in enumerate(params["seam_dims"]):
            other = u[..., (d + 1) % dims]
            out = out + params["kink"][i] * np.abs(u[..., d] - params["seam_pos"][i]) * (
                1.0 + params["mod"][i] * other
            )
        return out
    # flame-like
    peak = np.exp(-((u[..., 0] - params["peak_at"]) ** 2) / (2.0 * params["width"] ** 2))
    mod = np.ones(u.shape[:-1])
    for d in range(1, dims):
        e = params["eps"][d - 1]
        ph = params["phase"][d - 1]
        mod = mod * (1.0 + e * np.cos(np.pi * u[..., d] + ph))
    return params["base"] + params["amp"] * peak * mod


def generate_synthetic(spec: SyntheticSpec) -> GridTable:
    """Build the dense table for a synthetic spec.

    Deterministic: the same spec yields a bit-identical table.
    """
    axes, per_scalar = _family_params(spec)
    unit_axes = [(a - a[0]) / (a[-1] - a[0]) for a in axes]
    mesh = np.meshgrid(*unit_axes, indexing="ij")
    u = np.stack([m.reshape(-1) for m in mesh], axis=-1)
    values = np.empty((u.shape[0], spec.num_scalars))
    for k, params in enumerate(per_scalar):
        values[:, k] = _eval_family(spec.family, params, u)
    names = tuple(f"s{k:02d}" for k in range(spec.num_scalars))
    return GridTable(axes=tuple(axes), scalar_names=names, values=values)


def synthetic_reference(spec: SyntheticSpec):
    """Return the analytic generating function behind a synthetic spec.

    The returned callable maps raw query points (shape (..., dims)) to
    exact generator outputs (shape (..., num_scalars)); it is the oracle
    the interpolated table approximates.
    """
    axes, per_scalar = _family_params(spec)
    lows = np.array([a[0] for a in axes])
    highs = np.array([a[-1] for a in axes])

    def evaluate(raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        u = (raw - lows) / (highs - lows)
        out = np.empty(u.shape[:-1] + (spec.num_scalars,))
        for k, params in enumerate(per_scalar):
            out[..., k] = _eval_family(spec.family, params, u)
        return out

    return evaluate


def _locate(axis: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cell index and fractional position along one axis for clamped x."""
    idx = np.searchsorted(axis, x, side="right") - 1
    idx = np.clip(idx, 0, len(axis) - 2)
    t = (x - axis[idx]) / (axis[idx + 1] - axis[idx])
    return idx, t


def multilinear_eval_batch(
    table: GridTable, queries: np.ndarray, clamp: bool = True
) -> np.ndarray:
    """N-linear interpolation of every scalar at each query row.

    Queries outside the grid are clamped to the axis bounds unless
    ``clamp`` is False, in which case out-of-range queries raise.
    Exact at grid nodes.
    """
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        return multilinear_eval_batch(table, q[None, :], clamp=clamp)[0]
    if q.shape[1] != table.dims:
        raise ValueError(f"query dims {q.shape[1]} != table dims {table.dims}")
    if clamp:
        lo = np.array([a[0] for a in table.axes])
        hi = np.array([a[-1] for a in table.axes])
        q = np.clip(q, lo, hi)
    else:
        for d, a in enumerate(table.axes):
            if np.any(q[:, d] < a[0]) or np.any(q[:, d] > a[-1]):
                raise ValueError(f"query outside axis {d} bounds and clamping disabled")

    cells = np.empty((q.shape[0], table.dims), dtype=np.intp)
    fracs = np.empty_like(q)
    for d, a in enumerate(table.axes):
        cells[:, d], fracs[:, d] = _locate(a, q[:, d])

    strides = np.empty(table.dims, dtype=np.intp)
    strides[-1] = 1
    for d in range(table.dims - 2, -1, -1):
        strides[d] = strides[d + 1] * len(table.axes[d + 1])

    out = np.zeros((q.shape[0], table.num_scalars))
    base = cells @ strides
    for corner in range(1 << table.dims):
        offset = 0
        weight = np.ones(q.shape[0])
        for d in range(table.dims):
            if corner >> (table.dims - 1 - d) & 1:
                offset += strides[d]
                weight = weight * fracs[:, d]
            else:
                weight = weight * (1.0 - fracs[:, d])
        out += weight[:, None] * table.values[base + offset]
    return out


def multilinear_eval(table: GridTable, query: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Interpolate all scalars at one query point."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError("query must be a 1-D coordinate vector")
    return multilinear_eval_batch(table, q[None, :], clamp=clamp)[0]


def grid_points(table: GridTable) -> np.ndarray:
    """Raw coordinates of every grid point, shape (num_points, dims)."""
    mesh = np.meshgrid(*table.axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def normalize_inputs(table: GridTable) -> tuple[np.ndarray, NormStats]:
    """Map every grid point into the unit cube by per-axis min/max.

    Returns the normalized point set (num_points, dims) and the affine
    maps needed to reproduce or invert the transform.
    """
    lows = np.array([a[0] for a in table.axes])
    highs = np.array([a[-1] for a in table.axes])
    stats = NormStats(lows=lows, highs=highs)
    unit_axes = [(a - a[0]) / (a[-1] - a[0]) for a in table.axes]
    mesh = np.meshgrid(*unit_axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1), stats


def _serialize_table(table: GridTable, float32: bool = False) -> bytes:
    buf = bytearray()
    flags = _FLAG_F32 if float32 else 0
    buf += struct.pack("<III", TABLE_VERSION, flags, table.dims)
    buf += struct.pack("<I", table.num_scalars)
    for a in table.axes:
        buf += struct.pack("<I", len(a))
    for a in table.axes:
        buf += a.astype("<f8").tobytes()
    for name in table.scalar_names:
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
    dtype = "<f4" if float32 else "<f8"
    buf += table.values.astype(dtype).tobytes()
    return bytes(buf)


def _atomic_write(path, blob: bytes) -> None:
    """Write via a temp file and rename, so readers never see a torso."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_table(table: GridTable, path, float32: bool = False) -> int:
    """Write a table file atomically; returns the byte count written."""
    payload = _serialize_table(table, float32=float32)
    blob = TABLE_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))
    _atomic_write(path, blob)
    return len(blob)


class _Reader:
    """Cursor over a byte blob that reports truncation uniformly."""

    def __init__(self, blob: bytes, what: str):
        self.blob = blob
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated {self.what}: payload shorter than declared sizes")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def load_table(path) -> GridTable:
    """Read a table file, verifying structure and checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(TABLE_MAGIC) + 4 or not blob.startswith(TABLE_MAGIC):
        raise FormatError("malformed table header: bad magic bytes")
    payload, crc_stored = blob[len(TABLE_MAGIC) : -4], blob[-4:]
    if zlib.crc32(payload) != struct.unpack("<I", crc_stored)[0]:
        raise FormatError("table checksum mismatch")
    r = _Reader(payload, "table file")
    version = r.u32()
    if version != TABLE_VERSION:
        raise FormatError(f"unsupported table version {version}")
    flags = r.u32()
    dims = r.u32()
    if not 1 <= dims <= MAX_DIMS:
        raise FormatError(f"malformed table header: dims={dims}")
    num_scalars = r.u32()
    lengths = [r.u32() for _ in range(dims)]
    if any(n < 2 for n in lengths) or num_scalars < 1:
        raise FormatError("malformed table header: bad axis length or scalar count")
    axes = tuple(r.f64_array(n) for n in lengths)
    names = []
    for _ in range(num_scalars):
        n = r.u32()
        names.append(r.take(n).decode("utf-8"))
    npts = int(np.prod(lengths))
    if flags & _FLAG_F32:
        raw = r.take(4 * npts * num_scalars)
        values = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    else:
        values = r.f64_array(npts * num_scalars)
    if r.pos != len(payload):
        raise FormatError("truncated table file: trailing bytes after values")
    try:
        return GridTable(
            axes=axes,
            scalar_names=tuple(names),
            values=values.reshape(npts, num_scalars),
        )
    except ValueError as exc:
        raise FormatError(f"table file contents invalid: {exc}") from exc


def table_digest(table: GridTable) -> bytes:
    """SHA-256 over the canonical 64-bit serialization of a table."""
    return hashlib.sha256(_serialize_table(table)).digest()
