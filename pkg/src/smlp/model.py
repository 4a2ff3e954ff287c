"""The deployable surrogate: SOM routing plus per-cluster networks.

A surrogate bundles the trained map, the scalar grouping, one network
per (cluster, group), and the normalization metadata needed to eat raw
queries and emit raw scalar values.  Evaluation never touches the
source table; the serialized file is self-contained.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError
from .mlp import MlpNetwork, OutputScaler, ToleranceSpec, center_unit_inputs, mlp_forward_batch
from .som import ScalarGrouping, SomMap, som_assign_batch
from .table import GridTable, NormStats, _Reader, _atomic_write, _serialize_table

MODEL_MAGIC = b"SMLP-MDL\0"
MODEL_VERSION = 1
_FLAG_F32 = 1
_ACT_CODES = {"tanh": 0, "logistic": 1, "linear": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}

# Published headline for context in storage reports: a 1.62M-point,
# 24-scalar table of 500 MB compressed to a 0.261 MB two-hidden-layer
# model, roughly 1916x.
REFERENCE_COMPRESSION_NOTE = (
    "reference comparison: 0.261 MB model vs 500 MB table (~1916x) "
    "for a 1.62M-point, 24-scalar production table"
)


@dataclass(frozen=True)
class BlendSpec:
    """Cluster-boundary blending: off, or nearest-2 inverse-distance."""

    mode: str = "off"
    exponent: float = 1.0

    def __post_init__(self):
        if self.mode not in ("off", "nearest2"):
            raise ValueError(f"unknown blend mode {self.mode!r}")
        if self.exponent <= 0:
            raise ValueError("blend exponent must be positive")


@dataclass
class EvalStats:
    queries: int
    wall_seconds: float
    activation_calls: int


@dataclass
class SurrogateModel:
    som: SomMap
    grouping: ScalarGrouping
    networks: tuple[tuple[MlpNetwork, ...], ...]  # [cluster][group]
    norm: NormStats
    out_lo: np.ndarray
    out_hi: np.ndarray
    scalar_names: tuple[str, ...]
    blending: BlendSpec = field(default_factory=BlendSpec)
    tolerance: ToleranceSpec | None = None
    policy_digest: bytes = b"\0" * 32
    table_digest_bytes: bytes = b"\0" * 32
    converged: bool = True

    def __post_init__(self):
        n_c, n_g = self.som.num_clusters, self.grouping.num_groups
        if len(self.networks) != n_c or any(len(row) != n_g for row in self.networks):
            raise ValueError("model integrity failure: missing network block")
        for c, row in enumerate(self.networks):
            for g, net in enumerate(row):
                if net.n_inputs != self.som.dims:
                    raise ValueError(f"network ({c},{g}) input width != dims")
                if net.n_outputs != len(self.grouping.groups[g]):
                    raise ValueError(f"network ({c},{g}) output width != group size")

    @property
    def dims(self) -> int:
        return self.som.dims

    @property
    def num_scalars(self) -> int:
        return self.grouping.num_scalars

    @property
    def num_parameters(self) -> int:
        return sum(net.num_parameters for row in self.networks for net in row)

    def with_blending(self, blending: BlendSpec) -> "SurrogateModel":
        import dataclasses

        return dataclasses.replace(self, blending=blending)


def _group_scaler(model: SurrogateModel, g: int) -> OutputScaler:
    cols = list(model.grouping.groups[g])
    return OutputScaler(lo=model.out_lo[cols], hi=model.out_hi[cols])


def _eval_cluster(model: SurrogateModel, c: int, x_centered: np.ndarray) -> np.ndarray:
    """All scalars of cluster c's networks, canonical column order."""
    out = np.empty((x_centered.shape[0], model.num_scalars))
    for g, scalars in enumerate(model.grouping.groups):
        pred = mlp_forward_batch(model.networks[c][g], x_centered)
        out[:, list(scalars)] = _group_scaler(model, g).to_raw(pred)
    return out


def surrogate_eval_batch(
    model: SurrogateModel, queries: np.ndarray
) -> tuple[np.ndarray, EvalStats]:
    """Evaluate raw-unit queries; returns outputs plus timing/cost stats.

    Results are identical to evaluating each row alone.  Queries are
    clamped to the trained input bounds, mirroring the table lookup
    policy.
    """
    t0 = time.perf_counter()
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != model.dims:
        raise ValueError(f"queries must have shape (n, {model.dims})")
    calls_before = sum(n.activation_calls for row in model.networks for n in row)

    unit = np.clip(model.norm.normalize(q), 0.0, 1.0)
    x = center_unit_inputs(unit)
    out = np.empty((q.shape[0], model.num_scalars))

    if model.blending.mode == "off":
        assign = som_assign_batch(model.som, unit)
        for c in range(model.som.num_clusters):
            rows = np.flatnonzero(assign == c)
            if rows.size:
                out[rows] = _eval_cluster(model, c, x[rows])
    else:
        d2 = ((unit[:, None, :] - model.som.node_weights[None, :, :]) ** 2).sum(axis=2)
        winner = np.argmin(d2, axis=1)
        d2_masked = d2.copy()
        d2_masked[np.arange(len(q)), winner] = np.inf
        second = np.argmin(d2_masked, axis=1)
        d0 = np.sqrt(d2[np.arange(len(q)), winner])
        d1 = np.sqrt(d2[np.arange(len(q)), second])
        p = model.blending.exponent
        # Inverse-distance weights; a zero-distance winner takes all,
        # which also guards the division.
        denom = d0**p + d1**p
        w0 = np.where(d0 == 0.0, 1.0, d1**p / np.where(denom == 0.0, 1.0, denom))
        first_out = np.empty_like(out)
        second_out = np.empty_like(out)
        for c in range(model.som.num_clusters):
            rows = np.flatnonzero(winner == c)
            if rows.size:
                first_out[rows] = _eval_cluster(model, c, x[rows])
            rows2 = np.flatnonzero(second == c)
            if rows2.size:
                second_out[rows2] = _eval_cluster(model, c, x[rows2])
        out = w0[:, None] * first_out + (1.0 - w0)[:, None] * second_out

    calls_after = sum(n.activation_calls for row in model.networks for n in row)
    stats = EvalStats(
        queries=q.shape[0],
        wall_seconds=time.perf_counter() - t0,
        activation_calls=calls_after - calls_before,
    )
    return out, stats


def surrogate_eval(model: SurrogateModel, query: np.ndarray) -> np.ndarray:
    """Evaluate one raw-unit query point; all scalars in table order."""
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise ValueError("query must be a 1-D vector")
    out, _ = surrogate_eval_batch(model, q[None, :])
    return out[0]


def _pack_names(names) -> bytes:
    buf = bytearray()
    for name in names:
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
    return bytes(buf)


def _serialize_model(model: SurrogateModel, float32: bool = False) -> bytes:
    dtype = "<f4" if float32 else "<f8"
    buf = bytearray()
    flags = _FLAG_F32 if float32 else 0
    buf += struct.pack(
        "<IIIIII",
        MODEL_VERSION,
        flags,
        model.dims,
        model.num_scalars,
        model.som.num_clusters,
        model.grouping.num_groups,
    )
    buf += struct.pack("<Bd", 0 if model.blending.mode == "off" else 1, model.blending.exponent)
    buf += struct.pack("<B", 1 if model.converged else 0)
    buf += model.table_digest_bytes + model.policy_digest
    tol = model.tolerance or ToleranceSpec(tau_a=np.zeros(1), tau_r=1.0)
    buf += struct.pack("<I", tol.tau_a.size)
    buf += tol.tau_a.astype("<f8").tobytes()
    buf += struct.pack("<d", tol.tau_r)
    buf += _pack_names(model.scalar_names)
    buf += struct.pack("<I", len(model.som.lattice_shape))
    buf += struct.pack(f"<{len(model.som.lattice_shape)}I", *model.som.lattice_shape)
    buf += model.som.node_weights.astype("<f8").tobytes()
    for group in model.grouping.groups:
        buf += struct.pack("<I", len(group))
        buf += struct.pack(f"<{len(group)}I", *group)
    buf += model.norm.lows.astype("<f8").tobytes()
    buf += model.norm.highs.astype("<f8").tobytes()
    buf += model.out_lo.astype("<f8").tobytes()
    buf += model.out_hi.astype("<f8").tobytes()
    for row in model.networks:
        for net in row:
            buf += struct.pack("<I", len(net.layer_sizes))
            buf += struct.pack(f"<{len(net.layer_sizes)}I", *net.layer_sizes)
            buf += bytes(_ACT_CODES[t] for t in net.activations)
            for w, b in zip(net.weights, net.biases):
                buf += w.astype(dtype).tobytes()
                buf += b.astype(dtype).tobytes()
    return bytes(buf)


def save_model(model: SurrogateModel, path, float32: bool = False) -> int:
    """Write the model file atomically; returns the byte count."""
    payload = _serialize_model(model, float32=float32)
    blob = MODEL_MAGIC + payload + struct.pack("<I", zlib.crc32(payload))
    _atomic_write(path, blob)
    return len(blob)


def load_model(path) -> SurrogateModel:
    """Read and validate a model file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MODEL_MAGIC) + 4 or not blob.startswith(MODEL_MAGIC):
        raise FormatError("malformed model header: bad magic bytes")
    payload, crc_stored = blob[len(MODEL_MAGIC) : -4], blob[-4:]
    if zlib.crc32(payload) != struct.unpack("<I", crc_stored)[0]:
        raise FormatError("model checksum mismatch")

    r = _Reader(payload, "model file")
    version = r.u32()
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    flags = r.u32()
    float32 = bool(flags & _FLAG_F32)
    dims = r.u32()
    num_scalars = r.u32()
    n_clusters = r.u32()
    n_groups = r.u32()
    if dims < 1 or num_scalars < 1 or n_clusters < 1 or n_groups < 1:
        raise FormatError("malformed model header: zero-sized section")
    blend_code, blend_exp = struct.unpack("<Bd", r.take(9))
    converged = bool(r.take(1)[0])
    table_dig = r.take(32)
    policy_dig = r.take(32)
    n_tau = r.u32()
    tau_a = r.f64_array(n_tau)
    (tau_r,) = struct.unpack("<d", r.take(8))
    names = []
    for _ in range(num_scalars):
        n = r.u32()
        names.append(r.take(n).decode("utf-8"))
    lat_nd = r.u32()
    if lat_nd not in (1, 2):
        raise FormatError("malformed model header: bad lattice rank")
    lattice = tuple(r.u32() for _ in range(lat_nd))
    node_weights = r.f64_array(n_clusters * dims).reshape(n_clusters, dims)
    groups = []
    for _ in range(n_groups):
        k = r.u32()
        groups.append(tuple(struct.unpack(f"<{k}I", r.take(4 * k))))
    lows = r.f64_array(dims)
    highs = r.f64_array(dims)
    out_lo = r.f64_array(num_scalars)
    out_hi = r.f64_array(num_scalars)
    networks = []
    for _ in range(n_clusters):
        row = []
        for _ in range(n_groups):
            n_layers = r.u32()
            if n_layers < 2 or n_layers > 16:
                raise FormatError("malformed network block: bad layer count")
            sizes = struct.unpack(f"<{n_layers}I", r.take(4 * n_layers))
            tags = []
            for code in r.take(n_layers - 2):
                if code not in _ACT_NAMES:
                    raise FormatError("malformed network block: bad activation tag")
                tags.append(_ACT_NAMES[code])
            weights, biases = [], []
            for a, b in zip(sizes[:-1], sizes[1:]):
                if float32:
                    w = np.frombuffer(r.take(4 * a * b), dtype="<f4").astype(np.float64)
                    bb = np.frombuffer(r.take(4 * b), dtype="<f4").astype(np.float64)
                else:
                    w = r.f64_array(a * b)
                    bb = r.f64_array(b)
                weights.append(w.reshape(a, b))
                biases.append(bb)
            row.append(
                MlpNetwork(
                    layer_sizes=tuple(sizes),
                    activations=tuple(tags),
                    weights=weights,
                    biases=biases,
                )
            )
        networks.append(tuple(row))
    if r.pos != len(payload):
        raise FormatError("truncated model file: trailing bytes after networks")

    try:
        return SurrogateModel(
            som=SomMap(lattice_shape=lattice, node_weights=node_weights, trained=True),
            grouping=ScalarGrouping(num_scalars=num_scalars, groups=tuple(groups)),
            networks=tuple(networks),
            norm=NormStats(lows=lows, highs=highs),
            out_lo=out_lo,
            out_hi=out_hi,
            scalar_names=tuple(names),
            blending=BlendSpec(mode="off" if blend_code == 0 else "nearest2", exponent=blend_exp),
            tolerance=ToleranceSpec(tau_a=tau_a, tau_r=tau_r),
            policy_digest=policy_dig,
            table_digest_bytes=table_dig,
            converged=converged,
        )
    except ValueError as exc:
        raise FormatError(f"model file structurally inconsistent: {exc}") from exc


@dataclass
class MemoryReport:
    model_bytes: int
    table_bytes: int
    ratio: float
    parameter_count: int
    reference_note: str = REFERENCE_COMPRESSION_NOTE

    def lines(self) -> list[str]:
        return [
            f"model bytes:      {self.model_bytes}",
            f"table bytes:      {self.table_bytes}",
            f"compression:      {self.ratio:.1f}x",
            f"parameters:       {self.parameter_count}",
            self.reference_note,
        ]


def memory_report(model: SurrogateModel, table: GridTable) -> MemoryReport:
    """Byte counts of both serialized artifacts plus the parameter count."""
    model_bytes = len(MODEL_MAGIC) + len(_serialize_model(model)) + 4
    table_bytes = len(b"SMLP-TAB\0") + len(_serialize_table(table)) + 4
    return MemoryReport(
        model_bytes=model_bytes,
        table_bytes=table_bytes,
        ratio=table_bytes / model_bytes,
        parameter_count=model.num_parameters,
    )
