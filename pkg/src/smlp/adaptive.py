"""Adaptive per-cluster training: grow hidden layers until tolerance.

Each (cluster, scalar-group) pair is an independent training job: split
the cluster's points 60/40, train the smallest architecture, and widen
the first hidden layer (deeper layers scale by fixed ratios) whenever
the tolerance criterion cannot be met.  Jobs share nothing and are
seeded independently, so they can run on any number of workers with
bit-identical results.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ArchitectureExhausted, TrainingAborted, TrainingDivergedError
from .mlp import (
    EarlyStopPolicy,
    MlpNetwork,
    OutputScaler,
    SgdParams,
    ToleranceSpec,
    _forward_raw,
    center_unit_inputs,
    init_network,
    sgd_train,
)
from .som import ScalarGrouping, SomMap, som_assign_batch
from .table import GridTable, normalize_inputs

# First-hidden-layer ratio is always 1; deeper layers shrink.  Two-layer
# networks drop to half width, deeper stacks step down more gradually.
_DEEP_RATIOS = (1.0, 0.75, 0.5, 0.5, 0.25, 0.25)


def default_layer_ratios(hidden_layers: int) -> tuple[float, ...]:
    if not 1 <= hidden_layers <= len(_DEEP_RATIOS):
        raise ValueError(f"hidden layer count must be 1..{len(_DEEP_RATIOS)}")
    if hidden_layers == 2:
        return (1.0, 0.5)
    return _DEEP_RATIOS[:hidden_layers]


@dataclass(frozen=True)
class AdaptivePolicy:
    """Knobs of the growth loop and its inner SGD runs."""

    initial_width: int = 6
    width_increment: int = 3
    max_width: int = 64
    hidden_layers: int = 2
    layer_ratios: tuple[float, ...] | None = None  # None -> default for layer count
    max_iterations: int = 2500
    learning_rate: float = 0.25
    batch_size: int = 16
    checkpoint_fraction: float = 0.1
    checkpoint_threshold: float = 0.5
    stagnation_epochs: int = 300
    train_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.initial_width < 1 or self.width_increment < 1 or self.max_width < 1:
            raise ValueError("widths and increment must be positive")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train fraction must be in (0, 1)")
        if not 0 < self.checkpoint_fraction < 1:
            raise ValueError("checkpoint fraction must be in (0, 1)")
        if not 0 <= self.checkpoint_threshold <= 1:
            raise ValueError("checkpoint threshold must be in [0, 1]")
        if self.layer_ratios is not None:
            ratios = tuple(float(r) for r in self.layer_ratios)
            if len(ratios) != self.hidden_layers or any(r <= 0 for r in ratios):
                raise ValueError("need one positive ratio per hidden layer")
            object.__setattr__(self, "layer_ratios", ratios)
        else:
            default_layer_ratios(self.hidden_layers)  # validate layer count

    @property
    def ratios(self) -> tuple[float, ...]:
        return self.layer_ratios or default_layer_ratios(self.hidden_layers)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def grow_architecture(policy: AdaptivePolicy, step: int) -> tuple[int, ...]:
    """Hidden-layer widths at growth step ``step`` (0-based).

    The first layer starts at ``initial_width`` and widens by
    ``width_increment`` per step, clamped to ``max_width``; deeper
    layers are fixed ratios of the first (round half up, floor 1).
    Raises ArchitectureExhausted once the cap has already been tried.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    raw = policy.initial_width + step * policy.width_increment
    if raw > policy.max_width:
        prev = policy.initial_width + (step - 1) * policy.width_increment
        if step == 0 or prev >= policy.max_width:
            raise ArchitectureExhausted(
                f"first hidden layer would exceed cap {policy.max_width}"
            )
        first = policy.max_width
    else:
        first = raw
    ratios = policy.ratios
    return tuple(max(_round_half_up(r * first), 1) for r in ratios)


def split_train_test(
    num_points: int, fraction: float, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random index partition into train/test sets.

    Train size is fraction*N rounded half up, clamped so both sides are
    non-empty.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    if num_points < 2:
        raise ValueError(f"{num_points} points cannot yield a non-empty test set")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_points)
    n_train = min(max(_round_half_up(fraction * num_points), 1), num_points - 1)
    return perm[:n_train], perm[n_train:]


@dataclass
class JobRecord:
    """One (cluster, group) training result."""

    cluster: int
    group: int
    scalars: tuple[int, ...]
    architecture: tuple[int, ...]
    outcome: str  # converged | exhausted
    attempts: int
    epochs: int
    seconds: float
    test_pass_rate: float
    rmse: tuple[float, ...]  # raw units, one per group scalar


@dataclass
class TrainingReport:
    records: list[JobRecord]
    wall_seconds: float = 0.0
    job_seconds_total: float = 0.0
    parallelism: int = 1

    @property
    def all_converged(self) -> bool:
        return all(r.outcome == "converged" for r in self.records)

    @property
    def total_hidden_neurons(self) -> int:
        return sum(sum(r.architecture) for r in self.records)


def _job_seed(policy_seed: int, cluster: int, group: int, salt: int) -> int:
    ss = np.random.SeedSequence(entropy=(policy_seed, cluster, group, salt))
    return int(ss.generate_state(1)[0])


def adaptive_train_job(
    inputs_unit: np.ndarray,
    outputs_raw: np.ndarray,
    scaler: OutputScaler,
    tol: ToleranceSpec,
    policy: AdaptivePolicy,
    cluster: int = 0,
    group: int = 0,
    scalars: tuple[int, ...] = (),
) -> tuple[MlpNetwork, JobRecord]:
    """Grow architectures until one passes the tolerance on held-out data.

    ``inputs_unit`` are unit-cube coordinates of one cluster's points;
    ``outputs_raw`` the matching raw scalar values for one group.  Every
    architecture attempt cold-starts from its own seed.  A diverging
    attempt counts as a failed architecture and triggers growth.  On cap
    exhaustion the best network seen is returned with the outcome
    flagged, so the caller always gets a usable model.
    """
    t0 = time.perf_counter()
    x = center_unit_inputs(inputs_unit)
    y_raw = outputs_raw if outputs_raw.ndim == 2 else outputs_raw[:, None]
    idx_train, idx_test = split_train_test(
        len(x), policy.train_fraction, _job_seed(policy.seed, cluster, group, 0)
    )
    y_norm = scaler.to_normalized(y_raw)
    checkpoint = max(int(np.ceil(policy.checkpoint_fraction * policy.max_iterations)), 1)
    stop = EarlyStopPolicy(
        checkpoint_epoch=checkpoint,
        min_pass_rate=policy.checkpoint_threshold,
        stagnation_epochs=policy.stagnation_epochs,
    )

    best_net = None
    best_rate = -1.0
    best_arch: tuple[int, ...] = ()
    converged = False
    epochs_total = 0
    attempts = 0
    step = 0
    while True:
        try:
            arch = grow_architecture(policy, step)
        except ArchitectureExhausted:
            break
        attempts += 1
        net = init_network(
            (x.shape[1],) + arch + (y_raw.shape[1],),
            seed=_job_seed(policy.seed, cluster, group, 1 + step),
        )
        params = SgdParams(
            learning_rate=policy.learning_rate,
            batch_size=policy.batch_size,
            max_iterations=policy.max_iterations,
            seed=_job_seed(policy.seed, cluster, group, 10_000 + step),
        )
        try:
            outcome = sgd_train(
                net,
                x[idx_train],
                y_norm[idx_train],
                x[idx_test],
                y_raw[idx_test],
                tol,
                params,
                stop=stop,
                scaler=scaler,
            )
        except TrainingDivergedError:
            step += 1
            continue
        epochs_total += outcome.epochs
        if outcome.test_pass_rate > best_rate:
            best_rate = outcome.test_pass_rate
            best_net = net
            best_arch = arch
        if outcome.status == "converged":
            converged = True
            break
        step += 1

    if best_net is None:
        raise TrainingDivergedError(
            f"every architecture diverged for cluster {cluster} group {group}"
        )
    # Final raw-unit RMSE per scalar on the held-out points.
    pred = scaler.to_raw(_forward_raw(best_net, x[idx_test]))
    rmse = tuple(np.sqrt(np.mean((pred - y_raw[idx_test]) ** 2, axis=0)).tolist())
    record = JobRecord(
        cluster=cluster,
        group=group,
        scalars=tuple(scalars),
        architecture=best_arch,
        outcome="converged" if converged else "exhausted",
        attempts=attempts,
        epochs=epochs_total,
        seconds=time.perf_counter() - t0,
        test_pass_rate=best_rate,
        rmse=rmse,
    )
    return best_net, record


def _run_job(args):
    (cluster, group, inputs_unit, outputs_raw, scalars, lo, hi, tau_a, tau_r, policy) = args
    scaler = OutputScaler(lo=lo, hi=hi)
    tol = ToleranceSpec(tau_a=tau_a, tau_r=tau_r)
    net, record = adaptive_train_job(
        inputs_unit, outputs_raw, scaler, tol, policy,
        cluster=cluster, group=group, scalars=scalars,
    )
    return cluster, group, net, record


def train_all(
    table: GridTable,
    som: SomMap,
    grouping: ScalarGrouping,
    policy: AdaptivePolicy,
    tol: ToleranceSpec,
    parallelism: int = 1,
):
    """Train every (cluster, group) job and assemble the surrogate.

    Jobs are independent and individually seeded, so the result is
    invariant to scheduling: any ``parallelism`` yields bit-identical
    networks.  Returns (SurrogateModel, TrainingReport).

    Raises TrainingAborted (carrying completed records) if a job fails.
    """
    from .model import BlendSpec, SurrogateModel  # deferred to avoid an import cycle

    if som.dims != table.dims:
        raise ValueError("SOM dimensionality does not match table")
    if grouping.num_scalars != table.num_scalars:
        raise ValueError("grouping does not cover the table's scalars")

    t0 = time.perf_counter()
    points_unit, norm = normalize_inputs(table)
    assignment = som_assign_batch(som, points_unit)
    out_lo = table.values.min(axis=0)
    out_hi = table.values.max(axis=0)

    jobs = []
    for c in range(som.num_clusters):
        mask = assignment == c
        if not np.any(mask):
            raise ValueError(f"cluster {c} owns no table points")
        for g, scalars in enumerate(grouping.groups):
            cols = list(scalars)
            jobs.append(
                (
                    c,
                    g,
                    points_unit[mask],
                    table.values[np.ix_(mask, cols)],
                    tuple(scalars),
                    out_lo[cols],
                    out_hi[cols],
                    tol.subset(cols).tau_a,
                    tol.tau_r,
                    policy,
                )
            )

    results = {}
    records = []
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            try:
                for c, g, net, record in pool.map(_run_job, jobs):
                    results[(c, g)] = net
                    records.append(record)
            except Exception as exc:
                raise TrainingAborted(
                    f"training job failed: {exc}", completed_records=records
                ) from exc
    else:
        for job in jobs:
            try:
                c, g, net, record = _run_job(job)
            except Exception as exc:
                raise TrainingAborted(
                    f"training job failed: {exc}", completed_records=records
                ) from exc
            results[(c, g)] = net
            records.append(record)

    records.sort(key=lambda r: (r.cluster, r.group))
    report = TrainingReport(
        records=records,
        wall_seconds=time.perf_counter() - t0,
        job_seconds_total=sum(r.seconds for r in records),
        parallelism=parallelism,
    )
    networks = tuple(
        tuple(results[(c, g)] for g in range(grouping.num_groups))
        for c in range(som.num_clusters)
    )
    model = SurrogateModel(
        som=som,
        grouping=grouping,
        networks=networks,
        norm=norm,
        out_lo=out_lo,
        out_hi=out_hi,
        scalar_names=table.scalar_names,
        blending=BlendSpec(),
        tolerance=tol,
        policy_digest=policy_digest(policy, tol),
        table_digest_bytes=_table_digest(table),
        converged=report.all_converged,
    )
    return model, report


def _table_digest(table: GridTable) -> bytes:
    from .table import table_digest

    return table_digest(table)


def policy_digest(policy: AdaptivePolicy, tol: ToleranceSpec) -> bytes:
    """Stable digest of the training configuration for provenance checks."""
    import hashlib
    import json
    from dataclasses import asdict

    blob = {
        "policy": {k: v for k, v in sorted(asdict(policy).items())},
        "tau_a": [float(v) for v in np.atleast_1d(tol.tau_a)],
        "tau_r": float(tol.tau_r),
    }
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).digest()
