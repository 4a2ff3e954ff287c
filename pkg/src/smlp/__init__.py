"""smlp: compress dense lookup tables into SOM-routed MLP ensembles."""

from .adaptive import (
    AdaptivePolicy,
    JobRecord,
    TrainingReport,
    adaptive_train_job,
    grow_architecture,
    split_train_test,
    train_all,
)
from .errors import (
    ArchitectureExhausted,
    ConfigError,
    DigestMismatchError,
    FormatError,
    SmlpError,
    TrainingAborted,
    TrainingDivergedError,
)
from .mlp import (
    EarlyStopPolicy,
    MlpNetwork,
    OutputScaler,
    SgdParams,
    ToleranceSpec,
    TrainOutcome,
    activation_cost,
    init_network,
    mlp_backprop_grad,
    mlp_forward,
    mlp_forward_batch,
    pass_rate,
    sgd_train,
    tolerance_pass,
)
from .model import (
    BlendSpec,
    MemoryReport,
    SurrogateModel,
    load_model,
    memory_report,
    save_model,
    surrogate_eval,
    surrogate_eval_batch,
)
from .som import (
    ScalarGrouping,
    SomMap,
    SomTrainParams,
    group_scalars,
    som_assign,
    som_assign_batch,
    som_train,
)
from .table import (
    GridTable,
    NormStats,
    SyntheticSpec,
    TablePoint,
    generate_synthetic,
    grid_points,
    load_table,
    multilinear_eval,
    multilinear_eval_batch,
    normalize_inputs,
    save_table,
    synthetic_reference,
    table_digest,
)

__version__ = "0.1.0"
