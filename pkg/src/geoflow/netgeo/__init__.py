"""Network-side diagnostics: training, curvature, influence, reweighting."""

from .data import LabeledDataset, read_dataset, read_points, write_dataset
from .model import (
    NetSpec,
    TrainResult,
    NetDivergenceError,
    param_count,
    param_layout,
    layer_slices,
    init_params,
    predict,
    feature_map,
    net_loss,
    net_grad,
    total_loss,
    total_gradient,
    per_point_grads,
    train,
)
from .metrics import (
    hessian,
    fisher_metric,
    fisher_rao_norm,
    curve_complexity,
    dynamic_isometry,
)
from .influence import (
    InfluenceSolveError,
    InfluenceReport,
    default_damping,
    influence_params,
    influence_loss,
    influence_report,
    loo_retrain_oracle,
)
from .reweight import reweight_train

__all__ = [
    "LabeledDataset",
    "read_dataset",
    "read_points",
    "write_dataset",
    "NetSpec",
    "TrainResult",
    "NetDivergenceError",
    "param_count",
    "param_layout",
    "layer_slices",
    "init_params",
    "predict",
    "feature_map",
    "net_loss",
    "net_grad",
    "total_loss",
    "total_gradient",
    "per_point_grads",
    "train",
    "hessian",
    "fisher_metric",
    "fisher_rao_norm",
    "curve_complexity",
    "dynamic_isometry",
    "InfluenceSolveError",
    "InfluenceReport",
    "default_damping",
    "influence_params",
    "influence_loss",
    "influence_report",
    "loo_retrain_oracle",
    "reweight_train",
]
