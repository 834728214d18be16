"""Penalized spline estimation of additive models with an unknown link."""

from .gam import (
    Dataset,
    FitConfig,
    FitResult,
    GamModel,
    evaluate_regression,
    fit_gam,
    init_additive,
    init_model,
    canonicalize,
    objective,
    refit_component_natural,
    refit_link_natural,
    update_components,
    update_link,
)
from .penalty import PenaltyConfig, additive_smoothness, j_functionals, t_l_squared, transform_model
from .splines import (
    BasisSpec,
    SplineFunction,
    affine_reparam,
    eval_basis,
    eval_continued,
    eval_spline,
    gram_matrix,
    make_uniform_basis,
    natural_spline_interpolant,
    project_onto_basis,
)

from .nested import (
    NestedModel,
    NetworkSpec,
    check_layer_norms,
    evaluate_network,
    fit_nested,
    nested_from_gam,
    nested_objective,
)
from .quantile import (
    QuantileConfig,
    SmoothedCheckLoss,
    check_loss,
    fit_quantile_gam,
    fit_quantile_nested,
    smoothed_check_loss,
)
from .simulation import (
    ImseReport,
    SimConfig,
    benchmark_data,
    emit_figure_data,
    imse_component,
    imse_link,
    run_monte_carlo,
    std_normal_cdf,
)

__version__ = "0.1.0"
