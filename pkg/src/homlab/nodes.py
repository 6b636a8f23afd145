"""funcnodes nodes exposing the laboratory to a funcnodes worker."""

from typing import List

import funcnodes_core as fn
import numpy as np

from .field import (
    CoefficientMap,
    CoefficientSampler,
    CovarianceSpec,
    FieldSampler,
    GridSpec,
    sample_parameter_field,
)
from .fitting import fit_slope
from .homog import estimate_homogenized
from .localize import choose_iota, localization_budget


@fn.NodeDecorator(node_id="homlab.sample_field")
def sample_field_node(
    kind: str = "squared-exponential",
    epsilon: float = 0.125,
    d: int = 2,
    n: int = 64,
    seed: int = 0,
) -> np.ndarray:
    return sample_parameter_field(CovarianceSpec(kind, epsilon), GridSpec(d, n), seed).cells


@fn.NodeDecorator(node_id="homlab.homogenize")
def homogenize_node(
    d: int = 2,
    n: int = 32,
    epsilon: float = 0.25,
    lam: float = 4.0,
    K: float = 0.5,
    M: int = 4,
    seed: int = 0,
) -> dict:
    source = CoefficientSampler(
        FieldSampler(CovarianceSpec("squared-exponential", epsilon), GridSpec(d, n), seed),
        CoefficientMap(lam, K, K**2 + 1),
    )
    return estimate_homogenized(source, M, workers=1).to_record()


@fn.NodeDecorator(node_id="homlab.fit_slope")
def fit_slope_node(epsilons: List[float], errors: List[float]) -> float:
    return fit_slope(list(zip(epsilons, errors))).slope


@fn.NodeDecorator(node_id="homlab.choose_iota")
def choose_iota_node(epsilon: float = 0.0625, d: int = 3, n: int = 128) -> float:
    return choose_iota(epsilon, d, GridSpec(d, n)).used


@fn.NodeDecorator(node_id="homlab.localization_budget")
def localization_budget_node(epsilon: float = 0.0625, d: int = 3) -> float:
    return localization_budget(epsilon, d).best_dyadic


NODE_SHELF = fn.Shelf(
    name="homlab",
    description="stochastic homogenization laboratory",
    subshelves=[],
    nodes=[
        sample_field_node,
        homogenize_node,
        fit_slope_node,
        choose_iota_node,
        localization_budget_node,
    ],
)
