"""Progressive attribute localization.

Starting from a shared, trainable prototype per attribute, each iteration
scores every image region against every prototype (column softmax over
regions), aggregates the matched region features, and refines them into
image-specific prototypes. The refined prototypes are dimension-reduced and
concatenated into the visual representation used downstream.

Parameter dictionaries use these keys (all float64 arrays):

    attr_protos   (channels, n_attributes)    shared starting prototypes
    refine_w1/b1  (channels, channels) / (channels, 1)   refinement layer 1
    refine_w2/b2  (channels, channels) / (channels, 1)   refinement layer 2
    reduce_w/b    (reduced_dim, channels) / (reduced_dim, 1)
    project_w/b   (rep_dim, n_attributes) / (rep_dim, 1)  semantic projection

The refinement keys are absent when the refinement stage is disabled.
"""

from __future__ import annotations

import numpy as np

from dppn.autodiff import (
    DimensionError,
    Node,
    affine_cols,
    leaf,
    matmul,
    max_cols,
    relu,
    softmax_cols,
    sq_l2,
    stack_cols,
    sum_cols,
    transpose,
)

__all__ = [
    "AGGREGATIONS",
    "init_pal_params",
    "init_projector",
    "rep_dim_for",
    "localize",
    "update_prototypes",
    "assemble",
    "project_attributes",
    "project_attribute_table",
    "semantic_align_loss",
    "pal_forward",
]

AGGREGATIONS = ("cat", "sum", "max")


def rep_dim_for(reduced_dim: int, n_attributes: int, aggregation: str = "cat") -> int:
    """Extent of the visual representation for a given aggregation."""
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}, expected one of {AGGREGATIONS}")
    return reduced_dim * n_attributes if aggregation == "cat" else reduced_dim


REFINE_INIT_OFFSET = 2.0


def init_pal_params(rng, channels: int, n_attributes: int, reduced_dim: int,
                    refine: bool = True) -> dict[str, np.ndarray]:
    """Fresh localization parameters.

    Starting prototypes use std 1/sqrt(channels) so the initial region scores
    are O(1) and the softmax starts unsaturated. The refinement stack starts
    as an exact identity on its typical input range (identity weights, the
    relu lifted clear of zero by a bias offset the second layer removes):
    round k+1 then scores regions against round k's aggregated features from
    the first step on, instead of against a random mixture. Random refinement
    weights measurably trap training in a non-localizing basin.
    """
    params = {
        "attr_protos": rng.normal(0.0, 1.0 / np.sqrt(channels), size=(channels, n_attributes)),
    }
    if refine:
        params["refine_w1"] = np.eye(channels)
        params["refine_b1"] = np.full((channels, 1), REFINE_INIT_OFFSET)
        params["refine_w2"] = np.eye(channels)
        params["refine_b2"] = np.full((channels, 1), -REFINE_INIT_OFFSET)
    params["reduce_w"] = rng.normal(0.0, np.sqrt(1.0 / channels), size=(reduced_dim, channels))
    params["reduce_b"] = np.zeros((reduced_dim, 1))
    return params


def init_projector(rng, n_attributes: int, rep_dim: int) -> dict[str, np.ndarray]:
    """Semantic projection (one dense layer attribute space -> representation space).

    Zero-initialized: gradient updates build the weight rows from seen
    attribute vectors, so unseen vectors map through (approximately) the same
    span instead of through untrained directions. A random init leaves unseen
    categories' targets wherever the init noise put them, far outside the
    representation cloud.
    """
    del rng  # deterministic init; the signature matches the other factories
    return {
        "project_w": np.zeros((rep_dim, n_attributes)),
        "project_b": np.zeros((rep_dim, 1)),
    }


def localize(x, protos) -> Node:
    """Similarity matrix S (regions x attributes): softmax over regions per column.

    Column i distributes one unit of mass over regions according to how well
    each region feature matches prototype i.
    """
    x = x if isinstance(x, Node) else leaf(x)
    protos = protos if isinstance(protos, Node) else leaf(protos)
    if x.value.shape[0] != protos.value.shape[0]:
        raise DimensionError(
            f"localize: channel extents differ, features {x.value.shape} vs "
            f"prototypes {protos.value.shape}")
    return softmax_cols(matmul(transpose(x), protos))


def _refine(agg: Node, leaves) -> Node:
    h = relu(affine_cols(leaves["refine_w1"], agg, leaves["refine_b1"]))
    return affine_cols(leaves["refine_w2"], h, leaves["refine_b2"])


def update_prototypes(x, protos, leaves, refine: bool = True) -> Node:
    """One localization round: aggregate matched regions, refine column-wise.

    The result is image-specific: it depends on x, unlike the shared starting
    prototypes.
    """
    x = x if isinstance(x, Node) else leaf(x)
    s = localize(x, protos)
    agg = matmul(x, s)
    return _refine(agg, leaves) if refine else agg


def assemble(protos, leaves, aggregation: str = "cat") -> Node:
    """Dimension-reduce each prototype column and aggregate into one vector.

    "cat" concatenates the reduced columns in attribute order (extent
    reduced_dim * n_attributes); "sum" and "max" pool across attributes
    (extent reduced_dim).
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}, expected one of {AGGREGATIONS}")
    reduced = affine_cols(leaves["reduce_w"], protos, leaves["reduce_b"])
    if aggregation == "cat":
        return stack_cols(reduced)
    if aggregation == "sum":
        return sum_cols(reduced)
    return max_cols(reduced)


def project_attributes(attr_vec, leaves) -> Node:
    """Map an attribute vector into the representation space."""
    vec = np.asarray(attr_vec, dtype=np.float64).reshape(-1, 1)
    return affine_cols(leaves["project_w"], leaf(vec), leaves["project_b"])


def project_attribute_table(table, leaves) -> Node:
    """Map every row of an attribute table at once; column j is g(row j)."""
    table = np.asarray(table, dtype=np.float64)
    return affine_cols(leaves["project_w"], leaf(table.T), leaves["project_b"])


def semantic_align_loss(f, attr_vec, leaves) -> Node:
    """Squared L2 between a visual representation and the projected attributes."""
    target = project_attributes(attr_vec, leaves)
    if f.value.shape != target.value.shape:
        raise DimensionError(
            f"semantic_align_loss: representation {f.value.shape} vs projected "
            f"attributes {target.value.shape}")
    return sq_l2(f, target)


def pal_forward(x, leaves, iterations: int, aggregation: str = "cat",
                refine: bool = True) -> list[tuple[Node, Node]]:
    """Run the progressive loop; returns [(S_k, f_k)] for k = 1..iterations.

    Pair k holds the similarity matrix computed from the prototypes of round
    k-1 (round 0 uses the shared starting prototypes) and the representation
    assembled from the round-k prototypes. The whole graph is retained so a
    single backward pass reaches every parameter.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    x = x if isinstance(x, Node) else leaf(x)
    if x.value.shape[0] != leaves["attr_protos"].value.shape[0]:
        raise DimensionError(
            f"pal_forward: channel extents differ, features {x.value.shape} vs "
            f"prototypes {leaves['attr_protos'].value.shape}")
    xt = transpose(x)
    protos = leaves["attr_protos"]
    out: list[tuple[Node, Node]] = []
    for _ in range(iterations):
        s = softmax_cols(matmul(xt, protos))
        agg = matmul(x, s)
        protos = _refine(agg, leaves) if refine else agg
        out.append((s, assemble(protos, leaves, aggregation)))
    return out
