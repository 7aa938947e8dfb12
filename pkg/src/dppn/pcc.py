"""Progressive category classification.

Keeps one trainable prototype per seen category in representation space and,
per localization round, produces a new prototype set: a squeeze-style channel
gate (computed from the mean prototype) rescales the previous set, and a
per-round trainable bias is added. Each round's representations are classified
against that round's prototypes with cross entropy on dot-product logits.

Parameter dictionary keys:

    cat_protos     (rep_dim, n_seen)     starting category prototypes
    gate_w1/b1     (hidden, rep_dim) / (hidden, 1)
    gate_w2/b2     (rep_dim, hidden) / (rep_dim, 1)
    step_bias_k    (rep_dim, n_seen)     one per round, k = 0..iterations-1

Gate keys are absent when the gate is disabled (update degenerates to
prototypes + bias).
"""

from __future__ import annotations

import numpy as np

from dppn.autodiff import (
    Node,
    add,
    affine_cols,
    cross_entropy_logits,
    leaf,
    matmul,
    mean_cols,
    mul,
    relu,
    sigmoid,
    transpose,
)

__all__ = [
    "gate_hidden_dim",
    "init_pcc_params",
    "update_category_prototypes",
    "prototype_chain",
    "category_loss",
    "pcc_forward",
]

GATE_REDUCTION = 16
GATE_MIN_HIDDEN = 4


def gate_hidden_dim(rep_dim: int) -> int:
    """Bottleneck width of the channel gate: rep_dim / 16, floored at 4."""
    return max(rep_dim // GATE_REDUCTION, GATE_MIN_HIDDEN)


def init_pcc_params(rng, rep_dim: int, n_seen: int, iterations: int,
                    gate: bool = True) -> dict[str, np.ndarray]:
    """Fresh category-classification parameters.

    Starting prototypes use std 1/sqrt(rep_dim); the per-round biases start at
    zero so the first update is a pure gated copy.
    """
    params = {
        "cat_protos": rng.normal(0.0, 1.0 / np.sqrt(rep_dim), size=(rep_dim, n_seen)),
    }
    if gate:
        hidden = gate_hidden_dim(rep_dim)
        params["gate_w1"] = rng.normal(0.0, np.sqrt(2.0 / rep_dim), size=(hidden, rep_dim))
        params["gate_b1"] = np.zeros((hidden, 1))
        params["gate_w2"] = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(rep_dim, hidden))
        params["gate_b2"] = np.zeros((rep_dim, 1))
    for k in range(iterations):
        params[f"step_bias_{k}"] = np.zeros((rep_dim, n_seen))
    return params


def update_category_prototypes(protos: Node, leaves, k: int, gate: bool = True) -> Node:
    """One prototype update: channel-gated copy of the previous set plus bias k.

    The gate is sigmoid(mlp(mean over categories)), strictly inside (0, 1), so
    the gated copy never amplifies any channel.
    """
    key = f"step_bias_{k}"
    if key not in leaves:
        raise IndexError(f"no step bias for round {k}")
    if not gate:
        return add(protos, leaves[key])
    mean = mean_cols(protos)
    h = relu(affine_cols(leaves["gate_w1"], mean, leaves["gate_b1"]))
    gamma = sigmoid(affine_cols(leaves["gate_w2"], h, leaves["gate_b2"]))
    n_cats = protos.value.shape[1]
    gated = mul(matmul(gamma, leaf(np.ones((1, n_cats)))), protos)
    return add(gated, leaves[key])


def prototype_chain(leaves, iterations: int, gate: bool = True) -> list[Node]:
    """Prototype sets for rounds 1..iterations, chained from the starting set.

    Image-independent: within a training step the chain is computed once and
    shared read-only across the batch.
    """
    protos = leaves["cat_protos"]
    chain = []
    for k in range(iterations):
        protos = update_category_prototypes(protos, leaves, k, gate)
        chain.append(protos)
    return chain


def category_loss(f: Node, protos: Node, label: int) -> Node:
    """Cross entropy of dot-product logits between f and each prototype column."""
    return cross_entropy_logits(matmul(transpose(protos), f), label)


def pcc_forward(reps: list[Node], leaves, label: int, gate: bool = True) -> list[Node]:
    """Per-round classification losses for one image's representation sequence."""
    chain = prototype_chain(leaves, len(reps), gate)
    return [category_loss(f, protos, label) for f, protos in zip(reps, chain)]
