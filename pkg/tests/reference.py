"""Independent numpy oracles used by the test suite.

Nothing here imports the package under test: every function re-derives the
math directly so the tests compare two unrelated code paths.
"""

import numpy as np


def ref_softmax_cols(a):
    e = np.exp(a - a.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def ref_sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def ref_cross_entropy(logits, target):
    z = logits.reshape(-1)
    m = z.max()
    return float(np.log(np.exp(z - m).sum()) + m - z[target])


def ref_refine(agg, w1, b1, w2, b2):
    """Two dense layers with an intermediate relu, applied column-wise."""
    h = np.maximum(w1 @ agg + b1, 0.0)
    return w2 @ h + b2


def ref_update_prototypes(x, protos, w1, b1, w2, b2, refine=True):
    s = ref_softmax_cols(x.T @ protos)
    agg = x @ s
    return ref_refine(agg, w1, b1, w2, b2) if refine else agg


def ref_assemble(protos, rw, rb, aggregation="cat"):
    reduced = rw @ protos + rb
    if aggregation == "cat":
        return reduced.T.reshape(-1, 1)
    if aggregation == "sum":
        return reduced.sum(axis=1, keepdims=True)
    if aggregation == "max":
        return reduced.max(axis=1, keepdims=True)
    raise ValueError(aggregation)


def ref_pal_forward(x, params, iterations, aggregation="cat", refine=True):
    """Returns [(S_k, f_k)] for k = 1..iterations; params is a name->array dict."""
    protos = params["attr_protos"]
    out = []
    for _ in range(iterations):
        s = ref_softmax_cols(x.T @ protos)
        agg = x @ s
        if refine:
            protos = ref_refine(agg, params["refine_w1"], params["refine_b1"],
                                params["refine_w2"], params["refine_b2"])
        else:
            protos = agg
        out.append((s, ref_assemble(protos, params["reduce_w"], params["reduce_b"], aggregation)))
    return out


def ref_project(attr_vec, pw, pb):
    return pw @ attr_vec.reshape(-1, 1) + pb


def ref_gate_update(c, params, k, gate=True):
    """One category-prototype update: channel gate on the category mean, plus bias."""
    w = params[f"step_bias_{k}"]
    if not gate:
        return c + w
    mean = c.mean(axis=1, keepdims=True)
    h = np.maximum(params["gate_w1"] @ mean + params["gate_b1"], 0.0)
    gamma = ref_sigmoid(params["gate_w2"] @ h + params["gate_b2"])
    return gamma * c + w


def ref_prototype_chain(params, iterations, gate=True):
    c = params["cat_protos"]
    chain = []
    for k in range(iterations):
        c = ref_gate_update(c, params, k, gate)
        chain.append(c)
    return chain


def ref_category_loss(f, c, y):
    return ref_cross_entropy(c.T @ f, y)


def ref_total_loss(x, y, attr_vec, params, iterations, cl_weight,
                   aggregation="cat", refine=True, gate=True):
    """Full per-sample objective; returns (total, sa_terms, cl_terms)."""
    pairs = ref_pal_forward(x, params, iterations, aggregation, refine)
    target = ref_project(attr_vec, params["project_w"], params["project_b"])
    sa = [float(((f - target) ** 2).sum()) for _, f in pairs]
    cl = []
    if cl_weight != 0.0:
        chain = ref_prototype_chain(params, iterations, gate)
        cl = [ref_category_loss(f, c, y) for (_, f), c in zip(pairs, chain)]
    return sum(sa) + cl_weight * sum(cl), sa, cl
