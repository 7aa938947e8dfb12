"""Model assembly, objectives, inference, training loop, checkpoints.

Four variants share one trainer:

    base   global region-mean feature, cross entropy on attribute logits
    pcc    base plus progressive category prototypes in attribute space
    pal    progressive attribute localization, semantic alignment loss
    dppn   pal plus progressive category prototypes in representation space

The objective sums the per-round semantic alignment and (weighted) category
classification losses, each averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from dppn import pal, pcc
from dppn.autodiff import (
    AdamState,
    DimensionError,
    Node,
    adam_step,
    add,
    affine_cols,
    backward,
    cross_entropy_logits,
    leaf,
    matmul,
    scale,
    sq_l2,
    transpose,
)
from dppn.data import GzslDataset, read_kv, save_tensor, load_tensor, write_kv

__all__ = [
    "VARIANTS",
    "TrainConfig",
    "DppnModel",
    "Checkpoint",
    "total_loss",
    "baseline_v2s_loss",
    "predict",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
    "config_from_kv",
]

VARIANTS = ("base", "pcc", "pal", "dppn")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; the defaults are the full model's reference settings."""

    iterations: int = 3          # progressive rounds (config key K)
    cl_weight: float = 1.0       # category-loss weight (config key lambda)
    reduced_dim: int = 8         # per-attribute reduced extent (config key D)
    lr: float = 2e-4
    batch: int = 64
    epochs: int = 30
    seed: int = 0
    variant: str = "dppn"
    aggregation: str = "cat"     # cat | sum | max (config key agg)
    refine: bool = True          # prototype refinement stage (config key f_ar)
    gate: bool = True            # category prototype gate (config key f_cs)
    eval_every: int = 1          # epochs between validation passes; 0 = never

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.aggregation not in pal.AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch must be >= 1, epochs >= 0, lr > 0")
        if self.cl_weight < 0:
            raise ValueError("cl_weight must be >= 0")


_BOOL_KEYS = {"f_ar": "refine", "f_cs": "gate"}
_CONFIG_KEYS = {
    "K": ("iterations", int),
    "lambda": ("cl_weight", float),
    "D": ("reduced_dim", int),
    "lr": ("lr", float),
    "batch": ("batch", int),
    "epochs": ("epochs", int),
    "seed": ("seed", int),
    "variant": ("variant", str),
    "agg": ("aggregation", str),
    "eval_every": ("eval_every", int),
}


def config_from_kv(kv: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    """Build a TrainConfig from key=value strings, overriding ``base``."""
    cfg = base or TrainConfig()
    updates = {}
    for key, raw in kv.items():
        if key in _CONFIG_KEYS:
            attr, typ = _CONFIG_KEYS[key]
            updates[attr] = typ(raw)
        elif key in _BOOL_KEYS:
            if raw not in ("on", "off"):
                raise ValueError(f"config key {key} must be 'on' or 'off', got {raw!r}")
            updates[_BOOL_KEYS[key]] = raw == "on"
        else:
            raise ValueError(f"unknown config key {key!r}")
    return replace(cfg, **updates)


class DppnModel:
    """Parameters plus hyperparameters for one variant.

    Parameters live in an insertion-ordered name -> float64 array dict;
    construction consumes a generator seeded by cfg.seed and keeps it for the
    training shuffle, so one seed fixes the whole run.
    """

    def __init__(self, cfg: TrainConfig, channels: int, n_attributes: int, n_seen: int,
                 seen_attributes=None):
        self.cfg = cfg
        self.channels = channels
        self.n_attributes = n_attributes
        self.n_seen = n_seen
        self.rng = np.random.default_rng(cfg.seed)
        params: dict[str, np.ndarray] = {}
        if cfg.variant in ("base", "pcc"):
            params["global_w"] = self.rng.normal(
                0.0, np.sqrt(1.0 / channels), size=(n_attributes, channels))
            params["global_b"] = np.zeros((n_attributes, 1))
        if cfg.variant in ("pal", "dppn"):
            params.update(pal.init_pal_params(
                self.rng, channels, n_attributes, cfg.reduced_dim, cfg.refine))
            params.update(pal.init_projector(self.rng, n_attributes, self.rep_dim))
        if cfg.variant in ("pcc", "dppn"):
            params.update(pcc.init_pcc_params(
                self.rng, self.rep_dim, n_seen, cfg.iterations, cfg.gate))
            if cfg.variant == "pcc" and seen_attributes is not None:
                # the global-feature variant's prototypes live in attribute
                # space; start them at the category attribute vectors so the
                # repulsion sharpens the geometry inference uses instead of
                # pulling the feature toward arbitrary directions
                anchored = np.asarray(seen_attributes, dtype=np.float64).T
                if anchored.shape != params["cat_protos"].shape:
                    raise DimensionError(
                        f"seen attribute table {anchored.T.shape} does not give "
                        f"{params['cat_protos'].shape} prototypes")
                params["cat_protos"] = anchored.copy()
        self.params = params

    @property
    def rep_dim(self) -> int:
        """Extent of the representation the category prototypes live in."""
        if self.cfg.variant in ("base", "pcc"):
            return self.n_attributes
        return pal.rep_dim_for(self.cfg.reduced_dim, self.n_attributes, self.cfg.aggregation)

    def leaves(self) -> dict[str, Node]:
        """Wrap the current parameter values as graph leaves for one step."""
        return {name: leaf(value) for name, value in self.params.items()}


# ---------------------------------------------------------------------------
# objectives


def _global_feature(x, leaves) -> Node:
    """Region-mean pooling followed by a dense projection into attribute space."""
    x = x if isinstance(x, Node) else leaf(x)
    pooled = np.asarray(x.value, dtype=np.float64).mean(axis=1, keepdims=True)
    return affine_cols(leaves["global_w"], leaf(pooled), leaves["global_b"])


def baseline_v2s_loss(x, label: int, attr_seen: np.ndarray, model: DppnModel) -> Node:
    """Cross entropy of the global feature's logits against every seen category's
    attribute vector."""
    if not 0 <= label < model.n_seen:
        raise IndexError(f"label {label} out of range for {model.n_seen} seen categories")
    leaves = model.leaves()
    f = _global_feature(x, leaves)
    logits = matmul(leaf(np.asarray(attr_seen, dtype=np.float64)), f)
    return cross_entropy_logits(logits, label)


def total_loss(x, label: int, attr_vec: np.ndarray, model: DppnModel):
    """Per-sample objective: sum over rounds of alignment + weighted category loss.

    ``label`` indexes the seen categories (prototype columns). Returns the
    scalar loss node and a diagnostics dict with the per-round terms.
    """
    cfg = model.cfg
    if cfg.variant not in ("pal", "dppn"):
        raise ValueError(f"total_loss applies to pal/dppn variants, not {cfg.variant!r}")
    if not 0 <= label < model.n_seen:
        raise IndexError(f"label {label} out of range for {model.n_seen} seen categories")
    leaves = model.leaves()
    pairs = pal.pal_forward(x, leaves, cfg.iterations, cfg.aggregation, cfg.refine)
    sa_terms = [pal.semantic_align_loss(f, attr_vec, leaves) for _, f in pairs]
    total = sa_terms[0]
    for term in sa_terms[1:]:
        total = add(total, term)
    diag = {"sa": [float(t.value) for t in sa_terms], "cl": []}
    if cfg.variant == "dppn" and cfg.cl_weight != 0.0:
        cl_terms = pcc.pcc_forward([f for _, f in pairs], leaves, label, cfg.gate)
        cl_sum = cl_terms[0]
        for term in cl_terms[1:]:
            cl_sum = add(cl_sum, term)
        total = add(total, scale(cl_sum, cfg.cl_weight))
        diag["cl"] = [float(t.value) for t in cl_terms]
    diag["total"] = float(total.value)
    return total, diag


def _batch_objective(model: DppnModel, leaves, xs, labels, attr_seen):
    """Mean objective over one batch; shares prototype chains and attribute
    targets across samples. Returns (loss node, diagnostics)."""
    cfg = model.cfg
    n = len(xs)
    variant = cfg.variant
    rounds = cfg.iterations

    chain_t = None
    if variant in ("pcc", "dppn") and cfg.cl_weight != 0.0:
        chain = pcc.prototype_chain(leaves, rounds, cfg.gate)
        chain_t = [transpose(c) for c in chain]

    sa_sums: list[Node] = []
    cl_sums: list[Node] = []
    v2s_sum: Node | None = None

    if variant in ("base", "pcc"):
        attr_leaf = leaf(np.asarray(attr_seen, dtype=np.float64))
        for x, y in zip(xs, labels):
            f = _global_feature(x, leaves)
            term = cross_entropy_logits(matmul(attr_leaf, f), int(y))
            v2s_sum = term if v2s_sum is None else add(v2s_sum, term)
            if chain_t is not None:
                for k, ct in enumerate(chain_t):
                    term = cross_entropy_logits(matmul(ct, f), int(y))
                    if len(cl_sums) <= k:
                        cl_sums.append(term)
                    else:
                        cl_sums[k] = add(cl_sums[k], term)
    elif variant == "pal":
        # localization-only ablation: the base model's cross entropy with the
        # projection replaced by the progressive representation, attribute
        # vectors lifted into its space (a plain distance fit with both sides
        # trainable collapses to zero at this scale)
        lifted_t = transpose(pal.project_attribute_table(attr_seen, leaves))
        for x, y in zip(xs, labels):
            pairs = pal.pal_forward(x, leaves, rounds, cfg.aggregation, cfg.refine)
            for k, (_, f) in enumerate(pairs):
                term = cross_entropy_logits(matmul(lifted_t, f), int(y))
                if len(sa_sums) <= k:
                    sa_sums.append(term)
                else:
                    sa_sums[k] = add(sa_sums[k], term)
    else:
        targets: dict[int, Node] = {}
        for x, y in zip(xs, labels):
            y = int(y)
            if y not in targets:
                targets[y] = pal.project_attributes(attr_seen[y], leaves)
            pairs = pal.pal_forward(x, leaves, rounds, cfg.aggregation, cfg.refine)
            for k, (_, f) in enumerate(pairs):
                term = sq_l2(f, targets[y])
                if len(sa_sums) <= k:
                    sa_sums.append(term)
                else:
                    sa_sums[k] = add(sa_sums[k], term)
                if chain_t is not None:
                    term = cross_entropy_logits(matmul(chain_t[k], f), y)
                    if len(cl_sums) <= k:
                        cl_sums.append(term)
                    else:
                        cl_sums[k] = add(cl_sums[k], term)

    parts: list[Node] = []
    if v2s_sum is not None:
        parts.append(scale(v2s_sum, 1.0 / n))
    for s in sa_sums:
        parts.append(scale(s, 1.0 / n))
    for c in cl_sums:
        parts.append(scale(c, cfg.cl_weight / n))
    loss = parts[0]
    for p in parts[1:]:
        loss = add(loss, p)
    diag = {
        "v2s": float(v2s_sum.value) / n if v2s_sum is not None else None,
        "sa": [float(s.value) / n for s in sa_sums],
        "cl": [float(c.value) / n for c in cl_sums],
    }
    return loss, diag


# ---------------------------------------------------------------------------
# inference


def _representation(x_value: np.ndarray, model: DppnModel) -> np.ndarray:
    """Final-round representation for one image (values only)."""
    if model.cfg.variant in ("base", "pcc"):
        leaves = model.leaves()
        return _global_feature(x_value, leaves).value
    pairs = pal.pal_forward(x_value, model.leaves(), model.cfg.iterations,
                            model.cfg.aggregation, model.cfg.refine)
    return pairs[-1][1].value


def _inference_targets(attributes: np.ndarray, model: DppnModel) -> np.ndarray:
    """Per-category target vectors, one column per attribute-table row."""
    attributes = np.asarray(attributes, dtype=np.float64)
    if attributes.ndim != 2 or attributes.shape[0] == 0:
        raise DimensionError(f"attribute table must be (n_categories, n_attributes), "
                             f"got shape {attributes.shape}")
    if attributes.shape[1] != model.n_attributes:
        raise DimensionError(
            f"attribute table has {attributes.shape[1]} attributes, model expects "
            f"{model.n_attributes}")
    if model.cfg.variant in ("base", "pcc"):
        return attributes.T
    return model.params["project_w"] @ attributes.T + model.params["project_b"]


def predict(x, attributes: np.ndarray, model: DppnModel) -> int:
    """Nearest-target category over the whole attribute table (seen + unseen).

    Returns the row index of the attribute table; ties break toward the lowest
    index. Distances are squared L2 between the final representation and each
    category's target vector.
    """
    targets = _inference_targets(attributes, model)
    f = _representation(np.asarray(x, dtype=np.float64), model)
    dists = ((targets - f) ** 2).sum(axis=0)
    return int(np.argmin(dists))


# ---------------------------------------------------------------------------
# training


def train(dataset: GzslDataset, model: DppnModel, callback=None):
    """Mini-batch Adam over the variant's objective.

    Deterministic given the model seed: the shuffle order comes from the
    model's own generator and every reduction is sequential. Returns
    (checkpoint, history) where history has one entry per epoch with the mean
    training loss and, on validation epochs, the GZSL metrics of the held-out
    split. ``callback`` (if given) receives each history entry as it is made.
    """
    cfg = model.cfg
    dataset.validate()
    if len(dataset.train_x) == 0:
        raise ValueError("training split is empty")
    if dataset.channels != model.channels:
        raise DimensionError(f"dataset has {dataset.channels} channels, model expects "
                             f"{model.channels}")
    if dataset.n_attributes != model.n_attributes:
        raise DimensionError(f"dataset has {dataset.n_attributes} attributes, model expects "
                             f"{model.n_attributes}")
    if len(dataset.seen_ids) != model.n_seen:
        raise DimensionError(f"dataset has {len(dataset.seen_ids)} seen categories, model "
                             f"expects {model.n_seen}")

    labels = np.searchsorted(dataset.seen_ids, dataset.train_y)
    attr_seen = dataset.attributes[dataset.seen_ids]
    states = {name: AdamState(value.shape, lr=cfg.lr)
              for name, value in model.params.items()}

    history: list[dict] = []
    n = len(dataset.train_x)
    for epoch in range(1, cfg.epochs + 1):
        order = model.rng.permutation(n)
        weighted = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            leaves = model.leaves()
            loss, _ = _batch_objective(
                model, leaves, dataset.train_x[idx], labels[idx], attr_seen)
            backward(loss)
            for name, node in leaves.items():
                grad = node.grad if node.grad is not None else np.zeros_like(node.value)
                model.params[name] = adam_step(model.params[name], grad, states[name])
            weighted += float(loss.value) * len(idx)
        entry = {"epoch": epoch, "loss": weighted / n}
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            from dppn.evaluate import evaluate_gzsl  # lazy: avoids an import cycle

            report = evaluate_gzsl(model, dataset)
            entry.update({"mca_u": report.mca_u, "mca_s": report.mca_s, "h": report.h})
        history.append(entry)
        if callback is not None:
            callback(entry)
    return checkpoint_from_model(model, epoch=cfg.epochs), history


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    """Parameter tensors (32-bit-representable values) plus run metadata."""

    params: dict[str, np.ndarray]
    meta: dict[str, object]


_META_ORDER = ("K", "lambda", "D", "N_a", "N_c", "C", "seed", "epoch",
               "variant", "agg", "f_ar", "f_cs")


def checkpoint_from_model(model: DppnModel, epoch: int = 0) -> Checkpoint:
    cfg = model.cfg
    meta = {
        "K": cfg.iterations,
        "lambda": cfg.cl_weight,
        "D": cfg.reduced_dim,
        "N_a": model.n_attributes,
        "N_c": model.n_seen,
        "C": model.channels,
        "seed": cfg.seed,
        "epoch": epoch,
        "variant": cfg.variant,
        "agg": cfg.aggregation,
        "f_ar": "on" if cfg.refine else "off",
        "f_cs": "on" if cfg.gate else "off",
    }
    params = {name: value.astype(np.float32).astype(np.float64)
              for name, value in model.params.items()}
    return Checkpoint(params=params, meta=meta)


def save_checkpoint(ckpt: Checkpoint, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, value in ckpt.params.items():
        save_tensor(value, out / f"{name}.dtf")
    write_kv(out / "meta.cfg", [(k, ckpt.meta[k]) for k in _META_ORDER])
    return out


def load_checkpoint(ckpt_dir) -> Checkpoint:
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / "meta.cfg"
    if not meta_path.exists():
        raise FileNotFoundError(f"no meta.cfg in {ckpt_dir}")
    raw = read_kv(meta_path)
    missing = [k for k in _META_ORDER if k not in raw]
    if missing:
        raise ValueError(f"meta.cfg is missing keys: {missing}")
    meta: dict[str, object] = {
        "K": int(raw["K"]), "lambda": float(raw["lambda"]), "D": int(raw["D"]),
        "N_a": int(raw["N_a"]), "N_c": int(raw["N_c"]), "C": int(raw["C"]),
        "seed": int(raw["seed"]), "epoch": int(raw["epoch"]),
        "variant": raw["variant"], "agg": raw["agg"],
        "f_ar": raw["f_ar"], "f_cs": raw["f_cs"],
    }
    params = {p.stem: load_tensor(p) for p in sorted(ckpt_dir.glob("*.dtf"))}
    if not params:
        raise ValueError(f"no parameter tensors in {ckpt_dir}")
    return Checkpoint(params=params, meta=meta)


def model_from_checkpoint(ckpt: Checkpoint) -> DppnModel:
    """Rebuild a model with the checkpoint's architecture and parameters."""
    meta = ckpt.meta
    cfg = TrainConfig(
        iterations=int(meta["K"]),
        cl_weight=float(meta["lambda"]),
        reduced_dim=int(meta["D"]),
        seed=int(meta["seed"]),
        variant=str(meta["variant"]),
        aggregation=str(meta["agg"]),
        refine=meta["f_ar"] == "on",
        gate=meta["f_cs"] == "on",
    )
    model = DppnModel(cfg, channels=int(meta["C"]), n_attributes=int(meta["N_a"]),
                      n_seen=int(meta["N_c"]))
    expected = set(model.params)
    got = set(ckpt.params)
    if expected != got:
        raise ValueError(f"checkpoint parameter set mismatch: missing {sorted(expected - got)}, "
                         f"unexpected {sorted(got - expected)}")
    for name, value in ckpt.params.items():
        if value.shape != model.params[name].shape:
            raise DimensionError(f"checkpoint tensor {name} has shape {value.shape}, expected "
                                 f"{model.params[name].shape}")
        model.params[name] = value
    return model
