"""GZSL metrics, evaluation, the ablation grid runner, and localization export.

The headline metric is the harmonic mean H of the per-domain mean class
accuracies: unseen-domain test samples score MCA_u, seen-domain test samples
score MCA_s, and H = 2 * MCA_u * MCA_s / (MCA_u + MCA_s).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dppn import pal
from dppn.data import GzslDataset
from dppn.model import (
    Checkpoint,
    DppnModel,
    TrainConfig,
    config_from_kv,
    model_from_checkpoint,
    predict,
    train,
)

__all__ = [
    "EvaluationError",
    "GzslReport",
    "mca",
    "harmonic_mean",
    "evaluate_gzsl",
    "parse_grid",
    "run_ablation",
    "export_localization",
    "similarity_stack",
    "planted_mass_by_iteration",
    "planted_argmax_hit_rate",
]


class EvaluationError(ValueError):
    """Evaluation inputs violate the metric contracts."""


@dataclass
class GzslReport:
    """Per-domain mean class accuracies (percent), their harmonic mean, the
    per-class accuracies, and the seen/unseen confusion counts."""

    mca_u: float
    mca_s: float
    h: float
    per_class: dict[int, float]
    confusion: dict[str, int]


def mca(predictions, labels, class_ids) -> float:
    """Mean class top-1 accuracy in percent: unweighted mean over classes of
    the per-class accuracy, so class sizes do not bias the score."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise EvaluationError(
            f"prediction/label counts differ: {predictions.shape} vs {labels.shape}")
    accs = []
    for c in class_ids:
        mask = labels == c
        if not mask.any():
            raise EvaluationError(f"class {int(c)} has no samples to score")
        accs.append(float((predictions[mask] == c).mean()))
    return 100.0 * float(np.mean(accs))


def harmonic_mean(mca_u: float, mca_s: float) -> float:
    """H = 2 * MCA_u * MCA_s / (MCA_u + MCA_s); 0 when both accuracies are 0."""
    for v in (mca_u, mca_s):
        if not 0.0 <= v <= 100.0:
            raise EvaluationError(f"accuracy {v} outside [0, 100]")
    if mca_u + mca_s == 0.0:
        return 0.0
    return 2.0 * mca_u * mca_s / (mca_u + mca_s)


def _as_model(model_or_ckpt) -> DppnModel:
    if isinstance(model_or_ckpt, Checkpoint):
        return model_from_checkpoint(model_or_ckpt)
    return model_or_ckpt


def evaluate_gzsl(model_or_ckpt, dataset: GzslDataset) -> GzslReport:
    """Predict every test sample over the joint label space and score per domain.

    Each sample counts toward exactly one of MCA_u / MCA_s, decided by its
    domain tag.
    """
    model = _as_model(model_or_ckpt)
    dataset.validate()
    if not (dataset.test_domains == 1).any():
        raise EvaluationError("test split has no unseen-domain samples; GZSL is undefined")
    if not (dataset.test_domains == 0).any():
        raise EvaluationError("test split has no seen-domain samples; GZSL is undefined")

    preds = np.array([predict(x, dataset.attributes, model) for x in dataset.test_x])

    unseen_mask = dataset.test_domains == 1
    seen_mask = ~unseen_mask
    mca_u = mca(preds[unseen_mask], dataset.test_y[unseen_mask], dataset.unseen_ids)
    mca_s = mca(preds[seen_mask], dataset.test_y[seen_mask], dataset.seen_ids)

    per_class: dict[int, float] = {}
    for ids, mask in ((dataset.seen_ids, seen_mask), (dataset.unseen_ids, unseen_mask)):
        for c in ids:
            cmask = mask & (dataset.test_y == c)
            per_class[int(c)] = 100.0 * float((preds[cmask] == c).mean())

    seen_set = set(dataset.seen_ids.tolist())
    pred_seen = np.array([p in seen_set for p in preds])
    confusion = {
        "seen_as_seen": int((seen_mask & pred_seen).sum()),
        "seen_as_unseen": int((seen_mask & ~pred_seen).sum()),
        "unseen_as_seen": int((unseen_mask & pred_seen).sum()),
        "unseen_as_unseen": int((unseen_mask & ~pred_seen).sum()),
    }
    return GzslReport(mca_u=mca_u, mca_s=mca_s, h=harmonic_mean(mca_u, mca_s),
                      per_class=per_class, confusion=confusion)


# ---------------------------------------------------------------------------
# ablation grid


def parse_grid(path) -> list[tuple[str, dict[str, str]]]:
    """Grid file: one variant per line, ``name key=value key=value ...``.

    '#' starts a comment. The key set is the train config key set; each line's
    pairs are the variant's delta from the base configuration.
    """
    rows: list[tuple[str, dict[str, str]]] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        name, overrides = parts[0], {}
        for token in parts[1:]:
            if "=" not in token:
                raise EvaluationError(f"{path}:{lineno}: expected key=value, got {token!r}")
            key, value = token.split("=", 1)
            overrides[key] = value
        if any(n == name for n, _ in rows):
            raise EvaluationError(f"{path}:{lineno}: duplicate variant name {name!r}")
        rows.append((name, overrides))
    return rows


def run_ablation(grid, dataset: GzslDataset, seeds: int,
                 base: TrainConfig | None = None, callback=None):
    """Train and evaluate every grid variant for seeds 0..seeds-1.

    Returns (rows, summary, csv_text). Rows are dicts with variant, seed and
    metrics (or error text if that run failed; the grid keeps going). The
    summary holds the median-over-seeds metrics per variant. The CSV columns
    are variant,seed,mca_u,mca_s,h with empty metric cells on failures.
    """
    if seeds < 1:
        raise EvaluationError("need at least one seed")
    if isinstance(grid, (str, Path)):
        grid = parse_grid(grid)
    base = base or TrainConfig(eval_every=0)

    rows: list[dict] = []
    for name, overrides in grid:
        for seed in range(seeds):
            row = {"variant": name, "seed": seed}
            try:
                cfg = config_from_kv(overrides, base)
                cfg = config_from_kv({"seed": str(seed)}, cfg)
                model = DppnModel(cfg, dataset.channels, dataset.n_attributes,
                                  len(dataset.seen_ids),
                                  seen_attributes=dataset.attributes[dataset.seen_ids])
                train(dataset, model)
                report = evaluate_gzsl(model, dataset)
                row.update({"mca_u": report.mca_u, "mca_s": report.mca_s, "h": report.h})
            except Exception as exc:  # keep the grid running, mark this run failed
                row["error"] = f"{type(exc).__name__}: {exc}"
            rows.append(row)
            if callback is not None:
                callback(row)

    summary = []
    for name, _ in grid:
        ok = [r for r in rows if r["variant"] == name and "error" not in r]
        entry = {"variant": name, "runs_ok": len(ok), "runs_failed": seeds - len(ok)}
        if ok:
            entry["median_h"] = float(np.median([r["h"] for r in ok]))
            entry["median_mca_u"] = float(np.median([r["mca_u"] for r in ok]))
            entry["median_mca_s"] = float(np.median([r["mca_s"] for r in ok]))
        summary.append(entry)

    lines = ["variant,seed,mca_u,mca_s,h"]
    for r in rows:
        if "error" in r:
            lines.append(f"{r['variant']},{r['seed']},,,")
        else:
            lines.append(f"{r['variant']},{r['seed']},{r['mca_u']:.4f},"
                         f"{r['mca_s']:.4f},{r['h']:.4f}")
    return rows, summary, "\n".join(lines) + "\n"


def summary_table(summary) -> str:
    """Fixed-width text table of the per-variant medians."""
    lines = [f"{'variant':<16} {'ok':>3} {'median_H':>9} {'median_U':>9} {'median_S':>9}"]
    for entry in summary:
        if entry["runs_ok"]:
            lines.append(f"{entry['variant']:<16} {entry['runs_ok']:>3} "
                         f"{entry['median_h']:>9.2f} {entry['median_mca_u']:>9.2f} "
                         f"{entry['median_mca_s']:>9.2f}")
        else:
            lines.append(f"{entry['variant']:<16} {entry['runs_ok']:>3} {'failed':>9}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# localization inspection


def similarity_stack(model_or_ckpt, x) -> list[np.ndarray]:
    """Similarity matrices S_1..S_K for one image (values only)."""
    model = _as_model(model_or_ckpt)
    if model.cfg.variant not in ("pal", "dppn"):
        raise EvaluationError(f"variant {model.cfg.variant!r} has no attribute localization")
    pairs = pal.pal_forward(np.asarray(x, dtype=np.float64), model.leaves(),
                            model.cfg.iterations, model.cfg.aggregation, model.cfg.refine)
    return [s.value for s, _ in pairs]


def _grid_extents(n: int) -> tuple[int, int]:
    """Factor n regions into the most square (width, height) grid."""
    h = int(np.sqrt(n))
    while n % h:
        h -= 1
    return n // h, h


def _column_to_pgm(column: np.ndarray, width: int, height: int) -> bytes:
    """One similarity column as a P5 PGM, linearly scaled to 0..255 per column.

    A constant column has no contrast to scale, so it maps to an all-zero
    image by definition.
    """
    lo, hi = float(column.min()), float(column.max())
    if hi > lo:
        pixels = np.round((column - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(column.shape[0], dtype=np.uint8)
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + pixels.reshape(height, width).tobytes()


def export_localization(model_or_ckpt, dataset: GzslDataset, sample_ids, out_dir):
    """Write similarity matrices for the requested test samples.

    Per sample and round k: one CSV (regions x attributes) and one PGM per
    attribute with the column rendered on the region grid. Returns the list of
    written paths.
    """
    model = _as_model(model_or_ckpt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_test = len(dataset.test_x)
    width, height = _grid_extents(dataset.regions)
    written: list[Path] = []
    for sid in sample_ids:
        sid = int(sid)
        if not 0 <= sid < n_test:
            raise IndexError(f"sample id {sid} out of range for {n_test} test samples")
        for k, s in enumerate(similarity_stack(model, dataset.test_x[sid]), start=1):
            csv_path = out / f"sample{sid:04d}_iter{k}.csv"
            rows = [",".join(f"{v:.7g}" for v in row) for row in s]
            csv_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
            written.append(csv_path)
            for a in range(s.shape[1]):
                pgm_path = out / f"sample{sid:04d}_iter{k}_attr{a:03d}.pgm"
                pgm_path.write_bytes(_column_to_pgm(s[:, a], width, height))
                written.append(pgm_path)
    return written


def planted_mass_by_iteration(model_or_ckpt, dataset: GzslDataset) -> np.ndarray:
    """Mean similarity mass on the planted region of each active attribute,
    per round, over the test split. The quantitative handle on whether
    localization sharpens across rounds."""
    model = _as_model(model_or_ckpt)
    if dataset.planted_test is None:
        raise EvaluationError("dataset has no planted map; localization cannot be scored")
    sums = np.zeros(model.cfg.iterations)
    count = 0
    for x, planted in zip(dataset.test_x, dataset.planted_test):
        active = np.flatnonzero(planted >= 0)
        if active.size == 0:
            continue
        stack = similarity_stack(model, x)
        regions = planted[active].astype(int)
        for k, s in enumerate(stack):
            sums[k] += s[regions, active].sum()
        count += active.size
    if count == 0:
        raise EvaluationError("planted map marks no active attributes")
    return sums / count


def planted_argmax_hit_rate(model_or_ckpt, dataset: GzslDataset, iteration: int = -1) -> float:
    """Fraction of (test sample, active attribute) pairs whose similarity
    column peaks exactly at the planted region, at the given round."""
    model = _as_model(model_or_ckpt)
    if dataset.planted_test is None:
        raise EvaluationError("dataset has no planted map; localization cannot be scored")
    hits = 0
    count = 0
    for x, planted in zip(dataset.test_x, dataset.planted_test):
        active = np.flatnonzero(planted >= 0)
        if active.size == 0:
            continue
        s = similarity_stack(model, x)[iteration]
        hits += int((s[:, active].argmax(axis=0) == planted[active].astype(int)).sum())
        count += active.size
    if count == 0:
        raise EvaluationError("planted map marks no active attributes")
    return hits / count
