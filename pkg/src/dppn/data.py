"""Dataset plumbing: a small binary tensor format, manifests, and the
synthetic planted-correspondence benchmark generator.

Tensor file layout (magic "DTF1", everything little-endian):

    bytes 0..3   magic b"DTF1"
    byte  4      rank (unsigned, at most 8)
    next  8*rank extents, unsigned 64-bit
    rest         payload, 32-bit floats, row-major

Dataset manifest: UTF-8 text, one ``key=value`` per line where values are
tensor file names relative to the manifest's directory. Keys:

    train_features   rank-3, (n_train, channels, regions), seen domain only
    train_labels     rank-1 category ids
    test_features    rank-3, (n_test, channels, regions), both domains
    test_labels      rank-1 category ids
    test_domains     rank-1, 0 = seen domain, 1 = unseen domain
    attributes       rank-2, (n_categories, n_attributes), row i = category i
    seen_ids         rank-1 category ids
    unseen_ids       rank-1 category ids
    planted_map      optional rank-2, (n_train + n_test, n_attributes); train
                     rows first; entry = planted region index, -1 = inactive

Category ids must partition 0..n_categories-1 between seen_ids and unseen_ids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "TensorFormatError",
    "DatasetError",
    "SyntheticConfig",
    "GzslDataset",
    "reference_config",
    "save_tensor",
    "load_tensor",
    "generate_synthetic",
    "save_dataset",
    "load_dataset",
    "read_kv",
    "write_kv",
]

MAGIC = b"DTF1"
MAX_RANK = 8


class TensorFormatError(ValueError):
    """Malformed tensor file; the message names the failing byte offset."""


class DatasetError(ValueError):
    """Dataset content violates the GZSL contract."""


# ---------------------------------------------------------------------------
# tensor files


def save_tensor(arr, path) -> None:
    """Write an array in the DTF1 layout (values rounded to 32-bit floats)."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > MAX_RANK:
        raise TensorFormatError(f"rank {arr.ndim} exceeds the format maximum {MAX_RANK}")
    if arr.size == 0:
        raise TensorFormatError(f"refusing to save tensor with a zero extent, shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("refusing to save non-finite tensor values")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a DTF1 file back as a float64 array."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise TensorFormatError(
            f"bad magic {blob[:4]!r} at byte offset 0 (expected {MAGIC!r}) in {path}")
    if len(blob) < 5:
        raise TensorFormatError(f"truncated header at byte offset 4 in {path}")
    rank = blob[4]
    if rank > MAX_RANK:
        raise TensorFormatError(f"rank {rank} at byte offset 4 exceeds maximum {MAX_RANK} in {path}")
    header_end = 5 + 8 * rank
    if len(blob) < header_end:
        raise TensorFormatError(f"truncated extent list at byte offset {len(blob)} in {path}")
    extents = struct.unpack("<" + "Q" * rank, blob[5:header_end])
    count = 1
    for extent in extents:
        count *= extent
    expected = header_end + 4 * count
    if len(blob) != expected:
        raise TensorFormatError(
            f"payload ends at byte offset {len(blob)}, expected {expected} "
            f"for extents {list(extents)} in {path}")
    values = np.frombuffer(blob, dtype="<f4", offset=header_end)
    return values.reshape(extents).astype(np.float64)


# ---------------------------------------------------------------------------
# key=value files (manifests, configs, checkpoint metadata)


def read_kv(path) -> dict[str, str]:
    """Parse a UTF-8 key=value file; '#' starts a comment, blank lines skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(path, pairs) -> None:
    lines = [f"{k}={v}" for k, v in pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs for the planted-correspondence generator."""

    channels: int = 32            # feature channels per region
    regions: int = 16             # local regions per image
    attributes: int = 12          # attribute vocabulary size
    seen: int = 8                 # seen (training) categories
    unseen: int = 4               # unseen categories, test only
    samples: int = 40             # samples generated per category
    density: float = 0.33         # fraction of attributes active per category
    strength: float = 3.0         # planted signature magnitude
    noise: float = 0.5            # iid Gaussian noise level
    seed: int = 0

    def active_per_category(self) -> int:
        return int(round(self.density * self.attributes))


def reference_config() -> SyntheticConfig:
    """The fixed configuration every trend experiment runs on."""
    return SyntheticConfig()


@dataclass
class GzslDataset:
    """Features, labels, attribute table and split bookkeeping for one benchmark."""

    train_x: np.ndarray           # (n_train, channels, regions)
    train_y: np.ndarray           # (n_train,) int64 ids, all seen
    test_x: np.ndarray            # (n_test, channels, regions)
    test_y: np.ndarray            # (n_test,) int64 ids, both domains
    test_domains: np.ndarray      # (n_test,) 0 seen / 1 unseen
    attributes: np.ndarray        # (n_categories, n_attributes)
    seen_ids: np.ndarray          # sorted int64
    unseen_ids: np.ndarray        # sorted int64
    planted_train: np.ndarray | None = field(default=None)  # (n_train, n_attributes)
    planted_test: np.ndarray | None = field(default=None)   # (n_test, n_attributes)

    @property
    def channels(self) -> int:
        return self.train_x.shape[1]

    @property
    def regions(self) -> int:
        return self.train_x.shape[2]

    @property
    def n_attributes(self) -> int:
        return self.attributes.shape[1]

    @property
    def n_categories(self) -> int:
        return self.attributes.shape[0]

    def validate(self) -> "GzslDataset":
        seen = set(self.seen_ids.tolist())
        unseen = set(self.unseen_ids.tolist())
        overlap = seen & unseen
        if overlap:
            raise DatasetError(f"seen and unseen category sets overlap: {sorted(overlap)}")
        if seen | unseen != set(range(self.n_categories)):
            raise DatasetError(
                f"seen+unseen ids must cover attribute rows 0..{self.n_categories - 1} exactly")
        if self.train_x.ndim != 3 or self.test_x.ndim != 3:
            raise DatasetError("feature tensors must be rank 3 (sample, channel, region)")
        if self.test_x.shape[1:] != self.train_x.shape[1:]:
            raise DatasetError(
                f"train/test feature extents differ: {self.train_x.shape[1:]} vs {self.test_x.shape[1:]}")
        if len(self.train_y) != len(self.train_x) or len(self.test_y) != len(self.test_x):
            raise DatasetError("label count does not match feature count")
        if len(self.test_domains) != len(self.test_y):
            raise DatasetError("domain tag count does not match test label count")
        bad = [int(y) for y in self.train_y if int(y) not in seen]
        if bad:
            raise DatasetError(f"training labels outside the seen set: {sorted(set(bad))[:8]}")
        for y in self.test_y:
            if int(y) not in seen and int(y) not in unseen:
                raise DatasetError(f"test label {int(y)} references an unknown category")
        for y, dom in zip(self.test_y, self.test_domains):
            expected = 1 if int(y) in unseen else 0
            if int(dom) != expected:
                raise DatasetError(f"domain tag {int(dom)} inconsistent with label {int(y)}")
        if not np.isfinite(self.attributes).all():
            raise DatasetError("attribute table contains non-finite values")
        if not np.isfinite(self.train_x).all() or not np.isfinite(self.test_x).all():
            raise DatasetError("feature tensors contain non-finite values")
        for planted, n in ((self.planted_train, len(self.train_x)),
                           (self.planted_test, len(self.test_x))):
            if planted is None:
                continue
            if planted.shape != (n, self.n_attributes):
                raise DatasetError(
                    f"planted map shape {planted.shape} does not match ({n}, {self.n_attributes})")
            if planted.max(initial=-1) >= self.regions:
                raise DatasetError("planted map references a region index past the grid")
        return self


def _draw_signatures(rng, cfg: SyntheticConfig) -> np.ndarray:
    """Unit signature vectors, redrawn until pairwise |dot| stays below 0.5."""
    for _ in range(1000):
        w = rng.normal(size=(cfg.attributes, cfg.channels))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        gram = np.abs(w @ w.T)
        np.fill_diagonal(gram, 0.0)
        if gram.max() < 0.5:
            return w
    raise DatasetError(
        f"could not draw near-orthogonal signatures for channels={cfg.channels}, "
        f"attributes={cfg.attributes}")


def _draw_attribute_table(rng, cfg: SyntheticConfig) -> np.ndarray:
    n_active = cfg.active_per_category()
    n_cats = cfg.seen + cfg.unseen
    table = np.zeros((n_cats, cfg.attributes))
    chosen: set[tuple[int, ...]] = set()
    for c in range(n_cats):
        for _ in range(1000):
            picks = tuple(sorted(rng.choice(cfg.attributes, size=n_active, replace=False).tolist()))
            if picks not in chosen:
                chosen.add(picks)
                table[c, list(picks)] = 1.0
                break
        else:
            raise DatasetError("could not draw distinct attribute vectors for all categories")
    return table


def generate_synthetic(cfg: SyntheticConfig) -> GzslDataset:
    """Build a GZSL benchmark with known attribute-to-region correspondence.

    Every sample of category y gets, for each active attribute i, a distinct
    region whose feature is shifted by strength * signature_i; iid Gaussian
    noise is added everywhere. The planted region indices are recorded so
    localization can be scored against ground truth.
    """
    n_active = cfg.active_per_category()
    if n_active < 1:
        raise DatasetError(
            f"density {cfg.density} activates no attributes (attributes={cfg.attributes})")
    if n_active > cfg.regions:
        raise DatasetError(
            f"regions={cfg.regions} too small for {n_active} simultaneously active attributes")
    if cfg.seen < 1 or cfg.unseen < 1 or cfg.samples < 2:
        raise DatasetError("need at least one category per domain and two samples per category")

    rng = np.random.default_rng(cfg.seed)
    attributes = _draw_attribute_table(rng, cfg)
    signatures = _draw_signatures(rng, cfg)

    n_cats = cfg.seen + cfg.unseen
    train_per_cat = max(1, int(round(cfg.samples * 0.75)))
    if train_per_cat >= cfg.samples:
        train_per_cat = cfg.samples - 1

    train_x, train_y, train_p = [], [], []
    test_x, test_y, test_d, test_p = [], [], [], []
    for cat in range(n_cats):
        active = np.flatnonzero(attributes[cat])
        for s in range(cfg.samples):
            region_order = rng.permutation(cfg.regions)
            x = rng.normal(scale=cfg.noise, size=(cfg.channels, cfg.regions)) if cfg.noise > 0 \
                else np.zeros((cfg.channels, cfg.regions))
            planted = np.full(cfg.attributes, -1.0)
            for slot, attr in enumerate(active):
                region = int(region_order[slot])
                x[:, region] += cfg.strength * signatures[attr]
                planted[attr] = region
            seen_domain = cat < cfg.seen
            if seen_domain and s < train_per_cat:
                train_x.append(x)
                train_y.append(cat)
                train_p.append(planted)
            else:
                test_x.append(x)
                test_y.append(cat)
                test_d.append(0 if seen_domain else 1)
                test_p.append(planted)

    ds = GzslDataset(
        train_x=np.stack(train_x),
        train_y=np.array(train_y, dtype=np.int64),
        test_x=np.stack(test_x),
        test_y=np.array(test_y, dtype=np.int64),
        test_domains=np.array(test_d, dtype=np.int64),
        attributes=attributes,
        seen_ids=np.arange(cfg.seen, dtype=np.int64),
        unseen_ids=np.arange(cfg.seen, n_cats, dtype=np.int64),
        planted_train=np.stack(train_p),
        planted_test=np.stack(test_p),
    )
    return ds.validate()


# ---------------------------------------------------------------------------
# manifest save / load

_MANIFEST_KEYS = ("train_features", "train_labels", "test_features", "test_labels",
                  "test_domains", "attributes", "seen_ids", "unseen_ids")


def save_dataset(ds: GzslDataset, out_dir) -> Path:
    """Write all tensors plus manifest.txt into out_dir; returns the manifest path."""
    ds.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tensors = {
        "train_features": ds.train_x,
        "train_labels": ds.train_y.astype(np.float64),
        "test_features": ds.test_x,
        "test_labels": ds.test_y.astype(np.float64),
        "test_domains": ds.test_domains.astype(np.float64),
        "attributes": ds.attributes,
        "seen_ids": ds.seen_ids.astype(np.float64),
        "unseen_ids": ds.unseen_ids.astype(np.float64),
    }
    if ds.planted_train is not None and ds.planted_test is not None:
        tensors["planted_map"] = np.concatenate([ds.planted_train, ds.planted_test], axis=0)
    pairs = []
    for key, arr in tensors.items():
        name = f"{key}.dtf"
        save_tensor(arr, out / name)
        pairs.append((key, name))
    manifest = out / "manifest.txt"
    write_kv(manifest, pairs)
    return manifest


def _as_int_vector(arr, what) -> np.ndarray:
    arr = np.asarray(arr)
    rounded = np.round(arr)
    if not np.array_equal(arr, rounded):
        raise DatasetError(f"{what} must be integral, found fractional values")
    return rounded.astype(np.int64).reshape(-1)


def load_dataset(manifest_path) -> GzslDataset:
    """Load and fully validate a dataset from its manifest."""
    manifest_path = Path(manifest_path)
    kv = read_kv(manifest_path)
    unknown = set(kv) - set(_MANIFEST_KEYS) - {"planted_map"}
    if unknown:
        raise DatasetError(f"unknown manifest keys: {sorted(unknown)}")
    missing = [k for k in _MANIFEST_KEYS if k not in kv]
    if missing:
        raise DatasetError(f"manifest is missing keys: {missing}")
    base = manifest_path.parent
    raw = {key: load_tensor(base / name) for key, name in kv.items()}

    attributes = raw["attributes"]
    if attributes.ndim != 2:
        raise DatasetError(f"attribute table must be rank 2, got shape {attributes.shape}")
    train_x, test_x = raw["train_features"], raw["test_features"]
    if train_x.ndim != 3:
        raise DatasetError(f"train_features must be rank 3, got shape {train_x.shape}")

    planted_train = planted_test = None
    if "planted_map" in raw:
        pm = raw["planted_map"]
        n_train = train_x.shape[0]
        if pm.ndim != 2 or pm.shape[0] != n_train + test_x.shape[0]:
            raise DatasetError(
                f"planted_map shape {pm.shape} does not cover {n_train} train "
                f"+ {test_x.shape[0]} test rows")
        if pm.shape[1] != attributes.shape[1]:
            raise DatasetError(
                f"planted_map has {pm.shape[1]} attribute columns, expected {attributes.shape[1]}")
        pm = np.round(pm)
        planted_train, planted_test = pm[:n_train], pm[n_train:]

    ds = GzslDataset(
        train_x=train_x,
        train_y=_as_int_vector(raw["train_labels"], "train_labels"),
        test_x=test_x,
        test_y=_as_int_vector(raw["test_labels"], "test_labels"),
        test_domains=_as_int_vector(raw["test_domains"], "test_domains"),
        attributes=attributes,
        seen_ids=np.sort(_as_int_vector(raw["seen_ids"], "seen_ids")),
        unseen_ids=np.sort(_as_int_vector(raw["unseen_ids"], "unseen_ids")),
        planted_train=planted_train,
        planted_test=planted_test,
    )
    return ds.validate()


def with_noise(cfg: SyntheticConfig, noise: float) -> SyntheticConfig:
    """Same benchmark knobs with a different noise level."""
    return replace(cfg, noise=noise)
