"""Synthetic domain-shift datasets and their CSV / manifest formats.

CSV layout: header ``x0,...,x{d-1},label,domain``; one row per sample;
``label`` may be empty; ``domain`` is ``source`` or ``target``.  Labels on
target rows are loaded into ``eval_labels`` and never into ``labels``, so the
training path cannot see them.  Floats are written with 17 significant digits.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .nn import atomic_write_text

SOURCE = "source"
TARGET = "target"


@dataclass
class DomainDataset:
    inputs: np.ndarray
    labels: np.ndarray | None
    domain: str
    name: str = ""
    eval_labels: np.ndarray | None = None
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError(f"{self.name}: inputs must be a matrix, got shape {self.inputs.shape}")
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"{self.name}: domain must be source or target, got {self.domain!r}")
        if self.domain == TARGET and self.labels is not None:
            raise ValueError(f"{self.name}: target datasets carry eval_labels, not labels")
        for attr in ("labels", "eval_labels"):
            v = getattr(self, attr)
            if v is not None:
                v = np.asarray(v, dtype=np.int64)
                if v.shape != (len(self.inputs),):
                    raise ValueError(f"{self.name}: {attr} has shape {v.shape}, expected ({len(self.inputs)},)")
                setattr(self, attr, v)

    def __len__(self):
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def known_labels(self) -> np.ndarray | None:
        """Labels for evaluation: training labels or quarantined target labels."""
        return self.labels if self.labels is not None else self.eval_labels

    @property
    def num_classes(self) -> int:
        y = self.known_labels
        if y is None:
            raise ValueError(f"{self.name}: no labels")
        return int(y.max()) + 1

    def unlabeled(self) -> "DomainDataset":
        """Copy with every label removed (what the training loop receives)."""
        return DomainDataset(self.inputs, None, self.domain, self.name, None, dict(self.manifest))

    def replace(self, **changes) -> "DomainDataset":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    eval_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if abs(self.train_fraction + self.eval_fraction - 1.0) > 1e-12:
            raise ValueError("split fractions must sum to 1")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ValueError("split fractions must lie in [0, 1]")


def split(ds: DomainDataset, spec: SplitSpec) -> tuple[DomainDataset, DomainDataset]:
    order = np.random.default_rng(spec.seed).permutation(len(ds))
    cut = int(round(spec.train_fraction * len(ds)))

    def take(idx, suffix):
        return DomainDataset(
            ds.inputs[idx],
            None if ds.labels is None else ds.labels[idx],
            ds.domain,
            f"{ds.name}{suffix}",
            None if ds.eval_labels is None else ds.eval_labels[idx],
            dict(ds.manifest),
        )

    return take(order[:cut], ":train"), take(order[cut:], ":eval")


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def gen_two_moons(n: int, noise_sigma: float, seed: int) -> DomainDataset:
    """Two interleaving unit half-circles; class 0 is the upper arc."""
    if n <= 0 or n % 2:
        raise ValueError(f"two-moons needs a positive even n, got {n}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be nonnegative, got {noise_sigma}")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    x = np.vstack([upper, lower])
    rng = np.random.default_rng(seed)
    if noise_sigma > 0:
        x = x + rng.normal(0.0, noise_sigma, size=x.shape)
    y = np.repeat([0, 1], half)
    manifest = {"kind": "two-moons", "n": n, "d": 2, "k": 2, "seed": seed, "noise": noise_sigma}
    return DomainDataset(x, y, SOURCE, f"two-moons-{seed}", manifest=manifest)


def rotate(ds: DomainDataset, angle_degrees: float) -> DomainDataset:
    """Rotate 2-D inputs about the origin; the result is a target dataset."""
    if ds.dim != 2:
        raise ValueError(f"rotate needs 2-D inputs, got d={ds.dim}")
    a = np.deg2rad(angle_degrees)
    c, s = np.cos(a), np.sin(a)
    rot = np.array([[c, -s], [s, c]])
    manifest = dict(ds.manifest, shift={"rotate": angle_degrees})
    return DomainDataset(
        ds.inputs @ rot.T, None, TARGET, f"{ds.name}-rot{angle_degrees:g}", ds.known_labels, manifest
    )


def gen_gaussian_blobs(k_classes: int, n_per_class: int, means, cov_scale: float, seed: int) -> DomainDataset:
    """Isotropic Gaussian clusters with covariance ``cov_scale * I``."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if means.shape[0] != k_classes:
        raise ValueError(f"got {means.shape[0]} means for {k_classes} classes")
    if cov_scale < 0 or n_per_class <= 0:
        raise ValueError("cov_scale must be nonnegative and n_per_class positive")
    rng = np.random.default_rng(seed)
    d = means.shape[1]
    noise = rng.normal(0.0, np.sqrt(cov_scale), size=(k_classes * n_per_class, d))
    x = np.repeat(means, n_per_class, axis=0) + noise
    y = np.repeat(np.arange(k_classes), n_per_class)
    manifest = {
        "kind": "blobs", "n": len(x), "d": d, "k": k_classes, "seed": seed,
        "means": means.tolist(), "cov_scale": cov_scale,
    }
    return DomainDataset(x, y, SOURCE, f"blobs-{seed}", manifest=manifest)


def shift_blobs(ds: DomainDataset, translation, class_swap_fraction: float = 0.0, seed: int = 0) -> DomainDataset:
    """Translate every input, then swap cluster centres among a fraction of classes.

    ``round(class_swap_fraction * k)`` classes are picked; their points are
    moved so that each picked class sits on the empirical centre of the next
    picked class (cyclically), which changes the label-feature relation.
    """
    if not 0.0 <= class_swap_fraction <= 1.0:
        raise ValueError(f"class_swap_fraction must be in [0, 1], got {class_swap_fraction}")
    translation = np.broadcast_to(np.asarray(translation, dtype=np.float64), (ds.dim,))
    y = ds.known_labels
    x = ds.inputs.copy()
    n_swap = int(round(class_swap_fraction * (0 if y is None else int(y.max()) + 1)))
    if n_swap >= 2:
        classes = np.sort(np.random.default_rng(seed).choice(int(y.max()) + 1, n_swap, replace=False))
        centres = {c: ds.inputs[y == c].mean(axis=0) for c in classes}
        for c, nxt in zip(classes, np.roll(classes, -1)):
            x[y == c] += centres[nxt] - centres[c]
    x = x + translation
    manifest = dict(
        ds.manifest, shift={"translation": translation.tolist(), "class_swap_fraction": class_swap_fraction, "seed": seed}
    )
    return DomainDataset(x, None, TARGET, f"{ds.name}-shift", y, manifest)


# ---------------------------------------------------------------------------
# standardisation
# ---------------------------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return format(float(v), ".17g")


def dataset_csv(ds: DomainDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{j}" for j in range(ds.dim)] + ["label", "domain"])
    y = ds.known_labels
    for i, row in enumerate(ds.inputs):
        w.writerow([_fmt(v) for v in row] + ["" if y is None else int(y[i]), ds.domain])
    return buf.getvalue()


def save_csv(ds: DomainDataset, path: str) -> None:
    atomic_write_text(path, dataset_csv(ds))


def load_csv(path: str, name: str | None = None) -> DomainDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for col in ("label", "domain"):
        if col not in header:
            raise ValueError(f"{path}: missing column {col!r}")
    feature_cols = [h for h in header if h not in ("label", "domain")]
    expected = [f"x{j}" for j in range(len(feature_cols))]
    if not feature_cols:
        raise ValueError(f"{path}: missing column 'x0'")
    if feature_cols != expected:
        missing = [c for c in expected if c not in feature_cols]
        raise ValueError(f"{path}: missing column {missing[0]!r}" if missing else f"{path}: bad feature columns {feature_cols}")
    xi = [header.index(c) for c in expected]
    li, di = header.index("label"), header.index("domain")

    inputs, labels, domains = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            inputs.append([float(row[j]) for j in xi])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric feature value") from None
        lab = row[li].strip()
        if lab == "":
            labels.append(None)
        else:
            try:
                labels.append(int(lab))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad label {lab!r}") from None
        dom = row[di].strip()
        if dom not in (SOURCE, TARGET):
            raise ValueError(f"{path}:{lineno}: bad domain {dom!r}")
        domains.append(dom)
    if not inputs:
        raise ValueError(f"{path}: no data rows")
    if len(set(domains)) != 1:
        raise ValueError(f"{path}: mixed domains in one file")
    domain = domains[0]
    have = [v is not None for v in labels]
    if any(have) and not all(have):
        first = have.index(False) + 2
        raise ValueError(f"{path}:{first}: label missing while other rows are labeled")
    y = np.asarray(labels, dtype=np.int64) if all(have) else None
    if domain == SOURCE and y is None:
        raise ValueError(f"{path}: source rows must be labeled")
    name = name or path
    manifest = _read_manifest_if_present(path)
    if domain == SOURCE:
        return DomainDataset(np.asarray(inputs), y, SOURCE, name, None, manifest)
    return DomainDataset(np.asarray(inputs), None, TARGET, name, y, manifest)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def manifest_path(csv_path: str) -> str:
    return csv_path + ".manifest.json"


def dataset_manifest(ds: DomainDataset) -> dict:
    y = ds.known_labels
    out = {"name": ds.name, "n": len(ds), "d": ds.dim, "k": None if y is None else int(y.max()) + 1}
    out.update({k: v for k, v in ds.manifest.items() if k not in ("name", "n", "d", "k")})
    return out


def write_manifest(ds: DomainDataset, csv_path: str) -> None:
    atomic_write_text(manifest_path(csv_path), json.dumps(dataset_manifest(ds), indent=2, sort_keys=True) + "\n")


def _read_manifest_if_present(csv_path: str) -> dict:
    try:
        with open(manifest_path(csv_path)) as fh:
            return json.load(fh)
    except FileNotFoundError:
        return {}
