"""MC-dropout predictive uncertainty and certainty activation maps.

The certainty map of a feature vector ``f`` weights each coordinate by how
much increasing it would lower the predictive entropy ``U``:

    s = f * (-dU/df)   where that product is >= 0, else MASK_FLOOR
    map = 1 + softmax(s)            (softmax over the feature dimension)

so every map lies in [1, 2]^d and its excess over 1 sums to one.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_FLOOR, Tensor
from .nn import Mlp, Mode, atomic_write_text

MASK_FLOOR = -1e30


@dataclass
class CertaintyBundle:
    probs_mc: np.ndarray  # (n, T, k)
    entropy_u: np.ndarray  # (n,)
    cmap_target: np.ndarray  # (n, d)
    cmap_generated: np.ndarray  # (n, d)
    mask_floor_b: float = MASK_FLOOR


def entropy_terms(probs: Tensor) -> Tensor:
    """Row-wise ``-sum p log p`` with p clamped to [PROB_FLOOR, 1] inside the log."""
    logp = ad.log(ad.clip(probs, PROB_FLOOR, 1.0))
    return ad.negate(ad.sum(ad.multiply(probs, logp), axis=1))


def mc_entropy(f: Tensor, classifier: Mlp, T: int, rng: np.random.Generator):
    """Average entropy of T dropout-sampled class distributions per row of ``f``.

    The T passes share ``f`` and differ only in the classifier's dropout
    masks.  They run as one forward over T stacked copies of ``f``, sample
    ``t`` occupying rows ``t*n .. (t+1)*n - 1``.  The returned entropy keeps
    its graph back to ``f``.

    Returns ``(probs_mc, entropy_u)`` with ``probs_mc`` of shape (n, T, k).
    """
    if T < 1:
        raise ValueError(f"mc_entropy: T must be >= 1, got {T}")
    if not classifier.dropout_positions:
        raise ValueError("mc_entropy: classifier has no dropout position")
    n = f.shape[0]
    stacked = f if T == 1 else ad.concat([f] * T, axis=0)
    probs = ad.softmax(classifier(stacked, Mode.STOCHASTIC, rng), axis=1)
    per_sample = ad.reshape(entropy_terms(probs), (T, n))
    entropy_u = ad.mean(per_sample, axis=0)
    k = probs.shape[1]
    probs_mc = probs.data.reshape(T, n, k).transpose(1, 0, 2).copy()
    return probs_mc, entropy_u


def certainty_map(f: Tensor, entropy_u: Tensor, mask_floor: float = MASK_FLOOR) -> Tensor:
    """Certainty activation map of each row of ``f``; returned without graph."""
    if not f.requires_grad or entropy_u.node is None:
        raise ValueError("certainty_map: entropy has no graph back to the features")
    grads = ad.backward(ad.sum(entropy_u), wrt=[f])
    if not grads.has(f):
        raise ValueError("certainty_map: entropy has no graph back to the features")
    influence = f.data * -grads.of(f)
    s = ad.select_positive(Tensor(influence), mask_floor)
    return ad.detach(ad.add(ad.softmax(s, axis=1), 1.0))


def generate_cmap(gen: Mlp, logits: Tensor, f: Tensor) -> Tensor:
    """Generated map ``1 + softmax(G([logits, f]))``; keeps the graph."""
    if logits.ndim != 2 or f.ndim != 2 or logits.shape[0] != f.shape[0]:
        raise ValueError(f"generate_cmap: mismatched logits {logits.shape} and features {f.shape}")
    if logits.shape[1] + f.shape[1] != gen.input_dim:
        raise ValueError(
            f"generate_cmap: generator expects {gen.input_dim} inputs, "
            f"got {logits.shape[1]} + {f.shape[1]}"
        )
    raw = gen(ad.concat([logits, f], axis=1))
    return ad.add(ad.softmax(raw, axis=1), 1.0)


def features_and_bundle(models, x: np.ndarray, T: int, rng: np.random.Generator):
    """Deterministic features plus the full certainty bundle for inputs ``x``."""
    f_values = models.extractor(x, Mode.DETERMINISTIC).data
    f = Tensor(f_values, requires_grad=True)
    probs_mc, entropy_u = mc_entropy(f, models.classifier, T, rng)
    cmap_t = certainty_map(f, entropy_u)
    logits = models.classifier(ad.detach(f), Mode.DETERMINISTIC)
    cmap_g = generate_cmap(models.generator, logits, ad.detach(f))
    bundle = CertaintyBundle(probs_mc, entropy_u.data.copy(), cmap_t.data, cmap_g.data)
    return f_values, bundle


def bundle_csv(bundle: CertaintyBundle, domains, sample_ids=None) -> str:
    n, d = bundle.cmap_target.shape
    if sample_ids is None:
        sample_ids = range(n)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["sample_id", "domain", "entropy_u"]
        + [f"ct{j}" for j in range(d)]
        + [f"cg{j}" for j in range(d)]
    )
    for i, sid in enumerate(sample_ids):
        w.writerow(
            [sid, domains[i], _fmt(bundle.entropy_u[i])]
            + [_fmt(v) for v in bundle.cmap_target[i]]
            + [_fmt(v) for v in bundle.cmap_generated[i]]
        )
    return buf.getvalue()


def write_bundle_csv(path: str, bundle: CertaintyBundle, domains, sample_ids=None) -> None:
    atomic_write_text(path, bundle_csv(bundle, domains, sample_ids))


def _fmt(v) -> str:
    return format(float(v), ".17g")
