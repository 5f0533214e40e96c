"""Loss terms and the joint adversarial objective.

Each discriminator sees its input through a gradient-reversal node scaled by
the effective trade-off weight.  Minimising the single returned scalar then
trains every discriminator to separate the domains while the extractor,
classifier and generator receive the reversed (confusing) gradient.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import PROB_FLOOR, Tensor
from .config import TrainConfig
from .nn import Models, Mode
from .uncertainty import certainty_map, generate_cmap, mc_entropy


@dataclass
class LossReport:
    l_c: float = 0.0
    l_g: float = 0.0
    l_df: float = 0.0
    l_dp: float = 0.0
    l_dc: float = 0.0
    j_total: float = 0.0
    acc_df: float | None = None
    acc_dp: float | None = None
    acc_dc: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in (self.l_c, self.l_g, self.l_df, self.l_dp, self.l_dc, self.j_total))


@dataclass
class Batch:
    x_source: np.ndarray
    y_source: np.ndarray
    x_target: np.ndarray


def classifier_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits`` against integer ``labels``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"classifier_loss: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k or not np.all(labels == np.round(labels))):
        raise ValueError(f"classifier_loss: labels must be integers in [0, {k})")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels.astype(int)] = 1.0
    logp = ad.log(ad.clip(ad.softmax(logits, axis=1), PROB_FLOOR, 1.0))
    return ad.negate(ad.mean(ad.sum(ad.multiply(logp, onehot), axis=1)))


def domain_bce(d_out: Tensor, domain_labels) -> Tensor:
    """Mean binary cross-entropy; ``domain_labels`` is 1 for source, 0 for target."""
    d = np.asarray(domain_labels, dtype=np.float64).reshape(d_out.shape)
    p = ad.clip(d_out, PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos = ad.multiply(ad.log(p), d)
    neg = ad.multiply(ad.log(ad.subtract(1.0, p)), 1.0 - d)
    return ad.negate(ad.mean(ad.add(pos, neg)))


def generator_loss(cmap_generated: Tensor, cmap_target: Tensor) -> Tensor:
    """Mean squared difference over batch and feature dimension."""
    if cmap_target.node is not None:
        raise ValueError("generator_loss: target map must be detached (no graph)")
    if cmap_generated.shape != cmap_target.shape:
        raise ValueError(
            f"generator_loss: shape {cmap_generated.shape} vs target {cmap_target.shape}"
        )
    return ad.mean(ad.square(ad.subtract(cmap_generated, cmap_target)))


def _accuracy(d_out: Tensor, domain: np.ndarray) -> float:
    return float(np.mean((d_out.data.ravel() > 0.5) == (domain > 0.5)))


def total_objective(
    batch: Batch,
    models: Models,
    config: TrainConfig,
    rng: np.random.Generator,
    ramp: float = 1.0,
):
    """Forward pass of all active terms.

    Returns ``(objective, report, parts)``.  ``objective`` is the scalar to
    minimise; ``report.j_total`` is ``l_c + l_g + sum(lambda * l_d)`` with the
    ramped lambdas.  ``parts`` holds the intermediate tensors for inspection.
    """
    ns, nt = len(batch.x_source), len(batch.x_target)
    active = (config.feature_adapt, config.prob_adapt, config.cmap_adapt)
    if ns == 0 and not any(active):
        raise ValueError("total_objective: no source labels and no adaptation term active")
    if any(active) and nt == 0:
        raise ValueError("total_objective: adaptation needs target samples")

    lam_f = config.lambda_f * ramp
    lam_p = config.lambda_p * ramp
    lam_c = config.lambda_c * ramp

    # target rows always share the forward pass so dropout masks do not depend on the regime
    x = np.concatenate([batch.x_source, batch.x_target], axis=0)
    domain = np.concatenate([np.ones(ns), np.zeros(len(x) - ns)])

    f = models.extractor(x, Mode.STOCHASTIC, rng)
    logits = models.classifier(f, Mode.STOCHASTIC, rng)
    report = LossReport()
    parts = {"features": f, "logits": logits}
    terms = []

    if ns:
        l_c = classifier_loss(ad.slice_rows(logits, 0, ns), batch.y_source)
        report.l_c = l_c.item()
        terms.append(l_c)
        parts["l_c"] = l_c

    if config.feature_adapt:
        out = models.disc_feature(ad.grad_reverse(f, lam_f))
        l_df = domain_bce(out, domain)
        report.l_df, report.acc_df = l_df.item(), _accuracy(out, domain)
        terms.append(l_df)
        parts["l_df"] = l_df

    if config.prob_adapt:
        probs = ad.softmax(logits, axis=1)
        out = models.disc_prob(ad.grad_reverse(probs, lam_p))
        l_dp = domain_bce(out, domain)
        report.l_dp, report.acc_dp = l_dp.item(), _accuracy(out, domain)
        terms.append(l_dp)
        parts["l_dp"] = l_dp

    if config.cmap_adapt:
        f_probe = Tensor(f.data, requires_grad=True)
        _, entropy_u = mc_entropy(f_probe, models.classifier, config.mc_samples, rng)
        cmap_t = certainty_map(f_probe, entropy_u)
        # generator fit sees detached inputs: its loss reaches only G
        cmap_fit = generate_cmap(models.generator, ad.detach(logits), ad.detach(f))
        l_g = generator_loss(cmap_fit, cmap_t)
        cmap_g = generate_cmap(models.generator, logits, f)
        out = models.disc_cmap(ad.grad_reverse(ad.concat([cmap_g, f], axis=1), lam_c))
        l_dc = domain_bce(out, domain)
        report.l_g = l_g.item()
        report.l_dc, report.acc_dc = l_dc.item(), _accuracy(out, domain)
        terms.extend([l_g, l_dc])
        parts.update(l_g=l_g, l_dc=l_dc, cmap_target=cmap_t, cmap_generated=cmap_g,
                     entropy_u=entropy_u)

    report.j_total = report.l_c + report.l_g + lam_f * report.l_df + lam_p * report.l_dp + lam_c * report.l_dc
    objective = terms[0]
    for t in terms[1:]:
        objective = ad.add(objective, t)
    return objective, report, parts
