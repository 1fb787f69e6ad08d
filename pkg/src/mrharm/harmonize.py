"""Inference-time harmonization and unsupervised adaptation to unseen sites.

Harmonization recombines latents: anatomy from the source image, contrast
from the target site's mean code over its test images. Adaptation fine-tunes
only the tails of the two encoders on new-site data with the decoder and
discriminator frozen; the frozen one-class discriminator supplies the only
cross-site training signal.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .networks import beta_encode, theta_encode, decode
from .optim import Adam
from .phantom import ImageSlice, ContrastMismatchError
from .seeds import stream
from .training import (TrainConfig, PairLibrary, compute_losses,
                       TrainingDiverged, _epoch_summary)


@dataclass
class SiteThetaProfile:
    """Per-(site, contrast) aggregate of contrast codes over test images."""

    site_id: str
    contrast_id: int
    mean: np.ndarray
    thetas: np.ndarray

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=np.float64))
        self.mean = np.asarray(self.mean, dtype=np.float64)


@dataclass
class AdaptationConfig:
    """Fine-tuning setup: which encoder tails move, for how long, and the
    loss weights (adversarial weight doubled by default, since the frozen
    discriminator is the only cross-site pull)."""

    k_last: int = 2
    epochs: int = 10
    lr: float = 1e-3
    lambda_recon: float = 10.0
    lambda_perceptual: float = 0.1
    lambda_kl: float = 0.01
    lambda_beta_sim: float = 0.1
    lambda_adv: float = 0.04
    batch_per_site: int = 1
    temperature: float = 0.3
    seed: int = 0


def site_theta(model, images, site_id=None, contrast_id=None):
    """Collect the contrast-code posterior means of a set of images and
    average them into the site's profile."""
    if not images:
        raise ValueError("site_theta: no images given")
    first = images[0]
    if site_id is None and hasattr(first, "site_id"):
        site_id = first.site_id
    if contrast_id is None and hasattr(first, "contrast_id"):
        contrast_id = first.contrast_id
    arr = np.stack([im.pixels if hasattr(im, "pixels") else np.asarray(im)
                    for im in images])[:, None]
    with ad.no_grad():
        code = theta_encode(model, Tensor(arr))
    thetas = code.mean.data.copy()
    return SiteThetaProfile(site_id=site_id, contrast_id=contrast_id,
                            mean=thetas.mean(axis=0), thetas=thetas)


def harmonize(model, image, target, allow_untrained=False):
    """Re-render one image with the target site's contrast.

    Anatomy comes from the hard (argmax one-hot) code of the input; contrast
    is the target profile's mean code. The output keeps the source subject
    and slice identifiers but carries the target's site id.
    """
    if model.step_count == 0 and not allow_untrained:
        raise ValueError("harmonize: model has no training steps; pass "
                         "allow_untrained=True to override")
    pixels = image.pixels if isinstance(image, ImageSlice) else np.asarray(image)
    with ad.no_grad():
        beta = beta_encode(model, pixels[None, None], hard=True)
        out = decode(model, beta, Tensor(target.mean[None, :]))
    result = out.data[0, 0]
    if isinstance(image, ImageSlice):
        return ImageSlice(pixels=result, site_id=target.site_id,
                          contrast_id=target.contrast_id,
                          subject_id=image.subject_id,
                          slice_index=image.slice_index,
                          traveling=image.traveling)
    return result


def _tail_parameters(model, k_last):
    """The trainable set for adaptation: the last ``k_last`` blocks of the
    anatomy encoder (head included) and of the contrast encoder's dense
    stack. Decoder and discriminator are excluded structurally."""
    tails = []
    for name, block in model.beta_encoder.blocks[-k_last:]:
        tails += [p for _, p in block.parameters()]
    dense_blocks = [b for n, b in model.theta_encoder.blocks if n.startswith("d")]
    for block in dense_blocks[-k_last:]:
        tails += [p for _, p in block.parameters()]
    return tails


def adapt_to_new_site(model, dataset, new_site_id, config, history_out=None):
    """Fine-tune the encoders' tails on new-site intra-site pairs only.

    The decoder and discriminator stay bitwise frozen; the generator-side
    loss stack (including the adversarial pull from the frozen one-class
    discriminator) trains the selected tail parameters. Returns an adapted
    copy; the input model is untouched.
    """
    contrasts = {r.contrast_id for r in dataset.train
                 if r.site_id == new_site_id}
    if contrasts != {1, 2}:
        raise ContrastMismatchError(
            f"new site {new_site_id} data must have both contrasts, "
            f"found {sorted(contrasts)}")
    adapted = model.clone()
    if config.epochs == 0:
        return adapted

    trainable = _tail_parameters(adapted, config.k_last)
    trainable_ids = {id(p) for p in trainable}
    frozen_flags = []
    for _, p in adapted.named_parameters():
        frozen_flags.append((p, p.requires_grad))
        if id(p) not in trainable_ids:
            p.requires_grad = False

    loss_cfg = TrainConfig(
        sites=[new_site_id], reference_site="__none__",
        lambda_recon=config.lambda_recon,
        lambda_perceptual=config.lambda_perceptual,
        lambda_kl=config.lambda_kl,
        lambda_beta_sim=config.lambda_beta_sim,
        lambda_adv=config.lambda_adv,
        epochs=config.epochs, batch_per_site=config.batch_per_site,
        seed=config.seed)

    lib = PairLibrary(dataset, [new_site_id])
    opt = Adam(trainable, lr=config.lr)
    rng = stream(config.seed, "adapt")
    log = []
    for epoch in range(config.epochs):
        reports = []
        for batch in lib.epoch_batches(rng, config.batch_per_site):
            opt.zero_grad()
            try:
                report, total = compute_losses(adapted, batch, loss_cfg,
                                               config.temperature, rng)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"adaptation diverged at epoch {epoch}: {exc}",
                    last_good_epoch=epoch - 1, history=log) from exc
            total.backward()
            opt.step()
            adapted.step_count += 1
            report.step = adapted.step_count
            report.epoch = epoch
            reports.append(report)
        log.append(_epoch_summary(reports, epoch))
    for p, flag in frozen_flags:
        p.requires_grad = flag
    if history_out is not None:
        history_out.extend(log)
    return adapted
