"""Loss stack and alternating adversarial training over intra-site pairs.

Each training sample is a (site, subject, slice) triple with both contrasts:
the anatomy encoder sees x (the reconstruction targets), the contrast
encoder sees x' (a different slice of the same subject, matching contrast),
anatomy codes are randomly shuffled between the two contrasts before
decoding, and a one-class discriminator on anatomy codes pulls every site's
codes toward the reference site's distribution.
"""

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .networks import (HarmonizationModel, beta_encode, theta_encode, decode,
                       discriminator_logits)
from .optim import Adam
from .seeds import stream


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_good_epoch, history):
        super().__init__(message)
        self.last_good_epoch = last_good_epoch
        self.history = history


@dataclass
class TrainConfig:
    sites: list
    reference_site: str = None
    lambda_recon: float = 10.0
    lambda_perceptual: float = 0.1
    lambda_kl: float = 0.01
    lambda_beta_sim: float = 0.1
    lambda_adv: float = 0.02
    lr_generator: float = 1e-3
    lr_discriminator: float = 1e-4
    epochs: int = 30
    batch_per_site: int = 1
    temperature_start: float = 1.0
    temperature_end: float = 0.3
    seed: int = 0
    width: int = 16

    def __post_init__(self):
        if self.reference_site is None and self.sites:
            self.reference_site = self.sites[0]
        for name in ("lambda_recon", "lambda_perceptual", "lambda_kl",
                     "lambda_beta_sim", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lambda_kl <= 0:
            raise ValueError("lambda_kl must stay > 0: the bottleneck term "
                             "cannot be switched off")
        if self.temperature_end <= 0 or self.temperature_start <= 0:
            raise ValueError("temperatures must be > 0")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class LossReport:
    recon_l1: float
    perceptual: float
    kl: float
    beta_sim: float
    adv_generator: float
    adv_discriminator: float
    total: float
    step: int
    epoch: int = 0


@dataclass
class PairedBatch:
    """Per-site arrays: x1/x2 are the two contrasts of the same subject and
    slice; xp1/xp2 are a different slice of the same subject, per contrast."""

    sites: list
    x1: dict
    x2: dict
    xp1: dict
    xp2: dict
    subjects: dict = field(default_factory=dict)

    def stacked(self):
        order = list(self.sites)
        row_sites = []
        for s in order:
            row_sites += [s] * self.x1[s].shape[0]
        cat = lambda d: np.concatenate([d[s] for s in order], axis=0)
        return row_sites, cat(self.x1), cat(self.x2), cat(self.xp1), cat(self.xp2)


def kl_standard_normal(mean, logvar):
    """KL(N(mean, exp(logvar)) || N(0, I)), averaged over the batch axis.

    Closed form per element: 0.5 * (mean^2 + exp(logvar) - 1 - logvar).
    Accepts [D] vectors or [N, D] batches (Tensor or array); returns a
    scalar Tensor.
    """
    if not isinstance(mean, Tensor):
        mean = Tensor(np.asarray(mean, dtype=np.float64))
    if not isinstance(logvar, Tensor):
        logvar = Tensor(np.asarray(logvar, dtype=np.float64))
    if mean.data.shape != logvar.data.shape:
        raise ValueError("kl_standard_normal: mean/logvar shape mismatch")
    n = mean.data.shape[0] if mean.data.ndim == 2 else 1
    term = ad.sub(ad.add(ad.mul(mean, mean), ad.exp_(logvar)),
                  ad.add_const(logvar, 1.0))
    return ad.mul_const(ad.sum_all(term), 0.5 / n)


def shuffle_betas(beta_c1, beta_c2, rng):
    """Per-sample random swap of the two contrasts' anatomy codes.

    For each reconstruction target the code is picked independently from
    {beta_c1, beta_c2} with probability 1/2. Returns the code to decode for
    target contrast 1 and for target contrast 2.
    """
    a = beta_c1.channels if hasattr(beta_c1, "channels") else beta_c1
    b = beta_c2.channels if hasattr(beta_c2, "channels") else beta_c2
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"shuffle_betas: shape mismatch {a.data.shape} vs {b.data.shape}")
    n = a.data.shape[0]
    pick1 = rng.integers(0, 2, size=n).astype(np.float64)
    pick2 = rng.integers(0, 2, size=n).astype(np.float64)
    m1 = pick1[:, None, None, None]
    m2 = pick2[:, None, None, None]
    return ad.where_mask(m1, a, b), ad.where_mask(m2, a, b)


class FixedFeatures:
    """A frozen, randomly initialized 3-layer conv stack (never trained)."""

    SEED = 0x8A17

    def __init__(self, seed=SEED, width=8):
        rng = np.random.default_rng(seed)
        shapes = [(width, 1), (width, width), (width, width)]
        self.kernels = [Tensor(rng.standard_normal((o, i, 3, 3))
                               * np.sqrt(2.0 / (i * 9))) for o, i in shapes]
        self.biases = [Tensor(np.zeros(o)) for o, _ in shapes]

    def maps(self, x):
        feats = []
        h = x
        for k, b in zip(self.kernels, self.biases):
            h = ad.leaky_relu(ad.conv2d(h, k, b, stride=1, pad=1), 0.2)
            feats.append(h)
        return feats


_default_features = None


def _features():
    global _default_features
    if _default_features is None:
        _default_features = FixedFeatures()
    return _default_features


def perceptual_proxy(x, y, feature_params=None):
    """L1 distance between fixed-random-feature maps of two images,
    averaged over the 3 layers. Zero iff the feature maps agree."""
    feats = feature_params or _features()
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=np.float64))
    if x.data.shape != y.data.shape:
        raise ValueError("perceptual_proxy: shape mismatch")
    fx = feats.maps(x)
    fy = feats.maps(y)
    acc = None
    for a, b in zip(fx, fy):
        term = ad.mean_abs(a, b)
        acc = term if acc is None else ad.add(acc, term)
    return ad.mul_const(acc, 1.0 / len(fx))


def _finite_or_raise(name, value):
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {name} loss term ({value})")
    return value


def compute_losses(model, batch, config, temperature, rng,
                   feature_params=None, beta_out=None):
    """Generator-side loss stack for one paired batch.

    Returns (LossReport, total loss Tensor); the caller runs backward and
    the optimizer step. The adversarial term pushes non-reference-site
    anatomy codes toward the reference-site classification. When
    ``beta_out`` is a dict it receives the per-site anatomy code values,
    letting the discriminator update share this forward pass.
    """
    row_sites, x1, x2, xp1, xp2 = batch.stacked()
    n = x1.shape[0]
    t_x1, t_x2 = Tensor(x1), Tensor(x2)

    beta1 = beta_encode(model, Tensor(x1), temperature, rng)
    beta2 = beta_encode(model, Tensor(x2), temperature, rng)
    th1 = theta_encode(model, Tensor(xp1), rng)
    th2 = theta_encode(model, Tensor(xp2), rng)
    bt1, bt2 = shuffle_betas(beta1, beta2, rng)
    recon1 = decode(model, bt1, th1.sample)
    recon2 = decode(model, bt2, th2.sample)

    recon = ad.add(ad.mean_abs(recon1, t_x1), ad.mean_abs(recon2, t_x2))
    perc = ad.add(perceptual_proxy(recon1, t_x1, feature_params),
                  perceptual_proxy(recon2, t_x2, feature_params))
    kl = ad.add(kl_standard_normal(th1.mean, th1.logvar),
                kl_standard_normal(th2.mean, th2.logvar))
    bsim = ad.mean_abs(beta1.channels, beta2.channels)

    nonref = np.array([s != config.reference_site for s in row_sites],
                      dtype=np.float64).reshape(n, 1)
    ones = np.ones((n, 1))
    adv = ad.add(
        ad.bce_with_logits(discriminator_logits(model, beta1), ones, nonref),
        ad.bce_with_logits(discriminator_logits(model, beta2), ones, nonref))

    if beta_out is not None:
        sites_arr = np.array(row_sites)
        both = np.concatenate([beta1.channels.data, beta2.channels.data], axis=0)
        both_sites = np.concatenate([sites_arr, sites_arr])
        for s in batch.sites:
            beta_out[s] = both[both_sites == s]

    total = ad.add(
        ad.add(ad.add(ad.mul_const(recon, config.lambda_recon),
                      ad.mul_const(perc, config.lambda_perceptual)),
               ad.add(ad.mul_const(kl, config.lambda_kl),
                      ad.mul_const(bsim, config.lambda_beta_sim))),
        ad.mul_const(adv, config.lambda_adv))

    report = LossReport(
        recon_l1=_finite_or_raise("reconstruction", recon.item()),
        perceptual=_finite_or_raise("perceptual", perc.item()),
        kl=_finite_or_raise("kl", kl.item()),
        beta_sim=_finite_or_raise("beta-similarity", bsim.item()),
        adv_generator=_finite_or_raise("adversarial-generator", adv.item()),
        adv_discriminator=0.0,
        total=_finite_or_raise("total", total.item()),
        step=model.step_count)
    return report, total


def discriminator_step(model, betas_by_site, reference_site, optimizer,
                       rng=None):
    """One binary cross-entropy update of the discriminator alone.

    Labels are 1 for reference-site codes and 0 otherwise. The anatomy codes
    are treated as constants, so encoder/decoder parameters are untouched by
    construction. With an rng, codes are augmented by random flips and
    circular shifts: at a handful of subjects per site the discriminator
    would otherwise memorize subject geometry instead of site statistics.
    """
    chunks, labels = [], []
    for site, channels in betas_by_site.items():
        arr = channels.data if isinstance(channels, Tensor) else np.asarray(channels)
        chunks.append(arr)
        labels.append(np.full((arr.shape[0], 1),
                              1.0 if site == reference_site else 0.0))
    batch = np.concatenate(chunks, axis=0)
    if rng is not None:
        batch = batch.copy()
        h, w = batch.shape[2], batch.shape[3]
        for i in range(batch.shape[0]):
            if rng.random() < 0.5:
                batch[i] = batch[i, :, ::-1]
            if rng.random() < 0.5:
                batch[i] = batch[i, :, :, ::-1]
            batch[i] = np.roll(batch[i],
                               (int(rng.integers(-h // 4, h // 4 + 1)),
                                int(rng.integers(-w // 4, w // 4 + 1))),
                               axis=(1, 2))
    stacked = Tensor(batch)
    targets = np.concatenate(labels, axis=0)
    logits = discriminator_logits(model, stacked)
    loss = ad.bce_with_logits(logits, targets)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


class PairLibrary:
    """Index of (site, subject, slice) triples over a dataset's train split."""

    def __init__(self, dataset, sites):
        self.sites = list(sites)
        self.images = {}
        self.triples = {s: [] for s in self.sites}
        self.slices = {}
        for rec in dataset.train:
            if rec.site_id not in self.triples:
                continue
            self.images[(rec.site_id, rec.subject_id, rec.slice_index,
                         rec.contrast_id)] = rec.pixels
            self.slices.setdefault((rec.site_id, rec.subject_id), set()).add(
                rec.slice_index)
        for (site, subj, k, c) in list(self.images):
            if c == 1 and (site, subj, k, 2) in self.images:
                self.triples[site].append((subj, k))
        for s in self.sites:
            self.triples[s].sort()
            if not self.triples[s]:
                raise ValueError(
                    f"dataset has no intra-site contrast pairs for site {s}")
            if all(len(self.slices[(s, subj)]) < 2
                   for subj, _ in self.triples[s]):
                raise ValueError(
                    f"site {s} has no multi-slice subject for x' sampling")

    def steps_per_epoch(self, batch_per_site):
        n = max(len(t) for t in self.triples.values())
        return (n + batch_per_site - 1) // batch_per_site

    def _other_slice(self, site, subj, k, rng):
        options = sorted(self.slices[(site, subj)] - {k})
        if not options:
            return k
        return options[rng.integers(0, len(options))]

    def epoch_batches(self, rng, batch_per_site):
        order = {s: rng.permutation(len(self.triples[s]))
                 for s in self.sites}
        steps = self.steps_per_epoch(batch_per_site)
        for step in range(steps):
            x1, x2, xp1, xp2, subjects = {}, {}, {}, {}, {}
            for s in self.sites:
                rows1, rows2, rowsp1, rowsp2, subj_ids = [], [], [], [], []
                n = len(self.triples[s])
                for b in range(batch_per_site):
                    subj, k = self.triples[s][order[s][(step * batch_per_site + b) % n]]
                    kp = self._other_slice(s, subj, k, rng)
                    rows1.append(self.images[(s, subj, k, 1)])
                    rows2.append(self.images[(s, subj, k, 2)])
                    rowsp1.append(self.images[(s, subj, kp, 1)])
                    rowsp2.append(self.images[(s, subj, kp, 2)])
                    subj_ids.append((subj, k))
                x1[s] = np.stack(rows1)[:, None]
                x2[s] = np.stack(rows2)[:, None]
                xp1[s] = np.stack(rowsp1)[:, None]
                xp2[s] = np.stack(rowsp2)[:, None]
                subjects[s] = subj_ids
            yield PairedBatch(sites=self.sites, x1=x1, x2=x2, xp1=xp1,
                              xp2=xp2, subjects=subjects)


def temperature_at(step, total_steps, start, end):
    if total_steps <= 1:
        return end
    frac = min(step / (total_steps - 1), 1.0)
    return start * (end / start) ** frac


@dataclass
class TrainResult:
    model: HarmonizationModel
    epoch_log: list
    step_log: list


def _epoch_summary(reports, epoch):
    k = len(reports)
    return LossReport(
        recon_l1=sum(r.recon_l1 for r in reports) / k,
        perceptual=sum(r.perceptual for r in reports) / k,
        kl=sum(r.kl for r in reports) / k,
        beta_sim=sum(r.beta_sim for r in reports) / k,
        adv_generator=sum(r.adv_generator for r in reports) / k,
        adv_discriminator=sum(r.adv_discriminator for r in reports) / k,
        total=sum(r.total for r in reports) / k,
        step=reports[-1].step, epoch=epoch)


def train(dataset, config, feature_params=None):
    """Run the alternating schedule: one discriminator update then one
    generator update per batch, Gumbel temperature annealed geometrically.

    Returns a TrainResult with the model, one LossReport per epoch, and the
    full per-step log. Deterministic given config.seed.
    """
    image_size = dataset.train[0].pixels.shape[0] if dataset.train else 64
    model = HarmonizationModel(seed=int(stream(config.seed, "model")
                                        .integers(0, 2 ** 31)),
                               width=config.width, image_size=image_size)
    lib = PairLibrary(dataset, config.sites)
    gen_opt = Adam(model.generator_parameters(), lr=config.lr_generator)
    disc_opt = Adam(model.discriminator_parameters(), lr=config.lr_discriminator)
    rng = stream(config.seed, "training")

    steps_per_epoch = lib.steps_per_epoch(config.batch_per_site)
    total_steps = max(config.epochs * steps_per_epoch, 1)
    epoch_log, step_log = [], []

    for epoch in range(config.epochs):
        epoch_reports = []
        for batch in lib.epoch_batches(rng, config.batch_per_site):
            temp = temperature_at(model.step_count, total_steps,
                                  config.temperature_start,
                                  config.temperature_end)
            try:
                # one shared forward: the generator losses record the graph
                # and hand the detached anatomy codes to the discriminator,
                # whose update lands before the generator's (1:1 schedule)
                gen_opt.zero_grad()
                betas_by_site = {}
                report, total = compute_losses(model, batch, config, temp,
                                               rng, feature_params,
                                               beta_out=betas_by_site)
                dloss = discriminator_step(model, betas_by_site,
                                           config.reference_site, disc_opt,
                                           rng=rng)
                if not np.isfinite(dloss):
                    raise FloatingPointError("non-finite discriminator loss")
                total.backward()
                gen_opt.step()
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"diverged at epoch {epoch}: {exc}",
                    last_good_epoch=epoch - 1, history=epoch_log) from exc
            report.adv_discriminator = dloss
            report.epoch = epoch
            model.step_count += 1
            report.step = model.step_count
            epoch_reports.append(report)
            step_log.append(report)
        epoch_log.append(_epoch_summary(epoch_reports, epoch))
    return TrainResult(model=model, epoch_log=epoch_log, step_log=step_log)


LOSS_CSV_HEADER = ["step", "epoch", "recon_l1", "perceptual", "kl",
                   "beta_sim", "adv_generator", "adv_discriminator", "total"]


def loss_log_csv(reports):
    lines = [",".join(LOSS_CSV_HEADER)]
    for r in reports:
        lines.append(",".join([str(r.step), str(r.epoch)] +
                              [f"{v:.10g}" for v in
                               (r.recon_l1, r.perceptual, r.kl, r.beta_sim,
                                r.adv_generator, r.adv_discriminator, r.total)]))
    return "\n".join(lines) + "\n"
