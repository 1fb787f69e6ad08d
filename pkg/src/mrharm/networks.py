"""The four shared networks: anatomy encoder, contrast encoder, decoder,
and the one-class anatomy discriminator.

One parameter set serves every site and contrast, so the checkpoint size is
independent of how many sites the model is trained on. The anatomy code is
a 4-channel map with the input's spatial extent, pushed to (relaxed) one-hot
by a Gumbel-softmax head; the contrast code is a 2-d Gaussian posterior.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEAK = 0.2
BETA_CHANNELS = 4
THETA_DIM = 2


class CheckpointError(ValueError):
    """Checkpoint file is missing, truncated, or self-inconsistent."""


def _he_conv(rng, c_out, c_in, k=3):
    w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / (c_in * k * k))
    return Tensor(w, requires_grad=True)


def _he_dense(rng, d_in, d_out):
    w = rng.standard_normal((d_in, d_out)) * np.sqrt(2.0 / d_in)
    return Tensor(w, requires_grad=True)


class Conv:
    def __init__(self, rng, c_in, c_out, stride=1, pad=1, k=3):
        self.w = _he_conv(rng, c_out, c_in, k)
        # small random bias: breaks the positive homogeneity a zero-bias
        # leaky-ReLU stack would otherwise have
        self.b = Tensor(rng.standard_normal(c_out) * 0.01, requires_grad=True)
        self.stride = stride
        self.pad = pad

    def __call__(self, x):
        return ad.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def parameters(self):
        return [("w", self.w), ("b", self.b)]


class DenseLayer:
    def __init__(self, rng, d_in, d_out):
        self.w = _he_dense(rng, d_in, d_out)
        self.b = Tensor(rng.standard_normal(d_out) * 0.01, requires_grad=True)

    def __call__(self, x):
        return ad.dense(x, self.w, self.b)

    def parameters(self):
        return [("w", self.w), ("b", self.b)]


class UNet:
    """Four stride-2 downsamplings, mirrored nearest-neighbor up path with
    skip concatenation, and a 1-conv head with no final activation.

    Downsampling convs use 4x4 kernels so the stride-2 geometry divides
    exactly and each stage halves the spatial extent. The head starts at a
    tenth of the He scale: for the anatomy encoder that keeps early logits
    near zero so Gumbel sampling explores all channels, and for the decoder
    it starts the output near its bias instead of amplified noise."""

    def __init__(self, rng, in_ch, out_ch, width, head_bias=0.0):
        w = width
        self.enc0 = Conv(rng, in_ch, w)
        self.down1 = Conv(rng, w, 2 * w, stride=2, k=4)
        self.down2 = Conv(rng, 2 * w, 4 * w, stride=2, k=4)
        self.down3 = Conv(rng, 4 * w, 8 * w, stride=2, k=4)
        self.down4 = Conv(rng, 8 * w, 8 * w, stride=2, k=4)
        self.up1 = Conv(rng, 16 * w, 8 * w)
        self.up2 = Conv(rng, 12 * w, 4 * w)
        self.up3 = Conv(rng, 6 * w, 2 * w)
        self.up4 = Conv(rng, 3 * w, w)
        self.head = Conv(rng, w, out_ch)
        self.head.w.data *= 0.1
        self.head.b.data[:] = head_bias
        self.blocks = [("enc0", self.enc0), ("down1", self.down1),
                       ("down2", self.down2), ("down3", self.down3),
                       ("down4", self.down4), ("up1", self.up1),
                       ("up2", self.up2), ("up3", self.up3),
                       ("up4", self.up4), ("head", self.head)]

    def __call__(self, x):
        e0 = ad.leaky_relu(self.enc0(x), LEAK)
        e1 = ad.leaky_relu(self.down1(e0), LEAK)
        e2 = ad.leaky_relu(self.down2(e1), LEAK)
        e3 = ad.leaky_relu(self.down3(e2), LEAK)
        bott = ad.leaky_relu(self.down4(e3), LEAK)
        u1 = ad.leaky_relu(self.up1(ad.upsample2x_concat(bott, e3)), LEAK)
        u2 = ad.leaky_relu(self.up2(ad.upsample2x_concat(u1, e2)), LEAK)
        u3 = ad.leaky_relu(self.up3(ad.upsample2x_concat(u2, e1)), LEAK)
        u4 = ad.leaky_relu(self.up4(ad.upsample2x_concat(u3, e0)), LEAK)
        return self.head(u4)

    def parameters(self):
        return [(f"{bn}.{pn}", p) for bn, blk in self.blocks
                for pn, p in blk.parameters()]


class ConvStack:
    """Four stride-2 convolutions followed by dense layers; used by both the
    contrast encoder (3 dense layers, globally pooled) and the discriminator
    (1 dense layer on the spatial grid).

    The contrast encoder pools its features over space before the dense
    stack: pooled activations are intensity statistics, nearly independent
    of slice geometry, which is exactly what a contrast code should see."""

    def __init__(self, rng, in_ch, width, image_size, dense_widths,
                 global_pool=False):
        w = width
        self.c1 = Conv(rng, in_ch, w, stride=2, k=4)
        self.c2 = Conv(rng, w, 2 * w, stride=2, k=4)
        self.c3 = Conv(rng, 2 * w, 4 * w, stride=2, k=4)
        self.c4 = Conv(rng, 4 * w, 8 * w, stride=2, k=4)
        self.global_pool = global_pool
        side = image_size // 16
        self.flat_dim = 8 * w if global_pool else 8 * w * side * side
        dims = [self.flat_dim] + list(dense_widths)
        self.dense = [DenseLayer(rng, dims[i], dims[i + 1])
                      for i in range(len(dims) - 1)]
        self.blocks = [("c1", self.c1), ("c2", self.c2), ("c3", self.c3),
                       ("c4", self.c4)]
        self.blocks += [(f"d{i + 1}", d) for i, d in enumerate(self.dense)]

    def __call__(self, x):
        h = ad.leaky_relu(self.c1(x), LEAK)
        h = ad.leaky_relu(self.c2(h), LEAK)
        h = ad.leaky_relu(self.c3(h), LEAK)
        h = ad.leaky_relu(self.c4(h), LEAK)
        if self.global_pool:
            h = ad.spatial_mean(h)
        else:
            h = ad.reshape(h, (x.data.shape[0], self.flat_dim))
        for d in self.dense[:-1]:
            h = ad.leaky_relu(d(h), LEAK)
        return self.dense[-1](h)

    def parameters(self):
        return [(f"{bn}.{pn}", p) for bn, blk in self.blocks
                for pn, p in blk.parameters()]


@dataclass
class BetaMap:
    """Spatial anatomy code: [N, 4, H, W], relaxed one-hot (training) or hard
    one-hot (inference)."""

    channels: Tensor
    site_id: str = None
    contrast_id: int = None
    hard: bool = False


@dataclass
class ThetaCode:
    """Contrast code: 2-d Gaussian posterior parameters plus one
    reparameterized draw (eps recorded)."""

    mean: Tensor
    logvar: Tensor
    sample: Tensor
    eps: np.ndarray


class HarmonizationModel:
    """The four networks plus training bookkeeping.

    ``width`` scales every channel count (default 16 gives the production
    stage widths 16/32/64/128); ``image_size`` fixes the dense-layer input
    of the convolutional stacks.
    """

    def __init__(self, seed=0, width=16, image_size=64):
        if image_size % 16:
            raise ValueError("image_size must be divisible by 16")
        self.width = width
        self.image_size = image_size
        self.seed = int(seed)
        self.step_count = 0
        rng = np.random.default_rng(seed)
        self.beta_encoder = UNet(rng, 1, BETA_CHANNELS, width)
        self.theta_encoder = ConvStack(
            rng, 1, width, image_size,
            dense_widths=(16 * width, 4 * width, 2 * THETA_DIM),
            global_pool=True)
        # start the posterior tight (sigma ~ 0.02): the reparameterization
        # noise must not drown the between-site contrast signal, which is
        # small in theta units until the encoder learns to amplify it
        self.theta_encoder.dense[-1].b.data[THETA_DIM:] = -8.0
        # head bias at the typical normalized foreground level
        self.decoder = UNet(rng, BETA_CHANNELS + THETA_DIM, 1, width,
                            head_bias=0.45)
        self.discriminator = ConvStack(
            rng, BETA_CHANNELS, width, image_size, dense_widths=(1,))

    def _components(self):
        return [("beta_enc", self.beta_encoder),
                ("theta_enc", self.theta_encoder),
                ("decoder", self.decoder),
                ("disc", self.discriminator)]

    def named_parameters(self):
        return [(f"{cn}.{pn}", p) for cn, comp in self._components()
                for pn, p in comp.parameters()]

    def generator_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("disc.")]

    def discriminator_parameters(self):
        return [p for n, p in self.named_parameters() if n.startswith("disc.")]

    def clone(self):
        other = HarmonizationModel(self.seed, self.width, self.image_size)
        for (_, a), (_, b) in zip(other.named_parameters(), self.named_parameters()):
            a.data = b.data.copy()
            a.requires_grad = True
        other.step_count = self.step_count
        return other


def _as_batch(images):
    """Coerce an array/ImageSlice/list thereof to a [N, 1, H, W] array."""
    if isinstance(images, Tensor):
        arr = images.data
    elif hasattr(images, "pixels"):
        arr = images.pixels
    elif isinstance(images, (list, tuple)):
        arr = np.stack([im.pixels if hasattr(im, "pixels") else np.asarray(im)
                        for im in images])
    else:
        arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ValueError(f"cannot interpret images of shape {arr.shape}")
    return arr


def hard_one_hot(logits_data):
    idx = logits_data.argmax(axis=1)
    hard = np.zeros_like(logits_data)
    np.put_along_axis(hard, idx[:, None], 1.0, axis=1)
    return hard


def beta_encode(model, images, temperature=1.0, rng=None, hard=False,
                site_id=None, contrast_id=None):
    """Extract the anatomy code from an image batch.

    Training mode samples a Gumbel-softmax relaxation (requires ``rng``);
    ``hard=True`` takes the argmax one-hot instead, which is the
    deterministic inference path.
    """
    x = images if isinstance(images, Tensor) else Tensor(_as_batch(images))
    h, w = x.data.shape[2], x.data.shape[3]
    if h % 16 or w % 16:
        raise ValueError(
            f"beta_encode: spatial dims {h}x{w} must be divisible by 16")
    logits = model.beta_encoder(x)
    if hard:
        channels = Tensor(hard_one_hot(logits.data))
    else:
        if rng is None:
            raise ValueError("beta_encode: soft mode needs an rng")
        channels = ad.gumbel_softmax(logits, temperature, rng)
    return BetaMap(channels=channels, site_id=site_id, contrast_id=contrast_id,
                   hard=hard)


def theta_encode(model, images, rng=None):
    """Posterior over the 2-d contrast code, plus one reparameterized draw.

    With no rng the draw collapses to the posterior mean (inference
    convention). Gradients flow to mean/logvar only; eps is a constant.
    """
    x = images if isinstance(images, Tensor) else Tensor(_as_batch(images))
    out = model.theta_encoder(x)
    mean = ad.narrow(out, 1, 0, THETA_DIM)
    logvar = ad.narrow(out, 1, THETA_DIM, THETA_DIM)
    if rng is None:
        eps = np.zeros(mean.data.shape)
    else:
        eps = rng.standard_normal(mean.data.shape)
    std = ad.exp_(ad.mul_const(logvar, 0.5))
    sample = ad.add(mean, ad.mul(std, Tensor(eps)))
    return ThetaCode(mean=mean, logvar=logvar, sample=sample, eps=eps)


def decode(model, beta, theta):
    """Synthesize an image from an anatomy map and a contrast code.

    The 2-d theta is broadcast to two constant spatial channels and
    concatenated onto the 4 anatomy channels at the decoder input only.
    """
    channels = beta.channels if isinstance(beta, BetaMap) else beta
    if not isinstance(channels, Tensor):
        channels = Tensor(channels)
    if not isinstance(theta, Tensor):
        theta = Tensor(np.asarray(theta, dtype=np.float64))
    n, _, h, w = channels.data.shape
    if theta.data.ndim == 1:
        theta = ad.reshape(theta, (1, theta.data.shape[0]))
    if theta.data.shape[0] != n:
        if theta.data.shape[0] == 1 and not theta.requires_grad:
            theta = Tensor(np.repeat(theta.data, n, axis=0))
        else:
            raise ValueError(
                f"decode: theta batch {theta.data.shape[0]} does not match "
                f"beta batch {n}")
    theta_map = ad.broadcast_spatial(theta, h, w)
    return model.decoder(ad.concat_channels([channels, theta_map]))


def discriminator_logits(model, beta):
    channels = beta.channels if isinstance(beta, BetaMap) else beta
    if not isinstance(channels, Tensor):
        channels = Tensor(channels)
    return model.discriminator(channels)


def discriminate_beta(model, beta):
    """Probability in (0, 1) that an anatomy code comes from the reference
    site (one-class decision)."""
    return ad.sigmoid(discriminator_logits(model, beta))


# ---------------------------------------------------------------------------
# checkpoint container: versioned binary, named float64 blocks, json metadata

_MAGIC = b"MRHC"
_VERSION = 1


def save_checkpoint(path, model, metadata=None):
    meta = dict(metadata or {})
    meta["arch"] = {"width": model.width, "image_size": model.image_size,
                    "seed": model.seed, "step_count": model.step_count}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    params = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HI", _VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}q", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild a model (bitwise identical parameters) plus its metadata."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if raw[:4] != _MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint")
        version, meta_len = struct.unpack_from("<HI", raw, 4)
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 10
        meta = json.loads(raw[off:off + meta_len].decode())
        off += meta_len
        (n_params,) = struct.unpack_from("<I", raw, off)
        off += 4
        arch = meta.pop("arch")
        model = HarmonizationModel(seed=arch["seed"], width=arch["width"],
                                   image_size=arch["image_size"])
        model.step_count = arch.get("step_count", 0)
        expected = dict(model.named_parameters())
        seen = set()
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}q", raw, off)
            off += 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            block = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
            off += 8 * count
            if name not in expected:
                raise CheckpointError(f"{path}: unknown parameter {name!r}")
            if expected[name].data.shape != tuple(shape):
                raise CheckpointError(
                    f"{path}: parameter {name!r} has shape {tuple(shape)}, "
                    f"model expects {expected[name].data.shape}")
            expected[name].data = block.reshape(shape).astype(np.float64)
            seen.add(name)
        if seen != set(expected):
            raise CheckpointError(f"{path}: missing parameters "
                                  f"{sorted(set(expected) - seen)[:3]}...")
    except CheckpointError:
        raise
    except (struct.error, ValueError, IndexError, KeyError,
            UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return model, meta
