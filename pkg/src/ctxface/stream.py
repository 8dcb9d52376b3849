"""VAE-GAN reconstruction stream.

One class serves both the face stream (3-channel crops) and the context
stream (1-channel Mel patches). Encoder and decoder use residual skips at
every resolution; the discriminator doubles as the feature extractor for the
reconstruction loss.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, DimensionError, NumericError
from .latent import GaussianLatent, kl_to_standard_normal, reparameterize

D_EPS = 1e-6


@dataclass
class StreamConfig:
    input_channels: int = 3
    input_size: int = 128
    latent_dim: int = 512
    encoder_depth: int = 16
    decoder_depth: int = 16
    discriminator_depth: int | None = None  # None: one conv per resolution plus two dense layers
    feature_layer: int | None = None  # None: penultimate discriminator layer
    beta: float = 1e-5
    learning_rate: float = 3e-5
    discriminator_lr_scale: float = 1.0
    # "literal": D descends the GAN loss itself. "bce": D descends the bounded
    # cross-entropy with the same targets (inputs -> 0, fakes -> 1), which has a
    # fixed point; the literal objective keeps pushing correct logits outward.
    discriminator_objective: str = "bce"
    # Decoder descends feature - w * gan. At w = 1 the adversarial gradient swamps
    # the feature term on small synthetic sets and the decoder never learns to
    # reconstruct; the discriminator's own objective is unaffected.
    decoder_gan_weight: float = 1.0
    weight_decay: float = 0.01
    base_channels: int = 32
    max_channels: int = 256
    hidden_dim: int = 512
    hflip: bool = True

    def __post_init__(self):
        if self.discriminator_objective not in ("literal", "bce"):
            raise ConfigurationError(f"discriminator_objective must be 'literal' or 'bce', got {self.discriminator_objective!r}")
        if not self.discriminator_lr_scale > 0:
            raise ConfigurationError("discriminator_lr_scale must be positive")
        if not (math.isfinite(self.decoder_gan_weight) and self.decoder_gan_weight >= 0):
            raise ConfigurationError("decoder_gan_weight must be finite and >= 0")
        if self.latent_dim <= 0:
            raise ConfigurationError("latent_dim must be positive")
        if self.input_size < 4 or self.input_size & (self.input_size - 1):
            raise ConfigurationError(f"input_size must be a power of two >= 4, got {self.input_size}")
        n = self.n_stages
        if self.encoder_depth < 4 + 2 * n:
            raise ConfigurationError(f"encoder_depth must be >= {4 + 2 * n} for input_size {self.input_size}")
        if self.decoder_depth < 3 + 2 * n:
            raise ConfigurationError(f"decoder_depth must be >= {3 + 2 * n} for input_size {self.input_size}")
        if self.disc_depth < n + 3:
            raise ConfigurationError(f"discriminator_depth must be >= {n + 3}")
        if not 0 <= self.feature_index < self.disc_depth - 1:
            raise ConfigurationError(
                f"feature_layer must lie in [0, {self.disc_depth - 1}), got {self.feature_layer}"
            )

    @property
    def disc_depth(self) -> int:
        return self.n_stages + 3 if self.discriminator_depth is None else self.discriminator_depth

    @property
    def feature_index(self) -> int:
        return self.disc_depth - 2 if self.feature_layer is None else self.feature_layer

    @property
    def n_stages(self) -> int:
        return int(math.log2(self.input_size // 4))

    def channels(self, stage: int) -> int:
        return min(self.base_channels * 2**stage, self.max_channels)

    @classmethod
    def face(cls, **kw) -> "StreamConfig":
        return cls(input_channels=3, **kw)

    @classmethod
    def context(cls, **kw) -> "StreamConfig":
        kw.setdefault("hflip", False)
        return cls(input_channels=1, **kw)


def _act(x):
    return F.leaky_relu(x, 0.2)


def _init_weights(module: nn.Module):
    # Variance-preserving init; torch's default shrinks activations layer by
    # layer, which leaves a deep encoder's posterior mean nearly input-independent.
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=0.2, nonlinearity="leaky_relu")
            nn.init.zeros_(m.bias)
    for m in module.modules():
        if isinstance(m, ResidualConv):
            m.conv.weight.data.mul_(0.5)
        if isinstance(m, Encoder):
            m.head.weight.data.mul_(0.1)  # posterior starts close to the prior
        if isinstance(m, Decoder):
            m.out.weight.data.mul_(0.1)  # start near mid-grey instead of a saturated tanh


class ResidualConv(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + _act(self.conv(x))


class Encoder(nn.Module):
    """Conv trunk -> two dense layers -> (mean, log-variance) head.

    ``trunk`` stops before the last two layers so those can be fine-tuned
    on their own while the rest stays frozen.
    """

    n_tail = 2

    def __init__(self, cfg: StreamConfig):
        super().__init__()
        n = cfg.n_stages
        self.stem = nn.Conv2d(cfg.input_channels, cfg.channels(0), 3, padding=1)
        self.down = nn.ModuleList()
        self.res = nn.ModuleList()
        for s in range(n):
            self.down.append(nn.Conv2d(cfg.channels(s), cfg.channels(s + 1), 4, stride=2, padding=1))
            self.res.append(ResidualConv(cfg.channels(s + 1)))
        self.bottleneck = nn.ModuleList(
            ResidualConv(cfg.channels(n)) for _ in range(cfg.encoder_depth - 4 - 2 * n)
        )
        flat = cfg.channels(n) * 16
        self.fc_hidden = nn.Linear(flat, cfg.hidden_dim)
        self.fc_hidden2 = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.head = nn.Linear(cfg.hidden_dim, 2 * cfg.latent_dim)

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        h = _act(self.stem(x))
        for down, res in zip(self.down, self.res):
            h = res(_act(down(h)))
        for block in self.bottleneck:
            h = block(h)
        return _act(self.fc_hidden(h.flatten(1)))

    def tail(self, h: torch.Tensor) -> GaussianLatent:
        h = _act(self.fc_hidden2(h))
        mean, logvar = self.head(h).chunk(2, dim=-1)
        return GaussianLatent.create(mean, logvar)

    def tail_parameters(self):
        return [*self.fc_hidden2.parameters(), *self.head.parameters()]

    def forward(self, x):
        return self.tail(self.trunk(x))


class Decoder(nn.Module):
    def __init__(self, cfg: StreamConfig):
        super().__init__()
        n = cfg.n_stages
        self.bottom_ch = cfg.channels(n)
        self.fc_in = nn.Linear(cfg.latent_dim, cfg.hidden_dim)
        self.fc_map = nn.Linear(cfg.hidden_dim, self.bottom_ch * 16)
        self.bottleneck = nn.ModuleList(ResidualConv(self.bottom_ch) for _ in range(cfg.decoder_depth - 3 - 2 * n))
        self.up = nn.ModuleList()
        self.res = nn.ModuleList()
        for s in reversed(range(n)):
            self.up.append(nn.Conv2d(cfg.channels(s + 1), cfg.channels(s), 3, padding=1))
            self.res.append(ResidualConv(cfg.channels(s)))
        self.out = nn.Conv2d(cfg.channels(0), cfg.input_channels, 3, padding=1)

    def forward(self, z):
        h = _act(self.fc_in(z))
        h = _act(self.fc_map(h)).view(-1, self.bottom_ch, 4, 4)
        for block in self.bottleneck:
            h = block(h)
        for up, res in zip(self.up, self.res):
            h = res(_act(up(F.interpolate(h, scale_factor=2, mode="nearest"))))
        return torch.tanh(self.out(h))


class Discriminator(nn.Module):
    def __init__(self, cfg: StreamConfig):
        super().__init__()
        n = cfg.n_stages
        convs = [nn.Conv2d(cfg.input_channels, cfg.channels(0), 3, padding=1)]
        for s in range(n):
            convs.append(nn.Conv2d(cfg.channels(s), cfg.channels(s + 1), 4, stride=2, padding=1))
        for _ in range(cfg.disc_depth - n - 3):
            convs.append(nn.Conv2d(cfg.channels(n), cfg.channels(n), 3, padding=1))
        self.convs = nn.ModuleList(convs)
        self.fc_hidden = nn.Linear(cfg.channels(n) * 16, cfg.hidden_dim)
        self.fc_out = nn.Linear(cfg.hidden_dim, 1)

    @property
    def depth(self) -> int:
        return len(self.convs) + 2

    def features(self, x: torch.Tensor, layer: int) -> torch.Tensor:
        """Activation after discriminator layer ``layer`` (0-based)."""
        h = x
        for i, conv in enumerate(self.convs):
            h = _act(conv(h))
            if i == layer:
                return h
        return _act(self.fc_hidden(h.flatten(1)))

    def logit(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x, len(self.convs))
        return self.fc_out(h).squeeze(-1)

    def forward(self, x):
        return torch.sigmoid(self.logit(x))


def _count_layers(module: nn.Module) -> int:
    return sum(isinstance(m, (nn.Conv2d, nn.Linear)) for m in module.modules())


@dataclass
class StreamLosses:
    prior: torch.Tensor
    feature: torch.Tensor
    gan: torch.Tensor
    discriminator: torch.Tensor | None = None  # what D descends; None means gan

    @property
    def discriminator_objective(self) -> torch.Tensor:
        return self.gan if self.discriminator is None else self.discriminator

    def as_floats(self) -> dict[str, float]:
        return {"prior": self.prior.item(), "feature": self.feature.item(), "gan": self.gan.item()}


class VAEGANStream(nn.Module):
    def __init__(self, config: StreamConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)
        self.discriminator = Discriminator(config)
        _init_weights(self)

    def layer_counts(self) -> dict[str, int]:
        return {
            "encoder": _count_layers(self.encoder),
            "decoder": _count_layers(self.decoder),
            "discriminator": _count_layers(self.discriminator),
        }

    def _check_images(self, x: torch.Tensor) -> torch.Tensor:
        c, s = self.config.input_channels, self.config.input_size
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1:] != (c, s, s):
            raise DimensionError(f"expected (*, {c}, {s}, {s}) images, got {tuple(x.shape)}")
        return x

    def encode(self, x: torch.Tensor) -> GaussianLatent:
        single = x.dim() == 3
        lat = self.encoder(self._check_images(x))
        return lat[0] if single else lat

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.config.latent_dim:
            raise DimensionError(f"latent length {z.shape[-1]} != {self.config.latent_dim}")
        single = z.dim() == 1
        out = self.decoder(z.reshape(-1, self.config.latent_dim))
        return out[0] if single else out

    def reconstruct(self, x: torch.Tensor, noise: torch.Tensor | None = None) -> torch.Tensor:
        """Decode the posterior mean, or a reparameterized sample when ``noise`` is given."""
        lat = self.encode(x)
        z = lat.mean if noise is None else reparameterize(lat, noise)
        return self.decode(z)

    def discriminator_feature_loss(self, x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
        if x.shape != x_hat.shape:
            raise DimensionError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
        layer = self.config.feature_index
        f_x = self.discriminator.features(self._check_images(x), layer)
        f_hat = self.discriminator.features(self._check_images(x_hat), layer)
        return F.mse_loss(f_hat, f_x)

    def gan_loss(self, x: torch.Tensor, x_recon: torch.Tensor, x_noise: torch.Tensor) -> torch.Tensor:
        """log D(x) + log(1 - D(x_recon)) + log(1 - D(x_noise)), batch-averaged."""
        if not (x.shape == x_recon.shape == x_noise.shape):
            raise DimensionError("gan_loss inputs must share one shape")
        d = self.discriminator
        return gan_objective(
            d(self._check_images(x)), d(self._check_images(x_recon)), d(self._check_images(x_noise))
        )

    def compute_losses(self, x: torch.Tensor, generator: torch.Generator) -> StreamLosses:
        """All three losses from one forward pass (sampled z for the reconstruction)."""
        x = self._check_images(x)
        lat = self.encoder(x)
        eps = torch.randn(lat.mean.shape, generator=generator, dtype=lat.mean.dtype)
        z_prior = torch.randn(lat.mean.shape, generator=generator, dtype=lat.mean.dtype)
        x_recon = self.decoder(reparameterize(lat, eps))
        x_noise = self.decoder(z_prior)
        prior = kl_to_standard_normal(lat).mean()
        feature = self.discriminator_feature_loss(x, x_recon)
        gan = self.gan_loss(x, x_recon, x_noise)
        disc = None
        if self.config.discriminator_objective == "bce":
            d = self.discriminator
            disc = discriminator_bce(d.logit(x), d.logit(x_recon.detach()), d.logit(x_noise.detach()))
        return StreamLosses(prior, feature, gan, disc)


def gan_objective(d_real: torch.Tensor, d_recon: torch.Tensor, d_noise: torch.Tensor) -> torch.Tensor:
    for name, p in (("real", d_real), ("recon", d_recon), ("noise", d_noise)):
        if not torch.isfinite(p).all() or (p < 0).any() or (p > 1).any():
            raise NumericError(f"discriminator output for {name} left [0, 1]")
    clamp = lambda p: p.clamp(D_EPS, 1 - D_EPS)  # noqa: E731
    return (torch.log(clamp(d_real)) + torch.log(1 - clamp(d_recon)) + torch.log(1 - clamp(d_noise))).mean()


def discriminator_bce(logit_real: torch.Tensor, logit_recon: torch.Tensor, logit_noise: torch.Tensor) -> torch.Tensor:
    """-[log(1 - D(x)) + log D(x_recon) + log D(x_noise)], batch-averaged, from logits."""
    bce = F.binary_cross_entropy_with_logits
    return (
        bce(logit_real, torch.zeros_like(logit_real))
        + bce(logit_recon, torch.ones_like(logit_recon))
        + bce(logit_noise, torch.ones_like(logit_noise))
    )


@dataclass
class LRSchedule:
    """Step decay: multiply by ``factor`` at each milestone epoch."""

    milestones: Sequence[int] = (150, 300)
    factor: float = 0.1

    def lr_at(self, base_lr: float, epoch: int) -> float:
        return base_lr * self.factor ** sum(epoch >= m for m in self.milestones)

    def scaled(self, epochs: int, reference_epochs: int = 400) -> "LRSchedule":
        """Same milestones as fractions of a shorter run."""
        ms = tuple(max(1, round(m * epochs / reference_epochs)) for m in self.milestones)
        return LRSchedule(ms, self.factor)


class StreamTrainer:
    """Owns the three optimizers of a stream and applies the split update.

    Encoder descends on beta * prior + feature, decoder on feature - gan,
    discriminator on gan (or its bounded form, see ``discriminator_objective``).
    All gradients come from the same forward pass and
    are computed before any parameter moves.
    """

    def __init__(self, stream: VAEGANStream):
        self.stream = stream
        cfg = stream.config
        make = lambda mod: torch.optim.AdamW(  # noqa: E731
            mod.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
        )
        self.optimizers = {
            "encoder": make(stream.encoder),
            "decoder": make(stream.decoder),
            "discriminator": make(stream.discriminator),
        }

        self.set_lr(cfg.learning_rate)

    def set_lr(self, lr: float):
        scale = self.stream.config.discriminator_lr_scale
        for name, opt in self.optimizers.items():
            for group in opt.param_groups:
                group["lr"] = lr * scale if name == "discriminator" else lr

    def group_gradients(self, losses: StreamLosses) -> dict[str, list[torch.Tensor]]:
        """Per-group gradients of the three update objectives.

        Backpropagates each loss term once and recombines, which is the same
        as differentiating the three objectives separately.
        """
        s = self.stream
        enc = list(s.encoder.parameters())
        dec = list(s.decoder.parameters())
        dis = list(s.discriminator.parameters())

        def grad(obj, params, retain=True):
            gs = torch.autograd.grad(obj, params, retain_graph=retain, allow_unused=True)
            return [torch.zeros_like(p) if g is None else g for g, p in zip(gs, params)]

        g_prior = grad(losses.prior, enc)
        g_feat = grad(losses.feature, enc + dec)
        g_gan = grad(losses.gan, dec, retain=True)
        g_dis = grad(losses.discriminator_objective, dis, retain=False)
        n_enc = len(enc)
        beta, w = s.config.beta, s.config.decoder_gan_weight
        return {
            "encoder": [beta * gp + gf for gp, gf in zip(g_prior, g_feat[:n_enc])],
            "decoder": [gf - w * gg for gf, gg in zip(g_feat[n_enc:], g_gan)],
            "discriminator": g_dis,
        }

    def training_step(self, batch: torch.Tensor | Sequence[torch.Tensor], rng_seed: int) -> dict[str, float]:
        if isinstance(batch, (list, tuple)):
            if not batch:
                raise ValueError("empty batch")
            batch = torch.stack(list(batch))
        if batch.shape[0] == 0:
            raise ValueError("empty batch")
        self.stream.train()
        gen = torch.Generator().manual_seed(int(rng_seed))
        losses = self.stream.compute_losses(batch, gen)
        report = losses.as_floats()
        if not all(math.isfinite(v) for v in report.values()):
            raise NumericError(f"non-finite loss {report}; step aborted")
        grads = self.group_gradients(losses)
        modules = {"encoder": self.stream.encoder, "decoder": self.stream.decoder, "discriminator": self.stream.discriminator}
        for name, opt in self.optimizers.items():
            opt.zero_grad(set_to_none=True)
            for p, g in zip(modules[name].parameters(), grads[name]):
                p.grad = g
            opt.step()
        return report


@dataclass
class PretrainResult:
    stream: VAEGANStream
    history: list[dict] = field(default_factory=list)


@torch.no_grad()
def evaluate_reconstruction(stream: VAEGANStream, images: torch.Tensor, batch_size: int = 64) -> dict[str, float]:
    """Feature loss and pixel MSE of mean reconstructions."""
    stream.eval()
    feat, pix, n = 0.0, 0.0, 0
    for i in range(0, images.shape[0], batch_size):
        x = images[i : i + batch_size]
        rec = stream.reconstruct(x)
        feat += stream.discriminator_feature_loss(x, rec).item() * x.shape[0]
        pix += F.mse_loss(rec, x).item() * x.shape[0]
        n += x.shape[0]
    return {"feature": feat / n, "pixel_mse": pix / n}


def pretrain(
    stream: VAEGANStream,
    dataset: torch.Tensor,
    epochs: int,
    schedule: LRSchedule | None = None,
    *,
    batch_size: int = 16,
    seed: int = 0,
    holdout: torch.Tensor | None = None,
    log=None,
) -> PretrainResult:
    """Unsupervised reconstruction training.

    ``dataset`` is an ``(N, C, H, W)`` tensor in [-1, 1]. Returns the trained
    stream and one history row per epoch (row 0 is the untrained baseline).
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if dataset.shape[0] == 0:
        raise ValueError("empty dataset")
    schedule = schedule or LRSchedule().scaled(epochs)
    trainer = StreamTrainer(stream)
    gen = torch.Generator().manual_seed(seed)
    history = []
    if holdout is not None:
        history.append({"epoch": 0, "lr": stream.config.learning_rate, **_prefix("holdout_", evaluate_reconstruction(stream, holdout))})
    step = 0
    for epoch in range(1, epochs + 1):
        lr = schedule.lr_at(stream.config.learning_rate, epoch - 1)
        trainer.set_lr(lr)
        order = torch.randperm(dataset.shape[0], generator=gen)
        sums = {"prior": 0.0, "feature": 0.0, "gan": 0.0}
        n_batches = 0
        for i in range(0, len(order), batch_size):
            x = dataset[order[i : i + batch_size]]
            if stream.config.hflip:
                flip = torch.rand(x.shape[0], generator=gen) < 0.5
                x = torch.where(flip[:, None, None, None], x.flip(-1), x)
            rep = trainer.training_step(x, rng_seed=seed * 1_000_003 + step)
            step += 1
            n_batches += 1
            for k in sums:
                sums[k] += rep[k]
        row = {"epoch": epoch, "lr": lr, **{k: v / n_batches for k, v in sums.items()}}
        if holdout is not None:
            row.update(_prefix("holdout_", evaluate_reconstruction(stream, holdout)))
        history.append(row)
        if log is not None:
            log(row)
    stream.eval()
    return PretrainResult(stream, history)


def _prefix(p: str, d: dict) -> dict:
    return {p + k: v for k, v in d.items()}


def save_stream(stream: VAEGANStream, path: str | Path):
    torch.save({"kind": "vaegan-stream", "config": asdict(stream.config), "state": stream.state_dict()}, path)


def load_stream(path: str | Path) -> VAEGANStream:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"missing stream checkpoint {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "vaegan-stream":
        raise ConfigurationError(f"{path} is not a stream checkpoint")
    stream = VAEGANStream(StreamConfig(**blob["config"]))
    stream.load_state_dict(blob["state"])
    stream.eval()
    return stream
