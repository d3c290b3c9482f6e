"""Triplane DDPM: noise schedules, forward diffusion, the clean-signal
(x0) training loss, and the posterior sampler.

Triplanes are rolled into a single 2D feature map before diffusion so one
2D denoiser sees all three planes: [xy | xz | yz] side by side along width
(all share height X_h, which requires X_h == Y_h). Diffusion runs in a
normalized space (per-channel zero mean / unit std over the training set);
statistics live in the checkpoint next to the schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .codec import Triplane
from .exceptions import TrainingDivergedError


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha/alpha_bar tables, 1-based timesteps t in [1, T]."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar_t with the convention alpha_bar_0 = 1."""
        if not 0 <= t <= self.T:
            raise ValueError(f"t must be in [0, {self.T}], got {t}")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def posterior_coefficients(self, t: int) -> tuple[float, float]:
        """(gamma_t, delta_t) of the posterior mean gamma_t*h_t + delta_t*h0."""
        if not 1 <= t <= self.T:
            raise ValueError(f"t must be in [1, {self.T}], got {t}")
        ab_t = self.alpha_bar_at(t)
        ab_prev = self.alpha_bar_at(t - 1)
        gamma = math.sqrt(self.alpha[t - 1]) * (1.0 - ab_prev) / (1.0 - ab_t)
        delta = math.sqrt(ab_prev) * self.beta[t - 1] / (1.0 - ab_t)
        return gamma, delta


def make_schedule(T: int, beta_start: float | None = None, beta_end: float | None = None,
                  kind: str = "linear") -> NoiseSchedule:
    """Linear beta schedule. Defaults rescale the 1000-step endpoints by
    1000/T (clipped below 0.999) so alpha_bar_T stays comparable at T=100."""
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    scale = 1000.0 / T
    if beta_start is None:
        beta_start = min(1e-4 * scale, 0.999)
    if beta_end is None:
        beta_end = min(0.02 * scale, 0.999)
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class RollLayout:
    """Column layout of a rolled triplane (C, X_h, Y_h + 2*Z_h)."""

    channels: int
    xh: int
    yh: int
    zh: int

    @property
    def height(self) -> int:
        return self.xh

    @property
    def width(self) -> int:
        return self.yh + 2 * self.zh

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def slices(self) -> dict[str, slice]:
        return {
            "xy": slice(0, self.yh),
            "xz": slice(self.yh, self.yh + self.zh),
            "yz": slice(self.yh + self.zh, self.yh + 2 * self.zh),
        }


def roll_triplane(tp: Triplane) -> tuple[np.ndarray, RollLayout]:
    """Concatenate [xy | xz | yz] along width. Requires X_h == Y_h."""
    xh, yh, zh = tp.plane_dims
    if xh != yh:
        raise ValueError(f"rolling requires square xy planes, got X_h={xh}, Y_h={yh}")
    layout = RollLayout(channels=tp.channels, xh=xh, yh=yh, zh=zh)
    rolled = np.concatenate([tp.xy, tp.xz, tp.yz], axis=2)
    return rolled, layout


def unroll_triplane(rolled: np.ndarray, layout: RollLayout,
                    scene_dims: tuple[int, int, int]) -> Triplane:
    if tuple(rolled.shape) != layout.shape:
        raise ValueError(f"rolled shape {rolled.shape} does not match layout {layout.shape}")
    s = layout.slices()
    return Triplane(rolled[:, :, s["xy"]], rolled[:, :, s["xz"]], rolled[:, :, s["yz"]],
                    scene_dims)


def _wrap(value, like):
    return value.numpy() if isinstance(like, np.ndarray) else value


def q_sample(h0, t: int, noise, schedule: NoiseSchedule):
    """Closed-form forward diffusion: sqrt(ab_t) h0 + sqrt(1 - ab_t) noise."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}], got {t}")
    h0_t = torch.as_tensor(h0)
    noise_t = torch.as_tensor(noise)
    if noise_t.shape != h0_t.shape:
        raise ValueError(f"noise shape {tuple(noise_t.shape)} != data shape {tuple(h0_t.shape)}")
    ab = schedule.alpha_bar_at(t)
    out = math.sqrt(ab) * h0_t + math.sqrt(1.0 - ab) * noise_t
    return _wrap(out, h0)


def forward_step(h_prev, t: int, noise, schedule: NoiseSchedule):
    """One-step forward diffusion q(h_t | h_{t-1}): sqrt(1-b_t) h + sqrt(b_t) e."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}], got {t}")
    h = torch.as_tensor(h_prev)
    b = float(schedule.beta[t - 1])
    out = math.sqrt(1.0 - b) * h + math.sqrt(b) * torch.as_tensor(noise)
    return _wrap(out, h_prev)


def posterior_step(h_t, h0_pred, t: int, noise, schedule: NoiseSchedule):
    """One reverse step: gamma_t h_t + delta_t h0_pred + beta_t noise.

    The final step (t=1) is deterministic: the noise term is suppressed.
    """
    gamma, delta = schedule.posterior_coefficients(t)
    h = torch.as_tensor(h_t)
    out = gamma * h + delta * torch.as_tensor(h0_pred)
    if t > 1 and noise is not None:
        out = out + float(schedule.beta[t - 1]) * torch.as_tensor(noise)
    return _wrap(out, h_t)


def diffusion_loss(denoiser, h0, t: int, noise, p_norm: int,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """Mean elementwise L_p distance between h0 and the denoiser's clean-signal
    prediction at q_sample(h0, t, noise): |r| for p=1, r^2 for p=2."""
    if p_norm not in (1, 2):
        raise ValueError(f"p_norm must be 1 or 2, got {p_norm}")
    h0_t = torch.as_tensor(h0)
    h_t = torch.as_tensor(q_sample(h0_t, t, torch.as_tensor(noise), schedule))
    pred = denoiser(h_t, t)
    residual = h0_t - pred
    return residual.abs().mean() if p_norm == 1 else residual.pow(2).mean()


class _TimestepEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 4), nn.SiLU(), nn.Linear(dim * 4, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
        args = t.float()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
        return self.mlp(emb)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        groups = math.gcd(8, c_in)
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(math.gcd(8, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TriplaneUNet(nn.Module):
    """Small 2D U-Net over rolled triplanes with additive timestep embedding.

    Conditioning (refinement) enters as extra input channels: pass
    in_channels = 2 * plane channels and concatenate before the call.
    """

    def __init__(self, in_channels: int, out_channels: int, base_channels: int = 32,
                 channel_mults: tuple[int, ...] = (1, 2, 4), time_dim: int = 64):
        super().__init__()
        self.time_embed = _TimestepEmbedding(time_dim)
        widths = [base_channels * m for m in channel_mults]
        self.conv_in = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, w in enumerate(widths):
            c_in = widths[max(i - 1, 0)]
            self.down_blocks.append(_ResBlock(c_in, w, time_dim))
            self.downsamples.append(
                nn.Conv2d(w, w, 3, stride=2, padding=1) if i < len(widths) - 1
                else nn.Identity())
        self.mid = _ResBlock(widths[-1], widths[-1], time_dim)
        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(widths))):
            c_skip = widths[i]
            c_out = widths[max(i - 1, 0)]
            self.up_blocks.append(_ResBlock(widths[i] + c_skip, c_out, time_dim))
            self.upsamples.append(
                nn.ConvTranspose2d(c_out, c_out, 2, stride=2) if i > 0 else nn.Identity())
        self.norm_out = nn.GroupNorm(math.gcd(8, widths[0]), widths[0])
        self.conv_out = nn.Conv2d(widths[0], out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        temb = self.time_embed(t)
        h = self.conv_in(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for block, up in zip(self.up_blocks, self.upsamples):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


def sample_rolled(denoise_fn, schedule: NoiseSchedule, shape: tuple[int, ...],
                  generator: torch.Generator, plan=None, override=None) -> torch.Tensor:
    """Run the reverse process in rolled (normalized) space.

    denoise_fn(h_t, t) must return the clean-signal prediction. `plan` is a
    sequence of (t, "down"|"up") transitions, defaulting to plain descending
    T..1; "up" applies one forward re-noising step (used by resampling).
    `override(h, t)` is applied before every denoise step and once more with
    t=0 on the final state.
    """
    h = torch.randn(shape, generator=generator)
    if plan is None:
        plan = [(t, "down") for t in range(schedule.T, 0, -1)]
    for t, direction in plan:
        if direction == "up":
            noise = torch.randn(shape, generator=generator)
            h = forward_step(h, t, noise, schedule)
        elif direction == "down":
            if override is not None:
                h = override(h, t)
            pred = denoise_fn(h, t)
            if not torch.isfinite(pred).all():
                raise RuntimeError(f"denoiser produced non-finite values at t={t}")
            noise = torch.randn(shape, generator=generator) if t > 1 else None
            h = posterior_step(h, pred, t, noise, schedule)
        else:
            raise ValueError(f"unknown step direction {direction!r}")
    if override is not None:
        h = override(h, 0)
    return h


class TriplaneDiffusion(BaseEstimator):
    """DDPM over rolled triplanes with clean-signal parameterization.

    fit() consumes triplanes from a frozen autoencoder; sample() generates
    novel triplanes, optionally steered by a per-step override hook.
    """

    def __init__(self, timesteps=100, beta_start=None, beta_end=None, base_channels=32,
                 channel_mults=(1, 2, 4), time_dim=64, p_norm=2, epochs=150,
                 batch_size=16, lr=2e-3, lr_decay="none", seed=0):
        self.timesteps = timesteps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.base_channels = base_channels
        self.channel_mults = channel_mults
        self.time_dim = time_dim
        self.p_norm = p_norm
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.seed = seed

    @classmethod
    def paper_scale(cls) -> "TriplaneDiffusion":
        """Full-scale configuration: batches of 18, lr 1e-4 with linear decay."""
        return cls(timesteps=100, batch_size=18, lr=1e-4, lr_decay="linear",
                   base_channels=64, channel_mults=(1, 2, 4, 8), epochs=500)

    def _normalize(self, rolled: torch.Tensor) -> torch.Tensor:
        return (rolled - self.norm_mean_) / self.norm_std_

    def _denormalize(self, rolled: torch.Tensor) -> torch.Tensor:
        return rolled * self.norm_std_ + self.norm_mean_

    def fit(self, triplanes: list[Triplane], y=None) -> "TriplaneDiffusion":
        if not triplanes:
            raise ValueError("need at least one training triplane")
        rolled_list, layout = [], None
        for tp in triplanes:
            rolled, lay = roll_triplane(tp)
            if layout is None:
                layout = lay
            elif lay != layout:
                raise ValueError("all training triplanes must share geometry")
            rolled_list.append(rolled)
        self.layout_ = layout
        self.scene_dims_ = tuple(triplanes[0].scene_dims)
        data = torch.from_numpy(np.stack(rolled_list))
        self.norm_mean_ = data.mean(dim=(0, 2, 3), keepdim=True)[0]
        self.norm_std_ = data.std(dim=(0, 2, 3), keepdim=True)[0].clamp_min(1e-6)
        data = (data - self.norm_mean_) / self.norm_std_

        self.schedule_ = make_schedule(self.timesteps, self.beta_start, self.beta_end)
        torch.manual_seed(self.seed)
        self.denoiser_ = TriplaneUNet(layout.channels, layout.channels,
                                      self.base_channels, tuple(self.channel_mults),
                                      self.time_dim)
        opt = torch.optim.Adam(self.denoiser_.parameters(), lr=self.lr)
        n_batches = max(1, math.ceil(len(rolled_list) / self.batch_size))
        total_steps = self.epochs * n_batches
        scheduler = None
        if self.lr_decay == "linear":
            scheduler = torch.optim.lr_scheduler.LambdaLR(
                opt, lambda step: max(1.0 - step / max(total_steps, 1), 0.0))
        elif self.lr_decay != "none":
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")

        gen = torch.Generator().manual_seed(self.seed)
        order_rng = np.random.default_rng(self.seed)
        ab = torch.from_numpy(self.schedule_.alpha_bar).float()
        self.loss_log_ = []
        step = 0
        for _ in range(self.epochs):
            order = order_rng.permutation(len(rolled_list))
            epoch_losses = []
            for start in range(0, len(rolled_list), self.batch_size):
                batch = data[order[start:start + self.batch_size]]
                b = batch.shape[0]
                t = torch.randint(1, self.schedule_.T + 1, (b,), generator=gen)
                noise = torch.randn(batch.shape, generator=gen)
                ab_t = ab[t - 1].view(b, 1, 1, 1)
                h_t = ab_t.sqrt() * batch + (1 - ab_t).sqrt() * noise
                pred = self.denoiser_(h_t, t)
                residual = batch - pred
                loss = residual.abs().mean() if self.p_norm == 1 else residual.pow(2).mean()
                loss_value = float(loss.detach())
                if not np.isfinite(loss_value):
                    raise TrainingDivergedError(step, loss_value)
                opt.zero_grad()
                loss.backward()
                opt.step()
                if scheduler is not None:
                    scheduler.step()
                epoch_losses.append(loss_value)
                step += 1
            self.loss_log_.append(float(np.mean(epoch_losses)))
        self.denoiser_.eval()
        return self

    def denoise_fn(self):
        """Batched eval-mode closure (h_t, t:int) -> clean prediction."""
        check_is_fitted(self, "denoiser_")

        def fn(h: torch.Tensor, t: int) -> torch.Tensor:
            with torch.no_grad():
                return self.denoiser_(h.unsqueeze(0), torch.tensor([t])).squeeze(0)
        return fn

    def sample(self, n: int = 1, seed: int = 0, plan=None, override=None) -> list[Triplane]:
        """Generate triplanes; bit-identical for identical (n, seed)."""
        check_is_fitted(self, "denoiser_")
        generator = torch.Generator().manual_seed(seed)
        out = []
        for _ in range(n):
            rolled = sample_rolled(self.denoise_fn(), self.schedule_, self.layout_.shape,
                                   generator, plan=plan, override=override)
            rolled = self._denormalize(rolled)
            out.append(unroll_triplane(rolled.numpy(), self.layout_, self.scene_dims_))
        return out
