"""Toy pixel-space conditional diffusion: schedule, training, sampling.

The latent encoder is the identity at this scale: a clip becomes a
T x H x W x 4 tensor of RGB plus a validity channel. The denoiser is
conditioned by channel concatenation; classifier-free guidance uses an
all-zeros conditioning clip as the null condition (drop probability 0.1
during training). Sampling is ancestral reverse diffusion with the
predicted clean latent clamped to the data range; guidance scale 1 is
special-cased to skip the unconditional branch entirely, so it is
bit-identical to conditional-only sampling. Every operation is a pure
function of its inputs and an rng seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from nvs_forge.clips import VideoClip
from nvs_forge.denoiser import (
    DenoiserConfig,
    forward,
    init_params,
    loss_and_grads,
    timestep_embedding,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.95
ADAM_EPS = 1e-8
P_UNCOND = 0.1
ALPHA_BAR_FLOOR = 1e-8


class DiffusionError(RuntimeError):
    """Raised when training produces non-finite numbers."""


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative signal-preserving factors, one per diffusion step (1-based)."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def steps(self) -> int:
        return len(self.alpha_bar)

    def at(self, k: int) -> float:
        """alpha_bar at 1-based step k."""
        if not (1 <= k <= self.steps):
            raise ValueError(f"step {k} outside [1, {self.steps}]")
        return float(self.alpha_bar[k - 1])

    def validate(self):
        ab = self.alpha_bar
        if len(ab) < 2:
            raise ValueError("schedule needs at least 2 steps")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be monotonically non-increasing")
        if ab[0] <= 0.99:
            raise ValueError(f"alpha_bar[1] = {ab[0]:.4f} should exceed 0.99")
        if ab[-1] >= 0.01:
            raise ValueError(f"alpha_bar[K] = {ab[-1]:.4f} should be below 0.01")


def build_schedule(k_steps: int, kind: str = "cosine") -> DiffusionSchedule:
    """A valid schedule of `k_steps` entries.

    cosine: the standard squared-cosine form with offset 0.008, floored at
    1e-8 to stay strictly positive. linear: DDPM betas scaled by 1000/K so
    the endpoints keep their intended signal/noise mix at any K.
    """
    if k_steps < 2:
        raise ValueError(f"need at least 2 steps, got {k_steps}")
    if kind == "cosine":
        s = 0.008
        ks = np.arange(1, k_steps + 1, dtype=np.float64)
        f = np.cos((ks / k_steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
        f0 = math.cos(s / (1.0 + s) * math.pi / 2.0) ** 2
        ab = np.clip(f / f0, ALPHA_BAR_FLOOR, 1.0)
    elif kind == "linear":
        scale = 1000.0 / k_steps
        betas = np.clip(np.linspace(1e-4 * scale, 0.02 * scale, k_steps), 0.0, 0.999)
        ab = np.cumprod(1.0 - betas)
        ab = np.clip(ab, ALPHA_BAR_FLOOR, 1.0)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    sched = DiffusionSchedule(alpha_bar=ab)
    sched.validate()
    return sched


# ---------------------------------------------------------------------------
# Latent encoding (identity at desk scale)
# ---------------------------------------------------------------------------

def clip_to_latent(clip: VideoClip, dtype=np.float32) -> np.ndarray:
    """Encode a clip as (T, H, W, 4): RGB plus the validity channel."""
    v = clip.validity_mask().astype(dtype)[..., None]
    return np.concatenate([clip.frames.astype(dtype), v], axis=-1)


def latent_to_clip(z: np.ndarray) -> VideoClip:
    """Decode a latent back to a clip; RGB is clamped to [0, 1]."""
    rgb = np.clip(z[..., :3], 0.0, 1.0).astype(np.float32)
    return VideoClip(rgb, z[..., 3] > 0.5)


def null_conditioning(shape, dtype=np.float32) -> np.ndarray:
    """The declared null condition: all-zeros clip with all-false validity."""
    return np.zeros(shape, dtype=dtype)


# ---------------------------------------------------------------------------
# Forward noising
# ---------------------------------------------------------------------------

def forward_noise(z0: np.ndarray, k: int, eps: np.ndarray,
                  sched: DiffusionSchedule) -> np.ndarray:
    """z_k = sqrt(alpha_bar_k) z_0 + sqrt(1 - alpha_bar_k) eps."""
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latent {z0.shape}")
    ab = sched.at(k)
    return (math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps).astype(z0.dtype)


# ---------------------------------------------------------------------------
# Denoiser invocation
# ---------------------------------------------------------------------------

def _model_input(config: DenoiserConfig, z_k: np.ndarray, k: int,
                 z_cond: np.ndarray) -> np.ndarray:
    t, h, w, _ = z_k.shape
    emb = timestep_embedding(k, config.emb_dim).astype(z_k.dtype)
    emb_maps = np.broadcast_to(emb, (t, h, w, config.emb_dim))
    return np.concatenate([z_k, z_cond, emb_maps], axis=-1)


def denoiser_predict(params: dict, config: DenoiserConfig, z_k: np.ndarray,
                     k: int, z_cond: np.ndarray, null_cond: bool = False) -> np.ndarray:
    """Predicted noise for a noisy latent under the given conditioning.

    `null_cond` swaps the conditioning for the all-zeros null clip, which is
    the unconditional branch of classifier-free guidance.
    """
    if z_cond.shape != z_k.shape:
        raise ValueError(f"conditioning shape {z_cond.shape} does not match "
                         f"latent {z_k.shape}")
    if null_cond:
        z_cond = null_conditioning(z_k.shape, dtype=z_k.dtype)
    x = _model_input(config, z_k, k, z_cond)
    return forward(params, config, x)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Denoiser weights plus Adam moments; updated functionally."""

    config: DenoiserConfig
    params: dict
    adam_m: dict
    adam_v: dict
    step: int = 0


def init_train_state(config: DenoiserConfig, rng_seed: int) -> TrainState:
    params = init_params(config, rng_seed)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return TrainState(config=config, params=params, adam_m=zeros,
                      adam_v={k: np.zeros_like(v) for k, v in params.items()})


def _assemble_batch(state: TrainState, batch, sched: DiffusionSchedule,
                    rng: np.random.Generator, p_uncond: float, window: int | None):
    """Sample (k, eps, conditioning-drop, frame window) per pair and stack."""
    dt = state.config.np_dtype
    xs, targets = [], []
    for pair in batch:
        t_full = pair.target.frame_count
        w = t_full if window is None else min(window, t_full)
        start = int(rng.integers(0, t_full - w + 1))
        k = int(rng.integers(1, sched.steps + 1))
        drop = bool(rng.random() < p_uncond)

        z0 = clip_to_latent(pair.target, dtype=dt)[start:start + w]
        if drop:
            z_cond = null_conditioning(z0.shape, dtype=dt)
        else:
            z_cond = clip_to_latent(pair.conditioning, dtype=dt)[start:start + w]
        eps = rng.standard_normal(z0.shape).astype(dt)
        z_k = forward_noise(z0, k, eps, sched)
        xs.append(_model_input(state.config, z_k, k, z_cond))
        targets.append(eps)
    return np.concatenate(xs), np.concatenate(targets)


def train_step(state: TrainState, batch, sched: DiffusionSchedule, lr: float,
               rng_seed: int, p_uncond: float = P_UNCOND,
               window: int | None = None) -> tuple:
    """One Adam step on the noise-prediction objective.

    Per pair, a uniform step k, fresh Gaussian noise and a conditioning drop
    (probability `p_uncond`) are sampled; the loss is the mean squared error
    between predicted and injected noise over all elements. Returns
    (new state, loss). Deterministic given the seed.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    rng = np.random.default_rng(rng_seed)
    x, target = _assemble_batch(state, batch, sched, rng, p_uncond, window)
    loss, grads = loss_and_grads(state.params, state.config, x, target)
    if not math.isfinite(loss):
        raise DiffusionError(
            f"non-finite loss {loss} at step {state.step + 1} "
            f"(lr={lr}, batch={len(batch)}, input range "
            f"[{np.min(x):.3g}, {np.max(x):.3g}])")

    t = state.step + 1
    b1c = 1.0 - ADAM_BETA1 ** t
    b2c = 1.0 - ADAM_BETA2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in state.params.items():
        g = grads[name]
        m = ADAM_BETA1 * state.adam_m[name] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.adam_v[name] + (1.0 - ADAM_BETA2) * (g * g)
        update = (lr * (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)).astype(p.dtype)
        new_p[name] = p - update
        new_m[name] = m
        new_v[name] = v
    return TrainState(config=state.config, params=new_p, adam_m=new_m,
                      adam_v=new_v, step=t), loss


def train(state: TrainState, pairs, sched: DiffusionSchedule, steps: int,
          lr: float, rng_seed: int, batch_size: int = 4,
          window: int | None = None, p_uncond: float = P_UNCOND,
          log_every: int = 0, log_fn=print) -> tuple:
    """Run `steps` train_step calls over minibatches of `pairs`.

    Returns (final state, list of per-step losses).
    """
    if not pairs:
        raise ValueError("no training pairs")
    rng = np.random.default_rng(rng_seed)
    losses = []
    for i in range(steps):
        sel = rng.choice(len(pairs), size=min(batch_size, len(pairs)), replace=False)
        step_seed = int(rng.integers(0, 2**63 - 1))
        state, loss = train_step(state, [pairs[j] for j in sel], sched, lr,
                                 step_seed, p_uncond=p_uncond, window=window)
        losses.append(loss)
        if log_every and (i + 1) % log_every == 0:
            log_fn(f"step {i + 1:5d}/{steps}  loss {loss:.5f}")
    return state, losses


def finetune(state: TrainState, pairs, sched: DiffusionSchedule, m_steps: int,
             eta: float, rng_seed: int, batch_size: int = 4,
             window: int | None = None, p_uncond: float = P_UNCOND) -> TrainState:
    """Test-time adaptation: M gradient steps of size eta on the pair set.

    The pairs must come from the test video alone (self-supervision); with
    m_steps = 0 the weights are returned unchanged.
    """
    if m_steps == 0:
        return state
    state, _ = train(state, pairs, sched, m_steps, eta, rng_seed,
                     batch_size=batch_size, window=window, p_uncond=p_uncond)
    return state


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _sampling_steps(k_steps: int, num_steps: int) -> np.ndarray:
    """Descending 1-based step indices, evenly spread over the schedule."""
    ts = np.unique(np.rint(np.linspace(k_steps, 1, num_steps)).astype(int))
    return ts[::-1]


def sample(state: TrainState, z_cond: np.ndarray, sched: DiffusionSchedule,
           guidance_scale: float = 6.0, num_steps: int = 50,
           rng_seed: int = 0, clamp_x0: bool = True) -> VideoClip:
    """Ancestral reverse diffusion from pure noise, conditioned on z_cond.

    Per step the guided prediction is
    eps = eps_uncond + s * (eps_cond - eps_uncond); s = 1 skips the
    unconditional branch, which makes it bit-identical to conditional-only
    sampling under the same seed. The predicted clean latent is clamped to
    the data range and the final RGB output is clamped to [0, 1].
    """
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if num_steps > sched.steps:
        raise ValueError(f"num_steps {num_steps} exceeds schedule length {sched.steps}")
    dt = state.config.np_dtype
    z_cond = z_cond.astype(dt, copy=False)
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal(z_cond.shape).astype(dt)
    ts = _sampling_steps(sched.steps, num_steps)

    x0 = np.zeros_like(z)
    for i, tau in enumerate(ts):
        ab_t = sched.at(int(tau))
        eps_c = denoiser_predict(state.params, state.config, z, int(tau), z_cond)
        if guidance_scale == 1.0:
            eps_hat = eps_c
        else:
            eps_u = denoiser_predict(state.params, state.config, z, int(tau),
                                     z_cond, null_cond=True)
            eps_hat = eps_u + dt.type(guidance_scale) * (eps_c - eps_u)
        x0 = (z - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
        if clamp_x0:
            x0 = np.clip(x0, 0.0, 1.0)
        if i + 1 == len(ts):
            z = x0
            break
        ab_prev = sched.at(int(ts[i + 1]))
        a_eff = ab_t / ab_prev
        coef_x0 = math.sqrt(ab_prev) * (1.0 - a_eff) / (1.0 - ab_t)
        coef_z = math.sqrt(a_eff) * (1.0 - ab_prev) / (1.0 - ab_t)
        var = (1.0 - a_eff) * (1.0 - ab_prev) / (1.0 - ab_t)
        noise = rng.standard_normal(z.shape).astype(dt)
        z = (dt.type(coef_x0) * x0 + dt.type(coef_z) * z
             + dt.type(math.sqrt(max(var, 0.0))) * noise)

    return latent_to_clip(z)


def top_k_select(state: TrainState, z_cond: np.ndarray, k_samples: int,
                 target: VideoClip, sched: DiffusionSchedule,
                 guidance_scale: float = 6.0, num_steps: int = 50,
                 base_seed: int = 0) -> tuple:
    """Draw k samples with distinct seeds; return (best-PSNR clip, scores).

    Seeds are base_seed + i, so nested seed sets make best-of-k monotone.
    """
    from nvs_forge.metrics import psnr

    if k_samples < 1:
        raise ValueError(f"k_samples must be >= 1, got {k_samples}")
    best, best_score, scores = None, -np.inf, []
    for i in range(k_samples):
        clip = sample(state, z_cond, sched, guidance_scale=guidance_scale,
                      num_steps=num_steps, rng_seed=base_seed + i)
        score = psnr(clip, target)
        scores.append(score)
        if score > best_score:
            best, best_score = clip, score
    return best, scores
