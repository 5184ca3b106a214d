"""Conditional feature-restoration diffusion.

Training noises the teacher's fused BEV feature and teaches a conditioned
denoiser to predict the injected noise; the per-agent local feature enters
through spatial scale/shift/gate modulation at every encoder level. At
inference the same network runs a deterministic DDIM loop from pure
Gaussian noise, conditioned only on the agent's own feature, to synthesize
a restored, teacher-like map.

The denoiser is a three-level stride-2 encoder / three-level nearest-up
decoder with positive normalized cross-scale skip fusion and a sinusoidal
timestep embedding projected per level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bev import BEVFeature, norm_groups
from .errors import InvalidArgumentError
from .params import ParamSet, conv_init
from .rng import derive_rng
from .tensor import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    conv_gn_act,
    div,
    film_modulate,
    layer_norm_channels,
    matmul,
    mul,
    narrow,
    no_grad,
    reshape,
    softplus,
    sub,
    upsample2x,
)

DOWN_FACTOR = 8  # three stride-2 levels
FEATURE_RANGE = (0.0, 50.0)  # backbone features are post-relu, so never negative


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention factors for T diffusion steps.

    alpha_bar[0] is 1 (no noise); alpha_bar[t] multiplies the clean signal
    variance at step t. A usable training schedule should essentially
    destroy the signal by step T (terminal alpha_bar below 0.05).
    """

    t_max: int
    alpha_bar: np.ndarray
    beta_min: float
    beta_max: float

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.t_max + 1,):
            raise InvalidArgumentError(f"alpha_bar must have T+1 entries, got {ab.shape}")
        if ab[0] != 1.0:
            raise InvalidArgumentError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise InvalidArgumentError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0.0:
            raise InvalidArgumentError("alpha_bar[T] must stay positive")
        object.__setattr__(self, "alpha_bar", ab)

    @property
    def terminal_alpha_bar(self) -> float:
        return float(self.alpha_bar[-1])


def build_schedule(t_max: int = 100, beta_min: float = 1e-4, beta_max: float = 0.06) -> NoiseSchedule:
    """Linear-beta schedule; alpha_bar[t] is the running product of (1 - beta)."""
    if t_max < 1:
        raise InvalidArgumentError(f"diffusion step count must be >= 1, got {t_max}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidArgumentError(f"invalid beta range ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, t_max)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(t_max, alpha_bar, beta_min, beta_max)


def forward_noise(feature: BEVFeature, t: int, epsilon: Tensor, schedule: NoiseSchedule) -> BEVFeature:
    """Mix the clean feature with Gaussian noise at step t:
    sqrt(alpha_bar_t) * F + sqrt(1 - alpha_bar_t) * eps."""
    if not 1 <= t <= schedule.t_max:
        raise InvalidArgumentError(f"timestep {t} outside [1, {schedule.t_max}]")
    if epsilon.shape != feature.tensor.shape:
        raise InvalidArgumentError(f"noise shape {epsilon.shape} != feature shape {feature.tensor.shape}")
    ab = schedule.alpha_bar[t]
    out = add(mul(feature.tensor, math.sqrt(ab)), mul(epsilon, math.sqrt(1.0 - ab)))
    return BEVFeature(out, feature.grid)


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if emb.size < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.size)])
    return emb


def init_denoiser_params(
    ps: ParamSet, rng: np.random.Generator, c: int, prefix: str = "denoiser", width: int | None = None
) -> None:
    """Allocate all denoiser parameters; width defaults to the feature
    channel count but can be narrower (the restoration trunk is the hot path
    of training and sampling)."""
    w = c if width is None else width

    def conv_block(name: str, cin: int, cout: int, k: int) -> None:
        ps.add(f"{name}.weight", conv_init(rng, cout, cin, k, k))
        ps.add(f"{name}.bias", np.zeros(cout))

    def gn_block(name: str, ch: int) -> None:
        ps.add(f"{name}.scale", np.ones(ch))
        ps.add(f"{name}.shift", np.zeros(ch))

    # pointwise stem over [noisy ; condition]: concatenating the condition at
    # the input is the strongest conditioning channel (the per-level
    # modulation alone is too weak to steer generation from pure noise).
    # Spatial mixing lives in the stride-2 levels; the full-resolution pass
    # only adapts channels (and is the hottest map to touch).
    conv_block(f"{prefix}.stem", 2 * c, w, 1)
    gn_block(f"{prefix}.stem_gn", w)
    conv_block(f"{prefix}.cond_proj", c, w, 3)
    gn_block(f"{prefix}.cond_proj_gn", w)
    for l in (1, 2, 3):
        # spatial modulation: 1x1 over the normalized condition -> scale/shift/gate;
        # the gate slice starts at zero so the trunk passes through unchanged
        proj = np.zeros((3 * w, w, 1, 1))
        proj[: 2 * w] = rng.normal(0.0, 0.01, size=(2 * w, w, 1, 1))
        ps.add(f"{prefix}.cam{l}.proj.weight", proj)
        ps.add(f"{prefix}.cam{l}.proj.bias", np.zeros(3 * w))
        if l < 3:  # the deepest level has no next level to feed
            conv_block(f"{prefix}.cam{l}.adv", w, w, 3)
            gn_block(f"{prefix}.cam{l}.adv_gn", w)
        conv_block(f"{prefix}.enc{l}.conv", w, w, 3)
        gn_block(f"{prefix}.enc{l}.gn", w)
        # timestep conditioning is scale-and-shift so the network can express
        # the t-dependent gain that noise prediction needs
        ps.add(f"{prefix}.enc{l}.temb.weight", rng.normal(0.0, 0.1, size=(w, 2 * w)))
        ps.add(f"{prefix}.enc{l}.temb.bias", np.zeros(2 * w))
        # the decoder block at full resolution is pointwise; spatial context
        # arrives through the upsampled lower levels
        conv_block(f"{prefix}.dec{l}.conv", w, w, 3 if l > 1 else 1)
        gn_block(f"{prefix}.dec{l}.gn", w)
        ps.add(f"{prefix}.dec{l}.temb.weight", rng.normal(0.0, 0.1, size=(w, 2 * w)))
        ps.add(f"{prefix}.dec{l}.temb.bias", np.zeros(2 * w))
        ps.add(f"{prefix}.dec{l}.fuse_raw", np.zeros(2))
    # the output projection sees the decoder features, the raw noisy input
    # and the condition, plus t-conditioned per-channel gains on the last
    # two: ideal noise prediction is (up to refinement) a t-dependent linear
    # mix gain(t) * x - g(t) * restored(cond), so that mix must be directly
    # representable. Zero init makes the untrained network predict zero
    # noise, so early samples stay bounded and the loss starts at E[eps^2]
    ps.add(f"{prefix}.out.weight", np.zeros((c, w + 2 * c, 1, 1)))
    ps.add(f"{prefix}.out.bias", np.zeros(c))
    ps.add(f"{prefix}.out.tgain.weight", np.zeros((w, c)))
    ps.add(f"{prefix}.out.tgain.bias", np.zeros(c))
    ps.add(f"{prefix}.out.cgain.weight", np.zeros((w, c)))
    ps.add(f"{prefix}.out.cgain.bias", np.zeros(c))


def cam_modulate(trunk: Tensor, cond: Tensor, params: ParamSet, prefix: str) -> tuple[Tensor, Tensor]:
    """Conditioned modulation of the trunk plus advancement of the condition.

    The normalized condition passes a 1x1 projection producing per-channel
    scale, shift and gate maps; trunk_out = trunk + gate * (scale * LN(trunk)
    + shift). cond_out is the condition pushed to the next (half-resolution)
    level by a stride-2 conv block; at the deepest level (no advance
    parameters allocated) the condition is returned unchanged.
    """
    if trunk.shape[1:] != cond.shape[1:]:
        raise InvalidArgumentError(f"trunk {trunk.shape} and cond {cond.shape} spatially misaligned")
    w = trunk.shape[0]
    mod = conv2d(layer_norm_channels(cond), params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])
    trunk_out = film_modulate(trunk, narrow(mod, 0, 0, w), narrow(mod, 0, w, w), narrow(mod, 0, 2 * w, w))
    if f"{prefix}.adv.weight" not in params:
        return trunk_out, cond
    cond_out = conv_gn_act(
        cond,
        params[f"{prefix}.adv.weight"],
        params[f"{prefix}.adv.bias"],
        params[f"{prefix}.adv_gn.scale"],
        params[f"{prefix}.adv_gn.shift"],
        norm_groups(cond.shape[0]),
        stride=2,
        padding=1,
    )
    return trunk_out, cond_out


def _temb_scale_shift(t: int, params: ParamSet, name: str, w: int) -> tuple[Tensor, Tensor]:
    # fixed sinusoidal embedding through a learned per-level projection,
    # split into a per-channel gain and bias
    emb = timestep_embedding(t, w)
    row = matmul(reshape(Tensor(emb), (1, w)), params[f"{name}.weight"])
    vec = add(row, reshape(params[f"{name}.bias"], (1, 2 * w)))
    both = reshape(vec, (2 * w, 1, 1))
    return narrow(both, 0, 0, w), narrow(both, 0, w, w)


def denoiser_forward(
    noisy: BEVFeature, cond: BEVFeature, t: int, schedule: NoiseSchedule, params: ParamSet, prefix: str = "denoiser"
) -> Tensor:
    """Predict the injected noise from the noisy map, condition and timestep.

    Levels run at half, quarter and eighth resolution; the condition is
    injected at each level and the decoder fuses skips with positive
    normalized weights on the way back up.
    """
    if not 1 <= t <= schedule.t_max:
        raise InvalidArgumentError(f"timestep {t} outside schedule [1, {schedule.t_max}]")
    x, c_in = noisy.tensor, cond.tensor
    if x.shape != c_in.shape:
        raise InvalidArgumentError(f"noisy {x.shape} vs cond {c_in.shape} shape mismatch")
    cch, h, wd = x.shape
    if h % DOWN_FACTOR or wd % DOWN_FACTOR:
        raise InvalidArgumentError(f"spatial size {h}x{wd} must be divisible by {DOWN_FACTOR}")
    w = params[f"{prefix}.stem.weight"].shape[0]
    g = norm_groups(w)

    def block(h_in, name, stride, t_step):
        tscale, tshift = _temb_scale_shift(t_step, params, f"{name}.temb", w)
        k = params[f"{name}.conv.weight"].shape[2]
        return conv_gn_act(
            h_in,
            params[f"{name}.conv.weight"],
            params[f"{name}.conv.bias"],
            params[f"{name}.gn.scale"],
            params[f"{name}.gn.shift"],
            g,
            stride=stride,
            padding=k // 2,
            tscale=tscale,
            tshift=tshift,
        )

    # condition enters at the first downsampled level and follows the trunk down
    cond_cur = conv_gn_act(
        c_in,
        params[f"{prefix}.cond_proj.weight"],
        params[f"{prefix}.cond_proj.bias"],
        params[f"{prefix}.cond_proj_gn.scale"],
        params[f"{prefix}.cond_proj_gn.shift"],
        g,
        stride=2,
        padding=1,
    )
    s0 = conv_gn_act(
        concat_channels([x, c_in]),
        params[f"{prefix}.stem.weight"],
        params[f"{prefix}.stem.bias"],
        params[f"{prefix}.stem_gn.scale"],
        params[f"{prefix}.stem_gn.shift"],
        g,
    )
    skips = [s0]
    hcur = s0
    for l in (1, 2, 3):
        hcur = block(hcur, f"{prefix}.enc{l}", 2, t)
        hcur, cond_cur = cam_modulate(hcur, cond_cur, params, f"{prefix}.cam{l}")
        if l < 3:
            skips.append(hcur)

    for l in (3, 2, 1):
        up = upsample2x(hcur)
        raw = params[f"{prefix}.dec{l}.fuse_raw"]
        wa = softplus(narrow(raw, 0, 0, 1))
        wb = softplus(narrow(raw, 0, 1, 1))
        denom = add(add(wa, wb), 1e-4)
        skip = skips[l - 1]
        fused = div(add(mul(reshape(wa, (1, 1, 1)), up), mul(reshape(wb, (1, 1, 1)), skip)), reshape(denom, (1, 1, 1)))
        hcur = block(fused, f"{prefix}.dec{l}", 1, t)

    out = conv2d(concat_channels([hcur, x, c_in]), params[f"{prefix}.out.weight"], params[f"{prefix}.out.bias"])
    emb = Tensor(timestep_embedding(t, w))

    def gain(name, base):
        row = matmul(reshape(emb, (1, w)), params[f"{prefix}.out.{name}.weight"])
        return reshape(add(add(row, base), reshape(params[f"{prefix}.out.{name}.bias"], (1, cch))), (cch, 1, 1))

    # noise prediction is, to first order, a t-dependent linear mix of the
    # noisy input and the condition; the input gain's optimum without any
    # conditioning is sqrt(1 - alpha_bar), so start exactly there and learn
    # residuals (a zero start is too far for Adam to travel at desk scale)
    x_gain = gain("tgain", math.sqrt(1.0 - schedule.alpha_bar[t]))
    c_gain = gain("cgain", 0.0)
    return add(out, add(mul(x_gain, x), mul(c_gain, c_in)))


def diffusion_loss(epsilon: Tensor, epsilon_hat: Tensor) -> Tensor:
    """Mean squared error between true and predicted noise."""
    if epsilon.shape != epsilon_hat.shape:
        raise InvalidArgumentError(f"noise shapes differ: {epsilon.shape} vs {epsilon_hat.shape}")
    d = sub(epsilon_hat, epsilon)
    return mul(d, d).mean()


def _ddim_timesteps(t_start: int, sample_steps: int) -> list[int]:
    ts = np.unique(np.round(np.linspace(t_start, 0, sample_steps + 1)).astype(int))[::-1]
    return [int(v) for v in ts]


def ddim_sample(
    start: BEVFeature,
    cond: BEVFeature,
    sample_steps: int,
    schedule: NoiseSchedule,
    params: ParamSet,
    t_start: int | None = None,
    prefix: str = "denoiser",
    denoise_fn=None,
    clip_x0: tuple | None = None,
) -> BEVFeature:
    """Deterministic DDIM refinement along an evenly spaced descending
    timestep subsequence ending at 0. No stochastic term; gradients are not
    recorded (the sample is a product, not a differentiable path).

    denoise_fn overrides the network (used by oracle tests): it is called as
    denoise_fn(x, cond, t) and must return the predicted noise array.
    clip_x0, when given, clamps every intermediate clean estimate to that
    range (feature restoration uses the non-negative feature range; the
    default leaves the update exact).
    """
    if sample_steps < 1 or sample_steps > schedule.t_max:
        raise InvalidArgumentError(f"sample_steps {sample_steps} outside [1, {schedule.t_max}]")
    t0 = schedule.t_max if t_start is None else t_start
    if not 1 <= t0 <= schedule.t_max:
        raise InvalidArgumentError(f"start timestep {t0} outside [1, {schedule.t_max}]")
    ab = schedule.alpha_bar
    ts = _ddim_timesteps(t0, min(sample_steps, t0))
    x = start.tensor.data.copy()
    with no_grad():
        for i in range(len(ts) - 1):
            t_cur, t_next = ts[i], ts[i + 1]
            if denoise_fn is not None:
                eps_hat = np.asarray(denoise_fn(x, cond.tensor.data, t_cur))
            else:
                eps_hat = denoiser_forward(
                    BEVFeature(Tensor(x), start.grid), cond, t_cur, schedule, params, prefix
                ).data
            sa, sb = math.sqrt(ab[t_cur]), math.sqrt(1.0 - ab[t_cur])
            x0 = (x - sb * eps_hat) / sa
            if clip_x0 is not None:
                np.clip(x0, clip_x0[0], clip_x0[1], out=x0)
            x = math.sqrt(ab[t_next]) * x0 + math.sqrt(1.0 - ab[t_next]) * eps_hat
    return BEVFeature(Tensor(x), start.grid)


def refine_train(
    teacher_feature: BEVFeature,
    student_feature: BEVFeature,
    schedule: NoiseSchedule,
    params: ParamSet,
    seed: int,
    sample_steps: int = 10,
    refine_mode: str = "ddim",
    prefix: str = "denoiser",
) -> tuple[Tensor, BEVFeature]:
    """One training-time restoration pass for a single agent.

    Draws (t, eps) from the seed, computes the noise-prediction loss, and
    produces the refined feature. refine_mode picks how that feature is
    made: "generate" runs the full inference procedure (sampling from pure
    noise conditioned on the agent feature), so downstream consumers train
    on exactly the distribution they will see when deployed; "ddim" samples
    from the noised teacher feature at the drawn t; "x0" reuses the already
    predicted noise for a single-step clean-feature estimate (cheapest, but
    its output leans on the true teacher signal). Gradients flow only
    through the returned loss.
    """
    if teacher_feature.tensor.shape != student_feature.tensor.shape:
        raise InvalidArgumentError(
            f"teacher {teacher_feature.tensor.shape} vs student {student_feature.tensor.shape} grid mismatch"
        )
    if refine_mode not in ("generate", "ddim", "x0"):
        raise InvalidArgumentError(f"unknown refine mode {refine_mode!r}")
    rng = derive_rng(seed, "refine")
    t = int(rng.integers(1, schedule.t_max + 1))
    eps = Tensor(rng.standard_normal(teacher_feature.tensor.shape))
    noisy = forward_noise(BEVFeature(teacher_feature.tensor.detach(), teacher_feature.grid), t, eps, schedule)
    eps_hat = denoiser_forward(noisy, student_feature, t, schedule, params, prefix)
    loss = diffusion_loss(eps, eps_hat)

    ab = schedule.alpha_bar[t]
    if refine_mode == "x0":
        x0 = (noisy.tensor.data - math.sqrt(1.0 - ab) * eps_hat.data) / math.sqrt(ab)
        refined = BEVFeature(Tensor(x0), student_feature.grid)
    elif refine_mode == "generate":
        refined = refine_infer(student_feature, schedule, params, seed, sample_steps, prefix)
    else:
        refined = ddim_sample(
            BEVFeature(noisy.tensor.detach(), student_feature.grid),
            BEVFeature(student_feature.tensor.detach(), student_feature.grid),
            sample_steps,
            schedule,
            params,
            t_start=t,
            prefix=prefix,
            clip_x0=FEATURE_RANGE,
        )
    return loss, refined


def refine_infer(
    student_feature: BEVFeature,
    schedule: NoiseSchedule,
    params: ParamSet,
    seed: int,
    sample_steps: int = 10,
    prefix: str = "denoiser",
) -> BEVFeature:
    """Inference-time restoration: DDIM from pure Gaussian noise conditioned
    only on the agent's own local feature."""
    rng = derive_rng(seed, "refine_infer")
    start = BEVFeature(Tensor(rng.standard_normal(student_feature.tensor.shape)), student_feature.grid)
    cond = BEVFeature(student_feature.tensor.detach(), student_feature.grid)
    return ddim_sample(start, cond, sample_steps, schedule, params, prefix=prefix, clip_x0=FEATURE_RANGE)
