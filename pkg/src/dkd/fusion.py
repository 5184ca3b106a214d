"""Gated multi-agent feature fusion.

Per-agent importance maps are softmax-normalized across agents at every
pixel and used for a weighted sum of refined features; the result then
conditions a gated modulation of the ego feature with a residual connection,
so a freshly initialized fusion block passes the ego feature through
untouched.

All reductions over agents run in a canonical order derived from the
feature bytes (ego pinned first), which makes the fused output bit-identical
under any permutation of the non-ego agents.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .bev import BEVFeature, norm_groups
from .errors import InvalidArgumentError
from .params import ParamSet, conv_init
from .tensor import Tensor, add, concat, concat_channels, conv2d, conv_gn_act, mul, narrow, relu, softmax

BOTTLENECK_RATIO = 4


@dataclass
class ImportanceMaps:
    alpha: list  # one (1, H, W) tensor per agent, index 0 = ego


@dataclass
class FusionWeights:
    """Per-pixel agent weights; each omega broadcasts over channels when
    multiplied with a C x H x W feature."""

    omega: list  # one (1, H, W) tensor per agent

    def as_arrays(self) -> np.ndarray:
        return np.stack([w.data for w in self.omega])


def init_importance_params(ps: ParamSet, rng: np.random.Generator, c: int, prefix: str = "agf.p") -> None:
    mid = max(4, c // 4)
    ps.add(f"{prefix}.conv1.weight", conv_init(rng, mid, 2 * c, 3, 3))
    ps.add(f"{prefix}.conv1.bias", np.zeros(mid))
    ps.add(f"{prefix}.conv2.weight", conv_init(rng, 1, mid, 1, 1))
    ps.add(f"{prefix}.conv2.bias", np.zeros(1))


def init_lgm_params(ps: ParamSet, rng: np.random.Generator, c: int, prefix: str = "lgm") -> None:
    """Four bottleneck blocks with paired group norms. The restore stage of
    the fourth block starts at zero: the whole module is then the identity
    on its trunk."""
    mid = max(1, c // BOTTLENECK_RATIO)
    for i in (1, 2, 3, 4):
        zero_last = i == 4
        ps.add(f"{prefix}.b{i}.reduce.weight", conv_init(rng, mid, c, 1, 1))
        ps.add(f"{prefix}.b{i}.reduce.bias", np.zeros(mid))
        ps.add(f"{prefix}.b{i}.dw.weight", conv_init(rng, mid, 1, 3, 3))
        ps.add(f"{prefix}.b{i}.dw.bias", np.zeros(mid))
        restore = np.zeros((c, mid, 1, 1)) if zero_last else conv_init(rng, c, mid, 1, 1)
        ps.add(f"{prefix}.b{i}.restore.weight", restore)
        ps.add(f"{prefix}.b{i}.restore.bias", np.zeros(c))
        ps.add(f"{prefix}.n{i}.scale", np.ones(c))
        ps.add(f"{prefix}.n{i}.shift", np.zeros(c))


def bottleneck_conv(x: Tensor, params: ParamSet, prefix: str) -> Tensor:
    """1x1 reduce -> 3x3 depthwise -> 1x1 restore; spatial size preserved."""
    mid = params[f"{prefix}.reduce.weight"].shape[0]
    h = conv2d(x, params[f"{prefix}.reduce.weight"], params[f"{prefix}.reduce.bias"])
    h = conv2d(h, params[f"{prefix}.dw.weight"], params[f"{prefix}.dw.bias"], padding=1, groups=mid)
    return conv2d(h, params[f"{prefix}.restore.weight"], params[f"{prefix}.restore.bias"])


def _bottleneck_stage(x: Tensor, params: ParamSet, prefix: str, n_prefix: str, groups: int) -> Tensor:
    # bottleneck with the restore conv fused into its norm + activation
    mid = params[f"{prefix}.reduce.weight"].shape[0]
    h = conv2d(x, params[f"{prefix}.reduce.weight"], params[f"{prefix}.reduce.bias"])
    h = conv2d(h, params[f"{prefix}.dw.weight"], params[f"{prefix}.dw.bias"], padding=1, groups=mid)
    return conv_gn_act(
        h,
        params[f"{prefix}.restore.weight"],
        params[f"{prefix}.restore.bias"],
        params[f"{n_prefix}.scale"],
        params[f"{n_prefix}.shift"],
        groups,
    )


def bottleneck_param_count(c: int) -> int:
    mid = max(1, c // BOTTLENECK_RATIO)
    return (c * mid + mid) + (mid * 9 + mid) + (mid * c + c)


def lgm(trunk: BEVFeature, cond: BEVFeature, params: ParamSet, prefix: str = "lgm") -> BEVFeature:
    """Gated modulation of the trunk by a condition feature, with residual."""
    if trunk.tensor.shape != cond.tensor.shape:
        raise InvalidArgumentError(f"lgm trunk {trunk.tensor.shape} vs cond {cond.tensor.shape} mismatch")
    c = trunk.tensor.shape[0]
    g = norm_groups(c)

    def stage(x, i):
        return _bottleneck_stage(x, params, f"{prefix}.b{i}", f"{prefix}.n{i}", g)

    c1 = stage(cond.tensor, 1)
    c2 = stage(c1, 2)
    xhat = stage(trunk.tensor, 3)
    fused = mul(xhat, c2)
    out = add(stage(fused, 4), trunk.tensor)
    return BEVFeature(out, trunk.grid)


def _check_shared_grid(features: list[BEVFeature]) -> None:
    if not features:
        raise InvalidArgumentError("need at least one agent feature")
    shape = features[0].tensor.shape
    for f in features[1:]:
        if f.tensor.shape != shape:
            raise InvalidArgumentError(f"agent feature shapes differ: {shape} vs {f.tensor.shape}")


def _canonical_tail_order(keys: list[bytes], n: int) -> list[int]:
    """Ego stays first; the rest sort by content digest so reductions are
    independent of the input order of non-ego agents."""
    return [0] + sorted(range(1, n), key=lambda i: keys[i - 1])


def importance_maps(features: list[BEVFeature], params: ParamSet, prefix: str = "agf.p") -> ImportanceMaps:
    """One single-channel map per agent from a shared two-layer conv applied
    to [agent feature ; ego feature]."""
    _check_shared_grid(features)
    ego = features[0]
    maps = []
    for f in features:
        h = concat_channels([f.tensor, ego.tensor])
        h = relu(conv2d(h, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], padding=1))
        maps.append(conv2d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"]))
    return ImportanceMaps(maps)


def agent_softmax(maps: ImportanceMaps) -> FusionWeights:
    """Per-pixel softmax across the agent dimension."""
    n = len(maps.alpha)
    if n == 0:
        raise InvalidArgumentError("agent_softmax needs at least one map")
    if n == 1:
        return FusionWeights([Tensor(np.ones_like(maps.alpha[0].data))])
    keys = [hashlib.blake2s(m.data.tobytes()).digest() for m in maps.alpha[1:]]
    order = _canonical_tail_order(keys, n)
    stacked = concat([maps.alpha[i] for i in order], axis=0)
    sm = softmax(stacked, axis=0)
    omega: list = [None] * n
    for pos, i in enumerate(order):
        omega[i] = narrow(sm, 0, pos, 1)
    return FusionWeights(omega)


def weighted_fuse(weights: FusionWeights, features: list[BEVFeature]) -> BEVFeature:
    """Sum of agent features scaled by their per-pixel weights (weights
    broadcast across channels)."""
    if len(weights.omega) != len(features):
        raise InvalidArgumentError(
            f"{len(weights.omega)} weight maps for {len(features)} features"
        )
    _check_shared_grid(features)
    keys = [hashlib.blake2s(f.tensor.data.tobytes()).digest() for f in features[1:]]
    order = _canonical_tail_order(keys, len(features))
    acc = None
    for i in order:
        term = mul(weights.omega[i], features[i].tensor)
        acc = term if acc is None else add(acc, term)
    return BEVFeature(acc, features[0].grid)


def agf_fuse(features: list[BEVFeature], params: ParamSet, prefix: str = "agf") -> BEVFeature:
    """Importance -> agent softmax -> weighted fusion -> gated modulation of
    the ego feature by the fused consensus."""
    _check_shared_grid(features)
    maps = importance_maps(features, params, f"{prefix}.p")
    fused = weighted_fuse(agent_softmax(maps), features)
    return lgm(features[0], fused, params, f"{prefix}.lgm")


def init_agf_params(ps: ParamSet, rng: np.random.Generator, c: int, prefix: str = "agf") -> None:
    init_importance_params(ps, rng, c, f"{prefix}.p")
    init_lgm_params(ps, rng, c, f"{prefix}.lgm")


def mean_fuse(features: list[BEVFeature]) -> BEVFeature:
    """Unweighted feature mean; exactly weighted_fuse with uniform weights."""
    _check_shared_grid(features)
    n = len(features)
    h, w = features[0].tensor.shape[1:]
    uniform = FusionWeights([Tensor(np.full((1, h, w), 1.0 / n)) for _ in range(n)])
    return weighted_fuse(uniform, features)
