"""Construction and evaluation of the reflection-removal networks.

Two-stage layout: a plain U-Net (``g_r``) maps the observation I to a
reflection estimate, and a dual-encoder U-Net (``g_t``) maps (I, R_hat) to
the transmission.  Each decoder level of ``g_t`` runs a reflection-aware
guidance block: the observation/reflection feature difference is concatenated
with the upsampled decoder feature, a sigmoid mask is predicted from all
three feature groups through two 1x1 convolutions, and the merged feature
passes through a mask-renormalized partial convolution.

All channel widths derive from one base table scaled by
``ModelConfig.width_multiplier`` so the same wiring runs at desk scale
(1/8 width, 32px inputs) and at paper scale.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

import ragnet.tensor as T
from ragnet.tensor import Parameter, Tensor

RAG_VARIANTS = ("full", "no_mask", "mask_no_renorm", "two_channel_mask", "no_diff", "one_stage")
NETWORK_KINDS = ("g_r", "g_t", "one_stage", "discriminator", "percep_extractor")

# Base channel plan at width 1.  The observation encoder has five stages
# (64, 64 | 128, 128 | 256, 256x3 | 512, 512x3 | 512x4); the reflection
# encoder stops after stage 4 since only its first four feature levels feed
# the guidance blocks.  Decoder levels keep the concatenated width through
# the merge and tail convs, then reduce to the next level's width.
ENC_STAGE_WIDTHS = (64, 128, 256, 512, 512)
ENC_CONVS_PER_STAGE = (2, 2, 4, 4, 4)
DEC_TAIL_CONVS = {4: 1, 3: 3, 2: 1, 1: 1}
DISC_WIDTHS = (64, 128, 256, 512)
RENORM_EPS = 1e-8


@dataclass
class ModelConfig:
    width_multiplier: float = 0.125
    rag_variant: str = "full"
    use_adversarial: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.rag_variant not in RAG_VARIANTS:
            raise ValueError(f"rag_variant must be one of {RAG_VARIANTS}, got {self.rag_variant!r}")
        if self.width_multiplier <= 0 or self.width_multiplier * 64 < 1:
            raise ValueError(f"width_multiplier {self.width_multiplier} would produce empty layers "
                             "(need width_multiplier * 64 >= 1)")

    def scaled(self, base: int) -> int:
        return max(1, int(round(base * self.width_multiplier)))


@dataclass
class MaskLevel:
    """Masks of one decoder level; level 1 is full resolution, level 4 is H/8."""
    level: int
    m_diff: Tensor
    m_dec: Tensor


@dataclass
class Network:
    kind: str
    config: ModelConfig
    params: dict[str, Parameter] = field(default_factory=dict)

    def add(self, name: str, shape, init: str, dtype) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == "zeros":
            data = np.zeros(shape, dtype=dtype)
        elif init == "he":
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            rng = np.random.Generator(np.random.PCG64(_param_seed(self.config.seed, self.kind, name)))
            data = (rng.standard_normal(shape) * std).astype(dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False


def _param_seed(seed: int, kind: str, name: str) -> int:
    digest = hashlib.blake2b(f"{seed}:{kind}:{name}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def count_params(net: Network) -> int:
    return sum(p.data.size for p in net.params.values())


# ---------------------------------------------------------------------------
# builders

def build_network(kind: str, config: ModelConfig, dtype=np.float32) -> Network:
    """Build a deterministic network of the given kind.

    Conv weights use fan-in-scaled normal initialization seeded per parameter
    name, so two builds from the same config are bit-identical regardless of
    construction order.
    """
    if kind not in NETWORK_KINDS:
        raise ValueError(f"kind must be one of {NETWORK_KINDS}, got {kind!r}")
    if kind == "g_t" and config.rag_variant == "one_stage":
        raise ValueError("rag_variant 'one_stage' builds with kind='one_stage', not 'g_t'")
    net = Network(kind, config)
    s = config.scaled
    if kind == "g_r":
        _add_encoder(net, "enc_obs", in_ch=3, stages=5, dtype=dtype)
        _add_decoder(net, dtype=dtype)
    elif kind == "g_t":
        _add_encoder(net, "enc_obs", in_ch=3, stages=5, dtype=dtype)
        _add_encoder(net, "enc_refl", in_ch=3, stages=4, dtype=dtype)
        _add_decoder(net, dtype=dtype)
        if config.rag_variant != "no_mask":
            _add_mask_heads(net, n_groups=3, dtype=dtype)
    elif kind == "one_stage":
        _add_encoder(net, "enc_obs", in_ch=3, stages=5, dtype=dtype)
        _add_decoder(net, dtype=dtype)
        if config.rag_variant != "no_mask":
            _add_mask_heads(net, n_groups=2, dtype=dtype)
    elif kind == "discriminator":
        cin = 6
        for j, base in enumerate(DISC_WIDTHS):
            cout = s(base)
            net.add(f"disc/c{j}/weight", (cout, cin, 3, 3), "he", dtype)
            net.add(f"disc/c{j}/bias", (1, cout, 1, 1), "zeros", dtype)
            cin = cout
    elif kind == "percep_extractor":
        cin = 3
        for j, base in enumerate(ENC_STAGE_WIDTHS):
            cout = s(base)
            net.add(f"feat/s{j}/weight", (cout, cin, 3, 3), "he", dtype)
            net.add(f"feat/s{j}/bias", (1, cout, 1, 1), "zeros", dtype)
            cin = cout
        net.freeze()
    return net


def _add_encoder(net: Network, prefix: str, in_ch: int, stages: int, dtype) -> None:
    s = net.config.scaled
    cin = in_ch
    for stage in range(stages):
        cout = s(ENC_STAGE_WIDTHS[stage])
        for idx in range(ENC_CONVS_PER_STAGE[stage]):
            net.add(f"{prefix}/s{stage}/c{idx}/weight", (cout, cin, 3, 3), "he", dtype)
            net.add(f"{prefix}/s{stage}/c{idx}/bias", (1, cout, 1, 1), "zeros", dtype)
            cin = cout


def _add_decoder(net: Network, dtype) -> None:
    s = net.config.scaled
    for level in (4, 3, 2, 1):
        c = s(ENC_STAGE_WIDTHS[level - 1])
        net.add(f"dec/l{level}/tconv/weight", (c, c, 2, 2), "he", dtype)
        net.add(f"dec/l{level}/tconv/bias", (1, c, 1, 1), "zeros", dtype)
        net.add(f"dec/l{level}/merge/weight", (2 * c, 2 * c, 3, 3), "he", dtype)
        net.add(f"dec/l{level}/merge/bias", (1, 2 * c, 1, 1), "zeros", dtype)
        for j in range(DEC_TAIL_CONVS[level]):
            net.add(f"dec/l{level}/tail{j}/weight", (2 * c, 2 * c, 3, 3), "he", dtype)
            net.add(f"dec/l{level}/tail{j}/bias", (1, 2 * c, 1, 1), "zeros", dtype)
        if level > 1:
            cnext = s(ENC_STAGE_WIDTHS[level - 2])
            net.add(f"dec/l{level}/reduce/weight", (cnext, 2 * c, 3, 3), "he", dtype)
            net.add(f"dec/l{level}/reduce/bias", (1, cnext, 1, 1), "zeros", dtype)
    c1 = s(ENC_STAGE_WIDTHS[0])
    net.add("dec/head/c0/weight", (c1, 2 * c1, 3, 3), "he", dtype)
    net.add("dec/head/c0/bias", (1, c1, 1, 1), "zeros", dtype)
    net.add("dec/head/c1/weight", (3, c1, 3, 3), "he", dtype)
    net.add("dec/head/c1/bias", (1, 3, 1, 1), "zeros", dtype)


def _add_mask_heads(net: Network, n_groups: int, dtype) -> None:
    s = net.config.scaled
    two_channel = net.config.rag_variant == "two_channel_mask"
    for level in (4, 3, 2, 1):
        c = s(ENC_STAGE_WIDTHS[level - 1])
        cin = n_groups * c
        cout = 2 if two_channel else 2 * c
        net.add(f"rag/l{level}/m0/weight", (cin, cin, 1, 1), "he", dtype)
        net.add(f"rag/l{level}/m0/bias", (1, cin, 1, 1), "zeros", dtype)
        net.add(f"rag/l{level}/m1/weight", (cout, cin, 1, 1), "he", dtype)
        net.add(f"rag/l{level}/m1/bias", (1, cout, 1, 1), "zeros", dtype)


# ---------------------------------------------------------------------------
# forward evaluation

def _check_spatial(x: Tensor, op: str) -> None:
    _, _, h, w = x.shape
    if h % 16 or w % 16:
        need_h = (16 - h % 16) % 16
        need_w = (16 - w % 16) % 16
        raise ValueError(f"{op}: spatial dims ({h},{w}) must be divisible by 16; "
                         f"pad by ({need_h},{need_w}) first (reflect padding recommended)")


def _conv_relu(x: Tensor, w: Parameter, b: Parameter) -> Tensor:
    return T.relu(T.conv2d(x, w, b, stride=1, pad=1))


def _encoder_forward(net: Network, prefix: str, x: Tensor, stages: int) -> list[Tensor]:
    """Stage outputs [F1..Fstages]; FI is pooled before feeding the next stage."""
    feats = []
    for stage in range(stages):
        if stage > 0:
            x = T.maxpool2x2(x)
        for idx in range(ENC_CONVS_PER_STAGE[stage]):
            x = _conv_relu(x, net[f"{prefix}/s{stage}/c{idx}/weight"], net[f"{prefix}/s{stage}/c{idx}/bias"])
        feats.append(x)
    return feats


def partial_conv(f: Tensor, m: Tensor, w: Tensor, b: Tensor, renorm: bool = True,
                 eps: float = RENORM_EPS) -> Tensor:
    """Mask-renormalized 3x3 convolution (stride 1, pad 1).

    out = (w * (f o m)) o (1 / mean3x3(m)) + b wherever mean3x3(m) > eps and
    exactly 0 elsewhere (bias suppressed).  With ``renorm=False`` the
    division is omitted: out = w * (f o m) + b.
    """
    if f.shape != m.shape:
        raise ValueError(f"partial_conv: feature shape {f.shape} != mask shape {m.shape}")
    if w.shape[0] != w.shape[1]:
        raise ValueError(f"partial_conv: weight must preserve channels for the per-channel "
                         f"renormalization, got {w.shape[1]}->{w.shape[0]}")
    fm = T.mul(f, m)
    if not renorm:
        return T.conv2d(fm, w, b, stride=1, pad=1)
    raw = T.conv2d(fm, w, None, stride=1, pad=1)
    mbar = T.mask_mean3x3(m)
    return T.mask_renorm(raw, mbar, b, eps=eps)


def rag_block(net: Network, level: int, f_i: Tensor, f_r: Tensor, f_dec: Tensor) -> tuple[Tensor, MaskLevel]:
    """Difference feature and mask for one decoder level.

    ``f_r`` is the reflection-encoder feature in the two-stage model and the
    decoder feature itself in the one-stage model (where the subtraction is
    F_I - F_dec and the mask sees only two feature groups).
    """
    if f_i.shape != f_r.shape:
        raise ValueError(f"rag_block: F_I shape {f_i.shape} != F_R shape {f_r.shape}")
    if f_i.shape[2:] != f_dec.shape[2:]:
        raise ValueError(f"rag_block: decoder feature spatial size {f_dec.shape[2:]} "
                         f"!= encoder {f_i.shape[2:]}")
    variant = net.config.rag_variant
    f_diff = f_i if variant == "no_diff" else T.sub(f_i, f_r)

    one_stage = net.kind == "one_stage"
    h = T.concat_channels(f_i, f_dec) if one_stage else T.concat_channels(T.concat_channels(f_i, f_r), f_dec)
    h = T.relu(T.conv2d(h, net[f"rag/l{level}/m0/weight"], net[f"rag/l{level}/m0/bias"]))
    m = T.sigmoid(T.conv2d(h, net[f"rag/l{level}/m1/weight"], net[f"rag/l{level}/m1/bias"]))
    c_diff = f_diff.shape[1]
    if variant == "two_channel_mask":
        m_diff = T.slice_channels(m, 0, 1)
        m_dec = T.slice_channels(m, 1, 2)
    else:
        m_diff = T.slice_channels(m, 0, c_diff)
        m_dec = T.slice_channels(m, c_diff, m.shape[1])
    return f_diff, MaskLevel(level, m_diff, m_dec)


def _mask_full_width(mask: MaskLevel, c_diff: int, c_dec: int) -> Tensor:
    """Per-feature mask matching concat(F_diff, F_dec); one-channel masks broadcast."""
    m_diff, m_dec = mask.m_diff, mask.m_dec
    if m_diff.shape[1] == 1 and c_diff > 1:
        m_diff = T.repeat_channels(m_diff, c_diff)
    if m_dec.shape[1] == 1 and c_dec > 1:
        m_dec = T.repeat_channels(m_dec, c_dec)
    return T.concat_channels(m_diff, m_dec)


def _guided_decoder(net: Network, f_obs: list[Tensor], f_refl: list[Tensor] | None) -> tuple[Tensor, list[MaskLevel]]:
    """Shared decoder of g_t (f_refl given) and the one-stage model (f_refl None)."""
    variant = net.config.rag_variant
    x = f_obs[4]
    masks: list[MaskLevel] = []
    for level in (4, 3, 2, 1):
        f_dec = T.conv_transpose2d(x, net[f"dec/l{level}/tconv/weight"], net[f"dec/l{level}/tconv/bias"])
        f_i = f_obs[level - 1]
        f_r = f_refl[level - 1] if f_refl is not None else f_dec
        if variant == "no_mask":
            f_diff = T.sub(f_i, f_r)
            x = _conv_relu(T.concat_channels(f_diff, f_dec),
                           net[f"dec/l{level}/merge/weight"], net[f"dec/l{level}/merge/bias"])
        else:
            f_diff, mask = rag_block(net, level, f_i, f_r, f_dec)
            masks.append(mask)
            f = T.concat_channels(f_diff, f_dec)
            m = _mask_full_width(mask, f_diff.shape[1], f_dec.shape[1])
            x = T.relu(partial_conv(f, m, net[f"dec/l{level}/merge/weight"],
                                    net[f"dec/l{level}/merge/bias"],
                                    renorm=(variant != "mask_no_renorm")))
        for j in range(DEC_TAIL_CONVS[level]):
            x = _conv_relu(x, net[f"dec/l{level}/tail{j}/weight"], net[f"dec/l{level}/tail{j}/bias"])
        if level > 1:
            x = _conv_relu(x, net[f"dec/l{level}/reduce/weight"], net[f"dec/l{level}/reduce/bias"])
    x = _conv_relu(x, net["dec/head/c0/weight"], net["dec/head/c0/bias"])
    out = T.sigmoid(T.conv2d(x, net["dec/head/c1/weight"], net["dec/head/c1/bias"], stride=1, pad=1))
    masks.sort(key=lambda m: m.level)
    return out, masks


def forward_gr(net: Network, i_obs: Tensor) -> Tensor:
    """Reflection estimate in [0,1], same shape as the observation."""
    if net.kind != "g_r":
        raise ValueError(f"forward_gr needs a g_r network, got {net.kind!r}")
    _check_spatial(i_obs, "forward_gr")
    f_obs = _encoder_forward(net, "enc_obs", i_obs, stages=5)
    x = f_obs[4]
    for level in (4, 3, 2, 1):
        f_dec = T.conv_transpose2d(x, net[f"dec/l{level}/tconv/weight"], net[f"dec/l{level}/tconv/bias"])
        x = _conv_relu(T.concat_channels(f_obs[level - 1], f_dec),
                       net[f"dec/l{level}/merge/weight"], net[f"dec/l{level}/merge/bias"])
        for j in range(DEC_TAIL_CONVS[level]):
            x = _conv_relu(x, net[f"dec/l{level}/tail{j}/weight"], net[f"dec/l{level}/tail{j}/bias"])
        if level > 1:
            x = _conv_relu(x, net[f"dec/l{level}/reduce/weight"], net[f"dec/l{level}/reduce/bias"])
    x = _conv_relu(x, net["dec/head/c0/weight"], net["dec/head/c0/bias"])
    return T.sigmoid(T.conv2d(x, net["dec/head/c1/weight"], net["dec/head/c1/bias"], stride=1, pad=1))


def forward_gt(net: Network, i_obs: Tensor, r_hat: Tensor) -> tuple[Tensor, list[MaskLevel]]:
    """Transmission estimate and the four decoder-level mask pairs."""
    if net.kind != "g_t":
        raise ValueError(f"forward_gt needs a g_t network, got {net.kind!r}")
    if i_obs.shape != r_hat.shape:
        raise ValueError(f"forward_gt: observation shape {i_obs.shape} != reflection shape {r_hat.shape}")
    _check_spatial(i_obs, "forward_gt")
    f_obs = _encoder_forward(net, "enc_obs", i_obs, stages=5)
    f_refl = _encoder_forward(net, "enc_refl", r_hat, stages=4)
    return _guided_decoder(net, f_obs, f_refl)


def forward_one_stage(net: Network, i_obs: Tensor) -> tuple[Tensor, list[MaskLevel]]:
    if net.kind != "one_stage":
        raise ValueError(f"forward_one_stage needs a one_stage network, got {net.kind!r}")
    _check_spatial(i_obs, "forward_one_stage")
    f_obs = _encoder_forward(net, "enc_obs", i_obs, stages=5)
    return _guided_decoder(net, f_obs, None)


def forward_discriminator(net: Network, i_obs: Tensor, t_candidate: Tensor) -> Tensor:
    """Realness score in (0,1): 4 stride-2 convs, global mean, sigmoid."""
    if net.kind != "discriminator":
        raise ValueError(f"forward_discriminator needs a discriminator network, got {net.kind!r}")
    if i_obs.shape != t_candidate.shape:
        raise ValueError(f"forward_discriminator: shapes differ, {i_obs.shape} vs {t_candidate.shape}")
    x = T.concat_channels(i_obs, t_candidate)
    for j in range(len(DISC_WIDTHS)):
        x = T.leaky_relu(T.conv2d(x, net[f"disc/c{j}/weight"], net[f"disc/c{j}/bias"], stride=2, pad=1), 0.2)
    return T.sigmoid(T.reduce_mean(x))


def extract_features(net: Network, x: Tensor) -> list[Tensor]:
    """Five-stage frozen feature pyramid with stride-2 pooling between stages."""
    if net.kind != "percep_extractor":
        raise ValueError(f"extract_features needs a percep_extractor network, got {net.kind!r}")
    feats = []
    for j in range(len(ENC_STAGE_WIDTHS)):
        if j > 0:
            x = T.downsample2x(x)
        x = _conv_relu(x, net[f"feat/s{j}/weight"], net[f"feat/s{j}/bias"])
        feats.append(x)
    return feats


# ---------------------------------------------------------------------------
# inference-size helpers

def pad_to_multiple(img: np.ndarray, multiple: int = 16) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad an NCHW array so H and W become multiples of ``multiple``."""
    _, _, h, w = img.shape
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return img, (ph, pw)


def crop_padding(img: np.ndarray, pads: tuple[int, int]) -> np.ndarray:
    ph, pw = pads
    if ph:
        img = img[:, :, :-ph, :]
    if pw:
        img = img[:, :, :, :-pw]
    return img
