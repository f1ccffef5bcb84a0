"""Multi-scale correlation network with gated cross-scale fusion.

Two images pass through a shared (Siamese) conv stack; a pooled pyramid of
feature maps is correlated per scale, the correlation volumes are encoded by
small conv stacks, fused coarse-to-fine by a convolutional GRU whose hidden
state is upsampled between scales, and a conv head regresses the flow at 1/4
resolution, which is bilinearly upsampled (with value rescaling) to match the
input images.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor, activation, concat_channels, conv2d, maxpool, transposed_conv2d
from .flow_ops import correlation, l2_normalize_channels, upsample_bilinear

__all__ = [
    "ModelConfig", "ModelParams", "ModelOutput",
    "init_model_params", "extract_shared_features", "build_pyramid",
    "correlation_pyramid", "encode_correlations", "spatial_conv_gru",
    "project_hidden", "predict_flow", "forward", "to_model_input",
    "write_model_config", "read_model_config",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; scales are ordered coarse to fine."""

    num_scales: int = 4
    max_displacements: tuple[int, ...] = (5, 5, 10, 10)
    patch_radius: int = 0
    conv1_channels: int = 64
    feat_channels: int = 128
    pyramid_channels: int = 128
    encoder_channels: int = 64
    hidden_channels: int = 64
    head_channels: int = 64
    prediction_stride: int = 4
    first_kernel: int = 7
    second_kernel: int = 5
    other_kernel: int = 3
    up_kernel: int = 4
    leaky_slope: float = 0.1
    normalize_features: bool = True

    def __post_init__(self):
        if self.num_scales < 2:
            raise ValueError("ModelConfig: num_scales must be >= 2")
        if len(self.max_displacements) != self.num_scales:
            raise ValueError(
                f"ModelConfig: expected {self.num_scales} max_displacements, "
                f"got {len(self.max_displacements)}")
        if any(d < 1 for d in self.max_displacements):
            raise ValueError("ModelConfig: every max displacement must be >= 1")
        for name in ("conv1_channels", "feat_channels", "pyramid_channels",
                     "encoder_channels", "hidden_channels", "head_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig: {name} must be positive")
        if self.prediction_stride < 1:
            raise ValueError("ModelConfig: prediction_stride must be >= 1")

    @property
    def required_multiple(self) -> int:
        """Input height/width must be divisible by this."""
        return 2 ** (self.num_scales + 1)

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Small preset for desk-scale training and finite-difference tests."""
        return cls(max_displacements=(2, 2, 3, 3), conv1_channels=8,
                   feat_channels=16, pyramid_channels=16, encoder_channels=16,
                   hidden_channels=16, head_channels=16)

    @classmethod
    def micro(cls) -> "ModelConfig":
        """Two-scale preset small enough for end-to-end finite differences."""
        return cls(num_scales=2, max_displacements=(1, 1), conv1_channels=4,
                   feat_channels=6, pyramid_channels=6, encoder_channels=6,
                   hidden_channels=5, head_channels=6)


_PRESETS = {"default": ModelConfig, "tiny": ModelConfig.tiny, "micro": ModelConfig.micro}


def preset_config(name: str) -> ModelConfig:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown model preset {name!r} (choose from {sorted(_PRESETS)})")


def write_model_config(config: ModelConfig, path) -> None:
    """Persist a config as ``key = value`` lines for reproducible inference."""
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_model_config(path) -> ModelConfig:
    known = {f.name: f for f in fields(ModelConfig)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        if key == "max_displacements":
            values[key] = tuple(int(x) for x in raw.split(","))
        elif key == "leaky_slope":
            values[key] = float(raw)
        elif key == "normalize_features":
            values[key] = raw.lower() in ("1", "true", "yes")
        else:
            values[key] = int(raw)
    return ModelConfig(**values)


class ModelParams:
    """Name-keyed registry of every learnable tensor.

    Names are stable across runs and are the record keys of the checkpoint
    format, so a save/load round-trip restores values bit-exactly.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, dtype=value.dtype.type)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def gradients(self) -> dict[str, np.ndarray | None]:
        return {name: t.grad for name, t in self._tensors.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._tensors.items()}

    def save(self, path) -> None:
        T.save_tensors(path, self._tensors)

    @classmethod
    def load(cls, path) -> "ModelParams":
        params = cls()
        for name, arr in T.load_tensors(path).items():
            params.add(name, arr)
        return params


def init_model_params(config: ModelConfig, seed: int = 0, dtype=None) -> ModelParams:
    """Seeded parameter initialisation: fan-in-scaled uniform conv weights,
    smaller uniform for the GRU gate convs, zero biases."""
    rng = np.random.default_rng(seed)
    dt = dtype or T.default_dtype()
    params = ModelParams()

    def conv(name, out_c, in_c, k, gain=1.0, bias=True):
        limit = gain / np.sqrt(in_c * k * k)
        params.add(f"{name}.w", rng.uniform(-limit, limit, size=(out_c, in_c, k, k)).astype(dt))
        if bias:
            params.add(f"{name}.b", np.zeros(out_c, dtype=dt))

    def up(name, from_c, to_c, k):
        limit = 1.0 / np.sqrt(from_c * k * k)
        # transposed-conv weight layout: (from_channels, to_channels, k, k)
        params.add(f"{name}.w", rng.uniform(-limit, limit, size=(from_c, to_c, k, k)).astype(dt))

    L = config.num_scales
    conv("feat.conv1", config.conv1_channels, 3, config.first_kernel)
    conv("feat.conv2", config.feat_channels, config.conv1_channels, config.second_kernel)
    conv("feat.conv3", config.feat_channels, config.feat_channels, config.second_kernel)
    for level in range(1, L + 1):
        conv(f"pyr.l{level}", config.pyramid_channels, config.feat_channels, config.other_kernel)
    for level, d in zip(range(1, L + 1), config.max_displacements):
        corr_ch = (2 * d + 1) ** 2
        conv(f"corr_enc.l{level}.c1", config.encoder_channels, corr_ch, config.other_kernel)
        conv(f"corr_enc.l{level}.c2", config.encoder_channels, config.encoder_channels, config.other_kernel)
        conv(f"corr_enc.l{level}.c3", config.encoder_channels, config.encoder_channels, config.other_kernel)
    for gate in ("wz", "wr", "wc"):
        conv(f"gru.{gate}", config.hidden_channels, config.encoder_channels,
             config.other_kernel, gain=0.5)
    for gate in ("uz", "ur", "uc"):
        conv(f"gru.{gate}", config.hidden_channels, config.hidden_channels,
             config.other_kernel, gain=0.5)
    up("gru.up", config.hidden_channels, config.hidden_channels, config.up_kernel)
    for level in range(1, L):
        for stage in range(L - level):
            up(f"gru.proj.l{level}.s{stage}", config.hidden_channels,
               config.hidden_channels, config.up_kernel)
    conv("head.c1", config.head_channels,
         config.feat_channels + L * config.hidden_channels, config.other_kernel)
    conv("head.c2", 2, config.head_channels, config.other_kernel)
    return params


def to_model_input(image01: np.ndarray) -> np.ndarray:
    """Map an image from [0, 1] to the [-1, 1] range the network expects."""
    return image01 * 2.0 - 1.0


def extract_shared_features(image: Tensor, params: ModelParams, config: ModelConfig):
    """Shared conv stack; returns (top features, second-conv features).

    The second-conv activations live at 1/4 input resolution and feed both the
    prediction head and the reconstruction loss.
    """
    if image.data.ndim != 4:
        raise ValueError("extract_shared_features: image must be (B,3,H,W)")
    _, _, h, w = image.data.shape
    m = config.required_multiple
    if h % m or w % m:
        raise ValueError(
            f"extract_shared_features: height and width must be multiples of {m}, got {h}x{w}")
    s = config.leaky_slope
    a = activation(conv2d(image, params["feat.conv1.w"], params["feat.conv1.b"],
                          stride=2, padding=config.first_kernel // 2), "leaky_relu", s)
    second = activation(conv2d(a, params["feat.conv2.w"], params["feat.conv2.b"],
                               stride=2, padding=config.second_kernel // 2), "leaky_relu", s)
    top = activation(conv2d(second, params["feat.conv3.w"], params["feat.conv3.b"],
                            stride=1, padding=config.second_kernel // 2), "leaky_relu", s)
    return top, second


def build_pyramid(top: Tensor, params: ModelParams, config: ModelConfig) -> list[Tensor]:
    """Pool/conv pyramid over the top features, returned coarse to fine.

    Spatial sizes double from one scale to the next.  When
    ``normalize_features`` is set, each pixel's feature vector is scaled to
    length sqrt(channels): correlation scores then become cosine similarities
    in [-1, 1] (a stable input range for the encoder convs) and the self-match
    argmax is pinned to the zero-displacement channel.
    """
    levels: list[Tensor] = []
    cur = top
    pad = config.other_kernel // 2
    gain = float(np.sqrt(config.pyramid_channels))
    for level in range(config.num_scales, 0, -1):
        f = activation(conv2d(cur, params[f"pyr.l{level}.w"], params[f"pyr.l{level}.b"],
                              stride=1, padding=pad), "leaky_relu", config.leaky_slope)
        if config.normalize_features:
            f = T.scale(l2_normalize_channels(f), gain)
        levels.append(f)
        if level > 1:
            cur = maxpool(cur, 2, 2)
    levels.reverse()
    return levels


def correlation_pyramid(pyr_a: list[Tensor], pyr_b: list[Tensor],
                        config: ModelConfig) -> list[Tensor]:
    """Per-scale correlation volumes with the configured displacement radii."""
    if len(pyr_a) != len(pyr_b) or len(pyr_a) != config.num_scales:
        raise ValueError("correlation_pyramid: pyramids must both have num_scales levels")
    return [correlation(fa, fb, d, config.patch_radius)
            for fa, fb, d in zip(pyr_a, pyr_b, config.max_displacements)]


def encode_correlations(volumes: list[Tensor], params: ModelParams,
                        config: ModelConfig) -> list[Tensor]:
    """Three same-size convs (with nonlinearity) per scale over each volume."""
    pad = config.other_kernel // 2
    out = []
    for i, vol in enumerate(volumes):
        level = i + 1
        q = vol
        for j in (1, 2, 3):
            q = activation(conv2d(q, params[f"corr_enc.l{level}.c{j}.w"],
                                  params[f"corr_enc.l{level}.c{j}.b"],
                                  stride=1, padding=pad), "leaky_relu", config.leaky_slope)
        out.append(q)
    return out


def spatial_conv_gru(encoded: list[Tensor], params: ModelParams, config: ModelConfig,
                     initial_hidden: Tensor | None = None) -> list[Tensor]:
    """Gated recurrent fusion across scales, coarse to fine.

    Per scale: update gate z = sigmoid(Wz*q + Uz*h), reset gate
    r = sigmoid(Wr*q + Ur*h), candidate c = tanh(Wc*q + Uc*(r . h)),
    new hidden h' = (1 - z) . h + z . c; between scales the hidden state is
    upsampled 2x by a stride-2 transposed convolution.  The initial hidden
    state is zero at the coarsest scale.
    """
    pad = config.other_kernel // 2
    up_pad = (config.up_kernel - 2) // 2
    hs: list[Tensor] = []
    h_up = initial_hidden
    for i, q in enumerate(encoded):
        b, _, qh, qw = q.data.shape
        if h_up is None:
            h_up = Tensor(np.zeros((b, config.hidden_channels, qh, qw), dtype=q.data.dtype))
        if h_up.data.shape[2:] != (qh, qw):
            raise ValueError(
                f"spatial_conv_gru: hidden {h_up.data.shape[2:]} does not match "
                f"input {(qh, qw)} at scale {i + 1}")

        def gate(w_name, u_name, source, hidden):
            return T.add(
                conv2d(source, params[f"gru.{w_name}.w"], params[f"gru.{w_name}.b"],
                       stride=1, padding=pad),
                conv2d(hidden, params[f"gru.{u_name}.w"], params[f"gru.{u_name}.b"],
                       stride=1, padding=pad))

        z = activation(gate("wz", "uz", q, h_up), "sigmoid")
        r = activation(gate("wr", "ur", q, h_up), "sigmoid")
        cand = activation(gate("wc", "uc", q, T.mul(r, h_up)), "tanh")
        keep = T.add_const(T.scale(z, -1.0), 1.0)
        h = T.add(T.mul(keep, h_up), T.mul(z, cand))
        hs.append(h)
        if i + 1 < len(encoded):
            h_up = transposed_conv2d(h, params["gru.up.w"], stride=2, padding=up_pad)
    return hs


def project_hidden(hs: list[Tensor], params: ModelParams, config: ModelConfig) -> list[Tensor]:
    """Upsample every hidden state to the finest scale's spatial size."""
    up_pad = (config.up_kernel - 2) // 2
    L = config.num_scales
    out = []
    for i, h in enumerate(hs):
        level = i + 1
        cur = h
        for stage in range(L - level):
            cur = transposed_conv2d(cur, params[f"gru.proj.l{level}.s{stage}.w"],
                                    stride=2, padding=up_pad)
        out.append(cur)
    return out


def predict_flow(projected: list[Tensor], second_a: Tensor, params: ModelParams,
                 config: ModelConfig) -> tuple[Tensor, Tensor]:
    """Concatenate fused maps with the image features and regress the flow.

    Returns (full-resolution flow, low-resolution flow); the full-resolution
    field is the low one bilinearly upsampled by the prediction stride with
    displacement values multiplied by the same stride.
    """
    for p in projected:
        if p.data.shape[2:] != second_a.data.shape[2:]:
            raise ValueError(
                f"predict_flow: fused map at {p.data.shape[2:]} does not match "
                f"image features at {second_a.data.shape[2:]}")
    pad = config.other_kernel // 2
    e = concat_channels([second_a] + list(projected))
    m = activation(conv2d(e, params["head.c1.w"], params["head.c1.b"],
                          stride=1, padding=pad), "leaky_relu", config.leaky_slope)
    low = conv2d(m, params["head.c2.w"], params["head.c2.b"], stride=1, padding=pad)
    full = upsample_bilinear(low, config.prediction_stride,
                             value_scale=float(config.prediction_stride))
    return full, low


@dataclass
class ModelOutput:
    flow: Tensor           # (B, 2, H, W), input resolution, pixels
    flow_lowres: Tensor    # (B, 2, H/stride, W/stride), low-res pixels
    features_a: Tensor     # second-conv features of image A
    features_b: Tensor     # second-conv features of image B


def forward(image_a: Tensor, image_b: Tensor, params: ModelParams,
            config: ModelConfig) -> ModelOutput:
    """Full pipeline from an image pair (values in [-1, 1]) to a flow field."""
    if image_a.data.shape != image_b.data.shape:
        raise ValueError(
            f"forward: image shapes differ, {image_a.data.shape} vs {image_b.data.shape}")
    top_a, second_a = extract_shared_features(image_a, params, config)
    top_b, second_b = extract_shared_features(image_b, params, config)
    pyr_a = build_pyramid(top_a, params, config)
    pyr_b = build_pyramid(top_b, params, config)
    volumes = correlation_pyramid(pyr_a, pyr_b, config)
    encoded = encode_correlations(volumes, params, config)
    hidden = spatial_conv_gru(encoded, params, config)
    projected = project_hidden(hidden, params, config)
    full, low = predict_flow(projected, second_a, params, config)
    return ModelOutput(flow=full, flow_lowres=low, features_a=second_a, features_b=second_b)
