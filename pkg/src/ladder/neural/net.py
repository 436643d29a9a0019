"""Corner-regression CNN: configuration, parameters and the composed passes.

Each conv block is conv3x3 -> batch norm -> ReLU [-> 2x2 max pool]. The
flattened features go through hidden FC+ReLU layers and a final linear FC
with 16 outputs (x, y of four central corners then four upper corners) in
patch pixels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L

N_OUTPUTS = 16


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    pool: bool = True


@dataclass(frozen=True)
class NetConfig:
    input_size: int
    conv_blocks: tuple[ConvBlock, ...]
    fc_sizes: tuple[int, ...]
    name: str = "custom"

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        object.__setattr__(self, "fc_sizes", tuple(int(s) for s in self.fc_sizes))
        if not self.fc_sizes or self.fc_sizes[-1] != N_OUTPUTS:
            raise ValueError(f"fc_sizes must end in {N_OUTPUTS}, got {self.fc_sizes}")
        if self.input_size < 1 or not blocks:
            raise ValueError("need input_size >= 1 and at least one conv block")
        if self.feature_size()[1] < 1:
            raise ValueError("too much pooling for this input size")

    def feature_size(self) -> tuple[int, int]:
        """(channels, side) of the last conv block's output."""
        side = self.input_size
        for b in self.conv_blocks:
            if b.pool:
                side //= 2
        return self.conv_blocks[-1].out_channels, side

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_size": self.input_size,
            "conv_blocks": [[b.out_channels, b.pool] for b in self.conv_blocks],
            "fc_sizes": list(self.fc_sizes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(
            input_size=int(d["input_size"]),
            conv_blocks=tuple(ConvBlock(int(c), bool(p)) for c, p in d["conv_blocks"]),
            fc_sizes=tuple(d["fc_sizes"]),
            name=d.get("name", "custom"),
        )


# Exact channel widths are unknown; "paper" is
# a VGG-F-like approximation, "desk" is sized for CPU training in minutes.
PRESETS = {
    "paper": NetConfig(
        224,
        tuple(ConvBlock(c) for c in (64, 256, 256, 256, 256)),
        (4096, 16),
        name="paper",
    ),
    "desk": NetConfig(56, (ConvBlock(8), ConvBlock(16), ConvBlock(32)), (64, 16), name="desk"),
}


def get_preset(name: str) -> NetConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown net preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class NetParams:
    """Weights, batch-norm buffers and Adam state, keyed by layer name."""

    tensors: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    BUFFER_SUFFIXES = (".running_mean", ".running_var")

    def trainable(self) -> list[str]:
        return [k for k in self.tensors if not k.endswith(self.BUFFER_SUFFIXES)]

    def copy(self) -> "NetParams":
        return NetParams(
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
            self.step,
        )

    def astype(self, dtype) -> "NetParams":
        cast = lambda d: {k: v.astype(dtype) for k, v in d.items()}  # noqa: E731
        return NetParams(cast(self.tensors), cast(self.adam_m), cast(self.adam_v), self.step)

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def __getitem__(self, key):
        return self.tensors[key]


def init_params(cfg: NetConfig, seed: int = 0, dtype=np.float32) -> NetParams:
    """He-normal weights, zero biases, unit/zero batch-norm affine terms."""
    rng = np.random.default_rng(seed)
    t: dict[str, np.ndarray] = {}
    cin = 1
    for i, b in enumerate(cfg.conv_blocks):
        fan_in = cin * 9
        t[f"conv{i}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (b.out_channels, cin, 3, 3))
        t[f"conv{i}.b"] = np.zeros(b.out_channels)
        t[f"bn{i}.gamma"] = np.ones(b.out_channels)
        t[f"bn{i}.beta"] = np.zeros(b.out_channels)
        t[f"bn{i}.running_mean"] = np.zeros(b.out_channels)
        t[f"bn{i}.running_var"] = np.ones(b.out_channels)
        cin = b.out_channels
    c, side = cfg.feature_size()
    fin = c * side * side
    for j, fout in enumerate(cfg.fc_sizes):
        t[f"fc{j}.w"] = rng.normal(0.0, np.sqrt(2.0 / fin), (fout, fin))
        t[f"fc{j}.b"] = np.zeros(fout)
        fin = fout
    return NetParams({k: v.astype(dtype) for k, v in t.items()})


def net_forward(cfg: NetConfig, params: NetParams, x: np.ndarray, mode: str = "eval", update_stats: bool = True):
    """Run the network on an (N, 1, S, S) batch; returns (outputs (N, 16), cache).

    In train mode with ``update_stats`` the batch-norm running statistics in
    ``params`` are updated in place.
    """
    if x.ndim != 4 or x.shape[1:] != (1, cfg.input_size, cfg.input_size):
        raise L.ShapeError(f"expected (N, 1, {cfg.input_size}, {cfg.input_size}), got {x.shape}")
    p = params.tensors
    x = x.astype(params.dtype, copy=False)
    caches = []
    h = x
    for i, b in enumerate(cfg.conv_blocks):
        h, c_conv = L.conv2d_forward(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
        h, c_bn = L.batchnorm_forward(
            h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], p[f"bn{i}.running_mean"], p[f"bn{i}.running_var"], mode
        )
        if mode == "train" and update_stats:
            p[f"bn{i}.running_mean"] = c_bn["new_mean"].astype(params.dtype)
            p[f"bn{i}.running_var"] = c_bn["new_var"].astype(params.dtype)
        h, c_relu = L.relu_forward(h)
        c_pool = None
        if b.pool:
            h, c_pool = L.maxpool_forward(h)
        caches.append((c_conv, c_bn, c_relu, c_pool))
    feat_shape = h.shape
    h = h.reshape(h.shape[0], -1)
    fc_caches = []
    n_fc = len(cfg.fc_sizes)
    for j in range(n_fc):
        h, c_fc = L.fc_forward(h, p[f"fc{j}.w"], p[f"fc{j}.b"])
        c_relu = None
        if j < n_fc - 1:
            h, c_relu = L.relu_forward(h)
        fc_caches.append((c_fc, c_relu))
    return h, (caches, feat_shape, fc_caches)


def activation_pattern(cache) -> bytes:
    """Fingerprint of the ReLU masks and pooling argmaxes recorded in a forward cache."""
    caches, _, fc_caches = cache
    parts = []
    for _, _, c_relu, c_pool in caches:
        parts.append(np.packbits(c_relu).tobytes())
        if c_pool is not None:
            parts.append(c_pool[0].tobytes())
    parts.extend(np.packbits(c_relu).tobytes() for _, c_relu in fc_caches if c_relu is not None)
    return b"".join(parts)


def net_backward(cfg: NetConfig, cache, dout: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of every trainable tensor plus the input gradient."""
    caches, feat_shape, fc_caches = cache
    grads: dict[str, np.ndarray] = {}
    d = dout
    for j in reversed(range(len(cfg.fc_sizes))):
        c_fc, c_relu = fc_caches[j]
        if c_relu is not None:
            d = L.relu_backward(d, c_relu)
        d, grads[f"fc{j}.w"], grads[f"fc{j}.b"] = L.fc_backward(d, c_fc)
    d = d.reshape(feat_shape)
    for i in reversed(range(len(cfg.conv_blocks))):
        c_conv, c_bn, c_relu, c_pool = caches[i]
        if c_pool is not None:
            d = L.maxpool_backward(d, c_pool)
        d = L.relu_backward(d, c_relu)
        d, grads[f"bn{i}.gamma"], grads[f"bn{i}.beta"] = L.batchnorm_backward(d, c_bn)
        d, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = L.conv2d_backward(d, c_conv)
    return grads, d


def predict(cfg: NetConfig, params: NetParams, patches: np.ndarray) -> np.ndarray:
    """Eval-mode outputs for (N, S, S) or (N, 1, S, S) patches, as float64."""
    x = np.asarray(patches)
    if x.ndim == 3:
        x = x[:, None]
    out, _ = net_forward(cfg, params, x, mode="eval")
    return out.astype(np.float64)
