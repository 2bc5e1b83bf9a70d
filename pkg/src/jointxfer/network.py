"""The emotion CNN: parameter layout, initialization, forward and backward.

Parameters live in one ordered ``name -> ndarray`` table. Names carry their
group as a prefix:

    e.*       feature extractor (conv blocks, GN affine, hidden FC layers)
    class1.*  first classifier head
    class2.*  second classifier head
    match.*   optional matching projection
    norm.*    input normalization statistics (not trainable)
"""

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .losses import MatchHead

GROUPS = ("e", "class1", "class2", "match")

# std of a standard normal truncated to [-2, 2]
_TRUNC_STD = 0.87962566103423978
# variance-scaling factor: 2.0 (He) for conv / hidden FC, small for softmax
# heads so a fresh model predicts near-uniform probabilities
HIDDEN_SCALE = 2.0
HEAD_SCALE = 0.1


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 64
    in_channels: int = 3
    conv_filters: tuple = (64, 128, 256, 512)
    fc_dims: tuple = (512, 128, 32, 6)
    gn_groups: int = 32  # per layer: min(gn_groups, C)
    gn_eps: float = 1e-5
    lrelu_slope: float = 0.01
    dropout_rate: float = 0.5
    margin: float = 1.0
    match_projection: bool = False

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(c) for c in self.conv_filters))
        object.__setattr__(self, "fc_dims", tuple(int(d) for d in self.fc_dims))
        self.validate()

    def validate(self):
        if not self.conv_filters:
            raise ConfigError("conv_filters: need at least one conv block")
        if len(self.fc_dims) < 2:
            raise ConfigError("fc_dims: need at least a feature layer and a classifier")
        if self.input_size <= 0 or self.input_size % (2 ** len(self.conv_filters)):
            raise ConfigError(
                f"input_size: {self.input_size} not divisible by "
                f"{2 ** len(self.conv_filters)} (one 2x2 pool per conv block)")
        if self.gn_groups <= 0:
            raise ConfigError("gn_groups: must be positive")
        for c in self.conv_filters:
            if c <= 0 or c % self.groups_for(c):
                raise ConfigError(f"conv_filters: {c} channels not divisible by GN groups")
        if any(d <= 0 for d in self.fc_dims):
            raise ConfigError("fc_dims: all dimensions must be positive")
        if not 0.0 < self.lrelu_slope < 1.0:
            raise ConfigError("lrelu_slope: must be in (0,1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate: must be in [0,1)")
        if not self.margin > 0:
            raise ConfigError("margin: must be positive")

    def groups_for(self, channels):
        return min(self.gn_groups, channels)

    @property
    def n_classes(self):
        return self.fc_dims[-1]

    @property
    def feature_dim(self):
        return self.fc_dims[-2]

    @property
    def flat_dim(self):
        side = self.input_size // 2 ** len(self.conv_filters)
        return self.conv_filters[-1] * side * side

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        d["fc_dims"] = list(self.fc_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown arch fields: {sorted(unknown)}")
        return cls(**d)


FULL_ARCH = ArchConfig()
# Narrow variant used for CPU-scale experiments; same topology and input size.
DESK_ARCH = ArchConfig(conv_filters=(8, 16, 32, 256), fc_dims=(256, 128, 32, 6))


def param_shapes(arch):
    """Ordered ``name -> shape`` table for every tensor of the model."""
    shapes = {}
    c_in = arch.in_channels
    for i, c in enumerate(arch.conv_filters, 1):
        shapes[f"e.conv{i}.w"] = (c, c_in, 3, 3)
        shapes[f"e.conv{i}.b"] = (c,)
        shapes[f"e.gn{i}.gamma"] = (c,)
        shapes[f"e.gn{i}.beta"] = (c,)
        c_in = c
    d_in = arch.flat_dim
    for i, d in enumerate(arch.fc_dims[:-1], 1):
        shapes[f"e.fc{i}.w"] = (d, d_in)
        shapes[f"e.fc{i}.b"] = (d,)
        d_in = d
    for head in ("class1", "class2"):
        shapes[f"{head}.w"] = (arch.n_classes, arch.feature_dim)
        shapes[f"{head}.b"] = (arch.n_classes,)
    if arch.match_projection:
        shapes["match.w"] = (arch.feature_dim, arch.feature_dim)
        shapes["match.b"] = (arch.feature_dim,)
    shapes["norm.mean"] = (arch.in_channels,)
    shapes["norm.std"] = (arch.in_channels,)
    return shapes


def count_parameters(arch):
    """Number of trainable scalars (normalization buffers excluded)."""
    return sum(int(np.prod(s)) for n, s in param_shapes(arch).items()
               if not n.startswith("norm."))


def group_of(name):
    return name.split(".", 1)[0]


def is_conv_param(name):
    return name.startswith(("e.conv", "e.gn"))


@dataclass
class ModelParams:
    arch: ArchConfig
    tensors: dict = field(default_factory=dict)

    def names(self, group=None):
        if group is None:
            return [n for n in self.tensors if group_of(n) in GROUPS]
        return [n for n in self.tensors if group_of(n) == group]

    def group(self, group):
        return {n: self.tensors[n] for n in self.names(group)}

    @property
    def theta_e(self):
        return self.group("e")

    def head(self, k):
        if k not in (1, 2):
            raise ConfigError(f"head must be 1 or 2, got {k}")
        return self.tensors[f"class{k}.w"], self.tensors[f"class{k}.b"]

    def match_head(self, margin=None):
        margin = self.arch.margin if margin is None else margin
        if self.arch.match_projection:
            return MatchHead(margin, self.tensors["match.w"], self.tensors["match.b"])
        return MatchHead(margin)

    def copy(self):
        return ModelParams(self.arch, {n: t.copy() for n, t in self.tensors.items()})


def _variance_scaling(rng, shape, fan_in, scale=HIDDEN_SCALE):
    std = np.sqrt(scale / fan_in) / _TRUNC_STD
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def build_model(arch=FULL_ARCH, seed=0):
    """Fresh parameters: truncated-normal variance scaling for every weight
    matrix (std ``sqrt(scale / fan_in)``), zero biases, identity GN affine
    and match projection. Bit-reproducible for a given seed."""
    arch.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(arch).items():
        if name == "match.w":
            tensors[name] = np.eye(shape[0])
        elif name == "norm.std":
            tensors[name] = np.ones(shape)
        elif name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            scale = HEAD_SCALE if name.startswith("class") else HIDDEN_SCALE
            tensors[name] = _variance_scaling(rng, shape, fan_in, scale)
        elif name.endswith(".gamma"):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return ModelParams(arch, tensors)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _check_input(x, arch):
    expect = (arch.in_channels, arch.input_size, arch.input_size)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise DimensionError(f"expected input [N,{','.join(map(str, expect))}], got {x.shape}")


def forward_features(x, params, mode="eval", rng=None, keep_cache=False,
                     skip_conv_grad=False):
    """Map inputs ``[N,C,S,S]`` to features ``[N, feature_dim]``.

    Each conv block is conv -> LReLU -> GN -> dropout -> 2x2 max-pool; the
    flattened map then runs through the hidden FC layers, each followed by
    LReLU. With ``keep_cache`` the call returns ``(f, cache)`` for
    :func:`backward_features`.
    """
    arch = params.arch
    t = params.tensors
    x = np.asarray(x, dtype=nx.DTYPE)
    _check_input(x, arch)
    h = (x - t["norm.mean"][None, :, None, None]) / t["norm.std"][None, :, None, None]
    caches = []
    for i, c in enumerate(arch.conv_filters, 1):
        h, c_conv = nx.conv2d_forward(h, t[f"e.conv{i}.w"], t[f"e.conv{i}.b"])
        h, c_act = nx.leaky_relu_forward(h, arch.lrelu_slope)
        h, c_gn = nx.group_norm_forward(h, t[f"e.gn{i}.gamma"], t[f"e.gn{i}.beta"],
                                        arch.groups_for(c), arch.gn_eps)
        h, mask = nx.dropout(h, arch.dropout_rate, mode, rng)
        h, c_pool = nx.maxpool2x2_forward(h)
        if keep_cache:
            caches.append(("conv", i, c_conv, c_act, c_gn, mask, c_pool))
    conv_shape = h.shape
    h = h.reshape(h.shape[0], -1)
    for i in range(1, len(arch.fc_dims)):
        h, c_fc = nx.fc_forward(h, t[f"e.fc{i}.w"], t[f"e.fc{i}.b"])
        h, c_act = nx.leaky_relu_forward(h, arch.lrelu_slope)
        if keep_cache:
            caches.append(("fc", i, c_fc, c_act))
    if keep_cache:
        return h, {"layers": caches, "conv_shape": conv_shape,
                   "skip_conv_grad": skip_conv_grad}
    return h


def backward_features(df, cache):
    """Backpropagate ``dL/df`` to every ``e.*`` tensor.

    When the forward ran with ``skip_conv_grad`` the walk stops at the first
    FC layer and conv-block gradients are omitted.
    """
    grads = {}
    dh = df
    for entry in reversed(cache["layers"]):
        if entry[0] == "fc":
            _, i, c_fc, c_act = entry
            dh = nx.leaky_relu_backward(dh, c_act).d_input
            g = nx.fc_backward(dh, c_fc)
            grads[f"e.fc{i}.w"], grads[f"e.fc{i}.b"] = g.d_params
            dh = g.d_input
            if i == 1:
                if cache["skip_conv_grad"]:
                    break
                dh = dh.reshape(cache["conv_shape"])
        else:
            _, i, c_conv, c_act, c_gn, mask, c_pool = entry
            dh = nx.maxpool2x2_backward(dh, c_pool).d_input
            dh = dh * mask
            g = nx.group_norm_backward(dh, c_gn)
            grads[f"e.gn{i}.gamma"], grads[f"e.gn{i}.beta"] = g.d_params
            dh = nx.leaky_relu_backward(g.d_input, c_act).d_input
            g = nx.conv2d_backward(dh, c_conv)
            grads[f"e.conv{i}.w"], grads[f"e.conv{i}.b"] = g.d_params
            dh = g.d_input
    return grads


def logits(f, head, params):
    w, b = params.head(head)
    return f @ w.T + b


def classify(f, head, params):
    """Class probabilities ``softmax(f @ W.T + b)`` from head 1 or 2."""
    return nx.softmax(logits(f, head, params))
