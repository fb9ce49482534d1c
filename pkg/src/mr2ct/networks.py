"""Generator and discriminator architectures over 3D patches.

The generator is fully convolutional: eight valid k=3 conv+BN+ReLU stages
(each trims 2 voxels per axis, 32^3 -> 16^3 for the default plan) followed by
a k=1 single-channel head.  The discriminator is a conventional CNN on 16^3
CT patches: three conv(same, k=5)+BN+ReLU+maxpool stages, one more k=5
convolution, then dense 512/128/1 with a sigmoid output.
"""

from __future__ import annotations

import json

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, RunningStats, Tensor

DEFAULT_GENERATOR_PLAN = [32, 32, 32, 64, 64, 64, 32, 32]
REDUCED_GENERATOR_PLAN = [8, 8, 8, 16, 16, 16, 8, 8]
DISCRIMINATOR_FILTERS = [32, 64, 128, 256]
DISCRIMINATOR_DENSE = [512, 128, 1]


class NetworkError(Exception):
    pass


def _he_normal(rng, shape, fan_in, dtype=np.float32):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class ConvBlock:
    """conv (+ optional batch norm) (+ optional activation) (+ optional pool)."""

    def __init__(self, name: str, cin: int, cout: int, k: int, padding: str,
                 rng, bn: bool = True, activation: str | None = "relu",
                 pool: bool = False):
        self.name = name
        self.k = k
        self.padding = padding
        self.activation = activation
        self.pool = pool
        fan_in = cin * k ** 3
        self.w = Parameter(_he_normal(rng, (cout, cin, k, k, k), fan_in), f"{name}.w")
        self.b = Parameter(np.zeros(cout, dtype=np.float32), f"{name}.b")
        if bn:
            self.gamma = Parameter(np.ones(cout, dtype=np.float32), f"{name}.gamma")
            self.beta = Parameter(np.zeros(cout, dtype=np.float32), f"{name}.beta")
            self.stats = RunningStats.fresh(cout)
        else:
            self.gamma = self.beta = self.stats = None

    def forward(self, x: Tensor, mode: str) -> Tensor:
        out = ad.conv3d(x, self.w, self.b, padding=self.padding)
        if self.gamma is not None:
            out = ad.batchnorm3d(out, self.gamma, self.beta, mode, self.stats)
        if self.activation == "relu":
            out = ad.relu(out)
        elif self.activation == "sigmoid":
            out = ad.sigmoid(out)
        if self.pool:
            out = ad.maxpool3d(out)
        return out

    def parameters(self) -> list[Parameter]:
        ps = [self.w, self.b]
        if self.gamma is not None:
            ps += [self.gamma, self.beta]
        return ps

    def stat_arrays(self) -> dict[str, np.ndarray]:
        if self.stats is None:
            return {}
        return {f"{self.name}.rmean": self.stats.mean, f"{self.name}.rvar": self.stats.var}


class DenseBlock:
    def __init__(self, name: str, fin: int, fout: int, rng, activation: str | None):
        self.name = name
        self.activation = activation
        self.w = Parameter(_he_normal(rng, (fout, fin), fin), f"{name}.w")
        self.b = Parameter(np.zeros(fout, dtype=np.float32), f"{name}.b")

    def forward(self, x: Tensor) -> Tensor:
        out = ad.dense(x, self.w, self.b)
        if self.activation == "relu":
            out = ad.relu(out)
        elif self.activation == "sigmoid":
            out = ad.sigmoid(out)
        return out

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]


class GeneratorNet:
    """Patch-to-patch CT estimator; contains no pooling layers."""

    def __init__(self, in_channels: int, channel_plan, seed: int):
        if in_channels not in (1, 2):
            raise NetworkError(f"generator in_channels must be 1 or 2, got {in_channels}")
        if not channel_plan:
            raise NetworkError("channel plan must be non-empty")
        self.in_channels = in_channels
        self.channel_plan = list(channel_plan)
        self.seed = seed
        self.blocks: list[ConvBlock] = []
        cin = in_channels
        for i, cout in enumerate(self.channel_plan):
            rng = np.random.default_rng([seed, i])
            self.blocks.append(ConvBlock(f"s{i:02d}", cin, cout, k=3,
                                         padding="valid", rng=rng))
            cin = cout
        rng = np.random.default_rng([seed, len(self.channel_plan)])
        self.head = ConvBlock("head", cin, 1, k=1, padding="valid", rng=rng,
                              bn=False, activation=None)

    @property
    def shrink(self) -> int:
        """Total spatial reduction (voxels per axis) from input to output."""
        return 2 * len(self.blocks)

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if x.data.ndim != 5:
            raise NetworkError(f"generator expects [N,C,X,Y,Z], got shape {x.shape}")
        if x.data.shape[1] != self.in_channels:
            raise NetworkError(
                f"generator expects {self.in_channels} input channels, got {x.data.shape[1]}")
        if any(s - self.shrink < 1 for s in x.data.shape[2:]):
            raise NetworkError(
                f"input spatial dims {x.data.shape[2:]} too small for {len(self.blocks)} "
                f"valid k=3 stages")
        out = x
        for block in self.blocks:
            out = block.forward(out, mode)
        return self.head.forward(out, mode)

    def parameters(self) -> list[Parameter]:
        ps = []
        for block in self.blocks:
            ps += block.parameters()
        return ps + self.head.parameters()

    def named_arrays(self) -> dict[str, np.ndarray]:
        arrays = {p.name: p.data for p in self.parameters()}
        for block in self.blocks:
            arrays.update(block.stat_arrays())
        return arrays

    def meta(self) -> dict:
        return {"kind": "generator", "in_channels": self.in_channels,
                "channel_plan": self.channel_plan,
                "stages": [b.name for b in self.blocks] + [self.head.name]}


class DiscriminatorNet:
    """CT-patch realness classifier: [N,1,16,16,16] -> probability in (0,1)."""

    INPUT_SIZE = 16

    def __init__(self, seed: int):
        self.seed = seed
        f1, f2, f3, f4 = DISCRIMINATOR_FILTERS
        self.blocks = [
            ConvBlock("c0", 1, f1, k=5, padding="same",
                      rng=np.random.default_rng([seed, 0]), pool=True),
            ConvBlock("c1", f1, f2, k=5, padding="same",
                      rng=np.random.default_rng([seed, 1]), pool=True),
            ConvBlock("c2", f2, f3, k=5, padding="same",
                      rng=np.random.default_rng([seed, 2]), pool=True),
            ConvBlock("c3", f3, f4, k=5, padding="same",
                      rng=np.random.default_rng([seed, 3])),
        ]
        self.flat_features = f4 * (self.INPUT_SIZE // 8) ** 3
        d1, d2, d3 = DISCRIMINATOR_DENSE
        self.dense = [
            DenseBlock("d0", self.flat_features, d1,
                       np.random.default_rng([seed, 4]), "relu"),
            DenseBlock("d1", d1, d2, np.random.default_rng([seed, 5]), "relu"),
            DenseBlock("d2", d2, d3, np.random.default_rng([seed, 6]), "sigmoid"),
        ]

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if x.data.ndim != 5 or x.data.shape[1] != 1:
            raise NetworkError(f"discriminator expects [N,1,X,Y,Z], got shape {x.shape}")
        if x.data.shape[2:] != (self.INPUT_SIZE,) * 3:
            raise NetworkError(
                f"discriminator expects {self.INPUT_SIZE}^3 patches, got {x.data.shape[2:]}")
        out = x
        for block in self.blocks:
            out = block.forward(out, mode)
        out = ad.reshape(out, (x.data.shape[0], self.flat_features))
        for layer in self.dense:
            out = layer.forward(out)
        return out

    def parameters(self) -> list[Parameter]:
        ps = []
        for block in self.blocks:
            ps += block.parameters()
        for layer in self.dense:
            ps += layer.parameters()
        return ps

    def named_arrays(self) -> dict[str, np.ndarray]:
        arrays = {p.name: p.data for p in self.parameters()}
        for block in self.blocks:
            arrays.update(block.stat_arrays())
        return arrays

    def meta(self) -> dict:
        return {"kind": "discriminator",
                "filters": DISCRIMINATOR_FILTERS, "dense": DISCRIMINATOR_DENSE}


def build_generator(in_channels: int = 1, channel_plan=None, seed: int = 0) -> GeneratorNet:
    return GeneratorNet(in_channels, channel_plan or DEFAULT_GENERATOR_PLAN, seed)


def build_discriminator(seed: int = 0) -> DiscriminatorNet:
    return DiscriminatorNet(seed)


def parameter_count(net) -> int:
    return sum(p.data.size for p in net.parameters())


def load_arrays_into(net, arrays: dict[str, np.ndarray]) -> None:
    """Overwrite a network's parameters and running stats from named arrays."""
    for p in net.parameters():
        if p.name not in arrays:
            raise NetworkError(f"checkpoint missing parameter {p.name!r}")
        if arrays[p.name].shape != p.data.shape:
            raise NetworkError(
                f"checkpoint shape {arrays[p.name].shape} != {p.data.shape} for {p.name!r}")
        p.data[...] = arrays[p.name]
    for block in net.blocks:
        if block.stats is not None:
            block.stats.mean[...] = arrays[f"{block.name}.rmean"]
            block.stats.var[...] = arrays[f"{block.name}.rvar"]


def save_network(net, ckpt_path, meta_path) -> None:
    ad.save_checkpoint(ckpt_path, net.named_arrays())
    with open(meta_path, "w") as fh:
        json.dump(net.meta(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_network(ckpt_path, meta_path):
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta["kind"] == "generator":
        net = GeneratorNet(meta["in_channels"], meta["channel_plan"], seed=0)
    elif meta["kind"] == "discriminator":
        net = DiscriminatorNet(seed=0)
    else:
        raise NetworkError(f"unknown network kind {meta['kind']!r}")
    load_arrays_into(net, ad.load_checkpoint(ckpt_path))
    return net
