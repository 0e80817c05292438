"""Tiny shape-preserving conv network whose parameters live in one flat vector.

A stack of reflect-padded odd-kernel convs with relu between them and an
optional global residual connection, so with all-zero parameters the residual
net is the identity map. Small enough that finite-difference Hessians over
the whole parameter vector stay affordable.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import ParamVector, Tensor, active_graph, add, conv2d, relu

__all__ = [
    "NetConfig", "RestorationNet", "init", "forward", "with_params",
    "param_count", "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"DILNET v1"


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    hidden_channels: int = 16
    num_layers: int = 3
    kernel_size: int = 3
    residual: bool = True

    def __post_init__(self):
        if min(self.in_channels, self.hidden_channels, self.num_layers, self.kernel_size) < 1:
            raise ValueError(f"all NetConfig sizes must be positive: {self}")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd for symmetric padding, got {self.kernel_size}")
        if self.residual and self.num_layers < 2:
            raise ValueError("a residual net needs num_layers >= 2")

    def layer_plan(self):
        """(in, out) channel pair per conv layer."""
        if self.num_layers == 1:
            return [(self.in_channels, self.in_channels)]
        plan = [(self.in_channels, self.hidden_channels)]
        plan += [(self.hidden_channels, self.hidden_channels)] * (self.num_layers - 2)
        plan += [(self.hidden_channels, self.in_channels)]
        return plan


def param_count(config):
    k = config.kernel_size
    return sum(co * ci * k * k + co for ci, co in config.layer_plan())


class RestorationNet:
    """A NetConfig plus its parameters; treated as immutable after construction."""

    __slots__ = ("config", "params")

    def __init__(self, config, params):
        expected = param_count(config)
        if len(params) != expected:
            raise ValueError(f"parameter vector has {len(params)} values, config needs {expected}")
        self.config = config
        self.params = params

    def forward(self, x):
        return forward(self, x)

    def __repr__(self):
        return f"RestorationNet({self.config}, {len(self.params)} params)"


def init(config, seed):
    """He-normal kernels (std sqrt(2/fan_in)), zero biases, deterministic in seed."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    k = config.kernel_size
    arrays = []
    for i, (ci, co) in enumerate(config.layer_plan()):
        std = np.sqrt(2.0 / (ci * k * k))
        arrays.append((f"conv{i}.weight", rng.normal(0.0, std, size=(co, ci, k, k))))
        arrays.append((f"conv{i}.bias", np.zeros(co)))
    return RestorationNet(config, ParamVector.from_arrays(arrays))


def with_params(net, theta):
    """The same architecture viewed through a different parameter vector.

    The data is copied, so mutating one net's parameters never leaks into
    another's.
    """
    if len(theta) != len(net.params):
        raise ValueError(f"length mismatch: {len(theta)} vs {len(net.params)}")
    return RestorationNet(net.config, theta.copy())


def forward(net, x):
    """Run the net; output shape equals input shape.

    Inside an active Graph the parameters are registered as leaves and the
    whole computation is recorded; otherwise this is a plain numpy evaluation.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    cfg = net.config
    if x.data.ndim != 4 or x.data.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input [batch, {cfg.in_channels}, h, w], got {x.data.shape}")
    if min(x.data.shape[2], x.data.shape[3]) < cfg.kernel_size:
        raise ValueError(f"spatial dims {x.data.shape[2:]} smaller than kernel {cfg.kernel_size}")

    g = active_graph()
    if g is not None:
        leaves = g.register_params(net.params)
    else:
        leaves = [Tensor(net.params.array(name)) for name in net.params.names()]
    layers = [(leaves[2 * i], leaves[2 * i + 1]) for i in range(cfg.num_layers)]

    h = x
    for i, (w, b) in enumerate(layers):
        h = conv2d(h, w, b)
        if i < cfg.num_layers - 1:
            h = relu(h)
    if cfg.residual:
        h = add(x, h)
    return h


# ---------------------------------------------------------------------------
# checkpoint container: "DILNET v1" header, then per segment one text line
# "<name> <d0>,<d1>,..." followed by the raw little-endian float64 payload.

def save_checkpoint(path, pv):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b"\n")
        f.write(f"{len(pv.segments)}\n".encode("ascii"))
        for name, shape, off in pv.segments:
            size = int(np.prod(shape)) if shape else 1
            f.write(f"{name} {','.join(str(d) for d in shape)}\n".encode("ascii"))
            f.write(pv.data[off:off + size].astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint header {magic!r}")
        count = int(f.readline())
        arrays = []
        for _ in range(count):
            line = f.readline().decode("ascii").rstrip("\n")
            name, dims = line.split(" ", 1)
            shape = tuple(int(d) for d in dims.split(",") if d)
            size = int(np.prod(shape)) if shape else 1
            raw = f.read(size * 8)
            if len(raw) != size * 8:
                raise ValueError(f"{path}: truncated segment {name!r}")
            arrays.append((name, np.frombuffer(raw, dtype="<f8").reshape(shape)))
        return ParamVector.from_arrays(arrays)
