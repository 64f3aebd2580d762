"""Network assembly, parameter counting, forward execution, CPW1 weights.

Parameter names are `b{index:02d}_{kind}.{local}`, e.g.
`b07_aspp.rate12.dw.kernel` or `b00_conv.bn.gamma`. BN running statistics
live in `buffers` (suffix `.bn.running_mean` / `.bn.running_var`) and are
serialized alongside the trainable tensors but excluded from the
trainable-parameter count.

CPW1 weights file (little-endian): magic "CPW1"; u32 tensor count; per
tensor: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims, f32 data.
Tensors are written in sorted name order so serialization is a pure
function of the contents.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .autodiff import Tensor, as_tensor
from .blocks import (
    ArchitectureConfig,
    BlockParams,
    asc_forward,
    aspp_forward,
    concat_skip_forward,
    conv_block_forward,
    head_forward,
    iru_forward,
    parse_architecture,
)
from .errors import ConfigError, FormatError, ShapeError
from .ops import bilinear_upsample

WEIGHTS_MAGIC = b"CPW1"


@dataclass
class Network:
    config: ArchitectureConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray]
    mode: str = "train"

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "inference"):
            raise ConfigError(f"mode must be train or inference, got {mode!r}")
        self.mode = mode

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()


def _he_kernel(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    fan_in = shape[1] * shape[2] * shape[3]
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


def build_network(config: ArchitectureConfig, seed: int) -> Network:
    """Instantiate parameters for `config`, deterministically from `seed`.

    Conv kernels are He-normal (fan-in); BN starts at gamma=1, beta=0 with
    zero running mean and unit running variance; the head bias starts at 0.
    """
    plan = config.plan()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    def bn(prefix: str, channels: int) -> None:
        params[f"{prefix}.bn.gamma"] = Tensor(np.ones(channels, np.float32), requires_grad=True)
        params[f"{prefix}.bn.beta"] = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        buffers[f"{prefix}.bn.running_mean"] = np.zeros(channels, np.float32)
        buffers[f"{prefix}.bn.running_var"] = np.ones(channels, np.float32)

    for i, b in enumerate(config.blocks):
        prefix = f"b{i:02d}_{b.kind.replace('-', '_')}"
        c_in = plan.in_channels[i]
        if b.kind == "conv":
            params[f"{prefix}.kernel"] = _he_kernel(rng, (b.filters, c_in, b.kernel, b.kernel))
            bn(prefix, b.filters)
        elif b.kind == "iru":
            mid = b.expansion * c_in
            params[f"{prefix}.expand.kernel"] = _he_kernel(rng, (mid, c_in, 1, 1))
            bn(f"{prefix}.expand", mid)
            params[f"{prefix}.dw.kernel"] = _he_kernel(rng, (mid, 1, 3, 3))
            bn(f"{prefix}.dw", mid)
            params[f"{prefix}.project.kernel"] = _he_kernel(rng, (b.filters, mid, 1, 1))
            bn(f"{prefix}.project", b.filters)
        elif b.kind == "asc":
            params[f"{prefix}.dw.kernel"] = _he_kernel(rng, (c_in, 1, 3, 3))
            bn(f"{prefix}.dw", c_in)
            params[f"{prefix}.pw.kernel"] = _he_kernel(rng, (b.filters, c_in, 1, 1))
            bn(f"{prefix}.pw", b.filters)
        elif b.kind == "aspp":
            width = b.filters
            params[f"{prefix}.b0.kernel"] = _he_kernel(rng, (width, c_in, 1, 1))
            bn(f"{prefix}.b0", width)
            for r in b.rates:
                params[f"{prefix}.rate{r}.dw.kernel"] = _he_kernel(rng, (c_in, 1, 3, 3))
                bn(f"{prefix}.rate{r}.dw", c_in)
                params[f"{prefix}.rate{r}.pw.kernel"] = _he_kernel(rng, (width, c_in, 1, 1))
                bn(f"{prefix}.rate{r}.pw", width)
            params[f"{prefix}.pool.kernel"] = _he_kernel(rng, (width, c_in, 1, 1))
            bn(f"{prefix}.pool", width)
            n_branches = len(b.rates) + 2
            params[f"{prefix}.fuse.kernel"] = _he_kernel(rng, (width, n_branches * width, 1, 1))
            bn(f"{prefix}.fuse", width)
        elif b.kind == "concat-skip":
            tap_c = plan.tap_channels[b.skip]
            params[f"{prefix}.reduce.kernel"] = _he_kernel(rng, (b.filters, tap_c, 1, 1))
            bn(f"{prefix}.reduce", b.filters)
        elif b.kind == "head":
            params[f"{prefix}.kernel"] = _he_kernel(rng, (1, c_in, 1, 1))
            params[f"{prefix}.bias"] = Tensor(np.zeros(1, np.float32), requires_grad=True)
        # upsample has no parameters
    return Network(config=config, params=params, buffers=buffers)


def count_params(net: Network) -> int:
    """Trainable scalars only: kernels, biases, BN gamma/beta."""
    return sum(t.data.size for t in net.params.values())


def _block_view(net: Network, prefix: str) -> BlockParams:
    p = prefix + "."
    return BlockParams(
        {k[len(p):]: v for k, v in net.params.items() if k.startswith(p)},
        {k[len(p):]: v for k, v in net.buffers.items() if k.startswith(p)},
    )


def forward(net: Network, batch) -> Tensor:
    """Run the whole network; returns per-pixel probabilities (n, 1, H, W)."""
    x = as_tensor(batch)
    if x.data.ndim != 4:
        raise ShapeError(f"batch must be 4-D (n, c, h, w), got {x.data.ndim}-D")
    plan = net.config.plan()
    n, c, h, w = x.shape
    if c != net.config.input_channels:
        raise ShapeError(
            f"batch has {c} channels, network expects {net.config.input_channels}"
        )
    stride = plan.total_downstride
    if h % stride != 0 or w % stride != 0:
        raise ShapeError(
            f"spatial dims {h}x{w} must be multiples of the encoder stride {stride}"
        )
    taps: dict[str, Tensor] = {}
    cur = x
    for i, b in enumerate(net.config.blocks):
        prefix = f"b{i:02d}_{b.kind.replace('-', '_')}"
        pv = _block_view(net, prefix)
        if b.kind == "conv":
            cur = conv_block_forward(cur, b, pv, net.mode)
        elif b.kind == "iru":
            cur = iru_forward(cur, b, pv, net.mode)
        elif b.kind == "asc":
            cur = asc_forward(cur, b, pv, net.mode)
        elif b.kind == "aspp":
            cur = aspp_forward(cur, b.rates, pv, net.mode)
        elif b.kind == "upsample":
            cur = bilinear_upsample(cur, b.stride)
        elif b.kind == "concat-skip":
            cur = concat_skip_forward(cur, taps[b.skip], pv, net.mode)
        elif b.kind == "head":
            cur = head_forward(cur, pv)
        if b.tap:
            taps[b.tap] = cur
    return cur


def write_weights(path, arrays: dict[str, np.ndarray]) -> None:
    """Serialize named float32 tensors to CPW1 (sorted by name)."""
    names = sorted(arrays)
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF:
                raise ConfigError(f"tensor name too long: {name[:40]}...")
            if arr.ndim > 0xFF:
                raise ConfigError(f"tensor {name} has too many dims")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_weights(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: not a CPW1 weights file")
    (count,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, offset)
            offset += 2
            name = raw[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<B", raw, offset)
            offset += 1
            dims = struct.unpack_from(f"<{ndim}I", raw, offset)
            offset += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            end = offset + 4 * size
            if end > len(raw):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            data = np.frombuffer(raw, dtype="<f4", count=size, offset=offset)
            arrays[name] = data.astype(np.float32).reshape(dims)
            offset = end
    except struct.error:
        raise FormatError(f"{path}: truncated header") from None
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays


def save_network(net: Network, path) -> None:
    arrays = {name: t.data for name, t in net.params.items()}
    arrays.update(net.buffers)
    write_weights(path, arrays)


def load_network(net: Network, path) -> None:
    """Load CPW1 weights into `net`; names and shapes must match exactly."""
    arrays = read_weights(path)
    expected = set(net.params) | set(net.buffers)
    missing = expected - set(arrays)
    unexpected = set(arrays) - expected
    if missing or unexpected:
        raise ConfigError(
            f"weights do not match architecture "
            f"(missing: {sorted(missing)[:4]}, unexpected: {sorted(unexpected)[:4]})"
        )
    for name, arr in arrays.items():
        target = net.params[name].data if name in net.params else net.buffers[name]
        if target.shape != arr.shape:
            raise ShapeError(f"tensor {name}: shape {arr.shape} != expected {target.shape}")
    for name, arr in arrays.items():
        if name in net.params:
            net.params[name].data = arr.astype(np.float32)
        else:
            net.buffers[name][...] = arr


def load_architecture(path) -> ArchitectureConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_architecture(fh.read())


def packaged_config(name: str) -> ArchitectureConfig:
    """Load one of the shipped configs ('full' or 'tiny')."""
    ref = resources.files("cloudseg").joinpath(f"configs/{name}.cfg")
    return parse_architecture(ref.read_text(encoding="utf-8"))


def packaged_config_path(name: str) -> str:
    return str(resources.files("cloudseg").joinpath(f"configs/{name}.cfg"))
