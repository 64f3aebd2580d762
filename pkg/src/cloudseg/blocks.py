"""Composite network blocks and the declarative architecture config.

Config files are line oriented, one block per line:

    kind filters stride dilation expansion [tap=NAME|skip=NAME]

with `#` starting a comment. Kinds: conv, iru, asc, aspp, upsample,
concat-skip, head. Columns a kind does not use are written as 1. The
aspp dilation column holds a comma-separated rate list; the upsample
stride column holds the scale factor. `tap=NAME` names a block's output
for a later `concat-skip ... skip=NAME`, whose filters column is the
width the tapped features are reduced to before concatenation.

Kernel sizes are fixed per kind: conv/iru/asc use 3x3 (1x1 for the iru
expand/project and asc pointwise stages), head is 1x1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .ops import (
    BatchNormParams,
    ConvParams,
    add,
    batchnorm,
    bilinear_upsample,
    broadcast_spatial,
    concat_channels,
    conv2d,
    depthwise_conv2d,
    global_avg_pool,
    relu,
    sigmoid,
)

KINDS = ("conv", "iru", "asc", "aspp", "upsample", "concat-skip", "head")


@dataclass
class BlockSpec:
    kind: str
    filters: int = 1
    stride: int = 1
    dilation: int = 1
    rates: tuple[int, ...] = ()  # aspp only
    expansion: int = 1           # iru only
    kernel: int = 3
    tap: str | None = None
    skip: str | None = None


@dataclass
class ArchitectureConfig:
    blocks: list[BlockSpec] = field(default_factory=list)
    input_channels: int = 4

    def plan(self) -> "ArchitecturePlan":
        """Resolve per-block channels/scales; raises ConfigError on bad wiring."""
        return _plan(self)


@dataclass
class ArchitecturePlan:
    in_channels: list[int]
    out_channels: list[int]
    scales: list[int]           # downsampling factor after each block
    tap_channels: dict[str, int]
    total_downstride: int


def _plan(config: ArchitectureConfig) -> ArchitecturePlan:
    if not config.blocks:
        raise ConfigError("architecture has no blocks")
    cur = config.input_channels
    scale = 1
    total = 1
    taps: dict[str, int] = {}
    tap_scales: dict[str, int] = {}
    cin, cout, scales = [], [], []
    head_seen = False
    for i, b in enumerate(config.blocks):
        if b.kind not in KINDS:
            raise ConfigError(f"block {i}: unknown kind {b.kind!r}")
        if head_seen and b.kind != "upsample":
            raise ConfigError(f"block {i}: only upsample may follow the head")
        if b.filters < 1:
            raise ConfigError(f"block {i}: filters must be >= 1, got {b.filters}")
        cin.append(cur)
        if b.kind in ("conv", "iru", "asc"):
            if b.stride not in (1, 2):
                raise ConfigError(f"block {i}: stride must be 1 or 2, got {b.stride}")
            if b.kind == "iru" and b.expansion < 1:
                raise ConfigError(f"block {i}: iru expansion must be >= 1")
            cur = b.filters
            scale *= b.stride
            total *= b.stride
        elif b.kind == "aspp":
            if not b.rates:
                raise ConfigError(f"block {i}: aspp needs a non-empty rate list")
            if b.stride != 1:
                raise ConfigError(f"block {i}: aspp stride must be 1")
            cur = b.filters
        elif b.kind == "upsample":
            if b.stride < 1:
                raise ConfigError(f"block {i}: upsample factor must be >= 1")
            if scale % b.stride != 0:
                raise ConfigError(
                    f"block {i}: upsample factor {b.stride} does not divide "
                    f"current downsampling {scale}"
                )
            scale //= b.stride
        elif b.kind == "concat-skip":
            if not b.skip:
                raise ConfigError(f"block {i}: concat-skip requires skip=NAME")
            if b.skip not in taps:
                raise ConfigError(f"block {i}: skip reference {b.skip!r} has no earlier tap")
            if tap_scales[b.skip] != scale:
                raise ConfigError(
                    f"block {i}: skip {b.skip!r} is at downsampling "
                    f"{tap_scales[b.skip]}, current is {scale}"
                )
            cur = cur + b.filters
        elif b.kind == "head":
            if b.filters != 1:
                raise ConfigError(f"block {i}: head must have 1 filter, got {b.filters}")
            cur = 1
            head_seen = True
        if b.tap:
            taps[b.tap] = cur
            tap_scales[b.tap] = scale
        cout.append(cur)
        scales.append(scale)
    if not head_seen:
        raise ConfigError("architecture has no head block")
    if cur != 1:
        raise ConfigError(f"final channel count is {cur}, expected 1")
    if scale != 1:
        raise ConfigError(f"final output is downsampled {scale}x, expected input resolution")
    return ArchitecturePlan(cin, cout, scales, taps, total)


def parse_architecture(text: str, input_channels: int = 4) -> ArchitectureConfig:
    """Parse the line-oriented block format; strict about every field."""
    blocks: list[BlockSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (5, 6):
            raise ConfigError(
                f"line {lineno}: expected 'kind filters stride dilation expansion "
                f"[tap=NAME|skip=NAME]', got {len(fields)} fields"
            )
        kind = fields[0]
        if kind not in KINDS:
            raise ConfigError(f"line {lineno}: unknown block kind {kind!r}")
        try:
            filters = int(fields[1])
            stride = int(fields[2])
            expansion = int(fields[4])
        except ValueError as e:
            raise ConfigError(f"line {lineno}: {e}") from None
        rates: tuple[int, ...] = ()
        dilation = 1
        if kind == "aspp":
            try:
                rates = tuple(int(r) for r in fields[3].split(","))
            except ValueError:
                raise ConfigError(f"line {lineno}: bad aspp rate list {fields[3]!r}") from None
            if any(r < 1 for r in rates):
                raise ConfigError(f"line {lineno}: aspp rates must be >= 1")
        else:
            try:
                dilation = int(fields[3])
            except ValueError:
                raise ConfigError(f"line {lineno}: bad dilation {fields[3]!r}") from None
            if dilation < 1:
                raise ConfigError(f"line {lineno}: dilation must be >= 1")
        tap = skip = None
        if len(fields) == 6:
            key, _, value = fields[5].partition("=")
            if key == "tap" and value:
                tap = value
            elif key == "skip" and value:
                skip = value
            else:
                raise ConfigError(f"line {lineno}: expected tap=NAME or skip=NAME, got {fields[5]!r}")
        blocks.append(
            BlockSpec(
                kind=kind, filters=filters, stride=stride, dilation=dilation,
                rates=rates, expansion=expansion, kernel=1 if kind == "head" else 3,
                tap=tap, skip=skip,
            )
        )
    config = ArchitectureConfig(blocks=blocks, input_channels=input_channels)
    config.plan()
    return config


class BlockParams:
    """Name-indexed view of one block's tensors and running-stat buffers."""

    def __init__(self, tensors: dict[str, Tensor], buffers: dict[str, "np.ndarray"]):
        self.tensors = tensors
        self.buffers = buffers

    def sub(self, prefix: str) -> "BlockParams":
        p = prefix + "."
        return BlockParams(
            {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)},
            {k[len(p):]: v for k, v in self.buffers.items() if k.startswith(p)},
        )

    def t(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise ShapeError(f"missing parameter {name!r}") from None

    def buf(self, name: str):
        try:
            return self.buffers[name]
        except KeyError:
            raise ShapeError(f"missing buffer {name!r}") from None

    def bn(self, stage: str, mode: str) -> BatchNormParams:
        base = f"{stage}.bn" if stage else "bn"
        return BatchNormParams(
            gamma=self.t(f"{base}.gamma"),
            beta=self.t(f"{base}.beta"),
            running_mean=self.buf(f"{base}.running_mean"),
            running_var=self.buf(f"{base}.running_var"),
            mode=mode,
        )


def _staged(stage: str, fn):
    try:
        return fn()
    except ShapeError as e:
        raise ShapeError(f"{stage}: {e}") from None


def conv_block_forward(x: Tensor, spec: BlockSpec, pv: BlockParams, mode: str) -> Tensor:
    """conv -> BN -> ReLU (the bias lives in BN's beta)."""
    y = _staged("conv", lambda: conv2d(
        x, ConvParams(kernel=pv.t("kernel"), stride=spec.stride, dilation=spec.dilation)
    ))
    y = _staged("conv", lambda: batchnorm(y, pv.bn("", mode)))
    return relu(y)


def iru_forward(x: Tensor, spec: BlockSpec, pv: BlockParams, mode: str) -> Tensor:
    """Inverted residual: expand 1x1 -> depthwise 3x3 -> project 1x1.

    The shortcut is added exactly when stride is 1 and input channels equal
    the output filters.
    """
    c_in = x.shape[1]
    y = _staged("expand", lambda: conv2d(x, ConvParams(kernel=pv.t("expand.kernel"))))
    y = _staged("expand", lambda: batchnorm(y, pv.bn("expand", mode)))
    y = relu(y)
    y = _staged("depthwise", lambda: depthwise_conv2d(
        y, ConvParams(kernel=pv.t("dw.kernel"), stride=spec.stride, groups=y.shape[1])
    ))
    y = _staged("depthwise", lambda: batchnorm(y, pv.bn("dw", mode)))
    y = relu(y)
    y = _staged("project", lambda: conv2d(y, ConvParams(kernel=pv.t("project.kernel"))))
    y = _staged("project", lambda: batchnorm(y, pv.bn("project", mode)))
    if spec.stride == 1 and c_in == spec.filters:
        y = add(y, x)
    return y


def asc_forward(x: Tensor, spec: BlockSpec, pv: BlockParams, mode: str) -> Tensor:
    """Atrous separable conv: dilated depthwise 3x3 then pointwise 1x1,
    BN+ReLU after each stage. Dilation applies only to the depthwise stage."""
    y = _staged("depthwise", lambda: depthwise_conv2d(
        x, ConvParams(kernel=pv.t("dw.kernel"), stride=spec.stride,
                      dilation=spec.dilation, groups=x.shape[1])
    ))
    y = _staged("depthwise", lambda: batchnorm(y, pv.bn("dw", mode)))
    y = relu(y)
    y = _staged("pointwise", lambda: conv2d(y, ConvParams(kernel=pv.t("pw.kernel"))))
    y = _staged("pointwise", lambda: batchnorm(y, pv.bn("pw", mode)))
    return relu(y)


def aspp_forward(x: Tensor, rates: tuple[int, ...], pv: BlockParams, mode: str) -> Tensor:
    """Pyramid of a 1x1 branch, one atrous branch per rate, and a pooled
    branch broadcast back to full resolution; concatenated then fused 1x1."""
    if not rates:
        raise ConfigError("aspp requires at least one rate")
    n, c, h, w = x.shape
    branches = []
    y = _staged("b0", lambda: conv2d(x, ConvParams(kernel=pv.t("b0.kernel"))))
    y = _staged("b0", lambda: batchnorm(y, pv.bn("b0", mode)))
    branches.append(relu(y))
    for r in rates:
        sub = pv.sub(f"rate{r}")
        spec = BlockSpec(kind="asc", filters=sub.t("pw.kernel").shape[0], dilation=r)
        branches.append(_staged(f"rate{r}", lambda: asc_forward(x, spec, sub, mode)))
    p = global_avg_pool(x)
    p = _staged("pool", lambda: conv2d(p, ConvParams(kernel=pv.t("pool.kernel"))))
    p = _staged("pool", lambda: batchnorm(p, pv.bn("pool", mode)))
    branches.append(broadcast_spatial(relu(p), h, w))
    y = concat_channels(branches)
    y = _staged("fuse", lambda: conv2d(y, ConvParams(kernel=pv.t("fuse.kernel"))))
    y = _staged("fuse", lambda: batchnorm(y, pv.bn("fuse", mode)))
    return relu(y)


def concat_skip_forward(x: Tensor, tapped: Tensor, pv: BlockParams, mode: str) -> Tensor:
    """Reduce the tapped features with a 1x1 conv+BN+ReLU, then concat."""
    y = _staged("reduce", lambda: conv2d(tapped, ConvParams(kernel=pv.t("reduce.kernel"))))
    y = _staged("reduce", lambda: batchnorm(y, pv.bn("reduce", mode)))
    return concat_channels([x, relu(y)])


def head_forward(x: Tensor, pv: BlockParams) -> Tensor:
    """1x1 conv with bias, sigmoid; emits per-pixel probabilities."""
    y = _staged("head", lambda: conv2d(
        x, ConvParams(kernel=pv.t("kernel"), bias=pv.t("bias"))
    ))
    return sigmoid(y)
