"""Deep-prior search space: layer grammar, shape inference and text format.

A spec serializes to one line of ``|``-separated segments, for example::

    in 1x28x28 | conv c64 k5 s1 skip | pool f2 s2 | conv c128 k5 s1

Convolutions use same-style zero padding (output spatial ``ceil(in / stride)``),
pools are unpadded (``floor((in - field) / stride) + 1``).
"""

import logging
import math
import re
from collections.abc import Sequence
from dataclasses import dataclass, field

from deep_prior_nas.errors import (
    ArchitectureError,
    ArchitectureParseError,
    InvalidArchitectureError,
    InvalidReason,
)

logger = logging.getLogger(__name__)

Shape = tuple[int, int, int]

CONV_CHANNELS = (16, 32, 64, 128, 256, 512, 1024)
CONV_KERNELS = (1, 3, 5, 7, 9, 11)
CONV_STRIDES = (1, 2)
POOL_FIELDS = (2, 3, 4)
POOL_STRIDES = (2, 3, 4)
MAX_CONVS = 12
FLAT_CAP = 262144
DEFAULT_INPUT_SHAPE: Shape = (1, 28, 28)

REFERENCE_SPECS = {
    # Classical LeNet-5 convolutional stem with average pooling.
    "lenet-ref": "conv c6 k5 s1 | avgpool f2 s2 | conv c16 k5 s1 | avgpool f2 s2 | conv c120 k5 s1",
    "cnn2l-ref": "conv c64 k5 s1 | pool f2 s2 | conv c128 k5 s1 | pool f2 s2",
}


@dataclass(frozen=True)
class ConvLayer:
    out_channels: int
    kernel: int
    stride: int
    skip_source: bool = False

    def __str__(self) -> str:
        text = f"conv c{self.out_channels} k{self.kernel} s{self.stride}"
        return f"{text} skip" if self.skip_source else text


@dataclass(frozen=True)
class PoolLayer:
    field: int
    stride: int
    average: bool = False

    def __str__(self) -> str:
        kind = "avgpool" if self.average else "pool"
        return f"{kind} f{self.field} s{self.stride}"


LayerDescriptor = ConvLayer | PoolLayer


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple[LayerDescriptor, ...]
    input_shape: Shape = DEFAULT_INPUT_SHAPE

    @property
    def conv_count(self) -> int:
        return sum(isinstance(layer, ConvLayer) for layer in self.layers)

    def __str__(self) -> str:
        return serialize(self)


@dataclass(frozen=True)
class SkipLink:
    """Projection from the input of conv ``source`` into the output of conv ``target``."""

    source: int
    target: int
    stride: int
    in_channels: int
    out_channels: int


@dataclass(frozen=True)
class ShapeTrace:
    input_shape: Shape
    shapes: tuple[Shape, ...]
    skips: tuple[SkipLink, ...] = ()

    @property
    def output_shape(self) -> Shape:
        return self.shapes[-1] if self.shapes else self.input_shape

    @property
    def flat_dim(self) -> int:
        return math.prod(self.output_shape)

    def input_of(self, index: int) -> Shape:
        return self.shapes[index - 1] if index else self.input_shape


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Zero padding (before, after) giving an output of ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv_output(size: int, stride: int) -> int:
    return -(-size // stride)


def pool_output(size: int, pool_field: int, stride: int) -> int:
    return (size - pool_field) // stride + 1


def infer_shapes(
    spec: ArchitectureSpec, flat_cap: int = FLAT_CAP, max_convs: int = MAX_CONVS
) -> ShapeTrace | InvalidReason:
    if not 1 <= spec.conv_count <= max_convs:
        return InvalidReason.CONV_COUNT

    channels, height, width = spec.input_shape
    if min(spec.input_shape) < 1:
        return InvalidReason.ZERO_SPATIAL

    shapes: list[Shape] = []
    for layer in spec.layers:
        if isinstance(layer, ConvLayer):
            channels = layer.out_channels
            height = conv_output(height, layer.stride)
            width = conv_output(width, layer.stride)
        else:
            if height < layer.field or width < layer.field:
                return InvalidReason.POOL_TOO_LARGE
            height = pool_output(height, layer.field, layer.stride)
            width = pool_output(width, layer.field, layer.stride)
        if height < 1 or width < 1 or channels < 1:
            return InvalidReason.ZERO_SPATIAL
        shapes.append((channels, height, width))

    skips = []
    for i, layer in enumerate(spec.layers):
        if not (isinstance(layer, ConvLayer) and layer.skip_source):
            continue
        target = next(
            (j for j in range(i + 1, len(spec.layers)) if isinstance(spec.layers[j], ConvLayer)),
            None,
        )
        if target is None:
            return InvalidReason.SKIP_AT_TAIL
        stride = math.prod(spec.layers[j].stride for j in range(i, target + 1))
        in_shape = shapes[i - 1] if i else spec.input_shape
        skips.append(SkipLink(i, target, stride, in_shape[0], shapes[target][0]))

    trace = ShapeTrace(spec.input_shape, tuple(shapes), tuple(skips))
    if trace.flat_dim > flat_cap:
        return InvalidReason.FLAT_DIM_EXCEEDED
    return trace


def validate(
    spec: ArchitectureSpec, flat_cap: int = FLAT_CAP, max_convs: int = MAX_CONVS
) -> ShapeTrace:
    result = infer_shapes(spec, flat_cap, max_convs)
    if isinstance(result, InvalidReason):
        raise InvalidArchitectureError(result, serialize(spec))
    return result


def in_search_space(spec: ArchitectureSpec) -> bool:
    """Whether the grammar could have emitted this spec (reference specs need not)."""
    previous: LayerDescriptor | None = None
    for layer in spec.layers:
        if isinstance(layer, ConvLayer):
            if (
                layer.out_channels not in CONV_CHANNELS
                or layer.kernel not in CONV_KERNELS
                or layer.stride not in CONV_STRIDES
            ):
                return False
        elif (
            layer.average
            or not isinstance(previous, ConvLayer)
            or layer.field not in POOL_FIELDS
            or layer.stride not in POOL_STRIDES
        ):
            return False
        previous = layer
    return True


# Serialization

_SHAPE_RE = re.compile(r"^(\d+)x(\d+)x(\d+)$")
_TOKEN_RE = re.compile(r"\S+")


def serialize(spec: ArchitectureSpec) -> str:
    c, h, w = spec.input_shape
    return " | ".join([f"in {c}x{h}x{w}", *(str(layer) for layer in spec.layers)])


def _int_param(token: str, prefix: str, line: int, column: int) -> int:
    if not (token.startswith(prefix) and token[len(prefix) :].isdigit()):
        raise ArchitectureParseError(
            f"expected '{prefix}<int>', got '{token}'", line, column
        )
    value = int(token[len(prefix) :])
    if value < 1:
        raise ArchitectureParseError(f"'{token}' must be positive", line, column)
    return value


def _parse_layer(tokens: list[tuple[str, int]], line: int) -> LayerDescriptor:
    (kind, column), params = tokens[0], tokens[1:]

    def param(i: int, prefix: str) -> int:
        if i >= len(params):
            raise ArchitectureParseError(f"'{kind}' is missing '{prefix}<int>'", line, column)
        return _int_param(params[i][0], prefix, line, params[i][1])

    if kind == "conv":
        skip = len(params) == 4 and params[3][0] == "skip"
        if len(params) not in (3, 4) or (len(params) == 4 and not skip):
            extra = params[3] if len(params) > 3 else tokens[0]
            raise ArchitectureParseError("conv takes 'c<int> k<int> s<int> [skip]'", line, extra[1])
        return ConvLayer(param(0, "c"), param(1, "k"), param(2, "s"), skip)
    if kind in ("pool", "avgpool"):
        if len(params) != 2:
            at = params[2][1] if len(params) > 2 else column
            raise ArchitectureParseError(f"{kind} takes 'f<int> s<int>'", line, at)
        return PoolLayer(param(0, "f"), param(1, "s"), average=kind == "avgpool")
    raise ArchitectureParseError(f"unknown layer kind '{kind}'", line, column)


def parse(text: str, input_shape: Shape = DEFAULT_INPUT_SHAPE) -> ArchitectureSpec:
    """Parse the line format produced by ``serialize``.

    Segments may be separated by ``|`` or newlines. A leading ``in CxHxW``
    segment overrides ``input_shape``.
    """
    layers: list[LayerDescriptor] = []
    shape = input_shape
    for line_no, line in enumerate(text.splitlines() or [""], start=1):
        offset = 0
        for segment in line.split("|"):
            tokens = [(m.group(), offset + m.start() + 1) for m in _TOKEN_RE.finditer(segment)]
            offset += len(segment) + 1
            if not tokens:
                continue
            if tokens[0][0] == "in":
                if layers or len(tokens) != 2:
                    raise ArchitectureParseError(
                        "'in CxHxW' must be the first segment", line_no, tokens[0][1]
                    )
                match = _SHAPE_RE.match(tokens[1][0])
                if not match:
                    raise ArchitectureParseError(
                        f"bad input shape '{tokens[1][0]}'", line_no, tokens[1][1]
                    )
                c, h, w = (int(g) for g in match.groups())
                shape = (c, h, w)
                continue
            layers.append(_parse_layer(tokens, line_no))
    if not layers:
        raise ArchitectureParseError("spec has no layers", 1, 1)
    return ArchitectureSpec(tuple(layers), shape)


def resolve_spec(text: str, input_shape: Shape = DEFAULT_INPUT_SHAPE) -> ArchitectureSpec:
    """Parse a spec string or look up a named reference spec."""
    return parse(REFERENCE_SPECS.get(text, text), input_shape)


# Construction grammar for the Q-agent


@dataclass(frozen=True)
class Action:
    layer: LayerDescriptor | None

    @property
    def is_terminal(self) -> bool:
        return self.layer is None

    def __str__(self) -> str:
        return "terminate" if self.layer is None else str(self.layer)


TERMINATE = Action(None)


@dataclass(frozen=True)
class ConstructionState:
    depth: int
    last_layer: LayerDescriptor | None
    spatial_bucket: str
    # Exact context needed for legality; not part of the Q-table key.
    channels: int
    height: int
    width: int
    pending_skip: bool = False

    @property
    def key(self) -> str:
        last = "start" if self.last_layer is None else str(self.last_layer)
        return f"d{self.depth}|{last}|{self.spatial_bucket}"


@dataclass(frozen=True)
class ArchitectureGrammar:
    input_shape: Shape = DEFAULT_INPUT_SHAPE
    max_convs: int = MAX_CONVS
    flat_cap: int = FLAT_CAP
    bucket_edges: tuple[int, ...] = (3, 7, 14)
    channels: tuple[int, ...] = CONV_CHANNELS
    kernels: tuple[int, ...] = CONV_KERNELS
    strides: tuple[int, ...] = CONV_STRIDES
    pool_fields: tuple[int, ...] = POOL_FIELDS
    pool_strides: tuple[int, ...] = POOL_STRIDES
    _conv_actions: tuple[Action, ...] = field(init=False, repr=False, compare=False)
    _finish_memo: dict[tuple[int, bool, int, int, int, bool], bool] = field(
        init=False, repr=False, compare=False, default_factory=dict
    )

    def __post_init__(self) -> None:
        actions = tuple(
            Action(ConvLayer(c, k, s, skip))
            for c in self.channels
            for k in self.kernels
            for s in self.strides
            for skip in (False, True)
        )
        object.__setattr__(self, "_conv_actions", actions)

    def bucket(self, spatial: int) -> str:
        low = 1
        for edge in self.bucket_edges:
            if spatial <= edge:
                return f"{low}-{edge}"
            low = edge + 1
        return f"{low}+"

    def start(self) -> ConstructionState:
        c, h, w = self.input_shape
        return ConstructionState(0, None, self.bucket(min(h, w)), c, h, w)

    def fits_cap(self, state: ConstructionState) -> bool:
        return state.channels * state.height * state.width <= self.flat_cap

    def can_terminate(self, state: ConstructionState) -> bool:
        return state.depth >= 1 and not state.pending_skip and self.fits_cap(state)

    def _candidates(self, state: ConstructionState) -> list[Action]:
        candidates: list[Action] = []
        if state.depth < self.max_convs:
            last_conv = state.depth + 1 >= self.max_convs
            candidates.extend(
                a
                for a in self._conv_actions
                if not (last_conv and isinstance(a.layer, ConvLayer) and a.layer.skip_source)
            )
        if isinstance(state.last_layer, ConvLayer):
            candidates.extend(
                Action(PoolLayer(f, s))
                for f in self.pool_fields
                for s in self.pool_strides
                if f <= state.height and f <= state.width
            )
        return candidates

    def can_finish(self, state: ConstructionState) -> bool:
        """Whether some continuation of ``state`` terminates in a valid spec."""
        key = (
            state.depth,
            isinstance(state.last_layer, ConvLayer),
            state.channels,
            state.height,
            state.width,
            state.pending_skip,
        )
        memo = self._finish_memo
        if key not in memo:
            # The kernel never changes the output shape, so one kernel stands for all.
            kernel = self.kernels[0]
            memo[key] = self.can_terminate(state) or any(
                self.can_finish(self.step(state, a))
                for a in self._candidates(state)
                if not isinstance(a.layer, ConvLayer) or a.layer.kernel == kernel
            )
        return memo[key]

    def actions(self, state: ConstructionState) -> list[Action]:
        """Legal actions; each one leaves at least one valid way to terminate."""
        legal = [a for a in self._candidates(state) if self.can_finish(self.step(state, a))]
        if self.can_terminate(state):
            legal.append(TERMINATE)
        return legal

    def step(self, state: ConstructionState, action: Action) -> ConstructionState:
        layer = action.layer
        if layer is None:
            return state
        if isinstance(layer, ConvLayer):
            h = conv_output(state.height, layer.stride)
            w = conv_output(state.width, layer.stride)
            return ConstructionState(
                state.depth + 1,
                layer,
                self.bucket(min(h, w)),
                layer.out_channels,
                h,
                w,
                layer.skip_source,
            )
        h = pool_output(state.height, layer.field, layer.stride)
        w = pool_output(state.width, layer.field, layer.stride)
        return ConstructionState(
            state.depth,
            layer,
            self.bucket(min(h, w)),
            state.channels,
            h,
            w,
            state.pending_skip,
        )

    def is_terminal(self, action: Action) -> bool:
        return action.is_terminal

    def state_key(self, state: ConstructionState) -> str:
        return state.key

    def action_key(self, action: Action) -> str:
        return str(action)

    def parse_action(self, text: str) -> Action:
        if text == "terminate":
            return TERMINATE
        tokens = [(m.group(), m.start() + 1) for m in _TOKEN_RE.finditer(text)]
        if not tokens:
            raise ArchitectureParseError("empty action", 1, 1)
        return Action(_parse_layer(tokens, 1))

    def replay(self, actions: Sequence[Action]) -> list[tuple[ConstructionState, Action]]:
        """Rebuild the (state, action) trajectory, checking every action is legal."""
        state = self.start()
        trajectory = []
        for action in actions:
            if action not in self.actions(state):
                raise ArchitectureError(f"action '{action}' is illegal in state {state.key}")
            trajectory.append((state, action))
            state = self.step(state, action)
        if not trajectory or not trajectory[-1][1].is_terminal:
            raise ArchitectureError("trajectory does not end in terminate")
        return trajectory

    def build(self, trajectory: Sequence[tuple[ConstructionState, Action]]) -> ArchitectureSpec:
        layers = tuple(a.layer for _, a in trajectory if a.layer is not None)
        return ArchitectureSpec(layers, self.input_shape)


def enumerate_actions(
    state: ConstructionState, grammar: ArchitectureGrammar | None = None
) -> list[Action]:
    return (grammar or ArchitectureGrammar()).actions(state)
