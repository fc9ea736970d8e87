"""Shape model of the customized 224x224 ProGAN.

No weights or tensors live here, only (channels, height, width) bookkeeping.
That covers layer-by-layer shape propagation, the stage-6 generator and
critic tables transcribed literally (with their declared shapes, for
auditing), repaired per-stage networks that chain cleanly, the progression
schedule, and the WGAN-GP loss as a function of critic scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from rebalance_forge.errors import ShapeError

LEAKY = "LeakyReLU(0.2)"
LINEAR = "Linear"
NONE = "None"

CONV_KINDS = ("Conv2D", "TConv2D", "ToRGB", "ConvThenDownSample")
LAYER_KINDS = CONV_KINDS + ("UpSample", "DownSample", "MinibatchStdDev")
ACTIVATIONS = (LEAKY, LINEAR, NONE)

N_STAGES = 6
BASE_RESOLUTION = 7
LATENT_SIZE = 112


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self) -> None:
        if min(self.channels, self.height, self.width) < 1:
            raise ShapeError(f"invalid shape {self.as_tuple()}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def __str__(self) -> str:
        return "x".join(str(v) for v in self.as_tuple())

    @classmethod
    def of(cls, value: Sequence[int] | TensorShape) -> TensorShape:
        if isinstance(value, TensorShape):
            return value
        c, h, w = (int(v) for v in value)
        return cls(c, h, w)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k: int | None = None
    p: int | None = None
    s: int | None = None
    out_channels: int | None = None
    activation: str = NONE
    # shapes as printed in a source table; None for constructed networks
    declared_in: TensorShape | None = None
    declared_out: TensorShape | None = None
    label: str = ""

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.kind in CONV_KINDS:
            if self.kind == "ToRGB":
                defaults = dict(k=1, p=0, s=1, out_channels=3)
                for name, value in defaults.items():
                    if getattr(self, name) is None:
                        object.__setattr__(self, name, value)
            if None in (self.k, self.p, self.s, self.out_channels):
                raise ShapeError(f"{self.kind} needs k, p, s and out_channels")
            if self.k < 1 or self.s < 1 or self.p < 0 or self.out_channels < 1:
                raise ShapeError(f"{self.kind}: k, s and out_channels must be positive, p non-negative")
        elif any(v is not None for v in (self.k, self.p, self.s, self.out_channels)):
            raise ShapeError(f"{self.kind} takes no kernel parameters")

    def to_json(self) -> dict:
        d = {"kind": self.kind, "k": self.k, "p": self.p, "s": self.s, "out_channels": self.out_channels, "activation": self.activation}
        if self.declared_in is not None:
            d["declared_in"] = list(self.declared_in.as_tuple())
        if self.declared_out is not None:
            d["declared_out"] = list(self.declared_out.as_tuple())
        if self.label:
            d["label"] = self.label
        return d

    @classmethod
    def from_json(cls, d: dict) -> LayerSpec:
        return cls(
            kind=d["kind"],
            k=d.get("k"),
            p=d.get("p"),
            s=d.get("s"),
            out_channels=d.get("out_channels"),
            activation=d.get("activation", NONE),
            declared_in=TensorShape.of(d["declared_in"]) if d.get("declared_in") else None,
            declared_out=TensorShape.of(d["declared_out"]) if d.get("declared_out") else None,
            label=d.get("label", ""),
        )


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    stage: int
    layers: tuple[LayerSpec, ...]
    input_shape: TensorShape
    verbatim: bool = False

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "stage": self.stage,
            "verbatim": self.verbatim,
            "input_shape": list(self.input_shape.as_tuple()),
            "layers": [layer.to_json() for layer in self.layers],
        }

    @classmethod
    def from_json(cls, d: dict) -> NetworkSpec:
        try:
            return cls(
                name=str(d["name"]),
                stage=int(d["stage"]),
                layers=tuple(LayerSpec.from_json(x) for x in d["layers"]),
                input_shape=TensorShape.of(d["input_shape"]),
                verbatim=bool(d.get("verbatim", False)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ShapeError(f"malformed network spec: {exc}") from exc


@dataclass(frozen=True)
class Finding:
    layer_index: int
    expected_shape: TensorShape | None
    declared_shape: TensorShape | None
    note: str

    def to_json(self) -> dict:
        return {
            "layer_index": self.layer_index,
            "expected_shape": list(self.expected_shape.as_tuple()) if self.expected_shape else None,
            "declared_shape": list(self.declared_shape.as_tuple()) if self.declared_shape else None,
            "note": self.note,
        }


@dataclass(frozen=True)
class TraceRow:
    index: int
    layer: LayerSpec
    input_shape: TensorShape
    output_shape: TensorShape | None


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]
    trace: tuple[TraceRow, ...] = ()
    output_shape: TensorShape | None = None

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "output_shape": list(self.output_shape.as_tuple()) if self.output_shape else None,
            "findings": [f.to_json() for f in self.findings],
        }


def conv_out(size: int, k: int, p: int, s: int) -> int:
    return (size + 2 * p - k) // s + 1


def tconv_out(size: int, k: int, p: int, s: int) -> int:
    return (size - 1) * s - 2 * p + k


def propagate_shape(layer: LayerSpec, shape: TensorShape) -> TensorShape:
    """Output shape of ``layer`` applied to ``shape``."""
    c, h, w = shape.as_tuple()
    kind = layer.kind
    if kind in ("Conv2D", "ToRGB", "ConvThenDownSample"):
        if h + 2 * layer.p < layer.k or w + 2 * layer.p < layer.k:
            raise ShapeError(f"{kind} K{layer.k} P{layer.p} does not fit a {h}x{w} input")
        c, h, w = layer.out_channels, conv_out(h, layer.k, layer.p, layer.s), conv_out(w, layer.k, layer.p, layer.s)
        if kind == "ConvThenDownSample":
            if h % 2 or w % 2:
                raise ShapeError(f"{kind}: downsampling needs even height and width, conv gives {c}x{h}x{w}")
            h, w = h // 2, w // 2
    elif kind == "TConv2D":
        c, h, w = layer.out_channels, tconv_out(h, layer.k, layer.p, layer.s), tconv_out(w, layer.k, layer.p, layer.s)
    elif kind == "UpSample":
        h, w = 2 * h, 2 * w
    elif kind == "DownSample":
        if h % 2 or w % 2:
            raise ShapeError(f"DownSample needs even height and width, got {h}x{w}")
        h, w = h // 2, w // 2
    elif kind == "MinibatchStdDev":
        c += 1
    if min(c, h, w) < 1:
        raise ShapeError(f"{kind} produces non-positive dimension {c}x{h}x{w}")
    return TensorShape(c, h, w)


def validate_network(spec: NetworkSpec) -> ValidationReport:
    """Replay shape propagation and list every disagreement with the declared shapes.

    A layer whose declared input differs from the previous layer's output is a
    chain break. A layer whose computed output differs from its declared
    output (or cannot be computed at all) is a shape mismatch. Without declared
    shapes only propagation failures are reported.
    """
    if not spec.layers:
        raise ShapeError("network spec has no layers")
    findings: list[Finding] = []
    trace: list[TraceRow] = []
    current: TensorShape | None = spec.input_shape
    for i, layer in enumerate(spec.layers):
        if layer.declared_in is not None and current is not None and layer.declared_in != current:
            findings.append(Finding(i, current, layer.declared_in, f"input chain break: previous layer outputs {current}, row declares {layer.declared_in}"))
        source = layer.declared_in or current
        if source is None:
            break
        try:
            computed: TensorShape | None = propagate_shape(layer, source)
            error = ""
        except ShapeError as exc:
            computed, error = None, str(exc)
        trace.append(TraceRow(i, layer, source, computed))
        if layer.declared_out is not None:
            if computed is None:
                findings.append(Finding(i, None, layer.declared_out, error))
            elif computed != layer.declared_out:
                findings.append(Finding(i, computed, layer.declared_out, f"{layer.label or layer.kind} computes {computed}, row declares {layer.declared_out}"))
            current = layer.declared_out
        else:
            if computed is None:
                findings.append(Finding(i, None, None, error))
            current = computed
    return ValidationReport(tuple(findings), tuple(trace), current)


def stage_resolution(stage: int) -> int:
    _check_stage(stage)
    return BASE_RESOLUTION * 2 ** (stage - 1)


def _check_stage(stage: int) -> None:
    if not 1 <= stage <= N_STAGES:
        raise ShapeError(f"stage must be in 1..{N_STAGES}, got {stage}")


def _conv(out, k=3, p=1, act=LEAKY, label=""):
    return LayerSpec("Conv2D", k=k, p=p, s=1, out_channels=out, activation=act, label=label)


# Channel width of each generator block, keyed by its resolution.
GENERATOR_CHANNELS = {7: 224, 14: 224, 28: 56, 56: 28, 112: 14, 224: 7}


def builtin_generator_spec(stage: int = 6, verbatim: bool = False) -> NetworkSpec:
    """Generator for one progression stage.

    The repaired network grows by one block per stage (upsample plus two 3x3
    convs); the 28x28 block starts with an inserted 1x1 conv that narrows 224
    channels to 56. ``verbatim`` returns the literal stage-6 table instead.
    """
    _check_stage(stage)
    if verbatim:
        return _verbatim_generator(stage)
    layers = [
        LayerSpec("TConv2D", k=7, p=0, s=1, out_channels=GENERATOR_CHANNELS[7], activation=LEAKY),
        _conv(GENERATOR_CHANNELS[7]),
    ]
    for res in (BASE_RESOLUTION * 2**i for i in range(1, stage)):
        ch = GENERATOR_CHANNELS[res]
        layers.append(LayerSpec("UpSample"))
        if res == 28:
            layers.append(_conv(ch, k=1, p=0, label="channel reduction"))
        layers += [_conv(ch), _conv(ch)]
    layers.append(LayerSpec("ToRGB", activation=LINEAR))
    return NetworkSpec("generator", stage, tuple(layers), TensorShape(LATENT_SIZE, 1, 1))


# Layers of each critic block, keyed by the resolution the block reads.
def _critic_block(res: int) -> list[LayerSpec]:
    if res == 224:
        return [_conv(14), LayerSpec("ConvThenDownSample", k=3, p=1, s=1, out_channels=28, activation=LEAKY)]
    width = {112: 56, 56: 112, 28: 224, 14: 224}[res]
    return [_conv(width), _conv(width), LayerSpec("DownSample")]


CRITIC_INPUT_CHANNELS = {224: 14, 112: 28, 56: 56, 28: 112, 14: 224, 7: 224}


def builtin_critic_spec(stage: int = 6, verbatim: bool = False) -> NetworkSpec:
    """Critic for one progression stage, mirroring the generator's resolution.

    Repairs relative to the stage-6 table: the from-RGB conv uses padding 3 so
    it keeps the spatial size, and the 7x7 -> 1x1 reduction is a K7 P0 conv.
    """
    _check_stage(stage)
    if verbatim:
        return _verbatim_critic(stage)
    size = res = stage_resolution(stage)
    layers = [_conv(CRITIC_INPUT_CHANNELS[res], k=7, p=3, label="from RGB")]
    while res > BASE_RESOLUTION:
        layers += _critic_block(res)
        res //= 2
    layers += [
        LayerSpec("MinibatchStdDev", activation=LEAKY),
        _conv(224),
        _conv(224, k=7, p=0),
        _conv(1, k=1, p=0, act=LINEAR, label="Output Score"),
    ]
    return NetworkSpec("critic", stage, tuple(layers), TensorShape(3, size, size))


def _row(kind, out, inp, act=NONE, s=None, p=None, k=None, label=""):
    out_s, in_s = TensorShape.of(out), TensorShape.of(inp)
    out_channels = out_s.channels if kind in CONV_KINDS else None
    return LayerSpec(kind, k=k, p=p, s=s, out_channels=out_channels, activation=act, declared_in=in_s, declared_out=out_s, label=label or kind)


def _verbatim_generator(stage: int) -> NetworkSpec:
    if stage != N_STAGES:
        raise ShapeError("the literal generator table exists only for stage 6")
    rows = [
        _row("TConv2D", (224, 7, 7), (112, 1, 1), LEAKY, 1, 0, 7),
        _row("Conv2D", (224, 7, 7), (224, 7, 7), LEAKY, 1, 1, 3),
        _row("UpSample", (224, 14, 14), (224, 7, 7)),
        _row("Conv2D", (224, 14, 14), (224, 14, 14), LEAKY, 1, 1, 3),
        _row("Conv2D", (224, 14, 14), (224, 14, 14), LEAKY, 1, 1, 3),
        _row("UpSample", (224, 28, 28), (224, 14, 14)),
        _row("Conv2D", (56, 28, 28), (56, 28, 28), LEAKY, 1, 1, 3),
        _row("Conv2D", (56, 28, 28), (56, 28, 28), LEAKY, 1, 1, 3),
        _row("UpSample", (56, 56, 56), (56, 28, 28)),
        _row("Conv2D", (28, 56, 56), (56, 56, 56), LEAKY, 1, 1, 3),
        _row("Conv2D", (28, 56, 56), (28, 56, 56), LEAKY, 1, 1, 3),
        _row("UpSample", (28, 112, 112), (28, 56, 56)),
        _row("Conv2D", (14, 112, 112), (28, 112, 112), LEAKY, 1, 1, 3),
        _row("Conv2D", (14, 112, 112), (14, 112, 112), LEAKY, 1, 1, 3),
        _row("UpSample", (14, 224, 224), (14, 112, 112)),
        _row("Conv2D", (7, 224, 224), (14, 224, 224), LEAKY, 1, 1, 3),
        _row("Conv2D", (7, 224, 224), (7, 224, 224), LEAKY, 1, 1, 3),
        _row("ToRGB", (3, 224, 224), (7, 224, 224), LINEAR, 1, 0, 1),
    ]
    return NetworkSpec("generator", stage, tuple(rows), TensorShape(112, 1, 1), verbatim=True)


def _verbatim_critic(stage: int) -> NetworkSpec:
    if stage != N_STAGES:
        raise ShapeError("the literal critic table exists only for stage 6")
    rows = [
        _row("Conv2D", (14, 224, 224), (3, 224, 224), LEAKY, 1, 0, 7),
        _row("Conv2D", (14, 224, 224), (14, 224, 224), LEAKY, 1, 1, 3),
        _row("ConvThenDownSample", (28, 112, 112), (14, 224, 224), LEAKY, 1, 1, 3, "Conv2D & DS"),
        _row("Conv2D", (56, 112, 112), (28, 112, 112), LEAKY, 1, 1, 3),
        _row("Conv2D", (56, 112, 112), (56, 112, 112), LEAKY, 1, 1, 3),
        _row("DownSample", (56, 56, 56), (56, 112, 112)),
        _row("Conv2D", (112, 56, 56), (56, 56, 56), LEAKY, 1, 1, 3),
        _row("Conv2D", (112, 56, 56), (112, 56, 56), LEAKY, 1, 1, 3),
        _row("DownSample", (112, 28, 28), (112, 56, 56)),
        _row("Conv2D", (224, 28, 28), (112, 28, 28), LEAKY, 1, 1, 3),
        _row("Conv2D", (224, 28, 28), (224, 28, 28), LEAKY, 1, 1, 3),
        _row("DownSample", (224, 14, 14), (224, 28, 28)),
        _row("Conv2D", (224, 14, 14), (224, 14, 14), LEAKY, 1, 1, 3),
        _row("Conv2D", (224, 14, 14), (224, 14, 14), LEAKY, 1, 1, 3),
        _row("DownSample", (224, 7, 7), (224, 14, 14)),
        _row("MinibatchStdDev", (225, 7, 7), (224, 7, 7), LEAKY, label="MB StdDev"),
        _row("Conv2D", (224, 7, 7), (225, 7, 7), LEAKY, 1, 1, 3),
        _row("ConvThenDownSample", (224, 1, 1), (224, 7, 7), LEAKY, 1, 1, 3, "Conv2D & DS"),
        _row("Conv2D", (1, 1, 1), (224, 1, 1), LINEAR, 1, 0, 1, "Output Score"),
    ]
    return NetworkSpec("critic", stage, tuple(rows), TensorShape(3, 224, 224), verbatim=True)


@dataclass(frozen=True)
class StageSchedule:
    resolution: tuple[int, ...] = tuple(BASE_RESOLUTION * 2**i for i in range(N_STAGES))
    batch_size: tuple[int, ...] = (256, 128, 32, 16, 16, 8)
    epochs: tuple[int, ...] = (250, 300, 350, 400, 450, 500)
    latent_size: int = LATENT_SIZE
    image_channels: int = 3
    n_critic: int = 5
    learning_rate: float = 1e-3
    real_images: int = 4096
    loss_model: str = "WGAN-GP"
    gp_lambda: float = 10.0

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


def stage_schedule() -> StageSchedule:
    return StageSchedule()


@dataclass(frozen=True)
class WganLosses:
    critic_loss: float
    generator_loss: float
    wasserstein: float = field(default=0.0)
    gradient_penalty: float = field(default=0.0)


def wgan_gp_loss(real_scores, fake_scores, grad_norms, lam: float = 10.0) -> WganLosses:
    """Critic and generator losses from critic scores and interpolate gradient norms.

    critic = mean(fake) - mean(real) + lam * mean((|grad| - 1)^2)
    generator = -mean(fake)
    """
    real = np.asarray(real_scores, dtype=float)
    fake = np.asarray(fake_scores, dtype=float)
    norms = np.asarray(grad_norms, dtype=float)
    if real.size == 0 or fake.size == 0 or norms.size == 0:
        raise ValueError("score and gradient-norm lists must be non-empty")
    if lam < 0:
        raise ValueError("gradient penalty coefficient must be non-negative")
    w = float(fake.mean() - real.mean())
    gp = float(np.mean((norms - 1.0) ** 2))
    return WganLosses(critic_loss=w + lam * gp, generator_loss=float(-fake.mean()), wasserstein=w, gradient_penalty=gp)


def format_trace(report: ValidationReport) -> str:
    lines = [f"{'#':>3}  {'layer':<20} {'K':>2} {'P':>2} {'S':>2}  {'input':>12}  {'output':>12}"]
    for row in report.trace:
        layer = row.layer
        name = layer.label or layer.kind
        k, p, s = (("-" if v is None else str(v)) for v in (layer.k, layer.p, layer.s))
        out = str(row.output_shape) if row.output_shape else "error"
        lines.append(f"{row.index:>3}  {name:<20} {k:>2} {p:>2} {s:>2}  {str(row.input_shape):>12}  {out:>12}")
    if report.findings:
        lines.append("findings:")
        for f in report.findings:
            lines.append(f"  layer {f.layer_index}: {f.note}")
    else:
        lines.append("ok: shapes chain cleanly")
    return "\n".join(lines)
