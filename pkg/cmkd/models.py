"""
Student/teacher feature extractors and task heads.

An extractor is a fully connected stack `input -> hidden_dims... -> feature_dim`
with an activation after every layer, followed by a linear projection of the
features into the shared embedding space. A head is a fully connected stack
over the features ending in `output_dim` (no activation on the last layer).
"""

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from cmkd import instrumentation
from cmkd.exceptions import ConfigError, ShapeError
from cmkd.schemas import Activation, ExtractorConfig, HeadConfig
from cmkd.tensor import Tensor, add_bias, matmul, relu, tanh

ACTIVATIONS: dict[Activation, Callable[[Tensor], Tensor]] = {
    Activation.RELU: relu,
    Activation.TANH: tanh,
}


@dataclass
class Linear:
    weight: Tensor  # [fan_in, fan_out]
    bias: Tensor  # [fan_out]

    @classmethod
    def init(
        cls, fan_in: int, fan_out: int, rng: np.random.Generator, name: str
    ) -> "Linear":
        bound = 1.0 / np.sqrt(fan_in)
        return cls(
            weight=Tensor(
                rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                requires_grad=True,
                name=f"{name}.weight",
            ),
            bias=Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.bias"),
        )

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return add_bias(matmul(x, self.weight), self.bias)


@dataclass
class ModelParams:
    extractor_config: ExtractorConfig
    head_config: HeadConfig
    hidden: list[Linear]
    projection: Linear
    head: list[Linear]
    frozen: bool = False
    role: str = "student"

    def named_layers(self) -> Iterator[tuple[str, Linear]]:
        for i, layer in enumerate(self.hidden):
            yield f"extractor.{i}", layer
        yield "projection", self.projection
        for i, layer in enumerate(self.head):
            yield f"head.{i}", layer

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, layer in self.named_layers():
            yield f"{prefix}.weight", layer.weight
            yield f"{prefix}.bias", layer.bias

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> "ModelParams":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.numpy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise ShapeError(f"state is missing parameters {sorted(missing)}")
        unexpected = set(state) - set(params)
        if unexpected:
            raise ShapeError(f"state has unknown parameters {sorted(unexpected)}")
        for name, p in params.items():
            p.assign_(state[name])

    @property
    def activation(self) -> Callable[[Tensor], Tensor]:
        return ACTIVATIONS[self.extractor_config.activation]

    @property
    def head_activation(self) -> Callable[[Tensor], Tensor]:
        return ACTIVATIONS[self.head_config.activation]


def build_model(
    extractor_config: ExtractorConfig,
    head_config: HeadConfig,
    rng: np.random.Generator,
    role: str = "student",
) -> ModelParams:
    if extractor_config.input_dim is None:
        raise ConfigError(f"{role} extractor input_dim is not resolved")
    dims = [
        extractor_config.input_dim,
        *extractor_config.hidden_dims,
        extractor_config.feature_dim,
    ]
    hidden = [
        Linear.init(dims[i], dims[i + 1], rng, f"{role}.extractor.{i}")
        for i in range(len(dims) - 1)
    ]
    projection = Linear.init(
        extractor_config.feature_dim,
        extractor_config.embed_dim,
        rng,
        f"{role}.projection",
    )
    head_dims = [extractor_config.feature_dim, *head_config.layer_dims]
    head = [
        Linear.init(head_dims[i], head_dims[i + 1], rng, f"{role}.head.{i}")
        for i in range(len(head_dims) - 1)
    ]
    return ModelParams(
        extractor_config=extractor_config,
        head_config=head_config,
        hidden=hidden,
        projection=projection,
        head=head,
        role=role,
    )


def check_injection(student: ExtractorConfig, teacher_head: HeadConfig) -> None:
    """The student's features must fit the teacher head's layer-l input width."""
    layer = teacher_head.resolved_injection_layer
    width = teacher_head.layer_dims[layer - 1]
    if student.feature_dim != width:
        raise ConfigError(
            f"student feature_dim {student.feature_dim} does not match the "
            f"teacher head input width {width} at injection layer {layer}"
        )


def extract(params: ModelParams, x: Tensor) -> tuple[Tensor, Tensor]:
    """Return (f, e): last hidden representation and its embedding."""
    if x.ndim != 2 or x.shape[1] != params.extractor_config.input_dim:
        raise ShapeError(
            f"{params.role} extractor expects [batch, "
            f"{params.extractor_config.input_dim}], got {x.shape}"
        )
    h = x
    for layer in params.hidden:
        h = params.activation(layer(h))
    return h, params.projection(h)


def _run_head(params: ModelParams, h: Tensor, start: int) -> Tensor:
    last = len(params.head) - 1
    for i in range(start, len(params.head)):
        h = params.head[i](h)
        if i < last:
            h = params.head_activation(h)
    return h


def head_forward(params: ModelParams, f: Tensor) -> Tensor:
    """Raw logits (DEC) or one value per row (CER)."""
    width = params.head[0].fan_in
    if f.ndim != 2 or f.shape[1] != width:
        raise ShapeError(f"{params.role} head expects width {width}, got {f.shape}")
    return _run_head(params, f, 0)


def head_forward_from_layer(teacher: ModelParams, f_s: Tensor, layer: int) -> Tensor:
    """Propagate student features through the frozen teacher head from `layer` on."""
    if not teacher.frozen:
        raise ConfigError("injection requires a frozen teacher")
    if not 1 <= layer < len(teacher.head):
        raise ShapeError(
            f"injection layer {layer} out of range [1, {len(teacher.head)})"
        )
    width = teacher.head[layer].fan_in
    if f_s.ndim != 2 or f_s.shape[1] != width:
        raise ShapeError(
            f"injected features have shape {f_s.shape}, teacher layer {layer} "
            f"expects width {width}"
        )
    instrumentation.count(instrumentation.INJECTION)
    return _run_head(teacher, f_s, layer)
