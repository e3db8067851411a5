"""Volumetric convolutional encoders with local/global projection heads.

Each modality gets an independent encoder: a ladder of stride-2 conv stages
(DCGAN style) followed by a linear map to the d-dimensional global
representation z. The activations of an intermediate stage l are exported as
the local feature map. Projection heads move locals and globals into the
shared critic space; a mirrored transposed-conv decoder supports
reconstruction objectives and a small linear classifier supports the
supervised baseline.

Only batch-independent normalization (instance norm) is used so contrastive
negatives cannot leak across the batch through normalization statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigurationError


@dataclass(frozen=True)
class EncoderSpec:
    """Shape of one modality's encoder.

    ``local_layer`` is the stage whose post-activation map is exported; it
    must be strictly interior (neither the first nor the last stage).
    """

    input_side: int
    channels: tuple[int, ...]
    local_layer: int = 3
    repr_dim: int = 64
    leak: float = 0.2

    @property
    def n_layers(self) -> int:
        return len(self.channels)

    @property
    def local_side(self) -> int:
        return self.input_side // 2**self.local_layer

    @property
    def local_channels(self) -> int:
        return self.channels[self.local_layer - 1]

    @property
    def final_side(self) -> int:
        return self.input_side // 2**self.n_layers

    def validate(self) -> None:
        if self.n_layers < 3:
            raise ConfigurationError("need at least 3 stages")
        if not 1 < self.local_layer < self.n_layers:
            raise ConfigurationError(
                f"local_layer must satisfy 1 < l < L; got l={self.local_layer}"
                f", L={self.n_layers}"
            )
        if self.input_side % 2**self.n_layers != 0:
            raise ConfigurationError(
                f"input_side {self.input_side} not divisible by "
                f"2^{self.n_layers}"
            )
        if any(c < 1 for c in self.channels):
            raise ConfigurationError("channel counts must be positive")
        if self.repr_dim < 1:
            raise ConfigurationError("repr_dim must be >= 1")


_DEFAULT_LADDERS = {
    64: ((32, 64, 128, 256, 512), 3),
    32: ((32, 64, 128, 256), 3),
    16: ((16, 32, 64, 128), 2),
    8: ((8, 16, 32), 2),
}


def default_encoder_spec(input_side: int, repr_dim: int = 64) -> EncoderSpec:
    """Channel ladder reproducing the 128 x 8^3 local map at side 64."""
    if input_side not in _DEFAULT_LADDERS:
        raise ConfigurationError(
            f"no default ladder for side {input_side}; give channels explicitly"
        )
    channels, local_layer = _DEFAULT_LADDERS[input_side]
    spec = EncoderSpec(
        input_side=input_side,
        channels=channels,
        local_layer=local_layer,
        repr_dim=repr_dim,
    )
    spec.validate()
    return spec


def receptive_field(spec: EncoderSpec, layer: int) -> int:
    """Receptive-field side of one location at ``layer`` (k=4, s=2 stages)."""
    return 1 + 3 * (2**layer - 1)


@dataclass
class ForwardOutputs:
    """Global representation z (B x d) and local map (B x C x s x s x s)."""

    z: torch.Tensor
    locals: torch.Tensor

    @property
    def locals_flat(self) -> torch.Tensor:
        """Locals as B x S x C (one channel vector per spatial location)."""
        b, c = self.locals.shape[:2]
        return self.locals.reshape(b, c, -1).permute(0, 2, 1)


def _tag(module: nn.Module, kind: str) -> nn.Module:
    module._init_kind = kind
    return module


class VolumeEncoder(nn.Module):
    """Stride-2 conv ladder -> flatten -> linear to repr_dim."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        stages = []
        prev = 1
        for i, ch in enumerate(spec.channels):
            conv = _tag(nn.Conv3d(prev, ch, 4, stride=2, padding=1), "leaky")
            layers = [conv]
            side_after = spec.input_side // 2 ** (i + 1)
            if 0 < i < spec.n_layers - 1 and side_after >= 2:
                layers.append(nn.InstanceNorm3d(ch, affine=True))
            layers.append(nn.LeakyReLU(spec.leak))
            stages.append(nn.Sequential(*layers))
            prev = ch
        self.stages = nn.ModuleList(stages)
        flat = spec.channels[-1] * spec.final_side**3
        self.fc = _tag(nn.Linear(flat, spec.repr_dim), "linear")

    def forward(self, x: torch.Tensor) -> ForwardOutputs:
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2] != self.spec.input_side:
            raise ConfigurationError(
                f"expected batch of shape B x 1 x {self.spec.input_side}^3, "
                f"got {tuple(x.shape)}"
            )
        local = None
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i == self.spec.local_layer:
                local = x
        z = self.fc(x.flatten(1))
        return ForwardOutputs(z=z, locals=local)


class LocalProjectionHead(nn.Module):
    """Residual block projecting local channel vectors into critic space.

    Path A is two 1x1x1 convs (hidden and output width = out_dim); path B is
    a single 1x1x1 conv initialized as the identity on the leading channels.
    """

    def __init__(self, in_channels: int, out_dim: int = 64):
        super().__init__()
        self.in_channels = in_channels
        self.out_dim = out_dim
        self.path_a = nn.Sequential(
            _tag(nn.Conv3d(in_channels, out_dim, 1), "relu"),
            nn.ReLU(),
            _tag(nn.Conv3d(out_dim, out_dim, 1), "linear"),
        )
        self.path_b = _tag(nn.Conv3d(in_channels, out_dim, 1), "identity")

    def forward(self, locals: torch.Tensor) -> torch.Tensor:
        if locals.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"local head expects {self.in_channels} channels, "
                f"got {locals.shape[1]}"
            )
        return self.path_a(locals) + self.path_b(locals)


class GlobalProjectionHead(nn.Module):
    """MLP head on z: n_hidden=0 is a single linear map."""

    def __init__(self, dim: int = 64, n_hidden: int = 0):
        super().__init__()
        if not 0 <= n_hidden <= 3:
            raise ConfigurationError("global head supports 0..3 hidden layers")
        layers: list[nn.Module] = []
        for _ in range(n_hidden):
            layers.append(_tag(nn.Linear(dim, dim), "relu"))
            layers.append(nn.ReLU())
        layers.append(_tag(nn.Linear(dim, dim), "linear"))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class VolumeDecoder(nn.Module):
    """Mirror of the encoder with transposed convs; sigmoid output."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        self.fc = _tag(
            nn.Linear(spec.repr_dim, spec.channels[-1] * spec.final_side**3),
            "leaky",
        )
        self.act = nn.LeakyReLU(spec.leak)
        rev = list(spec.channels[::-1])
        stages = []
        for i in range(len(rev)):
            out_ch = rev[i + 1] if i + 1 < len(rev) else 1
            conv = _tag(
                nn.ConvTranspose3d(rev[i], out_ch, 4, stride=2, padding=1),
                "linear" if out_ch == 1 else "leaky",
            )
            layers: list[nn.Module] = [conv]
            if out_ch != 1:
                layers.append(nn.LeakyReLU(spec.leak))
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        s = self.spec.final_side
        x = self.act(self.fc(z)).reshape(
            z.shape[0], self.spec.channels[-1], s, s, s
        )
        for stage in self.stages:
            x = stage(x)
        return torch.sigmoid(x)


class ModalityModel(nn.Module):
    """Encoder plus whatever heads the training objective needs."""

    def __init__(
        self,
        spec: EncoderSpec,
        local_head: bool = False,
        global_head_hidden: int | None = None,
        decoder: bool = False,
        n_classes: int | None = None,
    ):
        super().__init__()
        self.encoder = VolumeEncoder(spec)
        self.local_head = (
            LocalProjectionHead(spec.local_channels, spec.repr_dim)
            if local_head
            else None
        )
        self.global_head = (
            GlobalProjectionHead(spec.repr_dim, global_head_hidden)
            if global_head_hidden is not None
            else None
        )
        self.decoder = VolumeDecoder(spec) if decoder else None
        self.classifier = (
            _tag(nn.Linear(spec.repr_dim, n_classes), "linear")
            if n_classes is not None
            else None
        )

    def encode(self, x: torch.Tensor) -> ForwardOutputs:
        return self.encoder(x)

    def project_locals(self, out: ForwardOutputs) -> torch.Tensor:
        """Locals through the head, flattened to B x S x d."""
        if self.local_head is None:
            raise ConfigurationError("model has no local projection head")
        proj = self.local_head(out.locals)
        b, d = proj.shape[:2]
        return proj.reshape(b, d, -1).permute(0, 2, 1)

    def project_global(self, out: ForwardOutputs) -> torch.Tensor:
        """z through the global head (identity when no head is attached)."""
        if self.global_head is None:
            return out.z
        return self.global_head(out.z)


@dataclass(frozen=True)
class ModelConfig:
    """What to build for each modality; both share the same architecture
    but never share parameters."""

    encoder: EncoderSpec
    local_head: bool = False
    global_head_hidden: int | None = None
    decoder: bool = False
    n_classes: int | None = None


_LOCAL_TERMS = {"CR", "XX", "CC"}
_GLOBAL_HEAD_TERMS = {"CR", "XX", "RR", "CCA"}


def model_config_for_objective(
    encoder: EncoderSpec,
    terms: tuple[str, ...],
    global_head_hidden: int | None = 0,
    n_classes: int | None = None,
) -> ModelConfig:
    """Attach heads per objective: local head when locals are scored in
    critic space, global head for head-eligible objectives (the supervised,
    autoencoding, and CC-only schemes are excluded), decoder for AE,
    classifier for CE."""
    term_set = set(terms)
    wants_global = bool(term_set & _GLOBAL_HEAD_TERMS)
    return ModelConfig(
        encoder=encoder,
        local_head=bool(term_set & _LOCAL_TERMS),
        global_head_hidden=global_head_hidden if wants_global else None,
        decoder="AE" in term_set,
        n_classes=n_classes if "CE" in term_set else None,
    )


class FusionModel(nn.Module):
    """Independent per-modality models trained under one objective."""

    def __init__(self, config: ModelConfig, modalities=("m1", "m2")):
        super().__init__()
        self.config = config
        self.modality_names = tuple(modalities)
        self.parts = nn.ModuleDict(
            {
                m: ModalityModel(
                    config.encoder,
                    local_head=config.local_head,
                    global_head_hidden=config.global_head_hidden,
                    decoder=config.decoder,
                    n_classes=config.n_classes,
                )
                for m in self.modality_names
            }
        )

    def __getitem__(self, modality: str) -> ModalityModel:
        return self.parts[modality]


def _init_parameters(model: nn.Module, generator: torch.Generator) -> None:
    """Xavier-uniform weights with activation-matched gain, zero biases.

    Identity-tagged convs (local-head path B) get an identity kernel on the
    leading channels. Walk order is the module registration order, so the
    draw sequence is deterministic.
    """
    gains = {
        "leaky": nn.init.calculate_gain("leaky_relu", 0.2),
        "relu": nn.init.calculate_gain("relu"),
        "linear": 1.0,
    }
    for module in model.modules():
        kind = getattr(module, "_init_kind", None)
        if kind is None:
            continue
        if kind == "identity":
            with torch.no_grad():
                module.weight.zero_()
                out_ch, in_ch = module.weight.shape[:2]
                for i in range(min(out_ch, in_ch)):
                    module.weight[i, i, 0, 0, 0] = 1.0
        else:
            nn.init.xavier_uniform_(
                module.weight, gain=gains[kind], generator=generator
            )
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def build_model(
    config: ModelConfig, seed: int, modalities=("m1", "m2")
) -> FusionModel:
    """Construct and deterministically initialize a two-modality model."""
    config.encoder.validate()
    model = FusionModel(config, modalities)
    gen = torch.Generator().manual_seed(int(seed))
    _init_parameters(model, gen)
    return model


# Thin functional forms of the model operations, mainly for tests.

def forward_volumes(part: ModalityModel, batch: torch.Tensor) -> ForwardOutputs:
    return part.encode(batch)


def project_local(
    head: LocalProjectionHead, locals: torch.Tensor
) -> torch.Tensor:
    proj = head(locals)
    b, d = proj.shape[:2]
    return proj.reshape(b, d, -1).permute(0, 2, 1)


def project_global(head: GlobalProjectionHead, z: torch.Tensor) -> torch.Tensor:
    return head(z) if head is not None else z


def decode(decoder: VolumeDecoder, z: torch.Tensor) -> torch.Tensor:
    return decoder(z)
