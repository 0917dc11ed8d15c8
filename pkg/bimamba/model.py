##############################################################################
# model.py
# Bidirectional selective-SSM classifier for one or two radiograph views
##############################################################################
"""
`BiMambaModel` turns one or two grayscale views into a single logit.

Images are cut into ``P x P`` patches, projected to ``d_model`` features and
laid out as a token sequence around a learned ``[CLS]`` token:

- single view: ``[patches[:J // 2], cls, patches[J // 2:]]``
- multi view, input patch concatenation: ``[U_1..U_J, cls, V_1..V_J]``
- multi view, ``[CLS]`` concatenation: each view is encoded on its own with
  shared weights and the two ``[CLS]`` outputs are concatenated for the head.

The sequence passes through ``n_blocks`` bidirectional blocks, each running
a forward and a backward selective scan over the same projected tokens.
"""
import dataclasses
import enum
import logging
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Tuple

import torch
from einops import rearrange
from torch import nn

from bimamba import ops
from bimamba._exceptions import ConfigError, ShapeError
from bimamba.ssm import (
    Direction,
    Discretization,
    ScanMode,
    SsmDirection,
    default_dt_rank,
    scan_in_frame,
)
from bimamba.utils import record_activation

__all__ = [
    "Views",
    "ViewName",
    "Fusion",
    "ResidualMode",
    "Norm",
    "ModelConfig",
    "PRESETS",
    "TokenSequence",
    "patchify",
    "unpatchify",
    "assemble_single_view",
    "assemble_multi_view",
    "BiMambaBlock",
    "BiMambaModel",
    "model_forward",
    "probability",
    "cls_concat_forward",
    "bce_loss",
]

logger = logging.getLogger(__name__)

EMBEDDING_STD = 0.02


class Views(enum.Enum):
    SINGLE = "single"
    MULTI = "multi"


class ViewName(enum.Enum):
    FRONTAL = "frontal"
    LATERAL = "lateral"


class Fusion(enum.Enum):
    INPUT_PATCH_CONCAT = "input_patch_concat"
    CLS_TOKEN_CONCAT = "cls_token_concat"


class ResidualMode(enum.Enum):
    SINGLE = "single"
    LITERAL_PAPER = "literal_paper"


class Norm(enum.Enum):
    RMS = "rms"
    LAYER = "layer"


_DTYPES = {"float32": torch.float32, "float64": torch.float64}

_ENUM_FIELDS = {
    "views": Views,
    "single_view": ViewName,
    "fusion": Fusion,
    "residual_mode": ResidualMode,
    "discretization": Discretization,
    "norm": Norm,
    "scan_mode": ScanMode,
}


@dataclasses.dataclass
class ModelConfig:
    n_blocks: int = 4
    d_model: int = 64
    d_inner: int = 128
    d_state: int = 8
    patch_size: int = 8
    image_height: int = 64
    image_width: int = 64
    d_conv: int = 4
    # 0 selects ceil(d_model / 16)
    dt_rank: int = 0
    views: str = Views.MULTI.value
    single_view: str = ViewName.FRONTAL.value
    fusion: str = Fusion.INPUT_PATCH_CONCAT.value
    residual_mode: str = ResidualMode.SINGLE.value
    discretization: str = Discretization.MULTIPLICATION.value
    norm: str = Norm.RMS.value
    scan_mode: str = ScanMode.PARALLEL.value
    # Channels scanned at once; 0 scans all channels together
    scan_chunk: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        for name, kind in _ENUM_FIELDS.items():
            value = getattr(self, name)
            if isinstance(value, enum.Enum):
                value = value.value
                setattr(self, name, value)
            try:
                kind(value)
            except ValueError:
                choices = ", ".join(m.value for m in kind)
                raise ConfigError(
                    f"Invalid {name} {value!r}, expected one of: {choices}"
                ) from None
        if self.dtype not in _DTYPES:
            raise ConfigError(
                f"Invalid dtype {self.dtype!r}, expected float32 or float64"
            )
        for name in (
            "n_blocks",
            "d_model",
            "d_inner",
            "d_state",
            "patch_size",
            "image_height",
            "image_width",
            "d_conv",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dt_rank < 0 or self.scan_chunk < 0:
            raise ConfigError("dt_rank and scan_chunk must not be negative")
        if (
            self.image_height % self.patch_size
            or self.image_width % self.patch_size
        ):
            raise ConfigError(
                f"Image size {self.image_height}x{self.image_width} is not"
                f" divisible by patch size {self.patch_size}"
            )
        if self.d_inner <= self.d_model:
            raise ConfigError(
                f"d_inner ({self.d_inner}) must exceed"
                f" d_model ({self.d_model})"
            )

    @property
    def n_patches(self) -> int:
        return (self.image_height // self.patch_size) * (
            self.image_width // self.patch_size
        )

    @property
    def concatenates_inputs(self) -> bool:
        return (
            self.views == Views.MULTI.value
            and self.fusion == Fusion.INPUT_PATCH_CONCAT.value
        )

    @property
    def seq_len(self) -> int:
        if self.concatenates_inputs:
            return 2 * self.n_patches + 1
        return self.n_patches + 1

    @property
    def cls_index(self) -> int:
        if self.concatenates_inputs:
            return self.n_patches
        return self.n_patches // 2

    @property
    def mode(self) -> str:
        """
        The evaluation axis: ``input_patch_concat``, ``cls_token_concat``,
        ``single_frontal`` or ``single_lateral``.
        """
        if self.views == Views.SINGLE.value:
            return f"single_{self.single_view}"
        return self.fusion

    @property
    def resolved_dt_rank(self) -> int:
        return self.dt_rank or default_dt_rank(self.d_model)

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_items(self) -> List[Tuple[str, str]]:
        return [
            (f.name, str(getattr(self, f.name)))
            for f in dataclasses.fields(self)
        ]

    @classmethod
    def field_names(cls) -> List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_items(cls, items: Mapping[str, str]) -> "ModelConfig":
        """
        Builds a config from string values, as found in config files and
        checkpoint headers. Unknown keys raise `ConfigError`.
        """
        kwargs: Dict[str, Any] = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in items.items():
            if key not in types:
                raise ConfigError(f"Unknown model config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def _coerce(key: str, raw: Any, kind) -> Any:
    if kind in (int, "int"):
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError(
                f"{key} must be an integer, got {raw!r}"
            ) from None
    return str(raw).strip()


PRESETS: Dict[str, ModelConfig] = {
    "toy": ModelConfig(
        n_blocks=2,
        d_model=8,
        d_inner=16,
        d_state=4,
        patch_size=8,
        image_height=16,
        image_width=16,
        d_conv=4,
        scan_chunk=0,
    ),
    "desk": ModelConfig(),
    "paper": ModelConfig(
        n_blocks=24,
        d_model=384,
        d_inner=768,
        d_state=16,
        patch_size=16,
        image_height=512,
        image_width=512,
        d_conv=4,
    ),
}


class TokenSequence(NamedTuple):
    tokens: torch.Tensor
    cls_index: int


def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """
    Cuts ``(..., H, W)`` images into ``(..., J, P * P)`` patches, row-major
    over patches and row-major inside each patch.
    """
    height, width = image.shape[-2:]
    if height % patch_size or width % patch_size:
        raise ShapeError(
            f"Image of size {height}x{width} is not divisible into"
            f" {patch_size}x{patch_size} patches"
        )
    patches = rearrange(
        image,
        "... (h p1) (w p2) -> ... (h w) (p1 p2)",
        p1=patch_size,
        p2=patch_size,
    )
    return record_activation("patchify", patches)


def unpatchify(
    patches: torch.Tensor, patch_size: int, height: int
) -> torch.Tensor:
    """Reassembles the output of `patchify`."""
    return rearrange(
        patches,
        "... (h w) (p1 p2) -> ... (h p1) (w p2)",
        h=height // patch_size,
        p1=patch_size,
        p2=patch_size,
    )


def _expand_cls(cls_token: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return cls_token.expand(*like.shape[:-2], 1, cls_token.shape[-1])


def _add_positions(
    tokens: torch.Tensor, pos_embedding: torch.Tensor
) -> torch.Tensor:
    if pos_embedding.shape != tokens.shape[-2:]:
        raise ShapeError(
            f"Positional table of shape {tuple(pos_embedding.shape)} does"
            f" not match token sequence {tuple(tokens.shape[-2:])}"
        )
    return ops.add(tokens, pos_embedding)


def assemble_single_view(
    patch_emb: torch.Tensor,
    cls_token: torch.Tensor,
    pos_embedding: torch.Tensor,
) -> TokenSequence:
    """Places ``[CLS]`` in the middle of one view's ``J`` patch tokens."""
    middle = patch_emb.shape[-2] // 2
    tokens = ops.concat(
        (
            patch_emb[..., :middle, :],
            _expand_cls(cls_token, patch_emb),
            patch_emb[..., middle:, :],
        ),
        axis=-2,
    )
    return TokenSequence(_add_positions(tokens, pos_embedding), middle)


def assemble_multi_view(
    patch_emb_u: torch.Tensor,
    patch_emb_v: torch.Tensor,
    cls_token: torch.Tensor,
    pos_embedding: torch.Tensor,
) -> TokenSequence:
    """Lays out ``[U_1..U_J, cls, V_1..V_J]`` with one positional table."""
    if patch_emb_u.shape != patch_emb_v.shape:
        raise ShapeError(
            f"View embeddings differ in shape: {tuple(patch_emb_u.shape)}"
            f" vs {tuple(patch_emb_v.shape)}"
        )
    tokens = ops.concat(
        (patch_emb_u, _expand_cls(cls_token, patch_emb_u), patch_emb_v),
        axis=-2,
    )
    return TokenSequence(
        _add_positions(tokens, pos_embedding), patch_emb_u.shape[-2]
    )


class _Normalizer(nn.Module):
    def __init__(self, kind: Norm, width: int, dtype: torch.dtype):
        super().__init__()
        self.kind = kind
        self.gain = nn.Parameter(torch.ones(width, dtype=dtype))
        if kind is Norm.LAYER:
            self.bias = nn.Parameter(torch.zeros(width, dtype=dtype))
        else:
            self.register_parameter("bias", None)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind is Norm.LAYER:
            return ops.layer_norm(x, self.gain, self.bias)
        return ops.rms_norm(x, self.gain)


class BiMambaBlock(nn.Module):
    """
    One bidirectional block:

    ``T' = norm(T); x = T' Wx; z = T' Wz``, then per direction
    ``x'_d = silu(conv_d(x))`` and ``r_d = (scan_d(x'_d) * silu(z)) Wt``.
    With the ``single`` residual mode ``T_out = r_fwd + r_bwd + T``; the
    ``literal_paper`` mode adds ``T`` inside each direction.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        dtype = config.torch_dtype
        d, e = config.d_model, config.d_inner
        self.residual_mode = ResidualMode(config.residual_mode)
        self.scan_mode = ScanMode(config.scan_mode)
        self.discretization = Discretization(config.discretization)
        self.scan_chunk = config.scan_chunk
        self.norm = _Normalizer(Norm(config.norm), d, dtype)
        self.x_proj = nn.Parameter(torch.empty(d, e, dtype=dtype))
        self.z_proj = nn.Parameter(torch.empty(d, e, dtype=dtype))
        self.out_proj = nn.Parameter(torch.zeros(e, d, dtype=dtype))
        self.forward_ssm = SsmDirection(
            e,
            config.d_state,
            config.d_conv,
            config.resolved_dt_rank,
            Direction.FORWARD,
            dtype,
        )
        self.backward_ssm = SsmDirection(
            e,
            config.d_state,
            config.d_conv,
            config.resolved_dt_rank,
            Direction.BACKWARD,
            dtype,
        )

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator) -> None:
        bound = self.x_proj.shape[0] ** -0.5
        for weight in (self.x_proj, self.z_proj):
            noise = torch.rand(
                weight.shape, generator=generator, dtype=weight.dtype
            )
            weight.copy_((noise * 2 - 1) * bound)
        self.out_proj.zero_()
        self.norm.gain.fill_(1.0)
        if self.norm.bias is not None:
            self.norm.bias.zero_()
        self.forward_ssm.reset_parameters(generator)
        self.backward_ssm.reset_parameters(generator)

    def mix(self, x: torch.Tensor, direction: SsmDirection) -> torch.Tensor:
        """
        Convolution, activation and scan for one direction, returned in
        natural sequence order.
        """
        backward = direction.direction is Direction.BACKWARD
        if backward:
            x = ops.reverse(x, axis=-2)
        x_prime = ops.silu(
            ops.depthwise_conv1d(x, direction.conv_kernel, direction.conv_bias)
        )
        y = scan_in_frame(
            x_prime,
            direction,
            self.scan_mode,
            discretization=self.discretization,
            scan_chunk=self.scan_chunk,
        )
        if backward:
            y = ops.reverse(y, axis=-2)
        return y

    def forward(
        self, tokens: torch.Tensor, disable_backward: bool = False
    ) -> torch.Tensor:
        normed = self.norm(tokens)
        x = ops.matmul(normed, self.x_proj)
        gate = ops.silu(ops.matmul(normed, self.z_proj))
        del normed

        directions = [self.forward_ssm]
        if not disable_backward:
            directions.append(self.backward_ssm)
        literal = self.residual_mode is ResidualMode.LITERAL_PAPER

        out: Optional[torch.Tensor] = None
        for direction in directions:
            r = ops.matmul(ops.mul(self.mix(x, direction), gate), self.out_proj)
            if literal:
                r = ops.add(r, tokens)
            out = r if out is None else ops.add(out, r)
        if not literal:
            out = ops.add(out, tokens)
        return out


class BiMambaModel(nn.Module):
    def __init__(self, config: ModelConfig, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        dtype = config.torch_dtype
        d = config.d_model
        patch_width = config.patch_size**2
        head_in = 2 * d if self.cls_concat else d

        self.patch_proj = nn.Parameter(
            torch.empty(patch_width, d, dtype=dtype)
        )
        self.patch_bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.cls_token = nn.Parameter(torch.empty(d, dtype=dtype))
        self.pos_embedding = nn.Parameter(
            torch.empty(config.seq_len, d, dtype=dtype)
        )
        self.blocks = nn.ModuleList(
            BiMambaBlock(config) for _ in range(config.n_blocks)
        )
        self.final_norm = _Normalizer(Norm(config.norm), d, dtype)
        self.head_hidden = nn.Parameter(torch.empty(head_in, d, dtype=dtype))
        self.head_hidden_bias = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.head_out = nn.Parameter(torch.empty(d, 1, dtype=dtype))
        self.head_out_bias = nn.Parameter(torch.zeros(1, dtype=dtype))

        # Ablation switch: skip every block's backward scan
        self.disable_backward_branch = False

        if seed is not None:
            self.reset_parameters(seed)

    @property
    def cls_concat(self) -> bool:
        return (
            self.config.views == Views.MULTI.value
            and self.config.fusion == Fusion.CLS_TOKEN_CONCAT.value
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.config.torch_dtype

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        dtype = self.dtype

        def uniform_(weight: torch.Tensor):
            bound = weight.shape[0] ** -0.5
            noise = torch.rand(weight.shape, generator=generator, dtype=dtype)
            weight.copy_((noise * 2 - 1) * bound)

        def normal_(weight: torch.Tensor):
            noise = torch.randn(weight.shape, generator=generator, dtype=dtype)
            weight.copy_(noise * EMBEDDING_STD)

        uniform_(self.patch_proj)
        self.patch_bias.zero_()
        normal_(self.cls_token)
        normal_(self.pos_embedding)
        for block in self.blocks:
            block.reset_parameters(generator)
        self.final_norm.gain.fill_(1.0)
        if self.final_norm.bias is not None:
            self.final_norm.bias.zero_()
        uniform_(self.head_hidden)
        self.head_hidden_bias.zero_()
        uniform_(self.head_out)
        self.head_out_bias.zero_()
        logger.debug(
            f"Initialized {self.config.mode} model with seed {seed}:"
            f" {self.parameter_count():,} parameters"
        )

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _as_image(self, image) -> torch.Tensor:
        image = torch.as_tensor(image).to(self.dtype)
        expected = (self.config.image_height, self.config.image_width)
        if image.dim() < 2 or tuple(image.shape[-2:]) != expected:
            raise ShapeError(
                f"Expected images of size {expected[0]}x{expected[1]},"
                f" got shape {tuple(image.shape)}"
            )
        return image

    def embed(self, image: torch.Tensor) -> torch.Tensor:
        patches = patchify(self._as_image(image), self.config.patch_size)
        return ops.add(ops.matmul(patches, self.patch_proj), self.patch_bias)

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens, self.disable_backward_branch)
        return tokens

    def assemble(
        self, frontal: torch.Tensor, lateral: Optional[torch.Tensor] = None
    ) -> TokenSequence:
        """Builds the token sequence for the configured view layout."""
        if self.config.concatenates_inputs:
            if lateral is None:
                raise ShapeError("Multi-view input needs a lateral image")
            return assemble_multi_view(
                self.embed(frontal),
                self.embed(lateral),
                self.cls_token,
                self.pos_embedding,
            )
        image = frontal
        if self.config.single_view == ViewName.LATERAL.value:
            if lateral is None:
                raise ShapeError("Lateral single-view model needs a lateral")
            image = lateral
        return assemble_single_view(
            self.embed(image), self.cls_token, self.pos_embedding
        )

    def _cls_features(self, sequence: TokenSequence) -> torch.Tensor:
        out = self.encode(sequence.tokens)
        return self.final_norm(out[..., sequence.cls_index, :])

    def forward(
        self, frontal: torch.Tensor, lateral: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """Returns pre-sigmoid logits of shape ``frontal.shape[:-2]``."""
        if self.cls_concat:
            if lateral is None:
                raise ShapeError("[CLS] concatenation needs a lateral image")
            features = ops.concat(
                [
                    self._cls_features(
                        assemble_single_view(
                            self.embed(view), self.cls_token, self.pos_embedding
                        )
                    )
                    for view in (frontal, lateral)
                ],
                axis=-1,
            )
        else:
            features = self._cls_features(self.assemble(frontal, lateral))
        hidden = ops.tanh(
            ops.add(
                ops.matmul(features.unsqueeze(-2), self.head_hidden),
                self.head_hidden_bias,
            )
        )
        logit = ops.add(ops.matmul(hidden, self.head_out), self.head_out_bias)
        return logit[..., 0, 0]

    def predict(
        self, frontal: torch.Tensor, lateral: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        return probability(self(frontal, lateral))


def probability(logits: torch.Tensor) -> torch.Tensor:
    """
    Sigmoid of `logits`, clamped to the open interval (0, 1) at their
    precision. Logits beyond about 17 in float32 or 37 in float64 all map
    to the largest value below 1, so rank by logits where ties matter.
    """
    p = ops.sigmoid(logits)
    one = torch.ones((), dtype=p.dtype)
    high = float(torch.nextafter(one, torch.zeros_like(one)))
    return p.clamp(min=torch.finfo(p.dtype).tiny, max=high)


def model_forward(
    model: BiMambaModel,
    frontal: torch.Tensor,
    lateral: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Probability of the positive class, strictly inside (0, 1)."""
    return model.predict(frontal, lateral)


def cls_concat_forward(
    model: BiMambaModel, frontal: torch.Tensor, lateral: torch.Tensor
) -> torch.Tensor:
    if not model.cls_concat:
        raise ConfigError(
            f"cls_concat_forward needs a cls_token_concat model,"
            f" got {model.config.mode}"
        )
    return model.predict(frontal, lateral)


def bce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Mean binary cross-entropy from logits,
    ``softplus(z) - y * z``, which equals
    ``-[y log(sigmoid(z)) + (1 - y) log(1 - sigmoid(z))]`` without
    evaluating either logarithm.
    """
    labels = torch.as_tensor(labels).to(logits.dtype)
    if labels.shape != logits.shape:
        raise ShapeError(
            f"Labels of shape {tuple(labels.shape)} do not match logits"
            f" of shape {tuple(logits.shape)}"
        )
    per_sample = ops.sub(ops.softplus(logits), ops.mul(labels, logits))
    count = float(max(per_sample.numel(), 1))
    return ops.div(ops.reduce_sum(per_sample), count)
