"""Network assembly: the attention-guided identification model and its
comparison variants, the three-term training loss, and checkpoint IO.

Variants:
  baseline     RGB stream only; classifier on the spatially averaged map.
  model_a      both streams, averaged and concatenated, 3-layer classifier.
  model_b      bilinear pooling; classifier on the averaged pooled map.
  model_c      dot pooling; classifier on the averaged pooled map.
  model_d      dot pooling + attention refinement, no auxiliary heads.
  proposed     model_d plus the two auxiliary modality heads.
  cross_modal  one attention map applied to both streams, concatenated,
               single dense classifier.

The total training loss is the sum of the main-head cross-entropy and, when
the modality loss is enabled, the two auxiliary cross-entropies.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import AttentionRefinement, FeaturePooling, PoolingConfig, attend
from .backbone import Backbone, BackboneConfig, feature_shapes
from .kvconfig import format_kv, parse_bool, parse_int_list, parse_kv_text
from .nn import Dense, InitSpec, Initializer, count_params, conv_stack_param_count, dense_param_count
from .tensor import Tensor

VARIANTS = ("baseline", "model_a", "model_b", "model_c", "model_d", "proposed", "cross_modal")

# variant -> (default modality loss, is it forced)
_MODALITY_RULES = {
    "baseline": (False, True),
    "model_a": (False, True),
    "model_b": (True, True),
    "model_c": (True, True),
    "model_d": (False, True),
    "proposed": (True, True),
    "cross_modal": (False, False),
}

_ATTENTION_VARIANTS = ("model_d", "proposed", "cross_modal")
_POOLING_VARIANTS = ("model_b", "model_c", "model_d", "proposed", "cross_modal")


class ConfigError(ValueError):
    """Variant and configuration fields contradict each other."""


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    classifier_hidden: int = 1024
    aux_hidden: int = 1024
    num_classes: int = 2
    variant: str = "proposed"
    modality_loss: bool | None = None  # None resolves to the variant default
    dtype: str = "float32"
    init: InitSpec = field(default_factory=InitSpec)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        default, forced = _MODALITY_RULES[self.variant]
        if self.modality_loss is None:
            self.modality_loss = default
        elif forced and self.modality_loss != default:
            raise ConfigError(
                f"variant {self.variant} requires modality_loss={default}")
        if self.variant == "model_b" and self.pooling.mode != "bilinear":
            raise ConfigError("model_b requires bilinear pooling")
        if self.variant in ("model_c", "model_d", "proposed") and self.pooling.mode != "dot":
            raise ConfigError(f"variant {self.variant} requires dot pooling")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def has_guidance(self) -> bool:
        return self.variant != "baseline"

    @property
    def has_attention(self) -> bool:
        return self.variant in _ATTENTION_VARIANTS

    @property
    def has_pooling(self) -> bool:
        return self.variant in _POOLING_VARIANTS


def variant_config(base: ModelConfig, variant: str, *, seed: int | None = None) -> ModelConfig:
    """Re-target a config at another variant, fixing the dependent fields."""
    mode = "bilinear" if variant == "model_b" else "dot"
    pooling = replace(base.pooling, mode=mode)
    init = replace(base.init, seed=base.init.seed if seed is None else seed)
    return replace(base, variant=variant, pooling=pooling, modality_loss=None, init=init)


def toy_config(num_classes: int = 10, variant: str = "proposed", seed: int = 0,
               dtype: str = "float32") -> ModelConfig:
    """Desk-scale configuration: 64x64 inputs, blocks (8, 16, 32), C=8, K=16."""
    return ModelConfig(
        backbone=BackboneConfig(input_extent=64, block_widths=(8, 16, 32),
                                convs_per_block=(1, 1, 1)),
        pooling=PoolingConfig(mode="bilinear" if variant == "model_b" else "dot",
                              pooled_channels=8, shared_width=16),
        classifier_hidden=64,
        aux_hidden=64,
        num_classes=num_classes,
        variant=variant,
        dtype=dtype,
        init=InitSpec(seed=seed),
    )


def full_scale_config(num_classes: int = 509, variant: str = "proposed") -> ModelConfig:
    """The published architecture: VGG-16 streams, C=64, K=256, hidden 1024."""
    return ModelConfig(
        backbone=BackboneConfig(),
        pooling=PoolingConfig(mode="bilinear" if variant == "model_b" else "dot",
                              pooled_channels=64, shared_width=256),
        classifier_hidden=1024,
        aux_hidden=1024,
        num_classes=num_classes,
        variant=variant,
    )


def gradcheck_config(num_classes: int = 3, seed: int = 0) -> ModelConfig:
    """Toy geometry with heads narrowed so a full finite-difference sweep
    over every scalar parameter stays fast; always float64."""
    cfg = toy_config(num_classes=num_classes, seed=seed, dtype="float64")
    return replace(cfg, classifier_hidden=4, aux_hidden=4)


def shape_summary(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Feature-map shapes by arithmetic only; nothing is allocated."""
    shapes = dict(feature_shapes(cfg.backbone))
    m = cfg.backbone.feature_extent
    if cfg.has_pooling:
        shapes["pooled"] = (m, m, cfg.pooling.pooled_channels)
    if cfg.has_attention:
        shapes["attention"] = (m, m, 1)
    shapes["logits"] = (cfg.num_classes,)
    return shapes


@dataclass
class ForwardOutput:
    logits: Tensor
    embedding: Tensor
    aux_rgb_logits: Tensor | None = None
    aux_guidance_logits: Tensor | None = None
    attention: Tensor | None = None
    internals: dict = field(default_factory=dict)


class AuxBranch:
    """Flattened feature map -> Dense(hidden, tanh) -> Dense(classes)."""

    def __init__(self, in_width: int, hidden: int, num_classes: int, *, init: Initializer):
        self.in_width = in_width
        self.hidden = Dense(in_width, hidden, activation="tanh", init=init)
        self.out = Dense(hidden, num_classes, init=init)

    def __call__(self, fmap: Tensor) -> Tensor:
        flat = fmap.reshape((fmap.shape[0], -1))
        return self.out(self.hidden(flat))

    def parameters(self):
        return ([(f"hidden.{n}", p) for n, p in self.hidden.parameters()]
                + [(f"out.{n}", p) for n, p in self.out.parameters()])


class Model:
    """A built variant: holds all units and runs the forward pass."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        init = Initializer(cfg.init, dtype=cfg.np_dtype)
        bb_cfg = cfg.backbone
        phi = bb_cfg.rgb_feature_channels
        v = bb_cfg.guidance_feature_channels
        m = bb_cfg.feature_extent

        self.backbone = Backbone(bb_cfg, init=init, with_guidance=cfg.has_guidance)
        self.pooling = (FeaturePooling(cfg.pooling, phi, v, init=init)
                        if cfg.has_pooling else None)
        self.refine = (AttentionRefinement(cfg.pooling, init=init)
                       if cfg.has_attention else None)

        h = cfg.classifier_hidden
        ncls = cfg.num_classes
        if cfg.variant == "baseline":
            self.classifier = [Dense(phi, h, init=init), Dense(h, ncls, init=init)]
        elif cfg.variant == "model_a":
            self.classifier = [Dense(phi + v, h, activation="tanh", init=init),
                               Dense(h, h, activation="tanh", init=init),
                               Dense(h, ncls, init=init)]
        elif cfg.variant in ("model_b", "model_c"):
            self.classifier = [Dense(cfg.pooling.pooled_channels, h, init=init),
                               Dense(h, ncls, init=init)]
        elif cfg.variant in ("model_d", "proposed"):
            self.classifier = [Dense(phi, h, init=init), Dense(h, ncls, init=init)]
        else:  # cross_modal: single dense layer on the concatenated attended features
            self.classifier = [Dense(phi + v, ncls, init=init)]

        if cfg.modality_loss:
            self.aux_rgb = AuxBranch(m * m * phi, cfg.aux_hidden, ncls, init=init)
            self.aux_guidance = AuxBranch(m * m * v, cfg.aux_hidden, ncls, init=init)
        else:
            self.aux_rgb = None
            self.aux_guidance = None

    # -- parameters -----------------------------------------------------------

    def parameters(self):
        out = [(f"backbone.{n}", p) for n, p in self.backbone.parameters()]
        if self.pooling is not None:
            out += [(f"pooling.{n}", p) for n, p in self.pooling.parameters()]
        if self.refine is not None:
            out += [(f"refine.{n}", p) for n, p in self.refine.parameters()]
        for i, layer in enumerate(self.classifier):
            out += [(f"classifier.fc{i}.{n}", p) for n, p in layer.parameters()]
        for tag, branch in (("aux_rgb", self.aux_rgb), ("aux_guidance", self.aux_guidance)):
            if branch is not None:
                out += [(f"{tag}.{n}", p) for n, p in branch.parameters()]
        return out

    # -- forward --------------------------------------------------------------

    def _as_input(self, x, channels: int) -> tuple[Tensor, bool]:
        if isinstance(x, Tensor):
            arr = x.data
        else:
            arr = np.asarray(x)
        arr = arr.astype(self.cfg.np_dtype, copy=False)
        if arr.ndim == 3:
            return Tensor(arr[None]), True
        if arr.ndim == 4:
            return Tensor(arr), False
        raise T.ShapeError(f"expected HxWx{channels} or NxHxWx{channels}, got {arr.shape}")

    def features(self, rgb, guidance=None):
        """Both streams' feature maps (batched): (f_rgb, f_g, rgb_blocks, squeeze)."""
        cfg = self.cfg
        x_rgb, squeeze = self._as_input(rgb, cfg.backbone.rgb_channels)
        if cfg.has_guidance:
            if guidance is None:
                raise ValueError(f"variant {cfg.variant} needs a guidance raster")
            x_g, _ = self._as_input(guidance, cfg.backbone.guidance_channels)
        else:
            x_g = None
        rgb_blocks = self.backbone.rgb.block_outputs(x_rgb)
        f_g = self.backbone.extract_guidance(x_g) if x_g is not None else None
        return rgb_blocks[-1], f_g, rgb_blocks, squeeze

    def head(self, f_rgb: Tensor, f_g: Tensor | None, *, squeeze: bool = False,
             include_aux: bool | None = None, rgb_blocks=None) -> ForwardOutput:
        """Everything past the feature extractors, on batched feature maps."""
        cfg = self.cfg
        if include_aux is None:
            include_aux = bool(cfg.modality_loss)
        include_aux = include_aux and cfg.modality_loss

        attention = None
        if cfg.variant == "baseline":
            emb_in = f_rgb.mean(axis=(1, 2))
        elif cfg.variant == "model_a":
            emb_in = T.concat([f_rgb.mean(axis=(1, 2)), f_g.mean(axis=(1, 2))], axis=-1)
        elif cfg.variant in ("model_b", "model_c"):
            emb_in = self.pooling(f_rgb, f_g).mean(axis=(1, 2))
        elif cfg.variant in ("model_d", "proposed"):
            attention = self.refine(self.pooling(f_rgb, f_g))
            emb_in = attend(f_rgb, attention)
        else:  # cross_modal
            attention = self.refine(self.pooling(f_rgb, f_g))
            emb_in = T.concat([attend(f_rgb, attention), attend(f_g, attention)], axis=-1)

        if len(self.classifier) == 1:
            embedding = emb_in
            logits = self.classifier[0](emb_in)
        else:
            h = emb_in
            for layer in self.classifier[:-1]:
                h = layer(h)
            embedding = h
            logits = self.classifier[-1](h)

        aux_rgb_logits = aux_g_logits = None
        if include_aux:
            aux_rgb_logits = self.aux_rgb(f_rgb)
            aux_g_logits = self.aux_guidance(f_g)

        internals = {"f_rgb": f_rgb, "f_guidance": f_g, "rgb_blocks": rgb_blocks}

        def _sq(t):
            if t is None or not squeeze:
                return t
            return t.reshape(t.shape[1:])

        return ForwardOutput(
            logits=_sq(logits),
            embedding=_sq(embedding),
            aux_rgb_logits=_sq(aux_rgb_logits),
            aux_guidance_logits=_sq(aux_g_logits),
            attention=_sq(attention),
            internals=internals,
        )

    def forward(self, rgb, guidance=None, include_aux: bool | None = None) -> ForwardOutput:
        f_rgb, f_g, rgb_blocks, squeeze = self.features(rgb, guidance)
        return self.head(f_rgb, f_g, squeeze=squeeze, include_aux=include_aux,
                         rgb_blocks=rgb_blocks)

    def predict_logits(self, rgb, guidance=None) -> np.ndarray:
        """Inference logits as a numpy array; no tape, no auxiliary heads."""
        return self.forward(rgb, guidance, include_aux=False).logits.data

    def loss_total(self, out: ForwardOutput, labels) -> Tensor:
        return loss_total(out, labels, modality_loss=bool(self.cfg.modality_loss))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_identity(logits: Tensor, labels, which: str = "rgb") -> Tensor:
    """Auxiliary-branch cross-entropy, -log p at the true class."""
    if which not in ("rgb", "guidance"):
        raise ValueError(f"which must be rgb or guidance, got {which!r}")
    return T.cross_entropy(logits, labels)


def loss_attention(logits: Tensor, labels) -> Tensor:
    """Main-head cross-entropy (same contract as the identity losses)."""
    return T.cross_entropy(logits, labels)


def loss_total(out: ForwardOutput, labels, *, modality_loss: bool) -> Tensor:
    """Main loss plus both auxiliary losses when the modality loss is on."""
    main = loss_attention(out.logits, labels)
    if not modality_loss:
        return main
    if out.aux_rgb_logits is None or out.aux_guidance_logits is None:
        raise ValueError("modality loss requested but auxiliary logits are missing")
    l_rgb = loss_identity(out.aux_rgb_logits, labels, "rgb")
    l_g = loss_identity(out.aux_guidance_logits, labels, "guidance")
    return T.add(T.add(l_rgb, l_g), main)


def loss_components(model: Model, out: ForwardOutput, labels) -> dict[str, float]:
    """Scalar loss components for metrics; keys absent when not applicable."""
    comps: dict[str, float] = {}
    main = loss_attention(out.logits, labels).item()
    if model.cfg.has_pooling:
        comps["loss_attention"] = main
    if model.cfg.modality_loss:
        comps["loss_rgb"] = loss_identity(out.aux_rgb_logits, labels, "rgb").item()
        comps["loss_guidance"] = loss_identity(out.aux_guidance_logits, labels, "guidance").item()
        comps["loss_total"] = comps["loss_rgb"] + comps["loss_guidance"] + main
    else:
        comps["loss_total"] = main
    return comps


# ---------------------------------------------------------------------------
# parameter counting (closed-form, from the config alone)
# ---------------------------------------------------------------------------

def count_model_params(cfg: ModelConfig) -> int:
    bb = cfg.backbone
    phi = bb.rgb_feature_channels
    v = bb.guidance_feature_channels
    m = bb.feature_extent
    c = cfg.pooling.pooled_channels
    k = cfg.pooling.shared_width
    h = cfg.classifier_hidden
    ncls = cfg.num_classes

    total = conv_stack_param_count(bb.rgb_channels, bb.block_widths, bb.convs_per_block)
    if cfg.has_guidance:
        total += conv_stack_param_count(bb.guidance_channels, bb.block_widths,
                                        bb.convs_per_block)
    if cfg.has_pooling:
        total += dense_param_count(phi, c) + dense_param_count(v, c)
        if cfg.pooling.mode == "bilinear":
            total += dense_param_count(c, c)
    if cfg.has_attention:
        total += dense_param_count(c, k) + (k * 1 + 1)  # shared layer + 1x1 conv

    if cfg.variant == "baseline":
        total += dense_param_count(phi, h) + dense_param_count(h, ncls)
    elif cfg.variant == "model_a":
        total += (dense_param_count(phi + v, h) + dense_param_count(h, h)
                  + dense_param_count(h, ncls))
    elif cfg.variant in ("model_b", "model_c"):
        total += dense_param_count(c, h) + dense_param_count(h, ncls)
    elif cfg.variant in ("model_d", "proposed"):
        total += dense_param_count(phi, h) + dense_param_count(h, ncls)
    else:  # cross_modal
        total += dense_param_count(phi + v, ncls)

    if cfg.modality_loss:
        total += (dense_param_count(m * m * phi, cfg.aux_hidden)
                  + dense_param_count(cfg.aux_hidden, ncls)
                  + dense_param_count(m * m * v, cfg.aux_hidden)
                  + dense_param_count(cfg.aux_hidden, ncls))
    return total


# ---------------------------------------------------------------------------
# config text and checkpoint IO
# ---------------------------------------------------------------------------

def config_to_kv(cfg: ModelConfig) -> dict[str, object]:
    return {
        "variant": cfg.variant,
        "num_classes": cfg.num_classes,
        "input_extent": cfg.backbone.input_extent,
        "rgb_channels": cfg.backbone.rgb_channels,
        "guidance_channels": cfg.backbone.guidance_channels,
        "block_widths": cfg.backbone.block_widths,
        "convs_per_block": cfg.backbone.convs_per_block,
        "pooling_mode": cfg.pooling.mode,
        "pooled_channels": cfg.pooling.pooled_channels,
        "shared_width": cfg.pooling.shared_width,
        "classifier_hidden": cfg.classifier_hidden,
        "aux_hidden": cfg.aux_hidden,
        "modality_loss": bool(cfg.modality_loss),
        "dtype": cfg.dtype,
        "init_scheme": cfg.init.scheme,
        "init_sigma": cfg.init.sigma,
        "init_seed": cfg.init.seed,
    }


def config_from_kv(kv: dict[str, str]) -> ModelConfig:
    def get(key, default=None):
        return kv.get(key, default)

    backbone = BackboneConfig(
        input_extent=int(get("input_extent", 224)),
        rgb_channels=int(get("rgb_channels", 3)),
        guidance_channels=int(get("guidance_channels", 1)),
        block_widths=parse_int_list(get("block_widths", "64,128,256,512,512")),
        convs_per_block=parse_int_list(get("convs_per_block", "2,2,3,3,3")),
    )
    pooling = PoolingConfig(
        mode=get("pooling_mode", "dot"),
        pooled_channels=int(get("pooled_channels", 64)),
        shared_width=int(get("shared_width", 256)),
    )
    modality = get("modality_loss")
    return ModelConfig(
        backbone=backbone,
        pooling=pooling,
        classifier_hidden=int(get("classifier_hidden", 1024)),
        aux_hidden=int(get("aux_hidden", 1024)),
        num_classes=int(get("num_classes", 2)),
        variant=get("variant", "proposed"),
        modality_loss=None if modality in (None, "auto") else parse_bool(modality),
        dtype=get("dtype", "float32"),
        init=InitSpec(scheme=get("init_scheme", "uniform_fan_in"),
                      seed=int(get("init_seed", 0)),
                      sigma=float(get("init_sigma", 0.05))),
    )


CHECKPOINT_MAGIC = b"DGA1"


def save_checkpoint(path, model: Model) -> None:
    """Binary checkpoint: magic, length-prefixed config text, then one
    length-prefixed record (name, rank, extents, raw LE float32) per parameter."""
    params = model.parameters()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    cfg_text = format_kv(config_to_kv(model.cfg)).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_text)))
    buf.write(cfg_text)
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        data = np.ascontiguousarray(p.data, dtype="<f4")
        buf.write(data.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {raw[:4]!r})")
    off = 4

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (cfg_len,) = take("<I")
    cfg = config_from_kv(parse_kv_text(raw[off:off + cfg_len].decode("utf-8")))
    off += cfg_len
    (count,) = take("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape)
        off += n * 4
        params[name] = arr.copy()
    return cfg, params


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)


def load_model(path) -> Model:
    """Rebuild the model a checkpoint describes and restore its parameters."""
    cfg, params = load_checkpoint(path)
    model = Model(cfg)
    own = dict(model.parameters())
    if set(own) != set(params):
        missing = set(own) ^ set(params)
        raise ValueError(f"checkpoint parameters do not match the config: {sorted(missing)[:4]}")
    for name, arr in params.items():
        p = own[name]
        if tuple(arr.shape) != p.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(cfg.np_dtype)
    return model
