"""ANML (gated two-network) and OML (RLN + PLN) architectures, plus treatment flag tables."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import nn
from .autodiff import Tensor, default_dtype, ops
from .nn import Flags, LayerSpec, ParameterSet


@dataclass(frozen=True)
class ArchProfile:
    """Architecture hyperparameters; all sizes configurable."""

    name: str
    image_size: int
    pln_channels: int
    nm_channels: int
    kernel: int
    strides: tuple[int, ...]
    n_outputs: int
    oml_channels: int
    oml_strides: tuple[int, ...]
    oml_hidden: int
    padding: int = 0

    def with_overrides(self, **kw) -> "ArchProfile":
        return replace(self, **kw)


# 28x28 input: 3x3 kernels, strides (1, 3, 2) -> 26 -> 8 -> 3, latent 256*9 = 2304.
FULL = ArchProfile(
    name="full",
    image_size=28,
    pln_channels=256,
    nm_channels=112,
    kernel=3,
    strides=(1, 3, 2),
    n_outputs=1000,
    oml_channels=256,
    oml_strides=(2, 1, 1, 1, 1, 1),
    oml_hidden=1024,
)

# 14x14 input: strides (1, 2, 1) -> 12 -> 5 -> 3, latent 16*9 = 144.
DESK = ArchProfile(
    name="desk",
    image_size=14,
    pln_channels=16,
    nm_channels=16,
    kernel=3,
    strides=(1, 2, 1),
    n_outputs=64,
    oml_channels=16,
    oml_strides=(1, 1, 1, 1, 1, 1),
    oml_hidden=128,
)

PROFILES = {"full": FULL, "desk": DESK}


def get_profile(name: str, **overrides) -> ArchProfile:
    try:
        base = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; expected one of {sorted(PROFILES)}") from None
    return base.with_overrides(**overrides) if overrides else base


def profile_to_dict(p: ArchProfile) -> dict[str, str]:
    out = {}
    for f in fields(p):
        v = getattr(p, f.name)
        out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
    return out


def profile_from_dict(d: Mapping[str, str]) -> ArchProfile:
    kw = {}
    for f in fields(ArchProfile):
        raw = d[f.name]
        if f.name == "name":
            kw[f.name] = raw
        elif "strides" in f.name:
            kw[f.name] = tuple(int(s) for s in raw.split(","))
        else:
            kw[f.name] = int(raw)
    return ArchProfile(**kw)


def conv_stack(prefix: str, channels: int, strides: Sequence[int], kernel: int, padding: int, batchnorm: bool) -> list[LayerSpec]:
    specs: list[LayerSpec] = []
    cin = 1
    for i, s in enumerate(strides, start=1):
        specs.append(nn.conv(f"{prefix}conv{i}", cin, channels, kernel, s, padding))
        if batchnorm:
            specs.append(nn.batchnorm(f"{prefix}bn{i}", channels))
        specs.append(nn.relu())
        cin = channels
    return specs


def _as_images(images, dtype) -> Tensor:
    if isinstance(images, Tensor):
        x = images
    else:
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[:, None]
        x = Tensor(arr.astype(dtype, copy=False))
    if x.ndim != 4 or x.shape[1] != 1:
        raise nn.ShapeError(f"expected (N, H, W) or (N, 1, H, W) images, got {x.shape}")
    return x


# A plan splits a forward pass into a prefix that only touches frozen parameters
# (computed once for a whole batch) and a suffix re-run at every SGD step.
Prefix = Callable[[Mapping[str, Tensor], Tensor], tuple]
Suffix = Callable[[Mapping[str, Tensor], Tensor, tuple], Tensor]


class AnmlModel:
    """Neuromodulatory net gating the prediction net's latent vector.

    Parameter names: ``nm.*`` (gating network) and ``pln.*`` (prediction
    network); ``pln.fc`` is the classifier head.
    """

    kind = "anml"

    def __init__(self, params: ParameterSet, profile: ArchProfile, per_instance_bn: bool = True):
        self.params = params
        self.profile = profile
        self.per_instance_bn = per_instance_bn
        p = profile
        self.pln_convs = conv_stack("", p.pln_channels, p.strides, p.kernel, p.padding, True)
        self.nm_convs = conv_stack("", p.nm_channels, p.strides, p.kernel, p.padding, True)
        in_shape = (1, p.image_size, p.image_size)
        self.latent_size = int(np.prod(nn.chain_output_shape(self.pln_convs, in_shape)))
        self.nm_latent_size = int(np.prod(nn.chain_output_shape(self.nm_convs, in_shape)))
        self.nm_head = [nn.affine("fc", self.nm_latent_size, self.latent_size), nn.sigmoid()]
        self.pln_head = [nn.affine("fc", self.latent_size, p.n_outputs)]

    @classmethod
    def layer_specs(cls, profile: ArchProfile) -> dict[str, list[LayerSpec]]:
        m = cls.__new__(cls)
        AnmlModel.__init__(m, ParameterSet({}), profile)
        return {"nm.": m.nm_convs + m.nm_head, "pln.": m.pln_convs + m.pln_head}

    @classmethod
    def initialize(cls, profile: ArchProfile, seed: int, dtype=None, per_instance_bn: bool = True) -> "AnmlModel":
        rng = np.random.default_rng(seed)
        specs = cls.layer_specs(profile)
        shape = (1, profile.image_size, profile.image_size)
        tensors = {}
        for prefix in ("nm.", "pln."):
            tensors.update(nn.init_parameters(specs[prefix], rng, shape, prefix, dtype).items())
        return cls(ParameterSet(tensors), profile, per_instance_bn)

    def with_params(self, params: ParameterSet) -> "AnmlModel":
        return type(self)(params, self.profile, self.per_instance_bn)

    @property
    def nm_params(self) -> ParameterSet:
        return self.params.subset("nm.")

    @property
    def pln_params(self) -> ParameterSet:
        return self.params.subset("pln.")

    @property
    def head_names(self) -> tuple[str, str]:
        return ("pln.fc.weight", "pln.fc.bias")

    def images(self, images) -> Tensor:
        return _as_images(images, self.params["pln.fc.weight"].dtype if len(self.params) else default_dtype())

    def gate(self, values, x: Tensor, per_instance: bool | None = None) -> Tensor:
        pi = self.per_instance_bn if per_instance is None else per_instance
        h = nn.run_layers(self.nm_convs, values, x, "nm.", pi)
        return nn.run_layers(self.nm_head, values, h, "nm.", pi)

    def pre_gate(self, values, x: Tensor, per_instance: bool | None = None) -> Tensor:
        pi = self.per_instance_bn if per_instance is None else per_instance
        return ops.flatten(nn.run_layers(self.pln_convs, values, x, "pln.", pi))

    def head(self, values, post: Tensor) -> Tensor:
        return nn.run_layers(self.pln_head, values, post, "pln.")

    def forward(self, values, images, per_instance: bool | None = None) -> Tensor:
        return anml_forward(self, images, values, per_instance)[0]

    def plan(self, plastic: Sequence[str]) -> tuple[Prefix, Suffix]:
        plastic = set(plastic)
        if plastic <= set(self.head_names):
            def prefix(values, x):
                _, _, _, post = anml_forward(self, x, values, True)
                return (post,)

            return prefix, lambda values, x, cache: self.head(values, cache[0])
        if not any(n.startswith("nm.") for n in plastic):
            return (
                lambda values, x: (self.gate(values, x, True),),
                lambda values, x, cache: self.head(values, ops.mul(self.pre_gate(values, x, True), cache[0])),
            )
        return lambda values, x: (), lambda values, x, cache: self.forward(values, x, True)


def anml_forward(model: AnmlModel, images, values: Mapping[str, Tensor] | None = None, per_instance: bool | None = None):
    """Gated forward pass returning ``(logits, pre_gate, gate, post_gate)``."""
    values = model.params if values is None else values
    x = model.images(images)
    expect = model.profile.image_size
    if x.shape[2:] != (expect, expect):
        raise nn.ShapeError(f"profile {model.profile.name} expects {expect}x{expect} images, got {x.shape[2:]}")
    gate = model.gate(values, x, per_instance)
    pre = model.pre_gate(values, x, per_instance)
    post = ops.mul(pre, gate)
    return model.head(values, post), pre, gate, post


class OmlModel:
    """Six-conv representation network (``rln.*``) under a two-layer ``pln.*`` head, no batchnorm."""

    kind = "oml"

    def __init__(self, params: ParameterSet, profile: ArchProfile, per_instance_bn: bool = True):
        self.params = params
        self.profile = profile
        self.per_instance_bn = per_instance_bn
        p = profile
        self.rln = conv_stack("", p.oml_channels, p.oml_strides, p.kernel, p.padding, False)
        self.latent_size = int(np.prod(nn.chain_output_shape(self.rln, (1, p.image_size, p.image_size))))
        self.pln_hidden = [nn.affine("fc1", self.latent_size, p.oml_hidden), nn.relu()]
        self.pln_out = [nn.affine("fc2", p.oml_hidden, p.n_outputs)]

    @classmethod
    def layer_specs(cls, profile: ArchProfile) -> dict[str, list[LayerSpec]]:
        m = cls.__new__(cls)
        OmlModel.__init__(m, ParameterSet({}), profile)
        return {"rln.": m.rln, "pln.": m.pln_hidden + m.pln_out}

    @classmethod
    def initialize(cls, profile: ArchProfile, seed: int, dtype=None, per_instance_bn: bool = True) -> "OmlModel":
        rng = np.random.default_rng(seed)
        specs = cls.layer_specs(profile)
        shape = (1, profile.image_size, profile.image_size)
        tensors = dict(nn.init_parameters(specs["rln."], rng, shape, "rln.", dtype).items())
        latent = nn.chain_output_shape(specs["rln."], shape)
        tensors.update(nn.init_parameters(specs["pln."], rng, latent, "pln.", dtype).items())
        return cls(ParameterSet(tensors), profile, per_instance_bn)

    def with_params(self, params: ParameterSet) -> "OmlModel":
        return type(self)(params, self.profile, self.per_instance_bn)

    @property
    def rln_params(self) -> ParameterSet:
        return self.params.subset("rln.")

    @property
    def pln_params(self) -> ParameterSet:
        return self.params.subset("pln.")

    @property
    def head_names(self) -> tuple[str, str]:
        return ("pln.fc2.weight", "pln.fc2.bias")

    def images(self, images) -> Tensor:
        return _as_images(images, self.params["pln.fc2.weight"].dtype if len(self.params) else default_dtype())

    def representation(self, values, x: Tensor) -> Tensor:
        return ops.flatten(nn.run_layers(self.rln, values, x, "rln."))

    def hidden(self, values, latent: Tensor) -> Tensor:
        return nn.run_layers(self.pln_hidden, values, latent, "pln.")

    def head(self, values, hidden: Tensor) -> Tensor:
        return nn.run_layers(self.pln_out, values, hidden, "pln.")

    def forward(self, values, images, per_instance: bool | None = None) -> Tensor:
        return oml_forward(self, images, values)

    def plan(self, plastic: Sequence[str]) -> tuple[Prefix, Suffix]:
        plastic = set(plastic)
        if plastic <= set(self.head_names):
            return (
                lambda values, x: (self.hidden(values, self.representation(values, x)),),
                lambda values, x, cache: self.head(values, cache[0]),
            )
        if not any(n.startswith("rln.") for n in plastic):
            return (
                lambda values, x: (self.representation(values, x),),
                lambda values, x, cache: self.head(values, self.hidden(values, cache[0])),
            )
        return lambda values, x: (), lambda values, x, cache: self.forward(values, x)


def oml_forward(model: OmlModel, images, values: Mapping[str, Tensor] | None = None) -> Tensor:
    values = model.params if values is None else values
    x = model.images(images)
    expect = model.profile.image_size
    if x.shape[2:] != (expect, expect):
        raise nn.ShapeError(f"profile {model.profile.name} expects {expect}x{expect} images, got {x.shape[2:]}")
    return model.head(values, model.hidden(values, model.representation(values, x)))


Model = AnmlModel | OmlModel
ARCHITECTURES = {"anml": AnmlModel, "oml": OmlModel}


# ---------------------------------------------------------------- treatments


def _prefixes(*ps: str) -> Callable[[str], bool]:
    return lambda name: any(name.startswith(p) for p in ps)


_ALL = _prefixes("")
_NONE = _prefixes()


@dataclass(frozen=True)
class Treatment:
    name: str
    architecture: str
    meta_trained: bool
    pretrained: bool
    meta_learned: Callable[[str], bool]
    inner_plastic: Callable[[str], bool]
    metatest_plastic: Callable[[str], bool]

    def flags_for(self, names: Sequence[str]) -> dict[str, Flags]:
        return {
            n: Flags(bool(self.meta_learned(n)), bool(self.inner_plastic(n)), bool(self.metatest_plastic(n)))
            for n in names
        }

    def apply(self, model: Model) -> Model:
        if model.kind != self.architecture:
            raise ValueError(f"treatment {self.name} needs a {self.architecture} model, got {model.kind}")
        return model.with_params(model.params.with_flags(self.flags_for(model.params.names())))

    def build(self, profile: ArchProfile, seed: int, dtype=None, per_instance_bn: bool = True) -> Model:
        model = ARCHITECTURES[self.architecture].initialize(profile, seed, dtype, per_instance_bn)
        return self.apply(model)


def _anml(name, metatest) -> Treatment:
    return Treatment(name, "anml", True, False, _ALL, _prefixes("pln."), metatest)


def _oml(name, metatest) -> Treatment:
    return Treatment(name, "oml", True, False, _ALL, _prefixes("pln."), metatest)


TREATMENTS: dict[str, Treatment] = {
    t.name: t
    for t in (
        _anml("ANML", _prefixes("pln.fc.")),
        _anml("ANML-FT:PLN", _prefixes("pln.")),
        _anml("ANML-FT:PLN+NM_out", _prefixes("pln.", "nm.fc.")),
        _anml("ANML-Unlimited", _ALL),
        _oml("OML", _prefixes("pln.")),
        _oml("OML-OLFT", _prefixes("pln.fc2.")),
        _oml("OML-FT:PLN+RLN_final", _prefixes("pln.", "rln.conv6.")),
        _oml("OML-Unlimited", _ALL),
        Treatment("Scratch", "oml", False, False, _NONE, _NONE, _ALL),
        Treatment("Pretrain", "oml", False, True, _NONE, _NONE, _prefixes("pln.")),
    )
}


def treatment_profile(name: str) -> Treatment:
    """Look up a treatment; a trailing ``-Oracle`` is accepted and ignored here."""
    base = name[: -len("-Oracle")] if name.endswith("-Oracle") else name
    try:
        return TREATMENTS[base]
    except KeyError:
        raise ValueError(f"unknown treatment {name!r}; expected one of {sorted(TREATMENTS)}") from None


def build_model(kind: str, params: ParameterSet, profile: ArchProfile, per_instance_bn: bool = True) -> Model:
    return ARCHITECTURES[kind](params, profile, per_instance_bn)
