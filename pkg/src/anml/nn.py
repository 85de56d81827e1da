"""Layer specs, flagged parameter sets, SGD/Adam updates and checkpoint I/O."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .autodiff import Tensor, default_dtype, ops

LAYER_KINDS = ("conv2d", "batchnorm", "affine", "relu", "sigmoid")
FLAG_NAMES = ("meta_learned", "inner_plastic", "metatest_plastic")
CHECKPOINT_VERSION = "anml-checkpoint 1"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "batchnorm", "affine") and not self.name:
            raise ValueError(f"{self.kind} layer needs a name")
        if self.kind in ("conv2d", "affine") and (self.in_channels <= 0 or self.out_channels <= 0):
            raise ValueError(f"{self.name}: channel counts must be positive")
        if self.kind == "batchnorm" and self.out_channels <= 0:
            raise ValueError(f"{self.name}: channel count must be positive")
        if self.kernel <= 0 or self.stride <= 0 or self.padding < 0:
            raise ValueError(f"{self.name}: kernel/stride must be positive, padding non-negative")

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape; raises ShapeError when the input does not fit."""
        if self.kind == "conv2d":
            if len(shape) != 3 or shape[0] != self.in_channels:
                raise ShapeError(f"{self.name}: expects ({self.in_channels}, H, W) input, got {shape}")
            h, w = (s + 2 * self.padding for s in shape[1:])
            if h < self.kernel or w < self.kernel:
                raise ShapeError(f"{self.name}: input {shape} smaller than kernel {self.kernel}")
            return (
                self.out_channels,
                (h - self.kernel) // self.stride + 1,
                (w - self.kernel) // self.stride + 1,
            )
        if self.kind == "batchnorm":
            if shape[0] != self.out_channels:
                raise ShapeError(f"{self.name}: expects {self.out_channels} channels, got {shape}")
            return shape
        if self.kind == "affine":
            if math.prod(shape) != self.in_channels:
                raise ShapeError(f"{self.name}: expects {self.in_channels} inputs, got {shape}")
            return (self.out_channels,)
        return shape


def conv(name, cin, cout, kernel=3, stride=1, padding=0) -> LayerSpec:
    return LayerSpec("conv2d", name, cin, cout, kernel, stride, padding)


def batchnorm(name, channels) -> LayerSpec:
    return LayerSpec("batchnorm", name, out_channels=channels)


def affine(name, fan_in, fan_out) -> LayerSpec:
    return LayerSpec("affine", name, fan_in, fan_out)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def sigmoid() -> LayerSpec:
    return LayerSpec("sigmoid")


def chain_output_shape(specs: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    shape = tuple(input_shape)
    for spec in specs:
        shape = spec.output_shape(shape)
    return shape


@dataclass(frozen=True)
class Flags:
    meta_learned: bool = False
    inner_plastic: bool = False
    metatest_plastic: bool = False

    def label(self) -> str:
        on = [n for n in FLAG_NAMES if getattr(self, n)]
        return ",".join(on) if on else "none"

    @classmethod
    def parse(cls, text: str) -> "Flags":
        if text == "none":
            return cls()
        names = text.split(",")
        unknown = set(names) - set(FLAG_NAMES)
        if unknown:
            raise ValueError(f"unknown flags {sorted(unknown)}")
        return cls(**{n: True for n in names})


class ParameterSet:
    """Ordered name -> Tensor map with per-parameter flags.

    Tensors are never mutated in place; updates build a new set.  Flags are
    read-only once the set exists (use :meth:`with_flags` for a new profile).
    """

    def __init__(self, tensors: Mapping[str, Tensor], flags: Mapping[str, Flags] | None = None):
        self._tensors: dict[str, Tensor] = dict(tensors)
        flags = dict(flags or {})
        unknown = set(flags) - set(self._tensors)
        if unknown:
            raise KeyError(f"flags given for unknown parameters {sorted(unknown)}")
        self._flags = MappingProxyType({n: flags.get(n, Flags()) for n in self._tensors})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    @property
    def flags(self) -> Mapping[str, Flags]:
        return self._flags

    def count(self, names: Iterable[str] | None = None) -> int:
        names = self._tensors if names is None else names
        return sum(self._tensors[n].size for n in names)

    def where(self, flag: str) -> list[str]:
        if flag not in FLAG_NAMES:
            raise ValueError(f"unknown flag {flag!r}")
        return [n for n in self._tensors if getattr(self._flags[n], flag)]

    def subset(self, prefix: str) -> "ParameterSet":
        keep = {n: t for n, t in self._tensors.items() if n.startswith(prefix)}
        return ParameterSet(keep, {n: self._flags[n] for n in keep})

    def replace(self, updates: Mapping[str, Tensor]) -> "ParameterSet":
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise KeyError(f"unknown parameters {sorted(unknown)}")
        merged = {n: updates.get(n, t) for n, t in self._tensors.items()}
        return ParameterSet(merged, self._flags)

    def with_flags(self, flags: Mapping[str, Flags]) -> "ParameterSet":
        return ParameterSet(self._tensors, flags)

    def copy(self) -> "ParameterSet":
        """Deep copy; the result shares no storage and has no graph history."""
        return ParameterSet({n: Tensor(t.data.copy()) for n, t in self._tensors.items()}, self._flags)

    def as_leaves(self, names: Iterable[str] | None = None) -> "ParameterSet":
        """Fresh leaf tensors (sharing storage) that require grad for ``names`` (default: all)."""
        want = set(self._tensors if names is None else names)
        return ParameterSet(
            {n: Tensor(t.data, requires_grad=n in want) for n, t in self._tensors.items()}, self._flags
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}

    def fingerprint(self, names: Iterable[str] | None = None) -> str:
        h = hashlib.sha256()
        for n in self._tensors if names is None else names:
            arr = np.ascontiguousarray(self._tensors[n].data)
            h.update(n.encode())
            h.update(str(arr.dtype).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({n: Tensor(t.data.astype(dtype)) for n, t in self._tensors.items()}, self._flags)


def init_parameters(
    specs: Sequence[LayerSpec],
    seed: int | np.random.Generator,
    input_shape: tuple[int, ...] | None = None,
    prefix: str = "",
    dtype=None,
) -> ParameterSet:
    """Draw weights uniformly in +-sqrt(1/fan_in); biases and BN shift 0, BN scale 1."""
    if input_shape is not None:
        chain_output_shape(specs, input_shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = np.dtype(dtype or default_dtype())
    out: dict[str, Tensor] = {}
    for spec in specs:
        key = prefix + spec.name
        if spec.kind == "conv2d":
            fan_in = spec.in_channels * spec.kernel * spec.kernel
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        elif spec.kind == "affine":
            fan_in = spec.in_channels
            shape = (spec.out_channels, spec.in_channels)
        elif spec.kind == "batchnorm":
            out[key + ".weight"] = Tensor(np.ones(spec.out_channels, dtype=dtype))
            out[key + ".bias"] = Tensor(np.zeros(spec.out_channels, dtype=dtype))
            continue
        else:
            continue
        bound = math.sqrt(1.0 / fan_in)
        out[key + ".weight"] = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))
        out[key + ".bias"] = Tensor(np.zeros(spec.out_channels, dtype=dtype))
    return ParameterSet(out)


def run_layers(specs: Sequence[LayerSpec], values: Mapping[str, Tensor], x: Tensor, prefix: str = "", per_instance: bool = True) -> Tensor:
    """Apply a layer chain; affine layers flatten their input first."""
    for spec in specs:
        key = prefix + spec.name
        if spec.kind == "conv2d":
            x = ops.conv2d(x, values[key + ".weight"], values[key + ".bias"], spec.stride, spec.padding)
        elif spec.kind == "batchnorm":
            x = ops.batch_norm(x, values[key + ".weight"], values[key + ".bias"], per_instance=per_instance)
        elif spec.kind == "affine":
            if x.ndim != 2:
                x = ops.flatten(x)
            x = ops.affine(x, values[key + ".weight"], values[key + ".bias"])
        elif spec.kind == "relu":
            x = ops.relu(x)
        else:
            x = ops.sigmoid(x)
    return x


def _aligned(params: ParameterSet, names: list[str], grads) -> list[Tensor]:
    if isinstance(grads, Mapping):
        if set(grads) != set(names):
            raise ValueError(f"gradients given for {sorted(grads)}, expected {names}")
        grads = [grads[n] for n in names]
    grads = list(grads)
    if len(grads) != len(names):
        raise ValueError(f"{len(grads)} gradients for {len(names)} parameters")
    for n, g in zip(names, grads):
        if g.shape != params[n].shape:
            raise ValueError(f"gradient for {n} has shape {g.shape}, parameter has {params[n].shape}")
    return grads


def sgd_step(params: ParameterSet, grads, beta: float, differentiable: bool = False, plastic: str = "inner_plastic") -> ParameterSet:
    """One SGD step on the parameters carrying ``plastic``; all others pass through.

    ``grads`` aligns with ``params.where(plastic)`` (a list in that order or a
    name-keyed mapping).  With ``differentiable`` the update is recorded as
    graph ops so later losses can be differentiated back through it.
    """
    if beta < 0:
        raise ValueError(f"learning rate must be non-negative, got {beta}")
    names = params.where(plastic)
    grads = _aligned(params, names, grads)
    updates = {}
    for n, g in zip(names, grads):
        p = params[n]
        if differentiable:
            updates[n] = ops.sub(p, ops.scale(g, beta))
        else:
            updates[n] = Tensor(p.data - p.data.dtype.type(beta) * g.data)
    return params.replace(updates)


@dataclass
class AdamState:
    """Moment accumulators for the meta-learned parameters; advanced in place."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParameterSet, **hyper) -> "AdamState":
        names = params.where("meta_learned")
        return cls(
            m={n: np.zeros_like(params[n].data) for n in names},
            v={n: np.zeros_like(params[n].data) for n in names},
            **hyper,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            self.step,
            {n: a.copy() for n, a in self.m.items()},
            {n: a.copy() for n, a in self.v.items()},
            self.beta1,
            self.beta2,
            self.eps,
        )


def adam_step(params: ParameterSet, grads, state: AdamState, alpha: float) -> ParameterSet:
    """Bias-corrected Adam update of the meta-learned parameters."""
    names = params.where("meta_learned")
    if sorted(state.m) != sorted(names):
        raise ValueError("Adam state does not match the meta-learned parameter set")
    grads = _aligned(params, names, grads)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    updates = {}
    for n, g in zip(names, grads):
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        g = g.astype(state.m[n].dtype, copy=False)
        m = state.m[n] = state.beta1 * state.m[n] + (1.0 - state.beta1) * g
        v = state.v[n] = state.beta2 * state.v[n] + (1.0 - state.beta2) * (g * g)
        step = alpha * (m / c1) / (np.sqrt(v / c2) + state.eps)
        updates[n] = Tensor((params[n].data - step).astype(params[n].dtype, copy=False))
    return params.replace(updates)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(
    directory: str | Path,
    params: ParameterSet,
    metadata: Mapping[str, object] | None = None,
    adam: AdamState | None = None,
) -> Path:
    """Write ``manifest.txt`` + ``params.bin`` (little-endian float32, manifest order).

    Adam moments, when given, are stored as extra entries named
    ``adam.m:<param>`` / ``adam.v:<param>`` after the parameters.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries: list[tuple[str, np.ndarray, str]] = [(n, t.data, params.flags[n].label()) for n, t in params.items()]
    meta = dict(metadata or {})
    if adam is not None:
        meta.update(adam_step=adam.step, adam_beta1=adam.beta1, adam_beta2=adam.beta2, adam_eps=adam.eps)
        entries += [(f"adam.m:{n}", a, "none") for n, a in adam.m.items()]
        entries += [(f"adam.v:{n}", a, "none") for n, a in adam.v.items()]

    lines = [CHECKPOINT_VERSION]
    for k, v in meta.items():
        if any(c.isspace() for c in str(k)) or "\n" in str(v):
            raise ValueError(f"metadata key/value not representable: {k!r}")
        lines.append(f"{k} = {v}")
    offset = 0
    blobs = []
    for name, arr, flags in entries:
        data = np.ascontiguousarray(arr, dtype="<f4")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"param {name} float32 {shape} {flags} {offset}")
        blobs.append(data.tobytes())
        offset += data.nbytes
    tmp = directory / "params.bin.tmp"
    tmp.write_bytes(b"".join(blobs))
    tmp.replace(directory / "params.bin")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


@dataclass
class Checkpoint:
    params: ParameterSet
    metadata: dict[str, str]
    adam: AdamState | None


def load_checkpoint(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    lines = (directory / "manifest.txt").read_text().splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_VERSION:
        raise ValueError(f"{directory}: not a checkpoint (expected first line {CHECKPOINT_VERSION!r})")
    blob = (directory / "params.bin").read_bytes()
    meta: dict[str, str] = {}
    tensors: dict[str, Tensor] = {}
    flags: dict[str, Flags] = {}
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("param "):
            _, name, dtype, shape, flag_text, offset = line.split()
            if dtype != "float32":
                raise ValueError(f"{name}: unsupported dtype {dtype}")
            dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
            count = math.prod(dims)
            start = int(offset)
            if start + 4 * count > len(blob):
                raise ValueError(f"{name}: blob truncated")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).astype(np.float32).reshape(dims)
            if name.startswith("adam.m:"):
                m[name[7:]] = arr
            elif name.startswith("adam.v:"):
                v[name[7:]] = arr
            else:
                tensors[name] = Tensor(arr)
                flags[name] = Flags.parse(flag_text)
        else:
            key, _, value = line.partition(" = ")
            meta[key.strip()] = value
    adam = None
    if "adam_step" in meta:
        adam = AdamState(
            int(meta.pop("adam_step")),
            m,
            v,
            float(meta.pop("adam_beta1")),
            float(meta.pop("adam_beta2")),
            float(meta.pop("adam_eps")),
        )
    return Checkpoint(ParameterSet(tensors, flags), meta, adam)
