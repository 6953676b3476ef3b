"""Quantized integer model graph and its plaintext reference engine.

Fixed point convention: a tensor with scale_bits s holds round(x * 2**s).
Inputs and weights are 16-bit values at their own scales; a linear layer
multiplies them into a wider accumulator at the combined scale, and the
divide step that follows every linear layer brings values back to 16 bits.
Divides round toward minus infinity (floor); pooling averages round half
away from zero.

Average pooling is split in two: the divide step before the pool picks up
the window size d as an extra divisor (rounding half away from zero, per
element), and the pooling step itself only sums each window. Summing d
values that were each rounded separately is what the strict semantics
(round the window average once) would not do, so the two differ by at most
floor(d/2) per output, with equality reachable. The plaintext engine runs
either semantics: "merged" reproduces the shared-tensor engine exactly,
"strict" is the reference for that error bound.

The architecture (layer kinds and shapes) is public; only weight values
are sensitive. Containers therefore separate the two: the model file holds
both, a share file holds the architecture plus one party's shares.
"""

from dataclasses import dataclass
import hashlib
import json

import numpy as np

from . import wire
from .field import PrimeField
from .sss import ShareTensor, SssScheme

ACTIVATION_BITS = 16
WEIGHT_BITS = 16
BIAS_BITS = 32
ACCUMULATOR_BUDGET_BITS = 43
FAN_IN_LIMIT = 1 << 13

MODEL_MAGIC = b"SSNM"
SHARE_MAGIC = b"SSNS"


def round_half_away(v, d: int):
    """Divide by d rounding halves away from zero, elementwise."""
    v = np.asarray(v)
    neg = v < 0
    a = np.where(neg, -v, v)
    q = (2 * a + d) // (2 * d)
    return np.where(neg, -q, q)


def quantize(arr, scale_bits: int, bits: int = 16):
    """Float to fixed point: round(x * 2**scale_bits), saturating."""
    limit = (1 << (bits - 1)) - 1
    scaled = np.floor(np.asarray(arr, dtype=np.float64) * (1 << scale_bits) + 0.5)
    return np.clip(scaled, -limit, limit).astype(np.int64)


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray
    scale_bits: int
    bits: int = 16

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.int64)
        limit = 1 << (self.bits - 1)
        if vals.size and (vals.max() >= limit or vals.min() < -limit):
            raise ValueError(f"values exceed {self.bits}-bit range")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class Conv2D:
    name: str
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 0

    kind = "conv"

    def out_shape(self, in_shape):
        c, h, w = in_shape
        kh, kw = self.kernel
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"{self.name}: kernel larger than input")
        return (self.out_channels, oh, ow)

    def fan_in(self, in_shape):
        return in_shape[0] * self.kernel[0] * self.kernel[1] + 1


@dataclass(frozen=True)
class Dense:
    name: str
    out_features: int

    kind = "dense"

    def out_shape(self, in_shape):
        return (self.out_features,)

    def fan_in(self, in_shape):
        count = 1
        for d in in_shape:
            count *= d
        return count + 1


@dataclass(frozen=True)
class Truncation:
    shift_bits: int

    kind = "truncation"

    @property
    def r(self):
        return 1 << self.shift_bits

    def out_shape(self, in_shape):
        return tuple(in_shape)


@dataclass(frozen=True)
class NonLinear:
    relu: bool = True
    pool: str = None      # None, "max" or "avg"
    pool_kh: int = 2
    pool_kw: int = 2

    kind = "nonlinear"

    def out_shape(self, in_shape):
        if self.pool is None:
            return tuple(in_shape)
        if len(in_shape) != 3:
            raise ValueError("pooling needs a (channels, h, w) input")
        c, h, w = in_shape
        if h % self.pool_kh or w % self.pool_kw:
            raise ValueError(f"pool {self.pool_kh}x{self.pool_kw} does not tile {in_shape}")
        return (c, h // self.pool_kh, w // self.pool_kw)


_LAYER_KINDS = {"conv": Conv2D, "dense": Dense,
                "truncation": Truncation, "nonlinear": NonLinear}


class ModelGraph:
    """An ordered list of layers plus the quantized weights they name."""

    def __init__(self, name, input_shape, layers, weights,
                 input_scale_bits=7):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.layers = tuple(layers)
        # weights=None builds an architecture-only graph: enough to plan a
        # run over shares, but digest() and the forward passes need values
        self.weights = None if weights is None else dict(weights)
        self.input_scale_bits = input_scale_bits
        self.validate()

    # -- structure --

    def shapes(self):
        """Per-layer output shapes, starting from the input shape."""
        chain = [self.input_shape]
        for layer in self.layers:
            chain.append(layer.out_shape(chain[-1]))
        return chain

    def pending_divisors(self):
        """Extra divisor each truncation applies for the average pooling
        that follows it. Aligned with self.layers; 1 everywhere else."""
        out = [1] * len(self.layers)
        for i, layer in enumerate(self.layers):
            if layer.kind != "truncation":
                continue
            d = 1
            for nxt in self.layers[i + 1:]:
                if nxt.kind in ("conv", "dense", "truncation"):
                    break
                if nxt.kind == "nonlinear" and nxt.pool == "avg":
                    d *= nxt.pool_kh * nxt.pool_kw
            out[i] = d
        covered = False
        for layer in self.layers:
            if layer.kind == "truncation":
                covered = True
            elif layer.kind in ("conv", "dense"):
                covered = False
            elif layer.kind == "nonlinear" and layer.pool == "avg" and not covered:
                raise ValueError("average pooling needs a divide step before it")
        return out

    def validate(self):
        chain = self.shapes()
        self.pending_divisors()  # rejects an uncovered average pool
        for i, layer in enumerate(self.layers):
            in_shape = chain[i]
            if layer.kind in ("conv", "dense"):
                nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                if nxt is None or nxt.kind != "truncation":
                    raise ValueError(
                        f"layer {i}: accumulators must flow into a divide step")
                if layer.fan_in(in_shape) > FAN_IN_LIMIT:
                    raise ValueError(
                        f"layer {i}: fan-in {layer.fan_in(in_shape)} "
                        f"exceeds {FAN_IN_LIMIT}")
                self._check_weights(layer, in_shape)
            elif layer.kind == "truncation":
                if layer.shift_bits < 1:
                    raise ValueError("divide step needs a positive shift")

    def _check_weights(self, layer, in_shape):
        if self.weights is None:
            return
        w = self.weights.get(layer.name + ".w")
        b = self.weights.get(layer.name + ".b")
        if w is None or b is None:
            raise ValueError(f"{layer.name}: missing weights")
        if w.bits != WEIGHT_BITS or b.bits != BIAS_BITS:
            raise ValueError(f"{layer.name}: weight/bias width mismatch")
        if layer.kind == "conv":
            want = (layer.out_channels, in_shape[0]) + tuple(layer.kernel)
        else:
            count = 1
            for d in in_shape:
                count *= d
            want = (layer.out_features, count)
        if w.values.shape != want:
            raise ValueError(f"{layer.name}: weight shape {w.values.shape}, want {want}")
        if b.values.shape != (want[0],):
            raise ValueError(f"{layer.name}: bias shape {b.values.shape}")

    def accumulator_bound(self, layer_index):
        """Worst-case magnitude entering the divide step after the linear
        layer at layer_index (coarse but safe; the +8 covers the slight
        excess a summed average pool can carry over the 16-bit limit)."""
        chain = self.shapes()
        layer = self.layers[layer_index]
        x_max = (1 << (ACTIVATION_BITS - 1)) + 8
        w_max = (1 << (WEIGHT_BITS - 1)) - 1
        b_max = (1 << (BIAS_BITS - 1)) - 1
        fan = layer.fan_in(chain[layer_index]) - 1
        bound = fan * x_max * w_max + b_max
        if bound >= (1 << ACCUMULATOR_BUDGET_BITS):
            raise ValueError(
                f"layer {layer_index}: accumulator bound 2**{bound.bit_length()} too wide")
        return bound

    # -- serialization --

    def _layer_meta(self):
        out = []
        for layer in self.layers:
            if layer.kind == "conv":
                out.append({"kind": "conv", "name": layer.name,
                            "out_channels": layer.out_channels,
                            "kernel": list(layer.kernel),
                            "stride": layer.stride, "padding": layer.padding})
            elif layer.kind == "dense":
                out.append({"kind": "dense", "name": layer.name,
                            "out_features": layer.out_features})
            elif layer.kind == "truncation":
                out.append({"kind": "truncation", "shift_bits": layer.shift_bits})
            else:
                out.append({"kind": "nonlinear", "relu": layer.relu,
                            "pool": layer.pool,
                            "pool_kh": layer.pool_kh, "pool_kw": layer.pool_kw})
        return out

    def arch_meta(self):
        return {"name": self.name, "input_shape": list(self.input_shape),
                "input_scale_bits": self.input_scale_bits,
                "layers": self._layer_meta()}

    def _payload(self):
        header = self.arch_meta()
        header["tensors"] = []
        blob = b""
        for name in sorted(self.weights):
            qt = self.weights[name]
            header["tensors"].append(
                {"name": name, "scale_bits": qt.scale_bits, "bits": qt.bits,
                 "shape": list(qt.values.shape)})
            blob += qt.values.astype("<i8").tobytes()
        return header, blob

    def digest(self) -> str:
        if self.weights is None:
            raise ValueError("architecture-only graph has no weight digest")
        header, blob = self._payload()
        head = json.dumps(header, sort_keys=True).encode()
        return hashlib.sha256(head + blob).hexdigest()

    @classmethod
    def from_arch(cls, meta):
        return cls(meta["name"], meta["input_shape"],
                   layers_from_meta(meta["layers"]), None,
                   meta["input_scale_bits"])


def layers_from_meta(meta):
    out = []
    for item in meta:
        kind = item["kind"]
        if kind == "conv":
            out.append(Conv2D(item["name"], item["out_channels"],
                              tuple(item["kernel"]), item["stride"],
                              item["padding"]))
        elif kind == "dense":
            out.append(Dense(item["name"], item["out_features"]))
        elif kind == "truncation":
            out.append(Truncation(item["shift_bits"]))
        elif kind == "nonlinear":
            out.append(NonLinear(item["relu"], item["pool"],
                                 item["pool_kh"], item["pool_kw"]))
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return out


def save_model(path, model: ModelGraph) -> str:
    header, blob = model._payload()
    wire.write_container(path, MODEL_MAGIC, header, blob)
    return model.digest()


def load_model(path) -> ModelGraph:
    header, blob, _ = wire.read_container(path, MODEL_MAGIC)
    layers = layers_from_meta(header["layers"])
    weights = {}
    off = 0
    for item in header["tensors"]:
        shape = tuple(item["shape"])
        count = 1
        for d in shape:
            count *= d
        vals = np.frombuffer(blob, dtype="<i8", count=count, offset=off)
        off += 8 * count
        weights[item["name"]] = QuantizedTensor(
            vals.reshape(shape).astype(np.int64), item["scale_bits"], item["bits"])
    return ModelGraph(header["name"], header["input_shape"], layers, weights,
                      header["input_scale_bits"])


# -- plaintext engines --


def im2col(x, kh, kw, stride=1, padding=0):
    """Unfold (c, h, w) into (c*kh*kw, oh*ow) patch columns. Works for any
    dtype, including object arrays of field elements."""
    if padding:
        # np.pad would insert int64 zeros into object arrays; allocate instead
        c, h, w = x.shape
        xp = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x
        x = xp
    c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    cols = np.empty((c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i:i + stride * oh:stride,
                              j:j + stride * ow:stride]
    return cols.reshape(c * kh * kw, oh * ow)


def pool_blocks(x, kh, kw):
    """Reshape (c, h, w) so each pooling window is its own pair of axes."""
    c, h, w = x.shape
    return x.reshape(c, h // kh, kh, w // kw, kw)


def plaintext_infer(model: ModelGraph, x, mode="merged"):
    """Reference forward pass on int64 tensors.

    mode="merged" defers average-pool division into the next divide step
    (what the shared-tensor engine computes); mode="strict" rounds each
    window average on the spot.
    """
    if mode not in ("merged", "strict"):
        raise ValueError(f"unknown mode {mode!r}")
    x = np.asarray(x, dtype=np.int64).reshape(model.input_shape)
    limit = (1 << (ACTIVATION_BITS - 1)) - 1
    divisors = model.pending_divisors()
    for i, layer in enumerate(model.layers):
        if layer.kind == "conv":
            w = model.weights[layer.name + ".w"].values
            b = model.weights[layer.name + ".b"].values
            cols = im2col(x, *layer.kernel, layer.stride, layer.padding)
            f = w.shape[0]
            acc = w.reshape(f, -1) @ cols + b[:, None]
            x = acc.reshape(layer.out_shape(x.shape))
        elif layer.kind == "dense":
            w = model.weights[layer.name + ".w"].values
            b = model.weights[layer.name + ".b"].values
            x = w @ x.ravel() + b
        elif layer.kind == "truncation":
            x = np.floor_divide(x, layer.r)
            d = divisors[i] if mode == "merged" else 1
            if d > 1:
                x = round_half_away(x, d)
            if np.abs(x).max() > limit:
                raise ValueError(f"activation overflow after layer {i}")
        else:
            if layer.relu:
                x = np.maximum(x, 0)
            if layer.pool == "max":
                x = pool_blocks(x, layer.pool_kh, layer.pool_kw).max(axis=(2, 4))
            elif layer.pool == "avg":
                s = pool_blocks(x, layer.pool_kh, layer.pool_kw).sum(axis=(2, 4))
                if mode == "strict":
                    s = round_half_away(s, layer.pool_kh * layer.pool_kw)
                x = s
    return x


def float_infer(model: ModelGraph, float_weights, x):
    """Float forward pass with the same structure (divide steps are
    implicit in the scales). Used to judge quantization fidelity."""
    x = np.asarray(x, dtype=np.float64).reshape(model.input_shape)
    for layer in model.layers:
        if layer.kind == "conv":
            w = float_weights[layer.name + ".w"]
            b = float_weights[layer.name + ".b"]
            cols = im2col(x, *layer.kernel, layer.stride, layer.padding)
            x = (w.reshape(w.shape[0], -1) @ cols + b[:, None]).reshape(
                layer.out_shape(x.shape))
        elif layer.kind == "dense":
            w = float_weights[layer.name + ".w"]
            b = float_weights[layer.name + ".b"]
            x = w @ x.ravel() + b
        elif layer.kind == "nonlinear":
            if layer.relu:
                x = np.maximum(x, 0.0)
            if layer.pool == "max":
                x = pool_blocks(x, layer.pool_kh, layer.pool_kw).max(axis=(2, 4))
            elif layer.pool == "avg":
                x = pool_blocks(x, layer.pool_kh, layer.pool_kw).mean(axis=(2, 4))
    return x


# -- reference model --


def build_reference_model(seed=7, pool="max"):
    """Small deterministic two-conv two-dense network on 12x12 inputs.

    Returns (model, float_weights). Weights are uniform in a fan-scaled
    range and quantized at 2**12; biases live at the accumulator scale.
    """
    rng = np.random.default_rng([int(seed), 1])
    w_scale = 12
    b_scale = w_scale + 7

    def draw(shape, fan_in, fan_out, gain):
        # gain keeps activations well inside 16 bits but large enough that
        # quantization noise rarely flips the top logit
        limit = np.sqrt(6.0 / (fan_in + fan_out)) * gain
        return rng.uniform(-limit, limit, size=shape)

    fw = {
        "conv1.w": draw((4, 1, 3, 3), 9, 36, 4.0), "conv1.b": draw((4,), 9, 36, 4.0) * 0.1,
        "conv2.w": draw((8, 4, 3, 3), 36, 72, 4.0), "conv2.b": draw((8,), 36, 72, 4.0) * 0.1,
        "fc1.w": draw((32, 72), 72, 32, 3.0), "fc1.b": draw((32,), 72, 32, 3.0) * 0.1,
        "fc2.w": draw((10, 32), 32, 10, 3.0), "fc2.b": draw((10,), 32, 10, 3.0) * 0.1,
    }
    weights = {}
    for name, vals in fw.items():
        scale = b_scale if name.endswith(".b") else w_scale
        bits = BIAS_BITS if name.endswith(".b") else WEIGHT_BITS
        weights[name] = QuantizedTensor(quantize(vals, scale, bits=bits), scale, bits)

    layers = [
        Conv2D("conv1", 4), Truncation(w_scale),
        NonLinear(relu=True, pool=pool, pool_kh=2, pool_kw=2),
        Conv2D("conv2", 8), Truncation(w_scale),
        NonLinear(relu=True),
        Dense("fc1", 32), Truncation(w_scale),
        NonLinear(relu=True),
        Dense("fc2", 10), Truncation(w_scale),
    ]
    model = ModelGraph(f"reference-{pool}", (1, 12, 12), layers, weights)
    return model, fw


def random_input(seed, model: ModelGraph, index=0):
    """Deterministic quantized input drawn uniform in (-1, 1)."""
    rng = np.random.default_rng([int(seed), 2, int(index)])
    x = rng.uniform(-1.0, 1.0, size=model.input_shape)
    return quantize(x, model.input_scale_bits), x


# -- sharing weights and inputs --


def share_tensor_signed(values, scheme: SssScheme, rng):
    """Encode a signed int tensor into the field and deal shares."""
    enc = scheme.field.encode_signed(np.asarray(values, dtype=object))
    return scheme.gen(enc, rng)


def share_model(model: ModelGraph, scheme: SssScheme, rng):
    """Deal every weight tensor; returns {rank: {name: ShareTensor}}."""
    per_rank = {rank: {} for rank in range(1, scheme.n + 1)}
    for name in sorted(model.weights):
        shares = share_tensor_signed(model.weights[name].values, scheme, rng)
        for rank, st in enumerate(shares, start=1):
            per_rank[rank][name] = st
    return per_rank


def save_shares(path, scheme: SssScheme, rank, model_digest, entries,
                extra=None):
    """Write one party's share file: scheme, rank, binding digest, tensors."""
    header = {"k": scheme.k, "n": scheme.n, "p": scheme.field.p,
              "party_ids": list(scheme.party_ids), "rank": rank,
              "model_digest": model_digest, "tensors": []}
    if extra:
        header.update(extra)
    blob = b""
    for name in sorted(entries):
        st = entries[name]
        header["tensors"].append(
            {"name": name, "party_id": st.party_id, "degree": st.degree,
             "shape": list(st.shape)})
        blob += wire.encode_elements(st.values)
    wire.write_container(path, SHARE_MAGIC, header, blob)


def load_shares(path, scheme: SssScheme = None):
    """Read a share file; builds the scheme from the header when not given.
    Returns (header, scheme, {name: ShareTensor})."""
    header, blob, _ = wire.read_container(path, SHARE_MAGIC)
    if scheme is None:
        field = PrimeField(header["p"])
        scheme = SssScheme(field, header["k"], header["n"],
                           party_ids=tuple(header["party_ids"]))
    entries = {}
    off = 0
    for item in header["tensors"]:
        shape = tuple(item["shape"])
        count = 1
        for d in shape:
            count *= d
        vals = wire.decode_elements(blob, count, offset=off)
        off += 8 * count
        arr = np.array(vals, dtype=object).reshape(shape)
        entries[item["name"]] = ShareTensor(item["party_id"], item["degree"],
                                            arr, scheme)
    return header, scheme, entries
