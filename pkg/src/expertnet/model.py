"""Network assembly: declarative layer configs, parameter init, whole-graph
forward/backward, parameter audit, serialization and feature-map dumps.

Config grammar (UTF-8 text, one directive per line, '#' comments):

    input c=3 h=128 w=128
    conv name=Conv1 k=5 out=32 stride=1 act=relu
    exfeat name=ExFeat1
    add name=Add1 skip=Conv2
    fc name=FC1 out=512 act=relu
    classifier classes=7
    elective mode=literal        # optional, default literal

Line order defines the wiring: each layer consumes the previous layer's
output; an add layer also consumes the named skip source.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, FormatError, ShapeError
from .tensor import (DEFAULT_DTYPE, SeededRng, dump_tensor, load_tensor,
                     tensor_new, tensor_rand)

MODEL_MAGIC = b"XPNM0001"
MODEL_VERSION = 1

LAYER_KINDS = ("conv", "exfeat", "add", "fc", "classifier")

# Printed parameter counts of the reference 128x128 configuration, in
# thousands.  The audit flags layers whose exact count rounds elsewhere.
REFERENCE_PARAM_K = {
    "Conv1": 2, "Conv2": 9, "ExFeat1": 86, "Conv4": 18, "ExFeat2": 342,
    "Conv5": 55, "ExFeat3": 773, "Conv7": 111, "ExFeat4": 1000,
    "Conv9": 212, "Conv10": 424, "FC1": 525, "FC2": 525,
}


@dataclass
class LayerSpec:
    kind: str
    name: str
    k: int = 0            # conv kernel size
    out: int = 0          # conv out channels / fc units / classifier classes
    stride: int = 1
    act: str = "identity"
    skip: str = ""        # add: name of the second source layer


@dataclass
class ModelConfig:
    in_c: int
    in_h: int
    in_w: int
    layers: list
    num_classes: int
    elective_mode: str = "literal"
    seed: int = 0

    def to_text(self):
        """Canonical config text; parse(to_text()) round-trips exactly."""
        lines = [f"input c={self.in_c} h={self.in_h} w={self.in_w}"]
        if self.elective_mode != "literal":
            lines.append(f"elective mode={self.elective_mode}")
        for spec in self.layers:
            if spec.kind == "conv":
                lines.append(f"conv name={spec.name} k={spec.k} out={spec.out} "
                             f"stride={spec.stride} act={spec.act}")
            elif spec.kind == "exfeat":
                lines.append(f"exfeat name={spec.name}")
            elif spec.kind == "add":
                lines.append(f"add name={spec.name} skip={spec.skip}")
            elif spec.kind == "fc":
                lines.append(f"fc name={spec.name} out={spec.out} act={spec.act}")
            else:
                lines.append(f"classifier name={spec.name} classes={spec.out}")
        return "\n".join(lines) + "\n"


def _parse_fields(tokens, line_no):
    fields = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"line {line_no}: expected key=value, got {tok!r}")
        key, value = tok.split("=", 1)
        if key in fields:
            raise ConfigError(f"line {line_no}: duplicate field {key!r}")
        fields[key] = value
    return fields


def _int_field(fields, key, line_no, minimum=1):
    if key not in fields:
        raise ConfigError(f"line {line_no}: missing field {key!r}")
    try:
        value = int(fields.pop(key))
    except ValueError:
        raise ConfigError(f"line {line_no}: field {key!r} is not an integer")
    if value < minimum:
        raise ConfigError(f"line {line_no}: {key}={value} below minimum {minimum}")
    return value


def parse_config(text):
    """Parse config text into a validated ModelConfig."""
    input_shape = None
    elective_mode = "literal"
    layers = []
    names = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind, rest = tokens[0], tokens[1:]
        if kind == "input":
            if input_shape is not None:
                raise ConfigError(f"line {line_no}: duplicate input directive")
            fields = _parse_fields(rest, line_no)
            input_shape = (_int_field(fields, "c", line_no),
                           _int_field(fields, "h", line_no),
                           _int_field(fields, "w", line_no))
        elif kind == "elective":
            fields = _parse_fields(rest, line_no)
            mode = fields.pop("mode", "")
            if mode not in ops.ELECTIVE_MODES:
                raise ConfigError(f"line {line_no}: elective mode must be one of "
                                  f"{ops.ELECTIVE_MODES}")
            elective_mode = mode
        elif kind in LAYER_KINDS:
            fields = _parse_fields(rest, line_no)
            name = fields.pop("name", "")
            if kind == "conv":
                k = _int_field(fields, "k", line_no)
                if k % 2 == 0:
                    raise ConfigError(f"line {line_no}: kernel size must be odd")
                out = _int_field(fields, "out", line_no)
                stride = _int_field(fields, "stride", line_no) if "stride" in fields else 1
                if stride not in (1, 2):
                    raise ConfigError(f"line {line_no}: stride must be 1 or 2")
                act = fields.pop("act", "identity")
                spec = LayerSpec("conv", name, k=k, out=out, stride=stride, act=act)
            elif kind == "exfeat":
                spec = LayerSpec("exfeat", name)
            elif kind == "add":
                skip = fields.pop("skip", "")
                if not skip:
                    raise ConfigError(f"line {line_no}: add layer needs skip=<layer>")
                spec = LayerSpec("add", name, skip=skip)
            elif kind == "fc":
                out = _int_field(fields, "out", line_no)
                act = fields.pop("act", "identity")
                spec = LayerSpec("fc", name, out=out, act=act)
            else:
                classes = _int_field(fields, "classes", line_no)
                spec = LayerSpec("classifier", name or "Classifier",
                                 out=classes, act="identity")
            if spec.act not in ("identity", "relu"):
                raise ConfigError(f"line {line_no}: act must be identity or relu")
            if not spec.name:
                spec.name = f"{kind}{len(layers) + 1}"
            if spec.name in names:
                raise ConfigError(f"line {line_no}: duplicate layer name {spec.name!r}")
            names.add(spec.name)
            if fields:
                raise ConfigError(f"line {line_no}: unknown fields {sorted(fields)}")
            layers.append(spec)
        else:
            raise ConfigError(f"line {line_no}: unknown directive {kind!r}")

    if input_shape is None:
        raise ConfigError("config has no input directive")
    if not layers or layers[-1].kind != "classifier":
        raise ConfigError("config must end with a classifier layer")
    if sum(1 for s in layers if s.kind == "classifier") != 1:
        raise ConfigError("config must contain exactly one classifier layer")
    config = ModelConfig(*input_shape, layers=layers,
                         num_classes=layers[-1].out, elective_mode=elective_mode)
    compute_shape_table(config)  # surfaces propagation errors early
    return config


def load_config(path):
    with open(path, "r", encoding="utf-8") as handle:
        return parse_config(handle.read())


def _conv_out_hw(h, w, k, stride):
    pad = k // 2
    return (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1


def compute_shape_table(config):
    """Propagate the input shape through the layer list.

    Returns an ordered dict: layer name -> output shape, (c, h, w) for
    spatial layers and (units, 1, 1) once the net has flattened.
    """
    shape = (config.in_c, config.in_h, config.in_w)
    flat = False
    table = {}
    for spec in config.layers:
        if spec.kind == "conv":
            if flat:
                raise ConfigError(f"conv {spec.name!r} after a fully connected layer")
            c, h, w = shape
            h2, w2 = _conv_out_hw(h, w, spec.k, spec.stride)
            if h2 < 1 or w2 < 1:
                raise ConfigError(f"layer {spec.name!r} output collapses to {h2}x{w2}")
            shape = (spec.out, h2, w2)
        elif spec.kind == "exfeat":
            if flat:
                raise ConfigError(f"exfeat {spec.name!r} after a fully connected layer")
        elif spec.kind == "add":
            if spec.skip not in table:
                raise ConfigError(f"add {spec.name!r} skips to unknown layer {spec.skip!r}")
            if table[spec.skip] != shape:
                raise ConfigError(f"add {spec.name!r}: source shapes differ, "
                                  f"{table[spec.skip]} vs {shape}")
        else:  # fc or classifier
            shape = (spec.out, 1, 1)
            flat = True
        table[spec.name] = shape
    return table


def format_shape(shape):
    """Render (c, h, w) as the conventional 'H x W x C' string."""
    c, h, w = shape
    if h == 1 and w == 1:
        return str(c)
    return f"{h} x {w} x {c}"


def layer_param_count(spec, in_ch_or_len):
    """Closed-form learnable-parameter count of one layer."""
    if spec.kind == "conv":
        return spec.k * spec.k * in_ch_or_len * spec.out + spec.out
    if spec.kind == "exfeat":
        c = in_ch_or_len
        return sum(k * k * c * c + c for k in ops.EXFEAT_KERNELS)
    if spec.kind in ("fc", "classifier"):
        return in_ch_or_len * spec.out + spec.out
    return 0


def audit_params(config):
    """Per-layer audit rows: (name, filter desc, output shape, exact count).

    Returns (rows, total).  Counts come from the closed form, no weight
    allocation happens.
    """
    table = compute_shape_table(config)
    shape = (config.in_c, config.in_h, config.in_w)
    rows = []
    total = 0
    for spec in config.layers:
        if spec.kind == "conv":
            desc = f"{spec.k}x{spec.k}/{spec.stride}"
            count = layer_param_count(spec, shape[0])
        elif spec.kind == "exfeat":
            desc = "1,3,5,7"
            count = layer_param_count(spec, shape[0])
        elif spec.kind == "add":
            desc = f"+{spec.skip}"
            count = 0
        else:
            desc = "dense"
            count = layer_param_count(spec, shape[0] * shape[1] * shape[2])
        shape = table[spec.name]
        rows.append((spec.name, desc, format_shape(shape), count))
        total += count
    return rows, total


def _init_conv(out_ch, in_ch, k, rng, dtype):
    std = float(np.sqrt(2.0 / (in_ch * k * k)))
    weights = tensor_rand((out_ch, in_ch, k, k), std, rng, dtype)
    bias = tensor_new((out_ch,), 0.0, dtype)
    return ops.ConvParams(weights, bias, stride=1)


def _elective_margin(branches):
    """Distance of the nearest elective tie: smallest gap between sorted
    branch values, between the two smallest midrange distances, and of the
    smallest distance from 0, over all positions."""
    flat = np.stack(branches).reshape(4, -1)
    ordered = np.sort(flat, axis=0)
    gap = float(np.diff(ordered, axis=0).min())
    mid = 0.5 * (ordered[-1] + ordered[0])
    dist = np.sort(np.abs(mid[None] - flat), axis=0)
    return min(gap, float(dist[0].min()), float((dist[1] - dist[0]).min()))


class Network:
    """An instantiated network: config plus one parameter set per layer.

    Parameters are read-only during forward/backward; only the optimizer
    mutates them (in place, under exclusive access).
    """

    def __init__(self, config, dtype=DEFAULT_DTYPE):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.shape_table = compute_shape_table(config)
        self.params = {}

    def initialize(self, rng):
        shape = (self.config.in_c, self.config.in_h, self.config.in_w)
        for spec in self.config.layers:
            if spec.kind == "conv":
                conv = _init_conv(spec.out, shape[0], spec.k, rng, self.dtype)
                conv.stride = spec.stride
                self.params[spec.name] = conv
            elif spec.kind == "exfeat":
                self.params[spec.name] = [
                    _init_conv(shape[0], shape[0], k, rng, self.dtype)
                    for k in ops.EXFEAT_KERNELS]
            elif spec.kind in ("fc", "classifier"):
                length = shape[0] * shape[1] * shape[2]
                std = float(np.sqrt(2.0 / length))
                self.params[spec.name] = ops.FcParams(
                    tensor_rand((spec.out, length), std, rng, self.dtype),
                    tensor_new((spec.out,), 0.0, self.dtype))
            shape = self.shape_table[spec.name]
        return self

    def parameters(self):
        """Flat list of parameter arrays in declaration order."""
        out = []
        for spec in self.config.layers:
            p = self.params.get(spec.name)
            if isinstance(p, ops.ConvParams) or isinstance(p, ops.FcParams):
                out.extend([p.weights, p.bias])
            elif isinstance(p, list):
                for branch in p:
                    out.extend([branch.weights, branch.bias])
        return out

    def param_count(self):
        rows, total = audit_params(self.config)
        return total

    def _check_input(self, batch):
        expect = (self.config.in_c, self.config.in_h, self.config.in_w)
        if batch.ndim != 4 or batch.shape[1:] != expect:
            raise ShapeError(f"input shape {batch.shape} does not match "
                             f"(batch, {expect[0]}, {expect[1]}, {expect[2]})")

    def forward_tape(self, batch, stats=None):
        """Forward pass keeping the per-layer activations needed by backward.

        Returns (logits, tape).  When a stats dict is passed, the smallest
        kink margin seen anywhere is recorded under 'min_kink_margin':
        the distance of relu pre-activations from 0 and of elective branch
        values from their max/min/argmin ties.  The gradient checker
        resamples inputs whose margin is within finite-difference reach.
        """
        self._check_input(batch)
        mode = self.config.elective_mode
        outputs = {"__input__": batch}
        tape = []
        prev = "__input__"
        min_margin = np.inf
        for spec in self.config.layers:
            x = outputs[prev]
            record = {"spec": spec, "source": prev, "x": x}
            if spec.kind == "conv":
                pre = ops.conv2d(x, self.params[spec.name])
                if spec.act == "relu":
                    if stats is not None and pre.size:
                        min_margin = min(min_margin, float(np.abs(pre).min()))
                    out = ops.relu(pre)
                else:
                    out = pre
            elif spec.kind == "exfeat":
                branches = [ops.conv2d(x, p) for p in self.params[spec.name]]
                out = ops.elective_fuse(branches, mode)
                record["branches"] = branches
                if stats is not None:
                    min_margin = min(min_margin, _elective_margin(branches))
            elif spec.kind == "add":
                out = ops.additive(x, outputs[spec.skip])
            else:  # fc / classifier
                z = x.reshape(x.shape[0], -1)
                record["z"] = z
                pre_or_out = ops.fc_forward(z, self.params[spec.name], spec.act)
                if spec.act == "relu" and stats is not None and pre_or_out.size:
                    # fc_forward already clipped; recompute margin from pre.
                    pre = ops.fc_forward(z, self.params[spec.name], "identity")
                    min_margin = min(min_margin, float(np.abs(pre).min()))
                out = pre_or_out
            outputs[spec.name] = out
            record["out"] = out
            tape.append(record)
            prev = spec.name
        if stats is not None:
            stats["min_kink_margin"] = min_margin
        return outputs[prev], tape

    def forward(self, batch, capture=None, stats=None):
        """Forward pass; returns (logits, captured activations).

        capture is an optional set of layer names whose outputs are copied
        into the returned dict.
        """
        capture = set(capture or ())
        unknown = capture - {s.name for s in self.config.layers}
        if unknown:
            raise ValueError(f"unknown capture layers: {sorted(unknown)}; "
                             f"valid: {[s.name for s in self.config.layers]}")
        logits, tape = self.forward_tape(batch, stats=stats)
        captures = {r["spec"].name: r["out"].copy()
                    for r in tape if r["spec"].name in capture}
        return logits, captures

    def backward(self, tape, grad_logits):
        """Reverse-mode sweep over a forward tape.

        Returns parameter gradients as a flat list aligned with
        parameters().  Raises if called without a forward tape.
        """
        if not tape:
            raise ValueError("backward called without a forward tape")
        mode = self.config.elective_mode
        grad_by_name = {tape[-1]["spec"].name: grad_logits}
        param_grads = {}

        def accumulate(name, grad):
            if name in grad_by_name:
                grad_by_name[name] = grad_by_name[name] + grad
            else:
                grad_by_name[name] = grad

        for record in reversed(tape):
            spec = record["spec"]
            source = record["source"]
            grad_out = grad_by_name.pop(spec.name, None)
            if grad_out is None:
                grad_out = np.zeros_like(record["out"])
            if spec.kind == "conv":
                if spec.act == "relu":
                    grad_out = ops.relu_backward(record["out"], grad_out)
                bundle = ops.conv2d_backward(record["x"], self.params[spec.name],
                                             grad_out)
                param_grads[spec.name] = list(bundle.params)
                accumulate(source, bundle.inputs[0])
            elif spec.kind == "exfeat":
                fused = ops.elective_backward(record["branches"], grad_out, mode)
                grads = []
                grad_x = None
                for branch_params, branch_grad in zip(self.params[spec.name],
                                                      fused.inputs):
                    bundle = ops.conv2d_backward(record["x"], branch_params,
                                                 branch_grad)
                    grads.extend(bundle.params)
                    grad_x = bundle.inputs[0] if grad_x is None \
                        else grad_x + bundle.inputs[0]
                param_grads[spec.name] = grads
                accumulate(source, grad_x)
            elif spec.kind == "add":
                bundle = ops.additive_backward(grad_out)
                accumulate(source, bundle.inputs[0])
                accumulate(spec.skip, bundle.inputs[1])
            else:
                bundle = ops.fc_backward(record["z"], self.params[spec.name],
                                         grad_out, spec.act, out=record["out"])
                param_grads[spec.name] = list(bundle.params)
                accumulate(source, bundle.inputs[0].reshape(record["x"].shape))

        flat = []
        for spec in self.config.layers:
            flat.extend(param_grads.get(spec.name, []))
        return flat


def build_network(config, rng=None, dtype=DEFAULT_DTYPE):
    """Instantiate and initialize a network from a config.

    Weights are zero-mean Gaussian with stddev sqrt(2 / fan_in); biases
    start at zero.  The rng defaults to SeededRng(config.seed).
    """
    if rng is None:
        rng = SeededRng(config.seed)
    return Network(config, dtype=dtype).initialize(rng)


def save_model(network):
    """Serialize config text plus every parameter tensor to bytes."""
    text = network.config.to_text().encode("utf-8")
    precision = 64 if network.dtype == np.float64 else 32
    blob = MODEL_MAGIC + struct.pack("<I", MODEL_VERSION)
    blob += struct.pack("<I", len(text)) + text
    blob += struct.pack("<I", precision)
    parts = [blob]
    for arr in network.parameters():
        parts.append(dump_tensor(arr))
    return b"".join(parts)


def load_model(data, dtype=DEFAULT_DTYPE):
    """Rebuild a network from save_model bytes.

    The requested dtype must match the file's precision tag; a 64-bit
    verification dump cannot be loaded as a 32-bit model.
    """
    if data[:8] != MODEL_MAGIC:
        raise FormatError(f"bad model magic {data[:8]!r}")
    pos = 8
    if len(data) < pos + 4:
        raise FormatError("truncated model header")
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    (text_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + text_len + 4:
        raise FormatError("truncated model config block")
    config = parse_config(data[pos:pos + text_len].decode("utf-8"))
    pos += text_len
    (precision,) = struct.unpack_from("<I", data, pos)
    pos += 4
    expected = 64 if np.dtype(dtype) == np.float64 else 32
    if precision != expected:
        raise FormatError(f"precision tag mismatch: file is {precision}-bit, "
                          f"requested {expected}-bit")

    network = Network(config, dtype=dtype)
    shape = (config.in_c, config.in_h, config.in_w)

    def read_params(kernel, out_ch, in_ch):
        nonlocal pos
        weights, pos = load_tensor(data, pos)
        bias, pos = load_tensor(data, pos)
        if weights.dtype != np.dtype(dtype):
            raise FormatError("tensor element width disagrees with precision tag")
        if weights.shape != (out_ch, in_ch, kernel, kernel) or bias.shape != (out_ch,):
            raise FormatError(f"parameter tensor shape mismatch for {kernel}x{kernel}")
        return weights, bias

    for spec in config.layers:
        if spec.kind == "conv":
            weights, bias = read_params(spec.k, spec.out, shape[0])
            network.params[spec.name] = ops.ConvParams(weights, bias, stride=spec.stride)
        elif spec.kind == "exfeat":
            network.params[spec.name] = [
                ops.ConvParams(*read_params(k, shape[0], shape[0]), stride=1)
                for k in ops.EXFEAT_KERNELS]
        elif spec.kind in ("fc", "classifier"):
            length = shape[0] * shape[1] * shape[2]
            weights, pos = load_tensor(data, pos)
            bias, pos = load_tensor(data, pos)
            if weights.shape != (spec.out, length) or bias.shape != (spec.out,):
                raise FormatError(f"fc tensor shape mismatch at {spec.name!r}")
            if weights.dtype != np.dtype(dtype):
                raise FormatError("tensor element width disagrees with precision tag")
            network.params[spec.name] = ops.FcParams(weights, bias)
        shape = network.shape_table[spec.name]
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after model payload")
    return network


def dump_feature_maps(captures, layer):
    """Normalize one captured activation to a list of grayscale images.

    Per channel, values are mapped linearly from [min, max] to [0, 255];
    a constant channel becomes an all-zero image.  The first batch item
    is rendered.
    """
    if layer not in captures:
        raise ValueError(f"layer {layer!r} not captured; have {sorted(captures)}")
    maps = captures[layer]
    if maps.ndim == 2:  # fc output (batch, units): one 1-pixel-high strip
        maps = maps[:, None, None, :]
    channels = maps[0]
    images = []
    for channel in channels:
        lo = float(channel.min())
        hi = float(channel.max())
        if hi > lo:
            scaled = (channel.astype(np.float64) - lo) * (255.0 / (hi - lo))
            images.append(np.floor(scaled + 0.5).astype(np.uint8))
        else:
            images.append(np.zeros(channel.shape, dtype=np.uint8))
    return images
