#!/usr/bin/env python3
"""Independent numpy reference forward pass for actpaint bundles.

Writes `conformance.json` into each bundle directory: for a few fixed seeds,
the output shape, sum, absolute sum and 16 probe values of the forward pass.
The Rust engine must reproduce the probes within the recorded tolerance.

Usage: python3 tools/conformance.py BUNDLE_DIR [BUNDLE_DIR ...]
"""

import json
import math
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
SEEDS = [0, 1, 42]
PROBES = 16
TOLERANCE = 1e-5


def mix(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed, stream):
    return mix(seed ^ mix(((stream + 1) * GOLDEN) & MASK64))


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK64

    def next_u64(self):
        self.state = (self.state + GOLDEN) & MASK64
        return mix(self.state)

    def below(self, bound):
        return (self.next_u64() * bound) >> 64

    def gaussian(self, count):
        out = []
        scale = 1.0 / float(1 << 53)
        while len(out) < count:
            u1 = ((self.next_u64() >> 11) + 1) * scale
            u2 = (self.next_u64() >> 11) * scale
            r = math.sqrt(-2.0 * math.log(u1))
            theta = 2.0 * math.pi * u2
            out.append(r * math.cos(theta))
            if len(out) < count:
                out.append(r * math.sin(theta))
        return out


def sample_noise(seed, shape):
    n = int(np.prod(shape))
    vals = np.array(SplitMix64(seed).gaussian(n), dtype=np.float64)
    return vals.astype(np.float32).astype(np.float64).reshape(shape)


def load_bundle(path):
    graph = json.loads((path / "graph.json").read_text())
    blob = (path / "weights.bin").read_bytes()
    payload, trailer = blob[:-4], blob[-4:]
    crc = zlib.crc32(payload)
    if struct.unpack("<I", trailer)[0] != crc or graph["weights_crc32"] != crc:
        raise SystemExit(f"{path}: weights checksum mismatch")
    weights = {}
    for w in graph["weights"]:
        raw = payload[w["offset"] : w["offset"] + w["length"]]
        weights[w["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(w["shape"])
    conditions = None
    if graph.get("conditions"):
        c = graph["conditions"]
        raw = (path / "conditions.bin").read_bytes()
        conditions = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(c["count"], c["dim"])
    return graph, weights, conditions


def pad(x, width, mode):
    if width == 0:
        return x
    spec = ((0, 0), (0, 0), (width, width), (width, width))
    return np.pad(x, spec, mode="wrap" if mode == "circular" else "constant")


def conv2d(x, w, b, stride, padding):
    xp = pad(x, padding["width"], padding["mode"])
    n, _, hp, wp = xp.shape
    cout, _, kh, kw = w.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride]
            out += np.einsum("oi,nihw->nohw", w[:, :, ky, kx], patch)
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv_transpose2d(x, w, b, stride, padding):
    n, _, h, wd = x.shape
    _, cout, kh, kw = w.shape
    hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
    full = np.zeros((n, cout, hf, wf))
    for ky in range(kh):
        for kx in range(kw):
            full[:, :, ky : ky + stride * h : stride, kx : kx + stride * wd : stride] += np.einsum(
                "io,nihw->nohw", w[:, :, ky, kx], x
            )
    p = padding["width"]
    ho, wo = hf - 2 * p, wf - 2 * p
    if padding["mode"] == "circular":
        rows = np.zeros((n, cout, ho, wf))
        for f in range(hf):
            rows[:, :, (f - p) % ho, :] += full[:, :, f, :]
        out = np.zeros((n, cout, ho, wo))
        for f in range(wf):
            out[:, :, :, (f - p) % wo] += rows[:, :, :, f]
    else:
        out = full[:, :, p : p + ho, p : p + wo]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def activation(x, spec):
    kind = spec["kind"]
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, x * spec["alpha"])
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return 1.0 / (1.0 + np.exp(-x))
    raise SystemExit(f"unknown activation {kind}")


def replicate(x, h, w):
    c = x.reshape(x.shape[0], -1) if x.ndim != 1 else x.reshape(1, -1)
    return np.broadcast_to(c[:, :, None, None], (c.shape[0], c.shape[1], h, w)).copy()


def seeded_inputs(graph, conditions, seed):
    inputs = {}
    first_noise = True
    for k, spec in enumerate(graph["inputs"]):
        if spec["kind"] == "noise":
            s = seed if first_noise else derive_seed(seed, k)
            first_noise = False
            inputs[spec["name"]] = sample_noise(s, spec["shape"])
        elif spec["kind"] == "condition":
            row = SplitMix64(derive_seed(seed, 1000 + k)).below(conditions.shape[0])
            inputs[spec["name"]] = conditions[row].reshape(spec["shape"])
        else:
            # Feature extractors are probed on standard-normal images.
            inputs[spec["name"]] = sample_noise(seed, spec["shape"])
    return inputs


def forward(graph, weights, inputs):
    values = []
    for node in graph["nodes"]:
        args = [values[i] for i in node.get("inputs", [])]
        op = node["op"]
        if op == "input":
            v = inputs[node["input"]]
        elif op == "conv2d":
            b = weights[node["bias"]] if node.get("bias") else None
            v = conv2d(args[0], weights[node["weight"]], b, node["stride"], node["padding"])
        elif op == "conv_transpose2d":
            b = weights[node["bias"]] if node.get("bias") else None
            v = conv_transpose2d(args[0], weights[node["weight"]], b, node["stride"], node["padding"])
        elif op == "upsample_nearest":
            f = node["factor"]
            v = args[0].repeat(f, axis=2).repeat(f, axis=3)
        elif op == "activation":
            v = activation(args[0], node["activation"])
        elif op == "affine_channel":
            v = args[0] * weights[node["scale"]][None, :, None, None] + weights[node["shift"]][None, :, None, None]
        elif op == "concat_channels":
            v = np.concatenate(args, axis=1)
        elif op == "replicate_spatial":
            v = replicate(args[0], node["height"], node["width"])
        else:
            raise SystemExit(f"unsupported op {op}")
        values.append(v)
    out = values[graph["output"]["node"]]
    if graph["role"] == "generator":
        out = np.clip(out, -1.0, 1.0)
    return out


def conformance(path):
    graph, weights, conditions = load_bundle(path)
    cases = []
    for seed in SEEDS:
        out = forward(graph, weights, seeded_inputs(graph, conditions, seed))
        flat = out.reshape(-1)
        idx = [((2 * k + 1) * flat.size) // (2 * PROBES) for k in range(PROBES)]
        cases.append(
            {
                "seed": seed,
                "output_shape": list(out.shape),
                "output_sum": float(flat.sum()),
                "output_abs_sum": float(np.abs(flat).sum()),
                "probes": [{"index": i, "value": float(flat[i])} for i in idx],
            }
        )
    doc = {
        "format": "actpaint-conformance/1",
        "bundle": graph["name"],
        "weights_crc32": graph["weights_crc32"],
        "tolerance": TOLERANCE,
        "cases": cases,
    }
    (path / "conformance.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"wrote {path / 'conformance.json'}", file=sys.stderr)


def main(argv):
    if not argv:
        print(__doc__.strip(), file=sys.stderr)
        return 1
    for arg in argv:
        conformance(Path(arg))
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
