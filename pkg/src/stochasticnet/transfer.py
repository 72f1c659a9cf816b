"""Checkpoint serialization and convolutional-parameter transfer.

Checkpoint layout (all integers little-endian)::

    b"SNET"  u16 version
    u32 in_channels  u32 input_hw  u32 num_classes  f64 rho  u64 seed  u32 layer_count
    per layer:  u32 record_length, then record bytes
        u8 kind tag, then for conv:  u32 oc, ic, k, stride, padding, f64 rho, u64 mask_seed, u8 frozen
                          for dense: u32 out, in, f64 rho, u64 mask_seed, u8 frozen
    per masked layer, in stack order:
        packed mask bits (little-endian bit order, padded to a byte), f64 weights, f64 biases
    u32 CRC-32 over every byte after the magic
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .connectivity import ConnectivityMask
from .data import Dataset, subsample_stratified
from .network import (
    Flatten,
    MaxPool2,
    Network,
    ReLU,
    SparseConv,
    SparseDense,
    build_paper_architecture,
    layer_digest,
)
from .training import SGDConfig, TrainingLog, train

MAGIC = b"SNET"
VERSION = 1

KIND_CONV, KIND_POOL, KIND_RELU, KIND_FLATTEN, KIND_DENSE = 1, 2, 3, 4, 5

_HEADER = struct.Struct("<IIIdQI")
_CONV = struct.Struct("<BIIIIIdQB")
_DENSE = struct.Struct("<BIIdQB")


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class TransferError(ValueError):
    """Source and target convolutional stacks are not congruent."""


def _layer_record(layer) -> bytes:
    if layer.kind == "conv":
        oc, ic, k, _ = layer.weights.shape
        return _CONV.pack(KIND_CONV, oc, ic, k, layer.stride, layer.padding,
                          layer.rho, layer.mask.seed, int(layer.frozen))
    if layer.kind == "dense":
        out, inp = layer.weights.shape
        return _DENSE.pack(KIND_DENSE, out, inp, layer.rho, layer.mask.seed, int(layer.frozen))
    tag = {"pool": KIND_POOL, "relu": KIND_RELU, "flatten": KIND_FLATTEN}[layer.kind]
    return bytes([tag])


def to_bytes(net: Network) -> bytes:
    c, hw, _ = net.input_shape
    body = bytearray(struct.pack("<H", VERSION))
    body += _HEADER.pack(c, hw, net.num_classes, net.rho, net.seed, len(net.layers))
    for layer in net.layers:
        rec = _layer_record(layer)
        body += struct.pack("<I", len(rec)) + rec
    for layer in net.masked_layers:
        body += layer.mask.pack()
        body += layer.weights.astype("<f8").tobytes()
        body += layer.bias.astype("<f8").tobytes()
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return MAGIC + bytes(body) + struct.pack("<I", crc)


class _Reader:
    def __init__(self, buf: bytes, pos: int, end: int):
        self.buf, self.pos, self.end = buf, pos, end

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedCheckpoint(f"checkpoint ends inside {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, st: struct.Struct, what: str):
        return st.unpack(self.take(st.size, what))


def _param_shape(desc) -> tuple:
    if desc[0] == KIND_CONV:
        return (desc[1], desc[2], desc[3], desc[3])
    return (desc[1], desc[2])


def from_bytes(buf: bytes) -> Network:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a StochasticNet checkpoint (bad magic)")
    # The descriptor is parsed before the CRC so that a short file is
    # reported as truncated rather than as a checksum failure.
    r = _Reader(buf, 4, max(len(buf) - 4, 4))
    (version,) = struct.unpack("<H", r.take(2, "version"))
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")
    c, hw, num_classes, rho, seed, count = r.unpack(_HEADER, "header")
    specs = []
    for i in range(count):
        (length,) = struct.unpack("<I", r.take(4, f"layer {i} record length"))
        rec = r.take(length, f"layer {i} record")
        kind = rec[0] if rec else 0
        if kind == KIND_CONV and length == _CONV.size:
            specs.append(_CONV.unpack(rec))
        elif kind == KIND_DENSE and length == _DENSE.size:
            specs.append(_DENSE.unpack(rec))
        elif kind in (KIND_POOL, KIND_RELU, KIND_FLATTEN) and length == 1:
            specs.append((kind,))
        else:
            raise CheckpointError(f"layer {i}: bad record (kind {kind}, length {length})")

    payload = 0
    for s in specs:
        if s[0] in (KIND_CONV, KIND_DENSE):
            shape = _param_shape(s)
            n = math.prod(shape)
            payload += (n + 7) // 8 + 8 * n + 8 * shape[0]
    expected = r.pos + payload + 4
    if len(buf) < expected:
        raise TruncatedCheckpoint(f"checkpoint has {len(buf)} bytes, descriptor requires {expected}")
    if len(buf) > expected:
        raise CheckpointError(f"{len(buf) - expected} trailing bytes after checkpoint")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[4:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("checkpoint CRC-32 mismatch")

    layers = []
    for i, s in enumerate(specs):
        kind = s[0]
        if kind == KIND_CONV:
            _, oc, ic, k, stride, pad, lrho, mseed, frozen = s
        elif kind == KIND_DENSE:
            _, out, inp, lrho, mseed, frozen = s
        else:
            layers.append({KIND_POOL: MaxPool2, KIND_RELU: ReLU, KIND_FLATTEN: Flatten}[kind]())
            continue
        shape = _param_shape(s)
        n = math.prod(shape)
        mask = ConnectivityMask.unpack(r.take((n + 7) // 8, "mask"), shape, mseed)
        w = np.frombuffer(r.take(8 * n, "weights"), dtype="<f8").astype(np.float64).reshape(shape)
        b = np.frombuffer(r.take(8 * shape[0], "biases"), dtype="<f8").astype(np.float64)
        if np.any(w[mask.bits == 0] != 0.0):
            raise CheckpointError(f"layer {i}: nonzero weight at a masked-out position")
        if kind == KIND_CONV:
            layer = SparseConv(w, b, mask, stride, pad, rho=lrho, frozen=bool(frozen))
        else:
            layer = SparseDense(w, b, mask, rho=lrho, frozen=bool(frozen))
        # constructor re-masks with np.where; keep the stored bits verbatim
        layer.weights = w.copy()
        layers.append(layer)
    try:
        return Network(layers, num_classes, (c, hw, hw), rho=rho, seed=seed)
    except ValueError as e:
        raise CheckpointError(f"inconsistent architecture descriptor: {e}") from e


def save(net: Network, path) -> bytes:
    data = to_bytes(net)
    Path(path).write_bytes(data)
    return data


def load(path) -> Network:
    return from_bytes(Path(path).read_bytes())


def conv_digests(net: Network) -> list:
    return [layer_digest(l) for l in net.conv_layers]


def transfer_conv(source: Network, target: Network, freeze: bool = True) -> Network:
    """Copy every conv layer's weights, biases and mask from ``source`` into ``target``.

    Masks travel with the weights because the mask defines which parameters
    exist. Transferred layers are frozen unless ``freeze`` is false; the
    target's dense layers are left untouched. ``target`` is modified in place
    and returned.
    """
    src, dst = source.conv_layers, target.conv_layers
    if len(src) != len(dst):
        raise TransferError(f"source has {len(src)} conv layers, target has {len(dst)}")
    for i, (a, b) in enumerate(zip(src, dst), start=1):
        if (a.weights.shape, a.stride, a.padding) != (b.weights.shape, b.stride, b.padding):
            raise TransferError(
                f"conv layer {i} differs: source {a.weights.shape} stride {a.stride} pad {a.padding}, "
                f"target {b.weights.shape} stride {b.stride} pad {b.padding}")
    for a, b in zip(src, dst):
        b.weights = a.weights.copy()
        b.bias = a.bias.copy()
        b.mask = ConnectivityMask(a.mask.bits.copy(), a.mask.seed)
        b.rho = a.rho
        b.frozen = freeze
    return target


@dataclass
class ProtocolResult:
    baseline_log: TrainingLog
    transfer_log: TrainingLog
    source_log: TrainingLog
    source_net: Network
    transfer_net: Network
    baseline_net: Network
    target_subset: Dataset
    # conv digests of the transfer net right after transplanting, before head training
    transferred_digests: list = field(default_factory=list)


def run_paper_protocol(source_train: Dataset, source_test: Dataset, target_train_fraction: float,
                       target_train: Dataset, target_test: Dataset, cfg_source: SGDConfig,
                       cfg_target: SGDConfig, seeds: tuple, rho: float = 0.75,
                       stratified: bool = True, fine_tune_conv: bool = False,
                       source_net: Optional[Network] = None) -> ProtocolResult:
    """Source training, conv transfer plus head training, and a from-scratch baseline.

    ``seeds`` is ``(source_net_seed, target_net_seed, subsample_seed)``. The
    baseline and transfer nets share ``target_net_seed`` so their dense
    layers start identical. A pre-trained ``source_net`` skips step one.
    """
    source_seed, target_seed, subsample_seed = seeds
    c, hw = source_train.image_shape[0], source_train.image_shape[1]

    if source_net is None:
        source_net = build_paper_architecture(c, hw, source_train.num_classes, rho, source_seed)
        source_log = train(source_net, source_train, source_test, cfg_source)
    else:
        source_log = TrainingLog()

    subset = subsample_stratified(target_train, target_train_fraction, subsample_seed, stratified)
    tc, thw = target_train.image_shape[0], target_train.image_shape[1]

    transfer_net = build_paper_architecture(tc, thw, target_train.num_classes, rho, target_seed)
    transfer_conv(source_net, transfer_net, freeze=not fine_tune_conv)
    digests = conv_digests(transfer_net)
    transfer_log = train(transfer_net, subset, target_test, cfg_target)

    baseline_net = build_paper_architecture(tc, thw, target_train.num_classes, rho, target_seed)
    baseline_log = train(baseline_net, subset, target_test, cfg_target)

    return ProtocolResult(baseline_log, transfer_log, source_log, source_net, transfer_net,
                          baseline_net, subset, digests)
