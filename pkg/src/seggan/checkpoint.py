"""Flat binary checkpoint format and the sidecar text manifest.

Layout (all integers little-endian):

    magic   4 bytes  b"SGCP"
    version u32      1
    tag     u16 len + utf-8       architecture tag, e.g. "unet" or "unet+d6"
    info    u32 len + utf-8 JSON  build fields needed to reconstruct the model
    count   u32                   number of parameters
    per parameter:
        name  u16 len + utf-8     dotted parameter name
        rank  u8
        dims  rank * u32
        data  float32 values, row-major

Values are stored as float32 regardless of the in-memory precision.  The JSON
info block carries everything `load_checkpoint` needs to rebuild the module
tree (topology, widths, image size, discriminator design, seed) plus a free
`extra` dict the CLI uses to echo the run config.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .models import (
    DiscriminatorSpec,
    GanModel,
    GeneratorSpec,
    build_discriminator,
    build_generator,
)

__all__ = ["save_checkpoint", "load_checkpoint", "write_manifest", "generator_info", "gan_info"]

_MAGIC = b"SGCP"
_VERSION = 1


def generator_info(spec: GeneratorSpec, seed: int, extra: dict | None = None) -> dict:
    return {
        "kind": "generator",
        "tag": spec.topology,
        "topology": spec.topology,
        "base_channels": spec.base_channels,
        "in_channels": spec.in_channels,
        "out_channels": spec.out_channels,
        "upsample": spec.upsample,
        "seed": seed,
        "extra": extra or {},
    }


def gan_info(
    spec: GeneratorSpec,
    disc_design: str,
    image_hw: tuple[int, int],
    dropout_rate: float,
    seed: int,
    extra: dict | None = None,
) -> dict:
    info = generator_info(spec, seed, extra)
    info.update(
        {
            "kind": "gan",
            "tag": f"{spec.topology}+{disc_design}",
            "disc_design": disc_design,
            "image_hw": list(image_hw),
            "dropout_rate": dropout_rate,
        }
    )
    return info


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for checkpoint header")
    return struct.pack("<H", len(raw)) + raw


def save_checkpoint(path: str, model, info: dict) -> None:
    params = model.parameters()
    blob = [
        _MAGIC,
        struct.pack("<I", _VERSION),
        _pack_str(info.get("tag", "")),
    ]
    info_json = json.dumps(info, sort_keys=True).encode("utf-8")
    blob.append(struct.pack("<I", len(info_json)))
    blob.append(info_json)
    blob.append(struct.pack("<I", len(params)))
    for name, node in params:
        arr = np.asarray(node.value.data, dtype="<f4")
        blob.append(_pack_str(name))
        blob.append(struct.pack("<B", arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u16(self):
        return struct.unpack("<H", self.take(2))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def string(self):
        return self.take(self.u16()).decode("utf-8")


def _rebuild(info: dict):
    spec = GeneratorSpec(
        topology=info["topology"],
        base_channels=info["base_channels"],
        in_channels=info["in_channels"],
        out_channels=info["out_channels"],
        upsample=info["upsample"],
    )
    generator = build_generator(spec, info["seed"])
    if info["kind"] == "generator":
        return generator
    if info["kind"] == "gan":
        h, w = info["image_hw"]
        width = 2 * spec.out_channels * h * w
        disc = build_discriminator(info["disc_design"], width, info["seed"], info["dropout_rate"])
        return GanModel(generator, disc)
    raise ValueError(f"unknown checkpoint kind {info['kind']!r}")


def load_checkpoint(path: str):
    """Rebuild the model described by the header and fill in the stored values."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    r.string()  # tag, informational; the JSON block is authoritative
    info = json.loads(r.take(r.u32()).decode("utf-8"))
    count = r.u32()
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.string()
        rank = r.u8()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        values[name] = arr
    model = _rebuild(info)
    model.load_param_values(values)
    return model, info


def write_manifest(path: str, info: dict, records=None) -> None:
    """Human-readable sidecar: config echo plus final-epoch losses."""
    lines = [f"tag = {info.get('tag', '')}", f"kind = {info.get('kind', '')}"]
    for key in sorted(info):
        if key in ("tag", "kind", "extra"):
            continue
        lines.append(f"{key} = {info[key]}")
    for key in sorted(info.get("extra", {})):
        lines.append(f"{key} = {info['extra'][key]}")
    if records:
        last = records[-1]
        lines.append(f"epochs_completed = {last.epoch + 1}")
        lines.append(f"final_gen_loss = {last.gen_loss:.10g}")
        if last.disc_loss is not None:
            lines.append(f"final_disc_loss = {last.disc_loss:.10g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
