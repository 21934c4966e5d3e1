"""Single-file binary model checkpoints.

Layout: magic, version, integer dims, float settings, the seen-class list,
then flat little-endian float32 weight sections in declaration order
(backbone, adapters, heads, optional drift-compensator matrix).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .drift import DriftCompensator
from .errors import DataFormatError
from .model import Adapter, CosineHead, FrozenBackbone, HeadBank, ModelState, _Block

MAGIC = b"PDCK"
VERSION = 1


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(fh, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape))
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise DataFormatError("checkpoint truncated inside a weight section")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save_checkpoint(model: ModelState, path: str | Path,
                    compensator: DriftCompensator | None = None) -> None:
    backbone = model.backbone
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack(
            "<IIIIIII",
            backbone.embed_dim, backbone.n_blocks,
            model.adapters[0].w_down.shape[1] if model.adapters else 0,
            backbone.patch_len, backbone.channels, backbone.length,
            1 if compensator is not None else 0,
        ))
        scale = model.adapters[0].scale if model.adapters else 1.0
        fh.write(struct.pack("<ddd", scale, model.bank.margin, model.bank.logit_scale))
        fh.write(struct.pack("<I", len(model.bank.heads)))
        for head in model.bank.heads:
            fh.write(struct.pack("<II", head.task_id, len(head.class_ids)))
            fh.write(struct.pack(f"<{len(head.class_ids)}I", *head.class_ids))
        for t in backbone.weight_tensors():
            _write_array(fh, t.data)
        for adapter in model.adapters:
            _write_array(fh, adapter.w_down.data)
            _write_array(fh, adapter.w_up.data)
        for head in model.bank.heads:
            _write_array(fh, head.weights.data)
        if compensator is not None:
            _write_array(fh, compensator.weight.data)


def load_checkpoint(path: str | Path) -> tuple[ModelState, DriftCompensator | None]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise DataFormatError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        (embed_dim, n_blocks, bottleneck, patch_len, channels, length,
         has_dcn) = struct.unpack("<IIIIIII", fh.read(28))
        scale, margin, logit_scale = struct.unpack("<ddd", fh.read(24))
        (n_heads,) = struct.unpack("<I", fh.read(4))
        head_meta = []
        for _ in range(n_heads):
            task_id, n_classes = struct.unpack("<II", fh.read(8))
            class_ids = struct.unpack(f"<{n_classes}I", fh.read(4 * n_classes))
            head_meta.append((task_id, class_ids))

        backbone = FrozenBackbone.__new__(FrozenBackbone)
        backbone.channels = channels
        backbone.length = length
        backbone.patch_len = patch_len
        backbone.embed_dim = embed_dim
        backbone.n_blocks = n_blocks
        backbone.hidden_dim = 2 * embed_dim
        backbone.out_scale = 1.0 / embed_dim ** 0.5
        in_dim = channels * patch_len
        backbone.w_embed = Tensor(_read_array(fh, (in_dim, embed_dim)))
        backbone.b_embed = Tensor(_read_array(fh, (embed_dim,)))
        backbone.blocks = []
        for _ in range(n_blocks):
            backbone.blocks.append(_Block(
                w1=Tensor(_read_array(fh, (embed_dim, backbone.hidden_dim))),
                b1=Tensor(_read_array(fh, (backbone.hidden_dim,))),
                w2=Tensor(_read_array(fh, (backbone.hidden_dim, embed_dim))),
                b2=Tensor(_read_array(fh, (embed_dim,))),
            ))

        adapters = []
        for _ in range(n_blocks):
            adapter = Adapter.__new__(Adapter)
            adapter.w_down = Tensor(_read_array(fh, (embed_dim, bottleneck)), requires_grad=True)
            adapter.w_up = Tensor(_read_array(fh, (bottleneck, embed_dim)), requires_grad=True)
            adapter.scale = float(scale)
            adapters.append(adapter)

        bank = HeadBank(margin=margin, logit_scale=logit_scale)
        for task_id, class_ids in head_meta:
            head = CosineHead.__new__(CosineHead)
            head.task_id = task_id
            head.class_ids = tuple(int(c) for c in class_ids)
            head.weights = Tensor(_read_array(fh, (len(class_ids), embed_dim)),
                                  requires_grad=True)
            bank.append(head)

        compensator = None
        if has_dcn:
            compensator = DriftCompensator(embed_dim)
            compensator.weight.data[...] = _read_array(fh, (embed_dim, embed_dim))

    return ModelState(backbone, adapters, bank), compensator
